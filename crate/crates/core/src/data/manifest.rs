use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::formats::create_parent;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub id: String,
    pub speaker_id: String,
    pub video_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth_audio_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    pub split: Split,
}

/// JSON-lines clip list. Relative paths resolve against `base_dir`, the
/// directory holding the manifest file.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            rows,
            base_dir: base_dir.into(),
        };
        m.check_ids()?;
        Ok(m)
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.rows {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::data(&self.base_dir, format!("duplicate clip id `{}`", r.id)));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let base_dir = base_dir.into();
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: ManifestRow = serde_json::from_str(line)
                .map_err(|e| Error::data(&base_dir, format!("manifest line {}: {e}", i + 1)))?;
            rows.push(row);
        }
        Self::new(rows, base_dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::data(path, e.to_string()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base).map_err(|e| match e {
            Error::Data { msg, .. } => Error::data(path, msg),
            other => other,
        })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        create_parent(path)?;
        fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.rows.len()).filter(|&i| self.rows[i].split == split).collect()
    }

    /// Resolved path of a required optional field, or a config error naming it.
    pub fn require(&self, row: usize, field: &'static str) -> Result<PathBuf> {
        let r = &self.rows[row];
        let p = match field {
            "audio_path" => r.audio_path.as_ref(),
            "synth_audio_path" => r.synth_audio_path.as_ref(),
            _ => return Err(Error::config(format!("unknown manifest field `{field}`"))),
        };
        p.map(|p| self.resolve(p))
            .ok_or_else(|| Error::config(format!("manifest row `{}` is missing `{field}`", r.id)))
    }

    /// Checks that every row carries `field`, naming the first offender.
    pub fn require_all(&self, field: &'static str) -> Result<()> {
        (0..self.rows.len()).try_for_each(|i| self.require(i, field).map(|_| ()))
    }
}

/// Audio of a random other clip of the same speaker. With no other clip
/// available the row's own audio is returned and the flag is set.
pub fn pick_speaker_reference(m: &Manifest, row: usize, rng: &mut impl Rng) -> Result<(PathBuf, bool)> {
    let me = &m.rows[row];
    let others: Vec<usize> = (0..m.rows.len())
        .filter(|&i| i != row && m.rows[i].speaker_id == me.speaker_id && m.rows[i].audio_path.is_some())
        .collect();
    if others.is_empty() {
        log::warn!("speaker `{}` has a single clip; using the clip's own audio as reference", me.speaker_id);
        return Ok((m.require(row, "audio_path")?, true));
    }
    let pick = others[rng.random_range(0..others.len())];
    Ok((m.require(pick, "audio_path")?, false))
}
