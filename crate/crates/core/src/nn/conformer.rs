use candle_core::{Tensor, D};

use super::layers::{glu_channels, softmax_last, swish, BatchNorm, Conv1d, Conv1dSpec, LayerNorm, Linear, StatSets};
use super::params::{Ctx, Scope};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConformerConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
}

impl Default for ConformerConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            heads: 4,
            ff_dim: 2048,
            conv_kernel: 31,
            dropout: 0.1,
        }
    }
}

struct FeedForward {
    norm: LayerNorm,
    w1: Linear,
    w2: Linear,
}

impl FeedForward {
    fn new(s: &mut Scope, cfg: &ConformerConfig) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&mut s.sub("norm"), cfg.dim)?,
            w1: Linear::new(&mut s.sub("w1"), cfg.dim, cfg.ff_dim, true)?,
            w2: Linear::new(&mut s.sub("w2"), cfg.ff_dim, cfg.dim, true)?,
        })
    }

    fn forward(&self, x: &Tensor, p: f64, ctx: &mut Ctx) -> Result<Tensor> {
        let h = swish(&self.w1.forward(&self.norm.forward(x)?)?)?;
        let h = ctx.dropout(&h, p)?;
        ctx.dropout(&self.w2.forward(&h)?, p)
    }
}

/// Sinusoidal encodings of relative positions T-1, T-2, ..., -(T-1).
fn relative_positions(t: usize, dim: usize, like: &Tensor) -> Result<Tensor> {
    let n = 2 * t - 1;
    let mut pe = vec![0.0; n * dim];
    for row in 0..n {
        let pos = (t as f64 - 1.0) - row as f64;
        for k in 0..dim / 2 {
            let freq = (-((2 * k) as f64) * 10000f64.ln() / dim as f64).exp();
            pe[row * dim + 2 * k] = (pos * freq).sin();
            pe[row * dim + 2 * k + 1] = (pos * freq).cos();
        }
    }
    Ok(Tensor::from_vec(pe, (n, dim), like.device())?.to_dtype(like.dtype())?)
}

/// Multi-head self-attention with learned content and position biases over
/// relative sinusoidal position encodings.
struct RelPosAttention {
    norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    pos: Linear,
    out: Linear,
    pos_bias_u: candle_core::Var,
    pos_bias_v: candle_core::Var,
    heads: usize,
}

impl RelPosAttention {
    fn new(s: &mut Scope, cfg: &ConformerConfig) -> Result<Self> {
        let d = cfg.dim;
        let dk = d / cfg.heads;
        let bound = (6.0 / (cfg.heads + dk) as f64).sqrt();
        Ok(Self {
            norm: LayerNorm::new(&mut s.sub("norm"), d)?,
            q: Linear::new(&mut s.sub("q"), d, d, true)?,
            k: Linear::new(&mut s.sub("k"), d, d, true)?,
            v: Linear::new(&mut s.sub("v"), d, d, true)?,
            pos: Linear::new(&mut s.sub("pos"), d, d, false)?,
            out: Linear::new(&mut s.sub("out"), d, d, true)?,
            pos_bias_u: s.uniform("pos_bias_u", &[cfg.heads, dk], bound)?,
            pos_bias_v: s.uniform("pos_bias_v", &[cfg.heads, dk], bound)?,
            heads: cfg.heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    fn forward(&self, x: &Tensor, p: f64, ctx: &mut Ctx) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let dk = d / self.heads;
        let xn = self.norm.forward(x)?;
        let pe = ctx.dropout(&relative_positions(t, d, x)?, p)?;
        let q = self.q.forward(&xn)?.reshape((b, t, self.heads, dk))?;
        let k = self.split(&self.k.forward(&xn)?)?;
        let v = self.split(&self.v.forward(&xn)?)?;
        let pk = self
            .pos
            .forward(&pe)?
            .reshape((2 * t - 1, self.heads, dk))?
            .transpose(0, 1)?
            .contiguous()?;
        let qu = q.broadcast_add(&self.pos_bias_u)?.transpose(1, 2)?.contiguous()?;
        let qv = q.broadcast_add(&self.pos_bias_v)?.transpose(1, 2)?.contiguous()?;
        let ac = qu.matmul(&k.transpose(2, 3)?)?;
        // (b, h, t, 2t-1): score of query i against relative position row r.
        let bd_full = qv.broadcast_matmul(&pk.transpose(1, 2)?.unsqueeze(0)?)?;
        let idx: Vec<u32> = (0..b * self.heads)
            .flat_map(|_| (0..t).flat_map(move |i| (0..t).map(move |j| (t - 1 - i + j) as u32)))
            .collect();
        let idx = Tensor::from_vec(idx, (b, self.heads, t, t), x.device())?;
        let bd = bd_full.contiguous()?.gather(&idx, D::Minus1)?;
        let scores = (ac + bd)?.affine(1.0 / (dk as f64).sqrt(), 0.0)?;
        let attn = ctx.dropout(&softmax_last(&scores)?, p)?;
        let ctxv = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
        ctx.dropout(&self.out.forward(&ctxv)?, p)
    }
}

struct ConvModule {
    norm: LayerNorm,
    pw1: Conv1d,
    depthwise: Conv1d,
    bn: BatchNorm,
    pw2: Conv1d,
}

impl ConvModule {
    fn new(s: &mut Scope, cfg: &ConformerConfig, stats: StatSets) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            norm: LayerNorm::new(&mut s.sub("norm"), d)?,
            pw1: Conv1d::new(&mut s.sub("pw1"), Conv1dSpec::new(d, 2 * d, 1))?,
            depthwise: Conv1d::new(
                &mut s.sub("depthwise"),
                Conv1dSpec::new(d, d, cfg.conv_kernel).same().groups(d),
            )?,
            bn: BatchNorm::new(&mut s.sub("bn"), d, stats)?,
            pw2: Conv1d::new(&mut s.sub("pw2"), Conv1dSpec::new(d, d, 1))?,
        })
    }

    /// Depthwise convolution as a sum of shifted, per-channel scaled copies.
    /// Equivalent to the grouped convolution but far cheaper on CPU when
    /// every channel is its own group.
    fn depthwise(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, t) = x.dims3()?;
        let k = self.depthwise.spec.kernel;
        let pad = self.depthwise.spec.padding;
        let w = self.depthwise.kernel.value()?.reshape((c, k))?;
        let xp = x.pad_with_zeros(2, pad, k - 1 - pad)?;
        let mut acc: Option<Tensor> = None;
        for j in 0..k {
            let term = xp
                .narrow(2, j, t)?
                .broadcast_mul(&w.narrow(1, j, 1)?.reshape((1, c, 1))?)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
        let y = acc.expect("kernel has at least one tap");
        match &self.depthwise.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, c, 1))?)?),
            None => Ok(y),
        }
    }

    fn forward(&self, x: &Tensor, p: f64, ctx: &mut Ctx) -> Result<Tensor> {
        let h = self.norm.forward(x)?.transpose(1, 2)?.contiguous()?;
        let h = glu_channels(&self.pw1.forward(&h)?)?;
        let h = self.depthwise(&h)?;
        let h = swish(&self.bn.forward(&h, ctx)?)?;
        let h = self.pw2.forward(&h)?.transpose(1, 2)?;
        ctx.dropout(&h, p)
    }
}

/// Macaron conformer block: half-step feed-forward, relative-position
/// self-attention, convolution module, half-step feed-forward, layer norm.
pub struct ConformerBlock {
    ff1: FeedForward,
    attn: RelPosAttention,
    conv: ConvModule,
    ff2: FeedForward,
    final_norm: LayerNorm,
    cfg: ConformerConfig,
}

impl ConformerBlock {
    pub fn new(s: &mut Scope, cfg: &ConformerConfig, stats: StatSets) -> Result<Self> {
        if cfg.dim % cfg.heads != 0 || cfg.conv_kernel % 2 == 0 {
            return Err(Error::config(
                "conformer needs dim divisible by heads and an odd conv kernel",
            ));
        }
        Ok(Self {
            ff1: FeedForward::new(&mut s.sub("ff1"), cfg)?,
            attn: RelPosAttention::new(&mut s.sub("attn"), cfg)?,
            conv: ConvModule::new(&mut s.sub("conv"), cfg, stats)?,
            ff2: FeedForward::new(&mut s.sub("ff2"), cfg)?,
            final_norm: LayerNorm::new(&mut s.sub("final_norm"), cfg.dim)?,
            cfg: *cfg,
        })
    }

    /// (batch, time, dim) -> (batch, time, dim)
    pub fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let d = x.dim(D::Minus1)?;
        if d != self.cfg.dim {
            return Err(Error::shape(format!(
                "conformer expects {} features, got {d}",
                self.cfg.dim
            )));
        }
        let p = self.cfg.dropout;
        let x = (x + self.ff1.forward(x, p, ctx)?.affine(0.5, 0.0)?)?;
        let x = (&x + self.attn.forward(&x, p, ctx)?)?;
        let x = (&x + self.conv.forward(&x, p, ctx)?)?;
        let x = (&x + self.ff2.forward(&x, p, ctx)?.affine(0.5, 0.0)?)?;
        self.final_norm.forward(&x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{flat_f64, Kind, ModalityMode, ParamStore};
    use candle_core::{DType, Device};

    fn tiny() -> ConformerConfig {
        ConformerConfig {
            dim: 8,
            heads: 2,
            ff_dim: 16,
            conv_kernel: 5,
            dropout: 0.1,
        }
    }

    #[test]
    fn shape_is_preserved() {
        let mut ps = ParamStore::new(DType::F32, 0);
        let block = ConformerBlock::new(&mut ps.root(), &tiny(), StatSets::Shared).unwrap();
        for t in [1, 7, 33] {
            let x = Tensor::ones((2, t, 8), DType::F32, &Device::Cpu).unwrap();
            let mut ctx = Ctx::train(ModalityMode::AV, 0);
            assert_eq!(block.forward(&x, &mut ctx).unwrap().dims(), &[2, t, 8]);
        }
    }

    #[test]
    fn zero_weights_reduce_to_layer_norm() {
        let mut ps = ParamStore::new(DType::F64, 0);
        let block = ConformerBlock::new(&mut ps.root(), &tiny(), StatSets::Shared).unwrap();
        for (name, var, kind) in ps.iter() {
            if kind == Kind::Param && !name.contains("norm") && !name.contains(".bn.") {
                var.set(&var.zeros_like().unwrap()).unwrap();
            }
        }
        let data: Vec<f64> = (0..3 * 8).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let x = Tensor::from_vec(data.clone(), (1, 3, 8), &Device::Cpu).unwrap();
        let y = flat_f64(&block.forward(&x, &mut Ctx::eval(ModalityMode::AV)).unwrap()).unwrap();
        for row in 0..3 {
            let r = &data[row * 8..row * 8 + 8];
            let mean = r.iter().sum::<f64>() / 8.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for c in 0..8 {
                let want = (r[c] - mean) / (var + 1e-5).sqrt();
                assert!((y[row * 8 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn depthwise_shortcut_matches_grouped_conv() {
        let mut ps = ParamStore::new(DType::F64, 3);
        let m = ConvModule::new(&mut ps.root(), &tiny(), StatSets::Shared).unwrap();
        let data: Vec<f64> = (0..2 * 8 * 9).map(|i| ((i * 13) % 17) as f64 / 17.0 - 0.5).collect();
        let x = Tensor::from_vec(data, (2, 8, 9), &Device::Cpu).unwrap();
        let a = flat_f64(&m.depthwise(&x).unwrap()).unwrap();
        let b = flat_f64(&m.depthwise.forward(&x).unwrap()).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_width() {
        let mut ps = ParamStore::new(DType::F32, 0);
        let block = ConformerBlock::new(&mut ps.root(), &tiny(), StatSets::Shared).unwrap();
        let x = Tensor::ones((1, 4, 6), DType::F32, &Device::Cpu).unwrap();
        assert!(block.forward(&x, &mut Ctx::eval(ModalityMode::AV)).is_err());
    }
}
