use candle_core::Tensor;

use super::layers::{conv2d_per_item, max_pool_3x3_s2, BatchNorm, Conv2d, PRelu, StatSets};
use super::params::{Ctx, Scope};
use crate::error::{Error, Result};

pub const FRONT_KERNEL_T: usize = 5;
const FRONT_KERNEL_S: usize = 7;

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    act1: PRelu,
    conv2: Conv2d,
    bn2: BatchNorm,
    down: Option<(Conv2d, BatchNorm)>,
    act2: PRelu,
}

impl BasicBlock {
    fn new(s: &mut Scope, inp: usize, out: usize, stride: usize, stats: StatSets) -> Result<Self> {
        let down = if stride != 1 || inp != out {
            let mut d = s.sub("down");
            Some((
                Conv2d::new(&mut d.sub("conv"), inp, out, 1, stride, 0, false)?,
                BatchNorm::new(&mut d.sub("bn"), out, stats)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(&mut s.sub("conv1"), inp, out, 3, stride, 1, false)?,
            bn1: BatchNorm::new(&mut s.sub("bn1"), out, stats)?,
            act1: PRelu::new(&mut s.sub("act1"), out)?,
            conv2: Conv2d::new(&mut s.sub("conv2"), out, out, 3, 1, 1, false)?,
            bn2: BatchNorm::new(&mut s.sub("bn2"), out, stats)?,
            down,
            act2: PRelu::new(&mut s.sub("act2"), out)?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = self.act1.forward(&self.bn1.forward(&self.conv1.forward(x)?, ctx)?)?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, ctx)?;
        let skip = match &self.down {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, ctx)?,
            None => x.clone(),
        };
        self.act2.forward(&(h + skip)?)
    }
}

/// Lip-region frames encoder: a spatio-temporal convolution over 5 frames
/// followed by an 18-layer residual network applied to each frame and global
/// average pooling. Output has one feature vector per input frame.
pub struct VideoEncoder {
    front_weight: candle_core::Var,
    front_bn: BatchNorm,
    front_act: PRelu,
    blocks: Vec<BasicBlock>,
    out_dim: usize,
}

impl VideoEncoder {
    /// Channel widths are 64, 128, 256 and 512 divided by `width_divisor`.
    pub fn new(s: &mut Scope, width_divisor: usize, stats: StatSets) -> Result<Self> {
        if width_divisor == 0 || 64 % width_divisor != 0 {
            return Err(Error::config(format!(
                "width_divisor {width_divisor} must divide 64"
            )));
        }
        let widths: Vec<usize> = [64, 128, 256, 512].iter().map(|w| w / width_divisor).collect();
        let c0 = widths[0];
        let fan_in = 3 * FRONT_KERNEL_T * FRONT_KERNEL_S * FRONT_KERNEL_S;
        let front_weight = s.uniform(
            "front.conv.weight",
            &[c0, 3, FRONT_KERNEL_T, FRONT_KERNEL_S, FRONT_KERNEL_S],
            1.0 / (fan_in as f64).sqrt(),
        )?;
        let front_bn = BatchNorm::new(&mut s.sub("front.bn"), c0, stats)?;
        let front_act = PRelu::new(&mut s.sub("front.act"), c0)?;
        let mut blocks = Vec::new();
        let mut inp = c0;
        for (stage, &w) in widths.iter().enumerate() {
            for b in 0..2 {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(
                    &mut s.sub(&format!("layer{}.{b}", stage + 1)),
                    inp,
                    w,
                    stride,
                    stats,
                )?);
                inp = w;
            }
        }
        Ok(Self {
            front_weight,
            front_bn,
            front_act,
            blocks,
            out_dim: inp,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Spatio-temporal front end on (batch, frames, 3, H, W); returns
    /// (batch*frames, C, H', W') after normalization, activation and pooling.
    pub fn frontend(&self, frames: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let dims = frames.dims();
        if dims.len() != 5 || dims[2] != 3 {
            return Err(Error::shape(format!(
                "video encoder expects (batch, frames, 3, H, W), got {dims:?}"
            )));
        }
        let (b, n, c, h, w) = frames.dims5()?;
        let half = FRONT_KERNEL_T / 2;
        let padded = frames.pad_with_zeros(1, half, half)?;
        let shifted: Vec<Tensor> = (0..FRONT_KERNEL_T)
            .map(|dt| padded.narrow(1, dt, n))
            .collect::<std::result::Result<_, _>>()?;
        // Stack the 5 temporal taps along channels: (b*n, 5*3, h, w).
        let stacked = Tensor::stack(&shifted, 2)?.reshape((b * n, FRONT_KERNEL_T * c, h, w))?;
        let c0 = self.front_weight.dim(0)?;
        let kernel = self
            .front_weight
            .permute((0, 2, 1, 3, 4))?
            .reshape((c0, FRONT_KERNEL_T * c, FRONT_KERNEL_S, FRONT_KERNEL_S))?
            .contiguous()?;
        let y = conv2d_per_item(&stacked, &kernel, FRONT_KERNEL_S / 2, 2)?;
        let y = self.front_act.forward(&self.front_bn.forward(&y, ctx)?)?;
        max_pool_3x3_s2(&y)
    }

    /// (batch, frames, 3, H, W) -> (batch, frames, out_dim)
    pub fn forward(&self, frames: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (b, n) = (frames.dim(0)?, frames.dim(1)?);
        let mut h = self.frontend(frames, ctx)?;
        for block in &self.blocks {
            h = block.forward(&h, ctx)?;
        }
        let pooled = h.flatten_from(2)?.mean(2)?.reshape((b, n, self.out_dim))?;
        Ok(if ctx.frozen_video { pooled.detach() } else { pooled })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{flat_f32, ModalityMode, ParamStore};
    use candle_core::{DType, Device};

    fn frames(n: usize, h: usize, w: usize, seed: usize) -> Tensor {
        let data: Vec<f32> = (0..n * 3 * h * w)
            .map(|i| (((i + seed) * 2654435761usize) % 1000) as f32 / 500.0 - 1.0)
            .collect();
        Tensor::from_vec(data, (1, n, 3, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn one_vector_per_frame_at_any_resolution() {
        let mut ps = ParamStore::new(DType::F32, 0);
        let enc = VideoEncoder::new(&mut ps.root(), 16, StatSets::Shared).unwrap();
        let ctx = Ctx::eval(ModalityMode::AV);
        for (h, w) in [(32, 32), (40, 22)] {
            let y = enc.forward(&frames(6, h, w, 1), &ctx).unwrap();
            assert_eq!(y.dims(), &[1, 6, 32]);
        }
    }

    #[test]
    fn rejects_non_rgb() {
        let mut ps = ParamStore::new(DType::F32, 0);
        let enc = VideoEncoder::new(&mut ps.root(), 16, StatSets::Shared).unwrap();
        let x = Tensor::zeros((1, 2, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(enc.forward(&x, &Ctx::eval(ModalityMode::AV)).is_err());
    }

    #[test]
    fn frontend_support_is_five_frames() {
        let mut ps = ParamStore::new(DType::F32, 0);
        let enc = VideoEncoder::new(&mut ps.root(), 16, StatSets::Shared).unwrap();
        let ctx = Ctx::eval(ModalityMode::AV);
        let a = frames(10, 16, 16, 0);
        let mut raw = flat_f32(&a).unwrap();
        let per = 3 * 16 * 16;
        for v in &mut raw[9 * per..] {
            *v = -*v;
        }
        let b = Tensor::from_vec(raw, (1, 10, 3, 16, 16), &Device::Cpu).unwrap();
        let fa = flat_f32(&enc.frontend(&a, &ctx).unwrap()).unwrap();
        let fb = flat_f32(&enc.frontend(&b, &ctx).unwrap()).unwrap();
        let per_out = fa.len() / 10;
        assert_eq!(fa[..7 * per_out], fb[..7 * per_out]);
        assert_ne!(fa[7 * per_out..], fb[7 * per_out..]);
    }
}
