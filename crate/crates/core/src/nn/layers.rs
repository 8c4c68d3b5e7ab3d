use candle_core::{DType, Tensor, Var, D};

use super::params::{Ctx, Kind, Scope};
use crate::dsp::stft::reflect_index;
use crate::error::{Error, Result};

fn index_tensor(idx: Vec<u32>, like: &Tensor) -> Result<Tensor> {
    let n = idx.len();
    Ok(Tensor::from_vec(idx, n, like.device())?)
}

// candle's kernel gradient for conv1d/conv2d is wrong when the batch has
// more than one item and the transposed operands are non-contiguous, so
// every conv runs one batch item at a time.
pub(crate) fn conv1d_per_item(
    x: &Tensor,
    w: &Tensor,
    padding: usize,
    stride: usize,
    dilation: usize,
    groups: usize,
) -> Result<Tensor> {
    // Explicit padding: candle's input gradient underflows when the padded
    // border exceeds (out_len - 1) * stride.
    let x = if padding > 0 { x.pad_with_zeros(2, padding, padding)? } else { x.contiguous()? };
    let items = (0..x.dim(0)?)
        .map(|i| x.narrow(0, i, 1)?.conv1d(w, 0, stride, dilation, groups))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Tensor::cat(&items, 0)?)
}

pub(crate) fn conv2d_per_item(x: &Tensor, w: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let x = x.contiguous()?;
    let items = (0..x.dim(0)?)
        .map(|i| x.narrow(0, i, 1)?.conv2d(w, padding, stride, 1, 1))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Tensor::cat(&items, 0)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

pub fn swish(x: &Tensor) -> Result<Tensor> {
    Ok(x.mul(&sigmoid(x)?)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Gated linear unit along dimension 1: first half times sigmoid of the
/// second half.
pub fn glu_channels(x: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)? / 2;
    Ok(x.narrow(1, 0, c)?.mul(&sigmoid(&x.narrow(1, c, c)?)?)?)
}

/// Mirror padding of the last dimension.
pub fn reflect_pad_last(x: &Tensor, left: usize, right: usize) -> Result<Tensor> {
    if left == 0 && right == 0 {
        return Ok(x.clone());
    }
    let len = x.dim(D::Minus1)?;
    let idx: Vec<u32> = (0..len + left + right)
        .map(|i| reflect_index(i as isize - left as isize, len) as u32)
        .collect();
    let last = x.rank() - 1;
    Ok(x.contiguous()?.index_select(&index_tensor(idx, x)?, last)?)
}

/// Keeps every `step`-th element of dimension `dim`, starting at 0.
pub fn subsample(x: &Tensor, dim: usize, step: usize, count: usize) -> Result<Tensor> {
    if step == 1 && x.dim(dim)? == count {
        return Ok(x.clone());
    }
    let idx: Vec<u32> = (0..count).map(|i| (i * step) as u32).collect();
    Ok(x.index_select(&index_tensor(idx, x)?, dim)?)
}

/// 3x3 max pooling, stride 2, padding 1 over the last two dimensions of an
/// NCHW tensor. Edge replication stands in for -inf padding: the replicated
/// value already lies inside each window.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let out_h = (h + 2 - 3) / 2 + 1;
    let out_w = (w + 2 - 3) / 2 + 1;
    let xp = x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    let rows = xp
        .narrow(2, 0, h)?
        .maximum(&xp.narrow(2, 1, h)?)?
        .maximum(&xp.narrow(2, 2, h)?)?;
    let rows = subsample(&rows, 2, 2, out_h)?;
    let cols = rows
        .narrow(3, 0, w)?
        .maximum(&rows.narrow(3, 1, w)?)?
        .maximum(&rows.narrow(3, 2, w)?)?;
    subsample(&cols, 3, 2, out_w)
}

/// 1D average pooling with kernel 4, stride 2, padding 1, excluding the
/// padded zeros from the average.
pub fn avg_pool_k4_s2(x: &Tensor) -> Result<Tensor> {
    let len = x.dim(D::Minus1)?;
    let out = (len + 2 - 4) / 2 + 1;
    let xp = x.pad_with_zeros(D::Minus1, 1, 1)?;
    let mut sum = xp.narrow(D::Minus1, 0, len - 1)?;
    for k in 1..4 {
        sum = sum.add(&xp.narrow(D::Minus1, k, len - 1)?)?;
    }
    let sum = subsample(&sum, x.rank() - 1, 2, out)?;
    let counts: Vec<f64> = (0..out)
        .map(|i| {
            let lo = (2 * i) as isize - 1;
            let hi = lo + 4;
            let valid = (lo.max(0)..hi.min(len as isize)).count();
            1.0 / valid as f64
        })
        .collect();
    let scale = Tensor::from_vec(counts, out, x.device())?.to_dtype(x.dtype())?;
    Ok(sum.broadcast_mul(&scale)?)
}

pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(s: &mut Scope, inp: usize, out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (inp as f64).sqrt();
        let weight = s.uniform("weight", &[out, inp], bound)?;
        let bias = if bias {
            Some(s.uniform("bias", &[out], bound)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    /// Applies to the last dimension of an input of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let inp = *dims.last().ok_or_else(|| Error::shape("linear on a scalar"))?;
        if inp != self.in_dim() {
            return Err(Error::shape(format!(
                "linear expects {} features, got {inp}",
                self.in_dim()
            )));
        }
        let rows = x.elem_count() / inp;
        let y = x.reshape((rows, inp))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dims()[0];
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zeros,
    Reflect,
}

#[derive(Debug, Clone, Copy)]
pub struct Conv1dSpec {
    pub inp: usize,
    pub out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub pad_mode: PadMode,
    pub weight_norm: bool,
    pub bias: bool,
}

impl Conv1dSpec {
    pub fn new(inp: usize, out: usize, kernel: usize) -> Self {
        Self {
            inp,
            out,
            kernel,
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
            pad_mode: PadMode::Zeros,
            weight_norm: false,
            bias: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    /// "Same" padding for odd kernels at stride 1.
    pub fn same(mut self) -> Self {
        self.padding = self.dilation * (self.kernel - 1) / 2;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn reflect(mut self) -> Self {
        self.pad_mode = PadMode::Reflect;
        self
    }

    pub fn weight_norm(mut self) -> Self {
        self.weight_norm = true;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.padding - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }
}

/// A possibly weight-normalized kernel: `g * v / ||v||` with the norm taken
/// over every dimension but the first.
pub enum Kernel {
    Plain(Var),
    Normed { g: Var, v: Var },
}

impl Kernel {
    fn build(s: &mut Scope, shape: &[usize], bound: f64, weight_norm: bool) -> Result<Self> {
        if !weight_norm {
            return Ok(Kernel::Plain(s.uniform("weight", shape, bound)?));
        }
        let v = s.uniform("weight_v", shape, bound)?;
        let norms = flat_norms(v.as_tensor())?;
        let mut gshape = vec![shape[0]];
        gshape.extend(std::iter::repeat_n(1, shape.len() - 1));
        let g = s.from_values("weight_g", &gshape, norms, Kind::Param)?;
        Ok(Kernel::Normed { g, v })
    }

    pub fn value(&self) -> Result<Tensor> {
        match self {
            Kernel::Plain(w) => Ok(w.as_tensor().clone()),
            Kernel::Normed { g, v } => {
                let rank = v.rank();
                let dims: Vec<usize> = (1..rank).collect();
                let norm = v.sqr()?.sum_keepdim(dims)?.sqrt()?;
                Ok(v.broadcast_mul(&g.broadcast_div(&norm)?)?)
            }
        }
    }
}

fn flat_norms(t: &Tensor) -> Result<Vec<f64>> {
    let rows = t.dim(0)?;
    let data = super::params::flat_f64(t)?;
    let per = data.len() / rows;
    Ok(data
        .chunks(per)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

pub struct Conv1d {
    pub spec: Conv1dSpec,
    pub kernel: Kernel,
    pub bias: Option<Var>,
}

impl Conv1d {
    pub fn new(s: &mut Scope, spec: Conv1dSpec) -> Result<Self> {
        if spec.inp % spec.groups != 0 || spec.out % spec.groups != 0 {
            return Err(Error::config(format!(
                "conv channels {}->{} not divisible by {} groups",
                spec.inp, spec.out, spec.groups
            )));
        }
        let fan_in = spec.inp / spec.groups * spec.kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let kernel = Kernel::build(
            s,
            &[spec.out, spec.inp / spec.groups, spec.kernel],
            bound,
            spec.weight_norm,
        )?;
        let bias = if spec.bias {
            Some(s.uniform("bias", &[spec.out], bound)?)
        } else {
            None
        };
        Ok(Self { spec, kernel, bias })
    }

    /// Input and output are (batch, channels, time).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let sp = &self.spec;
        if x.dim(1)? != sp.inp {
            return Err(Error::shape(format!(
                "conv1d expects {} channels, got {}",
                sp.inp,
                x.dim(1)?
            )));
        }
        let (x, pad) = match sp.pad_mode {
            PadMode::Reflect => (reflect_pad_last(x, sp.padding, sp.padding)?, 0),
            PadMode::Zeros => (x.clone(), sp.padding),
        };
        let w = self.kernel.value()?;
        let y = conv1d_per_item(&x, &w, pad, sp.stride, sp.dilation, sp.groups)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, sp.out, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Transposed 1D convolution with weight layout (in, out, kernel), computed
/// as a stride-1 convolution per output phase followed by interleaving, so
/// that it is differentiable with ordinary convolutions.
pub struct ConvTranspose1d {
    pub inp: usize,
    pub out: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    pub kernel: Kernel,
    pub bias: Option<Var>,
    phase_index: Vec<u32>,
    taps: usize,
}

impl ConvTranspose1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        s: &mut Scope,
        inp: usize,
        out: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        weight_norm: bool,
    ) -> Result<Self> {
        if output_padding > padding && output_padding > 0 {
            return Err(Error::config("output_padding larger than padding"));
        }
        let bound = 1.0 / ((out * kernel_size) as f64).sqrt();
        let kernel = Kernel::build(s, &[inp, out, kernel_size], bound, weight_norm)?;
        let bias = Some(s.uniform("bias", &[out], bound)?);
        let taps = kernel_size.div_ceil(stride);
        // Phase r uses taps w[r + j*stride]; flipped for correlation. Index
        // `kernel_size` selects an appended zero column.
        let mut phase_index = Vec::with_capacity(stride * taps);
        for r in 0..stride {
            for jf in 0..taps {
                let j = taps - 1 - jf;
                let k = r + j * stride;
                phase_index.push(if k < kernel_size { k as u32 } else { kernel_size as u32 });
            }
        }
        Ok(Self {
            inp,
            out,
            kernel_size,
            stride,
            padding,
            output_padding,
            kernel,
            bias,
            phase_index,
            taps,
        })
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len - 1) * self.stride + self.kernel_size + self.output_padding - 2 * self.padding
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, len) = x.dims3()?;
        if c != self.inp {
            return Err(Error::shape(format!(
                "conv-transpose expects {} channels, got {c}",
                self.inp
            )));
        }
        let w = self.kernel.value()?;
        let zero = Tensor::zeros((self.inp, self.out, 1), w.dtype(), w.device())?;
        let w = Tensor::cat(&[&w, &zero], 2)?;
        let idx = index_tensor(self.phase_index.clone(), &w)?;
        // (in, out, stride*taps) -> (stride*out, in, taps)
        let k = w
            .index_select(&idx, 2)?
            .reshape((self.inp, self.out, self.stride, self.taps))?
            .permute((2, 1, 0, 3))?
            .reshape((self.stride * self.out, self.inp, self.taps))?
            .contiguous()?;
        let y = conv1d_per_item(x, &k, self.taps - 1, 1, 1, 1)?;
        let q = len + self.taps - 1;
        let y = y
            .reshape((b, self.stride, self.out, q))?
            .permute((0, 2, 3, 1))?
            .contiguous()?
            .reshape((b, self.out, q * self.stride))?;
        let full = (len - 1) * self.stride + self.kernel_size;
        let out_len = self.out_len(len);
        let y = if self.padding + out_len <= full {
            y.narrow(2, self.padding, out_len)?
        } else {
            y.narrow(2, 0, full)?
                .pad_with_zeros(2, 0, self.padding + out_len - full)?
                .narrow(2, self.padding, out_len)?
        };
        match &self.bias {
            Some(bias) => Ok(y.broadcast_add(&bias.reshape((1, self.out, 1))?)?),
            None => Ok(y),
        }
    }
}

pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        s: &mut Scope,
        inp: usize,
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / ((inp * kernel * kernel) as f64).sqrt();
        let weight = s.uniform("weight", &[out, inp, kernel, kernel], bound)?;
        let bias = if bias {
            Some(s.uniform("bias", &[out], bound)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d_per_item(x, &self.weight, self.padding, self.stride)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

pub struct LayerNorm {
    pub weight: Var,
    pub bias: Var,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(s: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: s.constant("weight", &[dim], 1.0, Kind::Param)?,
            bias: s.constant("bias", &[dim], 0.0, Kind::Param)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Which running statistics a batch-norm layer keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatSets {
    /// One set, used regardless of modality.
    Shared,
    /// One set per [`super::ModalityMode`], selected by the forward context.
    PerMode,
}

/// Batch normalization over dimension 1 with optional per-modality running
/// statistics. The affine parameters are always shared.
pub struct BatchNorm {
    pub weight: Var,
    pub bias: Var,
    pub running_mean: Vec<Var>,
    pub running_var: Vec<Var>,
    pub momentum: f64,
    pub eps: f64,
    pub sets: StatSets,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

impl BatchNorm {
    pub fn new(s: &mut Scope, channels: usize, sets: StatSets) -> Result<Self> {
        let weight = s.constant("weight", &[channels], 1.0, Kind::Param)?;
        let bias = s.constant("bias", &[channels], 0.0, Kind::Param)?;
        let (mut running_mean, mut running_var) = (Vec::new(), Vec::new());
        match sets {
            StatSets::Shared => {
                running_mean.push(s.constant("running_mean", &[channels], 0.0, Kind::Buffer)?);
                running_var.push(s.constant("running_var", &[channels], 1.0, Kind::Buffer)?);
            }
            StatSets::PerMode => {
                for m in super::ModalityMode::ALL {
                    let sfx = m.suffix();
                    running_mean.push(s.constant(
                        &format!("running_mean.{sfx}"),
                        &[channels],
                        0.0,
                        Kind::Buffer,
                    )?);
                    running_var.push(s.constant(
                        &format!("running_var.{sfx}"),
                        &[channels],
                        1.0,
                        Kind::Buffer,
                    )?);
                }
            }
        }
        Ok(Self {
            weight,
            bias,
            running_mean,
            running_var,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            sets,
        })
    }

    fn set_index(&self, ctx: &Ctx) -> usize {
        match self.sets {
            StatSets::Shared => 0,
            StatSets::PerMode => ctx.mode.index(),
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let c = dims[1];
        let b = dims[0];
        let xr = x.reshape((b, c, x.elem_count() / (b * c)))?;
        let k = self.set_index(ctx);
        let (mean, var) = if ctx.training {
            let n = xr.elem_count() / c;
            let mean = xr.mean_keepdim(2)?.mean_keepdim(0)?;
            let xc = xr.broadcast_sub(&mean)?;
            let var = xc.sqr()?.mean_keepdim(2)?.mean_keepdim(0)?;
            let unbiased = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            let m = self.momentum;
            let rm = &self.running_mean[k];
            let rv = &self.running_var[k];
            let new_mean = (rm.as_tensor().affine(1.0 - m, 0.0)?
                + mean.flatten_all()?.detach().affine(m, 0.0)?)?;
            let new_var = (rv.as_tensor().affine(1.0 - m, 0.0)?
                + var.flatten_all()?.detach().affine(m * unbiased, 0.0)?)?;
            rm.set(&new_mean)?;
            rv.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean[k].reshape((1, c, 1))?,
                self.running_var[k].reshape((1, c, 1))?,
            )
        };
        let y = xr
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight.reshape((1, c, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1))?)?;
        Ok(y.reshape(dims)?)
    }
}

/// Per-channel parametric ReLU on dimension 1 (or the last dimension of a
/// rank-2 input).
pub struct PRelu {
    pub weight: Var,
}

impl PRelu {
    pub fn new(s: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: s.constant("weight", &[channels], 0.25, Kind::Param)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.weight.dim(0)?;
        let mut shape = vec![1; x.rank()];
        shape[1] = c;
        let a = self.weight.reshape(shape)?;
        let neg = x.neg()?.relu()?;
        Ok(x.relu()?.sub(&neg.broadcast_mul(&a)?)?)
    }
}

/// Single-direction LSTM with gate order (input, forget, cell, output).
pub struct Lstm {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(s: &mut Scope, inp: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_ih: s.uniform("w_ih", &[4 * hidden, inp], bound)?,
            w_hh: s.uniform("w_hh", &[4 * hidden, hidden], bound)?,
            b_ih: s.uniform("b_ih", &[4 * hidden], bound)?,
            b_hh: s.uniform("b_hh", &[4 * hidden], bound)?,
            hidden,
        })
    }

    /// (batch, time, in) -> (batch, time, hidden)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, i) = x.dims3()?;
        if i != self.w_ih.dim(1)? {
            return Err(Error::shape(format!(
                "lstm expects {} inputs, got {i}",
                self.w_ih.dim(1)?
            )));
        }
        let h4 = 4 * self.hidden;
        let bias = (self.b_ih.as_tensor() + self.b_hh.as_tensor())?;
        let xp = x
            .reshape((b * t, i))?
            .matmul(&self.w_ih.t()?)?
            .broadcast_add(&bias)?
            .reshape((b, t, h4))?;
        let w_hh_t = self.w_hh.t()?;
        let hs = self.hidden;
        let mut h = Tensor::zeros((b, hs), x.dtype(), x.device())?;
        let mut c = h.clone();
        let mut outs = Vec::with_capacity(t);
        for step in 0..t {
            let g = xp.narrow(1, step, 1)?.squeeze(1)?.add(&h.matmul(&w_hh_t)?)?;
            let ig = sigmoid(&g.narrow(1, 0, hs)?)?;
            let fg = sigmoid(&g.narrow(1, hs, hs)?)?;
            let cg = g.narrow(1, 2 * hs, hs)?.tanh()?;
            let og = sigmoid(&g.narrow(1, 3 * hs, hs)?)?;
            c = fg.mul(&c)?.add(&ig.mul(&cg)?)?;
            h = og.mul(&c.tanh()?)?;
            outs.push(h.clone());
        }
        Ok(Tensor::stack(&outs, 1)?)
    }
}

fn reverse_time(x: &Tensor) -> Result<Tensor> {
    let t = x.dim(1)?;
    let idx: Vec<u32> = (0..t as u32).rev().collect();
    Ok(x.index_select(&index_tensor(idx, x)?, 1)?)
}

/// Stacked bidirectional LSTM; each layer's output concatenates the forward
/// and backward hidden states.
pub struct BiLstm {
    pub layers: Vec<(Lstm, Lstm)>,
}

impl BiLstm {
    pub fn new(s: &mut Scope, inp: usize, hidden: usize, num_layers: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let i = if l == 0 { inp } else { 2 * hidden };
            let mut ls = s.sub(&format!("l{l}"));
            let fwd = Lstm::new(&mut ls.sub("fwd"), i, hidden)?;
            let bwd = Lstm::new(&mut ls.sub("bwd"), i, hidden)?;
            layers.push((fwd, bwd));
        }
        Ok(Self { layers })
    }

    pub fn out_dim(&self) -> usize {
        2 * self.layers[0].0.hidden
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (fwd, bwd) in &self.layers {
            let f = fwd.forward(&h)?;
            let r = reverse_time(&bwd.forward(&reverse_time(&h)?)?)?;
            h = Tensor::cat(&[&f, &r], 2)?;
        }
        Ok(h)
    }
}

pub fn to_dtype_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{flat_f64, ModalityMode, ParamStore};
    use candle_core::Device;

    fn t64(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * scale).collect()
    }

    #[test]
    fn transposed_conv_matches_direct_definition() {
        for (k, s, p, op) in [(8, 4, 2, 0), (10, 5, 3, 1), (6, 3, 2, 1), (3, 1, 1, 0), (2, 4, 0, 0)] {
            let mut ps = ParamStore::new(DType::F64, 7);
            let ct = ConvTranspose1d::new(&mut ps.root(), 3, 2, k, s, p, op, false).unwrap();
            let len = 5;
            let x = t64(seq(2 * 3 * len, 2.0), &[2, 3, len]);
            let y = flat_f64(&ct.forward(&x).unwrap()).unwrap();
            let w = flat_f64(&ct.kernel.value().unwrap()).unwrap();
            let bias = flat_f64(ct.bias.as_ref().unwrap().as_tensor()).unwrap();
            let xv = flat_f64(&x).unwrap();
            let out_len = ct.out_len(len);
            for b in 0..2 {
                for o in 0..2 {
                    for n in 0..out_len {
                        let mut acc = bias[o];
                        let full = n + p;
                        for i in 0..3 {
                            for t in 0..len {
                                if full >= t * s && full - t * s < k {
                                    acc += xv[(b * 3 + i) * len + t] * w[(i * 2 + o) * k + full - t * s];
                                }
                            }
                        }
                        let got = y[(b * 2 + o) * out_len + n];
                        assert!((got - acc).abs() < 1e-12, "k{k} s{s} n{n}: {got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn transposed_conv_agrees_with_candle_forward() {
        let mut ps = ParamStore::new(DType::F64, 1);
        let ct = ConvTranspose1d::new(&mut ps.root(), 4, 3, 8, 4, 2, 0, false).unwrap();
        let x = t64(seq(4 * 6, 1.0), &[1, 4, 6]);
        let ours = flat_f64(&ct.forward(&x).unwrap()).unwrap();
        let w = ct.kernel.value().unwrap();
        let b = ct.bias.as_ref().unwrap().reshape((1, 3, 1)).unwrap();
        let theirs = x
            .conv_transpose1d(&w, 2, 0, 4, 1, 1)
            .unwrap()
            .broadcast_add(&b)
            .unwrap();
        for (a, b) in ours.iter().zip(flat_f64(&theirs).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_matches_scalar_loop() {
        let (h, w) = (7, 6);
        let data = seq(h * w, 3.0);
        let x = t64(data.clone(), &[1, 1, h, w]);
        let y = max_pool_3x3_s2(&x).unwrap();
        let (oh, ow) = (4, 3);
        assert_eq!(y.dims(), &[1, 1, oh, ow]);
        let yv = flat_f64(&y).unwrap();
        for i in 0..oh {
            for j in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for di in 0..3 {
                    for dj in 0..3 {
                        let (r, c) = ((2 * i + di) as isize - 1, (2 * j + dj) as isize - 1);
                        if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
                            m = m.max(data[r as usize * w + c as usize]);
                        }
                    }
                }
                assert_eq!(yv[i * ow + j], m);
            }
        }
    }

    #[test]
    fn avg_pool_excludes_padding() {
        let x = t64(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 1, 6]);
        let y = flat_f64(&avg_pool_k4_s2(&x).unwrap()).unwrap();
        assert_eq!(y, vec![2.0, 3.5, 5.0]);
    }

    #[test]
    fn weight_norm_starts_at_plain_weight() {
        let mut ps = ParamStore::new(DType::F64, 2);
        let conv = Conv1d::new(&mut ps.root(), Conv1dSpec::new(2, 3, 5).weight_norm()).unwrap();
        let Kernel::Normed { v, .. } = &conv.kernel else {
            panic!("expected weight norm")
        };
        let a = flat_f64(&conv.kernel.value().unwrap()).unwrap();
        let b = flat_f64(v.as_tensor()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_routes_statistics_by_mode() {
        let mut ps = ParamStore::new(DType::F64, 0);
        let bn = BatchNorm::new(&mut ps.root(), 2, StatSets::PerMode).unwrap();
        let x = t64(vec![3.0; 2 * 2 * 4], &[2, 2, 4]);
        let mut ctx = Ctx::train(ModalityMode::AV, 0);
        bn.forward(&x, &ctx).unwrap();
        let rm = |m: ModalityMode| flat_f64(bn.running_mean[m.index()].as_tensor()).unwrap();
        let ema = 0.9 * 0.0 + 0.1 * 3.0;
        assert_eq!(rm(ModalityMode::AV), vec![ema, ema]);
        assert_eq!(rm(ModalityMode::V), vec![0.0, 0.0]);
        ctx.mode = ModalityMode::V;
        bn.forward(&x, &ctx).unwrap();
        assert_eq!(rm(ModalityMode::V), vec![ema, ema]);
        assert_eq!(rm(ModalityMode::A), vec![0.0, 0.0]);
    }

    #[test]
    fn single_element_batch_norm_is_finite() {
        let mut ps = ParamStore::new(DType::F64, 0);
        let bn = BatchNorm::new(&mut ps.root(), 1, StatSets::Shared).unwrap();
        let y = bn
            .forward(&t64(vec![2.5], &[1, 1, 1]), &Ctx::train(ModalityMode::AV, 0))
            .unwrap();
        assert_eq!(flat_f64(&y).unwrap(), vec![0.0]);
        assert_eq!(flat_f64(bn.running_var[0].as_tensor()).unwrap(), vec![0.9]);
    }

    #[test]
    fn lstm_matches_scalar_recurrence() {
        let mut ps = ParamStore::new(DType::F64, 5);
        let lstm = Lstm::new(&mut ps.root(), 2, 1).unwrap();
        let xs = [0.5, -1.0, 0.25, 0.8, -0.3, 0.1];
        let x = t64(xs.to_vec(), &[1, 3, 2]);
        let y = flat_f64(&lstm.forward(&x).unwrap()).unwrap();
        let wi = flat_f64(lstm.w_ih.as_tensor()).unwrap();
        let wh = flat_f64(lstm.w_hh.as_tensor()).unwrap();
        let bi = flat_f64(lstm.b_ih.as_tensor()).unwrap();
        let bh = flat_f64(lstm.b_hh.as_tensor()).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (mut h, mut c) = (0.0, 0.0);
        for t in 0..3 {
            let g: Vec<f64> = (0..4)
                .map(|k| wi[2 * k] * xs[2 * t] + wi[2 * k + 1] * xs[2 * t + 1] + wh[k] * h + bi[k] + bh[k])
                .collect();
            c = sig(g[1]) * c + sig(g[0]) * g[2].tanh();
            h = sig(g[3]) * c.tanh();
            assert!((y[t] - h).abs() < 1e-12);
        }
    }

    #[test]
    fn reflect_pad_values() {
        let x = t64(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 4]);
        let y = flat_f64(&reflect_pad_last(&x, 2, 3).unwrap()).unwrap();
        assert_eq!(y, vec![3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 2.0, 1.0]);
    }
}
