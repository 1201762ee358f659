use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, Init, ParamId, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Standard deviation for projection weights.
pub const PROJ_STD: f64 = 0.02;

/// `y = x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_std(store, name, in_dim, out_dim, PROJ_STD)
    }

    /// Weights drawn with standard deviation `std` instead of [`PROJ_STD`].
    pub fn with_std(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, std: f64) -> Result<Self> {
        Ok(Linear {
            weight: store.add(&format!("{name}.weight"), &[in_dim, out_dim], Init::TruncNormal { std })?,
            bias: store.add(&format!("{name}.bias"), &[out_dim], Init::Zeros)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p.get(self.weight))?;
        tape.add(h, p.get(self.bias))
    }
}

/// 2-D convolution layer over `C×H×W` inputs.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(Error::config("conv2d kernel and stride must be positive"));
        }
        let fan_in = in_channels * kernel * kernel;
        Ok(Conv2d {
            weight: store.add(
                &format!("{name}.weight"),
                &[out_channels, in_channels, kernel, kernel],
                Init::HeNormal { fan_in },
            )?,
            bias: store.add(&format!("{name}.bias"), &[out_channels], Init::Zeros)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.get(self.weight), p.get(self.bias), self.stride, self.padding)
    }
}

/// Width-one 1-D convolution over a `T×D` sequence: the same `D → G` affine
/// map at every position. Weight is stored `G × D` like a conv kernel.
#[derive(Debug, Clone)]
pub struct Conv1dK1 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv1dK1 {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize) -> Result<Self> {
        Ok(Conv1dK1 {
            weight: store.add(
                &format!("{name}.weight"),
                &[out_channels, in_channels],
                Init::TruncNormal { std: PROJ_STD },
            )?,
            bias: store.add(&format!("{name}.bias"), &[out_channels], Init::Zeros)?,
            in_channels,
            out_channels,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_channels {
            return Err(Error::dim(format!(
                "conv1d expects T×{} input, got {shape:?}",
                self.in_channels
            )));
        }
        let h = tape.matmul_bt(x, p.get(self.weight))?;
        tape.add(h, p.get(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(&format!("{name}.gain"), &[dim], Init::Ones)?,
            bias: store.add(&format!("{name}.bias"), &[dim], Init::Zeros)?,
            eps: Self::DEFAULT_EPS,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.get(self.gain), p.get(self.bias), self.eps)
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }
}

/// Multi-head scaled dot-product self-attention over `T×D` tokens.
#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Attention output plus the per-head `T×T` weight matrices.
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadSelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "token width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadSelfAttention {
            query: Linear::new(store, &format!("{name}.query"), dim, dim)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim)?,
            heads,
            dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<AttentionOutput> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::dim(format!(
                "attention expects T×{} tokens, got {shape:?}",
                self.dim
            )));
        }
        let q = self.query.forward(tape, p, x)?;
        let k = self.key.forward(tape, p, x)?;
        let v = self.value.forward(tape, p, x)?;
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * head_dim;
            let qh = tape.col_slice(q, start, head_dim)?;
            let kh = tape.col_slice(k, start, head_dim)?;
            let vh = tape.col_slice(v, start, head_dim)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let w = tape.softmax(scores);
            outs.push(tape.matmul(w, vh)?);
            weights.push(w);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        Ok(AttentionOutput {
            output: self.output.forward(tape, p, cat)?,
            weights,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutConfig {
    pub rate: f64,
    pub mode: Mode,
}

impl DropoutConfig {
    pub fn new(rate: f64, mode: Mode) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(DropoutConfig { rate, mode })
    }
}

/// Inverted dropout. Identity in eval mode or at rate 0; otherwise each
/// element is zeroed with probability `rate` and survivors are scaled by
/// `1/(1-rate)`.
pub fn dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, cfg: DropoutConfig, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&cfg.rate) {
        return Err(Error::config(format!("dropout rate {} outside [0, 1)", cfg.rate)));
    }
    if cfg.mode == Mode::Eval || cfg.rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - cfg.rate);
    let mask = (0..tape.value(x).len())
        .map(|_| if rng.gen::<f64>() < cfg.rate { 0.0 } else { keep })
        .collect();
    tape.mask_mul(x, mask)
}
