//! Hybrid CNN + transformer encoder with a token-wise gene prediction head.
//!
//! A slice goes through stride-2 convolution stages, each spatial position of
//! the final feature map becomes a token, learned positional embeddings are
//! added and a stack of pre-norm transformer layers mixes the tokens. A
//! patient embedding is the elementwise mean of its slices' token grids. The
//! head applies dropout, a width-one 1-D convolution mapping every token to
//! `G` gene outputs, and averages over tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    dropout, Bound, Conv1dK1, Conv2d, DropoutConfig, Init, LayerNorm, Linear, Mlp, Mode,
    MultiHeadSelfAttention, ParamId, ParamStore, PROJ_STD,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Slice height and width in pixels.
    pub input_size: usize,
    /// Output channels of each stride-2 CNN stage.
    pub cnn_channels: Vec<usize>,
    pub token_dim: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub head_dropout: f64,
    pub gene_count: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            cnn_channels: vec![8, 16, 32],
            token_dim: 128,
            encoder_layers: 8,
            heads: 4,
            mlp_hidden: 256,
            head_dropout: 0.5,
            gene_count: 500,
            seed: 0,
        }
    }
}

pub const CNN_KERNEL: usize = 3;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let stages = self.cnn_channels.len();
        if stages == 0 {
            return Err(Error::config("at least one CNN stage is required"));
        }
        if self.cnn_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("CNN stage channel counts must be positive"));
        }
        if self.input_size == 0 || self.input_size % (1 << stages) != 0 {
            return Err(Error::config(format!(
                "input size {} is not divisible by 2^{stages}",
                self.input_size
            )));
        }
        if self.encoder_layers == 0 {
            return Err(Error::config("encoder_layers must be at least 1"));
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "token_dim {} is not divisible by {} heads",
                self.token_dim, self.heads
            )));
        }
        if self.mlp_hidden == 0 || self.gene_count == 0 {
            return Err(Error::config("mlp_hidden and gene_count must be positive"));
        }
        DropoutConfig::new(self.head_dropout, Mode::Eval)?;
        Ok(())
    }

    /// Side length of the token grid.
    pub fn grid_size(&self) -> usize {
        self.input_size >> self.cnn_channels.len()
    }

    pub fn token_count(&self) -> usize {
        self.grid_size() * self.grid_size()
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm1: LayerNorm,
    attn: MultiHeadSelfAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

/// Token grid of one patient, `T×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientEmbedding {
    pub tokens: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncoderModel {
    config: ModelConfig,
    store: ParamStore,
    cnn: Vec<Conv2d>,
    token_proj: Linear,
    pos_embed: ParamId,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
    head: Conv1dK1,
}

impl EncoderModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed);
        let mut cnn = Vec::new();
        let mut in_ch = 1;
        for (i, &ch) in config.cnn_channels.iter().enumerate() {
            cnn.push(Conv2d::new(&mut store, &format!("cnn.{i}"), in_ch, ch, CNN_KERNEL, 2, 1)?);
            in_ch = ch;
        }
        let d = config.token_dim;
        // unit-scale tokens so CNN features are not swamped by the positional table
        let token_proj = Linear::with_std(&mut store, "tokens.proj", in_ch, d, 1.0 / (in_ch as f64).sqrt())?;
        let pos_embed = store.add(
            "tokens.position",
            &[config.token_count(), d],
            Init::TruncNormal { std: PROJ_STD },
        )?;
        let layers = (0..config.encoder_layers)
            .map(|i| {
                let name = format!("encoder.{i}");
                Ok(EncoderLayer {
                    norm1: LayerNorm::new(&mut store, &format!("{name}.norm1"), d)?,
                    attn: MultiHeadSelfAttention::new(&mut store, &format!("{name}.attn"), d, config.heads)?,
                    norm2: LayerNorm::new(&mut store, &format!("{name}.norm2"), d)?,
                    mlp: Mlp::new(&mut store, &format!("{name}.mlp"), d, config.mlp_hidden)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(&mut store, "encoder.final_norm", d)?;
        let head = Conv1dK1::new(&mut store, "head.conv", d, config.gene_count)?;
        Ok(EncoderModel {
            config,
            store,
            cnn,
            token_proj,
            pos_embed,
            layers,
            final_norm,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn head(&self) -> &Conv1dK1 {
        &self.head
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        self.store.bind(tape, requires_grad)
    }

    fn check_slice(&self, shape: &[usize]) -> Result<()> {
        let h = self.config.input_size;
        if shape != [1, h, h] {
            return Err(Error::dim(format!(
                "slice of shape {shape:?}, model expects [1, {h}, {h}]"
            )));
        }
        Ok(())
    }

    /// One `1×H×W` slice to a `T×D` token grid.
    pub fn encode_slice(&self, tape: &mut Tape, p: &Bound, slice: Var) -> Result<Var> {
        self.check_slice(tape.shape(slice))?;
        let mut x = slice;
        for conv in &self.cnn {
            x = conv.forward(tape, p, x)?;
            x = tape.relu(x);
        }
        let (c, gh, gw) = match *tape.shape(x) {
            [c, h, w] => (c, h, w),
            _ => unreachable!("conv output is 3-D"),
        };
        let flat = tape.reshape(x, &[c, gh * gw])?;
        let tokens = tape.transpose(flat)?;
        let tokens = self.token_proj.forward(tape, p, tokens)?;
        let mut x = tape.add(tokens, p.get(self.pos_embed))?;
        for layer in &self.layers {
            let h = layer.norm1.forward(tape, p, x)?;
            let a = layer.attn.forward(tape, p, h)?.output;
            x = tape.add(x, a)?;
            let h = layer.norm2.forward(tape, p, x)?;
            let m = layer.mlp.forward(tape, p, h)?;
            x = tape.add(x, m)?;
        }
        self.final_norm.forward(tape, p, x)
    }

    /// Mean of the per-slice token grids.
    pub fn embed_patient(&self, tape: &mut Tape, p: &Bound, slices: &[Var]) -> Result<Var> {
        if slices.is_empty() {
            return Err(Error::input("patient has no selected slices"));
        }
        let grids = slices
            .iter()
            .map(|&s| self.encode_slice(tape, p, s))
            .collect::<Result<Vec<_>>>()?;
        if grids.len() == 1 {
            Ok(grids[0])
        } else {
            tape.mean_of(&grids)
        }
    }

    /// Dropout, token-wise `D → G` map, mean over tokens.
    pub fn predict_genes<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bound,
        embedding: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let cfg = DropoutConfig::new(self.config.head_dropout, mode)?;
        let x = dropout(tape, embedding, cfg, rng)?;
        let per_token = self.head.forward(tape, p, x)?;
        tape.mean_rows(per_token)
    }

    /// Full forward pass for one patient, returning the `[G]` prediction.
    pub fn forward_patient<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bound,
        slices: &[Tensor],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let vars: Vec<Var> = slices.iter().map(|s| tape.constant(s.clone())).collect();
        let emb = self.embed_patient(tape, p, &vars)?;
        self.predict_genes(tape, p, emb, mode, rng)
    }

    /// Eval-mode embedding without gradient tracking.
    pub fn embed(&self, slices: &[Tensor]) -> Result<PatientEmbedding> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let vars: Vec<Var> = slices.iter().map(|s| tape.constant(s.clone())).collect();
        let emb = self.embed_patient(&mut tape, &p, &vars)?;
        Ok(PatientEmbedding {
            tokens: tape.value(emb).clone(),
        })
    }

    /// Eval-mode gene predictions from an embedding.
    pub fn predict_from_embedding(&self, emb: &PatientEmbedding) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let e = tape.constant(emb.tokens.clone());
        let out = self.predict_genes(&mut tape, &p, e, Mode::Eval, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Eval-mode gene predictions for one patient.
    pub fn predict(&self, slices: &[Tensor]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let out = self.forward_patient(
            &mut tape,
            &p,
            slices,
            Mode::Eval,
            &mut rand::rngs::mock::StepRng::new(0, 0),
        )?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Mean squared error over all elements.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::dim(format!(
            "mse between {:?} and {:?}",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}
