//! Neural layers built on the autodiff tape.

mod layers;
mod params;

pub use layers::{
    dropout, AttentionOutput, Conv1dK1, Conv2d, DropoutConfig, LayerNorm, Linear, Mlp, Mode,
    MultiHeadSelfAttention, PROJ_STD,
};
pub use params::{Bound, Init, Param, ParamId, ParamStore};
