//! Minimal parameter, layer and optimizer plumbing over candle tensors.

mod layers;
mod optim;
mod params;

pub use layers::{sinusoidal, softmax_last, Conv2d, GroupNorm, LayerNorm, Linear, SelfAttention};
pub use optim::{Adam, AdamConfig, Ema};
pub use params::{scalar_tensor, Builder, Init, ParamStore, DTYPE};
