//! Hand-written layers with explicit backward passes.
//!
//! Every layer is a small descriptor holding [`ParamId`]s into a shared
//! [`ParamStore`]; forward passes return the activations their backward pass
//! needs, and backward passes accumulate into a gradient store with the same
//! layout as the parameters.

mod attention;
mod layers;
mod optim;
mod params;

pub use attention::{Attention, AttentionCache, Block, BlockCache};
pub use layers::{gelu, gelu_backward, LayerNorm, LayerNormCache, Linear};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Init, ParamId, ParamStore};
