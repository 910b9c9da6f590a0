//! Parameterized building blocks: linear maps, convolutions, layer
//! normalization, multi-head attention, the two-layer MLP and sinusoidal
//! position codes.

mod attention;
mod conv;
mod linear;
mod mlp;
mod norm;
mod params;
pub mod posenc;

pub use attention::{Attention, AttentionOutput};
pub use conv::Conv2d;
pub use linear::Linear;
pub use mlp::Mlp;
pub use norm::LayerNorm;
pub use params::{Ctx, ParamId, ParamStore};
