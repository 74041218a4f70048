//! Numeric core: a from-scratch transformer with hand-written backward
//! passes, generic over `f32` / `f64`.

mod adam;
mod decode;
pub mod linalg;
mod scalar;
mod transformer;

pub use adam::{clip_grad_norm, Adam};
pub use decode::KvCache;
pub use scalar::Scalar;
pub use transformer::{Activations, ModelConfig, ModelKind, Packed, ParamInfo, Transformer};
