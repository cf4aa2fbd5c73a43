//! Encoder, projection heads, and the query/key momentum pair.

pub mod encoder;
pub mod momentum;
pub mod params;
pub mod projector;

pub use encoder::{Encoder, EncoderConfig};
pub use momentum::MomentumPair;
pub use params::{bind_var, ParamSet, VarCache};
pub use projector::BtProjector;

/// Batch-norm epsilon used by every layer in the workbench.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;
