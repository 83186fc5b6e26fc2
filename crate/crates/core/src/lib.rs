//! Fine-grained triple-view attention for weakly supervised object
//! localization: a small differentiable tensor core, the attention module,
//! a CAM-producing backbone, box-accuracy evaluation and a synthetic
//! two-part object dataset.

pub mod backbone;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod norm;
pub mod rfga;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod wsol;

pub use error::{Error, Result};
pub use norm::{BatchNorm, BnLayout, Mode};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{PoolView, Tensor};
pub use synth::{GtSample, SynthSpec};
pub use wsol::{BoundingBox, EvalSample, Upsample, WsolReport};
