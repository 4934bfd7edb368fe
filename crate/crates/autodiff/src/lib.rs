//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Values are recorded on a [`Tape`] as primitives execute; [`Tape::backward`]
//! replays the record in reverse. Model parameters live in a [`ParamStore`]
//! and are brought onto a tape with [`Tape::param`], so
//! [`Tape::backward_params`] can return one gradient per named parameter.

mod conv;
mod error;
mod gradcheck;
mod linalg;
mod nn;
mod norm;
mod ops;
mod optim;
mod params;
mod suite;
mod tape;
mod tensor;

pub use conv::{conv_output_len, Padding};
pub use error::{Error, Result};
pub use gradcheck::{gradcheck, gradcheck_params, GradcheckReport};
pub use nn::{check_one_hot, one_hot, GruRecurrence, GruWeights, Reduction};
pub use norm::{BatchMoments, RunningStats};
pub use ops::{sigmoid, Activation};
pub use optim::{Adam, AdamConfig, AdamState};
pub use params::{Gradients, ParamGroup, ParamId, ParamStore, Parameter};
pub use suite::{primitive_gradchecks, PrimitiveCheck};
pub use tape::{Mode, Tape, Var, VarGrads};
pub use tensor::Tensor;
