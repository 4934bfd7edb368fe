//! Multimodal sensor activity recognition: frequency-domain preprocessing,
//! convolutional + attention/recurrent classifiers, leave-one-user-out
//! evaluation and output-layer personalization.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod personalize;
pub mod pipeline;
pub mod preprocess;
pub mod synth;
pub mod train;
pub mod validation;

pub use error::{Error, Result};
pub use trasend_autodiff as autodiff;
