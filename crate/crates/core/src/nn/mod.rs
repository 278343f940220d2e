//! Minimal f64 neural substrate: parameter store, dense layers, attention,
//! losses, Adam, finite-difference gradient checking and checkpoints.

pub mod adam;
pub mod attention;
pub mod checkpoint;
pub mod dense;
pub mod gradcheck;
pub mod loss;
pub mod params;

pub use adam::Adam;
pub use attention::{attention, attention_backward, attention_forward, AttentionGrads, AttentionOutput};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use dense::{Activation, DenseCache, DenseNet};
pub use gradcheck::{finite_diff_gradcheck, GradCheckEntry, GradCheckReport};
pub use loss::{binary_cross_entropy, sigmoid};
pub use params::{Grads, ParamId, ParamStore, Tensor2};
