//! A desk-scale laboratory for activation-restriction defenses.
//!
//! Small convolutional networks are trained so that their hidden activations
//! stay inside a secret, keyed region ("taboos" on activation values). At
//! inference, any activation outside the allowed region flags the input as
//! adversarial — a pure value comparison, adding zero multiply-accumulates
//! and zero parameters to the deployed network. The crate bundles everything
//! needed to reproduce the detection-rate and overhead measurements on
//! MNIST: a reverse-mode autodiff engine, an IDX data loader, a LeNet5-class
//! model zoo with bit-exact checkpoints, the keyed detector itself, the
//! instrumented training loop, FGSM/PGD/DeepFool attacks, and an experiment
//! harness that renders the metric tables.
//!
//! See the `examples/` directory for one runnable walkthrough per
//! capability, or the `taboo-trap` binary for the pipeline as subcommands.

pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod model;
pub mod taboo;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
