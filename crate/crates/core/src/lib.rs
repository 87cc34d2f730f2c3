//! Adversarially robust feature learning (ARFL) on small multilayer perceptrons.
//!
//! The crate bundles everything needed to reproduce the two-moon robustness
//! benchmark end to end: a reverse-mode autodiff engine, the MLP classifier,
//! data generation, the classification / feature-correlation / TRADES
//! objectives, FGSM and PGD attacks, the mixed standard/adversarial training
//! loop, evaluation metrics and an experiment harness that writes CSV results.

pub mod attacks;
pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod losses;
pub mod mlp;
pub mod seeding;
pub mod training;

pub use attacks::{AttackFamily, AttackObjective, AttackSpec};
pub use autodiff::{Graph, NodeId, Tensor};
pub use datasets::{make_moons, Dataset};
pub use error::{ArflError, Result};
pub use evaluation::EvalReport;
pub use losses::ArflConfig;
pub use mlp::{Activation, MlpModel};
pub use training::{Scheme, SignMode, TrainConfig};
