//! Synthetic data, training, sampling and evaluation of the toy model.

pub mod eval;
pub mod sample;
pub mod scene;
pub mod train;

pub use eval::{eval_perm_sensitivity, eval_scale_consistency, gradcheck_spsl, subject_sim, EvalReport};
pub use sample::{integrate, sample, VelocityField};
pub use scene::{gen_synthetic, SceneConfig, SyntheticScene};
pub use train::{train_step, TrainConfig, TrainExample, TrainState};
