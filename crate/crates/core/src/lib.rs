//! Discrete flow matching over token sequences: probability paths, CTMC
//! jump sampling, step-aware denoisers and shortcut self-distillation.

pub mod ctmc_sampler;
pub mod denoiser;
pub mod error;
pub mod kinetics;
pub mod objective;
pub mod path_data;
pub mod rng;
pub mod shortcut_teacher;
pub mod trainer_eval;

pub use error::{Error, Result};
