//! Frequentist model averaging for generalized linear models on fragmentary
//! data, where each subject observes only a subset of the covariates.
//!
//! The pipeline: decompose availability patterns ([`patterns`]), fit one GLM
//! per pattern on every subject observing that pattern ([`glm`]), choose
//! simplex weights by minimizing a penalized Kullback–Leibler criterion on the
//! complete cases ([`averaging`]), and predict. [`baselines`] holds the
//! comparator methods and [`sim`] the Monte Carlo study.

pub mod averaging;
pub mod baselines;
pub mod compare;
pub mod data;
pub mod error;
pub mod family;
pub mod fixtures;
pub mod glm;
pub mod io;
mod linalg;
pub mod patterns;
pub mod screen;
mod serde_vec;
pub mod sim;

pub use averaging::{
    fit_averaged, kl_loss, optimize_weights, predict, predict_for_pattern, AveragedModel, AveragingSettings,
    CriterionContext, KlTruth, LambdaChoice, LambdaMode, WeightVector,
};
pub use data::FragmentaryDataset;
pub use error::{Error, Result};
pub use family::{ExponentialFamily, FamilyKind};
pub use glm::{fit_candidate, CandidateModel, FitOptions};
pub use patterns::{build_pattern_index, Pattern, PatternIndex, PatternOrder};
