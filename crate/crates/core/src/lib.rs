//! Gaussian process classification and regression whose covariance is a
//! conic sum of basis kernels, one per subspace ("bag") of the input.
//!
//! The amplitude of each basis kernel is learned jointly with every other
//! hyperparameter by maximizing the (approximate) marginal likelihood, so the
//! learned mixing weights `β_s = σ_f,s²` indicate which subspaces matter.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classification;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod linalg;
pub mod optimize;
pub mod regression;
pub mod subspaces;

pub use classification::{
    ep_fit, ep_fit_with, laplace_fit, laplace_fit_with, predict_proba, EpOptions, InferenceMethod, LaplaceOptions, LatentPosterior,
    PredictiveClass, SiteParams,
};
pub use datagen::{generate_synthetic, Dataset, SyntheticConfig};
pub use error::{GpError, Result};
pub use eval::{
    binary_classes, confusion_metrics, cross_validate, ova_predict, ova_train, roc_auc, stratified_kfold,
    ConfusionCounts, CvOptions, CvReport, FoldFailure, FoldReport, OvaModel, Summary,
};
pub use kernels::{
    composite_kernel, cross_covariance, gram, gram_gradient, kernel_lin, kernel_nn, kernel_se, GramCache,
    GramMatrix, HyperParams, KernelKind, KernelSpec,
};
pub use optimize::{
    initial_hyperparams, minimize, train, InferenceUsed, MinimizeResult, OptimizeOptions, Posterior, Task,
    TrainOptions, TrainedModel,
};
pub use regression::{fit_exact, log_marginal_likelihood, predict_regression, PredictiveGaussian, RegressionPosterior};
pub use subspaces::{
    cube_layout, extract_subvector, relevance_scores, slice_layout, LayoutKind, RelevanceReport, SubspaceLayout,
    VolumeDims,
};

// The guide's snippets run as doc-tests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/kernels.md")]
    pub mod kernels {}
    #[doc = include_str!("../../../book/src/inference.md")]
    pub mod inference {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
