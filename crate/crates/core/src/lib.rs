//! Stratified competing-risks Cox models in which covariate effects are
//! bivariate surfaces over event time and an effect-modifying covariate,
//! spanned by tensor-product B-splines and fitted by a proximal Newton
//! method with optional anisotropic difference penalties.

pub mod baseline;
pub mod basis;
pub mod cv;
pub mod data;
pub mod error;
pub mod likelihood;
pub mod numeric;
pub mod penalty;
pub mod sim;
pub mod inference;
pub mod solver;

pub use baseline::{breslow_baseline, deviance_residuals, martingale_residuals, BaselineHazard};
pub use basis::{difference_matrix, eval_surface, tensor_row, BasisSpec, TensorLayout};
pub use cv::{cve, default_grid, partition_folds, tune, tune_all, CvMethod, CvReport, FoldAssignment};
pub use data::{build_risk_index, CsvSchema, Dataset, RiskIndex, SubjectRecord};
pub use error::{Error, Result};
pub use likelihood::{
    derivatives, linear_predictor, log_partial_likelihood, Coefficients, EvalContext,
    LikelihoodDerivatives, ModelBasis,
};
pub use inference::{
    contrast_matrix, pointwise_ci, quadform_tail, variance_estimates, wald_test, ContrastKind,
    NullDistribution, SurfacePoint, TestConstruction, TestResult, VarianceEstimates, VarianceKind,
};
pub use penalty::{build_penalty_matrix, penalized_derivatives, PenaltyConfig};
pub use sim::{
    generate_dataset, run_experiment, simulate_subjects, BasisSettings, CvExperiment,
    ExperimentConfig, Metric, MetricsReport, ScenarioConfig, TrueSurface,
};
pub use solver::{fit, fit_all_causes, FitResult, SolverConfig};
