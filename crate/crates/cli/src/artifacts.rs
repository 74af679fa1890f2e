//! Serializable fit artifacts and report records shared by the
//! subcommands. Fit artifacts are self-contained: tests, predictions, and
//! residuals can be computed from the artifact (plus the dataset, where
//! record-level quantities are needed).

use anyhow::{Context, Result};
use coxsurf_core::solver::{FitResult, IterationRecord};
use coxsurf_core::{
    BaselineHazard, BasisSpec, Coefficients, CsvSchema, ModelBasis, PenaltyConfig, TensorLayout,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitArtifact {
    pub manifest_hash: String,
    pub cause: usize,
    pub z_names: Vec<String>,
    pub w_names: Vec<String>,
    pub schema: CsvSchema,
    pub time_basis: BasisSpec,
    pub modifier_basis: BasisSpec,
    pub layout: TensorLayout,
    pub n: usize,
    pub events: usize,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
    pub penalized_log_likelihood: Option<f64>,
    pub penalty: Option<PenaltyConfig>,
    pub trace: Vec<IterationRecord>,
    /// Coefficients in canonical layout; see `index_legend`.
    pub gamma: Vec<f64>,
    pub theta: Vec<f64>,
    /// Human-readable legend of the canonical coefficient order.
    pub index_legend: String,
    /// Row-major unpenalized gradient/Hessian at the optimum.
    pub gradient: Vec<f64>,
    pub hessian: Vec<f64>,
    pub penalized_gradient: Vec<f64>,
    pub penalized_hessian: Vec<f64>,
    pub baseline: BaselineHazard,
    pub clamped_records: usize,
}

impl FitArtifact {
    pub fn from_fit(
        fit: &FitResult,
        basis: &ModelBasis,
        schema: &CsvSchema,
        z_names: &[String],
        w_names: &[String],
        baseline: BaselineHazard,
        clamped_records: usize,
        manifest_hash: String,
    ) -> Self {
        let dim = fit.gradient.len();
        let flatten = |m: &DMatrix<f64>| -> Vec<f64> {
            let mut out = Vec::with_capacity(dim * dim);
            for r in 0..dim {
                for c in 0..dim {
                    out.push(m[(r, c)]);
                }
            }
            out
        };
        let legend = format!(
            "gamma[(l, k_mod, k_time)] at index (l * {kmod} + k_mod) * {ktime} + k_time, \
             l in 0..{p} over z columns {z:?}; theta over w columns {w:?}",
            kmod = basis.layout.k_mod,
            ktime = basis.layout.k_time,
            p = basis.layout.p,
            z = z_names,
            w = w_names,
        );
        Self {
            manifest_hash,
            cause: fit.cause,
            z_names: z_names.to_vec(),
            w_names: w_names.to_vec(),
            schema: schema.clone(),
            time_basis: basis.time.clone(),
            modifier_basis: basis.modifier.clone(),
            layout: basis.layout,
            n: fit.n,
            events: fit.events,
            converged: fit.converged,
            iterations: fit.iterations,
            log_likelihood: fit.log_likelihood,
            penalized_log_likelihood: fit.penalized_log_likelihood,
            penalty: fit.penalty.clone(),
            trace: fit.trace.clone(),
            gamma: fit.coefficients.gamma.clone(),
            theta: fit.coefficients.theta.clone(),
            index_legend: legend,
            gradient: fit.gradient.as_slice().to_vec(),
            hessian: flatten(&fit.hessian),
            penalized_gradient: fit.penalized_gradient.as_slice().to_vec(),
            penalized_hessian: flatten(&fit.penalized_hessian),
            baseline,
            clamped_records,
        }
    }

    pub fn model_basis(&self) -> ModelBasis {
        ModelBasis::new(
            self.time_basis.clone(),
            self.modifier_basis.clone(),
            self.layout.p,
        )
    }

    /// Rebuilds the in-memory fit for inference routines.
    pub fn to_fit_result(&self) -> FitResult {
        let dim = self.gradient.len();
        let unflatten = |v: &[f64]| DMatrix::from_row_slice(dim, dim, v);
        FitResult {
            cause: self.cause,
            coefficients: Coefficients {
                gamma: self.gamma.clone(),
                theta: self.theta.clone(),
            },
            log_likelihood: self.log_likelihood,
            penalized_log_likelihood: self.penalized_log_likelihood,
            iterations: self.iterations,
            converged: self.converged,
            trace: self.trace.clone(),
            gradient: DVector::from_column_slice(&self.gradient),
            hessian: unflatten(&self.hessian),
            penalized_gradient: DVector::from_column_slice(&self.penalized_gradient),
            penalized_hessian: unflatten(&self.penalized_hessian),
            penalty: self.penalty.clone(),
            layout: self.layout,
            n: self.n,
            events: self.events,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&json)?)
    }
}
