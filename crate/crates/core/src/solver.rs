//! Proximal Newton fitting of the (optionally penalized) log-partial
//! likelihood.
//!
//! Each step solves `[I/lambda_s - H/n] d = g/n` where H and g are the
//! current Hessian and gradient, takes an Armijo backtracking step along d,
//! and grows `lambda_s` geometrically so the proximal term vanishes and the
//! iteration approaches a pure Newton method. The increment
//! `eta^2 = g' d` drives the stopping rule `eta^2 < 2 eps`.

use crate::data::{Dataset, RiskIndex};
use crate::error::{Error, Result};
use crate::likelihood::{Coefficients, EvalContext, LikelihoodDerivatives, ModelBasis};
use crate::penalty::{build_penalty_matrix, penalized_derivatives, penalty_value, PenaltyConfig};
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Initial proximal weight lambda_0 > 0.
    pub lambda0: f64,
    /// Geometric growth factor delta >= 1 of the proximal weight.
    pub delta: f64,
    /// Armijo slope fraction phi in (0, 0.5).
    pub phi: f64,
    /// Backtracking shrink psi in (0.5, 1).
    pub psi: f64,
    /// Convergence threshold: stop once eta^2 < 2 * epsilon.
    pub epsilon: f64,
    pub max_iterations: usize,
    pub max_line_search_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda0: 1.0,
            delta: 2.0,
            phi: 0.25,
            psi: 0.75,
            epsilon: 1e-9,
            max_iterations: 200,
            max_line_search_steps: 50,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda0 > 0.0
            && self.delta >= 1.0
            && self.phi > 0.0
            && self.phi < 0.5
            && self.psi > 0.5
            && self.psi < 1.0
            && self.epsilon > 0.0
            && self.max_iterations > 0
            && self.max_line_search_steps > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("solver config out of range: {self:?}")))
        }
    }
}

/// One accepted iteration of the solver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub eta_sq: f64,
    pub step_size: f64,
    /// Objective (penalized when a penalty is active) after the step.
    pub objective: f64,
}

/// Converged (or flagged) fit for one cause.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub cause: usize,
    pub coefficients: Coefficients,
    /// Unpenalized log-partial likelihood at the optimum.
    pub log_likelihood: f64,
    /// Penalized objective at the optimum, when a penalty was active.
    pub penalized_log_likelihood: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<IterationRecord>,
    /// Unpenalized gradient at the optimum.
    pub gradient: DVector<f64>,
    /// Unpenalized Hessian at the optimum.
    pub hessian: DMatrix<f64>,
    /// Penalized gradient at the optimum (equals `gradient` if unpenalized).
    pub penalized_gradient: DVector<f64>,
    /// Penalized Hessian at the optimum (equals `hessian` if unpenalized).
    pub penalized_hessian: DMatrix<f64>,
    pub penalty: Option<PenaltyConfig>,
    pub layout: crate::basis::TensorLayout,
    pub n: usize,
    pub events: usize,
}

impl FitResult {
    pub fn gamma_len(&self) -> usize {
        self.coefficients.gamma.len()
    }
}

fn penalize(
    deriv: &LikelihoodDerivatives,
    p_mat: Option<&DMatrix<f64>>,
    gamma: &[f64],
) -> Result<LikelihoodDerivatives> {
    match p_mat {
        Some(p) => penalized_derivatives(deriv, p, gamma),
        None => Ok(deriv.clone()),
    }
}

/// Fits one cause with the proximal Newton iteration, starting from zero
/// coefficients (or `warm_start` when given).
pub fn fit_with_context(
    ctx: &EvalContext,
    cause: usize,
    penalty: Option<&PenaltyConfig>,
    cfg: &SolverConfig,
    warm_start: Option<&Coefficients>,
) -> Result<FitResult> {
    cfg.validate()?;
    if cause == 0 || cause > ctx.ds.n_causes() {
        return Err(Error::NoEvents(cause));
    }
    let events: usize = ctx
        .index
        .strata
        .iter()
        .map(|s| {
            s.by_cause[cause - 1]
                .iter()
                .map(|ft| ft.event_positions.len())
                .sum::<usize>()
        })
        .sum();
    if events == 0 {
        return Err(Error::NoEvents(cause));
    }
    let layout = ctx.basis.layout;
    let q = ctx.ds.q();
    let n = ctx.ds.len() as f64;
    let p_mat = match penalty {
        Some(cfg_pen) => {
            cfg_pen.validate(layout.p)?;
            Some(build_penalty_matrix(cfg_pen, &layout)?)
        }
        None => None,
    };

    let mut coeffs = match warm_start {
        Some(c) => c.clone(),
        None => Coefficients::zeros(&layout, q),
    };
    if !coeffs.is_finite() {
        return Err(Error::InvalidConfig("non-finite warm start".into()));
    }

    let dim = ctx.dim();
    let mut lambda = cfg.lambda0;
    let mut trace = Vec::new();
    let mut converged = false;

    let objective = |c: &Coefficients| -> Result<f64> {
        let v = ctx.value(cause, c)?;
        Ok(match &p_mat {
            Some(p) => v - penalty_value(p, &c.gamma),
            None => v,
        })
    };

    let mut iterations = 0usize;
    for iter in 0..cfg.max_iterations {
        iterations = iter + 1;
        let raw = ctx.derivatives(cause, &coeffs)?;
        let pen = penalize(&raw, p_mat.as_ref(), &coeffs.gamma)?;

        // Modified Hessian I/lambda - H/n is positive definite for any
        // finite lambda because H is negative semi-definite.
        let mut modified = DMatrix::<f64>::zeros(dim, dim);
        for c in 0..dim {
            for r in 0..dim {
                modified[(r, c)] = -pen.hessian[(r, c)] / n;
            }
            modified[(c, c)] += 1.0 / lambda;
        }
        let chol = Cholesky::new(modified)
            .ok_or(Error::SingularModifiedHessian { iteration: iter })?;
        let direction = chol.solve(&(&pen.gradient / n));
        let eta_sq = pen.gradient.dot(&direction);

        // Armijo backtracking on the (penalized) objective.
        let current = pen.value;
        let mut nu = 1.0;
        let mut accepted = None;
        for _ in 0..cfg.max_line_search_steps {
            let candidate = step(&coeffs, &direction, nu);
            let cand_value = objective(&candidate)?;
            if cand_value >= current + cfg.phi * nu * eta_sq {
                accepted = Some((candidate, cand_value));
                break;
            }
            nu *= cfg.psi;
        }
        let (next, next_value) = accepted.ok_or(Error::LineSearchExhausted {
            iteration: iter,
            steps: cfg.max_line_search_steps,
            eta_sq,
        })?;
        coeffs = next;
        trace.push(IterationRecord {
            eta_sq,
            step_size: nu,
            objective: next_value,
        });
        lambda *= cfg.delta;
        if eta_sq < 2.0 * cfg.epsilon {
            converged = true;
            break;
        }
    }

    let raw = ctx.derivatives(cause, &coeffs)?;
    let pen = penalize(&raw, p_mat.as_ref(), &coeffs.gamma)?;
    Ok(FitResult {
        cause,
        coefficients: coeffs,
        log_likelihood: raw.value,
        penalized_log_likelihood: p_mat.as_ref().map(|_| pen.value),
        iterations,
        converged,
        trace,
        gradient: raw.gradient,
        hessian: raw.hessian,
        penalized_gradient: pen.gradient,
        penalized_hessian: pen.hessian,
        penalty: penalty.cloned(),
        layout,
        n: ctx.ds.len(),
        events,
    })
}

fn step(coeffs: &Coefficients, direction: &DVector<f64>, nu: f64) -> Coefficients {
    let gamma_len = coeffs.gamma.len();
    let mut out = coeffs.clone();
    for (i, g) in out.gamma.iter_mut().enumerate() {
        *g += nu * direction[i];
    }
    for (i, t) in out.theta.iter_mut().enumerate() {
        *t += nu * direction[gamma_len + i];
    }
    out
}

/// Fits one cause from a dataset (builds the evaluation context internally).
pub fn fit(
    ds: &Dataset,
    index: &RiskIndex,
    basis: &ModelBasis,
    cause: usize,
    penalty: Option<&PenaltyConfig>,
    cfg: &SolverConfig,
) -> Result<FitResult> {
    let ctx = EvalContext::new(ds, index, basis)?;
    fit_with_context(&ctx, cause, penalty, cfg, None)
}

/// Independent fits for every cause with at least one event. Eventless
/// causes are skipped and reported in `skipped`.
pub struct AllCausesFit {
    pub fits: Vec<FitResult>,
    pub skipped: Vec<usize>,
}

pub fn fit_all_causes(
    ds: &Dataset,
    index: &RiskIndex,
    basis: &ModelBasis,
    penalty: Option<&PenaltyConfig>,
    cfg: &SolverConfig,
) -> Result<AllCausesFit> {
    let ctx = EvalContext::new(ds, index, basis)?;
    let counts = ds.counts_per_cause();
    let mut fits = Vec::new();
    let mut skipped = Vec::new();
    for cause in 1..=ds.n_causes() {
        if counts[cause] == 0 {
            skipped.push(cause);
            continue;
        }
        fits.push(fit_with_context(&ctx, cause, penalty, cfg, None)?);
    }
    Ok(AllCausesFit { fits, skipped })
}
