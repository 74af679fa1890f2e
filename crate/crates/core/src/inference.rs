//! Variance and bias estimation for penalized fits, Wald tests of effect
//! variation, quadratic-form tail probabilities, and pointwise confidence
//! intervals.

use crate::basis::difference_matrix;
use crate::error::{Error, Result};
use crate::numeric::{adaptive_simpson, chi_squared_sf, normal_quantile};
use crate::penalty::{build_penalty_matrix, q_matrix};
use crate::solver::FitResult;
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Which kind of effect variation a contrast tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastKind {
    /// Variation along event time: block-diagonal difference within each
    /// modifier row.
    EventTime,
    /// Variation along the modifier: differences of entries K apart.
    Modifier,
    /// Joint variation: first-order differences over the whole block.
    Joint,
}

impl ContrastKind {
    pub fn degrees_of_freedom(&self, k_time: usize, k_mod: usize) -> usize {
        match self {
            ContrastKind::EventTime => k_mod * (k_time - 1),
            ContrastKind::Modifier => k_time * (k_mod - 1),
            ContrastKind::Joint => k_time * k_mod - 1,
        }
    }
}

/// How the Wald statistic and its null distribution are constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestConstruction {
    /// Unpenalized statistic with the inverse-information block.
    UnpenalizedChisq,
    /// Penalized statistic with the sandwich variance on both sides.
    SandwichChisq,
    /// Penalized statistic with the model-based variance on both sides.
    ModelChisq,
    /// Model-based middle matrix, sandwich variance for the null: the null
    /// is a weighted chi-squared mixture.
    GrayMixture,
}

/// Null distribution descriptor for a Wald statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NullDistribution {
    ChiSquared {
        df: usize,
    },
    /// Weighted mixture sum_u mu_u G_u^2; `accuracy` is the achieved bound
    /// of the tail-probability integral.
    Mixture {
        eigenvalues: Vec<f64>,
        accuracy: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub kind: ContrastKind,
    pub construction: TestConstruction,
    pub covariate: usize,
    pub statistic: f64,
    pub null: NullDistribution,
    pub p_value: f64,
}

/// Variance/bias estimates at a fit optimum. With zero penalty the two
/// variance estimates coincide and the bias is zero.
#[derive(Debug, Clone)]
pub struct VarianceEstimates {
    /// Sandwich estimate Ainv (-Hess) Ainv with Ainv = (-pen. Hess)^{-1}.
    pub sandwich: DMatrix<f64>,
    /// Model-based estimate (-pen. Hess)^{-1}.
    pub model: DMatrix<f64>,
    /// Bias estimate (pen. Hess)^{-1} Q eta.
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceKind {
    Sandwich,
    Model,
}

impl VarianceEstimates {
    pub fn matrix(&self, kind: VarianceKind) -> &DMatrix<f64> {
        match kind {
            VarianceKind::Sandwich => &self.sandwich,
            VarianceKind::Model => &self.model,
        }
    }
}

/// Contrast matrix whose null space is exactly the coefficient blocks
/// constant along the tested direction(s).
pub fn contrast_matrix(kind: ContrastKind, k_time: usize, k_mod: usize) -> Result<DMatrix<f64>> {
    let block = k_time * k_mod;
    match kind {
        ContrastKind::EventTime => {
            if k_time < 2 {
                return Err(Error::ContrastTooSmall {
                    kind: "event-time",
                    requirement: "K >= 2",
                    k: k_time,
                    k_mod,
                });
            }
            let d = difference_matrix(k_time)?;
            let mut c = DMatrix::zeros(k_mod * (k_time - 1), block);
            for km in 0..k_mod {
                for i in 0..k_time - 1 {
                    for j in 0..k_time {
                        c[(km * (k_time - 1) + i, km * k_time + j)] = d[(i, j)];
                    }
                }
            }
            Ok(c)
        }
        ContrastKind::Modifier => {
            if k_mod < 2 {
                return Err(Error::ContrastTooSmall {
                    kind: "modifier",
                    requirement: "K_mod >= 2",
                    k: k_time,
                    k_mod,
                });
            }
            let mut c = DMatrix::zeros(k_time * (k_mod - 1), block);
            for i in 0..k_mod - 1 {
                for kt in 0..k_time {
                    c[(i * k_time + kt, i * k_time + kt)] = 1.0;
                    c[(i * k_time + kt, (i + 1) * k_time + kt)] = -1.0;
                }
            }
            Ok(c)
        }
        ContrastKind::Joint => {
            if block < 2 {
                return Err(Error::ContrastTooSmall {
                    kind: "joint",
                    requirement: "K * K_mod >= 2",
                    k: k_time,
                    k_mod,
                });
            }
            difference_matrix(block)
        }
    }
}

fn smallest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

fn inverse_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Cholesky::new(m.clone())
        .map(|c| c.inverse())
        .ok_or_else(|| Error::SingularPenalizedHessian {
            min_eigenvalue: smallest_eigenvalue(m),
        })
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Sandwich and model-based variances plus the bias estimate at the fit
/// optimum.
pub fn variance_estimates(fit: &FitResult) -> Result<VarianceEstimates> {
    let neg_pen = -&fit.penalized_hessian;
    let ainv = inverse_spd(&neg_pen)?;
    let model = symmetrize(&ainv);
    let sandwich = symmetrize(&(&ainv * (-&fit.hessian) * &ainv));
    let bias = match &fit.penalty {
        Some(pen) if !pen.is_zero() => {
            let p_mat = build_penalty_matrix(pen, &fit.layout)?;
            let q = q_matrix(&p_mat, fit.coefficients.theta.len());
            let eta = fit.coefficients.to_vector();
            // b = (pen. Hess)^{-1} Q eta = -Ainv Q eta.
            -(&ainv * (q * eta))
        }
        _ => DVector::zeros(fit.gradient.len()),
    };
    Ok(VarianceEstimates {
        sandwich,
        model,
        bias,
    })
}

/// Extracts the l-th (block x block) diagonal block.
fn diag_block(m: &DMatrix<f64>, l: usize, block: usize) -> DMatrix<f64> {
    m.view((l * block, l * block), (block, block)).into()
}

/// Upper tail P(sum_u mu_u G_u^2 > q) of a non-negatively weighted
/// chi-squared mixture, by numerical inversion of the characteristic
/// function (Imhof's integral). Returns the p-value and the achieved
/// accuracy bound.
pub fn quadform_tail(eigenvalues: &[f64], q: f64) -> Result<(f64, f64)> {
    const TOL: f64 = 1e-6;
    let max_ev = eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if max_ev <= 0.0 {
        return Err(Error::QuadformNoEigenvalues);
    }
    for &ev in eigenvalues {
        if ev < -1e-10 {
            return Err(Error::IndefiniteVariance(ev));
        }
    }
    // Scale-invariant: divide weights and threshold by the largest weight.
    // Weights far below the working precision contribute nothing but ruin
    // the truncation bound, so they are dropped with the zeros.
    let lambdas: Vec<f64> = eigenvalues
        .iter()
        .map(|&ev| ev / max_ev)
        .filter(|&ev| ev > 1e-12)
        .collect();
    let q = q / max_ev;
    if q <= 0.0 {
        return Ok((1.0, 0.0));
    }

    // All weights equal: exact chi-squared tail.
    let first = lambdas[0];
    if lambdas.iter().all(|&l| (l - first).abs() <= 1e-12 * first) {
        return Ok((chi_squared_sf(q / first, lambdas.len()), 0.0));
    }

    imhof_tail(&lambdas, q, TOL)
}

/// Imhof's inversion integral for distinct weights, adaptive Simpson over
/// phase-bounded chunks with an explicit truncation bound.
fn imhof_tail(lambdas: &[f64], q: f64, tol: f64) -> Result<(f64, f64)> {
    let r = lambdas.len() as f64;
    let k = r / 2.0;
    let log_prod_sqrt: f64 = lambdas.iter().map(|l| 0.5 * l.ln()).sum();
    // Truncation bound T(U) = 1 / (pi * k * U^k * prod sqrt(lambda)).
    let target = 0.5 * tol;
    let log_u = ((1.0 / (std::f64::consts::PI * k * target)).ln() - log_prod_sqrt) / k;
    let upper = log_u.exp().max(1.0);
    let truncation = (1.0
        / (std::f64::consts::PI * k * upper.powf(k) * log_prod_sqrt.exp()))
    .abs();

    let theta = |u: f64| -> f64 {
        let mut s = 0.0;
        for &l in lambdas {
            s += (l * u).atan();
        }
        0.5 * s - 0.5 * q * u
    };
    let rho = |u: f64| -> f64 {
        let mut s = 0.0;
        for &l in lambdas {
            s += (1.0 + l * l * u * u).ln();
        }
        (0.25 * s).exp()
    };
    let integrand = |u: f64| -> f64 {
        if u <= 0.0 {
            // Limit as u -> 0+.
            return 0.5 * (lambdas.iter().sum::<f64>() - q);
        }
        theta(u).sin() / (u * rho(u))
    };

    // Chunks no wider than a quarter of the fastest oscillation.
    let omega_max = 0.5 * (lambdas.iter().sum::<f64>() + q);
    let chunk = (std::f64::consts::FRAC_PI_2 / omega_max).min(upper / 8.0);
    let n_chunks = (upper / chunk).ceil() as usize;
    if n_chunks > 50_000_000 {
        return Err(Error::QuadformAccuracy {
            requested: tol,
            achieved: truncation.max(tol),
        });
    }
    let tol_per_chunk = 0.5 * tol / n_chunks as f64;
    let mut integral = 0.0;
    let mut achieved = truncation;
    for i in 0..n_chunks {
        let a = upper * i as f64 / n_chunks as f64;
        let b = upper * (i + 1) as f64 / n_chunks as f64;
        let (val, err) = adaptive_simpson(&integrand, a, b, tol_per_chunk, 24);
        integral += val;
        achieved += err;
    }

    let p = (0.5 + integral / std::f64::consts::PI).clamp(0.0, 1.0);
    if achieved > tol {
        return Err(Error::QuadformAccuracy {
            requested: tol,
            achieved,
        });
    }
    Ok((p, achieved))
}

/// Wald test of effect variation for covariate `l` (0-based).
pub fn wald_test(
    fit: &FitResult,
    var: &VarianceEstimates,
    kind: ContrastKind,
    construction: TestConstruction,
    covariate: usize,
) -> Result<TestResult> {
    let layout = fit.layout;
    if covariate >= layout.p {
        return Err(Error::InvalidConfig(format!(
            "covariate index {covariate} out of range (p = {})",
            layout.p
        )));
    }
    let block = layout.block();
    let c = contrast_matrix(kind, layout.k_time, layout.k_mod)?;
    let gamma_l = DVector::from_column_slice(
        &fit.coefficients.gamma[covariate * block..(covariate + 1) * block],
    );

    match construction {
        TestConstruction::UnpenalizedChisq => {
            let info_inv = inverse_spd(&(-&fit.hessian))?;
            let m_l = diag_block(&info_inv, covariate, block);
            let x = &c * &gamma_l;
            let mid = symmetrize(&(&c * m_l * c.transpose()));
            let chol = Cholesky::new(mid).ok_or(Error::SingularContrastCovariance)?;
            let statistic = x.dot(&chol.solve(&x));
            let df = c.nrows();
            Ok(TestResult {
                kind,
                construction,
                covariate,
                statistic,
                null: NullDistribution::ChiSquared { df },
                p_value: chi_squared_sf(statistic, df),
            })
        }
        TestConstruction::SandwichChisq | TestConstruction::ModelChisq => {
            let which = if construction == TestConstruction::SandwichChisq {
                VarianceKind::Sandwich
            } else {
                VarianceKind::Model
            };
            let omega_l = diag_block(var.matrix(which), covariate, block);
            let bias_l = var.bias.rows(covariate * block, block).into_owned();
            let x = &c * (&gamma_l - bias_l);
            let mid = symmetrize(&(&c * omega_l * c.transpose()));
            let chol = Cholesky::new(mid).ok_or(Error::SingularContrastCovariance)?;
            let statistic = x.dot(&chol.solve(&x));
            let df = c.nrows();
            Ok(TestResult {
                kind,
                construction,
                covariate,
                statistic,
                null: NullDistribution::ChiSquared { df },
                p_value: chi_squared_sf(statistic, df),
            })
        }
        TestConstruction::GrayMixture => {
            let omega_l = diag_block(&var.model, covariate, block);
            let sigma_l = diag_block(&var.sandwich, covariate, block);
            let bias_l = var.bias.rows(covariate * block, block).into_owned();
            let x = &c * (&gamma_l - bias_l);
            let mid = symmetrize(&(&c * omega_l * c.transpose()));
            let chol = Cholesky::new(mid.clone()).ok_or(Error::SingularContrastCovariance)?;
            let statistic = x.dot(&chol.solve(&x));
            // Null: eigenvalues of M * Sigma with M = mid^{-1} and Sigma the
            // variance of the contrasted estimate. Computed from the
            // symmetric similarity-equivalent form sqrt(Sigma) M sqrt(Sigma).
            let sigma_c = symmetrize(&(&c * sigma_l * c.transpose()));
            let sqrt_sigma = psd_sqrt(&sigma_c)?;
            let m_inv = chol.inverse();
            let w = symmetrize(&(&sqrt_sigma * m_inv * &sqrt_sigma));
            let mut eigenvalues: Vec<f64> = SymmetricEigen::new(w)
                .eigenvalues
                .iter()
                .cloned()
                .collect();
            for ev in eigenvalues.iter_mut() {
                if *ev < -1e-10 {
                    return Err(Error::IndefiniteVariance(*ev));
                }
                if *ev < 0.0 {
                    *ev = 0.0;
                }
            }
            eigenvalues.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let (p_value, accuracy) = quadform_tail(&eigenvalues, statistic)?;
            Ok(TestResult {
                kind,
                construction,
                covariate,
                statistic,
                null: NullDistribution::Mixture {
                    eigenvalues,
                    accuracy,
                },
                p_value,
            })
        }
    }
}

/// Symmetric PSD square root via eigendecomposition; small negative
/// eigenvalues are clipped, larger ones are an error.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let mut d = eig.eigenvalues.clone();
    for v in d.iter_mut() {
        if *v < -1e-10 {
            return Err(Error::IndefiniteVariance(*v));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// One confidence-interval grid cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub t: f64,
    pub x_mod: f64,
    /// Bias-corrected estimate (equals the raw estimate when unpenalized).
    pub estimate: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Pointwise confidence intervals for the surface of covariate `l` over the
/// product grid `t_grid` x `x_grid`.
pub fn pointwise_ci(
    fit: &FitResult,
    var: &VarianceEstimates,
    basis: &crate::likelihood::ModelBasis,
    covariate: usize,
    t_grid: &[f64],
    x_grid: &[f64],
    level: f64,
    which: VarianceKind,
) -> Result<Vec<SurfacePoint>> {
    if !(0.0 < level && level < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "confidence level {level} outside (0,1)"
        )));
    }
    let layout = basis.layout;
    if covariate >= layout.p {
        return Err(Error::InvalidConfig(format!(
            "covariate index {covariate} out of range (p = {})",
            layout.p
        )));
    }
    let block = layout.block();
    let omega_l = diag_block(var.matrix(which), covariate, block);
    let z = normal_quantile(0.5 + level / 2.0);
    let gamma_l = &fit.coefficients.gamma[covariate * block..(covariate + 1) * block];
    let bias_l = var.bias.rows(covariate * block, block);
    let corrected: Vec<f64> = gamma_l
        .iter()
        .zip(bias_l.iter())
        .map(|(g, b)| g - b)
        .collect();
    let mut out = Vec::with_capacity(t_grid.len() * x_grid.len());
    for &x in x_grid {
        let bm = basis.modifier.eval(x);
        for &t in t_grid {
            let bt = basis.time.eval(t);
            // row = Bmod (x) Btime in canonical (modifier slow) order.
            let mut row = DVector::zeros(block);
            for (km, &bmv) in bm.iter().enumerate() {
                for (kt, &btv) in bt.iter().enumerate() {
                    row[km * layout.k_time + kt] = bmv * btv;
                }
            }
            let estimate: f64 = row.iter().zip(&corrected).map(|(a, b)| a * b).sum();
            let se = row.dot(&(&omega_l * &row)).max(0.0).sqrt();
            out.push(SurfacePoint {
                t,
                x_mod: x,
                estimate,
                se,
                lo: estimate - z * se,
                hi: estimate + z * se,
            });
        }
    }
    Ok(out)
}
