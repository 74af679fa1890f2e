//! Anisotropic first-order difference penalties on the control-point grid.
//!
//! For covariate l the penalty is
//! `mu_mod[l]^2 ||D_mod gamma_l||_F^2 + mu_time[l]^2 ||gamma_l D_time'||_F^2`,
//! a quadratic form `gamma' P gamma` with P block-diagonal over covariates.
//! The calculus derivatives of the quadratic form are used exactly, so the
//! matrix applied to the Hessian is `Q = 2 * blockdiag(P, 0_qxq)`.

use crate::basis::TensorLayout;
use crate::error::{Error, Result};
use crate::likelihood::LikelihoodDerivatives;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Smoothing parameters per varying-effect covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// Event-time smoothing (penalizes differences along t).
    pub mu_time: Vec<f64>,
    /// Modifier smoothing (penalizes differences along the modifier).
    pub mu_mod: Vec<f64>,
}

impl PenaltyConfig {
    /// The same pair (mu_time, mu_mod) for every covariate.
    pub fn uniform(p: usize, mu_time: f64, mu_mod: f64) -> Self {
        Self {
            mu_time: vec![mu_time; p],
            mu_mod: vec![mu_mod; p],
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.mu_time.len() != p || self.mu_mod.len() != p {
            return Err(Error::DimensionMismatch {
                what: "penalty parameter count",
                expected: p,
                got: self.mu_time.len().min(self.mu_mod.len()),
            });
        }
        for &m in self.mu_time.iter().chain(self.mu_mod.iter()) {
            if !m.is_finite() || m < 0.0 {
                return Err(Error::NegativeTuning(m));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.mu_time.iter().chain(self.mu_mod.iter()).all(|&m| m == 0.0)
    }
}

/// Gram matrix D'D of the first-order difference matrix of size k: a
/// tridiagonal second-difference matrix with free ends.
fn difference_gram(k: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(k, k);
    if k < 2 {
        return g;
    }
    for i in 0..k - 1 {
        g[(i, i)] += 1.0;
        g[(i + 1, i + 1)] += 1.0;
        g[(i, i + 1)] -= 1.0;
        g[(i + 1, i)] -= 1.0;
    }
    g
}

/// Builds the penalty matrix P (size p*K*Kmod square) in the canonical
/// layout. Block l equals
/// `mu_mod[l]^2 (Gmod (x) I_K) + mu_time[l]^2 (I_Kmod (x) Gtime)`
/// with G the difference Gram matrices.
pub fn build_penalty_matrix(cfg: &PenaltyConfig, layout: &TensorLayout) -> Result<DMatrix<f64>> {
    cfg.validate(layout.p)?;
    let k_time = layout.k_time;
    let k_mod = layout.k_mod;
    let block = layout.block();
    let g_time = difference_gram(k_time);
    let g_mod = difference_gram(k_mod);
    let mut p_mat = DMatrix::zeros(layout.total(), layout.total());
    for l in 0..layout.p {
        let mt2 = cfg.mu_time[l] * cfg.mu_time[l];
        let mm2 = cfg.mu_mod[l] * cfg.mu_mod[l];
        let base = l * block;
        // mm2 * (Gmod (x) I_K): couples equal time indices across modifier rows.
        for km1 in 0..k_mod {
            for km2 in 0..k_mod {
                let gv = g_mod[(km1, km2)];
                if gv == 0.0 {
                    continue;
                }
                for kt in 0..k_time {
                    p_mat[(base + km1 * k_time + kt, base + km2 * k_time + kt)] += mm2 * gv;
                }
            }
        }
        // mt2 * (I_Kmod (x) Gtime): couples time indices within a modifier row.
        for km in 0..k_mod {
            for kt1 in 0..k_time {
                for kt2 in 0..k_time {
                    let gv = g_time[(kt1, kt2)];
                    if gv == 0.0 {
                        continue;
                    }
                    p_mat[(base + km * k_time + kt1, base + km * k_time + kt2)] += mt2 * gv;
                }
            }
        }
    }
    Ok(p_mat)
}

/// Quadratic penalty value gamma' P gamma.
pub fn penalty_value(p_mat: &DMatrix<f64>, gamma: &[f64]) -> f64 {
    let g = DVector::from_column_slice(gamma);
    (g.transpose() * p_mat * &g)[(0, 0)]
}

/// Applies the penalty corrections: value - gamma'P gamma, gradient - 2P
/// gamma (theta part untouched), Hessian - 2 blockdiag(P, 0).
pub fn penalized_derivatives(
    deriv: &LikelihoodDerivatives,
    p_mat: &DMatrix<f64>,
    gamma: &[f64],
) -> Result<LikelihoodDerivatives> {
    let gamma_len = p_mat.nrows();
    if gamma.len() != gamma_len || deriv.gradient.len() < gamma_len {
        return Err(Error::DimensionMismatch {
            what: "penalized derivative dimensions",
            expected: gamma_len,
            got: gamma.len(),
        });
    }
    let g = DVector::from_column_slice(gamma);
    let pg = p_mat * &g;
    let value = deriv.value - g.dot(&pg);
    let mut gradient = deriv.gradient.clone();
    for i in 0..gamma_len {
        gradient[i] -= 2.0 * pg[i];
    }
    let mut hessian = deriv.hessian.clone();
    for c in 0..gamma_len {
        for r in 0..gamma_len {
            hessian[(r, c)] -= 2.0 * p_mat[(r, c)];
        }
    }
    Ok(LikelihoodDerivatives {
        value,
        gradient,
        hessian,
    })
}

/// Q = 2 blockdiag(P, 0_qxq), the matrix subtracted from the Hessian.
pub fn q_matrix(p_mat: &DMatrix<f64>, q: usize) -> DMatrix<f64> {
    let gamma_len = p_mat.nrows();
    let dim = gamma_len + q;
    let mut qm = DMatrix::zeros(dim, dim);
    for c in 0..gamma_len {
        for r in 0..gamma_len {
            qm[(r, c)] = 2.0 * p_mat[(r, c)];
        }
    }
    qm
}
