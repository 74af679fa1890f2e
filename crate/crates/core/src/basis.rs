//! Marginal B-spline bases, tensor-product rows, and difference matrices.
//!
//! Bases use the clamped (open) convention: boundary knots repeated
//! `degree + 1` times, so the basis spans constants and includes an
//! intercept. A basis with `u` interior knots and degree `d` has
//! `K = u + d + 1` functions.

use crate::error::{Error, Result};
use crate::numeric::quantile_type7;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// One marginal B-spline basis on `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    degree: usize,
    lo: f64,
    hi: f64,
    interior: Vec<f64>,
    /// Full clamped knot vector of length `K + degree + 1`.
    knots: Vec<f64>,
    /// Interior knots removed because quantiles tied or hit the boundary.
    dropped_knots: usize,
}

impl BasisSpec {
    /// Builds a basis from explicit interior knots.
    pub fn new(degree: usize, boundary: (f64, f64), interior: Vec<f64>) -> Result<Self> {
        let (lo, hi) = boundary;
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(Error::InvalidKnots(format!(
                "boundary ({lo}, {hi}) must be finite with lo < hi"
            )));
        }
        for pair in interior.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::InvalidKnots(format!(
                    "interior knots must be strictly ascending, got {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        if let (Some(first), Some(last)) = (interior.first(), interior.last()) {
            if *first <= lo || *last >= hi {
                return Err(Error::InvalidKnots(format!(
                    "interior knots must lie strictly inside ({lo}, {hi})"
                )));
            }
        }
        let mut knots = Vec::with_capacity(interior.len() + 2 * (degree + 1));
        knots.extend(std::iter::repeat(lo).take(degree + 1));
        knots.extend_from_slice(&interior);
        knots.extend(std::iter::repeat(hi).take(degree + 1));
        Ok(Self {
            degree,
            lo,
            hi,
            interior,
            knots,
            dropped_knots: 0,
        })
    }

    /// Places `num_interior` knots at evenly spaced empirical quantiles of
    /// `values` (type-7: linear interpolation between order statistics) with
    /// the boundary at the data range. Tied or boundary-coincident quantiles
    /// are collapsed; `dropped_knots` records how many were removed.
    pub fn from_quantiles(values: &[f64], degree: usize, num_interior: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyValues);
        }
        let mut sorted: Vec<f64> = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in knot data"));
        let lo = sorted[0];
        let hi = sorted[sorted.len() - 1];
        if lo == hi {
            return Err(Error::DegenerateDomain {
                value: lo,
                count: sorted.len(),
            });
        }
        let mut interior = Vec::with_capacity(num_interior);
        for j in 1..=num_interior {
            let p = j as f64 / (num_interior + 1) as f64;
            interior.push(quantile_type7(&sorted, p));
        }
        let before = interior.len();
        interior.dedup();
        interior.retain(|&k| k > lo && k < hi);
        let dropped = before - interior.len();
        let mut spec = Self::new(degree, (lo, hi), interior)?;
        spec.dropped_knots = dropped;
        Ok(spec)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of basis functions, K = u + d + 1.
    pub fn len(&self) -> usize {
        self.interior.len() + self.degree + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn boundary(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior
    }

    pub fn dropped_knots(&self) -> usize {
        self.dropped_knots
    }

    /// Whether evaluating at `x` clamps to the boundary.
    pub fn clamps(&self, x: f64) -> bool {
        x < self.lo || x > self.hi
    }

    /// Knot span index for clamped `x`: largest `s` with `knots[s] <= x`,
    /// restricted to `[degree, K-1]`.
    fn find_span(&self, x: f64) -> usize {
        let k = self.len();
        if x >= self.hi {
            return k - 1;
        }
        let mut lo = self.degree;
        let mut hi = k; // knots[k] is the first hi-boundary knot
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Evaluates the `degree + 1` basis functions that may be nonzero at `x`
    /// (clamped to the boundary) into `vals`, returning the index of the
    /// first one. `vals` must have length `degree + 1`.
    pub fn eval_nonzero_into(&self, x: f64, vals: &mut [f64]) -> usize {
        debug_assert_eq!(vals.len(), self.degree + 1);
        let x = x.clamp(self.lo, self.hi);
        let s = self.find_span(x);
        let t = &self.knots;
        // Cox-de Boor triangular scheme over the nonzero window.
        vals[0] = 1.0;
        let mut left = [0.0f64; 32];
        let mut right = [0.0f64; 32];
        assert!(self.degree < 32, "degree above 31 is not supported");
        for j in 1..=self.degree {
            left[j] = x - t[s + 1 - j];
            right[j] = t[s + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        s - self.degree
    }

    /// Full length-K vector of basis values at `x` (clamped to the boundary).
    pub fn eval(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        let mut vals = vec![0.0; self.degree + 1];
        let offset = self.eval_nonzero_into(x, &mut vals);
        out[offset..offset + self.degree + 1].copy_from_slice(&vals);
        out
    }
}

/// Index layout of the stacked coefficient vector for `p` varying-effect
/// covariates: covariate slowest, modifier next, event time fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorLayout {
    /// Number of varying-effect covariates.
    pub p: usize,
    /// Event-time basis size K.
    pub k_time: usize,
    /// Modifier basis size K-breve.
    pub k_mod: usize,
}

impl TensorLayout {
    pub fn new(p: usize, k_time: usize, k_mod: usize) -> Self {
        Self { p, k_time, k_mod }
    }

    /// Total coefficient count p * K * K_mod.
    pub fn total(&self) -> usize {
        self.p * self.k_time * self.k_mod
    }

    /// Size of one covariate block, K * K_mod.
    pub fn block(&self) -> usize {
        self.k_time * self.k_mod
    }

    #[inline]
    pub fn index(&self, covariate: usize, k_mod: usize, k_time: usize) -> usize {
        debug_assert!(covariate < self.p && k_mod < self.k_mod && k_time < self.k_time);
        (covariate * self.k_mod + k_mod) * self.k_time + k_time
    }
}

/// Kronecker-product row z (x) b_mod (x) b_time in the canonical layout.
pub fn tensor_row(
    layout: &TensorLayout,
    z: &[f64],
    b_mod: &[f64],
    b_time: &[f64],
) -> Result<Vec<f64>> {
    if z.len() != layout.p {
        return Err(Error::DimensionMismatch {
            what: "tensor_row covariates",
            expected: layout.p,
            got: z.len(),
        });
    }
    if b_mod.len() != layout.k_mod {
        return Err(Error::DimensionMismatch {
            what: "tensor_row modifier basis",
            expected: layout.k_mod,
            got: b_mod.len(),
        });
    }
    if b_time.len() != layout.k_time {
        return Err(Error::DimensionMismatch {
            what: "tensor_row time basis",
            expected: layout.k_time,
            got: b_time.len(),
        });
    }
    let mut out = Vec::with_capacity(layout.total());
    for &zl in z {
        for &bm in b_mod {
            let zb = zl * bm;
            for &bt in b_time {
                out.push(zb * bt);
            }
        }
    }
    Ok(out)
}

/// First-order difference matrix: (K-1) x K with +1 on the diagonal and -1
/// on the superdiagonal.
pub fn difference_matrix(k: usize) -> Result<DMatrix<f64>> {
    if k < 2 {
        return Err(Error::DifferenceTooSmall(k));
    }
    let mut d = DMatrix::zeros(k - 1, k);
    for i in 0..k - 1 {
        d[(i, i)] = 1.0;
        d[(i, i + 1)] = -1.0;
    }
    Ok(d)
}

/// Evaluates one coefficient surface sum_{k_mod, k_time} gamma[k_mod, k_time]
/// * B_mod(x_mod) * B_time(t). `gamma` is one covariate block in canonical
/// layout (modifier slow, time fast).
pub fn eval_surface(
    time_basis: &BasisSpec,
    mod_basis: &BasisSpec,
    gamma: &[f64],
    t: f64,
    x_mod: f64,
) -> Result<f64> {
    let k_time = time_basis.len();
    let k_mod = mod_basis.len();
    if gamma.len() != k_time * k_mod {
        return Err(Error::DimensionMismatch {
            what: "eval_surface coefficient block",
            expected: k_time * k_mod,
            got: gamma.len(),
        });
    }
    let bt = time_basis.eval(t);
    let bm = mod_basis.eval(x_mod);
    let mut acc = 0.0;
    for (km, &bmv) in bm.iter().enumerate() {
        if bmv == 0.0 {
            continue;
        }
        let row = &gamma[km * k_time..(km + 1) * k_time];
        let mut inner = 0.0;
        for (kt, &btv) in bt.iter().enumerate() {
            inner += row[kt] * btv;
        }
        acc += bmv * inner;
    }
    Ok(acc)
}
