//! Stratified cause-specific log-partial likelihood, gradient, and Hessian.
//!
//! The linear predictor of record r evaluated at event time t is
//! `(z_r (x) Bmod(x_r) (x) Btime(t))' gamma + w_r' theta`. Risk-set sums are
//! accumulated in a compressed form: the factor `a_r = z_r (x) Bmod(x_r)`
//! does not depend on the event time, so per failure time we accumulate
//! moments of `[a_r; w_r]` and expand with the Kronecker factor `Btime(t)`
//! afterwards. Exponentials are shifted by the risk-set maximum before
//! summation.

use crate::basis::{tensor_row, BasisSpec, TensorLayout};
use crate::data::{Dataset, RiskIndex, SubjectRecord};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Bases of the two timescales plus the coefficient layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBasis {
    pub time: BasisSpec,
    pub modifier: BasisSpec,
    pub layout: TensorLayout,
}

impl ModelBasis {
    pub fn new(time: BasisSpec, modifier: BasisSpec, p: usize) -> Self {
        let layout = TensorLayout::new(p, time.len(), modifier.len());
        Self {
            time,
            modifier,
            layout,
        }
    }
}

/// Coefficients for one cause: `gamma` in canonical layout plus invariant
/// `theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub gamma: Vec<f64>,
    pub theta: Vec<f64>,
}

impl Coefficients {
    pub fn zeros(layout: &TensorLayout, q: usize) -> Self {
        Self {
            gamma: vec![0.0; layout.total()],
            theta: vec![0.0; q],
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len() + self.theta.len()
    }

    /// Stacked vector [gamma; theta].
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        v.as_mut_slice()[..self.gamma.len()].copy_from_slice(&self.gamma);
        v.as_mut_slice()[self.gamma.len()..].copy_from_slice(&self.theta);
        v
    }

    pub fn from_vector(v: &DVector<f64>, gamma_len: usize) -> Self {
        Self {
            gamma: v.as_slice()[..gamma_len].to_vec(),
            theta: v.as_slice()[gamma_len..].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.gamma.iter().chain(self.theta.iter()).all(|v| v.is_finite())
    }
}

/// Value, gradient, and Hessian of the log-partial likelihood at one point.
#[derive(Debug, Clone)]
pub struct LikelihoodDerivatives {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

struct TimeEval {
    offset: usize,
    vals: Vec<f64>,
}

/// Position-major per-stratum data in descending-time order, so risk-set
/// sweeps read memory sequentially.
struct StratumData {
    /// z (x) nonzero modifier-basis values; `p * (dm + 1)` per position.
    az: Vec<f64>,
    /// Invariant covariates; `q` per position.
    w: Vec<f64>,
    /// Modifier span offset per position.
    off: Vec<u32>,
}

/// Precomputed evaluation state for one (dataset, basis) pair. Immutable
/// after construction; all evaluations are pure.
pub struct EvalContext<'a> {
    pub ds: &'a Dataset,
    pub index: &'a RiskIndex,
    pub basis: &'a ModelBasis,
    strata: Vec<StratumData>,
    /// Per (stratum, cause): time-basis evaluations at the distinct failure
    /// times, parallel to the risk index.
    time_evals: Vec<Vec<Vec<TimeEval>>>,
    /// Records whose time or modifier fell outside a basis boundary.
    pub clamped_records: usize,
}

impl<'a> EvalContext<'a> {
    pub fn new(ds: &'a Dataset, index: &'a RiskIndex, basis: &'a ModelBasis) -> Result<Self> {
        if basis.layout.p != ds.p() {
            return Err(Error::DimensionMismatch {
                what: "layout covariate count",
                expected: ds.p(),
                got: basis.layout.p,
            });
        }
        let p = ds.p();
        let q = ds.q();
        let dm1 = basis.modifier.degree() + 1;
        let mut clamped = 0usize;
        let mut mvals = vec![0.0; dm1];
        let mut strata = Vec::with_capacity(index.strata.len());
        for stratum in &index.strata {
            let m = stratum.subjects_desc.len();
            let mut data = StratumData {
                az: vec![0.0; m * p * dm1],
                w: vec![0.0; m * q],
                off: vec![0; m],
            };
            for (pos, &rec_idx) in stratum.subjects_desc.iter().enumerate() {
                let rec = &ds.records()[rec_idx];
                if basis.modifier.clamps(rec.modifier) || basis.time.clamps(rec.time) {
                    clamped += 1;
                }
                let off = basis.modifier.eval_nonzero_into(rec.modifier, &mut mvals);
                data.off[pos] = off as u32;
                let row = &mut data.az[pos * p * dm1..(pos + 1) * p * dm1];
                for (l, &zl) in rec.z.iter().enumerate() {
                    for (a, &mv) in mvals.iter().enumerate() {
                        row[l * dm1 + a] = zl * mv;
                    }
                }
                data.w[pos * q..(pos + 1) * q].copy_from_slice(&rec.w);
            }
            strata.push(data);
        }
        let dt1 = basis.time.degree() + 1;
        let mut tvals = vec![0.0; dt1];
        let mut time_evals = Vec::with_capacity(index.strata.len());
        for stratum in &index.strata {
            let mut per_cause = Vec::with_capacity(stratum.by_cause.len());
            for fts in &stratum.by_cause {
                let mut evals = Vec::with_capacity(fts.len());
                for ft in fts {
                    let offset = basis.time.eval_nonzero_into(ft.time, &mut tvals);
                    evals.push(TimeEval {
                        offset,
                        vals: tvals.clone(),
                    });
                }
                per_cause.push(evals);
            }
            time_evals.push(per_cause);
        }
        Ok(Self {
            ds,
            index,
            basis,
            strata,
            time_evals,
            clamped_records: clamped,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.layout.total() + self.ds.q()
    }

    fn check_cause(&self, cause: usize) -> Result<()> {
        if cause == 0 || cause > self.ds.n_causes() {
            return Err(Error::NoEvents(cause));
        }
        Ok(())
    }

    /// w' theta per position of stratum `g`.
    fn stratum_wtheta(&self, g: usize, theta: &[f64]) -> Vec<f64> {
        let q = self.ds.q();
        let data = &self.strata[g];
        let m = data.off.len();
        let mut out = vec![0.0; m];
        if q == 0 {
            return out;
        }
        for (pos, o) in out.iter_mut().enumerate() {
            let wrow = &data.w[pos * q..(pos + 1) * q];
            let mut acc = 0.0;
            for (wv, tv) in wrow.iter().zip(theta) {
                acc += wv * tv;
            }
            *o = acc;
        }
        out
    }

    /// Reduces gamma against the time-basis values of one failure time:
    /// `c[l, kmod] = sum_k gamma[l, kmod, k] * bt[k]`.
    fn reduce_gamma(&self, gamma: &[f64], te: &TimeEval, c: &mut [f64]) {
        let lay = &self.basis.layout;
        let k_time = lay.k_time;
        for lk in 0..lay.p * lay.k_mod {
            let row = &gamma[lk * k_time + te.offset..lk * k_time + te.offset + te.vals.len()];
            let mut acc = 0.0;
            for (v, b) in row.iter().zip(&te.vals) {
                acc += v * b;
            }
            c[lk] = acc;
        }
    }

    /// Fills `lp` with linear predictors of positions `0..risk_len` of
    /// stratum `g` given the gamma reduction `c`, returning the maximum.
    fn fill_lp(
        &self,
        g: usize,
        risk_len: usize,
        c: &[f64],
        wtheta: &[f64],
        lp: &mut Vec<f64>,
    ) -> f64 {
        let lay = &self.basis.layout;
        let data = &self.strata[g];
        let dm1 = self.basis.modifier.degree() + 1;
        let adm = lay.p * dm1;
        let k_mod = lay.k_mod;
        lp.clear();
        lp.reserve(risk_len);
        let mut max = f64::NEG_INFINITY;
        if adm == 4 && lay.p == 1 {
            // Dominant shape (one varying covariate, cubic modifier basis).
            for (pos, (azrow, &off)) in data.az[..risk_len * 4]
                .chunks_exact(4)
                .zip(&data.off[..risk_len])
                .enumerate()
            {
                let crow = &c[off as usize..off as usize + 4];
                let v = wtheta[pos]
                    + azrow[0] * crow[0]
                    + azrow[1] * crow[1]
                    + azrow[2] * crow[2]
                    + azrow[3] * crow[3];
                max = max.max(v);
                lp.push(v);
            }
            return max;
        }
        for (pos, (azrow, &off)) in data.az[..risk_len * adm]
            .chunks_exact(adm)
            .zip(&data.off[..risk_len])
            .enumerate()
        {
            let off = off as usize;
            let mut v = wtheta[pos];
            for l in 0..lay.p {
                let crow = &c[l * k_mod + off..l * k_mod + off + dm1];
                let arow = &azrow[l * dm1..(l + 1) * dm1];
                let mut acc = 0.0;
                for (a, cv) in arow.iter().zip(crow) {
                    acc += a * cv;
                }
                v += acc;
            }
            max = max.max(v);
            lp.push(v);
        }
        max
    }

    /// Log-partial likelihood for one cause.
    pub fn value(&self, cause: usize, coeffs: &Coefficients) -> Result<f64> {
        self.check_cause(cause)?;
        let lay = &self.basis.layout;
        let mut c = vec![0.0; lay.p * lay.k_mod];
        let mut lp = Vec::new();
        let mut total = 0.0;
        for (g, stratum) in self.index.strata.iter().enumerate() {
            let fts = &stratum.by_cause[cause - 1];
            if fts.is_empty() {
                continue;
            }
            let wtheta = self.stratum_wtheta(g, &coeffs.theta);
            let evals = &self.time_evals[g][cause - 1];
            // Descending time order for deterministic accumulation.
            for (ft, te) in fts.iter().zip(evals).rev() {
                self.reduce_gamma(&coeffs.gamma, te, &mut c);
                let max = self.fill_lp(g, ft.risk_len, &c, &wtheta, &mut lp);
                let s0: f64 = lp.iter().map(|&v| (v - max).exp()).sum();
                if !s0.is_finite() || s0 <= 0.0 {
                    return Err(Error::NonFiniteRiskSum {
                        stratum: self.ds.stratum_labels()[g].clone(),
                        time: ft.time,
                    });
                }
                let log_denom = max + s0.ln();
                for &pos in &ft.event_positions {
                    total += lp[pos] - log_denom;
                }
            }
        }
        Ok(total)
    }

    /// Log-partial likelihood where each record's linear predictor uses the
    /// coefficient set chosen by `assignment` (used by fold-unconstrained
    /// cross-validation).
    pub fn value_mixed(
        &self,
        cause: usize,
        coeff_sets: &[Coefficients],
        assignment: &[usize],
    ) -> Result<f64> {
        self.check_cause(cause)?;
        if assignment.len() != self.ds.len() {
            return Err(Error::DimensionMismatch {
                what: "coefficient assignment",
                expected: self.ds.len(),
                got: assignment.len(),
            });
        }
        let lay = &self.basis.layout;
        let dm1 = self.basis.modifier.degree() + 1;
        let adm = lay.p * dm1;
        let k_mod = lay.k_mod;
        let mut cs_red = vec![vec![0.0; lay.p * lay.k_mod]; coeff_sets.len()];
        let mut lp: Vec<f64> = Vec::new();
        let mut total = 0.0;
        for (g, stratum) in self.index.strata.iter().enumerate() {
            let fts = &stratum.by_cause[cause - 1];
            if fts.is_empty() {
                continue;
            }
            let data = &self.strata[g];
            let wthetas: Vec<Vec<f64>> = coeff_sets
                .iter()
                .map(|cs| self.stratum_wtheta(g, &cs.theta))
                .collect();
            let evals = &self.time_evals[g][cause - 1];
            for (ft, te) in fts.iter().zip(evals).rev() {
                for (cs, red) in coeff_sets.iter().zip(cs_red.iter_mut()) {
                    self.reduce_gamma(&cs.gamma, te, red);
                }
                lp.clear();
                let mut max = f64::NEG_INFINITY;
                for pos in 0..ft.risk_len {
                    let rec = stratum.subjects_desc[pos];
                    let set = assignment[rec];
                    let azrow = &data.az[pos * adm..(pos + 1) * adm];
                    let off = data.off[pos] as usize;
                    let c = &cs_red[set];
                    let mut v = wthetas[set][pos];
                    for l in 0..lay.p {
                        let crow = &c[l * k_mod + off..l * k_mod + off + dm1];
                        let arow = &azrow[l * dm1..(l + 1) * dm1];
                        for (a, cv) in arow.iter().zip(crow) {
                            v += a * cv;
                        }
                    }
                    max = max.max(v);
                    lp.push(v);
                }
                let s0: f64 = lp.iter().map(|&v| (v - max).exp()).sum();
                if !s0.is_finite() || s0 <= 0.0 {
                    return Err(Error::NonFiniteRiskSum {
                        stratum: self.ds.stratum_labels()[g].clone(),
                        time: ft.time,
                    });
                }
                let log_denom = max + s0.ln();
                for &pos in &ft.event_positions {
                    total += lp[pos] - log_denom;
                }
            }
        }
        Ok(total)
    }

    /// Value, gradient, and Hessian in one pass.
    ///
    /// Risk-set moments are accumulated per modifier-span offset in compact
    /// buckets (the tensor factor `a_r = z_r (x) Bmod(x_r)` has `p * (dm+1)`
    /// nonzeros at a shared offset), then scattered once per failure time
    /// and expanded with the `Btime` Kronecker factor.
    pub fn derivatives(&self, cause: usize, coeffs: &Coefficients) -> Result<LikelihoodDerivatives> {
        self.check_cause(cause)?;
        let lay = &self.basis.layout;
        let q = self.ds.q();
        let dim = self.dim();
        let gamma_len = lay.total();
        let pk = lay.p * lay.k_mod;
        let dm1 = self.basis.modifier.degree() + 1;
        let adm = lay.p * dm1;
        let k_time = lay.k_time;
        let n_off = lay.k_mod + 1 - dm1;

        let mut value = 0.0;
        let mut grad = DVector::<f64>::zeros(dim);
        let mut hess = DMatrix::<f64>::zeros(dim, dim);

        let mut c = vec![0.0; pk];
        let mut lp: Vec<f64> = Vec::new();
        let mut vbuf = vec![0.0; adm];
        // Offset-bucketed first and second moments of a_r, plus global
        // moments of w.
        let mut sa_b = vec![0.0; n_off * adm];
        let mut saa_b = vec![0.0; n_off * adm * adm];
        let mut saw_b = vec![0.0; n_off * adm * q];
        let mut sw = vec![0.0; q];
        let mut sww = vec![0.0; q * q];
        // Scattered (dense) forms.
        let mut sa = vec![0.0; pk];
        let mut saa = vec![0.0; pk * pk];
        let mut saw = vec![0.0; pk * q];
        let mut gmat = vec![0.0; pk * pk];

        for (g, stratum) in self.index.strata.iter().enumerate() {
            let fts = &stratum.by_cause[cause - 1];
            if fts.is_empty() {
                continue;
            }
            let data = &self.strata[g];
            let wtheta = self.stratum_wtheta(g, &coeffs.theta);
            let evals = &self.time_evals[g][cause - 1];
            for (ft, te) in fts.iter().zip(evals).rev() {
                self.reduce_gamma(&coeffs.gamma, te, &mut c);
                let max = self.fill_lp(g, ft.risk_len, &c, &wtheta, &mut lp);

                sa_b.iter_mut().for_each(|v| *v = 0.0);
                saa_b.iter_mut().for_each(|v| *v = 0.0);
                saw_b.iter_mut().for_each(|v| *v = 0.0);
                sw.iter_mut().for_each(|v| *v = 0.0);
                sww.iter_mut().for_each(|v| *v = 0.0);
                let mut s0 = 0.0;

                if adm == 4 && q == 1 {
                    // Dominant shape: fully unrolled accumulation.
                    for ((azrow, &off), (&lpv, &wv)) in data.az[..ft.risk_len * 4]
                        .chunks_exact(4)
                        .zip(&data.off[..ft.risk_len])
                        .zip(lp.iter().zip(&data.w[..ft.risk_len]))
                    {
                        let om = (lpv - max).exp();
                        s0 += om;
                        let a0 = azrow[0];
                        let a1 = azrow[1];
                        let a2 = azrow[2];
                        let a3 = azrow[3];
                        let v0 = om * a0;
                        let v1 = om * a1;
                        let v2 = om * a2;
                        let v3 = om * a3;
                        let off = off as usize;
                        let sab: &mut [f64; 4] =
                            (&mut sa_b[off * 4..off * 4 + 4]).try_into().unwrap();
                        sab[0] += v0;
                        sab[1] += v1;
                        sab[2] += v2;
                        sab[3] += v3;
                        let saab: &mut [f64; 16] =
                            (&mut saa_b[off * 16..off * 16 + 16]).try_into().unwrap();
                        saab[0] += v0 * a0;
                        saab[1] += v0 * a1;
                        saab[2] += v0 * a2;
                        saab[3] += v0 * a3;
                        saab[5] += v1 * a1;
                        saab[6] += v1 * a2;
                        saab[7] += v1 * a3;
                        saab[10] += v2 * a2;
                        saab[11] += v2 * a3;
                        saab[15] += v3 * a3;
                        sw[0] += om * wv;
                        let sawb: &mut [f64; 4] =
                            (&mut saw_b[off * 4..off * 4 + 4]).try_into().unwrap();
                        sawb[0] += v0 * wv;
                        sawb[1] += v1 * wv;
                        sawb[2] += v2 * wv;
                        sawb[3] += v3 * wv;
                        sww[0] += om * wv * wv;
                    }
                } else {
                    for (pos, ((azrow, &off), &lpv)) in data.az[..ft.risk_len * adm]
                        .chunks_exact(adm)
                        .zip(&data.off[..ft.risk_len])
                        .zip(lp.iter())
                        .enumerate()
                    {
                        let om = (lpv - max).exp();
                        s0 += om;
                        let off = off as usize;
                        for (v, a) in vbuf.iter_mut().zip(azrow) {
                            *v = om * a;
                        }
                        let sab = &mut sa_b[off * adm..(off + 1) * adm];
                        for (s, v) in sab.iter_mut().zip(&vbuf) {
                            *s += v;
                        }
                        // Upper triangle of the a a' block.
                        let saab = &mut saa_b[off * adm * adm..(off + 1) * adm * adm];
                        for i in 0..adm {
                            let vi = vbuf[i];
                            if vi == 0.0 {
                                continue;
                            }
                            let row = &mut saab[i * adm..(i + 1) * adm];
                            for j in i..adm {
                                row[j] += vi * azrow[j];
                            }
                        }
                        if q > 0 {
                            let wrow = &data.w[pos * q..(pos + 1) * q];
                            for (s, &wv) in sw.iter_mut().zip(wrow) {
                                *s += om * wv;
                            }
                            let sawb = &mut saw_b[off * adm * q..(off + 1) * adm * q];
                            for i in 0..adm {
                                let vi = vbuf[i];
                                for (s, &wv) in sawb[i * q..(i + 1) * q].iter_mut().zip(wrow) {
                                    *s += vi * wv;
                                }
                            }
                            for c1 in 0..q {
                                let vw = om * wrow[c1];
                                for c2 in c1..q {
                                    sww[c1 * q + c2] += vw * wrow[c2];
                                }
                            }
                        }
                    }
                }
                if !s0.is_finite() || s0 <= 0.0 {
                    return Err(Error::NonFiniteRiskSum {
                        stratum: self.ds.stratum_labels()[g].clone(),
                        time: ft.time,
                    });
                }

                // Scatter the buckets into dense pk-sized moments.
                sa.iter_mut().for_each(|v| *v = 0.0);
                saa.iter_mut().for_each(|v| *v = 0.0);
                saw.iter_mut().for_each(|v| *v = 0.0);
                for o in 0..n_off {
                    for l in 0..lay.p {
                        for a in 0..dm1 {
                            sa[l * lay.k_mod + o + a] += sa_b[o * adm + l * dm1 + a];
                        }
                    }
                    for i in 0..adm {
                        let gi = (i / dm1) * lay.k_mod + o + (i % dm1);
                        for j in i..adm {
                            let gj = (j / dm1) * lay.k_mod + o + (j % dm1);
                            let v = saa_b[o * adm * adm + i * adm + j];
                            saa[gi * pk + gj] += v;
                            if gi != gj {
                                saa[gj * pk + gi] += v;
                            }
                        }
                    }
                    for i in 0..adm {
                        let gi = (i / dm1) * lay.k_mod + o + (i % dm1);
                        for cq in 0..q {
                            saw[gi * q + cq] += saw_b[o * adm * q + i * q + cq];
                        }
                    }
                }
                for c1 in 0..q {
                    for c2 in 0..c1 {
                        sww[c1 * q + c2] = sww[c2 * q + c1];
                    }
                }

                let m_b = ft.event_positions.len() as f64;
                let inv_s0 = 1.0 / s0;
                let log_denom = max + s0.ln();

                // Value and the event-subject sides of the gradient.
                for &pos in &ft.event_positions {
                    value += lp[pos] - log_denom;
                    let off = data.off[pos] as usize;
                    let azrow = &data.az[pos * adm..(pos + 1) * adm];
                    for l in 0..lay.p {
                        let base = (l * lay.k_mod + off) * k_time + te.offset;
                        for a in 0..dm1 {
                            let av = azrow[l * dm1 + a];
                            let gbase = base + a * k_time;
                            for (kt, &bt) in te.vals.iter().enumerate() {
                                grad[gbase + kt] += av * bt;
                            }
                        }
                    }
                    let wrow = &data.w[pos * q..(pos + 1) * q];
                    for (cq, &wv) in wrow.iter().enumerate() {
                        grad[gamma_len + cq] += wv;
                    }
                }

                // Risk-set mean subtracted m_b times.
                for ak in 0..pk {
                    let abar = sa[ak] * inv_s0;
                    if abar == 0.0 {
                        continue;
                    }
                    let gbase = ak * k_time + te.offset;
                    for (kt, &bt) in te.vals.iter().enumerate() {
                        grad[gbase + kt] -= m_b * abar * bt;
                    }
                }
                for cq in 0..q {
                    grad[gamma_len + cq] -= m_b * sw[cq] * inv_s0;
                }

                // Hessian: V = U2 - U1 U1', expanded blockwise.
                for a1 in 0..pk {
                    let abar1 = sa[a1] * inv_s0;
                    for a2 in 0..pk {
                        gmat[a1 * pk + a2] = saa[a1 * pk + a2] * inv_s0 - abar1 * sa[a2] * inv_s0;
                    }
                }
                let hs = hess.as_mut_slice(); // column-major, dim x dim
                for a1 in 0..pk {
                    let r0 = a1 * k_time + te.offset;
                    for a2 in 0..pk {
                        let gv = m_b * gmat[a1 * pk + a2];
                        if gv == 0.0 {
                            continue;
                        }
                        let c0 = a2 * k_time + te.offset;
                        for (k2, &bt2) in te.vals.iter().enumerate() {
                            let colbase = (c0 + k2) * dim;
                            let gb2 = gv * bt2;
                            for (k1, &bt1) in te.vals.iter().enumerate() {
                                hs[colbase + r0 + k1] -= gb2 * bt1;
                            }
                        }
                    }
                }
                for a1 in 0..pk {
                    let abar1 = sa[a1] * inv_s0;
                    let r0 = a1 * k_time + te.offset;
                    for cq in 0..q {
                        let cv = m_b * (saw[a1 * q + cq] * inv_s0 - abar1 * sw[cq] * inv_s0);
                        if cv == 0.0 {
                            continue;
                        }
                        let col = (gamma_len + cq) * dim;
                        for (k1, &bt1) in te.vals.iter().enumerate() {
                            hs[col + r0 + k1] -= cv * bt1;
                            hs[(r0 + k1) * dim + gamma_len + cq] -= cv * bt1;
                        }
                    }
                }
                for c1 in 0..q {
                    let wbar1 = sw[c1] * inv_s0;
                    for c2 in 0..q {
                        let vv = m_b * (sww[c1 * q + c2] * inv_s0 - wbar1 * sw[c2] * inv_s0);
                        hs[(gamma_len + c2) * dim + gamma_len + c1] -= vv;
                    }
                }
            }
        }

        Ok(LikelihoodDerivatives {
            value,
            gradient: grad,
            hessian: hess,
        })
    }

    /// Runs `visit` for every distinct failure time of `cause` in stratum
    /// `g`, passing the failure-time entry and the linear predictors over
    /// its risk-set prefix (in descending-time subject order).
    pub(crate) fn for_each_failure_time(
        &self,
        cause: usize,
        g: usize,
        coeffs: &Coefficients,
        mut visit: impl FnMut(&crate::data::FailureTime, &[f64]),
    ) -> Result<()> {
        self.check_cause(cause)?;
        let lay = &self.basis.layout;
        let wtheta = self.stratum_wtheta(g, &coeffs.theta);
        let mut c = vec![0.0; lay.p * lay.k_mod];
        let mut lp = Vec::new();
        let stratum = &self.index.strata[g];
        let fts = &stratum.by_cause[cause - 1];
        let evals = &self.time_evals[g][cause - 1];
        for (ft, te) in fts.iter().zip(evals) {
            self.reduce_gamma(&coeffs.gamma, te, &mut c);
            self.fill_lp(g, ft.risk_len, &c, &wtheta, &mut lp);
            visit(ft, &lp);
        }
        Ok(())
    }

    /// Per-record cumulative model hazard against an arbitrary baseline:
    /// `exp(w_i' theta) * sum_{steps time <= X_i} exp(tensor lp_i(time)) *
    /// increment`. The baseline's step times need not coincide with this
    /// dataset's failure times.
    pub(crate) fn accumulate_model_hazard(
        &self,
        coeffs: &Coefficients,
        baseline: &crate::baseline::BaselineHazard,
    ) -> Result<Vec<f64>> {
        let lay = &self.basis.layout;
        let dt1 = self.basis.time.degree() + 1;
        let dm1 = self.basis.modifier.degree() + 1;
        let adm = lay.p * dm1;
        let mut tvals = vec![0.0; dt1];
        let mut c = vec![0.0; lay.p * lay.k_mod];
        let mut acc = vec![0.0; self.ds.len()];
        for (g, stratum) in self.index.strata.iter().enumerate() {
            let data = &self.strata[g];
            for step in &baseline.strata[g] {
                let offset = self.basis.time.eval_nonzero_into(step.time, &mut tvals);
                let te = TimeEval {
                    offset,
                    vals: tvals.clone(),
                };
                self.reduce_gamma(&coeffs.gamma, &te, &mut c);
                for (pos, &rec) in stratum.subjects_desc.iter().enumerate() {
                    if self.ds.records()[rec].time < step.time {
                        break;
                    }
                    let azrow = &data.az[pos * adm..(pos + 1) * adm];
                    let off = data.off[pos] as usize;
                    let mut v = 0.0;
                    for l in 0..lay.p {
                        let crow = &c[l * lay.k_mod + off..l * lay.k_mod + off + dm1];
                        let arow = &azrow[l * dm1..(l + 1) * dm1];
                        for (a, cv) in arow.iter().zip(crow) {
                            v += a * cv;
                        }
                    }
                    acc[rec] += v.exp() * step.increment;
                }
            }
        }
        for (i, rec) in self.ds.records().iter().enumerate() {
            let wtheta: f64 = rec.w.iter().zip(&coeffs.theta).map(|(a, b)| a * b).sum();
            acc[i] *= wtheta.exp();
        }
        Ok(acc)
    }

    /// Full linear predictor of record `i` at its own observed time.
    pub(crate) fn full_linear_predictor(&self, i: usize, coeffs: &Coefficients) -> f64 {
        let rec = &self.ds.records()[i];
        linear_predictor(self.basis, rec, rec.time, coeffs)
            .expect("context dimensions are validated at construction")
    }
}

/// Linear predictor of one record at event time `t`:
/// `L(t)' gamma + w' theta`.
pub fn linear_predictor(
    basis: &ModelBasis,
    record: &SubjectRecord,
    t: f64,
    coeffs: &Coefficients,
) -> Result<f64> {
    let bt = basis.time.eval(t);
    let bm = basis.modifier.eval(record.modifier);
    let row = tensor_row(&basis.layout, &record.z, &bm, &bt)?;
    let tensor: f64 = row.iter().zip(&coeffs.gamma).map(|(a, b)| a * b).sum();
    let invariant: f64 = record.w.iter().zip(&coeffs.theta).map(|(a, b)| a * b).sum();
    Ok(tensor + invariant)
}

/// Convenience wrapper building a context for a single evaluation.
pub fn log_partial_likelihood(
    ds: &Dataset,
    index: &RiskIndex,
    basis: &ModelBasis,
    coeffs: &Coefficients,
    cause: usize,
) -> Result<f64> {
    EvalContext::new(ds, index, basis)?.value(cause, coeffs)
}

/// Convenience wrapper building a context for a single evaluation.
pub fn derivatives(
    ds: &Dataset,
    index: &RiskIndex,
    basis: &ModelBasis,
    coeffs: &Coefficients,
    cause: usize,
) -> Result<LikelihoodDerivatives> {
    EvalContext::new(ds, index, basis)?.derivatives(cause, coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSpec;
    use crate::data::build_risk_index;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn scalar_basis() -> ModelBasis {
        ModelBasis::new(
            BasisSpec::new(0, (0.0, 10.0), vec![]).unwrap(),
            BasisSpec::new(0, (0.0, 10.0), vec![]).unwrap(),
            1,
        )
    }

    fn toy_dataset(rows: Vec<(f64, usize, f64)>) -> Dataset {
        // (time, cause, z), single stratum, no w.
        Dataset::from_labeled_records(
            rows.into_iter()
                .map(|(t, c, z)| ("1".to_string(), t, c, 1.0, vec![z], vec![]))
                .collect(),
            vec!["z".into()],
            vec![],
        )
        .unwrap()
    }

    fn random_dataset(seed: u64, n: usize, p: usize, q: usize, strata: usize) -> Dataset {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let rows = (0..n)
            .map(|_| {
                let stratum = format!("s{}", rng.gen_range(0..strata));
                let time: f64 = rng.gen_range(0.1..10.0);
                let cause = if rng.gen_bool(0.7) { 1 } else { 0 };
                let modifier = rng.gen_range(0.0..10.0);
                let z = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let w = (0..q).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (stratum, time, cause, modifier, z, w)
            })
            .collect();
        Dataset::from_labeled_records(
            rows,
            (0..p).map(|i| format!("z{i}")).collect(),
            (0..q).map(|i| format!("w{i}")).collect(),
        )
        .unwrap()
    }

    fn spline_basis(p: usize) -> ModelBasis {
        ModelBasis::new(
            BasisSpec::new(2, (0.0, 10.0), vec![3.0, 6.0]).unwrap(),
            BasisSpec::new(2, (0.0, 10.0), vec![5.0]).unwrap(),
            p,
        )
    }

    #[test]
    fn zero_coefficients_three_events() {
        let ds = toy_dataset(vec![(1.0, 1, 1.0), (2.0, 1, 0.5), (3.0, 1, -1.0)]);
        let index = build_risk_index(&ds);
        let basis = scalar_basis();
        let coeffs = Coefficients::zeros(&basis.layout, 0);
        let ll = log_partial_likelihood(&ds, &index, &basis, &coeffs, 1).unwrap();
        assert_abs_diff_eq!(ll, -(6.0_f64.ln()), epsilon = 1e-12);
    }

    #[test]
    fn no_events_gives_zero() {
        let ds = toy_dataset(vec![(1.0, 2, 1.0), (2.0, 0, 0.5)]);
        let index = build_risk_index(&ds);
        let basis = scalar_basis();
        let coeffs = Coefficients::zeros(&basis.layout, 0);
        let ll = log_partial_likelihood(&ds, &index, &basis, &coeffs, 1).unwrap();
        assert_eq!(ll, 0.0);
    }

    #[test]
    fn closed_form_two_subjects() {
        // z = (1, 0), times (1, 2), both events, gamma = [beta]:
        // l = (beta - log(e^beta + 1)) + 0.
        let ds = toy_dataset(vec![(1.0, 1, 1.0), (2.0, 1, 0.0)]);
        let index = build_risk_index(&ds);
        let basis = scalar_basis();
        for &beta in &[-1.5, 0.0, 0.7, 2.0] {
            let coeffs = Coefficients {
                gamma: vec![beta],
                theta: vec![],
            };
            let ll = log_partial_likelihood(&ds, &index, &basis, &coeffs, 1).unwrap();
            let expect = beta - (beta.exp() + 1.0).ln();
            assert_abs_diff_eq!(ll, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn hand_computed_gradient_and_hessian() {
        // Two subjects z = (1, 0), times (1, 2), both events, coefficients 0.
        // Gradient = (1 - 0.5) + (0 - 0) = 0.5; Hessian = -(0.25 + 0).
        let ds = toy_dataset(vec![(1.0, 1, 1.0), (2.0, 1, 0.0)]);
        let index = build_risk_index(&ds);
        let basis = scalar_basis();
        let coeffs = Coefficients::zeros(&basis.layout, 0);
        let d = derivatives(&ds, &index, &basis, &coeffs, 1).unwrap();
        assert_abs_diff_eq!(d.gradient[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(d.hessian[(0, 0)], -0.25, epsilon = 1e-12);
    }

    #[test]
    fn linear_predictor_matches_surface_route() {
        let ds = random_dataset(3, 12, 2, 2, 1);
        let basis = spline_basis(2);
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let coeffs = Coefficients {
            gamma: (0..basis.layout.total()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            theta: (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let block = basis.layout.block();
        for rec in ds.records().iter().take(5) {
            for &t in &[0.5, 4.2, 9.9] {
                let lp = linear_predictor(&basis, rec, t, &coeffs).unwrap();
                // Oracle route: sum_l z_l * surface_l(t, x) + w'theta.
                let mut oracle = 0.0;
                for (l, &zl) in rec.z.iter().enumerate() {
                    oracle += zl
                        * crate::basis::eval_surface(
                            &basis.time,
                            &basis.modifier,
                            &coeffs.gamma[l * block..(l + 1) * block],
                            t,
                            rec.modifier,
                        )
                        .unwrap();
                }
                oracle += rec
                    .w
                    .iter()
                    .zip(&coeffs.theta)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
                assert_abs_diff_eq!(lp, oracle, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ds = random_dataset(5, 40, 1, 1, 2);
        let basis = spline_basis(1);
        let index = build_risk_index(&ds);
        let ctx = EvalContext::new(&ds, &index, &basis).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let coeffs = Coefficients {
            gamma: (0..basis.layout.total()).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            theta: vec![rng.gen_range(-0.5..0.5)],
        };
        let d = ctx.derivatives(1, &coeffs).unwrap();
        let dim = coeffs.dim();
        let h = 1e-5;
        for i in 0..dim {
            let mut up = coeffs.clone();
            let mut dn = coeffs.clone();
            if i < coeffs.gamma.len() {
                up.gamma[i] += h;
                dn.gamma[i] -= h;
            } else {
                up.theta[i - coeffs.gamma.len()] += h;
                dn.theta[i - coeffs.gamma.len()] -= h;
            }
            let fd = (ctx.value(1, &up).unwrap() - ctx.value(1, &dn).unwrap()) / (2.0 * h);
            let denom = fd.abs().max(1e-3);
            assert!(
                (d.gradient[i] - fd).abs() / denom < 1e-6,
                "component {i}: grad {} vs fd {}",
                d.gradient[i],
                fd
            );
        }
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let ds = random_dataset(9, 35, 1, 1, 1);
        let basis = spline_basis(1);
        let index = build_risk_index(&ds);
        let ctx = EvalContext::new(&ds, &index, &basis).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let coeffs = Coefficients {
            gamma: (0..basis.layout.total()).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            theta: vec![rng.gen_range(-0.5..0.5)],
        };
        let d = ctx.derivatives(1, &coeffs).unwrap();
        let dim = coeffs.dim();
        let h = 1e-5;
        let perturb = |base: &Coefficients, i: usize, delta: f64| {
            let mut c = base.clone();
            if i < c.gamma.len() {
                c.gamma[i] += delta;
            } else {
                c.theta[i - c.gamma.len()] += delta;
            }
            c
        };
        for i in 0..dim {
            let gp = ctx.derivatives(1, &perturb(&coeffs, i, h)).unwrap().gradient;
            let gm = ctx.derivatives(1, &perturb(&coeffs, i, -h)).unwrap().gradient;
            for j in 0..dim {
                let fd = (gp[j] - gm[j]) / (2.0 * h);
                let denom = fd.abs().max(1e-2);
                assert!(
                    (d.hessian[(j, i)] - fd).abs() / denom < 1e-5,
                    "entry ({j},{i}): hess {} vs fd {}",
                    d.hessian[(j, i)],
                    fd
                );
            }
        }
    }

    #[test]
    fn hessian_symmetric_and_concave() {
        let ds = random_dataset(13, 60, 2, 1, 2);
        let basis = spline_basis(2);
        let index = build_risk_index(&ds);
        let ctx = EvalContext::new(&ds, &index, &basis).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..3 {
            let coeffs = Coefficients {
                gamma: (0..basis.layout.total()).map(|_| rng.gen_range(-0.4..0.4)).collect(),
                theta: vec![rng.gen_range(-0.4..0.4)],
            };
            let d = ctx.derivatives(1, &coeffs).unwrap();
            let dim = d.hessian.nrows();
            for i in 0..dim {
                for j in 0..dim {
                    assert_abs_diff_eq!(d.hessian[(i, j)], d.hessian[(j, i)], epsilon = 1e-12);
                }
            }
            let eig = nalgebra::SymmetricEigen::new(d.hessian.clone());
            assert!(
                eig.eigenvalues.iter().all(|&e| e <= 1e-8),
                "positive eigenvalue found"
            );
        }
    }

    #[test]
    fn stratum_additivity() {
        let ds_a = random_dataset(31, 25, 1, 1, 1);
        let mut rows: Vec<_> = ds_a
            .records()
            .iter()
            .map(|r| {
                (
                    "A".to_string(),
                    r.time,
                    r.cause,
                    r.modifier,
                    r.z.clone(),
                    r.w.clone(),
                )
            })
            .collect();
        let ds_b = random_dataset(37, 30, 1, 1, 1);
        rows.extend(ds_b.records().iter().map(|r| {
            (
                "B".to_string(),
                r.time,
                r.cause,
                r.modifier,
                r.z.clone(),
                r.w.clone(),
            )
        }));
        let merged =
            Dataset::from_labeled_records(rows, vec!["z0".into()], vec!["w0".into()]).unwrap();
        let basis = spline_basis(1);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let coeffs = Coefficients {
            gamma: (0..basis.layout.total()).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            theta: vec![0.3],
        };
        let ll = |ds: &Dataset| {
            let idx = build_risk_index(ds);
            log_partial_likelihood(ds, &idx, &basis, &coeffs, 1).unwrap()
        };
        assert_abs_diff_eq!(ll(&merged), ll(&ds_a) + ll(&ds_b), epsilon = 1e-10);
    }

    #[test]
    fn centering_w_covariate_shifts_nothing() {
        let ds = random_dataset(41, 50, 1, 1, 2);
        let mean_w = ds.records().iter().map(|r| r.w[0]).sum::<f64>() / ds.len() as f64;
        let centered = Dataset::from_labeled_records(
            ds.records()
                .iter()
                .map(|r| {
                    (
                        ds.stratum_labels()[r.stratum].clone(),
                        r.time,
                        r.cause,
                        r.modifier,
                        r.z.clone(),
                        vec![r.w[0] - mean_w],
                    )
                })
                .collect(),
            vec!["z0".into()],
            vec!["w0".into()],
        )
        .unwrap();
        let basis = spline_basis(1);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let c1 = Coefficients {
            gamma: (0..basis.layout.total()).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            theta: vec![0.8],
        };
        let c2 = Coefficients {
            gamma: (0..basis.layout.total()).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            theta: vec![-0.4],
        };
        let ll = |ds: &Dataset, c: &Coefficients| {
            let idx = build_risk_index(ds);
            log_partial_likelihood(ds, &idx, &basis, c, 1).unwrap()
        };
        let diff_orig = ll(&ds, &c1) - ll(&ds, &c2);
        let diff_centered = ll(&centered, &c1) - ll(&centered, &c2);
        assert_abs_diff_eq!(diff_orig, diff_centered, epsilon = 1e-10);
    }

    #[test]
    fn mixed_value_reduces_to_plain_value() {
        let ds = random_dataset(55, 30, 1, 1, 2);
        let basis = spline_basis(1);
        let index = build_risk_index(&ds);
        let ctx = EvalContext::new(&ds, &index, &basis).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let coeffs = Coefficients {
            gamma: (0..basis.layout.total()).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            theta: vec![0.2],
        };
        let assignment = vec![0usize; ds.len()];
        let v1 = ctx.value(1, &coeffs).unwrap();
        let v2 = ctx
            .value_mixed(1, std::slice::from_ref(&coeffs), &assignment)
            .unwrap();
        assert_abs_diff_eq!(v1, v2, epsilon = 1e-12);
    }
}
