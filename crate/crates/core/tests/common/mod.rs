//! Test-only reference implementations, independent of the library's
//! evaluation paths: a textbook stratified Cox fit (Newton-Raphson on the
//! Breslow partial likelihood written as explicit double loops), its
//! baseline hazard, and classical deviance residuals.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

pub struct ReferenceData {
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    /// Covariate rows, one per subject.
    pub x: Vec<Vec<f64>>,
    pub strata: Vec<usize>,
}

pub struct ReferenceFit {
    pub beta: Vec<f64>,
    pub log_likelihood: f64,
    /// Inverse observed information.
    pub variance: DMatrix<f64>,
    pub iterations: usize,
}

fn distinct_event_times(data: &ReferenceData, stratum: usize) -> Vec<f64> {
    let mut times: Vec<f64> = data
        .times
        .iter()
        .zip(&data.events)
        .zip(&data.strata)
        .filter(|((_, &e), &g)| e && g == stratum)
        .map(|((&t, _), _)| t)
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup();
    times
}

fn n_strata(data: &ReferenceData) -> usize {
    data.strata.iter().max().map(|&g| g + 1).unwrap_or(0)
}

/// Score, observed information, and log-likelihood at beta.
fn score_info(data: &ReferenceData, beta: &[f64]) -> (DVector<f64>, DMatrix<f64>, f64) {
    let p = beta.len();
    let n = data.times.len();
    let mut score = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    let mut ll = 0.0;
    for g in 0..n_strata(data) {
        for tau in distinct_event_times(data, g) {
            let mut s0 = 0.0;
            let mut s1 = DVector::zeros(p);
            let mut s2 = DMatrix::zeros(p, p);
            for r in 0..n {
                if data.strata[r] != g || data.times[r] < tau {
                    continue;
                }
                let xr = DVector::from_column_slice(&data.x[r]);
                let e = beta
                    .iter()
                    .zip(&data.x[r])
                    .map(|(b, x)| b * x)
                    .sum::<f64>()
                    .exp();
                s0 += e;
                s1 += &xr * e;
                s2 += &xr * xr.transpose() * e;
            }
            let mut m = 0.0;
            for i in 0..n {
                if data.strata[i] == g && data.events[i] && data.times[i] == tau {
                    m += 1.0;
                    let lp: f64 = beta.iter().zip(&data.x[i]).map(|(b, x)| b * x).sum();
                    ll += lp;
                    score += DVector::from_column_slice(&data.x[i]);
                }
            }
            ll -= m * s0.ln();
            let mean = &s1 / s0;
            score -= &mean * m;
            info += (&s2 / s0 - &mean * mean.transpose()) * m;
        }
    }
    (score, info, ll)
}

/// Newton-Raphson fit from zero, iterating until the score vanishes.
pub fn fit_reference_cox(data: &ReferenceData) -> ReferenceFit {
    let p = data.x[0].len();
    let mut beta = vec![0.0; p];
    let mut iterations = 0;
    for _ in 0..100 {
        iterations += 1;
        let (score, info, _) = score_info(data, &beta);
        let step = info
            .clone()
            .cholesky()
            .expect("reference information is positive definite")
            .solve(&score);
        for (b, s) in beta.iter_mut().zip(step.iter()) {
            *b += s;
        }
        if score.amax() < 1e-10 {
            break;
        }
    }
    let (_, info, ll) = score_info(data, &beta);
    let variance = info
        .cholesky()
        .expect("reference information is positive definite")
        .inverse();
    ReferenceFit {
        beta,
        log_likelihood: ll,
        variance,
        iterations,
    }
}

/// Breslow baseline increments per stratum: (time, increment) ascending.
pub fn reference_breslow(data: &ReferenceData, beta: &[f64]) -> Vec<Vec<(f64, f64)>> {
    let n = data.times.len();
    (0..n_strata(data))
        .map(|g| {
            distinct_event_times(data, g)
                .into_iter()
                .map(|tau| {
                    let mut s0 = 0.0;
                    let mut m = 0.0;
                    for r in 0..n {
                        if data.strata[r] != g {
                            continue;
                        }
                        if data.times[r] >= tau {
                            s0 += beta
                                .iter()
                                .zip(&data.x[r])
                                .map(|(b, x)| b * x)
                                .sum::<f64>()
                                .exp();
                        }
                        if data.events[r] && data.times[r] == tau {
                            m += 1.0;
                        }
                    }
                    (tau, m / s0)
                })
                .collect()
        })
        .collect()
}

/// Classical Cox deviance residuals:
/// `d = sign(M) sqrt(-2 [M + delta ln(delta - M)])` with
/// `M = delta - exp(x' beta) Lambda0(X)`.
pub fn reference_deviance(
    data: &ReferenceData,
    beta: &[f64],
    baseline: &[Vec<(f64, f64)>],
) -> Vec<f64> {
    data.times
        .iter()
        .zip(&data.events)
        .zip(&data.strata)
        .zip(&data.x)
        .map(|(((&t, &ev), &g), x)| {
            let cum: f64 = baseline[g]
                .iter()
                .take_while(|(tau, _)| *tau <= t)
                .map(|(_, inc)| inc)
                .sum();
            let lp: f64 = beta.iter().zip(x).map(|(b, v)| b * v).sum();
            let m = if ev { 1.0 } else { 0.0 } - lp.exp() * cum;
            let delta = if ev { 1.0 } else { 0.0 };
            let mut rad = -2.0 * m;
            if ev {
                rad -= 2.0 * (delta - m).ln();
            }
            if m == 0.0 {
                0.0
            } else {
                m.signum() * rad.max(0.0).sqrt()
            }
        })
        .collect()
}
