//! Browser demo bindings: B-spline basis exploration, a simulate-and-fit
//! round trip on the damped-sine scenario, and tail probabilities of
//! weighted chi-squared mixtures. Each export returns a JSON payload for
//! the demo page to draw.

use coxsurf_core::sim::SliceAxis;
use coxsurf_core::*;
use wasm_bindgen::prelude::*;

fn err_json(msg: impl std::fmt::Display) -> String {
    serde_json::json!({ "error": msg.to_string() }).to_string()
}

/// Evaluates every basis function of a B-spline basis with evenly spaced
/// interior knots on [0, 1].
#[wasm_bindgen]
pub fn basis_curves(degree: usize, interior: usize, points: usize) -> String {
    let knots: Vec<f64> = (1..=interior)
        .map(|j| j as f64 / (interior + 1) as f64)
        .collect();
    let spec = match BasisSpec::new(degree, (0.0, 1.0), knots) {
        Ok(s) => s,
        Err(e) => return err_json(e),
    };
    let points = points.clamp(2, 1000);
    let grid: Vec<f64> = (0..points)
        .map(|i| i as f64 / (points - 1) as f64)
        .collect();
    let curves: Vec<Vec<f64>> = grid.iter().map(|&x| spec.eval(x)).collect();
    serde_json::json!({
        "k": spec.len(),
        "degree": degree,
        "interior": spec.interior_knots(),
        "grid": grid,
        // curves[point][basis index]
        "curves": curves,
    })
    .to_string()
}

/// Generates one damped-sine dataset, fits the bivariate varying-coefficient
/// model (penalized when mu_time or mu_mod is positive), and returns the
/// true and fitted surfaces, slice curves with confidence bands, Wald test
/// p-values, and fit diagnostics.
#[wasm_bindgen]
pub fn simulate_fit(n: usize, seed: u64, mu_time: f64, mu_mod: f64, k_side: usize) -> String {
    match simulate_fit_impl(n, seed, mu_time, mu_mod, k_side) {
        Ok(s) => s,
        Err(e) => err_json(e),
    }
}

fn simulate_fit_impl(
    n: usize,
    seed: u64,
    mu_time: f64,
    mu_mod: f64,
    k_side: usize,
) -> Result<String> {
    let n = n.clamp(200, 4000);
    let k_side = k_side.clamp(4, 10);
    let scenario = ScenarioConfig::damped_sine(n, seed);
    let ds = generate_dataset(&scenario, seed)?;
    let settings = BasisSettings {
        degree_time: 3,
        degree_mod: 3,
        interior_time: k_side - 4,
        interior_mod: k_side - 4,
    };
    let basis = settings.build(&ds)?;
    let index = build_risk_index(&ds);
    let penalty = if mu_time > 0.0 || mu_mod > 0.0 {
        Some(PenaltyConfig::uniform(1, mu_time, mu_mod))
    } else {
        None
    };
    let solver = SolverConfig {
        lambda0: 1e6,
        ..SolverConfig::default()
    };
    let fit = fit(&ds, &index, &basis, 1, penalty.as_ref(), &solver)?;
    let var = variance_estimates(&fit)?;

    // Surfaces on a coarse grid for the heat map.
    let side = 40usize;
    let t_grid: Vec<f64> = (0..side)
        .map(|i| scenario.horizon * i as f64 / (side - 1) as f64)
        .collect();
    let x_grid: Vec<f64> = (0..side)
        .map(|i| 50.0 * i as f64 / (side - 1) as f64)
        .collect();
    let block = basis.layout.block();
    let mut truth = Vec::with_capacity(side * side);
    let mut estimate = Vec::with_capacity(side * side);
    for &x in &x_grid {
        for &t in &t_grid {
            truth.push(scenario.surface.eval(t, x));
            estimate.push(eval_surface(
                &basis.time,
                &basis.modifier,
                &fit.coefficients.gamma[..block],
                t,
                x,
            )?);
        }
    }

    // Slice curves with pointwise 95% bands at three modifier values.
    let slice_grid: Vec<f64> = (0..80)
        .map(|i| scenario.horizon * i as f64 / 79.0)
        .collect();
    let mut slices = Vec::new();
    for &xm in &[2.0, 10.0, 25.0] {
        let pts = pointwise_ci(
            &fit,
            &var,
            &basis,
            0,
            &slice_grid,
            &[xm],
            0.95,
            VarianceKind::Sandwich,
        )?;
        let axis = SliceAxis::EventTime { modifier: xm };
        slices.push(serde_json::json!({
            "axis": axis,
            "grid": slice_grid,
            "truth": slice_grid
                .iter()
                .map(|&t| scenario.surface.eval(t, xm))
                .collect::<Vec<f64>>(),
            "estimate": pts.iter().map(|p| p.estimate).collect::<Vec<f64>>(),
            "lo": pts.iter().map(|p| p.lo).collect::<Vec<f64>>(),
            "hi": pts.iter().map(|p| p.hi).collect::<Vec<f64>>(),
        }));
    }

    // Wald tests of effect variation.
    let construction = if penalty.is_some() {
        TestConstruction::SandwichChisq
    } else {
        TestConstruction::UnpenalizedChisq
    };
    let mut tests = Vec::new();
    for kind in [
        ContrastKind::EventTime,
        ContrastKind::Modifier,
        ContrastKind::Joint,
    ] {
        let t = wald_test(&fit, &var, kind, construction, 0)?;
        tests.push(serde_json::json!({
            "kind": t.kind,
            "statistic": t.statistic,
            "p_value": t.p_value,
        }));
    }

    Ok(serde_json::json!({
        "n": n,
        "events": fit.events,
        "k": basis.layout.k_time,
        "k_mod": basis.layout.k_mod,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "log_likelihood": fit.log_likelihood,
        "penalized": penalty.is_some(),
        "t_grid": t_grid,
        "x_grid": x_grid,
        "truth": truth,
        "estimate": estimate,
        "slices": slices,
        "tests": tests,
    })
    .to_string())
}

/// Upper-tail curve of a weighted chi-squared mixture over a range of
/// thresholds, next to the chi-squared tail with the same number of terms.
#[wasm_bindgen]
pub fn mixture_tail_curve(lambdas_csv: &str, q_max: f64, points: usize) -> String {
    let lambdas: Vec<f64> = match lambdas_csv
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect()
    {
        Ok(v) => v,
        Err(e) => return err_json(format!("eigenvalues: {e}")),
    };
    let points = points.clamp(2, 400);
    let mut qs = Vec::with_capacity(points);
    let mut tail = Vec::with_capacity(points);
    for i in 0..points {
        let q = q_max * i as f64 / (points - 1) as f64;
        match quadform_tail(&lambdas, q) {
            Ok((p, _)) => {
                qs.push(q);
                tail.push(p);
            }
            Err(e) => return err_json(e),
        }
    }
    let df = lambdas.len();
    let chisq: Vec<f64> = qs
        .iter()
        .map(|&q| coxsurf_core::numeric::chi_squared_sf(q, df))
        .collect();
    serde_json::json!({
        "lambdas": lambdas,
        "q": qs,
        "tail": tail,
        "chisq_tail": chisq,
        "df": df,
    })
    .to_string()
}
