//! Synthetic-data generation matching the simulation designs, plus the
//! Monte Carlo experiment harness (estimation accuracy, coverage, rejection
//! rates, and cross-validation comparisons).
//!
//! Event times invert the cumulative hazard by root finding: the subject's
//! cumulative hazard is integrated by adaptive Simpson over a segment table
//! and bisected within the bracketing segment, keeping the generator
//! agnostic to the functional form of the true surface. Randomness is a
//! counter-based generator (ChaCha12) with one stream per subject, so
//! generation is reproducible under any parallel schedule.

use crate::basis::BasisSpec;
use crate::cv::{partition_folds, tune_all, CvMethod};
use crate::data::{build_risk_index, Dataset};
use crate::error::{Error, Result};
use crate::inference::{
    pointwise_ci, variance_estimates, wald_test, ContrastKind, TestConstruction, VarianceKind,
};
use crate::likelihood::{Coefficients, EvalContext, ModelBasis};
use crate::numeric::{adaptive_simpson, quantile_type7};
use crate::penalty::PenaltyConfig;
use crate::solver::{fit_with_context, SolverConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// True bivariate effect surface beta_1(t, x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TrueSurface {
    Constant { value: f64 },
    /// sin(time_frequency * t) * exp(-modifier_decay * x).
    DampedSine {
        time_frequency: f64,
        modifier_decay: f64,
    },
}

impl TrueSurface {
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        match self {
            TrueSurface::Constant { value } => *value,
            TrueSurface::DampedSine {
                time_frequency,
                modifier_decay,
            } => (time_frequency * t).sin() * (-modifier_decay * x).exp(),
        }
    }

    /// Oscillation count over a horizon, used to size quadrature segments.
    fn cycles(&self, horizon: f64) -> f64 {
        match self {
            TrueSurface::Constant { .. } => 0.0,
            TrueSurface::DampedSine { time_frequency, .. } => {
                time_frequency * horizon / std::f64::consts::TAU
            }
        }
    }
}

/// One simulation scenario: single cause, single stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n: usize,
    /// Correlation of the bivariate standard normal (z, w).
    pub correlation: f64,
    pub surface: TrueSurface,
    /// Invariant coefficient beta_2 on w.
    pub beta_invariant: f64,
    pub modifier_range: (f64, f64),
    pub censoring_range: (f64, f64),
    /// Constant baseline hazard per day.
    pub baseline_hazard: f64,
    pub horizon: f64,
    pub seed: u64,
}

impl ScenarioConfig {
    /// The simulation design used throughout: bivariate normal covariates
    /// with rho = 0.6, beta_1(t,x) = sin(3 pi t / 4) exp(-x/2), beta_2 = 1,
    /// modifier U(0,50), censoring U(0,30), horizon 30.
    pub fn damped_sine(n: usize, seed: u64) -> Self {
        Self {
            n,
            correlation: 0.6,
            surface: TrueSurface::DampedSine {
                time_frequency: 3.0 * std::f64::consts::PI / 4.0,
                modifier_decay: 0.5,
            },
            beta_invariant: 1.0,
            modifier_range: (0.0, 50.0),
            censoring_range: (0.0, 30.0),
            baseline_hazard: 0.1,
            horizon: 30.0,
            seed,
        }
    }

    /// Null scenario: constant effect, for type-I-error experiments.
    pub fn constant_effect(n: usize, seed: u64) -> Self {
        Self {
            surface: TrueSurface::Constant { value: 1.0 },
            ..Self::damped_sine(n, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.n > 0
            && self.correlation > -1.0
            && self.correlation < 1.0
            && self.baseline_hazard > 0.0
            && self.horizon > 0.0
            && self.modifier_range.0 < self.modifier_range.1
            && self.censoring_range.0 < self.censoring_range.1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("scenario out of range: {self:?}")))
        }
    }
}

/// One generated subject with its latent quantities, for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSubject {
    pub z: f64,
    pub w: f64,
    pub modifier: f64,
    /// Target cumulative hazard -log(1 - u).
    pub target: f64,
    /// Latent event time; None when the cumulative hazard at the horizon
    /// stays below the target.
    pub event_time: Option<f64>,
    pub censoring: f64,
    pub observed: f64,
    pub cause: usize,
}

struct HazardIntegrand<'a> {
    cfg: &'a ScenarioConfig,
    z: f64,
    modifier: f64,
    scale: f64,
}

impl<'a> HazardIntegrand<'a> {
    fn new(cfg: &'a ScenarioConfig, z: f64, w: f64, modifier: f64) -> Self {
        let scale = cfg.baseline_hazard * (w * cfg.beta_invariant).exp();
        Self {
            cfg,
            z,
            modifier,
            scale,
        }
    }

    fn eval(&self, t: f64) -> f64 {
        self.scale * (self.z * self.cfg.surface.eval(t, self.modifier)).exp()
    }
}

/// Solves Lambda(T) = target for one subject. Returns None when the horizon
/// cumulative hazard stays below the target.
fn invert_cumulative_hazard(
    cfg: &ScenarioConfig,
    hazard: &HazardIntegrand,
    target: f64,
    subject: usize,
) -> Result<Option<f64>> {
    const QUAD_TOL: f64 = 1e-12;
    const TIME_TOL: f64 = 1e-10;
    let horizon = cfg.horizon;
    let segments = (16.0f64).max(8.0 * cfg.surface.cycles(horizon)).ceil() as usize;
    let f = |t: f64| hazard.eval(t);

    if target == 0.0 {
        return Ok(Some(0.0));
    }
    // Forward segment table of cumulative hazard values.
    let mut cum = 0.0;
    let mut seg_lo = 0.0;
    let mut bracket = None;
    for s in 0..segments {
        let hi = horizon * (s + 1) as f64 / segments as f64;
        let (val, _) = adaptive_simpson(&f, seg_lo, hi, QUAD_TOL / segments as f64, 40);
        if val < 0.0 || !val.is_finite() {
            return Err(Error::RootBracket {
                subject,
                detail: format!("non-finite hazard integral on [{seg_lo}, {hi}]"),
            });
        }
        if cum + val >= target {
            bracket = Some((seg_lo, hi, cum));
            break;
        }
        cum += val;
        seg_lo = hi;
    }
    let Some((mut lo, mut hi, cum_lo)) = bracket else {
        return Ok(None);
    };
    // Bisection inside the bracketing segment; the partial integral from
    // the segment start is re-evaluated at each midpoint.
    let seg_start = lo;
    for _ in 0..200 {
        if hi - lo < TIME_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let (partial, _) = adaptive_simpson(&f, seg_start, mid, QUAD_TOL, 40);
        if cum_lo + partial >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

/// Generates the latent and observed quantities for every subject. Subject
/// `i` draws from stream `i + 1` of a ChaCha12 generator seeded by `seed`,
/// in the fixed order (z, w, modifier, u, censoring).
pub fn simulate_subjects(cfg: &ScenarioConfig, seed: u64) -> Result<Vec<SimulatedSubject>> {
    cfg.validate()?;
    let rho = cfg.correlation;
    (0..cfg.n)
        .map(|i| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let n1: f64 = rng.sample(StandardNormal);
            let n2: f64 = rng.sample(StandardNormal);
            let z = n1;
            let w = rho * n1 + (1.0 - rho * rho).sqrt() * n2;
            let modifier = rng.gen_range(cfg.modifier_range.0..cfg.modifier_range.1);
            let u: f64 = rng.gen();
            let target = -(-u).ln_1p(); // -ln(1 - u)
            let censoring = rng.gen_range(cfg.censoring_range.0..cfg.censoring_range.1);
            let hazard = HazardIntegrand::new(cfg, z, w, modifier);
            let event_time = invert_cumulative_hazard(cfg, &hazard, target, i)?;
            let (observed, cause) = match event_time {
                Some(t) if t <= censoring && t <= cfg.horizon => (t, 1),
                _ => (censoring.min(cfg.horizon), 0),
            };
            Ok(SimulatedSubject {
                z,
                w,
                modifier,
                target,
                event_time,
                censoring,
                observed,
                cause,
            })
        })
        .collect()
}

/// Generates a single-stratum, single-cause dataset for the scenario.
pub fn generate_dataset(cfg: &ScenarioConfig, seed: u64) -> Result<Dataset> {
    let subjects = simulate_subjects(cfg, seed)?;
    Dataset::from_labeled_records(
        subjects
            .into_iter()
            .map(|s| {
                (
                    "1".to_string(),
                    s.observed,
                    s.cause,
                    s.modifier,
                    vec![s.z],
                    vec![s.w],
                )
            })
            .collect(),
        vec!["z1".into()],
        vec!["w1".into()],
    )
}

/// Marginal basis settings for experiment fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSettings {
    pub degree_time: usize,
    pub degree_mod: usize,
    pub interior_time: usize,
    pub interior_mod: usize,
}

impl Default for BasisSettings {
    fn default() -> Self {
        // K = K_mod = 7 cubic.
        Self {
            degree_time: 3,
            degree_mod: 3,
            interior_time: 3,
            interior_mod: 3,
        }
    }
}

impl BasisSettings {
    /// Builds the model bases from a dataset: event-time knots at quantiles
    /// of the distinct failure times, modifier knots at quantiles of the
    /// modifier values.
    pub fn build(&self, ds: &Dataset) -> Result<ModelBasis> {
        let time = BasisSpec::from_quantiles(
            &ds.distinct_failure_times(),
            self.degree_time,
            self.interior_time,
        )?;
        let modifier =
            BasisSpec::from_quantiles(&ds.modifier_values(), self.degree_mod, self.interior_mod)?;
        Ok(ModelBasis::new(time, modifier, ds.p()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Imse,
    Bias,
    Variance,
    Coverage,
    TypeI,
    Power,
    CvComparison,
}

/// Cross-validation comparison settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvExperiment {
    pub folds: usize,
    pub methods: Vec<CvMethod>,
    /// None uses the default 5x5 grid scaled by sqrt(n).
    pub grid: Option<Vec<(f64, f64)>>,
    /// Testing-sample size; defaults to the training size.
    pub testing_n: Option<usize>,
    /// Joint grid side for the IMSE of selected fits (101 -> 10,201 cells).
    pub imse_grid: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub replicates: usize,
    pub metrics: Vec<Metric>,
    pub basis: BasisSettings,
    /// Uniform (mu_time, mu_mod) penalty; None fits unpenalized.
    pub penalty: Option<(f64, f64)>,
    pub solver: SolverConfig,
    /// Points per timescale for estimation/coverage grids.
    pub grid_points: usize,
    /// Event-time slice locations for calendar-axis curves.
    pub time_slices: Vec<f64>,
    /// Modifier slice locations for event-axis curves.
    pub modifier_slices: Vec<f64>,
    pub test_constructions: Vec<TestConstruction>,
    pub alpha: f64,
    pub confidence_level: f64,
    pub cv: Option<CvExperiment>,
    pub threads: usize,
}

impl ExperimentConfig {
    pub fn new(scenario: ScenarioConfig, replicates: usize, metrics: Vec<Metric>) -> Self {
        Self {
            scenario,
            replicates,
            metrics,
            basis: BasisSettings::default(),
            penalty: None,
            solver: SolverConfig::default(),
            grid_points: 100,
            time_slices: vec![5.0, 15.0, 25.0],
            modifier_slices: vec![10.0, 25.0, 40.0],
            test_constructions: vec![TestConstruction::UnpenalizedChisq],
            alpha: 0.05,
            confidence_level: 0.95,
            cv: None,
            threads: 1,
        }
    }

    fn wants(&self, m: Metric) -> bool {
        self.metrics.contains(&m)
    }

    fn wants_estimation(&self) -> bool {
        self.wants(Metric::Imse) || self.wants(Metric::Bias) || self.wants(Metric::Variance)
    }

    fn wants_rejection(&self) -> bool {
        self.wants(Metric::TypeI) || self.wants(Metric::Power)
    }
}

/// Axis of a displayed slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", rename_all = "kebab-case")]
pub enum SliceAxis {
    /// Curve over event time at a fixed modifier value.
    EventTime { modifier: f64 },
    /// Curve over the modifier at a fixed event time.
    Calendar { time: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceSummary {
    pub axis: SliceAxis,
    pub grid: Vec<f64>,
    pub truth: Vec<f64>,
    pub mean: Vec<f64>,
    /// 2.5th and 97.5th percentiles of the replicate estimates.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Pointwise CI coverage fraction, when requested.
    pub coverage: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationMetrics {
    pub t_grid: Vec<f64>,
    pub x_grid: Vec<f64>,
    pub imse_event: Vec<f64>,
    pub bias_event: Vec<f64>,
    pub variance_event: Vec<f64>,
    pub imse_calendar: Vec<f64>,
    pub bias_calendar: Vec<f64>,
    pub variance_calendar: Vec<f64>,
    pub imse_event_mean: f64,
    pub imse_calendar_mean: f64,
    pub slices: Vec<SliceSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectionRate {
    pub kind: ContrastKind,
    pub construction: TestConstruction,
    pub rejected: usize,
    pub total: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectionMetrics {
    pub alpha: f64,
    pub rates: Vec<RejectionRate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReplicateRecord {
    pub replicate: usize,
    /// Selected (mu_time, mu_mod) per method, in method order.
    pub selected: Vec<(f64, f64)>,
    pub train_neg2ll: Vec<f64>,
    pub test_neg2ll: Vec<f64>,
    pub imse: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvComparisonMetrics {
    pub methods: Vec<CvMethod>,
    pub per_replicate: Vec<CvReplicateRecord>,
    pub mean_train_neg2ll: Vec<f64>,
    pub mean_test_neg2ll: Vec<f64>,
    pub mean_imse: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub replicates_requested: usize,
    pub replicates_used: usize,
    pub failures: Vec<String>,
    pub estimation: Option<EstimationMetrics>,
    pub rejection: Option<RejectionMetrics>,
    pub cv_comparison: Option<CvComparisonMetrics>,
}

fn even_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

/// Evaluates one covariate surface over a product grid; x-major layout
/// (index = ix * nt + it).
fn surface_on_grid(
    basis: &ModelBasis,
    gamma_block: &[f64],
    t_grid: &[f64],
    x_grid: &[f64],
) -> Vec<f64> {
    let k_time = basis.layout.k_time;
    let bt: Vec<Vec<f64>> = t_grid.iter().map(|&t| basis.time.eval(t)).collect();
    let bx: Vec<Vec<f64>> = x_grid.iter().map(|&x| basis.modifier.eval(x)).collect();
    let mut out = Vec::with_capacity(t_grid.len() * x_grid.len());
    for bm in &bx {
        for btv in &bt {
            let mut acc = 0.0;
            for (km, &bmv) in bm.iter().enumerate() {
                if bmv == 0.0 {
                    continue;
                }
                let row = &gamma_block[km * k_time..(km + 1) * k_time];
                let mut inner = 0.0;
                for (kt, &b) in btv.iter().enumerate() {
                    inner += row[kt] * b;
                }
                acc += bmv * inner;
            }
            out.push(acc);
        }
    }
    out
}

struct ReplicateOutput {
    surface: Option<Vec<f64>>,
    /// Per slice: (estimate, lo, hi) per grid point.
    slices: Option<Vec<Vec<(f64, f64, f64)>>>,
    rejections: Option<Vec<bool>>,
}

/// Runs the estimation/coverage/rejection pipeline and, when requested, the
/// cross-validation comparison. Replicate `r` uses seed `scenario.seed + r`
/// (testing data, when needed, uses `scenario.seed + 1_000_000 + r`).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.scenario.validate()?;
    cfg.solver.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;

    let mut report = MetricsReport {
        replicates_requested: cfg.replicates,
        replicates_used: 0,
        failures: Vec::new(),
        estimation: None,
        rejection: None,
        cv_comparison: None,
    };

    let main_pipeline =
        cfg.wants_estimation() || cfg.wants(Metric::Coverage) || cfg.wants_rejection();
    if main_pipeline {
        let t_grid = even_grid(0.0, cfg.scenario.horizon, cfg.grid_points);
        let x_grid = even_grid(
            cfg.scenario.modifier_range.0,
            cfg.scenario.modifier_range.1,
            cfg.grid_points,
        );
        let slice_axes: Vec<SliceAxis> = cfg
            .modifier_slices
            .iter()
            .map(|&m| SliceAxis::EventTime { modifier: m })
            .chain(cfg.time_slices.iter().map(|&t| SliceAxis::Calendar { time: t }))
            .collect();

        let results: Vec<std::result::Result<ReplicateOutput, String>> = pool.install(|| {
            (0..cfg.replicates)
                .into_par_iter()
                .map(|r| {
                    replicate_main(cfg, r, &t_grid, &x_grid, &slice_axes)
                        .map_err(|e| format!("replicate {r}: {e}"))
                })
                .collect()
        });

        let mut surfaces = Vec::new();
        let mut slices_acc: Vec<Vec<Vec<(f64, f64, f64)>>> = Vec::new();
        let mut rejections: Vec<Vec<bool>> = Vec::new();
        for res in results {
            match res {
                Ok(out) => {
                    if let Some(s) = out.surface {
                        surfaces.push(s);
                    }
                    if let Some(s) = out.slices {
                        slices_acc.push(s);
                    }
                    if let Some(rj) = out.rejections {
                        rejections.push(rj);
                    }
                    report.replicates_used += 1;
                }
                Err(msg) => report.failures.push(msg),
            }
        }
        if report.replicates_used == 0 {
            return Err(Error::InvalidConfig(
                "every replicate failed; see failures".into(),
            ));
        }

        if cfg.wants_estimation() {
            report.estimation = Some(aggregate_estimation(
                cfg,
                &t_grid,
                &x_grid,
                &surfaces,
                &slices_acc,
            ));
        }
        if cfg.wants_rejection() {
            report.rejection = Some(aggregate_rejection(cfg, &rejections));
        }
    }

    if cfg.wants(Metric::CvComparison) {
        let cv_cfg = cfg
            .cv
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("cv-comparison requires cv settings".into()))?;
        let results: Vec<std::result::Result<CvReplicateRecord, String>> = pool.install(|| {
            (0..cfg.replicates)
                .into_par_iter()
                .map(|r| {
                    replicate_cv(cfg, cv_cfg, r).map_err(|e| format!("cv replicate {r}: {e}"))
                })
                .collect()
        });
        let mut records = Vec::new();
        for res in results {
            match res {
                Ok(rec) => records.push(rec),
                Err(msg) => report.failures.push(msg),
            }
        }
        if records.is_empty() {
            return Err(Error::InvalidConfig(
                "every cv replicate failed; see failures".into(),
            ));
        }
        if !main_pipeline {
            report.replicates_used = records.len();
        }
        let k = cv_cfg.methods.len();
        let mean = |f: &dyn Fn(&CvReplicateRecord) -> &Vec<f64>| -> Vec<f64> {
            (0..k)
                .map(|m| records.iter().map(|r| f(r)[m]).sum::<f64>() / records.len() as f64)
                .collect()
        };
        report.cv_comparison = Some(CvComparisonMetrics {
            methods: cv_cfg.methods.clone(),
            mean_train_neg2ll: mean(&|r| &r.train_neg2ll),
            mean_test_neg2ll: mean(&|r| &r.test_neg2ll),
            mean_imse: mean(&|r| &r.imse),
            per_replicate: records,
        });
    }

    Ok(report)
}

fn replicate_main(
    cfg: &ExperimentConfig,
    r: usize,
    t_grid: &[f64],
    x_grid: &[f64],
    slice_axes: &[SliceAxis],
) -> Result<ReplicateOutput> {
    let ds = generate_dataset(&cfg.scenario, cfg.scenario.seed + r as u64)?;
    let basis = cfg.basis.build(&ds)?;
    let index = build_risk_index(&ds);
    let ctx = EvalContext::new(&ds, &index, &basis)?;
    let penalty = cfg
        .penalty
        .map(|(mt, mm)| PenaltyConfig::uniform(ds.p(), mt, mm));
    let fit = fit_with_context(&ctx, 1, penalty.as_ref(), &cfg.solver, None)?;
    if !fit.converged {
        return Err(Error::InvalidConfig("fit did not converge".into()));
    }
    let block = basis.layout.block();
    let gamma_block = &fit.coefficients.gamma[..block];

    let surface = if cfg.wants_estimation() {
        Some(surface_on_grid(&basis, gamma_block, t_grid, x_grid))
    } else {
        None
    };

    let slices = if cfg.wants_estimation() || cfg.wants(Metric::Coverage) {
        let var = variance_estimates(&fit)?;
        let mut per_slice = Vec::with_capacity(slice_axes.len());
        for axis in slice_axes {
            let pts = match axis {
                SliceAxis::EventTime { modifier } => pointwise_ci(
                    &fit,
                    &var,
                    &basis,
                    0,
                    t_grid,
                    std::slice::from_ref(modifier),
                    cfg.confidence_level,
                    VarianceKind::Sandwich,
                )?,
                SliceAxis::Calendar { time } => pointwise_ci(
                    &fit,
                    &var,
                    &basis,
                    0,
                    std::slice::from_ref(time),
                    x_grid,
                    cfg.confidence_level,
                    VarianceKind::Sandwich,
                )?,
            };
            per_slice.push(pts.into_iter().map(|p| (p.estimate, p.lo, p.hi)).collect());
        }
        Some(per_slice)
    } else {
        None
    };

    let rejections = if cfg.wants_rejection() {
        let var = variance_estimates(&fit)?;
        let mut out = Vec::new();
        for &construction in &cfg.test_constructions {
            for kind in [
                ContrastKind::EventTime,
                ContrastKind::Modifier,
                ContrastKind::Joint,
            ] {
                let t = wald_test(&fit, &var, kind, construction, 0)?;
                out.push(t.p_value < cfg.alpha);
            }
        }
        Some(out)
    } else {
        None
    };

    Ok(ReplicateOutput {
        surface,
        slices,
        rejections,
    })
}

fn aggregate_estimation(
    cfg: &ExperimentConfig,
    t_grid: &[f64],
    x_grid: &[f64],
    surfaces: &[Vec<f64>],
    slices_acc: &[Vec<Vec<(f64, f64, f64)>>],
) -> EstimationMetrics {
    let nt = t_grid.len();
    let nx = x_grid.len();
    let reps = surfaces.len() as f64;
    let mut mean = vec![0.0; nt * nx];
    for s in surfaces {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / reps;
        }
    }
    let mut mse = vec![0.0; nt * nx];
    let mut var = vec![0.0; nt * nx];
    let mut truth = vec![0.0; nt * nx];
    for (ix, &x) in x_grid.iter().enumerate() {
        for (it, &t) in t_grid.iter().enumerate() {
            truth[ix * nt + it] = cfg.scenario.surface.eval(t, x);
        }
    }
    for s in surfaces {
        for i in 0..nt * nx {
            let d = s[i] - truth[i];
            mse[i] += d * d / reps;
            let dv = s[i] - mean[i];
            var[i] += dv * dv / reps;
        }
    }
    let bias: Vec<f64> = mean.iter().zip(&truth).map(|(m, t)| m - t).collect();

    let avg_over_x = |v: &[f64]| -> Vec<f64> {
        (0..nt)
            .map(|it| (0..nx).map(|ix| v[ix * nt + it]).sum::<f64>() / nx as f64)
            .collect()
    };
    let avg_over_t = |v: &[f64]| -> Vec<f64> {
        (0..nx)
            .map(|ix| (0..nt).map(|it| v[ix * nt + it]).sum::<f64>() / nt as f64)
            .collect()
    };
    let imse_event = avg_over_x(&mse);
    let imse_calendar = avg_over_t(&mse);
    let imse_event_mean = imse_event.iter().sum::<f64>() / nt as f64;
    let imse_calendar_mean = imse_calendar.iter().sum::<f64>() / nx as f64;

    // Slice summaries with percentile bands (and coverage when present).
    let slice_axes: Vec<SliceAxis> = if slices_acc.is_empty() {
        Vec::new()
    } else {
        cfg.modifier_slices
            .iter()
            .map(|&m| SliceAxis::EventTime { modifier: m })
            .chain(cfg.time_slices.iter().map(|&t| SliceAxis::Calendar { time: t }))
            .collect()
    };
    let want_cov = cfg.wants(Metric::Coverage);
    let mut slices = Vec::with_capacity(slice_axes.len());
    for (si, axis) in slice_axes.iter().enumerate() {
        let grid: Vec<f64> = match axis {
            SliceAxis::EventTime { .. } => t_grid.to_vec(),
            SliceAxis::Calendar { .. } => x_grid.to_vec(),
        };
        let truth_curve: Vec<f64> = grid
            .iter()
            .map(|&g| match axis {
                SliceAxis::EventTime { modifier } => cfg.scenario.surface.eval(g, *modifier),
                SliceAxis::Calendar { time } => cfg.scenario.surface.eval(*time, g),
            })
            .collect();
        let mut mean_curve = vec![0.0; grid.len()];
        let mut lo_curve = vec![0.0; grid.len()];
        let mut hi_curve = vec![0.0; grid.len()];
        let mut cov_curve = vec![0.0; grid.len()];
        for gi in 0..grid.len() {
            let mut ests: Vec<f64> = slices_acc.iter().map(|rep| rep[si][gi].0).collect();
            mean_curve[gi] = ests.iter().sum::<f64>() / ests.len() as f64;
            ests.sort_by(|a, b| a.partial_cmp(b).unwrap());
            lo_curve[gi] = quantile_type7(&ests, 0.025);
            hi_curve[gi] = quantile_type7(&ests, 0.975);
            if want_cov {
                let hits = slices_acc
                    .iter()
                    .filter(|rep| {
                        let (_, lo, hi) = rep[si][gi];
                        lo <= truth_curve[gi] && truth_curve[gi] <= hi
                    })
                    .count();
                cov_curve[gi] = hits as f64 / slices_acc.len() as f64;
            }
        }
        slices.push(SliceSummary {
            axis: *axis,
            grid,
            truth: truth_curve,
            mean: mean_curve,
            lo: lo_curve,
            hi: hi_curve,
            coverage: want_cov.then_some(cov_curve),
        });
    }

    EstimationMetrics {
        t_grid: t_grid.to_vec(),
        x_grid: x_grid.to_vec(),
        imse_event,
        bias_event: avg_over_x(&bias),
        variance_event: avg_over_x(&var),
        imse_calendar,
        bias_calendar: avg_over_t(&bias),
        variance_calendar: avg_over_t(&var),
        imse_event_mean,
        imse_calendar_mean,
        slices,
    }
}

fn aggregate_rejection(cfg: &ExperimentConfig, rejections: &[Vec<bool>]) -> RejectionMetrics {
    let kinds = [
        ContrastKind::EventTime,
        ContrastKind::Modifier,
        ContrastKind::Joint,
    ];
    let mut rates = Vec::new();
    let mut idx = 0;
    for &construction in &cfg.test_constructions {
        for &kind in &kinds {
            let rejected = rejections.iter().filter(|r| r[idx]).count();
            let total = rejections.len();
            rates.push(RejectionRate {
                kind,
                construction,
                rejected,
                total,
                rate: rejected as f64 / total.max(1) as f64,
            });
            idx += 1;
        }
    }
    RejectionMetrics {
        alpha: cfg.alpha,
        rates,
    }
}

fn replicate_cv(
    cfg: &ExperimentConfig,
    cv_cfg: &CvExperiment,
    r: usize,
) -> Result<CvReplicateRecord> {
    let train = generate_dataset(&cfg.scenario, cfg.scenario.seed + r as u64)?;
    let mut test_scenario = cfg.scenario.clone();
    if let Some(tn) = cv_cfg.testing_n {
        test_scenario.n = tn;
    }
    let test = generate_dataset(&test_scenario, cfg.scenario.seed + 1_000_000 + r as u64)?;
    let basis = cfg.basis.build(&train)?;
    let train_index = build_risk_index(&train);
    let test_index = build_risk_index(&test);
    let assignment = partition_folds(&train, cv_cfg.folds, cfg.scenario.seed + 2_000_000 + r as u64)?;
    let grid = cv_cfg
        .grid
        .clone()
        .unwrap_or_else(|| crate::cv::default_grid(train.len()));
    let reports = tune_all(
        &train,
        &train_index,
        &basis,
        &assignment,
        &grid,
        &cv_cfg.methods,
        1,
        &cfg.solver,
    )?;

    let train_ctx = EvalContext::new(&train, &train_index, &basis)?;
    let test_ctx = EvalContext::new(&test, &test_index, &basis)?;
    let t_grid = even_grid(0.0, cfg.scenario.horizon, cv_cfg.imse_grid);
    let x_grid = even_grid(
        cfg.scenario.modifier_range.0,
        cfg.scenario.modifier_range.1,
        cv_cfg.imse_grid,
    );
    let mut truth = vec![0.0; cv_cfg.imse_grid * cv_cfg.imse_grid];
    for (ix, &x) in x_grid.iter().enumerate() {
        for (it, &t) in t_grid.iter().enumerate() {
            truth[ix * cv_cfg.imse_grid + it] = cfg.scenario.surface.eval(t, x);
        }
    }

    let mut selected = Vec::new();
    let mut train_neg2ll = Vec::new();
    let mut test_neg2ll = Vec::new();
    let mut imse = Vec::new();
    let mut cache: Vec<((f64, f64), Coefficients)> = Vec::new();
    for report in &reports {
        let pair = report.selected_pair();
        let coeffs = match cache.iter().find(|(p, _)| *p == pair) {
            Some((_, c)) => c.clone(),
            None => {
                let penalty = PenaltyConfig::uniform(train.p(), pair.0, pair.1);
                let fit = fit_with_context(&train_ctx, 1, Some(&penalty), &cfg.solver, None)?;
                cache.push((pair, fit.coefficients.clone()));
                fit.coefficients
            }
        };
        selected.push(pair);
        train_neg2ll.push(-2.0 * train_ctx.value(1, &coeffs)?);
        test_neg2ll.push(-2.0 * test_ctx.value(1, &coeffs)?);
        let block = basis.layout.block();
        let surf = surface_on_grid(&basis, &coeffs.gamma[..block], &t_grid, &x_grid);
        let m: f64 = surf
            .iter()
            .zip(&truth)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / truth.len() as f64;
        imse.push(m);
    }
    Ok(CvReplicateRecord {
        replicate: r,
        selected,
        train_neg2ll,
        test_neg2ll,
        imse,
    })
}
