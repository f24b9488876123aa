//! Synthetic functional-realization study: two test functions, two error covariances,
//! the DGP fit against a homoskedastic GP baseline, scored by log score and MSE.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgpfco::{conditional_posterior, fit, posterior_spectrum, DgpConfig};
use crate::error::{check_len, Error, Result};
use crate::gaussmath::{chol, correlated_normal, GaussianDist, JitterPolicy, ScoreReport};
use crate::kernelcov::{matern52_matrix, MaternParams, DEFAULT_JITTER};
use crate::optim::nelder_mead;
use crate::rng::{named_stream, StreamRng};
use crate::spectra::{
    build_lambdas, estimate_error_cov, fmt17, Detrend, ErrorCovConvention, ErrorCovOptions, PrecisionModel,
    SpectraBatch, ValidityRanges, WavenumberGrid, WeightedSpectrum,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestFunction {
    F1,
    F2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VarianceSetting {
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub m1: f64,
    pub u1: f64,
    pub m2: f64,
    pub u2: f64,
}

pub fn eval_f1(x: f64, m1: f64, u1: f64) -> f64 {
    let half = u1 / 2.0;
    m1 * (-half * x).exp() * (x * (25.0 - half * half).sqrt()).cos() - m1 * x / 5.0
}

pub fn eval_f2(x: f64, m2: f64, u2: f64) -> f64 {
    (-m2 * (x - 3.0).powi(2)).exp() + (-u2 * (x - 1.0).powi(2)).exp() - 0.05 * (8.0 * (x - 1.9)).sin()
}

pub fn draw_sim_params<R: Rng + ?Sized>(rng: &mut R) -> SimParams {
    SimParams {
        m1: rng.random_range(0.5..1.5),
        u1: rng.random_range(1.5..2.5),
        m2: rng.random_range(0.6..1.4),
        u2: rng.random_range(0.6..1.4),
    }
}

/// `0, 0.1, ..., 4.0`.
pub fn sim_grid() -> Vec<f64> {
    (0..=40).map(|i| i as f64 / 10.0).collect()
}

pub fn build_sigma_a(x: &[f64]) -> Result<DMatrix<f64>> {
    matern52_matrix(x, &MaternParams::new(0.01, 0.0225, DEFAULT_JITTER)?)
}

/// `diag(s) M diag(s)` with `M = 0.1 K(d^2, 0.05)` and `s = 1.5^(-x/2)`, plus jitter.
pub fn build_sigma_b(x: &[f64]) -> Result<DMatrix<f64>> {
    let m = matern52_matrix(x, &MaternParams::new(0.05, 0.1, 0.0)?)?;
    let s: Vec<f64> = x.iter().map(|v| 1.5f64.powf(-v / 2.0)).collect();
    let n = x.len();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        s[i] * m[(i, j)] * s[j] + if i == j { DEFAULT_JITTER } else { 0.0 }
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub function: TestFunction,
    pub variance: VarianceSetting,
    pub runs: usize,
    pub replicates: usize,
    pub seed: u64,
    /// Multiplies the realization covariance before jitter; 0 leaves jitter only.
    #[serde(default = "one")]
    pub variance_multiplier: f64,
}

fn one() -> f64 {
    1.0
}

impl SimScenario {
    pub fn new(function: TestFunction, variance: VarianceSetting, runs: usize, replicates: usize, seed: u64) -> Self {
        Self {
            function,
            variance,
            runs,
            replicates,
            seed,
            variance_multiplier: 1.0,
        }
    }

    /// Both functions, both covariances and `r in {5, 15}`.
    pub fn full_grid(replicates: usize, seed: u64) -> Vec<Self> {
        let mut out = Vec::new();
        for runs in [5, 15] {
            for function in [TestFunction::F1, TestFunction::F2] {
                for variance in [VarianceSetting::A, VarianceSetting::B] {
                    out.push(Self::new(function, variance, runs, replicates, seed));
                }
            }
        }
        out
    }

    pub fn label(&self) -> String {
        let f = match self.function {
            TestFunction::F1 => "f1",
            TestFunction::F2 => "f2",
        };
        let v = match self.variance {
            VarianceSetting::A => "A",
            VarianceSetting::B => "B",
        };
        format!("{f}{v}-r{}", self.runs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs < 2 {
            return Err(Error::Config(format!(
                "scenario {} needs at least 2 realizations to estimate the error covariance",
                self.label()
            )));
        }
        if self.replicates == 0 {
            return Err(Error::Config(format!("scenario {} has no replicates", self.label())));
        }
        if !(self.variance_multiplier >= 0.0) {
            return Err(Error::Config("variance multiplier must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn truth(&self, x: &[f64], p: &SimParams) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            x.iter().map(|&v| match self.function {
                TestFunction::F1 => eval_f1(v, p.m1, p.u1),
                TestFunction::F2 => eval_f2(v, p.m2, p.u2),
            }),
        )
    }

    pub fn covariance(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let base = match self.variance {
            VarianceSetting::A => build_sigma_a(x)?,
            VarianceSetting::B => build_sigma_b(x)?,
        };
        if self.variance_multiplier == 1.0 {
            return Ok(base);
        }
        let n = x.len();
        let mut c = (base - DMatrix::identity(n, n) * DEFAULT_JITTER) * self.variance_multiplier;
        for i in 0..n {
            c[(i, i)] += DEFAULT_JITTER;
        }
        Ok(c)
    }
}

impl fmt::Display for SimScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for SimScenario {
    type Err = Error;

    /// Parses labels such as `f1A-r5`; seed and replicate count default to 0 and 20.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unrecognized scenario `{s}` (expected e.g. f1A-r5)"));
        let (head, runs) = s.split_once("-r").ok_or_else(bad)?;
        let runs: usize = runs.parse().map_err(|_| bad())?;
        let function = match head.get(..2) {
            Some("f1") => TestFunction::F1,
            Some("f2") => TestFunction::F2,
            _ => return Err(bad()),
        };
        let variance = match head.get(2..) {
            Some("A") => VarianceSetting::A,
            Some("B") => VarianceSetting::B,
            _ => return Err(bad()),
        };
        Ok(Self::new(function, variance, runs, 20, 0))
    }
}

/// Synthetic data for one replicate.
#[derive(Clone, Debug)]
pub struct SimData {
    pub params: SimParams,
    pub truth: DVector<f64>,
    /// r x n.
    pub runs: DMatrix<f64>,
}

pub fn draw_realizations<R: Rng + ?Sized>(scenario: &SimScenario, x: &[f64], rng: &mut R) -> Result<SimData> {
    let params = draw_sim_params(rng);
    let truth = scenario.truth(x, &params);
    let factor = chol(&scenario.covariance(x)?, JitterPolicy::default(), "realization covariance")?;
    let mut runs = DMatrix::zeros(scenario.runs, x.len());
    for mut row in runs.row_iter_mut() {
        let draw = &truth + correlated_normal(&factor, rng);
        row.copy_from(&draw.transpose());
    }
    Ok(SimData { params, truth, runs })
}

/// Equal-weight mean of the realizations and its error covariance from a Matérn fit to
/// the run contrasts (unit precisions).
pub fn fuse_realizations(x: &[f64], runs: &DMatrix<f64>, id: &str) -> Result<WeightedSpectrum> {
    let grid = WavenumberGrid::from_log10(x)?;
    let batch = SpectraBatch::new(id, grid.clone(), None, Some(runs.clone()), None, None)?;
    let precision = PrecisionModel::unit(x.len());
    let lambdas = build_lambdas(&grid, &precision, &ValidityRanges::low_only(), runs.nrows())?;
    let opts = ErrorCovOptions {
        convention: ErrorCovConvention::Propagated,
        detrend: Detrend::RunMean,
    };
    let mut ws = estimate_error_cov(&batch, &precision, &lambdas, &opts)?;
    ws.x = x.to_vec();
    Ok(ws)
}

/// Stationary Matérn GP with iid noise and a plug-in constant mean; returns the posterior
/// of the latent curve. Hyperparameters by maximum likelihood with the scale profiled.
pub fn baseline_gp_fit(ybar: &DVector<f64>, x: &[f64]) -> Result<GaussianDist> {
    let n = x.len();
    check_len("baseline_gp_fit", n, ybar.len())?;
    if n < 2 {
        return Err(Error::Config("baseline needs at least two points".into()));
    }
    let lo = x[0];
    let span = x[n - 1] - lo;
    if !(span > 0.0) {
        return Err(Error::Domain("baseline inputs must span a positive range".into()));
    }
    let u: Vec<f64> = x.iter().map(|v| (v - lo) / span).collect();
    let mu = ybar.mean();
    let resid = ybar.map(|v| v - mu);
    let nf = n as f64;
    const LOG_THETA: (f64, f64) = (-6.0, 2.0);
    const LOG_G: (f64, f64) = (-8.0, 1.0);

    let nll = |p: &[f64]| -> f64 {
        if !(LOG_THETA.0..=LOG_THETA.1).contains(&p[0]) || !(LOG_G.0..=LOG_G.1).contains(&p[1]) {
            return f64::INFINITY;
        }
        let k = match matern52_matrix(&u, &MaternParams::unit(10f64.powf(p[0]))) {
            Ok(k) => k + DMatrix::identity(n, n) * 10f64.powf(p[1]),
            Err(_) => return f64::INFINITY,
        };
        let Ok(f) = chol(&k, JitterPolicy::None, "baseline") else {
            return f64::INFINITY;
        };
        if !f.is_full_rank() {
            return f64::INFINITY;
        }
        let Ok(q) = f.quad_form(&resid) else {
            return f64::INFINITY;
        };
        let s2 = q / nf;
        if !(s2 > 0.0) {
            return f64::INFINITY;
        }
        0.5 * (nf * s2.ln() + f.log_det())
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in [[-3.0, -2.0], [-2.0, -4.0], [-1.0, -1.0], [-4.0, -6.0]] {
        let (p, v) = nelder_mead(nll, &start, 0.5, 400, 1e-10);
        if v.is_finite() && best.as_ref().is_none_or(|(_, b)| v < *b) {
            best = Some((p, v));
        }
    }
    let (p, _) = best.ok_or_else(|| Error::FitFailure {
        reason: "baseline likelihood was not finite at any start".into(),
        best: vec![],
    })?;
    let theta = 10f64.powf(p[0]);
    let g = 10f64.powf(p[1]);
    let k = matern52_matrix(&u, &MaternParams::unit(theta))?;
    let f = chol(&(&k + DMatrix::identity(n, n) * g), JitterPolicy::default(), "baseline")?;
    let s2 = (f.quad_form(&resid)? / nf).max(f64::MIN_POSITIVE);
    let (m, c) = conditional_posterior(&resid, &(k * s2), &(DMatrix::identity(n, n) * (g * s2)), None)?;
    GaussianDist::new(m.map(|v| v + mu), c, JitterPolicy::default())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub scenario: String,
    pub rep: usize,
    pub params: SimParams,
    pub dgp: ScoreReport,
    pub baseline: ScoreReport,
}

fn replicate_stream(scenario: &SimScenario, rep: usize) -> StreamRng {
    named_stream(scenario.seed, &["simstudy", &scenario.label(), &rep.to_string()])
}

pub fn run_replicate(scenario: &SimScenario, rep: usize, dgp: &DgpConfig) -> Result<ReplicateResult> {
    scenario.validate()?;
    let x = sim_grid();
    let mut rng = replicate_stream(scenario, rep);
    let data = draw_realizations(scenario, &x, &mut rng)?;
    let ws = fuse_realizations(&x, &data.runs, &format!("{}#{rep}", scenario.label()))?;

    let cfg = DgpConfig {
        seed: rng.random(),
        ..dgp.clone()
    };
    let chain = fit(&ws, &cfg)?;
    let post = posterior_spectrum(&chain, &ws, &cfg, cfg.draws_per_sample, false)?;
    let dgp_score = ScoreReport::evaluate(&data.truth, &post.predictive_dist()?)?;

    let base = baseline_gp_fit(&ws.ybar, &x)?;
    let base_score = ScoreReport::evaluate(&data.truth, &base)?;
    Ok(ReplicateResult {
        scenario: scenario.label(),
        rep,
        params: data.params,
        dgp: dgp_score,
        baseline: base_score,
    })
}

/// Outcome of one replicate, successful or not.
#[derive(Debug)]
pub struct ReplicateOutcome {
    pub scenario: String,
    pub rep: usize,
    pub result: Result<ReplicateResult>,
}

/// Runs every replicate of every scenario in parallel. Output order is scenario order,
/// then replicate order, regardless of scheduling.
pub fn run_study(scenarios: &[SimScenario], dgp: &DgpConfig) -> Result<Vec<ReplicateOutcome>> {
    for s in scenarios {
        s.validate()?;
    }
    dgp.validate()?;
    let jobs: Vec<(&SimScenario, usize)> = scenarios
        .iter()
        .flat_map(|s| (0..s.replicates).map(move |r| (s, r)))
        .collect();
    Ok(jobs
        .into_par_iter()
        .map(|(s, rep)| ReplicateOutcome {
            scenario: s.label(),
            rep,
            result: run_replicate(s, rep, dgp),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub scenario: String,
    pub rep: usize,
    pub method: String,
    pub log_score: f64,
    pub mse: f64,
}

pub const METHOD_DGP: &str = "dgp-fco";
pub const METHOD_BASELINE: &str = "homoskedastic-gp";

pub fn study_rows(results: &[ReplicateResult]) -> Vec<StudyRow> {
    results
        .iter()
        .flat_map(|r| {
            [(METHOD_DGP, r.dgp), (METHOD_BASELINE, r.baseline)].map(|(m, s)| StudyRow {
                scenario: r.scenario.clone(),
                rep: r.rep,
                method: m.to_string(),
                log_score: s.log_score,
                mse: s.mse,
            })
        })
        .collect()
}

/// Tidy CSV: `scenario,rep,method,log_score,mse`.
pub fn write_study_csv<W: Write>(out: W, rows: &[StudyRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario", "rep", "method", "log_score", "mse"])?;
    for r in rows {
        w.write_record([
            r.scenario.clone(),
            r.rep.to_string(),
            r.method.clone(),
            fmt17(r.log_score),
            fmt17(r.mse),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.is_empty() {
        f64::NAN
    } else if v.len() % 2 == 0 {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn f1_at_origin_and_zero_amplitude() {
        assert_relative_eq!(eval_f1(0.0, 1.3, 2.0), 1.3, max_relative = 1e-15);
        for x in sim_grid() {
            assert_eq!(eval_f1(x, 0.0, 2.0), 0.0);
        }
    }

    #[test]
    fn f2_at_three() {
        // 1 + exp(-4 u2) - 0.05 sin(8.8), u2 = 0.9; mpmath at 30 digits
        assert_relative_eq!(eval_f2(3.0, 1.1, 0.9), 0.998_077_862_802_704_4, max_relative = 1e-14);
    }

    #[test]
    fn parameter_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut sum = [0.0; 4];
        for _ in 0..n {
            let p = draw_sim_params(&mut rng);
            assert!((0.5..1.5).contains(&p.m1) && (1.5..2.5).contains(&p.u1));
            assert!((0.6..1.4).contains(&p.m2) && (0.6..1.4).contains(&p.u2));
            for (s, v) in sum.iter_mut().zip([p.m1, p.u1, p.m2, p.u2]) {
                *s += v;
            }
        }
        let se = [1.0 / 12f64.sqrt(), 1.0 / 12f64.sqrt(), 0.8 / 12f64.sqrt(), 0.8 / 12f64.sqrt()]
            .map(|sd| 3.0 * sd / (n as f64).sqrt());
        for ((s, target), tol) in sum.iter().zip([1.0, 2.0, 1.0, 1.0]).zip(se) {
            assert!((s / n as f64 - target).abs() < tol);
        }
        let a = draw_sim_params(&mut ChaCha8Rng::seed_from_u64(9));
        let b = draw_sim_params(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn covariance_diagonals() {
        let x = sim_grid();
        let a = build_sigma_a(&x).unwrap();
        assert!(a.diagonal().iter().all(|&d| d == 0.0225 + 1e-8));
        let b = build_sigma_b(&x).unwrap();
        assert_relative_eq!(b[(0, 0)], 0.1 + 1e-8, max_relative = 1e-15);
        assert!(b.diagonal().as_slice().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn realization_variance_sanity() {
        // r = 200: each pointwise variance has relative sd sqrt(2/200) = 0.1
        let x = sim_grid();
        let r = 200;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in [VarianceSetting::A, VarianceSetting::B] {
                let s = SimScenario::new(TestFunction::F2, v, r, 1, 0);
                let d = draw_realizations(&s, &x, &mut rng).unwrap();
                let cov = s.covariance(&x).unwrap();
                let mut pooled = 0.0;
                for i in 0..x.len() {
                    let col = d.runs.column(i);
                    let var = col.iter().map(|v| (v - d.truth[i]).powi(2)).sum::<f64>() / r as f64;
                    let ratio = var / cov[(i, i)];
                    assert!((ratio - 1.0).abs() < 0.4, "{v:?} {i} {ratio}");
                    pooled += ratio / x.len() as f64;
                }
                assert!((pooled - 1.0).abs() < 0.06, "{v:?} pooled {pooled}");
            }
        }
    }

    #[test]
    fn scenario_labels_round_trip() {
        for s in SimScenario::full_grid(20, 3) {
            let p: SimScenario = s.label().parse().unwrap();
            assert_eq!((p.function, p.variance, p.runs), (s.function, s.variance, s.runs));
        }
        assert!("f3A-r5".parse::<SimScenario>().is_err());
    }

    #[test]
    fn baseline_interpolates_noise_free_data() {
        let x = sim_grid();
        let y = DVector::from_iterator(x.len(), x.iter().map(|v| (v / 4.0).powi(2) + 0.3 * v));
        let d = baseline_gp_fit(&y, &x).unwrap();
        assert!((d.mean() - &y).amax() < 1e-3);
        assert!(d.cov().diagonal().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn baseline_constant_data() {
        let x = sim_grid();
        let y = DVector::from_element(x.len(), 0.7);
        let d = baseline_gp_fit(&y, &x).unwrap();
        assert!(d.mean().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn study_csv_layout() {
        let r = ReplicateResult {
            scenario: "f1A-r5".into(),
            rep: 0,
            params: SimParams { m1: 1.0, u1: 2.0, m2: 1.0, u2: 1.0 },
            dgp: ScoreReport { log_score: -1.0, mse: 0.1 },
            baseline: ScoreReport { log_score: 2.0, mse: 0.2 },
        };
        let rows = study_rows(&[r]);
        let mut buf = Vec::new();
        write_study_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("scenario,rep,method,log_score,mse\n"));
    }
}
