//! Principal-component emulator: an SVD basis over fitted curves plus one
//! power-exponential GP per component weight.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::gaussmath::{chol, Factor, JitterPolicy};
use crate::kernelcov::{powexp_corr_matrix, powexp_raw, PowExpParams, DEFAULT_JITTER, DEFAULT_POWEXP_ALPHA};
use crate::optim::halton;

pub const DEFAULT_P_ETA: usize = 10;
pub const EMULATOR_SCHEMA: &str = "dgpemu.emulator/1.0";

/// Mean curve plus truncated SVD basis of the centered training curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PCBasis {
    pub mean: DVector<f64>,
    /// n x p_eta.
    pub basis: DMatrix<f64>,
    /// m x p_eta.
    pub weights: DMatrix<f64>,
    /// All min(m, n) singular values of the centered matrix, descending.
    pub singular_values: Vec<f64>,
    pub p_eta: usize,
}

impl PCBasis {
    pub fn n(&self) -> usize {
        self.mean.len()
    }

    pub fn m(&self) -> usize {
        self.weights.nrows()
    }

    /// `mean + B w` for a weight vector of length `p_eta`.
    pub fn reconstruct(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("basis reconstruction", self.p_eta, w.len())?;
        Ok(&self.mean + &self.basis * w)
    }

    /// Centered reconstruction `B Gamma^T` (n x m).
    pub fn centered_reconstruction(&self) -> DMatrix<f64> {
        &self.basis * self.weights.transpose()
    }
}

/// Builds the basis from `curves` (m rows of length n).
pub fn build_basis(curves: &DMatrix<f64>, p_eta: usize) -> Result<PCBasis> {
    let (m, n) = curves.shape();
    if m < 2 {
        return Err(Error::InsufficientReplicates { needed: 2, got: m });
    }
    if p_eta == 0 {
        return Err(Error::Config("the number of components must be at least 1".into()));
    }
    let mean = curves.row_mean().transpose();
    let mut eta = curves.transpose();
    for mut col in eta.column_iter_mut() {
        col -= &mean;
    }
    let r = m.min(n);
    let svd = eta.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();

    let tol = sv.first().copied().unwrap_or(0.0) * (n.max(m) as f64) * f64::EPSILON;
    let rank = sv.iter().filter(|&&s| s > tol && s > 0.0).count();
    let mut keep = p_eta.min(r);
    if keep > rank {
        log::warn!("requested {p_eta} components but the centered curves have rank {rank}; truncating");
        keep = rank;
    }
    let root_m = (m as f64).sqrt();
    let basis = DMatrix::from_fn(n, keep, |i, j| u[(i, order[j])] * sv[j] / root_m);
    let weights = DMatrix::from_fn(m, keep, |i, j| vt[(order[j], i)] * root_m);
    Ok(PCBasis {
        mean,
        basis,
        weights,
        singular_values: sv,
        p_eta: keep,
    })
}

/// Affine map of each input column onto `[0, 1]` using training min and max.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNormalization {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl InputNormalization {
    pub fn fit(inputs: &DMatrix<f64>) -> Result<Self> {
        if inputs.nrows() == 0 || inputs.ncols() == 0 {
            return Err(Error::Config("no training inputs".into()));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("training inputs must be finite".into()));
        }
        let lo = inputs.column_iter().map(|c| c.min()).collect();
        let hi = inputs.column_iter().map(|c| c.max()).collect();
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn span(&self, j: usize) -> f64 {
        let s = self.hi[j] - self.lo[j];
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    pub fn normalize(&self, psi: &[f64]) -> Result<Vec<f64>> {
        check_len("input normalization", self.dim(), psi.len())?;
        Ok(psi
            .iter()
            .enumerate()
            .map(|(j, v)| (v - self.lo[j]) / self.span(j))
            .collect())
    }

    pub fn denormalize(&self, u: &[f64]) -> Result<Vec<f64>> {
        check_len("input normalization", self.dim(), u.len())?;
        Ok(u.iter()
            .enumerate()
            .map(|(j, v)| self.lo[j] + v * self.span(j))
            .collect())
    }

    pub fn normalize_rows(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_len("input normalization", self.dim(), inputs.ncols())?;
        Ok(DMatrix::from_fn(inputs.nrows(), inputs.ncols(), |i, j| {
            (inputs[(i, j)] - self.lo[j]) / self.span(j)
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightGpOptions {
    pub nugget: f64,
    pub alpha: f64,
    /// Multi-start count; `None` means five per input dimension.
    pub starts: Option<usize>,
    pub start_range: (f64, f64),
    pub bounds: (f64, f64),
    pub max_iter: usize,
}

impl Default for WeightGpOptions {
    fn default() -> Self {
        Self {
            nugget: DEFAULT_JITTER,
            alpha: DEFAULT_POWEXP_ALPHA,
            starts: None,
            start_range: (-3.0, 3.0),
            bounds: (-8.0, 8.0),
            max_iter: 200,
        }
    }
}

/// Zero-mean GP for one component weight as a function of normalized inputs.
#[derive(Clone, Debug)]
pub struct WeightGp {
    pub component: usize,
    pub inputs: DMatrix<f64>,
    pub gamma: DVector<f64>,
    pub params: PowExpParams,
    pub loglik: f64,
    factor: Factor,
    coef: DVector<f64>,
}

struct Profile {
    loglik: f64,
    sigma2: f64,
    grad: Vec<f64>,
}

fn corr_with_nugget(inputs: &DMatrix<f64>, beta: &[f64], alpha: f64, nugget: f64) -> Result<DMatrix<f64>> {
    let p = PowExpParams {
        beta: beta.to_vec(),
        alpha,
        scale: 1.0,
        nugget,
    };
    let mut r = powexp_corr_matrix(inputs, &p)?;
    for i in 0..r.nrows() {
        r[(i, i)] += nugget;
    }
    Ok(r)
}

/// Profile log-likelihood in `beta` with `sigma^2` at its closed-form optimum, and its
/// gradient.
fn profile(inputs: &DMatrix<f64>, gamma: &DVector<f64>, beta: &[f64], opts: &WeightGpOptions, with_grad: bool) -> Result<Profile> {
    let m = inputs.nrows();
    let mf = m as f64;
    let r = corr_with_nugget(inputs, beta, opts.alpha, opts.nugget)?;
    let f = chol(&r, JitterPolicy::default(), "weight correlation")?;
    let a = f.solve(gamma)?;
    let sigma2 = (gamma.dot(&a) / mf).max(opts.nugget);
    let loglik = -0.5 * (mf * sigma2.ln() + f.log_det() + mf * (1.0 + (2.0 * std::f64::consts::PI).ln()));
    let mut grad = vec![0.0; beta.len()];
    if with_grad {
        let rinv = f.solve_matrix(&DMatrix::identity(m, m))?;
        for (k, g) in grad.iter_mut().enumerate() {
            let w = 10f64.powf(beta[k]) * std::f64::consts::LN_10;
            let mut quad = 0.0;
            let mut trace = 0.0;
            for j in 0..m {
                for i in 0..m {
                    if i == j {
                        continue;
                    }
                    let d = (inputs[(i, k)] - inputs[(j, k)]).abs();
                    if d == 0.0 {
                        continue;
                    }
                    let dr = -w * d.powf(opts.alpha) * (r[(i, j)]);
                    quad += a[i] * dr * a[j];
                    trace += rinv[(i, j)] * dr;
                }
            }
            *g = 0.5 * (quad / sigma2 - trace);
        }
    }
    Ok(Profile { loglik, sigma2, grad })
}

/// Projected gradient ascent with backtracking inside the box `bounds`.
fn ascend(inputs: &DMatrix<f64>, gamma: &DVector<f64>, start: Vec<f64>, opts: &WeightGpOptions) -> Option<(Vec<f64>, f64)> {
    let clamp = |v: f64| v.clamp(opts.bounds.0, opts.bounds.1);
    let mut beta: Vec<f64> = start.into_iter().map(clamp).collect();
    let mut cur = profile(inputs, gamma, &beta, opts, true).ok()?;
    let mut step = 1.0;
    for _ in 0..opts.max_iter {
        let gnorm = cur.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !(gnorm.is_finite()) || gnorm < 1e-8 {
            break;
        }
        let mut moved = false;
        while step > 1e-10 {
            let cand: Vec<f64> = beta
                .iter()
                .zip(&cur.grad)
                .map(|(b, g)| clamp(b + step * g / gnorm.max(1.0)))
                .collect();
            if cand == beta {
                break;
            }
            match profile(inputs, gamma, &cand, opts, true) {
                Ok(p) if p.loglik > cur.loglik => {
                    let gain = p.loglik - cur.loglik;
                    beta = cand;
                    cur = p;
                    moved = true;
                    step = (step * 2.0).min(4.0);
                    if gain < 1e-10 * (1.0 + cur.loglik.abs()) {
                        return Some((beta, cur.loglik));
                    }
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !moved {
            break;
        }
    }
    Some((beta, cur.loglik))
}

/// Multi-start maximum likelihood for one weight GP. `inputs` must already be normalized.
pub fn fit_weight_gp(component: usize, inputs: &DMatrix<f64>, gamma: &DVector<f64>, opts: &WeightGpOptions) -> Result<WeightGp> {
    let (m, p) = inputs.shape();
    check_len("fit_weight_gp", m, gamma.len())?;
    if m == 0 || p == 0 {
        return Err(Error::Config("weight GP needs at least one input row and column".into()));
    }
    let count = opts.starts.unwrap_or(5 * p).max(1);
    let (a, b) = opts.start_range;
    let starts: Vec<Vec<f64>> = halton(count, p)
        .into_iter()
        .map(|h| h.into_iter().map(|u| a + (b - a) * u).collect())
        .collect();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in starts {
        if let Some((beta, ll)) = ascend(inputs, gamma, s, opts) {
            if ll.is_finite() && best.as_ref().is_none_or(|(_, b)| ll > *b) {
                best = Some((beta, ll));
            }
        }
    }
    let (beta, loglik) = best.ok_or_else(|| Error::FitFailure {
        reason: format!("every start failed for weight component {component}"),
        best: vec![],
    })?;
    let sigma2 = profile(inputs, gamma, &beta, opts, false)?.sigma2;
    let params = PowExpParams::new(beta, opts.alpha, sigma2, opts.nugget)?;
    let mut gp = WeightGp::from_params(component, inputs.clone(), gamma.clone(), params)?;
    gp.loglik = loglik;
    Ok(gp)
}

impl WeightGp {
    /// Rebuilds the cached factor from stored hyperparameters.
    pub fn from_params(component: usize, inputs: DMatrix<f64>, gamma: DVector<f64>, params: PowExpParams) -> Result<Self> {
        check_len("weight GP", inputs.nrows(), gamma.len())?;
        params.validate()?;
        let r = corr_with_nugget(&inputs, &params.beta, params.alpha, params.nugget)?;
        let factor = chol(&r, JitterPolicy::default(), "weight correlation")?;
        let coef = factor.solve(&gamma)?;
        Ok(Self {
            component,
            inputs,
            gamma,
            params,
            loglik: f64::NAN,
            factor,
            coef,
        })
    }

    pub fn factor(&self) -> &Factor {
        &self.factor
    }

    /// Correlations between `psi` (normalized) and each training row.
    pub fn cross_corr(&self, psi: &[f64]) -> Result<DVector<f64>> {
        check_len("predict_weight", self.inputs.ncols(), psi.len())?;
        Ok(DVector::from_iterator(
            self.inputs.nrows(),
            self.inputs.row_iter().map(|row| {
                let r: Vec<f64> = row.iter().copied().collect();
                powexp_raw(&r, psi, &self.params.beta, self.params.alpha)
            }),
        ))
    }
}

/// `r(psi)^T R^{-1} gamma` for normalized `psi`.
pub fn predict_weight(model: &WeightGp, psi: &[f64]) -> Result<f64> {
    Ok(model.cross_corr(psi)?.dot(&model.coef))
}

/// `mean + sum_i gamma_i(psi) B_i` for normalized `psi`.
pub fn predict_spectrum(basis: &PCBasis, models: &[WeightGp], psi: &[f64]) -> Result<DVector<f64>> {
    check_len("predict_spectrum (components)", basis.p_eta, models.len())?;
    let w = DVector::from_iterator(
        models.len(),
        models.iter().map(|g| predict_weight(g, psi)).collect::<Result<Vec<_>>>()?,
    );
    basis.reconstruct(&w)
}

/// Basis, input normalization and fitted weight GPs.
#[derive(Clone, Debug)]
pub struct PCEmulator {
    /// Output grid the curves live on (labels only).
    pub grid: Vec<f64>,
    pub normalization: InputNormalization,
    pub training_inputs: DMatrix<f64>,
    pub basis: PCBasis,
    pub gps: Vec<WeightGp>,
}

impl PCEmulator {
    /// `curves` holds one training curve per row, `inputs` the matching parameter rows.
    pub fn fit(grid: Vec<f64>, curves: &DMatrix<f64>, inputs: &DMatrix<f64>, p_eta: usize, opts: &WeightGpOptions) -> Result<Self> {
        check_len("emulator (curve length)", grid.len(), curves.ncols())?;
        check_len("emulator (input rows)", curves.nrows(), inputs.nrows())?;
        Self::from_basis(grid, build_basis(curves, p_eta)?, inputs, opts)
    }

    /// Fits weight GPs for an existing basis; `inputs` rows follow the basis weight rows.
    pub fn from_basis(grid: Vec<f64>, basis: PCBasis, inputs: &DMatrix<f64>, opts: &WeightGpOptions) -> Result<Self> {
        check_len("emulator (curve length)", grid.len(), basis.n())?;
        check_len("emulator (input rows)", basis.m(), inputs.nrows())?;
        let normalization = InputNormalization::fit(inputs)?;
        let unit = normalization.normalize_rows(inputs)?;
        let gps = (0..basis.p_eta)
            .into_par_iter()
            .map(|i| fit_weight_gp(i, &unit, &basis.weights.column(i).into_owned(), opts))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid,
            normalization,
            training_inputs: inputs.clone(),
            basis,
            gps,
        })
    }

    /// Prediction at raw (unnormalized) parameters.
    pub fn predict(&self, psi: &[f64]) -> Result<DVector<f64>> {
        let u = self.normalization.normalize(psi)?;
        predict_spectrum(&self.basis, &self.gps, &u)
    }

    pub fn to_artifact(&self) -> EmulatorArtifact {
        EmulatorArtifact {
            schema: EMULATOR_SCHEMA.to_string(),
            grid: self.grid.clone(),
            mean: self.basis.mean.iter().copied().collect(),
            basis: self.basis.basis.column_iter().map(|c| c.iter().copied().collect()).collect(),
            singular_values: self.basis.singular_values.clone(),
            weights: self.basis.weights.row_iter().map(|r| r.iter().copied().collect()).collect(),
            normalization: self.normalization.clone(),
            training_inputs: self.training_inputs.row_iter().map(|r| r.iter().copied().collect()).collect(),
            components: self.gps.iter().map(|g| g.params.clone()).collect(),
        }
    }

    pub fn from_artifact(a: &EmulatorArtifact) -> Result<Self> {
        crate::artifact::check_schema(&a.schema, EMULATOR_SCHEMA)?;
        let n = a.grid.len();
        let m = a.training_inputs.len();
        let p_eta = a.basis.len();
        check_len("emulator artifact (mean)", n, a.mean.len())?;
        check_len("emulator artifact (components)", p_eta, a.components.len())?;
        check_len("emulator artifact (weights)", m, a.weights.len())?;
        let rows_ok = a.basis.iter().all(|c| c.len() == n)
            && a.weights.iter().all(|r| r.len() == p_eta)
            && a.training_inputs.iter().all(|r| r.len() == a.normalization.dim());
        if !rows_ok {
            return Err(Error::Parse("emulator artifact has ragged arrays".into()));
        }
        let basis = PCBasis {
            mean: DVector::from_vec(a.mean.clone()),
            basis: DMatrix::from_fn(n, p_eta, |i, j| a.basis[j][i]),
            weights: DMatrix::from_fn(m, p_eta, |i, j| a.weights[i][j]),
            singular_values: a.singular_values.clone(),
            p_eta,
        };
        let p = a.normalization.dim();
        let training_inputs = DMatrix::from_fn(m, p, |i, j| a.training_inputs[i][j]);
        let unit = a.normalization.normalize_rows(&training_inputs)?;
        let gps = a
            .components
            .iter()
            .enumerate()
            .map(|(i, params)| WeightGp::from_params(i, unit.clone(), basis.weights.column(i).into_owned(), params.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid: a.grid.clone(),
            normalization: a.normalization.clone(),
            training_inputs,
            basis,
            gps,
        })
    }
}

/// Serialized emulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmulatorArtifact {
    pub schema: String,
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    /// Basis columns.
    pub basis: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    /// Training weights, one row per training input.
    pub weights: Vec<Vec<f64>>,
    pub normalization: InputNormalization,
    pub training_inputs: Vec<Vec<f64>>,
    pub components: Vec<PowExpParams>,
}
