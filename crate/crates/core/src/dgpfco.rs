//! Hierarchical deep GP for correlated functional outputs.
//!
//! ```text
//! ybar | S      ~ N(S, Sigma_eps)
//! S    | W      ~ N(mu_S, K(W; theta_S))
//! W             = warp(z),  z ~ N(mu_W, K(X; theta_W))
//! ```
//!
//! `S` is integrated out so the chain runs over `(z, theta_W, theta_S)` only: elliptical
//! slice sampling for `z`, log-normal random-walk Metropolis for each lengthscale.
//! Kernels are evaluated on inputs affinely rescaled to `[0, 1]`; warps are reported in
//! the original input units.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::gaussmath::{
    chol, correlated_normal, symmetrize, zero_mean_logpdf, Factor, GaussianDist, JitterPolicy,
};
use crate::kernelcov::{matern52_matrix, MaternParams, DEFAULT_JITTER};
use crate::rng::{named_stream, StreamRng};
use crate::spectra::WeightedSpectrum;

/// Bracket shrinks after which an elliptical slice step gives up and keeps its state.
pub const ESS_MAX_SHRINKS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        let p = Self { shape, rate };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shape > 0.0 && self.rate > 0.0) {
            return Err(Error::InvalidParameter {
                name: "gamma prior",
                reason: format!("shape and rate must be positive, got ({}, {})", self.shape, self.rate),
            });
        }
        Ok(())
    }

    /// Log density up to an additive constant.
    pub fn log_density(&self, theta: f64) -> f64 {
        if theta > 0.0 {
            (self.shape - 1.0) * theta.ln() - self.rate * theta
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub theta_s_prior: GammaPrior,
    pub theta_w_prior: GammaPrior,
    /// Standard deviation of the log-scale random-walk proposal.
    pub proposal_scale: f64,
    pub jitter: f64,
    pub prior_mean_s: Option<Vec<f64>>,
    pub prior_mean_w: Option<Vec<f64>>,
    pub seed: u64,
    pub draws_per_sample: usize,
    pub init_theta_s: f64,
    pub init_theta_w: f64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            burn_in: 5_000,
            thin: 5,
            theta_s_prior: GammaPrior { shape: 1.5, rate: 1.0 },
            theta_w_prior: GammaPrior { shape: 1.5, rate: 4.0 },
            proposal_scale: 0.3,
            jitter: DEFAULT_JITTER,
            prior_mean_s: None,
            prior_mean_w: None,
            seed: 0,
            draws_per_sample: 1,
            init_theta_s: 0.1,
            init_theta_w: 0.1,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "burn-in ({}) must be smaller than the iteration count ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thinning stride must be at least 1".into()));
        }
        if self.draws_per_sample == 0 {
            return Err(Error::Config("draws per sample must be at least 1".into()));
        }
        self.theta_s_prior.validate()?;
        self.theta_w_prior.validate()?;
        if !(self.proposal_scale >= 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::Config("proposal scale and jitter must be nonnegative".into()));
        }
        if !(self.init_theta_s > 0.0 && self.init_theta_w > 0.0) {
            return Err(Error::Config("initial lengthscales must be positive".into()));
        }
        Ok(())
    }

    /// Number of samples kept after burn-in and thinning.
    pub fn retained(&self) -> usize {
        if self.burn_in >= self.iterations || self.thin == 0 {
            return 0;
        }
        (self.iterations - self.burn_in).div_ceil(self.thin)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpSample {
    pub z: Vec<f64>,
    /// Warped inputs in the original units.
    pub w: Vec<f64>,
    pub theta_s: f64,
    pub theta_w: f64,
    pub loglik: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub samples: Vec<WarpSample>,
    pub accept_rate_theta_s: f64,
    pub accept_rate_theta_w: f64,
    pub mean_shrinks: f64,
    pub guard_trips: usize,
}

#[inline]
fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

/// Nondecreasing warp of `x`: softplus rates, cumulative trapezoid integration over `x`,
/// then an affine map onto `[x_1, x_n]`.
pub fn monotone_warp(z: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    assert_eq!(z.len(), n, "latent draw and inputs must have equal length");
    if n < 2 {
        return x.to_vec();
    }
    let rates: Vec<f64> = z.iter().map(|&v| softplus(v)).collect();
    let mut cum = Vec::with_capacity(n);
    cum.push(0.0);
    for i in 1..n {
        let step = 0.5 * (x[i] - x[i - 1]) * (rates[i] + rates[i - 1]);
        cum.push(cum[i - 1] + step);
    }
    let total = cum[n - 1];
    if !(total > 0.0 && total.is_finite()) {
        return x.to_vec();
    }
    let (lo, span) = (x[0], x[n - 1] - x[0]);
    let mut w: Vec<f64> = cum.iter().map(|c| lo + span * (c / total)).collect();
    w[n - 1] = x[n - 1];
    w
}

fn unit_scale(x: &[f64]) -> Vec<f64> {
    let lo = x[0];
    let span = x[x.len() - 1] - lo;
    x.iter().map(|v| (v - lo) / span).collect()
}

/// `Sigma_S(w) + Sigma_eps` with unit kernel scale.
fn marginal_cov(w: &[f64], theta_s: f64, sigma_eps: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    let params = MaternParams::new(theta_s, 1.0, jitter)?;
    Ok(matern52_matrix(w, &params)? + sigma_eps)
}

/// Log density of `ybar ~ N(mu_S, Sigma_S(w) + Sigma_eps)`: the likelihood with the latent
/// curve integrated out. The kernel is applied to `w` as given.
pub fn integrated_loglik(
    ybar: &DVector<f64>,
    w: &[f64],
    theta_s: f64,
    sigma_eps: &DMatrix<f64>,
    mu_s: Option<&DVector<f64>>,
    jitter: f64,
) -> Result<f64> {
    let n = ybar.len();
    check_len("integrated_loglik (warp)", n, w.len())?;
    check_len("integrated_loglik (error covariance)", n, sigma_eps.nrows())?;
    let cov = marginal_cov(w, theta_s, sigma_eps, jitter)?;
    let f = chol(&cov, JitterPolicy::default(), "marginal covariance")?;
    let resid = match mu_s {
        Some(mu) => {
            check_len("integrated_loglik (prior mean)", n, mu.len())?;
            ybar - mu
        }
        None => ybar.clone(),
    };
    zero_mean_logpdf(&resid, &f)
}

#[derive(Clone, Debug)]
pub struct EssStep {
    pub state: DVector<f64>,
    pub loglik: f64,
    pub shrinks: usize,
    pub guard_tripped: bool,
}

/// One elliptical slice sampling transition for a zero-mean Gaussian prior with factor
/// `prior`. Likelihood errors count as `-inf`.
pub fn ess_update<R, F>(
    current: &DVector<f64>,
    current_loglik: f64,
    prior: &Factor,
    mut loglik: F,
    rng: &mut R,
) -> EssStep
where
    R: Rng + ?Sized,
    F: FnMut(&DVector<f64>) -> Result<f64>,
{
    let nu = correlated_normal(prior, rng);
    let u: f64 = rng.random();
    let threshold = current_loglik + u.ln();
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut angle = rng.random::<f64>() * two_pi;
    let (mut lo, mut hi) = (angle - two_pi, angle);
    for shrinks in 0..ESS_MAX_SHRINKS {
        let proposal = current * angle.cos() + &nu * angle.sin();
        let ll = loglik(&proposal).unwrap_or(f64::NEG_INFINITY);
        if ll.is_finite() && ll > threshold {
            return EssStep {
                state: proposal,
                loglik: ll,
                shrinks,
                guard_tripped: false,
            };
        }
        if angle < 0.0 {
            lo = angle;
        } else {
            hi = angle;
        }
        angle = lo + rng.random::<f64>() * (hi - lo);
    }
    EssStep {
        state: current.clone(),
        loglik: current_loglik,
        shrinks: ESS_MAX_SHRINKS,
        guard_tripped: true,
    }
}

/// Log acceptance ratio for the log-normal random walk `theta* = theta exp(s zeta)`,
/// including the Jacobian term `log theta* - log theta`.
pub fn mh_log_accept_ratio(
    theta: f64,
    theta_star: f64,
    loglik: f64,
    loglik_star: f64,
    prior: &GammaPrior,
) -> f64 {
    (loglik_star - loglik) + (prior.log_density(theta_star) - prior.log_density(theta))
        + (theta_star.ln() - theta.ln())
}

#[derive(Clone, Copy, Debug)]
pub struct MhStep {
    pub theta: f64,
    pub loglik: f64,
    pub accepted: bool,
}

pub fn mh_update_theta<R, F>(
    theta: f64,
    current_loglik: f64,
    prior: &GammaPrior,
    proposal_scale: f64,
    mut loglik: F,
    rng: &mut R,
) -> MhStep
where
    R: Rng + ?Sized,
    F: FnMut(f64) -> Result<f64>,
{
    let zeta: f64 = rng.sample(StandardNormal);
    let u: f64 = rng.random();
    let stay = MhStep {
        theta,
        loglik: current_loglik,
        accepted: false,
    };
    if proposal_scale == 0.0 {
        return stay;
    }
    let theta_star = theta * (proposal_scale * zeta).exp();
    if !(theta_star > 0.0 && theta_star.is_finite()) {
        return stay;
    }
    let ll_star = match loglik(theta_star) {
        Ok(v) if v.is_finite() => v,
        _ => return stay,
    };
    let ratio = mh_log_accept_ratio(theta, theta_star, current_loglik, ll_star, prior);
    if u.ln() < ratio {
        MhStep {
            theta: theta_star,
            loglik: ll_star,
            accepted: true,
        }
    } else {
        stay
    }
}

struct Model<'a> {
    x: &'a [f64],
    u: Vec<f64>,
    ybar: &'a DVector<f64>,
    sigma_eps: &'a DMatrix<f64>,
    mu_s: Option<DVector<f64>>,
    mu_w: DVector<f64>,
    jitter: f64,
}

impl Model<'_> {
    fn warp(&self, dev: &DVector<f64>) -> Vec<f64> {
        let z = &self.mu_w + dev;
        monotone_warp(z.as_slice(), self.x)
    }

    fn loglik(&self, w: &[f64], theta_s: f64) -> Result<f64> {
        integrated_loglik(
            self.ybar,
            &unit_scale(w),
            theta_s,
            self.sigma_eps,
            self.mu_s.as_ref(),
            self.jitter,
        )
    }

    fn warp_prior(&self, theta_w: f64) -> Result<Factor> {
        let k = matern52_matrix(&self.u, &MaternParams::new(theta_w, 1.0, self.jitter)?)?;
        chol(&k, JitterPolicy::default(), "warp prior covariance")
    }
}

fn optional_vec(name: &'static str, v: &Option<Vec<f64>>, n: usize) -> Result<Option<DVector<f64>>> {
    match v {
        None => Ok(None),
        Some(v) => {
            check_len(name, n, v.len())?;
            Ok(Some(DVector::from_column_slice(v)))
        }
    }
}

/// Runs the Gibbs sampler over `(z, theta_W, theta_S)` and returns the retained samples.
pub fn fit(ws: &WeightedSpectrum, cfg: &DgpConfig) -> Result<Chain> {
    cfg.validate()?;
    if cfg.retained() == 0 {
        return Err(Error::Config("no post-burn-in samples requested".into()));
    }
    let n = ws.len();
    if n < 2 {
        return Err(Error::Config("need at least two inputs".into()));
    }
    if ws.x.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::Domain("inputs must be strictly increasing".into()));
    }
    let model = Model {
        x: &ws.x,
        u: unit_scale(&ws.x),
        ybar: &ws.ybar,
        sigma_eps: &ws.sigma_eps,
        mu_s: optional_vec("prior mean of S", &cfg.prior_mean_s, n)?,
        mu_w: optional_vec("prior mean of W", &cfg.prior_mean_w, n)?.unwrap_or_else(|| DVector::zeros(n)),
        jitter: cfg.jitter,
    };
    let abort = |iteration: usize, e: Error| Error::ChainAborted {
        iteration,
        cause: Box::new(e),
    };

    let mut rng: StreamRng = named_stream(cfg.seed, &["dgp", "chain"]);
    let mut theta_s = cfg.init_theta_s;
    let mut theta_w = cfg.init_theta_w;
    let mut dev = DVector::zeros(n);
    let mut w = model.warp(&dev);
    let mut ll = model.loglik(&w, theta_s).map_err(|e| abort(0, e))?;
    let mut prior_factor = model.warp_prior(theta_w).map_err(|e| abort(0, e))?;

    let mut samples = Vec::with_capacity(cfg.retained());
    let (mut acc_s, mut acc_w, mut shrinks, mut trips, mut consecutive_trips) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for it in 0..cfg.iterations {
        let step = ess_update(
            &dev,
            ll,
            &prior_factor,
            |cand| model.loglik(&model.warp(cand), theta_s),
            &mut rng,
        );
        shrinks += step.shrinks;
        if step.guard_tripped {
            trips += 1;
            consecutive_trips += 1;
            if consecutive_trips > 50 {
                return Err(abort(
                    it,
                    Error::Singular {
                        role: "marginal covariance (every slice proposal failed)".into(),
                        jitter: cfg.jitter,
                    },
                ));
            }
        } else {
            consecutive_trips = 0;
        }
        dev = step.state;
        ll = step.loglik;
        w = model.warp(&dev);
        let prior_ll = zero_mean_logpdf(&dev, &prior_factor).map_err(|e| abort(it, e))?;

        // theta_W only enters through the prior density of the latent draw
        let mut proposed_factor = None;
        let mh_w = mh_update_theta(
            theta_w,
            prior_ll,
            &cfg.theta_w_prior,
            cfg.proposal_scale,
            |t| {
                let f = model.warp_prior(t)?;
                let v = zero_mean_logpdf(&dev, &f)?;
                proposed_factor = Some(f);
                Ok(v)
            },
            &mut rng,
        );
        if mh_w.accepted {
            theta_w = mh_w.theta;
            prior_factor = proposed_factor.take().expect("accepted proposal was factored");
            acc_w += 1;
        }

        let mh_s = mh_update_theta(
            theta_s,
            ll,
            &cfg.theta_s_prior,
            cfg.proposal_scale,
            |t| model.loglik(&w, t),
            &mut rng,
        );
        if mh_s.accepted {
            theta_s = mh_s.theta;
            ll = mh_s.loglik;
            acc_s += 1;
        }

        if it >= cfg.burn_in && (it - cfg.burn_in) % cfg.thin == 0 {
            samples.push(WarpSample {
                z: (&model.mu_w + &dev).iter().copied().collect(),
                w: w.clone(),
                theta_s,
                theta_w,
                loglik: ll,
            });
        }
    }
    let iters = cfg.iterations as f64;
    Ok(Chain {
        samples,
        accept_rate_theta_s: acc_s as f64 / iters,
        accept_rate_theta_w: acc_w as f64 / iters,
        mean_shrinks: shrinks as f64 / iters,
        guard_trips: trips,
    })
}

/// Closed-form `S | ybar` for one warp: returns `(m, C)` with
/// `C = (Sigma_S^{-1} + Sigma_eps^{-1})^{-1}` and `m = C (Sigma_eps^{-1} ybar + Sigma_S^{-1} mu)`.
///
/// Evaluated through a single factorization of `Sigma_S + Sigma_eps`, with `G = Sigma_S
/// (Sigma_S + Sigma_eps)^{-1}`: `m = mu + G (ybar - mu)` and the covariance in the
/// symmetric form `(I - G) Sigma_S (I - G)^T + G Sigma_eps G^T`.
pub fn conditional_posterior(
    ybar: &DVector<f64>,
    sigma_s: &DMatrix<f64>,
    sigma_eps: &DMatrix<f64>,
    mu_s: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = ybar.len();
    check_len("conditional_posterior (prior covariance)", n, sigma_s.nrows())?;
    check_len("conditional_posterior (error covariance)", n, sigma_eps.nrows())?;
    let mut total = sigma_s + sigma_eps;
    symmetrize(&mut total);
    let f = chol(&total, JitterPolicy::default(), "marginal covariance")?;
    let gain = f.solve_matrix(sigma_s)?.transpose();
    let zero = DVector::zeros(n);
    let mu = mu_s.unwrap_or(&zero);
    check_len("conditional_posterior (prior mean)", n, mu.len())?;
    let mean = mu + &gain * (ybar - mu);
    let resid = DMatrix::identity(n, n) - &gain;
    let mut cov = &resid * sigma_s * resid.transpose() + &gain * sigma_eps * gain.transpose();
    symmetrize(&mut cov);
    Ok((mean, cov))
}

/// Pooled posterior of the latent curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSpectrum {
    pub retained: usize,
    pub skipped: usize,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draws: Option<Vec<Vec<f64>>>,
    /// Moment-matched Gaussian of the mixture over retained samples; not serialized.
    #[serde(skip)]
    pub predictive: Option<(DVector<f64>, DMatrix<f64>)>,
}

impl PosteriorSpectrum {
    pub fn predictive_dist(&self) -> Result<GaussianDist> {
        let (m, c) = self
            .predictive
            .clone()
            .ok_or_else(|| Error::Config("posterior has no predictive moments".into()))?;
        GaussianDist::new(m, c, JitterPolicy::default())
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Draws `S` from each retained sample's closed-form conditional and pools them.
pub fn posterior_spectrum(
    chain: &Chain,
    ws: &WeightedSpectrum,
    cfg: &DgpConfig,
    draws_per_sample: usize,
    keep_draws: bool,
) -> Result<PosteriorSpectrum> {
    let t_count = chain.samples.len();
    if t_count == 0 {
        return Err(Error::Config("posterior requested from an empty chain".into()));
    }
    if draws_per_sample == 0 {
        return Err(Error::Config("draws per sample must be at least 1".into()));
    }
    let n = ws.len();
    let mu_s = optional_vec("prior mean of S", &cfg.prior_mean_s, n)?;
    let mut rng = named_stream(cfg.seed, &["dgp", "posterior"]);

    let mut draws: Vec<DVector<f64>> = Vec::with_capacity(t_count * draws_per_sample);
    let mut m_sum = DVector::zeros(n);
    let mut second = DMatrix::zeros(n, n);
    let mut skipped = 0usize;
    let max_skips = t_count / 100;
    for (t, s) in chain.samples.iter().enumerate() {
        let attempt = (|| -> Result<()> {
            let sigma_s = matern52_matrix(&unit_scale(&s.w), &MaternParams::new(s.theta_s, 1.0, cfg.jitter)?)?;
            let (m, c) = conditional_posterior(&ws.ybar, &sigma_s, &ws.sigma_eps, mu_s.as_ref())?;
            let f = chol(&c, JitterPolicy::default(), "posterior covariance")?;
            for _ in 0..draws_per_sample {
                draws.push(&m + correlated_normal(&f, &mut rng));
            }
            second += &c + &m * m.transpose();
            m_sum += m;
            Ok(())
        })();
        if let Err(e) = attempt {
            skipped += 1;
            log::warn!("skipping retained sample {t}: {e}");
            if skipped > max_skips {
                return Err(Error::ChainAborted {
                    iteration: t,
                    cause: Box::new(e),
                });
            }
        }
    }
    let used = (t_count - skipped) as f64;
    let pmean = &m_sum / used;
    let mut pcov = &second / used - &pmean * pmean.transpose();
    symmetrize(&mut pcov);

    let total = draws.len();
    if total < 100 {
        log::warn!("credible bands computed from only {total} draws");
    }
    let mut mean = vec![0.0; n];
    let mut lower = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut column = vec![0.0; total];
    for i in 0..n {
        for (slot, d) in column.iter_mut().zip(&draws) {
            *slot = d[i];
        }
        mean[i] = column.iter().sum::<f64>() / total as f64;
        column.sort_by(|a, b| a.total_cmp(b));
        lower[i] = quantile_sorted(&column, 0.025);
        upper[i] = quantile_sorted(&column, 0.975);
    }
    Ok(PosteriorSpectrum {
        retained: t_count,
        skipped,
        mean,
        lower,
        upper,
        draws: keep_draws.then(|| draws.iter().map(|d| d.iter().copied().collect()).collect()),
        predictive: Some((pmean, pcov)),
    })
}
