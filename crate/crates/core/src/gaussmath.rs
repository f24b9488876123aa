//! Gaussian linear algebra: Cholesky with jitter escalation, log densities, sampling,
//! block conditioning and scoring rules.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::kernelcov::{DEFAULT_JITTER, MAX_JITTER};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// How much diagonal jitter `chol` may add before giving up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum JitterPolicy {
    /// Factor the matrix as given; zero pivots are tolerated only for sampling.
    None,
    /// Always add exactly this much.
    Fixed(f64),
    /// Try without jitter, then `floor`, `10 * floor`, ... up to `max`.
    Escalate { floor: f64, max: f64 },
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy::Escalate {
            floor: DEFAULT_JITTER,
            max: MAX_JITTER,
        }
    }
}

/// Lower-triangular factor `L` with `L L^T = A + jitter I`.
#[derive(Clone, Debug)]
pub struct Factor {
    l: DMatrix<f64>,
    jitter: f64,
    /// False when a zero pivot was accepted (positive semidefinite input).
    full_rank: bool,
}

impl Factor {
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn is_full_rank(&self) -> bool {
        self.full_rank
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    fn require_full_rank(&self) -> Result<()> {
        if self.full_rank {
            Ok(())
        } else {
            Err(Error::Singular {
                role: "rank-deficient".into(),
                jitter: self.jitter,
            })
        }
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        self.require_full_rank()?;
        check_len("triangular solve", self.dim(), b.len())?;
        Ok(self
            .l
            .solve_lower_triangular(b)
            .expect("full-rank factor has nonzero diagonal"))
    }

    /// Solves `(L L^T) x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let y = self.solve_lower(b)?;
        Ok(self
            .l
            .tr_solve_lower_triangular(&y)
            .expect("full-rank factor has nonzero diagonal"))
    }

    /// Solves `(L L^T) X = B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.require_full_rank()?;
        check_len("matrix solve", self.dim(), b.nrows())?;
        let y = self
            .l
            .solve_lower_triangular(b)
            .expect("full-rank factor has nonzero diagonal");
        Ok(self
            .l
            .tr_solve_lower_triangular(&y)
            .expect("full-rank factor has nonzero diagonal"))
    }

    /// Squared Mahalanobis norm `b^T (L L^T)^{-1} b`.
    pub fn quad_form(&self, b: &DVector<f64>) -> Result<f64> {
        Ok(self.solve_lower(b)?.norm_squared())
    }
}

/// Cholesky factorization under `policy`. `role` names the matrix in error messages.
pub fn chol(cov: &DMatrix<f64>, policy: JitterPolicy, role: &str) -> Result<Factor> {
    if !cov.is_square() {
        return Err(Error::Dimension {
            context: "chol (square input)",
            expected: cov.nrows(),
            got: cov.ncols(),
        });
    }
    let attempts: Vec<f64> = match policy {
        JitterPolicy::None => vec![0.0],
        JitterPolicy::Fixed(j) => vec![j],
        JitterPolicy::Escalate { floor, max } => {
            let mut v = vec![0.0];
            let mut j = floor;
            while j <= max * (1.0 + 1e-12) {
                v.push(j);
                j *= 10.0;
            }
            v
        }
    };
    let mut last = 0.0;
    for &j in &attempts {
        last = j;
        let mut a = cov.clone();
        if j > 0.0 {
            for i in 0..a.nrows() {
                a[(i, i)] += j;
            }
        }
        if let Some(c) = a.cholesky() {
            let l = c.unpack();
            if l.diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Ok(Factor {
                    l,
                    jitter: j,
                    full_rank: true,
                });
            }
        }
    }
    if policy == JitterPolicy::None {
        if let Some(l) = semidefinite_cholesky(cov) {
            return Ok(Factor {
                l,
                jitter: 0.0,
                full_rank: false,
            });
        }
    }
    Err(Error::Singular {
        role: role.to_string(),
        jitter: last,
    })
}

/// Cholesky that accepts zero pivots whose trailing column is also zero.
fn semidefinite_cholesky(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let scale = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let tol = 1e-12 * scale;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -tol {
            return None;
        }
        if d <= tol {
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if s.abs() > tol.sqrt() {
                    return None;
                }
            }
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

/// Symmetrizes in place: `A <- (A + A^T) / 2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

#[derive(Clone, Debug)]
pub struct GaussianDist {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    factor: Factor,
}

impl GaussianDist {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, policy: JitterPolicy) -> Result<Self> {
        check_len("gaussian (covariance rows)", mean.len(), cov.nrows())?;
        check_len("gaussian (covariance cols)", mean.len(), cov.ncols())?;
        let asym = (&cov - cov.transpose()).amax();
        if asym > 1e-10 * cov.amax().max(f64::MIN_POSITIVE) {
            return Err(Error::InvalidParameter {
                name: "cov",
                reason: format!("not symmetric (max asymmetry {asym:e})"),
            });
        }
        let factor = chol(&cov, policy, "gaussian covariance")?;
        Ok(Self { mean, cov, factor })
    }

    pub fn with_factor(mean: DVector<f64>, cov: DMatrix<f64>, factor: Factor) -> Result<Self> {
        check_len("gaussian (factor)", mean.len(), factor.dim())?;
        Ok(Self { mean, cov, factor })
    }

    pub fn standard(n: usize) -> Self {
        Self::new(DVector::zeros(n), DMatrix::identity(n, n), JitterPolicy::None)
            .expect("identity is positive definite")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn factor(&self) -> &Factor {
        &self.factor
    }
}

/// Multivariate normal log density evaluated through the cached factor.
pub fn mvn_logpdf(y: &DVector<f64>, dist: &GaussianDist) -> Result<f64> {
    check_len("mvn_logpdf", dist.dim(), y.len())?;
    let resid = y - dist.mean();
    let quad = dist.factor.quad_form(&resid)?;
    Ok(-0.5 * (quad + dist.factor.log_det() + dist.dim() as f64 * LN_2PI))
}

/// Log density of `N(0, L L^T)` at `y`, given only the factor.
pub fn zero_mean_logpdf(y: &DVector<f64>, factor: &Factor) -> Result<f64> {
    let quad = factor.quad_form(y)?;
    Ok(-0.5 * (quad + factor.log_det() + y.len() as f64 * LN_2PI))
}

/// Draws `mean + L z`, `z ~ N(0, I)`.
pub fn mvn_sample<R: Rng + ?Sized>(
    dist: &GaussianDist,
    rng: &mut R,
    count: usize,
) -> Vec<DVector<f64>> {
    (0..count)
        .map(|_| dist.mean() + correlated_normal(dist.factor(), rng))
        .collect()
}

/// `L z` with `z` standard normal.
pub fn correlated_normal<R: Rng + ?Sized>(factor: &Factor, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_iterator(
        factor.dim(),
        (0..factor.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)),
    );
    factor.l() * z
}

/// Distribution of the leading block of a joint Gaussian given the trailing block.
///
/// `observed` fixes the last `observed.len()` coordinates of the joint.
pub fn condition_joint(
    joint_mean: &DVector<f64>,
    joint_cov: &DMatrix<f64>,
    observed: &DVector<f64>,
) -> Result<GaussianDist> {
    let total = joint_mean.len();
    check_len("condition_joint (covariance)", total, joint_cov.nrows())?;
    check_len("condition_joint (covariance)", total, joint_cov.ncols())?;
    if observed.len() >= total {
        return Err(Error::Dimension {
            context: "condition_joint (observed block)",
            expected: total - 1,
            got: observed.len(),
        });
    }
    let n_obs = observed.len();
    let n_lat = total - n_obs;
    let mu_a = joint_mean.rows(0, n_lat).into_owned();
    let mu_b = joint_mean.rows(n_lat, n_obs).into_owned();
    let s_aa = joint_cov.view((0, 0), (n_lat, n_lat)).into_owned();
    let s_ab = joint_cov.view((0, n_lat), (n_lat, n_obs)).into_owned();
    let s_bb = joint_cov.view((n_lat, n_lat), (n_obs, n_obs)).into_owned();

    let fb = chol(&s_bb, JitterPolicy::None, "observed-block covariance")?;
    fb.require_full_rank()?;
    let gain_t = fb.solve_matrix(&s_ab.transpose())?; // S_bb^{-1} S_ba
    let mean = mu_a + gain_t.transpose() * (observed - mu_b);
    let mut cov = s_aa - &s_ab * &gain_t;
    symmetrize(&mut cov);
    let factor = chol(&cov, JitterPolicy::default(), "conditional covariance")
        .or_else(|_| chol(&cov, JitterPolicy::None, "conditional covariance"))?;
    GaussianDist::with_factor(mean, cov, factor)
}

/// Negative Gaussian log predictive density; lower is better.
pub fn log_score(y_true: &DVector<f64>, pred: &GaussianDist) -> Result<f64> {
    Ok(-mvn_logpdf(y_true, pred)?)
}

pub fn mse(a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    check_len("mse", a.len(), b.len())?;
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub log_score: f64,
    pub mse: f64,
}

impl ScoreReport {
    pub fn evaluate(truth: &DVector<f64>, pred: &GaussianDist) -> Result<Self> {
        Ok(Self {
            log_score: log_score(truth, pred)?,
            mse: mse(truth, pred.mean())?,
        })
    }
}
