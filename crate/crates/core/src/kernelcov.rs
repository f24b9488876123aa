//! Kernel evaluations and covariance-matrix construction.
//!
//! The Matérn-5/2 kernel takes the *squared* input distance `d = |a-b|^2` and a lengthscale
//! `theta` in the same units, with `r = sqrt(d / theta)`:
//! `K(d, theta) = (1 + sqrt(5) r + 5 r^2 / 3) exp(-sqrt(5) r)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub const DEFAULT_JITTER: f64 = 1e-8;
pub const MAX_JITTER: f64 = 1e-4;
pub const DEFAULT_POWEXP_ALPHA: f64 = 1.95;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaternParams {
    /// Lengthscale in squared-input-distance units.
    pub lengthscale: f64,
    /// Output variance.
    pub scale: f64,
    /// Added to the diagonal.
    pub jitter: f64,
}

impl MaternParams {
    pub fn new(lengthscale: f64, scale: f64, jitter: f64) -> Result<Self> {
        let p = Self {
            lengthscale,
            scale,
            jitter,
        };
        p.validate()?;
        Ok(p)
    }

    /// Unit-scale kernel with the default jitter.
    pub fn unit(lengthscale: f64) -> Self {
        Self {
            lengthscale,
            scale: 1.0,
            jitter: DEFAULT_JITTER,
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("lengthscale", self.lengthscale)?;
        positive("scale", self.scale)?;
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "jitter",
                reason: format!("must be finite and nonnegative, got {}", self.jitter),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowExpParams {
    /// log10 inverse lengthscales, one per input dimension.
    pub beta: Vec<f64>,
    pub alpha: f64,
    pub scale: f64,
    pub nugget: f64,
}

impl PowExpParams {
    pub fn new(beta: Vec<f64>, alpha: f64, scale: f64, nugget: f64) -> Result<Self> {
        let p = Self {
            beta,
            alpha,
            scale,
            nugget,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 2.0) {
            return Err(Error::InvalidParameter {
                name: "alpha",
                reason: format!("must lie in (0, 2], got {}", self.alpha),
            });
        }
        positive("scale", self.scale)?;
        if !(self.nugget >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "nugget",
                reason: format!("must be nonnegative, got {}", self.nugget),
            });
        }
        if self.beta.iter().any(|b| b.is_nan()) {
            return Err(Error::InvalidParameter {
                name: "beta",
                reason: "contains NaN".into(),
            });
        }
        Ok(())
    }
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            reason: format!("must be finite and positive, got {v}"),
        })
    }
}

#[inline]
fn flush(v: f64) -> f64 {
    if v < f64::MIN_POSITIVE {
        0.0
    } else {
        v
    }
}

/// `(1 + a + a^2/3) exp(-a)` with `a = sqrt(5 d / theta)`; no validation.
#[inline]
pub(crate) fn matern52_raw(d: f64, theta: f64) -> f64 {
    let a = (5.0 * d / theta).sqrt();
    flush((1.0 + a + a * a / 3.0) * (-a).exp())
}

pub fn matern52(d: f64, theta: f64) -> Result<f64> {
    positive("theta", theta)?;
    if !(d >= 0.0) {
        return Err(Error::Domain(format!("kernel distance must be nonnegative, got {d}")));
    }
    Ok(matern52_raw(d, theta))
}

/// Covariance over 1-D points with entries `scale * K((p_i - p_j)^2, theta)` plus
/// diagonal jitter.
pub fn matern52_matrix(points: &[f64], params: &MaternParams) -> Result<DMatrix<f64>> {
    params.validate()?;
    if points.is_empty() {
        return Err(Error::InvalidParameter {
            name: "points",
            reason: "need at least one point".into(),
        });
    }
    let n = points.len();
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        m[(j, j)] = params.scale + params.jitter;
        for i in (j + 1)..n {
            let d = points[i] - points[j];
            let v = params.scale * matern52_raw(d * d, params.lengthscale);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(m)
}

/// Cross-covariance between two point sets, no jitter.
pub fn matern52_cross(a: &[f64], b: &[f64], params: &MaternParams) -> Result<DMatrix<f64>> {
    params.validate()?;
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| {
        let d = a[i] - b[j];
        params.scale * matern52_raw(d * d, params.lengthscale)
    }))
}

pub fn powexp_corr(u: &[f64], v: &[f64], params: &PowExpParams) -> Result<f64> {
    check_len("powexp_corr (first input)", params.beta.len(), u.len())?;
    check_len("powexp_corr (second input)", params.beta.len(), v.len())?;
    Ok(powexp_raw(u, v, &params.beta, params.alpha))
}

#[inline]
pub(crate) fn powexp_raw(u: &[f64], v: &[f64], beta: &[f64], alpha: f64) -> f64 {
    let mut expo = 0.0;
    for ((a, b), bj) in u.iter().zip(v).zip(beta) {
        let d = (a - b).abs();
        if d > 0.0 {
            expo += 10f64.powf(*bj) * d.powf(alpha);
        }
    }
    flush((-expo).exp())
}

/// Correlation matrix `R` over the rows of `inputs` (m x p), without nugget.
pub fn powexp_corr_matrix(inputs: &DMatrix<f64>, params: &PowExpParams) -> Result<DMatrix<f64>> {
    check_len("powexp_corr_matrix", params.beta.len(), inputs.ncols())?;
    let rows: Vec<Vec<f64>> = inputs
        .row_iter()
        .map(|r| r.iter().copied().collect())
        .collect();
    let m = rows.len();
    let mut r = DMatrix::identity(m, m);
    for j in 0..m {
        for i in (j + 1)..m {
            let v = powexp_raw(&rows[i], &rows[j], &params.beta, params.alpha);
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;

    #[test]
    fn matern_at_zero_is_one() {
        assert_eq!(matern52(0.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn matern_unit_distance() {
        // (1 + sqrt5 + 5/3) e^{-sqrt5}, evaluated with mpmath at 50 digits
        let expected = 0.523_994_108_831_820_3;
        assert_relative_eq!(matern52(1.0, 1.0).unwrap(), expected, max_relative = 1e-14);
    }

    #[test]
    fn matern_squared_distance_argument() {
        // d = 4, theta = 0.5 gives r = sqrt(40); mpmath at 40 digits
        let expected = 0.037_014_037_116_687_306;
        assert_relative_eq!(matern52(4.0, 0.5).unwrap(), expected, max_relative = 1e-13);
        // depends on the points only through |a - b|
        let p = MaternParams::unit(0.3);
        let m = matern52_matrix(&[0.0, 0.7, -0.7], &p).unwrap();
        assert_relative_eq!(m[(0, 1)], m[(0, 2)], max_relative = 1e-15);
    }

    #[test]
    fn matern_tail_flushes_to_zero() {
        let v = matern52(1e6, 1.0).unwrap();
        assert!(v == 0.0 || v < 1e-300);
        assert!(!v.is_nan());
    }

    #[test]
    fn matern_rejects_bad_theta() {
        assert!(matches!(
            matern52(1.0, 0.0),
            Err(Error::InvalidParameter { .. })
        ));
        assert!(matern52(1.0, -2.0).is_err());
    }

    #[test]
    fn identical_points_give_ones() {
        let p = MaternParams::new(0.3, 1.0, 0.0).unwrap();
        let m = matern52_matrix(&[2.0; 4], &p).unwrap();
        assert!(m.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_point_matrix() {
        let p = MaternParams::new(0.3, 2.5, 0.1).unwrap();
        let m = matern52_matrix(&[1.0], &p).unwrap();
        assert_eq!(m.shape(), (1, 1));
        assert_relative_eq!(m[(0, 0)], 2.6);
    }

    #[test]
    fn sim_study_variance_a_is_psd() {
        let x: Vec<f64> = (0..=40).map(|i| i as f64 * 0.1).collect();
        let p = MaternParams::new(0.01, 0.0225, 0.0).unwrap();
        let m = matern52_matrix(&x, &p).unwrap();
        assert!(m.diagonal().iter().all(|&d| d == 0.0225));
        let eig = SymmetricEigen::new(m);
        assert!(eig.eigenvalues.min() > -1e-10);
    }

    #[test]
    fn powexp_identity_and_unit_distance() {
        let p = PowExpParams::new(vec![0.0], 1.95, 1.0, 0.0).unwrap();
        assert_eq!(powexp_corr(&[0.3], &[0.3], &p).unwrap(), 1.0);
        assert_relative_eq!(
            powexp_corr(&[0.0], &[1.0], &p).unwrap(),
            (-1f64).exp(),
            max_relative = 1e-15
        );
    }

    #[test]
    fn powexp_two_dims() {
        let p = PowExpParams::new(vec![0.0, 1.0], 1.95, 1.0, 0.0).unwrap();
        let got = powexp_corr(&[0.0, 0.0], &[0.5, 0.5], &p).unwrap();
        // exp(-(0.5^1.95)) * exp(-10 * 0.5^1.95), mpmath at 50 digits
        let expected = 0.058_019_359_446_785_73;
        assert_relative_eq!(got, expected, max_relative = 1e-13);
    }

    #[test]
    fn powexp_length_mismatch() {
        let p = PowExpParams::new(vec![0.0, 1.0], 1.95, 1.0, 0.0).unwrap();
        assert!(matches!(
            powexp_corr(&[0.0], &[0.5, 0.5], &p),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn powexp_alpha_two_matches_gaussian_form() {
        let p = PowExpParams::new(vec![0.7], 2.0, 1.0, 0.0).unwrap();
        let d: f64 = 0.37;
        let direct = (-(10f64.powf(0.7)) * d * d).exp();
        assert_relative_eq!(powexp_corr(&[0.0], &[d], &p).unwrap(), direct, max_relative = 1e-14);
    }

    #[test]
    fn powexp_very_negative_beta_approaches_one() {
        let p = PowExpParams::new(vec![-30.0, -30.0], 1.95, 1.0, 0.0).unwrap();
        let v = powexp_corr(&[0.0, 3.0], &[10.0, -4.0], &p).unwrap();
        assert!((1.0 - v) < 1e-25);
    }

    proptest! {
        #[test]
        fn matern_monotone_in_distance(a in 0.0f64..50.0, b in 0.0f64..50.0, theta in 1e-3f64..10.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(matern52(lo, theta).unwrap() >= matern52(hi, theta).unwrap());
        }

        #[test]
        fn matern_matrix_symmetric_psd(
            pts in proptest::collection::vec(-3.0f64..3.0, 1..25),
            theta in 1e-3f64..5.0,
            scale in 0.1f64..3.0,
        ) {
            let p = MaternParams::new(theta, scale, 0.0).unwrap();
            let m = matern52_matrix(&pts, &p).unwrap();
            prop_assert_eq!(&m, &m.transpose());
            let eig = SymmetricEigen::new(m.clone());
            prop_assert!(eig.eigenvalues.min() > -1e-10 * scale * pts.len() as f64);
            let j = MaternParams::new(theta, scale, 1e-6).unwrap();
            let mj = matern52_matrix(&pts, &j).unwrap();
            prop_assert!(mj.cholesky().is_some());
        }
    }
}
