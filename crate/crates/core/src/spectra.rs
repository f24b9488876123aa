//! Multi-fidelity spectra: ingestion, emulation-space transform, precision estimation,
//! per-source precision vectors, the precision-weighted average, LOESS smoothing and
//! construction of the error covariance of the fused curve.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::error::{check_len, Error, Result};
use crate::gaussmath::{chol, symmetrize, JitterPolicy};
use crate::kernelcov::{matern52_matrix, MaternParams, DEFAULT_JITTER};
use crate::optim::scan_then_refine;

/// Formats a float with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WavenumberGrid {
    k: Vec<f64>,
    x: Vec<f64>,
}

impl WavenumberGrid {
    pub fn new(k: Vec<f64>) -> Result<Self> {
        if k.len() < 2 {
            return Err(Error::InvalidParameter {
                name: "k",
                reason: format!("grid needs at least 2 wavenumbers, got {}", k.len()),
            });
        }
        if k.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Domain("wavenumbers must be finite and positive".into()));
        }
        if k.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("wavenumbers must be strictly increasing".into()));
        }
        let x = k.iter().map(|v| v.log10()).collect();
        Ok(Self { k, x })
    }

    /// Grid from log10 wavenumbers.
    pub fn from_log10(x: &[f64]) -> Result<Self> {
        Self::new(x.iter().map(|v| 10f64.powf(*v)).collect())
    }

    pub fn k(&self) -> &[f64] {
        &self.k
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    pub fn same_as(&self, other: &WavenumberGrid) -> bool {
        self.k == other.k
    }
}

/// `log10(k^1.5 P(k) / (2 pi^2))`, elementwise.
pub fn to_emulation_space(power: &[f64], grid: &WavenumberGrid) -> Result<DVector<f64>> {
    check_len("to_emulation_space", grid.len(), power.len())?;
    power
        .iter()
        .zip(grid.k())
        .map(|(&p, &k)| {
            if p > 0.0 && p.is_finite() {
                Ok((k.powf(1.5) * p / (2.0 * PI * PI)).log10())
            } else {
                Err(Error::Domain(format!("power must be positive, got {p} at k = {k}")))
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(DVector::from_vec)
}

pub fn from_emulation_space(values: &[f64], grid: &WavenumberGrid) -> Result<DVector<f64>> {
    check_len("from_emulation_space", grid.len(), values.len())?;
    Ok(DVector::from_iterator(
        values.len(),
        values
            .iter()
            .zip(grid.k())
            .map(|(&v, &k)| 10f64.powf(v) * 2.0 * PI * PI / k.powf(1.5)),
    ))
}

/// One cosmology's curves on a shared grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectraBatch {
    pub cosmology_id: String,
    pub grid: WavenumberGrid,
    pub y_p: Option<DVector<f64>>,
    /// r x n, one low-resolution run per row.
    pub y_low: Option<DMatrix<f64>>,
    pub y_high: Option<DVector<f64>>,
    pub y_truth: Option<DVector<f64>>,
}

impl SpectraBatch {
    pub fn new(
        cosmology_id: impl Into<String>,
        grid: WavenumberGrid,
        y_p: Option<DVector<f64>>,
        y_low: Option<DMatrix<f64>>,
        y_high: Option<DVector<f64>>,
        y_truth: Option<DVector<f64>>,
    ) -> Result<Self> {
        let n = grid.len();
        for v in [&y_p, &y_high, &y_truth].into_iter().flatten() {
            check_len("spectra batch curve", n, v.len())?;
        }
        if let Some(low) = &y_low {
            check_len("spectra batch low-resolution runs", n, low.ncols())?;
            if low.nrows() == 0 {
                return Err(Error::InsufficientReplicates { needed: 1, got: 0 });
            }
        }
        Ok(Self {
            cosmology_id: cosmology_id.into(),
            grid,
            y_p,
            y_low,
            y_high,
            y_truth,
        })
    }

    pub fn runs(&self) -> usize {
        self.y_low.as_ref().map_or(0, |m| m.nrows())
    }

    /// Row mean of the low-resolution runs.
    pub fn low_mean(&self) -> Option<DVector<f64>> {
        self.y_low
            .as_ref()
            .map(|m| m.row_mean().transpose())
    }

    /// Applies the emulation-space transform to every curve (input given as raw power).
    pub fn into_emulation_space(mut self) -> Result<Self> {
        let g = self.grid.clone();
        let tr = |v: &DVector<f64>| to_emulation_space(v.as_slice(), &g);
        self.y_p = self.y_p.as_ref().map(tr).transpose()?;
        self.y_high = self.y_high.as_ref().map(tr).transpose()?;
        self.y_truth = self.y_truth.as_ref().map(tr).transpose()?;
        if let Some(low) = &self.y_low {
            let mut out = low.clone();
            for (i, row) in low.row_iter().enumerate() {
                let t = to_emulation_space(&row.iter().copied().collect::<Vec<_>>(), &g)?;
                out.set_row(i, &t.transpose());
            }
            self.y_low = Some(out);
        }
        Ok(self)
    }

    /// Reads `k, y_p, y_low_1..y_low_r, y_high[, y_truth]`. Every column but `k` is
    /// optional; columns are matched by header name.
    pub fn read_csv(path: &Path, cosmology_id: impl Into<String>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let k_col = col("k").ok_or_else(|| Error::Parse(format!("{}: missing `k` column", path.display())))?;
        let p_col = col("y_p");
        let h_col = col("y_high");
        let t_col = col("y_truth");
        let mut low_cols: Vec<(usize, usize)> = headers
            .iter()
            .enumerate()
            .filter_map(|(i, h)| {
                h.strip_prefix("y_low_")
                    .and_then(|s| s.parse::<usize>().ok())
                    .map(|j| (j, i))
            })
            .collect();
        low_cols.sort_unstable();

        let mut k = Vec::new();
        let mut yp = Vec::new();
        let mut yh = Vec::new();
        let mut yt = Vec::new();
        let mut low: Vec<Vec<f64>> = vec![Vec::new(); low_cols.len()];
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let get = |c: usize| -> Result<f64> {
                rec.get(c)
                    .ok_or_else(|| Error::Parse(format!("{}: row {} too short", path.display(), line + 2)))?
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("{}: row {}: {e}", path.display(), line + 2)))
            };
            k.push(get(k_col)?);
            if let Some(c) = p_col {
                yp.push(get(c)?);
            }
            if let Some(c) = h_col {
                yh.push(get(c)?);
            }
            if let Some(c) = t_col {
                yt.push(get(c)?);
            }
            for (slot, &(_, c)) in low.iter_mut().zip(&low_cols) {
                slot.push(get(c)?);
            }
        }
        let n = k.len();
        let grid = WavenumberGrid::new(k)?;
        let opt = |v: Vec<f64>, present: bool| present.then(|| DVector::from_vec(v));
        let y_low = (!low.is_empty()).then(|| {
            DMatrix::from_row_iterator(low.len(), n, low.into_iter().flatten())
        });
        Self::new(
            cosmology_id,
            grid,
            opt(yp, p_col.is_some()),
            y_low,
            opt(yh, h_col.is_some()),
            opt(yt, t_col.is_some()),
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["k".to_string()];
        if self.y_p.is_some() {
            header.push("y_p".into());
        }
        for j in 1..=self.runs() {
            header.push(format!("y_low_{j}"));
        }
        if self.y_high.is_some() {
            header.push("y_high".into());
        }
        if self.y_truth.is_some() {
            header.push("y_truth".into());
        }
        w.write_record(&header)?;
        for i in 0..self.grid.len() {
            let mut row = vec![fmt17(self.grid.k()[i])];
            if let Some(v) = &self.y_p {
                row.push(fmt17(v[i]));
            }
            if let Some(m) = &self.y_low {
                row.extend((0..m.nrows()).map(|r| fmt17(m[(r, i)])));
            }
            if let Some(v) = &self.y_high {
                row.push(fmt17(v[i]));
            }
            if let Some(v) = &self.y_truth {
                row.push(fmt17(v[i]));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Wavenumber interval `[lo, hi)` or `[lo, hi]`; a missing bound is unbounded.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    #[serde(default)]
    pub hi_inclusive: bool,
}

impl Interval {
    pub const fn new(lo: Option<f64>, hi: Option<f64>, hi_inclusive: bool) -> Self {
        Self {
            lo,
            hi,
            hi_inclusive,
        }
    }

    pub const fn all() -> Self {
        Self::new(None, None, false)
    }

    pub fn contains(&self, k: f64) -> bool {
        let above = self.lo.is_none_or(|lo| k >= lo);
        let below = match self.hi {
            None => true,
            Some(hi) if self.hi_inclusive => k <= hi,
            Some(hi) => k < hi,
        };
        above && below
    }
}

/// Which curve the anchor precision applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorSource {
    /// Perturbation-theory curve `y_p`.
    Perturbation,
    /// Infinite-resolution curve `y_truth`.
    Truth,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidityRanges {
    pub anchor: Interval,
    pub low: Interval,
    pub high: Interval,
    pub anchor_precision: f64,
    pub anchor_source: AnchorSource,
}

impl ValidityRanges {
    pub const DEFAULT_ANCHOR_PRECISION: f64 = 1e8;

    pub fn mira_titan() -> Self {
        Self {
            anchor: Interval::new(None, Some(0.04), false),
            low: Interval::new(Some(0.04), Some(0.25), false),
            high: Interval::new(Some(0.04), Some(5.0), true),
            anchor_precision: Self::DEFAULT_ANCHOR_PRECISION,
            anchor_source: AnchorSource::Perturbation,
        }
    }

    pub fn camb() -> Self {
        let edge = 10f64.powf(-2.2);
        Self {
            anchor: Interval::new(None, Some(edge), false),
            low: Interval::new(Some(edge), None, false),
            high: Interval::new(Some(edge), None, false),
            anchor_precision: Self::DEFAULT_ANCHOR_PRECISION,
            anchor_source: AnchorSource::Truth,
        }
    }

    /// Low-resolution runs only, trusted everywhere.
    pub fn low_only() -> Self {
        Self {
            anchor: Interval::new(Some(f64::MAX), None, false),
            low: Interval::all(),
            high: Interval::new(Some(f64::MAX), None, false),
            anchor_precision: Self::DEFAULT_ANCHOR_PRECISION,
            anchor_source: AnchorSource::Perturbation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionModel {
    /// Per-wavenumber precision of a single low-resolution run.
    pub p: Vec<f64>,
    /// High- to low-resolution precision multiplier.
    pub c: f64,
    pub intercept: f64,
    pub slope: f64,
    /// Coefficient on the high-resolution indicator.
    pub high_offset: f64,
}

impl PrecisionModel {
    pub fn unit(n: usize) -> Self {
        Self {
            p: vec![1.0; n],
            c: 1.0,
            intercept: 0.0,
            slope: 0.0,
            high_offset: 0.0,
        }
    }

    /// Evaluates the fitted power law on another grid.
    pub fn on_grid(&self, grid: &WavenumberGrid) -> Self {
        Self {
            p: grid
                .x()
                .iter()
                .map(|x| 10f64.powf(-(self.intercept + self.slope * x)))
                .collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p.iter().any(|&v| !(v > 0.0 && v.is_finite())) || !(self.c > 0.0) {
            return Err(Error::InvalidParameter {
                name: "precision",
                reason: "precisions and multiplier must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Mean of `log10(chi2_nu / nu)`.
fn log10_chi2_bias(nu: f64) -> f64 {
    (digamma(nu / 2.0) - (nu / 2.0).ln()) / std::f64::consts::LN_10
}

fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x
        + x2 / 2.0
        + x2 / x * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 / 30.0)))
}

/// Variance of `log10(chi2_nu / nu)`.
fn log10_chi2_var(nu: f64) -> f64 {
    trigamma(nu / 2.0) / (std::f64::consts::LN_10 * std::f64::consts::LN_10)
}

/// Log-log regression of replicate variances on wavenumber, pooled across batches and
/// weighted by the inverse variance of each log chi-square response.
///
/// Low-resolution sample variances contribute rows `[1, log10 k, 0]`; squared
/// high-minus-low-mean differences contribute `[1, log10 k, 1]`. Both responses are
/// corrected for the mean of a log chi-square. The difference `y_high - mean(y_low)`
/// has variance `v(k) (1/c + 1/r)`, which gives `c` from the indicator coefficient.
pub fn fit_precisions(batches: &[SpectraBatch], window: Interval) -> Result<PrecisionModel> {
    let first = batches.first().ok_or(Error::InsufficientReplicates { needed: 1, got: 0 })?;
    let grid = &first.grid;
    let mut rows: Vec<[f64; 3]> = Vec::new();
    let mut resp: Vec<f64> = Vec::new();
    let mut weight: Vec<f64> = Vec::new();
    let mut inv_r = Vec::new();
    let mut have_high = false;
    for b in batches {
        if !b.grid.same_as(grid) {
            return Err(Error::Config(format!(
                "batch `{}` is on a different wavenumber grid",
                b.cosmology_id
            )));
        }
        let low = b.y_low.as_ref().ok_or(Error::InsufficientReplicates { needed: 2, got: 0 })?;
        let r = low.nrows();
        if r < 2 {
            return Err(Error::InsufficientReplicates { needed: 2, got: r });
        }
        let nu = (r - 1) as f64;
        let low_bias = log10_chi2_bias(nu);
        let mean = low.row_mean();
        for (i, (&k, &x)) in grid.k().iter().zip(grid.x()).enumerate() {
            if !window.contains(k) {
                continue;
            }
            let s2 = low.column(i).iter().map(|v| (v - mean[i]).powi(2)).sum::<f64>() / nu;
            if s2 > 0.0 {
                rows.push([1.0, x, 0.0]);
                resp.push(s2.log10() - low_bias);
                weight.push(1.0 / log10_chi2_var(nu));
            }
            if let Some(h) = &b.y_high {
                let e2 = (h[i] - mean[i]).powi(2);
                if e2 > 0.0 {
                    rows.push([1.0, x, 1.0]);
                    resp.push(e2.log10() - log10_chi2_bias(1.0));
                    weight.push(1.0 / log10_chi2_var(1.0));
                    have_high = true;
                }
            }
        }
        inv_r.push(1.0 / r as f64);
    }
    if !have_high {
        return Err(Error::MissingSource {
            which: "y_high",
            index: 0,
        });
    }
    let mut xtx = Matrix3::<f64>::zeros();
    let mut xty = Vector3::<f64>::zeros();
    for ((row, y), w) in rows.iter().zip(&resp).zip(&weight) {
        let v = Vector3::new(row[0], row[1], row[2]);
        xtx += v * v.transpose() * *w;
        xty += v * (*y * *w);
    }
    let coef = xtx
        .cholesky()
        .ok_or_else(|| Error::FitFailure {
            reason: "precision regression design is rank deficient".into(),
            best: vec![],
        })?
        .solve(&xty);
    let (intercept, slope, offset) = (coef[0], coef[1], coef[2]);
    let mean_inv_r = inv_r.iter().sum::<f64>() / inv_r.len() as f64;
    let inv_c = 10f64.powf(offset) - mean_inv_r;
    if !(inv_c > 0.0) {
        return Err(Error::FitFailure {
            reason: "high-resolution variance is not separable from the low-resolution mean".into(),
            best: vec![intercept, slope, offset],
        });
    }
    let model = PrecisionModel {
        p: vec![],
        c: 1.0 / inv_c,
        intercept,
        slope,
        high_offset: offset,
    };
    Ok(model.on_grid(grid))
}

/// Diagonal precisions of the three sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub anchor: DVector<f64>,
    pub low: DVector<f64>,
    pub high: DVector<f64>,
    pub anchor_source: AnchorSource,
}

impl Lambdas {
    pub fn total(&self) -> DVector<f64> {
        &self.anchor + &self.low + &self.high
    }
}

pub fn build_lambdas(
    grid: &WavenumberGrid,
    precision: &PrecisionModel,
    ranges: &ValidityRanges,
    runs: usize,
) -> Result<Lambdas> {
    check_len("build_lambdas (precision)", grid.len(), precision.p.len())?;
    let n = grid.len();
    let mut anchor = DVector::zeros(n);
    let mut low = DVector::zeros(n);
    let mut high = DVector::zeros(n);
    for (i, &k) in grid.k().iter().enumerate() {
        if ranges.anchor.contains(k) {
            anchor[i] = ranges.anchor_precision;
        }
        if ranges.low.contains(k) {
            low[i] = runs as f64 * precision.p[i];
        }
        if ranges.high.contains(k) {
            high[i] = precision.c * precision.p[i];
        }
        if anchor[i] + low[i] + high[i] <= 0.0 {
            return Err(Error::Coverage { index: i, k });
        }
    }
    Ok(Lambdas {
        anchor,
        low,
        high,
        anchor_source: ranges.anchor_source,
    })
}

fn anchor_curve(batch: &SpectraBatch, source: AnchorSource) -> (Option<&DVector<f64>>, &'static str) {
    match source {
        AnchorSource::Perturbation => (batch.y_p.as_ref(), "y_p"),
        AnchorSource::Truth => (batch.y_truth.as_ref(), "y_truth"),
    }
}

/// Precision-weighted mean of anchor, low-resolution mean and high-resolution curves.
pub fn weighted_average(batch: &SpectraBatch, lambdas: &Lambdas) -> Result<DVector<f64>> {
    let n = batch.grid.len();
    check_len("weighted_average (precision)", n, lambdas.anchor.len())?;
    let (anchor, anchor_name) = anchor_curve(batch, lambdas.anchor_source);
    let low_mean = batch.low_mean();
    let total = lambdas.total();
    let mut out = DVector::zeros(n);
    for i in 0..n {
        if !(total[i] > 0.0) {
            return Err(Error::Coverage {
                index: i,
                k: batch.grid.k()[i],
            });
        }
        // offsets from the first active source keep equal inputs and single sources exact
        let mut base: Option<f64> = None;
        let (mut lo, mut hi, mut acc) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for (lam, curve, name) in [
            (lambdas.anchor[i], anchor, anchor_name),
            (lambdas.low[i], low_mean.as_ref(), "y_low"),
            (lambdas.high[i], batch.y_high.as_ref(), "y_high"),
        ] {
            if lam > 0.0 {
                let v = curve.ok_or(Error::MissingSource { which: name, index: i })?[i];
                let b = *base.get_or_insert(v);
                acc += lam / total[i] * (v - b);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let y = base.unwrap_or(0.0) + acc;
        out[i] = if lo <= hi { y.clamp(lo, hi) } else { y };
    }
    Ok(out)
}

pub const DEFAULT_LOESS_SPAN: f64 = 0.75;

/// Local quadratic regression with tricube weights over the nearest `ceil(span n)` points.
pub fn loess_smooth(y: &[f64], x: &[f64], span: f64) -> Result<DVector<f64>> {
    check_len("loess_smooth", x.len(), y.len())?;
    let n = x.len();
    if n < 5 {
        return Err(Error::InvalidParameter {
            name: "n",
            reason: format!("LOESS needs at least 5 points, got {n}"),
        });
    }
    if !(span > 0.0 && span <= 1.0) {
        return Err(Error::InvalidParameter {
            name: "span",
            reason: format!("must lie in (0, 1], got {span}"),
        });
    }
    let q = ((span * n as f64).ceil() as usize).clamp(4, n);
    let mut dist = vec![0.0; n];
    let mut out = DVector::zeros(n);
    for i in 0..n {
        let xi = x[i];
        for (d, &xj) in dist.iter_mut().zip(x) {
            *d = (xj - xi).abs();
        }
        let mut sorted = dist.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let h = sorted[q - 1];
        if !(h > 0.0) {
            return Err(Error::SingularFit(xi));
        }
        let mut a = Matrix3::<f64>::zeros();
        let mut b = Vector3::<f64>::zeros();
        for j in 0..n {
            let u = dist[j] / h;
            if u >= 1.0 {
                continue;
            }
            let w = (1.0 - u * u * u).powi(3);
            let t = x[j] - xi;
            let basis = Vector3::new(1.0, t, t * t);
            a += w * basis * basis.transpose();
            b += w * y[j] * basis;
        }
        // rescale the polynomial columns so the 3x3 system is well conditioned
        let s = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0 / h, 1.0 / (h * h)));
        let coef = (s * a * s)
            .cholesky()
            .ok_or(Error::SingularFit(xi))?
            .solve(&(s * b));
        out[i] = coef[0];
    }
    Ok(out)
}

/// Form of the error covariance of the fused curve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorCovConvention {
    /// `(L_anchor + L_low + L_high)^{-1}`, diagonal.
    Diagonal,
    /// `(L_anchor^- + S_low + L_high^-)^{-1}` with `0^- = 0`, as printed for Mira-Titan.
    Literal,
    /// Variance of the weighted average: `L^{-1}(L_anchor + L_low S_low L_low + L_high)L^{-1}`.
    Propagated,
}

/// How low-resolution runs are detrended before the covariance fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Detrend {
    /// Subtract a LOESS smooth of the weighted average.
    Loess { span: f64 },
    /// Orthogonal contrasts of the runs around their mean; exact for iid runs.
    RunMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCovOptions {
    pub convention: ErrorCovConvention,
    pub detrend: Detrend,
}

impl Default for ErrorCovOptions {
    fn default() -> Self {
        Self {
            convention: ErrorCovConvention::Propagated,
            detrend: Detrend::Loess {
                span: DEFAULT_LOESS_SPAN,
            },
        }
    }
}

/// Fused observation and its error covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedSpectrum {
    pub cosmology_id: String,
    pub k: Vec<f64>,
    pub x: Vec<f64>,
    pub ybar: DVector<f64>,
    pub lambda_total: DVector<f64>,
    pub sigma_eps: DMatrix<f64>,
    pub convention: ErrorCovConvention,
    /// Fitted covariance of the prescaled runs, when one was estimated.
    pub low_fit: Option<MaternParams>,
}

impl WeightedSpectrum {
    /// Builds directly from a fused curve and covariance (tests and external pipelines).
    pub fn from_parts(
        cosmology_id: impl Into<String>,
        x: Vec<f64>,
        ybar: DVector<f64>,
        sigma_eps: DMatrix<f64>,
    ) -> Result<Self> {
        let n = x.len();
        check_len("weighted spectrum (ybar)", n, ybar.len())?;
        check_len("weighted spectrum (sigma_eps)", n, sigma_eps.nrows())?;
        check_len("weighted spectrum (sigma_eps)", n, sigma_eps.ncols())?;
        let lambda_total = sigma_eps.diagonal().map(|v| if v > 0.0 { 1.0 / v } else { 0.0 });
        Ok(Self {
            cosmology_id: cosmology_id.into(),
            k: x.iter().map(|v| 10f64.powf(*v)).collect(),
            x,
            ybar,
            lambda_total,
            sigma_eps,
            convention: ErrorCovConvention::Propagated,
            low_fit: None,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Profile maximum likelihood of a Matérn covariance `scale * K(d^2, theta)` for iid
/// zero-mean samples observed at `x`. The scale is profiled in closed form and the
/// lengthscale is found by a log-grid scan plus golden-section refinement.
pub fn fit_matern_covariance(x: &[f64], samples: &[DVector<f64>]) -> Result<MaternParams> {
    let n = x.len();
    if samples.is_empty() {
        return Err(Error::InsufficientReplicates { needed: 1, got: 0 });
    }
    for s in samples {
        check_len("fit_matern_covariance", n, s.len())?;
    }
    let count = samples.len() as f64;
    let profile = |log_theta: f64| -> Option<(f64, f64)> {
        let k = matern52_matrix(x, &MaternParams::unit(10f64.powf(log_theta))).ok()?;
        let f = chol(&k, JitterPolicy::default(), "matern fit").ok()?;
        let mut quad = 0.0;
        for s in samples {
            quad += f.quad_form(s).ok()?;
        }
        let s2 = quad / (count * n as f64);
        if !(s2 > 0.0) {
            return None;
        }
        Some((0.5 * count * (n as f64 * s2.ln() + f.log_det()), s2))
    };
    const LO: f64 = -8.0;
    const HI: f64 = 3.0;
    let (best, nll) = scan_then_refine(|t| profile(t).map_or(f64::INFINITY, |v| v.0), LO, HI, 45, 1e-6)
        .ok_or_else(|| Error::FitFailure {
            reason: "no finite likelihood over the lengthscale range".into(),
            best: vec![],
        })?;
    let (_, scale) = profile(best).expect("refined optimum was finite");
    if best >= HI - 1e-3 {
        return Err(Error::FitFailure {
            reason: format!("lengthscale ran to the upper search bound (nll {nll})"),
            best: vec![10f64.powf(best), scale],
        });
    }
    MaternParams::new(10f64.powf(best), scale, DEFAULT_JITTER)
}

/// Helmert contrasts of the rows of `runs`: `r - 1` vectors that are iid `N(0, S)`
/// when the rows are iid `N(mu, S)`.
fn helmert_contrasts(runs: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let r = runs.nrows();
    let mut partial = runs.row(0).transpose();
    let mut out = Vec::with_capacity(r.saturating_sub(1));
    for j in 1..r {
        let jf = j as f64;
        let next = runs.row(j).transpose();
        // sqrt(j/(j+1)) * (mean of first j rows - row j)
        let c = (&partial / jf - &next) * (jf / (jf + 1.0)).sqrt();
        out.push(c);
        partial += next;
    }
    out
}

/// Fuses a batch and builds the error covariance of the fused curve.
pub fn estimate_error_cov(
    batch: &SpectraBatch,
    precision: &PrecisionModel,
    lambdas: &Lambdas,
    opts: &ErrorCovOptions,
) -> Result<WeightedSpectrum> {
    let n = batch.grid.len();
    check_len("estimate_error_cov (precision)", n, precision.p.len())?;
    let ybar = weighted_average(batch, lambdas)?;
    let total = lambdas.total();

    let (sigma_low, low_fit) = match opts.convention {
        ErrorCovConvention::Diagonal => (None, None),
        _ => {
            let (s, fit) = fit_low_covariance(batch, precision, lambdas, &ybar, opts.detrend)?;
            (Some(s), Some(fit))
        }
    };

    let mut sigma = match opts.convention {
        ErrorCovConvention::Diagonal => {
            DMatrix::from_diagonal(&total.map(|v| 1.0 / v))
        }
        ErrorCovConvention::Literal => {
            let ginv = |v: f64| if v > 0.0 { 1.0 / v } else { 0.0 };
            let mut inner = sigma_low.expect("fitted above");
            for i in 0..n {
                inner[(i, i)] += ginv(lambdas.anchor[i]) + ginv(lambdas.high[i]);
            }
            symmetrize(&mut inner);
            let f = chol(&inner, JitterPolicy::default(), "error covariance (literal inner sum)")?;
            f.solve_matrix(&DMatrix::identity(n, n))?
        }
        ErrorCovConvention::Propagated => {
            let s_low = sigma_low.expect("fitted above");
            DMatrix::from_fn(n, n, |i, j| {
                let mut v = lambdas.low[i] * s_low[(i, j)] * lambdas.low[j];
                if i == j {
                    v += lambdas.anchor[i] + lambdas.high[i];
                }
                v / (total[i] * total[j])
            })
        }
    };
    symmetrize(&mut sigma);
    let f = chol(&sigma, JitterPolicy::default(), "error covariance")?;
    if f.jitter() > 0.0 {
        for i in 0..n {
            sigma[(i, i)] += f.jitter();
        }
    }
    Ok(WeightedSpectrum {
        cosmology_id: batch.cosmology_id.clone(),
        k: batch.grid.k().to_vec(),
        x: batch.grid.x().to_vec(),
        ybar,
        lambda_total: total,
        sigma_eps: sigma,
        convention: opts.convention,
        low_fit,
    })
}

/// Dense covariance of the low-resolution mean on its validity window (zero elsewhere).
fn fit_low_covariance(
    batch: &SpectraBatch,
    precision: &PrecisionModel,
    lambdas: &Lambdas,
    ybar: &DVector<f64>,
    detrend: Detrend,
) -> Result<(DMatrix<f64>, MaternParams)> {
    let n = batch.grid.len();
    let runs = batch
        .y_low
        .as_ref()
        .ok_or(Error::MissingSource { which: "y_low", index: 0 })?;
    let window: Vec<usize> = (0..n).filter(|&i| lambdas.low[i] > 0.0).collect();
    if window.is_empty() {
        return Ok((DMatrix::zeros(n, n), MaternParams::unit(1.0)));
    }
    let xw: Vec<f64> = window.iter().map(|&i| batch.grid.x()[i]).collect();
    let sub = DMatrix::from_fn(runs.nrows(), window.len(), |r, c| runs[(r, window[c])]);
    let root_p: DVector<f64> = DVector::from_iterator(window.len(), window.iter().map(|&i| precision.p[i].sqrt()));

    let samples: Vec<DVector<f64>> = match detrend {
        Detrend::RunMean => {
            if runs.nrows() < 2 {
                return Err(Error::InsufficientReplicates {
                    needed: 2,
                    got: runs.nrows(),
                });
            }
            helmert_contrasts(&sub)
                .into_iter()
                .map(|c| c.component_mul(&root_p))
                .collect()
        }
        Detrend::Loess { span } => {
            let yw: Vec<f64> = window.iter().map(|&i| ybar[i]).collect();
            let trend = loess_smooth(&yw, &xw, span)?;
            sub.row_iter()
                .map(|row| (row.transpose() - &trend).component_mul(&root_p))
                .collect()
        }
    };
    let fit = fit_matern_covariance(&xw, &samples)?;
    let m = matern52_matrix(&xw, &MaternParams { jitter: 0.0, ..fit })?;
    let mut s = DMatrix::zeros(n, n);
    for (a, &i) in window.iter().enumerate() {
        for (b, &j) in window.iter().enumerate() {
            s[(i, j)] = m[(a, b)] / (lambdas.low[i] * lambdas.low[j]).sqrt();
        }
    }
    Ok((s, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussmath::{correlated_normal, GaussianDist};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn mira_grid() -> WavenumberGrid {
        WavenumberGrid::new(vec![0.01, 0.1, 1.0]).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(WavenumberGrid::new(vec![1.0]).is_err());
        assert!(WavenumberGrid::new(vec![1.0, 1.0]).is_err());
        assert!(WavenumberGrid::new(vec![-1.0, 1.0]).is_err());
        let g = WavenumberGrid::new(vec![0.01, 1.0, 100.0]).unwrap();
        assert_eq!(g.x(), &[-2.0, 0.0, 2.0]);
    }

    #[test]
    fn emulation_space_cases() {
        let g = WavenumberGrid::new(vec![0.5, 1.0, 2.0]).unwrap();
        let p: Vec<f64> = g.k().iter().map(|k| 2.0 * PI * PI * k.powf(-1.5)).collect();
        let e = to_emulation_space(&p, &g).unwrap();
        assert!(e.iter().all(|v| v.abs() < 1e-14));

        let g1 = WavenumberGrid::new(vec![1.0, 2.0]).unwrap();
        let e1 = to_emulation_space(&[2.0 * PI * PI * 10.0, 1.0], &g1).unwrap();
        assert_relative_eq!(e1[0], 1.0, max_relative = 1e-14);

        let raw = vec![3.7, 120.0, 0.02];
        let back = from_emulation_space(to_emulation_space(&raw, &g).unwrap().as_slice(), &g).unwrap();
        for (a, b) in raw.iter().zip(back.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
        assert!(matches!(to_emulation_space(&[1.0, 0.0, 1.0], &g), Err(Error::Domain(_))));
    }

    #[test]
    fn lambda_case_structure() {
        let g = mira_grid();
        let prec = PrecisionModel {
            p: vec![2.0, 3.0, 5.0],
            c: 3.73,
            ..PrecisionModel::unit(3)
        };
        let l = build_lambdas(&g, &prec, &ValidityRanges::mira_titan(), 16).unwrap();
        assert_eq!((l.anchor[0], l.low[0], l.high[0]), (1e8, 0.0, 0.0));
        assert_eq!((l.anchor[1], l.low[1], l.high[1]), (0.0, 48.0, 3.73 * 3.0));
        assert_eq!((l.anchor[2], l.low[2], l.high[2]), (0.0, 0.0, 3.73 * 5.0));
    }

    #[test]
    fn lambda_upper_edge_inclusive_and_coverage_error() {
        let g = WavenumberGrid::new(vec![0.01, 5.0, 6.0]).unwrap();
        let err = build_lambdas(&g, &PrecisionModel::unit(3), &ValidityRanges::mira_titan(), 16);
        match err {
            Err(Error::Coverage { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn batch_with(v: [f64; 3], yp: [f64; 3], low: &[[f64; 3]], yh: [f64; 3]) -> SpectraBatch {
        let rows: Vec<f64> = low.iter().flatten().copied().collect();
        SpectraBatch::new(
            "t",
            mira_grid(),
            Some(DVector::from_row_slice(&yp)),
            Some(DMatrix::from_row_slice(low.len(), 3, &rows)),
            Some(DVector::from_row_slice(&yh)),
            Some(DVector::from_row_slice(&v)),
        )
        .unwrap()
    }

    #[test]
    fn weighted_average_identities() {
        let v = [0.3, -1.2, 2.0];
        let b = batch_with(v, v, &[v, v], v);
        let prec = PrecisionModel {
            p: vec![1.0, 2.0, 3.0],
            c: 3.73,
            ..PrecisionModel::unit(3)
        };
        let l = build_lambdas(&b.grid, &prec, &ValidityRanges::mira_titan(), 2).unwrap();
        let y = weighted_average(&b, &l).unwrap();
        for (a, e) in y.iter().zip(v) {
            assert_relative_eq!(*a, e, max_relative = 1e-15);
        }

        let b2 = batch_with(v, [9.0; 3], &[[7.0; 3], [7.0; 3]], [1.0, 2.0, 4.5]);
        let y2 = weighted_average(&b2, &l).unwrap();
        assert_eq!(y2[2], 4.5);

        // two sources with weights (1, 3) and values (0, 4)
        let b3 = batch_with(v, [0.0; 3], &[[0.0; 3]], [4.0; 3]);
        let l3 = Lambdas {
            anchor: DVector::zeros(3),
            low: DVector::from_element(3, 1.0),
            high: DVector::from_element(3, 3.0),
            anchor_source: AnchorSource::Perturbation,
        };
        assert!(weighted_average(&b3, &l3).unwrap().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn weighted_average_scale_invariance_and_missing_source() {
        let b = batch_with([0.0; 3], [0.1, 0.2, 0.3], &[[1.0, 2.0, 3.0], [2.0, 1.0, 0.0]], [5.0, 6.0, 7.0]);
        let l = Lambdas {
            anchor: DVector::from_vec(vec![1.0, 0.5, 0.0]),
            low: DVector::from_vec(vec![2.0, 0.0, 1.0]),
            high: DVector::from_vec(vec![0.0, 4.0, 9.0]),
            anchor_source: AnchorSource::Perturbation,
        };
        let scaled = Lambdas {
            anchor: &l.anchor * 7.5,
            low: &l.low * 7.5,
            high: &l.high * 7.5,
            ..l.clone()
        };
        let a = weighted_average(&b, &l).unwrap();
        let s = weighted_average(&b, &scaled).unwrap();
        for (x, y) in a.iter().zip(s.iter()) {
            assert_relative_eq!(x, y, max_relative = 1e-15);
        }
        let mut missing = b.clone();
        missing.y_high = None;
        assert!(matches!(
            weighted_average(&missing, &l),
            Err(Error::MissingSource { which: "y_high", .. })
        ));
    }

    #[test]
    fn loess_reproduces_quadratic_and_constant() {
        let x: Vec<f64> = (0..30).map(|i| i as f64 * 0.37 - 2.0).collect();
        let y: Vec<f64> = x.iter().map(|t| 1.5 - 0.7 * t + 0.3 * t * t).collect();
        for span in [0.2, 0.5, 0.75, 1.0] {
            let s = loess_smooth(&y, &x, span).unwrap();
            for (a, b) in s.iter().zip(&y) {
                assert!((a - b).abs() < 1e-8, "span {span}");
            }
        }
        let c = loess_smooth(&[2.5; 10], &x[..10], 0.5).unwrap();
        assert!(c.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn loess_reduces_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 200;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64 * 2.0 * PI).collect();
        let sd = 0.3;
        let truth: Vec<f64> = x.iter().map(|t| t.sin()).collect();
        let y: Vec<f64> = truth
            .iter()
            .map(|t| t + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let s = loess_smooth(&y, &x, 0.3).unwrap();
        let resid = s.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
        assert!(resid < sd * sd, "{resid}");
    }

    #[test]
    fn loess_degenerate_window() {
        assert!(matches!(
            loess_smooth(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0; 5], 0.5),
            Err(Error::SingularFit(_))
        ));
        assert!(loess_smooth(&[1.0; 4], &[1.0, 2.0, 3.0, 4.0], 0.5).is_err());
    }

    /// Batches whose low-resolution runs have variance `v(k) = 10^a k^slope`, with a high
    /// resolution run whose variance is `v(k) / c`.
    fn power_law_batches(seed: u64, slope: f64, c: f64, nb: usize, runs: usize) -> Vec<SpectraBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k: Vec<f64> = (0..80).map(|i| 10f64.powf(-1.5 + 1.5 * i as f64 / 79.0)).collect();
        let grid = WavenumberGrid::new(k.clone()).unwrap();
        (0..nb)
            .map(|b| {
                let sd: Vec<f64> = k.iter().map(|kk| (1e-3 * kk.powf(slope)).sqrt()).collect();
                let low = DMatrix::from_fn(runs, k.len(), |_, i| {
                    sd[i] * rng.sample::<f64, _>(StandardNormal)
                });
                let high = DVector::from_fn(k.len(), |i, _| {
                    sd[i] / c.sqrt() * rng.sample::<f64, _>(StandardNormal)
                });
                SpectraBatch::new(format!("b{b}"), grid.clone(), None, Some(low), Some(high), None).unwrap()
            })
            .collect()
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(|a, b| a.total_cmp(b));
        let m = v.len() / 2;
        if v.len() % 2 == 0 {
            0.5 * (v[m - 1] + v[m])
        } else {
            v[m]
        }
    }

    #[test]
    fn trigamma_known_values() {
        let pi2 = std::f64::consts::PI.powi(2);
        assert!((trigamma(1.0) - pi2 / 6.0).abs() < 1e-12);
        assert!((trigamma(0.5) - pi2 / 2.0).abs() < 1e-12);
        assert!((trigamma(7.5) - 0.142_615_896_696_704).abs() < 1e-12);
    }

    #[test]
    fn precision_regression_recovers_power_law() {
        let fits: Vec<PrecisionModel> = (0..20)
            .map(|s| fit_precisions(&power_law_batches(100 + s, -2.0, 3.73, 8, 16), Interval::all()).unwrap())
            .collect();
        for f in &fits {
            assert!((f.slope + 2.0).abs() < 0.1, "slope {}", f.slope);
        }
        let c = median(fits.iter().map(|f| f.c).collect());
        assert!((3.0..=4.5).contains(&c), "c {c}");
        // precision is the reciprocal of the fitted variance
        let f = &fits[0];
        assert!(f.p.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn precision_regression_null_slope() {
        for s in 0..5 {
            let f = fit_precisions(&power_law_batches(500 + s, 0.0, 2.0, 8, 16), Interval::all()).unwrap();
            assert!(f.slope.abs() < 0.05, "{}", f.slope);
        }
    }

    #[test]
    fn precision_regression_needs_replicates() {
        let mut b = power_law_batches(1, -2.0, 3.0, 1, 2);
        b[0].y_low = Some(b[0].y_low.as_ref().unwrap().rows(0, 1).into_owned());
        assert!(matches!(
            fit_precisions(&b, Interval::all()),
            Err(Error::InsufficientReplicates { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn diagonal_convention_arithmetic() {
        let b = batch_with([0.0; 3], [0.0; 3], &[[0.0; 3], [1.0; 3]], [0.0; 3]);
        let l = Lambdas {
            anchor: DVector::from_vec(vec![1e8, 1e8, 1e8]),
            low: DVector::from_vec(vec![16.0, 16.0, 16.0]),
            high: DVector::from_vec(vec![4.0, 4.0, 4.0]),
            anchor_source: AnchorSource::Perturbation,
        };
        let opts = ErrorCovOptions {
            convention: ErrorCovConvention::Diagonal,
            ..Default::default()
        };
        let ws = estimate_error_cov(&b, &PrecisionModel::unit(3), &l, &opts).unwrap();
        assert_relative_eq!(ws.sigma_eps[(0, 0)], 1.0 / (1e8 + 16.0 + 4.0), max_relative = 1e-14);
        assert_eq!(ws.sigma_eps[(0, 1)], 0.0);
    }

    fn matern_runs(seed: u64, x: &[f64], runs: usize, scale: f64, theta: f64) -> DMatrix<f64> {
        let cov = matern52_matrix(x, &MaternParams::new(theta, scale, 1e-10).unwrap()).unwrap();
        let d = GaussianDist::new(DVector::zeros(x.len()), cov, JitterPolicy::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = DMatrix::zeros(runs, x.len());
        for r in 0..runs {
            m.set_row(r, &correlated_normal(d.factor(), &mut rng).transpose());
        }
        m
    }

    #[test]
    fn matern_fit_recovers_lengthscale() {
        let x: Vec<f64> = (0..60).map(|i| i as f64 / 59.0).collect();
        let mut within = 0;
        for s in 0..20 {
            let runs = matern_runs(900 + s, &x, 8, 0.1, 0.05);
            let samples: Vec<DVector<f64>> = runs.row_iter().map(|r| r.transpose()).collect();
            let fit = fit_matern_covariance(&x, &samples).unwrap();
            if fit.lengthscale > 0.025 && fit.lengthscale < 0.1 {
                within += 1;
            }
        }
        assert_eq!(within, 20);
    }

    #[test]
    fn propagated_collapses_to_diagonal_when_low_covariance_is_diagonal() {
        // with L_low S_low L_low = L_low the propagated form is (sum L)^{-1}
        let l = Lambdas {
            anchor: DVector::from_vec(vec![1e8, 0.0, 0.0]),
            low: DVector::from_vec(vec![0.0, 16.0, 0.0]),
            high: DVector::from_vec(vec![0.0, 4.0, 8.0]),
            anchor_source: AnchorSource::Perturbation,
        };
        let total = l.total();
        let s_low = DMatrix::from_diagonal(&l.low.map(|v| if v > 0.0 { 1.0 / v } else { 0.0 }));
        let n = 3;
        let prop = DMatrix::from_fn(n, n, |i, j| {
            let mut v = l.low[i] * s_low[(i, j)] * l.low[j];
            if i == j {
                v += l.anchor[i] + l.high[i];
            }
            v / (total[i] * total[j])
        });
        for i in 0..n {
            assert_relative_eq!(prop[(i, i)], 1.0 / total[i], max_relative = 1e-14);
        }
    }

    #[test]
    fn dense_conventions_are_psd_and_anchored() {
        let k: Vec<f64> = (0..60).map(|i| 10f64.powf(-2.5 + 2.0 * i as f64 / 59.0)).collect();
        let grid = WavenumberGrid::new(k).unwrap();
        let runs = matern_runs(3, grid.x(), 16, 0.01, 0.01);
        let base = DVector::from_fn(grid.len(), |i, _| grid.x()[i].sin());
        let low = DMatrix::from_fn(16, grid.len(), |r, i| base[i] + runs[(r, i)]);
        let batch = SpectraBatch::new(
            "c",
            grid.clone(),
            Some(base.clone()),
            Some(low),
            Some(base.clone()),
            None,
        )
        .unwrap();
        let prec = PrecisionModel::unit(grid.len());
        let l = build_lambdas(&grid, &prec, &ValidityRanges::mira_titan(), 16).unwrap();
        for conv in [
            ErrorCovConvention::Diagonal,
            ErrorCovConvention::Literal,
            ErrorCovConvention::Propagated,
        ] {
            for detrend in [Detrend::RunMean, Detrend::Loess { span: 0.75 }] {
                let ws = estimate_error_cov(&batch, &prec, &l, &ErrorCovOptions { convention: conv, detrend }).unwrap();
                assert!(ws.sigma_eps.diagonal().iter().all(|&d| d > 0.0));
                assert_eq!(ws.sigma_eps, ws.sigma_eps.transpose());
                assert!(chol(&ws.sigma_eps, JitterPolicy::default(), "t").is_ok());
                if conv != ErrorCovConvention::Literal {
                    for i in 0..grid.len() {
                        if l.anchor[i] > 0.0 {
                            assert!(ws.sigma_eps[(i, i)] <= 2e-8, "{conv:?} {}", ws.sigma_eps[(i, i)]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("dgpemu-spectra-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c1.csv");
        let b = batch_with([0.1, 0.2, 0.3], [1.0, 2.0, 3.0], &[[4.0, 5.0, 6.0], [7.0, 8.0, 9.125]], [1.5, 2.5, 3.5]);
        b.write_csv(&path).unwrap();
        let back = SpectraBatch::read_csv(&path, "t").unwrap();
        assert_eq!(back, b);
        std::fs::remove_dir_all(&dir).ok();
    }
}
