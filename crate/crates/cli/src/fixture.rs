//! Synthetic multi-fidelity spectra in the Mira-Titan layout.

use std::path::Path;

use dgpemu::gaussmath::{chol, correlated_normal, JitterPolicy};
use dgpemu::kernelcov::{matern52_matrix, MaternParams};
use dgpemu::rng::named_stream;
use dgpemu::spectra::{fmt17, from_emulation_space, SpectraBatch, WavenumberGrid};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{CliError, CliResult, Context};
use crate::io::write_atomic;

pub const PARAM_NAMES: [&str; 3] = ["omega_m", "sigma_8", "n_s"];
const PARAM_RANGES: [(f64, f64); 3] = [(0.12, 0.155), (0.7, 0.9), (0.93, 1.0)];
/// High- to low-resolution precision ratio used to draw the high-resolution run.
pub const FIXTURE_PRECISION_RATIO: f64 = 3.73;
/// Variance of one low-resolution run at k = 0.04 in emulation space.
const BASE_VARIANCE: f64 = 1e-4;
const NOISE_LENGTHSCALE: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct FixtureSpec {
    pub cosmologies: usize,
    pub points: usize,
    pub runs: usize,
    pub k_min: f64,
    pub k_max: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            cosmologies: 6,
            points: 60,
            runs: 16,
            k_min: 1e-3,
            k_max: 5.0,
            seed: 1,
        }
    }
}

pub fn log_grid(k_min: f64, k_max: f64, n: usize) -> Vec<f64> {
    let (a, b) = (k_min.log10(), k_max.log10());
    (0..n)
        .map(|i| {
            if i + 1 == n {
                k_max
            } else {
                10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)
            }
        })
        .collect()
}

/// Smooth emulation-space curve for parameters `psi`.
pub fn truth_curve(x: &[f64], psi: &[f64]) -> DVector<f64> {
    let (om, s8, ns) = (psi[0], psi[1], psi[2]);
    DVector::from_iterator(
        x.len(),
        x.iter().map(|&t| {
            2.0 * (s8 / 0.8).log10()
                + (ns - 0.96) * (t + 1.0)
                + 1.2 * ((t + 0.8 + 10.0 * (om - 0.14)) / 0.9).tanh()
                + 0.6 * t
                + 0.05 * (3.0 * t).sin() * om / 0.14
        }),
    )
}

/// Per-wavenumber variance of one low-resolution run; slope -2 in log-log.
pub fn run_variance(k: f64) -> f64 {
    BASE_VARIANCE * (k / 0.04).powi(-2)
}

/// One cosmology: anchor biased above k = 0.04, low runs biased above 0.25.
pub fn generate_batch<R: Rng + ?Sized>(
    id: &str,
    k: &[f64],
    psi: &[f64],
    runs: usize,
    noise: &dgpemu::gaussmath::Factor,
    rng: &mut R,
) -> dgpemu::Result<SpectraBatch> {
    let grid = WavenumberGrid::new(k.to_vec())?;
    let x = grid.x().to_vec();
    let n = x.len();
    let truth = truth_curve(&x, psi);
    let sd: Vec<f64> = k.iter().map(|&v| run_variance(v).sqrt()).collect();
    let anchor_edge = 0.04f64.log10();
    let low_edge = 0.25f64.log10();

    let y_p = DVector::from_fn(n, |i, _| truth[i] + 0.3 * (x[i] - anchor_edge).max(0.0).powi(2));
    let mut low = DMatrix::zeros(runs, n);
    for r in 0..runs {
        let e = correlated_normal(noise, rng);
        for i in 0..n {
            low[(r, i)] = truth[i] + sd[i] * e[i] - 0.2 * (x[i] - low_edge).max(0.0).powi(2);
        }
    }
    let e = correlated_normal(noise, rng);
    let hs = FIXTURE_PRECISION_RATIO.sqrt();
    let y_high = DVector::from_fn(n, |i, _| truth[i] + sd[i] / hs * e[i]);

    let power = |v: &DVector<f64>| from_emulation_space(v.as_slice(), &grid);
    let mut low_p = low.clone();
    for (i, row) in low.row_iter().enumerate() {
        let p = from_emulation_space(&row.iter().copied().collect::<Vec<_>>(), &grid)?;
        low_p.set_row(i, &p.transpose());
    }
    SpectraBatch::new(
        id,
        grid.clone(),
        Some(power(&y_p)?),
        Some(low_p),
        Some(power(&y_high)?),
        Some(power(&truth)?),
    )
}

/// Writes `spectra/<id>.csv` for each cosmology plus `params.csv`.
pub fn write_fixture(dir: &Path, spec: &FixtureSpec) -> CliResult<()> {
    if spec.cosmologies < 2 || spec.points < 4 || spec.runs < 2 {
        return Err(CliError::Usage(
            "a fixture needs at least 2 cosmologies, 4 wavenumbers and 2 low-resolution runs".into(),
        ));
    }
    if !(spec.k_min > 0.0 && spec.k_max > spec.k_min) {
        return Err(CliError::Usage("wavenumber range must satisfy 0 < k_min < k_max".into()));
    }
    let k = log_grid(spec.k_min, spec.k_max, spec.points);
    let x: Vec<f64> = k.iter().map(|v| v.log10()).collect();
    let corr = matern52_matrix(&x, &MaternParams::new(NOISE_LENGTHSCALE, 1.0, 1e-8).ctx(|| "fixture".into())?)
        .ctx(|| "fixture noise".into())?;
    let noise = chol(&corr, JitterPolicy::default(), "fixture noise").ctx(|| "fixture noise".into())?;

    let spectra = dir.join("spectra");
    std::fs::create_dir_all(&spectra).ctx(|| format!("creating {}", spectra.display()))?;
    let mut params = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["cosmology_id"];
    header.extend(PARAM_NAMES);
    let csv_err = |e: csv::Error| CliError::Usage(format!("csv: {e}"));
    params.write_record(&header).map_err(csv_err)?;

    for c in 0..spec.cosmologies {
        let id = format!("c{c:03}");
        let mut rng = named_stream(spec.seed, &["fixture", &id]);
        let psi: Vec<f64> = PARAM_RANGES.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect();
        let batch = generate_batch(&id, &k, &psi, spec.runs, &noise, &mut rng).ctx(|| format!("fixture {id}"))?;
        let path = spectra.join(format!("{id}.csv"));
        let tmp = spectra.join(format!(".{id}.csv.tmp"));
        batch.write_csv(&tmp).ctx(|| format!("writing {}", path.display()))?;
        std::fs::rename(&tmp, &path).ctx(|| format!("renaming into {}", path.display()))?;
        let mut rec = vec![id.clone()];
        rec.extend(psi.iter().map(|v| fmt17(*v)));
        params.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = params.into_inner().map_err(|e| CliError::Usage(format!("csv: {e}")))?;
    write_atomic(&dir.join("params.csv"), &bytes)
}
