use std::collections::HashMap;
use std::path::{Path, PathBuf};

use dgpemu::artifact::{to_json, BasisArtifact, PosteriorArtifact};
use dgpemu::dgpfco::{fit, posterior_spectrum, DgpConfig};
use dgpemu::gaussmath::{GaussianDist, JitterPolicy, ScoreReport};
use dgpemu::pcemu::{build_basis, PCEmulator};
use dgpemu::rng::{derive_seed, label_hash};
use dgpemu::simstudy::{run_study, study_rows, write_study_csv, SimScenario};
use dgpemu::spectra::{
    build_lambdas, estimate_error_cov, fit_precisions, fmt17, from_emulation_space, PrecisionModel, SpectraBatch,
    WavenumberGrid,
};
use dgpemu::artifact::read_json;
use dgpemu::pcemu::{EmulatorArtifact, EMULATOR_SCHEMA};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::config::{ChainArgs, Convention, InputSpace, Mode, PrecisionSource, RunConfig};
use crate::error::{CliError, CliResult, Context};
use crate::fixture::{write_fixture, FixtureSpec};
use crate::io::{collect_inputs, columns_csv, file_stem, write_atomic, Table};

pub const SIMULATION_CSV: &str = "simulation.csv";
pub const FIT_DIR: &str = "fit";
pub const PRECISION_JSON: &str = "precision.json";
pub const BASIS_JSON: &str = "basis.json";
pub const MEANS_CSV: &str = "posterior_means.csv";
pub const EMULATOR_JSON: &str = "emulator.json";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const SCORE_CURVES_CSV: &str = "score_per_curve.csv";
pub const SCORE_K_CSV: &str = "score_per_k.csv";

fn dgp_config(rc: &RunConfig, chain: &ChainArgs) -> CliResult<DgpConfig> {
    let mut cfg = rc.file.dgp.clone();
    chain.apply(&mut cfg);
    cfg.validate().ctx(|| "dgp configuration".into())?;
    Ok(cfg)
}

pub fn simulate(rc: &RunConfig, scenarios: &[String], reps: Option<usize>, chain: &ChainArgs) -> CliResult<PathBuf> {
    let seed = rc.require_seed("simulate")?;
    let cfg = dgp_config(rc, chain)?;
    let reps = reps.or(rc.file.simulate.replicates).unwrap_or(20);
    let labels = if scenarios.is_empty() {
        rc.file.simulate.scenarios.clone()
    } else {
        scenarios.to_vec()
    };
    let list: Vec<SimScenario> = if labels.is_empty() {
        SimScenario::full_grid(reps, seed)
    } else {
        labels
            .iter()
            .map(|l| {
                let mut s: SimScenario = l.parse().map_err(|e: dgpemu::Error| CliError::Usage(e.to_string()))?;
                s.replicates = reps;
                s.seed = seed;
                Ok(s)
            })
            .collect::<CliResult<_>>()?
    };
    let outcomes = run_study(&list, &cfg).ctx(|| "simulation study".into())?;
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for o in outcomes {
        match o.result {
            Ok(r) => ok.push(r),
            Err(e) => failed.push((format!("{} replicate {}", o.scenario, o.rep), e)),
        }
    }
    let mut bytes = Vec::new();
    write_study_csv(&mut bytes, &study_rows(&ok)).ctx(|| "simulation csv".into())?;
    let path = rc.output_dir.join(SIMULATION_CSV);
    write_atomic(&path, &bytes)?;
    batch_outcome(failed)?;
    Ok(path)
}

/// Turns per-item failures into one error naming each failing item.
fn batch_outcome(failed: Vec<(String, dgpemu::Error)>) -> CliResult<()> {
    if failed.is_empty() {
        return Ok(());
    }
    for (what, e) in &failed {
        log::error!("{what}: {e}");
    }
    if failed.len() == 1 {
        let (what, e) = failed.into_iter().next().expect("one failure");
        return Err(CliError::core(what, e));
    }
    let numerical = failed.iter().any(|(_, e)| e.is_numerical());
    let names: Vec<&str> = failed.iter().map(|(w, _)| w.as_str()).collect();
    Err(CliError::Partial {
        summary: format!("{} items failed: {}", failed.len(), names.join(", ")),
        numerical,
    })
}

pub struct FitOptions {
    pub mode: Option<Mode>,
    pub convention: Option<Convention>,
    pub keep_warps: bool,
    pub keep_draws: bool,
    pub chain: ChainArgs,
}

fn read_batches(rc: &RunConfig, input: &Path) -> CliResult<Vec<SpectraBatch>> {
    let files = collect_inputs(input, "csv")?;
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let id = file_stem(&f);
        let b = SpectraBatch::read_csv(&f, id.clone()).ctx(|| format!("reading {}", f.display()))?;
        let b = match rc.file.spectra.input_space {
            InputSpace::Power => b.into_emulation_space().ctx(|| format!("transforming {id}"))?,
            InputSpace::Emulation => b,
        };
        out.push(b);
    }
    let first = out[0].grid.clone();
    if let Some(b) = out.iter().find(|b| !b.grid.same_as(&first)) {
        return Err(CliError::Usage(format!(
            "cosmology {} is on a different wavenumber grid than {}",
            b.cosmology_id, out[0].cosmology_id
        )));
    }
    Ok(out)
}

pub fn fit_command(rc: &RunConfig, input: &Path, opts: &FitOptions) -> CliResult<Vec<PathBuf>> {
    let seed = rc.require_seed("fit")?;
    let base = dgp_config(rc, &opts.chain)?;
    let mode = rc.mode(opts.mode);
    let ranges = rc.ranges(mode);
    let cov_opts = rc.error_cov_options(mode, opts.convention);
    let batches = read_batches(rc, input)?;
    let grid = batches[0].grid.clone();

    let precision = match rc.file.spectra.precision {
        PrecisionSource::Fitted => fit_precisions(&batches, ranges.low).ctx(|| "precision regression".into())?,
        PrecisionSource::Unit => PrecisionModel::unit(grid.len()),
    };
    let prec_bytes = to_json(&precision).ctx(|| "precision model".into())?;
    write_atomic(&rc.output_dir.join(PRECISION_JSON), prec_bytes.as_bytes())?;
    log::info!("precision ratio c = {:.3}, slope = {:.3}", precision.c, precision.slope);

    let dir = rc.output_dir.join(FIT_DIR);
    let results: Vec<(String, dgpemu::Result<PosteriorArtifact>)> = batches
        .par_iter()
        .map(|b| {
            let id = b.cosmology_id.clone();
            let res = (|| {
                let lambdas = build_lambdas(&b.grid, &precision, &ranges, b.runs())?;
                let ws = estimate_error_cov(b, &precision, &lambdas, &cov_opts)?;
                let cfg = DgpConfig {
                    seed: derive_seed(seed, &[label_hash("fit"), label_hash(&id)]),
                    ..base.clone()
                };
                let chain = fit(&ws, &cfg)?;
                log::info!(
                    "{id}: acceptance {:.2} / {:.2}, mean ESS shrinks {:.1}",
                    chain.accept_rate_theta_s,
                    chain.accept_rate_theta_w,
                    chain.mean_shrinks
                );
                let post = posterior_spectrum(&chain, &ws, &cfg, cfg.draws_per_sample, opts.keep_draws)?;
                Ok(PosteriorArtifact::new(&ws, &cfg, &chain, post, opts.keep_warps))
            })();
            (id, res)
        })
        .collect();

    let mut written = Vec::new();
    let mut failed = Vec::new();
    for (id, res) in results {
        match res {
            Ok(art) => {
                let path = dir.join(format!("{id}.json"));
                write_atomic(&path, to_json(&art).ctx(|| id.clone())?.as_bytes())?;
                let p = &art.posterior;
                let summary = columns_csv(&["k", "mean", "lower", "upper"], &[&art.k, &p.mean, &p.lower, &p.upper])?;
                write_atomic(&dir.join(format!("{id}_summary.csv")), &summary)?;
                written.push(path);
            }
            Err(e) => failed.push((format!("cosmology {id}"), e)),
        }
    }
    batch_outcome(failed)?;
    Ok(written)
}

fn read_posteriors(input: &Path) -> CliResult<Vec<PosteriorArtifact>> {
    let mut arts = Vec::new();
    for f in collect_inputs(input, "json")? {
        arts.push(PosteriorArtifact::read(&f).ctx(|| format!("reading {}", f.display()))?);
    }
    arts.sort_by(|a, b| a.cosmology_id.cmp(&b.cosmology_id));
    Ok(arts)
}

fn wide_table(ids: Vec<String>, k: &[f64], rows: Vec<Vec<f64>>) -> Table {
    Table {
        columns: k.iter().map(|v| fmt17(*v)).collect(),
        ids,
        rows,
    }
}

pub fn basis_command(rc: &RunConfig, input: &Path, p_eta: Option<usize>) -> CliResult<PathBuf> {
    let arts = read_posteriors(input)?;
    let k = arts[0].k.clone();
    if let Some(a) = arts.iter().find(|a| a.k != k) {
        return Err(CliError::Usage(format!(
            "{} is on a different wavenumber grid than {}",
            a.cosmology_id, arts[0].cosmology_id
        )));
    }
    let ids: Vec<String> = arts.iter().map(|a| a.cosmology_id.clone()).collect();
    let rows: Vec<Vec<f64>> = arts.iter().map(|a| a.posterior.mean.clone()).collect();
    let curves = DMatrix::from_fn(rows.len(), k.len(), |i, j| rows[i][j]);
    let p = p_eta.unwrap_or(rc.file.emulator.p_eta);
    let basis = build_basis(&curves, p).ctx(|| "basis".into())?;
    let art = BasisArtifact::new(k.clone(), ids.clone(), basis);
    let path = rc.output_dir.join(BASIS_JSON);
    write_atomic(&path, to_json(&art).ctx(|| "basis".into())?.as_bytes())?;
    write_atomic(&rc.output_dir.join(MEANS_CSV), &wide_table(ids, &k, rows).to_csv("cosmology_id")?)?;
    Ok(path)
}

pub fn emulate_command(rc: &RunConfig, basis: Option<&Path>, params: &Path) -> CliResult<PathBuf> {
    let basis_path = basis.map_or_else(|| rc.output_dir.join(BASIS_JSON), Path::to_path_buf);
    let art = BasisArtifact::read(&basis_path).ctx(|| format!("reading {}", basis_path.display()))?;
    let table = Table::read(params)?;
    let by_id: HashMap<&str, &Vec<f64>> = table.ids.iter().map(String::as_str).zip(&table.rows).collect();
    let d = table.columns.len();
    let mut inputs = DMatrix::zeros(art.cosmology_ids.len(), d);
    for (i, id) in art.cosmology_ids.iter().enumerate() {
        let row = by_id
            .get(id.as_str())
            .ok_or_else(|| CliError::Usage(format!("{} has no row for cosmology {id}", params.display())))?;
        inputs.row_mut(i).copy_from_slice(row);
    }
    let emu = PCEmulator::from_basis(art.k.clone(), art.basis, &inputs, &rc.file.emulator.gp_options())
        .ctx(|| "emulator fit".into())?;
    let path = rc.output_dir.join(EMULATOR_JSON);
    write_atomic(&path, to_json(&emu.to_artifact()).ctx(|| "emulator".into())?.as_bytes())?;
    Ok(path)
}

pub fn predict_command(rc: &RunConfig, emulator: Option<&Path>, params: &Path, power: bool) -> CliResult<PathBuf> {
    let emu_path = emulator.map_or_else(|| rc.output_dir.join(EMULATOR_JSON), Path::to_path_buf);
    let art: EmulatorArtifact = read_json(&emu_path, EMULATOR_SCHEMA).ctx(|| format!("reading {}", emu_path.display()))?;
    let emu = PCEmulator::from_artifact(&art).ctx(|| "emulator".into())?;
    let table = Table::read(params)?;
    if table.rows.is_empty() {
        return Err(CliError::Usage(format!("{} has no parameter rows", params.display())));
    }
    let grid = WavenumberGrid::new(emu.grid.clone()).ctx(|| "emulator grid".into())?;
    let rows = table
        .ids
        .iter()
        .zip(&table.rows)
        .map(|(id, psi)| {
            let y = emu.predict(psi).ctx(|| format!("prediction for {id}"))?;
            let y = if power {
                from_emulation_space(y.as_slice(), &grid).ctx(|| format!("prediction for {id}"))?
            } else {
                y
            };
            Ok(y.iter().copied().collect())
        })
        .collect::<CliResult<Vec<Vec<f64>>>>()?;
    let path = rc.output_dir.join(PREDICTIONS_CSV);
    write_atomic(&path, &wide_table(table.ids.clone(), &emu.grid, rows).to_csv("cosmology_id")?)?;
    Ok(path)
}

/// Reference curves, with predictive distributions when posterior draws are available.
struct Reference {
    k: Vec<f64>,
    curves: HashMap<String, Vec<f64>>,
    dists: HashMap<String, GaussianDist>,
}

fn draws_dist(draws: &[Vec<f64>]) -> dgpemu::Result<GaussianDist> {
    let t = draws.len() as f64;
    let n = draws[0].len();
    let mean = DVector::from_fn(n, |i, _| draws.iter().map(|d| d[i]).sum::<f64>() / t);
    let mut cov = DMatrix::zeros(n, n);
    for d in draws {
        let c = DVector::from_fn(n, |i, _| d[i] - mean[i]);
        cov += &c * c.transpose();
    }
    cov /= (t - 1.0).max(1.0);
    GaussianDist::new(mean, cov, JitterPolicy::default())
}

fn read_reference(path: &Path) -> CliResult<Reference> {
    if path.is_dir() {
        let arts = read_posteriors(path)?;
        let k = arts[0].k.clone();
        let mut curves = HashMap::new();
        let mut dists = HashMap::new();
        for a in arts {
            if a.k != k {
                return Err(CliError::Usage(format!("{} is on a different grid", a.cosmology_id)));
            }
            if let Some(d) = a.posterior.draws.as_ref().filter(|d| d.len() > 1) {
                dists.insert(a.cosmology_id.clone(), draws_dist(d).ctx(|| a.cosmology_id.clone())?);
            }
            curves.insert(a.cosmology_id.clone(), a.posterior.mean);
        }
        return Ok(Reference { k, curves, dists });
    }
    let t = Table::read(path)?;
    Ok(Reference {
        k: t.numeric_columns()?,
        curves: t.ids.into_iter().zip(t.rows).collect(),
        dists: HashMap::new(),
    })
}

fn same_grid(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(y.abs()))
}

pub struct ScoreOutput {
    pub per_curve: PathBuf,
    pub per_k: PathBuf,
}

pub fn score_command(rc: &RunConfig, predictions: &Path, reference: &Path) -> CliResult<ScoreOutput> {
    let pred = Table::read(predictions)?;
    let k = pred.numeric_columns()?;
    let refs = read_reference(reference)?;
    if !same_grid(&k, &refs.k) {
        return Err(CliError::Usage(format!(
            "wavenumber grids differ: {} has {} points, {} has {}",
            predictions.display(),
            k.len(),
            reference.display(),
            refs.k.len()
        )));
    }
    if pred.rows.is_empty() {
        return Err(CliError::Usage(format!("{} has no curves", predictions.display())));
    }
    let n = k.len();
    let with_ls = pred.ids.iter().all(|id| refs.dists.contains_key(id));
    let mut per_k = vec![0.0; n];
    let mut curve_mse = Vec::new();
    let mut curve_ls = Vec::new();
    for (id, row) in pred.ids.iter().zip(&pred.rows) {
        let r = refs
            .curves
            .get(id)
            .ok_or_else(|| CliError::Usage(format!("no reference curve for {id}")))?;
        let mut sse = 0.0;
        for i in 0..n {
            let e2 = (row[i] - r[i]).powi(2);
            per_k[i] += e2;
            sse += e2;
        }
        curve_mse.push(sse / n as f64);
        if with_ls {
            let y = DVector::from_column_slice(row);
            curve_ls.push(ScoreReport::evaluate(&y, &refs.dists[id]).ctx(|| format!("log score for {id}"))?.log_score);
        }
    }
    let m = pred.rows.len() as f64;
    per_k.iter_mut().for_each(|v| *v /= m);

    let mut curves = Table {
        columns: vec!["mse".into()],
        ids: pred.ids.clone(),
        rows: curve_mse.iter().map(|v| vec![*v]).collect(),
    };
    if with_ls {
        curves.columns.push("log_score".into());
        for (row, ls) in curves.rows.iter_mut().zip(&curve_ls) {
            row.push(*ls);
        }
    }
    let out = ScoreOutput {
        per_curve: rc.output_dir.join(SCORE_CURVES_CSV),
        per_k: rc.output_dir.join(SCORE_K_CSV),
    };
    write_atomic(&out.per_curve, &curves.to_csv("cosmology_id")?)?;
    write_atomic(&out.per_k, &columns_csv(&["k", "mse"], &[&k, &per_k])?)?;
    Ok(out)
}

pub fn fixture_command(rc: &RunConfig, mut spec: FixtureSpec) -> CliResult<PathBuf> {
    if let Some(s) = rc.seed {
        spec.seed = s;
    }
    write_fixture(&rc.output_dir, &spec)?;
    Ok(rc.output_dir.clone())
}
