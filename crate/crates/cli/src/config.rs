use std::path::{Path, PathBuf};

use dgpemu::dgpfco::DgpConfig;
use dgpemu::pcemu::{WeightGpOptions, DEFAULT_P_ETA};
use dgpemu::spectra::{Detrend, ErrorCovConvention, ErrorCovOptions, ValidityRanges, DEFAULT_LOESS_SPAN};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    MiraTitan,
    Camb,
    Synthetic,
}

impl Mode {
    pub fn ranges(self) -> ValidityRanges {
        match self {
            Mode::MiraTitan | Mode::Synthetic => ValidityRanges::mira_titan(),
            Mode::Camb => ValidityRanges::camb(),
        }
    }

    pub fn default_convention(self) -> ErrorCovConvention {
        match self {
            Mode::Camb => ErrorCovConvention::Diagonal,
            _ => ErrorCovConvention::Propagated,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    Diagonal,
    Literal,
    Propagated,
}

impl From<Convention> for ErrorCovConvention {
    fn from(c: Convention) -> Self {
        match c {
            Convention::Diagonal => ErrorCovConvention::Diagonal,
            Convention::Literal => ErrorCovConvention::Literal,
            Convention::Propagated => ErrorCovConvention::Propagated,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputSpace {
    /// Raw power `P(k)`.
    #[default]
    Power,
    /// Already `log10(k^1.5 P / 2 pi^2)`.
    Emulation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrecisionSource {
    #[default]
    Fitted,
    Unit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetrendKind {
    #[default]
    Loess,
    RunMean,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectraSection {
    pub input_space: InputSpace,
    pub precision: PrecisionSource,
    pub detrend: DetrendKind,
    pub loess_span: f64,
    pub anchor_precision: Option<f64>,
}

impl Default for SpectraSection {
    fn default() -> Self {
        Self {
            input_space: InputSpace::Power,
            precision: PrecisionSource::Fitted,
            detrend: DetrendKind::Loess,
            loess_span: DEFAULT_LOESS_SPAN,
            anchor_precision: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmulatorSection {
    pub p_eta: usize,
    pub nugget: f64,
    pub alpha: f64,
    pub starts: Option<usize>,
    pub max_iter: usize,
}

impl Default for EmulatorSection {
    fn default() -> Self {
        let gp = WeightGpOptions::default();
        Self {
            p_eta: DEFAULT_P_ETA,
            nugget: gp.nugget,
            alpha: gp.alpha,
            starts: gp.starts,
            max_iter: gp.max_iter,
        }
    }
}

impl EmulatorSection {
    pub fn gp_options(&self) -> WeightGpOptions {
        WeightGpOptions {
            nugget: self.nugget,
            alpha: self.alpha,
            starts: self.starts,
            max_iter: self.max_iter,
            ..WeightGpOptions::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub scenarios: Vec<String>,
    pub replicates: Option<usize>,
}

/// Contents of the `--config` TOML file. Every key is optional.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub mode: Option<Mode>,
    pub convention: Option<Convention>,
    pub dgp: DgpConfig,
    pub spectra: SpectraSection,
    pub emulator: EmulatorSection,
    pub simulate: SimulateSection,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (also DGPEMU_OUTPUT_DIR).
    #[arg(long, global = true, env = "DGPEMU_OUTPUT_DIR")]
    pub output_dir: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

/// Chain length overrides.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct ChainArgs {
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
}

impl ChainArgs {
    pub fn apply(&self, cfg: &mut DgpConfig) {
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.burn_in {
            cfg.burn_in = v;
        }
        if let Some(v) = self.thin {
            cfg.thin = v;
        }
    }
}

/// File values with flags applied on top.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub jobs: Option<usize>,
    pub file: FileConfig,
}

impl RunConfig {
    pub fn resolve(g: &GlobalArgs) -> Result<Self, CliError> {
        let file = match &g.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let output_dir = g
            .output_dir
            .clone()
            .or_else(|| file.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("."));
        let jobs = g.jobs.or(file.jobs);
        if jobs == Some(0) {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        Ok(Self {
            seed: g.seed.or(file.seed),
            output_dir,
            jobs,
            file,
        })
    }

    pub fn require_seed(&self, command: &str) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Usage(format!("`{command}` needs a seed (--seed or `seed` in the config file)")))
    }

    pub fn mode(&self, flag: Option<Mode>) -> Mode {
        flag.or(self.file.mode).unwrap_or(Mode::MiraTitan)
    }

    pub fn error_cov_options(&self, mode: Mode, flag: Option<Convention>) -> ErrorCovOptions {
        let convention = flag
            .or(self.file.convention)
            .map(Into::into)
            .unwrap_or_else(|| mode.default_convention());
        let detrend = match self.file.spectra.detrend {
            DetrendKind::Loess => Detrend::Loess {
                span: self.file.spectra.loess_span,
            },
            DetrendKind::RunMean => Detrend::RunMean,
        };
        ErrorCovOptions { convention, detrend }
    }

    pub fn ranges(&self, mode: Mode) -> ValidityRanges {
        let mut r = mode.ranges();
        if let Some(a) = self.file.spectra.anchor_precision {
            r.anchor_precision = a;
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_rejects_unknown_keys() {
        let c: FileConfig = toml::from_str(
            "seed = 3\nmode = \"camb\"\n[dgp]\niterations = 200\nburn_in = 100\n[emulator]\np_eta = 4\nnugget = 1e-6\n[simulate]\nscenarios = [\"f1A-r5\"]\n",
        )
        .unwrap();
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.mode, Some(Mode::Camb));
        assert_eq!(c.dgp.iterations, 200);
        assert_eq!(c.dgp.thin, DgpConfig::default().thin);
        assert_eq!(c.emulator.p_eta, 4);
        assert_eq!(c.emulator.gp_options().nugget, 1e-6);
        assert!(toml::from_str::<FileConfig>("sed = 3").is_err());
        assert!(toml::from_str::<FileConfig>("[dgp]\niteration = 3").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 1\noutput_dir = \"from-file\"\n").unwrap();
        let g = GlobalArgs {
            config: Some(path),
            seed: Some(9),
            ..Default::default()
        };
        let rc = RunConfig::resolve(&g).unwrap();
        assert_eq!(rc.seed, Some(9));
        assert_eq!(rc.output_dir, PathBuf::from("from-file"));
        assert_eq!(rc.mode(None), Mode::MiraTitan);
        assert_eq!(
            rc.error_cov_options(Mode::Camb, None).convention,
            ErrorCovConvention::Diagonal
        );
    }
}
