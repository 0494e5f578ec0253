//! Batch front end: predict, simulate and fit.
//!
//! Settings come from built-in defaults, then a JSON config file, then
//! command-line flags (`--set key=value` or the named shortcuts), with later
//! sources winning. The output directory is `--out-dir`, else the config's
//! `out_dir`, else `$NCSPIN_OUT_DIR`, else `ncspin-out`.

mod commands;

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::coherence::PulseSequence;
use crate::error::{Error, Result};
use crate::frames::{anisotropy_angle, GTensor};
use crate::io;
use crate::species::{default_registry, SpeciesRegistry};

pub const OUT_DIR_ENV: &str = "NCSPIN_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "ncspin-out";

#[derive(Debug, Parser)]
#[command(name = "ncspin", version, about = "Electron-nuclear magnon and coherence toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Species registry JSON.
    #[arg(long, global = true)]
    pub registry: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Electron splittings in Hz, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub omega_e: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub sin_phi0: Option<f64>,
    /// Bare electron Rabi frequency in Hz.
    #[arg(long, global = true)]
    pub omega_rabi: Option<f64>,
    /// Override any config key; the value is parsed as JSON, falling back to a string.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tabulate the magnon Rabi rate against the electron splitting.
    PredictOmegaMag,
    #[command(subcommand)]
    Simulate(SimulateCommand),
    #[command(subcommand)]
    Fit(FitCommand),
}

#[derive(Debug, Subcommand)]
pub enum SimulateCommand {
    /// CP1/CP2 visibility curves, one CSV per sequence and splitting.
    Visibility,
    /// Spin-down population over drive detuning and time.
    SidebandMap,
    /// Resonant magnon Rabi traces on the negative and positive sideband.
    Rabi,
}

#[derive(Debug, Subcommand)]
pub enum FitCommand {
    /// Single-nucleus hyperfine constant and nucleus count from sideband shifts.
    Knight(KnightArgs),
    /// Global CP1/CP2 visibility fit.
    Visibility {
        /// Visibility CSVs, each with a `.json` sidecar.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Echo decay of one trace, or T2 scaling with `--scaling`.
    Echo {
        input: PathBuf,
        /// Input rows are `omega_e_hz, t2_s[, sigma]`.
        #[arg(long)]
        scaling: bool,
    },
    /// Magnon Rabi rates with a shared dephasing rate.
    Magnon(MagnonArgs),
    /// Spin-flip rate from the off-resonant background.
    Background { input: PathBuf },
}

#[derive(Debug, Args)]
pub struct KnightArgs {
    #[arg(long, requires_all = ["negative_down", "positive_up", "positive_down"], conflicts_with = "differences")]
    pub negative_up: Option<PathBuf>,
    #[arg(long)]
    pub negative_down: Option<PathBuf>,
    #[arg(long)]
    pub positive_up: Option<PathBuf>,
    #[arg(long)]
    pub positive_down: Option<PathBuf>,
    /// Splittings directly: `neg,neg_sigma,pos,pos_sigma` in Hz.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required_unless_present = "negative_up")]
    pub differences: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct MagnonArgs {
    #[arg(long)]
    pub negative: PathBuf,
    #[arg(long)]
    pub positive: PathBuf,
    /// Peak-to-peak Rabi amplitude in counts; inputs are converted to population.
    #[arg(long, conflicts_with = "calibration")]
    pub rabi_amplitude: Option<f64>,
    /// Electron Rabi trace `(t, counts)` whose fitted amplitude converts the inputs.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
}

/// Effective run parameters. Frequencies in Hz, times in seconds, rates in 1/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub registry: Option<PathBuf>,
    /// Overrides the registry field.
    pub field_t: Option<f64>,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    pub omega_e0_hz: f64,
    pub sin_phi0: Option<f64>,
    pub g_tensor: Option<GTensor>,
    pub omega_e_hz: Vec<f64>,
    /// Species driven in the magnon and Knight-shift commands.
    pub species: String,
    /// Single-nucleus hyperfine constant.
    pub a_single_hz: f64,
    /// Number of nuclei of `species`.
    pub n_species: f64,
    pub n_total: f64,
    pub omega_rabi_hz: f64,
    /// Fixes the magnon Rabi rate instead of predicting it.
    pub omega_mag_hz: Option<f64>,
    pub b: f64,
    pub v0: f64,
    pub tau_d_s: Option<f64>,
    pub sequences: Vec<PulseSequence>,
    pub t_max_s: f64,
    pub n_times: usize,
    pub detuning_span_hz: f64,
    pub n_detunings: usize,
    pub gamma1_per_s: f64,
    pub gamma_dephasing_per_s: f64,
    pub t2_star_s: f64,
    pub sigma_points: usize,
    pub alpha_bar: f64,
    /// Gaussian noise standard deviation added to simulated outputs.
    pub noise: f64,
    /// Ensemble hyperfine constant for the Knight-shift chain; defaults to the registry value.
    pub hyperfine_a_hz: Option<f64>,
    pub b_min: f64,
    pub b_max: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            registry: None,
            field_t: None,
            out_dir: None,
            seed: 0,
            omega_e0_hz: 3.0e9,
            sin_phi0: None,
            g_tensor: None,
            omega_e_hz: vec![3.0e9, 4.0e9, 5.0e9, 6.0e9],
            species: "75As".into(),
            a_single_hz: 0.28e6,
            n_species: 3.8e4,
            n_total: 7.6e4,
            omega_rabi_hz: 5.2e6,
            omega_mag_hz: None,
            b: 1.0,
            v0: 1.0,
            tau_d_s: None,
            sequences: vec![PulseSequence::Cp1, PulseSequence::Cp2],
            t_max_s: 0.6e-6,
            n_times: 201,
            detuning_span_hz: 100e6,
            n_detunings: 201,
            gamma1_per_s: 3.4e5,
            gamma_dephasing_per_s: 1.0e6,
            t2_star_s: 253e-9,
            sigma_points: 41,
            alpha_bar: 2.28,
            noise: 0.0,
            hyperfine_a_hz: None,
            b_min: 0.95,
            b_max: 1.05,
        }
    }
}

const DEFAULT_SIN_PHI0: f64 = 0.207;

impl RunConfig {
    /// Merges defaults, the config file and flag overrides.
    pub fn resolve(global: &GlobalArgs) -> Result<Self> {
        let mut doc = match serde_json::to_value(Self::default())? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        if let Some(path) = &global.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
            match serde_json::from_str::<Value>(&text)? {
                Value::Object(m) => merge(&mut doc, m),
                _ => return Err(Error::InvalidInput("config must be a JSON object".into())),
            }
        }
        let mut flags = Map::new();
        for kv in &global.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("--set expects KEY=VALUE, got {kv}")))?;
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_owned()));
            flags.insert(k.trim().to_owned(), value);
        }
        if let Some(p) = &global.registry {
            flags.insert("registry".into(), json!(p));
        }
        if let Some(s) = global.seed {
            flags.insert("seed".into(), json!(s));
        }
        if let Some(w) = &global.omega_e {
            flags.insert("omega_e_hz".into(), json!(w));
        }
        if let Some(s) = global.sin_phi0 {
            flags.insert("sin_phi0".into(), json!(s));
        }
        if let Some(w) = global.omega_rabi {
            flags.insert("omega_rabi_hz".into(), json!(w));
        }
        if let Some(d) = &global.out_dir {
            flags.insert("out_dir".into(), json!(d));
        }
        merge(&mut doc, flags);
        let cfg: Self = serde_json::from_value(Value::Object(doc))
            .map_err(|e| Error::InvalidInput(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.registry {
            if !p.exists() {
                return Err(Error::InvalidInput(format!("registry file {} does not exist", p.display())));
            }
        }
        if self.sin_phi0.is_some() && self.g_tensor.is_some() {
            return Err(Error::InvalidInput("give sin_phi0 or g_tensor, not both".into()));
        }
        if self.omega_e_hz.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidInput("omega_e_hz values must be positive".into()));
        }
        if !(self.omega_e0_hz > 0.0) {
            return Err(Error::InvalidInput("omega_e0_hz must be positive".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::InvalidInput("noise must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<SpeciesRegistry> {
        let reg = match &self.registry {
            Some(p) => SpeciesRegistry::load(p)?,
            None => default_registry(),
        };
        match self.field_t {
            Some(b) => reg.with_field(b),
            None => Ok(reg),
        }
    }

    pub fn phi0(&self) -> Result<f64> {
        match (self.sin_phi0, self.g_tensor) {
            (_, Some(g)) => anisotropy_angle(g),
            (Some(s), None) if (-1.0..=1.0).contains(&s) => Ok(s.asin()),
            (Some(s), None) => Err(Error::InvalidInput(format!("sin_phi0 {s} outside [-1, 1]"))),
            (None, None) => Ok(DEFAULT_SIN_PHI0.asin()),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }
}

fn merge(doc: &mut Map<String, Value>, overrides: Map<String, Value>) {
    for (k, v) in overrides {
        doc.insert(k, v);
    }
}

/// Writes outputs and their metadata for one command.
pub(crate) struct Emitter<'a> {
    pub dir: PathBuf,
    pub command: &'a str,
    pub config: &'a RunConfig,
    pub written: Vec<PathBuf>,
}

impl<'a> Emitter<'a> {
    fn new(command: &'a str, config: &'a RunConfig) -> Result<Self> {
        let dir = config.out_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.display().to_string(), source: e })?;
        Ok(Self { dir, command, config, written: Vec::new() })
    }

    fn metadata(&self, extra: Value) -> Value {
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "generated_unix_s": stamp,
            "config": self.config,
            "details": extra,
        })
    }

    /// CSV plus `<name>.meta.json`.
    pub fn csv(&mut self, name: &str, headers: &[&str], rows: &[Vec<f64>], details: Value) -> Result<PathBuf> {
        let path = self.dir.join(name);
        io::write_csv(&path, headers, rows)?;
        io::write_json(&io::metadata_path(&path), &self.metadata(details))?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn json(&mut self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let path = self.dir.join(name);
        io::write_json(&path, value)?;
        self.written.push(path.clone());
        Ok(path)
    }
}

/// Runs a parsed command line and returns the summary printed on success.
pub fn run(cli: Cli) -> Result<Value> {
    let cfg = RunConfig::resolve(&cli.global)?;
    match &cli.command {
        Command::PredictOmegaMag => commands::predict_omega_mag(&cfg),
        Command::Simulate(SimulateCommand::Visibility) => commands::simulate_visibility(&cfg),
        Command::Simulate(SimulateCommand::SidebandMap) => commands::simulate_sideband_map(&cfg),
        Command::Simulate(SimulateCommand::Rabi) => commands::simulate_rabi(&cfg),
        Command::Fit(FitCommand::Knight(args)) => commands::fit_knight(&cfg, args),
        Command::Fit(FitCommand::Visibility { inputs }) => commands::fit_visibility(&cfg, inputs),
        Command::Fit(FitCommand::Echo { input, scaling }) => commands::fit_echo(&cfg, input, *scaling),
        Command::Fit(FitCommand::Magnon(args)) => commands::fit_magnon(&cfg, args),
        Command::Fit(FitCommand::Background { input }) => commands::fit_background(&cfg, input),
    }
}

/// Exit code for a failed run: 2 for bad input, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidInput(_) | Error::Schema { .. } | Error::Csv { .. } | Error::Json(_) | Error::Io { .. } => 2,
        _ => 1,
    }
}

/// Best-effort `error.json` in the output directory the run would have used.
pub fn write_error(global: &GlobalArgs, err: &Error) -> Option<PathBuf> {
    let dir = global
        .out_dir
        .clone()
        .or_else(|| RunConfig::resolve(global).ok().map(|c| c.out_dir()))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))?;
    std::fs::create_dir_all(&dir).ok()?;
    let path = dir.join("error.json");
    io::write_json(&path, &err.to_json()).ok()?;
    Some(path)
}

pub(crate) fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned())
}
