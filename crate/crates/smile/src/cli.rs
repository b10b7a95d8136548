//! Command-line front end.
//!
//! Every subcommand also reads a JSON config (`--config`) whose keys are the
//! long flag names in snake_case; flags given on the command line win.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use smile_core::datagen::{build_dataset, DatasetSpec};
use smile_core::diagnostics::{diagnostic_run, even_samples, lemma1_preconditions, DiagnosticTrace};
use smile_core::lmm::{AbundanceMap, EndmemberMatrix, HsiCube};
use smile_core::metrics::{self, MetricsReport};
use smile_core::trainer::{self, initialize, LossRecord, ScalarizationWeights, TrainConfig, TrainState};
use smile_core::unmix::Normalization;
use smile_core::Error as CoreError;

use crate::error::{CliError, Result};
use crate::io;

pub const SEED_ENV: &str = "SMILE_SEED";

#[derive(Debug, Parser)]
#[command(name = "smile", version, about = "Hyperspectral unmixing guided by super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene with known endmembers and abundances.
    Gen(GenArgs),
    /// Train on a cube and write the estimates.
    Train(TrainArgs),
    /// Score estimated endmembers and abundances against the truth.
    Eval(EvalArgs),
    /// Trace the gradient geometry between the two tasks.
    Affinity(AffinityArgs),
    /// Grid search over the loss weights.
    Sweep(SweepArgs),
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Target SNR in dB, or `inf` for a noiseless cube.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrDb(pub f64);

impl FromStr for SnrDb {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "inf" | "+inf" | "Inf" | "infinity" => Ok(SnrDb(f64::INFINITY)),
            t => t.parse::<f64>().map(SnrDb).map_err(|e| format!("{e}")),
        }
    }
}

impl Serialize for SnrDb {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str("inf")
        }
    }
}

impl<'de> Deserialize<'de> for SnrDb {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(v) => Ok(SnrDb(v)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Loss weights written `a,b,c,d` on the command line or as an array in JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Alpha(pub [f64; 4]);

impl FromStr for Alpha {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts = s.split(',').map(|c| c.trim().parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>();
        match parts {
            Ok(v) if v.len() == 4 => Ok(Alpha([v[0], v[1], v[2], v[3]])),
            Ok(v) => Err(format!("expected 4 weights, got {}", v.len())),
            Err(e) => Err(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Dataset1,
    Dataset2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    Smile,
    SingleTask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum NormalizationArg {
    Mean,
    RawSum,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenArgs {
    /// JSON file with defaults for any of these flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endmembers: Option<usize>,
    /// Target SNR in dB, or `inf`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<SnrDb>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Dirichlet concentration of the abundances.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Overwrite one pixel per endmember with a pure pixel.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub pure_pixels: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// Where the observed cube and, optionally, the truth come from.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct DataArgs {
    /// Directory written by `gen`; supplies the cube and any truth files in it.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cube: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_endmembers: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_abundance: Option<PathBuf>,
    /// Number of endmembers; defaults to the truth's.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endmembers: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Loss weights `a1,a2,a3,a4`, nonnegative and summing to 1.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Alpha>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_size: Option<usize>,
    /// Hidden width of the unmixing encoder.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalization: Option<NormalizationArg>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerArg>,
    /// Leave the endmembers unclamped after each step.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub no_projection: bool,
    /// Skip the per-endmember PGM images.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub no_maps: bool,
    /// Skip the super-resolved cube, abundance and kernel.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub no_hr: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Directory holding `endmembers.csv` and `abundance`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred_endmembers: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred_abundance: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_endmembers: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_abundance: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffinityArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Accepted for config compatibility; the trace always uses sgd.
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerArg>,
    /// Probe step for the affinity and step comparison.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Number of evenly spaced iterations with full records.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub no_projection: bool,
    /// Grid spacing on the weight simplex; `1/step` must be an integer.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    /// Worker threads.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// Overlays the flags that were given onto the config file, if any.
fn resolve<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> Result<T> {
    let mut base = match config {
        Some(path) => io::read_json::<Value>(path)?,
        None => Value::Object(Map::new()),
    };
    let Value::Object(fields) = &mut base else {
        return Err(CliError::format(config.unwrap_or(Path::new("")), "config must be a JSON object"));
    };
    let Value::Object(given) = serde_json::to_value(flags).map_err(|e| CliError::Usage(e.to_string()))? else {
        unreachable!("argument structs serialize to objects");
    };
    fields.extend(given);
    serde_json::from_value(base).map_err(|e| match config {
        Some(path) => CliError::format(path, e.to_string()),
        None => CliError::Usage(e.to_string()),
    })
}

fn seed_or_env(seed: Option<u64>) -> Result<u64> {
    if let Some(s) = seed {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV}={v} is not an integer"))),
        Err(_) => Ok(0),
    }
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| {
        if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
            let _ = e.print();
            std::process::exit(0);
        }
        CliError::Usage(e.to_string())
    })?;
    match cli.command {
        Command::Gen(a) => gen(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => {
            let report = eval(&a)?;
            println!("{}", to_json(&report));
            Ok(())
        }
        Command::Affinity(a) => {
            let summary = affinity(&a)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            Ok(())
        }
        Command::Sweep(a) => sweep(&a),
    }
}

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn snr_json(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!("inf")
    }
}

fn spec_json(spec: &DatasetSpec) -> Value {
    json!({
        "height": spec.height,
        "width": spec.width,
        "channels": spec.channels,
        "endmembers": spec.p,
        "snr_db": snr_json(spec.snr_db),
        "dirichlet_alpha": spec.dirichlet_alpha,
        "seed": spec.seed,
        "pure_pixel_injection": spec.pure_pixel_injection,
    })
}

pub fn dataset_spec(a: &GenArgs) -> Result<DatasetSpec> {
    let seed = seed_or_env(a.seed)?;
    let base = match a.preset {
        Some(Preset::Dataset2) => DatasetSpec::dataset2(seed),
        _ => DatasetSpec::dataset1(a.endmembers.unwrap_or(5), 30.0, seed),
    };
    let spec = DatasetSpec {
        height: a.height.unwrap_or(base.height),
        width: a.width.unwrap_or(base.width),
        channels: a.channels.unwrap_or(base.channels),
        p: a.endmembers.unwrap_or(base.p),
        snr_db: a.snr_db.map_or(base.snr_db, |s| s.0),
        dirichlet_alpha: a.alpha.unwrap_or(base.dirichlet_alpha),
        seed,
        pure_pixel_injection: a.pure_pixels,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn gen(flags: &GenArgs) -> Result<()> {
    let a = resolve(flags, flags.config.as_deref())?;
    let out = required(a.out.clone(), "out")?;
    let spec = dataset_spec(&a)?;
    let d = build_dataset(&spec)?;
    io::write_cube(&out.join("cube"), &d.cube)?;
    io::write_abundance(&out.join("abundance"), &d.truth_abundance)?;
    io::write_endmembers(&out.join("endmembers.csv"), &d.truth_endmembers)?;
    let manifest = json!({
        "command": "gen",
        "version": env!("CARGO_PKG_VERSION"),
        "seed": spec.seed,
        "spec": spec_json(&spec),
        "files": {"cube": "cube", "abundance": "abundance", "endmembers": "endmembers.csv"},
    });
    io::write_json(&out.join("manifest.json"), &manifest)
}

/// The observed cube plus whatever truth accompanies it.
pub struct LoadedData {
    pub cube: HsiCube,
    pub truth_endmembers: Option<EndmemberMatrix>,
    pub truth_abundance: Option<AbundanceMap>,
    pub p: usize,
    pub cube_path: PathBuf,
}

fn raster_exists(path: &Path) -> bool {
    io::cube_paths(path).0.exists()
}

pub fn load_data(a: &DataArgs) -> Result<LoadedData> {
    let cube_path = match (&a.cube, &a.data) {
        (Some(c), _) => c.clone(),
        (None, Some(d)) => d.join("cube"),
        (None, None) => return Err(CliError::Usage("one of --data or --cube is required".into())),
    };
    let from_dir = |name: &str, exists: fn(&Path) -> bool| {
        a.data.as_ref().map(|d| d.join(name)).filter(|p| exists(p))
    };
    let e_path = a.truth_endmembers.clone().or_else(|| from_dir("endmembers.csv", |p| p.exists()));
    let a_path = a.truth_abundance.clone().or_else(|| from_dir("abundance", raster_exists));
    let cube = io::read_cube(&cube_path)?;
    let truth_endmembers = e_path.as_deref().map(io::read_endmembers).transpose()?;
    let truth_abundance = a_path.as_deref().map(io::read_abundance).transpose()?;
    let p = match (a.endmembers, &truth_endmembers) {
        (Some(p), _) => p,
        (None, Some(e)) => e.p(),
        (None, None) => return Err(CliError::Usage("--endmembers is required when no truth is given".into())),
    };
    if let Some(e) = &truth_endmembers {
        if e.channels() != cube.channels() {
            return Err(CliError::Usage(format!(
                "truth endmembers have {} bands but the cube has {}",
                e.channels(),
                cube.channels()
            )));
        }
    }
    Ok(LoadedData { cube, truth_endmembers, truth_abundance, p, cube_path })
}

pub fn train_config(m: &ModelArgs, mode: Option<ModeArg>, optimizer: Option<OptimizerArg>, projection: bool) -> Result<TrainConfig> {
    let mut cfg = TrainConfig { seed: seed_or_env(m.seed)?, ..TrainConfig::default() };
    if let Some(t) = m.iters {
        cfg.iterations = t;
    }
    if let Some(lr) = m.lr {
        cfg.learning_rate = lr;
    }
    if let Some(Alpha(a)) = m.alpha {
        cfg.weights = ScalarizationWeights::new(a)?;
    }
    if let Some(s) = m.scale {
        cfg.sr.scale = s;
    }
    if let Some(k) = m.kernel_size {
        cfg.sr.kernel_size = k;
    }
    if let Some(h) = m.hidden {
        cfg.hidden = h;
    }
    if let Some(n) = m.normalization {
        cfg.normalization = match n {
            NormalizationArg::Mean => Normalization::Mean,
            NormalizationArg::RawSum => Normalization::RawSum,
        };
    }
    if let Some(mode) = mode {
        cfg.mode = match mode {
            ModeArg::Smile => trainer::Mode::Smile,
            ModeArg::SingleTask => trainer::Mode::SingleTask,
        };
    }
    if let Some(o) = optimizer {
        cfg.optimizer = match o {
            OptimizerArg::Sgd => trainer::OptimizerKind::Sgd,
            OptimizerArg::Adam => trainer::OptimizerKind::Adam,
        };
    }
    cfg.endmember_projection = projection;
    cfg.validate()?;
    Ok(cfg)
}

fn check_writable(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

fn ablation_note(cfg: &TrainConfig) -> &'static str {
    match cfg.mode {
        trainer::Mode::Smile => "joint training of the unmixing and super-resolution branches",
        trainer::Mode::SingleTask => {
            "ablation: super-resolution branch removed, its loss weight treated as 0 and its parameters never updated"
        }
    }
}

/// Scores an estimate the way `eval` would see it after a file round trip.
fn score(data: &LoadedData, e: &EndmemberMatrix, a: &AbundanceMap) -> Result<Option<MetricsReport>> {
    match (&data.truth_endmembers, &data.truth_abundance) {
        (Some(te), Some(ta)) => Ok(Some(metrics::evaluate(e, &io::f32_rounded(a), te, ta, None)?)),
        _ => Ok(None),
    }
}

pub fn train(flags: &TrainArgs) -> Result<()> {
    let a = resolve(flags, flags.config.as_deref())?;
    let out = required(a.out.clone(), "out")?;
    let cfg = train_config(&a.model, a.mode, a.optimizer, !a.no_projection)?;
    let data = load_data(&a.data)?;
    check_writable(&out)?;

    let mut manifest = json!({
        "command": "train",
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "endmembers": data.p,
        "cube": data.cube_path,
        "mode": cfg.mode,
        "note": ablation_note(&cfg),
        "config": cfg,
    });
    let result = initialize(&data.cube, data.p, &cfg)
        .and_then(|params| trainer::train_from(TrainState::new(params), &data.cube, &cfg, |_, _| {}));
    let output = match result {
        Ok(o) => o,
        Err(CoreError::Divergence { iteration, term, history }) => {
            io::write_file(&out.join("history.csv"), io::history_csv(&history).as_bytes())?;
            manifest["status"] = json!("diverged");
            manifest["iterations_completed"] = json!(history.len());
            io::write_json(&out.join("manifest.json"), &manifest)?;
            return Err(CoreError::Divergence { iteration, term, history }.into());
        }
        Err(e) => return Err(e.into()),
    };

    io::write_endmembers(&out.join("endmembers.csv"), &output.endmembers)?;
    io::write_abundance(&out.join("abundance"), &output.abundance)?;
    io::write_file(&out.join("history.csv"), io::history_csv(&output.history).as_bytes())?;
    if let Some(report) = score(&data, &output.endmembers, &output.abundance)? {
        io::write_json(&out.join("metrics.json"), &report)?;
    }
    if !a.no_hr {
        if let Some(hr) = &output.hr_cube {
            io::write_cube(&out.join("hr_cube"), hr)?;
        }
        if let Some(hr) = &output.hr_abundance {
            io::write_abundance(&out.join("hr_abundance"), hr)?;
        }
        if let Some(k) = &output.kernel {
            io::write_kernel(&out.join("kernel.csv"), k)?;
        }
    }
    if !a.no_maps {
        let a_map = &output.abundance;
        for j in 0..a_map.p() {
            io::write_file(&out.join(format!("abundance_{j}.pgm")), &io::pgm(a_map.height(), a_map.width(), &a_map.band(j)))?;
        }
    }
    let last = output.history.last().copied();
    manifest["status"] = json!("ok");
    manifest["iterations_completed"] = json!(output.history.len());
    manifest["final_loss"] = json!(last);
    io::write_json(&out.join("manifest.json"), &manifest)
}

pub fn eval(flags: &EvalArgs) -> Result<MetricsReport> {
    let a = resolve(flags, flags.config.as_deref())?;
    let pick = |file: &Option<PathBuf>, dir: &Option<PathBuf>, name: &str, flag: &str| -> Result<PathBuf> {
        match (file, dir) {
            (Some(f), _) => Ok(f.clone()),
            (None, Some(d)) => Ok(d.join(name)),
            (None, None) => Err(CliError::Usage(format!("--{flag} or its directory flag is required"))),
        }
    };
    let pe = io::read_endmembers(&pick(&a.pred_endmembers, &a.pred, "endmembers.csv", "pred-endmembers")?)?;
    let pa = io::read_abundance(&pick(&a.pred_abundance, &a.pred, "abundance", "pred-abundance")?)?;
    let te = io::read_endmembers(&pick(&a.truth_endmembers, &a.truth, "endmembers.csv", "truth-endmembers")?)?;
    let ta = io::read_abundance(&pick(&a.truth_abundance, &a.truth, "abundance", "truth-abundance")?)?;
    if pe.p() != te.p() || pe.channels() != te.channels() {
        return Err(CliError::Usage(format!(
            "predicted endmembers are {}x{}, truth is {}x{}",
            pe.p(),
            pe.channels(),
            te.p(),
            te.channels()
        )));
    }
    if (pa.height(), pa.width(), pa.p()) != (ta.height(), ta.width(), ta.p()) {
        return Err(CliError::Usage(format!(
            "predicted abundance is {}x{}x{}, truth is {}x{}x{}",
            pa.height(),
            pa.width(),
            pa.p(),
            ta.height(),
            ta.width(),
            ta.p()
        )));
    }
    Ok(metrics::evaluate(&pe, &pa, &te, &ta, None)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinitySummary {
    pub iterations: usize,
    pub learning_rate: f64,
    pub probe_eta: f64,
    pub mean_cos: f64,
    pub mean_padded_cos: f64,
    /// Fraction of iterations with `G1·G2 >= 0`.
    pub nonconflict_fraction: f64,
    pub samples: usize,
    pub margin_min: Option<f64>,
    pub margin_mean: Option<f64>,
    /// Sampled points with `G1·G2 >= 0` whose joint step lost to the
    /// single-task step by more than `1e-6·l1` at iteration 0.
    pub step_dominance_violations: usize,
    pub lemma1: smile_core::diagnostics::Lemma1Report,
}

/// Relative slack of the step-dominance comparison.
pub const STEP_DOMINANCE_TOLERANCE: f64 = 1e-6;

pub fn summarize(trace: &DiagnosticTrace, cfg: &TrainConfig, probe_eta: f64, initial: &TrainState) -> AffinitySummary {
    let n = trace.geometry.len().max(1) as f64;
    let margins: Vec<f64> = trace.records.iter().map(|r| r.margin()).collect();
    let l1_0 = trace.records.first().map_or(0.0, |r| r.l1_before);
    let violations = trace
        .records
        .iter()
        .filter(|r| r.dot >= 0.0 && r.l1_mtl_step > r.l1_single_step + STEP_DOMINANCE_TOLERANCE * l1_0)
        .count();
    AffinitySummary {
        iterations: trace.geometry.len(),
        learning_rate: cfg.learning_rate,
        probe_eta,
        mean_cos: trace.mean_cos(),
        mean_padded_cos: trace.geometry.iter().map(|(_, g)| g.padded_cos).sum::<f64>() / n,
        nonconflict_fraction: trace.nonconflict_fraction(),
        samples: trace.records.len(),
        margin_min: margins.iter().copied().reduce(f64::min),
        margin_mean: (!margins.is_empty()).then(|| margins.iter().sum::<f64>() / margins.len() as f64),
        step_dominance_violations: violations,
        lemma1: lemma1_preconditions(&initial.params, cfg, Some(trace)),
    }
}

pub fn affinity(flags: &AffinityArgs) -> Result<AffinitySummary> {
    let mut a = resolve(flags, flags.config.as_deref())?;
    let out = required(a.out.clone(), "out")?;
    if matches!(a.optimizer, Some(OptimizerArg::Adam)) {
        eprintln!("warning: affinity traces use plain sgd; ignoring optimizer adam");
    }
    a.model.iters = Some(a.model.iters.unwrap_or(500));
    a.model.lr = Some(a.model.lr.unwrap_or(1e-3));
    let cfg = train_config(&a.model, Some(ModeArg::Smile), Some(OptimizerArg::Sgd), false)?;
    let probe_eta = a.eta.unwrap_or(1e-4);
    if !(probe_eta.is_finite() && probe_eta >= 0.0) {
        return Err(CliError::Usage(format!("--eta {probe_eta} must be finite and nonnegative")));
    }
    let data = load_data(&a.data)?;
    check_writable(&out)?;
    let initial = TrainState::new(initialize(&data.cube, data.p, &cfg)?);
    let sampled = even_samples(cfg.iterations, a.samples.unwrap_or(50));
    let trace = diagnostic_run(initial.clone(), &data.cube, &cfg, &sampled, probe_eta)?;
    io::write_file(&out.join("affinity.csv"), io::affinity_csv(&trace.records).as_bytes())?;
    io::write_file(&out.join("geometry.csv"), io::geometry_csv(&trace.geometry).as_bytes())?;
    io::write_file(&out.join("history.csv"), io::history_csv(&trace.history).as_bytes())?;
    let summary = summarize(&trace, &cfg, probe_eta, &initial);
    io::write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Points of the weight simplex with spacing `1/divisions`, in lexicographic order.
pub fn simplex_grid(divisions: usize) -> Vec<[f64; 4]> {
    let d = divisions as f64;
    let mut out = Vec::new();
    for i in 0..=divisions {
        for j in 0..=divisions - i {
            for k in 0..=divisions - i - j {
                let l = divisions - i - j - k;
                out.push([i as f64 / d, j as f64 / d, k as f64 / d, l as f64 / d]);
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct SweepRow {
    alpha: [f64; 4],
    status: &'static str,
    last: Option<LossRecord>,
    metrics: Option<MetricsReport>,
}

impl fmt::Display for SweepRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = self.alpha;
        write!(f, "{:?},{:?},{:?},{:?},{}", a[0], a[1], a[2], a[3], self.status)?;
        match &self.last {
            Some(r) => write!(f, ",{:?},{:?}", r.total, r.l1)?,
            None => write!(f, ",,")?,
        }
        match &self.metrics {
            Some(m) => write!(f, ",{:?},{:?},{:?}", m.rmse, m.aad, m.sad_mean),
            None => write!(f, ",,,"),
        }
    }
}

pub fn sweep(flags: &SweepArgs) -> Result<()> {
    let a = resolve(flags, flags.config.as_deref())?;
    let out = required(a.out.clone(), "out")?;
    let base = train_config(&a.model, a.mode, a.optimizer, !a.no_projection)?;
    let step = a.step.unwrap_or(0.1);
    let divisions = (1.0 / step).round();
    if !(step > 0.0 && step <= 1.0 && (divisions * step - 1.0).abs() < 1e-9) {
        return Err(CliError::Usage(format!("--step {step} must divide 1 evenly")));
    }
    let jobs = a.jobs.unwrap_or(1).max(1);
    let data = load_data(&a.data)?;
    check_writable(&out)?;
    let grid = simplex_grid(divisions as usize);
    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Option<Result<SweepRow>>>> = Mutex::new((0..grid.len()).map(|_| None).collect());
    let run_one = |alpha: [f64; 4]| -> Result<SweepRow> {
        let mut cfg = base.clone();
        cfg.weights = ScalarizationWeights::unchecked(alpha);
        match trainer::train(&data.cube, data.p, &cfg) {
            Ok(o) => Ok(SweepRow {
                alpha,
                status: "ok",
                last: o.history.last().copied(),
                metrics: score(&data, &o.endmembers, &o.abundance)?,
            }),
            Err(CoreError::Divergence { history, .. }) => {
                Ok(SweepRow { alpha, status: "diverged", last: history.last().copied(), metrics: None })
            }
            Err(e) => Err(e.into()),
        }
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.min(grid.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= grid.len() {
                    break;
                }
                let row = run_one(grid[i]);
                rows.lock().expect("no worker panicked")[i] = Some(row);
            });
        }
    });
    let mut csv = String::from("a1,a2,a3,a4,status,total,l1,rmse,aad,sad\n");
    for row in rows.into_inner().expect("no worker panicked") {
        csv.push_str(&row.expect("every grid point ran")?.to_string());
        csv.push('\n');
    }
    io::write_file(&out.join("sweep.csv"), csv.as_bytes())
}
