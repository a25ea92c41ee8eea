//! `exitdvfs` command-line front end.
//!
//! Every subcommand writes its artifacts under `--out` (default `$EXITDVFS_OUT`, else `out`)
//! through a temp-file-and-rename, then records them in `manifest.json` together with the
//! SHA-256 of the resolved configuration and the seed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use exitdvfs::devmodel::{
    calibrate, load_profile, reference_anchors, save_profile, CalibrationAnchor, CostTable, DeviceProfile,
    COST_TABLE_NAMES, DEVICE_NAMES,
};
use exitdvfs::exitnet::{evaluate, grad_check, train, ExitNetConfig, ExitNetModel};
use exitdvfs::profiler::{
    brute_force, cds_search, random_search, Objective, ProfileCache, SearchConfig, SearchOutcome,
};
use exitdvfs::simengine::{ablation, calibrated_scenario, compare, GovernorPolicy, Policy, SimReport};
use exitdvfs::tracegen::{generate_trace, load_trace, ComplexityDistribution, FrameTrace, TraceGenConfig};

/// Environment variable holding the default output directory.
pub const OUT_ENV: &str = "EXITDVFS_OUT";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "exitdvfs", version, about = "Early-exit + per-layer DVFS simulator for edge inference")]
pub struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = OUT_ENV, default_value = "out")]
    pub out: PathBuf,
    /// Seed for every random choice of the command.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic frame trace.
    GenTrace(GenTraceArgs),
    /// Fit a device profile and work scale to measured anchors.
    Calibrate(CalibrateArgs),
    /// Train an exit network on a trace.
    Train(TrainArgs),
    /// Check analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Search a per-layer frequency schedule for one exit.
    Profile(ProfileArgs),
    /// Simulate one governor policy over a trace.
    Simulate(SimulateArgs),
    /// Run the four-way DVFS / early-exit ablation.
    Ablation(AblationArgs),
    /// Build a comparison table from simulation reports.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplexityKind {
    Uniform,
    Bimodal,
}

#[derive(Debug, Args)]
pub struct GenTraceArgs {
    #[arg(long, default_value_t = 200)]
    pub windows: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 20)]
    pub window_length: usize,
    #[arg(long, value_enum, default_value_t = ComplexityKind::Uniform)]
    pub complexity: ComplexityKind,
    /// Weight of the low-complexity mode (bimodal only).
    #[arg(long, default_value_t = 0.5)]
    pub p_low: f64,
}

#[derive(Debug, Args)]
pub struct DeviceArgs {
    /// Built-in device; devices with shipped anchors are calibrated to them.
    #[arg(long, default_value = "jetson-xavier-nx")]
    pub device: String,
    /// Device profile JSON (e.g. from `calibrate`); overrides --device.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Built-in cost table name or a cost table CSV.
    #[arg(long, default_value = "effnet-b0")]
    pub cost_table: String,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long, default_value_t = 3)]
    pub rounds: usize,
    #[arg(long, default_value_t = 8)]
    pub candidates: usize,
    /// Latency budget in ms; defaults to 1.15 × the all-max latency.
    #[arg(long)]
    pub latency_budget: Option<f64>,
    /// Drop the latency budget and minimize energy alone.
    #[arg(long)]
    pub no_budget: bool,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub device: DeviceArgs,
    /// Anchor `cpu_ghz,gpu_ghz,latency_ms,power_w`; repeatable. Defaults to the device's shipped anchors.
    #[arg(long = "anchor")]
    pub anchors: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Trace file; a 2,000-window uniform trace is generated from --seed when absent.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 5)]
    pub exits: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 8)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub window_length: usize,
    #[arg(long, default_value_t = 2)]
    pub exits: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    Cds,
    Random,
    Brute,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub device: DeviceArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Exit index (1-based) or `full`.
    #[arg(long, default_value = "full")]
    pub exit: String,
    #[arg(long, value_enum, default_value_t = SearchMethod::Cds)]
    pub method: SearchMethod,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub device: DeviceArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Trace file; a default trace is generated from the seed when absent.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Exit network checkpoint; required by early-exit policies.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "E4")]
    pub policy: String,
    /// Half-open seed range `a..b` (or `a..=b`) simulated in parallel; overrides --seed.
    #[arg(long)]
    pub seeds: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[command(flatten)]
    pub device: DeviceArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Report JSON files written by `simulate` or `ablation`.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
}

/// Failure classes, mapped to exit codes 2 and 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(exitdvfs::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<exitdvfs::Error> for CliError {
    fn from(e: exitdvfs::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(exitdvfs::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn json_err(e: serde_json::Error) -> CliError {
    CliError::Runtime(exitdvfs::Error::Json(e))
}

/// Parses `argv` (program name first), runs the command and returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("exitdvfs: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command; returns the paths written.
pub fn run(cli: &Cli) -> CliResult<Vec<PathBuf>> {
    let mut out = Output::new(&cli.out)?;
    let (name, config) = match &cli.command {
        Command::GenTrace(a) => ("gen-trace", gen_trace_cmd(a, cli.seed, &mut out)?),
        Command::Calibrate(a) => ("calibrate", calibrate_cmd(a, &mut out)?),
        Command::Train(a) => ("train", train_cmd(a, cli.seed, &mut out)?),
        Command::GradCheck(a) => ("grad-check", grad_check_cmd(a, cli.seed, &mut out)?),
        Command::Profile(a) => ("profile", profile_cmd(a, cli.seed, &mut out)?),
        Command::Simulate(a) => ("simulate", simulate_cmd(a, cli.seed, &mut out)?),
        Command::Ablation(a) => ("ablation", ablation_cmd(a, cli.seed, &mut out)?),
        Command::Compare(a) => ("compare", compare_cmd(a, &mut out)?),
    };
    out.finish(name, config, cli.seed)
}

/// Artifacts of one command, committed atomically file by file.
struct Output {
    dir: PathBuf,
    files: BTreeMap<String, String>,
    config_hash: String,
}

impl Output {
    fn new(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
            config_hash: String::new(),
        })
    }

    /// Fixes the configuration hash; call before writing hash-stamped artifacts.
    fn set_config(&mut self, config: &serde_json::Value) {
        self.config_hash = sha256_hex(config.to_string().as_bytes());
    }

    fn write(&mut self, name: &str, contents: &str) -> CliResult<()> {
        let path = self.dir.join(name);
        write_atomic(&path, contents.as_bytes())?;
        self.files.insert(name.to_string(), sha256_hex(contents.as_bytes()));
        Ok(())
    }

    /// JSON artifact stamped with the config hash and seed (an existing `seed` field is kept).
    fn write_json<T: Serialize>(&mut self, name: &str, seed: u64, body: &T) -> CliResult<()> {
        let mut doc = serde_json::Map::new();
        doc.insert("config_hash".into(), self.config_hash.clone().into());
        doc.insert("seed".into(), seed.into());
        match serde_json::to_value(body).map_err(json_err)? {
            serde_json::Value::Object(fields) => doc.extend(fields),
            other => {
                doc.insert("value".into(), other);
            }
        }
        let text = serde_json::to_string_pretty(&doc).map_err(json_err)? + "\n";
        self.write(name, &text)
    }

    fn finish(self, command: &str, config: serde_json::Value, seed: u64) -> CliResult<Vec<PathBuf>> {
        let manifest_path = self.dir.join(MANIFEST_FILE);
        let mut manifest: BTreeMap<String, ManifestEntry> = match fs::read_to_string(&manifest_path) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        manifest.insert(
            command.to_string(),
            ManifestEntry {
                config_hash: sha256_hex(config.to_string().as_bytes()),
                seed,
                config,
                outputs: self.files.clone(),
            },
        );
        let text = serde_json::to_string_pretty(&manifest).map_err(json_err)? + "\n";
        write_atomic(&manifest_path, text.as_bytes())?;
        let mut written: Vec<PathBuf> = self.files.keys().map(|f| self.dir.join(f)).collect();
        written.push(manifest_path);
        Ok(written)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub config_hash: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Artifact file name → SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `path` via a sibling temp file and a rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("configs serialize")
}

// ---------------------------------------------------------------------------
// Resolution helpers (failures here are usage errors)

fn resolve_cost_table(name_or_path: &str) -> CliResult<CostTable<f64>> {
    if COST_TABLE_NAMES.contains(&name_or_path) {
        return Ok(CostTable::builtin(name_or_path)?);
    }
    let path = Path::new(name_or_path);
    if !path.exists() {
        return Err(usage(format!(
            "cost table '{name_or_path}' is neither a file nor a built-in ({})",
            COST_TABLE_NAMES.join(", ")
        )));
    }
    Ok(CostTable::load_csv(path)?)
}

fn check_device(name: &str) -> CliResult<()> {
    if DEVICE_NAMES.contains(&name) {
        Ok(())
    } else {
        Err(usage(format!("unknown device '{name}' (valid devices: {})", DEVICE_NAMES.join(", "))))
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} '{}' does not exist", path.display())))
    }
}

/// Profile and table for a simulation: a profile file is used as is, a built-in device is
/// calibrated to its shipped anchors when it has any.
fn resolve_device(args: &DeviceArgs) -> CliResult<(DeviceProfile<f64>, CostTable<f64>, serde_json::Value)> {
    let table = resolve_cost_table(&args.cost_table)?;
    let (profile, table) = match &args.profile {
        Some(path) => {
            require_file(path, "profile")?;
            (load_profile(path)?, table)
        }
        None => {
            check_device(&args.device)?;
            calibrated_scenario(&args.device, &table)?
        }
    };
    let desc = serde_json::json!({
        "device": profile.name,
        "profile": profile,
        "cost_table": table,
    });
    Ok((profile, table, desc))
}

fn search_config(args: &SearchArgs, seed: u64) -> CliResult<SearchConfig> {
    let cfg = SearchConfig {
        rounds: args.rounds,
        candidates: args.candidates,
        latency_budget: args.latency_budget,
        seed,
        objective: if args.no_budget {
            Objective::Energy
        } else {
            Objective::EnergyWithBudget
        },
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn default_trace(seed: u64, windows: usize) -> CliResult<FrameTrace> {
    Ok(generate_trace(&TraceGenConfig {
        num_windows: windows,
        seed,
        ..TraceGenConfig::default()
    })?)
}

fn resolve_trace(path: Option<&Path>, seed: u64, windows: usize) -> CliResult<(FrameTrace, serde_json::Value)> {
    match path {
        Some(p) => {
            require_file(p, "trace")?;
            let text = fs::read(p).map_err(|e| io_err(p, e))?;
            Ok((load_trace(p)?, serde_json::json!({ "file_sha256": sha256_hex(&text) })))
        }
        None => Ok((default_trace(seed, windows)?, serde_json::json!({ "generated_windows": windows, "seed": seed }))),
    }
}

fn resolve_model(path: &Path) -> CliResult<(ExitNetModel<f64>, String)> {
    require_file(path, "model")?;
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok((ExitNetModel::load(path)?, sha256_hex(&bytes)))
}

/// `a..b` (half-open) or `a..=b`.
pub fn parse_seed_range(s: &str) -> Result<Vec<u64>, String> {
    let bad = || format!("seed range '{s}' must look like a..b or a..=b");
    let (lo, hi, inclusive) = if let Some((a, b)) = s.split_once("..=") {
        (a, b, true)
    } else if let Some((a, b)) = s.split_once("..") {
        (a, b, false)
    } else {
        return Err(bad());
    };
    let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: u64 = hi.trim().parse().map_err(|_| bad())?;
    let seeds: Vec<u64> = if inclusive { (lo..=hi).collect() } else { (lo..hi).collect() };
    if seeds.is_empty() {
        return Err(format!("seed range '{s}' is empty"));
    }
    Ok(seeds)
}

// ---------------------------------------------------------------------------
// Commands. Each returns the resolved configuration recorded in the manifest.

fn gen_trace_cmd(a: &GenTraceArgs, seed: u64, out: &mut Output) -> CliResult<serde_json::Value> {
    let complexity = match a.complexity {
        ComplexityKind::Uniform => ComplexityDistribution::Uniform,
        ComplexityKind::Bimodal => ComplexityDistribution::bimodal(a.p_low, 0.15, 0.85),
    };
    let cfg = TraceGenConfig {
        num_windows: a.windows,
        num_classes: a.classes,
        window_length: a.window_length,
        complexity,
        seed,
    };
    let trace = generate_trace(&cfg).map_err(|e| usage(e.to_string()))?;
    let config = to_value(&cfg);
    out.set_config(&config);
    out.write("trace.txt", &trace.to_text())?;
    Ok(config)
}

fn parse_anchor(s: &str) -> CliResult<CalibrationAnchor<f64>> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| usage(format!("anchor '{s}': {e}")))?;
    match parts[..] {
        [c, g, l, p] => Ok(CalibrationAnchor::new(c, g, l, p)),
        _ => Err(usage(format!("anchor '{s}' must be cpu_ghz,gpu_ghz,latency_ms,power_w"))),
    }
}

fn calibrate_cmd(a: &CalibrateArgs, out: &mut Output) -> CliResult<serde_json::Value> {
    let template = match &a.device.profile {
        Some(p) => {
            require_file(p, "profile")?;
            load_profile(p)?
        }
        None => {
            check_device(&a.device.device)?;
            DeviceProfile::builtin(&a.device.device)?
        }
    };
    let table = resolve_cost_table(&a.device.cost_table)?;
    let anchors = if a.anchors.is_empty() {
        reference_anchors(&template.name)
    } else {
        a.anchors.iter().map(|s| parse_anchor(s)).collect::<CliResult<_>>()?
    };
    if anchors.is_empty() {
        return Err(usage(format!("{} has no shipped anchors; pass --anchor", template.name)));
    }
    let config = serde_json::json!({ "template": template, "cost_table": table, "anchors": anchors });
    out.set_config(&config);
    let cal = calibrate(&template, &anchors, &table)?;
    let tmp = out.dir.join(".profile.json.build");
    save_profile(&cal.profile, &tmp)?;
    let profile_text = fs::read_to_string(&tmp).map_err(|e| io_err(&tmp, e))?;
    let _ = fs::remove_file(&tmp);
    out.write("profile.json", &profile_text)?;
    out.write("cost_table.csv", &cal.cost_table.to_csv())?;
    out.write_json("calibration.json", 0, &cal)?;
    Ok(config)
}

fn train_cmd(a: &TrainArgs, seed: u64, out: &mut Output) -> CliResult<serde_json::Value> {
    let (trace, trace_desc) = resolve_trace(a.trace.as_deref(), seed, 2000)?;
    let cfg = ExitNetConfig {
        feature_dim: a.feature_dim,
        num_exits: a.exits,
        window_length: trace.window_length,
        num_classes: trace.num_classes,
        gate_threshold: a.threshold,
        learning_rate: a.learning_rate,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed,
        ..ExitNetConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let config = serde_json::json!({ "trace": trace_desc, "model": cfg });
    out.set_config(&config);
    let outcome = train::<f64>(&trace, &cfg)?;
    let tmp = out.dir.join(".model.json.build");
    outcome.model.save(&tmp)?;
    let model_text = fs::read_to_string(&tmp).map_err(|e| io_err(&tmp, e))?;
    let _ = fs::remove_file(&tmp);
    out.write("model.json", &model_text)?;
    let mut hist = String::from("epoch,loss_total,loss_cls,loss_gate,loss_att\n");
    for h in &outcome.history {
        hist.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e}\n",
            h.epoch, h.loss.total, h.loss.cls, h.loss.gate, h.loss.att
        ));
    }
    out.write("train_history.csv", &hist)?;
    let eval = evaluate(&outcome.model, &trace, seed)?;
    let summary = serde_json::json!({
        "train_accuracy": eval.accuracy,
        "exit_histogram": eval.exit_histogram,
        "final_loss": outcome.history.last().map(|h| h.loss),
    });
    out.write_json("train_summary.json", seed, &summary)?;
    Ok(config)
}

fn grad_check_cmd(a: &GradCheckArgs, seed: u64, out: &mut Output) -> CliResult<serde_json::Value> {
    if !(a.epsilon > 0.0 && a.epsilon.is_finite()) {
        return Err(usage(format!("epsilon must be > 0, got {}", a.epsilon)));
    }
    let cfg = ExitNetConfig {
        feature_dim: a.feature_dim,
        num_exits: a.exits,
        window_length: a.window_length,
        num_classes: a.classes,
        gate_hidden: vec![16, 8],
        attention_hidden: vec![16],
        seed,
        ..ExitNetConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let config = serde_json::json!({ "model": cfg, "epsilon": a.epsilon });
    out.set_config(&config);
    let model = ExitNetModel::<f64>::new(cfg.clone())?;
    let trace = generate_trace(&TraceGenConfig {
        num_windows: 1,
        num_classes: a.classes,
        window_length: a.window_length,
        complexity: ComplexityDistribution::Uniform,
        seed,
    })?;
    let window = trace.windows().next().expect("one window");
    let phis = exitdvfs::exitnet::window_features(window, &cfg, seed);
    let report = grad_check(&model, &(phis, window[0].label), a.epsilon)?;
    out.write_json("grad_check.json", seed, &report)?;
    Ok(config)
}

fn profile_cmd(a: &ProfileArgs, seed: u64, out: &mut Output) -> CliResult<serde_json::Value> {
    let (profile, table, dev) = resolve_device(&a.device)?;
    let exit = if a.exit.eq_ignore_ascii_case("full") {
        None
    } else {
        Some(a.exit.parse::<usize>().map_err(|_| usage(format!("--exit '{}' is not an index or 'full'", a.exit)))?)
    };
    let layers = table.layers_for_exit(exit).map_err(|e| usage(e.to_string()))?;
    let search = search_config(&a.search, seed)?;
    let config = serde_json::json!({ "device": dev, "search": search, "exit": a.exit, "layers": layers, "method": a.method });
    out.set_config(&config);
    let cache = ProfileCache::new();
    let outcome: SearchOutcome<f64> = match a.method {
        SearchMethod::Cds => cds_search(layers, &table, &profile, &search, &cache)?,
        SearchMethod::Random => random_search(layers, &table, &profile, search.cds_evaluations(layers), &search, &cache)?,
        SearchMethod::Brute => {
            let budget = search.effective_budget(&profile, &table, layers)?;
            brute_force(layers, &table, &profile, budget)?
        }
    };
    out.write("schedule.csv", &outcome.schedule.to_csv())?;
    out.write("profile_cache.csv", &cache.dump_csv())?;
    out.write_json("search.json", seed, &outcome)?;
    Ok(config)
}

fn parse_policy(s: &str) -> CliResult<Policy> {
    s.parse::<Policy>().map_err(|e| usage(e.to_string()))
}

fn simulate_cmd(a: &SimulateArgs, seed: u64, out: &mut Output) -> CliResult<serde_json::Value> {
    let policy = parse_policy(&a.policy)?;
    let (profile, table, dev) = resolve_device(&a.device)?;
    let seeds = match &a.seeds {
        Some(r) => parse_seed_range(r).map_err(usage)?,
        None => vec![seed],
    };
    let model = match &a.model {
        Some(p) => Some(resolve_model(p)?),
        None if policy.uses_early_exit() => {
            return Err(usage(format!("policy {policy} needs --model")));
        }
        None => None,
    };
    let (trace, trace_desc) = resolve_trace(a.trace.as_deref(), seed, 200)?;
    let gp = GovernorPolicy {
        search: search_config(&a.search, seed)?,
        ..GovernorPolicy::new(policy)
    };
    let config = serde_json::json!({
        "device": dev,
        "trace": trace_desc,
        "model_sha256": model.as_ref().map(|m| &m.1),
        "policy": gp,
        "seeds": seeds,
    });
    out.set_config(&config);
    let reports: Vec<SimReport> = seeds
        .par_iter()
        .map(|&s| {
            let gp = GovernorPolicy {
                search: SearchConfig { seed: s, ..gp.search.clone() },
                ..gp.clone()
            };
            exitdvfs::simengine::simulate(&trace, &profile, &table, model.as_ref().map(|m| &m.0), &gp, s)
        })
        .collect::<Result<_, _>>()?;
    if let [report] = &reports[..] {
        out.write_json("report.json", report.seed, report)?;
        out.write("records.csv", &report.records_csv())?;
    } else {
        let mut summary = String::from("seed,mean_latency_ms,mean_power_w,mean_energy_j,accuracy,evaluations\n");
        for r in &reports {
            out.write_json(&format!("report-seed-{}.json", r.seed), r.seed, r)?;
            summary.push_str(&format!(
                "{},{:.6},{:.6},{:.9e},{},{}\n",
                r.seed,
                r.mean_latency_ms,
                r.mean_power_w,
                r.mean_energy_j,
                r.accuracy.map_or(String::new(), |x| format!("{x:.6}")),
                r.evaluation_count
            ));
        }
        out.write("seeds.csv", &summary)?;
    }
    Ok(config)
}

fn ablation_cmd(a: &AblationArgs, seed: u64, out: &mut Output) -> CliResult<serde_json::Value> {
    let (profile, table, dev) = resolve_device(&a.device)?;
    let (model, model_hash) = resolve_model(&a.model)?;
    let (trace, trace_desc) = resolve_trace(a.trace.as_deref(), seed, 200)?;
    let search = search_config(&a.search, seed)?;
    let config = serde_json::json!({
        "device": dev,
        "trace": trace_desc,
        "model_sha256": model_hash,
        "search": search,
    });
    out.set_config(&config);
    let (cmp, reports) = ablation(&trace, &profile, &table, &model, &search, seed)?;
    out.write("ablation.csv", &cmp.to_csv())?;
    out.write_json("ablation.json", seed, &cmp)?;
    for (row, report) in cmp.rows.iter().zip(&reports) {
        out.write_json(&format!("report-{}.json", row.label), seed, report)?;
    }
    Ok(config)
}

/// Reads a report written by this tool (stamped or bare).
pub fn read_report(path: &Path) -> CliResult<SimReport> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str::<SimReport>(&text).map_err(json_err)
}

fn compare_cmd(a: &CompareArgs, out: &mut Output) -> CliResult<serde_json::Value> {
    let mut hashes = Vec::new();
    let mut reports = Vec::new();
    for p in &a.reports {
        require_file(p, "report")?;
        let bytes = fs::read(p).map_err(|e| io_err(p, e))?;
        hashes.push(sha256_hex(&bytes));
        reports.push(read_report(p)?);
    }
    let config = serde_json::json!({ "reports_sha256": hashes });
    out.set_config(&config);
    let table = compare(&reports)?;
    out.write("comparison.csv", &table.to_csv())?;
    out.write_json("comparison.json", 0, &table)?;
    Ok(config)
}
