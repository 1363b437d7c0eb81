//! `fovsearch`: stimuli, observers, experiments and plots from one config file.

mod commands;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fovsearch_core::config::{ExperimentConfig, ExperimentKind};
use fovsearch_core::SignalKind;
use serde::{Deserialize, Serialize};

/// Environment variable holding the worker-thread count.
pub const THREADS_ENV: &str = "FOVSEARCH_THREADS";

#[derive(Parser, Debug)]
#[command(name = "fovsearch", version, about = "Model observers and foveated search in power-law noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write trial stimuli as raw volumes with metadata sidecars, plus a stimulus manifest.
    GenStimuli(Run<commands::GenStimuli>),
    /// Build observer templates for one signal and write them with their statistics.
    BuildObserver(Run<commands::BuildObserver>),
    /// Run the cued (location-known) stack task.
    RunLke(Run<commands::RunLke>),
    /// Run the search conditions of the configured experiment, or replay a fixation trace.
    RunSearch(Run<commands::RunSearch>),
    /// Fit the foveation parameters to forced-fixation yes/no data.
    FitFovea(Run<commands::FitFovea>),
    /// Train the search model's stopping thresholds.
    TrainThresholds(Run<commands::TrainThresholds>),
    /// Find the contrasts that bring each standard observer to its target PC.
    MatchContrast(Run<commands::MatchContrast>),
    /// Recompute metrics from a trial record file.
    Analyze(Run<commands::Analyze>),
    /// Draw PC bars and d' against eccentricity as SVG, with the plotted data as CSV.
    Plot(Run<commands::Plot>),
    /// Rerun the command recorded in a manifest into a new output directory.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Run<T: Args> {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    opts: T,
}

/// Config source and overrides shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    training_trials: Option<usize>,
    #[arg(long)]
    contrast: Option<f64>,
    /// Experiment kind: lke3d_vs_search3d, search2d_vs_3d or forced_fixation.
    #[arg(long)]
    experiment: Option<String>,
    /// Comma-separated signal list (mcalc, mass).
    #[arg(long, value_delimiter = ',')]
    signals: Option<Vec<String>>,
    /// Volume size as nx,ny,nz.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    dims: Option<Vec<usize>>,
}

fn parse_named<T: for<'de> Deserialize<'de>>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).with_context(|| format!("unknown {what} `{s}`"))
}

pub fn parse_signal(s: &str) -> Result<SignalKind> {
    parse_named("signal", s)
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("cannot load config {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.trials {
            cfg.trials = v;
        }
        if let Some(v) = self.training_trials {
            cfg.training_trials = v;
        }
        if let Some(v) = self.contrast {
            cfg.contrast = Some(v);
        }
        if let Some(v) = &self.experiment {
            cfg.experiment = parse_named::<ExperimentKind>("experiment", v)?;
        }
        if let Some(v) = &self.signals {
            cfg.signals = v.iter().map(|s| parse_signal(s)).collect::<Result<_>>()?;
        }
        if let Some(v) = &self.dims {
            let [nx, ny, nz] = v[..] else { bail!("--dims needs three values, got {}", v.len()) };
            cfg.geometry.dims = [nx, ny, nz];
        }
        cfg.validate()?;
        Ok(cfg.normalized())
    }
}

/// Everything needed to rerun a command and check its outputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub options: serde_json::Value,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub version: String,
    /// Output files relative to the output directory.
    pub outputs: Vec<String>,
    pub timing: Timing,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix_s: f64,
    pub elapsed_s: f64,
}

/// Output directory plus the list of files written into it.
pub struct Outputs {
    pub dir: PathBuf,
    pub files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    /// Path for `name` inside the output directory, recorded as an output.
    pub fn file(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.files.push(name.to_string());
        Ok(p)
    }

    pub fn create(&mut self, name: &str) -> Result<std::io::BufWriter<std::fs::File>> {
        let p = self.file(name)?;
        Ok(std::io::BufWriter::new(
            std::fs::File::create(&p).with_context(|| format!("cannot write {}", p.display()))?,
        ))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        use std::io::Write;
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

trait Execute: Serialize + for<'de> Deserialize<'de> {
    fn execute(&self, cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()>;
}

fn execute<T: Execute>(name: &str, opts: &T, cfg: ExperimentConfig, dir: &Path) -> Result<()> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let clock = Instant::now();
    let mut out = Outputs::new(dir)?;
    log::info!("{name}: writing to {}", dir.display());
    opts.execute(&cfg, &mut out)?;
    let manifest = RunManifest {
        command: name.to_string(),
        options: serde_json::to_value(opts)?,
        seed: cfg.seed,
        config: cfg,
        version: env!("CARGO_PKG_VERSION").to_string(),
        outputs: out.files.clone(),
        timing: Timing {
            started_unix_s: started,
            elapsed_s: clock.elapsed().as_secs_f64(),
        },
    };
    for f in &manifest.outputs {
        if !dir.join(f).exists() {
            bail!("declared output {f} was not written");
        }
    }
    out.write_json("manifest.json", &manifest)?;
    Ok(())
}

fn run<T: Execute + Args>(name: &str, r: &Run<T>) -> Result<()> {
    let cfg = r.common.load()?;
    execute(name, &r.opts, cfg, &r.common.out)
}

fn replay(manifest: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(manifest).with_context(|| format!("cannot read manifest {}", manifest.display()))?;
    let m: RunManifest = serde_json::from_str(&text).with_context(|| format!("invalid manifest {}", manifest.display()))?;
    let cfg = m.config;
    cfg.validate()?;
    fn go<T: Execute>(name: &str, options: serde_json::Value, cfg: ExperimentConfig, out: &Path) -> Result<()> {
        let opts: T = serde_json::from_value(options)?;
        execute(name, &opts, cfg, out)
    }
    let o = m.options;
    match m.command.as_str() {
        "gen-stimuli" => go::<commands::GenStimuli>("gen-stimuli", o, cfg, out),
        "build-observer" => go::<commands::BuildObserver>("build-observer", o, cfg, out),
        "run-lke" => go::<commands::RunLke>("run-lke", o, cfg, out),
        "run-search" => go::<commands::RunSearch>("run-search", o, cfg, out),
        "fit-fovea" => go::<commands::FitFovea>("fit-fovea", o, cfg, out),
        "train-thresholds" => go::<commands::TrainThresholds>("train-thresholds", o, cfg, out),
        "match-contrast" => go::<commands::MatchContrast>("match-contrast", o, cfg, out),
        "analyze" => go::<commands::Analyze>("analyze", o, cfg, out),
        "plot" => go::<commands::Plot>("plot", o, cfg, out),
        other => bail!("manifest names unknown command `{other}`"),
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
        if n == 0 {
            bail!("{THREADS_ENV} must be a positive integer, got 0");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::GenStimuli(r) => run("gen-stimuli", r),
        Command::BuildObserver(r) => run("build-observer", r),
        Command::RunLke(r) => run("run-lke", r),
        Command::RunSearch(r) => run("run-search", r),
        Command::FitFovea(r) => run("fit-fovea", r),
        Command::TrainThresholds(r) => run("train-thresholds", r),
        Command::MatchContrast(r) => run("match-contrast", r),
        Command::Analyze(r) => run("analyze", r),
        Command::Plot(r) => run("plot", r),
        Command::Replay { manifest, out } => replay(manifest, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
