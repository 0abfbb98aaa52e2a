//! Command-line front end.
//!
//! Every option can also come from a `--config` file of `key = value`
//! lines (keys are option names, `-` or `_` both accepted). A flag wins
//! over the file, the file over the built-in default. `DVBE_SEED` sets the
//! default seed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::amse::{MarginConfig, MarginMode};
use crate::autos2v::{Arch, CellSpec, OperationKind};
use crate::checkpoint::{self, Checkpoint};
use crate::dataio::{load_dir, synth_gzsl, write_dir, GzslDataset, SynthConfig};
use crate::error::{Error, Result};
use crate::gate::{self, calibrate_tau, linear_grid, sweep_csv, val_entropies, DEFAULT_PERCENTILE};
use crate::gradsuite;
use crate::metrics::CSV_HEADER;
use crate::trainer::{ablation_csv, run_ablation, train_stage1, train_stage2, Dvbe, ModelConfig, TrainConfig};

pub const SEED_ENV: &str = "DVBE_SEED";

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "dvbe", version, about = "Generalized zero-shot learning with entropy-gated dual embeddings")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Search the semantic embedding cell (stage 1).
    Search(SearchArgs),
    /// Train both branches on a fixed cell (stage 2) and calibrate tau.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test splits.
    Eval(EvalArgs),
    /// Print tau calibrated on seen-validation entropies.
    Calibrate(CalibrateArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate the component and margin ablations.
    Ablation(AblationArgs),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// File of `key = value` lines supplying option defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_seen: Option<usize>,
    #[arg(long)]
    n_unseen: Option<usize>,
    #[arg(long)]
    attr_dim: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct TrainOpts {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    epochs_stage1: Option<usize>,
    #[arg(long)]
    epochs_stage2: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// standard, fixed or adaptive.
    #[arg(long)]
    margin: Option<String>,
    #[arg(long)]
    fixed_lambda: Option<f64>,
    /// first_order or cross_attentive.
    #[arg(long)]
    embed_kind: Option<String>,
    #[arg(long)]
    reduced: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    n_nodes: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Skip signed square root and L2 normalization of the embedding.
    #[arg(long)]
    no_normalization: bool,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainOpts,
    #[arg(long)]
    data: PathBuf,
    /// Directory receiving cell.txt, search.ckpt and search_log.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainOpts,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    cell: PathBuf,
    /// Directory receiving model.ckpt and train_log.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    percentile: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Gate threshold; defaults to the one stored in the checkpoint.
    #[arg(long)]
    tau: Option<f64>,
    /// Recalibrate tau at this percentile of seen-validation entropies.
    #[arg(long)]
    percentile: Option<f64>,
    /// Route every image to the seen classifier.
    #[arg(long)]
    classifier_only: bool,
    /// Sweep grid `lo:hi:n`.
    #[arg(long)]
    tau_sweep: Option<String>,
    /// Metrics CSV path; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sweep CSV path; stdout if absent.
    #[arg(long)]
    sweep_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    percentile: Option<f64>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Args, Debug)]
struct AblationArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainOpts,
    #[arg(long)]
    data: PathBuf,
    /// Ablation CSV path; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Values from a `--config` file.
#[derive(Debug, Default)]
struct Settings {
    file: BTreeMap<String, String>,
}

impl Settings {
    fn load(common: &Common) -> Result<Self> {
        let Some(path) = &common.config else {
            return Ok(Settings::default());
        };
        let text = fs::read_to_string(path)?;
        let mut file = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(format!("{}:{}: expected `key = value`", path.display(), n + 1)))?;
            file.insert(k.trim().replace('-', "_"), v.trim().to_string());
        }
        Ok(Settings { file })
    }

    fn opt<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        self.file
            .get(key)
            .map(|raw| raw.parse().map_err(|_| Error::parse(format!("config value {raw:?} for {key} is invalid"))))
            .transpose()
    }

    fn get<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        Ok(self.opt(key, flag)?.unwrap_or(default))
    }

    fn flag(&self, key: &str, flag: bool) -> Result<bool> {
        self.get(key, flag.then_some(true), false)
    }

    fn seed(&self, common: &Common) -> Result<u64> {
        let default = match std::env::var(SEED_ENV) {
            Ok(v) => v.parse().map_err(|_| Error::parse(format!("{SEED_ENV}={v:?} is not an integer")))?,
            Err(_) => 1,
        };
        self.get("seed", common.seed, default)
    }

    fn model(&self, o: &TrainOpts) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        let kind: String = self.get("embed_kind", o.embed_kind.clone(), d.embed_kind.name().into())?;
        Ok(ModelConfig {
            embed_kind: kind.parse()?,
            reduced: self.get("reduced", o.reduced, d.reduced)?,
            embed_dim: self.get("embed_dim", o.embed_dim, d.embed_dim)?,
            n_nodes: self.get("n_nodes", o.n_nodes, d.n_nodes)?,
            top_k: self.get("top_k", o.top_k, d.top_k)?,
            use_normalization: !self.flag("no_normalization", o.no_normalization)?,
        })
    }

    fn train(&self, o: &TrainOpts, seed: u64) -> Result<TrainConfig> {
        let d = TrainConfig::desk();
        let mode: String = self.get("margin", o.margin.clone(), d.margin.mode.name().into())?;
        let cfg = TrainConfig {
            lr: self.get("lr", o.lr, d.lr)?,
            momentum: self.get("momentum", o.momentum, d.momentum)?,
            epochs_stage1: self.get("epochs_stage1", o.epochs_stage1, d.epochs_stage1)?,
            epochs_stage2: self.get("epochs_stage2", o.epochs_stage2, d.epochs_stage2)?,
            batch_size: self.get("batch_size", o.batch_size, d.batch_size)?,
            gamma: self.get("gamma", o.gamma, d.gamma)?,
            temperature: self.get("temperature", o.temperature, d.temperature)?,
            margin: MarginConfig {
                mode: mode.parse::<MarginMode>()?,
                sigma: self.get("sigma", o.sigma, d.margin.sigma)?,
                fixed_lambda: self.get("fixed_lambda", o.fixed_lambda, d.margin.fixed_lambda)?,
            },
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn percentile(&self, flag: Option<f64>) -> Result<f64> {
        self.get("percentile", flag, DEFAULT_PERCENTILE)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let s = Settings::load(&a.common)?;
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        n_seen: s.get("n_seen", a.n_seen, d.n_seen)?,
        n_unseen: s.get("n_unseen", a.n_unseen, d.n_unseen)?,
        attr_dim: s.get("attr_dim", a.attr_dim, d.attr_dim)?,
        feat_dims: (
            s.get("width", a.width, d.feat_dims.0)?,
            s.get("height", a.height, d.feat_dims.1)?,
            s.get("channels", a.channels, d.feat_dims.2)?,
        ),
        samples_per_class: s.get("samples_per_class", a.samples_per_class, d.samples_per_class)?,
        noise_scale: s.get("noise_scale", a.noise_scale, d.noise_scale)?,
        seed: s.seed(&a.common)?,
        val_fraction: s.get("val_fraction", a.val_fraction, d.val_fraction)?,
        test_fraction: s.get("test_fraction", a.test_fraction, d.test_fraction)?,
    };
    let ds = synth_gzsl(&cfg)?;
    write_dir(&ds, &a.out)?;
    eprintln!(
        "wrote {} train, {} val, {} test seen and {} unseen samples to {}",
        ds.train_seen.len(),
        ds.val_seen.len(),
        ds.test_seen.len(),
        ds.test_unseen.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_search(a: &SearchArgs) -> Result<()> {
    let s = Settings::load(&a.common)?;
    let ds = load_dir(&a.data)?;
    let model = s.model(&a.train)?;
    let cfg = s.train(&a.train, s.seed(&a.common)?)?;
    let mut models = Dvbe::init(&ds, &model, None, cfg.seed)?;
    let log = train_stage1(&ds, &mut models, &cfg)?;
    let searched = Checkpoint { models: models.clone(), tau: None };
    let cell = models.fix_architecture()?;
    write(&a.out.join("cell.txt"), cell.to_text())?;
    write(&a.out.join("search.ckpt"), checkpoint::encode(&searched))?;
    write(&a.out.join("search_log.csv"), log.to_csv())?;
    print!("{cell}");
    eprintln!("graph convolution edges in cell: {}", cell.count(OperationKind::GraphConvolution));
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let s = Settings::load(&a.common)?;
    let ds = load_dir(&a.data)?;
    let cell = CellSpec::from_text(&fs::read_to_string(&a.cell)?)?;
    let model = s.model(&a.train)?;
    let cfg = s.train(&a.train, s.seed(&a.common)?)?;
    let mut models = Dvbe::init(&ds, &model, Some(cell), cfg.seed)?;
    let log = train_stage2(&ds, &mut models, &cfg)?;
    let tau = calibrate_tau(&val_entropies(&ds, &models.amse)?, s.percentile(a.percentile)?)?;
    write(&a.out.join("model.ckpt"), checkpoint::encode(&Checkpoint { models, tau: Some(tau) }))?;
    write(&a.out.join("train_log.csv"), log.to_csv())?;
    println!("tau = {tau}");
    Ok(())
}

fn load_discrete(path: &Path) -> Result<Checkpoint> {
    let ck = checkpoint::load(path)?;
    if matches!(ck.models.s2v.arch, Arch::Continuous(_)) {
        return Err(Error::contract(format!(
            "{} holds a search-stage model; train a fixed cell first",
            path.display()
        )));
    }
    Ok(ck)
}

fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || Error::parse(format!("tau sweep {text:?} is not lo:hi:n"));
    let [lo, hi, n] = parts[..] else { return Err(bad()) };
    let lo: f64 = lo.parse().map_err(|_| bad())?;
    let hi: f64 = hi.parse().map_err(|_| bad())?;
    let n: usize = n.parse().map_err(|_| bad())?;
    if n == 0 || hi < lo {
        return Err(bad());
    }
    Ok(linear_grid(lo, hi, n))
}

fn resolve_tau(s: &Settings, ds: &GzslDataset, ck: &Checkpoint, a: &EvalArgs) -> Result<f64> {
    if a.classifier_only {
        return Ok(f64::INFINITY);
    }
    if let Some(t) = s.opt("tau", a.tau)? {
        return Ok(t);
    }
    let percentile = s.opt("percentile", a.percentile)?;
    match (ck.tau, percentile) {
        (Some(t), None) => Ok(t),
        (_, p) => calibrate_tau(&val_entropies(ds, &ck.models.amse)?, p.unwrap_or(DEFAULT_PERCENTILE)),
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let s = Settings::load(&a.common)?;
    let ds = load_dir(&a.data)?;
    let ck = load_discrete(&a.checkpoint)?;
    let tau = resolve_tau(&s, &ds, &ck, a)?;
    let outcomes = gate::outcomes(&ds, &ck.models.amse, &ck.models.s2v)?;
    let report = gate::report_at(&ds, &outcomes, tau)?;
    emit(a.out.as_deref(), &format!("{CSV_HEADER}\n{report}\n"))?;
    let sweep = a.tau_sweep.clone().map(Some).unwrap_or_else(|| s.file.get("tau_sweep").cloned());
    if let Some(text) = sweep {
        let rows = gate::tau_sweep(&ds, &outcomes, &parse_grid(&text)?)?;
        emit(a.sweep_out.as_deref(), &sweep_csv(&rows))?;
    }
    Ok(())
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<()> {
    let s = Settings::load(&a.common)?;
    let ds = load_dir(&a.data)?;
    let ck = load_discrete(&a.checkpoint)?;
    let tau = calibrate_tau(&val_entropies(&ds, &ck.models.amse)?, s.percentile(a.percentile)?)?;
    println!("{tau}");
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let s = Settings::load(&a.common)?;
    let seeds = s.get("seeds", a.seeds, 5)?;
    let step = s.get("step", a.step, 1e-5)?;
    let tol = s.get("tolerance", a.tolerance, 1e-4)?;
    let results = gradsuite::run(seeds, step)?;
    let mut failed = 0;
    for r in &results {
        let ok = r.max_rel_error < tol;
        failed += usize::from(!ok);
        println!("{} {} seed {} max_rel_error {:.3e}", if ok { "PASS" } else { "FAIL" }, r.target, r.seed, r.max_rel_error);
    }
    if failed > 0 {
        return Err(Error::numeric(format!("{failed} of {} gradient checks exceed {tol}", results.len())));
    }
    Ok(())
}

fn cmd_ablation(a: &AblationArgs) -> Result<()> {
    let s = Settings::load(&a.common)?;
    let ds = load_dir(&a.data)?;
    let model = s.model(&a.train)?;
    let cfg = s.train(&a.train, s.seed(&a.common)?)?;
    let rows = run_ablation(&ds, &model, &cfg)?;
    emit(a.out.as_deref(), &ablation_csv(&rows))
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_VALIDATION,
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Search(a) => cmd_search(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablation(a) => cmd_ablation(a),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let asked = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let code = if asked { 0 } else { EXIT_USAGE };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("dvbe: {e}");
            exit_code(&e)
        }
    }
}
