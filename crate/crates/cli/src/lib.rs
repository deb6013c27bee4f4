//! Command implementations behind the `downscale` binary.

pub mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use downscale_core::datapipe::{split_by_decade, synth, synth_generate, Dataset, Split, SynthParams};
use downscale_core::evaluation::{self, make_report, MetricsReport, RunMetrics};
use downscale_core::models::param_report;
use downscale_core::training::{train_run, TrainedModel};
use downscale_core::{Arch, Error, Model, ModelConfig, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "downscale", version, about = "Train and evaluate climate downscaling emulators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic paired coarse/fine dataset.
    Generate(GenerateArgs),
    /// Train one architecture for each configured seed.
    Train(TrainArgs),
    /// Score checkpoints and the bilinear baseline on the test split.
    Evaluate(EvaluateArgs),
    /// Time inference over the test split.
    Benchmark(BenchmarkArgs),
    /// Print parameter counts of the four architectures.
    Params(ParamsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Toy,
    Paper,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `N` for years 1..=N, `A-B`, or a comma list.
    #[arg(long, default_value = "20", value_parser = config::parse_years_arg)]
    pub years: config::Years,
    #[arg(long, default_value_t = 36)]
    pub days: usize,
    /// Fine grid as `HxW`.
    #[arg(long, default_value = "64x64", value_parser = config::parse_extent)]
    pub hi: (usize, usize),
    /// Coarsening factor between the fine and coarse grids.
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing dataset.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults used when no configuration file is given.
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    pub preset: Preset,
    #[arg(long)]
    pub arch: Option<Arch>,
    /// Train with this seed only.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// First-phase learning rate; the second phase uses a tenth of it.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Overwrite existing checkpoints (runs are never resumed).
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// Checkpoints; files of the same architecture in one directory form
    /// one run, and several runs of an architecture are seed-averaged.
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report_dir: PathBuf,
    /// Use one global SSIM window instead of the 11x11 Gaussian window.
    #[arg(long)]
    pub global_ssim: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BenchmarkArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub repeat: usize,
    /// Timing CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ParamsArgs {
    #[arg(long, value_enum, default_value_t = Preset::Paper)]
    pub preset: Preset,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Dimension { .. } => 2,
        Error::Data(_) | Error::Io { .. } | Error::Json(_) => 3,
        Error::NonFiniteLoss { .. } => 4,
        Error::Contract(_) => 1,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub manifest: PathBuf,
    pub sha256: String,
    pub pairs: usize,
    pub train_years: Vec<u32>,
    pub test_years: Vec<u32>,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<GenerateSummary> {
    let params = SynthParams {
        seed: args.seed,
        years: args.years.0.clone(),
        days_per_year: args.days,
        hi_h: args.hi.0,
        hi_w: args.hi.1,
        scale: args.scale,
        ..SynthParams::toy(args.seed)
    };
    params.validate()?;
    let (train_years, test_years) = split_by_decade(&params.years)?;
    let manifest_path = args.out.join("manifest.json");
    if manifest_path.exists() {
        if !args.force {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to replace it",
                manifest_path.display()
            )));
        }
        let fields = args.out.join("fields");
        if fields.exists() {
            std::fs::remove_dir_all(&fields).map_err(|e| Error::io(&fields, e))?;
        }
    }
    let manifest = synth_generate(&params, &args.out)?;
    write_json(&args.out.join("generate_config.json"), &params)?;
    let bytes = std::fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(GenerateSummary {
        manifest: manifest_path,
        sha256: sha256_hex(&bytes),
        pairs: manifest.variables.len() * manifest.years.len() * manifest.days_per_year,
        train_years,
        test_years,
    })
}

/// Resolves the run configuration from file, preset and flags.
pub fn resolve_train_config(args: &TrainArgs) -> Result<RunConfig> {
    let from_file = args.config.is_some();
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let arch = args.arch.unwrap_or(Arch::Vit1emd);
            match args.preset {
                Preset::Toy => RunConfig::toy(arch),
                Preset::Paper => RunConfig::paper(arch),
            }
        }
    };
    if let Some(arch) = args.arch {
        cfg = cfg.with_arch(arch);
    }
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(data) = &args.data {
        cfg.data = data.clone();
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(e) = args.epochs {
        cfg.schedule.epochs = e;
    }
    if let Some(s) = args.steps {
        cfg.schedule.steps_per_epoch = s;
    }
    if let Some(lr) = args.lr {
        cfg.schedule.lr_phase1 = lr;
        cfg.schedule.lr_phase2 = lr / 10.0;
    }
    if !from_file {
        // Presets follow the dataset's grid when one is present.
        if let Ok(m) = downscale_core::Manifest::load(&cfg.data.join("manifest.json")) {
            let (h, w) = m.grid.padded();
            cfg.model.height = h;
            cfg.model.width = w;
            cfg.model.variables = m.variables.clone();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Trains every configured seed into `<out>/seed_<s>/`.
pub fn cmd_train(args: &TrainArgs) -> Result<(RunConfig, Vec<(u64, Vec<TrainedModel>)>)> {
    let cfg = resolve_train_config(args)?;
    let dataset = Dataset::load(&cfg.data)?;
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        let dir = seed_dir(&cfg.out, seed);
        if has_checkpoints(&dir) && !args.force {
            return Err(Error::Config(format!(
                "{} already holds checkpoints; runs cannot be resumed, pass --force to retrain",
                dir.display()
            )));
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let quiet = args.quiet;
        let trained = train_run(&cfg.model, &dataset, &cfg.schedule, seed, Some(&dir), |tag, r| {
            if !quiet {
                eprintln!(
                    "seed {seed} {tag} epoch {:>4} loss {:.6e} lr {:e}",
                    r.epoch, r.mean_loss, r.lr
                );
            }
        })?;
        results.push((seed, trained));
    }
    cfg.save(&cfg.out.join("run_config.json"))?;
    Ok((cfg, results))
}

fn has_checkpoints(dir: &Path) -> bool {
    std::fs::read_dir(dir)
        .map(|it| {
            it.flatten()
                .any(|e| e.path().extension().is_some_and(|x| x == "ckpt"))
        })
        .unwrap_or(false)
}

/// Checkpoints of one architecture from one directory.
pub struct LoadedRun {
    pub arch: Arch,
    pub dir: PathBuf,
    pub members: Vec<Model<f32>>,
    pub load_seconds: f64,
}

impl LoadedRun {
    pub fn n_variables(&self) -> usize {
        self.members.iter().map(|m| m.config().n_vars()).sum()
    }
}

/// Loads and groups checkpoints by `(architecture, directory)`, in
/// architecture order.
pub fn load_runs(paths: &[PathBuf]) -> Result<Vec<LoadedRun>> {
    let mut groups: BTreeMap<(Arch, PathBuf), LoadedRun> = BTreeMap::new();
    for path in paths {
        let start = Instant::now();
        let model = Model::<f32>::load(path)?;
        let secs = start.elapsed().as_secs_f64();
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let arch = model.config().arch;
        let run = groups.entry((arch, dir.clone())).or_insert_with(|| LoadedRun {
            arch,
            dir,
            members: Vec::new(),
            load_seconds: 0.0,
        });
        if arch != Arch::SingleVar && !run.members.is_empty() {
            return Err(Error::Config(format!(
                "two {arch} checkpoints in {}; give one per run directory",
                run.dir.display()
            )));
        }
        run.members.push(model);
        run.load_seconds += secs;
    }
    Ok(groups.into_values().collect())
}

#[derive(Debug, Clone, Serialize)]
struct EvaluateEcho<'a> {
    checkpoints: &'a [PathBuf],
    data: &'a Path,
    ssim: downscale_core::SsimOptions,
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<MetricsReport> {
    if args.report_dir.join("metrics.csv").exists() && !args.force {
        return Err(Error::Config(format!(
            "{} already holds a report; pass --force to replace it",
            args.report_dir.display()
        )));
    }
    let ssim = downscale_core::SsimOptions {
        global: args.global_ssim,
        ..Default::default()
    };
    let dataset = Dataset::load(&args.data)?;
    let runs = load_runs(&args.checkpoints)?;
    let samples = dataset.split(Split::Test);
    let targets = evaluation::targets(&dataset, samples)?;
    let vars = dataset.variables().to_vec();
    let mut metrics: Vec<RunMetrics> = Vec::new();
    let baseline = evaluation::predict_bilinear(&dataset, samples)?;
    metrics.push(evaluation::evaluate(&baseline, &targets, &vars, &ssim)?);
    for run in &runs {
        let preds = evaluation::predict(run.arch.key(), &run.members, &dataset, samples)?;
        metrics.push(evaluation::evaluate(&preds, &targets, &vars, &ssim)?);
    }
    let report = make_report(&vars, &metrics)?;
    report.write(&args.report_dir, &synth::FINGERPRINT_VARIABLES)?;
    write_json(
        &args.report_dir.join("evaluate_config.json"),
        &EvaluateEcho {
            checkpoints: &args.checkpoints,
            data: &args.data,
            ssim,
        },
    )?;
    Ok(report)
}

/// Median timing of one run.
#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub model: String,
    pub dir: PathBuf,
    pub n_variables: usize,
    pub members: usize,
    pub load_seconds: f64,
    pub total_seconds: f64,
    pub per_variable_seconds: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times inference over the test split `repeat` times per run and writes
/// per-repeat and median rows to the CSV.
pub fn cmd_benchmark(args: &BenchmarkArgs) -> Result<Vec<Timing>> {
    if args.repeat == 0 {
        return Err(Error::Config("--repeat must be at least 1".into()));
    }
    let dataset = Dataset::load(&args.data)?;
    let runs = load_runs(&args.checkpoints)?;
    let samples = dataset.split(Split::Test);
    let mut csv = String::from("model,dir,row,n_variables,load_seconds,total_seconds,per_variable_seconds\n");
    let mut out = Vec::new();
    for run in &runs {
        let n = run.n_variables();
        let mut totals = Vec::with_capacity(args.repeat);
        for r in 0..args.repeat {
            let start = Instant::now();
            evaluation::predict(run.arch.key(), &run.members, &dataset, samples)?;
            let t = start.elapsed().as_secs_f64();
            csv += &format!(
                "{},{},{},{n},{:.6},{t:.6},{:.6}\n",
                run.arch,
                run.dir.display(),
                r,
                run.load_seconds,
                t / n as f64
            );
            totals.push(t);
        }
        let total = median(totals);
        csv += &format!(
            "{},{},median,{n},{:.6},{total:.6},{:.6}\n",
            run.arch,
            run.dir.display(),
            run.load_seconds,
            total / n as f64
        );
        out.push(Timing {
            model: run.arch.key().to_string(),
            dir: run.dir.clone(),
            n_variables: n,
            members: run.members.len(),
            load_seconds: run.load_seconds,
            total_seconds: total,
            per_variable_seconds: total / n as f64,
        });
    }
    if let Some(dir) = args.out.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&args.out, csv).map_err(|e| Error::io(&args.out, e))?;
    let echo = args.out.with_extension("config.json");
    write_json(
        &echo,
        &serde_json::json!({
            "checkpoints": args.checkpoints,
            "data": args.data,
            "repeat": args.repeat,
            "test_days": samples.len(),
        }),
    )?;
    Ok(out)
}

pub fn preset_configs(preset: Preset) -> Vec<ModelConfig> {
    Arch::ALL
        .into_iter()
        .map(|a| match preset {
            Preset::Paper => ModelConfig::paper(a),
            Preset::Toy => {
                let mut c = ModelConfig::toy(a);
                if a == Arch::SingleVar {
                    c.variables.truncate(1);
                }
                c
            }
        })
        .collect()
}

pub fn cmd_params(args: &ParamsArgs) -> Result<String> {
    let report = param_report(&preset_configs(args.preset))?;
    if let Some(path) = &args.out {
        std::fs::write(path, &report).map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}

/// Runs a parsed command, printing its summary.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => {
            let s = cmd_generate(&args)?;
            println!("wrote {} ({} variable-day pairs)", s.manifest.display(), s.pairs);
            println!("manifest sha256 {}", s.sha256);
            println!("train years: {}", preview(&s.train_years));
            println!("test years:  {}", preview(&s.test_years));
        }
        Command::Train(args) => {
            let (cfg, results) = cmd_train(&args)?;
            for (seed, trained) in &results {
                for t in trained {
                    let last = t.history.last().map(|r| r.mean_loss).unwrap_or(f64::NAN);
                    println!(
                        "seed {seed} {}: first epoch loss {:.6e}, last {:.6e}",
                        t.tag, t.history[0].mean_loss, last
                    );
                }
            }
            println!("resolved config: {}", cfg.out.join("run_config.json").display());
        }
        Command::Evaluate(args) => {
            let report = cmd_evaluate(&args)?;
            print!("{}", report.to_table());
            print!("\n{}", report.leakage_table(&synth::FINGERPRINT_VARIABLES));
        }
        Command::Benchmark(args) => {
            for t in cmd_benchmark(&args)? {
                println!(
                    "{:<10} {} variables: load {:.4}s, inference {:.4}s, per variable {:.4}s",
                    t.model, t.n_variables, t.load_seconds, t.total_seconds, t.per_variable_seconds
                );
            }
        }
        Command::Params(args) => print!("{}", cmd_params(&args)?),
    }
    Ok(())
}

fn preview(years: &[u32]) -> String {
    match years {
        [] => "none".into(),
        [a] => a.to_string(),
        _ if years.len() <= 10 => years.iter().map(u32::to_string).collect::<Vec<_>>().join(", "),
        _ => format!(
            "{}, {}, ..., {} ({} years)",
            years[0],
            years[1],
            years[years.len() - 1],
            years.len()
        ),
    }
}
