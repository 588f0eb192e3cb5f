use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use urpc_core::checkpoint::load_checkpoint;
use urpc_core::config::{output_root, ExperimentConfig, RunRecord, OUTPUT_ROOT_ENV};
use urpc_core::data::{generate_synthetic_dataset, DatasetManifest, SplitName, Volume};
use urpc_core::inference::{sliding_window_predict, Head};
use urpc_core::metrics::{evaluate_split, ClassSelector};
use urpc_core::tensor::Dims3;
use urpc_core::trainer::{default_grid, run_ablation, train, AblationRow, Method};

#[derive(Parser)]
#[command(name = "urpc", version, about = "Semi-supervised volumetric segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    Generate(GenerateArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Train the ablation grid and tabulate test metrics.
    Ablate(AblateArgs),
    /// Score a checkpoint on a split.
    Eval(EvalArgs),
    /// Segment volumes and write probabilities, labels and uncertainty.
    Predict(PredictArgs),
}

fn parse_dims(s: &str) -> Result<Dims3, String> {
    let parts: Vec<usize> = s
        .split(['x', ','])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [n] if *n > 0 => Ok([*n; 3]),
        [d, h, w] if *d > 0 && *h > 0 && *w > 0 => Ok([*d, *h, *w]),
        _ => Err(format!("expected N or DxHxW with positive extents, got {s:?}")),
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "n", default_value_t = 32)]
    num_cases: usize,
    /// Volume extent: N or DxHxW.
    #[arg(long, default_value = "64", value_parser = parse_dims)]
    shape: Dims3,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    num_val: usize,
    #[arg(long, default_value_t = 8)]
    num_test: usize,
    #[arg(long, default_value_t = 0.1)]
    labeled_fraction: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Sl,
    Urpc,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Val,
    Test,
    TrainLabeled,
    TrainUnlabeled,
}

impl From<SplitArg> for SplitName {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Val => SplitName::Val,
            SplitArg::Test => SplitName::Test,
            SplitArg::TrainLabeled => SplitName::TrainLabeled,
            SplitArg::TrainUnlabeled => SplitName::TrainUnlabeled,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    /// Finest-scale prediction.
    Finest,
    /// Average over scales.
    Average,
}

/// Options shared by every command that builds an experiment configuration.
#[derive(Args)]
struct Common {
    /// Experiment configuration (or a recorded experiment.json); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for run directories [default: runs].
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    out_root: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    labeled_fraction: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    scales: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long, value_parser = parse_dims)]
    patch: Option<Dims3>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    w_max: Option<f64>,
    /// Seed for sampling, augmentation and perturbations.
    #[arg(long)]
    seed: Option<u64>,
    /// Seed for weight initialization.
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Plain pyramid consistency instead of the rectified form.
    #[arg(long)]
    no_rectify: bool,
    /// Drop the uncertainty minimization term.
    #[arg(long)]
    no_minimize: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    /// Restrict to these rows of the default grid (comma separated names).
    #[arg(long, value_delimiter = ',')]
    rows: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    #[arg(long, value_parser = parse_dims)]
    patch: Option<Dims3>,
    #[arg(long, value_parser = parse_dims)]
    stride: Option<Dims3>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Raw volumes to segment; alternatively use --manifest with --split.
    #[arg(long = "input", num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    #[arg(long, value_parser = parse_dims)]
    patch: Option<Dims3>,
    #[arg(long, value_parser = parse_dims)]
    stride: Option<Dims3>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let opts = urpc_core::data::GenerateOptions {
        num_cases: a.num_cases,
        dims: a.shape,
        seed: a.seed,
        num_val: a.num_val,
        num_test: a.num_test,
        labeled_fraction: a.labeled_fraction,
    };
    generate_synthetic_dataset(&opts, &a.out)?;
    println!("{}", a.out.join(urpc_core::data::MANIFEST_FILE).display());
    Ok(())
}

/// Loads `--config`, accepting either a bare configuration or a run record.
fn base_config(common: &Common) -> Result<ExperimentConfig> {
    let Some(path) = &common.config else {
        return Ok(ExperimentConfig::default());
    };
    if let Ok(record) = RunRecord::load(path) {
        return Ok(record.config);
    }
    ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))
}

fn apply_model_args(cfg: &mut ExperimentConfig, m: &ModelArgs) {
    if let Some(p) = &m.manifest {
        cfg.data.manifest = Some(p.clone());
    }
    if m.labeled_fraction.is_some() {
        cfg.data.labeled_fraction = m.labeled_fraction;
    }
    let (net, tr) = (&mut cfg.network, &mut cfg.train);
    macro_rules! set {
        ($field:expr, $value:expr) => {
            if let Some(v) = $value {
                $field = v;
            }
        };
    }
    set!(tr.t_max, m.steps);
    set!(net.num_scales, m.scales);
    set!(net.base_channels, m.base_channels);
    set!(net.depth, m.depth);
    set!(tr.patch, m.patch);
    set!(tr.lr0, m.lr);
    set!(tr.w_max, m.w_max);
    set!(tr.seed, m.seed);
    set!(net.seed, m.init_seed);
    set!(tr.eval_every, m.eval_every);
    set!(tr.checkpoint_every, m.checkpoint_every);
    cfg.inference.patch = cfg.train.patch;
}

fn load_manifest(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    let path = cfg
        .data
        .manifest
        .as_ref()
        .context("no manifest given (use --manifest or set data.manifest in the config)")?;
    let manifest = DatasetManifest::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(match cfg.data.labeled_fraction {
        Some(f) => manifest.with_labeled_fraction(f)?,
        None => manifest,
    })
}

fn root(common: &Common) -> PathBuf {
    output_root(common.out_root.as_deref())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    apply_model_args(&mut cfg, &a.model);
    if let Some(m) = a.method {
        cfg.train.method = match m {
            MethodArg::Sl => Method::Sl,
            MethodArg::Urpc => Method::Urpc,
        };
    }
    cfg.train.rectify &= !a.no_rectify;
    cfg.train.minimize &= !a.no_minimize;
    let manifest = load_manifest(&cfg)?;
    log::info!(
        "{} labeled / {} unlabeled training cases",
        manifest.ids(SplitName::TrainLabeled).len(),
        manifest.ids(SplitName::TrainUnlabeled).len()
    );
    let record = RunRecord::new("train", cfg.clone(), json!({}))?;
    let dir = record.materialize(&root(&a.common))?;
    let out = train(&manifest, &cfg.network, &cfg.train, &dir)?;
    println!("run directory: {}", dir.display());
    println!("final checkpoint: {}", out.final_checkpoint.display());
    if let (Some(best), Some(dsc)) = (&out.best_checkpoint, out.best_val_dsc) {
        println!("best checkpoint: {} (val mean DSC {dsc:.4})", best.display());
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    apply_model_args(&mut cfg, &a.model);
    let grid: Vec<AblationRow> = if a.rows.is_empty() {
        default_grid()
    } else {
        let all = default_grid();
        a.rows
            .iter()
            .map(|name| {
                all.iter()
                    .find(|r| &r.name == name)
                    .cloned()
                    .with_context(|| format!("unknown ablation row {name:?}"))
            })
            .collect::<Result<_>>()?
    };
    let manifest = load_manifest(&cfg)?;
    let record = RunRecord::new("ablate", cfg.clone(), json!({ "rows": grid }))?;
    let dir = record.materialize(&root(&a.common))?;
    let results = run_ablation(&manifest, &cfg.network, &cfg.train, &grid, &dir)?;
    for r in &results {
        println!(
            "{:<12} mean DSC {:.4}",
            r.row.name,
            r.report.dsc(ClassSelector::Mean).mean
        );
    }
    println!("{}", dir.join("ablation.csv").display());
    Ok(())
}

fn inference_overrides(cfg: &mut ExperimentConfig, head: Option<HeadArg>, patch: Option<Dims3>, stride: Option<Dims3>) {
    if let Some(h) = head {
        cfg.inference.head = match h {
            HeadArg::Finest => Head::Finest,
            HeadArg::Average => Head::Average,
        };
    }
    if let Some(p) = patch {
        cfg.inference.patch = p;
    }
    if stride.is_some() {
        cfg.inference.stride = stride;
    }
}

fn checkpoint_arg(path: &Path) -> Result<serde_json::Value> {
    let abs = path
        .canonicalize()
        .with_context(|| format!("checkpoint {} not found", path.display()))?;
    Ok(json!({ "checkpoint": abs }))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    if let Some(p) = &a.manifest {
        cfg.data.manifest = Some(p.clone());
    }
    inference_overrides(&mut cfg, a.head, a.patch, a.stride);
    let manifest = load_manifest(&cfg)?;
    let (net, meta) = load_checkpoint::<f32>(&a.checkpoint)?;
    cfg.network = meta.network;
    let split: SplitName = a.split.into();
    let mut args = checkpoint_arg(&a.checkpoint)?;
    args["split"] = serde_json::to_value(split)?;
    let record = RunRecord::new("eval", cfg.clone(), args)?;
    let dir = record.materialize(&root(&a.common))?;
    let report = evaluate_split(&net, &manifest, split, &cfg.inference)?;
    let path = dir.join("metrics.csv");
    report.write_csv(&path)?;
    for sel in report.selectors() {
        let (d, s) = (report.dsc(sel), report.asd(sel));
        let name = match sel {
            ClassSelector::Class(k) => format!("class {k}"),
            ClassSelector::Mean => "mean".into(),
        };
        println!(
            "{name:<8} DSC {:.4} ± {:.4}  ASD {:.3} ± {:.3}",
            d.mean, d.std, s.mean, s.std
        );
    }
    if report.skipped > 0 {
        println!("{} cases without labels skipped", report.skipped);
    }
    println!("{}", path.display());
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    inference_overrides(&mut cfg, a.head, a.patch, a.stride);
    let (net, meta) = load_checkpoint::<f32>(&a.checkpoint)?;
    cfg.network = meta.network;

    let mut cases: Vec<(String, Volume)> = Vec::new();
    if !a.inputs.is_empty() {
        for p in &a.inputs {
            let id = p
                .file_stem()
                .and_then(|s| s.to_str())
                .with_context(|| format!("cannot name a case after {}", p.display()))?
                .to_string();
            cases.push((id, Volume::load(p)?));
        }
    } else {
        if let Some(p) = &a.manifest {
            cfg.data.manifest = Some(p.clone());
        }
        let manifest = load_manifest(&cfg)?;
        for id in manifest.ids(a.split.into()) {
            cases.push((id.clone(), manifest.load_volume(id)?));
        }
    }
    if cases.is_empty() {
        bail!("nothing to predict");
    }
    let mut args = checkpoint_arg(&a.checkpoint)?;
    args["cases"] = json!(cases.iter().map(|(id, _)| id).collect::<Vec<_>>());
    let record = RunRecord::new("predict", cfg.clone(), args)?;
    let dir = record.materialize(&root(&a.common))?;
    for (id, volume) in &cases {
        let seg = sliding_window_predict(&net, &volume.normalize()?, &cfg.inference)?;
        seg.save(&dir, id)?;
        println!("{id}: {}", dir.display());
    }
    Ok(())
}
