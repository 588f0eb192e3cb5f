//! Semi-supervised training loop, checkpointing and the ablation grid.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{BatchSampler, DatasetManifest, SamplerConfig, SplitName};
use crate::error::{Error, Result};
use crate::inference::{Head, InferenceConfig};
use crate::losses::{
    one_hot, ramp_weight, supervised_loss_with_grad, total_loss, unsupervised_loss_with_grad, UnsupTerms,
};
use crate::metrics::{evaluate_split, ClassSelector, MetricReport};
use crate::model::{mix_seed, Mode, Network, NetworkConfig};
use crate::optim::{poly_lr, Sgd, SgdConfig};
use crate::tensor::{Dims3, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Labeled data only, `λ ≡ 0`.
    Sl,
    /// Supervised loss plus the (optionally rectified) pyramid consistency on unlabeled data.
    #[default]
    Urpc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub t_max: usize,
    pub lr0: f64,
    pub gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub w_max: f64,
    /// Length of the warm-up; `t_max` when unset.
    pub t_ramp: Option<usize>,
    pub rectify: bool,
    pub minimize: bool,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    pub patch: Dims3,
    pub augment: bool,
    /// Drives batch sampling, augmentation and head perturbations.
    pub seed: u64,
    /// Refresh `last.ckpt` every this many steps (0 = never).
    pub checkpoint_every: usize,
    /// Validate every this many steps (0 = only after the last step).
    pub eval_every: usize,
    pub eval_stride: Option<Dims3>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Urpc,
            t_max: 2000,
            lr0: 0.1,
            gamma: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            w_max: 0.1,
            t_ramp: None,
            rectify: true,
            minimize: true,
            labeled_per_batch: 2,
            unlabeled_per_batch: 2,
            patch: [32, 32, 32],
            augment: true,
            seed: 0,
            checkpoint_every: 500,
            eval_every: 200,
            eval_stride: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.t_max == 0 {
            return fail("t_max must be positive".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if !(self.w_max >= 0.0 && self.w_max.is_finite()) {
            return fail(format!("w_max must be >= 0, got {}", self.w_max));
        }
        if self.t_ramp == Some(0) {
            return fail("t_ramp must be positive".into());
        }
        if self.labeled_per_batch == 0 {
            return fail("a batch needs at least one labeled patch".into());
        }
        if self.patch.contains(&0) {
            return fail(format!("patch must be positive, got {:?}", self.patch));
        }
        Sgd::<f32>::new(SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        })
        .map(|_| ())
    }

    pub fn t_ramp(&self) -> usize {
        self.t_ramp.unwrap_or(self.t_max)
    }

    pub fn terms(&self) -> UnsupTerms {
        UnsupTerms {
            rectify: self.rectify,
            minimize: self.minimize,
        }
    }

    /// `λ(t)`; identically zero for the supervised baseline.
    pub fn lambda(&self, t: usize) -> Result<f64> {
        match self.method {
            Method::Sl => Ok(0.0),
            Method::Urpc => ramp_weight(t as f64, self.w_max, self.t_ramp() as f64),
        }
    }

    pub fn lr(&self, t: usize) -> Result<f64> {
        poly_lr(t, self.t_max, self.lr0, self.gamma)
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            patch: self.patch,
            stride: self.eval_stride,
            head: Head::Finest,
            batch: 4,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub sup: f64,
    pub unsup_ur: f64,
    pub unsup_um: f64,
    pub lambda: f64,
    pub total: f64,
    pub lr: f64,
}

/// Single-step driver; [`train`] adds logging, validation and checkpoints.
pub struct Trainer {
    net: Network<f32>,
    opt: Sgd<f32>,
    sampler: BatchSampler,
    cfg: TrainConfig,
    unsup: bool,
    perturb_seed: u64,
    step: usize,
}

impl Trainer {
    pub fn new(manifest: &DatasetManifest, net_cfg: NetworkConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        net_cfg.validate()?;
        let unsup = unsup_active(manifest, &net_cfg, &cfg);
        let sampler = BatchSampler::new(manifest, sampler_config(&cfg, unsup))?;
        Self::with_sampler(Network::new(net_cfg)?, sampler, cfg)
    }

    /// Uses a prepared sampler; the unsupervised term is on whenever the
    /// sampler draws unlabeled patches and the method asks for it.
    pub fn with_sampler(net: Network<f32>, sampler: BatchSampler, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let unsup = cfg.method == Method::Urpc && net.num_scales() > 1 && sampler.config().unlabeled_per_batch > 0;
        if !unsup && sampler.config().unlabeled_per_batch > 0 {
            return Err(Error::Config("unlabeled patches would be drawn but never used".into()));
        }
        Ok(Self {
            net,
            opt: Sgd::new(SgdConfig {
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
            })?,
            sampler,
            unsup,
            perturb_seed: mix_seed(cfg.seed, 0x009E_127B),
            cfg,
            step: 0,
        })
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn uses_unlabeled(&self) -> bool {
        self.unsup
    }

    /// Samples a batch, evaluates the objective and applies one SGD update.
    pub fn step(&mut self) -> Result<StepLog> {
        let t = self.step;
        let batch = self.sampler.sample(t as u64)?;
        let x: Tensor<f32> = batch.images();
        let seeds = batch.keys.iter().map(|&k| mix_seed(self.perturb_seed, k)).collect();
        let (pyr, tape) = self.net.forward_with_tape(&x, &Mode::Train(seeds))?;
        let nl = batch.labeled.len();
        let n = batch.len();
        let c = self.net.config().num_classes;
        let dims = x.spatial();

        let labeled: Vec<Tensor<f32>> = pyr.probs.iter().map(|p| p.slice_batch(0, nl)).collect();
        let y = one_hot::<f32>(&batch.label_slices(), c, dims)?;
        let (sup, sup_grads) = supervised_loss_with_grad(&labeled, &y)?;

        let lambda = self.cfg.lambda(t)?;
        let (ur, um, unsup_grads) = if self.unsup {
            let unl: Vec<Tensor<f32>> = pyr.probs.iter().map(|p| p.slice_batch(nl, n)).collect();
            let u = unsupervised_loss_with_grad(&unl, self.cfg.terms())?;
            (u.consistency, u.minimization, Some(u.grads))
        } else {
            (0.0, 0.0, None)
        };
        let report = total_loss(sup, ur, um, lambda).map_err(|e| at_step(e, t))?;

        let grads = match unsup_grads {
            Some(ug) => sup_grads
                .iter()
                .zip(ug)
                .map(|(gs, mut gu)| {
                    gu.scale(lambda as f32);
                    Tensor::cat_batch(&[gs, &gu])
                })
                .collect::<Result<Vec<_>>>()?,
            None => sup_grads,
        };
        self.net.zero_grad();
        self.net.backward(&tape, &grads)?;
        if let Some(p) = self.net.params().iter().find(|p| !p.grad.iter().all(|g| g.is_finite())) {
            return Err(Error::NonFinite {
                component: format!("gradient of {}", p.name),
                step: t,
            });
        }
        let lr = self.cfg.lr(t)?;
        // An update that overflows is undone, so the network stays usable.
        let saved_opt = self.opt.clone();
        let saved: Vec<Vec<f32>> = self.net.params().iter().map(|p| p.value.clone()).collect();
        self.opt.step(self.net.params_mut(), lr)?;
        if !self.params_finite() {
            self.opt = saved_opt;
            for (p, v) in self.net.params_mut().into_iter().zip(saved) {
                p.value = v;
            }
            return Err(Error::NonFinite {
                component: "parameters after the update".into(),
                step: t,
            });
        }
        self.step += 1;
        Ok(StepLog {
            step: t,
            sup: report.sup,
            unsup_ur: report.unsup_ur,
            unsup_um: report.unsup_um,
            lambda: report.lambda,
            total: report.total,
            lr,
        })
    }

    fn params_finite(&self) -> bool {
        self.net.params().iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { component, .. } => Error::NonFinite { component, step },
        other => other,
    }
}

fn unsup_active(manifest: &DatasetManifest, net_cfg: &NetworkConfig, cfg: &TrainConfig) -> bool {
    if cfg.method == Method::Sl || cfg.unlabeled_per_batch == 0 {
        return false;
    }
    if net_cfg.num_scales < 2 {
        log::info!("single-scale network: consistency terms vanish, training on labeled data only");
        return false;
    }
    if manifest.ids(SplitName::TrainUnlabeled).is_empty() {
        log::warn!("no unlabeled training cases: URPC reduces to supervised training");
        return false;
    }
    true
}

fn sampler_config(cfg: &TrainConfig, unsup: bool) -> SamplerConfig {
    SamplerConfig {
        patch: cfg.patch,
        labeled_per_batch: cfg.labeled_per_batch,
        unlabeled_per_batch: if unsup { cfg.unlabeled_per_batch } else { 0 },
        augment: cfg.augment,
        seed: cfg.seed,
    }
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const VAL_LOG_FILE: &str = "val_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub step: usize,
    pub mean_dsc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    /// Best mean foreground DSC on the validation split, if there is one.
    pub best_checkpoint: Option<PathBuf>,
    pub best_val_dsc: Option<f64>,
    pub log_path: PathBuf,
    pub history: Vec<StepLog>,
    pub validation: Vec<ValPoint>,
    pub used_unlabeled: bool,
}

impl TrainOutcome {
    /// The checkpoint to evaluate: best-on-validation when available.
    pub fn selected_checkpoint(&self) -> &Path {
        self.best_checkpoint.as_deref().unwrap_or(&self.final_checkpoint)
    }
}

/// Trains from scratch, writing the log, validation history and checkpoints under `out_dir`.
///
/// On a non-finite loss or gradient the run stops with an error; the
/// parameters from before the failing step are kept in `last.ckpt`.
pub fn train(
    manifest: &DatasetManifest,
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(manifest, net_cfg.clone(), cfg.clone())?;
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let val_path = out_dir.join(VAL_LOG_FILE);
    let mut log = JsonLines::create(&log_path)?;
    let mut val_log = JsonLines::create(&val_path)?;
    let last = ckpt_dir.join("last.ckpt");
    let best = ckpt_dir.join("best.ckpt");
    let has_val = !manifest.ids(SplitName::Val).is_empty();
    if !has_val {
        log::warn!("validation split is empty; only the final checkpoint will be written");
    }

    let mut history = Vec::with_capacity(cfg.t_max);
    let mut validation = Vec::new();
    let mut best_val: Option<f64> = None;
    for t in 0..cfg.t_max {
        let entry = match trainer.step() {
            Ok(entry) => entry,
            Err(e) => {
                log.flush()?;
                if trainer.params_finite() {
                    save_checkpoint(trainer.network(), trainer.steps_taken(), None, &last)?;
                }
                return Err(e);
            }
        };
        log.write(&entry)?;
        history.push(entry);
        let done = t + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            save_checkpoint(trainer.network(), done, None, &last)?;
        }
        let due = done == cfg.t_max || (cfg.eval_every > 0 && done % cfg.eval_every == 0);
        if has_val && due {
            let report = evaluate_split(trainer.network(), manifest, SplitName::Val, &cfg.inference())?;
            let dsc = report.dsc(ClassSelector::Mean).mean;
            log::info!("step {done}: val mean DSC {dsc:.4}");
            let point = ValPoint {
                step: done,
                mean_dsc: dsc,
            };
            val_log.write(&point)?;
            val_log.flush()?;
            validation.push(point);
            if best_val.is_none_or(|b| dsc > b) {
                best_val = Some(dsc);
                save_checkpoint(trainer.network(), done, Some(dsc), &best)?;
            }
        }
    }
    log.flush()?;
    val_log.flush()?;
    let final_checkpoint = ckpt_dir.join("final.ckpt");
    let final_val = validation.last().filter(|v| v.step == cfg.t_max).map(|v| v.mean_dsc);
    save_checkpoint(trainer.network(), cfg.t_max, final_val, &final_checkpoint)?;
    Ok(TrainOutcome {
        final_checkpoint,
        best_checkpoint: best_val.map(|_| best),
        best_val_dsc: best_val,
        log_path,
        history,
        validation,
        used_unlabeled: trainer.uses_unlabeled(),
    })
}

struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    fn write<S: Serialize>(&mut self, value: &S) -> Result<()> {
        let line = serde_json::to_string(value).map_err(|e| Error::json(&self.path, e))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a training log back.
pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

/// One configuration of the ablation table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub num_scales: usize,
    pub rectify: bool,
    pub minimize: bool,
}

impl AblationRow {
    pub fn new(name: &str, num_scales: usize, rectify: bool, minimize: bool) -> Self {
        Self {
            name: name.into(),
            num_scales,
            rectify,
            minimize,
        }
    }
}

/// Single-scale baseline, plain consistency at two to five scales, then
/// four scales with rectification and with rectification plus minimization.
pub fn default_grid() -> Vec<AblationRow> {
    vec![
        AblationRow::new("baseline_s1", 1, false, false),
        AblationRow::new("s2", 2, false, false),
        AblationRow::new("s3", 3, false, false),
        AblationRow::new("s4", 4, false, false),
        AblationRow::new("s5", 5, false, false),
        AblationRow::new("s4_ur", 4, true, false),
        AblationRow::new("s4_ur_um", 4, true, true),
    ]
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub row: AblationRow,
    pub report: MetricReport,
    pub best_val_dsc: Option<f64>,
}

/// Trains every row with shared seeds and splits and scores the selected
/// checkpoint on the test split. Writes `ablation.csv` into `out_dir`.
pub fn run_ablation(
    manifest: &DatasetManifest,
    base_net: &NetworkConfig,
    base_train: &TrainConfig,
    grid: &[AblationRow],
    out_dir: &Path,
) -> Result<Vec<AblationResult>> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let mut results = Vec::with_capacity(grid.len());
    for row in grid {
        let net_cfg = NetworkConfig {
            num_scales: row.num_scales,
            ..base_net.clone()
        };
        let cfg = TrainConfig {
            method: Method::Urpc,
            rectify: row.rectify && row.num_scales > 1,
            minimize: row.minimize && row.num_scales > 1,
            ..base_train.clone()
        };
        log::info!("ablation row {}", row.name);
        let outcome = train(manifest, &net_cfg, &cfg, &out_dir.join(&row.name))?;
        let (net, _) = crate::checkpoint::load_checkpoint::<f32>(outcome.selected_checkpoint())?;
        let report = evaluate_split(&net, manifest, SplitName::Test, &cfg.inference())?;
        results.push(AblationResult {
            row: row.clone(),
            report,
            best_val_dsc: outcome.best_val_dsc,
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("ablation.csv");
    fs::write(&path, ablation_csv(&results)?).map_err(|e| Error::io(&path, e))?;
    Ok(results)
}

/// Per-class and mean DSC/ASD (mean and std over test cases), one row per configuration.
pub fn ablation_csv(results: &[AblationResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Input(format!("csv: {e}"));
    let selectors = results.first().map(|r| r.report.selectors()).unwrap_or_default();
    let mut header = vec![
        "config".to_string(),
        "num_scales".into(),
        "rectify".into(),
        "minimize".into(),
    ];
    for sel in &selectors {
        let tag = match sel {
            ClassSelector::Class(k) => format!("class{k}"),
            ClassSelector::Mean => "mean".into(),
        };
        for m in ["dsc", "dsc_std", "asd", "asd_std"] {
            header.push(format!("{m}_{tag}"));
        }
    }
    w.write_record(&header).map_err(err)?;
    let fmt = |v: f64| {
        if v.is_finite() {
            format!("{v:.6}")
        } else {
            String::new()
        }
    };
    for r in results {
        let mut rec = vec![
            r.row.name.clone(),
            r.row.num_scales.to_string(),
            r.row.rectify.to_string(),
            r.row.minimize.to_string(),
        ];
        for &sel in &selectors {
            let (d, a) = (r.report.dsc(sel), r.report.asd(sel));
            rec.extend([fmt(d.mean), fmt(d.std), fmt(a.mean), fmt(a.std)]);
        }
        w.write_record(&rec).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
