//! Pretraining and linear-evaluation drivers.

pub mod linear;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{view_pairs_for_batch, AugmentConfig};
use crate::backbone::{forward_backbone, Backbone, BackboneConfig, BackboneKind};
use crate::checkpoint::{Checkpoint, CheckpointMeta, FORMAT_VERSION};
use crate::data::{
    load_records, preprocess_eval, split_holdout, split_kfold, DatasetManifest, PreprocessConfig, Split,
};
use crate::error::{Error, Result};
use crate::eval::{aggregate, evaluate, MetricsReport, PredictionSet};
use crate::image::Image;
use crate::kernels::Exec;
use crate::nn::ParamStore;
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::schedule::{lr_schedule, wd_schedule, LrSchedule, PostWarmup};
use crate::ssl::heads::HeadConfig;
use crate::ssl::{DinoConfig, Framework, SslConfig, SslModel, SslState};
use crate::tensor::Tensor;

use linear::{LinearProbe, ProbeHparams, Standardizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub framework: Framework,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub lr_policy: PostWarmup,
    /// Per-epoch checkpoints retained on disk.
    #[serde(default = "d_keep")]
    pub keep_checkpoints: usize,
    pub backbone: BackboneConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub dino: DinoConfig,
    #[serde(default = "d_simclr_t")]
    pub simclr_temperature: f64,
    #[serde(default = "d_byol_m")]
    pub byol_momentum: f64,
    pub augment: AugmentConfig,
}

fn d_keep() -> usize {
    2
}

fn d_simclr_t() -> f64 {
    0.1
}

fn d_byol_m() -> f64 {
    0.996
}

/// One row of the pretraining setup table: learning rate, optimizer and
/// weight-decay range per framework and backbone family.
pub fn reference_setup(framework: Framework, backbone: BackboneKind) -> (f64, OptimizerKind, f64, f64) {
    let hybrid = backbone == BackboneKind::Vitaev2;
    match framework {
        Framework::Simsiam => (if hybrid { 0.0125 } else { 0.025 }, OptimizerKind::Sgd, 1e-4, 1e-4),
        Framework::Simclr => (if hybrid { 0.075 } else { 0.15 }, OptimizerKind::Lars, 1e-5, 1e-5),
        Framework::Byol => (if hybrid { 0.05 } else { 0.1 }, OptimizerKind::Lars, 1e-5, 1e-5),
        Framework::AdaptedDino if hybrid => (0.000125, OptimizerKind::Adam, 1e-7, 1e-6),
        Framework::AdaptedDino => (0.00025, OptimizerKind::Adam, 1e-6, 1e-5),
    }
}

impl PretrainConfig {
    /// Full-scale setup for a framework and backbone: 100 epochs, batch
    /// 64, 224×224 views, full-size heads.
    pub fn full(framework: Framework, backbone: BackboneConfig) -> Self {
        let (lr, opt, wd0, wd1) = reference_setup(framework, backbone.kind);
        let size = backbone.image_size;
        PretrainConfig {
            framework,
            seed: 0,
            epochs: 100,
            batch_size: 64,
            base_lr: lr,
            wd_start: wd0,
            wd_end: wd1,
            warmup_epochs: 0,
            lr_policy: PostWarmup::Constant,
            keep_checkpoints: 2,
            backbone,
            optimizer: OptimizerConfig::new(opt),
            head: HeadConfig::full(),
            dino: DinoConfig::default(),
            simclr_temperature: d_simclr_t(),
            byol_momentum: d_byol_m(),
            augment: AugmentConfig::new(size),
        }
    }

    /// Desk-scale adapted-DINO setup on 32×32 grayscale inputs.
    pub fn toy() -> Self {
        let backbone = BackboneConfig::vitaev2_tiny();
        PretrainConfig {
            framework: Framework::AdaptedDino,
            seed: 0,
            epochs: 5,
            batch_size: 20,
            base_lr: 1e-3,
            wd_start: 1e-7,
            wd_end: 1e-6,
            warmup_epochs: 0,
            lr_policy: PostWarmup::Constant,
            keep_checkpoints: 2,
            augment: AugmentConfig::new(backbone.image_size),
            backbone,
            optimizer: OptimizerConfig::new(OptimizerKind::Adam),
            head: HeadConfig::toy(),
            dino: DinoConfig {
                teacher_momentum: 0.99,
                ..DinoConfig::default()
            },
            simclr_temperature: d_simclr_t(),
            byol_momentum: 0.99,
        }
    }

    pub fn ssl_config(&self) -> SslConfig {
        SslConfig {
            framework: self.framework,
            head: self.head.clone(),
            dino: self.dino.clone(),
            simclr_temperature: self.simclr_temperature,
            byol_momentum: self.byol_momentum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || (self.framework.needs_negatives() && self.batch_size < 2) {
            return bad(format!("batch_size {} too small for {}", self.batch_size, self.framework.display_name()));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.wd_start >= 0.0 && self.wd_start <= self.wd_end && self.wd_end.is_finite()) {
            return bad(format!("need 0 <= wd_start <= wd_end, got {} and {}", self.wd_start, self.wd_end));
        }
        if self.warmup_epochs >= self.epochs && self.warmup_epochs > 0 {
            return bad("warmup_epochs must be below epochs".into());
        }
        if self.keep_checkpoints == 0 {
            return bad("keep_checkpoints must be at least 1".into());
        }
        if self.augment.out_size != self.backbone.image_size {
            return bad(format!(
                "augment.out_size {} differs from backbone.image_size {}",
                self.augment.out_size, self.backbone.image_size
            ));
        }
        self.backbone.validate()?;
        self.optimizer.validate()?;
        self.augment.validate()?;
        self.ssl_config().validate()
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearEvalConfig {
    #[serde(default = "d_eval_epochs")]
    pub epochs: usize,
    #[serde(default = "d_eval_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "d_eval_momentum")]
    pub momentum: f64,
    #[serde(default = "d_eval_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr_grid")]
    pub lr_grid: Vec<f64>,
    #[serde(default = "d_wd_grid")]
    pub wd_grid: Vec<f64>,
    /// Side length images are resized to before the center crop.
    #[serde(default = "d_resize")]
    pub resize: usize,
    /// Fractions used when the manifest carries no split column.
    #[serde(default = "d_frac")]
    pub test_frac: f64,
    #[serde(default = "d_frac")]
    pub val_frac: f64,
    /// Standardize features with training-split statistics.
    #[serde(default = "d_true")]
    pub standardize: bool,
}

fn d_eval_epochs() -> usize {
    50
}
fn d_eval_warmup() -> usize {
    10
}
fn d_eval_momentum() -> f64 {
    0.9
}
fn d_eval_batch() -> usize {
    256
}
fn d_lr_grid() -> Vec<f64> {
    vec![1e-2, 1e-3, 1e-4]
}
fn d_wd_grid() -> Vec<f64> {
    vec![1e-3, 1e-4, 1e-5]
}
fn d_resize() -> usize {
    256
}
fn d_frac() -> f64 {
    0.2
}
fn d_true() -> bool {
    true
}

impl Default for LinearEvalConfig {
    fn default() -> Self {
        LinearEvalConfig::full(BackboneKind::Vitaev2)
    }
}

impl LinearEvalConfig {
    /// Linear-probe protocol; batch 256 for the hybrid backbone, 512 otherwise.
    pub fn full(kind: BackboneKind) -> Self {
        LinearEvalConfig {
            epochs: d_eval_epochs(),
            warmup_epochs: d_eval_warmup(),
            momentum: d_eval_momentum(),
            batch_size: if kind == BackboneKind::Vitaev2 { 256 } else { 512 },
            lr_grid: d_lr_grid(),
            wd_grid: d_wd_grid(),
            resize: d_resize(),
            test_frac: d_frac(),
            val_frac: d_frac(),
            standardize: true,
        }
    }

    pub fn toy() -> Self {
        LinearEvalConfig {
            batch_size: 32,
            resize: 32,
            lr_grid: vec![1e-1, 1e-2, 1e-3],
            ..Self::full(BackboneKind::Vitaev2)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::Config("linear eval needs warmup_epochs < epochs".into()));
        }
        if self.lr_grid.is_empty() || self.wd_grid.is_empty() {
            return Err(Error::Config("lr_grid and wd_grid must be non-empty".into()));
        }
        if self.lr_grid.iter().chain(&self.wd_grid).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("grid values must be finite and non-negative".into()));
        }
        if self.batch_size == 0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("linear eval needs batch_size > 0 and momentum in [0, 1)".into()));
        }
        Ok(())
    }

    fn hparams(&self, lr: f64, wd: f64, seed: u64) -> ProbeHparams {
        ProbeHparams {
            lr,
            weight_decay: wd,
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            momentum: self.momentum,
            batch_size: self.batch_size,
            seed,
        }
    }
}

// ---------------------------------------------------------------------------
// Pretraining

/// One line of the diagnostics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: u64,
    pub step: u64,
    /// `None` when the step produced non-finite values and was skipped.
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_entropy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_marginal_entropy: Option<f64>,
    pub lr: f64,
    pub wd: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub diagnostics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    pub exec: Exec,
    pub resume: Option<PathBuf>,
    /// Stop after this many completed epochs (used to simulate interruption).
    pub stop_after_epoch: Option<usize>,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub model: SslModel,
    pub state: SslState,
    pub records: Vec<StepRecord>,
    pub final_checkpoint: PathBuf,
    pub diagnostics: PathBuf,
}

pub const DIAGNOSTICS_FILE: &str = "diagnostics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
const MAX_BAD_STEPS: usize = 3;

/// Steps per epoch: full batches only, at least one.
pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    (n / batch).max(1)
}

/// Batch order of an epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000_0001);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Pretrain on the images listed in an unlabeled manifest.
pub fn pretrain_manifest(
    cfg: &PretrainConfig,
    manifest: &DatasetManifest,
    run_dir: &Path,
    opts: &PretrainOptions,
) -> Result<PretrainOutcome> {
    if manifest.is_empty() {
        return Err(Error::Empty("pretraining manifest".into()));
    }
    let all: Vec<usize> = (0..manifest.len()).collect();
    let images = load_records(opts.exec, manifest, &all, cfg.backbone.in_channels)?;
    pretrain(cfg, &images, run_dir, opts)
}

/// Run `epochs × steps_per_epoch` training steps over two-view batches,
/// writing `diagnostics.jsonl`, a checkpoint per epoch (the most recent
/// `keep_checkpoints` are kept) and `final.ckpt` into `run_dir`.
pub fn pretrain(
    cfg: &PretrainConfig,
    images: &[Image],
    run_dir: &Path,
    opts: &PretrainOptions,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Empty("pretraining images".into()));
    }
    if images.iter().any(|im| im.channels != cfg.backbone.in_channels) {
        return Err(Error::Data(format!(
            "pretraining images must have {} channels",
            cfg.backbone.in_channels
        )));
    }
    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let diag_path = run_dir.join(DIAGNOSTICS_FILE);

    let (model, mut state, mut opt, start_epoch, mut records) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let (saved, model, state, opt) = restore_pretrain(&ck)?;
            if saved != *cfg {
                return Err(Error::Config(format!(
                    "checkpoint {} was produced by a different configuration",
                    path.display()
                )));
            }
            let epoch = ck.meta.epoch;
            let kept = read_diagnostics(&diag_path)
                .unwrap_or_default()
                .into_iter()
                .filter(|r| r.epoch < epoch)
                .collect();
            (model, state, opt, epoch as usize, kept)
        }
        None => {
            let (model, state) = SslModel::build(&cfg.backbone, &cfg.ssl_config(), cfg.seed)?;
            let opt = Optimizer::new(cfg.optimizer.clone(), &state.student);
            (model, state, opt, 0, Vec::new())
        }
    };
    let mut diag = std::fs::File::create(&diag_path).map_err(|e| Error::io(&diag_path, e))?;
    for r in &records {
        writeln!(diag, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&diag_path, e))?;
    }

    let n = images.len();
    let batch = cfg.batch_size.min(n);
    let per_epoch = steps_per_epoch(n, batch);
    let total = (cfg.epochs * per_epoch) as u64;
    let sched = LrSchedule {
        base_lr: cfg.base_lr,
        warmup_steps: (cfg.warmup_epochs * per_epoch) as u64,
        policy: cfg.lr_policy,
    };
    let end_epoch = opts.stop_after_epoch.map_or(cfg.epochs, |e| e.min(cfg.epochs));
    let mut bad = 0usize;

    for epoch in start_epoch..end_epoch {
        let order = epoch_order(n, cfg.seed, epoch as u64);
        for b in 0..per_epoch {
            let step = (epoch * per_epoch + b) as u64;
            let idx = &order[b * batch..(b + 1) * batch];
            let ims: Vec<&Image> = idx.iter().map(|&i| &images[i]).collect();
            let ids: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
            let pairs = view_pairs_for_batch(opts.exec, &ims, &ids, cfg.seed, epoch as u64, &cfg.augment)?;
            let v1 = Image::batch(&pairs.iter().map(|p| p.view1.clone()).collect::<Vec<_>>())?;
            let v2 = Image::batch(&pairs.iter().map(|p| p.view2.clone()).collect::<Vec<_>>())?;
            let lr = lr_schedule(step, total, &sched);
            let wd = wd_schedule(step, total, cfg.wd_start, cfg.wd_end);
            let mut rec = StepRecord {
                epoch: epoch as u64,
                step,
                loss: None,
                teacher_entropy: None,
                teacher_marginal_entropy: None,
                lr,
                wd,
                diagnostics: BTreeMap::new(),
            };
            match model.train_step(&mut state, &mut opt, &v1, &v2, lr, wd) {
                Ok(out) => {
                    bad = 0;
                    rec.loss = Some(out.loss);
                    rec.teacher_entropy = out.teacher_entropy;
                    rec.teacher_marginal_entropy = out.teacher_marginal_entropy;
                    rec.diagnostics = out.diagnostics;
                }
                Err(Error::NonFinite(what)) => {
                    bad += 1;
                    if bad >= MAX_BAD_STEPS {
                        return Err(Error::NonFinite(format!(
                            "{bad} consecutive non-finite steps, last at step {step}: {what}"
                        )));
                    }
                }
                Err(e) => return Err(e),
            }
            writeln!(diag, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&diag_path, e))?;
            records.push(rec);
        }
        let ck = make_checkpoint(cfg, &model, &state, &opt, epoch as u64 + 1)?;
        ck.save(&ckpt_dir.join(format!("epoch_{:04}.ckpt", epoch + 1)))?;
        prune_checkpoints(&ckpt_dir, cfg.keep_checkpoints)?;
    }
    diag.flush().map_err(|e| Error::io(&diag_path, e))?;
    let final_checkpoint = run_dir.join(FINAL_CHECKPOINT);
    make_checkpoint(cfg, &model, &state, &opt, end_epoch.max(start_epoch) as u64)?.save(&final_checkpoint)?;
    Ok(PretrainOutcome {
        model,
        state,
        records,
        final_checkpoint,
        diagnostics: diag_path,
    })
}

pub fn read_diagnostics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn prune_checkpoints(dir: &Path, keep: usize) -> Result<()> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("epoch_") && n.ends_with(".ckpt"))
        })
        .collect();
    found.sort();
    let excess = found.len().saturating_sub(keep);
    for p in &found[..excess] {
        std::fs::remove_file(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

/// Full training state as a checkpoint: student, teacher, center,
/// optimizer moments and the config echo.
pub fn make_checkpoint(
    cfg: &PretrainConfig,
    model: &SslModel,
    state: &SslState,
    opt: &Optimizer,
    epoch: u64,
) -> Result<Checkpoint> {
    let _ = model;
    let mut tensors = BTreeMap::new();
    for (name, t) in state.student.iter() {
        tensors.insert(format!("student.{name}"), t.clone());
    }
    if let Some(teacher) = &state.teacher {
        for (name, t) in teacher.iter() {
            tensors.insert(format!("teacher.{name}"), t.clone());
        }
    }
    if let Some(c) = &state.center {
        tensors.insert("center".to_string(), c.clone());
    }
    for (name, t) in opt.state_tensors(&state.student) {
        tensors.insert(format!("optim.{name}"), t);
    }
    Ok(Checkpoint {
        meta: CheckpointMeta {
            format_version: FORMAT_VERSION,
            step: state.step,
            epoch,
            optimizer_step: opt.step,
            config: cfg.echo(),
        },
        tensors,
    })
}

fn load_store(store: &mut ParamStore, entries: &BTreeMap<String, Tensor>, what: &str) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "{what}: checkpoint has {} tensors, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in entries {
        store
            .set(name, t.clone())
            .map_err(|e| Error::Checkpoint(format!("{what}.{name}: {e}")))?;
    }
    Ok(())
}

/// Rebuild configuration, model, state and optimizer from a checkpoint.
pub fn restore_pretrain(ck: &Checkpoint) -> Result<(PretrainConfig, SslModel, SslState, Optimizer)> {
    let cfg: PretrainConfig = serde_json::from_value(ck.meta.config.clone())
        .map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
    cfg.validate()?;
    let (model, mut state) = SslModel::build(&cfg.backbone, &cfg.ssl_config(), cfg.seed)?;
    load_store(&mut state.student, &ck.group("student"), "student")?;
    if let Some(t) = state.teacher.as_mut() {
        load_store(t, &ck.group("teacher"), "teacher")?;
    }
    if let Some(c) = state.center.as_mut() {
        let v = ck
            .tensors
            .get("center")
            .ok_or_else(|| Error::Checkpoint("missing center".into()))?;
        if v.shape() != c.shape() {
            return Err(Error::Checkpoint("center has wrong shape".into()));
        }
        *c = v.clone();
    }
    state.step = ck.meta.step;
    let optim = ck.group("optim");
    let opt = Optimizer::from_state(cfg.optimizer.clone(), &state.student, ck.meta.optimizer_step, |k| {
        optim.get(k).cloned()
    })?;
    Ok((cfg, model, state, opt))
}

// ---------------------------------------------------------------------------
// Linear evaluation

/// Frozen encoder: architecture plus backbone parameters.
#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    pub cfg: BackboneConfig,
    pub backbone: Backbone,
    pub params: ParamStore,
}

impl FrozenEncoder {
    /// Backbone of a pretraining checkpoint (teacher when present).
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (cfg, model, state, _) = restore_pretrain(ck)?;
        Ok(FrozenEncoder {
            params: model.backbone_params(&state),
            cfg: cfg.backbone,
            backbone: model.backbone,
        })
    }

    /// Freshly initialized backbone with the same layout.
    pub fn random(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        let (model, state) = SslModel::build(cfg, &SslConfig::new(Framework::Simclr), seed)?;
        Ok(FrozenEncoder {
            params: model.backbone_params(&state),
            cfg: cfg.clone(),
            backbone: model.backbone,
        })
    }

    /// Embeddings of preprocessed images, computed in chunks of 64.
    pub fn embed(&self, images: &[Image]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::Empty("images to embed".into()));
        }
        let rows = images
            .chunks(64)
            .map(|c| forward_backbone(&self.backbone, &self.cfg, &self.params, &Image::batch(c)?))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = rows.iter().collect();
        Tensor::concat_rows(&refs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lr: f64,
    pub weight_decay: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub best: usize,
    pub tie_break: String,
}

impl GridResult {
    pub fn best_cell(&self) -> &GridCell {
        &self.cells[self.best]
    }
}

pub const TIE_BREAK: &str = "highest score; ties go to the higher lr, then the lower weight decay";

/// Evaluate every `(lr, wd)` cell and pick the best per [`TIE_BREAK`].
pub fn grid_search<F>(lr_grid: &[f64], wd_grid: &[f64], mut eval: F) -> Result<GridResult>
where
    F: FnMut(f64, f64) -> Result<f64>,
{
    if lr_grid.is_empty() || wd_grid.is_empty() {
        return Err(Error::Config("grid search needs non-empty grids".into()));
    }
    let mut cells = Vec::with_capacity(lr_grid.len() * wd_grid.len());
    for &lr in lr_grid {
        for &wd in wd_grid {
            let score = eval(lr, wd)?;
            cells.push(GridCell {
                lr,
                weight_decay: wd,
                score,
            });
        }
    }
    let better = |a: &GridCell, b: &GridCell| {
        a.score > b.score
            || (a.score == b.score && (a.lr > b.lr || (a.lr == b.lr && a.weight_decay < b.weight_decay)))
    };
    let mut best = 0;
    for i in 1..cells.len() {
        if better(&cells[i], &cells[best]) {
            best = i;
        }
    }
    Ok(GridResult {
        cells,
        best,
        tie_break: TIE_BREAK.to_string(),
    })
}

/// Labeled features split into train, validation and test rows.
#[derive(Clone, Debug)]
pub struct ProbeSplit {
    pub train: (Tensor, Vec<usize>),
    pub val: (Tensor, Vec<usize>),
    pub test: (Tensor, Vec<usize>),
}

/// Grid search on validation accuracy, then test metrics of the selected
/// probe.
pub fn probe_eval(
    split: &ProbeSplit,
    classes: usize,
    class_names: &[String],
    cfg: &LinearEvalConfig,
    seed: u64,
) -> Result<(MetricsReport, GridResult)> {
    cfg.validate()?;
    let (mut xtr, ytr) = (split.train.0.clone(), &split.train.1);
    let (mut xva, yva) = (split.val.0.clone(), &split.val.1);
    let (mut xte, yte) = (split.test.0.clone(), &split.test.1);
    if ytr.is_empty() || yva.is_empty() || yte.is_empty() {
        return Err(Error::Empty("train, val and test splits must all be non-empty".into()));
    }
    if cfg.standardize {
        let s = Standardizer::fit(&xtr)?;
        xtr = s.apply(&xtr);
        xva = s.apply(&xva);
        xte = s.apply(&xte);
    }
    let mut probes = BTreeMap::new();
    let mut cell = 0usize;
    let grid = grid_search(&cfg.lr_grid, &cfg.wd_grid, |lr, wd| {
        let p = LinearProbe::fit(&xtr, ytr, classes, &cfg.hparams(lr, wd, seed))?;
        let acc = crate::eval::accuracy(&PredictionSet::new(p.logits(&xva), yva.clone())?)?;
        probes.insert(cell, p);
        cell += 1;
        Ok(acc)
    })?;
    let probe = &probes[&grid.best];
    let report = evaluate(&PredictionSet::new(probe.logits(&xte), yte.clone())?, class_names)?;
    Ok((report, grid))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearEvalOutcome {
    pub report: MetricsReport,
    /// One grid per fold (a single entry without cross-validation).
    pub grids: Vec<GridResult>,
    pub backbone_hash: String,
}

fn labeled_rows(x: &Tensor, labels: &[usize], idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    Ok((x.index_rows(idx)?, idx.iter().map(|&i| labels[i]).collect()))
}

/// Stratified, seeded train/validation partition of `rest`.
fn train_val(rest: &[usize], labels: &[usize], classes: usize, val_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut g: Vec<usize> = rest.iter().copied().filter(|&i| labels[i] == c).collect();
        g.shuffle(&mut rng);
        let nv = ((g.len() as f64 * val_frac).round() as usize).clamp(usize::from(g.len() > 1), g.len().saturating_sub(1));
        va.extend_from_slice(&g[..nv]);
        tr.extend_from_slice(&g[nv..]);
    }
    tr.sort_unstable();
    va.sort_unstable();
    (tr, va)
}

/// Linear probe on a frozen encoder over a labeled manifest. With
/// `folds = Some(k)` a stratified k-fold protocol is run (each fold is the
/// test set once; validation is carved from the remaining folds) and the
/// report aggregates the folds. Otherwise the manifest's split column is
/// used, or a stratified holdout when every record is unsplit.
pub fn linear_eval(
    encoder: &FrozenEncoder,
    manifest: &DatasetManifest,
    cfg: &LinearEvalConfig,
    folds: Option<usize>,
    seed: u64,
    exec: Exec,
) -> Result<LinearEvalOutcome> {
    cfg.validate()?;
    let classes = manifest.num_classes();
    if classes < 2 {
        return Err(Error::Data("linear evaluation needs at least two classes".into()));
    }
    let all: Vec<usize> = (0..manifest.len()).collect();
    let labels = manifest.labels(&all)?;
    let pre = PreprocessConfig {
        resize: cfg.resize,
        crop: encoder.cfg.image_size,
        channels: encoder.cfg.in_channels,
    };
    let raw = load_records(exec, manifest, &all, encoder.cfg.in_channels)?;
    let images = raw.iter().map(|im| preprocess_eval(im, &pre)).collect::<Result<Vec<_>>>()?;

    let hash_before = encoder.params.content_hash();
    let features = encoder.embed(&images)?;
    let rows = |idx: &[usize]| labeled_rows(&features, &labels, idx);

    let (report, grids) = match folds {
        Some(k) => {
            let assignment = split_kfold(manifest, k, seed)?;
            let mut reports = Vec::with_capacity(k);
            let mut grids = Vec::with_capacity(k);
            for (f, test) in assignment.folds().iter().enumerate() {
                let rest: Vec<usize> = all.iter().copied().filter(|&i| assignment.fold_of[i] != f).collect();
                let (tr, va) = train_val(&rest, &labels, classes, cfg.val_frac, seed.wrapping_add(f as u64));
                let split = ProbeSplit {
                    train: rows(&tr)?,
                    val: rows(&va)?,
                    test: rows(test)?,
                };
                let (r, g) = probe_eval(&split, classes, &manifest.class_names, cfg, seed)?;
                reports.push(r);
                grids.push(g);
            }
            (aggregate(reports)?, grids)
        }
        None => {
            let m = if manifest.records.iter().all(|r| r.split == Split::Unsplit) {
                split_holdout(manifest, cfg.test_frac, cfg.val_frac, seed)?
            } else {
                manifest.clone()
            };
            let split = ProbeSplit {
                train: rows(&m.indices(Split::Train))?,
                val: rows(&m.indices(Split::Val))?,
                test: rows(&m.indices(Split::Test))?,
            };
            let (r, g) = probe_eval(&split, classes, &manifest.class_names, cfg, seed)?;
            (r, vec![g])
        }
    };
    let hash_after = encoder.params.content_hash();
    if hash_after != hash_before {
        return Err(Error::Data("backbone parameters changed during linear evaluation".into()));
    }
    Ok(LinearEvalOutcome {
        report,
        grids,
        backbone_hash: hash_after,
    })
}
