//! Desk-scale pretraining runs on procedural images: teacher entropy over a
//! full run and linear-probe accuracy of pretrained versus random encoders.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use vitae_ssl::checkpoint::Checkpoint;
use vitae_ssl::image::Image;
use vitae_ssl::kernels::Exec;
use vitae_ssl::synth::{generate, write_dataset, SynthConfig};
use vitae_ssl::train::{linear_eval, pretrain, FrozenEncoder, LinearEvalConfig, PretrainConfig, PretrainOptions};

pub const IMAGES: usize = 200;
pub const STEPS: usize = 500;

pub fn config(ablate: bool) -> PretrainConfig {
    let mut cfg = PretrainConfig::toy();
    cfg.epochs = STEPS / (IMAGES / cfg.batch_size);
    cfg.keep_checkpoints = 1;
    if ablate {
        cfg.dino = cfg.dino.without_centering_and_sharpening();
    }
    cfg
}

pub struct EntropyRun {
    pub ln_k: f64,
    pub steps: usize,
    /// Mean teacher-softmax entropy per step.
    pub entropy: Vec<f64>,
    pub checkpoint: PathBuf,
    pub elapsed: Duration,
}

impl EntropyRun {
    pub fn min(&self) -> f64 {
        self.entropy.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn last(&self) -> f64 {
        *self.entropy.last().unwrap()
    }
}

pub fn entropy_run(dir: &Path, ablate: bool) -> EntropyRun {
    let cfg = config(ablate);
    let images: Vec<Image> = generate(Exec::default(), &SynthConfig::new(cfg.backbone.image_size, 1), IMAGES)
        .into_iter()
        .map(|p| p.0)
        .collect();
    let t = Instant::now();
    let out = pretrain(&cfg, &images, dir, &PretrainOptions::default()).unwrap();
    EntropyRun {
        ln_k: (cfg.head.out_dim as f64).ln(),
        steps: out.records.len(),
        entropy: out.records.iter().filter_map(|r| r.teacher_entropy).collect(),
        checkpoint: out.final_checkpoint,
        elapsed: t.elapsed(),
    }
}

pub struct ProbeComparison {
    pub pretrained: f64,
    pub random: f64,
    pub elapsed: Duration,
}

/// Linear-probe test accuracy of the pretrained checkpoint's backbone and of
/// a freshly initialized backbone with the same layout.
pub fn probe_comparison(dir: &Path, checkpoint: &Path) -> ProbeComparison {
    let t = Instant::now();
    let cfg = config(false);
    let labeled = write_dataset(&dir.join("labeled"), &SynthConfig::new(cfg.backbone.image_size, 2), IMAGES, true).unwrap();
    let mut eval = LinearEvalConfig::toy();
    eval.resize = cfg.backbone.image_size;
    let acc = |enc: &FrozenEncoder| linear_eval(enc, &labeled, &eval, None, cfg.seed, Exec::default()).unwrap().report.accuracy.mean;
    let pretrained = FrozenEncoder::from_checkpoint(&Checkpoint::load(checkpoint).unwrap()).unwrap();
    let random = FrozenEncoder::random(&cfg.backbone, cfg.seed).unwrap();
    ProbeComparison {
        pretrained: acc(&pretrained),
        random: acc(&random),
        elapsed: t.elapsed(),
    }
}
