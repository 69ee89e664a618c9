//! A complete toy pretrain + linear-eval run on procedural images.

use std::path::Path;

use vitae_ssl::config::ExperimentConfig;
use vitae_ssl::data::DatasetManifest;
use vitae_ssl::kernels::Exec;
use vitae_ssl::synth::{write_dataset, SynthConfig};
use vitae_ssl::train::{linear_eval, pretrain_manifest, FrozenEncoder, LinearEvalOutcome, PretrainOptions, DIAGNOSTICS_FILE};
use vitae_ssl::checkpoint::Checkpoint;

pub struct Datasets {
    pub pretrain: DatasetManifest,
    pub eval: DatasetManifest,
}

pub fn datasets(root: &Path) -> Datasets {
    Datasets {
        pretrain: write_dataset(&root.join("pre"), &SynthConfig::new(32, 1), 20, false).unwrap(),
        eval: write_dataset(&root.join("eval"), &SynthConfig::new(32, 2), 40, true).unwrap(),
    }
}

/// Two epochs of two steps, then a 2×2 probe grid.
pub fn config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::toy();
    cfg.pretrain.epochs = 2;
    cfg.pretrain.batch_size = 10;
    cfg.linear_eval.epochs = 6;
    cfg.linear_eval.warmup_epochs = 1;
    cfg.linear_eval.lr_grid = vec![0.1, 0.01];
    cfg.linear_eval.wd_grid = vec![1e-4, 1e-5];
    cfg
}

pub struct RunBytes {
    pub diagnostics: Vec<u8>,
    pub report: Vec<u8>,
    pub checkpoint: Vec<u8>,
    pub outcome: LinearEvalOutcome,
}

pub fn run(root: &Path, data: &Datasets, cfg: &ExperimentConfig) -> RunBytes {
    let run_dir = root.join("run");
    let out = pretrain_manifest(&cfg.pretrain, &data.pretrain, &run_dir, &PretrainOptions::default()).unwrap();
    let ck = Checkpoint::load(&out.final_checkpoint).unwrap();
    let encoder = FrozenEncoder::from_checkpoint(&ck).unwrap();
    let outcome = linear_eval(&encoder, &data.eval, &cfg.linear_eval, None, cfg.pretrain.seed, Exec::default()).unwrap();
    RunBytes {
        diagnostics: std::fs::read(run_dir.join(DIAGNOSTICS_FILE)).unwrap(),
        report: serde_json::to_vec_pretty(&outcome.report).unwrap(),
        checkpoint: std::fs::read(&out.final_checkpoint).unwrap(),
        outcome,
    }
}

/// Two independent runs from scratch with the same seed.
pub fn twice() -> (RunBytes, RunBytes) {
    let cfg = config();
    let go = || {
        let dir = tempfile::tempdir().unwrap();
        let data = datasets(dir.path());
        run(dir.path(), &data, &cfg)
    };
    (go(), go())
}
