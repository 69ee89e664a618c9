//! Full-scale presets and schedule boundaries checked against literal values.

use vitae_ssl::backbone::{BackboneConfig, BackboneKind};
use vitae_ssl::config::{self, preset, ExperimentConfig};
use vitae_ssl::optim::OptimizerKind;
use vitae_ssl::schedule::{lr_schedule, wd_schedule, LrSchedule, PostWarmup};
use vitae_ssl::ssl::Framework;
use vitae_ssl::train::{reference_setup, PretrainConfig};

/// Every pretraining setup row: framework, backbone, lr, optimizer, wd range.
pub const SETUP_ROWS: [(Framework, BackboneKind, f64, OptimizerKind, f64, f64); 12] = [
    (Framework::Simsiam, BackboneKind::Resnet50, 0.025, OptimizerKind::Sgd, 1e-4, 1e-4),
    (Framework::Simsiam, BackboneKind::Vit, 0.025, OptimizerKind::Sgd, 1e-4, 1e-4),
    (Framework::Simsiam, BackboneKind::Vitaev2, 0.0125, OptimizerKind::Sgd, 1e-4, 1e-4),
    (Framework::Simclr, BackboneKind::Resnet50, 0.15, OptimizerKind::Lars, 1e-5, 1e-5),
    (Framework::Simclr, BackboneKind::Vit, 0.15, OptimizerKind::Lars, 1e-5, 1e-5),
    (Framework::Simclr, BackboneKind::Vitaev2, 0.075, OptimizerKind::Lars, 1e-5, 1e-5),
    (Framework::Byol, BackboneKind::Resnet50, 0.1, OptimizerKind::Lars, 1e-5, 1e-5),
    (Framework::Byol, BackboneKind::Vit, 0.1, OptimizerKind::Lars, 1e-5, 1e-5),
    (Framework::Byol, BackboneKind::Vitaev2, 0.05, OptimizerKind::Lars, 1e-5, 1e-5),
    (Framework::AdaptedDino, BackboneKind::Resnet50, 0.00025, OptimizerKind::Adam, 1e-6, 1e-5),
    (Framework::AdaptedDino, BackboneKind::Vit, 0.00025, OptimizerKind::Adam, 1e-6, 1e-5),
    (Framework::AdaptedDino, BackboneKind::Vitaev2, 0.000125, OptimizerKind::Adam, 1e-7, 1e-6),
];

/// Names of the checks that failed; empty when everything holds.
pub fn protocol_failures() -> Vec<String> {
    let mut bad = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            bad.push(name.to_string());
        }
    };

    let cfg = ExperimentConfig::full();
    let text = cfg.to_toml();
    let back = config::parse(&text, std::path::Path::new(".")).ok();
    check("full preset TOML round trip", back.as_ref() == Some(&cfg));
    let from_preset = config::from_table(&preset("full").unwrap()).ok();
    check("named preset equals constructor", from_preset.as_ref() == Some(&cfg));
    let p = &cfg.pretrain;
    check("framework", p.framework == Framework::AdaptedDino);
    check("backbone", p.backbone.kind == BackboneKind::Vitaev2);
    check("optimizer", p.optimizer.kind == OptimizerKind::Adam);
    check("base lr", p.base_lr == 0.000125);
    check("wd range", (p.wd_start, p.wd_end) == (1e-7, 1e-6));
    check("pretrain batch", p.batch_size == 64);
    check("pretrain epochs", p.epochs == 100);
    let e = &cfg.linear_eval;
    check("eval epochs", e.epochs == 50);
    check("eval warmup", e.warmup_epochs == 10);
    check("eval momentum", e.momentum == 0.9);
    check("eval batch", e.batch_size == 256);
    check("eval lr grid", e.lr_grid == [1e-2, 1e-3, 1e-4]);
    check("eval wd grid", e.wd_grid == [1e-3, 1e-4, 1e-5]);
    check("eval grid cells", e.lr_grid.len() * e.wd_grid.len() == 9);
    check("eval resize", e.resize == 256 && p.backbone.image_size == 224);
    for name in ["full-vit", "full-resnet"] {
        let c = config::from_table(&preset(name).unwrap()).unwrap();
        check(&format!("{name} eval batch"), c.linear_eval.batch_size == 512);
    }

    for (fw, kind, lr, opt, w0, w1) in SETUP_ROWS {
        let got = reference_setup(fw, kind);
        check(&format!("setup row {fw:?}/{kind:?}"), got == (lr, opt, w0, w1));
        let backbone = match kind {
            BackboneKind::Vitaev2 => BackboneConfig::vitaev2_reference(),
            BackboneKind::Vit => BackboneConfig::vit_small_16(),
            BackboneKind::Resnet50 => BackboneConfig::resnet50(),
        };
        let c = PretrainConfig::full(fw, backbone);
        check(
            &format!("full config {fw:?}/{kind:?}"),
            c.base_lr == lr && c.optimizer.kind == opt && c.wd_start == w0 && c.wd_end == w1,
        );
    }

    // Schedules at their boundaries: linear warmup over 10 of 50 epochs.
    let per_epoch = 7u64;
    let total = 50 * per_epoch;
    let warm = LrSchedule { base_lr: 1e-2, warmup_steps: 10 * per_epoch, policy: PostWarmup::Constant };
    check("lr at step 0", lr_schedule(0, total, &warm) == 0.0);
    check("lr at end of warmup", lr_schedule(10 * per_epoch, total, &warm) == 1e-2);
    check("lr after warmup", lr_schedule(total - 1, total, &warm) == 1e-2);
    check("lr mid warmup", lr_schedule(5 * per_epoch, total, &warm) == 5e-3);
    let cos = LrSchedule { policy: PostWarmup::Cosine, ..warm };
    check("cosine at warmup end", lr_schedule(10 * per_epoch, total, &cos) == 1e-2);
    check("cosine at total", lr_schedule(total, total, &cos) == 0.0);
    check("wd at first step", wd_schedule(0, 100, 1e-7, 1e-6) == 1e-7);
    check("wd at last step", wd_schedule(99, 100, 1e-7, 1e-6) == 1e-6);
    check("wd past the end", wd_schedule(150, 100, 1e-7, 1e-6) == 1e-6);
    bad
}
