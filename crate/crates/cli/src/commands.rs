use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use vitae_ssl::backbone::count_params;
use vitae_ssl::checkpoint::Checkpoint;
use vitae_ssl::config::{self, backbone_preset, ExperimentConfig};
use vitae_ssl::data::load_manifest;
use vitae_ssl::eval::{render_table, MetricsReport};
use vitae_ssl::kernels::Exec;
use vitae_ssl::optim::OptimizerConfig;
use vitae_ssl::synth::{write_dataset, SynthConfig};
use vitae_ssl::train::{
    self, reference_setup, pretrain_manifest, FrozenEncoder, LinearEvalOutcome, PretrainOptions, StepRecord,
    CHECKPOINT_DIR, DIAGNOSTICS_FILE, FINAL_CHECKPOINT,
};
use vitae_ssl::{Error, Result};

use crate::run::{self, file_digest, now, prepare_dir, read_record, run_id, write_record, write_text, RunRecord};
use crate::ConfigArgs;

const REPORT_JSON: &str = "report.json";
const REPORT_TXT: &str = "report.txt";
const CONFIG_FILE: &str = "config.toml";

pub fn load_config(a: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut table = match &a.config {
        Some(p) => config::load_table(p)?,
        None => config::preset("toy")?,
    };
    for o in &a.overrides {
        config::apply_override(&mut table, o)?;
    }
    if let Some(s) = a.seed {
        config::apply_override(&mut table, &format!("seed={s}"))?;
    }
    config::from_table(&table)
}

fn config_json(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn print_record(r: &RunRecord, cached: bool) -> Result<()> {
    if cached {
        eprintln!("run {} already complete; reusing it (pass --force to recompute)", r.run_id);
    }
    println!("{}", serde_json::to_string_pretty(r)?);
    Ok(())
}

fn latest_epoch_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir.join(CHECKPOINT_DIR))
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    found.sort();
    found.pop()
}

/// Pretraining run; returns the record and its directory.
fn run_pretrain(root: &Path, cfg: &ExperimentConfig, force: bool) -> Result<(RunRecord, PathBuf, bool)> {
    let manifest_path = cfg
        .data
        .pretrain_manifest
        .clone()
        .ok_or_else(|| Error::Config("data.pretrain_manifest is not set".into()))?;
    let manifest = load_manifest(&manifest_path)?;
    let id = run_id(&json!({
        "command": "pretrain",
        "pretrain": cfg.pretrain.echo(),
        "manifest": file_digest(&manifest_path)?,
    }));
    let dir = root.join(format!("pretrain-{id}"));
    if !force {
        if let Some(r) = read_record(&dir) {
            return Ok((r, dir, true));
        }
    }
    prepare_dir(&dir, force)?;
    let started = now();
    write_text(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    let opts = PretrainOptions {
        exec: Exec::default(),
        resume: latest_epoch_checkpoint(&dir),
        stop_after_epoch: None,
    };
    if let Some(p) = &opts.resume {
        eprintln!("resuming from {}", p.display());
    }
    pretrain_manifest(&cfg.pretrain, &manifest, &dir, &opts)?;
    let record = RunRecord {
        run_id: id,
        command: "pretrain".into(),
        config: config_json(cfg),
        started,
        finished: now(),
        artifacts: BTreeMap::from([
            ("checkpoint".into(), PathBuf::from(FINAL_CHECKPOINT)),
            ("checkpoints".into(), PathBuf::from(CHECKPOINT_DIR)),
            ("diagnostics".into(), PathBuf::from(DIAGNOSTICS_FILE)),
            ("config".into(), PathBuf::from(CONFIG_FILE)),
        ]),
    };
    write_record(&dir, &record)?;
    Ok((record, dir, false))
}

pub fn pretrain(root: &Path, a: &ConfigArgs) -> Result<()> {
    let cfg = load_config(a)?;
    let (record, _, cached) = run_pretrain(root, &cfg, a.force)?;
    print_record(&record, cached)
}

enum Source<'a> {
    Checkpoint(&'a Path),
    RandomInit,
}

fn run_linear_eval(
    root: &Path,
    cfg: &ExperimentConfig,
    source: Source<'_>,
    manifest: Option<&Path>,
    folds: Option<usize>,
    force: bool,
) -> Result<(RunRecord, LinearEvalOutcome, bool)> {
    let manifest_path = manifest
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.eval_manifest.clone())
        .ok_or_else(|| Error::Config("no labeled manifest: pass --manifest or set data.eval_manifest".into()))?;
    let m = load_manifest(&manifest_path)?;
    let (encoder, origin) = match source {
        Source::Checkpoint(p) => {
            let digest = file_digest(p)?;
            (FrozenEncoder::from_checkpoint(&Checkpoint::load(p)?)?, json!({ "checkpoint": digest }))
        }
        Source::RandomInit => (
            FrozenEncoder::random(&cfg.pretrain.backbone, cfg.pretrain.seed)?,
            json!({ "random_init": cfg.pretrain.backbone, "seed": cfg.pretrain.seed }),
        ),
    };
    let id = run_id(&json!({
        "command": "linear-eval",
        "linear_eval": cfg.linear_eval,
        "seed": cfg.pretrain.seed,
        "encoder": origin,
        "manifest": file_digest(&manifest_path)?,
        "folds": folds,
    }));
    let dir = root.join(format!("linear-eval-{id}"));
    if !force {
        if let Some(r) = read_record(&dir) {
            if let Ok(text) = std::fs::read_to_string(dir.join(REPORT_JSON)) {
                if let Ok(outcome) = serde_json::from_str(&text) {
                    return Ok((r, outcome, true));
                }
            }
        }
    }
    prepare_dir(&dir, force)?;
    let started = now();
    let outcome = train::linear_eval(&encoder, &m, &cfg.linear_eval, folds, cfg.pretrain.seed, Exec::default())?;
    write_text(&dir.join(REPORT_JSON), &serde_json::to_string_pretty(&outcome)?)?;
    write_text(&dir.join(REPORT_TXT), &outcome.report.render())?;
    write_text(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    let record = RunRecord {
        run_id: id,
        command: "linear-eval".into(),
        config: config_json(cfg),
        started,
        finished: now(),
        artifacts: BTreeMap::from([
            ("report".into(), PathBuf::from(REPORT_JSON)),
            ("table".into(), PathBuf::from(REPORT_TXT)),
            ("config".into(), PathBuf::from(CONFIG_FILE)),
        ]),
    };
    write_record(&dir, &record)?;
    Ok((record, outcome, false))
}

pub fn linear_eval(
    root: &Path,
    a: &ConfigArgs,
    checkpoint: Option<&Path>,
    random_init: bool,
    manifest: Option<&Path>,
    folds: Option<usize>,
) -> Result<()> {
    let cfg = load_config(a)?;
    let source = match (checkpoint, random_init) {
        (Some(p), false) => Source::Checkpoint(p),
        (None, true) => Source::RandomInit,
        _ => return Err(Error::Config("pass exactly one of --checkpoint and --random-init".into())),
    };
    let (record, outcome, cached) = run_linear_eval(root, &cfg, source, manifest, folds, a.force)?;
    print!("{}", outcome.report.render());
    print_record(&record, cached)
}

/// Table label of a backbone preset.
pub fn network_label(preset: &str) -> String {
    match preset {
        "vitaev2-reference" => "ViTAEv2".into(),
        "vit-s16" => "ViT-S/16".into(),
        "resnet50" => "ResNet-50".into(),
        "vitaev2-tiny" => "ViTAEv2 (tiny)".into(),
        "vit-tiny" => "ViT (tiny)".into(),
        "resnet-tiny" => "ResNet (tiny)".into(),
        other => other.into(),
    }
}

#[derive(Serialize)]
struct AblationRow {
    network: String,
    framework: String,
    params: usize,
    pretrain_run: Option<String>,
    eval_run: Option<String>,
    report: Option<MetricsReport>,
    error: Option<serde_json::Value>,
}

fn cell_config(base: &ExperimentConfig, framework: vitae_ssl::ssl::Framework, backbone: &str, reference: bool) -> Result<ExperimentConfig> {
    let mut c = base.clone();
    c.ablate = None;
    let b = backbone_preset(backbone)?;
    c.pretrain.framework = framework;
    c.pretrain.augment.out_size = b.image_size;
    if reference {
        let (lr, opt, wd0, wd1) = reference_setup(framework, b.kind);
        c.pretrain.base_lr = lr;
        c.pretrain.optimizer = OptimizerConfig::new(opt);
        c.pretrain.wd_start = wd0;
        c.pretrain.wd_end = wd1;
    }
    c.pretrain.backbone = b;
    c.validate()?;
    Ok(c)
}

pub fn ablate(root: &Path, a: &ConfigArgs, dry_run: bool) -> Result<()> {
    let cfg = load_config(a)?;
    let matrix = cfg
        .ablate
        .clone()
        .ok_or_else(|| Error::Config("the config has no [ablate] table".into()))?;
    let id = run_id(&json!({ "command": "ablate", "config": config_json(&cfg), "dry_run": dry_run }));
    let dir = root.join(format!("ablate-{id}"));
    prepare_dir(&dir, false)?;
    let started = now();
    let mut rows = Vec::new();
    for &fw in &matrix.frameworks {
        for bb in &matrix.backbones {
            let mut row = AblationRow {
                network: network_label(bb),
                framework: fw.display_name().into(),
                params: count_params(&backbone_preset(bb)?)?,
                pretrain_run: None,
                eval_run: None,
                report: None,
                error: None,
            };
            if !dry_run {
                let result = cell_config(&cfg, fw, bb, matrix.reference_setups).and_then(|c| {
                    let (pr, pdir, _) = run_pretrain(root, &c, a.force)?;
                    row.pretrain_run = Some(pr.run_id.clone());
                    let ck = pdir.join(FINAL_CHECKPOINT);
                    let (er, outcome, _) = run_linear_eval(root, &c, Source::Checkpoint(&ck), None, None, a.force)?;
                    row.eval_run = Some(er.run_id);
                    Ok(outcome.report)
                });
                match result {
                    Ok(r) => row.report = Some(r),
                    Err(e) => {
                        eprintln!("cell {} / {} failed: {e}", row.network, row.framework);
                        row.error = Some(json!({ "error": e.kind(), "message": e.to_string() }));
                    }
                }
            }
            rows.push(row);
        }
    }
    let table_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let (acc, auc, f1) = match (&r.report, &r.error) {
                (Some(m), _) => (m.accuracy.percent(), m.auc.fraction(), m.f1.fraction()),
                (None, Some(_)) => ("failed".into(), "-".into(), "-".into()),
                (None, None) => ("-".into(), "-".into(), "-".into()),
            };
            vec![
                r.network.clone(),
                r.framework.clone(),
                format!("{:.2}M", r.params as f64 / 1e6),
                acc,
                auc,
                f1,
            ]
        })
        .collect();
    let table = render_table(&["Network", "Framework", "Params", "ACC", "AUC", "F1"], &table_rows);
    write_text(&dir.join("summary.txt"), &table)?;
    write_text(&dir.join("summary.json"), &serde_json::to_string_pretty(&rows)?)?;
    let record = RunRecord {
        run_id: id,
        command: "ablate".into(),
        config: config_json(&cfg),
        started,
        finished: now(),
        artifacts: BTreeMap::from([
            ("summary".into(), PathBuf::from("summary.txt")),
            ("rows".into(), PathBuf::from("summary.json")),
        ]),
    };
    write_record(&dir, &record)?;
    print!("{table}");
    Ok(())
}

fn expand_runs(dirs: &[PathBuf]) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for d in dirs {
        if d.join(run::RECORD_FILE).exists() || d.join(DIAGNOSTICS_FILE).exists() || d.join(REPORT_JSON).exists() {
            out.push(d.clone());
            continue;
        }
        let mut subs: Vec<PathBuf> = std::fs::read_dir(d)
            .map(|it| {
                it.filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.join(run::RECORD_FILE).exists())
                    .collect()
            })
            .unwrap_or_default();
        subs.sort();
        if subs.is_empty() {
            out.push(d.clone());
        } else {
            out.extend(subs);
        }
    }
    out
}

pub fn report(root: &Path, dirs: &[PathBuf]) -> Result<()> {
    let runs = expand_runs(dirs);
    let names: Vec<String> = runs.iter().map(|d| d.display().to_string()).collect();
    let dir = root.join(format!("report-{}", run_id(&json!({ "command": "report", "runs": names }))));
    prepare_dir(&dir, false)?;
    let mut notes = Vec::new();
    let mut curves = Vec::new();
    let mut rows = Vec::new();
    let mut reports = BTreeMap::new();
    for d in &runs {
        let name = d.file_name().map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned());
        let mut found = false;
        let diag = d.join(DIAGNOSTICS_FILE);
        if diag.exists() {
            found = true;
            let records: Vec<StepRecord> = train::read_diagnostics(&diag)?;
            let mut tsv = String::from("step\tloss\tteacher_entropy\n");
            for r in &records {
                let f = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| x.to_string());
                tsv.push_str(&format!("{}\t{}\t{}\n", r.step, f(r.loss), f(r.teacher_entropy)));
            }
            let file = format!("{name}.loss.tsv");
            write_text(&dir.join(&file), &tsv)?;
            curves.push(json!({ "run": name, "points": records.len(), "file": file }));
        } else if d.join(FINAL_CHECKPOINT).exists() {
            notes.push(format!("{name}: diagnostics missing"));
        }
        if let Ok(text) = std::fs::read_to_string(d.join(REPORT_JSON)) {
            found = true;
            let outcome: LinearEvalOutcome = serde_json::from_str(&text)?;
            let mut row = vec![name.clone()];
            row.extend(outcome.report.table_row());
            rows.push(row);
            reports.insert(name.clone(), outcome.report);
        }
        if !found {
            notes.push(format!("{name}: no diagnostics or metrics found"));
        }
    }
    let mut text = String::new();
    if !rows.is_empty() {
        let mut header = vec!["Run"];
        header.extend(MetricsReport::TABLE_HEADER);
        text.push_str(&render_table(&header, &rows));
    }
    for c in &curves {
        text.push_str(&format!("loss curve: {} ({} points) -> {}\n", c["run"].as_str().unwrap_or(""), c["points"], c["file"].as_str().unwrap_or("")));
    }
    for n in &notes {
        eprintln!("warning: {n}");
        text.push_str(&format!("warning: {n}\n"));
    }
    if runs.is_empty() || (rows.is_empty() && curves.is_empty()) {
        eprintln!("warning: nothing to report");
    }
    write_text(&dir.join(REPORT_TXT), &text)?;
    write_text(
        &dir.join(REPORT_JSON),
        &serde_json::to_string_pretty(&json!({ "curves": curves, "metrics": reports, "notes": notes }))?,
    )?;
    print!("{text}");
    println!("report written to {}", dir.display());
    Ok(())
}

pub fn synth(root: &Path, out: Option<PathBuf>, n: usize, size: usize, seed: u64, unlabeled: bool) -> Result<()> {
    let out = out.unwrap_or_else(|| root.join("data").join(format!("synth-{size}-{n}-{seed}")));
    let cfg = SynthConfig::new(size, seed);
    write_dataset(&out, &cfg, n, !unlabeled)?;
    println!("{}", out.join("manifest.txt").display());
    Ok(())
}
