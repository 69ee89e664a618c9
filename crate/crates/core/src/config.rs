//! Experiment configuration documents.
//!
//! A config is a TOML document whose top level holds the pretraining keys
//! (`framework`, `seed`, `epochs`, `batch_size`, `base_lr`, `wd_start`,
//! `wd_end`, `warmup_epochs`, `lr_policy`, `keep_checkpoints`,
//! `simclr_temperature`, `byol_momentum`) plus the tables `[backbone]`,
//! `[optimizer]`, `[head]`, `[dino]`, `[augment]`, `[data]`,
//! `[linear_eval]` and optionally `[ablate]`.
//!
//! `include = ["preset:toy", "base.toml"]` merges the listed documents in
//! order before the including file's own keys; paths are relative to the
//! including file. `backbone = "<preset>"` expands to a named backbone
//! table. Overrides use dotted keys (`backbone.embed_dim=64`) with TOML
//! values; a value that does not parse as TOML is taken as a string.
//! Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::backbone::{BackboneConfig, BackboneKind};
use crate::error::{Error, Result};
use crate::ssl::Framework;
use crate::train::{LinearEvalConfig, PretrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_manifest: Option<PathBuf>,
}

/// Framework × backbone matrix for ablation sweeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub frameworks: Vec<Framework>,
    /// Backbone preset names.
    pub backbones: Vec<String>,
    /// Take each cell's learning rate, optimizer and weight decay from the
    /// pretraining setup table instead of the base config.
    #[serde(default)]
    pub reference_setups: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub linear_eval: LinearEvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablate: Option<AblateConfig>,
}

impl ExperimentConfig {
    pub fn toy() -> Self {
        ExperimentConfig {
            pretrain: PretrainConfig::toy(),
            data: DataConfig::default(),
            linear_eval: LinearEvalConfig::toy(),
            ablate: None,
        }
    }

    /// Adapted DINO over the reference hybrid backbone at full scale.
    pub fn full() -> Self {
        Self::full_for(Framework::AdaptedDino, BackboneConfig::vitaev2_reference())
    }

    pub fn full_for(framework: Framework, backbone: BackboneConfig) -> Self {
        let kind = backbone.kind;
        ExperimentConfig {
            pretrain: PretrainConfig::full(framework, backbone),
            data: DataConfig::default(),
            linear_eval: LinearEvalConfig::full(kind),
            ablate: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.linear_eval.validate()?;
        if let Some(a) = &self.ablate {
            if a.frameworks.is_empty() || a.backbones.is_empty() {
                return Err(Error::Config("ablate needs at least one framework and one backbone".into()));
            }
            for b in &a.backbones {
                backbone_preset(b)?;
            }
        }
        Ok(())
    }

    pub fn to_table(&self) -> Table {
        match Value::try_from(self).expect("config serializes to TOML") {
            Value::Table(t) => t,
            _ => unreachable!("a struct serializes to a table"),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_table()).expect("table serializes")
    }
}

pub const PRESETS: [&str; 4] = ["toy", "full", "full-vit", "full-resnet"];

/// Built-in preset documents.
pub fn preset(name: &str) -> Result<Table> {
    let cfg = match name {
        "toy" => ExperimentConfig::toy(),
        "full" => ExperimentConfig::full(),
        "full-vit" => ExperimentConfig::full_for(Framework::AdaptedDino, BackboneConfig::vit_small_16()),
        "full-resnet" => ExperimentConfig::full_for(Framework::AdaptedDino, BackboneConfig::resnet50()),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(cfg.to_table())
}

/// Named backbone configuration.
pub fn backbone_preset(name: &str) -> Result<BackboneConfig> {
    BackboneConfig::preset(name).ok_or_else(|| {
        Error::Config(format!(
            "unknown backbone preset {name:?}; expected one of {}",
            BACKBONE_PRESETS.join(", ")
        ))
    })
}

pub const BACKBONE_PRESETS: [&str; 6] = ["vitaev2-reference", "vitaev2-tiny", "vit-s16", "vit-tiny", "resnet50", "resnet-tiny"];

fn backbone_table(name: &str) -> Result<Value> {
    Value::try_from(backbone_preset(name)?).map_err(|e| Error::Serde(e.to_string()))
}

/// Deep merge: tables merge key by key, anything else is replaced.
pub fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn expand_backbone(t: &mut Table) -> Result<()> {
    if let Some(Value::String(name)) = t.get("backbone") {
        let v = backbone_table(name)?;
        t.insert("backbone".into(), v);
    }
    Ok(())
}

fn resolve_paths(t: &mut Table, dir: &Path) {
    if let Some(Value::Table(data)) = t.get_mut("data") {
        for (_, v) in data.iter_mut() {
            if let Some(p) = v.as_str().map(Path::new).filter(|p| p.is_relative()) {
                *v = Value::String(dir.join(p).to_string_lossy().into_owned());
            }
        }
    }
}

fn parse_error(path: &Path, text: &str, e: toml::de::Error) -> Error {
    let line = e
        .span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0);
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.message().to_string(),
    }
}

/// Read a document and resolve its includes into one table.
pub fn load_table(path: &Path) -> Result<Table> {
    load_table_inner(path, &mut Vec::new())
}

fn load_table_inner(path: &Path, stack: &mut Vec<PathBuf>) -> Result<Table> {
    let canon = path.canonicalize().map_err(|e| Error::io(path, e))?;
    if stack.contains(&canon) {
        return Err(Error::Config(format!("include cycle through {}", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let own: Table = toml::from_str(&text).map_err(|e| parse_error(path, &text, e))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    stack.push(canon);
    let t = resolve_document(own, &dir, stack);
    stack.pop();
    t
}

fn resolve_document(mut own: Table, dir: &Path, stack: &mut Vec<PathBuf>) -> Result<Table> {
    let includes = match own.remove("include") {
        None => Vec::new(),
        Some(Value::String(s)) => vec![s],
        Some(Value::Array(a)) => a
            .into_iter()
            .map(|v| match v {
                Value::String(s) => Ok(s),
                other => Err(Error::Config(format!("include entries must be strings, got {other}"))),
            })
            .collect::<Result<_>>()?,
        Some(other) => return Err(Error::Config(format!("include must be a string or list, got {other}"))),
    };
    let mut table = Table::new();
    for inc in includes {
        let t = match inc.strip_prefix("preset:") {
            Some(name) => preset(name)?,
            None => load_table_inner(&dir.join(&inc), stack)?,
        };
        merge(&mut table, t);
        expand_backbone(&mut table)?;
    }
    resolve_paths(&mut own, dir);
    expand_backbone(&mut own)?;
    merge(&mut table, own);
    Ok(table)
}

/// Apply one `dotted.key=value` override.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override {assignment:?} has an empty key")));
    }
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = table;
    for (i, p) in parts[..parts.len() - 1].iter().enumerate() {
        if i == 0 && *p == "backbone" {
            expand_backbone(node)?;
        }
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override {key}: {p} is not a table"))),
        };
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    if parts.len() == 1 {
        expand_backbone(node)?;
    }
    Ok(())
}

fn unknown_keys(input: &Table, known: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in input {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (_, None) => out.push(path),
            (Value::Table(a), Some(Value::Table(b))) => unknown_keys(a, b, &path, out),
            _ => {}
        }
    }
}

/// Deserialize, reject unknown keys and validate.
pub fn from_table(table: &Table) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = Value::Table(table.clone())
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    let mut unknown = Vec::new();
    unknown_keys(table, &cfg.to_table(), "", &mut unknown);
    if !unknown.is_empty() {
        return Err(Error::Config(format!("unknown configuration keys: {}", unknown.join(", "))));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Load a config file, apply overrides in order, then validate.
pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut t = load_table(path)?;
    for o in overrides {
        apply_override(&mut t, o)?;
    }
    from_table(&t)
}

/// Parse a document from text; includes resolve against `dir`.
pub fn parse(text: &str, dir: &Path) -> Result<ExperimentConfig> {
    let origin = dir.join("<inline>");
    let own: Table = toml::from_str(text).map_err(|e| parse_error(&origin, text, e))?;
    from_table(&resolve_document(own, dir, &mut Vec::new())?)
}

/// Display label of a backbone preset (`ViTAEv2`, `ViT-S/16`, ...).
pub fn backbone_label(kind: BackboneKind) -> &'static str {
    kind.display_name()
}
