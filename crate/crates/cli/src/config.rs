//! Experiment configuration: TOML parsing with located errors, seed
//! override and the resolved echo written next to every run.

use std::path::{Path, PathBuf};

use perada_core::data::{CorruptionKind, PartitionScheme, ShiftKind, SEVERITY_LEVELS};
use perada_core::fl_runtime::{RoundConfig, Variant};
use perada_core::model::NetSpec;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "PERADA_SEED";
pub const RESOLVED_FILE: &str = "config.resolved.toml";

#[derive(Debug, thiserror::Error)]
#[error("{}{key}: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
pub struct ConfigError {
    /// Dotted key path, e.g. `training.clients_per_round`.
    pub key: String,
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(src: Option<&str>, key: &str, message: impl Into<String>) -> Self {
        Self {
            key: key.to_string(),
            line: src.and_then(|s| locate_key(s, key)),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Gaussian mixture with `model.num_classes` classes in `model.input_dim` dimensions.
    Generator,
    /// IDX image/label files.
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolChoice {
    /// Same distribution as the clients (fresh generator draws or held-out rows).
    InDomain,
    /// The pretraining source distribution.
    SourceDomain,
}

impl PoolChoice {
    pub fn name(self) -> &'static str {
        match self {
            PoolChoice::InDomain => "in_domain",
            PoolChoice::SourceDomain => "source_domain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub class_sep: f64,
    pub samples_per_client: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    pub partition: PartitionScheme,
    pub alpha: f64,
    pub min_per_client: usize,
    pub shift_kind: ShiftKind,
    pub shift_magnitude: f64,
    pub pool_source: PoolChoice,
    pub pool_size: usize,
    /// Share of the pool used for distillation (leading rows).
    pub pool_fraction: f64,
    pub ood_kinds: Vec<CorruptionKind>,
    pub ood_severities: Vec<u8>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Generator,
            class_sep: 3.0,
            samples_per_client: 100,
            images: None,
            labels: None,
            partition: PartitionScheme::DirichletLabel,
            alpha: 0.1,
            min_per_client: 10,
            shift_kind: ShiftKind::Rotation,
            shift_magnitude: 0.5,
            pool_source: PoolChoice::InDomain,
            pool_size: 500,
            pool_fraction: 1.0,
            ood_kinds: Vec::new(),
            ood_severities: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    /// Centralized training on a shifted source task.
    Source,
    /// Keep the random initialization.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainBlock {
    pub mode: PretrainMode,
    /// Mean shift of the source mixture relative to the client mixture.
    pub source_shift: f64,
    pub source_samples: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Load this backbone snapshot instead of pretraining.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone: Option<PathBuf>,
}

impl Default for PretrainBlock {
    fn default() -> Self {
        Self {
            mode: PretrainMode::Source,
            source_shift: 0.5,
            source_samples: 4000,
            steps: 1500,
            lr: 3e-3,
            batch_size: 64,
            backbone: None,
        }
    }
}

/// Grids crossed with each other and with every variant. Empty means "not
/// ablated".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub lambda: Vec<f64>,
    pub server_steps: Vec<usize>,
    pub pool_fraction: Vec<f64>,
    pub pool_source: Vec<PoolChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Variants to run; empty runs `training.variant` alone.
    pub variants: Vec<Variant>,
    /// Evaluate every this many rounds; 0 evaluates only after the last round.
    pub eval_every: usize,
    pub dataset: DatasetConfig,
    pub model: NetSpec,
    pub pretrain: PretrainBlock,
    pub training: RoundConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            variants: Vec::new(),
            eval_every: 0,
            dataset: DatasetConfig::default(),
            model: NetSpec::default(),
            pretrain: PretrainBlock::default(),
            training: RoundConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn variants(&self) -> Vec<Variant> {
        if self.variants.is_empty() {
            vec![self.training.variant]
        } else {
            self.variants.clone()
        }
    }

    /// Propagates the global seed into the per-stage blocks.
    pub fn resolve(mut self) -> Self {
        self.training.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_in(None)
    }

    fn validate_in(&self, src: Option<&str>) -> Result<(), ConfigError> {
        let err = |key: &str, msg: String| Err(ConfigError::at(src, key, msg));
        let t = &self.training;
        if t.clients_per_round == 0 || t.clients_per_round > t.num_clients {
            return err(
                "training.clients_per_round",
                format!(
                    "constraint 1 <= clients_per_round <= num_clients violated ({} vs {})",
                    t.clients_per_round, t.num_clients
                ),
            );
        }
        if let Err(e) = t.validate() {
            return err("training", e.to_string());
        }
        if let Err(e) = self.model.validate() {
            return err("model", e.to_string());
        }
        let d = &self.dataset;
        if d.partition == PartitionScheme::DirichletLabel && !(d.alpha > 0.0 && d.alpha.is_finite()) {
            return err("dataset.alpha", format!("must be > 0, got {}", d.alpha));
        }
        if d.samples_per_client == 0 {
            return err("dataset.samples_per_client", "must be >= 1".into());
        }
        if d.pool_size == 0 {
            return err("dataset.pool_size", "must be >= 1".into());
        }
        for (key, fractions) in [
            ("dataset.pool_fraction", std::slice::from_ref(&d.pool_fraction)),
            ("ablation.pool_fraction", &self.ablation.pool_fraction[..]),
        ] {
            if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
                return err(key, format!("must lie in (0, 1], got {f}"));
            }
        }
        if let Some(s) = d.ood_severities.iter().find(|s| !(1..=SEVERITY_LEVELS).contains(*s)) {
            return err("dataset.ood_severities", format!("severity {s} outside 1..={SEVERITY_LEVELS}"));
        }
        if d.source == DataSource::Idx && (d.images.is_none() || d.labels.is_none()) {
            return err("dataset.images", "idx source needs both `images` and `labels`".into());
        }
        if let Some(l) = self.ablation.lambda.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return err("ablation.lambda", format!("must be >= 0, got {l}"));
        }
        if self.pretrain.mode == PretrainMode::Source && self.pretrain.backbone.is_none() {
            if self.pretrain.steps > 0 && self.pretrain.batch_size == 0 {
                return err("pretrain.batch_size", "must be >= 1".into());
            }
            if self.pretrain.source_samples == 0 {
                return err("pretrain.source_samples", "must be >= 1".into());
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn write_resolved(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_FILE);
        std::fs::write(&path, self.to_toml())?;
        Ok(path)
    }
}

/// Parses and validates a config. Errors carry the dotted key path and the
/// 1-based line when the key appears in the source.
pub fn parse_str(src: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = toml::from_str(src).map_err(|e| {
        let offset = e.span().map(|s| s.start);
        ConfigError {
            key: offset.map(|o| key_path_at(src, o)).unwrap_or_default(),
            line: offset.map(|o| src[..o.min(src.len())].matches('\n').count() + 1),
            message: e.message().trim().to_string(),
        }
    })?;
    cfg.validate_in(Some(src))?;
    Ok(cfg.resolve())
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let src = std::fs::read_to_string(path).map_err(|e| ConfigError {
        key: String::new(),
        line: None,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    parse_str(&src)
}

/// Applies `PERADA_SEED` when set.
pub fn apply_seed_override(cfg: ExperimentConfig, value: Option<&str>) -> Result<ExperimentConfig, ConfigError> {
    match value {
        None => Ok(cfg),
        Some(v) => {
            let seed = v.trim().parse::<u64>().map_err(|e| ConfigError {
                key: SEED_ENV.to_string(),
                line: None,
                message: format!("`{v}` is not a seed: {e}"),
            })?;
            Ok(ExperimentConfig { seed, ..cfg }.resolve())
        }
    }
}

fn table_header(line: &str) -> Option<&str> {
    let t = line.trim();
    let inner = t.strip_prefix("[[").and_then(|r| r.strip_suffix("]]"));
    let inner = inner.or_else(|| t.strip_prefix('[').and_then(|r| r.split(']').next()));
    inner.map(str::trim)
}

fn line_key(line: &str) -> Option<&str> {
    let t = line.trim();
    if t.starts_with('#') || t.starts_with('[') {
        return None;
    }
    t.split_once('=').map(|(k, _)| k.trim().trim_matches('"'))
}

fn join(table: &str, key: &str) -> String {
    if table.is_empty() {
        key.to_string()
    } else {
        format!("{table}.{key}")
    }
}

/// Dotted key path of whatever sits on the line containing `offset`.
fn key_path_at(src: &str, offset: usize) -> String {
    let mut table = "";
    let mut start = 0;
    for line in src.split_inclusive('\n') {
        let end = start + line.len();
        if let Some(h) = table_header(line) {
            if offset < end {
                return h.to_string();
            }
            table = h;
        } else if offset < end {
            return line_key(line).map(|k| join(table, k)).unwrap_or_else(|| table.to_string());
        }
        start = end;
    }
    table.to_string()
}

/// 1-based line of `key` (dotted path), or of its table header.
fn locate_key(src: &str, key: &str) -> Option<usize> {
    let mut table = String::new();
    let mut header_line = None;
    for (i, line) in src.lines().enumerate() {
        if let Some(h) = table_header(line) {
            table = h.to_string();
            if table == key {
                header_line = Some(i + 1);
            }
        } else if let Some(k) = line_key(line) {
            if join(&table, k) == key {
                return Some(i + 1);
            }
        }
    }
    header_line
}
