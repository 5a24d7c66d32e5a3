//! Run configuration: TOML with nested sections, documented defaults, and
//! fail-fast rejection of unknown keys. `--override key.path=value` edits
//! the parsed document before deserialization, so overrides face the same
//! validation as the file itself.

use std::path::Path;

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};

use adaptune_core::augment::{AugPolicy, AugmentPlan};
use adaptune_core::control::{
    LossKind, OptimizerKind, ScheduleKind, SlowStudentObjective, TrainLoopConfig, TrainSetup,
};
use adaptune_core::data::{load_csv, load_idx, parse_synthetic_uri, LabeledDataset};
use adaptune_core::losses::{am_scale, AmSoftmaxParams};
use adaptune_core::models::ModelSpec;
use adaptune_core::search::LrBounds;

pub const SCHEMA_VERSION: u32 = 1;

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_true() -> bool {
    true
}

fn default_momentum() -> f64 {
    0.9
}

fn default_rho() -> f64 {
    0.05
}

fn default_weight_decay() -> f64 {
    5e-4
}

fn default_max_epochs() -> usize {
    200
}

fn default_warmup_epochs() -> usize {
    5
}

fn default_patience() -> usize {
    5
}

fn default_decay_factor() -> f64 {
    0.1
}

fn default_min_lr_ratio() -> f64 {
    1e-3
}

fn default_forced_decay_fraction() -> f64 {
    0.75
}

fn default_rel_threshold() -> f64 {
    1e-4
}

fn default_batch_size() -> usize {
    32
}

fn default_severity() -> u8 {
    3
}

fn default_chains() -> usize {
    3
}

fn default_depth_min() -> usize {
    1
}

fn default_depth_max() -> usize {
    3
}

fn default_alpha() -> f64 {
    1.0
}

fn default_lr_low() -> f64 {
    0.005
}

fn default_lr_high() -> f64 {
    0.03
}

fn default_lr_step() -> f64 {
    0.001
}

fn default_grid_points() -> usize {
    10
}

fn default_grid_epochs() -> usize {
    9
}

fn default_tpe_trials() -> usize {
    15
}

fn default_tpe_epochs() -> usize {
    6
}

fn default_range_iterations() -> usize {
    100
}

fn default_am_margin() -> f64 {
    0.35
}

fn default_loss_kind() -> String {
    "ce".to_string()
}

fn default_optimizer_kind() -> String {
    "sgd".to_string()
}

fn default_schedule_kind() -> String {
    "plateau_v2".to_string()
}

fn default_lr_source() -> String {
    "fixed".to_string()
}

fn default_lr_value() -> f64 {
    0.013
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub lr: LrConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// `synthetic:<kind>?...`, `csv:<path>`, or `idx:<images>,<labels>`.
    pub uri: String,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `softmax_regression`, `mlp`, or `tiny_cnn`.
    pub kind: String,
    /// MLP hidden width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    /// TinyCnn filter count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filters: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// `ce`, `am_softmax`, or `dml_pair`.
    #[serde(default = "default_loss_kind")]
    pub kind: String,
    /// 0 picks the documented default: `max(sqrt(2)*ln(C-1), 3)` for
    /// `am_softmax`, 1 for the DML slow student.
    #[serde(default)]
    pub am_scale: f64,
    /// Additive margin; the `dml_pair` slow student forces 0.
    #[serde(default = "default_am_margin")]
    pub am_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { kind: default_loss_kind(), am_scale: 0.0, am_margin: default_am_margin() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    /// `sgd` or `sam`.
    #[serde(default = "default_optimizer_kind")]
    pub kind: String,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// No-bias-decay grouping with the 2x bias learning rate.
    #[serde(default = "default_true")]
    pub nbd: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: default_optimizer_kind(),
            rho: default_rho(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            nbd: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// `plateau_v2` or `cosine`.
    #[serde(default = "default_schedule_kind")]
    pub kind: String,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_warmup_epochs")]
    pub warmup_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    /// `min_lr = initial_lr * min_lr_ratio`.
    #[serde(default = "default_min_lr_ratio")]
    pub min_lr_ratio: f64,
    #[serde(default = "default_forced_decay_fraction")]
    pub forced_decay_fraction: f64,
    #[serde(default = "default_rel_threshold")]
    pub train_improve_rel_threshold: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: default_schedule_kind(),
            max_epochs: default_max_epochs(),
            warmup_epochs: default_warmup_epochs(),
            patience: default_patience(),
            decay_factor: default_decay_factor(),
            min_lr_ratio: default_min_lr_ratio(),
            forced_decay_fraction: default_forced_decay_fraction(),
            train_improve_rel_threshold: default_rel_threshold(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrConfig {
    /// `fixed`, `fastai`, `fastai_pretrain`, `grid`, or `tpe`.
    #[serde(default = "default_lr_source")]
    pub source: String,
    /// The fixed learning rate (`source = "fixed"`).
    #[serde(default = "default_lr_value")]
    pub value: f64,
    #[serde(default = "default_lr_low")]
    pub low: f64,
    #[serde(default = "default_lr_high")]
    pub high: f64,
    /// Discretization step for TPE; 0 disables snapping.
    #[serde(default = "default_lr_step")]
    pub step: f64,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_grid_epochs")]
    pub grid_epochs: usize,
    #[serde(default = "default_tpe_trials")]
    pub tpe_trials: usize,
    #[serde(default = "default_tpe_epochs")]
    pub tpe_epochs: usize,
    #[serde(default = "default_range_iterations")]
    pub range_iterations: usize,
}

impl Default for LrConfig {
    fn default() -> Self {
        LrConfig {
            source: default_lr_source(),
            value: default_lr_value(),
            low: default_lr_low(),
            high: default_lr_high(),
            step: default_lr_step(),
            grid_points: default_grid_points(),
            grid_epochs: default_grid_epochs(),
            tpe_trials: default_tpe_trials(),
            tpe_epochs: default_tpe_epochs(),
            range_iterations: default_range_iterations(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Enable AugMix with the policy below.
    #[serde(default)]
    pub augmix: bool,
    #[serde(default = "default_severity")]
    pub severity: u8,
    #[serde(default = "default_chains")]
    pub chains: usize,
    #[serde(default = "default_depth_min")]
    pub depth_min: usize,
    #[serde(default = "default_depth_max")]
    pub depth_max: usize,
    #[serde(default = "default_alpha")]
    pub dirichlet_alpha: f64,
    #[serde(default = "default_alpha")]
    pub beta_alpha: f64,
    /// Beta parameter for MixUp; 0 disables.
    #[serde(default)]
    pub mixup_alpha: f64,
    /// Beta parameter for CutMix; 0 disables.
    #[serde(default)]
    pub cutmix_alpha: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            augmix: false,
            severity: default_severity(),
            chains: default_chains(),
            depth_min: default_depth_min(),
            depth_max: default_depth_max(),
            dirichlet_alpha: default_alpha(),
            beta_alpha: default_alpha(),
            mixup_alpha: 0.0,
            cutmix_alpha: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { batch_size: default_batch_size() }
    }
}

impl RunConfig {
    /// Parses a TOML file, applying `key.path=value` overrides before
    /// deserialization.
    pub fn load(path: &Path, overrides: &[String]) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        RunConfig::parse(&text, overrides)
            .with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str, overrides: &[String]) -> anyhow::Result<RunConfig> {
        let mut doc: toml::Value = toml::from_str(text).context("parsing TOML")?;
        for entry in overrides {
            apply_override(&mut doc, entry)?;
        }
        let config: RunConfig =
            doc.try_into().map_err(|e| anyhow!("invalid config: {e}"))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!("unsupported schema_version {} (expected {SCHEMA_VERSION})", self.schema_version);
        }
        self.model_spec()?;
        self.loss_kind()?;
        self.optimizer_kind()?;
        self.schedule_kind()?;
        self.lr_source()?;
        if !(self.dataset.train_fraction > 0.0 && self.dataset.train_fraction < 1.0) {
            bail!("dataset.train_fraction {} outside (0, 1)", self.dataset.train_fraction);
        }
        Ok(())
    }

    pub fn model_spec(&self) -> anyhow::Result<ModelSpec> {
        match self.model.kind.as_str() {
            "softmax_regression" => Ok(ModelSpec::SoftmaxRegression),
            "mlp" => Ok(ModelSpec::Mlp { hidden: self.model.hidden.unwrap_or(16) }),
            "tiny_cnn" => Ok(ModelSpec::TinyCnn { filters: self.model.filters.unwrap_or(4) }),
            other => bail!("unknown model.kind {other:?} (softmax_regression | mlp | tiny_cnn)"),
        }
    }

    pub fn loss_kind(&self) -> anyhow::Result<LossKind> {
        match self.loss.kind.as_str() {
            "ce" => Ok(LossKind::Ce),
            "am_softmax" => Ok(LossKind::AmSoftmax),
            "dml_pair" => Ok(LossKind::DmlPair),
            other => bail!("unknown loss.kind {other:?} (ce | am_softmax | dml_pair)"),
        }
    }

    pub fn optimizer_kind(&self) -> anyhow::Result<OptimizerKind> {
        match self.optimizer.kind.as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "sam" => Ok(OptimizerKind::Sam { rho: self.optimizer.rho }),
            other => bail!("unknown optimizer.kind {other:?} (sgd | sam)"),
        }
    }

    pub fn schedule_kind(&self) -> anyhow::Result<ScheduleKind> {
        match self.schedule.kind.as_str() {
            "plateau_v2" => Ok(ScheduleKind::PlateauV2),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => bail!("unknown schedule.kind {other:?} (plateau_v2 | cosine)"),
        }
    }

    pub fn lr_source(&self) -> anyhow::Result<LrSource> {
        match self.lr.source.as_str() {
            "fixed" => Ok(LrSource::Fixed),
            "fastai" => Ok(LrSource::Fastai),
            "fastai_pretrain" => Ok(LrSource::FastaiPretrain),
            "grid" => Ok(LrSource::Grid),
            "tpe" => Ok(LrSource::Tpe),
            other => {
                bail!("unknown lr.source {other:?} (fixed | fastai | fastai_pretrain | grid | tpe)")
            }
        }
    }

    pub fn lr_bounds(&self) -> anyhow::Result<LrBounds> {
        Ok(LrBounds::new(self.lr.low, self.lr.high, self.lr.step)?)
    }

    /// AM-Softmax parameters for the given class count. A zero `am_scale`
    /// resolves to the class-count formula for direct AM-Softmax training
    /// and to 1 (with zero margin) for the DML slow student.
    pub fn am_params(&self, class_count: usize) -> anyhow::Result<AmSoftmaxParams> {
        let kind = self.loss_kind()?;
        let (scale, margin) = match kind {
            LossKind::DmlPair => {
                let s = if self.loss.am_scale > 0.0 { self.loss.am_scale } else { 1.0 };
                (s, 0.0)
            }
            _ => {
                let s = if self.loss.am_scale > 0.0 {
                    self.loss.am_scale
                } else {
                    am_scale(class_count)?
                };
                (s, self.loss.am_margin)
            }
        };
        Ok(AmSoftmaxParams::new(scale, margin)?)
    }

    pub fn augment_plan(&self, image_shaped: bool) -> anyhow::Result<AugmentPlan> {
        let augmix = if self.augment.augmix {
            let mut policy =
                if image_shaped { AugPolicy::default_image() } else { AugPolicy::default_vector() };
            policy.severity = self.augment.severity;
            policy.chain_count = self.augment.chains;
            policy.depth_range = (self.augment.depth_min, self.augment.depth_max);
            policy.dirichlet_alpha = self.augment.dirichlet_alpha;
            policy.beta_alpha = self.augment.beta_alpha;
            Some(policy)
        } else {
            None
        };
        let plan = AugmentPlan {
            augmix,
            mixup_alpha: self.augment.mixup_alpha,
            cutmix_alpha: self.augment.cutmix_alpha,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// The full training setup for a resolved initial LR and dataset.
    pub fn train_setup(
        &self,
        initial_lr: f64,
        class_count: usize,
        image_shaped: bool,
    ) -> anyhow::Result<TrainSetup> {
        let config = TrainLoopConfig {
            max_epochs: self.schedule.max_epochs,
            warmup_epochs: self.schedule.warmup_epochs,
            patience: self.schedule.patience,
            decay_factor: self.schedule.decay_factor,
            min_lr: initial_lr * self.schedule.min_lr_ratio,
            forced_decay_fraction: self.schedule.forced_decay_fraction,
            initial_lr,
            batch_size: self.train.batch_size,
            schedule_kind: self.schedule_kind()?,
            loss_kind: self.loss_kind()?,
            train_improve_rel_threshold: self.schedule.train_improve_rel_threshold,
        };
        let setup = TrainSetup {
            config,
            optimizer: self.optimizer_kind()?,
            momentum: self.optimizer.momentum,
            weight_decay: self.optimizer.weight_decay,
            nbd: self.optimizer.nbd,
            am: self.am_params(class_count)?,
            augment: self.augment_plan(image_shaped)?,
            slow_objective: SlowStudentObjective::default(),
        };
        setup.validate()?;
        Ok(setup)
    }

    /// Loads the dataset behind `dataset.uri`.
    pub fn load_dataset(&self) -> anyhow::Result<LabeledDataset> {
        load_dataset_uri(&self.dataset.uri)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSource {
    Fixed,
    Fastai,
    FastaiPretrain,
    Grid,
    Tpe,
}

impl LrSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            LrSource::Fixed => "fixed",
            LrSource::Fastai => "fastai",
            LrSource::FastaiPretrain => "fastai_pretrain",
            LrSource::Grid => "grid",
            LrSource::Tpe => "tpe",
        }
    }
}

/// Resolves `synthetic:`, `csv:`, and `idx:` dataset URIs.
pub fn load_dataset_uri(uri: &str) -> anyhow::Result<LabeledDataset> {
    if uri.starts_with("synthetic:") {
        return Ok(parse_synthetic_uri(uri)?);
    }
    if let Some(path) = uri.strip_prefix("csv:") {
        return Ok(load_csv(Path::new(path))?);
    }
    if let Some(rest) = uri.strip_prefix("idx:") {
        let (images, labels) = rest
            .split_once(',')
            .ok_or_else(|| anyhow!("idx URI needs `idx:<images>,<labels>`, got {uri:?}"))?;
        return Ok(load_idx(Path::new(images), Path::new(labels))?);
    }
    bail!("unsupported dataset URI {uri:?} (synthetic: | csv: | idx:)")
}

/// Applies one `key.path=value` override onto the TOML document. The value
/// parses as TOML (so `true`, `3`, `0.5`, `"text"` all work); bare words
/// fall back to strings.
fn apply_override(doc: &mut toml::Value, entry: &str) -> anyhow::Result<()> {
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| anyhow!("override {entry:?} must be key.path=value"))?;
    let parsed: toml::Value = match toml::from_str::<toml::Value>(&format!("v = {raw}")) {
        Ok(toml::Value::Table(t)) => t.get("v").cloned().unwrap(),
        _ => toml::Value::String(raw.to_string()),
    };
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| anyhow!("override {key:?}: {part:?} is not a table"))?;
        if i == parts.len() - 1 {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    unreachable!("override paths always have at least one segment")
}
