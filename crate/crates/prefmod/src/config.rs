//! Experiment configuration: every hyperparameter in one serializable tree,
//! a content fingerprint over it, and dotted-key overrides for the CLI.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fileio::fnv1a64;
use crate::synth::DatasetConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Invalid(String),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("override key '{0}' does not exist")]
    UnknownKey(String),
    #[error("override value for '{key}' is invalid: {detail}")]
    BadValue { key: String, detail: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

// ── Backbone ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Transformer block count (block index j ranges over this).
    pub blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_mod: usize,
    pub d_pool: usize,
    pub patch_size: usize,
    pub ff_hidden: usize,
    pub image_side: usize,
    pub channels: usize,
    /// Ablation flag: also modulate image tokens with the mean text delta.
    pub modulate_image_tokens: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            blocks: 4,
            d_model: 64,
            heads: 4,
            d_mod: 64,
            d_pool: 32,
            patch_size: 4,
            ff_hidden: 128,
            image_side: 16,
            channels: 3,
            modulate_image_tokens: false,
        }
    }
}

impl BackboneConfig {
    pub fn n_image_tokens(&self) -> usize {
        (self.image_side / self.patch_size) * (self.image_side / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![self.channels, self.image_side, self.image_side]
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.heads != 0 {
            return Err(ConfigError::Invalid(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.image_side % self.patch_size != 0 {
            return Err(ConfigError::Invalid(format!(
                "image side {} not divisible by patch size {}",
                self.image_side, self.patch_size
            )));
        }
        if self.blocks == 0 || self.d_pool < 2 {
            return Err(ConfigError::Invalid(
                "blocks and d_pool must be positive".into(),
            ));
        }
        Ok(())
    }
}

// ── Adapters ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Rows of each user embedding matrix.
    pub user_rows: usize,
    /// Columns of each user embedding matrix.
    pub d_user: usize,
    /// Standard deviation for user embedding initialization.
    pub embedding_init_std: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            user_rows: 8,
            d_user: 64,
            embedding_init_std: 0.02,
        }
    }
}

// ── Losses ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaReduction {
    /// Concatenate all per-token (and per-block) outputs into one vector.
    Flatten,
    /// Mean over tokens first (ablation-runner alternative).
    TokenMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_shared: f64,
    pub lambda_distinct: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_shared: 0.1,
            lambda_distinct: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_shared < 0.0 || self.lambda_distinct < 0.0 {
            return Err(ConfigError::Invalid(
                "loss weights must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub delta_reduction: DeltaReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            delta_reduction: DeltaReduction::Flatten,
        }
    }
}

// ── Training stages ──────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    LinearCombination,
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: u8,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Pull user embeddings back toward their initialization at rate
    /// `learning_rate * embedding_decay` per step. The dispersion term's
    /// payoff grows without bound in embedding separation; this leash
    /// bounds it without touching the adapters' flow learning.
    #[serde(default)]
    pub embedding_decay: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Stage 2 only: how the new user embedding is fit.
    pub mode: Option<FitMode>,
    /// Stage 1 only: probability of replacing a sample's user conditioning
    /// with the unconditional path.
    pub cond_dropout: Option<f64>,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(ConfigError::Invalid(format!(
                "stage {}: steps and batch_size must be positive",
                self.stage
            )));
        }
        if (self.stage == 2) != self.mode.is_some() {
            return Err(ConfigError::Invalid(format!(
                "stage {}: fit mode must be present exactly when stage is 2",
                self.stage
            )));
        }
        if self.stage != 1 && self.cond_dropout.is_some() {
            return Err(ConfigError::Invalid(format!(
                "stage {}: cond_dropout only applies to stage 1",
                self.stage
            )));
        }
        if let Some(p) = self.cond_dropout {
            if !(0.0..=1.0).contains(&p) {
                return Err(ConfigError::Invalid("cond_dropout must be in [0, 1]".into()));
            }
        }
        self.loss_weights.validate()
    }
}

// ── Sampling ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationScheme {
    /// Explicit Euler on the reverse-time ODE.
    Euler,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
    pub scheme: IntegrationScheme,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            seed: 0,
            scheme: IntegrationScheme::Euler,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(ConfigError::Invalid("sampler steps must be >= 1".into()));
        }
        Ok(())
    }
}

// ── Evaluation ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Per-cell sampling seeds for the evaluation grid.
    pub n_seeds: usize,
    pub master_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_seeds: 3,
            master_seed: 0x9e1f,
        }
    }
}

// ── Ablation variants ────────────────────────────────────────────────

/// Which single mechanism, if any, is disabled for this run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Zero the block-shared modulation direction at train and test.
    NoShared,
    /// Zero the block-distinct modulation directions at train and test.
    NoDistinct,
    /// Train with both dispersion weights at zero.
    NoDispersion,
    /// Feed the adapters the empty prompt instead of the user's text.
    NoPpm,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoShared,
        Variant::NoDistinct,
        Variant::NoDispersion,
        Variant::NoPpm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoShared => "no_shared",
            Variant::NoDistinct => "no_distinct",
            Variant::NoDispersion => "no_dispersion",
            Variant::NoPpm => "no_ppm",
        }
    }

    pub fn parse(name: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == name)
    }
}

// ── Experiment umbrella ──────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Ablation switch; `full` for the complete mechanism.
    pub variant: Variant,
    pub data: DatasetConfig,
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub loss: LossConfig,
    pub stage0: StageConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            variant: Variant::Full,
            data: DatasetConfig::default(),
            backbone: BackboneConfig::default(),
            adapter: AdapterConfig::default(),
            loss: LossConfig::default(),
            stage0: StageConfig {
                stage: 0,
                steps: 1500,
                batch_size: 16,
                learning_rate: 3e-3,
                embedding_decay: 0.0,
                loss_weights: LossWeights {
                    lambda_shared: 0.0,
                    lambda_distinct: 0.0,
                },
                seed: 10,
                mode: None,
                cond_dropout: None,
            },
            stage1: StageConfig {
                stage: 1,
                steps: 1000,
                batch_size: 16,
                learning_rate: 2e-3,
                embedding_decay: 0.0,
                loss_weights: LossWeights::default(),
                seed: 11,
                mode: None,
                cond_dropout: Some(0.1),
            },
            stage2: StageConfig {
                stage: 2,
                steps: 300,
                batch_size: 2,
                learning_rate: 2e-2,
                embedding_decay: 0.0,
                loss_weights: LossWeights {
                    lambda_shared: 0.0,
                    lambda_distinct: 0.0,
                },
                seed: 12,
                mode: Some(FitMode::LinearCombination),
                cond_dropout: None,
            },
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.stage0.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.sampler.validate()?;
        if self.backbone.image_side != self.data.image_side {
            return Err(ConfigError::Invalid(format!(
                "backbone image side {} does not match dataset image side {}",
                self.backbone.image_side, self.data.image_side
            )));
        }
        if self.stage0.stage != 0 || self.stage1.stage != 1 || self.stage2.stage != 2 {
            return Err(ConfigError::Invalid("stage ids out of place".into()));
        }
        Ok(())
    }

    /// Stable content hash over the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Apply `key=value` overrides with dotted paths into the JSON tree
    /// (e.g. `stage1.steps=200`). Unknown keys are rejected.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        for (key, value) in overrides {
            apply_override(&mut tree, key, value)?;
        }
        let config: ExperimentConfig =
            serde_json::from_value(tree).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Field paths where `self` and `other` differ.
    pub fn diff_keys(&self, other: &ExperimentConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let mut out = Vec::new();
        diff_values("", &a, &b, &mut out);
        out
    }
}

fn apply_override(tree: &mut serde_json::Value, key: &str, value: &str) -> Result<()> {
    let mut cursor = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cursor
            .as_object_mut()
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        let entry = map
            .get_mut(*part)
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        if i + 1 == parts.len() {
            let parsed: serde_json::Value = serde_json::from_str(value)
                .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
            if std::mem::discriminant(&parsed) != std::mem::discriminant(entry)
                && !(entry.is_number() && parsed.is_number())
                && !entry.is_null()
                && !parsed.is_null()
            {
                return Err(ConfigError::BadValue {
                    key: key.to_string(),
                    detail: format!("expected a value like {entry}, got {value}"),
                });
            }
            *entry = parsed;
            return Ok(());
        }
        cursor = entry;
    }
    Err(ConfigError::UnknownKey(key.to_string()))
}

fn diff_values(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(ma), serde_json::Value::Object(mb)) => {
            for (k, va) in ma {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                match mb.get(k) {
                    Some(vb) => diff_values(&path, va, vb, out),
                    None => out.push(path),
                }
            }
        }
        _ if a != b => out.push(prefix.to_string()),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_fingerprint_stable() {
        let config = ExperimentConfig::default();
        config.validate().unwrap();
        assert_eq!(config.fingerprint(), config.fingerprint());
        let mut other = config.clone();
        other.stage1.steps += 1;
        assert_ne!(config.fingerprint(), other.fingerprint());
    }

    #[test]
    fn overrides_apply_and_reject_unknown_keys() {
        let config = ExperimentConfig::default();
        let out = config
            .with_overrides(&[
                ("stage1.steps".into(), "123".into()),
                ("loss.weights.lambda_shared".into(), "0.25".into()),
            ])
            .unwrap();
        assert_eq!(out.stage1.steps, 123);
        assert_eq!(out.loss.weights.lambda_shared, 0.25);
        assert!(matches!(
            config.with_overrides(&[("stage1.bogus".into(), "1".into())]),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn json_round_trip_preserves_config() {
        let config = ExperimentConfig::default();
        let text = config.to_json_pretty();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn diff_keys_pinpoints_single_change() {
        let a = ExperimentConfig::default();
        let b = a
            .with_overrides(&[("loss.weights.lambda_distinct".into(), "0".into())])
            .unwrap();
        assert_eq!(
            a.diff_keys(&b),
            vec!["loss.weights.lambda_distinct".to_string()]
        );
    }

    #[test]
    fn stage_invariants_enforced() {
        let mut config = ExperimentConfig::default();
        config.stage1.mode = Some(FitMode::Direct);
        assert!(config.validate().is_err());
        let mut config = ExperimentConfig::default();
        config.stage2.mode = None;
        assert!(config.validate().is_err());
        let mut config = ExperimentConfig::default();
        config.stage0.steps = 0;
        assert!(config.validate().is_err());
    }
}
