//! Model and training configuration, read from a TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which profile block a manifest field belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    Up,
    Ca,
}

/// One supporting-information field: its block, name and input width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileField {
    pub kind: ProfileKind,
    pub name: String,
    pub dim: usize,
    /// Probability-distribution fields must sum to 1 (checked on load).
    #[serde(default)]
    pub distribution: bool,
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Replace the slot-to-intent attention with a plain token attention
    /// summary over U.
    NoSlot2intent,
    /// Drop the user-profile columns from P.
    NoUp,
    /// Drop the context-awareness columns from P.
    NoCa,
    /// Drop the profile fusion entirely; U holds the contextual vectors only.
    NoProfile,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no_slot2intent" => Ok(Ablation::NoSlot2intent),
            "no_up" => Ok(Ablation::NoUp),
            "no_ca" => Ok(Ablation::NoCa),
            "no_profile" => Ok(Ablation::NoProfile),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?} (expected none, no_slot2intent, no_up, no_ca, no_profile)"
            ))),
        }
    }
}

fn default_word_dim() -> usize {
    256
}
fn default_lstm_hidden() -> usize {
    64
}
fn default_sa_dim() -> usize {
    128
}
fn default_sa_key_dim() -> usize {
    64
}
fn default_d_p() -> usize {
    128
}
fn default_d_a() -> usize {
    128
}
fn default_d_c() -> usize {
    256
}
fn default_d_y() -> usize {
    128
}
fn default_dropout() -> f64 {
    0.4
}

/// Model dimensions and the profile manifest. Stored in checkpoints so a
/// saved model can be rebuilt without the original config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_word_dim")]
    pub word_dim: usize,
    /// LSTM hidden size per direction.
    #[serde(default = "default_lstm_hidden")]
    pub lstm_hidden: usize,
    /// Self-attention output width.
    #[serde(default = "default_sa_dim")]
    pub sa_dim: usize,
    /// Self-attention query/key width.
    #[serde(default = "default_sa_key_dim")]
    pub sa_key_dim: usize,
    #[serde(default = "default_d_p")]
    pub d_p: usize,
    #[serde(default = "default_d_a")]
    pub d_a: usize,
    #[serde(default = "default_d_c")]
    pub d_c: usize,
    #[serde(default = "default_d_y")]
    pub d_y: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub profile: Vec<ProfileField>,
}

impl ModelConfig {
    /// Contextual width: self-attention output plus both LSTM directions.
    pub fn d_e(&self) -> usize {
        self.sa_dim + 2 * self.lstm_hidden
    }

    /// Encoding width per token under `ablation`.
    pub fn d_u(&self, ablation: Ablation) -> usize {
        match ablation {
            Ablation::NoProfile => self.d_e(),
            _ => self.d_e() + self.d_p
        }
    }

    pub fn up_fields(&self) -> impl Iterator<Item = &ProfileField> {
        self.profile.iter().filter(|f| f.kind == ProfileKind::Up)
    }

    pub fn ca_fields(&self) -> impl Iterator<Item = &ProfileField> {
        self.profile.iter().filter(|f| f.kind == ProfileKind::Ca)
    }

    pub fn validate(&self, ablation: Ablation) -> Result<()> {
        if self.word_dim == 0 || self.lstm_hidden == 0 || self.sa_dim == 0 {
            return Err(Error::Config("encoder dims must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        // Manifest order is UP block then CA block.
        let first_ca = self.profile.iter().position(|f| f.kind == ProfileKind::Ca);
        if let Some(i) = first_ca {
            if self.profile[i..].iter().any(|f| f.kind == ProfileKind::Up) {
                return Err(Error::Config(
                    "profile manifest must list all up fields before ca fields".to_string(),
                ));
            }
        }
        if self.profile.iter().any(|f| f.dim == 0) {
            return Err(Error::Config("profile field dims must be positive".to_string()));
        }
        let m = self.up_fields().count();
        let t = self.ca_fields().count();
        match ablation {
            Ablation::NoProfile => {}
            Ablation::NoUp if t == 0 => {
                return Err(Error::Config(
                    "ablation no_up needs at least one ca field".to_string(),
                ))
            }
            Ablation::NoCa if m == 0 => {
                return Err(Error::Config(
                    "ablation no_ca needs at least one up field".to_string(),
                ))
            }
            _ if m + t == 0 => {
                return Err(Error::Config(
                    "profile fusion enabled but the manifest is empty".to_string(),
                ))
            }
            _ => {}
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            word_dim: default_word_dim(),
            lstm_hidden: default_lstm_hidden(),
            sa_dim: default_sa_dim(),
            sa_key_dim: default_sa_key_dim(),
            d_p: default_d_p(),
            d_a: default_d_a(),
            d_c: default_d_c(),
            d_y: default_d_y(),
            dropout: default_dropout(),
            profile: Vec::new(),
        }
    }
}

fn default_lambda() -> f64 {
    0.5
}
fn default_lr() -> f64 {
    4e-4
}
fn default_batch_size() -> usize {
    32
}
fn default_epochs() -> usize {
    50
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}
fn default_lr_grid() -> Vec<f64> {
    vec![2e-4, 4e-4, 6e-4, 8e-4]
}
fn default_lambda_grid() -> Vec<f64> {
    vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub model: ModelConfig,
    /// Mixture weight: `lambda * L_ID + (1 - lambda) * L_SF`.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub ablation: Ablation,
    /// Use the gold intent's embedding for slot features during training;
    /// inference always uses the predicted intent.
    #[serde(default = "default_true")]
    pub intent_teacher_forcing: bool,
    /// Optional global-norm gradient clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_lr_grid")]
    pub lr_grid: Vec<f64>,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lambda: default_lambda(),
            learning_rate: default_lr(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            seeds: default_seeds(),
            ablation: Ablation::default(),
            intent_teacher_forcing: true,
            grad_clip: None,
            lr_grid: default_lr_grid(),
            lambda_grid: default_lambda_grid(),
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: TrainConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate(self.ablation)?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".to_string()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".to_string()));
        }
        if self.lr_grid.is_empty() || self.lambda_grid.is_empty() {
            return Err(Error::Config("grids must be nonempty".to_string()));
        }
        if self.lambda_grid.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Config("lambda grid values must lie in [0, 1]".to_string()));
        }
        Ok(())
    }
}
