use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults; `vocab_size` is normally taken from the codec.
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            context_len: 256,
            vocab_size: 256,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layer, head, model and feed-forward sizes must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.context_len < 2 {
            return bad(format!("context_len {} < 2", self.context_len));
        }
        if self.vocab_size < 4 {
            return bad(format!("vocab_size {} < 4", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrDecay {
    /// Constant after warmup.
    #[default]
    None,
    /// Cosine from the peak down to a tenth of it at `total_steps`.
    Cosine,
}

/// Optimization hyperparameters. Adam uses beta1 0.9, beta2 0.999 and
/// epsilon 1e-8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub total_steps: usize,
    pub grad_clip: Option<f64>,
    pub eval_every: usize,
    pub lr_decay: LrDecay,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            warmup_steps: 800,
            peak_lr: 3e-4,
            total_steps: 4000,
            grad_clip: Some(1.0),
            eval_every: 200,
            lr_decay: LrDecay::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.warmup_steps == 0 || self.total_steps == 0 || self.eval_every == 0 {
            return Err(Error::Config("training counts must be at least 1".into()));
        }
        // lr = 0 is allowed so a run can be used as a frozen baseline
        if !(self.peak_lr >= 0.0) || !self.peak_lr.is_finite() {
            return Err(Error::Config(format!("peak_lr {} must be finite and >= 0", self.peak_lr)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        Ok(())
    }

    /// Learning rate for a 1-based step.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = (step as f64 / self.warmup_steps as f64).min(1.0);
        let base = self.peak_lr * warm;
        match self.lr_decay {
            LrDecay::None => base,
            LrDecay::Cosine if step <= self.warmup_steps => base,
            LrDecay::Cosine => {
                let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
                let floor = 0.1 * self.peak_lr;
                floor + (self.peak_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}
