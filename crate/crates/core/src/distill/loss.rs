use super::{DistillError, Result};
use crate::tensor::{Tape, Tensor};

/// Paper default: 90% of the label signal from hard labels.
pub const DEFAULT_ALPHA: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the hard-label term; the soft term gets `1 - alpha`.
    pub alpha: f64,
    /// Per-label BCE weights; empty means all ones.
    pub label_weights: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            label_weights: Vec::new(),
        }
    }
}

impl LossConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DistillError::Config(format!("alpha {} outside [0,1]", self.alpha)));
        }
        if let Some(w) = self.label_weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(DistillError::Config(format!(
                "label weight {w} is not a finite non-negative value"
            )));
        }
        Ok(())
    }

    pub fn uses_soft_labels(&self) -> bool {
        self.alpha < 1.0
    }
}

/// `alpha * l_hard + (1 - alpha) * l_soft`.
pub fn total_loss(l_hard: f64, l_soft: f64, config: &LossConfig) -> Result<f64> {
    config.validate()?;
    for (name, v) in [("hard", l_hard), ("soft", l_soft)] {
        if !v.is_finite() || v < 0.0 {
            return Err(DistillError::Contract(format!(
                "{name} loss {v} is not finite and non-negative"
            )));
        }
    }
    Ok(config.alpha * l_hard + (1.0 - config.alpha) * l_soft)
}

/// Mean weighted BCE of `logits` against `targets`, outside any training graph.
pub fn bce_loss(logits: &Tensor, targets: &[f64], weights: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone())?;
    let l = tape.bce_with_logits(x, targets, weights)?;
    Ok(tape.value(l).data()[0])
}
