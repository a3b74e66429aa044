use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::MultiModalSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    /// Probability of dropping one modality from a sample.
    pub p: f64,
    pub rng_seed: u64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self { p: 0.3, rng_seed: 0 }
    }
}

impl DropoutConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config(format!(
                "dropout probability {} outside [0, 1]",
                self.p
            )));
        }
        Ok(())
    }
}

/// With probability `p`, invalidates one uniformly chosen valid modality.
///
/// At most one modality is dropped and the last valid one is never dropped.
pub fn apply_modality_dropout<R: Rng + ?Sized>(
    sample: &MultiModalSample,
    cfg: &DropoutConfig,
    rng: &mut R,
) -> MultiModalSample {
    let mut out = sample.clone();
    let roll: f64 = rng.gen();
    if roll >= cfg.p {
        return out;
    }
    let valid = out.valid_modalities();
    if valid.len() < 2 {
        return out;
    }
    let victim = valid[rng.gen_range(0..valid.len())];
    out.invalidate(victim);
    out
}
