//! Sensor modalities and the fixed order in which they are concatenated.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A sensor modality. The derived `Ord` is the canonical concatenation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Ir,
    Depth,
    Lidar,
    Event,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Rgb,
        Modality::Ir,
        Modality::Depth,
        Modality::Lidar,
        Modality::Event,
    ];

    /// Number of modality kinds; the width of the confidence MLP output.
    pub const COUNT: usize = 5;

    /// Stable slot of this modality in [`Modality::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn default_channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Ir => "ir",
            Modality::Depth => "depth",
            Modality::Lidar => "lidar",
            Modality::Event => "event",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(Modality::Rgb),
            "ir" => Ok(Modality::Ir),
            "depth" => Ok(Modality::Depth),
            "lidar" => Ok(Modality::Lidar),
            "event" => Ok(Modality::Event),
            other => Err(Error::config(format!("unknown modality `{other}`"))),
        }
    }
}

/// Orders a set of modalities as RGB < IR < DEPTH < LIDAR < EVENT.
pub fn canonical_modality_order(vocabulary: &BTreeSet<Modality>) -> Result<Vec<Modality>> {
    if vocabulary.is_empty() {
        return Err(Error::config("modality vocabulary is empty"));
    }
    // BTreeSet iteration already follows the derived order.
    Ok(vocabulary.iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub modality: Modality,
    pub channels: usize,
}

/// The modalities a model is configured for, kept in canonical order with
/// one channel count each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ModalitySpec>", into = "Vec<ModalitySpec>")]
pub struct Vocabulary {
    specs: Vec<ModalitySpec>,
}

impl Vocabulary {
    pub fn new(specs: impl IntoIterator<Item = ModalitySpec>) -> Result<Self> {
        let mut specs: Vec<ModalitySpec> = specs.into_iter().collect();
        if specs.is_empty() {
            return Err(Error::config("modality vocabulary is empty"));
        }
        specs.sort_by_key(|s| s.modality);
        for pair in specs.windows(2) {
            if pair[0].modality == pair[1].modality {
                return Err(Error::config(format!(
                    "modality `{}` listed twice in vocabulary",
                    pair[0].modality
                )));
            }
        }
        if let Some(bad) = specs.iter().find(|s| s.channels == 0) {
            return Err(Error::config(format!(
                "modality `{}` must have at least one channel",
                bad.modality
            )));
        }
        Ok(Self { specs })
    }

    /// Vocabulary with every modality at its default channel count.
    pub fn with_defaults(modalities: &[Modality]) -> Result<Self> {
        Self::new(modalities.iter().map(|&m| ModalitySpec {
            modality: m,
            channels: m.default_channels(),
        }))
    }

    pub fn modalities(&self) -> impl ExactSizeIterator<Item = Modality> + '_ {
        self.specs.iter().map(|s| s.modality)
    }

    pub fn specs(&self) -> &[ModalitySpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn contains(&self, m: Modality) -> bool {
        self.specs.iter().any(|s| s.modality == m)
    }

    pub fn channels(&self, m: Modality) -> Option<usize> {
        self.specs.iter().find(|s| s.modality == m).map(|s| s.channels)
    }

    /// Position of `m` in the canonical order.
    pub fn position(&self, m: Modality) -> Option<usize> {
        self.specs.iter().position(|s| s.modality == m)
    }

    /// Keeps only the listed modalities.
    pub fn restrict(&self, keep: &[Modality]) -> Result<Self> {
        Self::new(
            self.specs
                .iter()
                .filter(|s| keep.contains(&s.modality))
                .copied(),
        )
    }
}

impl TryFrom<Vec<ModalitySpec>> for Vocabulary {
    type Error = Error;

    fn try_from(specs: Vec<ModalitySpec>) -> Result<Self> {
        Self::new(specs)
    }
}

impl From<Vocabulary> for Vec<ModalitySpec> {
    fn from(v: Vocabulary) -> Self {
        v.specs
    }
}
