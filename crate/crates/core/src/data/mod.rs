//! Turning raw sensor data into registered planes, plus augmentation and
//! the synthetic toy dataset.

mod dropout;
mod events;
mod lidar;
mod manifest;
mod padding;
mod synth;

pub use dropout::{apply_modality_dropout, DropoutConfig};
pub use events::{integrate_events, read_events_csv, Event, EventStream};
pub use lidar::{project_lidar_to_image, read_lidar_csv, Intrinsics, LidarCloud};
pub use manifest::{
    load_coco_manifest, write_dataset, CocoAnnotation, CocoCategory, CocoFile, CocoImage,
    Manifest, ManifestEntry, Normalization, NormalizationConfig,
};
pub use padding::{pad_missing_modality, pad_to_multiple, restrict_to};
pub use synth::{synth_toy_dataset, SceneKind, SynthConfig, SynthDataset, A_MODALITY, B_MODALITY};

use serde::{Deserialize, Serialize};

use crate::types::MultiModalSample;

/// A named collection of samples; the unit the trainer mixes and the
/// evaluator breaks metrics down by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<MultiModalSample>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Vec<MultiModalSample>) -> Self {
        Self {
            name: name.into(),
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Every modality that is valid in at least one sample.
    pub fn modalities(&self) -> std::collections::BTreeSet<crate::Modality> {
        self.samples
            .iter()
            .flat_map(|s| s.valid_modalities())
            .collect()
    }
}
