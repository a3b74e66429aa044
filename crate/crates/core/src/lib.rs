//! Multi-modal pedestrian detection with modality-aware fusion tokens.
//!
//! A single transformer encoder handles any combination of RGB, IR, depth,
//! LiDAR and event inputs. Every stage prepends two learnable tokens to the
//! hybrid token sequence: the fuser (MAF), whose feature yields a confidence
//! per modality, and the abstractor (MAA), whose feature is added to the
//! fused tokens. Missing modalities are zero-padded and masked out of both
//! attention and fusion.
//!
//! The crate also carries the data pipeline (event integration, LiDAR
//! projection, modality dropout, a synthetic two-modality dataset), a small
//! centre-based detection head with its losses, a two-stage trainer, and the
//! evaluation suite (COCO AP, MR^-2, Jaccard index, token probe).

pub mod autograd;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod head;
pub mod io;
pub mod modality;
pub mod model;
pub mod params;
pub mod train;
pub mod types;
pub mod unifier;

pub use encoder::{EncoderConfig, FusionConfig, StageConfig};
pub use error::{Error, Result};
pub use modality::{canonical_modality_order, Modality, ModalitySpec, Vocabulary};
pub use model::{Model, ModelConfig};
pub use params::ParamStore;
pub use types::{
    Annotation, BoundingBox, Detection, DetectionSet, HybridSequence, ImagePlane,
    ModalityConfidence, MultiModalSample, TokenGrid,
};
