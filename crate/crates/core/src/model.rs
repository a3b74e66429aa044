//! Encoder plus head, sharing one parameter store.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{pad_missing_modality, pad_to_multiple};
use crate::encoder::{encode_node, plane_inputs, EncodedSample, EncoderConfig};
use crate::error::{Error, Result};
use crate::head::{
    assign_targets, collect_predictions, decode_and_nms, head_forward_node, loss_node, HeadConfig,
    LossTerms, RawPredictions,
};
use crate::modality::{Modality, Vocabulary};
use crate::params::ParamStore;
use crate::types::{DetectionSet, MultiModalSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub head: HeadConfig,
}

impl ModelConfig {
    /// Toy encoder and default head over `vocabulary`.
    pub fn toy(vocabulary: Vocabulary, input_size: (usize, usize)) -> Self {
        Self {
            encoder: EncoderConfig::toy(vocabulary, input_size),
            head: HeadConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()
    }
}

/// Anything that turns a sample into detections.
pub trait Detector {
    fn vocabulary(&self) -> &Vocabulary;
    fn detect(&self, sample: &MultiModalSample) -> Result<DetectionSet>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Per-sample training quantities.
#[derive(Debug, Clone)]
pub struct SampleLoss {
    pub terms: LossTerms,
    pub grads: BTreeMap<String, Array2<f64>>,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        config.encoder.init_params(&mut params, &mut rng)?;
        let dims: Vec<usize> = config.encoder.stages.iter().map(|s| s.embed_dim).collect();
        config.head.init_params(&mut params, &mut rng, &dims)?;
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking every name the model reads.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let m = Self { config, params };
        let reference = Model::new(m.config.clone(), 0)?;
        for (name, value) in reference.params.iter() {
            match m.params.get(name) {
                None => return Err(Error::config(format!("parameter `{name}` missing"))),
                Some(v) if v.dim() != value.dim() => {
                    return Err(Error::config(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        v.dim(),
                        value.dim()
                    )))
                }
                _ => {}
            }
        }
        Ok(m)
    }

    /// Same parameters with the encoder vocabulary narrowed to `keep`.
    pub fn restrict_vocabulary(&self, keep: &[Modality]) -> Result<Self> {
        let mut config = self.config.clone();
        config.encoder.vocabulary = config.encoder.vocabulary.restrict(keep)?;
        Ok(Self {
            config,
            params: self.params.clone(),
        })
    }

    pub fn strides(&self) -> Vec<usize> {
        self.config.encoder.cumulative_strides()
    }

    /// Pads absent vocabulary modalities (invalid) and the resolution to a
    /// multiple of the total stride; planes outside the vocabulary are
    /// rejected.
    pub fn prepare(&self, sample: &MultiModalSample) -> Result<MultiModalSample> {
        let s = pad_missing_modality(sample, &self.config.encoder.vocabulary)?;
        let s = pad_to_multiple(&s, self.config.encoder.total_stride())?;
        s.check_vocabulary(&self.config.encoder.vocabulary)?;
        Ok(s)
    }

    pub fn encode(&self, sample: &MultiModalSample) -> Result<EncodedSample> {
        let s = self.prepare(sample)?;
        crate::encoder::encode(&self.params, &self.config.encoder, &s)
    }

    fn forward_graph(&self, g: &mut Graph, s: &MultiModalSample) -> Result<(Vec<crate::head::LevelVars>, RawPredictions)> {
        let planes = plane_inputs(g, &self.config.encoder, s, false)?;
        let enc = encode_node(g, &self.params, &self.config.encoder, s, &planes)?;
        let vars = head_forward_node(g, &self.params, &self.config.head, &enc.pyramid, &enc.grid_shapes)?;
        let raw = collect_predictions(g, &vars, &enc.grid_shapes, &self.strides(), s.resolution()?);
        Ok((vars, raw))
    }

    pub fn raw_predictions(&self, sample: &MultiModalSample) -> Result<RawPredictions> {
        let s = self.prepare(sample)?;
        let mut g = Graph::new();
        Ok(self.forward_graph(&mut g, &s)?.1)
    }

    /// Loss terms and parameter gradients for one sample.
    pub fn loss_and_grads(&self, sample: &MultiModalSample) -> Result<SampleLoss> {
        let s = self.prepare(sample)?;
        let mut g = Graph::new();
        let (vars, raw) = self.forward_graph(&mut g, &s)?;
        let shapes: Vec<_> = raw.levels.iter().map(|l| l.shape).collect();
        let targets = assign_targets(&shapes, &self.strides(), &s.annotations, raw.image_size, &self.config.head);
        let (loss, terms) = loss_node(&mut g, &vars, &raw, &targets, &self.config.head)?;
        let grads = g.param_grads(&g.backward(loss.total));
        Ok(SampleLoss { terms, grads })
    }
}

impl Detector for Model {
    fn vocabulary(&self) -> &Vocabulary {
        &self.config.encoder.vocabulary
    }

    fn detect(&self, sample: &MultiModalSample) -> Result<DetectionSet> {
        let raw = self.raw_predictions(sample)?;
        let (h, w) = sample.resolution()?;
        let (bh, bw) = (h as f64, w as f64);
        Ok(decode_and_nms(&raw, &self.config.head)
            .into_iter()
            .map(|mut d| {
                d.bbox = d.bbox.clip(bw, bh);
                d
            })
            .filter(|d| d.bbox.area() > 0.0)
            .collect())
    }
}
