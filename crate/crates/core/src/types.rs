//! Value types shared across the pipeline: planes, samples, boxes, tokens.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{Modality, Vocabulary};

/// A registered 2D plane, `height x width x channels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImagePlane {
    data: Array3<f64>,
}

impl ImagePlane {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::config(format!("plane has empty shape {h}x{w}x{c}")));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            data: Array3::zeros((height, width, channels)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Flattens to `(height * width) x channels`, row-major over pixels.
    pub fn to_pixel_matrix(&self) -> Array2<f64> {
        let (h, w, c) = self.data.dim();
        let flat: Vec<f64> = self.data.iter().copied().collect();
        Array2::from_shape_vec((h * w, c), flat).expect("contiguous plane")
    }

    /// Zero-pads on the bottom and right.
    pub fn pad_to(&self, height: usize, width: usize) -> Self {
        let (h, w, c) = self.data.dim();
        if h == height && w == width {
            return self.clone();
        }
        let mut out = Array3::zeros((height.max(h), width.max(w), c));
        out.slice_mut(ndarray::s![..h, ..w, ..]).assign(&self.data);
        Self { data: out }
    }
}

/// Axis-aligned box in pixels, `(x_min, y_min, x_max, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn is_well_formed(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn intersection(&self, other: &Self) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }

    /// Intersection over union; zero when either box has no area.
    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

pub const PERSON_CATEGORY: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BoundingBox,
    pub category: u32,
    #[serde(default)]
    pub is_ignore: bool,
}

impl Annotation {
    pub fn person(bbox: BoundingBox) -> Self {
        Self {
            bbox,
            category: PERSON_CATEGORY,
            is_ignore: false,
        }
    }
}

/// One registered multi-modal frame with its validity flags and boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiModalSample {
    pub sample_id: String,
    pub planes: BTreeMap<Modality, ImagePlane>,
    pub valid: BTreeMap<Modality, bool>,
    pub annotations: Vec<Annotation>,
}

impl MultiModalSample {
    /// Builds a sample in which every given plane is valid.
    pub fn new(
        sample_id: impl Into<String>,
        planes: BTreeMap<Modality, ImagePlane>,
        annotations: Vec<Annotation>,
    ) -> Result<Self> {
        let valid = planes.keys().map(|&m| (m, true)).collect();
        let s = Self {
            sample_id: sample_id.into(),
            planes,
            valid,
            annotations,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn is_valid(&self, m: Modality) -> bool {
        self.valid.get(&m).copied().unwrap_or(false)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.values().filter(|&&v| v).count()
    }

    pub fn valid_modalities(&self) -> Vec<Modality> {
        self.valid
            .iter()
            .filter(|(_, &v)| v)
            .map(|(&m, _)| m)
            .collect()
    }

    /// Spatial size shared by every plane.
    pub fn resolution(&self) -> Result<(usize, usize)> {
        let mut dims = self.planes.values().map(|p| (p.height(), p.width()));
        let first = dims
            .next()
            .ok_or_else(|| Error::ingestion(&self.sample_id, "sample has no planes"))?;
        if dims.any(|d| d != first) {
            return Err(Error::ingestion(
                &self.sample_id,
                "modality planes differ in resolution",
            ));
        }
        Ok(first)
    }

    /// Marks `m` invalid and replaces its plane with zeros.
    pub fn invalidate(&mut self, m: Modality) {
        if let Some(p) = self.planes.get_mut(&m) {
            p.data_mut().fill(0.0);
        }
        self.valid.insert(m, false);
    }

    pub fn validate(&self) -> Result<()> {
        self.resolution()?;
        if self.valid_count() == 0 {
            return Err(Error::ingestion(
                &self.sample_id,
                "sample has no valid modality",
            ));
        }
        for (m, plane) in &self.planes {
            match self.valid.get(m) {
                None => {
                    return Err(Error::ingestion(
                        &self.sample_id,
                        format!("plane `{m}` has no validity flag"),
                    ))
                }
                Some(false) if !plane.is_zero() => {
                    return Err(Error::ingestion(
                        &self.sample_id,
                        format!("invalid modality `{m}` carries a non-zero plane"),
                    ))
                }
                _ => {}
            }
            if !plane.is_finite() {
                return Err(Error::ingestion(
                    &self.sample_id,
                    format!("plane `{m}` contains non-finite values"),
                ));
            }
        }
        if self.valid.keys().any(|m| !self.planes.contains_key(m)) {
            return Err(Error::ingestion(
                &self.sample_id,
                "validity flag without a plane",
            ));
        }
        Ok(())
    }

    /// Checks that every modality is in the vocabulary with the right channel count.
    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<()> {
        for (m, plane) in &self.planes {
            match vocab.channels(*m) {
                None => {
                    return Err(Error::config(format!(
                        "sample `{}` carries modality `{m}` outside the vocabulary",
                        self.sample_id
                    )))
                }
                Some(c) if c != plane.channels() => {
                    return Err(Error::config(format!(
                        "sample `{}`: modality `{m}` has {} channels, vocabulary expects {c}",
                        self.sample_id,
                        plane.channels()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Vision tokens of one modality (or of the unified stream) at one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub tokens: Array2<f64>,
    pub grid_shape: (usize, usize),
    pub modality: Option<Modality>,
    pub valid: bool,
}

impl TokenGrid {
    pub fn new(
        tokens: Array2<f64>,
        grid_shape: (usize, usize),
        modality: Option<Modality>,
        valid: bool,
    ) -> Result<Self> {
        if tokens.nrows() != grid_shape.0 * grid_shape.1 {
            return Err(Error::config(format!(
                "token count {} does not match grid {}x{}",
                tokens.nrows(),
                grid_shape.0,
                grid_shape.1
            )));
        }
        Ok(Self {
            tokens,
            grid_shape,
            modality,
            valid,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// `[MAF, MAA, grid_1 tokens, ..., grid_m tokens]` with a per-token mask.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridSequence {
    pub maf: Array1<f64>,
    pub maa: Array1<f64>,
    pub grids: Vec<TokenGrid>,
    pub token_mask: Vec<bool>,
}

impl HybridSequence {
    pub fn len(&self) -> usize {
        2 + self.grids.iter().map(TokenGrid::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.maf.len()
    }

    /// Row offset of grid `i` within the flattened sequence.
    pub fn grid_offset(&self, i: usize) -> usize {
        2 + self.grids[..i].iter().map(TokenGrid::len).sum::<usize>()
    }

    pub fn to_matrix(&self) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((self.len(), d));
        out.row_mut(0).assign(&self.maf);
        out.row_mut(1).assign(&self.maa);
        for (i, g) in self.grids.iter().enumerate() {
            let off = self.grid_offset(i);
            out.slice_mut(ndarray::s![off..off + g.len(), ..])
                .assign(&g.tokens);
        }
        out
    }

    /// Rebuilds a sequence of the same layout from a flattened matrix.
    pub fn with_matrix(&self, m: &Array2<f64>) -> Self {
        let mut out = self.clone();
        out.maf = m.row(0).to_owned();
        out.maa = m.row(1).to_owned();
        for i in 0..out.grids.len() {
            let off = self.grid_offset(i);
            let n = out.grids[i].len();
            out.grids[i].tokens = m.slice(ndarray::s![off..off + n, ..]).to_owned();
        }
        out
    }
}

/// Per-modality confidences, one per vocabulary slot, each in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityConfidence {
    pub c: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
    pub category: u32,
}

pub type DetectionSet = Vec<Detection>;
