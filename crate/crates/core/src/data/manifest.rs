//! JSON manifest plus COCO annotations on disk, planes as `.npy` files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use ndarray_npy::{read_npy, write_npy};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::types::{Annotation, BoundingBox, ImagePlane, MultiModalSample};

/// `modalities` maps a modality name to a plane path relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub modalities: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// COCO annotation file, relative to the manifest's directory.
    pub annotations: String,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    /// `[x, y, width, height]`.
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalization {
    Identity,
    /// Per-channel `(x - mean) / std`.
    MeanStd { mean: Vec<f64>, std: Vec<f64> },
    /// Divide by the largest absolute value; an all-zero plane stays zero.
    MaxAbs,
}

impl Normalization {
    pub fn apply(&self, plane: &mut Array3<f64>) -> std::result::Result<(), String> {
        match self {
            Normalization::Identity => {}
            Normalization::MeanStd { mean, std } => {
                let c = plane.shape()[2];
                if mean.len() != c || std.len() != c {
                    return Err(format!(
                        "mean/std have {}/{} entries for a {c}-channel plane",
                        mean.len(),
                        std.len()
                    ));
                }
                for (k, mut ch) in plane.axis_iter_mut(Axis(2)).enumerate() {
                    let (m, s) = (mean[k], std[k]);
                    ch.mapv_inplace(|v| (v - m) / s);
                }
            }
            Normalization::MaxAbs => {
                let max = plane.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                if max > 0.0 {
                    plane.mapv_inplace(|v| v / max);
                }
            }
        }
        Ok(())
    }
}

/// Per-modality normalization. Modalities without an entry use `MeanStd`
/// for RGB and `MaxAbs` otherwise, with the RGB statistics below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizationConfig {
    pub rgb_mean: Vec<f64>,
    pub rgb_std: Vec<f64>,
    pub overrides: BTreeMap<Modality, Normalization>,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        Self {
            rgb_mean: vec![0.485, 0.456, 0.406],
            rgb_std: vec![0.229, 0.224, 0.225],
            overrides: BTreeMap::new(),
        }
    }
}

impl NormalizationConfig {
    /// Leaves every plane untouched.
    pub fn identity() -> Self {
        Self {
            overrides: Modality::ALL
                .iter()
                .map(|&m| (m, Normalization::Identity))
                .collect(),
            ..Self::default()
        }
    }

    pub fn for_modality(&self, m: Modality) -> Normalization {
        if let Some(n) = self.overrides.get(&m) {
            return n.clone();
        }
        match m {
            Modality::Rgb => Normalization::MeanStd {
                mean: self.rgb_mean.clone(),
                std: self.rgb_std.clone(),
            },
            _ => Normalization::MaxAbs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rgb_mean.len() != self.rgb_std.len() {
            return Err(Error::config("rgb_mean and rgb_std differ in length"));
        }
        let stds = self.rgb_std.iter().chain(self.overrides.values().flat_map(|n| match n {
            Normalization::MeanStd { std, .. } => std.as_slice(),
            _ => &[],
        }));
        for s in stds {
            if !(s.is_finite() && *s > 0.0) {
                return Err(Error::config("normalization std must be positive"));
            }
        }
        Ok(())
    }
}

/// Lazily loaded samples in manifest order.
#[derive(Debug)]
pub struct ManifestSamples {
    root: PathBuf,
    entries: std::vec::IntoIter<(String, Vec<(Modality, String)>)>,
    annotations: BTreeMap<String, Vec<Annotation>>,
    norm: NormalizationConfig,
}

impl ManifestSamples {
    /// Reads every remaining sample into a dataset.
    pub fn into_dataset(self, name: impl Into<String>) -> Result<Dataset> {
        Ok(Dataset::new(name, self.collect::<Result<Vec<_>>>()?))
    }

    fn load(&self, id: String, planes: Vec<(Modality, String)>) -> Result<MultiModalSample> {
        let mut out = BTreeMap::new();
        for (m, rel) in planes {
            let path = self.root.join(&rel);
            if !path.is_file() {
                return Err(Error::ingestion(&id, format!("missing file {}", path.display())));
            }
            let mut data: Array3<f64> = read_npy(&path)
                .map_err(|e| Error::ingestion(&id, format!("reading {}: {e}", path.display())))?;
            self.norm
                .for_modality(m)
                .apply(&mut data)
                .map_err(|e| Error::ingestion(&id, format!("normalizing `{m}`: {e}")))?;
            let plane = ImagePlane::new(data).map_err(|e| Error::ingestion(&id, e.to_string()))?;
            out.insert(m, plane);
        }
        let annotations = self.annotations.get(&id).cloned().unwrap_or_default();
        MultiModalSample::new(id, out, annotations)
    }
}

impl Iterator for ManifestSamples {
    type Item = Result<MultiModalSample>;

    fn next(&mut self) -> Option<Self::Item> {
        let (id, planes) = self.entries.next()?;
        Some(self.load(id, planes))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.entries.size_hint()
    }
}

impl ExactSizeIterator for ManifestSamples {}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::ingestion(what, format!("cannot read {}: {e}", path.display()))
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Opens a manifest. Modality keys and the annotation file are checked
/// eagerly; planes are read as the iterator advances.
pub fn load_coco_manifest(path: &Path, norm: &NormalizationConfig) -> Result<ManifestSamples> {
    norm.validate()?;
    let manifest: Manifest = read_json(path, "manifest")?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let coco: CocoFile = read_json(&root.join(&manifest.annotations), "annotations")?;

    let mut entries = Vec::with_capacity(manifest.samples.len());
    for e in manifest.samples {
        let mut planes = Vec::with_capacity(e.modalities.len());
        for (key, rel) in e.modalities {
            let m: Modality = key.parse().map_err(|_| {
                Error::config(format!(
                    "unknown modality key `{key}` for sample `{}`",
                    e.sample_id
                ))
            })?;
            planes.push((m, rel));
        }
        entries.push((e.sample_id, planes));
    }

    let names: BTreeMap<u64, &str> = coco
        .images
        .iter()
        .map(|im| (im.id, im.file_name.as_str()))
        .collect();
    let mut annotations: BTreeMap<String, Vec<Annotation>> = BTreeMap::new();
    for a in &coco.annotations {
        let name = names.get(&a.image_id).ok_or_else(|| {
            Error::ingestion(
                format!("image {}", a.image_id),
                format!("annotation {} references an unknown image", a.id),
            )
        })?;
        let [x, y, w, h] = a.bbox;
        annotations.entry(name.to_string()).or_default().push(Annotation {
            bbox: BoundingBox::from_xywh(x, y, w, h),
            category: a.category_id,
            is_ignore: a.iscrowd != 0,
        });
    }

    Ok(ManifestSamples {
        root,
        entries: entries.into_iter(),
        annotations,
        norm: norm.clone(),
    })
}

/// Writes valid planes as `.npy`, the COCO file and the manifest into
/// `dir`; returns the manifest path. Invalid planes are omitted.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let planes_dir = dir.join("planes");
    fs::create_dir_all(&planes_dir)?;
    let mut coco = CocoFile {
        categories: vec![CocoCategory {
            id: crate::types::PERSON_CATEGORY,
            name: "person".into(),
        }],
        ..CocoFile::default()
    };
    let mut entries = Vec::with_capacity(dataset.len());
    let mut ann_id = 1;
    for (i, s) in dataset.samples.iter().enumerate() {
        let image_id = i as u64 + 1;
        let (h, w) = s.resolution()?;
        coco.images.push(CocoImage {
            id: image_id,
            file_name: s.sample_id.clone(),
            width: w,
            height: h,
        });
        for a in &s.annotations {
            coco.annotations.push(CocoAnnotation {
                id: ann_id,
                image_id,
                category_id: a.category,
                bbox: [a.bbox.x_min, a.bbox.y_min, a.bbox.width(), a.bbox.height()],
                area: a.bbox.area(),
                iscrowd: a.is_ignore as u8,
            });
            ann_id += 1;
        }
        let mut modalities = BTreeMap::new();
        for m in s.valid_modalities() {
            let rel = format!("planes/{}_{}.npy", s.sample_id, m.name());
            write_npy(dir.join(&rel), s.planes[&m].data())
                .map_err(|e| Error::ingestion(&s.sample_id, e.to_string()))?;
            modalities.insert(m.name().to_string(), rel);
        }
        entries.push(ManifestEntry {
            sample_id: s.sample_id.clone(),
            modalities,
        });
    }
    fs::write(dir.join("annotations.json"), serde_json::to_string_pretty(&coco)?)?;
    let manifest = Manifest {
        annotations: "annotations.json".into(),
        samples: entries,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}
