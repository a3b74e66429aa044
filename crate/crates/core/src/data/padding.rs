use crate::error::{Error, Result};
use crate::modality::{Modality, Vocabulary};
use crate::types::{ImagePlane, MultiModalSample};

/// Adds an all-zero, invalid plane for every vocabulary modality the sample
/// lacks.
pub fn pad_missing_modality(sample: &MultiModalSample, vocab: &Vocabulary) -> Result<MultiModalSample> {
    let (h, w) = sample.resolution()?;
    let mut out = sample.clone();
    for spec in vocab.specs() {
        if !out.planes.contains_key(&spec.modality) {
            out.planes
                .insert(spec.modality, ImagePlane::zeros(h, w, spec.channels));
            out.valid.insert(spec.modality, false);
        }
    }
    Ok(out)
}

/// Zero-pads every plane on the bottom/right up to a multiple of `multiple`.
/// Boxes are unchanged.
pub fn pad_to_multiple(sample: &MultiModalSample, multiple: usize) -> Result<MultiModalSample> {
    if multiple == 0 {
        return Err(Error::config("padding multiple must be positive"));
    }
    let (h, w) = sample.resolution()?;
    let up = |v: usize| v.div_ceil(multiple) * multiple;
    let (ph, pw) = (up(h), up(w));
    if (ph, pw) == (h, w) {
        return Ok(sample.clone());
    }
    let mut out = sample.clone();
    for plane in out.planes.values_mut() {
        *plane = plane.pad_to(ph, pw);
    }
    Ok(out)
}

/// Invalidates every modality outside `keep` (zero plane, flag false).
pub fn restrict_to(sample: &MultiModalSample, keep: &[Modality]) -> Result<MultiModalSample> {
    let mut out = sample.clone();
    let drop: Vec<Modality> = out
        .planes
        .keys()
        .copied()
        .filter(|m| !keep.contains(m))
        .collect();
    for m in drop {
        out.invalidate(m);
    }
    if out.valid_count() == 0 {
        return Err(Error::Invariant(format!(
            "sample `{}` has no valid modality among {keep:?}",
            sample.sample_id
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use std::collections::BTreeMap;

    fn rgb_only() -> MultiModalSample {
        let mut planes = BTreeMap::new();
        planes.insert(
            Modality::Rgb,
            ImagePlane::new(Array3::from_elem((5, 6, 3), 0.25)).unwrap(),
        );
        MultiModalSample::new("rgb", planes, vec![]).unwrap()
    }

    #[test]
    fn missing_modality_is_padded_invalid() {
        let vocab = Vocabulary::with_defaults(&[Modality::Rgb, Modality::Ir]).unwrap();
        let s = pad_missing_modality(&rgb_only(), &vocab).unwrap();
        assert!(!s.is_valid(Modality::Ir));
        assert!(s.planes[&Modality::Ir].is_zero());
        assert_eq!(s.planes[&Modality::Ir].channels(), 1);
        assert_eq!(s.valid_count(), 1);
        s.validate().unwrap();
    }

    #[test]
    fn complete_sample_is_unchanged() {
        let vocab = Vocabulary::with_defaults(&[Modality::Rgb]).unwrap();
        let s = rgb_only();
        assert_eq!(pad_missing_modality(&s, &vocab).unwrap(), s);
    }

    #[test]
    fn pads_to_multiple_with_zeros() {
        let s = pad_to_multiple(&rgb_only(), 4).unwrap();
        let p = &s.planes[&Modality::Rgb];
        assert_eq!((p.height(), p.width()), (8, 8));
        assert_eq!(p.data()[[4, 5, 0]], 0.25);
        assert_eq!(p.data()[[5, 5, 0]], 0.0);
        assert_eq!(p.data()[[4, 6, 0]], 0.0);
    }

    #[test]
    fn resolution_mismatch_is_rejected() {
        let mut s = rgb_only();
        s.planes.insert(Modality::Ir, ImagePlane::zeros(5, 5, 1));
        s.valid.insert(Modality::Ir, true);
        let vocab = Vocabulary::with_defaults(&[Modality::Rgb, Modality::Ir, Modality::Depth]).unwrap();
        assert!(matches!(
            pad_missing_modality(&s, &vocab),
            Err(Error::Ingestion { .. })
        ));
    }
}
