use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ImagePlane;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarCloud {
    /// `(X, Y, Z)` in metres, camera frame.
    pub points: Vec<[f64; 3]>,
    pub intrinsics: Intrinsics,
}

impl LidarCloud {
    pub fn new(points: Vec<[f64; 3]>, intrinsics: Intrinsics) -> Result<Self> {
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0) {
            return Err(Error::config("LiDAR focal lengths must be positive"));
        }
        Ok(Self { points, intrinsics })
    }
}

/// Projects points in front of the camera onto a sparse depth plane.
///
/// Pixel values are depth `Z`; when several points land on one pixel the
/// nearest wins. Points behind the camera or outside the image are dropped.
pub fn project_lidar_to_image(cloud: &LidarCloud, out_shape: (usize, usize)) -> Result<ImagePlane> {
    let (h, w) = out_shape;
    if h == 0 || w == 0 {
        return Err(Error::config("projection shape must be positive"));
    }
    let k = cloud.intrinsics;
    let mut depth = Array3::zeros((h, w, 1));
    for &[x, y, z] in &cloud.points {
        if !(z > 0.0) || !x.is_finite() || !y.is_finite() || !z.is_finite() {
            continue;
        }
        let u = (k.fx * x / z + k.cx).round();
        let v = (k.fy * y / z + k.cy).round();
        if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
            continue;
        }
        let px = &mut depth[[v as usize, u as usize, 0]];
        if *px == 0.0 || z < *px {
            *px = z;
        }
    }
    ImagePlane::new(depth)
}

/// Reads `X,Y,Z` rows (header optional).
pub fn read_lidar_csv(path: &Path) -> Result<Vec<[f64; 3]>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let mut points = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let parsed: Vec<Option<f64>> = rec.iter().map(|f| f.parse().ok()).collect();
        if line == 0 && parsed.iter().any(Option::is_none) {
            continue;
        }
        match parsed.as_slice() {
            [Some(x), Some(y), Some(z), ..] => points.push([*x, *y, *z]),
            _ => {
                return Err(Error::config(format!(
                    "{}:{}: expected X,Y,Z",
                    path.display(),
                    line + 1
                )))
            }
        }
    }
    Ok(points)
}
