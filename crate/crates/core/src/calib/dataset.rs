//! Calibration target and observation containers with their JSON format.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Chessboard-style grid of corners. Corner `id = row * cols + col` sits at
/// `(col * spacing, row * spacing, z_offset[id])` in target coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetGeometry {
    pub rows: usize,
    pub cols: usize,
    #[serde(rename = "spacing_m")]
    pub spacing: f64,
    #[serde(rename = "z_offsets_m", default, skip_serializing_if = "Option::is_none")]
    pub z_offsets: Option<Vec<f64>>,
}

impl TargetGeometry {
    pub fn new(rows: usize, cols: usize, spacing: f64) -> Self {
        Self { rows, cols, spacing, z_offsets: None }
    }

    pub fn num_corners(&self) -> usize {
        self.rows * self.cols
    }

    pub fn corner(&self, id: usize) -> Vector3<f64> {
        let (row, col) = (id / self.cols, id % self.cols);
        let z = self.z_offsets.as_ref().map_or(0.0, |z| z[id]);
        Vector3::new(col as f64 * self.spacing, row as f64 * self.spacing, z)
    }

    pub fn corners(&self) -> Vec<Vector3<f64>> {
        (0..self.num_corners()).map(|i| self.corner(i)).collect()
    }

    /// Center of the corner grid in target coordinates.
    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(
            0.5 * (self.cols - 1) as f64 * self.spacing,
            0.5 * (self.rows - 1) as f64 * self.spacing,
            0.0,
        )
    }

    /// Same grid with the out-of-plane offsets removed.
    pub fn planar(&self) -> Self {
        Self { z_offsets: None, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidDataset("target has no corners".into()));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::InvalidDataset(format!("spacing must be positive, got {}", self.spacing)));
        }
        if let Some(z) = &self.z_offsets {
            if z.len() != self.num_corners() {
                return Err(Error::InvalidDataset(format!(
                    "{} z offsets for {} corners",
                    z.len(),
                    self.num_corners()
                )));
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset("non-finite z offset".into()));
            }
        }
        Ok(())
    }
}

/// One detected corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    #[serde(rename = "c")]
    pub corner: usize,
    pub u: f64,
    pub v: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub id: i64,
    pub obs: Vec<Observation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub target: TargetGeometry,
    pub frames: Vec<Frame>,
    /// Sensor size `[width, height]` in pixels, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<[u32; 2]>,
}

impl Dataset {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_observations(&self) -> usize {
        self.frames.iter().map(|f| f.obs.len()).sum()
    }

    /// Number of scalar residuals, two per observation.
    pub fn num_residuals(&self) -> usize {
        2 * self.num_observations()
    }

    pub fn validate(&self) -> Result<()> {
        self.target.validate()?;
        let n = self.target.num_corners();
        for f in &self.frames {
            let mut seen = vec![false; n];
            for o in &f.obs {
                if o.corner >= n {
                    return Err(Error::InvalidDataset(format!("frame {}: corner id {} out of range", f.id, o.corner)));
                }
                if std::mem::replace(&mut seen[o.corner], true) {
                    return Err(Error::InvalidDataset(format!("frame {}: corner {} observed twice", f.id, o.corner)));
                }
                if !(o.u.is_finite() && o.v.is_finite()) {
                    return Err(Error::InvalidDataset(format!("frame {}: non-finite observation", f.id)));
                }
            }
        }
        Ok(())
    }

    /// Copy with every frame's observations sorted by corner id, the order in
    /// which residuals are stacked.
    pub fn normalized(&self) -> Self {
        let mut d = self.clone();
        for f in &mut d.frames {
            f.obs.sort_by_key(|o| o.corner);
        }
        d
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: Dataset = serde_json::from_str(s).map_err(|e| Error::InvalidDataset(e.to_string()))?;
        d.validate()?;
        Ok(d)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dataset serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset {
            target: TargetGeometry::new(2, 3, 0.1),
            frames: vec![Frame { id: 7, obs: vec![Observation { corner: 4, u: 1.0, v: 2.0 }, Observation { corner: 0, u: 3.0, v: 4.0 }] }],
            image_size: None,
        }
    }

    #[test]
    fn corner_coordinates() {
        let t = TargetGeometry::new(2, 3, 0.1);
        assert_eq!(t.corner(4), Vector3::new(0.1, 0.1, 0.0));
        assert_eq!(t.corner(2), Vector3::new(0.2, 0.0, 0.0));
    }

    #[test]
    fn json_round_trip() {
        let d = tiny();
        let s = d.to_json();
        assert_eq!(
            s,
            r#"{"target":{"rows":2,"cols":3,"spacing_m":0.1},"frames":[{"id":7,"obs":[{"c":4,"u":1.0,"v":2.0},{"c":0,"u":3.0,"v":4.0}]}]}"#
        );
        assert_eq!(Dataset::from_json(&s).unwrap(), d);
        assert_eq!(d.num_residuals(), 4);
    }

    #[test]
    fn rejects_duplicate_and_out_of_range_corners() {
        let mut d = tiny();
        d.frames[0].obs[1].corner = 4;
        assert!(d.validate().is_err());
        d.frames[0].obs[1].corner = 6;
        assert!(d.validate().is_err());
    }

    #[test]
    fn normalized_sorts_by_corner() {
        let d = tiny().normalized();
        assert_eq!(d.frames[0].obs[0].corner, 0);
    }
}
