//! Point clouds, voxel quantization, augmentation and the UPC text format.

mod augment;
mod upc;
mod voxel;

pub use augment::{augment, flip_x, flip_y, rotate, AugmentConfig};
pub use upc::{load_pointcloud, parse_upc, save_pointcloud, write_upc};
pub use voxel::{voxelize, VoxelGrid};

use crate::error::{Error, Result};

/// Colored point cloud with optional per-point labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    pub semantic: Option<Vec<u32>>,
    pub instance: Option<Vec<u32>>,
}

impl PointCloud {
    /// Validates lengths and clamps colors into `[0, 1]`.
    pub fn new(positions: Vec<[f64; 3]>, mut colors: Vec<[f64; 3]>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Input("point cloud needs at least one point".into()));
        }
        if positions.len() != colors.len() {
            return Err(Error::Input(format!(
                "{} positions but {} colors",
                positions.len(),
                colors.len()
            )));
        }
        if positions.iter().flatten().chain(colors.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite coordinate or color".into()));
        }
        for c in colors.iter_mut().flatten() {
            *c = c.clamp(0.0, 1.0);
        }
        Ok(PointCloud {
            positions,
            colors,
            semantic: None,
            instance: None,
        })
    }

    pub fn with_labels(mut self, semantic: Vec<u32>, instance: Option<Vec<u32>>) -> Result<Self> {
        if semantic.len() != self.len() || instance.as_ref().is_some_and(|i| i.len() != self.len()) {
            return Err(Error::Input("label count differs from point count".into()));
        }
        self.semantic = Some(semantic);
        self.instance = instance;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.positions {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / self.len() as f64)
    }
}
