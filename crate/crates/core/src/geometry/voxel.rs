use std::collections::BTreeMap;

use super::PointCloud;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Occupied cells of a regular grid with mean colors as features.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub voxel_size: f64,
    /// Lexicographically sorted, unique.
    pub coords: Vec<[i32; 3]>,
    /// `M×3` mean RGB per voxel.
    pub features: Tensor,
    pub point_to_voxel: Vec<usize>,
    pub counts: Vec<usize>,
    /// Majority labels; ties go to the smallest label id.
    pub semantic: Option<Vec<u32>>,
    pub instance: Option<Vec<u32>>,
}

impl VoxelGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Cell centers in meters.
    pub fn centers(&self) -> Vec<[f64; 3]> {
        self.coords
            .iter()
            .map(|c| c.map(|v| (f64::from(v) + 0.5) * self.voxel_size))
            .collect()
    }
}

fn cell(p: &[f64; 3], size: f64) -> Result<[i32; 3]> {
    let mut c = [0i32; 3];
    for k in 0..3 {
        let q = (p[k] / size).floor();
        if q < f64::from(i32::MIN) || q > f64::from(i32::MAX) {
            return Err(Error::Input(format!("coordinate {} out of grid range", p[k])));
        }
        c[k] = q as i32;
    }
    Ok(c)
}

fn majority(labels: impl Iterator<Item = u32>) -> u32 {
    let mut hist: BTreeMap<u32, usize> = BTreeMap::new();
    for l in labels {
        *hist.entry(l).or_default() += 1;
    }
    // BTreeMap iterates ascending, so the first maximum is the smallest id.
    let mut best = (0, 0);
    for (label, count) in hist {
        if count > best.1 {
            best = (label, count);
        }
    }
    best.0
}

/// Quantizes points with `floor(p / voxel_size)` and averages colors per cell.
pub fn voxelize(pc: &PointCloud, voxel_size: f64) -> Result<VoxelGrid> {
    if voxel_size.is_nan() || voxel_size <= 0.0 {
        return Err(Error::Input(format!("voxel size must be positive, got {voxel_size}")));
    }
    if pc.is_empty() {
        return Err(Error::Input("cannot voxelize an empty cloud".into()));
    }
    let mut members: BTreeMap<[i32; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in pc.positions.iter().enumerate() {
        members.entry(cell(p, voxel_size)?).or_default().push(i);
    }

    let m = members.len();
    let mut coords = Vec::with_capacity(m);
    let mut features = Vec::with_capacity(m * 3);
    let mut counts = Vec::with_capacity(m);
    let mut point_to_voxel = vec![0; pc.len()];
    let mut semantic = pc.semantic.as_ref().map(|_| Vec::with_capacity(m));
    let mut instance = pc.instance.as_ref().map(|_| Vec::with_capacity(m));

    for (v, (coord, pts)) in members.into_iter().enumerate() {
        let mut sum = [0.0; 3];
        for &i in &pts {
            point_to_voxel[i] = v;
            for k in 0..3 {
                sum[k] += pc.colors[i][k];
            }
        }
        features.extend(sum.map(|s| s / pts.len() as f64));
        if let (Some(out), Some(labels)) = (semantic.as_mut(), pc.semantic.as_ref()) {
            out.push(majority(pts.iter().map(|&i| labels[i])));
        }
        if let (Some(out), Some(labels)) = (instance.as_mut(), pc.instance.as_ref()) {
            out.push(majority(pts.iter().map(|&i| labels[i])));
        }
        coords.push(coord);
        counts.push(pts.len());
    }

    Ok(VoxelGrid {
        voxel_size,
        coords,
        features: Tensor::new(vec![m, 3], features)?,
        point_to_voxel,
        counts,
        semantic,
        instance,
    })
}
