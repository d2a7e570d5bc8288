//! Sparse voxel tensors, kernel maps and the sparse convolution U-Net encoder.
//!
//! Coordinates carry the batch index as their first component, so a whole
//! batch of scenes is one sparse tensor and convolutions never cross scenes.

mod unet;

pub use unet::{EncoderConfig, EncoderOutputs, SparseUNet, StageMap};

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::geometry::VoxelGrid;
use crate::tensor::{KernelTriples, Var};

/// `[batch, x, y, z]`
pub type Coord = [i32; 4];

/// Unique voxel coordinates with a hash index.
#[derive(Clone, Debug)]
pub struct CoordSet {
    coords: Vec<Coord>,
    index: HashMap<Coord, usize>,
}

impl PartialEq for CoordSet {
    fn eq(&self, other: &Self) -> bool {
        self.coords == other.coords
    }
}

impl CoordSet {
    pub fn new(coords: Vec<Coord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(coords.len());
        for (i, c) in coords.iter().enumerate() {
            if index.insert(*c, i).is_some() {
                return Err(Error::Input(format!("duplicate voxel coordinate {c:?}")));
            }
        }
        Ok(CoordSet { coords, index })
    }

    /// Stacks grids, tagging each with its position in the slice.
    pub fn from_grids(grids: &[&VoxelGrid]) -> Self {
        let coords = grids
            .iter()
            .enumerate()
            .flat_map(|(b, g)| g.coords.iter().map(move |c| [b as i32, c[0], c[1], c[2]]))
            .collect();
        CoordSet::new(coords).expect("voxel grids have unique coordinates")
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn get(&self, c: &Coord) -> Option<usize> {
        self.index.get(c).copied()
    }

    /// Sorted unique `floor(c / 2)` of the spatial part.
    pub fn downsample(&self) -> CoordSet {
        let set: BTreeSet<Coord> = self.coords.iter().map(parent).collect();
        CoordSet::new(set.into_iter().collect()).expect("set is unique")
    }

    /// Contiguous row ranges per batch entry. Requires coordinates grouped by
    /// batch index, which holds for sets built by `from_grids` and `downsample`.
    pub fn batch_ranges(&self, batch: usize) -> Vec<Range<usize>> {
        let mut ranges = vec![0..0; batch];
        let n = self.coords.len();
        let mut i = 0;
        while i < n {
            let (b, start) = (self.coords[i][0], i);
            while i < n && self.coords[i][0] == b {
                i += 1;
            }
            ranges[b as usize] = start..i;
        }
        ranges
    }
}

pub fn parent(c: &Coord) -> Coord {
    [c[0], c[1].div_euclid(2), c[2].div_euclid(2), c[3].div_euclid(2)]
}

/// Cubic window of kernel offsets `lo..=hi` per axis, enumerated in
/// lexicographic order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub lo: i32,
    pub hi: i32,
}

impl Window {
    /// `3×3×3` centered window.
    pub const CUBE3: Window = Window { lo: -1, hi: 1 };
    /// `2×2×2` window used by stride-2 down/up sampling.
    pub const CORNER2: Window = Window { lo: 0, hi: 1 };

    pub fn offsets(&self) -> Vec<[i32; 3]> {
        let r = self.lo..=self.hi;
        let mut out = Vec::new();
        for x in r.clone() {
            for y in r.clone() {
                for z in r.clone() {
                    out.push([x, y, z]);
                }
            }
        }
        out
    }

    pub fn volume(&self) -> usize {
        let side = (self.hi - self.lo + 1) as usize;
        side * side * side
    }
}

/// Triples `(i, o, k)` with `in[i] == stride · out[o] + offset(k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMap {
    pub triples: Rc<KernelTriples>,
    pub offsets: Vec<[i32; 3]>,
}

impl KernelMap {
    /// Swaps input and output roles; turns a downsampling map into the
    /// matching transposed-convolution map.
    pub fn transposed(&self) -> KernelMap {
        let t = &self.triples;
        KernelMap {
            triples: Rc::new(KernelTriples {
                n_in: t.n_out,
                n_out: t.n_in,
                n_offsets: t.n_offsets,
                triples: t.triples.iter().map(|&(i, o, k)| (o, i, k)).collect(),
            }),
            offsets: self.offsets.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.triples.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.triples.is_empty()
    }
}

pub fn build_kernel_map(input: &CoordSet, output: &CoordSet, window: Window, stride: i32) -> KernelMap {
    let offsets = window.offsets();
    let mut triples = Vec::new();
    for (o, c) in output.coords().iter().enumerate() {
        for (k, off) in offsets.iter().enumerate() {
            let probe = [
                c[0],
                stride * c[1] + off[0],
                stride * c[2] + off[1],
                stride * c[3] + off[2],
            ];
            if let Some(i) = input.get(&probe) {
                triples.push((i, o, k));
            }
        }
    }
    KernelMap {
        triples: Rc::new(KernelTriples {
            n_in: input.len(),
            n_out: output.len(),
            n_offsets: offsets.len(),
            triples,
        }),
        offsets,
    }
}

/// Features attached to a coordinate set at one resolution.
#[derive(Clone, Debug)]
pub struct SparseVoxelTensor<'t> {
    /// Stride relative to the input voxel grid.
    pub stride: i32,
    pub coords: Rc<CoordSet>,
    pub features: Var<'t>,
}

/// `out[o] = Σ_{(i,o,k)} x[i] · weights[k]`, weights shaped `[K, C_in, C_out]`.
pub fn sparse_conv<'t>(
    x: &SparseVoxelTensor<'t>,
    weights: Var<'t>,
    map: &KernelMap,
    out_coords: Rc<CoordSet>,
    out_stride: i32,
) -> Result<SparseVoxelTensor<'t>> {
    if map.triples.n_out != out_coords.len() || map.triples.n_in != x.coords.len() {
        return Err(Error::shape("sparse_conv", "kernel map built for different coordinates"));
    }
    Ok(SparseVoxelTensor {
        stride: out_stride,
        coords: out_coords,
        features: x.features.sparse_conv(weights, Rc::clone(&map.triples))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn set(cs: &[[i32; 3]]) -> CoordSet {
        CoordSet::new(cs.iter().map(|c| [0, c[0], c[1], c[2]]).collect()).unwrap()
    }

    #[test]
    fn single_voxel_has_only_center_triple() {
        let s = set(&[[3, -2, 7]]);
        let map = build_kernel_map(&s, &s, Window::CUBE3, 1);
        assert_eq!(map.triples.triples, vec![(0, 0, 13)]);
        assert_eq!(map.offsets[13], [0, 0, 0]);
    }

    #[test]
    fn distant_voxels_do_not_interact() {
        let s = set(&[[0, 0, 0], [5, 0, 0]]);
        let map = build_kernel_map(&s, &s, Window::CUBE3, 1);
        assert_eq!(map.triples.triples, vec![(0, 0, 13), (1, 1, 13)]);
    }

    #[test]
    fn batches_never_mix() {
        let s = CoordSet::new(vec![[0, 0, 0, 0], [1, 0, 0, 1]]).unwrap();
        let map = build_kernel_map(&s, &s, Window::CUBE3, 1);
        assert_eq!(map.len(), 2);
        assert_eq!(s.batch_ranges(2), vec![0..1, 1..2]);
    }

    #[test]
    fn duplicate_coords_rejected() {
        assert!(CoordSet::new(vec![[0, 1, 1, 1], [0, 1, 1, 1]]).is_err());
    }

    #[test]
    fn downsample_floors_negative_coords() {
        let s = set(&[[-1, 0, 1], [-2, 1, 0], [3, 3, 3]]);
        let d = s.downsample();
        assert_eq!(d.coords(), &[[0, -1, 0, 0], [0, 1, 1, 1]]);
        let map = build_kernel_map(&s, &d, Window::CORNER2, 2);
        // every fine voxel has exactly one parent
        let mut hits = vec![0; s.len()];
        for &(i, _, _) in &map.triples.triples {
            hits[i] += 1;
        }
        assert_eq!(hits, vec![1, 1, 1]);
        let up = map.transposed();
        assert_eq!(up.triples.n_in, d.len());
        assert_eq!(up.triples.n_out, s.len());
    }

    #[test]
    fn identity_and_zero_weights() {
        let s = Rc::new(set(&[[0, 0, 0], [1, 0, 0], [1, 1, 0]]));
        let map = build_kernel_map(&s, &s, Window::CUBE3, 1);
        let tape = Tape::new();
        let feats = Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 3.0, 4.0, 0.25]).unwrap();
        let x = SparseVoxelTensor {
            stride: 1,
            coords: Rc::clone(&s),
            features: tape.constant(feats.clone()),
        };
        let mut w = Tensor::zeros(&[27, 2, 2]);
        w.data_mut()[13 * 4] = 1.0;
        w.data_mut()[13 * 4 + 3] = 1.0;
        let y = sparse_conv(&x, tape.constant(w), &map, Rc::clone(&s), 1).unwrap();
        assert_eq!(*y.features.value(), feats);
        let z = sparse_conv(&x, tape.constant(Tensor::zeros(&[27, 2, 2])), &map, Rc::clone(&s), 1).unwrap();
        assert!(z.features.value().data().iter().all(|v| *v == 0.0));
        let bad = sparse_conv(&x, tape.constant(Tensor::zeros(&[27, 3, 2])), &map, s, 1);
        assert!(matches!(bad, Err(Error::Shape { .. })));
    }
}
