//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxlang::geometry::{voxelize, PointCloud, VoxelGrid};
use voxlang::Tensor;

/// Colored points scattered through a cube of side `extent` metres.
pub fn random_grid(points: usize, extent: f64, voxel: f64, seed: u64) -> VoxelGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos = (0..points).map(|_| [0; 3].map(|_: i32| rng.gen_range(0.0..extent))).collect();
    let col = (0..points).map(|_| [0; 3].map(|_: i32| rng.gen_range(0.0..1.0))).collect();
    voxelize(&PointCloud::new(pos, col).expect("finite points"), voxel).expect("positive voxel size")
}

pub fn random_costs(n: usize, m: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![n, m], (0..n * m).map(|_| rng.gen_range(0.0..10.0)).collect()).expect("consistent shape")
}
