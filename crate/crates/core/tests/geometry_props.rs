mod common;

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use voxlang::geometry::{load_pointcloud, save_pointcloud, voxelize, PointCloud};

fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut r = rng(seed);
    let pos = (0..n).map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(0.0..0.5)]).collect();
    let col = (0..n).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
    let sem = (0..n).map(|_| r.gen_range(0..4)).collect();
    PointCloud::new(pos, col).unwrap().with_labels(sem, None).unwrap()
}

#[test]
fn revoxelizing_centers_is_idempotent_on_1000_points() {
    let pc = random_cloud(1000, 1);
    let g = voxelize(&pc, 0.05).unwrap();
    let centers = PointCloud::new(g.centers(), vec![[0.5; 3]; g.len()]).unwrap();
    assert_eq!(voxelize(&centers, 0.05).unwrap().coords, g.coords);
}

#[test]
fn point_cloud_file_roundtrip_with_labels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cloud.upc");
    let pc = random_cloud(256, 2);
    save_pointcloud(&pc, &path).unwrap();
    assert_eq!(load_pointcloud(&path).unwrap(), pc);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn features_conserve_color_mass(n in 1usize..400, seed in any::<u64>(), size in 0.01f64..0.4) {
        let pc = random_cloud(n, seed);
        let g = voxelize(&pc, size).unwrap();
        prop_assert_eq!(g.counts.iter().sum::<usize>(), n);
        for k in 0..3 {
            let points: f64 = pc.colors.iter().map(|c| c[k]).sum();
            let voxels: f64 = (0..g.len()).map(|v| g.features.at(v, k) * g.counts[v] as f64).sum();
            prop_assert!((points - voxels).abs() < 1e-9);
        }
    }

    #[test]
    fn finer_grids_never_have_fewer_voxels(n in 1usize..400, seed in any::<u64>(), size in 0.02f64..0.4) {
        let pc = random_cloud(n, seed);
        prop_assert!(voxelize(&pc, size / 2.0).unwrap().len() >= voxelize(&pc, size).unwrap().len());
    }

    #[test]
    fn uniform_voxels_keep_their_label(n in 1usize..200, seed in any::<u64>(), size in 0.05f64..0.5) {
        let pc = random_cloud(n, seed);
        let g = voxelize(&pc, size).unwrap();
        let sem = g.semantic.as_ref().unwrap();
        let labels = pc.semantic.as_ref().unwrap();
        for v in 0..g.len() {
            let inside: Vec<u32> = (0..n).filter(|&i| g.point_to_voxel[i] == v).map(|i| labels[i]).collect();
            if inside.iter().all(|&l| l == inside[0]) {
                prop_assert_eq!(sem[v], inside[0]);
            }
        }
    }
}
