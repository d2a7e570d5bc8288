mod common;

use std::rc::Rc;

use common::{dense_conv3, random_tensor, rng};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use voxlang::sparse::{build_kernel_map, sparse_conv, Coord, CoordSet, EncoderConfig, SparseUNet, SparseVoxelTensor, Window};
use voxlang::tensor::{central_difference, relative_error, ParamGrads, ParamStore};
use voxlang::{Tape, Tensor};

fn block_coords(d: i32) -> Vec<Coord> {
    let mut out = Vec::new();
    for x in 0..d {
        for y in 0..d {
            for z in 0..d {
                out.push([0, x, y, z]);
            }
        }
    }
    out
}

fn conv(coords: &[Coord], x: &Tensor, w: &Tensor) -> Tensor {
    let set = Rc::new(CoordSet::new(coords.to_vec()).unwrap());
    let map = build_kernel_map(&set, &set, Window::CUBE3, 1);
    let tape = Tape::new();
    let input = SparseVoxelTensor {
        stride: 1,
        coords: Rc::clone(&set),
        features: tape.constant(x.clone()),
    };
    let y = sparse_conv(&input, tape.constant(w.clone()), &map, set, 1).unwrap();
    (*y.features.value()).clone()
}

fn random_sparse(n: usize, extent: i32, seed: u64) -> Vec<Coord> {
    let mut r = rng(seed);
    let mut set = std::collections::BTreeSet::new();
    while set.len() < n {
        set.insert([0, r.gen_range(0..extent), r.gen_range(0..extent), r.gen_range(0..extent)]);
    }
    set.into_iter().collect()
}

fn encoder(seed: u64) -> (SparseUNet, ParamStore) {
    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        in_channels: 3,
        channels: vec![4, 6, 8],
        res_blocks: 1,
        hidden_dim: 5,
    };
    let net = SparseUNet::new(&mut store, "enc", cfg, &mut rng(seed)).unwrap();
    (net, store)
}

/// Per stage, its stride and features keyed by coordinate.
type Stages = Vec<(i32, Vec<(Coord, Vec<f64>)>)>;

fn encode(net: &SparseUNet, store: &ParamStore, coords: &[Coord], feats: &Tensor) -> Stages {
    let tape = Tape::new();
    let set = Rc::new(CoordSet::new(coords.to_vec()).unwrap());
    let out = net.forward(&tape, store, set, tape.constant(feats.clone())).unwrap();
    out.stages
        .iter()
        .map(|s| {
            let f = s.features.value();
            let mut rows: Vec<(Coord, Vec<f64>)> =
                s.coords.coords().iter().enumerate().map(|(i, c)| (*c, f.row(i).to_vec())).collect();
            rows.sort_by_key(|a| a.0);
            (s.stride, rows)
        })
        .collect()
}

#[test]
fn dense_4_block_equals_dense_convolution() {
    let coords = block_coords(4);
    let mut r = rng(1);
    let x = random_tensor(&[64, 3], &mut r);
    let w = random_tensor(&[27, 3, 2], &mut r);
    let got = conv(&coords, &x, &w);
    let rows: Vec<Vec<f64>> = (0..64).map(|i| x.row(i).to_vec()).collect();
    let want = dense_conv3(&rows, 4, &w, &Window::CUBE3.offsets(), 2);
    for (i, row) in want.iter().enumerate() {
        for (a, b) in got.row(i).iter().zip(row) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn stride_two_corner_map_equals_dense_strided_convolution() {
    let d = 4;
    let coords = block_coords(d);
    let fine = Rc::new(CoordSet::new(coords.clone()).unwrap());
    let coarse = Rc::new(fine.downsample());
    let map = build_kernel_map(&fine, &coarse, Window::CORNER2, 2);
    let mut r = rng(2);
    let x = random_tensor(&[coords.len(), 2], &mut r);
    let w = random_tensor(&[8, 2, 3], &mut r);
    let tape = Tape::new();
    let input = SparseVoxelTensor {
        stride: 1,
        coords: Rc::clone(&fine),
        features: tape.constant(x.clone()),
    };
    let y = sparse_conv(&input, tape.constant(w.clone()), &map, Rc::clone(&coarse), 2).unwrap();
    let y = y.features.value();
    let offsets = Window::CORNER2.offsets();
    for (o, c) in coarse.coords().iter().enumerate() {
        for b in 0..3 {
            let mut want = 0.0;
            for (k, off) in offsets.iter().enumerate() {
                let p = [0, 2 * c[1] + off[0], 2 * c[2] + off[1], 2 * c[3] + off[2]];
                let i = fine.get(&p).unwrap();
                for a in 0..2 {
                    want += x.at(i, a) * w.data()[(k * 2 + a) * 3 + b];
                }
            }
            assert!((y.at(o, b) - want).abs() < 1e-9);
        }
    }
}

#[test]
fn two_distant_clusters_do_not_interact() {
    let (net, store) = encoder(3);
    let a = random_sparse(20, 4, 4);
    let b: Vec<Coord> = random_sparse(20, 4, 5).iter().map(|c| [0, c[1] + 512, c[2], c[3]]).collect();
    let coords = [a, b].concat();
    let mut r = rng(6);
    let feats = random_tensor(&[40, 3], &mut r);
    let mut changed = feats.clone();
    for i in 20..40 {
        changed.row_mut(i).copy_from_slice(&[0.9, 0.9, 0.1]);
    }
    let before = encode(&net, &store, &coords, &feats);
    let after = encode(&net, &store, &coords, &changed);
    for ((_, s0), (_, s1)) in before.iter().zip(&after) {
        for (r0, r1) in s0.iter().zip(s1).filter(|(r, _)| r.0[1] < 64) {
            assert_eq!(r0, r1);
        }
        assert!(s0.iter().zip(s1).any(|(r0, r1)| r0 != r1), "cluster B must react to its own colors");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn random_blocks_match_dense_oracle(d in 4i32..=6, cin in 1usize..4, cout in 1usize..4, seed in any::<u64>()) {
        let coords = block_coords(d);
        let mut r = rng(seed);
        let x = random_tensor(&[coords.len(), cin], &mut r);
        let w = random_tensor(&[27, cin, cout], &mut r);
        let got = conv(&coords, &x, &w);
        let rows: Vec<Vec<f64>> = (0..coords.len()).map(|i| x.row(i).to_vec()).collect();
        let want = dense_conv3(&rows, d, &w, &Window::CUBE3.offsets(), cout);
        for (i, row) in want.iter().enumerate() {
            for (a, b) in got.row(i).iter().zip(row) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn conv_is_equivariant_to_order_and_translation(n in 2usize..40, seed in any::<u64>(), shift in prop::array::uniform3(-50i32..50)) {
        let coords = random_sparse(n, 5, seed);
        let mut r = rng(seed ^ 1);
        let x = random_tensor(&[n, 2], &mut r);
        let w = random_tensor(&[27, 2, 3], &mut r);
        let base = conv(&coords, &x, &w);

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let pc: Vec<Coord> = perm.iter().map(|&i| coords[i]).collect();
        let px = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let permuted = conv(&pc, &px, &w);
        for (j, &i) in perm.iter().enumerate() {
            for (a, b) in permuted.row(j).iter().zip(base.row(i)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        let moved: Vec<Coord> = coords.iter().map(|c| [0, c[1] + shift[0], c[2] + shift[1], c[3] + shift[2]]).collect();
        let shifted = conv(&moved, &x, &w);
        for (a, b) in shifted.data().iter().zip(base.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn encoder_is_equivariant_to_order_and_aligned_translation(n in 2usize..30, seed in any::<u64>(), shift in prop::array::uniform3(-8i32..8)) {
        // with three stages, translations must be multiples of 4 to keep the
        // stride-2 groupings
        let shift = shift.map(|s| 4 * s);
        let (net, store) = encoder(seed);
        let coords = random_sparse(n, 6, seed);
        let mut r = rng(seed ^ 2);
        let feats = random_tensor(&[n, 3], &mut r);
        let base = encode(&net, &store, &coords, &feats);

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let pc: Vec<Coord> = perm.iter().map(|&i| coords[i]).collect();
        let pf = Tensor::from_rows(&perm.iter().map(|&i| feats.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let permuted = encode(&net, &store, &pc, &pf);
        for ((_, s0), (_, s1)) in base.iter().zip(&permuted) {
            for (r0, r1) in s0.iter().zip(s1) {
                prop_assert_eq!(r0.0, r1.0);
                for (a, b) in r0.1.iter().zip(&r1.1) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }

        let moved: Vec<Coord> = coords.iter().map(|c| [0, c[1] + shift[0], c[2] + shift[1], c[3] + shift[2]]).collect();
        let shifted = encode(&net, &store, &moved, &feats);
        for ((stride, s0), (_, s1)) in base.iter().zip(&shifted) {
            for (r0, r1) in s0.iter().zip(s1) {
                let c = r0.0;
                let want = [0, c[1] + shift[0] / stride, c[2] + shift[1] / stride, c[3] + shift[2] / stride];
                prop_assert_eq!(r1.0, want);
                for (a, b) in r0.1.iter().zip(&r1.1) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn conv_weight_gradient_matches_finite_differences(n in 3usize..25, seed in any::<u64>()) {
        let coords = random_sparse(n, 4, seed);
        let set = Rc::new(CoordSet::new(coords).unwrap());
        let map = build_kernel_map(&set, &set, Window::CUBE3, 1);
        let mut r = rng(seed ^ 3);
        let x = random_tensor(&[n, 2], &mut r);
        let probe = random_tensor(&[n, 2], &mut r);
        let mut store = ParamStore::new();
        let wid = store.register("w", random_tensor(&[27, 2, 2], &mut r));
        let mut f = |s: &ParamStore| -> voxlang::Result<f64> {
            let tape = Tape::new();
            let input = SparseVoxelTensor { stride: 1, coords: Rc::clone(&set), features: tape.constant(x.clone()) };
            let y = sparse_conv(&input, tape.param(s, wid), &map, Rc::clone(&set), 1)?;
            Ok(y.features.mul(tape.constant(probe.clone()))?.sum()?.value().item())
        };
        let tape = Tape::new();
        let input = SparseVoxelTensor { stride: 1, coords: Rc::clone(&set), features: tape.constant(x.clone()) };
        let y = sparse_conv(&input, tape.param(&store, wid), &map, Rc::clone(&set), 1).unwrap();
        let loss = y.features.mul(tape.constant(probe.clone())).unwrap().sum().unwrap();
        let mut g = ParamGrads::new(&store);
        tape.backward(loss).unwrap().accumulate_params(&mut g);
        let analytic = g.get(wid).unwrap().clone();
        for i in 0..analytic.numel() {
            let numeric = central_difference(&mut store, wid, i, 1e-5, &mut f).unwrap();
            prop_assert!(relative_error(analytic.data()[i], numeric, 1e-3) < 1e-4);
        }
    }
}
