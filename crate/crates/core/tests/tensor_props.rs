mod common;

use std::rc::Rc;

use common::{random_tensor, rng};
use proptest::prelude::*;
use voxlang::tensor::{central_difference, relative_error, KernelTriples, ParamGrads, ParamStore};
use voxlang::{Result, Tape, Tensor, Var};

type Op = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

struct Case {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    linear: bool,
    positive: bool,
    op: Op,
}

fn cases() -> Vec<Case> {
    vec![
        Case { name: "matmul", shapes: &[&[3, 4], &[4, 2]], linear: true, positive: false, op: |_, v| v[0].matmul(v[1]) },
        Case { name: "matmul_t", shapes: &[&[3, 4], &[5, 4]], linear: true, positive: false, op: |_, v| v[0].matmul_t(v[1]) },
        Case { name: "transpose", shapes: &[&[3, 4]], linear: true, positive: false, op: |_, v| v[0].t() },
        Case { name: "add", shapes: &[&[3, 4], &[3, 4]], linear: true, positive: false, op: |_, v| v[0].add(v[1]) },
        Case { name: "sub", shapes: &[&[3, 4], &[3, 4]], linear: true, positive: false, op: |_, v| v[0].sub(v[1]) },
        Case { name: "mul", shapes: &[&[3, 4], &[3, 4]], linear: false, positive: false, op: |_, v| v[0].mul(v[1]) },
        Case { name: "add_row", shapes: &[&[3, 4], &[1, 4]], linear: true, positive: false, op: |_, v| v[0].add_row(v[1]) },
        Case { name: "mul_row", shapes: &[&[3, 4], &[1, 4]], linear: false, positive: false, op: |_, v| v[0].mul_row(v[1]) },
        Case { name: "scale", shapes: &[&[3, 4]], linear: true, positive: false, op: |_, v| v[0].scale(-1.7) },
        Case { name: "add_scalar", shapes: &[&[3, 4]], linear: true, positive: false, op: |_, v| v[0].add_scalar(0.3) },
        Case { name: "scale_by", shapes: &[&[3, 4], &[]], linear: false, positive: false, op: |_, v| v[0].scale_by(v[1]) },
        Case { name: "exp", shapes: &[&[3, 4]], linear: false, positive: false, op: |_, v| v[0].exp() },
        Case { name: "log", shapes: &[&[3, 4]], linear: false, positive: true, op: |_, v| v[0].log() },
        Case { name: "sigmoid", shapes: &[&[3, 4]], linear: false, positive: false, op: |_, v| v[0].sigmoid() },
        Case { name: "relu", shapes: &[&[3, 4]], linear: false, positive: false, op: |_, v| v[0].relu() },
        Case { name: "softmax_rows", shapes: &[&[3, 4]], linear: false, positive: false, op: |_, v| v[0].softmax_rows(None) },
        Case {
            name: "softmax_masked",
            shapes: &[&[2, 3]],
            linear: false,
            positive: false,
            op: |_, v| v[0].softmax_rows(Some(&[true, false, true, false, true, true])),
        },
        Case { name: "softmax_cols", shapes: &[&[3, 4]], linear: false, positive: false, op: |_, v| v[0].softmax(0) },
        Case { name: "layer_norm", shapes: &[&[3, 5]], linear: false, positive: false, op: |_, v| v[0].layer_norm(1e-5) },
        Case { name: "slice_rows", shapes: &[&[4, 3]], linear: true, positive: false, op: |_, v| v[0].slice_rows(1, 3) },
        Case { name: "slice_cols", shapes: &[&[4, 3]], linear: true, positive: false, op: |_, v| v[0].slice_cols(1, 3) },
        Case { name: "gather_rows", shapes: &[&[4, 3]], linear: true, positive: false, op: |_, v| v[0].gather_rows(&[2, 0, 2]) },
        Case { name: "reshape", shapes: &[&[4, 3]], linear: true, positive: false, op: |_, v| v[0].reshape(vec![2, 6]) },
        Case { name: "mean", shapes: &[&[4, 3]], linear: true, positive: false, op: |_, v| v[0].mean() },
        Case { name: "sum_rows", shapes: &[&[4, 3]], linear: true, positive: false, op: |_, v| v[0].sum_rows() },
        Case { name: "mean_rows", shapes: &[&[4, 3]], linear: true, positive: false, op: |_, v| v[0].mean_rows() },
        Case {
            name: "concat_rows",
            shapes: &[&[2, 3], &[1, 3]],
            linear: true,
            positive: false,
            op: |t, v| t.concat_rows(&[v[0], v[1]]),
        },
        Case {
            name: "concat_cols",
            shapes: &[&[2, 3], &[2, 1]],
            linear: true,
            positive: false,
            op: |t, v| t.concat_cols(&[v[0], v[1]]),
        },
        Case {
            name: "cross_entropy",
            shapes: &[&[3, 4]],
            linear: false,
            positive: false,
            op: |_, v| v[0].cross_entropy(&[Some(1), None, Some(3)], Some(&[0.5, 1.0, 2.0])),
        },
        Case {
            name: "bce_with_logits",
            shapes: &[&[2, 3]],
            linear: false,
            positive: false,
            op: |_, v| v[0].bce_with_logits(&Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap()),
        },
        Case {
            name: "dice_with_logits",
            shapes: &[&[2, 3]],
            linear: false,
            positive: false,
            op: |_, v| v[0].dice_with_logits(&Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap(), 1e-6),
        },
        Case { name: "normalize_rows", shapes: &[&[3, 4]], linear: false, positive: false, op: |_, v| v[0].normalize_rows() },
        Case {
            name: "sparse_conv",
            shapes: &[&[3, 2], &[2, 2, 3]],
            linear: false,
            positive: false,
            op: |_, v| {
                let map = KernelTriples {
                    n_in: 3,
                    n_out: 2,
                    n_offsets: 2,
                    triples: vec![(0, 0, 0), (1, 0, 1), (2, 1, 0), (1, 1, 0)],
                };
                v[0].sparse_conv(v[1], Rc::new(map))
            },
        },
    ]
}

/// `Σ out ⊙ R` for a fixed random `R`, so that gradients of row-normalized
/// outputs are not trivially zero.
fn probe<'t>(tape: &'t Tape, out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let r = random_tensor(&out.shape(), &mut rng(seed));
    out.mul(tape.constant(r))?.sum()
}

fn inputs(case: &Case, seed: u64) -> ParamStore {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    for (i, shape) in case.shapes.iter().enumerate() {
        let mut t = random_tensor(shape, &mut r);
        if case.positive {
            t = t.map(|v| 0.5 + v.abs());
        }
        if case.name == "relu" {
            // keep entries away from the kink
            t = t.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        }
        store.register(format!("in{i}"), t);
    }
    store
}

fn eval(case: &Case, store: &ParamStore, seed: u64) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var> = store.ids().map(|id| tape.param(store, id)).collect();
    Ok(probe(&tape, (case.op)(&tape, &vars)?, seed)?.value().item())
}

fn check(case: &Case, seed: u64) -> f64 {
    let mut store = inputs(case, seed);
    let tape = Tape::new();
    let vars: Vec<Var> = store.ids().map(|id| tape.param(&store, id)).collect();
    let loss = probe(&tape, (case.op)(&tape, &vars).unwrap(), seed ^ 0xfeed).unwrap();
    let mut grads = ParamGrads::new(&store);
    tape.backward(loss).unwrap().accumulate_params(&mut grads);
    let mut worst: f64 = 0.0;
    for id in store.ids().collect::<Vec<_>>() {
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for i in 0..analytic.numel() {
            let mut f = |s: &ParamStore| eval(case, s, seed ^ 0xfeed);
            let numeric = central_difference(&mut store, id, i, 1e-5, &mut f).unwrap();
            worst = worst.max(relative_error(analytic.data()[i], numeric, 1e-3));
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>()) {
        for case in cases() {
            let err = check(&case, seed);
            let tol = if case.linear { 1e-5 } else { 1e-4 };
            prop_assert!(err < tol, "{}: relative error {err:e}", case.name);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), spread in 0.1f64..50.0) {
        let tape = Tape::new();
        let x = random_tensor(&[rows, cols], &mut rng(seed)).map(|v| v * spread);
        let s = tape.constant(x).softmax_rows(None).unwrap().value();
        for r in 0..rows {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sigmoid_stays_in_open_interval(x in -30.0f64..30.0) {
        let tape = Tape::new();
        let y = tape.constant(Tensor::scalar(x)).sigmoid().unwrap().value().item();
        prop_assert!(y > 0.0 && y < 1.0);
    }
}

#[test]
fn matmul_gradient_matches_finite_difference_at_h_1e5() {
    let case = &cases()[0];
    assert!(check(case, 3) < 1e-5);
}

#[test]
fn identical_inputs_give_bit_identical_values_and_grads() {
    let run = || {
        let mut r = rng(5);
        let mut store = ParamStore::new();
        let a = store.register("a", random_tensor(&[4, 6], &mut r));
        let b = store.register("b", random_tensor(&[6, 3], &mut r));
        let tape = Tape::new();
        let y = tape.param(&store, a).matmul(tape.param(&store, b)).unwrap();
        let loss = y.layer_norm(1e-5).unwrap().softmax_rows(None).unwrap().log().unwrap().sum().unwrap();
        let mut g = ParamGrads::new(&store);
        tape.backward(loss).unwrap().accumulate_params(&mut g);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        (loss.value().item().to_bits(), bits(g.get(a).unwrap()), bits(g.get(b).unwrap()))
    };
    assert_eq!(run(), run());
}
