mod common;

use common::{brute_force_assignment, head_gradients, random_tensor, rng};
use proptest::prelude::*;
use rand::Rng;
use voxlang::router::losses::{
    caption_logits, classify, grounding_logits, grounding_similarity, loss_caption, loss_cls, loss_contrastive, loss_grounding,
    loss_mask, matching_logits, predict_masks,
};
use voxlang::router::{assignment_cost, hungarian, infer_semantic, InstancePrediction, LossWeights, Task};
use voxlang::model::argmax;
use voxlang::{Tape, Tensor};

/// `-ln softmax(row)[target]`, written out directly.
fn ce(row: &[f64], target: usize) -> f64 {
    let z: f64 = row.iter().map(|v| v.exp()).sum();
    z.ln() - row[target]
}

fn unit_weights() -> LossWeights {
    LossWeights {
        cls: 1.0,
        bce: 1.0,
        dice: 1.0,
        gc: 1.0,
        cap: 1.0,
        ret: 1.0,
        background: 1.0,
    }
}

#[test]
fn each_task_trains_exactly_its_heads() {
    for task in Task::ALL {
        let comp = task.heads();
        for (head, g) in head_gradients(task) {
            if comp.uses(head) {
                assert!(g > 0.0, "{task}: {head:?} received no gradient");
            } else {
                assert_eq!(g, 0.0, "{task}: {head:?} must stay untouched");
            }
        }
    }
}

#[test]
fn two_query_classification_loss_matches_hand_cross_entropy() {
    let tape = Tape::new();
    let rows = vec![vec![1.0, -0.5, 0.2], vec![0.3, 0.9, -1.1]];
    let logits = tape.constant(Tensor::from_rows(&rows).unwrap());
    let w = LossWeights { background: 0.1, ..unit_weights() };
    // query 0 matched to class 1, query 1 unmatched (background = column 2)
    let got = loss_cls(logits, &[Some(1), None], &w).unwrap().value().item();
    let want = (1.0 * ce(&rows[0], 1) + 0.1 * ce(&rows[1], 2)) / 1.1;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn dice_of_half_overlap_is_one_third() {
    let tape = Tape::new();
    let logits = tape.constant(Tensor::from_rows(&[vec![40.0, -40.0]]).unwrap());
    let gt = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
    let w = LossWeights { bce: 0.0, ..unit_weights() };
    let got = loss_mask(logits, &[(0, 0)], &gt, &w).unwrap().value().item();
    let want = 1.0 - 2.0 / (1.0 + 2.0 + 1e-6);
    assert!((got - want).abs() < 1e-12);
    assert!((got - 1.0 / 3.0).abs() < 1e-6);
}

#[test]
fn caption_loss_matches_hand_cross_entropy_and_skips_pad() {
    let tape = Tape::new();
    let rows = vec![vec![0.1, 0.2, 0.3, 0.4, 0.5], vec![1.0, 0.0, -1.0, 0.5, 2.0], vec![0.0; 5]];
    let logits = tape.constant(Tensor::from_rows(&rows).unwrap());
    let got = loss_caption(logits, &[4, 2, 0], &unit_weights()).unwrap().value().item();
    let want = (ce(&rows[0], 4) + ce(&rows[1], 2)) / 2.0;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn contrastive_loss_matches_hand_symmetric_cross_entropy() {
    let mut r = rng(4);
    let shapes = random_tensor(&[3, 5], &mut r);
    let texts = random_tensor(&[3, 5], &mut r);
    let tape = Tape::new();
    let scale = 0.7f64;
    let logits = matching_logits(tape.constant(shapes.clone()), tape.constant(texts.clone()), tape.constant(Tensor::scalar(scale))).unwrap();
    let got = loss_contrastive(logits, &unit_weights()).unwrap().value().item();
    let norm = |t: &Tensor, i: usize| {
        let n = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        t.row(i).iter().map(|v| v / n).collect::<Vec<_>>()
    };
    let mut s = vec![vec![0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            s[i][j] = norm(&shapes, i).iter().zip(norm(&texts, j)).map(|(a, b)| a * b).sum::<f64>() * scale.exp();
        }
    }
    let cols: Vec<Vec<f64>> = (0..3).map(|j| (0..3).map(|i| s[i][j]).collect()).collect();
    let want = 0.5 * ((0..3).map(|i| ce(&s[i], i)).sum::<f64>() / 3.0 + (0..3).map(|j| ce(&cols[j], j)).sum::<f64>() / 3.0);
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn mask_prediction_is_a_plain_dot_product() {
    let mut r = rng(5);
    let embed = random_tensor(&[5, 6], &mut r);
    let points = random_tensor(&[100, 6], &mut r);
    let tape = Tape::new();
    let m = predict_masks(tape.constant(embed.clone()), tape.constant(points.clone()), 4).unwrap().value();
    assert_eq!(m.shape(), &[4, 100]);
    for q in 0..4 {
        for v in 0..100 {
            let mut d = 0.0;
            for c in 0..6 {
                d += embed.at(q, c) * points.at(v, c);
            }
            assert!((m.at(q, v) - d).abs() < 1e-12);
        }
    }
}

#[test]
fn grounding_total_is_the_sum_of_its_terms_and_gradients_add() {
    let mut r = rng(6);
    let tape = Tape::new();
    let t_emb = tape.leaf(random_tensor(&[2, 4], &mut r));
    let sem = tape.leaf(random_tensor(&[3, 4], &mut r));
    let cat = tape.leaf(random_tensor(&[2, 2], &mut r));
    let masks = tape.leaf(random_tensor(&[3, 6], &mut r));
    let gt = Tensor::from_rows(&[vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]]).unwrap();
    let cat_gt = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let logits = grounding_logits(t_emb, sem, tape.constant(Tensor::scalar(0.0))).unwrap();
    let w = LossWeights::default();
    let g = loss_grounding(logits, &[2, 0], cat, &cat_gt, masks, &[(2, 0), (0, 1)], &gt, &w).unwrap();
    let total = g.total().unwrap();
    let sum = g.similarity.value().item() + g.category.value().item() + g.mask.value().item();
    assert!((total.value().item() - sum).abs() < 1e-12);

    let grads_total = tape.backward(total).unwrap();
    let parts: Vec<_> = [g.similarity, g.category, g.mask].iter().map(|&p| tape.backward(p).unwrap()).collect();
    for v in [t_emb, sem, cat, masks] {
        let whole = grads_total.wrt(v).unwrap();
        for i in 0..whole.numel() {
            let s: f64 = parts.iter().map(|p| p.wrt(v).map_or(0.0, |t| t.data()[i])).sum();
            assert!((whole.data()[i] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn overlapping_instances_resolve_by_score() {
    let inst = |class, score, mask: [bool; 4]| InstancePrediction { class, score, mask: mask.to_vec() };
    let a = inst(0, 0.6, [true, true, true, false]);
    let b = inst(1, 0.9, [false, true, true, true]);
    assert_eq!(infer_semantic(&[a.clone(), b.clone()], 4, 2), vec![0, 1, 1, 1]);
    assert_eq!(infer_semantic(&[b, a], 4, 2), vec![0, 1, 1, 1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn hungarian_is_optimal(n in 1usize..=7, m in 1usize..=7, seed in any::<u64>(), integer in any::<bool>()) {
        let mut r = rng(seed);
        let data: Vec<f64> = (0..n * m).map(|_| if integer { f64::from(r.gen_range(0..5)) } else { r.gen_range(-1.0..1.0) }).collect();
        let cost = Tensor::new(vec![n, m], data).unwrap();
        let res = hungarian(&cost).unwrap();
        prop_assert_eq!(res.pairs.len(), n.min(m));
        let best = brute_force_assignment(&cost);
        prop_assert!((assignment_cost(&cost, &res.pairs) - best).abs() < 1e-12);
    }

    #[test]
    fn grounding_rows_are_distributions_and_shift_invariant(seed in any::<u64>(), shift in -5.0f64..5.0) {
        let mut r = rng(seed);
        let tape = Tape::new();
        let t = tape.constant(random_tensor(&[3, 4], &mut r));
        let o = tape.constant(random_tensor(&[5, 4], &mut r));
        let eta = tape.constant(Tensor::scalar(r.gen_range(-1.0..1.0)));
        let logits = grounding_logits(t, o, eta).unwrap();
        let s = grounding_similarity(logits).unwrap().value();
        let shifted = grounding_similarity(logits.add_scalar(shift).unwrap()).unwrap().value();
        for row in 0..3 {
            prop_assert!((s.row(row).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert_eq!(argmax(s.row(row)), argmax(shifted.row(row)));
            prop_assert_eq!(argmax(s.row(row)), argmax(logits.value().row(row)));
        }
    }

    #[test]
    fn contrastive_loss_is_symmetric_in_shapes_and_texts(b in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let tape = Tape::new();
        let s = tape.constant(random_tensor(&[b, 4], &mut r));
        let t = tape.constant(random_tensor(&[b, 4], &mut r));
        let scale = tape.constant(Tensor::scalar(1.0));
        let w = LossWeights::default();
        let st = loss_contrastive(matching_logits(s, t, scale).unwrap(), &w).unwrap().value().item();
        let ts = loss_contrastive(matching_logits(t, s, scale).unwrap(), &w).unwrap().value().item();
        prop_assert!((st - ts).abs() < 1e-12);
    }

    #[test]
    fn class_argmax_ignores_positive_row_scaling(seed in any::<u64>(), k in 0.01f64..100.0) {
        let mut r = rng(seed);
        let tape = Tape::new();
        let sem = random_tensor(&[3, 4], &mut r);
        let emb = tape.constant(random_tensor(&[3, 4], &mut r));
        let a = classify(tape.constant(sem.clone()), emb).unwrap().value();
        let b = classify(tape.constant(sem.map(|v| v * k)), emb).unwrap().value();
        for row in 0..3 {
            prop_assert_eq!(argmax(a.row(row)), argmax(b.row(row)));
        }
    }

    #[test]
    fn caption_logits_score_every_vocabulary_entry(l in 1usize..5, v in 2usize..9, seed in any::<u64>()) {
        let mut r = rng(seed);
        let tape = Tape::new();
        let t = random_tensor(&[l, 3], &mut r);
        let table = random_tensor(&[v, 3], &mut r);
        let s = caption_logits(tape.constant(t.clone()), tape.constant(table.clone())).unwrap().value();
        prop_assert_eq!(s.shape(), &[l, v]);
        for i in 0..l {
            for j in 0..v {
                let d: f64 = t.row(i).iter().zip(table.row(j)).map(|(a, b)| a * b).sum();
                prop_assert!((s.at(i, j) - d).abs() < 1e-12);
            }
        }
    }
}
