//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxlang::geometry::{voxelize, PointCloud};
use voxlang::harness::{Config, Preset};
use voxlang::model::{Model, Referral, SceneSample, ShapeSample};
use voxlang::tensor::ParamStore;
use voxlang::text::Vocabulary;
use voxlang::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Width 16, 4 object queries, 2 decoder layers, 2 encoder stages.
pub fn toy_config() -> Config {
    let mut c = Config::preset(Preset::Desk);
    c.apply_text(
        "model.dim = 16
         encoder.channels = 8,12
         text.layers = 1
         text.heads = 2
         text.ffn_dim = 32
         decoder.layers = 2
         decoder.heads = 2
         decoder.ffn_dim = 32
         decoder.queries = 4
         decoder.samples = 16",
        "toy",
    )
    .unwrap();
    c
}

pub const TOY_CLASSES: [&str; 2] = ["box", "ball"];
pub const TOY_CAPTIONS: [&str; 2] = ["a red box", "a blue ball"];
pub const TOY_REFERRALS: [&str; 2] = ["the red box", "the blue ball"];

pub fn toy_vocab() -> Vocabulary {
    let mut corpus: Vec<&str> = TOY_CLASSES.to_vec();
    corpus.push("background");
    corpus.extend(TOY_CAPTIONS);
    corpus.extend(TOY_REFERRALS);
    Vocabulary::build(&corpus, None).unwrap()
}

pub fn toy_model(seed: u64) -> (Model, ParamStore) {
    let classes = TOY_CLASSES.iter().map(|s| s.to_string()).collect();
    Model::new(toy_config().model, toy_vocab(), classes, seed).unwrap()
}

/// One point at the center of every cell of an `nx × ny × nz` block whose
/// lowest cell is `origin`, at voxel size `size`.
pub fn block_points(origin: [i32; 3], dims: [i32; 3], size: f64) -> Vec<[f64; 3]> {
    let mut out = Vec::new();
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let c = [origin[0] + x, origin[1] + y, origin[2] + z];
                out.push(c.map(|v| (f64::from(v) + 0.5) * size));
            }
        }
    }
    out
}

/// Two 3×3×2 blocks (36 voxels), a red box and a blue ball, with one referral each.
pub fn toy_scene() -> SceneSample {
    let size = 0.02;
    let a = block_points([0, 0, 0], [3, 3, 2], size);
    let b = block_points([5, 1, 0], [3, 3, 2], size);
    let mut r = rng(11);
    let mut colors = Vec::new();
    for _ in &a {
        colors.push([0.9, 0.1 + 0.1 * r.gen::<f64>(), 0.1]);
    }
    for _ in &b {
        colors.push([0.1, 0.2 * r.gen::<f64>(), 0.9]);
    }
    let sem: Vec<u32> = a.iter().map(|_| 0).chain(b.iter().map(|_| 1)).collect();
    let inst: Vec<u32> = a.iter().map(|_| 0).chain(b.iter().map(|_| 1)).collect();
    let positions = [a, b].concat();
    let cloud = PointCloud::new(positions, colors).unwrap().with_labels(sem, Some(inst)).unwrap();
    let grid = voxelize(&cloud, size).unwrap();
    let referrals = vec![
        Referral {
            sentence: TOY_REFERRALS[0].into(),
            target: 0,
            categories: vec![0],
        },
        Referral {
            sentence: TOY_REFERRALS[1].into(),
            target: 1,
            categories: vec![1],
        },
    ];
    SceneSample::from_grid("toy", grid, 2, referrals).unwrap()
}

/// Two small shapes matching the toy captions.
pub fn toy_shapes() -> Vec<ShapeSample> {
    let size = 0.08;
    let mut out = Vec::new();
    for (i, dims) in [[3, 3, 2], [2, 2, 4]].into_iter().enumerate() {
        let pts = block_points([0, 0, 0], dims, size);
        let color = if i == 0 { [0.9, 0.1, 0.1] } else { [0.1, 0.1, 0.9] };
        let colors = pts.iter().map(|_| color).collect();
        let cloud = PointCloud::new(pts, colors).unwrap();
        out.push(ShapeSample {
            name: format!("shape{i}"),
            grid: voxelize(&cloud, size).unwrap(),
            class: i,
            caption: TOY_CAPTIONS[i].into(),
        });
    }
    out
}

/// Dense 3D convolution oracle over a zero-padded `d × d × d` block.
/// `x[cell][c]` is indexed by `(x·d + y)·d + z`; `w` is `[27][cin][cout]`
/// in the same offset order as `Window::CUBE3.offsets()`.
pub fn dense_conv3(x: &[Vec<f64>], d: i32, w: &Tensor, offsets: &[[i32; 3]], cout: usize) -> Vec<Vec<f64>> {
    let cin = x[0].len();
    let idx = |p: [i32; 3]| ((p[0] * d + p[1]) * d + p[2]) as usize;
    let inside = |p: [i32; 3]| p.iter().all(|&v| (0..d).contains(&v));
    let mut out = vec![vec![0.0; cout]; x.len()];
    for px in 0..d {
        for py in 0..d {
            for pz in 0..d {
                let o = idx([px, py, pz]);
                for (k, off) in offsets.iter().enumerate() {
                    let q = [px + off[0], py + off[1], pz + off[2]];
                    if !inside(q) {
                        continue;
                    }
                    let xi = &x[idx(q)];
                    for a in 0..cin {
                        for b in 0..cout {
                            out[o][b] += xi[a] * w.data()[(k * cin + a) * cout + b];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Every injective assignment of the smaller side, by exhaustive search.
pub fn brute_force_assignment(cost: &Tensor) -> f64 {
    let (n, m) = (cost.rows(), cost.cols());
    let small = n.min(m);
    let at = |s: usize, l: usize| if n <= m { cost.at(s, l) } else { cost.at(l, s) };
    let mut best = f64::INFINITY;
    let mut used = vec![false; n.max(m)];
    fn rec(s: usize, small: usize, used: &mut [bool], acc: f64, at: &dyn Fn(usize, usize) -> f64, best: &mut f64) {
        if s == small {
            *best = best.min(acc);
            return;
        }
        for l in 0..used.len() {
            if !used[l] {
                used[l] = true;
                rec(s + 1, small, used, acc + at(s, l), at, best);
                used[l] = false;
            }
        }
    }
    rec(0, small, &mut used, 0.0, &at, &mut best);
    best
}

/// All-point interpolated AP of a ranked hit list, computed from the
/// precision envelope over distinct recall levels.
pub fn ap_oracle(hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut points = Vec::new();
    let mut tp = 0;
    for (i, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / (i + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 1..=positives {
        let r = k as f64 / positives as f64;
        let p = points.iter().filter(|(rr, _)| *rr >= r - 1e-12).map(|(_, p)| *p).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Cls,
    Mask,
    Grd,
    Cap,
    Ret,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Cls,
        LossKind::Mask,
        LossKind::Grd,
        LossKind::Cap,
        LossKind::Ret,
        LossKind::Total,
    ];
}

/// Every loss of the toy model, in [`LossKind::ALL`] order, from one pass
/// that reseeds the sampling generator so repeated evaluations see the same
/// voxel samples. The total is the sum of the four task totals.
pub fn toy_losses<'t>(
    model: &Model,
    store: &ParamStore,
    tape: &'t voxlang::Tape,
    scene: &SceneSample,
    shapes: &[ShapeSample],
) -> voxlang::Result<[voxlang::Var<'t>; 6]> {
    use voxlang::router::Task;
    let mut r = rng(99);
    let pair: Vec<&ShapeSample> = shapes.iter().collect();
    let seg = model.segmentation_loss(tape, store, Task::InstanceSeg, scene, &mut r)?;
    let grd = model.grounding_loss(tape, store, scene, &mut r)?;
    let cap = model.caption_loss(tape, store, &shapes[0], &mut r)?;
    let ret = model.retrieval_loss(tape, store, &pair, &mut r)?;
    let total = seg.total(tape)?.add(grd.total(tape)?)?.add(cap.total(tape)?)?.add(ret.total(tape)?)?;
    Ok([seg.cls.unwrap(), seg.mask.unwrap(), grd.grd.unwrap(), cap.cap.unwrap(), ret.ret.unwrap(), total])
}

/// Compares backprop against central differences for every loss on up to
/// `per_tensor` entries of each parameter whose name starts with `prefix`.
/// Each perturbed forward pass serves all six losses.
pub fn toy_grad_check(per_tensor: usize, prefix: &str, h: f64, floor: f64) -> Vec<(LossKind, voxlang::tensor::GradCheckReport)> {
    use rand::seq::index::sample;
    use voxlang::tensor::{GradCheckReport, ParamGrads};
    let (model, mut store) = toy_model(5);
    let scene = toy_scene();
    let shapes = toy_shapes();
    let tape = voxlang::Tape::new();
    let losses = toy_losses(&model, &store, &tape, &scene, &shapes).unwrap();
    let grads: Vec<ParamGrads> = losses
        .iter()
        .map(|&l| {
            let mut g = ParamGrads::new(&store);
            tape.backward(l).unwrap().accumulate_params(&mut g);
            g
        })
        .collect();
    let eval = |s: &ParamStore| {
        let tape = voxlang::Tape::new();
        toy_losses(&model, s, &tape, &scene, &shapes).unwrap().map(|v| v.value().item())
    };
    let mut reports = vec![GradCheckReport::default(); 6];
    let mut pick = rng(17);
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        if !name.starts_with(prefix) {
            continue;
        }
        let n = store.get(id).numel();
        for i in sample(&mut pick, n, per_tensor.min(n)).into_vec() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(&store);
            store.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(&store);
            store.get_mut(id).data_mut()[i] = orig;
            for (k, report) in reports.iter_mut().enumerate() {
                let analytic = grads[k].get(id).map_or(0.0, |g| g.data()[i]);
                report.record(&name, i, analytic, (plus[k] - minus[k]) / (2.0 * h), floor);
            }
        }
    }
    LossKind::ALL.into_iter().zip(reports).collect()
}

/// Perturbs a key/value row that query `r` may not attend to and returns
/// the largest change of that query's output.
pub fn occlusion_probe(seed: u64) -> f64 {
    use voxlang::nn::Attention;
    let mut r = rng(seed);
    let heads = [1, 2, 4][r.gen_range(0..3)];
    let dim = heads * r.gen_range(1..5);
    let (nq, nk) = (r.gen_range(1..6), r.gen_range(2..12));
    let mut store = ParamStore::new();
    let attn = Attention::new(&mut store, "attn", dim, heads, &mut r);
    let q = random_tensor(&[nq, dim], &mut r);
    let kv = random_tensor(&[nk, dim], &mut r);
    let mut admit: Vec<bool> = (0..nq * nk).map(|_| r.gen_bool(0.5)).collect();
    let row = r.gen_range(0..nq);
    let hidden = r.gen_range(0..nk);
    let visible = (hidden + 1 + r.gen_range(0..nk - 1)) % nk;
    admit[row * nk + hidden] = false;
    admit[row * nk + visible] = true;
    for i in 0..nq {
        if !admit[i * nk..(i + 1) * nk].iter().any(|&a| a) {
            admit[i * nk + visible] = true;
        }
    }
    let run = |kv: &Tensor| {
        let tape = voxlang::Tape::new();
        let kv = tape.constant(kv.clone());
        let out = attn.forward(&tape, &store, tape.constant(q.clone()), kv, kv, Some(&admit)).unwrap();
        out.value().row(row).to_vec()
    };
    let before = run(&kv);
    let mut changed = kv.clone();
    for v in changed.row_mut(hidden) {
        *v += r.gen_range(-10.0..10.0);
    }
    let after = run(&changed);
    before.iter().zip(&after).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Whether attention with an all-admit mask is bit-identical to no mask.
pub fn full_mask_matches_unmasked(seed: u64) -> bool {
    use voxlang::nn::Attention;
    let mut r = rng(seed);
    let heads = [1, 2, 4][r.gen_range(0..3)];
    let dim = heads * r.gen_range(1..5);
    let (nq, nk) = (r.gen_range(1..6), r.gen_range(1..12));
    let mut store = ParamStore::new();
    let attn = Attention::new(&mut store, "attn", dim, heads, &mut r);
    let q = random_tensor(&[nq, dim], &mut r);
    let kv = random_tensor(&[nk, dim], &mut r);
    let all = vec![true; nq * nk];
    let tape = voxlang::Tape::new();
    let (qv, kvv) = (tape.constant(q), tape.constant(kv));
    let a = attn.forward(&tape, &store, qv, kvv, kvv, Some(&all)).unwrap().value();
    let b = attn.forward(&tape, &store, qv, kvv, kvv, None).unwrap().value();
    a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Largest dependence of caption positions on later tokens, measured two
/// ways on the toy model: replacing token `j` and comparing logits at
/// positions `< j`, and backprop from position `i` into position
/// embeddings `> i`. Zero means exact causality.
pub fn causality_violation(seed: u64) -> f64 {
    use voxlang::text::TokenSequence;
    use voxlang::tensor::ParamGrads;
    let (model, store) = toy_model(seed);
    let shape = &toy_shapes()[(seed % 2) as usize];
    let mut r = rng(seed);
    let vocab = model.vocab.len();
    let len = r.gen_range(2..=model.config.text.max_len);
    let ids: Vec<usize> = (0..len).map(|_| r.gen_range(1..vocab)).collect();
    let logits = |ids: &[usize]| -> Vec<Tensor> {
        let tape = voxlang::Tape::new();
        let enc = model.encode_grid(&tape, &store, &shape.grid).unwrap();
        let out = model
            .caption_logits(&tape, &store, &enc, &TokenSequence::exact(ids.to_vec()), true, &mut rng(3))
            .unwrap();
        out.iter().map(|v| (*v.value()).clone()).collect()
    };
    let base = logits(&ids);
    let mut worst: f64 = 0.0;
    for j in 1..len {
        let mut alt = ids.clone();
        alt[j] = 1 + (alt[j] % (vocab - 1));
        for (a, b) in base.iter().zip(logits(&alt)) {
            for i in 0..j {
                for (x, y) in a.row(i).iter().zip(b.row(i)) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    for i in 0..len - 1 {
        let tape = voxlang::Tape::new();
        let enc = model.encode_grid(&tape, &store, &shape.grid).unwrap();
        let out = model
            .caption_logits(&tape, &store, &enc, &TokenSequence::exact(ids.clone()), true, &mut rng(3))
            .unwrap();
        let mut loss = out[0].slice_rows(i, i + 1).unwrap().sum().unwrap();
        for o in &out[1..] {
            loss = loss.add(o.slice_rows(i, i + 1).unwrap().sum().unwrap()).unwrap();
        }
        let mut g = ParamGrads::new(&store);
        tape.backward(loss).unwrap().accumulate_params(&mut g);
        let pos = g.get(model.text.positions).unwrap();
        for j in i + 1..len {
            for v in pos.row(j) {
                worst = worst.max(v.abs());
            }
        }
    }
    worst
}

/// Per head, the largest absolute gradient entry any of its parameters
/// receives from one single-task batch of the toy model.
pub fn head_gradients(task: voxlang::router::Task) -> Vec<(voxlang::router::Head, f64)> {
    use voxlang::model::Batch;
    use voxlang::router::Head;
    use voxlang::tensor::ParamGrads;
    let (model, store) = toy_model(8);
    let scene = toy_scene();
    let shapes = toy_shapes();
    let tape = voxlang::Tape::new();
    let scenes = [&scene];
    let pair: Vec<&ShapeSample> = shapes.iter().collect();
    let batch = if task.is_scene_task() { Batch::Scenes(&scenes) } else { Batch::Shapes(&pair) };
    let terms = model.batch_loss(&tape, &store, task, batch, &mut rng(1)).unwrap();
    let mut g = ParamGrads::new(&store);
    tape.backward(terms.total(&tape).unwrap()).unwrap().accumulate_params(&mut g);
    Head::ALL
        .iter()
        .map(|&h| {
            let m = store
                .ids()
                .filter(|&id| store.name(id).starts_with(h.prefix()))
                .map(|id| g.max_abs(id))
                .fold(0.0, f64::max);
            (h, m)
        })
        .collect()
}

fn toks(s: &str) -> Vec<String> {
    voxlang::text::words(s)
}

fn region(n: usize, on: std::ops::Range<usize>) -> Vec<bool> {
    (0..n).map(|i| on.contains(&i)).collect()
}

/// Hand-computed metric values as `(name, computed, expected)`.
pub fn metric_goldens() -> Vec<(&'static str, f64, f64)> {
    use voxlang::metrics::*;
    use voxlang::router::InstancePrediction;

    let mut out = Vec::new();
    out.push(("bleu1 clipped", bleu1(&toks("the the the"), &toks("the cat")), 1.0 / 3.0));
    out.push(("bleu1 brevity", bleu1(&toks("the cat"), &toks("the cat sat on it")), (1.0f64 - 2.5).exp()));
    out.push(("rouge_l", rouge_l(&toks("a b c d"), &toks("a c d")), 2.44 * 0.75 / (1.44 * 0.75 + 1.0)));

    let gt: Vec<GtInstance> = [0..4, 4..8, 8..12].into_iter().map(|r| GtInstance { class: 0, mask: region(12, r) }).collect();
    let pred = |score, r| InstancePrediction { class: 0, score, mask: region(12, r) };
    // second prediction duplicates the first object
    let scene = InstanceScene { predictions: vec![pred(0.9, 0..4), pred(0.8, 0..4), pred(0.7, 4..8)], ground_truth: gt };
    let ap = instance_ap(std::slice::from_ref(&scene));
    out.push(("ap50 duplicate", ap.ap50, ap_oracle(&[true, false, true], 3)));
    out.push(("ap50 duplicate literal", ap.ap50, 5.0 / 9.0));
    out.push(("map duplicate", ap.map, 5.0 / 9.0));

    let unit = [[0.0, 1.0]; 3];
    out.push(("box iou half offset", box_iou(&unit, &[[0.5, 1.5]; 3]), 0.125 / 1.875));
    out.push(("box iou disjoint", box_iou(&unit, &[[2.0, 3.0]; 3]), 0.0));

    let sem = miou_macc(&[0, 1, 1, 1, 0, 0], &[0, 0, 1, 1, 1, 0], 3).unwrap();
    out.push(("miou", sem.miou, 0.5));
    out.push(("macc", sem.macc, 2.0 / 3.0));

    let g = grounding_acc(&[region(4, 0..1)], &[region(4, 0..4)]).unwrap();
    out.push(("acc25 at iou 0.25", g.acc25, 1.0));
    out.push(("acc50 at iou 0.25", g.acc50, 0.0));

    // row i has exactly min(i, 5) entries ahead of its diagonal
    let sim: Vec<Vec<f64>> = (0..6)
        .map(|i| (0..6).map(|j| if j == i { 0.5 } else if j < i { 1.0 } else { 0.0 }).collect())
        .collect();
    out.push(("recall@1", recall_at_k(&sim, 1).unwrap(), 1.0 / 6.0));
    out.push(("recall@5", recall_at_k(&sim, 5).unwrap(), 5.0 / 6.0));
    out.push(("recall@6", recall_at_k(&sim, 6).unwrap(), 1.0));
    out
}
