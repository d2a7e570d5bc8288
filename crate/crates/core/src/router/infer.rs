use crate::decoder::MASK_THRESHOLD;
use crate::tensor::{sigmoid, softmax_into, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct InstancePrediction {
    pub class: usize,
    pub score: f64,
    pub mask: Vec<bool>,
}

impl InstancePrediction {
    pub fn voxels(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Non-background queries ranked by class probability (lower query index
/// first on ties), truncated to `top_k`, masks binarized at 0.5. Queries
/// whose mask is empty are dropped.
pub fn infer_instances(logits: &Tensor, mask_logits: &Tensor, top_k: usize) -> Vec<InstancePrediction> {
    let bg = logits.cols() - 1;
    let mut probs = vec![0.0; logits.cols()];
    let mut out: Vec<(usize, InstancePrediction)> = Vec::new();
    for q in 0..logits.rows() {
        softmax_into(logits.row(q), &mut probs);
        let mut class = 0;
        for c in 1..probs.len() {
            if probs[c] > probs[class] {
                class = c;
            }
        }
        if class == bg {
            continue;
        }
        let mask: Vec<bool> = mask_logits.row(q).iter().map(|&x| sigmoid(x) > MASK_THRESHOLD).collect();
        if !mask.contains(&true) {
            continue;
        }
        out.push((
            q,
            InstancePrediction {
                class,
                score: probs[class],
                mask,
            },
        ));
    }
    out.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    out.into_iter().take(top_k).map(|(_, p)| p).collect()
}

/// Highest foreground probability over all queries, used for voxels no
/// instance covers.
pub fn best_foreground_class(logits: &Tensor) -> usize {
    let bg = logits.cols() - 1;
    let mut probs = vec![0.0; logits.cols()];
    let (mut best, mut best_p) = (0, f64::NEG_INFINITY);
    for q in 0..logits.rows() {
        softmax_into(logits.row(q), &mut probs);
        for (c, &p) in probs[..bg].iter().enumerate() {
            if p > best_p {
                best = c;
                best_p = p;
            }
        }
    }
    best
}

/// Per-voxel class: the highest-scoring covering instance wins, uncovered
/// voxels take `fallback`.
pub fn infer_semantic(instances: &[InstancePrediction], voxels: usize, fallback: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| instances[b].score.total_cmp(&instances[a].score).then(a.cmp(&b)));
    let mut out = vec![None; voxels];
    for i in order {
        for (slot, &m) in out.iter_mut().zip(&instances[i].mask) {
            if m && slot.is_none() {
                *slot = Some(instances[i].class);
            }
        }
    }
    out.into_iter().map(|c| c.unwrap_or(fallback)).collect()
}
