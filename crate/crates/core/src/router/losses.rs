//! Head outputs and losses on tape values, plus the plain-valued matching
//! costs that feed Hungarian assignment.

use super::hungarian::{hungarian, MatchResult};
use super::LossWeights;
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus, Tape, Tensor, Var};
use crate::text::PAD;

pub const DICE_EPS: f64 = 1e-6;

fn zero(tape: &Tape) -> Var<'_> {
    tape.constant(Tensor::scalar(0.0))
}

/// `O_c = O^s · C_embᵀ`.
pub fn classify<'t>(semantic: Var<'t>, class_emb: Var<'t>) -> Result<Var<'t>> {
    semantic.matmul_t(class_emb)
}

/// Weighted cross-entropy where unmatched queries target the background
/// class (the last column) with weight `w.background`.
pub fn loss_cls<'t>(logits: Var<'t>, targets: &[Option<usize>], w: &LossWeights) -> Result<Var<'t>> {
    if targets.len() != logits.rows() {
        return Err(Error::shape("loss_cls", format!("{} targets for {} queries", targets.len(), logits.rows())));
    }
    let bg = logits.cols() - 1;
    let labels: Vec<Option<usize>> = targets.iter().map(|t| Some(t.unwrap_or(bg))).collect();
    let weights: Vec<f64> = targets.iter().map(|t| if t.is_some() { 1.0 } else { w.background }).collect();
    logits.cross_entropy(&labels, Some(&weights))?.scale(w.cls)
}

/// `O_m = O^m · V_Sᵀ` for the first `queries` rows.
pub fn predict_masks<'t>(mask_embed: Var<'t>, points: Var<'t>, queries: usize) -> Result<Var<'t>> {
    mask_embed.slice_rows(0, queries)?.matmul_t(points)
}

/// `λ_bce · BCE + λ_dice · Dice` over matched `(prediction, gt)` pairs.
pub fn loss_mask<'t>(mask_logits: Var<'t>, pairs: &[(usize, usize)], gt: &Tensor, w: &LossWeights) -> Result<Var<'t>> {
    let tape = mask_logits.tape();
    if pairs.is_empty() {
        return Ok(zero(tape));
    }
    if gt.cols() != mask_logits.cols() {
        return Err(Error::shape("loss_mask", format!("{} gt voxels vs {}", gt.cols(), mask_logits.cols())));
    }
    let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let n = gt.cols();
    let mut target = Tensor::zeros(&[pairs.len(), n]);
    for (r, &(_, g)) in pairs.iter().enumerate() {
        target.row_mut(r).copy_from_slice(gt.row(g));
    }
    let chosen = mask_logits.gather_rows(&preds)?;
    let bce = chosen.bce_with_logits(&target)?.scale(w.bce)?;
    let dice = chosen.dice_with_logits(&target, DICE_EPS)?.scale(w.dice)?;
    bce.add(dice)
}

/// `Q × G` mask cost: `λ_bce · BCE + λ_dice · Dice` for every pair.
pub fn mask_cost(mask_logits: &Tensor, gt: &Tensor, w: &LossWeights) -> Tensor {
    let (q, g, n) = (mask_logits.rows(), gt.rows(), mask_logits.cols());
    let sp: Vec<f64> = (0..q).map(|i| mask_logits.row(i).iter().map(|&x| softplus(x)).sum()).collect();
    let probs = mask_logits.map(sigmoid);
    let psum: Vec<f64> = (0..q).map(|i| probs.row(i).iter().sum()).collect();
    let gsum: Vec<f64> = (0..g).map(|j| gt.row(j).iter().sum()).collect();
    let mut out = Tensor::zeros(&[q, g]);
    for i in 0..q {
        for j in 0..g {
            let gj = gt.row(j);
            let xy: f64 = mask_logits.row(i).iter().zip(gj).map(|(x, y)| x * y).sum();
            let py: f64 = probs.row(i).iter().zip(gj).map(|(p, y)| p * y).sum();
            let bce = (sp[i] - xy) / n as f64;
            let dice = 1.0 - 2.0 * py / (psum[i] + gsum[j] + DICE_EPS);
            out.row_mut(i)[j] = w.bce * bce + w.dice * dice;
        }
    }
    out
}

/// Instance matching cost `λ_cls·(−p) + mask cost`, then Hungarian.
pub fn match_instances(
    logits: &Tensor,
    mask_logits: &Tensor,
    classes: &[usize],
    gt_masks: &Tensor,
    w: &LossWeights,
) -> Result<MatchResult> {
    if classes.is_empty() {
        return Ok(MatchResult::empty());
    }
    if classes.len() != gt_masks.rows() {
        return Err(Error::shape("match_instances", "class and mask counts differ"));
    }
    let mut cost = mask_cost(mask_logits, gt_masks, w);
    let mut probs = vec![0.0; logits.cols()];
    for q in 0..logits.rows() {
        crate::tensor::softmax_into(logits.row(q), &mut probs);
        for (g, &c) in classes.iter().enumerate() {
            cost.row_mut(q)[g] -= w.cls * probs[c];
        }
    }
    hungarian(&cost)
}

/// `e^η · T_emb · O^sᵀ`; its row softmax is `S_t`.
pub fn grounding_logits<'t>(sentences: Var<'t>, semantic: Var<'t>, eta: Var<'t>) -> Result<Var<'t>> {
    sentences.matmul_t(semantic)?.scale_by(eta.exp()?)
}

pub fn grounding_similarity<'t>(logits: Var<'t>) -> Result<Var<'t>> {
    logits.softmax_rows(None)
}

/// Hungarian assignment of referred objects to queries with cost
/// `λ_gc·(−mean S_t over the object's sentences) + mask cost`.
/// Returns the match and the query assigned to every sentence.
pub fn match_referrals(
    similarity: &Tensor,
    mask_logits: &Tensor,
    targets: &[usize],
    gt_masks: &Tensor,
    w: &LossWeights,
) -> Result<(MatchResult, Vec<usize>)> {
    if targets.len() != similarity.rows() {
        return Err(Error::shape("match_referrals", "one target per sentence required"));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= gt_masks.rows()) {
        return Err(Error::Input(format!("referral target {bad} outside {} objects", gt_masks.rows())));
    }
    let mut cost = mask_cost(mask_logits, gt_masks, w);
    for g in 0..gt_masks.rows() {
        let rows: Vec<usize> = (0..targets.len()).filter(|&r| targets[r] == g).collect();
        if rows.is_empty() {
            continue;
        }
        for q in 0..cost.rows() {
            let mean = rows.iter().map(|&r| similarity.at(r, q)).sum::<f64>() / rows.len() as f64;
            cost.row_mut(q)[g] -= w.gc * mean;
        }
    }
    // only referred objects take part in the assignment
    let referred: Vec<usize> = {
        let mut r = targets.to_vec();
        r.sort_unstable();
        r.dedup();
        r
    };
    let mut sub = Tensor::zeros(&[cost.rows(), referred.len()]);
    for q in 0..cost.rows() {
        for (k, &g) in referred.iter().enumerate() {
            sub.row_mut(q)[k] = cost.at(q, g);
        }
    }
    let m = hungarian(&sub)?;
    let pairs: Vec<(usize, usize)> = m.pairs.iter().map(|&(q, k)| (q, referred[k])).collect();
    let owner = MatchResult {
        pairs: pairs.clone(),
        cost: m.cost,
    }
    .prediction_of(gt_masks.rows());
    let per_sentence = targets
        .iter()
        .map(|&t| owner[t].ok_or_else(|| Error::Contract("more referred objects than queries".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok((MatchResult { pairs, cost: m.cost }, per_sentence))
}

/// Grounding loss terms, kept apart for logging and decomposition checks.
#[derive(Clone, Copy, Debug)]
pub struct GroundingLoss<'t> {
    pub similarity: Var<'t>,
    pub category: Var<'t>,
    pub mask: Var<'t>,
}

impl<'t> GroundingLoss<'t> {
    pub fn total(&self) -> Result<Var<'t>> {
        self.similarity.add(self.category)?.add(self.mask)
    }
}

/// `λ_gc · CE(S_t, T_gt) + BCE(T_cls, T_cls^gt) + L_gmask`.
#[allow(clippy::too_many_arguments)]
pub fn loss_grounding<'t>(
    logits: Var<'t>,
    sentence_queries: &[usize],
    category_logits: Var<'t>,
    category_gt: &Tensor,
    mask_logits: Var<'t>,
    pairs: &[(usize, usize)],
    gt_masks: &Tensor,
    w: &LossWeights,
) -> Result<GroundingLoss<'t>> {
    let labels: Vec<Option<usize>> = sentence_queries.iter().map(|&q| Some(q)).collect();
    Ok(GroundingLoss {
        similarity: logits.cross_entropy(&labels, None)?.scale(w.gc)?,
        category: category_logits.bce_with_logits(category_gt)?,
        mask: loss_mask(mask_logits, pairs, gt_masks, w)?,
    })
}

/// Next-token logits `S_cap = O^s_text · tableᵀ`.
pub fn caption_logits<'t>(text_semantic: Var<'t>, token_table: Var<'t>) -> Result<Var<'t>> {
    text_semantic.matmul_t(token_table)
}

/// `λ_cap · CE(S_cap, y_cap)` with PAD targets excluded.
pub fn loss_caption<'t>(logits: Var<'t>, targets: &[usize], w: &LossWeights) -> Result<Var<'t>> {
    if targets.len() != logits.rows() {
        return Err(Error::shape("loss_caption", format!("{} targets for {} positions", targets.len(), logits.rows())));
    }
    let labels: Vec<Option<usize>> = targets.iter().map(|&t| (t != PAD).then_some(t)).collect();
    logits.cross_entropy(&labels, None)?.scale(w.cap)
}

/// `S_ret[i][j] = cos(shape_i, text_j) · e^s` with `s = ln(1/τ)`.
pub fn matching_logits<'t>(shapes: Var<'t>, texts: Var<'t>, logit_scale: Var<'t>) -> Result<Var<'t>> {
    shapes
        .normalize_rows()?
        .matmul_t(texts.normalize_rows()?)?
        .scale_by(logit_scale.exp()?)
}

/// `λ_ret · ½ (CE over rows + CE over columns)` with diagonal targets.
pub fn loss_contrastive<'t>(logits: Var<'t>, w: &LossWeights) -> Result<Var<'t>> {
    let b = logits.rows();
    if logits.cols() != b {
        return Err(Error::shape("loss_contrastive", format!("{:?} is not square", logits.shape())));
    }
    let diag: Vec<Option<usize>> = (0..b).map(Some).collect();
    let rows = logits.cross_entropy(&diag, None)?;
    let cols = logits.t()?.cross_entropy(&diag, None)?;
    rows.add(cols)?.scale(0.5 * w.ret)
}

/// `λ_ret · CE` of shapes against class-name texts.
pub fn loss_shape_class<'t>(logits: Var<'t>, classes: &[usize], w: &LossWeights) -> Result<Var<'t>> {
    let labels: Vec<Option<usize>> = classes.iter().map(|&c| Some(c)).collect();
    logits.cross_entropy(&labels, None)?.scale(w.ret)
}
