//! Evaluation metrics: semantic mIoU/mAcc, instance and box AP, grounding
//! accuracy, BLEU-1, ROUGE-L and retrieval recall.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::router::dump::PredictionDump;
use crate::router::InstancePrediction;
use crate::text::words;

/// IoU thresholds averaged by mAP: 0.50, 0.55, ..., 0.95.
pub fn ap_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// ROUGE-L recall weight.
pub const ROUGE_BETA: f64 = 1.2;

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticScores {
    pub miou: f64,
    pub macc: f64,
    /// Per class: `(IoU, recall)`; `None` for classes absent from both maps.
    pub per_class: Vec<Option<(f64, f64)>>,
}

/// Classes absent from both maps are excluded from the means. Recall is only
/// defined for classes present in the ground truth.
pub fn miou_macc(pred: &[usize], gt: &[usize], classes: usize) -> Result<SemanticScores> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!("{} predicted labels for {} voxels", pred.len(), gt.len())));
    }
    if let Some(&c) = pred.iter().chain(gt).find(|&&c| c >= classes) {
        return Err(Error::Input(format!("class {c} outside {classes} classes")));
    }
    let (mut tp, mut fp, mut fn_) = (vec![0usize; classes], vec![0usize; classes], vec![0usize; classes]);
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(classes);
    let (mut iou_sum, mut iou_n, mut acc_sum, mut acc_n) = (0.0, 0, 0.0, 0);
    for k in 0..classes {
        let union = tp[k] + fp[k] + fn_[k];
        if union == 0 {
            per_class.push(None);
            continue;
        }
        let iou = tp[k] as f64 / union as f64;
        iou_sum += iou;
        iou_n += 1;
        let in_gt = tp[k] + fn_[k];
        let recall = if in_gt > 0 { tp[k] as f64 / in_gt as f64 } else { 0.0 };
        if in_gt > 0 {
            acc_sum += recall;
            acc_n += 1;
        }
        per_class.push(Some((iou, recall)));
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(SemanticScores {
        miou: mean(iou_sum, iou_n),
        macc: mean(acc_sum, acc_n),
        per_class,
    })
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Ground-truth instance.
#[derive(Clone, Debug, PartialEq)]
pub struct GtInstance {
    pub class: usize,
    pub mask: Vec<bool>,
}

/// One scene's predictions and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceScene {
    pub predictions: Vec<InstancePrediction>,
    pub ground_truth: Vec<GtInstance>,
}

/// Area under the precision-recall curve with all-point interpolation.
/// `hits` lists the ranked predictions' match flags.
pub fn average_precision(hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / positives as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Scored predictions and ground truth of one scene, in any object
/// representation.
struct Objects<T> {
    preds: Vec<(usize, f64, T)>,
    gts: Vec<(usize, T)>,
}

/// AP of one class at one threshold, pooling all scenes. Predictions are
/// ranked by score (stable on ties) and each is greedily matched to the
/// unmatched ground truth of highest IoU.
fn class_ap<T>(scenes: &[Objects<T>], class: usize, threshold: f64, iou: &impl Fn(&T, &T) -> f64) -> Option<f64> {
    let positives: usize = scenes.iter().map(|s| s.gts.iter().filter(|g| g.0 == class).count()).sum();
    if positives == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (si, s) in scenes.iter().enumerate() {
        for (pi, p) in s.preds.iter().enumerate() {
            if p.0 == class {
                ranked.push((si, pi));
            }
        }
    }
    ranked.sort_by(|a, b| scenes[b.0].preds[b.1].1.total_cmp(&scenes[a.0].preds[a.1].1));
    let mut taken: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.gts.len()]).collect();
    let hits: Vec<bool> = ranked
        .iter()
        .map(|&(si, pi)| {
            let pred = &scenes[si].preds[pi].2;
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in scenes[si].gts.iter().enumerate() {
                if g.0 != class || taken[si][gi] {
                    continue;
                }
                let v = iou(pred, &g.1);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            best.map(|(gi, _)| taken[si][gi] = true).is_some()
        })
        .collect();
    Some(average_precision(&hits, positives))
}

/// Mean over ground-truth classes of AP at `threshold`.
fn mean_ap<T>(scenes: &[Objects<T>], threshold: f64, iou: &impl Fn(&T, &T) -> f64) -> f64 {
    let mut classes: Vec<usize> = scenes.iter().flat_map(|s| s.gts.iter().map(|g| g.0)).collect();
    classes.sort_unstable();
    classes.dedup();
    let aps: Vec<f64> = classes.iter().filter_map(|&c| class_ap(scenes, c, threshold, iou)).collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

fn objects<'a, T>(s: &'a InstanceScene, f: impl Fn(&'a [bool]) -> T) -> Objects<T> {
    Objects {
        preds: s.predictions.iter().map(|p| (p.class, p.score, f(&p.mask))).collect(),
        gts: s.ground_truth.iter().map(|g| (g.class, f(&g.mask))).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApScores {
    /// Mean over [`ap_thresholds`].
    pub map: f64,
    pub ap50: f64,
    pub ap25: f64,
}

pub fn instance_ap(scenes: &[InstanceScene]) -> ApScores {
    let objs: Vec<Objects<&[bool]>> = scenes.iter().map(|s| objects(s, |m| m)).collect();
    let iou = |a: &&[bool], b: &&[bool]| mask_iou(a, b);
    let ts = ap_thresholds();
    ApScores {
        map: ts.iter().map(|&t| mean_ap(&objs, t, &iou)).sum::<f64>() / ts.len() as f64,
        ap50: mean_ap(&objs, 0.5, &iou),
        ap25: mean_ap(&objs, 0.25, &iou),
    }
}

/// Axis-aligned box `[min, max]` per axis.
pub type Box3 = [[f64; 2]; 3];

pub fn box_iou(a: &Box3, b: &Box3) -> f64 {
    let vol = |x: &Box3| x.iter().map(|[lo, hi]| (hi - lo).max(0.0)).product::<f64>();
    let inter: f64 = (0..3)
        .map(|k| (a[k][1].min(b[k][1]) - a[k][0].max(b[k][0])).max(0.0))
        .product();
    let union = vol(a) + vol(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Bounding box of the voxels in `mask`, each voxel spanning one unit cell.
pub fn mask_box(mask: &[bool], coords: &[[i32; 3]]) -> Option<Box3> {
    let mut b: Option<Box3> = None;
    for (c, _) in coords.iter().zip(mask).filter(|(_, &m)| m) {
        let bx = b.get_or_insert([[f64::MAX, f64::MIN]; 3]);
        for k in 0..3 {
            bx[k][0] = bx[k][0].min(c[k] as f64);
            bx[k][1] = bx[k][1].max(c[k] as f64 + 1.0);
        }
    }
    b
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxApScores {
    pub bap50: f64,
    pub bap25: f64,
}

/// AP with the IoU of the masks' bounding boxes. `coords` lists each scene's
/// voxel coordinates.
pub fn box_ap(scenes: &[InstanceScene], coords: &[Vec<[i32; 3]>]) -> Result<BoxApScores> {
    if scenes.len() != coords.len() {
        return Err(Error::Input("one coordinate list per scene is required".into()));
    }
    let objs: Vec<Objects<Option<Box3>>> = scenes.iter().zip(coords).map(|(s, c)| objects(s, |m| mask_box(m, c))).collect();
    let iou = |a: &Option<Box3>, b: &Option<Box3>| match (a, b) {
        (Some(x), Some(y)) => box_iou(x, y),
        _ => 0.0,
    };
    Ok(BoxApScores {
        bap50: mean_ap(&objs, 0.5, &iou),
        bap25: mean_ap(&objs, 0.25, &iou),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundingScores {
    pub miou: f64,
    pub acc25: f64,
    pub acc50: f64,
}

/// Acc@t counts referrals with IoU >= t.
pub fn grounding_acc(pred: &[Vec<bool>], gt: &[Vec<bool>]) -> Result<GroundingScores> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!("{} predicted masks for {} referrals", pred.len(), gt.len())));
    }
    if gt.is_empty() {
        return Ok(GroundingScores {
            miou: 0.0,
            acc25: 0.0,
            acc50: 0.0,
        });
    }
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| mask_iou(p, g)).collect();
    let n = ious.len() as f64;
    let frac = |t: f64| ious.iter().filter(|&&v| v >= t).count() as f64 / n;
    Ok(GroundingScores {
        miou: ious.iter().sum::<f64>() / n,
        acc25: frac(0.25),
        acc50: frac(0.5),
    })
}

/// Clipped unigram precision times the brevity penalty.
pub fn bleu1(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in reference {
        *counts.entry(w).or_default() += 1;
    }
    let mut clipped = 0usize;
    for w in candidate {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                clipped += 1;
            }
        }
    }
    let precision = clipped as f64 / candidate.len() as f64;
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    precision * bp
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure `(1+β²)PR / (R + β²P)`.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Fraction of rows whose diagonal entry ranks within the top `k`. Entries
/// equal to the diagonal in a lower column rank ahead of it.
pub fn recall_at_k(sim: &[Vec<f64>], k: usize) -> Result<f64> {
    let n = sim.len();
    if n == 0 || sim.iter().any(|r| r.len() != n) {
        return Err(Error::Input("similarity matrix must be square and nonempty".into()));
    }
    let hits = sim
        .iter()
        .enumerate()
        .filter(|(i, row)| {
            let d = row[*i];
            let ahead = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > d || (v == d && j < *i))
                .count();
            ahead < k
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Named metric values plus optional per-class breakdowns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub per_class: BTreeMap<String, BTreeMap<String, f64>>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.metrics {
            let _ = writeln!(s, "{k} = {v:.6}");
        }
        for (k, m) in &self.per_class {
            for (c, v) in m {
                let _ = writeln!(s, "{k}.{c} = {v:.6}");
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        let obj = |m: &BTreeMap<String, f64>| {
            let parts: Vec<String> = m.iter().map(|(k, v)| format!("{}: {}", json_string(k), json_number(*v))).collect();
            format!("{{{}}}", parts.join(", "))
        };
        let pcs: Vec<String> = self
            .per_class
            .iter()
            .map(|(k, m)| format!("{}: {}", json_string(k), obj(m)))
            .collect();
        format!("{{\"metrics\": {}, \"per_class\": {{{}}}}}", obj(&self.metrics), pcs.join(", "))
    }

    /// `metric,value` rows, per-class entries as `metric.class`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in &self.metrics {
            let _ = writeln!(s, "{k},{v:?}");
        }
        for (k, m) in &self.per_class {
            for (c, v) in m {
                let _ = writeln!(s, "{k}.{c},{v:?}");
            }
        }
        s
    }
}

fn json_string(s: &str) -> String {
    let mut out = String::from("\"");
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn json_number(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else {
        "null".into()
    }
}

/// Scores every task that both dumps cover. Scenes and shapes are paired by
/// name; a prediction missing for a ground-truth record is an error.
pub fn evaluate(pred: &PredictionDump, gt: &PredictionDump, class_names: &[String]) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let pred_scene: HashMap<&str, usize> = pred.scenes.iter().enumerate().map(|(i, s)| (s.name.as_str(), i)).collect();
    let classes = class_names.len();
    let name_of = |k: usize| class_names.get(k).cloned().unwrap_or_else(|| k.to_string());

    let (mut sem_p, mut sem_g) = (Vec::new(), Vec::new());
    let mut inst = Vec::new();
    let (mut grd_p, mut grd_g) = (Vec::new(), Vec::new());
    for g in &gt.scenes {
        let &pi = pred_scene
            .get(g.name.as_str())
            .ok_or_else(|| Error::Input(format!("no prediction for scene {}", g.name)))?;
        let p = &pred.scenes[pi];
        if p.voxels != g.voxels {
            return Err(Error::Input(format!("scene {}: {} predicted voxels, {} in ground truth", g.name, p.voxels, g.voxels)));
        }
        if let (Some(ps), Some(gs)) = (&p.semantic, &g.semantic) {
            sem_p.extend_from_slice(ps);
            sem_g.extend_from_slice(gs);
        }
        if !p.instances.is_empty() && !g.instances.is_empty() {
            inst.push(InstanceScene {
                predictions: p.instances.clone(),
                ground_truth: g
                    .instances
                    .iter()
                    .map(|i| GtInstance {
                        class: i.class,
                        mask: i.mask.clone(),
                    })
                    .collect(),
            });
        }
        for (idx, mask) in &g.referrals {
            if let Some((_, pm)) = p.referrals.iter().find(|(j, _)| j == idx) {
                grd_p.push(pm.clone());
                grd_g.push(mask.clone());
            }
        }
    }
    if !sem_g.is_empty() {
        let s = miou_macc(&sem_p, &sem_g, classes)?;
        report.metrics.insert("semantic.miou".into(), s.miou);
        report.metrics.insert("semantic.macc".into(), s.macc);
        let mut pc = BTreeMap::new();
        for (k, v) in s.per_class.iter().enumerate() {
            if let Some((iou, _)) = v {
                pc.insert(name_of(k), *iou);
            }
        }
        report.per_class.insert("semantic.iou".into(), pc);
    }
    if !inst.is_empty() {
        let a = instance_ap(&inst);
        report.metrics.insert("instance.map".into(), a.map);
        report.metrics.insert("instance.ap50".into(), a.ap50);
        report.metrics.insert("instance.ap25".into(), a.ap25);
    }
    if !grd_g.is_empty() {
        let g = grounding_acc(&grd_p, &grd_g)?;
        report.metrics.insert("grounding.miou".into(), g.miou);
        report.metrics.insert("grounding.acc25".into(), g.acc25);
        report.metrics.insert("grounding.acc50".into(), g.acc50);
    }

    let pred_shape: HashMap<&str, usize> = pred.shapes.iter().enumerate().map(|(i, s)| (s.name.as_str(), i)).collect();
    let (mut correct, mut classified) = (0usize, 0usize);
    let (mut bleu, mut rouge, mut captioned) = (0.0, 0.0, 0usize);
    for g in &gt.shapes {
        let Some(&pi) = pred_shape.get(g.name.as_str()) else {
            continue;
        };
        let p = &pred.shapes[pi];
        if let (Some(pc), Some(gc)) = (p.class, g.class) {
            classified += 1;
            correct += usize::from(pc == gc);
        }
        if let (Some(pc), Some(gc)) = (&p.caption, &g.caption) {
            let (c, r) = (words(pc), words(gc));
            bleu += bleu1(&c, &r);
            rouge += rouge_l(&c, &r);
            captioned += 1;
        }
    }
    if classified > 0 {
        report.metrics.insert("classification.accuracy".into(), correct as f64 / classified as f64);
    }
    if captioned > 0 {
        report.metrics.insert("caption.bleu1".into(), bleu / captioned as f64);
        report.metrics.insert("caption.rouge_l".into(), rouge / captioned as f64);
    }
    if !pred.similarity.is_empty() {
        report.metrics.insert("retrieval.r1".into(), recall_at_k(&pred.similarity, 1)?);
        report.metrics.insert("retrieval.r5".into(), recall_at_k(&pred.similarity, 5)?);
    }
    Ok(report)
}
