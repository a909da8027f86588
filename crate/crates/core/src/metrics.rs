//! Ranking metrics: AP, mAP, ontology-aware mAP (OmAP) per coarse-grained
//! level, the per-level delta curve, and the human consistency score.
//!
//! Rankings sort by descending score with ties broken by ascending clip index.

use std::collections::HashMap;
use std::io::Read;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OtagError, Result};
use crate::matrix::Matrix;
use crate::ontology::{DistanceMatrix, EvalClassMap};

/// Clip × class scores with matching binary targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    clip_ids: Vec<String>,
    scores: Matrix,
    targets: Vec<bool>,
}

impl PredictionSet {
    pub fn new(clip_ids: Vec<String>, scores: Matrix, targets: Vec<bool>) -> Result<Self> {
        if clip_ids.len() != scores.rows() {
            return Err(OtagError::LengthMismatch {
                what: "clip ids vs score rows",
                expected: scores.rows(),
                got: clip_ids.len(),
            });
        }
        if targets.len() != scores.rows() * scores.cols() {
            return Err(OtagError::LengthMismatch {
                what: "targets vs scores",
                expected: scores.rows() * scores.cols(),
                got: targets.len(),
            });
        }
        if !scores.is_finite() {
            return Err(OtagError::NonFinite("scores"));
        }
        Ok(Self {
            clip_ids,
            scores,
            targets,
        })
    }

    /// Like [`PredictionSet::new`] with targets given as a 0/1 matrix.
    pub fn from_target_matrix(clip_ids: Vec<String>, scores: Matrix, targets: &Matrix) -> Result<Self> {
        if targets.rows() != scores.rows() || targets.cols() != scores.cols() {
            return Err(OtagError::LengthMismatch {
                what: "target matrix shape",
                expected: scores.rows() * scores.cols(),
                got: targets.rows() * targets.cols(),
            });
        }
        let mut t = Vec::with_capacity(targets.as_slice().len());
        for &v in targets.as_slice() {
            if v == 0.0 {
                t.push(false);
            } else if v == 1.0 {
                t.push(true);
            } else {
                return Err(OtagError::InvalidConfig(format!("target value {v} is not 0 or 1")));
            }
        }
        Self::new(clip_ids, scores, t)
    }

    pub fn n_clips(&self) -> usize {
        self.scores.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.scores.cols()
    }

    pub fn clip_ids(&self) -> &[String] {
        &self.clip_ids
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }

    #[inline]
    pub fn target(&self, clip: usize, class: usize) -> bool {
        self.targets[clip * self.n_classes() + class]
    }

    pub fn target_row(&self, clip: usize) -> &[bool] {
        let k = self.n_classes();
        &self.targets[clip * k..(clip + 1) * k]
    }

    fn class_targets(&self, class: usize) -> Vec<bool> {
        (0..self.n_clips()).map(|m| self.target(m, class)).collect()
    }

    /// Reorder clips; `order[i]` is the source row of new row `i`.
    pub fn permute_clips(&self, order: &[usize]) -> Self {
        let targets = order
            .iter()
            .flat_map(|&m| self.target_row(m).iter().copied())
            .collect();
        Self {
            clip_ids: order.iter().map(|&m| self.clip_ids[m].clone()).collect(),
            scores: self.scores.select_rows(order),
            targets,
        }
    }

    /// Apply `f` to every score.
    pub fn map_scores(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let data = self.scores.as_slice().iter().map(|&s| f(s)).collect();
        Self::new(
            self.clip_ids.clone(),
            Matrix::from_vec(self.n_clips(), self.n_classes(), data)?,
            self.targets.clone(),
        )
    }
}

/// Indices sorted by descending score, ties by ascending index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// AP over a precomputed ranking, skipping items where `skip` is true.
/// `None` when no unskipped positive exists.
fn ap_over_ranking(order: &[usize], positive: impl Fn(usize) -> bool, skip: impl Fn(usize) -> bool) -> Option<f64> {
    let mut rank = 0usize;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for &i in order {
        if skip(i) {
            continue;
        }
        rank += 1;
        if positive(i) {
            hits += 1;
            sum += hits as f64 / rank as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Ranking AP: mean over positive ranks of precision at that rank.
/// Items with `mask[i] = true` are removed before ranking.
pub fn average_precision(scores: &[f64], targets: &[bool], mask: Option<&[bool]>) -> Result<f64> {
    if scores.len() != targets.len() {
        return Err(OtagError::LengthMismatch {
            what: "scores vs targets",
            expected: scores.len(),
            got: targets.len(),
        });
    }
    if let Some(m) = mask {
        if m.len() != scores.len() {
            return Err(OtagError::LengthMismatch {
                what: "mask",
                expected: scores.len(),
                got: m.len(),
            });
        }
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(OtagError::NonFinite("scores"));
    }
    let order = ranking(scores);
    ap_over_ranking(&order, |i| targets[i], |i| mask.is_some_and(|m| m[i])).ok_or(OtagError::NoPositives)
}

/// Macro mean of per-class AP over classes with at least one positive.
pub fn mean_average_precision(preds: &PredictionSet) -> Result<f64> {
    let per_class: Vec<Option<f64>> = (0..preds.n_classes())
        .into_par_iter()
        .map(|c| {
            let scores = preds.scores.column(c);
            let targets = preds.class_targets(c);
            ap_over_ranking(&ranking(&scores), |i| targets[i], |_| false)
        })
        .collect();
    macro_mean(&per_class).ok_or(OtagError::NoPositiveClass)
}

fn macro_mean(values: &[Option<f64>]) -> Option<f64> {
    let (sum, n) = values
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// How a false positive close to a clip's labels is treated at level λ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FalsePositivePolicy {
    /// Drop it from the ranking.
    #[default]
    Mask,
    /// Count it as a true positive.
    CountAsTrue,
}

/// For every clip and class, the smallest ontology distance from the class to
/// one of the clip's positive labels. Clips without labels get
/// [`DistanceMatrix::INFINITY`] everywhere.
fn nearest_positive_distances(
    preds: &PredictionSet,
    dist: &DistanceMatrix,
    eval_map: &EvalClassMap,
) -> Result<Vec<u8>> {
    let k = preds.n_classes();
    if eval_map.len() != k {
        return Err(OtagError::LengthMismatch {
            what: "eval map vs prediction classes",
            expected: k,
            got: eval_map.len(),
        });
    }
    let nodes = eval_map.node_indices();
    if let Some(&bad) = nodes.iter().find(|&&n| n >= dist.len()) {
        return Err(OtagError::NodeOutOfRange {
            index: bad,
            len: dist.len(),
        });
    }
    let mut out = vec![DistanceMatrix::INFINITY; preds.n_clips() * k];
    for m in 0..preds.n_clips() {
        let row = preds.target_row(m);
        let cell = &mut out[m * k..(m + 1) * k];
        for (p, _) in row.iter().enumerate().filter(|(_, &t)| t) {
            for (c, slot) in cell.iter_mut().enumerate() {
                let d = dist.raw(nodes[c], nodes[p]);
                if d < *slot {
                    *slot = d;
                }
            }
        }
    }
    Ok(out)
}

/// Per-class AP at each level in `levels`; `None` for classes without
/// positives.
fn omap_levels(
    preds: &PredictionSet,
    dist: &DistanceMatrix,
    eval_map: &EvalClassMap,
    levels: &[u32],
    policy: FalsePositivePolicy,
) -> Result<Vec<Vec<Option<f64>>>> {
    let near = nearest_positive_distances(preds, dist, eval_map)?;
    let k = preds.n_classes();
    Ok((0..k)
        .into_par_iter()
        .map(|c| {
            let scores = preds.scores.column(c);
            let order = ranking(&scores);
            let targets = preds.class_targets(c);
            let close = |m: usize, lambda: u32| {
                !targets[m] && u32::from(near[m * k + c]) <= lambda
            };
            levels
                .iter()
                .map(|&lambda| match policy {
                    FalsePositivePolicy::Mask => {
                        ap_over_ranking(&order, |m| targets[m], |m| close(m, lambda))
                    }
                    FalsePositivePolicy::CountAsTrue => ap_over_ranking(
                        &order,
                        |m| targets[m] || close(m, lambda),
                        |_| false,
                    )
                    .filter(|_| targets.iter().any(|&t| t)),
                })
                .collect()
        })
        .collect())
}

/// OmAP at level λ: for class `c`, a clip without label `c` is excluded from
/// the ranking when one of its labels lies within `lambda` hops of `c`.
pub fn omap_at_lambda(
    preds: &PredictionSet,
    dist: &DistanceMatrix,
    eval_map: &EvalClassMap,
    lambda: u32,
) -> Result<f64> {
    omap_at_lambda_with(preds, dist, eval_map, lambda, FalsePositivePolicy::Mask)
}

pub fn omap_at_lambda_with(
    preds: &PredictionSet,
    dist: &DistanceMatrix,
    eval_map: &EvalClassMap,
    lambda: u32,
    policy: FalsePositivePolicy,
) -> Result<f64> {
    let per_class = omap_levels(preds, dist, eval_map, &[lambda], policy)?;
    let flat: Vec<Option<f64>> = per_class.into_iter().map(|v| v[0]).collect();
    macro_mean(&flat).ok_or(OtagError::NoPositiveClass)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmapReport {
    pub map: f64,
    pub omap: f64,
    pub omap_by_lambda: Vec<f64>,
    pub n_levels: usize,
    pub classes_evaluated: usize,
}

/// OmAP at every level `λ = 0..N` where `N` is the distance matrix diameter,
/// plus their mean. A zero diameter still yields the single level λ = 0.
pub fn omap_report(preds: &PredictionSet, dist: &DistanceMatrix, eval_map: &EvalClassMap) -> Result<OmapReport> {
    omap_report_levels(preds, dist, eval_map, usize::from(dist.diameter()).max(1))
}

pub fn omap_report_levels(
    preds: &PredictionSet,
    dist: &DistanceMatrix,
    eval_map: &EvalClassMap,
    n_levels: usize,
) -> Result<OmapReport> {
    let levels: Vec<u32> = (0..n_levels as u32).collect();
    let per_class = omap_levels(preds, dist, eval_map, &levels, FalsePositivePolicy::Mask)?;
    let classes_evaluated = per_class.iter().filter(|v| v[0].is_some()).count();
    if classes_evaluated == 0 {
        return Err(OtagError::NoPositiveClass);
    }
    let omap_by_lambda: Vec<f64> = (0..n_levels)
        .map(|l| {
            let col: Vec<Option<f64>> = per_class.iter().map(|v| v[l]).collect();
            macro_mean(&col).unwrap_or(0.0)
        })
        .collect();
    let omap = omap_by_lambda.iter().sum::<f64>() / n_levels as f64;
    Ok(OmapReport {
        map: omap_by_lambda[0],
        omap,
        omap_by_lambda,
        n_levels,
        classes_evaluated,
    })
}

/// Per-level differences `a − b`.
pub fn delta_curve(a: &OmapReport, b: &OmapReport) -> Result<Vec<(usize, f64)>> {
    if a.n_levels != b.n_levels || a.omap_by_lambda.len() != b.omap_by_lambda.len() {
        return Err(OtagError::LevelMismatch(a.n_levels, b.n_levels));
    }
    Ok(a.omap_by_lambda
        .iter()
        .zip(&b.omap_by_lambda)
        .enumerate()
        .map(|(l, (x, y))| (l, x - y))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanAnnotation {
    pub clip_id: String,
    pub mid: String,
    pub class_index: usize,
    pub annotator_id: String,
    pub presence: bool,
    pub confidence: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HumanAnnotationSet {
    rows: Vec<HumanAnnotation>,
}

/// Majority-vote label for one (clip, class) sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HumanLabel {
    pub clip_id: String,
    pub class_index: usize,
    pub presence: bool,
}

#[derive(Deserialize)]
struct RawAnnotation {
    clip_id: String,
    mid: String,
    annotator_id: String,
    presence: u8,
    confidence: u8,
}

impl HumanAnnotationSet {
    pub fn new(rows: Vec<HumanAnnotation>) -> Result<Self> {
        for r in &rows {
            if !(1..=5).contains(&r.confidence) {
                return Err(OtagError::InvalidAnnotation(format!(
                    "confidence {} outside 1..=5 for clip {:?}",
                    r.confidence, r.clip_id
                )));
            }
        }
        Ok(Self { rows })
    }

    /// Read `clip_id,mid,annotator_id,presence,confidence`.
    pub fn read_csv<R: Read>(reader: R, eval_map: &EvalClassMap) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut rows = Vec::new();
        for rec in rdr.deserialize() {
            let raw: RawAnnotation = rec?;
            let class_index = eval_map
                .position_of(&raw.mid)
                .ok_or_else(|| OtagError::UnknownMid(raw.mid.clone()))?;
            let presence = match raw.presence {
                0 => false,
                1 => true,
                v => {
                    return Err(OtagError::InvalidAnnotation(format!(
                        "presence {v} is not 0 or 1 for clip {:?}",
                        raw.clip_id
                    )))
                }
            };
            rows.push(HumanAnnotation {
                clip_id: raw.clip_id,
                mid: raw.mid,
                class_index,
                annotator_id: raw.annotator_id,
                presence,
                confidence: raw.confidence,
            });
        }
        Self::new(rows)
    }

    pub fn rows(&self) -> &[HumanAnnotation] {
        &self.rows
    }

    /// Majority vote per (clip, class), in order of first appearance.
    pub fn majority_labels(&self) -> Result<Vec<HumanLabel>> {
        let mut order: Vec<(&str, usize, &str)> = Vec::new();
        let mut votes: HashMap<(&str, usize), (usize, usize)> = HashMap::new();
        for r in &self.rows {
            let key = (r.clip_id.as_str(), r.class_index);
            let entry = votes.entry(key).or_insert_with(|| {
                order.push((r.clip_id.as_str(), r.class_index, r.mid.as_str()));
                (0, 0)
            });
            if r.presence {
                entry.0 += 1;
            } else {
                entry.1 += 1;
            }
        }
        order
            .into_iter()
            .map(|(clip, class, mid)| {
                let (yes, no) = votes[&(clip, class)];
                if yes == no {
                    return Err(OtagError::AnnotationTie {
                        clip: clip.to_string(),
                        mid: mid.to_string(),
                        yes,
                        no,
                    });
                }
                Ok(HumanLabel {
                    clip_id: clip.to_string(),
                    class_index: class,
                    presence: yes > no,
                })
            })
            .collect()
    }
}

/// AP of model scores against majority-vote human labels, pooled over all
/// annotated (clip, class) samples.
pub fn consistency_score(preds: &PredictionSet, human: &HumanAnnotationSet) -> Result<f64> {
    let labels = human.majority_labels()?;
    let rows: HashMap<&str, usize> = preds
        .clip_ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut scores = Vec::with_capacity(labels.len());
    let mut targets = Vec::with_capacity(labels.len());
    for l in &labels {
        let m = *rows.get(l.clip_id.as_str()).ok_or_else(|| {
            OtagError::InvalidAnnotation(format!("clip {:?} has no model scores", l.clip_id))
        })?;
        if l.class_index >= preds.n_classes() {
            return Err(OtagError::NodeOutOfRange {
                index: l.class_index,
                len: preds.n_classes(),
            });
        }
        scores.push(preds.scores.get(m, l.class_index));
        targets.push(l.presence);
    }
    average_precision(&scores, &targets, None)
}
