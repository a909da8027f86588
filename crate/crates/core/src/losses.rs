//! BCE, ontology-weighted BCE (OBCE), the semantic alignment loss (SPA), and
//! the combined objective `(BCE + OBCE) / 2 + α·SPA`, each with analytic
//! gradients.
//!
//! Probabilities are clamped into `[ε, 1 − ε]` before taking logs; the
//! gradient is zero wherever the clamp is active.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{OtagError, Result};
use crate::matrix::{dot, norm, Matrix};
use crate::ontology::{DistanceMatrix, EvalClassMap};

pub const GRAD_PRED: &str = "pred";
pub const GRAD_AUDIO: &str = "audio";
pub const GRAD_TEXT: &str = "text";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub diameter: u8,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            epsilon: 1e-7,
            diameter: 1,
        }
    }
}

impl LossConfig {
    pub fn new(alpha: f64, diameter: u8) -> Result<Self> {
        let cfg = Self {
            alpha,
            diameter,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(OtagError::InvalidConfig(format!(
                "epsilon must lie in (0, 0.5), got {}",
                self.epsilon
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(OtagError::InvalidConfig(format!(
                "alpha must be finite and non-negative, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Per-class OBCE weights for one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub Vec<f64>);

impl ClassWeights {
    pub fn uniform(k: usize, w: f64) -> Self {
        Self(vec![w; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Gradient per differentiable input, keyed by [`GRAD_PRED`],
    /// [`GRAD_AUDIO`], or [`GRAD_TEXT`] (row-major `N × D`).
    pub gradients: BTreeMap<&'static str, Vec<f64>>,
}

impl LossValue {
    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.gradients.get(name).map(Vec::as_slice)
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(OtagError::LengthMismatch { what, expected, got });
    }
    Ok(())
}

/// Weighted cross entropy `−mean(w ⊙ [y log ŷ + (1−y) log(1−ŷ)])`.
fn weighted_ce(pred: &[f64], target: &[bool], weights: Option<&[f64]>, eps: f64) -> (f64, Vec<f64>) {
    let k = pred.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (i, (&p, &y)) in pred.iter().zip(target).enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        let clamped = p.clamp(eps, 1.0 - eps);
        let active = p > eps && p < 1.0 - eps;
        if y {
            value -= w * clamped.ln();
            grad.push(if active { -w / (clamped * k) } else { 0.0 });
        } else {
            value -= w * (1.0 - clamped).ln();
            grad.push(if active { w / ((1.0 - clamped) * k) } else { 0.0 });
        }
    }
    (value / k, grad)
}

fn pred_loss(value: f64, grad: Vec<f64>) -> LossValue {
    LossValue {
        value,
        gradients: BTreeMap::from([(GRAD_PRED, grad)]),
    }
}

pub fn bce(pred: &[f64], target: &[bool], cfg: &LossConfig) -> Result<LossValue> {
    check_len("bce target", pred.len(), target.len())?;
    let (v, g) = weighted_ce(pred, target, None, cfg.epsilon);
    Ok(pred_loss(v, g))
}

pub fn obce(pred: &[f64], target: &[bool], r: &ClassWeights, cfg: &LossConfig) -> Result<LossValue> {
    check_len("obce target", pred.len(), target.len())?;
    check_len("obce weights", pred.len(), r.0.len())?;
    let (v, g) = weighted_ce(pred, target, Some(&r.0), cfg.epsilon);
    Ok(pred_loss(v, g))
}

/// Builds OBCE class weights from a clip's targets. Swap implementations to
/// try other weighting rules without touching the loss itself.
pub trait ClassWeighting {
    fn weights(&self, dist: &DistanceMatrix, eval_map: &EvalClassMap, target: &[bool]) -> Result<ClassWeights>;
}

/// `r[c] = 1` for positives, otherwise the distance to the nearest positive
/// divided by the ontology diameter (unreachable classes get 1).
#[derive(Debug, Clone, Copy, Default)]
pub struct NormalizedDistanceWeights;

impl ClassWeighting for NormalizedDistanceWeights {
    fn weights(&self, dist: &DistanceMatrix, eval_map: &EvalClassMap, target: &[bool]) -> Result<ClassWeights> {
        check_len("obce target vs eval map", eval_map.len(), target.len())?;
        let nodes = eval_map.node_indices();
        let positives: Vec<usize> = nodes
            .iter()
            .zip(target)
            .filter(|(_, &t)| t)
            .map(|(&n, _)| n)
            .collect();
        if positives.is_empty() {
            return Err(OtagError::NoPositives);
        }
        let diameter = f64::from(dist.diameter().max(1));
        Ok(ClassWeights(
            nodes
                .iter()
                .zip(target)
                .map(|(&c, &t)| {
                    if t {
                        return 1.0;
                    }
                    let d = positives.iter().map(|&p| dist.raw(c, p)).min().unwrap_or(DistanceMatrix::INFINITY);
                    if d == DistanceMatrix::INFINITY {
                        1.0
                    } else {
                        (f64::from(d) / diameter).min(1.0)
                    }
                })
                .collect(),
        ))
    }
}

pub fn obce_weights(dist: &DistanceMatrix, eval_map: &EvalClassMap, target: &[bool]) -> Result<ClassWeights> {
    NormalizedDistanceWeights.weights(dist, eval_map, target)
}

/// `1 − mean_i cos(E_a, E_t[i])` with gradients for `E_a` and every text row.
pub fn spa_loss(audio: &[f64], text: &Matrix, _cfg: &LossConfig) -> Result<LossValue> {
    check_len("spa text dimension", audio.len(), text.cols())?;
    if text.rows() == 0 {
        return Err(OtagError::NoPositives);
    }
    let na = norm(audio);
    if na == 0.0 {
        return Err(OtagError::ZeroNorm("audio embedding"));
    }
    let n = text.rows() as f64;
    let mut grad_a = vec![0.0; audio.len()];
    let mut grad_t = vec![0.0; text.rows() * text.cols()];
    let mut cos_sum = 0.0;
    for i in 0..text.rows() {
        let t = text.row(i);
        let nt = norm(t);
        if nt == 0.0 {
            return Err(OtagError::ZeroNorm("text embedding"));
        }
        let cos = dot(audio, t) / (na * nt);
        cos_sum += cos;
        // d cos / d a = t/(|a||t|) − cos·a/|a|²  (symmetric for t)
        let gt = &mut grad_t[i * text.cols()..(i + 1) * text.cols()];
        for j in 0..audio.len() {
            grad_a[j] -= (t[j] / (na * nt) - cos * audio[j] / (na * na)) / n;
            gt[j] = -(audio[j] / (na * nt) - cos * t[j] / (nt * nt)) / n;
        }
    }
    Ok(LossValue {
        value: 1.0 - cos_sum / n,
        gradients: BTreeMap::from([(GRAD_AUDIO, grad_a), (GRAD_TEXT, grad_t)]),
    })
}

/// `(BCE + OBCE) / 2 + α·SPA` for one clip.
pub fn total_loss(
    pred: &[f64],
    target: &[bool],
    r: &ClassWeights,
    audio: &[f64],
    text: &Matrix,
    cfg: &LossConfig,
) -> Result<LossValue> {
    let b = bce(pred, target, cfg)?;
    let o = obce(pred, target, r, cfg)?;
    let s = spa_loss(audio, text, cfg)?;
    let grad_pred = b.gradients[GRAD_PRED]
        .iter()
        .zip(&o.gradients[GRAD_PRED])
        .map(|(x, y)| (x + y) / 2.0)
        .collect();
    let scale = |v: &Vec<f64>| v.iter().map(|x| cfg.alpha * x).collect::<Vec<_>>();
    Ok(LossValue {
        value: (b.value + o.value) / 2.0 + cfg.alpha * s.value,
        gradients: BTreeMap::from([
            (GRAD_PRED, grad_pred),
            (GRAD_AUDIO, scale(&s.gradients[GRAD_AUDIO])),
            (GRAD_TEXT, scale(&s.gradients[GRAD_TEXT])),
        ]),
    })
}

/// Batch-averaged loss components and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub bce: f64,
    pub obce: f64,
    /// `None` when no text table was supplied.
    pub spa: Option<f64>,
    pub total: f64,
    /// `M × K`
    pub grad_pred: Matrix,
    /// `M × D`, present with a text table.
    pub grad_audio: Option<Matrix>,
    /// `K × D` per-class text table gradient, present with a text table.
    pub grad_text: Option<Matrix>,
}

/// OBCE weights for every clip, `M × K`. Unlabeled clips get uniform weights.
pub fn batch_weights(
    targets: &[bool],
    n_classes: usize,
    dist: &DistanceMatrix,
    eval_map: &EvalClassMap,
    weighting: &dyn ClassWeighting,
) -> Result<Matrix> {
    let m = if n_classes == 0 { 0 } else { targets.len() / n_classes };
    let mut out = Matrix::zeros(m, n_classes);
    for i in 0..m {
        let row = &targets[i * n_classes..(i + 1) * n_classes];
        let w = match weighting.weights(dist, eval_map, row) {
            Ok(w) => w,
            Err(OtagError::NoPositives) => ClassWeights::uniform(n_classes, 1.0),
            Err(e) => return Err(e),
        };
        out.row_mut(i).copy_from_slice(&w.0);
    }
    Ok(out)
}

/// Per-clip losses averaged over the batch (ascending clip order).
///
/// `text_table` holds one text embedding per class; each clip aligns with the
/// rows of its positive classes. SPA is averaged over clips with at least one
/// label; unlabeled clips contribute only to the classification terms.
pub fn batch_loss(
    pred: &Matrix,
    targets: &[bool],
    weights: &Matrix,
    audio: &Matrix,
    text_table: Option<&Matrix>,
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    let (m, k) = (pred.rows(), pred.cols());
    check_len("batch targets", m * k, targets.len())?;
    check_len("batch weights", m * k, weights.rows() * weights.cols())?;
    let mut bce_sum = 0.0;
    let mut obce_sum = 0.0;
    let mut grad_pred = Matrix::zeros(m, k);
    let mut spa_sum = 0.0;
    let mut spa_count = 0usize;
    let mut grad_audio = text_table.map(|_| Matrix::zeros(m, audio.cols()));
    let mut grad_text = text_table.map(|t| Matrix::zeros(t.rows(), t.cols()));
    if let Some(t) = text_table {
        check_len("audio rows", m, audio.rows())?;
        check_len("text table rows", k, t.rows())?;
    }

    for i in 0..m {
        let p = pred.row(i);
        let y = &targets[i * k..(i + 1) * k];
        let (bv, bg) = weighted_ce(p, y, None, cfg.epsilon);
        let (ov, og) = weighted_ce(p, y, Some(weights.row(i)), cfg.epsilon);
        bce_sum += bv;
        obce_sum += ov;
        for ((g, b), o) in grad_pred.row_mut(i).iter_mut().zip(&bg).zip(&og) {
            *g = (b + o) / (2.0 * m as f64);
        }
        if let Some(table) = text_table {
            let positives: Vec<usize> = (0..k).filter(|&c| y[c]).collect();
            if positives.is_empty() {
                continue;
            }
            let rows = table.select_rows(&positives);
            let s = spa_loss(audio.row(i), &rows, cfg)?;
            spa_sum += s.value;
            spa_count += 1;
            if let Some(ga) = grad_audio.as_mut() {
                ga.row_mut(i).copy_from_slice(&s.gradients[GRAD_AUDIO]);
            }
            if let Some(gt) = grad_text.as_mut() {
                let st = &s.gradients[GRAD_TEXT];
                for (j, &c) in positives.iter().enumerate() {
                    for (dst, src) in gt.row_mut(c).iter_mut().zip(&st[j * table.cols()..(j + 1) * table.cols()]) {
                        *dst += src;
                    }
                }
            }
        }
    }

    let mf = m.max(1) as f64;
    let spa = text_table.map(|_| if spa_count > 0 { spa_sum / spa_count as f64 } else { 0.0 });
    let spa_scale = if spa_count > 0 { cfg.alpha / spa_count as f64 } else { 0.0 };
    for g in grad_audio.iter_mut().chain(grad_text.iter_mut()) {
        g.as_mut_slice().iter_mut().for_each(|v| *v *= spa_scale);
    }
    let bce = bce_sum / mf;
    let obce = obce_sum / mf;
    Ok(BatchLoss {
        bce,
        obce,
        spa,
        total: (bce + obce) / 2.0 + cfg.alpha * spa.unwrap_or(0.0),
        grad_pred,
        grad_audio,
        grad_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::{distance_matrix, OntologyGraph, OntologyNode};

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn bce_reference_values() {
        let eps = cfg().epsilon;
        let v = bce(&[1.0, 0.0, 1.0], &[true, false, true], &cfg()).unwrap();
        assert!(v.value <= 2.0 * eps, "{}", v.value);
        let half = bce(&[0.5; 4], &[true, false, false, true], &cfg()).unwrap();
        assert!((half.value - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce(&[0.5], &[true, false], &cfg()).is_err());
    }

    #[test]
    fn obce_reduces_and_scales() {
        let pred = [0.3, 0.8, 0.1, 0.6];
        let y = [true, false, false, true];
        let b = bce(&pred, &y, &cfg()).unwrap().value;
        let ones = obce(&pred, &y, &ClassWeights::uniform(4, 1.0), &cfg()).unwrap().value;
        assert_eq!(ones, b);

        let mut r = ClassWeights::uniform(4, 1.0);
        r.0[1] = 0.5;
        let halved = obce(&pred, &y, &r, &cfg()).unwrap().value;
        let term = -(1.0f64 - 0.8).ln() / 4.0;
        assert!((b - halved - term / 2.0).abs() < 1e-15);

        let w = obce(&pred, &y, &ClassWeights::uniform(4, 0.3), &cfg()).unwrap().value;
        assert!((w - 0.3 * b).abs() < 1e-15);
    }

    #[test]
    fn spa_reference_values() {
        let a = [1.0, 2.0, 0.0];
        let par = Matrix::from_rows(&[vec![2.0, 4.0, 0.0], vec![0.5, 1.0, 0.0]]).unwrap();
        assert!(spa_loss(&a, &par, &cfg()).unwrap().value.abs() < 1e-15);
        let orth = Matrix::from_rows(&[vec![0.0, 0.0, 3.0], vec![2.0, -1.0, 0.0]]).unwrap();
        assert!((spa_loss(&a, &orth, &cfg()).unwrap().value - 1.0).abs() < 1e-15);
        let anti = Matrix::from_rows(&[vec![-1.0, -2.0, 0.0]]).unwrap();
        assert!((spa_loss(&a, &anti, &cfg()).unwrap().value - 2.0).abs() < 1e-15);
        assert!(matches!(
            spa_loss(&[0.0; 3], &anti, &cfg()),
            Err(OtagError::ZeroNorm(_))
        ));
    }

    #[test]
    fn weights_on_toy_graph() {
        // r -> {a -> {a1, a2}, b}
        let g = OntologyGraph::from_nodes(vec![
            OntologyNode::new("r", "R").with_children(["a", "b"]),
            OntologyNode::new("a", "A").with_children(["a1", "a2"]),
            OntologyNode::new("b", "B"),
            OntologyNode::new("a1", "A1"),
            OntologyNode::new("a2", "A2"),
        ])
        .unwrap();
        let d = distance_matrix(&g, true);
        assert_eq!(d.diameter(), 3);
        let map = EvalClassMap::from_nodes(&g, &[0, 1, 2, 3, 4]).unwrap();
        let w = obce_weights(&d, &map, &[false, false, false, true, false]).unwrap();
        assert_eq!(w.0, vec![2.0 / 3.0, 1.0 / 3.0, 1.0, 1.0, 2.0 / 3.0]);
        assert!(matches!(
            obce_weights(&d, &map, &[false; 5]),
            Err(OtagError::NoPositives)
        ));
    }

    #[test]
    fn total_collapses() {
        let pred = [0.2, 0.7, 0.4];
        let y = [false, true, false];
        let text = Matrix::from_rows(&[vec![0.3, -0.2]]).unwrap();
        let a = [0.5, 0.1];
        let c0 = LossConfig::default();
        let b = bce(&pred, &y, &c0).unwrap().value;
        let r = ClassWeights(vec![0.5, 1.0, 0.25]);
        let o = obce(&pred, &y, &r, &c0).unwrap().value;
        assert_eq!(total_loss(&pred, &y, &r, &a, &text, &c0).unwrap().value, (b + o) / 2.0);
        assert_eq!(
            total_loss(&pred, &y, &ClassWeights::uniform(3, 1.0), &a, &text, &c0).unwrap().value,
            b
        );
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::new(-1.0, 3).is_err());
        let mut c = LossConfig::default();
        c.epsilon = 0.5;
        assert!(c.validate().is_err());
    }
}
