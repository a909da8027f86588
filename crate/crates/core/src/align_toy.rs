//! Desk-scale audio/text alignment pipeline.
//!
//! Fixed "encoder outputs" (audio rows `X̂`, per-class text rows `T̂`) pass
//! through two learned affine projectors into a joint space; a linear
//! classifier with a sigmoid maps the audio embedding to class
//! probabilities. Training minimizes `(BCE + OBCE)/2 + α·SPA` by plain
//! gradient descent. Everything is seeded and single-threaded.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::descriptions::{build_table, hashed_bow_embedding, DescriptionMethod};
use crate::error::{OtagError, Result};
use crate::losses::{batch_loss, batch_weights, LossConfig, NormalizedDistanceWeights};
use crate::matrix::{dot, norm, Matrix};
use crate::metrics::{delta_curve, omap_report, OmapReport, PredictionSet};
use crate::ontology::{distance_matrix, DistanceMatrix, EvalClassMap, OntologyGraph, OntologyNode};

/// `y = x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    /// Uniform in `[−1/√fan_in, 1/√fan_in]` for weights and bias.
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut sample = || rng.random_range(-bound..=bound);
        let weights = (0..fan_in * fan_out).map(|_| sample()).collect();
        let bias = (0..fan_out).map(|_| sample()).collect();
        Self {
            weights: Matrix::from_vec(fan_in, fan_out, weights).expect("shape"),
            bias,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut weights = Matrix::zeros(n, n);
        for i in 0..n {
            weights.set(i, i, 1.0);
        }
        Self {
            weights,
            bias: vec![0.0; n],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weights)?;
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }

    fn step(&mut self, grad: &AffineGrad, lr: f64) {
        for (w, g) in self.weights.as_mut_slice().iter_mut().zip(grad.weights.as_slice()) {
            *w -= lr * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&grad.bias) {
            *b -= lr * g;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl AffineGrad {
    /// Gradient of an affine layer given its input and the output gradient.
    fn from_backprop(input: &Matrix, grad_out: &Matrix) -> Result<Self> {
        let weights = input.t_matmul(grad_out)?;
        let mut bias = vec![0.0; grad_out.cols()];
        for r in 0..grad_out.rows() {
            for (b, g) in bias.iter_mut().zip(grad_out.row(r)) {
                *b += g;
            }
        }
        Ok(Self { weights, bias })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    /// `p_a`: U → D
    pub audio_proj: Affine,
    /// `p_t`: V → D
    pub text_proj: Affine,
    /// `c_a`: D → K
    pub classifier: Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDims {
    pub audio: usize,
    pub text: usize,
    pub joint: usize,
    pub classes: usize,
}

impl ToyModel {
    pub fn new(dims: ToyDims, seed: u64) -> Result<Self> {
        if dims.joint == 0 || dims.audio == 0 || dims.text == 0 {
            return Err(OtagError::InvalidConfig("model dimensions must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            audio_proj: Affine::init(dims.audio, dims.joint, &mut rng),
            text_proj: Affine::init(dims.text, dims.joint, &mut rng),
            classifier: Affine::init(dims.joint, dims.classes, &mut rng),
        })
    }

    pub fn dims(&self) -> ToyDims {
        ToyDims {
            audio: self.audio_proj.in_dim(),
            text: self.text_proj.in_dim(),
            joint: self.audio_proj.out_dim(),
            classes: self.classifier.out_dim(),
        }
    }

    fn is_finite(&self) -> bool {
        self.audio_proj.is_finite() && self.text_proj.is_finite() && self.classifier.is_finite()
    }
}

/// Fixed encoder outputs with targets.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationBatch {
    /// `M × U`
    pub audio: Matrix,
    /// `K × V`, one row per class.
    pub text: Matrix,
    /// `M × K`, row-major.
    pub targets: Vec<bool>,
}

impl RepresentationBatch {
    pub fn n_clips(&self) -> usize {
        self.audio.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.text.rows()
    }

    pub fn target_row(&self, clip: usize) -> &[bool] {
        let k = self.n_classes();
        &self.targets[clip * k..(clip + 1) * k]
    }

    pub fn select_clips(&self, clips: &[usize]) -> Self {
        Self {
            audio: self.audio.select_rows(clips),
            text: self.text.clone(),
            targets: clips
                .iter()
                .flat_map(|&m| self.target_row(m).iter().copied())
                .collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.targets.len() != self.n_clips() * self.n_classes() {
            return Err(OtagError::LengthMismatch {
                what: "batch targets",
                expected: self.n_clips() * self.n_classes(),
                got: self.targets.len(),
            });
        }
        if !self.audio.is_finite() || !self.text.is_finite() {
            return Err(OtagError::NonFinite("representation batch"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `E_a`, `M × D`
    pub audio_emb: Matrix,
    /// `E_t`, `K × D`
    pub text_emb: Matrix,
    /// Per clip, cosine of `E_a` against the text embeddings of its positive
    /// classes (ascending class index).
    pub similarities: Vec<Vec<f64>>,
    /// `sigmoid(c_a(E_a))`, `M × K`
    pub pred: Matrix,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_dims(model: &ToyModel, batch: &RepresentationBatch) -> Result<()> {
    let d = model.dims();
    let mismatch = |what, expected, got| Err(OtagError::LengthMismatch { what, expected, got });
    if batch.audio.cols() != d.audio {
        return mismatch("audio representation width", d.audio, batch.audio.cols());
    }
    if batch.text.cols() != d.text {
        return mismatch("text representation width", d.text, batch.text.cols());
    }
    if batch.n_classes() != d.classes {
        return mismatch("class count", d.classes, batch.n_classes());
    }
    Ok(())
}

/// Audio branch only: `(E_a, pred)`. Never reads `p_t`.
pub fn forward_audio(model: &ToyModel, audio: &Matrix) -> Result<(Matrix, Matrix)> {
    let emb = model.audio_proj.apply(audio)?;
    let mut pred = model.classifier.apply(&emb)?;
    pred.as_mut_slice().iter_mut().for_each(|v| *v = sigmoid(*v));
    Ok((emb, pred))
}

pub fn forward(model: &ToyModel, batch: &RepresentationBatch) -> Result<ForwardOutput> {
    check_dims(model, batch)?;
    batch.validate()?;
    let (audio_emb, pred) = forward_audio(model, &batch.audio)?;
    let text_emb = model.text_proj.apply(&batch.text)?;
    let similarities = (0..batch.n_clips())
        .map(|m| {
            let a = audio_emb.row(m);
            batch
                .target_row(m)
                .iter()
                .enumerate()
                .filter(|(_, &t)| t)
                .map(|(c, _)| {
                    let t = text_emb.row(c);
                    dot(a, t) / (norm(a) * norm(t))
                })
                .collect()
        })
        .collect();
    Ok(ForwardOutput {
        audio_emb,
        text_emb,
        similarities,
        pred,
    })
}

/// Parameter gradients of the batch objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub audio_proj: AffineGrad,
    /// `None` when the text branch is off.
    pub text_proj: Option<AffineGrad>,
    pub classifier: AffineGrad,
}

/// Batch objective and its gradient with respect to every parameter. With
/// `use_text` false the SPA term and `p_t` are skipped entirely.
pub fn objective_and_grad(
    model: &ToyModel,
    batch: &RepresentationBatch,
    weights: &Matrix,
    cfg: &LossConfig,
    use_text: bool,
) -> Result<(crate::losses::BatchLoss, ModelGrad)> {
    check_dims(model, batch)?;
    let (audio_emb, pred) = forward_audio(model, &batch.audio)?;
    let text_emb = if use_text {
        Some(model.text_proj.apply(&batch.text)?)
    } else {
        None
    };
    let loss = batch_loss(&pred, &batch.targets, weights, &audio_emb, text_emb.as_ref(), cfg)?;

    let mut grad_logits = loss.grad_pred.clone();
    for (g, p) in grad_logits.as_mut_slice().iter_mut().zip(pred.as_slice()) {
        *g *= p * (1.0 - p);
    }
    let classifier = AffineGrad::from_backprop(&audio_emb, &grad_logits)?;
    let mut grad_emb = grad_logits.matmul_t(&model.classifier.weights)?;
    if let Some(ga) = &loss.grad_audio {
        for (g, s) in grad_emb.as_mut_slice().iter_mut().zip(ga.as_slice()) {
            *g += s;
        }
    }
    let audio_proj = AffineGrad::from_backprop(&batch.audio, &grad_emb)?;
    let text_proj = match &loss.grad_text {
        Some(gt) => Some(AffineGrad::from_backprop(&batch.text, gt)?),
        None => None,
    };
    Ok((
        loss,
        ModelGrad {
            audio_proj,
            text_proj,
            classifier,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    /// Clips per step; 0 means the full batch.
    pub batch_size: usize,
    pub use_spa: bool,
    /// Joint embedding width D.
    #[serde(default = "default_joint_dim")]
    pub joint_dim: usize,
}

fn default_joint_dim() -> usize {
    16
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 1500,
            learning_rate: 2.0,
            alpha: 0.5,
            batch_size: 0,
            use_spa: true,
            joint_dim: default_joint_dim(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(OtagError::InvalidConfig(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(OtagError::InvalidConfig(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if self.joint_dim == 0 {
            return Err(OtagError::InvalidConfig("joint_dim must be at least 1".into()));
        }
        Ok(())
    }

    fn effective_alpha(&self) -> f64 {
        if self.use_spa {
            self.alpha
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub bce: f64,
    pub obce: f64,
    pub spa: Option<f64>,
}

/// Gradient descent on the combined objective. Returns the trained model and
/// the loss measured before each update.
pub fn train(
    model: ToyModel,
    data: &RepresentationBatch,
    dist: &DistanceMatrix,
    eval_map: &EvalClassMap,
    cfg: &TrainConfig,
) -> Result<(ToyModel, Vec<StepRecord>)> {
    cfg.validate()?;
    data.validate()?;
    check_dims(&model, data)?;
    if data.n_clips() == 0 {
        return Err(OtagError::InvalidConfig("training data is empty".into()));
    }
    let loss_cfg = LossConfig {
        alpha: cfg.effective_alpha(),
        diameter: dist.diameter(),
        ..LossConfig::default()
    };
    let weights = batch_weights(&data.targets, data.n_classes(), dist, eval_map, &NormalizedDistanceWeights)?;

    let mut model = model;
    let mut history = Vec::with_capacity(cfg.steps);
    let n = data.n_clips();
    let full = cfg.batch_size == 0 || cfg.batch_size >= n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;

    for step in 0..cfg.steps {
        let (loss, grad) = if full {
            objective_and_grad(&model, data, &weights, &loss_cfg, cfg.use_spa)?
        } else {
            if cursor + cfg.batch_size > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + cfg.batch_size];
            cursor += cfg.batch_size;
            let sub = data.select_clips(idx);
            let w = weights.select_rows(idx);
            objective_and_grad(&model, &sub, &w, &loss_cfg, cfg.use_spa)?
        };
        if !loss.total.is_finite() {
            return Err(OtagError::NonFiniteLoss(step));
        }
        history.push(StepRecord {
            step,
            total: loss.total,
            bce: loss.bce,
            obce: loss.obce,
            spa: loss.spa,
        });
        model.audio_proj.step(&grad.audio_proj, cfg.learning_rate);
        model.classifier.step(&grad.classifier, cfg.learning_rate);
        if let Some(g) = &grad.text_proj {
            model.text_proj.step(g, cfg.learning_rate);
        }
        if !model.is_finite() {
            return Err(OtagError::NonFiniteLoss(step));
        }
    }
    Ok((model, history))
}

/// Where the per-class text representations come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextSource {
    /// Class means of a second hierarchical draw correlated with the audio draw.
    #[default]
    Hierarchical,
    /// Hashed bag-of-words embeddings of the class descriptions.
    Direct,
    Prompt,
    Desc,
    Concat,
}

impl TextSource {
    fn method(self) -> Option<DescriptionMethod> {
        match self {
            TextSource::Hierarchical => None,
            TextSource::Direct => Some(DescriptionMethod::Direct),
            TextSource::Prompt => Some(DescriptionMethod::Prompt(Default::default())),
            TextSource::Desc => Some(DescriptionMethod::Desc),
            TextSource::Concat => Some(DescriptionMethod::Concat),
        }
    }
}

/// Parameters of the synthetic stand-in dataset. Every leaf of `ontology` is
/// one evaluation class.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub ontology: OntologyGraph,
    pub clips_per_class: usize,
    pub noise_scale: f64,
    /// Share of a node's audio mean inherited from its parent.
    pub within_family_correlation: f64,
    /// Same, for the text draw.
    pub text_correlation: f64,
    /// Correlation between each node's audio and text innovations.
    pub text_audio_correlation: f64,
    pub audio_dim: usize,
    pub text_dim: usize,
    pub text_source: TextSource,
}

/// Parameters of [`toy_ontology`] plus the rest of [`SyntheticSpec`], in a
/// serializable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    pub families: usize,
    pub groups_per_family: usize,
    pub leaves_per_group: usize,
    pub clips_per_class: usize,
    pub noise_scale: f64,
    pub within_family_correlation: f64,
    pub text_correlation: f64,
    pub text_audio_correlation: f64,
    pub audio_dim: usize,
    pub text_dim: usize,
    pub text_source: TextSource,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            families: 3,
            groups_per_family: 3,
            leaves_per_group: 3,
            clips_per_class: 10,
            noise_scale: 2.5,
            within_family_correlation: 0.3,
            text_correlation: 0.7,
            text_audio_correlation: 0.5,
            audio_dim: 32,
            text_dim: 32,
            text_source: TextSource::Hierarchical,
        }
    }
}

impl SyntheticParams {
    pub fn to_spec(&self) -> Result<SyntheticSpec> {
        Ok(SyntheticSpec {
            ontology: toy_ontology(self.families, self.groups_per_family, self.leaves_per_group)?,
            clips_per_class: self.clips_per_class,
            noise_scale: self.noise_scale,
            within_family_correlation: self.within_family_correlation,
            text_correlation: self.text_correlation,
            text_audio_correlation: self.text_audio_correlation,
            audio_dim: self.audio_dim,
            text_dim: self.text_dim,
            text_source: self.text_source,
        })
    }
}

/// Three-level forest: `families` roots, each with `groups_per_family`
/// children, each with `leaves_per_group` leaves.
pub fn toy_ontology(families: usize, groups_per_family: usize, leaves_per_group: usize) -> Result<OntologyGraph> {
    let mut nodes = Vec::new();
    for f in 0..families {
        let groups: Vec<String> = (0..groups_per_family).map(|g| format!("/toy/{f}/{g}")).collect();
        nodes.push(OntologyNode::new(format!("/toy/{f}"), format!("fam{f}")).with_children(groups));
        for g in 0..groups_per_family {
            let leaves: Vec<String> = (0..leaves_per_group).map(|l| format!("/toy/{f}/{g}/{l}")).collect();
            nodes.push(OntologyNode::new(format!("/toy/{f}/{g}"), format!("grp{f}x{g}")).with_children(leaves));
            for l in 0..leaves_per_group {
                nodes.push(OntologyNode::new(
                    format!("/toy/{f}/{g}/{l}"),
                    format!("snd{f}x{g}x{l}"),
                ));
            }
        }
    }
    OntologyGraph::from_nodes(nodes)
}

/// Generated clips plus the bookkeeping needed to evaluate them.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub batch: RepresentationBatch,
    pub eval_map: EvalClassMap,
    /// Class of each clip.
    pub clip_class: Vec<usize>,
    /// Audio class means, `K × U`.
    pub audio_means: Matrix,
}

fn gaussian_vectors(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect())
        .collect()
}

/// Node vectors built top-down from per-node innovations `g`:
/// `m(root) = g`, `m(child) = √ρ·m(parent) + √(1−ρ)·g`.
fn compose_hierarchy(graph: &OntologyGraph, innovations: &[Vec<f64>], rho: f64) -> Result<Vec<Vec<f64>>> {
    let (keep, add) = (rho.sqrt(), (1.0 - rho).sqrt());
    (0..graph.len())
        .map(|node| {
            let path = graph.shortest_path_to_root(node)?;
            let mut m = innovations[path[0]].clone();
            for &p in &path[1..] {
                for (v, g) in m.iter_mut().zip(&innovations[p]) {
                    *v = keep * *v + add * g;
                }
            }
            Ok(m)
        })
        .collect()
}

/// Text innovations `τ·R·g_audio + √(1−τ²)·h`, with `R` a fixed Gaussian
/// `V × U` map scaled by `1/√U` and `h` fresh noise.
fn correlated_innovations(audio: &[Vec<f64>], dim: usize, tau: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let u = audio.first().map_or(0, Vec::len);
    let scale = 1.0 / (u.max(1) as f64).sqrt();
    let proj = gaussian_vectors(dim, u, rng);
    let fresh = gaussian_vectors(audio.len(), dim, rng);
    let other = (1.0 - tau * tau).sqrt();
    audio
        .iter()
        .zip(fresh)
        .map(|(g, h)| {
            proj.iter()
                .zip(h)
                .map(|(row, hj)| tau * scale * dot(row, g) + other * hj)
                .collect()
        })
        .collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    let leaves: Vec<usize> = (0..spec.ontology.len())
        .filter(|&i| spec.ontology.children(i).is_empty())
        .collect();
    if leaves.is_empty() || spec.clips_per_class == 0 {
        return Err(OtagError::InvalidConfig("synthetic spec has no classes or clips".into()));
    }
    if spec.audio_dim == 0 || spec.text_dim == 0 {
        return Err(OtagError::InvalidConfig("representation widths must be at least 1".into()));
    }
    for (name, v) in [
        ("within_family_correlation", spec.within_family_correlation),
        ("text_correlation", spec.text_correlation),
    ] {
        if !(0.0..1.0).contains(&v) {
            return Err(OtagError::InvalidConfig(format!("{name} must lie in [0, 1), got {v}")));
        }
    }
    if !(0.0..=1.0).contains(&spec.text_audio_correlation) {
        return Err(OtagError::InvalidConfig(format!(
            "text_audio_correlation must lie in [0, 1], got {}",
            spec.text_audio_correlation
        )));
    }
    if !(spec.noise_scale >= 0.0 && spec.noise_scale.is_finite()) {
        return Err(OtagError::InvalidConfig("noise_scale must be finite and non-negative".into()));
    }
    let eval_map = EvalClassMap::from_nodes(&spec.ontology, &leaves)?;
    let k = leaves.len();

    let mut audio_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let audio_innov = gaussian_vectors(spec.ontology.len(), spec.audio_dim, &mut audio_rng);
    let audio_nodes = compose_hierarchy(&spec.ontology, &audio_innov, spec.within_family_correlation)?;
    let mut audio_means = Matrix::zeros(k, spec.audio_dim);
    for (c, &leaf) in leaves.iter().enumerate() {
        audio_means.row_mut(c).copy_from_slice(&audio_nodes[leaf]);
    }

    let text = match spec.text_source.method() {
        None => {
            let innov = correlated_innovations(&audio_innov, spec.text_dim, spec.text_audio_correlation, &mut text_rng);
            let nodes = compose_hierarchy(&spec.ontology, &innov, spec.text_correlation)?;
            Matrix::from_rows(&leaves.iter().map(|&l| nodes[l].clone()).collect::<Vec<_>>())?
        }
        Some(method) => {
            let table = build_table(&spec.ontology, &eval_map, &method)?;
            let text_seed = text_rng.random();
            let rows: Vec<Vec<f64>> = table
                .rows
                .iter()
                .map(|r| hashed_bow_embedding(&r.text, spec.text_dim, text_seed))
                .collect();
            Matrix::from_rows(&rows)?
        }
    };

    let m = k * spec.clips_per_class;
    let mut audio = Matrix::zeros(m, spec.audio_dim);
    let mut targets = vec![false; m * k];
    let mut clip_class = Vec::with_capacity(m);
    for c in 0..k {
        for j in 0..spec.clips_per_class {
            let row = c * spec.clips_per_class + j;
            for (v, &mu) in audio.row_mut(row).iter_mut().zip(audio_means.row(c)) {
                let z: f64 = StandardNormal.sample(&mut audio_rng);
                *v = mu + spec.noise_scale * z;
            }
            targets[row * k + c] = true;
            clip_class.push(c);
        }
    }
    Ok(SyntheticData {
        batch: RepresentationBatch { audio, text, targets },
        eval_map,
        clip_class,
        audio_means,
    })
}

/// Seeded stratified split: `holdout` fraction of each class's clips go to the
/// second list.
pub fn stratified_split(clip_class: &[usize], holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_classes = clip_class.iter().copied().max().map_or(0, |c| c + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..n_classes {
        let mut clips: Vec<usize> = (0..clip_class.len()).filter(|&m| clip_class[m] == c).collect();
        clips.shuffle(&mut rng);
        let n_test = ((clips.len() as f64) * holdout).round() as usize;
        test.extend_from_slice(&clips[..n_test]);
        train.extend_from_slice(&clips[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

const SPLIT_SALT: u64 = 0x5b11_7000_00ff;

pub const HOLDOUT_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigPair {
    pub with_spa: TrainConfig,
    pub without_spa: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaPoint {
    pub lambda: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub with_spa: OmapReport,
    pub without_spa: OmapReport,
    /// `with_spa − without_spa` per level.
    pub delta: Vec<DeltaPoint>,
    pub configs: ConfigPair,
    pub final_loss_with_spa: f64,
    pub final_loss_without_spa: f64,
}

/// Train both configurations on identical data and initialization, then
/// evaluate each on the same held-out clips.
pub fn run_experiment(spec: &SyntheticSpec, with_spa: &TrainConfig, without_spa: &TrainConfig) -> Result<ExperimentReport> {
    let same = |a: &TrainConfig, b: &TrainConfig| {
        a.seed == b.seed
            && a.steps == b.steps
            && a.learning_rate == b.learning_rate
            && a.batch_size == b.batch_size
            && a.joint_dim == b.joint_dim
    };
    if !same(with_spa, without_spa) {
        return Err(OtagError::InvalidConfig(
            "paired configs may differ only in use_spa and alpha".into(),
        ));
    }
    let seed = with_spa.seed;
    let data = generate_synthetic(spec, seed)?;
    let dist = distance_matrix(&spec.ontology.clone().attach_virtual_root(), true);
    let (train_idx, test_idx) = stratified_split(&data.clip_class, HOLDOUT_FRACTION, seed);
    let train_batch = data.batch.select_clips(&train_idx);
    let test_batch = data.batch.select_clips(&test_idx);
    let dims = ToyDims {
        audio: spec.audio_dim,
        text: spec.text_dim,
        joint: with_spa.joint_dim,
        classes: data.eval_map.len(),
    };
    let init = ToyModel::new(dims, seed.wrapping_mul(31).wrapping_add(7))?;

    let evaluate = |cfg: &TrainConfig| -> Result<(OmapReport, f64)> {
        let (model, history) = train(init.clone(), &train_batch, &dist, &data.eval_map, cfg)?;
        let (_, pred) = forward_audio(&model, &test_batch.audio)?;
        let preds = PredictionSet::new(
            test_idx.iter().map(|m| format!("clip{m}")).collect(),
            pred,
            test_batch.targets.clone(),
        )?;
        let report = omap_report(&preds, &dist, &data.eval_map)?;
        Ok((report, history.last().map_or(f64::NAN, |h| h.total)))
    };
    let (spa_report, spa_loss) = evaluate(with_spa)?;
    let (base_report, base_loss) = evaluate(without_spa)?;
    let delta = delta_curve(&spa_report, &base_report)?
        .into_iter()
        .map(|(lambda, delta)| DeltaPoint { lambda, delta })
        .collect();
    Ok(ExperimentReport {
        with_spa: spa_report,
        without_spa: base_report,
        delta,
        configs: ConfigPair {
            with_spa: with_spa.clone(),
            without_spa: without_spa.clone(),
        },
        final_loss_with_spa: spa_loss,
        final_loss_without_spa: base_loss,
    })
}

/// Flat `toy-run` configuration: the training and synthetic-data fields in
/// one object. `seed` is required; everything else defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyRunConfig {
    pub seed: u64,
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default = "default_joint_dim")]
    pub joint_dim: usize,
    #[serde(default = "defaults::families")]
    pub families: usize,
    #[serde(default = "defaults::groups_per_family")]
    pub groups_per_family: usize,
    #[serde(default = "defaults::leaves_per_group")]
    pub leaves_per_group: usize,
    #[serde(default = "defaults::clips_per_class")]
    pub clips_per_class: usize,
    #[serde(default = "defaults::noise_scale")]
    pub noise_scale: f64,
    #[serde(default = "defaults::within_family_correlation")]
    pub within_family_correlation: f64,
    #[serde(default = "defaults::text_correlation")]
    pub text_correlation: f64,
    #[serde(default = "defaults::text_audio_correlation")]
    pub text_audio_correlation: f64,
    #[serde(default = "defaults::audio_dim")]
    pub audio_dim: usize,
    #[serde(default = "defaults::text_dim")]
    pub text_dim: usize,
    #[serde(default)]
    pub text_source: TextSource,
}

mod defaults {
    use super::{SyntheticParams, TrainConfig};

    macro_rules! from_default {
        ($ty:ident: $($field:ident -> $out:ty),*) => {
            $(pub fn $field() -> $out {
                $ty::default().$field
            })*
        };
    }
    from_default!(TrainConfig: steps -> usize, learning_rate -> f64, alpha -> f64);
    from_default!(SyntheticParams: families -> usize, groups_per_family -> usize,
        leaves_per_group -> usize, clips_per_class -> usize, noise_scale -> f64,
        within_family_correlation -> f64, text_correlation -> f64,
        text_audio_correlation -> f64, audio_dim -> usize, text_dim -> usize);
}

impl ToyRunConfig {
    pub fn with_seed(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "seed": seed })).expect("defaults deserialize")
    }

    pub fn synthetic(&self) -> SyntheticParams {
        SyntheticParams {
            families: self.families,
            groups_per_family: self.groups_per_family,
            leaves_per_group: self.leaves_per_group,
            clips_per_class: self.clips_per_class,
            noise_scale: self.noise_scale,
            within_family_correlation: self.within_family_correlation,
            text_correlation: self.text_correlation,
            text_audio_correlation: self.text_audio_correlation,
            audio_dim: self.audio_dim,
            text_dim: self.text_dim,
            text_source: self.text_source,
        }
    }

    /// The `(with SPA, without SPA)` training pair for `seed`.
    pub fn train_pair(&self, seed: u64) -> (TrainConfig, TrainConfig) {
        let with = TrainConfig {
            seed,
            steps: self.steps,
            learning_rate: self.learning_rate,
            alpha: self.alpha,
            batch_size: self.batch_size,
            use_spa: true,
            joint_dim: self.joint_dim,
        };
        let without = TrainConfig {
            use_spa: false,
            alpha: 0.0,
            ..with.clone()
        };
        (with, without)
    }

    pub fn run(&self, seed: u64) -> Result<ExperimentReport> {
        let spec = self.synthetic().to_spec()?;
        let (with, without) = self.train_pair(seed);
        with.validate()?;
        run_experiment(&spec, &with, &without)
    }
}
