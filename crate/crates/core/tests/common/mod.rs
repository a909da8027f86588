#![allow(dead_code)]
//! Independent oracles shared by the integration tests. Nothing here calls
//! into the library's ranking, BFS or gradient code.

use std::path::PathBuf;

use otag::align_toy::{Affine, ToyModel};
use otag::ontology::{OntologyGraph, OntologyNode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("data")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random DAG on `n` nodes: edges only go from lower to higher index, and each
/// non-root node gets one to three parents.
pub fn random_dag(n: usize, root_share: f64, rng: &mut impl Rng) -> (Vec<OntologyNode>, Vec<(usize, usize)>) {
    let mut edges = Vec::new();
    for child in 1..n {
        if rng.random::<f64>() < root_share {
            continue;
        }
        let n_parents = rng.random_range(1..=3.min(child));
        let mut parents: Vec<usize> = Vec::new();
        while parents.len() < n_parents {
            let p = rng.random_range(0..child);
            if !parents.contains(&p) {
                parents.push(p);
            }
        }
        edges.extend(parents.into_iter().map(|p| (p, child)));
    }
    (nodes_from_edges(n, &edges), edges)
}

pub fn nodes_from_edges(n: usize, edges: &[(usize, usize)]) -> Vec<OntologyNode> {
    (0..n)
        .map(|i| {
            let children: Vec<String> = edges.iter().filter(|e| e.0 == i).map(|e| format!("n{}", e.1)).collect();
            OntologyNode::new(format!("n{i}"), format!("Node {i}")).with_children(children)
        })
        .collect()
}

pub fn graph(n: usize, edges: &[(usize, usize)]) -> OntologyGraph {
    OntologyGraph::from_nodes(nodes_from_edges(n, edges)).unwrap()
}

/// All-pairs hop counts by Floyd–Warshall over undirected edges.
pub fn floyd_warshall(n: usize, edges: &[(usize, usize)]) -> Vec<Option<u32>> {
    const INF: u32 = u32::MAX / 4;
    let mut d = vec![INF; n * n];
    for i in 0..n {
        d[i * n + i] = 0;
    }
    for &(a, b) in edges {
        d[a * n + b] = 1;
        d[b * n + a] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i * n + k] + d[k * n + j];
                if via < d[i * n + j] {
                    d[i * n + j] = via;
                }
            }
        }
    }
    d.into_iter().map(|v| (v < INF).then_some(v)).collect()
}

/// AP from the pairwise definition: item `j` sits above item `i` when it has a
/// higher score, or an equal score and a smaller index. Masked items are
/// absent. `None` without unmasked positives.
pub fn ap_oracle(scores: &[f64], targets: &[bool], mask: &[bool]) -> Option<f64> {
    let live = |j: usize| !mask[j];
    let above = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| targets[i] && live(i)).collect();
    if positives.is_empty() {
        return None;
    }
    let mut terms: Vec<(usize, f64)> = positives
        .iter()
        .map(|&i| {
            let rank = 1 + (0..scores.len()).filter(|&j| live(j) && above(j, i)).count();
            let hits = 1 + positives.iter().filter(|&&j| above(j, i)).count();
            (rank, hits as f64 / rank as f64)
        })
        .collect();
    // Accumulate top-down so the float sum is reproducible bit for bit.
    terms.sort_by_key(|t| t.0);
    let sum = terms.iter().fold(0.0, |acc, t| acc + t.1);
    Some(sum / positives.len() as f64)
}

/// OmAP_λ by explicit mask enumeration. `dist(a, b)` is the class-to-class
/// hop count, `None` when unreachable. Scores and targets are row-major
/// `m × k`.
pub fn omap_oracle(
    scores: &[f64],
    targets: &[bool],
    k: usize,
    dist: impl Fn(usize, usize) -> Option<u32>,
    lambda: u32,
) -> Option<f64> {
    let m = scores.len() / k;
    let mut aps = Vec::new();
    for c in 0..k {
        let col: Vec<f64> = (0..m).map(|i| scores[i * k + c]).collect();
        let tgt: Vec<bool> = (0..m).map(|i| targets[i * k + c]).collect();
        let mask: Vec<bool> = (0..m)
            .map(|i| {
                !tgt[i] && (0..k).any(|p| targets[i * k + p] && dist(c, p).is_some_and(|d| d <= lambda))
            })
            .collect();
        if let Some(ap) = ap_oracle(&col, &tgt, &mask) {
            aps.push(ap);
        }
    }
    (!aps.is_empty()).then(|| aps.iter().fold(0.0, |a, b| a + b) / aps.len() as f64)
}

/// The alternative reading: near false positives count as hits instead of
/// being removed. Classes without a real positive are skipped.
pub fn omap_count_as_true_oracle(
    scores: &[f64],
    targets: &[bool],
    k: usize,
    dist: impl Fn(usize, usize) -> Option<u32>,
    lambda: u32,
) -> Option<f64> {
    let m = scores.len() / k;
    let mut aps = Vec::new();
    for c in 0..k {
        if !(0..m).any(|i| targets[i * k + c]) {
            continue;
        }
        let col: Vec<f64> = (0..m).map(|i| scores[i * k + c]).collect();
        let hit: Vec<bool> = (0..m)
            .map(|i| {
                targets[i * k + c]
                    || (0..k).any(|p| targets[i * k + p] && dist(c, p).is_some_and(|d| d <= lambda))
            })
            .collect();
        aps.push(ap_oracle(&col, &hit, &vec![false; m]).unwrap());
    }
    (!aps.is_empty()).then(|| aps.iter().fold(0.0, |a, b| a + b) / aps.len() as f64)
}

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error with an absolute floor so tiny gradients compare by
/// absolute difference.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y, floor)).fold(0.0, f64::max)
}

/// Small random evaluation problem: a toy DAG, `k` distinct class nodes and
/// an `m × k` score/target grid drawn from a coarse grid so ties happen.
pub struct MetricInstance {
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub class_nodes: Vec<usize>,
    pub scores: Vec<f64>,
    pub targets: Vec<bool>,
    pub m: usize,
    pub k: usize,
}

impl MetricInstance {
    pub fn random(seed: u64, max_nodes: usize, max_m: usize, max_k: usize) -> Self {
        let mut r = rng(seed);
        let n_nodes = r.random_range(1..=max_nodes);
        let (_, edges) = random_dag(n_nodes, 0.25, &mut r);
        let k = r.random_range(1..=max_k.min(n_nodes));
        let mut pool: Vec<usize> = (0..n_nodes).collect();
        let mut class_nodes = Vec::new();
        for _ in 0..k {
            class_nodes.push(pool.swap_remove(r.random_range(0..pool.len())));
        }
        let m = r.random_range(1..=max_m);
        let scores = (0..m * k).map(|_| f64::from(r.random_range(0u8..5)) / 4.0).collect();
        let mut targets: Vec<bool> = (0..m * k).map(|_| r.random_bool(0.35)).collect();
        // Guarantee at least one positive so the instance is evaluable.
        let pick = r.random_range(0..m * k);
        targets[pick] = true;
        Self {
            n_nodes,
            edges,
            class_nodes,
            scores,
            targets,
            m,
            k,
        }
    }

    /// Floyd–Warshall distances over the graph plus a vertex joined to every
    /// root (index `n_nodes`).
    pub fn rooted_distances(&self) -> Vec<Option<u32>> {
        let g = graph(self.n_nodes, &self.edges);
        let mut e = self.edges.clone();
        e.extend(g.roots().iter().map(|&r| (self.n_nodes, r)));
        floyd_warshall(self.n_nodes + 1, &e)
    }

    /// Largest finite distance between real nodes under `rooted_distances`.
    pub fn diameter(&self, fw: &[Option<u32>]) -> u32 {
        let n = self.n_nodes + 1;
        (0..self.n_nodes)
            .flat_map(|i| (0..self.n_nodes).map(move |j| (i, j)))
            .filter_map(|(i, j)| fw[i * n + j])
            .max()
            .unwrap_or(0)
    }

    pub fn class_distance<'a>(&'a self, fw: &'a [Option<u32>]) -> impl Fn(usize, usize) -> Option<u32> + 'a {
        let n = self.n_nodes + 1;
        move |a, b| fw[self.class_nodes[a] * n + self.class_nodes[b]]
    }
}

/// Rows of `a` and `t` (width `d`) have norms far enough from zero for
/// finite differences of cosines to be stable.
pub fn norms_ok(a: &[f64], t: &[f64], d: usize) -> bool {
    a.chunks(d).chain(t.chunks(d)).all(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt() > 0.1)
}

pub fn affine_len(a: &Affine) -> usize {
    a.weights.as_slice().len() + a.bias.len()
}

pub fn flatten(model: &ToyModel) -> Vec<f64> {
    let mut v = Vec::new();
    for a in [&model.audio_proj, &model.text_proj, &model.classifier] {
        v.extend_from_slice(a.weights.as_slice());
        v.extend_from_slice(&a.bias);
    }
    v
}

pub fn unflatten(template: &ToyModel, theta: &[f64]) -> ToyModel {
    let mut model = template.clone();
    let mut rest = theta;
    for a in [&mut model.audio_proj, &mut model.text_proj, &mut model.classifier] {
        let (w, tail) = rest.split_at(a.weights.as_slice().len());
        a.weights.as_mut_slice().copy_from_slice(w);
        let (b, tail) = tail.split_at(a.bias.len());
        a.bias.copy_from_slice(b);
        rest = tail;
    }
    model
}
