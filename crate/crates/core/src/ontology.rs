//! AudioSet ontology graph: parsing, all-pairs distances, root paths, and the
//! evaluation class map.
//!
//! Nodes keep the order of the source file. An optional virtual root can be
//! attached; it is an extra index (`len()`) adjacent to every root and has no
//! [`OntologyNode`] record of its own.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::Read;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OtagError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Restriction {
    Abstract,
    Blacklist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OntologyNode {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub child_ids: Vec<String>,
    #[serde(default)]
    pub restrictions: Vec<Restriction>,
}

impl OntologyNode {
    pub fn new(id: impl Into<String>, name: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            name: name.into(),
            description: String::new(),
            child_ids: Vec::new(),
            restrictions: Vec::new(),
        }
    }

    pub fn with_children<I, S>(mut self, children: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.child_ids = children.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = description.into();
        self
    }
}

/// Record shape of the official JSON file. Extra keys are ignored.
#[derive(Deserialize)]
struct RawNode {
    id: String,
    name: String,
    #[serde(default)]
    description: String,
    child_ids: Vec<String>,
    #[serde(default)]
    restrictions: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct OntologyGraph {
    nodes: Vec<OntologyNode>,
    children: Vec<Vec<usize>>,
    parents: Vec<Vec<usize>>,
    roots: Vec<usize>,
    /// Parent-edge distance from each node to its nearest root.
    depth: Vec<Option<u32>>,
    virtual_root: Option<usize>,
    index: HashMap<String, usize>,
}

/// Parse the official ontology JSON (an array of node records).
pub fn parse_ontology(raw: &[u8]) -> Result<OntologyGraph> {
    let records: Vec<RawNode> = serde_json::from_slice(raw).map_err(|e| OtagError::MalformedJson {
        // At EOF the reported column is the last byte read, not one past it.
        offset: if e.is_eof() { raw.len() } else { byte_offset(raw, e.line(), e.column()) },
        message: e.to_string(),
    })?;
    let nodes = records
        .into_iter()
        .map(|r| OntologyNode {
            id: r.id,
            name: r.name,
            description: r.description,
            child_ids: r.child_ids,
            restrictions: r
                .restrictions
                .iter()
                .filter_map(|s| match s.as_str() {
                    "abstract" => Some(Restriction::Abstract),
                    "blacklist" => Some(Restriction::Blacklist),
                    _ => None,
                })
                .collect(),
        })
        .collect();
    OntologyGraph::from_nodes(nodes)
}

pub fn read_ontology<R: Read>(mut reader: R) -> Result<OntologyGraph> {
    let mut buf = Vec::new();
    reader.read_to_end(&mut buf)?;
    parse_ontology(&buf)
}

fn byte_offset(raw: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in raw.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(raw.len());
        }
        offset += l.len() + 1;
    }
    raw.len()
}

impl OntologyGraph {
    /// Build and validate a graph from node records in file order.
    pub fn from_nodes(nodes: Vec<OntologyNode>) -> Result<Self> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if node.id.is_empty() {
                return Err(OtagError::EmptyId(i));
            }
            if index.insert(node.id.clone(), i).is_some() {
                return Err(OtagError::DuplicateId(node.id.clone()));
            }
        }

        let mut unknown = Vec::new();
        let mut children = vec![Vec::new(); nodes.len()];
        let mut parents = vec![Vec::new(); nodes.len()];
        for (p, node) in nodes.iter().enumerate() {
            let mut seen = HashSet::new();
            for cid in &node.child_ids {
                match index.get(cid) {
                    Some(&c) => {
                        if seen.insert(c) {
                            children[p].push(c);
                            parents[c].push(p);
                        }
                    }
                    None => unknown.push(cid.clone()),
                }
            }
        }
        if !unknown.is_empty() {
            unknown.sort();
            unknown.dedup();
            return Err(OtagError::UnknownChildIds(unknown));
        }

        let roots: Vec<usize> = (0..nodes.len()).filter(|&i| parents[i].is_empty()).collect();
        if roots.is_empty() {
            return Err(OtagError::NoRoots);
        }

        let mut depth = vec![None; nodes.len()];
        let mut queue = VecDeque::new();
        for &r in &roots {
            depth[r] = Some(0);
            queue.push_back(r);
        }
        while let Some(u) = queue.pop_front() {
            let du = depth[u].unwrap_or(0);
            for &c in &children[u] {
                if depth[c].is_none() {
                    depth[c] = Some(du + 1);
                    queue.push_back(c);
                }
            }
        }

        Ok(Self {
            nodes,
            children,
            parents,
            roots,
            depth,
            virtual_root: None,
            index,
        })
    }

    /// Number of real (file) nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of graph vertices including the virtual root, if attached.
    pub fn vertex_count(&self) -> usize {
        self.nodes.len() + usize::from(self.virtual_root.is_some())
    }

    pub fn nodes(&self) -> &[OntologyNode] {
        &self.nodes
    }

    pub fn node(&self, index: usize) -> Result<&OntologyNode> {
        self.nodes.get(index).ok_or(OtagError::NodeOutOfRange {
            index,
            len: self.nodes.len(),
        })
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn children(&self, index: usize) -> &[usize] {
        &self.children[index]
    }

    pub fn parents(&self, index: usize) -> &[usize] {
        &self.parents[index]
    }

    pub fn roots(&self) -> &[usize] {
        &self.roots
    }

    pub fn virtual_root(&self) -> Option<usize> {
        self.virtual_root
    }

    /// Parent-edge distance from `index` to its nearest root.
    pub fn depth(&self, index: usize) -> Option<u32> {
        self.depth.get(index).copied().flatten()
    }

    /// Add a synthetic vertex adjacent to every root. Existing indices keep
    /// their meaning. Calling this on a graph that already has one is a no-op.
    pub fn attach_virtual_root(mut self) -> Self {
        if self.virtual_root.is_none() {
            self.virtual_root = Some(self.nodes.len());
        }
        self
    }

    /// Neighbours of vertex `v`, following child edges and, when `undirected`,
    /// parent edges too. Virtual-root edges point from the virtual root down to
    /// the roots.
    fn for_each_neighbor(&self, v: usize, undirected: bool, mut f: impl FnMut(usize)) {
        if Some(v) == self.virtual_root {
            self.roots.iter().copied().for_each(f);
            return;
        }
        self.children[v].iter().copied().for_each(&mut f);
        if undirected {
            self.parents[v].iter().copied().for_each(&mut f);
            if let Some(vr) = self.virtual_root {
                if self.parents[v].is_empty() {
                    f(vr);
                }
            }
        }
    }

    /// Shortest parent-edge path `[highest parent, ..., node]`.
    ///
    /// Among equally short routes the one whose upward parent sequence is
    /// lexicographically smallest in file order wins.
    pub fn shortest_path_to_root(&self, node: usize) -> Result<Vec<usize>> {
        let n = self.node(node)?;
        let mut d = self
            .depth(node)
            .ok_or_else(|| OtagError::Unrooted(n.id.clone()))?;
        let mut path = vec![node];
        let mut cur = node;
        while d > 0 {
            // greedy smallest parent one level up gives the lexicographic minimum
            cur = *self.parents[cur]
                .iter()
                .filter(|&&p| self.depth[p] == Some(d - 1))
                .min()
                .ok_or_else(|| OtagError::Unrooted(n.id.clone()))?;
            path.push(cur);
            d -= 1;
        }
        path.reverse();
        Ok(path)
    }
}

/// Dense all-pairs hop counts stored as `u8`, with [`DistanceMatrix::INFINITY`]
/// marking unreachable pairs.
///
/// Distances beyond 254 hops are not representable and are reported as
/// unreachable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceMatrix {
    n: usize,
    real: usize,
    d: Vec<u8>,
    diameter: u8,
}

impl DistanceMatrix {
    pub const INFINITY: u8 = u8::MAX;

    /// Vertex count, including a virtual root when one was attached.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Raw entry; [`Self::INFINITY`] when unreachable.
    #[inline]
    pub fn raw(&self, i: usize, j: usize) -> u8 {
        self.d[i * self.n + j]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Option<u8> {
        match self.raw(i, j) {
            Self::INFINITY => None,
            v => Some(v),
        }
    }

    /// Largest finite distance between two real nodes.
    pub fn diameter(&self) -> u8 {
        self.diameter
    }

    /// Largest finite distance among the given vertices.
    pub fn diameter_over(&self, vertices: &[usize]) -> u8 {
        let mut best = 0;
        for &i in vertices {
            for &j in vertices {
                let v = self.raw(i, j);
                if v != Self::INFINITY && v > best {
                    best = v;
                }
            }
        }
        best
    }

    /// Counts of unordered pairs `i < j` over `vertices`, keyed by distance.
    /// Index `d` counts pairs at distance `d`; the final return value counts
    /// unreachable pairs.
    pub fn histogram(&self, vertices: &[usize]) -> (Vec<u64>, u64) {
        let mut hist = vec![0u64; usize::from(self.diameter_over(vertices)) + 1];
        let mut unreachable = 0;
        for (a, &i) in vertices.iter().enumerate() {
            for &j in &vertices[a + 1..] {
                match self.get(i, j) {
                    Some(v) => hist[usize::from(v)] += 1,
                    None => unreachable += 1,
                }
            }
        }
        (hist, unreachable)
    }

    pub fn real_vertices(&self) -> std::ops::Range<usize> {
        0..self.real
    }

    /// Build directly from a square row-major table (test fixtures and
    /// oracles). The diameter is taken over all vertices.
    pub fn from_table(n: usize, d: Vec<u8>) -> Result<Self> {
        if d.len() != n * n {
            return Err(OtagError::LengthMismatch {
                what: "distance table",
                expected: n * n,
                got: d.len(),
            });
        }
        let diameter = d
            .iter()
            .copied()
            .filter(|&v| v != Self::INFINITY)
            .max()
            .unwrap_or(0);
        Ok(Self {
            n,
            real: n,
            d,
            diameter,
        })
    }
}

/// BFS hop counts from every vertex. With `undirected` false only
/// parent→child edges are followed.
///
/// Sources run in parallel; every row is computed independently, so the
/// result does not depend on scheduling.
pub fn distance_matrix(graph: &OntologyGraph, undirected: bool) -> DistanceMatrix {
    let n = graph.vertex_count();
    let rows: Vec<Vec<u8>> = (0..n)
        .into_par_iter()
        .map(|s| bfs_row(graph, s, undirected))
        .collect();
    let d: Vec<u8> = rows.into_iter().flatten().collect();
    let real = graph.len();
    let mut diameter = 0;
    for i in 0..real {
        for &v in &d[i * n..i * n + real] {
            if v != DistanceMatrix::INFINITY && v > diameter {
                diameter = v;
            }
        }
    }
    DistanceMatrix {
        n,
        real,
        d,
        diameter,
    }
}

fn bfs_row(graph: &OntologyGraph, source: usize, undirected: bool) -> Vec<u8> {
    let n = graph.vertex_count();
    let mut row = vec![DistanceMatrix::INFINITY; n];
    row[source] = 0;
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        let next = row[u] + 1;
        if next == DistanceMatrix::INFINITY {
            continue;
        }
        graph.for_each_neighbor(u, undirected, |v| {
            if row[v] == DistanceMatrix::INFINITY {
                row[v] = next;
                queue.push_back(v);
            }
        });
    }
    row
}

/// One row of the class-list CSV (`index,mid,display_name`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub index: usize,
    pub mid: String,
    pub display_name: String,
}

pub fn read_class_list<R: Read>(reader: R) -> Result<Vec<ClassRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EvalClass {
    pub eval_index: usize,
    pub node: usize,
    pub mid: String,
    pub display_name: String,
}

/// Evaluation classes in column order, each bound to an ontology node.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct EvalClassMap {
    entries: Vec<EvalClass>,
}

impl EvalClassMap {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[EvalClass] {
        &self.entries
    }

    pub fn get(&self, eval_index: usize) -> Option<&EvalClass> {
        self.entries.get(eval_index)
    }

    pub fn node_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.node).collect()
    }

    pub fn position_of(&self, mid: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.mid == mid)
    }

    /// Evaluation map over the given graph nodes, in the given order, using
    /// the ontology display names.
    pub fn from_nodes(graph: &OntologyGraph, nodes: &[usize]) -> Result<Self> {
        let records = nodes
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let node = graph.node(n)?;
                Ok(ClassRecord {
                    index: i,
                    mid: node.id.clone(),
                    display_name: node.name.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        build_eval_map(graph, &records)
    }
}

/// Bind class-list records to ontology nodes. Records must appear in
/// evaluation order with indices `0..K`.
pub fn build_eval_map(graph: &OntologyGraph, records: &[ClassRecord]) -> Result<EvalClassMap> {
    let mut seen_index = HashSet::new();
    let mut seen_mid = HashSet::new();
    let mut entries = Vec::with_capacity(records.len());
    for (pos, rec) in records.iter().enumerate() {
        if !seen_index.insert(rec.index) {
            return Err(OtagError::DuplicateEvalIndex(rec.index));
        }
        if rec.index != pos {
            return Err(OtagError::NonContiguousIndex {
                expected: pos,
                found: rec.index,
            });
        }
        let node = graph
            .index_of(&rec.mid)
            .ok_or_else(|| OtagError::UnknownMid(rec.mid.clone()))?;
        if !seen_mid.insert(rec.mid.as_str()) {
            return Err(OtagError::DuplicateMid(rec.mid.clone()));
        }
        entries.push(EvalClass {
            eval_index: rec.index,
            node,
            mid: rec.mid.clone(),
            display_name: rec.display_name.clone(),
        });
    }
    Ok(EvalClassMap { entries })
}
