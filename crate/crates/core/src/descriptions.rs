//! Per-class language descriptions and embedding export.

use std::fmt;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{OtagError, Result};
use crate::io::fmt_sig9;
use crate::ontology::{EvalClassMap, OntologyGraph};

pub const LABEL_PLACEHOLDER: &str = "{label}";
pub const DEFAULT_PROMPT: &str = "the sound of {label}";
pub const CONCAT_SEPARATOR: &str = " > ";

/// A prompt with exactly one `{label}` placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptTemplate(String);

impl PromptTemplate {
    pub fn new(template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        let count = template.matches(LABEL_PLACEHOLDER).count();
        if count != 1 {
            return Err(OtagError::BadTemplate(count));
        }
        Ok(Self(template))
    }

    pub fn render(&self, label: &str) -> String {
        self.0.replacen(LABEL_PLACEHOLDER, label, 1)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self(DEFAULT_PROMPT.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum DescriptionMethod {
    /// Display name verbatim.
    Direct,
    /// Display name substituted into a template.
    Prompt(PromptTemplate),
    /// The ontology's free-text description, falling back to the display name.
    Desc,
    /// Display names along the shortest root path, root first.
    Concat,
}

impl DescriptionMethod {
    pub const NAMES: [&'static str; 4] = ["direct", "prompt", "desc", "concat"];

    /// Parse a method name; `template` only applies to `prompt`.
    pub fn from_name(name: &str, template: Option<&str>) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "direct" => Ok(Self::Direct),
            "prompt" => Ok(Self::Prompt(match template {
                Some(t) => PromptTemplate::new(t)?,
                None => PromptTemplate::default(),
            })),
            "desc" => Ok(Self::Desc),
            "concat" => Ok(Self::Concat),
            _ => Err(OtagError::UnknownMethod(name.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::Prompt(_) => "prompt",
            Self::Desc => "desc",
            Self::Concat => "concat",
        }
    }
}

impl fmt::Display for DescriptionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn build_description(
    graph: &OntologyGraph,
    node: usize,
    method: &DescriptionMethod,
) -> Result<String> {
    let n = graph.node(node)?;
    Ok(match method {
        DescriptionMethod::Direct => n.name.clone(),
        DescriptionMethod::Prompt(t) => t.render(&n.name),
        DescriptionMethod::Desc => {
            if n.description.trim().is_empty() {
                n.name.clone()
            } else {
                n.description.clone()
            }
        }
        DescriptionMethod::Concat => {
            let path = graph.shortest_path_to_root(node)?;
            let names: Vec<&str> = path
                .iter()
                .map(|&i| graph.nodes()[i].name.as_str())
                .collect();
            names.join(CONCAT_SEPARATOR)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DescriptionRow {
    pub eval_index: usize,
    pub mid: String,
    pub text: String,
    /// Display name of the root that starts this class's root path.
    pub top_parent: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DescriptionTable {
    pub method: DescriptionMethod,
    pub rows: Vec<DescriptionRow>,
}

pub fn build_table(
    graph: &OntologyGraph,
    eval_map: &EvalClassMap,
    method: &DescriptionMethod,
) -> Result<DescriptionTable> {
    let rows = eval_map
        .entries()
        .iter()
        .map(|e| {
            let path = graph.shortest_path_to_root(e.node)?;
            Ok(DescriptionRow {
                eval_index: e.eval_index,
                mid: e.mid.clone(),
                text: build_description(graph, e.node, method)?,
                top_parent: graph.nodes()[path[0]].name.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DescriptionTable {
        method: method.clone(),
        rows,
    })
}

impl DescriptionTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Write `index<TAB>mid<TAB>description` with a header row.
    pub fn write_tsv<W: Write>(&self, mut sink: W) -> Result<()> {
        writeln!(sink, "index\tmid\tdescription")?;
        for row in &self.rows {
            writeln!(sink, "{}\t{}\t{}", row.eval_index, row.mid, tsv_clean(&row.text))?;
        }
        sink.flush()?;
        Ok(())
    }
}

fn tsv_clean(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

/// Descriptions of the positive classes of one clip, in eval-index order.
pub fn select_positive_descriptions<'a>(
    table: &'a DescriptionTable,
    target: &[bool],
) -> Result<Vec<&'a str>> {
    if target.len() != table.rows.len() {
        return Err(OtagError::LengthMismatch {
            what: "target vs description table",
            expected: table.rows.len(),
            got: target.len(),
        });
    }
    let out: Vec<&str> = table
        .rows
        .iter()
        .zip(target)
        .filter(|(_, &t)| t)
        .map(|(r, _)| r.text.as_str())
        .collect();
    if out.is_empty() {
        return Err(OtagError::NoPositives);
    }
    Ok(out)
}

/// Write per-class embeddings as TSV: `mid`, `parent`, `v0..v{D-1}`.
pub fn export_embeddings_for_projection<W: Write>(
    table: &DescriptionTable,
    embeddings: &[Vec<f64>],
    mut sink: W,
) -> Result<()> {
    if embeddings.len() != table.rows.len() {
        return Err(OtagError::LengthMismatch {
            what: "embedding rows vs table rows",
            expected: table.rows.len(),
            got: embeddings.len(),
        });
    }
    let dim = embeddings.first().map_or(0, Vec::len);
    if let Some(bad) = embeddings.iter().find(|e| e.len() != dim) {
        return Err(OtagError::LengthMismatch {
            what: "embedding dimension",
            expected: dim,
            got: bad.len(),
        });
    }
    write!(sink, "mid\tparent")?;
    for i in 0..dim {
        write!(sink, "\tv{i}")?;
    }
    writeln!(sink)?;
    for (row, emb) in table.rows.iter().zip(embeddings) {
        write!(sink, "{}\t{}", row.mid, tsv_clean(&row.top_parent))?;
        for &v in emb {
            write!(sink, "\t{}", fmt_sig9(v))?;
        }
        writeln!(sink)?;
    }
    sink.flush()?;
    Ok(())
}

/// Deterministic stand-in for a frozen text encoder: the mean of seeded
/// Gaussian vectors, one per lowercase word token.
///
/// Texts sharing words get correlated embeddings, so Concat descriptions
/// inherit their ancestors' geometry while a shared prompt pulls every class
/// toward a common direction.
pub fn hashed_bow_embedding(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut count = 0usize;
    for token in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        let token = token.to_lowercase();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(token.as_bytes()));
        for a in acc.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *a += z;
        }
        count += 1;
    }
    if count > 0 {
        let scale = 1.0 / count as f64;
        acc.iter_mut().for_each(|a| *a *= scale);
    }
    acc
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
