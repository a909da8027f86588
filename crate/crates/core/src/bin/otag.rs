use std::io::{self, Write};
use std::panic;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use otag::align_toy::{ExperimentReport, ToyRunConfig};
use otag::descriptions::{build_table, export_embeddings_for_projection, hashed_bow_embedding, DescriptionMethod};
use otag::io::{self as oio, fmt_sig9, to_json_sig9, LabeledMatrix};
use otag::losses::{batch_loss, batch_weights, LossConfig, NormalizedDistanceWeights};
use otag::metrics::{delta_curve, omap_at_lambda, omap_report, OmapReport, PredictionSet};
use otag::ontology::{build_eval_map, distance_matrix, read_class_list, read_ontology, EvalClassMap, OntologyGraph};
use otag::{Matrix, OtagError, Result};

#[derive(Parser)]
#[command(name = "otag", version, about = "Ontology-aware audio tagging metrics, losses and toy experiments")]
struct Cli {
    /// Emit a single JSON document on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OntologyArgs {
    /// Ontology JSON file.
    #[arg(long)]
    ontology: PathBuf,
    /// Class list CSV (`index,mid,display_name`).
    #[arg(long)]
    classes: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Node, root and class counts, diameters and the distance histogram.
    Stats {
        #[arg(long)]
        ontology: PathBuf,
        #[arg(long)]
        classes: Option<PathBuf>,
        /// Histogram over the graph without the virtual root.
        #[arg(long)]
        no_virtual_root: bool,
    },
    /// Per-class label descriptions as TSV.
    Describe {
        #[command(flatten)]
        onto: OntologyArgs,
        /// direct, prompt, desc or concat.
        #[arg(long)]
        method: String,
        /// Prompt template containing `{label}` once.
        #[arg(long)]
        template: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// mAP and OmAP report for a score matrix.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[command(flatten)]
        onto: OntologyArgs,
        /// Report only this level (plus mAP).
        #[arg(long)]
        lambda: Option<u32>,
        #[arg(long)]
        no_virtual_root: bool,
    },
    /// Per-level OmAP differences between two reports (`a − b`).
    DeltaCurve {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// BCE, OBCE, SPA and total loss over a batch.
    Losses {
        /// Predicted probabilities, clip × class.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[command(flatten)]
        onto: OntologyArgs,
        /// Clip embeddings `E_a`, one row per clip.
        #[arg(long, requires = "text_emb")]
        audio_emb: Option<PathBuf>,
        /// Class text embeddings `E_t`, one row per class.
        #[arg(long, requires = "audio_emb")]
        text_emb: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 1e-7)]
        epsilon: f64,
        #[arg(long)]
        no_virtual_root: bool,
    },
    /// Paired SPA / baseline experiment on synthetic data.
    ToyRun {
        /// JSON config; `seed` is required.
        #[arg(long)]
        config: PathBuf,
        /// Run this many consecutive seeds starting at the config seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Report JSON path (stdout when omitted).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Delta curve CSV path.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Per-class text embeddings annotated with their top-level parent.
    ExportEmbeddings {
        #[command(flatten)]
        onto: OntologyArgs,
        #[arg(long, default_value = "concat")]
        method: String,
        #[arg(long)]
        template: Option<String>,
        /// Embedding table with one row per class (CSV, TSV or OTAG).
        #[arg(long, conflicts_with = "synthesize", required_unless_present = "synthesize")]
        embeddings: Option<PathBuf>,
        /// Embed the descriptions with the hashed bag-of-words encoder at
        /// this dimension instead.
        #[arg(long)]
        synthesize: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("otag: error: {e}");
        return ExitCode::from(1);
    }
    match panic::catch_unwind(|| run(&cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("otag: error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
        Err(_) => ExitCode::from(2),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("OTAG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| OtagError::InvalidConfig(format!("OTAG_THREADS must be a count, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| OtagError::InvalidConfig(e.to_string()))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Stats {
            ontology,
            classes,
            no_virtual_root,
        } => cmd_stats(ontology, classes.as_deref(), !no_virtual_root, cli.json),
        Command::Describe {
            onto,
            method,
            template,
            out,
        } => cmd_describe(onto, method, template.as_deref(), out.as_deref(), cli.json),
        Command::Eval {
            scores,
            targets,
            onto,
            lambda,
            no_virtual_root,
        } => cmd_eval(scores, targets, onto, *lambda, !no_virtual_root, cli.json),
        Command::DeltaCurve { a, b, out } => cmd_delta_curve(a, b, out.as_deref(), cli.json),
        Command::Losses {
            scores,
            targets,
            onto,
            audio_emb,
            text_emb,
            alpha,
            epsilon,
            no_virtual_root,
        } => {
            let emb = audio_emb.as_deref().zip(text_emb.as_deref());
            cmd_losses(scores, targets, onto, emb, *alpha, *epsilon, !no_virtual_root)
        }
        Command::ToyRun {
            config,
            seeds,
            report,
            curve,
        } => cmd_toy_run(config, *seeds, report.as_deref(), curve.as_deref()),
        Command::ExportEmbeddings {
            onto,
            method,
            template,
            embeddings,
            synthesize,
            seed,
            out,
        } => {
            let source = match (embeddings, synthesize) {
                (Some(p), _) => EmbeddingSource::File(p),
                (None, Some(dim)) => EmbeddingSource::Hashed(*dim, *seed),
                (None, None) => unreachable!("clap requires one source"),
            };
            cmd_export(onto, method, template.as_deref(), source, out.as_deref())
        }
    }
}

fn load_graph(path: &Path) -> Result<OntologyGraph> {
    read_ontology(oio::open(path)?)
}

fn load(onto: &OntologyArgs) -> Result<(OntologyGraph, EvalClassMap)> {
    let graph = load_graph(&onto.ontology)?;
    let records = read_class_list(oio::open(&onto.classes)?)?;
    let map = build_eval_map(&graph, &records)?;
    Ok((graph, map))
}

fn mids(map: &EvalClassMap) -> Vec<String> {
    map.entries().iter().map(|e| e.mid.clone()).collect()
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    writeln!(out, "{}", to_json_sig9(value)?)?;
    out.flush()?;
    Ok(())
}

/// Write to `path`, or stdout when absent.
fn with_sink(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = oio::create(p)?;
            f(&mut w)?;
            w.flush().map_err(OtagError::Write)
        }
        None => {
            let mut out = io::stdout().lock();
            f(&mut out)?;
            out.flush().map_err(OtagError::Write)
        }
    }
}

#[derive(Serialize)]
struct DiameterRow {
    virtual_root: bool,
    scope: &'static str,
    diameter: u8,
}

fn cmd_stats(ontology: &Path, classes: Option<&Path>, virtual_root: bool, json: bool) -> Result<()> {
    let graph = load_graph(ontology)?;
    let map = match classes {
        Some(p) => Some(build_eval_map(&graph, &read_class_list(oio::open(p)?)?)?),
        None => None,
    };
    let roots: Vec<&str> = graph.roots().iter().map(|&r| graph.nodes()[r].name.as_str()).collect();
    let plain = distance_matrix(&graph, true);
    let rooted = distance_matrix(&graph.clone().attach_virtual_root(), true);
    let all: Vec<usize> = (0..graph.len()).collect();
    let mut diameters = Vec::new();
    for (vr, dm) in [(true, &rooted), (false, &plain)] {
        diameters.push(DiameterRow {
            virtual_root: vr,
            scope: "all",
            diameter: dm.diameter_over(&all),
        });
        if let Some(m) = &map {
            diameters.push(DiameterRow {
                virtual_root: vr,
                scope: "eval",
                diameter: dm.diameter_over(&m.node_indices()),
            });
        }
    }
    let dm = if virtual_root { &rooted } else { &plain };
    let (hist, unreachable) = dm.histogram(&all);

    if json {
        return print_json(&json!({
            "nodes": graph.len(),
            "root_count": roots.len(),
            "roots": roots,
            "eval_classes": map.as_ref().map(EvalClassMap::len),
            "diameters": diameters,
            "histogram_virtual_root": virtual_root,
            "histogram": hist.iter().enumerate().skip(1)
                .map(|(d, n)| json!({"distance": d, "pairs": n})).collect::<Vec<_>>(),
            "unreachable_pairs": unreachable,
        }));
    }
    let mut out = io::stdout().lock();
    writeln!(out, "nodes: {}", graph.len())?;
    writeln!(out, "roots: {} ({})", roots.len(), roots.join(", "))?;
    if let Some(m) = &map {
        writeln!(out, "eval classes: {}", m.len())?;
    }
    for row in &diameters {
        let vr = if row.virtual_root { "virtual root" } else { "no virtual root" };
        writeln!(out, "diameter ({vr}, {} nodes): {}", row.scope, row.diameter)?;
    }
    let vr = if virtual_root { "virtual root" } else { "no virtual root" };
    writeln!(out, "distance histogram ({vr}, node pairs):")?;
    for (d, n) in hist.iter().enumerate().skip(1) {
        writeln!(out, "  {d:>3} {n}")?;
    }
    if unreachable > 0 {
        writeln!(out, "  unreachable {unreachable}")?;
    }
    Ok(())
}

fn cmd_describe(onto: &OntologyArgs, method: &str, template: Option<&str>, out: Option<&Path>, json: bool) -> Result<()> {
    let method = DescriptionMethod::from_name(method, template)?;
    let (graph, map) = load(onto)?;
    let table = build_table(&graph, &map, &method)?;
    if json {
        let rows: Vec<Value> = table
            .rows
            .iter()
            .map(|r| json!({"index": r.eval_index, "mid": r.mid, "description": r.text}))
            .collect();
        let doc = json!({"method": method.name(), "rows": rows});
        return match out {
            Some(p) => with_sink(Some(p), |w| Ok(writeln!(w, "{}", to_json_sig9(&doc)?)?)),
            None => print_json(&doc),
        };
    }
    with_sink(out, |w| table.write_tsv(w))
}

/// Score and target matrices aligned with the class list; clip ids must agree.
fn load_predictions(scores: &Path, targets: &Path, map: &EvalClassMap) -> Result<PredictionSet> {
    let cols = mids(map);
    let s = oio::read_class_matrix(scores, &cols)?;
    let t = oio::read_class_matrix(targets, &cols)?;
    if s.row_labels != t.row_labels {
        let first = s
            .row_labels
            .iter()
            .zip(&t.row_labels)
            .position(|(a, b)| a != b)
            .unwrap_or(s.row_labels.len().min(t.row_labels.len()));
        return Err(OtagError::Format {
            path: targets.display().to_string(),
            message: format!(
                "clip ids differ from the score file (first difference at row {}; {} vs {} rows)",
                first + 1,
                s.row_labels.len(),
                t.row_labels.len()
            ),
        });
    }
    if let Some(v) = t.values.as_slice().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(OtagError::Format {
            path: targets.display().to_string(),
            message: format!("targets must be 0 or 1, found {v}"),
        });
    }
    PredictionSet::from_target_matrix(s.row_labels, s.values, &t.values)
}

fn distances(graph: &OntologyGraph, virtual_root: bool) -> otag::ontology::DistanceMatrix {
    if virtual_root {
        distance_matrix(&graph.clone().attach_virtual_root(), true)
    } else {
        distance_matrix(graph, true)
    }
}

fn cmd_eval(
    scores: &Path,
    targets: &Path,
    onto: &OntologyArgs,
    lambda: Option<u32>,
    virtual_root: bool,
    json: bool,
) -> Result<()> {
    let (graph, map) = load(onto)?;
    let preds = load_predictions(scores, targets, &map)?;
    let dist = distances(&graph, virtual_root);
    match lambda {
        Some(l) => {
            let map_value = omap_at_lambda(&preds, &dist, &map, 0)?;
            let level = omap_at_lambda(&preds, &dist, &map, l)?;
            if json {
                print_json(&json!({"map": map_value, "lambda": l, "omap_lambda": level}))
            } else {
                let mut out = io::stdout().lock();
                writeln!(out, "mAP {}", fmt_sig9(map_value))?;
                writeln!(out, "OmAP_{l} {}", fmt_sig9(level))?;
                Ok(())
            }
        }
        None => {
            let report = omap_report(&preds, &dist, &map)?;
            if json {
                print_json(&report)
            } else {
                let mut out = io::stdout().lock();
                writeln!(out, "mAP {}", fmt_sig9(report.map))?;
                writeln!(out, "OmAP {}", fmt_sig9(report.omap))?;
                for (l, v) in report.omap_by_lambda.iter().enumerate() {
                    writeln!(out, "  lambda {l:>2} {}", fmt_sig9(*v))?;
                }
                writeln!(out, "classes evaluated {}", report.classes_evaluated)?;
                Ok(())
            }
        }
    }
}

fn read_report(path: &Path) -> Result<OmapReport> {
    let bytes = oio::read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| OtagError::Format {
        path: path.display().to_string(),
        message: format!("not an OmAP report: {e}"),
    })
}

fn write_curve(w: &mut dyn Write, points: &[(usize, f64)]) -> Result<()> {
    writeln!(w, "lambda,delta")?;
    for (l, d) in points {
        writeln!(w, "{l},{}", fmt_sig9(*d))?;
    }
    Ok(())
}

fn cmd_delta_curve(a: &Path, b: &Path, out: Option<&Path>, json: bool) -> Result<()> {
    let points = delta_curve(&read_report(a)?, &read_report(b)?)?;
    if json {
        if let Some(p) = out {
            with_sink(Some(p), |w| write_curve(w, &points))?;
        }
        let doc: Vec<Value> = points.iter().map(|(l, d)| json!({"lambda": l, "delta": d})).collect();
        return print_json(&doc);
    }
    with_sink(out, |w| write_curve(w, &points))
}

/// Rows labeled by file position carry no ids to check; anything else must
/// match `expected` exactly.
fn check_row_labels(m: &LabeledMatrix, expected: &[String], path: &Path) -> Result<()> {
    if m.values.rows() != expected.len() {
        return Err(OtagError::Format {
            path: path.display().to_string(),
            message: format!("{} rows, expected {}", m.values.rows(), expected.len()),
        });
    }
    let positional = m.row_labels.iter().enumerate().all(|(i, l)| *l == format!("row{i}"));
    if positional {
        return Ok(());
    }
    if let Some(i) = m.row_labels.iter().zip(expected).position(|(a, b)| a != b) {
        return Err(OtagError::Format {
            path: path.display().to_string(),
            message: format!("row {} is {:?}, expected {:?}", i + 1, m.row_labels[i], expected[i]),
        });
    }
    Ok(())
}

fn cmd_losses(
    scores: &Path,
    targets: &Path,
    onto: &OntologyArgs,
    emb: Option<(&Path, &Path)>,
    alpha: f64,
    epsilon: f64,
    virtual_root: bool,
) -> Result<()> {
    let (graph, map) = load(onto)?;
    let preds = load_predictions(scores, targets, &map)?;
    if let Some(v) = preds.scores().as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(OtagError::Format {
            path: scores.display().to_string(),
            message: format!("probabilities must lie in [0, 1], found {v}"),
        });
    }
    let dist = distances(&graph, virtual_root);
    let cfg = LossConfig {
        alpha,
        epsilon,
        diameter: dist.diameter(),
    };
    cfg.validate()?;
    let k = map.len();
    let targets: Vec<bool> = (0..preds.n_clips())
        .flat_map(|m| preds.target_row(m).to_vec())
        .collect();
    let weights = batch_weights(&targets, k, &dist, &map, &NormalizedDistanceWeights)?;

    let (audio, text) = match emb {
        Some((a, t)) => {
            let audio = oio::read_embeddings(a)?;
            check_row_labels(&audio, preds.clip_ids(), a)?;
            let text = oio::read_embeddings(t)?;
            check_row_labels(&text, &mids(&map), t)?;
            if audio.values.cols() != text.values.cols() {
                return Err(OtagError::LengthMismatch {
                    what: "audio vs text embedding width",
                    expected: text.values.cols(),
                    got: audio.values.cols(),
                });
            }
            (audio.values, Some(text.values))
        }
        None => (Matrix::zeros(preds.n_clips(), 0), None),
    };
    let loss = batch_loss(preds.scores(), &targets, &weights, &audio, text.as_ref(), &cfg)?;
    let spa_term = if text.is_some() { alpha } else { 0.0 };
    print_json(&json!({
        "n_clips": preds.n_clips(),
        "n_classes": k,
        "alpha": spa_term,
        "epsilon": epsilon,
        "bce": loss.bce,
        "obce": loss.obce,
        "spa": loss.spa,
        "total": loss.total,
    }))
}

#[derive(Serialize)]
struct SeedSign {
    seed: u64,
    omap_delta: f64,
    spa_not_worse: bool,
    coarse_gain: bool,
}

#[derive(Serialize)]
struct MultiSeedReport<'a> {
    runs: &'a [SeedRun],
    summary: Summary,
}

#[derive(Serialize)]
struct SeedRun {
    seed: u64,
    report: ExperimentReport,
}

#[derive(Serialize)]
struct Summary {
    seeds: usize,
    spa_not_worse: usize,
    coarse_gain: usize,
    spa_majority: bool,
    coarse_majority: bool,
    signs: Vec<SeedSign>,
}

fn cmd_toy_run(config: &Path, seeds: u64, report: Option<&Path>, curve: Option<&Path>) -> Result<()> {
    if seeds == 0 {
        return Err(OtagError::InvalidConfig("--seeds must be at least 1".into()));
    }
    let bytes = oio::read_bytes(config)?;
    let cfg: ToyRunConfig = serde_json::from_slice(&bytes).map_err(|e| OtagError::Format {
        path: config.display().to_string(),
        message: e.to_string(),
    })?;
    let mut runs = Vec::new();
    for seed in cfg.seed..cfg.seed.saturating_add(seeds) {
        let r = cfg.run(seed)?;
        eprintln!(
            "seed {seed}: OmAP spa {} baseline {} (delta {})",
            fmt_sig9(r.with_spa.omap),
            fmt_sig9(r.without_spa.omap),
            fmt_sig9(r.with_spa.omap - r.without_spa.omap)
        );
        runs.push(SeedRun { seed, report: r });
    }

    let body = if seeds == 1 {
        to_json_sig9(&runs[0].report)?
    } else {
        let signs: Vec<SeedSign> = runs
            .iter()
            .map(|run| {
                let r = &run.report;
                let first = r.delta.first().map_or(0.0, |p| p.delta);
                let last = r.delta.last().map_or(0.0, |p| p.delta);
                SeedSign {
                    seed: run.seed,
                    omap_delta: r.with_spa.omap - r.without_spa.omap,
                    spa_not_worse: r.with_spa.omap >= r.without_spa.omap,
                    coarse_gain: last >= first,
                }
            })
            .collect();
        let n = signs.len();
        let wins = signs.iter().filter(|s| s.spa_not_worse).count();
        let coarse = signs.iter().filter(|s| s.coarse_gain).count();
        eprintln!("SPA not worse in {wins}/{n} seeds; coarse-level gain in {coarse}/{n}");
        to_json_sig9(&MultiSeedReport {
            summary: Summary {
                seeds: n,
                spa_not_worse: wins,
                coarse_gain: coarse,
                spa_majority: 2 * wins > n,
                coarse_majority: 2 * coarse > n,
                signs,
            },
            runs: &runs,
        })?
    };

    if let Some(p) = curve {
        with_sink(Some(p), |w| {
            if seeds == 1 {
                let points: Vec<(usize, f64)> = runs[0].report.delta.iter().map(|d| (d.lambda, d.delta)).collect();
                return write_curve(w, &points);
            }
            writeln!(w, "seed,lambda,delta")?;
            for run in &runs {
                for d in &run.report.delta {
                    writeln!(w, "{},{},{}", run.seed, d.lambda, fmt_sig9(d.delta))?;
                }
            }
            Ok(())
        })?;
    }
    with_sink(report, |w| Ok(writeln!(w, "{body}")?))
}

enum EmbeddingSource<'a> {
    File(&'a Path),
    Hashed(usize, u64),
}

fn cmd_export(
    onto: &OntologyArgs,
    method: &str,
    template: Option<&str>,
    source: EmbeddingSource,
    out: Option<&Path>,
) -> Result<()> {
    let method = DescriptionMethod::from_name(method, template)?;
    let (graph, map) = load(onto)?;
    let table = build_table(&graph, &map, &method)?;
    let embeddings: Vec<Vec<f64>> = match source {
        EmbeddingSource::File(p) => {
            let m = oio::read_embeddings(p)?;
            check_row_labels(&m, &mids(&map), p)?;
            (0..m.values.rows()).map(|i| m.values.row(i).to_vec()).collect()
        }
        EmbeddingSource::Hashed(dim, seed) => {
            if dim == 0 {
                return Err(OtagError::InvalidConfig("--synthesize needs a dimension of at least 1".into()));
            }
            table.rows.iter().map(|r| hashed_bow_embedding(&r.text, dim, seed)).collect()
        }
    };
    with_sink(out, |w| export_embeddings_for_projection(&table, &embeddings, w))
}
