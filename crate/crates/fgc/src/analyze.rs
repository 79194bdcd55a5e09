//! Post-training analysis: NMI triplets per coupled layer, channel
//! execution-frequency tables, gate-similarity rankings, neighbor-set dumps,
//! and embedding matrices for external plotting.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::coupling::similarity_row;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{kmeans_labels, nmi, FLOPS_CONVENTION};
use crate::rng::derive_seed;
use crate::train::Trainer;

#[derive(Debug, Clone, Copy)]
pub struct AnalysisOptions {
    /// How many query instances the gate-similarity ranking covers.
    pub queries: usize,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions { queries: 8 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NmiTriplet {
    pub feature_label: f64,
    pub gate_label: f64,
    pub feature_gate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisSummary {
    pub instances: usize,
    pub error: f64,
    pub pruning_ratio: f64,
    /// Per coupled layer.
    pub nmi: BTreeMap<usize, NmiTriplet>,
}

#[derive(Debug)]
pub struct AnalysisBundle {
    pub summary: AnalysisSummary,
    /// Files written when an output directory was given.
    pub files: Vec<PathBuf>,
}

/// Standardize each dimension (zero mean, unit variance) and cluster.
/// Without standardization a few large-scale channels dominate the distance
/// and sub-threshold structure in gating probabilities stays invisible.
fn discretize(rows: &[Vec<f64>], clusters: usize, seed: u64) -> Result<Vec<usize>> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::contract("no embedding rows to discretize"));
    }
    let dim = rows[0].len();
    let mut mean = vec![0.0; dim];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0; dim];
    for row in rows {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt().max(1e-12)).collect();
    let mut flat = Vec::with_capacity(n * dim);
    for row in rows {
        for ((v, m), s) in row.iter().zip(&mean).zip(&std) {
            flat.push((v - m) / s);
        }
    }
    kmeans_labels(&flat, n, dim, clusters, seed)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

/// Rank all instances by gate-vector cosine similarity with a query. The
/// query itself ranks first (ties resolved in its favor, then by index).
pub fn gate_similarity_ranking(rows: &[Vec<f64>], query: usize) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (i, cosine(&rows[query], r)))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| (b.0 == query).cmp(&(a.0 == query)))
            .then(a.0.cmp(&b.0))
    });
    ranked
}

fn write_file(dir: &Path, name: &str, contents: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    let display = path.display().to_string();
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&display, e))?;
    f.write_all(contents.as_bytes())
        .map_err(|e| Error::io(&display, e))?;
    files.push(path);
    Ok(())
}

/// Run the full analysis pass over `dataset`.
///
/// Reports per coupled layer the NMI triplet (feature <-> label,
/// gate <-> label, feature <-> gate), where continuous embeddings are first
/// discretized with seeded k-means using as many clusters as classes. With
/// an output directory, also writes:
///
/// - `frequencies.csv`: per-layer, per-class channel execution frequencies;
/// - `features_layer{l}.csv` / `gates_layer{l}.csv`: embedding matrices;
/// - `gate_ranking.csv`: dataset ids sorted by gate similarity per query;
/// - `neighbors_layer{l}.csv`: current feature-bank neighbor sets;
/// - `analysis.json`: the summary record.
pub fn analyze(
    trainer: &Trainer,
    dataset: &Dataset,
    opts: AnalysisOptions,
    out_dir: Option<&Path>,
) -> Result<AnalysisBundle> {
    let sweep = trainer.sweep(dataset, false)?;
    let classes = trainer.config.network.classes;
    let labels = dataset.labels();
    let seed = trainer.analysis_seed();

    let mut nmi_map = BTreeMap::new();
    let mut feature_clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut gate_clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &l in &trainer.omega {
        let pooled = &sweep.pooled[&l];
        let probs = &sweep.open_probs[&l];
        let fa = discretize(pooled, classes, derive_seed(seed, 2 * l as u64))?;
        let ga = discretize(probs, classes, derive_seed(seed, 2 * l as u64 + 1))?;
        nmi_map.insert(
            l,
            NmiTriplet {
                feature_label: nmi(&fa, labels)?,
                gate_label: nmi(&ga, labels)?,
                feature_gate: nmi(&fa, &ga)?,
            },
        );
        feature_clusters.insert(l, fa);
        gate_clusters.insert(l, ga);
    }

    let summary = AnalysisSummary {
        instances: dataset.len(),
        error: sweep.error,
        pruning_ratio: sweep.report.pruning_ratio,
        nmi: nmi_map,
    };

    let mut files = Vec::new();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

        // Channel execution frequencies.
        let mut csv = format!("# {FLOPS_CONVENTION}\nlayer,channel,class,frequency\n");
        for (l, rows) in &sweep.report.frequencies {
            for (ch, per_class) in rows.iter().enumerate() {
                for (class, f) in per_class.iter().enumerate() {
                    csv.push_str(&format!("{l},{ch},{class},{f}\n"));
                }
            }
        }
        write_file(dir, "frequencies.csv", &csv, &mut files)?;

        // Embedding matrices for external plotting.
        for &l in &trainer.omega {
            for (tag, rows) in [("features", &sweep.pooled[&l]), ("gates", &sweep.open_probs[&l])] {
                let dim = rows.first().map_or(0, |r| r.len());
                let mut csv = String::from("id,label");
                for d in 0..dim {
                    csv.push_str(&format!(",v{d}"));
                }
                csv.push('\n');
                for (id, row) in rows.iter().enumerate() {
                    csv.push_str(&format!("{id},{}", labels[id]));
                    for v in row {
                        csv.push_str(&format!(",{v}"));
                    }
                    csv.push('\n');
                }
                write_file(dir, &format!("{tag}_layer{l}.csv"), &csv, &mut files)?;
            }
        }

        // Gate-similarity ranking for the first `queries` instances, at the
        // deepest coupled layer.
        if let Some(&deepest) = trainer.omega.last() {
            let rows = &sweep.open_probs[&deepest];
            let q = opts.queries.min(rows.len());
            let mut csv = String::from("query_id,rank,instance_id,similarity\n");
            for query in 0..q {
                for (rank, (id, sim)) in gate_similarity_ranking(rows, query).iter().enumerate() {
                    csv.push_str(&format!("{query},{rank},{id},{sim}\n"));
                }
            }
            write_file(dir, "gate_ranking.csv", &csv, &mut files)?;
        }

        // Neighbor sets from the trained feature banks.
        for (&l, layer) in &trainer.coupling {
            let bank = &layer.feature_bank;
            let mut csv = String::from("instance_id,rank,neighbor_id,similarity\n");
            for id in 0..bank.rows() {
                let sims = similarity_row(bank.row(id), bank, Some(id), layer.cosine)?;
                let set =
                    crate::coupling::NeighborSet::from_similarities(id, l, &sims, layer.k)?;
                for (rank, (n, s)) in set
                    .neighbors
                    .iter()
                    .zip(&set.similarities)
                    .enumerate()
                {
                    csv.push_str(&format!("{id},{rank},{n},{s}\n"));
                }
            }
            write_file(dir, &format!("neighbors_layer{l}.csv"), &csv, &mut files)?;
        }

        let json = serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::parse("analysis.json", e.to_string()))?;
        write_file(dir, "analysis.json", &json, &mut files)?;
    }

    Ok(AnalysisBundle { summary, files })
}
