//! Computation accounting (FLOPs, pruning ratio, execution frequencies) and
//! normalized mutual information.
//!
//! FLOP convention: 1 multiply-accumulate = 2 FLOPs; batchnorm and ReLU are
//! excluded from counts; gating-module FLOPs are counted and reported
//! separately, then added to the gated total.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{gating_hidden_width, LayerKind, NetworkSpec};
use crate::rng::{derive_seed, Rng};

/// Convention string emitted in report headers.
pub const FLOPS_CONVENTION: &str =
    "1 MAC = 2 FLOPs; batchnorm/relu excluded; gating-module overhead counted separately and added to the gated total";

// ---------------------------------------------------------------------------
// Pruning ratio
// ---------------------------------------------------------------------------

/// Per-instance open/closed channel masks observed during a hard-gate
/// evaluation. Layers absent from the map are ungated.
#[derive(Debug, Clone, Default)]
pub struct GateActivity {
    pub masks: BTreeMap<usize, Vec<Vec<bool>>>,
}

impl GateActivity {
    fn open_fraction(&self, layer: usize, instance: usize) -> f64 {
        match self.masks.get(&layer) {
            None => 1.0,
            Some(rows) => {
                let row = &rows[instance];
                row.iter().filter(|&&b| b).count() as f64 / row.len() as f64
            }
        }
    }
}

/// Gated cost of one layer for one instance given the open fractions of its
/// input and own channels.
pub fn gated_flops(full: f64, in_fraction: f64, own_fraction: f64) -> Result<f64> {
    for f in [in_fraction, own_fraction] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::config(format!(
                "execution frequency {f} outside [0, 1]"
            )));
        }
    }
    Ok(full * in_fraction * own_fraction)
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerFlopsRow {
    pub layer: String,
    pub full: f64,
    pub gated: f64,
    pub overhead: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PruningReport {
    pub convention: String,
    pub layers: Vec<LayerFlopsRow>,
    pub full_total: f64,
    /// Main-path FLOPs actually executed (averaged per instance), without
    /// the gating modules.
    pub gated_total: f64,
    /// Gating-module FLOPs, reported separately.
    pub overhead_total: f64,
    /// `gated_total + overhead_total`: what a gated deployment executes.
    pub gated_total_with_overhead: f64,
    /// `1 - gated_total / full_total`. The overhead is excluded here (an
    /// all-open network prunes exactly nothing) and carried in the two
    /// fields above.
    pub pruning_ratio: f64,
    /// Per gated layer: channels x classes execution frequencies in [0, 1].
    pub frequencies: BTreeMap<usize, Vec<Vec<f64>>>,
}

/// Analytic computation accounting over an evaluated set.
///
/// Per layer with per-instance input-channel open fraction `a_in` and own
/// open fraction `a_own`, the executed cost is `full * mean_i(a_in * a_own)`;
/// ungated sides contribute a fraction of 1. The classifier head scales with
/// the last layer's open fraction.
pub fn pruning_report(
    spec: &NetworkSpec,
    activity: &GateActivity,
    labels: &[usize],
) -> Result<PruningReport> {
    let shapes = spec.shape_walk()?;
    let n = labels.len();
    if n == 0 {
        return Err(Error::contract("pruning report over an empty evaluation"));
    }
    for (l, rows) in &activity.masks {
        if *l >= shapes.len() {
            return Err(Error::IndexOutOfRange {
                index: *l,
                len: shapes.len(),
            });
        }
        if rows.len() != n {
            return Err(Error::contract(format!(
                "layer {l}: {} mask rows for {n} instances",
                rows.len()
            )));
        }
        if rows.iter().any(|r| r.len() != shapes[*l].out_channels) {
            return Err(Error::contract(format!("layer {l}: mask width mismatch")));
        }
    }
    for &y in labels {
        if y >= spec.classes {
            return Err(Error::IndexOutOfRange {
                index: y,
                len: spec.classes,
            });
        }
    }

    let mut layers = Vec::new();
    let mut full_total = 0.0;
    let mut gated_total = 0.0;
    let mut overhead_total = 0.0;
    for (l, (shape, layer)) in shapes.iter().zip(&spec.layers).enumerate() {
        let macs_per_pair = match layer.kind {
            LayerKind::Conv { kernel, .. } => (kernel * kernel * shape.out_size * shape.out_size) as f64,
            LayerKind::Fc { .. } => 1.0,
        };
        let full_macs = macs_per_pair * (shape.in_channels * shape.out_channels) as f64;
        let full = 2.0 * full_macs;
        let mut gated = 0.0;
        for i in 0..n {
            let a_in = if l == 0 { 1.0 } else { activity.open_fraction(l - 1, i) };
            let a_own = activity.open_fraction(l, i);
            gated += gated_flops(full, a_in, a_own)?;
        }
        gated /= n as f64;
        let overhead = if layer.gated {
            let hidden = gating_hidden_width(shape.out_channels);
            2.0 * (shape.in_channels * hidden + hidden * shape.out_channels) as f64
        } else {
            0.0
        };
        full_total += full;
        gated_total += gated;
        overhead_total += overhead;
        layers.push(LayerFlopsRow {
            layer: format!("layer{l}"),
            full,
            gated,
            overhead,
        });
    }

    // Classifier head: pooled features -> classes.
    let last_channels = shapes
        .last()
        .map(|s| s.out_channels)
        .unwrap_or(spec.input_channels);
    let head_full = 2.0 * (last_channels * spec.classes) as f64;
    let mut head_gated = 0.0;
    let last_layer = shapes.len().wrapping_sub(1);
    for i in 0..n {
        let a_in = if shapes.is_empty() {
            1.0
        } else {
            activity.open_fraction(last_layer, i)
        };
        head_gated += gated_flops(head_full, a_in, 1.0)?;
    }
    head_gated /= n as f64;
    full_total += head_full;
    gated_total += head_gated;
    layers.push(LayerFlopsRow {
        layer: "head".to_string(),
        full: head_full,
        gated: head_gated,
        overhead: 0.0,
    });

    // Execution frequencies per gated layer and class.
    let mut frequencies = BTreeMap::new();
    for (&l, rows) in &activity.masks {
        let channels = shapes[l].out_channels;
        let mut counts = vec![vec![0.0f64; spec.classes]; channels];
        let mut class_sizes = vec![0.0f64; spec.classes];
        for (row, &y) in rows.iter().zip(labels) {
            class_sizes[y] += 1.0;
            for (ch, &open) in row.iter().enumerate() {
                if open {
                    counts[ch][y] += 1.0;
                }
            }
        }
        for row in counts.iter_mut() {
            for (y, v) in row.iter_mut().enumerate() {
                if class_sizes[y] > 0.0 {
                    *v /= class_sizes[y];
                }
            }
        }
        frequencies.insert(l, counts);
    }

    Ok(PruningReport {
        convention: FLOPS_CONVENTION.to_string(),
        layers,
        full_total,
        gated_total,
        overhead_total,
        gated_total_with_overhead: gated_total + overhead_total,
        pruning_ratio: 1.0 - gated_total / full_total,
        frequencies,
    })
}

// ---------------------------------------------------------------------------
// Normalized mutual information
// ---------------------------------------------------------------------------

fn compact_labels(xs: &[usize]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        let next = map.len();
        let id = *map.entry(x).or_insert(next);
        out.push(id);
    }
    (out, map.len())
}

/// `I(A; B) / sqrt(H(A) H(B))` from the joint contingency table (natural
/// logs). Errors when either assignment is constant (entropy zero).
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::contract(format!(
            "nmi needs equal, non-empty assignments ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let (a, ka) = compact_labels(a);
    let (b, kb) = compact_labels(b);
    if ka < 2 || kb < 2 {
        return Err(Error::config(
            "nmi undefined for a constant assignment (zero entropy)",
        ));
    }
    let n = a.len() as f64;
    let mut joint = vec![0.0f64; ka * kb];
    let mut pa = vec![0.0f64; ka];
    let mut pb = vec![0.0f64; kb];
    for (&x, &y) in a.iter().zip(&b) {
        joint[x * kb + y] += 1.0;
        pa[x] += 1.0;
        pb[y] += 1.0;
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let pxy = joint[x * kb + y] / n;
            if pxy > 0.0 {
                mi += pxy * (pxy * n * n / (pa[x] * pb[y])).ln();
            }
        }
    }
    let ha: f64 = pa.iter().map(|&c| {
        let p = c / n;
        if p > 0.0 { -p * p.ln() } else { 0.0 }
    }).sum();
    let hb: f64 = pb.iter().map(|&c| {
        let p = c / n;
        if p > 0.0 { -p * p.ln() } else { 0.0 }
    }).sum();
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

// ---------------------------------------------------------------------------
// Seeded k-means (for discretizing continuous embeddings before NMI)
// ---------------------------------------------------------------------------

pub const KMEANS_RESTARTS: usize = 20;
pub const KMEANS_MAX_ITERS: usize = 300;

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding, 20 seeded restarts, at most 300
/// iterations each; returns the assignment of the best-inertia restart.
pub fn kmeans_labels(data: &[f64], n: usize, dim: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if n * dim != data.len() {
        return Err(Error::contract(format!(
            "kmeans data length {} != {n}x{dim}",
            data.len()
        )));
    }
    if k == 0 || k > n {
        return Err(Error::config(format!("kmeans k = {k} invalid for n = {n}")));
    }
    let row = |i: usize| &data[i * dim..(i + 1) * dim];

    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = Rng::seed_from(derive_seed(seed, restart as u64));

        // k-means++ seeding.
        let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
        centroids.push(row(rng.below(n)).to_vec());
        let mut dists: Vec<f64> = (0..n).map(|i| squared_distance(row(i), &centroids[0])).collect();
        while centroids.len() < k {
            let total: f64 = dists.iter().sum();
            let pick = if total <= 0.0 {
                rng.below(n)
            } else {
                let mut target = rng.uniform() * total;
                let mut chosen = n - 1;
                for (i, &d) in dists.iter().enumerate() {
                    target -= d;
                    if target <= 0.0 {
                        chosen = i;
                        break;
                    }
                }
                chosen
            };
            centroids.push(row(pick).to_vec());
            for i in 0..n {
                let d = squared_distance(row(i), centroids.last().unwrap());
                if d < dists[i] {
                    dists[i] = d;
                }
            }
        }

        let mut assign = vec![0usize; n];
        for _ in 0..KMEANS_MAX_ITERS {
            let mut changed = false;
            for i in 0..n {
                let mut best_c = 0;
                let mut best_d = f64::INFINITY;
                for (c, centroid) in centroids.iter().enumerate() {
                    let d = squared_distance(row(i), centroid);
                    if d < best_d {
                        best_d = d;
                        best_c = c;
                    }
                }
                if assign[i] != best_c {
                    assign[i] = best_c;
                    changed = true;
                }
            }
            // Recompute centroids; an empty cluster grabs the point farthest
            // from its current centroid (deterministic).
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for i in 0..n {
                counts[assign[i]] += 1;
                for t in 0..dim {
                    sums[assign[i]][t] += row(i)[t];
                }
            }
            for c in 0..k {
                if counts[c] == 0 {
                    let (mut far_i, mut far_d) = (0, -1.0);
                    for i in 0..n {
                        let d = squared_distance(row(i), &centroids[assign[i]]);
                        if d > far_d {
                            far_d = d;
                            far_i = i;
                        }
                    }
                    centroids[c] = row(far_i).to_vec();
                    assign[far_i] = c;
                    changed = true;
                } else {
                    for t in 0..dim {
                        centroids[c][t] = sums[c][t] / counts[c] as f64;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = (0..n).map(|i| squared_distance(row(i), &centroids[assign[i]])).sum();
        if best.as_ref().map_or(true, |(b, _)| inertia < *b) {
            best = Some((inertia, assign));
        }
    }
    Ok(best.expect("at least one restart").1)
}

/// Discretize continuous embedding rows with seeded k-means, then NMI
/// against a discrete assignment.
pub fn nmi_continuous_vs_discrete(
    rows: &[Vec<f64>],
    clusters: usize,
    seed: u64,
    discrete: &[usize],
) -> Result<f64> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::contract("empty embedding"));
    }
    let dim = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
    let labels = kmeans_labels(&flat, n, dim, clusters, seed)?;
    nmi(&labels, discrete)
}

/// Discretize both embeddings (independent seeds), then NMI between them.
pub fn nmi_continuous_pair(
    rows_a: &[Vec<f64>],
    rows_b: &[Vec<f64>],
    clusters: usize,
    seed_a: u64,
    seed_b: u64,
) -> Result<f64> {
    let n = rows_a.len();
    if n == 0 || rows_b.len() != n {
        return Err(Error::contract("embedding row mismatch"));
    }
    let (da, db) = (rows_a[0].len(), rows_b[0].len());
    let fa: Vec<f64> = rows_a.iter().flatten().cloned().collect();
    let fb: Vec<f64> = rows_b.iter().flatten().cloned().collect();
    let la = kmeans_labels(&fa, n, da, clusters, seed_a)?;
    let lb = kmeans_labels(&fb, n, db, clusters, seed_b)?;
    nmi(&la, &lb)
}
