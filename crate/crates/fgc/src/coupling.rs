//! Feature-gate coupling: memory banks, neighborhood relationship
//! exploration, and the contrastive alignment loss.
//!
//! Two banks per watched layer cache one vector per training instance: the
//! pooled ungated feature and the gating probability vector. Each step finds
//! the k nearest instances of every batch element in the feature bank (plain
//! dot product), then pulls the instance's gating probabilities toward those
//! neighbors' cached gate vectors with a temperature softmax over the whole
//! bank. Bank rows refresh afterwards by momentum interpolation, detached
//! from the gradient tape.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

// ---------------------------------------------------------------------------
// Memory banks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankKind {
    Feature,
    Gate,
}

/// N x D table of per-instance vectors with momentum refresh.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    kind: BankKind,
    rows: usize,
    dim: usize,
    momentum: f64,
    entries: Vec<f64>,
}

impl MemoryBank {
    /// Rows start as unit-norm random vectors.
    pub fn unit_random(kind: BankKind, rows: usize, dim: usize, momentum: f64, rng: &mut Rng) -> Result<MemoryBank> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::config("bank momentum must lie in [0, 1]"));
        }
        if rows == 0 || dim == 0 {
            return Err(Error::config("memory bank must be non-empty"));
        }
        let mut entries = vec![0.0; rows * dim];
        for row in entries.chunks_exact_mut(dim) {
            loop {
                for v in row.iter_mut() {
                    *v = rng.normal();
                }
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    for v in row.iter_mut() {
                        *v /= norm;
                    }
                    break;
                }
            }
        }
        Ok(MemoryBank {
            kind,
            rows,
            dim,
            momentum,
            entries,
        })
    }

    pub fn from_entries(kind: BankKind, rows: usize, dim: usize, momentum: f64, entries: Vec<f64>) -> Result<MemoryBank> {
        if entries.len() != rows * dim {
            return Err(Error::contract(format!(
                "bank payload {} != {rows}x{dim}",
                entries.len()
            )));
        }
        Ok(MemoryBank {
            kind,
            rows,
            dim,
            momentum,
            entries,
        })
    }

    pub fn kind(&self) -> BankKind {
        self.kind
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Momentum refresh of one row: `row <- m * row + (1 - m) * fresh`.
    /// Values are plain floats, never tape tensors, so banks cannot receive
    /// gradients. Every other row is untouched.
    pub fn update(&mut self, index: usize, fresh: &[f64]) -> Result<()> {
        if index >= self.rows {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.rows,
            });
        }
        if fresh.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "bank_update",
                lhs: vec![fresh.len()],
                rhs: vec![self.dim],
            });
        }
        if fresh.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("bank_update", "non-finite fresh value"));
        }
        let m = self.momentum;
        let row = &mut self.entries[index * self.dim..(index + 1) * self.dim];
        for (r, &f) in row.iter_mut().zip(fresh) {
            *r = m * *r + (1.0 - m) * f;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Similarity and k nearest neighbors
// ---------------------------------------------------------------------------

/// Dot products of `query` against every bank row; the query's own row (when
/// given) is masked with negative infinity so it can never be its own
/// neighbor. With `cosine` both sides are length-normalized first.
pub fn similarity_row(
    query: &[f64],
    bank: &MemoryBank,
    self_index: Option<usize>,
    cosine: bool,
) -> Result<Vec<f64>> {
    if query.len() != bank.dim() {
        return Err(Error::ShapeMismatch {
            op: "similarity_row",
            lhs: vec![query.len()],
            rhs: vec![bank.dim()],
        });
    }
    let qn = if cosine {
        query.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12)
    } else {
        1.0
    };
    let mut out = Vec::with_capacity(bank.rows());
    for j in 0..bank.rows() {
        let row = bank.row(j);
        let mut acc = 0.0;
        for (a, b) in query.iter().zip(row) {
            acc += a * b;
        }
        if cosine {
            let rn = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            acc /= qn * rn;
        }
        out.push(acc);
    }
    if let Some(i) = self_index {
        if i >= bank.rows() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: bank.rows(),
            });
        }
        out[i] = f64::NEG_INFINITY;
    }
    Ok(out)
}

/// Indices of the `k` largest similarities, sorted by descending value with
/// ties broken by ascending index. Non-finite entries (the self sentinel)
/// are excluded; it is an error if fewer than `k` finite entries exist.
pub fn topk(sims: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::config("topk requires k >= 1"));
    }
    let mut order: Vec<usize> = (0..sims.len()).filter(|&i| sims[i].is_finite()).collect();
    if order.len() < k {
        return Err(Error::config(format!(
            "topk: k = {k} exceeds the {} finite entries",
            order.len()
        )));
    }
    let cmp = |&a: &usize, &b: &usize| {
        sims[b]
            .partial_cmp(&sims[a])
            .expect("finite")
            .then(a.cmp(&b))
    };
    let n = order.len();
    if k < n {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    Ok(order)
}

/// The k feature-space neighbors of one instance, with the similarities that
/// ranked them (NaN when the source does not rank, e.g. label sampling).
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub instance: usize,
    pub layer: usize,
    pub neighbors: Vec<usize>,
    pub similarities: Vec<f64>,
}

impl NeighborSet {
    pub fn from_similarities(instance: usize, layer: usize, sims: &[f64], k: usize) -> Result<NeighborSet> {
        let neighbors = topk(sims, k)?;
        let similarities = neighbors.iter().map(|&j| sims[j]).collect();
        let set = NeighborSet {
            instance,
            layer,
            neighbors,
            similarities,
        };
        set.validate(sims.len())?;
        Ok(set)
    }

    pub fn validate(&self, population: usize) -> Result<()> {
        if self.neighbors.is_empty() {
            return Err(Error::contract("empty neighbor set"));
        }
        for &j in &self.neighbors {
            if j >= population {
                return Err(Error::IndexOutOfRange {
                    index: j,
                    len: population,
                });
            }
            if j == self.instance {
                return Err(Error::contract(format!(
                    "instance {} listed as its own neighbor",
                    j
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Neighbor probability and contrastive loss
// ---------------------------------------------------------------------------

/// Probability (under a temperature softmax across the *whole* bank) that
/// instance `target` is recognized as a neighbor of the query gate vector.
/// Diagnostic counterpart of the differentiable loss below.
pub fn neighbor_probability(
    open_probs: &[f64],
    bank: &MemoryBank,
    target: usize,
    tau: f64,
) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::config("temperature must be > 0"));
    }
    if target >= bank.rows() {
        return Err(Error::IndexOutOfRange {
            index: target,
            len: bank.rows(),
        });
    }
    let scores = similarity_row(open_probs, bank, None, false)?;
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for &s in &scores {
        denom += ((s - max) / tau).exp();
    }
    let p = ((scores[target] - max) / tau).exp() / denom;
    if !p.is_finite() {
        return Err(Error::numeric("neighbor_probability", "non-finite probability"));
    }
    Ok(p)
}

/// Contrastive alignment loss over a batch of gating-probability rows.
///
/// For each row i with neighbor set N_i,
/// `L_i = -sum_{j in N_i} log p(j | row_i)` where `p(j | row_i)` is the
/// temperature softmax of `bank . row_i / tau` over all bank rows; the
/// returned scalar averages `L_i` over the batch. Differentiable w.r.t.
/// `open_probs` only - bank rows are constants.
pub fn contrastive_loss(
    tape: &Tape,
    open_probs: &Tensor,
    bank: &MemoryBank,
    neighbor_sets: &[NeighborSet],
    tau: f64,
) -> Result<Tensor> {
    let (b, d) = match open_probs.shape() {
        [b, d] => (*b, *d),
        other => {
            return Err(Error::ShapeMismatch {
                op: "contrastive_loss",
                lhs: other.to_vec(),
                rhs: vec![],
            })
        }
    };
    if d != bank.dim() {
        return Err(Error::ShapeMismatch {
            op: "contrastive_loss",
            lhs: vec![b, d],
            rhs: vec![bank.rows(), bank.dim()],
        });
    }
    if tau <= 0.0 {
        return Err(Error::config("temperature must be > 0"));
    }
    if neighbor_sets.len() != b {
        return Err(Error::contract(format!(
            "{} neighbor sets for a batch of {b}",
            neighbor_sets.len()
        )));
    }
    let n = bank.rows();
    for set in neighbor_sets {
        set.validate(n)?;
    }

    let pd = open_probs.data();
    // scores[i, j] = bank[j] . row_i / tau; -log p is formed as
    // logsumexp(scores) - score_j with max-subtraction, then the buffer is
    // normalized in place into softmax rows for the backward pass.
    let mut probs = vec![0.0; b * n];
    let mut loss = 0.0;
    for i in 0..b {
        let row = &pd[i * d..(i + 1) * d];
        let scores = &mut probs[i * n..(i + 1) * n];
        for j in 0..n {
            let bj = bank.row(j);
            let mut acc = 0.0;
            for (a, c) in row.iter().zip(bj) {
                acc += a * c;
            }
            scores[j] = acc / tau;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &s in scores.iter() {
            denom += (s - max).exp();
        }
        let logsumexp = max + denom.ln();
        for &j in &neighbor_sets[i].neighbors {
            loss += logsumexp - scores[j];
        }
        for s in scores.iter_mut() {
            *s = (*s - max).exp() / denom;
        }
    }
    drop(pd);
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(Error::numeric("contrastive_loss", "non-finite loss"));
    }

    let tracked = tape.tracks(&[open_probs]);
    let out = Tensor::output(vec![], vec![loss], tracked);
    if tracked {
        let x2 = open_probs.clone();
        let bank_snapshot = bank.entries().to_vec();
        let counts: Vec<f64> = neighbor_sets.iter().map(|s| s.neighbors.len() as f64).collect();
        let members: Vec<Vec<usize>> = neighbor_sets.iter().map(|s| s.neighbors.clone()).collect();
        tape.record(
            out.clone(),
            Box::new(move |g| {
                let scale = g[0] / (b as f64 * tau);
                let mut dx = vec![0.0; b * d];
                for i in 0..b {
                    let prow = &probs[i * n..(i + 1) * n];
                    let drow = &mut dx[i * d..(i + 1) * d];
                    // k_i * sum_j p_ij * bank[j] - sum_{j in N_i} bank[j]
                    for (j, &p) in prow.iter().enumerate() {
                        let w = counts[i] * p;
                        if w == 0.0 {
                            continue;
                        }
                        let bj = &bank_snapshot[j * d..(j + 1) * d];
                        for (dv, &bv) in drow.iter_mut().zip(bj) {
                            *dv += w * bv;
                        }
                    }
                    for &j in &members[i] {
                        let bj = &bank_snapshot[j * d..(j + 1) * d];
                        for (dv, &bv) in drow.iter_mut().zip(bj) {
                            *dv -= bv;
                        }
                    }
                    for dv in drow.iter_mut() {
                        *dv *= scale;
                    }
                }
                x2.accumulate_grad(&dx);
            }),
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Per-layer coupling state
// ---------------------------------------------------------------------------

/// Where an instance's neighbor set comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeighborSource {
    /// kNN over this layer's own feature bank (the default).
    FeatureIndependent,
    /// Reuse the neighbor sets most recently produced by another layer.
    FeatureShared { donor: usize },
    /// k random distinct instances having the same class label.
    Label,
    /// kNN over this layer's gate bank.
    Gate,
}

/// Banks, hyper-parameters and neighbor policy of one coupled layer.
pub struct CouplingLayer {
    pub layer: usize,
    pub feature_bank: MemoryBank,
    pub gate_bank: MemoryBank,
    pub k: usize,
    pub tau: f64,
    pub source: NeighborSource,
    pub cosine: bool,
    /// Neighbor sets from the most recent batch (donor data for
    /// `FeatureShared`, and export material).
    pub last_neighbors: Vec<NeighborSet>,
}

impl CouplingLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layer: usize,
        instances: usize,
        dim: usize,
        k: usize,
        tau: f64,
        bank_momentum: f64,
        source: NeighborSource,
        cosine: bool,
        rng: &mut Rng,
    ) -> Result<CouplingLayer> {
        if tau <= 0.0 {
            return Err(Error::config("temperature must be > 0"));
        }
        if instances < 2 {
            return Err(Error::config("coupling needs at least 2 instances"));
        }
        // k is clipped to N - 1 on small datasets.
        let k = k.max(1).min(instances - 1);
        Ok(CouplingLayer {
            layer,
            feature_bank: MemoryBank::unit_random(BankKind::Feature, instances, dim, bank_momentum, rng)?,
            gate_bank: MemoryBank::unit_random(BankKind::Gate, instances, dim, bank_momentum, rng)?,
            k,
            tau,
            source,
            cosine,
            last_neighbors: Vec::new(),
        })
    }

    /// Step 1, neighborhood relationship exploration: produce the neighbor
    /// set of every batch instance *before* any bank row refreshes.
    pub fn explore(
        &self,
        pooled: &[Vec<f64>],
        ids: &[usize],
        labels: Option<&[usize]>,
        rng: &mut Rng,
    ) -> Result<Vec<NeighborSet>> {
        if pooled.len() != ids.len() {
            return Err(Error::contract("pooled rows and ids disagree"));
        }
        let n = self.feature_bank.rows();
        for &id in ids {
            if id >= n {
                return Err(Error::IndexOutOfRange { index: id, len: n });
            }
        }
        let mut sets = Vec::with_capacity(ids.len());
        match self.source {
            NeighborSource::FeatureIndependent => {
                for (row, &id) in pooled.iter().zip(ids) {
                    let sims = similarity_row(row, &self.feature_bank, Some(id), self.cosine)?;
                    sets.push(NeighborSet::from_similarities(id, self.layer, &sims, self.k)?);
                }
            }
            NeighborSource::Gate => {
                // Query the gate bank with the instance's *cached* gate vector
                // so ranking stays within one space.
                for &id in ids {
                    let query = self.gate_bank.row(id).to_vec();
                    let sims = similarity_row(&query, &self.gate_bank, Some(id), self.cosine)?;
                    sets.push(NeighborSet::from_similarities(id, self.layer, &sims, self.k)?);
                }
            }
            NeighborSource::Label => {
                let labels = labels.ok_or_else(|| {
                    Error::config("neighbor source 'label' requested without labels")
                })?;
                if labels.len() != n {
                    return Err(Error::contract(format!(
                        "label table has {} entries for {} instances",
                        labels.len(),
                        n
                    )));
                }
                for &id in ids {
                    let pool: Vec<usize> = (0..n)
                        .filter(|&j| j != id && labels[j] == labels[id])
                        .collect();
                    if pool.is_empty() {
                        return Err(Error::config(format!(
                            "instance {id} has no same-label peer"
                        )));
                    }
                    let take = self.k.min(pool.len());
                    let neighbors = rng.sample_distinct(&pool, take);
                    let similarities = vec![f64::NAN; neighbors.len()];
                    let set = NeighborSet {
                        instance: id,
                        layer: self.layer,
                        neighbors,
                        similarities,
                    };
                    set.validate(n)?;
                    sets.push(set);
                }
            }
            NeighborSource::FeatureShared { .. } => {
                return Err(Error::contract(
                    "shared neighbor source must be resolved by the caller",
                ));
            }
        }
        Ok(sets)
    }

    /// Step 2, feature-gate alignment: contrastive loss of the batch gating
    /// probabilities against the *current* gate bank.
    pub fn align(
        &self,
        tape: &Tape,
        open_probs: &Tensor,
        neighbor_sets: &[NeighborSet],
    ) -> Result<Tensor> {
        contrastive_loss(tape, open_probs, &self.gate_bank, neighbor_sets, self.tau)
    }

    /// Refresh both banks for the batch instances (detached values).
    pub fn ingest(&mut self, pooled: &[Vec<f64>], open_probs: &[Vec<f64>], ids: &[usize]) -> Result<()> {
        if pooled.len() != ids.len() || open_probs.len() != ids.len() {
            return Err(Error::contract("batch rows and ids disagree"));
        }
        for ((f, g), &id) in pooled.iter().zip(open_probs).zip(ids) {
            self.feature_bank.update(id, f)?;
            self.gate_bank.update(id, g)?;
        }
        Ok(())
    }

    /// One full coupling step for a batch: explore (or accept shared
    /// neighbor sets), align, then refresh the banks. Returns the batch-mean
    /// alignment loss.
    #[allow(clippy::too_many_arguments)]
    pub fn explore_and_align(
        &mut self,
        tape: &Tape,
        pooled: &Tensor,
        open_probs: &Tensor,
        ids: &[usize],
        labels: Option<&[usize]>,
        rng: &mut Rng,
        shared: Option<&[NeighborSet]>,
    ) -> Result<Tensor> {
        let pooled_rows = tensor_rows(pooled)?;
        let prob_rows = tensor_rows(open_probs)?;
        let sets = match self.source {
            NeighborSource::FeatureShared { .. } => shared
                .ok_or_else(|| {
                    Error::contract("shared neighbor source given no donor neighbor sets")
                })?
                .to_vec(),
            _ => self.explore(&pooled_rows, ids, labels, rng)?,
        };
        let loss = self.align(tape, open_probs, &sets)?;
        self.ingest(&pooled_rows, &prob_rows, ids)?;
        self.last_neighbors = sets;
        Ok(loss)
    }
}

/// Detached copy of a [b, d] tensor as row vectors.
fn tensor_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    match t.shape() {
        [b, d] => {
            let data = t.data();
            Ok((0..*b).map(|i| data[i * d..(i + 1) * d].to_vec()).collect())
        }
        other => Err(Error::ShapeMismatch {
            op: "tensor_rows",
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}
