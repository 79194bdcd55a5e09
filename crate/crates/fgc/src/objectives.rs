//! Task and sparsity losses, their composition, and the mutual-information
//! bound diagnostic.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::GateState;
use crate::tensor::{ops, Tape, Tensor};

/// Mean negative log-likelihood of the labels under a softmax over logits.
/// Stabilized with log-sum-exp.
pub fn cross_entropy(tape: &Tape, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = match logits.shape() {
        [b, c] => (*b, *c),
        other => {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: other.to_vec(),
                rhs: vec![],
            })
        }
    };
    if labels.len() != b {
        return Err(Error::contract(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    for &y in labels {
        if y >= c {
            return Err(Error::IndexOutOfRange { index: y, len: c });
        }
    }
    let zd = logits.data();
    let mut probs = vec![0.0; b * c]; // softmax rows, saved for backward
    let mut loss = 0.0;
    for i in 0..b {
        let row = &zd[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &z in row {
            denom += (z - max).exp();
        }
        loss += max + denom.ln() - row[labels[i]];
        let prow = &mut probs[i * c..(i + 1) * c];
        for (p, &z) in prow.iter_mut().zip(row) {
            *p = (z - max).exp() / denom;
        }
    }
    drop(zd);
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(Error::numeric("cross_entropy", "non-finite loss"));
    }
    let tracked = tape.tracks(&[logits]);
    let out = Tensor::output(vec![], vec![loss], tracked);
    if tracked {
        let z2 = logits.clone();
        let labels = labels.to_vec();
        tape.record(
            out.clone(),
            Box::new(move |g| {
                let scale = g[0] / b as f64;
                let mut dz = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    dz[i * c + y] -= 1.0;
                }
                for v in dz.iter_mut() {
                    *v *= scale;
                }
                z2.accumulate_grad(&dz);
            }),
        );
    }
    Ok(out)
}

/// Differentiable sparsity surrogate of one gated layer: the expected number
/// of open channels (sum of open probabilities), averaged over the batch.
pub fn l0_surrogate(tape: &Tape, gate: &GateState) -> Result<Tensor> {
    let batch = gate.open_prob.shape()[0] as f64;
    let total = ops::sum(tape, &gate.open_prob)?;
    ops::scale(tape, &total, 1.0 / batch)
}

/// Literal count of open gates per instance (eval reporting counterpart of
/// [`l0_surrogate`]).
pub fn open_gate_count(gate: &GateState) -> f64 {
    let batch = gate.gate.shape()[0] as f64;
    gate.gate.data().iter().filter(|&&g| g >= 0.5).count() as f64 / batch
}

/// Weighted composition of the objective, retaining the parts for logging.
#[derive(Debug, Clone, Serialize)]
pub struct LossBreakdown {
    pub ce: f64,
    /// Per-layer alignment losses (only coupled layers).
    pub contrastive: BTreeMap<usize, f64>,
    /// Per-layer sparsity surrogates (every gated layer).
    pub l0: BTreeMap<usize, f64>,
    pub eta: f64,
    pub rho: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recompute the total from the parts (identical fold order as
    /// [`total_loss`], so the match is exact).
    pub fn recompose(&self) -> f64 {
        let mut contrastive_sum = 0.0;
        for v in self.contrastive.values() {
            contrastive_sum += v;
        }
        let mut l0_sum = 0.0;
        for v in self.l0.values() {
            l0_sum += v;
        }
        self.ce + self.eta * contrastive_sum + self.rho * l0_sum
    }
}

/// `total = ce + eta * sum(contrastive) + rho * sum(l0)`.
///
/// Maps iterate in ascending layer order on both the tensor path and the
/// breakdown, so `breakdown.recompose()` reproduces `total` bit-for-bit.
pub fn total_loss(
    tape: &Tape,
    ce: &Tensor,
    contrastive: &BTreeMap<usize, Tensor>,
    l0: &BTreeMap<usize, Tensor>,
    eta: f64,
    rho: f64,
) -> Result<(Tensor, LossBreakdown)> {
    if eta < 0.0 || rho < 0.0 {
        return Err(Error::config("loss coefficients must be >= 0"));
    }
    let mut total = ce.clone();
    if !contrastive.is_empty() {
        let mut acc: Option<Tensor> = None;
        for t in contrastive.values() {
            acc = Some(match acc {
                None => t.clone(),
                Some(a) => ops::add(tape, &a, t)?,
            });
        }
        let scaled = ops::scale(tape, &acc.expect("nonempty"), eta)?;
        total = ops::add(tape, &total, &scaled)?;
    }
    if !l0.is_empty() {
        let mut acc: Option<Tensor> = None;
        for t in l0.values() {
            acc = Some(match acc {
                None => t.clone(),
                Some(a) => ops::add(tape, &a, t)?,
            });
        }
        let scaled = ops::scale(tape, &acc.expect("nonempty"), rho)?;
        total = ops::add(tape, &total, &scaled)?;
    }
    let breakdown = LossBreakdown {
        ce: ce.item()?,
        contrastive: contrastive
            .iter()
            .map(|(k, v)| Ok((*k, v.item()?)))
            .collect::<Result<_>>()?,
        l0: l0
            .iter()
            .map(|(k, v)| Ok((*k, v.item()?)))
            .collect::<Result<_>>()?,
        eta,
        rho,
        total: total.item()?,
    };
    Ok((total, breakdown))
}

/// Mutual-information lower bound implied by an alignment loss value over a
/// bank of `n` instances with `k` neighbors.
///
/// Returns `(bound_sum, bound_per_pair)`:
/// - `bound_sum = ln(n) - loss`, reading the loss as a whole;
/// - `bound_per_pair = ln(n) - loss / k`, the per-neighbor average (for
///   k > 1 the summed loss can push the literal bound negative, so both are
///   reported).
///
/// Diagnostics only - never fed back into optimization.
pub fn mi_lower_bound(alignment_loss: f64, n: usize, k: usize) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(Error::config("mi bound needs n >= 2"));
    }
    if k == 0 {
        return Err(Error::config("mi bound needs k >= 1"));
    }
    let ln_n = (n as f64).ln();
    Ok((ln_n - alignment_loss, ln_n - alignment_loss / k as f64))
}
