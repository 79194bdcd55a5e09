//! The end-to-end training loop: forward, neighborhood exploration and
//! feature-gate alignment on the coupled layers, sparsity accumulation,
//! composite objective, backprop and Nesterov step - plus hard-gate
//! evaluation and checkpoint round-tripping.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::checkpoint::{BankRecord, Checkpoint, TensorRecord, CHECKPOINT_VERSION};
use crate::config::{DatasetConfig, NeighborSourceConfig, RunConfig};
use crate::coupling::{BankKind, CouplingLayer, MemoryBank, NeighborSet, NeighborSource};
use crate::data::{self, Dataset, Normalizer, Split};
use crate::error::{Error, Result};
use crate::layers::Network;
use crate::metrics::{pruning_report, GateActivity, PruningReport};
use crate::objectives;
use crate::rng::{derive_seed, Rng};
use crate::tensor::{optim::Sgd, Mode, Tape, Tensor};

// Sub-stream tags off the master seed.
const STREAM_NET_INIT: u64 = 1;
const STREAM_BANKS: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_PLAN: u64 = 4;
const STREAM_ANALYSIS: u64 = 5;

/// Build the train/test datasets named by the config, normalized with
/// statistics fitted on the train split.
pub fn load_datasets(cfg: &DatasetConfig) -> Result<(Dataset, Dataset, Normalizer)> {
    let (mut train, mut test) = match cfg {
        DatasetConfig::Synth {
            classes,
            train_per_class,
            test_per_class,
            image_size,
            geometry,
            noise_sigma,
            seed,
        } => {
            let train = data::synth_clusters(
                *classes,
                *train_per_class,
                *image_size,
                *geometry,
                *noise_sigma,
                derive_seed(*seed, 0),
            )?;
            let mut test = data::synth_clusters(
                *classes,
                *test_per_class,
                *image_size,
                *geometry,
                *noise_sigma,
                derive_seed(*seed, 1),
            )?;
            test.split = Split::Test;
            (train, test)
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = data::read_idx(train_images.as_ref(), train_labels.as_ref())?;
            let mut test = data::read_idx(test_images.as_ref(), test_labels.as_ref())?;
            test.split = Split::Test;
            (train, test)
        }
    };
    let normalizer = Normalizer::fit(&train)?;
    normalizer.apply(&mut train)?;
    normalizer.apply(&mut test)?;
    Ok((train, test, normalizer))
}

/// One epoch's logged record (one NDJSON line).
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    /// Epoch-mean alignment loss per coupled layer.
    pub contrastive: BTreeMap<usize, f64>,
    /// Epoch-mean sparsity surrogate per gated layer.
    pub l0: BTreeMap<usize, f64>,
    pub train_error: f64,
    pub eval_error: f64,
    pub pruning_ratio: f64,
    /// `ln(N) - L_g` per coupled layer.
    pub mi_bound: BTreeMap<usize, f64>,
    /// `ln(N) - L_g / k` per coupled layer.
    pub mi_bound_per_pair: BTreeMap<usize, f64>,
}

/// Hard-gate evaluation result.
#[derive(Debug, Clone, Serialize)]
pub struct EvalOutcome {
    pub split: &'static str,
    pub instances: usize,
    pub error: f64,
    pub pruning_ratio: f64,
    pub report: PruningReport,
}

/// Everything a full eval pass observes (analysis feeds on this).
pub struct EvalSweep {
    pub error: f64,
    pub activity: GateActivity,
    /// Pooled ungated features per coupled layer, indexed by instance id.
    pub pooled: BTreeMap<usize, Vec<Vec<f64>>>,
    /// Gating probability vectors per coupled layer.
    pub open_probs: BTreeMap<usize, Vec<Vec<f64>>>,
    pub report: PruningReport,
}

struct EpochAccum {
    instances: usize,
    hits: usize,
    ce_weighted: f64,
    contrastive: BTreeMap<usize, f64>,
    l0: BTreeMap<usize, f64>,
}

impl EpochAccum {
    fn new() -> Self {
        EpochAccum {
            instances: 0,
            hits: 0,
            ce_weighted: 0.0,
            contrastive: BTreeMap::new(),
            l0: BTreeMap::new(),
        }
    }
}

fn ensure_component(name: &str, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::numeric(name, format!("loss became {value}; aborting")));
    }
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub struct Trainer {
    pub config: RunConfig,
    /// Coupled layers in ascending order.
    pub omega: Vec<usize>,
    /// Batch-processing order (the shared-source donor goes first).
    processing_order: Vec<usize>,
    pub net: Network,
    pub coupling: BTreeMap<usize, CouplingLayer>,
    opt: Sgd,
    rng: Rng,
    pub epoch: usize,
    pub train_data: Dataset,
    pub test_data: Dataset,
    pub normalizer: Normalizer,
    train_labels: Vec<usize>,
    plan_seed: u64,
    analysis_seed: u64,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Trainer> {
        config.validate()?;
        let (train_data, test_data, normalizer) = load_datasets(&config.dataset)?;
        let spec = &config.network;
        if train_data.channels != spec.input_channels
            || train_data.height != spec.input_size
            || train_data.width != spec.input_size
        {
            return Err(Error::config(format!(
                "dataset images are {}x{}x{} but the network expects {}x{s}x{s}",
                train_data.channels,
                train_data.height,
                train_data.width,
                spec.input_channels,
                s = spec.input_size,
            )));
        }
        if train_data.classes() > spec.classes || test_data.classes() > spec.classes {
            return Err(Error::config("dataset labels exceed the classifier width"));
        }
        let n = train_data.len();
        if config.batch_size > n {
            return Err(Error::config(format!(
                "batch size {} exceeds the {n} training instances",
                config.batch_size
            )));
        }
        if n % config.batch_size == 1 {
            return Err(Error::config(
                "final batch would hold a single instance, which batchnorm rejects; adjust batch size",
            ));
        }

        let omega = config.effective_fgc_layers()?;
        let mut net_rng = Rng::seed_from(derive_seed(config.seed, STREAM_NET_INIT));
        let mut net = Network::new(spec, &mut net_rng)?;
        net.set_fgc_layers(&omega)?;

        let mut bank_rng = Rng::seed_from(derive_seed(config.seed, STREAM_BANKS));
        let mut coupling = BTreeMap::new();
        let donor = omega.last().copied();
        for &l in &omega {
            let dim = net.shapes[l].out_channels;
            let source = match config.neighbor_source {
                NeighborSourceConfig::FeatureIndependent => NeighborSource::FeatureIndependent,
                NeighborSourceConfig::Label => NeighborSource::Label,
                NeighborSourceConfig::Gate => NeighborSource::Gate,
                NeighborSourceConfig::FeatureShared => {
                    let donor = donor.expect("omega nonempty");
                    if l == donor {
                        NeighborSource::FeatureIndependent
                    } else {
                        NeighborSource::FeatureShared { donor }
                    }
                }
            };
            coupling.insert(
                l,
                CouplingLayer::new(
                    l,
                    n,
                    dim,
                    config.k,
                    config.tau,
                    config.bank_momentum,
                    source,
                    config.cosine_similarity,
                    &mut bank_rng,
                )?,
            );
        }
        let mut processing_order = omega.clone();
        if matches!(config.neighbor_source, NeighborSourceConfig::FeatureShared) {
            if let Some(d) = donor {
                processing_order.retain(|&l| l != d);
                processing_order.insert(0, d);
            }
        }

        let params = net
            .named_params()
            .into_iter()
            .map(|e| {
                let exempt = e.gating && config.optimizer.gate_params_no_decay;
                (e.tensor, exempt)
            })
            .collect();
        let opt = Sgd::new(
            params,
            config.optimizer.lr,
            config.optimizer.momentum,
            config.optimizer.weight_decay,
        )?;

        let rng = Rng::seed_from(derive_seed(config.seed, STREAM_TRAIN));
        let train_labels = train_data.labels().to_vec();
        Ok(Trainer {
            plan_seed: derive_seed(config.seed, STREAM_PLAN),
            analysis_seed: derive_seed(config.seed, STREAM_ANALYSIS),
            omega,
            processing_order,
            net,
            coupling,
            opt,
            rng,
            epoch: 0,
            train_data,
            test_data,
            normalizer,
            train_labels,
            config,
        })
    }

    pub fn analysis_seed(&self) -> u64 {
        self.analysis_seed
    }

    /// Learning rate after applying every milestone at or before `epoch`.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        let hits = self
            .config
            .optimizer
            .milestones
            .iter()
            .filter(|&&m| epoch >= m)
            .count();
        self.config.optimizer.lr * self.config.optimizer.decay_factor.powi(hits as i32)
    }

    fn train_batch(&mut self, ids: &[usize], accum: &mut EpochAccum) -> Result<()> {
        let tape = Tape::new();
        let x = self.train_data.batch_tensor(ids)?;
        let labels = self.train_data.batch_labels(ids);
        self.opt.zero_grads();

        let (logits, layer_outputs) =
            self.net
                .forward(&tape, &x, Mode::Train, &mut self.rng, false)?;

        let ce = objectives::cross_entropy(&tape, &logits, &labels)?;
        ensure_component("cross_entropy", ce.item()?)?;

        let mut contrastive: BTreeMap<usize, Tensor> = BTreeMap::new();
        let mut donor_sets: Option<Vec<NeighborSet>> = None;
        for &l in &self.processing_order {
            let out = &layer_outputs[l];
            let pooled = out
                .pooled
                .as_ref()
                .ok_or_else(|| Error::contract(format!("layer {l} missing pooled feature")))?;
            let gate = out
                .gate
                .as_ref()
                .ok_or_else(|| Error::contract(format!("layer {l} missing gate state")))?;
            let state = self.coupling.get_mut(&l).expect("coupled layer");
            let shared = match state.source {
                NeighborSource::FeatureShared { .. } => donor_sets.as_deref(),
                _ => None,
            };
            let loss = state.explore_and_align(
                &tape,
                pooled,
                &gate.open_prob,
                ids,
                Some(&self.train_labels),
                &mut self.rng,
                shared,
            )?;
            ensure_component(&format!("contrastive[{l}]"), loss.item()?)?;
            if donor_sets.is_none() {
                donor_sets = Some(state.last_neighbors.clone());
            }
            contrastive.insert(l, loss);
        }

        let mut l0: BTreeMap<usize, Tensor> = BTreeMap::new();
        for (l, out) in layer_outputs.iter().enumerate() {
            if let Some(gate) = &out.gate {
                let loss = objectives::l0_surrogate(&tape, gate)?;
                ensure_component(&format!("l0[{l}]"), loss.item()?)?;
                l0.insert(l, loss);
            }
        }

        let (total, breakdown) = objectives::total_loss(
            &tape,
            &ce,
            &contrastive,
            &l0,
            self.config.eta,
            self.config.rho,
        )?;
        ensure_component("total", breakdown.total)?;
        tape.backward(&total)?;
        self.opt.step()?;

        // Book-keeping, weighted by batch size.
        let bs = ids.len();
        accum.instances += bs;
        accum.ce_weighted += breakdown.ce * bs as f64;
        for (l, v) in &breakdown.contrastive {
            *accum.contrastive.entry(*l).or_insert(0.0) += v * bs as f64;
        }
        for (l, v) in &breakdown.l0 {
            *accum.l0.entry(*l).or_insert(0.0) += v * bs as f64;
        }
        let ld = logits.data();
        let classes = self.config.network.classes;
        for (i, &y) in labels.iter().enumerate() {
            if argmax(&ld[i * classes..(i + 1) * classes]) == y {
                accum.hits += 1;
            }
        }
        Ok(())
    }

    /// Train one epoch and return its log record.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        self.opt.lr = self.lr_for_epoch(self.epoch);
        let plan = data::batches(
            &self.train_data,
            self.config.batch_size,
            self.plan_seed,
            self.epoch,
        )?;
        let mut accum = EpochAccum::new();
        for batch in &plan.batches {
            self.train_batch(batch, &mut accum)?;
        }

        let eval = self.evaluate_test(false)?;
        let n = accum.instances as f64;
        let contrastive: BTreeMap<usize, f64> =
            accum.contrastive.iter().map(|(l, v)| (*l, v / n)).collect();
        let l0: BTreeMap<usize, f64> = accum.l0.iter().map(|(l, v)| (*l, v / n)).collect();
        let bank_n = self.train_data.len();
        let mut mi_bound = BTreeMap::new();
        let mut mi_bound_per_pair = BTreeMap::new();
        for (l, lg) in &contrastive {
            let k = self.coupling[l].k;
            let (sum, per_pair) = objectives::mi_lower_bound(*lg, bank_n, k)?;
            mi_bound.insert(*l, sum);
            mi_bound_per_pair.insert(*l, per_pair);
        }
        let record = EpochRecord {
            epoch: self.epoch,
            lr: self.opt.lr,
            ce: accum.ce_weighted / n,
            contrastive,
            l0,
            train_error: 1.0 - accum.hits as f64 / n,
            eval_error: eval.error,
            pruning_ratio: eval.pruning_ratio,
            mi_bound,
            mi_bound_per_pair,
        };
        self.epoch += 1;
        Ok(record)
    }

    /// Run `epochs` epochs, handing each record to `sink` as it completes.
    pub fn run<F>(&mut self, epochs: usize, mut sink: F) -> Result<()>
    where
        F: FnMut(&EpochRecord) -> Result<()>,
    {
        for _ in 0..epochs {
            let record = self.run_epoch()?;
            sink(&record)?;
        }
        Ok(())
    }

    /// Full eval pass over a dataset with hard gates; deterministic and
    /// bank-free.
    pub fn sweep(&self, dataset: &Dataset, force_open: bool) -> Result<EvalSweep> {
        let n = dataset.len();
        let chunk = self.config.batch_size.min(n);
        let mut rng = Rng::seed_from(0); // eval mode draws nothing
        let mut hits = 0usize;
        let mut activity = GateActivity::default();
        let mut pooled: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        let mut open_probs: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for &l in &self.omega {
            pooled.insert(l, Vec::with_capacity(n));
            open_probs.insert(l, Vec::with_capacity(n));
        }

        let ids: Vec<usize> = (0..n).collect();
        for batch in ids.chunks(chunk) {
            let tape = Tape::inference();
            let x = dataset.batch_tensor(batch)?;
            let labels = dataset.batch_labels(batch);
            let (logits, layer_outputs) =
                self.net.forward(&tape, &x, Mode::Eval, &mut rng, force_open)?;
            let ld = logits.data();
            let classes = self.config.network.classes;
            for (i, &y) in labels.iter().enumerate() {
                if argmax(&ld[i * classes..(i + 1) * classes]) == y {
                    hits += 1;
                }
            }
            for (l, out) in layer_outputs.iter().enumerate() {
                if let Some(gate) = &out.gate {
                    let masks = if force_open {
                        let c = gate.open_prob.shape()[1];
                        vec![vec![true; c]; batch.len()]
                    } else {
                        gate.hard_masks()
                    };
                    activity.masks.entry(l).or_default().extend(masks);
                }
                if let Some(p) = &out.pooled {
                    let rows = pooled.get_mut(&l).expect("coupled layer");
                    let data = p.data();
                    let d = p.shape()[1];
                    for i in 0..batch.len() {
                        rows.push(data[i * d..(i + 1) * d].to_vec());
                    }
                    let gate = out.gate.as_ref().expect("coupled layers are gated");
                    let pdata = gate.open_prob.data();
                    let rows = open_probs.get_mut(&l).expect("coupled layer");
                    for i in 0..batch.len() {
                        rows.push(pdata[i * d..(i + 1) * d].to_vec());
                    }
                }
            }
        }
        let report = pruning_report(&self.config.network, &activity, dataset.labels())?;
        Ok(EvalSweep {
            error: 1.0 - hits as f64 / n as f64,
            activity,
            pooled,
            open_probs,
            report,
        })
    }

    pub fn evaluate(&self, dataset: &Dataset, split: &'static str, force_open: bool) -> Result<EvalOutcome> {
        let sweep = self.sweep(dataset, force_open)?;
        Ok(EvalOutcome {
            split,
            instances: dataset.len(),
            error: sweep.error,
            pruning_ratio: sweep.report.pruning_ratio,
            report: sweep.report,
        })
    }

    pub fn evaluate_test(&self, force_open: bool) -> Result<EvalOutcome> {
        self.evaluate(&self.test_data, "test", force_open)
    }

    // -- checkpointing --------------------------------------------------

    pub fn to_checkpoint(&self) -> Checkpoint {
        let params = self
            .net
            .named_params()
            .into_iter()
            .map(|e| TensorRecord {
                name: e.name,
                shape: e.tensor.shape().to_vec(),
                data: e.tensor.to_vec(),
            })
            .collect();
        let buffers = self
            .net
            .named_buffers()
            .into_iter()
            .map(|(name, data)| TensorRecord {
                name,
                shape: vec![data.len()],
                data,
            })
            .collect();
        let mut banks = Vec::new();
        for (l, c) in &self.coupling {
            for (kind, bank) in [("feature", &c.feature_bank), ("gate", &c.gate_bank)] {
                banks.push(BankRecord {
                    layer: *l,
                    kind: kind.to_string(),
                    rows: bank.rows(),
                    dim: bank.dim(),
                    momentum: bank.momentum(),
                    entries: bank.entries().to_vec(),
                });
            }
        }
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: self.config.stable_hash(),
            config: self.config.clone(),
            epoch: self.epoch,
            rng_state: self.rng.state(),
            params,
            buffers,
            velocities: self.opt.velocities().to_vec(),
            banks,
        }
    }

    /// Rebuild a trainer from a checkpoint; training continues bit-exactly.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Trainer> {
        if ckpt.config_hash != ckpt.config.stable_hash() {
            return Err(Error::contract(
                "checkpoint config hash does not match its embedded config",
            ));
        }
        let mut trainer = Trainer::new(ckpt.config.clone())?;

        let entries = trainer.net.named_params();
        if entries.len() != ckpt.params.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} parameters, network has {}",
                ckpt.params.len(),
                entries.len()
            )));
        }
        for (entry, rec) in entries.iter().zip(&ckpt.params) {
            if entry.name != rec.name || entry.tensor.shape() != rec.shape.as_slice() {
                return Err(Error::contract(format!(
                    "checkpoint parameter {} does not match network parameter {}",
                    rec.name, entry.name
                )));
            }
            entry.tensor.set_data(&rec.data)?;
        }
        let buffers: Vec<(String, Vec<f64>)> = ckpt
            .buffers
            .iter()
            .map(|b| (b.name.clone(), b.data.clone()))
            .collect();
        trainer.net.restore_buffers(&buffers)?;
        trainer.opt.restore_velocities(ckpt.velocities.clone())?;
        for rec in &ckpt.banks {
            let layer = trainer.coupling.get_mut(&rec.layer).ok_or_else(|| {
                Error::contract(format!("checkpoint bank for non-coupled layer {}", rec.layer))
            })?;
            let bank = MemoryBank::from_entries(
                if rec.kind == "feature" {
                    BankKind::Feature
                } else {
                    BankKind::Gate
                },
                rec.rows,
                rec.dim,
                rec.momentum,
                rec.entries.clone(),
            )?;
            match rec.kind.as_str() {
                "feature" => layer.feature_bank = bank,
                "gate" => layer.gate_bank = bank,
                other => {
                    return Err(Error::contract(format!("unknown bank kind {other}")));
                }
            }
        }
        trainer.rng = Rng::from_state(ckpt.rng_state);
        trainer.epoch = ckpt.epoch;
        Ok(trainer)
    }
}

/// Convenience wrapper: build a trainer, run the configured epoch count,
/// and return the trainer plus all epoch records.
pub fn train(config: RunConfig) -> Result<(Trainer, Vec<EpochRecord>)> {
    let mut trainer = Trainer::new(config)?;
    let epochs = trainer.config.epochs;
    let mut log = Vec::with_capacity(epochs);
    trainer.run(epochs, |r| {
        log.push(r.clone());
        Ok(())
    })?;
    Ok((trainer, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::tests::toy_config;

    #[test]
    fn zero_epochs_leaves_initialization_untouched() {
        let cfg = toy_config();
        let a = Trainer::new(cfg.clone()).unwrap().to_checkpoint();
        let (trainer, log) = train(cfg.clone()).unwrap();
        assert_eq!(log.len(), 1);
        drop(trainer);
        let mut cfg0 = cfg;
        cfg0.epochs = 0;
        let (t0, log0) = train(cfg0).unwrap();
        assert!(log0.is_empty());
        let b = t0.to_checkpoint();
        assert_eq!(a.params, b.params);
        assert_eq!(a.banks, b.banks);
        assert_eq!(a.rng_state, b.rng_state);
        assert_eq!(a.epoch, b.epoch);
    }

    #[test]
    fn same_seed_twice_is_bit_identical() {
        let cfg = toy_config();
        let (ta, la) = train(cfg.clone()).unwrap();
        let (tb, lb) = train(cfg).unwrap();
        let (ca, cb) = (ta.to_checkpoint(), tb.to_checkpoint());
        assert_eq!(ca.params, cb.params);
        assert_eq!(ca.buffers, cb.buffers);
        assert_eq!(ca.velocities, cb.velocities);
        assert_eq!(ca.banks, cb.banks);
        assert_eq!(ca.rng_state, cb.rng_state);
        let ja = serde_json::to_string(&la).unwrap();
        let jb = serde_json::to_string(&lb).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn save_resume_matches_uninterrupted_run() {
        let mut cfg = toy_config();
        cfg.epochs = 3;
        // Uninterrupted.
        let (full, _) = train(cfg.clone()).unwrap();
        let reference = full.to_checkpoint();

        // Interrupted after one epoch, round-tripped through bytes, resumed.
        let mut cfg1 = cfg.clone();
        cfg1.epochs = 1;
        let (half, _) = train(cfg1).unwrap();
        let dir = std::env::temp_dir().join("fgc_resume_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("half.fgck");
        half.to_checkpoint().save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let mut resumed = Trainer::from_checkpoint(&loaded).unwrap();
        resumed.run(2, |_| Ok(())).unwrap();
        let finished = resumed.to_checkpoint();

        assert_eq!(reference.params, finished.params);
        assert_eq!(reference.buffers, finished.buffers);
        assert_eq!(reference.velocities, finished.velocities);
        assert_eq!(reference.banks, finished.banks);
        assert_eq!(reference.rng_state, finished.rng_state);
        assert_eq!(reference.epoch, finished.epoch);
    }

    #[test]
    fn forced_open_evaluation_reports_zero_pruning() {
        let cfg = toy_config();
        let (trainer, _) = train(cfg).unwrap();
        let eval = trainer.evaluate_test(true).unwrap();
        assert!(eval.pruning_ratio.abs() < 1e-12);
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let cfg = toy_config();
        let (trainer, _) = train(cfg).unwrap();
        let a = trainer.evaluate_test(false).unwrap();
        let b = trainer.evaluate_test(false).unwrap();
        assert_eq!(a.error.to_bits(), b.error.to_bits());
        assert_eq!(a.pruning_ratio.to_bits(), b.pruning_ratio.to_bits());
    }

    #[test]
    fn lr_schedule_applies_milestones() {
        let mut cfg = toy_config();
        cfg.optimizer.milestones = vec![2, 4];
        cfg.optimizer.decay_factor = 0.1;
        let trainer = Trainer::new(cfg).unwrap();
        assert!((trainer.lr_for_epoch(0) - 0.05).abs() < 1e-15);
        assert!((trainer.lr_for_epoch(1) - 0.05).abs() < 1e-15);
        assert!((trainer.lr_for_epoch(2) - 0.005).abs() < 1e-15);
        assert!((trainer.lr_for_epoch(3) - 0.005).abs() < 1e-15);
        assert!((trainer.lr_for_epoch(4) - 0.0005).abs() < 1e-15);
    }
}
