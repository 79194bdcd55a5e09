//! Run configuration: parsing (TOML or JSON), defaults, and validation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ClassGeometry;
use crate::error::{Error, Result};
use crate::layers::NetworkSpec;

fn default_k() -> usize {
    200
}
fn default_eta() -> f64 {
    0.003
}
fn default_rho() -> f64 {
    0.4
}
fn default_tau() -> f64 {
    0.07
}
fn default_bank_momentum() -> f64 {
    0.5
}
fn default_decay_factor() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_true() -> bool {
    true
}
fn default_geometry() -> ClassGeometry {
    ClassGeometry::Mixed
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NeighborSourceConfig {
    /// kNN in each coupled layer's own feature space (the default).
    #[default]
    FeatureIndependent,
    /// All coupled layers reuse the neighbor sets of the deepest coupled
    /// layer.
    FeatureShared,
    /// Random same-label instances.
    Label,
    /// kNN in the gate space.
    Gate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    /// Epochs at which the learning rate multiplies by `decay_factor`.
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Skip weight decay on gating-module parameters.
    #[serde(default = "default_true")]
    pub gate_params_no_decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synth {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        image_size: usize,
        #[serde(default = "default_geometry")]
        geometry: ClassGeometry,
        noise_sigma: f64,
        seed: u64,
    },
    Idx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkSpec,
    /// Coupled layer indices. When omitted, layers flagged `fgc` in the
    /// network spec are used; when none are flagged, the default is the last
    /// third of the gated layers (deep stages benefit most).
    #[serde(default)]
    pub fgc_layers: Option<Vec<usize>>,
    /// Neighbors per instance (clipped to N - 1 on small datasets).
    #[serde(default = "default_k")]
    pub k: usize,
    /// Alignment loss coefficient.
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Sparsity (L0) coefficient.
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Contrastive temperature.
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_bank_momentum")]
    pub bank_momentum: f64,
    /// Rank neighbors by cosine instead of raw dot product (off by default).
    #[serde(default)]
    pub cosine_similarity: bool,
    #[serde(default)]
    pub neighbor_source: NeighborSourceConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: DatasetConfig,
}

impl RunConfig {
    /// Static validation; violations are reported before any compute starts.
    pub fn validate(&self) -> Result<()> {
        self.network.shape_walk()?;
        if self.eta < 0.0 || self.rho < 0.0 {
            return Err(Error::config("eta and rho must be >= 0"));
        }
        if self.tau <= 0.0 {
            return Err(Error::config("tau must be > 0"));
        }
        if self.k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.bank_momentum) {
            return Err(Error::config("bank momentum must lie in [0, 1]"));
        }
        if self.optimizer.lr <= 0.0 {
            return Err(Error::config("learning rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(Error::config("optimizer momentum must lie in [0, 1)"));
        }
        if self.optimizer.decay_factor <= 0.0 {
            return Err(Error::config("decay factor must be > 0"));
        }
        if self.optimizer.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be >= 0"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(
                "batch size must be >= 2 (batchnorm variance is undefined on single-element batches)",
            ));
        }
        let mut sorted = self.optimizer.milestones.clone();
        sorted.sort_unstable();
        if sorted != self.optimizer.milestones {
            return Err(Error::config("milestones must be sorted ascending"));
        }
        match &self.dataset {
            DatasetConfig::Synth {
                classes,
                train_per_class,
                test_per_class,
                ..
            } => {
                if *classes != self.network.classes {
                    return Err(Error::config(format!(
                        "dataset has {classes} classes but the network head expects {}",
                        self.network.classes
                    )));
                }
                if *train_per_class == 0 || *test_per_class == 0 {
                    return Err(Error::config("dataset splits must be non-empty"));
                }
            }
            DatasetConfig::Idx { .. } => {}
        }
        self.effective_fgc_layers()?;
        Ok(())
    }

    /// Resolve the set of coupled layers.
    pub fn effective_fgc_layers(&self) -> Result<Vec<usize>> {
        let gated = self.network.gated_layers();
        let resolve = |layers: &[usize]| -> Result<Vec<usize>> {
            let mut out = Vec::new();
            for &l in layers {
                if l >= self.network.layers.len() {
                    return Err(Error::config(format!(
                        "coupled layer index {l} out of range"
                    )));
                }
                if !self.network.layers[l].gated {
                    return Err(Error::config(format!(
                        "coupled layer {l} is not gated"
                    )));
                }
                if !out.contains(&l) {
                    out.push(l);
                }
            }
            out.sort_unstable();
            Ok(out)
        };
        if let Some(layers) = &self.fgc_layers {
            return resolve(layers);
        }
        let flagged = self.network.fgc_layers();
        if !flagged.is_empty() {
            return resolve(&flagged);
        }
        if gated.is_empty() {
            return Ok(Vec::new());
        }
        // Last third of the gated layers, at least one.
        let take = gated.len().div_ceil(3).max(1);
        Ok(gated[gated.len() - take..].to_vec())
    }

    /// Stable FNV-1a hash over the canonical JSON encoding.
    pub fn stable_hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Parse a config file; the format follows the extension (`.toml`/`.json`),
/// with a TOML-then-JSON fallback for anything else.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    let parsed: RunConfig = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).map_err(|e| Error::parse(&display, e.to_string()))?,
        Some("json") => {
            serde_json::from_str(&text).map_err(|e| Error::parse(&display, e.to_string()))?
        }
        _ => toml::from_str(&text).or_else(|te| {
            serde_json::from_str(&text)
                .map_err(|je| Error::parse(&display, format!("not TOML ({te}) nor JSON ({je})")))
        })?,
    };
    parsed.validate()?;
    Ok(parsed)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::layers::{LayerKind, LayerSpec};

    pub(crate) fn toy_config() -> RunConfig {
        RunConfig {
            network: NetworkSpec {
                input_channels: 1,
                input_size: 8,
                layers: vec![
                    LayerSpec {
                        kind: LayerKind::Conv {
                            channels: 4,
                            kernel: 4,
                            stride: 2,
                            padding: Some(1),
                        },
                        gated: true,
                        fgc: false,
                    },
                    LayerSpec {
                        kind: LayerKind::Conv {
                            channels: 6,
                            kernel: 4,
                            stride: 2,
                            padding: Some(1),
                        },
                        gated: true,
                        fgc: false,
                    },
                ],
                classes: 2,
            },
            fgc_layers: None,
            k: default_k(),
            eta: default_eta(),
            rho: default_rho(),
            tau: default_tau(),
            bank_momentum: default_bank_momentum(),
            cosine_similarity: false,
            neighbor_source: NeighborSourceConfig::FeatureIndependent,
            optimizer: OptimizerConfig {
                lr: 0.05,
                milestones: vec![],
                decay_factor: 0.1,
                momentum: 0.9,
                weight_decay: 5e-4,
                gate_params_no_decay: true,
            },
            epochs: 1,
            batch_size: 8,
            seed: 1,
            dataset: DatasetConfig::Synth {
                classes: 2,
                train_per_class: 8,
                test_per_class: 4,
                image_size: 8,
                geometry: ClassGeometry::Mixed,
                noise_sigma: 0.3,
                seed: 7,
            },
        }
    }

    #[test]
    fn defaults_match_documented_values() {
        let toml_text = r#"
            epochs = 2
            batch_size = 16
            seed = 3

            [network]
            input_channels = 1
            input_size = 16
            classes = 4
            [[network.layers]]
            type = "conv"
            channels = 8
            kernel = 3
            gated = true

            [optimizer]
            lr = 0.1

            [dataset]
            kind = "synth"
            classes = 4
            train_per_class = 10
            test_per_class = 5
            image_size = 16
            noise_sigma = 0.3
            seed = 11
        "#;
        let cfg: RunConfig = toml::from_str(toml_text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.k, 200);
        assert_eq!(cfg.eta, 0.003);
        assert_eq!(cfg.rho, 0.4);
        assert_eq!(cfg.tau, 0.07);
        assert_eq!(cfg.bank_momentum, 0.5);
        assert_eq!(cfg.optimizer.momentum, 0.9);
        assert_eq!(cfg.optimizer.weight_decay, 5e-4);
        assert!(cfg.optimizer.gate_params_no_decay);
        assert_eq!(cfg.neighbor_source, NeighborSourceConfig::FeatureIndependent);
    }

    #[test]
    fn omega_defaults_to_last_third_of_gated_layers() {
        let mut cfg = toy_config();
        assert_eq!(cfg.effective_fgc_layers().unwrap(), vec![1]);
        cfg.fgc_layers = Some(vec![0, 1]);
        assert_eq!(cfg.effective_fgc_layers().unwrap(), vec![0, 1]);
    }

    #[test]
    fn ungated_omega_entry_is_rejected() {
        let mut cfg = toy_config();
        cfg.network.layers[0].gated = false;
        cfg.fgc_layers = Some(vec![0]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let mut cfg = toy_config();
        if let DatasetConfig::Synth { classes, .. } = &mut cfg.dataset {
            *classes = 3;
        }
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_and_toml_round_trip() {
        let cfg = toy_config();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        let toml_text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&toml_text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn stable_hash_tracks_content() {
        let a = toy_config();
        let mut b = toy_config();
        assert_eq!(a.stable_hash(), b.stable_hash());
        b.rho = 0.01;
        assert_ne!(a.stable_hash(), b.stable_hash());
    }
}
