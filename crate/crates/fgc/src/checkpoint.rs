//! Versioned binary checkpoints.
//!
//! Layout: magic `FGCK`, u32 version (little-endian), u64 header length,
//! a JSON header describing every section (config, epoch, rng state, tensor
//! names/shapes, bank geometry), then the raw float64 payloads in header
//! order: parameters, buffers, optimizer velocities, banks. Float bits pass
//! through untouched, so `load(save(x))` is exact and resuming reproduces
//! training bit-for-bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BankRecord {
    pub layer: usize,
    pub kind: String,
    pub rows: usize,
    pub dim: usize,
    pub momentum: f64,
    #[serde(skip)]
    pub entries: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub config_hash: u64,
    pub epoch: usize,
    pub rng_state: [u64; 4],
    pub params: Vec<TensorRecord>,
    pub buffers: Vec<TensorRecord>,
    /// Velocity buffers aligned with `params`.
    pub velocities: Vec<Vec<f64>>,
    pub banks: Vec<BankRecord>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    config_hash: String,
    epoch: usize,
    rng_state: [u64; 4],
    params: Vec<TensorRecord>,
    buffers: Vec<TensorRecord>,
    velocity_lens: Vec<usize>,
    banks: Vec<BankRecord>,
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn take_f64s(bytes: &[u8], cursor: &mut usize, count: usize, path: &str) -> Result<Vec<f64>> {
    let need = count * 8;
    let slice = bytes
        .get(*cursor..*cursor + need)
        .ok_or_else(|| Error::parse(path, format!("payload truncated at byte {}", *cursor)))?;
    *cursor += need;
    Ok(slice
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let display = path.display().to_string();
        let header = Header {
            config: self.config.clone(),
            config_hash: format!("{:016x}", self.config_hash),
            epoch: self.epoch,
            rng_state: self.rng_state,
            params: self.params.clone(),
            buffers: self.buffers.clone(),
            velocity_lens: self.velocities.iter().map(|v| v.len()).collect(),
            banks: self.banks.clone(),
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| Error::parse(&display, e.to_string()))?;

        let mut bytes = Vec::new();
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&self.version.to_le_bytes());
        bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header_json);
        for p in &self.params {
            push_f64s(&mut bytes, &p.data);
        }
        for b in &self.buffers {
            push_f64s(&mut bytes, &b.data);
        }
        for v in &self.velocities {
            push_f64s(&mut bytes, v);
        }
        for b in &self.banks {
            push_f64s(&mut bytes, &b.entries);
        }

        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(&display, e))?;
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(&display, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&display, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let display = path.display().to_string();
        let bytes = fs::read(path).map_err(|e| Error::io(&display, e))?;
        if bytes.len() < 16 || &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(Error::parse(&display, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::parse(
                &display,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let header_len = u64::from_le_bytes([
            bytes[8], bytes[9], bytes[10], bytes[11], bytes[12], bytes[13], bytes[14], bytes[15],
        ]) as usize;
        let header_bytes = bytes
            .get(16..16 + header_len)
            .ok_or_else(|| Error::parse(&display, "header truncated"))?;
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::parse(&display, e.to_string()))?;
        let config_hash = u64::from_str_radix(&header.config_hash, 16)
            .map_err(|e| Error::parse(&display, format!("bad config hash: {e}")))?;

        let mut cursor = 16 + header_len;
        let mut params = header.params;
        for p in params.iter_mut() {
            let count: usize = p.shape.iter().product();
            p.data = take_f64s(&bytes, &mut cursor, count, &display)?;
        }
        let mut buffers = header.buffers;
        for b in buffers.iter_mut() {
            let count: usize = b.shape.iter().product();
            b.data = take_f64s(&bytes, &mut cursor, count, &display)?;
        }
        let mut velocities = Vec::with_capacity(header.velocity_lens.len());
        for len in &header.velocity_lens {
            velocities.push(take_f64s(&bytes, &mut cursor, *len, &display)?);
        }
        let mut banks = header.banks;
        for b in banks.iter_mut() {
            b.entries = take_f64s(&bytes, &mut cursor, b.rows * b.dim, &display)?;
        }
        if cursor != bytes.len() {
            return Err(Error::parse(
                &display,
                format!("trailing bytes: consumed {cursor} of {}", bytes.len()),
            ));
        }
        Ok(Checkpoint {
            version,
            config: header.config,
            config_hash,
            epoch: header.epoch,
            rng_state: header.rng_state,
            params,
            buffers,
            velocities,
            banks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_checkpoint() -> Checkpoint {
        let cfg: RunConfig = toml::from_str(
            r#"
            epochs = 1
            batch_size = 4
            seed = 9

            [network]
            input_channels = 1
            input_size = 8
            classes = 2
            [[network.layers]]
            type = "conv"
            channels = 4
            kernel = 3
            gated = true

            [optimizer]
            lr = 0.1

            [dataset]
            kind = "synth"
            classes = 2
            train_per_class = 4
            test_per_class = 2
            image_size = 8
            noise_sigma = 0.1
            seed = 3
        "#,
        )
        .unwrap();
        let hash = cfg.stable_hash();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: cfg,
            config_hash: hash,
            epoch: 3,
            rng_state: [1, 2, 3, u64::MAX],
            params: vec![TensorRecord {
                name: "w".to_string(),
                shape: vec![2, 3],
                data: vec![0.5, -0.25, f64::MIN_POSITIVE, 1e300, -0.0, 3.125],
            }],
            buffers: vec![TensorRecord {
                name: "running".to_string(),
                shape: vec![2],
                data: vec![0.125, 4.5],
            }],
            velocities: vec![vec![0.0, 1.0, -1.0, 2.0, -2.0, 0.5]],
            banks: vec![BankRecord {
                layer: 0,
                kind: "feature".to_string(),
                rows: 2,
                dim: 2,
                momentum: 0.5,
                entries: vec![0.1, 0.2, 0.3, 0.4],
            }],
        }
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = std::env::temp_dir().join("fgc_ckpt_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.fgck");
        let ckpt = sample_checkpoint();
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, back);
        // Bit-level check on the one negative zero in the payload.
        assert_eq!(back.params[0].data[4].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join("fgc_ckpt_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.fgck");
        fs::write(&path, b"NOPE....").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
