//! Checkpoint container: a magic line, one JSON header line, then every
//! parameter as little-endian `f64` in header-index order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::ModelConfig;
use crate::data::standardize::StandardizationStats;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8] = b"TRJCKPT1\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub stats: StandardizationStats,
    pub iteration: usize,
    pub seed: u64,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    offset: usize,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    stats: StandardizationStats,
    iteration: usize,
    seed: u64,
    params: Vec<IndexEntry>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut offset = 0;
    let mut index = Vec::with_capacity(ckpt.params.len());
    for e in ckpt.params.entries() {
        let (r, c) = e.value.dim();
        index.push(IndexEntry {
            name: e.name.clone(),
            offset,
            shape: [r, c],
        });
        offset += r * c;
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: ckpt.config.clone(),
        stats: ckpt.stats.clone(),
        iteration: ckpt.iteration,
        seed: ckpt.seed,
        params: index,
    };
    let mut buf = Vec::with_capacity(MAGIC.len() + 4096 + offset * 8);
    buf.extend_from_slice(MAGIC);
    serde_json::to_writer(&mut buf, &header)?;
    buf.push(b'\n');
    for e in ckpt.params.entries() {
        for v in e.value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Checkpoint("missing TRJCKPT1 magic".into()))?;
    let eol = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let raw: Value =
        serde_json::from_slice(&rest[..eol]).map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    let version = raw.get("version").and_then(Value::as_u64);
    if version != Some(u64::from(CHECKPOINT_VERSION)) {
        return Err(Error::Checkpoint(format!(
            "format version {version:?} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let payload = &rest[eol + 1..];
    let total: usize = header.params.iter().map(|e| e.shape[0] * e.shape[1]).sum();
    if payload.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, index describes {}",
            payload.len(),
            total * 8
        )));
    }
    let mut params = ParamStore::new();
    for e in &header.params {
        let n = e.shape[0] * e.shape[1];
        let end = e.offset.checked_add(n).filter(|&end| end <= total);
        let end = end.ok_or_else(|| Error::Checkpoint(format!("parameter `{}` overruns the payload", e.name)))?;
        let values: Vec<f64> = payload[e.offset * 8..end * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = Array2::from_shape_vec((e.shape[0], e.shape[1]), values).expect("length checked");
        params
            .insert(e.name.clone(), m)
            .map_err(|err| Error::Checkpoint(format!("parameter `{}`: {err}", e.name)))?;
    }
    Ok(Checkpoint {
        config: header.config,
        stats: header.stats,
        iteration: header.iteration,
        seed: header.seed,
        params,
    })
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("checkpoint path {} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

impl Checkpoint {
    /// Errors with the first differing field when `expected` is not the
    /// architecture stored in the checkpoint.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        let stored = serde_json::to_value(&self.config)?;
        let want = serde_json::to_value(expected)?;
        match first_difference(&stored, &want, String::new()) {
            None => Ok(()),
            Some((field, a, b)) => Err(Error::ConfigMismatch {
                field,
                stored: a,
                expected: b,
            }),
        }
    }

    /// Copies every stored parameter into `target` by name.
    pub fn load_into(&self, target: &mut ParamStore) -> Result<()> {
        if self.params.len() != target.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                target.len()
            )));
        }
        for e in self.params.entries() {
            target
                .assign(&e.name, e.value.clone())
                .map_err(|err| Error::Checkpoint(format!("parameter `{}`: {err}", e.name)))?;
        }
        Ok(())
    }
}

fn first_difference(a: &Value, b: &Value, path: String) -> Option<(String, String, String)> {
    let join = |k: &str| {
        if path.is_empty() {
            k.to_string()
        } else {
            format!("{path}.{k}")
        }
    };
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter().find_map(|k| match (x.get(k), y.get(k)) {
                (Some(u), Some(v)) => first_difference(u, v, join(k)),
                (u, v) => Some((join(k), show(u), show(v))),
            })
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => x
            .iter()
            .zip(y)
            .enumerate()
            .find_map(|(i, (u, v))| first_difference(u, v, format!("{path}[{i}]"))),
        _ if a == b => None,
        _ => Some((path, a.to_string(), b.to_string())),
    }
}

fn show(v: Option<&Value>) -> String {
    v.map_or_else(|| "nothing".to_string(), Value::to_string)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamStore::new();
        for (name, r, c) in [("theta/a/w", 3, 4), ("phi/b/w", 1, 7), ("psi/c/w", 5, 1)] {
            let m = Array2::from_shape_fn((r, c), |_| rng.random_range(-1e3..1e3) * rng.random::<f64>());
            params.insert(name, m).unwrap();
        }
        Checkpoint {
            config: ModelConfig::default(),
            stats: StandardizationStats::default(),
            iteration: 17,
            seed: 99,
            params,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.iteration, 17);
        assert_eq!(back.config, ck.config);
        for (a, b) in ck.params.entries().iter().zip(back.params.entries()) {
            assert_eq!(a.name, b.name);
            let bits = |m: &Array2<f64>| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(encode_checkpoint(&back).unwrap(), fs::read(&path).unwrap());
    }

    #[test]
    fn truncated_and_versioned_files_fail() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_checkpoint(&bytes[..20]).is_err());
        let text = String::from_utf8_lossy(&bytes[..60]).replace("\"version\":1", "\"version\":9");
        let mut bumped = text.into_bytes();
        bumped.extend_from_slice(&bytes[60..]);
        let err = decode_checkpoint(&bumped).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn config_mismatch_names_field() {
        let ck = sample();
        let other = ModelConfig {
            latent_size: 7,
            ..ModelConfig::default()
        };
        match ck.check_config(&other).unwrap_err() {
            Error::ConfigMismatch { field, .. } => assert_eq!(field, "latent_size"),
            e => panic!("{e}"),
        }
        ck.check_config(&ModelConfig::default()).unwrap();
    }

    #[test]
    fn unknown_parameter_rejected_on_load() {
        let ck = sample();
        let mut target = ParamStore::new();
        target.insert("theta/a/w", Array2::zeros((3, 4))).unwrap();
        target.insert("phi/b/w", Array2::zeros((1, 7))).unwrap();
        target.insert("psi/other", Array2::zeros((5, 1))).unwrap();
        assert!(ck.load_into(&mut target).is_err());
    }
}
