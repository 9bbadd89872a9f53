//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "RMCKPT01"
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON (CheckpointHeader)
//! arrays       for each header.sections entry, `len` f64 values
//! digest       32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! The header carries each section's layout descriptor, version and length,
//! the RNG states, and the pipeline's counters, so a file can be inspected
//! without knowing the run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::model::{Layout, PolicyParams};

pub const MAGIC: &[u8; 8] = b"RMCKPT01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),
    #[error("checkpoint was written by a different configuration (expected hash {expected}, found {found})")]
    ConfigMismatch { expected: String, found: String },
}

/// Serializable snapshot of a ChaCha8 stream position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, CheckpointError> {
        use rand::SeedableRng;
        let bad = || CheckpointError::Format("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SectionHeader {
    name: String,
    layout: Layout,
    version: u64,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    config_hash: String,
    step: u64,
    sections: Vec<SectionHeader>,
    rng_states: BTreeMap<String, RngState>,
    counters: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointData {
    pub config_hash: String,
    pub step: u64,
    /// Named parameter sets (e.g. `actor`, `reference`, `critic`).
    pub params: BTreeMap<String, PolicyParams>,
    pub rng_states: BTreeMap<String, RngState>,
    pub counters: BTreeMap<String, u64>,
}

pub fn encode(data: &CheckpointData) -> Vec<u8> {
    let header = CheckpointHeader {
        config_hash: data.config_hash.clone(),
        step: data.step,
        sections: data
            .params
            .iter()
            .map(|(name, p)| SectionHeader { name: name.clone(), layout: p.layout, version: p.version, len: p.values.len() })
            .collect(),
        rng_states: data.rng_states.clone(),
        counters: data.counters.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in data.params.values() {
        for v in &p.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode(bytes: &[u8]) -> Result<CheckpointData, CheckpointError> {
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(CheckpointError::Integrity(format!("file too short ({} bytes)", bytes.len())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Integrity("checksum mismatch".into()));
    }
    if &body[..8] != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let header_len = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| CheckpointError::Format("header length out of range".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&body[12..header_end]).map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
    let mut cursor = header_end;
    let mut params = BTreeMap::new();
    for s in &header.sections {
        if s.layout.param_count() != s.len {
            return Err(CheckpointError::Format(format!("section `{}` length disagrees with its layout", s.name)));
        }
        let end = cursor
            .checked_add(s.len * 8)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| CheckpointError::Format(format!("section `{}` truncated", s.name)))?;
        let values = body[cursor..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        cursor = end;
        params.insert(s.name.clone(), PolicyParams { layout: s.layout, values, version: s.version });
    }
    if cursor != body.len() {
        return Err(CheckpointError::Format("trailing bytes after parameter arrays".into()));
    }
    Ok(CheckpointData {
        config_hash: header.config_hash,
        step: header.step,
        params,
        rng_states: header.rng_states,
        counters: header.counters,
    })
}

pub fn save(path: &Path, data: &CheckpointData) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, encode(data))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<CheckpointData, CheckpointError> {
    decode(&fs::read(path)?)
}

/// Load and refuse files written under a different configuration hash.
pub fn load_matching(path: &Path, expected_hash: &str) -> Result<CheckpointData, CheckpointError> {
    let data = load(path)?;
    if data.config_hash != expected_hash {
        return Err(CheckpointError::ConfigMismatch { expected: expected_hash.to_string(), found: data.config_hash });
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample_data() -> CheckpointData {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.next_u64();
        let mut params = BTreeMap::new();
        params.insert("actor".to_string(), PolicyParams { version: 12, ..PolicyParams::init(Layout::policy(5, 2, 3, 4), 1, 1.0) });
        params.insert("critic".to_string(), PolicyParams::init(Layout::value(5, 2, 3, 4), 2, 1.0));
        CheckpointData {
            config_hash: "abc".into(),
            step: 50,
            params,
            rng_states: [("master".to_string(), RngState::capture(&rng))].into_iter().collect(),
            counters: [("next_request_id".to_string(), 77)].into_iter().collect(),
        }
    }

    #[test]
    fn round_trip_exact() {
        let data = sample_data();
        let back = decode(&encode(&data)).unwrap();
        assert_eq!(back, data);
        let mut a = data.rng_states["master"].restore().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.next_u64();
        assert_eq!(a.next_u64(), rng.next_u64());
    }

    #[test]
    fn truncated_and_corrupt_files() {
        let bytes = encode(&sample_data());
        assert!(matches!(decode(&bytes[..bytes.len() - 9]), Err(CheckpointError::Integrity(_))));
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(matches!(decode(&flipped), Err(CheckpointError::Integrity(_))));
        assert!(matches!(decode(&bytes[..10]), Err(CheckpointError::Integrity(_))));
    }

    #[test]
    fn config_hash_refusal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save(&path, &sample_data()).unwrap();
        assert!(load_matching(&path, "abc").is_ok());
        assert!(matches!(load_matching(&path, "xyz"), Err(CheckpointError::ConfigMismatch { .. })));
    }
}
