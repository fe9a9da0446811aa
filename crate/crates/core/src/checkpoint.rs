//! Named-tensor checkpoint files.
//!
//! Layout: the magic line `compolab-ckpt\n`, a little-endian `u64` header
//! length, a JSON header, then the raw little-endian `f64` payload. The
//! header records every tensor's name, shape and offset, the payload size and
//! its SHA-256 digest, so a truncated or altered file is rejected before any
//! tensor is handed out.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;
use crate::transformer::{ModelConfig, COMPOSE_KEYS, COMPOSE_VALUES};

const MAGIC: &[u8] = b"compolab-ckpt\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Offset into the payload, in bytes.
    pub offset: usize,
}

/// Serialized position of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex(&rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes = unhex(&self.seed).filter(|b| b.len() == 32).ok_or_else(|| bad("malformed RNG seed"))?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&bytes);
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("malformed RNG position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Position of the batch iterator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub epoch: u64,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: u32,
    pub step: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rng: RngState,
    pub cursor: Cursor,
    #[serde(default)]
    pub src_vocab: Vec<String>,
    #[serde(default)]
    pub tgt_vocab: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
    pub payload_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: &str) -> Error {
    Error::Checkpoint(msg.to_string())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok()).collect()
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Number of composition scalars in the manifest.
    pub fn composition_scalars(&self) -> usize {
        self.header
            .tensors
            .iter()
            .filter(|e| e.name == COMPOSE_KEYS || e.name == COMPOSE_VALUES)
            .map(|e| e.shape.iter().product::<usize>())
            .sum()
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.tensors.iter().map(|(_, t)| t.len() * 8).sum());
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Fills the manifest fields of the header from the tensor list.
    fn seal(&mut self, payload: &[u8]) {
        let mut offset = 0;
        self.header.tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), dtype: "f64".into(), offset };
                offset += t.len() * 8;
                e
            })
            .collect();
        self.header.payload_bytes = payload.len();
        self.header.payload_sha256 = hex(&Sha256::digest(payload));
        self.header.format = FORMAT_VERSION;
    }

    pub fn to_bytes(&mut self) -> Result<Vec<u8>> {
        let payload = self.payload();
        self.seal(&payload);
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("not a checkpoint file (bad magic)"))?;
        if rest.len() < 8 {
            return Err(bad("truncated checkpoint header"));
        }
        let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < hlen {
            return Err(bad("truncated checkpoint header"));
        }
        let header: Header = serde_json::from_slice(&rest[..hlen])
            .map_err(|e| Error::Checkpoint(format!("corrupt checkpoint header: {e}")))?;
        if header.format != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", header.format)));
        }
        let payload = &rest[hlen..];
        if payload.len() != header.payload_bytes {
            return Err(Error::Checkpoint(format!(
                "checkpoint payload is {} bytes, header declares {} (truncated or padded file)",
                payload.len(),
                header.payload_bytes
            )));
        }
        if hex(&Sha256::digest(payload)) != header.payload_sha256 {
            return Err(bad("checkpoint payload digest mismatch"));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.dtype != "f64" {
                return Err(Error::Checkpoint(format!("tensor {} has unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let bytes = payload
                .get(e.offset..e.offset + n * 8)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} lies outside the payload", e.name)))?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(e.shape.clone(), data)
                .map_err(|err| Error::Checkpoint(format!("tensor {}: {err}", e.name)))?;
            tensors.push((e.name.clone(), t));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(4);
        for _ in 0..7 {
            rng.next_u32();
        }
        let mut back = RngState::capture(&rng).restore().unwrap();
        assert_eq!(back.next_u64(), rng.next_u64());
    }

    #[test]
    fn hex_round_trip() {
        assert_eq!(unhex(&hex(&[0, 255, 16])).unwrap(), [0, 255, 16]);
        assert!(unhex("abc").is_none());
        assert!(unhex("zz").is_none());
    }
}
