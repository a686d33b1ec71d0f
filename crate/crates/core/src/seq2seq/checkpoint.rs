//! Checkpoint container.
//!
//! A checkpoint file is one line of JSON (the [`CheckpointHeader`]) followed
//! by the backend's opaque parameter blob. The header carries the SHA-256 of
//! the blob, so stage tags and metrics can be read without touching the
//! parameters and corruption is caught on load.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Seq2Seq;
use crate::error::{Error, Result};
use crate::eval::MetricReport;

pub const FORMAT: &str = "semidqg-checkpoint/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageTag {
    Stage1,
    Stage2,
    Stage3,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub backend_id: String,
    pub stage_tag: StageTag,
    pub config_hash: String,
    pub seed: u64,
    pub metrics: MetricReport,
    pub blob_len: usize,
    pub blob_sha256: String,
}

/// What the caller knows about a checkpoint beyond the parameters themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub stage_tag: StageTag,
    pub config_hash: String,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBundle {
    pub header: CheckpointHeader,
    pub blob: Vec<u8>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_checkpoint<M: Seq2Seq>(model: &M, meta: CheckpointMeta) -> CheckpointBundle {
    let blob = model.to_blob();
    CheckpointBundle {
        header: CheckpointHeader {
            format: FORMAT.to_string(),
            backend_id: model.backend_id().to_string(),
            stage_tag: meta.stage_tag,
            config_hash: meta.config_hash,
            seed: model.seed(),
            metrics: meta.metrics,
            blob_len: blob.len(),
            blob_sha256: sha256_hex(&blob),
        },
        blob,
    }
}

/// Restores a model. With `expected_hash`, a checkpoint produced under a
/// different configuration is rejected.
pub fn load_checkpoint<M: Seq2Seq>(bundle: &CheckpointBundle, expected_hash: Option<&str>) -> Result<M> {
    bundle.verify()?;
    if let Some(expected) = expected_hash {
        if bundle.header.config_hash != expected {
            return Err(Error::Integrity(format!(
                "config hash {} does not match expected {expected}",
                bundle.header.config_hash
            )));
        }
    }
    M::from_blob(&bundle.blob)
}

impl CheckpointBundle {
    pub fn verify(&self) -> Result<()> {
        if self.header.format != FORMAT {
            return Err(Error::Integrity(format!("unknown format `{}`", self.header.format)));
        }
        if self.blob.len() != self.header.blob_len {
            return Err(Error::Integrity(format!(
                "blob is {} bytes, header says {}",
                self.blob.len(),
                self.header.blob_len
            )));
        }
        let actual = sha256_hex(&self.blob);
        if actual != self.header.blob_sha256 {
            return Err(Error::Integrity("blob checksum mismatch".into()));
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = File::create(path)?;
        serde_json::to_writer(&mut f, &self.header)?;
        f.write_all(b"\n")?;
        f.write_all(&self.blob)?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path)?);
        let header = read_header_from(&mut reader)?;
        let mut blob = Vec::with_capacity(header.blob_len);
        reader.read_to_end(&mut blob)?;
        let bundle = CheckpointBundle { header, blob };
        bundle.verify()?;
        Ok(bundle)
    }

    /// Reads only the JSON header line.
    pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
        read_header_from(&mut BufReader::new(File::open(path)?))
    }
}

fn read_header_from<R: BufRead>(reader: &mut R) -> Result<CheckpointHeader> {
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    serde_json::from_slice(&line).map_err(|e| Error::Integrity(format!("unreadable header: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::{DecodeConfig, ModelDims, TinySeq2Seq, Vocab};

    fn model() -> TinySeq2Seq {
        TinySeq2Seq::new(
            Vocab::from_words(["user:", "hi", "ireland", "bowling"]),
            ModelDims {
                embed: 4,
                hidden: 4,
                ..Default::default()
            },
            42,
        )
    }

    fn meta(hash: &str) -> CheckpointMeta {
        CheckpointMeta {
            stage_tag: StageTag::Stage2,
            config_hash: hash.into(),
            metrics: MetricReport::new("dev"),
        }
    }

    #[test]
    fn file_round_trip_preserves_behavior() {
        let m = model();
        let bundle = save_checkpoint(&m, meta("abc"));
        let f = tempfile::NamedTempFile::new().unwrap();
        bundle.write(f.path()).unwrap();
        let back: TinySeq2Seq = load_checkpoint(&CheckpointBundle::read(f.path()).unwrap(), Some("abc")).unwrap();
        let cfg = DecodeConfig::beam(3, 3).with_max_len(3);
        assert_eq!(back.generate("user: hi", &cfg).unwrap(), m.generate("user: hi", &cfg).unwrap());
    }

    #[test]
    fn header_is_plain_json_first_line() {
        let bundle = save_checkpoint(&model(), meta("abc"));
        let f = tempfile::NamedTempFile::new().unwrap();
        bundle.write(f.path()).unwrap();
        let bytes = std::fs::read(f.path()).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let v: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(v["stage_tag"], "stage2");
        assert_eq!(v["config_hash"], "abc");
        assert_eq!(CheckpointBundle::read_header(f.path()).unwrap().stage_tag, StageTag::Stage2);
    }

    #[test]
    fn hash_mismatch_and_corruption_are_integrity_errors() {
        let bundle = save_checkpoint(&model(), meta("abc"));
        assert!(matches!(
            load_checkpoint::<TinySeq2Seq>(&bundle, Some("other")),
            Err(Error::Integrity(_))
        ));
        let mut bad = bundle.clone();
        let last = bad.blob.len() - 1;
        bad.blob[last] ^= 0xff;
        assert!(matches!(load_checkpoint::<TinySeq2Seq>(&bad, None), Err(Error::Integrity(_))));

        let f = tempfile::NamedTempFile::new().unwrap();
        bundle.write(f.path()).unwrap();
        let mut bytes = std::fs::read(f.path()).unwrap();
        let n = bytes.len();
        bytes[n - 9] ^= 0x01;
        std::fs::write(f.path(), bytes).unwrap();
        assert!(matches!(CheckpointBundle::read(f.path()), Err(Error::Integrity(_))));
    }
}
