//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    b"SONARCK\0"
//! version  u32
//! hlen     u32, then hlen bytes of JSON header (model config and metadata)
//! count    u32, then per buffer:
//!          u32 name length, name bytes, u32 rows, u32 cols, rows*cols f64
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a round trip is exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SonarError};
use crate::model::{ModelConfig, SonarModel};
use crate::nn::{ParamStore, Tensor2};

const MAGIC: &[u8; 8] = b"SONARCK\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    /// Epoch the parameters were taken from, if produced by training.
    pub epoch: Option<usize>,
    pub val_eer: Option<f64>,
}

pub fn encode(model: &SonarModel, epoch: Option<usize>, val_eer: Option<f64>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&CheckpointHeader {
        config: *model.config(),
        epoch,
        val_eer,
    })?;
    let params = model.params();
    let mut out = Vec::with_capacity(64 + header.len() + 8 * params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&len_u32(header.len())?.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&len_u32(params.len())?.to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&len_u32(name.len())?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&len_u32(t.rows())?.to_le_bytes());
        out.extend_from_slice(&len_u32(t.cols())?.to_le_bytes());
        for v in t.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| SonarError::Checkpoint(format!("length {n} exceeds u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| SonarError::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(SonarModel, CheckpointHeader)> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(8)? != MAGIC {
        return Err(SonarError::Checkpoint("not a checkpoint file".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(SonarError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let hlen = c.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(c.take(hlen)?)
        .map_err(|e| SonarError::Checkpoint(format!("header: {e}")))?;
    let count = c.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(nlen)?)
            .map_err(|_| SonarError::Checkpoint("buffer name is not UTF-8".into()))?
            .to_string();
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| SonarError::Checkpoint(format!("buffer {name} too large")))?;
        let values = c
            .take(n)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor2::from_vec(rows, cols, values)?)?;
    }
    if c.at != bytes.len() {
        return Err(SonarError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - c.at
        )));
    }
    let model = SonarModel::from_parts(header.config, params)?;
    Ok((model, header))
}

pub fn save(
    path: &Path,
    model: &SonarModel,
    epoch: Option<usize>,
    val_eer: Option<f64>,
) -> Result<()> {
    let bytes = encode(model, epoch, val_eer)?;
    let mut f = fs::File::create(path).map_err(|e| SonarError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| SonarError::io(path, e))
}

pub fn load(path: &Path) -> Result<(SonarModel, CheckpointHeader)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| SonarError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        SonarError::Checkpoint(m) => SonarError::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::model::{Mode, QuerySource};

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d_model: 8,
                n_blocks: 1,
                n_heads: 2,
                frame_stride: 16,
                frame_len: 24,
                ffn_dim: 8,
                max_frames: 6,
            },
            m_filters: 3,
            head_hidden: 6,
            mode: Mode::Full,
            query_source: QuerySource::Content,
            freeze_srm: false,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let m = SonarModel::new(tiny(), 3).unwrap();
        let bytes = encode(&m, Some(4), Some(0.125)).unwrap();
        let (back, header) = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(header.epoch, Some(4));
        assert_eq!(encode(&back, Some(4), Some(0.125)).unwrap(), bytes);
    }

    #[test]
    fn file_round_trip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = SonarModel::new(tiny(), 1).unwrap();
        save(&path, &m, None, None).unwrap();
        assert_eq!(load(&path).unwrap().0, m);
        assert!(load(&dir.path().join("none.ckpt")).unwrap_err().is_usage());
    }

    #[test]
    fn rejects_corruption() {
        let m = SonarModel::new(tiny(), 1).unwrap();
        let bytes = encode(&m, None, None).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).unwrap_err().is_usage());
    }
}
