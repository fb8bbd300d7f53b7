//! Round-state checkpoints.
//!
//! ```text
//! "FENK" | version u16 | meta_len u32 | meta json |
//!   blob_count u32 | { blob_len u32 | TensorBlob } * blob_count |
//! crc32c u32
//! ```
//!
//! Little-endian throughout. The first blob is the global model, the rest
//! are pending client updates in client order. A `<name>.metrics.json`
//! sidecar carries the metric history for humans and scripts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{RoundState, RoundStatus};
use crate::error::{Error, TransportError};
use crate::trainer::ClientUpdate;
use crate::transport::{decode_params, encode_params};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FENK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct PendingMeta {
    client_id: usize,
    sample_count: usize,
    final_train_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    round_index: usize,
    expected_clients: usize,
    status: RoundStatus,
    metric_history: Vec<(usize, f64)>,
    received: Vec<PendingMeta>,
}

fn encode(state: &RoundState) -> Result<Vec<u8>, Error> {
    let meta = Meta {
        round_index: state.round_index,
        expected_clients: state.expected_clients,
        status: state.status,
        metric_history: state.metric_history.clone(),
        received: state
            .received()
            .iter()
            .map(|u| PendingMeta {
                client_id: u.client_id,
                sample_count: u.sample_count,
                final_train_loss: u.final_train_loss,
            })
            .collect(),
    };
    let meta = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    let blobs: Vec<Vec<u8>> = std::iter::once(&state.global_params)
        .chain(state.received().iter().map(|u| &u.params))
        .map(encode_params)
        .collect();
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for b in &blobs {
        out.extend_from_slice(&(b.len() as u32).to_le_bytes());
        out.extend_from_slice(b);
    }
    let crc = crc32c::crc32c(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<RoundState, Error> {
    let truncated = || Error::from(TransportError::Truncated);
    if bytes.len() < 4 {
        return Err(truncated());
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(TransportError::BadMagic.into());
    }
    if bytes.len() < 6 {
        return Err(truncated());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(TransportError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        }
        .into());
    }
    if bytes.len() < 10 {
        return Err(truncated());
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32c::crc32c(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        // A cut-short file and a flipped bit look the same here.
        return Err(TransportError::BadCrc.into());
    }

    let mut pos = 6;
    let mut take = |n: usize| -> Result<&[u8], Error> {
        let s = body.get(pos..pos + n).ok_or_else(truncated)?;
        pos += n;
        Ok(s)
    };
    let read_u32 = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
    let meta_len = read_u32(take(4)?);
    let meta: Meta = serde_json::from_slice(take(meta_len)?)?;
    let blob_count = read_u32(take(4)?);
    if blob_count != meta.received.len() + 1 {
        return Err(TransportError::Malformed("blob count does not match metadata".into()).into());
    }
    let mut params = Vec::with_capacity(blob_count);
    for _ in 0..blob_count {
        let len = read_u32(take(4)?);
        params.push(decode_params(take(len)?)?);
    }
    if pos != body.len() {
        return Err(TransportError::Malformed("trailing bytes".into()).into());
    }

    let mut params = params.into_iter();
    let mut state = RoundState::new(meta.expected_clients, params.next().expect("blob_count >= 1"));
    state.round_index = meta.round_index;
    state.status = meta.status;
    state.metric_history = meta.metric_history;
    state.restore_received(
        meta.received
            .into_iter()
            .zip(params)
            .map(|(m, p)| ClientUpdate {
                client_id: m.client_id,
                params: p,
                sample_count: m.sample_count,
                final_train_loss: m.final_train_loss,
            })
            .collect(),
    );
    Ok(state)
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(".metrics.json");
    path.with_file_name(name)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Write the checkpoint and its metrics sidecar, each via temp-file rename.
pub fn save_checkpoint(state: &RoundState, path: &Path) -> Result<(), Error> {
    write_atomic(path, &encode(state)?)?;
    write_atomic(&sidecar_path(path), &serde_json::to_vec_pretty(&state.metric_history)?)
}

pub fn load_checkpoint(path: &Path) -> Result<RoundState, Error> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;

    fn state() -> RoundState {
        let mut p = ParamSet::new();
        p.push("w", vec![2, 2], vec![1.0, -0.0, 3.5e-8, 7.0]).unwrap();
        let mut s = RoundState::new(2, p.clone());
        s.complete_round(0.25);
        s.complete_round(0.5);
        s.receive(ClientUpdate {
            client_id: 1,
            params: p,
            sample_count: 3,
            final_train_loss: 0.1,
        })
        .unwrap();
        s
    }

    #[test]
    fn roundtrip_with_pending_updates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round.ckpt");
        let s = state();
        save_checkpoint(&s, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, s);
        assert!(back.global_params.bitwise_eq(&s.global_params));
        let side = fs::read_to_string(dir.path().join("round.metrics.json")).unwrap();
        assert!(side.contains("0.25"));
        assert!(!dir.path().join("round.ckpt.tmp").exists());
    }

    #[test]
    fn corrupt_and_version_errors() {
        let bytes = encode(&state()).unwrap();
        let cut = &bytes[..bytes.len() - 7];
        assert!(matches!(
            decode(cut),
            Err(Error::Transport(TransportError::BadCrc | TransportError::Truncated))
        ));
        let mut v = bytes.clone();
        v[4] = 2;
        assert!(matches!(
            decode(&v),
            Err(Error::Transport(TransportError::Version { found: 2, .. }))
        ));
        let mut flipped = bytes.clone();
        flipped[20] ^= 0x10;
        assert!(matches!(decode(&flipped), Err(Error::Transport(TransportError::BadCrc))));
    }
}
