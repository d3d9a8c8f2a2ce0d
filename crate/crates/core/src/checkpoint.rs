//! Anchor-set (`PALA`) and training checkpoint (`PALC`) files.
//!
//! ```text
//! PALA: "PALA" | version u32 | modality u8 | K u32 | D u32 | K*D f64 | tau_p f64 | tau f64
//! PALC: "PALC" | version u32 | config_len u32 | config (UTF-8 key=value lines)
//!       | PALA vision | PALA language
//!       | m_v, v_v, m_l, v_l (K*D f64 each)
//!       | step u64 | epoch u64 | running_loss f64 | running_count u64
//! ```
//!
//! All numbers little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::Modality;
use crate::matrix::Matrix;
use crate::relrep::AnchorSet;
use crate::trainer::{Moments, TrainConfig, TrainState};

pub const ANCHOR_MAGIC: &[u8; 4] = b"PALA";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PALC";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corruption(format!("truncated while reading {what}")));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format(format!("{what} too large")))?, what)?;
        Ok(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect())
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic").map_err(|_| Error::Format("file too short for magic".into()))?;
        if got != want {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32("version")?;
        if v != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported version {v}")));
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// One anchor set plus the temperatures needed to use it on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorFile {
    pub anchors: AnchorSet,
    pub tau_p: f64,
    pub tau: f64,
}

fn write_anchor_block(out: &mut Vec<u8>, anchors: &AnchorSet, tau_p: f64, tau: f64) {
    out.extend_from_slice(ANCHOR_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(anchors.modality().tag());
    out.extend_from_slice(&(anchors.k() as u32).to_le_bytes());
    out.extend_from_slice(&(anchors.dim() as u32).to_le_bytes());
    put_f64s(out, anchors.matrix().as_slice());
    out.extend_from_slice(&tau_p.to_le_bytes());
    out.extend_from_slice(&tau.to_le_bytes());
}

fn read_anchor_block(r: &mut Reader<'_>) -> Result<AnchorFile> {
    r.magic(ANCHOR_MAGIC)?;
    r.version()?;
    let modality = Modality::from_tag(r.u8("modality")?)?;
    let k = r.u32("K")? as usize;
    let d = r.u32("D")? as usize;
    let data = r.f64s(k * d, "anchor values")?;
    let tau_p = r.f64("tau_p")?;
    let tau = r.f64("tau")?;
    let anchors = AnchorSet::new(modality, Matrix::from_vec(k, d, data))
        .map_err(|e| Error::Format(format!("invalid anchor block: {e}")))?;
    Ok(AnchorFile { anchors, tau_p, tau })
}

pub fn encode_anchor_file(file: &AnchorFile) -> Vec<u8> {
    let mut out = Vec::new();
    write_anchor_block(&mut out, &file.anchors, file.tau_p, file.tau);
    out
}

pub fn decode_anchor_file(bytes: &[u8]) -> Result<AnchorFile> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let file = read_anchor_block(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::Corruption("trailing bytes after anchor block".into()));
    }
    Ok(file)
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let cfg = state.config.to_kv();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    write_anchor_block(&mut out, &state.anchors_v, state.config.tau_p, state.config.tau);
    write_anchor_block(&mut out, &state.anchors_l, state.config.tau_p, state.config.tau);
    for m in [&state.moments_v, &state.moments_l] {
        put_f64s(&mut out, m.first.as_slice());
        put_f64s(&mut out, m.second.as_slice());
    }
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.epoch.to_le_bytes());
    out.extend_from_slice(&state.running_loss.to_le_bytes());
    out.extend_from_slice(&state.running_count.to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config block")?)
        .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let config = TrainConfig::from_kv(text).map_err(|e| Error::Format(format!("config block: {e}")))?;
    let v = read_anchor_block(&mut r)?;
    let l = read_anchor_block(&mut r)?;
    if v.anchors.modality() != Modality::Vision || l.anchors.modality() != Modality::Language {
        return Err(Error::Format("anchor blocks out of order".into()));
    }
    let mut moments = |a: &AnchorSet| -> Result<Moments> {
        let n = a.k() * a.dim();
        Ok(Moments {
            first: Matrix::from_vec(a.k(), a.dim(), r.f64s(n, "first moments")?),
            second: Matrix::from_vec(a.k(), a.dim(), r.f64s(n, "second moments")?),
        })
    };
    let moments_v = moments(&v.anchors)?;
    let moments_l = moments(&l.anchors)?;
    let step = r.u64("step")?;
    let epoch = r.u64("epoch")?;
    let running_loss = r.f64("running loss")?;
    let running_count = r.u64("running count")?;
    if r.pos != bytes.len() {
        return Err(Error::Corruption("trailing bytes after checkpoint".into()));
    }
    Ok(TrainState {
        config,
        anchors_v: v.anchors,
        anchors_l: l.anchors,
        moments_v,
        moments_l,
        step,
        epoch,
        running_loss,
        running_count,
    })
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn save_anchor_file(file: &AnchorFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_anchor_file(file)).map_err(|e| Error::io(path, e))
}

pub fn load_anchor_file(path: impl AsRef<Path>) -> Result<AnchorFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_anchor_file(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, SyntheticSpec};
    use crate::trainer::train;

    fn trained_state() -> TrainState {
        let data = generate_synthetic(&SyntheticSpec { num_train: 24, num_test: 0, ..Default::default() }).unwrap().train;
        let cfg = TrainConfig { anchors: 6, batch_size: 5, epochs: 1, learning_rate: 1e-2, ..Default::default() };
        train(&data, &cfg).unwrap().state
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let state = trained_state();
        let bytes = encode_checkpoint(&state);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, state);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn tampered_magic_and_version() {
        let mut bytes = encode_checkpoint(&trained_state());
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        bytes[4] = 2;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_checkpoint_is_corruption() {
        let bytes = encode_checkpoint(&trained_state());
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Corruption(_))));
    }

    #[test]
    fn anchor_file_round_trip() {
        let state = trained_state();
        let file = AnchorFile { anchors: state.anchors_l.clone(), tau_p: 0.03, tau: 0.07 };
        let bytes = encode_anchor_file(&file);
        assert_eq!(&bytes[..4], b"PALA");
        assert_eq!(bytes.len(), 4 + 4 + 1 + 4 + 4 + 8 * file.anchors.k() * file.anchors.dim() + 16);
        assert_eq!(decode_anchor_file(&bytes).unwrap(), file);
    }
}
