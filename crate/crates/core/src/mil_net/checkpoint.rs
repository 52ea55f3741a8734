//! Checkpoint file:
//! `MILM` | version u16 | dim, hidden, attn, tasks as u32 | flags u16 (bit0 gated)
//! | parameters as f32 in flat order | CRC32 of all preceding bytes. Little-endian throughout.

use std::fs;
use std::path::Path;

use super::{ModelDims, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MILM";
pub const CHECKPOINT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 16 + 2;
const FLAG_GATED: u16 = 1;

impl ModelParams {
    /// Serializes at `f32` precision.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let d = self.dims();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.len() + 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for x in [d.dim, d.hidden, d.attn, d.tasks] {
            out.extend_from_slice(&(x as u32).to_le_bytes());
        }
        let flags = if self.gated() { FLAG_GATED } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        for &v in self.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: String| Error::format("checkpoint", m);
        if bytes.len() < HEADER_LEN + 4 {
            return Err(fmt(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fmt("bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
        if crc32fast::hash(body) != stored {
            return Err(fmt("CRC mismatch".into()));
        }
        let version = u16::from_le_bytes([body[4], body[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let u = |i: usize| u32::from_le_bytes([body[i], body[i + 1], body[i + 2], body[i + 3]]) as usize;
        let dims = ModelDims { dim: u(6), hidden: u(10), attn: u(14), tasks: u(18) };
        let flags = u16::from_le_bytes([body[22], body[23]]);
        if flags & !FLAG_GATED != 0 {
            return Err(fmt(format!("unknown flags {flags:#06x}")));
        }
        let payload = &body[HEADER_LEN..];
        if payload.len() % 4 != 0 {
            return Err(fmt("payload is not a whole number of f32 values".into()));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        ModelParams::from_flat(dims, flags & FLAG_GATED != 0, data)
            .map_err(|e| fmt(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use crate::error::Error;
    use crate::mil_net::{init_params, ModelDims, ModelParams};

    #[test]
    fn header_layout_and_round_trip() {
        let dims = ModelDims { dim: 3, hidden: 2, attn: 2, tasks: 1 };
        let p = init_params(dims, true, 1).unwrap().quantized();
        let bytes = p.to_checkpoint_bytes();
        assert_eq!(&bytes[..4], b"MILM");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[3, 0, 0, 0]);
        assert_eq!(&bytes[18..22], &[1, 0, 0, 0]);
        assert_eq!(&bytes[22..24], &[1, 0]);
        assert_eq!(bytes.len(), 24 + 4 * p.len() + 4);
        let back = ModelParams::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_checkpoint_bytes(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let dims = ModelDims { dim: 3, hidden: 2, attn: 2, tasks: 2 };
        let mut bytes = init_params(dims, false, 1).unwrap().to_checkpoint_bytes();
        bytes[30] ^= 0x40;
        assert!(matches!(ModelParams::from_checkpoint_bytes(&bytes), Err(Error::Format { .. })));
        assert!(ModelParams::from_checkpoint_bytes(b"MILM").is_err());
    }
}
