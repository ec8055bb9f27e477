//! Binary model files.
//!
//! Layout, all little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `NCAS` |
//! | 2     | format version (`u16`, currently 1) |
//! | 32    | config: `channels`, `hidden`, `scale_factor`, `steps_level1`, `steps_level2` as `u32`, `fire_rate` as `f32`, `input_channels`, `output_channels` as `u32` |
//! | …     | level 1 then level 2, each: `perceive1_w`, `perceive1_b`, `perceive2_w`, `perceive2_b`, `fc0_w`, `fc0_b`, `bn_gamma`, `bn_beta`, `bn_running_mean`, `bn_running_var`, `fc1_w` as `f32` |
//! | 4     | CRC-32 (IEEE) of every preceding byte |
//!
//! The default configuration encodes to exactly [`DEFAULT_SIZE`] bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nca::{MedNcaConfig, MedNcaModel, NcaCellParams};

pub const MAGIC: [u8; 4] = *b"NCAS";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 8 * 4;

/// 38-byte header, 26 432 weights, 2 × 2 × 128 running statistics, CRC.
pub const DEFAULT_SIZE: usize = 107_818;

/// Encoded size for `config`, or `None` if it would not fit in memory.
pub fn encoded_len(config: &MedNcaConfig) -> Option<usize> {
    let per_cell = config.params_per_cell_checked()?.checked_add(config.hidden.checked_mul(2)?)?;
    per_cell.checked_mul(2)?.checked_mul(4)?.checked_add(HEADER_LEN + 4)
}

pub fn encode(model: &MedNcaModel<f32>) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::with_capacity(encoded_len(c).unwrap_or(0));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [c.channels, c.hidden, c.scale_factor, c.steps_level1, c.steps_level2] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.fire_rate.to_le_bytes());
    for v in [c.input_channels, c.output_channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for cell in model.cells() {
        for slice in cell_slices(cell) {
            for v in slice {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn cell_slices(cell: &NcaCellParams<f32>) -> [&[f32]; 11] {
    [
        cell.perceive1_w.data(),
        cell.perceive1_b.data(),
        cell.perceive2_w.data(),
        cell.perceive2_b.data(),
        cell.fc0_w.data(),
        cell.fc0_b.data(),
        cell.bn_gamma.data(),
        cell.bn_beta.data(),
        &cell.bn_stats.mean,
        &cell.bn_stats.var,
        cell.fc1_w.data(),
    ]
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(chunk.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take()?) as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }

    fn fill(&mut self, t: &mut [f32]) -> Result<()> {
        for v in t {
            *v = self.f32()?;
        }
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<MedNcaModel<f32>> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::Checkpoint(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let mut r = Reader { bytes, pos: 0 };
    if r.take::<4>()? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(r.take()?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config = MedNcaConfig {
        channels: r.u32()?,
        hidden: r.u32()?,
        scale_factor: r.u32()?,
        steps_level1: r.u32()?,
        steps_level2: r.u32()?,
        fire_rate: r.f32()?,
        input_channels: r.u32()?,
        output_channels: r.u32()?,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid config: {e}")))?;
    // Check the length before allocating anything sized by the header.
    let expected = encoded_len(&config).ok_or_else(|| Error::Checkpoint("config too large".into()))?;
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} bytes for this config, found {}",
            bytes.len()
        )));
    }
    let body = &bytes[..expected - 4];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut model = MedNcaModel::<f32>::zeros(config)?;
    for cell in [&mut model.level1, &mut model.level2] {
        r.fill(cell.perceive1_w.data_mut())?;
        r.fill(cell.perceive1_b.data_mut())?;
        r.fill(cell.perceive2_w.data_mut())?;
        r.fill(cell.perceive2_b.data_mut())?;
        r.fill(cell.fc0_w.data_mut())?;
        r.fill(cell.fc0_b.data_mut())?;
        r.fill(cell.bn_gamma.data_mut())?;
        r.fill(cell.bn_beta.data_mut())?;
        r.fill(&mut cell.bn_stats.mean)?;
        r.fill(&mut cell.bn_stats.var)?;
        r.fill(cell.fc1_w.data_mut())?;
    }
    debug_assert_eq!(r.pos, expected - 4);
    Ok(model)
}

/// CRC stored in an encoded checkpoint.
pub fn stored_crc(bytes: &[u8]) -> Option<u32> {
    let tail = bytes.get(bytes.len().checked_sub(4)?..)?;
    Some(u32::from_le_bytes(tail.try_into().ok()?))
}

pub fn save(model: &MedNcaModel<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<MedNcaModel<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Element-wise equality of every stored value, BN statistics included.
pub fn same_weights(a: &MedNcaModel<f32>, b: &MedNcaModel<f32>) -> bool {
    let eq = |x: &[f32], y: &[f32]| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits());
    a.config == b.config
        && a.cells()
            .iter()
            .zip(b.cells())
            .all(|(ca, cb)| cell_slices(ca).iter().zip(cell_slices(cb)).all(|(x, y)| eq(x, y)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn default_size_is_pinned() {
        let model = MedNcaModel::<f32>::zeros(MedNcaConfig::default()).unwrap();
        assert_eq!(encode(&model).len(), DEFAULT_SIZE);
        assert_eq!(encoded_len(&model.config), Some(DEFAULT_SIZE));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut model = MedNcaModel::<f32>::initialize(MedNcaConfig::default(), &mut Rng::new(4)).unwrap();
        model.level2.bn_stats.var[3] = 2.5;
        let bytes = encode(&model);
        let back = decode(&bytes).unwrap();
        assert!(same_weights(&model, &back));
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let model = MedNcaModel::<f32>::zeros(MedNcaConfig::default()).unwrap();
        let mut bytes = encode(&model);
        bytes[1000] ^= 1;
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(m)) if m.contains("CRC")));
        let bytes = encode(&model);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }

    #[test]
    fn absurd_header_does_not_allocate() {
        let mut bytes = encode(&MedNcaModel::<f32>::zeros(MedNcaConfig::default()).unwrap());
        bytes[6..10].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode(&bytes).is_err());
    }
}
