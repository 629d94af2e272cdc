//! The `BNN1` model file format.
//!
//! All integers and floats are little-endian.
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `BNN1` |
//! | 4 | 2 | format version (`u16`, currently 1) |
//! | 6 | 1 | storage: 0 packed (binary layers as bits), 1 float32 |
//! | 7 | 1 | reserved, 0 |
//! | 8 | 4 | descriptor length `D` (`u32`) |
//! | 12 | D | descriptor: compact JSON of the model graph |
//! | | 4 | normalization channel count `C` (`u32`) |
//! | | 8·C | per-channel mean then std (`f32`) |
//! | | … | payloads, node by node in graph order |
//! | | 4 | CRC-32 of every byte from offset 12 up to here |
//!
//! Node payloads, in order:
//! * binary conv/dense: scaling factor (`f32`), then the weight tensor;
//! * any parameter tensor: packed bits if binarizable and the storage is
//!   packed, otherwise `f32` values;
//! * batch norm: gamma, beta, running mean, running variance (`f32`).
//!
//! A packed tensor stores each output row (one filter or neuron) in
//! `ceil(row_len / 8)` bytes. Bit `i` of a row lives in byte `i / 8` at bit
//! position `i % 8` (LSB first); 1 encodes `+1`, 0 encodes `−1`, and unused
//! bits of the final byte are 1.
//!
//! In float storage a binary layer's scaling factor is NaN unless it was
//! frozen; in packed storage it is always the factor the forward pass used,
//! because the latent magnitudes are not kept.

use std::fs;
use std::path::Path;

use crate::arch::{LayerKind, ModelGraph, Precision};
use crate::bittensor::BitTensor;
use crate::data::NormStats;
use crate::error::{BnnError, Result};
use crate::model::{BnRunning, Model};
use crate::tensor::FloatTensor;

pub const MAGIC: &[u8; 4] = b"BNN1";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 12;
const CRC_LEN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Storage {
    /// Binary layers stored as sign bits; everything else float32.
    Packed,
    /// Every tensor stored as float32.
    Float32,
}

impl Storage {
    fn code(self) -> u8 {
        match self {
            Storage::Packed => 0,
            Storage::Float32 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Storage::Packed),
            1 => Ok(Storage::Float32),
            other => Err(BnnError::format(
                6,
                format!("unknown storage class {other}"),
            )),
        }
    }

    pub fn is_packed(self) -> bool {
        self == Storage::Packed
    }
}

fn descriptor(g: &ModelGraph) -> Vec<u8> {
    serde_json::to_vec(g).expect("graph serialization cannot fail")
}

fn payload_len(g: &ModelGraph, storage: Storage) -> u64 {
    let mut total = 0u64;
    for node in &g.nodes {
        if node.kind.precision().is_some_and(Precision::is_binary) {
            total += 4;
        }
        for spec in node.params() {
            total += if storage.is_packed() && spec.binarizable {
                (spec.rows() * spec.row_len().div_ceil(8)) as u64
            } else {
                4 * spec.len() as u64
            };
        }
        total += 8 * node.running_stat_channels() as u64;
    }
    total
}

/// Exact size in bytes of the file [`save`] (packed) or [`export_fp`]
/// (float32) writes for `g`.
pub fn predicted_size(g: &ModelGraph, binary_storage: bool) -> u64 {
    let storage = if binary_storage {
        Storage::Packed
    } else {
        Storage::Float32
    };
    (HEADER_LEN + descriptor(g).len() + 4 + 8 * g.input_shape[0] + CRC_LEN) as u64
        + payload_len(g, storage)
}

/// Bytes of the file that are not parameter values: header, descriptor,
/// normalization, running statistics, scaling factors and checksum.
pub fn format_overhead_bytes(g: &ModelGraph) -> u64 {
    predicted_size(g, false) - 4 * g.count_params() as u64
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes `model` with the given storage.
pub fn encode(model: &Model, storage: Storage) -> Result<Vec<u8>> {
    model.validate()?;
    let g = &model.graph;
    if model.norm.channels() != g.input_shape[0] {
        return Err(BnnError::shape(
            "normalization channels do not match the model input",
        ));
    }
    let desc = descriptor(g);
    let mut out = Vec::with_capacity(predicted_size(g, storage.is_packed()) as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(storage.code());
    out.push(0);
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(&desc);
    out.extend_from_slice(&(model.norm.channels() as u32).to_le_bytes());
    put_f32s(&mut out, &model.norm.mean);
    put_f32s(&mut out, &model.norm.std);
    let alphas = model.layer_alphas()?;
    for (i, node) in g.nodes.iter().enumerate() {
        if node.kind.precision().is_some_and(Precision::is_binary) {
            let a = match (storage, model.alphas[i]) {
                (Storage::Packed, _) => alphas[i].expect("binary layer has a scaling factor"),
                (Storage::Float32, Some(a)) => a,
                (Storage::Float32, None) => f32::NAN,
            };
            out.extend_from_slice(&a.to_le_bytes());
        }
        for (spec, t) in node.params().iter().zip(&model.params[i]) {
            if storage.is_packed() && spec.binarizable {
                let bits = BitTensor::pack_rows(t.values(), spec.rows(), spec.row_len())?;
                out.extend_from_slice(&bits.to_row_bytes());
            } else {
                put_f32s(&mut out, t.values());
            }
        }
        if let Some(r) = &model.running[i] {
            put_f32s(&mut out, &r.mean);
            put_f32s(&mut out, &r.var);
        }
    }
    let crc = crc32fast::hash(&out[HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    debug_assert_eq!(out.len() as u64, predicted_size(g, storage.is_packed()));
    Ok(out)
}

/// Writes the deployment file: binary layers as packed sign bits.
pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(model, Storage::Packed)?)?;
    Ok(())
}

/// Writes every tensor as float32.
pub fn export_fp(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(model, Storage::Float32)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len().saturating_sub(self.pos);
        if available < n {
            return Err(BnnError::Truncated {
                offset: self.pos as u64,
                needed: n as u64,
                available: available as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

fn checksum_of(bytes: &[u8]) -> (u32, u32) {
    let body = &bytes[HEADER_LEN..bytes.len() - CRC_LEN];
    let tail = &bytes[bytes.len() - CRC_LEN..];
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    (stored, crc32fast::hash(body))
}

fn verify_checksum(bytes: &[u8]) -> Result<()> {
    let (stored, computed) = checksum_of(bytes);
    if stored != computed {
        return Err(BnnError::Checksum { stored, computed });
    }
    Ok(())
}

/// Parses a model file. Returns the model and the storage it was written
/// with.
pub fn decode(bytes: &[u8]) -> Result<(Model, Storage)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(BnnError::BadMagic {
            expected: MAGIC.to_vec(),
            found: magic.to_vec(),
        });
    }
    let version = {
        let b = r.take(2)?;
        u16::from_le_bytes([b[0], b[1]])
    };
    if version != FORMAT_VERSION {
        return Err(BnnError::VersionMismatch {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let storage = Storage::from_code(r.take(1)?[0])?;
    r.take(1)?;
    let dlen = r.u32()? as usize;
    let desc = r.take(dlen)?;
    let graph = match serde_json::from_slice::<ModelGraph>(desc)
        .map_err(|e| BnnError::format(HEADER_LEN as u64, format!("bad descriptor: {e}")))
        .and_then(|g| g.validate().map(|_| g))
    {
        Ok(g) => g,
        // A damaged descriptor is reported as a checksum failure when the
        // checksum disagrees, since that is the more precise diagnosis.
        Err(e) => {
            if bytes.len() >= HEADER_LEN + CRC_LEN {
                verify_checksum(bytes)?;
            }
            return Err(e);
        }
    };
    let expected = predicted_size(&graph, storage.is_packed()) as usize;
    if bytes.len() < expected {
        return Err(BnnError::Truncated {
            offset: bytes.len() as u64,
            needed: (expected - bytes.len()) as u64,
            available: 0,
        });
    }
    if bytes.len() > expected {
        return Err(BnnError::format(
            expected as u64,
            "trailing bytes after checksum",
        ));
    }
    verify_checksum(bytes)?;

    let c = r.u32()? as usize;
    if c != graph.input_shape[0] {
        return Err(BnnError::format(
            r.pos as u64 - 4,
            "normalization channels do not match the input",
        ));
    }
    let norm = NormStats {
        mean: r.f32s(c)?,
        std: r.f32s(c)?,
    };
    let n = graph.nodes.len();
    let mut params = Vec::with_capacity(n);
    let mut running = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(n);
    for node in &graph.nodes {
        let binary = node.kind.precision().is_some_and(Precision::is_binary);
        let alpha = if binary {
            let a = r.f32s(1)?[0];
            (!a.is_nan()).then_some(a)
        } else {
            None
        };
        alphas.push(alpha);
        let mut tensors = Vec::new();
        for spec in node.params() {
            let t = if storage.is_packed() && spec.binarizable {
                let row_bytes = spec.row_len().div_ceil(8);
                let raw = r.take(spec.rows() * row_bytes)?;
                let bits = BitTensor::from_row_bytes(vec![spec.rows(), spec.row_len()], raw)?;
                let signs = crate::bittensor::unpack(&bits)?;
                signs.reshape(spec.shape.clone())?
            } else {
                FloatTensor::new(spec.shape.clone(), r.f32s(spec.len())?)?
            };
            tensors.push(t);
        }
        params.push(tensors);
        running.push(match node.kind {
            LayerKind::BatchNorm { channels } => Some(BnRunning {
                mean: r.f32s(channels)?,
                var: r.f32s(channels)?,
            }),
            _ => None,
        });
    }
    let model = Model {
        graph,
        params,
        running,
        alphas,
        norm,
    };
    model.validate()?;
    Ok((model, storage))
}

/// Reads a model file of either storage.
pub fn load(path: impl AsRef<Path>) -> Result<(Model, Storage)> {
    decode(&fs::read(path)?)
}

/// Reads a model file and requires the given storage.
pub fn load_as(path: impl AsRef<Path>, expected: Storage) -> Result<Model> {
    let (model, storage) = load(path)?;
    if storage != expected {
        return Err(BnnError::StorageMismatch(format!(
            "file holds {storage:?} storage, {expected:?} was required"
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{GraphBuilder, LayerKind};

    /// input 1×1×1 → flatten → dense(1→16, fp) → bn → qdense(16→2) → bn →
    /// dense(2→2, fp)
    fn tiny() -> Model {
        let mut b = GraphBuilder::new("tiny", vec![1, 1, 1], 2).unwrap();
        let x = b.simple("flat", LayerKind::Flatten, 0).unwrap();
        let x = b.dense("fc0", x, 16, true, Precision::Full).unwrap();
        let x = b.batchnorm("bn0", x).unwrap();
        let x = b.dense("q", x, 2, false, Precision::BINARY).unwrap();
        let x = b.batchnorm("bn1", x).unwrap();
        b.dense("fc1", x, 2, true, Precision::Full).unwrap();
        let g = b.finish().unwrap();
        let mut m = Model::init(g, NormStats::identity(1), 0).unwrap();
        // Row 0 alternates +,-; row 1 is all negative except bit 15.
        let q = 4;
        m.params[q][0] = FloatTensor::from_fn(vec![2, 16], |i| match (i / 16, i % 16) {
            (0, c) if c % 2 == 0 => 0.25,
            (0, _) => -0.25,
            (1, 15) => 0.75,
            _ => -0.75,
        });
        m
    }

    #[test]
    fn golden_packed_bytes() {
        let m = tiny();
        let bytes = encode(&m, Storage::Packed).unwrap();
        assert_eq!(&bytes[..4], b"BNN1");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        let dlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        // norm (4 + 8), fc0 (64 + 64), bn0 (4 × 64), then alpha and the bits
        let q_at = 12 + dlen + 12 + 128 + 256;
        let alpha = f32::from_le_bytes(bytes[q_at..q_at + 4].try_into().unwrap());
        assert_eq!(alpha, 0.5);
        assert_eq!(&bytes[q_at + 4..q_at + 8], &[0x55, 0x55, 0x00, 0x80]);
        assert_eq!(bytes.len() as u64, predicted_size(&m.graph, true));
    }

    #[test]
    fn padding_bits_are_one() {
        let bits = BitTensor::pack_rows(&[-1.0f32; 10], 1, 10).unwrap();
        assert_eq!(bits.to_row_bytes(), vec![0x00, 0xFC]);
    }

    #[test]
    fn distinct_errors() {
        let m = tiny();
        let good = encode(&m, Storage::Packed).unwrap();
        decode(&good).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(BnnError::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(
            decode(&bad),
            Err(BnnError::VersionMismatch { found: 2, .. })
        ));

        let mut bad = good.clone();
        let at = bad.len() - 10;
        bad[at] ^= 0x01;
        assert!(matches!(decode(&bad), Err(BnnError::Checksum { .. })));

        assert!(matches!(
            decode(&good[..good.len() - 3]),
            Err(BnnError::Truncated { .. })
        ));
        assert!(matches!(
            decode(&good[..7]),
            Err(BnnError::Truncated { .. })
        ));
    }

    #[test]
    fn float_storage_round_trips_latent_weights() {
        let m = tiny();
        let (back, storage) = decode(&encode(&m, Storage::Float32).unwrap()).unwrap();
        assert_eq!(storage, Storage::Float32);
        assert_eq!(back, m);
    }
}
