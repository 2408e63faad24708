//! Versioned little-endian snapshots (`.ltrm`).
//!
//! Every snapshot starts with a 40-byte header: the magic `LTRM`, a `u16`
//! format version, a `u8` payload kind, one reserved byte, six `u32`
//! dimensions and a `u64` seed. The header is validated and the payload
//! length checked against the dimensions before anything is decoded, so a
//! damaged file never yields a partial entity.
//!
//! | kind | entity | dims |
//! |------|--------|------|
//! | 1 | [`MemoryStore`] | memory_size, key_size, k, jitter_bound |
//! | 2 | [`LshIndex`] | key_size, bits, tables, slots |
//! | 3 | [`EncoderCheckpoint`] | embed_dim, hidden, window, pos_features, key_size, Adam tensor count |
//! | 4 | [`SyntheticTaskSpec`] | max_len, digit_count, train_count, test_count, mapping length |

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::learner::{AdamState, EncoderConfig, EncoderParams};
use crate::memory::{MemoryConfig, MemoryStore};
use crate::nn::{LshIndex, LshParams};
use crate::task::SyntheticTaskSpec;

pub const MAGIC: [u8; 4] = *b"LTRM";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 40;
pub const FILE_EXTENSION: &str = "ltrm";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum PayloadKind {
    Memory = 1,
    Lsh = 2,
    Encoder = 3,
    TaskSpec = 4,
}

impl PayloadKind {
    pub fn from_u8(b: u8) -> Option<Self> {
        match b {
            1 => Some(Self::Memory),
            2 => Some(Self::Lsh),
            3 => Some(Self::Encoder),
            4 => Some(Self::TaskSpec),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SnapshotHeader {
    pub version: u16,
    pub kind: PayloadKind,
    pub dims: [u32; 6],
    pub seed: u64,
}

impl SnapshotHeader {
    fn new(kind: PayloadKind, dims: [u32; 6], seed: u64) -> Self {
        Self {
            version: VERSION,
            kind,
            dims,
            seed,
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.kind as u8);
        out.push(0);
        for d in self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
    }

    /// Parses and validates the header at the start of `bytes`.
    pub fn read(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let kind_byte = r.take(1)?[0];
        let kind = PayloadKind::from_u8(kind_byte)
            .ok_or_else(|| Error::Corrupt(format!("unknown payload kind {kind_byte}")))?;
        r.take(1)?;
        let mut dims = [0u32; 6];
        for d in dims.iter_mut() {
            *d = r.u32()?;
        }
        let seed = r.u64()?;
        Ok(Self {
            version,
            kind,
            dims,
            seed,
        })
    }
}

/// An entity with a snapshot encoding.
pub trait Snapshot: Sized {
    const KIND: PayloadKind;

    fn header(&self) -> Result<SnapshotHeader>;

    fn write_payload(&self, out: &mut Vec<u8>);

    /// Exact payload length implied by `header`, or `None` on overflow.
    fn payload_len(header: &SnapshotHeader) -> Option<usize>;

    fn read_payload(header: &SnapshotHeader, r: &mut Reader<'_>) -> Result<Self>;
}

pub fn to_bytes<T: Snapshot>(entity: &T) -> Result<Vec<u8>> {
    let header = entity.header()?;
    let mut out = Vec::with_capacity(HEADER_LEN + T::payload_len(&header).unwrap_or(0));
    header.write(&mut out);
    entity.write_payload(&mut out);
    debug_assert_eq!(Some(out.len() - HEADER_LEN), T::payload_len(&header));
    Ok(out)
}

pub fn from_bytes<T: Snapshot>(bytes: &[u8]) -> Result<T> {
    let header = SnapshotHeader::read(bytes)?;
    if header.kind != T::KIND {
        return Err(Error::WrongKind {
            expected: T::KIND as u8,
            found: header.kind as u8,
        });
    }
    let len = T::payload_len(&header).ok_or_else(|| Error::Corrupt("dimensions overflow".into()))?;
    let available = bytes.len() - HEADER_LEN;
    if available < len {
        return Err(Error::Truncated {
            needed: HEADER_LEN + len,
            available: bytes.len(),
        });
    }
    if available > len {
        return Err(Error::Corrupt(format!("{} trailing bytes", available - len)));
    }
    let mut r = Reader::new(&bytes[HEADER_LEN..]);
    T::read_payload(&header, &mut r)
}

pub fn save<T: Snapshot>(entity: &T, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(entity)?)?;
    Ok(())
}

pub fn load<T: Snapshot>(path: impl AsRef<Path>) -> Result<T> {
    from_bytes(&std::fs::read(path)?)
}

/// Bounds-checked little-endian cursor.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated {
                needed: self.pos.saturating_add(n),
                available: self.bytes.len(),
            });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn u64s(&mut self, n: usize) -> Result<Vec<u64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn dim(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::Config(format!("{what} = {x} does not fit in 32 bits")))
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_u32s(out: &mut Vec<u8>, xs: &[u32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Seed, stream and word position: 56 bytes.
const RNG_LEN: usize = 32 + 8 + 16;

fn put_rng(out: &mut Vec<u8>, rng: &ChaCha8Rng) {
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
}

fn read_rng(r: &mut Reader<'_>) -> Result<ChaCha8Rng> {
    let mut rng = ChaCha8Rng::from_seed(r.array()?);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(r.u128()?);
    Ok(rng)
}

fn corrupt(e: Error) -> Error {
    match e {
        Error::Config(m) | Error::Precondition(m) => Error::Corrupt(m),
        other => other,
    }
}

impl Snapshot for MemoryStore {
    const KIND: PayloadKind = PayloadKind::Memory;

    fn header(&self) -> Result<SnapshotHeader> {
        let c = self.config();
        if self.ages().iter().any(|&a| a > u32::MAX as u64) {
            return Err(Error::Config("slot age exceeds 32 bits".into()));
        }
        Ok(SnapshotHeader::new(
            Self::KIND,
            [
                dim(c.memory_size, "memory_size")?,
                dim(c.key_size, "key_size")?,
                dim(c.k, "k")?,
                dim(c.jitter_bound, "jitter_bound")?,
                0,
                0,
            ],
            c.seed,
        ))
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        let c = self.config();
        out.extend_from_slice(&c.alpha.to_le_bytes());
        out.extend_from_slice(&c.inverse_temperature.to_le_bytes());
        put_f32s(out, self.keys());
        put_u32s(out, self.values());
        let ages: Vec<u32> = self.ages().iter().map(|&a| a as u32).collect();
        put_u32s(out, &ages);
        put_rng(out, self.rng());
    }

    fn payload_len(h: &SnapshotHeader) -> Option<usize> {
        let m = h.dims[0] as usize;
        let d = h.dims[1] as usize;
        m.checked_mul(d)?
            .checked_add(m.checked_mul(2)?)?
            .checked_mul(4)?
            .checked_add(16 + RNG_LEN)
    }

    fn read_payload(h: &SnapshotHeader, r: &mut Reader<'_>) -> Result<Self> {
        let [m, d, k, jitter, ..] = h.dims.map(|x| x as usize);
        let config = MemoryConfig {
            memory_size: m,
            key_size: d,
            k,
            alpha: r.f64()?,
            inverse_temperature: r.f64()?,
            jitter_bound: jitter,
            seed: h.seed,
        };
        let keys = r.f32s(m * d)?;
        let values = r.u32s(m)?;
        let ages = r.u32s(m)?;
        let rng = read_rng(r)?;
        MemoryStore::from_parts(config, keys, values, &ages, rng).map_err(corrupt)
    }
}

impl Snapshot for LshIndex {
    const KIND: PayloadKind = PayloadKind::Lsh;

    fn header(&self) -> Result<SnapshotHeader> {
        let p = self.params();
        Ok(SnapshotHeader::new(
            Self::KIND,
            [
                dim(self.key_size(), "key_size")?,
                dim(p.bits, "bits")?,
                dim(p.tables, "tables")?,
                dim(self.slots(), "slots")?,
                0,
                0,
            ],
            p.seed,
        ))
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        put_f32s(out, self.hash_vectors());
        for table in self.signatures() {
            for s in table {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
    }

    fn payload_len(h: &SnapshotHeader) -> Option<usize> {
        let [d, bits, tables, slots, ..] = h.dims.map(|x| x as usize);
        let hashes = tables.checked_mul(bits)?.checked_mul(d)?.checked_mul(4)?;
        hashes.checked_add(tables.checked_mul(slots)?.checked_mul(8)?)
    }

    fn read_payload(h: &SnapshotHeader, r: &mut Reader<'_>) -> Result<Self> {
        let [d, bits, tables, slots, ..] = h.dims.map(|x| x as usize);
        let params = LshParams {
            bits,
            tables,
            seed: h.seed,
        };
        let hash_vectors = r.f32s(tables * bits * d)?;
        let signatures = (0..tables).map(|_| r.u64s(slots)).collect::<Result<Vec<_>>>()?;
        LshIndex::from_parts(d, params, hash_vectors, signatures).map_err(corrupt)
    }
}

/// Encoder weights together with the optimizer state that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCheckpoint {
    /// Seed of the training run.
    pub seed: u64,
    pub params: EncoderParams,
    pub adam: AdamState,
}

impl Snapshot for EncoderCheckpoint {
    const KIND: PayloadKind = PayloadKind::Encoder;

    fn header(&self) -> Result<SnapshotHeader> {
        self.params.validate()?;
        let shapes: Vec<usize> = self.params.tensors().iter().map(|t| t.len()).collect();
        let adam_shapes = |t: &[Vec<f64>]| t.iter().map(Vec::len).collect::<Vec<_>>();
        if adam_shapes(&self.adam.m) != shapes || adam_shapes(&self.adam.v) != shapes {
            return Err(Error::Config("Adam moments do not mirror the parameters".into()));
        }
        let c = self.params.config;
        Ok(SnapshotHeader::new(
            Self::KIND,
            [
                dim(c.embed_dim, "embed_dim")?,
                dim(c.hidden, "hidden")?,
                dim(c.window, "window")?,
                dim(c.pos_features, "pos_features")?,
                dim(c.key_size, "key_size")?,
                dim(shapes.len(), "tensor count")?,
            ],
            self.seed,
        ))
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        for t in self.params.tensors() {
            put_f64s(out, t);
        }
        let a = &self.adam;
        for x in [a.learning_rate, a.beta1, a.beta2, a.eps] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&a.step.to_le_bytes());
        for t in a.m.iter().chain(&a.v) {
            put_f64s(out, t);
        }
    }

    fn payload_len(h: &SnapshotHeader) -> Option<usize> {
        let n = encoder_param_count(h)?;
        n.checked_mul(3)?.checked_mul(8)?.checked_add(5 * 8)
    }

    fn read_payload(h: &SnapshotHeader, r: &mut Reader<'_>) -> Result<Self> {
        let config = encoder_config(h);
        config.validate().map_err(corrupt)?;
        if h.dims[5] != 5 {
            return Err(Error::Corrupt(format!("expected 5 tensors, header says {}", h.dims[5])));
        }
        let mut params = EncoderParams::zeros(config);
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        for t in params.tensors_mut() {
            let n = t.len();
            *t = r.f64s(n)?;
        }
        let (learning_rate, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let step = r.u64()?;
        let m = shapes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
        let v = shapes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed: h.seed,
            params,
            adam: AdamState {
                learning_rate,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            },
        })
    }
}

fn encoder_config(h: &SnapshotHeader) -> EncoderConfig {
    let [embed_dim, hidden, window, pos_features, key_size, _] = h.dims.map(|x| x as usize);
    EncoderConfig {
        embed_dim,
        hidden,
        window,
        pos_features,
        key_size,
    }
}

fn encoder_param_count(h: &SnapshotHeader) -> Option<usize> {
    let c = encoder_config(h);
    let input = c.window.checked_mul(c.embed_dim)?.checked_add(c.pos_features)?;
    let embed = crate::task::Token::COUNT.checked_mul(c.embed_dim)?;
    let layer1 = c.hidden.checked_mul(input)?.checked_add(c.hidden)?;
    let layer2 = c.key_size.checked_mul(c.hidden)?.checked_add(c.key_size)?;
    embed.checked_add(layer1)?.checked_add(layer2)
}

impl Snapshot for SyntheticTaskSpec {
    const KIND: PayloadKind = PayloadKind::TaskSpec;

    fn header(&self) -> Result<SnapshotHeader> {
        Ok(SnapshotHeader::new(
            Self::KIND,
            [
                dim(self.max_len, "max_len")?,
                dim(self.digit_count, "digit_count")?,
                dim(self.train_count, "train_count")?,
                dim(self.test_count, "test_count")?,
                dim(self.mapping().len(), "mapping length")?,
                0,
            ],
            self.seed,
        ))
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        put_u32s(out, self.mapping());
    }

    fn payload_len(h: &SnapshotHeader) -> Option<usize> {
        (h.dims[4] as usize).checked_mul(4)
    }

    fn read_payload(h: &SnapshotHeader, r: &mut Reader<'_>) -> Result<Self> {
        let [max_len, digit_count, train_count, test_count, len, _] = h.dims.map(|x| x as usize);
        let mapping = r.u32s(len)?;
        SyntheticTaskSpec::from_parts(h.seed, max_len, digit_count, train_count, test_count, mapping)
            .map_err(corrupt)
    }
}
