//! Random-hyperplane LSH over the memory keys.
//!
//! Each of `tables` tables draws `bits` random unit vectors; the signature of
//! a vector sets bit `i` iff its dot product with hyperplane `i` is strictly
//! positive. A query scans the union of its matching buckets and, when that
//! holds fewer than `k` slots, probes buckets one bit flip away.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::dot;
use crate::error::{Error, Result};

/// Hashing geometry of an [`LshIndex`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LshParams {
    /// Signature length `l`.
    pub bits: usize,
    /// Number of independent tables `m`.
    pub tables: usize,
    pub seed: u64,
}

impl LshParams {
    /// Defaults sized so buckets hold about four slots per table.
    pub fn for_memory(memory_size: usize, seed: u64) -> Self {
        let log2 = usize::BITS - (memory_size.max(1) - 1).leading_zeros();
        Self {
            bits: (log2 as usize).saturating_sub(2).min(64),
            tables: 8,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LshIndex {
    key_size: usize,
    params: LshParams,
    /// tables × bits × key_size, row-major.
    hash_vectors: Vec<f32>,
    /// `signatures[table][slot]`.
    signatures: Vec<Vec<u64>>,
    buckets: Vec<HashMap<u64, Vec<usize>>>,
}

impl LshIndex {
    /// Hashes every row of `keys` into fresh tables drawn from `params.seed`.
    pub fn build(keys: &[f32], key_size: usize, params: LshParams) -> Result<Self> {
        let hash_vectors = draw_hash_vectors(key_size, params)?;
        Self::with_hash_vectors(keys, key_size, params, hash_vectors)
    }

    /// Builds over `keys` with caller-supplied hyperplanes.
    pub fn with_hash_vectors(
        keys: &[f32],
        key_size: usize,
        params: LshParams,
        hash_vectors: Vec<f32>,
    ) -> Result<Self> {
        validate(key_size, params)?;
        if hash_vectors.len() != params.tables * params.bits * key_size {
            return Err(Error::Config(format!(
                "expected {} hash vector entries, got {}",
                params.tables * params.bits * key_size,
                hash_vectors.len()
            )));
        }
        if keys.len() % key_size != 0 {
            return Err(Error::Precondition("key matrix width mismatch".into()));
        }
        let mut index = Self {
            key_size,
            params,
            hash_vectors,
            signatures: Vec::new(),
            buckets: Vec::new(),
        };
        let signatures = (0..params.tables)
            .map(|t| keys.chunks_exact(key_size).map(|row| index.signature(t, row)).collect())
            .collect();
        index.signatures = signatures;
        index.rebuild_buckets();
        Ok(index)
    }

    /// Reassembles an index from stored hyperplanes and per-slot signatures.
    pub fn from_parts(
        key_size: usize,
        params: LshParams,
        hash_vectors: Vec<f32>,
        signatures: Vec<Vec<u64>>,
    ) -> Result<Self> {
        validate(key_size, params)?;
        if hash_vectors.len() != params.tables * params.bits * key_size
            || signatures.len() != params.tables
            || signatures.windows(2).any(|w| w[0].len() != w[1].len())
        {
            return Err(Error::Config("inconsistent LSH parts".into()));
        }
        let mut index = Self {
            key_size,
            params,
            hash_vectors,
            signatures,
            buckets: Vec::new(),
        };
        index.rebuild_buckets();
        Ok(index)
    }

    fn rebuild_buckets(&mut self) {
        self.buckets = self
            .signatures
            .iter()
            .map(|sigs| {
                let mut map: HashMap<u64, Vec<usize>> = HashMap::new();
                for (slot, &s) in sigs.iter().enumerate() {
                    map.entry(s).or_default().push(slot);
                }
                map
            })
            .collect();
    }

    pub fn params(&self) -> LshParams {
        self.params
    }

    pub fn key_size(&self) -> usize {
        self.key_size
    }

    pub fn slots(&self) -> usize {
        self.signatures.first().map_or(0, Vec::len)
    }

    pub fn hash_vectors(&self) -> &[f32] {
        &self.hash_vectors
    }

    /// Stored signature of every slot, one vector per table.
    pub fn signatures(&self) -> &[Vec<u64>] {
        &self.signatures
    }

    fn hyperplane(&self, table: usize, bit: usize) -> &[f32] {
        let start = (table * self.params.bits + bit) * self.key_size;
        &self.hash_vectors[start..start + self.key_size]
    }

    /// Signature of `q` under `table`; bit `i` corresponds to hyperplane `i`.
    pub fn signature(&self, table: usize, q: &[f32]) -> u64 {
        assert!(table < self.params.tables, "table {table} out of range");
        let mut sig = 0u64;
        for bit in 0..self.params.bits {
            if dot(q, self.hyperplane(table, bit)) > 0.0 {
                sig |= 1 << bit;
            }
        }
        sig
    }

    /// Signature rendered as a bit string, hyperplane 1 first.
    pub fn signature_string(&self, table: usize, q: &[f32]) -> String {
        let sig = self.signature(table, q);
        (0..self.params.bits)
            .map(|b| if sig >> b & 1 == 1 { '1' } else { '0' })
            .collect()
    }

    /// Re-hashes `slot` after its key changed.
    pub fn write(&mut self, slot: usize, new_key: &[f32]) {
        for t in 0..self.params.tables {
            let old = self.signatures[t][slot];
            let new = self.signature(t, new_key);
            if old == new {
                continue;
            }
            if let Some(bucket) = self.buckets[t].get_mut(&old) {
                if let Some(pos) = bucket.iter().position(|&s| s == slot) {
                    bucket.swap_remove(pos);
                }
                if bucket.is_empty() {
                    self.buckets[t].remove(&old);
                }
            }
            self.buckets[t].entry(new).or_default().push(slot);
            self.signatures[t][slot] = new;
        }
    }

    /// Candidate slots for `q`, ascending.
    ///
    /// Union of the exact-match buckets across tables; if that holds fewer
    /// than `k` slots, buckets at Hamming distance one are added (table by
    /// table, low bit first) until at least `k` are collected. Should even
    /// that fall short, every slot becomes a candidate.
    pub fn candidates(&self, q: &[f32], k: usize) -> Vec<usize> {
        let slots = self.slots();
        let sigs: Vec<u64> = (0..self.params.tables).map(|t| self.signature(t, q)).collect();
        let mut seen = vec![false; slots];
        let mut out = Vec::new();
        let mut add = |bucket: Option<&Vec<usize>>, out: &mut Vec<usize>| {
            for &s in bucket.into_iter().flatten() {
                if !seen[s] {
                    seen[s] = true;
                    out.push(s);
                }
            }
        };
        for (t, &sig) in sigs.iter().enumerate() {
            add(self.buckets[t].get(&sig), &mut out);
        }
        if out.len() < k {
            'probe: for (t, &sig) in sigs.iter().enumerate() {
                for bit in 0..self.params.bits {
                    add(self.buckets[t].get(&(sig ^ (1 << bit))), &mut out);
                    if out.len() >= k {
                        break 'probe;
                    }
                }
            }
        }
        if out.len() < k {
            return (0..slots).collect();
        }
        out.sort_unstable();
        out
    }

    /// Canonical bucket membership: per table, signature → sorted slots.
    pub fn bucket_membership(&self) -> Vec<BTreeMap<u64, Vec<usize>>> {
        self.buckets
            .iter()
            .map(|map| {
                map.iter()
                    .map(|(&sig, slots)| {
                        let mut slots = slots.clone();
                        slots.sort_unstable();
                        (sig, slots)
                    })
                    .collect()
            })
            .collect()
    }
}

impl PartialEq for LshIndex {
    /// Equal hyperplanes and equal bucket sets; bucket-list order is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.key_size == other.key_size
            && self.params == other.params
            && self.hash_vectors.len() == other.hash_vectors.len()
            && self
                .hash_vectors
                .iter()
                .zip(&other.hash_vectors)
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self.signatures == other.signatures
            && self.bucket_membership() == other.bucket_membership()
    }
}

fn validate(key_size: usize, params: LshParams) -> Result<()> {
    if key_size == 0 {
        return Err(Error::Config("key size must be positive".into()));
    }
    if params.tables == 0 {
        return Err(Error::Config("LSH needs at least one table".into()));
    }
    if params.bits > 64 {
        return Err(Error::Config(format!(
            "signature length {} exceeds 64 bits",
            params.bits
        )));
    }
    Ok(())
}

/// Table `t` draws from its own stream of the seed, so the first `m` tables
/// are the same whatever the total table count.
fn draw_hash_vectors(key_size: usize, params: LshParams) -> Result<Vec<f32>> {
    validate(key_size, params)?;
    let mut out = Vec::with_capacity(params.tables * params.bits * key_size);
    for t in 0..params.tables {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(t as u64);
        for _ in 0..params.bits {
            let v: Vec<f64> = (0..key_size).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            out.extend(v.iter().map(|x| (x / norm) as f32));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_plane_index() -> LshIndex {
        let params = LshParams {
            bits: 2,
            tables: 1,
            seed: 0,
        };
        LshIndex::with_hash_vectors(&[1.0, 0.0, 0.0, 1.0], 2, params, vec![0.6, 0.8, -0.8, 0.6]).unwrap()
    }

    #[test]
    fn signature_is_sign_of_projection() {
        let index = two_plane_index();
        assert_eq!(index.signature_string(0, &[1.0, 0.0]), "10");
        assert_eq!(index.signature(0, &[1.0, 0.0]), 0b01);
    }

    #[test]
    fn negated_query_flips_every_bit() {
        let index = two_plane_index();
        let a = index.signature(0, &[0.3, -0.7]);
        let b = index.signature(0, &[-0.3, 0.7]);
        assert_eq!(a ^ b, 0b11);
    }

    #[test]
    fn zero_projection_hashes_to_zero_bit() {
        let index = two_plane_index();
        // orthogonal to h_1
        assert_eq!(index.signature_string(0, &[0.8, -0.6]), "00");
    }

    #[test]
    fn zero_bits_means_one_bucket_with_everything() {
        let keys: Vec<f32> = vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0];
        let params = LshParams {
            bits: 0,
            tables: 2,
            seed: 3,
        };
        let index = LshIndex::build(&keys, 2, params).unwrap();
        assert_eq!(index.candidates(&[0.0, 1.0], 1), vec![0, 1, 2]);
    }

    #[test]
    fn same_seed_same_hyperplanes() {
        let p = LshParams {
            bits: 5,
            tables: 3,
            seed: 99,
        };
        assert_eq!(draw_hash_vectors(8, p).unwrap(), draw_hash_vectors(8, p).unwrap());
        let fewer = LshParams { tables: 2, ..p };
        let a = draw_hash_vectors(8, p).unwrap();
        let b = draw_hash_vectors(8, fewer).unwrap();
        assert_eq!(&a[..b.len()], &b[..]);
    }

    #[test]
    fn default_bits_follow_memory_size() {
        assert_eq!(LshParams::for_memory(65_536, 0).bits, 14);
        assert_eq!(LshParams::for_memory(1_000, 0).bits, 8);
        assert_eq!(LshParams::for_memory(2, 0).bits, 0);
    }

    #[test]
    fn rewriting_same_key_is_a_no_op() {
        let keys: Vec<f32> = vec![1.0, 0.0, 0.6, 0.8, 0.0, -1.0];
        let params = LshParams {
            bits: 4,
            tables: 2,
            seed: 5,
        };
        let mut index = LshIndex::build(&keys, 2, params).unwrap();
        let before = index.clone();
        index.write(1, &[0.6, 0.8]);
        assert_eq!(index, before);
    }

    #[test]
    fn hash_vectors_are_unit() {
        let hv = draw_hash_vectors(16, LshParams { bits: 6, tables: 2, seed: 1 }).unwrap();
        for row in hv.chunks_exact(16) {
            assert!((dot(row, row) - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        assert!(LshIndex::build(&[1.0], 1, LshParams { bits: 65, tables: 1, seed: 0 }).is_err());
        assert!(LshIndex::build(&[1.0], 1, LshParams { bits: 4, tables: 0, seed: 0 }).is_err());
    }
}
