//! Exact top-k by blocked query × key multiplication.
//!
//! Queries are processed in tiles of [`LANES`] rows transposed into a small
//! column-major buffer; keys stream through in blocks of [`KEY_BLOCK`] rows.
//! Every similarity is accumulated in ascending dimension order with fused
//! multiply-add, so each score is bit-identical to [`dot`].

use super::{Neighbor, TopK};
use crate::error::{Error, Result};

const LANES: usize = 16;
const KEY_BLOCK: usize = 256;
const UNIT_TOLERANCE: f32 = 1e-4;

/// Sequential fused multiply-add dot product, the reference rounding for all scores.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("fma") {
            // SAFETY: the CPU supports FMA, checked just above.
            return unsafe { dot_fma(a, b) };
        }
    }
    dot_portable(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "fma")]
unsafe fn dot_fma(a: &[f32], b: &[f32]) -> f32 {
    dot_portable(a, b)
}

#[inline(always)]
fn dot_portable(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        s = x.mul_add(*y, s);
    }
    s
}

/// Exact top-k for each row of `queries` (b × dim) against `keys` (n × dim).
///
/// Results are sorted by descending similarity with ties broken by ascending
/// slot index.
pub fn exact_topk(queries: &[f32], keys: &[f32], dim: usize, k: usize) -> Result<Vec<Vec<Neighbor>>> {
    if dim == 0 || queries.len() % dim != 0 || keys.len() % dim != 0 {
        return Err(Error::Precondition(format!(
            "matrix shapes do not match key size {dim}"
        )));
    }
    let rows = keys.len() / dim;
    if k > rows {
        return Err(Error::Precondition(format!(
            "k = {k} exceeds memory size {rows}"
        )));
    }
    for (i, q) in queries.chunks_exact(dim).enumerate() {
        let norm = dot(q, q).sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Precondition(format!(
                "query row {i} has norm {norm}, expected unit norm"
            )));
        }
    }
    Ok(exact_topk_unchecked(queries, keys, dim, k))
}

/// [`exact_topk`] without shape or normalization checks.
pub fn exact_topk_unchecked(queries: &[f32], keys: &[f32], dim: usize, k: usize) -> Vec<Vec<Neighbor>> {
    let batch = queries.len() / dim;
    let rows = keys.len() / dim;
    let tiles = batch.div_ceil(LANES);
    // every tile transposed once; key blocks stay cache-resident across all tiles
    let mut qt = vec![0f32; tiles * dim * LANES];
    for (i, q) in queries.chunks_exact(dim).enumerate() {
        let tile = &mut qt[(i / LANES) * dim * LANES..(i / LANES + 1) * dim * LANES];
        for (d, &x) in q.iter().enumerate() {
            tile[d * LANES + i % LANES] = x;
        }
    }
    let mut heaps: Vec<TopK> = (0..batch).map(|_| TopK::new(k)).collect();
    let mut scores = vec![0f32; KEY_BLOCK * LANES];
    for block_start in (0..rows).step_by(KEY_BLOCK) {
        let block_rows = KEY_BLOCK.min(rows - block_start);
        let block = &keys[block_start * dim..(block_start + block_rows) * dim];
        let buf = &mut scores[..block_rows * LANES];
        for (t, tile) in qt.chunks_exact(dim * LANES).enumerate() {
            score_block(tile, dim, block, buf);
            let lanes = LANES.min(batch - t * LANES);
            let heaps = &mut heaps[t * LANES..t * LANES + lanes];
            // idle lanes of a partial tile never accept
            let mut thresholds = [f32::INFINITY; LANES];
            for (th, heap) in thresholds.iter_mut().zip(heaps.iter()) {
                *th = heap.threshold();
            }
            for (r, row) in buf.chunks_exact(LANES).enumerate() {
                // rows arrive in ascending index order, so an equal score loses the tie
                let mut mask = 0u32;
                for l in 0..LANES {
                    mask |= u32::from(row[l] > thresholds[l]) << l;
                }
                while mask != 0 {
                    let l = mask.trailing_zeros() as usize;
                    mask &= mask - 1;
                    heaps[l].push(Neighbor {
                        index: block_start + r,
                        similarity: row[l],
                    });
                    thresholds[l] = heaps[l].threshold();
                }
            }
        }
    }
    heaps.into_iter().map(TopK::into_sorted).collect()
}

fn score_block(qt: &[f32], dim: usize, keys: &[f32], out: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports AVX-512F, checked just above.
            unsafe { score_block_avx512(qt, dim, keys, out) };
            return;
        }
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the CPU supports AVX2 and FMA, checked just above.
            unsafe { score_block_avx2(qt, dim, keys, out) };
            return;
        }
    }
    score_block_portable(qt, dim, keys, out);
}

/// One 16-lane register per key row, eight rows in flight.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn score_block_avx512(qt: &[f32], dim: usize, keys: &[f32], out: &mut [f32]) {
    use std::arch::x86_64::*;
    const ROWS: usize = 8;
    let rows = keys.len() / dim;
    assert!(qt.len() >= dim * LANES && out.len() >= rows * LANES);
    let mut r = 0;
    while r + ROWS <= rows {
        let base = keys.as_ptr().add(r * dim);
        let mut acc = [_mm512_setzero_ps(); ROWS];
        for d in 0..dim {
            let q = _mm512_loadu_ps(qt.as_ptr().add(d * LANES));
            for (j, a) in acc.iter_mut().enumerate() {
                let x = _mm512_set1_ps(*base.add(j * dim + d));
                *a = _mm512_fmadd_ps(q, x, *a);
            }
        }
        for (j, a) in acc.iter().enumerate() {
            _mm512_storeu_ps(out.as_mut_ptr().add((r + j) * LANES), *a);
        }
        r += ROWS;
    }
    score_block_portable(qt, dim, &keys[r * dim..], &mut out[r * LANES..]);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn score_block_avx2(qt: &[f32], dim: usize, keys: &[f32], out: &mut [f32]) {
    score_block_portable(qt, dim, keys, out);
}

/// Writes `out[r * LANES + l] = keys[r] · query[l]` for every key row in the block.
#[inline(always)]
fn score_block_portable(qt: &[f32], dim: usize, keys: &[f32], out: &mut [f32]) {
    let rows = keys.len() / dim;
    let mut r = 0;
    while r + 4 <= rows {
        let k0 = &keys[r * dim..(r + 1) * dim];
        let k1 = &keys[(r + 1) * dim..(r + 2) * dim];
        let k2 = &keys[(r + 2) * dim..(r + 3) * dim];
        let k3 = &keys[(r + 3) * dim..(r + 4) * dim];
        let mut a0 = [0f32; LANES];
        let mut a1 = [0f32; LANES];
        let mut a2 = [0f32; LANES];
        let mut a3 = [0f32; LANES];
        for ((((q, &x0), &x1), &x2), &x3) in qt.chunks_exact(LANES).zip(k0).zip(k1).zip(k2).zip(k3) {
            for l in 0..LANES {
                a0[l] = q[l].mul_add(x0, a0[l]);
                a1[l] = q[l].mul_add(x1, a1[l]);
                a2[l] = q[l].mul_add(x2, a2[l]);
                a3[l] = q[l].mul_add(x3, a3[l]);
            }
        }
        out[r * LANES..(r + 1) * LANES].copy_from_slice(&a0);
        out[(r + 1) * LANES..(r + 2) * LANES].copy_from_slice(&a1);
        out[(r + 2) * LANES..(r + 3) * LANES].copy_from_slice(&a2);
        out[(r + 3) * LANES..(r + 4) * LANES].copy_from_slice(&a3);
        r += 4;
    }
    while r < rows {
        let kr = &keys[r * dim..(r + 1) * dim];
        let mut acc = [0f32; LANES];
        for (q, &x) in qt.chunks_exact(LANES).zip(kr) {
            for l in 0..LANES {
                acc[l] = q[l].mul_add(x, acc[l]);
            }
        }
        out[r * LANES..(r + 1) * LANES].copy_from_slice(&acc);
        r += 1;
    }
}
