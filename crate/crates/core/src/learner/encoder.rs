//! Window encoder producing one memory query per sequence position.
//!
//! The query at position `p` looks at the `window` tokens centered on `p`
//! (padded with `A` past either end) plus sinusoidal features of `p`:
//!
//! ```text
//! input = [embed(t_{p-w/2}), …, embed(t_{p+w/2}), pos(p)]
//! h     = tanh(W1 · input + b1)
//! x     = W2 · h + b2
//! q     = x / ‖x‖
//! ```
//!
//! Because every window slot only ever sees one of six embeddings, the
//! product `W1 · input` is assembled from a per-(slot, token) table built
//! once per parameter set ([`PreparedEncoder`]). Gradients are accumulated
//! in the same factored form and expanded once in [`GradAccumulator::finish`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::memory::query_grad_through_normalization;
use crate::task::{SyntheticExample, Token};

const VOCAB: usize = Token::COUNT;

/// Layer sizes of the window encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    /// Odd window width centered on the queried position.
    pub window: usize,
    /// Number of sinusoidal position features (even).
    pub pos_features: usize,
    pub key_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden: 256,
            window: 17,
            pos_features: 8,
            key_size: 64,
        }
    }
}

impl EncoderConfig {
    pub fn input_dim(&self) -> usize {
        self.window * self.embed_dim + self.pos_features
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden == 0 || self.key_size == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.window % 2 == 0 {
            return Err(Error::Config(format!("window {} must be odd", self.window)));
        }
        if self.pos_features % 2 == 1 {
            return Err(Error::Config(format!(
                "position feature count {} must be even",
                self.pos_features
            )));
        }
        Ok(())
    }
}

/// Trainable weights; the same layout doubles as a gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// `6 × embed_dim`, rows in [`Token::id`] order.
    pub embed: Vec<f64>,
    /// `hidden × input_dim`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `key_size × hidden`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl EncoderParams {
    /// Gaussian initialization scaled by fan-in; biases start at zero.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaussian = |n: usize, std: f64| -> Vec<f64> {
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        let embed = gaussian(VOCAB * config.embed_dim, 1.0);
        let w1 = gaussian(config.hidden * config.input_dim(), (1.0 / config.input_dim() as f64).sqrt());
        let w2 = gaussian(config.key_size * config.hidden, (1.0 / config.hidden as f64).sqrt());
        Ok(Self {
            config,
            embed,
            w1,
            b1: vec![0.0; config.hidden],
            w2,
            b2: vec![0.0; config.key_size],
        })
    }

    pub fn zeros(config: EncoderConfig) -> Self {
        Self {
            config,
            embed: vec![0.0; VOCAB * config.embed_dim],
            w1: vec![0.0; config.hidden * config.input_dim()],
            b1: vec![0.0; config.hidden],
            w2: vec![0.0; config.key_size * config.hidden],
            b2: vec![0.0; config.key_size],
        }
    }

    /// Tensors in fixed order: embed, w1, b1, w2, b2.
    pub fn tensors(&self) -> [&[f64]; 5] {
        [&self.embed, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [&mut self.embed, &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Checks tensor lengths against the config, e.g. after loading.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = EncoderParams::zeros(self.config);
        for (a, b) in self.tensors().iter().zip(expected.tensors()) {
            if a.len() != b.len() {
                return Err(Error::Config("encoder tensor shape mismatch".into()));
            }
        }
        Ok(())
    }
}

/// Sinusoidal features of an absolute position.
pub fn position_features(position: usize, count: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count / 2 {
        let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / count as f64);
        let angle = position as f64 * freq;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

/// Window token ids centered at `position`, padded with `A`.
pub fn window_tokens(tokens: &[Token], position: usize, window: usize) -> Vec<u8> {
    let half = (window / 2) as isize;
    (-half..=half)
        .map(|o| {
            let p = position as isize + o;
            if p < 0 || p as usize >= tokens.len() {
                Token::A.id() as u8
            } else {
                tokens[p as usize].id() as u8
            }
        })
        .collect()
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCache {
    pub tokens: Vec<u8>,
    pub pos: Vec<f64>,
    /// tanh activations.
    pub hidden: Vec<f64>,
    /// Pre-normalization output.
    pub x: Vec<f64>,
    pub q: Vec<f64>,
}

/// Parameters plus the per-(slot, token) first-layer table.
pub struct PreparedEncoder<'a> {
    params: &'a EncoderParams,
    /// `table[(slot * 6 + token) * hidden + j] = Σ_c W1[j, slot·e + c] · embed[token, c]`.
    table: Vec<f64>,
}

impl<'a> PreparedEncoder<'a> {
    pub fn new(params: &'a EncoderParams) -> Self {
        let c = params.config;
        let (e, h, in_dim) = (c.embed_dim, c.hidden, c.input_dim());
        let mut table = vec![0.0; c.window * VOCAB * h];
        for slot in 0..c.window {
            for tok in 0..VOCAB {
                let emb = &params.embed[tok * e..(tok + 1) * e];
                let out = &mut table[(slot * VOCAB + tok) * h..(slot * VOCAB + tok + 1) * h];
                for (j, o) in out.iter_mut().enumerate() {
                    let row = &params.w1[j * in_dim + slot * e..j * in_dim + (slot + 1) * e];
                    *o = row.iter().zip(emb).map(|(w, x)| w * x).sum();
                }
            }
        }
        Self { params, table }
    }

    pub fn params(&self) -> &EncoderParams {
        self.params
    }

    /// Query for `example` at `position`.
    pub fn encode(&self, example: &SyntheticExample, position: usize) -> Result<(Vec<f64>, EncoderCache)> {
        if position >= example.len() {
            return Err(Error::Precondition(format!(
                "position {position} beyond sequence of length {}",
                example.len()
            )));
        }
        let c = self.params.config;
        let tokens = window_tokens(&example.input, position, c.window);
        let pos = position_features(position, c.pos_features);
        self.encode_window(tokens, pos)
    }

    fn encode_window(&self, tokens: Vec<u8>, pos: Vec<f64>) -> Result<(Vec<f64>, EncoderCache)> {
        let p = self.params;
        let c = p.config;
        let (h, in_dim, pos_col) = (c.hidden, c.input_dim(), c.window * c.embed_dim);
        let mut a = p.b1.clone();
        for (slot, &tok) in tokens.iter().enumerate() {
            let row = &self.table[(slot * VOCAB + tok as usize) * h..(slot * VOCAB + tok as usize + 1) * h];
            for (x, t) in a.iter_mut().zip(row) {
                *x += t;
            }
        }
        for (j, x) in a.iter_mut().enumerate() {
            let w = &p.w1[j * in_dim + pos_col..(j + 1) * in_dim];
            *x += w.iter().zip(&pos).map(|(w, f)| w * f).sum::<f64>();
        }
        let hidden: Vec<f64> = a.iter().map(|v| v.tanh()).collect();
        let x: Vec<f64> = (0..c.key_size)
            .map(|k| {
                let row = &p.w2[k * h..(k + 1) * h];
                p.b2[k] + row.iter().zip(&hidden).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= 1e-12) {
            return Err(Error::Numerical(format!("encoder output has norm {norm}")));
        }
        let q: Vec<f64> = x.iter().map(|v| v / norm).collect();
        Ok((
            q.clone(),
            EncoderCache {
                tokens,
                pos,
                hidden,
                x,
                q,
            },
        ))
    }
}

/// Query for one position; see [`PreparedEncoder`] for batches.
pub fn encode_query(params: &EncoderParams, example: &SyntheticExample, position: usize) -> Result<(Vec<f64>, EncoderCache)> {
    PreparedEncoder::new(params).encode(example, position)
}

/// Sums parameter gradients over many positions.
pub struct GradAccumulator {
    config: EncoderConfig,
    grads: EncoderParams,
    /// Summed hidden pre-activation gradients per (slot, token).
    slot_token: Vec<f64>,
}

impl GradAccumulator {
    pub fn new(config: EncoderConfig) -> Self {
        Self {
            config,
            grads: EncoderParams::zeros(config),
            slot_token: vec![0.0; config.window * VOCAB * config.hidden],
        }
    }

    /// Adds the gradient of a loss whose derivative in `q` is `grad_q`.
    pub fn add(&mut self, params: &EncoderParams, cache: &EncoderCache, grad_q: &[f64]) -> Result<()> {
        let c = self.config;
        let (h, in_dim, pos_col) = (c.hidden, c.input_dim(), c.window * c.embed_dim);
        let gx = query_grad_through_normalization(&cache.x, grad_q)?;
        let mut gh = vec![0.0; h];
        for (k, &g) in gx.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            self.grads.b2[k] += g;
            let w_row = &params.w2[k * h..(k + 1) * h];
            let gw_row = &mut self.grads.w2[k * h..(k + 1) * h];
            for ((gw, w), (acc, hv)) in gw_row.iter_mut().zip(w_row).zip(gh.iter_mut().zip(&cache.hidden)) {
                *gw += g * hv;
                *acc += g * w;
            }
        }
        let ga: Vec<f64> = gh.iter().zip(&cache.hidden).map(|(g, t)| g * (1.0 - t * t)).collect();
        for (j, &g) in ga.iter().enumerate() {
            self.grads.b1[j] += g;
            let row = &mut self.grads.w1[j * in_dim + pos_col..(j + 1) * in_dim];
            for (w, f) in row.iter_mut().zip(&cache.pos) {
                *w += g * f;
            }
        }
        for (slot, &tok) in cache.tokens.iter().enumerate() {
            let acc = &mut self.slot_token[(slot * VOCAB + tok as usize) * h..(slot * VOCAB + tok as usize + 1) * h];
            for (a, g) in acc.iter_mut().zip(&ga) {
                *a += g;
            }
        }
        Ok(())
    }

    /// Expands the factored first-layer terms and returns the summed gradients.
    pub fn finish(mut self, params: &EncoderParams) -> EncoderParams {
        let c = self.config;
        let (e, h, in_dim) = (c.embed_dim, c.hidden, c.input_dim());
        for slot in 0..c.window {
            for tok in 0..VOCAB {
                let g = &self.slot_token[(slot * VOCAB + tok) * h..(slot * VOCAB + tok + 1) * h];
                if g.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let emb = &params.embed[tok * e..(tok + 1) * e];
                let gemb = &mut self.grads.embed[tok * e..(tok + 1) * e];
                for (j, &gj) in g.iter().enumerate() {
                    let cols = j * in_dim + slot * e..j * in_dim + (slot + 1) * e;
                    let w = &params.w1[cols.clone()];
                    for ((gw, x), (ge, wv)) in self.grads.w1[cols].iter_mut().zip(emb).zip(gemb.iter_mut().zip(w)) {
                        *gw += gj * x;
                        *ge += gj * wv;
                    }
                }
            }
        }
        self.grads
    }
}

/// Parameter gradients of a single forward pass.
pub fn encode_backward(params: &EncoderParams, cache: &EncoderCache, grad_q: &[f64]) -> Result<EncoderParams> {
    let mut acc = GradAccumulator::new(params.config);
    acc.add(params, cache, grad_q)?;
    Ok(acc.finish(params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::SyntheticTaskSpec;

    fn small() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 4,
            hidden: 8,
            window: 5,
            pos_features: 4,
            key_size: 8,
        }
    }

    fn example() -> SyntheticExample {
        SyntheticTaskSpec::new(1).generate(1, 3).remove(0)
    }

    /// Reference forward pass over the explicit concatenated input vector.
    fn naive_x(params: &EncoderParams, ex: &SyntheticExample, position: usize) -> Vec<f64> {
        let c = params.config;
        let mut input = Vec::new();
        for t in window_tokens(&ex.input, position, c.window) {
            input.extend_from_slice(&params.embed[t as usize * c.embed_dim..(t as usize + 1) * c.embed_dim]);
        }
        input.extend(position_features(position, c.pos_features));
        let hidden: Vec<f64> = (0..c.hidden)
            .map(|j| {
                let row = &params.w1[j * c.input_dim()..(j + 1) * c.input_dim()];
                (params.b1[j] + row.iter().zip(&input).map(|(w, x)| w * x).sum::<f64>()).tanh()
            })
            .collect();
        (0..c.key_size)
            .map(|k| params.b2[k] + (0..c.hidden).map(|j| params.w2[k * c.hidden + j] * hidden[j]).sum::<f64>())
            .collect()
    }

    #[test]
    fn table_forward_matches_naive_forward() {
        let params = EncoderParams::init(small(), 4).unwrap();
        let ex = example();
        for p in 0..ex.len() {
            let (_, cache) = encode_query(&params, &ex, p).unwrap();
            for (a, b) in cache.x.iter().zip(naive_x(&params, &ex, p)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn query_is_unit() {
        let params = EncoderParams::init(EncoderConfig::default(), 1).unwrap();
        let ex = example();
        for p in 0..ex.len() {
            let (q, _) = encode_query(&params, &ex, p).unwrap();
            let n: f64 = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn position_out_of_range_is_rejected() {
        let params = EncoderParams::init(small(), 4).unwrap();
        let ex = example();
        assert!(encode_query(&params, &ex, ex.len()).is_err());
    }

    #[test]
    fn zero_output_is_a_numerical_error() {
        let mut params = EncoderParams::init(small(), 4).unwrap();
        params.w2.fill(0.0);
        params.b2.fill(0.0);
        assert!(matches!(encode_query(&params, &example(), 0), Err(Error::Numerical(_))));
    }

    #[test]
    fn window_pads_with_a() {
        use Token::*;
        let toks = [D1, B, D2];
        assert_eq!(window_tokens(&toks, 0, 5), vec![0, 0, 3, 1, 4]);
        assert_eq!(window_tokens(&toks, 2, 5), vec![3, 1, 4, 0, 0]);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let params = EncoderParams::init(small(), 4).unwrap();
        let (_, cache) = encode_query(&params, &example(), 2).unwrap();
        let g = encode_backward(&params, &cache, &[0.0; 8]).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn saturated_units_pass_almost_no_gradient() {
        let mut params = EncoderParams::init(small(), 4).unwrap();
        params.b1.fill(20.0);
        let (_, cache) = encode_query(&params, &example(), 1).unwrap();
        let grad_q: Vec<f64> = (0..8).map(|i| (i as f64 - 3.5) / 4.0).collect();
        let g = encode_backward(&params, &cache, &grad_q).unwrap();
        assert!(g.b1.iter().all(|x| x.abs() < 1e-7));
    }

    #[test]
    fn backward_matches_central_differences() {
        let params = EncoderParams::init(small(), 9).unwrap();
        let ex = example();
        let c: Vec<f64> = (0..8).map(|i| ((i * 7 % 5) as f64 - 2.0) / 3.0).collect();
        let objective = |p: &EncoderParams, pos: usize| -> f64 {
            let (q, _) = encode_query(p, &ex, pos).unwrap();
            q.iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        for pos in [0, 3, ex.len() - 1] {
            let (_, cache) = encode_query(&params, &ex, pos).unwrap();
            let grad = encode_backward(&params, &cache, &c).unwrap();
            for t in 0..5 {
                for i in 0..params.tensors()[t].len() {
                    let h = 1e-4;
                    let mut plus = params.clone();
                    plus.tensors_mut()[t][i] += h;
                    let mut minus = params.clone();
                    minus.tensors_mut()[t][i] -= h;
                    let numeric = (objective(&plus, pos) - objective(&minus, pos)) / (2.0 * h);
                    let analytic = grad.tensors()[t][i];
                    let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                    assert!(err <= 1e-3, "tensor {t} index {i} at {pos}: {analytic} vs {numeric}");
                }
            }
        }
    }
}
