//! Matching models `s(c, r) ∈ (0, 1)`.
//!
//! The evaluator and trainer only go through [`Scorer`] and
//! [`TrainableScorer`]; [`DualEncoder`] is the built-in implementation:
//!
//! ```text
//! u     = Σ_j γ^(T-j) · mean(E[turn_j]) / Σ_j γ^(T-j)
//! v     = mean(E[response])
//! raw   = Σ_t w_t · u_t · v_t + β
//! score = σ(raw)
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};

pub trait Scorer {
    fn score(&self, context: &[Vec<TokenId>], response: &[TokenId]) -> f64;

    fn score_many(&self, context: &[Vec<TokenId>], responses: &[Vec<TokenId>]) -> Vec<f64> {
        responses.iter().map(|r| self.score(context, r)).collect()
    }
}

/// A scorer that can be trained by gradient descent.
pub trait TrainableScorer: Scorer + Clone + Send + Sync {
    type Cache: Send;
    type Gradients: Send;

    fn forward(&self, context: &[Vec<TokenId>], response: &[TokenId]) -> Self::Cache;

    fn forward_many(&self, context: &[Vec<TokenId>], responses: &[&[TokenId]]) -> Vec<Self::Cache> {
        responses.iter().map(|r| self.forward(context, r)).collect()
    }

    fn cached_score(cache: &Self::Cache) -> f64;

    fn zero_gradients(&self) -> Self::Gradients;

    /// Adds `upstream · ∂score/∂θ` into `grads`.
    fn backward_into(&self, cache: &Self::Cache, upstream: f64, grads: &mut Self::Gradients) -> Result<()>;

    fn backward(&self, cache: &Self::Cache, upstream: f64) -> Result<Self::Gradients> {
        let mut grads = self.zero_gradients();
        self.backward_into(cache, upstream, &mut grads)?;
        Ok(grads)
    }

    /// `θ ← θ − lr · grads`.
    fn apply(&mut self, grads: &Self::Gradients, lr: f64);

    /// A frozen copy of the current parameters.
    fn snapshot(&self) -> Self {
        self.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualEncoderConfig {
    pub dim: usize,
    /// Recency decay in (0, 1].
    pub gamma: f64,
    /// Embeddings are drawn uniformly from `[-init_range, init_range]`.
    pub init_range: f64,
    /// Initial value of every interaction weight.
    pub init_weight: f64,
}

impl Default for DualEncoderConfig {
    fn default() -> Self {
        DualEncoderConfig {
            dim: 64,
            gamma: 0.7,
            init_range: 0.05,
            init_weight: 1.0,
        }
    }
}

impl DualEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidConfig("embedding dim must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.init_range >= 0.0 && self.init_range.is_finite() && self.init_weight.is_finite()) {
            return Err(Error::InvalidConfig("initialization values must be finite".into()));
        }
        Ok(())
    }
}

/// Recency-weighted mean-embedding dual encoder with a diagonal bilinear
/// interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    dim: usize,
    gamma: f64,
    embeddings: Vec<f64>,
    weights: Vec<f64>,
    bias: f64,
    /// Bumped by every update; caches carry the version they were built at.
    version: u64,
}

/// Forward intermediates needed by [`DualEncoder::backward_into`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreCache {
    pub score: f64,
    pub raw: f64,
    version: u64,
    context: Vec<Vec<TokenId>>,
    response: Vec<TokenId>,
    /// γ^(T-j) / Σ γ^(T-j) per turn.
    turn_weights: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoderGradients {
    pub embeddings: BTreeMap<TokenId, Vec<f64>>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl DualEncoderGradients {
    pub fn embedding_row(&self, id: TokenId) -> Option<&[f64]> {
        self.embeddings.get(&id).map(Vec::as_slice)
    }

    pub fn is_zero(&self) -> bool {
        self.bias == 0.0
            && self.weights.iter().all(|&g| g == 0.0)
            && self.embeddings.values().flatten().all(|&g| g == 0.0)
    }
}

/// Smallest distance a score keeps from 0 and 1.
pub const SCORE_EPS: f64 = f64::EPSILON / 2.0;

/// Logistic function, clamped so the result stays strictly inside (0, 1)
/// once `|x|` exceeds roughly 36.7.
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

impl DualEncoder {
    pub fn new(vocab_size: usize, config: DualEncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = config.init_range;
        let embeddings = (0..vocab_size * config.dim)
            .map(|_| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 })
            .collect();
        Ok(DualEncoder {
            dim: config.dim,
            gamma: config.gamma,
            embeddings,
            weights: vec![config.init_weight; config.dim],
            bias: 0.0,
            version: 0,
        })
    }

    /// Builds a model from explicit parameters.
    pub fn from_parts(dim: usize, gamma: f64, embeddings: Vec<f64>, weights: Vec<f64>, bias: f64) -> Result<Self> {
        if dim == 0 || !embeddings.len().is_multiple_of(dim) || weights.len() != dim {
            return Err(Error::InvalidInput(
                "parameter shapes do not match the embedding dim".into(),
            ));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!("gamma must be in (0, 1], got {gamma}")));
        }
        Ok(DualEncoder {
            dim,
            gamma,
            embeddings,
            weights,
            bias,
            version: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn vocab_size(&self) -> usize {
        self.embeddings.len() / self.dim
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn bias_mut(&mut self) -> &mut f64 {
        &mut self.bias
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn embedding(&self, id: TokenId) -> &[f64] {
        let start = self.row_start(id);
        &self.embeddings[start..start + self.dim]
    }

    pub fn embedding_mut(&mut self, id: TokenId) -> &mut [f64] {
        let start = self.row_start(id);
        &mut self.embeddings[start..start + self.dim]
    }

    /// Ids beyond the table (e.g. from a larger vocabulary) use the OOV row.
    fn row_start(&self, id: TokenId) -> usize {
        let id = id as usize;
        let row = if id < self.vocab_size() { id } else { 0 };
        row * self.dim
    }

    fn mean_embedding(&self, ids: &[TokenId], out: &mut [f64], scale: f64) {
        if ids.is_empty() {
            return;
        }
        let s = scale / ids.len() as f64;
        for &id in ids {
            for (o, e) in out.iter_mut().zip(self.embedding(id)) {
                *o += s * e;
            }
        }
    }

    fn turn_weights(&self, turns: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..turns).map(|j| self.gamma.powi((turns - 1 - j) as i32)).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|a| a / total).collect()
    }

    /// Recency-weighted context vector. All-empty contexts give the zero vector.
    pub fn encode_context(&self, context: &[Vec<TokenId>]) -> Vec<f64> {
        self.encode_context_weighted(context).0
    }

    fn encode_context_weighted(&self, context: &[Vec<TokenId>]) -> (Vec<f64>, Vec<f64>) {
        let mut u = vec![0.0; self.dim];
        if context.is_empty() {
            return (u, Vec::new());
        }
        let weights = self.turn_weights(context.len());
        for (turn, &a) in context.iter().zip(&weights) {
            self.mean_embedding(turn, &mut u, a);
        }
        (u, weights)
    }

    pub fn encode_response(&self, response: &[TokenId]) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        self.mean_embedding(response, &mut v, 1.0);
        v
    }

    pub fn raw_score_encoded(&self, u: &[f64], v: &[f64]) -> f64 {
        let mut raw = self.bias;
        for t in 0..self.dim {
            raw += self.weights[t] * u[t] * v[t];
        }
        raw
    }

    pub fn raw_score(&self, context: &[Vec<TokenId>], response: &[TokenId]) -> f64 {
        let u = self.encode_context(context);
        let v = self.encode_response(response);
        self.raw_score_encoded(&u, &v)
    }

    fn forward_encoded(
        &self,
        context: &[Vec<TokenId>],
        response: &[TokenId],
        u: &[f64],
        weights: &[f64],
    ) -> ScoreCache {
        let v = self.encode_response(response);
        let raw = self.raw_score_encoded(u, &v);
        ScoreCache {
            score: sigmoid(raw),
            raw,
            version: self.version,
            context: context.to_vec(),
            response: response.to_vec(),
            turn_weights: weights.to_vec(),
            u: u.to_vec(),
            v,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.vocab_size() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&self.gamma.to_le_bytes())?;
        w.write_all(&self.bias.to_le_bytes())?;
        for x in self.weights.iter().chain(&self.embeddings) {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn from_reader<R: Read>(mut r: R) -> Result<Self> {
        let truncated = |_| Error::InvalidInput("truncated checkpoint".into());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::InvalidInput("not a grayrank checkpoint".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(truncated)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                kind: "checkpoint",
                found: version.to_string(),
                expected: CHECKPOINT_VERSION.to_string(),
            });
        }
        let mut b8 = [0u8; 8];
        let mut next8 = |r: &mut R| -> Result<[u8; 8]> {
            r.read_exact(&mut b8).map_err(truncated)?;
            Ok(b8)
        };
        let vocab_size = u64::from_le_bytes(next8(&mut r)?) as usize;
        let dim = u64::from_le_bytes(next8(&mut r)?) as usize;
        let update_version = u64::from_le_bytes(next8(&mut r)?);
        let gamma = f64::from_le_bytes(next8(&mut r)?);
        let bias = f64::from_le_bytes(next8(&mut r)?);
        let count = vocab_size
            .checked_mul(dim)
            .and_then(|n| n.checked_add(dim))
            .ok_or_else(|| Error::InvalidInput("checkpoint dimensions overflow".into()))?;
        let mut values = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            values.push(f64::from_le_bytes(next8(&mut r)?));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io("<checkpoint>", e))?;
        if !rest.is_empty() {
            return Err(Error::InvalidInput("trailing bytes after checkpoint".into()));
        }
        let embeddings = values.split_off(dim);
        let mut model = DualEncoder::from_parts(dim, gamma, embeddings, values, bias)?;
        model.version = update_version;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file))
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"GRCK";
const CHECKPOINT_VERSION: u32 = 1;

impl Scorer for DualEncoder {
    fn score(&self, context: &[Vec<TokenId>], response: &[TokenId]) -> f64 {
        sigmoid(self.raw_score(context, response))
    }

    fn score_many(&self, context: &[Vec<TokenId>], responses: &[Vec<TokenId>]) -> Vec<f64> {
        let u = self.encode_context(context);
        responses
            .iter()
            .map(|r| sigmoid(self.raw_score_encoded(&u, &self.encode_response(r))))
            .collect()
    }
}

impl TrainableScorer for DualEncoder {
    type Cache = ScoreCache;
    type Gradients = DualEncoderGradients;

    fn forward(&self, context: &[Vec<TokenId>], response: &[TokenId]) -> ScoreCache {
        let (u, weights) = self.encode_context_weighted(context);
        self.forward_encoded(context, response, &u, &weights)
    }

    fn forward_many(&self, context: &[Vec<TokenId>], responses: &[&[TokenId]]) -> Vec<ScoreCache> {
        let (u, weights) = self.encode_context_weighted(context);
        responses
            .iter()
            .map(|r| self.forward_encoded(context, r, &u, &weights))
            .collect()
    }

    fn cached_score(cache: &ScoreCache) -> f64 {
        cache.score
    }

    fn zero_gradients(&self) -> DualEncoderGradients {
        DualEncoderGradients {
            embeddings: BTreeMap::new(),
            weights: vec![0.0; self.dim],
            bias: 0.0,
        }
    }

    fn backward_into(&self, cache: &ScoreCache, upstream: f64, grads: &mut DualEncoderGradients) -> Result<()> {
        if cache.version != self.version {
            return Err(Error::StaleCache {
                cached: cache.version,
                current: self.version,
            });
        }
        if cache.u.len() != self.dim || grads.weights.len() != self.dim {
            return Err(Error::InvalidInput(
                "cache or gradient buffer has the wrong dimension".into(),
            ));
        }
        if upstream == 0.0 {
            return Ok(());
        }
        let g = upstream * cache.score * (1.0 - cache.score);
        grads.bias += g;
        let mut du = vec![0.0; self.dim];
        let mut dv = vec![0.0; self.dim];
        for t in 0..self.dim {
            grads.weights[t] += g * cache.u[t] * cache.v[t];
            du[t] = g * self.weights[t] * cache.v[t];
            dv[t] = g * self.weights[t] * cache.u[t];
        }
        let mut scatter = |ids: &[TokenId], d: &[f64], scale: f64| {
            if ids.is_empty() {
                return;
            }
            let s = scale / ids.len() as f64;
            for &id in ids {
                let row = (self.row_start(id) / self.dim) as TokenId;
                let entry = grads.embeddings.entry(row).or_insert_with(|| vec![0.0; self.dim]);
                for (e, x) in entry.iter_mut().zip(d) {
                    *e += s * x;
                }
            }
        };
        for (turn, &a) in cache.context.iter().zip(&cache.turn_weights) {
            scatter(turn, &du, a);
        }
        scatter(&cache.response, &dv, 1.0);
        Ok(())
    }

    fn apply(&mut self, grads: &DualEncoderGradients, lr: f64) {
        self.bias -= lr * grads.bias;
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            *w -= lr * g;
        }
        for (&id, row) in &grads.embeddings {
            for (e, g) in self.embedding_mut(id).iter_mut().zip(row) {
                *e -= lr * g;
            }
        }
        self.version += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn model(vocab: usize, dim: usize, gamma: f64, seed: u64) -> DualEncoder {
        let config = DualEncoderConfig {
            dim,
            gamma,
            init_range: 0.5,
            init_weight: 1.0,
        };
        DualEncoder::new(vocab, config, seed).unwrap()
    }

    #[test]
    fn context_encoding() {
        let m = model(10, 4, 0.5, 1);
        let single = m.encode_context(&[vec![3, 4, 5]]);
        let mean: Vec<f64> = (0..4)
            .map(|t| (m.embedding(3)[t] + m.embedding(4)[t] + m.embedding(5)[t]) / 3.0)
            .collect();
        for (a, b) in single.iter().zip(&mean) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }

        let flat = model(10, 4, 1.0, 1);
        let one = flat.encode_context(&[vec![3, 6]]);
        let two = flat.encode_context(&[vec![3, 6], vec![3, 6]]);
        for (a, b) in one.iter().zip(&two) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }

        let sharp = model(10, 4, 1e-9, 1);
        let last = sharp.encode_context(&[vec![7], vec![8, 9]]);
        let expect = sharp.encode_context(&[vec![8, 9]]);
        for (a, b) in last.iter().zip(&expect) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }

        assert!(m.encode_context(&[vec![], vec![]]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn score_examples() {
        let zero = DualEncoder::from_parts(2, 0.7, vec![0.0; 10], vec![1.0, 1.0], 0.0).unwrap();
        assert_eq!(zero.score(&[vec![3]], &[4]), 0.5);

        let mut big = zero.clone();
        *big.bias_mut() = 40.0;
        assert!(big.score(&[vec![3]], &[4]) > 1.0 - 1e-12);

        // d = 1, u = [2], v = [1], w = [0.5].
        let one = DualEncoder::from_parts(1, 0.7, vec![0.0, 0.0, 0.0, 2.0, 1.0], vec![0.5], 0.0).unwrap();
        assert_abs_diff_eq!(one.score(&[vec![3]], &[4]), 0.731_058_578_630_004_9, epsilon = 1e-12);
        assert_abs_diff_eq!(one.score(&[vec![3]], &[4]), 0.73106, epsilon = 1e-5);
    }

    #[test]
    fn backward_basics() {
        let m = model(12, 3, 0.7, 5);
        let ctx = vec![vec![3, 4], vec![5]];
        let cache = m.forward(&ctx, &[6, 6, 7]);
        assert!(m.backward(&cache, 0.0).unwrap().is_zero());

        let grads = m.backward(&cache, 1.0).unwrap();
        assert_abs_diff_eq!(grads.bias, cache.score * (1.0 - cache.score), epsilon = 1e-15);
        let grads = m.backward(&cache, -2.5).unwrap();
        assert_abs_diff_eq!(grads.bias, -2.5 * cache.score * (1.0 - cache.score), epsilon = 1e-15);
        assert!(grads.embedding_row(8).is_none());
        assert!(grads.embedding_row(6).is_some());
    }

    #[test]
    fn stale_cache_rejected() {
        let mut m = model(12, 3, 0.7, 5);
        let cache = m.forward(&[vec![3]], &[4]);
        let grads = m.backward(&cache, 1.0).unwrap();
        m.apply(&grads, 0.1);
        assert!(matches!(m.backward(&cache, 1.0), Err(Error::StaleCache { .. })));
    }

    #[test]
    fn forward_is_reproducible() {
        let m = model(20, 8, 0.7, 3);
        let ctx = vec![vec![3, 4, 5], vec![], vec![9, 10]];
        let a = m.forward(&ctx, &[11, 12]);
        let b = m.forward(&ctx, &[11, 12]);
        assert_eq!(a.score.to_bits(), b.score.to_bits());
        let many = m.forward_many(&ctx, &[&[11, 12], &[13]]);
        assert_eq!(many[0].score.to_bits(), a.score.to_bits());
        assert_eq!(m.score(&ctx, &[11, 12]).to_bits(), a.score.to_bits());
        assert_eq!(m.score_many(&ctx, &[vec![11, 12]])[0].to_bits(), a.score.to_bits());
    }

    #[test]
    fn out_of_table_ids_use_oov_row() {
        let m = model(5, 2, 0.7, 1);
        assert_eq!(m.score(&[vec![99]], &[3]), m.score(&[vec![0]], &[3]));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = model(30, 5, 0.7, 9);
        let cache = m.forward(&[vec![3, 4]], &[5]);
        let grads = m.backward(&cache, 1.0).unwrap();
        m.apply(&grads, 0.3);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let loaded = DualEncoder::from_reader(buf.as_slice()).unwrap();
        assert_eq!(loaded, m);
        let mut again = Vec::new();
        loaded.write_to(&mut again).unwrap();
        assert_eq!(again, buf);

        buf[4] = 9;
        assert!(matches!(
            DualEncoder::from_reader(buf.as_slice()),
            Err(Error::VersionMismatch { .. })
        ));
        assert!(DualEncoder::from_reader(&b"GRCK"[..]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn score_strictly_inside_unit_interval(seed in any::<u64>(), bias in -1e6f64..1e6) {
                let mut m = model(16, 4, 0.7, seed);
                *m.bias_mut() = bias;
                let s = m.score(&[vec![3, 4], vec![5]], &[6, 7]);
                prop_assert!(s > 0.0 && s < 1.0);
            }

            #[test]
            fn score_increases_with_raw(seed in any::<u64>(), bump in 1e-3f64..5.0) {
                let m = model(16, 4, 0.7, seed);
                let mut higher = m.clone();
                *higher.bias_mut() += bump;
                let ctx = [vec![3, 4], vec![5]];
                prop_assert!(higher.score(&ctx, &[6]) > m.score(&ctx, &[6]));
            }
        }
    }
}
