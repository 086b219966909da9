//! KV cache with attention-sink preservation and chunked pairwise compression.
//!
//! The first `sink_len` tokens live in an immutable sink. Everything after goes
//! to the body. Once the cache holds `budget + chunk_size` entries a single
//! compression step merges `chunk_size` disjoint adjacent body pairs, bringing
//! the length back to exactly `budget`.
//!
//! Merged values are summed, so an entry standing for `c` tokens stores the
//! sum of their values. With [`Readout::CountNormalized`] attention reads such
//! an entry with logit offset `ln c` against its mean value `v / c`, which
//! puts the `c` tokens back into the softmax denominator:
//! `o = sum_i exp(e_i) v_i / sum_i c_i exp(e_i)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::attention::{key_gradient, AttentionSnapshot};
use crate::merge::{
    merge_key_asymkv, merge_key_closed_form, merge_key_mean, merge_value,
    merge_weights_gradient_free, sensitivity_vectors, DEFAULT_MERGE_EPS, FISHER_EPS,
};
use crate::numerics::{cosine, softmax, Vector};
use crate::{Error, Result, Scalar};

/// Cache budget used by the reference configuration.
pub const DEFAULT_BUDGET: usize = 2048;
pub const DEFAULT_CHUNK_SIZE: usize = 512;
pub const DEFAULT_SINK_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    /// Gradient-free closed-form key merge.
    KvSlimmer,
    /// Diagonal-Fisher weighted key merge from surrogate gradients.
    AsymKv,
    /// Plain key average.
    Mean,
    /// No compression.
    None,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::KvSlimmer,
        Algorithm::AsymKv,
        Algorithm::Mean,
        Algorithm::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::KvSlimmer => "kvslimmer",
            Algorithm::AsymKv => "asymkv",
            Algorithm::Mean => "mean",
            Algorithm::None => "none",
        }
    }

    pub fn needs_output_gradient(self) -> bool {
        self == Algorithm::AsymKv
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PairStrategy {
    /// Greedy by descending key cosine.
    HighestKeySimilarity,
    /// Greedy by ascending `alpha_i + alpha_{i+1}`.
    LowestAttentionMass,
    /// The first `2 * count` body entries, paired consecutively.
    OldestFirst,
}

impl PairStrategy {
    pub const ALL: [PairStrategy; 3] = [
        PairStrategy::HighestKeySimilarity,
        PairStrategy::LowestAttentionMass,
        PairStrategy::OldestFirst,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PairStrategy::HighestKeySimilarity => "highest_key_similarity",
            PairStrategy::LowestAttentionMass => "lowest_attention_mass",
            PairStrategy::OldestFirst => "oldest_first",
        }
    }
}

impl fmt::Display for PairStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PairStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown pair strategy `{s}`")))
    }
}

/// How attention reads merged entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Readout {
    /// Logit offset `ln(merged_count)` and mean value `value / merged_count`.
    #[default]
    CountNormalized,
    /// Plain softmax over the stored (summed) values.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompressionConfig {
    pub budget: usize,
    pub chunk_size: usize,
    pub sink_len: usize,
    pub algorithm: Algorithm,
    pub pair_strategy: PairStrategy,
    pub readout: Readout,
    /// Degeneracy threshold for the merge-weight denominator.
    pub eps: f64,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            chunk_size: DEFAULT_CHUNK_SIZE,
            sink_len: DEFAULT_SINK_LEN,
            algorithm: Algorithm::KvSlimmer,
            pair_strategy: PairStrategy::LowestAttentionMass,
            readout: Readout::CountNormalized,
            eps: DEFAULT_MERGE_EPS,
        }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::InvalidConfig("budget must be positive".into()));
        }
        if self.chunk_size == 0 {
            return Err(Error::InvalidConfig("chunk_size must be at least 1".into()));
        }
        if self.sink_len >= self.budget {
            return Err(Error::InvalidConfig(format!(
                "sink_len ({}) must be smaller than budget ({})",
                self.sink_len, self.budget
            )));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidConfig("eps must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Length at which a compression step fires.
    pub fn trigger_len(&self) -> usize {
        self.budget + self.chunk_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry<T> {
    pub key: Vector<T>,
    pub value: Vector<T>,
    pub merged_count: usize,
    /// Inclusive range of original token indices.
    pub origin_span: (usize, usize),
}

impl<T: Scalar> CacheEntry<T> {
    /// Attention-side value: the mean value under count normalization.
    fn read_value(&self, readout: Readout) -> Vector<T> {
        match readout {
            Readout::CountNormalized if self.merged_count > 1 => {
                self.value.scale(T::one() / T::lit(self.merged_count as f64))
            }
            _ => self.value.clone(),
        }
    }

    fn read_bias(&self, readout: Readout) -> T {
        match readout {
            Readout::CountNormalized => T::lit(self.merged_count as f64).ln(),
            Readout::Raw => T::zero(),
        }
    }
}

/// Forward state used to parameterize one compression step.
#[derive(Clone, Copy, Debug)]
pub struct MergeContext<'a, T> {
    /// Attention of the latest query over the current cache (sink then body).
    pub snapshot: &'a AttentionSnapshot<T>,
    /// Output gradient used by [`Algorithm::AsymKv`] only.
    pub grad_output: Option<&'a Vector<T>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CompressionReport {
    /// Merged body index pairs, ascending, in pre-merge body coordinates.
    pub pairs: Vec<(usize, usize)>,
    pub merges: usize,
    pub fallbacks: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CacheStats {
    pub length: usize,
    pub total_tokens_represented: usize,
    /// 0 for an empty cache.
    pub mean_merged_count: f64,
    /// Fallback merges over all merges so far; 0 before the first merge.
    pub fallback_rate: f64,
}

#[derive(Clone, Debug)]
pub struct KvCache<T> {
    sink: Vec<CacheEntry<T>>,
    body: Vec<CacheEntry<T>>,
    config: CompressionConfig,
    key_dim: usize,
    value_dim: usize,
    appended: usize,
    merges: usize,
    fallbacks: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(config: CompressionConfig, key_dim: usize, value_dim: usize) -> Result<Self> {
        config.validate()?;
        if key_dim == 0 || value_dim == 0 {
            return Err(Error::InvalidConfig("head dimensions must be positive".into()));
        }
        Ok(Self {
            sink: Vec::with_capacity(config.sink_len),
            body: Vec::new(),
            config,
            key_dim,
            value_dim,
            appended: 0,
            merges: 0,
            fallbacks: 0,
        })
    }

    pub fn config(&self) -> &CompressionConfig {
        &self.config
    }

    pub fn sink(&self) -> &[CacheEntry<T>] {
        &self.sink
    }

    pub fn body(&self) -> &[CacheEntry<T>] {
        &self.body
    }

    pub fn len(&self) -> usize {
        self.sink.len() + self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn appended(&self) -> usize {
        self.appended
    }

    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry<T>> {
        self.sink.iter().chain(&self.body)
    }

    pub fn append(&mut self, key: Vector<T>, value: Vector<T>) -> Result<()> {
        if key.len() != self.key_dim {
            return Err(Error::DimensionMismatch {
                expected: self.key_dim,
                found: key.len(),
            });
        }
        if value.len() != self.value_dim {
            return Err(Error::DimensionMismatch {
                expected: self.value_dim,
                found: value.len(),
            });
        }
        let t = self.appended;
        let entry = CacheEntry {
            key,
            value,
            merged_count: 1,
            origin_span: (t, t),
        };
        if self.sink.len() < self.config.sink_len {
            self.sink.push(entry);
        } else {
            self.body.push(entry);
        }
        self.appended += 1;
        Ok(())
    }

    pub fn needs_compression(&self) -> bool {
        self.config.algorithm != Algorithm::None && self.len() >= self.config.trigger_len()
    }

    /// Keys, attention-side values and logit offsets under the configured readout.
    pub fn attention_inputs(&self) -> (Vec<Vector<T>>, Vec<Vector<T>>, Option<Vector<T>>) {
        let r = self.config.readout;
        let keys = self.entries().map(|e| e.key.clone()).collect();
        let values = self.entries().map(|e| e.read_value(r)).collect();
        let bias = match r {
            Readout::Raw => None,
            Readout::CountNormalized => {
                if self.entries().all(|e| e.merged_count == 1) {
                    None
                } else {
                    Some(Vector::from_fn(self.len(), |i| self.entry(i).read_bias(r)))
                }
            }
        };
        (keys, values, bias)
    }

    /// Attention snapshot of `query` over the current contents.
    pub fn snapshot(&self, query: &Vector<T>) -> Result<AttentionSnapshot<T>> {
        let (keys, values, bias) = self.attention_inputs();
        crate::attention::attention_forward_biased(query, &keys, &values, bias.as_ref())
    }

    /// Attention output of `query` over the current contents.
    ///
    /// Same arithmetic as [`attend`] without materializing the inputs, so an
    /// uncompressed cache reproduces plain attention bit for bit.
    pub fn attend(&self, query: &Vector<T>) -> Result<Vector<T>> {
        if self.is_empty() {
            return Err(Error::EmptySequence);
        }
        if query.len() != self.key_dim {
            return Err(Error::DimensionMismatch {
                expected: self.key_dim,
                found: query.len(),
            });
        }
        let r = self.config.readout;
        let scale = T::one() / T::lit(self.key_dim as f64).sqrt();
        let logits = Vector::from_fn(self.len(), |i| {
            let e = self.entry(i);
            let l = query.dot(&e.key) * scale;
            if e.merged_count > 1 && r == Readout::CountNormalized {
                l + e.read_bias(r)
            } else {
                l
            }
        });
        let scores = softmax(&logits);
        let mut out = vec![T::zero(); self.value_dim];
        for (i, &a) in scores.iter().enumerate() {
            let e = self.entry(i);
            let w = if e.merged_count > 1 && r == Readout::CountNormalized {
                a / T::lit(e.merged_count as f64)
            } else {
                a
            };
            for (o, &x) in out.iter_mut().zip(e.value.iter()) {
                *o += w * x;
            }
        }
        Vector::new(out)
    }

    fn entry(&self, i: usize) -> &CacheEntry<T> {
        if i < self.sink.len() {
            &self.sink[i]
        } else {
            &self.body[i - self.sink.len()]
        }
    }

    fn check_compressible(&self) -> Result<()> {
        if self.config.algorithm == Algorithm::None {
            return Err(Error::CompressionDisabled);
        }
        if self.len() < self.config.trigger_len() {
            return Err(Error::InsufficientLength {
                len: self.len(),
                required: self.config.trigger_len(),
            });
        }
        Ok(())
    }

    /// One chunked compression: selects `chunk_size` disjoint adjacent body
    /// pairs and merges each of them.
    pub fn compress_step(&mut self, ctx: &MergeContext<'_, T>) -> Result<CompressionReport> {
        self.check_compressible()?;
        self.check_context(ctx)?;
        let pairs = select_pairs(
            &self.body,
            self.config.chunk_size,
            self.config.pair_strategy,
            ctx.snapshot,
            self.sink.len(),
        )?;
        self.apply_pairs(&pairs, ctx)
    }

    fn check_context(&self, ctx: &MergeContext<'_, T>) -> Result<()> {
        if ctx.snapshot.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: ctx.snapshot.len(),
            });
        }
        if self.config.algorithm.needs_output_gradient() && ctx.grad_output.is_none() {
            return Err(Error::InvalidConfig(
                "asymkv merging needs an output gradient".into(),
            ));
        }
        Ok(())
    }

    /// Merges the given body pairs (ascending, disjoint, adjacent).
    pub fn apply_pairs(
        &mut self,
        pairs: &[(usize, usize)],
        ctx: &MergeContext<'_, T>,
    ) -> Result<CompressionReport> {
        self.check_context(ctx)?;
        let offset = self.sink.len();
        let mut report = CompressionReport {
            pairs: pairs.to_vec(),
            ..Default::default()
        };
        let mut merged = Vec::with_capacity(pairs.len());
        let mut prev_end = None;
        for &(a, b) in pairs {
            if b != a + 1 || b >= self.body.len() || prev_end.is_some_and(|p| a <= p) {
                return Err(Error::InvalidConfig(format!(
                    "pair ({a}, {b}) is not an ordered disjoint adjacent body pair"
                )));
            }
            prev_end = Some(b);
            let (entry, fallback) = self.merge_pair(a, offset, ctx)?;
            report.fallbacks += usize::from(fallback);
            merged.push(entry);
        }

        let mut body = Vec::with_capacity(self.body.len() - pairs.len());
        let mut next = pairs.iter().zip(merged).peekable();
        let mut old = std::mem::take(&mut self.body).into_iter().enumerate();
        while let Some((i, e)) = old.next() {
            if next.peek().is_some_and(|((a, _), _)| *a == i) {
                let (_, m) = next.next().expect("peeked");
                old.next();
                body.push(m);
            } else {
                body.push(e);
            }
        }
        self.body = body;
        report.merges = pairs.len();
        self.merges += report.merges;
        self.fallbacks += report.fallbacks;
        Ok(report)
    }

    fn merge_pair(
        &self,
        a: usize,
        offset: usize,
        ctx: &MergeContext<'_, T>,
    ) -> Result<(CacheEntry<T>, bool)> {
        let (em, en) = (&self.body[a], &self.body[a + 1]);
        let idx = offset + a;
        let mut fallback = false;
        let key = match self.config.algorithm {
            Algorithm::KvSlimmer => {
                let t = sensitivity_vectors(ctx.snapshot, idx)?;
                let w = merge_weights_gradient_free(&t, T::lit(self.config.eps));
                fallback = w.fallback_used;
                merge_key_closed_form(&em.key, &en.key, &w)?
            }
            Algorithm::AsymKv => {
                let e = ctx.grad_output.expect("checked by check_context");
                let gm = key_gradient(ctx.snapshot, e, idx)?;
                let gn = key_gradient(ctx.snapshot, e, idx + 1)?;
                merge_key_asymkv(&em.key, &en.key, &gm, &gn, T::lit(FISHER_EPS))?
            }
            Algorithm::Mean => merge_key_mean(&em.key, &en.key)?,
            Algorithm::None => return Err(Error::CompressionDisabled),
        };
        Ok((
            CacheEntry {
                key,
                value: merge_value(&em.value, &en.value)?,
                merged_count: em.merged_count + en.merged_count,
                origin_span: (em.origin_span.0, en.origin_span.1),
            },
            fallback,
        ))
    }

    pub fn stats(&self) -> CacheStats {
        let length = self.len();
        let total: usize = self.entries().map(|e| e.merged_count).sum();
        CacheStats {
            length,
            total_tokens_represented: total,
            mean_merged_count: if length == 0 {
                0.0
            } else {
                total as f64 / length as f64
            },
            fallback_rate: if self.merges == 0 {
                0.0
            } else {
                self.fallbacks as f64 / self.merges as f64
            },
        }
    }

    pub fn merges(&self) -> usize {
        self.merges
    }

    pub fn fallbacks(&self) -> usize {
        self.fallbacks
    }
}

/// Spec-level alias for [`KvCache::stats`].
pub fn cache_stats<T: Scalar>(cache: &KvCache<T>) -> CacheStats {
    cache.stats()
}

/// Picks `count` disjoint adjacent pairs from a single head's body.
///
/// `sink_offset` maps body index `i` to snapshot index `sink_offset + i`.
pub fn select_pairs<T: Scalar>(
    body: &[CacheEntry<T>],
    count: usize,
    strategy: PairStrategy,
    context: &AttentionSnapshot<T>,
    sink_offset: usize,
) -> Result<Vec<(usize, usize)>> {
    select_pairs_shared(&[body], count, strategy, &[context], sink_offset)
}

/// Picks `count` disjoint adjacent pairs for several heads that share positions.
/// Similarity is averaged and attention mass summed across heads.
pub fn select_pairs_shared<T: Scalar>(
    bodies: &[&[CacheEntry<T>]],
    count: usize,
    strategy: PairStrategy,
    contexts: &[&AttentionSnapshot<T>],
    sink_offset: usize,
) -> Result<Vec<(usize, usize)>> {
    let len = bodies.first().map_or(0, |b| b.len());
    if bodies.iter().any(|b| b.len() != len) {
        return Err(Error::InvalidConfig("head bodies differ in length".into()));
    }
    let available = len / 2;
    if count > available {
        return Err(Error::InsufficientPairs {
            requested: count,
            available,
        });
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let order: Vec<usize> = match strategy {
        PairStrategy::OldestFirst => {
            return Ok((0..count).map(|p| (2 * p, 2 * p + 1)).collect());
        }
        PairStrategy::HighestKeySimilarity => {
            let mut scored: Vec<(usize, f64)> = (0..len - 1)
                .map(|i| {
                    let s: f64 = bodies
                        .iter()
                        .map(|b| cosine(&b[i].key, &b[i + 1].key).map_or(0.0, |c| c.as_f64()))
                        .sum();
                    (i, s / bodies.len() as f64)
                })
                .collect();
            scored.sort_by(|x, y| y.1.total_cmp(&x.1));
            scored.into_iter().map(|(i, _)| i).collect()
        }
        PairStrategy::LowestAttentionMass => {
            if contexts.len() != bodies.len() {
                return Err(Error::DimensionMismatch {
                    expected: bodies.len(),
                    found: contexts.len(),
                });
            }
            for c in contexts {
                if c.len() != sink_offset + len {
                    return Err(Error::DimensionMismatch {
                        expected: sink_offset + len,
                        found: c.len(),
                    });
                }
            }
            let mut scored: Vec<(usize, f64)> = (0..len - 1)
                .map(|i| {
                    let j = sink_offset + i;
                    let mass: f64 = contexts
                        .iter()
                        .map(|c| (c.scores[j] + c.scores[j + 1]).as_f64())
                        .sum();
                    (i, mass)
                })
                .collect();
            scored.sort_by(|x, y| x.1.total_cmp(&y.1));
            scored.into_iter().map(|(i, _)| i).collect()
        }
    };
    greedy_disjoint(&order, len, count)
}

/// Greedy pair picking in priority order, skipping overlaps and any pick that
/// would leave too few pairable entries to reach `count`.
fn greedy_disjoint(order: &[usize], len: usize, count: usize) -> Result<Vec<(usize, usize)>> {
    // free segments: start -> end (exclusive)
    let mut segments = BTreeMap::from([(0usize, len)]);
    let mut capacity = len / 2;
    let mut chosen = Vec::with_capacity(count);
    let mut pending: Vec<usize> = order.to_vec();

    while chosen.len() < count {
        let before = chosen.len();
        let mut skipped = Vec::new();
        for &i in &pending {
            if chosen.len() == count {
                break;
            }
            let Some((&s, &e)) = segments.range(..=i).next_back() else {
                continue;
            };
            if i + 1 >= e {
                // already taken or straddles a boundary
                continue;
            }
            let (left, right) = (i - s, e - i - 2);
            let new_capacity = capacity - (e - s) / 2 + left / 2 + right / 2;
            if new_capacity + chosen.len() + 1 < count {
                skipped.push(i);
                continue;
            }
            segments.remove(&s);
            if left > 0 {
                segments.insert(s, i);
            }
            if right > 0 {
                segments.insert(i + 2, e);
            }
            capacity = new_capacity;
            chosen.push((i, i + 1));
        }
        if chosen.len() == before {
            return Err(Error::InsufficientPairs {
                requested: count,
                available: chosen.len(),
            });
        }
        pending = skipped;
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Several single-head caches that grow and compress in lockstep, sharing
/// pair positions while merge weights stay per head.
#[derive(Clone, Debug)]
pub struct MultiHeadCache<T> {
    heads: Vec<KvCache<T>>,
}

impl<T: Scalar> MultiHeadCache<T> {
    pub fn new(config: CompressionConfig, heads: usize, key_dim: usize, value_dim: usize) -> Result<Self> {
        if heads == 0 {
            return Err(Error::InvalidConfig("need at least one head".into()));
        }
        Ok(Self {
            heads: (0..heads)
                .map(|_| KvCache::new(config, key_dim, value_dim))
                .collect::<Result<_>>()?,
        })
    }

    pub fn heads(&self) -> &[KvCache<T>] {
        &self.heads
    }

    pub fn len(&self) -> usize {
        self.heads[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn config(&self) -> &CompressionConfig {
        self.heads[0].config()
    }

    pub fn needs_compression(&self) -> bool {
        self.heads[0].needs_compression()
    }

    pub fn append(&mut self, keys: Vec<Vector<T>>, values: Vec<Vector<T>>) -> Result<()> {
        if keys.len() != self.heads.len() || values.len() != self.heads.len() {
            return Err(Error::DimensionMismatch {
                expected: self.heads.len(),
                found: keys.len().min(values.len()),
            });
        }
        for ((h, k), v) in self.heads.iter_mut().zip(keys).zip(values) {
            h.append(k, v)?;
        }
        Ok(())
    }

    /// One shared compression step; `contexts[h]` parameterizes head `h`.
    pub fn compress_step(&mut self, contexts: &[MergeContext<'_, T>]) -> Result<CompressionReport> {
        if contexts.len() != self.heads.len() {
            return Err(Error::DimensionMismatch {
                expected: self.heads.len(),
                found: contexts.len(),
            });
        }
        for (h, c) in self.heads.iter().zip(contexts) {
            h.check_compressible()?;
            h.check_context(c)?;
        }
        let cfg = *self.config();
        let bodies: Vec<&[CacheEntry<T>]> = self.heads.iter().map(|h| h.body()).collect();
        let snaps: Vec<&AttentionSnapshot<T>> = contexts.iter().map(|c| c.snapshot).collect();
        let pairs = select_pairs_shared(
            &bodies,
            cfg.chunk_size,
            cfg.pair_strategy,
            &snaps,
            self.heads[0].sink().len(),
        )?;
        let mut total = CompressionReport {
            pairs: pairs.clone(),
            ..Default::default()
        };
        for (h, c) in self.heads.iter_mut().zip(contexts) {
            let r = h.apply_pairs(&pairs, c)?;
            total.merges += r.merges;
            total.fallbacks += r.fallbacks;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::attention_forward;

    fn v(x: &[f64]) -> Vector<f64> {
        Vector::from_f64(x).unwrap()
    }

    fn cfg(budget: usize, chunk: usize, sink: usize) -> CompressionConfig {
        CompressionConfig {
            budget,
            chunk_size: chunk,
            sink_len: sink,
            ..Default::default()
        }
    }

    fn filled(config: CompressionConfig, n: usize) -> KvCache<f64> {
        let mut c = KvCache::new(config, 2, 2).unwrap();
        for t in 0..n {
            let x = t as f64;
            c.append(v(&[x.sin(), x.cos()]), v(&[x, 1.0])).unwrap();
        }
        c
    }

    #[test]
    fn default_config_uses_reference_settings() {
        let c = CompressionConfig::default();
        assert_eq!((c.budget, c.chunk_size, c.sink_len), (2048, 512, 32));
        assert_eq!(c.pair_strategy, PairStrategy::LowestAttentionMass);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(8, 4, 8).validate().is_err());
        assert!(cfg(8, 0, 2).validate().is_err());
        assert!(cfg(8, 4, 7).validate().is_ok());
        assert!("bogus".parse::<Algorithm>().is_err());
        assert_eq!("kvslimmer".parse::<Algorithm>().unwrap(), Algorithm::KvSlimmer);
        assert_eq!(
            "oldest_first".parse::<PairStrategy>().unwrap(),
            PairStrategy::OldestFirst
        );
    }

    #[test]
    fn sink_fills_first() {
        let c = filled(cfg(8, 4, 2), 2);
        assert_eq!((c.sink().len(), c.body().len()), (2, 0));
        let c = filled(cfg(8, 4, 2), 3);
        assert_eq!((c.sink().len(), c.body().len()), (2, 1));
        let c = filled(cfg(8, 4, 2), 12);
        assert_eq!((c.sink().len(), c.body().len()), (2, 10));
        let mut c = filled(cfg(8, 4, 2), 1);
        assert!(c.append(v(&[1.0]), v(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn fresh_and_empty_stats() {
        let s = filled(cfg(8, 4, 2), 5).stats();
        assert_eq!(
            (s.length, s.total_tokens_represented, s.mean_merged_count, s.fallback_rate),
            (5, 5, 1.0, 0.0)
        );
        let s = filled(cfg(8, 4, 2), 0).stats();
        assert_eq!(
            (s.length, s.total_tokens_represented, s.mean_merged_count, s.fallback_rate),
            (0, 0, 0.0, 0.0)
        );
    }

    #[test]
    fn small_compress_conserves_tokens() {
        for strategy in PairStrategy::ALL {
            for algorithm in [Algorithm::KvSlimmer, Algorithm::Mean, Algorithm::AsymKv] {
                let mut c = filled(
                    CompressionConfig {
                        pair_strategy: strategy,
                        algorithm,
                        ..cfg(8, 4, 2)
                    },
                    12,
                );
                let sink_before = c.sink().to_vec();
                let snap = c.snapshot(&v(&[0.3, -0.8])).unwrap();
                let e = v(&[1.0, -0.5]);
                let r = c
                    .compress_step(&MergeContext { snapshot: &snap, grad_output: Some(&e) })
                    .unwrap();
                assert_eq!(r.merges, 4);
                assert_eq!(c.len(), 8);
                let s = c.stats();
                assert_eq!((s.length, s.total_tokens_represented), (8, 12));
                assert_eq!(s.mean_merged_count, 1.5);
                assert_eq!(c.sink(), &sink_before[..]);
                let mut next = 0;
                for e in c.entries() {
                    assert_eq!(e.origin_span.0, next);
                    assert_eq!(e.merged_count, e.origin_span.1 - e.origin_span.0 + 1);
                    next = e.origin_span.1 + 1;
                }
                assert_eq!(next, 12);
            }
        }
    }

    #[test]
    fn compress_preconditions() {
        let mut c = filled(cfg(8, 4, 2), 11);
        let snap = c.snapshot(&v(&[0.3, -0.8])).unwrap();
        let ctx = MergeContext { snapshot: &snap, grad_output: None };
        assert_eq!(
            c.compress_step(&ctx).unwrap_err(),
            Error::InsufficientLength { len: 11, required: 12 }
        );
        let mut c = filled(CompressionConfig { algorithm: Algorithm::None, ..cfg(8, 4, 2) }, 12);
        assert!(!c.needs_compression());
        assert_eq!(c.compress_step(&ctx).unwrap_err(), Error::CompressionDisabled);

        let mut c = filled(CompressionConfig { algorithm: Algorithm::AsymKv, ..cfg(8, 4, 2) }, 12);
        let snap = c.snapshot(&v(&[0.3, -0.8])).unwrap();
        assert!(matches!(
            c.compress_step(&MergeContext { snapshot: &snap, grad_output: None }),
            Err(Error::InvalidConfig(_))
        ));

        // body of 3 cannot hold 2 pairs
        let mut c = filled(cfg(4, 2, 3), 6);
        let snap = c.snapshot(&v(&[0.3, -0.8])).unwrap();
        assert_eq!(
            c.compress_step(&MergeContext { snapshot: &snap, grad_output: None }).unwrap_err(),
            Error::InsufficientPairs { requested: 2, available: 1 }
        );
    }

    #[test]
    fn oldest_first_pairs() {
        let c = filled(cfg(8, 4, 0), 10);
        let snap = c.snapshot(&v(&[1.0, 0.0])).unwrap();
        let p = select_pairs(c.body(), 2, PairStrategy::OldestFirst, &snap, 0).unwrap();
        assert_eq!(p, vec![(0, 1), (2, 3)]);
    }

    fn body_with_keys(keys: &[Vector<f64>]) -> Vec<CacheEntry<f64>> {
        keys.iter()
            .enumerate()
            .map(|(t, k)| CacheEntry { key: k.clone(), value: v(&[1.0]), merged_count: 1, origin_span: (t, t) })
            .collect()
    }

    #[test]
    fn similarity_ties_break_to_earliest() {
        let body = body_with_keys(&vec![v(&[1.0, 2.0]); 10]);
        let snap = attention_forward(&v(&[1.0, 0.0]), &vec![v(&[1.0, 2.0]); 10], &vec![v(&[1.0]); 10]).unwrap();
        let p = select_pairs(&body, 4, PairStrategy::HighestKeySimilarity, &snap, 0).unwrap();
        assert_eq!(p, vec![(0, 1), (2, 3), (4, 5), (6, 7)]);
    }

    #[test]
    fn dissimilar_pair_is_avoided() {
        // keys 0..=4 along +x, 5..=9 along -x: pair (4,5) has cosine -1
        let keys: Vec<_> = (0..10).map(|i| if i <= 4 { v(&[1.0, 0.0]) } else { v(&[-1.0, 0.0]) }).collect();
        let body = body_with_keys(&keys);
        let snap = attention_forward(&v(&[1.0, 0.0]), &keys, &vec![v(&[1.0]); 10]).unwrap();
        for count in 1..=4 {
            let p = select_pairs(&body, count, PairStrategy::HighestKeySimilarity, &snap, 0).unwrap();
            assert!(!p.contains(&(4, 5)), "{count}: {p:?}");
            assert_eq!(p.len(), count);
        }
    }

    #[test]
    fn lowest_mass_prefers_ignored_pairs() {
        let keys: Vec<_> = (0..6).map(|i| v(&[if i >= 4 { 5.0 } else { -5.0 }])).collect();
        let body = body_with_keys(&keys);
        let snap = attention_forward(&v(&[1.0]), &keys, &vec![v(&[1.0]); 6]).unwrap();
        let p = select_pairs(&body, 1, PairStrategy::LowestAttentionMass, &snap, 0).unwrap();
        assert_eq!(p, vec![(0, 1)]);
        let p = select_pairs(&body, 2, PairStrategy::LowestAttentionMass, &snap, 0).unwrap();
        assert_eq!(p, vec![(0, 1), (2, 3)]);
    }

    #[test]
    fn greedy_keeps_enough_room() {
        // a naive greedy taking (1,2) first would strand entry 0 and fail
        let order = [1, 3, 0, 2];
        assert_eq!(greedy_disjoint(&order, 4, 2).unwrap(), vec![(0, 1), (2, 3)]);
        let order: Vec<usize> = (0..9).rev().collect();
        let p = greedy_disjoint(&order, 10, 5).unwrap();
        assert_eq!(p, vec![(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]);
        assert!(greedy_disjoint(&order, 10, 6).is_err());
    }

    #[test]
    fn uncompressed_cache_matches_raw_attention() {
        let c = filled(CompressionConfig { algorithm: Algorithm::None, ..cfg(64, 8, 4) }, 20);
        let keys: Vec<_> = c.entries().map(|e| e.key.clone()).collect();
        let values: Vec<_> = c.entries().map(|e| e.value.clone()).collect();
        let q = v(&[0.7, 0.2]);
        let direct = attention_forward(&q, &keys, &values).unwrap().output;
        assert_eq!(c.attend(&q).unwrap(), direct);
    }

    #[test]
    fn count_normalized_readout_is_lossless_for_identical_keys() {
        let mut c = KvCache::<f64>::new(CompressionConfig { algorithm: Algorithm::Mean, ..cfg(4, 2, 1) }, 2, 1).unwrap();
        let k = v(&[0.5, -0.5]);
        let mut full_vals = Vec::new();
        for t in 0..6 {
            let val = v(&[t as f64]);
            full_vals.push(val.clone());
            c.append(k.clone(), val).unwrap();
        }
        let q = v(&[1.0, 2.0]);
        let full = attention_forward(&q, &vec![k.clone(); 6], &full_vals).unwrap().output;
        let snap = c.snapshot(&q).unwrap();
        c.compress_step(&MergeContext { snapshot: &snap, grad_output: None }).unwrap();
        assert_eq!(c.len(), 4);
        assert!((c.attend(&q).unwrap()[0] - full[0]).abs() < 1e-12);
    }

    #[test]
    fn multi_head_shares_pairs() {
        let config = cfg(8, 4, 2);
        let mut m = MultiHeadCache::<f64>::new(config, 3, 2, 2).unwrap();
        for t in 0..12 {
            let x = t as f64;
            let keys = (0..3).map(|h| v(&[(x + h as f64).sin(), x.cos()])).collect();
            let vals = (0..3).map(|h| v(&[x, h as f64])).collect();
            m.append(keys, vals).unwrap();
        }
        assert!(m.needs_compression());
        let q = v(&[0.2, 0.9]);
        let snaps: Vec<_> = m.heads().iter().map(|h| h.snapshot(&q).unwrap()).collect();
        let ctx: Vec<_> = snaps.iter().map(|s| MergeContext { snapshot: s, grad_output: None }).collect();
        let r = m.compress_step(&ctx).unwrap();
        assert_eq!(r.merges, 12);
        for h in m.heads() {
            assert_eq!(h.len(), 8);
            let spans: Vec<_> = h.entries().map(|e| e.origin_span).collect();
            let first: Vec<_> = m.heads()[0].entries().map(|e| e.origin_span).collect();
            assert_eq!(spans, first);
        }
    }
}
