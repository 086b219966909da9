//! Synthetic models, AR(1) token streams and the decode simulator.
//!
//! Every output is a pure function of `(seed, config)`. Each seed feeds
//! independent ChaCha streams for the weights, the hidden states and the
//! surrogate output gradients, so changing one knob never reshuffles the
//! randomness behind another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::attention::attend;
use crate::cache::{Algorithm, CompressionConfig, MergeContext, MultiHeadCache};
use crate::numerics::{cosine, orthonormalize_columns, Matrix, Vector};
use crate::spectral::adjacent_similarity;
use crate::{Error, Result, Scalar};

const STREAM_WEIGHTS: u64 = 0;
const STREAM_TOKENS: u64 = 1;
const STREAM_GRADIENTS: u64 = 2;

pub const DESK_D_MODEL: usize = 64;
pub const DESK_D_HEAD: usize = 16;
pub const DESK_HEADS: usize = 4;
pub const DESK_BUDGET: usize = 256;
pub const DESK_CHUNK: usize = 64;
pub const DESK_SINK: usize = 8;
pub const DEFAULT_BETA: f64 = 2.0;
pub const DEFAULT_RHO: f64 = 0.9;
pub const DEFAULT_LENGTH: usize = 2048;
/// Leading singular value of every projection map.
pub const DEFAULT_GAIN: f64 = 3.0;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn random_orthonormal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix<f64> {
    loop {
        // a Gaussian matrix is full rank with probability one
        if let Ok(q) = orthonormalize_columns(&gaussian_matrix(rng, rows, cols)) {
            return q;
        }
    }
}

/// `sigma_i = gain * (i + 1)^(-beta)` for `i = 0..p`.
pub fn decay_spectrum(p: usize, beta: f64, gain: f64) -> Vec<f64> {
    (0..p).map(|i| gain * ((i + 1) as f64).powf(-beta)).collect()
}

/// Shape and spectrum of a synthetic attention layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSpec {
    pub d_model: usize,
    pub d_head: usize,
    pub heads: usize,
    /// Decay exponent of all projection maps.
    pub beta: f64,
    /// Overrides `beta` for the value maps.
    pub value_beta: Option<f64>,
    pub gain: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            d_model: DESK_D_MODEL,
            d_head: DESK_D_HEAD,
            heads: DESK_HEADS,
            beta: DEFAULT_BETA,
            value_beta: None,
            gain: DEFAULT_GAIN,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_head == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        for (name, x) in [("beta", self.beta), ("value_beta", self.value_decay())] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(Error::InvalidConfig("gain must be positive".into()));
        }
        Ok(())
    }

    pub fn value_decay(&self) -> f64 {
        self.value_beta.unwrap_or(self.beta)
    }
}

/// Per-head projection maps, each `d_model x d_head`, applied as `x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticModel<T> {
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub heads: usize,
    pub spectral_decay: f64,
    pub value_decay: f64,
    pub w_q: Vec<Matrix<T>>,
    pub w_k: Vec<Matrix<T>>,
    pub w_v: Vec<Matrix<T>>,
}

impl<T: Scalar> SyntheticModel<T> {
    /// All key maps side by side, `d_model x (heads * d_k)`; head `h` owns
    /// columns `[h d_k, (h + 1) d_k)`.
    pub fn stacked_keys(&self) -> Matrix<T> {
        stack_columns(&self.w_k)
    }

    pub fn stacked_queries(&self) -> Matrix<T> {
        stack_columns(&self.w_q)
    }

    pub fn stacked_values(&self) -> Matrix<T> {
        stack_columns(&self.w_v)
    }

    /// `(q, k, v)` of head `h` for hidden state `x`.
    pub fn project(&self, h: usize, x: &Vector<T>) -> Result<(Vector<T>, Vector<T>, Vector<T>)> {
        if h >= self.heads {
            return Err(Error::IndexOutOfRange { index: h, len: self.heads });
        }
        Ok((self.w_q[h].vecmat(x)?, self.w_k[h].vecmat(x)?, self.w_v[h].vecmat(x)?))
    }
}

fn stack_columns<T: Scalar>(blocks: &[Matrix<T>]) -> Matrix<T> {
    let rows = blocks[0].rows();
    let w = blocks[0].cols();
    Matrix::from_fn(rows, w * blocks.len(), |i, j| blocks[j / w][(i, j % w)])
}

fn spectral_map(rng: &mut ChaCha8Rng, d_model: usize, d_head: usize, beta: f64, gain: f64) -> Matrix<f64> {
    let p = d_model.min(d_head);
    let u = random_orthonormal(rng, d_model, p);
    let v = random_orthonormal(rng, d_head, p);
    let sigma = decay_spectrum(p, beta, gain);
    // U diag(sigma) V^T
    Matrix::from_fn(d_model, d_head, |i, j| (0..p).map(|r| u[(i, r)] * sigma[r] * v[(j, r)]).sum())
}

fn cast<T: Scalar>(m: &Matrix<f64>) -> Matrix<T> {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| T::lit(m[(i, j)]))
}

/// A model with the default gain and one decay for all maps.
pub fn gen_model<T: Scalar>(seed: u64, d_model: usize, d_head: usize, beta: f64, heads: usize) -> Result<SyntheticModel<T>> {
    gen_model_with(
        seed,
        &ModelSpec {
            d_model,
            d_head,
            heads,
            beta,
            ..Default::default()
        },
    )
}

/// Weights are `U diag(sigma) V^T` with Haar-like orthonormal factors.
/// The factors depend only on `seed` and the shapes, so models that differ
/// only in their decay share singular vectors.
pub fn gen_model_with<T: Scalar>(seed: u64, spec: &ModelSpec) -> Result<SyntheticModel<T>> {
    spec.validate()?;
    let mut rng = rng_for(seed, STREAM_WEIGHTS);
    let (mut w_q, mut w_k, mut w_v) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..spec.heads {
        w_q.push(cast(&spectral_map(&mut rng, spec.d_model, spec.d_head, spec.beta, spec.gain)));
        w_k.push(cast(&spectral_map(&mut rng, spec.d_model, spec.d_head, spec.beta, spec.gain)));
        w_v.push(cast(&spectral_map(&mut rng, spec.d_model, spec.d_head, spec.value_decay(), spec.gain)));
    }
    Ok(SyntheticModel {
        d_model: spec.d_model,
        d_k: spec.d_head,
        d_v: spec.d_head,
        heads: spec.heads,
        spectral_decay: spec.beta,
        value_decay: spec.value_decay(),
        w_q,
        w_k,
        w_v,
    })
}

/// Hidden states `x_{t+1} = rho x_t + sqrt(1 - rho^2) xi_t`, `x_0, xi_t ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStream<T> {
    pub hidden_states: Vec<Vector<T>>,
    pub rho: f64,
    pub seed: u64,
}

impl<T> TokenStream<T> {
    pub fn len(&self) -> usize {
        self.hidden_states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden_states.is_empty()
    }
}

pub fn gen_stream<T: Scalar>(seed: u64, d_model: usize, length: usize, rho: f64) -> Result<TokenStream<T>> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidConfig(format!("rho must lie in [0, 1), got {rho}")));
    }
    if d_model == 0 {
        return Err(Error::InvalidConfig("d_model must be positive".into()));
    }
    let mut rng = rng_for(seed, STREAM_TOKENS);
    let noise = (1.0 - rho * rho).sqrt();
    let mut x: Vec<f64> = (0..d_model).map(|_| rng.sample(StandardNormal)).collect();
    let mut hidden_states = Vec::with_capacity(length);
    for t in 0..length {
        if t > 0 {
            for xi in x.iter_mut() {
                *xi = rho * *xi + noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        hidden_states.push(Vector::from_fn(d_model, |d| T::lit(x[d])));
    }
    Ok(TokenStream { hidden_states, rho, seed })
}

/// Pooled lag-one autocorrelation of the hidden-state coordinates.
pub fn empirical_correlation<T: Scalar>(stream: &TokenStream<T>) -> f64 {
    let xs = &stream.hidden_states;
    if xs.len() < 2 {
        return 0.0;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for w in xs.windows(2) {
        for (a, b) in w[0].iter().zip(w[1].iter()) {
            num += a.as_f64() * b.as_f64();
        }
    }
    for x in xs {
        den += x.norm_sq().as_f64();
    }
    num / den
}

/// Mean cosine between consecutive key projections `x_t W` of head 0.
pub fn mean_adjacent_cosine<T: Scalar>(stream: &TokenStream<T>, w: &Matrix<T>) -> Result<f64> {
    let sims = adjacent_similarity(&stream.hidden_states, w)?;
    Ok(sims.iter().map(|s| s.as_f64()).sum::<f64>() / sims.len() as f64)
}

/// Whether the simulator also runs full attention as a reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RefMode {
    /// Compare against attention over the uncompressed history every step.
    #[default]
    Full,
    /// Skip the reference; error fields are reported as 0.
    Skip,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub cache_len: usize,
    /// `|o_c - o_f| / |o_f|`, averaged over heads.
    pub l2_error: f64,
    /// `1 - cos(o_c, o_f)`, averaged over heads; in `[0, 2]`.
    pub cos_error: f64,
    pub merges: usize,
    pub fallbacks: usize,
}

/// Operation tallies; deterministic, unlike wall time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounters {
    pub appends: usize,
    pub attention_calls: usize,
    pub reference_calls: usize,
    pub compress_steps: usize,
    pub merges: usize,
    pub fallbacks: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationResult {
    pub algorithm: Algorithm,
    pub steps: Vec<StepRecord>,
    pub final_cache_len: usize,
    /// Merges summed over heads.
    pub merge_count: usize,
    pub fallback_rate: f64,
    pub counters: OpCounters,
}

impl SimulationResult {
    pub fn per_step_l2_error(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.l2_error).collect()
    }

    pub fn mean_error(&self) -> f64 {
        mean(&self.per_step_l2_error())
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Full-attention outputs `[step][head]` for a stream.
pub fn reference_outputs<T: Scalar>(model: &SyntheticModel<T>, stream: &TokenStream<T>) -> Result<Vec<Vec<Vector<T>>>> {
    let mut keys: Vec<Vec<Vector<T>>> = vec![Vec::with_capacity(stream.len()); model.heads];
    let mut values = keys.clone();
    let mut out = Vec::with_capacity(stream.len());
    for x in &stream.hidden_states {
        let mut row = Vec::with_capacity(model.heads);
        for h in 0..model.heads {
            let (q, k, v) = model.project(h, x)?;
            keys[h].push(k);
            values[h].push(v);
            row.push(attend(&q, &keys[h], &values[h], None)?.2);
        }
        out.push(row);
    }
    Ok(out)
}

fn head_errors<T: Scalar>(compressed: &Vector<T>, full: &Vector<T>) -> (f64, f64) {
    let diff = (compressed - full).norm().as_f64();
    let base = full.norm().as_f64();
    let l2 = if diff == 0.0 { 0.0 } else { diff / base };
    let cos_err = if diff == 0.0 {
        0.0
    } else {
        match cosine(compressed, full) {
            Ok(c) => (1.0 - c.as_f64()).clamp(0.0, 2.0),
            Err(_) => 1.0,
        }
    };
    (l2, cos_err)
}

/// Decodes `stream` token by token through a compressed multi-head cache.
///
/// Each step projects the hidden state, appends `(k, v)` to every head,
/// compresses once the trigger length is reached (parameterized by the
/// current query's attention) and then attends with the same query.
pub fn simulate_decode<T: Scalar>(
    model: &SyntheticModel<T>,
    stream: &TokenStream<T>,
    config: &CompressionConfig,
    ref_mode: RefMode,
) -> Result<SimulationResult> {
    let reference = match ref_mode {
        RefMode::Full => Some(reference_outputs(model, stream)?),
        RefMode::Skip => None,
    };
    simulate_against(model, stream, config, reference.as_deref())
}

/// [`simulate_decode`] with precomputed reference outputs, so several
/// algorithms can share one reference pass.
pub fn simulate_against<T: Scalar>(
    model: &SyntheticModel<T>,
    stream: &TokenStream<T>,
    config: &CompressionConfig,
    reference: Option<&[Vec<Vector<T>>]>,
) -> Result<SimulationResult> {
    if let Some(r) = reference {
        if r.len() != stream.len() {
            return Err(Error::DimensionMismatch { expected: stream.len(), found: r.len() });
        }
    }
    let mut cache = MultiHeadCache::new(*config, model.heads, model.d_k, model.d_v)?;
    let mut grad_rng = rng_for(stream.seed, STREAM_GRADIENTS);
    let mut counters = OpCounters::default();
    let mut steps = Vec::with_capacity(stream.len());

    for (t, x) in stream.hidden_states.iter().enumerate() {
        let mut queries = Vec::with_capacity(model.heads);
        let mut keys = Vec::with_capacity(model.heads);
        let mut vals = Vec::with_capacity(model.heads);
        for h in 0..model.heads {
            let (q, k, v) = model.project(h, x)?;
            queries.push(q);
            keys.push(k);
            vals.push(v);
        }
        cache.append(keys, vals)?;
        counters.appends += 1;

        let (mut merges, mut fallbacks) = (0, 0);
        if cache.needs_compression() {
            let snaps = cache
                .heads()
                .iter()
                .zip(&queries)
                .map(|(c, q)| c.snapshot(q))
                .collect::<Result<Vec<_>>>()?;
            let grads: Vec<Option<Vector<T>>> = (0..model.heads)
                .map(|_| {
                    config.algorithm.needs_output_gradient().then(|| {
                        Vector::from_fn(model.d_v, |_| T::lit(grad_rng.sample(StandardNormal)))
                    })
                })
                .collect();
            let ctx: Vec<MergeContext<'_, T>> = snaps
                .iter()
                .zip(&grads)
                .map(|(s, g)| MergeContext { snapshot: s, grad_output: g.as_ref() })
                .collect();
            let report = cache.compress_step(&ctx)?;
            counters.attention_calls += model.heads;
            counters.compress_steps += 1;
            merges = report.merges;
            fallbacks = report.fallbacks;
        }

        let (mut l2, mut cos_err) = (0.0, 0.0);
        for (h, q) in queries.iter().enumerate() {
            let out = cache.heads()[h].attend(q)?;
            counters.attention_calls += 1;
            if let Some(r) = reference {
                let (a, b) = head_errors(&out, &r[t][h]);
                l2 += a;
                cos_err += b;
                counters.reference_calls += 1;
            }
        }
        counters.merges += merges;
        counters.fallbacks += fallbacks;
        steps.push(StepRecord {
            step: t,
            cache_len: cache.len(),
            l2_error: l2 / model.heads as f64,
            cos_error: cos_err / model.heads as f64,
            merges,
            fallbacks,
        });
    }

    Ok(SimulationResult {
        algorithm: config.algorithm,
        final_cache_len: cache.len(),
        merge_count: counters.merges,
        fallback_rate: if counters.merges == 0 {
            0.0
        } else {
            counters.fallbacks as f64 / counters.merges as f64
        },
        steps,
        counters,
    })
}

/// One table row per algorithm.
#[derive(Clone, Debug, PartialEq)]
pub struct AlgorithmSummary {
    pub algorithm: Algorithm,
    /// Mean over seeds of each run's mean per-step error.
    pub mean_error: f64,
    /// Median and 95th percentile of the pooled per-step errors.
    pub median_error: f64,
    pub p95_error: f64,
    pub fallback_rate: f64,
    pub final_cache_len: usize,
    pub merges: usize,
    /// Per-seed mean errors, in seed order.
    pub seed_means: Vec<f64>,
}

/// Nearest-rank percentile of an unsorted sample; 0 for an empty one.
pub fn percentile(xs: &[f64], p: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * s.len() as f64).ceil() as usize;
    s[rank.clamp(1, s.len()) - 1]
}

fn summarize(algorithm: Algorithm, runs: &[&SimulationResult]) -> AlgorithmSummary {
    let pooled: Vec<f64> = runs.iter().flat_map(|r| r.per_step_l2_error()).collect();
    let merges: usize = runs.iter().map(|r| r.merge_count).sum();
    let fallbacks: usize = runs.iter().map(|r| r.counters.fallbacks).sum();
    let seed_means: Vec<f64> = runs.iter().map(|r| r.mean_error()).collect();
    AlgorithmSummary {
        algorithm,
        mean_error: mean(&seed_means),
        median_error: percentile(&pooled, 50.0),
        p95_error: percentile(&pooled, 95.0),
        fallback_rate: if merges == 0 { 0.0 } else { fallbacks as f64 / merges as f64 },
        final_cache_len: runs.last().map_or(0, |r| r.final_cache_len),
        merges,
        seed_means,
    }
}

/// Runs every algorithm on one model and stream against a shared reference.
pub fn compare_algorithms<T: Scalar>(
    model: &SyntheticModel<T>,
    stream: &TokenStream<T>,
    base_config: &CompressionConfig,
    algorithms: &[Algorithm],
) -> Result<Vec<AlgorithmSummary>> {
    let reference = reference_outputs(model, stream)?;
    algorithms
        .iter()
        .map(|&a| {
            let cfg = CompressionConfig { algorithm: a, ..*base_config };
            let r = simulate_against(model, stream, &cfg, Some(&reference))?;
            Ok(summarize(a, &[&r]))
        })
        .collect()
}

/// Everything that determines a Monte-Carlo experiment besides the seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub rho: f64,
    pub length: usize,
    pub compression: CompressionConfig,
}

impl Default for ExperimentConfig {
    /// The desk-scale setting: 64-dim model, 4 heads of 16, budget 256,
    /// chunk 64, sink 8, beta 2, rho 0.9, 2048 tokens.
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            rho: DEFAULT_RHO,
            length: DEFAULT_LENGTH,
            compression: CompressionConfig {
                budget: DESK_BUDGET,
                chunk_size: DESK_CHUNK,
                sink_len: DESK_SINK,
                ..Default::default()
            },
        }
    }
}

/// Per-seed runs for each algorithm, in seed order.
#[derive(Clone, Debug)]
pub struct SeedRuns {
    pub seed: u64,
    pub runs: Vec<SimulationResult>,
}

/// Simulates every algorithm on `seeds`; seeds run in parallel and share
/// nothing, so the result does not depend on the thread count.
pub fn run_seeds(
    config: &ExperimentConfig,
    algorithms: &[Algorithm],
    seeds: &[u64],
    ref_mode: RefMode,
) -> Result<Vec<SeedRuns>> {
    config.model.validate()?;
    config.compression.validate()?;
    seeds
        .par_iter()
        .map(|&seed| {
            let model = gen_model_with::<f64>(seed, &config.model)?;
            let stream = gen_stream::<f64>(seed, config.model.d_model, config.length, config.rho)?;
            let reference = match ref_mode {
                RefMode::Full => Some(reference_outputs(&model, &stream)?),
                RefMode::Skip => None,
            };
            let runs = algorithms
                .iter()
                .map(|&a| {
                    let cfg = CompressionConfig { algorithm: a, ..config.compression };
                    simulate_against(&model, &stream, &cfg, reference.as_deref())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SeedRuns { seed, runs })
        })
        .collect()
}

/// Aggregates [`run_seeds`] output into one row per algorithm.
pub fn summarize_seeds(algorithms: &[Algorithm], runs: &[SeedRuns]) -> Vec<AlgorithmSummary> {
    algorithms
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let per: Vec<&SimulationResult> = runs.iter().map(|s| &s.runs[i]).collect();
            summarize(a, &per)
        })
        .collect()
}

/// Multi-seed comparison table.
pub fn compare_seeds(config: &ExperimentConfig, algorithms: &[Algorithm], seeds: &[u64]) -> Result<Vec<AlgorithmSummary>> {
    Ok(summarize_seeds(algorithms, &run_seeds(config, algorithms, seeds, RefMode::Full)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::PairStrategy;
    use crate::numerics::svd;
    use crate::spectral::{concentration_of, spectral_profile};

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            model: ModelSpec { d_model: 16, d_head: 4, heads: 2, ..Default::default() },
            rho: 0.9,
            length: 60,
            compression: CompressionConfig {
                budget: 24,
                chunk_size: 8,
                sink_len: 4,
                ..Default::default()
            },
        }
    }

    #[test]
    fn flat_spectrum_has_full_participation() {
        let m = gen_model::<f64>(1, 32, 8, 0.0, 1).unwrap();
        let p = spectral_profile(&m.w_k[0]).unwrap();
        let c = concentration_of(&p.eigenvalues, 4).unwrap();
        assert!((c.participation_ratio - 8.0).abs() < 1e-9);
    }

    #[test]
    fn steep_spectrum_concentrates() {
        let m = gen_model::<f64>(1, 32, 8, 4.0, 1).unwrap();
        let p = spectral_profile(&m.w_k[0]).unwrap();
        assert!(concentration_of(&p.eigenvalues, 4).unwrap().topk_energy > 0.95);
    }

    #[test]
    fn realized_singular_values_match_requested_decay() {
        let m = gen_model::<f64>(9, 64, 16, 2.0, 2).unwrap();
        for w in m.w_k.iter().chain(&m.w_q) {
            let s = svd(w).unwrap().sigma;
            for (i, want) in decay_spectrum(16, 2.0, DEFAULT_GAIN).into_iter().enumerate() {
                assert!((s[i] - want).abs() < 1e-10 * want.max(1.0));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_model::<f64>(3, 16, 4, 2.0, 2).unwrap();
        let b = gen_model::<f64>(3, 16, 4, 2.0, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_model::<f64>(4, 16, 4, 2.0, 2).unwrap());
        assert_eq!(gen_stream::<f64>(3, 8, 10, 0.5).unwrap(), gen_stream::<f64>(3, 8, 10, 0.5).unwrap());
    }

    #[test]
    fn decay_changes_only_the_spectrum() {
        let a = gen_model::<f64>(3, 16, 4, 1.0, 1).unwrap();
        let b = gen_model::<f64>(3, 16, 4, 3.0, 1).unwrap();
        let (sa, sb) = (svd(&a.w_k[0]).unwrap(), svd(&b.w_k[0]).unwrap());
        // leading left singular vectors coincide up to sign
        assert!((sa.u.column(0).dot(&sb.u.column(0)).abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn stream_correlation_matches_rho() {
        let s = gen_stream::<f64>(7, 16, 2000, 0.9).unwrap();
        assert!((empirical_correlation(&s) - 0.9).abs() < 0.05);
        assert!(gen_stream::<f64>(7, 16, 10, 1.0).is_err());
    }

    #[test]
    fn stacked_keys_follow_head_slicing() {
        let m = gen_model::<f64>(2, 8, 3, 1.0, 2).unwrap();
        let s = m.stacked_keys();
        assert_eq!(s.shape(), (8, 6));
        assert_eq!(s.column_block(3, 3).unwrap(), m.w_k[1]);
    }

    #[test]
    fn disabled_compression_is_exact() {
        let cfg = small();
        let model = gen_model_with::<f64>(5, &cfg.model).unwrap();
        let stream = gen_stream::<f64>(5, 16, 60, 0.9).unwrap();
        let c = CompressionConfig { algorithm: Algorithm::None, ..cfg.compression };
        let r = simulate_decode(&model, &stream, &c, RefMode::Full).unwrap();
        assert!(r.steps.iter().all(|s| s.l2_error == 0.0 && s.cos_error == 0.0));
        assert_eq!(r.final_cache_len, 60);
        assert_eq!(r.merge_count, 0);
    }

    #[test]
    fn single_trigger_fires_once() {
        let mut cfg = small();
        cfg.length = cfg.compression.trigger_len() + 1;
        let model = gen_model_with::<f64>(5, &cfg.model).unwrap();
        let stream = gen_stream::<f64>(5, 16, cfg.length, 0.9).unwrap();
        let r = simulate_decode(&model, &stream, &cfg.compression, RefMode::Full).unwrap();
        assert_eq!(r.counters.compress_steps, 1);
        assert_eq!(r.merge_count, cfg.compression.chunk_size * cfg.model.heads);
        assert_eq!(r.final_cache_len, cfg.compression.budget + 1);
    }

    #[test]
    fn cache_never_exceeds_trigger() {
        for a in [Algorithm::KvSlimmer, Algorithm::AsymKv, Algorithm::Mean] {
            for p in PairStrategy::ALL {
                let mut cfg = small();
                cfg.compression.algorithm = a;
                cfg.compression.pair_strategy = p;
                let model = gen_model_with::<f64>(1, &cfg.model).unwrap();
                let stream = gen_stream::<f64>(1, 16, 60, 0.9).unwrap();
                let r = simulate_decode(&model, &stream, &cfg.compression, RefMode::Full).unwrap();
                assert!(r.steps.iter().all(|s| s.cache_len < cfg.compression.trigger_len()));
                assert!(r.steps.iter().all(|s| s.l2_error.is_finite() && s.l2_error >= 0.0));
                assert!(r.steps.iter().all(|s| (0.0..=2.0).contains(&s.cos_error)));
                assert!(r.final_cache_len <= cfg.compression.budget + cfg.compression.chunk_size);
            }
        }
    }

    #[test]
    fn skip_mode_reports_zero_error() {
        let cfg = small();
        let model = gen_model_with::<f64>(5, &cfg.model).unwrap();
        let stream = gen_stream::<f64>(5, 16, 60, 0.9).unwrap();
        let r = simulate_decode(&model, &stream, &cfg.compression, RefMode::Skip).unwrap();
        assert_eq!(r.counters.reference_calls, 0);
        assert_eq!(r.mean_error(), 0.0);
    }

    #[test]
    fn seeded_tables_are_reproducible() {
        let cfg = small();
        let algos = [Algorithm::Mean, Algorithm::KvSlimmer];
        let a = compare_seeds(&cfg, &algos, &[1, 2, 3]).unwrap();
        let b = compare_seeds(&cfg, &algos, &[1, 2, 3]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        let none = compare_seeds(
            &ExperimentConfig { compression: CompressionConfig { budget: 100, ..cfg.compression }, ..cfg },
            &[Algorithm::None],
            &[1, 2],
        )
        .unwrap();
        assert_eq!((none[0].mean_error, none[0].p95_error), (0.0, 0.0));
    }

    #[test]
    fn percentile_nearest_rank() {
        assert_eq!(percentile(&[], 50.0), 0.0);
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0), 2.0);
        assert_eq!(percentile(&(1..=100).map(f64::from).collect::<Vec<_>>(), 95.0), 95.0);
    }
}
