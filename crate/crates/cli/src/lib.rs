//! The `kvmerge` command line.
//!
//! Exit codes: 0 success, 1 verification (or run) failure, 2 usage error,
//! 3 I/O or file-format error.

pub mod report;
pub mod tensor_file;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use kvmerge::cache::{Algorithm, CompressionConfig, PairStrategy, Readout};
use kvmerge::harness::{
    self, gen_model_with, gen_stream, run_seeds, summarize_seeds, ExperimentConfig, ModelSpec, RefMode,
    SeedRuns,
};
use kvmerge::numerics::{Matrix, Vector};
use kvmerge::spectral::{concentration_stats, cumulative_energy, mean_mode_contributions, spectral_profile};
use kvmerge::verify::{self, Mutation, VerifyConfig};
use thiserror::Error;

use report::{ReportRow, SpectrumRow, Summary, REPORT_HEADER, SPECTRUM_HEADER};
use tensor_file::{DType, TensorError, TensorFile};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Tensor { path: PathBuf, source: TensorError },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Core(kvmerge::Error),
    #[error("{failed} of {total} checks failed")]
    VerifyFailed { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(kvmerge::Error::InvalidConfig(_)) => EXIT_USAGE,
            CliError::Tensor { .. } | CliError::Csv { .. } | CliError::Io { .. } => EXIT_IO,
            CliError::Core(_) | CliError::VerifyFailed { .. } => EXIT_FAILURE,
        }
    }
}

impl From<kvmerge::Error> for CliError {
    fn from(e: kvmerge::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "kvmerge", version, about = "Asymmetric KV-cache merging: verification, spectrum analysis and compression simulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the self-check suite against brute-force oracles; exit 0 iff every check passes.
    Verify(VerifyArgs),
    /// Per-head eigenvalue spectrum of a projection matrix stored as a tensor file.
    ///
    /// A d_model x (H*D) matrix is sliced into heads by columns: head h owns
    /// columns [h*D, (h+1)*D).
    Spectrum(SpectrumArgs),
    /// Simulate chunked cache compression on synthetic decodes.
    Simulate(SimulateArgs),
    /// Simulate several algorithms on shared models and streams.
    Compare(CompareArgs),
    /// Write a synthetic projection matrix (all heads side by side) as a tensor file.
    GenWeights(GenWeightsArgs),
    /// Write a synthetic AR(1) hidden-state sequence (length x d_model) as a tensor file.
    GenStates(GenStatesArgs),
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Seeds per (size, dim) grid cell.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Comma-separated sequence lengths.
    #[arg(long, default_value = "2,4,8,16", value_delimiter = ',')]
    pub sizes: Vec<usize>,
    /// Comma-separated head dimensions.
    #[arg(long, default_value = "2,4,8", value_delimiter = ',')]
    pub dims: Vec<usize>,
    /// Random instances for the solver and weight checks.
    #[arg(long, default_value_t = 100)]
    pub solver_instances: u64,
    /// Random (x, W) pairs for the spectral identity.
    #[arg(long, default_value_t = 1000)]
    pub spectral_pairs: u64,
    /// Seeds per angle in the alignment sweep.
    #[arg(long, default_value_t = 100)]
    pub sweep_seeds: u64,
    /// Corrupt one formula on the analytic side; the suite must then fail.
    #[arg(long, hide = true)]
    pub inject_mutation: Option<String>,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    /// Tensor file holding a 2-D d_model x (H*D) matrix.
    #[arg(long)]
    pub weights: PathBuf,
    /// Number of head slices H.
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    /// Head width D; defaults to columns / H, and H*D must equal the column count.
    #[arg(long)]
    pub head_dim: Option<usize>,
    /// Optional tensor file of hidden states (T x d_model) for per-mode contributions.
    #[arg(long)]
    pub states: Option<PathBuf>,
    /// k for the top-k energy fraction.
    #[arg(long, default_value_t = kvmerge::spectral::DEFAULT_TOP_K)]
    pub top_k: usize,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReadoutArg {
    CountNormalized,
    Raw,
}

impl From<ReadoutArg> for Readout {
    fn from(r: ReadoutArg) -> Self {
        match r {
            ReadoutArg::CountNormalized => Readout::CountNormalized,
            ReadoutArg::Raw => Readout::Raw,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DTypeArg {
    F32,
    F64,
}

/// Flags shared by `simulate` and `compare`.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// Desk-scale preset: budget 256, chunk 64, sink 8 (explicit flags still win).
    #[arg(long)]
    pub desk: bool,
    /// Cache length restored by each compression step [default: 2048].
    #[arg(long)]
    pub budget: Option<usize>,
    /// Growth beyond the budget that triggers compression [default: 512].
    #[arg(long)]
    pub chunk_size: Option<usize>,
    /// Leading tokens that are never merged [default: 32].
    #[arg(long)]
    pub sink: Option<usize>,
    /// highest_key_similarity, lowest_attention_mass or oldest_first.
    #[arg(long, default_value = "lowest_attention_mass")]
    pub pair_strategy: String,
    #[arg(long, value_enum, default_value = "count-normalized")]
    pub readout: ReadoutArg,
    /// Singular-value decay exponent of the synthetic projections.
    #[arg(long, default_value_t = harness::DEFAULT_BETA)]
    pub beta: f64,
    /// Separate decay for the value maps (defaults to --beta).
    #[arg(long)]
    pub value_beta: Option<f64>,
    /// AR(1) correlation of the hidden states, in [0, 1).
    #[arg(long, default_value_t = harness::DEFAULT_RHO)]
    pub rho: f64,
    /// Decode steps per run.
    #[arg(long, default_value_t = harness::DEFAULT_LENGTH)]
    pub length: usize,
    /// Number of seeds, starting at --first-seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    #[arg(long, default_value_t = harness::DESK_D_MODEL)]
    pub d_model: usize,
    #[arg(long, default_value_t = harness::DESK_D_HEAD)]
    pub head_dim: usize,
    #[arg(long, default_value_t = harness::DESK_HEADS)]
    pub heads: usize,
    /// Leading singular value of every projection.
    #[arg(long, default_value_t = harness::DEFAULT_GAIN)]
    pub gain: f64,
    /// Per-step CSV report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON summary file; the summary is always printed to stdout as well.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// kvslimmer, asymkv, mean or none.
    #[arg(long, default_value = "kvslimmer")]
    pub algo: String,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Comma-separated algorithms.
    #[arg(long, default_value = "mean,asymkv,kvslimmer")]
    pub algos: String,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum WhichMap {
    Key,
    Query,
    Value,
}

#[derive(Debug, Args)]
pub struct GenWeightsArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = harness::DEFAULT_BETA)]
    pub beta: f64,
    #[arg(long, default_value_t = harness::DESK_D_MODEL)]
    pub d_model: usize,
    #[arg(long, default_value_t = harness::DESK_D_HEAD)]
    pub head_dim: usize,
    #[arg(long, default_value_t = harness::DESK_HEADS)]
    pub heads: usize,
    #[arg(long, default_value_t = harness::DEFAULT_GAIN)]
    pub gain: f64,
    #[arg(long, value_enum, default_value = "key")]
    pub which: WhichMap,
    #[arg(long, value_enum, default_value = "f64")]
    pub dtype: DTypeArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenStatesArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = harness::DEFAULT_RHO)]
    pub rho: f64,
    #[arg(long, default_value_t = harness::DEFAULT_LENGTH)]
    pub length: usize,
    #[arg(long, default_value_t = harness::DESK_D_MODEL)]
    pub d_model: usize,
    #[arg(long, value_enum, default_value = "f64")]
    pub dtype: DTypeArg,
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs a parsed command, writing human-readable output to `out` and
/// diagnostics to `err`.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Verify(a) => cmd_verify(&a, out),
        Command::Spectrum(a) => cmd_spectrum(&a, out, err),
        Command::Simulate(a) => cmd_simulate(&a, out, err),
        Command::Compare(a) => cmd_compare(&a, out, err),
        Command::GenWeights(a) => cmd_gen_weights(&a),
        Command::GenStates(a) => cmd_gen_states(&a),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn write_out(out: &mut dyn Write, s: &str) -> CliResult<()> {
    out.write_all(s.as_bytes()).map_err(|source| CliError::Io { path: PathBuf::from("<stdout>"), source })
}

pub fn verify_config(a: &VerifyArgs) -> CliResult<VerifyConfig> {
    let mutation = a
        .inject_mutation
        .as_deref()
        .map(|m| m.parse::<Mutation>().map_err(|e| usage(format!("--inject-mutation: {e}"))))
        .transpose()?;
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    if a.sizes.is_empty() || a.sizes.iter().any(|&n| n < 2) {
        return Err(usage("--sizes must list lengths of at least 2"));
    }
    if a.dims.is_empty() || a.dims.iter().any(|&d| d < 2) {
        return Err(usage("--dims must list dimensions of at least 2"));
    }
    for (flag, v) in [
        ("--solver-instances", a.solver_instances),
        ("--spectral-pairs", a.spectral_pairs),
        ("--sweep-seeds", a.sweep_seeds),
    ] {
        if v == 0 {
            return Err(usage(format!("{flag} must be at least 1")));
        }
    }
    Ok(VerifyConfig {
        seeds: a.seeds,
        sizes: a.sizes.clone(),
        dims: a.dims.clone(),
        solver_instances: a.solver_instances,
        spectral_pairs: a.spectral_pairs,
        sweep_seeds: a.sweep_seeds,
        mutation,
    })
}

pub fn cmd_verify(a: &VerifyArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = verify_config(a)?;
    let results = verify::run_suite(&cfg)?;
    let mut text = String::new();
    for r in &results {
        text.push_str(&format!("{r}\n"));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        text.push_str(&format!("all {} checks passed\n", results.len()));
    }
    write_out(out, &text)?;
    if failed > 0 {
        return Err(CliError::VerifyFailed { failed, total: results.len() });
    }
    Ok(())
}

fn read_tensor(path: &Path) -> CliResult<TensorFile> {
    TensorFile::read(path).map_err(|source| CliError::Tensor { path: path.to_path_buf(), source })
}

fn read_matrix(path: &Path) -> CliResult<Matrix<f64>> {
    read_tensor(path)?
        .to_matrix()
        .map_err(|source| CliError::Tensor { path: path.to_path_buf(), source })
}

/// Column slices `[h D, (h + 1) D)` of `w`.
pub fn head_slices(w: &Matrix<f64>, heads: usize, head_dim: Option<usize>) -> CliResult<Vec<Matrix<f64>>> {
    if heads == 0 {
        return Err(usage("--heads must be at least 1"));
    }
    let cols = w.cols();
    let d = match head_dim {
        Some(0) => return Err(usage("--head-dim must be at least 1")),
        Some(d) => d,
        None if cols % heads == 0 => cols / heads,
        None => {
            return Err(usage(format!(
                "dimension mismatch: {cols} columns do not split into --heads {heads}"
            )))
        }
    };
    if heads * d != cols {
        return Err(usage(format!(
            "dimension mismatch: --heads {heads} x --head-dim {d} = {} but the matrix has {cols} columns",
            heads * d
        )));
    }
    (0..heads).map(|h| Ok(w.column_block(h * d, d)?)).collect()
}

/// Spectrum rows for every head; `states` adds mean mode contributions.
pub fn spectrum_rows(
    slices: &[Matrix<f64>],
    states: Option<&[Vector<f64>]>,
    top_k: usize,
    err: &mut dyn Write,
) -> CliResult<Vec<SpectrumRow>> {
    let mut rows = Vec::new();
    for (h, w) in slices.iter().enumerate() {
        let p = spectral_profile(w)?;
        let cum = cumulative_energy(&p.eigenvalues);
        let contrib = states.map(|xs| mean_mode_contributions(xs, &p)).transpose()?;
        match concentration_stats(&p, top_k) {
            Ok(c) => {
                let _ = write!(
                    err,
                    "head {h}: modes={} participation_ratio={:.6} top{top_k}_energy={:.6}",
                    p.modes(),
                    c.participation_ratio,
                    c.topk_energy
                );
            }
            Err(_) => {
                let _ = write!(err, "head {h}: modes={} zero spectrum", p.modes());
            }
        }
        match &contrib {
            Some(c) => {
                let _ = writeln!(err, " mean_adjacent_cosine={:.6}", c.sum());
            }
            None => {
                let _ = writeln!(err);
            }
        }
        for i in 0..p.modes() {
            rows.push(SpectrumRow {
                head: h,
                mode_index: i,
                lambda: p.eigenvalues[i],
                cumulative_energy: cum[i],
                c_i: contrib.as_ref().map(|c| c[i]),
            });
        }
    }
    Ok(rows)
}

pub fn cmd_spectrum(a: &SpectrumArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let w = read_matrix(&a.weights)?;
    let slices = head_slices(&w, a.heads, a.head_dim)?;
    let states = match &a.states {
        Some(path) => {
            let m = read_matrix(path)?;
            if m.cols() != w.rows() {
                return Err(usage(format!(
                    "dimension mismatch: --states rows have {} features but --weights has {} rows",
                    m.cols(),
                    w.rows()
                )));
            }
            if m.rows() < 2 {
                return Err(usage("--states needs at least 2 hidden states"));
            }
            Some((0..m.rows()).map(|t| m.row(t)).collect::<Vec<_>>())
        }
        None => None,
    };
    let rows = spectrum_rows(&slices, states.as_deref(), a.top_k, err)?;
    emit_csv(a.out.as_deref(), &SPECTRUM_HEADER, &rows, out)
}

fn emit_csv<S: serde::Serialize>(path: Option<&Path>, header: &[&str], rows: &[S], out: &mut dyn Write) -> CliResult<()> {
    match path {
        Some(p) => report::write_csv_file(p, header, rows).map_err(|source| CliError::Csv { path: p.to_path_buf(), source }),
        None => report::write_csv(out, header, rows).map_err(|source| CliError::Csv { path: PathBuf::from("<stdout>"), source }),
    }
}

fn parse_algorithms(flag: &str, s: &str) -> CliResult<Vec<Algorithm>> {
    let algos = s
        .split(',')
        .map(|p| {
            p.trim().parse::<Algorithm>().map_err(|_| {
                usage(format!(
                    "{flag}: unknown algorithm `{}` (expected kvslimmer, asymkv, mean or none)",
                    p.trim()
                ))
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    for (i, a) in algos.iter().enumerate() {
        if algos[..i].contains(a) {
            return Err(usage(format!("{flag}: `{a}` listed twice")));
        }
    }
    Ok(algos)
}

/// Builds and checks an experiment from flags; messages name the flag at fault.
pub fn experiment_config(r: &RunArgs, algorithms: &[Algorithm]) -> CliResult<ExperimentConfig> {
    let (db, dc, ds) = if r.desk {
        (harness::DESK_BUDGET, harness::DESK_CHUNK, harness::DESK_SINK)
    } else {
        (
            kvmerge::cache::DEFAULT_BUDGET,
            kvmerge::cache::DEFAULT_CHUNK_SIZE,
            kvmerge::cache::DEFAULT_SINK_LEN,
        )
    };
    let budget = r.budget.unwrap_or(db);
    let chunk = r.chunk_size.unwrap_or(dc);
    let sink = r.sink.unwrap_or(ds);
    if budget == 0 {
        return Err(usage("--budget must be at least 1"));
    }
    if chunk == 0 {
        return Err(usage("--chunk-size must be at least 1"));
    }
    if sink >= budget {
        return Err(usage(format!("--sink ({sink}) must be smaller than --budget ({budget})")));
    }
    if algorithms.iter().any(|&a| a != Algorithm::None) && chunk > budget - sink {
        return Err(usage(format!(
            "--chunk-size ({chunk}) must not exceed --budget minus --sink ({}), or a compression step cannot find enough pairs",
            budget - sink
        )));
    }
    let pair_strategy = r.pair_strategy.parse::<PairStrategy>().map_err(|_| {
        usage(format!(
            "--pair-strategy: unknown strategy `{}` (expected highest_key_similarity, lowest_attention_mass or oldest_first)",
            r.pair_strategy
        ))
    })?;
    if !(r.beta >= 0.0 && r.beta.is_finite()) {
        return Err(usage("--beta must be finite and non-negative"));
    }
    if let Some(vb) = r.value_beta {
        if !(vb >= 0.0 && vb.is_finite()) {
            return Err(usage("--value-beta must be finite and non-negative"));
        }
    }
    if !(0.0..1.0).contains(&r.rho) {
        return Err(usage("--rho must lie in [0, 1)"));
    }
    if r.length == 0 {
        return Err(usage("--length must be at least 1"));
    }
    if r.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    if r.first_seed.checked_add(r.seeds).is_none() {
        return Err(usage("--first-seed + --seeds overflows"));
    }
    for (flag, v) in [("--d-model", r.d_model), ("--head-dim", r.head_dim), ("--heads", r.heads)] {
        if v == 0 {
            return Err(usage(format!("{flag} must be at least 1")));
        }
    }
    if !(r.gain > 0.0 && r.gain.is_finite()) {
        return Err(usage("--gain must be positive"));
    }
    Ok(ExperimentConfig {
        model: ModelSpec {
            d_model: r.d_model,
            d_head: r.head_dim,
            heads: r.heads,
            beta: r.beta,
            value_beta: r.value_beta,
            gain: r.gain,
        },
        rho: r.rho,
        length: r.length,
        compression: CompressionConfig {
            budget,
            chunk_size: chunk,
            sink_len: sink,
            algorithm: algorithms.first().copied().unwrap_or(Algorithm::KvSlimmer),
            pair_strategy,
            readout: r.readout.into(),
            ..Default::default()
        },
    })
}

/// Outcome of `simulate` / `compare`.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub rows: Vec<ReportRow>,
    pub summaries: Vec<Summary>,
    /// Mean error per algorithm and seed, `[algorithm][seed]`.
    pub seed_means: Vec<Vec<f64>>,
}

pub fn run_experiment(config: &ExperimentConfig, algorithms: &[Algorithm], seeds: &[u64]) -> CliResult<RunOutput> {
    let runs: Vec<SeedRuns> = run_seeds(config, algorithms, seeds, RefMode::Full)?;
    let table = summarize_seeds(algorithms, &runs);
    let mut rows = Vec::new();
    for s in &runs {
        for r in &s.runs {
            rows.extend(ReportRow::from_run(s.seed, r));
        }
    }
    Ok(RunOutput {
        rows,
        summaries: table.iter().map(Summary::from).collect(),
        seed_means: table.into_iter().map(|s| s.seed_means).collect(),
    })
}

fn emit_run(r: &RunArgs, result: &RunOutput, out: &mut dyn Write) -> CliResult<()> {
    if let Some(p) = &r.out {
        report::write_csv_file(p, &REPORT_HEADER, &result.rows)
            .map_err(|source| CliError::Csv { path: p.clone(), source })?;
    }
    let json = report::summaries_json(&result.summaries);
    if let Some(p) = &r.json {
        std::fs::write(p, format!("{json}\n")).map_err(|source| CliError::Io { path: p.clone(), source })?;
    }
    write_out(out, &format!("{json}\n"))
}

fn seed_list(r: &RunArgs) -> Vec<u64> {
    (r.first_seed..r.first_seed + r.seeds).collect()
}

pub fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let algos = parse_algorithms("--algo", &a.algo)?;
    if algos.len() != 1 {
        return Err(usage("--algo takes a single algorithm; use `compare` for several"));
    }
    let config = experiment_config(&a.run, &algos)?;
    let result = run_experiment(&config, &algos, &seed_list(&a.run))?;
    let s = &result.summaries[0];
    let _ = writeln!(
        err,
        "{}: mean_error={:.6e} p95_error={:.6e} final_cache_len={} fallback_rate={:.4}",
        s.algo, s.mean_error, s.p95_error, s.final_cache_len, s.fallback_rate
    );
    emit_run(&a.run, &result, out)
}

pub fn cmd_compare(a: &CompareArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let algos = parse_algorithms("--algos", &a.algos)?;
    let config = experiment_config(&a.run, &algos)?;
    let result = run_experiment(&config, &algos, &seed_list(&a.run))?;
    let _ = writeln!(err, "{:<10} {:>13} {:>13} {:>9} {:>9}", "algo", "mean_error", "p95_error", "cache_len", "fallback");
    for s in &result.summaries {
        let _ = writeln!(
            err,
            "{:<10} {:>13.6e} {:>13.6e} {:>9} {:>9.4}",
            s.algo, s.mean_error, s.p95_error, s.final_cache_len, s.fallback_rate
        );
    }
    let mut order: Vec<&Summary> = result.summaries.iter().collect();
    order.sort_by(|x, y| x.mean_error.total_cmp(&y.mean_error));
    let names: Vec<&str> = order.iter().map(|s| s.algo.as_str()).collect();
    let _ = writeln!(err, "ordering by mean_error: {}", names.join(" <= "));
    emit_run(&a.run, &result, out)
}

fn check_spec(spec: &ModelSpec) -> CliResult<()> {
    spec.validate().map_err(|e| usage(e.to_string()))
}

fn write_tensor(path: &Path, m: &Matrix<f64>, dtype: DTypeArg) -> CliResult<()> {
    let dt = match dtype {
        DTypeArg::F32 => DType::F32,
        DTypeArg::F64 => DType::F64,
    };
    TensorFile::from_matrix(m, dt)
        .write(path)
        .map_err(|source| CliError::Tensor { path: path.to_path_buf(), source })
}

pub fn cmd_gen_weights(a: &GenWeightsArgs) -> CliResult<()> {
    let spec = ModelSpec {
        d_model: a.d_model,
        d_head: a.head_dim,
        heads: a.heads,
        beta: a.beta,
        value_beta: None,
        gain: a.gain,
    };
    check_spec(&spec)?;
    let model = gen_model_with::<f64>(a.seed, &spec)?;
    let w = match a.which {
        WhichMap::Key => model.stacked_keys(),
        WhichMap::Query => model.stacked_queries(),
        WhichMap::Value => model.stacked_values(),
    };
    write_tensor(&a.out, &w, a.dtype)
}

pub fn cmd_gen_states(a: &GenStatesArgs) -> CliResult<()> {
    if a.d_model == 0 || a.length == 0 {
        return Err(usage("--d-model and --length must be at least 1"));
    }
    if !(0.0..1.0).contains(&a.rho) {
        return Err(usage("--rho must lie in [0, 1)"));
    }
    let s = gen_stream::<f64>(a.seed, a.d_model, a.length, a.rho)?;
    let m = Matrix::from_fn(a.length, a.d_model, |t, j| s.hidden_states[t][j]);
    write_tensor(&a.out, &m, a.dtype)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("kvmerge").chain(args.iter().copied())).unwrap()
    }

    fn run_args(args: &[&str]) -> RunArgs {
        match parse(&[&["simulate"], args].concat()).command {
            Command::Simulate(s) => s.run,
            _ => unreachable!(),
        }
    }

    #[test]
    fn simulate_defaults_are_full_scale() {
        let c = experiment_config(&run_args(&[]), &[Algorithm::KvSlimmer]).unwrap();
        assert_eq!((c.compression.budget, c.compression.chunk_size, c.compression.sink_len), (2048, 512, 32));
        assert_eq!(c.compression.pair_strategy, PairStrategy::LowestAttentionMass);
        assert_eq!(c.length, 2048);
    }

    #[test]
    fn desk_preset_and_overrides() {
        let c = experiment_config(&run_args(&["--desk", "--sink", "4"]), &[Algorithm::Mean]).unwrap();
        assert_eq!((c.compression.budget, c.compression.chunk_size, c.compression.sink_len), (256, 64, 4));
    }

    #[test]
    fn validation_names_the_flag() {
        let cases: [(&[&str], &str); 7] = [
            (&["--budget", "0"], "--budget"),
            (&["--chunk-size", "0"], "--chunk-size"),
            (&["--budget", "16", "--sink", "16"], "--sink"),
            (&["--budget", "16", "--sink", "8", "--chunk-size", "9"], "--chunk-size"),
            (&["--rho", "1"], "--rho"),
            (&["--beta=-1"], "--beta"),
            (&["--pair-strategy", "random"], "--pair-strategy"),
        ];
        for (args, flag) in cases {
            let e = experiment_config(&run_args(args), &[Algorithm::KvSlimmer]).unwrap_err();
            assert_eq!(e.exit_code(), EXIT_USAGE);
            assert!(e.to_string().contains(flag), "{e}");
        }
    }

    #[test]
    fn none_skips_the_pair_capacity_check() {
        let r = run_args(&["--budget", "16", "--sink", "8", "--chunk-size", "64"]);
        assert!(experiment_config(&r, &[Algorithm::None]).is_ok());
    }

    #[test]
    fn algorithm_lists() {
        assert_eq!(
            parse_algorithms("--algos", "mean, asymkv,kvslimmer").unwrap(),
            vec![Algorithm::Mean, Algorithm::AsymKv, Algorithm::KvSlimmer]
        );
        assert!(parse_algorithms("--algos", "mean,mean").is_err());
        assert!(parse_algorithms("--algos", "best").unwrap_err().to_string().contains("--algos"));
    }

    #[test]
    fn head_slicing_is_by_contiguous_columns() {
        let w = Matrix::from_fn(3, 6, |i, j| (10 * i + j) as f64);
        let s = head_slices(&w, 2, None).unwrap();
        assert_eq!(s[1][(2, 0)], 23.0);
        assert_eq!(s[0].cols(), 3);
        assert!(head_slices(&w, 4, None).is_err());
        assert!(head_slices(&w, 2, Some(2)).is_err());
        assert!(head_slices(&w, 3, Some(2)).is_ok());
    }

    #[test]
    fn verify_flags() {
        let Command::Verify(v) = parse(&["verify", "--seeds", "1", "--sizes", "2"]).command else {
            unreachable!()
        };
        let cfg = verify_config(&v).unwrap();
        assert_eq!((cfg.seeds, cfg.sizes.as_slice(), cfg.mutation), (1, &[2][..], None));
        let Command::Verify(v) = parse(&["verify", "--inject-mutation", "drop-coupling"]).command else {
            unreachable!()
        };
        assert_eq!(verify_config(&v).unwrap().mutation, Some(Mutation::DropCoupling));
        let Command::Verify(v) = parse(&["verify", "--inject-mutation", "nope"]).command else {
            unreachable!()
        };
        assert_eq!(verify_config(&v).unwrap_err().exit_code(), EXIT_USAGE);
    }

    #[test]
    fn exit_codes() {
        let mut o = Vec::new();
        let mut e = Vec::new();
        assert_eq!(main_with(["kvmerge", "simulate", "--bogus"], &mut o, &mut e), EXIT_USAGE);
        assert_eq!(main_with(["kvmerge", "--help"], &mut o, &mut e), EXIT_OK);
        assert_eq!(
            main_with(["kvmerge", "spectrum", "--weights", "/nonexistent/w.kvsl"], &mut o, &mut e),
            EXIT_IO
        );
    }
}
