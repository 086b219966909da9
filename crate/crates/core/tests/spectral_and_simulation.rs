use kvmerge::cache::{Algorithm, CompressionConfig};
use kvmerge::harness::*;
use kvmerge::numerics::{svd, Matrix, Vector};
use kvmerge::spectral::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| r.gen_range(-1.0..1.0))
}

#[test]
fn singular_values_agree_with_nalgebra() {
    let mut r = ChaCha8Rng::seed_from_u64(17);
    for (rows, cols) in [(5, 3), (3, 5), (8, 8), (12, 4)] {
        let m = random_matrix(&mut r, rows, cols);
        let ours = svd(&m).unwrap().sigma;
        let na = nalgebra::DMatrix::from_row_slice(rows, cols, m.as_slice());
        let mut theirs: Vec<f64> = na.singular_values().iter().copied().collect();
        theirs.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in ours.iter().zip(&theirs) {
            assert!((a - b).abs() < 1e-12 * theirs[0], "{a} vs {b}");
        }
    }
}

#[test]
fn identity_has_flat_spectrum() {
    let p = spectral_profile(&Matrix::<f64>::identity(8)).unwrap();
    assert!(p.eigenvalues.iter().all(|&l| (l - 1.0).abs() < 1e-14));
    let cum = cumulative_energy(&p.eigenvalues);
    for (i, c) in cum.iter().enumerate() {
        assert!((c - (i + 1) as f64 / 8.0).abs() < 1e-14);
    }
    let s = concentration_stats(&p, 2).unwrap();
    assert!((s.participation_ratio - 8.0).abs() < 1e-12);
    assert!((s.topk_energy - 0.25).abs() < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contributions_sum_to_projected_cosine(seed in any::<u64>(), rows in 2usize..10, cols in 1usize..10) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = random_matrix(&mut r, rows, cols);
        let x = Vector::from_fn(rows, |_| r.gen_range(-1.0..1.0));
        let y = Vector::from_fn(rows, |_| r.gen_range(-1.0..1.0));
        let p = spectral_profile(&w).unwrap();
        let c = mode_contributions(&x, &y, &p);
        prop_assume!(c.is_ok());
        let c = c.unwrap();
        let direct = adjacent_similarity(&[x.clone(), y.clone()], &w).unwrap()[0];
        prop_assert!((c.total - direct).abs() < 1e-10);

        let scaled = spectral_profile(&w.scale(3.7)).unwrap();
        let cs = mode_contributions(&x, &y, &scaled).unwrap();
        for (a, b) in c.contributions.iter().zip(cs.contributions.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

fn small() -> ExperimentConfig {
    ExperimentConfig {
        model: ModelSpec { d_model: 16, d_head: 4, heads: 2, ..Default::default() },
        rho: 0.9,
        length: 80,
        compression: CompressionConfig { budget: 24, chunk_size: 8, sink_len: 4, ..Default::default() },
    }
}

#[test]
fn simulation_is_deterministic_per_seed() {
    let algos = [Algorithm::Mean, Algorithm::AsymKv, Algorithm::KvSlimmer];
    let a = run_seeds(&small(), &algos, &[3, 4], RefMode::Full).unwrap();
    let b = run_seeds(&small(), &algos, &[4, 3], RefMode::Full).unwrap();
    assert_eq!(a[0].runs, b[1].runs);
    assert_eq!(a[1].runs, b[0].runs);
}

#[test]
fn ample_budget_without_compression_is_exact() {
    let mut cfg = small();
    cfg.compression.budget = 200;
    cfg.compression.algorithm = Algorithm::None;
    let s = compare_seeds(&cfg, &[Algorithm::None], &[0, 1]).unwrap();
    assert_eq!(s[0].mean_error, 0.0);
    assert_eq!(s[0].p95_error, 0.0);
    assert_eq!(s[0].final_cache_len, 80);
}

#[test]
fn compressed_runs_hold_the_budget() {
    let runs = run_seeds(&small(), &[Algorithm::KvSlimmer], &[0], RefMode::Skip).unwrap();
    let r = &runs[0].runs[0];
    assert!(r.steps.iter().all(|s| s.cache_len < 32));
    assert!(r.merge_count > 0);
    assert!(r.steps.iter().all(|s| s.l2_error == 0.0));
    assert_eq!(r.counters.reference_calls, 0);
}

#[test]
fn errors_are_finite_and_bounded() {
    let runs = run_seeds(&small(), &[Algorithm::Mean, Algorithm::KvSlimmer], &[9], RefMode::Full).unwrap();
    for r in &runs[0].runs {
        for s in &r.steps {
            assert!(s.l2_error.is_finite() && s.l2_error >= 0.0);
            assert!((0.0..=2.0).contains(&s.cos_error));
        }
    }
}

#[test]
fn single_precision_tracks_double() {
    let cfg = small();
    let m64 = gen_model_with::<f64>(2, &cfg.model).unwrap();
    let m32 = gen_model_with::<f32>(2, &cfg.model).unwrap();
    let s64 = gen_stream::<f64>(2, 16, 80, 0.9).unwrap();
    let s32 = gen_stream::<f32>(2, 16, 80, 0.9).unwrap();
    let c = CompressionConfig { algorithm: Algorithm::Mean, ..cfg.compression };
    let a = simulate_decode(&m64, &s64, &c, RefMode::Full).unwrap();
    let b = simulate_decode(&m32, &s32, &c, RefMode::Full).unwrap();
    assert_eq!(a.final_cache_len, b.final_cache_len);
    assert!((a.mean_error() - b.mean_error()).abs() < 1e-3);
}
