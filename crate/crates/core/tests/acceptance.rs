//! Release gate for the library: each test pins one promise the crate
//! makes: gradient correctness, contraction equivalence, the factorized /
//! dense parameter ratio, probability and split invariants, end-to-end
//! learnability on the default synthetic scene, the small-sample advantage
//! of the factorized variant, experiment-protocol shape, and cross-thread
//! determinism. Tolerances and budgets are pinned here on purpose; loosen
//! them only with a changelog entry.
//!
//! The two expensive fixtures (a real training sweep on the default scene
//! and a full-cardinality reduced sweep) are computed once and shared.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;

use rrfnn_core::data::{
    build_sample_pool, normalize_bandwise, split_indices, HyperCube, SplitSpec,
};
use rrfnn_core::harness::{
    aggregate, run_grid, runs_csv, strip_timing, summary_csv, CellSummary, ExperimentGrid,
    GridOutput, Variant,
};
use rrfnn_core::model::gradcheck::{check_rank_r, FD_TOLERANCE};
use rrfnn_core::model::{
    dense_param_count, rank_r_param_count, Activation, DenseFnn, LayerDims, Model, RankRFnn,
};
use rrfnn_core::optim::TrainConfig;
use rrfnn_core::seed::rng_from;
use rrfnn_core::synth::{generate_scene, scene_difficulty, SceneConfig};
use rrfnn_core::tensor::{cp_reconstruct, CpFactorSet, Tensor3};

/// Reference layer shape (defaults) used by several criteria.
fn default_shape() -> LayerDims {
    LayerDims {
        hidden_count: 10,
        class_count: 4,
        patch_side: 9,
        band_count: 42,
    }
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let started = Instant::now();
    let report = check_rank_r(20, 2024, Activation::Sigmoid, false).unwrap();
    let elapsed = started.elapsed();
    println!(
        "[criterion 1] 20 trials, {} params, max rel err {:.3e} (tol {FD_TOLERANCE:.0e}), {:?}",
        report.params_checked, report.max_rel_err, elapsed
    );
    assert!(
        report.passed(),
        "worst gradient error {:.3e} exceeds {FD_TOLERANCE:.0e}",
        report.max_rel_err
    );
    assert_eq!(report.trials, 20);
    assert!(
        elapsed < Duration::from_secs(10),
        "gradient check took {elapsed:?}, budget 10s"
    );
}

#[test]
fn criterion_2_cp_contraction_equals_dense_contraction() {
    let started = Instant::now();
    let mut rng = rng_from(7130);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let rank = rng.random_range(1..=4);
        let bands = rng.random_range(1..=8);
        let side = rng.random_range(1..=6);
        let mut vectors = |len: usize| -> Vec<Vec<f64>> {
            (0..rank)
                .map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect()
        };
        let factors =
            CpFactorSet::new(vectors(bands), vectors(side), vectors(side)).unwrap();
        let x = Tensor3::from_fn((bands, side, side), |_, _, _| rng.random_range(-1.0..1.0))
            .unwrap();
        let fast = rrfnn_core::tensor::cp_inner(&factors, &x).unwrap();
        let dense = rrfnn_core::tensor::inner(&cp_reconstruct(&factors), &x).unwrap();
        let rel = (fast - dense).abs() / dense.abs().max(1.0);
        worst = worst.max(rel);
    }
    let elapsed = started.elapsed();
    println!("[criterion 2] 100 contraction pairs, worst rel diff {worst:.3e}, {elapsed:?}");
    assert!(worst <= 1e-10, "worst relative difference {worst:.3e} > 1e-10");
    assert!(
        elapsed < Duration::from_secs(1),
        "contraction sweep took {elapsed:?}, budget 1s"
    );
}

#[test]
fn criterion_3_dense_twin_reproduces_logits() {
    let dims = default_shape();
    let mut rng = rng_from(40917);
    let mut model = RankRFnn::zeros(dims, 3, Activation::Sigmoid, false).unwrap();
    let params: Vec<f64> = (0..model.param_count())
        .map(|_| rng.random_range(-0.5..0.5))
        .collect();
    model.read_params(&params).unwrap();
    let twin = DenseFnn::from_rank_r(&model);

    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let x = Tensor3::from_fn(dims.patch_dims(), |_, _, _| rng.random_range(0.0..1.0))
            .unwrap();
        let a = model.forward(&x).unwrap().logits;
        let b = twin.forward(&x).unwrap().logits;
        for (va, vb) in a.iter().zip(&b) {
            worst = worst.max((va - vb).abs());
        }
    }
    println!("[criterion 3] dense twin worst logit diff {worst:.3e} over 50 patches");
    assert!(worst <= 1e-12, "logit difference {worst:.3e} > 1e-12");
}

#[test]
fn criterion_4_parameter_counts_are_exact() {
    let dims = default_shape();
    let factorized = rank_r_param_count(dims, 3, false);
    let dense = dense_param_count(dims, false);
    println!(
        "[criterion 4] factorized {factorized} vs dense {dense} ({:.1}x reduction)",
        dense as f64 / factorized as f64
    );
    assert_eq!(factorized, 1_840);
    assert_eq!(dense, 34_060);
    let model = RankRFnn::zeros(dims, 3, Activation::Sigmoid, false).unwrap();
    assert_eq!(model.param_count(), 1_840);
    let twin = DenseFnn::zeros(dims, Activation::Sigmoid, false).unwrap();
    assert_eq!(twin.param_count(), 34_060);
    assert!((dense as f64 / factorized as f64 - 18.5).abs() < 0.02);
}

#[test]
fn criterion_5_probability_and_split_invariants() {
    // Probabilities sum to 1 across many random forward passes.
    let dims = LayerDims {
        hidden_count: 4,
        class_count: 5,
        patch_side: 3,
        band_count: 4,
    };
    let mut rng = rng_from(99);
    let mut worst: f64 = 0.0;
    for trial in 0..10_000 {
        let mut model = RankRFnn::zeros(dims, 2, Activation::Tanh, trial % 2 == 0).unwrap();
        let params: Vec<f64> = (0..model.param_count())
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        model.read_params(&params).unwrap();
        let x = Tensor3::from_fn(dims.patch_dims(), |_, _, _| rng.random_range(-1.0..1.0))
            .unwrap();
        let sum: f64 = model.forward(&x).unwrap().probabilities.iter().sum();
        worst = worst.max((sum - 1.0).abs());
    }
    assert!(worst <= 1e-12, "probability sum off by {worst:.3e}");

    // Band-wise normalization is exactly idempotent.
    let cube = HyperCube::from_fn(17, 13, 6, |r, c, m| {
        (r as f64 * 1.7 - c as f64 * 0.3) * (m as f64 + 0.5)
    })
    .unwrap();
    let once = normalize_bandwise(&cube);
    let twice = normalize_bandwise(&once);
    let bits = |c: &HyperCube| c.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&once), bits(&twice));

    // Splits partition the pool exactly with TS samples per class.
    let (scene, labels) = generate_scene(&SceneConfig {
        height: 48,
        width: 48,
        bands: 4,
        region_granularity: 10.0,
        ..SceneConfig::default()
    })
    .unwrap();
    let pool = build_sample_pool(&scene, &labels, 5, 4).unwrap();
    let split = split_indices(
        &pool,
        &SplitSpec {
            samples_per_class: 30,
            seed: 5,
            repeat_index: 2,
        },
    )
    .unwrap();
    let mut all: Vec<usize> = split.train.iter().chain(&split.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..pool.len()).collect::<Vec<_>>());
    let mut per_class = vec![0usize; 4];
    for &index in &split.train {
        per_class[pool.entries()[index].class_id] += 1;
    }
    assert_eq!(per_class, vec![30; 4]);
    println!(
        "[criterion 5] prob sums within {worst:.3e}, normalization idempotent, splits exact"
    );
}

/// Shared fixture for criteria 6 and 7: the default scene trained at
/// TS of 50 and 400 for both variants, 10 repeats each, default training
/// configuration (100 epochs).
struct SceneExperiment {
    difficulty: f64,
    summaries: Vec<CellSummary>,
    wall: Duration,
}

static SCENE_EXPERIMENT: OnceLock<SceneExperiment> = OnceLock::new();

fn scene_experiment() -> &'static SceneExperiment {
    SCENE_EXPERIMENT.get_or_init(|| {
        let config = SceneConfig::default();
        let (cube, labels) = generate_scene(&config).unwrap();
        let difficulty = scene_difficulty(&normalize_bandwise(&cube), &labels).unwrap();
        let grid = ExperimentGrid {
            tws_values: vec![9],
            ts_values: vec![50, 400],
            ..ExperimentGrid::default()
        };
        let started = Instant::now();
        let output = run_grid(&[(&cube, &labels)], &grid, 1).unwrap();
        SceneExperiment {
            difficulty,
            summaries: output.summaries,
            wall: started.elapsed(),
        }
    })
}

fn cell(experiment: &SceneExperiment, variant: Variant, ts: usize) -> &CellSummary {
    experiment
        .summaries
        .iter()
        .find(|s| s.variant == variant && s.ts == ts)
        .expect("cell present")
}

#[test]
fn criterion_6_default_scene_is_learnable_from_fifty_samples() {
    let experiment = scene_experiment();
    let rank_r = cell(experiment, Variant::RankR, 50);
    println!(
        "[criterion 6] difficulty {:.4}, mean acc {:.4} (std {:.4}) at ts=50, sweep took {:?}",
        experiment.difficulty, rank_r.accuracy.mean, rank_r.accuracy.std, experiment.wall
    );
    assert!(
        (0.80..=0.95).contains(&experiment.difficulty),
        "scene difficulty {} outside the calibrated band",
        experiment.difficulty
    );
    assert!(
        rank_r.accuracy.mean >= 0.90,
        "mean accuracy {:.4} below 0.90",
        rank_r.accuracy.mean
    );
    // Budget covers the whole shared sweep, which includes far more work
    // than this criterion alone (ts=400 and the dense variant).
    assert!(
        experiment.wall < Duration::from_secs(600),
        "sweep took {:?}, budget 10 min",
        experiment.wall
    );
}

#[test]
fn criterion_7_factorization_pays_off_at_small_sample_sizes() {
    let experiment = scene_experiment();
    let rank_small = cell(experiment, Variant::RankR, 50).accuracy;
    let dense_small = cell(experiment, Variant::Dense, 50).accuracy;
    let rank_large = cell(experiment, Variant::RankR, 400).accuracy;
    let dense_large = cell(experiment, Variant::Dense, 400).accuracy;
    println!(
        "[criterion 7] ts=50 rank {:.4}±{:.4} vs dense {:.4}±{:.4}; ts=400 rank {:.4} vs dense {:.4}",
        rank_small.mean, rank_small.std, dense_small.mean, dense_small.std,
        rank_large.mean, dense_large.mean
    );
    assert!(
        rank_small.mean >= dense_small.mean - 0.01,
        "rank-R mean {:.4} more than 0.01 below dense {:.4} at ts=50",
        rank_small.mean,
        dense_small.mean
    );
    assert!(
        rank_small.std <= dense_small.std,
        "rank-R std {:.4} above dense std {:.4} at ts=50",
        rank_small.std,
        dense_small.std
    );
    assert!(
        (rank_large.mean - dense_large.mean).abs() <= 0.05,
        "ts=400 means {:.4} vs {:.4} differ by more than 0.05",
        rank_large.mean,
        dense_large.mean
    );
}

/// Shared fixture for criteria 8 and 9: the full-cardinality sweep (3 TWS
/// × 4 TS × 2 variants × 10 repeats) on a reduced scene with a short
/// training schedule, executed twice at one thread and twice at eight.
struct ReducedSweep {
    single_a: GridOutput,
    single_b: GridOutput,
    eight_a: GridOutput,
    eight_b: GridOutput,
}

static REDUCED_SWEEP: OnceLock<ReducedSweep> = OnceLock::new();

fn reduced_sweep() -> &'static ReducedSweep {
    REDUCED_SWEEP.get_or_init(|| {
        let scene = SceneConfig {
            height: 88,
            width: 88,
            bands: 5,
            class_count: 4,
            region_granularity: 12.0,
            signature_separation: 0.8,
            noise_std: 0.10,
            spatial_blur: 0,
            brightness_jitter: 0.0,
            majority_weight: 1.0,
            seed: 3,
        };
        let (cube, labels) = generate_scene(&scene).unwrap();
        // The sweep's largest cell draws 400 samples per class inside a
        // 10-pixel margin; make sure this seed supports it.
        let pool = build_sample_pool(&cube, &labels, 21, 4).unwrap();
        let counts = pool.class_counts();
        assert!(
            counts.iter().all(|&count| count > 400),
            "reduced scene too small per class: {counts:?}"
        );

        let mut train = TrainConfig::default();
        train.epochs = 2;
        let grid = ExperimentGrid {
            train,
            ..ExperimentGrid::default()
        };
        let scenes = [(&cube, &labels)];
        ReducedSweep {
            single_a: run_grid(&scenes, &grid, 1).unwrap(),
            single_b: run_grid(&scenes, &grid, 1).unwrap(),
            eight_a: run_grid(&scenes, &grid, 8).unwrap(),
            eight_b: run_grid(&scenes, &grid, 8).unwrap(),
        }
    })
}

#[test]
fn criterion_8_grid_protocol_shape_and_interval_fixture() {
    let sweep = reduced_sweep();
    let runs = runs_csv(&sweep.single_a.runs, sweep.single_a.class_count);
    let summaries = summary_csv(&sweep.single_a.summaries);
    let run_rows = runs.lines().count() - 1;
    let summary_rows = summaries.lines().count() - 1;
    println!("[criterion 8] grid emitted {run_rows} run rows, {summary_rows} summary rows");
    assert_eq!(run_rows, 240, "expected 3 tws x 4 ts x 2 variants x 10 repeats");
    assert_eq!(summary_rows, 24);

    let fixture: Vec<f64> = (1..=10).map(|v| v as f64).collect();
    let interval = aggregate(&fixture).unwrap();
    println!(
        "[criterion 8] fixture interval ({:.3}, {:.3})",
        interval.ci_low, interval.ci_high
    );
    assert!((interval.ci_low - 3.334).abs() <= 1e-3);
    assert!((interval.ci_high - 7.666).abs() <= 1e-3);
}

#[test]
fn criterion_9_grid_output_is_deterministic_across_threads() {
    let sweep = reduced_sweep();
    let csvs = |output: &GridOutput| {
        (
            strip_timing(&runs_csv(&output.runs, output.class_count)),
            strip_timing(&summary_csv(&output.summaries)),
        )
    };
    let single_a = csvs(&sweep.single_a);
    let single_b = csvs(&sweep.single_b);
    let eight_a = csvs(&sweep.eight_a);
    let eight_b = csvs(&sweep.eight_b);
    assert_eq!(single_a, single_b, "two single-thread executions differ");
    assert_eq!(eight_a, eight_b, "two eight-thread executions differ");
    assert_eq!(single_a, eight_a, "thread count changed the results");
    println!(
        "[criterion 9] four executions byte-identical ({} csv bytes)",
        single_a.0.len() + single_a.1.len()
    );
}
