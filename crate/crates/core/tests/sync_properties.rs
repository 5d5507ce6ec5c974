use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rotsync::eval::{align, error_report, noise_sigma, run_sweep, SolverSettings, SweepSpec, SweepVariable, Trial};
use rotsync::lowrank::{godec_mc, rgodec, GodecOptions, ShrinkMode};
use rotsync::so3::{random_rotation_uniform, RotationMatrix};
use rotsync::sync::{
    assemble, extract_rotations, solve_eig, solve_eig_irls, solve_rgodec, BlockObservationMatrix, EdgeLabel,
    IrlsOptions, Lambda, Method, RelativeMeasurement, RelativeMeasurementSet, RgodecSyncOptions,
};
use rotsync::synth::{generate, GroundTruth, SynthConfig};

fn noisy(n: usize, outliers: f64, seed: u64) -> SynthConfig {
    SynthConfig {
        missing_fraction: 0.5,
        outlier_fraction: outliers,
        noise_min_deg: 5.0,
        noise_max_deg: 5.0,
        ..SynthConfig::new(n, seed)
    }
}

fn errors(rotations: &[RotationMatrix], gt: &[RotationMatrix]) -> Vec<f64> {
    error_report(&align(rotations, gt).unwrap(), gt, 0.0).unwrap().per_node_errors
}

// Frames R_i -> Q R_i, so every measurement becomes Q R_ij Q^T.
fn rotate_frames(set: &RelativeMeasurementSet, gt: &GroundTruth, q: &RotationMatrix) -> (RelativeMeasurementSet, Vec<RotationMatrix>) {
    let qt = q.transpose();
    let edges = set
        .edges()
        .iter()
        .map(|e| RelativeMeasurement { rotation: (q * &e.rotation) * qt, ..*e })
        .collect();
    let truth = gt.rotations.iter().map(|r| q * r).collect();
    (RelativeMeasurementSet::new(set.n(), edges).unwrap(), truth)
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rgodec_opts(noise_deg: f64) -> RgodecSyncOptions {
    RgodecSyncOptions { lambda: Lambda::Auto { sigma: noise_sigma(noise_deg) }, ..Default::default() }
}

#[test]
fn spectral_solvers_are_gauge_invariant() {
    for seed in 0..5 {
        let (set, gt) = generate(&noisy(40, 0.2, seed)).unwrap();
        let q = random_rotation_uniform(&mut ChaCha8Rng::seed_from_u64(1000 + seed));
        let (moved, moved_gt) = rotate_frames(&set, &gt, &q);
        let (obs, moved_obs) = (assemble(&set).unwrap(), assemble(&moved).unwrap());

        let base = errors(&solve_eig(&obs, None).unwrap().rotations, &gt.rotations);
        let other = errors(&solve_eig(&moved_obs, None).unwrap().rotations, &moved_gt);
        assert!(max_gap(&base, &other) < 1e-9, "eig gap {}", max_gap(&base, &other));

        let opts = IrlsOptions::default();
        let base = errors(&solve_eig_irls(&obs, &opts).unwrap().rotations, &gt.rotations);
        let other = errors(&solve_eig_irls(&moved_obs, &opts).unwrap().rotations, &moved_gt);
        assert!(max_gap(&base, &other) < 1e-9, "irls gap {}", max_gap(&base, &other));
    }
}

#[test]
fn rgodec_is_gauge_invariant_up_to_its_random_sketch() {
    // The Gaussian sketch is drawn in fixed coordinates, so rotated data sees
    // a different (equally distributed) sketch. Converged iterates agree
    // to the solver tolerance rather than to rounding error.
    let opts = RgodecSyncOptions { max_iter: 1000, eps: 1e-20, ..rgodec_opts(5.0) };
    for seed in 0..5 {
        let (set, gt) = generate(&noisy(40, 0.2, seed)).unwrap();
        let q = random_rotation_uniform(&mut ChaCha8Rng::seed_from_u64(1000 + seed));
        let (moved, moved_gt) = rotate_frames(&set, &gt, &q);
        let solve = |s: &RelativeMeasurementSet| {
            solve_rgodec(&assemble(s).unwrap(), &opts, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
        };
        let (a, b) = (solve(&set), solve(&moved));
        let gap = max_gap(&errors(&a.rotations, &gt.rotations), &errors(&b.rotations, &moved_gt));
        assert!(gap < 1e-5, "rgodec gap {gap}");
        assert_eq!(a.edge_labels, b.edge_labels);
    }
}

#[test]
fn right_gauge_leaves_measurements_unchanged() {
    let (set, gt) = generate(&noisy(20, 0.0, 3)).unwrap();
    let q = random_rotation_uniform(&mut ChaCha8Rng::seed_from_u64(4));
    for e in set.edges() {
        let a = gt.rotations[e.i] * gt.rotations[e.j].transpose();
        let b = (gt.rotations[e.i] * q) * (gt.rotations[e.j] * q).transpose();
        assert!((a.matrix() - b.matrix()).amax() < 1e-12);
    }
}

#[test]
fn assembled_matrix_is_block_symmetric() {
    let (set, _) = generate(&noisy(25, 0.3, 9)).unwrap();
    let obs = assemble(&set).unwrap();
    assert_eq!(obs.data(), &obs.data().transpose());
    for i in 0..obs.n() {
        for j in 0..obs.n() {
            let specified = obs.adjacency()[(i, j)] == 1.0;
            for a in 0..3 {
                for b in 0..3 {
                    assert_eq!(obs.pattern().get(3 * i + a, 3 * j + b), specified);
                }
            }
        }
    }
}

fn mc_rotations(obs: &BlockObservationMatrix, opts: &GodecOptions, seed: u64) -> (DMatrix<f64>, Vec<RotationMatrix>) {
    let result = godec_mc(obs.data(), obs.pattern(), opts, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let rotations = extract_rotations(obs, &result.low_rank).unwrap();
    (result.low_rank, rotations)
}

#[test]
fn huge_lambda_reduces_to_matrix_completion() {
    for seed in 0..5 {
        let (set, _) = generate(&noisy(30, 0.2, seed)).unwrap();
        let obs = assemble(&set).unwrap();
        let godec_opts = GodecOptions::new(3).with_eps(1e-10).with_max_iter(100);
        let (mc_l, mc_rot) = mc_rotations(&obs, &godec_opts, seed);

        let robust =
            rgodec(obs.data(), obs.pattern(), 1e6, ShrinkMode::Block, &godec_opts, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap();
        assert!((&robust.low_rank - &mc_l).norm() <= 1e-6 * mc_l.norm());
        assert_eq!(robust.outliers.amax(), 0.0);

        let opts = RgodecSyncOptions { lambda: Lambda::Explicit(1e6), ..Default::default() };
        let solution = solve_rgodec(&obs, &opts, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (a, b) in solution.rotations.iter().zip(&mc_rot) {
            assert!((a.matrix() - b.matrix()).amax() < 1e-6);
        }
        assert!(solution.edge_labels.iter().all(|l| *l == EdgeLabel::Inlier));
    }
}

#[test]
fn few_false_positives_without_outliers() {
    let (mut flagged, mut total) = (0, 0);
    for seed in 0..20 {
        let (set, _) = generate(&noisy(100, 0.0, seed)).unwrap();
        let obs = assemble(&set).unwrap();
        let solution = solve_rgodec(&obs, &rgodec_opts(5.0), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        flagged += solution.edge_labels.iter().filter(|l| **l == EdgeLabel::Outlier).count();
        total += solution.edge_labels.len();
    }
    let rate = flagged as f64 / total as f64;
    assert!(rate <= 0.05, "false positive rate {rate}");
}

#[test]
fn reweighting_beats_plain_eig_under_outliers() {
    let (mut eig, mut irls) = (0.0, 0.0);
    for seed in 0..20 {
        let (set, gt) = generate(&noisy(100, 0.3, seed)).unwrap();
        let obs = assemble(&set).unwrap();
        let mean = |r: &[RotationMatrix]| errors(r, &gt.rotations).iter().sum::<f64>() / gt.rotations.len() as f64;
        eig += mean(&solve_eig(&obs, None).unwrap().rotations);
        irls += mean(&solve_eig_irls(&obs, &IrlsOptions::default()).unwrap().rotations);
    }
    assert!(irls < eig, "irls {} vs eig {}", irls / 20.0, eig / 20.0);
}

#[test]
fn rgodec_error_is_flat_in_the_outlier_fraction() {
    let spec = SweepSpec {
        variable: SweepVariable::Outliers,
        grid: vec![0.05, 0.3],
        base: noisy(100, 0.0, 11),
        trials: 20,
        methods: vec![Method::RGoDec],
        settings: SolverSettings::default(),
        record_timing: false,
    };
    let rows = run_sweep(&spec).unwrap();
    let avg = |v: f64| rows.iter().find(|r| r.trial == Trial::Average && r.value == v).unwrap().mean_deg;
    let (low, high) = (avg(0.05), avg(0.3));
    assert!(high <= 1.5 * low, "{high} vs {low}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eig_is_exact_on_any_connected_pattern(n in 2usize..25, missing in 0.0f64..0.95, seed in any::<u64>()) {
        let cfg = SynthConfig { missing_fraction: missing, ..SynthConfig::new(n, seed) };
        let (set, gt) = generate(&cfg).unwrap();
        let solution = solve_eig(&assemble(&set).unwrap(), None).unwrap();
        let worst = errors(&solution.rotations, &gt.rotations).into_iter().fold(0.0, f64::max);
        prop_assert!(worst < 1e-6, "worst {}", worst);
        prop_assert_eq!(solution.rotations[0], RotationMatrix::identity());
    }

    #[test]
    fn solvers_are_deterministic(seed in 0u64..1000) {
        let (set, _) = generate(&noisy(15, 0.2, seed)).unwrap();
        let obs = assemble(&set).unwrap();
        let a = solve_rgodec(&obs, &rgodec_opts(5.0), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = solve_rgodec(&obs, &rgodec_opts(5.0), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a.rotations, b.rotations);
        prop_assert_eq!(a.objective_trace, b.objective_trace);
        let a = solve_eig_irls(&obs, &IrlsOptions::default()).unwrap();
        let b = solve_eig_irls(&obs, &IrlsOptions::default()).unwrap();
        prop_assert_eq!(a.rotations, b.rotations);
    }
}
