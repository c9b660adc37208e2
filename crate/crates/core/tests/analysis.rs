use kkl_core::analysis::{
    asymptotic_bound, check_certificate, covering_grid, estimate_constants, jacobian_norms, linspace, noisy_bound,
    run_benchmark, smape, smape_values, table_csv, worst_case_bound, BenchmarkConfig, BoundConstants, BoundGrid,
    MapKind, NoiseLevels, SMAPE_CAP,
};
use kkl_core::diffcore::Tensor;
use kkl_core::dynamics::{integrate, InputKind, InputSignal, Method, SystemKind};
use kkl_core::networks::{HyperDims, HyperNet, Injection, InjectionDims, Mlp};
use kkl_core::observer::{build_matrices, ModelBundle, ObserverMatrices, Variant};
use kkl_core::rng;
use kkl_core::KklError;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn constants(eps_pde: f64, eps_rt: f64, ell_dec: f64, kappa: f64, lambda: f64) -> BoundConstants {
    BoundConstants {
        kappa,
        lambda,
        eps_pde,
        eps_rt,
        ell_dec,
        ell_enc: 1.5,
        b_norm: 5f64.sqrt(),
        w_bar: 0.0,
        v_bar: 0.0,
    }
}

fn duffing_bundle(seed: u64) -> ModelBundle {
    let mut r = rng::from_seed(seed);
    let enc = Mlp::new(&[2, 12, 12, 5], true, &mut r);
    let dec = Mlp::new(&[5, 12, 12, 2], true, &mut r);
    ModelBundle::autonomous(SystemKind::Duffing, enc, dec, build_matrices(2, 1).unwrap(), 6, 0.05).unwrap()
}

fn obs_of(base: &ModelBundle, seed: u64) -> ModelBundle {
    let inj = Injection::new(
        InjectionDims {
            n_u: 1,
            n_z: 5,
            gru_hidden: 4,
            context: 3,
            phi_hidden: 8,
            phi_layers: 1,
        },
        &mut rng::from_seed(seed),
    );
    base.with_injection(inj).unwrap()
}

fn dyn_of(base: &ModelBundle, seed: u64) -> ModelBundle {
    let mut layers = base.encoder.layer_shapes();
    layers.extend(base.decoder.layer_shapes());
    let h = HyperNet::new(
        &HyperDims {
            n_u: 1,
            gru_hidden: 4,
            embedding: 3,
            backbone: 8,
            rank: 2,
            scale_init: 0.1,
            layers,
        },
        &mut rng::from_seed(seed),
    );
    base.with_hyper(h).unwrap()
}

/// Scalar system with the exact map `T(x) = x` for `ż = −2z + y`.
fn linear_exact() -> ModelBundle {
    let mut enc = Mlp::zeros(&[1, 1]);
    enc.weights[0] = Tensor::matrix(1, 1, vec![1.0]).unwrap();
    let dec = enc.clone();
    let m = ObserverMatrices::new(1, 1, vec![-2.0], vec![1.0]).unwrap();
    ModelBundle::autonomous(SystemKind::Linear, enc, dec, m, 4, 0.05).unwrap()
}

#[test]
fn smape_identities() {
    let a = [0.3, -1.2, 4.0, 1e-3];
    assert_eq!(smape_values(&a, &a).unwrap(), 0.0);
    let neg: Vec<f64> = a.iter().map(|v| -v).collect();
    assert_eq!(smape_values(&a, &neg).unwrap(), 200.0);
    assert_eq!(smape_values(&[1.0], &[3.0]).unwrap(), 100.0);
    assert_eq!(smape_values(&[0.0], &[0.0]).unwrap(), 0.0);
    assert!(matches!(smape_values(&[1.0], &[1.0, 2.0]), Err(KklError::Dimension(_))));
}

#[test]
fn smape_respects_the_transient_window() {
    let times = linspace(0.0, 10.0, 11);
    let truth: Vec<f64> = times.iter().map(|t| 1.0 + t).collect();
    let mut est = truth.clone();
    for v in est.iter_mut().take(5) {
        *v = -*v;
    }
    assert_eq!(smape(&truth, &est, 1, &times, 5.0).unwrap(), 0.0);
    assert!(smape(&truth, &est, 1, &times, 4.0).unwrap() > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smape_is_symmetric_and_bounded(
        a in prop::collection::vec(-1e3f64..1e3, 1..20),
        seed in 0u64..1000,
    ) {
        let mut r = rng::from_seed(seed);
        let b: Vec<f64> = a.iter().map(|v| v * r.random_range(-2.0..2.0) + r.random_range(-1.0..1.0)).collect();
        let ab = smape_values(&a, &b).unwrap();
        let ba = smape_values(&b, &a).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=200.0).contains(&ab));
        prop_assert_eq!(smape_values(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn bound_is_non_increasing_and_above_its_limit(
        eps_pde in 0.0f64..1.0,
        eps_rt in 0.0f64..1.0,
        ell in 0.1f64..10.0,
        kappa in 1.0f64..5.0,
        lambda in 0.1f64..5.0,
        xi in 0.0f64..10.0,
        t in 0.0f64..20.0,
        dt in 0.0f64..5.0,
    ) {
        let c = constants(eps_pde, eps_rt, ell, kappa, lambda);
        let now = worst_case_bound(&c, xi, t);
        let later = worst_case_bound(&c, xi, t + dt);
        prop_assert!(later <= now);
        prop_assert!(later >= asymptotic_bound(&c));
    }
}

#[test]
fn bound_closed_forms() {
    let c = constants(0.2, 0.05, 3.0, 2.0, 0.5);
    let limit = 0.05 + 3.0 * 0.2 * 2.0 / 0.5;
    assert!((asymptotic_bound(&c) - limit).abs() < 1e-14);
    assert!((worst_case_bound(&c, 4.0, 1e3) - limit).abs() < 1e-14);
    assert_eq!(worst_case_bound(&c, 0.0, 0.0), worst_case_bound(&c, 0.0, 7.0));
    let unit = constants(0.0, 0.0, 1.0, 1.0, 1.0);
    assert!((worst_case_bound(&unit, 1.0, 2.0) - (-2.0f64).exp()).abs() < 1e-15);
}

#[test]
fn noisy_bound_reduces_and_is_linear_in_noise() {
    let mut c = constants(0.2, 0.05, 3.0, 2.0, 0.5);
    assert_eq!(noisy_bound(&c), asymptotic_bound(&c));
    c.v_bar = 0.1;
    let one = noisy_bound(&c);
    c.v_bar = 0.2;
    let two = noisy_bound(&c);
    let step = 3.0 * 2.0 * 5f64.sqrt() / 0.5 * 0.1;
    assert!((two - one - step).abs() < 1e-12);
    c.v_bar = 0.0;
    c.w_bar = 0.1;
    let w = noisy_bound(&c) - asymptotic_bound(&c);
    assert!((w - 3.0 * 2.0 / 0.5 * 1.5 * 0.1).abs() < 1e-12);
    assert!((build_matrices(2, 1).unwrap().b_norm() - 5f64.sqrt()).abs() < 1e-12);
}

fn small_grid(n_x: usize, inputs: Vec<f64>) -> BoundGrid {
    let spec = SystemKind::Duffing.spec();
    assert_eq!(spec.n_x, n_x);
    covering_grid(&spec, &[], 7, inputs)
}

#[test]
fn default_matrices_give_unit_kappa_and_lambda() {
    let c = estimate_constants(&duffing_bundle(1), &small_grid(2, vec![0.0]), NoiseLevels::default()).unwrap();
    assert!((c.kappa - 1.0).abs() < 1e-12);
    assert!((c.lambda - 1.0).abs() < 1e-12);
    assert!(c.eps_pde > 0.0 && c.eps_rt > 0.0 && c.ell_dec > 0.0 && c.ell_enc > 0.0);
}

#[test]
fn scaled_identity_decoder_has_lipschitz_two() {
    let mut b = duffing_bundle(2);
    let mut dec = Mlp::zeros(&[5, 2]);
    let mut w = vec![0.0; 10];
    w[0] = 2.0;
    w[3] = 2.0;
    dec.weights[0] = Tensor::matrix(5, 2, w).unwrap();
    b.decoder = dec;
    let c = estimate_constants(&b, &small_grid(2, vec![0.0]), NoiseLevels::default()).unwrap();
    assert!((c.ell_dec - 2.0).abs() < 1e-6, "{}", c.ell_dec);
}

#[test]
fn exact_linear_map_has_zero_residual_and_round_trip() {
    let b = linear_exact();
    let grid = BoundGrid {
        n_x: 1,
        states: linspace(-3.0, 3.0, 41),
        inputs: vec![0.0],
    };
    let c = estimate_constants(&b, &grid, NoiseLevels::default()).unwrap();
    assert!(c.eps_pde < 1e-8, "{}", c.eps_pde);
    assert_eq!(c.eps_rt, 0.0);
    assert!((c.ell_dec - 1.0).abs() < 1e-12 && (c.ell_enc - 1.0).abs() < 1e-12);
    assert!((c.lambda - 2.0).abs() < 1e-12);
    // a constant input breaks the autonomous map equation by |u|
    let forced = BoundGrid {
        inputs: vec![0.0, 0.5],
        ..grid
    };
    let c = estimate_constants(&b, &forced, NoiseLevels::default()).unwrap();
    assert!((c.eps_pde - 0.5).abs() < 1e-12);
}

#[test]
fn empty_grid_is_rejected() {
    let g = BoundGrid {
        n_x: 2,
        states: vec![],
        inputs: vec![0.0],
    };
    assert!(matches!(
        estimate_constants(&duffing_bundle(3), &g, NoiseLevels::default()),
        Err(KklError::EmptyGrid)
    ));
}

/// Central-difference Jacobian and its largest singular value.
fn fd_jacobian_norm(f: impl Fn(&Tensor<f64>) -> Tensor<f64>, p: &[f64]) -> f64 {
    let n_in = p.len();
    let h = 1e-6;
    let base = f(&Tensor::row(p.to_vec()));
    let n_out = base.cols();
    let mut jac = DMatrix::zeros(n_out, n_in);
    for j in 0..n_in {
        let mut up = p.to_vec();
        up[j] += h;
        let mut down = p.to_vec();
        down[j] -= h;
        let (fu, fd) = (f(&Tensor::row(up)), f(&Tensor::row(down)));
        for i in 0..n_out {
            jac[(i, j)] = (fu.data()[i] - fd.data()[i]) / (2.0 * h);
        }
    }
    jac.singular_values().max()
}

#[test]
fn jacobian_norms_match_finite_difference_svd() {
    let base = duffing_bundle(4);
    let mut r = rng::from_seed(5);
    let x = Tensor::matrix(4, 2, (0..8).map(|_| r.random_range(-1.5..1.5)).collect()).unwrap();
    let enc = jacobian_norms(&base, MapKind::Encoder, &x, None).unwrap();
    let z = base.encoder.forward(&x).unwrap();
    let dec = jacobian_norms(&base, MapKind::Decoder, &z, None).unwrap();
    for i in 0..4 {
        let e = fd_jacobian_norm(|p| base.encoder.forward(p).unwrap(), x.row_slice(i));
        let d = fd_jacobian_norm(|p| base.decoder.forward(p).unwrap(), z.row_slice(i));
        assert!((enc[i] - e).abs() < 1e-6 * (1.0 + e), "{} vs {e}", enc[i]);
        assert!((dec[i] - d).abs() < 1e-6 * (1.0 + d), "{} vs {d}", dec[i]);
    }

    let dy = dyn_of(&base, 6);
    let w = Tensor::full(vec![4, 6], 0.7);
    let norms = jacobian_norms(&dy, MapKind::Encoder, &x, Some(&w)).unwrap();
    for i in 0..4 {
        let wi = Tensor::full(vec![1, 6], 0.7);
        let e = fd_jacobian_norm(|p| dy.encode(p, Some(&wi)).unwrap(), x.row_slice(i));
        assert!((norms[i] - e).abs() < 1e-6 * (1.0 + e));
    }
}

#[test]
fn decoder_constant_dominates_observed_slopes() {
    let b = duffing_bundle(7);
    let grid = small_grid(2, vec![0.0]);
    let c = estimate_constants(&b, &grid, NoiseLevels::default()).unwrap();
    let x = Tensor::matrix(grid.len(), 2, grid.states.clone()).unwrap();
    let z = b.encoder.forward(&x).unwrap();
    let mut r = rng::from_seed(8);
    for i in 0..grid.len() {
        let zi = z.row_slice(i);
        let dir: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        let h = 1e-5;
        let up: Vec<f64> = zi.iter().zip(&dir).map(|(a, d)| a + h * d).collect();
        let fu = b.decoder.forward(&Tensor::row(up)).unwrap();
        let f0 = b.decoder.forward(&Tensor::row(zi.to_vec())).unwrap();
        let dn = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        let slope = fu.sub(&f0).unwrap().norm() / (h * dn);
        assert!(slope <= c.ell_dec * (1.0 + 1e-4), "{slope} > {}", c.ell_dec);
    }
}

#[test]
fn obs_residual_subtracts_the_injection() {
    let base = duffing_bundle(9);
    let obs = obs_of(&base, 10);
    let grid = small_grid(2, vec![0.0]);
    // a zero window gives Φ = 0, so the constants match the static bundle
    let a = estimate_constants(&base, &grid, NoiseLevels::default()).unwrap();
    let b = estimate_constants(&obs, &grid, NoiseLevels::default()).unwrap();
    assert_eq!(a, b);
    let forced = small_grid(2, vec![0.8]);
    let a = estimate_constants(&base, &forced, NoiseLevels::default()).unwrap();
    let b = estimate_constants(&obs, &forced, NoiseLevels::default()).unwrap();
    assert_ne!(a.eps_pde, b.eps_pde);
}

#[test]
fn exact_linear_observer_satisfies_its_certificate() {
    let b = linear_exact();
    let grid = BoundGrid {
        n_x: 1,
        states: linspace(-3.0, 3.0, 61),
        inputs: vec![0.0],
    };
    let c = estimate_constants(&b, &grid, NoiseLevels::default()).unwrap();
    let spec = SystemKind::Linear.spec();
    for x0 in [-2.5, 0.4, 3.0] {
        let tr = integrate(&spec, &[x0], &InputSignal::zero(), 4.0, 0.05, Method::Rk45).unwrap();
        let chk = check_certificate(&b, &c, &tr, 1.0).unwrap();
        assert!(chk.holds, "{chk:?}");
    }
}

fn quick_benchmark(n_trials: usize) -> BenchmarkConfig {
    BenchmarkConfig {
        n_trials,
        t_final: 8.0,
        t_skip: 2.0,
        ..BenchmarkConfig::default()
    }
}

fn four_variants() -> Vec<ModelBundle> {
    let base = duffing_bundle(11);
    let mut r = rng::from_seed(12);
    let cur = base
        .with_curriculum(Mlp::new(&[2, 12, 12, 5], true, &mut r), Mlp::new(&[5, 12, 12, 2], true, &mut r))
        .unwrap();
    vec![base.clone(), obs_of(&base, 13), dyn_of(&base, 14), cur]
}

#[test]
fn benchmark_layout_and_collapse() {
    let bundles = four_variants();
    let report = run_benchmark(&bundles, &quick_benchmark(3), 21).unwrap();
    assert_eq!(report.cells.len(), 16);
    for c in &report.cells {
        assert_eq!(c.trials.len(), 3);
        assert!(c.trials.iter().all(|s| (0.0..=SMAPE_CAP).contains(s)));
    }
    let auto = report.cell(Variant::Autonomous, InputKind::Zero).unwrap();
    for v in [Variant::Obs, Variant::Dyn] {
        let cell = report.cell(v, InputKind::Zero).unwrap();
        let bits = |t: &[f64]| t.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&cell.trials), bits(&auto.trials));
    }
    let forced = report.cell(Variant::Obs, InputKind::Square).unwrap();
    assert_ne!(forced.trials, report.cell(Variant::Autonomous, InputKind::Square).unwrap().trials);
    let csv = table_csv(&[report]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines.iter().all(|l| l.split(',').count() == 5));
}

#[test]
fn benchmark_is_reproducible() {
    let bundles = four_variants();
    let a = run_benchmark(&bundles[..2], &quick_benchmark(2), 5).unwrap();
    let b = run_benchmark(&bundles[..2], &quick_benchmark(2), 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(table_csv(&[a.clone()]), table_csv(&[b]));
    let c = run_benchmark(&bundles[..2], &quick_benchmark(2), 6).unwrap();
    assert_ne!(a.cells[0].trials, c.cells[0].trials);
}

#[test]
fn divergent_observers_score_the_cap() {
    let mut b = duffing_bundle(15);
    b.matrices.a[0] = 1e3;
    let report = run_benchmark(&[b], &quick_benchmark(1), 1).unwrap();
    for c in &report.cells {
        assert_eq!(c.trials, vec![SMAPE_CAP]);
        assert_eq!(c.diverged, 1);
    }
}
