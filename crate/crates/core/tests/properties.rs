use noisecov::dataset::{generate_dataset, Dataset, DatasetSpec};
use noisecov::filter::{
    gain_for, recursive_error_expand, steady_state, steady_state_from, update, FilterState, NoiseCov,
};
use noisecov::innovation::{autocorrelation_at, time_avg_nis, InnovationSequence};
use noisecov::numerics::{cholesky_factor, gaussian_vector, solve_linear, Matrix, RandomSource};
use noisecov::predictor::{self, forward, NetworkParams, PredictorInput};
use noisecov::runtime::RuntimeBuffers;
use noisecov::training::{batch_gradient, loss, LossVariant, LossWeights, ModelContext, PhysicsTerms};
use noisecov::vehicle::{vehicle_model, ManeuverSpec, NoiseLabels, VehicleParams};
use proptest::prelude::*;

fn matrix(n: usize, seed: u64, scale: f64) -> Matrix {
    let mut rng = RandomSource::new(seed);
    let data = (0..n * n).map(|_| scale * rng.uniform(-1.0, 1.0)).collect();
    Matrix::from_vec(n, n, data).unwrap()
}

fn spd(n: usize, seed: u64) -> Matrix {
    let m = matrix(n, seed, 1.0);
    m.transpose().mul(&m).unwrap().add(&Matrix::identity(n).scale(n as f64)).unwrap()
}

/// Eigenvalues of a symmetric 2×2 matrix.
fn eig2(a: &Matrix) -> [f64; 2] {
    let (p, q, r) = (a[(0, 0)], a[(0, 1)], a[(1, 1)]);
    let mid = 0.5 * (p + r);
    let rad = (0.25 * (p - r).powi(2) + q * q).sqrt();
    [mid - rad, mid + rad]
}

fn labels() -> impl Strategy<Value = NoiseLabels> {
    (1e-8..1e-3f64, 1e-8..1e-3f64, 1e-8..1e-3f64).prop_map(|(a, b, r)| NoiseLabels::new(a, b, r))
}

fn tiny_dataset(seed: u64) -> Dataset {
    let spec = DatasetSpec {
        count: 12,
        window: 12,
        windows_per_trajectory: 3,
        burn_in: 10,
    };
    let maneuvers: Vec<_> = ManeuverSpec::default_set().iter().map(|m| m.with_duration(1.0)).collect();
    generate_dataset(&spec, &VehicleParams::default(), &maneuvers, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn solve_reproduces_identity(n in 1usize..6, seed in any::<u64>()) {
        // Diagonally dominant keeps the condition number small.
        let a = matrix(n, seed, 1.0).add(&Matrix::identity(n).scale(2.0 * n as f64)).unwrap();
        let inv = solve_linear(&a, &Matrix::identity(n)).unwrap();
        let back = a.mul(&inv).unwrap();
        prop_assert!(back.sub(&Matrix::identity(n)).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn cholesky_reconstructs(n in 1usize..7, seed in any::<u64>()) {
        let a = spd(n, seed);
        let l = cholesky_factor(&a).unwrap();
        let back = l.mul(&l.transpose()).unwrap();
        prop_assert!(back.sub(&a).unwrap().max_abs() <= 1e-10 * a.max_abs());
    }

    #[test]
    fn equal_seeds_give_equal_streams(seed in any::<u64>()) {
        let mut a = RandomSource::new(seed);
        let mut b = RandomSource::new(seed);
        for _ in 0..10_000 {
            prop_assert_eq!(a.standard_normal().to_bits(), b.standard_normal().to_bits());
        }
    }

    #[test]
    fn update_shrinks_covariance_and_stays_symmetric(seed in any::<u64>(), r in 1e-6..10.0f64) {
        let model = vehicle_model(&VehicleParams::default(), 0.01).unwrap();
        let noise = NoiseCov::new(Matrix::from_diag(&[1e-4, 1e-4]), Matrix::scalar(r)).unwrap();
        let p = spd(2, seed).scale(1e-2);
        let prior = FilterState::from_prior(vec![0.1, -0.2], p.clone()).unwrap();
        let post = update(&prior, &model, &noise, &[0.3]).unwrap();
        prop_assert!(post.p_post.is_symmetric(1e-12));
        let diff = p.sub(&post.p_post).unwrap();
        prop_assert!(eig2(&diff)[0] >= -1e-12);
    }

    #[test]
    fn steady_state_is_idempotent(l in labels()) {
        let model = vehicle_model(&VehicleParams::default(), 0.01).unwrap();
        let noise = l.noise_cov();
        let first = steady_state(&model, &noise, 1e-12, 100_000).unwrap();
        prop_assert!(first.converged);
        let again = steady_state_from(&model, &noise, &first.p_prior, 1e-12, 100_000).unwrap();
        prop_assert!(again.iterations <= 2);
    }

    #[test]
    fn error_recursion_matches_rollout(l in labels(), seed in any::<u64>(), m in 1usize..40) {
        let model = vehicle_model(&VehicleParams::default(), 0.01).unwrap();
        let noise = l.noise_cov();
        let ss = steady_state(&model, &noise, 1e-14, 100_000).unwrap();
        let mut rng = RandomSource::new(seed);
        let w: Vec<Vec<f64>> = (0..m).map(|_| gaussian_vector(&mut rng, &noise.q).unwrap()).collect();
        let v: Vec<Vec<f64>> = (0..m).map(|_| gaussian_vector(&mut rng, &noise.r).unwrap()).collect();
        let e0 = vec![rng.uniform(-0.01, 0.01), rng.uniform(-0.01, 0.01)];
        // Rollout: e⁻ₖ₊₁ = F (I − W H) e⁻ₖ − F W vₖ + Γ wₖ.
        let mut e = e0.clone();
        let g = [ss.gain[(0, 0)], ss.gain[(1, 0)]];
        let f = &model.f;
        for j in 0..m {
            let innov = e[1] + v[j][0];
            let post = [e[0] - g[0] * innov, e[1] - g[1] * innov];
            e = vec![
                f[(0, 0)] * post[0] + f[(0, 1)] * post[1] + w[j][0],
                f[(1, 0)] * post[0] + f[(1, 1)] * post[1] + w[j][1],
            ];
        }
        let expanded = recursive_error_expand(&model, &ss.gain, &w, &v, &e0).unwrap();
        for i in 0..2 {
            prop_assert!((expanded[i] - e[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn lag_zero_autocorrelation_is_one(values in prop::collection::vec(-5.0..5.0f64, 2..60)) {
        prop_assume!(values.iter().any(|v| v.abs() > 1e-6));
        let seq = InnovationSequence::from_scalars_constant(&values, 1.0);
        prop_assert_eq!(autocorrelation_at(&seq, 0, 0).unwrap(), 1.0);
    }

    #[test]
    fn nis_invariant_under_rescaling(seed in any::<u64>(), a in 0.01..100.0f64) {
        let mut rng = RandomSource::new(seed);
        let nu: Vec<f64> = (0..50).map(|_| rng.standard_normal()).collect();
        let s: Vec<f64> = (0..50).map(|_| rng.uniform(0.5, 2.0)).collect();
        let base = time_avg_nis(&InnovationSequence::from_scalars(&nu, &s).unwrap()).unwrap();
        let nu2: Vec<f64> = nu.iter().map(|v| a * v).collect();
        let s2: Vec<f64> = s.iter().map(|v| a * a * v).collect();
        let scaled = time_avg_nis(&InnovationSequence::from_scalars(&nu2, &s2).unwrap()).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn discrete_model_is_schur_stable(speed in 5.0..40.0f64) {
        let p = VehicleParams { speed, ..VehicleParams::default() };
        let f = vehicle_model(&p, 0.01).unwrap().f;
        // Spectral radius of a real 2×2 matrix from trace and determinant.
        let tr = f[(0, 0)] + f[(1, 1)];
        let det = f[(0, 0)] * f[(1, 1)] - f[(0, 1)] * f[(1, 0)];
        let disc = tr * tr / 4.0 - det;
        let rho = if disc >= 0.0 {
            (tr / 2.0).abs() + disc.sqrt()
        } else {
            det.sqrt()
        };
        prop_assert!(rho < 1.0, "spectral radius {}", rho);
    }

    #[test]
    fn predictor_output_inside_bound(seed in any::<u64>(), scale in 0.0..200.0f64, m in 1usize..30) {
        let mut rng = RandomSource::new(seed);
        let mut p = NetworkParams::init(&mut rng, 5).unwrap();
        p.values_mut().iter_mut().for_each(|v| *v *= scale);
        let input = PredictorInput::new(
            (0..m).map(|_| rng.uniform(-2.0, 2.0)).collect(),
            (0..m).map(|_| rng.uniform(-0.1, 0.1)).collect(),
            [rng.uniform(0.0, 1e-3), rng.uniform(0.0, 1e-3), rng.uniform(0.0, 1e-3)],
        ).unwrap();
        let (a, _) = forward(&p, &input).unwrap();
        let (b, _) = forward(&p, &input).unwrap();
        prop_assert_eq!(a, b);
        for v in a {
            prop_assert!(v > 0.0 && v < p.bound());
        }
    }

    #[test]
    fn weights_round_trip(seed in any::<u64>(), hidden in 1usize..12) {
        let p = NetworkParams::init(&mut RandomSource::new(seed), hidden).unwrap();
        let bytes = predictor::to_bytes(&p, None);
        let (back, _) = predictor::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(predictor::to_bytes(&back, None), bytes);
    }

    #[test]
    fn penalized_losses_dominate_l1(
        y in prop::array::uniform3(0.0..1e-3f64),
        yhat in prop::array::uniform3(0.0..1e-3f64),
        c in prop::collection::vec(-1.0..1.0f64, 1..5),
        eps in 0.0..5.0f64,
    ) {
        let terms = PhysicsTerms { c_hat: c.iter().map(|&v| Matrix::scalar(v)).collect(), eps_bar: eps };
        let l1 = loss(&LossWeights::new(LossVariant::L1), &y, &yhat, None).unwrap();
        prop_assert!(l1 >= 0.0);
        for v in [LossVariant::L2, LossVariant::L3, LossVariant::L4] {
            let lv = loss(&LossWeights::new(v), &y, &yhat, Some(&terms)).unwrap();
            prop_assert!(lv >= l1);
        }
    }

    #[test]
    fn ring_buffer_holds_latest(cap in 1usize..20, pushes in 0usize..60) {
        let mut b = RuntimeBuffers::new(cap, NoiseLabels::midpoint());
        for i in 0..pushes {
            b.push(i as f64, -(i as f64));
        }
        let expect: Vec<f64> = (pushes.saturating_sub(cap)..pushes).map(|i| i as f64).collect();
        prop_assert_eq!(b.measurements(), expect);
        prop_assert_eq!(b.len(), pushes.min(cap));
        prop_assert_eq!(b.is_full(), pushes >= cap);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn batch_gradient_ignores_sample_order(seed in any::<u64>(), shift in 0usize..12) {
        let ds = tiny_dataset(seed % 1000);
        let ctx = ModelContext::for_dataset(&ds).unwrap();
        let p = NetworkParams::init(&mut RandomSource::new(seed), 4).unwrap();
        let w = LossWeights::new(LossVariant::L4);
        let idx: Vec<usize> = (0..ds.len()).collect();
        let mut rotated = idx.clone();
        rotated.rotate_left(shift % ds.len());
        rotated.reverse();
        let a = batch_gradient(&ctx, &w, &ds, &idx, &p).unwrap();
        let b = batch_gradient(&ctx, &w, &ds, &rotated, &p).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn dataset_bytes_round_trip(seed in any::<u64>()) {
        let ds = tiny_dataset(seed);
        let back = Dataset::from_bytes(&ds.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), ds.to_bytes().unwrap());
        prop_assert_eq!(back.samples.len(), ds.samples.len());
    }

    #[test]
    fn innovation_covariance_is_positive(l in labels()) {
        let model = vehicle_model(&VehicleParams::default(), 0.01).unwrap();
        let ss = steady_state(&model, &l.noise_cov(), 1e-12, 100_000).unwrap();
        let (s, _) = gain_for(&ss.p_prior, &model.h, &l.noise_cov().r).unwrap();
        prop_assert!(s[(0, 0)] > l.r);
    }
}
