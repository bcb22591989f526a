//! Discrete linear Kalman filter.
//!
//! Time update `x⁻ = F x⁺ + B u`, `P⁻ = F P⁺ Fᵀ + Γ Q Γᵀ`; measurement update
//! with innovation `ν = z − H x⁻`, `S = H P⁻ Hᵀ + R`, `W = P⁻ Hᵀ S⁻¹` and the
//! Joseph-form covariance. Every covariance result is symmetrized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{solve_linear, Matrix};

pub const DEFAULT_RICCATI_TOL: f64 = 1e-12;
pub const DEFAULT_RICCATI_MAX_ITER: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemModel {
    pub f: Matrix,
    pub b: Matrix,
    pub h: Matrix,
    pub gamma: Matrix,
}

impl SystemModel {
    pub fn new(f: Matrix, b: Matrix, h: Matrix, gamma: Matrix) -> Result<Self> {
        let n = f.rows();
        if !f.is_square() {
            return Err(Error::dim("F must be square"));
        }
        if b.rows() != n {
            return Err(Error::dim(format!("B has {} rows, state has {n}", b.rows())));
        }
        if h.cols() != n {
            return Err(Error::dim(format!("H has {} columns, state has {n}", h.cols())));
        }
        if gamma.rows() != n {
            return Err(Error::dim(format!("Γ has {} rows, state has {n}", gamma.rows())));
        }
        for (name, m) in [("F", &f), ("B", &b), ("H", &h), ("Γ", &gamma)] {
            if !m.is_finite() {
                return Err(Error::Domain(format!("{name} has non-finite entries")));
            }
        }
        Ok(SystemModel { f, b, h, gamma })
    }

    pub fn state_dim(&self) -> usize {
        self.f.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.cols()
    }

    pub fn measurement_dim(&self) -> usize {
        self.h.rows()
    }

    pub fn noise_dim(&self) -> usize {
        self.gamma.cols()
    }
}

/// Process and measurement noise covariances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseCov {
    pub q: Matrix,
    pub r: Matrix,
}

impl NoiseCov {
    /// Checks squareness and symmetry. Positive definiteness is left to the
    /// operations that need it so that noiseless (`Q = 0`) models stay expressible.
    pub fn new(q: Matrix, r: Matrix) -> Result<Self> {
        for (name, m) in [("Q", &q), ("R", &r)] {
            if !m.is_square() {
                return Err(Error::dim(format!("{name} must be square")));
            }
            if !m.is_symmetric(1e-12) {
                return Err(Error::NotSymmetric);
            }
            if !m.is_finite() {
                return Err(Error::Domain(format!("{name} has non-finite entries")));
            }
        }
        Ok(NoiseCov { q, r })
    }

    fn check(&self, model: &SystemModel) -> Result<()> {
        if self.q.rows() != model.noise_dim() {
            return Err(Error::dim(format!(
                "Q is {}x{} but Γ has {} columns",
                self.q.rows(),
                self.q.cols(),
                model.noise_dim()
            )));
        }
        if self.r.rows() != model.measurement_dim() {
            return Err(Error::dim(format!(
                "R is {}x{} but H has {} rows",
                self.r.rows(),
                self.r.cols(),
                model.measurement_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterState {
    pub x_post: Vec<f64>,
    pub p_post: Matrix,
    pub x_prior: Vec<f64>,
    pub p_prior: Matrix,
    pub innovation: Vec<f64>,
    pub s: Matrix,
    pub gain: Matrix,
}

impl FilterState {
    /// Posterior initialised to `(x0, p0)`; the prior mirrors it until the first predict.
    pub fn new(x0: Vec<f64>, p0: Matrix) -> Result<Self> {
        if !p0.is_square() || p0.rows() != x0.len() {
            return Err(Error::dim("initial covariance does not match state"));
        }
        Ok(FilterState {
            x_prior: x0.clone(),
            p_prior: p0.clone(),
            x_post: x0,
            p_post: p0,
            innovation: Vec::new(),
            s: Matrix::zeros(0, 0),
            gain: Matrix::zeros(0, 0),
        })
    }

    /// Filter whose first measurement update uses `(x0, p0)` directly as the prior.
    pub fn from_prior(x0: Vec<f64>, p0: Matrix) -> Result<Self> {
        Self::new(x0, p0)
    }
}

fn gamma_q_gamma(model: &SystemModel, noise: &NoiseCov) -> Result<Matrix> {
    model.gamma.mul(&noise.q)?.mul(&model.gamma.transpose())
}

pub fn predict(
    state: &FilterState,
    model: &SystemModel,
    noise: &NoiseCov,
    u: &[f64],
) -> Result<FilterState> {
    noise.check(model)?;
    if u.len() != model.input_dim() {
        return Err(Error::dim(format!(
            "input has {} entries, B has {} columns",
            u.len(),
            model.input_dim()
        )));
    }
    let fx = model.f.mul_vec(&state.x_post)?;
    let bu = model.b.mul_vec(u)?;
    let x_prior: Vec<f64> = fx.iter().zip(&bu).map(|(a, b)| a + b).collect();
    let p_prior = model
        .f
        .mul(&state.p_post)?
        .mul(&model.f.transpose())?
        .add(&gamma_q_gamma(model, noise)?)?
        .symmetrize();
    if !p_prior.is_finite() || x_prior.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow("predict"));
    }
    Ok(FilterState {
        x_prior,
        p_prior,
        ..state.clone()
    })
}

/// Joseph-form covariance `(I−WH) P (I−WH)ᵀ + W R Wᵀ`.
pub fn joseph_update(p_prior: &Matrix, gain: &Matrix, h: &Matrix, r: &Matrix) -> Result<Matrix> {
    let n = p_prior.rows();
    let i_wh = Matrix::identity(n).sub(&gain.mul(h)?)?;
    Ok(i_wh
        .mul(p_prior)?
        .mul(&i_wh.transpose())?
        .add(&gain.mul(r)?.mul(&gain.transpose())?)?
        .symmetrize())
}

/// Innovation covariance and gain for a prior covariance.
pub fn gain_for(p_prior: &Matrix, h: &Matrix, r: &Matrix) -> Result<(Matrix, Matrix)> {
    let s = h.mul(p_prior)?.mul(&h.transpose())?.add(r)?.symmetrize();
    let pht = p_prior.mul(&h.transpose())?;
    // W = P Hᵀ S⁻¹  ⇔  S Wᵀ = H P  (S and P symmetric)
    let wt = solve_linear(&s, &pht.transpose()).map_err(|e| match e {
        Error::Singular { .. } => Error::SingularInnovationCovariance,
        other => other,
    })?;
    Ok((s, wt.transpose()))
}

pub fn update(
    state: &FilterState,
    model: &SystemModel,
    noise: &NoiseCov,
    z: &[f64],
) -> Result<FilterState> {
    noise.check(model)?;
    if z.len() != model.measurement_dim() {
        return Err(Error::dim(format!(
            "measurement has {} entries, H has {} rows",
            z.len(),
            model.measurement_dim()
        )));
    }
    let hx = model.h.mul_vec(&state.x_prior)?;
    let innovation: Vec<f64> = z.iter().zip(&hx).map(|(a, b)| a - b).collect();
    let (s, gain) = gain_for(&state.p_prior, &model.h, &noise.r)?;
    let correction = gain.mul_vec(&innovation)?;
    let x_post: Vec<f64> = state
        .x_prior
        .iter()
        .zip(&correction)
        .map(|(a, b)| a + b)
        .collect();
    let p_post = joseph_update(&state.p_prior, &gain, &model.h, &noise.r)?;
    if !p_post.is_finite() || x_post.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow("update"));
    }
    Ok(FilterState {
        x_post,
        p_post,
        x_prior: state.x_prior.clone(),
        p_prior: state.p_prior.clone(),
        innovation,
        s,
        gain,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SteadyStateSolution {
    pub p_prior: Matrix,
    pub gain: Matrix,
    pub s: Matrix,
    pub iterations: usize,
    pub converged: bool,
}

/// One pass of the prior-covariance Riccati recursion.
pub fn riccati_step(model: &SystemModel, noise: &NoiseCov, p_prior: &Matrix) -> Result<Matrix> {
    let (_, gain) = gain_for(p_prior, &model.h, &noise.r)?;
    let p_post = joseph_update(p_prior, &gain, &model.h, &noise.r)?;
    Ok(model
        .f
        .mul(&p_post)?
        .mul(&model.f.transpose())?
        .add(&gamma_q_gamma(model, noise)?)?
        .symmetrize())
}

/// Steady-state prior covariance and gain by fixed-point iteration from `P = I`.
pub fn steady_state(
    model: &SystemModel,
    noise: &NoiseCov,
    tol: f64,
    max_iter: usize,
) -> Result<SteadyStateSolution> {
    steady_state_from(
        model,
        noise,
        &Matrix::identity(model.state_dim()),
        tol,
        max_iter,
    )
}

/// Fixed-point iteration started from `p0`; returns the first `P` with
/// `max|ric(P) − P| < tol`.
pub fn steady_state_from(
    model: &SystemModel,
    noise: &NoiseCov,
    p0: &Matrix,
    tol: f64,
    max_iter: usize,
) -> Result<SteadyStateSolution> {
    noise.check(model)?;
    if !(tol > 0.0) {
        return Err(Error::Domain("tolerance must be positive".into()));
    }
    let mut p = p0.clone();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let next = riccati_step(model, noise, &p)?;
        iterations += 1;
        if !next.is_finite() {
            return Err(Error::NumericOverflow("riccati iteration"));
        }
        let delta = next.sub(&p)?.max_abs();
        // Keep the iterate whose own step is below tolerance; the step size is
        // not monotone, so the newer iterate may still move by more than `tol`.
        if delta < tol {
            converged = true;
            break;
        }
        p = next;
    }
    let (s, gain) = gain_for(&p, &model.h, &noise.r)?;
    Ok(SteadyStateSolution {
        p_prior: p,
        gain,
        s,
        iterations,
        converged,
    })
}

/// Prior error covariance of a filter running a fixed (possibly suboptimal) gain:
/// the fixed point of `P = F̃ P F̃ᵀ + F W R Wᵀ Fᵀ + Γ Q Γᵀ` with `F̃ = F(I − WH)`.
pub fn error_covariance_for_gain(
    model: &SystemModel,
    noise: &NoiseCov,
    gain: &Matrix,
    tol: f64,
    max_iter: usize,
) -> Result<(Matrix, bool)> {
    noise.check(model)?;
    let f_tilde = closed_loop(model, gain)?;
    let fw = model.f.mul(gain)?;
    let forcing = fw
        .mul(&noise.r)?
        .mul(&fw.transpose())?
        .add(&gamma_q_gamma(model, noise)?)?;
    let mut p = forcing.clone();
    for _ in 0..max_iter {
        let next = f_tilde
            .mul(&p)?
            .mul(&f_tilde.transpose())?
            .add(&forcing)?
            .symmetrize();
        if !next.is_finite() {
            return Err(Error::NumericOverflow("lyapunov iteration"));
        }
        let delta = next.sub(&p)?.max_abs();
        p = next;
        if delta < tol {
            return Ok((p, true));
        }
    }
    Ok((p, false))
}

/// `F̃ = F (I − W H)`.
pub fn closed_loop(model: &SystemModel, gain: &Matrix) -> Result<Matrix> {
    let n = model.state_dim();
    model
        .f
        .mul(&Matrix::identity(n).sub(&gain.mul(&model.h)?)?)
}

/// Expands the one-step predicted error `m` steps back under a fixed gain:
///
/// `x̃⁻ₖ = F̃^m x̃⁻ₖ₋ₘ − Σⱼ F̃^{j−1} F W vₖ₋ⱼ + Σⱼ F̃^{j−1} Γ wₖ₋ⱼ`, j = 1..m.
///
/// `w` and `v` are in chronological order, so `w[m − j]` is `wₖ₋ⱼ`.
pub fn recursive_error_expand(
    model: &SystemModel,
    gain: &Matrix,
    w: &[Vec<f64>],
    v: &[Vec<f64>],
    initial_error: &[f64],
) -> Result<Vec<f64>> {
    let n = model.state_dim();
    if w.len() != v.len() {
        return Err(Error::dim(format!(
            "noise sequences have lengths {} and {}",
            w.len(),
            v.len()
        )));
    }
    if initial_error.len() != n {
        return Err(Error::dim("initial error does not match state dimension"));
    }
    if gain.shape() != (n, model.measurement_dim()) {
        return Err(Error::dim("gain shape does not match model"));
    }
    let m = w.len();
    let f_tilde = closed_loop(model, gain)?;
    let fw = model.f.mul(gain)?;

    let mut out = f_tilde.pow(m)?.mul_vec(initial_error)?;
    let mut power = Matrix::identity(n);
    for j in 1..=m {
        let wj = &w[m - j];
        let vj = &v[m - j];
        if wj.len() != model.noise_dim() || vj.len() != model.measurement_dim() {
            return Err(Error::dim(format!("noise sample {} has the wrong length", m - j)));
        }
        let meas = power.mul(&fw)?.mul_vec(vj)?;
        let proc = power.mul(&model.gamma)?.mul_vec(wj)?;
        for i in 0..n {
            out[i] += proc[i] - meas[i];
        }
        power = power.mul(&f_tilde)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_vector, RandomSource};
    use approx::assert_relative_eq;

    fn scalar_model(f: f64) -> SystemModel {
        SystemModel::new(
            Matrix::scalar(f),
            Matrix::scalar(0.0),
            Matrix::scalar(1.0),
            Matrix::scalar(1.0),
        )
        .unwrap()
    }

    fn scalar_noise(q: f64, r: f64) -> NoiseCov {
        NoiseCov::new(Matrix::scalar(q), Matrix::scalar(r)).unwrap()
    }

    fn two_state_model() -> SystemModel {
        SystemModel::new(
            Matrix::from_rows(&[[0.9467, 0.0005], [0.128, 0.936]]),
            Matrix::from_rows(&[[0.5333], [0.384]]),
            Matrix::from_rows(&[[0.0, 1.0]]),
            Matrix::identity(2),
        )
        .unwrap()
    }

    #[test]
    fn predict_identity_without_noise_is_noop() {
        let model = SystemModel::new(
            Matrix::identity(2),
            Matrix::zeros(2, 1),
            Matrix::from_rows(&[[1.0, 0.0]]),
            Matrix::identity(2),
        )
        .unwrap();
        let noise = NoiseCov::new(Matrix::zeros(2, 2), Matrix::scalar(1.0)).unwrap();
        let p = Matrix::from_rows(&[[2.0, 0.3], [0.3, 1.0]]);
        let st = FilterState::new(vec![1.0, -2.0], p.clone()).unwrap();
        let out = predict(&st, &model, &noise, &[0.7]).unwrap();
        assert_eq!(out.x_prior, vec![1.0, -2.0]);
        assert_eq!(out.p_prior, p);
    }

    #[test]
    fn predict_scalar_hand_arithmetic() {
        let st = FilterState::new(vec![0.0], Matrix::scalar(1.0)).unwrap();
        let out = predict(&st, &scalar_model(1.0), &scalar_noise(1.0, 1.0), &[0.0]).unwrap();
        assert_eq!(out.p_prior[(0, 0)], 2.0);
    }

    #[test]
    fn predict_matches_dense_multiply() {
        let model = two_state_model();
        let noise = NoiseCov::new(Matrix::from_diag(&[1e-5, 1e-4]), Matrix::scalar(1e-4)).unwrap();
        let mut rng = RandomSource::new(5);
        let x = vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
        let a = rng.uniform(0.1, 1.0);
        let c = rng.uniform(-0.05, 0.05);
        let d = rng.uniform(0.1, 1.0);
        let p = Matrix::from_rows(&[[a, c], [c, d]]);
        let st = FilterState::new(x.clone(), p.clone()).unwrap();
        let out = predict(&st, &model, &noise, &[0.02]).unwrap();

        // Hand-expanded 2x2 products.
        let f = &model.f;
        let expected_x0 = f[(0, 0)] * x[0] + f[(0, 1)] * x[1] + model.b[(0, 0)] * 0.02;
        let expected_x1 = f[(1, 0)] * x[0] + f[(1, 1)] * x[1] + model.b[(1, 0)] * 0.02;
        assert_relative_eq!(out.x_prior[0], expected_x0, epsilon = 1e-12);
        assert_relative_eq!(out.x_prior[1], expected_x1, epsilon = 1e-12);
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = noise.q[(i, j)];
                for k in 0..2 {
                    for l in 0..2 {
                        acc += f[(i, k)] * p[(k, l)] * f[(j, l)];
                    }
                }
                assert_relative_eq!(out.p_prior[(i, j)], acc, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn update_scalar_hand_arithmetic() {
        let mut st = FilterState::new(vec![0.0], Matrix::scalar(1.0)).unwrap();
        st.x_prior = vec![2.0];
        st.p_prior = Matrix::scalar(1.0);
        let out = update(&st, &scalar_model(1.0), &scalar_noise(1.0, 1.0), &[4.0]).unwrap();
        assert_eq!(out.gain[(0, 0)], 0.5);
        assert_eq!(out.innovation, vec![2.0]);
        assert_eq!(out.x_post, vec![3.0]);
        assert_eq!(out.p_post[(0, 0)], 0.5);
    }

    #[test]
    fn update_uninformative_measurement_barely_moves() {
        let model = two_state_model();
        let noise = NoiseCov::new(Matrix::from_diag(&[1e-5, 1e-4]), Matrix::scalar(1e12)).unwrap();
        let mut st = FilterState::new(vec![0.1, 0.2], Matrix::identity(2)).unwrap();
        st = predict(&st, &model, &noise, &[0.0]).unwrap();
        let out = update(&st, &model, &noise, &[5.0]).unwrap();
        let moved = ((out.x_post[0] - out.x_prior[0]).powi(2)
            + (out.x_post[1] - out.x_prior[1]).powi(2))
        .sqrt();
        assert!(moved <= 1e-6 * out.innovation[0].abs());
    }

    #[test]
    fn joseph_equals_short_form_for_optimal_gain() {
        let mut rng = RandomSource::new(9);
        let model = two_state_model();
        for _ in 0..20 {
            let a = rng.uniform(0.5, 2.0);
            let c = rng.uniform(-0.3, 0.3);
            let d = rng.uniform(0.5, 2.0);
            let r = rng.uniform(0.1, 2.0);
            let noise = NoiseCov::new(Matrix::identity(2), Matrix::scalar(r)).unwrap();
            let mut st = FilterState::new(vec![0.0, 0.0], Matrix::identity(2)).unwrap();
            st.p_prior = Matrix::from_rows(&[[a, c], [c, d]]);
            let out = update(&st, &model, &noise, &[0.3]).unwrap();
            let wswt = out.gain.mul(&out.s).unwrap().mul(&out.gain.transpose()).unwrap();
            let short = st.p_prior.sub(&wswt).unwrap();
            assert!(out.p_post.sub(&short).unwrap().max_abs() <= 1e-10);
        }
    }

    #[test]
    fn update_rejects_singular_innovation_covariance() {
        let model = scalar_model(1.0);
        let noise = scalar_noise(1.0, 0.0);
        let mut st = FilterState::new(vec![0.0], Matrix::scalar(0.0)).unwrap();
        st.p_prior = Matrix::scalar(0.0);
        assert!(matches!(
            update(&st, &model, &noise, &[1.0]),
            Err(Error::SingularInnovationCovariance)
        ));
    }

    #[test]
    fn posterior_never_exceeds_prior_and_stays_symmetric() {
        let model = two_state_model();
        let noise = NoiseCov::new(Matrix::from_diag(&[1e-5, 1e-4]), Matrix::scalar(1e-4)).unwrap();
        let mut rng = RandomSource::new(21);
        let mut st = FilterState::new(vec![0.0, 0.0], Matrix::from_diag(&[1e-2, 1e-2])).unwrap();
        for _ in 0..10_000 {
            st = predict(&st, &model, &noise, &[rng.uniform(-0.05, 0.05)]).unwrap();
            // Deliberately suboptimal measurement noise to exercise Joseph form.
            let z = [rng.standard_normal() * 1e-2];
            st = update(&st, &model, &noise, &z).unwrap();
            let diff = st.p_prior.sub(&st.p_post).unwrap();
            let (a, b, d) = (diff[(0, 0)], diff[(0, 1)], diff[(1, 1)]);
            let min_eig = 0.5 * (a + d) - (0.25 * (a - d).powi(2) + b * b).sqrt();
            assert!(min_eig >= -1e-12);
            assert!((st.p_post[(0, 1)] - st.p_post[(1, 0)]).abs() <= 1e-12);
        }
    }

    #[test]
    fn steady_state_scalar_golden_ratio() {
        let sol = steady_state(
            &scalar_model(1.0),
            &scalar_noise(1.0, 1.0),
            DEFAULT_RICCATI_TOL,
            DEFAULT_RICCATI_MAX_ITER,
        )
        .unwrap();
        assert!(sol.converged);
        // Root of P² − Q P − Q R = 0.
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        assert_relative_eq!(sol.p_prior[(0, 0)], golden, epsilon = 1e-9);
        assert_relative_eq!(sol.gain[(0, 0)], golden - 1.0, epsilon = 1e-9);
    }

    #[test]
    fn steady_state_noiseless_stable_decays() {
        let sol = steady_state(&scalar_model(0.5), &scalar_noise(0.0, 1.0), 1e-14, 100_000).unwrap();
        assert!(sol.converged);
        assert!(sol.p_prior[(0, 0)] < 1e-12);
        assert!(sol.gain[(0, 0)] < 1e-12);
    }

    #[test]
    fn steady_state_reports_non_convergence() {
        let sol = steady_state(&scalar_model(1.0), &scalar_noise(1.0, 1.0), 1e-300, 3).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 3);
    }

    #[test]
    fn steady_state_is_idempotent() {
        let model = two_state_model();
        let noise = NoiseCov::new(Matrix::from_diag(&[1e-5, 1e-4]), Matrix::scalar(1e-4)).unwrap();
        let sol = steady_state(&model, &noise, 1e-12, 100_000).unwrap();
        assert!(sol.converged);
        let again = steady_state_from(&model, &noise, &sol.p_prior, 1e-12, 100_000).unwrap();
        assert!(again.converged);
        assert!(again.iterations <= 2);
    }

    #[test]
    fn recursive_error_trivial_cases() {
        let model = two_state_model();
        let gain = Matrix::from_rows(&[[0.1], [0.4]]);
        let e = vec![0.3, -0.2];
        assert_eq!(recursive_error_expand(&model, &gain, &[], &[], &e).unwrap(), e);

        let zeros_w = vec![vec![0.0, 0.0]; 7];
        let zeros_v = vec![vec![0.0]; 7];
        let got = recursive_error_expand(&model, &gain, &zeros_w, &zeros_v, &e).unwrap();
        let want = closed_loop(&model, &gain).unwrap().pow(7).unwrap().mul_vec(&e).unwrap();
        assert_relative_eq!(got[0], want[0], epsilon = 1e-15);
        assert_relative_eq!(got[1], want[1], epsilon = 1e-15);
    }

    #[test]
    fn recursive_error_dimension_errors() {
        let model = two_state_model();
        let gain = Matrix::from_rows(&[[0.1], [0.4]]);
        let w = vec![vec![0.0, 0.0]; 3];
        let v = vec![vec![0.0]; 2];
        assert!(recursive_error_expand(&model, &gain, &w, &v, &[0.0, 0.0]).is_err());
        assert!(recursive_error_expand(&model, &gain, &w[..2], &v, &[0.0]).is_err());
    }

    #[test]
    fn recursive_error_matches_rollout() {
        let model = two_state_model();
        let noise = NoiseCov::new(Matrix::from_diag(&[1e-5, 1e-4]), Matrix::scalar(1e-4)).unwrap();
        let sol = steady_state(&model, &noise, 1e-14, 100_000).unwrap();
        let mut rng = RandomSource::new(77);
        let m = 50;
        let mut x = vec![0.01, -0.02];
        let mut x_prior = vec![0.0, 0.0];
        let initial_error: Vec<f64> = x.iter().zip(&x_prior).map(|(a, b)| a - b).collect();
        let mut ws = Vec::new();
        let mut vs = Vec::new();
        for _ in 0..m {
            let u = rng.uniform(-0.05, 0.05);
            let w = gaussian_vector(&mut rng, &noise.q).unwrap();
            let v = gaussian_vector(&mut rng, &noise.r).unwrap();
            let z = model.h.mul_vec(&x).unwrap()[0] + v[0];
            let nu = z - model.h.mul_vec(&x_prior).unwrap()[0];
            let x_post: Vec<f64> = (0..2).map(|i| x_prior[i] + sol.gain[(i, 0)] * nu).collect();
            let fx = model.f.mul_vec(&x).unwrap();
            let fxp = model.f.mul_vec(&x_post).unwrap();
            x = (0..2).map(|i| fx[i] + model.b[(i, 0)] * u + w[i]).collect();
            x_prior = (0..2).map(|i| fxp[i] + model.b[(i, 0)] * u).collect();
            ws.push(w);
            vs.push(v);
        }
        let rollout: Vec<f64> = x.iter().zip(&x_prior).map(|(a, b)| a - b).collect();
        let expanded = recursive_error_expand(&model, &sol.gain, &ws, &vs, &initial_error).unwrap();
        for i in 0..2 {
            assert!((rollout[i] - expanded[i]).abs() <= 1e-9);
        }
    }

    #[test]
    fn error_covariance_for_optimal_gain_is_riccati_solution() {
        let model = two_state_model();
        let noise = NoiseCov::new(Matrix::from_diag(&[1e-5, 1e-4]), Matrix::scalar(1e-4)).unwrap();
        let sol = steady_state(&model, &noise, 1e-16, 100_000).unwrap();
        let (p, ok) = error_covariance_for_gain(&model, &noise, &sol.gain, 1e-18, 100_000).unwrap();
        assert!(ok);
        assert!(p.sub(&sol.p_prior).unwrap().max_abs() <= 1e-12);
    }
}
