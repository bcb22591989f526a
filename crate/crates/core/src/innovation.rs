//! Innovation-sequence diagnostics: sample and theoretical lag correlations,
//! time-averaged autocorrelation, time-averaged NIS and the consistency report
//! that combines them into hypothesis tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{closed_loop, NoiseCov, SystemModel};
use crate::numerics::{chi_square_quantile, normal_quantile, solve_linear, Matrix};

pub const DEFAULT_CORRELATION_LAGS: usize = 5;
pub const DEFAULT_AUTOCORRELATION_LAGS: usize = 20;
pub const DEFAULT_ALPHA: f64 = 0.05;
/// Fraction of tested lags that must fall inside the whiteness bound.
pub const WHITENESS_PASS_FRACTION: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct InnovationSequence {
    values: Vec<Vec<f64>>,
    s_values: Vec<Matrix>,
}

impl InnovationSequence {
    pub fn new(values: Vec<Vec<f64>>, s_values: Vec<Matrix>) -> Result<Self> {
        if values.len() != s_values.len() {
            return Err(Error::dim(format!(
                "{} innovations but {} covariances",
                values.len(),
                s_values.len()
            )));
        }
        if let Some(first) = values.first() {
            let p = first.len();
            for (k, (v, s)) in values.iter().zip(&s_values).enumerate() {
                if v.len() != p || s.shape() != (p, p) {
                    return Err(Error::dim(format!("inconsistent shapes at step {k}")));
                }
            }
        }
        Ok(InnovationSequence { values, s_values })
    }

    /// Scalar innovations with their scalar variances.
    pub fn from_scalars(values: &[f64], s: &[f64]) -> Result<Self> {
        Self::new(
            values.iter().map(|&v| vec![v]).collect(),
            s.iter().map(|&v| Matrix::scalar(v)).collect(),
        )
    }

    /// Scalar innovations sharing one variance.
    pub fn from_scalars_constant(values: &[f64], s: f64) -> Self {
        InnovationSequence {
            values: values.iter().map(|&v| vec![v]).collect(),
            s_values: vec![Matrix::scalar(s); values.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn s_values(&self) -> &[Matrix] {
        &self.s_values
    }

    pub fn component(&self, l: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[l]).collect()
    }
}

/// `Ĉᵢ = 1/(N−M) Σ_{j=1}^{N−M} νⱼ νⱼ₊ᵢᵀ` for `i = 0..M−1`.
pub fn sample_correlation(seq: &InnovationSequence, lags: usize) -> Result<Vec<Matrix>> {
    let n = seq.len();
    if lags == 0 {
        return Err(Error::Domain("at least one correlation lag is required".into()));
    }
    if n <= lags {
        return Err(Error::InsufficientData(format!(
            "{n} innovations cannot support {lags} correlation lags"
        )));
    }
    let p = seq.dim();
    let count = n - lags;
    let v = seq.values();
    Ok((0..lags)
        .map(|i| {
            let mut c = Matrix::zeros(p, p);
            for j in 0..count {
                for a in 0..p {
                    for b in 0..p {
                        c[(a, b)] += v[j][a] * v[j + i][b];
                    }
                }
            }
            c.scale(1.0 / count as f64)
        })
        .collect())
}

/// Theoretical lag correlation under a fixed gain.
///
/// `C₀ = H P Hᵀ + R`; for `m > 0`, `Cₘ = H F̃^{m−1} F (P Hᵀ − W C₀)` with
/// `F̃ = F (I − W H)`. `p_prior` must be the error covariance the gain actually
/// produces; for the optimal gain the bracket vanishes.
pub fn theoretical_correlation(
    model: &SystemModel,
    noise: &NoiseCov,
    p_prior: &Matrix,
    gain: &Matrix,
    m: usize,
) -> Result<Matrix> {
    let n = model.state_dim();
    let p = model.measurement_dim();
    if p_prior.shape() != (n, n) {
        return Err(Error::dim("prior covariance does not match state dimension"));
    }
    if gain.shape() != (n, p) {
        return Err(Error::dim("gain does not match model"));
    }
    if noise.r.shape() != (p, p) {
        return Err(Error::dim("R does not match measurement dimension"));
    }
    let c0 = model
        .h
        .mul(p_prior)?
        .mul(&model.h.transpose())?
        .add(&noise.r)?;
    if m == 0 {
        return Ok(c0);
    }
    let bracket = p_prior
        .mul(&model.h.transpose())?
        .sub(&gain.mul(&c0)?)?;
    let f_tilde = closed_loop(model, gain)?;
    model
        .h
        .mul(&f_tilde.pow(m - 1)?)?
        .mul(&model.f)?
        .mul(&bracket)
}

/// Normalized autocorrelation of component `l` at a single lag, summing over the
/// overlapping range `k = 1..N−j` in both numerator and denominator.
pub fn autocorrelation_at(seq: &InnovationSequence, l: usize, lag: usize) -> Result<f64> {
    let n = seq.len();
    if l >= seq.dim().max(1) {
        return Err(Error::Domain(format!("component {l} out of range")));
    }
    if lag >= n {
        return Err(Error::InsufficientData(format!("lag {lag} needs more than {n} samples")));
    }
    let v = seq.values();
    let mut cross = 0.0;
    let mut head = 0.0;
    let mut tail = 0.0;
    for k in 0..(n - lag) {
        let a = v[k][l];
        let b = v[k + lag][l];
        cross += a * b;
        head += a * a;
        tail += b * b;
    }
    let denom = (head * tail).sqrt();
    if !(denom > 0.0) {
        return Err(Error::UndefinedStatistic(format!(
            "zero-variance window for component {l} at lag {lag}"
        )));
    }
    Ok(cross / denom)
}

/// `ρ̄ₗ(j)` for `j = 1..=lags`.
pub fn time_avg_autocorrelation(
    seq: &InnovationSequence,
    l: usize,
    lags: usize,
) -> Result<Vec<f64>> {
    if seq.len() <= lags {
        return Err(Error::InsufficientData(format!(
            "{} innovations cannot support {lags} lags",
            seq.len()
        )));
    }
    (1..=lags).map(|j| autocorrelation_at(seq, l, j)).collect()
}

/// `ε̄ = 1/N Σ νₖᵀ Sₖ⁻¹ νₖ`.
pub fn time_avg_nis(seq: &InnovationSequence) -> Result<f64> {
    if seq.is_empty() {
        return Err(Error::InsufficientData("empty innovation sequence".into()));
    }
    let mut total = 0.0;
    for (v, s) in seq.values().iter().zip(seq.s_values()) {
        total += nis_term(v, s)?;
    }
    Ok(total / seq.len() as f64)
}

fn nis_term(v: &[f64], s: &Matrix) -> Result<f64> {
    if v.len() == 1 {
        let s = s[(0, 0)];
        if !(s.abs() > 0.0) || !s.is_finite() {
            return Err(Error::SingularInnovationCovariance);
        }
        return Ok(v[0] * v[0] / s);
    }
    let x = solve_linear(s, &Matrix::column(v)).map_err(|e| match e {
        Error::Singular { .. } => Error::SingularInnovationCovariance,
        other => other,
    })?;
    Ok(v.iter().zip(x.as_slice()).map(|(a, b)| a * b).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsBounds {
    pub alpha: f64,
    /// Symmetric whiteness bound `z_{1−α/2}/√N` on each `ρ̄ₗ(j)`.
    pub whiteness: f64,
    pub nis_lower: f64,
    pub nis_upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsFlags {
    pub whiteness_pass_fraction: Option<f64>,
    pub whiteness_pass: Option<bool>,
    pub nis_in_interval: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub n: usize,
    /// One row per measurement component, lags `1..=J`.
    pub rho_bar: Vec<Vec<f64>>,
    pub eps_bar: f64,
    /// `Ĉᵢ` for `i = 0..M−1`, each flattened row-major.
    pub c_hat: Vec<Vec<f64>>,
    pub bounds: StatsBounds,
    pub flags: StatsFlags,
}

impl StatsReport {
    pub fn whiteness_pass_fraction(&self) -> Option<f64> {
        self.flags.whiteness_pass_fraction
    }

    pub fn nis_in_interval(&self) -> bool {
        self.flags.nis_in_interval
    }
}

/// Two-sided `1 − α` interval for the time-averaged NIS of `n` samples of dimension `p`.
pub fn nis_interval(n: usize, p: usize, alpha: f64) -> (f64, f64) {
    let dof = (n * p) as f64;
    (
        chi_square_quantile(dof, alpha / 2.0) / n as f64,
        chi_square_quantile(dof, 1.0 - alpha / 2.0) / n as f64,
    )
}

/// Runs every diagnostic. `lags = 0` skips the whiteness test and
/// `correlation_lags = 0` skips `Ĉᵢ`.
pub fn consistency_report(
    seq: &InnovationSequence,
    correlation_lags: usize,
    lags: usize,
    alpha: f64,
) -> Result<StatsReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha {alpha} outside (0, 1)")));
    }
    let n = seq.len();
    let eps_bar = time_avg_nis(seq)?;
    let p = seq.dim();
    let (nis_lower, nis_upper) = nis_interval(n, p, alpha);
    let whiteness = normal_quantile(1.0 - alpha / 2.0) / (n as f64).sqrt();

    let c_hat = if correlation_lags > 0 {
        sample_correlation(seq, correlation_lags)?
            .into_iter()
            .map(Matrix::into_vec)
            .collect()
    } else {
        Vec::new()
    };

    let mut rho_bar = Vec::new();
    let (mut inside, mut tested) = (0usize, 0usize);
    if lags > 0 {
        for l in 0..p {
            let rho = time_avg_autocorrelation(seq, l, lags)?;
            tested += rho.len();
            inside += rho.iter().filter(|r| r.abs() <= whiteness).count();
            rho_bar.push(rho);
        }
    }
    let fraction = (tested > 0).then(|| inside as f64 / tested as f64);

    Ok(StatsReport {
        n,
        rho_bar,
        eps_bar,
        c_hat,
        bounds: StatsBounds {
            alpha,
            whiteness,
            nis_lower,
            nis_upper,
        },
        flags: StatsFlags {
            whiteness_pass_fraction: fraction,
            whiteness_pass: fraction.map(|f| f >= WHITENESS_PASS_FRACTION),
            nis_in_interval: eps_bar >= nis_lower && eps_bar <= nis_upper,
        },
    })
}
