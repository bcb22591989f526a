//! Single-track (bicycle) lateral dynamics, steering maneuvers and noisy
//! trajectory simulation.
//!
//! State is `[β, ψ̇]` (slip angle, yaw rate), input is the steering angle δ and
//! the only measurement is the yaw rate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{NoiseCov, SystemModel};
use crate::numerics::{gaussian_vector, Matrix, RandomSource};

/// Upper bound on every noise variance label.
pub const LABEL_BOUND: f64 = 1e-3;
/// Lower bound used when sampling labels, keeping covariances positive definite.
pub const LABEL_FLOOR: f64 = 1e-8;
const GRAVITY: f64 = 9.81;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    /// kg
    pub mass: f64,
    /// kg·m²
    pub yaw_inertia: f64,
    /// CG to front axle, m
    pub a: f64,
    /// CG to rear axle, m
    pub b: f64,
    /// N/rad
    pub c_alpha_f: f64,
    /// N/rad
    pub c_alpha_r: f64,
    /// m/s
    pub speed: f64,
    /// Divide the slip-angle input gain by the speed (`C_αf/(mV)`) instead of `C_αf/m`.
    #[serde(default)]
    pub bicycle_b_over_v: bool,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            mass: 1500.0,
            yaw_inertia: 2500.0,
            a: 1.2,
            b: 1.6,
            c_alpha_f: 80_000.0,
            c_alpha_r: 80_000.0,
            speed: 20.0,
            bicycle_b_over_v: false,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("mass", self.mass),
            ("yaw_inertia", self.yaw_inertia),
            ("a", self.a),
            ("b", self.b),
            ("c_alpha_f", self.c_alpha_f),
            ("c_alpha_r", self.c_alpha_r),
            ("speed", self.speed),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("vehicle {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn wheelbase(&self) -> f64 {
        self.a + self.b
    }
}

/// Continuous-time `(F_c, B_c)` of the linear single-track model with linear tires.
pub fn continuous_matrices(params: &VehicleParams) -> (Matrix, Matrix) {
    let VehicleParams {
        mass: m,
        yaw_inertia: iz,
        a,
        b,
        c_alpha_f: cf,
        c_alpha_r: cr,
        speed: v,
        bicycle_b_over_v,
    } = *params;
    let f = Matrix::from_rows(&[
        [-(cf + cr) / (m * v), -(a * cf - b * cr) / (m * v * v)],
        [-(a * cf - b * cr) / iz, -(a * a * cf + b * b * cr) / (iz * v)],
    ]);
    let b0 = if bicycle_b_over_v { cf / (m * v) } else { cf / m };
    let bm = Matrix::from_rows(&[[b0], [a * cf / iz]]);
    (f, bm)
}

/// Forward-Euler discretization: `F_d = I + F_c·dt`, `B_d = B_c·dt`.
pub fn discretize(f_c: &Matrix, b_c: &Matrix, dt: f64) -> Result<(Matrix, Matrix)> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    let f_d = Matrix::identity(f_c.rows()).add(&f_c.scale(dt))?;
    Ok((f_d, b_c.scale(dt)))
}

/// Discrete filter model for the vehicle: yaw-rate measurement and `Γ = I₂`.
pub fn vehicle_model(params: &VehicleParams, dt: f64) -> Result<SystemModel> {
    params.validate()?;
    let (f_c, b_c) = continuous_matrices(params);
    let (f_d, b_d) = discretize(&f_c, &b_c, dt)?;
    SystemModel::new(
        f_d,
        b_d,
        Matrix::from_rows(&[[0.0, 1.0]]),
        Matrix::identity(2),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManeuverKind {
    Skidpad,
    Slalom,
    Fishhook,
}

impl ManeuverKind {
    pub fn name(self) -> &'static str {
        match self {
            ManeuverKind::Skidpad => "skidpad",
            ManeuverKind::Slalom => "slalom",
            ManeuverKind::Fishhook => "fishhook",
        }
    }
}

impl std::str::FromStr for ManeuverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "skidpad" => Ok(ManeuverKind::Skidpad),
            "slalom" => Ok(ManeuverKind::Slalom),
            "fishhook" => Ok(ManeuverKind::Fishhook),
            other => Err(Error::Config(format!("unknown maneuver '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManeuverSpec {
    pub kind: ManeuverKind,
    /// rad
    pub amplitude: f64,
    /// Hz, slalom only
    #[serde(default)]
    pub frequency: f64,
    /// s
    pub duration: f64,
    /// s
    pub dt: f64,
}

impl ManeuverSpec {
    pub fn new(kind: ManeuverKind, amplitude: f64, frequency: f64, duration: f64, dt: f64) -> Self {
        ManeuverSpec {
            kind,
            amplitude,
            frequency,
            duration,
            dt,
        }
    }

    pub fn skidpad(amplitude: f64, duration: f64, dt: f64) -> Self {
        Self::new(ManeuverKind::Skidpad, amplitude, 0.0, duration, dt)
    }

    pub fn slalom(amplitude: f64, frequency: f64, duration: f64, dt: f64) -> Self {
        Self::new(ManeuverKind::Slalom, amplitude, frequency, duration, dt)
    }

    pub fn fishhook(amplitude: f64, duration: f64, dt: f64) -> Self {
        Self::new(ManeuverKind::Fishhook, amplitude, 0.0, duration, dt)
    }

    /// The default maneuver set used for datasets: one of each kind, 10 s at 100 Hz.
    pub fn default_set() -> Vec<ManeuverSpec> {
        vec![
            ManeuverSpec::skidpad(0.05, 10.0, 0.01),
            ManeuverSpec::slalom(0.05, 0.5, 10.0, 0.01),
            ManeuverSpec::fishhook(0.05, 10.0, 0.01),
        ]
    }

    pub fn with_duration(&self, duration: f64) -> Self {
        ManeuverSpec {
            duration,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("maneuver dt must be positive, got {}", self.dt)));
        }
        if !(self.duration >= self.dt) {
            return Err(Error::Config("maneuver duration shorter than one step".into()));
        }
        if !(self.amplitude.abs() <= 0.5) {
            return Err(Error::Config(format!(
                "steering amplitude {} outside ±0.5 rad",
                self.amplitude
            )));
        }
        if self.kind == ManeuverKind::Slalom && !(self.frequency > 0.0) {
            return Err(Error::Config("slalom needs a positive frequency".into()));
        }
        Ok(())
    }

    /// Number of simulated samples, `t_k = k·dt` for `k < steps`.
    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

/// Steering angle at time `t`.
///
/// Fishhook: linear ramp to `+A` over the first 20% of the duration, hold, then
/// counter-steer to `−A` from 60% onwards.
pub fn steering(spec: &ManeuverSpec, t: f64) -> Result<f64> {
    if !(t >= 0.0 && t <= spec.duration + 1e-9 * spec.duration.max(1.0)) {
        return Err(Error::Domain(format!(
            "t = {t} outside [0, {}]",
            spec.duration
        )));
    }
    let amp = spec.amplitude;
    Ok(match spec.kind {
        ManeuverKind::Skidpad => amp,
        ManeuverKind::Slalom => amp * (2.0 * PI * spec.frequency * t).sin(),
        ManeuverKind::Fishhook => {
            let ramp_end = 0.2 * spec.duration;
            let flip = 0.6 * spec.duration;
            if t < ramp_end {
                amp * t / ramp_end
            } else if t < flip {
                amp
            } else {
                -amp
            }
        }
    })
}

/// Noise variances a trajectory was generated with: process noise on the slip-angle
/// and yaw-rate channels and the yaw-rate measurement noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseLabels {
    pub q_a: f64,
    pub q_b: f64,
    pub r: f64,
}

impl NoiseLabels {
    pub const fn new(q_a: f64, q_b: f64, r: f64) -> Self {
        NoiseLabels { q_a, q_b, r }
    }

    pub fn midpoint() -> Self {
        let mid = 0.5 * LABEL_BOUND;
        NoiseLabels::new(mid, mid, mid)
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        NoiseLabels::new(v[0], v[1], v[2])
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.q_a, self.q_b, self.r]
    }

    pub fn validate(&self) -> Result<()> {
        for v in self.as_array() {
            if !(v > 0.0 && v <= LABEL_BOUND) {
                return Err(Error::Domain(format!(
                    "noise variance {v:e} outside (0, {LABEL_BOUND:e}]"
                )));
            }
        }
        Ok(())
    }

    pub fn noise_cov(&self) -> NoiseCov {
        NoiseCov {
            q: Matrix::from_diag(&[self.q_a, self.q_b]),
            r: Matrix::scalar(self.r),
        }
    }
}

/// Independent draws, each uniform on `(LABEL_FLOOR, LABEL_BOUND]`.
pub fn sample_labels(rng: &mut RandomSource) -> NoiseLabels {
    let mut draw = || LABEL_BOUND - rng.uniform(0.0, LABEL_BOUND - LABEL_FLOOR);
    let q_a = draw();
    let q_b = draw();
    let r = draw();
    NoiseLabels::new(q_a, q_b, r)
}

/// Plant used to generate trajectories.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantVariant {
    /// Same linear model the filter uses.
    #[default]
    Nominal,
    /// Stress test: axle stiffness scaled by `1 − κ (a_y/g)²` each step with `a_y ≈ V ψ̇`.
    LoadTransfer { kappa: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub maneuver: ManeuverKind,
    pub times: Vec<f64>,
    /// `[β, ψ̇]` per step.
    pub states: Vec<[f64; 2]>,
    pub steering: Vec<f64>,
    /// Noisy yaw rate per step.
    pub measurements: Vec<f64>,
    pub labels: NoiseLabels,
    pub seed: u64,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Rolls `x_{k+1} = F_d x_k + B_d δ_k + w_k` from `x₀ = 0` and measures
/// `ỹ_k = ψ̇_k + v_k`.
pub fn simulate(
    params: &VehicleParams,
    spec: &ManeuverSpec,
    labels: &NoiseLabels,
    rng: &mut RandomSource,
) -> Result<TrajectoryRecord> {
    simulate_plant(params, spec, labels, PlantVariant::Nominal, rng)
}

pub fn simulate_plant(
    params: &VehicleParams,
    spec: &ManeuverSpec,
    labels: &NoiseLabels,
    plant: PlantVariant,
    rng: &mut RandomSource,
) -> Result<TrajectoryRecord> {
    params.validate()?;
    spec.validate()?;
    let seed = rng.seed();
    let nominal = vehicle_model(params, spec.dt)?;
    let q = Matrix::from_diag(&[labels.q_a, labels.q_b]);
    let r = Matrix::scalar(labels.r);
    let steps = spec.steps();

    let mut times = Vec::with_capacity(steps);
    let mut states = Vec::with_capacity(steps);
    let mut deltas = Vec::with_capacity(steps);
    let mut measurements = Vec::with_capacity(steps);
    let mut x = [0.0_f64; 2];

    for k in 0..steps {
        let t = k as f64 * spec.dt;
        let delta = steering(spec, t)?;
        let v = gaussian_vector(rng, &r)?[0];
        times.push(t);
        states.push(x);
        deltas.push(delta);
        measurements.push(x[1] + v);

        let (f, b) = match plant {
            PlantVariant::Nominal => (nominal.f.clone(), nominal.b.clone()),
            PlantVariant::LoadTransfer { kappa } => {
                let ay = params.speed * x[1];
                let factor = (1.0 - kappa * (ay / GRAVITY).powi(2)).max(0.1);
                let scaled = VehicleParams {
                    c_alpha_f: params.c_alpha_f * factor,
                    c_alpha_r: params.c_alpha_r * factor,
                    ..params.clone()
                };
                let (f_c, b_c) = continuous_matrices(&scaled);
                discretize(&f_c, &b_c, spec.dt)?
            }
        };
        let w = gaussian_vector(rng, &q)?;
        let next = [
            f[(0, 0)] * x[0] + f[(0, 1)] * x[1] + b[(0, 0)] * delta + w[0],
            f[(1, 0)] * x[0] + f[(1, 1)] * x[1] + b[(1, 0)] * delta + w[1],
        ];
        if !next.iter().all(|v| v.is_finite() && v.abs() < 1e6) {
            return Err(Error::UnstableSimulation { step: k + 1 });
        }
        x = next;
    }

    Ok(TrajectoryRecord {
        maneuver: spec.kind,
        times,
        states,
        steering: deltas,
        measurements,
        labels: *labels,
        seed,
    })
}
