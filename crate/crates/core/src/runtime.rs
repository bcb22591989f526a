//! Closed-loop adaptive filter: buffer measurements and innovations, ask the
//! predictor for fresh covariances every step, filter with them.

use std::collections::VecDeque;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DEFAULT_WINDOW;
use crate::error::{Error, Result};
use crate::filter::{predict, update, FilterState, SystemModel};
use crate::numerics::{Matrix, RandomSource};
use crate::predictor::{LabelPredictor, PredictorInput};
use crate::training::fmt_f;
use crate::vehicle::{sample_labels, simulate, vehicle_model, ManeuverSpec, NoiseLabels, TrajectoryRecord, VehicleParams};

pub const DEFAULT_P0: f64 = 1e-3;
pub const DEFAULT_RUNS: usize = 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeConfig {
    pub window: usize,
    pub default_labels: NoiseLabels,
    /// Predict every `stride` steps after warmup; 1 means every step.
    pub stride: usize,
    pub p0: f64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            window: DEFAULT_WINDOW,
            default_labels: NoiseLabels::midpoint(),
            stride: 1,
            p0: DEFAULT_P0,
        }
    }
}

impl RuntimeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::Config("runtime window and stride must be positive".into()));
        }
        if !(self.p0 > 0.0 && self.p0.is_finite()) {
            return Err(Error::Config("initial covariance scale must be positive".into()));
        }
        self.default_labels.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RuntimeBuffers {
    capacity: usize,
    y: VecDeque<f64>,
    nu: VecDeque<f64>,
    pub prev_labels: NoiseLabels,
}

impl RuntimeBuffers {
    pub fn new(capacity: usize, prev_labels: NoiseLabels) -> Self {
        RuntimeBuffers {
            capacity,
            y: VecDeque::with_capacity(capacity),
            nu: VecDeque::with_capacity(capacity),
            prev_labels,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.y.len() == self.capacity
    }

    pub fn push(&mut self, y: f64, nu: f64) {
        if self.y.len() == self.capacity {
            self.y.pop_front();
            self.nu.pop_front();
        }
        self.y.push_back(y);
        self.nu.push_back(nu);
    }

    pub fn measurements(&self) -> Vec<f64> {
        self.y.iter().copied().collect()
    }

    pub fn innovations(&self) -> Vec<f64> {
        self.nu.iter().copied().collect()
    }

    /// Predictor input; only available once both buffers are full.
    pub fn input(&self) -> Result<PredictorInput> {
        if !self.is_full() {
            return Err(Error::InsufficientData(format!(
                "buffers hold {} of {} samples",
                self.len(),
                self.capacity
            )));
        }
        PredictorInput::new(self.measurements(), self.innovations(), self.prev_labels.as_array())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub time: f64,
    pub x_true: Option<[f64; 2]>,
    pub x_hat: [f64; 2],
    pub sig3: [f64; 2],
    pub labels: NoiseLabels,
    pub innovation: f64,
    pub s: f64,
    pub warmup: bool,
}

impl TraceRow {
    pub fn error(&self) -> Option<[f64; 2]> {
        self.x_true.map(|t| [t[0] - self.x_hat[0], t[1] - self.x_hat[1]])
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EstimateTrace {
    pub rows: Vec<TraceRow>,
    /// Step at which the filter produced a non-finite value, if it did.
    pub diverged_at: Option<usize>,
}

impl EstimateTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn post_warmup(&self) -> impl Iterator<Item = &TraceRow> {
        self.rows.iter().filter(|r| !r.warmup)
    }

    pub fn innovations(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.innovation).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record([
            "time",
            "beta_true",
            "beta_hat",
            "psidot_true",
            "psidot_hat",
            "err_beta",
            "err_psidot",
            "sig3_beta",
            "sig3_psidot",
            "qa_hat",
            "qb_hat",
            "r_hat",
            "warmup",
        ])
        .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(fmt_f).unwrap_or_default();
        for r in &self.rows {
            let err = r.error();
            w.write_record([
                fmt_f(r.time),
                opt(r.x_true.map(|t| t[0])),
                fmt_f(r.x_hat[0]),
                opt(r.x_true.map(|t| t[1])),
                fmt_f(r.x_hat[1]),
                opt(err.map(|e| e[0])),
                opt(err.map(|e| e[1])),
                fmt_f(r.sig3[0]),
                fmt_f(r.sig3[1]),
                fmt_f(r.labels.q_a),
                fmt_f(r.labels.q_b),
                fmt_f(r.labels.r),
                (r.warmup as u8).to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// `step, nu, s` rows for offline diagnostics.
    pub fn write_innovations_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["step", "nu", "s"]).map_err(csv_err)?;
        for (k, r) in self.rows.iter().enumerate() {
            w.write_record([k.to_string(), fmt_f(r.innovation), fmt_f(r.s)])
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Always returns the same labels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedLabels(pub NoiseLabels);

impl LabelPredictor for FixedLabels {
    fn predict(&self, _: &PredictorInput) -> Result<[f64; 3]> {
        Ok(self.0.as_array())
    }
}

/// Runs the adaptive filter over a recorded trajectory.
///
/// Step `k` uses the default labels while the buffers fill (the first `window`
/// steps); afterwards the predictor sees only data from steps before `k`.
pub fn run(
    model: &SystemModel,
    predictor: &(impl LabelPredictor + ?Sized),
    trajectory: &TrajectoryRecord,
    cfg: &RuntimeConfig,
) -> Result<EstimateTrace> {
    cfg.validate()?;
    let n = trajectory.len();
    let mut buffers = RuntimeBuffers::new(cfg.window, cfg.default_labels);
    let mut state = FilterState::from_prior(vec![0.0; 2], Matrix::identity(2).scale(cfg.p0))?;
    let mut labels = cfg.default_labels;
    let mut trace = EstimateTrace {
        rows: Vec::with_capacity(n),
        diverged_at: None,
    };
    let mut since_prediction = 0usize;
    for k in 0..n {
        let warmup = !buffers.is_full();
        if warmup {
            labels = cfg.default_labels;
        } else if since_prediction == 0 {
            let out = predictor.predict(&buffers.input()?)?;
            labels = NoiseLabels::from_array(out);
            labels.validate()?;
            buffers.prev_labels = labels;
        }
        if !warmup {
            since_prediction = (since_prediction + 1) % cfg.stride;
        }
        let noise = labels.noise_cov();
        let step = (|| {
            let prior = if k == 0 {
                state.clone()
            } else {
                predict(&state, model, &noise, &[trajectory.steering[k - 1]])?
            };
            update(&prior, model, &noise, &[trajectory.measurements[k]])
        })();
        state = match step {
            Ok(s) => s,
            Err(e) if e.exit_code() == 3 => {
                trace.diverged_at = Some(k);
                break;
            }
            Err(e) => return Err(e),
        };
        let nu = state.innovation[0];
        let p = &state.p_post;
        trace.rows.push(TraceRow {
            time: trajectory.times[k],
            x_true: trajectory.states.get(k).copied(),
            x_hat: [state.x_post[0], state.x_post[1]],
            sig3: [3.0 * p[(0, 0)].max(0.0).sqrt(), 3.0 * p[(1, 1)].max(0.0).sqrt()],
            labels,
            innovation: nu,
            s: state.s[(0, 0)],
            warmup,
        });
        buffers.push(trajectory.measurements[k], nu);
    }
    Ok(trace)
}

/// Fraction of post-warmup steps whose error lies inside the 3σ envelope, per state.
pub fn coverage(trace: &EstimateTrace) -> Result<[f64; 2]> {
    let mut inside = [0usize; 2];
    let mut count = 0usize;
    for r in trace.post_warmup() {
        let e = r
            .error()
            .ok_or_else(|| Error::InsufficientData("trace has no ground truth".into()))?;
        for i in 0..2 {
            if e[i].abs() <= r.sig3[i] {
                inside[i] += 1;
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::InsufficientData("no post-warmup steps".into()));
    }
    Ok(inside.map(|c| c as f64 / count as f64))
}

/// What supplies the covariances in one column of the run table.
pub enum RunPredictor<'a> {
    Model(&'a (dyn LabelPredictor + 'a)),
    /// The labels the run was simulated with.
    Oracle,
    Fixed(NoiseLabels),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRow {
    pub name: String,
    pub rmse_beta: f64,
    pub rmse_psidot: f64,
    pub runs: usize,
    pub diverged: usize,
}

pub const BASELINE_NAME: &str = "baseline";

/// Where evaluation runs come from.
#[derive(Clone, Debug)]
pub struct RunSetup {
    pub vehicle: VehicleParams,
    pub maneuvers: Vec<ManeuverSpec>,
    pub runtime: RuntimeConfig,
}

/// Simulates `count` fresh trajectories (fresh labels, maneuvers cycled) and
/// pools post-warmup state RMSE per predictor. A fixed-default baseline row is
/// appended.
pub fn evaluate_runs(
    setup: &RunSetup,
    predictors: &[(String, RunPredictor<'_>)],
    count: usize,
    seed: u64,
) -> Result<Vec<RunRow>> {
    if count == 0 {
        return Err(Error::Config("at least one evaluation run is required".into()));
    }
    if setup.maneuvers.is_empty() {
        return Err(Error::Config("no maneuvers configured".into()));
    }
    let dt = setup.maneuvers[0].dt;
    let model = vehicle_model(&setup.vehicle, dt)?;
    let baseline = RunPredictor::Fixed(setup.runtime.default_labels);
    let mut columns: Vec<(&str, &RunPredictor<'_>)> = predictors.iter().map(|(n, p)| (n.as_str(), p)).collect();
    columns.push((BASELINE_NAME, &baseline));

    let root = RandomSource::new(seed);
    // Per run and column: (sum sq β, sum sq ψ̇, steps, diverged).
    let per_run: Vec<Result<Vec<([f64; 2], usize, bool)>>> = (0..count)
        .into_par_iter()
        .map(|r| {
            let mut rng = root.derive(r as u64);
            let labels = sample_labels(&mut rng);
            let spec = &setup.maneuvers[r % setup.maneuvers.len()];
            let traj = simulate(&setup.vehicle, spec, &labels, &mut rng)?;
            columns
                .iter()
                .map(|(_, p)| {
                    let trace = match p {
                        RunPredictor::Model(m) => run(&model, *m, &traj, &setup.runtime)?,
                        RunPredictor::Oracle => run(&model, &FixedLabels(labels), &traj, &setup.runtime)?,
                        RunPredictor::Fixed(l) => run(&model, &FixedLabels(*l), &traj, &setup.runtime)?,
                    };
                    let mut sq = [0.0; 2];
                    let mut steps = 0;
                    for row in trace.post_warmup() {
                        let e = row.error().expect("simulated runs carry truth");
                        sq[0] += e[0] * e[0];
                        sq[1] += e[1] * e[1];
                        steps += 1;
                    }
                    Ok((sq, steps, trace.diverged_at.is_some()))
                })
                .collect()
        })
        .collect();

    let mut acc = vec![([0.0; 2], 0usize, 0usize); columns.len()];
    for run_cols in per_run {
        for (a, (sq, steps, div)) in acc.iter_mut().zip(run_cols?) {
            a.0[0] += sq[0];
            a.0[1] += sq[1];
            a.1 += steps;
            a.2 += div as usize;
        }
    }
    columns
        .iter()
        .zip(acc)
        .map(|((name, _), (sq, steps, diverged))| {
            if steps == 0 {
                return Err(Error::InsufficientData(format!("{name}: no post-warmup steps")));
            }
            Ok(RunRow {
                name: name.to_string(),
                rmse_beta: (sq[0] / steps as f64).sqrt(),
                rmse_psidot: (sq[1] / steps as f64).sqrt(),
                runs: count,
                diverged,
            })
        })
        .collect()
}

pub fn write_runs_csv(rows: &[RunRow], path: &Path) -> Result<()> {
    let csv_err = |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["variant", "rmse_beta", "rmse_psidot", "runs", "diverged"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.name.clone(),
            fmt_f(r.rmse_beta),
            fmt_f(r.rmse_psidot),
            r.runs.to_string(),
            r.diverged.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::NetworkParams;

    fn setup() -> (SystemModel, TrajectoryRecord) {
        let params = VehicleParams::default();
        let spec = ManeuverSpec::slalom(0.05, 0.5, 6.0, 0.01);
        let labels = NoiseLabels::new(2e-4, 4e-4, 3e-4);
        let traj = simulate(&params, &spec, &labels, &mut RandomSource::new(9)).unwrap();
        (vehicle_model(&params, 0.01).unwrap(), traj)
    }

    #[test]
    fn ring_buffer_keeps_latest() {
        let mut b = RuntimeBuffers::new(3, NoiseLabels::midpoint());
        assert!(b.input().is_err());
        for i in 0..5 {
            b.push(i as f64, -(i as f64));
        }
        assert!(b.is_full());
        assert_eq!(b.measurements(), vec![2.0, 3.0, 4.0]);
        assert_eq!(b.innovations(), vec![-2.0, -3.0, -4.0]);
        assert_eq!(b.input().unwrap().window(), 3);
    }

    #[test]
    fn warmup_rows_use_defaults() {
        let (model, traj) = setup();
        let cfg = RuntimeConfig {
            window: 100,
            ..RuntimeConfig::default()
        };
        let p = NetworkParams::init(&mut RandomSource::new(1), 8).unwrap();
        let trace = run(&model, &p, &traj, &cfg).unwrap();
        assert_eq!(trace.len(), traj.len());
        assert_eq!(trace.rows.iter().filter(|r| r.warmup).count(), 100);
        assert!(trace.rows[..100].iter().all(|r| r.warmup && r.labels == cfg.default_labels));
        assert!(trace.rows[100..].iter().all(|r| !r.warmup));
        assert!(trace.rows.iter().all(|r| r.sig3[0] >= 0.0 && r.sig3[1] >= 0.0));
        assert_eq!(trace, run(&model, &p, &traj, &cfg).unwrap());
    }

    #[test]
    fn prefix_run_reproduces_prefix_of_trace() {
        let (model, traj) = setup();
        let cfg = RuntimeConfig {
            window: 40,
            ..RuntimeConfig::default()
        };
        let p = NetworkParams::init(&mut RandomSource::new(2), 6).unwrap();
        let full = run(&model, &p, &traj, &cfg).unwrap();
        let cut = 250;
        let prefix = TrajectoryRecord {
            times: traj.times[..cut].to_vec(),
            states: traj.states[..cut].to_vec(),
            steering: traj.steering[..cut].to_vec(),
            measurements: traj.measurements[..cut].to_vec(),
            ..traj.clone()
        };
        let short = run(&model, &p, &prefix, &cfg).unwrap();
        assert_eq!(short.rows[..], full.rows[..cut]);
    }

    #[test]
    fn stride_holds_labels_between_predictions() {
        let (model, traj) = setup();
        let cfg = RuntimeConfig {
            window: 20,
            stride: 5,
            ..RuntimeConfig::default()
        };
        let p = NetworkParams::init(&mut RandomSource::new(3), 6).unwrap();
        let t = run(&model, &p, &traj, &cfg).unwrap();
        for k in 20..t.len() {
            if (k - 20) % 5 != 0 {
                assert_eq!(t.rows[k].labels, t.rows[k - 1].labels);
            }
        }
    }

    fn row(err: f64, sig3: f64, warmup: bool) -> TraceRow {
        TraceRow {
            time: 0.0,
            x_true: Some([err, err]),
            x_hat: [0.0, 0.0],
            sig3: [sig3, sig3],
            labels: NoiseLabels::midpoint(),
            innovation: 0.0,
            s: 1.0,
            warmup,
        }
    }

    #[test]
    fn coverage_edge_cases() {
        let zero = EstimateTrace {
            rows: vec![row(0.0, 0.3, false); 10],
            diverged_at: None,
        };
        assert_eq!(coverage(&zero).unwrap(), [1.0, 1.0]);
        let out = EstimateTrace {
            rows: vec![row(0.4, 0.3, false); 10],
            diverged_at: None,
        };
        assert_eq!(coverage(&out).unwrap(), [0.0, 0.0]);
        let warm = EstimateTrace {
            rows: vec![row(0.0, 0.3, true); 10],
            diverged_at: None,
        };
        assert!(matches!(coverage(&warm), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn run_table_shape_and_reproducibility() {
        let setup = RunSetup {
            vehicle: VehicleParams::default(),
            maneuvers: ManeuverSpec::default_set().iter().map(|m| m.with_duration(3.0)).collect(),
            runtime: RuntimeConfig::default(),
        };
        let preds = vec![("oracle".to_string(), RunPredictor::Oracle)];
        let a = evaluate_runs(&setup, &preds, 2, 7).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[1].name, BASELINE_NAME);
        assert_eq!(a, evaluate_runs(&setup, &preds, 2, 7).unwrap());
        assert!(evaluate_runs(&setup, &preds, 0, 7).is_err());
    }
}
