//! Labeled training windows and their on-disk container.
//!
//! Each trajectory gets two independently sampled label triples: the true noise
//! variances it is simulated with, and the "previous estimate" a steady-state
//! filter is run with to produce the innovations. A sample is a window of `m`
//! consecutive `(ỹ, ν)` pairs plus both triples.
//!
//! File layout: `b"NCDS"`, a little-endian `u32` header length, the JSON header,
//! then `count` records of `2m + 6` little-endian `f64`:
//! `[ỹ × m, ν × m, Q_a_prev, Q_b_prev, R_prev, Q_a, Q_b, R]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{steady_state, SystemModel};
use crate::numerics::RandomSource;
use crate::vehicle::{
    sample_labels, simulate, vehicle_model, ManeuverSpec, NoiseLabels, TrajectoryRecord,
    VehicleParams,
};

pub const DATASET_MAGIC: &[u8; 4] = b"NCDS";
pub const DATASET_FORMAT: &str = "noisecov-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const DEFAULT_WINDOW: usize = 100;
pub const DEFAULT_COUNT: usize = 5000;
pub const DEFAULT_WINDOWS_PER_TRAJECTORY: usize = 8;
pub const DEFAULT_BURN_IN: usize = 200;
/// Riccati tolerance for the dataset filter; covariances here are ~1e-4.
pub const DATASET_RICCATI_TOL: f64 = 1e-16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub count: usize,
    pub window: usize,
    pub windows_per_trajectory: usize,
    /// Steps skipped at the start of every trajectory before the first window.
    pub burn_in: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            count: DEFAULT_COUNT,
            window: DEFAULT_WINDOW,
            windows_per_trajectory: DEFAULT_WINDOWS_PER_TRAJECTORY,
            burn_in: DEFAULT_BURN_IN,
        }
    }
}

impl DatasetSpec {
    pub fn trajectories(&self) -> usize {
        self.count.div_ceil(self.windows_per_trajectory)
    }

    pub fn window_starts(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.windows_per_trajectory).map(move |i| self.burn_in + i * self.window)
    }

    pub fn validate(&self, maneuvers: &[ManeuverSpec]) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("dataset count must be at least 1".into()));
        }
        if self.window < 2 {
            return Err(Error::Config("window must hold at least two steps".into()));
        }
        if self.windows_per_trajectory == 0 {
            return Err(Error::Config("windows_per_trajectory must be at least 1".into()));
        }
        if maneuvers.is_empty() {
            return Err(Error::Config("maneuver list is empty".into()));
        }
        let needed = self.burn_in + self.windows_per_trajectory * self.window;
        for spec in maneuvers {
            spec.validate()?;
            if spec.steps() < needed {
                return Err(Error::Config(format!(
                    "{} maneuver has {} steps but windows need {needed}",
                    spec.kind.name(),
                    spec.steps()
                )));
            }
        }
        let dt = maneuvers[0].dt;
        if maneuvers.iter().any(|m| m.dt != dt) {
            return Err(Error::Config("all maneuvers must share one dt".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub window: usize,
    pub count: usize,
    pub record_len: usize,
    pub trajectories: usize,
    pub windows_per_trajectory: usize,
    pub burn_in: usize,
    /// Trajectory `i` is generated from seed `master_seed + i`.
    pub master_seed: u64,
    pub vehicle: VehicleParams,
    pub maneuvers: Vec<ManeuverSpec>,
}

impl DatasetHeader {
    pub fn dt(&self) -> f64 {
        self.maneuvers[0].dt
    }

    pub fn model(&self) -> Result<SystemModel> {
        vehicle_model(&self.vehicle, self.dt())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSample {
    pub measurements: Vec<f64>,
    pub innovations: Vec<f64>,
    /// Covariances the filter that produced `innovations` was run with.
    pub prev_labels: NoiseLabels,
    pub labels: NoiseLabels,
    pub trajectory: usize,
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<DatasetSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub master_seed: u64,
    pub spec: DatasetSpec,
    pub vehicle: VehicleParams,
    pub maneuvers: Vec<ManeuverSpec>,
    pub trajectory_seeds: Vec<u64>,
}

/// Innovations of a steady-state filter tuned to `labels`, started at `x̂ = 0`.
pub fn steady_state_innovations(
    model: &SystemModel,
    labels: &NoiseLabels,
    trajectory: &TrajectoryRecord,
) -> Result<Vec<f64>> {
    let sol = steady_state(model, &labels.noise_cov(), DATASET_RICCATI_TOL, 100_000)?;
    let gain = [sol.gain[(0, 0)], sol.gain[(1, 0)]];
    let f = &model.f;
    let b = &model.b;
    let mut x_prior = [0.0_f64; 2];
    let mut out = Vec::with_capacity(trajectory.len());
    for (k, &z) in trajectory.measurements.iter().enumerate() {
        let nu = z - x_prior[1];
        out.push(nu);
        let post = [x_prior[0] + gain[0] * nu, x_prior[1] + gain[1] * nu];
        let u = trajectory.steering[k];
        x_prior = [
            f[(0, 0)] * post[0] + f[(0, 1)] * post[1] + b[(0, 0)] * u,
            f[(1, 0)] * post[0] + f[(1, 1)] * post[1] + b[(1, 0)] * u,
        ];
        if !(x_prior[0].is_finite() && x_prior[1].is_finite()) {
            return Err(Error::NumericOverflow("dataset filter rollout"));
        }
    }
    Ok(out)
}

struct TrajectoryWindows {
    samples: Vec<DatasetSample>,
}

fn build_trajectory(
    index: usize,
    master_seed: u64,
    spec: &DatasetSpec,
    params: &VehicleParams,
    maneuver: &ManeuverSpec,
    model: &SystemModel,
) -> Result<TrajectoryWindows> {
    let mut rng = RandomSource::new(master_seed.wrapping_add(index as u64));
    let labels = sample_labels(&mut rng);
    let prev = sample_labels(&mut rng);
    let record = simulate(params, maneuver, &labels, &mut rng)?;
    let innovations = steady_state_innovations(model, &prev, &record)?;
    let samples = spec
        .window_starts()
        .map(|start| DatasetSample {
            measurements: record.measurements[start..start + spec.window].to_vec(),
            innovations: innovations[start..start + spec.window].to_vec(),
            prev_labels: prev,
            labels,
            trajectory: index,
            start,
        })
        .collect();
    Ok(TrajectoryWindows { samples })
}

/// Simulates `ceil(count / windows_per_trajectory)` trajectories, cycling through
/// `maneuvers`, and keeps the first `count` windows.
pub fn generate_dataset(
    spec: &DatasetSpec,
    params: &VehicleParams,
    maneuvers: &[ManeuverSpec],
    master_seed: u64,
) -> Result<Dataset> {
    spec.validate(maneuvers)?;
    params.validate()?;
    let dt = maneuvers[0].dt;
    let model = vehicle_model(params, dt)?;
    let n_traj = spec.trajectories();

    let built: Vec<TrajectoryWindows> = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            build_trajectory(
                i,
                master_seed,
                spec,
                params,
                &maneuvers[i % maneuvers.len()],
                &model,
            )
        })
        .collect::<Result<_>>()?;

    let samples: Vec<DatasetSample> = built
        .into_iter()
        .flat_map(|t| t.samples)
        .take(spec.count)
        .collect();

    Ok(Dataset {
        header: DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            window: spec.window,
            count: samples.len(),
            record_len: 2 * spec.window + 6,
            trajectories: n_traj,
            windows_per_trajectory: spec.windows_per_trajectory,
            burn_in: spec.burn_in,
            master_seed,
            vehicle: params.clone(),
            maneuvers: maneuvers.to_vec(),
        },
        samples,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn manifest(&self) -> Manifest {
        let h = &self.header;
        Manifest {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            master_seed: h.master_seed,
            spec: DatasetSpec {
                count: h.count,
                window: h.window,
                windows_per_trajectory: h.windows_per_trajectory,
                burn_in: h.burn_in,
            },
            vehicle: h.vehicle.clone(),
            maneuvers: h.maneuvers.clone(),
            trajectory_seeds: (0..h.trajectories as u64)
                .map(|i| h.master_seed.wrapping_add(i))
                .collect(),
        }
    }

    /// Training and validation sample indices: every fifth trajectory is held out.
    pub fn split_indices(&self) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            if is_validation_trajectory(s.trajectory) {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        (train, val)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| {
            Error::Config(format!("cannot serialize dataset header: {e}"))
        })?;
        let mut out = Vec::with_capacity(8 + header.len() + self.len() * self.header.record_len * 8);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for s in &self.samples {
            for v in s
                .measurements
                .iter()
                .chain(&s.innovations)
                .chain(&s.prev_labels.as_array())
                .chain(&s.labels.as_array())
            {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        if bytes.len() < 8 || &bytes[..4] != DATASET_MAGIC {
            return Err(Error::IncompatibleDataset("missing dataset magic".into()));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = bytes
            .get(8..8 + header_len)
            .ok_or_else(|| Error::IncompatibleDataset("truncated header".into()))?;
        let header: DatasetHeader = serde_json::from_slice(body)
            .map_err(|e| Error::IncompatibleDataset(format!("bad header: {e}")))?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(Error::IncompatibleDataset(format!(
                "expected {DATASET_FORMAT} v{DATASET_VERSION}, found {} v{}",
                header.format, header.version
            )));
        }
        if header.record_len != 2 * header.window + 6 {
            return Err(Error::IncompatibleDataset("record length does not match window".into()));
        }
        if header.maneuvers.is_empty() || header.windows_per_trajectory == 0 {
            return Err(Error::IncompatibleDataset("header lacks maneuvers".into()));
        }
        let payload = &bytes[8 + header_len..];
        let expected = header.count * header.record_len * 8;
        if payload.len() != expected {
            return Err(Error::IncompatibleDataset(format!(
                "payload holds {} bytes, header promises {expected}",
                payload.len()
            )));
        }
        let m = header.window;
        let starts: Vec<usize> = (0..header.windows_per_trajectory)
            .map(|i| header.burn_in + i * m)
            .collect();
        let samples = payload
            .chunks_exact(header.record_len * 8)
            .enumerate()
            .map(|(i, chunk)| {
                let vals: Vec<f64> = chunk
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                DatasetSample {
                    measurements: vals[..m].to_vec(),
                    innovations: vals[m..2 * m].to_vec(),
                    prev_labels: NoiseLabels::new(vals[2 * m], vals[2 * m + 1], vals[2 * m + 2]),
                    labels: NoiseLabels::new(vals[2 * m + 3], vals[2 * m + 4], vals[2 * m + 5]),
                    trajectory: i / header.windows_per_trajectory,
                    start: starts[i % header.windows_per_trajectory],
                }
            })
            .collect();
        Ok(Dataset { header, samples })
    }

    pub fn read(path: &Path) -> Result<Dataset> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Dataset::from_bytes(&bytes)
    }

    /// CSV with the same columns as the binary records.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let m = self.header.window;
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
            path: path.into(),
            source: e,
        })?;
        let mut header: Vec<String> = (0..m).map(|i| format!("y_{i}")).collect();
        header.extend((0..m).map(|i| format!("nu_{i}")));
        header.extend(
            ["qa_prev", "qb_prev", "r_prev", "qa", "qb", "r"]
                .iter()
                .map(|s| s.to_string()),
        );
        let csv_err = |e| Error::Csv {
            path: path.into(),
            source: e,
        };
        w.write_record(&header).map_err(csv_err)?;
        for s in &self.samples {
            let row: Vec<String> = s
                .measurements
                .iter()
                .chain(&s.innovations)
                .chain(&s.prev_labels.as_array())
                .chain(&s.labels.as_array())
                .map(|v| format!("{v:e}"))
                .collect();
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn is_validation_trajectory(trajectory: usize) -> bool {
    trajectory % 5 == 4
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(count: usize) -> DatasetSpec {
        DatasetSpec {
            count,
            window: 20,
            windows_per_trajectory: 4,
            burn_in: 10,
        }
    }

    fn maneuvers() -> Vec<ManeuverSpec> {
        vec![
            ManeuverSpec::skidpad(0.05, 1.0, 0.01),
            ManeuverSpec::slalom(0.05, 0.5, 1.0, 0.01),
            ManeuverSpec::fishhook(0.05, 1.0, 0.01),
        ]
    }

    #[test]
    fn three_windows_from_one_trajectory() {
        let spec = DatasetSpec {
            count: 3,
            window: 100,
            windows_per_trajectory: 8,
            burn_in: 200,
        };
        let ds = generate_dataset(
            &spec,
            &VehicleParams::default(),
            &[ManeuverSpec::skidpad(0.05, 10.0, 0.01)],
            5,
        )
        .unwrap();
        assert_eq!(ds.len(), 3);
        assert!(ds.samples.iter().all(|s| s.trajectory == 0));
        assert!(ds.samples.windows(2).all(|w| w[0].start < w[1].start));
        assert!(ds.samples.iter().all(|s| s.measurements.len() == 100));
    }

    #[test]
    fn maneuvers_cycle_and_labels_are_in_range() {
        let ds = generate_dataset(&small_spec(30), &VehicleParams::default(), &maneuvers(), 1)
            .unwrap();
        assert_eq!(ds.header.trajectories, 8);
        for s in &ds.samples {
            s.labels.validate().unwrap();
            s.prev_labels.validate().unwrap();
        }
        // Labels are constant within a trajectory and differ between them.
        assert_eq!(ds.samples[0].labels, ds.samples[3].labels);
        assert_ne!(ds.samples[0].labels, ds.samples[4].labels);
    }

    #[test]
    fn window_must_fit_in_trajectory() {
        let spec = DatasetSpec {
            count: 3,
            window: 100,
            windows_per_trajectory: 8,
            burn_in: 200,
        };
        let err = generate_dataset(&spec, &VehicleParams::default(), &maneuvers(), 1);
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(generate_dataset(&small_spec(3), &VehicleParams::default(), &[], 1).is_err());
    }

    #[test]
    fn bytes_round_trip_and_regenerate_identically() {
        let a = generate_dataset(&small_spec(10), &VehicleParams::default(), &maneuvers(), 3)
            .unwrap();
        let b = generate_dataset(&small_spec(10), &VehicleParams::default(), &maneuvers(), 3)
            .unwrap();
        let bytes = a.to_bytes().unwrap();
        assert_eq!(bytes, b.to_bytes().unwrap());
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn truncated_or_foreign_files_are_rejected() {
        let a = generate_dataset(&small_spec(4), &VehicleParams::default(), &maneuvers(), 3)
            .unwrap();
        let bytes = a.to_bytes().unwrap();
        assert!(matches!(
            Dataset::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::IncompatibleDataset(_))
        ));
        assert!(Dataset::from_bytes(b"nope").is_err());
        let mut tampered = bytes.clone();
        let text = String::from_utf8_lossy(&tampered).replace("\"version\":1", "\"version\":9");
        tampered = text.into_bytes();
        assert!(Dataset::from_bytes(&tampered).is_err());
    }

    #[test]
    fn split_holds_out_whole_trajectories() {
        let ds = generate_dataset(&small_spec(40), &VehicleParams::default(), &maneuvers(), 2)
            .unwrap();
        let (train, val) = ds.split_indices();
        assert_eq!(train.len() + val.len(), 40);
        assert_eq!(val.len(), 8);
        for &i in &val {
            assert!(train.iter().all(|&j| ds.samples[j].trajectory != ds.samples[i].trajectory));
        }
    }

    #[test]
    fn innovations_match_generic_filter() {
        use crate::filter::{predict, update, FilterState};
        let params = VehicleParams::default();
        let spec = ManeuverSpec::slalom(0.05, 0.5, 2.0, 0.01);
        let labels = NoiseLabels::new(2e-4, 3e-4, 1e-4);
        let rec = simulate(&params, &spec, &labels, &mut RandomSource::new(8)).unwrap();
        let model = vehicle_model(&params, 0.01).unwrap();
        let fast = steady_state_innovations(&model, &labels, &rec).unwrap();

        // Generic predict/update started at the steady-state covariance keeps the same gain.
        let noise = labels.noise_cov();
        let sol = steady_state(&model, &noise, DATASET_RICCATI_TOL, 100_000).unwrap();
        let mut st = FilterState::from_prior(vec![0.0, 0.0], sol.p_prior.clone()).unwrap();
        for k in 0..rec.len() {
            if k > 0 {
                st = predict(&st, &model, &noise, &[rec.steering[k - 1]]).unwrap();
            }
            st = update(&st, &model, &noise, &[rec.measurements[k]]).unwrap();
            assert!((st.innovation[0] - fast[k]).abs() < 1e-12);
        }
    }
}
