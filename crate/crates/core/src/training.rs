//! Losses, physics penalties, the training loop and label evaluation.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetSample};
use crate::error::{Error, Result};
use crate::filter::{steady_state_from, SystemModel};
use crate::innovation::{sample_correlation, InnovationSequence, DEFAULT_CORRELATION_LAGS};
use crate::numerics::{Matrix, RandomSource};
use crate::predictor::{adam_step, backward, forward, AdamState, LabelPredictor, NetworkParams, PredictorInput};
use crate::vehicle::NoiseLabels;

pub const DEFAULT_EPOCHS: usize = 25;
pub const DEFAULT_BATCH: usize = 128;
pub const PHYSICS_RICCATI_TOL: f64 = 1e-15;
const PHYSICS_RICCATI_MAX_ITER: usize = 200_000;
/// Relative step for finite differences of the penalty w.r.t. each output.
pub const PENALTY_FD_STEP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossVariant {
    L1,
    L2,
    L3,
    L4,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [LossVariant::L1, LossVariant::L2, LossVariant::L3, LossVariant::L4];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::L1 => "L1",
            LossVariant::L2 => "L2",
            LossVariant::L3 => "L3",
            LossVariant::L4 => "L4",
        }
    }

    pub fn uses_physics(self) -> bool {
        self != LossVariant::L1
    }

    fn uses_correlation(self) -> bool {
        matches!(self, LossVariant::L2 | LossVariant::L4)
    }

    fn uses_nis(self) -> bool {
        matches!(self, LossVariant::L3 | LossVariant::L4)
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "L1" => Ok(LossVariant::L1),
            "L2" => Ok(LossVariant::L2),
            "L3" => Ok(LossVariant::L3),
            "L4" => Ok(LossVariant::L4),
            other => Err(Error::Config(format!("unknown loss variant {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub variant: LossVariant,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    /// The NIS penalty is `|ε̄ − nis_target|`; 0 penalizes `|ε̄|` itself.
    #[serde(default)]
    pub nis_target: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::new(LossVariant::L1)
    }
}

impl LossWeights {
    pub fn new(variant: LossVariant) -> Self {
        LossWeights {
            variant,
            w1: 1.0,
            w2: 0.1,
            w3: 0.1,
            nis_target: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w1", self.w1), ("w2", self.w2), ("w3", self.w3)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and nonnegative")));
            }
        }
        if !self.nis_target.is_finite() {
            return Err(Error::Config("nis_target must be finite".into()));
        }
        Ok(())
    }
}

/// Innovation statistics of a window filtered with predicted covariances.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicsTerms {
    /// `Ĉ₁ … Ĉ_{M−1}`.
    pub c_hat: Vec<Matrix>,
    pub eps_bar: f64,
}

impl PhysicsTerms {
    pub fn correlation_sum(&self) -> f64 {
        self.c_hat.iter().flat_map(|c| c.as_slice()).map(|v| v.abs()).sum()
    }
}

/// Terms that make up one sample's loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub label: f64,
    pub correlation: f64,
    pub nis: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.label + self.correlation + self.nis
    }
}

fn label_loss(weights: &LossWeights, y: &[f64; 3], yhat: &[f64; 3]) -> f64 {
    weights.w1 * y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn penalty_parts(weights: &LossWeights, terms: &PhysicsTerms) -> (f64, f64) {
    let v = weights.variant;
    let corr = if v.uses_correlation() {
        weights.w2 * terms.correlation_sum()
    } else {
        0.0
    };
    let nis = if v.uses_nis() {
        weights.w3 * (terms.eps_bar - weights.nis_target).abs()
    } else {
        0.0
    };
    (corr, nis)
}

pub fn loss_parts(
    weights: &LossWeights,
    y: &[f64; 3],
    yhat: &[f64; 3],
    physics: Option<&PhysicsTerms>,
) -> Result<LossParts> {
    let label = label_loss(weights, y, yhat);
    let (correlation, nis) = match (weights.variant.uses_physics(), physics) {
        (false, _) => (0.0, 0.0),
        (true, Some(t)) => penalty_parts(weights, t),
        (true, None) => {
            return Err(Error::Config(format!(
                "loss {} needs innovation statistics",
                weights.variant
            )))
        }
    };
    Ok(LossParts {
        label,
        correlation,
        nis,
    })
}

pub fn loss(weights: &LossWeights, y: &[f64; 3], yhat: &[f64; 3], physics: Option<&PhysicsTerms>) -> Result<f64> {
    loss_parts(weights, y, yhat, physics).map(|p| p.total())
}

/// Filter model and settings shared by every physics rollout.
#[derive(Clone, Debug)]
pub struct ModelContext {
    pub model: SystemModel,
    /// `M`; penalties use lags `1..M−1`.
    pub correlation_lags: usize,
    pub riccati_tol: f64,
}

impl ModelContext {
    pub fn new(model: SystemModel) -> Result<Self> {
        if model.state_dim() != 2 || model.measurement_dim() != 1 || model.noise_dim() != 2 {
            return Err(Error::dim("noise labels describe a two-state, one-measurement model"));
        }
        Ok(ModelContext {
            model,
            correlation_lags: DEFAULT_CORRELATION_LAGS,
            riccati_tol: PHYSICS_RICCATI_TOL,
        })
    }

    pub fn for_dataset(dataset: &Dataset) -> Result<Self> {
        ModelContext::new(dataset.header.model()?)
    }

    fn gain(&self, labels: &NoiseLabels, warm: Option<&Matrix>) -> Result<SteadyGain> {
        let noise = labels.noise_cov();
        let start = match warm {
            Some(p) => p.clone(),
            None => Matrix::identity(2),
        };
        let sol = steady_state_from(&self.model, &noise, &start, self.riccati_tol, PHYSICS_RICCATI_MAX_ITER)?;
        let w = [sol.gain[(0, 0)], sol.gain[(1, 0)]];
        let s = sol.s[(0, 0)];
        if !(s > 0.0) || !w.iter().all(|v| v.is_finite()) {
            return Err(Error::SingularInnovationCovariance);
        }
        Ok(SteadyGain {
            w,
            s,
            p_prior: sol.p_prior,
        })
    }
}

struct SteadyGain {
    w: [f64; 2],
    s: f64,
    p_prior: Matrix,
}

/// Re-filters a window with a steady-state filter tuned to new labels.
///
/// The stored innovations come from a filter tuned to the sample's previous
/// labels. The prior difference `e = x̂¹ − x̂⁰` between the two filters obeys an
/// input-free recursion, so the new innovations follow without the steering
/// input: `ν¹ = ν − H e`, `e ← F (e + W₁ν¹ − W₀ν)`, with `e = 0` at the window start.
fn refilter(model: &SystemModel, innovations: &[f64], w0: [f64; 2], w1: [f64; 2]) -> Result<Vec<f64>> {
    let f = &model.f;
    let (h0, h1) = (model.h[(0, 0)], model.h[(0, 1)]);
    let mut e = [0.0_f64; 2];
    let mut out = Vec::with_capacity(innovations.len());
    for &nu in innovations {
        let nu1 = nu - h0 * e[0] - h1 * e[1];
        out.push(nu1);
        let post = [e[0] + w1[0] * nu1 - w0[0] * nu, e[1] + w1[1] * nu1 - w0[1] * nu];
        e = [
            f[(0, 0)] * post[0] + f[(0, 1)] * post[1],
            f[(1, 0)] * post[0] + f[(1, 1)] * post[1],
        ];
        if !(e[0].is_finite() && e[1].is_finite()) {
            return Err(Error::NumericOverflow("penalty rollout"));
        }
    }
    Ok(out)
}

fn terms_from(ctx: &ModelContext, nu: &[f64], s: f64) -> Result<PhysicsTerms> {
    let seq = InnovationSequence::from_scalars_constant(nu, s);
    let mut c = sample_correlation(&seq, ctx.correlation_lags)?;
    c.remove(0);
    let eps_bar = nu.iter().map(|v| v * v / s).sum::<f64>() / nu.len() as f64;
    if !eps_bar.is_finite() || c.iter().any(|m| !m.is_finite()) {
        return Err(Error::NumericOverflow("innovation statistics"));
    }
    Ok(PhysicsTerms { c_hat: c, eps_bar })
}

/// Innovation statistics of the sample's window re-filtered with `predicted` labels.
pub fn physics_terms(ctx: &ModelContext, sample: &DatasetSample, predicted: &[f64; 3]) -> Result<PhysicsTerms> {
    let base = ctx.gain(&sample.prev_labels, None)?;
    let tuned = ctx.gain(&NoiseLabels::from_array(*predicted), None)?;
    let nu = refilter(&ctx.model, &sample.innovations, base.w, tuned.w)?;
    terms_from(ctx, &nu, tuned.s)
}

/// Penalty evaluator for one sample; caches the base gain across rollouts.
struct PenaltyProbe<'a> {
    ctx: &'a ModelContext,
    weights: &'a LossWeights,
    innovations: &'a [f64],
    base: [f64; 2],
}

impl PenaltyProbe<'_> {
    fn eval(&self, labels: &[f64; 3], warm: Option<&Matrix>) -> Result<(PhysicsTerms, SteadyGain)> {
        let tuned = self.ctx.gain(&NoiseLabels::from_array(*labels), warm)?;
        let nu = refilter(&self.ctx.model, self.innovations, self.base, tuned.w)?;
        Ok((terms_from(self.ctx, &nu, tuned.s)?, tuned))
    }

    fn penalty(&self, terms: &PhysicsTerms) -> f64 {
        let (c, n) = penalty_parts(self.weights, terms);
        c + n
    }
}

/// One sample's loss and parameter gradient.
#[derive(Clone, Debug)]
pub struct SampleGradient {
    pub parts: LossParts,
    pub eps_bar: Option<f64>,
    pub output: [f64; 3],
    pub grad: Vec<f64>,
}

pub fn predictor_input(sample: &DatasetSample) -> PredictorInput {
    PredictorInput {
        measurements: sample.measurements.clone(),
        innovations: sample.innovations.clone(),
        prev_labels: sample.prev_labels.as_array(),
    }
}

/// Output gradient of the loss: analytic for the label term, central
/// differences over the three outputs for the penalties.
pub fn output_gradient(
    ctx: &ModelContext,
    weights: &LossWeights,
    sample: &DatasetSample,
    yhat: &[f64; 3],
) -> Result<([f64; 3], LossParts, Option<f64>)> {
    let y = sample.labels.as_array();
    let mut g = [0.0; 3];
    for i in 0..3 {
        let d = yhat[i] - y[i];
        if d != 0.0 {
            g[i] = weights.w1 * d.signum();
        }
    }
    let mut parts = LossParts {
        label: label_loss(weights, &y, yhat),
        ..LossParts::default()
    };
    if !weights.variant.uses_physics() {
        return Ok((g, parts, None));
    }
    let base = ctx.gain(&sample.prev_labels, None)?;
    let probe = PenaltyProbe {
        ctx,
        weights,
        innovations: &sample.innovations,
        base: base.w,
    };
    let (terms, nominal) = probe.eval(yhat, None)?;
    let (corr, nis) = penalty_parts(weights, &terms);
    parts.correlation = corr;
    parts.nis = nis;
    for i in 0..3 {
        let h = PENALTY_FD_STEP * yhat[i];
        let mut up = *yhat;
        let mut down = *yhat;
        up[i] += h;
        down[i] -= h;
        let (tu, _) = probe.eval(&up, Some(&nominal.p_prior))?;
        let (td, _) = probe.eval(&down, Some(&nominal.p_prior))?;
        g[i] += (probe.penalty(&tu) - probe.penalty(&td)) / (2.0 * h);
    }
    Ok((g, parts, Some(terms.eps_bar)))
}

pub fn loss_gradient(
    ctx: &ModelContext,
    weights: &LossWeights,
    sample: &DatasetSample,
    params: &NetworkParams,
) -> Result<SampleGradient> {
    let input = predictor_input(sample);
    let (yhat, cache) = forward(params, &input)?;
    let (og, parts, eps_bar) = output_gradient(ctx, weights, sample, &yhat)?;
    let grad = backward(params, &cache, &og)?;
    Ok(SampleGradient {
        parts,
        eps_bar,
        output: yhat,
        grad,
    })
}

/// Loss of one sample without gradients.
pub fn sample_loss(
    ctx: &ModelContext,
    weights: &LossWeights,
    sample: &DatasetSample,
    params: &NetworkParams,
) -> Result<(LossParts, Option<f64>, [f64; 3])> {
    let yhat = params.predict(&predictor_input(sample))?;
    let y = sample.labels.as_array();
    if !weights.variant.uses_physics() {
        return Ok((loss_parts(weights, &y, &yhat, None)?, None, yhat));
    }
    let terms = physics_terms(ctx, sample, &yhat)?;
    Ok((loss_parts(weights, &y, &yhat, Some(&terms))?, Some(terms.eps_bar), yhat))
}

/// Numeric failures mark a sample as skipped; anything else is a real error.
fn is_skippable(e: &Error) -> bool {
    e.exit_code() == 3
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossStats {
    pub mean: LossParts,
    pub eps_bar: Option<f64>,
    pub used: usize,
    pub skipped: usize,
    pub rmse: [f64; 3],
}

impl LossStats {
    pub fn loss(&self) -> f64 {
        self.mean.total()
    }
}

/// Mean loss over `indices`, plus per-label RMSE of the predictions.
pub fn evaluate_loss(
    ctx: &ModelContext,
    weights: &LossWeights,
    dataset: &Dataset,
    indices: &[usize],
    params: &NetworkParams,
) -> Result<LossStats> {
    let results: Vec<Result<(LossParts, Option<f64>, [f64; 3])>> = indices
        .par_iter()
        .map(|&i| sample_loss(ctx, weights, &dataset.samples[i], params))
        .collect();
    let mut stats = LossStats::default();
    let mut sum = LossParts::default();
    let mut eps = 0.0;
    let mut sq = [0.0; 3];
    for (r, &i) in results.into_iter().zip(indices) {
        match r {
            Ok((parts, e, yhat)) => {
                sum.label += parts.label;
                sum.correlation += parts.correlation;
                sum.nis += parts.nis;
                eps += e.unwrap_or(0.0);
                let y = dataset.samples[i].labels.as_array();
                for k in 0..3 {
                    sq[k] += (yhat[k] - y[k]).powi(2);
                }
                stats.used += 1;
            }
            Err(e) if is_skippable(&e) => stats.skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if stats.used > 0 {
        let n = stats.used as f64;
        stats.mean = LossParts {
            label: sum.label / n,
            correlation: sum.correlation / n,
            nis: sum.nis / n,
        };
        if weights.variant.uses_physics() {
            stats.eps_bar = Some(eps / n);
        }
        stats.rmse = sq.map(|s| (s / n).sqrt());
    }
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH,
            lr: crate::predictor::DEFAULT_LR,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub variant: LossVariant,
    /// Mean loss over the epoch's mini-batches, at the weights each batch saw.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_rmse: [f64; 3],
    pub train_correlation: f64,
    pub train_nis: f64,
    pub train_eps_bar: f64,
    pub skipped: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub history: Vec<EpochRecord>,
    pub steps: usize,
}

/// Summed loss terms and mean gradient of one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGradient {
    /// Mean over the samples that were not skipped.
    pub grad: Vec<f64>,
    pub sum: LossParts,
    pub eps_sum: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Per-sample gradients run in parallel; the reduction walks the batch in
/// sorted index order, so the result ignores both thread count and batch order.
pub fn batch_gradient(
    ctx: &ModelContext,
    weights: &LossWeights,
    dataset: &Dataset,
    batch: &[usize],
    params: &NetworkParams,
) -> Result<BatchGradient> {
    let mut idx = batch.to_vec();
    idx.sort_unstable();
    let grads: Vec<Result<SampleGradient>> = idx
        .par_iter()
        .map(|&i| loss_gradient(ctx, weights, &dataset.samples[i], params))
        .collect();
    let mut out = BatchGradient {
        grad: vec![0.0; params.len()],
        sum: LossParts::default(),
        eps_sum: 0.0,
        used: 0,
        skipped: 0,
    };
    for r in grads {
        match r {
            Ok(sg) => {
                for (t, g) in out.grad.iter_mut().zip(&sg.grad) {
                    *t += g;
                }
                out.sum.label += sg.parts.label;
                out.sum.correlation += sg.parts.correlation;
                out.sum.nis += sg.parts.nis;
                out.eps_sum += sg.eps_bar.unwrap_or(0.0);
                out.used += 1;
            }
            Err(e) if is_skippable(&e) => out.skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if out.used > 0 {
        let inv = 1.0 / out.used as f64;
        out.grad.iter_mut().for_each(|g| *g *= inv);
    }
    Ok(out)
}

/// Mini-batch Adam. Per-sample gradients run in parallel and are reduced in
/// index order, so the result does not depend on the thread count.
pub fn train(
    ctx: &ModelContext,
    dataset: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    mut params: NetworkParams,
    weights: &LossWeights,
    cfg: &TrainConfig,
    rng: &mut RandomSource,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    weights.validate()?;
    if train_idx.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let mut adam = AdamState::new(params.len());
    let mut order = train_idx.to_vec();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut sum = LossParts::default();
        let mut eps_sum = 0.0;
        let mut used_total = 0usize;
        let mut skipped = 0usize;
        let mut epoch_steps = 0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let bg = batch_gradient(ctx, weights, dataset, batch, &params)?;
            skipped += bg.skipped;
            if bg.used == 0 {
                return Err(Error::TrainingStalled { epoch, batch: b });
            }
            sum.label += bg.sum.label;
            sum.correlation += bg.sum.correlation;
            sum.nis += bg.sum.nis;
            eps_sum += bg.eps_sum;
            let used = bg.used;
            let total = bg.grad;
            adam_step(params.values_mut(), &total, &mut adam, cfg.lr)?;
            if !params.values().iter().all(|v| v.is_finite()) {
                return Err(Error::NumericOverflow("optimizer step"));
            }
            used_total += used;
            epoch_steps += 1;
        }
        steps += epoch_steps;
        let n = used_total.max(1) as f64;
        let val = if val_idx.is_empty() {
            LossStats::default()
        } else {
            evaluate_loss(ctx, weights, dataset, val_idx, &params)?
        };
        history.push(EpochRecord {
            epoch,
            variant: weights.variant,
            train_loss: sum.total() / n,
            val_loss: val.loss(),
            val_rmse: val.rmse,
            train_correlation: sum.correlation / n,
            train_nis: sum.nis / n,
            train_eps_bar: eps_sum / n,
            skipped,
            steps: epoch_steps,
        });
    }
    Ok(TrainOutcome {
        params,
        history,
        steps,
    })
}

/// History as CSV; penalty columns appear only for physics variants.
pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let physics = history.iter().any(|r| r.variant.uses_physics());
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut header = vec![
        "epoch", "variant", "train_loss", "val_loss", "val_rmse_qa", "val_rmse_qb", "val_rmse_r", "steps",
    ];
    if physics {
        header.extend(["corr_penalty", "nis_penalty", "eps_bar", "skipped"]);
    }
    let csv_err = |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    w.write_record(&header).map_err(csv_err)?;
    for r in history {
        let mut row = vec![
            r.epoch.to_string(),
            r.variant.to_string(),
            fmt_f(r.train_loss),
            fmt_f(r.val_loss),
            fmt_f(r.val_rmse[0]),
            fmt_f(r.val_rmse[1]),
            fmt_f(r.val_rmse[2]),
            r.steps.to_string(),
        ];
        if physics {
            row.extend([
                fmt_f(r.train_correlation),
                fmt_f(r.train_nis),
                fmt_f(r.train_eps_bar),
                r.skipped.to_string(),
            ]);
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn fmt_f(v: f64) -> String {
    format!("{v:e}")
}

/// Per-label RMSE (Q_a, Q_b, R) on both splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRmse {
    pub train: [f64; 3],
    pub validation: [f64; 3],
    pub train_count: usize,
    pub validation_count: usize,
}

impl LabelRmse {
    /// RMSE divided by the label range, per label.
    pub fn normalized_validation(&self) -> [f64; 3] {
        self.validation.map(|v| v / crate::vehicle::LABEL_BOUND)
    }
}

fn split_rmse<P: LabelPredictor + ?Sized>(predictor: &P, dataset: &Dataset, idx: &[usize]) -> Result<[f64; 3]> {
    let preds: Vec<Result<[f64; 3]>> = idx
        .par_iter()
        .map(|&i| predictor.predict(&predictor_input(&dataset.samples[i])))
        .collect();
    let mut sq = [0.0; 3];
    for (p, &i) in preds.into_iter().zip(idx) {
        let p = p?;
        let y = dataset.samples[i].labels.as_array();
        for k in 0..3 {
            sq[k] += (p[k] - y[k]).powi(2);
        }
    }
    Ok(sq.map(|s| (s / idx.len() as f64).sqrt()))
}

pub fn evaluate_labels<P: LabelPredictor + ?Sized>(
    predictor: &P,
    dataset: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
) -> Result<LabelRmse> {
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Config("label evaluation needs nonempty train and validation splits".into()));
    }
    Ok(LabelRmse {
        train: split_rmse(predictor, dataset, train_idx)?,
        validation: split_rmse(predictor, dataset, val_idx)?,
        train_count: train_idx.len(),
        validation_count: val_idx.len(),
    })
}

/// Label errors per model plus, optionally, the closed-loop run table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub labels: Vec<(String, LabelRmse)>,
    pub runs: Vec<crate::runtime::RunRow>,
}

pub fn write_summary_json(summary: &EvalSummary, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(summary).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}
