//! Empirical contraction-rate estimation from trajectory pairs, excitation
//! and dataset tooling for identification, and gradient-descent training of
//! GRU models with an optional certificate-shaping penalty.

use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{grad_wrt_weights, rollout};
use crate::error::{Error, Result};
use crate::gru::{deltaiss_certificate, step_unchecked, GruParams, InvariantBox};
use crate::math::{full_precision, sigmoid};

/// Sampling plan for the empirical contraction-rate fit: how many trajectory
/// pairs, how long each pair runs, the fixed transient multiplier the rate is
/// fitted under, and the box initial states are drawn from.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryPairConfig {
    pub n_pairs: usize,
    pub horizon: usize,
    pub mu: f64,
    pub seed: u64,
    pub state_box: InvariantBox,
}

impl TrajectoryPairConfig {
    fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 {
            return Err(Error::InvalidArgument("need at least one trajectory pair".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("pair horizon must be at least 1".into()));
        }
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "transient multiplier must be positive and finite, got {}",
                self.mu
            )));
        }
        Ok(())
    }
}

fn pair_rate_unchecked(
    p: &GruParams,
    x_a0: &DVector<f64>,
    x_b0: &DVector<f64>,
    inputs: &[DVector<f64>],
    mu: f64,
) -> Option<f64> {
    let d0 = (x_a0 - x_b0).norm();
    if d0 == 0.0 {
        return None;
    }
    let mut xa = x_a0.clone();
    let mut xb = x_b0.clone();
    let mut worst = 0.0f64;
    for (k, u) in inputs.iter().enumerate() {
        xa = step_unchecked(p, &xa, u);
        xb = step_unchecked(p, &xb, u);
        let ratio = (&xa - &xb).norm() / (mu * d0);
        worst = worst.max(ratio.powf(1.0 / (k + 1) as f64));
    }
    Some(worst)
}

/// Smallest geometric rate consistent with one pair of trajectories driven by
/// the same input sequence: the largest k-th root of the distance ratio
/// relative to `mu` times the initial distance. `None` when the initial
/// states coincide, since the ratio is then undefined.
pub fn pair_contraction_rate(
    p: &GruParams,
    x_a0: &DVector<f64>,
    x_b0: &DVector<f64>,
    inputs: &[DVector<f64>],
    mu: f64,
) -> Result<Option<f64>> {
    p.validate()?;
    if x_a0.len() != p.n_x() || x_b0.len() != p.n_x() {
        return Err(Error::dims("pair initial states", p.n_x(), x_a0.len()));
    }
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("pair needs at least one input".into()));
    }
    for u in inputs {
        if u.len() != p.n_u() {
            return Err(Error::dims("pair input", p.n_u(), u.len()));
        }
    }
    if !(mu.is_finite() && mu > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "transient multiplier must be positive and finite, got {mu}"
        )));
    }
    Ok(pair_rate_unchecked(p, x_a0, x_b0, inputs, mu))
}

/// Estimates the contraction rate empirically: random pairs of initial states
/// in the box, one shared random input sequence per pair, and the maximum
/// per-step rate over all pairs. Sharing the input across a pair removes the
/// input-difference term from the divergence bound, so the geometric rate is
/// identifiable from state distances alone. Pairs are evaluated in parallel;
/// each pair derives its own generator from the pair index, so the result is
/// deterministic regardless of scheduling.
pub fn estimate_lambda(p: &GruParams, cfg: &TrajectoryPairConfig) -> Result<f64> {
    cfg.validate()?;
    p.validate()?;
    let n_x = p.n_x();
    let n_u = p.n_u();
    let r = cfg.state_box.radius();
    (0..cfg.n_pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let xa = DVector::from_fn(n_x, |_, _| rng.random_range(-r..r));
            let xb = DVector::from_fn(n_x, |_, _| rng.random_range(-r..r));
            let us: Vec<DVector<f64>> = (0..cfg.horizon)
                .map(|_| DVector::from_fn(n_u, |_, _| rng.random_range(-1.0..1.0)))
                .collect();
            pair_rate_unchecked(p, &xa, &xb, &us, cfg.mu)
        })
        .reduce(
            || None,
            |a, b| match (a, b) {
                (Some(x), Some(y)) => Some(x.max(y)),
                (x, y) => x.or(y),
            },
        )
        .ok_or(Error::DegeneratePairs)
}

/// Shape of a generated identification input signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExcitationKind {
    /// Sum of sines at fixed odd harmonics with seeded random phases,
    /// peak-normalised into the unit cube.
    Multisine,
    /// Uniform random levels held for random dwell times of 5 to 25 steps.
    RandomSteps,
}

impl std::str::FromStr for ExcitationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multisine" => Ok(ExcitationKind::Multisine),
            "random-steps" => Ok(ExcitationKind::RandomSteps),
            other => Err(Error::InvalidArgument(format!(
                "unknown excitation kind '{other}' (expected 'multisine' or 'random-steps')"
            ))),
        }
    }
}

/// Harmonics (in cycles per record) carried by the multisine signal; odd and
/// coprime so no bin is a harmonic of another.
pub const MULTISINE_HARMONICS: [usize; 6] = [1, 3, 5, 7, 11, 13];

/// Deterministic bounded excitation for identification experiments. Every
/// sample satisfies max_i |u_i| <= 1.
pub fn generate_excitation(
    kind: ExcitationKind,
    length: usize,
    channels: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    if length == 0 || channels == 0 {
        return Err(Error::InvalidArgument(
            "excitation needs positive length and channel count".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_channel: Vec<Vec<f64>> = Vec::with_capacity(channels);
    match kind {
        ExcitationKind::Multisine => {
            let mut harmonics: Vec<usize> = MULTISINE_HARMONICS
                .into_iter()
                .filter(|&h| 2 * h < length)
                .collect();
            if harmonics.is_empty() {
                harmonics.push(1);
            }
            for _ in 0..channels {
                let phases: Vec<f64> = harmonics
                    .iter()
                    .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                    .collect();
                let raw: Vec<f64> = (0..length)
                    .map(|k| {
                        harmonics
                            .iter()
                            .zip(&phases)
                            .map(|(&h, &ph)| {
                                (std::f64::consts::TAU * h as f64 * k as f64 / length as f64 + ph)
                                    .sin()
                            })
                            .sum()
                    })
                    .collect();
                let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let scale = if peak > 0.0 { 0.95 / peak } else { 0.0 };
                per_channel.push(raw.into_iter().map(|v| v * scale).collect());
            }
        }
        ExcitationKind::RandomSteps => {
            for _ in 0..channels {
                let mut ch = Vec::with_capacity(length);
                while ch.len() < length {
                    let level = rng.random_range(-1.0..1.0);
                    let dwell = rng.random_range(5..=25usize);
                    for _ in 0..dwell {
                        if ch.len() == length {
                            break;
                        }
                        ch.push(level);
                    }
                }
                per_channel.push(ch);
            }
        }
    }
    Ok((0..length)
        .map(|k| DVector::from_fn(channels, |c, _| per_channel[c][k]))
        .collect())
}

/// One recorded experiment: an input sequence and the outputs measured at the
/// same time indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub inputs: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
}

impl Episode {
    pub fn new(inputs: Vec<DVector<f64>>, outputs: Vec<DVector<f64>>) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != outputs.len() {
            return Err(Error::dims("episode length", inputs.len().max(1), outputs.len()));
        }
        let n_u = inputs[0].len();
        let n_y = outputs[0].len();
        if n_u == 0 || n_y == 0 {
            return Err(Error::InvalidArgument("episode channels must be non-empty".into()));
        }
        for (k, (u, y)) in inputs.iter().zip(&outputs).enumerate() {
            if u.len() != n_u || y.len() != n_y {
                return Err(Error::dims(
                    "episode row",
                    format!("u {n_u} y {n_y}"),
                    format!("u {} y {} at t = {k}", u.len(), y.len()),
                ));
            }
            if !u.iter().chain(y.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFinite("episode sample"));
            }
        }
        Ok(Episode { inputs, outputs })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn n_u(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn n_y(&self) -> usize {
        self.outputs[0].len()
    }

    /// Writes the episode as CSV with columns t, u_1..u_{n_u}, y_1..y_{n_y},
    /// at full precision so reading it back reproduces every bit.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.n_u()).map(|i| format!("u_{i}")));
        header.extend((1..=self.n_y()).map(|i| format!("y_{i}")));
        w.write_record(&header)?;
        for (k, (u, y)) in self.inputs.iter().zip(&self.outputs).enumerate() {
            let mut rec = vec![k.to_string()];
            rec.extend(u.iter().map(|v| full_precision(*v)));
            rec.extend(y.iter().map(|v| full_precision(*v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads an episode written by `write_csv`, inferring the channel counts
    /// from the header names.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        let names: Vec<&str> = headers.iter().collect();
        let n_u = names.iter().filter(|n| n.starts_with("u_")).count();
        let n_y = names.iter().filter(|n| n.starts_with("y_")).count();
        if names.first() != Some(&"t") || n_u == 0 || n_y == 0 || names.len() != 1 + n_u + n_y {
            return Err(Error::Config(format!(
                "episode header must be t,u_1..,y_1.., got {names:?}"
            )));
        }
        let parse = |field: &str, what: &str, row: usize| -> Result<f64> {
            field.parse::<f64>().map_err(|e| {
                Error::Config(format!("bad {what} value '{field}' in row {row}: {e}"))
            })
        };
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != names.len() {
                return Err(Error::Config(format!(
                    "row {row} has {} fields, expected {}",
                    rec.len(),
                    names.len()
                )));
            }
            let mut u = DVector::zeros(n_u);
            for j in 0..n_u {
                u[j] = parse(&rec[1 + j], "input", row)?;
            }
            let mut y = DVector::zeros(n_y);
            for j in 0..n_y {
                y[j] = parse(&rec[1 + n_u + j], "output", row)?;
            }
            inputs.push(u);
            outputs.push(y);
        }
        Episode::new(inputs, outputs)
    }
}

/// Per-channel affine maps that carried the raw data into the unit ranges:
/// normalized = (raw - offset) / scale, so raw = normalized * scale + offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_offset: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_offset: Vec<f64>,
    pub output_scale: Vec<f64>,
}

impl Normalization {
    /// Identity maps for data that is already in range.
    pub fn identity(n_u: usize, n_y: usize) -> Self {
        Normalization {
            input_offset: vec![0.0; n_u],
            input_scale: vec![1.0; n_u],
            output_offset: vec![0.0; n_y],
            output_scale: vec![1.0; n_y],
        }
    }

    /// Maps a raw input into the unit cube; the clamp only trims the last-ulp
    /// overshoot of the affine map at the observed extremes.
    pub fn normalize_input(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |j, _| {
            ((u[j] - self.input_offset[j]) / self.input_scale[j]).clamp(-1.0, 1.0)
        })
    }

    pub fn denormalize_input(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |j, _| u[j] * self.input_scale[j] + self.input_offset[j])
    }

    pub fn normalize_output(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(y.len(), |j, _| (y[j] - self.output_offset[j]) / self.output_scale[j])
    }

    pub fn denormalize_output(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(y.len(), |j, _| y[j] * self.output_scale[j] + self.output_offset[j])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("normalization serialises to JSON")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Identification data with inputs normalized into the unit cube and outputs
/// into unit half-range, plus the affine maps to undo both.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
    pub normalization: Normalization,
    /// Human-readable notes about degenerate channels left unscaled.
    pub warnings: Vec<String>,
}

fn channel_affine(
    raw: &[Episode],
    channels: usize,
    label: &str,
    get: impl Fn(&Episode, usize, usize) -> f64,
    warnings: &mut Vec<String>,
) -> (Vec<f64>, Vec<f64>) {
    let mut offset = Vec::with_capacity(channels);
    let mut scale = Vec::with_capacity(channels);
    for c in 0..channels {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for ep in raw {
            for k in 0..ep.len() {
                let v = get(ep, k, c);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let mid = 0.5 * (hi + lo);
        let half = 0.5 * (hi - lo);
        if half == 0.0 {
            warnings.push(format!(
                "{label} channel {c} has zero range (constant {lo}); left unscaled"
            ));
            offset.push(mid);
            scale.push(1.0);
        } else {
            offset.push(mid);
            scale.push(half);
        }
    }
    (offset, scale)
}

/// Rescales every channel affinely so the observed input range maps into
/// [-1, 1] (the certified operating range) and the output range likewise.
/// Constant channels are centred but left at unit scale, with a warning.
pub fn normalize_dataset(raw: &[Episode]) -> Result<Dataset> {
    if raw.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_u = raw[0].n_u();
    let n_y = raw[0].n_y();
    for ep in raw {
        if ep.n_u() != n_u || ep.n_y() != n_y {
            return Err(Error::dims(
                "dataset episodes",
                format!("u {n_u} y {n_y}"),
                format!("u {} y {}", ep.n_u(), ep.n_y()),
            ));
        }
    }
    let mut warnings = Vec::new();
    let (input_offset, input_scale) =
        channel_affine(raw, n_u, "input", |ep, k, c| ep.inputs[k][c], &mut warnings);
    let (output_offset, output_scale) =
        channel_affine(raw, n_y, "output", |ep, k, c| ep.outputs[k][c], &mut warnings);
    let normalization = Normalization {
        input_offset,
        input_scale,
        output_offset,
        output_scale,
    };
    let episodes = raw
        .iter()
        .map(|ep| Episode {
            inputs: ep.inputs.iter().map(|u| normalization.normalize_input(u)).collect(),
            outputs: ep
                .outputs
                .iter()
                .map(|y| normalization.normalize_output(y))
                .collect(),
        })
        .collect();
    Ok(Dataset {
        episodes,
        normalization,
        warnings,
    })
}

/// Hyperparameters for gradient-descent identification.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Backpropagation window; state is carried across windows but gradients
    /// do not flow back through the boundary.
    pub truncation: usize,
    /// Leading samples of each episode excluded from the loss, so the
    /// arbitrary zero initial state does not bias the fit.
    pub washout: usize,
    /// Weight of the penalty on the certificate rate exceeding its target.
    pub penalty_weight: f64,
    /// Contraction rate the penalty pushes the certificate below.
    pub lambda_target: f64,
    pub momentum: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Uniform half-range of the random initial weights.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 400,
            truncation: 50,
            washout: 20,
            penalty_weight: 0.0,
            lambda_target: 0.95,
            momentum: 0.9,
            clip_norm: 5.0,
            init_scale: 0.3,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let positive = [
            ("learning rate", self.learning_rate),
            ("clip norm", self.clip_norm),
            ("init scale", self.init_scale),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.epochs == 0 || self.truncation == 0 {
            return Err(Error::InvalidArgument(
                "epochs and truncation must be at least 1".into(),
            ));
        }
        if !(self.penalty_weight.is_finite() && self.penalty_weight >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "penalty weight must be non-negative, got {}",
                self.penalty_weight
            )));
        }
        if !(self.lambda_target > 0.0 && self.lambda_target < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "rate target must lie in (0, 1), got {}",
                self.lambda_target
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean squared output error per scalar channel entry, after washout.
    pub final_mse: f64,
    /// Certificate rate of the returned weights over the unit box.
    pub final_lambda: f64,
    pub certified: bool,
    pub epochs_run: usize,
    /// True when a non-finite loss or gradient appeared; the returned weights
    /// are then the last finite checkpoint, not the diverged iterate.
    pub diverged: bool,
    pub mse_history: Vec<f64>,
}

fn mse_and_gradient(
    p: &GruParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
    inv_count: f64,
) -> Result<(f64, GruParams)> {
    let mut grad = p.zeros_like();
    let mut mse = 0.0;
    let zero_u = DVector::zeros(p.n_u());
    for ep in &dataset.episodes {
        let mut x = DVector::zeros(p.n_x());
        let mut t0 = 0;
        while t0 < ep.len() {
            let end = (t0 + cfg.truncation).min(ep.len());
            let window = &ep.inputs[t0..end];
            let tape = rollout(p, &x, window, (&zero_u, 0))?;
            let states = tape.states();
            let mut ogs: Vec<DVector<f64>> = Vec::with_capacity(states.len());
            for (j, xs) in states.iter().enumerate() {
                let t = t0 + j;
                if j < window.len() && t >= cfg.washout {
                    let err = &p.u_o * xs + &p.b_o - &ep.outputs[t];
                    mse += inv_count * err.norm_squared();
                    ogs.push(2.0 * inv_count * err);
                } else {
                    ogs.push(DVector::zeros(p.n_y()));
                }
            }
            let g = grad_wrt_weights(p, &tape, &ogs)?;
            grad.zip_apply(&g, |a, b| *a += b);
            x = tape.final_state().clone();
            t0 = end;
        }
    }
    Ok((mse, grad))
}

/// Fits a GRU to the normalized dataset by gradient descent with momentum on
/// the mean squared simulation error, backpropagating through windows of
/// `truncation` steps. A positive `penalty_weight` adds
/// rho * max(0, lambda - lambda_target)^2 on the certificate rate, steered by
/// its subgradient, so contraction can be enforced during identification.
/// A non-finite loss stops training and returns the last finite checkpoint
/// with the `diverged` flag set.
pub fn train_gru(
    dataset: &Dataset,
    n_x: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(GruParams, TrainReport)> {
    cfg.validate()?;
    if dataset.episodes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if n_x == 0 {
        return Err(Error::InvalidArgument("state dimension must be at least 1".into()));
    }
    let n_u = dataset.episodes[0].n_u();
    let n_y = dataset.episodes[0].n_y();
    for ep in &dataset.episodes {
        if ep.n_u() != n_u || ep.n_y() != n_y {
            return Err(Error::dims(
                "dataset episodes",
                format!("u {n_u} y {n_y}"),
                format!("u {} y {}", ep.n_u(), ep.n_y()),
            ));
        }
    }
    let scored: usize = dataset
        .episodes
        .iter()
        .map(|ep| ep.len().saturating_sub(cfg.washout))
        .sum();
    if scored == 0 {
        return Err(Error::InvalidArgument(
            "washout consumes every sample; nothing to fit".into(),
        ));
    }
    let inv_count = 1.0 / (scored * n_y) as f64;
    let bx = InvariantBox::unit();

    let mut p = GruParams::random_scaled(n_x, n_u, n_y, cfg.init_scale, seed);
    let mut velocity = p.zeros_like();
    let mut last_finite = p.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut diverged = false;

    for _ in 0..cfg.epochs {
        let (mse, mut grad) = mse_and_gradient(&p, dataset, cfg, inv_count)?;
        if !mse.is_finite() || !grad.flat_norm().is_finite() {
            p = last_finite.clone();
            diverged = true;
            break;
        }
        history.push(mse);
        last_finite = p.clone();
        if cfg.penalty_weight > 0.0 {
            let (lambda, dlambda) = certificate_subgradient(&p, &bx);
            let excess = lambda - cfg.lambda_target;
            if excess > 0.0 {
                let w = 2.0 * cfg.penalty_weight * excess;
                grad.zip_apply(&dlambda, |g, d| *g += w * d);
            }
        }
        let gn = grad.flat_norm();
        if gn > cfg.clip_norm {
            grad.scale_mut(cfg.clip_norm / gn);
        }
        velocity.zip_apply(&grad, |v, g| *v = cfg.momentum * *v - cfg.learning_rate * g);
        p.zip_apply(&velocity, |w, v| *w += v);
    }

    let (final_mse, _) = mse_and_gradient(&p, dataset, cfg, inv_count)?;
    let cert = deltaiss_certificate(&p, &bx);
    let report = TrainReport {
        final_mse,
        final_lambda: cert.lambda,
        certified: cert.certified,
        epochs_run: history.len(),
        diverged,
        mse_history: history,
    };
    Ok((p, report))
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn argmax_row_sum(m: &nalgebra::DMatrix<f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..m.nrows() {
        let s: f64 = m.row(i).iter().map(|x| x.abs()).sum();
        if s > best.1 {
            best = (i, s);
        }
    }
    best
}

fn argmax_concat_row(
    w: &nalgebra::DMatrix<f64>,
    u: &nalgebra::DMatrix<f64>,
    b: &DVector<f64>,
    scale: f64,
) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..w.nrows() {
        let sw: f64 = w.row(i).iter().map(|x| x.abs()).sum();
        let su: f64 = u.row(i).iter().map(|x| x.abs()).sum();
        let s = sw + scale * su + b[i].abs();
        if s > best.1 {
            best = (i, s);
        }
    }
    best
}

fn scatter_concat_row(
    gw: &mut nalgebra::DMatrix<f64>,
    gu: &mut nalgebra::DMatrix<f64>,
    gb: &mut DVector<f64>,
    w: &nalgebra::DMatrix<f64>,
    u: &nalgebra::DMatrix<f64>,
    b: &DVector<f64>,
    row: usize,
    scale: f64,
    d: f64,
) {
    for j in 0..w.ncols() {
        gw[(row, j)] += d * sgn(w[(row, j)]);
    }
    for j in 0..u.ncols() {
        gu[(row, j)] += d * scale * sgn(u[(row, j)]);
    }
    gb[row] += d * sgn(b[row]);
}

fn scatter_row(gm: &mut nalgebra::DMatrix<f64>, m: &nalgebra::DMatrix<f64>, row: usize, d: f64) {
    for j in 0..m.ncols() {
        gm[(row, j)] += d * sgn(m[(row, j)]);
    }
}

/// Certificate rate over the box together with a subgradient of that rate in
/// the weights. The rate is a composition of maxima (active update-gate
/// endpoint, active rows of the norm terms); the subgradient follows the
/// first active row of each maximum, which is the true gradient wherever the
/// maxima are unique.
pub fn certificate_subgradient(p: &GruParams, bx: &InvariantBox) -> (f64, GruParams) {
    let s = bx.radius();
    let (row_z, n_z) = argmax_concat_row(&p.w_z, &p.u_z, &p.b_z, s);
    let (row_f, n_f) = argmax_concat_row(&p.w_f, &p.u_f, &p.b_f, s);
    let (row_r, n_r) = argmax_concat_row(&p.w_r, &p.u_r, &p.b_r, s);
    let sig_z = sigmoid(n_z);
    let sig_f = sigmoid(n_f);
    let phi_r = n_r.tanh();
    let (row_uf, n_uf) = argmax_row_sum(&p.u_f);
    let (row_ur, n_ur) = argmax_row_sum(&p.u_r);
    let (row_uz, n_uz) = argmax_row_sum(&p.u_z);

    let alpha = 0.25 * s * n_uf + sig_f;
    let beta = 0.25 * (phi_r + s);
    let kappa = |z: f64| z + (1.0 - z) * alpha * n_ur + beta * n_uz;
    let k_hi = kappa(sig_z);
    let k_lo = kappa(1.0 - sig_z);
    // Active endpoint of the affine-in-z factor; dz*/dn_z flips sign at the
    // low endpoint.
    let (lambda, z_star, dz_dnz) = if k_hi >= k_lo {
        (k_hi, sig_z, sig_z * (1.0 - sig_z))
    } else {
        (k_lo, 1.0 - sig_z, -(sig_z * (1.0 - sig_z)))
    };
    let one_minus = 1.0 - z_star;
    let d_nz = (1.0 - alpha * n_ur) * dz_dnz;
    let d_nf = one_minus * n_ur * sig_f * (1.0 - sig_f);
    let d_nr = 0.25 * n_uz * (1.0 - phi_r * phi_r);
    let d_nuf = one_minus * 0.25 * s * n_ur;
    let d_nur = one_minus * alpha;
    let d_nuz = beta;

    let mut g = p.zeros_like();
    scatter_concat_row(&mut g.w_z, &mut g.u_z, &mut g.b_z, &p.w_z, &p.u_z, &p.b_z, row_z, s, d_nz);
    scatter_concat_row(&mut g.w_f, &mut g.u_f, &mut g.b_f, &p.w_f, &p.u_f, &p.b_f, row_f, s, d_nf);
    scatter_concat_row(&mut g.w_r, &mut g.u_r, &mut g.b_r, &p.w_r, &p.u_r, &p.b_r, row_r, s, d_nr);
    scatter_row(&mut g.u_f, &p.u_f, row_uf, d_nuf);
    scatter_row(&mut g.u_r, &p.u_r, row_ur, d_nur);
    scatter_row(&mut g.u_z, &p.u_z, row_uz, d_nuz);
    (lambda, g)
}
