//! Plant abstraction, benchmark plants, measurement noise, reference
//! schedules, and the closed-loop orchestrator wiring plant, observer, and
//! receding-horizon controller together, with a lossless CSV trace format.

use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::estimation::Normalization;
use crate::gru::{output_unchecked, step_unchecked, GruParams, InvariantBox};
use crate::math::{full_precision, inf_norm};
use crate::mpc::{
    find_equilibrium, mpc_step, EquilibriumOptions, FhocpSolution, FhocpSpec, SolverOptions,
};
use crate::observer::{observer_step, ObserverDesign};

/// Behavioural contract of a controlled process: a deterministic state
/// transition and a side-effect-free measurement. Implementations hold
/// parameters only; the state is threaded through the calls.
pub trait Plant {
    fn n_state(&self) -> usize;
    fn n_u(&self) -> usize;
    fn n_y(&self) -> usize;
    /// Rest state runs start from when no other initial state is supplied.
    fn initial_state(&self) -> DVector<f64>;
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn measure(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// The identified model used as its own plant: the nominal setting in which
/// closed-loop guarantees are exact.
pub struct GruEchoPlant {
    p: GruParams,
}

impl GruEchoPlant {
    pub fn new(p: GruParams) -> Result<Self> {
        p.validate()?;
        Ok(GruEchoPlant { p })
    }
}

impl Plant for GruEchoPlant {
    fn n_state(&self) -> usize {
        self.p.n_x()
    }

    fn n_u(&self) -> usize {
        self.p.n_u()
    }

    fn n_y(&self) -> usize {
        self.p.n_y()
    }

    fn initial_state(&self) -> DVector<f64> {
        DVector::zeros(self.p.n_x())
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        step_unchecked(&self.p, x, u)
    }

    fn measure(&self, x: &DVector<f64>) -> DVector<f64> {
        output_unchecked(&self.p, x)
    }
}

/// Two draining tanks in cascade, filled by a valve-commanded inflow:
///   dh1/dt = q_in(u) - c sqrt(h1),  dh2/dt = c sqrt(h1) - c sqrt(h2),
/// with q_in = 0.2 (1 + u / 2), c = 0.4, measured output h2, integrated by
/// one fourth-order explicit step of 0.5 time units per control step. Inputs
/// saturate at the valve limits [-1, 1]; levels never go negative. Steady
/// states sweep h2 from 0.0625 (u = -1) to 0.5625 (u = 1).
#[derive(Debug, Clone, Copy, Default)]
pub struct SurrogatePlant;

impl SurrogatePlant {
    pub const DT: f64 = 0.5;
    pub const DRAIN: f64 = 0.4;

    fn inflow(u: f64) -> f64 {
        0.2 * (1.0 + 0.5 * u.clamp(-1.0, 1.0))
    }

    fn derivative(h: &DVector<f64>, u: f64) -> DVector<f64> {
        let s1 = h[0].max(0.0).sqrt();
        let s2 = h[1].max(0.0).sqrt();
        DVector::from_vec(vec![
            Self::inflow(u) - Self::DRAIN * s1,
            Self::DRAIN * (s1 - s2),
        ])
    }

    /// Closed-form equilibrium levels for a held input.
    pub fn steady_state(u: f64) -> DVector<f64> {
        let level = (Self::inflow(u) / Self::DRAIN).powi(2);
        DVector::from_vec(vec![level, level])
    }
}

impl Plant for SurrogatePlant {
    fn n_state(&self) -> usize {
        2
    }

    fn n_u(&self) -> usize {
        1
    }

    fn n_y(&self) -> usize {
        1
    }

    fn initial_state(&self) -> DVector<f64> {
        Self::steady_state(0.0)
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let uv = u[0];
        let dt = Self::DT;
        let k1 = Self::derivative(x, uv);
        let k2 = Self::derivative(&(x + 0.5 * dt * &k1), uv);
        let k3 = Self::derivative(&(x + 0.5 * dt * &k2), uv);
        let k4 = Self::derivative(&(x + dt * &k3), uv);
        let next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        next.map(|h| h.max(0.0))
    }

    fn measure(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![x[1]])
    }
}

/// Adapter exposing a raw-unit plant in the normalized units the identified
/// model operates in: commanded inputs are de-normalized before reaching the
/// plant, measurements are normalized on the way back.
pub struct NormalizedPlant {
    inner: Box<dyn Plant>,
    norm: Normalization,
}

impl NormalizedPlant {
    pub fn new(inner: Box<dyn Plant>, norm: Normalization) -> Result<Self> {
        if norm.input_scale.len() != inner.n_u() || norm.output_scale.len() != inner.n_y() {
            return Err(Error::dims(
                "plant normalization",
                format!("u {} y {}", inner.n_u(), inner.n_y()),
                format!("u {} y {}", norm.input_scale.len(), norm.output_scale.len()),
            ));
        }
        Ok(NormalizedPlant { inner, norm })
    }
}

impl Plant for NormalizedPlant {
    fn n_state(&self) -> usize {
        self.inner.n_state()
    }

    fn n_u(&self) -> usize {
        self.inner.n_u()
    }

    fn n_y(&self) -> usize {
        self.inner.n_y()
    }

    fn initial_state(&self) -> DVector<f64> {
        self.inner.initial_state()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.inner.step(x, &self.norm.denormalize_input(u))
    }

    fn measure(&self, x: &DVector<f64>) -> DVector<f64> {
        self.norm.normalize_output(&self.inner.measure(x))
    }
}

/// Builds a plant by name: "gru-echo" replays the supplied model as the
/// plant, "surrogate" is the two-tank benchmark.
pub fn make_plant(kind: &str, model: Option<&GruParams>) -> Result<Box<dyn Plant>> {
    match kind {
        "gru-echo" => {
            let p = model.ok_or_else(|| {
                Error::InvalidArgument("gru-echo plant needs model weights".into())
            })?;
            Ok(Box::new(GruEchoPlant::new(p.clone())?))
        }
        "surrogate" => Ok(Box::new(SurrogatePlant)),
        other => Err(Error::UnknownPlantKind(other.to_string())),
    }
}

/// Adds independent zero-mean Gaussian noise of standard deviation `sigma` to
/// every channel; `sigma <= 0` returns the measurement untouched without
/// consuming randomness.
pub fn add_measurement_noise(
    y: &DVector<f64>,
    sigma: f64,
    rng: &mut impl Rng,
) -> DVector<f64> {
    if sigma <= 0.0 {
        return y.clone();
    }
    y.map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
}

/// Piecewise-constant output reference: each entry holds from its start step
/// until the next entry begins.
#[derive(Debug, Clone)]
pub struct ReferenceSchedule {
    steps: Vec<(usize, DVector<f64>)>,
}

impl ReferenceSchedule {
    /// `steps` are (start step, value) pairs; the first must start at 0 and
    /// starts must strictly increase.
    pub fn new(steps: Vec<(usize, DVector<f64>)>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidArgument("reference schedule is empty".into()));
        }
        if steps[0].0 != 0 {
            return Err(Error::InvalidArgument(
                "reference schedule must start at step 0".into(),
            ));
        }
        let n_y = steps[0].1.len();
        for w in steps.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::InvalidArgument(format!(
                    "reference start steps must strictly increase, got {} then {}",
                    w[0].0, w[1].0
                )));
            }
        }
        for (_, v) in &steps {
            if v.len() != n_y {
                return Err(Error::dims("reference value", n_y, v.len()));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite("reference value"));
            }
        }
        Ok(ReferenceSchedule { steps })
    }

    /// A single level held forever.
    pub fn constant(value: DVector<f64>) -> Result<Self> {
        Self::new(vec![(0, value)])
    }

    pub fn n_y(&self) -> usize {
        self.steps[0].1.len()
    }

    pub fn value_at(&self, k: usize) -> &DVector<f64> {
        let idx = self.steps.partition_point(|(start, _)| *start <= k);
        &self.steps[idx - 1].1
    }

    /// Steps at which the active value switches (excludes step 0).
    pub fn change_steps(&self) -> Vec<usize> {
        self.steps.iter().skip(1).map(|(k, _)| *k).collect()
    }
}

/// One recorded controller step.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub k: usize,
    pub y: DVector<f64>,
    pub y_ref: DVector<f64>,
    pub u: DVector<f64>,
    pub plant_state: DVector<f64>,
    pub x_hat: DVector<f64>,
    /// Infinity norm of the estimation error; only defined when the plant
    /// state lives in the model's state space.
    pub estimate_gap: Option<f64>,
    pub cost: f64,
    pub solve_seconds: f64,
    pub solve_capped: bool,
}

/// Full closed-loop record, one row per step.
#[derive(Debug, Clone, Default)]
pub struct ClosedLoopTrace {
    pub rows: Vec<TraceRow>,
}

impl ClosedLoopTrace {
    /// Writes the trace with every float at full precision, so reading the
    /// file back reproduces the run bit-for-bit.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let first = self.rows.first().ok_or_else(|| {
            Error::InvalidArgument("refusing to write an empty trace".into())
        })?;
        let mut header = vec!["k".to_string()];
        let blocks: [(&str, usize); 5] = [
            ("y", first.y.len()),
            ("yref", first.y_ref.len()),
            ("u", first.u.len()),
            ("xp", first.plant_state.len()),
            ("xhat", first.x_hat.len()),
        ];
        for (name, n) in blocks {
            header.extend((1..=n).map(|i| format!("{name}_{i}")));
        }
        header.extend(["est_gap", "cost", "solve_seconds", "solve_capped"].map(String::from));
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.k.to_string()];
            for block in [&row.y, &row.y_ref, &row.u, &row.plant_state, &row.x_hat] {
                rec.extend(block.iter().map(|v| full_precision(*v)));
            }
            rec.push(row.estimate_gap.map(full_precision).unwrap_or_default());
            rec.push(full_precision(row.cost));
            rec.push(full_precision(row.solve_seconds));
            rec.push(if row.solve_capped { "1" } else { "0" }.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        let names: Vec<&str> = headers.iter().collect();
        let count = |prefix: &str| {
            names
                .iter()
                .filter(|n| {
                    n.strip_prefix(prefix)
                        .and_then(|rest| rest.strip_prefix('_'))
                        .is_some_and(|idx| idx.chars().all(|c| c.is_ascii_digit()))
                })
                .count()
        };
        let (n_y, n_ref, n_u, n_xp, n_xh) =
            (count("y"), count("yref"), count("u"), count("xp"), count("xhat"));
        let expected = 1 + n_y + n_ref + n_u + n_xp + n_xh + 4;
        if n_y == 0 || n_ref != n_y || n_u == 0 || names.len() != expected {
            return Err(Error::Config(format!("unrecognised trace header {names:?}")));
        }
        let parse = |field: &str, row: usize| -> Result<f64> {
            field
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad value '{field}' in trace row {row}: {e}")))
        };
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != expected {
                return Err(Error::Config(format!(
                    "trace row {i} has {} fields, expected {expected}",
                    rec.len()
                )));
            }
            let mut at = 1;
            let mut take = |n: usize| -> Result<DVector<f64>> {
                let mut v = DVector::zeros(n);
                for j in 0..n {
                    v[j] = parse(&rec[at + j], i)?;
                }
                at += n;
                Ok(v)
            };
            let y = take(n_y)?;
            let y_ref = take(n_ref)?;
            let u = take(n_u)?;
            let plant_state = take(n_xp)?;
            let x_hat = take(n_xh)?;
            let estimate_gap = if rec[at].is_empty() {
                None
            } else {
                Some(parse(&rec[at], i)?)
            };
            rows.push(TraceRow {
                k: rec[0]
                    .parse()
                    .map_err(|e| Error::Config(format!("bad step index in row {i}: {e}")))?,
                y,
                y_ref,
                u,
                plant_state,
                x_hat,
                estimate_gap,
                cost: parse(&rec[at + 1], i)?,
                solve_seconds: parse(&rec[at + 2], i)?,
                solve_capped: &rec[at + 3] == "1",
            });
        }
        Ok(ClosedLoopTrace { rows })
    }
}

/// Knobs of a closed-loop run that are not part of the controller design.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub steps: usize,
    /// Standard deviation of the output measurement noise; 0 disables it.
    pub noise_sigma: f64,
    pub seed: u64,
    pub solver: SolverOptions,
    /// Initial state estimate; defaults to the first target equilibrium.
    pub x_hat0: Option<DVector<f64>>,
    /// Initial plant state; defaults to the plant's rest state.
    pub plant_x0: Option<DVector<f64>>,
}

impl RunOptions {
    pub fn new(steps: usize) -> Self {
        RunOptions {
            steps,
            noise_sigma: 0.0,
            seed: 0,
            solver: SolverOptions::default(),
            x_hat0: None,
            plant_x0: None,
        }
    }
}

/// Runs the full feedback loop for `opts.steps` steps. Each step measures the
/// plant first, computes the input from the current estimate (which carries
/// information through the previous measurement only), advances the plant,
/// and finally advances the observer with the applied input and the new
/// measurement. A reference change recomputes only the target equilibrium,
/// warm-started from the previous one; everything else in the design is
/// reused. Hitting the solver iteration cap is recorded in the trace, never
/// an error.
pub fn run_closed_loop(
    plant: &dyn Plant,
    p: &GruParams,
    design: &ObserverDesign,
    base: &FhocpSpec,
    bx: &InvariantBox,
    schedule: &ReferenceSchedule,
    opts: &RunOptions,
) -> Result<ClosedLoopTrace> {
    if plant.n_u() != p.n_u() || plant.n_y() != p.n_y() {
        return Err(Error::dims(
            "plant interface",
            format!("u {} y {}", p.n_u(), p.n_y()),
            format!("u {} y {}", plant.n_u(), plant.n_y()),
        ));
    }
    if schedule.n_y() != p.n_y() {
        return Err(Error::dims("reference dimension", p.n_y(), schedule.n_y()));
    }
    if opts.steps == 0 {
        return Err(Error::InvalidArgument("run needs at least one step".into()));
    }
    if !(opts.noise_sigma.is_finite() && opts.noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise level must be non-negative, got {}",
            opts.noise_sigma
        )));
    }

    let eq_opts = EquilibriumOptions::default();
    let retarget = |spec: &FhocpSpec, y_ref: &DVector<f64>, k: usize| -> Result<FhocpSpec> {
        let eq = find_equilibrium(
            p,
            bx,
            y_ref,
            (&spec.target.x, &spec.target.u),
            eq_opts,
        )
        .map_err(|e| {
            Error::InvalidArgument(format!(
                "reference at step {k} admits no feasible equilibrium: {e}"
            ))
        })?;
        spec.with_target(eq)
    };

    let mut spec = retarget(base, schedule.value_at(0), 0)?;
    let mut x_hat = match &opts.x_hat0 {
        Some(x) => {
            if x.len() != p.n_x() {
                return Err(Error::dims("initial estimate", p.n_x(), x.len()));
            }
            if !bx.contains(x) {
                return Err(Error::InvalidArgument(
                    "initial estimate lies outside the invariant box".into(),
                ));
            }
            x.clone()
        }
        None => spec.target.x.clone(),
    };
    let mut x_p = match &opts.plant_x0 {
        Some(x) => {
            if x.len() != plant.n_state() {
                return Err(Error::dims("initial plant state", plant.n_state(), x.len()));
            }
            x.clone()
        }
        None => plant.initial_state(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut previous: Option<FhocpSolution> = None;
    let mut rows = Vec::with_capacity(opts.steps);
    for k in 0..opts.steps {
        let y_ref = schedule.value_at(k);
        if k > 0 && y_ref != schedule.value_at(k - 1) {
            spec = retarget(&spec, y_ref, k)?;
        }
        let y_meas = add_measurement_noise(&plant.measure(&x_p), opts.noise_sigma, &mut rng);
        let (u, solution) = mpc_step(p, &spec, &x_hat, previous.as_ref(), &opts.solver)?;
        rows.push(TraceRow {
            k,
            y: y_meas.clone(),
            y_ref: y_ref.clone(),
            u: u.clone(),
            plant_state: x_p.clone(),
            x_hat: x_hat.clone(),
            estimate_gap: (x_p.len() == p.n_x()).then(|| inf_norm(&(&x_p - &x_hat))),
            cost: solution.cost,
            solve_seconds: solution.diagnostics.wall_time.as_secs_f64(),
            solve_capped: solution.diagnostics.max_iters_reached,
        });
        x_p = plant.step(&x_p, &u);
        x_hat = observer_step(p, &design.gains, &x_hat, &u, &y_meas)?;
        previous = Some(solution);
    }
    Ok(ClosedLoopTrace { rows })
}
