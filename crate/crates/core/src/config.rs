//! Experiment configuration: a TOML file describing model, observer,
//! controller weights, reference schedule, plant, and noise, resolved into
//! the runnable objects, plus a JSON manifest recording every resolved
//! parameter and where the contraction rate came from.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{estimate_lambda, Normalization, TrajectoryPairConfig};
use crate::gru::{deltaiss_certificate, DeltaIssCertificate, GruParams, InvariantBox};
use crate::mpc::{
    find_equilibrium, min_simulation_horizon, EquilibriumOptions, FhocpSpec, InputBox,
    SolverOptions,
};
use crate::observer::{tune_observer, ObserverDesign};
use crate::sim::{make_plant, NormalizedPlant, Plant, ReferenceSchedule, RunOptions};

/// A state weight given either as a scalar multiple of the identity or as a
/// full row-major matrix.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum WeightSpec {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

impl WeightSpec {
    fn resolve(&self, dim: usize, name: &str) -> Result<DMatrix<f64>> {
        match self {
            WeightSpec::Scalar(s) => Ok(DMatrix::identity(dim, dim) * *s),
            WeightSpec::Matrix(rows) => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(Error::Config(format!(
                        "{name} must be a {dim}x{dim} matrix or a scalar"
                    )));
                }
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                Ok(DMatrix::from_row_slice(dim, dim, &flat))
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Weight JSON, relative to the config file.
    pub weights: String,
    /// Invariant box radius; defaults to 1.
    pub x_check: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ObserverSection {
    /// Gain JSON produced by the observer tuner; absent means tune now.
    pub gains: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcSection {
    pub q: WeightSpec,
    pub r: WeightSpec,
    pub s: WeightSpec,
    pub n: usize,
    /// Simulation horizon; absent means the smallest admissible value.
    pub m: Option<usize>,
    pub u_min: Option<Vec<f64>>,
    pub u_max: Option<Vec<f64>>,
    /// Contraction rate used in the horizon condition: "certificate" (the
    /// default), "empirical", or an explicit number in string form.
    pub lambda: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    pub pairs: Option<usize>,
    pub horizon: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceStep {
    pub time: usize,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub kind: String,
    /// Separate weight JSON for the plant; defaults to the controller model,
    /// so a mismatch study can pit a trained model against its teacher.
    pub weights: Option<String>,
    /// Normalization manifest JSON for plants operating in raw units.
    pub normalization: Option<String>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub steps: usize,
    pub x_hat0: Option<Vec<f64>>,
    pub plant_x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub tol_opt: Option<f64>,
    pub max_iters: Option<usize>,
    pub memory: Option<usize>,
    pub multi_start: Option<bool>,
}

/// The raw deserialized experiment file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub model: ModelSection,
    #[serde(default)]
    pub observer: ObserverSection,
    pub mpc: MpcSection,
    pub estimate: Option<EstimateSection>,
    pub reference: Vec<ReferenceStep>,
    pub plant: Option<PlantSection>,
    #[serde(default)]
    pub noise: NoiseSection,
    pub sim: SimSection,
    #[serde(default)]
    pub solver: SolverSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

/// Where the contraction rate in the horizon condition came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaSource {
    Certificate,
    Empirical,
    Explicit,
}

/// Every resolved parameter of a run, serialized next to each trace so the
/// experiment is reconstructible without the original config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub weights_path: String,
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub x_check: f64,
    pub certificate: DeltaIssCertificate,
    /// Rate actually used by the horizon condition.
    pub lambda: f64,
    pub lambda_source: LambdaSource,
    pub mu: f64,
    pub observer_lambda: f64,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    pub n: usize,
    pub m: usize,
    /// Real-valued horizon bound the chosen M strictly exceeds.
    pub m_bound: f64,
    pub m_min: usize,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub reference: Vec<(usize, Vec<f64>)>,
    pub plant_kind: String,
    pub plant_weights: Option<String>,
    pub noise_sigma: f64,
    pub steps: usize,
    pub seed: u64,
    pub solver_tol: f64,
    pub solver_max_iters: usize,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises to JSON")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// A fully resolved experiment, ready to hand to the closed-loop runner.
pub struct Experiment {
    pub model: GruParams,
    pub state_box: InvariantBox,
    pub observer: ObserverDesign,
    pub fhocp: FhocpSpec,
    pub schedule: ReferenceSchedule,
    pub plant: Box<dyn Plant>,
    pub run: RunOptions,
    pub manifest: RunManifest,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Loads and resolves an experiment file; referenced files are looked up
/// relative to the config's directory.
pub fn load_experiment(path: &Path) -> Result<Experiment> {
    let text = std::fs::read_to_string(path)?;
    let cfg = ExperimentConfig::parse(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    resolve_experiment(&cfg, base)
}

/// Turns a parsed config into runnable objects, validating every design
/// condition on the way.
pub fn resolve_experiment(cfg: &ExperimentConfig, base: &Path) -> Result<Experiment> {
    let weights_path = join(base, &cfg.model.weights);
    let model = GruParams::load_json(&weights_path)?;
    let state_box = InvariantBox::new(cfg.model.x_check.unwrap_or(1.0))?;
    let certificate = deltaiss_certificate(&model, &state_box);
    let seed = cfg.seed.unwrap_or(0);

    let (lambda, lambda_source) = match cfg.mpc.lambda.as_deref() {
        None | Some("certificate") => (certificate.lambda, LambdaSource::Certificate),
        Some("empirical") => {
            let est = cfg.estimate.clone().unwrap_or(EstimateSection {
                pairs: None,
                horizon: None,
                seed: None,
            });
            let lam = estimate_lambda(
                &model,
                &TrajectoryPairConfig {
                    n_pairs: est.pairs.unwrap_or(10_000),
                    horizon: est.horizon.unwrap_or(300),
                    mu: certificate.mu,
                    seed: est.seed.unwrap_or(seed),
                    state_box,
                },
            )?;
            (lam, LambdaSource::Empirical)
        }
        Some(text) => {
            let lam: f64 = text.parse().map_err(|_| {
                Error::Config(format!(
                    "mpc.lambda must be \"certificate\", \"empirical\", or a number, got '{text}'"
                ))
            })?;
            (lam, LambdaSource::Explicit)
        }
    };
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::NotContractive { lambda });
    }

    let observer = match &cfg.observer.gains {
        Some(rel) => {
            let text = std::fs::read_to_string(join(base, rel))?;
            crate::observer::ObserverDesign::from_json(&text, &model, &state_box)?
        }
        None => tune_observer(&model, &state_box)?,
    };

    let n_x = model.n_x();
    let n_u = model.n_u();
    let q = cfg.mpc.q.resolve(n_x, "mpc.q")?;
    let r = cfg.mpc.r.resolve(n_u, "mpc.r")?;
    let s = cfg.mpc.s.resolve(n_x, "mpc.s")?;
    let horizon = min_simulation_horizon(certificate.mu, lambda, &q, &s)?;
    let m = cfg.mpc.m.unwrap_or(horizon.m_min);

    let lo = cfg
        .mpc
        .u_min
        .clone()
        .unwrap_or_else(|| vec![-1.0; n_u]);
    let hi = cfg.mpc.u_max.clone().unwrap_or_else(|| vec![1.0; n_u]);
    let input_box = InputBox::new(DVector::from_vec(lo), DVector::from_vec(hi))?;

    if cfg.reference.is_empty() {
        return Err(Error::Config("at least one reference step is required".into()));
    }
    let schedule = ReferenceSchedule::new(
        cfg.reference
            .iter()
            .map(|s| (s.time, DVector::from_vec(s.value.clone())))
            .collect(),
    )?;

    let target = find_equilibrium(
        &model,
        &state_box,
        schedule.value_at(0),
        (&DVector::zeros(n_x), &DVector::zeros(n_u)),
        EquilibriumOptions::default(),
    )?;
    let fhocp = FhocpSpec::new(
        q.clone(),
        r.clone(),
        s.clone(),
        cfg.mpc.n,
        m,
        input_box.clone(),
        target,
        certificate.mu,
        lambda,
    )?;

    let plant_kind = cfg
        .plant
        .as_ref()
        .map(|p| p.kind.clone())
        .unwrap_or_else(|| "gru-echo".to_string());
    let plant_model = match cfg.plant.as_ref().and_then(|p| p.weights.as_ref()) {
        Some(rel) => Some(GruParams::load_json(&join(base, rel))?),
        None => None,
    };
    let mut plant = make_plant(&plant_kind, Some(plant_model.as_ref().unwrap_or(&model)))?;
    if let Some(rel) = cfg.plant.as_ref().and_then(|p| p.normalization.as_ref()) {
        let text = std::fs::read_to_string(join(base, rel))?;
        plant = Box::new(NormalizedPlant::new(plant, Normalization::from_json(&text)?)?);
    }

    let mut solver = SolverOptions::default();
    if let Some(t) = cfg.solver.tol_opt {
        solver.tol_opt = t;
    }
    if let Some(i) = cfg.solver.max_iters {
        solver.max_iters = i;
    }
    if let Some(mem) = cfg.solver.memory {
        solver.memory = mem;
    }
    if let Some(ms) = cfg.solver.multi_start {
        solver.multi_start = ms;
    }

    let noise_sigma = cfg.noise.sigma.unwrap_or(0.0);
    let run = RunOptions {
        steps: cfg.sim.steps,
        noise_sigma,
        seed,
        solver,
        x_hat0: cfg.sim.x_hat0.clone().map(DVector::from_vec),
        plant_x0: cfg.sim.plant_x0.clone().map(DVector::from_vec),
    };

    let manifest = RunManifest {
        weights_path: cfg.model.weights.clone(),
        n_x,
        n_u,
        n_y: model.n_y(),
        x_check: state_box.radius(),
        certificate,
        lambda,
        lambda_source,
        mu: certificate.mu,
        observer_lambda: observer.lambda,
        q: matrix_rows(&q),
        r: matrix_rows(&r),
        s: matrix_rows(&s),
        n: cfg.mpc.n,
        m,
        m_bound: horizon.bound,
        m_min: horizon.m_min,
        u_min: input_box.lo().iter().copied().collect(),
        u_max: input_box.hi().iter().copied().collect(),
        reference: cfg
            .reference
            .iter()
            .map(|s| (s.time, s.value.clone()))
            .collect(),
        plant_kind,
        plant_weights: cfg.plant.as_ref().and_then(|p| p.weights.clone()),
        noise_sigma,
        steps: cfg.sim.steps,
        seed,
        solver_tol: solver.tol_opt,
        solver_max_iters: solver.max_iters,
    };

    Ok(Experiment {
        model,
        state_box,
        observer,
        fhocp,
        schedule,
        plant,
        run,
        manifest,
    })
}

fn join(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
