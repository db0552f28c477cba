//! Single-layer GRU state-space model, the box it evolves in, and the
//! closed-form contraction certificate computed from weight norms alone.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{
    all_finite_mat, all_finite_vec, concat_inf_norm, induced_inf_norm, sigmoid, sigmoid_vec,
    tanh_vec,
};

/// Weights of a single-layer GRU:
///
/// ```text
/// z  = logistic(W_z u + U_z x + b_z)          update gate
/// f  = logistic(W_f u + U_f x + b_f)          forget gate
/// r  = tanh(W_r u + U_r (f .* x) + b_r)       candidate state
/// x+ = z .* x + (1 - z) .* r
/// y  = U_o x + b_o
/// ```
///
/// W_* are n_x by n_u, U_* are n_x by n_x, b_* are n_x, U_o is n_y by n_x,
/// b_o is n_y. The struct doubles as a gradient container: training code
/// stores d(loss)/d(weight) in a value of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_z: DMatrix<f64>,
    pub u_z: DMatrix<f64>,
    pub b_z: DVector<f64>,
    pub w_f: DMatrix<f64>,
    pub u_f: DMatrix<f64>,
    pub b_f: DVector<f64>,
    pub w_r: DMatrix<f64>,
    pub u_r: DMatrix<f64>,
    pub b_r: DVector<f64>,
    pub u_o: DMatrix<f64>,
    pub b_o: DVector<f64>,
}

impl GruParams {
    /// Validates shape consistency and finiteness of every entry.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        w_z: DMatrix<f64>,
        u_z: DMatrix<f64>,
        b_z: DVector<f64>,
        w_f: DMatrix<f64>,
        u_f: DMatrix<f64>,
        b_f: DVector<f64>,
        w_r: DMatrix<f64>,
        u_r: DMatrix<f64>,
        b_r: DVector<f64>,
        u_o: DMatrix<f64>,
        b_o: DVector<f64>,
    ) -> Result<Self> {
        let p = GruParams {
            w_z,
            u_z,
            b_z,
            w_f,
            u_f,
            b_f,
            w_r,
            u_r,
            b_r,
            u_o,
            b_o,
        };
        p.validate()?;
        Ok(p)
    }

    /// All-zero weights with the given dimensions.
    pub fn zeros(n_x: usize, n_u: usize, n_y: usize) -> Self {
        GruParams {
            w_z: DMatrix::zeros(n_x, n_u),
            u_z: DMatrix::zeros(n_x, n_x),
            b_z: DVector::zeros(n_x),
            w_f: DMatrix::zeros(n_x, n_u),
            u_f: DMatrix::zeros(n_x, n_x),
            b_f: DVector::zeros(n_x),
            w_r: DMatrix::zeros(n_x, n_u),
            u_r: DMatrix::zeros(n_x, n_x),
            b_r: DVector::zeros(n_x),
            u_o: DMatrix::zeros(n_y, n_x),
            b_o: DVector::zeros(n_y),
        }
    }

    /// Zero weights shaped like `self`; the natural start for gradient
    /// accumulators and momentum buffers.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n_x(), self.n_u(), self.n_y())
    }

    /// Weights drawn uniformly from [-scale, scale], reproducible from `seed`.
    pub fn random_scaled(n_x: usize, n_u: usize, n_y: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
            DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
        };
        let vec = |rng: &mut ChaCha8Rng, r: usize| {
            DVector::from_fn(r, |_, _| rng.random_range(-scale..scale))
        };
        GruParams {
            w_z: mat(&mut rng, n_x, n_u),
            u_z: mat(&mut rng, n_x, n_x),
            b_z: vec(&mut rng, n_x),
            w_f: mat(&mut rng, n_x, n_u),
            u_f: mat(&mut rng, n_x, n_x),
            b_f: vec(&mut rng, n_x),
            w_r: mat(&mut rng, n_x, n_u),
            u_r: mat(&mut rng, n_x, n_x),
            b_r: vec(&mut rng, n_x),
            u_o: mat(&mut rng, n_y, n_x),
            b_o: vec(&mut rng, n_y),
        }
    }

    pub fn n_x(&self) -> usize {
        self.u_z.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.w_z.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.u_o.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (n_x, n_u, n_y) = (self.n_x(), self.n_u(), self.n_y());
        if n_x == 0 || n_u == 0 || n_y == 0 {
            return Err(Error::InvalidArgument(
                "GRU dimensions must all be at least 1".into(),
            ));
        }
        let mat_shapes = [
            ("W_z", &self.w_z, n_x, n_u),
            ("U_z", &self.u_z, n_x, n_x),
            ("W_f", &self.w_f, n_x, n_u),
            ("U_f", &self.u_f, n_x, n_x),
            ("W_r", &self.w_r, n_x, n_u),
            ("U_r", &self.u_r, n_x, n_x),
            ("U_o", &self.u_o, n_y, n_x),
        ];
        for (name, m, rows, cols) in mat_shapes {
            if m.shape() != (rows, cols) {
                return Err(Error::dims(
                    "GruParams",
                    format!("{name} of shape {rows}x{cols}"),
                    format!("{}x{}", m.nrows(), m.ncols()),
                ));
            }
            if !all_finite_mat(m) {
                return Err(Error::NonFinite("GRU weight matrix"));
            }
        }
        let vec_shapes = [
            ("b_z", &self.b_z, n_x),
            ("b_f", &self.b_f, n_x),
            ("b_r", &self.b_r, n_x),
            ("b_o", &self.b_o, n_y),
        ];
        for (name, v, rows) in vec_shapes {
            if v.len() != rows {
                return Err(Error::dims(
                    "GruParams",
                    format!("{name} of length {rows}"),
                    v.len(),
                ));
            }
            if !all_finite_vec(v) {
                return Err(Error::NonFinite("GRU bias vector"));
            }
        }
        Ok(())
    }

    /// Applies `f(entry, other_entry)` to every weight in place. Both values
    /// must have identical dimensions; used by optimisers to fold gradients
    /// and momentum buffers into the weights.
    pub fn zip_apply(&mut self, other: &GruParams, mut f: impl FnMut(&mut f64, f64)) {
        let pairs_m = [
            (&mut self.w_z, &other.w_z),
            (&mut self.u_z, &other.u_z),
            (&mut self.w_f, &other.w_f),
            (&mut self.u_f, &other.u_f),
            (&mut self.w_r, &other.w_r),
            (&mut self.u_r, &other.u_r),
            (&mut self.u_o, &other.u_o),
        ];
        for (a, b) in pairs_m {
            assert_eq!(a.shape(), b.shape(), "zip_apply on mismatched shapes");
            for (x, y) in a.iter_mut().zip(b.iter()) {
                f(x, *y);
            }
        }
        let pairs_v = [
            (&mut self.b_z, &other.b_z),
            (&mut self.b_f, &other.b_f),
            (&mut self.b_r, &other.b_r),
            (&mut self.b_o, &other.b_o),
        ];
        for (a, b) in pairs_v {
            assert_eq!(a.len(), b.len(), "zip_apply on mismatched shapes");
            for (x, y) in a.iter_mut().zip(b.iter()) {
                f(x, *y);
            }
        }
    }

    fn entries(&self) -> impl Iterator<Item = &f64> {
        [&self.w_z, &self.u_z, &self.w_f, &self.u_f, &self.w_r, &self.u_r, &self.u_o]
            .into_iter()
            .flat_map(|m| m.iter())
            .chain(
                [&self.b_z, &self.b_f, &self.b_r, &self.b_o]
                    .into_iter()
                    .flat_map(|v| v.iter()),
            )
    }

    fn entries_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        let GruParams {
            w_z,
            u_z,
            b_z,
            w_f,
            u_f,
            b_f,
            w_r,
            u_r,
            b_r,
            u_o,
            b_o,
        } = self;
        [w_z, u_z, w_f, u_f, w_r, u_r, u_o]
            .into_iter()
            .flat_map(|m| m.iter_mut())
            .chain([b_z, b_f, b_r, b_o].into_iter().flat_map(|v| v.iter_mut()))
    }

    /// Multiplies every entry by `s`.
    pub fn scale_mut(&mut self, s: f64) {
        for x in self.entries_mut() {
            *x *= s;
        }
    }

    /// Euclidean norm over all entries, treating the weight set as one flat
    /// vector. Used for global gradient clipping.
    pub fn flat_norm(&self) -> f64 {
        self.entries().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: WeightsFile = serde_json::from_str(text)?;
        file.into_params()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&WeightsFile::from_params(self))
            .expect("weights serialise to JSON")
    }

    pub fn load_json(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save_json(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// On-disk weight format: explicit dimensions plus row-major nested arrays.
#[derive(Serialize, Deserialize)]
struct WeightsFile {
    n_x: usize,
    n_u: usize,
    n_y: usize,
    #[serde(rename = "W_z")]
    w_z: Vec<Vec<f64>>,
    #[serde(rename = "U_z")]
    u_z: Vec<Vec<f64>>,
    #[serde(rename = "b_z")]
    b_z: Vec<f64>,
    #[serde(rename = "W_f")]
    w_f: Vec<Vec<f64>>,
    #[serde(rename = "U_f")]
    u_f: Vec<Vec<f64>>,
    #[serde(rename = "b_f")]
    b_f: Vec<f64>,
    #[serde(rename = "W_r")]
    w_r: Vec<Vec<f64>>,
    #[serde(rename = "U_r")]
    u_r: Vec<Vec<f64>>,
    #[serde(rename = "b_r")]
    b_r: Vec<f64>,
    #[serde(rename = "U_o")]
    u_o: Vec<Vec<f64>>,
    #[serde(rename = "b_o")]
    b_o: Vec<f64>,
}

fn rows_to_mat(name: &'static str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::dims(
            "weights file",
            format!("{name} as {nrows} rows of {ncols}"),
            format!(
                "{} rows of {:?}",
                rows.len(),
                rows.iter().map(|r| r.len()).collect::<Vec<_>>()
            ),
        ));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn mat_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

impl WeightsFile {
    fn from_params(p: &GruParams) -> Self {
        WeightsFile {
            n_x: p.n_x(),
            n_u: p.n_u(),
            n_y: p.n_y(),
            w_z: mat_to_rows(&p.w_z),
            u_z: mat_to_rows(&p.u_z),
            b_z: p.b_z.iter().copied().collect(),
            w_f: mat_to_rows(&p.w_f),
            u_f: mat_to_rows(&p.u_f),
            b_f: p.b_f.iter().copied().collect(),
            w_r: mat_to_rows(&p.w_r),
            u_r: mat_to_rows(&p.u_r),
            b_r: p.b_r.iter().copied().collect(),
            u_o: mat_to_rows(&p.u_o),
            b_o: p.b_o.iter().copied().collect(),
        }
    }

    fn into_params(self) -> Result<GruParams> {
        let (n_x, n_u, n_y) = (self.n_x, self.n_u, self.n_y);
        GruParams::new(
            rows_to_mat("W_z", &self.w_z, n_x, n_u)?,
            rows_to_mat("U_z", &self.u_z, n_x, n_x)?,
            DVector::from_vec(self.b_z),
            rows_to_mat("W_f", &self.w_f, n_x, n_u)?,
            rows_to_mat("U_f", &self.u_f, n_x, n_x)?,
            DVector::from_vec(self.b_f),
            rows_to_mat("W_r", &self.w_r, n_x, n_u)?,
            rows_to_mat("U_r", &self.u_r, n_x, n_x)?,
            DVector::from_vec(self.b_r),
            rows_to_mat("U_o", &self.u_o, n_y, n_x)?,
            DVector::from_vec(self.b_o),
        )
    }
}

/// Gate activations produced during one step.
#[derive(Debug, Clone, PartialEq)]
pub struct GruGates {
    pub z: DVector<f64>,
    pub f: DVector<f64>,
    pub r: DVector<f64>,
}

fn check_state_input(p: &GruParams, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
    if x.len() != p.n_x() {
        return Err(Error::dims("state vector", p.n_x(), x.len()));
    }
    if u.len() != p.n_u() {
        return Err(Error::dims("input vector", p.n_u(), u.len()));
    }
    if !all_finite_vec(x) || !all_finite_vec(u) {
        return Err(Error::NonFinite("state or input vector"));
    }
    Ok(())
}

pub(crate) fn gates_unchecked(p: &GruParams, x: &DVector<f64>, u: &DVector<f64>) -> GruGates {
    let z = sigmoid_vec(&(&p.w_z * u + &p.u_z * x + &p.b_z));
    let f = sigmoid_vec(&(&p.w_f * u + &p.u_f * x + &p.b_f));
    let r = tanh_vec(&(&p.w_r * u + &p.u_r * f.component_mul(x) + &p.b_r));
    GruGates { z, f, r }
}

pub(crate) fn step_unchecked(p: &GruParams, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let g = gates_unchecked(p, x, u);
    apply_gates(x, &g)
}

pub(crate) fn apply_gates(x: &DVector<f64>, g: &GruGates) -> DVector<f64> {
    let ones = DVector::from_element(x.len(), 1.0);
    g.z.component_mul(x) + (ones - &g.z).component_mul(&g.r)
}

/// Gate activations at (x, u); exposed so tests and adjoint code can inspect
/// the intermediate quantities of a step.
pub fn gru_gates(p: &GruParams, x: &DVector<f64>, u: &DVector<f64>) -> Result<GruGates> {
    check_state_input(p, x, u)?;
    Ok(gates_unchecked(p, x, u))
}

/// Advances the state one step.
pub fn gru_step(p: &GruParams, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    check_state_input(p, x, u)?;
    Ok(step_unchecked(p, x, u))
}

/// Affine read-out y = U_o x + b_o.
pub fn gru_output(p: &GruParams, x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != p.n_x() {
        return Err(Error::dims("state vector", p.n_x(), x.len()));
    }
    Ok(&p.u_o * x + &p.b_o)
}

pub(crate) fn output_unchecked(p: &GruParams, x: &DVector<f64>) -> DVector<f64> {
    &p.u_o * x + &p.b_o
}

/// Hyper-cube { x : max_i |x_i| <= radius } with radius at least one. The
/// state recursion maps this box into itself for any admissible input, which
/// is what makes the worst-case gate bounds below valid along trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvariantBox {
    radius: f64,
}

impl InvariantBox {
    pub fn new(radius: f64) -> Result<Self> {
        if !radius.is_finite() || radius < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "invariant box radius must be finite and >= 1, got {radius}"
            )));
        }
        Ok(InvariantBox { radius })
    }

    /// The tightest admissible box: radius one. tanh keeps candidate states
    /// inside it, so it is invariant for every weight set.
    pub fn unit() -> Self {
        InvariantBox { radius: 1.0 }
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.iter().all(|v| v.abs() <= self.radius)
    }
}

impl Default for InvariantBox {
    fn default() -> Self {
        Self::unit()
    }
}

/// Worst-case gate saturations over the box and the unit input cube:
/// each is the activation evaluated at the largest attainable pre-activation
/// magnitude, i.e. the row norm of [W, radius * U, b].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GateBounds {
    pub sigma_z: f64,
    pub sigma_f: f64,
    pub phi_r: f64,
}

/// Computes the saturation levels of the three gates over all x in the box
/// and all inputs with max_i |u_i| <= 1.
pub fn gate_bounds(p: &GruParams, bx: &InvariantBox) -> GateBounds {
    let s = bx.radius();
    GateBounds {
        sigma_z: sigmoid(concat_inf_norm(&p.w_z, &p.u_z, &p.b_z, s)),
        sigma_f: sigmoid(concat_inf_norm(&p.w_f, &p.u_f, &p.b_f, s)),
        phi_r: f64::tanh(concat_inf_norm(&p.w_r, &p.u_r, &p.b_r, s)),
    }
}

/// One-step Lipschitz factor of the state map in the infinity norm, as a
/// function of the update-gate value z. Affine in z, so its maximum over the
/// attainable gate interval sits at an endpoint.
pub fn kappa_x(p: &GruParams, bx: &InvariantBox, z: f64) -> Result<f64> {
    if !z.is_finite() || !(0.0..=1.0).contains(&z) {
        return Err(Error::InvalidArgument(format!(
            "gate value must lie in [0, 1], got {z}"
        )));
    }
    let gb = gate_bounds(p, bx);
    Ok(kappa_x_inner(p, bx, &gb, z))
}

pub(crate) fn kappa_x_inner(p: &GruParams, bx: &InvariantBox, gb: &GateBounds, z: f64) -> f64 {
    let s = bx.radius();
    let n_uf = induced_inf_norm(&p.u_f);
    let n_ur = induced_inf_norm(&p.u_r);
    let n_uz = induced_inf_norm(&p.u_z);
    z + (1.0 - z) * (0.25 * s * n_uf + gb.sigma_f) * n_ur + 0.25 * (gb.phi_r + s) * n_uz
}

/// Contraction certificate for the state recursion. When `certified` is true,
/// any two trajectories driven by the same input sequence approach each other
/// in the 2-norm at rate `lambda` per step, with transient amplification at
/// most `mu` = sqrt(n_x) (the price of passing through the infinity norm).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DeltaIssCertificate {
    pub mu: f64,
    pub lambda: f64,
    pub certified: bool,
    pub gate_bounds: GateBounds,
    pub x_check: f64,
    /// Lipschitz factor at the high endpoint z = sigma_z.
    pub kappa_upper: f64,
    /// Lipschitz factor at the low endpoint z = 1 - sigma_z.
    pub kappa_lower: f64,
}

/// Evaluates the certificate: lambda is the worst Lipschitz factor over the
/// attainable update-gate interval [1 - sigma_z, sigma_z]; certification
/// requires strictly lambda < 1.
pub fn deltaiss_certificate(p: &GruParams, bx: &InvariantBox) -> DeltaIssCertificate {
    let gb = gate_bounds(p, bx);
    let kappa_upper = kappa_x_inner(p, bx, &gb, gb.sigma_z);
    let kappa_lower = kappa_x_inner(p, bx, &gb, 1.0 - gb.sigma_z);
    let lambda = kappa_upper.max(kappa_lower);
    DeltaIssCertificate {
        mu: (p.n_x() as f64).sqrt(),
        lambda,
        certified: lambda < 1.0,
        gate_bounds: gb,
        x_check: bx.radius(),
        kappa_upper,
        kappa_lower,
    }
}

/// `count` points drawn uniformly from the box, reproducible from `seed`.
pub fn sample_invariant_box(
    bx: &InvariantBox,
    dim: usize,
    count: usize,
    seed: u64,
) -> Vec<DVector<f64>> {
    sample_cube(bx.radius(), dim, count, seed)
}

/// `count` points drawn uniformly from the unit input cube.
pub fn sample_input_box(dim: usize, count: usize, seed: u64) -> Vec<DVector<f64>> {
    sample_cube(1.0, dim, count, seed)
}

fn sample_cube(radius: f64, dim: usize, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-radius..radius)))
        .collect()
}
