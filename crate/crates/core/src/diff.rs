//! Reverse-mode differentiation of GRU rollouts. The computation graph of a
//! step is small and fixed, so the adjoints are written out by hand using
//! sigmoid' = s(1-s) and tanh' = 1 - t^2 instead of pulling in an autodiff
//! framework. A taped forward pass feeds exact backward passes for gradients
//! with respect to the free inputs (for the optimal control solver) and with
//! respect to the weights (for identification).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gru::{gates_unchecked, GruGates, GruParams};
use crate::math::all_finite_vec;

/// Forward-pass record of a rollout: states, applied inputs, gate values and
/// pre-activations per step. The first `n_free` inputs are decision
/// variables; the remaining steps repeat a constant tail input and therefore
/// expose no gradient slots.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTape {
    states: Vec<DVector<f64>>,
    inputs: Vec<DVector<f64>>,
    gates: Vec<GruGates>,
    pre_z: Vec<DVector<f64>>,
    pre_f: Vec<DVector<f64>>,
    pre_r: Vec<DVector<f64>>,
    n_free: usize,
}

impl RolloutTape {
    /// All states x_0 .. x_T, where T = free + tail horizon.
    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn state(&self, k: usize) -> &DVector<f64> {
        &self.states[k]
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("tape holds at least x0")
    }

    /// Applied inputs u_0 .. u_{T-1}, tail copies included.
    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    /// Number of steps T.
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Number of decision inputs N.
    pub fn n_free(&self) -> usize {
        self.n_free
    }

    pub fn gates(&self, k: usize) -> &GruGates {
        &self.gates[k]
    }
}

/// Rolls the model forward from `x0`, applying the free inputs first and then
/// `tail.1` copies of the constant input `tail.0`, recording every
/// intermediate for later backward passes.
pub fn rollout(
    p: &GruParams,
    x0: &DVector<f64>,
    free_inputs: &[DVector<f64>],
    tail: (&DVector<f64>, usize),
) -> Result<RolloutTape> {
    let (tail_input, tail_len) = tail;
    let total = free_inputs.len() + tail_len;
    if total == 0 {
        return Err(Error::InvalidArgument(
            "rollout horizon must be at least one step".into(),
        ));
    }
    if x0.len() != p.n_x() {
        return Err(Error::dims("rollout initial state", p.n_x(), x0.len()));
    }
    if !all_finite_vec(x0) {
        return Err(Error::NonFinite("rollout initial state"));
    }
    for u in free_inputs.iter().chain(std::iter::once(tail_input)) {
        if u.len() != p.n_u() {
            return Err(Error::dims("rollout input", p.n_u(), u.len()));
        }
        if !all_finite_vec(u) {
            return Err(Error::NonFinite("rollout input"));
        }
    }

    let mut tape = RolloutTape {
        states: Vec::with_capacity(total + 1),
        inputs: Vec::with_capacity(total),
        gates: Vec::with_capacity(total),
        pre_z: Vec::with_capacity(total),
        pre_f: Vec::with_capacity(total),
        pre_r: Vec::with_capacity(total),
        n_free: free_inputs.len(),
    };
    tape.states.push(x0.clone());
    for k in 0..total {
        let u = if k < free_inputs.len() {
            &free_inputs[k]
        } else {
            tail_input
        };
        let x = tape.states.last().expect("states non-empty");
        let pre_z = &p.w_z * u + &p.u_z * x + &p.b_z;
        let pre_f = &p.w_f * u + &p.u_f * x + &p.b_f;
        let z = pre_z.map(crate::math::sigmoid);
        let f = pre_f.map(crate::math::sigmoid);
        let pre_r = &p.w_r * u + &p.u_r * f.component_mul(x) + &p.b_r;
        let r = pre_r.map(f64::tanh);
        let ones = DVector::from_element(x.len(), 1.0);
        let next = z.component_mul(x) + (ones - &z).component_mul(&r);
        tape.states.push(next);
        tape.inputs.push(u.clone());
        tape.gates.push(GruGates { z, f, r });
        tape.pre_z.push(pre_z);
        tape.pre_f.push(pre_f);
        tape.pre_r.push(pre_r);
    }
    Ok(tape)
}

/// Adjoint quantities of one step, shared by both backward passes.
struct StepAdjoint {
    dx: DVector<f64>,
    du: DVector<f64>,
    d_az: DVector<f64>,
    d_af: DVector<f64>,
    d_ar: DVector<f64>,
}

fn backstep(
    p: &GruParams,
    x: &DVector<f64>,
    g: &GruGates,
    adj: &DVector<f64>,
) -> StepAdjoint {
    let dz = adj.component_mul(&(x - &g.r));
    let dr = adj.zip_map(&g.z, |a, z| a * (1.0 - z));
    let d_ar = dr.zip_map(&g.r, |v, r| v * (1.0 - r * r));
    let d_fx = p.u_r.tr_mul(&d_ar);
    let d_af = d_fx
        .component_mul(x)
        .zip_map(&g.f, |v, f| v * f * (1.0 - f));
    let d_az = dz.zip_map(&g.z, |v, z| v * z * (1.0 - z));
    let dx = adj.component_mul(&g.z)
        + d_fx.component_mul(&g.f)
        + p.u_f.tr_mul(&d_af)
        + p.u_z.tr_mul(&d_az);
    let du = p.w_z.tr_mul(&d_az) + p.w_f.tr_mul(&d_af) + p.w_r.tr_mul(&d_ar);
    StepAdjoint {
        dx,
        du,
        d_az,
        d_af,
        d_ar,
    }
}

fn check_grad_seq(
    tape: &RolloutTape,
    grads: &[DVector<f64>],
    dim: usize,
    context: &'static str,
) -> Result<()> {
    if grads.len() != tape.states.len() {
        return Err(Error::dims(context, tape.states.len(), grads.len()));
    }
    for g in grads {
        if g.len() != dim {
            return Err(Error::dims(context, dim, g.len()));
        }
        if !all_finite_vec(g) {
            return Err(Error::NonFinite(context));
        }
    }
    Ok(())
}

/// Gradient of sum_k cost_k(x_k) with respect to the N free inputs, where
/// `state_grads[k]` is d(cost)/d(x_k). The tail steps propagate adjoints but
/// produce no entries: their input is not a decision variable.
pub fn grad_wrt_inputs(
    p: &GruParams,
    tape: &RolloutTape,
    state_grads: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    check_grad_seq(tape, state_grads, p.n_x(), "state cost gradients")?;
    let t = tape.len();
    let mut input_grads = vec![DVector::zeros(p.n_u()); tape.n_free];
    let mut adj = state_grads[t].clone();
    for k in (0..t).rev() {
        let step = backstep(p, &tape.states[k], &tape.gates[k], &adj);
        if k < tape.n_free {
            input_grads[k] = step.du;
        }
        adj = step.dx + &state_grads[k];
    }
    Ok(input_grads)
}

/// Gradient of sum_k loss_k(y_k) with respect to every weight array, where
/// `output_grads[k]` is d(loss)/d(y_k) at y_k = U_o x_k + b_o. Accumulates
/// across all recorded steps; the result reuses GruParams as a container.
pub fn grad_wrt_weights(
    p: &GruParams,
    tape: &RolloutTape,
    output_grads: &[DVector<f64>],
) -> Result<GruParams> {
    check_grad_seq(tape, output_grads, p.n_y(), "output loss gradients")?;
    let t = tape.len();
    let mut g = p.zeros_like();
    let absorb_output = |g: &mut GruParams, adj: &mut DVector<f64>, k: usize| {
        let og = &output_grads[k];
        g.u_o.ger(1.0, og, &tape.states[k], 1.0);
        g.b_o += og;
        *adj += p.u_o.tr_mul(og);
    };
    let mut adj = DVector::zeros(p.n_x());
    absorb_output(&mut g, &mut adj, t);
    for k in (0..t).rev() {
        let x = &tape.states[k];
        let u = &tape.inputs[k];
        let gates = &tape.gates[k];
        let step = backstep(p, x, gates, &adj);
        let fx = gates.f.component_mul(x);
        g.w_z.ger(1.0, &step.d_az, u, 1.0);
        g.u_z.ger(1.0, &step.d_az, x, 1.0);
        g.b_z += &step.d_az;
        g.w_f.ger(1.0, &step.d_af, u, 1.0);
        g.u_f.ger(1.0, &step.d_af, x, 1.0);
        g.b_f += &step.d_af;
        g.w_r.ger(1.0, &step.d_ar, u, 1.0);
        g.u_r.ger(1.0, &step.d_ar, &fx, 1.0);
        g.b_r += &step.d_ar;
        adj = step.dx;
        absorb_output(&mut g, &mut adj, k);
    }
    Ok(g)
}

/// Jacobians of the one-step state map at (x, u): returns (d x+ / d x,
/// d x+ / d u). Used by Newton-type equilibrium solving.
pub fn gru_jacobians(
    p: &GruParams,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if x.len() != p.n_x() || u.len() != p.n_u() {
        return Err(Error::dims(
            "jacobian point",
            format!("state {} input {}", p.n_x(), p.n_u()),
            format!("state {} input {}", x.len(), u.len()),
        ));
    }
    let g = gates_unchecked(p, x, u);
    let n = p.n_x();
    let dz = DVector::from_fn(n, |i, _| g.z[i] * (1.0 - g.z[i]));
    let df = DVector::from_fn(n, |i, _| g.f[i] * (1.0 - g.f[i]));
    let dr = DVector::from_fn(n, |i, _| 1.0 - g.r[i] * g.r[i]);

    let scale_rows = |v: &DVector<f64>, m: &DMatrix<f64>| -> DMatrix<f64> {
        let mut out = m.clone();
        for i in 0..out.nrows() {
            let s = v[i];
            out.row_mut(i).scale_mut(s);
        }
        out
    };

    // d(f .* x)/dx = diag(f) + diag(x) Df U_f ; /du = diag(x) Df W_f
    let mut dfx_dx = scale_rows(&x.component_mul(&df), &p.u_f);
    for i in 0..n {
        dfx_dx[(i, i)] += g.f[i];
    }
    let dfx_du = scale_rows(&x.component_mul(&df), &p.w_f);

    let dr_dx = scale_rows(&dr, &(&p.u_r * dfx_dx));
    let dr_du = scale_rows(&dr, &(&p.w_r + &p.u_r * dfx_du));

    let x_minus_r = x - &g.r;
    let mut a = scale_rows(&x_minus_r.component_mul(&dz), &p.u_z);
    a += scale_rows(&DVector::from_fn(n, |i, _| 1.0 - g.z[i]), &dr_dx);
    for i in 0..n {
        a[(i, i)] += g.z[i];
    }
    let mut b = scale_rows(&x_minus_r.component_mul(&dz), &p.w_z);
    b += scale_rows(&DVector::from_fn(n, |i, _| 1.0 - g.z[i]), &dr_du);
    Ok((a, b))
}

/// Compares an analytic gradient against central finite differences of the
/// value. `f` returns (value, gradient); the report is the worst relative
/// mismatch over coordinates, with the denominator floored at 1 so that tiny
/// gradients do not inflate the ratio.
pub fn fd_check(
    f: impl Fn(&DVector<f64>) -> (f64, DVector<f64>),
    point: &DVector<f64>,
    step: f64,
) -> f64 {
    assert!(step > 0.0, "finite-difference step must be positive");
    let (_, analytic) = f(point);
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut hi = point.clone();
        hi[i] += step;
        let mut lo = point.clone();
        lo[i] -= step;
        let fd = (f(&hi).0 - f(&lo).0) / (2.0 * step);
        let denom = 1.0f64.max(analytic[i].abs()).max(fd.abs());
        worst = worst.max((analytic[i] - fd).abs() / denom);
    }
    worst
}
