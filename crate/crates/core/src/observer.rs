//! Luenberger-style state observer for the GRU model: the output innovation
//! enters the update- and forget-gate pre-activations, and the gains are
//! tuned by convex decomposition so the estimation error provably contracts.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gru::{apply_gates, gate_bounds, GruGates, GruParams, InvariantBox};
use crate::math::{all_finite_mat, all_finite_vec, induced_inf_norm, sigmoid_vec, tanh_vec};
use crate::simplex::solve_lp;

/// Innovation gains. L_z feeds the output error into the update gate,
/// L_f into the forget gate; both are n_x by n_y.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverGains {
    pub l_z: DMatrix<f64>,
    pub l_f: DMatrix<f64>,
}

impl ObserverGains {
    pub fn new(l_z: DMatrix<f64>, l_f: DMatrix<f64>) -> Result<Self> {
        if l_z.shape() != l_f.shape() {
            return Err(Error::dims(
                "observer gains",
                format!("{}x{}", l_z.nrows(), l_z.ncols()),
                format!("{}x{}", l_f.nrows(), l_f.ncols()),
            ));
        }
        if !all_finite_mat(&l_z) || !all_finite_mat(&l_f) {
            return Err(Error::NonFinite("observer gains"));
        }
        Ok(ObserverGains { l_z, l_f })
    }

    pub fn zeros(n_x: usize, n_y: usize) -> Self {
        ObserverGains {
            l_z: DMatrix::zeros(n_x, n_y),
            l_f: DMatrix::zeros(n_x, n_y),
        }
    }

    pub fn validate_for(&self, p: &GruParams) -> Result<()> {
        if self.l_z.shape() != (p.n_x(), p.n_y()) {
            return Err(Error::dims(
                "observer gains",
                format!("{}x{}", p.n_x(), p.n_y()),
                format!("{}x{}", self.l_z.nrows(), self.l_z.ncols()),
            ));
        }
        Ok(())
    }
}

/// One observer update. The measured output corrects the two sigmoid gates
/// through the innovation y - (U_o x_hat + b_o); the candidate state is
/// untouched so the contraction analysis of the plant carries over.
pub fn observer_step(
    p: &GruParams,
    g: &ObserverGains,
    x_hat: &DVector<f64>,
    u: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    g.validate_for(p)?;
    if x_hat.len() != p.n_x() {
        return Err(Error::dims("estimate vector", p.n_x(), x_hat.len()));
    }
    if u.len() != p.n_u() {
        return Err(Error::dims("input vector", p.n_u(), u.len()));
    }
    if y.len() != p.n_y() {
        return Err(Error::dims("measurement vector", p.n_y(), y.len()));
    }
    if !all_finite_vec(x_hat) || !all_finite_vec(u) || !all_finite_vec(y) {
        return Err(Error::NonFinite("observer inputs"));
    }
    Ok(observer_step_unchecked(p, g, x_hat, u, y))
}

pub(crate) fn observer_step_unchecked(
    p: &GruParams,
    g: &ObserverGains,
    x_hat: &DVector<f64>,
    u: &DVector<f64>,
    y: &DVector<f64>,
) -> DVector<f64> {
    let innovation = y - (&p.u_o * x_hat + &p.b_o);
    let z = sigmoid_vec(&(&p.w_z * u + &p.u_z * x_hat + &p.b_z + &g.l_z * &innovation));
    let f = sigmoid_vec(&(&p.w_f * u + &p.u_f * x_hat + &p.b_f + &g.l_f * &innovation));
    let r = tanh_vec(&(&p.w_r * u + &p.u_r * f.component_mul(x_hat) + &p.b_r));
    apply_gates(x_hat, &GruGates { z, f, r })
}

/// One-step Lipschitz factor of the estimation-error map as a function of the
/// update-gate value z. The innovation feedback replaces the plant's U_f and
/// U_z couplings by U_f - L_f U_o and U_z - L_z U_o; everything else matches
/// `kappa_x`, so zero gains recover it identically.
pub fn kappa_o(p: &GruParams, g: &ObserverGains, bx: &InvariantBox, z: f64) -> Result<f64> {
    g.validate_for(p)?;
    if !z.is_finite() || !(0.0..=1.0).contains(&z) {
        return Err(Error::InvalidArgument(format!(
            "gate value must lie in [0, 1], got {z}"
        )));
    }
    let gb = gate_bounds(p, bx);
    let s = bx.radius();
    let a = induced_inf_norm(&(&p.u_f - &g.l_f * &p.u_o));
    let b = induced_inf_norm(&(&p.u_z - &g.l_z * &p.u_o));
    let n_ur = induced_inf_norm(&p.u_r);
    Ok(z + (1.0 - z) * (0.25 * s * a + gb.sigma_f) * n_ur + 0.25 * (gb.phi_r + s) * b)
}

/// Endpoint evaluation of `kappa_o` over the attainable gate interval.
/// Affinity in z puts the maximum at an end, so two evaluations decide
/// certification. Returns the rate when it is below one.
pub fn certify_observer(p: &GruParams, g: &ObserverGains, bx: &InvariantBox) -> Option<f64> {
    let (upper, lower) = observer_endpoints(p, g, bx).ok()?;
    let lambda = upper.max(lower);
    (lambda < 1.0).then_some(lambda)
}

/// kappa_o at z = sigma_z and z = 1 - sigma_z, in that order.
pub fn observer_endpoints(
    p: &GruParams,
    g: &ObserverGains,
    bx: &InvariantBox,
) -> Result<(f64, f64)> {
    let gb = gate_bounds(p, bx);
    Ok((
        kappa_o(p, g, bx, gb.sigma_z)?,
        kappa_o(p, g, bx, 1.0 - gb.sigma_z)?,
    ))
}

/// Tuned gains plus the contraction rate they certify.
#[derive(Debug, Clone)]
pub struct ObserverDesign {
    pub gains: ObserverGains,
    pub lambda: f64,
    /// kappa_o at z = sigma_z.
    pub kappa_upper: f64,
    /// kappa_o at z = 1 - sigma_z.
    pub kappa_lower: f64,
}

/// Minimises the worst-case error contraction rate over all gain pairs.
///
/// Both endpoint values of kappa_o are strictly increasing in the two norms
/// ||U_f - L_f U_o|| and ||U_z - L_z U_o||, and each norm is a max of per-row
/// l1 norms in which row i depends only on row i of its gain. Minimising each
/// row's l1 residual independently therefore minimises both norms at once,
/// and that componentwise minimum is the exact optimum of the coupled
/// problem. Fails when even the optimum cannot push the rate below one.
pub fn tune_observer(p: &GruParams, bx: &InvariantBox) -> Result<ObserverDesign> {
    let n_x = p.n_x();
    let rows: Vec<(DVector<f64>, DVector<f64>)> = (0..n_x)
        .into_par_iter()
        .map(|i| {
            let lf = l1_row_fit(&p.u_f.row(i).transpose(), &p.u_o)?;
            let lz = l1_row_fit(&p.u_z.row(i).transpose(), &p.u_o)?;
            Ok((lf, lz))
        })
        .collect::<Result<_>>()?;
    let mut l_f = DMatrix::zeros(n_x, p.n_y());
    let mut l_z = DMatrix::zeros(n_x, p.n_y());
    for (i, (lf, lz)) in rows.iter().enumerate() {
        l_f.set_row(i, &lf.transpose());
        l_z.set_row(i, &lz.transpose());
    }
    let gains = ObserverGains { l_z, l_f };
    let (kappa_upper, kappa_lower) = observer_endpoints(p, &gains, bx)?;
    let lambda = kappa_upper.max(kappa_lower);
    if lambda >= 1.0 {
        return Err(Error::ObserverInfeasible { best: lambda });
    }
    Ok(ObserverDesign {
        gains,
        lambda,
        kappa_upper,
        kappa_lower,
    })
}

/// Minimises || target_row - gain_row * U_o ||_1 over gain_row.
///
/// Encoded as a linear program with split gains g = gp - gm and one
/// absolute-value variable per state column: minimise sum(e) subject to
/// +-((gp - gm) U_o - target)_j <= e_j with all variables non-negative.
pub fn l1_row_fit(target_row: &DVector<f64>, u_o: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n_x = target_row.len();
    let n_y = u_o.nrows();
    if u_o.ncols() != n_x {
        return Err(Error::dims(
            "l1 row fit",
            format!("output map with {n_x} columns"),
            u_o.ncols(),
        ));
    }
    // Variables: gp (n_y), gm (n_y), e (n_x).
    let nv = 2 * n_y + n_x;
    let mut a = DMatrix::zeros(2 * n_x, nv);
    let mut b = vec![0.0; 2 * n_x];
    for j in 0..n_x {
        for k in 0..n_y {
            a[(2 * j, k)] = u_o[(k, j)];
            a[(2 * j, n_y + k)] = -u_o[(k, j)];
            a[(2 * j + 1, k)] = -u_o[(k, j)];
            a[(2 * j + 1, n_y + k)] = u_o[(k, j)];
        }
        a[(2 * j, 2 * n_y + j)] = -1.0;
        a[(2 * j + 1, 2 * n_y + j)] = -1.0;
        b[2 * j] = target_row[j];
        b[2 * j + 1] = -target_row[j];
    }
    let mut c = vec![0.0; nv];
    for j in 0..n_x {
        c[2 * n_y + j] = 1.0;
    }
    let sol = solve_lp(&c, &a, &b)?;
    Ok(DVector::from_fn(n_y, |k, _| sol.x[k] - sol.x[n_y + k]))
}

/// On-disk observer design: gains as row-major nested arrays plus the rate.
#[derive(Serialize, Deserialize)]
struct DesignFile {
    #[serde(rename = "L_z")]
    l_z: Vec<Vec<f64>>,
    #[serde(rename = "L_f")]
    l_f: Vec<Vec<f64>>,
    lambda_o: f64,
}

impl ObserverDesign {
    pub fn to_json(&self) -> String {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows())
                .map(|i| m.row(i).iter().copied().collect())
                .collect()
        };
        serde_json::to_string_pretty(&DesignFile {
            l_z: rows(&self.gains.l_z),
            l_f: rows(&self.gains.l_f),
            lambda_o: self.lambda,
        })
        .expect("observer design serialises to JSON")
    }

    /// Reads gains from JSON and re-derives the endpoint values against the
    /// given model, so a stale lambda_o in the file cannot smuggle in an
    /// uncertified design.
    pub fn from_json(text: &str, p: &GruParams, bx: &InvariantBox) -> Result<Self> {
        let file: DesignFile = serde_json::from_str(text)?;
        let to_mat = |rows: &[Vec<f64>], name: &'static str| -> Result<DMatrix<f64>> {
            let nrows = rows.len();
            let ncols = rows.first().map_or(0, |r| r.len());
            if nrows != p.n_x() || rows.iter().any(|r| r.len() != ncols) || ncols != p.n_y() {
                return Err(Error::dims(
                    "observer design file",
                    format!("{name} as {}x{}", p.n_x(), p.n_y()),
                    format!("{nrows} rows"),
                ));
            }
            Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
        };
        let gains = ObserverGains::new(to_mat(&file.l_z, "L_z")?, to_mat(&file.l_f, "L_f")?)?;
        let (kappa_upper, kappa_lower) = observer_endpoints(p, &gains, bx)?;
        let lambda = kappa_upper.max(kappa_lower);
        if (lambda - file.lambda_o).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "observer design file claims lambda_o = {}, recomputed {lambda:.9}",
                file.lambda_o
            )));
        }
        Ok(ObserverDesign {
            gains,
            lambda,
            kappa_upper,
            kappa_lower,
        })
    }

    pub fn save_json(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load_json(
        path: impl AsRef<std::path::Path>,
        p: &GruParams,
        bx: &InvariantBox,
    ) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, p, bx)
    }
}
