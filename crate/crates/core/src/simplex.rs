//! Dense two-phase simplex for the small linear programs that observer
//! tuning generates. Problems have a few dozen variables at most, so a plain
//! tableau with Bland's anti-cycling rule is both adequate and auditable.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Optimal point and objective of a solved linear program.
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
}

const EPS: f64 = 1e-9;
const MAX_PIVOTS: usize = 50_000;

struct Tableau {
    a: DMatrix<f64>,
    rhs: DVector<f64>,
    cost: DVector<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn pivot(&mut self, r: usize, c: usize) {
        let piv = self.a[(r, c)];
        let mut row = self.a.row(r).into_owned() / piv;
        row[c] = 1.0; // kill the rounding residue on the pivot itself
        self.rhs[r] /= piv;
        self.a.set_row(r, &row.row(0));
        for i in 0..self.a.nrows() {
            if i == r {
                continue;
            }
            let factor = self.a[(i, c)];
            if factor != 0.0 {
                let updated = self.a.row(i).into_owned() - factor * &row;
                self.a.set_row(i, &updated.row(0));
                self.a[(i, c)] = 0.0;
                self.rhs[i] -= factor * self.rhs[r];
                if self.rhs[i].abs() < 1e-13 {
                    self.rhs[i] = 0.0;
                }
            }
        }
        let factor = self.cost[c];
        if factor != 0.0 {
            for j in 0..self.cost.len() {
                self.cost[j] -= factor * row[(0, j)];
            }
            self.cost[c] = 0.0;
        }
        self.basis[r] = c;
    }

    /// Bland's rule: enter the lowest-index improving column, leave by the
    /// lowest-index basic row among minimal ratios. Columns at index
    /// `allowed_cols` and beyond never enter.
    fn run(&mut self, allowed_cols: usize) -> Result<()> {
        for _ in 0..MAX_PIVOTS {
            let entering = (0..allowed_cols).find(|&j| self.cost[j] < -EPS);
            let Some(c) = entering else {
                return Ok(());
            };
            let mut best: Option<(usize, f64)> = None;
            for i in 0..self.a.nrows() {
                let coeff = self.a[(i, c)];
                if coeff > EPS {
                    let ratio = self.rhs[i] / coeff;
                    let better = match best {
                        None => true,
                        Some((bi, br)) => {
                            ratio < br - 1e-12
                                || (ratio < br + 1e-12 && self.basis[i] < self.basis[bi])
                        }
                    };
                    if better {
                        best = Some((i, ratio));
                    }
                }
            }
            let Some((r, _)) = best else {
                return Err(Error::LpUnbounded);
            };
            self.pivot(r, c);
        }
        Err(Error::LpStalled(MAX_PIVOTS))
    }
}

/// Minimises `c . x` over `{ x >= 0 : a x <= b }`. `a` is dense with one row
/// per constraint; equality constraints are expressed as paired inequalities
/// by the caller.
pub fn solve_lp(c: &[f64], a: &DMatrix<f64>, b: &[f64]) -> Result<LpSolution> {
    let n = c.len();
    let m = a.nrows();
    if a.ncols() != n || b.len() != m {
        return Err(Error::dims(
            "linear program",
            format!("{m}x{n} constraints with {m} bounds"),
            format!("{}x{} with {}", a.nrows(), a.ncols(), b.len()),
        ));
    }
    if !c.iter().all(|v| v.is_finite())
        || !a.iter().all(|v| v.is_finite())
        || !b.iter().all(|v| v.is_finite())
    {
        return Err(Error::NonFinite("linear program data"));
    }

    // Rows with negative bounds are negated so the right-hand side starts
    // non-negative; those rows get -1 slacks and need artificial variables.
    let flipped: Vec<bool> = b.iter().map(|&v| v < 0.0).collect();
    let n_art = flipped.iter().filter(|&&f| f).count();
    let ncols = n + m + n_art;
    let mut tab = DMatrix::zeros(m, ncols);
    let mut rhs = DVector::zeros(m);
    let mut basis = vec![0usize; m];
    let mut art = n + m;
    for i in 0..m {
        let sign = if flipped[i] { -1.0 } else { 1.0 };
        for j in 0..n {
            tab[(i, j)] = sign * a[(i, j)];
        }
        tab[(i, n + i)] = sign;
        rhs[i] = sign * b[i];
        if flipped[i] {
            tab[(i, art)] = 1.0;
            basis[i] = art;
            art += 1;
        } else {
            basis[i] = n + i;
        }
    }

    let mut t = Tableau {
        a: tab,
        rhs,
        cost: DVector::zeros(ncols),
        basis,
    };

    if n_art > 0 {
        // Phase 1: minimise the sum of artificials, whose basic columns are
        // priced out by subtracting their rows from the cost.
        for j in n + m..ncols {
            t.cost[j] = 1.0;
        }
        for i in 0..m {
            if t.basis[i] >= n + m {
                for j in 0..ncols {
                    t.cost[j] -= t.a[(i, j)];
                }
            }
        }
        t.run(ncols)?;
        let infeasibility: f64 = (0..m)
            .filter(|&i| t.basis[i] >= n + m)
            .map(|i| t.rhs[i])
            .sum();
        if infeasibility > 1e-7 {
            return Err(Error::LpInfeasible);
        }
        // Degenerate artificials still in the basis sit at zero; swap them
        // for any structural column so phase 2 never moves them.
        for r in 0..m {
            if t.basis[r] >= n + m {
                if let Some(j) = (0..n + m).find(|&j| t.a[(r, j)].abs() > EPS) {
                    t.pivot(r, j);
                }
            }
        }
    }

    t.cost.fill(0.0);
    for j in 0..n {
        t.cost[j] = c[j];
    }
    for i in 0..m {
        let cb = t.cost[t.basis[i]];
        if cb != 0.0 {
            let row = t.a.row(i).into_owned();
            for j in 0..ncols {
                t.cost[j] -= cb * row[(0, j)];
            }
            t.cost[t.basis[i]] = 0.0;
        }
    }
    t.run(n + m)?;

    let mut x = vec![0.0; n];
    for i in 0..m {
        if t.basis[i] < n {
            x[t.basis[i]] = t.rhs[i];
        }
    }
    let objective = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();
    Ok(LpSolution { x, objective })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    #[test]
    fn two_variable_vertex_optimum() {
        // max 3x + 2y s.t. x + y <= 4, x <= 2 has the vertex (2, 2).
        let sol = solve_lp(
            &[-3.0, -2.0],
            &mat(2, 2, &[1.0, 1.0, 1.0, 0.0]),
            &[4.0, 2.0],
        )
        .unwrap();
        assert_relative_eq!(sol.x[0], 2.0, epsilon = 1e-9);
        assert_relative_eq!(sol.x[1], 2.0, epsilon = 1e-9);
        assert_relative_eq!(sol.objective, -10.0, epsilon = 1e-9);
    }

    #[test]
    fn paired_inequalities_force_equality() {
        // x <= 2 and -x <= -2 pin x = 2 through a phase-1 start.
        let sol = solve_lp(&[1.0], &mat(2, 1, &[1.0, -1.0]), &[2.0, -2.0]).unwrap();
        assert_relative_eq!(sol.x[0], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        // x <= 1 and x >= 2 cannot both hold.
        let err = solve_lp(&[1.0], &mat(2, 1, &[1.0, -1.0]), &[1.0, -2.0]).unwrap_err();
        assert!(matches!(err, Error::LpInfeasible));
    }

    #[test]
    fn open_descent_direction_is_unbounded() {
        let err = solve_lp(&[-1.0], &mat(1, 1, &[-1.0]), &[0.0]).unwrap_err();
        assert!(matches!(err, Error::LpUnbounded));
    }

    #[test]
    fn zero_constraint_problem_minimises_at_origin() {
        let sol = solve_lp(&[2.0, 1.0], &DMatrix::zeros(0, 2), &[]).unwrap();
        assert_eq!(sol.x, vec![0.0, 0.0]);
        assert_eq!(sol.objective, 0.0);
    }

    #[test]
    fn degenerate_vertex_terminates() {
        // Three constraints meet at (1, 0); ties in the ratio test exercise
        // the Bland tie-break.
        let sol = solve_lp(
            &[-1.0, -1.0],
            &mat(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]),
            &[1.0, 1.0, 1.0],
        )
        .unwrap();
        assert_relative_eq!(sol.objective, -1.0, epsilon = 1e-9);
    }

    #[test]
    fn beale_cycling_instance_terminates() {
        // Classic cycling example for the most-negative rule; Bland must
        // finish it.
        let a = mat(
            3,
            4,
            &[
                0.25, -60.0, -0.04, 9.0, //
                0.5, -90.0, -0.02, 3.0, //
                0.0, 0.0, 1.0, 0.0,
            ],
        );
        let sol = solve_lp(&[-0.75, 150.0, -0.02, 6.0], &a, &[0.0, 0.0, 1.0]).unwrap();
        assert_relative_eq!(sol.objective, -0.05, epsilon = 1e-9);
    }

    #[test]
    fn rejects_mismatched_dimensions() {
        assert!(solve_lp(&[1.0], &mat(1, 2, &[1.0, 1.0]), &[1.0]).is_err());
        assert!(solve_lp(&[1.0], &mat(1, 1, &[1.0]), &[f64::NAN]).is_err());
    }

    #[test]
    fn absolute_value_fit_via_split_variables() {
        // min |g - 3| encoded as g+ - g- with e >= +-(g - 3):
        // variables (gp, gm, e), min e s.t. gp - gm - e <= 3, -gp + gm - e <= -3.
        let sol = solve_lp(
            &[0.0, 0.0, 1.0],
            &mat(2, 3, &[1.0, -1.0, -1.0, -1.0, 1.0, -1.0]),
            &[3.0, -3.0],
        )
        .unwrap();
        assert_relative_eq!(sol.objective, 0.0, epsilon = 1e-9);
        assert_relative_eq!(sol.x[0] - sol.x[1], 3.0, epsilon = 1e-9);
    }
}
