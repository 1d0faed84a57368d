//! Dense bounded-variable primal simplex.
//!
//! Solves `min c^T x` subject to row ranges `L <= A x <= U` and variable
//! bounds `l <= x <= u`, where any bound may be infinite and `L = U` pins an
//! equality. Each row gets a slack (`A x - w = 0`, `L <= w <= U`) and a
//! two-phase primal simplex runs with the slacks as the starting basis:
//! phase 1 prices the out-of-bounds basics with unit costs and drives the
//! total violation to zero, phase 2 prices the true objective. The basis is
//! refactorized from scratch every iteration, which is exact enough and fast
//! enough at the dense desk scales this crate targets.
//!
//! Vertex solutions matter to callers (they keep extracted policies a mixture
//! of at most two deterministic ones), so an interior-point method is not a
//! drop-in replacement here.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimplexError {
    #[error("simplex failed numerically: {0}")]
    Numerical(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimplexStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

/// One row range `lo <= coeffs . x <= hi`.
#[derive(Debug, Clone)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
}

impl Constraint {
    pub fn le(coeffs: Vec<f64>, hi: f64) -> Self {
        Self {
            coeffs,
            lo: f64::NEG_INFINITY,
            hi,
        }
    }

    pub fn ge(coeffs: Vec<f64>, lo: f64) -> Self {
        Self {
            coeffs,
            lo,
            hi: f64::INFINITY,
        }
    }

    pub fn eq(coeffs: Vec<f64>, value: f64) -> Self {
        Self {
            coeffs,
            lo: value,
            hi: value,
        }
    }

    pub fn range(coeffs: Vec<f64>, lo: f64, hi: f64) -> Self {
        Self { coeffs, lo, hi }
    }
}

#[derive(Debug, Clone)]
pub struct LinearProgram {
    /// Objective coefficients (minimized).
    pub minimize: Vec<f64>,
    pub constraints: Vec<Constraint>,
    /// Per-variable `(lower, upper)` bounds.
    pub bounds: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct SimplexSolution {
    pub status: SimplexStatus,
    /// Structural variable values (valid when `Optimal`).
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Largest bound/row violation of the returned point.
    pub max_primal_violation: f64,
    /// Largest reduced-cost sign violation at the returned basis.
    pub max_dual_violation: f64,
    /// Remaining total violation when `Infeasible`.
    pub infeasibility: f64,
    /// Phase-1 dual vector certifying infeasibility, when `Infeasible`.
    pub farkas: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum VarState {
    Basic(usize),
    AtLower,
    AtUpper,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum HitBound {
    Lower,
    Upper,
}

struct Workspace {
    n: usize,
    m: usize,
    columns: Vec<DVector<f64>>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    cost: Vec<f64>,
    basis: Vec<usize>,
    state: Vec<VarState>,
    x: Vec<f64>,
}

const PIVOT_TOL: f64 = 1e-10;
const STEP_TOL: f64 = 1e-12;

pub fn solve(lp: &LinearProgram, tol: f64) -> Result<SimplexSolution, SimplexError> {
    let n = lp.minimize.len();
    let m = lp.constraints.len();
    for c in &lp.constraints {
        assert_eq!(c.coeffs.len(), n, "constraint width mismatch");
        assert!(c.lo <= c.hi, "empty row range");
    }
    assert_eq!(lp.bounds.len(), n, "bounds length mismatch");

    let total = n + m;
    let mut columns = Vec::with_capacity(total);
    for j in 0..n {
        columns.push(DVector::from_fn(m, |i, _| lp.constraints[i].coeffs[j]));
    }
    for i in 0..m {
        let mut col = DVector::zeros(m);
        col[i] = -1.0;
        columns.push(col);
    }
    let mut lo = Vec::with_capacity(total);
    let mut hi = Vec::with_capacity(total);
    for &(l, h) in &lp.bounds {
        assert!(l <= h, "empty variable bound");
        assert!(
            l.is_finite() || h.is_finite(),
            "free variables are not supported"
        );
        lo.push(l);
        hi.push(h);
    }
    for c in &lp.constraints {
        lo.push(c.lo);
        hi.push(c.hi);
    }
    let mut cost = vec![0.0; total];
    cost[..n].copy_from_slice(&lp.minimize);

    let mut state = Vec::with_capacity(total);
    let mut x = vec![0.0; total];
    for j in 0..n {
        if lo[j].is_finite() {
            state.push(VarState::AtLower);
            x[j] = lo[j];
        } else {
            state.push(VarState::AtUpper);
            x[j] = hi[j];
        }
    }
    let mut basis = Vec::with_capacity(m);
    for i in 0..m {
        state.push(VarState::Basic(i));
        basis.push(n + i);
    }

    let mut ws = Workspace {
        n,
        m,
        columns,
        lo,
        hi,
        cost,
        basis,
        state,
        x,
    };
    run(&mut ws, tol)
}

fn run(ws: &mut Workspace, tol: f64) -> Result<SimplexSolution, SimplexError> {
    let m = ws.m;
    let total = ws.n + m;
    let max_iterations = 10_000 + 200 * total;
    let mut iterations = 0;
    let mut degenerate_streak = 0usize;
    let mut bland = false;

    loop {
        iterations += 1;
        if iterations > max_iterations {
            return Err(SimplexError::Numerical(format!(
                "iteration cap {max_iterations} reached"
            )));
        }

        // Refactor the basis and recompute the basic values exactly.
        let basis_matrix = DMatrix::from_fn(m, m, |i, k| ws.columns[ws.basis[k]][i]);
        let lu = basis_matrix.clone().lu();
        let lu_t = basis_matrix.transpose().lu();

        let mut rhs = DVector::zeros(m);
        for j in 0..total {
            if matches!(ws.state[j], VarState::Basic(_)) || ws.x[j] == 0.0 {
                continue;
            }
            rhs.axpy(-ws.x[j], &ws.columns[j], 1.0);
        }
        let xb = lu.solve(&rhs).ok_or_else(|| {
            SimplexError::Numerical("singular basis matrix".into())
        })?;
        for k in 0..m {
            ws.x[ws.basis[k]] = xb[k];
        }

        // Phase selection: any basic outside its bounds beyond tol?
        let mut infeasibility = 0.0f64;
        let mut d = DVector::zeros(m);
        for k in 0..m {
            let v = ws.basis[k];
            if ws.x[v] < ws.lo[v] - tol {
                infeasibility += ws.lo[v] - ws.x[v];
                d[k] = -1.0;
            } else if ws.x[v] > ws.hi[v] + tol {
                infeasibility += ws.x[v] - ws.hi[v];
                d[k] = 1.0;
            }
        }
        let phase1 = infeasibility > tol;
        if !phase1 {
            for k in 0..m {
                d[k] = ws.cost[ws.basis[k]];
            }
        }
        let y = lu_t.solve(&d).ok_or_else(|| {
            SimplexError::Numerical("singular transposed basis".into())
        })?;

        // Pricing: pick the entering variable.
        let mut entering: Option<(usize, f64, f64)> = None; // (var, |r|, direction)
        for j in 0..total {
            let s = ws.state[j];
            if matches!(s, VarState::Basic(_)) || ws.lo[j] == ws.hi[j] {
                continue;
            }
            let base_cost = if phase1 { 0.0 } else { ws.cost[j] };
            let r = base_cost - y.dot(&ws.columns[j]);
            let candidate = match s {
                VarState::AtLower if r < -tol => Some((j, -r, 1.0)),
                VarState::AtUpper if r > tol => Some((j, r, -1.0)),
                _ => None,
            };
            if let Some(c) = candidate {
                if bland {
                    entering = Some(c);
                    break;
                }
                match entering {
                    Some((_, best, _)) if best >= c.1 => {}
                    _ => entering = Some(c),
                }
            }
        }

        let Some((enter, _, direction)) = entering else {
            if phase1 {
                return Ok(SimplexSolution {
                    status: SimplexStatus::Infeasible,
                    x: ws.x[..ws.n].to_vec(),
                    objective: f64::NAN,
                    iterations,
                    max_primal_violation: infeasibility,
                    max_dual_violation: 0.0,
                    infeasibility,
                    farkas: Some(y.iter().copied().collect()),
                });
            }
            return Ok(finish(ws, iterations));
        };

        // Direction through the basis: basic k moves by -direction * w[k] per
        // unit step of the entering variable.
        let w = lu.solve(&ws.columns[enter]).ok_or_else(|| {
            SimplexError::Numerical("singular basis in ratio test".into())
        })?;

        let mut best_t = f64::INFINITY;
        let mut leaving: Option<(usize, HitBound, f64)> = None; // (basis pos, bound, |w|)
        for k in 0..m {
            if w[k].abs() <= PIVOT_TOL {
                continue;
            }
            let v = ws.basis[k];
            let xv = ws.x[v];
            let delta = -direction * w[k];
            let candidate: Option<(f64, HitBound)> = if phase1 {
                if xv < ws.lo[v] - tol {
                    // Infeasible below: blocks only when rising to its bound.
                    (delta > 0.0).then(|| ((ws.lo[v] - xv) / delta, HitBound::Lower))
                } else if xv > ws.hi[v] + tol {
                    (delta < 0.0).then(|| ((ws.hi[v] - xv) / delta, HitBound::Upper))
                } else if delta > 0.0 && ws.hi[v].is_finite() {
                    Some(((ws.hi[v] - xv) / delta, HitBound::Upper))
                } else if delta < 0.0 && ws.lo[v].is_finite() {
                    Some(((ws.lo[v] - xv) / delta, HitBound::Lower))
                } else {
                    None
                }
            } else if delta > 0.0 && ws.hi[v].is_finite() {
                Some(((ws.hi[v] - xv) / delta, HitBound::Upper))
            } else if delta < 0.0 && ws.lo[v].is_finite() {
                Some(((ws.lo[v] - xv) / delta, HitBound::Lower))
            } else {
                None
            };
            if let Some((t_raw, bound)) = candidate {
                let t = t_raw.max(0.0);
                let wk = w[k].abs();
                // Near-ties resolved toward the larger pivot (stability), then
                // the smaller basis position (determinism).
                let take = match leaving {
                    None => true,
                    Some((pos, _, best_w)) => {
                        t < best_t - STEP_TOL
                            || (t <= best_t + STEP_TOL
                                && (wk > best_w + STEP_TOL
                                    || ((wk - best_w).abs() <= STEP_TOL && k < pos)))
                    }
                };
                if take {
                    best_t = best_t.min(t);
                    leaving = Some((k, bound, wk));
                }
            }
        }

        // The entering variable's own opposite bound can block first.
        let span = ws.hi[enter] - ws.lo[enter];
        let flip = span.is_finite() && span < best_t;
        if flip {
            best_t = span;
        }

        if best_t.is_infinite() {
            if phase1 {
                return Err(SimplexError::Numerical(
                    "unbounded phase-1 direction".into(),
                ));
            }
            return Ok(SimplexSolution {
                status: SimplexStatus::Unbounded,
                x: ws.x[..ws.n].to_vec(),
                objective: f64::NEG_INFINITY,
                iterations,
                max_primal_violation: 0.0,
                max_dual_violation: 0.0,
                infeasibility: 0.0,
                farkas: None,
            });
        }

        if best_t <= STEP_TOL {
            degenerate_streak += 1;
            if degenerate_streak > 2 * total {
                bland = true;
            }
        } else {
            degenerate_streak = 0;
            bland = false;
        }

        // Apply the step.
        let new_value = ws.x[enter] + direction * best_t;
        if flip {
            ws.state[enter] = match ws.state[enter] {
                VarState::AtLower => VarState::AtUpper,
                VarState::AtUpper => VarState::AtLower,
                VarState::Basic(_) => unreachable!(),
            };
            ws.x[enter] = new_value;
            continue;
        }
        let (pos, bound, _) = leaving.expect("bounded step without a leaving variable");
        let out = ws.basis[pos];
        ws.state[out] = match bound {
            HitBound::Lower => VarState::AtLower,
            HitBound::Upper => VarState::AtUpper,
        };
        ws.x[out] = match bound {
            HitBound::Lower => ws.lo[out],
            HitBound::Upper => ws.hi[out],
        };
        ws.basis[pos] = enter;
        ws.state[enter] = VarState::Basic(pos);
        ws.x[enter] = new_value;
    }
}

/// Final KKT bookkeeping for an optimal basis.
fn finish(ws: &Workspace, iterations: usize) -> SimplexSolution {
    let m = ws.m;
    let total = ws.n + m;

    let mut max_primal = 0.0f64;
    for j in 0..total {
        max_primal = max_primal
            .max(ws.lo[j] - ws.x[j])
            .max(ws.x[j] - ws.hi[j]);
    }

    let basis_matrix = DMatrix::from_fn(m, m, |i, k| ws.columns[ws.basis[k]][i]);
    let d = DVector::from_fn(m, |k, _| ws.cost[ws.basis[k]]);
    let mut max_dual = 0.0f64;
    if let Some(y) = basis_matrix.transpose().lu().solve(&d) {
        for j in 0..total {
            if matches!(ws.state[j], VarState::Basic(_)) || ws.lo[j] == ws.hi[j] {
                continue;
            }
            let r = ws.cost[j] - y.dot(&ws.columns[j]);
            match ws.state[j] {
                VarState::AtLower => max_dual = max_dual.max(-r),
                VarState::AtUpper => max_dual = max_dual.max(r),
                VarState::Basic(_) => {}
            }
        }
    }

    let objective = (0..ws.n).map(|j| ws.cost[j] * ws.x[j]).sum();
    SimplexSolution {
        status: SimplexStatus::Optimal,
        x: ws.x[..ws.n].to_vec(),
        objective,
        iterations,
        max_primal_violation: max_primal.max(0.0),
        max_dual_violation: max_dual.max(0.0),
        infeasibility: 0.0,
        farkas: None,
    }
}
