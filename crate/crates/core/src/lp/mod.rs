//! The occupancy-measure route to the optimal policy.
//!
//! The decision variables are the transmission occupancies `y[q][s]`: the
//! steady-state probability that the post-decision queue length is `q`, the
//! channel is `s`, and a packet was just transmitted. The joint distribution
//! is a linear image `mu = G Y` of those occupancies, recovered from the
//! steady-state tail balance
//!
//! ```text
//! sum_s P[s][s'] (theta mu[q][s] + T_q[s] - y[q][s]) = T_q[s'],
//! T_q[s] = sum_{i > q} mu[i][s],
//! ```
//!
//! which solves level by level from the top of the buffer down when `P^T` is
//! invertible. The delay LP minimizes `sum q y[q][s] / theta^2` subject to
//! the power budget, throughput, channel-marginal, and probability-coupling
//! rows, and the optimal randomized policy falls out of the ratio
//! `y / (pre-decision mass)`.

pub mod simplex;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::eval::joint_index;
use crate::markov;
use crate::model::{ChannelModel, JointDistribution, PolicyTable, ProblemConfig};
pub use simplex::SimplexStatus as LpStatus;
use simplex::{Constraint, LinearProgram, SimplexStatus};

#[derive(Debug, Error, PartialEq)]
pub enum LpError {
    #[error("transition matrix transpose is singular; occupancy map is not determined")]
    SingularTransition,
    #[error("LP infeasible (remaining violation {infeasibility:.3e})")]
    Infeasible { infeasibility: f64 },
    #[error("LP unbounded; all variables should be boxed, so inputs are inconsistent")]
    Unbounded,
    #[error("LP solve failed numerically: {0}")]
    Numerical(String),
}

/// Linear map from transmission occupancies to the joint distribution,
/// `mu = G Y`, in the channel-major flattening `(0,0), ..., (K,0), (0,1), ...`.
#[derive(Debug, Clone)]
pub struct MuMap {
    g: DMatrix<f64>,
    buffer_size: usize,
    n_states: usize,
}

impl MuMap {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn buffer_size(&self) -> usize {
        self.buffer_size
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn dim(&self) -> usize {
        (self.buffer_size + 1) * self.n_states
    }

    /// Applies the map to a flattened occupancy vector.
    pub fn apply(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.g * y
    }

    fn row(&self, q: usize, s: usize) -> Vec<f64> {
        let r = joint_index(q, s, self.buffer_size);
        (0..self.dim()).map(|c| self.g[(r, c)]).collect()
    }
}

/// Builds the occupancy-to-distribution map for `model` at arrival rate
/// `theta` and buffer size `buffer_size`.
///
/// When `P^T` is well conditioned the map comes from the level recursion
/// `theta mu_q = (P^-T - I) T_q + y_q` descending from `T_K = 0`. Otherwise a
/// stacked least-squares system over all balance and level-sum equations is
/// tried, and rank deficiency is reported as [`LpError::SingularTransition`].
pub fn build_mu_map(
    model: &ChannelModel,
    theta: f64,
    buffer_size: usize,
) -> Result<MuMap, LpError> {
    let s_count = model.n_states();
    let k = buffer_size;
    let dim = (k + 1) * s_count;

    let pt = DMatrix::from_fn(s_count, s_count, |i, j| model.transition_prob(j, i));
    let inverse = pt.clone().try_inverse().filter(|inv| {
        let norm_a = infinity_norm(&pt);
        let norm_inv = infinity_norm(inv);
        norm_a * norm_inv < 1e12
    });

    let g = match inverse {
        Some(inv) => {
            // Column for the unit occupancy at (q0, s0): run the recursion.
            let m_minus_i = &inv - DMatrix::<f64>::identity(s_count, s_count);
            let mut g = DMatrix::zeros(dim, dim);
            for s0 in 0..s_count {
                for q0 in 0..=k {
                    let col = joint_index(q0, s0, k);
                    let mut tail = DVector::zeros(s_count);
                    for q in (0..=k).rev() {
                        let mut mu_q = &m_minus_i * &tail;
                        if q == q0 {
                            mu_q[s0] += 1.0;
                        }
                        mu_q /= theta;
                        for s in 0..s_count {
                            g[(joint_index(q, s, k), col)] = mu_q[s];
                        }
                        tail += mu_q;
                    }
                }
            }
            g
        }
        None => build_mu_map_least_squares(model, theta, k)?,
    };

    Ok(MuMap {
        g,
        buffer_size: k,
        n_states: s_count,
    })
}

fn infinity_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Fallback for a singular `P^T`: stack every tail-balance equation with the
/// per-level sum identity `theta sum_s mu[q][s] = sum_s y[q][s]` and solve the
/// whole system at once by SVD, rejecting if the unknowns stay underdetermined.
fn build_mu_map_least_squares(
    model: &ChannelModel,
    theta: f64,
    k: usize,
) -> Result<DMatrix<f64>, LpError> {
    let s_count = model.n_states();
    let dim = (k + 1) * s_count;
    let rows = dim + (k + 1);

    let mut a = DMatrix::zeros(rows, dim);
    let mut rhs = DMatrix::zeros(rows, dim);
    let mut r = 0;
    for q in 0..=k {
        for s_to in 0..s_count {
            for s in 0..s_count {
                let p = model.transition_prob(s, s_to);
                // theta mu[q][s] and the tail sum_{i>q} mu[i][s].
                a[(r, joint_index(q, s, k))] += p * theta;
                for i in q + 1..=k {
                    a[(r, joint_index(i, s, k))] += p;
                }
                rhs[(r, joint_index(q, s, k))] += p;
            }
            for i in q + 1..=k {
                a[(r, joint_index(i, s_to, k))] -= 1.0;
            }
            r += 1;
        }
    }
    for q in 0..=k {
        for s in 0..s_count {
            a[(r, joint_index(q, s, k))] = theta;
            rhs[(r, joint_index(q, s, k))] = 1.0;
        }
        r += 1;
    }

    let svd = a.svd(true, true);
    let sigma_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let eps = 1e-10 * sigma_max.max(1.0);
    if svd.rank(eps) < dim {
        return Err(LpError::SingularTransition);
    }
    svd.solve(&rhs, eps)
        .map_err(|e| LpError::Numerical(e.to_string()))
}

/// Assembled delay LP, ready for [`solve_lp`].
#[derive(Debug, Clone)]
pub struct LpProblem {
    lp: LinearProgram,
    gmap: MuMap,
    theta: f64,
    buffer_size: usize,
    n_states: usize,
    powers: Vec<f64>,
}

impl LpProblem {
    pub fn n_variables(&self) -> usize {
        self.lp.minimize.len()
    }

    pub fn n_rows(&self) -> usize {
        self.lp.constraints.len()
    }
}

/// Builds the delay-minimization LP over the occupancies.
pub fn assemble_lp(
    model: &ChannelModel,
    config: &ProblemConfig,
    gmap: &MuMap,
) -> LpProblem {
    let k = config.buffer_size;
    let s_count = model.n_states();
    assert_eq!(gmap.buffer_size(), k);
    assert_eq!(gmap.n_states(), s_count);
    let theta = config.arrival_rate;
    let dim = (k + 1) * s_count;
    let rho = markov::stationary_distribution(model.transition())
        .expect("validated model is ergodic");

    let mut minimize = vec![0.0; dim];
    for s in 0..s_count {
        for q in 0..=k {
            minimize[joint_index(q, s, k)] = q as f64 / (theta * theta);
        }
    }

    let mut constraints = Vec::with_capacity(2 + s_count + 2 * dim);

    // Average power within budget.
    let mut power = vec![0.0; dim];
    for s in 0..s_count {
        for q in 0..=k {
            power[joint_index(q, s, k)] = model.powers()[s];
        }
    }
    constraints.push(Constraint::le(power, config.power_budget));

    // Full throughput: total transmission mass equals the arrival rate.
    constraints.push(Constraint::eq(vec![1.0; dim], theta));

    // Channel marginals of mu = G Y match the stationary channel distribution.
    for s in 0..s_count {
        let mut coeffs = vec![0.0; dim];
        for q in 0..=k {
            for (c, g) in coeffs.iter_mut().zip(gmap.row(q, s)) {
                *c += g;
            }
        }
        constraints.push(Constraint::eq(coeffs, rho.probabilities()[s]));
    }

    // Transmit probabilities stay within [0, 1]: the occupancy cannot exceed
    // the pre-decision mass (1-theta) mu[q+1][s] + theta mu[q][s], with the
    // top level bounded by theta mu[K][s].
    for s in 0..s_count {
        for q in 0..=k {
            let mut coeffs = vec![0.0; dim];
            if q < k {
                for (c, g) in coeffs.iter_mut().zip(gmap.row(q + 1, s)) {
                    *c -= (1.0 - theta) * g;
                }
            }
            for (c, g) in coeffs.iter_mut().zip(gmap.row(q, s)) {
                *c -= theta * g;
            }
            coeffs[joint_index(q, s, k)] += 1.0;
            constraints.push(Constraint::le(coeffs, 0.0));
        }
    }

    // Every joint probability stays within [0, 1].
    for s in 0..s_count {
        for q in 0..=k {
            constraints.push(Constraint::range(gmap.row(q, s), 0.0, 1.0));
        }
    }

    LpProblem {
        lp: LinearProgram {
            minimize,
            constraints,
            bounds: vec![(0.0, f64::INFINITY); dim],
        },
        gmap: gmap.clone(),
        theta,
        buffer_size: k,
        n_states: s_count,
        powers: model.powers().to_vec(),
    }
}

/// Optimal occupancies with the induced distribution and metrics.
#[derive(Debug, Clone)]
pub struct LpSolution {
    /// Occupancy values `y[q][s]`.
    pub y: Vec<Vec<f64>>,
    /// Joint distribution `G Y`, clamped of floating-point dust.
    pub mu: JointDistribution,
    /// Optimal per-packet delay in slots.
    pub objective_delay: f64,
    /// Average queue length (the delay scaled by the arrival rate).
    pub avg_queue: f64,
    /// `sum X_s y[q][s]`, the energy per slot actually used.
    pub achieved_power: f64,
    pub status: LpStatus,
}

/// Solves an assembled delay LP to a certified vertex optimum.
pub fn solve_lp(problem: &LpProblem, tol: f64) -> Result<LpSolution, LpError> {
    let sol = simplex::solve(&problem.lp, tol)
        .map_err(|e| LpError::Numerical(e.to_string()))?;
    match sol.status {
        SimplexStatus::Infeasible => {
            return Err(LpError::Infeasible {
                infeasibility: sol.infeasibility,
            })
        }
        SimplexStatus::Unbounded => return Err(LpError::Unbounded),
        SimplexStatus::Optimal => {}
    }
    if sol.max_primal_violation > 10.0 * tol || sol.max_dual_violation > 10.0 * tol {
        return Err(LpError::Numerical(format!(
            "optimality certificate failed: primal {:.3e}, dual {:.3e}",
            sol.max_primal_violation, sol.max_dual_violation
        )));
    }

    let k = problem.buffer_size;
    let s_count = problem.n_states;
    let theta = problem.theta;
    let y_flat = DVector::from_vec(sol.x.clone());
    let mu_flat = problem.gmap.apply(&y_flat);

    let mut mu = vec![vec![0.0; s_count]; k + 1];
    for s in 0..s_count {
        for q in 0..=k {
            let v = mu_flat[joint_index(q, s, k)];
            if v < -tol.max(1e-9) {
                return Err(LpError::Numerical(format!(
                    "mu[{q}][{s}] = {v:.3e} is negative beyond tolerance"
                )));
            }
            mu[q][s] = v.max(0.0);
        }
    }

    let mut y = vec![vec![0.0; s_count]; k + 1];
    let mut avg_queue = 0.0;
    let mut achieved_power = 0.0;
    for s in 0..s_count {
        for q in 0..=k {
            let v = sol.x[joint_index(q, s, k)].max(0.0);
            y[q][s] = v;
            avg_queue += q as f64 * v / theta;
            achieved_power += problem.powers[s] * v;
        }
    }
    let objective_delay = avg_queue / theta;

    Ok(LpSolution {
        y,
        mu: JointDistribution::from_raw(mu),
        objective_delay,
        avg_queue,
        achieved_power,
        status: LpStatus::Optimal,
    })
}

/// Convenience pipeline: map, assembly, and solve in one call.
pub fn solve_delay_lp(model: &ChannelModel, config: &ProblemConfig) -> Result<LpSolution, LpError> {
    let gmap = build_mu_map(model, config.arrival_rate, config.buffer_size)?;
    let problem = assemble_lp(model, config, &gmap);
    solve_lp(&problem, config.lp_tolerance)
}

/// Recovers the randomized policy from an optimal LP solution.
///
/// On the support of the solution the transmit probability is the ratio of
/// the occupancy to the pre-decision mass. States the solution never visits
/// get a threshold extrapolation: transmit at or above the highest reachable
/// transmitting level, idle below it.
pub fn extract_policy(sol: &LpSolution, theta: f64, lp_tolerance: f64) -> PolicyTable {
    let k = sol.mu.buffer_size();
    let s_count = sol.mu.n_states();
    let mut rows = vec![vec![0.0; s_count]; k + 1];

    for s in 0..s_count {
        let mut reachable: Vec<Option<f64>> = vec![None; k + 1];
        for q_tilde in 1..=k {
            let denom =
                (1.0 - theta) * sol.mu.prob(q_tilde, s) + theta * sol.mu.prob(q_tilde - 1, s);
            if denom > lp_tolerance {
                let f = (sol.y[q_tilde - 1][s] / denom).clamp(0.0, 1.0);
                reachable[q_tilde] = Some(f);
            }
        }
        let max_transmit_level = (1..=k)
            .filter(|&q| matches!(reachable[q], Some(f) if f > 0.5))
            .max();
        for q_tilde in 1..=k {
            rows[q_tilde][s] = match reachable[q_tilde] {
                Some(f) => f,
                None => match max_transmit_level {
                    Some(level) if q_tilde >= level => 1.0,
                    _ => 0.0,
                },
            };
        }
    }

    PolicyTable::new(rows).expect("extracted probabilities are clamped to [0, 1]")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval;
    use crate::model::ThresholdPolicy;

    fn paper_model() -> ChannelModel {
        ChannelModel::new(
            vec![
                vec![0.5, 0.3, 0.2],
                vec![0.3, 0.4, 0.3],
                vec![0.2, 0.3, 0.5],
            ],
            vec![4.5, 1.5, 0.5],
        )
        .unwrap()
    }

    fn paper_config(budget: f64) -> ProblemConfig {
        ProblemConfig::new(0.6, 11, budget).unwrap()
    }

    #[test]
    fn single_state_map_is_scaled_identity() {
        let model = ChannelModel::new(vec![vec![1.0]], vec![1.0]).unwrap();
        let theta = 0.4;
        let gmap = build_mu_map(&model, theta, 3).unwrap();
        for r in 0..gmap.dim() {
            for c in 0..gmap.dim() {
                let expected = if r == c { 1.0 / theta } else { 0.0 };
                assert!((gmap.matrix()[(r, c)] - expected).abs() < 1e-12);
            }
        }
        // Linearity: the zero occupancy maps to the zero vector.
        let zero = DVector::zeros(gmap.dim());
        assert!(gmap.apply(&zero).amax() < 1e-15);
    }

    #[test]
    fn map_reproduces_exact_distribution() {
        let model = ChannelModel::new(
            vec![vec![0.7, 0.3], vec![0.4, 0.6]],
            vec![2.0, 1.0],
        )
        .unwrap();
        let theta = 0.45;
        let k = 4;
        let gmap = build_mu_map(&model, theta, k).unwrap();
        // Thresholds capped at K keep the buffer loss-free, the regime where
        // the balance equations determine mu exactly.
        for t0 in 1..=k {
            for t1 in 1..=k {
                let policy = ThresholdPolicy::new(vec![t0, t1], k).unwrap().to_table(k);
                let (_, mu) = eval::exact_evaluate(&model, &policy, theta, k).unwrap();
                let y = eval::implied_occupancy(&mu, &policy, theta);
                let y_flat = DVector::from_fn(gmap.dim(), |i, _| {
                    y[i % (k + 1)][i / (k + 1)]
                });
                let mu_mapped = gmap.apply(&y_flat);
                for s in 0..2 {
                    for q in 0..=k {
                        let got = mu_mapped[joint_index(q, s, k)];
                        let want = mu.prob(q, s);
                        assert!(
                            (got - want).abs() < 1e-9,
                            "thresholds ({t0},{t1}), state ({q},{s}): {got} vs {want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn map_reproduces_paper_instance_always_transmit() {
        let model = paper_model();
        let theta = 0.6;
        let k = 11;
        let gmap = build_mu_map(&model, theta, k).unwrap();
        let policy = ThresholdPolicy::always_transmit(3).to_table(k);
        let (_, mu) = eval::exact_evaluate(&model, &policy, theta, k).unwrap();
        let y = eval::implied_occupancy(&mu, &policy, theta);
        let y_flat = DVector::from_fn(gmap.dim(), |i, _| y[i % (k + 1)][i / (k + 1)]);
        let mu_mapped = gmap.apply(&y_flat);
        for s in 0..3 {
            for q in 0..=k {
                assert!((mu_mapped[joint_index(q, s, k)] - mu.prob(q, s)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn iid_channel_is_rejected_as_singular() {
        // Equal rows make P^T singular, and the left kernel of a stochastic
        // matrix always sums to zero, so the level sums cannot repair it.
        let model = ChannelModel::new(
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            vec![2.0, 1.0],
        )
        .unwrap();
        assert_eq!(
            build_mu_map(&model, 0.5, 2).unwrap_err(),
            LpError::SingularTransition
        );
    }

    #[test]
    fn row_template_for_smallest_instance() {
        let model = ChannelModel::new(vec![vec![1.0]], vec![1.0]).unwrap();
        let config = ProblemConfig::new(0.5, 1, 0.5).unwrap();
        let gmap = build_mu_map(&model, 0.5, 1).unwrap();
        let problem = assemble_lp(&model, &config, &gmap);
        assert_eq!(problem.n_variables(), 2);
        // power + mass + channel + 2 coupling + 2 state boxes.
        assert_eq!(problem.n_rows(), 7);
    }

    #[test]
    fn always_transmit_optimum_on_single_state() {
        let model = ChannelModel::new(vec![vec![1.0]], vec![1.0]).unwrap();
        let config = ProblemConfig::new(0.5, 3, 0.5).unwrap();
        let sol = solve_delay_lp(&model, &config).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!(sol.objective_delay.abs() < 1e-9);
        assert!((sol.y[0][0] - 0.5).abs() < 1e-9);
        let rest: f64 = sol.y.iter().skip(1).flatten().sum();
        assert!(rest.abs() < 1e-9);
        assert!((sol.achieved_power - 0.5).abs() < 1e-9);
    }

    #[test]
    fn throughput_needs_power() {
        // Delivering theta = 0.5 per slot costs at least theta X = 0.5.
        let model = ChannelModel::new(vec![vec![1.0]], vec![1.0]).unwrap();
        let config = ProblemConfig::new(0.5, 3, 0.4).unwrap();
        assert!(matches!(
            solve_delay_lp(&model, &config).unwrap_err(),
            LpError::Infeasible { .. }
        ));
    }

    #[test]
    fn slack_budget_matches_unconstrained_optimum() {
        let model = paper_model();
        let config = paper_config(100.0);
        let sol = solve_delay_lp(&model, &config).unwrap();
        let always = ThresholdPolicy::always_transmit(3).to_table(11);
        let (res, _) = eval::exact_evaluate(&model, &always, 0.6, 11).unwrap();
        assert!((sol.objective_delay - res.avg_delay).abs() < 1e-8);
    }

    #[test]
    fn paper_instance_round_trip() {
        let model = paper_model();
        let config = paper_config(1.3);
        let sol = solve_delay_lp(&model, &config).unwrap();
        assert!(sol.achieved_power <= 1.3 + 1e-8);
        let policy = extract_policy(&sol, 0.6, config.lp_tolerance);
        let (res, _) = eval::exact_evaluate(&model, &policy, 0.6, 11).unwrap();
        assert!(
            (res.avg_delay - sol.objective_delay).abs() < 1e-8,
            "exact {} vs LP {}",
            res.avg_delay,
            sol.objective_delay
        );
        assert!(res.avg_power <= 1.3 + 1e-8);
    }

    #[test]
    fn tight_budget_policy_is_near_deterministic() {
        // At most one fractional transmit probability per channel state.
        let model = paper_model();
        let config = paper_config(0.8);
        let sol = solve_delay_lp(&model, &config).unwrap();
        let policy = extract_policy(&sol, 0.6, config.lp_tolerance);
        for s in 0..3 {
            let fractional = (1..=11)
                .filter(|&q| {
                    let f = policy.prob(q, s);
                    f > 1e-6 && f < 1.0 - 1e-6
                })
                .count();
            assert!(fractional <= 1, "state {s} has {fractional} fractional rows");
        }
    }

    #[test]
    fn tradeoff_is_monotone_on_a_coarse_grid() {
        let model = paper_model();
        let mut last = f64::INFINITY;
        for budget in [0.8, 1.0, 1.2] {
            let sol = solve_delay_lp(&model, &paper_config(budget)).unwrap();
            assert!(sol.objective_delay <= last + 1e-9);
            last = sol.objective_delay;
        }
    }
}
