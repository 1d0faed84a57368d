//! Exact steady-state policy evaluation: the ground-truth oracle for both
//! solution paths and for the simulator, plus brute-force enumeration of
//! threshold policies on small instances.
//!
//! The closed-loop chain runs over joint states `(q, s)` where `q` is the
//! post-decision queue length carried into the slot and `s` is the channel
//! state the slot's decision sees. One slot: an arrival lands with
//! probability theta (clipped at the buffer), the policy transmits with
//! probability `f[q_post_arrival][s]` paying `X_s`, and the channel then
//! steps `s -> s'` independently.

use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use rayon::prelude::*;
use thiserror::Error;

use crate::mdp::MixedPolicy;
use crate::model::{
    ChannelModel, EvalResult, JointDistribution, PolicyTable, ProblemConfig, ThresholdPolicy,
};

/// Stationarity residual enforced on every returned distribution.
pub const STATIONARY_RESIDUAL_TOL: f64 = 1e-11;

/// Stationary mass allowed at the full buffer before a policy counts as lossy.
pub const LOSSLESS_TOL: f64 = 1e-9;

/// Enumeration guard: refuse instances with more threshold policies than this.
pub const MAX_ENUMERATION: usize = 100_000;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("closed-loop chain has {0} recurrent classes reachable from the empty queue")]
    ReducibleClosedLoop(usize),
    #[error("instance has {candidates} threshold policies, enumeration cap is {cap}")]
    TooLarge { candidates: usize, cap: usize },
    #[error("no threshold policy or mixture meets the power budget without buffer loss")]
    InfeasibleBudget,
    #[error("exact evaluation failed: {0}")]
    Numerical(String),
}

/// Flattened index of joint state `(q, s)` in the channel-major order
/// `(0,0), (1,0), ..., (K,0), (0,1), ...`.
#[inline]
pub fn joint_index(q: usize, s: usize, buffer_size: usize) -> usize {
    s * (buffer_size + 1) + q
}

/// Row-stochastic transition matrix of the policy-closed system.
#[derive(Debug, Clone)]
pub struct ClosedLoopChain {
    transition: DMatrix<f64>,
    buffer_size: usize,
    n_states: usize,
}

impl ClosedLoopChain {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.transition
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
}

/// Builds the closed-loop chain of `policy` on `model` under arrival rate
/// `theta` and buffer size `buffer_size`.
pub fn policy_transition_matrix(
    model: &ChannelModel,
    policy: &PolicyTable,
    theta: f64,
    buffer_size: usize,
) -> ClosedLoopChain {
    let s_count = model.n_states();
    assert_eq!(policy.n_states(), s_count);
    assert_eq!(policy.buffer_size(), buffer_size);
    let dim = (buffer_size + 1) * s_count;
    let mut t = DMatrix::zeros(dim, dim);

    for s in 0..s_count {
        for q in 0..=buffer_size {
            let row = joint_index(q, s, buffer_size);
            // (post-arrival length, probability); an arrival at q = K is
            // discarded, so both branches land on K there.
            let arrival_branches = [
                ((q + 1).min(buffer_size), theta),
                (q, 1.0 - theta),
            ];
            for (q_tilde, p_arrival) in arrival_branches {
                if p_arrival == 0.0 {
                    continue;
                }
                let f = policy.prob(q_tilde, s);
                let outcomes = [(q_tilde.saturating_sub(1), f), (q_tilde, 1.0 - f)];
                for (q_next, p_decision) in outcomes {
                    let p_queue = p_arrival * p_decision;
                    if p_queue == 0.0 {
                        continue;
                    }
                    for s_next in 0..s_count {
                        let p = p_queue * model.transition_prob(s, s_next);
                        if p > 0.0 {
                            t[(row, joint_index(q_next, s_next, buffer_size))] += p;
                        }
                    }
                }
            }
        }
    }

    ClosedLoopChain {
        transition: t,
        buffer_size,
        n_states: s_count,
    }
}

/// Stationary distribution of the closed-loop chain restricted to the
/// recurrent class reachable from the empty queue.
fn stationary_joint(chain: &ClosedLoopChain) -> Result<JointDistribution, EvalError> {
    let dim = chain.dim();
    let t = &chain.transition;
    let k = chain.buffer_size;

    // Reachable set from (0, s) for every channel state s.
    let mut reachable = vec![false; dim];
    let mut stack: Vec<usize> = (0..chain.n_states)
        .map(|s| joint_index(0, s, k))
        .collect();
    for &n in &stack {
        reachable[n] = true;
    }
    while let Some(u) = stack.pop() {
        for v in 0..dim {
            if t[(u, v)] > 0.0 && !reachable[v] {
                reachable[v] = true;
                stack.push(v);
            }
        }
    }
    let nodes: Vec<usize> = (0..dim).filter(|&n| reachable[n]).collect();

    // Fast path: with a single recurrent class the balance system on the
    // whole reachable set is nonsingular after the normalization row swap
    // (transients solve to zero); the residual gate rejects anything else.
    if let Some(mu) = solve_on(chain, &nodes) {
        return Ok(mu);
    }

    let local: Vec<Option<usize>> = {
        let mut map = vec![None; dim];
        for (i, &n) in nodes.iter().enumerate() {
            map[n] = Some(i);
        }
        map
    };

    // Recurrent classes: strongly connected components with no outgoing edge.
    let mut graph = DiGraph::<(), ()>::new();
    let gnodes: Vec<_> = nodes.iter().map(|_| graph.add_node(())).collect();
    for (i, &u) in nodes.iter().enumerate() {
        for (j, &v) in nodes.iter().enumerate() {
            if t[(u, v)] > 0.0 {
                graph.add_edge(gnodes[i], gnodes[j], ());
            }
        }
    }
    let sccs = tarjan_scc(&graph);
    let mut component = vec![usize::MAX; nodes.len()];
    for (c, scc) in sccs.iter().enumerate() {
        for &node in scc {
            component[node.index()] = c;
        }
    }
    let mut closed: Vec<usize> = Vec::new();
    'scc: for (c, scc) in sccs.iter().enumerate() {
        for &node in scc {
            let u = nodes[node.index()];
            for v in 0..dim {
                if t[(u, v)] > 0.0 && component[local[v].unwrap()] != c {
                    continue 'scc;
                }
            }
        }
        closed.push(c);
    }
    if closed.len() != 1 {
        return Err(EvalError::ReducibleClosedLoop(closed.len()));
    }
    let class: Vec<usize> = sccs[closed[0]].iter().map(|n| nodes[n.index()]).collect();

    solve_on(chain, &class).ok_or_else(|| {
        EvalError::Numerical("stationary solve failed on the recurrent class".into())
    })
}

/// Solves the balance equations restricted to `subset` (one row replaced by
/// the normalization) and verifies stationarity over the whole chain. `None`
/// when the system is singular or the residual gate fails.
fn solve_on(chain: &ClosedLoopChain, subset: &[usize]) -> Option<JointDistribution> {
    let dim = chain.dim();
    let t = &chain.transition;
    let k = chain.buffer_size;
    let nc = subset.len();

    let mut a = DMatrix::zeros(nc, nc);
    for (i, &u) in subset.iter().enumerate() {
        for (j, &v) in subset.iter().enumerate() {
            a[(j, i)] = t[(u, v)] - if u == v { 1.0 } else { 0.0 };
        }
    }
    for j in 0..nc {
        a[(nc - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(nc);
    b[nc - 1] = 1.0;
    let solved = a.lu().solve(&b)?;
    if solved.iter().any(|&m| m < -1e-9) {
        return None;
    }

    let mut mu = vec![vec![0.0; chain.n_states]; k + 1];
    for (i, &node) in subset.iter().enumerate() {
        let q = node % (k + 1);
        let s = node / (k + 1);
        mu[q][s] = solved[i].max(0.0);
    }
    let total: f64 = mu.iter().flatten().sum();
    for row in &mut mu {
        for m in row.iter_mut() {
            *m /= total;
        }
    }

    // Stationarity residual over the full chain.
    let flat: Vec<f64> = (0..dim).map(|n| mu[n % (k + 1)][n / (k + 1)]).collect();
    let mut residual: f64 = 0.0;
    for v in 0..dim {
        let flow: f64 = (0..dim).map(|u| flat[u] * t[(u, v)]).sum();
        residual = residual.max((flow - flat[v]).abs());
    }
    if residual > STATIONARY_RESIDUAL_TOL {
        return None;
    }

    Some(JointDistribution::from_raw(mu))
}

/// Exact long-run averages of `policy`, together with the stationary joint
/// distribution over (post-decision queue length, channel state).
///
/// The per-packet delay uses the delivered throughput: arrivals that find the
/// buffer full are discarded and excluded, so Little's law stays exact even
/// for policies that saturate the buffer. A policy that delivers nothing gets
/// infinite delay.
pub fn exact_evaluate(
    model: &ChannelModel,
    policy: &PolicyTable,
    theta: f64,
    buffer_size: usize,
) -> Result<(EvalResult, JointDistribution), EvalError> {
    let chain = policy_transition_matrix(model, policy, theta, buffer_size);
    let mu = stationary_joint(&chain)?;

    let mut avg_queue = 0.0;
    let mut avg_power = 0.0;
    for q in 0..=buffer_size {
        for s in 0..model.n_states() {
            let m = mu.prob(q, s);
            if m == 0.0 {
                continue;
            }
            avg_queue += q as f64 * m;
            let transmit_rate = theta * policy.prob((q + 1).min(buffer_size), s)
                + (1.0 - theta) * policy.prob(q, s);
            avg_power += m * transmit_rate * model.powers()[s];
        }
    }
    let effective_throughput = theta * (1.0 - mu.mass_at_full());
    let avg_delay = if effective_throughput > 1e-300 {
        avg_queue / effective_throughput
    } else {
        f64::INFINITY
    };

    Ok((
        EvalResult {
            avg_queue,
            avg_delay,
            avg_power,
        },
        mu,
    ))
}

/// Transmission-occupancy values implied by a stationary distribution:
/// `y[q][s]` is the probability that the post-decision queue length is `q`,
/// the channel is `s`, and a packet was just transmitted.
pub fn implied_occupancy(
    mu: &JointDistribution,
    policy: &PolicyTable,
    theta: f64,
) -> Vec<Vec<f64>> {
    let k = mu.buffer_size();
    let s_count = mu.n_states();
    let mut y = vec![vec![0.0; s_count]; k + 1];
    for s in 0..s_count {
        for q in 0..k {
            let q_tilde = q + 1;
            // Probability the post-arrival length is q_tilde with channel s;
            // the top level also collects clipped arrivals at the full buffer.
            let pre_decision = if q_tilde < k {
                mu.prob(q_tilde, s) * (1.0 - theta) + mu.prob(q, s) * theta
            } else {
                mu.prob(k, s) + mu.prob(k - 1, s) * theta
            };
            y[q][s] = pre_decision * policy.prob(q_tilde, s);
        }
        // y[k][s] stays zero: transmitting cannot leave the queue full.
    }
    y
}

/// Exact evaluation of one deterministic threshold policy.
#[derive(Debug, Clone)]
pub struct ThresholdEval {
    pub policy: ThresholdPolicy,
    pub result: EvalResult,
    /// True when stationary mass accumulates at the full buffer, i.e. the
    /// policy drops arrivals in steady state.
    pub lossy: bool,
}

/// Exact evaluation of every deterministic threshold policy, in
/// lexicographic threshold order.
pub fn threshold_table(
    model: &ChannelModel,
    config: &ProblemConfig,
) -> Result<Vec<ThresholdEval>, EvalError> {
    let k = config.buffer_size;
    let s_count = model.n_states();
    let candidates = (k + 1).checked_pow(s_count as u32).unwrap_or(usize::MAX);
    if candidates > MAX_ENUMERATION {
        return Err(EvalError::TooLarge {
            candidates,
            cap: MAX_ENUMERATION,
        });
    }

    let all: Vec<ThresholdPolicy> = threshold_policies(k, s_count);
    all.par_iter()
        .map(|policy| {
            let table = policy.to_table(k);
            let (result, mu) = exact_evaluate(model, &table, config.arrival_rate, k)?;
            Ok(ThresholdEval {
                policy: policy.clone(),
                result,
                lossy: mu.mass_at_full() > LOSSLESS_TOL,
            })
        })
        .collect()
}

fn threshold_policies(buffer_size: usize, n_states: usize) -> Vec<ThresholdPolicy> {
    let mut out = Vec::new();
    let mut current = vec![1usize; n_states];
    loop {
        out.push(ThresholdPolicy::new(current.clone(), buffer_size).unwrap());
        let mut pos = n_states;
        loop {
            if pos == 0 {
                return out;
            }
            pos -= 1;
            if current[pos] < buffer_size + 1 {
                current[pos] += 1;
                for later in current.iter_mut().skip(pos + 1) {
                    *later = 1;
                }
                break;
            }
        }
    }
}

/// Bisects the mixing weight of `pi_hi` (budget-feasible side) against
/// `pi_lo` until the mixture's exact average power meets `budget` within
/// `power_tol`, assuming power decreases as the weight grows. Returns the
/// weight together with the mixture's evaluation.
pub(crate) fn mix_to_budget(
    model: &ChannelModel,
    hi: &PolicyTable,
    lo: &PolicyTable,
    theta: f64,
    buffer_size: usize,
    budget: f64,
    power_tol: f64,
) -> Result<(f64, EvalResult, JointDistribution), EvalError> {
    let eval_at = |lambda: f64| -> Result<(EvalResult, JointDistribution), EvalError> {
        let mixed = PolicyTable::mix(hi, lo, lambda);
        exact_evaluate(model, &mixed, theta, buffer_size)
    };

    let (res_hi, mu_hi) = eval_at(1.0)?;
    if (res_hi.avg_power - budget).abs() <= power_tol {
        return Ok((1.0, res_hi, mu_hi));
    }
    let (mut lo_end, mut hi_end) = (0.0f64, 1.0f64);
    let mut best = (1.0, res_hi, mu_hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo_end + hi_end);
        let (res, mu) = eval_at(mid)?;
        let within = (res.avg_power - budget).abs() <= power_tol;
        let feasible_side = res.avg_power <= budget;
        if feasible_side {
            hi_end = mid;
        } else {
            lo_end = mid;
        }
        if feasible_side || within {
            best = (mid, res, mu);
        }
        if within || hi_end - lo_end < 1e-16 {
            break;
        }
    }
    Ok(best)
}

/// Brute-force oracle: enumerates all `(K+1)^S` threshold policies (plus the
/// never-transmit encoding), mixes every budget-straddling pair to the power
/// budget, and returns the minimum-delay mixture that is loss-free and within
/// budget.
///
/// `lambda_grid` controls the coarse scan used to bracket the budget crossing
/// before bisection refines it.
pub fn enumerate_thresholds(
    model: &ChannelModel,
    config: &ProblemConfig,
    lambda_grid: usize,
) -> Result<(f64, MixedPolicy), EvalError> {
    let table = threshold_table(model, config)?;
    let k = config.buffer_size;
    let theta = config.arrival_rate;
    let budget = config.power_budget;
    let power_tol = config.bisection_tolerance;
    let grid = lambda_grid.max(1);

    type Best = Option<(f64, f64, MixedPolicy)>; // (delay, power, mixture)
    fn better(a: Best, b: Best) -> Best {
        match (a, b) {
            (None, b) => b,
            (a, None) => a,
            (Some(x), Some(y)) => {
                // Delay first, then lower power, then lexicographic policies.
                let key = |c: &(f64, f64, MixedPolicy)| {
                    (
                        c.0,
                        c.1,
                        c.2.pi1.thresholds().to_vec(),
                        c.2.pi2.thresholds().to_vec(),
                    )
                };
                if key(&x) <= key(&y) {
                    Some(x)
                } else {
                    Some(y)
                }
            }
        }
    }

    let single_best: Best = table
        .iter()
        .filter(|e| !e.lossy && e.result.avg_power <= budget + power_tol)
        .map(|e| {
            (
                e.result.avg_delay,
                e.result.avg_power,
                MixedPolicy::pure(e.policy.clone()),
            )
        })
        .fold(None, |acc, c| better(acc, Some(c)));

    let feasible: Vec<&ThresholdEval> = table
        .iter()
        .filter(|e| e.result.avg_power <= budget)
        .collect();
    let infeasible: Vec<&ThresholdEval> = table
        .iter()
        .filter(|e| e.result.avg_power > budget)
        .collect();

    let pair_best: Best = feasible
        .par_iter()
        .map(|a| {
            let mut local: Best = None;
            let table_a = a.policy.to_table(k);
            for b in &infeasible {
                let table_b = b.policy.to_table(k);
                // Coarse scan from the infeasible end for the first bracket.
                let mut bracket = None;
                let mut prev = (0.0, b.result.avg_power);
                for i in 1..=grid {
                    let lambda = i as f64 / grid as f64;
                    let power = if i == grid {
                        a.result.avg_power
                    } else {
                        let mixed = PolicyTable::mix(&table_a, &table_b, lambda);
                        match exact_evaluate(model, &mixed, theta, k) {
                            Ok((res, _)) => res.avg_power,
                            Err(_) => continue,
                        }
                    };
                    if prev.1 > budget && power <= budget {
                        bracket = Some((prev.0, lambda));
                        break;
                    }
                    prev = (lambda, power);
                }
                let Some((lo_l, hi_l)) = bracket else { continue };

                // Bisect inside the bracket to the budget.
                let mut lo_end = lo_l;
                let mut hi_end = hi_l;
                let mut candidate: Option<(f64, EvalResult, JointDistribution)> = None;
                for _ in 0..200 {
                    let mid = 0.5 * (lo_end + hi_end);
                    let mixed = PolicyTable::mix(&table_a, &table_b, mid);
                    let Ok((res, mu)) = exact_evaluate(model, &mixed, theta, k) else {
                        break;
                    };
                    let within = (res.avg_power - budget).abs() <= power_tol;
                    let feasible_side = res.avg_power <= budget;
                    if feasible_side {
                        hi_end = mid;
                    } else {
                        lo_end = mid;
                    }
                    if feasible_side || within {
                        candidate = Some((mid, res, mu));
                    }
                    if within || hi_end - lo_end < 1e-16 {
                        break;
                    }
                }
                if let Some((lambda, res, mu)) = candidate {
                    if mu.mass_at_full() <= LOSSLESS_TOL && res.avg_power <= budget + power_tol {
                        local = better(
                            local,
                            Some((
                                res.avg_delay,
                                res.avg_power,
                                MixedPolicy::new(a.policy.clone(), b.policy.clone(), lambda),
                            )),
                        );
                    }
                }
            }
            local
        })
        .reduce(|| None, better);

    match better(single_best, pair_best) {
        Some((delay, _, mixture)) => Ok((delay, mixture)),
        None => Err(EvalError::InfeasibleBudget),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov;
    use crate::model::ChannelModel;

    fn single_state_model() -> ChannelModel {
        ChannelModel::new(vec![vec![1.0]], vec![1.0]).unwrap()
    }

    #[test]
    fn two_state_chain_hand_walk() {
        // S=1, K=1, theta=0.5, always transmit: both rows land on queue 0.
        let model = single_state_model();
        let policy = ThresholdPolicy::always_transmit(1).to_table(1);
        let chain = policy_transition_matrix(&model, &policy, 0.5, 1);
        let m = chain.matrix();
        assert!((m[(0, 0)] - 1.0).abs() < 1e-15);
        assert!(m[(0, 1)].abs() < 1e-15);
        assert!((m[(1, 0)] - 1.0).abs() < 1e-15);
        assert!(m[(1, 1)].abs() < 1e-15);
    }

    #[test]
    fn rows_are_stochastic() {
        let model = ChannelModel::new(
            vec![
                vec![0.5, 0.3, 0.2],
                vec![0.3, 0.4, 0.3],
                vec![0.2, 0.3, 0.5],
            ],
            vec![4.5, 1.5, 0.5],
        )
        .unwrap();
        let policy = ThresholdPolicy::new(vec![3, 2, 1], 4).unwrap().to_table(4);
        let chain = policy_transition_matrix(&model, &policy, 0.6, 4);
        for r in 0..chain.dim() {
            let sum: f64 = (0..chain.dim()).map(|c| chain.matrix()[(r, c)]).sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
        }
    }

    #[test]
    fn always_transmit_keeps_queue_empty() {
        let model = single_state_model();
        let policy = ThresholdPolicy::always_transmit(1).to_table(3);
        let (res, mu) = exact_evaluate(&model, &policy, 0.5, 3).unwrap();
        assert!(res.avg_queue.abs() < 1e-12);
        assert!(res.avg_delay.abs() < 1e-12);
        assert!((res.avg_power - 0.5).abs() < 1e-12);
        assert!((mu.prob(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn never_transmit_saturates_buffer() {
        let model = single_state_model();
        let policy = ThresholdPolicy::never_transmit(1, 3).to_table(3);
        let (res, mu) = exact_evaluate(&model, &policy, 0.5, 3).unwrap();
        assert!((res.avg_queue - 3.0).abs() < 1e-12);
        assert!(res.avg_power.abs() < 1e-15);
        assert!(res.avg_delay.is_infinite());
        assert!((mu.mass_at_full() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_state_reduces_to_birth_death() {
        // Threshold 2 on S=1 gives the scalar birth-death chain: post-decision
        // queue alternates between 0 and 1.
        let model = single_state_model();
        let policy = ThresholdPolicy::new(vec![2], 3).unwrap().to_table(3);
        let theta = 0.4;
        let (res, mu) = exact_evaluate(&model, &policy, theta, 3).unwrap();
        // From 0: arrival -> 1 (below threshold, hold). From 1: arrival -> 2,
        // transmit -> 1; no arrival -> 1, transmit... walk the 2-state chain:
        // states {0, 1}, p(0->1) = theta, p(1->0) = (1-theta) * 1 (no arrival,
        // queue 1 >= 2? no!). Threshold 2: transmit only when post-arrival >= 2.
        // From 1 with arrival: post-arrival 2, transmit -> 1. Without: stays 1
        // and no transmit (1 < 2). So state 1 is absorbing: mu = (0, 1).
        assert!((mu.prob(1, 0) - 1.0).abs() < 1e-12);
        assert!((res.avg_queue - 1.0).abs() < 1e-12);
        // Power: transmissions happen on arrivals only: theta * X.
        assert!((res.avg_power - theta).abs() < 1e-12);
        // Delivered throughput is theta (no mass at K=3): delay = 1/theta.
        assert!((res.avg_delay - 1.0 / theta).abs() < 1e-12);
    }

    #[test]
    fn conservation_and_occupancy_identity() {
        let model = ChannelModel::new(
            vec![vec![0.7, 0.3], vec![0.4, 0.6]],
            vec![2.0, 1.0],
        )
        .unwrap();
        let theta = 0.45;
        let k = 4;
        let policy = ThresholdPolicy::new(vec![3, 1], k).unwrap().to_table(k);
        let (res, mu) = exact_evaluate(&model, &policy, theta, k).unwrap();

        // Departure rate equals delivered throughput.
        let mut departures = 0.0;
        for q in 0..=k {
            for s in 0..2 {
                let rate = theta * policy.prob((q + 1).min(k), s)
                    + (1.0 - theta) * policy.prob(q, s);
                departures += mu.prob(q, s) * rate;
            }
        }
        let effective = theta * (1.0 - mu.mass_at_full());
        assert!((departures - effective).abs() < 1e-10);

        // Occupancy identity: sum_s y[q][s] = theta * sum_s mu[q][s] for all
        // q when the policy is loss-free.
        assert!(mu.mass_at_full() < LOSSLESS_TOL);
        let y = implied_occupancy(&mu, &policy, theta);
        for q in 0..=k {
            let ys: f64 = y[q].iter().sum();
            let ms: f64 = mu.rows()[q].iter().sum();
            assert!((ys - theta * ms).abs() < 1e-10, "level {q}");
        }

        // Power recomputed from the occupancy matches.
        let power_from_y: f64 = (0..=k)
            .map(|q| {
                (0..2)
                    .map(|s| y[q][s] * model.powers()[s])
                    .sum::<f64>()
            })
            .sum();
        assert!((power_from_y - res.avg_power).abs() < 1e-10);

        // Channel marginals match the stationary channel distribution.
        let rho = markov::stationary_distribution(model.transition()).unwrap();
        for (m, r) in mu.channel_marginals().iter().zip(rho.probabilities()) {
            assert!((m - r).abs() < 1e-9);
        }
    }

    #[test]
    fn occupancy_identity_holds_below_top_level_when_lossy() {
        // One never-transmit state makes the buffer fill with positive
        // probability; the identity still holds strictly below the top.
        let model = ChannelModel::new(
            vec![vec![0.8, 0.2], vec![0.3, 0.7]],
            vec![3.0, 1.0],
        )
        .unwrap();
        let theta = 0.5;
        let k = 3;
        let policy = ThresholdPolicy::new(vec![k + 1, 1], k).unwrap().to_table(k);
        let (_, mu) = exact_evaluate(&model, &policy, theta, k).unwrap();
        assert!(mu.mass_at_full() > LOSSLESS_TOL);
        let y = implied_occupancy(&mu, &policy, theta);
        for q in 0..k {
            let ys: f64 = y[q].iter().sum();
            let ms: f64 = mu.rows()[q].iter().sum();
            assert!((ys - theta * ms).abs() < 1e-10, "level {q}");
        }
    }

    #[test]
    fn enumerate_single_state() {
        let model = single_state_model();
        let config = ProblemConfig::new(0.5, 3, 0.5).unwrap();
        let (best_delay, best) = enumerate_thresholds(&model, &config, 8).unwrap();
        assert!(best_delay.abs() < 1e-9);
        assert_eq!(best.pi1.thresholds(), &[1]);
    }

    #[test]
    fn enumerate_rejects_starved_budget() {
        // Full throughput costs theta * X = 0.5; a budget of 0.4 cannot work.
        let model = single_state_model();
        let config = ProblemConfig::new(0.5, 3, 0.4).unwrap();
        assert_eq!(
            enumerate_thresholds(&model, &config, 8).unwrap_err(),
            EvalError::InfeasibleBudget
        );
    }

    #[test]
    fn enumerate_size_guard() {
        let model = ChannelModel::new(
            vec![
                vec![0.5, 0.3, 0.2],
                vec![0.3, 0.4, 0.3],
                vec![0.2, 0.3, 0.5],
            ],
            vec![4.5, 1.5, 0.5],
        )
        .unwrap();
        let config = ProblemConfig::new(0.6, 63, 1.0).unwrap();
        assert!(matches!(
            enumerate_thresholds(&model, &config, 4).unwrap_err(),
            EvalError::TooLarge { .. }
        ));
    }
}
