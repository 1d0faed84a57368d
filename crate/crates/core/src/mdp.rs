//! The Lagrangian route to the optimal policy.
//!
//! The power constraint folds into the per-slot cost with a multiplier
//! `eta >= 0`; the unconstrained discounted problem is solved by value
//! iteration on the post-arrival state `(q, s)` with actions idle/transmit
//! and cost `(q - a) + eta (X_s a - budget)`. The optimal deterministic
//! policy is a per-state queue threshold, the multiplier is calibrated by
//! bisection on the exact average power of the extracted thresholds, and the
//! two bracketing policies are mixed per slot to meet the budget exactly.
//!
//! The constant `-eta * budget` term does not affect minimizing actions and
//! is dropped inside the iteration to keep values small.
//!
//! Boundary treatment: a buffer that silently discards arrivals at the cap
//! acts as a free relief valve, which demonstrably destroys the monotone
//! structure near the top (idling can beat transmitting at the cap while
//! transmitting wins below it). The iteration instead continues the value
//! function past the cap with the exact asymptotic marginal packet cost
//! `1/(1 - alpha)`, the solution of the tail equation `d = 1 + alpha P d`.
//! This keeps the operator a contraction, preserves the threshold structure,
//! and leaves realized policies untouched: extraction only reads levels
//! within the buffer, and every policy is evaluated on the true discarding
//! chain.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::eval::{self, EvalError, LOSSLESS_TOL};
use crate::model::{
    ChannelModel, EvalResult, JointDistribution, PolicyTable, ProblemConfig, ThresholdPolicy,
};

/// Hard cap on value-iteration sweeps.
pub const MAX_SWEEPS: usize = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum MdpError {
    #[error("value iteration did not converge within {0} sweeps")]
    NoConvergence(usize),
    #[error("threshold structure violated: {0}")]
    StructureViolation(String),
    #[error("no threshold policy or mixture meets the power budget without buffer loss")]
    InfeasibleBudget,
    #[error("mixing bracket violated: {0}")]
    BracketViolation(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Converged discounted value function for one multiplier.
#[derive(Debug, Clone)]
pub struct ValueFunction {
    values: Vec<Vec<f64>>,
    diffs: Vec<Vec<f64>>,
    eta: f64,
    alpha: f64,
    /// Bound on the sup-norm distance to the true fixed point.
    error_bound: f64,
}

impl ValueFunction {
    pub fn value(&self, q: usize, s: usize) -> f64 {
        self.values[q][s]
    }

    /// `V(q, s) - V(q - 1, s)` for `q >= 1`.
    pub fn diff(&self, q: usize, s: usize) -> f64 {
        self.diffs[q - 1][s]
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn buffer_size(&self) -> usize {
        self.values.len() - 1
    }

    pub fn n_states(&self) -> usize {
        self.values[0].len()
    }

    pub fn error_bound(&self) -> f64 {
        self.error_bound
    }
}

/// Per-slot mixture of two deterministic threshold policies: play `pi1` with
/// probability `lambda`, `pi2` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedPolicy {
    pub pi1: ThresholdPolicy,
    pub pi2: ThresholdPolicy,
    pub lambda: f64,
}

impl MixedPolicy {
    pub fn new(pi1: ThresholdPolicy, pi2: ThresholdPolicy, lambda: f64) -> Self {
        Self { pi1, pi2, lambda }
    }

    pub fn pure(pi: ThresholdPolicy) -> Self {
        Self {
            pi1: pi.clone(),
            pi2: pi,
            lambda: 1.0,
        }
    }

    /// Entrywise realized policy table `lambda pi1 + (1 - lambda) pi2`.
    pub fn realize(&self, buffer_size: usize) -> PolicyTable {
        PolicyTable::mix(
            &self.pi1.to_table(buffer_size),
            &self.pi2.to_table(buffer_size),
            self.lambda,
        )
    }
}

/// Solves the discounted Bellman equation for multiplier `eta`.
pub fn value_iteration(
    model: &ChannelModel,
    config: &ProblemConfig,
    eta: f64,
) -> Result<ValueFunction, MdpError> {
    value_iteration_warm(model, config, eta, None).map(|(vf, _)| vf)
}

/// Value iteration with an optional warm start; returns the raw value matrix
/// for reuse as the next warm start.
pub(crate) fn value_iteration_warm(
    model: &ChannelModel,
    config: &ProblemConfig,
    eta: f64,
    warm: Option<DMatrix<f64>>,
) -> Result<(ValueFunction, DMatrix<f64>), MdpError> {
    assert!(eta >= 0.0);
    let k = config.buffer_size;
    let s_count = model.n_states();
    let theta = config.arrival_rate;
    let alpha = config.discount;
    let p_t = DMatrix::from_fn(s_count, s_count, |i, j| model.transition_prob(j, i));

    let mut v = warm
        .filter(|w| w.nrows() == k + 1 && w.ncols() == s_count)
        .unwrap_or_else(|| DMatrix::zeros(k + 1, s_count));
    let mut next = DMatrix::zeros(k + 1, s_count);

    let contraction_target = config.vi_tolerance * (1.0 - alpha) / (2.0 * alpha);
    let tail_slope = 1.0 / (1.0 - alpha);
    let mut converged_diff = None;
    for _ in 0..MAX_SWEEPS {
        // w[q][s] = sum_s' P[s][s'] V(q, s').
        let w = &v * &p_t;
        let mut sup_diff = 0.0f64;
        for s in 0..s_count {
            for q in 0..=k {
                let above = if q < k {
                    w[(q + 1, s)]
                } else {
                    w[(k, s)] + tail_slope
                };
                let idle = q as f64 + alpha * (theta * above + (1.0 - theta) * w[(q, s)]);
                let value = if q == 0 {
                    idle
                } else {
                    let transmit = (q - 1) as f64
                        + eta * model.powers()[s]
                        + alpha * (theta * w[(q, s)] + (1.0 - theta) * w[(q - 1, s)]);
                    idle.min(transmit)
                };
                sup_diff = sup_diff.max((value - v[(q, s)]).abs());
                next[(q, s)] = value;
            }
        }
        std::mem::swap(&mut v, &mut next);
        // The absolute target can sit below representable resolution at the
        // value scale, so also stop at the floating-point floor.
        let scale = v.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        let floor = 16.0 * f64::EPSILON * (1.0 + scale);
        if sup_diff <= contraction_target.max(floor) {
            converged_diff = Some(sup_diff);
            break;
        }
    }
    let Some(final_diff) = converged_diff else {
        return Err(MdpError::NoConvergence(MAX_SWEEPS));
    };
    let error_bound = final_diff * alpha / (1.0 - alpha);

    let values: Vec<Vec<f64>> = (0..=k)
        .map(|q| (0..s_count).map(|s| v[(q, s)]).collect())
        .collect();
    let diffs: Vec<Vec<f64>> = (1..=k)
        .map(|q| {
            (0..s_count)
                .map(|s| values[q][s] - values[q - 1][s])
                .collect()
        })
        .collect();

    // Monotone value differences, a structural property of the converged
    // solution; a violation beyond the convergence error is an internal error.
    let band = 4.0 * error_bound + 1e-12;
    for s in 0..s_count {
        for q in 1..=k {
            let d = diffs[q - 1][s];
            if d < -band {
                return Err(MdpError::StructureViolation(format!(
                    "value difference d({q},{s}) = {d:.3e} is negative"
                )));
            }
            if q >= 2 && d < diffs[q - 2][s] - band {
                return Err(MdpError::StructureViolation(format!(
                    "value differences not monotone at q = {q}, s = {s}"
                )));
            }
        }
    }

    Ok((
        ValueFunction {
            values,
            diffs,
            eta,
            alpha,
            error_bound,
        },
        v,
    ))
}

/// Transmit-minus-idle action gap at every post-arrival state.
fn action_gaps(vf: &ValueFunction, model: &ChannelModel, theta: f64) -> Vec<Vec<f64>> {
    let k = vf.buffer_size();
    let s_count = vf.n_states();
    let alpha = vf.alpha;
    let mut w = vec![vec![0.0; s_count]; k + 1];
    for q in 0..=k {
        for s in 0..s_count {
            w[q][s] = (0..s_count)
                .map(|s2| model.transition_prob(s, s2) * vf.values[q][s2])
                .sum();
        }
    }
    let tail_slope = 1.0 / (1.0 - alpha);
    (1..=k)
        .map(|q| {
            (0..s_count)
                .map(|s| {
                    let above = if q < k { w[q + 1][s] } else { w[k][s] + tail_slope };
                    let idle =
                        q as f64 + alpha * (theta * above + (1.0 - theta) * w[q][s]);
                    let transmit = (q - 1) as f64
                        + vf.eta * model.powers()[s]
                        + alpha * (theta * w[q][s] + (1.0 - theta) * w[q - 1][s]);
                    transmit - idle
                })
                .collect()
        })
        .collect()
}

/// Reads the per-state thresholds off a converged value function: the
/// smallest post-arrival queue length whose greedy action is transmit, or
/// `K + 1` when idling is always greedy. Verifies the greedy action is
/// monotone in the queue length.
pub fn extract_thresholds(
    vf: &ValueFunction,
    model: &ChannelModel,
    theta: f64,
) -> Result<ThresholdPolicy, MdpError> {
    let k = vf.buffer_size();
    let s_count = vf.n_states();
    let gaps = action_gaps(vf, model, theta);
    let band = 4.0 * vf.error_bound + 1e-12;

    let mut thresholds = Vec::with_capacity(s_count);
    for s in 0..s_count {
        let mut threshold = k + 1;
        for q in 1..=k {
            if gaps[q - 1][s] <= 0.0 {
                threshold = q;
                break;
            }
        }
        for q in threshold..=k {
            if gaps[q - 1][s] > band {
                return Err(MdpError::StructureViolation(format!(
                    "greedy action not monotone in state {s}: transmit at {threshold}, idle at {q}"
                )));
            }
        }
        thresholds.push(threshold);
    }
    Ok(ThresholdPolicy::new(thresholds, k).expect("thresholds within 1..=K+1"))
}

fn exact_power(
    model: &ChannelModel,
    policy: &ThresholdPolicy,
    config: &ProblemConfig,
) -> Result<f64, MdpError> {
    let table = policy.to_table(config.buffer_size);
    let (result, _) =
        eval::exact_evaluate(model, &table, config.arrival_rate, config.buffer_size)?;
    Ok(result.avg_power)
}

/// Multiplier calibration result: the crossing multiplier and the two
/// deterministic policies bracketing the power budget.
#[derive(Debug, Clone)]
pub struct EtaCalibration {
    pub eta: f64,
    /// Budget-feasible side (`power <= budget`).
    pub pi_hi: ThresholdPolicy,
    /// Relaxed side (`power > budget`, lower delay); equals `pi_hi` when some
    /// multiplier meets the budget exactly.
    pub pi_lo: ThresholdPolicy,
}

/// Bisects the Lagrange multiplier until the extracted threshold policy's
/// exact average power crosses the budget.
pub fn calibrate_eta(
    model: &ChannelModel,
    config: &ProblemConfig,
) -> Result<EtaCalibration, MdpError> {
    let budget = config.power_budget;
    let power_tol = config.bisection_tolerance;

    let mut warm = None;
    let solve_at = |eta: f64, warm: &mut Option<DMatrix<f64>>| -> Result<
        (ThresholdPolicy, f64),
        MdpError,
    > {
        let (vf, values) = value_iteration_warm(model, config, eta, warm.take())?;
        *warm = Some(values);
        let policy = extract_thresholds(&vf, model, config.arrival_rate)?;
        let power = exact_power(model, &policy, config)?;
        Ok((policy, power))
    };

    let (pol_zero, power_zero) = solve_at(0.0, &mut warm)?;
    if power_zero <= budget + power_tol {
        ensure_feasible(model, config, &pol_zero, &pol_zero)?;
        return Ok(EtaCalibration {
            eta: 0.0,
            pi_hi: pol_zero.clone(),
            pi_lo: pol_zero,
        });
    }

    // Double until the extracted policy fits the budget.
    let mut eta_lo = 0.0f64;
    let mut pol_lo = pol_zero;
    let mut eta_hi = 1.0f64;
    let mut pol_hi;
    loop {
        let (pol, power) = solve_at(eta_hi, &mut warm)?;
        if power <= budget {
            if (power - budget).abs() <= power_tol {
                ensure_feasible(model, config, &pol, &pol)?;
                return Ok(EtaCalibration {
                    eta: eta_hi,
                    pi_hi: pol.clone(),
                    pi_lo: pol,
                });
            }
            pol_hi = pol;
            break;
        }
        eta_lo = eta_hi;
        pol_lo = pol;
        eta_hi *= 2.0;
        if eta_hi > 1e30 {
            return Err(MdpError::StructureViolation(
                "power never dropped below budget while doubling the multiplier".into(),
            ));
        }
    }

    while eta_hi - eta_lo > 1e-12 * eta_hi.max(1.0) {
        let mid = 0.5 * (eta_lo + eta_hi);
        let (pol, power) = solve_at(mid, &mut warm)?;
        if (power - budget).abs() <= power_tol {
            ensure_feasible(model, config, &pol, &pol)?;
            return Ok(EtaCalibration {
                eta: mid,
                pi_hi: pol.clone(),
                pi_lo: pol,
            });
        }
        if power > budget {
            eta_lo = mid;
            pol_lo = pol;
        } else {
            eta_hi = mid;
            pol_hi = pol;
        }
    }

    ensure_feasible(model, config, &pol_hi, &pol_lo)?;
    Ok(EtaCalibration {
        eta: 0.5 * (eta_lo + eta_hi),
        pi_hi: pol_hi,
        pi_lo: pol_lo,
    })
}

/// The budget-meeting mixture must keep the buffer loss-free; otherwise the
/// budget cannot carry the full arrival rate and the instance is infeasible.
fn ensure_feasible(
    model: &ChannelModel,
    config: &ProblemConfig,
    pi_hi: &ThresholdPolicy,
    pi_lo: &ThresholdPolicy,
) -> Result<(), MdpError> {
    let k = config.buffer_size;
    let (_, _, mu) = if pi_hi == pi_lo {
        let table = pi_hi.to_table(k);
        let (res, mu) = eval::exact_evaluate(model, &table, config.arrival_rate, k)?;
        (1.0, res, mu)
    } else {
        let (lambda, res, mu) = eval::mix_to_budget(
            model,
            &pi_hi.to_table(k),
            &pi_lo.to_table(k),
            config.arrival_rate,
            k,
            config.power_budget,
            config.bisection_tolerance,
        )?;
        (lambda, res, mu)
    };
    if mu.mass_at_full() > LOSSLESS_TOL {
        return Err(MdpError::InfeasibleBudget);
    }
    Ok(())
}

/// Mixes the bracketing policies per slot until the exact average power meets
/// the budget.
///
/// The mixture's stationary metrics are not affine in the weight (the closed
/// loop changes with it), which is why the bisection evaluates each candidate
/// exactly.
pub fn mix_policies(
    pi_hi: &ThresholdPolicy,
    pi_lo: &ThresholdPolicy,
    model: &ChannelModel,
    config: &ProblemConfig,
) -> Result<MixedPolicy, MdpError> {
    let k = config.buffer_size;
    let theta = config.arrival_rate;
    let budget = config.power_budget;
    let power_tol = config.bisection_tolerance;

    if pi_hi == pi_lo {
        return Ok(MixedPolicy::pure(pi_hi.clone()));
    }

    let table_hi = pi_hi.to_table(k);
    let table_lo = pi_lo.to_table(k);
    let power_hi = exact_power(model, pi_hi, config)?;
    let power_lo = exact_power(model, pi_lo, config)?;
    if power_hi > budget + power_tol || power_lo < budget - power_tol {
        return Err(MdpError::BracketViolation(format!(
            "need power(pi_hi) <= budget <= power(pi_lo), got {power_hi} / {budget} / {power_lo}"
        )));
    }

    // Spot check that power shrinks as the feasible-side weight grows.
    let halfway = PolicyTable::mix(&table_hi, &table_lo, 0.5);
    let (res_mid, _) = eval::exact_evaluate(model, &halfway, theta, k)?;
    if res_mid.avg_power > power_lo + power_tol || res_mid.avg_power < power_hi - power_tol {
        return Err(MdpError::BracketViolation(format!(
            "mixture power {:.6} leaves the bracket [{power_hi:.6}, {power_lo:.6}]",
            res_mid.avg_power
        )));
    }

    let (lambda, _, _) = eval::mix_to_budget(
        model, &table_hi, &table_lo, theta, k, budget, power_tol,
    )?;
    Ok(MixedPolicy::new(pi_hi.clone(), pi_lo.clone(), lambda))
}

/// Full Lagrangian pipeline: calibrate, mix, and evaluate exactly.
#[derive(Debug, Clone)]
pub struct LagrangianSolution {
    pub eta: f64,
    pub mixture: MixedPolicy,
    pub result: EvalResult,
    pub mu: JointDistribution,
}

pub fn solve_lagrangian(
    model: &ChannelModel,
    config: &ProblemConfig,
) -> Result<LagrangianSolution, MdpError> {
    let calibration = calibrate_eta(model, config)?;
    let mixture = mix_policies(&calibration.pi_hi, &calibration.pi_lo, model, config)?;
    let (result, mu) = eval::exact_evaluate(
        model,
        &mixture.realize(config.buffer_size),
        config.arrival_rate,
        config.buffer_size,
    )?;
    Ok(LagrangianSolution {
        eta: calibration.eta,
        mixture,
        result,
        mu,
    })
}
