//! Shared domain types: channel model, problem configuration, policies,
//! joint distributions, and evaluation results.
//!
//! All types are immutable values after construction; constructors enforce
//! every structural invariant so downstream code can rely on them.

use serde::Serialize;
use thiserror::Error;

use crate::markov;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("transition matrix must be square and non-empty")]
    NotSquare,
    #[error("powers vector has length {got}, expected {expected}")]
    PowerLengthMismatch { got: usize, expected: usize },
    #[error("transition row {row} sums to {sum} or has entries outside [0, 1]")]
    NonStochasticRow { row: usize, sum: f64 },
    #[error("channel chain is not ergodic (reducible or periodic)")]
    NotErgodic,
    #[error("powers must be strictly decreasing; violated at state {state}")]
    PowersNotDecreasing { state: usize },
    #[error("power for state {state} must be strictly positive, got {value}")]
    NonPositivePower { state: usize, value: f64 },
    #[error("threshold for state {state} is {value}, outside 1..=K+1")]
    ThresholdOutOfRange { state: usize, value: usize },
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("arrival rate must lie strictly inside (0, 1), got {0}")]
    InvalidArrivalRate(f64),
    #[error("buffer size must be at least 1")]
    InvalidBufferSize,
    #[error("power budget must be strictly positive, got {0}")]
    InvalidPowerBudget(f64),
    #[error("discount factor must lie strictly inside (0, 1), got {0}")]
    InvalidDiscount(f64),
    #[error("{name} must be strictly positive, got {value}")]
    InvalidTolerance { name: &'static str, value: f64 },
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("policy table must be (K+1) x S with K >= 1, S >= 1")]
    BadShape,
    #[error("transmit probability at (q={q}, s={s}) is {value}, outside [0, 1]")]
    EntryOutOfRange { q: usize, s: usize, value: f64 },
    #[error("row 0 must be all zeros (cannot transmit from an empty queue)")]
    NonzeroEmptyQueueRow,
}

/// S-state Markov channel with per-state transmission powers.
///
/// States are indexed so that a larger index means a better channel, hence
/// `powers` is strictly decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelModel {
    transition: Vec<Vec<f64>>,
    powers: Vec<f64>,
}

impl ChannelModel {
    /// Validates row-stochasticity, ergodicity, and the power ordering.
    pub fn new(transition: Vec<Vec<f64>>, powers: Vec<f64>) -> Result<Self, ModelError> {
        let s = transition.len();
        if s == 0 || transition.iter().any(|row| row.len() != s) {
            return Err(ModelError::NotSquare);
        }
        if powers.len() != s {
            return Err(ModelError::PowerLengthMismatch {
                got: powers.len(),
                expected: s,
            });
        }
        for (i, row) in transition.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(ModelError::NonStochasticRow { row: i, sum });
            }
        }
        if !markov::is_ergodic(&transition) {
            return Err(ModelError::NotErgodic);
        }
        for (i, &x) in powers.iter().enumerate() {
            if !(x > 0.0) {
                return Err(ModelError::NonPositivePower { state: i, value: x });
            }
        }
        for i in 1..s {
            if !(powers[i - 1] > powers[i]) {
                return Err(ModelError::PowersNotDecreasing { state: i - 1 });
            }
        }
        Ok(Self { transition, powers })
    }

    pub fn n_states(&self) -> usize {
        self.powers.len()
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    pub fn transition_prob(&self, from: usize, to: usize) -> f64 {
        self.transition[from][to]
    }

    pub fn powers(&self) -> &[f64] {
        &self.powers
    }

    pub fn max_power(&self) -> f64 {
        self.powers[0]
    }
}

/// Problem instance parameters and solver tolerances.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConfig {
    /// Bernoulli packet arrival probability per slot, in (0, 1).
    pub arrival_rate: f64,
    /// Maximum queue length K >= 1.
    pub buffer_size: usize,
    /// Long-run average energy budget per slot.
    pub power_budget: f64,
    /// Discount factor for value iteration.
    pub discount: f64,
    /// Value-iteration sup-norm stopping threshold.
    pub vi_tolerance: f64,
    /// Tolerance on achieved average power during bisection.
    pub bisection_tolerance: f64,
    /// LP feasibility/optimality tolerance.
    pub lp_tolerance: f64,
}

impl ProblemConfig {
    pub fn new(arrival_rate: f64, buffer_size: usize, power_budget: f64) -> Result<Self, ConfigError> {
        let config = Self {
            arrival_rate,
            buffer_size,
            power_budget,
            discount: 0.999,
            vi_tolerance: 1e-9,
            bisection_tolerance: 1e-8,
            lp_tolerance: 1e-9,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_power_budget(mut self, power_budget: f64) -> Result<Self, ConfigError> {
        self.power_budget = power_budget;
        self.validate()?;
        Ok(self)
    }

    pub fn with_discount(mut self, discount: f64) -> Result<Self, ConfigError> {
        self.discount = discount;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.arrival_rate > 0.0 && self.arrival_rate < 1.0) {
            return Err(ConfigError::InvalidArrivalRate(self.arrival_rate));
        }
        if self.buffer_size < 1 {
            return Err(ConfigError::InvalidBufferSize);
        }
        if !(self.power_budget > 0.0) {
            return Err(ConfigError::InvalidPowerBudget(self.power_budget));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(ConfigError::InvalidDiscount(self.discount));
        }
        for (name, value) in [
            ("vi_tolerance", self.vi_tolerance),
            ("bisection_tolerance", self.bisection_tolerance),
            ("lp_tolerance", self.lp_tolerance),
        ] {
            if !(value > 0.0) {
                return Err(ConfigError::InvalidTolerance { name, value });
            }
        }
        Ok(())
    }
}

/// Randomized stationary policy: `transmit_prob[q][s]` is the probability of
/// transmitting when the post-arrival queue length is `q` and the channel
/// state is `s`. Row 0 is identically zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyTable {
    transmit_prob: Vec<Vec<f64>>,
}

impl PolicyTable {
    pub fn new(transmit_prob: Vec<Vec<f64>>) -> Result<Self, PolicyError> {
        if transmit_prob.len() < 2 {
            return Err(PolicyError::BadShape);
        }
        let s = transmit_prob[0].len();
        if s == 0 || transmit_prob.iter().any(|row| row.len() != s) {
            return Err(PolicyError::BadShape);
        }
        for (q, row) in transmit_prob.iter().enumerate() {
            for (j, &f) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&f) || f.is_nan() {
                    return Err(PolicyError::EntryOutOfRange { q, s: j, value: f });
                }
            }
        }
        if transmit_prob[0].iter().any(|&f| f != 0.0) {
            return Err(PolicyError::NonzeroEmptyQueueRow);
        }
        Ok(Self { transmit_prob })
    }

    /// Buffer size K (the table has K+1 rows).
    pub fn buffer_size(&self) -> usize {
        self.transmit_prob.len() - 1
    }

    pub fn n_states(&self) -> usize {
        self.transmit_prob[0].len()
    }

    /// Transmit probability at post-arrival queue length `q` and channel `s`.
    pub fn prob(&self, q: usize, s: usize) -> f64 {
        self.transmit_prob[q][s]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.transmit_prob
    }

    /// Entrywise convex combination `lambda * a + (1 - lambda) * b`.
    pub fn mix(a: &PolicyTable, b: &PolicyTable, lambda: f64) -> PolicyTable {
        assert_eq!(a.buffer_size(), b.buffer_size());
        assert_eq!(a.n_states(), b.n_states());
        assert!((0.0..=1.0).contains(&lambda));
        let transmit_prob = a
            .transmit_prob
            .iter()
            .zip(&b.transmit_prob)
            .map(|(ra, rb)| {
                ra.iter()
                    .zip(rb)
                    .map(|(&fa, &fb)| lambda * fa + (1.0 - lambda) * fb)
                    .collect()
            })
            .collect();
        PolicyTable { transmit_prob }
    }

    /// Recovers the threshold vector if every column is a 0/1 step function of
    /// the queue length; `None` for genuinely randomized tables.
    pub fn to_thresholds(&self) -> Option<ThresholdPolicy> {
        let k = self.buffer_size();
        let mut thresholds = Vec::with_capacity(self.n_states());
        for s in 0..self.n_states() {
            let mut threshold = k + 1;
            for q in 1..=k {
                let f = self.prob(q, s);
                if f != 0.0 && f != 1.0 {
                    return None;
                }
                if f == 1.0 && threshold == k + 1 {
                    threshold = q;
                } else if f == 0.0 && threshold != k + 1 {
                    return None; // step back down: not a threshold column
                }
            }
            thresholds.push(threshold);
        }
        Some(ThresholdPolicy { thresholds })
    }
}

/// Deterministic queue-length threshold policy: transmit in state `s` iff the
/// post-arrival queue length is at least `thresholds[s]`. A threshold of
/// `K + 1` encodes "never transmit in this state".
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct ThresholdPolicy {
    thresholds: Vec<usize>,
}

impl ThresholdPolicy {
    pub fn new(thresholds: Vec<usize>, buffer_size: usize) -> Result<Self, ModelError> {
        for (s, &t) in thresholds.iter().enumerate() {
            if t < 1 || t > buffer_size + 1 {
                return Err(ModelError::ThresholdOutOfRange { state: s, value: t });
            }
        }
        Ok(Self { thresholds })
    }

    /// All-ones thresholds: transmit whenever the queue is nonempty.
    pub fn always_transmit(n_states: usize) -> Self {
        Self {
            thresholds: vec![1; n_states],
        }
    }

    /// All thresholds at K+1: never transmit.
    pub fn never_transmit(n_states: usize, buffer_size: usize) -> Self {
        Self {
            thresholds: vec![buffer_size + 1; n_states],
        }
    }

    pub fn thresholds(&self) -> &[usize] {
        &self.thresholds
    }

    pub fn n_states(&self) -> usize {
        self.thresholds.len()
    }

    /// Expands to the (K+1) x S 0/1 policy table.
    pub fn to_table(&self, buffer_size: usize) -> PolicyTable {
        let transmit_prob = (0..=buffer_size)
            .map(|q| {
                self.thresholds
                    .iter()
                    .map(|&t| if q >= t { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        PolicyTable { transmit_prob }
    }
}

/// Steady-state probabilities over (post-decision queue length, channel state).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointDistribution {
    mu: Vec<Vec<f64>>,
}

impl JointDistribution {
    pub(crate) fn from_raw(mu: Vec<Vec<f64>>) -> Self {
        Self { mu }
    }

    pub fn buffer_size(&self) -> usize {
        self.mu.len() - 1
    }

    pub fn n_states(&self) -> usize {
        self.mu[0].len()
    }

    pub fn prob(&self, q: usize, s: usize) -> f64 {
        self.mu[q][s]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.mu
    }

    pub fn total(&self) -> f64 {
        self.mu.iter().flatten().sum()
    }

    /// Channel marginal: `sum_q mu[q][s]` for each state.
    pub fn channel_marginals(&self) -> Vec<f64> {
        let s = self.n_states();
        let mut out = vec![0.0; s];
        for row in &self.mu {
            for (j, &m) in row.iter().enumerate() {
                out[j] += m;
            }
        }
        out
    }

    /// Probability mass at the full buffer, `sum_s mu[K][s]`.
    pub fn mass_at_full(&self) -> f64 {
        self.mu[self.buffer_size()].iter().sum()
    }

    /// Expected post-decision queue length.
    pub fn mean_queue(&self) -> f64 {
        self.mu
            .iter()
            .enumerate()
            .map(|(q, row)| q as f64 * row.iter().sum::<f64>())
            .sum()
    }
}

/// Long-run averages of a stationary policy, exact or simulated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    /// Time average of the queue length (packets).
    pub avg_queue: f64,
    /// Per-packet delay in slots (`avg_queue` over delivered throughput).
    pub avg_delay: f64,
    /// Average energy per slot.
    pub avg_power: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_channel() -> ChannelModel {
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

    #[test]
    fn accepts_reference_instance() {
        let model = paper_channel();
        assert_eq!(model.n_states(), 3);
        assert_eq!(model.powers(), &[4.5, 1.5, 0.5]);
    }

    #[test]
    fn accepts_single_state_chain() {
        let model = ChannelModel::new(vec![vec![1.0]], vec![1.0]).unwrap();
        assert_eq!(model.n_states(), 1);
    }

    #[test]
    fn rejects_identity_as_not_ergodic() {
        let err = ChannelModel::new(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![2.0, 1.0],
        )
        .unwrap_err();
        assert_eq!(err, ModelError::NotErgodic);
    }

    #[test]
    fn rejects_non_stochastic_row() {
        // Perturb one entry of the reference instance beyond 1e-12.
        let err = ChannelModel::new(
            vec![
                vec![0.5, 0.3, 0.2 + 1e-9],
                vec![0.3, 0.4, 0.3],
                vec![0.2, 0.3, 0.5],
            ],
            vec![4.5, 1.5, 0.5],
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::NonStochasticRow { row: 0, .. }));
    }

    #[test]
    fn rejects_bad_powers() {
        let p = vec![
            vec![0.5, 0.3, 0.2],
            vec![0.3, 0.4, 0.3],
            vec![0.2, 0.3, 0.5],
        ];
        assert_eq!(
            ChannelModel::new(p.clone(), vec![4.5, 4.5, 0.5]).unwrap_err(),
            ModelError::PowersNotDecreasing { state: 0 }
        );
        assert_eq!(
            ChannelModel::new(p.clone(), vec![4.5, 1.5, 0.0]).unwrap_err(),
            ModelError::NonPositivePower { state: 2, value: 0.0 }
        );
        assert_eq!(
            ChannelModel::new(p, vec![4.5, 1.5]).unwrap_err(),
            ModelError::PowerLengthMismatch { got: 2, expected: 3 }
        );
    }

    #[test]
    fn config_validation() {
        assert!(ProblemConfig::new(0.6, 11, 1.0).is_ok());
        assert_eq!(
            ProblemConfig::new(0.0, 11, 1.0).unwrap_err(),
            ConfigError::InvalidArrivalRate(0.0)
        );
        assert_eq!(
            ProblemConfig::new(1.0, 11, 1.0).unwrap_err(),
            ConfigError::InvalidArrivalRate(1.0)
        );
        assert_eq!(
            ProblemConfig::new(0.6, 0, 1.0).unwrap_err(),
            ConfigError::InvalidBufferSize
        );
        assert_eq!(
            ProblemConfig::new(0.6, 11, 0.0).unwrap_err(),
            ConfigError::InvalidPowerBudget(0.0)
        );
        assert!(ProblemConfig::new(0.6, 11, 1.0)
            .unwrap()
            .with_discount(1.0)
            .is_err());
    }

    #[test]
    fn threshold_expansion_matches_definition() {
        // L = [1], K = 2: transmit whenever nonempty.
        let t = ThresholdPolicy::new(vec![1], 2).unwrap();
        assert_eq!(
            t.to_table(2).rows(),
            &[vec![0.0], vec![1.0], vec![1.0]]
        );

        // L = [K+1]: never transmit.
        let t = ThresholdPolicy::new(vec![3], 2).unwrap();
        assert_eq!(
            t.to_table(2).rows(),
            &[vec![0.0], vec![0.0], vec![0.0]]
        );

        // L = [2, 1], K = 2: column 0 steps at 2, column 1 at 1.
        let t = ThresholdPolicy::new(vec![2, 1], 2).unwrap();
        assert_eq!(
            t.to_table(2).rows(),
            &[vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]
        );
    }

    #[test]
    fn threshold_bounds_checked() {
        assert!(ThresholdPolicy::new(vec![0], 2).is_err());
        assert!(ThresholdPolicy::new(vec![4], 2).is_err());
        assert!(ThresholdPolicy::new(vec![3], 2).is_ok());
    }

    #[test]
    fn policy_table_validation() {
        assert!(PolicyTable::new(vec![vec![0.0], vec![0.5]]).is_ok());
        assert_eq!(
            PolicyTable::new(vec![vec![0.1], vec![0.5]]).unwrap_err(),
            PolicyError::NonzeroEmptyQueueRow
        );
        assert!(matches!(
            PolicyTable::new(vec![vec![0.0], vec![1.5]]).unwrap_err(),
            PolicyError::EntryOutOfRange { .. }
        ));
        assert_eq!(
            PolicyTable::new(vec![vec![0.0]]).unwrap_err(),
            PolicyError::BadShape
        );
    }

    #[test]
    fn threshold_round_trip() {
        let t = ThresholdPolicy::new(vec![2, 1, 4], 3).unwrap();
        let back = t.to_table(3).to_thresholds().unwrap();
        assert_eq!(back, t);

        // A genuinely randomized table has no threshold representation.
        let table = PolicyTable::new(vec![vec![0.0], vec![0.5]]).unwrap();
        assert!(table.to_thresholds().is_none());
    }
}
