//! Stationary analysis of the channel chain.
//!
//! The channel is a finite row-stochastic Markov chain. An ergodic chain
//! (irreducible and aperiodic) has a unique stationary distribution, which we
//! obtain by a direct linear solve: replace one balance equation of
//! `rho P = rho` with the normalization `sum(rho) = 1`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Residual bound enforced on the returned distribution (`|rho P - rho|_inf`).
pub const STATIONARY_RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum MarkovError {
    #[error("transition matrix is not ergodic (reducible or periodic)")]
    NotErgodic,
    #[error("stationary solve failed: {0}")]
    Numerical(String),
}

/// Unique stationary distribution of an ergodic chain.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution {
    rho: Vec<f64>,
}

impl StationaryDistribution {
    pub fn probabilities(&self) -> &[f64] {
        &self.rho
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }
}

/// True iff the positive-entry digraph of `p` is strongly connected and
/// aperiodic. Assumes `p` is row-stochastic.
pub fn is_ergodic(p: &[Vec<f64>]) -> bool {
    let n = p.len();
    if n == 0 {
        return false;
    }
    let edge = |i: usize, j: usize| p[i][j] > 0.0;

    // Strong connectivity: every state reachable from 0, forwards and backwards.
    let reach = |forward: bool| -> usize {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for v in 0..n {
                let connected = if forward { edge(u, v) } else { edge(v, u) };
                if connected && !seen[v] {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count
    };
    if reach(true) != n || reach(false) != n {
        return false;
    }

    // Aperiodicity: the period is gcd over edges (u,v) of dist(u) + 1 - dist(v)
    // for BFS distances from any root of a strongly connected graph.
    let mut dist = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::from([0usize]);
    dist[0] = 0;
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            if edge(u, v) && dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let mut g: i64 = 0;
    for u in 0..n {
        for v in 0..n {
            if edge(u, v) {
                let step = dist[u] as i64 + 1 - dist[v] as i64;
                g = gcd(g, step.abs());
            }
        }
    }
    g == 1
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Unique `rho` with `rho P = rho`, `sum(rho) = 1`, for ergodic `p`.
pub fn stationary_distribution(p: &[Vec<f64>]) -> Result<StationaryDistribution, MarkovError> {
    if !is_ergodic(p) {
        return Err(MarkovError::NotErgodic);
    }
    let n = p.len();
    // (P^T - I) rho = 0 with the last equation replaced by sum(rho) = 1.
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = p[j][i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let rho = a
        .lu()
        .solve(&b)
        .ok_or_else(|| MarkovError::Numerical("singular stationary system".into()))?;

    let mut rho: Vec<f64> = rho.iter().copied().collect();
    for r in &mut rho {
        if *r < 0.0 && *r > -1e-12 {
            *r = 0.0;
        }
    }
    let total: f64 = rho.iter().sum();
    for r in &mut rho {
        *r /= total;
    }

    let mut residual: f64 = 0.0;
    for j in 0..n {
        let flow: f64 = (0..n).map(|i| rho[i] * p[i][j]).sum();
        residual = residual.max((flow - rho[j]).abs());
    }
    if residual > STATIONARY_RESIDUAL_TOL || rho.iter().any(|r| *r < 0.0) {
        return Err(MarkovError::Numerical(format!(
            "stationary residual {residual:.3e} exceeds tolerance"
        )));
    }
    Ok(StationaryDistribution { rho })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_matrix() -> Vec<Vec<f64>> {
        vec![
            vec![0.5, 0.3, 0.2],
            vec![0.3, 0.4, 0.3],
            vec![0.2, 0.3, 0.5],
        ]
    }

    /// Independent oracle: power iteration from the uniform vector.
    fn power_iteration(p: &[Vec<f64>]) -> Vec<f64> {
        let n = p.len();
        let mut rho = vec![1.0 / n as f64; n];
        for _ in 0..200_000 {
            let mut next = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    next[j] += rho[i] * p[i][j];
                }
            }
            let diff: f64 = next
                .iter()
                .zip(&rho)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            rho = next;
            if diff < 1e-15 {
                break;
            }
        }
        rho
    }

    #[test]
    fn ergodicity_cases() {
        assert!(is_ergodic(&paper_matrix()));
        assert!(is_ergodic(&[vec![1.0]]));
        // Two-cycle has period 2.
        assert!(!is_ergodic(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
        // Absorbing state 0 makes the chain reducible.
        assert!(!is_ergodic(&[vec![1.0, 0.0], vec![0.5, 0.5]]));
        assert!(!is_ergodic(&[]));
    }

    #[test]
    fn paper_matrix_is_uniform() {
        // Doubly stochastic, so the stationary distribution is uniform.
        let rho = stationary_distribution(&paper_matrix()).unwrap();
        for r in rho.probabilities() {
            assert!((r - 1.0 / 3.0).abs() < 1e-12);
        }
        let oracle = power_iteration(&paper_matrix());
        for (a, b) in rho.probabilities().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn single_state() {
        let rho = stationary_distribution(&[vec![1.0]]).unwrap();
        assert_eq!(rho.probabilities(), &[1.0]);
    }

    #[test]
    fn two_state_hand_solved() {
        // rho P = rho solved by hand: rho = (5/6, 1/6).
        let p = vec![vec![0.9, 0.1], vec![0.5, 0.5]];
        let rho = stationary_distribution(&p).unwrap();
        assert!((rho.probabilities()[0] - 5.0 / 6.0).abs() < 1e-12);
        assert!((rho.probabilities()[1] - 1.0 / 6.0).abs() < 1e-12);
        let oracle = power_iteration(&p);
        for (a, b) in rho.probabilities().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_non_ergodic() {
        assert_eq!(
            stationary_distribution(&[vec![0.0, 1.0], vec![1.0, 0.0]]),
            Err(MarkovError::NotErgodic)
        );
    }
}
