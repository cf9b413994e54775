//! Tabular versions of the SMIX(lambda), Q(lambda) and importance-sampling
//! policy-evaluation updates on small enumerable MDPs, with executable checks
//! of how far SMIX drifts from Q(lambda) and of Q(lambda) convergence to
//! `Q^pi`.
//!
//! All three updates start a trajectory at `(s_0, a_0) = (s, a)`, follow the
//! behaviour policy `mu`, and add `alpha * E[sum_k (lambda gamma)^k c_k d_k]`
//! to `Q(s, a)`. They differ only in the TD error `d_k` and weight `c_k`:
//!
//! * SMIX: `d_k = r_k + gamma E_mu Q(s_{k+1}, .) - Q(s_k, a_k)`, `c_k = 1`.
//! * Q(lambda): as SMIX with `E_pi` in place of `E_mu`.
//! * IS: `d_k = r_k + gamma rho_{k+1} Q(s_{k+1}, a_{k+1}) - Q(s_k, a_k)`,
//!   `c_k = rho_1 ... rho_k` with `rho = pi / mu`.

mod checks;
mod updates;

pub use checks::{
    is_vs_smix_variance, policy_evaluation_suite, q_pi, qlambda_convergence_check, update_gap_check, update_gap_suite,
    ConvergenceReport, PolicyEvaluationRow, StepSizes, UpdateGapReport, UpdateGapRow, VarianceReport,
    POLICY_EVALUATION_SAMPLED_UPDATES,
};
pub use updates::{
    exact_horizon, is_update_with_product_ratios, qlambda_update, sample_trajectory, smix_update, Expectation,
    Trajectory, UpdateKind, TAIL_TOLERANCE,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::SimRng;

const ROW_TOLERANCE: f64 = 1e-12;

/// Largest `n_states * n_actions` accepted.
pub const MAX_PAIRS: usize = 10_000;

/// A finite MDP over joint actions with deterministic rewards `r(s, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transitions[s][a][s']`
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `rewards[s][a]`
    pub rewards: Vec<Vec<f64>>,
    pub gamma: f64,
    pub initial: Vec<f64>,
}

impl TabularMdp {
    pub fn new(transitions: Vec<Vec<Vec<f64>>>, rewards: Vec<Vec<f64>>, gamma: f64, initial: Vec<f64>) -> Result<Self> {
        let n_states = transitions.len();
        let n_actions = transitions.first().map_or(0, |t| t.len());
        let mdp = Self {
            n_states,
            n_actions,
            transitions,
            rewards,
            gamma,
            initial,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, a) = (self.n_states, self.n_actions);
        if s == 0 || a == 0 || s * a > MAX_PAIRS {
            return Err(Error::invalid(format!("{s} states x {a} actions is not a small MDP")));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if self.rewards.len() != s
            || self
                .rewards
                .iter()
                .any(|r| r.len() != a || r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::invalid("rewards must be a finite [states][actions] table"));
        }
        for row in &self.transitions {
            if row.len() != a {
                return Err(Error::invalid("transitions must be [states][actions][states]"));
            }
            for p in row {
                check_distribution(p, s, "transition")?;
            }
        }
        check_distribution(&self.initial, s, "initial distribution")
    }

    pub fn pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    /// Random dense MDP: transition rows are normalized uniforms, rewards
    /// uniform in `[-1, 1]`, uniform initial distribution.
    pub fn random(n_states: usize, n_actions: usize, gamma: f64, rng: &mut SimRng) -> Result<Self> {
        let transitions = (0..n_states)
            .map(|_| (0..n_actions).map(|_| random_distribution(n_states, rng)).collect())
            .collect();
        let rewards = (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.gen_range(-1.0..=1.0)).collect())
            .collect();
        Self::new(transitions, rewards, gamma, vec![1.0 / n_states as f64; n_states])
    }

    /// Deterministic ring: action `a` in state `s` moves to `(s + a) mod n`.
    /// Rewards uniform in `[-1, 1]`.
    pub fn chain(n_states: usize, n_actions: usize, gamma: f64, rng: &mut SimRng) -> Result<Self> {
        let transitions = (0..n_states)
            .map(|s| {
                (0..n_actions)
                    .map(|a| {
                        let mut p = vec![0.0; n_states];
                        p[(s + a) % n_states] = 1.0;
                        p
                    })
                    .collect()
            })
            .collect();
        let rewards = (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.gen_range(-1.0..=1.0)).collect())
            .collect();
        let mut initial = vec![0.0; n_states];
        initial[0] = 1.0;
        Self::new(transitions, rewards, gamma, initial)
    }

    pub fn is_deterministic(&self) -> bool {
        self.transitions
            .iter()
            .flatten()
            .all(|p| p.iter().filter(|&&v| v > 0.0).count() == 1)
    }
}

fn check_distribution(p: &[f64], len: usize, what: &str) -> Result<()> {
    if p.len() != len || p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!(
            "{what} must be {len} non-negative probabilities"
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > ROW_TOLERANCE {
        return Err(Error::invalid(format!("{what} sums to {total}")));
    }
    Ok(())
}

fn random_distribution(n: usize, rng: &mut SimRng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

/// Stochastic policies indexed `[state][action]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyPair {
    /// Target policy.
    pub pi: Vec<Vec<f64>>,
    /// Behaviour policy.
    pub mu: Vec<Vec<f64>>,
}

impl PolicyPair {
    pub fn new(pi: Vec<Vec<f64>>, mu: Vec<Vec<f64>>) -> Result<Self> {
        if pi.len() != mu.len() {
            return Err(Error::invalid("policies cover different state counts"));
        }
        for row in pi.iter().chain(&mu) {
            check_distribution(row, pi[0].len(), "policy row")?;
        }
        Ok(Self { pi, mu })
    }

    pub fn same(policy: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(policy.clone(), policy)
    }

    /// `max_s || pi(.|s) - mu(.|s) ||_1`.
    pub fn eps_dist(&self) -> f64 {
        self.pi
            .iter()
            .zip(&self.mu)
            .map(|(p, m)| p.iter().zip(m).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    fn check_fits(&self, mdp: &TabularMdp) -> Result<()> {
        if self.pi.len() != mdp.n_states || self.pi[0].len() != mdp.n_actions {
            return Err(Error::invalid("policies do not match the MDP"));
        }
        Ok(())
    }
}

pub fn uniform_policy(n_states: usize, n_actions: usize) -> Vec<Vec<f64>> {
    vec![vec![1.0 / n_actions as f64; n_actions]; n_states]
}

/// `1 - eps` on `greedy[s]` plus `eps` spread uniformly.
pub fn epsilon_greedy_policy(greedy: &[usize], n_actions: usize, eps: f64) -> Vec<Vec<f64>> {
    greedy
        .iter()
        .map(|&g| {
            let mut row = vec![eps / n_actions as f64; n_actions];
            row[g] += 1.0 - eps;
            row
        })
        .collect()
}

/// Random epsilon-greedy pair with independent greedy actions and rates.
pub fn random_epsilon_greedy_pair(n_states: usize, n_actions: usize, rng: &mut SimRng) -> Result<PolicyPair> {
    let draw = |rng: &mut SimRng| {
        let greedy: Vec<usize> = (0..n_states).map(|_| rng.gen_range(0..n_actions)).collect();
        let eps = rng.gen_range(0.0..=1.0);
        epsilon_greedy_policy(&greedy, n_actions, eps)
    };
    let pi = draw(rng);
    let mu = draw(rng);
    PolicyPair::new(pi, mu)
}

/// Action-value table, row-major `[state][action]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        Self {
            n_states: rows.len(),
            n_actions: rows.first().map_or(0, |r| r.len()),
            values: rows.concat(),
        }
    }

    pub fn random(n_states: usize, n_actions: usize, scale: f64, rng: &mut SimRng) -> Self {
        Self {
            n_states,
            n_actions,
            values: (0..n_states * n_actions)
                .map(|_| rng.gen_range(-scale..=scale))
                .collect(),
        }
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_diff(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `sum_a policy(a|s) Q(s, a)`
    pub fn expected(&self, s: usize, policy: &[f64]) -> f64 {
        self.row(s).iter().zip(policy).map(|(q, p)| q * p).sum()
    }

    fn check_fits(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_states != mdp.n_states || self.n_actions != mdp.n_actions || self.values.len() != mdp.pairs() {
            return Err(Error::invalid("Q table does not match the MDP"));
        }
        Ok(())
    }
}
