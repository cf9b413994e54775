//! Return targets for the centralized value function.
//!
//! Conventions for an episode of length `T`: `rewards[t]` is `r_{t+1}`, the
//! reward received after acting at step `t`, and a [`BootstrapTable`] holds
//! `v_0..=v_T` with `v_T = 0`. Every bootstrap value comes from the target
//! network, so targets are plain numbers with no gradient attached.

use serde::{Deserialize, Serialize};

use crate::agents::{epsilon_greedy_probs, masked_argmax};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// `r + gamma * v'` with a greedy bootstrap (the Q-learning target).
    OneStepMax,
    NStep,
    LambdaReturn,
    MonteCarlo,
}

/// How `v_t` is read off the target network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMode {
    /// Value of the joint action actually stored in the episode.
    TakenAction,
    /// Per-agent greedy actions fed through the mixer.
    GreedyMax,
    /// Per-agent expectation under the behaviour policy, then mixed.
    EpsilonExpectation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnTargetSpec {
    pub kind: TargetKind,
    pub lambda: f64,
    pub n: usize,
    pub bootstrap: BootstrapMode,
}

impl Default for ReturnTargetSpec {
    fn default() -> Self {
        Self {
            kind: TargetKind::LambdaReturn,
            lambda: 0.8,
            n: 4,
            bootstrap: BootstrapMode::TakenAction,
        }
    }
}

impl ReturnTargetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.n == 0 {
            return Err(Error::invalid("n must be >= 1"));
        }
        Ok(())
    }

    /// The bootstrap actually used: `OneStepMax` always bootstraps greedily.
    pub fn effective_bootstrap(&self) -> BootstrapMode {
        match self.kind {
            TargetKind::OneStepMax => BootstrapMode::GreedyMax,
            _ => self.bootstrap,
        }
    }
}

/// `v_0..=v_T` with the terminal entry fixed to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapTable(Vec<f64>);

impl BootstrapTable {
    /// Builds the table from the `T` non-terminal values; appends `v_T = 0`.
    pub fn from_steps(mut values: Vec<f64>) -> Self {
        values.push(0.0);
        Self(values)
    }

    /// Takes all `T + 1` values; the last must be zero.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        match values.last() {
            Some(0.0) => Ok(Self(values)),
            _ => Err(Error::invalid("bootstrap table must end with a terminal 0")),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Episode length `T`.
    pub fn horizon(&self) -> usize {
        self.0.len() - 1
    }
}

fn check_lengths(rewards: &[f64], boot: &BootstrapTable) -> Result<usize> {
    if boot.horizon() != rewards.len() {
        return Err(Error::invalid(format!(
            "{} rewards but bootstrap table covers {} steps",
            rewards.len(),
            boot.horizon()
        )));
    }
    Ok(rewards.len())
}

/// `G_t^(n) = sum_{k=1}^{min(n, T-t)} gamma^{k-1} r_{t+k} + [t+n < T] gamma^n v_{t+n}`.
pub fn n_step_return(rewards: &[f64], boot: &BootstrapTable, t: usize, n: usize, gamma: f64) -> Result<f64> {
    let horizon = check_lengths(rewards, boot)?;
    if t >= horizon {
        return Err(Error::invalid(format!("t = {t} outside episode of length {horizon}")));
    }
    if n == 0 {
        return Err(Error::invalid("n must be >= 1"));
    }
    let steps = n.min(horizon - t);
    let mut g = 0.0;
    let mut discount = 1.0;
    for k in 0..steps {
        g += discount * rewards[t + k];
        discount *= gamma;
    }
    if t + n < horizon {
        g += discount * boot.values()[t + n];
    }
    Ok(g)
}

/// Truncated lambda-returns for every step via the backward recursion
/// `G_t = r_{t+1} + gamma * (lambda * G_{t+1} + (1 - lambda) * v_{t+1})`,
/// `G_T = 0`.
pub fn lambda_returns(rewards: &[f64], boot: &BootstrapTable, gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    let horizon = check_lengths(rewards, boot)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let v = boot.values();
    let mut out = vec![0.0; horizon];
    let mut next = 0.0;
    for t in (0..horizon).rev() {
        let g = rewards[t] + gamma * (lambda * next + (1.0 - lambda) * v[t + 1]);
        out[t] = g;
        next = g;
    }
    Ok(out)
}

/// Discounted reward-to-go.
pub fn monte_carlo_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut next = 0.0;
    for t in (0..rewards.len()).rev() {
        next = rewards[t] + gamma * next;
        out[t] = next;
    }
    out
}

/// Per-step targets for one episode and one value head.
pub fn compute_targets(
    spec: &ReturnTargetSpec,
    rewards: &[f64],
    boot: &BootstrapTable,
    gamma: f64,
) -> Result<Vec<f64>> {
    spec.validate()?;
    check_lengths(rewards, boot)?;
    match spec.kind {
        TargetKind::OneStepMax => lambda_returns(rewards, boot, gamma, 0.0),
        TargetKind::LambdaReturn => lambda_returns(rewards, boot, gamma, spec.lambda),
        TargetKind::MonteCarlo => Ok(monte_carlo_returns(rewards, gamma)),
        TargetKind::NStep => (0..rewards.len())
            .map(|t| n_step_return(rewards, boot, t, spec.n, gamma))
            .collect(),
    }
}

/// What one agent contributes to the bootstrap at one step, given the
/// target network's Q-values `q` for that agent.
#[derive(Clone, Copy, Debug)]
pub struct AgentStep<'a> {
    pub q: &'a [f64],
    pub available: &'a [bool],
    /// Action stored in the episode.
    pub taken: usize,
    /// Greedy action of the behaviour network when the episode was collected.
    pub behaviour_greedy: usize,
    /// Exploration rate the episode was collected with.
    pub epsilon: f64,
}

pub fn agent_bootstrap_value(step: &AgentStep<'_>, mode: BootstrapMode) -> Result<f64> {
    let AgentStep {
        q,
        available,
        taken,
        behaviour_greedy,
        epsilon,
    } = *step;
    if q.len() != available.len() || taken >= q.len() {
        return Err(Error::shape(
            "bootstrap_values",
            &[&[q.len()], &[available.len(), taken]],
        ));
    }
    match mode {
        BootstrapMode::TakenAction => Ok(q[taken]),
        BootstrapMode::GreedyMax => masked_argmax(q, available)
            .map(|a| q[a])
            .ok_or_else(|| Error::invalid("no available action")),
        BootstrapMode::EpsilonExpectation => {
            // Behaviour policy: epsilon-uniform over available actions plus
            // 1 - epsilon on the greedy action at collection time.
            let mut marker = vec![0.0; q.len()];
            if behaviour_greedy < marker.len() {
                marker[behaviour_greedy] = 1.0;
            }
            let probs = epsilon_greedy_probs(&marker, available, epsilon);
            Ok(probs.iter().zip(q).map(|(p, v)| p * v).sum())
        }
    }
}

/// Bootstrap table for a single-head mixer. `steps[t][i]` describes agent `i`
/// at step `t` (for the `T` real steps); `mix(t, values)` combines the agent
/// values at step `t` into one number.
pub fn bootstrap_values<F>(steps: &[Vec<AgentStep<'_>>], mode: BootstrapMode, mut mix: F) -> Result<BootstrapTable>
where
    F: FnMut(usize, &[f64]) -> Result<f64>,
{
    let mut values = Vec::with_capacity(steps.len() + 1);
    for (t, agents) in steps.iter().enumerate() {
        let per_agent = agents
            .iter()
            .map(|s| agent_bootstrap_value(s, mode))
            .collect::<Result<Vec<_>>>()?;
        values.push(mix(t, &per_agent)?);
    }
    Ok(BootstrapTable::from_steps(values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n_step_examples() {
        let boot = BootstrapTable::new(vec![0.0, 10.0, 0.0]).unwrap();
        assert_eq!(n_step_return(&[1.0, 2.0], &boot, 0, 5, 0.5).unwrap(), 2.0);
        assert_eq!(n_step_return(&[1.0, 2.0], &boot, 0, 1, 0.5).unwrap(), 1.0 + 0.5 * 10.0);

        let boot = BootstrapTable::new(vec![0.0, 0.0, 10.0, 0.0]).unwrap();
        assert_eq!(n_step_return(&[1.0, 2.0, 3.0], &boot, 0, 2, 0.5).unwrap(), 4.5);
        assert!(n_step_return(&[1.0, 2.0, 3.0], &boot, 3, 2, 0.5).is_err());
    }

    #[test]
    fn lambda_zero_is_one_step() {
        let rewards = [1.0, -2.0, 0.5];
        let boot = BootstrapTable::from_steps(vec![9.0, 4.0, 5.0]);
        let g = lambda_returns(&rewards, &boot, 0.9, 0.0).unwrap();
        let one_step: Vec<f64> = (0..3).map(|t| rewards[t] + 0.9 * boot.values()[t + 1]).collect();
        assert_eq!(g, one_step);
    }

    #[test]
    fn lambda_one_is_monte_carlo() {
        let rewards = [1.0, -2.0, 0.5, 3.0];
        let boot = BootstrapTable::from_steps(vec![9.0, 4.0, 5.0, -1.0]);
        assert_eq!(
            lambda_returns(&rewards, &boot, 0.9, 1.0).unwrap(),
            monte_carlo_returns(&rewards, 0.9)
        );
    }

    #[test]
    fn terminal_entry_is_enforced() {
        assert!(BootstrapTable::new(vec![1.0, 2.0]).is_err());
        let boot = BootstrapTable::from_steps(vec![1.0]);
        assert!(lambda_returns(&[1.0, 2.0], &boot, 0.9, 0.5).is_err());
        assert!(lambda_returns(&[1.0], &boot, 0.9, 1.5).is_err());
    }

    fn step<'a>(q: &'a [f64], avail: &'a [bool], taken: usize, eps: f64) -> AgentStep<'a> {
        AgentStep {
            q,
            available: avail,
            taken,
            behaviour_greedy: 0,
            epsilon: eps,
        }
    }

    #[test]
    fn greedy_bootstrap_with_additive_mixer() {
        let avail = [true, true];
        let steps = vec![vec![
            step(&[1.0, 2.0], &avail, 0, 0.0),
            step(&[5.0, 3.0], &avail, 1, 0.0),
        ]];
        let sum = |_: usize, v: &[f64]| Ok(v.iter().sum());
        let greedy = bootstrap_values(&steps, BootstrapMode::GreedyMax, sum).unwrap();
        assert_eq!(greedy.values(), &[7.0, 0.0]);

        let argmax_steps = vec![vec![
            step(&[1.0, 2.0], &avail, 1, 0.0),
            step(&[5.0, 3.0], &avail, 0, 0.0),
        ]];
        let taken = bootstrap_values(&argmax_steps, BootstrapMode::TakenAction, sum).unwrap();
        assert_eq!(taken, greedy);
    }

    #[test]
    fn uniform_expectation_bootstrap() {
        let avail = [true, true];
        let steps = vec![vec![
            step(&[1.0, 3.0], &avail, 0, 1.0),
            step(&[2.0, 4.0], &avail, 0, 1.0),
        ]];
        let table = bootstrap_values(&steps, BootstrapMode::EpsilonExpectation, |_, v| Ok(v.iter().sum())).unwrap();
        assert_eq!(table.values(), &[5.0, 0.0]);
    }

    #[test]
    fn one_step_max_forces_greedy() {
        let spec = ReturnTargetSpec {
            kind: TargetKind::OneStepMax,
            ..Default::default()
        };
        assert_eq!(spec.effective_bootstrap(), BootstrapMode::GreedyMax);
        assert_eq!(
            ReturnTargetSpec::default().effective_bootstrap(),
            BootstrapMode::TakenAction
        );
    }
}
