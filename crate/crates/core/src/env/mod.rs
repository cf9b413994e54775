//! Cooperative Dec-POMDP environments.
//!
//! All agents share one reward. Each environment owns its transition and
//! observation functions; the initial-state distribution lives in `reset`.

mod gridworld;
mod matrix;

pub use gridworld::{GridWorld, GridWorldConfig};
pub use matrix::{MStepGame, OneShotGame};

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Static description of an environment.
#[derive(Clone, Debug, PartialEq)]
pub struct DecPomdpSpec {
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub episode_limit: usize,
    pub gamma: f64,
}

impl DecPomdpSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_agents == 0 {
            problems.push("n_agents must be >= 1".to_string());
        }
        if self.n_actions == 0 {
            problems.push("n_actions must be >= 1".to_string());
        }
        if self.episode_limit == 0 {
            problems.push("episode_limit must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            problems.push(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Env(problems.join("; ")))
        }
    }
}

/// What the agents see after `reset` or `step`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    /// Shared reward of the transition that produced this result (0 on reset).
    pub reward: f64,
    pub terminal: bool,
    pub observations: Vec<Vec<f64>>,
    pub state: Vec<f64>,
    pub available_actions: Vec<Vec<bool>>,
}

pub trait Environment: Send {
    fn spec(&self) -> &DecPomdpSpec;

    fn reset(&mut self, rng: &mut SimRng) -> StepResult;

    /// Applies one joint action. Errors when the episode is over or an
    /// action is unavailable.
    fn step(&mut self, joint_action: &[usize]) -> Result<StepResult>;

    /// Steps taken since the last reset.
    fn steps_taken(&self) -> usize;

    fn boxed_clone(&self) -> Box<dyn Environment>;

    /// Whether the dynamics (not the reset) are deterministic, which makes
    /// open-loop search exact.
    fn deterministic(&self) -> bool {
        true
    }
}

impl Clone for Box<dyn Environment> {
    fn clone(&self) -> Self {
        self.boxed_clone()
    }
}

/// Shared precondition checks for `step`.
pub(crate) fn check_joint_action(
    spec: &DecPomdpSpec,
    terminal: bool,
    available: &[Vec<bool>],
    joint_action: &[usize],
) -> Result<()> {
    if terminal {
        return Err(Error::Env("step called on a terminated episode".into()));
    }
    if joint_action.len() != spec.n_agents {
        return Err(Error::Env(format!(
            "expected {} actions, got {}",
            spec.n_agents,
            joint_action.len()
        )));
    }
    for (agent, (&a, mask)) in joint_action.iter().zip(available).enumerate() {
        if a >= spec.n_actions || !mask[a] {
            return Err(Error::Env(format!("agent {agent}: action {a} is not available")));
        }
    }
    Ok(())
}

pub(crate) fn one_hot(len: usize, index: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    if index < len {
        v[index] = 1.0;
    }
    v
}

/// Upper limit on the number of open-loop joint-action sequences searched by
/// [`optimal_return`].
pub const SEARCH_LIMIT: u128 = 1_000_000;

/// Exact maximum undiscounted return over open-loop joint-action sequences,
/// found by exhaustive depth-first search from a reset drawn with `rng`.
pub fn optimal_return(env: &dyn Environment, rng: &mut SimRng) -> Result<f64> {
    let spec = env.spec();
    if !env.deterministic() {
        return Err(Error::Env("exhaustive search needs deterministic dynamics".into()));
    }
    let joint = (spec.n_actions as u128).checked_pow(spec.n_agents as u32);
    let size = joint.and_then(|j| j.checked_pow(spec.episode_limit as u32));
    match size {
        Some(size) if size <= SEARCH_LIMIT => {}
        other => {
            return Err(Error::SearchTooLarge {
                size: other.unwrap_or(u128::MAX),
                limit: SEARCH_LIMIT,
            })
        }
    }
    let mut root = env.boxed_clone();
    let first = root.reset(rng);
    search(root.as_ref(), &first)
}

fn search(env: &dyn Environment, at: &StepResult) -> Result<f64> {
    if at.terminal {
        return Ok(0.0);
    }
    let spec = env.spec();
    let mut best = f64::NEG_INFINITY;
    for joint in joint_actions(spec.n_agents, spec.n_actions) {
        let legal = joint.iter().zip(&at.available_actions).all(|(&a, mask)| mask[a]);
        if !legal {
            continue;
        }
        let mut child = env.boxed_clone();
        let next = child.step(&joint)?;
        best = best.max(next.reward + search(child.as_ref(), &next)?);
    }
    Ok(best)
}

/// All joint actions in lexicographic order (agent 0 most significant).
pub fn joint_actions(n_agents: usize, n_actions: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = n_actions.pow(n_agents as u32);
    (0..total).map(move |mut code| {
        let mut joint = vec![0; n_agents];
        for slot in joint.iter_mut().rev() {
            *slot = code % n_actions;
            code /= n_actions;
        }
        joint
    })
}
