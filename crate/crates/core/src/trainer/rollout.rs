use crate::agents::{masked_argmax, select_action, AgentNet};
use crate::env::{optimal_return, Environment};
use crate::error::{Error, Result};
use crate::replay::{Episode, Step};
use crate::rng::SimRng;
use crate::tensor::ParamSet;

/// Plays one epsilon-greedy episode with a frozen parameter snapshot.
/// Hidden states start at zero and are threaded through the steps.
pub fn rollout_episode(
    env: &mut dyn Environment,
    net: &AgentNet,
    params: &ParamSet,
    epsilon: f64,
    rng: &mut SimRng,
) -> Result<Episode> {
    let n = net.n_agents;
    let a = net.n_actions;
    let limit = env.spec().episode_limit;
    let mut obs = env.reset(rng);
    let mut h = vec![0.0; n * net.hidden_dim];
    let mut prev: Option<Vec<usize>> = None;
    let mut steps = Vec::new();
    loop {
        let inputs: Vec<f64> = (0..n)
            .flat_map(|i| net.input_row(&obs.observations[i], prev.as_ref().map(|p| p[i]), i))
            .collect();
        let (q, h_next) = net.infer(params, &inputs, &h)?;
        h = h_next;
        let mut actions = Vec::with_capacity(n);
        let mut greedy = Vec::with_capacity(n);
        for i in 0..n {
            let qi = &q[i * a..(i + 1) * a];
            let avail = &obs.available_actions[i];
            greedy.push(
                masked_argmax(qi, avail).ok_or_else(|| Error::Env(format!("agent {i} has no available action")))?,
            );
            actions.push(select_action(qi, avail, epsilon, rng)?);
        }
        let next = env.step(&actions)?;
        steps.push(Step {
            state: obs.state,
            observations: obs.observations,
            actions: actions.clone(),
            available: obs.available_actions,
            reward: next.reward,
            terminal: next.terminal,
            behaviour_greedy: greedy,
        });
        if next.terminal {
            break;
        }
        if steps.len() >= limit {
            return Err(Error::Env(format!("episode did not terminate within {limit} steps")));
        }
        prev = Some(actions);
        obs = next;
    }
    Episode::new(steps, epsilon)
}

/// Aggregate of greedy evaluation episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalStats {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    /// Median return reached the exhaustive-search optimum. False when the
    /// optimum cannot be computed.
    pub success: bool,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Runs `n_episodes` with epsilon = 0.
pub fn evaluate_greedy(
    env: &mut dyn Environment,
    net: &AgentNet,
    params: &ParamSet,
    n_episodes: usize,
    rng: &mut SimRng,
) -> Result<EvalStats> {
    if n_episodes == 0 {
        return Err(Error::invalid("evaluation needs at least one episode"));
    }
    let returns = (0..n_episodes)
        .map(|_| rollout_episode(env, net, params, 0.0, rng).map(|e| e.total_reward()))
        .collect::<Result<Vec<_>>>()?;
    let mean = returns.iter().sum::<f64>() / n_episodes as f64;
    let median = median(&returns);
    let success = optimal_return(env, &mut rng.clone()).is_ok_and(|best| median >= best - 1e-9);
    Ok(EvalStats {
        returns,
        mean,
        median,
        success,
    })
}
