use crate::agents::AgentNet;
use crate::error::{Error, Result};
use crate::mixers::Mixer;
use crate::replay::Batch;
use crate::targets::{agent_bootstrap_value, compute_targets, AgentStep, BootstrapTable, ReturnTargetSpec};
use crate::tensor::{Graph, ParamSet, Tensor, Var};

/// Parameters of the agent network and the mixer.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub agent: ParamSet,
    pub mixer: ParamSet,
}

impl Network {
    /// All tensors, agent first.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.agent.tensors().iter().chain(self.mixer.tensors()).collect()
    }

    pub fn to_param_set(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.extend_prefixed("agent", &self.agent);
        p.extend_prefixed("mixer", &self.mixer);
        p
    }

    pub fn from_param_set(all: &ParamSet) -> Result<Self> {
        let mut agent = ParamSet::new();
        let mut mixer = ParamSet::new();
        for (name, t) in all.iter() {
            if let Some(rest) = name.strip_prefix("agent/") {
                agent.push(rest, t.clone());
            } else if let Some(rest) = name.strip_prefix("mixer/") {
                mixer.push(rest, t.clone());
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
            }
        }
        Ok(Self { agent, mixer })
    }
}

/// Online parameters `theta` and target parameters `theta_minus`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamPair {
    pub online: Network,
    pub target: Network,
}

impl ParamPair {
    pub fn new(online: Network) -> Self {
        Self {
            target: online.clone(),
            online,
        }
    }

    pub fn sync(&mut self) {
        self.target = self.online.clone();
    }
}

/// Everything the loss needs besides parameters and data.
#[derive(Clone, Copy, Debug)]
pub struct Learner {
    pub agent: AgentNet,
    pub mixer: Mixer,
    pub target: ReturnTargetSpec,
    pub gamma: f64,
}

/// The loss graph with handles to the online parameters it was built from.
pub struct LossGraph {
    pub graph: Graph,
    pub loss: Var,
    pub agent_vars: Vec<Var>,
    pub mixer_vars: Vec<Var>,
    /// Number of real `(step, head)` entries the loss averages over.
    pub entries: usize,
}

impl LossGraph {
    pub fn value(&self) -> f64 {
        self.graph.value(self.loss).item()
    }
}

/// Row-major agent inputs at step `t`, rows ordered agent-major: row
/// `i * B + b` is agent `i` of episode `b`.
fn step_inputs(net: &AgentNet, batch: &Batch, t: usize) -> Vec<f64> {
    let mut rows = Vec::with_capacity(net.n_agents * batch.len() * net.input_dim());
    for i in 0..net.n_agents {
        for ep in &batch.episodes {
            let prev = t.checked_sub(1).map(|p| ep.steps[p].actions[i]);
            rows.extend(net.input_row(&ep.steps[t].observations[i], prev, i));
        }
    }
    rows
}

fn check_batch(learner: &Learner, batch: &Batch) -> Result<()> {
    let (n, obs, a) = (learner.agent.n_agents, learner.agent.obs_dim, learner.agent.n_actions);
    for ep in &batch.episodes {
        if ep.padded_len() != batch.max_len || ep.filled.len() != batch.max_len {
            return Err(Error::shape("compute_loss", &[&[ep.padded_len()], &[batch.max_len]]));
        }
        for s in &ep.steps {
            let ok = s.actions.len() == n
                && s.observations.iter().all(|o| o.len() == obs)
                && s.available.iter().all(|m| m.len() == a)
                && s.actions.iter().all(|&x| x < a)
                && s.state.len() == learner.mixer.state_dim;
            if !ok {
                return Err(Error::shape(
                    "compute_loss",
                    &[&[s.actions.len(), s.state.len()], &[n, learner.mixer.state_dim]],
                ));
            }
        }
    }
    Ok(())
}

/// Return targets from the target parameters, indexed `[episode][head][t]`
/// over real steps only.
pub fn batch_targets(learner: &Learner, target: &Network, batch: &Batch) -> Result<Vec<Vec<Vec<f64>>>> {
    check_batch(learner, batch)?;
    let net = &learner.agent;
    let (n, a, b_len, len) = (net.n_agents, net.n_actions, batch.len(), batch.max_len);
    let heads = learner.mixer.heads();
    let mode = learner.target.effective_bootstrap();

    // Per-agent bootstrap values, rows (t, b), columns agents.
    let mut per_agent = vec![0.0; len * b_len * n];
    let mut states = Vec::with_capacity(len * b_len * learner.mixer.state_dim);
    let mut h = vec![0.0; n * b_len * net.hidden_dim];
    for t in 0..len {
        let (q, h_next) = net.infer(&target.agent, &step_inputs(net, batch, t), &h)?;
        h = h_next;
        for (b, ep) in batch.episodes.iter().enumerate() {
            let s = &ep.steps[t];
            states.extend_from_slice(&s.state);
            for i in 0..n {
                let row = i * b_len + b;
                let step = AgentStep {
                    q: &q[row * a..(row + 1) * a],
                    available: &s.available[i],
                    taken: s.actions[i],
                    behaviour_greedy: s.behaviour_greedy[i],
                    epsilon: ep.epsilon,
                };
                per_agent[(t * b_len + b) * n + i] = agent_bootstrap_value(&step, mode)?;
            }
        }
    }
    let mixed = learner.mixer.infer(&target.mixer, &per_agent, &states)?;

    let mut out = Vec::with_capacity(b_len);
    for (b, ep) in batch.episodes.iter().enumerate() {
        let rewards = ep.rewards();
        let per_head = (0..heads)
            .map(|hd| {
                let values = (0..rewards.len())
                    .map(|t| mixed[(t * b_len + b) * heads + hd])
                    .collect();
                compute_targets(
                    &learner.target,
                    &rewards,
                    &BootstrapTable::from_steps(values),
                    learner.gamma,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(per_head);
    }
    Ok(out)
}

/// Masked mean squared error between the online `Q_tot` at the stored
/// actions and fixed targets (`[episode][head][t]`).
pub fn loss_with_targets(
    learner: &Learner,
    online: &Network,
    batch: &Batch,
    targets: &[Vec<Vec<f64>>],
) -> Result<LossGraph> {
    check_batch(learner, batch)?;
    let net = &learner.agent;
    let (n, a, b_len, len) = (net.n_agents, net.n_actions, batch.len(), batch.max_len);
    let heads = learner.mixer.heads();
    if targets.len() != b_len {
        return Err(Error::shape("compute_loss", &[&[targets.len()], &[b_len]]));
    }
    for (ep, y) in batch.episodes.iter().zip(targets) {
        if y.len() != heads || y.iter().any(|row| row.len() != ep.len()) {
            return Err(Error::shape("compute_loss", &[&[y.len()], &[heads, ep.len()]]));
        }
    }

    let mut g = Graph::new();
    let agent_vars = online.agent.bind(&mut g, true)?;
    let mixer_vars = online.mixer.bind(&mut g, true)?;
    let w = crate::agents::AgentVars::from_bound(&agent_vars)?;
    let mut h = g.constant(Tensor::zeros(&[n * b_len, net.hidden_dim]))?;
    let mut q_tot = Vec::with_capacity(len);
    for t in 0..len {
        let inputs = g.constant(Tensor::new(
            vec![n * b_len, net.input_dim()],
            step_inputs(net, batch, t),
        )?)?;
        let (q, h_next) = net.forward(&mut g, &w, inputs, h)?;
        h = h_next;
        let mut mask = vec![0.0; n * b_len * a];
        for i in 0..n {
            for (b, ep) in batch.episodes.iter().enumerate() {
                mask[(i * b_len + b) * a + ep.steps[t].actions[i]] = 1.0;
            }
        }
        let mask = g.constant(Tensor::new(vec![n * b_len, a], mask)?)?;
        let picked = g.mul(q, mask)?;
        let picked = g.sum_axis(picked, 1)?;
        let cols = (0..n)
            .map(|i| g.slice(picked, 0, i * b_len, (i + 1) * b_len))
            .collect::<Result<Vec<_>>>()?;
        let q_taken = g.concat(&cols, 1)?;
        let states: Vec<f64> = batch
            .episodes
            .iter()
            .flat_map(|e| e.steps[t].state.iter().copied())
            .collect();
        let states = g.constant(Tensor::new(vec![b_len, learner.mixer.state_dim], states)?)?;
        q_tot.push(learner.mixer.forward(&mut g, &mixer_vars, q_taken, states)?);
    }

    let entries = batch.real_steps() * heads;
    let mut y = vec![0.0; len * b_len * heads];
    let mut weight = vec![0.0; len * b_len * heads];
    for (b, ep) in batch.episodes.iter().enumerate() {
        for t in 0..ep.len() {
            for hd in 0..heads {
                let k = (t * b_len + b) * heads + hd;
                y[k] = targets[b][hd][t];
                weight[k] = 1.0 / entries as f64;
            }
        }
    }
    let all = g.concat(&q_tot, 0)?;
    let y = g.constant(Tensor::new(vec![len * b_len, heads], y)?)?;
    let weight = g.constant(Tensor::new(vec![len * b_len, heads], weight)?)?;
    let se = g.squared_error(all, y)?;
    let se = g.mul(se, weight)?;
    let loss = g.sum(se)?;
    Ok(LossGraph {
        graph: g,
        loss,
        agent_vars,
        mixer_vars,
        entries,
    })
}

/// Targets from `params.target`, prediction from `params.online`. The target
/// parameters never enter the graph, so no gradient reaches them.
pub fn compute_loss(learner: &Learner, params: &ParamPair, batch: &Batch) -> Result<LossGraph> {
    let targets = batch_targets(learner, &params.target, batch)?;
    loss_with_targets(learner, &params.online, batch, &targets)
}
