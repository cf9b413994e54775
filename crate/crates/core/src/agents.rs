//! Decentralized per-agent recurrent Q-networks and epsilon-greedy action
//! selection.
//!
//! One parameter set is shared by every agent; agents are told apart by the
//! one-hot id appended to their input. The input row of agent `i` is
//! `[observation | one-hot previous action | one-hot i]`, where the previous
//! action block is all zeros on the first step.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::tensor::{gemm, Graph, GruCell, GruWeights, Initializer, ParamSet, Tensor, Var};

/// Shapes of the shared agent network: `fc(in -> hidden) + relu`, GRU,
/// `fc(hidden -> n_actions)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgentNet {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub n_agents: usize,
    pub hidden_dim: usize,
}

/// Per-agent recurrent state.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState(pub Vec<f64>);

impl HiddenState {
    pub fn zeros(hidden_dim: usize) -> Self {
        Self(vec![0.0; hidden_dim])
    }
}

/// Graph handles for the agent parameters, in [`AgentNet::init_params`] order.
#[derive(Clone, Copy, Debug)]
pub struct AgentVars {
    fc1_w: Var,
    fc1_b: Var,
    gru: GruWeights,
    fc2_w: Var,
    fc2_b: Var,
}

impl AgentVars {
    pub fn from_bound(vars: &[Var]) -> Result<Self> {
        if vars.len() != 8 {
            return Err(Error::invalid(format!("agent net has 8 tensors, got {}", vars.len())));
        }
        Ok(Self {
            fc1_w: vars[0],
            fc1_b: vars[1],
            gru: GruWeights {
                w_input: vars[2],
                b_input: vars[3],
                w_hidden: vars[4],
                b_hidden: vars[5],
            },
            fc2_w: vars[6],
            fc2_b: vars[7],
        })
    }
}

impl AgentNet {
    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.n_actions + self.n_agents
    }

    fn gru(&self) -> GruCell {
        GruCell::new(self.hidden_dim, self.hidden_dim)
    }

    pub fn init_params(&self, rng: &mut SimRng) -> ParamSet {
        let (inp, hid, act) = (self.input_dim(), self.hidden_dim, self.n_actions);
        let mut p = ParamSet::new();
        let mut init = Initializer::new(rng);
        p.push("fc1.w", init.uniform(&[inp, hid], inp));
        p.push("fc1.b", init.uniform(&[1, hid], inp));
        self.gru().init_params("gru", &mut p, rng);
        let mut init = Initializer::new(rng);
        p.push("fc2.w", init.uniform(&[hid, act], hid));
        p.push("fc2.b", init.uniform(&[1, act], hid));
        p
    }

    /// Assembles one input row.
    pub fn input_row(&self, obs: &[f64], prev_action: Option<usize>, agent: usize) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.input_dim());
        row.extend_from_slice(obs);
        let mut act = vec![0.0; self.n_actions];
        if let Some(a) = prev_action {
            act[a] = 1.0;
        }
        row.extend(act);
        let mut id = vec![0.0; self.n_agents];
        id[agent] = 1.0;
        row.extend(id);
        row
    }

    /// Batched differentiable forward: `inputs` is `[rows, input_dim]`,
    /// `h` is `[rows, hidden]`. Returns `(q [rows, n_actions], h')`.
    pub fn forward(&self, g: &mut Graph, w: &AgentVars, inputs: Var, h: Var) -> Result<(Var, Var)> {
        let (_, cols) = g
            .value(inputs)
            .dims2()
            .ok_or_else(|| Error::shape("agent_q_forward", &[g.shape(inputs)]))?;
        if cols != self.input_dim() {
            return Err(Error::shape("agent_q_forward", &[g.shape(inputs), g.shape(w.fc1_w)]));
        }
        let x = g.linear(inputs, w.fc1_w, w.fc1_b)?;
        let x = g.relu(x)?;
        let h_next = self.gru().forward(g, &w.gru, x, h)?;
        let q = g.linear(h_next, w.fc2_w, w.fc2_b)?;
        Ok((q, h_next))
    }

    /// Graph-free batched forward over raw buffers: `inputs` is row-major
    /// `[rows, input_dim]`, `h` is `[rows, hidden]`. Returns `(q, h')` as flat
    /// row-major buffers. Numerically the same computation as
    /// [`AgentNet::forward`].
    pub fn infer(&self, params: &ParamSet, inputs: &[f64], h: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (inp, hd, act) = (self.input_dim(), self.hidden_dim, self.n_actions);
        if !inputs.len().is_multiple_of(inp) || params.len() != 8 {
            return Err(Error::shape("agent_q_forward", &[&[inputs.len()], &[inp]]));
        }
        let rows = inputs.len() / inp;
        if h.len() != rows * hd {
            return Err(Error::shape("agent_q_forward", &[&[h.len()], &[rows, hd]]));
        }
        let t = params.tensors();
        check(&t[0], &[inp, hd])?;
        check(&t[6], &[hd, act])?;

        let mut x = affine(rows, inp, hd, inputs, &t[0], &t[1]);
        x.iter_mut().for_each(|v| *v = v.max(0.0));
        let gx = affine(rows, hd, 3 * hd, &x, &t[2], &t[3]);
        let gh = affine(rows, hd, 3 * hd, h, &t[4], &t[5]);
        let mut h_next = vec![0.0; rows * hd];
        for i in 0..rows {
            let (gx, gh) = (&gx[i * 3 * hd..(i + 1) * 3 * hd], &gh[i * 3 * hd..(i + 1) * 3 * hd]);
            for j in 0..hd {
                let r = crate::tensor::sigmoid(gx[j] + gh[j]);
                let z = crate::tensor::sigmoid(gx[hd + j] + gh[hd + j]);
                let n = (gx[2 * hd + j] + r * gh[2 * hd + j]).tanh();
                h_next[i * hd + j] = n + z * (h[i * hd + j] - n);
            }
        }
        let q = affine(rows, hd, act, &h_next, &t[6], &t[7]);
        if q.iter().chain(&h_next).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "agent_q_forward" });
        }
        Ok((q, h_next))
    }
}

fn check(t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() == shape {
        Ok(())
    } else {
        Err(Error::shape("agent_q_forward", &[t.shape(), shape]))
    }
}

/// `x W + b` for row-major `x [rows, k]`.
pub(crate) fn affine(rows: usize, k: usize, n: usize, x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut out = b.data().repeat(rows);
    gemm(rows, k, n, x, false, w.data(), false, &mut out, true);
    out
}

/// Single-agent forward pass.
pub fn agent_q_forward(
    net: &AgentNet,
    params: &ParamSet,
    obs: &[f64],
    prev_action: Option<usize>,
    agent: usize,
    h: &HiddenState,
) -> Result<(Vec<f64>, HiddenState)> {
    if obs.len() != net.obs_dim || agent >= net.n_agents || h.0.len() != net.hidden_dim {
        return Err(Error::shape(
            "agent_q_forward",
            &[
                &[obs.len(), agent, h.0.len()],
                &[net.obs_dim, net.n_agents, net.hidden_dim],
            ],
        ));
    }
    if prev_action.is_some_and(|a| a >= net.n_actions) {
        return Err(Error::invalid("previous action out of range"));
    }
    let row = net.input_row(obs, prev_action, agent);
    let (q, h) = net.infer(params, &row, &h.0)?;
    Ok((q, HiddenState(h)))
}

/// Index of the largest available entry; ties go to the lowest index.
pub fn masked_argmax(q: &[f64], available: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (a, (&v, &ok)) in q.iter().zip(available).enumerate() {
        if ok && best.is_none_or(|b| v > q[b]) {
            best = Some(a);
        }
    }
    best
}

/// Epsilon-greedy choice among available actions. One uniform draw decides
/// between exploring and exploiting; exploring draws one more index.
pub fn select_action(q: &[f64], available: &[bool], epsilon: f64, rng: &mut SimRng) -> Result<usize> {
    if q.len() != available.len() {
        return Err(Error::shape("select_action", &[&[q.len()], &[available.len()]]));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let n_avail = available.iter().filter(|&&a| a).count();
    if n_avail == 0 {
        return Err(Error::invalid("no available action"));
    }
    if rng.gen::<f64>() < epsilon {
        let pick = rng.gen_range(0..n_avail);
        Ok(available
            .iter()
            .enumerate()
            .filter(|(_, &ok)| ok)
            .nth(pick)
            .map(|(a, _)| a)
            .expect("pick < n_avail"))
    } else {
        Ok(masked_argmax(q, available).expect("mask has an available action"))
    }
}

/// Behaviour probabilities of [`select_action`] for one agent.
pub fn epsilon_greedy_probs(q: &[f64], available: &[bool], epsilon: f64) -> Vec<f64> {
    let n_avail = available.iter().filter(|&&a| a).count();
    let mut p = vec![0.0; q.len()];
    if n_avail == 0 {
        return p;
    }
    for (pi, &ok) in p.iter_mut().zip(available) {
        if ok {
            *pi = epsilon / n_avail as f64;
        }
    }
    if let Some(best) = masked_argmax(q, available) {
        p[best] += 1.0 - epsilon;
    }
    p
}

/// Linear annealing from `start` to `end` over `anneal_steps`, flat after.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.05,
            anneal_steps: 50_000,
        }
    }
}

impl EpsilonSchedule {
    pub fn value(&self, t: u64) -> f64 {
        if self.anneal_steps == 0 || t >= self.anneal_steps {
            return self.end;
        }
        let frac = t as f64 / self.anneal_steps as f64;
        self.start + (self.end - self.start) * frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn net() -> AgentNet {
        AgentNet {
            obs_dim: 4,
            n_actions: 3,
            n_agents: 2,
            hidden_dim: 8,
        }
    }

    #[test]
    fn zero_weights_tie_and_zero_state() {
        let n = net();
        let mut p = n.init_params(&mut rng::stream(0, 0));
        p.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
        let (q, h) = agent_q_forward(&n, &p, &[1.0, 0.0, 2.0, 0.0], None, 1, &HiddenState::zeros(8)).unwrap();
        assert!(q.iter().all(|&v| v == q[0]));
        assert_eq!(h, HiddenState::zeros(8));
    }

    #[test]
    fn forward_is_pure_and_matches_graph_path() {
        let n = net();
        let p = n.init_params(&mut rng::stream(3, 0));
        let obs = [0.5, -1.0, 0.25, 2.0];
        let h0 = HiddenState((0..8).map(|i| i as f64 * 0.1 - 0.4).collect());
        let a = agent_q_forward(&n, &p, &obs, Some(2), 0, &h0).unwrap();
        let b = agent_q_forward(&n, &p, &obs, Some(2), 0, &h0).unwrap();
        assert_eq!(a, b);

        let mut g = Graph::new();
        let vars = AgentVars::from_bound(&p.bind(&mut g, true).unwrap()).unwrap();
        let x = g.constant(Tensor::row(&n.input_row(&obs, Some(2), 0))).unwrap();
        let h = g.constant(Tensor::row(&h0.0)).unwrap();
        let (q, h1) = n.forward(&mut g, &vars, x, h).unwrap();
        for (x, y) in g.value(q).data().iter().zip(&a.0) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in g.value(h1).data().iter().zip(&a.1 .0) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let n = net();
        let p = n.init_params(&mut rng::stream(0, 0));
        assert!(agent_q_forward(&n, &p, &[1.0], None, 0, &HiddenState::zeros(8)).is_err());
        assert!(agent_q_forward(&n, &p, &[0.0; 4], None, 5, &HiddenState::zeros(8)).is_err());
    }

    #[test]
    fn greedy_selection_examples() {
        let mut r = rng::stream(0, 0);
        assert_eq!(select_action(&[1.0, 5.0, 3.0], &[true; 3], 0.0, &mut r).unwrap(), 1);
        assert_eq!(
            select_action(&[1.0, 5.0, 3.0], &[true, false, true], 0.0, &mut r).unwrap(),
            2
        );
        assert_eq!(select_action(&[2.0, 2.0, 2.0], &[true; 3], 0.0, &mut r).unwrap(), 0);
        assert!(select_action(&[1.0], &[false], 0.0, &mut r).is_err());
    }

    #[test]
    fn uniform_exploration_frequencies() {
        let mut r = rng::stream(11, 0);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[select_action(&[0.0, 9.0, 1.0], &[true, true, false], 1.0, &mut r).unwrap()] += 1;
        }
        assert_eq!(counts[2], 0);
        for c in &counts[..2] {
            assert!((*c as f64 / n as f64 - 0.5).abs() <= 0.01, "{counts:?}");
        }
    }

    #[test]
    fn schedule_examples() {
        let s = EpsilonSchedule::default();
        assert_eq!(s.value(0), 1.0);
        assert_eq!(s.value(50_000), 0.05);
        assert_eq!(s.value(80_000), 0.05);
        assert!((s.value(25_000) - 0.525).abs() < 1e-12);
    }

    #[test]
    fn behaviour_probs_sum_to_one() {
        let p = epsilon_greedy_probs(&[1.0, 3.0, 2.0], &[true, true, false], 0.2);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(p, vec![0.1, 0.9, 0.0]);
    }
}
