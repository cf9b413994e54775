//! Mixing functions that combine per-agent Q-values into the centralized
//! value `Q_tot(s, q_1..q_N)`.
//!
//! * `Identity` leaves the agents independent: one head per agent.
//! * `Additive` sums the agents.
//! * `MonotoneHypernet` is a two-layer network whose weights are generated
//!   from the global state. With `enforce_nonneg` the generated weights pass
//!   through `abs`, which makes `Q_tot` non-decreasing in every `q_i`.

use serde::{Deserialize, Serialize};

use crate::agents::affine;
use crate::env::joint_actions;
use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::tensor::{Graph, Initializer, ParamSet, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    Identity,
    Additive,
    MonotoneHypernet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixActivation {
    Elu,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mixer {
    pub kind: MixerKind,
    pub n_agents: usize,
    pub state_dim: usize,
    pub embed_dim: usize,
    pub enforce_nonneg: bool,
    pub activation: MixActivation,
}

// Parameter order for the hypernetwork.
const HW1_W: usize = 0;
const HW1_B: usize = 1;
const HB1_W: usize = 2;
const HB1_B: usize = 3;
const HW2_W: usize = 4;
const HW2_B: usize = 5;
const HV_W1: usize = 6;
const HV_B1: usize = 7;
const HV_W2: usize = 8;
const HV_B2: usize = 9;

impl Mixer {
    pub fn new(kind: MixerKind, n_agents: usize, state_dim: usize) -> Self {
        Self {
            kind,
            n_agents,
            state_dim,
            embed_dim: 32,
            enforce_nonneg: true,
            activation: MixActivation::Elu,
        }
    }

    /// Number of output columns: one per agent for `Identity`, else one.
    pub fn heads(&self) -> usize {
        match self.kind {
            MixerKind::Identity => self.n_agents,
            _ => 1,
        }
    }

    pub fn init_params(&self, rng: &mut SimRng) -> ParamSet {
        let mut p = ParamSet::new();
        if self.kind != MixerKind::MonotoneHypernet {
            return p;
        }
        let (s, e, n) = (self.state_dim, self.embed_dim, self.n_agents);
        let mut init = Initializer::new(rng);
        p.push("hyper_w1.w", init.uniform(&[s, n * e], s));
        p.push("hyper_w1.b", init.uniform(&[1, n * e], s));
        p.push("hyper_b1.w", init.uniform(&[s, e], s));
        p.push("hyper_b1.b", init.uniform(&[1, e], s));
        p.push("hyper_w2.w", init.uniform(&[s, e], s));
        p.push("hyper_w2.b", init.uniform(&[1, e], s));
        p.push("hyper_v.w1", init.uniform(&[s, e], s));
        p.push("hyper_v.b1", init.uniform(&[1, e], s));
        p.push("hyper_v.w2", init.uniform(&[e, 1], e));
        p.push("hyper_v.b2", init.uniform(&[1, 1], e));
        p
    }

    /// Differentiable mix of `q [rows, N]` given `state [rows, state_dim]`;
    /// returns `[rows, heads]`.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], q: Var, state: Var) -> Result<Var> {
        let (rows, n) = g.value(q).dims2().ok_or_else(|| Error::shape("mix", &[g.shape(q)]))?;
        if n != self.n_agents {
            return Err(Error::shape("mix", &[g.shape(q), &[rows, self.n_agents]]));
        }
        match self.kind {
            MixerKind::Identity => Ok(q),
            MixerKind::Additive => g.sum_axis(q, 1),
            MixerKind::MonotoneHypernet => {
                if g.shape(state) != [rows, self.state_dim] || vars.len() != 10 {
                    return Err(Error::shape("mix", &[g.shape(q), g.shape(state)]));
                }
                let e = self.embed_dim;
                let w1 = self.hyper(g, state, vars[HW1_W], vars[HW1_B], self.nonneg())?;
                let b1 = self.hyper(g, state, vars[HB1_W], vars[HB1_B], false)?;
                let mut pre = b1;
                for i in 0..n {
                    let qi = g.slice(q, 1, i, i + 1)?;
                    let qi = g.broadcast(qi, &[rows, e])?;
                    let wi = g.slice(w1, 1, i * e, (i + 1) * e)?;
                    let term = g.mul(qi, wi)?;
                    pre = g.add(pre, term)?;
                }
                let hidden = match self.activation {
                    MixActivation::Elu => g.elu(pre, 1.0)?,
                    MixActivation::Relu => g.relu(pre)?,
                };
                let w2 = self.hyper(g, state, vars[HW2_W], vars[HW2_B], self.nonneg())?;
                let v = self.hyper(g, state, vars[HV_W1], vars[HV_B1], false)?;
                let v = g.relu(v)?;
                let v = g.linear(v, vars[HV_W2], vars[HV_B2])?;
                let weighted = g.mul(hidden, w2)?;
                let out = g.sum_axis(weighted, 1)?;
                g.add(out, v)
            }
        }
    }

    fn nonneg(&self) -> bool {
        self.enforce_nonneg
    }

    fn hyper(&self, g: &mut Graph, state: Var, w: Var, b: Var, abs: bool) -> Result<Var> {
        let y = g.linear(state, w, b)?;
        if abs {
            g.abs(y)
        } else {
            Ok(y)
        }
    }

    /// Graph-free batched mix over row-major buffers `q [rows, N]` and
    /// `states [rows, state_dim]`; returns `[rows, heads]`.
    pub fn infer(&self, params: &ParamSet, q: &[f64], states: &[f64]) -> Result<Vec<f64>> {
        let n = self.n_agents;
        if n == 0 || !q.len().is_multiple_of(n) {
            return Err(Error::shape("mix", &[&[q.len()], &[n]]));
        }
        let rows = q.len() / n;
        match self.kind {
            MixerKind::Identity => Ok(q.to_vec()),
            MixerKind::Additive => Ok(q.chunks_exact(n).map(|r| r.iter().sum()).collect()),
            MixerKind::MonotoneHypernet => {
                let (s, e) = (self.state_dim, self.embed_dim);
                if states.len() != rows * s || params.len() != 10 {
                    return Err(Error::shape("mix", &[&[q.len()], &[states.len()]]));
                }
                let t = params.tensors();
                let mut w1 = affine(rows, s, n * e, states, &t[HW1_W], &t[HW1_B]);
                let b1 = affine(rows, s, e, states, &t[HB1_W], &t[HB1_B]);
                let mut w2 = affine(rows, s, e, states, &t[HW2_W], &t[HW2_B]);
                if self.enforce_nonneg {
                    w1.iter_mut().chain(w2.iter_mut()).for_each(|v| *v = v.abs());
                }
                let mut v1 = affine(rows, s, e, states, &t[HV_W1], &t[HV_B1]);
                v1.iter_mut().for_each(|v| *v = v.max(0.0));
                let v = affine(rows, e, 1, &v1, &t[HV_W2], &t[HV_B2]);
                let mut out = Vec::with_capacity(rows);
                for r in 0..rows {
                    let mut total = v[r];
                    for j in 0..e {
                        let mut pre = b1[r * e + j];
                        for i in 0..n {
                            pre += q[r * n + i] * w1[r * n * e + i * e + j];
                        }
                        let h = match self.activation {
                            MixActivation::Elu if pre <= 0.0 => pre.exp_m1(),
                            MixActivation::Relu => pre.max(0.0),
                            _ => pre,
                        };
                        total += h * w2[r * e + j];
                    }
                    out.push(total);
                }
                if out.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "mix" });
                }
                Ok(out)
            }
        }
    }

    /// Mix a single row of per-agent values.
    pub fn mix(&self, params: &ParamSet, q_agents: &[f64], state: &[f64]) -> Result<Vec<f64>> {
        if q_agents.len() != self.n_agents {
            return Err(Error::shape("mix", &[&[q_agents.len()], &[self.n_agents]]));
        }
        if self.kind == MixerKind::MonotoneHypernet && state.len() != self.state_dim {
            return Err(Error::shape("mix", &[&[state.len()], &[self.state_dim]]));
        }
        self.infer(params, q_agents, state)
    }

    /// [`greedy_decomposition_check`] for this mixer at one state. Only
    /// meaningful for single-head mixers.
    pub fn greedy_decomposition_check(
        &self,
        params: &ParamSet,
        tables: &[Vec<f64>],
        state: &[f64],
    ) -> Result<DecompositionCheck> {
        if self.heads() != 1 {
            return Err(Error::invalid("greedy decomposition needs a single-head mixer"));
        }
        greedy_decomposition_check(|q| Ok(self.mix(params, q, state)?[0]), tables)
    }
}

/// Outcome of comparing the brute-force joint maximum with the mixer value at
/// the per-agent greedy actions.
#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionCheck {
    pub holds: bool,
    /// Maximizing joint action found by enumeration.
    pub witness: Vec<usize>,
    pub brute_force_max: f64,
    pub greedy_value: f64,
}

/// Largest number of joint actions the brute-force checks will enumerate.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

fn enumeration_size(tables: &[Vec<f64>]) -> Result<usize> {
    let n_actions = tables.first().map(Vec::len).unwrap_or(0);
    if tables.is_empty() || n_actions == 0 || tables.iter().any(|t| t.len() != n_actions) {
        return Err(Error::invalid("per-agent tables must be non-empty and equal length"));
    }
    let size = (n_actions as u128).checked_pow(tables.len() as u32);
    match size {
        Some(s) if s <= ENUMERATION_LIMIT => Ok(n_actions),
        other => Err(Error::SearchTooLarge {
            size: other.unwrap_or(u128::MAX),
            limit: ENUMERATION_LIMIT,
        }),
    }
}

fn greedy_index(table: &[f64]) -> usize {
    crate::agents::masked_argmax(table, &vec![true; table.len()]).expect("non-empty table")
}

/// Checks `max_a f(q(a)) == f(q(argmax_1), ..., q(argmax_N))` by enumerating
/// every joint action. `tables[i][a]` is agent `i`'s value for action `a`.
pub fn greedy_decomposition_check<F>(f: F, tables: &[Vec<f64>]) -> Result<DecompositionCheck>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let n_actions = enumeration_size(tables)?;
    let mut best = f64::NEG_INFINITY;
    let mut witness = Vec::new();
    let mut q = vec![0.0; tables.len()];
    for joint in joint_actions(tables.len(), n_actions) {
        for (i, &a) in joint.iter().enumerate() {
            q[i] = tables[i][a];
        }
        let v = f(&q)?;
        if v > best {
            best = v;
            witness = joint;
        }
    }
    let greedy: Vec<f64> = tables.iter().map(|t| t[greedy_index(t)]).collect();
    let greedy_value = f(&greedy)?;
    Ok(DecompositionCheck {
        holds: (best - greedy_value).abs() <= 1e-9,
        witness,
        brute_force_max: best,
        greedy_value,
    })
}

/// Per-agent argmax consistency: for each agent `i`, the best value of
/// `max_{a_-i} f` over `a_i` is attained (to 1e-9) at `argmax_a Q_i`.
pub fn argmax_consistency_check<F>(f: F, tables: &[Vec<f64>]) -> Result<bool>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let n_actions = enumeration_size(tables)?;
    let n = tables.len();
    // best[i][a] = max over the other agents' actions with agent i fixed to a
    let mut best = vec![vec![f64::NEG_INFINITY; n_actions]; n];
    let mut q = vec![0.0; n];
    for joint in joint_actions(n, n_actions) {
        for (i, &a) in joint.iter().enumerate() {
            q[i] = tables[i][a];
        }
        let v = f(&q)?;
        for (i, &a) in joint.iter().enumerate() {
            if v > best[i][a] {
                best[i][a] = v;
            }
        }
    }
    Ok(tables.iter().zip(&best).all(|(t, b)| {
        let top = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (b[greedy_index(t)] - top).abs() <= 1e-9
    }))
}
