use rand::Rng;

use super::{PolicyPair, QTable, TabularMdp};
use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Bound on the neglected tail of the exact series.
pub const TAIL_TOLERANCE: f64 = 1e-10;

const MAX_HORIZON: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateKind {
    Smix,
    QLambda,
    ImportanceSampling,
}

/// How the expectation over behaviour trajectories is evaluated.
#[derive(Clone, Copy, Debug)]
pub enum Expectation<'a> {
    /// Propagate the state-action distribution until the tail is negligible.
    Exact,
    /// Average over the given trajectories; each updates its start pair.
    Sampled(&'a [Trajectory]),
}

/// `states.len() == actions.len()`; the last pair is only used as the
/// bootstrap of the final transition.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

impl Trajectory {
    pub fn start(&self) -> (usize, usize) {
        (self.states[0], self.actions[0])
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn sample_index(p: &[f64], rng: &mut SimRng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&v| v > 0.0).unwrap_or(0)
}

/// Trajectory with `transitions` steps from `(s, a)`, actions drawn from
/// `behaviour`.
pub fn sample_trajectory(
    mdp: &TabularMdp,
    behaviour: &[Vec<f64>],
    start: (usize, usize),
    transitions: usize,
    rng: &mut SimRng,
) -> Trajectory {
    let (mut s, mut a) = start;
    let mut states = vec![s];
    let mut actions = vec![a];
    for _ in 0..transitions {
        s = sample_index(&mdp.transitions[s][a], rng);
        a = sample_index(&behaviour[s], rng);
        states.push(s);
        actions.push(a);
    }
    Trajectory { states, actions }
}

/// Smallest `H` with `(lambda gamma)^(H+1) / (1 - lambda gamma) * max_delta`
/// at most [`TAIL_TOLERANCE`].
pub fn exact_horizon(lambda_gamma: f64, max_delta: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&lambda_gamma) {
        return Err(Error::invalid(format!(
            "lambda * gamma = {lambda_gamma}: the series has no finite horizon"
        )));
    }
    let mut tail = lambda_gamma / (1.0 - lambda_gamma) * max_delta;
    let mut h = 0;
    while tail > TAIL_TOLERANCE {
        tail *= lambda_gamma;
        h += 1;
        if h > MAX_HORIZON {
            return Err(Error::invalid("horizon bound unreachable"));
        }
    }
    Ok(h)
}

/// Per-pair weights `w(s', a')` used for the bootstrap and for propagating
/// the trajectory distribution.
struct Weights {
    bootstrap: Vec<f64>,
    propagate: Vec<f64>,
}

fn weights(kind: UpdateKind, mdp: &TabularMdp, pol: &PolicyPair) -> Result<Weights> {
    let na = mdp.n_actions;
    let flat = |p: &[Vec<f64>]| p.concat();
    Ok(match kind {
        UpdateKind::Smix => Weights {
            bootstrap: flat(&pol.mu),
            propagate: flat(&pol.mu),
        },
        UpdateKind::QLambda => Weights {
            bootstrap: flat(&pol.pi),
            propagate: flat(&pol.mu),
        },
        UpdateKind::ImportanceSampling => {
            // mu * rho, with rho = pi / mu; zero where both vanish.
            let mut w = vec![0.0; mdp.pairs()];
            for s in 0..mdp.n_states {
                for a in 0..na {
                    let (p, m) = (pol.pi[s][a], pol.mu[s][a]);
                    if m > 0.0 {
                        w[s * na + a] = m * (p / m);
                    } else if p > 0.0 {
                        return Err(Error::Precondition(format!(
                            "pi({a}|{s}) > 0 but mu({a}|{s}) = 0: importance ratios undefined"
                        )));
                    }
                }
            }
            Weights {
                bootstrap: w.clone(),
                propagate: w,
            }
        }
    })
}

/// `sum_{s'} P(s'|s,a) sum_{a'} w(s',a') v(s',a')` for every pair.
fn expect_next(mdp: &TabularMdp, w: &[f64], v: &[f64]) -> Vec<f64> {
    let na = mdp.n_actions;
    let next: Vec<f64> = (0..mdp.n_states)
        .map(|s| (0..na).map(|a| w[s * na + a] * v[s * na + a]).sum())
        .collect();
    let mut out = Vec::with_capacity(mdp.pairs());
    for s in 0..mdp.n_states {
        for a in 0..na {
            out.push(mdp.transitions[s][a].iter().zip(&next).map(|(p, n)| p * n).sum());
        }
    }
    out
}

fn exact_correction(kind: UpdateKind, q: &QTable, mdp: &TabularMdp, pol: &PolicyPair, lambda: f64) -> Result<Vec<f64>> {
    let w = weights(kind, mdp, pol)?;
    let boot = expect_next(mdp, &w.bootstrap, &q.values);
    let delta: Vec<f64> = (0..mdp.pairs())
        .map(|k| mdp.rewards[k / mdp.n_actions][k % mdp.n_actions] + mdp.gamma * boot[k] - q.values[k])
        .collect();
    let lg = lambda * mdp.gamma;
    let max_delta = delta.iter().fold(0.0, |m: f64, d| m.max(d.abs()));
    let horizon = exact_horizon(lg, max_delta)?;
    // sum_k (lg M)^k delta, M the pair-to-pair propagation under `w`.
    let mut term = delta.clone();
    let mut total = delta;
    for _ in 0..horizon {
        term = expect_next(mdp, &w.propagate, &term);
        for (t, acc) in term.iter_mut().zip(total.iter_mut()) {
            *t *= lg;
            *acc += *t;
        }
    }
    Ok(total)
}

pub(crate) fn trajectory_correction(
    kind: UpdateKind,
    q: &QTable,
    mdp: &TabularMdp,
    pol: &PolicyPair,
    lambda: f64,
    traj: &Trajectory,
) -> f64 {
    let lg = lambda * mdp.gamma;
    let mut total = 0.0;
    let mut weight = 1.0;
    for k in 0..traj.len() {
        let (s, a) = (traj.states[k], traj.actions[k]);
        let (s1, a1) = (traj.states[k + 1], traj.actions[k + 1]);
        let bootstrap = match kind {
            UpdateKind::Smix => q.expected(s1, &pol.mu[s1]),
            UpdateKind::QLambda => q.expected(s1, &pol.pi[s1]),
            UpdateKind::ImportanceSampling => pol.pi[s1][a1] / pol.mu[s1][a1] * q.get(s1, a1),
        };
        let delta = mdp.rewards[s][a] + mdp.gamma * bootstrap - q.get(s, a);
        total += weight * delta;
        weight *= lg;
        if kind == UpdateKind::ImportanceSampling {
            weight *= pol.pi[s1][a1] / pol.mu[s1][a1];
        }
    }
    total
}

pub(crate) fn update(
    kind: UpdateKind,
    q: &QTable,
    mdp: &TabularMdp,
    pol: &PolicyPair,
    lambda: f64,
    alpha: f64,
    how: Expectation<'_>,
) -> Result<QTable> {
    mdp.validate()?;
    pol.check_fits(mdp)?;
    q.check_fits(mdp)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut out = q.clone();
    match how {
        Expectation::Exact => {
            let c = exact_correction(kind, q, mdp, pol, lambda)?;
            for (v, c) in out.values.iter_mut().zip(c) {
                *v += alpha * c;
            }
        }
        Expectation::Sampled(trajs) => {
            if kind == UpdateKind::ImportanceSampling {
                weights(kind, mdp, pol)?;
            }
            let mut sums = vec![0.0; mdp.pairs()];
            let mut counts = vec![0usize; mdp.pairs()];
            for t in trajs {
                let ok = t.states.len() == t.actions.len()
                    && !t.states.is_empty()
                    && t.states.iter().all(|&s| s < mdp.n_states)
                    && t.actions.iter().all(|&a| a < mdp.n_actions);
                if !ok {
                    return Err(Error::invalid("malformed trajectory"));
                }
                let (s, a) = t.start();
                sums[s * mdp.n_actions + a] += trajectory_correction(kind, q, mdp, pol, lambda, t);
                counts[s * mdp.n_actions + a] += 1;
            }
            for ((v, s), n) in out.values.iter_mut().zip(sums).zip(counts) {
                if n > 0 {
                    *v += alpha * s / n as f64;
                }
            }
        }
    }
    Ok(out)
}

/// SMIX(lambda): unit trace weights, TD errors bootstrapped with `E_mu Q`.
pub fn smix_update(
    q: &QTable,
    mdp: &TabularMdp,
    pol: &PolicyPair,
    lambda: f64,
    alpha: f64,
    how: Expectation<'_>,
) -> Result<QTable> {
    update(UpdateKind::Smix, q, mdp, pol, lambda, alpha, how)
}

/// Q(lambda): unit trace weights, TD errors bootstrapped with `E_pi Q`.
pub fn qlambda_update(
    q: &QTable,
    mdp: &TabularMdp,
    pol: &PolicyPair,
    lambda: f64,
    alpha: f64,
    how: Expectation<'_>,
) -> Result<QTable> {
    update(UpdateKind::QLambda, q, mdp, pol, lambda, alpha, how)
}

/// Per-decision importance sampling with product ratios.
pub fn is_update_with_product_ratios(
    q: &QTable,
    mdp: &TabularMdp,
    pol: &PolicyPair,
    lambda: f64,
    alpha: f64,
    how: Expectation<'_>,
) -> Result<QTable> {
    update(UpdateKind::ImportanceSampling, q, mdp, pol, lambda, alpha, how)
}
