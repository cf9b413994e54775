use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::updates::{exact_horizon, sample_trajectory, trajectory_correction, update, Expectation, UpdateKind};
use super::{random_epsilon_greedy_pair, PolicyPair, QTable, TabularMdp};
use crate::error::{Error, Result};
use crate::rng::{self, SimRng};

/// `Q^pi` from the linear system `(I - gamma P Pi) Q = r`.
pub fn q_pi(mdp: &TabularMdp, pi: &[Vec<f64>]) -> Result<QTable> {
    mdp.validate()?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let n = mdp.pairs();
    let mut m = DMatrix::<f64>::identity(n, n);
    for s in 0..ns {
        for a in 0..na {
            for s1 in 0..ns {
                let p = mdp.transitions[s][a][s1];
                if p == 0.0 {
                    continue;
                }
                for a1 in 0..na {
                    m[(s * na + a, s1 * na + a1)] -= mdp.gamma * p * pi[s1][a1];
                }
            }
        }
    }
    let r = DVector::from_iterator(n, mdp.rewards.iter().flatten().copied());
    let q = m
        .lu()
        .solve(&r)
        .ok_or_else(|| Error::invalid("Bellman system is singular"))?;
    Ok(QTable {
        n_states: ns,
        n_actions: na,
        values: q.iter().copied().collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateGapReport {
    /// `max |Q_smix' - Q_qlambda'|` after one exact update from the same table.
    pub lhs: f64,
    /// `eps_dist * gamma * M / (1 - lambda gamma)` with `M = max |Q_0|`.
    pub rhs: f64,
    pub holds: bool,
    pub eps_dist: f64,
}

pub fn update_gap_check(mdp: &TabularMdp, pol: &PolicyPair, lambda: f64, q0: &QTable) -> Result<UpdateGapReport> {
    let lg = lambda * mdp.gamma;
    if lg >= 1.0 {
        return Err(Error::invalid("lambda * gamma must be < 1"));
    }
    let smix = update(UpdateKind::Smix, q0, mdp, pol, lambda, 1.0, Expectation::Exact)?;
    let ql = update(UpdateKind::QLambda, q0, mdp, pol, lambda, 1.0, Expectation::Exact)?;
    let lhs = smix.max_diff(&ql);
    let eps_dist = pol.eps_dist();
    let rhs = eps_dist * mdp.gamma * q0.max_abs() / (1.0 - lg);
    Ok(UpdateGapReport {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-9,
        eps_dist,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateGapRow {
    pub instance_id: usize,
    pub eps_dist: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Random instances with at most 5 states and 3 actions, random
/// epsilon-greedy policy pairs, `gamma = 0.9`, each checked at every lambda.
pub fn update_gap_suite(seed: u64, instances: usize, lambdas: &[f64]) -> Result<Vec<UpdateGapRow>> {
    let gamma = 0.9;
    let mut rows = Vec::new();
    for id in 0..instances {
        let mut r = rng::stream(seed, id as u64);
        let ns = r.gen_range(1..=5);
        let na = r.gen_range(2..=3);
        let mdp = TabularMdp::random(ns, na, gamma, &mut r)?;
        let pol = random_epsilon_greedy_pair(ns, na, &mut r)?;
        let q0 = QTable::random(ns, na, 5.0, &mut r);
        for &lambda in lambdas {
            let rep = update_gap_check(&mdp, &pol, lambda, &q0)?;
            rows.push(UpdateGapRow {
                instance_id: id,
                eps_dist: rep.eps_dist,
                lambda,
                gamma,
                lhs: rep.lhs,
                rhs: rep.rhs,
                holds: rep.holds,
            });
        }
    }
    Ok(rows)
}

/// Robbins-Monro step sizes `alpha_n = 1 / (1 + n / tau)`, `n` counting
/// earlier updates of the same pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSizes {
    pub tau: f64,
}

impl Default for StepSizes {
    fn default() -> Self {
        Self { tau: 1000.0 }
    }
}

impl StepSizes {
    pub fn alpha(&self, n: u64) -> f64 {
        1.0 / (1.0 + n as f64 / self.tau)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub q_final: QTable,
    pub q_pi: QTable,
    pub max_err: f64,
    /// `max |Q_k - Q^pi|` after each exact sweep (empty in sampled mode).
    pub errors: Vec<f64>,
}

/// Iterates Q(lambda) policy evaluation from `q0` and compares with the
/// linear-solve `Q^pi`.
///
/// `sweeps = Some(n)`: up to `n` exact updates with `alpha = 1`, stopping
/// early once the table stops moving. `sweeps = None`: `updates` sampled
/// updates, each at a uniformly drawn start pair (exploring starts) with a
/// behaviour trajectory long enough for the truncated tail to be negligible.
#[allow(clippy::too_many_arguments)]
pub fn qlambda_convergence_check(
    mdp: &TabularMdp,
    pol: &PolicyPair,
    lambda: f64,
    q0: &QTable,
    sweeps: Option<usize>,
    updates: usize,
    steps: StepSizes,
    rng: &mut SimRng,
) -> Result<ConvergenceReport> {
    let eps = pol.eps_dist();
    let g = mdp.gamma;
    if g > 0.0 && lambda * eps >= (1.0 - g) / g {
        return Err(Error::Precondition(format!(
            "lambda * eps = {} is not below (1 - gamma) / gamma = {}",
            lambda * eps,
            (1.0 - g) / g
        )));
    }
    let target = q_pi(mdp, &pol.pi)?;
    let mut q = q0.clone();
    let mut errors = Vec::new();
    match sweeps {
        Some(n) => {
            for _ in 0..n {
                let next = update(UpdateKind::QLambda, &q, mdp, pol, lambda, 1.0, Expectation::Exact)?;
                let moved = next.max_diff(&q);
                q = next;
                errors.push(q.max_diff(&target));
                if moved < 1e-14 {
                    break;
                }
            }
        }
        None => {
            let scale = mdp.rewards.iter().flatten().fold(0.0, |m: f64, r| m.max(r.abs())) / (1.0 - g) + q0.max_abs();
            let horizon = exact_horizon(lambda * g, 2.0 * scale.max(1.0))?;
            let mut visits = vec![0u64; mdp.pairs()];
            for _ in 0..updates {
                let k = rng.gen_range(0..mdp.pairs());
                let start = (k / mdp.n_actions, k % mdp.n_actions);
                let traj = sample_trajectory(mdp, &pol.mu, start, horizon + 1, rng);
                let c = trajectory_correction(UpdateKind::QLambda, &q, mdp, pol, lambda, &traj);
                q.values[k] += steps.alpha(visits[k]) * c;
                visits[k] += 1;
            }
        }
    }
    let max_err = q.max_diff(&target);
    Ok(ConvergenceReport {
        q_final: q,
        q_pi: target,
        max_err,
        errors,
    })
}

/// One policy-evaluation case of [`policy_evaluation_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyEvaluationRow {
    pub case: String,
    /// `sampled`, `exact` or `is_fixed_point`.
    pub mode: &'static str,
    pub lambda: f64,
    pub gamma: f64,
    pub eps_dist: f64,
    pub max_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Sampled updates used per sampled-mode case.
pub const POLICY_EVALUATION_SAMPLED_UPDATES: usize = 100_000;

/// Q(lambda) policy evaluation against the linear-solve `Q^pi`:
/// sampled mode on 3-state deterministic chains (on- and off-policy),
/// exact mode on random stochastic 3-state MDPs, and the exact
/// importance-sampling update applied to `Q^pi` itself. Every policy pair
/// satisfies `lambda * eps < (1 - gamma) / gamma`.
pub fn policy_evaluation_suite(seed: u64, random_instances: usize) -> Result<Vec<PolicyEvaluationRow>> {
    let (gamma, lambda) = (0.9, 0.5);
    let steps = StepSizes::default();
    let mut rows = Vec::new();
    let mut push = |case: String, mode, pol: &PolicyPair, max_err: f64, tolerance: f64| {
        rows.push(PolicyEvaluationRow {
            case,
            mode,
            lambda,
            gamma,
            eps_dist: pol.eps_dist(),
            max_err,
            tolerance,
            passed: max_err <= tolerance,
        })
    };

    let mut r = rng::stream(seed, 0);
    let chain = TabularMdp::chain(3, 2, gamma, &mut r)?;
    let on = PolicyPair::same(super::uniform_policy(3, 2))?;
    let off = PolicyPair::new(
        super::epsilon_greedy_policy(&[0, 1, 0], 2, 0.1),
        super::epsilon_greedy_policy(&[0, 1, 0], 2, 0.2),
    )?;
    for (name, pol) in [("chain_on_policy", &on), ("chain_off_policy", &off)] {
        let rep = qlambda_convergence_check(
            &chain,
            pol,
            lambda,
            &QTable::zeros(3, 2),
            None,
            POLICY_EVALUATION_SAMPLED_UPDATES,
            steps,
            &mut r,
        )?;
        push(name.to_string(), "sampled", pol, rep.max_err, 1e-3);
    }

    for id in 0..random_instances {
        let mut r = rng::stream(seed, 1 + id as u64);
        let mdp = TabularMdp::random(3, 2, gamma, &mut r)?;
        let greedy: Vec<usize> = (0..3).map(|_| r.gen_range(0..2)).collect();
        let pi_eps = r.gen_range(0.05..0.5);
        let mu_eps = pi_eps + r.gen_range(0.0..0.2);
        let pol = PolicyPair::new(
            super::epsilon_greedy_policy(&greedy, 2, pi_eps),
            super::epsilon_greedy_policy(&greedy, 2, mu_eps),
        )?;
        let q0 = QTable::random(3, 2, 5.0, &mut r);
        let rep = qlambda_convergence_check(&mdp, &pol, lambda, &q0, Some(2000), 0, steps, &mut r)?;
        push(format!("random_{id}"), "exact", &pol, rep.max_err, 1e-6);

        let fixed = update(
            UpdateKind::ImportanceSampling,
            &rep.q_pi,
            &mdp,
            &pol,
            lambda,
            1.0,
            Expectation::Exact,
        )?;
        push(
            format!("random_{id}"),
            "is_fixed_point",
            &pol,
            fixed.max_diff(&rep.q_pi),
            1e-9,
        );
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceReport {
    pub is_mean: f64,
    pub is_variance: f64,
    pub smix_mean: f64,
    pub smix_variance: f64,
}

/// Sample mean and variance of the per-trajectory IS and SMIX targets
/// `Q(s, a) + correction` at one start pair.
#[allow(clippy::too_many_arguments)]
pub fn is_vs_smix_variance(
    mdp: &TabularMdp,
    pol: &PolicyPair,
    lambda: f64,
    q: &QTable,
    start: (usize, usize),
    transitions: usize,
    samples: usize,
    rng: &mut SimRng,
) -> Result<VarianceReport> {
    if samples < 2 {
        return Err(Error::invalid("variance needs at least two samples"));
    }
    let base = q.get(start.0, start.1);
    let mut is = Vec::with_capacity(samples);
    let mut smix = Vec::with_capacity(samples);
    for _ in 0..samples {
        let traj = sample_trajectory(mdp, &pol.mu, start, transitions, rng);
        is.push(base + trajectory_correction(UpdateKind::ImportanceSampling, q, mdp, pol, lambda, &traj));
        smix.push(base + trajectory_correction(UpdateKind::Smix, q, mdp, pol, lambda, &traj));
    }
    let stats = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (mean, var)
    };
    let (is_mean, is_variance) = stats(&is);
    let (smix_mean, smix_variance) = stats(&smix);
    Ok(VarianceReport {
        is_mean,
        is_variance,
        smix_mean,
        smix_variance,
    })
}
