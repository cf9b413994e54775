#![allow(dead_code)]

use rand::Rng;
use smix_core::agents::{AgentNet, AgentVars};
use smix_core::env::{Environment, MStepGame};
use smix_core::mixers::{MixActivation, Mixer, MixerKind};
use smix_core::replay::{Batch, Episode, Step};
use smix_core::rng::{self, SimRng};
use smix_core::targets::ReturnTargetSpec;
use smix_core::tensor::{Graph, ParamSet, Tensor, Var};
use smix_core::trainer::{loss_with_targets, rollout_episode, Learner, Network};
use smix_core::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error. Central differences at
/// `FD_STEP` carry roughly 1e-10 of absolute roundoff, which would swamp the
/// relative error of gradients much smaller than this.
pub const REL_FLOOR: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut SimRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Largest relative error between backprop and central differences of the
/// scalar `build(graph, leaves)` with respect to `coords` randomly chosen
/// entries of each leaf (all entries when the leaf is smaller).
pub fn max_grad_error<F>(leaves: &[Tensor], coords: usize, rng: &mut SimRng, build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone()).unwrap()).collect();
        let root = build(&mut g, &vars).unwrap();
        g.value(root).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let root = build(&mut g, &vars).unwrap();
    g.backward(root).unwrap();

    let mut worst: f64 = 0.0;
    let mut work = leaves.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let n = leaves[k].numel();
        let analytic = g.grad(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let picks: Vec<usize> = if n <= coords {
            (0..n).collect()
        } else {
            (0..coords).map(|_| rng.gen_range(0..n)).collect()
        };
        for j in picks {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work);
            work[k].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work);
            work[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Weighted sum `sum(x * c)` with a fixed random `c`, used to reduce a
/// tensor output to a scalar with a non-trivial upstream gradient.
pub fn weighted_sum(g: &mut Graph, x: Var, c: &Tensor) -> Result<Var> {
    let c = g.constant(c.clone())?;
    let y = g.mul(x, c)?;
    g.sum(y)
}

/// Small agent net and a two-step recurrent forward over random inputs.
pub fn agent_instance(seed: u64) -> (AgentNet, Vec<Tensor>, Vec<Tensor>, Tensor) {
    let mut r = rng::stream(seed, 11);
    let net = AgentNet {
        obs_dim: 3,
        n_actions: 3,
        n_agents: 2,
        hidden_dim: 5,
    };
    let params = net.init_params(&mut r).tensors().to_vec();
    let rows = 4;
    let inputs = (0..2)
        .map(|_| random_tensor(&[rows, net.input_dim()], 1.0, &mut r))
        .collect();
    let c = random_tensor(&[rows, net.n_actions], 1.0, &mut r);
    (net, params, inputs, c)
}

pub fn agent_grad_error(seed: u64) -> f64 {
    let (net, params, inputs, c) = agent_instance(seed);
    let mut r = rng::stream(seed, 12);
    max_grad_error(&params, 12, &mut r, |g, vars| {
        let w = AgentVars::from_bound(vars)?;
        let mut h = g.constant(Tensor::zeros(&[4, net.hidden_dim]))?;
        let mut total = None;
        for x in &inputs {
            let x = g.constant(x.clone())?;
            let (q, h_next) = net.forward(g, &w, x, h)?;
            h = h_next;
            let s = weighted_sum(g, q, &c)?;
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
        Ok(total.unwrap())
    })
}

/// Mixer variants covered by the gradient checks.
pub fn mixer_variants() -> Vec<(&'static str, Mixer)> {
    let base = |kind| Mixer {
        embed_dim: 6,
        ..Mixer::new(kind, 3, 4)
    };
    vec![
        ("identity", base(MixerKind::Identity)),
        ("additive", base(MixerKind::Additive)),
        ("monotone_hypernet", base(MixerKind::MonotoneHypernet)),
        (
            "monotone_hypernet_noabs",
            Mixer {
                enforce_nonneg: false,
                ..base(MixerKind::MonotoneHypernet)
            },
        ),
        (
            "monotone_hypernet_relu",
            Mixer {
                activation: MixActivation::Relu,
                ..base(MixerKind::MonotoneHypernet)
            },
        ),
    ]
}

/// Gradient of a weighted mixer output with respect to the agent values and
/// every mixer parameter.
pub fn mixer_grad_error(mixer: &Mixer, seed: u64) -> f64 {
    let mut r = rng::stream(seed, 21);
    let rows = 5;
    let mut leaves = vec![random_tensor(&[rows, mixer.n_agents], 2.0, &mut r)];
    leaves.extend(mixer.init_params(&mut r).tensors().iter().cloned());
    let state = random_tensor(&[rows, mixer.state_dim], 1.0, &mut r);
    let c = random_tensor(&[rows, mixer.heads()], 1.0, &mut r);
    max_grad_error(&leaves, 10, &mut r, |g, vars| {
        let s = g.constant(state.clone())?;
        let out = mixer.forward(g, &vars[1..], vars[0], s)?;
        weighted_sum(g, out, &c)
    })
}

/// Learner over the m-step game with a small agent net.
pub fn small_learner(kind: MixerKind, target: ReturnTargetSpec, m: usize) -> (Learner, MStepGame) {
    let env = MStepGame::new(m).unwrap();
    let spec = env.spec().clone();
    let learner = Learner {
        agent: AgentNet {
            obs_dim: spec.obs_dim,
            n_actions: spec.n_actions,
            n_agents: spec.n_agents,
            hidden_dim: 6,
        },
        mixer: Mixer {
            embed_dim: 5,
            ..Mixer::new(kind, spec.n_agents, spec.state_dim)
        },
        target,
        gamma: 0.9,
    };
    (learner, env)
}

pub fn random_network(learner: &Learner, rng: &mut SimRng) -> Network {
    Network {
        agent: learner.agent.init_params(rng),
        mixer: learner.mixer.init_params(rng),
    }
}

/// Episodes from uniformly random play (the network's values are ignored at
/// epsilon 1).
pub fn random_batch(learner: &Learner, env: &mut dyn Environment, n: usize, rng: &mut SimRng) -> Batch {
    let params = learner.agent.init_params(rng);
    let episodes: Vec<Episode> = (0..n)
        .map(|_| rollout_episode(env, &learner.agent, &params, 1.0, rng).unwrap())
        .collect();
    Batch::new(&episodes).unwrap()
}

/// Gradient of the full loss with respect to every online parameter, with
/// targets held fixed.
pub fn loss_grad_error(kind: MixerKind, seed: u64) -> f64 {
    let mut r = rng::stream(seed, 31);
    let (learner, mut env) = small_learner(kind, ReturnTargetSpec::default(), 4);
    let batch = random_batch(&learner, &mut env, 3, &mut r);
    let online = random_network(&learner, &mut r);
    let heads = learner.mixer.heads();
    let targets: Vec<Vec<Vec<f64>>> = batch
        .episodes
        .iter()
        .map(|e| {
            (0..heads)
                .map(|_| (0..e.len()).map(|_| r.gen_range(-2.0..4.0)).collect())
                .collect()
        })
        .collect();
    let value = |net: &Network| loss_with_targets(&learner, net, &batch, &targets).unwrap().value();

    let lg = loss_with_targets(&learner, &online, &batch, &targets).unwrap();
    let mut graph = lg.graph;
    graph.backward(lg.loss).unwrap();
    let agent_grads = online.agent.grads(&graph, &lg.agent_vars);
    let mixer_grads = online.mixer.grads(&graph, &lg.mixer_vars);

    let mut worst: f64 = 0.0;
    let mut work = online.clone();
    for (is_agent, grads) in [(true, &agent_grads), (false, &mixer_grads)] {
        for (k, grad) in grads.iter().enumerate() {
            for _ in 0..6 {
                let j = r.gen_range(0..grad.numel());
                let set = |net: &mut Network, v: f64| {
                    let ps = if is_agent { &mut net.agent } else { &mut net.mixer };
                    ps.tensors_mut()[k].data_mut()[j] = v;
                };
                let orig = if is_agent { &online.agent } else { &online.mixer }.tensors()[k].data()[j];
                set(&mut work, orig + FD_STEP);
                let up = value(&work);
                set(&mut work, orig - FD_STEP);
                let down = value(&work);
                set(&mut work, orig);
                worst = worst.max(rel_err(grad.data()[j], (up - down) / (2.0 * FD_STEP)));
            }
        }
    }
    worst
}

/// Hand-written monotone hypernetwork mix of one row, straight from the
/// parameter tensors (no graph, no shared code with the mixer).
pub fn hand_hypernet_mix(mixer: &Mixer, params: &ParamSet, q: &[f64], state: &[f64]) -> f64 {
    let get = |name: &str| params.get(name).unwrap();
    let lin = |w: &Tensor, b: &Tensor| -> Vec<f64> {
        let (rows, cols) = w.dims2().unwrap();
        (0..cols)
            .map(|j| b.data()[j] + (0..rows).map(|i| state[i] * w.at(i, j)).sum::<f64>())
            .collect()
    };
    let fix = |v: Vec<f64>| -> Vec<f64> {
        if mixer.enforce_nonneg {
            v.iter().map(|x| x.abs()).collect()
        } else {
            v
        }
    };
    let e = mixer.embed_dim;
    let w1 = fix(lin(get("hyper_w1.w"), get("hyper_w1.b")));
    let b1 = lin(get("hyper_b1.w"), get("hyper_b1.b"));
    let w2 = fix(lin(get("hyper_w2.w"), get("hyper_w2.b")));
    let v1: Vec<f64> = lin(get("hyper_v.w1"), get("hyper_v.b1"))
        .iter()
        .map(|x| x.max(0.0))
        .collect();
    let vw2 = get("hyper_v.w2");
    let v = get("hyper_v.b2").data()[0] + (0..e).map(|j| v1[j] * vw2.data()[j]).sum::<f64>();
    let mut total = v;
    for j in 0..e {
        let pre = b1[j] + (0..q.len()).map(|i| q[i] * w1[i * e + j]).sum::<f64>();
        let act = match mixer.activation {
            MixActivation::Elu => {
                if pre > 0.0 {
                    pre
                } else {
                    pre.exp() - 1.0
                }
            }
            MixActivation::Relu => pre.max(0.0),
        };
        total += act * w2[j];
    }
    total
}

/// An episode built by hand on the m-step game layout.
pub fn hand_episode(m: usize, actions: &[[usize; 2]], rewards: &[f64], epsilon: f64) -> Episode {
    let steps = actions
        .iter()
        .zip(rewards)
        .enumerate()
        .map(|(t, (a, &r))| {
            let mut pos = vec![0.0; m];
            pos[t] = 1.0;
            Step {
                state: pos.clone(),
                observations: (0..2)
                    .map(|i| {
                        let mut o = pos.clone();
                        o.extend([if i == 0 { 1.0 } else { 0.0 }, if i == 1 { 1.0 } else { 0.0 }]);
                        o
                    })
                    .collect(),
                actions: a.to_vec(),
                available: vec![vec![true; 2]; 2],
                reward: r,
                terminal: t + 1 == actions.len(),
                behaviour_greedy: vec![0, 0],
            }
        })
        .collect();
    Episode::new(steps, epsilon).unwrap()
}

/// `|compute_loss - hand computation|` for a preset on a hand-built batch of
/// a one-step and a two-step episode, with distinct online and target
/// parameters. The hand computation uses only single-agent forward passes
/// and [`hand_hypernet_mix`].
pub fn preset_loss_gap(preset: &str, seed: u64) -> (f64, f64) {
    use smix_core::agents::{agent_q_forward, HiddenState};
    use smix_core::harness::{load_config_with, ConfigSource};
    use smix_core::targets::{BootstrapMode, TargetKind};
    use smix_core::trainer::{compute_loss, ParamPair};

    let cfg = load_config_with(ConfigSource::Preset(preset), &[]).unwrap();
    let env = cfg.build_env().unwrap();
    let learner = Learner {
        agent: cfg.agent_net(env.as_ref()),
        mixer: cfg.mixer(env.as_ref()),
        target: cfg.target_spec(),
        gamma: cfg.gamma,
    };
    let mut r = rng::stream(seed, 51);
    let online = random_network(&learner, &mut r);
    let target = random_network(&learner, &mut r);
    let m = cfg.mstep_m;
    let episodes = vec![
        hand_episode(m, &[[1, 0]], &[0.7], 0.3),
        hand_episode(m, &[[0, 0], [1, 1]], &[1.0, 0.5], 0.3),
    ];
    let batch = Batch::new(&episodes).unwrap();
    let params = ParamPair {
        online: online.clone(),
        target: target.clone(),
    };
    let got = compute_loss(&learner, &params, &batch).unwrap().value();

    let n = learner.agent.n_agents;
    // Per-step, per-agent Q rows under a parameter set.
    let q_rows = |net: &Network, ep: &Episode| -> Vec<Vec<Vec<f64>>> {
        let mut h = vec![HiddenState::zeros(learner.agent.hidden_dim); n];
        let mut out = Vec::new();
        for (t, s) in ep.steps.iter().enumerate() {
            let mut row = Vec::new();
            for i in 0..n {
                let prev = t.checked_sub(1).map(|p| ep.steps[p].actions[i]);
                let (q, h_next) =
                    agent_q_forward(&learner.agent, &net.agent, &s.observations[i], prev, i, &h[i]).unwrap();
                h[i] = h_next;
                row.push(q);
            }
            out.push(row);
        }
        out
    };
    let mix = |net: &Network, q: &[f64], state: &[f64]| -> Vec<f64> {
        match learner.mixer.kind {
            MixerKind::Identity => q.to_vec(),
            MixerKind::Additive => vec![q.iter().sum()],
            MixerKind::MonotoneHypernet => vec![hand_hypernet_mix(&learner.mixer, &net.mixer, q, state)],
        }
    };
    let heads = learner.mixer.heads();
    let (gamma, lambda) = (learner.gamma, learner.target.lambda);
    let greedy = learner.target.kind == TargetKind::OneStepMax || learner.target.bootstrap == BootstrapMode::GreedyMax;

    let mut total = 0.0;
    let mut entries = 0;
    for ep in &episodes {
        let on = q_rows(&online, ep);
        let tg = q_rows(&target, ep);
        let len = ep.len();
        // v[t][head] for t = 0..=len with v[len] = 0.
        let mut v = vec![vec![0.0; heads]; len + 1];
        for t in 0..len {
            let per_agent: Vec<f64> = (0..n)
                .map(|i| {
                    let q = &tg[t][i];
                    if greedy {
                        q.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        q[ep.steps[t].actions[i]]
                    }
                })
                .collect();
            v[t] = mix(&target, &per_agent, &ep.steps[t].state);
        }
        let rewards = ep.rewards();
        for hd in 0..heads {
            let mut y = vec![0.0; len];
            let mut next_g = 0.0;
            for t in (0..len).rev() {
                y[t] = match learner.target.kind {
                    TargetKind::OneStepMax => rewards[t] + gamma * v[t + 1][hd],
                    TargetKind::LambdaReturn => rewards[t] + gamma * ((1.0 - lambda) * v[t + 1][hd] + lambda * next_g),
                    other => panic!("preset uses {other:?}"),
                };
                next_g = y[t];
            }
            for t in 0..len {
                let taken: Vec<f64> = (0..n).map(|i| on[t][i][ep.steps[t].actions[i]]).collect();
                let q_tot = mix(&online, &taken, &ep.steps[t].state)[hd];
                total += (q_tot - y[t]).powi(2);
                entries += 1;
            }
        }
    }
    let want = total / entries as f64;
    ((got - want).abs(), want)
}

/// `G_t^(n)` computed directly from its definition.
pub fn n_step(rewards: &[f64], v: &[f64], t: usize, n: usize, gamma: f64) -> f64 {
    let horizon = rewards.len();
    let mut g = 0.0;
    for k in 0..n.min(horizon - t) {
        g += gamma.powi(k as i32) * rewards[t + k];
    }
    if t + n < horizon {
        g += gamma.powi(n as i32) * v[t + n];
    }
    g
}

/// Forward view: `(1 - lambda) sum_n lambda^(n-1) G^(n)`, with the remaining
/// weight on the full return.
pub fn forward_lambda(rewards: &[f64], v: &[f64], t: usize, gamma: f64, lambda: f64) -> f64 {
    let tail = rewards.len() - t;
    let mut g = 0.0;
    for n in 1..tail {
        g += (1.0 - lambda) * lambda.powi(n as i32 - 1) * n_step(rewards, v, t, n, gamma);
    }
    g + lambda.powi(tail as i32 - 1) * n_step(rewards, v, t, tail, gamma)
}
