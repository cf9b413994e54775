//! The end-to-end loop: parallel epsilon-greedy rollouts into an episode
//! buffer, lambda-return targets from the target parameters, masked
//! squared-error loss, RMSprop on the online parameters, and periodic target
//! sync.
//!
//! Each iteration collects `parallel_envs` episodes, then takes
//! `train_steps_per_iter` gradient steps once the buffer holds a batch.

mod config;
mod loss;
mod rollout;

pub use config::{EnvKind, TrainConfig};
pub use loss::{batch_targets, compute_loss, loss_with_targets, Learner, LossGraph, Network, ParamPair};
pub use rollout::{evaluate_greedy, median, rollout_episode, EvalStats};

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::agents::{AgentNet, EpsilonSchedule};
use crate::env::Environment;
use crate::error::Result;
use crate::replay::{Batch, ReplayBuffer};
use crate::rng::{self, SimRng};
use crate::tensor::{clip_grad_norm, ParamSet, RmsProp};

/// One row per evaluation point.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub env_steps: u64,
    pub episodes: u64,
    pub eval_mean_return: f64,
    pub eval_median_return: f64,
    /// Mean training loss since the previous row; NaN before training starts.
    pub loss: f64,
    pub epsilon: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "env_steps,episodes,eval_mean_return,eval_median_return,loss,epsilon,wall_ms";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.env_steps, r.episodes, r.eval_mean_return, r.eval_median_return, r.loss, r.epsilon, r.wall_ms
            );
        }
        out
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

struct Worker {
    env: Box<dyn Environment>,
    rng: SimRng,
}

pub struct Trainer {
    config: TrainConfig,
    learner: Learner,
    params: ParamPair,
    agent_opt: RmsProp,
    mixer_opt: RmsProp,
    buffer: ReplayBuffer,
    workers: Vec<Worker>,
    eval_env: Box<dyn Environment>,
    learner_rng: SimRng,
    eval_rng: SimRng,
    schedule: EpsilonSchedule,
    env_steps: u64,
    episodes: u64,
    episodes_at_sync: u64,
    gradient_steps: u64,
    losses: Vec<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let env = config.build_env()?;
        let agent = config.agent_net(env.as_ref());
        let mixer = config.mixer(env.as_ref());
        let mut learner_rng = rng::stream(config.seed, rng::LEARNER_STREAM);
        let online = Network {
            agent: agent.init_params(&mut learner_rng),
            mixer: mixer.init_params(&mut learner_rng),
        };
        let agent_opt = RmsProp::new(config.rmsprop(), online.agent.tensors());
        let mixer_opt = RmsProp::new(config.rmsprop(), online.mixer.tensors());
        let workers = (0..config.parallel_envs)
            .map(|w| Worker {
                env: env.clone(),
                rng: rng::stream(config.seed, rng::ROLLOUT_STREAM_BASE + w as u64),
            })
            .collect();
        Ok(Self {
            learner: Learner {
                agent,
                mixer,
                target: config.target_spec(),
                gamma: config.gamma,
            },
            params: ParamPair::new(online),
            agent_opt,
            mixer_opt,
            buffer: ReplayBuffer::new(config.buffer_capacity)?,
            workers,
            eval_env: env,
            learner_rng,
            eval_rng: rng::stream(config.seed, rng::EVAL_STREAM),
            schedule: config.epsilon_schedule(),
            env_steps: 0,
            episodes: 0,
            episodes_at_sync: 0,
            gradient_steps: 0,
            losses: Vec::new(),
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn learner(&self) -> &Learner {
        &self.learner
    }

    pub fn params(&self) -> &ParamPair {
        &self.params
    }

    pub fn agent_net(&self) -> &AgentNet {
        &self.learner.agent
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn gradient_steps(&self) -> u64 {
        self.gradient_steps
    }

    /// Collects one round of episodes and trains on the buffer.
    pub fn iterate(&mut self) -> Result<()> {
        let epsilon = self.schedule.value(self.env_steps);
        let net = self.learner.agent;
        let snapshot = &self.params.online.agent;
        let episodes = self
            .workers
            .par_iter_mut()
            .map(|w| rollout_episode(w.env.as_mut(), &net, snapshot, epsilon, &mut w.rng))
            .collect::<Vec<_>>();
        for ep in episodes {
            let ep = ep?;
            self.env_steps += ep.len() as u64;
            self.episodes += 1;
            self.buffer.push_episode(ep)?;
        }
        if self.buffer.len() >= self.config.batch_size {
            for _ in 0..self.config.train_steps_per_iter {
                let batch = self
                    .buffer
                    .sample_batch(self.config.batch_size, &mut self.learner_rng)?;
                let loss = self.train_step(&batch)?;
                self.losses.push(loss);
            }
        }
        if self.episodes - self.episodes_at_sync >= self.config.target_update_episodes {
            self.params.sync();
            self.episodes_at_sync = self.episodes;
        }
        Ok(())
    }

    /// One RMSprop step on `batch`; returns the loss before the step.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f64> {
        let mut lg = compute_loss(&self.learner, &self.params, batch)?;
        lg.graph.backward(lg.loss)?;
        let mut grads = self.params.online.agent.grads(&lg.graph, &lg.agent_vars);
        let n_agent = grads.len();
        grads.extend(self.params.online.mixer.grads(&lg.graph, &lg.mixer_vars));
        clip_grad_norm(&mut grads, self.config.grad_clip);
        self.agent_opt
            .step(self.params.online.agent.tensors_mut(), &grads[..n_agent])?;
        self.mixer_opt
            .step(self.params.online.mixer.tensors_mut(), &grads[n_agent..])?;
        self.gradient_steps += 1;
        Ok(lg.value())
    }

    pub fn evaluate(&mut self) -> Result<EvalStats> {
        evaluate_greedy(
            self.eval_env.as_mut(),
            &self.learner.agent,
            &self.params.online.agent,
            self.config.eval_episodes,
            &mut self.eval_rng,
        )
    }

    fn record(&mut self, log: &mut MetricsLog, start: Instant) -> Result<()> {
        let stats = self.evaluate()?;
        let loss = if self.losses.is_empty() {
            f64::NAN
        } else {
            self.losses.iter().sum::<f64>() / self.losses.len() as f64
        };
        self.losses.clear();
        log.rows.push(MetricsRow {
            env_steps: self.env_steps,
            episodes: self.episodes,
            eval_mean_return: stats.mean,
            eval_median_return: stats.median,
            loss,
            epsilon: self.schedule.value(self.env_steps),
            wall_ms: if self.config.wall_clock {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        });
        Ok(())
    }

    /// Trains until `total_steps` environment steps, evaluating at step 0,
    /// every `eval_interval` steps, and at the end.
    pub fn run(&mut self) -> Result<MetricsLog> {
        let start = Instant::now();
        let mut log = MetricsLog::default();
        if self.config.total_steps == 0 {
            return Ok(log);
        }
        self.record(&mut log, start)?;
        let mut next_eval = self.config.eval_interval;
        while self.env_steps < self.config.total_steps {
            self.iterate()?;
            if self.env_steps >= next_eval {
                self.record(&mut log, start)?;
                while next_eval <= self.env_steps {
                    next_eval += self.config.eval_interval;
                }
            }
        }
        if log.last().map(|r| r.env_steps) != Some(self.env_steps) {
            self.record(&mut log, start)?;
        }
        Ok(log)
    }

    /// Online parameters in the checkpoint text format.
    pub fn checkpoint(&self) -> String {
        self.params.online.to_param_set().to_checkpoint()
    }
}

pub fn load_checkpoint(text: &str) -> Result<Network> {
    Network::from_param_set(&ParamSet::from_checkpoint(text)?)
}

pub fn train(config: TrainConfig) -> Result<MetricsLog> {
    Trainer::new(config)?.run()
}
