use serde::{Deserialize, Serialize};

use crate::agents::{AgentNet, EpsilonSchedule};
use crate::env::{Environment, GridWorld, GridWorldConfig, MStepGame, OneShotGame};
use crate::error::{Error, Result};
use crate::mixers::{MixActivation, Mixer, MixerKind};
use crate::targets::{BootstrapMode, ReturnTargetSpec, TargetKind};
use crate::tensor::RmsPropConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Mstep,
    OneShot,
    Gridworld,
}

/// Every knob of a training run. Keys are flat so they can be overridden
/// one at a time with `key=value`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,

    pub env: EnvKind,
    pub mstep_m: usize,
    pub one_shot_payoff: Vec<Vec<f64>>,
    pub grid_size: usize,
    pub grid_agents: usize,
    pub grid_episode_limit: usize,

    pub gamma: f64,
    pub lambda: f64,
    pub n_step: usize,
    pub target: TargetKind,
    pub bootstrap: BootstrapMode,

    pub mixer: MixerKind,
    pub enforce_nonneg: bool,
    pub embed_dim: usize,
    pub mixer_activation: MixActivation,
    pub hidden_dim: usize,

    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal_steps: u64,

    pub buffer_capacity: usize,
    pub batch_size: usize,
    /// Target network sync period, in collected episodes.
    pub target_update_episodes: u64,
    /// Episodes collected in parallel per iteration.
    pub parallel_envs: usize,
    /// Gradient steps per iteration.
    pub train_steps_per_iter: usize,

    pub lr: f64,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,

    pub total_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// Record real elapsed time in `wall_ms`. Off by default so metrics files
    /// are reproducible byte for byte.
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            env: EnvKind::Mstep,
            mstep_m: 5,
            one_shot_payoff: vec![vec![1.0, 0.0], vec![0.0, 0.0]],
            grid_size: 4,
            grid_agents: 2,
            grid_episode_limit: 30,
            gamma: 0.99,
            lambda: 0.8,
            n_step: 4,
            target: TargetKind::LambdaReturn,
            bootstrap: BootstrapMode::TakenAction,
            mixer: MixerKind::MonotoneHypernet,
            enforce_nonneg: true,
            embed_dim: 32,
            mixer_activation: MixActivation::Elu,
            hidden_dim: 64,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal_steps: 50_000,
            buffer_capacity: 1500,
            batch_size: 32,
            target_update_episodes: 200,
            parallel_envs: 4,
            train_steps_per_iter: 1,
            lr: 5e-4,
            rms_alpha: 0.99,
            rms_eps: 1e-5,
            grad_clip: 10.0,
            total_steps: 100_000,
            eval_interval: 20_000,
            eval_episodes: 24,
            wall_clock: false,
        }
    }
}

impl TrainConfig {
    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut unit = |name: &str, v: f64| {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("{name} = {v} is outside [0, 1]"));
            }
        };
        unit("gamma", self.gamma);
        unit("lambda", self.lambda);
        unit("epsilon_start", self.epsilon_start);
        unit("epsilon_end", self.epsilon_end);
        unit("rms_alpha", self.rms_alpha);
        let mut positive = |name: &str, v: usize| {
            if v == 0 {
                errs.push(format!("{name} must be >= 1"));
            }
        };
        positive("n_step", self.n_step);
        positive("embed_dim", self.embed_dim);
        positive("hidden_dim", self.hidden_dim);
        positive("buffer_capacity", self.buffer_capacity);
        positive("batch_size", self.batch_size);
        positive("parallel_envs", self.parallel_envs);
        positive("train_steps_per_iter", self.train_steps_per_iter);
        if self.target_update_episodes == 0 {
            errs.push("target_update_episodes must be >= 1".into());
        }
        if self.eval_interval == 0 {
            errs.push("eval_interval must be >= 1".into());
        }
        if self.eval_episodes == 0 {
            errs.push("eval_episodes must be >= 1".into());
        }
        if self.batch_size > self.buffer_capacity {
            errs.push(format!(
                "batch_size {} exceeds buffer_capacity {}",
                self.batch_size, self.buffer_capacity
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("lr = {} must be positive", self.lr));
        }
        if !(self.rms_eps > 0.0 && self.rms_eps.is_finite()) {
            errs.push(format!("rms_eps = {} must be positive", self.rms_eps));
        }
        if !(self.grad_clip >= 0.0) {
            errs.push(format!("grad_clip = {} must be >= 0", self.grad_clip));
        }
        match self.env {
            EnvKind::Mstep if self.mstep_m < 2 => errs.push(format!("mstep_m = {} must be >= 2", self.mstep_m)),
            EnvKind::OneShot => {
                if let Err(e) = OneShotGame::new(self.one_shot_payoff.clone()) {
                    errs.push(format!("one_shot_payoff: {e}"));
                }
            }
            EnvKind::Gridworld => {
                if self.grid_size < 2 {
                    errs.push(format!("grid_size = {} must be >= 2", self.grid_size));
                }
                if self.grid_agents == 0 {
                    errs.push("grid_agents must be >= 1".into());
                }
                if self.grid_episode_limit == 0 {
                    errs.push("grid_episode_limit must be >= 1".into());
                }
            }
            _ => {}
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn build_env(&self) -> Result<Box<dyn Environment>> {
        Ok(match self.env {
            EnvKind::Mstep => Box::new(MStepGame::new(self.mstep_m)?),
            EnvKind::OneShot => Box::new(OneShotGame::new(self.one_shot_payoff.clone())?),
            EnvKind::Gridworld => Box::new(GridWorld::new(GridWorldConfig {
                size: self.grid_size,
                n_agents: self.grid_agents,
                episode_limit: self.grid_episode_limit,
                ..Default::default()
            })?),
        })
    }

    pub fn agent_net(&self, env: &dyn Environment) -> AgentNet {
        let spec = env.spec();
        AgentNet {
            obs_dim: spec.obs_dim,
            n_actions: spec.n_actions,
            n_agents: spec.n_agents,
            hidden_dim: self.hidden_dim,
        }
    }

    pub fn mixer(&self, env: &dyn Environment) -> Mixer {
        let spec = env.spec();
        Mixer {
            embed_dim: self.embed_dim,
            enforce_nonneg: self.enforce_nonneg,
            activation: self.mixer_activation,
            ..Mixer::new(self.mixer, spec.n_agents, spec.state_dim)
        }
    }

    pub fn target_spec(&self) -> ReturnTargetSpec {
        ReturnTargetSpec {
            kind: self.target,
            lambda: self.lambda,
            n: self.n_step,
            bootstrap: self.bootstrap,
        }
    }

    pub fn epsilon_schedule(&self) -> EpsilonSchedule {
        EpsilonSchedule {
            start: self.epsilon_start,
            end: self.epsilon_end,
            anneal_steps: self.epsilon_anneal_steps,
        }
    }

    pub fn rmsprop(&self) -> RmsPropConfig {
        RmsPropConfig {
            learning_rate: self.lr,
            alpha: self.rms_alpha,
            eps: self.rms_eps,
        }
    }
}
