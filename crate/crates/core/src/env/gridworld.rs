use rand::Rng;

use super::{check_joint_action, one_hot, DecPomdpSpec, Environment, StepResult};
use crate::error::{Error, Result};
use crate::rng::SimRng;

#[derive(Clone, Debug, PartialEq)]
pub struct GridWorldConfig {
    pub size: usize,
    pub n_agents: usize,
    pub episode_limit: usize,
    pub capture_reward: f64,
    pub step_penalty: f64,
}

impl Default for GridWorldConfig {
    fn default() -> Self {
        Self {
            size: 4,
            n_agents: 2,
            episode_limit: 30,
            capture_reward: 10.0,
            step_penalty: 0.01,
        }
    }
}

/// `n` agents on a `size x size` torus must stand on a target cell at the
/// same time. Each agent sees the 3x3 neighbourhood around itself.
///
/// Actions: 0 stay, 1 up, 2 down, 3 left, 4 right.
#[derive(Clone, Debug)]
pub struct GridWorld {
    cfg: GridWorldConfig,
    spec: DecPomdpSpec,
    agents: Vec<(usize, usize)>,
    target: (usize, usize),
    done: bool,
    steps: usize,
}

const WINDOW: usize = 9;

impl GridWorld {
    pub fn new(cfg: GridWorldConfig) -> Result<Self> {
        if cfg.size < 2 || cfg.n_agents == 0 || cfg.episode_limit == 0 {
            return Err(Error::Env(format!("invalid gridworld config {cfg:?}")));
        }
        let spec = DecPomdpSpec {
            n_agents: cfg.n_agents,
            n_actions: 5,
            obs_dim: 2 * WINDOW + 2 + cfg.n_agents,
            state_dim: 2 * cfg.n_agents + 2,
            episode_limit: cfg.episode_limit,
            gamma: 0.99,
        };
        Ok(Self {
            agents: vec![(0, 0); cfg.n_agents],
            target: (0, 0),
            done: true,
            steps: 0,
            cfg,
            spec,
        })
    }

    pub fn agent_positions(&self) -> &[(usize, usize)] {
        &self.agents
    }

    pub fn target(&self) -> (usize, usize) {
        self.target
    }

    fn captured(&self) -> bool {
        self.agents.iter().all(|&p| p == self.target)
    }

    fn wrap(&self, v: usize, delta: isize) -> usize {
        let n = self.cfg.size as isize;
        (((v as isize + delta) % n + n) % n) as usize
    }

    fn observe(&self, reward: f64) -> StepResult {
        let n = self.cfg.size as f64;
        let observations = (0..self.cfg.n_agents)
            .map(|i| {
                let (x, y) = self.agents[i];
                let mut target_seen = vec![0.0; WINDOW];
                let mut others = vec![0.0; WINDOW];
                for (cell, (dx, dy)) in offsets().enumerate() {
                    let here = (self.wrap(x, dx), self.wrap(y, dy));
                    if here == self.target {
                        target_seen[cell] = 1.0;
                    }
                    others[cell] = self
                        .agents
                        .iter()
                        .enumerate()
                        .filter(|&(j, &p)| j != i && p == here)
                        .count() as f64;
                }
                let mut o = target_seen;
                o.extend(others);
                o.push(x as f64 / n);
                o.push(y as f64 / n);
                o.extend(one_hot(self.cfg.n_agents, i));
                o
            })
            .collect();
        let mut state: Vec<f64> = self
            .agents
            .iter()
            .flat_map(|&(x, y)| [x as f64 / n, y as f64 / n])
            .collect();
        state.push(self.target.0 as f64 / n);
        state.push(self.target.1 as f64 / n);
        StepResult {
            reward,
            terminal: self.done,
            observations,
            state,
            available_actions: vec![vec![true; 5]; self.cfg.n_agents],
        }
    }
}

fn offsets() -> impl Iterator<Item = (isize, isize)> {
    (-1..=1).flat_map(|dx| (-1..=1).map(move |dy| (dx, dy)))
}

impl Environment for GridWorld {
    fn spec(&self) -> &DecPomdpSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut SimRng) -> StepResult {
        let n = self.cfg.size;
        for p in &mut self.agents {
            *p = (rng.gen_range(0..n), rng.gen_range(0..n));
        }
        loop {
            self.target = (rng.gen_range(0..n), rng.gen_range(0..n));
            if !self.captured() {
                break;
            }
        }
        self.done = false;
        self.steps = 0;
        self.observe(0.0)
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<StepResult> {
        let avail = vec![vec![true; 5]; self.cfg.n_agents];
        check_joint_action(&self.spec, self.done, &avail, joint_action)?;
        for (i, &a) in joint_action.iter().enumerate() {
            let (x, y) = self.agents[i];
            self.agents[i] = match a {
                1 => (x, self.wrap(y, -1)),
                2 => (x, self.wrap(y, 1)),
                3 => (self.wrap(x, -1), y),
                4 => (self.wrap(x, 1), y),
                _ => (x, y),
            };
        }
        self.steps += 1;
        let reward = if self.captured() {
            self.done = true;
            self.cfg.capture_reward
        } else {
            -self.cfg.step_penalty
        };
        if self.steps >= self.cfg.episode_limit {
            self.done = true;
        }
        Ok(self.observe(reward))
    }

    fn steps_taken(&self) -> usize {
        self.steps
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::optimal_return;
    use crate::rng;

    #[test]
    fn seeded_reset_is_deterministic() {
        let mut a = GridWorld::new(GridWorldConfig::default()).unwrap();
        let mut b = GridWorld::new(GridWorldConfig::default()).unwrap();
        let ra = a.reset(&mut rng::stream(5, 2));
        let rb = b.reset(&mut rng::stream(5, 2));
        assert_eq!(ra, rb);
        assert_eq!(ra.observations[0].len(), a.spec().obs_dim);
        assert_eq!(ra.state.len(), a.spec().state_dim);
    }

    #[test]
    fn episode_ends_at_limit_or_capture() {
        let cfg = GridWorldConfig {
            episode_limit: 3,
            ..Default::default()
        };
        let mut env = GridWorld::new(cfg).unwrap();
        env.reset(&mut rng::stream(1, 0));
        let mut last = None;
        for _ in 0..3 {
            let r = env.step(&[0, 0]).unwrap();
            last = Some(r.terminal);
            if r.terminal {
                break;
            }
        }
        assert_eq!(last, Some(true));
        assert!(env.step(&[0, 0]).is_err());
    }

    #[test]
    fn capture_pays_reward() {
        let mut env = GridWorld::new(GridWorldConfig::default()).unwrap();
        env.reset(&mut rng::stream(1, 0));
        env.agents = vec![(0, 0), (1, 0)];
        env.target = (1, 0);
        let r = env.step(&[4, 0]).unwrap();
        assert!(r.terminal);
        assert_eq!(r.reward, 10.0);
    }

    #[test]
    fn exhaustive_search_refuses_large_spaces() {
        let env = GridWorld::new(GridWorldConfig::default()).unwrap();
        assert!(matches!(
            optimal_return(&env, &mut rng::stream(0, 0)),
            Err(Error::SearchTooLarge { .. })
        ));
    }
}
