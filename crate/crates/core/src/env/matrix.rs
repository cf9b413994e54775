use super::{check_joint_action, one_hot, optimal_return, DecPomdpSpec, Environment, StepResult};
use crate::error::{Error, Result};
use crate::rng::{self, SimRng};

/// Two-agent single-step game with an arbitrary square payoff table.
#[derive(Clone, Debug)]
pub struct OneShotGame {
    spec: DecPomdpSpec,
    payoff: Vec<Vec<f64>>,
    done: bool,
    steps: usize,
}

impl OneShotGame {
    pub fn new(payoff: Vec<Vec<f64>>) -> Result<Self> {
        let n = payoff.len();
        if n == 0 || payoff.iter().any(|row| row.len() != n) {
            return Err(Error::Env("one-shot payoff must be a non-empty square table".into()));
        }
        if payoff.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Env("one-shot payoff must be finite".into()));
        }
        Ok(Self {
            spec: DecPomdpSpec {
                n_agents: 2,
                n_actions: n,
                obs_dim: 3,
                state_dim: 1,
                episode_limit: 1,
                gamma: 0.99,
            },
            payoff,
            done: true,
            steps: 0,
        })
    }

    fn observe(&self, reward: f64) -> StepResult {
        let live = if self.done { 0.0 } else { 1.0 };
        let observations = (0..2)
            .map(|i| {
                let mut o = vec![live];
                o.extend(one_hot(2, i));
                o
            })
            .collect();
        StepResult {
            reward,
            terminal: self.done,
            observations,
            state: vec![live],
            available_actions: vec![vec![true; self.spec.n_actions]; 2],
        }
    }
}

impl Environment for OneShotGame {
    fn spec(&self) -> &DecPomdpSpec {
        &self.spec
    }

    fn reset(&mut self, _rng: &mut SimRng) -> StepResult {
        self.done = false;
        self.steps = 0;
        self.observe(0.0)
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<StepResult> {
        let avail = vec![vec![true; self.spec.n_actions]; 2];
        check_joint_action(&self.spec, self.done, &avail, joint_action)?;
        let reward = self.payoff[joint_action[0]][joint_action[1]];
        self.done = true;
        self.steps += 1;
        Ok(self.observe(reward))
    }

    fn steps_taken(&self) -> usize {
        self.steps
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}

/// Chain of `m` two-agent 2x2 matrix games.
///
/// At chain position `k` the joint action `(a0, a1)` pays `payoffs[k][a0][a1]`.
/// A zero payoff ends the episode; a non-zero payoff advances to `k + 1`; the
/// last position always ends it. The default tables pay 1 for `(0, 0)` at
/// every intermediate position and 4 for `(1, 1)` at the last one, so the
/// best episode collects `(m - 1) + 4 = m + 3`.
#[derive(Clone, Debug)]
pub struct MStepGame {
    spec: DecPomdpSpec,
    payoffs: Vec<[[f64; 2]; 2]>,
    position: usize,
    done: bool,
    steps: usize,
}

impl MStepGame {
    /// The default construction for chain length `m >= 2`.
    pub fn new(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::Env(format!("m-step game needs m >= 2, got {m}")));
        }
        let mut payoffs = vec![[[1.0, 0.0], [0.0, 0.0]]; m - 1];
        payoffs.push([[0.0, 0.0], [0.0, 4.0]]);
        Self::with_payoffs(payoffs)
    }

    /// Custom payoff tables. The construction is rejected unless exhaustive
    /// search confirms an optimal return of exactly `m + 3`.
    pub fn with_payoffs(payoffs: Vec<[[f64; 2]; 2]>) -> Result<Self> {
        let m = payoffs.len();
        if m < 2 {
            return Err(Error::Env(format!("m-step game needs m >= 2, got {m}")));
        }
        if payoffs.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Env("payoffs must be finite".into()));
        }
        let game = Self {
            spec: DecPomdpSpec {
                n_agents: 2,
                n_actions: 2,
                obs_dim: m + 2,
                state_dim: m,
                episode_limit: m,
                gamma: 0.99,
            },
            payoffs,
            position: 0,
            done: true,
            steps: 0,
        };
        let best = optimal_return(&game, &mut rng::stream(0, 0))?;
        let target = (m + 3) as f64;
        if (best - target).abs() > 1e-12 {
            return Err(Error::Env(format!(
                "payoff tables give optimal return {best}, expected m + 3 = {target}"
            )));
        }
        Ok(game)
    }

    pub fn m(&self) -> usize {
        self.payoffs.len()
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn payoffs(&self) -> &[[[f64; 2]; 2]] {
        &self.payoffs
    }

    fn observe(&self, reward: f64) -> StepResult {
        let m = self.m();
        // After termination the position block is all zeros.
        let pos = if self.done { m } else { self.position };
        let observations = (0..2)
            .map(|i| {
                let mut o = one_hot(m, pos);
                o.extend(one_hot(2, i));
                o
            })
            .collect();
        StepResult {
            reward,
            terminal: self.done,
            observations,
            state: one_hot(m, pos),
            available_actions: vec![vec![true; 2]; 2],
        }
    }
}

impl Environment for MStepGame {
    fn spec(&self) -> &DecPomdpSpec {
        &self.spec
    }

    fn reset(&mut self, _rng: &mut SimRng) -> StepResult {
        self.position = 0;
        self.done = false;
        self.steps = 0;
        self.observe(0.0)
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<StepResult> {
        let avail = vec![vec![true; 2]; 2];
        check_joint_action(&self.spec, self.done, &avail, joint_action)?;
        let reward = self.payoffs[self.position][joint_action[0]][joint_action[1]];
        self.steps += 1;
        let last = self.position + 1 == self.m();
        if reward == 0.0 || last || self.steps >= self.spec.episode_limit {
            self.done = true;
        } else {
            self.position += 1;
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

    fn rng() -> SimRng {
        rng::stream(1, 0)
    }

    #[test]
    fn mstep_reset_observes_position_zero() {
        let mut game = MStepGame::new(5).unwrap();
        let r = game.reset(&mut rng());
        assert!(!r.terminal);
        assert_eq!(game.steps_taken(), 0);
        for (i, o) in r.observations.iter().enumerate() {
            assert_eq!(&o[..5], &[1.0, 0.0, 0.0, 0.0, 0.0]);
            assert_eq!(o[5 + i], 1.0);
            assert_eq!(o.len(), game.spec().obs_dim);
        }
        assert_eq!(r.state.len(), game.spec().state_dim);
    }

    #[test]
    fn mstep_top_left_advances() {
        let mut game = MStepGame::new(5).unwrap();
        game.reset(&mut rng());
        let r = game.step(&[0, 0]).unwrap();
        assert_eq!(r.reward, 1.0);
        assert!(!r.terminal);
        assert_eq!(game.position(), 1);
    }

    #[test]
    fn mstep_zero_reward_terminates() {
        for joint in [[0, 1], [1, 0], [1, 1]] {
            let mut game = MStepGame::new(5).unwrap();
            game.reset(&mut rng());
            game.step(&[0, 0]).unwrap();
            let r = game.step(&joint).unwrap();
            assert_eq!(r.reward, 0.0);
            assert!(r.terminal);
            assert!(game.step(&[0, 0]).is_err());
        }
    }

    #[test]
    fn mstep_optimal_trajectory() {
        let mut game = MStepGame::new(5).unwrap();
        game.reset(&mut rng());
        let mut total = 0.0;
        let mut len = 0;
        loop {
            let joint = if game.position() == 4 { [1, 1] } else { [0, 0] };
            let r = game.step(&joint).unwrap();
            total += r.reward;
            len += 1;
            if r.terminal {
                break;
            }
        }
        assert_eq!((total, len), (8.0, 5));
    }

    #[test]
    fn optimal_returns() {
        assert_eq!(optimal_return(&MStepGame::new(5).unwrap(), &mut rng()).unwrap(), 8.0);
        assert_eq!(optimal_return(&MStepGame::new(2).unwrap(), &mut rng()).unwrap(), 5.0);
        let one = OneShotGame::new(vec![vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(optimal_return(&one, &mut rng()).unwrap(), 1.0);
    }

    #[test]
    fn custom_payoffs_must_reach_m_plus_3() {
        let bad = vec![[[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 1.0]]];
        assert!(MStepGame::with_payoffs(bad).is_err());
        let alt = vec![[[0.0, 0.0], [0.0, 1.0]], [[4.0, 0.0], [0.0, 0.0]]];
        assert!(MStepGame::with_payoffs(alt).is_ok());
        assert!(MStepGame::new(1).is_err());
    }

    #[test]
    fn one_shot_lookup() {
        let mut game = OneShotGame::new(vec![vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let r0 = game.reset(&mut rng());
        assert!(!r0.terminal);
        let r = game.step(&[0, 0]).unwrap();
        assert_eq!(r.reward, 1.0);
        assert!(r.terminal);
        assert!(game.step(&[0, 0]).is_err());
    }

    #[test]
    fn unavailable_or_out_of_range_action_errors() {
        let mut game = MStepGame::new(3).unwrap();
        game.reset(&mut rng());
        assert!(game.step(&[2, 0]).is_err());
        assert!(game.step(&[0]).is_err());
    }
}
