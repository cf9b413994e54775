//! Episode-level FIFO replay.

use std::collections::VecDeque;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// One decision step: what was seen, what was done, and what came back.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub available: Vec<Vec<bool>>,
    /// Reward received after acting at this step.
    pub reward: f64,
    pub terminal: bool,
    /// Greedy action of each agent's behaviour network at this step.
    pub behaviour_greedy: Vec<usize>,
}

impl Step {
    fn padding(like: &Step) -> Step {
        Step {
            state: vec![0.0; like.state.len()],
            observations: like.observations.iter().map(|o| vec![0.0; o.len()]).collect(),
            actions: vec![0; like.actions.len()],
            available: like.available.iter().map(|a| vec![true; a.len()]).collect(),
            reward: 0.0,
            terminal: false,
            behaviour_greedy: vec![0; like.actions.len()],
        }
    }
}

/// A complete trajectory, optionally padded. `filled[t]` is false for padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub steps: Vec<Step>,
    pub filled: Vec<bool>,
    /// Exploration rate used while collecting.
    pub epsilon: f64,
}

impl Episode {
    pub fn new(steps: Vec<Step>, epsilon: f64) -> Result<Self> {
        let filled = vec![true; steps.len()];
        let ep = Self { steps, filled, epsilon };
        ep.validate()?;
        Ok(ep)
    }

    /// Number of real steps.
    pub fn len(&self) -> usize {
        self.filled.iter().filter(|&&f| f).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Padded length.
    pub fn padded_len(&self) -> usize {
        self.steps.len()
    }

    pub fn total_reward(&self) -> f64 {
        self.real_steps().map(|s| s.reward).sum()
    }

    pub fn real_steps(&self) -> impl Iterator<Item = &Step> {
        self.steps.iter().zip(&self.filled).filter(|(_, &f)| f).map(|(s, _)| s)
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.real_steps().map(|s| s.reward).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Replay(msg));
        if self.steps.len() != self.filled.len() {
            return bad("filled mask length differs from step count".into());
        }
        let real = self.len();
        if real == 0 {
            return bad("episode has no steps".into());
        }
        if self.filled[..real].iter().any(|f| !f) {
            return bad("padding before the end of the episode".into());
        }
        let terminals: Vec<usize> = (0..real).filter(|&t| self.steps[t].terminal).collect();
        if terminals != [real - 1] {
            return bad(format!(
                "expected one terminal step at {}, found {terminals:?}",
                real - 1
            ));
        }
        for (t, s) in self.steps[..real].iter().enumerate() {
            if !s.reward.is_finite() {
                return bad(format!("non-finite reward at step {t}"));
            }
            if s.actions.len() != s.available.len() || s.actions.len() != s.observations.len() {
                return bad(format!("agent count mismatch at step {t}"));
            }
            for (i, (&a, avail)) in s.actions.iter().zip(&s.available).enumerate() {
                if !avail.get(a).copied().unwrap_or(false) {
                    return bad(format!("agent {i} took unavailable action {a} at step {t}"));
                }
            }
        }
        Ok(())
    }

    /// Copy extended with zeroed padding steps up to `len`.
    pub fn padded(&self, len: usize) -> Episode {
        let mut ep = self.clone();
        let template = Step::padding(&self.steps[0]);
        while ep.steps.len() < len {
            ep.steps.push(template.clone());
            ep.filled.push(false);
        }
        ep
    }
}

/// Episodes padded to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub episodes: Vec<Episode>,
    pub max_len: usize,
}

impl Batch {
    pub fn new(episodes: &[Episode]) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::Replay("empty batch".into()));
        }
        let max_len = episodes.iter().map(|e| e.padded_len()).max().unwrap_or(0);
        Ok(Self {
            episodes: episodes.iter().map(|e| e.padded(max_len)).collect(),
            max_len,
        })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn real_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.len()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Replay("capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            episodes: VecDeque::with_capacity(capacity.min(4096)),
            inserted: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Episodes ever inserted, including evicted ones.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    pub fn push_episode(&mut self, episode: Episode) -> Result<()> {
        episode.validate()?;
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
        self.inserted += 1;
        Ok(())
    }

    /// `n` distinct episodes drawn uniformly, padded to their longest member.
    pub fn sample_batch(&self, n: usize, rng: &mut SimRng) -> Result<Batch> {
        if n == 0 || n > self.episodes.len() {
            return Err(Error::Replay(format!(
                "cannot sample {n} episodes from a buffer of {}",
                self.episodes.len()
            )));
        }
        let picked: Vec<Episode> = index::sample(rng, self.episodes.len(), n)
            .into_iter()
            .map(|i| self.episodes[i].clone())
            .collect();
        Batch::new(&picked)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn episode(len: usize, tag: f64) -> Episode {
        let steps = (0..len)
            .map(|t| Step {
                state: vec![tag],
                observations: vec![vec![tag], vec![tag]],
                actions: vec![0, 1],
                available: vec![vec![true; 2]; 2],
                reward: t as f64,
                terminal: t + 1 == len,
                behaviour_greedy: vec![0, 0],
            })
            .collect();
        Episode::new(steps, 0.1).unwrap()
    }

    #[test]
    fn fifo_eviction() {
        let mut buf = ReplayBuffer::new(2).unwrap();
        for tag in [1.0, 2.0, 3.0] {
            buf.push_episode(episode(2, tag)).unwrap();
        }
        let tags: Vec<f64> = buf.episodes().map(|e| e.steps[0].state[0]).collect();
        assert_eq!(tags, [2.0, 3.0]);
        assert_eq!(buf.inserted(), 3);
    }

    #[test]
    fn rejects_malformed_episodes() {
        let mut ep = episode(3, 0.0);
        ep.steps[2].terminal = false;
        assert!(ep.validate().is_err());
        let mut ep = episode(3, 0.0);
        ep.steps[0].terminal = true;
        assert!(ep.validate().is_err());
        let mut ep = episode(3, 0.0);
        ep.steps[1].available[0][0] = false;
        assert!(ep.validate().is_err());
        let mut ep = episode(3, 0.0);
        ep.steps[1].reward = f64::NAN;
        assert!(ep.validate().is_err());
    }

    #[test]
    fn sample_frequencies_are_uniform() {
        let mut buf = ReplayBuffer::new(100).unwrap();
        for i in 0..100 {
            buf.push_episode(episode(1, i as f64)).unwrap();
        }
        let mut counts = [0usize; 100];
        let mut r = rng::stream(3, 0);
        let draws = 100_000;
        for _ in 0..draws {
            let b = buf.sample_batch(1, &mut r).unwrap();
            counts[b.episodes[0].steps[0].state[0] as usize] += 1;
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.01).abs() <= 0.002, "frequency {f}");
        }
    }

    #[test]
    fn batches_pad_to_longest() {
        let mut buf = ReplayBuffer::new(4).unwrap();
        buf.push_episode(episode(3, 0.0)).unwrap();
        buf.push_episode(episode(5, 1.0)).unwrap();
        let b = buf.sample_batch(2, &mut rng::stream(0, 0)).unwrap();
        assert_eq!(b.max_len, 5);
        let mut trues: Vec<usize> = b
            .episodes
            .iter()
            .map(|e| e.filled.iter().filter(|&&f| f).count())
            .collect();
        trues.sort();
        assert_eq!(trues, [3, 5]);
        assert_eq!(b.real_steps(), 8);
        for e in &b.episodes {
            e.validate().unwrap();
        }
    }

    #[test]
    fn sampling_needs_enough_episodes() {
        let mut buf = ReplayBuffer::new(4).unwrap();
        buf.push_episode(episode(1, 0.0)).unwrap();
        assert!(buf.sample_batch(2, &mut rng::stream(0, 0)).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut buf = ReplayBuffer::new(50).unwrap();
        for i in 0..50 {
            buf.push_episode(episode(1 + i % 4, i as f64)).unwrap();
        }
        let a = buf.sample_batch(8, &mut rng::stream(9, 0)).unwrap();
        let b = buf.sample_batch(8, &mut rng::stream(9, 0)).unwrap();
        assert_eq!(a, b);
    }
}
