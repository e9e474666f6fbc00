//! Experience replay keeping hard examples: entries are admitted only when
//! their error reaches the running 80th percentile of recent errors, and a
//! stored experience is replayed with probability 0.2.

use rand::Rng;
use std::collections::VecDeque;

pub const REPLAY_PROBABILITY: f64 = 0.2;
const ERROR_WINDOW: usize = 2048;

#[derive(Debug, Clone)]
pub struct ReplayBuffer<E> {
    capacity: usize,
    entries: VecDeque<(E, f64)>,
    recent_errors: VecDeque<f64>,
}

impl<E: Clone> ReplayBuffer<E> {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity, entries: VecDeque::new(), recent_errors: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Running 80th-percentile estimate over the recent error window.
    pub fn percentile80(&self) -> Option<f64> {
        if self.recent_errors.is_empty() {
            return None;
        }
        let mut v: Vec<f64> = self.recent_errors.iter().copied().collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = ((v.len() as f64) * 0.8).floor() as usize;
        Some(v[idx.min(v.len() - 1)])
    }

    /// Record an observed error and admit the example if it is in the top
    /// 20% at insertion time. Oldest admitted entries are evicted first.
    pub fn offer(&mut self, example: E, error: f64) {
        let threshold = self.percentile80();
        self.recent_errors.push_back(error);
        if self.recent_errors.len() > ERROR_WINDOW {
            self.recent_errors.pop_front();
        }
        let admit = match threshold {
            Some(t) => error >= t,
            None => true,
        };
        if admit {
            if self.entries.len() >= self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back((example, error));
        }
    }

    /// With probability 0.2 and a non-empty buffer, a uniformly sampled
    /// stored experience; otherwise the fresh example.
    pub fn replay_maybe(&self, fresh: E, rng: &mut impl Rng) -> (E, bool) {
        if !self.entries.is_empty() && rng.gen_bool(REPLAY_PROBABILITY) {
            let idx = rng.gen_range(0..self.entries.len());
            (self.entries[idx].0.clone(), true)
        } else {
            (fresh, false)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn empty_buffer_always_returns_fresh() {
        let buf: ReplayBuffer<usize> = ReplayBuffer::new(8);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        for i in 0..100 {
            let (e, replayed) = buf.replay_maybe(i, &mut rng);
            assert_eq!(e, i);
            assert!(!replayed);
        }
    }

    #[test]
    fn median_error_is_rejected_once_window_fills() {
        let mut buf: ReplayBuffer<usize> = ReplayBuffer::new(64);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for i in 0..1000 {
            let err: f64 = rng.gen_range(0.0..1.0);
            buf.offer(i, err);
        }
        let p80 = buf.percentile80().unwrap();
        assert!((p80 - 0.8).abs() < 0.05, "p80 estimate {p80}");
        let before = buf.len();
        buf.offer(9999, 0.5); // 50th percentile error
        assert_eq!(buf.len(), before, "median error must not be admitted");
        assert!(!buf.entries.iter().any(|(e, _)| *e == 9999));
        // Every stored entry cleared the threshold that held when it entered;
        // spot-check against the current estimate with slack for drift.
        for (_, err) in buf.entries.iter() {
            assert!(*err >= 0.5);
        }
    }

    #[test]
    fn replay_fraction_matches_probability() {
        let mut buf: ReplayBuffer<usize> = ReplayBuffer::new(32);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for i in 0..64 {
            buf.offer(i, 1.0 + i as f64);
        }
        let mut replayed = 0usize;
        let total = 100_000;
        for i in 0..total {
            let (_, was_replay) = buf.replay_maybe(i, &mut rng);
            if was_replay {
                replayed += 1;
            }
        }
        let frac = replayed as f64 / total as f64;
        assert!((frac - 0.2).abs() < 0.01, "replay fraction {frac}");
    }

    #[test]
    fn capacity_is_respected_with_fifo_eviction() {
        let mut buf: ReplayBuffer<usize> = ReplayBuffer::new(4);
        for i in 0..100 {
            buf.offer(i, 1e6 + i as f64); // monotone errors, all admitted
        }
        assert_eq!(buf.len(), 4);
        let kept: Vec<usize> = buf.entries.iter().map(|(e, _)| *e).collect();
        assert_eq!(kept, vec![96, 97, 98, 99]);
    }
}
