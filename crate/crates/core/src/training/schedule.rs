//! Per-network optimizer schedules. The two-stage regime runs a constant
//! phase then a stepped-decay phase for each of the non-adversarial and
//! adversarial halves; decaying phases use the eight-level multiplier
//! m_k = 1 - k/8 with k = floor(8 (i - start) / len), so the last level is
//! 1/8 and there are seven steps down.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetRole {
    Generator,
    Predictor,
    Trainer,
    Discriminators,
}

/// Two-phase (non-adversarial, adversarial) schedule table. Full scale uses
/// 1e6 + 1e6 iterations; desk runs scale the boundaries proportionally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleTable {
    pub non_adversarial: usize,
    pub adversarial: usize,
}

fn decay_multiplier(i: usize, start: usize, len: usize) -> f64 {
    let k = (8 * (i - start)) / len.max(1);
    let k = k.min(7);
    1.0 - k as f64 / 8.0
}

impl ScheduleTable {
    pub fn paper_full_scale() -> Self {
        ScheduleTable { non_adversarial: 1_000_000, adversarial: 1_000_000 }
    }

    pub fn new(non_adversarial: usize, adversarial: usize) -> Self {
        ScheduleTable { non_adversarial, adversarial }
    }

    pub fn total(&self) -> usize {
        self.non_adversarial + self.adversarial
    }

    /// Whether iteration `i` falls in the adversarial half.
    pub fn is_adversarial(&self, i: usize) -> bool {
        i >= self.non_adversarial
    }

    /// Mean-only batch norm updates run in the first half of each phase
    /// pair and freeze in the second half.
    pub fn bn_frozen_at(&self, i: usize) -> bool {
        if i < self.non_adversarial {
            i >= self.non_adversarial / 2
        } else {
            (i - self.non_adversarial) >= self.adversarial / 2
        }
    }

    /// Learning rate and first-moment decay for one network at iteration
    /// `i`, or None when that network is not trained in the phase.
    pub fn at(&self, i: usize, role: NetRole) -> Result<Option<(f64, f64)>> {
        if i >= self.total() {
            return Err(Error::invalid(format!("iteration {i} outside [0, {})", self.total())));
        }
        let na = self.non_adversarial;
        let half1 = na / 2;
        Ok(if i < na {
            let (base_lr, m) = if i < half1 {
                (1.0, 1.0)
            } else {
                (1.0, decay_multiplier(i, half1, na - half1))
            };
            let _ = base_lr;
            match role {
                NetRole::Generator => Some((3e-4 * m, if i < half1 { 0.9 } else { 0.5 + 0.4 * m })),
                NetRole::Predictor => Some((3e-4 * m, 0.9)),
                NetRole::Trainer => Some((6e-4 * m, if i < half1 { 0.9 } else { 0.5 + 0.4 * m })),
                NetRole::Discriminators => None,
            }
        } else {
            let j = i - na;
            let half2 = self.adversarial / 2;
            let m = if j < half2 { 1.0 } else { decay_multiplier(j, half2, self.adversarial - half2) };
            match role {
                NetRole::Generator => Some((1e-4 * m, 0.5)),
                NetRole::Predictor => None,
                NetRole::Trainer => Some((2e-4 * m, 0.5)),
                NetRole::Discriminators => Some((1e-4, 0.5)),
            }
        })
    }
}

/// One-stage schedule: stepwise learning-rate decay at 12.5% and 25% of the
/// run, batch-norm freeze and momentum drop at 50%. At the published scale
/// (1e5 iterations) the steps land at 12500, 25000, and 50000.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OneStageSchedule {
    pub total: usize,
}

impl OneStageSchedule {
    pub fn paper_full_scale() -> Self {
        OneStageSchedule { total: 100_000 }
    }

    pub fn at(&self, i: usize) -> Result<(f64, f64, bool)> {
        if i >= self.total {
            return Err(Error::invalid(format!("iteration {i} outside [0, {})", self.total)));
        }
        let frac = i as f64 / self.total as f64;
        let lr = if frac < 0.125 {
            0.001
        } else if frac < 0.25 {
            0.0005
        } else {
            0.00025
        };
        let frozen = frac >= 0.5;
        let beta = if frozen { 0.5 } else { 0.9 };
        Ok((lr, beta, frozen))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tabulated_values_at_full_scale() {
        let t = ScheduleTable::paper_full_scale();
        assert_eq!(t.at(0, NetRole::Generator).unwrap(), Some((3e-4, 0.9)));
        assert_eq!(t.at(1_200_000, NetRole::Generator).unwrap(), Some((1e-4, 0.5)));
        assert_eq!(t.at(0, NetRole::Trainer).unwrap(), Some((6e-4, 0.9)));
        assert_eq!(t.at(0, NetRole::Discriminators).unwrap(), None);
        assert_eq!(t.at(1_200_000, NetRole::Discriminators).unwrap(), Some((1e-4, 0.5)));
        assert_eq!(t.at(1_200_000, NetRole::Predictor).unwrap(), None);
    }

    #[test]
    fn decay_phase_boundaries() {
        let t = ScheduleTable::paper_full_scale();
        // k = 0 at the start of the decay phase.
        assert_eq!(t.at(550_000, NetRole::Generator).unwrap(), Some((3e-4, 0.9)));
        // k = 7 just before the phase ends.
        let (lr, beta) = t.at(999_999, NetRole::Generator).unwrap().unwrap();
        assert!((lr - 3e-4 / 8.0).abs() < 1e-12);
        assert!((beta - (0.5 + 0.4 / 8.0)).abs() < 1e-12);
        // Predictor keeps beta 0.9 through the decay phase.
        let (_, beta_m) = t.at(999_999, NetRole::Predictor).unwrap().unwrap();
        assert_eq!(beta_m, 0.9);
        // Out-of-range iteration is rejected.
        assert!(t.at(2_000_000, NetRole::Generator).is_err());
    }

    #[test]
    fn learning_rate_is_piecewise_non_increasing() {
        let t = ScheduleTable::new(2000, 2000);
        for role in [NetRole::Generator, NetRole::Predictor, NetRole::Trainer, NetRole::Discriminators] {
            let mut prev: Option<f64> = None;
            let mut phase_start = true;
            for i in 0..t.total() {
                let cur = t.at(i, role).unwrap().map(|(lr, _)| lr);
                match (prev, cur) {
                    (Some(p), Some(c)) if !phase_start => {
                        assert!(c <= p + 1e-15, "{role:?} lr rose at {i}: {p} -> {c}");
                    }
                    _ => {}
                }
                phase_start = cur.is_none();
                if cur.is_some() {
                    prev = cur;
                }
                // Phase 3 restarts at a lower constant, so non-increasing
                // holds globally for these tables.
            }
        }
    }

    #[test]
    fn bn_freeze_windows() {
        let t = ScheduleTable::new(1000, 1000);
        assert!(!t.bn_frozen_at(0));
        assert!(!t.bn_frozen_at(499));
        assert!(t.bn_frozen_at(500));
        assert!(t.bn_frozen_at(999));
        assert!(!t.bn_frozen_at(1000));
        assert!(t.bn_frozen_at(1500));
    }

    #[test]
    fn one_stage_published_points() {
        let s = OneStageSchedule::paper_full_scale();
        assert_eq!(s.at(0).unwrap(), (0.001, 0.9, false));
        assert_eq!(s.at(20_000).unwrap(), (0.0005, 0.9, false));
        assert_eq!(s.at(60_000).unwrap(), (0.00025, 0.5, true));
        assert_eq!(s.at(12_500).unwrap().0, 0.0005);
        assert_eq!(s.at(25_000).unwrap().0, 0.00025);
        assert_eq!(s.at(50_000).unwrap().2, true);
        assert!(s.at(100_000).is_err());
    }
}
