//! Adaptive learning rate clipping: bound the effective magnitude of
//! outlier losses using running raw moments of the loss stream.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Floor applied to mu2 - mu1^2. The published initialization (mu1 = 25,
/// mu2 = 30) has negative variance, so the threshold is floored to stay
/// finite from the first step.
pub const VAR_FLOOR: f64 = 1e-8;

/// Running raw moments of a loss stream plus the clip threshold multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlrcState {
    mu1: f64,
    mu2: f64,
    beta1: f64,
    beta2: f64,
    n_std: f64,
}

impl Default for AlrcState {
    /// Published initialization: mu1 = 25, mu2 = 30, beta1 = beta2 = 0.999,
    /// n = 3 standard deviations.
    fn default() -> Self {
        AlrcState {
            mu1: 25.0,
            mu2: 30.0,
            beta1: 0.999,
            beta2: 0.999,
            n_std: 3.0,
        }
    }
}

impl AlrcState {
    pub fn new(mu1: f64, mu2: f64, beta1: f64, beta2: f64, n_std: f64) -> Result<Self> {
        if !(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0) {
            return Err(Error::invalid("decay rates must lie in (0, 1)"));
        }
        if !(n_std > 0.0) {
            return Err(Error::invalid("n must be positive"));
        }
        Ok(AlrcState { mu1, mu2, beta1, beta2, n_std })
    }

    /// First raw moment, consumed by the homogenized generator loss.
    pub fn mu1(&self) -> f64 {
        self.mu1
    }

    pub fn mu2(&self) -> f64 {
        self.mu2
    }

    /// Current clip threshold mu1 + n * sqrt(max(mu2 - mu1^2, floor)).
    pub fn threshold(&self) -> f64 {
        let var = (self.mu2 - self.mu1 * self.mu1).max(VAR_FLOOR);
        self.mu1 + self.n_std * var.sqrt()
    }
}

/// Result of clipping one loss value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clipped {
    /// Loss after clipping; equals the raw loss when below threshold.
    pub effective_loss: f64,
    /// Multiplier in (0, 1] to apply to the raw loss's gradient. Downstream
    /// differentiation treats it as a constant, so `grad_scale * loss`
    /// reproduces `effective_loss` exactly.
    pub grad_scale: f64,
}

/// Clip `loss` against the running threshold and update the moments with the
/// clipped value.
pub fn alrc_apply(loss: f64, state: &mut AlrcState) -> Result<Clipped> {
    if !loss.is_finite() || loss < 0.0 {
        return Err(Error::invalid(format!("loss must be finite and non-negative, got {loss}")));
    }
    let t = state.threshold();
    let (effective, scale) = if loss <= t {
        (loss, 1.0)
    } else {
        // Pick the largest scale whose product with the raw loss stays at or
        // below the threshold, so both clip identities hold bitwise.
        let mut scale = t / loss;
        while scale * loss > t {
            scale = f64::from_bits(scale.to_bits() - 1);
        }
        (scale * loss, scale)
    };
    let clipped = loss.min(t);
    state.mu1 = state.beta1 * state.mu1 + (1.0 - state.beta1) * clipped;
    state.mu2 = state.beta2 * state.mu2 + (1.0 - state.beta2) * clipped * clipped;
    Ok(Clipped { effective_loss: effective, grad_scale: scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn plain_state() -> AlrcState {
        AlrcState::new(2.0, 5.0, 0.999, 0.999, 3.0).unwrap()
    }

    #[test]
    fn below_threshold_passes_through() {
        let mut s = plain_state();
        assert_eq!(s.threshold(), 5.0);
        let c = alrc_apply(3.0, &mut s).unwrap();
        assert_eq!(c.effective_loss, 3.0);
        assert_eq!(c.grad_scale, 1.0);
    }

    #[test]
    fn above_threshold_clips_to_t() {
        let mut s = plain_state();
        let c = alrc_apply(9.0, &mut s).unwrap();
        assert!((c.effective_loss - 5.0).abs() < 1e-12);
        assert!((c.grad_scale - 5.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn paper_initialization_floors_negative_variance() {
        let s = AlrcState::default();
        assert_eq!(s.mu1(), 25.0);
        let expect = 25.0 + 3.0 * VAR_FLOOR.sqrt();
        assert!((s.threshold() - expect).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_losses() {
        let mut s = plain_state();
        assert!(alrc_apply(-1.0, &mut s).is_err());
        assert!(alrc_apply(f64::NAN, &mut s).is_err());
        assert!(alrc_apply(f64::INFINITY, &mut s).is_err());
    }

    #[test]
    fn moments_update_with_clipped_value() {
        let mut s = plain_state();
        alrc_apply(100.0, &mut s).unwrap();
        // Clipped at t = 5, so the update sees 5, not 100.
        assert!((s.mu1() - (0.999 * 2.0 + 0.001 * 5.0)).abs() < 1e-12);
        assert!((s.mu2() - (0.999 * 5.0 + 0.001 * 25.0)).abs() < 1e-12);
    }

    #[test]
    fn mu1_decays_geometrically_on_zero_losses() {
        let mut s = AlrcState::default();
        let k = 50;
        for _ in 0..k {
            alrc_apply(0.0, &mut s).unwrap();
        }
        let expect = 25.0 * 0.999f64.powi(k);
        assert!((s.mu1() - expect).abs() < 1e-9);
    }

    #[test]
    fn mu1_converges_to_constant_stream() {
        let mut s = AlrcState::default();
        for _ in 0..20_000 {
            alrc_apply(4.0, &mut s).unwrap();
        }
        assert!((s.mu1() - 4.0).abs() < 1e-6);
    }

    #[test]
    fn clip_identities_hold_bitwise() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let mut s = AlrcState::default();
        for _ in 0..50_000 {
            let loss = rng.gen_range(0.0..60.0f64);
            let t = s.threshold();
            let c = alrc_apply(loss, &mut s).unwrap();
            assert!(c.effective_loss <= t, "effective {} above threshold {}", c.effective_loss, t);
            assert_eq!(c.grad_scale * loss, c.effective_loss, "product identity broke");
            if loss <= t {
                assert_eq!(c.effective_loss, loss);
            }
        }
    }

    #[test]
    fn clipping_is_monotone_in_the_raw_loss() {
        let base = AlrcState::new(1.0, 2.0, 0.999, 0.999, 3.0).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let a = rng.gen_range(0.0..40.0f64);
            let b = rng.gen_range(0.0..40.0f64);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let mut s1 = base.clone();
            let mut s2 = base.clone();
            let e_lo = alrc_apply(lo, &mut s1).unwrap().effective_loss;
            let e_hi = alrc_apply(hi, &mut s2).unwrap().effective_loss;
            // Mathematically monotone; allow a few ulps for the clipped branch.
            assert!(e_hi >= e_lo - 4.0 * f64::EPSILON * e_lo.abs().max(1.0));
        }
    }

    #[test]
    fn threshold_stabilizes_on_stationary_stream() {
        let mut rng = ChaCha12Rng::seed_from_u64(123);
        let mut s = AlrcState::default();
        let total = 100_000;
        let mut max_step = 0.0f64;
        let mut prev_t = s.threshold();
        for i in 0..total {
            let loss = rng.gen_range(0.8..1.2f64);
            alrc_apply(loss, &mut s).unwrap();
            let t = s.threshold();
            if i >= total * 9 / 10 {
                max_step = max_step.max((t - prev_t).abs());
            }
            prev_t = t;
        }
        assert!(max_step < 1e-3, "threshold still moving by {max_step} per step");
    }
}
