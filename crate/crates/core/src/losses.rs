//! Training objectives: coverage loss scaling, blurred/unblurred generator
//! MSE losses, the crop-based loss-predictor ensemble, the auxiliary trainer
//! loss, and the least-squares adversarial losses.

use crate::alrc::{alrc_apply, AlrcState};
use crate::error::{Error, Result};
use crate::imaging::{gaussian_kernel, BlurKernel, Coverage, Micrograph};
use crate::nn::{init_plain, AdamState, GraphBuilder, LayerKind, Mode, Network, Scalar, Tensor, WeightMode};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Fitted polynomial of final training mean squared errors against coverage.
pub fn p_raw(c: f64) -> Result<f64> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::invalid(format!("coverage fraction {c} outside (0, 1]")));
    }
    Ok(P_RAW_COEFFS[0] + P_RAW_COEFFS[1] * c + P_RAW_COEFFS[2] * c * c)
}

pub const P_RAW_COEFFS: [f64; 3] = [0.002211, -0.037887, 0.289451];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleMode {
    /// Divide by the fitted polynomial, normalized over the coverage set.
    FixedPolynomial,
    /// Track per-coverage MSEs with an exponential moving average seeded
    /// from the polynomial.
    EmaTracked,
}

/// Normalized per-coverage loss scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageScale {
    mode: ScaleMode,
    steps: Vec<usize>,
    /// Tracked raw MSE per coverage step (EMA mode); polynomial values at
    /// construction.
    tracked: Vec<f64>,
    ema_decay: f64,
}

impl CoverageScale {
    /// Scale over the published training coverage set s in [4, 10].
    pub fn training_set(mode: ScaleMode) -> Self {
        CoverageScale::new((4..=10).collect(), mode).expect("valid built-in set")
    }

    pub fn new(steps: Vec<usize>, mode: ScaleMode) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::invalid("coverage set must be non-empty"));
        }
        let mut tracked = Vec::with_capacity(steps.len());
        for &s in &steps {
            let c = Coverage::from_step(s)?.fraction();
            let v = p_raw(c)?;
            if !(v > 0.0) {
                return Err(Error::invalid(format!("p_raw({c}) = {v} not positive")));
            }
            tracked.push(v);
        }
        Ok(CoverageScale { mode, steps, tracked, ema_decay: 0.999 })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    fn mean_tracked(&self) -> f64 {
        self.tracked.iter().sum::<f64>() / self.tracked.len() as f64
    }

    /// Normalized scale p(c): raw value divided by the mean over the set.
    pub fn p(&self, c: f64) -> Result<f64> {
        let raw = match self.mode {
            ScaleMode::FixedPolynomial => p_raw(c)?,
            ScaleMode::EmaTracked => match self.lookup(c) {
                Some(i) => self.tracked[i],
                None => p_raw(c)?,
            },
        };
        Ok(raw / self.mean_tracked())
    }

    fn lookup(&self, c: f64) -> Option<usize> {
        self.steps.iter().position(|&s| {
            let sc = 1.0 / ((s * s) as f64);
            (sc - c).abs() < 1e-12
        })
    }

    /// Feed an observed raw MSE for coverage `c` (EMA mode only).
    pub fn observe(&mut self, c: f64, raw_mse: f64) {
        if self.mode != ScaleMode::EmaTracked {
            return;
        }
        if let Some(i) = self.lookup(c) {
            self.tracked[i] = self.ema_decay * self.tracked[i] + (1.0 - self.ema_decay) * raw_mse;
        }
    }
}

/// Loss weights and kernels shared by the training objectives.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub lambda_mse: f64,
    pub lambda_aux: f64,
    pub lambda_one_stage: f64,
    pub predictor_count: usize,
    pub crop_size: usize,
    pub epsilon_guard: f64,
    /// 5x5, sigma 2.5: target blurring for the MSE losses.
    pub eval_blur: BlurKernel,
    /// 3x3, sigma 1.5: generator-output blurring during adversarial training.
    pub adv_blur: BlurKernel,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_mse: 200.0,
            lambda_aux: 200.0,
            lambda_one_stage: 200.0,
            predictor_count: 20,
            crop_size: 5,
            epsilon_guard: 0.1,
            eval_blur: gaussian_kernel(5, 2.5).expect("constant kernel"),
            adv_blur: gaussian_kernel(3, 1.5).expect("constant kernel"),
        }
    }
}

/// Replace output pixels at probing locations with the target's values, so
/// the known pixels contribute nothing to an MSE against that target.
pub fn mask_known_pixels(output: &Micrograph, target: &Micrograph, cov: Coverage) -> Result<Micrograph> {
    if output.height() != target.height() || output.width() != target.width() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            output.height(),
            output.width(),
            target.height(),
            target.width()
        )));
    }
    let s = cov.step();
    let mut out = output.clone();
    let w = output.width();
    for i in (0..output.height()).step_by(s) {
        for j in (0..w).step_by(s) {
            out.values_mut()[i * w + j] = target.get(i, j);
        }
    }
    Ok(out)
}

/// Tensor variant of [`mask_known_pixels`] for (n, h, w, 1) batches.
pub fn mask_known_pixels_tensor<T: Scalar>(output: &mut Tensor<T>, target: &Tensor<T>, cov: Coverage) {
    assert_eq!(output.shape(), target.shape());
    let [n, h, w, c] = output.shape();
    debug_assert_eq!(c, 1);
    let s = cov.step();
    for b in 0..n {
        for i in (0..h).step_by(s) {
            for j in (0..w).step_by(s) {
                *output.at_mut(b, i, j, 0) = target.at(b, i, j, 0);
            }
        }
    }
}

/// One evaluated loss term: the raw scaled value, the clipped value, and the
/// coefficient that multiplies d(MSE)/d(output) in backward.
#[derive(Debug, Clone, Copy)]
pub struct LossTerm {
    pub raw: f64,
    pub effective: f64,
    pub grad_coeff: f64,
}

/// Blurred-target generator loss: ALRC(lambda * MSE / p(c)).
pub fn loss_mse_blurred(
    mse: f64,
    c: f64,
    scale: &CoverageScale,
    cfg: &LossConfig,
    alrc: &mut AlrcState,
) -> Result<LossTerm> {
    let p = scale.p(c)?;
    let coeff = cfg.lambda_mse / p;
    let raw = coeff * mse;
    let clip = alrc_apply(raw, alrc)?;
    Ok(LossTerm { raw, effective: clip.effective_loss, grad_coeff: clip.grad_scale * coeff })
}

/// Unblurred-target generator loss homogenized by the predictor mean:
/// ALRC(lambda * mu1 * MSE / (p(c) * max(mu_m, eps))). `mu1` and `mu_m` are
/// treated as constants by downstream differentiation.
pub fn loss_mse_homogenized(
    mse: f64,
    c: f64,
    mu_m: f64,
    scale: &CoverageScale,
    cfg: &LossConfig,
    alrc: &mut AlrcState,
) -> Result<LossTerm> {
    let p = scale.p(c)?;
    let mu1 = alrc.mu1();
    let coeff = cfg.lambda_mse * mu1 / (p * mu_m.max(cfg.epsilon_guard));
    let raw = coeff * mse;
    let clip = alrc_apply(raw, alrc)?;
    Ok(LossTerm { raw, effective: clip.effective_loss, grad_coeff: clip.grad_scale * coeff })
}

/// Auxiliary trainer loss against the half-size blurred target:
/// ALRC(lambda_aux * MSE / p(c)).
pub fn loss_aux(
    mse: f64,
    c: f64,
    scale: &CoverageScale,
    cfg: &LossConfig,
    alrc: &mut AlrcState,
) -> Result<LossTerm> {
    let p = scale.p(c)?;
    let coeff = cfg.lambda_aux / p;
    let raw = coeff * mse;
    let clip = alrc_apply(raw, alrc)?;
    Ok(LossTerm { raw, effective: clip.effective_loss, grad_coeff: clip.grad_scale * coeff })
}

/// One-stage generator loss: ALRC(lambda * MSE), no coverage scaling.
pub fn loss_one_stage(mse: f64, cfg: &LossConfig, alrc: &mut AlrcState) -> Result<LossTerm> {
    let raw = cfg.lambda_one_stage * mse;
    let clip = alrc_apply(raw, alrc)?;
    Ok(LossTerm { raw, effective: clip.effective_loss, grad_coeff: clip.grad_scale * cfg.lambda_one_stage })
}

/// Least-squares discriminator objective over the scale set:
/// mean of D(fake)^2 + (D(real) - 1)^2.
pub fn loss_discriminator(d_scores_fake: &[f64], d_scores_real: &[f64]) -> f64 {
    assert_eq!(d_scores_fake.len(), d_scores_real.len());
    let n = d_scores_fake.len() as f64;
    d_scores_fake
        .iter()
        .zip(d_scores_real)
        .map(|(f, r)| f * f + (r - 1.0) * (r - 1.0))
        .sum::<f64>()
        / n
}

/// Least-squares generator objective: mean of (D(fake) - 1)^2.
pub fn loss_generator_adv(d_scores_fake: &[f64]) -> f64 {
    let n = d_scores_fake.len() as f64;
    d_scores_fake.iter().map(|f| (f - 1.0) * (f - 1.0)).sum::<f64>() / n
}

/// Total generator loss during adversarial fine-tuning: unweighted sum of
/// the (blurred-output) MSE term, the auxiliary term, and the adversarial
/// term.
pub fn loss_generator_total(mse_term: f64, aux_term: f64, adv_term: f64) -> f64 {
    mse_term + aux_term + adv_term
}

/// Mean squared error between two same-shaped tensors, in f64.
pub fn tensor_mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let n = a.len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.into_f64() - y.into_f64();
            d * d
        })
        .sum::<f64>()
        / n
}

/// Gradient of `coeff * MSE(out, target)` with respect to `out`.
pub fn mse_grad<T: Scalar>(out: &Tensor<T>, target: &Tensor<T>, coeff: f64) -> Tensor<T> {
    assert_eq!(out.shape(), target.shape());
    let scale = T::from_f64(2.0 * coeff / out.len() as f64);
    let mut g = Tensor::zeros(out.shape());
    for ((gv, &o), &t) in g.data_mut().iter_mut().zip(out.data()).zip(target.data()) {
        *gv = scale * (o - t);
    }
    g
}

fn random_crop_flat<T: Scalar>(d: usize, target: &Micrograph, rng: &mut impl Rng) -> Tensor<T> {
    let oy = rng.gen_range(0..=target.height() - d);
    let ox = rng.gen_range(0..=target.width() - d);
    let mut data = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            data.push(T::from_f64(target.get(oy + i, ox + j)));
        }
    }
    Tensor::from_vec([1, 1, 1, d * d], data)
}

/// N small dense networks mapping a d x d crop to one non-negative scalar,
/// trained to predict the scaled unblurred generator MSE.
pub struct PredictorEnsemble<T: Scalar> {
    members: Vec<Network<T>>,
    optimizers: Vec<AdamState<T>>,
    crop_size: usize,
}

fn predictor_spec(d: usize) -> crate::nn::NetworkSpec {
    let mut b = GraphBuilder::new(1);
    let l1 = b.push("dense1", LayerKind::Linear { out_f: 32, mode: WeightMode::Plain, bias: true }, 0);
    let r1 = b.push("relu1", LayerKind::Relu, l1);
    let l2 = b.push("dense2", LayerKind::Linear { out_f: 32, mode: WeightMode::Plain, bias: true }, r1);
    let r2 = b.push("relu2", LayerKind::Relu, l2);
    let l3 = b.push("head", LayerKind::Linear { out_f: 1, mode: WeightMode::Plain, bias: true }, r2);
    b.push("nonneg", LayerKind::Softplus, l3);
    let _ = d;
    b.finish()
}

impl<T: Scalar> PredictorEnsemble<T> {
    pub fn new(count: usize, crop_size: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut members = Vec::with_capacity(count);
        let mut optimizers = Vec::with_capacity(count);
        for _ in 0..count {
            let mut net = Network::build(predictor_spec(crop_size), &[[1, 1, 1, crop_size * crop_size]])?;
            init_plain(&mut net, 0.05, rng);
            optimizers.push(AdamState::new(&net));
            members.push(net);
        }
        Ok(PredictorEnsemble { members, optimizers, crop_size })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn crop_size(&self) -> usize {
        self.crop_size
    }

    pub fn members(&self) -> &[Network<T>] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [Network<T>] {
        &mut self.members
    }

    fn random_crop(&self, target: &Micrograph, rng: &mut impl Rng) -> Tensor<T> {
        random_crop_flat(self.crop_size, target, rng)
    }

    fn check_target(&self, target: &Micrograph) -> Result<()> {
        if target.height() < self.crop_size || target.width() < self.crop_size {
            return Err(Error::invalid(format!(
                "target {}x{} smaller than crop size {}",
                target.height(),
                target.width(),
                self.crop_size
            )));
        }
        Ok(())
    }

    /// One independent regression step per member against the shared scalar
    /// label; returns the mean member loss.
    pub fn train_step(
        &mut self,
        target: &Micrograph,
        label: f64,
        lr: f64,
        beta1: f64,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        self.check_target(target)?;
        let mut total = 0.0;
        let label_t = T::from_f64(label);
        let d = self.crop_size;
        for (net, opt) in self.members.iter_mut().zip(self.optimizers.iter_mut()) {
            let crop = random_crop_flat(d, target, rng);
            let mut dummy = rand::rngs::mock::StepRng::new(0, 1);
            let trace = net.forward(&[crop], Mode::Train, &mut dummy)?;
            let out = trace.output().data()[0];
            let err = out - label_t;
            total += (err.into_f64()) * (err.into_f64());
            let grad = Tensor::from_vec([1, 1, 1, 1], vec![T::from_f64(2.0) * err]);
            let grads = net.backward(&trace, grad)?;
            opt.step(net, &grads, lr, beta1);
        }
        Ok(total / self.members.len() as f64)
    }

    /// Mean member output on fresh random crops.
    pub fn predict_mean(&mut self, target: &Micrograph, rng: &mut impl Rng) -> Result<f64> {
        self.check_target(target)?;
        let mut total = 0.0;
        let count = self.members.len();
        for mi in 0..count {
            let crop = self.random_crop(target, rng);
            let mut dummy = rand::rngs::mock::StepRng::new(0, 1);
            let trace = self.members[mi].forward(&[crop], Mode::Eval, &mut dummy)?;
            total += trace.output().data()[0].into_f64();
        }
        Ok(total / count as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alrc::AlrcState;
    use crate::imaging::ValueRange;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Independent oracle for the normalized scale: direct summation over
    /// the seven training coverages.
    fn p_oracle(c: f64) -> f64 {
        let raw = |x: f64| 0.002211 - 0.037887 * x + 0.289451 * x * x;
        let mean: f64 = (4..=10).map(|s| raw(1.0 / ((s * s) as f64))).sum::<f64>() / 7.0;
        raw(c) / mean
    }

    #[test]
    fn p_raw_matches_hand_arithmetic() {
        assert!((p_raw(1.0 / 16.0).unwrap() - 9.7373e-4).abs() < 1e-8);
        assert!((p_raw(0.01).unwrap() - 1.86108e-3).abs() < 1e-8);
        // Constant term at c -> 0.
        assert!((p_raw(1e-12).unwrap() - 0.002211).abs() < 1e-9);
        assert!(p_raw(0.0).is_err());
        assert!(p_raw(1.5).is_err());
    }

    #[test]
    fn p_normalization_and_reference_values() {
        let scale = CoverageScale::training_set(ScaleMode::FixedPolynomial);
        let mean: f64 = scale
            .steps()
            .iter()
            .map(|&s| scale.p(1.0 / ((s * s) as f64)).unwrap())
            .sum::<f64>()
            / 7.0;
        assert!((mean - 1.0).abs() < 1e-9, "mean of p over the set = {mean}");
        assert!((scale.p(1.0 / 16.0).unwrap() - p_oracle(1.0 / 16.0)).abs() < 1e-9);
        assert!((scale.p(0.01).unwrap() - p_oracle(0.01)).abs() < 1e-9);
        assert!((scale.p(1.0 / 16.0).unwrap() - 0.6547).abs() < 1e-4);
        assert!((scale.p(0.01).unwrap() - 1.2514).abs() < 1e-4);
    }

    #[test]
    fn empty_coverage_set_rejected() {
        assert!(CoverageScale::new(vec![], ScaleMode::FixedPolynomial).is_err());
    }

    #[test]
    fn ema_mode_tracks_observations() {
        let mut scale = CoverageScale::new(vec![4, 5], ScaleMode::EmaTracked).unwrap();
        let c4 = 1.0 / 16.0;
        let before = scale.p(c4).unwrap();
        for _ in 0..5000 {
            scale.observe(c4, 0.01);
        }
        let after = scale.p(c4).unwrap();
        assert!(after > before, "observing larger MSEs must raise the scale");
    }

    #[test]
    fn mask_replaces_exactly_the_probing_lattice() {
        let out = Micrograph::constant(4, 4, 0.0, ValueRange::Unit).unwrap();
        let tgt = Micrograph::constant(4, 4, 1.0, ValueRange::Unit).unwrap();
        let cov = Coverage::from_step(2).unwrap();
        let masked = mask_known_pixels(&out, &tgt, cov).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i % 2 == 0 && j % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(masked.get(i, j), expect);
            }
        }
        // s = 1 replaces everything.
        let all = mask_known_pixels(&out, &tgt, Coverage::from_step(1).unwrap()).unwrap();
        assert!(all.values().iter().all(|&v| v == 1.0));
        // Masked probing pixels contribute zero MSE.
        let probed_sq: f64 = (0..4)
            .step_by(2)
            .flat_map(|i| (0..4).step_by(2).map(move |j| (i, j)))
            .map(|(i, j)| (masked.get(i, j) - tgt.get(i, j)).powi(2))
            .sum();
        assert_eq!(probed_sq, 0.0);
    }

    #[test]
    fn blurred_loss_arithmetic() {
        let scale = CoverageScale::training_set(ScaleMode::FixedPolynomial);
        let cfg = LossConfig::default();
        // Wide-open clip state so ALRC passes the value through.
        let mut alrc = AlrcState::new(1e6, 1e12 + 1e12, 0.999, 0.999, 3.0).unwrap();
        // Uniform difference of 0.1 -> MSE 0.01.
        let term = loss_mse_blurred(0.01, 1.0 / 16.0, &scale, &cfg, &mut alrc).unwrap();
        assert!((term.raw - 3.0548).abs() < 1e-3, "raw {}", term.raw);
        assert_eq!(term.raw, term.effective);
        // Zero MSE -> zero loss.
        let mut alrc2 = AlrcState::default();
        let zero = loss_mse_blurred(0.0, 0.04, &scale, &cfg, &mut alrc2).unwrap();
        assert_eq!(zero.effective, 0.0);
    }

    #[test]
    fn blurred_loss_clips_outliers() {
        let scale = CoverageScale::training_set(ScaleMode::FixedPolynomial);
        let cfg = LossConfig::default();
        let mut alrc = AlrcState::new(2.0, 5.0, 0.999, 0.999, 3.0).unwrap();
        let t = alrc.threshold();
        let term = loss_mse_blurred(10.0, 1.0 / 16.0, &scale, &cfg, &mut alrc).unwrap();
        assert!(term.raw > t);
        assert!(term.effective <= t);
    }

    #[test]
    fn homogenized_loss_cancellation_and_guard() {
        let scale = CoverageScale::training_set(ScaleMode::FixedPolynomial);
        let cfg = LossConfig::default();
        // Oracle predictor: mu_m equals the true scaled MSE.
        for (mse, c) in [(0.01, 1.0 / 16.0), (0.002, 0.01), (0.03, 1.0 / 49.0)] {
            let mut alrc = AlrcState::default();
            let p = scale.p(c).unwrap();
            let scaled = cfg.lambda_mse * mse / p;
            assert!(scaled >= cfg.epsilon_guard);
            let mu1 = alrc.mu1();
            let term = loss_mse_homogenized(mse, c, scaled, &scale, &cfg, &mut alrc).unwrap();
            assert!(
                (term.raw - mu1).abs() < 1e-9,
                "cancellation broke: raw {} vs mu1 {mu1}",
                term.raw
            );
        }
        // Small mu_m falls back to the epsilon guard.
        let mut alrc = AlrcState::default();
        let term_guarded = loss_mse_homogenized(0.01, 1.0 / 16.0, 0.01, &scale, &cfg, &mut alrc).unwrap();
        let mut alrc2 = AlrcState::default();
        let term_eps = loss_mse_homogenized(0.01, 1.0 / 16.0, cfg.epsilon_guard, &scale, &cfg, &mut alrc2).unwrap();
        assert_eq!(term_guarded.raw, term_eps.raw);
        // Perfect output -> zero loss.
        let mut alrc3 = AlrcState::default();
        let zero = loss_mse_homogenized(0.0, 1.0 / 16.0, 1.0, &scale, &cfg, &mut alrc3).unwrap();
        assert_eq!(zero.effective, 0.0);
    }

    #[test]
    fn scaled_losses_equalize_across_coverages() {
        // With MSEs lying exactly on the fitted polynomial, the scaled
        // losses are equal across coverages by construction.
        let scale = CoverageScale::training_set(ScaleMode::FixedPolynomial);
        let cfg = LossConfig::default();
        let mut values = Vec::new();
        for s in 4..=10usize {
            let c = 1.0 / ((s * s) as f64);
            let mse = p_raw(c).unwrap();
            let mut alrc = AlrcState::new(1e6, 2e12, 0.999, 0.999, 3.0).unwrap();
            let term = loss_mse_blurred(mse, c, &scale, &cfg, &mut alrc).unwrap();
            values.push(term.raw);
        }
        let first = values[0];
        for v in &values {
            assert!((v - first).abs() / first < 1e-6, "spread: {values:?}");
        }
    }

    #[test]
    fn adversarial_losses() {
        assert_eq!(loss_discriminator(&[0.0; 3], &[1.0; 3]), 0.0);
        assert_eq!(loss_discriminator(&[1.0; 3], &[0.0; 3]), 2.0);
        assert_eq!(loss_discriminator(&[0.5; 3], &[0.5; 3]), 0.5);
        assert_eq!(loss_generator_adv(&[1.0; 3]), 0.0);
        assert_eq!(loss_generator_adv(&[0.0; 3]), 1.0);
        let g = loss_generator_adv(&[0.5, 1.0, 0.0]);
        assert!((g - 5.0 / 12.0).abs() < 1e-15);
        assert_eq!(loss_generator_total(0.0, 0.0, 0.0), 0.0);
        assert_eq!(loss_generator_total(1.0, 2.0, 3.0), 6.0);
    }

    #[test]
    fn predictor_constant_label_identities() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut ens = PredictorEnsemble::<f64>::new(2, 5, &mut rng).unwrap();
        let target = crate::imaging::synth_micrograph(3, 32, crate::imaging::SynthStyle::GaussianField).unwrap();
        // Mean of member outputs is the plain average.
        let mu = ens.predict_mean(&target, &mut rng).unwrap();
        assert!(mu.is_finite() && mu >= 0.0);
        // Too-small target is rejected.
        let tiny = Micrograph::constant(3, 3, 0.5, ValueRange::Unit).unwrap();
        assert!(ens.predict_mean(&tiny, &mut rng).is_err());
        assert!(ens.train_step(&tiny, 1.0, 1e-3, 0.9, &mut rng).is_err());
    }

    #[test]
    fn predictor_mean_is_finite_over_many_targets() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut ens = PredictorEnsemble::<f32>::new(4, 5, &mut rng).unwrap();
        for seed in 0..200 {
            let style = match seed % 3 {
                0 => crate::imaging::SynthStyle::GaussianField,
                1 => crate::imaging::SynthStyle::Lattice,
                _ => crate::imaging::SynthStyle::Gradient,
            };
            let t = crate::imaging::synth_micrograph(seed, 24, style).unwrap();
            let mu = ens.predict_mean(&t, &mut rng).unwrap();
            assert!(mu.is_finite(), "seed {seed} gave {mu}");
        }
    }

    /// Trained on targets whose noise level determines the label, the
    /// ensemble's mean prediction correlates strongly with the truth.
    #[test]
    fn predictor_learns_noise_variance() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut ens = PredictorEnsemble::<f32>::new(6, 5, &mut rng).unwrap();
        let make_example = |rng: &mut ChaCha12Rng| -> (Micrograph, f64) {
            let sigma: f64 = rng.gen_range(0.02..0.25);
            let vals: Vec<f64> = (0..32 * 32)
                .map(|_| (0.5 + sigma * rng.gen_range(-1.0..1.0f64)).clamp(0.0, 1.0))
                .collect();
            let img = Micrograph::new(32, 32, vals, ValueRange::Unit).unwrap();
            // Label proportional to the noise variance, like a scaled MSE.
            (img, 50.0 * sigma * sigma)
        };
        for _ in 0..40_000 {
            let (img, label) = make_example(&mut rng);
            ens.train_step(&img, label, 1e-3, 0.9, &mut rng).unwrap();
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..200 {
            let (img, label) = make_example(&mut rng);
            xs.push(label);
            ys.push(ens.predict_mean(&img, &mut rng).unwrap());
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let cov: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = xs.iter().map(|a| (a - mx) * (a - mx)).sum();
        let vy: f64 = ys.iter().map(|b| (b - my) * (b - my)).sum();
        let r = cov / (vx.sqrt() * vy.sqrt());
        assert!(r > 0.8, "Pearson r = {r}");
    }
}
