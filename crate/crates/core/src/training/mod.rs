//! Training orchestration: the two-phase (non-adversarial, adversarial)
//! two-stage regime, the one-stage policy, experience replay, metrics
//! logging, and checkpoint emission.

pub mod replay;
pub mod schedule;

pub use replay::{ReplayBuffer, REPLAY_PROBABILITY};
pub use schedule::{NetRole, OneStageSchedule, ScheduleTable};

use crate::alrc::AlrcState;
use crate::checkpoint::{arch_hash, Checkpoint};
use crate::error::{Error, Result};
use crate::imaging::{
    augment, blur, downsample_nearest, interpolate, upsample_nearest, BlurKernel, Coverage, InterpMethod,
    Micrograph,
};
use crate::losses::{
    loss_aux, loss_discriminator, loss_generator_adv, loss_generator_total, loss_mse_blurred,
    loss_mse_homogenized, loss_one_stage, mask_known_pixels_tensor, mse_grad, tensor_mse, CoverageScale,
    LossConfig, PredictorEnsemble, ScaleMode,
};
use crate::models::{
    build_discriminators, build_one_stage, build_two_stage, micrograph_to_tensor, DiscriminatorSet,
    DiscriminatorSetSpec, Generator, GeneratorSpec, GeneratorVariant, OneStageGenerator, TwoStageGenerator,
};
use crate::nn::{init_discriminator_weights, init_generator_weights, AdamState, Mode, Scalar, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainVariant {
    /// One coverage step for the whole run.
    IndividualCoverage { step: usize },
    /// Coverage step drawn uniformly from [4, 10] per example.
    Unified,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub variant: TrainVariant,
    pub target_side: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub batch_size: usize,
    pub non_adversarial_iterations: usize,
    pub adversarial_iterations: usize,
    /// Blurred targets (the default loss) or unblurred targets homogenized
    /// by the loss-predictor ensemble.
    pub blur_targets: bool,
    pub seed: u64,
    /// Checkpoint cadence in iterations; 0 emits only the final checkpoint.
    pub checkpoint_every: usize,
    pub replay_capacity: usize,
    pub scale_mode: ScaleMode,
}

impl TrainRunConfig {
    /// Desk-scale two-stage defaults (batch size 1 per the two-stage policy).
    pub fn desk_two_stage(variant: TrainVariant) -> Self {
        TrainRunConfig {
            variant,
            target_side: 64,
            base_channels: 16,
            depth: 2,
            batch_size: 1,
            non_adversarial_iterations: 2000,
            adversarial_iterations: 0,
            blur_targets: true,
            seed: 0,
            checkpoint_every: 0,
            replay_capacity: 512,
            scale_mode: ScaleMode::FixedPolynomial,
        }
    }

    /// Desk-scale one-stage defaults (batch size 16 per the one-stage policy).
    pub fn desk_one_stage(step: usize) -> Self {
        TrainRunConfig {
            variant: TrainVariant::IndividualCoverage { step },
            target_side: 64,
            base_channels: 16,
            depth: 2,
            batch_size: 16,
            non_adversarial_iterations: 1000,
            adversarial_iterations: 0,
            blur_targets: true,
            seed: 0,
            checkpoint_every: 0,
            replay_capacity: 512,
            scale_mode: ScaleMode::FixedPolynomial,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.non_adversarial_iterations == 0 {
            return Err(Error::Config("need at least one non-adversarial iteration".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if let TrainVariant::IndividualCoverage { step } = self.variant {
            if step == 0 {
                return Err(Error::Config("coverage step must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Line-oriented metrics: `iteration,term,raw,effective,lr,beta`.
#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    rows: String,
}

impl MetricsLog {
    pub fn new() -> Self {
        MetricsLog { rows: String::from("iteration,term,raw,effective,lr,beta\n") }
    }

    pub fn push(&mut self, iteration: usize, term: &str, raw: f64, effective: f64, lr: f64, beta: f64) {
        let _ = writeln!(self.rows, "{iteration},{term},{raw:.9e},{effective:.9e},{lr:.6e},{beta:.4}");
    }

    pub fn as_csv(&self) -> &str {
        &self.rows
    }
}

fn draw_augment(rng: &mut ChaCha12Rng, img: &Micrograph) -> Micrograph {
    let flip_h = rng.gen_bool(0.5);
    let flip_v = rng.gen_bool(0.5);
    let rot: u8 = rng.gen_range(0..4);
    augment(img, flip_h, flip_v, rot).expect("square training image")
}

fn tensor_blur<T: Scalar>(x: &Tensor<T>, k: &BlurKernel) -> Tensor<T> {
    let [n, h, w, c] = x.shape();
    debug_assert_eq!(c, 1);
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        let plane: Vec<f64> = x.data()[b * h * w..(b + 1) * h * w].iter().map(|v| v.into_f64()).collect();
        let blurred = crate::imaging::correlate_reflect(&plane, h, w, k);
        for (o, v) in out.data_mut()[b * h * w..(b + 1) * h * w].iter_mut().zip(blurred) {
            *o = T::from_f64(v);
        }
    }
    out
}

fn tensor_blur_adjoint<T: Scalar>(g: &Tensor<T>, k: &BlurKernel) -> Tensor<T> {
    let [n, h, w, c] = g.shape();
    debug_assert_eq!(c, 1);
    let mut out = Tensor::zeros(g.shape());
    for b in 0..n {
        let plane: Vec<f64> = g.data()[b * h * w..(b + 1) * h * w].iter().map(|v| v.into_f64()).collect();
        let adj = crate::imaging::correlate_reflect_adjoint(&plane, h, w, k);
        for (o, v) in out.data_mut()[b * h * w..(b + 1) * h * w].iter_mut().zip(adj) {
            *o = T::from_f64(v);
        }
    }
    out
}

/// Shuffled epoch traversal; reshuffles when the dataset is exhausted.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(len: usize, rng: &mut ChaCha12Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        shuffle(&mut order, rng);
        EpochSampler { order, pos: 0 }
    }

    fn next(&mut self, rng: &mut ChaCha12Rng) -> usize {
        if self.pos >= self.order.len() {
            shuffle(&mut self.order, rng);
            self.pos = 0;
        }
        let idx = self.order[self.pos];
        self.pos += 1;
        idx
    }
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha12Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

pub struct TwoStageTrainResult {
    pub generator: TwoStageGenerator<f32>,
    pub discriminators: Option<DiscriminatorSet<f32>>,
    pub predictors: Option<PredictorEnsemble<f32>>,
    pub metrics: MetricsLog,
    pub alrc_mse: AlrcState,
    pub alrc_aux: AlrcState,
    pub scale: CoverageScale,
    pub checkpoints: Vec<PathBuf>,
}

fn draw_step(variant: TrainVariant, rng: &mut ChaCha12Rng) -> usize {
    match variant {
        TrainVariant::IndividualCoverage { step } => step,
        TrainVariant::Unified => rng.gen_range(4..=10),
    }
}

fn two_stage_checkpoint(
    result_dir: &Path,
    iteration: usize,
    spec: &GeneratorSpec,
    gen: &TwoStageGenerator<f32>,
    alrc_mse: &AlrcState,
    alrc_aux: &AlrcState,
    scale: &CoverageScale,
    tag: &str,
) -> Result<PathBuf> {
    let mut ck = Checkpoint::new();
    let arch = serde_json::json!({"kind": "two_stage", "generator": spec});
    ck.set_header("arch", arch.clone());
    ck.set_header("arch_hash", serde_json::json!(arch_hash(&arch)));
    ck.set_header("iteration", serde_json::json!(iteration));
    ck.set_header("alrc_mse", serde_json::to_value(alrc_mse).expect("serializable"));
    ck.set_header("alrc_aux", serde_json::to_value(alrc_aux).expect("serializable"));
    ck.set_header("coverage_scale", serde_json::to_value(scale).expect("serializable"));
    ck.put_network("inner", &gen.inner);
    ck.put_network("outer", &gen.outer);
    ck.put_network("trainer", &gen.trainer);
    std::fs::create_dir_all(result_dir)?;
    let path = result_dir.join(format!("{tag}{iteration}.bin"));
    ck.save(&path)?;
    Ok(path)
}

/// Two-stage training: non-adversarial MSE phase (optionally homogenized by
/// the predictor ensemble), then an optional adversarial phase with the
/// three-scale discriminator set.
pub fn train_two_stage(
    cfg: &TrainRunConfig,
    dataset: &[Micrograph],
    ckpt_dir: Option<&Path>,
) -> Result<TwoStageTrainResult> {
    cfg.validate()?;
    if cfg.batch_size != 1 {
        return Err(Error::Config("two-stage training uses batch size 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let side = cfg.target_side;
    for (i, m) in dataset.iter().enumerate() {
        if m.height() != side || m.width() != side {
            return Err(Error::Config(format!(
                "training image {i} is {}x{}, expected {side}x{side}",
                m.height(),
                m.width()
            )));
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let spec = GeneratorSpec {
        variant: GeneratorVariant::TwoStage,
        target_side: side,
        base_channels: cfg.base_channels,
        depth: cfg.depth,
    };
    let mut gen = build_two_stage::<f32>(&spec)?;
    init_generator_weights(&mut gen.inner, &mut rng)?;
    init_generator_weights(&mut gen.trainer, &mut rng)?;
    init_generator_weights(&mut gen.outer, &mut rng)?;
    let mut adam_inner = AdamState::new(&gen.inner);
    let mut adam_outer = AdamState::new(&gen.outer);
    let mut adam_trainer = AdamState::new(&gen.trainer);

    let sched = ScheduleTable::new(cfg.non_adversarial_iterations, cfg.adversarial_iterations);
    let loss_cfg = LossConfig::default();
    let mut scale = CoverageScale::training_set(cfg.scale_mode);
    let mut alrc_mse = AlrcState::default();
    let mut alrc_aux = AlrcState::default();
    let mut metrics = MetricsLog::new();
    let mut buf: ReplayBuffer<(usize, usize)> = ReplayBuffer::new(cfg.replay_capacity);
    let mut sampler = EpochSampler::new(dataset.len(), &mut rng);

    let mut predictors = if cfg.blur_targets {
        None
    } else {
        Some(PredictorEnsemble::<f32>::new(loss_cfg.predictor_count, loss_cfg.crop_size, &mut rng)?)
    };

    let mut discs = if cfg.adversarial_iterations > 0 {
        let dspec = DiscriminatorSetSpec::for_target_side(side, cfg.base_channels);
        let mut set = build_discriminators::<f32>(&dspec, side)?;
        for m in set.members.iter_mut() {
            init_discriminator_weights(m, &mut rng)?;
        }
        let opts: Vec<AdamState<f32>> = set.members.iter().map(AdamState::new).collect();
        Some((set, opts))
    } else {
        None
    };

    let mut checkpoints = Vec::new();
    let total = sched.total();
    let mut frozen_now = false;

    for i in 0..total {
        let want_frozen = sched.bn_frozen_at(i);
        if want_frozen != frozen_now {
            gen.inner.set_bn_frozen(want_frozen);
            gen.outer.set_bn_frozen(want_frozen);
            gen.trainer.set_bn_frozen(want_frozen);
            frozen_now = want_frozen;
        }

        let fresh_idx = sampler.next(&mut rng);
        let fresh_s = draw_step(cfg.variant, &mut rng);
        let ((idx, s), _replayed) = buf.replay_maybe((fresh_idx, fresh_s), &mut rng);
        let cov = Coverage::from_step(s)?;
        let c = cov.fraction();

        let target = draw_augment(&mut rng, &dataset[idx]);
        let small = downsample_nearest(&target, cov);
        let up = upsample_nearest(&small, side)?;
        let x = micrograph_to_tensor::<f32>(&up);
        let blurred = blur(&target, &loss_cfg.eval_blur);
        let half_blur = interpolate(&blurred, side / 2, InterpMethod::Bilinear)?;
        let half_t = micrograph_to_tensor::<f32>(&half_blur);

        let inner_trace = gen.inner.forward(&[x.clone()], Mode::Train, &mut rng)?;
        let feats = inner_trace.output().clone();
        let trainer_trace = gen.trainer.forward(&[feats.clone()], Mode::Train, &mut rng)?;
        let outer_trace = gen.outer.forward(&[feats, x.clone()], Mode::Train, &mut rng)?;
        let out = outer_trace.output().clone();

        let adversarial = sched.is_adversarial(i);
        let loss_target = if cfg.blur_targets { &blurred } else { &target };
        let tgt_t = micrograph_to_tensor::<f32>(loss_target);

        // The MSE path sees the generator output blurred by the small kernel
        // during adversarial fine-tuning.
        let out_for_mse = if adversarial { tensor_blur(&out, &loss_cfg.adv_blur) } else { out.clone() };
        let mut masked = out_for_mse.clone();
        mask_known_pixels_tensor(&mut masked, &tgt_t, cov);
        let mse = tensor_mse(&masked, &tgt_t);
        scale.observe(c, mse);

        let mse_term = if cfg.blur_targets {
            loss_mse_blurred(mse, c, &scale, &loss_cfg, &mut alrc_mse)?
        } else {
            let ens = predictors.as_mut().expect("predictors exist on the unblurred path");
            let mu_m = ens.predict_mean(loss_target, &mut rng)?;
            loss_mse_homogenized(mse, c, mu_m, &scale, &loss_cfg, &mut alrc_mse)?
        };

        let tout = trainer_trace.output().clone();
        let aux_mse = tensor_mse(&tout, &half_t);
        let aux_term = loss_aux(aux_mse, c, &scale, &loss_cfg, &mut alrc_aux)?;

        if !(mse_term.effective.is_finite() && aux_term.effective.is_finite()) {
            if let Some(dir) = ckpt_dir {
                let p = two_stage_checkpoint(dir, i, &spec, &gen, &alrc_mse, &alrc_aux, &scale, "diagnostic-")?;
                checkpoints.push(p);
            }
            return Err(Error::State(format!("non-finite loss at iteration {i}")));
        }

        // Generator gradient: masked pixels self-cancel (output replaced by
        // the target there), so the gradient is zero on the probing lattice.
        let d_masked = mse_grad(&masked, &tgt_t, mse_term.grad_coeff);
        let mut d_out = if adversarial { tensor_blur_adjoint(&d_masked, &loss_cfg.adv_blur) } else { d_masked };

        let mut adv_value = 0.0;
        if adversarial {
            if let Some((set, opts)) = discs.as_mut() {
                let to_signed = |t: &Tensor<f32>| {
                    let mut s = t.clone();
                    for v in s.data_mut().iter_mut() {
                        *v = 2.0 * *v - 1.0;
                    }
                    s
                };
                let fake = to_signed(&out);
                let real = to_signed(&micrograph_to_tensor::<f32>(&target));
                let n_members = set.members.len() as f64;

                // Discriminator update.
                if let Some((lr_d, beta_d)) = sched.at(i, NetRole::Discriminators)? {
                    let mut fake_scores = Vec::new();
                    let mut real_scores = Vec::new();
                    for (m, opt) in set.members.iter_mut().zip(opts.iter_mut()) {
                        let tf = m.forward(&[fake.clone()], Mode::Train, &mut rng)?;
                        let tr = m.forward(&[real.clone()], Mode::Train, &mut rng)?;
                        let sf = tf.output().data()[0] as f64;
                        let sr = tr.output().data()[0] as f64;
                        fake_scores.push(sf);
                        real_scores.push(sr);
                        let gf = m.backward(&tf, Tensor::from_vec([1, 1, 1, 1], vec![(2.0 * sf / n_members) as f32]))?;
                        let gr = m.backward(
                            &tr,
                            Tensor::from_vec([1, 1, 1, 1], vec![(2.0 * (sr - 1.0) / n_members) as f32]),
                        )?;
                        opt.step(m, &gf, lr_d, beta_d);
                        opt.step(m, &gr, lr_d, beta_d);
                    }
                    let ld = loss_discriminator(&fake_scores, &real_scores);
                    metrics.push(i, "d_total", ld, ld, lr_d, beta_d);
                }

                // Generator adversarial term, with fresh crops and no
                // discriminator state updates.
                let mut scores = Vec::new();
                let mut d_fake_total: Option<Tensor<f32>> = None;
                for m in set.members.iter_mut() {
                    let t = m.forward(&[fake.clone()], Mode::Sample, &mut rng)?;
                    let sf = t.output().data()[0] as f64;
                    scores.push(sf);
                    let g = m.backward(
                        &t,
                        Tensor::from_vec([1, 1, 1, 1], vec![(2.0 * (sf - 1.0) / n_members) as f32]),
                    )?;
                    match d_fake_total.as_mut() {
                        Some(acc) => acc.add_assign(&g.inputs[0]),
                        None => d_fake_total = Some(g.inputs[0].clone()),
                    }
                }
                adv_value = loss_generator_adv(&scores);
                if let Some(mut dfake) = d_fake_total {
                    dfake.scale(2.0); // chain through fake = 2 out - 1
                    d_out.add_assign(&dfake);
                }
            }
        }

        // Backward through the three generator networks.
        let outer_grads = gen.outer.backward(&outer_trace, d_out)?;
        let d_tout = mse_grad(&tout, &half_t, aux_term.grad_coeff);
        let trainer_grads = gen.trainer.backward(&trainer_trace, d_tout)?;
        let mut d_feats = outer_grads.inputs[0].clone();
        d_feats.add_assign(&trainer_grads.inputs[0]);
        let inner_grads = gen.inner.backward(&inner_trace, d_feats)?;

        if let Some((lr, beta)) = sched.at(i, NetRole::Generator)? {
            adam_outer.step(&mut gen.outer, &outer_grads, lr, beta);
            adam_inner.step(&mut gen.inner, &inner_grads, lr, beta);
            metrics.push(i, "g_mse", mse_term.raw, mse_term.effective, lr, beta);
            if adversarial {
                let total_g = loss_generator_total(mse_term.effective, aux_term.effective, adv_value);
                metrics.push(i, "g_adv", adv_value, adv_value, lr, beta);
                metrics.push(i, "g_total", total_g, total_g, lr, beta);
            }
        }
        if let Some((lr, beta)) = sched.at(i, NetRole::Trainer)? {
            adam_trainer.step(&mut gen.trainer, &trainer_grads, lr, beta);
            metrics.push(i, "g_aux", aux_term.raw, aux_term.effective, lr, beta);
        }

        // Predictor regression against the scaled unblurred MSE.
        if !cfg.blur_targets {
            if let Some((lr_m, beta_m)) = sched.at(i, NetRole::Predictor)? {
                let ens = predictors.as_mut().expect("predictors exist");
                let label = loss_cfg.lambda_mse * mse / scale.p(c)?;
                let lm = ens.train_step(loss_target, label, lr_m, beta_m, &mut rng)?;
                metrics.push(i, "predictor", lm, lm, lr_m, beta_m);
            }
        }

        buf.offer((idx, s), mse_term.raw);

        if cfg.checkpoint_every > 0 && (i + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = ckpt_dir {
                let p = two_stage_checkpoint(dir, i + 1, &spec, &gen, &alrc_mse, &alrc_aux, &scale, "")?;
                checkpoints.push(p);
            }
        }
    }

    if let Some(dir) = ckpt_dir {
        let p = two_stage_checkpoint(dir, total, &spec, &gen, &alrc_mse, &alrc_aux, &scale, "")?;
        checkpoints.push(p);
    }

    Ok(TwoStageTrainResult {
        generator: gen,
        discriminators: discs.map(|(set, _)| set),
        predictors,
        metrics,
        alrc_mse,
        alrc_aux,
        scale,
        checkpoints,
    })
}

pub struct OneStageTrainResult {
    pub generator: OneStageGenerator<f32>,
    pub metrics: MetricsLog,
    pub alrc: AlrcState,
    pub checkpoints: Vec<PathBuf>,
}

fn one_stage_checkpoint(
    dir: &Path,
    iteration: usize,
    spec: &GeneratorSpec,
    step: usize,
    gen: &OneStageGenerator<f32>,
    alrc: &AlrcState,
    tag: &str,
) -> Result<PathBuf> {
    let mut ck = Checkpoint::new();
    let arch = serde_json::json!({"kind": "one_stage", "generator": spec, "coverage_step": step});
    ck.set_header("arch", arch.clone());
    ck.set_header("arch_hash", serde_json::json!(arch_hash(&arch)));
    ck.set_header("iteration", serde_json::json!(iteration));
    ck.set_header("alrc_mse", serde_json::to_value(alrc).expect("serializable"));
    ck.put_network("net", &gen.net);
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{tag}{iteration}.bin"));
    ck.save(&path)?;
    Ok(path)
}

/// One-stage training: batched, single coverage, stepped learning-rate
/// decay, batch-norm freeze and momentum drop at the halfway point.
pub fn train_one_stage(
    cfg: &TrainRunConfig,
    dataset: &[Micrograph],
    ckpt_dir: Option<&Path>,
) -> Result<OneStageTrainResult> {
    cfg.validate()?;
    let TrainVariant::IndividualCoverage { step } = cfg.variant else {
        return Err(Error::Config("one-stage training uses a single coverage".into()));
    };
    if dataset.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let side = cfg.target_side;
    let cov = Coverage::from_step(step)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let spec = GeneratorSpec {
        variant: GeneratorVariant::OneStage,
        target_side: side,
        base_channels: cfg.base_channels,
        depth: cfg.depth,
    };
    let mut gen = build_one_stage::<f32>(&spec, cov, cfg.batch_size)?;
    init_generator_weights(&mut gen.net, &mut rng)?;
    let mut adam = AdamState::new(&gen.net);
    let sched = OneStageSchedule { total: cfg.non_adversarial_iterations };
    let loss_cfg = LossConfig::default();
    let mut alrc = AlrcState::default();
    let mut metrics = MetricsLog::new();
    let mut buf: ReplayBuffer<usize> = ReplayBuffer::new(cfg.replay_capacity);
    let mut sampler = EpochSampler::new(dataset.len(), &mut rng);
    let mut checkpoints = Vec::new();

    let n_in = gen.input_side;
    let batch = cfg.batch_size;

    for i in 0..sched.total {
        let (lr, beta, frozen) = sched.at(i)?;
        if gen.net.bn_frozen() != frozen {
            gen.net.set_bn_frozen(frozen);
        }

        let mut xb = Tensor::zeros([batch, n_in, n_in, 1]);
        let mut tb = Tensor::zeros([batch, side, side, 1]);
        let mut indices = Vec::with_capacity(batch);
        for b in 0..batch {
            let fresh = sampler.next(&mut rng);
            let (idx, _) = buf.replay_maybe(fresh, &mut rng);
            indices.push(idx);
            let target = draw_augment(&mut rng, &dataset[idx]);
            let small = downsample_nearest(&target, cov);
            let blurred = blur(&target, &loss_cfg.eval_blur);
            for y in 0..n_in {
                for xx in 0..n_in {
                    *xb.at_mut(b, y, xx, 0) = small.get(y, xx) as f32;
                }
            }
            for y in 0..side {
                for xx in 0..side {
                    *tb.at_mut(b, y, xx, 0) = blurred.get(y, xx) as f32;
                }
            }
        }

        let trace = gen.net.forward(&[xb], Mode::Train, &mut rng)?;
        let mut masked = trace.output().clone();
        mask_known_pixels_tensor(&mut masked, &tb, cov);
        let mse = tensor_mse(&masked, &tb);
        let term = loss_one_stage(mse, &loss_cfg, &mut alrc)?;
        if !term.effective.is_finite() {
            if let Some(dir) = ckpt_dir {
                let p = one_stage_checkpoint(dir, i, &spec, step, &gen, &alrc, "diagnostic-")?;
                checkpoints.push(p);
            }
            return Err(Error::State(format!("non-finite loss at iteration {i}")));
        }

        let d_out = mse_grad(&masked, &tb, term.grad_coeff);
        let grads = gen.net.backward(&trace, d_out)?;
        adam.step(&mut gen.net, &grads, lr, beta);
        metrics.push(i, "one_stage", term.raw, term.effective, lr, beta);

        // Per-example errors feed the replay buffer.
        let plane = side * side;
        for (b, &idx) in indices.iter().enumerate() {
            let mut err = 0.0f64;
            for p in 0..plane {
                let d = masked.data()[b * plane + p] as f64 - tb.data()[b * plane + p] as f64;
                err += d * d;
            }
            buf.offer(idx, loss_cfg.lambda_one_stage * err / plane as f64);
        }

        if cfg.checkpoint_every > 0 && (i + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = ckpt_dir {
                let p = one_stage_checkpoint(dir, i + 1, &spec, step, &gen, &alrc, "")?;
                checkpoints.push(p);
            }
        }
    }

    if let Some(dir) = ckpt_dir {
        let p = one_stage_checkpoint(dir, sched.total, &spec, step, &gen, &alrc, "")?;
        checkpoints.push(p);
    }

    Ok(OneStageTrainResult { generator: gen, metrics, alrc, checkpoints })
}

/// Load a generator checkpoint for inference.
pub fn load_generator(path: &Path) -> Result<(Generator<f32>, usize)> {
    let ck = Checkpoint::load(path)?;
    let arch = ck
        .header
        .get("arch")
        .cloned()
        .ok_or_else(|| Error::Checkpoint("missing arch header".into()))?;
    let recorded_hash = ck.header.get("arch_hash").and_then(|v| v.as_str()).unwrap_or_default().to_string();
    if !recorded_hash.is_empty() && recorded_hash != arch_hash(&arch) {
        return Err(Error::Checkpoint("architecture hash mismatch".into()));
    }
    let kind = arch.get("kind").and_then(|v| v.as_str()).unwrap_or_default().to_string();
    let spec: GeneratorSpec = serde_json::from_value(
        arch.get("generator").cloned().ok_or_else(|| Error::Checkpoint("missing generator spec".into()))?,
    )
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    match kind.as_str() {
        "two_stage" => {
            let mut gen = build_two_stage::<f32>(&spec)?;
            ck.load_network("inner", &mut gen.inner)?;
            ck.load_network("outer", &mut gen.outer)?;
            ck.load_network("trainer", &mut gen.trainer)?;
            Ok((Generator::TwoStage(gen), 0))
        }
        "one_stage" => {
            let step = arch.get("coverage_step").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
            if step == 0 {
                return Err(Error::Checkpoint("one-stage checkpoint missing coverage step".into()));
            }
            let mut gen = build_one_stage::<f32>(&spec, Coverage::from_step(step)?, 1)?;
            ck.load_network("net", &mut gen.net)?;
            Ok((Generator::OneStage(gen), step))
        }
        other => Err(Error::Checkpoint(format!("unknown checkpoint kind '{other}'"))),
    }
}
