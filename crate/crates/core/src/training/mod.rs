//! Classifier training, diffusion pretraining, classifier-guided adversarial
//! noise, and bridge fine-tuning.

mod checkpoint;
mod optim;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, ScheduleParams, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{Adam, Ema};

use crate::diffusion::{adbm_loss, bridge_diffuse, ddpm_loss, predict_x0};
use crate::error::{Error, Result};
use crate::harness::Dataset;
use crate::schedule::{BridgeCoefficients, NoiseSchedule};
use crate::tensor::{per_row_cross_entropy, Architecture, Mlp, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub ema_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 128,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            ema_rate: 0.999,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning defaults: a tenth of the pretraining steps at `lr = 1e-4`.
    pub fn finetune_from(pretrain: &TrainConfig) -> Self {
        TrainConfig {
            steps: (pretrain.steps / 10).max(1),
            learning_rate: 1e-4,
            ..pretrain.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive".to_owned()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

/// Settings for the classifier-guided noise used during fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvNoiseConfig {
    pub iters: usize,
    pub step_size: f64,
    /// `ℓ∞` bound on the generated noise.
    pub eps_bound: f64,
    /// Inclusive range the per-step horizon `T` is drawn from.
    pub horizon_range: (usize, usize),
}

impl Default for AdvNoiseConfig {
    fn default() -> Self {
        AdvNoiseConfig {
            iters: 3,
            step_size: 8.0 / 255.0,
            eps_bound: 8.0 / 255.0,
            horizon_range: (100, 200),
        }
    }
}

impl AdvNoiseConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        let (lo, hi) = self.horizon_range;
        if lo < 1 || lo > hi || hi > sched.num_steps() {
            return Err(Error::invalid(format!(
                "horizon range ({lo}, {hi}) must satisfy 1 <= lo <= hi <= {}",
                sched.num_steps()
            )));
        }
        if !(self.eps_bound >= 0.0) || !(self.step_size >= 0.0) {
            return Err(Error::invalid("noise bound and step size must be non-negative".to_owned()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub steps: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Fraction of `data` that `net` labels correctly.
pub fn accuracy(net: &Mlp, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = net.predict(&data.features())?;
    let hits = pred.iter().zip(data.labels()).filter(|(p, y)| **p == *y).count();
    Ok(hits as f64 / data.len() as f64)
}

fn draw_batch(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

fn normal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).expect("finite normals")
}

/// Compact digest of an rng's position, stored in checkpoints.
pub fn rng_digest(rng: &ChaCha8Rng) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let words = rng.get_seed().into_iter().chain(rng.get_stream().to_le_bytes()).chain(rng.get_word_pos().to_le_bytes());
    for b in words {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(what) => Error::Diverged {
            step,
            what: what.to_owned(),
        },
        other => other,
    }
}

/// Cross-entropy training with Adam. Zero steps returns the initialisation.
pub fn train_classifier(arch: Architecture, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<(Mlp, ClassifierReport)> {
    cfg.validate()?;
    train.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Mlp::new(arch, &mut rng)?;
    let mut opt = Adam::new(net.params(), cfg.learning_rate, cfg.adam_betas)?;
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let idx = draw_batch(&mut rng, train.len(), cfg.batch_size);
        let (x, y) = train.gather(&idx);
        let tape = Tape::new();
        let bound = net.bind(&tape);
        let grads = (|| {
            let logits = bound.forward(tape.constant(x), None)?;
            let loss = logits.cross_entropy(&y)?;
            final_loss = loss.item()?;
            let g = tape.backward(loss)?;
            Ok(bound.params().iter().map(|&p| g.get(p)).collect::<Vec<_>>())
        })()
        .map_err(diverged(step))?;
        if !final_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                what: "classifier loss".into(),
            });
        }
        opt.step(net.params_mut(), &grads)?;
    }
    let report = ClassifierReport {
        steps: cfg.steps,
        final_loss,
        train_accuracy: accuracy(&net, train)?,
        test_accuracy: accuracy(&net, test)?,
    };
    Ok((net, report))
}

/// A denoiser together with its EMA shadow and training bookkeeping.
#[derive(Debug, Clone)]
pub struct TrainedDenoiser {
    /// EMA weights, used for sampling.
    pub ema: Mlp,
    pub raw: Mlp,
    pub step: u64,
    pub rng_digest: u64,
    pub losses: Vec<f64>,
}

impl TrainedDenoiser {
    pub fn checkpoint(&self, sched: &NoiseSchedule) -> Checkpoint {
        Checkpoint {
            architecture: self.raw.architecture().clone(),
            schedule: Some(ScheduleParams::of(sched)),
            params: self.raw.params().to_vec(),
            ema: self.ema.params().to_vec(),
            step: self.step,
            rng_digest: self.rng_digest,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(TrainedDenoiser {
            ema: ckpt.model()?,
            raw: ckpt.raw_model()?,
            step: ckpt.step,
            rng_digest: ckpt.rng_digest,
            losses: Vec::new(),
        })
    }
}

/// Standard denoising pretraining with `t ~ U{1..t_max}` per example.
pub fn pretrain_diffusion(
    arch: Architecture,
    sched: &NoiseSchedule,
    data: &Dataset,
    cfg: &TrainConfig,
    t_max: Option<usize>,
) -> Result<TrainedDenoiser> {
    cfg.validate()?;
    data.validate()?;
    let t_max = t_max.unwrap_or(sched.num_steps());
    sched.check_t(t_max, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Mlp::new(arch, &mut rng)?;
    let mut opt = Adam::new(net.params(), cfg.learning_rate, cfg.adam_betas)?;
    let mut ema = Ema::new(net.params(), cfg.ema_rate)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = draw_batch(&mut rng, data.len(), cfg.batch_size);
        let (x0, _) = data.gather(&idx);
        let ts: Vec<usize> = (0..idx.len()).map(|_| rng.random_range(1..=t_max)).collect();
        let eps = normal_tensor(&mut rng, idx.len(), data.dim);
        let tape = Tape::new();
        let bound = net.bind(&tape);
        let (loss, grads) = (|| {
            let loss = ddpm_loss(sched, &bound, tape.constant(x0), &ts, tape.constant(eps))?;
            let g = tape.backward(loss)?;
            Ok((loss.item()?, bound.params().iter().map(|&p| g.get(p)).collect::<Vec<_>>()))
        })()
        .map_err(diverged(step))?;
        opt.step(net.params_mut(), &grads)?;
        ema.update(net.params());
        losses.push(loss);
    }
    let arch = net.architecture().clone();
    Ok(TrainedDenoiser {
        ema: Mlp::from_params(arch, ema.into_shadow())?,
        raw: net,
        step: cfg.steps as u64,
        rng_digest: rng_digest(&rng),
        losses,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Classifier-guided `ℓ∞` PGD on the bridge noise `ε_a`.
///
/// Starting from zero, each iteration ascends the summed cross-entropy of
/// `classifier(x_θ(x_t^d, t))` with a sign step, then projects onto the
/// `eps_bound` ball and onto `x_0 + ε_a ∈ [0, 1]`. `(t, ε)` are held fixed.
/// Returns, per example, the iterate with the highest loss seen.
#[allow(clippy::too_many_arguments)]
pub fn generate_training_adv_noise(
    sched: &NoiseSchedule,
    coeffs: &BridgeCoefficients,
    classifier: &Mlp,
    denoiser: &Mlp,
    x0: &Tensor,
    labels: &[usize],
    timesteps: &[usize],
    eps: &Tensor,
    cfg: &AdvNoiseConfig,
) -> Result<Tensor> {
    let (n, d) = (x0.rows(), x0.cols());
    if labels.len() != n || timesteps.len() != n || eps.shape() != x0.shape() {
        return Err(Error::ShapeMismatch {
            op: "adversarial noise",
            lhs: x0.shape().to_vec(),
            rhs: vec![labels.len(), timesteps.len()],
        });
    }
    let mut current = Tensor::zeros(&[n, d]);
    if cfg.eps_bound == 0.0 || cfg.iters == 0 {
        return Ok(current);
    }
    let mut best = current.clone();
    let mut best_loss = vec![f64::NEG_INFINITY; n];
    for it in 0..=cfg.iters {
        let tape = Tape::new();
        let ea = tape.param(current.clone());
        let xd = bridge_diffuse(sched, coeffs, tape.constant(x0.clone()), ea, timesteps, tape.constant(eps.clone()))?;
        let x0_hat = predict_x0(sched, denoiser, xd, timesteps)?;
        let logits = classifier.bind_constant(&tape).forward(x0_hat, None)?;
        let per_row = per_row_cross_entropy(&logits.value(), labels);
        for (i, &l) in per_row.iter().enumerate() {
            if l > best_loss[i] {
                best_loss[i] = l;
                if it > 0 {
                    best.data_mut()[i * d..(i + 1) * d].copy_from_slice(current.row(i));
                }
            }
        }
        if it == cfg.iters {
            break;
        }
        let loss = logits.cross_entropy_scaled(labels, 1.0)?;
        let g = tape.backward(loss)?.get(ea);
        let mut next = current.clone();
        for (j, (v, gj)) in next.data_mut().iter_mut().zip(g.data()).enumerate() {
            let x = x0.data()[j];
            let stepped = (*v + cfg.step_size * sign(*gj)).clamp(-cfg.eps_bound, cfg.eps_bound);
            *v = stepped.clamp(-x, 1.0 - x);
        }
        current = next;
    }
    Ok(best)
}

/// Which denoising objective a fine-tuning run optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Bridge loss on classifier-guided noise.
    Bridge,
    /// Plain denoising loss, with the same random draws.
    Denoising,
}

/// Result of a fine-tuning run.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: TrainedDenoiser,
    /// Mean `ℓ∞` size of the generated noise, per step.
    pub noise_magnitude: Vec<f64>,
}

/// Bridge fine-tuning starting from `start.ema`.
///
/// Per step: draw a batch, a horizon `T`, per-example `t ∈ 1..=T` and `ε`,
/// generate `ε_a` against the frozen classifier with the current weights,
/// then take one Adam step on the bridge loss with the same `(t, ε)`.
pub fn finetune_adbm(
    start: &TrainedDenoiser,
    classifier: &Mlp,
    sched: &NoiseSchedule,
    data: &Dataset,
    cfg: &TrainConfig,
    adv: &AdvNoiseConfig,
) -> Result<FinetuneOutcome> {
    finetune(start, classifier, sched, data, cfg, adv, Objective::Bridge)
}

/// Fine-tuning loop shared by both objectives.
pub fn finetune(
    start: &TrainedDenoiser,
    classifier: &Mlp,
    sched: &NoiseSchedule,
    data: &Dataset,
    cfg: &TrainConfig,
    adv: &AdvNoiseConfig,
    objective: Objective,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    adv.validate(sched)?;
    data.validate()?;
    let digest_before = classifier.digest();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = start.ema.clone();
    let mut opt = Adam::new(net.params(), cfg.learning_rate, cfg.adam_betas)?;
    let mut ema = Ema::new(net.params(), cfg.ema_rate)?;
    let mut coeff_cache: HashMap<usize, BridgeCoefficients> = HashMap::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut noise_magnitude = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = draw_batch(&mut rng, data.len(), cfg.batch_size);
        let (x0, labels) = data.gather(&idx);
        let horizon = rng.random_range(adv.horizon_range.0..=adv.horizon_range.1);
        let ts: Vec<usize> = (0..idx.len()).map(|_| rng.random_range(1..=horizon)).collect();
        let eps = normal_tensor(&mut rng, idx.len(), data.dim);
        let coeffs = match coeff_cache.entry(horizon) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => e.insert(sched.bridge_closed_form(horizon)?),
        };
        let tape = Tape::new();
        let bound = net.bind(&tape);
        let (loss, grads, mag) = (|| {
            let x0v = tape.constant(x0.clone());
            let epsv = tape.constant(eps.clone());
            let (loss, mag) = match objective {
                Objective::Denoising => (ddpm_loss(sched, &bound, x0v, &ts, epsv)?, 0.0),
                Objective::Bridge => {
                    let eps_a = generate_training_adv_noise(sched, coeffs, classifier, &net, &x0, &labels, &ts, &eps, adv)?;
                    let mag = eps_a.data().chunks(data.dim).map(|r| r.iter().fold(0.0f64, |m, v| m.max(v.abs()))).sum::<f64>()
                        / idx.len() as f64;
                    let eav = tape.constant(eps_a);
                    (adbm_loss(sched, coeffs, &bound, x0v, eav, &ts, epsv)?, mag)
                }
            };
            let g = tape.backward(loss)?;
            Ok((loss.item()?, bound.params().iter().map(|&p| g.get(p)).collect::<Vec<_>>(), mag))
        })()
        .map_err(diverged(step))?;
        opt.step(net.params_mut(), &grads)?;
        ema.update(net.params());
        losses.push(loss);
        noise_magnitude.push(mag);
    }
    let digest_after = classifier.digest();
    if digest_after != digest_before {
        return Err(Error::ClassifierModified {
            before: digest_before,
            after: digest_after,
        });
    }
    let arch = net.architecture().clone();
    Ok(FinetuneOutcome {
        model: TrainedDenoiser {
            ema: Mlp::from_params(arch, ema.into_shadow())?,
            raw: net,
            step: start.step + cfg.steps as u64,
            rng_digest: rng_digest(&rng),
            losses,
        },
        noise_magnitude,
    })
}
