//! Adaptive white-box PGD with expectation over purification noise, the
//! SPSA and transfer baselines, and robust-accuracy evaluation.

mod project;
mod report;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use project::{ascent_step, l1_top_k, project_ball};
pub use report::{evaluate_robust_accuracy, Attack, AttackReport, ExampleOutcome, RepeatOutcome, Stat};

use crate::diffusion::{AdversarialExample, Norm};
use crate::error::{Error, Result};
use crate::sampler::{PurifyNoise, Purifier};
use crate::tensor::{argmax_rows, per_row_cross_entropy, Mlp, Tape, Tensor, Var};

/// Input dimensionality the reference `ℓ1`/`ℓ2` budgets are stated for
/// (32×32×3 images).
pub const REFERENCE_DIM: usize = 3072;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub norm: Norm,
    pub radius: f64,
    pub iters: usize,
    pub eot_samples: usize,
    pub step_size: f64,
    pub l1_sparsity: f64,
    pub seed: u64,
    /// Draw purification noise once and reuse it every iteration.
    #[serde(default)]
    pub pinned_noise: bool,
    /// Recompute reverse steps during backward instead of storing them.
    #[serde(default = "yes")]
    pub checkpointed: bool,
    /// Purification draws per example in the final verdict (majority vote).
    #[serde(default = "one")]
    pub votes: usize,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

impl AttackConfig {
    /// Reference settings: 200 iterations, 20 EOT samples, `ε∞ = 8/255`
    /// (step 0.007), `ε1 = 12` (step 0.5, sparsity 0.95), `ε2 = 1`
    /// (step 0.005).
    pub fn reference(norm: Norm) -> Self {
        let (radius, step_size) = match norm {
            Norm::Linf => (8.0 / 255.0, 0.007),
            Norm::L1 => (12.0, 0.5),
            Norm::L2 => (1.0, 0.005),
        };
        AttackConfig {
            norm,
            radius,
            iters: 200,
            eot_samples: 20,
            step_size,
            l1_sparsity: 0.95,
            seed: 0,
            pinned_noise: false,
            checkpointed: true,
            votes: 1,
        }
    }

    /// Reference settings with the `ℓ1` and `ℓ2` budgets (and steps) rescaled
    /// from [`REFERENCE_DIM`] to `dim` so that the per-coordinate size of a
    /// uniform perturbation is preserved: `ℓ1` by `dim/3072`, `ℓ2` by
    /// `√(dim/3072)`. `ℓ∞` is unchanged.
    pub fn for_dim(norm: Norm, dim: usize) -> Self {
        let mut cfg = Self::reference(norm);
        let ratio = dim as f64 / REFERENCE_DIM as f64;
        let scale = match norm {
            Norm::Linf => 1.0,
            Norm::L1 => ratio,
            Norm::L2 => ratio.sqrt(),
        };
        cfg.radius *= scale;
        cfg.step_size *= scale;
        cfg
    }

    /// A radius of zero is accepted and means "no attack".
    pub fn validate(&self) -> Result<()> {
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            return Err(Error::invalid(format!("attack radius {} must be finite and >= 0", self.radius)));
        }
        if self.iters == 0 || self.eot_samples == 0 || self.votes == 0 {
            return Err(Error::invalid("iters, eot_samples and votes must be >= 1".to_owned()));
        }
        if !(0.0..1.0).contains(&self.l1_sparsity) {
            return Err(Error::invalid(format!("l1 sparsity {} outside [0, 1)", self.l1_sparsity)));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::invalid(format!("step size {} must be positive", self.step_size)));
        }
        Ok(())
    }
}

/// SPSA settings: `σ = 0.001`, 128 probes per step, 40 steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpsaConfig {
    pub sigma: f64,
    pub samples: usize,
    pub iters: usize,
}

impl Default for SpsaConfig {
    fn default() -> Self {
        SpsaConfig {
            sigma: 0.001,
            samples: 128,
            iters: 40,
        }
    }
}

/// Classifier, optionally behind a purifier.
#[derive(Clone)]
pub struct Defense {
    pub purifier: Option<Purifier>,
    pub classifier: Mlp,
}

impl Defense {
    pub fn undefended(classifier: Mlp) -> Self {
        Defense {
            purifier: None,
            classifier,
        }
    }

    pub fn purified(purifier: Purifier, classifier: Mlp) -> Self {
        Defense {
            purifier: Some(purifier),
            classifier,
        }
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, rows: usize, dim: usize, rng: &mut R) -> Option<PurifyNoise> {
        self.purifier.as_ref().map(|p| p.draw_noise(rows, dim, rng))
    }

    /// `classifier(purify(x))` on `x`'s tape.
    pub fn logits<'t>(&self, x: Var<'t>, noise: Option<&PurifyNoise>, checkpointed: bool) -> Result<Var<'t>> {
        let h = match (&self.purifier, noise) {
            (Some(p), Some(noise)) => p.purify_on_tape(x, noise, checkpointed)?,
            (Some(_), None) => return Err(Error::invalid("purified defense needs purification noise")),
            (None, _) => x,
        };
        self.classifier.bind_constant(x.tape()).forward(h, None)
    }

    /// Logits for a batch, value only.
    pub fn eval_logits(&self, x: &Tensor, noise: Option<&PurifyNoise>) -> Result<Tensor> {
        let tape = Tape::replaying();
        let out = self.logits(tape.constant(x.clone()), noise, false)?;
        Ok((*out.value()).clone())
    }

    /// Labels after `votes` independent purification draws, by majority
    /// (ties to the lowest class).
    pub fn predict<R: Rng + ?Sized>(&self, x: &Tensor, votes: usize, rng: &mut R) -> Result<Vec<usize>> {
        let classes = self.classifier.architecture().output_dim;
        let mut counts = vec![vec![0usize; classes]; x.rows()];
        for _ in 0..votes.max(1) {
            let noise = self.draw_noise(x.rows(), x.cols(), rng);
            for (i, c) in argmax_rows(&self.eval_logits(x, noise.as_ref())?).into_iter().enumerate() {
                counts[i][c] += 1;
            }
        }
        Ok(counts
            .iter()
            .map(|row| row.iter().enumerate().fold((0, 0), |(bc, bn), (c, &n)| if n > bn { (c, n) } else { (bc, bn) }).0)
            .collect())
    }
}

/// Adversarial batch plus the rows whose gradient went non-finite.
#[derive(Debug, Clone)]
pub struct AttackBatch {
    pub x_adv: Tensor,
    pub failed: Vec<bool>,
}

impl AttackBatch {
    pub fn examples(&self, x0: &Tensor, norm: Norm, radius: f64) -> Vec<AdversarialExample> {
        (0..x0.rows())
            .map(|i| AdversarialExample::new(x0.row(i), self.x_adv.row(i).to_vec(), norm, radius))
            .collect()
    }
}

fn check_inputs(x0: &Tensor, labels: &[usize]) -> Result<()> {
    if x0.shape().len() != 2 || x0.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "attack input",
            lhs: x0.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if x0.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("attack input outside [0, 1]"));
    }
    Ok(())
}

/// Moves row `i` of `x` along `step`, then projects onto the ball around
/// `x0` and the unit box.
fn step_and_project(x: &mut Tensor, x0: &Tensor, i: usize, step: &[f64], norm: Norm, radius: f64) {
    let d = x0.cols();
    let origin = x0.row(i);
    let mut delta: Vec<f64> = x.row(i).iter().zip(origin).zip(step).map(|((a, o), s)| a - o + s).collect();
    project_ball(norm, &mut delta, radius);
    let row = &mut x.data_mut()[i * d..(i + 1) * d];
    for ((r, o), dv) in row.iter_mut().zip(origin).zip(&delta) {
        *r = (o + dv).clamp(0.0, 1.0);
    }
}

fn tile_labels(labels: &[usize], k: usize) -> Vec<usize> {
    labels.iter().flat_map(|&y| std::iter::repeat_n(y, k)).collect()
}

/// EOT-averaged input gradient of the summed cross-entropy, `[n, d]`.
///
/// Each example is tiled `K` times; every copy sees its own noise rows.
pub fn eot_gradient(defense: &Defense, x: &Tensor, labels: &[usize], noise: Option<&PurifyNoise>, k: usize, checkpointed: bool) -> Result<Tensor> {
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let tiled = if k > 1 { xv.repeat_rows(k)? } else { xv };
    let logits = defense.logits(tiled, noise, checkpointed)?;
    let loss = logits.cross_entropy_scaled(&tile_labels(labels, k), 1.0 / k as f64)?;
    Ok(tape.backward(loss)?.get(xv))
}

/// Full-gradient PGD with EOT against `defense`, started at `x0`.
pub fn pgd_eot_attack(defense: &Defense, x0: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<AttackBatch> {
    cfg.validate()?;
    check_inputs(x0, labels)?;
    let (n, d) = (x0.rows(), x0.cols());
    let mut x = x0.clone();
    let mut failed = vec![false; n];
    if cfg.radius == 0.0 || n == 0 {
        return Ok(AttackBatch { x_adv: x, failed });
    }
    let k = cfg.eot_samples;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pinned = if cfg.pinned_noise { defense.draw_noise(n * k, d, &mut rng) } else { None };
    for _ in 0..cfg.iters {
        let fresh = if cfg.pinned_noise { None } else { defense.draw_noise(n * k, d, &mut rng) };
        let noise = pinned.as_ref().or(fresh.as_ref());
        let g = match eot_gradient(defense, &x, labels, noise, k, cfg.checkpointed) {
            Ok(g) => g,
            Err(Error::NonFinite(_)) => {
                failed.iter_mut().for_each(|f| *f = true);
                break;
            }
            Err(e) => return Err(e),
        };
        for i in 0..n {
            let gi = g.row(i);
            if failed[i] || gi.iter().any(|v| !v.is_finite()) {
                failed[i] = true;
                continue;
            }
            let step = ascent_step(cfg.norm, gi, cfg.step_size, cfg.l1_sparsity);
            step_and_project(&mut x, x0, i, &step, cfg.norm, cfg.radius);
        }
    }
    Ok(AttackBatch { x_adv: x, failed })
}

/// Gradient-free `ℓ∞` attack: paired `±σ` Rademacher probes estimate the
/// gradient from forward evaluations only; each probe pair shares one
/// purification draw.
pub fn spsa_attack(defense: &Defense, x0: &Tensor, labels: &[usize], cfg: &AttackConfig, spsa: &SpsaConfig) -> Result<AttackBatch> {
    cfg.validate()?;
    check_inputs(x0, labels)?;
    if cfg.norm != Norm::Linf {
        return Err(Error::invalid("SPSA is implemented for the linf threat only"));
    }
    if spsa.samples == 0 || !(spsa.sigma > 0.0) {
        return Err(Error::invalid("SPSA needs samples >= 1 and sigma > 0"));
    }
    let (n, d) = (x0.rows(), x0.cols());
    let mut x = x0.clone();
    let failed = vec![false; n];
    if cfg.radius == 0.0 || n == 0 {
        return Ok(AttackBatch { x_adv: x, failed });
    }
    let m = spsa.samples;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tiled_labels = tile_labels(labels, 2 * m);
    for _ in 0..spsa.iters {
        // Rows ordered example-major, then probe, then (+, −).
        let probes: Vec<f64> = (0..n * m * d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let mut query = Vec::with_capacity(2 * n * m * d);
        for i in 0..n {
            for p in 0..m {
                let v = &probes[(i * m + p) * d..(i * m + p + 1) * d];
                for s in [1.0, -1.0] {
                    query.extend(x.row(i).iter().zip(v).map(|(a, b)| a + s * spsa.sigma * b));
                }
            }
        }
        let query = Tensor::new(vec![2 * n * m, d], query)?;
        let noise = defense.draw_noise(n * m, d, &mut rng).map(|nz| pair_noise(&nz));
        let losses = per_row_cross_entropy(&defense.eval_logits(&query, noise.as_ref())?, &tiled_labels);
        for i in 0..n {
            let mut g = vec![0.0; d];
            for p in 0..m {
                let r = 2 * (i * m + p);
                let diff = (losses[r] - losses[r + 1]) / (2.0 * spsa.sigma * m as f64);
                let v = &probes[(i * m + p) * d..(i * m + p + 1) * d];
                for (gj, vj) in g.iter_mut().zip(v) {
                    *gj += diff * vj;
                }
            }
            let step = ascent_step(Norm::Linf, &g, cfg.step_size, 0.0);
            step_and_project(&mut x, x0, i, &step, Norm::Linf, cfg.radius);
        }
    }
    Ok(AttackBatch { x_adv: x, failed })
}

/// Duplicates every noise row so each `±` probe pair sees the same draw.
fn pair_noise(noise: &PurifyNoise) -> PurifyNoise {
    PurifyNoise {
        forward: noise.forward.repeat_rows(2),
        reverse: noise.reverse.iter().map(|z| z.repeat_rows(2)).collect(),
    }
}

/// Plain PGD on an undefended source classifier.
pub fn transfer_attack(source: &Mlp, x0: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<AttackBatch> {
    let cfg = AttackConfig {
        eot_samples: 1,
        pinned_noise: true,
        ..cfg.clone()
    };
    pgd_eot_attack(&Defense::undefended(source.clone()), x0, labels, &cfg)
}
