//! WebAssembly bindings for the browser demo.
//!
//! Three operations: bridge coefficient curves for a horizon, purification
//! of 2-D points through a denoiser trained in the page, and the exact and
//! Monte Carlo `Q` comparison between bridge and plain diffusion shifts.
//! Arrays cross the boundary as flat `Float64Array`s.

use std::sync::Arc;

use adbm::harness::{gen_dataset, Dataset, DatasetKind};
use adbm::sampler::{Purifier, PurifierConfig};
use adbm::schedule::NoiseSchedule;
use adbm::tensor::{Architecture, Mlp, Tensor};
use adbm::theory::{verify_theorem2_core, Theorem2Mode};
use adbm::training::{pretrain_diffusion, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

const HIDDEN: [usize; 2] = [64, 64];
const EMBED_DIM: usize = 16;

fn js(e: adbm::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `[k_0..k_T, √ᾱ_0..√ᾱ_T, shift_0..shift_T]` for the default schedule.
pub fn curves(horizon: usize) -> adbm::Result<Vec<f64>> {
    let sched = NoiseSchedule::default_linear();
    let coeffs = sched.bridge_closed_form(horizon)?;
    let mut out = Vec::with_capacity(3 * (horizon + 1));
    out.extend_from_slice(coeffs.ks());
    out.extend((0..=horizon).map(|t| sched.sqrt_alpha_bar(t)));
    out.extend((0..=horizon).map(|t| coeffs.shift(t)));
    Ok(out)
}

#[wasm_bindgen]
pub fn bridge_curves(horizon: usize) -> Result<Vec<f64>, JsError> {
    curves(horizon).map_err(js)
}

/// `[k_t, √ᾱ_t, Q_bridge, Q_plain, mc_bridge, se_bridge, mc_plain, se_plain]`
/// for a perturbation of size `eps_norm` spread evenly over `dim` coordinates.
pub fn q_comparison(t: usize, horizon: usize, eps_norm: f64, dim: usize, draws: usize, seed: u64) -> adbm::Result<Vec<f64>> {
    let sched = NoiseSchedule::default_linear();
    let coeffs = sched.bridge_closed_form(horizon)?;
    let eps_a = vec![eps_norm / (dim.max(1) as f64).sqrt(); dim.max(1)];
    let v = verify_theorem2_core(&sched, &coeffs, t, &eps_a, Theorem2Mode::MonteCarlo { draws, seed })?;
    Ok([
        "k_t",
        "sqrt_alpha_bar_t",
        "q_bridge_exact",
        "q_plain_exact",
        "q_bridge_mc",
        "q_bridge_se",
        "q_plain_mc",
        "q_plain_se",
    ]
    .iter()
    .map(|k| v.quantity(k))
    .collect())
}

#[wasm_bindgen]
pub fn theorem2(t: usize, horizon: usize, eps_norm: f64, dim: usize, draws: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    q_comparison(t, horizon, eps_norm, dim, draws, seed).map_err(js)
}

/// A 2-D toy dataset and a denoiser trained on it.
#[wasm_bindgen]
pub struct Playground {
    schedule: Arc<NoiseSchedule>,
    data: Dataset,
    denoiser: Option<Mlp>,
}

impl Playground {
    pub fn create(kind: &str, size: usize, seed: u64) -> adbm::Result<Self> {
        let kind: DatasetKind = kind.parse()?;
        let (train, _) = gen_dataset(kind, size, 2, seed)?;
        Ok(Playground {
            schedule: Arc::new(NoiseSchedule::default_linear()),
            data: train,
            denoiser: None,
        })
    }

    /// Pretrains from scratch and returns the last-100-step mean loss.
    pub fn fit(&mut self, steps: usize, seed: u64) -> adbm::Result<f64> {
        let arch = Architecture::denoiser(2, &HIDDEN, self.schedule.num_steps(), EMBED_DIM);
        let cfg = TrainConfig {
            steps,
            batch_size: 64,
            seed,
            ..TrainConfig::default()
        };
        let trained = pretrain_diffusion(arch, &self.schedule, &self.data, &cfg, None)?;
        let tail = &trained.losses[trained.losses.len().saturating_sub(100)..];
        self.denoiser = Some(trained.ema);
        Ok(tail.iter().sum::<f64>() / tail.len().max(1) as f64)
    }

    /// Purifies flat `[x0, y0, x1, y1, ..]` points, clamped into the unit box.
    pub fn run(&self, points: &[f64], forward_t: usize, reverse_steps: usize, seed: u64) -> adbm::Result<Vec<f64>> {
        let net = self
            .denoiser
            .clone()
            .ok_or_else(|| adbm::Error::InvalidArgument("train the denoiser first".into()))?;
        if points.len() % 2 != 0 {
            return Err(adbm::Error::InvalidArgument("points must come in (x, y) pairs".into()));
        }
        let clamped: Vec<f64> = points.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let x = Tensor::matrix(points.len() / 2, 2, clamped)?;
        let purifier = Purifier::new(PurifierConfig::ddim(forward_t, reverse_steps), self.schedule.clone(), Arc::new(net))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(purifier.purify(&x, &mut rng, None)?.data().to_vec())
    }
}

#[wasm_bindgen]
impl Playground {
    #[wasm_bindgen(constructor)]
    pub fn new(kind: &str, size: usize, seed: u64) -> Result<Playground, JsError> {
        Self::create(kind, size, seed).map_err(js)
    }

    /// Flat `[x, y, label]` triples of the training set.
    pub fn points(&self) -> Vec<f64> {
        self.data
            .points
            .iter()
            .flat_map(|p| [p.x0[0], p.x0[1], p.label as f64])
            .collect()
    }

    pub fn trained(&self) -> bool {
        self.denoiser.is_some()
    }

    pub fn train(&mut self, steps: usize, seed: u64) -> Result<f64, JsError> {
        self.fit(steps, seed).map_err(js)
    }

    pub fn purify(&self, points: &[f64], forward_t: usize, reverse_steps: usize, seed: u64) -> Result<Vec<f64>, JsError> {
        self.run(points, forward_t, reverse_steps, seed).map_err(js)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_have_three_aligned_series() {
        let c = curves(100).unwrap();
        assert_eq!(c.len(), 303);
        assert!((c[0] - 1.0).abs() < 1e-12);
        assert!(c[100].abs() < 1e-12);
        for t in 1..100 {
            assert!(c[t] < c[101 + t]);
        }
    }

    #[test]
    fn bridge_side_wins_the_q_comparison() {
        let q = q_comparison(50, 100, 0.5, 2, 20_000, 3).unwrap();
        assert!(q[0] < q[1]);
        assert!(q[2] > q[3]);
        assert!((q[4] - q[2]).abs() < 4.0 * q[5]);
    }

    #[test]
    fn purification_needs_training_and_stays_finite() {
        let mut pg = Playground::create("moons", 200, 1).unwrap();
        assert_eq!(pg.points().len(), 3 * pg.data.len());
        assert!(pg.run(&[0.5, 0.5], 50, 2, 0).is_err());
        let loss = pg.fit(50, 2).unwrap();
        assert!(loss.is_finite());
        let out = pg.run(&[0.2, 0.8, 1.5, -0.1], 50, 2, 0).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(pg.run(&[0.5], 50, 2, 0).is_err());
    }
}
