//! Reverse samplers and the purification pipeline.
//!
//! Purification diffuses the input to `forward_t` with one Gaussian draw,
//! then walks back to `t = 0` with either deterministic DDIM jumps over an
//! evenly spaced sub-sequence or the ancestral DDPM chain, and clamps the
//! result into `[0, 1]^d`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_diffuse, NoisePredictor, SharedPredictor};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Segment, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddim,
    Ddpm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePolicy {
    FreshPerCall,
    ExternallySupplied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PurifierConfig {
    pub forward_t: usize,
    pub reverse_steps: usize,
    pub sampler: SamplerKind,
    pub noise_policy: NoisePolicy,
}

impl Default for PurifierConfig {
    fn default() -> Self {
        PurifierConfig {
            forward_t: 100,
            reverse_steps: 5,
            sampler: SamplerKind::Ddim,
            noise_policy: NoisePolicy::FreshPerCall,
        }
    }
}

impl PurifierConfig {
    pub fn ddim(forward_t: usize, reverse_steps: usize) -> Self {
        PurifierConfig {
            forward_t,
            reverse_steps,
            sampler: SamplerKind::Ddim,
            noise_policy: NoisePolicy::FreshPerCall,
        }
    }

    /// Ancestral sampling visits every timestep, so `reverse_steps = forward_t`.
    pub fn ddpm(forward_t: usize) -> Self {
        PurifierConfig {
            forward_t,
            reverse_steps: forward_t,
            sampler: SamplerKind::Ddpm,
            noise_policy: NoisePolicy::FreshPerCall,
        }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        let (s, t) = (self.reverse_steps, self.forward_t);
        if s < 1 || s > t || t > sched.num_steps() {
            return Err(Error::invalid(format!(
                "need 1 <= reverse_steps ({s}) <= forward_t ({t}) <= N ({})",
                sched.num_steps()
            )));
        }
        if self.sampler == SamplerKind::Ddpm && s != t {
            return Err(Error::invalid(format!("ddpm sampler runs all {t} steps, got reverse_steps = {s}")));
        }
        Ok(())
    }

    /// `τ_i = ⌊i T / s⌋` for `i = 0..=s` (DDIM); every step for DDPM.
    pub fn timesteps(&self) -> Vec<usize> {
        let (s, t) = (self.reverse_steps, self.forward_t);
        (0..=s).map(|i| i * t / s).collect()
    }
}

/// One deterministic DDIM jump `τ_i → τ_{i−1}`:
/// `√ᾱ_prev · x̂_0 + √(1 − ᾱ_prev) · ε_θ(x, τ_i)`.
pub fn ddim_step<'t>(
    sched: &NoiseSchedule,
    net: &dyn NoisePredictor<'t>,
    x: Var<'t>,
    tau: usize,
    tau_prev: usize,
) -> Result<Var<'t>> {
    if tau_prev >= tau {
        return Err(Error::invalid(format!("ddim step needs tau_prev < tau, got {tau_prev} >= {tau}")));
    }
    sched.check_t(tau, 1)?;
    let rows = x.shape()[0];
    let ts = vec![tau; rows];
    let eps = net.predict_noise(x, &ts)?;
    let (a, a_prev) = (sched.alpha_bar(tau), sched.alpha_bar(tau_prev));
    let x0_hat = x.sub(eps.scale((1.0 - a).sqrt())?)?.scale(1.0 / a.sqrt())?;
    x0_hat.scale(a_prev.sqrt())?.add(eps.scale((1.0 - a_prev).sqrt())?)
}

/// One ancestral step `t → t − 1`:
/// `(x − β_t / √(1 − ᾱ_t) ε_θ) / √α_t + √β̃_t z`, `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
pub fn ddpm_step<'t>(sched: &NoiseSchedule, net: &dyn NoisePredictor<'t>, x: Var<'t>, t: usize, z: Var<'t>) -> Result<Var<'t>> {
    sched.check_t(t, 1)?;
    let rows = x.shape()[0];
    let eps = net.predict_noise(x, &vec![t; rows])?;
    let beta = sched.beta(t);
    let mean = x
        .sub(eps.scale(beta / sched.sqrt_one_minus_alpha_bar(t))?)?
        .scale(1.0 / sched.alpha(t).sqrt())?;
    mean.add(z.scale(posterior_std(sched, t))?)
}

/// `√β̃_t`.
pub fn posterior_std(sched: &NoiseSchedule, t: usize) -> f64 {
    (sched.beta(t) * (1.0 - sched.alpha_bar(t - 1)) / (1.0 - sched.alpha_bar(t))).sqrt()
}

/// Randomness consumed by one purification of an `[n, d]` batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PurifyNoise {
    /// Forward-diffusion draw `ε`.
    pub forward: Tensor,
    /// DDPM draws `z` for `t = T..=2` in visiting order; empty for DDIM.
    pub reverse: Vec<Tensor>,
}

impl PurifyNoise {
    pub fn draw<R: Rng + ?Sized>(cfg: &PurifierConfig, rows: usize, dim: usize, rng: &mut R) -> Self {
        let mut normal = |_| -> Tensor {
            let data = (0..rows * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            Tensor::matrix(rows, dim, data).expect("finite normal draws")
        };
        let forward = normal(0);
        let reverse = match cfg.sampler {
            SamplerKind::Ddim => vec![],
            SamplerKind::Ddpm => (2..=cfg.forward_t).map(&mut normal).collect(),
        };
        PurifyNoise { forward, reverse }
    }
}

/// A denoiser plus schedule and sampler settings.
#[derive(Clone)]
pub struct Purifier {
    pub config: PurifierConfig,
    pub schedule: Arc<NoiseSchedule>,
    pub denoiser: SharedPredictor,
}

impl Purifier {
    pub fn new(config: PurifierConfig, schedule: Arc<NoiseSchedule>, denoiser: SharedPredictor) -> Result<Self> {
        config.validate(&schedule)?;
        Ok(Purifier {
            config,
            schedule,
            denoiser,
        })
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, rows: usize, dim: usize, rng: &mut R) -> PurifyNoise {
        PurifyNoise::draw(&self.config, rows, dim, rng)
    }

    /// The purification chain as pure segments with `noise` captured:
    /// forward diffusion, one segment per reverse step, final clamp.
    pub fn segments(&self, noise: &PurifyNoise) -> Vec<Segment> {
        let mut segs: Vec<Segment> = Vec::new();
        let sched = Arc::clone(&self.schedule);
        let t_max = self.config.forward_t;
        let eps = Arc::new(noise.forward.clone());
        segs.push(Arc::new(move |x: Var<'_>| {
            let rows = x.shape()[0];
            let e = x.tape().constant((*eps).clone());
            forward_diffuse(&sched, x, &vec![t_max; rows], e)
        }));
        match self.config.sampler {
            SamplerKind::Ddim => {
                let taus = self.config.timesteps();
                for i in (1..taus.len()).rev() {
                    let (tau, prev) = (taus[i], taus[i - 1]);
                    let sched = Arc::clone(&self.schedule);
                    let net = Arc::clone(&self.denoiser);
                    segs.push(Arc::new(move |x: Var<'_>| ddim_step(&sched, &*net, x, tau, prev)));
                }
            }
            SamplerKind::Ddpm => {
                for t in (1..=t_max).rev() {
                    let sched = Arc::clone(&self.schedule);
                    let net = Arc::clone(&self.denoiser);
                    let z = if t >= 2 {
                        Some(Arc::new(noise.reverse[t_max - t].clone()))
                    } else {
                        None
                    };
                    segs.push(Arc::new(move |x: Var<'_>| {
                        let z = match &z {
                            Some(z) => x.tape().constant((**z).clone()),
                            None => x.scale(0.0)?,
                        };
                        ddpm_step(&sched, &*net, x, t, z)
                    }));
                }
            }
        }
        segs.push(Arc::new(|x: Var<'_>| x.clamp(0.0, 1.0)));
        segs
    }

    /// Purifies `x` on `x`'s tape with pinned noise. With `checkpointed`
    /// only segment boundaries are stored.
    pub fn purify_on_tape<'t>(&self, x: Var<'t>, noise: &PurifyNoise, checkpointed: bool) -> Result<Var<'t>> {
        self.check_noise(x.shape(), noise)?;
        let segs = self.segments(noise);
        if checkpointed {
            x.tape().checkpointed_compose(&segs, x)
        } else {
            segs.iter().try_fold(x, |h, s| s(h))
        }
    }

    /// Deterministic purification given the noise.
    pub fn purify_with(&self, x: &Tensor, noise: &PurifyNoise) -> Result<Tensor> {
        let tape = Tape::replaying();
        let v = tape.constant(x.clone());
        Ok((*self.purify_on_tape(v, noise, false)?.value()).clone())
    }

    /// Purification honouring the configured noise policy: fresh draws from
    /// `rng`, or the supplied `noise`.
    pub fn purify<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R, supplied: Option<&PurifyNoise>) -> Result<Tensor> {
        if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("purifier input outside [0, 1]"));
        }
        match (self.config.noise_policy, supplied) {
            (NoisePolicy::ExternallySupplied, Some(noise)) => self.purify_with(x, noise),
            (NoisePolicy::ExternallySupplied, None) => Err(Error::invalid("noise policy requires externally supplied noise")),
            (NoisePolicy::FreshPerCall, _) => {
                let noise = self.draw_noise(x.rows(), x.cols(), rng);
                self.purify_with(x, &noise)
            }
        }
    }

    fn check_noise(&self, shape: Vec<usize>, noise: &PurifyNoise) -> Result<()> {
        let expected_reverse = match self.config.sampler {
            SamplerKind::Ddim => 0,
            SamplerKind::Ddpm => self.config.forward_t - 1,
        };
        if noise.forward.shape() != shape.as_slice()
            || noise.reverse.len() != expected_reverse
            || noise.reverse.iter().any(|z| z.shape() != shape.as_slice())
        {
            return Err(Error::ShapeMismatch {
                op: "purify noise",
                lhs: shape,
                rhs: noise.forward.shape().to_vec(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DiracOracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Zero;
    impl<'t> NoisePredictor<'t> for Zero {
        fn predict_noise(&self, x: Var<'t>, _: &[usize]) -> Result<Var<'t>> {
            x.scale(0.0)
        }
    }

    fn m(rows: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, data.len() / rows, data.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64]) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-15 * y.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn tau_sequence_is_even_and_anchored() {
        assert_eq!(PurifierConfig::ddim(100, 5).timesteps(), vec![0, 20, 40, 60, 80, 100]);
        assert_eq!(PurifierConfig::ddim(10, 3).timesteps(), vec![0, 3, 6, 10]);
        assert_eq!(PurifierConfig::ddim(7, 7).timesteps(), (0..=7).collect::<Vec<_>>());
        let s = NoiseSchedule::default_linear();
        assert!(PurifierConfig::ddim(10, 11).validate(&s).is_err());
        assert!(PurifierConfig::ddim(1001, 5).validate(&s).is_err());
        assert!(PurifierConfig::ddim(100, 0).validate(&s).is_err());
    }

    #[test]
    fn ddim_step_edge_cases() {
        let s = Arc::new(NoiseSchedule::default_linear());
        let tape = Tape::new();
        let x = tape.constant(m(1, &[0.8, -0.3]));
        let out = ddim_step(&s, &Zero, x, 100, 0).unwrap();
        let a = s.sqrt_alpha_bar(100);
        close(out.value().data(), &[0.8 / a, -0.3 / a]);
        assert!(ddim_step(&s, &Zero, x, 10, 10).is_err());

        let oracle = DiracOracle::new(vec![0.3, 0.6], s.clone());
        let one = ddim_step(&s, &oracle, x, 100, 0).unwrap();
        for (o, c) in one.value().data().iter().zip([0.3, 0.6]) {
            assert!((o - c).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_half_steps_match_formula() {
        let s = Arc::new(NoiseSchedule::default_linear());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = crate::tensor::Mlp::new(crate::tensor::Architecture::denoiser(2, &[8], 1000, 3), &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.constant(m(1, &[0.4, 0.9]));
        let mid = ddim_step(&s, &net, x, 80, 40).unwrap();
        let end = ddim_step(&s, &net, mid, 40, 0).unwrap();

        let manual = |x: &[f64], tau: usize, prev: usize| -> Vec<f64> {
            let eps = net.eval(&m(1, x), Some(&[tau])).unwrap();
            let (a, ap) = (s.alpha_bar(tau), s.alpha_bar(prev));
            x.iter()
                .zip(eps.data())
                .map(|(x, e)| ap.sqrt() * (x - (1.0 - a).sqrt() * e) / a.sqrt() + (1.0 - ap).sqrt() * e)
                .collect()
        };
        let expect = manual(&manual(&[0.4, 0.9], 80, 40), 40, 0);
        for (o, e) in end.value().data().iter().zip(expect) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn ddpm_step_edge_cases() {
        let s = Arc::new(NoiseSchedule::default_linear());
        let tape = Tape::new();
        let x = tape.constant(m(1, &[0.5, 0.1]));
        let z = tape.constant(Tensor::zeros(&[1, 2]));
        let out = ddpm_step(&s, &Zero, x, 30, z).unwrap();
        let a = s.alpha(30).sqrt();
        close(out.value().data(), &[0.5 / a, 0.1 / a]);
        assert!(ddpm_step(&s, &Zero, x, 0, z).is_err());
        assert_eq!(posterior_std(&s, 1), 0.0);

        // At t = 1 with the exact predictor the step lands on the data point.
        let oracle = DiracOracle::new(vec![0.2, 0.7], s.clone());
        let x0 = tape.constant(m(1, &[0.2, 0.7]));
        let e = tape.constant(m(1, &[1.3, -0.4]));
        let x1 = forward_diffuse(&s, x0, &[1], e).unwrap();
        let back = ddpm_step(&s, &oracle, x1, 1, z).unwrap();
        for (o, c) in back.value().data().iter().zip([0.2, 0.7]) {
            assert!((o - c).abs() < 1e-10);
        }
    }

    #[test]
    fn one_step_ddim_purification_formula() {
        let s = Arc::new(NoiseSchedule::default_linear());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Arc::new(crate::tensor::Mlp::new(crate::tensor::Architecture::denoiser(2, &[8], 1000, 3), &mut rng).unwrap());
        let p = Purifier::new(PurifierConfig::ddim(100, 1), s.clone(), net.clone()).unwrap();
        let x = m(1, &[0.45, 0.55]);
        let noise = p.draw_noise(1, 2, &mut rng);
        // Compare before the final clamp.
        let tape = Tape::replaying();
        let segs = p.segments(&noise);
        let v = tape.constant(x.clone());
        let out = segs[..2].iter().try_fold(v, |h, seg| seg(h)).unwrap();

        let at = s.alpha_bar(100);
        let xt: Vec<f64> = x.data().iter().zip(noise.forward.data()).map(|(x, e)| at.sqrt() * x + (1.0 - at).sqrt() * e).collect();
        let eps_theta = net.eval(&m(1, &xt), Some(&[100])).unwrap();
        let k = ((1.0 - at) / at).sqrt();
        for i in 0..2 {
            let expect = x.data()[i] + k * (noise.forward.data()[i] - eps_theta.data()[i]);
            assert!((out.value().data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn vanishing_noise_returns_input() {
        let s = Arc::new(NoiseSchedule::linear(10, 1e-12, 2e-12).unwrap());
        let oracle = Arc::new(DiracOracle::new(vec![0.3, 0.3], s.clone()));
        // Oracle centred on the input itself.
        let p = Purifier::new(PurifierConfig::ddim(1, 1), s.clone(), oracle).unwrap();
        let x = m(1, &[0.3, 0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = p.purify(&x, &mut rng, None).unwrap();
        for (o, i) in out.data().iter().zip(x.data()) {
            assert!((o - i).abs() < 1e-9);
        }
    }

    #[test]
    fn purify_is_deterministic_and_boxed() {
        let s = Arc::new(NoiseSchedule::default_linear());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Arc::new(crate::tensor::Mlp::new(crate::tensor::Architecture::denoiser(2, &[8], 1000, 3), &mut rng).unwrap());
        for cfg in [PurifierConfig::ddim(100, 5), PurifierConfig::ddpm(20)] {
            let p = Purifier::new(cfg, s.clone(), net.clone()).unwrap();
            let x = m(3, &[0.1, 0.2, 0.5, 0.5, 0.9, 0.8]);
            let a = p.purify(&x, &mut ChaCha8Rng::seed_from_u64(11), None).unwrap();
            let b = p.purify(&x, &mut ChaCha8Rng::seed_from_u64(11), None).unwrap();
            assert_eq!(a, b);
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn externally_supplied_policy_needs_noise() {
        let s = Arc::new(NoiseSchedule::default_linear());
        let mut cfg = PurifierConfig::ddim(50, 2);
        cfg.noise_policy = NoisePolicy::ExternallySupplied;
        let p = Purifier::new(cfg, s.clone(), Arc::new(DiracOracle::new(vec![0.5], s.clone()))).unwrap();
        let x = m(1, &[0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(p.purify(&x, &mut rng, None).is_err());
        let noise = p.draw_noise(1, 1, &mut rng);
        let out = p.purify(&x, &mut rng, Some(&noise)).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-9);
        let bad = p.draw_noise(2, 1, &mut rng);
        assert!(p.purify(&x, &mut rng, Some(&bad)).is_err());
    }
}
