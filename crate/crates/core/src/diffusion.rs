//! Forward and bridge diffusion kernels, the `x_0` estimator, and the two
//! training losses.
//!
//! Everything works on `[n, d]` batches recorded on a [`Tape`], with one
//! timestep per row. Losses are reduced by the mean over rows and
//! components.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{BridgeCoefficients, NoiseSchedule};
use crate::tensor::{BoundMlp, Mlp, Tensor, Var};

/// Anything that predicts the noise `ε(x, t)` for a batch.
pub trait NoisePredictor<'t> {
    fn predict_noise(&self, x: Var<'t>, timesteps: &[usize]) -> Result<Var<'t>>;
}

impl<'t> NoisePredictor<'t> for Mlp {
    fn predict_noise(&self, x: Var<'t>, timesteps: &[usize]) -> Result<Var<'t>> {
        self.bind_constant(x.tape()).forward(x, Some(timesteps))
    }
}

impl<'t> NoisePredictor<'t> for BoundMlp<'_, 't> {
    fn predict_noise(&self, x: Var<'t>, timesteps: &[usize]) -> Result<Var<'t>> {
        self.forward(x, Some(timesteps))
    }
}

/// Thread-shareable noise predictor usable on any tape.
pub type SharedPredictor = Arc<dyn for<'t> NoisePredictor<'t> + Send + Sync>;

/// Exact noise predictor for data concentrated on a single point `c`:
/// `ε*(x, t) = (x − √ᾱ_t c) / √(1 − ᾱ_t)`.
#[derive(Debug, Clone)]
pub struct DiracOracle {
    point: Vec<f64>,
    schedule: Arc<NoiseSchedule>,
}

impl DiracOracle {
    pub fn new(point: Vec<f64>, schedule: Arc<NoiseSchedule>) -> Self {
        DiracOracle { point, schedule }
    }

    pub fn point(&self) -> &[f64] {
        &self.point
    }
}

impl<'t> NoisePredictor<'t> for DiracOracle {
    fn predict_noise(&self, x: Var<'t>, timesteps: &[usize]) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.point.len() || timesteps.len() != shape[0] {
            return Err(Error::ShapeMismatch {
                op: "dirac oracle",
                lhs: shape,
                rhs: vec![timesteps.len(), self.point.len()],
            });
        }
        for &t in timesteps {
            self.schedule.check_t(t, 1)?;
        }
        let centre: Vec<f64> = timesteps
            .iter()
            .flat_map(|&t| {
                let s = self.schedule.sqrt_alpha_bar(t);
                self.point.iter().map(move |c| s * c)
            })
            .collect();
        let centre = x.tape().constant(Tensor::matrix(shape[0], shape[1], centre)?);
        let inv: Vec<f64> = timesteps.iter().map(|&t| 1.0 / self.schedule.sqrt_one_minus_alpha_bar(t)).collect();
        x.sub(centre)?.scale_rows(&inv)
    }
}

fn rows_of(x: Var<'_>, timesteps: &[usize], op: &'static str) -> Result<usize> {
    let shape = x.shape();
    if shape.len() != 2 || shape[0] != timesteps.len() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape,
            rhs: vec![timesteps.len()],
        });
    }
    Ok(shape[0])
}

/// `√ᾱ_t x_0 + √(1 − ᾱ_t) ε`, row-wise.
pub fn forward_diffuse<'t>(sched: &NoiseSchedule, x0: Var<'t>, timesteps: &[usize], eps: Var<'t>) -> Result<Var<'t>> {
    rows_of(x0, timesteps, "forward_diffuse")?;
    for &t in timesteps {
        sched.check_t(t, 0)?;
    }
    let a: Vec<f64> = timesteps.iter().map(|&t| sched.sqrt_alpha_bar(t)).collect();
    let b: Vec<f64> = timesteps.iter().map(|&t| sched.sqrt_one_minus_alpha_bar(t)).collect();
    x0.scale_rows(&a)?.add(eps.scale_rows(&b)?)
}

/// `x_t^d = √ᾱ_t x_0 + √(1 − ᾱ_t) ε + (√ᾱ_t − k_t) ε_a`, i.e. the diffused
/// adversarial point `x_t^a` pulled back by `k_t ε_a`.
pub fn bridge_diffuse<'t>(
    sched: &NoiseSchedule,
    coeffs: &BridgeCoefficients,
    x0: Var<'t>,
    eps_a: Var<'t>,
    timesteps: &[usize],
    eps: Var<'t>,
) -> Result<Var<'t>> {
    for &t in timesteps {
        coeffs.check_t(t, 0)?;
    }
    let shift: Vec<f64> = timesteps.iter().map(|&t| coeffs.shift(t)).collect();
    forward_diffuse(sched, x0, timesteps, eps)?.add(eps_a.scale_rows(&shift)?)
}

/// `x_θ(x, t) = (x − √(1 − ᾱ_t) ε_θ(x, t)) / √ᾱ_t`.
pub fn predict_x0<'t>(sched: &NoiseSchedule, net: &dyn NoisePredictor<'t>, x: Var<'t>, timesteps: &[usize]) -> Result<Var<'t>> {
    rows_of(x, timesteps, "predict_x0")?;
    for &t in timesteps {
        sched.check_t(t, 1)?;
    }
    let eps = net.predict_noise(x, timesteps)?;
    let b: Vec<f64> = timesteps.iter().map(|&t| sched.sqrt_one_minus_alpha_bar(t)).collect();
    let inv: Vec<f64> = timesteps.iter().map(|&t| 1.0 / sched.sqrt_alpha_bar(t)).collect();
    x.sub(eps.scale_rows(&b)?)?.scale_rows(&inv)
}

/// Denoising loss `mean ‖ε − ε_θ(x_t, t)‖²`.
pub fn ddpm_loss<'t>(
    sched: &NoiseSchedule,
    net: &dyn NoisePredictor<'t>,
    x0: Var<'t>,
    timesteps: &[usize],
    eps: Var<'t>,
) -> Result<Var<'t>> {
    for &t in timesteps {
        sched.check_t(t, 1)?;
    }
    let xt = forward_diffuse(sched, x0, timesteps, eps)?;
    let pred = net.predict_noise(xt, timesteps)?;
    eps.sub(pred)?.square()?.mean()
}

/// Bridge loss `mean ‖c(t,T) ε_a + ε − ε_θ(x_t^d, t)‖²` with
/// `c(t,T) = ᾱ_T √(1 − ᾱ_t) / ((1 − ᾱ_T) √ᾱ_t)`.
///
/// With `ε_a = 0` every extra term is an exact zero and the result is
/// bitwise equal to [`ddpm_loss`].
pub fn adbm_loss<'t>(
    sched: &NoiseSchedule,
    coeffs: &BridgeCoefficients,
    net: &dyn NoisePredictor<'t>,
    x0: Var<'t>,
    eps_a: Var<'t>,
    timesteps: &[usize],
    eps: Var<'t>,
) -> Result<Var<'t>> {
    for &t in timesteps {
        coeffs.check_t(t, 1)?;
    }
    let xd = bridge_diffuse(sched, coeffs, x0, eps_a, timesteps, eps)?;
    let pred = net.predict_noise(xd, timesteps)?;
    let c: Vec<f64> = timesteps.iter().map(|&t| coeffs.target_coeff(t)).collect();
    let target = eps_a.scale_rows(&c)?.add(eps)?;
    target.sub(pred)?.square()?.mean()
}

/// One clean data point with its class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanExample {
    pub x0: Vec<f64>,
    pub label: usize,
}

/// Which norm ball a perturbation lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L1,
    L2,
}

impl Norm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Norm::Linf => "linf",
            Norm::L1 => "l1",
            Norm::L2 => "l2",
        }
    }
}

/// `x_0^a = x_0 + ε_a` with its bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialExample {
    pub x0a: Vec<f64>,
    pub eps_a: Vec<f64>,
    pub norm: Norm,
    pub radius: f64,
}

impl AdversarialExample {
    pub fn new(x0: &[f64], x0a: Vec<f64>, norm: Norm, radius: f64) -> Self {
        let eps_a = x0a.iter().zip(x0).map(|(a, c)| a - c).collect();
        AdversarialExample { x0a, eps_a, norm, radius }
    }

    pub fn perturbation_norm(&self) -> f64 {
        self.norm.of(&self.eps_a)
    }

    /// Ball and `[0,1]` box constraints, with `slack` on the radius.
    pub fn is_feasible(&self, slack: f64) -> bool {
        self.perturbation_norm() <= self.radius + slack && self.x0a.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Architecture, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, data.len() / rows, data.to_vec()).unwrap()
    }

    /// Always predicts zero noise.
    struct Zero;
    impl<'t> NoisePredictor<'t> for Zero {
        fn predict_noise(&self, x: Var<'t>, _: &[usize]) -> Result<Var<'t>> {
            x.scale(0.0)
        }
    }

    #[test]
    fn forward_diffuse_edges() {
        let s = NoiseSchedule::default_linear();
        let tape = Tape::new();
        let x0 = tape.constant(m(1, &[0.3, 0.7]));
        let eps = tape.constant(m(1, &[1.5, -2.0]));
        let at0 = forward_diffuse(&s, x0, &[0], eps).unwrap();
        assert_eq!(at0.value().data(), &[0.3, 0.7]);
        let zero = tape.constant(m(1, &[0.0, 0.0]));
        let no_noise = forward_diffuse(&s, x0, &[40], zero).unwrap();
        let a = s.sqrt_alpha_bar(40);
        assert_eq!(no_noise.value().data(), &[a * 0.3, a * 0.7]);
        assert!(forward_diffuse(&s, x0, &[1001], eps).is_err());
    }

    #[test]
    fn bridge_boundaries() {
        let s = NoiseSchedule::default_linear();
        let c = s.bridge_closed_form(100).unwrap();
        let tape = Tape::new();
        let x0 = tape.constant(m(1, &[0.2, 0.6]));
        let ea = tape.constant(m(1, &[0.03, -0.01]));
        let zero = tape.constant(m(1, &[0.0, 0.0]));
        // t = 0 with no noise: ε_a is fully removed.
        let at0 = bridge_diffuse(&s, &c, x0, ea, &[0], zero).unwrap();
        assert_eq!(at0.value().data(), &[0.2, 0.6]);
        // ε_a = 0 reduces to the forward kernel.
        let eps = tape.constant(m(1, &[0.4, 1.1]));
        let b = bridge_diffuse(&s, &c, x0, zero, &[37], eps).unwrap();
        let f = forward_diffuse(&s, x0, &[37], eps).unwrap();
        assert_eq!(b.value().data(), f.value().data());
        assert!(bridge_diffuse(&s, &c, x0, ea, &[101], eps).is_err());
    }

    #[test]
    fn predict_x0_inverts_zero_predictor() {
        let s = NoiseSchedule::default_linear();
        let tape = Tape::new();
        let x = tape.constant(m(1, &[0.5, -0.25]));
        let out = predict_x0(&s, &Zero, x, &[60]).unwrap();
        let a = s.sqrt_alpha_bar(60);
        assert_eq!(out.value().data(), &[0.5 / a, -0.25 / a]);
        assert!(predict_x0(&s, &Zero, x, &[0]).is_err());
    }

    #[test]
    fn dirac_oracle_recovers_point_from_any_input() {
        let s = Arc::new(NoiseSchedule::default_linear());
        let oracle = DiracOracle::new(vec![0.25, 0.75], s.clone());
        let tape = Tape::new();
        let x = tape.constant(m(2, &[3.0, -1.0, 0.1, 0.2]));
        let out = predict_x0(&s, &oracle, x, &[100, 7]).unwrap();
        for (o, c) in out.value().data().iter().zip([0.25, 0.75, 0.25, 0.75]) {
            assert!((o - c).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_against_exact_and_zero_predictors() {
        let s = Arc::new(NoiseSchedule::default_linear());
        let tape = Tape::new();
        let x0 = tape.constant(m(1, &[0.25, 0.75]));
        let eps = tape.constant(m(1, &[0.5, -1.5]));
        let oracle = DiracOracle::new(vec![0.25, 0.75], s.clone());
        let exact = ddpm_loss(&s, &oracle, x0, &[80], eps).unwrap().item().unwrap();
        assert!(exact.abs() < 1e-20);
        let zero = ddpm_loss(&s, &Zero, x0, &[80], eps).unwrap().item().unwrap();
        assert_eq!(zero, (0.25 + 2.25) / 2.0);
    }

    #[test]
    fn adbm_loss_with_zero_perturbation_is_ddpm_loss() {
        let s = NoiseSchedule::default_linear();
        let c = s.bridge_closed_form(120).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(Architecture::denoiser(2, &[16, 16], 1000, 4), &mut rng).unwrap();
        let tape = Tape::new();
        let x0 = tape.constant(m(2, &[0.1, 0.9, 0.4, 0.3]));
        let eps = tape.constant(m(2, &[0.7, -0.2, 1.3, 0.05]));
        let zero = tape.constant(Tensor::zeros(&[2, 2]));
        let a = adbm_loss(&s, &c, &net, x0, zero, &[5, 120], eps).unwrap().item().unwrap();
        let d = ddpm_loss(&s, &net, x0, &[5, 120], eps).unwrap().item().unwrap();
        assert_eq!(a.to_bits(), d.to_bits());
        assert!(adbm_loss(&s, &c, &net, x0, zero, &[0, 5], eps).is_err());
    }

    #[test]
    fn norms_and_feasibility() {
        let v = [0.03, -0.04];
        assert_eq!(Norm::Linf.of(&v), 0.04);
        assert!((Norm::L1.of(&v) - 0.07).abs() < 1e-15);
        assert!((Norm::L2.of(&v) - 0.05).abs() < 1e-15);
        let adv = AdversarialExample::new(&[0.5, 0.5], vec![0.53, 0.46], Norm::Linf, 0.04);
        assert!(adv.is_feasible(1e-9));
        let out_of_box = AdversarialExample::new(&[0.99, 0.5], vec![1.01, 0.5], Norm::Linf, 0.04);
        assert!(!out_of_box.is_feasible(1e-9));
    }
}
