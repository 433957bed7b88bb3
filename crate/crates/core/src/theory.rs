//! Numerical checks of the two purification bounds and the posterior
//! coefficient algebra behind the bridge coefficients.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{adbm_loss, forward_diffuse, predict_x0, NoisePredictor};
use crate::error::{Error, Result};
use crate::schedule::{BridgeCoefficients, NoiseSchedule};
use crate::tensor::{Tape, Tensor};

/// Outcome of one numerical check, with every intermediate quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremVerdict {
    pub name: String,
    pub quantities: BTreeMap<String, f64>,
    pub pass: bool,
    pub tolerance: f64,
    pub samples: usize,
    pub seed: u64,
}

impl TheoremVerdict {
    pub fn quantity(&self, key: &str) -> f64 {
        self.quantities.get(key).copied().unwrap_or(f64::NAN)
    }
}

/// Sum in a fixed pairwise-tree order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n if n <= 8 => v.iter().sum(),
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

/// Mean and standard error of the mean.
fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = pairwise_sum(v) / n;
    let dev: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("finite normals")
}

/// Distance bound of one-step purification from the horizon `T`.
///
/// Estimates `δ̂` (the bridge loss averaged over `t ~ U{1..T}` and `ε`) and
/// `E‖x̂_0 − x_0‖²` with `x̂_0` the one-step estimate from
/// `x_T^a = √ᾱ_T (x_0 + ε_a) + √(1 − ᾱ_T) ε`, no clamping. Both are
/// per-component means. Passes iff
/// `E‖x̂_0 − x_0‖² ≤ (1 − ᾱ_T)·T/ᾱ_T · δ̂ + 3 SE`, where SE combines both
/// estimators' standard errors.
pub fn verify_theorem1(
    sched: &NoiseSchedule,
    coeffs: &BridgeCoefficients,
    net: &dyn for<'t> NoisePredictor<'t>,
    x0: &Tensor,
    eps_a: &Tensor,
    trials: usize,
    seed: u64,
) -> Result<TheoremVerdict> {
    if trials < 100 {
        return Err(Error::invalid(format!("theorem 1 check needs at least 100 trials, got {trials}")));
    }
    if x0.shape() != eps_a.shape() || x0.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "verify_theorem1",
            lhs: x0.shape().to_vec(),
            rhs: eps_a.shape().to_vec(),
        });
    }
    let horizon = coeffs.horizon();
    let (n, d) = (x0.rows(), x0.cols());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut loss_samples = Vec::with_capacity(trials);
    let mut dist_samples = Vec::with_capacity(trials * n);
    let ab = sched.alpha_bar(horizon);
    for _ in 0..trials {
        let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=horizon)).collect();
        let eps = normal_tensor(&mut rng, &[n, d]);
        let tape = Tape::replaying();
        let loss = adbm_loss(sched, coeffs, net, tape.constant(x0.clone()), tape.constant(eps_a.clone()), &ts, tape.constant(eps))?;
        loss_samples.push(loss.item()?);

        let eps = normal_tensor(&mut rng, &[n, d]);
        let x0a = x0.zip_map(eps_a, |a, b| a + b)?;
        let big_t = vec![horizon; n];
        let xt = forward_diffuse(sched, tape.constant(x0a), &big_t, tape.constant(eps))?;
        let x_hat = predict_x0(sched, net, xt, &big_t)?.value();
        for i in 0..n {
            let sq: f64 = x_hat.row(i).iter().zip(x0.row(i)).map(|(a, b)| (a - b).powi(2)).sum();
            dist_samples.push(sq / d as f64);
        }
    }
    let (delta, delta_se) = mean_se(&loss_samples);
    let (dist, dist_se) = mean_se(&dist_samples);
    let constant = (1.0 - ab) * horizon as f64 / ab;
    let slack = 3.0 * (dist_se.powi(2) + (constant * delta_se).powi(2)).sqrt();
    let bound = constant * delta;
    let quantities = BTreeMap::from([
        ("delta_hat".to_owned(), delta),
        ("delta_se".to_owned(), delta_se),
        ("distance_sq".to_owned(), dist),
        ("distance_se".to_owned(), dist_se),
        ("constant".to_owned(), constant),
        ("bound".to_owned(), bound),
        ("slack".to_owned(), slack),
        ("horizon".to_owned(), horizon as f64),
    ]);
    Ok(TheoremVerdict {
        name: "theorem1".into(),
        pass: dist <= bound + slack,
        quantities,
        tolerance: slack,
        samples: trials,
        seed,
    })
}

/// How [`verify_theorem2_core`] evaluates `Q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theorem2Mode {
    ClosedForm,
    MonteCarlo { draws: usize, seed: u64 },
}

/// `Q(b) = 2^(−d/2) exp(−‖b‖² / (4(1 − ᾱ_t)))`.
pub fn q_closed_form(sched: &NoiseSchedule, t: usize, b: &[f64]) -> f64 {
    let s2 = 1.0 - sched.alpha_bar(t);
    let nb: f64 = b.iter().map(|v| v * v).sum();
    (-(b.len() as f64) / 2.0 * std::f64::consts::LN_2 - nb / (4.0 * s2)).exp()
}

/// Per-draw values of `exp(−‖√(1 − ᾱ_t) ε + b‖² / (2(1 − ᾱ_t)))` for both
/// shifts, sharing the `ε` draws.
fn q_samples(sched: &NoiseSchedule, t: usize, b1: &[f64], b2: &[f64], draws: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let s2 = 1.0 - sched.alpha_bar(t);
    let s = s2.sqrt();
    let d = b1.len();
    let mut q1 = Vec::with_capacity(draws);
    let mut q2 = Vec::with_capacity(draws);
    let mut e = vec![0.0; d];
    for _ in 0..draws {
        e.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let n1: f64 = e.iter().zip(b1).map(|(x, b)| (s * x + b).powi(2)).sum();
        let n2: f64 = e.iter().zip(b2).map(|(x, b)| (s * x + b).powi(2)).sum();
        q1.push((-n1 / (2.0 * s2)).exp());
        q2.push((-n2 / (2.0 * s2)).exp());
    }
    (q1, q2)
}

/// Compares `Q(k_t ε_a)` (bridge) against `Q(√ᾱ_t ε_a)` (plain diffusion).
///
/// Closed form passes iff the bridge side is strictly larger. Monte Carlo
/// passes iff both estimates sit within 3 SE of their closed forms and the
/// paired difference exceeds 3 SE.
pub fn verify_theorem2_core(
    sched: &NoiseSchedule,
    coeffs: &BridgeCoefficients,
    t: usize,
    eps_a: &[f64],
    mode: Theorem2Mode,
) -> Result<TheoremVerdict> {
    let horizon = coeffs.horizon();
    if t < 1 || t >= horizon {
        return Err(Error::TimestepOutOfRange {
            t,
            lo: 1,
            hi: horizon.saturating_sub(1),
        });
    }
    if eps_a.is_empty() || eps_a.iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("eps_a must be nonzero: both sides coincide at zero".to_owned()));
    }
    let k = coeffs.k(t);
    let sab = sched.sqrt_alpha_bar(t);
    let b_bridge: Vec<f64> = eps_a.iter().map(|v| k * v).collect();
    let b_plain: Vec<f64> = eps_a.iter().map(|v| sab * v).collect();
    let q_bridge = q_closed_form(sched, t, &b_bridge);
    let q_plain = q_closed_form(sched, t, &b_plain);
    let mut quantities = BTreeMap::from([
        ("t".to_owned(), t as f64),
        ("horizon".to_owned(), horizon as f64),
        ("k_t".to_owned(), k),
        ("sqrt_alpha_bar_t".to_owned(), sab),
        ("q_bridge_exact".to_owned(), q_bridge),
        ("q_plain_exact".to_owned(), q_plain),
    ]);
    let verdict = match mode {
        Theorem2Mode::ClosedForm => TheoremVerdict {
            name: "theorem2_closed_form".into(),
            pass: q_bridge > q_plain,
            quantities,
            tolerance: 0.0,
            samples: 0,
            seed: 0,
        },
        Theorem2Mode::MonteCarlo { draws, seed } => {
            if draws < 2 {
                return Err(Error::invalid("Monte Carlo needs at least 2 draws".to_owned()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (q1, q2) = q_samples(sched, t, &b_bridge, &b_plain, draws, &mut rng);
            let (m1, se1) = mean_se(&q1);
            let (m2, se2) = mean_se(&q2);
            let diff: Vec<f64> = q1.iter().zip(&q2).map(|(a, b)| a - b).collect();
            let (md, sed) = mean_se(&diff);
            quantities.extend([
                ("q_bridge_mc".to_owned(), m1),
                ("q_bridge_se".to_owned(), se1),
                ("q_plain_mc".to_owned(), m2),
                ("q_plain_se".to_owned(), se2),
                ("difference_mc".to_owned(), md),
                ("difference_se".to_owned(), sed),
            ]);
            let matches = (m1 - q_bridge).abs() <= 3.0 * se1 && (m2 - q_plain).abs() <= 3.0 * se2;
            TheoremVerdict {
                name: "theorem2_monte_carlo".into(),
                pass: matches && md > 3.0 * sed,
                quantities,
                tolerance: 3.0,
                samples: draws,
                seed,
            }
        }
    };
    Ok(verdict)
}

/// Root-mean-square Monte Carlo error of `Q(k_t ε_a)` at each sample size
/// and the least-squares slope of `log rms` against `log N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub sizes: Vec<usize>,
    pub rms_errors: Vec<f64>,
    pub slope: f64,
}

pub fn monte_carlo_convergence(
    sched: &NoiseSchedule,
    coeffs: &BridgeCoefficients,
    t: usize,
    eps_a: &[f64],
    sizes: &[usize],
    replicates: usize,
    seed: u64,
) -> Result<ConvergenceReport> {
    if sizes.len() < 2 || replicates == 0 {
        return Err(Error::invalid("need at least two sample sizes and one replicate".to_owned()));
    }
    let k = coeffs.k(t);
    let b: Vec<f64> = eps_a.iter().map(|v| k * v).collect();
    let exact = q_closed_form(sched, t, &b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rms_errors = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let mut sq = Vec::with_capacity(replicates);
        for _ in 0..replicates {
            let (q, _) = q_samples(sched, t, &b, &b, n, &mut rng);
            sq.push((pairwise_sum(&q) / n as f64 - exact).powi(2));
        }
        rms_errors.push((pairwise_sum(&sq) / replicates as f64).sqrt());
    }
    let xs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = rms_errors.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(ConvergenceReport {
        sizes: sizes.to_vec(),
        rms_errors,
        slope: sxy / sxx,
    })
}

/// Coefficients of the Gaussian posterior over `x_{t−1}` in the bridge
/// derivation: the precision `A` in two algebraic forms and the residual
/// `ε_a` coefficient of the mean term `B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorCoefficients {
    pub t: usize,
    /// `α_t/(1 − α_t) + 1/(1 − ᾱ_{t−1})`.
    pub a_sum: f64,
    /// `(1 − ᾱ_t)/((1 − α_t)(1 − ᾱ_{t−1}))`.
    pub a_product: f64,
    pub b_eps_a_coeff: f64,
}

impl PosteriorCoefficients {
    /// Both forms are `+∞` at `t = 1`, where `x_0` is a point mass.
    pub fn a(&self) -> f64 {
        self.a_product
    }
}

pub fn posterior_coefficients(sched: &NoiseSchedule, coeffs: &BridgeCoefficients, t: usize) -> Result<PosteriorCoefficients> {
    coeffs.check_t(t, 1)?;
    let alpha = sched.alpha(t);
    let prev = 1.0 - sched.alpha_bar(t - 1);
    Ok(PosteriorCoefficients {
        t,
        a_sum: alpha / (1.0 - alpha) + 1.0 / prev,
        a_product: (1.0 - sched.alpha_bar(t)) / ((1.0 - alpha) * prev),
        b_eps_a_coeff: sched.elimination_residual(coeffs, t)?,
    })
}

/// Closed-form and recurrence bridge coefficients agree within `1e-10` for
/// every horizon, with `k_0 = 1`, `k_T = 0` and `0 < k_t < √ᾱ_t` in between.
pub fn verify_bridge_identity(sched: &NoiseSchedule, horizons: &[usize]) -> Result<TheoremVerdict> {
    const TOL: f64 = 1e-10;
    let mut max_diff: f64 = 0.0;
    let mut max_boundary: f64 = 0.0;
    let mut interior_ok = true;
    let mut min_margin = f64::INFINITY;
    for &h in horizons {
        let closed = sched.bridge_closed_form(h)?;
        let rec = sched.bridge_recurrence(h)?;
        for t in 0..=h {
            max_diff = max_diff.max((closed.k(t) - rec.k(t)).abs());
        }
        max_boundary = max_boundary.max((closed.k(0) - 1.0).abs()).max(closed.k(h).abs());
        for t in 1..h {
            let k = closed.k(t);
            let margin = k.min(sched.sqrt_alpha_bar(t) - k);
            min_margin = min_margin.min(margin);
            interior_ok &= margin > 0.0;
        }
    }
    Ok(TheoremVerdict {
        name: "bridge_identity".into(),
        pass: max_diff < TOL && max_boundary < TOL && interior_ok,
        quantities: BTreeMap::from([
            ("max_abs_difference".to_owned(), max_diff),
            ("max_boundary_error".to_owned(), max_boundary),
            ("min_interior_margin".to_owned(), min_margin),
            ("horizons".to_owned(), horizons.len() as f64),
        ]),
        tolerance: TOL,
        samples: 0,
        seed: 0,
    })
}

/// The `ε_a` coefficient of the posterior stays below `1e-9` at every step
/// of every horizon, while moving any single interior `k_t` by `perturbation`
/// lifts some adjacent step's residual above `1e-4`.
pub fn verify_elimination(sched: &NoiseSchedule, horizons: &[usize], perturbation: f64) -> Result<TheoremVerdict> {
    const TOL: f64 = 1e-9;
    const SENSITIVITY: f64 = 1e-4;
    let mut max_residual: f64 = 0.0;
    let mut min_perturbed = f64::INFINITY;
    for &h in horizons {
        let c = sched.bridge_closed_form(h)?;
        for t in 1..=h {
            max_residual = max_residual.max(sched.elimination_residual(&c, t)?.abs());
        }
        for t in 1..h {
            let p = c.with_k(sched, t, c.k(t) + perturbation);
            let r = sched
                .elimination_residual(&p, t)?
                .abs()
                .max(sched.elimination_residual(&p, t + 1)?.abs());
            min_perturbed = min_perturbed.min(r);
        }
    }
    Ok(TheoremVerdict {
        name: "elimination".into(),
        pass: max_residual < TOL && min_perturbed > SENSITIVITY,
        quantities: BTreeMap::from([
            ("max_residual".to_owned(), max_residual),
            ("min_perturbed_residual".to_owned(), min_perturbed),
            ("perturbation".to_owned(), perturbation),
        ]),
        tolerance: TOL,
        samples: 0,
        seed: 0,
    })
}

#[cfg(test)]
mod tests {
    #[test]
    fn identity_and_elimination_verdicts_pass() {
        let sched = NoiseSchedule::default_linear();
        let hs = [10, 50, 100, 150, 200, 1000];
        let v = verify_bridge_identity(&sched, &hs).unwrap();
        assert!(v.pass, "{v:?}");
        let v = verify_elimination(&sched, &hs, 0.01).unwrap();
        assert!(v.pass, "{v:?}");
        assert!(!verify_elimination(&sched, &hs, 0.0).unwrap().pass);
    }

    use super::*;
    use crate::diffusion::DiracOracle;
    use std::sync::Arc;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default_linear()
    }

    #[test]
    fn a_forms_agree_and_are_positive() {
        let s = sched();
        let c = s.bridge_closed_form(100).unwrap();
        for t in 2..=100 {
            let p = posterior_coefficients(&s, &c, t).unwrap();
            assert!(p.a() > 0.0);
            assert!((p.a_sum - p.a_product).abs() <= 1e-12 * p.a_product, "t={t}");
            assert!(p.b_eps_a_coeff.abs() < 1e-9);
        }
        let p1 = posterior_coefficients(&s, &c, 1).unwrap();
        assert!(p1.a_sum.is_infinite() && p1.a_product.is_infinite());
        assert!(posterior_coefficients(&s, &c, 0).is_err());
    }

    #[test]
    fn closed_form_q_matches_one_dimensional_integral() {
        // Trapezoid rule on ∫ N(u; b, s²) exp(−u²/(2s²)) du.
        let s = sched();
        let t = 50;
        let s2 = 1.0 - s.alpha_bar(t);
        let b = 0.3;
        let h = 1e-4;
        let mut acc = 0.0;
        let mut u = b - 12.0 * s2.sqrt();
        while u < b + 12.0 * s2.sqrt() {
            let dens = (-(u - b).powi(2) / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt();
            acc += h * dens * (-u * u / (2.0 * s2)).exp();
            u += h;
        }
        assert!((acc - q_closed_form(&s, t, &[b])).abs() < 1e-6);
    }

    #[test]
    fn theorem2_closed_form_and_degenerate_case() {
        let s = sched();
        let c = s.bridge_closed_form(100).unwrap();
        let v = verify_theorem2_core(&s, &c, 50, &[0.03, -0.02], Theorem2Mode::ClosedForm).unwrap();
        assert!(v.pass);
        let degenerate = c.with_k(&s, 50, s.sqrt_alpha_bar(50));
        let v = verify_theorem2_core(&s, &degenerate, 50, &[0.03, -0.02], Theorem2Mode::ClosedForm).unwrap();
        assert!(!v.pass);
        assert_eq!(v.quantity("q_bridge_exact"), v.quantity("q_plain_exact"));
        assert!(verify_theorem2_core(&s, &c, 50, &[0.0, 0.0], Theorem2Mode::ClosedForm).is_err());
        assert!(verify_theorem2_core(&s, &c, 100, &[0.1, 0.0], Theorem2Mode::ClosedForm).is_err());
    }

    #[test]
    fn theorem1_rejects_few_trials_and_dirac_is_exact() {
        let s = Arc::new(sched());
        let c = s.bridge_closed_form(100).unwrap();
        let x0 = Tensor::matrix(1, 2, vec![0.3, 0.7]).unwrap();
        let ea = Tensor::matrix(1, 2, vec![0.02, -0.03]).unwrap();
        let oracle = DiracOracle::new(vec![0.3, 0.7], Arc::clone(&s));
        assert!(verify_theorem1(&s, &c, &oracle, &x0, &ea, 99, 0).is_err());
        let v = verify_theorem1(&s, &c, &oracle, &x0, &ea, 100, 0).unwrap();
        assert!(v.pass);
        assert!(v.quantity("distance_sq") < 1e-16, "{v:?}");
        assert!(v.quantity("delta_hat") < 1e-16);
    }

    #[test]
    fn pairwise_sum_is_order_fixed() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        assert!((pairwise_sum(&v) - v.iter().sum::<f64>()).abs() < 1e-10);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }
}
