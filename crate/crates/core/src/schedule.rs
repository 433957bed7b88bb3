//! Discrete noise schedules and bridge coefficients.
//!
//! Index 0 is the clean end of the chain: `β_0 = 0` and `ᾱ_0 = 1`. The
//! bridge coefficient `k_t` shifts the diffused adversarial point back along
//! the adversarial direction so that `x_t^d = x_t^a − k_t ε_a`, anchored by
//! `k_0 = 1` (fully removed at the end of purification) and `k_T = 0` (the
//! reverse process starts at the plain diffused adversarial input).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    num_steps: usize,
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear `β_1..β_N` from `beta_start` to `beta_end`, with `β_0 = 0`.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps < 2 {
            return Err(Error::invalid(format!("schedule needs N >= 2, got {num_steps}")));
        }
        if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let mut beta = Vec::with_capacity(num_steps + 1);
        beta.push(0.0);
        let span = (num_steps - 1) as f64;
        for t in 1..=num_steps {
            beta.push(beta_start + (beta_end - beta_start) * (t - 1) as f64 / span);
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(num_steps + 1);
        alpha_bar.push(1.0);
        for t in 1..=num_steps {
            alpha_bar.push(alpha_bar[t - 1] * alpha[t]);
        }
        Ok(NoiseSchedule {
            num_steps,
            beta_start,
            beta_end,
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// The default `1e-4 → 0.02` schedule over 1000 steps.
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid default schedule")
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    pub(crate) fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.num_steps {
            Err(Error::TimestepOutOfRange {
                t,
                lo,
                hi: self.num_steps,
            })
        } else {
            Ok(())
        }
    }

    /// Bridge coefficients from the closed form
    /// `k_t = √ᾱ_t − ᾱ_T (1 − ᾱ_t) / (√ᾱ_t (1 − ᾱ_T))`.
    pub fn bridge_closed_form(&self, horizon: usize) -> Result<BridgeCoefficients> {
        self.check_t(horizon, 1)?;
        let ab_t = self.alpha_bar[horizon];
        let mut k = Vec::with_capacity(horizon + 1);
        let mut gamma = Vec::with_capacity(horizon + 1);
        for t in 0..=horizon {
            let ab = self.alpha_bar[t];
            let shift = ab_t * (1.0 - ab) / (ab.sqrt() * (1.0 - ab_t));
            k.push(ab.sqrt() - shift);
            gamma.push(1.0 - ab_t * (1.0 - ab) / (ab * (1.0 - ab_t)));
        }
        Ok(BridgeCoefficients::assemble(self, horizon, k, gamma))
    }

    /// Bridge coefficients from the γ recurrence alone.
    ///
    /// With `k_t = √ᾱ_t γ_t`, eliminating `ε_a` from the posterior mean gives
    /// `(a_t + b_t) γ_{t−1} = b_t + a_t γ_t` where `a_t = α_t / (1 − α_t)` and
    /// `b_t = 1 / (1 − ᾱ_{t−1})`. Solving for `γ_{t−1}` turns each step into a
    /// convex combination of 1 and `γ_t`, so iterating down from `γ_T = 0` is
    /// contractive. At `t = 1`, `b_1` is infinite and the step yields `γ_0 = 1`.
    pub fn bridge_recurrence(&self, horizon: usize) -> Result<BridgeCoefficients> {
        self.check_t(horizon, 1)?;
        let mut gamma = vec![0.0; horizon + 1];
        gamma[horizon] = 0.0;
        for t in (2..=horizon).rev() {
            let one_minus_alpha = 1.0 - self.alpha[t];
            if one_minus_alpha <= 0.0 {
                return Err(Error::invalid(format!("alpha_{t} = 1; recurrence undefined")));
            }
            let a = self.alpha[t] / one_minus_alpha;
            let b = 1.0 / (1.0 - self.alpha_bar[t - 1]);
            gamma[t - 1] = (b + a * gamma[t]) / (a + b);
        }
        gamma[0] = 1.0;
        let k = gamma.iter().enumerate().map(|(t, g)| self.alpha_bar[t].sqrt() * g).collect();
        Ok(BridgeCoefficients::assemble(self, horizon, k, gamma))
    }

    /// Coefficient of `ε_a` left in the posterior's linear term `B` at step `t`:
    /// `√α_t (√α_t k_{t−1} − k_t) / (1 − α_t) − (√ᾱ_{t−1} − k_{t−1}) / (1 − ᾱ_{t−1})`.
    ///
    /// At `t = 1` the marginal of `x_0^d` is a point mass and the second term is
    /// `0/0`; the condition then reduces to the boundary value and the returned
    /// residual is `k_0 − 1`.
    pub fn elimination_residual(&self, coeffs: &BridgeCoefficients, t: usize) -> Result<f64> {
        if t == 0 || t > coeffs.horizon {
            return Err(Error::TimestepOutOfRange {
                t,
                lo: 1,
                hi: coeffs.horizon,
            });
        }
        let k = &coeffs.k;
        if t == 1 {
            return Ok(k[0] - 1.0);
        }
        let a = self.alpha[t];
        let ab_prev = self.alpha_bar[t - 1];
        let first = a.sqrt() * (a.sqrt() * k[t - 1] - k[t]) / (1.0 - a);
        let second = (ab_prev.sqrt() - k[t - 1]) / (1.0 - ab_prev);
        Ok(first - second)
    }
}

/// `k_t` and `γ_t = k_t / √ᾱ_t` for `t = 0..=T`, plus the two derived
/// per-step factors the losses need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeCoefficients {
    horizon: usize,
    k: Vec<f64>,
    gamma: Vec<f64>,
    /// `√ᾱ_t − k_t`: weight of `ε_a` inside `x_t^d`.
    shift: Vec<f64>,
    /// `(√ᾱ_t − k_t) / √(1 − ᾱ_t)`: weight of `ε_a` in the noise target.
    target: Vec<f64>,
}

impl BridgeCoefficients {
    fn assemble(sched: &NoiseSchedule, horizon: usize, k: Vec<f64>, gamma: Vec<f64>) -> Self {
        let shift: Vec<f64> = (0..=horizon).map(|t| sched.alpha_bar[t].sqrt() - k[t]).collect();
        let target = (0..=horizon)
            .map(|t| if t == 0 { 0.0 } else { shift[t] / (1.0 - sched.alpha_bar[t]).sqrt() })
            .collect();
        BridgeCoefficients {
            horizon,
            k,
            gamma,
            shift,
            target,
        }
    }

    /// Copy with `k_t` replaced; used to probe sensitivity of the identities.
    pub fn with_k(&self, sched: &NoiseSchedule, t: usize, value: f64) -> Self {
        let mut k = self.k.clone();
        k[t] = value;
        let mut gamma = self.gamma.clone();
        gamma[t] = value / sched.alpha_bar[t].sqrt();
        Self::assemble(sched, self.horizon, k, gamma)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn k(&self, t: usize) -> f64 {
        self.k[t]
    }

    pub fn ks(&self) -> &[f64] {
        &self.k
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t]
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    pub fn shift(&self, t: usize) -> f64 {
        self.shift[t]
    }

    pub fn target_coeff(&self, t: usize) -> f64 {
        self.target[t]
    }

    pub(crate) fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.horizon {
            Err(Error::TimestepOutOfRange {
                t,
                lo,
                hi: self.horizon,
            })
        } else {
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `∏ (1 − β_i)` through a compensated sum of `ln(1 − β_i)`.
    fn product_oracle(sched: &NoiseSchedule, t: usize) -> f64 {
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for i in 1..=t {
            let y = (-sched.beta(i)).ln_1p() - comp;
            let s = sum + y;
            comp = (s - sum) - y;
            sum = s;
        }
        sum.exp()
    }

    #[test]
    fn default_schedule_endpoints() {
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.beta(0), 0.0);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.alpha_bar(1), 0.9999);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        let oracle = product_oracle(&s, 1000);
        assert!(((s.alpha_bar(1000) - oracle) / oracle).abs() < 1e-12);
        for t in [1, 10, 100, 500] {
            let o = product_oracle(&s, t);
            assert!(((s.alpha_bar(t) - o) / o).abs() < 1e-13, "t={t}");
        }
    }

    #[test]
    fn schedule_monotone_and_exact_products() {
        let s = NoiseSchedule::linear(300, 1e-3, 0.05).unwrap();
        for t in 1..=300 {
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
            assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1) && s.alpha_bar(t) > 0.0);
            if t > 1 {
                assert!(s.beta(t) > s.beta(t - 1));
            }
        }
    }

    #[test]
    fn schedule_preconditions() {
        assert!(NoiseSchedule::linear(2, 0.01, 0.01).is_err());
        assert!(NoiseSchedule::linear(1, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn bridge_anchors() {
        let s = NoiseSchedule::default_linear();
        for horizon in [1, 10, 100, 1000] {
            let c = s.bridge_closed_form(horizon).unwrap();
            assert_eq!(c.k(0), 1.0);
            assert!(c.k(horizon).abs() < 1e-15);
            let r = s.bridge_recurrence(horizon).unwrap();
            assert_eq!(r.gamma(horizon), 0.0);
            assert_eq!(r.gamma(0), 1.0);
        }
        assert!(s.bridge_closed_form(0).is_err());
        assert!(s.bridge_recurrence(1001).is_err());
    }

    #[test]
    fn recurrence_gamma_one_matches_explicit_start() {
        let s = NoiseSchedule::default_linear();
        let horizon = 100;
        let r = s.bridge_recurrence(horizon).unwrap();
        let (a1, at) = (s.alpha_bar(1), s.alpha_bar(horizon));
        let gamma1 = 1.0 - at * (1.0 - a1) / (a1 * (1.0 - at));
        assert!((r.gamma(1) - gamma1).abs() < 1e-12);
    }

    #[test]
    fn closed_form_matches_recurrence_at_t50() {
        let s = NoiseSchedule::default_linear();
        let c = s.bridge_closed_form(100).unwrap();
        let r = s.bridge_recurrence(100).unwrap();
        assert!((c.k(50) - r.k(50)).abs() < 1e-10);
    }

    #[test]
    fn elimination_residual_vanishes_and_detects_perturbation() {
        let s = NoiseSchedule::default_linear();
        let c = s.bridge_closed_form(100).unwrap();
        for t in 1..=100 {
            assert!(s.elimination_residual(&c, t).unwrap().abs() < 1e-9, "t={t}");
        }
        let bumped = c.with_k(&s, 50, c.k(50) + 0.01);
        assert!(s.elimination_residual(&bumped, 50).unwrap().abs() > 1e-4);
        assert!(s.elimination_residual(&bumped, 51).unwrap().abs() > 1e-4);
        assert!(s.elimination_residual(&c, 0).is_err());
        assert!(s.elimination_residual(&c, 101).is_err());
    }

    #[test]
    fn target_coefficient_at_horizon() {
        let s = NoiseSchedule::default_linear();
        let c = s.bridge_closed_form(150).unwrap();
        let ab = s.alpha_bar(150);
        assert!((c.target_coeff(150) - (ab / (1.0 - ab)).sqrt()).abs() < 1e-12);
        assert_eq!(c.shift(0), 0.0);
    }
}
