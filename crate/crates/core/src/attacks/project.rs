//! Norm-ball projections and steepest-ascent directions on single rows.

use crate::diffusion::Norm;

/// Euclidean projection of `delta` onto the `norm` ball of `radius`, in place.
pub fn project_ball(norm: Norm, delta: &mut [f64], radius: f64) {
    match norm {
        Norm::Linf => {
            for v in delta.iter_mut() {
                *v = v.clamp(-radius, radius);
            }
        }
        Norm::L2 => {
            let n = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > radius {
                let s = radius / n;
                for v in delta.iter_mut() {
                    *v *= s;
                }
            }
        }
        Norm::L1 => project_l1(delta, radius),
    }
}

/// Projection onto the `ℓ1` ball by thresholding magnitudes at the
/// simplex-projection level.
fn project_l1(delta: &mut [f64], radius: f64) {
    let total: f64 = delta.iter().map(|v| v.abs()).sum();
    if total <= radius {
        return;
    }
    if radius <= 0.0 {
        delta.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut mags: Vec<f64> = delta.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &m) in mags.iter().enumerate() {
        cumsum += m;
        let candidate = (cumsum - radius) / (j + 1) as f64;
        if m > candidate {
            theta = candidate;
        } else {
            break;
        }
    }
    for v in delta.iter_mut() {
        *v = v.signum() * (v.abs() - theta).max(0.0);
    }
}

/// Ascent step of size `step` along `grad` for the given norm.
///
/// `ℓ∞`: sign step. `ℓ2`: normalised gradient. `ℓ1`: sign step spread over
/// the `k = max(1, ⌈(1 − sparsity)·d⌉)` largest-magnitude coordinates, with
/// total `ℓ1` size `step`.
pub fn ascent_step(norm: Norm, grad: &[f64], step: f64, l1_sparsity: f64) -> Vec<f64> {
    let sign = |g: f64| {
        if g > 0.0 {
            1.0
        } else if g < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    match norm {
        Norm::Linf => grad.iter().map(|&g| step * sign(g)).collect(),
        Norm::L2 => {
            let n = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if n == 0.0 {
                vec![0.0; grad.len()]
            } else {
                grad.iter().map(|g| step * g / n).collect()
            }
        }
        Norm::L1 => {
            let k = l1_top_k(grad.len(), l1_sparsity);
            let mut order: Vec<usize> = (0..grad.len()).collect();
            order.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()).then(a.cmp(&b)));
            let mut out = vec![0.0; grad.len()];
            for &i in &order[..k] {
                out[i] = step * sign(grad[i]) / k as f64;
            }
            out
        }
    }
}

pub fn l1_top_k(dim: usize, sparsity: f64) -> usize {
    // The tolerance keeps e.g. (1 − 0.95)·100 from rounding up to 6.
    (((1.0 - sparsity) * dim as f64 - 1e-9).ceil() as usize).clamp(1, dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_projection_matches_known_case() {
        let mut d = vec![3.0, -1.0, 0.5];
        project_ball(Norm::L1, &mut d, 2.0);
        assert!((d[0] - 2.0).abs() < 1e-12 && d[1] == 0.0 && d[2] == 0.0, "{d:?}");
        let mut d = vec![1.0, -1.0];
        project_ball(Norm::L1, &mut d, 1.0);
        assert!((d[0] - 0.5).abs() < 1e-12 && (d[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn projections_land_on_ball() {
        for norm in [Norm::Linf, Norm::L1, Norm::L2] {
            let mut d = vec![0.7, -0.2, 0.4, -0.9];
            project_ball(norm, &mut d, 0.3);
            assert!(norm.of(&d) <= 0.3 + 1e-12, "{norm:?} {d:?}");
            let mut inside = vec![0.01, 0.0, -0.01, 0.0];
            let before = inside.clone();
            project_ball(norm, &mut inside, 0.3);
            assert_eq!(inside, before);
        }
    }

    #[test]
    fn l1_step_touches_top_k() {
        let s = ascent_step(Norm::L1, &[0.1, -5.0, 2.0, 0.0], 1.0, 0.5);
        assert_eq!(s, vec![0.0, -0.5, 0.5, 0.0]);
        assert_eq!(l1_top_k(2, 0.95), 1);
        assert_eq!(l1_top_k(100, 0.95), 5);
    }

    #[test]
    fn l2_and_linf_steps() {
        let s = ascent_step(Norm::L2, &[3.0, 4.0], 0.5, 0.0);
        assert!((s[0] - 0.3).abs() < 1e-15 && (s[1] - 0.4).abs() < 1e-15);
        assert_eq!(ascent_step(Norm::Linf, &[-2.0, 0.0, 1e-9], 0.1, 0.0), vec![-0.1, 0.0, 0.1]);
    }
}
