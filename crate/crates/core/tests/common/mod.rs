//! Finite-difference gradient checks shared by the integration targets.
#![allow(dead_code)]

use std::sync::Arc;

use adbm::attacks::Defense;
use adbm::sampler::{Purifier, PurifierConfig, PurifyNoise};
use adbm::schedule::NoiseSchedule;
use adbm::tensor::{Architecture, Mlp, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: u64 = 100;
pub const REL_TOL: f64 = 1e-4;

pub type Scalar<'a> = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> adbm::Result<Var<'t>> + 'a;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn eval(f: &Scalar<'_>, inputs: &[Tensor]) -> f64 {
    let tape = Tape::replaying();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    f(&tape, &vars).unwrap().item().unwrap()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Worst relative error over all inputs between the tape gradient and
/// central differences with step `h`.
pub fn check(f: &Scalar<'_>, inputs: &[Tensor], h: f64) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]);
        let mut numeric = Vec::with_capacity(input.len());
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut p = plus[i].data().to_vec();
            p[j] += h;
            plus[i] = Tensor::new(input.shape().to_vec(), p).unwrap();
            let mut m = minus[i].data().to_vec();
            m[j] -= h;
            minus[i] = Tensor::new(input.shape().to_vec(), m).unwrap();
            numeric.push((eval(f, &plus) - eval(f, &minus)) / (2.0 * h));
        }
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    worst
}

/// Reduces a tensor to a scalar with fixed random weights so every output
/// coordinate contributes.
pub fn weigh<'t>(tape: &'t Tape, v: Var<'t>, seed: u64) -> adbm::Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let w = random(&mut rng, &v.shape(), -1.0, 1.0);
    v.mul(tape.constant(w))?.sum()
}

/// `(name, number of inputs, scalar function)` for every elementwise-shaped
/// primitive.
pub fn primitives() -> Vec<(&'static str, usize, Box<Scalar<'static>>)> {
    vec![
        ("add", 2, Box::new(|t, v| weigh(t, v[0].add(v[1])?, 1))),
        ("sub", 2, Box::new(|t, v| weigh(t, v[0].sub(v[1])?, 2))),
        ("mul", 2, Box::new(|t, v| weigh(t, v[0].mul(v[1])?, 3))),
        ("scale", 1, Box::new(|t, v| weigh(t, v[0].scale(-1.7)?, 4))),
        ("neg", 1, Box::new(|t, v| weigh(t, v[0].neg()?, 5))),
        ("add_scalar", 1, Box::new(|t, v| weigh(t, v[0].add_scalar(0.3)?, 6))),
        ("scale_rows", 1, Box::new(|t, v| weigh(t, v[0].scale_rows(&[0.5, -2.0, 1.5])?, 7))),
        ("sum", 1, Box::new(|_, v| v[0].sum())),
        ("mean", 1, Box::new(|_, v| v[0].mean())),
        ("square", 1, Box::new(|t, v| weigh(t, v[0].square()?, 8))),
        ("exp", 1, Box::new(|t, v| weigh(t, v[0].exp()?, 9))),
        ("relu", 1, Box::new(|t, v| weigh(t, v[0].relu()?, 10))),
        ("silu", 1, Box::new(|t, v| weigh(t, v[0].silu()?, 11))),
        ("clamp", 1, Box::new(|t, v| weigh(t, v[0].clamp(-0.5, 0.5)?, 12))),
        ("concat_cols", 2, Box::new(|t, v| weigh(t, v[0].concat_cols(v[1])?, 13))),
        ("gather_rows", 1, Box::new(|t, v| weigh(t, v[0].gather_rows(&[2, 0, 2, 1])?, 14))),
        ("repeat_rows", 1, Box::new(|t, v| weigh(t, v[0].repeat_rows(3)?, 15))),
        ("cross_entropy", 1, Box::new(|_, v| v[0].cross_entropy(&[0, 3, 1]))),
        ("cross_entropy_scaled", 1, Box::new(|_, v| v[0].cross_entropy_scaled(&[2, 2, 0], 0.25))),
    ]
}

pub fn chain(seed: u64) -> (Defense, Tensor, Vec<usize>, PurifyNoise) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sched = Arc::new(NoiseSchedule::default_linear());
    let denoiser = Mlp::new(Architecture::denoiser(2, &[16], 1000, 8), &mut rng).unwrap();
    let classifier = Mlp::new(Architecture::classifier(2, &[8], 2), &mut rng).unwrap();
    let purifier = Purifier::new(PurifierConfig::ddim(100, 5), sched, Arc::new(denoiser)).unwrap();
    let defense = Defense::purified(purifier, classifier);
    let x = random(&mut rng, &[3, 2], 0.3, 0.7);
    let noise = defense.draw_noise(3, 2, &mut rng).unwrap();
    (defense, x, vec![0, 1, 1], noise)
}

