use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use adbm::attacks::{pgd_eot_attack, project_ball, AttackConfig, Defense};
use adbm::diffusion::Norm;
use adbm::harness::{gen_dataset, Dataset, DatasetKind, Split};
use adbm::schedule::NoiseSchedule;
use adbm::tensor::{Architecture, Mlp, Tensor};
use adbm::theory::pairwise_sum;
use adbm::training::Checkpoint;

fn norm_strategy() -> impl Strategy<Value = Norm> {
    prop_oneof![Just(Norm::Linf), Just(Norm::L1), Just(Norm::L2)]
}

fn kind_strategy() -> impl Strategy<Value = DatasetKind> {
    prop_oneof![Just(DatasetKind::Gauss2), Just(DatasetKind::Moons), Just(DatasetKind::Rings)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_lands_in_ball_and_is_idempotent(
        norm in norm_strategy(),
        v in prop::collection::vec(-3.0f64..3.0, 1..20),
        radius in 0.0f64..2.0,
    ) {
        let mut p = v.clone();
        project_ball(norm, &mut p, radius);
        prop_assert!(norm.of(&p) <= radius + 1e-9);
        let mut q = p.clone();
        project_ball(norm, &mut q, radius);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        // Projection never flips a sign.
        for (a, b) in v.iter().zip(&p) {
            prop_assert!(a * b >= 0.0);
        }
    }

    #[test]
    fn bridge_coefficients_are_bounded_and_consistent(horizon in 2usize..=1000) {
        let sched = NoiseSchedule::default_linear();
        let closed = sched.bridge_closed_form(horizon).unwrap();
        let rec = sched.bridge_recurrence(horizon).unwrap();
        prop_assert!((closed.k(0) - 1.0).abs() < 1e-12);
        prop_assert!(closed.k(horizon).abs() < 1e-12);
        for t in 1..horizon {
            prop_assert!(closed.k(t) > 0.0 && closed.k(t) < sched.sqrt_alpha_bar(t));
            prop_assert!((closed.k(t) - rec.k(t)).abs() < 1e-10);
        }
    }

    #[test]
    fn datasets_are_balanced_boxed_and_reproducible(
        kind in kind_strategy(),
        n in 2usize..300,
        dim in 2usize..6,
        seed in any::<u64>(),
    ) {
        let (train, test) = gen_dataset(kind, n, dim, seed).unwrap();
        prop_assert_eq!(train.len() + test.len(), n);
        for split in [&train, &test] {
            let ones = split.labels().iter().filter(|&&y| y == 1).count();
            prop_assert!((2 * ones).abs_diff(split.len()) <= 1);
            prop_assert!(split.points.iter().all(|p| p.x0.iter().all(|v| (0.1 - 1e-12..=0.9 + 1e-12).contains(v))));
        }
        let (again, _) = gen_dataset(kind, n, dim, seed).unwrap();
        prop_assert_eq!(train.to_bytes(), again.to_bytes());
        let back = Dataset::read_from(&train.to_bytes()[..], kind.name(), Split::Train).unwrap();
        prop_assert_eq!(back.to_bytes(), train.to_bytes());
    }

    #[test]
    fn checkpoints_round_trip_bitwise(
        hidden in prop::collection::vec(1usize..12, 0..3),
        dim in 2usize..5,
        seed in any::<u64>(),
        step in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(Architecture::classifier(dim, &hidden, 2), &mut rng).unwrap();
        let ckpt = Checkpoint::of_model(&net, Some(&NoiseSchedule::default_linear()), step, seed);
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.model().unwrap().digest(), net.digest());
    }

    #[test]
    fn attacks_respect_ball_and_box(
        norm in norm_strategy(),
        radius in 0.0f64..0.5,
        seed in any::<u64>(),
        rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 2), 1..6),
    ) {
        let arch = Architecture::classifier(2, &[], 2);
        let w = Tensor::matrix(2, 2, vec![0.0, 10.0, 0.0, 10.0]).unwrap();
        let b = Tensor::vector(vec![0.0, -10.0]).unwrap();
        let def = Defense::undefended(Mlp::from_params(arch, vec![w, b]).unwrap());
        let x0 = Tensor::from_rows(&rows).unwrap();
        let labels: Vec<usize> = rows.iter().map(|r| usize::from(r[0] + r[1] > 1.0)).collect();
        let cfg = AttackConfig { radius, iters: 5, eot_samples: 1, step_size: radius / 2.0 + 1e-3, seed, ..AttackConfig::reference(norm) };
        let batch = pgd_eot_attack(&def, &x0, &labels, &cfg).unwrap();
        for i in 0..rows.len() {
            let adv = batch.x_adv.row(i);
            let delta: Vec<f64> = adv.iter().zip(x0.row(i)).map(|(a, c)| a - c).collect();
            prop_assert!(norm.of(&delta) <= radius + 1e-9);
            prop_assert!(adv.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn pairwise_sum_matches_naive(v in prop::collection::vec(-1e3f64..1e3, 0..200)) {
        let naive: f64 = v.iter().sum();
        let scale = v.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
        prop_assert!((pairwise_sum(&v) - naive).abs() <= 1e-12 * scale);
    }
}
