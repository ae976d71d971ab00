use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use purify_at::attack::{parse_fraction, pgd_perturb, project_linf, AttackConfig};
use purify_at::model::{per_sample_cross_entropy, softmax, Architecture, Classifier, Mode, Preset};
use purify_at::Tensor;

fn arch(which: u8) -> Architecture {
    match which % 3 {
        0 => Architecture::new(Preset::Linear, vec![12], 3),
        1 => Architecture::new(Preset::Mlp, vec![10], 4)
            .with_hidden(16)
            .with_input_norm(0.5, 0.2),
        _ => Architecture::new(Preset::SmallCnn, vec![2, 8, 8], 5),
    }
}

fn batch(arch: &Architecture, n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    use rand::Rng;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let numel: usize = arch.input_shape.iter().product();
    let x: Vec<f64> = (0..n * numel).map(|_| r.random_range(0.0..=1.0)).collect();
    let y = (0..n).map(|_| r.random_range(0..arch.num_classes)).collect();
    (Tensor::new([vec![n], arch.input_shape.clone()].concat(), x).unwrap(), y)
}

fn eval_model(which: u8, seed: u64) -> Classifier {
    let mut m = Classifier::new(arch(which), seed).unwrap();
    m.set_mode(Mode::Eval);
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn logits_are_the_head_applied_to_features(which in 0u8..3, seed in 0u64..1000, n in 1usize..12) {
        let m = eval_model(which, seed);
        let (x, _) = batch(m.architecture(), n, seed);
        let logits = m.forward(&x).unwrap();
        let feats = m.features(&x).unwrap();
        let (w, b) = m.head();
        let d = feats.row_len();
        for i in 0..n {
            for k in 0..m.num_classes() {
                let z = b[k] + (0..d).map(|j| w[k * d + j] * feats.row(i)[j]).sum::<f64>();
                prop_assert!((z - logits.row(i)[k]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn eval_calls_leave_the_model_untouched(which in 0u8..3, seed in 0u64..1000) {
        let m = eval_model(which, seed);
        let before = m.checksum();
        let (x, y) = batch(m.architecture(), 6, seed + 1);
        m.forward(&x).unwrap();
        m.features(&x).unwrap();
        m.input_gradient(&x, &y).unwrap();
        prop_assert_eq!(before, m.checksum());
    }

    #[test]
    fn softmax_sums_to_one(z in prop::collection::vec(-700.0..700.0f64, 1..40)) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn projection_stays_in_the_ball_and_is_idempotent(
        d in prop::collection::vec(-2.0..2.0f64, 0..64),
        eps in 0.0..0.5f64,
    ) {
        let p = project_linf(&d, eps).unwrap();
        prop_assert!(p.iter().all(|v| v.abs() <= eps));
        prop_assert_eq!(project_linf(&p, eps).unwrap(), p);
    }

    #[test]
    fn pgd_without_random_start_is_deterministic(which in 0u8..3, seed in 0u64..500, steps in 1usize..6) {
        let m = eval_model(which, seed);
        let (x, y) = batch(m.architecture(), 8, seed);
        let cfg = AttackConfig { steps, random_init: false, ..AttackConfig::default() };
        let a = pgd_perturb(&m, &x, &y, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = pgd_perturb(&m, &x, &y, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn more_restarts_never_lower_the_loss(which in 0u8..3, seed in 0u64..500, restarts in 2usize..4) {
        let m = eval_model(which, seed);
        let (x, y) = batch(m.architecture(), 16, seed);
        let one = AttackConfig { steps: 3, ..AttackConfig::default() };
        let many = AttackConfig { restarts, ..one.clone() };
        let a = pgd_perturb(&m, &x, &y, &one, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = pgd_perturb(&m, &x, &y, &many, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let la = per_sample_cross_entropy(&m.forward(&a).unwrap(), &y).unwrap();
        let lb = per_sample_cross_entropy(&m.forward(&b).unwrap(), &y).unwrap();
        for (p, q) in la.iter().zip(&lb) {
            prop_assert!(q >= p);
        }
    }
}

#[test]
fn zero_epsilon_returns_the_input() {
    let m = eval_model(1, 3);
    let (x, y) = batch(m.architecture(), 5, 9);
    let cfg = AttackConfig {
        epsilon: 0.0,
        ..AttackConfig::default()
    };
    let adv = pgd_perturb(&m, &x, &y, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(adv, x);
}

#[test]
fn pgd_refuses_train_mode_and_out_of_box_inputs() {
    let mut m = eval_model(0, 1);
    let (x, y) = batch(m.architecture(), 2, 1);
    m.set_mode(Mode::Train);
    let err = pgd_perturb(&m, &x, &y, &AttackConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert_eq!(err.category(), "config");

    m.set_mode(Mode::Eval);
    let mut bad = x.clone();
    bad.data_mut()[0] = 1.5;
    let err = pgd_perturb(&m, &bad, &y, &AttackConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert_eq!(err.category(), "range");
}

#[test]
fn step_size_defaults_to_two_and_a_half_epsilon_over_steps() {
    let cfg = AttackConfig {
        epsilon: parse_fraction("8/255").unwrap(),
        steps: 10,
        ..AttackConfig::default()
    };
    assert_eq!(cfg.epsilon, 8.0 / 255.0);
    assert_eq!(cfg.step_size(), 2.5 * (8.0 / 255.0) / 10.0);
}

#[test]
fn attack_config_accepts_fraction_strings() {
    let cfg: AttackConfig = toml::from_str("epsilon = \"4/255\"\nsteps = 7").unwrap();
    assert_eq!(cfg.epsilon, 4.0 / 255.0);
    assert_eq!(cfg.steps, 7);
    assert!(toml::from_str::<AttackConfig>("epsilon = 0.1\nstep = 3").is_err());
}
