mod common;

use pinpoint_core::student::{
    per_patch_loss, train, train_with, LossDistance, LossReduction, Params, StudentNet, TrainConfig,
};
use pinpoint_core::synthetic::{generate, SyntheticConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{numeric_gradient, random_vec};

fn random_net(rng: &mut ChaCha8Rng, d_in: usize, units: usize, d_out: usize) -> StudentNet<f64> {
    let mut net = StudentNet::<f64>::new(d_in, units, d_out, rng);
    for (_, block) in net.params.blocks_mut() {
        for v in block.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    net
}

fn max_rel_error(a: &Params<f64>, b: &Params<f64>) -> f64 {
    a.blocks()
        .iter()
        .zip(b.blocks().iter())
        .flat_map(|((_, x), (_, y))| x.iter().zip(y.iter()).map(|(&p, &q)| (p - q).abs() / p.abs().max(q.abs()).max(1e-6)))
        .fold(0.0, f64::max)
}

fn max_abs_diff(a: &Params<f64>, b: &Params<f64>) -> f64 {
    a.blocks()
        .iter()
        .zip(b.blocks().iter())
        .flat_map(|((_, x), (_, y))| x.iter().zip(y.iter()).map(|(&p, &q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn four_patch_batch_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for distance in [LossDistance::Cosine, LossDistance::L2] {
        let net = random_net(&mut rng, 8, 8, 8);
        let x = random_vec(&mut rng, 32);
        let t = random_vec(&mut rng, 32);
        let (_, analytic) = net.backward(&x, &t, distance, LossReduction::Mean).unwrap();
        let numeric = numeric_gradient(&net, &x, &t, distance, 1e-4);
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-4, "{distance:?}: {err:e}");
    }
}

#[test]
fn sum_reduction_scales_mean_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let net = random_net(&mut rng, 5, 7, 3);
    let x = random_vec(&mut rng, 6 * 5);
    let t = random_vec(&mut rng, 6 * 3);
    let (mean_stats, mean) = net.backward(&x, &t, LossDistance::Cosine, LossReduction::Mean).unwrap();
    let (sum_stats, sum) = net.backward(&x, &t, LossDistance::Cosine, LossReduction::Sum).unwrap();
    assert_eq!(mean_stats.mean, sum_stats.mean);
    for ((_, m), (_, s)) in mean.blocks().iter().zip(sum.blocks().iter()) {
        for (&m, &s) in m.iter().zip(s.iter()) {
            assert!((m * 6.0 - s).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_gradient_at_cosine_minimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let net = random_net(&mut rng, 6, 6, 6);
    let x = random_vec(&mut rng, 4 * 6);
    let t = net.forward(&x).unwrap();
    let (stats, grad) = net.backward(&x, &t, LossDistance::Cosine, LossReduction::Mean).unwrap();
    assert!(stats.mean.abs() < 1e-12);
    assert!(grad.l2_norm() < 1e-8, "{}", grad.l2_norm());
}

#[test]
fn cosine_gradient_ignores_target_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let net = random_net(&mut rng, 4, 8, 5);
    let x = random_vec(&mut rng, 3 * 4);
    let t = random_vec(&mut rng, 3 * 5);
    let t2: Vec<f64> = t.iter().map(|v| v * 2.0).collect();
    let (_, a) = net.backward(&x, &t, LossDistance::Cosine, LossReduction::Mean).unwrap();
    let (_, b) = net.backward(&x, &t2, LossDistance::Cosine, LossReduction::Mean).unwrap();
    assert!(max_abs_diff(&a, &b) < 1e-14);
}

#[test]
fn loss_examples() {
    assert_eq!(per_patch_loss(&[1.0, 0.0], &[0.0, 1.0], LossDistance::Cosine), 1.0);
    assert!((per_patch_loss(&[1.0f64, 0.0], &[0.0, 1.0], LossDistance::L2) - 2f64.sqrt()).abs() < 1e-15);
    assert_eq!(per_patch_loss(&[0.5, -2.0], &[0.5, -2.0], LossDistance::Cosine), 0.0);
    assert_eq!(per_patch_loss(&[0.5, -2.0], &[-0.5, 2.0], LossDistance::Cosine), 2.0);
    assert_eq!(per_patch_loss(&[0.0, 0.0], &[1.0, 1.0], LossDistance::Cosine), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradients_match_finite_differences(seed in any::<u64>(), d_in in 1usize..=10, units in 1usize..=10,
                                          d_out in 1usize..=10, batch in 1usize..=6, cosine in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let distance = if cosine { LossDistance::Cosine } else { LossDistance::L2 };
        let net = random_net(&mut rng, d_in, units, d_out);
        let x = random_vec(&mut rng, batch * d_in);
        let t = random_vec(&mut rng, batch * d_out);
        let (_, analytic) = net.backward(&x, &t, distance, LossReduction::Mean).unwrap();
        let numeric = numeric_gradient(&net, &x, &t, distance, 1e-4);
        prop_assert!(max_rel_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn patch_order_does_not_change_gradients(seed in any::<u64>(), batch in 2usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d_in, d_out) = (5, 4);
        let net = random_net(&mut rng, d_in, 6, d_out);
        let x = random_vec(&mut rng, batch * d_in);
        let t = random_vec(&mut rng, batch * d_out);
        let mut perm: Vec<usize> = (0..batch).collect();
        perm.reverse();
        perm.rotate_left(seed as usize % batch);
        let px: Vec<f64> = perm.iter().flat_map(|&i| x[i * d_in..(i + 1) * d_in].to_vec()).collect();
        let pt: Vec<f64> = perm.iter().flat_map(|&i| t[i * d_out..(i + 1) * d_out].to_vec()).collect();
        for distance in [LossDistance::Cosine, LossDistance::L2] {
            let (sa, a) = net.backward(&x, &t, distance, LossReduction::Mean).unwrap();
            let (sb, b) = net.backward(&px, &pt, distance, LossReduction::Mean).unwrap();
            prop_assert!((sa.mean - sb.mean).abs() < 1e-12);
            prop_assert!(max_abs_diff(&a, &b) < 1e-12);
            let ya = net.forward(&x).unwrap();
            let yb = net.forward(&px).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(&ya[i * d_out..(i + 1) * d_out], &yb[k * d_out..(k + 1) * d_out]);
            }
        }
    }

    #[test]
    fn concatenated_batches_add_summed_gradients(seed in any::<u64>(), b1 in 1usize..=5, b2 in 1usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_net(&mut rng, 3, 5, 4);
        let (x1, t1) = (random_vec(&mut rng, b1 * 3), random_vec(&mut rng, b1 * 4));
        let (x2, t2) = (random_vec(&mut rng, b2 * 3), random_vec(&mut rng, b2 * 4));
        let x: Vec<f64> = x1.iter().chain(&x2).copied().collect();
        let t: Vec<f64> = t1.iter().chain(&t2).copied().collect();
        let (_, g1) = net.backward(&x1, &t1, LossDistance::Cosine, LossReduction::Sum).unwrap();
        let (_, g2) = net.backward(&x2, &t2, LossDistance::Cosine, LossReduction::Sum).unwrap();
        let (_, g) = net.backward(&x, &t, LossDistance::Cosine, LossReduction::Sum).unwrap();
        for (((_, a), (_, b)), (_, c)) in g1.blocks().iter().zip(g2.blocks().iter()).zip(g.blocks().iter()) {
            for ((&a, &b), &c) in a.iter().zip(b.iter()).zip(c.iter()) {
                prop_assert!((a + b - c).abs() < 1e-12);
            }
        }
    }
}

fn small_fixture(dir: &std::path::Path, train: usize) -> pinpoint_core::feature_store::Manifest {
    generate(
        &SyntheticConfig {
            grid: 8,
            dim: 12,
            train,
            test_nominal: 2,
            test_anomalous: 2,
            max_block: 2,
            ..Default::default()
        },
        dir,
    )
    .unwrap()
}

#[test]
fn training_loss_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_fixture(dir.path(), 6);
    let config = TrainConfig { epochs: 10, ..Default::default() };
    let (_, log) = train(&manifest, &config).unwrap();
    let (first, last) = (&log.epochs[0], log.epochs.last().unwrap());
    assert!(last.forward_loss < first.forward_loss, "{log:?}");
    assert!(last.backward_loss < first.backward_loss, "{log:?}");
    assert_eq!(log.epochs.len(), 10);
}

#[test]
fn one_adam_step_per_image_and_network() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_fixture(dir.path(), 1);
    let (model, log) = train(&manifest, &TrainConfig { epochs: 1, ..Default::default() }).unwrap();
    assert_eq!(model.forward.adam.step, 1);
    assert_eq!(model.backward.adam.step, 1);
    assert_eq!((log.epochs[0].forward_steps, log.epochs[0].backward_steps), (1, 1));

    let dir = tempfile::tempdir().unwrap();
    let manifest = small_fixture(dir.path(), 5);
    let mut steps = Vec::new();
    train_with(&manifest, &TrainConfig { epochs: 3, ..Default::default() }, |e| steps.push(e.forward_steps)).unwrap();
    assert_eq!(steps, vec![5, 10, 15]);
}

#[test]
fn training_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_fixture(dir.path(), 4);
    let config = TrainConfig { epochs: 3, ..Default::default() };
    let (a, _) = train(&manifest, &config).unwrap();
    let (b, _) = train(&manifest, &config).unwrap();
    assert_eq!(a.forward.params, b.forward.params);
    assert_eq!(a.backward.params, b.backward.params);
    let (c, _) = train(&manifest, &TrainConfig { seed: 1, ..config }).unwrap();
    assert_ne!(a.forward.params, c.forward.params);
}

#[test]
fn hidden_width_defaults_to_input_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_fixture(dir.path(), 1);
    let (model, _) = train(&manifest, &TrainConfig { epochs: 1, ..Default::default() }).unwrap();
    assert_eq!((model.forward.d_in(), model.forward.params.units, model.forward.d_out()), (12, 12, 12));
    let (model, _) = train(&manifest, &TrainConfig { epochs: 1, hidden_units: Some(5), ..Default::default() }).unwrap();
    assert_eq!(model.backward.params.units, 5);
}

#[test]
fn wrong_layer_pair_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_fixture(dir.path(), 1);
    let err = train(&manifest, &TrainConfig { layer_pair: (10, 12), ..Default::default() }).unwrap_err();
    assert_eq!(err.kind(), pinpoint_core::ErrorKind::Usage);
}
