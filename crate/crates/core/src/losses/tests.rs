use approx::assert_abs_diff_eq;
use ndarray::{arr2, Array2, ArrayD, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::model::{ModelBundle, ModelConfig, Trainable};
use crate::nn::{ConvNet, InceptionSpec, ParamSet};

#[test]
fn kl_closed_form_examples() {
    let z = Array2::<f64>::zeros((3, 4));
    assert_eq!(kl_gaussian_value(&z, &z).unwrap(), 0.0);
    let mut m = Array2::<f64>::zeros((1, 4));
    m[[0, 0]] = 1.0;
    assert_abs_diff_eq!(kl_gaussian_value(&m, &Array2::zeros((1, 4))).unwrap(), 0.5, epsilon = 1e-12);
    let bad = Array2::from_elem((1, 4), f64::INFINITY);
    assert!(matches!(kl_gaussian_value(&bad, &m), Err(Error::NonFinite(_))));
    assert!(matches!(kl_gaussian_value(&m, &Array2::zeros((1, 3))), Err(Error::Shape(_))));
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 3;
    let mean: Array2<f64> = Array2::from_shape_simple_fn((1, d), || rng.random_range(-1.5..1.5));
    let lv: Array2<f64> = Array2::from_shape_simple_fn((1, d), || rng.random_range(-1.0..1.0));
    let closed = kl_gaussian_value(&mean, &lv).unwrap();
    let draws = 100_000;
    let mut acc = 0.0;
    for _ in 0..draws {
        let mut log_ratio = 0.0;
        for j in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            let sigma = (0.5 * lv[[0, j]]).exp();
            let z = mean[[0, j]] + sigma * e;
            // log q(z) - log r(z); the 2π terms cancel.
            log_ratio += -0.5 * e * e - sigma.ln() + 0.5 * z * z;
        }
        acc += log_ratio;
    }
    let mc = acc / draws as f64;
    assert!((mc - closed).abs() / closed < 0.01, "closed {closed} vs mc {mc}");
}

proptest! {
    #[test]
    fn kl_is_nonnegative(vals in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..12)) {
        let mean = Array2::from_shape_vec((1, vals.len()), vals.iter().map(|p| p.0).collect()).unwrap();
        let lv = Array2::from_shape_vec((1, vals.len()), vals.iter().map(|p| p.1).collect()).unwrap();
        prop_assert!(kl_gaussian_value(&mean, &lv).unwrap() >= 0.0);
    }

    #[test]
    fn gradient_penalty_is_nonnegative(a in proptest::collection::vec(-3.0f64..3.0, 4), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let real = ArrayD::from_shape_simple_fn(IxDyn(&[3, 2, 2, 1]), || rng.random_range(-1.0..1.0));
        let fake = ArrayD::from_shape_simple_fn(IxDyn(&[3, 2, 2, 1]), || rng.random_range(-1.0..1.0));
        let w = ArrayD::from_shape_vec(IxDyn(&[4, 1]), a).unwrap();
        let critic = |x: &Var<f64>| x.reshape(&[3, 4]).tanh().matmul(&Var::constant(w.clone())).reshape(&[3]);
        let gp = gradient_penalty(critic, &real, &fake, 10.0, &mut rng).unwrap().item();
        prop_assert!(gp >= 0.0);
    }
}

#[test]
fn pose_l1_examples() {
    let y = arr2(&[[10.0, -5.0, 0.0]]);
    let yh = arr2(&[[12.0, -3.0, 1.0]]);
    assert_abs_diff_eq!(pose_l1_value(&y, &yh).unwrap(), 5.0, epsilon = 1e-12);
    assert_eq!(pose_l1_value(&y, &y).unwrap(), 0.0);
    assert!(matches!(pose_l1_value(&y, &arr2(&[[1.0, 2.0]])), Err(Error::Shape(_))));

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let a: Array2<f64> = Array2::from_shape_simple_fn((5, 3), || rng.random_range(-90.0..90.0));
        let b = Array2::from_shape_simple_fn((5, 3), || rng.random_range(-90.0..90.0));
        let mut brute = 0.0;
        for i in 0..5 {
            for j in 0..3 {
                brute += (a[[i, j]] - b[[i, j]]).abs();
            }
        }
        assert_abs_diff_eq!(pose_l1_value(&a, &b).unwrap(), brute / 5.0, epsilon = 1e-6);
    }
}

#[test]
fn recon_l2_examples() {
    let x = ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 0.5);
    let xh = ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), -0.5);
    assert_abs_diff_eq!(recon_l2_value(&x, &xh).unwrap(), 1.0, epsilon = 1e-12);
    assert_eq!(recon_l2_value(&x, &x).unwrap(), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let a = ArrayD::from_shape_simple_fn(IxDyn(&[3, 4, 4, 2]), || rng.random_range(-1.0..1.0));
        let b = ArrayD::from_shape_simple_fn(IxDyn(&[3, 4, 4, 2]), || rng.random_range(-1.0..1.0));
        let brute: f64 = a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / 3.0;
        assert_abs_diff_eq!(recon_l2_value(&a, &b).unwrap(), brute, epsilon = 1e-6);
    }
}

#[test]
fn identity_nll_examples() {
    let p = arr2(&[[0.0, 1.0, 0.0]]);
    assert_eq!(identity_nll_value(&p, &[2]).unwrap(), 0.0);
    let uniform = Array2::from_elem((4, 10), 0.1);
    assert_abs_diff_eq!(identity_nll_value(&uniform, &[1, 4, 7, 10]).unwrap(), 10f64.ln(), epsilon = 1e-12);
    let floor: f64 = identity_nll_value(&p, &[1]).unwrap();
    assert!(floor.is_finite());
    assert_abs_diff_eq!(floor, -(1e-8f64).ln(), epsilon = 1e-9);
    assert!(matches!(identity_nll_value(&p, &[4]), Err(Error::Index(_))));
    assert!(matches!(identity_nll_value(&p, &[1, 2]), Err(Error::Shape(_))));
}

fn linear_critic(a: ArrayD<f64>) -> impl Fn(&Var<f64>) -> Var<f64> {
    move |x: &Var<f64>| {
        let n = x.shape()[0];
        let rest = a.len();
        x.reshape(&[n, rest]).matmul(&Var::constant(a.clone().into_shape_with_order(IxDyn(&[rest, 1])).unwrap())).reshape(&[n])
    }
}

#[test]
fn gradient_penalty_linear_critic() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let real = ArrayD::from_shape_simple_fn(IxDyn(&[5, 2, 2, 1]), || rng.random_range(-1.0..1.0));
    let fake = ArrayD::from_shape_simple_fn(IxDyn(&[5, 2, 2, 1]), || rng.random_range(-1.0..1.0));
    let unit = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.5, -0.5, 0.5, 0.5]).unwrap();
    let gp = gradient_penalty(linear_critic(unit), &real, &fake, 10.0, &mut rng).unwrap();
    assert_abs_diff_eq!(gp.item(), 0.0, epsilon = 1e-6);

    let three = ArrayD::from_shape_vec(IxDyn(&[4]), vec![1.5, -1.5, 1.5, 1.5]).unwrap();
    let gp = gradient_penalty(linear_critic(three), &real, &fake, 10.0, &mut rng).unwrap();
    assert_abs_diff_eq!(gp.item(), 40.0, epsilon = 1e-6);

    assert!(gradient_penalty(linear_critic(ArrayD::zeros(IxDyn(&[4]))), &real, &fake, 0.0, &mut rng).is_err());
    let bad = ArrayD::zeros(IxDyn(&[4, 2, 2, 1]));
    assert!(matches!(gradient_penalty(linear_critic(ArrayD::zeros(IxDyn(&[4]))), &real, &bad, 1.0, &mut rng), Err(Error::Shape(_))));
}

#[test]
fn gradient_penalty_with_zero_gradient_is_finite() {
    let real = ArrayD::from_elem(IxDyn(&[2, 1, 1, 1]), 1.0);
    let fake = ArrayD::from_elem(IxDyn(&[2, 1, 1, 1]), -1.0);
    let critic = |x: &Var<f64>| x.reshape(&[2]).scale(0.0);
    let gp = gradient_penalty_with_mix(critic, &real, &fake, 10.0, &[0.5, 0.5]).unwrap();
    assert!(gp.item().is_finite());
    assert_abs_diff_eq!(gp.item(), 10.0 * (1e-6f64 - 1.0).powi(2), epsilon = 1e-9);
}

#[test]
fn gradient_penalty_matches_finite_difference_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let net = ConvNet {
        input: [4, 4, 1],
        blocks: vec![InceptionSpec::new([1, 2, 1], 2).unwrap()],
        head: Some(1),
        slope: 0.2,
    };
    let params: ParamSet<f64> = net.init("critic", &mut rng);
    let bound = params.bind(true);
    let critic = |x: &Var<f64>| {
        let n = x.shape()[0];
        net.forward(&bound, x).reshape(&[n])
    };
    let real = ArrayD::from_shape_simple_fn(IxDyn(&[3, 4, 4, 1]), || rng.random_range(-1.0..1.0));
    let fake = ArrayD::from_shape_simple_fn(IxDyn(&[3, 4, 4, 1]), || rng.random_range(-1.0..1.0));
    let mix = [0.2, 0.7, 0.9];
    let gp = gradient_penalty_with_mix(critic, &real, &fake, 10.0, &mix).unwrap().item();

    let h = 1e-5;
    let mut oracle = 0.0;
    for (i, c) in mix.iter().enumerate() {
        let xh = &real.index_axis(ndarray::Axis(0), i) * *c + &fake.index_axis(ndarray::Axis(0), i) * (1.0 - c);
        let xh = xh.insert_axis(ndarray::Axis(0));
        let score = |x: &ArrayD<f64>| no_grad(|| critic(&Var::constant(x.clone())).item());
        let mut norm2 = 0.0;
        for j in 0..xh.len() {
            let mut p = xh.clone();
            p.as_slice_mut().unwrap()[j] += h;
            let mut m = xh.clone();
            m.as_slice_mut().unwrap()[j] -= h;
            let d = (score(&p) - score(&m)) / (2.0 * h);
            norm2 += d * d;
        }
        oracle += (norm2.sqrt() - 1.0).powi(2);
    }
    oracle *= 10.0 / 3.0;
    assert!((gp - oracle).abs() / oracle.abs().max(1e-12) < 1e-3, "{gp} vs {oracle}");
}

/// 1×1×1 images, latent_dim 1, two identities, no convolutional blocks, so
/// every network is an affine map whose parameters can be set by hand.
fn stub_bundle() -> ModelBundle<f64> {
    let cfg = ModelConfig {
        latent_dim: 1,
        n_subjects: 2,
        image_size: [1, 1, 1],
        encoder_blocks: vec![],
        decoder_base_channels: 1,
        decoder_blocks: vec![],
        discriminator_blocks: vec![],
        leaky_slope: 0.2,
        shared_trunk: false,
    };
    let mut b = ModelBundle::<f64>::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for ps in [&mut b.encoder, &mut b.decoder, &mut b.critic, &mut b.identity, &mut b.pose] {
        for v in ps.values.iter_mut() {
            v.fill(0.0);
        }
    }
    b
}

fn set(ps: &mut ParamSet<f64>, name: &str, values: &[f64]) {
    let t = ps.get_mut(name).unwrap_or_else(|| panic!("no parameter {name}"));
    assert_eq!(t.len(), values.len());
    t.as_slice_mut().unwrap().copy_from_slice(values);
}

struct StubBatch {
    images: ArrayD<f64>,
    ids: Vec<u32>,
    poses: Array2<f64>,
    targets: Vec<u32>,
    noise: Array2<f64>,
}

impl StubBatch {
    fn new(x: f64) -> Self {
        StubBatch {
            images: ArrayD::from_elem(IxDyn(&[2, 1, 1, 1]), x),
            ids: vec![1, 2],
            poses: arr2(&[[0.1, 0.0, 0.0], [0.1, 0.0, 0.0]]),
            targets: vec![2, 1],
            noise: arr2(&[[0.4], [-1.3]]),
        }
    }

    fn batch(&self) -> LossBatch<'_, f64> {
        LossBatch {
            images: &self.images,
            identities: &self.ids,
            poses: &self.poses,
            targets: &self.targets,
            noise: &self.noise,
        }
    }
}

fn weights(g: [f64; 5], d: [f64; 4]) -> LossWeights {
    LossWeights {
        generator: g,
        discriminator: d,
        gp_gamma: 10.0,
        identity_on_fakes: false,
    }
}

#[test]
fn generator_loss_hand_stubbed() {
    let mut b = stub_bundle();
    set(&mut b.critic, "critic/head/b", &[2.0]);
    set(&mut b.encoder, "encoder/head/b", &[0.3, 0.0]);
    let sb = StubBatch::new(0.5);
    let bound = b.bind(Trainable::Generator);

    let (_, br) = generator_loss(&bound, &sb.batch(), &weights([1.0; 5], [1.0; 4])).unwrap();
    assert_abs_diff_eq!(br.adversarial, -2.0, epsilon = 1e-12);
    assert_abs_diff_eq!(br.identity_nll, 2f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(br.pose_l1, 0.1, epsilon = 1e-12);
    assert_abs_diff_eq!(br.recon_l2, 0.25, epsilon = 1e-12);
    assert_abs_diff_eq!(br.kl, 0.045, epsilon = 1e-12);
    assert_abs_diff_eq!(br.total, -0.9118528194400545, epsilon = 1e-6);
    assert_eq!(br.total, br.recombine());

    let (_, br) = generator_loss(&bound, &sb.batch(), &weights([0.0; 5], [1.0; 4])).unwrap();
    assert_eq!(br.total, 0.0);
}

#[test]
fn generator_loss_reconstruction_isolated() {
    let mut b = stub_bundle();
    // Zero decoder reproduces the all-zero image exactly.
    let sb = StubBatch::new(0.0);
    let w = weights([0.0, 0.0, 0.0, 1.0, 0.0], [1.0; 4]);
    let (_, br) = generator_loss(&b.bind(Trainable::Generator), &sb.batch(), &w).unwrap();
    assert_eq!(br.total, 0.0);

    // Decoder stubbed to emit 0.5 reproduces x = 0.5.
    set(&mut b.decoder, "decoder/project/b", &[0.5f64.atanh()]);
    set(&mut b.decoder, "decoder/to_image/w", &[1.0]);
    let sb = StubBatch::new(0.5);
    let (_, br) = generator_loss(&b.bind(Trainable::Generator), &sb.batch(), &w).unwrap();
    assert_abs_diff_eq!(br.total, 0.0, epsilon = 1e-12);
}

#[test]
fn discriminator_loss_hand_stubbed() {
    let mut b = stub_bundle();
    set(&mut b.critic, "critic/head/w", &[1.0]);
    set(&mut b.decoder, "decoder/to_image/b", &[0.2f64.atanh()]);
    let sb = StubBatch::new(1.0);
    let bound = b.bind(Trainable::Discriminator);

    let (_, br) = discriminator_loss(&bound, &sb.batch(), &weights([1.0; 5], [1.0; 4]), &[0.3, 0.8]).unwrap();
    assert_abs_diff_eq!(br.wasserstein_gap, 0.8, epsilon = 1e-12);
    assert_abs_diff_eq!(br.identity_loglik, -(2f64.ln()), epsilon = 1e-12);
    assert_abs_diff_eq!(br.pose_l1_real, 0.1, epsilon = 1e-12);
    assert_abs_diff_eq!(br.gradient_penalty, 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(br.total, 0.006852819440054753, epsilon = 1e-6);
    assert_eq!(br.total, br.recombine());

    let (_, br) = discriminator_loss(&bound, &sb.batch(), &weights([1.0; 5], [0.0; 4]), &[0.3, 0.8]).unwrap();
    assert_eq!(br.total, 0.0);
}

#[test]
fn identical_real_and_fake_give_zero_gap() {
    let mut b = stub_bundle();
    set(&mut b.critic, "critic/head/w", &[3.0]);
    set(&mut b.decoder, "decoder/to_image/b", &[0.25f64.atanh()]);
    let sb = StubBatch::new(0.25);
    let (_, br) = discriminator_loss(&b.bind(Trainable::Discriminator), &sb.batch(), &LossWeights::default(), &[0.5, 0.5]).unwrap();
    assert_abs_diff_eq!(br.wasserstein_gap, 0.0, epsilon = 1e-12);
}

#[test]
fn breakdowns_recombine_exactly_on_random_models() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig {
            latent_dim: 3,
            ..ModelConfig::new(3, [8, 8, 1])
        };
        let b = ModelBundle::<f32>::init(cfg, &mut rng).unwrap();
        let images = ArrayD::from_shape_simple_fn(IxDyn(&[4, 8, 8, 1]), || rng.random_range(-1.0f32..1.0));
        let poses = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-0.6f32..0.6));
        let noise = Array2::from_shape_simple_fn((4, 3), || rng.sample::<f32, _>(StandardNormal));
        let batch = LossBatch {
            images: &images,
            identities: &[1, 2, 3, 1],
            poses: &poses,
            targets: &[3, 3, 1, 2],
            noise: &noise,
        };
        let w = LossWeights::default();
        let (g, gb) = generator_loss(&b.bind(Trainable::Generator), &batch, &w).unwrap();
        assert_eq!(gb.total, gb.recombine());
        assert_eq!(g.item(), gb.total);
        let (_, db) = discriminator_loss(&b.bind(Trainable::Discriminator), &batch, &w, &[0.1, 0.5, 0.9, 0.3]).unwrap();
        assert_eq!(db.total, db.recombine());
    }
}

#[test]
fn discriminator_loss_has_no_generator_gradient_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = ModelConfig {
        latent_dim: 2,
        ..ModelConfig::new(2, [8, 8, 1])
    };
    let b = ModelBundle::<f64>::init(cfg, &mut rng).unwrap();
    let images = ArrayD::from_shape_simple_fn(IxDyn(&[2, 8, 8, 1]), || rng.random_range(-1.0..1.0));
    let poses = arr2(&[[0.1, 0.2, 0.3], [-0.1, 0.0, 0.5]]);
    let noise = arr2(&[[0.3, -0.2], [1.0, 0.1]]);
    let batch = LossBatch { images: &images, identities: &[1, 2], poses: &poses, targets: &[2, 2], noise: &noise };
    let bound = b.bind(Trainable::All);
    let (total, _) = discriminator_loss(&bound, &batch, &LossWeights::default(), &[0.4, 0.6]).unwrap();
    let gvars = bound.generator_vars();
    for g in grad(&total, &gvars, false) {
        assert!(g.value().iter().all(|&x| x == 0.0));
    }
    let dvars = bound.discriminator_vars();
    assert!(grad(&total, &dvars, false).iter().any(|g| g.value().iter().any(|&x| x != 0.0)));
}

#[test]
fn loss_weight_validation() {
    assert!(LossWeights::default().validate().is_ok());
    let mut w = LossWeights::default();
    w.generator[2] = -1.0;
    assert!(w.validate().is_err());
    let mut w = LossWeights::default();
    w.gp_gamma = 0.0;
    assert!(w.validate().is_err());
}

#[test]
fn batch_shape_errors_surface() {
    let b = stub_bundle();
    let sb = StubBatch::new(0.5);
    let bad_noise = Array2::zeros((2, 3));
    let batch = LossBatch { noise: &bad_noise, ..sb.batch() };
    assert!(matches!(generator_loss(&b.bind(Trainable::Generator), &batch, &LossWeights::default()), Err(Error::Shape(_))));
    let batch = LossBatch { targets: &[1], ..sb.batch() };
    assert!(matches!(discriminator_loss(&b.bind(Trainable::Discriminator), &batch, &LossWeights::default(), &[0.5, 0.5]), Err(Error::Shape(_))));
}

#[test]
fn gradient_penalty_ignores_no_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let real = ArrayD::from_shape_simple_fn(IxDyn(&[4, 2, 2, 1]), || rng.random_range(-1.0..1.0));
    let fake = ArrayD::from_shape_simple_fn(IxDyn(&[4, 2, 2, 1]), || rng.random_range(-1.0..1.0));
    let mix = [0.1, 0.4, 0.7, 0.9];
    let critic = |x: &Var<f64>| x.reshape(&[4, 4]).tanh().sum_per_sample();
    let tracked = gradient_penalty_with_mix(critic, &real, &fake, 10.0, &mix).unwrap().item();
    let untracked = no_grad(|| gradient_penalty_with_mix(critic, &real, &fake, 10.0, &mix).unwrap().item());
    assert_eq!(tracked, untracked);
    let flat = gradient_penalty_with_mix(|x: &Var<f64>| x.reshape(&[4, 4]).sum_per_sample().scale(0.0), &real, &fake, 10.0, &mix)
        .unwrap()
        .item();
    assert!((tracked - flat).abs() > 1e-3);
}
