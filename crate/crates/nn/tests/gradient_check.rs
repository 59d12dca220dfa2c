//! Central finite differences against the hand-written backward passes, in f64.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbal_nn::{joint_objective, FeatureMap, LossPredictor, LossPredictorConfig, SegModelConfig, UNet};

struct Setup {
    model: UNet<f64>,
    predictor: Option<LossPredictor<f64>>,
    images: FeatureMap<f64>,
    targets: Vec<u8>,
}

fn setup(with_predictor: bool, seed: u64) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SegModelConfig { depth: 2, base_channels: 4, class_count: 3, ..Default::default() };
    let model = UNet::new(cfg.clone(), &mut rng).unwrap();
    let predictor = with_predictor.then(|| {
        let lp = LossPredictorConfig { tap_projection_dim: 6, ..Default::default() };
        LossPredictor::new(lp, &cfg.tap_channels(), &mut rng).unwrap()
    });
    let images = FeatureMap::from_vec(1, 4, 8, 8, (0..256).map(|_| rng.gen::<f64>()).collect());
    let targets = (0..256).map(|_| rng.gen_range(0..3u8)).collect();
    Setup { model, predictor, images, targets }
}

fn loss(s: &mut Setup, grads: bool) -> f64 {
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(77);
    joint_objective(
        &mut s.model,
        s.predictor.as_mut(),
        &s.images,
        &s.targets,
        false,
        Some(&mut dropout_rng as &mut dyn RngCore),
        grads,
    )
    .unwrap()
    .total
}

fn check(with_predictor: bool) {
    let mut s = setup(with_predictor, 5);
    s.model.zero_grad();
    if let Some(p) = s.predictor.as_mut() {
        p.zero_grad();
    }
    loss(&mut s, true);
    let n_model = s.model.params().len();
    let n_pred = s.predictor.as_ref().map_or(0, |p| p.params().len());
    let mut pick = ChaCha8Rng::seed_from_u64(11);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let t = pick.gen_range(0..n_model + n_pred);
        let len = if t < n_model { s.model.params()[t].len() } else { s.predictor.as_ref().unwrap().params()[t - n_model].len() };
        let i = pick.gen_range(0..len);
        let analytic = if t < n_model { s.model.params()[t].grad[i] } else { s.predictor.as_ref().unwrap().params()[t - n_model].grad[i] };
        let nudge = |s: &mut Setup, delta: f64| {
            if t < n_model {
                s.model.params_mut()[t].value[i] += delta;
            } else {
                s.predictor.as_mut().unwrap().params_mut()[t - n_model].value[i] += delta;
            }
        };
        nudge(&mut s, eps);
        let up = loss(&mut s, false);
        nudge(&mut s, -2.0 * eps);
        let down = loss(&mut s, false);
        nudge(&mut s, eps);
        let numeric = (up - down) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max(rel);
        assert!(rel < 1e-2, "param tensor {t} index {i}: analytic {analytic:e} numeric {numeric:e}");
    }
    eprintln!("worst relative error {worst:e}");
}

#[test]
fn unet_gradients_match_finite_differences() {
    check(false);
}

#[test]
fn joint_unet_and_loss_predictor_gradients_match_finite_differences() {
    check(true);
}
