//! Central finite-difference checks of every differentiable layer in f64.

mod common;

use common::grad::*;
use common::{random_tensor, rel_err};
use femurseg::nn::layers::{onehot2, softmax_cross_entropy};
use femurseg::nn::{VNetConfig, VNetModel};
use femurseg::rng::SeededRng;

fn check(name: &str, err: f64) {
    assert!(err <= TOL, "{name}: worst relative error {err:e}");
}

#[test]
fn conv3x3x3_same() {
    check("conv3d 3x3x3", conv3x3x3_error());
}

#[test]
fn conv1x1x1_head() {
    check("conv3d 1x1x1", conv1x1x1_error());
}

#[test]
fn strided_downsampling() {
    check("downsample", downsample_error());
}

#[test]
fn transposed_upsampling() {
    check("upsample", upsample_error());
}

#[test]
fn batchnorm_train_mode() {
    check("batchnorm", batchnorm_error());
}

#[test]
fn relu_away_from_the_kink() {
    check("relu", relu_error());
}

#[test]
fn softmax_cross_entropy_logits() {
    check("softmax-ce", softmax_ce_error());
}

#[test]
fn whole_network_parameter_gradients() {
    // Random nonzero head so every path carries gradient.
    let mut m = VNetModel::<f64>::new(VNetConfig::tiny(), 8).unwrap();
    let mut rng = SeededRng::new(8, 0);
    for w in m.net.head.weight.value.iter_mut() {
        *w = rng.standard_normal() * 0.5;
    }
    let x = random_tensor(&[1, 1, 8, 8, 8], &mut rng);
    let labels: Vec<bool> = (0..512).map(|_| rng.uniform() < 0.4).collect();
    let y = onehot2::<f64>(&labels, [8, 8, 8]);
    m.net.zero_grad();
    let logits = m.net.forward(&x, true).unwrap();
    let (_, dl) = softmax_cross_entropy(&logits, &y).unwrap();
    m.net.backward(&dl).unwrap();
    let grads: Vec<Vec<f64>> = m.net.params_mut().iter().map(|p| p.grad.clone()).collect();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().enumerate() {
        // A handful of coordinates per tensor.
        for &i in &[0, g.len() / 2, g.len() - 1] {
            let eval = |delta: f64| {
                let mut probe = m.clone();
                probe.net.params_mut()[pi].value[i] += delta;
                softmax_cross_entropy(&probe.net.forward(&x, true).unwrap(), &y).unwrap().0
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            worst = worst.max(rel_err(g[i], numeric, 1e-6));
        }
    }
    // A ReLU kink inside the step would show up as an O(1) error, not a small one.
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}
