//! Worst central-difference relative error of each layer's analytic gradients.

use femurseg::nn::layers::*;
use femurseg::nn::Tensor;
use femurseg::rng::SeededRng;

use super::{dot, fd_max_rel_err, random_away_from_zero, random_tensor, FD_STEP};

pub const TOL: f64 = 1e-6;
pub const SHAPE: [usize; 5] = [2, 2, 4, 4, 4];

/// Input, weight and bias gradients of `L = <forward(x, w, b), r>`.
pub fn conv_error(spec: ConvSpec, transposed: bool, x_shape: &[usize], seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed, 0);
    let x = random_tensor(x_shape, &mut rng);
    let w: Vec<f64> = (0..spec.weight_len()).map(|_| rng.standard_normal() * 0.3).collect();
    let b: Vec<f64> = (0..spec.out_ch).map(|_| rng.standard_normal()).collect();
    let fwd = |x: &Tensor<f64>, w: &[f64], b: &[f64]| {
        if transposed {
            conv_transpose3d_forward(x, w, b, &spec).unwrap()
        } else {
            conv3d_forward(x, w, b, &spec).unwrap()
        }
    };
    let y = fwd(&x, &w, &b);
    let r = random_tensor(&y.shape, &mut rng);
    let g = if transposed {
        conv_transpose3d_backward(&r, &x, &w, &spec).unwrap()
    } else {
        conv3d_backward(&r, &x, &w, &spec).unwrap()
    };
    let ex = fd_max_rel_err(
        &mut |p| dot(&fwd(&Tensor::new(x.shape.clone(), p.to_vec()).unwrap(), &w, &b).data, &r.data),
        &x.data,
        &g.input.data,
        FD_STEP,
    );
    let ew = fd_max_rel_err(&mut |p| dot(&fwd(&x, p, &b).data, &r.data), &w, &g.weight, FD_STEP);
    let eb = fd_max_rel_err(&mut |p| dot(&fwd(&x, &w, p).data, &r.data), &b, &g.bias, FD_STEP);
    ex.max(ew).max(eb)
}

pub fn conv3x3x3_error() -> f64 {
    conv_error(ConvSpec::new(2, 3, 3, 1, 1), false, &SHAPE, 1)
}

pub fn conv1x1x1_error() -> f64 {
    conv_error(ConvSpec::new(2, 2, 1, 1, 0), false, &SHAPE, 2)
}

pub fn downsample_error() -> f64 {
    conv_error(ConvSpec::new(2, 4, 2, 2, 0), false, &SHAPE, 3)
}

pub fn upsample_error() -> f64 {
    conv_error(ConvSpec::new(2, 2, 2, 2, 0), true, &[2, 2, 2, 2, 2], 4)
}

pub fn batchnorm_error() -> f64 {
    let mut rng = SeededRng::new(5, 0);
    let x = random_tensor(&SHAPE, &mut rng);
    let gamma: Vec<f64> = (0..2).map(|_| rng.uniform_in(0.5, 1.5)).collect();
    let beta: Vec<f64> = (0..2).map(|_| rng.standard_normal()).collect();
    let r = random_tensor(&SHAPE, &mut rng);
    let fwd = |x: &Tensor<f64>, g: &[f64], b: &[f64]| batchnorm_train_forward(x, g, b, 1e-5).unwrap().0;
    let (_, cache) = batchnorm_train_forward(&x, &gamma, &beta, 1e-5).unwrap();
    let (dx, dg, db) = batchnorm_backward(&r, &cache, &gamma).unwrap();
    let ex = fd_max_rel_err(
        &mut |p| dot(&fwd(&Tensor::new(SHAPE.to_vec(), p.to_vec()).unwrap(), &gamma, &beta).data, &r.data),
        &x.data,
        &dx.data,
        FD_STEP,
    );
    let eg = fd_max_rel_err(&mut |p| dot(&fwd(&x, p, &beta).data, &r.data), &gamma, &dg, FD_STEP);
    let eb = fd_max_rel_err(&mut |p| dot(&fwd(&x, &gamma, p).data, &r.data), &beta, &db, FD_STEP);
    ex.max(eg).max(eb)
}

pub fn relu_error() -> f64 {
    let mut rng = SeededRng::new(6, 0);
    // Every entry is at least 100 steps from zero, so no perturbation crosses the kink.
    let x = random_away_from_zero(&SHAPE, 0.1, 2.0, &mut rng);
    let r = random_tensor(&SHAPE, &mut rng);
    let y = relu(&x);
    let dx = relu_backward(&r, &y);
    fd_max_rel_err(
        &mut |p| dot(&relu(&Tensor::new(SHAPE.to_vec(), p.to_vec()).unwrap()).data, &r.data),
        &x.data,
        &dx.data,
        FD_STEP,
    )
}

pub fn softmax_ce_error() -> f64 {
    let mut rng = SeededRng::new(7, 0);
    let logits = random_tensor(&SHAPE, &mut rng);
    let labels: Vec<bool> = (0..2 * 64).map(|_| rng.uniform() < 0.3).collect();
    // Two batch items stacked along the batch axis.
    let mut onehot = onehot2::<f64>(&labels[..64], [4, 4, 4]);
    onehot.data.extend(onehot2::<f64>(&labels[64..], [4, 4, 4]).data);
    onehot.shape[0] = 2;
    let (_, g) = softmax_cross_entropy(&logits, &onehot).unwrap();
    fd_max_rel_err(
        &mut |p| softmax_cross_entropy(&Tensor::new(SHAPE.to_vec(), p.to_vec()).unwrap(), &onehot).unwrap().0,
        &logits.data,
        &g.data,
        FD_STEP,
    )
}

/// Every layer check, by name.
pub fn all_layers() -> Vec<(&'static str, f64)> {
    vec![
        ("conv3d 3x3x3", conv3x3x3_error()),
        ("conv3d 1x1x1", conv1x1x1_error()),
        ("downsample", downsample_error()),
        ("upsample", upsample_error()),
        ("batchnorm", batchnorm_error()),
        ("relu", relu_error()),
        ("softmax-ce", softmax_ce_error()),
    ]
}
