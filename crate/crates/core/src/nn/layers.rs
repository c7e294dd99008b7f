//! Layer kernels and the stateful layer wrappers built on them.
//!
//! Convolutions lower to GEMM through an im2col buffer built for a band of
//! output depth slices at a time, which bounds the scratch memory. Weights
//! are stored `out x in x k x k x k` for convolutions and
//! `in x out x k x k x k` for transposed convolutions.

use super::tensor::{Param, Tensor};
use super::{gemm, Mat, NnError, Real};

/// Upper bound on im2col scratch elements per band; small enough to stay in cache.
const COL_BUDGET: usize = 1 << 18;

/// Cubic-kernel convolution hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self { in_ch, out_ch, k, stride, pad }
    }

    pub fn weight_len(&self) -> usize {
        self.in_ch * self.out_ch * self.k.pow(3)
    }

    /// Output size of a forward convolution along one axis.
    pub fn conv_out(&self, n: usize) -> Option<usize> {
        (n + 2 * self.pad).checked_sub(self.k).map(|v| v / self.stride + 1)
    }

    /// Output size of a transposed convolution along one axis.
    pub fn transposed_out(&self, n: usize) -> Option<usize> {
        ((n - 1) * self.stride + self.k).checked_sub(2 * self.pad)
    }
}

/// Geometry of the sliding kernel over a `channels x dims` tensor producing
/// `out` positions. For a transposed convolution this is the geometry of the
/// adjoint forward convolution (large tensor in, small tensor out).
#[derive(Debug, Clone, Copy)]
struct Geom {
    channels: usize,
    dims: [usize; 3],
    out: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.channels * self.k.pow(3)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Bands `[r0, r1)` of output lines (a line is one `(z, y)` pair, `out[2]`
    /// positions long) whose im2col buffer fits the budget.
    fn bands(&self) -> impl Iterator<Item = (usize, usize)> {
        let per_line = (self.rows() * self.out[2]).max(1);
        let step = (COL_BUDGET / per_line).max(1);
        let lines = self.out[0] * self.out[1];
        (0..lines).step_by(step).map(move |r0| (r0, (r0 + step).min(lines)))
    }

    /// Output indices `o` whose input index `o*stride + t - pad` lies in `[0, n)`.
    fn valid(&self, t: usize, n: usize, n_out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let off = t as isize - p;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = (n as isize - 1 - off).div_euclid(s) + 1;
        let lo = lo.clamp(0, n_out as isize) as usize;
        let hi = hi.clamp(0, n_out as isize) as usize;
        (lo, hi.max(lo))
    }
}

/// Calls `f(row, input line offset, column base, x range)` for every kernel
/// tap and output line of the band.
#[inline(always)]
fn for_each_tap(g: &Geom, r0: usize, r1: usize, mut f: impl FnMut(usize, usize, usize, (usize, usize), usize)) {
    let [d, h, w] = g.dims;
    let [od, ho, wo] = g.out;
    let k = g.k;
    let mut row = 0;
    for c in 0..g.channels {
        for kz in 0..k {
            let (zlo, zhi) = g.valid(kz, d, od);
            for ky in 0..k {
                let (ylo, yhi) = g.valid(ky, h, ho);
                for kx in 0..k {
                    let xr = g.valid(kx, w, wo);
                    for r in r0..r1 {
                        let (oz, oy) = (r / ho, r % ho);
                        if oz < zlo || oz >= zhi || oy < ylo || oy >= yhi {
                            continue;
                        }
                        let iz = oz * g.stride + kz - g.pad;
                        let iy = oy * g.stride + ky - g.pad;
                        f(row, ((c * d + iz) * h + iy) * w, (r - r0) * wo, xr, kx);
                    }
                    row += 1;
                }
            }
        }
    }
}

fn im2col<T: Real>(x: &[T], g: &Geom, r0: usize, r1: usize, col: &mut Vec<T>) {
    let cols = (r1 - r0) * g.out[2];
    let s = g.stride;
    col.clear();
    col.resize(g.rows() * cols, T::zero());
    for_each_tap(g, r0, r1, |row, line, base, (xlo, xhi), kx| {
        let dst = &mut col[row * cols + base..row * cols + base + g.out[2]];
        let src = &x[line..line + g.dims[2]];
        if s == 1 {
            let ix0 = xlo + kx - g.pad;
            dst[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
        } else {
            for ox in xlo..xhi {
                dst[ox] = src[ox * s + kx - g.pad];
            }
        }
    });
}

fn col2im<T: Real>(col: &[T], g: &Geom, r0: usize, r1: usize, x: &mut [T]) {
    let cols = (r1 - r0) * g.out[2];
    let s = g.stride;
    for_each_tap(g, r0, r1, |row, line, base, (xlo, xhi), kx| {
        let src = &col[row * cols + base..row * cols + base + g.out[2]];
        let dst = &mut x[line..line + g.dims[2]];
        for ox in xlo..xhi {
            dst[ox * s + kx - g.pad] += src[ox];
        }
    });
}

fn check_input<T: Real>(x: &Tensor<T>, channels: usize, what: &str) -> Result<(usize, [usize; 3]), NnError> {
    let (n, c, dims) = x.dims5()?;
    if c != channels {
        return Err(NnError::ShapeMismatch(format!("{what}: expected {channels} channels, got {c}")));
    }
    Ok((n, dims))
}

fn conv_geom<T: Real>(x: &Tensor<T>, spec: &ConvSpec) -> Result<(usize, Geom), NnError> {
    let (n, dims) = check_input(x, spec.in_ch, "conv3d input")?;
    if spec.stride > 1 && spec.k == spec.stride && spec.pad == 0 {
        // Non-overlapping downsampling must tile the input exactly.
        if let Some(axis) = (0..3).find(|&a| dims[a] % spec.stride != 0) {
            return Err(NnError::OddDimension { axis, size: dims[axis] });
        }
    }
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = spec
            .conv_out(dims[a])
            .ok_or_else(|| NnError::ShapeMismatch(format!("conv3d: axis {a} of size {} smaller than kernel", dims[a])))?;
    }
    Ok((
        n,
        Geom {
            channels: spec.in_ch,
            dims,
            out,
            k: spec.k,
            stride: spec.stride,
            pad: spec.pad,
        },
    ))
}

fn check_params<T: Real>(spec: &ConvSpec, weight: &[T], bias: &[T]) -> Result<(), NnError> {
    if weight.len() != spec.weight_len() || bias.len() != spec.out_ch {
        return Err(NnError::ShapeMismatch(format!(
            "conv parameters: weight {} (want {}), bias {} (want {})",
            weight.len(),
            spec.weight_len(),
            bias.len(),
            spec.out_ch
        )));
    }
    Ok(())
}

fn add_bias<T: Real>(y: &mut [T], bias: &[T], per_channel: usize) {
    for (c, chunk) in y.chunks_mut(per_channel).enumerate() {
        let b = bias[c % bias.len()];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Real>(dy: &[T], channels: usize, per_channel: usize, out: &mut [T]) {
    for (c, chunk) in dy.chunks(per_channel).enumerate() {
        let s = chunk.iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
        out[c % channels] += T::lit(s);
    }
}

/// Cross-correlation with zero padding.
pub fn conv3d_forward<T: Real>(x: &Tensor<T>, weight: &[T], bias: &[T], spec: &ConvSpec) -> Result<Tensor<T>, NnError> {
    check_params(spec, weight, bias)?;
    let (n, g) = conv_geom(x, spec)?;
    let in_len = g.channels * g.dims.iter().product::<usize>();
    let out_sp: usize = g.out.iter().product();
    let mut y = Tensor::zeros(vec![n, spec.out_ch, g.out[0], g.out[1], g.out[2]]);
    let wm = Mat::row_major(weight, spec.out_ch, g.rows());
    let mut col = Vec::new();
    for b in 0..n {
        let xb = &x.data[b * in_len..(b + 1) * in_len];
        let yb = &mut y.data[b * spec.out_ch * out_sp..(b + 1) * spec.out_ch * out_sp];
        if g.is_pointwise() {
            gemm(T::one(), wm, Mat::row_major(xb, g.rows(), out_sp), T::zero(), yb, out_sp);
        } else {
            for (r0, r1) in g.bands() {
                im2col(xb, &g, r0, r1, &mut col);
                let cols = (r1 - r0) * g.out[2];
                gemm(T::one(), wm, Mat::row_major(&col, g.rows(), cols), T::zero(), &mut yb[r0 * g.out[2]..], out_sp);
            }
        }
    }
    add_bias(&mut y.data, bias, out_sp);
    Ok(y)
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv3d_backward<T: Real>(dy: &Tensor<T>, x: &Tensor<T>, weight: &[T], spec: &ConvSpec) -> Result<ConvGrads<T>, NnError> {
    conv3d_backward_impl(dy, x, weight, spec, true)
}

/// With `need_input == false` the input gradient is left at zero.
fn conv3d_backward_impl<T: Real>(dy: &Tensor<T>, x: &Tensor<T>, weight: &[T], spec: &ConvSpec, need_input: bool) -> Result<ConvGrads<T>, NnError> {
    let (n, g) = conv_geom(x, spec)?;
    if dy.shape != [n, spec.out_ch, g.out[0], g.out[1], g.out[2]] {
        return Err(NnError::ShapeMismatch(format!("conv3d grad_out {:?} does not match forward output", dy.shape)));
    }
    let in_len = g.channels * g.dims.iter().product::<usize>();
    let out_sp: usize = g.out.iter().product();
    let mut dx = Tensor::zeros(x.shape.clone());
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); spec.out_ch];
    let wm = Mat::row_major(weight, spec.out_ch, g.rows());
    let (mut col, mut dcol) = (Vec::new(), Vec::new());
    let flipped = spec.stride == 1 && spec.k > 1 && 2 * spec.pad + 1 == spec.k;
    for b in 0..n {
        let xb = &x.data[b * in_len..(b + 1) * in_len];
        let dyb = &dy.data[b * spec.out_ch * out_sp..(b + 1) * spec.out_ch * out_sp];
        let dxb = &mut dx.data[b * in_len..(b + 1) * in_len];
        if g.is_pointwise() {
            let dym = Mat::row_major(dyb, spec.out_ch, out_sp);
            gemm(T::one(), dym, Mat::row_major(xb, g.rows(), out_sp).t(), T::one(), &mut dw, g.rows());
            if need_input {
                gemm(T::one(), wm.t(), dym, T::zero(), dxb, out_sp);
            }
        } else {
            for (r0, r1) in g.bands() {
                let cols = (r1 - r0) * g.out[2];
                let dym = Mat {
                    data: &dyb[r0 * g.out[2]..],
                    rows: spec.out_ch,
                    cols,
                    rs: out_sp as isize,
                    cs: 1,
                };
                im2col(xb, &g, r0, r1, &mut col);
                gemm(T::one(), dym, Mat::row_major(&col, g.rows(), cols).t(), T::one(), &mut dw, g.rows());
                if need_input && !flipped {
                    dcol.clear();
                    dcol.resize(g.rows() * cols, T::zero());
                    gemm(T::one(), wm.t(), dym, T::zero(), &mut dcol, cols);
                    col2im(&dcol, &g, r0, r1, dxb);
                }
            }
        }
        bias_grad(dyb, spec.out_ch, out_sp, &mut db);
    }
    if need_input && flipped {
        // A stride-1 convolution's input gradient is the convolution of the
        // output gradient with the flipped, channel-transposed kernel.
        let k3 = spec.k.pow(3);
        let mut wf = vec![T::zero(); weight.len()];
        for co in 0..spec.out_ch {
            for ci in 0..spec.in_ch {
                for t in 0..k3 {
                    wf[(ci * spec.out_ch + co) * k3 + (k3 - 1 - t)] = weight[(co * spec.in_ch + ci) * k3 + t];
                }
            }
        }
        let back = ConvSpec::new(spec.out_ch, spec.in_ch, spec.k, 1, spec.k - 1 - spec.pad);
        dx = conv3d_forward(dy, &wf, &vec![T::zero(); spec.in_ch], &back)?;
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

fn transposed_geom<T: Real>(x: &Tensor<T>, spec: &ConvSpec) -> Result<(usize, Geom), NnError> {
    let (n, small) = check_input(x, spec.in_ch, "transposed conv input")?;
    let mut big = [0; 3];
    for a in 0..3 {
        big[a] = spec
            .transposed_out(small[a])
            .ok_or_else(|| NnError::ShapeMismatch(format!("transposed conv: axis {a} collapses")))?;
    }
    Ok((
        n,
        Geom {
            channels: spec.out_ch,
            dims: big,
            out: small,
            k: spec.k,
            stride: spec.stride,
            pad: spec.pad,
        },
    ))
}

/// Transposed convolution (adjoint of [`conv3d_forward`] without bias).
pub fn conv_transpose3d_forward<T: Real>(x: &Tensor<T>, weight: &[T], bias: &[T], spec: &ConvSpec) -> Result<Tensor<T>, NnError> {
    check_params(spec, weight, bias)?;
    let (n, g) = transposed_geom(x, spec)?;
    let small: usize = g.out.iter().product();
    let big: usize = g.dims.iter().product();
    let mut y = Tensor::zeros(vec![n, spec.out_ch, g.dims[0], g.dims[1], g.dims[2]]);
    let wm = Mat::row_major(weight, spec.in_ch, g.rows());
    let mut col = Vec::new();
    for b in 0..n {
        let xb = &x.data[b * spec.in_ch * small..(b + 1) * spec.in_ch * small];
        let yb = &mut y.data[b * spec.out_ch * big..(b + 1) * spec.out_ch * big];
        for (r0, r1) in g.bands() {
            let cols = (r1 - r0) * g.out[2];
            let xm = Mat {
                data: &xb[r0 * g.out[2]..],
                rows: spec.in_ch,
                cols,
                rs: small as isize,
                cs: 1,
            };
            col.clear();
            col.resize(g.rows() * cols, T::zero());
            gemm(T::one(), wm.t(), xm, T::zero(), &mut col, cols);
            col2im(&col, &g, r0, r1, yb);
        }
    }
    add_bias(&mut y.data, bias, big);
    Ok(y)
}

pub fn conv_transpose3d_backward<T: Real>(dy: &Tensor<T>, x: &Tensor<T>, weight: &[T], spec: &ConvSpec) -> Result<ConvGrads<T>, NnError> {
    let (n, g) = transposed_geom(x, spec)?;
    if dy.shape != [n, spec.out_ch, g.dims[0], g.dims[1], g.dims[2]] {
        return Err(NnError::ShapeMismatch(format!(
            "transposed conv grad_out {:?} does not match forward output",
            dy.shape
        )));
    }
    let small: usize = g.out.iter().product();
    let big: usize = g.dims.iter().product();
    let mut dx = Tensor::zeros(x.shape.clone());
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); spec.out_ch];
    let wm = Mat::row_major(weight, spec.in_ch, g.rows());
    let mut col = Vec::new();
    for b in 0..n {
        let xb = &x.data[b * spec.in_ch * small..(b + 1) * spec.in_ch * small];
        let dyb = &dy.data[b * spec.out_ch * big..(b + 1) * spec.out_ch * big];
        let dxb = &mut dx.data[b * spec.in_ch * small..(b + 1) * spec.in_ch * small];
        for (r0, r1) in g.bands() {
            let cols = (r1 - r0) * g.out[2];
            im2col(dyb, &g, r0, r1, &mut col);
            let colm = Mat::row_major(&col, g.rows(), cols);
            gemm(T::one(), wm, colm, T::zero(), &mut dxb[r0 * g.out[2]..], small);
            let xm = Mat {
                data: &xb[r0 * g.out[2]..],
                rows: spec.in_ch,
                cols,
                rs: small as isize,
                cs: 1,
            };
            gemm(T::one(), xm, colm.t(), T::one(), &mut dw, g.rows());
        }
        bias_grad(dyb, spec.out_ch, big, &mut db);
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

/// Saved quantities of a train-mode batch normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Biased (population) variance per channel.
    pub var: Vec<f64>,
    /// Elements per channel (batch x spatial).
    pub count: usize,
}

/// Visits each `(batch, channel)` run of a 5-axis tensor.
fn channel_runs<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize), NnError> {
    let (n, c, dims) = x.dims5()?;
    Ok((n, c, dims.iter().product()))
}

pub fn batchnorm_train_forward<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: f64) -> Result<(Tensor<T>, BnCache<T>), NnError> {
    let (n, c, sp) = channel_runs(x)?;
    if gamma.len() != c || beta.len() != c {
        return Err(NnError::ShapeMismatch(format!(
            "batchnorm: {c} channels, gamma {} beta {}",
            gamma.len(),
            beta.len()
        )));
    }
    let count = n * sp;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let run = &x.data[(b * c + ch) * sp..(b * c + ch + 1) * sp];
            mean[ch] += run.iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    for b in 0..n {
        for ch in 0..c {
            let run = &x.data[(b * c + ch) * sp..(b * c + ch + 1) * sp];
            var[ch] += run.iter().map(|v| (v.to_f64().unwrap() - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = Tensor::zeros(x.shape.clone());
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * sp..(b * c + ch + 1) * sp;
            let (m, is) = (mean[ch], inv_std[ch]);
            let (gm, bt) = (gamma[ch], beta[ch]);
            for ((xh, yv), &xv) in xhat[r.clone()].iter_mut().zip(&mut y.data[r.clone()]).zip(&x.data[r]) {
                *xh = T::lit((xv.to_f64().unwrap() - m) * is);
                *yv = gm * *xh + bt;
            }
        }
    }
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
            count,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Real>(dy: &Tensor<T>, cache: &BnCache<T>, gamma: &[T]) -> Result<(Tensor<T>, Vec<T>, Vec<T>), NnError> {
    let (n, c, sp) = channel_runs(dy)?;
    if dy.len() != cache.xhat.len() {
        return Err(NnError::ShapeMismatch("batchnorm grad_out does not match cache".into()));
    }
    let mut dg = vec![0.0; c];
    let mut dbt = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * sp..(b * c + ch + 1) * sp;
            for (&g, &xh) in dy.data[r.clone()].iter().zip(&cache.xhat[r]) {
                let g = g.to_f64().unwrap();
                dbt[ch] += g;
                dg[ch] += g * xh.to_f64().unwrap();
            }
        }
    }
    let m = cache.count as f64;
    let mut dx = Tensor::zeros(dy.shape.clone());
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * sp..(b * c + ch + 1) * sp;
            let k = gamma[ch].to_f64().unwrap() * cache.inv_std[ch] / m;
            for ((d, &g), &xh) in dx.data[r.clone()].iter_mut().zip(&dy.data[r.clone()]).zip(&cache.xhat[r]) {
                *d = T::lit(k * (m * g.to_f64().unwrap() - dbt[ch] - xh.to_f64().unwrap() * dg[ch]));
            }
        }
    }
    Ok((dx, dg.into_iter().map(T::lit).collect(), dbt.into_iter().map(T::lit).collect()))
}

pub fn batchnorm_infer<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], mean: &[T], var: &[T], eps: f64) -> Result<Tensor<T>, NnError> {
    let (n, c, sp) = channel_runs(x)?;
    if gamma.len() != c || beta.len() != c || mean.len() != c || var.len() != c {
        return Err(NnError::ShapeMismatch(format!("batchnorm: {c} channels, parameters disagree")));
    }
    let mut y = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let is = 1.0 / (var[ch].to_f64().unwrap() + eps).sqrt();
            let scale = T::lit(gamma[ch].to_f64().unwrap() * is);
            let shift = T::lit(beta[ch].to_f64().unwrap() - gamma[ch].to_f64().unwrap() * mean[ch].to_f64().unwrap() * is);
            for v in &mut y.data[(b * c + ch) * sp..(b * c + ch + 1) * sp] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(y)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
    y
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Real>(dy: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&y.data) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// Layout helper: `(outer, classes, inner)` for a tensor whose axis 1 holds classes.
fn class_layout<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize), NnError> {
    if x.shape.len() < 2 {
        return Err(NnError::ShapeMismatch(format!("need a class axis, got {:?}", x.shape)));
    }
    Ok((x.shape[0], x.shape[1], x.shape[2..].iter().product()))
}

/// Softmax over axis 1.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (n, c, inner) = class_layout(logits)?;
    let mut p = logits.clone();
    for b in 0..n {
        let base = b * c * inner;
        for i in 0..inner {
            let at = |ch: usize| base + ch * inner + i;
            let mx = (0..c).map(|ch| logits.data[at(ch)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for ch in 0..c {
                let e = (logits.data[at(ch)] - mx).exp();
                p.data[at(ch)] = e;
                sum += e;
            }
            for ch in 0..c {
                p.data[at(ch)] = p.data[at(ch)] / sum;
            }
        }
    }
    Ok(p)
}

/// Mean categorical cross-entropy over all `batch x spatial` positions and
/// its gradient `(p - y) / N` with respect to the logits. Probabilities are
/// clamped to `[1e-12, 1]` inside the logarithm.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, onehot: &Tensor<T>) -> Result<(f64, Tensor<T>), NnError> {
    if logits.shape != onehot.shape {
        return Err(NnError::ShapeMismatch(format!("logits {:?} vs labels {:?}", logits.shape, onehot.shape)));
    }
    let (n, _, inner) = class_layout(logits)?;
    let count = (n * inner) as f64;
    let p = softmax(logits)?;
    let mut loss = 0.0;
    let mut grad = p.clone();
    let inv = T::lit(1.0 / count);
    for ((g, &pv), &yv) in grad.data.iter_mut().zip(&p.data).zip(&onehot.data) {
        let (pf, yf) = (pv.to_f64().unwrap(), yv.to_f64().unwrap());
        if yf != 0.0 {
            loss -= yf * pf.clamp(1e-12, 1.0).ln();
        }
        *g = (pv - yv) * inv;
    }
    Ok((loss / count, grad))
}

/// Two-class one-hot encoding of a boolean label field as a `[1, 2, d, h, w]` tensor.
pub fn onehot2<T: Real>(labels: &[bool], spatial: [usize; 3]) -> Tensor<T> {
    let n = labels.len();
    let mut data = vec![T::zero(); 2 * n];
    for (i, &l) in labels.iter().enumerate() {
        data[if l { n + i } else { i }] = T::one();
    }
    Tensor {
        shape: vec![1, 2, spatial[0], spatial[1], spatial[2]],
        data,
        grad: None,
    }
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (n, ca, sa) = a.dims5()?;
    let (nb, cb, sb) = b.dims5()?;
    if n != nb || sa != sb {
        return Err(NnError::ShapeMismatch(format!("concat {:?} with {:?}", a.shape, b.shape)));
    }
    let sp: usize = sa.iter().product();
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        data.extend_from_slice(&a.data[i * ca * sp..(i + 1) * ca * sp]);
        data.extend_from_slice(&b.data[i * cb * sp..(i + 1) * cb * sp]);
    }
    Tensor::new(vec![n, ca + cb, sa[0], sa[1], sa[2]], data)
}

/// Inverse of [`concat_channels`]: splits after the first `ca` channels.
pub fn split_channels<T: Real>(x: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>), NnError> {
    let (n, c, s) = x.dims5()?;
    if ca > c {
        return Err(NnError::ShapeMismatch(format!("cannot split {ca} of {c} channels")));
    }
    let sp: usize = s.iter().product();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for i in 0..n {
        let item = &x.data[i * c * sp..(i + 1) * c * sp];
        a.extend_from_slice(&item[..ca * sp]);
        b.extend_from_slice(&item[ca * sp..]);
    }
    Ok((
        Tensor::new(vec![n, ca, s[0], s[1], s[2]], a)?,
        Tensor::new(vec![n, c - ca, s[0], s[1], s[2]], b)?,
    ))
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    if a.shape != b.shape {
        return Err(NnError::ShapeMismatch(format!("add {:?} with {:?}", a.shape, b.shape)));
    }
    let mut y = a.clone();
    y.data.iter_mut().zip(&b.data).for_each(|(u, &v)| *u += v);
    Ok(y)
}

/// Convolution or transposed convolution with trainable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<T> {
    pub spec: ConvSpec,
    pub transposed: bool,
    pub weight: Param<T>,
    pub bias: Param<T>,
    /// When false, `backward` skips the input gradient and returns zeros.
    pub input_grad: bool,
    input: Option<Tensor<T>>,
}

impl<T: Real> Conv3d<T> {
    pub fn new(spec: ConvSpec, transposed: bool) -> Self {
        let k = spec.k;
        let shape = if transposed {
            vec![spec.in_ch, spec.out_ch, k, k, k]
        } else {
            vec![spec.out_ch, spec.in_ch, k, k, k]
        };
        Self {
            spec,
            transposed,
            weight: Param::zeros(shape),
            bias: Param::zeros(vec![spec.out_ch]),
            input_grad: true,
            input: None,
        }
    }

    /// Effective fan-in of one output element.
    pub fn fan_in(&self) -> usize {
        if self.transposed {
            (self.spec.in_ch * self.spec.k.pow(3) / self.spec.stride.pow(3)).max(1)
        } else {
            self.spec.in_ch * self.spec.k.pow(3)
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>, NnError> {
        let y = if self.transposed {
            conv_transpose3d_forward(x, &self.weight.value, &self.bias.value, &self.spec)?
        } else {
            conv3d_forward(x, &self.weight.value, &self.bias.value, &self.spec)?
        };
        self.input = train.then(|| x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let x = self
            .input
            .take()
            .ok_or_else(|| NnError::ShapeMismatch("conv backward without a train-mode forward".into()))?;
        let g = if self.transposed {
            conv_transpose3d_backward(dy, &x, &self.weight.value, &self.spec)?
        } else {
            conv3d_backward_impl(dy, &x, &self.weight.value, &self.spec, self.input_grad)?
        };
        self.weight.grad.iter_mut().zip(&g.weight).for_each(|(a, &b)| *a += b);
        self.bias.grad.iter_mut().zip(&g.bias).for_each(|(a, &b)| *a += b);
        Ok(g.input)
    }
}

/// Batch normalisation with running statistics. The running update is
/// `r = momentum * r + (1 - momentum) * batch`, using the unbiased batch
/// variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm3d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<T>>,
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

impl<T: Real> BatchNorm3d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(vec![channels], T::one()),
            beta: Param::zeros(vec![channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>, NnError> {
        if !train {
            return batchnorm_infer(x, &self.gamma.value, &self.beta.value, &self.running_mean, &self.running_var, self.eps);
        }
        let (y, cache) = batchnorm_train_forward(x, &self.gamma.value, &self.beta.value, self.eps)?;
        let m = self.momentum;
        let unbias = if cache.count > 1 {
            cache.count as f64 / (cache.count - 1) as f64
        } else {
            1.0
        };
        for ch in 0..cache.mean.len() {
            let rm = self.running_mean[ch].to_f64().unwrap();
            let rv = self.running_var[ch].to_f64().unwrap();
            self.running_mean[ch] = T::lit(m * rm + (1.0 - m) * cache.mean[ch]);
            self.running_var[ch] = T::lit(m * rv + (1.0 - m) * cache.var[ch] * unbias);
        }
        self.cache = Some(cache);
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| NnError::ShapeMismatch("batchnorm backward without a train-mode forward".into()))?;
        let (dx, dg, db) = batchnorm_backward(dy, &cache, &self.gamma.value)?;
        self.gamma.grad.iter_mut().zip(&dg).for_each(|(a, &b)| *a += b);
        self.beta.grad.iter_mut().zip(&db).for_each(|(a, &b)| *a += b);
        Ok(dx)
    }
}

/// Convolution, batch normalisation and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnRelu<T> {
    pub conv: Conv3d<T>,
    pub bn: BatchNorm3d<T>,
    output: Option<Tensor<T>>,
}

impl<T: Real> ConvBnRelu<T> {
    pub fn new(spec: ConvSpec, transposed: bool) -> Self {
        Self {
            conv: Conv3d::new(spec, transposed),
            bn: BatchNorm3d::new(spec.out_ch),
            output: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>, NnError> {
        let h = self.conv.forward(x, train)?;
        let h = self.bn.forward(&h, train)?;
        let y = relu(&h);
        self.output = train.then(|| y.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let y = self
            .output
            .take()
            .ok_or_else(|| NnError::ShapeMismatch("block backward without a train-mode forward".into()))?;
        let d = relu_backward(dy, &y);
        let d = self.bn.backward(&d)?;
        self.conv.backward(&d)
    }
}
