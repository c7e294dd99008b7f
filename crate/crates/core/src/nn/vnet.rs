//! Configurable V-Net.
//!
//! Level `l` works at `base_channels * 2^l` channels. Each level holds
//! `convs_per_level` blocks of 3x3x3 convolution, batch norm and ReLU; with
//! more than one block the first block's output is added to the last
//! block's output. Levels are joined by a 2x2x2 stride-2 convolution on the
//! way down and a 2x2x2 stride-2 transposed convolution on the way up (both
//! followed by batch norm and ReLU). Decoder levels concatenate the
//! upsampled tensor with the encoder output of the same level. A 1x1x1
//! convolution maps to the class logits; it starts at zero so the initial
//! prediction is uniform.

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::layers::{concat_channels, softmax, softmax_cross_entropy, split_channels, Conv3d, ConvBnRelu, ConvSpec};
use super::tensor::{Param, Tensor};
use super::{NnError, Real};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub convs_per_level: usize,
    pub in_channels: usize,
    pub out_classes: usize,
    pub residual: bool,
    /// Inputs are normalised as `(x - input_offset) * input_scale` before the first layer.
    pub input_offset: f32,
    pub input_scale: f32,
}

impl VNetConfig {
    /// Desk-scale network.
    pub fn tiny() -> Self {
        Self {
            levels: 3,
            base_channels: 8,
            convs_per_level: 2,
            in_channels: 1,
            out_classes: 2,
            residual: true,
            input_offset: 0.0,
            input_scale: 1.0,
        }
    }

    /// Full-size network.
    pub fn full() -> Self {
        Self {
            levels: 5,
            base_channels: 16,
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "full" => Some(Self::full()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::InvalidConfig(m.into()));
        if self.levels < 2 {
            return bad("levels must be at least 2");
        }
        if self.base_channels == 0 || self.convs_per_level == 0 || self.in_channels == 0 {
            return bad("channel and block counts must be positive");
        }
        if self.out_classes != 2 {
            return bad("out_classes must be 2");
        }
        if !(self.input_offset.is_finite() && self.input_scale.is_finite() && self.input_scale != 0.0) {
            return bad("input normalisation must be finite with nonzero scale");
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial sizes must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn check_input_dims(&self, spatial: [usize; 3]) -> Result<(), NnError> {
        let f = self.divisor();
        if spatial.iter().any(|&s| s == 0 || s % f != 0) {
            return Err(NnError::IndivisibleDims { dims: spatial, factor: f });
        }
        Ok(())
    }
}

/// Blocks of one resolution level.
#[derive(Debug, Clone, PartialEq)]
pub struct Level<T> {
    pub blocks: Vec<ConvBnRelu<T>>,
    pub residual: bool,
}

impl<T: Real> Level<T> {
    fn new(in_ch: usize, ch: usize, n: usize, residual: bool) -> Self {
        let blocks = (0..n)
            .map(|i| ConvBnRelu::new(ConvSpec::new(if i == 0 { in_ch } else { ch }, ch, 3, 1, 1), false))
            .collect();
        Self {
            blocks,
            residual: residual && n > 1,
        }
    }

    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>, NnError> {
        let first = self.blocks[0].forward(x, train)?;
        let mut h = first.clone();
        for b in &mut self.blocks[1..] {
            h = b.forward(&h, train)?;
        }
        if self.residual {
            h.data.iter_mut().zip(&first.data).for_each(|(a, &b)| *a += b);
        }
        Ok(h)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut d = dy.clone();
        for b in self.blocks[1..].iter_mut().rev() {
            d = b.backward(&d)?;
        }
        if self.residual {
            d.data.iter_mut().zip(&dy.data).for_each(|(a, &b)| *a += b);
        }
        self.blocks[0].backward(&d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VNet<T> {
    pub config: VNetConfig,
    pub encoder: Vec<Level<T>>,
    pub down: Vec<ConvBnRelu<T>>,
    pub up: Vec<ConvBnRelu<T>>,
    pub decoder: Vec<Level<T>>,
    pub head: Conv3d<T>,
}

/// Read-only view of a named tensor: `(name, shape, values)`.
pub type TensorVisitor<'v, T> = dyn FnMut(&str, &[usize], &[T]) + 'v;
/// Mutable view of a named tensor.
pub type TensorVisitorMut<'v, T> = dyn FnMut(&str, &[usize], &mut Vec<T>) + 'v;

fn visit_block<T: Real>(b: &ConvBnRelu<T>, p: &str, f: &mut TensorVisitor<T>) {
    let c = [b.bn.running_mean.len()];
    f(&format!("{p}.conv.weight"), &b.conv.weight.shape, &b.conv.weight.value);
    f(&format!("{p}.conv.bias"), &b.conv.bias.shape, &b.conv.bias.value);
    f(&format!("{p}.bn.gamma"), &b.bn.gamma.shape, &b.bn.gamma.value);
    f(&format!("{p}.bn.beta"), &b.bn.beta.shape, &b.bn.beta.value);
    f(&format!("{p}.bn.running_mean"), &c, &b.bn.running_mean);
    f(&format!("{p}.bn.running_var"), &c, &b.bn.running_var);
}

fn visit_block_mut<T: Real>(b: &mut ConvBnRelu<T>, p: &str, f: &mut TensorVisitorMut<T>) {
    let c = [b.bn.running_mean.len()];
    f(&format!("{p}.conv.weight"), &b.conv.weight.shape.clone(), &mut b.conv.weight.value);
    f(&format!("{p}.conv.bias"), &b.conv.bias.shape.clone(), &mut b.conv.bias.value);
    f(&format!("{p}.bn.gamma"), &b.bn.gamma.shape.clone(), &mut b.bn.gamma.value);
    f(&format!("{p}.bn.beta"), &b.bn.beta.shape.clone(), &mut b.bn.beta.value);
    f(&format!("{p}.bn.running_mean"), &c, &mut b.bn.running_mean);
    f(&format!("{p}.bn.running_var"), &c, &mut b.bn.running_var);
}

impl<T: Real> VNet<T> {
    /// He-initialised network (head zeroed), seeded.
    pub fn new(config: VNetConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let l = config.levels;
        let n = config.convs_per_level;
        let encoder = (0..l)
            .map(|i| {
                Level::new(
                    if i == 0 { config.in_channels } else { config.channels(i) },
                    config.channels(i),
                    n,
                    config.residual,
                )
            })
            .collect();
        let down = (0..l - 1)
            .map(|i| ConvBnRelu::new(ConvSpec::new(config.channels(i), config.channels(i + 1), 2, 2, 0), false))
            .collect();
        let up = (0..l - 1)
            .map(|i| ConvBnRelu::new(ConvSpec::new(config.channels(i + 1), config.channels(i), 2, 2, 0), true))
            .collect();
        let decoder = (0..l - 1)
            .map(|i| Level::new(2 * config.channels(i), config.channels(i), n, config.residual))
            .collect();
        let head = Conv3d::new(ConvSpec::new(config.channels(0), config.out_classes, 1, 1, 0), false);
        let mut net = Self {
            config,
            encoder,
            down,
            up,
            decoder,
            head,
        };
        // Nothing upstream of the first convolution needs a gradient.
        net.encoder[0].blocks[0].conv.input_grad = false;
        let mut rng = SeededRng::new(seed, 0x1417);
        net.for_each_block_mut(&mut |b| {
            let std = (2.0 / b.conv.fan_in() as f64).sqrt();
            b.conv.weight.value.iter_mut().for_each(|w| *w = T::lit(std * rng.standard_normal()));
        });
        Ok(net)
    }

    fn for_each_block_mut(&mut self, f: &mut dyn FnMut(&mut ConvBnRelu<T>)) {
        for lv in &mut self.encoder {
            lv.blocks.iter_mut().for_each(&mut *f);
        }
        self.down.iter_mut().for_each(&mut *f);
        self.up.iter_mut().for_each(&mut *f);
        for lv in &mut self.decoder {
            lv.blocks.iter_mut().for_each(&mut *f);
        }
    }

    fn normalise(&self, x: &Tensor<T>) -> Tensor<T> {
        let (o, s) = (T::lit(self.config.input_offset as f64), T::lit(self.config.input_scale as f64));
        let mut y = x.clone();
        y.data.iter_mut().for_each(|v| *v = (*v - o) * s);
        y
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), NnError> {
        let (_, c, sp) = x.dims5()?;
        if c != self.config.in_channels {
            return Err(NnError::ShapeMismatch(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        self.config.check_input_dims(sp)
    }

    /// Class logits. In train mode every layer keeps what its backward pass needs.
    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>, NnError> {
        self.check_input(x)?;
        let l = self.config.levels;
        let mut skips = Vec::with_capacity(l - 1);
        let x = self.normalise(x);
        let mut h = self.encoder[0].forward(&x, train)?;
        for i in 1..l {
            let d = self.down[i - 1].forward(&h, train)?;
            skips.push(h);
            h = self.encoder[i].forward(&d, train)?;
        }
        for i in (0..l - 1).rev() {
            let u = self.up[i].forward(&h, train)?;
            h = self.decoder[i].forward(&concat_channels(&u, &skips[i])?, train)?;
        }
        self.head.forward(&h, train)
    }

    /// Accumulates parameter gradients from the gradient of the logits.
    pub fn backward(&mut self, dlogits: &Tensor<T>) -> Result<(), NnError> {
        let l = self.config.levels;
        let mut dskips = Vec::with_capacity(l - 1);
        let mut dh = self.head.backward(dlogits)?;
        for i in 0..l - 1 {
            let dcat = self.decoder[i].backward(&dh)?;
            let (du, ds) = split_channels(&dcat, self.config.channels(i))?;
            dskips.push(ds);
            dh = self.up[i].backward(&du)?;
        }
        for i in (1..l).rev() {
            let dd = self.encoder[i].backward(&dh)?;
            dh = self.down[i - 1].backward(&dd)?;
            dh.data.iter_mut().zip(&dskips[i - 1].data).for_each(|(a, &b)| *a += b);
        }
        self.encoder[0].backward(&dh)?;
        Ok(())
    }

    /// Per-voxel class probabilities using running batch-norm statistics.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let logits = self.forward(x, false)?;
        softmax(&logits)
    }

    /// Trainable parameters in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = Vec::new();
        fn push_block<'a, T>(b: &'a mut ConvBnRelu<T>, out: &mut Vec<&'a mut Param<T>>) {
            out.push(&mut b.conv.weight);
            out.push(&mut b.conv.bias);
            out.push(&mut b.bn.gamma);
            out.push(&mut b.bn.beta);
        }
        for lv in &mut self.encoder {
            lv.blocks.iter_mut().for_each(|b| push_block(b, &mut out));
        }
        self.down.iter_mut().for_each(|b| push_block(b, &mut out));
        self.up.iter_mut().for_each(|b| push_block(b, &mut out));
        for lv in &mut self.decoder {
            lv.blocks.iter_mut().for_each(|b| push_block(b, &mut out));
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn param_sizes(&mut self) -> Vec<usize> {
        self.params_mut().iter().map(|p| p.len()).collect()
    }

    pub fn param_count(&mut self) -> usize {
        self.param_sizes().iter().sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    /// Every parameter and batch-norm buffer, by name.
    pub fn visit(&self, f: &mut TensorVisitor<T>) {
        for (i, lv) in self.encoder.iter().enumerate() {
            for (j, b) in lv.blocks.iter().enumerate() {
                visit_block(b, &format!("enc{i}.block{j}"), f);
            }
        }
        for (i, b) in self.down.iter().enumerate() {
            visit_block(b, &format!("down{i}"), f);
        }
        for (i, b) in self.up.iter().enumerate() {
            visit_block(b, &format!("up{i}"), f);
        }
        for (i, lv) in self.decoder.iter().enumerate() {
            for (j, b) in lv.blocks.iter().enumerate() {
                visit_block(b, &format!("dec{i}.block{j}"), f);
            }
        }
        f("head.weight", &self.head.weight.shape, &self.head.weight.value);
        f("head.bias", &self.head.bias.shape, &self.head.bias.value);
    }

    pub fn visit_mut(&mut self, f: &mut TensorVisitorMut<T>) {
        for (i, lv) in self.encoder.iter_mut().enumerate() {
            for (j, b) in lv.blocks.iter_mut().enumerate() {
                visit_block_mut(b, &format!("enc{i}.block{j}"), f);
            }
        }
        for (i, b) in self.down.iter_mut().enumerate() {
            visit_block_mut(b, &format!("down{i}"), f);
        }
        for (i, b) in self.up.iter_mut().enumerate() {
            visit_block_mut(b, &format!("up{i}"), f);
        }
        for (i, lv) in self.decoder.iter_mut().enumerate() {
            for (j, b) in lv.blocks.iter_mut().enumerate() {
                visit_block_mut(b, &format!("dec{i}.block{j}"), f);
            }
        }
        let hw = self.head.weight.shape.clone();
        f("head.weight", &hw, &mut self.head.weight.value);
        let hb = self.head.bias.shape.clone();
        f("head.bias", &hb, &mut self.head.bias.value);
    }
}

/// Network plus optimiser state.
#[derive(Debug, Clone, PartialEq)]
pub struct VNetModel<T> {
    pub config: VNetConfig,
    pub net: VNet<T>,
    pub adam: AdamState<T>,
}

impl<T: Real> VNetModel<T> {
    pub fn new(config: VNetConfig, seed: u64) -> Result<Self, NnError> {
        let mut net = VNet::new(config, seed)?;
        let adam = AdamState::new(&net.param_sizes());
        Ok(Self { config, net, adam })
    }

    pub fn param_count(&mut self) -> usize {
        self.net.param_count()
    }

    /// Sets the input normalisation on both the model and its network.
    pub fn set_normalisation(&mut self, offset: f32, scale: f32) {
        self.config.input_offset = offset;
        self.config.input_scale = scale;
        self.net.config = self.config;
    }

    /// One optimisation step on a single patch; returns the loss before the update.
    pub fn train_step(&mut self, x: &Tensor<T>, onehot: &Tensor<T>, lr: f64) -> Result<f64, NnError> {
        self.train_batch(&[(x, onehot)], lr)
    }

    /// One optimisation step on the mean loss of several patches. Each patch
    /// is forwarded separately, so batch-norm statistics are per patch.
    pub fn train_batch(&mut self, batch: &[(&Tensor<T>, &Tensor<T>)], lr: f64) -> Result<f64, NnError> {
        if batch.is_empty() {
            return Err(NnError::ShapeMismatch("empty batch".into()));
        }
        self.net.zero_grad();
        let inv = T::lit(1.0 / batch.len() as f64);
        let mut total = 0.0;
        for (x, onehot) in batch {
            let logits = self.net.forward(x, true)?;
            let (loss, mut dlogits) = softmax_cross_entropy(&logits, onehot)?;
            if !loss.is_finite() {
                return Err(NnError::NonFinite("loss"));
            }
            if batch.len() > 1 {
                dlogits.data.iter_mut().for_each(|g| *g *= inv);
            }
            self.net.backward(&dlogits)?;
            total += loss;
        }
        self.adam.step(&mut self.net.params_mut(), lr)?;
        Ok(total / batch.len() as f64)
    }

    /// Loss of the current parameters on a patch, train-mode statistics, no update.
    pub fn loss(&mut self, x: &Tensor<T>, onehot: &Tensor<T>) -> Result<f64, NnError> {
        let saved = self.net.clone();
        let logits = self.net.forward(x, true)?;
        self.net = saved;
        Ok(softmax_cross_entropy(&logits, onehot)?.0)
    }
}

/// Per-voxel class probabilities (softmax over the class axis).
pub fn vnet_forward<T: Real>(model: &mut VNetModel<T>, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    model.net.predict(input)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Parameter count summed layer by layer from the topology description.
    fn hand_count(c: &VNetConfig) -> usize {
        let conv = |i: usize, o: usize, k: usize| i * o * k * k * k + o;
        let bn = |o: usize| 2 * o;
        let mut total = 0;
        for l in 0..c.levels {
            let ch = c.channels(l);
            let first_in = if l == 0 { c.in_channels } else { ch };
            total += conv(first_in, ch, 3) + bn(ch);
            total += (c.convs_per_level - 1) * (conv(ch, ch, 3) + bn(ch));
            if l + 1 < c.levels {
                let next = c.channels(l + 1);
                total += conv(ch, next, 2) + bn(next); // down
                total += conv(next, ch, 2) + bn(ch); // up
                total += conv(2 * ch, ch, 3) + bn(ch);
                total += (c.convs_per_level - 1) * (conv(ch, ch, 3) + bn(ch));
            }
        }
        total + conv(c.channels(0), 2, 1)
    }

    #[test]
    fn parameter_counts() {
        for c in [
            VNetConfig::tiny(),
            VNetConfig::full(),
            VNetConfig {
                convs_per_level: 3,
                levels: 4,
                ..VNetConfig::tiny()
            },
        ] {
            let mut net = VNet::<f32>::new(c, 0).unwrap();
            assert_eq!(net.param_count(), hand_count(&c));
        }
        assert_eq!(hand_count(&VNetConfig::full()), 7_172_994);
    }

    #[test]
    fn output_is_a_distribution_and_starts_uniform() {
        let mut m = VNetModel::<f64>::new(VNetConfig::tiny(), 3).unwrap();
        let x = Tensor::new(vec![1, 1, 8, 8, 4], (0..256).map(|i| ((i * 37) % 11) as f64 / 11.0).collect()).unwrap();
        let p = vnet_forward(&mut m, &x).unwrap();
        assert_eq!(p.shape, vec![1, 2, 8, 8, 4]);
        for i in 0..256 {
            assert!((p.data[i] + p.data[256 + i] - 1.0).abs() < 1e-12);
        }
        let y = super::super::layers::onehot2::<f64>(&(0..256).map(|i| i % 3 == 0).collect::<Vec<_>>(), [8, 8, 4]);
        assert!((m.loss(&x, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn indivisible_dims_rejected() {
        let mut m = VNetModel::<f32>::new(VNetConfig::tiny(), 0).unwrap();
        let x = Tensor::zeros(vec![1, 1, 6, 8, 8]);
        assert!(matches!(vnet_forward(&mut m, &x), Err(NnError::IndivisibleDims { .. })));
        assert!(VNetConfig {
            levels: 1,
            ..VNetConfig::tiny()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = VNet::<f32>::new(VNetConfig::tiny(), 5).unwrap();
        let b = VNet::<f32>::new(VNetConfig::tiny(), 5).unwrap();
        let c = VNet::<f32>::new(VNetConfig::tiny(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
