//! Layer building blocks on top of [`crate::autograd`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{tensor, ConvGeom, Graph, ParamId, ParamKind, ParamStore, Tensor, Var};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Forward-pass context: the tape, the weights and the batch-norm mode.
pub struct Ctx<'a> {
    pub graph: &'a mut Graph,
    pub store: &'a ParamStore,
    /// Batch statistics (and running-stat updates) when true, running statistics otherwise.
    pub train: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(graph: &'a mut Graph, store: &'a ParamStore, train: bool) -> Self {
        Self { graph, store, train }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }
}

/// Registration context used while building a network.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

fn kaiming(shape: &[usize], fan: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan as f64).sqrt()).expect("valid std");
    let n = shape.iter().product();
    tensor(shape, (0..n).map(|_| normal.sample(rng)).collect())
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    tensor(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ConvKind {
    Planar,
    Volumetric,
    Transposed,
}

/// 2D, 3D or transposed 3D convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    weight: ParamId,
    bias: Option<ParamId>,
    geom: ConvGeom,
    kind: ConvKind,
    out_channels: usize,
}

impl Conv {
    fn build(init: &mut Init, name: &str, shape: [usize; 5], fan: usize, bias: bool, geom: ConvGeom, kind: ConvKind) -> Self {
        let weight = init.store.add(format!("{name}.weight"), kaiming(&shape, fan, init.rng), ParamKind::Weight);
        let out_channels = if kind == ConvKind::Transposed { shape[1] } else { shape[0] };
        let bias = bias.then(|| {
            init.store.add(format!("{name}.bias"), Tensor::zeros(vec![out_channels]), ParamKind::Weight)
        });
        Self { weight, bias, geom, kind, out_channels }
    }

    pub fn planar(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Self {
        let geom = ConvGeom::planar(k, stride, k / 2);
        Self::build(init, name, [cout, cin, 1, k, k], k * k * cout, bias, geom, ConvKind::Planar)
    }

    pub fn volumetric(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Self {
        let geom = ConvGeom::cube(k, stride, k / 2);
        Self::build(init, name, [cout, cin, k, k, k], k * k * k * cout, bias, geom, ConvKind::Volumetric)
    }

    /// Stride-2 transposed 3D convolution doubling every spatial extent.
    pub fn upsampling(init: &mut Init, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        let geom = ConvGeom::cube(3, 2, 1);
        Self::build(init, name, [cin, cout, 3, 3, 3], 27 * cout, bias, geom, ConvKind::Transposed)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    /// Draws fresh weights with the construction-time distribution.
    pub fn reinit(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let shape = store.get(self.weight).shape().to_vec();
        let fan = match self.kind {
            ConvKind::Transposed => shape[1] * shape[2..].iter().product::<usize>(),
            _ => shape[0] * shape[2..].iter().product::<usize>(),
        };
        store.set(self.weight, kaiming(&shape, fan, rng));
        if let Some(b) = self.bias {
            let n = store.get(b).len();
            store.set(b, Tensor::zeros(vec![n]));
        }
    }

    /// Planar convs take and return `[N, C, H, W]`; volumetric ones `[N, C, D, H, W]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        match self.kind {
            ConvKind::Volumetric => ctx.graph.conv(x, w, b, self.geom),
            ConvKind::Transposed => ctx.graph.conv_transpose(x, w, b, self.geom, [1, 1, 1]),
            ConvKind::Planar => {
                let s = ctx.graph.shape(x).to_vec();
                let x5 = ctx.graph.reshape(x, &[s[0], s[1], 1, s[2], s[3]]);
                let y = ctx.graph.conv(x5, w, b, self.geom);
                let ys = ctx.graph.shape(y).to_vec();
                ctx.graph.reshape(y, &[ys[0], ys[1], ys[3], ys[4]])
            }
        }
    }
}

/// Batch normalization with running statistics kept as store buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        let store = &mut *init.store;
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![channels]), ParamKind::Weight),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]), ParamKind::Weight),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(vec![channels]), ParamKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(vec![channels]), ParamKind::Buffer),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta, self.running_mean, self.running_var]
    }

    pub fn reinit(&self, store: &mut ParamStore) {
        let c = store.get(self.gamma).len();
        store.set(self.gamma, Tensor::ones(vec![c]));
        store.set(self.beta, Tensor::zeros(vec![c]));
        store.set(self.running_mean, Tensor::zeros(vec![c]));
        store.set(self.running_var, Tensor::ones(vec![c]));
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        if !ctx.train {
            let mean = ctx.store.get(self.running_mean);
            let var = ctx.store.get(self.running_var);
            let stats = (mean.as_slice().expect("contiguous"), var.as_slice().expect("contiguous"));
            return ctx.graph.batch_norm(x, gamma, beta, Some(stats), BN_EPS).0;
        }
        let shape = ctx.graph.shape(x).to_vec();
        let count = shape[0] * shape[2..].iter().product::<usize>();
        let (y, stats) = ctx.graph.batch_norm(x, gamma, beta, None, BN_EPS);
        let (mean, var) = stats.expect("batch statistics");
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        let old_mean = ctx.store.get(self.running_mean);
        let old_var = ctx.store.get(self.running_var);
        let new_mean: Vec<f64> =
            old_mean.iter().zip(&mean).map(|(o, m)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * m).collect();
        let new_var: Vec<f64> =
            old_var.iter().zip(&var).map(|(o, v)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * v * unbias).collect();
        let c = new_mean.len();
        ctx.graph.record_buffer_update(self.running_mean, tensor(&[c], new_mean));
        ctx.graph.record_buffer_update(self.running_var, tensor(&[c], new_var));
        y
    }
}

/// Convolution followed by batch normalization and an optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
    relu: bool,
}

impl ConvBn {
    pub fn planar(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, stride: usize, relu: bool) -> Self {
        let conv = Conv::planar(init, &format!("{name}.conv"), cin, cout, k, stride, false);
        let bn = BatchNorm::new(init, &format!("{name}.bn"), cout);
        Self { conv, bn, relu }
    }

    pub fn volumetric(init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize, relu: bool) -> Self {
        let conv = Conv::volumetric(init, &format!("{name}.conv"), cin, cout, 3, stride, false);
        let bn = BatchNorm::new(init, &format!("{name}.bn"), cout);
        Self { conv, bn, relu }
    }

    pub fn upsampling(init: &mut Init, name: &str, cin: usize, cout: usize, relu: bool) -> Self {
        let conv = Conv::upsampling(init, &format!("{name}.conv"), cin, cout, false);
        let bn = BatchNorm::new(init, &format!("{name}.bn"), cout);
        Self { conv, bn, relu }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.conv.param_ids();
        ids.extend(self.bn.param_ids());
        ids
    }

    pub fn reinit(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.conv.reinit(store, rng);
        self.bn.reinit(store);
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let y = self.conv.forward(ctx, x);
        let y = self.bn.forward(ctx, y);
        if self.relu {
            ctx.graph.relu(y)
        } else {
            y
        }
    }
}

/// Fully connected layer over `[N, C]`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        let bound = 1.0 / (cin as f64).sqrt();
        let weight = init.store.add(format!("{name}.weight"), uniform(&[cout, cin], bound, init.rng), ParamKind::Weight);
        let bias = init.store.add(format!("{name}.bias"), uniform(&[cout], bound, init.rng), ParamKind::Weight);
        Self { weight, bias }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.graph.linear(x, w, b)
    }
}

/// Squeeze-and-excitation gate: global pooling, bottleneck MLP, sigmoid channel scaling.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    squeeze: Linear,
    excite: Linear,
}

impl ChannelAttention {
    pub fn new(init: &mut Init, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        Self {
            squeeze: Linear::new(init, &format!("{name}.squeeze"), channels, hidden),
            excite: Linear::new(init, &format!("{name}.excite"), hidden, channels),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let pooled = ctx.graph.global_avg_pool(x);
        let h = self.squeeze.forward(ctx, pooled);
        let h = ctx.graph.relu(h);
        let s = self.excite.forward(ctx, h);
        let gate = ctx.graph.sigmoid(s);
        ctx.graph.scale_channels(x, gate)
    }
}

/// Two-convolution residual block; `planar` selects 2D or 3D convolutions.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    first: ConvBn,
    second: ConvBn,
    shortcut: Option<ConvBn>,
}

impl ResidualBlock {
    pub fn planar(init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let first = ConvBn::planar(init, &format!("{name}.conv1"), cin, cout, 3, stride, true);
        let second = ConvBn::planar(init, &format!("{name}.conv2"), cout, cout, 3, 1, false);
        let shortcut = (stride != 1 || cin != cout)
            .then(|| ConvBn::planar(init, &format!("{name}.shortcut"), cin, cout, 1, stride, false));
        Self { first, second, shortcut }
    }

    pub fn volumetric(init: &mut Init, name: &str, channels: usize) -> Self {
        let first = ConvBn::volumetric(init, &format!("{name}.conv1"), channels, channels, 1, true);
        let second = ConvBn::volumetric(init, &format!("{name}.conv2"), channels, channels, 1, false);
        Self { first, second, shortcut: None }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let y = self.first.forward(ctx, x);
        let y = self.second.forward(ctx, y);
        let skip = match &self.shortcut {
            Some(s) => s.forward(ctx, x),
            None => x,
        };
        ctx.graph.add(y, skip)
    }
}
