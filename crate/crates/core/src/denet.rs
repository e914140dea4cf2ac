//! Disparity estimation network: shared feature extractor, concatenation and
//! group-wise correlation volumes, attentive 3D aggregation, and the
//! softmax/expectation heads.

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{kernels, tensor, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{ChannelAttention, Conv, ConvBn, Ctx, Init, ResidualBlock};

/// Layer widths and depths. `full()` is the reference topology; `tiny()` keeps
/// the same topology at desk scale.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetScale {
    pub base_channels: usize,
    pub feature_channels: usize,
    pub compressed_channels: usize,
    pub n_groups: usize,
    pub s_max: usize,
    pub n_hourglass: usize,
    /// Residual blocks per extractor stage.
    pub block_counts: [usize; 4],
    /// Bottleneck reduction of the channel attention MLP.
    pub attention_reduction: usize,
}

impl NetScale {
    pub fn full() -> Self {
        Self {
            base_channels: 32,
            feature_channels: 320,
            compressed_channels: 12,
            n_groups: 40,
            s_max: 192,
            n_hourglass: 3,
            block_counts: [3, 16, 3, 3],
            attention_reduction: 4,
        }
    }

    pub fn tiny() -> Self {
        Self {
            base_channels: 4,
            feature_channels: 40,
            compressed_channels: 4,
            n_groups: 4,
            s_max: 32,
            n_hourglass: 1,
            block_counts: [1, 1, 1, 1],
            attention_reduction: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.base_channels,
            self.feature_channels,
            self.compressed_channels,
            self.n_groups,
            self.s_max,
            self.n_hourglass,
            self.attention_reduction,
        ];
        if counts.contains(&0) || self.block_counts.contains(&0) {
            return Err(Error::Config("all scale counts must be >= 1".into()));
        }
        if self.feature_channels != 10 * self.base_channels {
            return Err(Error::Config(format!(
                "feature_channels ({}) must be 10 x base_channels ({}) to match the extractor concat",
                self.feature_channels, self.base_channels
            )));
        }
        if self.feature_channels % self.n_groups != 0 {
            return Err(Error::Config(format!(
                "feature_channels {} not divisible by n_groups {}",
                self.feature_channels, self.n_groups
            )));
        }
        if self.s_max % 16 != 0 {
            return Err(Error::Config(format!("s_max {} must be divisible by 16", self.s_max)));
        }
        Ok(())
    }

    /// Disparity levels of the quarter-resolution volume.
    pub fn levels(&self) -> usize {
        self.s_max / 4
    }

    pub fn volume_channels(&self) -> usize {
        2 * self.compressed_channels + self.n_groups
    }
}

/// Per-image features at quarter resolution, `[C, H/4, W/4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(pub Array3<f64>);

/// Full-resolution cost volume stored level-major, `[S, H, W]`. Lower is a better match.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume(pub Array3<f64>);

/// Per-pixel categorical distribution over disparity levels, `[S, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityDistribution(pub Array3<f64>);

impl CostVolume {
    pub fn levels(&self) -> usize {
        self.0.shape()[0]
    }

    /// Cost at pixel `(x, y)` and level `s`.
    pub fn at(&self, x: usize, y: usize, s: usize) -> f64 {
        self.0[[s, y, x]]
    }
}

impl DisparityDistribution {
    pub fn levels(&self) -> usize {
        self.0.shape()[0]
    }

    /// Probability vector of pixel `(x, y)`.
    pub fn pixel(&self, x: usize, y: usize) -> Vec<f64> {
        self.0.index_axis(Axis(2), x).index_axis(Axis(1), y).to_vec()
    }
}

/// Network input: `[3, H, W]` images in [0, 1], standardized and stacked to `[N, 3, H, W]`.
pub fn stack_images(images: &[ArrayView3<f64>]) -> Tensor {
    let (h, w) = (images[0].shape()[1], images[0].shape()[2]);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        assert_eq!(img.shape(), &[3, h, w], "batch images must share a shape");
        data.extend(img.iter().map(|&v| (v - 0.5) / 0.25));
    }
    tensor(&[images.len(), 3, h, w], data)
}

/// Shift-and-concatenate volume `[2C, levels, h, w]` of two feature maps.
pub fn shift_concat_volume(left: &FeatureMap, right: &FeatureMap, levels: usize) -> Result<Array4<f64>> {
    let (c, h, w) = check_pair(left, right)?;
    let mut out = vec![0.0; 2 * c * levels * h * w];
    let (l, r) = (left.0.as_standard_layout(), right.0.as_standard_layout());
    kernels::shift_concat(l.as_slice().unwrap(), r.as_slice().unwrap(), c, h, w, levels, &mut out);
    Ok(Array4::from_shape_vec((2 * c, levels, h, w), out).unwrap())
}

/// Group-wise correlation volume `[n_groups, levels, h, w]`: each group's mean channel
/// product between `left(x)` and `right(x - s)`, zero out of frame.
pub fn build_gwc_volume(left: &FeatureMap, right: &FeatureMap, n_groups: usize, levels: usize) -> Result<Array4<f64>> {
    let (c, h, w) = check_pair(left, right)?;
    if n_groups == 0 || c % n_groups != 0 {
        return Err(Error::Config(format!("{c} feature channels not divisible into {n_groups} groups")));
    }
    let mut out = vec![0.0; n_groups * levels * h * w];
    let (l, r) = (left.0.as_standard_layout(), right.0.as_standard_layout());
    kernels::group_correlation(l.as_slice().unwrap(), r.as_slice().unwrap(), c, h, w, n_groups, levels, &mut out);
    Ok(Array4::from_shape_vec((n_groups, levels, h, w), out).unwrap())
}

fn check_pair(left: &FeatureMap, right: &FeatureMap) -> Result<(usize, usize, usize)> {
    if left.0.shape() != right.0.shape() {
        return Err(Error::Shape(format!("feature maps differ: {:?} vs {:?}", left.0.shape(), right.0.shape())));
    }
    let s = left.0.shape();
    Ok((s[0], s[1], s[2]))
}

/// `P = softmax(-C)` along the level axis, max-stabilized.
pub fn cost_to_distribution(cost: &CostVolume) -> DisparityDistribution {
    let shape = cost.0.shape().to_vec();
    let c = cost.0.as_standard_layout();
    let mut out = vec![0.0; c.len()];
    kernels::neg_softmax(c.as_slice().unwrap(), shape[0], shape[1] * shape[2], &mut out);
    DisparityDistribution(Array3::from_shape_vec((shape[0], shape[1], shape[2]), out).unwrap())
}

/// `D = sum_s s * P(s)`.
pub fn distribution_to_disparity(prob: &DisparityDistribution) -> Array2<f64> {
    let shape = prob.0.shape().to_vec();
    let p = prob.0.as_standard_layout();
    let mut out = vec![0.0; shape[1] * shape[2]];
    kernels::expectation(p.as_slice().unwrap(), shape[0], shape[1] * shape[2], &mut out);
    Array2::from_shape_vec((shape[1], shape[2]), out).unwrap()
}

/// ResNet-style extractor returning the concatenation of its last three stages.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    stem: Vec<ConvBn>,
    stages: [Vec<ResidualBlock>; 4],
}

impl FeatureExtractor {
    fn new(init: &mut Init, prefix: &str, scale: &NetScale) -> Self {
        let b = scale.base_channels;
        let stem = vec![
            ConvBn::planar(init, &format!("{prefix}.stem.0"), 3, b, 3, 2, true),
            ConvBn::planar(init, &format!("{prefix}.stem.1"), b, b, 3, 1, true),
            ConvBn::planar(init, &format!("{prefix}.stem.2"), b, b, 3, 1, true),
        ];
        let widths = [b, 2 * b, 4 * b, 4 * b];
        let strides = [1, 2, 1, 1];
        let mut cin = b;
        let stages = std::array::from_fn(|i| {
            let blocks = (0..scale.block_counts[i])
                .map(|j| {
                    let stride = if j == 0 { strides[i] } else { 1 };
                    let block = ResidualBlock::planar(init, &format!("{prefix}.stage{i}.{j}"), cin, widths[i], stride);
                    cin = widths[i];
                    block
                })
                .collect();
            blocks
        });
        Self { stem, stages }
    }

    fn forward(&self, ctx: &mut Ctx, image: Var) -> Var {
        let mut x = image;
        for layer in &self.stem {
            x = layer.forward(ctx, x);
        }
        let mut taps = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = block.forward(ctx, x);
            }
            if i >= 1 {
                taps.push(x);
            }
        }
        ctx.graph.concat(&taps)
    }
}

/// One encoder-decoder pass over the volume with channel attention at the bottleneck.
#[derive(Clone, Debug)]
pub struct AttentionUNet {
    down1: ConvBn,
    down1b: ConvBn,
    down2: ConvBn,
    down2b: ConvBn,
    attention: ChannelAttention,
    up1: ConvBn,
    up2: ConvBn,
    out: ConvBn,
}

impl AttentionUNet {
    fn new(init: &mut Init, prefix: &str, b: usize, reduction: usize) -> Self {
        Self {
            down1: ConvBn::volumetric(init, &format!("{prefix}.down1"), b, 2 * b, 2, true),
            down1b: ConvBn::volumetric(init, &format!("{prefix}.down1b"), 2 * b, 2 * b, 1, true),
            down2: ConvBn::volumetric(init, &format!("{prefix}.down2"), 2 * b, 4 * b, 2, true),
            down2b: ConvBn::volumetric(init, &format!("{prefix}.down2b"), 4 * b, 4 * b, 1, true),
            attention: ChannelAttention::new(init, &format!("{prefix}.attention"), 4 * b, reduction),
            up1: ConvBn::upsampling(init, &format!("{prefix}.up1"), 4 * b, 2 * b, false),
            up2: ConvBn::upsampling(init, &format!("{prefix}.up2"), 2 * b, b, false),
            out: ConvBn::volumetric(init, &format!("{prefix}.out"), b, b, 1, true),
        }
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let d1 = self.down1.forward(ctx, x);
        let y = self.down1b.forward(ctx, d1);
        let d2 = self.down2.forward(ctx, y);
        let d2 = self.down2b.forward(ctx, d2);
        let d2 = self.attention.forward(ctx, d2);
        let u1 = self.up1.forward(ctx, d2);
        let u1 = ctx.graph.add(u1, y);
        let u1 = ctx.graph.relu(u1);
        let u2 = self.up2.forward(ctx, u1);
        let u2 = ctx.graph.add(u2, x);
        let u2 = ctx.graph.relu(u2);
        self.out.forward(ctx, u2)
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DenetOutput {
    /// `[N, S, H, W]` cost volume.
    pub cost: Var,
    /// `[N, S, H, W]` disparity distribution.
    pub prob: Var,
    /// `[N, H, W]` expected disparity.
    pub disparity: Var,
}

#[derive(Clone, Debug)]
pub struct Denet {
    scale: NetScale,
    features: FeatureExtractor,
    compress_a: ConvBn,
    compress_b: Conv,
    entry: [ConvBn; 2],
    residual: ResidualBlock,
    hourglasses: Vec<AttentionUNet>,
    classifier: Conv,
}

impl Denet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, scale: &NetScale) -> Result<Self> {
        scale.validate()?;
        let init = &mut Init { store, rng };
        let b = scale.base_channels;
        let f = scale.feature_channels;
        Ok(Self {
            scale: scale.clone(),
            features: FeatureExtractor::new(init, &format!("{prefix}.features"), scale),
            compress_a: ConvBn::planar(init, &format!("{prefix}.compress.0"), f, 4 * b, 3, 1, true),
            compress_b: Conv::planar(init, &format!("{prefix}.compress.1"), 4 * b, scale.compressed_channels, 1, 1, false),
            entry: [
                ConvBn::volumetric(init, &format!("{prefix}.entry.0"), scale.volume_channels(), b, 1, true),
                ConvBn::volumetric(init, &format!("{prefix}.entry.1"), b, b, 1, true),
            ],
            residual: ResidualBlock::volumetric(init, &format!("{prefix}.residual"), b),
            hourglasses: (0..scale.n_hourglass)
                .map(|i| AttentionUNet::new(init, &format!("{prefix}.unet{i}"), b, scale.attention_reduction))
                .collect(),
            classifier: Conv::volumetric(init, &format!("{prefix}.classifier"), b, 1, 3, 1, false),
        })
    }

    pub fn scale(&self) -> &NetScale {
        &self.scale
    }

    /// Re-draws the final two layers (last U-Net output conv and the classifier).
    pub fn reinit_head(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let last = self.hourglasses.last().expect("at least one hourglass");
        last.out.reinit(store, rng);
        self.classifier.reinit(store, rng);
    }

    /// Parameter ids of the final two layers.
    pub fn head_param_ids(&self) -> Vec<crate::autograd::ParamId> {
        let mut ids = self.hourglasses.last().expect("at least one hourglass").out.param_ids();
        ids.extend(self.classifier.param_ids());
        ids
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!("expected [N, 3, H, W] images, got {shape:?}")));
        }
        if shape[2] % 16 != 0 || shape[3] % 16 != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::Shape(format!("image size {}x{} must be a positive multiple of 16", shape[2], shape[3])));
        }
        Ok(())
    }

    /// `[N, 3, H, W] -> [N, F, H/4, W/4]`.
    pub fn features(&self, ctx: &mut Ctx, image: Var) -> Var {
        self.features.forward(ctx, image)
    }

    /// Channel compression shared by both views followed by shift-and-concatenate.
    pub fn concat_volume(&self, ctx: &mut Ctx, left: Var, right: Var) -> Var {
        let compress = |ctx: &mut Ctx, x: Var| {
            let y = self.compress_a.forward(ctx, x);
            self.compress_b.forward(ctx, y)
        };
        let cl = compress(ctx, left);
        let cr = compress(ctx, right);
        ctx.graph.shift_concat(cl, cr, self.scale.levels())
    }

    pub fn gwc_volume(&self, ctx: &mut Ctx, left: Var, right: Var) -> Var {
        ctx.graph.group_corr(left, right, self.scale.n_groups, self.scale.levels())
    }

    /// `[N, 2c + g, S/4, H/4, W/4]` feature volume to the `[N, S, H, W]` cost volume.
    pub fn aggregate(&self, ctx: &mut Ctx, volume: Var) -> Var {
        let mut x = self.entry[0].forward(ctx, volume);
        x = self.entry[1].forward(ctx, x);
        x = self.residual.forward(ctx, x);
        for unet in &self.hourglasses {
            x = unet.forward(ctx, x);
        }
        let cost = self.classifier.forward(ctx, x);
        let s = ctx.graph.shape(cost).to_vec();
        let (n, d, h, w) = (s[0], s[2], s[3], s[4]);
        let up = ctx.graph.resize_axis(cost, 2, 4 * d);
        let up = ctx.graph.resize_axis(up, 3, 4 * h);
        let up = ctx.graph.resize_axis(up, 4, 4 * w);
        ctx.graph.reshape(up, &[n, 4 * d, 4 * h, 4 * w])
    }

    pub fn forward(&self, ctx: &mut Ctx, left: Var, right: Var) -> Result<DenetOutput> {
        let shape = ctx.graph.shape(left).to_vec();
        self.check_input(&shape)?;
        if ctx.graph.shape(right) != shape.as_slice() {
            return Err(Error::Shape("left and right images differ in shape".into()));
        }
        let fl = self.features(ctx, left);
        let fr = self.features(ctx, right);
        let concat = self.concat_volume(ctx, fl, fr);
        let group = self.gwc_volume(ctx, fl, fr);
        let volume = ctx.graph.concat(&[concat, group]);
        let cost = self.aggregate(ctx, volume);
        let prob = ctx.graph.neg_softmax(cost);
        let disparity = ctx.graph.expectation(prob);
        Ok(DenetOutput { cost, prob, disparity })
    }

    /// Quarter-resolution features of one `[3, H, W]` image (inference mode).
    pub fn extract_features(&self, store: &ParamStore, image: ArrayView3<f64>) -> Result<FeatureMap> {
        let input = stack_images(&[image]);
        self.check_input(input.shape())?;
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, store, false);
        let x = ctx.graph.constant(input);
        let f = self.features(&mut ctx, x);
        Ok(FeatureMap(first_item3(g.value(f))))
    }

    /// Compressed shift-and-concatenate volume `[2c, S/4, H/4, W/4]` (inference mode).
    pub fn build_concat_volume(&self, store: &ParamStore, left: &FeatureMap, right: &FeatureMap) -> Result<Array4<f64>> {
        check_pair(left, right)?;
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, store, false);
        let l = ctx.graph.constant(left.0.clone().insert_axis(Axis(0)).into_dyn());
        let r = ctx.graph.constant(right.0.clone().insert_axis(Axis(0)).into_dyn());
        let v = self.concat_volume(&mut ctx, l, r);
        Ok(first_item4(g.value(v)))
    }

    /// Aggregates a `[C', S/4, H/4, W/4]` feature volume into a cost volume (inference mode).
    pub fn aggregate_cost(&self, store: &ParamStore, volume: &Array4<f64>) -> Result<CostVolume> {
        if volume.shape()[0] != self.scale.volume_channels() || volume.shape()[1] != self.scale.levels() {
            return Err(Error::Shape(format!("unexpected feature volume shape {:?}", volume.shape())));
        }
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, store, false);
        let v = ctx.graph.constant(volume.clone().insert_axis(Axis(0)).into_dyn());
        let c = self.aggregate(&mut ctx, v);
        Ok(CostVolume(first_item3(g.value(c))))
    }

    /// Full forward pass on one rectified pair: `(P, D, C)`.
    pub fn infer(
        &self,
        store: &ParamStore,
        left: ArrayView3<f64>,
        right: ArrayView3<f64>,
    ) -> Result<(DisparityDistribution, Array2<f64>, CostVolume)> {
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, store, false);
        let l = ctx.graph.constant(stack_images(&[left]));
        let r = ctx.graph.constant(stack_images(&[right]));
        let out = self.forward(&mut ctx, l, r)?;
        let prob = DisparityDistribution(first_item3(g.value(out.prob)));
        let disp = g.value(out.disparity).index_axis(Axis(0), 0).to_owned().into_dimensionality().unwrap();
        let cost = CostVolume(first_item3(g.value(out.cost)));
        Ok((prob, disp, cost))
    }
}

pub(crate) fn first_item3(t: &Tensor) -> Array3<f64> {
    t.index_axis(Axis(0), 0).to_owned().into_dimensionality().expect("rank-4 batch tensor")
}

fn first_item4(t: &Tensor) -> Array4<f64> {
    t.index_axis(Axis(0), 0).to_owned().into_dimensionality().expect("rank-5 batch tensor")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_features(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        FeatureMap(Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0)))
    }

    /// Triple loop straight from the definition.
    fn concat_oracle(l: &FeatureMap, r: &FeatureMap, levels: usize) -> Array4<f64> {
        let (c, h, w) = (l.0.shape()[0], l.0.shape()[1], l.0.shape()[2]);
        let mut out = Array4::zeros((2 * c, levels, h, w));
        for s in 0..levels {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        out[[ch, s, y, x]] = l.0[[ch, y, x]];
                        if x >= s {
                            out[[c + ch, s, y, x]] = r.0[[ch, y, x - s]];
                        }
                    }
                }
            }
        }
        out
    }

    fn gwc_oracle(l: &FeatureMap, r: &FeatureMap, groups: usize, levels: usize) -> Array4<f64> {
        let (c, h, w) = (l.0.shape()[0], l.0.shape()[1], l.0.shape()[2]);
        let per = c / groups;
        let mut out = Array4::zeros((groups, levels, h, w));
        for g in 0..groups {
            for s in 0..levels {
                for y in 0..h {
                    for x in s..w {
                        let mut dot = 0.0;
                        for ch in g * per..(g + 1) * per {
                            dot += l.0[[ch, y, x]] * r.0[[ch, y, x - s]];
                        }
                        out[[g, s, y, x]] = groups as f64 / c as f64 * dot;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn concat_volume_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = random_features(3, 8, 8, &mut rng);
        let r = random_features(3, 8, 8, &mut rng);
        let v = shift_concat_volume(&l, &r, 8).unwrap();
        let o = concat_oracle(&l, &r, 8);
        assert!((&v - &o).iter().all(|d| d.abs() < 1e-12));
        // zero shift is the unshifted concatenation
        for ch in 0..3 {
            assert_eq!(v.index_axis(Axis(0), ch).index_axis(Axis(0), 0), l.0.index_axis(Axis(0), ch));
            assert_eq!(v.index_axis(Axis(0), 3 + ch).index_axis(Axis(0), 0), r.0.index_axis(Axis(0), ch));
        }
        // out-of-frame columns of the right half are zero
        for s in 1..8 {
            for x in 0..s {
                for ch in 3..6 {
                    assert!(v.slice(ndarray::s![ch, s, .., x]).iter().all(|&z| z == 0.0));
                }
            }
        }
    }

    #[test]
    fn gwc_volume_matches_loop_oracle_and_unit_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = random_features(8, 8, 8, &mut rng);
        let r = random_features(8, 8, 8, &mut rng);
        let v = build_gwc_volume(&l, &r, 4, 8).unwrap();
        let o = gwc_oracle(&l, &r, 4, 8);
        assert!((&v - &o).iter().all(|d| d.abs() < 1e-5));

        let ones = FeatureMap(Array3::ones((320, 2, 6)));
        let v = build_gwc_volume(&ones, &ones, 40, 4).unwrap();
        for s in 0..4 {
            for x in s..6 {
                assert!((v[[0, s, 0, x]] - 1.0).abs() < 1e-12);
                assert!((v[[39, s, 1, x]] - 1.0).abs() < 1e-12);
            }
        }
        let zeros = FeatureMap(Array3::zeros((320, 2, 6)));
        assert!(build_gwc_volume(&ones, &zeros, 40, 4).unwrap().iter().all(|&z| z == 0.0));
        assert!(matches!(build_gwc_volume(&ones, &ones, 7, 4), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_examples() {
        let c = CostVolume(Array3::from_elem((4, 1, 1), 2.5));
        let p = cost_to_distribution(&c);
        assert!(p.0.iter().all(|&v| (v - 0.25).abs() < 1e-12));

        let mut c = Array3::zeros((4, 1, 1));
        c[[2, 0, 0]] = -1e9;
        let p = cost_to_distribution(&CostVolume(c));
        assert!((p.0[[2, 0, 0]] - 1.0).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = Array3::from_shape_fn((6, 3, 4), |_| rng.random_range(-5.0..5.0));
        let p = cost_to_distribution(&CostVolume(c.clone()));
        for y in 0..3 {
            for x in 0..4 {
                let z: f64 = (0..6).map(|s| (-c[[s, y, x]]).exp()).sum();
                for s in 0..6 {
                    assert!((p.0[[s, y, x]] - (-c[[s, y, x]]).exp() / z).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn expectation_examples() {
        let mut one_hot = Array3::zeros((8, 1, 1));
        one_hot[[5, 0, 0]] = 1.0;
        assert_eq!(distribution_to_disparity(&DisparityDistribution(one_hot))[[0, 0]], 5.0);
        let uniform = Array3::from_elem((4, 1, 1), 0.25);
        assert_eq!(distribution_to_disparity(&DisparityDistribution(uniform))[[0, 0]], 1.5);
        let bimodal = Array3::from_shape_vec((4, 1, 1), vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        assert_eq!(distribution_to_disparity(&DisparityDistribution(bimodal))[[0, 0]], 1.5);
    }

    #[test]
    fn tiny_forward_shapes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scale = NetScale::tiny();
        let net = Denet::new(&mut store, &mut rng, "a", &scale).unwrap();
        let left = Array3::from_shape_fn((3, 32, 64), |_| rng.random_range(0.0..1.0));
        let right = Array3::from_shape_fn((3, 32, 64), |_| rng.random_range(0.0..1.0));
        let f = net.extract_features(&store, left.view()).unwrap();
        assert_eq!(f.0.shape(), &[40, 8, 16]);
        let fr = net.extract_features(&store, right.view()).unwrap();
        let concat = net.build_concat_volume(&store, &f, &fr).unwrap();
        assert_eq!(concat.shape(), &[8, 8, 8, 16]);
        let gwc = build_gwc_volume(&f, &fr, 4, 8).unwrap();
        let volume = ndarray::concatenate(Axis(0), &[concat.view(), gwc.view()]).unwrap();
        let cost = net.aggregate_cost(&store, &volume).unwrap();
        assert_eq!(cost.0.shape(), &[32, 32, 64]);

        let (p, d, c) = net.infer(&store, left.view(), right.view()).unwrap();
        assert_eq!(c, cost);
        assert_eq!(p, cost_to_distribution(&c));
        assert_eq!(d, distribution_to_disparity(&p));
        assert!(p.0.sum_axis(Axis(0)).iter().all(|&z| (z - 1.0).abs() < 1e-9));
        assert!(d.iter().all(|&v| (0.0..=31.0).contains(&v)));

        let odd = Array3::zeros((3, 24, 64));
        assert!(matches!(net.infer(&store, odd.view(), odd.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn scale_validation() {
        assert!(NetScale::full().validate().is_ok());
        assert!(NetScale::tiny().validate().is_ok());
        let mut bad = NetScale::tiny();
        bad.n_groups = 3;
        assert!(bad.validate().is_err());
        let mut bad = NetScale::tiny();
        bad.s_max = 36;
        assert!(bad.validate().is_err());
        let mut bad = NetScale::tiny();
        bad.n_hourglass = 0;
        assert!(bad.validate().is_err());
    }
}
