//! Losses for both training regimes, with analytic gradients.
//!
//! Every loss is averaged over the masked pixels only. An empty mask gives a
//! zero loss with `count == 0`; callers surface that as a warning.
//!
//! Maps have shape `[..., H, W]` and distributions the same shape with the
//! level axis inserted before `H`, e.g. `[S, H, W]` or `[N, S, H, W]`.

use ndarray::{ArrayD, ArrayView, Dimension, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LOG_FLOOR: f64 = 1e-12;
const NORM_TOL: f64 = 1e-6;
/// Pixels whose error is below this many pixels count as confident.
pub const CONFIDENCE_THRESHOLD: f64 = 3.0;

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Smoothness coefficient `1 / (2 - K)`, from 0.5 at `K = 0` to 1 at `K = 1`.
pub fn rho(k: f64) -> f64 {
    1.0 / (2.0 - k)
}

/// Writes the unimodal distribution centred on `dhat` with sharpness `rho` into `out`.
fn unimodal_into(dhat: f64, rho: f64, out: &mut [f64]) {
    let nearest = (0..out.len()).map(|s| (s as f64 - dhat).abs()).fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    for (s, o) in out.iter_mut().enumerate() {
        *o = (-((s as f64 - dhat).abs() - nearest) * rho).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Which cross-branch teaching directions are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Directions {
    pub a_to_b: bool,
    pub b_to_a: bool,
}

impl Directions {
    pub const BOTH: Self = Self { a_to_b: true, b_to_a: true };
    pub const A_TO_B: Self = Self { a_to_b: true, b_to_a: false };
    pub const B_TO_A: Self = Self { a_to_b: false, b_to_a: true };
}

/// Confidence map that sets the target sharpness in cross-distribution supervision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoSource {
    /// The receiving branch's confidence.
    #[default]
    Student,
    /// The teaching branch's confidence.
    Teacher,
}

/// Loss value plus gradients with respect to the listed inputs.
#[derive(Clone, Debug)]
pub struct Loss<const N: usize> {
    pub value: f64,
    /// Masked pixels that contributed.
    pub count: usize,
    pub grads: [ArrayD<f64>; N],
}

impl<const N: usize> Loss<N> {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    levels: usize,
    plane: usize,
}

impl Layout {
    /// Flat offset of level `s` of pixel `i` (pixels enumerated in map order).
    fn at(&self, i: usize, s: usize) -> usize {
        ((i / self.plane) * self.levels + s) * self.plane + i % self.plane
    }
}

fn map_plane(shape: &[usize]) -> Result<usize> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!("maps need at least two axes, got {shape:?}")));
    }
    Ok(shape[shape.len() - 2] * shape[shape.len() - 1])
}

fn check_same(what: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn dist_layout(map: &[usize], dist: &[usize]) -> Result<Layout> {
    let plane = map_plane(map)?;
    let r = map.len();
    if dist.len() != r + 1 || dist[..r - 2] != map[..r - 2] || dist[r - 1..] != map[r - 2..] {
        return Err(Error::Shape(format!("distribution {dist:?} does not match map {map:?}")));
    }
    Ok(Layout { levels: dist[r - 2], plane })
}

fn owned<D: Dimension>(a: ArrayView<f64, D>) -> (Vec<usize>, Vec<f64>) {
    (a.shape().to_vec(), a.iter().copied().collect())
}

fn mask_vec<D: Dimension>(m: ArrayView<bool, D>) -> Vec<bool> {
    m.iter().copied().collect()
}

fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

fn from_vec(shape: &[usize], v: Vec<f64>) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(shape), v).expect("shape matches data")
}

fn check_normalized(p: &[f64], lay: Layout, mask: &[bool]) -> Result<()> {
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let sum: f64 = (0..lay.levels).map(|s| p[lay.at(i, s)]).sum();
        if (sum - 1.0).abs() > NORM_TOL || !sum.is_finite() {
            return Err(Error::NonFinite(format!("distribution at pixel {i} sums to {sum}")));
        }
    }
    Ok(())
}

/// Per-pixel unimodal distributions `[..., S, H, W]` around `dhat` whose width grows as `k` drops.
pub fn unimodal_generate<D: Dimension>(
    dhat: ArrayView<f64, D>,
    k: ArrayView<f64, D>,
    levels: usize,
) -> Result<ArrayD<f64>> {
    check_same("unimodal inputs", dhat.shape(), k.shape())?;
    let plane = map_plane(dhat.shape())?;
    let upper = levels as f64 - 1.0;
    if let Some(d) = dhat.iter().find(|d| !(0.0..=upper).contains(*d)) {
        return Err(Error::Data(format!("disparity {d} outside [0, {upper}]")));
    }
    if let Some(c) = k.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::Data(format!("confidence {c} outside [0, 1]")));
    }
    let lay = Layout { levels, plane };
    let mut shape = dhat.shape().to_vec();
    shape.insert(shape.len() - 2, levels);
    let mut out = vec![0.0; dhat.len() * levels];
    let mut buf = vec![0.0; levels];
    for (i, (&d, &c)) in dhat.iter().zip(k.iter()).enumerate() {
        unimodal_into(d, rho(c), &mut buf);
        for (s, &v) in buf.iter().enumerate() {
            out[lay.at(i, s)] = v;
        }
    }
    Ok(from_vec(&shape, out))
}

/// Confidence-weighted cross-branch smooth-L1 on disparities. Gradients: `[dD_a, dD_b]`.
///
/// The `a_to_b` term weights by `K_a` and only moves `D_b`; `b_to_a` mirrors it.
pub fn aps_loss<D: Dimension>(
    d_a: ArrayView<f64, D>,
    k_a: ArrayView<f64, D>,
    d_b: ArrayView<f64, D>,
    k_b: ArrayView<f64, D>,
    mask: ArrayView<bool, D>,
    dirs: Directions,
) -> Result<Loss<2>> {
    let shape = d_a.shape().to_vec();
    for s in [k_a.shape(), d_b.shape(), k_b.shape(), mask.shape()] {
        check_same("aps inputs", &shape, s)?;
    }
    let (da, ka, db, kb, m) = (owned(d_a).1, owned(k_a).1, owned(d_b).1, owned(k_b).1, mask_vec(mask));
    let count = m.iter().filter(|&&b| b).count();
    let (mut ga, mut gb) = (vec![0.0; da.len()], vec![0.0; da.len()]);
    let mut total = 0.0;
    if count > 0 {
        let inv = 1.0 / count as f64;
        for i in (0..da.len()).filter(|&i| m[i]) {
            if dirs.a_to_b {
                total += ka[i] * smooth_l1(db[i] - da[i]);
                gb[i] = ka[i] * smooth_l1_grad(db[i] - da[i]) * inv;
            }
            if dirs.b_to_a {
                total += kb[i] * smooth_l1(da[i] - db[i]);
                ga[i] = kb[i] * smooth_l1_grad(da[i] - db[i]) * inv;
            }
        }
        total *= inv;
    }
    Ok(Loss { value: total, count, grads: [from_vec(&shape, ga), from_vec(&shape, gb)] })
}

/// Cross-entropy of `p` against targets, accumulating `-t / p` into `grad` with weight `inv`.
fn cross_entropy(t: &[f64], p: &[f64], idx: impl Fn(usize) -> usize, grad: &mut [f64], inv: f64) -> f64 {
    let mut ce = 0.0;
    for (s, &ts) in t.iter().enumerate() {
        let ps = p[idx(s)];
        ce -= ts * ps.max(LOG_FLOOR).ln();
        if ps > LOG_FLOOR {
            grad[idx(s)] -= ts / ps * inv;
        }
    }
    ce
}

/// Cross-branch distribution supervision. Gradients: `[dP_a, dP_b]`.
///
/// Branch B is pulled towards `UG(D_a, K)` and branch A towards `UG(D_b, K)`, where
/// `K` is chosen by `rho_source`. Targets are constants.
#[allow(clippy::too_many_arguments)]
pub fn acs_loss<D: Dimension, E: Dimension>(
    p_a: ArrayView<f64, E>,
    d_a: ArrayView<f64, D>,
    k_a: ArrayView<f64, D>,
    p_b: ArrayView<f64, E>,
    d_b: ArrayView<f64, D>,
    k_b: ArrayView<f64, D>,
    mask: ArrayView<bool, D>,
    dirs: Directions,
    rho_source: RhoSource,
) -> Result<Loss<2>> {
    let shape = d_a.shape().to_vec();
    for s in [k_a.shape(), d_b.shape(), k_b.shape(), mask.shape()] {
        check_same("acs inputs", &shape, s)?;
    }
    check_same("acs distributions", p_a.shape(), p_b.shape())?;
    let lay = dist_layout(&shape, p_a.shape())?;
    let pshape = p_a.shape().to_vec();
    let (pa, pb) = (owned(p_a).1, owned(p_b).1);
    let (da, ka, db, kb, m) = (owned(d_a).1, owned(k_a).1, owned(d_b).1, owned(k_b).1, mask_vec(mask));
    check_normalized(&pa, lay, &m)?;
    check_normalized(&pb, lay, &m)?;
    let count = m.iter().filter(|&&b| b).count();
    let (mut ga, mut gb) = (vec![0.0; pa.len()], vec![0.0; pa.len()]);
    let mut total = 0.0;
    if count > 0 {
        let inv = 1.0 / count as f64;
        let mut target = vec![0.0; lay.levels];
        for i in (0..da.len()).filter(|&i| m[i]) {
            if dirs.a_to_b {
                let k = if rho_source == RhoSource::Student { kb[i] } else { ka[i] };
                unimodal_into(da[i], rho(k), &mut target);
                total += cross_entropy(&target, &pb, |s| lay.at(i, s), &mut gb, inv);
            }
            if dirs.b_to_a {
                let k = if rho_source == RhoSource::Student { ka[i] } else { kb[i] };
                unimodal_into(db[i], rho(k), &mut target);
                total += cross_entropy(&target, &pa, |s| lay.at(i, s), &mut ga, inv);
            }
        }
        total *= inv;
    }
    Ok(Loss { value: total, count, grads: [from_vec(&pshape, ga), from_vec(&pshape, gb)] })
}

/// Binary GT confidence: 1 where `|D - D_gt| < 3`, 0 elsewhere (including outside the mask).
pub fn gt_confidence<D: Dimension>(
    d: ArrayView<f64, D>,
    gt: ArrayView<f64, D>,
    mask: ArrayView<bool, D>,
) -> ndarray::Array<f64, D> {
    let mut out = d.to_owned();
    ndarray::Zip::from(&mut out).and(&gt).and(&mask).for_each(|o, &g, &m| {
        *o = if m && (*o - g).abs() < CONFIDENCE_THRESHOLD { 1.0 } else { 0.0 };
    });
    out
}

/// Binary cross-entropy of both confidence maps against their targets. Gradients: `[dK_a, dK_b]`.
pub fn conf_loss<D: Dimension>(
    k_a: ArrayView<f64, D>,
    target_a: ArrayView<f64, D>,
    k_b: ArrayView<f64, D>,
    target_b: ArrayView<f64, D>,
    mask: ArrayView<bool, D>,
) -> Result<Loss<2>> {
    let shape = k_a.shape().to_vec();
    for s in [target_a.shape(), k_b.shape(), target_b.shape(), mask.shape()] {
        check_same("confidence inputs", &shape, s)?;
    }
    let m = mask_vec(mask);
    let count = m.iter().filter(|&&b| b).count();
    let inv = if count > 0 { 1.0 / count as f64 } else { 0.0 };
    let mut total = 0.0;
    let mut grads = [zeros(&shape), zeros(&shape)];
    for (g, (k, t)) in grads.iter_mut().zip([(k_a, target_a), (k_b, target_b)]) {
        let (k, t) = (owned(k).1, owned(t).1);
        let gs = g.as_slice_mut().expect("fresh array");
        for i in (0..k.len()).filter(|&i| m[i]) {
            let (kv, tv) = (k[i], t[i]);
            total -= tv * kv.max(LOG_FLOOR).ln() + (1.0 - tv) * (1.0 - kv).max(LOG_FLOOR).ln();
            let mut d = 0.0;
            if kv > LOG_FLOOR {
                d -= tv / kv;
            }
            if 1.0 - kv > LOG_FLOOR {
                d += (1.0 - tv) / (1.0 - kv);
            }
            gs[i] = d * inv;
        }
    }
    Ok(Loss { value: total * inv, count, grads })
}

/// Per-pixel weight `D_gt / max(D_gt)`, the max taken per sample over masked pixels.
/// A sample whose masked GT is all zero gets weight 1.
fn disparity_weights(gt: &[f64], mask: &[bool], plane: usize) -> Vec<f64> {
    let mut alpha = vec![1.0; gt.len()];
    for (g, (a, m)) in gt.chunks(plane).zip(alpha.chunks_mut(plane).zip(mask.chunks(plane))) {
        let mx = g.iter().zip(m).filter(|(_, &v)| v).map(|(&d, _)| d).fold(0.0, f64::max);
        if mx > 0.0 {
            for (a, &d) in a.iter_mut().zip(g) {
                *a = d / mx;
            }
        }
    }
    alpha
}

/// Disparity-weighted smooth-L1 of both branches against GT. Gradients: `[dD_a, dD_b]`.
pub fn value_loss<D: Dimension>(
    d_a: ArrayView<f64, D>,
    d_b: ArrayView<f64, D>,
    gt: ArrayView<f64, D>,
    mask: ArrayView<bool, D>,
) -> Result<Loss<2>> {
    let shape = d_a.shape().to_vec();
    for s in [d_b.shape(), gt.shape(), mask.shape()] {
        check_same("value inputs", &shape, s)?;
    }
    let plane = map_plane(&shape)?;
    let (g, m) = (owned(gt).1, mask_vec(mask));
    let alpha = disparity_weights(&g, &m, plane);
    let count = m.iter().filter(|&&b| b).count();
    let inv = if count > 0 { 1.0 / count as f64 } else { 0.0 };
    let mut total = 0.0;
    let mut grads = [zeros(&shape), zeros(&shape)];
    for (gr, d) in grads.iter_mut().zip([d_a, d_b]) {
        let d = owned(d).1;
        let gs = gr.as_slice_mut().expect("fresh array");
        for i in (0..d.len()).filter(|&i| m[i]) {
            total += alpha[i] * smooth_l1(d[i] - g[i]);
            gs[i] = alpha[i] * smooth_l1_grad(d[i] - g[i]) * inv;
        }
    }
    Ok(Loss { value: total * inv, count, grads })
}

/// Cross-entropy of each branch's distribution against `UG(D_gt, K)` of its own confidence.
/// Gradients: `[dP_a, dK_a, dP_b, dK_b]`; the confidence receives gradient through the target width.
pub fn dist_loss<D: Dimension, E: Dimension>(
    p_a: ArrayView<f64, E>,
    k_a: ArrayView<f64, D>,
    p_b: ArrayView<f64, E>,
    k_b: ArrayView<f64, D>,
    gt: ArrayView<f64, D>,
    mask: ArrayView<bool, D>,
) -> Result<Loss<4>> {
    let shape = gt.shape().to_vec();
    for s in [k_a.shape(), k_b.shape(), mask.shape()] {
        check_same("dist inputs", &shape, s)?;
    }
    check_same("dist distributions", p_a.shape(), p_b.shape())?;
    let lay = dist_layout(&shape, p_a.shape())?;
    let pshape = p_a.shape().to_vec();
    let (g, m) = (owned(gt).1, mask_vec(mask));
    let count = m.iter().filter(|&&b| b).count();
    let inv = if count > 0 { 1.0 / count as f64 } else { 0.0 };
    let mut total = 0.0;
    let mut out = Vec::with_capacity(4);
    let mut target = vec![0.0; lay.levels];
    for (p, k) in [(p_a, k_a), (p_b, k_b)] {
        let (p, k) = (owned(p).1, owned(k).1);
        check_normalized(&p, lay, &m)?;
        let mut gp = vec![0.0; p.len()];
        let mut gk = vec![0.0; k.len()];
        for i in (0..k.len()).filter(|&i| m[i]) {
            let r = rho(k[i]);
            unimodal_into(g[i], r, &mut target);
            total += cross_entropy(&target, &p, |s| lay.at(i, s), &mut gp, inv);
            // dT_s/drho = T_s (a_s - mean(a)), a_s = -|s - D_gt|; drho/dK = rho^2
            let a = |s: usize| -(s as f64 - g[i]).abs();
            let mean: f64 = target.iter().enumerate().map(|(s, &t)| t * a(s)).sum();
            let dl_drho: f64 = target
                .iter()
                .enumerate()
                .map(|(s, &t)| -p[lay.at(i, s)].max(LOG_FLOOR).ln() * t * (a(s) - mean))
                .sum();
            gk[i] = dl_drho * r * r * inv;
        }
        out.push(from_vec(&pshape, gp));
        out.push(from_vec(&shape, gk));
    }
    let grads: [ArrayD<f64>; 4] = out.try_into().expect("four gradients");
    Ok(Loss { value: total * inv, count, grads })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_conf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_conf: 8.0 }
    }
}

/// Scalar summary of one step's losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub aps: f64,
    pub acs: f64,
    pub conf: f64,
    pub value: f64,
    pub dist: f64,
    pub self_total: f64,
    pub full_total: f64,
    pub masked_pixel_count: usize,
    /// Set when a loss was evaluated over an empty mask.
    pub empty_mask: bool,
}

/// Outputs of one branch for one batch.
#[derive(Clone, Copy, Debug)]
pub struct BranchMaps<'a, D: Dimension, E: Dimension> {
    pub disparity: ArrayView<'a, f64, D>,
    pub confidence: ArrayView<'a, f64, D>,
    pub distribution: ArrayView<'a, f64, E>,
}

/// Which self-supervision terms to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelfTerms {
    pub aps: bool,
    pub acs: bool,
    pub dirs: Directions,
    pub rho_source: RhoSource,
}

impl Default for SelfTerms {
    fn default() -> Self {
        Self { aps: true, acs: true, dirs: Directions::BOTH, rho_source: RhoSource::Student }
    }
}

/// `aps + acs` on unlabeled data.
pub fn self_loss<D: Dimension, E: Dimension>(
    a: &BranchMaps<D, E>,
    b: &BranchMaps<D, E>,
    mask: ArrayView<bool, D>,
    terms: SelfTerms,
) -> Result<LossBreakdown> {
    let mut out = LossBreakdown::default();
    let mut count = mask.iter().filter(|&&m| m).count();
    if terms.aps {
        let l = aps_loss(a.disparity.view(), a.confidence.view(), b.disparity.view(), b.confidence.view(), mask.view(), terms.dirs)?;
        out.aps = l.value;
        count = l.count;
    }
    if terms.acs {
        let l = acs_loss(
            a.distribution.view(),
            a.disparity.view(),
            a.confidence.view(),
            b.distribution.view(),
            b.disparity.view(),
            b.confidence.view(),
            mask.view(),
            terms.dirs,
            terms.rho_source,
        )?;
        out.acs = l.value;
        count = l.count;
    }
    out.self_total = out.aps + out.acs;
    out.masked_pixel_count = count;
    out.empty_mask = count == 0;
    Ok(out)
}

/// `lambda_conf * conf + value + dist` on labeled data. Confidence targets are
/// derived from each branch's own disparity error.
pub fn full_loss<D: Dimension, E: Dimension>(
    a: &BranchMaps<D, E>,
    b: &BranchMaps<D, E>,
    gt: ArrayView<f64, D>,
    mask: ArrayView<bool, D>,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    let ta = gt_confidence(a.disparity.view(), gt.view(), mask.view());
    let tb = gt_confidence(b.disparity.view(), gt.view(), mask.view());
    let conf = conf_loss(a.confidence.view(), ta.view(), b.confidence.view(), tb.view(), mask.view())?;
    let value = value_loss(a.disparity.view(), b.disparity.view(), gt.view(), mask.view())?;
    let dist = dist_loss(a.distribution.view(), a.confidence.view(), b.distribution.view(), b.confidence.view(), gt.view(), mask.view())?;
    Ok(LossBreakdown {
        conf: conf.value,
        value: value.value,
        dist: dist.value,
        full_total: weights.lambda_conf * conf.value + value.value + dist.value,
        masked_pixel_count: value.count,
        empty_mask: value.count == 0,
        ..Default::default()
    })
}
