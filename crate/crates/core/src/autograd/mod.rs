//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Graph`] records every op of one forward pass. Gradients only flow to
//! nodes that require them, so detaching a pseudo-label severs its producer
//! from the objective exactly (the resulting gradients are `None`, not small).

pub mod kernels;
mod params;

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};

pub use kernels::ConvGeom;
pub use params::{ParamId, ParamKind, ParamStore};

pub type Tensor = ArrayD<f64>;

/// Builds a standard-layout tensor from a shape and row-major data.
pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("tensor shape/data mismatch")
}

pub(crate) fn slice(t: &Tensor) -> &[f64] {
    t.as_slice().expect("tensor not in standard layout")
}

fn slice_mut(t: &mut Tensor) -> &mut [f64] {
    t.as_slice_mut().expect("tensor not in standard layout")
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<Vec<f64>> },
    ConvTranspose { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, invstd: Vec<f64>, batch_stats: bool },
    Relu { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, k: f64 },
    Concat { parts: Vec<Var> },
    Reshape { x: Var },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    ScaleChannels { x: Var, gate: Var },
    Resize { x: Var, outer: usize, inner: usize, in_len: usize, taps: Vec<(usize, usize, f64)> },
    ShiftConcat { l: Var, r: Var, levels: usize },
    GroupCorr { l: Var, r: Var, groups: usize, levels: usize },
    NegSoftmax { c: Var },
    Expectation { p: Var },
    Loss { parts: Vec<(Var, Tensor)> },
    Combine { terms: Vec<(Var, f64)> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when no path connects the loss to `v`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// Tape of one forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), grad_enabled: true, buffer_updates: Vec::new() }
    }

    /// A graph whose parameters never require gradients (inference).
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        slice(&self.nodes[v.0].value)[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input leaf; `requires_grad` is honored even in inference graphs.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let value = value.as_standard_layout().into_owned();
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter. Requesting the same id twice returns the
    /// same node, so weight sharing accumulates gradients in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let rg = self.grad_enabled && store.kind(id) == ParamKind::Weight;
        let v = self.push(store.get(id).clone(), Op::Param, rg);
        self.params.insert(id, v);
        v
    }

    /// Copy of `v` with no gradient path back to its producer.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    /// Records a new value for a buffer (e.g. running statistics) to be applied
    /// by the owner of the store once the step is complete.
    pub fn record_buffer_update(&mut self, id: ParamId, value: Tensor) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Forward convolution of `[N, C, D, H, W]` input with `[Co, C, kd, kh, kw]` weights.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 5, "conv expects [N, C, D, H, W]");
        assert_eq!(ws[1], xs[1], "conv channel mismatch");
        assert_eq!(&ws[2..], &geom.kernel, "conv kernel mismatch");
        let (n, c, co) = (xs[0], xs[1], ws[0]);
        let dims = [xs[2], xs[3], xs[4]];
        let od = geom.output_dims(dims).expect("kernel larger than padded input");
        let npos = od.iter().product::<usize>();
        let ck = c * geom.taps();
        let mut out = vec![0.0; n * co * npos];
        let mut saved = Vec::with_capacity(n);
        let in_len = c * dims.iter().product::<usize>();
        {
            let xv = slice(self.value(x));
            let wv = slice(self.value(w));
            for ni in 0..n {
                let mut cols = vec![0.0; ck * npos];
                im2col_or_copy(&xv[ni * in_len..(ni + 1) * in_len], c, dims, &geom, od, &mut cols);
                kernels::gemm(co, ck, npos, wv, false, &cols, false, &mut out[ni * co * npos..(ni + 1) * co * npos], 0.0);
                saved.push(cols);
            }
            if let Some(b) = b {
                add_channel_bias(&mut out, slice(self.value(b)), n, co, npos);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        if !self.rg(w) {
            saved.clear();
        }
        let value = tensor(&[n, co, od[0], od[1], od[2]], out);
        self.push(value, Op::Conv { x, w, b, geom, cols: saved }, rg)
    }

    /// Transposed convolution; weights are `[C, Co, kd, kh, kw]`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom, output_pad: [usize; 3]) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws[0], xs[1], "deconv channel mismatch");
        let (n, c, co) = (xs[0], xs[1], ws[1]);
        let in_dims = [xs[2], xs[3], xs[4]];
        let out_dims = geom.transposed_dims(in_dims, output_pad);
        let pin = in_dims.iter().product::<usize>();
        let pout = out_dims.iter().product::<usize>();
        let ck = co * geom.taps();
        let mut out = vec![0.0; n * co * pout];
        {
            let xv = slice(self.value(x));
            let wv = slice(self.value(w));
            let mut cols = vec![0.0; ck * pin];
            for ni in 0..n {
                kernels::gemm(ck, c, pin, wv, true, &xv[ni * c * pin..(ni + 1) * c * pin], false, &mut cols, 0.0);
                kernels::col2im(&cols, co, out_dims, &geom, in_dims, &mut out[ni * co * pout..(ni + 1) * co * pout]);
            }
            if let Some(b) = b {
                add_channel_bias(&mut out, slice(self.value(b)), n, co, pout);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = tensor(&[n, co, out_dims[0], out_dims[1], out_dims[2]], out);
        self.push(value, Op::ConvTranspose { x, w, b, geom }, rg)
    }

    /// Channel-wise affine normalization of `[N, C, ...]`.
    ///
    /// With `stats = None` the batch statistics are used and returned as
    /// `(mean, biased variance)`; otherwise the given running statistics are applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> (Var, Option<(Vec<f64>, Vec<f64>)>) {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let l: usize = xs[2..].iter().product();
        let xv = slice(self.value(x));
        let (mean, var, batch_stats) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec(), false),
            None => {
                let (m, v) = kernels::channel_stats(xv, n, c, l);
                (m, v, true)
            }
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = slice(self.value(gamma));
        let bt = slice(self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * l;
                for i in off..off + l {
                    let h = (xv[i] - mean[ci]) * invstd[ci];
                    xhat[i] = h;
                    out[i] = g[ci] * h + bt[ci];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = tensor(&xs, out);
        let v = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, invstd, batch_stats }, rg);
        (v, batch_stats.then_some((mean, var)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // `f64::max` would turn NaN into 0 and hide a diverged step
        let value = self.value(x).mapv(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 });
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x) * k;
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, k }, rg)
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let first = self.shape(parts[0]).to_vec();
        let n = first[0];
        let rest: usize = first[2..].iter().product();
        let total_c: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(n * total_c * rest);
        for ni in 0..n {
            for &p in parts {
                let s = self.shape(p);
                assert_eq!(s[0], n);
                assert_eq!(&s[2..], &first[2..], "concat spatial mismatch");
                let c = s[1];
                out.extend_from_slice(&slice(self.value(p))[ni * c * rest..(ni + 1) * c * rest]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total_c;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(tensor(&shape, out), Op::Concat { parts: parts.to_vec() }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = tensor(shape, slice(self.value(x)).to_vec());
        let rg = self.rg(x);
        self.push(value, Op::Reshape { x }, rg)
    }

    /// Mean over all axes after the first two: `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let l: usize = xs[2..].iter().product();
        let xv = slice(self.value(x));
        let out: Vec<f64> = (0..n * c).map(|i| xv[i * l..(i + 1) * l].iter().sum::<f64>() / l as f64).collect();
        let rg = self.rg(x);
        self.push(tensor(&[n, c], out), Op::GlobalAvgPool { x }, rg)
    }

    /// `[N, Ci] x [Co, Ci]^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, ci, co) = (xs[0], xs[1], ws[0]);
        assert_eq!(ws[1], ci, "linear width mismatch");
        let mut out = vec![0.0; n * co];
        kernels::gemm(n, ci, co, slice(self.value(x)), false, slice(self.value(w)), true, &mut out, 0.0);
        let bv = slice(self.value(b));
        for row in out.chunks_mut(co) {
            for (o, &bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(tensor(&[n, co], out), Op::Linear { x, w, b }, rg)
    }

    /// Multiplies every channel of `[N, C, ...]` by `gate[N, C]`.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        assert_eq!(self.shape(gate), &[n, c]);
        let l: usize = xs[2..].iter().product();
        let gv = slice(self.value(gate)).to_vec();
        let mut value = self.value(x).clone();
        for (i, chunk) in slice_mut(&mut value).chunks_mut(l).enumerate() {
            for v in chunk {
                *v *= gv[i];
            }
        }
        let rg = self.rg(x) || self.rg(gate);
        self.push(value, Op::ScaleChannels { x, gate }, rg)
    }

    /// Linear resampling of `axis` to `out_len` samples (half-pixel centers).
    pub fn resize_axis(&mut self, x: Var, axis: usize, out_len: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let in_len = xs[axis];
        let taps = kernels::linear_taps(in_len, out_len);
        let out = kernels::resize_axis(slice(self.value(x)), outer, inner, &taps, in_len);
        let mut shape = xs.clone();
        shape[axis] = out_len;
        let rg = self.rg(x);
        self.push(tensor(&shape, out), Op::Resize { x, outer, inner, in_len, taps }, rg)
    }

    /// `[N, C, H, W]` pair to the `[N, 2C, levels, H, W]` shift-and-concatenate volume.
    pub fn shift_concat(&mut self, l: Var, r: Var, levels: usize) -> Var {
        let s = self.shape(l).to_vec();
        assert_eq!(s, self.shape(r), "feature shape mismatch");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let item_in = c * h * w;
        let item_out = 2 * c * levels * h * w;
        let mut out = vec![0.0; n * item_out];
        let (lv, rv) = (slice(self.value(l)), slice(self.value(r)));
        for ni in 0..n {
            kernels::shift_concat(
                &lv[ni * item_in..(ni + 1) * item_in],
                &rv[ni * item_in..(ni + 1) * item_in],
                c,
                h,
                w,
                levels,
                &mut out[ni * item_out..(ni + 1) * item_out],
            );
        }
        let rg = self.rg(l) || self.rg(r);
        self.push(tensor(&[n, 2 * c, levels, h, w], out), Op::ShiftConcat { l, r, levels }, rg)
    }

    /// `[N, C, H, W]` pair to the `[N, groups, levels, H, W]` group-wise correlation volume.
    pub fn group_corr(&mut self, l: Var, r: Var, groups: usize, levels: usize) -> Var {
        let s = self.shape(l).to_vec();
        assert_eq!(s, self.shape(r), "feature shape mismatch");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert_eq!(c % groups, 0, "channels not divisible by groups");
        let item_in = c * h * w;
        let item_out = groups * levels * h * w;
        let mut out = vec![0.0; n * item_out];
        let (lv, rv) = (slice(self.value(l)), slice(self.value(r)));
        for ni in 0..n {
            kernels::group_correlation(
                &lv[ni * item_in..(ni + 1) * item_in],
                &rv[ni * item_in..(ni + 1) * item_in],
                c,
                h,
                w,
                groups,
                levels,
                &mut out[ni * item_out..(ni + 1) * item_out],
            );
        }
        let rg = self.rg(l) || self.rg(r);
        self.push(tensor(&[n, groups, levels, h, w], out), Op::GroupCorr { l, r, groups, levels }, rg)
    }

    /// Softmax of `-cost` along axis 1 of `[N, S, ...]`.
    pub fn neg_softmax(&mut self, c: Var) -> Var {
        let cs = self.shape(c).to_vec();
        let (n, levels) = (cs[0], cs[1]);
        let l: usize = cs[2..].iter().product();
        let cv = slice(self.value(c));
        let mut out = vec![0.0; cv.len()];
        for ni in 0..n {
            let r = ni * levels * l..(ni + 1) * levels * l;
            kernels::neg_softmax(&cv[r.clone()], levels, l, &mut out[r]);
        }
        let rg = self.rg(c);
        self.push(tensor(&cs, out), Op::NegSoftmax { c }, rg)
    }

    /// Expected level along axis 1: `[N, S, ...] -> [N, ...]`.
    pub fn expectation(&mut self, p: Var) -> Var {
        let ps = self.shape(p).to_vec();
        let (n, levels) = (ps[0], ps[1]);
        let l: usize = ps[2..].iter().product();
        let pv = slice(self.value(p));
        let mut out = vec![0.0; n * l];
        for ni in 0..n {
            kernels::expectation(&pv[ni * levels * l..(ni + 1) * levels * l], levels, l, &mut out[ni * l..(ni + 1) * l]);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&ps[2..]);
        let rg = self.rg(p);
        self.push(tensor(&shape, out), Op::Expectation { p }, rg)
    }

    /// Scalar node with precomputed partial derivatives with respect to `parts`.
    ///
    /// Parts that do not require gradients are dropped, which is how loss terms
    /// restrict their gradient to the branch being taught.
    pub fn loss(&mut self, value: f64, parts: Vec<(Var, Tensor)>) -> Var {
        let parts: Vec<(Var, Tensor)> = parts
            .into_iter()
            .filter(|(v, g)| {
                assert_eq!(self.shape(*v), g.shape(), "loss gradient shape mismatch");
                self.rg(*v)
            })
            .collect();
        let rg = !parts.is_empty();
        self.push(tensor(&[], vec![value]), Op::Loss { parts }, rg)
    }

    /// Weighted sum of scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Var {
        let value: f64 = terms.iter().map(|&(v, k)| k * self.scalar(v)).sum();
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(tensor(&[], vec![value]), Op::Combine { terms: terms.to_vec() }, rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(root) {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::ones(self.nodes[root.0].value.raw_dim()));
        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    /// `(param, gradient)` for every parameter reached by the last backward pass.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> =
            self.params.iter().filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.clone()))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let dyv = slice(dy);
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv { x, w, b, geom, cols } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (n, c, co) = (xs[0], xs[1], ws[0]);
                let dims = [xs[2], xs[3], xs[4]];
                let od = geom.output_dims(dims).unwrap();
                let npos: usize = od.iter().product();
                let ck = c * geom.taps();
                if self.rg(*w) {
                    let mut dw = vec![0.0; co * ck];
                    for ni in 0..n {
                        kernels::gemm(co, npos, ck, &dyv[ni * co * npos..(ni + 1) * co * npos], false, &cols[ni], true, &mut dw, 1.0);
                    }
                    self.accumulate(grads, *w, tensor(ws, dw));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        self.accumulate(grads, *b, tensor(&[co], channel_sums(dyv, n, co, npos)));
                    }
                }
                if self.rg(*x) {
                    let in_len = c * dims.iter().product::<usize>();
                    let mut dx = vec![0.0; n * in_len];
                    let wv = slice(self.value(*w));
                    let mut dcols = vec![0.0; ck * npos];
                    for ni in 0..n {
                        kernels::gemm(ck, co, npos, wv, true, &dyv[ni * co * npos..(ni + 1) * co * npos], false, &mut dcols, 0.0);
                        col2im_or_add(&dcols, c, dims, geom, od, &mut dx[ni * in_len..(ni + 1) * in_len]);
                    }
                    self.accumulate(grads, *x, tensor(xs, dx));
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (n, c, co) = (xs[0], xs[1], ws[1]);
                let in_dims = [xs[2], xs[3], xs[4]];
                let out_shape = node.value.shape();
                let out_dims = [out_shape[2], out_shape[3], out_shape[4]];
                let pin: usize = in_dims.iter().product();
                let pout: usize = out_dims.iter().product();
                let ck = co * geom.taps();
                let xv = slice(self.value(*x));
                let wv = slice(self.value(*w));
                let mut dw = vec![0.0; c * ck];
                let mut dx = vec![0.0; n * c * pin];
                let mut dcols = vec![0.0; ck * pin];
                for ni in 0..n {
                    kernels::im2col(&dyv[ni * co * pout..(ni + 1) * co * pout], co, out_dims, geom, in_dims, &mut dcols);
                    if self.rg(*x) {
                        kernels::gemm(c, ck, pin, wv, false, &dcols, false, &mut dx[ni * c * pin..(ni + 1) * c * pin], 0.0);
                    }
                    if self.rg(*w) {
                        kernels::gemm(c, pin, ck, &xv[ni * c * pin..(ni + 1) * c * pin], false, &dcols, true, &mut dw, 1.0);
                    }
                }
                if self.rg(*w) {
                    self.accumulate(grads, *w, tensor(ws, dw));
                }
                if self.rg(*x) {
                    self.accumulate(grads, *x, tensor(xs, dx));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        self.accumulate(grads, *b, tensor(&[co], channel_sums(dyv, n, co, pout)));
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, invstd, batch_stats } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let l: usize = xs[2..].iter().product();
                let g = slice(self.value(*gamma));
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * l;
                        for i in off..off + l {
                            dgamma[ci] += dyv[i] * xhat[i];
                            dbeta[ci] += dyv[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let m = (n * l) as f64;
                    let mut dx = vec![0.0; dyv.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * l;
                            let k = g[ci] * invstd[ci];
                            for i in off..off + l {
                                dx[i] = if *batch_stats {
                                    k * (dyv[i] - dbeta[ci] / m - xhat[i] * dgamma[ci] / m)
                                } else {
                                    k * dyv[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, tensor(xs, dx));
                }
                self.accumulate(grads, *gamma, tensor(&[c], dgamma));
                self.accumulate(grads, *beta, tensor(&[c], dbeta));
            }
            Op::Relu { x } => {
                let mut dx = dy.clone();
                for (d, &v) in slice_mut(&mut dx).iter_mut().zip(slice(&node.value)) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let mut dx = dy.clone();
                for (d, &s) in slice_mut(&mut dx).iter_mut().zip(slice(&node.value)) {
                    *d *= s * (1.0 - s);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Scale { x, k } => self.accumulate(grads, *x, dy * *k),
            Op::Concat { parts } => {
                let n = dy.shape()[0];
                let rest: usize = dy.shape()[2..].iter().product();
                let total_c = dy.shape()[1];
                let mut c0 = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    let c = ps[1];
                    if self.rg(p) {
                        let mut out = Vec::with_capacity(n * c * rest);
                        for ni in 0..n {
                            let start = (ni * total_c + c0) * rest;
                            out.extend_from_slice(&dyv[start..start + c * rest]);
                        }
                        self.accumulate(grads, p, tensor(ps, out));
                    }
                    c0 += c;
                }
            }
            Op::Reshape { x } => self.accumulate(grads, *x, tensor(self.shape(*x), dyv.to_vec())),
            Op::GlobalAvgPool { x } => {
                let xs = self.shape(*x);
                let l: usize = xs[2..].iter().product();
                let mut dx = Vec::with_capacity(xs.iter().product());
                for &g in dyv {
                    dx.extend(std::iter::repeat_n(g / l as f64, l));
                }
                self.accumulate(grads, *x, tensor(xs, dx));
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (n, ci, co) = (xs[0], xs[1], ws[0]);
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * ci];
                    kernels::gemm(n, co, ci, dyv, false, slice(self.value(*w)), false, &mut dx, 0.0);
                    self.accumulate(grads, *x, tensor(xs, dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; co * ci];
                    kernels::gemm(co, n, ci, dyv, true, slice(self.value(*x)), false, &mut dw, 0.0);
                    self.accumulate(grads, *w, tensor(ws, dw));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; co];
                    for row in dyv.chunks(co) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.accumulate(grads, *b, tensor(&[co], db));
                }
            }
            Op::ScaleChannels { x, gate } => {
                let xs = self.shape(*x);
                let l: usize = xs[2..].iter().product();
                let gv = slice(self.value(*gate));
                let xv = slice(self.value(*x));
                if self.rg(*x) {
                    let mut dx = dyv.to_vec();
                    for (i, chunk) in dx.chunks_mut(l).enumerate() {
                        for v in chunk {
                            *v *= gv[i];
                        }
                    }
                    self.accumulate(grads, *x, tensor(xs, dx));
                }
                if self.rg(*gate) {
                    let dg: Vec<f64> = (0..gv.len())
                        .map(|i| dyv[i * l..(i + 1) * l].iter().zip(&xv[i * l..(i + 1) * l]).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *gate, tensor(self.shape(*gate), dg));
                }
            }
            Op::Resize { x, outer, inner, in_len, taps } => {
                let dx = kernels::resize_axis_adjoint(dyv, *outer, *inner, taps, *in_len);
                self.accumulate(grads, *x, tensor(self.shape(*x), dx));
            }
            Op::ShiftConcat { l, r, levels } => {
                let s = self.shape(*l);
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let item_in = c * h * w;
                let item_out = 2 * c * levels * h * w;
                let mut dl = vec![0.0; n * item_in];
                let mut dr = vec![0.0; n * item_in];
                for ni in 0..n {
                    kernels::shift_concat_adjoint(
                        &dyv[ni * item_out..(ni + 1) * item_out],
                        c,
                        h,
                        w,
                        *levels,
                        &mut dl[ni * item_in..(ni + 1) * item_in],
                        &mut dr[ni * item_in..(ni + 1) * item_in],
                    );
                }
                self.accumulate(grads, *l, tensor(s, dl));
                self.accumulate(grads, *r, tensor(s, dr));
            }
            Op::GroupCorr { l, r, groups, levels } => {
                let s = self.shape(*l);
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let item_in = c * h * w;
                let item_out = groups * levels * h * w;
                let (lv, rv) = (slice(self.value(*l)), slice(self.value(*r)));
                let mut dl = vec![0.0; n * item_in];
                let mut dr = vec![0.0; n * item_in];
                for ni in 0..n {
                    let ri = ni * item_in..(ni + 1) * item_in;
                    let (dls, drs) = (&mut dl[ri.clone()], &mut dr[ri.clone()]);
                    kernels::group_correlation_adjoint(
                        &dyv[ni * item_out..(ni + 1) * item_out],
                        &lv[ri.clone()],
                        &rv[ri],
                        c,
                        h,
                        w,
                        *groups,
                        *levels,
                        dls,
                        drs,
                    );
                }
                self.accumulate(grads, *l, tensor(s, dl));
                self.accumulate(grads, *r, tensor(s, dr));
            }
            Op::NegSoftmax { c } => {
                let cs = self.shape(*c);
                let (n, levels) = (cs[0], cs[1]);
                let l: usize = cs[2..].iter().product();
                let pv = slice(&node.value);
                let mut dc = vec![0.0; pv.len()];
                for ni in 0..n {
                    let r = ni * levels * l..(ni + 1) * levels * l;
                    kernels::neg_softmax_adjoint(&pv[r.clone()], &dyv[r.clone()], levels, l, &mut dc[r]);
                }
                self.accumulate(grads, *c, tensor(cs, dc));
            }
            Op::Expectation { p } => {
                let ps = self.shape(*p);
                let (n, levels) = (ps[0], ps[1]);
                let l: usize = ps[2..].iter().product();
                let mut dp = vec![0.0; n * levels * l];
                for ni in 0..n {
                    for s in 0..levels {
                        let dst = &mut dp[(ni * levels + s) * l..(ni * levels + s + 1) * l];
                        for (d, &g) in dst.iter_mut().zip(&dyv[ni * l..(ni + 1) * l]) {
                            *d = s as f64 * g;
                        }
                    }
                }
                self.accumulate(grads, *p, tensor(ps, dp));
            }
            Op::Loss { parts } => {
                let k = dyv[0];
                for (v, g) in parts {
                    self.accumulate(grads, *v, g * k);
                }
            }
            Op::Combine { terms } => {
                for &(v, k) in terms {
                    self.accumulate(grads, v, tensor(&[], vec![dyv[0] * k]));
                }
            }
        }
    }
}

/// Logistic function kept inside the open unit interval even for saturating inputs.
pub(crate) fn sigmoid(v: f64) -> f64 {
    const MARGIN: f64 = 1e-12;
    let y = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    y.clamp(MARGIN, 1.0 - MARGIN)
}

fn is_pointwise(geom: &ConvGeom) -> bool {
    geom.kernel == [1, 1, 1] && geom.stride == [1, 1, 1] && geom.pad == [0, 0, 0]
}

fn im2col_or_copy(x: &[f64], c: usize, dims: [usize; 3], geom: &ConvGeom, od: [usize; 3], cols: &mut [f64]) {
    if is_pointwise(geom) {
        cols.copy_from_slice(x);
    } else {
        kernels::im2col(x, c, dims, geom, od, cols);
    }
}

fn col2im_or_add(cols: &[f64], c: usize, dims: [usize; 3], geom: &ConvGeom, od: [usize; 3], x: &mut [f64]) {
    if is_pointwise(geom) {
        for (d, &v) in x.iter_mut().zip(cols) {
            *d += v;
        }
    } else {
        kernels::col2im(cols, c, dims, geom, od, x);
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], n: usize, c: usize, l: usize) {
    for ni in 0..n {
        for ci in 0..c {
            for v in &mut out[(ni * c + ci) * l..(ni * c + ci + 1) * l] {
                *v += bias[ci];
            }
        }
    }
}

fn channel_sums(dy: &[f64], n: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for ni in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            *o += dy[(ni * c + ci) * l..(ni * c + ci + 1) * l].iter().sum::<f64>();
        }
    }
    out
}
