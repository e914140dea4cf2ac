//! Raw slice kernels shared by the graph ops and the plain (graph-free) API.
//!
//! Every volume is stored contiguously as `[C, D, H, W]` per batch item; 2D
//! maps are the `D = 1` special case.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Kernel, stride and zero padding of a 3D convolution, ordered `[d, h, w]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn cube(k: usize, stride: usize, pad: usize) -> Self {
        Self { kernel: [k; 3], stride: [stride; 3], pad: [pad; 3] }
    }

    /// Planar geometry acting on `[C, 1, H, W]`.
    pub fn planar(k: usize, stride: usize, pad: usize) -> Self {
        Self { kernel: [1, k, k], stride: [1, stride, stride], pad: [0, pad, pad] }
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output extent of a forward convolution, `None` if the kernel does not fit.
    pub fn output_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if padded < self.kernel[a] {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    /// Output extent of the transposed convolution with the given extra padding.
    pub fn transposed_dims(&self, input: [usize; 3], output_pad: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = (input[a] - 1) * self.stride[a] + self.kernel[a] + output_pad[a] - 2 * self.pad[a];
        }
        out
    }
}

/// `C = alpha * op(A) * op(B) + beta * C` on row-major slices.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    let av = if a_t {
        ArrayView2::from_shape((k, m), a).expect("gemm lhs").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm lhs")
    };
    let bv = if b_t {
        ArrayView2::from_shape((n, k), b).expect("gemm rhs").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm rhs")
    };
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("gemm out");
    general_mat_mul(1.0, &av, &bv, beta, &mut cv);
}

/// Unfolds `[C, D, H, W]` into `[C * taps, Do * Ho * Wo]` patch columns.
pub fn im2col(x: &[f64], c: usize, dims: [usize; 3], geom: &ConvGeom, out_dims: [usize; 3], cols: &mut [f64]) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out_dims;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.pad;
    let npos = od * oh * ow;
    debug_assert_eq!(cols.len(), c * geom.taps() * npos);
    let mut row = 0;
    for ci in 0..c {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut cols[row * npos..(row + 1) * npos];
                    let mut p = 0;
                    for zo in 0..od {
                        let z = (zo * sd + a) as isize - pd as isize;
                        if z < 0 || z >= d as isize {
                            dst[p..p + oh * ow].fill(0.0);
                            p += oh * ow;
                            continue;
                        }
                        let plane = &xc[z as usize * h * w..(z as usize + 1) * h * w];
                        for yo in 0..oh {
                            let y = (yo * sh + b) as isize - ph as isize;
                            if y < 0 || y >= h as isize {
                                dst[p..p + ow].fill(0.0);
                                p += ow;
                                continue;
                            }
                            let line = &plane[y as usize * w..(y as usize + 1) * w];
                            for xo in 0..ow {
                                let xx = (xo * sw + e) as isize - pw as isize;
                                dst[p] = if xx < 0 || xx >= w as isize { 0.0 } else { line[xx as usize] };
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
pub fn col2im(cols: &[f64], c: usize, dims: [usize; 3], geom: &ConvGeom, out_dims: [usize; 3], x: &mut [f64]) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out_dims;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.pad;
    let npos = od * oh * ow;
    let mut row = 0;
    for ci in 0..c {
        let xc = &mut x[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &cols[row * npos..(row + 1) * npos];
                    let mut p = 0;
                    for zo in 0..od {
                        let z = (zo * sd + a) as isize - pd as isize;
                        if z < 0 || z >= d as isize {
                            p += oh * ow;
                            continue;
                        }
                        for yo in 0..oh {
                            let y = (yo * sh + b) as isize - ph as isize;
                            if y < 0 || y >= h as isize {
                                p += ow;
                                continue;
                            }
                            let base = (z as usize * h + y as usize) * w;
                            for xo in 0..ow {
                                let xx = (xo * sw + e) as isize - pw as isize;
                                if xx >= 0 && (xx as usize) < w {
                                    xc[base + xx as usize] += src[p];
                                }
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Per-channel statistics of `[N, C, L]` data: (mean, biased variance).
pub fn channel_stats(x: &[f64], n: usize, c: usize, l: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * l) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            s += x[(ni * c + ci) * l..(ni * c + ci + 1) * l].iter().sum::<f64>();
        }
        let mu = s / count;
        let mut v = 0.0;
        for ni in 0..n {
            v += x[(ni * c + ci) * l..(ni * c + ci + 1) * l]
                .iter()
                .map(|&t| (t - mu) * (t - mu))
                .sum::<f64>();
        }
        mean[ci] = mu;
        var[ci] = v / count;
    }
    (mean, var)
}

/// Linear resampling along one axis with half-pixel centers (no corner alignment).
///
/// Returns, for each output index, the two source indices and the weight of the second.
pub fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Resamples `x` viewed as `[outer, in_len, inner]` to `[outer, out_len, inner]`.
pub fn resize_axis(x: &[f64], outer: usize, inner: usize, taps: &[(usize, usize, f64)], in_len: usize) -> Vec<f64> {
    let out_len = taps.len();
    let mut out = vec![0.0; outer * out_len * inner];
    for o in 0..outer {
        let src = &x[o * in_len * inner..(o + 1) * in_len * inner];
        let dst = &mut out[o * out_len * inner..(o + 1) * out_len * inner];
        for (t, &(i0, i1, lam)) in taps.iter().enumerate() {
            let a = &src[i0 * inner..(i0 + 1) * inner];
            let b = &src[i1 * inner..(i1 + 1) * inner];
            let row = &mut dst[t * inner..(t + 1) * inner];
            for ((r, &p), &q) in row.iter_mut().zip(a).zip(b) {
                *r = (1.0 - lam) * p + lam * q;
            }
        }
    }
    out
}

/// Adjoint of [`resize_axis`].
pub fn resize_axis_adjoint(
    dy: &[f64],
    outer: usize,
    inner: usize,
    taps: &[(usize, usize, f64)],
    in_len: usize,
) -> Vec<f64> {
    let out_len = taps.len();
    let mut dx = vec![0.0; outer * in_len * inner];
    for o in 0..outer {
        let src = &dy[o * out_len * inner..(o + 1) * out_len * inner];
        let dst = &mut dx[o * in_len * inner..(o + 1) * in_len * inner];
        for (t, &(i0, i1, lam)) in taps.iter().enumerate() {
            let g = &src[t * inner..(t + 1) * inner];
            for (j, &gv) in g.iter().enumerate() {
                dst[i0 * inner + j] += (1.0 - lam) * gv;
                dst[i1 * inner + j] += lam * gv;
            }
        }
    }
    dx
}

/// Shift-and-concatenate volume for one batch item.
///
/// `left`, `right`: `[C, H, W]`; output `[2C, levels, H, W]` where the right half at
/// level `s` holds `right(x - s)` and is zero where `x < s`.
pub fn shift_concat(left: &[f64], right: &[f64], c: usize, h: usize, w: usize, levels: usize, out: &mut [f64]) {
    let plane = h * w;
    for ci in 0..c {
        for s in 0..levels {
            let dst_l = &mut out[(ci * levels + s) * plane..(ci * levels + s + 1) * plane];
            dst_l.copy_from_slice(&left[ci * plane..(ci + 1) * plane]);
            let dst_r = &mut out[((c + ci) * levels + s) * plane..((c + ci) * levels + s + 1) * plane];
            for y in 0..h {
                let src = &right[ci * plane + y * w..ci * plane + (y + 1) * w];
                let row = &mut dst_r[y * w..(y + 1) * w];
                let keep = w.saturating_sub(s);
                row[..s.min(w)].fill(0.0);
                row[s.min(w)..].copy_from_slice(&src[..keep]);
            }
        }
    }
}

/// Adjoint of [`shift_concat`], accumulating into `dl`, `dr`.
#[allow(clippy::too_many_arguments)]
pub fn shift_concat_adjoint(
    dy: &[f64],
    c: usize,
    h: usize,
    w: usize,
    levels: usize,
    dl: &mut [f64],
    dr: &mut [f64],
) {
    let plane = h * w;
    for ci in 0..c {
        for s in 0..levels {
            let src_l = &dy[(ci * levels + s) * plane..(ci * levels + s + 1) * plane];
            for (d, &g) in dl[ci * plane..(ci + 1) * plane].iter_mut().zip(src_l) {
                *d += g;
            }
            let src_r = &dy[((c + ci) * levels + s) * plane..((c + ci) * levels + s + 1) * plane];
            for y in 0..h {
                for x in s..w {
                    dr[ci * plane + y * w + x - s] += src_r[y * w + x];
                }
            }
        }
    }
}

/// Group-wise correlation volume for one batch item: `[groups, levels, H, W]`.
#[allow(clippy::too_many_arguments)]
pub fn group_correlation(
    left: &[f64],
    right: &[f64],
    c: usize,
    h: usize,
    w: usize,
    groups: usize,
    levels: usize,
    out: &mut [f64],
) {
    let plane = h * w;
    let per_group = c / groups;
    let scale = 1.0 / per_group as f64;
    out.fill(0.0);
    for g in 0..groups {
        for s in 0..levels {
            let dst = &mut out[(g * levels + s) * plane..(g * levels + s + 1) * plane];
            for ci in g * per_group..(g + 1) * per_group {
                let l = &left[ci * plane..(ci + 1) * plane];
                let r = &right[ci * plane..(ci + 1) * plane];
                for y in 0..h {
                    for x in s..w {
                        dst[y * w + x] += l[y * w + x] * r[y * w + x - s];
                    }
                }
            }
            for v in dst.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Adjoint of [`group_correlation`], accumulating into `dl`, `dr`.
#[allow(clippy::too_many_arguments)]
pub fn group_correlation_adjoint(
    dy: &[f64],
    left: &[f64],
    right: &[f64],
    c: usize,
    h: usize,
    w: usize,
    groups: usize,
    levels: usize,
    dl: &mut [f64],
    dr: &mut [f64],
) {
    let plane = h * w;
    let per_group = c / groups;
    let scale = 1.0 / per_group as f64;
    for g in 0..groups {
        for s in 0..levels {
            let src = &dy[(g * levels + s) * plane..(g * levels + s + 1) * plane];
            for ci in g * per_group..(g + 1) * per_group {
                let off = ci * plane;
                for y in 0..h {
                    for x in s..w {
                        let gv = src[y * w + x] * scale;
                        dl[off + y * w + x] += gv * right[off + y * w + x - s];
                        dr[off + y * w + x - s] += gv * left[off + y * w + x];
                    }
                }
            }
        }
    }
}

/// Softmax of the negated cost along the level axis of `[levels, L]` data.
pub fn neg_softmax(cost: &[f64], levels: usize, l: usize, out: &mut [f64]) {
    for p in 0..l {
        let mut mn = f64::INFINITY;
        for s in 0..levels {
            mn = mn.min(cost[s * l + p]);
        }
        let mut z = 0.0;
        for s in 0..levels {
            let e = (mn - cost[s * l + p]).exp();
            out[s * l + p] = e;
            z += e;
        }
        for s in 0..levels {
            out[s * l + p] /= z;
        }
    }
}

/// Gradient of [`neg_softmax`] with respect to the cost.
pub fn neg_softmax_adjoint(prob: &[f64], dprob: &[f64], levels: usize, l: usize, dcost: &mut [f64]) {
    for p in 0..l {
        let mut dot = 0.0;
        for s in 0..levels {
            dot += prob[s * l + p] * dprob[s * l + p];
        }
        for s in 0..levels {
            dcost[s * l + p] -= prob[s * l + p] * (dprob[s * l + p] - dot);
        }
    }
}

/// Expected level of `[levels, L]` distributions.
pub fn expectation(prob: &[f64], levels: usize, l: usize, out: &mut [f64]) {
    out.fill(0.0);
    for s in 0..levels {
        let row = &prob[s * l..(s + 1) * l];
        for (o, &v) in out.iter_mut().zip(row) {
            *o += s as f64 * v;
        }
    }
}
