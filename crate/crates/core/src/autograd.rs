//! Tape-based reverse-mode differentiation over batched tensors.
//!
//! A [`Graph`] records every operation eagerly: each call computes its value
//! immediately and appends a node. [`Graph::backward`] then walks the tape in
//! reverse. Spatial tensors are `[N, C, H, W]`, vectors are `[N, D]`; work is
//! split across the batch axis with [`crate::par`] and every cross-sample
//! reduction runs in sample order.

use std::sync::Arc;

use crate::par;
use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    AvgPool2(Var),
    Upsample2(Var),
    SpatialSoftmax {
        x: Var,
        inv_temp: f64,
    },
    Expectation(Var),
    GatherSum {
        x: Var,
        groups: Arc<Vec<Vec<usize>>>,
    },
    Concat(Vec<Var>),
    OuterMul {
        att: Var,
        feat: Var,
    },
    LandmarkMix {
        g: Var,
        w: Var,
        b: Var,
    },
    GlobalAvgPool(Var),
    GroupLinear {
        x: Var,
        w: Var,
        b: Var,
    },
    Gate {
        local: Var,
        context: Var,
        alpha: Var,
    },
    SumSqDiff {
        x: Var,
        target: Arc<Tensor>,
        weights: Arc<Vec<f64>>,
    },
    Bce {
        p: Var,
        labels: Arc<Tensor>,
        weights: Arc<Vec<f64>>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Probability clamp used by the binary cross-entropy op.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected [N, C, H, W], got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [f64],
) {
    let l = ho * wo;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((ci * k + ki) * k + kj) * l..][..l];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    let out = &mut row[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, o) in out.iter_mut().enumerate() {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        *o = if iw < 0 || iw >= w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f64],
) {
    let l = ho * wo;
    for ci in 0..cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((ci * k + ki) * k + kj) * l..][..l];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            plane[ih as usize * w + iw as usize] += row[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Sums per-sample tensors in sample order.
/// Visits every valid (output row, input row, tap) of a same-padded `k×k`
/// stencil, passing the output column range `x0..x1` and the matching first
/// input column.
#[inline]
fn for_each_tap(h: usize, w: usize, k: usize, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize)) {
    let pad = k / 2;
    for y in 0..h {
        for ki in 0..k {
            let Some(iy) = (y + ki).checked_sub(pad).filter(|&iy| iy < h) else {
                continue;
            };
            for kj in 0..k {
                let x0 = pad.saturating_sub(kj);
                let x1 = (w + pad).saturating_sub(kj).min(w);
                if x0 < x1 {
                    f(y, iy, ki, kj, x0, x1, x0 + kj - pad);
                }
            }
        }
    }
}

fn reduce_in_order(parts: Vec<Vec<f64>>, shape: &[usize]) -> Tensor {
    let mut acc = vec![0.0; shape.iter().product()];
    for p in parts {
        for (a, b) in acc.iter_mut().zip(&p) {
            *a += b;
        }
    }
    Tensor::from_vec(shape, acc).expect("reduction shape")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Leaf bound to parameter slot `id`; its gradient is reported by
    /// [`Gradients::param_grads`].
    pub fn param(&mut self, id: usize, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Param(id))
    }

    /// 2-D convolution. `x: [N, Cin, H, W]`, `w: [Cout, Cin, k, k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = dims4(self.value(x));
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[1], cin, "conv input channels");
        let (cout, k) = (ws[0], ws[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let l = ho * wo;
        let kk = cin * k * k;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            let direct = k == 1 && stride == 1 && pad == 0;
            par::for_each_chunk_mut(out.data_mut(), cout * l, |i, o| {
                let xs = xv.slab(i);
                if direct {
                    gemm(cout, kk, l, wv, false, xs, false, o, false);
                } else {
                    let mut col = vec![0.0; kk * l];
                    im2col(xs, cin, h, wd, k, stride, pad, ho, wo, &mut col);
                    gemm(cout, kk, l, wv, false, &col, false, o, false);
                }
                if let Some(bv) = bv {
                    for (c, row) in o.chunks_mut(l).enumerate() {
                        for v in row {
                            *v += bv[c];
                        }
                    }
                }
            });
        }
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    /// Per-channel 2-D convolution with "same" padding.
    /// `x: [N, Ch, H, W]`, `w: [Ch, k, k]` (odd `k`), `b: [Ch]`.
    pub fn depthwise(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, ch, h, wd) = dims4(self.value(x));
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 3);
        assert_eq!(ws[0], ch, "depthwise channels");
        let k = ws[1];
        let mut out = Tensor::zeros(&[n, ch, h, wd]);
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            par::for_each_chunk_mut(out.data_mut(), ch * h * wd, |i, o| {
                let xs = xv.slab(i);
                for c in 0..ch {
                    let plane = &xs[c * h * wd..(c + 1) * h * wd];
                    let ker = &wv[c * k * k..(c + 1) * k * k];
                    let dst = &mut o[c * h * wd..(c + 1) * h * wd];
                    dst.fill(bv.map_or(0.0, |b| b[c]));
                    for_each_tap(h, wd, k, |y, iy, ki, kj, x0, x1, sx0| {
                        let kv = ker[ki * k + kj];
                        let src = &plane[iy * wd + sx0..iy * wd + sx0 + (x1 - x0)];
                        for (d, v) in dst[y * wd + x0..y * wd + x1].iter_mut().zip(src) {
                            *d += kv * v;
                        }
                    });
                }
            });
        }
        self.push(out, Op::Depthwise { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(av.shape(), data).unwrap();
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shapes");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(av.shape(), data).unwrap();
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// 2×2 average pooling (even H and W).
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(a));
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let (h2, w2) = (h / 2, w / 2);
        let src = self.value(a).data();
        let mut out = Tensor::zeros(&[n, c, h2, w2]);
        for (pi, dst) in out.data_mut().chunks_mut(h2 * w2).enumerate() {
            let p = &src[pi * h * w..(pi + 1) * h * w];
            for y in 0..h2 {
                for x in 0..w2 {
                    dst[y * w2 + x] = 0.25
                        * (p[2 * y * w + 2 * x]
                            + p[2 * y * w + 2 * x + 1]
                            + p[(2 * y + 1) * w + 2 * x]
                            + p[(2 * y + 1) * w + 2 * x + 1]);
                }
            }
        }
        self.push(out, Op::AvgPool2(a))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(a));
        let (h2, w2) = (h * 2, w * 2);
        let src = self.value(a).data();
        let mut out = Tensor::zeros(&[n, c, h2, w2]);
        for (pi, dst) in out.data_mut().chunks_mut(h2 * w2).enumerate() {
            let p = &src[pi * h * w..(pi + 1) * h * w];
            for y in 0..h2 {
                for x in 0..w2 {
                    dst[y * w2 + x] = p[(y / 2) * w + x / 2];
                }
            }
        }
        self.push(out, Op::Upsample2(a))
    }

    /// Softmax over the spatial cells of every `(n, c)` map, applied to
    /// `x / temperature`.
    pub fn spatial_softmax(&mut self, x: Var, temperature: f64) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        let inv_temp = 1.0 / temperature;
        let mut out = self.value(x).clone();
        let hw = h * w;
        for map in out.data_mut().chunks_mut(hw) {
            let m = map.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) * inv_temp;
            let mut s = 0.0;
            for v in map.iter_mut() {
                *v = (*v * inv_temp - m).exp();
                s += *v;
            }
            for v in map.iter_mut() {
                *v /= s;
            }
        }
        debug_assert_eq!(out.len(), n * c * hw);
        self.push(out, Op::SpatialSoftmax { x, inv_temp })
    }

    /// Expected cell coordinate `(u, v)` = (column, row) of each map
    /// treated as a distribution. Output `[N, C, 2]`.
    ///
    /// Computed as `c + Σ (x − c)·a` about the grid centre `c`, pairing
    /// mirrored marginals, so a symmetric map decodes to the centre exactly.
    /// For maps summing to one this equals `Σ x·a`.
    pub fn expectation(&mut self, att: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(att));
        let src = self.value(att).data();
        let mut out = Tensor::zeros(&[n, c, 2]);
        let mut cols = vec![0.0; w];
        let mut rows = vec![0.0; h];
        for (pi, dst) in out.data_mut().chunks_mut(2).enumerate() {
            let p = &src[pi * h * w..(pi + 1) * h * w];
            cols.fill(0.0);
            rows.fill(0.0);
            for y in 0..h {
                for x in 0..w {
                    cols[x] += p[y * w + x];
                    rows[y] += p[y * w + x];
                }
            }
            dst[0] = centred_moment(&cols);
            dst[1] = centred_moment(&rows);
        }
        self.push(out, Op::Expectation(att))
    }

    /// `out[:, p] = Σ_{e ∈ groups[p]} x[:, e]`; an empty group yields ones.
    pub fn gather_sum(&mut self, x: Var, groups: Arc<Vec<Vec<usize>>>) -> Var {
        let (n, ce, h, w) = dims4(self.value(x));
        let hw = h * w;
        let p = groups.len();
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[n, p, h, w]);
        for i in 0..n {
            for (pi, members) in groups.iter().enumerate() {
                let dst = &mut out.data_mut()[(i * p + pi) * hw..(i * p + pi + 1) * hw];
                if members.is_empty() {
                    dst.fill(1.0);
                    continue;
                }
                for &e in members {
                    assert!(e < ce, "edge index {e} out of range");
                    let s = &src[(i * ce + e) * hw..(i * ce + e + 1) * hw];
                    for (d, v) in dst.iter_mut().zip(s) {
                        *d += v;
                    }
                }
            }
        }
        self.push(out, Op::GatherSum { x, groups })
    }

    /// Channel concatenation of `[N, C_i, H, W]` tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = dims4(self.value(parts[0]));
        let hw = h * w;
        let chans: Vec<usize> = parts.iter().map(|&v| dims4(self.value(v)).1).collect();
        let total: usize = chans.iter().sum();
        let mut out = Tensor::zeros(&[n, total, h, w]);
        for i in 0..n {
            let mut off = 0;
            for (&v, &c) in parts.iter().zip(&chans) {
                let (n2, _, h2, w2) = dims4(self.value(v));
                assert!(n2 == n && h2 == h && w2 == w, "concat shapes");
                let src = self.value(v).slab(i);
                out.data_mut()[(i * total + off) * hw..(i * total + off + c) * hw]
                    .copy_from_slice(src);
                off += c;
            }
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// `out[n, p·C + c] = att[n, p] ⊙ feat[n, c]` for `att: [N, P, H, W]`,
    /// `feat: [N, C, H, W]`; output `[N, P·C, H, W]`.
    pub fn outer_mul(&mut self, att: Var, feat: Var) -> Var {
        let (n, p, h, w) = dims4(self.value(att));
        let (n2, c, h2, w2) = dims4(self.value(feat));
        assert!(n == n2 && h == h2 && w == w2, "outer_mul shapes");
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, p * c, h, w]);
        {
            let av = self.value(att);
            let fv = self.value(feat);
            par::for_each_chunk_mut(out.data_mut(), p * c * hw, |i, o| {
                let a = av.slab(i);
                let f = fv.slab(i);
                for pi in 0..p {
                    let ap = &a[pi * hw..(pi + 1) * hw];
                    for ci in 0..c {
                        let fc = &f[ci * hw..(ci + 1) * hw];
                        let dst = &mut o[(pi * c + ci) * hw..(pi * c + ci + 1) * hw];
                        for ((d, x), y) in dst.iter_mut().zip(ap).zip(fc) {
                            *d = x * y;
                        }
                    }
                }
            });
        }
        self.push(out, Op::OuterMul { att, feat })
    }

    /// 1×1 convolution across landmark groups:
    /// `out[n, q, rest] = Σ_p w[q, p] g[n, p, rest] + b[q]` where `g` is
    /// `[N, P·C, H, W]` viewed as `[N, P, C·H·W]`, `w: [P, P]`, `b: [P]`.
    pub fn landmark_mix(&mut self, g: Var, w: Var, b: Var) -> Var {
        let gs = self.value(g).shape().to_vec();
        let p = self.value(w).shape()[0];
        assert_eq!(self.value(w).shape(), &[p, p]);
        let per = self.value(g).stride0();
        assert_eq!(per % p, 0, "landmark_mix grouping");
        let rest = per / p;
        let mut out = Tensor::zeros(&gs);
        {
            let gv = self.value(g);
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            par::for_each_chunk_mut(out.data_mut(), per, |i, o| {
                gemm(p, p, rest, wv, false, gv.slab(i), false, o, false);
                for (q, row) in o.chunks_mut(rest).enumerate() {
                    for v in row {
                        *v += bv[q];
                    }
                }
            });
        }
        self.push(out, Op::LandmarkMix { g, w, b })
    }

    /// `[N, C, H, W] → [N, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(a));
        let hw = h * w;
        let data = self
            .value(a)
            .data()
            .chunks(hw)
            .map(|m| m.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::from_vec(&[n, c], data).unwrap();
        self.push(out, Op::GlobalAvgPool(a))
    }

    /// Per-group linear map: `x: [N, P·C]`, `w: [P, C]`, `b: [P]` → `[N, P]`.
    pub fn group_linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (n, p, c) = (xs[0], ws[0], ws[1]);
        assert_eq!(xs[1], p * c, "group_linear width");
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = Tensor::zeros(&[n, p]);
        for i in 0..n {
            for pi in 0..p {
                let xr = &xv[i * p * c + pi * c..i * p * c + (pi + 1) * c];
                let wr = &wv[pi * c..(pi + 1) * c];
                out.data_mut()[i * p + pi] =
                    bv[pi] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        self.push(out, Op::GroupLinear { x, w, b })
    }

    /// `z = local + alpha ⊙ context` with `alpha: [P]` broadcast over the batch.
    pub fn gate(&mut self, local: Var, context: Var, alpha: Var) -> Var {
        let lv = self.value(local);
        let cv = self.value(context);
        let av = self.value(alpha).data();
        assert_eq!(lv.shape(), cv.shape());
        let p = lv.shape()[1];
        assert_eq!(av.len(), p);
        let data = lv
            .data()
            .iter()
            .zip(cv.data())
            .enumerate()
            .map(|(i, (l, c))| l + av[i % p] * c)
            .collect();
        let out = Tensor::from_vec(lv.shape(), data).unwrap();
        self.push(
            out,
            Op::Gate {
                local,
                context,
                alpha,
            },
        )
    }

    /// `Σ_n weights[n] Σ (x[n] − target[n])²`, a one-element tensor.
    pub fn sum_sq_diff(&mut self, x: Var, target: Arc<Tensor>, weights: Arc<Vec<f64>>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "sum_sq_diff shapes");
        let n = xv.shape()[0];
        assert_eq!(weights.len(), n);
        let per = xv.stride0();
        let mut total = 0.0;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let s: f64 = xv
                .slab(i)
                .iter()
                .zip(&target.data()[i * per..(i + 1) * per])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += weights[i] * s;
        }
        self.push(Tensor::scalar(total), Op::SumSqDiff { x, target, weights })
    }

    /// `Σ_n weights[n] Σ_p BCE(p[n, p], labels[n, p])` with probabilities
    /// clamped to `[BCE_EPS, 1 − BCE_EPS]`.
    pub fn bce(&mut self, p: Var, labels: Arc<Tensor>, weights: Arc<Vec<f64>>) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.shape(), labels.shape(), "bce shapes");
        let n = pv.shape()[0];
        assert_eq!(weights.len(), n);
        let per = pv.stride0();
        let mut total = 0.0;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let s: f64 = pv
                .slab(i)
                .iter()
                .zip(&labels.data()[i * per..(i + 1) * per])
                .map(|(&q, &y)| {
                    let q = q.clamp(BCE_EPS, 1.0 - BCE_EPS);
                    -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
                })
                .sum();
            total += weights[i] * s;
        }
        self.push(Tensor::scalar(total), Op::Bce { p, labels, weights })
    }

    /// Weighted sum of one-element tensors.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, w)| w * self.value(v).item()).sum();
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()))
    }

    /// Reverse pass from a one-element `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, cin, h, wd) = dims4(xv);
                let ws = wv.shape();
                let (cout, k) = (ws[0], ws[2]);
                let (_, _, ho, wo) = dims4(y);
                let l = ho * wo;
                let kk = cin * k * k;
                let direct = k == 1 && *stride == 1 && *pad == 0;
                let (stride, pad) = (*stride, *pad);
                let per_sample: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(n, |s| {
                    let dys = dy.slab(s);
                    let xs = xv.slab(s);
                    let mut dw = vec![0.0; cout * kk];
                    let mut dx = vec![0.0; cin * h * wd];
                    if direct {
                        gemm(cout, l, kk, dys, false, xs, true, &mut dw, false);
                        gemm(kk, cout, l, wv.data(), true, dys, false, &mut dx, false);
                    } else {
                        let mut col = vec![0.0; kk * l];
                        im2col(xs, cin, h, wd, k, stride, pad, ho, wo, &mut col);
                        gemm(cout, l, kk, dys, false, &col, true, &mut dw, false);
                        gemm(kk, cout, l, wv.data(), true, dys, false, &mut col, false);
                        col2im(&col, cin, h, wd, k, stride, pad, ho, wo, &mut dx);
                    }
                    (dw, dx)
                });
                let mut dx_all = Vec::with_capacity(n * cin * h * wd);
                let mut dws = Vec::with_capacity(n);
                for (dw, dx) in per_sample {
                    dws.push(dw);
                    dx_all.extend_from_slice(&dx);
                }
                accumulate(grads, *w, reduce_in_order(dws, ws));
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx_all).unwrap());
                if let Some(b) = b {
                    let mut db = vec![0.0; cout];
                    for s in 0..n {
                        for (c, row) in dy.slab(s).chunks(l).enumerate() {
                            db[c] += row.iter().sum::<f64>();
                        }
                    }
                    accumulate(grads, *b, Tensor::from_vec(&[cout], db).unwrap());
                }
            }
            Op::Depthwise { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, ch, h, wd) = dims4(xv);
                let k = wv.shape()[1];
                let per_sample: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(n, |s| {
                    let xs = xv.slab(s);
                    let dys = dy.slab(s);
                    let mut dw = vec![0.0; ch * k * k];
                    let mut dx = vec![0.0; ch * h * wd];
                    for c in 0..ch {
                        let plane = &xs[c * h * wd..(c + 1) * h * wd];
                        let g = &dys[c * h * wd..(c + 1) * h * wd];
                        let ker = &wv.data()[c * k * k..(c + 1) * k * k];
                        let dker = &mut dw[c * k * k..(c + 1) * k * k];
                        let dplane = &mut dx[c * h * wd..(c + 1) * h * wd];
                        for_each_tap(h, wd, k, |y, iy, ki, kj, x0, x1, sx0| {
                            let kv = ker[ki * k + kj];
                            let go = &g[y * wd + x0..y * wd + x1];
                            let src = &plane[iy * wd + sx0..iy * wd + sx0 + (x1 - x0)];
                            dker[ki * k + kj] += go.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                            let dst = &mut dplane[iy * wd + sx0..iy * wd + sx0 + (x1 - x0)];
                            for (d, gv) in dst.iter_mut().zip(go) {
                                *d += gv * kv;
                            }
                        });
                    }
                    (dw, dx)
                });
                let mut dx_all = Vec::with_capacity(n * ch * h * wd);
                let mut dws = Vec::with_capacity(n);
                for (dw, dx) in per_sample {
                    dws.push(dw);
                    dx_all.extend_from_slice(&dx);
                }
                accumulate(grads, *w, reduce_in_order(dws, wv.shape()));
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx_all).unwrap());
                if let Some(b) = b {
                    let hw = h * wd;
                    let mut db = vec![0.0; ch];
                    for s in 0..n {
                        for (c, row) in dy.slab(s).chunks(hw).enumerate() {
                            db[c] += row.iter().sum::<f64>();
                        }
                    }
                    accumulate(grads, *b, Tensor::from_vec(&[ch], db).unwrap());
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, dy.clone());
                accumulate(grads, *b, dy.clone());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da: Vec<f64> = dy.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = dy.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                accumulate(grads, *a, Tensor::from_vec(av.shape(), da).unwrap());
                accumulate(grads, *b, Tensor::from_vec(bv.shape(), db).unwrap());
            }
            Op::Scale(a, s) => {
                accumulate(grads, *a, dy.map(|g| g * s));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let d = dy
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, Tensor::from_vec(av.shape(), d).unwrap());
            }
            Op::Sigmoid(a) => {
                let d = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                accumulate(grads, *a, Tensor::from_vec(y.shape(), d).unwrap());
            }
            Op::AvgPool2(a) => {
                let (n, c, h, w) = dims4(self.value(*a));
                let (h2, w2) = (h / 2, w / 2);
                let mut d = Tensor::zeros(&[n, c, h, w]);
                for (pi, g) in dy.data().chunks(h2 * w2).enumerate() {
                    let p = &mut d.data_mut()[pi * h * w..(pi + 1) * h * w];
                    for yy in 0..h {
                        for xx in 0..w {
                            p[yy * w + xx] = 0.25 * g[(yy / 2) * w2 + xx / 2];
                        }
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::Upsample2(a) => {
                let (n, c, h, w) = dims4(self.value(*a));
                let (h2, w2) = (h * 2, w * 2);
                let mut d = Tensor::zeros(&[n, c, h, w]);
                for (pi, g) in dy.data().chunks(h2 * w2).enumerate() {
                    let p = &mut d.data_mut()[pi * h * w..(pi + 1) * h * w];
                    for yy in 0..h2 {
                        for xx in 0..w2 {
                            p[(yy / 2) * w + xx / 2] += g[yy * w2 + xx];
                        }
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::SpatialSoftmax { x, inv_temp } => {
                let (_, _, h, w) = dims4(y);
                let hw = h * w;
                let mut d = Tensor::zeros(y.shape());
                for ((dst, g), s) in d
                    .data_mut()
                    .chunks_mut(hw)
                    .zip(dy.data().chunks(hw))
                    .zip(y.data().chunks(hw))
                {
                    let dot: f64 = g.iter().zip(s).map(|(a, b)| a * b).sum();
                    for ((o, gi), si) in dst.iter_mut().zip(g).zip(s) {
                        *o = inv_temp * si * (gi - dot);
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::Expectation(att) => {
                let (n, c, h, w) = dims4(self.value(*att));
                let mut d = Tensor::zeros(&[n, c, h, w]);
                let (cu, cv) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
                for (pi, g) in dy.data().chunks(2).enumerate() {
                    let p = &mut d.data_mut()[pi * h * w..(pi + 1) * h * w];
                    for yy in 0..h {
                        for xx in 0..w {
                            p[yy * w + xx] = g[0] * (xx as f64 - cu) + g[1] * (yy as f64 - cv);
                        }
                    }
                }
                accumulate(grads, *att, d);
            }
            Op::GatherSum { x, groups } => {
                let (n, ce, h, w) = dims4(self.value(*x));
                let hw = h * w;
                let p = groups.len();
                let mut d = Tensor::zeros(&[n, ce, h, w]);
                for s in 0..n {
                    for (pi, members) in groups.iter().enumerate() {
                        let g = &dy.data()[(s * p + pi) * hw..(s * p + pi + 1) * hw];
                        for &e in members {
                            let dst = &mut d.data_mut()[(s * ce + e) * hw..(s * ce + e + 1) * hw];
                            for (o, gi) in dst.iter_mut().zip(g) {
                                *o += gi;
                            }
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::Concat(parts) => {
                let (n, total, h, w) = dims4(y);
                let hw = h * w;
                let mut off = 0;
                for &v in parts {
                    let c = dims4(self.value(v)).1;
                    let mut d = Tensor::zeros(self.value(v).shape());
                    for s in 0..n {
                        d.slab_mut(s).copy_from_slice(
                            &dy.data()[(s * total + off) * hw..(s * total + off + c) * hw],
                        );
                    }
                    accumulate(grads, v, d);
                    off += c;
                }
            }
            Op::OuterMul { att, feat } => {
                let av = self.value(*att);
                let fv = self.value(*feat);
                let (n, p, h, w) = dims4(av);
                let c = dims4(fv).1;
                let hw = h * w;
                let parts: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(n, |s| {
                    let a = av.slab(s);
                    let f = fv.slab(s);
                    let g = dy.slab(s);
                    let mut da = vec![0.0; p * hw];
                    let mut df = vec![0.0; c * hw];
                    for pi in 0..p {
                        for ci in 0..c {
                            let gr = &g[(pi * c + ci) * hw..(pi * c + ci + 1) * hw];
                            let fr = &f[ci * hw..(ci + 1) * hw];
                            let ar = &a[pi * hw..(pi + 1) * hw];
                            for j in 0..hw {
                                da[pi * hw + j] += gr[j] * fr[j];
                                df[ci * hw + j] += gr[j] * ar[j];
                            }
                        }
                    }
                    (da, df)
                });
                let mut da_all = Vec::with_capacity(av.len());
                let mut df_all = Vec::with_capacity(fv.len());
                for (da, df) in parts {
                    da_all.extend_from_slice(&da);
                    df_all.extend_from_slice(&df);
                }
                accumulate(grads, *att, Tensor::from_vec(av.shape(), da_all).unwrap());
                accumulate(grads, *feat, Tensor::from_vec(fv.shape(), df_all).unwrap());
            }
            Op::LandmarkMix { g, w, b } => {
                let gv = self.value(*g);
                let wv = self.value(*w);
                let n = gv.shape()[0];
                let p = wv.shape()[0];
                let per = gv.stride0();
                let rest = per / p;
                let parts: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(n, |s| {
                    let mut dw = vec![0.0; p * p];
                    let mut dg = vec![0.0; per];
                    gemm(p, rest, p, dy.slab(s), false, gv.slab(s), true, &mut dw, false);
                    gemm(p, p, rest, wv.data(), true, dy.slab(s), false, &mut dg, false);
                    (dw, dg)
                });
                let mut dg_all = Vec::with_capacity(gv.len());
                let mut dws = Vec::with_capacity(n);
                for (dw, dg) in parts {
                    dws.push(dw);
                    dg_all.extend_from_slice(&dg);
                }
                let mut db = vec![0.0; p];
                for s in 0..n {
                    for (q, row) in dy.slab(s).chunks(rest).enumerate() {
                        db[q] += row.iter().sum::<f64>();
                    }
                }
                accumulate(grads, *w, reduce_in_order(dws, wv.shape()));
                accumulate(grads, *b, Tensor::from_vec(&[p], db).unwrap());
                accumulate(grads, *g, Tensor::from_vec(gv.shape(), dg_all).unwrap());
            }
            Op::GlobalAvgPool(a) => {
                let (n, c, h, w) = dims4(self.value(*a));
                let hw = h * w;
                let mut d = Tensor::zeros(&[n, c, h, w]);
                for (dst, g) in d.data_mut().chunks_mut(hw).zip(dy.data()) {
                    dst.fill(g / hw as f64);
                }
                accumulate(grads, *a, d);
            }
            Op::GroupLinear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (p, c) = (wv.shape()[0], wv.shape()[1]);
                let n = xv.shape()[0];
                let mut dx = Tensor::zeros(xv.shape());
                let mut dw = Tensor::zeros(wv.shape());
                let mut db = Tensor::zeros(&[p]);
                for s in 0..n {
                    for pi in 0..p {
                        let g = dy.data()[s * p + pi];
                        db.data_mut()[pi] += g;
                        for ci in 0..c {
                            let xi = s * p * c + pi * c + ci;
                            dw.data_mut()[pi * c + ci] += g * xv.data()[xi];
                            dx.data_mut()[xi] = g * wv.data()[pi * c + ci];
                        }
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                accumulate(grads, *b, db);
            }
            Op::Gate {
                local,
                context,
                alpha,
            } => {
                let cv = self.value(*context);
                let av = self.value(*alpha);
                let p = av.len();
                let dc = dy
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * av.data()[i % p])
                    .collect();
                let mut da = vec![0.0; p];
                for (i, (g, c)) in dy.data().iter().zip(cv.data()).enumerate() {
                    da[i % p] += g * c;
                }
                accumulate(grads, *local, dy.clone());
                accumulate(grads, *context, Tensor::from_vec(cv.shape(), dc).unwrap());
                accumulate(grads, *alpha, Tensor::from_vec(av.shape(), da).unwrap());
            }
            Op::SumSqDiff { x, target, weights } => {
                let xv = self.value(*x);
                let g0 = dy.item();
                let per = xv.stride0();
                let d = xv
                    .data()
                    .iter()
                    .zip(target.data())
                    .enumerate()
                    .map(|(i, (a, t))| 2.0 * g0 * weights[i / per] * (a - t))
                    .collect();
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), d).unwrap());
            }
            Op::Bce { p, labels, weights } => {
                let pv = self.value(*p);
                let g0 = dy.item();
                let per = pv.stride0();
                let d = pv
                    .data()
                    .iter()
                    .zip(labels.data())
                    .enumerate()
                    .map(|(i, (&q, &l))| {
                        if !(BCE_EPS..=1.0 - BCE_EPS).contains(&q) {
                            0.0
                        } else {
                            g0 * weights[i / per] * (-l / q + (1.0 - l) / (1.0 - q))
                        }
                    })
                    .collect();
                accumulate(grads, *p, Tensor::from_vec(pv.shape(), d).unwrap());
            }
            Op::WeightedSum(terms) => {
                let g0 = dy.item();
                for &(v, w) in terms {
                    accumulate(grads, v, Tensor::scalar(g0 * w));
                }
            }
        }
    }
}

/// `c + Σ_i (i − c)·m_i` with `c = (len − 1)/2`, summing mirrored pairs as
/// `(i − c)·(m_i − m_mirror)`.
fn centred_moment(m: &[f64]) -> f64 {
    let len = m.len();
    let c = (len as f64 - 1.0) / 2.0;
    let mut acc = 0.0;
    for i in 0..len / 2 {
        acc += (i as f64 - c) * (m[i] - m[len - 1 - i]);
    }
    c + acc
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, d: Tensor) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to any recorded node (`None` if the node does not
    /// influence the root).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients collected per parameter slot; a slot used several times has
    /// its contributions summed in tape order.
    pub fn param_grads(&self, graph: &Graph, num_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..num_params).map(|_| None).collect();
        for (i, node) in graph.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = self.grads.get(i).and_then(|g| g.as_ref()) {
                    match &mut out[id] {
                        Some(acc) => acc.add_assign(g),
                        slot @ None => *slot = Some(g.clone()),
                    }
                }
            }
        }
        out
    }
}
