//! Reverse-mode automatic differentiation over a per-sample computation
//! graph.
//!
//! Feature maps are `[C, H, W]` and token matrices are `[N, D]`, both
//! row-major. Nodes are appended in evaluation order, so reverse creation
//! order is a valid backward schedule.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Strides, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Self { stride, pad, groups }
    }

    /// Stride 1 with the padding that keeps the spatial size for an odd kernel.
    pub const fn same(kernel: usize) -> Self {
        Self::new(1, kernel / 2, 1)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Neighbor order of [`Graph::neighbor_similarity`]: NW, N, NE, W, E, SW, S, SE.
pub const NEIGHBORS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: ConvSpec,
        cols: Vec<f64>,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    LayerNorm {
        x: usize,
        g: usize,
        b: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(usize),
    Sigmoid(usize),
    Add(usize, usize),
    Mul(usize, usize),
    ToTokens(usize),
    ToChw(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Resize(usize),
    Concat(Vec<usize>),
    Gap(usize),
    ScaleChannels {
        x: usize,
        g: usize,
    },
    NeighborSim(usize),
    Deform {
        f: usize,
        o: usize,
        groups: usize,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Leaf gradients left after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Source taps `(i0, i1, frac)` for half-pixel-centred bilinear resizing.
fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Border-clamped bilinear position: `(lo, hi, frac, inside)` where `inside`
/// is false when the coordinate was clamped.
fn clamp_tap(pos: f64, n: usize) -> (usize, usize, f64, bool) {
    let max = (n - 1) as f64;
    let inside = (0.0..=max).contains(&pos);
    let p = pos.clamp(0.0, max);
    let lo = (p.floor() as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    (lo, hi, p - lo as f64, inside)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn direct(&self, spec: ConvSpec) -> bool {
        self.k == 1 && spec.stride == 1 && spec.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, spec: ConvSpec) -> Vec<f64> {
    let p = g.ho * g.wo;
    let mut cols = vec![0.0; g.c * g.k * g.k * p];
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.ho {
                    let ii = (oi * spec.stride + ki) as isize - spec.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ci * g.h + ii as usize) * g.w..][..g.w];
                    for oj in 0..g.wo {
                        let jj = (oj * spec.stride + kj) as isize - spec.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[oi * g.wo + oj] = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, spec: ConvSpec, dx: &mut [f64]) {
    let p = g.ho * g.wo;
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..g.ho {
                    let ii = (oi * spec.stride + ki) as isize - spec.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * g.h + ii as usize) * g.w..][..g.w];
                    for oj in 0..g.wo {
                        let jj = (oj * spec.stride + kj) as isize - spec.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.val(v.0)
    }

    fn val(&self, i: usize) -> &Tensor {
        match (&self.nodes[i].value, &self.nodes[i].op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("only parameter nodes borrow their value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[usize]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is retained by [`Graph::backward`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn conv_geom(&self, x: usize, w: usize, spec: ConvSpec) -> ConvGeom {
        let xs = self.val(x).shape();
        let ws = self.val(w).shape();
        assert!(xs.len() == 3 && ws.len() == 4 && ws[2] == ws[3], "conv expects [C,H,W] and [O,C/g,k,k]");
        let (c, h, wd, k) = (xs[0], xs[1], xs[2], ws[2]);
        assert!(h + 2 * spec.pad >= k && wd + 2 * spec.pad >= k, "conv kernel larger than padded input");
        ConvGeom {
            c,
            h,
            w: wd,
            k,
            ho: (h + 2 * spec.pad - k) / spec.stride + 1,
            wo: (wd + 2 * spec.pad - k) / spec.stride + 1,
        }
    }

    /// 2-D convolution; `groups` is 1 (dense) or the channel count
    /// (depthwise).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let g = self.conv_geom(x.0, w.0, spec);
        let ws = self.val(w.0).shape().to_vec();
        let o = ws[0];
        let p = g.ho * g.wo;
        let mut out = vec![0.0; o * p];
        let mut cols = Vec::new();
        let xd = self.val(x.0).data();
        let wd = self.val(w.0).data();
        if spec.groups == 1 {
            assert_eq!(ws[1], g.c, "conv input channels");
            let kk = g.c * g.k * g.k;
            if !g.direct(spec) {
                cols = im2col(xd, &g, spec);
            }
            let src = if g.direct(spec) { xd } else { &cols };
            gemm(o, kk, p, 1.0, wd, Strides::row_major(kk), src, Strides::row_major(p), 0.0, &mut out, Strides::row_major(p));
        } else {
            assert!(spec.groups == g.c && o == g.c && ws[1] == 1, "only dense and depthwise convolutions are supported");
            for c in 0..g.c {
                let xc = &xd[c * g.h * g.w..][..g.h * g.w];
                let wc = &wd[c * g.k * g.k..][..g.k * g.k];
                let oc = &mut out[c * p..][..p];
                for oi in 0..g.ho {
                    for ki in 0..g.k {
                        let ii = (oi * spec.stride + ki) as isize - spec.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let row = &xc[ii as usize * g.w..][..g.w];
                        for kj in 0..g.k {
                            let wv = wc[ki * g.k + kj];
                            for oj in 0..g.wo {
                                let jj = (oj * spec.stride + kj) as isize - spec.pad as isize;
                                if jj >= 0 && jj < g.w as isize {
                                    oc[oi * g.wo + oj] += wv * row[jj as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = b {
            let bd = self.val(b.0).data();
            assert_eq!(bd.len(), o, "conv bias length");
            for (oc, bv) in out.chunks_mut(p).zip(bd) {
                oc.iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut parents = vec![x.0, w.0];
        parents.extend(b.map(|b| b.0));
        self.push(
            Tensor::new(vec![o, g.ho, g.wo], out),
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                spec,
                cols,
            },
            &parents,
        )
    }

    /// `x [N, Din] -> x W^T + b` with `W [Dout, Din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.val(x.0).shape();
        let ws = self.val(w.0).shape();
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1], "linear shapes {xs:?} x {ws:?}");
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * dout];
        gemm(
            n,
            din,
            dout,
            1.0,
            self.val(x.0).data(),
            Strides::row_major(din),
            self.val(w.0).data(),
            Strides::transposed(din),
            0.0,
            &mut out,
            Strides::row_major(dout),
        );
        if let Some(b) = b {
            let bd = self.val(b.0).data();
            assert_eq!(bd.len(), dout);
            for row in out.chunks_mut(dout) {
                add_into(row, bd);
            }
        }
        let mut parents = vec![x.0, w.0];
        parents.extend(b.map(|b| b.0));
        self.push(
            Tensor::new(vec![n, dout], out),
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            &parents,
        )
    }

    /// Normalizes each row of `x [N, D]`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let xs = self.val(x.0).shape();
        assert_eq!(xs.len(), 2);
        let (n, d) = (xs[0], xs[1]);
        let xd = self.val(x.0).data();
        let gd = self.val(g.0).data();
        let bd = self.val(b.0).data();
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xd[r * d..][..d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gd[j] + bd[j];
            }
        }
        self.push(
            Tensor::new(vec![n, d], out),
            Op::LayerNorm {
                x: x.0,
                g: g.0,
                b: b.0,
                xhat,
                rstd,
            },
            &[x.0, g.0, b.0],
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.val(x.0);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| gelu(v).0).collect());
        self.push(out, Op::Gelu(x.0), &[x.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.val(x.0);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| sigmoid(v)).collect());
        self.push(out, Op::Sigmoid(x.0), &[x.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        assert_eq!(ta.shape(), tb.shape(), "add shapes");
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect());
        self.push(out, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        assert_eq!(ta.shape(), tb.shape(), "mul shapes");
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect());
        self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    /// `[C, H, W] -> [H*W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let t = self.val(x.0);
        let (c, hw) = (t.dim(0), t.dim(1) * t.dim(2));
        let mut out = vec![0.0; c * hw];
        for ci in 0..c {
            for p in 0..hw {
                out[p * c + ci] = t.data()[ci * hw + p];
            }
        }
        self.push(Tensor::new(vec![hw, c], out), Op::ToTokens(x.0), &[x.0])
    }

    /// `[H*W, C] -> [C, H, W]`.
    pub fn to_chw(&mut self, x: Var, h: usize, w: usize) -> Var {
        let t = self.val(x.0);
        let (hw, c) = (t.dim(0), t.dim(1));
        assert_eq!(hw, h * w, "token count");
        let mut out = vec![0.0; c * hw];
        for p in 0..hw {
            for ci in 0..c {
                out[ci * hw + p] = t.data()[p * c + ci];
            }
        }
        self.push(Tensor::new(vec![c, h, w], out), Op::ToChw(x.0), &[x.0])
    }

    /// Multi-head scaled dot-product attention of `q [N, D]` over
    /// `k, v [M, D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (n, d) = (self.val(q.0).dim(0), self.val(q.0).dim(1));
        let m = self.val(k.0).dim(0);
        assert!(d % heads == 0 && self.val(k.0).dim(1) == d && self.val(v.0).shape() == [m, d]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * d];
        let (qd, kd, vd) = (self.val(q.0).data(), self.val(k.0).data(), self.val(v.0).data());
        for h in 0..heads {
            let p = &mut probs[h * n * m..][..n * m];
            gemm(n, dh, m, scale, &qd[h * dh..], Strides(d, 1), &kd[h * dh..], Strides(1, d), 0.0, p, Strides::row_major(m));
            for row in p.chunks_mut(m) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
            gemm(n, m, dh, 1.0, p, Strides::row_major(m), &vd[h * dh..], Strides(d, 1), 0.0, &mut out[h * dh..], Strides(d, 1));
        }
        self.push(
            Tensor::new(vec![n, d], out),
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                probs,
            },
            &[q.0, k.0, v.0],
        )
    }

    /// Bilinear resize of `[C, H, W]` with half-pixel centres and edge clamp.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let t = self.val(x.0);
        let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
        if (h, w) == (oh, ow) {
            return x;
        }
        let ty = resize_taps(h, oh);
        let tx = resize_taps(w, ow);
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            let src = &t.data()[ci * h * w..][..h * w];
            for (oi, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (oj, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let top = (1.0 - lx) * src[y0 * w + x0] + lx * src[y0 * w + x1];
                    let bot = (1.0 - lx) * src[y1 * w + x0] + lx * src[y1 * w + x1];
                    out[(ci * oh + oi) * ow + oj] = (1.0 - ly) * top + ly * bot;
                }
            }
        }
        self.push(Tensor::new(vec![c, oh, ow], out), Op::Resize(x.0), &[x.0])
    }

    /// Channel concatenation of `[C_i, H, W]` maps.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let (h, w) = (self.val(xs[0].0).dim(1), self.val(xs[0].0).dim(2));
        let mut data = Vec::new();
        let mut c = 0;
        for x in xs {
            let t = self.val(x.0);
            assert_eq!((t.dim(1), t.dim(2)), (h, w), "concat spatial dims");
            c += t.dim(0);
            data.extend_from_slice(t.data());
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        self.push(Tensor::new(vec![c, h, w], data), Op::Concat(ids.clone()), &ids)
    }

    /// Spatial mean: `[C, H, W] -> [1, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.val(x.0);
        let (c, hw) = (t.dim(0), t.dim(1) * t.dim(2));
        let out = t.data().chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
        self.push(Tensor::new(vec![1, c], out), Op::Gap(x.0), &[x.0])
    }

    /// Multiplies channel `c` of `x [C, H, W]` by `g[c]`.
    pub fn scale_channels(&mut self, x: Var, g: Var) -> Var {
        let t = self.val(x.0);
        let gd = self.val(g.0).data();
        let (c, hw) = (t.dim(0), t.dim(1) * t.dim(2));
        assert_eq!(gd.len(), c, "one gate per channel");
        let mut out = t.data().to_vec();
        for (ch, gv) in out.chunks_mut(hw).zip(gd) {
            ch.iter_mut().for_each(|v| *v *= gv);
        }
        self.push(Tensor::new(t.shape().to_vec(), out), Op::ScaleChannels { x: x.0, g: g.0 }, &[x.0, g.0])
    }

    /// Cosine similarity of every pixel with its 8 neighbors in
    /// [`NEIGHBORS`] order, replicating edge pixels: `[C, H, W] -> [8, H, W]`.
    /// A zero-norm vector has similarity 0.
    pub fn neighbor_similarity(&mut self, z: Var) -> Var {
        let t = self.val(z.0);
        let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
        let hw = h * w;
        let norms = pixel_norms(t.data(), c, hw);
        let mut out = vec![0.0; 8 * hw];
        let mut zero_norm = false;
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                for (k, &(di, dj)) in NEIGHBORS.iter().enumerate() {
                    let q = neighbor(i, j, di, dj, h, w);
                    if norms[p] == 0.0 || norms[q] == 0.0 {
                        zero_norm = true;
                        continue;
                    }
                    let dot: f64 = (0..c).map(|ci| t.data()[ci * hw + p] * t.data()[ci * hw + q]).sum();
                    out[k * hw + p] = dot / (norms[p] * norms[q]);
                }
            }
        }
        if zero_norm {
            log::debug!("zero-norm feature vector in neighbor similarity; similarity set to 0");
        }
        self.push(Tensor::new(vec![8, h, w], out), Op::NeighborSim(z.0), &[z.0])
    }

    /// Samples group `g` of `f [C, H, W]` at `(i + o[2g], j + o[2g+1])` by
    /// bilinear interpolation with border clamping.
    pub fn deform_resample(&mut self, f: Var, o: Var, groups: usize) -> Var {
        let ft = self.val(f.0);
        let ot = self.val(o.0);
        let (c, h, w) = (ft.dim(0), ft.dim(1), ft.dim(2));
        assert!(c % groups == 0, "groups must divide channels");
        assert_eq!(ot.shape(), [2 * groups, h, w], "offsets shaped [2G, H, W]");
        let cg = c / groups;
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        for g in 0..groups {
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    let (y0, y1, wy, _) = clamp_tap(i as f64 + ot.data()[2 * g * hw + p], h);
                    let (x0, x1, wx, _) = clamp_tap(j as f64 + ot.data()[(2 * g + 1) * hw + p], w);
                    for ci in g * cg..(g + 1) * cg {
                        let s = &ft.data()[ci * hw..][..hw];
                        let top = (1.0 - wx) * s[y0 * w + x0] + wx * s[y0 * w + x1];
                        let bot = (1.0 - wx) * s[y1 * w + x0] + wx * s[y1 * w + x1];
                        out[ci * hw + p] = (1.0 - wy) * top + wy * bot;
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![c, h, w], out),
            Op::Deform {
                f: f.0,
                o: o.0,
                groups,
            },
            &[f.0, o.0],
        )
    }

    /// Back-propagates the seed gradients and returns the gradients of every
    /// parameter and gradient-tracking input.
    pub fn backward(&self, seeds: &[(Var, &[f64])]) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, s) in seeds {
            assert_eq!(s.len(), self.val(v.0).len(), "seed gradient length");
            match &mut grads[v.0] {
                Some(g) => add_into(g, s),
                slot => *slot = Some(s.to_vec()),
            }
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            for (p, g) in self.backward_node(i, &gout) {
                match &mut grads[p] {
                    Some(acc) => add_into(acc, &g),
                    slot => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }

    /// Adds parameter gradients into `into`, indexed like the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients, into: &mut [Vec<f64>]) {
        for (i, n) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&n.op, &grads.grads[i]) {
                add_into(&mut into[id.index()], g);
            }
        }
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn backward_node(&self, i: usize, gout: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv { x, w, b, spec, cols } => self.conv_backward(*x, *w, *b, *spec, cols, gout, &mut out),
            Op::Linear { x, w, b } => {
                let (n, din) = (self.val(*x).dim(0), self.val(*x).dim(1));
                let dout = self.val(*w).dim(0);
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * din];
                    gemm(
                        n,
                        dout,
                        din,
                        1.0,
                        gout,
                        Strides::row_major(dout),
                        self.val(*w).data(),
                        Strides::row_major(din),
                        0.0,
                        &mut dx,
                        Strides::row_major(din),
                    );
                    out.push((*x, dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; dout * din];
                    gemm(
                        dout,
                        n,
                        din,
                        1.0,
                        gout,
                        Strides::transposed(dout),
                        self.val(*x).data(),
                        Strides::row_major(din),
                        0.0,
                        &mut dw,
                        Strides::row_major(din),
                    );
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let mut db = vec![0.0; dout];
                    for row in gout.chunks(dout) {
                        add_into(&mut db, row);
                    }
                    out.push((b, db));
                }
            }
            Op::LayerNorm { x, g, b, xhat, rstd } => {
                let d = self.val(*g).len();
                let gd = self.val(*g).data();
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut dx = vec![0.0; gout.len()];
                for (r, rs) in rstd.iter().enumerate() {
                    let dy = &gout[r * d..][..d];
                    let xh = &xhat[r * d..][..d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        dg[j] += dy[j] * xh[j];
                        db[j] += dy[j];
                        let dxh = dy[j] * gd[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rs * (dy[j] * gd[j] - m1 - xh[j] * m2);
                    }
                }
                out.push((*x, dx));
                out.push((*g, dg));
                out.push((*b, db));
            }
            Op::Gelu(x) => {
                let xd = self.val(*x).data();
                out.push((*x, xd.iter().zip(gout).map(|(&v, g)| g * gelu(v).1).collect()));
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.as_ref().expect("owned").data();
                out.push((*x, y.iter().zip(gout).map(|(s, g)| g * s * (1.0 - s)).collect()));
            }
            Op::Add(a, b) => {
                out.push((*a, gout.to_vec()));
                out.push((*b, gout.to_vec()));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                out.push((*a, gout.iter().zip(bd).map(|(g, y)| g * y).collect()));
                out.push((*b, gout.iter().zip(ad).map(|(g, x)| g * x).collect()));
            }
            Op::ToTokens(x) => {
                let t = self.val(*x);
                let (c, hw) = (t.dim(0), t.dim(1) * t.dim(2));
                let mut dx = vec![0.0; c * hw];
                for ci in 0..c {
                    for p in 0..hw {
                        dx[ci * hw + p] = gout[p * c + ci];
                    }
                }
                out.push((*x, dx));
            }
            Op::ToChw(x) => {
                let t = self.val(*x);
                let (hw, c) = (t.dim(0), t.dim(1));
                let mut dx = vec![0.0; c * hw];
                for p in 0..hw {
                    for ci in 0..c {
                        dx[p * c + ci] = gout[ci * hw + p];
                    }
                }
                out.push((*x, dx));
            }
            Op::Attention { q, k, v, heads, probs } => self.attention_backward(*q, *k, *v, *heads, probs, gout, &mut out),
            Op::Resize(x) => {
                let t = self.val(*x);
                let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
                let os = self.nodes[i].value.as_ref().expect("owned").shape();
                let (oh, ow) = (os[1], os[2]);
                let ty = resize_taps(h, oh);
                let tx = resize_taps(w, ow);
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..c {
                    let dst = &mut dx[ci * h * w..][..h * w];
                    for (oi, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (oj, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let g = gout[(ci * oh + oi) * ow + oj];
                            dst[y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
                            dst[y0 * w + x1] += g * (1.0 - ly) * lx;
                            dst[y1 * w + x0] += g * ly * (1.0 - lx);
                            dst[y1 * w + x1] += g * ly * lx;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Concat(ids) => {
                let mut off = 0;
                for &p in ids {
                    let n = self.val(p).len();
                    if self.wants(p) {
                        out.push((p, gout[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::Gap(x) => {
                let t = self.val(*x);
                let hw = t.dim(1) * t.dim(2);
                let mut dx = Vec::with_capacity(t.len());
                for g in gout {
                    dx.extend(std::iter::repeat_n(g / hw as f64, hw));
                }
                out.push((*x, dx));
            }
            Op::ScaleChannels { x, g } => {
                let t = self.val(*x);
                let gd = self.val(*g).data();
                let hw = t.dim(1) * t.dim(2);
                let mut dx = gout.to_vec();
                let mut dg = vec![0.0; gd.len()];
                for c in 0..gd.len() {
                    let go = &gout[c * hw..][..hw];
                    let xc = &t.data()[c * hw..][..hw];
                    dg[c] = go.iter().zip(xc).map(|(a, b)| a * b).sum();
                    dx[c * hw..][..hw].iter_mut().for_each(|v| *v *= gd[c]);
                }
                out.push((*x, dx));
                out.push((*g, dg));
            }
            Op::NeighborSim(z) => {
                let t = self.val(*z);
                let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
                let hw = h * w;
                let zd = t.data();
                let norms = pixel_norms(zd, c, hw);
                let mut dz = vec![0.0; c * hw];
                for i in 0..h {
                    for j in 0..w {
                        let p = i * w + j;
                        for (k, &(di, dj)) in NEIGHBORS.iter().enumerate() {
                            let q = neighbor(i, j, di, dj, h, w);
                            let go = gout[k * hw + p];
                            if norms[p] == 0.0 || norms[q] == 0.0 || go == 0.0 {
                                continue;
                            }
                            let npq = norms[p] * norms[q];
                            let dot: f64 = (0..c).map(|ci| zd[ci * hw + p] * zd[ci * hw + q]).sum();
                            let cos = dot / npq;
                            let (ip, iq) = (1.0 / (norms[p] * norms[p]), 1.0 / (norms[q] * norms[q]));
                            for ci in 0..c {
                                let (zp, zq) = (zd[ci * hw + p], zd[ci * hw + q]);
                                dz[ci * hw + p] += go * (zq / npq - cos * zp * ip);
                                dz[ci * hw + q] += go * (zp / npq - cos * zq * iq);
                            }
                        }
                    }
                }
                out.push((*z, dz));
            }
            Op::Deform { f, o, groups } => {
                let ft = self.val(*f);
                let ot = self.val(*o);
                let (c, h, w) = (ft.dim(0), ft.dim(1), ft.dim(2));
                let (cg, hw) = (c / groups, h * w);
                let mut df = vec![0.0; c * hw];
                let mut dof = vec![0.0; 2 * groups * hw];
                for g in 0..*groups {
                    for i in 0..h {
                        for j in 0..w {
                            let p = i * w + j;
                            let (y0, y1, wy, yin) = clamp_tap(i as f64 + ot.data()[2 * g * hw + p], h);
                            let (x0, x1, wx, xin) = clamp_tap(j as f64 + ot.data()[(2 * g + 1) * hw + p], w);
                            let (mut gy, mut gx) = (0.0, 0.0);
                            for ci in g * cg..(g + 1) * cg {
                                let go = gout[ci * hw + p];
                                let s = &ft.data()[ci * hw..][..hw];
                                let (f00, f01, f10, f11) = (s[y0 * w + x0], s[y0 * w + x1], s[y1 * w + x0], s[y1 * w + x1]);
                                let d = &mut df[ci * hw..][..hw];
                                d[y0 * w + x0] += go * (1.0 - wy) * (1.0 - wx);
                                d[y0 * w + x1] += go * (1.0 - wy) * wx;
                                d[y1 * w + x0] += go * wy * (1.0 - wx);
                                d[y1 * w + x1] += go * wy * wx;
                                gy += go * ((1.0 - wx) * (f10 - f00) + wx * (f11 - f01));
                                gx += go * ((1.0 - wy) * (f01 - f00) + wy * (f11 - f10));
                            }
                            if yin {
                                dof[2 * g * hw + p] = gy;
                            }
                            if xin {
                                dof[(2 * g + 1) * hw + p] = gx;
                            }
                        }
                    }
                }
                out.push((*f, df));
                out.push((*o, dof));
            }
        }
        out.retain(|(p, _)| self.wants(*p));
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: ConvSpec,
        cols: &[f64],
        gout: &[f64],
        out: &mut Vec<(usize, Vec<f64>)>,
    ) {
        let g = self.conv_geom(x, w, spec);
        let o = self.val(w).dim(0);
        let p = g.ho * g.wo;
        if let Some(b) = b.filter(|&b| self.wants(b)) {
            out.push((b, gout.chunks(p).map(|r| r.iter().sum()).collect()));
        }
        let xd = self.val(x).data();
        let wd = self.val(w).data();
        if spec.groups == 1 {
            let kk = g.c * g.k * g.k;
            let src = if g.direct(spec) { xd } else { cols };
            if self.wants(w) {
                let mut dw = vec![0.0; o * kk];
                gemm(o, p, kk, 1.0, gout, Strides::row_major(p), src, Strides::transposed(p), 0.0, &mut dw, Strides::row_major(kk));
                out.push((w, dw));
            }
            if self.wants(x) {
                let mut dcols = vec![0.0; kk * p];
                gemm(kk, o, p, 1.0, wd, Strides::transposed(kk), gout, Strides::row_major(p), 0.0, &mut dcols, Strides::row_major(p));
                if g.direct(spec) {
                    out.push((x, dcols));
                } else {
                    let mut dx = vec![0.0; g.c * g.h * g.w];
                    col2im(&dcols, &g, spec, &mut dx);
                    out.push((x, dx));
                }
            }
        } else {
            let mut dx = vec![0.0; g.c * g.h * g.w];
            let mut dw = vec![0.0; g.c * g.k * g.k];
            for c in 0..g.c {
                let xc = &xd[c * g.h * g.w..][..g.h * g.w];
                let wc = &wd[c * g.k * g.k..][..g.k * g.k];
                let gc = &gout[c * p..][..p];
                for oi in 0..g.ho {
                    for ki in 0..g.k {
                        let ii = (oi * spec.stride + ki) as isize - spec.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let ii = ii as usize;
                        for kj in 0..g.k {
                            let mut acc = 0.0;
                            let wv = wc[ki * g.k + kj];
                            for oj in 0..g.wo {
                                let jj = (oj * spec.stride + kj) as isize - spec.pad as isize;
                                if jj >= 0 && jj < g.w as isize {
                                    let go = gc[oi * g.wo + oj];
                                    acc += go * xc[ii * g.w + jj as usize];
                                    dx[c * g.h * g.w + ii * g.w + jj as usize] += go * wv;
                                }
                            }
                            dw[c * g.k * g.k + ki * g.k + kj] += acc;
                        }
                    }
                }
            }
            out.push((x, dx));
            out.push((w, dw));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: &[f64],
        gout: &[f64],
        out: &mut Vec<(usize, Vec<f64>)>,
    ) {
        let (n, d) = (self.val(q).dim(0), self.val(q).dim(1));
        let m = self.val(k).dim(0);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.val(q).data(), self.val(k).data(), self.val(v).data());
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; m * d];
        let mut dv = vec![0.0; m * d];
        let mut dp = vec![0.0; n * m];
        for h in 0..heads {
            let p = &probs[h * n * m..][..n * m];
            let go = &gout[h * dh..];
            gemm(m, n, dh, 1.0, p, Strides::transposed(m), go, Strides(d, 1), 0.0, &mut dv[h * dh..], Strides(d, 1));
            gemm(n, dh, m, 1.0, go, Strides(d, 1), &vd[h * dh..], Strides(1, d), 0.0, &mut dp, Strides::row_major(m));
            for (drow, prow) in dp.chunks_mut(m).zip(p.chunks(m)) {
                let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                drow.iter_mut().zip(prow).for_each(|(a, b)| *a = b * (*a - dot));
            }
            gemm(n, m, dh, scale, &dp, Strides::row_major(m), &kd[h * dh..], Strides(d, 1), 0.0, &mut dq[h * dh..], Strides(d, 1));
            gemm(m, n, dh, scale, &dp, Strides::transposed(m), &qd[h * dh..], Strides(d, 1), 0.0, &mut dk[h * dh..], Strides(d, 1));
        }
        out.push((q, dq));
        out.push((k, dk));
        out.push((v, dv));
    }
}

fn pixel_norms(z: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut n = vec![0.0; hw];
    for ci in 0..c {
        for (p, v) in n.iter_mut().enumerate() {
            *v += z[ci * hw + p] * z[ci * hw + p];
        }
    }
    n.iter_mut().for_each(|v| *v = v.sqrt());
    n
}

fn neighbor(i: usize, j: usize, di: isize, dj: isize, h: usize, w: usize) -> usize {
    let ni = (i as isize + di).clamp(0, h as isize - 1) as usize;
    let nj = (j as isize + dj).clamp(0, w as isize - 1) as usize;
    ni * w + nj
}
