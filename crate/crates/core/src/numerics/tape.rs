//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! A [`Tape`] records every operation of one forward pass in topological
//! order; [`Tape::backward`] walks the record once in reverse and accumulates
//! gradients for every node that (transitively) depends on a leaf created
//! with `requires_grad`. The op set is exactly what the networks in this
//! crate need - dense conv, windowed attention plumbing, norms, activations,
//! and the space-to-depth rearrangements.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    /// `b.shape` is a suffix of `a.shape`; `b` tiles over the leading dims.
    AddSuffix(Var, Var),
    /// `x[N,C,H,W] + bias[C]`.
    AddChannelBias(Var, Var),
    /// `x[N,C,H,W] + e[N,C]`, broadcast over the spatial dims.
    AddSampleChannel(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    /// `x[..,in] @ w[out,in]^T + b[out]`.
    Linear { x: Var, w: Var, b: Option<Var> },
    /// Batched matmul on rank-3 operands.
    Bmm { a: Var, b: Var, trans_b: bool },
    /// Softmax over the last axis.
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f32,
    },
    LeakyRelu(Var, f32),
    Silu(Var),
    MeanAll(Var),
    SumAll(Var),
    PixelUnshuffle(Var, usize),
    PixelShuffle(Var, usize),
    NearestUp2(Var),
    ConcatChannels(Var, Var),
    /// `[N,C,H,W] -> [N*nh*nw, win*win, C]`.
    WindowPartition { x: Var, win: usize },
    /// Inverse of `WindowPartition` for the given original geometry.
    WindowReverse {
        x: Var,
        win: usize,
        n: usize,
        c: usize,
        h: usize,
        w: usize,
    },
    /// Cyclic shift along the two spatial axes (positive = down/right).
    Roll2d { x: Var, dy: isize, dx: isize },
    /// `table[R,H]` indexed by a fixed index list -> `[len,H]`.
    Gather { table: Var, index: Rc<Vec<usize>> },
    /// `[B, n, heads*dh] -> [B*heads, n, dh]`.
    SplitHeads { x: Var, heads: usize },
    /// `[B*heads, n, dh] -> [B, n, heads*dh]`.
    MergeHeads { x: Var, heads: usize },
    Reshape(Var),
    Clamp01(Var),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf holding a copy of `t`; gradient tracking follows
    /// `t.requires_grad`.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Record a non-differentiable constant leaf.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape.to_vec(), data, Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if it was tracked.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn value_tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, needs_grad: bool) -> Var {
        assert!(
            !self.consumed,
            "tape already consumed by backward; build a fresh tape"
        );
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let data = self.value(a).iter().map(|x| x * c).collect();
        let needs = self.needs(a);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Scale(a, c), needs)
    }

    /// `a + b` where `b.shape` is a suffix of `a.shape`.
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Var {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        assert!(
            bsh.len() <= ash.len() && ash[ash.len() - bsh.len()..] == *bsh,
            "add_suffix: {bsh:?} is not a suffix of {ash:?}"
        );
        let bn = self.nodes[b.0].data.len();
        let data: Vec<f32> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + self.nodes[b.0].data[i % bn])
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(
            self.nodes[a.0].shape.clone(),
            data,
            Op::AddSuffix(a, b),
            needs,
        )
    }

    /// `x[N,C,H,W] + bias[C]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let sh = self.shape(x).to_vec();
        assert_eq!(sh.len(), 4, "add_channel_bias expects NCHW");
        assert_eq!(self.shape(bias), &[sh[1]], "bias length != channels");
        let hw = sh[2] * sh[3];
        let mut data = self.value(x).to_vec();
        for n in 0..sh[0] {
            for c in 0..sh[1] {
                let b = self.nodes[bias.0].data[c];
                let base = (n * sh[1] + c) * hw;
                for v in &mut data[base..base + hw] {
                    *v += b;
                }
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        self.push(sh, data, Op::AddChannelBias(x, bias), needs)
    }

    /// `x[N,C,H,W] + e[N,C]` broadcast over H,W.
    pub fn add_sample_channel(&mut self, x: Var, e: Var) -> Var {
        let sh = self.shape(x).to_vec();
        assert_eq!(sh.len(), 4, "add_sample_channel expects NCHW");
        assert_eq!(self.shape(e), &[sh[0], sh[1]], "embedding shape mismatch");
        let hw = sh[2] * sh[3];
        let mut data = self.value(x).to_vec();
        for n in 0..sh[0] {
            for c in 0..sh[1] {
                let b = self.nodes[e.0].data[n * sh[1] + c];
                let base = (n * sh[1] + c) * hw;
                for v in &mut data[base..base + hw] {
                    *v += b;
                }
            }
        }
        let needs = self.needs(x) || self.needs(e);
        self.push(sh, data, Op::AddSampleChannel(x, e), needs)
    }

    // ── dense layers ────────────────────────────────────────────────────

    /// 2-D cross-correlation of `x[N,C,H,W]` with `w[O,C,kh,kw]`, zero
    /// padding `pad` and stride `stride`. Differentiable in `x`, `w`, `b`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(0, format!("conv2d input must be NCHW, got {xs:?}")));
        }
        if ws.len() != 4 {
            return Err(Error::shape(0, format!("conv2d weight must be OCKK, got {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                1,
                format!("conv2d channel mismatch: input C={} vs weight C={}", xs[1], ws[1]),
            ));
        }
        if let Some(bias) = b {
            if self.shape(bias) != [ws[0]] {
                return Err(Error::shape(
                    0,
                    format!("conv2d bias len {:?} != out channels {}", self.shape(bias), ws[0]),
                ));
            }
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh {
            return Err(Error::shape(2, format!("conv2d: H={h} + 2*{pad} < kh={kh}")));
        }
        if wd + 2 * pad < kw {
            return Err(Error::shape(3, format!("conv2d: W={wd} + 2*{pad} < kw={kw}")));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let mut out = vec![0.0f32; n * o * oh * ow];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = b.map(|bias| self.value(bias).to_vec());
            if stride == 1 {
                // shift-and-accumulate: for each (c, ky, kx) the update is a
                // contiguous saxpy over an output row
                for ni in 0..n {
                    for oi in 0..o {
                        let obase = ((ni * o + oi) * oh) * ow;
                        if let Some(bvals) = &bv {
                            out[obase..obase + oh * ow].fill(bvals[oi]);
                        }
                        for ci in 0..c {
                            let xbase = ((ni * c + ci) * h) * wd;
                            let wbase = ((oi * c + ci) * kh) * kw;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let wgt = wv[wbase + ky * kw + kx];
                                    if wgt == 0.0 {
                                        continue;
                                    }
                                    let ox_lo = pad.saturating_sub(kx);
                                    let ox_hi = (wd + pad - kx).min(ow);
                                    if ox_lo >= ox_hi {
                                        continue;
                                    }
                                    for oy in 0..oh {
                                        let iy = (oy + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let xrow = xbase + iy as usize * wd + ox_lo + kx - pad;
                                        let orow = obase + oy * ow + ox_lo;
                                        let len = ox_hi - ox_lo;
                                        let (xs, os) =
                                            (&xv[xrow..xrow + len], &mut out[orow..orow + len]);
                                        for i in 0..len {
                                            os[i] += wgt * xs[i];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            } else {
                for ni in 0..n {
                    for oi in 0..o {
                        let bias = bv.as_ref().map_or(0.0, |v| v[oi]);
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = bias;
                                for ci in 0..c {
                                    let xbase = ((ni * c + ci) * h) * wd;
                                    let wbase = ((oi * c + ci) * kh) * kw;
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let xrow = xbase + iy as usize * wd;
                                        let wrow = wbase + ky * kw;
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            acc += xv[xrow + ix as usize] * wv[wrow + kx];
                                        }
                                    }
                                }
                                out[((ni * o + oi) * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                }
            }
        }
        let needs =
            self.needs(x) || self.needs(w) || b.map_or(false, |bias| self.needs(bias));
        Ok(self.push(
            vec![n, o, oh, ow],
            out,
            Op::Conv2d { x, w, b, stride, pad },
            needs,
        ))
    }

    /// `x[..,in] @ w[out,in]^T (+ b)`; leading axes are flattened.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "linear weight must be rank 2");
        let in_dim = *xs.last().expect("linear input needs >= 1 axis");
        assert_eq!(in_dim, ws[1], "linear: in dim {} != weight {}", in_dim, ws[1]);
        let out_dim = ws[0];
        let m: usize = xs[..xs.len() - 1].iter().product();
        let mut out = vec![0.0f32; m * out_dim];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            for i in 0..m {
                let xrow = &xv[i * in_dim..(i + 1) * in_dim];
                for oj in 0..out_dim {
                    let wrow = &wv[oj * in_dim..(oj + 1) * in_dim];
                    let mut acc = 0.0f32;
                    for k in 0..in_dim {
                        acc += xrow[k] * wrow[k];
                    }
                    out[i * out_dim + oj] = acc;
                }
            }
            if let Some(bias) = b {
                let bv = self.value(bias).to_vec();
                assert_eq!(bv.len(), out_dim, "linear bias length mismatch");
                for i in 0..m {
                    for oj in 0..out_dim {
                        out[i * out_dim + oj] += bv[oj];
                    }
                }
            }
        }
        let mut osh = xs[..xs.len() - 1].to_vec();
        osh.push(out_dim);
        let needs =
            self.needs(x) || self.needs(w) || b.map_or(false, |bias| self.needs(bias));
        self.push(osh, out, Op::Linear { x, w, b }, needs)
    }

    /// Batched matmul `[B,m,k] x [B,k,n] -> [B,m,n]`; with `trans_b` the
    /// second operand is `[B,n,k]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        assert_eq!(ash.len(), 3, "bmm lhs must be rank 3");
        assert_eq!(bsh.len(), 3, "bmm rhs must be rank 3");
        assert_eq!(ash[0], bsh[0], "bmm batch mismatch");
        let (bt, m, k) = (ash[0], ash[1], ash[2]);
        let n = if trans_b { bsh[1] } else { bsh[2] };
        let bk = if trans_b { bsh[2] } else { bsh[1] };
        assert_eq!(k, bk, "bmm inner dim mismatch");
        let mut out = vec![0.0f32; bt * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for bi in 0..bt {
                let abase = bi * m * k;
                let bbase = bi * bsh[1] * bsh[2];
                let obase = bi * m * n;
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = 0.0f32;
                        for p in 0..k {
                            let bval = if trans_b {
                                bv[bbase + j * k + p]
                            } else {
                                bv[bbase + p * n + j]
                            };
                            acc += av[abase + i * k + p] * bval;
                        }
                        out[obase + i * n + j] = acc;
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(vec![bt, m, n], out, Op::Bmm { a, b, trans_b }, needs)
    }

    // ── normalization and activation ───────────────────────────────────

    /// Softmax over the last axis. Rows sum to 1.
    pub fn softmax(&mut self, x: Var) -> Var {
        let sh = self.shape(x).to_vec();
        let d = *sh.last().expect("softmax needs >= 1 axis");
        let rows = self.nodes[x.0].data.len() / d;
        let mut out = vec![0.0f32; rows * d];
        {
            let xv = self.value(x);
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f32;
                for j in 0..d {
                    let e = (row[j] - mx).exp();
                    out[r * d + j] = e;
                    sum += e;
                }
                for j in 0..d {
                    out[r * d + j] /= sum;
                }
            }
        }
        let needs = self.needs(x);
        self.push(sh, out, Op::Softmax(x), needs)
    }

    /// Layer norm over the last axis with learnable `gamma`/`beta` of that
    /// axis length.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Var {
        let sh = self.shape(x).to_vec();
        let d = *sh.last().expect("layer_norm needs >= 1 axis");
        assert_eq!(self.shape(gamma), &[d], "layer_norm gamma mismatch");
        assert_eq!(self.shape(beta), &[d], "layer_norm beta mismatch");
        let rows = self.nodes[x.0].data.len() / d;
        let mut out = vec![0.0f32; rows * d];
        {
            let xv = self.value(x);
            let gv = self.value(gamma);
            let bv = self.value(beta);
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f32>() / d as f32;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
                let inv_std = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    out[r * d + j] = (row[j] - mean) * inv_std * gv[j] + bv[j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(sh, out, Op::LayerNorm { x, gamma, beta, eps }, needs)
    }

    /// Group norm over `[N,C,H,W]` with per-channel affine params.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f32) -> Var {
        let sh = self.shape(x).to_vec();
        assert_eq!(sh.len(), 4, "group_norm expects NCHW");
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        let cpg = c / groups;
        let slab = cpg * h * w;
        let mut out = vec![0.0f32; n * c * h * w];
        {
            let xv = self.value(x);
            let gv = self.value(gamma);
            let bv = self.value(beta);
            for ni in 0..n {
                for g in 0..groups {
                    let base = (ni * c + g * cpg) * h * w;
                    let xs = &xv[base..base + slab];
                    let mean = xs.iter().sum::<f32>() / slab as f32;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / slab as f32;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    for j in 0..slab {
                        let ch = g * cpg + j / (h * w);
                        out[base + j] = (xs[j] - mean) * inv_std * gv[ch] + bv[ch];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            sh,
            out,
            Op::GroupNorm { x, gamma, beta, groups, eps },
            needs,
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let data = self
            .value(x)
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let needs = self.needs(x);
        self.push(
            self.nodes[x.0].shape.clone(),
            data,
            Op::LeakyRelu(x, slope),
            needs,
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .iter()
            .map(|&v| v / (1.0 + (-v).exp()))
            .collect();
        let needs = self.needs(x);
        self.push(self.nodes[x.0].shape.clone(), data, Op::Silu(x), needs)
    }

    pub fn clamp01(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&v| v.clamp(0.0, 1.0)).collect();
        let needs = self.needs(x);
        self.push(self.nodes[x.0].shape.clone(), data, Op::Clamp01(x), needs)
    }

    // ── reductions ──────────────────────────────────────────────────────

    /// Mean over all elements; f64 accumulator, scalar output.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let sum: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        let n = self.nodes[x.0].data.len();
        let needs = self.needs(x);
        self.push(vec![], vec![(sum / n as f64) as f32], Op::MeanAll(x), needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let sum: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        let needs = self.needs(x);
        self.push(vec![], vec![sum as f32], Op::SumAll(x), needs)
    }

    /// Mean squared difference, `mean((a-b)^2)`.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    // ── rearrangements ──────────────────────────────────────────────────

    /// Space-to-depth: `[N,C,H,W] -> [N, C*f*f, H/f, W/f]`.
    pub fn pixel_unshuffle(&mut self, x: Var, f: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 4 {
            return Err(Error::shape(0, format!("pixel_unshuffle expects NCHW, got {sh:?}")));
        }
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        if h % f != 0 {
            return Err(Error::shape(2, format!("height {h} not divisible by factor {f}")));
        }
        if w % f != 0 {
            return Err(Error::shape(3, format!("width {w} not divisible by factor {f}")));
        }
        let (oh, ow) = (h / f, w / f);
        let mut out = vec![0.0f32; n * c * h * w];
        {
            let xv = self.value(x);
            for ni in 0..n {
                for ci in 0..c {
                    for dy in 0..f {
                        for dx in 0..f {
                            let oc = ci * f * f + dy * f + dx;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let src = ((ni * c + ci) * h + oy * f + dy) * w + ox * f + dx;
                                    let dst = ((ni * c * f * f + oc) * oh + oy) * ow + ox;
                                    out[dst] = xv[src];
                                }
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            vec![n, c * f * f, oh, ow],
            out,
            Op::PixelUnshuffle(x, f),
            needs,
        ))
    }

    /// Depth-to-space inverse of [`Tape::pixel_unshuffle`].
    pub fn pixel_shuffle(&mut self, x: Var, f: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 4 {
            return Err(Error::shape(0, format!("pixel_shuffle expects NCHW, got {sh:?}")));
        }
        let (n, cf, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        if cf % (f * f) != 0 {
            return Err(Error::shape(1, format!("channels {cf} not divisible by f*f = {}", f * f)));
        }
        let c = cf / (f * f);
        let (oh, ow) = (h * f, w * f);
        let mut out = vec![0.0f32; n * cf * h * w];
        {
            let xv = self.value(x);
            for ni in 0..n {
                for ci in 0..c {
                    for dy in 0..f {
                        for dx in 0..f {
                            let ic = ci * f * f + dy * f + dx;
                            for y in 0..h {
                                for x2 in 0..w {
                                    let src = ((ni * cf + ic) * h + y) * w + x2;
                                    let dst = ((ni * c + ci) * oh + y * f + dy) * ow + x2 * f + dx;
                                    out[dst] = xv[src];
                                }
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![n, c, oh, ow], out, Op::PixelShuffle(x, f), needs))
    }

    /// Nearest-neighbor 2x spatial upsample of NCHW.
    pub fn nearest_up2(&mut self, x: Var) -> Var {
        let sh = self.shape(x).to_vec();
        assert_eq!(sh.len(), 4, "nearest_up2 expects NCHW");
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let mut out = vec![0.0f32; n * c * 4 * h * w];
        {
            let xv = self.value(x);
            for nc in 0..n * c {
                for y in 0..h {
                    for x2 in 0..w {
                        let v = xv[(nc * h + y) * w + x2];
                        let base = nc * 4 * h * w;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                out[base + (2 * y + dy) * 2 * w + 2 * x2 + dx] = v;
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(vec![n, c, 2 * h, 2 * w], out, Op::NearestUp2(x), needs)
    }

    /// Concatenate two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        assert_eq!(ash.len(), 4);
        assert_eq!(bsh.len(), 4);
        assert_eq!(
            (ash[0], ash[2], ash[3]),
            (bsh[0], bsh[2], bsh[3]),
            "concat_channels: N/H/W mismatch {ash:?} vs {bsh:?}"
        );
        let (n, hw) = (ash[0], ash[2] * ash[3]);
        let (ca, cb) = (ash[1], bsh[1]);
        let mut out = vec![0.0f32; n * (ca + cb) * hw];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for ni in 0..n {
                let dst = ni * (ca + cb) * hw;
                out[dst..dst + ca * hw].copy_from_slice(&av[ni * ca * hw..(ni + 1) * ca * hw]);
                out[dst + ca * hw..dst + (ca + cb) * hw]
                    .copy_from_slice(&bv[ni * cb * hw..(ni + 1) * cb * hw]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            vec![n, ca + cb, ash[2], ash[3]],
            out,
            Op::ConcatChannels(a, b),
            needs,
        )
    }

    /// Partition `[N,C,H,W]` into non-overlapping windows:
    /// `[N*nh*nw, win*win, C]`. Window batch order is `(n, wy, wx)`.
    pub fn window_partition(&mut self, x: Var, win: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 4 {
            return Err(Error::shape(0, format!("window_partition expects NCHW, got {sh:?}")));
        }
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        if h % win != 0 {
            return Err(Error::shape(2, format!("height {h} not divisible by window {win}")));
        }
        if w % win != 0 {
            return Err(Error::shape(3, format!("width {w} not divisible by window {win}")));
        }
        let (nh, nw) = (h / win, w / win);
        let tokens = win * win;
        let mut out = vec![0.0f32; n * c * h * w];
        {
            let xv = self.value(x);
            for (dst, v) in out.iter_mut().enumerate() {
                // dst = ((b * tokens) + t) * c + ch with b = ((n, wy), wx)
                let ch = dst % c;
                let t = (dst / c) % tokens;
                let b = dst / (c * tokens);
                let wx = b % nw;
                let wy = (b / nw) % nh;
                let ni = b / (nw * nh);
                let y = wy * win + t / win;
                let xcol = wx * win + t % win;
                *v = xv[((ni * c + ch) * h + y) * w + xcol];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            vec![n * nh * nw, tokens, c],
            out,
            Op::WindowPartition { x, win },
            needs,
        ))
    }

    /// Inverse of [`Tape::window_partition`] back to `[N,C,H,W]`.
    pub fn window_reverse(&mut self, x: Var, win: usize, n: usize, c: usize, h: usize, w: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let (nh, nw) = (h / win, w / win);
        let tokens = win * win;
        if sh != [n * nh * nw, tokens, c] {
            return Err(Error::shape(
                0,
                format!("window_reverse: got {sh:?}, expected {:?}", [n * nh * nw, tokens, c]),
            ));
        }
        let mut out = vec![0.0f32; n * c * h * w];
        {
            let xv = self.value(x);
            for (src, &v) in xv.iter().enumerate() {
                let ch = src % c;
                let t = (src / c) % tokens;
                let b = src / (c * tokens);
                let wx = b % nw;
                let wy = (b / nw) % nh;
                let ni = b / (nw * nh);
                let y = wy * win + t / win;
                let xcol = wx * win + t % win;
                out[((ni * c + ch) * h + y) * w + xcol] = v;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            vec![n, c, h, w],
            out,
            Op::WindowReverse { x, win, n, c, h, w },
            needs,
        ))
    }

    /// Cyclic roll of the spatial axes; positive shifts move content
    /// down/right with wrap-around.
    pub fn roll2d(&mut self, x: Var, dy: isize, dx: isize) -> Var {
        let sh = self.shape(x).to_vec();
        assert_eq!(sh.len(), 4, "roll2d expects NCHW");
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let mut out = vec![0.0f32; n * c * h * w];
        {
            let xv = self.value(x);
            for nc in 0..n * c {
                for y in 0..h {
                    let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
                    for x2 in 0..w {
                        let sx = (x2 as isize - dx).rem_euclid(w as isize) as usize;
                        out[(nc * h + y) * w + x2] = xv[(nc * h + sy) * w + sx];
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(sh, out, Op::Roll2d { x, dy, dx }, needs)
    }

    /// Row gather: `table[R,H]` by a fixed index list -> `[len,H]`.
    pub fn gather_rows(&mut self, table: Var, index: Rc<Vec<usize>>) -> Var {
        let sh = self.shape(table).to_vec();
        assert_eq!(sh.len(), 2, "gather_rows expects a rank-2 table");
        let (r, hdim) = (sh[0], sh[1]);
        let mut out = vec![0.0f32; index.len() * hdim];
        {
            let tv = self.value(table);
            for (i, &row) in index.iter().enumerate() {
                assert!(row < r, "gather index {row} out of range {r}");
                out[i * hdim..(i + 1) * hdim].copy_from_slice(&tv[row * hdim..(row + 1) * hdim]);
            }
        }
        let needs = self.needs(table);
        self.push(
            vec![index.len(), hdim],
            out,
            Op::Gather { table, index },
            needs,
        )
    }

    /// `[B, n, heads*dh] -> [B*heads, n, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let sh = self.shape(x).to_vec();
        assert_eq!(sh.len(), 3, "split_heads expects [B,n,C]");
        let (b, n, c) = (sh[0], sh[1], sh[2]);
        assert!(c % heads == 0, "channels {c} not divisible by heads {heads}");
        let dh = c / heads;
        let mut out = vec![0.0f32; b * n * c];
        {
            let xv = self.value(x);
            for bi in 0..b {
                for t in 0..n {
                    for hd in 0..heads {
                        for d in 0..dh {
                            out[(((bi * heads + hd) * n) + t) * dh + d] =
                                xv[(bi * n + t) * c + hd * dh + d];
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(vec![b * heads, n, dh], out, Op::SplitHeads { x, heads }, needs)
    }

    /// `[B*heads, n, dh] -> [B, n, heads*dh]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let sh = self.shape(x).to_vec();
        assert_eq!(sh.len(), 3, "merge_heads expects [B*heads,n,dh]");
        let (bh, n, dh) = (sh[0], sh[1], sh[2]);
        assert!(bh % heads == 0);
        let b = bh / heads;
        let c = heads * dh;
        let mut out = vec![0.0f32; b * n * c];
        {
            let xv = self.value(x);
            for bi in 0..b {
                for t in 0..n {
                    for hd in 0..heads {
                        for d in 0..dh {
                            out[(bi * n + t) * c + hd * dh + d] =
                                xv[(((bi * heads + hd) * n) + t) * dh + d];
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(vec![b, n, c], out, Op::MergeHeads { x, heads }, needs)
    }

    /// Reinterpret the buffer under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, new_shape: &[usize]) -> Var {
        let numel: usize = new_shape.iter().product();
        assert_eq!(
            numel,
            self.nodes[x.0].data.len(),
            "reshape numel mismatch: {:?} -> {:?}",
            self.shape(x),
            new_shape
        );
        let data = self.value(x).to_vec();
        let needs = self.needs(x);
        self.push(new_shape.to_vec(), data, Op::Reshape(x), needs)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients for every node
    /// on a differentiable path; consumes the tape (no further ops or
    /// backward calls are permitted).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::contract("backward called on a consumed tape"));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    // keep the leaf gradient
                    self.grads[i] = Some(grad);
                    continue;
                }
                Op::Add(a, b) => {
                    self.accum(a, &grad);
                    self.accum(b, &grad);
                }
                Op::Sub(a, b) => {
                    self.accum(a, &grad);
                    let neg: Vec<f32> = grad.iter().map(|g| -g).collect();
                    self.accum(b, &neg);
                }
                Op::Mul(a, b) => {
                    let da = zip_map(&grad, self.value(b), |g, y| g * y);
                    let db = zip_map(&grad, self.value(a), |g, x| g * x);
                    self.accum(a, &da);
                    self.accum(b, &db);
                }
                Op::Scale(a, c) => {
                    let da: Vec<f32> = grad.iter().map(|g| g * c).collect();
                    self.accum(a, &da);
                }
                Op::AddSuffix(a, b) => {
                    self.accum(a, &grad);
                    if self.needs(b) {
                        let bn = self.nodes[b.0].data.len();
                        let mut db = vec![0.0f32; bn];
                        for (i2, g) in grad.iter().enumerate() {
                            db[i2 % bn] += g;
                        }
                        self.accum(b, &db);
                    }
                }
                Op::AddChannelBias(x, bias) => {
                    self.accum(x, &grad);
                    if self.needs(bias) {
                        let sh = self.nodes[x.0].shape.clone();
                        let hw = sh[2] * sh[3];
                        let mut db = vec![0.0f32; sh[1]];
                        for n in 0..sh[0] {
                            for c in 0..sh[1] {
                                let base = (n * sh[1] + c) * hw;
                                db[c] += grad[base..base + hw].iter().sum::<f32>();
                            }
                        }
                        self.accum(bias, &db);
                    }
                }
                Op::AddSampleChannel(x, e) => {
                    self.accum(x, &grad);
                    if self.needs(e) {
                        let sh = self.nodes[x.0].shape.clone();
                        let hw = sh[2] * sh[3];
                        let mut de = vec![0.0f32; sh[0] * sh[1]];
                        for nc in 0..sh[0] * sh[1] {
                            de[nc] = grad[nc * hw..(nc + 1) * hw].iter().sum::<f32>();
                        }
                        self.accum(e, &de);
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    self.conv2d_backward(i, x, w, b, stride, pad, &grad);
                }
                Op::Linear { x, w, b } => {
                    let xs = self.nodes[x.0].shape.clone();
                    let in_dim = *xs.last().unwrap();
                    let out_dim = self.nodes[w.0].shape[0];
                    let m: usize = xs[..xs.len() - 1].iter().product();
                    if self.needs(x) {
                        let wv = self.value(w);
                        let mut dx = vec![0.0f32; m * in_dim];
                        for r in 0..m {
                            for oj in 0..out_dim {
                                let g = grad[r * out_dim + oj];
                                let wrow = &wv[oj * in_dim..(oj + 1) * in_dim];
                                for k2 in 0..in_dim {
                                    dx[r * in_dim + k2] += g * wrow[k2];
                                }
                            }
                        }
                        self.accum(x, &dx);
                    }
                    if self.needs(w) {
                        let xv = self.value(x);
                        let mut dw = vec![0.0f32; out_dim * in_dim];
                        for r in 0..m {
                            let xrow = &xv[r * in_dim..(r + 1) * in_dim];
                            for oj in 0..out_dim {
                                let g = grad[r * out_dim + oj];
                                for k2 in 0..in_dim {
                                    dw[oj * in_dim + k2] += g * xrow[k2];
                                }
                            }
                        }
                        self.accum(w, &dw);
                    }
                    if let Some(bias) = b {
                        if self.needs(bias) {
                            let mut db = vec![0.0f32; out_dim];
                            for r in 0..m {
                                for oj in 0..out_dim {
                                    db[oj] += grad[r * out_dim + oj];
                                }
                            }
                            self.accum(bias, &db);
                        }
                    }
                }
                Op::Bmm { a, b, trans_b } => {
                    let ash = self.nodes[a.0].shape.clone();
                    let bsh = self.nodes[b.0].shape.clone();
                    let (bt, m, k) = (ash[0], ash[1], ash[2]);
                    let n = if trans_b { bsh[1] } else { bsh[2] };
                    if self.needs(a) {
                        let bv = self.value(b);
                        let mut da = vec![0.0f32; bt * m * k];
                        for bi in 0..bt {
                            let gb = bi * m * n;
                            let bb = bi * bsh[1] * bsh[2];
                            for i2 in 0..m {
                                for j in 0..n {
                                    let g = grad[gb + i2 * n + j];
                                    for p in 0..k {
                                        let bval = if trans_b {
                                            bv[bb + j * k + p]
                                        } else {
                                            bv[bb + p * n + j]
                                        };
                                        da[bi * m * k + i2 * k + p] += g * bval;
                                    }
                                }
                            }
                        }
                        self.accum(a, &da);
                    }
                    if self.needs(b) {
                        let av = self.value(a);
                        let mut db = vec![0.0f32; bt * bsh[1] * bsh[2]];
                        for bi in 0..bt {
                            let gb = bi * m * n;
                            let ab = bi * m * k;
                            for i2 in 0..m {
                                for j in 0..n {
                                    let g = grad[gb + i2 * n + j];
                                    for p in 0..k {
                                        let slot = if trans_b {
                                            bi * n * k + j * k + p
                                        } else {
                                            bi * k * n + p * n + j
                                        };
                                        db[slot] += g * av[ab + i2 * k + p];
                                    }
                                }
                            }
                        }
                        self.accum(b, &db);
                    }
                }
                Op::Softmax(x) => {
                    let out = &self.nodes[i].data;
                    let d = *self.nodes[i].shape.last().unwrap();
                    let rows = out.len() / d;
                    let mut dx = vec![0.0f32; out.len()];
                    for r in 0..rows {
                        let s = &out[r * d..(r + 1) * d];
                        let g = &grad[r * d..(r + 1) * d];
                        let dot: f32 = s.iter().zip(g).map(|(si, gi)| si * gi).sum();
                        for j in 0..d {
                            dx[r * d + j] = s[j] * (g[j] - dot);
                        }
                    }
                    self.accum(x, &dx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    self.layer_norm_backward(x, gamma, beta, eps, &grad);
                }
                Op::GroupNorm { x, gamma, beta, groups, eps } => {
                    self.group_norm_backward(x, gamma, beta, groups, eps, &grad);
                }
                Op::LeakyRelu(x, slope) => {
                    let dx = zip_map(&grad, self.value(x), |g, v| {
                        if v > 0.0 {
                            g
                        } else {
                            g * slope
                        }
                    });
                    self.accum(x, &dx);
                }
                Op::Silu(x) => {
                    let dx = zip_map(&grad, self.value(x), |g, v| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        g * s * (1.0 + v * (1.0 - s))
                    });
                    self.accum(x, &dx);
                }
                Op::Clamp01(x) => {
                    let dx = zip_map(&grad, self.value(x), |g, v| {
                        if (0.0..=1.0).contains(&v) {
                            g
                        } else {
                            0.0
                        }
                    });
                    self.accum(x, &dx);
                }
                Op::MeanAll(x) => {
                    let n = self.nodes[x.0].data.len();
                    let g = grad[0] / n as f32;
                    self.accum(x, &vec![g; n]);
                }
                Op::SumAll(x) => {
                    let n = self.nodes[x.0].data.len();
                    self.accum(x, &vec![grad[0]; n]);
                }
                Op::PixelUnshuffle(x, f) => {
                    let sh = self.nodes[x.0].shape.clone();
                    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                    let (oh, ow) = (h / f, w / f);
                    let mut dx = vec![0.0f32; n * c * h * w];
                    for ni in 0..n {
                        for ci in 0..c {
                            for dy in 0..f {
                                for dx2 in 0..f {
                                    let oc = ci * f * f + dy * f + dx2;
                                    for oy in 0..oh {
                                        for ox in 0..ow {
                                            let src = ((ni * c * f * f + oc) * oh + oy) * ow + ox;
                                            let dst =
                                                ((ni * c + ci) * h + oy * f + dy) * w + ox * f + dx2;
                                            dx[dst] = grad[src];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accum(x, &dx);
                }
                Op::PixelShuffle(x, f) => {
                    let sh = self.nodes[x.0].shape.clone();
                    let (n, cf, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                    let c = cf / (f * f);
                    let (oh, ow) = (h * f, w * f);
                    let mut dx = vec![0.0f32; n * cf * h * w];
                    for ni in 0..n {
                        for ci in 0..c {
                            for dy in 0..f {
                                for dx2 in 0..f {
                                    let ic = ci * f * f + dy * f + dx2;
                                    for y in 0..h {
                                        for x2 in 0..w {
                                            let src = ((ni * c + ci) * oh + y * f + dy) * ow
                                                + x2 * f
                                                + dx2;
                                            let dst = ((ni * cf + ic) * h + y) * w + x2;
                                            dx[dst] = grad[src];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accum(x, &dx);
                }
                Op::NearestUp2(x) => {
                    let sh = self.nodes[x.0].shape.clone();
                    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                    let mut dx = vec![0.0f32; n * c * h * w];
                    for nc in 0..n * c {
                        for y in 0..h {
                            for x2 in 0..w {
                                let base = nc * 4 * h * w;
                                let mut acc = 0.0f32;
                                for dy in 0..2 {
                                    for dx2 in 0..2 {
                                        acc += grad[base + (2 * y + dy) * 2 * w + 2 * x2 + dx2];
                                    }
                                }
                                dx[(nc * h + y) * w + x2] = acc;
                            }
                        }
                    }
                    self.accum(x, &dx);
                }
                Op::ConcatChannels(a, b) => {
                    let ash = self.nodes[a.0].shape.clone();
                    let bsh = self.nodes[b.0].shape.clone();
                    let (n, hw) = (ash[0], ash[2] * ash[3]);
                    let (ca, cb) = (ash[1], bsh[1]);
                    if self.needs(a) {
                        let mut da = vec![0.0f32; n * ca * hw];
                        for ni in 0..n {
                            let src = ni * (ca + cb) * hw;
                            da[ni * ca * hw..(ni + 1) * ca * hw]
                                .copy_from_slice(&grad[src..src + ca * hw]);
                        }
                        self.accum(a, &da);
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0f32; n * cb * hw];
                        for ni in 0..n {
                            let src = ni * (ca + cb) * hw + ca * hw;
                            db[ni * cb * hw..(ni + 1) * cb * hw]
                                .copy_from_slice(&grad[src..src + cb * hw]);
                        }
                        self.accum(b, &db);
                    }
                }
                Op::WindowPartition { x, win } => {
                    let sh = self.nodes[x.0].shape.clone();
                    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                    let (nh, nw) = (h / win, w / win);
                    let tokens = win * win;
                    let mut dx = vec![0.0f32; n * c * h * w];
                    for (src, &g) in grad.iter().enumerate() {
                        let ch = src % c;
                        let t = (src / c) % tokens;
                        let b = src / (c * tokens);
                        let wx = b % nw;
                        let wy = (b / nw) % nh;
                        let ni = b / (nw * nh);
                        let y = wy * win + t / win;
                        let xcol = wx * win + t % win;
                        dx[((ni * c + ch) * h + y) * w + xcol] = g;
                    }
                    self.accum(x, &dx);
                }
                Op::WindowReverse { x, win, n, c, h, w } => {
                    let (nh, nw) = (h / win, w / win);
                    let tokens = win * win;
                    let mut dx = vec![0.0f32; n * c * h * w];
                    for (dst, slot) in dx.iter_mut().enumerate() {
                        let ch = dst % c;
                        let t = (dst / c) % tokens;
                        let b = dst / (c * tokens);
                        let wx = b % nw;
                        let wy = (b / nw) % nh;
                        let ni = b / (nw * nh);
                        let y = wy * win + t / win;
                        let xcol = wx * win + t % win;
                        *slot = grad[((ni * c + ch) * h + y) * w + xcol];
                    }
                    self.accum(x, &dx);
                }
                Op::Roll2d { x, dy, dx } => {
                    let sh = self.nodes[x.0].shape.clone();
                    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                    let mut dxg = vec![0.0f32; n * c * h * w];
                    for nc in 0..n * c {
                        for y in 0..h {
                            let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
                            for x2 in 0..w {
                                let sx = (x2 as isize - dx).rem_euclid(w as isize) as usize;
                                dxg[(nc * h + sy) * w + sx] += grad[(nc * h + y) * w + x2];
                            }
                        }
                    }
                    self.accum(x, &dxg);
                }
                Op::Gather { table, index } => {
                    let sh = self.nodes[table.0].shape.clone();
                    let hdim = sh[1];
                    let mut dt = vec![0.0f32; sh[0] * hdim];
                    for (i2, &row) in index.iter().enumerate() {
                        for j in 0..hdim {
                            dt[row * hdim + j] += grad[i2 * hdim + j];
                        }
                    }
                    self.accum(table, &dt);
                }
                Op::SplitHeads { x, heads } => {
                    let sh = self.nodes[x.0].shape.clone();
                    let (b, n, c) = (sh[0], sh[1], sh[2]);
                    let dh = c / heads;
                    let mut dx = vec![0.0f32; b * n * c];
                    for bi in 0..b {
                        for t in 0..n {
                            for hd in 0..heads {
                                for d in 0..dh {
                                    dx[(bi * n + t) * c + hd * dh + d] =
                                        grad[(((bi * heads + hd) * n) + t) * dh + d];
                                }
                            }
                        }
                    }
                    self.accum(x, &dx);
                }
                Op::MergeHeads { x, heads } => {
                    let sh = self.nodes[x.0].shape.clone();
                    let (bh, n, dh) = (sh[0], sh[1], sh[2]);
                    let b = bh / heads;
                    let c = heads * dh;
                    let mut dx = vec![0.0f32; bh * n * dh];
                    for bi in 0..b {
                        for t in 0..n {
                            for hd in 0..heads {
                                for d in 0..dh {
                                    dx[(((bi * heads + hd) * n) + t) * dh + d] =
                                        grad[(bi * n + t) * c + hd * dh + d];
                                }
                            }
                        }
                    }
                    self.accum(x, &dx);
                }
                Op::Reshape(x) => {
                    self.accum(x, &grad);
                }
            }
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, delta: &[f32]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            slot => *slot = Some(delta.to_vec()),
        }
    }

    fn conv2d_backward(
        &mut self,
        out: usize,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        grad: &[f32],
    ) {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        let os = self.nodes[out].shape.clone();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let (oh, ow) = (os[2], os[3]);
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let mut dx = if need_x { vec![0.0f32; n * c * h * wd] } else { Vec::new() };
        let mut dw = if need_w { vec![0.0f32; o * c * kh * kw] } else { Vec::new() };
        {
            let xv = self.value(x);
            let wv = self.value(w);
            if stride == 1 {
                for ni in 0..n {
                    for oi in 0..o {
                        let gbase = ((ni * o + oi) * oh) * ow;
                        for ci in 0..c {
                            let xbase = ((ni * c + ci) * h) * wd;
                            let wbase = ((oi * c + ci) * kh) * kw;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let ox_lo = pad.saturating_sub(kx);
                                    let ox_hi = (wd + pad - kx).min(ow);
                                    if ox_lo >= ox_hi {
                                        continue;
                                    }
                                    let len = ox_hi - ox_lo;
                                    let wgt = wv[wbase + ky * kw + kx];
                                    let mut wacc = 0.0f32;
                                    for oy in 0..oh {
                                        let iy = (oy + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let xrow = xbase + iy as usize * wd + ox_lo + kx - pad;
                                        let grow = gbase + oy * ow + ox_lo;
                                        let gs = &grad[grow..grow + len];
                                        if need_x {
                                            let ds = &mut dx[xrow..xrow + len];
                                            for i in 0..len {
                                                ds[i] += wgt * gs[i];
                                            }
                                        }
                                        if need_w {
                                            let xs = &xv[xrow..xrow + len];
                                            for i in 0..len {
                                                wacc += gs[i] * xs[i];
                                            }
                                        }
                                    }
                                    if need_w {
                                        dw[wbase + ky * kw + kx] += wacc;
                                    }
                                }
                            }
                        }
                    }
                }
            } else {
                for ni in 0..n {
                    for oi in 0..o {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = grad[((ni * o + oi) * oh + oy) * ow + ox];
                                if g == 0.0 {
                                    continue;
                                }
                                for ci in 0..c {
                                    let xbase = ((ni * c + ci) * h) * wd;
                                    let wbase = ((oi * c + ci) * kh) * kw;
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let xrow = xbase + iy as usize * wd;
                                        let wrow = wbase + ky * kw;
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            if need_x {
                                                dx[xrow + ix as usize] += g * wv[wrow + kx];
                                            }
                                            if need_w {
                                                dw[wrow + kx] += g * xv[xrow + ix as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            self.accum(x, &dx);
        }
        if need_w {
            self.accum(w, &dw);
        }
        if let Some(bias) = b {
            if self.needs(bias) {
                let mut db = vec![0.0f32; o];
                for ni in 0..n {
                    for oi in 0..o {
                        let base = ((ni * o + oi) * oh) * ow;
                        db[oi] += grad[base..base + oh * ow].iter().sum::<f32>();
                    }
                }
                self.accum(bias, &db);
            }
        }
    }

    fn layer_norm_backward(&mut self, x: Var, gamma: Var, beta: Var, eps: f32, grad: &[f32]) {
        let d = *self.nodes[x.0].shape.last().unwrap();
        let rows = self.nodes[x.0].data.len() / d;
        let need_x = self.needs(x);
        let need_g = self.needs(gamma);
        let need_b = self.needs(beta);
        let mut dx = if need_x { vec![0.0f32; rows * d] } else { Vec::new() };
        let mut dgamma = vec![0.0f32; d];
        let mut dbeta = vec![0.0f32; d];
        {
            let xv = self.value(x);
            let gv = self.value(gamma);
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let g = &grad[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f32>() / d as f32;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
                let inv_std = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f32> = row.iter().map(|v| (v - mean) * inv_std).collect();
                if need_g || need_b {
                    for j in 0..d {
                        dgamma[j] += g[j] * xhat[j];
                        dbeta[j] += g[j];
                    }
                }
                if need_x {
                    let dxhat: Vec<f32> = (0..d).map(|j| g[j] * gv[j]).collect();
                    let sum_dxhat: f32 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f32 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let df = d as f32;
                    for j in 0..d {
                        dx[r * d + j] = inv_std / df
                            * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
            }
        }
        if need_x {
            self.accum(x, &dx);
        }
        if need_g {
            self.accum(gamma, &dgamma);
        }
        if need_b {
            self.accum(beta, &dbeta);
        }
    }

    fn group_norm_backward(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f32,
        grad: &[f32],
    ) {
        let sh = self.nodes[x.0].shape.clone();
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let cpg = c / groups;
        let slab = cpg * h * w;
        let hw = h * w;
        let need_x = self.needs(x);
        let need_g = self.needs(gamma);
        let need_b = self.needs(beta);
        let mut dx = if need_x { vec![0.0f32; n * c * hw] } else { Vec::new() };
        let mut dgamma = vec![0.0f32; c];
        let mut dbeta = vec![0.0f32; c];
        {
            let xv = self.value(x);
            let gv = self.value(gamma);
            for ni in 0..n {
                for g2 in 0..groups {
                    let base = (ni * c + g2 * cpg) * hw;
                    let xs = &xv[base..base + slab];
                    let gs = &grad[base..base + slab];
                    let mean = xs.iter().sum::<f32>() / slab as f32;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / slab as f32;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f32> = xs.iter().map(|v| (v - mean) * inv_std).collect();
                    if need_g || need_b {
                        for j in 0..slab {
                            let ch = g2 * cpg + j / hw;
                            dgamma[ch] += gs[j] * xhat[j];
                            dbeta[ch] += gs[j];
                        }
                    }
                    if need_x {
                        let dxhat: Vec<f32> = (0..slab)
                            .map(|j| gs[j] * gv[g2 * cpg + j / hw])
                            .collect();
                        let sum_dxhat: f32 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f32 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let df = slab as f32;
                        for j in 0..slab {
                            dx[base + j] = inv_std / df
                                * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                }
            }
        }
        if need_x {
            self.accum(x, &dx);
        }
        if need_g {
            self.accum(gamma, &dgamma);
        }
        if need_b {
            self.accum(beta, &dbeta);
        }
    }
}

fn zip_map(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
