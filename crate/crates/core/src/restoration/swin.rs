//! Windowed multi-head self-attention blocks.
//!
//! The deep feature extractor is a stack of residual blocks, each holding
//! several transformer layers that attend within non-overlapping spatial
//! windows. Every other layer cyclically shifts the grid by half a window so
//! information crosses window borders; wrapped positions are masked out of
//! the softmax.

use std::rc::Rc;

use crate::error::Result;
use crate::nn::{Binder, Conv2dLayer, LayerNormLayer, LinearLayer, ParamStore};
use crate::numerics::{DetRng, Tape, Tensor, Var};

/// Additive mask value for cross-group attention in shifted windows.
const MASK_NEG: f32 = -100.0;

/// Multi-head self-attention inside one window, with a learned relative
/// position bias per head.
pub struct WindowAttention {
    dim: usize,
    heads: usize,
    window: usize,
    wq: LinearLayer,
    wk: LinearLayer,
    wv: LinearLayer,
    proj: LinearLayer,
    rel_bias: crate::nn::ParamId,
    rel_index: Rc<Vec<usize>>,
}

impl WindowAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        rng: &mut DetRng,
    ) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by heads {heads}");
        let n = window * window;
        let side = 2 * window - 1;
        // index (i, j) -> relative offset bucket
        let mut rel_index = Vec::with_capacity(n * n);
        for i in 0..n {
            let (yi, xi) = (i / window, i % window);
            for j in 0..n {
                let (yj, xj) = (j / window, j % window);
                let dy = yi as isize - yj as isize + window as isize - 1;
                let dx = xi as isize - xj as isize + window as isize - 1;
                rel_index.push(dy as usize * side + dx as usize);
            }
        }
        let rel_bias = store.add(
            format!("{name}.rel_bias"),
            Tensor::randn(&[side * side, heads], 0.02, rng),
        );
        WindowAttention {
            dim,
            heads,
            window,
            wq: LinearLayer::new(store, &format!("{name}.wq"), dim, dim, rng),
            wk: LinearLayer::new(store, &format!("{name}.wk"), dim, dim, rng),
            wv: LinearLayer::new(store, &format!("{name}.wv"), dim, dim, rng),
            proj: LinearLayer::new(store, &format!("{name}.proj"), dim, dim, rng),
            rel_bias,
            rel_index: Rc::new(rel_index),
        }
    }

    /// `x` is `[B_, n, C]` window tokens; `mask`, when present, is a
    /// `[n_windows, heads, n, n]` additive constant tiled over the image
    /// batch. Output has the input shape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        x: Var,
        mask: Option<Var>,
    ) -> Var {
        let n = self.window * self.window;
        let batch_windows = tape.shape(x)[0];
        let dh = self.dim / self.heads;

        let q = self.wq.forward(tape, binder, store, x);
        let k = self.wk.forward(tape, binder, store, x);
        let v = self.wv.forward(tape, binder, store, x);
        let q = tape.split_heads(q, self.heads);
        let k = tape.split_heads(k, self.heads);
        let v = tape.split_heads(v, self.heads);

        let scores = tape.bmm(q, k, true);
        let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt());

        // relative position bias: gather -> [n*n, heads] -> [heads, n, n]
        let table = binder.var(tape, store, self.rel_bias);
        let gathered = tape.gather_rows(table, self.rel_index.clone());
        let bias = {
            // transpose [n*n, heads] -> [heads, n*n]
            let b3 = tape.reshape(gathered, &[1, n * n, self.heads]);
            let swapped = tape.split_heads(b3, self.heads); // [heads, n*n, 1]
            tape.reshape(swapped, &[self.heads, n, n])
        };
        let scores = {
            let grouped = tape.reshape(scores, &[batch_windows, self.heads, n, n]);
            let biased = tape.add_suffix(grouped, bias);
            let biased = match mask {
                Some(m) => {
                    let mask_sh = tape.shape(m).to_vec();
                    let images = batch_windows / mask_sh[0];
                    let v5 = tape.reshape(biased, &[images, mask_sh[0], self.heads, n, n]);
                    let masked = tape.add_suffix(v5, m);
                    tape.reshape(masked, &[batch_windows, self.heads, n, n])
                }
                None => biased,
            };
            tape.reshape(biased, &[batch_windows * self.heads, n, n])
        };

        let attn = tape.softmax(scores);
        let out = tape.bmm(attn, v, false);
        let out = tape.merge_heads(out, self.heads);
        self.proj.forward(tape, binder, store, out)
    }
}

/// One transformer layer: windowed attention and a token MLP, both behind
/// layer norms with residual connections. `shift > 0` cyclically shifts the
/// grid before windowing.
pub struct SwinLayer {
    pub shift: usize,
    window: usize,
    norm1: LayerNormLayer,
    attn: WindowAttention,
    norm2: LayerNormLayer,
    fc1: LinearLayer,
    fc2: LinearLayer,
}

impl SwinLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
        mlp_ratio: usize,
        rng: &mut DetRng,
    ) -> Self {
        SwinLayer {
            shift,
            window,
            norm1: LayerNormLayer::new(store, &format!("{name}.norm1"), dim),
            attn: WindowAttention::new(store, &format!("{name}.attn"), dim, heads, window, rng),
            norm2: LayerNormLayer::new(store, &format!("{name}.norm2"), dim),
            fc1: LinearLayer::new(store, &format!("{name}.fc1"), dim, dim * mlp_ratio, rng),
            fc2: LinearLayer::new(store, &format!("{name}.fc2"), dim * mlp_ratio, dim, rng),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var> {
        let sh = tape.shape(x).to_vec();
        let (n_img, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let win = self.window;

        // attention half
        let shifted = if self.shift > 0 {
            tape.roll2d(x, -(self.shift as isize), -(self.shift as isize))
        } else {
            x
        };
        let wins = tape.window_partition(shifted, win)?;
        let normed = self.norm1.forward(tape, binder, store, wins);
        let mask = if self.shift > 0 {
            Some(shift_mask(tape, h, w, win, self.shift, self.attn.heads))
        } else {
            None
        };
        let attn_out = self.attn.forward(tape, binder, store, normed, mask);
        let back = tape.window_reverse(attn_out, win, n_img, c, h, w)?;
        let unshifted = if self.shift > 0 {
            tape.roll2d(back, self.shift as isize, self.shift as isize)
        } else {
            back
        };
        let x = tape.add(x, unshifted);

        // mlp half (token layout reused from the unshifted grid)
        let tokens = tape.window_partition(x, win)?;
        let normed = self.norm2.forward(tape, binder, store, tokens);
        let hidden = self.fc1.forward(tape, binder, store, normed);
        let hidden = tape.silu(hidden);
        let mlp = self.fc2.forward(tape, binder, store, hidden);
        let mlp_spatial = tape.window_reverse(mlp, win, n_img, c, h, w)?;
        Ok(tape.add(x, mlp_spatial))
    }
}

/// Residual block: a stack of transformer layers plus a conv tail, added
/// back onto the block input.
pub struct ResidualBlock {
    layers: Vec<SwinLayer>,
    tail: Conv2dLayer,
}

impl ResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        layer_count: usize,
        rng: &mut DetRng,
    ) -> Self {
        let layers = (0..layer_count)
            .map(|i| {
                // shift every other layer by half a window
                let shift = if i % 2 == 1 { window / 2 } else { 0 };
                SwinLayer::new(
                    store,
                    &format!("{name}.stl{i}"),
                    dim,
                    heads,
                    window,
                    shift,
                    2,
                    rng,
                )
            })
            .collect();
        let tail = Conv2dLayer::new(store, &format!("{name}.tail"), dim, dim, 3, 1, 1, rng);
        // damp the residual branch at init so block outputs start close to
        // their inputs
        for v in &mut store.value_mut(tail.w).data {
            *v *= 0.1;
        }
        ResidualBlock { layers, tail }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, binder, store, h)?;
        }
        let h = self.tail.forward(tape, binder, store, h)?;
        Ok(tape.add(h, x))
    }
}

/// Attention mask for shifted windows: tokens from different pre-shift
/// regions must not attend to each other. Constant `[n_windows, heads, n, n]`.
fn shift_mask(tape: &mut Tape, h: usize, w: usize, win: usize, shift: usize, heads: usize) -> Var {
    let mut group = vec![0u8; h * w];
    let segments = |len: usize| [(0, len - win), (len - win, len - shift), (len - shift, len)];
    let mut id = 0u8;
    for (y0, y1) in segments(h) {
        for (x0, x1) in segments(w) {
            for y in y0..y1 {
                for x in x0..x1 {
                    group[y * w + x] = id;
                }
            }
            id += 1;
        }
    }
    let (nh, nw) = (h / win, w / win);
    let n = win * win;
    let mut mask = vec![0.0f32; nh * nw * heads * n * n];
    for wy in 0..nh {
        for wx in 0..nw {
            let widx = wy * nw + wx;
            for i in 0..n {
                let gi = group[(wy * win + i / win) * w + wx * win + i % win];
                for j in 0..n {
                    let gj = group[(wy * win + j / win) * w + wx * win + j % win];
                    if gi != gj {
                        for head in 0..heads {
                            mask[((widx * heads + head) * n + i) * n + j] = MASK_NEG;
                        }
                    }
                }
            }
        }
    }
    tape.constant(&[nh * nw, heads, n, n], mask)
}
