//! Gradient and operator checks for the tape.
//!
//! Every differentiable op is validated against central finite differences
//! (h = 1e-3, relative error metric `|a-b| / max(1, |a|, |b|)`), and conv2d
//! additionally against a plain nested-loop correlation oracle.

use std::rc::Rc;

use super::rng::DetRng;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

const FD_H: f32 = 1e-3;
const FD_TOL: f64 = 1e-3;

fn rand_tensor(shape: &[usize], rng: &mut DetRng) -> Tensor {
    let mut t = Tensor::randn(shape, 0.5, rng);
    t.requires_grad = true;
    t
}

/// Nudge values away from zero so kinked activations (leaky relu, clamp)
/// are finite-difference friendly.
fn rand_tensor_off_kink(shape: &[usize], rng: &mut DetRng) -> Tensor {
    let mut t = rand_tensor(shape, rng);
    for v in &mut t.data {
        if v.abs() < 0.05 {
            *v += 0.1_f32.copysign(*v + 1e-12);
        }
    }
    t
}

/// Check analytic gradients of `build` against central finite differences
/// for every element of every input.
///
/// The scalar objective is a weighted sum of the builder's output with fixed
/// pseudo-random weights, so every output element influences the loss. The
/// analytic pass takes it through the tape; the numeric pass reduces the f32
/// forward outputs in f64, which keeps the final-rounding noise out of the
/// difference quotient.
fn fd_check(name: &str, inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
    let out = build(&mut tape, &vars);

    let mut wrng = DetRng::new(0xFD, 999);
    let weights: Vec<f32> = (0..tape.value(out).len())
        .map(|_| wrng.normal_f32())
        .collect();

    let out_shape = tape.shape(out).to_vec();
    let wv = tape.constant(&out_shape, weights.clone());
    let prod = tape.mul(out, wv);
    let loss = tape.sum_all(prod);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("input gradient missing").to_vec())
        .collect();

    let eval = |tensors: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = tensors.iter().map(|x| t.input(x)).collect();
        let o = build(&mut t, &vs);
        t.value(o)
            .iter()
            .zip(&weights)
            .map(|(&y, &w)| y as f64 * w as f64)
            .sum()
    };

    for (pi, input) in inputs.iter().enumerate() {
        for ei in 0..input.data.len() {
            let mut plus = inputs.to_vec();
            plus[pi].data[ei] += FD_H;
            let mut minus = inputs.to_vec();
            minus[pi].data[ei] -= FD_H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_H as f64);
            let a = analytic[pi][ei] as f64;
            let denom = 1.0_f64.max(a.abs()).max(numeric.abs());
            let rel = (a - numeric).abs() / denom;
            assert!(
                rel <= FD_TOL,
                "{name}: input {pi} elem {ei}: analytic {a} vs fd {numeric} (rel {rel})"
            );
        }
    }
}

// ── conv2d vs nested-loop oracle ───────────────────────────────────────

/// Direct correlation, written independently of the tape implementation.
fn conv2d_oracle(
    x: &Tensor,
    w: &Tensor,
    b: Option<&[f32]>,
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f32; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |bv| bv[oi]);
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((ni * c + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((oi * c + ci) * kh + ky) * kw + kx;
                                acc += x.data[xi] * w.data[wi];
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_zero_input_gives_zero_output() {
    let mut tape = Tape::new();
    let x = tape.constant(&[1, 1, 3, 3], vec![0.0; 9]);
    let w = tape.constant(&[2, 1, 3, 3], (0..18).map(|i| i as f32).collect());
    let b = tape.constant(&[2], vec![0.0, 0.0]);
    let y = tape.conv2d(x, w, Some(b), 1, 1).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_identity_kernel_is_identity() {
    let mut rng = DetRng::new(1, 0);
    let x = Tensor::randn(&[1, 1, 5, 4], 1.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.input(&x);
    let w = tape.constant(&[1, 1, 1, 1], vec![1.0]);
    let y = tape.conv2d(xv, w, None, 1, 0).unwrap();
    assert_eq!(tape.value(y), &x.data[..]);
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let mut rng = DetRng::new(2, 0);
    for trial in 0..10 {
        let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3], 1.0, &mut rng);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let mut tape = Tape::new();
            let xv = tape.input(&x);
            let wv = tape.input(&w);
            let bv = tape.input(&b);
            let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
            let expect = conv2d_oracle(&x, &w, Some(&b.data), stride, pad);
            for (a, e) in tape.value(y).iter().zip(&expect) {
                assert!(
                    (a - e).abs() <= 1e-6 * e.abs().max(1.0),
                    "trial {trial} stride {stride} pad {pad}: {a} vs {e}"
                );
            }
        }
    }
}

#[test]
fn conv2d_shape_errors_name_the_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(&[1, 2, 4, 4], vec![0.0; 32]);
    let w = tape.constant(&[1, 3, 3, 3], vec![0.0; 27]);
    let err = tape.conv2d(x, w, None, 1, 1).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("axis 1"), "unexpected error: {msg}");
}

#[test]
fn conv2d_is_linear_in_its_input() {
    let mut rng = DetRng::new(3, 0);
    let x = Tensor::randn(&[1, 2, 6, 6], 1.0, &mut rng);
    let y = Tensor::randn(&[1, 2, 6, 6], 1.0, &mut rng);
    let w = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng);
    let (a, b) = (0.7f32, -1.3f32);

    let run = |input: &Tensor| -> Vec<f32> {
        let mut tape = Tape::new();
        let xv = tape.input(input);
        let wv = tape.input(&w);
        let out = tape.conv2d(xv, wv, None, 1, 1).unwrap();
        tape.value(out).to_vec()
    };
    let mut combo = x.clone();
    for (ci, (xi, yi)) in x.data.iter().zip(&y.data).enumerate() {
        combo.data[ci] = a * xi + b * yi;
    }
    let lhs = run(&combo);
    let rx = run(&x);
    let ry = run(&y);
    for i in 0..lhs.len() {
        let rhs = a * rx[i] + b * ry[i];
        assert!((lhs[i] - rhs).abs() <= 1e-5, "{} vs {}", lhs[i], rhs);
    }
}

// ── backward basics ────────────────────────────────────────────────────

#[test]
fn backward_of_sum_is_ones() {
    let mut rng = DetRng::new(4, 0);
    let x = rand_tensor(&[2, 3], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.input(&x);
    let loss = tape.sum_all(xv);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(xv).unwrap(), &[1.0f32; 6][..]);
}

#[test]
fn backward_of_sum_of_squares() {
    let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap().with_grad();
    let mut tape = Tape::new();
    let xv = tape.input(&x);
    let sq = tape.mul(xv, xv);
    let loss = tape.sum_all(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(xv).unwrap(), &[2.0, 4.0, 6.0][..]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let x = Tensor::zeros(&[2]).with_grad();
    let mut tape = Tape::new();
    let xv = tape.input(&x);
    assert!(tape.backward(xv).is_err());
}

#[test]
fn backward_consumes_the_tape() {
    let x = Tensor::zeros(&[1]).with_grad();
    let mut tape = Tape::new();
    let xv = tape.input(&x);
    let loss = tape.sum_all(xv);
    tape.backward(loss).unwrap();
    assert!(tape.backward(loss).is_err());
}

// ── finite-difference suite, one test per layer family ────────────────

#[test]
fn fd_elementwise_ops() {
    for trial in 0..20 {
        let mut rng = DetRng::new(100 + trial, 0);
        let a = rand_tensor(&[2, 3], &mut rng);
        let b = rand_tensor(&[2, 3], &mut rng);
        fd_check("add/mul/sub/scale", &[a, b], |t, v| {
            let s = t.add(v[0], v[1]);
            let m = t.mul(s, v[1]);
            let d = t.sub(m, v[0]);
            let sc = t.scale(d, 1.7);
            sc
        });
    }
}

#[test]
fn fd_conv2d() {
    for trial in 0..20 {
        let mut rng = DetRng::new(200 + trial, 0);
        let x = rand_tensor(&[1, 2, 5, 5], &mut rng);
        let w = rand_tensor(&[2, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[2], &mut rng);
        let stride = 1 + (trial % 2) as usize;
        fd_check("conv2d", &[x, w, b], move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, 1).unwrap();
            y
        });
    }
}

#[test]
fn fd_linear_and_bias_adds() {
    for trial in 0..20 {
        let mut rng = DetRng::new(300 + trial, 0);
        let x = rand_tensor(&[2, 3, 4], &mut rng);
        let w = rand_tensor(&[5, 4], &mut rng);
        let b = rand_tensor(&[5], &mut rng);
        fd_check("linear", &[x, w, b], |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]));
            y
        });

        let mut rng = DetRng::new(350 + trial, 0);
        let x = rand_tensor(&[2, 3, 2, 2], &mut rng);
        let cb = rand_tensor(&[3], &mut rng);
        let sc = rand_tensor(&[2, 3], &mut rng);
        let suf = rand_tensor(&[2, 2], &mut rng);
        fd_check("bias adds", &[x, cb, sc, suf], |t, v| {
            let y = t.add_channel_bias(v[0], v[1]);
            let y = t.add_sample_channel(y, v[2]);
            let y = t.add_suffix(y, v[3]);
            y
        });
    }
}

#[test]
fn fd_bmm_both_layouts() {
    for trial in 0..20 {
        let mut rng = DetRng::new(400 + trial, 0);
        let a = rand_tensor(&[3, 2, 4], &mut rng);
        let b = rand_tensor(&[3, 4, 2], &mut rng);
        fd_check("bmm", &[a, b], |t, v| {
            let y = t.bmm(v[0], v[1], false);
            y
        });
        let mut rng = DetRng::new(450 + trial, 0);
        let a = rand_tensor(&[3, 2, 4], &mut rng);
        let bt = rand_tensor(&[3, 2, 4], &mut rng);
        fd_check("bmm trans_b", &[a, bt], |t, v| {
            let y = t.bmm(v[0], v[1], true);
            y
        });
    }
}

#[test]
fn fd_softmax_and_norms() {
    for trial in 0..20 {
        let mut rng = DetRng::new(500 + trial, 0);
        let x = rand_tensor(&[2, 3, 4], &mut rng);
        fd_check("softmax", &[x], |t, v| {
            let y = t.softmax(v[0]);
            y
        });

        let mut rng = DetRng::new(550 + trial, 0);
        let x = rand_tensor(&[2, 3, 4], &mut rng);
        let g = rand_tensor(&[4], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        fd_check("layer_norm", &[x, g, b], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5);
            y
        });

        let mut rng = DetRng::new(570 + trial, 0);
        let x = rand_tensor(&[2, 4, 3, 3], &mut rng);
        let g = rand_tensor(&[4], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        fd_check("group_norm", &[x, g, b], |t, v| {
            let y = t.group_norm(v[0], v[1], v[2], 2, 1e-5);
            y
        });
    }
}

#[test]
fn fd_activations() {
    for trial in 0..20 {
        let mut rng = DetRng::new(600 + trial, 0);
        let x = rand_tensor_off_kink(&[3, 5], &mut rng);
        fd_check("leaky_relu", &[x], |t, v| {
            let y = t.leaky_relu(v[0], 0.2);
            y
        });
        let mut rng = DetRng::new(650 + trial, 0);
        let x = rand_tensor(&[3, 5], &mut rng);
        fd_check("silu", &[x], |t, v| {
            let y = t.silu(v[0]);
            y
        });
        // keep inputs inside (0,1) so the clamp is differentiable there
        let mut rng = DetRng::new(680 + trial, 0);
        let mut x = rand_tensor(&[3, 5], &mut rng);
        for v in &mut x.data {
            *v = 0.1 + 0.8 * (v.sin() * 0.5 + 0.5);
        }
        fd_check("clamp01 interior", &[x], |t, v| {
            let y = t.clamp01(v[0]);
            y
        });
    }
}

#[test]
fn fd_rearrangements() {
    for trial in 0..20 {
        let mut rng = DetRng::new(700 + trial, 0);
        let x = rand_tensor(&[1, 2, 4, 4], &mut rng);
        fd_check("pixel shuffle round trip", &[x], |t, v| {
            let u = t.pixel_unshuffle(v[0], 2).unwrap();
            let s = t.pixel_shuffle(u, 2).unwrap();
            s
        });

        let mut rng = DetRng::new(730 + trial, 0);
        let x = rand_tensor(&[1, 2, 4, 4], &mut rng);
        fd_check("up2/window/roll", &[x], |t, v| {
            let up = t.nearest_up2(v[0]);
            let rolled = t.roll2d(up, -1, 2);
            let wins = t.window_partition(rolled, 4).unwrap();
            let back = t.window_reverse(wins, 4, 1, 2, 8, 8).unwrap();
            back
        });

        let mut rng = DetRng::new(760 + trial, 0);
        let a = rand_tensor(&[1, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[1, 1, 3, 3], &mut rng);
        fd_check("concat_channels", &[a, b], |t, v| {
            let y = t.concat_channels(v[0], v[1]);
            y
        });

        let mut rng = DetRng::new(790 + trial, 0);
        let x = rand_tensor(&[2, 4, 6], &mut rng);
        fd_check("split/merge heads + reshape", &[x], |t, v| {
            let s = t.split_heads(v[0], 2);
            let m = t.merge_heads(s, 2);
            let r = t.reshape(m, &[2, 24]);
            r
        });

        let mut rng = DetRng::new(820 + trial, 0);
        let table = rand_tensor(&[5, 3], &mut rng);
        let idx = Rc::new(vec![0usize, 2, 2, 4, 1, 0]);
        fd_check("gather_rows", &[table], |t, v| {
            let y = t.gather_rows(v[0], idx.clone());
            y
        });
    }
}

#[test]
fn fd_attention_composite() {
    // q/k/v projections + softmax + weighted sum, the full attention core.
    for trial in 0..20 {
        let mut rng = DetRng::new(900 + trial, 0);
        let x = rand_tensor(&[2, 4, 6], &mut rng);
        let wq = rand_tensor(&[6, 6], &mut rng);
        let wk = rand_tensor(&[6, 6], &mut rng);
        let wv = rand_tensor(&[6, 6], &mut rng);
        fd_check("attention core", &[x, wq, wk, wv], |t, v| {
            let q = t.linear(v[0], v[1], None);
            let k = t.linear(v[0], v[2], None);
            let val = t.linear(v[0], v[3], None);
            let q = t.split_heads(q, 2);
            let k = t.split_heads(k, 2);
            let val = t.split_heads(val, 2);
            let scores = t.bmm(q, k, true);
            let scores = t.scale(scores, 1.0 / (3.0f32).sqrt());
            let attn = t.softmax(scores);
            let out = t.bmm(attn, val, false);
            let out = t.merge_heads(out, 2);
            out
        });
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = DetRng::new(42, 7);
    let x = Tensor::randn(&[4, 3, 8], 2.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.input(&x);
    let y = tape.softmax(xv);
    let out = tape.value(y);
    for r in 0..12 {
        let s: f32 = out[r * 8..(r + 1) * 8].iter().sum();
        assert!((s - 1.0).abs() <= 1e-6, "row {r} sums to {s}");
    }
}

#[test]
fn pixel_unshuffle_matches_spec_example() {
    // f=2 on [[1,2],[3,4]] -> shape [1,4,1,1] holding {1,2,3,4}
    let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.input(&x);
    let y = tape.pixel_unshuffle(xv, 2).unwrap();
    assert_eq!(tape.shape(y), &[1, 4, 1, 1]);
    assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 4.0][..]);
}

#[test]
fn pixel_shuffle_inverts_unshuffle_bit_exactly() {
    let mut rng = DetRng::new(9, 0);
    let x = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.input(&x);
    let u = tape.pixel_unshuffle(xv, 4).unwrap();
    let s = tape.pixel_shuffle(u, 4).unwrap();
    assert_eq!(tape.value(s), &x.data[..]);

    // multiset preservation on the unshuffled form
    let mut a = x.data.clone();
    let mut b = tape.value(u).to_vec();
    a.sort_by(f32::total_cmp);
    b.sort_by(f32::total_cmp);
    assert_eq!(a, b);
}

#[test]
fn window_partition_reverse_roundtrip() {
    let mut rng = DetRng::new(10, 0);
    let x = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.input(&x);
    let wins = tape.window_partition(xv, 4).unwrap();
    assert_eq!(tape.shape(wins), &[2 * 4, 16, 3]);
    let back = tape.window_reverse(wins, 4, 2, 3, 8, 8).unwrap();
    assert_eq!(tape.value(back), &x.data[..]);
}

#[test]
fn roll2d_round_trips_and_shifts() {
    let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.input(&x);
    let r = tape.roll2d(xv, 1, 0);
    assert_eq!(tape.value(r), &[3.0, 4.0, 1.0, 2.0][..]);
    let back = tape.roll2d(r, -1, 0);
    assert_eq!(tape.value(back), &x.data[..]);
}

#[test]
fn finite_outputs_on_finite_inputs() {
    let mut rng = DetRng::new(11, 0);
    let x = Tensor::randn(&[1, 4, 8, 8], 3.0, &mut rng);
    let w = Tensor::randn(&[4, 4, 3, 3], 3.0, &mut rng);
    let g = Tensor::full(&[4], 1.0);
    let b = Tensor::zeros(&[4]);
    let mut tape = Tape::new();
    let xv = tape.input(&x);
    let wv = tape.input(&w);
    let gv = tape.input(&g);
    let bv = tape.input(&b);
    let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
    let y = tape.group_norm(y, gv, bv, 2, 1e-5);
    let y = tape.silu(y);
    assert!(tape.value(y).iter().all(|v| v.is_finite()));
}
