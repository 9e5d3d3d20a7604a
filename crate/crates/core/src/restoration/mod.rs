//! Stage-one restoration: a pixel-unshuffled window-attention regression
//! network trained with an L2 pixel loss against clean targets.
//!
//! The input is space-to-depth downsampled by `unshuffle_factor`, all
//! attention runs at the low resolution, shallow and deep features are
//! added, and a conv + nearest-upsample stack brings the result back to the
//! input size.

pub mod swin;
pub mod train;

pub use train::{synthesize_batch, train_restoration, train_with, TrainOptions, TrainReport};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{Binder, Conv2dLayer, ParamStore};
use crate::numerics::{DetRng, Tape, Var};
use swin::ResidualBlock;

/// Network hyperparameters. Desk defaults train on a laptop CPU in minutes;
/// `full_scale` holds the reference configuration the architecture is scaled
/// down from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestorationConfig {
    pub unshuffle_factor: usize,
    pub rstb_count: usize,
    pub stl_per_rstb: usize,
    pub heads: usize,
    pub window: usize,
    pub embed_dim: usize,
}

impl Default for RestorationConfig {
    fn default() -> Self {
        RestorationConfig {
            unshuffle_factor: 4,
            rstb_count: 2,
            stl_per_rstb: 2,
            heads: 2,
            window: 4,
            embed_dim: 32,
        }
    }
}

impl RestorationConfig {
    /// The reference full-scale configuration: x8 unshuffle, 8 residual
    /// blocks of 6 layers, 6 heads, window 8.
    pub fn full_scale() -> Self {
        RestorationConfig {
            unshuffle_factor: 8,
            rstb_count: 8,
            stl_per_rstb: 6,
            heads: 6,
            window: 8,
            embed_dim: 180,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.unshuffle_factor.is_power_of_two() {
            return Err(Error::contract(format!(
                "unshuffle factor must be a power of two for the x2 upsampler stages, got {}",
                self.unshuffle_factor
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::contract(format!(
                "embed dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.window < 2 || self.window % 2 != 0 {
            return Err(Error::contract(format!(
                "window must be even and >= 2 for shifted layers, got {}",
                self.window
            )));
        }
        Ok(())
    }

    /// Check an input size against the divisibility contracts.
    pub fn validate_input(&self, h: usize, w: usize) -> Result<()> {
        self.validate()?;
        let f = self.unshuffle_factor;
        if h % f != 0 || w % f != 0 {
            return Err(Error::contract(format!(
                "input {h}x{w} not divisible by unshuffle factor {f}"
            )));
        }
        if (h / f) % self.window != 0 || (w / f) % self.window != 0 {
            return Err(Error::contract(format!(
                "downsampled size {}x{} not divisible by window {}",
                h / f,
                w / f,
                self.window
            )));
        }
        Ok(())
    }
}

/// The restoration network and its parameters.
pub struct RestorationNet {
    pub config: RestorationConfig,
    pub store: ParamStore,
    shallow: Conv2dLayer,
    blocks: Vec<ResidualBlock>,
    deep_conv: Conv2dLayer,
    up_convs: Vec<Conv2dLayer>,
    out_conv: Conv2dLayer,
}

impl RestorationNet {
    pub fn new(config: RestorationConfig, lr: f32, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(lr);
        let mut rng = DetRng::new(seed, 0);
        let f = config.unshuffle_factor;
        let dim = config.embed_dim;
        let in_c = 3 * f * f;

        let shallow = Conv2dLayer::new(&mut store, "shallow", in_c, dim, 3, 1, 1, &mut rng);
        let blocks = (0..config.rstb_count)
            .map(|i| {
                ResidualBlock::new(
                    &mut store,
                    &format!("rstb{i}"),
                    dim,
                    config.heads,
                    config.window,
                    config.stl_per_rstb,
                    &mut rng,
                )
            })
            .collect();
        let deep_conv = Conv2dLayer::new(&mut store, "deep_conv", dim, dim, 3, 1, 1, &mut rng);
        let stages = f.trailing_zeros() as usize; // log2(f)
        let up_convs = (0..stages)
            .map(|i| Conv2dLayer::new(&mut store, &format!("up{i}"), dim, dim, 3, 1, 1, &mut rng))
            .collect();
        let out_conv = Conv2dLayer::new(&mut store, "out", dim, 3, 3, 1, 1, &mut rng);
        // the head predicts a correction on top of the input, so start it
        // small: the net opens as a near-identity and learns to subtract
        // degradations from there
        for v in &mut store.value_mut(out_conv.w).data {
            *v *= 0.1;
        }

        Ok(RestorationNet {
            config,
            store,
            shallow,
            blocks,
            deep_conv,
            up_convs,
            out_conv,
        })
    }

    /// Differentiable forward over a `[N,3,H,W]` batch; output is the same
    /// shape, clamped into `[0,1]` at the module boundary.
    pub fn forward_var(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let sh = tape.shape(x).to_vec();
        if sh.len() != 4 || sh[1] != 3 {
            return Err(Error::contract(format!(
                "restoration input must be [N,3,H,W], got {sh:?}"
            )));
        }
        self.config.validate_input(sh[2], sh[3])?;
        let f = self.config.unshuffle_factor;

        let packed = tape.pixel_unshuffle(x, f)?;
        let shallow = self.shallow.forward(tape, binder, &self.store, packed)?;

        let mut deep = shallow;
        for block in &self.blocks {
            deep = block.forward(tape, binder, &self.store, deep)?;
        }
        let deep = self.deep_conv.forward(tape, binder, &self.store, deep)?;
        let mut fused = tape.add(shallow, deep);

        for up in &self.up_convs {
            fused = tape.nearest_up2(fused);
            fused = up.forward(tape, binder, &self.store, fused)?;
            fused = tape.leaky_relu(fused, 0.2);
        }
        let correction = self.out_conv.forward(tape, binder, &self.store, fused)?;
        let out = tape.add(x, correction);
        Ok(tape.clamp01(out))
    }

    /// Restore one image (inference path).
    pub fn forward(&self, lq: &Image) -> Result<Image> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store);
        let x = tape.input(&lq.to_tensor());
        let out = self.forward_var(&mut tape, &mut binder, x)?;
        Image::from_tensor(&tape.value_tensor(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn desk_net(seed: u64) -> RestorationNet {
        RestorationNet::new(RestorationConfig::default(), 1e-3, seed).unwrap()
    }

    #[test]
    fn forward_preserves_dims_for_divisible_inputs() {
        let net = desk_net(1);
        for size in [32usize, 64] {
            let mut rng = DetRng::new(2, 0);
            let img = Image::from_pixels(
                size,
                size,
                3,
                (0..size * size * 3).map(|_| rng.uniform() as f32).collect(),
            )
            .unwrap();
            let out = net.forward(&img).unwrap();
            assert_eq!((out.height, out.width, out.channels), (size, size, 3));
            assert!(out.pixels.iter().all(|p| p.is_finite()));
            assert!(out.in_unit_range());
        }
    }

    #[test]
    fn indivisible_input_is_a_contract_error() {
        let net = desk_net(3);
        let img = Image::new(30, 32, 3);
        assert!(net.forward(&img).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = RestorationConfig::default();
        c.unshuffle_factor = 3;
        assert!(RestorationNet::new(c, 1e-3, 0).is_err());
        let mut c = RestorationConfig::default();
        c.embed_dim = 30;
        c.heads = 4;
        assert!(RestorationNet::new(c, 1e-3, 0).is_err());
    }

    /// With the deep-extraction output conv zeroed, the network reduces to
    /// the shallow path through the upsampler (plus the global skip).
    #[test]
    fn zeroed_deep_conv_leaves_only_the_shallow_path() {
        let mut net = desk_net(4);
        for p in net.store.iter_mut() {
            if p.name.starts_with("deep_conv.") {
                p.value.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut rng = DetRng::new(5, 0);
        let img = Image::from_pixels(
            32,
            32,
            3,
            (0..32 * 32 * 3).map(|_| rng.uniform() as f32).collect(),
        )
        .unwrap();

        // reference: shallow conv -> upsampler -> out conv -> skip add,
        // no deep stack
        let mut tape = Tape::new();
        let mut binder = Binder::new(&net.store);
        let x = tape.input(&img.to_tensor());
        let packed = tape.pixel_unshuffle(x, 4).unwrap();
        let mut h = net
            .shallow
            .forward(&mut tape, &mut binder, &net.store, packed)
            .unwrap();
        for up in &net.up_convs {
            h = tape.nearest_up2(h);
            h = up.forward(&mut tape, &mut binder, &net.store, h).unwrap();
            h = tape.leaky_relu(h, 0.2);
        }
        let corr = net
            .out_conv
            .forward(&mut tape, &mut binder, &net.store, h)
            .unwrap();
        let out = tape.add(x, corr);
        let out = tape.clamp01(out);
        let reference = tape.value(out).to_vec();

        let full = net.forward(&img).unwrap();
        let full_t = full.to_tensor();
        for (a, b) in full_t.data.iter().zip(&reference) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_is_differentiable_end_to_end() {
        let net = desk_net(6);
        let mut rng = DetRng::new(7, 0);
        let x = Tensor::randn(&[1, 3, 32, 32], 0.3, &mut rng);
        let target = Tensor::randn(&[1, 3, 32, 32], 0.3, &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&net.store);
        let xv = tape.input(&x);
        let tv = tape.input(&target);
        let out = net.forward_var(&mut tape, &mut binder, xv).unwrap();
        let loss = tape.mse(out, tv);
        tape.backward(loss).unwrap();
        let mut store = net.store.clone();
        binder.harvest(&tape, &mut store);
        let with_grad = store.iter().filter(|p| p.value.grad.is_some()).count();
        assert_eq!(with_grad, store.len());
    }
}
