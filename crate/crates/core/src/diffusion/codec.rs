//! Latent codec: identity (pixel-space diffusion) or a small trained
//! autoencoder with x4 spatial compression.

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{Binder, Conv2dLayer, GroupNormLayer, ParamStore};
use crate::numerics::{DetRng, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecKind {
    Identity,
    TinyAe,
}

const AE_HIDDEN: usize = 16;
const AE_LATENT: usize = 4;

/// Encoder/decoder pair mapping images to the diffusion latent space.
///
/// `Identity` is exact and parameter-free. `TinyAe` is two strided conv
/// stages down (x4 total), mirrored nearest-up decoder, trained with plain
/// L2 reconstruction.
pub struct LatentCodec {
    pub kind: CodecKind,
    pub store: ParamStore,
    enc1: Option<Conv2dLayer>,
    enc_norm1: Option<GroupNormLayer>,
    enc2: Option<Conv2dLayer>,
    enc_norm2: Option<GroupNormLayer>,
    enc_out: Option<Conv2dLayer>,
    dec_in: Option<Conv2dLayer>,
    dec_norm1: Option<GroupNormLayer>,
    dec1: Option<Conv2dLayer>,
    dec_norm2: Option<GroupNormLayer>,
    dec2: Option<Conv2dLayer>,
}

impl LatentCodec {
    pub fn identity() -> Self {
        LatentCodec {
            kind: CodecKind::Identity,
            store: ParamStore::new(0.0),
            enc1: None,
            enc_norm1: None,
            enc2: None,
            enc_norm2: None,
            enc_out: None,
            dec_in: None,
            dec_norm1: None,
            dec1: None,
            dec_norm2: None,
            dec2: None,
        }
    }

    pub fn tiny_ae(lr: f32, seed: u64) -> Self {
        let mut store = ParamStore::new(lr);
        let mut rng = DetRng::new(seed, 0);
        let h = AE_HIDDEN;
        LatentCodec {
            kind: CodecKind::TinyAe,
            enc1: Some(Conv2dLayer::new(&mut store, "enc1", 3, h, 3, 2, 1, &mut rng)),
            enc_norm1: Some(GroupNormLayer::new(&mut store, "enc_norm1", h, 4)),
            enc2: Some(Conv2dLayer::new(&mut store, "enc2", h, h, 3, 2, 1, &mut rng)),
            enc_norm2: Some(GroupNormLayer::new(&mut store, "enc_norm2", h, 4)),
            enc_out: Some(Conv2dLayer::new(&mut store, "enc_out", h, AE_LATENT, 3, 1, 1, &mut rng)),
            dec_in: Some(Conv2dLayer::new(&mut store, "dec_in", AE_LATENT, h, 3, 1, 1, &mut rng)),
            dec_norm1: Some(GroupNormLayer::new(&mut store, "dec_norm1", h, 4)),
            dec1: Some(Conv2dLayer::new(&mut store, "dec1", h, h, 3, 1, 1, &mut rng)),
            dec_norm2: Some(GroupNormLayer::new(&mut store, "dec_norm2", h, 4)),
            dec2: Some(Conv2dLayer::new(&mut store, "dec2", h, 3, 3, 1, 1, &mut rng)),
            store,
        }
    }

    /// Latent channel count for this codec (image channels for identity).
    pub fn latent_channels(&self) -> usize {
        match self.kind {
            CodecKind::Identity => 3,
            CodecKind::TinyAe => AE_LATENT,
        }
    }

    /// Spatial compression factor.
    pub fn spatial_factor(&self) -> usize {
        match self.kind {
            CodecKind::Identity => 1,
            CodecKind::TinyAe => 4,
        }
    }

    pub fn encode_var(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        match self.kind {
            CodecKind::Identity => Ok(x),
            CodecKind::TinyAe => {
                let s = &self.store;
                let h = self.enc1.as_ref().unwrap().forward(tape, binder, s, x)?;
                let h = self.enc_norm1.as_ref().unwrap().forward(tape, binder, s, h);
                let h = tape.silu(h);
                let h = self.enc2.as_ref().unwrap().forward(tape, binder, s, h)?;
                let h = self.enc_norm2.as_ref().unwrap().forward(tape, binder, s, h);
                let h = tape.silu(h);
                self.enc_out.as_ref().unwrap().forward(tape, binder, s, h)
            }
        }
    }

    pub fn decode_var(&self, tape: &mut Tape, binder: &mut Binder, z: Var) -> Result<Var> {
        match self.kind {
            CodecKind::Identity => Ok(z),
            CodecKind::TinyAe => {
                let s = &self.store;
                let h = self.dec_in.as_ref().unwrap().forward(tape, binder, s, z)?;
                let h = self.dec_norm1.as_ref().unwrap().forward(tape, binder, s, h);
                let h = tape.silu(h);
                let h = tape.nearest_up2(h);
                let h = self.dec1.as_ref().unwrap().forward(tape, binder, s, h)?;
                let h = self.dec_norm2.as_ref().unwrap().forward(tape, binder, s, h);
                let h = tape.silu(h);
                let h = tape.nearest_up2(h);
                self.dec2.as_ref().unwrap().forward(tape, binder, s, h)
            }
        }
    }

    /// Encode an image tensor without recording gradients.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store);
        let xv = tape.input(x);
        let z = self.encode_var(&mut tape, &mut binder, xv)?;
        Ok(tape.value_tensor(z))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store);
        let zv = tape.input(z);
        let x = self.decode_var(&mut tape, &mut binder, zv)?;
        Ok(tape.value_tensor(x))
    }

    pub fn decode_to_image(&self, z: &Tensor) -> Result<Image> {
        Image::from_tensor(&self.decode(z)?)
    }
}

/// L2 reconstruction training for the tiny autoencoder.
pub fn train_codec(
    codec: &mut LatentCodec,
    dataset: &[Image],
    iterations: usize,
    batch: usize,
    seed: u64,
) -> Result<Vec<(usize, f32)>> {
    if codec.kind != CodecKind::TinyAe {
        return Err(Error::contract("only the tiny-ae codec is trainable"));
    }
    if dataset.is_empty() {
        return Err(Error::contract("training dataset is empty"));
    }
    let (h, w) = (dataset[0].height, dataset[0].width);
    let mut losses = Vec::with_capacity(iterations);
    for iteration in 0..iterations {
        let mut rng = DetRng::new(seed, iteration as u64);
        let mut data = Vec::with_capacity(batch * 3 * h * w);
        for _ in 0..batch {
            let idx = rng.uniform_int(0, dataset.len() as i64 - 1) as usize;
            data.extend_from_slice(&dataset[idx].to_tensor().data);
        }
        let x = Tensor::from_vec(&[batch, 3, h, w], data)?;

        let mut tape = Tape::new();
        let mut binder = Binder::new(&codec.store);
        let xv = tape.input(&x);
        let z = codec.encode_var(&mut tape, &mut binder, xv)?;
        let recon = codec.decode_var(&mut tape, &mut binder, z)?;
        let loss = tape.mse(recon, xv);
        let lv = tape.value(loss)[0];
        if !lv.is_finite() {
            return Err(Error::Training {
                iteration,
                message: format!("codec loss became {lv}"),
            });
        }
        tape.backward(loss)?;
        binder.harvest(&tape, &mut codec.store);
        codec.store.adam_step_all()?;
        losses.push((iteration, lv));
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::psnr;
    use crate::imaging::synth::{synth_dataset, DatasetSpec, Generator};

    #[test]
    fn identity_codec_is_exact() {
        let codec = LatentCodec::identity();
        let mut rng = DetRng::new(1, 0);
        let x = Tensor::randn(&[1, 3, 8, 8], 0.5, &mut rng);
        let z = codec.encode(&x).unwrap();
        assert_eq!(z.data, x.data);
        let back = codec.decode(&z).unwrap();
        assert_eq!(back.data, x.data);
    }

    #[test]
    fn tiny_ae_shapes_compress_by_four() {
        let codec = LatentCodec::tiny_ae(1e-3, 0);
        let x = Tensor::zeros(&[2, 3, 32, 32]);
        let z = codec.encode(&x).unwrap();
        assert_eq!(z.shape, vec![2, AE_LATENT, 8, 8]);
        let back = codec.decode(&z).unwrap();
        assert_eq!(back.shape, vec![2, 3, 32, 32]);
    }

    #[test]
    fn tiny_ae_trains_to_reasonable_reconstruction() {
        let data = synth_dataset(&DatasetSpec {
            count: 12,
            size: 32,
            generator: Generator::GaussianBlobs,
            seed: 4,
        })
        .unwrap();
        let (train, held) = data.split_at(10);
        let mut codec = LatentCodec::tiny_ae(2e-3, 7);
        let losses = train_codec(&mut codec, train, 300, 4, 11).unwrap();
        assert!(losses.last().unwrap().1 < losses[0].1);

        let mut worst = f64::INFINITY;
        for img in held {
            let z = codec.encode(&img.to_tensor()).unwrap();
            let recon = codec.decode_to_image(&z).unwrap();
            worst = worst.min(psnr(img, &recon).unwrap());
        }
        assert!(worst >= 25.0, "held-out reconstruction {worst} dB < 25 dB");
    }
}
