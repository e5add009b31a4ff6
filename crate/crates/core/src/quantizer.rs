//! Virtual image save: decoder output to 8-bit pixel values without leaving
//! the computation graph.
//!
//! Forward: clamp to `[-1, 1]`, map affinely onto `[0, 255]`, round half
//! away from zero. Backward: rounding is treated as the identity, so the
//! gradient is `255 / 2` inside `(-1, 1)` and zero where the clamp is active.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Pixel scale applied after clamping: `(x + 1) * 127.5`.
pub const PIXEL_SCALE: f64 = 127.5;

/// How the rounding step is treated on the taped path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rounding {
    /// Round in the forward pass, identity in the backward pass.
    StraightThrough,
    /// Skip rounding entirely; used to check the straight-through gradient.
    Disabled,
}

/// `c x h x w` image whose entries are integers in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedImage<S> {
    values: Tensor<S>,
    source_range: (f64, f64),
}

impl<S: Scalar> QuantizedImage<S> {
    /// Wrap pixel values, checking they are integral and in range.
    pub fn from_pixels(values: Tensor<S>) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::InvalidArgument(format!("image must be c x h x w, got {:?}", values.shape())));
        }
        let ok = values.data().iter().all(|&v| v >= S::zero() && v <= S::of(255.0) && v == v.round());
        if !ok {
            return Err(Error::InvalidArgument("pixel values must be integers in [0, 255]".into()));
        }
        Ok(Self { values, source_range: (-1.0, 1.0) })
    }

    pub fn values(&self) -> &Tensor<S> {
        &self.values
    }

    pub fn source_range(&self) -> (f64, f64) {
        self.source_range
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.values.shape();
        [s[0], s[1], s[2]]
    }

    /// Map back into the decoder range: `v / 127.5 - 1`.
    pub fn unscale(&self) -> Tensor<S> {
        let s = S::of(PIXEL_SCALE);
        self.values.map(|v| v / s - S::one())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.values.data().iter().map(|v| v.to_u8().unwrap_or(0)).collect()
    }

    /// Write as a lossless PNG (1 channel: grayscale, 3 channels: RGB).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let [c, h, w] = self.shape();
        let bytes = self.to_bytes();
        let plane = h * w;
        match c {
            1 => GrayImage::from_raw(w as u32, h as u32, bytes)
                .ok_or_else(|| Error::Format("pixel buffer size".into()))?
                .save(path)?,
            3 => {
                let mut img = RgbImage::new(w as u32, h as u32);
                for (i, px) in img.pixels_mut().enumerate() {
                    px.0 = [bytes[i], bytes[plane + i], bytes[2 * plane + i]];
                }
                img.save(path)?
            }
            _ => return Err(Error::InvalidArgument(format!("cannot save {c}-channel image"))),
        }
        Ok(())
    }

    /// Read a PNG written by [`QuantizedImage::save_png`] (or any 8-bit image).
    pub fn load_png(path: &Path, channels: usize) -> Result<Self> {
        let img = image::open(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let values = match channels {
            1 => {
                let g = img.to_luma8();
                Tensor::new(&[1, h, w], g.pixels().map(|p| S::of(p.0[0] as f64)).collect())?
            }
            3 => {
                let rgb = img.to_rgb8();
                let mut data = vec![S::zero(); 3 * h * w];
                for (i, p) in rgb.pixels().enumerate() {
                    for ch in 0..3 {
                        data[ch * h * w + i] = S::of(p.0[ch] as f64);
                    }
                }
                Tensor::new(&[3, h, w], data)?
            }
            _ => return Err(Error::InvalidArgument(format!("cannot load {channels}-channel image"))),
        };
        Self::from_pixels(values)
    }
}

fn quantize_scalar<S: Scalar>(v: S) -> S {
    let s = S::of(PIXEL_SCALE);
    // `round` is half-away-from-zero; every value here is non-negative
    ((v.max(-S::one()).min(S::one()) + S::one()) * s).round()
}

/// Forward-only virtual save of a `c x h x w` decoder output.
pub fn virtual_save<S: Scalar>(x: &Tensor<S>) -> Result<QuantizedImage<S>> {
    if !x.is_finite() {
        return Err(Error::NonFinite("image passed to virtual save".into()));
    }
    if x.shape().len() != 3 {
        return Err(Error::InvalidArgument(format!("image must be c x h x w, got {:?}", x.shape())));
    }
    Ok(QuantizedImage { values: x.map(quantize_scalar), source_range: (-1.0, 1.0) })
}

/// Taped virtual save of a batched decoder output.
pub fn virtual_save_on<S: Scalar>(tape: &mut Tape<S>, x: Var, rounding: Rounding) -> Result<Var> {
    if !tape.value(x).is_finite() {
        return Err(Error::NonFinite("image passed to virtual save".into()));
    }
    let c = tape.clamp(x, -S::one(), S::one());
    let scaled = tape.affine(c, S::of(PIXEL_SCALE), S::of(PIXEL_SCALE));
    Ok(match rounding {
        Rounding::StraightThrough => tape.round_ste(scaled),
        Rounding::Disabled => scaled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn endpoints_map_to_0_and_255() {
        let lo = virtual_save(&Tensor::<f32>::full(&[1, 2, 2], -1.0)).unwrap();
        let hi = virtual_save(&Tensor::<f32>::full(&[1, 2, 2], 1.0)).unwrap();
        assert!(lo.values().data().iter().all(|&v| v == 0.0));
        assert!(hi.values().data().iter().all(|&v| v == 255.0));
    }

    #[test]
    fn midpoint_rounds_half_away_from_zero() {
        // scalar oracle: (0 + 1) * 127.5 = 127.5, which rounds away from zero to 128
        assert_eq!(127.5f64.round(), 128.0);
        let mid = virtual_save(&Tensor::<f64>::zeros(&[3, 2, 2])).unwrap();
        assert!(mid.values().data().iter().all(|&v| v == 128.0));
    }

    #[test]
    fn out_of_range_values_are_clamped() {
        let q = virtual_save(&Tensor::<f64>::new(&[1, 1, 2], vec![-3.0, 7.5]).unwrap()).unwrap();
        assert_eq!(q.values().data(), &[0.0, 255.0]);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        assert!(virtual_save(&Tensor::<f32>::new(&[1, 1, 1], vec![f32::NAN]).unwrap()).is_err());
    }

    #[test]
    fn gradient_is_half_of_255_inside_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(&[1, 1, 4, 4], &mut rng).map(|v| v.clamp(-0.99, 0.99));
        let mut tape = Tape::new();
        let xv = tape.leaf(x, true);
        let q = virtual_save_on(&mut tape, xv, Rounding::StraightThrough).unwrap();
        let s = tape.sum(q);
        let g = tape.backward(s).unwrap();
        assert!(g.get(xv).unwrap().data().iter().all(|&v| v == 127.5));
    }

    #[test]
    fn png_roundtrip_preserves_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dir = tempfile::tempdir().unwrap();
        for c in [1, 3] {
            let q = virtual_save(&Tensor::<f32>::randn(&[c, 5, 7], &mut rng)).unwrap();
            let path = dir.path().join(format!("img{c}.png"));
            q.save_png(&path).unwrap();
            let back = QuantizedImage::<f32>::load_png(&path, c).unwrap();
            assert_eq!(back.values(), q.values());
        }
    }

    proptest::proptest! {
        #[test]
        fn save_is_idempotent_through_unscale(vals in proptest::collection::vec(-2.0f64..2.0, 12)) {
            let x = Tensor::new(&[3, 2, 2], vals).unwrap();
            let q = virtual_save(&x).unwrap();
            let again = virtual_save(&q.unscale()).unwrap();
            proptest::prop_assert_eq!(again.values(), q.values());
        }
    }
}
