//! Invertible latent codec: space-time patchify plus a fixed affine map.
//!
//! Pixels in [0,1] are rearranged into per-cell channel blocks and mapped by
//! `(x - 0.5) * 2` into [-1,1]. No learning, no information loss: `decode`
//! inverts `encode` exactly on quantized pixel data (the affine is evaluated
//! in f64 and rounded once to the storage type).

use ndarray::{Array2, Array3, Array4};

use crate::error::{Error, Result};
use crate::tape::Real;

/// Compression ratios along (t, h, w). Channel count follows from
/// losslessness: `C = 3 * ct * ch * cw`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodecConfig {
    pub ct: usize,
    pub ch: usize,
    pub cw: usize,
}

impl CodecConfig {
    /// Toy default.
    pub fn new(ct: usize, ch: usize, cw: usize) -> Self {
        assert!(ct >= 1 && ch >= 1 && cw >= 1);
        CodecConfig { ct, ch, cw }
    }

    /// Compression profile of the reference base model family.
    pub fn base_profile() -> Self {
        CodecConfig { ct: 4, ch: 8, cw: 8 }
    }

    pub fn channels(&self) -> usize {
        3 * self.ct * self.ch * self.cw
    }

    /// Latent grid dims for a (T,H,W) pixel video.
    pub fn grid(&self, t: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        if t % self.ct != 0 || h % self.ch != 0 || w % self.cw != 0 {
            return Err(Error::Shape(format!(
                "video dims ({t},{h},{w}) not divisible by compression ratios ({},{},{})",
                self.ct, self.ch, self.cw
            )));
        }
        Ok((t / self.ct, h / self.ch, w / self.cw))
    }
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig { ct: 2, ch: 4, cw: 4 }
    }
}

/// Token grid over (T',H',W') with C channels; the `z` of the diffusion
/// process.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo<F> {
    pub data: Array4<F>,
}

impl<F: Real> LatentVideo<F> {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    /// Flatten to (S, C) token rows in (t, h, w) row-major order.
    pub fn to_tokens(&self) -> Array2<F> {
        let (t, h, w, c) = self.data.dim();
        let flat = self.data.as_standard_layout().to_owned();
        flat.into_shape_with_order((t * h * w, c)).expect("contiguous latent")
    }

    pub fn from_tokens(tokens: Array2<F>, grid: (usize, usize, usize)) -> Self {
        let (t, h, w) = grid;
        let c = tokens.dim().1;
        assert_eq!(tokens.dim().0, t * h * w, "token count vs grid");
        let data = tokens.into_shape_with_order((t, h, w, c)).expect("contiguous tokens");
        LatentVideo { data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn norm_fwd<F: Real>(x: F) -> F {
    F::lit((x.to_f64_() - 0.5) * 2.0)
}

fn norm_inv<F: Real>(y: F) -> F {
    F::lit(y.to_f64_() / 2.0 + 0.5)
}

/// Channel index of (dt, dh, dw, rgb) inside a cell.
#[inline]
fn chan(cfg: &CodecConfig, dt: usize, dh: usize, dw: usize, rgb: usize) -> usize {
    ((dt * cfg.ch + dh) * cfg.cw + dw) * 3 + rgb
}

/// Pixel video (T,H,W,3) in [0,1] -> latent (T',H',W',C).
pub fn encode<F: Real>(frames: &Array4<F>, cfg: &CodecConfig) -> Result<LatentVideo<F>> {
    let (t, h, w, c3) = frames.dim();
    if c3 != 3 {
        return Err(Error::Shape(format!("expected 3 pixel channels, got {c3}")));
    }
    let (tp, hp, wp) = cfg.grid(t, h, w)?;
    let c = cfg.channels();
    let mut out = Array4::zeros((tp, hp, wp, c));
    for ti in 0..tp {
        for hi in 0..hp {
            for wi in 0..wp {
                for dt in 0..cfg.ct {
                    for dh in 0..cfg.ch {
                        for dw in 0..cfg.cw {
                            for rgb in 0..3 {
                                let px = frames[[ti * cfg.ct + dt, hi * cfg.ch + dh, wi * cfg.cw + dw, rgb]];
                                out[[ti, hi, wi, chan(cfg, dt, dh, dw, rgb)]] = norm_fwd(px);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(LatentVideo { data: out })
}

/// Reference image (H,W,3) -> latent (1,H',W',C).
///
/// The image is treated as a clip holding the same frame `ct` times, so the
/// reference latent has the same channel count as video latents and flows
/// through the same patch embedding.
pub fn encode_reference<F: Real>(image: &Array3<F>, cfg: &CodecConfig) -> Result<LatentVideo<F>> {
    let (h, w, c3) = image.dim();
    if c3 != 3 {
        return Err(Error::Shape(format!("expected 3 pixel channels, got {c3}")));
    }
    let mut frames = Array4::zeros((cfg.ct, h, w, 3));
    for dt in 0..cfg.ct {
        frames.index_axis_mut(ndarray::Axis(0), dt).assign(image);
    }
    encode(&frames, cfg)
}

/// Latent (T',H',W',C) -> pixel video (T,H,W,3). Exact inverse of `encode`;
/// output is not clamped here (clamping happens only at export).
pub fn decode<F: Real>(latent: &LatentVideo<F>, cfg: &CodecConfig) -> Result<Array4<F>> {
    let (tp, hp, wp, c) = latent.data.dim();
    if c != cfg.channels() {
        return Err(Error::Shape(format!(
            "latent has {c} channels, config implies {}",
            cfg.channels()
        )));
    }
    let mut out = Array4::zeros((tp * cfg.ct, hp * cfg.ch, wp * cfg.cw, 3));
    for ti in 0..tp {
        for hi in 0..hp {
            for wi in 0..wp {
                for dt in 0..cfg.ct {
                    for dh in 0..cfg.ch {
                        for dw in 0..cfg.cw {
                            for rgb in 0..3 {
                                let v = latent.data[[ti, hi, wi, chan(cfg, dt, dh, dw, rgb)]];
                                out[[ti * cfg.ct + dt, hi * cfg.ch + dh, wi * cfg.cw + dw, rgb]] =
                                    norm_inv(v);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn quantized_video(seed: u64, t: usize, h: usize, w: usize) -> Array4<f32> {
        // pixel data on a 1/1024 grid, like any quantized image source
        let mut rng = stream(seed, 42);
        Array4::from_shape_fn((t, h, w, 3), |_| rng.gen_range(0..=1024) as f32 / 1024.0)
    }

    #[test]
    fn all_half_frames_encode_to_zero() {
        let frames = Array4::from_elem((2, 4, 4, 3), 0.5f32);
        let lat = encode(&frames, &CodecConfig::new(2, 4, 4)).unwrap();
        assert!(lat.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_is_exact_on_quantized_pixels() {
        let cfg = CodecConfig::default();
        let frames = quantized_video(1, 4, 8, 8);
        let lat = encode(&frames, &cfg).unwrap();
        let back = decode(&lat, &cfg).unwrap();
        for (a, b) in frames.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn dimension_arithmetic() {
        let cfg = CodecConfig::new(2, 4, 4);
        let frames = quantized_video(2, 16, 64, 64);
        let lat = encode(&frames, &cfg).unwrap();
        assert_eq!(lat.dims(), (8, 16, 16, 96));
        // and the base profile
        let cfg = CodecConfig::base_profile();
        let lat = encode(&frames, &cfg).unwrap();
        assert_eq!(lat.dims(), (4, 8, 8, 768));
    }

    #[test]
    fn white_reference_is_all_plus_one() {
        let cfg = CodecConfig::new(2, 4, 4);
        let img = Array3::from_elem((32, 32, 3), 1.0f32);
        let lat = encode_reference(&img, &cfg).unwrap();
        assert_eq!(lat.dims(), (1, 8, 8, 96));
        assert!(lat.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn reference_equals_tiled_video_encode() {
        let cfg = CodecConfig::new(2, 4, 4);
        let mut rng = stream(3, 7);
        let img = Array3::from_shape_fn((8, 8, 3), |_| rng.gen_range(0..=255) as f32 / 255.0);
        let r = encode_reference(&img, &cfg).unwrap();
        let mut clip = Array4::zeros((2, 8, 8, 3));
        for t in 0..2 {
            clip.index_axis_mut(ndarray::Axis(0), t).assign(&img);
        }
        let v = encode(&clip, &cfg).unwrap();
        assert_eq!(r.data, v.data);
        // 32x32 reference with (4,4) spatial ratio -> 8x8 token grid
        let cfg = CodecConfig::new(1, 4, 4);
        let img = Array3::from_elem((32, 32, 3), 0.25f32);
        let r = encode_reference(&img, &cfg).unwrap();
        assert_eq!(r.dims(), (1, 8, 8, 48));
    }

    #[test]
    fn non_divisible_dims_are_rejected() {
        let cfg = CodecConfig::new(2, 4, 4);
        let frames = Array4::<f32>::zeros((3, 8, 8, 3));
        assert!(matches!(encode(&frames, &cfg), Err(Error::Shape(_))));
        let lat = LatentVideo { data: Array4::<f32>::zeros((1, 2, 2, 17)) };
        assert!(matches!(decode(&lat, &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn encode_is_linear_up_to_offset() {
        let cfg = CodecConfig::new(1, 2, 2);
        let v1 = quantized_video(4, 2, 4, 4);
        let v2 = quantized_video(5, 2, 4, 4);
        let (a, b) = (0.3f32, 0.7f32);
        let mix = a * &v1 + b * &v2;
        let lhs = encode(&mix, &cfg).unwrap();
        let e1 = encode(&v1, &cfg).unwrap();
        let e2 = encode(&v2, &cfg).unwrap();
        // encode(x) = 2x - 1, so encode(av1+bv2) = a enc(v1) + b enc(v2) + (a+b-1)
        let rhs = a * &e1.data + b * &e2.data + (a + b - 1.0);
        for (x, y) in lhs.data.iter().zip(rhs.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn token_flattening_round_trips() {
        let cfg = CodecConfig::new(2, 2, 2);
        let frames = quantized_video(6, 4, 4, 4);
        let lat = encode(&frames, &cfg).unwrap();
        let toks = lat.to_tokens();
        assert_eq!(toks.dim(), (2 * 2 * 2, cfg.channels()));
        let back = LatentVideo::from_tokens(toks, (2, 2, 2));
        assert_eq!(back.data, lat.data);
    }
}
