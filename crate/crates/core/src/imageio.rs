//! Portable pixmap / graymap writers for frame and mask export.

use std::io::Write;
use std::path::Path;

use ndarray::{Array3, ArrayView2, ArrayView3};

use crate::error::Result;

/// Write an RGB frame with values in [0,1] as binary PPM (P6).
/// Values are clamped at export time only.
pub fn write_ppm(path: &Path, frame: ArrayView3<f32>) -> Result<()> {
    let (h, w, c) = frame.dim();
    assert_eq!(c, 3, "write_ppm expects an (H,W,3) frame");
    let mut buf = Vec::with_capacity(32 + h * w * 3);
    write!(buf, "P6\n{w} {h}\n255\n")?;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                buf.push(quantize(frame[[y, x, ch]]));
            }
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Write a grayscale image with values in [0,1] as binary PGM (P5).
/// Pixel value is `round(255 * v)`.
pub fn write_pgm(path: &Path, img: ArrayView2<f32>) -> Result<()> {
    let (h, w) = img.dim();
    let mut buf = Vec::with_capacity(32 + h * w);
    write!(buf, "P5\n{w} {h}\n255\n")?;
    for y in 0..h {
        for x in 0..w {
            buf.push(quantize(img[[y, x]]));
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Read back a binary PPM written by [`write_ppm`].
pub fn read_ppm(path: &Path) -> Result<Array3<f32>> {
    let bytes = std::fs::read(path)?;
    let (w, h, off) = parse_header(&bytes, b"P6")?;
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[[y, x, c]] = bytes[off + (y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn parse_header(bytes: &[u8], magic: &[u8]) -> Result<(usize, usize, usize)> {
    use crate::error::Error;
    if !bytes.starts_with(magic) {
        return Err(Error::Format("not a binary netpbm file".into()));
    }
    let mut fields = Vec::new();
    let mut i = magic.len();
    while fields.len() < 3 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let field = std::str::from_utf8(&bytes[start..i])
            .map_err(|_| Error::Format("bad netpbm header".into()))?;
        fields.push(
            field
                .parse::<usize>()
                .map_err(|_| Error::Format("bad netpbm header".into()))?,
        );
    }
    // single whitespace byte after maxval
    Ok((fields[0], fields[1], i + 1))
}
