//! Image output. Binary PPM is the reference format; PNG is a convenience copy.

use std::path::Path;

use super::checkpoint::write_atomic;
use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// `[3, H, W]` in `[−1, 1]` → interleaved RGB bytes.
pub fn to_rgb8(image: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(contract!("expected an image [3, H, W], got {s:?}"));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            let v = d[c * h * w + i].clamp(-1.0, 1.0);
            out.push(((v + 1.0) * 127.5).round() as u8);
        }
    }
    Ok((h, w, out))
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w, rgb) = to_rgb8(image)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&rgb);
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    write_atomic(path, &encode_ppm(image)?)
}

pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w, rgb) = to_rgb8(image)?;
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::Io(std::io::Error::other(e.to_string()));
        let mut wr = enc.write_header().map_err(png_err)?;
        wr.write_image_data(&rgb).map_err(png_err)?;
    }
    write_atomic(path, &buf)
}

/// Tiles `[3, H, W]` images into a grid with `cols` columns.
pub fn tile(images: &[Tensor], cols: usize) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| contract!("no images to tile"))?;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut data = vec![-1.0f32; 3 * gh * gw];
    for (k, img) in images.iter().enumerate() {
        img.check_same_shape(first)?;
        let (r0, c0) = ((k / cols) * h, (k % cols) * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[c * gh * gw + (r0 + y) * gw + c0 + x] = img.data()[c * h * w + y * w + x];
                }
            }
        }
    }
    Tensor::new(vec![3, gh, gw], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_layout() {
        let img = Tensor::new(vec![3, 1, 2], vec![-1.0, 1.0, 0.0, 0.0, 1.0, -1.0]).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255, 255, 128, 0]);
    }

    #[test]
    fn tiles_fill_grid() {
        let a = Tensor::full(&[3, 2, 2], 0.5);
        let t = tile(&[a.clone(), a.clone(), a], 2).unwrap();
        assert_eq!(t.shape(), &[3, 4, 4]);
    }
}
