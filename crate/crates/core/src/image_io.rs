//! 8-bit PNG output.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Map `[-1, 1]` to `0..=255`; values outside are clamped.
pub fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round() as u8
}

/// Tile `[N, C, S, S]` images (C = 1 or 3) into one RGB raster with `cols`
/// columns and `pad` pixels of black between tiles.
pub fn grid(images: &Tensor<f32>, cols: usize, pad: usize) -> Result<(usize, usize, Vec<u8>)> {
    let s = images.shape();
    if s.len() != 4 || !(s[1] == 1 || s[1] == 3) || s[0] == 0 {
        return Err(invalid!("expected [N, 1|3, H, W] images, got {s:?}"));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cols = cols.clamp(1, n);
    let rows = n.div_ceil(cols);
    let width = cols * w + (cols - 1) * pad;
    let height = rows * h + (rows - 1) * pad;
    let mut buf = vec![0u8; width * height * 3];
    let item = images.item_len();
    for i in 0..n {
        let img = &images.data()[i * item..(i + 1) * item];
        let (oy, ox) = ((i / cols) * (h + pad), (i % cols) * (w + pad));
        for y in 0..h {
            for x in 0..w {
                let o = ((oy + y) * width + ox + x) * 3;
                for k in 0..3 {
                    let ch = if c == 1 { 0 } else { k };
                    buf[o + k] = to_u8(img[ch * h * w + y * w + x]);
                }
            }
        }
    }
    Ok((width, height, buf))
}

pub fn save_grid(path: &Path, images: &Tensor<f32>, cols: usize, pad: usize) -> Result<()> {
    let (width, height, buf) = grid(images, cols, pad)?;
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc
        .write_header()
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    w.write_image_data(&buf)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    w.finish().map_err(|e| Error::Format(format!("png: {e}")))?;
    Ok(())
}
