//! PNG image grids (8-bit grayscale or RGB).

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{ensure, Error, Result};
use crate::nets::ImageShape;
use crate::tape::Mat;

const PAD: usize = 1;

/// Tile the rows of `images` into a grid with `cols` columns and save it.
pub fn save_grid(path: &Path, images: &Mat, shape: ImageShape, cols: usize) -> Result<()> {
    ensure(cols >= 1, || "grid needs at least one column".into())?;
    ensure(images.ncols() == shape.pixels(), || "image width does not match shape".into())?;
    ensure(images.nrows() >= 1, || "grid needs at least one image".into())?;
    let n = images.nrows();
    let rows = n.div_ceil(cols);
    let cols = cols.min(n);
    let (h, w, ch) = (shape.height, shape.width, shape.channels);
    let gw = cols * (w + PAD) + PAD;
    let gh = rows * (h + PAD) + PAD;
    let mut buf = vec![0u8; gw * gh * ch.min(3).max(1)];
    let out_ch = if ch == 3 { 3 } else { 1 };
    for (k, img) in images.rows().into_iter().enumerate() {
        let (r, c) = (k / cols, k % cols);
        let (oy, ox) = (PAD + r * (h + PAD), PAD + c * (w + PAD));
        for y in 0..h {
            for x in 0..w {
                for o in 0..out_ch {
                    let v = img[(y * w + x) * ch + o.min(ch - 1)];
                    buf[((oy + y) * gw + ox + x) * out_ch + o] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let res = if out_ch == 3 {
        RgbImage::from_raw(gw as u32, gh as u32, buf).map(|i| i.save(path))
    } else {
        GrayImage::from_raw(gw as u32, gh as u32, buf).map(|i| i.save(path))
    };
    match res {
        Some(Ok(())) => Ok(()),
        Some(Err(e)) => Err(Error::Image(e.to_string())),
        None => Err(Error::Image("grid buffer size".into())),
    }
}
