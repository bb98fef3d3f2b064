//! PNG input and output.
//!
//! Images are held as `[H, W, 3]` arrays. Two value ranges are used: `[0, 1]`
//! for metrics and `[-1, 1]` for the backends.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::tensor::Latent;

/// Load an 8-bit PNG as RGB in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Latent> {
    let img = image::open(path)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?
        .to_rgb8();
    Ok(rgb_to_array(&img))
}

pub fn rgb_to_array(img: &RgbImage) -> Latent {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    ArrayD::from_shape_vec(IxDyn(&[h as usize, w as usize, 3]), data).expect("rgb buffer is h*w*3")
}

/// Quantize a `[0, 1]` RGB array to 8 bits. Values are clamped.
pub fn array_to_rgb(image: &Latent) -> Result<RgbImage> {
    let (h, w) = rgb_dims(image)?;
    let raw = image
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::InvalidInput("image buffer size".into()))
}

/// Encode a `[0, 1]` RGB array as PNG bytes.
pub fn encode_png(image: &Latent) -> Result<Vec<u8>> {
    let rgb = array_to_rgb(image)?;
    let mut buf = Cursor::new(Vec::new());
    rgb.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn save_rgb(path: &Path, image: &Latent) -> Result<()> {
    crate::fsio::write_atomic(path, &encode_png(image)?)
}

/// Background mask from a PNG: pixels brighter than mid-grey are background.
pub fn load_mask(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32)[0] > 127
    }))
}

/// `[H, W]` of an `[H, W, 3]` array.
pub fn rgb_dims(image: &Latent) -> Result<(usize, usize)> {
    match image.shape() {
        [h, w, 3] => Ok((*h, *w)),
        other => Err(Error::InvalidInput(format!(
            "expected an [H, W, 3] image, got shape {other:?}"
        ))),
    }
}

/// `[0, 1] → [-1, 1]`.
pub fn to_model_range(image: &Latent) -> Latent {
    image.mapv(|v| 2.0 * v - 1.0)
}

/// `[-1, 1] → [0, 1]`, clamped.
pub fn from_model_range(image: &Latent) -> Latent {
    image.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}
