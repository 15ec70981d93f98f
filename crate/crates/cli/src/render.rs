//! 8-bit grayscale slice export.

use std::path::Path;

use image::GrayImage;
use mrsr_core::{Error, Result, Volume};

/// Display window for z-scored images.
pub const IMAGE_WINDOW: (f64, f64) = (-3.0, 3.0);

/// Maps `v` linearly from `[lo, hi]` onto `0..=255`, clamping outside.
pub fn to_gray(v: f64, lo: f64, hi: f64) -> u8 {
    if hi <= lo {
        return 128;
    }
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (t * 255.0).round() as u8
}

/// Symmetric window `[-m, m]` with `m = max |r|`; zero lands on gray 128.
pub fn residual_window(values: &[f64]) -> (f64, f64) {
    let m = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    (-m, m)
}

/// Pixel `(x, y)` of the image is voxel `(x, y)` of the slice.
pub fn slice_image(dims: [usize; 3], values: &[f64], window: (f64, f64)) -> GrayImage {
    let (w, h) = (dims[0] as u32, dims[1] as u32);
    GrayImage::from_fn(w, h, |x, y| {
        let v = values[x as usize + dims[0] * y as usize];
        image::Luma([to_gray(v, window.0, window.1)])
    })
}

pub fn save_png(path: &Path, img: &GrayImage) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

/// Values of slice `k` as `f64`, x fastest.
pub fn slice_values(v: &Volume, k: usize) -> Result<Vec<f64>> {
    Ok(v.slice_z(k)?.to_f64())
}
