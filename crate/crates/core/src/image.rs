//! RGB images as `[3, H, W]` tensors with values in `[0, 1]`.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::autograd::Tensor;
use crate::{Error, Result};

pub fn rgb_zeros(height: usize, width: usize) -> Tensor {
    Tensor::zeros(&[3, height, width])
}

/// Loads an 8- or 16-bit image as a `[3, H, W]` tensor.
pub fn load(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0; 3 * h * w];
    match img {
        image::DynamicImage::ImageRgb16(buf) => {
            for (x, y, px) in buf.enumerate_pixels() {
                for c in 0..3 {
                    out[(c * h + y as usize) * w + x as usize] = px.0[c] as f64 / 65535.0;
                }
            }
        }
        other => {
            let buf = other.to_rgb8();
            for (x, y, px) in buf.enumerate_pixels() {
                for c in 0..3 {
                    out[(c * h + y as usize) * w + x as usize] = px.0[c] as f64 / 255.0;
                }
            }
        }
    }
    Ok(Tensor::new(&[3, h, w], out)?)
}

fn check_rgb(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [3, h, w] => Ok((*h, *w)),
        s => Err(Error::Shape(format!("expected [3, H, W] image, got {s:?}"))),
    }
}

fn image_err(path: &Path, e: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Saves as 8-bit PNG. Values that are multiples of 1/255 round-trip exactly.
pub fn save_png8(path: &Path, t: &Tensor) -> Result<()> {
    tensor_to_rgb8(t)?
        .save(path)
        .map_err(|e| image_err(path, e))
}

/// Saves as 16-bit PNG; used for attack textures.
pub fn save_png16(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w) = check_rgb(t)?;
    let img: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px =
            |c: usize| (t.at3(c, y as usize, x as usize).clamp(0.0, 1.0) * 65535.0).round() as u16;
        Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Loads an image as 8-bit RGB, for keeping many frames in memory.
pub fn load_rgb8(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|e| image_err(path, e))?.to_rgb8())
}

pub fn rgb8_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    })
}

pub fn tensor_to_rgb8(t: &Tensor) -> Result<RgbImage> {
    let (h, w) = check_rgb(t)?;
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px =
            |c: usize| (t.at3(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    }))
}

/// Saves a row-major boolean mask as an 8-bit grayscale PNG (255 = set).
pub fn save_mask(path: &Path, mask: &[bool], width: usize, height: usize) -> Result<()> {
    if mask.len() != width * height {
        return Err(Error::Shape(format!(
            "mask of {} for {width}x{height}",
            mask.len()
        )));
    }
    let img = image::GrayImage::from_fn(width as u32, height as u32, |x, y| {
        image::Luma([if mask[y as usize * width + x as usize] {
            255
        } else {
            0
        }])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Loads a mask written by [`save_mask`]; returns `(mask, width, height)`.
pub fn load_mask(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| image_err(path, e))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.as_raw().iter().map(|&v| v >= 128).collect(), w, h))
}

/// Rounds every value to the nearest multiple of `1 / levels`.
pub fn quantize(t: &Tensor, levels: f64) -> Tensor {
    t.map(|v| (v.clamp(0.0, 1.0) * levels).round() / levels)
}

pub fn channel_means(t: &Tensor) -> Result<[f64; 3]> {
    let (h, w) = check_rgb(t)?;
    let n = (h * w) as f64;
    let d = t.data();
    Ok([0, 1, 2].map(|c| d[c * h * w..(c + 1) * h * w].iter().sum::<f64>() / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trips_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_fn(&[3, 5, 4], |i| ((i * 37) % 256) as f64 / 255.0);
        let p8 = dir.path().join("a.png");
        save_png8(&p8, &t).unwrap();
        assert_eq!(load(&p8).unwrap(), t);
        let t16 = Tensor::from_fn(&[3, 2, 3], |i| ((i * 4099) % 65536) as f64 / 65535.0);
        let p16 = dir.path().join("b.png");
        save_png16(&p16, &t16).unwrap();
        assert_eq!(load(&p16).unwrap(), t16);
        assert_eq!(rgb8_to_tensor(&load_rgb8(&p8).unwrap()), t);
    }

    #[test]
    fn masks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask: Vec<bool> = (0..35).map(|i| i % 3 == 0).collect();
        let p = dir.path().join("m.png");
        save_mask(&p, &mask, 7, 5).unwrap();
        assert_eq!(load_mask(&p).unwrap(), (mask, 7, 5));
    }
}
