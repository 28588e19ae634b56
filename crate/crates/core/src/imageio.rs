//! Image decoding, preprocessing and heatmap rendering.
//!
//! Only PNG and binary PPM/PGM are accepted. Decoded pixels are scaled to
//! `[0, 1]`, resized bilinearly to the model input size and normalized with
//! the manifest's per-channel mean and std.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, ImageReader, RgbImage};
use thiserror::Error;

use crate::cam::normalize_map;
use crate::model::Preprocessing;
use crate::ops;
use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("cannot read image {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("image {path}: unsupported format (PNG or binary PPM/PGM expected)")]
    Format { path: PathBuf },
    #[error("image {path}: unsupported pixel type {color:?} (8-bit gray, RGB or RGBA expected)")]
    PixelType { path: PathBuf, color: image::ColorType },
    #[error("cannot encode PNG: {0}")]
    Encode(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Decodes an 8-bit PNG or PPM/PGM into RGB. Gray is replicated and alpha
/// dropped; 16-bit and float images are rejected.
pub fn load_rgb(path: &Path) -> Result<RgbImage, ImageIoError> {
    let reader = ImageReader::open(path)
        .map_err(|source| ImageIoError::Io {
            path: path.to_path_buf(),
            source,
        })?
        .with_guessed_format()
        .map_err(|source| ImageIoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        _ => {
            return Err(ImageIoError::Format {
                path: path.to_path_buf(),
            })
        }
    }
    let img = reader.decode().map_err(|e| ImageIoError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    match img {
        DynamicImage::ImageRgb8(rgb) => Ok(rgb),
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgba8(_) => {
            Ok(img.to_rgb8())
        }
        other => Err(ImageIoError::PixelType {
            path: path.to_path_buf(),
            color: other.color(),
        }),
    }
}

/// RGB bytes as a `1 x 3 x H x W` tensor in `[0, 1]`.
pub fn to_unit_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(vec![1, 3, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        f32::from(raw[p * 3 + c]) / 255.0
    })
    .expect("image dimensions are positive")
}

/// Resize to `height x width` and apply `(x - mean) / std` per channel.
pub fn preprocess_rgb(
    img: &RgbImage,
    height: usize,
    width: usize,
    prep: &Preprocessing,
) -> Result<Tensor, ImageIoError> {
    let unit = ops::upsample_bilinear(&to_unit_tensor(img), height, width)?;
    let plane = height * width;
    let data = unit.data();
    Ok(Tensor::from_fn(vec![1, 3, height, width], |i| {
        let c = i / plane;
        (data[i] - prep.mean[c]) / prep.std[c]
    })?)
}

pub fn preprocess(
    path: &Path,
    height: usize,
    width: usize,
    prep: &Preprocessing,
) -> Result<Tensor, ImageIoError> {
    preprocess_rgb(&load_rgb(path)?, height, width, prep)
}

/// Bilinear resize of an RGB image, rounding back to 8 bits.
pub fn resize_rgb(img: &RgbImage, height: usize, width: usize) -> Result<RgbImage, ImageIoError> {
    if img.width() as usize == width && img.height() as usize == height {
        return Ok(img.clone());
    }
    let t = ops::upsample_bilinear(&to_unit_tensor(img), height, width)?;
    Ok(from_planes(&t, height, width, |v| v * 255.0))
}

fn from_planes(t: &Tensor, height: usize, width: usize, f: impl Fn(f32) -> f32) -> RgbImage {
    let plane = height * width;
    let d = t.data();
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let p = y as usize * width + x as usize;
        image::Rgb([0, 1, 2].map(|c| quantize(f(d[c * plane + p]))))
    })
}

fn quantize(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Color stops of the heatmap palette: blue, cyan, green, yellow, red at
/// evenly spaced positions, linearly interpolated in between.
pub const PALETTE: [[f32; 3]; 5] = [
    [0.0, 0.0, 255.0],
    [0.0, 255.0, 255.0],
    [0.0, 255.0, 0.0],
    [255.0, 255.0, 0.0],
    [255.0, 0.0, 0.0],
];

/// Palette color for a value in `[0, 1]`; out-of-range values are clamped.
pub fn colormap(value: f32) -> [f32; 3] {
    let v = if value.is_finite() { value.clamp(0.0, 1.0) } else { 0.0 };
    let pos = v * (PALETTE.len() - 1) as f32;
    let i = (pos.floor() as usize).min(PALETTE.len() - 2);
    let t = pos - i as f32;
    let (a, b) = (PALETTE[i], PALETTE[i + 1]);
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

/// Normalizes the map and colors it. With `base`, returns
/// `alpha * heatmap + (1 - alpha) * base` instead.
pub fn render_heatmap(map: &Tensor, base: Option<&RgbImage>, alpha: f32) -> Result<RgbImage, ImageIoError> {
    let (_, _, h, w) = map.dims4("render_heatmap")?;
    let norm = normalize_map(map);
    if let Some(b) = base {
        if b.width() as usize != w || b.height() as usize != h {
            return Err(ShapeError::ShapeMismatch {
                op: "render_heatmap",
                lhs: vec![h, w],
                rhs: vec![b.height() as usize, b.width() as usize],
            }
            .into());
        }
    }
    let vals = norm.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let color = colormap(vals[y as usize * w + x as usize]);
        let px = match base {
            Some(b) => {
                let bp = b.get_pixel(x, y).0;
                [0, 1, 2].map(|c| quantize(alpha * color[c] + (1.0 - alpha) * f32::from(bp[c])))
            }
            None => color.map(quantize),
        };
        image::Rgb(px)
    }))
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, ImageIoError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| ImageIoError::Encode(e.to_string()))?;
    Ok(buf.into_inner())
}
