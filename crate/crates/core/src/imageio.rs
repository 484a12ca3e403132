//! Raster decode/encode on top of the `image` crate.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat, RgbImage, RgbaImage};

use crate::imgops::{BinaryMask, Image};

pub use image::ImageError as CodecError;

/// Foreground threshold for 8-bit masks: samples `>= 128` are foreground.
pub const MASK_THRESHOLD: u8 = 128;

pub fn from_dynamic_rgb(img: DynamicImage) -> Image {
    let rgb = img.into_rgb8();
    let (w, h) = rgb.dimensions();
    Image::new(w as usize, h as usize, 3, rgb.into_raw()).expect("rgb8 buffer has 3 channels")
}

pub fn to_dynamic(img: &Image) -> DynamicImage {
    let (w, h) = (img.width() as u32, img.height() as u32);
    match img.channels() {
        4 => DynamicImage::ImageRgba8(RgbaImage::from_raw(w, h, img.data().to_vec()).expect("rgba buffer")),
        _ => DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, img.data().to_vec()).expect("rgb buffer")),
    }
}

/// Decodes any supported raster at `path` to 8-bit RGB.
pub fn read_rgb(path: &Path) -> Result<Image, CodecError> {
    Ok(from_dynamic_rgb(image::open(path)?))
}

/// Decodes a mask raster and returns `(width, height, raw luma samples)`.
pub fn read_mask_samples(path: &Path) -> Result<(usize, usize, Vec<u8>), CodecError> {
    let luma = image::open(path)?.into_luma8();
    let (w, h) = luma.dimensions();
    Ok((w as usize, h as usize, luma.into_raw()))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask, CodecError> {
    let (w, h, samples) = read_mask_samples(path)?;
    Ok(BinaryMask::from_gray(w, h, &samples, MASK_THRESHOLD))
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>, CodecError> {
    let mut buf = Cursor::new(Vec::new());
    to_dynamic(img).write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_rgb(bytes: &[u8]) -> Result<Image, CodecError> {
    Ok(from_dynamic_rgb(image::load_from_memory(bytes)?))
}

pub fn write_png(img: &Image, path: &Path) -> Result<(), CodecError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(CodecError::IoError)?;
    }
    to_dynamic(img).save_with_format(path, ImageFormat::Png)
}

pub fn write_mask_png(mask: &BinaryMask, path: &Path) -> Result<(), CodecError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(CodecError::IoError)?;
    }
    let gray = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.to_gray())
        .expect("mask buffer");
    gray.save_with_format(path, ImageFormat::Png)
}

/// Resizes to exactly `width x height` with a triangle (bilinear) filter.
pub fn resize_exact(img: &Image, width: usize, height: usize) -> Image {
    if img.width() == width && img.height() == height {
        return img.clone();
    }
    let resized = image::imageops::resize(
        &to_dynamic(&img.to_rgb()).into_rgb8(),
        width as u32,
        height as u32,
        image::imageops::FilterType::Triangle,
    );
    from_dynamic_rgb(DynamicImage::ImageRgb8(resized))
}

/// Scales `img` to cover `width x height` preserving aspect ratio, then
/// center-crops to exactly that size.
pub fn cover_fit(img: &Image, width: usize, height: usize) -> Image {
    let (sw, sh) = (img.width() as f64, img.height() as f64);
    let scale = (width as f64 / sw).max(height as f64 / sh);
    let rw = ((sw * scale).round() as usize).max(width);
    let rh = ((sh * scale).round() as usize).max(height);
    let resized = resize_exact(img, rw, rh);
    let x0 = (rw - width) / 2;
    let y0 = (rh - height) / 2;
    Image::from_fn(width, height, |x, y| {
        let p = resized.get(x + x0, y + y0);
        [p[0], p[1], p[2]]
    })
}
