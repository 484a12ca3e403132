//! Pixel primitives shared by every scenario generator.
//!
//! All operations are pure: inputs are never mutated and the result depends
//! only on the arguments. Intermediate arithmetic is carried in `f64` and
//! rounded once when the output raster is produced.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("dimension mismatch: {left_w}x{left_h}x{left_c} vs {right_w}x{right_h}x{right_c}")]
    DimensionMismatch {
        left_w: usize,
        left_h: usize,
        left_c: usize,
        right_w: usize,
        right_h: usize,
        right_c: usize,
    },
    #[error("unsupported channel count {0}, expected 3 or 4")]
    Channels(usize),
    #[error("buffer length {actual} does not match {width}x{height}x{channels}")]
    BufferLength {
        width: usize,
        height: usize,
        channels: usize,
        actual: usize,
    },
}

/// An 8-bit, row-major, interleaved RGB or RGBA raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if channels != 3 && channels != 4 {
            return Err(ImageError::Channels(channels));
        }
        if data.len() != width * height * channels {
            return Err(ImageError::BufferLength {
                width,
                height,
                channels,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, pixel: [u8; 3]) -> Self {
        let data = pixel.iter().copied().cycle().take(width * height * 3).collect();
        Self {
            width,
            height,
            channels: 3,
            data,
        }
    }

    /// Builds an RGB image from a per-pixel function of `(x, y)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            channels: 3,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Samples of the pixel at linear index `i`.
    pub fn px(&self, i: usize) -> &[u8] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn get(&self, x: usize, y: usize) -> &[u8] {
        self.px(y * self.width + x)
    }

    pub fn rgb(&self, i: usize) -> [u8; 3] {
        let p = self.px(i);
        [p[0], p[1], p[2]]
    }

    pub fn same_shape(&self, other: &Image) -> Result<(), ImageError> {
        if self.width == other.width && self.height == other.height && self.channels == other.channels {
            Ok(())
        } else {
            Err(ImageError::DimensionMismatch {
                left_w: self.width,
                left_h: self.height,
                left_c: self.channels,
                right_w: other.width,
                right_h: other.height,
                right_c: other.channels,
            })
        }
    }

    /// Drops the alpha channel if present.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    /// Applies `f` to the RGB triple of every pixel, keeping alpha untouched.
    pub fn map_rgb(&self, mut f: impl FnMut(usize, [u8; 3]) -> [u8; 3]) -> Image {
        let mut out = self.clone();
        let c = self.channels;
        for (i, p) in out.data.chunks_exact_mut(c).enumerate() {
            let q = f(i, [p[0], p[1], p[2]]);
            p[..3].copy_from_slice(&q);
        }
        out
    }

    fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    fn from_f64(width: usize, height: usize, channels: usize, samples: &[f64]) -> Image {
        Image {
            width,
            height,
            channels,
            data: samples.iter().map(|&v| clamp_round(v)).collect(),
        }
    }
}

/// Foreground flags, one per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height, "mask length must equal width*height");
        Self { width, height, bits }
    }

    pub fn filled(width: usize, height: usize, foreground: bool) -> Self {
        Self::new(width, height, vec![foreground; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    /// Binarizes 8-bit mask samples: values `>= threshold` are foreground.
    pub fn from_gray(width: usize, height: usize, samples: &[u8], threshold: u8) -> Self {
        Self::new(width, height, samples.iter().map(|&v| v >= threshold).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn is_fg(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn foreground_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.foreground_count() == 0
    }

    pub fn inverted(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// 0/255 grayscale samples.
    pub fn to_gray(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of the foreground.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bbox = Some(match bbox {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bbox
    }

    pub fn matches(&self, img: &Image) -> Result<(), ImageError> {
        if self.width == img.width() && self.height == img.height() {
            Ok(())
        } else {
            Err(ImageError::DimensionMismatch {
                left_w: img.width(),
                left_h: img.height(),
                left_c: img.channels(),
                right_w: self.width,
                right_h: self.height,
                right_c: 1,
            })
        }
    }
}

pub(crate) fn clamp_round(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Gaussian kernel half-width and normalized taps.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelParams {
    pub sigma: f64,
    pub radius: usize,
}

impl KernelParams {
    pub fn new(sigma: f64) -> Self {
        assert!(sigma >= 0.0 && sigma.is_finite(), "sigma must be a finite nonnegative number");
        Self {
            sigma,
            radius: (3.0 * sigma).ceil() as usize,
        }
    }

    /// Taps for offsets `-radius..=radius`, summing to one.
    pub fn weights(&self) -> Vec<f64> {
        if self.radius == 0 {
            return vec![1.0];
        }
        let r = self.radius as i64;
        let two_s2 = 2.0 * self.sigma * self.sigma;
        let raw: Vec<f64> = (-r..=r).map(|k| (-((k * k) as f64) / two_s2).exp()).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }
}

/// Half-sample symmetric reflection (`cba|abc|cba`) of an arbitrary index into `0..n`.
pub fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn convolve_rows(src: &[f64], width: usize, height: usize, channels: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as i64;
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        let row = y * width;
        for x in 0..width {
            for c in 0..channels {
                let mut acc = 0.0;
                for (j, w) in taps.iter().enumerate() {
                    let sx = reflect_index(x as i64 + j as i64 - r, width);
                    acc += w * src[(row + sx) * channels + c];
                }
                out[(row + x) * channels + c] = acc;
            }
        }
    }
    out
}

fn convolve_cols(src: &[f64], width: usize, height: usize, channels: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as i64;
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let mut acc = 0.0;
                for (j, w) in taps.iter().enumerate() {
                    let sy = reflect_index(y as i64 + j as i64 - r, height);
                    acc += w * src[(sy * width + x) * channels + c];
                }
                out[(y * width + x) * channels + c] = acc;
            }
        }
    }
    out
}

/// Unrounded separable blur of every channel.
pub(crate) fn blur_f64(samples: &[f64], width: usize, height: usize, channels: usize, sigma: f64) -> Vec<f64> {
    let params = KernelParams::new(sigma);
    if params.radius == 0 || width == 0 || height == 0 {
        return samples.to_vec();
    }
    let taps = params.weights();
    let horiz = convolve_rows(samples, width, height, channels, &taps);
    convolve_cols(&horiz, width, height, channels, &taps)
}

/// Separable Gaussian blur with radius `ceil(3 sigma)` and mirrored borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if KernelParams::new(sigma).radius == 0 {
        return img.clone();
    }
    let blurred = blur_f64(&img.to_f64(), img.width, img.height, img.channels, sigma);
    Image::from_f64(img.width, img.height, img.channels, &blurred)
}

/// Luma with 0.299/0.587/0.114 weights, replicated to three channels.
pub fn to_grayscale(rgb: [u8; 3]) -> [u8; 3] {
    let y = 0.299 * f64::from(rgb[0]) + 0.587 * f64::from(rgb[1]) + 0.114 * f64::from(rgb[2]);
    let y = clamp_round(y);
    [y, y, y]
}

/// Hexcone HSV: hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hsv {
    pub h: f64,
    pub s: f64,
    pub v: f64,
}

pub fn rgb_to_hsv(rgb: [u8; 3]) -> Hsv {
    let [r, g, b] = rgb.map(|c| f64::from(c) / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    Hsv {
        h: wrap_hue(h),
        s,
        v: max,
    }
}

pub fn hsv_to_rgb(hsv: Hsv) -> [u8; 3] {
    let h = wrap_hue(hsv.h);
    let c = hsv.v * hsv.s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = hsv.v - c;
    [r, g, b].map(|ch| clamp_round((ch + m) * 255.0))
}

pub(crate) fn wrap_hue(h: f64) -> f64 {
    let w = h.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// `clamp(round(alpha*a + beta*b + gamma))` per sample.
pub fn linear_blend(a: &Image, b: &Image, alpha: f64, beta: f64, gamma: f64) -> Result<Image, ImageError> {
    a.same_shape(b)?;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| clamp_round(alpha * f64::from(x) + beta * f64::from(y) + gamma))
        .collect();
    Ok(Image { data, ..a.clone() })
}

/// Unsharp masking over unrounded samples. Blur is computed on the same
/// unrounded buffer so the only rounding happens on the final result.
pub(crate) fn unsharp_f64(samples: &[f64], width: usize, height: usize, channels: usize, sigma: f64, amount: f64) -> Vec<f64> {
    if amount == 0.0 {
        return samples.to_vec();
    }
    let blurred = blur_f64(samples, width, height, channels, sigma);
    samples
        .iter()
        .zip(&blurred)
        .map(|(&v, &bl)| v + amount * (v - bl))
        .collect()
}

pub fn unsharp_mask(img: &Image, sigma: f64, amount: f64) -> Image {
    assert!(amount >= 0.0, "unsharp amount must be nonnegative");
    if amount == 0.0 {
        return img.clone();
    }
    let out = unsharp_f64(&img.to_f64(), img.width, img.height, img.channels, sigma, amount);
    Image::from_f64(img.width, img.height, img.channels, &out)
}

/// Per-pixel selection: `fg` where the mask is set, `bg` elsewhere.
pub fn composite(fg: &Image, mask: &BinaryMask, bg: &Image) -> Result<Image, ImageError> {
    fg.same_shape(bg)?;
    mask.matches(fg)?;
    let c = fg.channels;
    let mut out = bg.clone();
    for (i, &bit) in mask.bits.iter().enumerate() {
        if bit {
            out.data[i * c..(i + 1) * c].copy_from_slice(&fg.data[i * c..(i + 1) * c]);
        }
    }
    Ok(out)
}

/// Float image helpers used by the scenario generators.
pub(crate) fn samples_f64(img: &Image) -> Vec<f64> {
    img.to_f64()
}

pub(crate) fn image_from_f64(template: &Image, samples: &[f64]) -> Image {
    Image::from_f64(template.width, template.height, template.channels, samples)
}
