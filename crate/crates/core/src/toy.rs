//! Small deterministic corpora for smoke runs and tests.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{write_manifest, CorpusError, CorpusRecord, Manifest, Split};
use crate::imageio;
use crate::imgops::{BinaryMask, Image};

#[derive(Clone, Debug)]
pub struct ToySpec {
    pub classes: Vec<String>,
    pub per_class: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl ToySpec {
    pub fn new(classes: &[&str], per_class: usize, width: usize, height: usize, seed: u64) -> Self {
        Self {
            classes: classes.iter().map(|s| s.to_string()).collect(),
            per_class,
            width,
            height,
            seed,
        }
    }
}

/// Noisy two-tone image with an elliptical foreground. The ellipse always
/// covers the centre pixel and never the corners.
pub fn toy_pair(width: usize, height: usize, seed: u64) -> (Image, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fg_base: [u8; 3] = rng.random();
    let bg_base: [u8; 3] = rng.random();
    let (w, h) = (width as f64, height as f64);
    let cx = w * rng.random_range(0.4..0.6);
    let cy = h * rng.random_range(0.4..0.6);
    let rx = w * rng.random_range(0.18..0.3);
    let ry = h * rng.random_range(0.18..0.3);
    let mask = BinaryMask::from_fn(width, height, |x, y| {
        let dx = (x as f64 + 0.5 - cx) / rx;
        let dy = (y as f64 + 0.5 - cy) / ry;
        dx * dx + dy * dy <= 1.0
    });
    let mut noise = ChaCha8Rng::seed_from_u64(seed ^ 0x05EE_D0FA);
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let base = if mask.get(x, y) { fg_base } else { bg_base };
            let ramp = ((x + y) * 64 / (width + height).max(1)) as i32;
            for c in base {
                let jitter = noise.random_range(-12..=12);
                data.push((i32::from(c) + ramp + jitter).clamp(0, 255) as u8);
            }
        }
    }
    let image = Image::new(width, height, 3, data).expect("sized buffer");
    (image, mask)
}

/// Writes `images/<class>/<id>.png`, `masks/<class>/<id>.png` and
/// `manifest.jsonl` under `dir`; returns the manifest path.
pub fn write_toy_corpus(dir: &Path, spec: &ToySpec) -> Result<PathBuf, CorpusError> {
    let mut records = Vec::new();
    let mut n = 0u64;
    for class in &spec.classes {
        for i in 0..spec.per_class {
            let id = format!("{class}_{i:03}");
            let (img, mask) = toy_pair(spec.width, spec.height, spec.seed.wrapping_add(n));
            n += 1;
            let image_path = Path::new("images").join(class).join(format!("{id}.png"));
            let mask_path = Path::new("masks").join(class).join(format!("{id}.png"));
            imageio::write_png(&img, &dir.join(&image_path)).map_err(|source| CorpusError::Decode {
                id: id.clone(),
                source,
            })?;
            imageio::write_mask_png(&mask, &dir.join(&mask_path)).map_err(|source| CorpusError::Decode {
                id: id.clone(),
                source,
            })?;
            records.push(CorpusRecord {
                id,
                class_label: class.clone(),
                image_path,
                mask_path,
                split: if i % 5 == 4 { Split::Test } else { Split::Train },
                provenance: None,
            });
        }
    }
    let manifest = Manifest::new(spec.classes.clone(), records, dir);
    let path = dir.join("manifest.jsonl");
    write_manifest(&manifest, &path)?;
    Ok(path)
}

/// Writes `count` donor images of assorted sizes into `dir`.
pub fn write_toy_donors(dir: &Path, count: usize, seed: u64) -> Result<(), imageio::CodecError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let w = rng.random_range(24..96);
        let h = rng.random_range(24..96);
        let a: [u8; 3] = rng.random();
        let b: [u8; 3] = rng.random();
        let img = Image::from_fn(w, h, |x, y| if (x / 6 + y / 6) % 2 == 0 { a } else { b });
        imageio::write_png(&img, &dir.join(format!("donor_{i:02}.png")))?;
    }
    Ok(())
}
