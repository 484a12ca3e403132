//! The thirteen scenario generators and the corpus-level driver.
//!
//! Every generator is a deterministic function of `(image, mask, params, seed)`.
//! Region-wise generators build the transformed full frame and then select
//! per pixel with [`composite`], so the untouched region is copied bit for bit.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{self, CorpusError, CorpusRecord, Manifest, Provenance, SkipEntry};
use crate::genclient::AiBackground;
use crate::imageio;
use crate::imgops::{
    self, composite, gaussian_blur, hsv_to_rgb, rgb_to_hsv, to_grayscale, BinaryMask, Image, ImageError,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScenarioKind {
    BlurBackground,
    BlurForeground,
    ColorR,
    ColorG,
    ColorB,
    ColorRainbow,
    ColorGrayscale,
    BrightBackground,
    BrightForeground,
    Segmented,
    Transparent,
    RandomBackground,
    AiBackground,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 13] = [
        ScenarioKind::BlurBackground,
        ScenarioKind::BlurForeground,
        ScenarioKind::ColorR,
        ScenarioKind::ColorG,
        ScenarioKind::ColorB,
        ScenarioKind::ColorRainbow,
        ScenarioKind::ColorGrayscale,
        ScenarioKind::BrightBackground,
        ScenarioKind::BrightForeground,
        ScenarioKind::Segmented,
        ScenarioKind::Transparent,
        ScenarioKind::RandomBackground,
        ScenarioKind::AiBackground,
    ];

    /// Variants that need no external generation service.
    pub const OFFLINE: [ScenarioKind; 12] = [
        ScenarioKind::BlurBackground,
        ScenarioKind::BlurForeground,
        ScenarioKind::ColorR,
        ScenarioKind::ColorG,
        ScenarioKind::ColorB,
        ScenarioKind::ColorRainbow,
        ScenarioKind::ColorGrayscale,
        ScenarioKind::BrightBackground,
        ScenarioKind::BrightForeground,
        ScenarioKind::Segmented,
        ScenarioKind::Transparent,
        ScenarioKind::RandomBackground,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::BlurBackground => "blur_background",
            ScenarioKind::BlurForeground => "blur_foreground",
            ScenarioKind::ColorR => "color_r",
            ScenarioKind::ColorG => "color_g",
            ScenarioKind::ColorB => "color_b",
            ScenarioKind::ColorRainbow => "color_rainbow",
            ScenarioKind::ColorGrayscale => "color_grayscale",
            ScenarioKind::BrightBackground => "bright_background",
            ScenarioKind::BrightForeground => "bright_foreground",
            ScenarioKind::Segmented => "segmented",
            ScenarioKind::Transparent => "transparent",
            ScenarioKind::RandomBackground => "random_background",
            ScenarioKind::AiBackground => "ai_background",
        }
    }

    /// Kinds whose output leaves one mask region untouched.
    pub fn untouched_region(self) -> Option<Region> {
        use ScenarioKind::*;
        match self {
            BlurBackground | ColorR | ColorG | ColorB | ColorRainbow | ColorGrayscale | BrightBackground
            | Segmented => Some(Region::Foreground),
            BlurForeground | BrightForeground => Some(Region::Background),
            Transparent | RandomBackground | AiBackground => None,
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown scenario kind {0:?}")]
pub struct UnknownKind(pub String);

impl FromStr for ScenarioKind {
    type Err = UnknownKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| UnknownKind(s.to_string()))
    }
}

/// Parses a comma-separated kind list such as `segmented,blur_background`.
pub fn parse_kinds(list: &str) -> Result<BTreeSet<ScenarioKind>, UnknownKind> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(ScenarioKind::from_str)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Background,
    Foreground,
}

impl Region {
    fn mask(self, mask: &BinaryMask) -> BinaryMask {
        match self {
            Region::Foreground => mask.clone(),
            Region::Background => mask.inverted(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    R,
    G,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "degrees", rename_all = "snake_case")]
pub enum HueMode {
    /// Constant hue offset for every background pixel.
    Uniform(f64),
    /// Offset grows linearly left to right, `span * x / width`.
    Gradient(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Keep,
    RandomShift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioParams {
    pub blur_sigma: f64,
    pub gain: f64,
    pub bias: f64,
    pub usm_sigma: f64,
    pub usm_amount: f64,
    pub hue_mode: HueMode,
    pub blend_weight: f64,
    pub placement: Placement,
    pub master_seed: u64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            blur_sigma: 10.0,
            gain: 1.5,
            bias: 0.0,
            usm_sigma: 2.0,
            usm_amount: 0.5,
            hue_mode: HueMode::Gradient(360.0),
            blend_weight: 1.0,
            placement: Placement::Keep,
            master_seed: 0,
        }
    }
}

impl ScenarioParams {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::InvalidParams(m.to_string()));
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return bad("blur_sigma must be finite and >= 0");
        }
        if !(self.blend_weight > 0.0 && self.blend_weight <= 1.0) {
            return bad("blend_weight must lie in (0, 1]");
        }
        if self.gain.is_nan() || self.gain < 0.0 {
            return bad("gain must be >= 0");
        }
        if self.usm_amount.is_nan() || self.usm_amount < 0.0 {
            return bad("usm_amount must be >= 0");
        }
        if self.usm_amount > 0.0 && !(self.usm_sigma > 0.0 && self.usm_sigma.is_finite()) {
            return bad("usm_sigma must be > 0 when usm_amount > 0");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::InvalidParams(format!("{}: {e}", path.display())))?;
        let params: ScenarioParams =
            toml::from_str(&text).map_err(|e| ScenarioError::InvalidParams(format!("{}: {e}", path.display())))?;
        params.validate()?;
        Ok(params)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("invalid scenario parameters: {0}")]
    InvalidParams(String),
    #[error("foreground mask is empty")]
    EmptyForeground,
    #[error("donor image is empty")]
    EmptyDonor,
}

/// Pixels of `region` come from the blurred frame, the rest is the input.
pub fn blur_region(img: &Image, mask: &BinaryMask, region: Region, sigma: f64) -> Result<Image, ImageError> {
    mask.matches(img)?;
    let blurred = gaussian_blur(img, sigma);
    composite(&blurred, &region.mask(mask), img)
}

pub fn color_channel_background(img: &Image, mask: &BinaryMask, channel: Channel) -> Result<Image, ImageError> {
    mask.matches(img)?;
    let keep = match channel {
        Channel::R => 0,
        Channel::G => 1,
        Channel::B => 2,
    };
    Ok(img.map_rgb(|i, p| {
        if mask.is_fg(i) {
            p
        } else {
            let mut q = [0u8; 3];
            q[keep] = p[keep];
            q
        }
    }))
}

pub fn grayscale_background(img: &Image, mask: &BinaryMask) -> Result<Image, ImageError> {
    mask.matches(img)?;
    Ok(img.map_rgb(|i, p| if mask.is_fg(i) { p } else { to_grayscale(p) }))
}

pub fn rainbow_background(img: &Image, mask: &BinaryMask, hue_mode: HueMode) -> Result<Image, ImageError> {
    mask.matches(img)?;
    let w = img.width();
    Ok(img.map_rgb(|i, p| {
        if mask.is_fg(i) {
            return p;
        }
        let offset = match hue_mode {
            HueMode::Uniform(deg) => deg,
            HueMode::Gradient(span) => span * (i % w) as f64 / w as f64,
        };
        // whole turns are exact identities, not an HSV round trip
        if offset.rem_euclid(360.0) == 0.0 {
            return p;
        }
        let mut hsv = rgb_to_hsv(p);
        hsv.h = imgops::wrap_hue(hsv.h + offset);
        hsv_to_rgb(hsv)
    }))
}

/// `unsharp(clamp(gain * p + bias))` inside `region`, untouched elsewhere.
pub fn brightness_region(
    img: &Image,
    mask: &BinaryMask,
    region: Region,
    gain: f64,
    bias: f64,
    usm_sigma: f64,
    usm_amount: f64,
) -> Result<Image, ImageError> {
    mask.matches(img)?;
    let bright: Vec<f64> = imgops::samples_f64(img)
        .into_iter()
        .map(|v| (gain * v + bias).clamp(0.0, 255.0))
        .collect();
    let sharpened = imgops::unsharp_f64(&bright, img.width(), img.height(), img.channels(), usm_sigma, usm_amount);
    let adjusted = imgops::image_from_f64(img, &sharpened);
    composite(&adjusted, &region.mask(mask), img)
}

pub fn segment_foreground(img: &Image, mask: &BinaryMask) -> Result<Image, ImageError> {
    mask.matches(img)?;
    Ok(img.map_rgb(|i, p| if mask.is_fg(i) { p } else { [0, 0, 0] }))
}

/// RGBA output: `(r, g, b, 255)` on the foreground, `(0, 0, 0, 0)` elsewhere.
pub fn make_transparent(img: &Image, mask: &BinaryMask) -> Result<Image, ImageError> {
    mask.matches(img)?;
    let mut data = Vec::with_capacity(img.pixel_count() * 4);
    for i in 0..img.pixel_count() {
        if mask.is_fg(i) {
            let [r, g, b] = img.rgb(i);
            data.extend_from_slice(&[r, g, b, 255]);
        } else {
            data.extend_from_slice(&[0, 0, 0, 0]);
        }
    }
    Image::new(img.width(), img.height(), 4, data)
}

/// Pastes the foreground onto a donor background.
///
/// The donor is cover-fitted to the source frame. With
/// [`Placement::RandomShift`] the foreground bounding box is translated by a
/// seed-derived offset that keeps it inside the frame. Returns the output image
/// and the (possibly moved) mask.
pub fn random_background(
    img: &Image,
    mask: &BinaryMask,
    donor: &Image,
    params: &ScenarioParams,
    seed: u64,
) -> Result<(Image, BinaryMask), ScenarioError> {
    mask.matches(img)?;
    if donor.pixel_count() == 0 {
        return Err(ScenarioError::EmptyDonor);
    }
    let (x0, y0, x1, y1) = mask.bounding_box().ok_or(ScenarioError::EmptyForeground)?;
    let (w, h) = (img.width(), img.height());
    let backdrop = imageio::cover_fit(donor, w, h);

    let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
    let (dx, dy) = match params.placement {
        Placement::RandomShift if bw <= w && bh <= h => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nx = rng.random_range(0..=w - bw) as i64;
            let ny = rng.random_range(0..=h - bh) as i64;
            (nx - x0 as i64, ny - y0 as i64)
        }
        _ => (0, 0),
    };

    let mut moved_bits = vec![false; w * h];
    let mut fg_px = vec![[0u8; 3]; w * h];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                let tx = (x as i64 + dx) as usize;
                let ty = (y as i64 + dy) as usize;
                moved_bits[ty * w + tx] = true;
                fg_px[ty * w + tx] = img.rgb(y * w + x);
            }
        }
    }
    let moved = BinaryMask::new(w, h, moved_bits);

    let a = params.blend_weight;
    let out = backdrop.map_rgb(|i, d| {
        if !moved.is_fg(i) {
            return d;
        }
        let f = fg_px[i];
        [0, 1, 2].map(|c| imgops::clamp_round(a * f64::from(f[c]) + (1.0 - a) * f64::from(d[c])))
    });
    Ok((out, moved))
}

/// Per-image seed from a stable hash of `(master_seed, record id, kind)`.
pub fn per_image_seed(master_seed: u64, record_id: &str, kind: ScenarioKind) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update((record_id.len() as u64).to_le_bytes());
    h.update(record_id.as_bytes());
    h.update(kind.name().as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioOutput {
    pub image: Image,
    pub mask: BinaryMask,
    pub kind: ScenarioKind,
    pub provenance: Provenance,
}

/// Runs one offline generator. `donor` is required for random backgrounds only.
pub fn generate(
    kind: ScenarioKind,
    record_id: &str,
    img: &Image,
    mask: &BinaryMask,
    params: &ScenarioParams,
    donor: Option<(&str, &Image)>,
) -> Result<ScenarioOutput, ScenarioError> {
    let seed = per_image_seed(params.master_seed, record_id, kind);
    let p = params;
    let mut out_mask = mask.clone();
    let mut donor_id = None;
    let image = match kind {
        ScenarioKind::BlurBackground => blur_region(img, mask, Region::Background, p.blur_sigma)?,
        ScenarioKind::BlurForeground => blur_region(img, mask, Region::Foreground, p.blur_sigma)?,
        ScenarioKind::ColorR => color_channel_background(img, mask, Channel::R)?,
        ScenarioKind::ColorG => color_channel_background(img, mask, Channel::G)?,
        ScenarioKind::ColorB => color_channel_background(img, mask, Channel::B)?,
        ScenarioKind::ColorRainbow => rainbow_background(img, mask, p.hue_mode)?,
        ScenarioKind::ColorGrayscale => grayscale_background(img, mask)?,
        ScenarioKind::BrightBackground => {
            brightness_region(img, mask, Region::Background, p.gain, p.bias, p.usm_sigma, p.usm_amount)?
        }
        ScenarioKind::BrightForeground => {
            brightness_region(img, mask, Region::Foreground, p.gain, p.bias, p.usm_sigma, p.usm_amount)?
        }
        ScenarioKind::Segmented => segment_foreground(img, mask)?,
        ScenarioKind::Transparent => make_transparent(img, mask)?,
        ScenarioKind::RandomBackground => {
            let (id, donor) = donor.ok_or(ScenarioError::EmptyDonor)?;
            let (image, moved) = random_background(img, mask, donor, p, seed)?;
            out_mask = moved;
            donor_id = Some(id.to_string());
            image
        }
        ScenarioKind::AiBackground => {
            return Err(ScenarioError::InvalidParams(
                "ai_background needs a generation client".to_string(),
            ))
        }
    };
    Ok(ScenarioOutput {
        image,
        mask: out_mask,
        kind,
        provenance: Provenance {
            source_id: record_id.to_string(),
            kind: kind.name().to_string(),
            seed,
            donor: donor_id,
        },
    })
}

/// Donor backgrounds for the random-background scenario, in sorted path order.
#[derive(Clone, Debug)]
pub struct DonorPool {
    root: PathBuf,
    paths: Vec<PathBuf>,
}

impl DonorPool {
    pub fn from_dir(root: &Path) -> std::io::Result<Self> {
        let mut paths = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir)? {
                let path = entry?.path();
                if path.is_dir() {
                    stack.push(path);
                } else if is_raster(&path) {
                    paths.push(path.strip_prefix(root).unwrap_or(&path).to_path_buf());
                }
            }
        }
        paths.sort();
        if paths.is_empty() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("no donor images under {}", root.display()),
            ));
        }
        Ok(Self {
            root: root.to_path_buf(),
            paths,
        })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Seeded draw of one donor: `(relative path, decoded image)`.
    pub fn draw(&self, seed: u64) -> Result<(String, Image), imageio::CodecError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD00D_5EED);
        let rel = &self.paths[rng.random_range(0..self.paths.len())];
        let img = imageio::read_rgb(&self.root.join(rel))?;
        Ok((rel.to_string_lossy().replace('\\', "/"), img))
    }
}

fn is_raster(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error(transparent)]
    Params(#[from] ScenarioError),
    #[error("random_background requested but no donor pool was given")]
    MissingDonorPool,
    #[error("ai_background requested but no generation client is configured")]
    MissingGenerator,
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

pub struct SynthesisRequest<'a> {
    pub manifest: &'a Manifest,
    pub kinds: &'a BTreeSet<ScenarioKind>,
    pub params: &'a ScenarioParams,
    pub donors: Option<&'a DonorPool>,
    pub generator: Option<&'a AiBackground>,
    pub out_dir: &'a Path,
    pub workers: usize,
}

#[derive(Clone, Debug)]
pub struct SynthesisSummary {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
}

impl SynthesisSummary {
    pub fn produced(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn skipped(&self) -> &[SkipEntry] {
        &self.manifest.skipped
    }
}

pub const OUTPUT_MANIFEST: &str = "manifest.jsonl";

pub fn output_image_path(kind: ScenarioKind, record: &CorpusRecord) -> PathBuf {
    Path::new(kind.name()).join(&record.class_label).join(format!("{}.png", record.id))
}

pub fn output_mask_path(kind: ScenarioKind, record: &CorpusRecord) -> PathBuf {
    Path::new("masks")
        .join(kind.name())
        .join(&record.class_label)
        .join(format!("{}.png", record.id))
}

type JobResult = Result<CorpusRecord, SkipEntry>;

fn skip(record: &CorpusRecord, kind: ScenarioKind, reason: impl fmt::Display) -> SkipEntry {
    SkipEntry {
        id: record.id.clone(),
        kind: kind.name().to_string(),
        reason: reason.to_string(),
    }
}

fn produce(req: &SynthesisRequest<'_>, record: &CorpusRecord, pair: &(Image, BinaryMask), kind: ScenarioKind) -> JobResult {
    let (img, mask) = pair;
    let output = match kind {
        ScenarioKind::AiBackground => {
            let gen = req.generator.ok_or_else(|| skip(record, kind, "no generation client"))?;
            let seed = per_image_seed(req.params.master_seed, &record.id, kind);
            let image = gen
                .produce(img, mask, &record.class_label, seed)
                .map_err(|e| skip(record, kind, e))?;
            ScenarioOutput {
                image,
                mask: mask.clone(),
                kind,
                provenance: Provenance {
                    source_id: record.id.clone(),
                    kind: kind.name().to_string(),
                    seed,
                    donor: None,
                },
            }
        }
        ScenarioKind::RandomBackground => {
            let pool = req.donors.ok_or_else(|| skip(record, kind, "no donor pool"))?;
            let seed = per_image_seed(req.params.master_seed, &record.id, kind);
            let (donor_id, donor) = pool.draw(seed).map_err(|e| skip(record, kind, format!("donor: {e}")))?;
            generate(kind, &record.id, img, mask, req.params, Some((&donor_id, &donor)))
                .map_err(|e| skip(record, kind, e))?
        }
        _ => generate(kind, &record.id, img, mask, req.params, None).map_err(|e| skip(record, kind, e))?,
    };

    let image_rel = output_image_path(kind, record);
    let mask_rel = output_mask_path(kind, record);
    imageio::write_png(&output.image, &req.out_dir.join(&image_rel)).map_err(|e| skip(record, kind, e))?;
    imageio::write_mask_png(&output.mask, &req.out_dir.join(&mask_rel)).map_err(|e| skip(record, kind, e))?;
    Ok(CorpusRecord {
        id: format!("{}__{}", record.id, kind.name()),
        class_label: record.class_label.clone(),
        image_path: image_rel,
        mask_path: mask_rel,
        split: record.split,
        provenance: Some(output.provenance),
    })
}

fn synthesize_record(req: &SynthesisRequest<'_>, record: &CorpusRecord) -> Vec<JobResult> {
    let pair = match req.manifest.load_pair(record) {
        Ok(p) => p,
        Err(e) => return req.kinds.iter().map(|&k| Err(skip(record, k, &e))).collect(),
    };
    if pair.1.is_empty() {
        return req
            .kinds
            .iter()
            .map(|&k| Err(skip(record, k, "degenerate record: empty foreground mask")))
            .collect();
    }
    req.kinds.iter().map(|&k| produce(req, record, &pair, k)).collect()
}

/// Produces one output per `(record, kind)` under `out_dir` and writes the
/// output manifest. Per-record failures become skip entries.
///
/// Output bytes do not depend on `workers` or scheduling: seeds come from
/// [`per_image_seed`] and the manifest is sorted by `(record id, kind)`.
pub fn synthesize_corpus(req: &SynthesisRequest<'_>) -> Result<SynthesisSummary, SynthesisError> {
    req.params.validate()?;
    if req.kinds.contains(&ScenarioKind::RandomBackground) && req.donors.is_none() {
        return Err(SynthesisError::MissingDonorPool);
    }
    if req.kinds.contains(&ScenarioKind::AiBackground) && req.generator.is_none() {
        return Err(SynthesisError::MissingGenerator);
    }
    std::fs::create_dir_all(req.out_dir).map_err(|source| CorpusError::Io {
        path: req.out_dir.to_path_buf(),
        source,
    })?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(req.workers.max(1))
        .build()
        .map_err(|e| SynthesisError::Pool(e.to_string()))?;
    let results: Vec<JobResult> = pool.install(|| {
        req.manifest
            .records
            .par_iter()
            .flat_map_iter(|r| synthesize_record(req, r))
            .collect()
    });

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(s) => {
                log::warn!("skip id={} kind={} reason={:?}", s.id, s.kind, s.reason);
                skipped.push(s);
            }
        }
    }
    let key = |r: &CorpusRecord| {
        let p = r.provenance.as_ref().expect("synthesized records carry provenance");
        (p.source_id.clone(), p.kind.clone())
    };
    records.sort_by_key(key);
    skipped.sort_by(|a, b| (&a.id, &a.kind).cmp(&(&b.id, &b.kind)));

    let classes: BTreeSet<&String> = req.manifest.records.iter().map(|r| &r.class_label).collect();
    let produced_classes: BTreeSet<&String> = records.iter().map(|r| &r.class_label).collect();
    let class_set = req
        .manifest
        .class_set
        .iter()
        .filter(|c| classes.contains(c) && produced_classes.contains(c))
        .cloned()
        .collect();

    let mut manifest = Manifest::new(class_set, records, req.out_dir);
    manifest.skipped = skipped;
    manifest.params = Some(serde_json::to_value(req.params).expect("params serialize"));
    let manifest_path = req.out_dir.join(OUTPUT_MANIFEST);
    corpus::write_manifest(&manifest, &manifest_path)?;
    Ok(SynthesisSummary {
        manifest,
        manifest_path,
    })
}
