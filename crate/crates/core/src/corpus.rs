//! Corpus manifests: one image, one foreground mask and one class label per record.
//!
//! A manifest is a UTF-8 file with one JSON object per line. The first line is
//! a header carrying the format version and the class set; every following
//! line is either a record or a skip entry:
//!
//! ```text
//! {"version":"1","class_set":["dog","fox"]}
//! {"id":"dog_001","class":"dog","image":"img/dog_001.jpg","mask":"mask/dog_001.png","split":"test"}
//! {"skip":{"id":"fox_007","kind":"segmented","reason":"empty foreground mask"}}
//! ```
//!
//! Relative paths resolve against the directory containing the manifest.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageio::{self, MASK_THRESHOLD};
use crate::imgops::{BinaryMask, Image};

pub const MANIFEST_VERSION: &str = "1";

/// The twelve categories of the reference benchmark corpus.
pub const REFERENCE_CLASSES: [&str; 12] = [
    "lizard",
    "green lizard",
    "crayfish",
    "whale",
    "dog",
    "fox",
    "anemone fish",
    "airship",
    "car wheel",
    "cash machine",
    "cello",
    "ice cream",
];
/// Annotated originals in the reference corpus.
pub const REFERENCE_ORIGINALS: usize = 15_410;
/// AI-background images kept after filtering in the reference corpus.
pub const REFERENCE_AI_BACKGROUND: usize = 12_248;
/// Stated grand total of the reference corpus, originals included.
pub const REFERENCE_TOTAL: usize = 212_747;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("duplicate record id {id:?} on lines {first_line} and {second_line}")]
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("line {line}: record {id:?} has class {class:?} which is not in the header class_set")]
    UnknownClass { id: String, class: String, line: usize },
    #[error("record {id:?}: {source}")]
    Decode {
        id: String,
        #[source]
        source: imageio::CodecError,
    },
    #[error("record {id:?}: image is {image_w}x{image_h} but mask is {mask_w}x{mask_h}")]
    DimensionMismatch {
        id: String,
        image_w: usize,
        image_h: usize,
        mask_w: usize,
        mask_h: usize,
    },
    #[error("expectations file {path}: {message}")]
    Expectations { path: PathBuf, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Where a synthesized record came from; enough to regenerate it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    pub kind: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub donor: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    #[serde(rename = "class")]
    pub class_label: String,
    #[serde(rename = "image")]
    pub image_path: PathBuf,
    #[serde(rename = "mask")]
    pub mask_path: PathBuf,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub id: String,
    pub kind: String,
    pub reason: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    class_set: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct SkipLine {
    skip: SkipEntry,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub version: String,
    pub class_set: Vec<String>,
    pub records: Vec<CorpusRecord>,
    pub skipped: Vec<SkipEntry>,
    /// Free-form generation parameters recorded by the synthesizer.
    pub params: Option<serde_json::Value>,
    /// Directory relative record paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(class_set: Vec<String>, records: Vec<CorpusRecord>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            version: MANIFEST_VERSION.to_string(),
            class_set,
            records,
            skipped: Vec::new(),
            params: None,
            base_dir: base_dir.into(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn per_class_counts(&self) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> = self.class_set.iter().map(|c| (c.clone(), 0)).collect();
        for r in &self.records {
            *counts.entry(r.class_label.clone()).or_default() += 1;
        }
        counts
    }

    pub fn load_pair(&self, record: &CorpusRecord) -> Result<(Image, BinaryMask), CorpusError> {
        load_pair(record, &self.base_dir)
    }
}

fn parse_err(path: &Path, line: usize, message: impl fmt::Display) -> CorpusError {
    CorpusError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    }
}

/// Reads a manifest without touching any image file.
pub fn load_manifest(path: &Path) -> Result<Manifest, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));

    let header = loop {
        match lines.next() {
            None => return Err(parse_err(path, 1, "missing header line")),
            Some((n, line)) => {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let header: Header = serde_json::from_str(&line).map_err(|e| parse_err(path, n, format!("bad header: {e}")))?;
                break header;
            }
        }
    };

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (n, line) in lines {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| parse_err(path, n, e))?;
        if value.get("skip").is_some() {
            let s: SkipLine = serde_json::from_value(value).map_err(|e| parse_err(path, n, e))?;
            skipped.push(s.skip);
            continue;
        }
        let record: CorpusRecord = serde_json::from_value(value).map_err(|e| parse_err(path, n, e))?;
        if let Some(&first_line) = seen.get(&record.id) {
            return Err(CorpusError::DuplicateId {
                id: record.id,
                first_line,
                second_line: n,
            });
        }
        if !header.class_set.contains(&record.class_label) {
            return Err(CorpusError::UnknownClass {
                id: record.id,
                class: record.class_label,
                line: n,
            });
        }
        seen.insert(record.id.clone(), n);
        records.push(record);
    }

    Ok(Manifest {
        version: header.version,
        class_set: header.class_set,
        records,
        skipped,
        params: header.params,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let header = Header {
        version: manifest.version.clone(),
        class_set: manifest.class_set.clone(),
        params: manifest.params.clone(),
    };
    let json = |v: serde_json::Result<String>| v.expect("manifest types serialize");
    writeln!(w, "{}", json(serde_json::to_string(&header))).map_err(io_err)?;
    for r in &manifest.records {
        writeln!(w, "{}", json(serde_json::to_string(r))).map_err(io_err)?;
    }
    for s in &manifest.skipped {
        writeln!(w, "{}", json(serde_json::to_string(&SkipLine { skip: s.clone() }))).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Decodes a record's image to RGB and binarizes its mask at 128.
pub fn load_pair(record: &CorpusRecord, base_dir: &Path) -> Result<(Image, BinaryMask), CorpusError> {
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
    let decode = |source| CorpusError::Decode {
        id: record.id.clone(),
        source,
    };
    let image = imageio::read_rgb(&resolve(&record.image_path)).map_err(decode)?;
    let mask = imageio::read_mask(&resolve(&record.mask_path)).map_err(decode)?;
    if mask.width() != image.width() || mask.height() != image.height() {
        return Err(CorpusError::DimensionMismatch {
            id: record.id.clone(),
            image_w: image.width(),
            image_h: image.height(),
            mask_w: mask.width(),
            mask_h: mask.height(),
        });
    }
    Ok((image, mask))
}

/// Expected per-class and total counts, read from a TOML file:
///
/// ```toml
/// total = 12248
/// [classes]
/// dog = 1000
/// ```
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedCounts {
    #[serde(default)]
    pub total: Option<usize>,
    #[serde(default)]
    pub classes: BTreeMap<String, usize>,
}

impl ExpectedCounts {
    pub fn total(total: usize) -> Self {
        Self {
            total: Some(total),
            classes: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| CorpusError::Expectations {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ValidationIssue {
    pub record_id: String,
    pub violation: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub total_records: usize,
    pub per_class_counts: BTreeMap<String, usize>,
    pub errors: Vec<ValidationIssue>,
    /// Records whose mask has no foreground pixel. Flagged, not failed.
    pub degenerate: Vec<String>,
    /// Records whose mask holds samples other than 0 and 255 before thresholding.
    pub non_binary_masks: Vec<(String, usize)>,
    pub expected_totals_check: Option<bool>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.errors.is_empty()
    }
}

enum RecordCheck {
    Ok { degenerate: bool, non_binary: usize },
    Failed(String),
}

fn check_record(manifest: &Manifest, record: &CorpusRecord) -> RecordCheck {
    let image = match imageio::read_rgb(&manifest.resolve(&record.image_path)) {
        Ok(img) => img,
        Err(e) => return RecordCheck::Failed(format!("image {}: {e}", record.image_path.display())),
    };
    let (mw, mh, samples) = match imageio::read_mask_samples(&manifest.resolve(&record.mask_path)) {
        Ok(m) => m,
        Err(e) => return RecordCheck::Failed(format!("mask {}: {e}", record.mask_path.display())),
    };
    if (mw, mh) != (image.width(), image.height()) {
        return RecordCheck::Failed(format!(
            "image is {}x{} but mask is {mw}x{mh}",
            image.width(),
            image.height()
        ));
    }
    let non_binary = samples.iter().filter(|&&v| v != 0 && v != 255).count();
    let degenerate = !samples.iter().any(|&v| v >= MASK_THRESHOLD);
    RecordCheck::Ok { degenerate, non_binary }
}

/// Checks every record's files, then compares counts against `expectations`.
///
/// Per-record checks fan out over the rayon pool; the report is assembled in
/// manifest order so it does not depend on scheduling.
pub fn validate_corpus(manifest: &Manifest, expectations: Option<&ExpectedCounts>) -> ValidationReport {
    let checks: Vec<RecordCheck> = manifest.records.par_iter().map(|r| check_record(manifest, r)).collect();

    let mut errors = Vec::new();
    let mut degenerate = Vec::new();
    let mut non_binary_masks = Vec::new();
    for (record, check) in manifest.records.iter().zip(checks) {
        match check {
            RecordCheck::Failed(violation) => errors.push(ValidationIssue {
                record_id: record.id.clone(),
                violation,
            }),
            RecordCheck::Ok { degenerate: d, non_binary } => {
                if d {
                    degenerate.push(record.id.clone());
                }
                if non_binary > 0 {
                    non_binary_masks.push((record.id.clone(), non_binary));
                }
            }
        }
    }

    let per_class_counts = manifest.per_class_counts();
    for (class, &count) in &per_class_counts {
        if count == 0 {
            errors.push(ValidationIssue {
                record_id: format!("<class {class}>"),
                violation: "class has no records".to_string(),
            });
        }
    }

    let expected_totals_check = expectations.map(|exp| {
        let mut ok = true;
        if let Some(total) = exp.total {
            if total != manifest.records.len() {
                ok = false;
                errors.push(ValidationIssue {
                    record_id: "<expectations>".to_string(),
                    violation: format!("expected {total} records in total, found {}", manifest.records.len()),
                });
            }
        }
        for (class, &want) in &exp.classes {
            let got = per_class_counts.get(class).copied().unwrap_or(0);
            if got != want {
                ok = false;
                errors.push(ValidationIssue {
                    record_id: "<expectations>".to_string(),
                    violation: format!("expected {want} records of class {class:?}, found {got}"),
                });
            }
        }
        ok
    });

    ValidationReport {
        total_records: manifest.records.len(),
        per_class_counts,
        errors,
        degenerate,
        non_binary_masks,
        expected_totals_check,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::{write_mask_png, write_png};
    use tempfile::tempdir;

    fn rec(id: &str, class: &str) -> CorpusRecord {
        CorpusRecord {
            id: id.into(),
            class_label: class.into(),
            image_path: format!("img/{id}.png").into(),
            mask_path: format!("mask/{id}.png").into(),
            split: Split::Test,
            provenance: None,
        }
    }

    fn write_lines(dir: &Path, lines: &[&str]) -> PathBuf {
        let p = dir.join("manifest.jsonl");
        std::fs::write(&p, lines.join("\n")).unwrap();
        p
    }

    #[test]
    fn loads_two_records() {
        let dir = tempdir().unwrap();
        let p = write_lines(
            dir.path(),
            &[
                r#"{"version":"1","class_set":["dog"]}"#,
                r#"{"id":"dog_001","class":"dog","image":"a.png","mask":"am.png","split":"train"}"#,
                r#"{"id":"dog_002","class":"dog","image":"b.png","mask":"bm.png","split":"test"}"#,
            ],
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[0].split, Split::Train);
        assert_eq!(m.base_dir, dir.path());
    }

    #[test]
    fn duplicate_id_names_both_lines() {
        let dir = tempdir().unwrap();
        let p = write_lines(
            dir.path(),
            &[
                r#"{"version":"1","class_set":["dog"]}"#,
                r#"{"id":"dog_001","class":"dog","image":"a.png","mask":"am.png","split":"train"}"#,
                r#"{"id":"dog_001","class":"dog","image":"b.png","mask":"bm.png","split":"test"}"#,
            ],
        );
        match load_manifest(&p) {
            Err(CorpusError::DuplicateId { id, first_line, second_line }) => {
                assert_eq!(id, "dog_001");
                assert_eq!((first_line, second_line), (2, 3));
            }
            other => panic!("expected duplicate id error, got {other:?}"),
        }
    }

    #[test]
    fn parse_error_carries_line() {
        let dir = tempdir().unwrap();
        let p = write_lines(dir.path(), &[r#"{"version":"1","class_set":["dog"]}"#, r#"{"id": oops}"#]);
        match load_manifest(&p) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let p = write_lines(
            dir.path(),
            &[
                r#"{"version":"1","class_set":["dog"]}"#,
                r#"{"id":"x","class":"cat","image":"a.png","mask":"am.png","split":"train"}"#,
            ],
        );
        assert!(matches!(load_manifest(&p), Err(CorpusError::UnknownClass { .. })));
    }

    #[test]
    fn reference_sized_manifest_counts() {
        let dir = tempdir().unwrap();
        let classes: Vec<String> = REFERENCE_CLASSES.iter().map(|s| s.to_string()).collect();
        let records = (0..REFERENCE_ORIGINALS)
            .map(|i| rec(&format!("r{i:05}"), &classes[i % 12]))
            .collect();
        let m = Manifest::new(classes, records, dir.path());
        let p = dir.path().join("big.jsonl");
        write_manifest(&m, &p).unwrap();
        let back = load_manifest(&p).unwrap();
        assert_eq!(back.records.len(), REFERENCE_ORIGINALS);
        for &n in back.per_class_counts().values() {
            assert!((1200..=1400).contains(&n), "{n}");
        }
    }

    #[test]
    fn load_pair_thresholds_at_128() {
        let dir = tempdir().unwrap();
        let img = Image::filled(4, 4, [9, 9, 9]);
        write_png(&img, &dir.path().join("img/a.png")).unwrap();
        let mut samples = vec![255u8; 16];
        samples[0] = 127;
        samples[1] = 128;
        let gray = image::GrayImage::from_raw(4, 4, samples.clone()).unwrap();
        std::fs::create_dir_all(dir.path().join("mask")).unwrap();
        gray.save(dir.path().join("mask/a.png")).unwrap();
        let (i, m) = load_pair(&rec("a", "dog"), dir.path()).unwrap();
        assert_eq!(i, img);
        let reference: Vec<bool> = samples.iter().map(|&v| v >= 128).collect();
        assert_eq!(m.bits(), &reference[..]);
        assert!(!m.get(0, 0));
        assert!(m.get(1, 0));
        // thresholding a binary mask is idempotent
        write_mask_png(&m, &dir.path().join("mask/a.png")).unwrap();
        let (_, m2) = load_pair(&rec("a", "dog"), dir.path()).unwrap();
        assert_eq!(m2, m);
    }

    #[test]
    fn validation_flags_mismatch_and_degenerate() {
        let dir = tempdir().unwrap();
        let d = dir.path();
        write_png(&Image::filled(4, 4, [1, 2, 3]), &d.join("img/ok.png")).unwrap();
        write_mask_png(&BinaryMask::filled(4, 4, true), &d.join("mask/ok.png")).unwrap();
        write_png(&Image::filled(4, 4, [1, 2, 3]), &d.join("img/bad.png")).unwrap();
        write_mask_png(&BinaryMask::filled(5, 4, true), &d.join("mask/bad.png")).unwrap();
        write_png(&Image::filled(4, 4, [1, 2, 3]), &d.join("img/empty.png")).unwrap();
        write_mask_png(&BinaryMask::filled(4, 4, false), &d.join("mask/empty.png")).unwrap();
        let m = Manifest::new(
            vec!["dog".into()],
            vec![rec("ok", "dog"), rec("bad", "dog"), rec("empty", "dog"), rec("missing", "dog")],
            d,
        );
        let report = validate_corpus(&m, None);
        assert_eq!(report.total_records, 4);
        let ids: Vec<&str> = report.errors.iter().map(|e| e.record_id.as_str()).collect();
        assert_eq!(ids, vec!["bad", "missing"]);
        assert_eq!(report.degenerate, vec!["empty".to_string()]);
        assert!(!report.passed());
        assert_eq!(report.expected_totals_check, None);
        // pure: same inputs, same report
        assert_eq!(validate_corpus(&m, None), report);
    }

    #[test]
    fn expectations_mismatch_is_a_fail_entry() {
        let dir = tempdir().unwrap();
        let d = dir.path();
        write_png(&Image::filled(2, 2, [1, 2, 3]), &d.join("img/a.png")).unwrap();
        write_mask_png(&BinaryMask::filled(2, 2, true), &d.join("mask/a.png")).unwrap();
        let m = Manifest::new(vec!["dog".into()], vec![rec("a", "dog")], d);
        let ok = validate_corpus(&m, Some(&ExpectedCounts::total(1)));
        assert!(ok.passed());
        assert_eq!(ok.expected_totals_check, Some(true));
        let mut exp = ExpectedCounts::total(2);
        exp.classes.insert("dog".into(), 3);
        let bad = validate_corpus(&m, Some(&exp));
        assert_eq!(bad.expected_totals_check, Some(false));
        assert_eq!(bad.errors.len(), 2);
    }

    #[test]
    fn expectations_toml() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("exp.toml");
        std::fs::write(&p, "total = 12248\n[classes]\ndog = 1000\n").unwrap();
        let e = ExpectedCounts::load(&p).unwrap();
        assert_eq!(e.total, Some(REFERENCE_AI_BACKGROUND));
        assert_eq!(e.classes["dog"], 1000);
    }
}
