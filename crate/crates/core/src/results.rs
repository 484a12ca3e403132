//! Model-accuracy tables.
//!
//! Results files are comma-delimited with header `model,mu,scenario,cross,inner`,
//! one row per `(model, scenario)`. `inner` may be left empty for every row of
//! a model when only cross-scenario accuracies exist. Regression files use the
//! header `model,scenario,class,accuracy` and may declare level sets up front
//! with comment lines such as `# levels scenario: original, segmented`.
//!
//! Accuracies are fractions in `[0, 1]`; a trailing `%` divides by 100.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ResultsError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {field} value {value} is outside [0, 1]")]
    Range { line: usize, field: &'static str, value: f64 },
    #[error("model {model:?}: missing mu")]
    MissingMu { model: String },
    #[error("model {model:?}: conflicting mu values {first} and {second}")]
    ConflictingMu { model: String, first: f64, second: f64 },
    #[error("model {model:?}: scenario {scenario:?} listed twice")]
    DuplicateScenario { model: String, scenario: String },
    #[error("model {model:?}: inner accuracy given for some scenarios but not {scenario:?}")]
    PartialInner { model: String, scenario: String },
    #[error("model {model:?}: no scenarios")]
    NoScenarios { model: String },
    #[error("line {line}: unknown {factor} level {level:?}")]
    UnknownLevel { line: usize, factor: String, level: String },
}

/// Accuracies of one model: `mu` on the original data, `cross[i]` trained on
/// original and tested on scenario `i`, `inner[i]` trained and tested on `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultTable {
    pub model_name: String,
    pub mu: f64,
    pub cross: BTreeMap<String, f64>,
    /// Empty when only cross-scenario data is available.
    pub inner: BTreeMap<String, f64>,
    /// Scenario names in sorted order.
    pub scenario_order: Vec<String>,
}

impl ResultTable {
    pub fn new(
        model_name: &str,
        mu: f64,
        cross: BTreeMap<String, f64>,
        inner: BTreeMap<String, f64>,
    ) -> Result<Self, ResultsError> {
        let model = model_name.to_string();
        if cross.is_empty() {
            return Err(ResultsError::NoScenarios { model });
        }
        if !inner.is_empty() {
            if let Some(s) = cross.keys().find(|s| !inner.contains_key(*s)) {
                return Err(ResultsError::PartialInner { model, scenario: s.clone() });
            }
            if let Some(s) = inner.keys().find(|s| !cross.contains_key(*s)) {
                return Err(ResultsError::PartialInner { model, scenario: s.clone() });
            }
        }
        for (field, v) in std::iter::once(("mu", mu))
            .chain(cross.values().map(|&v| ("cross", v)))
            .chain(inner.values().map(|&v| ("inner", v)))
        {
            check_range(0, field, v)?;
        }
        Ok(Self {
            model_name: model,
            mu,
            scenario_order: cross.keys().cloned().collect(),
            cross,
            inner,
        })
    }

    pub fn n(&self) -> usize {
        self.scenario_order.len()
    }

    pub fn has_inner(&self) -> bool {
        !self.inner.is_empty()
    }
}

fn check_range(line: usize, field: &'static str, value: f64) -> Result<f64, ResultsError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(ResultsError::Range { line, field, value })
    }
}

/// Parses `0.9525`, `95.25%` (and the decimal-comma form `95,25%`).
pub fn parse_accuracy(raw: &str, line: usize, field: &'static str) -> Result<f64, ResultsError> {
    let s = raw.trim();
    let (num, pct) = match s.strip_suffix('%') {
        Some(n) => (n.trim().replace(',', "."), true),
        None => (s.to_string(), false),
    };
    let v: f64 = num.parse().map_err(|_| ResultsError::Parse {
        line,
        message: format!("{field}: {raw:?} is not a number"),
    })?;
    check_range(line, field, if pct { v / 100.0 } else { v })
}

fn read_text(path: &Path) -> Result<String, ResultsError> {
    let mut s = String::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|source| ResultsError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(s)
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(false)
        .from_reader(text.as_bytes())
}

fn header_index(headers: &csv::StringRecord, wanted: &[&str]) -> Result<Vec<usize>, ResultsError> {
    wanted
        .iter()
        .map(|w| {
            headers.iter().position(|h| h.eq_ignore_ascii_case(w)).ok_or_else(|| ResultsError::Parse {
                line: 1,
                message: format!("missing column {w:?}"),
            })
        })
        .collect()
}

pub fn load_results(path: &Path) -> Result<Vec<ResultTable>, ResultsError> {
    parse_results(&read_text(path)?)
}

pub fn parse_results(text: &str) -> Result<Vec<ResultTable>, ResultsError> {
    struct Acc {
        mu: Option<f64>,
        cross: BTreeMap<String, f64>,
        inner: BTreeMap<String, Option<f64>>,
    }

    let mut rdr = csv_reader(text);
    let headers = rdr.headers().map_err(|e| parse_csv(e, 1))?.clone();
    let idx = header_index(&headers, &["model", "mu", "scenario", "cross", "inner"])?;
    let mut models: BTreeMap<String, Acc> = BTreeMap::new();

    for row in rdr.records() {
        let row = row.map_err(|e| parse_csv(e, 0))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let get = |i: usize| row.get(idx[i]).unwrap_or("");
        let model = get(0).to_string();
        let scenario = get(2).to_string();
        if model.is_empty() || scenario.is_empty() {
            return Err(ResultsError::Parse {
                line,
                message: "model and scenario must be nonempty".into(),
            });
        }
        let acc = models.entry(model.clone()).or_insert(Acc {
            mu: None,
            cross: BTreeMap::new(),
            inner: BTreeMap::new(),
        });
        if !get(1).is_empty() {
            let mu = parse_accuracy(get(1), line, "mu")?;
            match acc.mu {
                Some(first) if (first - mu).abs() > 1e-12 => {
                    return Err(ResultsError::ConflictingMu { model, first, second: mu })
                }
                _ => acc.mu = Some(mu),
            }
        }
        if acc.cross.contains_key(&scenario) {
            return Err(ResultsError::DuplicateScenario { model, scenario });
        }
        acc.cross.insert(scenario.clone(), parse_accuracy(get(3), line, "cross")?);
        let inner = if get(4).is_empty() {
            None
        } else {
            Some(parse_accuracy(get(4), line, "inner")?)
        };
        acc.inner.insert(scenario, inner);
    }

    models
        .into_iter()
        .map(|(model, acc)| {
            let mu = acc.mu.ok_or_else(|| ResultsError::MissingMu { model: model.clone() })?;
            let given = acc.inner.values().filter(|v| v.is_some()).count();
            let inner = if given == 0 {
                BTreeMap::new()
            } else if let Some((s, _)) = acc.inner.iter().find(|(_, v)| v.is_none()) {
                return Err(ResultsError::PartialInner {
                    model,
                    scenario: s.clone(),
                });
            } else {
                acc.inner.into_iter().map(|(k, v)| (k, v.expect("checked"))).collect()
            };
            ResultTable::new(&model, mu, acc.cross, inner)
        })
        .collect()
}

fn parse_csv(e: csv::Error, fallback_line: usize) -> ResultsError {
    let line = e.position().map_or(fallback_line, |p| p.line() as usize);
    ResultsError::Parse {
        line,
        message: e.to_string(),
    }
}

/// Serializes tables in the results-file layout, rows sorted by model then scenario.
pub fn write_results(tables: &[ResultTable]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "mu", "scenario", "cross", "inner"]).expect("in-memory write");
    let mut sorted: Vec<&ResultTable> = tables.iter().collect();
    sorted.sort_by(|a, b| a.model_name.cmp(&b.model_name));
    for t in sorted {
        for s in &t.scenario_order {
            let inner = t.inner.get(s).map(|v| format!("{v:?}")).unwrap_or_default();
            w.write_record([
                t.model_name.clone(),
                format!("{:?}", t.mu),
                s.clone(),
                format!("{:?}", t.cross[s]),
                inner,
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

// ---------------------------------------------------------------------------
// Regression records

pub const REGRESSION_FACTORS: [&str; 3] = ["model", "scenario", "class"];

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionRecord {
    pub model_name: String,
    pub scenario: String,
    pub class_label: String,
    pub accuracy: f64,
}

impl RegressionRecord {
    /// Level of the named factor (`model`, `scenario` or `class`).
    pub fn factor(&self, name: &str) -> Option<&str> {
        match name {
            "model" => Some(&self.model_name),
            "scenario" => Some(&self.scenario),
            "class" => Some(&self.class_label),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegressionData {
    pub records: Vec<RegressionRecord>,
    /// Declared (or first-seen) level order per factor.
    pub levels: BTreeMap<String, Vec<String>>,
    pub warnings: Vec<String>,
}

/// Reads regression records. `# levels <factor>: a, b, c` comment lines fix
/// a factor's level set and order; undeclared factors take levels in order of
/// first appearance. A repeated `(model, scenario, class)` cell keeps the last
/// value and adds a warning.
pub fn parse_regression_records(text: &str) -> Result<RegressionData, ResultsError> {
    let mut declared: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let Some(rest) = line.trim().strip_prefix('#') else { continue };
        let Some(decl) = rest.trim().strip_prefix("levels") else { continue };
        let (factor, list) = decl.split_once(':').ok_or_else(|| ResultsError::Parse {
            line: i + 1,
            message: "level declaration needs `factor: a, b`".into(),
        })?;
        let factor = factor.trim().to_string();
        if !REGRESSION_FACTORS.contains(&factor.as_str()) {
            return Err(ResultsError::Parse {
                line: i + 1,
                message: format!("unknown factor {factor:?}"),
            });
        }
        let levels: Vec<String> = list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        declared.insert(factor, levels);
    }

    let mut rdr = csv_reader(text);
    let headers = rdr.headers().map_err(|e| parse_csv(e, 1))?.clone();
    let idx = header_index(&headers, &["model", "scenario", "class", "accuracy"])?;

    let mut levels = declared.clone();
    for f in REGRESSION_FACTORS {
        levels.entry(f.to_string()).or_default();
    }
    let mut cells: BTreeMap<(String, String, String), usize> = BTreeMap::new();
    let mut records: Vec<RegressionRecord> = Vec::new();
    let mut warnings = Vec::new();

    for row in rdr.records() {
        let row = row.map_err(|e| parse_csv(e, 0))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let get = |i: usize| row.get(idx[i]).unwrap_or("").to_string();
        let values = [get(0), get(1), get(2)];
        for (factor, value) in REGRESSION_FACTORS.iter().zip(&values) {
            let set = levels.get_mut(*factor).expect("all factors present");
            if !set.contains(value) {
                if declared.contains_key(*factor) {
                    return Err(ResultsError::UnknownLevel {
                        line,
                        factor: factor.to_string(),
                        level: value.clone(),
                    });
                }
                set.push(value.clone());
            }
        }
        let accuracy = parse_accuracy(&get(3), line, "accuracy")?;
        let [model_name, scenario, class_label] = values;
        let rec = RegressionRecord {
            model_name,
            scenario,
            class_label,
            accuracy,
        };
        let key = (rec.model_name.clone(), rec.scenario.clone(), rec.class_label.clone());
        if let Some(&pos) = cells.get(&key) {
            warnings.push(format!(
                "line {line}: duplicate cell model={:?} scenario={:?} class={:?}; keeping the last value",
                key.0, key.1, key.2
            ));
            records[pos] = rec;
        } else {
            cells.insert(key, records.len());
            records.push(rec);
        }
    }

    Ok(RegressionData {
        records,
        levels,
        warnings,
    })
}

pub fn load_regression_records(path: &Path) -> Result<RegressionData, ResultsError> {
    parse_regression_records(&read_text(path)?)
}

/// Sorted scenario union across tables.
pub fn scenario_union(tables: &[ResultTable]) -> Vec<String> {
    let all: BTreeSet<&String> = tables.iter().flat_map(|t| t.scenario_order.iter()).collect();
    all.into_iter().cloned().collect()
}
