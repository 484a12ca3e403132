//! Main-effects multiple linear regression over categorical factors.
//!
//! Each factor is dummy coded against a chosen reference level, the model is
//! solved by Householder QR with column pivoting, and coefficients carry
//! standard errors, two-sided t-test p-values and 95% confidence intervals.

pub mod dist;

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::results::RegressionRecord;

pub use dist::{normal_quantile, p_value, t_quantile};

#[derive(Debug, Error, PartialEq)]
pub enum RegressionError {
    #[error("factor {0:?} has an empty level set")]
    EmptyLevels(String),
    #[error("factor {factor:?}: reference level {reference:?} is not among its levels")]
    BadReference { factor: String, reference: String },
    #[error("record {index}: factor {factor:?} has undeclared level {level:?}")]
    UnseenLevel { index: usize, factor: String, level: String },
    #[error("unknown factor {0:?}")]
    UnknownFactor(String),
    #[error("unknown response field {0:?}")]
    UnknownResponse(String),
    #[error("need more observations ({rows}) than columns ({cols})")]
    TooFewRows { rows: usize, cols: usize },
    #[error("design matrix is rank deficient (rank {rank}); collinear columns: {}", columns.join(", "))]
    RankDeficient { rank: usize, columns: Vec<String> },
    #[error("response has {got} values for {rows} rows")]
    ResponseLength { rows: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorSpec {
    pub name: String,
    pub levels: Vec<String>,
    pub reference: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DesignSpec {
    pub factors: Vec<FactorSpec>,
    pub response: String,
}

impl DesignSpec {
    pub fn validate(&self) -> Result<(), RegressionError> {
        for f in &self.factors {
            if f.levels.is_empty() {
                return Err(RegressionError::EmptyLevels(f.name.clone()));
            }
            if !f.levels.contains(&f.reference) {
                return Err(RegressionError::BadReference {
                    factor: f.name.clone(),
                    reference: f.reference.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn column_count(&self) -> usize {
        1 + self.factors.iter().map(|f| f.levels.len() - 1).sum::<usize>()
    }
}

/// Row-major dense matrix whose first column is the intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<String>,
    pub values: Vec<f64>,
}

impl DesignMatrix {
    pub fn from_rows(labels: Vec<String>, rows: &[Vec<f64>]) -> Self {
        let cols = labels.len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged design rows");
        Self {
            rows: rows.len(),
            cols,
            labels,
            values: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn mul_vec(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(beta).map(|(x, b)| x * b).sum())
            .collect()
    }
}

/// Dummy codes `records` per `spec`. Columns: intercept, then for each factor
/// its non-reference levels in declared order, labelled `factor[level]`.
pub fn encode_design(records: &[RegressionRecord], spec: &DesignSpec) -> Result<(DesignMatrix, Vec<f64>), RegressionError> {
    spec.validate()?;
    if spec.response != "accuracy" {
        return Err(RegressionError::UnknownResponse(spec.response.clone()));
    }
    let mut labels = vec!["Intercept".to_string()];
    let mut offsets = Vec::new();
    for f in &spec.factors {
        offsets.push(labels.len());
        for level in f.levels.iter().filter(|l| **l != f.reference) {
            labels.push(format!("{}[{}]", f.name, level));
        }
    }
    let cols = labels.len();
    let mut values = vec![0.0; records.len() * cols];
    let mut y = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        values[i * cols] = 1.0;
        for (f, &offset) in spec.factors.iter().zip(&offsets) {
            let level = rec.factor(&f.name).ok_or_else(|| RegressionError::UnknownFactor(f.name.clone()))?;
            let pos = f.levels.iter().position(|l| l == level).ok_or_else(|| RegressionError::UnseenLevel {
                index: i,
                factor: f.name.clone(),
                level: level.to_string(),
            })?;
            let ref_pos = f.levels.iter().position(|l| *l == f.reference).expect("validated");
            if pos != ref_pos {
                let col = offset + if pos < ref_pos { pos } else { pos - 1 };
                values[i * cols + col] = 1.0;
            }
        }
        y.push(rec.accuracy);
    }
    Ok((
        DesignMatrix {
            rows: records.len(),
            cols,
            labels,
            values,
        },
        y,
    ))
}

/// Householder QR with column pivoting, `X P = Q R`.
struct PivotedQr {
    /// Column-major working copy: R above the diagonal, reflectors below.
    a: Vec<Vec<f64>>,
    diag: Vec<f64>,
    betas: Vec<f64>,
    perm: Vec<usize>,
    rank: usize,
    m: usize,
}

impl PivotedQr {
    fn new(x: &DesignMatrix) -> Self {
        let (m, k) = (x.rows, x.cols);
        let mut a: Vec<Vec<f64>> = (0..k).map(|c| (0..m).map(|r| x.get(r, c)).collect()).collect();
        let mut perm: Vec<usize> = (0..k).collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let max_norm = a.iter().map(|c| norm(c)).fold(0.0, f64::max);
        let tol = m as f64 * f64::EPSILON * max_norm;
        let mut diag = Vec::with_capacity(k);
        let mut betas = Vec::with_capacity(k);
        let mut rank = 0;

        for j in 0..k.min(m) {
            let (p, pn) = (j..k)
                .map(|c| (c, norm(&a[c][j..])))
                .fold((j, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pn <= tol {
                break;
            }
            a.swap(j, p);
            perm.swap(j, p);

            let alpha = if a[j][j] > 0.0 { -pn } else { pn };
            a[j][j] -= alpha;
            let vnorm2: f64 = a[j][j..].iter().map(|v| v * v).sum();
            let beta = if vnorm2 > 0.0 { 2.0 / vnorm2 } else { 0.0 };
            let (head, tail) = a.split_at_mut(j + 1);
            let v = &head[j][j..];
            for col in tail.iter_mut() {
                let dot: f64 = v.iter().zip(&col[j..]).map(|(a, b)| a * b).sum();
                let s = beta * dot;
                for (ci, vi) in col[j..].iter_mut().zip(v) {
                    *ci -= s * vi;
                }
            }
            diag.push(alpha);
            betas.push(beta);
            rank += 1;
        }
        Self {
            a,
            diag,
            betas,
            perm,
            rank,
            m,
        }
    }

    fn qt_mul(&self, y: &[f64]) -> Vec<f64> {
        let mut z = y.to_vec();
        for j in 0..self.rank {
            let v = &self.a[j][j..];
            let dot: f64 = v.iter().zip(&z[j..]).map(|(a, b)| a * b).sum();
            let s = self.betas[j] * dot;
            for (zi, vi) in z[j..].iter_mut().zip(v) {
                *zi -= s * vi;
            }
        }
        z
    }

    fn r(&self, row: usize, col: usize) -> f64 {
        if row == col {
            self.diag[row]
        } else {
            self.a[col][row]
        }
    }

    /// Solves `R z = rhs` for the leading `rank x rank` block.
    fn back_substitute(&self, rhs: &[f64]) -> Vec<f64> {
        let k = self.rank;
        let mut z = vec![0.0; k];
        for i in (0..k).rev() {
            let s: f64 = ((i + 1)..k).map(|j| self.r(i, j) * z[j]).sum();
            z[i] = (rhs[i] - s) / self.r(i, i);
        }
        z
    }

    /// Diagonal of `(R^T R)^{-1}` in pivoted order.
    fn inverse_gram_diagonal(&self) -> Vec<f64> {
        let k = self.rank;
        // columns of R^{-1}
        let mut rinv = vec![vec![0.0; k]; k];
        for c in 0..k {
            let mut e = vec![0.0; k];
            e[c] = 1.0;
            let col = self.back_substitute(&e);
            for r in 0..k {
                rinv[r][c] = col[r];
            }
        }
        rinv.iter().map(|row| row.iter().map(|v| v * v).sum()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Significance {
    #[serde(rename = "ns")]
    NotSignificant,
    #[serde(rename = "*")]
    One,
    #[serde(rename = "**")]
    Two,
    #[serde(rename = "***")]
    Three,
    #[serde(rename = "****")]
    Four,
}

impl fmt::Display for Significance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Significance::NotSignificant => "ns",
            Significance::One => "*",
            Significance::Two => "**",
            Significance::Three => "***",
            Significance::Four => "****",
        })
    }
}

pub fn significance_summary(p: f64) -> Significance {
    if p < 0.0001 {
        Significance::Four
    } else if p < 0.001 {
        Significance::Three
    } else if p < 0.01 {
        Significance::Two
    } else if p < 0.05 {
        Significance::One
    } else {
        Significance::NotSignificant
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegressionFit {
    pub labels: Vec<String>,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    pub ci95_low: Vec<f64>,
    pub ci95_high: Vec<f64>,
    pub significance: Vec<Significance>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    pub rss: f64,
    pub sigma2: f64,
    pub df: usize,
    pub r_squared: f64,
}

/// Least squares fit of `y` on `x`.
pub fn fit_ols(x: &DesignMatrix, y: &[f64]) -> Result<RegressionFit, RegressionError> {
    let (m, k) = (x.rows, x.cols);
    if y.len() != m {
        return Err(RegressionError::ResponseLength { rows: m, got: y.len() });
    }
    if m <= k {
        return Err(RegressionError::TooFewRows { rows: m, cols: k });
    }
    let qr = PivotedQr::new(x);
    if qr.rank < k {
        return Err(RegressionError::RankDeficient {
            rank: qr.rank,
            columns: qr.perm[qr.rank..].iter().map(|&c| x.labels[c].clone()).collect(),
        });
    }
    debug_assert_eq!(qr.m, m);

    let qty = qr.qt_mul(y);
    let z = qr.back_substitute(&qty[..k]);
    let gram = qr.inverse_gram_diagonal();
    let mut beta = vec![0.0; k];
    let mut inv_diag = vec![0.0; k];
    for (i, &col) in qr.perm.iter().enumerate() {
        beta[col] = z[i];
        inv_diag[col] = gram[i];
    }

    let fitted = x.mul_vec(&beta);
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let rss: f64 = residuals.iter().map(|r| r * r).sum();
    let df = m - k;
    let sigma2 = rss / df as f64;
    let mean = y.iter().sum::<f64>() / m as f64;
    let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };

    let t_crit = t_quantile(0.975, df as f64);
    let std_errors: Vec<f64> = inv_diag.iter().map(|d| (sigma2 * d).sqrt()).collect();
    let t_stats: Vec<f64> = beta
        .iter()
        .zip(&std_errors)
        .map(|(&b, &se)| {
            if se > 0.0 {
                b / se
            } else if b.abs() <= f64::EPSILON * y.iter().fold(1.0f64, |a, v| a.max(v.abs())) * 16.0 {
                0.0
            } else {
                b.signum() * f64::INFINITY
            }
        })
        .collect();
    let p_values: Vec<f64> = t_stats.iter().map(|&t| p_value(t, df as f64)).collect();

    Ok(RegressionFit {
        labels: x.labels.clone(),
        ci95_low: beta.iter().zip(&std_errors).map(|(b, se)| b - t_crit * se).collect(),
        ci95_high: beta.iter().zip(&std_errors).map(|(b, se)| b + t_crit * se).collect(),
        significance: p_values.iter().map(|&p| significance_summary(p)).collect(),
        estimates: beta,
        std_errors,
        t_stats,
        p_values,
        fitted,
        residuals,
        rss,
        sigma2,
        df,
        r_squared,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostics {
    /// `(fitted, residual)` per observation.
    pub residual_plot: Vec<(f64, f64)>,
    /// `(theoretical normal quantile, sorted standardized residual)`.
    pub qq_plot: Vec<(f64, f64)>,
}

/// Plotting positions `(i - a) / (n + 1 - 2a)` with `a = 3/8` for `n <= 10`, else `1/2`.
pub fn plotting_positions(n: usize) -> Vec<f64> {
    let a = if n <= 10 { 0.375 } else { 0.5 };
    (1..=n).map(|i| (i as f64 - a) / (n as f64 + 1.0 - 2.0 * a)).collect()
}

pub fn diagnostics(fit: &RegressionFit) -> Diagnostics {
    let residual_plot = fit.fitted.iter().copied().zip(fit.residuals.iter().copied()).collect();
    // residual noise at rounding level counts as an exact fit
    let scale = fit.fitted.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let sigma = fit.sigma2.sqrt();
    let sigma = if sigma <= 64.0 * f64::EPSILON * scale { 0.0 } else { sigma };
    let mut standardized: Vec<f64> = fit
        .residuals
        .iter()
        .map(|r| if sigma > 0.0 { r / sigma } else { 0.0 })
        .collect();
    standardized.sort_by(f64::total_cmp);
    let qq_plot = plotting_positions(standardized.len())
        .into_iter()
        .map(normal_quantile)
        .zip(standardized)
        .collect();
    Diagnostics { residual_plot, qq_plot }
}

/// Plain-language reading of a coefficient against its reference level, e.g.
/// `Image Scenario[Random Background] decreases accuracy by 70.78% vs reference`.
pub fn interpret(label: &str, estimate: f64, response: &str) -> String {
    let verb = if estimate < 0.0 { "decreases" } else { "increases" };
    format!("{label} {verb} {response} by {:.2}% vs reference", estimate.abs() * 100.0)
}

fn format_p(p: f64) -> String {
    if p < 0.0001 {
        "<0.0001".to_string()
    } else {
        format!("{p:.4}")
    }
}

/// Table-shaped summary: Variable, Estimate, P value, P value summary, then
/// standard error, t and the 95% interval.
pub fn fit_table_csv(fit: &RegressionFit) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "Variable",
        "Estimate",
        "P value",
        "P value summary",
        "Std. Error",
        "t",
        "CI 2.5%",
        "CI 97.5%",
    ])
    .expect("in-memory write");
    for i in 0..fit.labels.len() {
        w.write_record([
            fit.labels[i].clone(),
            format!("{:.6}", fit.estimates[i]),
            format_p(fit.p_values[i]),
            fit.significance[i].to_string(),
            format!("{:.6}", fit.std_errors[i]),
            format!("{:.4}", fit.t_stats[i]),
            format!("{:.6}", fit.ci95_low[i]),
            format!("{:.6}", fit.ci95_high[i]),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn pairs_csv(header: [&str; 2], pairs: &[(f64, f64)]) -> String {
    let mut out = format!("{},{}\n", header[0], header[1]);
    for (a, b) in pairs {
        out.push_str(&format!("{a:.10},{b:.10}\n"));
    }
    out
}

/// Builds a design spec from declared factor levels and chosen references.
pub fn design_spec(
    levels: &BTreeMap<String, Vec<String>>,
    factors: &[&str],
    references: &[&str],
    response: &str,
) -> Result<DesignSpec, RegressionError> {
    let factors = factors
        .iter()
        .zip(references.iter().map(Some).chain(std::iter::repeat(None)))
        .map(|(&name, reference)| {
            let levels = levels.get(name).cloned().ok_or_else(|| RegressionError::UnknownFactor(name.to_string()))?;
            let reference = match reference {
                Some(r) => r.to_string(),
                None => levels.first().cloned().ok_or_else(|| RegressionError::EmptyLevels(name.to_string()))?,
            };
            Ok(FactorSpec {
                name: name.to_string(),
                levels,
                reference,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let spec = DesignSpec {
        factors,
        response: response.to_string(),
    };
    spec.validate()?;
    Ok(spec)
}
