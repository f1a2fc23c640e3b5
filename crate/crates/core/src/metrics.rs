//! Rank correlations and the joint correlation metric.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least 2 samples, got {0}")]
    DegenerateInput(usize),
    #[error("weights must be non-negative")]
    NegativeWeight,
}

fn check(xs: &[f64], ys: &[f64]) -> Result<(), MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(MetricsError::DegenerateInput(xs.len()));
    }
    Ok(())
}

fn sgn(v: f64) -> i64 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Kendall tau-a. Tied pairs count zero; the denominator is always C(n, 2).
/// A constant series returns NaN.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    check(xs, ys)?;
    if is_constant(xs) || is_constant(ys) {
        return Ok(f64::NAN);
    }
    let n = xs.len();
    let mut s: i64 = 0;
    for i in 0..n {
        for j in i + 1..n {
            s += sgn(xs[i] - xs[j]) * sgn(ys[i] - ys[j]);
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(s as f64 / pairs)
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

/// 1-based ranks; ties share the average of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    check(xs, ys)?;
    pearson_r(&average_ranks(xs), &average_ranks(ys))
}

/// Two-pass centred Pearson correlation. NaN on a zero-variance input.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    check(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(f64::NAN);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// `(1/M) * sum(alpha_i * tau_i)`.
pub fn jcm(taus: &[f64], alphas: &[f64]) -> Result<f64, MetricsError> {
    if taus.len() != alphas.len() {
        return Err(MetricsError::LengthMismatch {
            left: taus.len(),
            right: alphas.len(),
        });
    }
    if taus.is_empty() {
        return Err(MetricsError::DegenerateInput(0));
    }
    if alphas.iter().any(|&a| a < 0.0 || a.is_nan()) {
        return Err(MetricsError::NegativeWeight);
    }
    let s: f64 = taus.iter().zip(alphas).map(|(t, a)| t * a).sum();
    Ok(s / taus.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub dataset_id: String,
    pub n: usize,
    pub kendall: f64,
    pub spearman: f64,
    pub pearson: f64,
}

impl CorrelationReport {
    pub fn compute(dataset_id: &str, scores: &[f64], truth: &[f64]) -> Result<Self, MetricsError> {
        Ok(CorrelationReport {
            dataset_id: dataset_id.to_string(),
            n: scores.len(),
            kendall: kendall_tau(scores, truth)?,
            spearman: spearman_rho(scores, truth)?,
            pearson: pearson_r(scores, truth)?,
        })
    }
}

pub const CSV_HEADER: &str = "dataset,n,kendall,spearman,pearson";

/// CSV rows with 6 decimals; `percent` multiplies the coefficients by 100.
pub fn reports_to_csv(reports: &[CorrelationReport], percent: bool) -> String {
    let k = if percent { 100.0 } else { 1.0 };
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6}",
            r.dataset_id,
            r.n,
            r.kendall * k,
            r.spearman * k,
            r.pearson * k
        )
        .unwrap();
    }
    out
}
