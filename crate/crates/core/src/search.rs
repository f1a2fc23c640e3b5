//! Training-free architecture search: sample candidates inside a parameter
//! budget, score each with a proxy, keep the argmax.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::arch::{param_count, sample_arch, ArchConfig, SearchSpace};
use crate::bench::CaptureSettings;
use crate::proxy::{InvalidReason, Proxy, ProxyError, ProxyScore};
use crate::rng::child_rng;
use crate::sim::SimError;

/// Rejection-sampling budget per requested candidate.
pub const ATTEMPTS_PER_CANDIDATE: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum SearchError {
    #[error("parameter range {lo}..={hi} is empty")]
    BadRange { lo: u64, hi: u64 },
    #[error("need at least one candidate")]
    NoCandidates,
    #[error("only {found} of {wanted} candidates in range after {attempts} draws")]
    ExhaustedSampling {
        wanted: usize,
        found: usize,
        attempts: usize,
    },
    #[error("no candidate received a valid score")]
    AllInvalid,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Proxy(#[from] ProxyError),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub index: usize,
    pub params: u64,
    pub score: Option<f64>,
    pub invalid: Option<InvalidReason>,
    pub config: ArchConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchReport {
    pub proxy: String,
    pub space: SearchSpace,
    pub seed: u64,
    pub param_range: (u64, u64),
    pub capture: CaptureSettings,
    pub best_index: usize,
    pub best_score: f64,
    pub best_config: ArchConfig,
    pub candidates: Vec<Candidate>,
}

impl SearchReport {
    /// `index,params,score` rows; invalid scores are left empty.
    pub fn plot_csv(&self) -> String {
        let mut out = String::from("index,params,score\n");
        for c in &self.candidates {
            let score = c.score.map(|s| format!("{s:.17e}")).unwrap_or_default();
            writeln!(out, "{},{},{}", c.index, c.params, score).unwrap();
        }
        out
    }
}

/// Draws candidates until `n` fall inside `range` (inclusive).
pub fn sample_candidates(
    space: SearchSpace,
    n: usize,
    range: (u64, u64),
    seed: u64,
) -> Result<Vec<ArchConfig>, SearchError> {
    if n == 0 {
        return Err(SearchError::NoCandidates);
    }
    if range.0 > range.1 {
        return Err(SearchError::BadRange {
            lo: range.0,
            hi: range.1,
        });
    }
    let mut rng = child_rng(seed, "search", 0);
    let limit = ATTEMPTS_PER_CANDIDATE * n;
    let mut out = Vec::with_capacity(n);
    for _ in 0..limit {
        let a = sample_arch(space, &mut rng);
        let p = param_count(&a);
        if (range.0..=range.1).contains(&p) {
            out.push(a);
            if out.len() == n {
                return Ok(out);
            }
        }
    }
    Err(SearchError::ExhaustedSampling {
        wanted: n,
        found: out.len(),
        attempts: limit,
    })
}

/// Captures and scores every configuration; candidate `i` uses the capture
/// seed of record `i`.
pub fn score_candidates(
    proxy: &Proxy,
    configs: &[ArchConfig],
    capture: &CaptureSettings,
) -> Result<Vec<ProxyScore>, SearchError> {
    let mode = proxy.capture_mode();
    configs
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let stats = capture.capture(i, c, mode)?;
            Ok(proxy.score(&stats)?)
        })
        .collect()
}

/// Index of the highest valid score, lowest index on ties.
pub fn select_best(scores: &[ProxyScore]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let ProxyScore::Value(v) = *s {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best
}

pub fn search(
    proxy: &Proxy,
    space: SearchSpace,
    n: usize,
    param_range: (u64, u64),
    capture: &CaptureSettings,
) -> Result<SearchReport, SearchError> {
    let configs = sample_candidates(space, n, param_range, capture.seed)?;
    let scores = score_candidates(proxy, &configs, capture)?;
    let (best_index, best_score) = select_best(&scores).ok_or(SearchError::AllInvalid)?;
    let candidates = configs
        .into_iter()
        .zip(&scores)
        .enumerate()
        .map(|(index, (config, s))| Candidate {
            index,
            params: param_count(&config),
            score: s.value(),
            invalid: match s {
                ProxyScore::Invalid(r) => Some(*r),
                ProxyScore::Value(_) => None,
            },
            config,
        })
        .collect::<Vec<_>>();
    Ok(SearchReport {
        proxy: proxy.label(),
        space,
        seed: capture.seed,
        param_range,
        capture: *capture,
        best_index,
        best_score,
        best_config: candidates[best_index].config.clone(),
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_lowest_index() {
        let v = ProxyScore::Value;
        let bad = ProxyScore::Invalid(InvalidReason::Nan);
        assert_eq!(select_best(&[bad, v(2.0), v(3.0), v(3.0)]), Some((2, 3.0)));
        assert_eq!(select_best(&[v(0.5), v(0.5)]), Some((0, 0.5)));
        assert_eq!(select_best(&[bad, bad]), None);
    }

    #[test]
    fn impossible_range_exhausts() {
        let err = sample_candidates(SearchSpace::Autoformer, 3, (1, 10), 0).unwrap_err();
        assert_eq!(
            err,
            SearchError::ExhaustedSampling {
                wanted: 3,
                found: 0,
                attempts: 300
            }
        );
        assert!(matches!(
            sample_candidates(SearchSpace::Autoformer, 3, (10, 1), 0),
            Err(SearchError::BadRange { .. })
        ));
    }
}
