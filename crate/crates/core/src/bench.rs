//! Ground-truth benchmark store: architectures with per-dataset accuracies.
//!
//! On disk a store is JSON lines. An optional first line
//! `{"kind":"header",...}` carries the space, provenance and, for synthetic
//! stores, the capture settings needed to regenerate each record's
//! statistics. Every other line is one record:
//!
//! ```text
//! {"index":0,"space":"autoformer","arch":{...},"metrics":{"cifar100":{"dis_acc":81.2,"vanilla_acc":77.0}}}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::arch::{sample_arch, ArchConfig, SearchSpace};
use crate::proxy::{Proxy, ProxyError, ProxyScore};
use crate::rng::{child_rng, derive_seed};
use crate::sim::{capture_with_mode, SimError};
use crate::stats::{BatchSpec, CaptureMode, NetworkStatistics};

pub const DATASETS: [&str; 4] = ["cifar100", "flowers", "chaoyang", "imagenet"];
pub const IMAGENET: &str = "imagenet";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: schema error: {message}")]
    Schema { line: usize, message: String },
    #[error("index {index} out of range for store of {len} records")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("metric unavailable: dataset `{dataset}` with distill={distill}")]
    MetricUnavailable { dataset: String, distill: bool },
    #[error("planted proxy is invalid on record {index}: {score:?}")]
    PlantedInvalid { index: usize, score: ProxyScore },
    #[error(transparent)]
    Proxy(#[from] ProxyError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    #[serde(rename = "real-import")]
    RealImport,
    #[serde(rename = "synthetic")]
    Synthetic,
}

/// Accuracies in percent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMetrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dis_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vanilla_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subnet_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub index: usize,
    pub arch: ArchConfig,
    pub metrics: BTreeMap<String, DatasetMetrics>,
}

/// How the statistics of record `i` are regenerated: a standard capture of
/// its architecture with seed `derive_seed(seed, "record", i)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureSettings {
    pub scale: usize,
    pub batch: BatchSpec,
    pub seed: u64,
}

impl CaptureSettings {
    pub fn record_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, "record", index as u64)
    }

    pub fn capture(
        &self,
        index: usize,
        arch: &ArchConfig,
        mode: CaptureMode,
    ) -> Result<NetworkStatistics, SimError> {
        capture_with_mode(arch, self.scale, self.batch, self.record_seed(index), mode)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchStore {
    pub space: SearchSpace,
    pub provenance: Provenance,
    pub capture: Option<CaptureSettings>,
    pub records: Vec<BenchRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRepr {
    kind: String,
    space: SearchSpace,
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    capture: Option<CaptureSettings>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordRepr {
    index: usize,
    space: SearchSpace,
    arch: Value,
    metrics: BTreeMap<String, DatasetMetrics>,
}

fn check_metrics(
    space: SearchSpace,
    metrics: &BTreeMap<String, DatasetMetrics>,
) -> Result<(), String> {
    for (ds, m) in metrics {
        if !DATASETS.contains(&ds.as_str()) {
            return Err(format!("unknown dataset `{ds}`"));
        }
        for (name, v) in [
            ("dis_acc", m.dis_acc),
            ("vanilla_acc", m.vanilla_acc),
            ("subnet_acc", m.subnet_acc),
        ] {
            if let Some(v) = v {
                if !(0.0..=100.0).contains(&v) {
                    return Err(format!("{ds}.{name} = {v} outside [0, 100]"));
                }
            }
        }
        if ds == IMAGENET {
            if space != SearchSpace::Autoformer {
                return Err("imagenet metrics exist only for the autoformer space".into());
            }
            if m.dis_acc.is_some() || m.vanilla_acc.is_some() {
                return Err("imagenet provides only subnet_acc".into());
            }
            if m.subnet_acc.is_none() {
                return Err("imagenet entry without subnet_acc".into());
            }
        } else {
            if m.subnet_acc.is_some() {
                return Err(format!("{ds} does not provide subnet_acc"));
            }
            if m.dis_acc.is_none() && m.vanilla_acc.is_none() {
                return Err(format!("{ds} entry has no accuracy"));
            }
        }
    }
    Ok(())
}

impl BenchStore {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Datasets present in at least one record, in sorted order.
    pub fn datasets(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.records.iter().flat_map(|r| r.metrics.keys()).collect();
        set.into_iter().cloned().collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = HeaderRepr {
            kind: "header".into(),
            space: self.space,
            provenance: self.provenance,
            capture: self.capture,
        };
        out.push_str(&serde_json::to_string(&header).unwrap());
        out.push('\n');
        for r in &self.records {
            let arch = serde_json::to_value(&r.arch).unwrap();
            let repr = RecordRepr {
                index: r.index,
                space: r.arch.space(),
                arch: arch["arch"].clone(),
                metrics: r.metrics.clone(),
            };
            out.push_str(&serde_json::to_string(&repr).unwrap());
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, BenchError> {
        let mut header: Option<HeaderRepr> = None;
        let mut records: Vec<BenchRecord> = Vec::new();
        let mut seen = BTreeMap::new();
        let mut space: Option<SearchSpace> = None;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let value: Value = serde_json::from_str(line).map_err(|e| BenchError::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            let schema = |message: String| BenchError::Schema {
                line: lineno,
                message,
            };
            if value.get("kind").is_some() {
                if header.is_some() || !records.is_empty() {
                    return Err(schema("header must be the first line".into()));
                }
                let h: HeaderRepr =
                    serde_json::from_value(value).map_err(|e| schema(e.to_string()))?;
                if h.kind != "header" {
                    return Err(schema(format!("unknown line kind `{}`", h.kind)));
                }
                space = Some(h.space);
                header = Some(h);
                continue;
            }
            let repr: RecordRepr =
                serde_json::from_value(value).map_err(|e| schema(e.to_string()))?;
            let arch: ArchConfig = serde_json::from_value(serde_json::json!({
                "space": repr.space,
                "arch": repr.arch,
            }))
            .map_err(|e| schema(format!("arch: {e}")))?;
            arch.validate().map_err(|e| schema(e.to_string()))?;
            match space {
                None => space = Some(repr.space),
                Some(s) if s != repr.space => {
                    return Err(schema(format!(
                        "record space {} differs from store space {s}",
                        repr.space
                    )))
                }
                _ => {}
            }
            check_metrics(repr.space, &repr.metrics).map_err(schema)?;
            if let Some(prev) = seen.insert(repr.index, lineno) {
                return Err(schema(format!(
                    "duplicate index {} (first on line {prev})",
                    repr.index
                )));
            }
            records.push(BenchRecord {
                index: repr.index,
                arch,
                metrics: repr.metrics,
            });
        }
        records.sort_by_key(|r| r.index);
        for (i, r) in records.iter().enumerate() {
            if r.index != i {
                return Err(BenchError::Schema {
                    line: seen[&r.index],
                    message: format!("indices must be dense from 0; index {i} is missing"),
                });
            }
        }
        let space = space.ok_or(BenchError::Schema {
            line: 0,
            message: "empty store".into(),
        })?;
        Ok(BenchStore {
            space,
            provenance: header
                .as_ref()
                .map_or(Provenance::RealImport, |h| h.provenance),
            capture: header.and_then(|h| h.capture),
            records,
        })
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        Self::parse_jsonl(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), BenchError> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    fn record(&self, index: usize) -> Result<&BenchRecord, BenchError> {
        self.records.get(index).ok_or(BenchError::IndexOutOfRange {
            index,
            len: self.records.len(),
        })
    }

    pub fn random_index(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(0..self.records.len())
    }

    pub fn arch_by_idx(&self, index: usize) -> Result<&ArchConfig, BenchError> {
        Ok(&self.record(index)?.arch)
    }

    /// Distilled accuracy when `distill`, otherwise vanilla; imagenet only
    /// has the supernet accuracy and refuses `distill`.
    pub fn acc_by_idx(
        &self,
        index: usize,
        dataset: &str,
        distill: bool,
    ) -> Result<f64, BenchError> {
        let unavailable = || BenchError::MetricUnavailable {
            dataset: dataset.to_string(),
            distill,
        };
        let m = self
            .record(index)?
            .metrics
            .get(dataset)
            .ok_or_else(unavailable)?;
        let v = if dataset == IMAGENET {
            if distill {
                None
            } else {
                m.subnet_acc
            }
        } else if distill {
            m.dis_acc
        } else {
            m.vanilla_acc
        };
        v.ok_or_else(unavailable)
    }
}

/// Seeded shuffle of `0..n` cut into (validation, test); both parts sorted.
pub fn split(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    assert!(
        val_fraction > 0.0 && val_fraction < 1.0,
        "val_fraction must lie in (0, 1)"
    );
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut child_rng(seed, "split", 0));
    let k = (n as f64 * val_fraction).round() as usize;
    let mut val = idx[..k].to_vec();
    let mut test = idx[k..].to_vec();
    val.sort_unstable();
    test.sort_unstable();
    (val, test)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Logistic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub planted: Proxy,
    pub link: Link,
    /// Noise standard deviation relative to the unit-variance linked score.
    pub noise_std: f64,
    pub records: usize,
    pub seed: u64,
    pub space: SearchSpace,
    pub datasets: Vec<String>,
    pub capture: CaptureSettings,
}

/// Planted accuracies land in this range.
pub const SYNTH_ACC_RANGE: (f64, f64) = (10.0, 90.0);

fn zscore(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - mean) / sd).collect()
}

fn rescale(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (a, b) = SYNTH_ACC_RANGE;
    if hi == lo {
        return vec![(a + b) / 2.0; v.len()];
    }
    v.iter()
        .map(|x| a + (b - a) * (x - lo) / (hi - lo))
        .collect()
}

/// Planted ground truth: `acc = rescale(zscore(link(zscore(score))) + noise)`.
/// Returns the store together with the statistics of every record, and the
/// planted scores.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
) -> Result<(BenchStore, Vec<NetworkStatistics>, Vec<f64>), BenchError> {
    let mut arch_rng = child_rng(spec.seed, "arch", 0);
    let archs: Vec<ArchConfig> = (0..spec.records)
        .map(|_| sample_arch(spec.space, &mut arch_rng))
        .collect();
    let mode = spec.planted.capture_mode();
    let stats = archs
        .par_iter()
        .enumerate()
        .map(|(i, a)| spec.capture.capture(i, a, mode))
        .collect::<Result<Vec<_>, _>>()?;
    let mut planted = Vec::with_capacity(stats.len());
    for (i, s) in stats.iter().enumerate() {
        match spec.planted.score(s)? {
            ProxyScore::Value(v) => planted.push(v),
            score => return Err(BenchError::PlantedInvalid { index: i, score }),
        }
    }
    let z = zscore(&planted);
    let linked: Vec<f64> = match spec.link {
        Link::Identity => z,
        Link::Logistic => z.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
    };
    let base = zscore(&linked);
    let noisy = |stream: &str, d: usize| -> Vec<f64> {
        let mut rng = child_rng(spec.seed, stream, d as u64);
        let v: Vec<f64> = base
            .iter()
            .map(|b| {
                let e: f64 = StandardNormal.sample(&mut rng);
                b + spec.noise_std * e
            })
            .collect();
        rescale(&v)
    };
    let mut per_dataset = Vec::new();
    for (d, ds) in spec.datasets.iter().enumerate() {
        if ds == IMAGENET {
            per_dataset.push((ds.clone(), None, None, Some(noisy("subnet", d))));
        } else {
            per_dataset.push((
                ds.clone(),
                Some(noisy("dis", d)),
                Some(noisy("vanilla", d)),
                None,
            ));
        }
    }
    let records = archs
        .into_iter()
        .enumerate()
        .map(|(i, arch)| BenchRecord {
            index: i,
            arch,
            metrics: per_dataset
                .iter()
                .map(|(ds, dis, van, sub)| {
                    (
                        ds.clone(),
                        DatasetMetrics {
                            dis_acc: dis.as_ref().map(|v| v[i]),
                            vanilla_acc: van.as_ref().map(|v| v[i]),
                            subnet_acc: sub.as_ref().map(|v| v[i]),
                        },
                    )
                })
                .collect(),
        })
        .collect();
    let store = BenchStore {
        space: spec.space,
        provenance: Provenance::Synthetic,
        capture: Some(spec.capture),
        records,
    };
    if let Some((i, msg)) = store
        .records
        .iter()
        .enumerate()
        .find_map(|(i, r)| check_metrics(store.space, &r.metrics).err().map(|m| (i, m)))
    {
        return Err(BenchError::Schema {
            line: i + 2,
            message: msg,
        });
    }
    Ok((store, stats, planted))
}

/// Captures the statistics of every record of a store whose header carries
/// capture settings.
pub fn capture_store(
    store: &BenchStore,
    settings: &CaptureSettings,
    mode: CaptureMode,
) -> Result<Vec<NetworkStatistics>, SimError> {
    store
        .records
        .par_iter()
        .map(|r| settings.capture(r.index, &r.arch, mode))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn tiny_store() -> BenchStore {
        let mut rng = rng_from_seed(4);
        let records = (0..5)
            .map(|i| {
                let mut metrics = BTreeMap::new();
                metrics.insert(
                    "cifar100".to_string(),
                    DatasetMetrics {
                        dis_acc: Some(70.0 + i as f64),
                        vanilla_acc: Some(60.5 + i as f64),
                        subnet_acc: None,
                    },
                );
                metrics.insert(
                    "imagenet".to_string(),
                    DatasetMetrics {
                        subnet_acc: Some(75.25),
                        ..Default::default()
                    },
                );
                BenchRecord {
                    index: i,
                    arch: sample_arch(SearchSpace::Autoformer, &mut rng),
                    metrics,
                }
            })
            .collect();
        BenchStore {
            space: SearchSpace::Autoformer,
            provenance: Provenance::RealImport,
            capture: None,
            records,
        }
    }

    #[test]
    fn jsonl_round_trip_and_queries() {
        let s = tiny_store();
        let back = BenchStore::parse_jsonl(&s.to_jsonl()).unwrap();
        assert_eq!(back, s);
        assert_eq!(s.acc_by_idx(2, "cifar100", true).unwrap(), 72.0);
        assert_eq!(s.acc_by_idx(2, "cifar100", false).unwrap(), 62.5);
        assert_eq!(s.acc_by_idx(2, "imagenet", false).unwrap(), 75.25);
        assert!(matches!(
            s.acc_by_idx(2, "imagenet", true),
            Err(BenchError::MetricUnavailable { .. })
        ));
        assert!(matches!(
            s.acc_by_idx(9, "cifar100", true),
            Err(BenchError::IndexOutOfRange { index: 9, len: 5 })
        ));
        assert_eq!(s.arch_by_idx(3).unwrap(), &s.records[3].arch);
    }

    #[test]
    fn schema_violations_name_the_line() {
        let text = tiny_store().to_jsonl();
        let bad = text.replacen("\"dis_acc\":72.0", "\"dis_acc\":184.2", 1);
        match BenchStore::parse_jsonl(&bad) {
            Err(BenchError::Schema { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        let mut lines: Vec<&str> = text.lines().collect();
        let dup = lines[2].to_string();
        lines.push(&dup);
        match BenchStore::parse_jsonl(&lines.join("\n")) {
            Err(BenchError::Schema { line, message }) => {
                assert_eq!(line, 7);
                assert!(message.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }
        match BenchStore::parse_jsonl("{\"index\": 0,\n") {
            Err(BenchError::Parse { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_sizes() {
        let (v, t) = split(500, 0.6, 11);
        assert_eq!((v.len(), t.len()), (300, 200));
        let mut all: Vec<usize> = v.iter().chain(&t).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..500).collect::<Vec<_>>());
        assert_eq!(split(500, 0.6, 11), (v, t));
    }
}
