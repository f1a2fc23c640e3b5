//! Per-layer network statistics consumed by proxies, and the on-disk
//! statistics archive.
//!
//! An archive is a directory holding `manifest.json` and one tensor blob per
//! recorded tensor under `tensors/`. Blob names are `L{layer:03}_{name}.bin`
//! where `name` is a slot code (`F1` ... `F4g`) or an auxiliary entry such as
//! `msa_weight.1`. Index 0 of each auxiliary list is the corresponding slot
//! (`msa_weight.0` is `F1`) and is not stored twice.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::ArchConfig;
use crate::tensor::{Tensor, TensorError};

pub const ARCHIVE_FORMAT_VERSION: u32 = 1;

/// Input selector of a proxy graph.
///
/// `F1`/`F1g`: fused QKV weight of the attention block and its gradient.
/// `F2`/`F2g`: attention block output activation and its gradient.
/// `F3`/`F3g`: first MLP linear weight and its gradient.
/// `F4`/`F4g`: MLP hidden (post-GELU) activation and its gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StatSlot {
    F1,
    F1g,
    F2,
    F2g,
    F3,
    F3g,
    F4,
    F4g,
}

impl StatSlot {
    pub const ALL: [StatSlot; 8] = [
        StatSlot::F1,
        StatSlot::F1g,
        StatSlot::F2,
        StatSlot::F2g,
        StatSlot::F3,
        StatSlot::F3g,
        StatSlot::F4,
        StatSlot::F4g,
    ];

    pub fn code(self) -> &'static str {
        match self {
            StatSlot::F1 => "F1",
            StatSlot::F1g => "F1g",
            StatSlot::F2 => "F2",
            StatSlot::F2g => "F2g",
            StatSlot::F3 => "F3",
            StatSlot::F3g => "F3g",
            StatSlot::F4 => "F4",
            StatSlot::F4g => "F4g",
        }
    }
}

impl fmt::Display for StatSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown statistics slot `{0}`")]
pub struct UnknownSlot(pub String);

impl FromStr for StatSlot {
    type Err = UnknownSlot;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StatSlot::ALL
            .into_iter()
            .find(|slot| slot.code() == s)
            .ok_or_else(|| UnknownSlot(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureMode {
    Standard,
    Synflow,
}

/// Synthetic mini-batch used for a capture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub image_side: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub num_classes: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            batch_size: 8,
            image_side: 16,
            channels: 3,
            patch_size: 4,
            num_classes: 10,
        }
    }
}

impl BatchSpec {
    /// Number of tokens including the class token.
    pub fn tokens(&self) -> usize {
        (self.image_side / self.patch_size).pow(2) + 1
    }

    pub fn patch_features(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn is_valid(&self) -> bool {
        self.batch_size > 0
            && self.channels > 0
            && self.patch_size > 0
            && self.num_classes > 1
            && self.image_side >= self.patch_size
            && self.image_side.is_multiple_of(self.patch_size)
    }
}

/// Statistics of one transformer layer.
///
/// The auxiliary lists hold every weight matrix of the block: index 0 of
/// `msa_weights` is the fused QKV weight (slot `F1`) and index 1 the output
/// projection; index 0 of `mlp_weights` is the first MLP linear (slot `F3`)
/// and index 1 the second.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStatistics {
    pub msa_weights: Vec<Tensor>,
    pub msa_weight_grads: Vec<Tensor>,
    pub msa_act: Tensor,
    pub msa_act_grad: Tensor,
    pub mlp_weights: Vec<Tensor>,
    pub mlp_weight_grads: Vec<Tensor>,
    pub mlp_act: Tensor,
    pub mlp_act_grad: Tensor,
}

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("layer {layer}: {what}")]
    Inconsistent { layer: usize, what: String },
    #[error("network has no layers")]
    Empty,
    #[error("archive error: {0}")]
    Archive(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LayerStatistics {
    pub fn slot(&self, slot: StatSlot) -> &Tensor {
        match slot {
            StatSlot::F1 => &self.msa_weights[0],
            StatSlot::F1g => &self.msa_weight_grads[0],
            StatSlot::F2 => &self.msa_act,
            StatSlot::F2g => &self.msa_act_grad,
            StatSlot::F3 => &self.mlp_weights[0],
            StatSlot::F3g => &self.mlp_weight_grads[0],
            StatSlot::F4 => &self.mlp_act,
            StatSlot::F4g => &self.mlp_act_grad,
        }
    }

    /// Checks the pairing invariants: every weight and activation has a
    /// gradient of identical shape.
    pub fn validate(&self, layer: usize) -> Result<(), StatsError> {
        let bad = |what: String| Err(StatsError::Inconsistent { layer, what });
        for (name, w, g) in [
            ("msa", &self.msa_weights, &self.msa_weight_grads),
            ("mlp", &self.mlp_weights, &self.mlp_weight_grads),
        ] {
            if w.is_empty() {
                return bad(format!("{name} weight list is empty"));
            }
            if w.len() != g.len() {
                return bad(format!("{name}: {} weights vs {} grads", w.len(), g.len()));
            }
            for (i, (w, g)) in w.iter().zip(g).enumerate() {
                if w.shape() != g.shape() {
                    return bad(format!(
                        "{name} weight {i} shape {:?} vs grad {:?}",
                        w.shape(),
                        g.shape()
                    ));
                }
            }
        }
        for (name, a, g) in [
            ("msa", &self.msa_act, &self.msa_act_grad),
            ("mlp", &self.mlp_act, &self.mlp_act_grad),
        ] {
            if a.shape() != g.shape() {
                return bad(format!(
                    "{name} activation shape {:?} vs grad {:?}",
                    a.shape(),
                    g.shape()
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkStatistics {
    pub layers: Vec<LayerStatistics>,
    pub config: ArchConfig,
    pub capture_mode: CaptureMode,
    pub seed: u64,
    pub scale: usize,
    pub batch: BatchSpec,
}

impl NetworkStatistics {
    pub fn validate(&self) -> Result<(), StatsError> {
        if self.layers.is_empty() {
            return Err(StatsError::Empty);
        }
        if self.layers.len() != self.config.num_layers() {
            return Err(StatsError::Archive(format!(
                "{} layers recorded but config has {}",
                self.layers.len(),
                self.config.num_layers()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate(i)?;
        }
        Ok(())
    }

    /// Writes the archive directory (created if missing). Output bytes depend
    /// only on the statistics themselves.
    pub fn write_archive(&self, dir: &Path) -> Result<(), StatsError> {
        let tensors_dir = dir.join("tensors");
        fs::create_dir_all(&tensors_dir)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let mut entries = Vec::new();
            let mut put = |name: String, t: &Tensor| -> Result<(), StatsError> {
                let file = format!("tensors/L{li:03}_{name}.bin");
                fs::write(dir.join(&file), t.to_bytes())?;
                entries.push(TensorEntry {
                    name,
                    file,
                    shape: t.shape().to_vec(),
                });
                Ok(())
            };
            for slot in StatSlot::ALL {
                put(slot.code().to_string(), layer.slot(slot))?;
            }
            for (prefix, list) in [
                ("msa_weight", &layer.msa_weights),
                ("msa_weight_grad", &layer.msa_weight_grads),
                ("mlp_weight", &layer.mlp_weights),
                ("mlp_weight_grad", &layer.mlp_weight_grads),
            ] {
                for (i, t) in list.iter().enumerate().skip(1) {
                    put(format!("{prefix}.{i}"), t)?;
                }
            }
            layers.push(LayerManifest {
                index: li,
                tensors: entries,
            });
        }
        let manifest = ArchiveManifest {
            format_version: ARCHIVE_FORMAT_VERSION,
            capture_mode: self.capture_mode,
            seed: self.seed,
            scale: self.scale,
            batch: self.batch,
            config: self.config.clone(),
            layers,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }

    pub fn read_archive(dir: &Path) -> Result<Self, StatsError> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: ArchiveManifest = serde_json::from_str(&text)?;
        if manifest.format_version != ARCHIVE_FORMAT_VERSION {
            return Err(StatsError::Archive(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for (li, lm) in manifest.layers.iter().enumerate() {
            if lm.index != li {
                return Err(StatsError::Archive(format!(
                    "layer entry {li} carries index {}",
                    lm.index
                )));
            }
            let mut slots: [Option<Tensor>; 8] = Default::default();
            let mut aux: [Vec<(usize, Tensor)>; 4] = Default::default();
            for e in &lm.tensors {
                if e.file.contains("..") || Path::new(&e.file).is_absolute() {
                    return Err(StatsError::Archive(format!("unsafe path {}", e.file)));
                }
                let t = Tensor::from_bytes(&fs::read(dir.join(&e.file))?)?;
                if t.shape() != e.shape.as_slice() {
                    return Err(StatsError::Archive(format!(
                        "layer {li} tensor {}: manifest shape {:?}, blob shape {:?}",
                        e.name,
                        e.shape,
                        t.shape()
                    )));
                }
                if let Ok(slot) = e.name.parse::<StatSlot>() {
                    slots[slot as usize] = Some(t);
                    continue;
                }
                let (prefix, idx) = e
                    .name
                    .rsplit_once('.')
                    .and_then(|(p, i)| i.parse::<usize>().ok().map(|i| (p, i)))
                    .ok_or_else(|| {
                        StatsError::Archive(format!("unknown tensor name {}", e.name))
                    })?;
                let which = match prefix {
                    "msa_weight" => 0,
                    "msa_weight_grad" => 1,
                    "mlp_weight" => 2,
                    "mlp_weight_grad" => 3,
                    _ => {
                        return Err(StatsError::Archive(format!(
                            "unknown tensor name {}",
                            e.name
                        )))
                    }
                };
                if idx == 0 {
                    return Err(StatsError::Archive(format!(
                        "{} duplicates its slot tensor",
                        e.name
                    )));
                }
                aux[which].push((idx, t));
            }
            let mut take = |slot: StatSlot| {
                slots[slot as usize].take().ok_or_else(|| {
                    StatsError::Archive(format!("layer {li} is missing slot {slot}"))
                })
            };
            let f1 = take(StatSlot::F1)?;
            let f1g = take(StatSlot::F1g)?;
            let f2 = take(StatSlot::F2)?;
            let f2g = take(StatSlot::F2g)?;
            let f3 = take(StatSlot::F3)?;
            let f3g = take(StatSlot::F3g)?;
            let f4 = take(StatSlot::F4)?;
            let f4g = take(StatSlot::F4g)?;
            let assemble = |first: Tensor, mut rest: Vec<(usize, Tensor)>| {
                rest.sort_by_key(|(i, _)| *i);
                let mut out = vec![first];
                for (expect, (i, t)) in rest.into_iter().enumerate() {
                    if i != expect + 1 {
                        return Err(StatsError::Archive(format!(
                            "layer {li}: auxiliary indices are not dense"
                        )));
                    }
                    out.push(t);
                }
                Ok(out)
            };
            let [msa_w, msa_g, mlp_w, mlp_g] = aux;
            let layer = LayerStatistics {
                msa_weights: assemble(f1, msa_w)?,
                msa_weight_grads: assemble(f1g, msa_g)?,
                msa_act: f2,
                msa_act_grad: f2g,
                mlp_weights: assemble(f3, mlp_w)?,
                mlp_weight_grads: assemble(f3g, mlp_g)?,
                mlp_act: f4,
                mlp_act_grad: f4g,
            };
            layers.push(layer);
        }
        let stats = NetworkStatistics {
            layers,
            config: manifest.config,
            capture_mode: manifest.capture_mode,
            seed: manifest.seed,
            scale: manifest.scale,
            batch: manifest.batch,
        };
        stats.validate()?;
        Ok(stats)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerManifest {
    index: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveManifest {
    format_version: u32,
    capture_mode: CaptureMode,
    seed: u64,
    scale: usize,
    batch: BatchSpec,
    config: ArchConfig,
    layers: Vec<LayerManifest>,
}
