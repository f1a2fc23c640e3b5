//! Architecture configurations for the AutoFormer and PiT search spaces,
//! uniform sampling, and the analytic full-scale parameter count.
//!
//! Parameter counting convention (full scale, 224x224x3 input, 1000 classes):
//!
//! ```text
//! embed  = 3*p*p*D0 + D0              patch projection (p = patch size)
//!        + D0                         class token
//!        + (T+1)*D0                   position embedding, T = (224/p)^2
//! layer  = 2*D + 2*D                  two LayerNorms
//!        + D*3W + 3W                  fused QKV
//!        + W*D + D                    attention output projection
//!        + D*H + H + H*D + D          MLP, H = floor(D * mlp_ratio)
//! stage  = Ds*Ds' + Ds'               PiT stage transition (linear token projection)
//! head   = 2*DL + DL*1000 + 1000      final LayerNorm + classifier
//! ```
//!
//! AutoFormer layers use `W = num_heads * 64`; PiT stages use
//! `D = W = base_dim * num_heads` (head dimension equals the base dim).

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Head dimension of every AutoFormer attention head at full scale.
pub const AUTOFORMER_HEAD_DIM: usize = 64;
pub const FULL_IMAGE_SIDE: usize = 224;
pub const FULL_CLASSES: usize = 1000;
pub const AUTOFORMER_PATCH: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum ArchError {
    #[error("{field} = {value} is outside the {space} search space")]
    OutOfBounds {
        space: SearchSpace,
        field: &'static str,
        value: String,
    },
    #[error("per-layer list `{field}` has length {len}, expected depth {depth}")]
    LengthMismatch {
        field: &'static str,
        len: usize,
        depth: usize,
    },
    #[error("unknown search space `{0}`")]
    UnknownSpace(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchSpace {
    Autoformer,
    AutoformerB,
    Pit,
}

impl SearchSpace {
    pub fn as_str(self) -> &'static str {
        match self {
            SearchSpace::Autoformer => "autoformer",
            SearchSpace::AutoformerB => "autoformer_b",
            SearchSpace::Pit => "pit",
        }
    }

    /// Parameter interval used to filter candidates during search.
    pub fn default_param_range(self) -> (u64, u64) {
        match self {
            SearchSpace::Autoformer => (4_000_000, 9_000_000),
            SearchSpace::AutoformerB => (42_000_000, 75_000_000),
            SearchSpace::Pit => (2_000_000, 25_000_000),
        }
    }

    /// Dimension divisor used when building desk-scale simulators.
    pub fn default_scale(self) -> usize {
        match self {
            SearchSpace::Autoformer => 24,
            SearchSpace::AutoformerB => 48,
            SearchSpace::Pit => 8,
        }
    }
}

impl fmt::Display for SearchSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SearchSpace {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "autoformer" => Ok(SearchSpace::Autoformer),
            "autoformer_b" => Ok(SearchSpace::AutoformerB),
            "pit" => Ok(SearchSpace::Pit),
            other => Err(ArchError::UnknownSpace(other.to_string())),
        }
    }
}

struct TransformerBounds {
    hidden: &'static [usize],
    depth: &'static [usize],
    mlp_ratio: &'static [f64],
    heads: &'static [usize],
    qkv: &'static [usize],
}

const AUTOFORMER_T: TransformerBounds = TransformerBounds {
    hidden: &[192, 216, 240],
    depth: &[12, 13, 14],
    mlp_ratio: &[3.5, 4.0],
    heads: &[3, 4],
    qkv: &[192, 256],
};

const AUTOFORMER_B: TransformerBounds = TransformerBounds {
    hidden: &[528, 576, 624],
    depth: &[14, 15, 16],
    mlp_ratio: &[3.0, 3.5, 4.0],
    heads: &[8, 9, 10],
    qkv: &[512, 576, 640],
};

const PIT_BASE_DIM: &[usize] = &[16, 24, 32, 40];
const PIT_MLP_RATIO: &[usize] = &[2, 4, 6, 8];
const PIT_HEADS: &[usize] = &[2, 4, 8];
const PIT_DEPTHS: [&[usize]; 3] = [&[1, 2, 3], &[4, 6, 8], &[2, 4, 6]];
const PIT_PATCH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoformerArch {
    pub hidden_dim: usize,
    pub depth: usize,
    pub mlp_ratio: Vec<f64>,
    pub num_heads: Vec<usize>,
    /// Nominal QKV dimension of the space. Per-layer attention width is
    /// `num_heads * 64`, so this field is bounds-checked but not used for sizing.
    pub qkv_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitArch {
    pub base_dim: usize,
    pub mlp_ratio: usize,
    pub num_heads: [usize; 3],
    pub depth: [usize; 3],
    pub patch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "space", content = "arch", rename_all = "snake_case")]
pub enum ArchConfig {
    Autoformer(AutoformerArch),
    AutoformerB(AutoformerArch),
    Pit(PitArch),
}

/// Sizes of one transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerDims {
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
}

impl LayerDims {
    pub fn attn_width(&self) -> usize {
        self.heads * self.head_dim
    }
}

fn check<T: PartialEq + fmt::Debug>(
    space: SearchSpace,
    field: &'static str,
    value: &T,
    allowed: &[T],
) -> Result<(), ArchError> {
    if allowed.contains(value) {
        Ok(())
    } else {
        Err(ArchError::OutOfBounds {
            space,
            field,
            value: format!("{value:?}"),
        })
    }
}

impl ArchConfig {
    pub fn space(&self) -> SearchSpace {
        match self {
            ArchConfig::Autoformer(_) => SearchSpace::Autoformer,
            ArchConfig::AutoformerB(_) => SearchSpace::AutoformerB,
            ArchConfig::Pit(_) => SearchSpace::Pit,
        }
    }

    fn bounds(&self) -> Option<&'static TransformerBounds> {
        match self {
            ArchConfig::Autoformer(_) => Some(&AUTOFORMER_T),
            ArchConfig::AutoformerB(_) => Some(&AUTOFORMER_B),
            ArchConfig::Pit(_) => None,
        }
    }

    /// Checks every field against the search-space table.
    pub fn validate(&self) -> Result<(), ArchError> {
        let space = self.space();
        match self {
            ArchConfig::Autoformer(a) | ArchConfig::AutoformerB(a) => {
                let b = self.bounds().expect("transformer bounds");
                check(space, "hidden_dim", &a.hidden_dim, b.hidden)?;
                check(space, "depth", &a.depth, b.depth)?;
                check(space, "qkv_dim", &a.qkv_dim, b.qkv)?;
                if a.mlp_ratio.len() != a.depth {
                    return Err(ArchError::LengthMismatch {
                        field: "mlp_ratio",
                        len: a.mlp_ratio.len(),
                        depth: a.depth,
                    });
                }
                if a.num_heads.len() != a.depth {
                    return Err(ArchError::LengthMismatch {
                        field: "num_heads",
                        len: a.num_heads.len(),
                        depth: a.depth,
                    });
                }
                for r in &a.mlp_ratio {
                    check(space, "mlp_ratio", r, b.mlp_ratio)?;
                }
                for h in &a.num_heads {
                    check(space, "num_heads", h, b.heads)?;
                }
            }
            ArchConfig::Pit(p) => {
                check(space, "base_dim", &p.base_dim, PIT_BASE_DIM)?;
                check(space, "mlp_ratio", &p.mlp_ratio, PIT_MLP_RATIO)?;
                check(space, "patch_size", &p.patch_size, &[PIT_PATCH])?;
                for h in &p.num_heads {
                    check(space, "num_heads", h, PIT_HEADS)?;
                }
                for (d, allowed) in p.depth.iter().zip(PIT_DEPTHS) {
                    check(space, "depth", d, allowed)?;
                }
            }
        }
        Ok(())
    }

    /// Total number of transformer layers.
    pub fn num_layers(&self) -> usize {
        match self {
            ArchConfig::Autoformer(a) | ArchConfig::AutoformerB(a) => a.depth,
            ArchConfig::Pit(p) => p.depth.iter().sum(),
        }
    }

    /// Per-layer dimensions after dividing by `scale`. Returns `None` when
    /// the divisor leaves a fractional embedding or head dimension.
    pub fn layer_dims(&self, scale: usize) -> Option<Vec<LayerDims>> {
        if scale == 0 {
            return None;
        }
        match self {
            ArchConfig::Autoformer(a) | ArchConfig::AutoformerB(a) => {
                if a.hidden_dim % scale != 0 {
                    return None;
                }
                let dim = a.hidden_dim / scale;
                let head_dim = AUTOFORMER_HEAD_DIM.div_ceil(scale);
                Some(
                    a.num_heads
                        .iter()
                        .zip(&a.mlp_ratio)
                        .map(|(&heads, &ratio)| LayerDims {
                            dim,
                            heads,
                            head_dim,
                            mlp_hidden: ((dim as f64 * ratio) as usize).max(1),
                        })
                        .collect(),
                )
            }
            ArchConfig::Pit(p) => {
                if p.base_dim % scale != 0 {
                    return None;
                }
                let head_dim = p.base_dim / scale;
                let mut dims = Vec::with_capacity(self.num_layers());
                for (&heads, &depth) in p.num_heads.iter().zip(&p.depth) {
                    let dim = head_dim * heads;
                    for _ in 0..depth {
                        dims.push(LayerDims {
                            dim,
                            heads,
                            head_dim,
                            mlp_hidden: dim * p.mlp_ratio,
                        });
                    }
                }
                Some(dims)
            }
        }
    }

    /// Patch size used by the full-scale network.
    pub fn full_patch_size(&self) -> usize {
        match self {
            ArchConfig::Pit(p) => p.patch_size,
            _ => AUTOFORMER_PATCH,
        }
    }
}

/// Draws every field uniformly and independently from its table entry.
pub fn sample_arch(space: SearchSpace, rng: &mut impl Rng) -> ArchConfig {
    match space {
        SearchSpace::Autoformer | SearchSpace::AutoformerB => {
            let b = if space == SearchSpace::Autoformer {
                &AUTOFORMER_T
            } else {
                &AUTOFORMER_B
            };
            let hidden_dim = *b.hidden.choose(rng).unwrap();
            let depth = *b.depth.choose(rng).unwrap();
            let qkv_dim = *b.qkv.choose(rng).unwrap();
            let mut mlp_ratio = Vec::with_capacity(depth);
            let mut num_heads = Vec::with_capacity(depth);
            for _ in 0..depth {
                mlp_ratio.push(*b.mlp_ratio.choose(rng).unwrap());
                num_heads.push(*b.heads.choose(rng).unwrap());
            }
            let arch = AutoformerArch {
                hidden_dim,
                depth,
                mlp_ratio,
                num_heads,
                qkv_dim,
            };
            if space == SearchSpace::Autoformer {
                ArchConfig::Autoformer(arch)
            } else {
                ArchConfig::AutoformerB(arch)
            }
        }
        SearchSpace::Pit => {
            let base_dim = *PIT_BASE_DIM.choose(rng).unwrap();
            let mlp_ratio = *PIT_MLP_RATIO.choose(rng).unwrap();
            let num_heads = [(); 3].map(|_| *PIT_HEADS.choose(rng).unwrap());
            let depth = [0, 1, 2].map(|s| *PIT_DEPTHS[s].choose(rng).unwrap());
            ArchConfig::Pit(PitArch {
                base_dim,
                mlp_ratio,
                num_heads,
                depth,
                patch_size: PIT_PATCH,
            })
        }
    }
}

fn layer_params(l: &LayerDims) -> u64 {
    let (d, w, h) = (l.dim as u64, l.attn_width() as u64, l.mlp_hidden as u64);
    4 * d + (d * 3 * w + 3 * w) + (w * d + d) + (d * h + h) + (h * d + d)
}

/// Full-scale parameter count; see the module docs for the formula.
pub fn param_count(cfg: &ArchConfig) -> u64 {
    let layers = cfg
        .layer_dims(1)
        .expect("scale 1 always yields integral dims");
    let p = cfg.full_patch_size() as u64;
    let tokens = (FULL_IMAGE_SIDE as u64 / p).pow(2);
    let d0 = layers[0].dim as u64;
    let embed = 3 * p * p * d0 + d0 + d0 + (tokens + 1) * d0;
    let mut total = embed;
    for (i, l) in layers.iter().enumerate() {
        total += layer_params(l);
        if let Some(next) = layers.get(i + 1) {
            if next.dim != l.dim {
                total += l.dim as u64 * next.dim as u64 + next.dim as u64;
            }
        }
    }
    let dl = layers.last().unwrap().dim as u64;
    total + 2 * dl + dl * FULL_CLASSES as u64 + FULL_CLASSES as u64
}
