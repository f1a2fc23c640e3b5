//! Desk-scale vision transformer with a hand-written backward pass.
//!
//! The network is a plain pre-norm ViT: patch projection plus class token and
//! position embedding, then blocks of
//!
//! ```text
//! x = x + Wo * MSA(LN1(x))
//! x = x + W2 * GELU(W1 * LN2(x))
//! ```
//!
//! followed by a final LayerNorm and a linear classifier on the class token.
//! PiT configurations insert a linear token projection between stages whose
//! widths differ. GELU uses the tanh approximation.
//!
//! A standard capture runs one forward/backward pass of the mean
//! cross-entropy on a seeded uniform-noise batch with random labels. A SynFlow
//! capture takes absolute values of every parameter, removes the LayerNorms,
//! feeds a single all-ones image and differentiates `R = sum(logits)`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::arch::{ArchConfig, LayerDims};
use crate::rng::child_rng;
use crate::stats::{BatchSpec, CaptureMode, LayerStatistics, NetworkStatistics};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-10;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("scale {scale} leaves non-integral dimensions for this configuration")]
    InvalidScale { scale: usize },
    #[error("invalid batch specification: {0:?}")]
    InvalidBatch(BatchSpec),
    #[error("malformed configuration: {0}")]
    InvalidConfig(String),
}

/// Test hook that deliberately corrupts one backward term.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// Flips the sign of the GELU derivative in every MLP.
    FlipGeluGrad,
}

struct Layer {
    dims: LayerDims,
    ln1_g: Array1<f64>,
    ln1_b: Array1<f64>,
    w_qkv: Array2<f64>,
    b_qkv: Array1<f64>,
    w_o: Array2<f64>,
    b_o: Array1<f64>,
    ln2_g: Array1<f64>,
    ln2_b: Array1<f64>,
    w_1: Array2<f64>,
    b_1: Array1<f64>,
    w_2: Array2<f64>,
    b_2: Array1<f64>,
    /// Projection to the next stage's width, applied after this block.
    transition: Option<(Array2<f64>, Array1<f64>)>,
}

/// Gradients of one block's (attention input, MLP hidden) activations.
type ActGrads = (Array2<f64>, Array2<f64>);

struct Params {
    w_pe: Array2<f64>,
    b_pe: Array1<f64>,
    cls: Array1<f64>,
    pos: Array2<f64>,
    layers: Vec<Layer>,
    lnf_g: Array1<f64>,
    lnf_b: Array1<f64>,
    w_head: Array2<f64>,
    b_head: Array1<f64>,
}

fn trunc_normal(rng: &mut impl Rng, shape: (usize, usize)) -> Array2<f64> {
    trunc_normal_std(rng, shape, INIT_STD)
}

fn trunc_normal_std(rng: &mut impl Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    })
}

impl Params {
    fn init(dims: &[LayerDims], batch: &BatchSpec, rng: &mut impl Rng) -> Self {
        let d0 = dims[0].dim;
        let w_pe = trunc_normal(rng, (batch.patch_features(), d0));
        let cls = trunc_normal(rng, (1, d0)).row(0).to_owned();
        let pos = trunc_normal(rng, (batch.tokens(), d0));
        let mut layers = Vec::with_capacity(dims.len());
        for (i, l) in dims.iter().enumerate() {
            let (d, w, h) = (l.dim, l.attn_width(), l.mlp_hidden);
            let w_qkv = trunc_normal(rng, (d, 3 * w));
            let w_o = trunc_normal(rng, (w, d));
            let w_1 = trunc_normal(rng, (d, h));
            let w_2 = trunc_normal(rng, (h, d));
            let transition = match dims.get(i + 1) {
                // scale-preserving, otherwise the next stage's LayerNorm sees
                // rows shrunk by ~50x
                Some(next) if next.dim != d => Some((
                    trunc_normal_std(rng, (d, next.dim), 1.0 / (d as f64).sqrt()),
                    Array1::zeros(next.dim),
                )),
                _ => None,
            };
            layers.push(Layer {
                dims: *l,
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                w_qkv,
                b_qkv: Array1::zeros(3 * w),
                w_o,
                b_o: Array1::zeros(d),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w_1,
                b_1: Array1::zeros(h),
                w_2,
                b_2: Array1::zeros(d),
                transition,
            });
        }
        let dl = dims.last().unwrap().dim;
        let w_head = trunc_normal(rng, (dl, batch.num_classes));
        Params {
            w_pe,
            b_pe: Array1::zeros(d0),
            cls,
            pos,
            layers,
            lnf_g: Array1::ones(dl),
            lnf_b: Array1::zeros(dl),
            w_head,
            b_head: Array1::zeros(batch.num_classes),
        }
    }

    fn zeros_like(&self) -> Self {
        let z2 = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        let z1 = |a: &Array1<f64>| Array1::zeros(a.raw_dim());
        Params {
            w_pe: z2(&self.w_pe),
            b_pe: z1(&self.b_pe),
            cls: z1(&self.cls),
            pos: z2(&self.pos),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    dims: l.dims,
                    ln1_g: z1(&l.ln1_g),
                    ln1_b: z1(&l.ln1_b),
                    w_qkv: z2(&l.w_qkv),
                    b_qkv: z1(&l.b_qkv),
                    w_o: z2(&l.w_o),
                    b_o: z1(&l.b_o),
                    ln2_g: z1(&l.ln2_g),
                    ln2_b: z1(&l.ln2_b),
                    w_1: z2(&l.w_1),
                    b_1: z1(&l.b_1),
                    w_2: z2(&l.w_2),
                    b_2: z1(&l.b_2),
                    transition: l.transition.as_ref().map(|(w, b)| (z2(w), z1(b))),
                })
                .collect(),
            lnf_g: z1(&self.lnf_g),
            lnf_b: z1(&self.lnf_b),
            w_head: z2(&self.w_head),
            b_head: z1(&self.b_head),
        }
    }

    /// Visits every parameter tensor as a flat mutable slice, in a fixed order.
    fn visit_mut(&mut self, mut f: impl FnMut(String, &mut [f64])) {
        fn sl<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
            a.as_slice_mut().expect("parameters are contiguous")
        }
        f("patch_embed.weight".into(), sl(&mut self.w_pe));
        f("patch_embed.bias".into(), sl(&mut self.b_pe));
        f("cls_token".into(), sl(&mut self.cls));
        f("pos_embed".into(), sl(&mut self.pos));
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(format!("layers.{i}.ln1.gamma"), sl(&mut l.ln1_g));
            f(format!("layers.{i}.ln1.beta"), sl(&mut l.ln1_b));
            f(format!("layers.{i}.qkv.weight"), sl(&mut l.w_qkv));
            f(format!("layers.{i}.qkv.bias"), sl(&mut l.b_qkv));
            f(format!("layers.{i}.proj.weight"), sl(&mut l.w_o));
            f(format!("layers.{i}.proj.bias"), sl(&mut l.b_o));
            f(format!("layers.{i}.ln2.gamma"), sl(&mut l.ln2_g));
            f(format!("layers.{i}.ln2.beta"), sl(&mut l.ln2_b));
            f(format!("layers.{i}.fc1.weight"), sl(&mut l.w_1));
            f(format!("layers.{i}.fc1.bias"), sl(&mut l.b_1));
            f(format!("layers.{i}.fc2.weight"), sl(&mut l.w_2));
            f(format!("layers.{i}.fc2.bias"), sl(&mut l.b_2));
            if let Some((w, b)) = &mut l.transition {
                f(format!("layers.{i}.transition.weight"), sl(w));
                f(format!("layers.{i}.transition.bias"), sl(b));
            }
        }
        f("norm.gamma".into(), sl(&mut self.lnf_g));
        f("norm.beta".into(), sl(&mut self.lnf_b));
        f("head.weight".into(), sl(&mut self.w_head));
        f("head.bias".into(), sl(&mut self.b_head));
    }
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(
    x: &Array2<f64>,
    g: &Array1<f64>,
    b: &Array1<f64>,
    enabled: bool,
) -> (Array2<f64>, Option<LnCache>) {
    if !enabled {
        return (x.clone(), None);
    }
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let y = &xhat * g + b;
    (y, Some(LnCache { xhat, rstd }))
}

/// Returns dx and accumulates dγ, dβ.
fn layer_norm_backward(
    dy: &Array2<f64>,
    g: &Array1<f64>,
    cache: Option<&LnCache>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    let Some(cache) = cache else {
        return dy.clone();
    };
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let n = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dxh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let m1 = dxh.sum() / n;
        let m2 = dxh.dot(&xh) / n;
        let r = cache.rstd[i];
        dx.row_mut(i)
            .iter_mut()
            .zip(dxh.iter().zip(xh.iter()))
            .for_each(|(o, (&a, &x))| *o = r * (a - m1 - x * m2));
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

struct LayerCache {
    x_in: Array2<f64>,
    ln1: Option<LnCache>,
    a: Array2<f64>,
    qkv: Array2<f64>,
    /// Attention probabilities per (sample, head), each tokens x tokens.
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    msa_out: Array2<f64>,
    ln2: Option<LnCache>,
    c: Array2<f64>,
    z1: Array2<f64>,
    gact: Array2<f64>,
    x_out: Array2<f64>,
}

struct ForwardPass {
    layers: Vec<LayerCache>,
    lnf: Option<LnCache>,
    cls_feats: Array2<f64>,
    logits: Array2<f64>,
    objective: f64,
}

/// Diagnostics gathered from one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardDiagnostics {
    pub objective: f64,
    /// Largest |row sum - 1| over every attention probability row.
    pub max_attention_row_error: f64,
    /// Largest |mean| of a normalised (pre-affine) LayerNorm row.
    pub max_layer_norm_mean: f64,
    /// Largest |variance - 1| of a normalised LayerNorm row.
    pub max_layer_norm_var_error: f64,
}

/// One instantiated network plus its synthetic batch.
pub struct Simulator {
    config: ArchConfig,
    scale: usize,
    batch: BatchSpec,
    seed: u64,
    mode: CaptureMode,
    params: Params,
    /// batch_size * patches rows, patch_features cols
    patches: Array2<f64>,
    labels: Vec<usize>,
    fault: Option<BackwardFault>,
}

fn extract_patches(images: &[Vec<f64>], batch: &BatchSpec) -> Array2<f64> {
    let p = batch.patch_size;
    let side = batch.image_side;
    let per_side = side / p;
    let n_patches = per_side * per_side;
    let mut out = Array2::zeros((images.len() * n_patches, batch.patch_features()));
    for (b, img) in images.iter().enumerate() {
        for py in 0..per_side {
            for px in 0..per_side {
                let row = b * n_patches + py * per_side + px;
                let mut col = 0;
                for c in 0..batch.channels {
                    for i in 0..p {
                        for j in 0..p {
                            let y = py * p + i;
                            let x = px * p + j;
                            out[[row, col]] = img[(c * side + y) * side + x];
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

impl Simulator {
    pub fn new(
        config: &ArchConfig,
        scale: usize,
        batch: BatchSpec,
        seed: u64,
        mode: CaptureMode,
    ) -> Result<Self, SimError> {
        if !batch.is_valid() {
            return Err(SimError::InvalidBatch(batch));
        }
        match config {
            ArchConfig::Autoformer(a) | ArchConfig::AutoformerB(a) => {
                if a.depth == 0 || a.mlp_ratio.len() != a.depth || a.num_heads.len() != a.depth {
                    return Err(SimError::InvalidConfig(
                        "per-layer lists must have length depth >= 1".into(),
                    ));
                }
                if a.num_heads.contains(&0) {
                    return Err(SimError::InvalidConfig("zero heads".into()));
                }
            }
            ArchConfig::Pit(p) => {
                if p.depth.iter().sum::<usize>() == 0 || p.num_heads.contains(&0) {
                    return Err(SimError::InvalidConfig("empty PiT configuration".into()));
                }
            }
        }
        let dims = config
            .layer_dims(scale)
            .ok_or(SimError::InvalidScale { scale })?;
        if dims.iter().any(|l| l.dim == 0 || l.head_dim == 0) {
            return Err(SimError::InvalidScale { scale });
        }
        let mut init_rng = child_rng(seed, "init", 0);
        let mut params = Params::init(&dims, &batch, &mut init_rng);
        let (patches, labels) = match mode {
            CaptureMode::Standard => {
                let mut data_rng = child_rng(seed, "data", 0);
                let n = batch.channels * batch.image_side * batch.image_side;
                let images: Vec<Vec<f64>> = (0..batch.batch_size)
                    .map(|_| (0..n).map(|_| data_rng.random::<f64>()).collect())
                    .collect();
                let labels = (0..batch.batch_size)
                    .map(|_| data_rng.random_range(0..batch.num_classes))
                    .collect();
                (extract_patches(&images, &batch), labels)
            }
            CaptureMode::Synflow => {
                params.visit_mut(|_, p| p.iter_mut().for_each(|v| *v = v.abs()));
                let n = batch.channels * batch.image_side * batch.image_side;
                (extract_patches(&[vec![1.0; n]], &batch), vec![0])
            }
        };
        Ok(Simulator {
            config: config.clone(),
            scale,
            batch,
            seed,
            mode,
            params,
            patches,
            labels,
            fault: None,
        })
    }

    #[doc(hidden)]
    pub fn with_fault(mut self, fault: BackwardFault) -> Self {
        self.fault = Some(fault);
        self
    }

    fn samples(&self) -> usize {
        self.labels.len()
    }

    fn norm_enabled(&self) -> bool {
        self.mode == CaptureMode::Standard
    }

    /// Names of all parameter tensors, in visiting order.
    pub fn parameter_names(&mut self) -> Vec<String> {
        let mut names = Vec::new();
        self.params.visit_mut(|n, _| names.push(n));
        names
    }

    /// Mutable access to one parameter tensor by name.
    pub fn with_parameter_mut<R>(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut [f64]) -> R,
    ) -> Option<R> {
        let mut f = Some(f);
        let mut out = None;
        self.params.visit_mut(|n, p| {
            if n == name {
                if let Some(f) = f.take() {
                    out = Some(f(p));
                }
            }
        });
        out
    }

    fn forward(&self) -> ForwardPass {
        let p = &self.params;
        let b = self.samples();
        let n_tok = self.batch.tokens();
        let n_patch = n_tok - 1;
        let d0 = p.cls.len();
        let norm = self.norm_enabled();

        let emb = linear(&self.patches, &p.w_pe, &p.b_pe);
        let mut x = Array2::zeros((b * n_tok, d0));
        for s in 0..b {
            let base = s * n_tok;
            x.row_mut(base).assign(&(&p.cls + &p.pos.row(0)));
            let rows = emb.slice(s![s * n_patch..(s + 1) * n_patch, ..]);
            let pos = p.pos.slice(s![1.., ..]);
            x.slice_mut(s![base + 1..base + n_tok, ..])
                .assign(&(&rows + &pos));
        }

        let mut caches = Vec::with_capacity(p.layers.len());
        for l in &p.layers {
            let (a, ln1) = layer_norm(&x, &l.ln1_g, &l.ln1_b, norm);
            let qkv = linear(&a, &l.w_qkv, &l.b_qkv);
            let (heads, hd) = (l.dims.heads, l.dims.head_dim);
            let w = heads * hd;
            let scale = 1.0 / (hd as f64).sqrt();
            let mut ctx = Array2::zeros((b * n_tok, w));
            let mut probs = Vec::with_capacity(b * heads);
            for s in 0..b {
                let r = s * n_tok..(s + 1) * n_tok;
                for h in 0..heads {
                    let q = qkv.slice(s![r.clone(), h * hd..(h + 1) * hd]);
                    let k = qkv.slice(s![r.clone(), w + h * hd..w + (h + 1) * hd]);
                    let v = qkv.slice(s![r.clone(), 2 * w + h * hd..2 * w + (h + 1) * hd]);
                    let mut sc = q.dot(&k.t()) * scale;
                    softmax_rows(&mut sc);
                    ctx.slice_mut(s![r.clone(), h * hd..(h + 1) * hd])
                        .assign(&sc.dot(&v));
                    probs.push(sc);
                }
            }
            let msa_out = linear(&ctx, &l.w_o, &l.b_o);
            let x1 = &x + &msa_out;
            let (c, ln2) = layer_norm(&x1, &l.ln2_g, &l.ln2_b, norm);
            let z1 = linear(&c, &l.w_1, &l.b_1);
            let gact = z1.mapv(gelu);
            let x2 = &x1 + &linear(&gact, &l.w_2, &l.b_2);
            let x_out = match &l.transition {
                Some((wt, bt)) => linear(&x2, wt, bt),
                None => x2.clone(),
            };
            caches.push(LayerCache {
                x_in: x,
                ln1,
                a,
                qkv,
                probs,
                ctx,
                msa_out,
                ln2,
                c,
                z1,
                gact,
                x_out: x2,
            });
            x = x_out;
        }

        let (f, lnf) = layer_norm(&x, &p.lnf_g, &p.lnf_b, norm);
        let cls_feats = f.select(Axis(0), &(0..b).map(|s| s * n_tok).collect::<Vec<_>>());
        let logits = linear(&cls_feats, &p.w_head, &p.b_head);
        let objective = match self.mode {
            CaptureMode::Standard => {
                let mut loss = 0.0;
                for (row, &y) in logits.rows().into_iter().zip(&self.labels) {
                    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    loss += lse - row[y];
                }
                loss / b as f64
            }
            CaptureMode::Synflow => logits.sum(),
        };
        ForwardPass {
            layers: caches,
            lnf,
            cls_feats,
            logits,
            objective,
        }
    }

    /// Scalar objective: mean cross-entropy, or `sum(logits)` for SynFlow.
    pub fn objective(&self) -> f64 {
        self.forward().objective
    }

    pub fn forward_diagnostics(&self) -> ForwardDiagnostics {
        let fp = self.forward();
        let mut att: f64 = 0.0;
        let mut ln_mean: f64 = 0.0;
        let mut ln_var: f64 = 0.0;
        let mut ln_check = |c: &Option<LnCache>| {
            if let Some(c) = c {
                let n = c.xhat.ncols() as f64;
                for row in c.xhat.rows() {
                    let m = row.sum() / n;
                    let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
                    ln_mean = ln_mean.max(m.abs());
                    ln_var = ln_var.max((v - 1.0).abs());
                }
            }
        };
        for l in &fp.layers {
            for p in &l.probs {
                for row in p.rows() {
                    att = att.max((row.sum() - 1.0).abs());
                }
            }
            ln_check(&l.ln1);
            ln_check(&l.ln2);
        }
        ln_check(&fp.lnf);
        ForwardDiagnostics {
            objective: fp.objective,
            max_attention_row_error: att,
            max_layer_norm_mean: ln_mean,
            max_layer_norm_var_error: ln_var,
        }
    }

    /// Full forward and backward pass: objective, parameter gradients, and
    /// the per-layer activation gradients of the attention and MLP outputs.
    fn backward(&self, fp: &ForwardPass) -> (Params, Vec<ActGrads>) {
        let p = &self.params;
        let mut g = p.zeros_like();
        let b = self.samples();
        let n_tok = self.batch.tokens();
        let n_patch = n_tok - 1;

        let dlogits = match self.mode {
            CaptureMode::Standard => {
                let mut d = fp.logits.clone();
                softmax_rows(&mut d);
                for (mut row, &y) in d.rows_mut().into_iter().zip(&self.labels) {
                    row[y] -= 1.0;
                }
                d / b as f64
            }
            CaptureMode::Synflow => Array2::ones(fp.logits.raw_dim()),
        };
        g.w_head = fp.cls_feats.t().dot(&dlogits);
        g.b_head = dlogits.sum_axis(Axis(0));
        let dcls = dlogits.dot(&p.w_head.t());
        let dl = p.lnf_g.len();
        let mut df = Array2::zeros((b * n_tok, dl));
        for s in 0..b {
            df.row_mut(s * n_tok).assign(&dcls.row(s));
        }
        let mut dx =
            layer_norm_backward(&df, &p.lnf_g, fp.lnf.as_ref(), &mut g.lnf_g, &mut g.lnf_b);

        let mut act_grads = vec![(Array2::zeros((0, 0)), Array2::zeros((0, 0))); p.layers.len()];
        for (li, (l, c)) in p.layers.iter().zip(&fp.layers).enumerate().rev() {
            let gl = &mut g.layers[li];
            if let Some((wt, _)) = &l.transition {
                let (gw, gb) = gl.transition.as_mut().unwrap();
                *gw = c.x_out.t().dot(&dx);
                *gb = dx.sum_axis(Axis(0));
                dx = dx.dot(&wt.t());
            }
            // MLP branch
            let dz2 = &dx;
            gl.w_2 = c.gact.t().dot(dz2);
            gl.b_2 = dz2.sum_axis(Axis(0));
            let dgact = dz2.dot(&l.w_2.t());
            let sign = if self.fault == Some(BackwardFault::FlipGeluGrad) {
                -1.0
            } else {
                1.0
            };
            let dz1 = &dgact * &c.z1.mapv(|v| sign * gelu_grad(v));
            gl.w_1 = c.c.t().dot(&dz1);
            gl.b_1 = dz1.sum_axis(Axis(0));
            let dc = dz1.dot(&l.w_1.t());
            let dx1 = &dx
                + &layer_norm_backward(&dc, &l.ln2_g, c.ln2.as_ref(), &mut gl.ln2_g, &mut gl.ln2_b);

            // attention branch
            let dm = &dx1;
            gl.w_o = c.ctx.t().dot(dm);
            gl.b_o = dm.sum_axis(Axis(0));
            let dctx = dm.dot(&l.w_o.t());
            let (heads, hd) = (l.dims.heads, l.dims.head_dim);
            let w = heads * hd;
            let scale = 1.0 / (hd as f64).sqrt();
            let mut dqkv = Array2::zeros(c.qkv.raw_dim());
            for s in 0..b {
                let r = s * n_tok..(s + 1) * n_tok;
                for h in 0..heads {
                    let probs = &c.probs[s * heads + h];
                    let q = c.qkv.slice(s![r.clone(), h * hd..(h + 1) * hd]);
                    let k = c.qkv.slice(s![r.clone(), w + h * hd..w + (h + 1) * hd]);
                    let v = c
                        .qkv
                        .slice(s![r.clone(), 2 * w + h * hd..2 * w + (h + 1) * hd]);
                    let dout = dctx.slice(s![r.clone(), h * hd..(h + 1) * hd]);
                    let dprobs = dout.dot(&v.t());
                    let dv = probs.t().dot(&dout);
                    let mut dsc = Array2::zeros(probs.raw_dim());
                    for i in 0..n_tok {
                        let pr = probs.row(i);
                        let dpr = dprobs.row(i);
                        let dot = pr.dot(&dpr);
                        dsc.row_mut(i)
                            .iter_mut()
                            .zip(pr.iter().zip(dpr.iter()))
                            .for_each(|(o, (&pv, &dpv))| *o = pv * (dpv - dot) * scale);
                    }
                    let dq = dsc.dot(&k);
                    let dk = dsc.t().dot(&q);
                    dqkv.slice_mut(s![r.clone(), h * hd..(h + 1) * hd])
                        .assign(&dq);
                    dqkv.slice_mut(s![r.clone(), w + h * hd..w + (h + 1) * hd])
                        .assign(&dk);
                    dqkv.slice_mut(s![r.clone(), 2 * w + h * hd..2 * w + (h + 1) * hd])
                        .assign(&dv);
                }
            }
            gl.w_qkv = c.a.t().dot(&dqkv);
            gl.b_qkv = dqkv.sum_axis(Axis(0));
            let da = dqkv.dot(&l.w_qkv.t());
            dx = &dx1
                + &layer_norm_backward(&da, &l.ln1_g, c.ln1.as_ref(), &mut gl.ln1_g, &mut gl.ln1_b);
            act_grads[li] = (dm.clone(), dgact);
            let _ = &c.x_in;
        }

        // embeddings
        let d0 = p.cls.len();
        let mut demb = Array2::zeros((b * n_patch, d0));
        for s in 0..b {
            let base = s * n_tok;
            let blk = dx.slice(s![base..base + n_tok, ..]);
            g.cls += &blk.row(0);
            g.pos += &blk;
            demb.slice_mut(s![s * n_patch..(s + 1) * n_patch, ..])
                .assign(&blk.slice(s![1.., ..]));
        }
        g.w_pe = self.patches.t().dot(&demb);
        g.b_pe = demb.sum_axis(Axis(0));
        (g, act_grads)
    }

    /// Objective and all parameter gradients as `(name, values)` pairs.
    pub fn gradients(&self) -> (f64, Vec<(String, Vec<f64>)>) {
        let fp = self.forward();
        let (mut g, _) = self.backward(&fp);
        let mut out = Vec::new();
        g.visit_mut(|n, v| out.push((n, v.to_vec())));
        (fp.objective, out)
    }

    fn batch_mean(&self, x: &Array2<f64>) -> Tensor {
        let n_tok = self.batch.tokens();
        let b = self.samples();
        let cols = x.ncols();
        let mut acc = Array2::<f64>::zeros((n_tok, cols));
        for s in 0..b {
            acc += &x.slice(s![s * n_tok..(s + 1) * n_tok, ..]);
        }
        acc /= b as f64;
        to_tensor(acc.view())
    }

    /// Runs forward and backward and records the statistics of every layer.
    pub fn capture(&self) -> NetworkStatistics {
        let fp = self.forward();
        let (grads, act_grads) = self.backward(&fp);
        let layers = self
            .params
            .layers
            .iter()
            .zip(&grads.layers)
            .zip(fp.layers.iter().zip(&act_grads))
            .map(|((l, gl), (c, (dm, dg)))| LayerStatistics {
                msa_weights: vec![to_tensor(l.w_qkv.view()), to_tensor(l.w_o.view())],
                msa_weight_grads: vec![to_tensor(gl.w_qkv.view()), to_tensor(gl.w_o.view())],
                msa_act: self.batch_mean(&c.msa_out),
                msa_act_grad: self.batch_mean(dm),
                mlp_weights: vec![to_tensor(l.w_1.view()), to_tensor(l.w_2.view())],
                mlp_weight_grads: vec![to_tensor(gl.w_1.view()), to_tensor(gl.w_2.view())],
                mlp_act: self.batch_mean(&c.gact),
                mlp_act_grad: self.batch_mean(dg),
            })
            .collect();
        NetworkStatistics {
            layers,
            config: self.config.clone(),
            capture_mode: self.mode,
            seed: self.seed,
            scale: self.scale,
            batch: self.batch,
        }
    }
}

fn to_tensor(a: ArrayView2<f64>) -> Tensor {
    let (r, c) = a.dim();
    Tensor::matrix(r, c, a.iter().copied().collect()).expect("non-empty matrix")
}

pub fn capture_statistics(
    cfg: &ArchConfig,
    scale: usize,
    batch: BatchSpec,
    seed: u64,
) -> Result<NetworkStatistics, SimError> {
    Ok(Simulator::new(cfg, scale, batch, seed, CaptureMode::Standard)?.capture())
}

/// SynFlow capture on the default batch geometry (a single all-ones image).
pub fn capture_synflow(
    cfg: &ArchConfig,
    scale: usize,
    seed: u64,
) -> Result<NetworkStatistics, SimError> {
    capture_with_mode(cfg, scale, BatchSpec::default(), seed, CaptureMode::Synflow)
}

pub fn capture_with_mode(
    cfg: &ArchConfig,
    scale: usize,
    batch: BatchSpec,
    seed: u64,
    mode: CaptureMode,
) -> Result<NetworkStatistics, SimError> {
    Ok(Simulator::new(cfg, scale, batch, seed, mode)?.capture())
}

/// Analytic-vs-finite-difference comparison for one parameter tensor.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub elements: usize,
    /// Entries with |analytic| above the magnitude floor.
    pub compared: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub magnitude_floor: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub const GRAD_CHECK_STEP: f64 = 2e-3;
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Checks every parameter gradient of `sim` against a Richardson-extrapolated
/// five-point central difference: `(16 D(h/2) - D(h)) / 15` with
/// `h` = [`GRAD_CHECK_STEP`], which cancels the `h^4` term.
pub fn grad_check_simulator(sim: &mut Simulator, tolerance: f64) -> GradCheckReport {
    let h = GRAD_CHECK_STEP;
    let (_, analytic) = sim.gradients();
    let mut tensors = Vec::with_capacity(analytic.len());
    for (name, grad) in analytic {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut compared = 0;
        for (i, &a) in grad.iter().enumerate() {
            let orig = sim.with_parameter_mut(&name, |p| p[i]).unwrap();
            let mut at = |delta: f64| {
                sim.with_parameter_mut(&name, |p| p[i] = orig + delta);
                sim.objective()
            };
            let q = h / 2.0;
            let (p4, p2, p1) = (at(4.0 * q), at(2.0 * q), at(q));
            let (m1, m2, m4) = (at(-q), at(-2.0 * q), at(-4.0 * q));
            sim.with_parameter_mut(&name, |p| p[i] = orig);
            let fine = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * q);
            let coarse = (8.0 * (p2 - m2) - (p4 - m4)) / (12.0 * h);
            let numeric = (16.0 * fine - coarse) / 15.0;
            let abs = (a - numeric).abs();
            max_abs = max_abs.max(abs);
            if a.abs() > GRAD_CHECK_FLOOR {
                compared += 1;
                max_rel = max_rel.max(abs / a.abs().max(numeric.abs()));
            }
        }
        tensors.push(TensorCheck {
            name,
            elements: grad.len(),
            compared,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    GradCheckReport {
        step: h,
        tolerance,
        magnitude_floor: GRAD_CHECK_FLOOR,
        tensors,
        max_rel_error,
        passed: max_rel_error <= tolerance,
    }
}

pub fn grad_check(
    cfg: &ArchConfig,
    scale: usize,
    batch: BatchSpec,
    seed: u64,
    tolerance: f64,
) -> Result<GradCheckReport, SimError> {
    let mut sim = Simulator::new(cfg, scale, batch, seed, CaptureMode::Standard)?;
    Ok(grad_check_simulator(&mut sim, tolerance))
}
