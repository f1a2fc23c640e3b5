//! Proxy expression trees and the hand-coded reference proxies.
//!
//! A graph reads two statistic slots of a layer, pushes each through two
//! unary operations, combines the branches with one binary operation and
//! reduces the result with `to_mean_scalar`. Network scores are the mean of
//! the layer scores.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::stats::{CaptureMode, LayerStatistics, NetworkStatistics};
use crate::tensor::{apply_binary, apply_unary_cow, BinaryOp, Tensor, UnaryOp, EPSILON};

pub use crate::stats::StatSlot;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    Nan,
    Infinite,
    ShapeMismatch,
    /// Exactly -1, 0 or 1.
    Degenerate,
}

impl fmt::Display for InvalidReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InvalidReason::Nan => "nan",
            InvalidReason::Infinite => "inf",
            InvalidReason::ShapeMismatch => "shape-mismatch",
            InvalidReason::Degenerate => "degenerate-constant",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProxyScore {
    Value(f64),
    Invalid(InvalidReason),
}

impl ProxyScore {
    /// Wraps a raw value, marking NaN, infinities and exact -1/0/1 invalid.
    pub fn classify(v: f64) -> ProxyScore {
        if v.is_nan() {
            ProxyScore::Invalid(InvalidReason::Nan)
        } else if v.is_infinite() {
            ProxyScore::Invalid(InvalidReason::Infinite)
        } else if v == 0.0 || v == 1.0 || v == -1.0 {
            ProxyScore::Invalid(InvalidReason::Degenerate)
        } else {
            ProxyScore::Value(v)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            ProxyScore::Value(v) => Some(v),
            ProxyScore::Invalid(_) => None,
        }
    }
}

/// False for the invalid marker and for values in {-1, 0, 1, NaN, +-Inf}.
pub fn check_validity(s: &ProxyScore) -> bool {
    match *s {
        ProxyScore::Value(v) => matches!(ProxyScore::classify(v), ProxyScore::Value(_)),
        ProxyScore::Invalid(_) => false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ProxyGraph {
    pub input_a: StatSlot,
    pub ops_a: [UnaryOp; 2],
    pub input_b: StatSlot,
    pub ops_b: [UnaryOp; 2],
    pub combine: BinaryOp,
}

fn branch<'a>(t: &'a Tensor, ops: &[UnaryOp; 2]) -> Cow<'a, Tensor> {
    apply_unary_cow(ops[1], apply_unary_cow(ops[0], Cow::Borrowed(t)))
}

impl ProxyGraph {
    pub fn autoprox_a() -> Self {
        ProxyGraph {
            input_a: StatSlot::F1g,
            ops_a: [UnaryOp::Abs, UnaryOp::NoOp],
            input_b: StatSlot::F3g,
            ops_b: [UnaryOp::Sigmoid, UnaryOp::NormalizedSum],
            combine: BinaryOp::Sum,
        }
    }

    pub fn autoprox_p() -> Self {
        ProxyGraph {
            input_a: StatSlot::F1,
            ops_a: [UnaryOp::Sigmoid, UnaryOp::FrobeniusNorm],
            input_b: StatSlot::F3,
            ops_b: [UnaryOp::Abs, UnaryOp::LogSoftmax],
            combine: BinaryOp::Difference,
        }
    }

    /// Raw layer output before the validity classification; `None` on a
    /// shape mismatch.
    pub fn evaluate_raw(&self, stats: &LayerStatistics) -> Option<f64> {
        let a = branch(stats.slot(self.input_a), &self.ops_a);
        let b = branch(stats.slot(self.input_b), &self.ops_b);
        let c = apply_binary(self.combine, &a, &b).ok()?;
        Some(c.mean())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self, ProxyParseError> {
        serde_json::from_str(text).map_err(|e| ProxyParseError {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }
}

impl fmt::Display for ProxyGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}({}({})) {} {}({}({}))",
            self.ops_a[1].name(),
            self.ops_a[0].name(),
            self.input_a,
            self.combine.name(),
            self.ops_b[1].name(),
            self.ops_b[0].name(),
            self.input_b,
        )
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("proxy parse error at line {line}, column {column}: {message}")]
pub struct ProxyParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

fn ser_str<S: Serializer>(s: S, v: &str) -> Result<S::Ok, S::Error> {
    s.serialize_str(v)
}

fn de_parse<'de, D, T>(d: D) -> Result<T, D::Error>
where
    D: Deserializer<'de>,
    T: FromStr,
    T::Err: fmt::Display,
{
    let s = String::deserialize(d)?;
    s.parse().map_err(de::Error::custom)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRepr {
    #[serde(serialize_with = "ser_slot", deserialize_with = "de_parse")]
    input_a: StatSlot,
    #[serde(serialize_with = "ser_ops", deserialize_with = "de_ops")]
    ops_a: [UnaryOp; 2],
    #[serde(serialize_with = "ser_slot", deserialize_with = "de_parse")]
    input_b: StatSlot,
    #[serde(serialize_with = "ser_ops", deserialize_with = "de_ops")]
    ops_b: [UnaryOp; 2],
    #[serde(serialize_with = "ser_bop", deserialize_with = "de_parse")]
    combine: BinaryOp,
}

fn ser_slot<S: Serializer>(v: &StatSlot, s: S) -> Result<S::Ok, S::Error> {
    ser_str(s, v.code())
}

fn ser_bop<S: Serializer>(v: &BinaryOp, s: S) -> Result<S::Ok, S::Error> {
    ser_str(s, &v.code())
}

fn ser_ops<S: Serializer>(v: &[UnaryOp; 2], s: S) -> Result<S::Ok, S::Error> {
    [v[0].code(), v[1].code()].serialize(s)
}

fn de_ops<'de, D: Deserializer<'de>>(d: D) -> Result<[UnaryOp; 2], D::Error> {
    let codes = <[String; 2]>::deserialize(d)?;
    Ok([
        codes[0].parse().map_err(de::Error::custom)?,
        codes[1].parse().map_err(de::Error::custom)?,
    ])
}

impl Serialize for ProxyGraph {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        GraphRepr {
            input_a: self.input_a,
            ops_a: self.ops_a,
            input_b: self.input_b,
            ops_b: self.ops_b,
            combine: self.combine,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ProxyGraph {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = GraphRepr::deserialize(d)?;
        Ok(ProxyGraph {
            input_a: r.input_a,
            ops_a: r.ops_a,
            input_b: r.input_b,
            ops_b: r.ops_b,
            combine: r.combine,
        })
    }
}

pub fn evaluate_layer(g: &ProxyGraph, stats: &LayerStatistics) -> ProxyScore {
    match g.evaluate_raw(stats) {
        Some(v) => ProxyScore::classify(v),
        None => ProxyScore::Invalid(InvalidReason::ShapeMismatch),
    }
}

/// Mean of layer scores; the first invalid layer invalidates the network.
pub fn aggregate_scores<I: IntoIterator<Item = ProxyScore>>(scores: I) -> ProxyScore {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in scores {
        match s {
            ProxyScore::Value(v) => {
                sum += v;
                n += 1;
            }
            invalid => return invalid,
        }
    }
    if n == 0 {
        return ProxyScore::Invalid(InvalidReason::Nan);
    }
    ProxyScore::classify(sum / n as f64)
}

pub fn score_network(g: &ProxyGraph, net: &NetworkStatistics) -> ProxyScore {
    aggregate_scores(net.layers.iter().map(|l| evaluate_layer(g, l)))
}

pub fn random_graph(rng: &mut impl Rng) -> ProxyGraph {
    let slot = |rng: &mut _| StatSlot::ALL[Rng::random_range(rng, 0..StatSlot::ALL.len())];
    let uop = |rng: &mut _| UnaryOp::ALL[Rng::random_range(rng, 0..UnaryOp::ALL.len())];
    let bop = |rng: &mut _| BinaryOp::ALL[Rng::random_range(rng, 0..BinaryOp::ALL.len())];
    ProxyGraph {
        input_a: slot(rng),
        ops_a: [uop(rng), uop(rng)],
        input_b: slot(rng),
        ops_b: [uop(rng), uop(rng)],
        combine: bop(rng),
    }
}

/// Resamples each of the seven nodes independently with probability `p`.
pub fn mutate(g: &ProxyGraph, rng: &mut impl Rng, p: f64) -> ProxyGraph {
    let mut out = *g;
    let hit = |rng: &mut _| Rng::random_bool(rng, p.clamp(0.0, 1.0));
    if hit(rng) {
        out.input_a = StatSlot::ALL[rng.random_range(0..StatSlot::ALL.len())];
    }
    for i in 0..2 {
        if hit(rng) {
            out.ops_a[i] = UnaryOp::ALL[rng.random_range(0..UnaryOp::ALL.len())];
        }
    }
    if hit(rng) {
        out.input_b = StatSlot::ALL[rng.random_range(0..StatSlot::ALL.len())];
    }
    for i in 0..2 {
        if hit(rng) {
            out.ops_b[i] = UnaryOp::ALL[rng.random_range(0..UnaryOp::ALL.len())];
        }
    }
    if hit(rng) {
        out.combine = BinaryOp::ALL[rng.random_range(0..BinaryOp::ALL.len())];
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BuiltinProxy {
    AutoproxA,
    AutoproxP,
    Snip,
    Plain,
    Fisher,
    Synflow,
    TfTas,
}

impl BuiltinProxy {
    pub const ALL: [BuiltinProxy; 7] = [
        BuiltinProxy::AutoproxA,
        BuiltinProxy::AutoproxP,
        BuiltinProxy::Snip,
        BuiltinProxy::Plain,
        BuiltinProxy::Fisher,
        BuiltinProxy::Synflow,
        BuiltinProxy::TfTas,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BuiltinProxy::AutoproxA => "autoprox_a",
            BuiltinProxy::AutoproxP => "autoprox_p",
            BuiltinProxy::Snip => "snip",
            BuiltinProxy::Plain => "plain",
            BuiltinProxy::Fisher => "fisher",
            BuiltinProxy::Synflow => "synflow",
            BuiltinProxy::TfTas => "tf_tas",
        }
    }

    pub fn required_mode(self) -> CaptureMode {
        match self {
            BuiltinProxy::Synflow => CaptureMode::Synflow,
            _ => CaptureMode::Standard,
        }
    }
}

impl fmt::Display for BuiltinProxy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown builtin proxy `{0}`")]
pub struct UnknownProxy(pub String);

impl FromStr for BuiltinProxy {
    type Err = UnknownProxy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BuiltinProxy::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| UnknownProxy(s.to_string()))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProxyError {
    #[error("{proxy} needs {what}")]
    MissingStatistic { proxy: &'static str, what: String },
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot_sum(a: &[Tensor], b: &[Tensor], f: impl Fn(f64) -> f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(u, v)| f(u * v))
                .sum::<f64>()
        })
        .sum()
}

/// Sum of singular values from the Jacobi eigenvalues of the smaller Gram
/// matrix.
pub fn nuclear_norm(t: &Tensor) -> f64 {
    let (r, c) = match *t.shape() {
        [] => return t.item().abs(),
        [n] => (1, n),
        [r, c] => (r, c),
        _ => unreachable!("rank <= 2"),
    };
    let d = t.data();
    let n = r.min(c);
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s: f64 = if c <= r {
                (0..r).map(|k| d[k * c + i] * d[k * c + j]).sum()
            } else {
                (0..c).map(|k| d[i * c + k] * d[j * c + k]).sum()
            };
            g[i * n + j] = s;
            g[j * n + i] = s;
        }
    }
    jacobi_eigenvalues(&mut g, n, 1e-10)
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .sum()
}

/// Cyclic Jacobi rotations on a symmetric `n x n` matrix until the
/// off-diagonal Frobenius norm drops below `tol` times the total norm.
fn jacobi_eigenvalues(a: &mut [f64], n: usize, tol: f64) -> Vec<f64> {
    let total: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= tol * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = cs * akp - sn * akq;
                    a[k * n + q] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = cs * apk - sn * aqk;
                    a[q * n + k] = sn * apk + cs * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

fn layer_builtin(proxy: BuiltinProxy, l: &LayerStatistics) -> f64 {
    match proxy {
        BuiltinProxy::AutoproxA => {
            let gl = l.msa_weight_grads[0].data();
            let first = gl.iter().map(|v| v.abs()).sum::<f64>() / gl.len() as f64;
            let n: usize = l.mlp_weight_grads.iter().map(Tensor::numel).sum();
            let s: f64 = l
                .mlp_weight_grads
                .iter()
                .flat_map(|t| t.data().iter())
                .map(|&v| sigmoid(v))
                .sum();
            first + s / (n as f64 + EPSILON)
        }
        BuiltinProxy::AutoproxP => {
            let tl = l.msa_weights[0].data();
            let fro = tl.iter().map(|&v| sigmoid(v).powi(2)).sum::<f64>().sqrt();
            let tk: Vec<f64> = l.mlp_weights[0].data().iter().map(|v| v.abs()).collect();
            let m = tk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + tk.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let mean = tk.iter().sum::<f64>() / tk.len() as f64;
            // fro - mean(log softmax |tk|)
            fro - (mean - lse)
        }
        BuiltinProxy::Snip => {
            dot_sum(&l.msa_weights, &l.msa_weight_grads, f64::abs)
                + dot_sum(&l.mlp_weights, &l.mlp_weight_grads, f64::abs)
        }
        BuiltinProxy::Plain | BuiltinProxy::Synflow => {
            dot_sum(&l.msa_weights, &l.msa_weight_grads, |v| v)
                + dot_sum(&l.mlp_weights, &l.mlp_weight_grads, |v| v)
        }
        BuiltinProxy::Fisher => [(&l.msa_act, &l.msa_act_grad), (&l.mlp_act, &l.mlp_act_grad)]
            .iter()
            .map(|(z, g)| {
                z.data()
                    .iter()
                    .zip(g.data())
                    .map(|(a, b)| (a * b).powi(2))
                    .sum::<f64>()
            })
            .sum(),
        BuiltinProxy::TfTas => {
            let msa: f64 = l
                .msa_weights
                .iter()
                .zip(&l.msa_weight_grads)
                .map(|(w, g)| nuclear_norm(g) * nuclear_norm(w))
                .sum();
            msa + dot_sum(&l.mlp_weights, &l.mlp_weight_grads, |v| v)
        }
    }
}

/// Closed-form score of a reference proxy, averaged over layers.
pub fn builtin_score(
    proxy: BuiltinProxy,
    net: &NetworkStatistics,
) -> Result<ProxyScore, ProxyError> {
    if net.capture_mode != proxy.required_mode() {
        let what = match proxy.required_mode() {
            CaptureMode::Synflow => "a synflow-mode capture",
            CaptureMode::Standard => "a standard-mode capture",
        };
        return Err(ProxyError::MissingStatistic {
            proxy: proxy.name(),
            what: what.into(),
        });
    }
    Ok(aggregate_scores(
        net.layers
            .iter()
            .map(|l| ProxyScore::classify(layer_builtin(proxy, l))),
    ))
}

/// Anything that can score a network: an evolved graph or a reference proxy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Proxy {
    Graph(ProxyGraph),
    Builtin(BuiltinProxy),
}

impl Proxy {
    pub fn capture_mode(&self) -> CaptureMode {
        match self {
            Proxy::Graph(_) => CaptureMode::Standard,
            Proxy::Builtin(b) => b.required_mode(),
        }
    }

    pub fn score(&self, net: &NetworkStatistics) -> Result<ProxyScore, ProxyError> {
        match self {
            Proxy::Graph(g) => Ok(score_network(g, net)),
            Proxy::Builtin(b) => builtin_score(*b, net),
        }
    }

    /// Builtin name, or the graph's JSON text.
    pub fn label(&self) -> String {
        match self {
            Proxy::Graph(g) => g.to_json(),
            Proxy::Builtin(b) => b.name().to_string(),
        }
    }
}

impl fmt::Display for Proxy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Proxy::Graph(g) => g.fmt(f),
            Proxy::Builtin(b) => b.fmt(f),
        }
    }
}
