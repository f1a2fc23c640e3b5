//! Dense rank-0..2 tensors of `f64` and the primitive operation table.
//!
//! Every operation here is a pure function. Domain violations (log of a
//! negative number, division by zero, zero spread in a normalisation) are not
//! errors: they produce IEEE NaN/Inf values that travel through the rest of a
//! proxy and are rejected later by the validity check. The only error an
//! operation can raise is a shape mismatch in a binary op.

use std::borrow::Cow;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use thiserror::Error;

/// Shared numerical guard used by `normalized_sum` and the closed-form proxies.
pub const EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("unsupported tensor rank {0} (at most 2)")]
    UnsupportedRank(usize),
    #[error("malformed tensor blob: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major dense tensor. Rank 0 is a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self, TensorError> {
        let len = data.len();
        Self::new(vec![len], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.len() > 2 {
            return Err(TensorError::UnsupportedRank(shape.len()));
        }
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self, TensorError> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a rank-0 tensor, or of the first element otherwise.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn with_data(&self, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(data.len(), self.data.len());
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    /// Population standard deviation (divides by n).
    pub fn std(&self) -> f64 {
        let mean = self.mean();
        let ss: f64 = self.data.iter().map(|&x| (x - mean) * (x - mean)).sum();
        (ss / self.numel() as f64).sqrt()
    }

    /// Serialises to the little-endian blob format: rank as `u32`, each dim
    /// as `u64`, then the row-major `f64` payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 8 * self.shape.len() + 8 * self.data.len());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), TensorError> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let mut cursor = bytes;
        let t = Self::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(TensorError::Malformed(format!(
                "{} trailing bytes",
                cursor.len()
            )));
        }
        Ok(t)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, TensorError> {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)
            .map_err(|_| TensorError::Malformed("missing rank header".into()))?;
        let rank = u32::from_le_bytes(b4) as usize;
        if rank > 2 {
            return Err(TensorError::UnsupportedRank(rank));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut b8 = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut b8)
                .map_err(|_| TensorError::Malformed("truncated dims".into()))?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let n: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(TensorError::InvalidShape { shape, len: 0 });
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)
                .map_err(|_| TensorError::Malformed("truncated payload".into()))?;
            data.push(f64::from_le_bytes(b8));
        }
        Self::new(shape, data)
    }
}

/// The 24 unary primitives, `UOP00`..`UOP23`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnaryOp {
    NoOp,
    Abs,
    Tanh,
    Pow,
    Exp,
    Log,
    Relu,
    LeakyRelu,
    Swish,
    Mish,
    Invert,
    NormalizedSum,
    Normalize,
    Sigmoid,
    LogSoftmax,
    Softmax,
    Sqrt,
    Revert,
    FrobeniusNorm,
    AbsLog,
    L1Norm,
    MinMaxNormalize,
    ToMeanScalar,
    ToStdScalar,
}

/// The 4 binary primitives, `BOP01`..`BOP04`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinaryOp {
    Sum,
    Difference,
    Product,
    MatMul,
}

impl UnaryOp {
    pub const ALL: [UnaryOp; 24] = [
        UnaryOp::NoOp,
        UnaryOp::Abs,
        UnaryOp::Tanh,
        UnaryOp::Pow,
        UnaryOp::Exp,
        UnaryOp::Log,
        UnaryOp::Relu,
        UnaryOp::LeakyRelu,
        UnaryOp::Swish,
        UnaryOp::Mish,
        UnaryOp::Invert,
        UnaryOp::NormalizedSum,
        UnaryOp::Normalize,
        UnaryOp::Sigmoid,
        UnaryOp::LogSoftmax,
        UnaryOp::Softmax,
        UnaryOp::Sqrt,
        UnaryOp::Revert,
        UnaryOp::FrobeniusNorm,
        UnaryOp::AbsLog,
        UnaryOp::L1Norm,
        UnaryOp::MinMaxNormalize,
        UnaryOp::ToMeanScalar,
        UnaryOp::ToStdScalar,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> String {
        format!("UOP{:02}", self.index())
    }

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::NoOp => "no_op",
            UnaryOp::Abs => "element_wise_abs",
            UnaryOp::Tanh => "element_wise_tanh",
            UnaryOp::Pow => "element_wise_pow",
            UnaryOp::Exp => "element_wise_exp",
            UnaryOp::Log => "element_wise_log",
            UnaryOp::Relu => "element_wise_relu",
            UnaryOp::LeakyRelu => "element_wise_leaky_relu",
            UnaryOp::Swish => "element_wise_swish",
            UnaryOp::Mish => "element_wise_mish",
            UnaryOp::Invert => "element_wise_invert",
            UnaryOp::NormalizedSum => "element_wise_normalized_sum",
            UnaryOp::Normalize => "normalize",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::LogSoftmax => "logsoftmax",
            UnaryOp::Softmax => "softmax",
            UnaryOp::Sqrt => "element_wise_sqrt",
            UnaryOp::Revert => "element_wise_revert",
            UnaryOp::FrobeniusNorm => "frobenius_norm",
            UnaryOp::AbsLog => "element_wise_abslog",
            UnaryOp::L1Norm => "l1_norm",
            UnaryOp::MinMaxNormalize => "min_max_normalize",
            UnaryOp::ToMeanScalar => "to_mean_scalar",
            UnaryOp::ToStdScalar => "to_std_scalar",
        }
    }

    /// True when the op collapses its operand to a rank-0 tensor.
    pub fn is_reduction(self) -> bool {
        matches!(
            self,
            UnaryOp::NormalizedSum
                | UnaryOp::FrobeniusNorm
                | UnaryOp::L1Norm
                | UnaryOp::ToMeanScalar
                | UnaryOp::ToStdScalar
        )
    }
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 4] = [
        BinaryOp::Sum,
        BinaryOp::Difference,
        BinaryOp::Product,
        BinaryOp::MatMul,
    ];

    pub fn code(self) -> String {
        format!("BOP{:02}", self as usize + 1)
    }

    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Sum => "element_wise_sum",
            BinaryOp::Difference => "element_wise_difference",
            BinaryOp::Product => "element_wise_product",
            BinaryOp::MatMul => "matrix_multiplication",
        }
    }
}

/// Either kind of primitive, addressed by its table code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpId {
    Unary(UnaryOp),
    Binary(BinaryOp),
}

impl OpId {
    pub fn code(self) -> String {
        match self {
            OpId::Unary(op) => op.code(),
            OpId::Binary(op) => op.code(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown op code `{0}`")]
pub struct UnknownOpCode(pub String);

impl FromStr for OpId {
    type Err = UnknownOpCode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || UnknownOpCode(s.to_string());
        let parse_num = |digits: &str| -> Option<usize> {
            if digits.len() == 2 && digits.bytes().all(|b| b.is_ascii_digit()) {
                digits.parse().ok()
            } else {
                None
            }
        };
        if let Some(rest) = s.strip_prefix("UOP") {
            let n = parse_num(rest).ok_or_else(unknown)?;
            UnaryOp::ALL
                .get(n)
                .map(|&op| OpId::Unary(op))
                .ok_or_else(unknown)
        } else if let Some(rest) = s.strip_prefix("BOP") {
            let n = parse_num(rest).ok_or_else(unknown)?;
            n.checked_sub(1)
                .and_then(|i| BinaryOp::ALL.get(i))
                .map(|&op| OpId::Binary(op))
                .ok_or_else(unknown)
        } else {
            Err(unknown())
        }
    }
}

impl FromStr for UnaryOp {
    type Err = UnknownOpCode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.parse()? {
            OpId::Unary(op) => Ok(op),
            OpId::Binary(_) => Err(UnknownOpCode(s.to_string())),
        }
    }
}

impl FromStr for BinaryOp {
    type Err = UnknownOpCode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.parse()? {
            OpId::Binary(op) => Ok(op),
            OpId::Unary(_) => Err(UnknownOpCode(s.to_string())),
        }
    }
}

impl fmt::Display for UnaryOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

impl fmt::Display for BinaryOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Largest finite-or-infinite element, ignoring NaNs (NaNs still propagate
/// through the elementwise formula that uses the result).
fn max_of(data: &[f64]) -> f64 {
    data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn min_of(data: &[f64]) -> f64 {
    data.iter().copied().fold(f64::INFINITY, f64::min)
}

fn log_sum_exp(data: &[f64]) -> f64 {
    let m = max_of(data);
    if m.is_infinite() {
        // all -inf gives -inf; any +inf gives +inf
        return m;
    }
    m + data.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub fn apply_unary(op: UnaryOp, a: &Tensor) -> Tensor {
    apply_unary_cow(op, Cow::Borrowed(a)).into_owned()
}

/// Same as [`apply_unary`], but `no_op` passes the operand through without
/// copying. Used on the hot path of proxy evaluation.
pub fn apply_unary_cow(op: UnaryOp, a: Cow<'_, Tensor>) -> Cow<'_, Tensor> {
    let t = a.as_ref();
    let d = t.data();
    let out = match op {
        UnaryOp::NoOp => return a,
        UnaryOp::Abs => t.map(f64::abs),
        UnaryOp::Tanh => t.map(f64::tanh),
        UnaryOp::Pow => t.map(|x| x * x),
        UnaryOp::Exp => t.map(f64::exp),
        UnaryOp::Log => t.map(f64::ln),
        UnaryOp::Relu => t.map(|x| if x > 0.0 || x.is_nan() { x } else { 0.0 }),
        UnaryOp::LeakyRelu => t.map(|x| if x.is_nan() { x } else { (0.1 * x).max(x) }),
        UnaryOp::Swish => t.map(|x| x * sigmoid(x)),
        UnaryOp::Mish => t.map(|x| x * x.exp().ln_1p().tanh()),
        UnaryOp::Invert => t.map(|x| 1.0 / x),
        UnaryOp::NormalizedSum => Tensor::scalar(t.sum() / (t.numel() as f64 + EPSILON)),
        UnaryOp::Normalize => {
            let mean = t.mean();
            let std = t.std();
            t.map(|x| (x - mean) / std)
        }
        UnaryOp::Sigmoid => t.map(sigmoid),
        UnaryOp::LogSoftmax => {
            let lse = log_sum_exp(d);
            t.map(|x| x - lse)
        }
        UnaryOp::Softmax => {
            let m = max_of(d);
            let exps: Vec<f64> = d.iter().map(|&x| (x - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            t.with_data(exps.into_iter().map(|e| e / z).collect())
        }
        UnaryOp::Sqrt => t.map(f64::sqrt),
        UnaryOp::Revert => t.map(|x| -x),
        UnaryOp::FrobeniusNorm => Tensor::scalar(d.iter().map(|x| x * x).sum::<f64>().sqrt()),
        UnaryOp::AbsLog => t.map(|x| x.ln().abs()),
        UnaryOp::L1Norm => {
            Tensor::scalar(d.iter().map(|x| x.abs()).sum::<f64>() / t.numel() as f64)
        }
        UnaryOp::MinMaxNormalize => {
            let lo = min_of(d);
            let hi = max_of(d);
            let span = hi - lo;
            t.map(|x| (x - lo) / span)
        }
        UnaryOp::ToMeanScalar => Tensor::scalar(t.mean()),
        UnaryOp::ToStdScalar => Tensor::scalar(t.std()),
    };
    Cow::Owned(out)
}

fn elementwise(
    op: BinaryOp,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, TensorError> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        Ok(a.with_data(data))
    } else if b.is_scalar() {
        let y = b.item();
        Ok(a.map(|x| f(x, y)))
    } else if a.is_scalar() {
        let x = a.item();
        Ok(b.map(|y| f(x, y)))
    } else {
        Err(TensorError::ShapeMismatch {
            op: op.name(),
            left: a.shape.clone(),
            right: b.shape.clone(),
        })
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.is_scalar() || b.is_scalar() {
        return elementwise(BinaryOp::MatMul, a, b, |x, y| x * y);
    }
    // promote vectors to row / column matrices, as numpy does
    let (n, k1) = match a.shape.as_slice() {
        [k] => (1, *k),
        [n, k] => (*n, *k),
        _ => unreachable!(),
    };
    let (k2, m) = match b.shape.as_slice() {
        [k] => (*k, 1),
        [k, m] => (*k, *m),
        _ => unreachable!(),
    };
    if k1 != k2 {
        return Err(TensorError::ShapeMismatch {
            op: BinaryOp::MatMul.name(),
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &a.data[i * k1..(i + 1) * k1];
        let dst = &mut out[i * m..(i + 1) * m];
        for (p, &x) in row.iter().enumerate() {
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &y) in dst.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    let shape = match (a.rank(), b.rank()) {
        (1, 1) => vec![],
        (1, 2) => vec![m],
        (2, 1) => vec![n],
        _ => vec![n, m],
    };
    Tensor::new(shape, out)
}

pub fn apply_binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    match op {
        BinaryOp::Sum => elementwise(op, a, b, |x, y| x + y),
        BinaryOp::Difference => elementwise(op, a, b, |x, y| x - y),
        BinaryOp::Product => elementwise(op, a, b, |x, y| x * y),
        BinaryOp::MatMul => matmul(a, b),
    }
}
