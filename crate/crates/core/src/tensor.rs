//! Dense row-major `f64` tensors and their value-level kernels.
//!
//! Every kernel here is pure: it takes immutable inputs and returns a fresh
//! tensor. The taped versions in [`crate::autodiff`] call into these for the
//! forward pass.

use std::fmt::Write as _;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::numeric::{exact_sum, silu};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Reduction used by [`Tensor::pool_down`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Mean,
    Max,
}

/// How the right operand of a broadcasting binary op lines up with the left.
///
/// Only three layouts exist: identical shapes, a `1 x n` row vector repeated
/// down every row, or an `m x 1` column vector repeated across every column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    Row,
    Column,
}

impl Broadcast {
    pub fn resolve(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Self> {
        if a.shape == b.shape {
            return Ok(Broadcast::Same);
        }
        let mismatch = || Error::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        };
        if a.shape.len() != 2 || b.shape.len() != 2 {
            return Err(mismatch());
        }
        let (m, n) = (a.shape[0], a.shape[1]);
        match (b.shape[0], b.shape[1]) {
            (1, bn) if bn == n => Ok(Broadcast::Row),
            (bm, 1) if bm == m => Ok(Broadcast::Column),
            _ => Err(mismatch()),
        }
    }

    /// Index into the right operand for flat index `idx` of the left one.
    #[inline]
    pub fn index(self, idx: usize, cols: usize) -> usize {
        match self {
            Broadcast::Same => idx,
            Broadcast::Row => idx % cols,
            Broadcast::Column => idx / cols,
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "extents must be positive".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {numel} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; numel]).expect("positive extents")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != n) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(vec![m, n], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape.to_vec(), (0..numel).map(&mut f).collect()).expect("positive extents")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("{op} expects a matrix"),
            }),
        }
    }

    /// `(height, width, channels)` of a rank-3 grid.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [h, w, c] => Ok((*h, *w, *c)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("{op} expects an h x w x c grid"),
            }),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.shape[self.shape.len() - 1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "zip_map",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        self.matmul_with(other, false)
    }

    /// Matrix product whose inner sums are correctly rounded, so the result is
    /// independent of the order of the contracted axis.
    pub fn matmul_exact(&self, other: &Tensor) -> Result<Self> {
        self.matmul_with(other, true)
    }

    fn matmul_with(&self, other: &Tensor, exact: bool) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        if exact {
            let bt = other.transpose()?;
            for i in 0..m {
                let a = &self.data[i * k..(i + 1) * k];
                for j in 0..n {
                    let b = &bt.data[j * k..(j + 1) * k];
                    out[i * n + j] = exact_sum(a.iter().zip(b).map(|(x, y)| x * y));
                }
            }
        } else {
            for i in 0..m {
                let a = &self.data[i * k..(i + 1) * k];
                let c = &mut out[i * n..(i + 1) * n];
                for (p, &av) in a.iter().enumerate() {
                    let b = &other.data[p * n..(p + 1) * n];
                    for (cj, &bv) in c.iter_mut().zip(b) {
                        *cj += av * bv;
                    }
                }
            }
        }
        Self::new(vec![m, n], out)
    }

    /// Matrix product whose contracted axis is split into `segments`: each
    /// segment is summed in order and the segment totals are combined with a
    /// correctly rounded sum. Reordering whole segments (together with the
    /// matching rows of `other`) leaves the result bitwise unchanged.
    pub fn matmul_segmented(&self, other: &Tensor, segments: &[Range<usize>]) -> Result<Self> {
        let (m, k) = self.dims2("matmul_segmented")?;
        let (k2, n) = other.dims2("matmul_segmented")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_segmented",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        check_segments("matmul_segmented", segments, k)?;
        let ns = segments.len();
        let mut out = vec![0.0; m * n];
        let mut partial = vec![0.0; ns * n];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            partial.fill(0.0);
            for (s, seg) in segments.iter().enumerate() {
                let acc = &mut partial[s * n..(s + 1) * n];
                for p in seg.clone() {
                    let b = &other.data[p * n..(p + 1) * n];
                    for (cj, &bv) in acc.iter_mut().zip(b) {
                        *cj += a[p] * bv;
                    }
                }
            }
            for j in 0..n {
                out[i * n + j] = exact_sum((0..ns).map(|s| partial[s * n + j]));
            }
        }
        Self::new(vec![m, n], out)
    }

    /// Row-wise softmax whose normalizer is summed per segment like
    /// [`Tensor::matmul_segmented`].
    pub fn softmax_rows_segmented(&self, segments: &[Range<usize>]) -> Result<Self> {
        let (m, n) = self.dims2("softmax_rows_segmented")?;
        check_segments("softmax_rows_segmented", segments, n)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * n..(i + 1) * n];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
            }
            let z = exact_sum(segments.iter().map(|seg| dst[seg.clone()].iter().sum::<f64>()));
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        Self::new(vec![m, n], out).and_then(|t| t.check_finite("softmax_rows_segmented"))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![n, m], out)
    }

    /// Row-wise softmax with per-row max subtraction. Row normalizers are
    /// correctly rounded sums.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (m, n) = self.dims2("softmax_rows")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * n..(i + 1) * n];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
            }
            let z = exact_sum(dst.iter().copied());
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        Self::new(vec![m, n], out).and_then(|t| t.check_finite("softmax_rows"))
    }

    /// Elementwise product; `other` may be row- or column-broadcast.
    pub fn hadamard(&self, other: &Tensor) -> Result<Self> {
        self.broadcast_binary("hadamard", other, |a, b| a * b)
    }

    /// Elementwise sum; `other` may be row- or column-broadcast.
    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.broadcast_binary("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.broadcast_binary("sub", other, |a, b| a - b)
    }

    fn broadcast_binary(
        &self,
        op: &'static str,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        let mode = Broadcast::resolve(op, self, other)?;
        let cols = *self.shape.last().unwrap();
        let data = match mode {
            Broadcast::Same => self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            Broadcast::Row => self
                .data
                .chunks(cols)
                .flat_map(|row| row.iter().zip(&other.data).map(|(&a, &b)| f(a, b)))
                .collect(),
            Broadcast::Column => self
                .data
                .chunks(cols)
                .zip(&other.data)
                .flat_map(|(row, &b)| row.iter().map(move |&a| (a, b)))
                .map(|(a, b)| f(a, b))
                .collect(),
        };
        Self::new(self.shape.clone(), data)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn silu(&self) -> Self {
        self.map(silu)
    }

    /// 2x2 window reduction of an `h x w x c` grid.
    pub fn pool_down(&self, mode: PoolMode) -> Result<Self> {
        let (h, w, c) = self.dims3("pool_down")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "pool_down needs even height and width".into(),
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; ho * wo * c];
        for i in 0..ho {
            for j in 0..wo {
                for ch in 0..c {
                    let cells = [
                        self.data[((2 * i) * w + 2 * j) * c + ch],
                        self.data[((2 * i) * w + 2 * j + 1) * c + ch],
                        self.data[((2 * i + 1) * w + 2 * j) * c + ch],
                        self.data[((2 * i + 1) * w + 2 * j + 1) * c + ch],
                    ];
                    out[(i * wo + j) * c + ch] = match mode {
                        PoolMode::Mean => (cells[0] + cells[1] + cells[2] + cells[3]) * 0.25,
                        PoolMode::Max => cells.into_iter().fold(f64::NEG_INFINITY, f64::max),
                    };
                }
            }
        }
        Self::new(vec![ho, wo, c], out)
    }

    /// Nearest-neighbour 2x upsampling of an `h x w x c` grid.
    pub fn upsample_nearest(&self) -> Result<Self> {
        let (h, w, c) = self.dims3("upsample_nearest")?;
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; ho * wo * c];
        for i in 0..ho {
            for j in 0..wo {
                let src = ((i / 2) * w + j / 2) * c;
                out[(i * wo + j) * c..(i * wo + j + 1) * c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        Self::new(vec![ho, wo, c], out)
    }

    /// Contiguous column range of a matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let (m, n) = self.dims2("slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::InvalidArgument(format!(
                "column range {start}..{} outside 0..{n}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + start..i * n + start + len]);
        }
        Self::new(vec![m, len], out)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let (_, n) = first.dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (m, pn) = p.dims2("concat_rows")?;
            if pn != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            rows += m;
            data.extend_from_slice(&p.data);
        }
        Self::new(vec![rows, n], data)
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let (m, _) = first.dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = p.dims2("concat_cols")?;
            if pm != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (p, &pn) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[i * pn..(i + 1) * pn]);
            }
        }
        Self::new(vec![m, n], data)
    }

    /// Serializes in the dump format: a `shape:` header line followed by the
    /// row-major values on one line. Values use the shortest representation
    /// that parses back to the same bits.
    pub fn to_dump(&self) -> String {
        let mut s = String::from("shape:");
        for d in &self.shape {
            write!(s, " {d}").unwrap();
        }
        s.push('\n');
        for (i, v) in self.data.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            write!(s, "{v:?}").unwrap();
        }
        s.push('\n');
        s
    }

    /// Parses the dump format. Values may span any number of lines.
    pub fn from_dump(text: &str) -> Result<Self> {
        let mut lines = text.lines().skip_while(|l| l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty tensor dump".into()))?;
        let shape = parse_shape_line(header)?;
        let data = lines
            .flat_map(str::split_whitespace)
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad value {tok:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(shape, data)
    }
}

fn check_segments(op: &'static str, segments: &[Range<usize>], n: usize) -> Result<()> {
    let mut next = 0;
    for seg in segments {
        if seg.start != next || seg.end <= seg.start {
            break;
        }
        next = seg.end;
    }
    if next != n || segments.iter().any(|s| s.end <= s.start) {
        return Err(Error::InvalidArgument(format!(
            "{op}: segments {segments:?} do not tile 0..{n}"
        )));
    }
    Ok(())
}

pub(crate) fn parse_shape_line(line: &str) -> Result<Vec<usize>> {
    let rest = line
        .trim()
        .strip_prefix("shape:")
        .ok_or_else(|| Error::Parse(format!("expected `shape:` header, got {line:?}")))?;
    rest.split_whitespace()
        .map(|d| {
            d.parse::<usize>()
                .map_err(|e| Error::Parse(format!("bad extent {d:?}: {e}")))
        })
        .collect()
}
