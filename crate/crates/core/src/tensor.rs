//! Dense row-major tensors and the plain (unrecorded) kernels.
//!
//! Tensors are immutable once built; clones share storage. The kernels here
//! are the forward implementations reused by the tape ops, the fixed
//! encoder, and evaluation-side plumbing. Every kernel that can produce a
//! non-finite value is checked at the tape layer before the result is
//! admitted into a computation.

use std::sync::Arc;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {details}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        details: String,
    },
    #[error("data length {got} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: zero-norm row {row}")]
    ZeroNormRow { op: &'static str, row: usize },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: mask entry {value} is not binary")]
    NonBinaryMask { op: &'static str, value: f64 },
    #[error("{op}: mask has no selected entries")]
    EmptyMask { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense N-dimensional array, row-major, with shared immutable storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<[S]>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape,
            data: data.into(),
        })
    }

    pub fn filled(shape: impl Into<Vec<usize>>, v: S) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![v; n].into(),
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, S::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, S::one())
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(v: S) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v].into(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.data.to_vec()
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() requires exactly one element");
        self.data[0]
    }

    /// Same storage under a new shape with equal element count.
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != self.numel() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape,
                details: format!("element count {} differs from {}", expected, self.numel()),
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn validate_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Value at a full multi-index (row-major).
    pub fn at(&self, idx: &[usize]) -> S {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &ex)) in idx.iter().zip(self.shape.iter()).enumerate() {
            debug_assert!(ix < ex, "index {ix} out of bound {ex} at axis {i}");
            flat = flat * ex + ix;
        }
        self.data[flat]
    }

    /// 2-D accessor.
    pub fn at2(&self, r: usize, c: usize) -> S {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// 3-D accessor ([channel, row, col]).
    pub fn at3(&self, c: usize, y: usize, x: usize) -> S {
        debug_assert_eq!(self.rank(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn max_abs(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    /// Elementwise conversion to another scalar type (via f64).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| T::from_f64(v.into_f64()))
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Plain kernels
// ---------------------------------------------------------------------------

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn sub<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    a.zip_map(b, "sub", |x, y| x - y)
}

pub fn hadamard<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    a.zip_map(b, "hadamard", |x, y| x * y)
}

pub fn scale<S: Scalar>(a: &Tensor<S>, k: S) -> Tensor<S> {
    a.map(|v| v * k)
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![S::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

pub fn transpose2<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rank() != 2 {
        return Err(TensorError::InvalidShape {
            op: "transpose",
            shape: a.shape().to_vec(),
            details: "expected rank 2".into(),
        });
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let ad = a.data();
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::from_vec(vec![n, m], out)
}

fn concat_extents(shapes: &[&[usize]], axis: usize) -> Result<Vec<usize>> {
    let first = shapes[0];
    if axis >= first.len() {
        return Err(TensorError::AxisOutOfRange {
            op: "concat",
            axis,
            shape: first.to_vec(),
        });
    }
    let mut out = first.to_vec();
    for s in &shapes[1..] {
        if s.len() != first.len()
            || s.iter()
                .zip(first.iter())
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.to_vec(),
                rhs: s.to_vec(),
            });
        }
        out[axis] += s[axis];
    }
    Ok(out)
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<S: Scalar>(parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let shapes: Vec<&[usize]> = parts.iter().map(|t| t.shape()).collect();
    let out_shape = concat_extents(&shapes, axis)?;
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let total: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(total);
    for o in 0..outer {
        for part in parts {
            let ext = part.shape()[axis];
            let chunk = ext * inner;
            let start = o * chunk;
            out.extend_from_slice(&part.data()[start..start + chunk]);
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Contiguous slab `[start, start+len)` along `axis`.
pub fn slice_axis<S: Scalar>(
    t: &Tensor<S>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<S>> {
    if axis >= t.rank() || start + len > t.shape()[axis] {
        return Err(TensorError::AxisOutOfRange {
            op: "slice_axis",
            axis,
            shape: t.shape().to_vec(),
        });
    }
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let ext = t.shape()[axis];
    let mut out_shape = t.shape().to_vec();
    out_shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * ext + start) * inner;
        out.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    Tensor::from_vec(out_shape, out)
}

/// Max-subtracted softmax along `axis` of a rank-1 or rank-2 tensor.
pub fn softmax_axis<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    let (slices, stride, count) = softmax_layout(x, axis)?;
    let xd = x.data();
    let mut out = vec![S::zero(); xd.len()];
    for s in 0..slices {
        let base = slice_base(x, axis, s);
        let mut mx = S::neg_infinity();
        for i in 0..count {
            let v = xd[base + i * stride];
            if v > mx {
                mx = v;
            }
        }
        let mut denom = S::zero();
        for i in 0..count {
            let e = (xd[base + i * stride] - mx).exp();
            out[base + i * stride] = e;
            denom += e;
        }
        for i in 0..count {
            out[base + i * stride] = out[base + i * stride] / denom;
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

pub(crate) fn softmax_layout<S: Scalar>(
    x: &Tensor<S>,
    axis: usize,
) -> Result<(usize, usize, usize)> {
    match (x.rank(), axis) {
        (1, 0) => Ok((1, 1, x.numel())),
        (2, 0) => Ok((x.shape()[1], x.shape()[1], x.shape()[0])),
        (2, 1) => Ok((x.shape()[0], 1, x.shape()[1])),
        _ => Err(TensorError::AxisOutOfRange {
            op: "softmax",
            axis,
            shape: x.shape().to_vec(),
        }),
    }
}

pub(crate) fn slice_base<S: Scalar>(x: &Tensor<S>, axis: usize, slice: usize) -> usize {
    match (x.rank(), axis) {
        (1, 0) => 0,
        (2, 0) => slice,
        (2, 1) => slice * x.shape()[1],
        _ => unreachable!("softmax_layout validated the axis"),
    }
}

/// Bilinear resize of `[c×h×w]` to `[c×h2×w2]`, half-pixel convention.
pub fn bilinear_resize3<S: Scalar>(x: &Tensor<S>, h2: usize, w2: usize) -> Result<Tensor<S>> {
    if x.rank() != 3 {
        return Err(TensorError::InvalidShape {
            op: "bilinear_resize",
            shape: x.shape().to_vec(),
            details: "expected [c, h, w]".into(),
        });
    }
    if h2 == 0 || w2 == 0 {
        return Err(TensorError::InvalidShape {
            op: "bilinear_resize",
            shape: vec![x.shape()[0], h2, w2],
            details: "target extents must be positive".into(),
        });
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let rows = resize_taps(h, h2);
    let cols = resize_taps(w, w2);
    let xd = x.data();
    let mut out = vec![S::zero(); c * h2 * w2];
    for ch in 0..c {
        let src = &xd[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h2 * w2..(ch + 1) * h2 * w2];
        for (i, &(i0, i1, di)) in rows.iter().enumerate() {
            let wi0 = S::from_f64(1.0 - di);
            let wi1 = S::from_f64(di);
            for (j, &(j0, j1, dj)) in cols.iter().enumerate() {
                let wj0 = S::from_f64(1.0 - dj);
                let wj1 = S::from_f64(dj);
                dst[i * w2 + j] = wi0 * wj0 * src[i0 * w + j0]
                    + wi0 * wj1 * src[i0 * w + j1]
                    + wi1 * wj0 * src[i1 * w + j0]
                    + wi1 * wj1 * src[i1 * w + j1];
            }
        }
    }
    Tensor::from_vec(vec![c, h2, w2], out)
}

/// Source taps (lo, hi, frac) for each target index, half-pixel convention.
pub(crate) fn resize_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
            let pos = pos.clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// 2×2 average pooling of `[c×h×w]`; extents must be even.
pub fn avgpool2<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.rank() != 3 || x.shape()[1] % 2 != 0 || x.shape()[2] % 2 != 0 {
        return Err(TensorError::InvalidShape {
            op: "avgpool2",
            shape: x.shape().to_vec(),
            details: "expected [c, even h, even w]".into(),
        });
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (h2, w2) = (h / 2, w / 2);
    let quarter = S::from_f64(0.25);
    let xd = x.data();
    let mut out = vec![S::zero(); c * h2 * w2];
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                let base = (ch * h + 2 * i) * w + 2 * j;
                out[(ch * h2 + i) * w2 + j] =
                    (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]) * quarter;
            }
        }
    }
    Tensor::from_vec(vec![c, h2, w2], out)
}

/// 2-D convolution, zero padding, square kernel. `x: [ci×h×w]`,
/// `weight: [co×ci×k×k]`, `bias: [co]`.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    if x.rank() != 3 || weight.rank() != 4 || weight.shape()[1] != x.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (weight.shape()[0], weight.shape()[2]);
    let h2 = (h + 2 * pad - k) / stride + 1;
    let w2 = (w + 2 * pad - k) / stride + 1;
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    let mut out = vec![S::zero(); co * h2 * w2];
    for oc in 0..co {
        for oy in 0..h2 {
            for ox in 0..w2 {
                let mut acc = bd[oc];
                for ic in 0..ci {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            acc += xd[(ic * h + iy as usize) * w + ix as usize]
                                * wd[((oc * ci + ic) * k + ky) * k + kx];
                        }
                    }
                }
                out[(oc * h2 + oy) * w2 + ox] = acc;
            }
        }
    }
    Tensor::from_vec(vec![co, h2, w2], out)
}

/// Nearest-neighbor mask resize with a `> 0` threshold; stays binary.
pub fn nn_resize_mask<S: Scalar>(mask: &Tensor<S>, h2: usize, w2: usize) -> Result<Tensor<S>> {
    if mask.rank() != 2 {
        return Err(TensorError::InvalidShape {
            op: "nn_resize_mask",
            shape: mask.shape().to_vec(),
            details: "expected [h, w]".into(),
        });
    }
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let pick = |src: usize, dst: usize, i: usize| -> usize {
        let pos = (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
        (pos.round().max(0.0) as usize).min(src - 1)
    };
    let mut out = vec![S::zero(); h2 * w2];
    for i in 0..h2 {
        let sy = pick(h, h2, i);
        for j in 0..w2 {
            let sx = pick(w, w2, j);
            out[i * w2 + j] = if mask.at2(sy, sx) > S::zero() {
                S::one()
            } else {
                S::zero()
            };
        }
    }
    Tensor::from_vec(vec![h2, w2], out)
}

/// Exact block-mean downsample of `[h×w]`; extents must divide evenly.
pub fn area_downsample<S: Scalar>(x: &Tensor<S>, h2: usize, w2: usize) -> Result<Tensor<S>> {
    if x.rank() != 2 || x.shape()[0] % h2 != 0 || x.shape()[1] % w2 != 0 {
        return Err(TensorError::InvalidShape {
            op: "area_downsample",
            shape: x.shape().to_vec(),
            details: format!("extents must divide evenly into ({h2}, {w2})"),
        });
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let (by, bx) = (h / h2, w / w2);
    let inv = S::from_f64(1.0 / (by * bx) as f64);
    let mut out = vec![S::zero(); h2 * w2];
    for i in 0..h2 {
        for j in 0..w2 {
            let mut acc = S::zero();
            for y in 0..by {
                for x2 in 0..bx {
                    acc += x.at2(i * by + y, j * bx + x2);
                }
            }
            out[i * w2 + j] = acc * inv;
        }
    }
    Tensor::from_vec(vec![h2, w2], out)
}

/// `[c×h×w]` → `[hw×c]` token layout.
pub fn chw_to_tokens<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.rank() != 3 {
        return Err(TensorError::InvalidShape {
            op: "chw_to_tokens",
            shape: x.shape().to_vec(),
            details: "expected [c, h, w]".into(),
        });
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    transpose2(&x.reshaped(vec![c, h * w])?)?.reshaped(vec![h * w, c])
}

/// `[hw×c]` → `[c×h×w]`.
pub fn tokens_to_chw<S: Scalar>(x: &Tensor<S>, h: usize, w: usize) -> Result<Tensor<S>> {
    if x.rank() != 2 || x.shape()[0] != h * w {
        return Err(TensorError::InvalidShape {
            op: "tokens_to_chw",
            shape: x.shape().to_vec(),
            details: format!("expected [{}x{} tokens, c]", h, w),
        });
    }
    transpose2(x)?.reshaped(vec![x.shape()[1], h, w])
}

/// Tile a `[h×w]` map across `c` channels.
pub fn tile_channels<S: Scalar>(m: &Tensor<S>, c: usize) -> Result<Tensor<S>> {
    if m.rank() != 2 {
        return Err(TensorError::InvalidShape {
            op: "tile_channels",
            shape: m.shape().to_vec(),
            details: "expected [h, w]".into(),
        });
    }
    let hw = m.numel();
    let mut out = Vec::with_capacity(c * hw);
    for _ in 0..c {
        out.extend_from_slice(m.data());
    }
    Tensor::from_vec(vec![c, m.shape()[0], m.shape()[1]], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        let err = Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { expected: 6, .. }));
    }

    #[test]
    fn reshape_roundtrip_preserves_data() {
        let t = Tensor::<f64>::from_vec(vec![2, 6], (0..12).map(|v| v as f64).collect()).unwrap();
        let r = t.reshaped(vec![3, 4]).unwrap().reshaped(vec![2, 6]).unwrap();
        assert_eq!(t, r);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let a = Tensor::<f64>::from_vec(vec![3, 4], (0..12).map(|_| next()).collect()).unwrap();
        let b = Tensor::<f64>::from_vec(vec![4, 2], (0..8).map(|_| next()).collect()).unwrap();
        let got = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut want = 0.0;
                for k in 0..4 {
                    want += a.at2(i, k) * b.at2(k, j);
                }
                assert!((got.at2(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_identity_and_annihilation() {
        let b = Tensor::<f64>::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let id = Tensor::<f64>::from_vec(vec![2, 2], vec![1., 0., 0., 1.]).unwrap();
        assert_eq!(matmul(&id, &b).unwrap(), b);
        let z = Tensor::<f64>::zeros(vec![3, 2]);
        assert_eq!(matmul(&b, &z).unwrap(), Tensor::<f64>::zeros(vec![2, 2]));
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn concat_axis1_keeps_order() {
        let a = Tensor::<f64>::from_vec(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let b =
            Tensor::<f64>::from_vec(vec![2, 5], (10..20).map(|v| v as f64).collect()).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 8]);
        // index-by-index oracle
        for i in 0..2 {
            for j in 0..8 {
                let want = if j < 3 { a.at2(i, j) } else { b.at2(i, j - 3) };
                assert_eq!(c.at2(i, j), want);
            }
        }
    }

    #[test]
    fn softmax_axis_columns_sum_to_one() {
        let x = Tensor::<f64>::from_vec(vec![3, 2], vec![0.3, -1.0, 2.0, 0.7, -0.2, 1.4]).unwrap();
        let y = softmax_axis(&x, 0).unwrap();
        for j in 0..2 {
            let s: f64 = (0..3).map(|i| y.at2(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_identity_and_ramp() {
        let x = Tensor::<f64>::from_vec(vec![1, 4, 4], (0..16).map(|v| v as f64).collect())
            .unwrap();
        assert_eq!(bilinear_resize3(&x, 4, 4).unwrap(), x);
        // half-pixel hand evaluation of the 4x4 ramp at 2x2
        let y = bilinear_resize3(&x, 2, 2).unwrap();
        assert_eq!(y.to_vec(), vec![2.5, 4.5, 10.5, 12.5]);
        // constants survive any resize
        let c = Tensor::<f64>::filled(vec![2, 4, 4], 3.25);
        let r = bilinear_resize3(&c, 7, 3).unwrap();
        assert!(r.data().iter().all(|&v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn tokens_roundtrip() {
        let x = Tensor::<f64>::from_vec(vec![2, 2, 3], (0..12).map(|v| v as f64).collect())
            .unwrap();
        let t = chw_to_tokens(&x).unwrap();
        assert_eq!(t.shape(), &[6, 2]);
        assert_eq!(t.at2(1, 0), x.at3(0, 0, 1));
        assert_eq!(t.at2(1, 1), x.at3(1, 0, 1));
        let back = tokens_to_chw(&t, 2, 3).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let x = Tensor::<f64>::from_vec(vec![2, 4], vec![1., 0., 1., 1., 0., 0., 1., 0.]).unwrap();
        let y = area_downsample(&x, 1, 2).unwrap();
        assert_eq!(y.to_vec(), vec![0.25, 0.75]);
    }
}
