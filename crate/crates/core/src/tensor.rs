//! Dense row-major tensors and the handful of numeric kernels the rest of
//! the crate is built on.
//!
//! Shapes follow the NCHW convention: a rank-4 tensor is
//! `batch × channel × height × width`, a rank-3 tensor drops the batch axis.
//! Every tensor holds `f64` values; finiteness is checked at construction.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    /// Builds a tensor, rejecting inconsistent shapes and non-finite values.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::dim(format!("rank must be 1..=4, got {}", shape.len())));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "Tensor::new".into(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for kernels whose outputs are finite by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.is_empty() || shape.len() > 4 {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.into(),
            })
        }
    }

    /// Sub-tensor at `index` along the leading axis.
    pub fn slice0(&self, index: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        let start = index * inner.max(1);
        let len = inner.max(1);
        Tensor::from_parts(shape, self.data[start..start + len].to_vec())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::dim("cannot stack zero tensors"))?;
        if first.rank() >= 4 {
            return Err(Error::dim("stack would exceed rank 4"));
        }
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::dim(format!(
                    "stack shape mismatch: {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Splits a rank-3 or rank-4 shape into `(planes, height, width)`.
    pub(crate) fn planes_hw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [c, h, w] => Ok((*c, *h, *w)),
            [n, c, h, w] => Ok((n * c, *h, *w)),
            s => Err(Error::dim(format!("expected rank 3 or 4, got {s:?}"))),
        }
    }
}

/// `a[M×K] · b[K×N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = match a.shape() {
        [m, k] => (*m, *k),
        s => return Err(Error::dim(format!("matmul lhs must be rank 2, got {s:?}"))),
    };
    let (k2, n) = match b.shape() {
        [k2, n] => (*k2, *n),
        s => return Err(Error::dim(format!("matmul rhs must be rank 2, got {s:?}"))),
    };
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner extents disagree: {m}×{k} · {k2}×{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut out, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `c ← alpha·a·b + beta·c` with explicit (row, col) strides for `a` and `b`
/// and a row-major `c` of leading dimension `ldc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= (m - 1) * ldc + n);
    // SAFETY: the slices cover every index reachable through the given
    // extents and strides; callers pass shapes taken from the same buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Spatial ℓ1 normalization of every channel of a `[R×H×W]` (or
/// `[N×R×H×W]`) non-negative map. A channel with zero mass becomes the
/// uniform distribution `1/(H·W)`.
pub fn l1_normalize_spatial(maps: &Tensor) -> Result<Tensor> {
    let (planes, h, w) = maps.planes_hw()?;
    if maps.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Domain(
            "l1_normalize_spatial requires non-negative entries".into(),
        ));
    }
    let hw = h * w;
    let mut out = maps.data().to_vec();
    for p in 0..planes {
        let chan = &mut out[p * hw..(p + 1) * hw];
        let mass: f64 = chan.iter().sum();
        if mass > 0.0 {
            chan.iter_mut().for_each(|v| *v /= mass);
        } else {
            chan.fill(1.0 / hw as f64);
        }
    }
    Ok(Tensor::from_parts(maps.shape().to_vec(), out))
}

/// Result of [`l2_normalize`]: the normalized values and whether the input
/// was the zero vector (in which case the output is zero too).
#[derive(Debug, Clone, PartialEq)]
pub struct L2Normalized {
    pub values: Vec<f64>,
    pub zero_input: bool,
}

pub fn l2_normalize(v: &[f64]) -> Result<L2Normalized> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "l2_normalize".into(),
        });
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(L2Normalized {
            values: vec![0.0; v.len()],
            zero_input: true,
        });
    }
    Ok(L2Normalized {
        values: v.iter().map(|x| x / norm).collect(),
        zero_input: false,
    })
}

/// One output sample of align-corners linear interpolation along an axis:
/// `out = (1 - frac)·in[lo] + frac·in[hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Align-corners sampling positions: output index `i` reads input coordinate
/// `i·(in_len−1)/(out_len−1)`; a length-1 output reads coordinate 0.
pub(crate) fn linear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    (0..out_len)
        .map(|i| {
            if in_len == 1 || out_len == 1 {
                return Tap {
                    lo: 0,
                    hi: 0,
                    frac: 0.0,
                };
            }
            let src = i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize of every `H×W` plane of a rank-3 or rank-4 tensor with
/// the align-corners convention. Same-size resizes return an exact copy.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("bilinear_resize target must be at least 1×1"));
    }
    let (planes, h, w) = x.planes_hw()?;
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut out = vec![0.0; planes * out_h * out_w];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, ty) in ty.iter().enumerate() {
            let r0 = &src[ty.lo * w..(ty.lo + 1) * w];
            let r1 = &src[ty.hi * w..(ty.hi + 1) * w];
            for (ox, tx) in tx.iter().enumerate() {
                let top = r0[tx.lo] * (1.0 - tx.frac) + r0[tx.hi] * tx.frac;
                let bot = r1[tx.lo] * (1.0 - tx.frac) + r1[tx.hi] * tx.frac;
                dst[oy * out_w + ox] = top * (1.0 - ty.frac) + bot * ty.frac;
            }
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Softmax over the channel axis at every pixel of a `[K×H×W]` or
/// `[N×K×H×W]` tensor, with max-subtraction.
pub fn channel_softmax(logits: &Tensor) -> Result<Tensor> {
    let (n, k, hw) = match logits.shape() {
        [k, h, w] => (1, *k, h * w),
        [n, k, h, w] => (*n, *k, h * w),
        s => return Err(Error::dim(format!("channel_softmax expects rank 3 or 4, got {s:?}"))),
    };
    let src = logits.data();
    let mut out = vec![0.0; src.len()];
    for b in 0..n {
        let base = b * k * hw;
        for p in 0..hw {
            let at = |c: usize| base + c * hw + p;
            let max = (0..k).map(|c| src[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..k {
                let e = (src[at(c)] - max).exp();
                out[at(c)] = e;
                z += e;
            }
            for c in 0..k {
                out[at(c)] /= z;
            }
        }
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}
