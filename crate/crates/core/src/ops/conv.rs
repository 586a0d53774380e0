//! 2D cross-correlation with stride, dilation and symmetric zero padding,
//! lowered to im2col + GEMM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            stride,
            dilation,
            padding,
        }
    }

    /// "Same" padding for an odd kernel: output extent is `ceil(in / stride)`.
    pub fn same(kernel: usize, stride: usize, dilation: usize) -> Self {
        Self::new(stride, dilation, dilation * (kernel - 1) / 2)
    }

    /// `floor((len + 2·padding − dilation·(k−1) − 1) / stride) + 1`, or `None`
    /// when the dilated kernel does not fit.
    pub fn output_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        if self.stride == 0 || self.dilation == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// A convolution with its parameters held by value.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[out_ch × in_ch × kh × kw]`
    pub weight: Tensor,
    /// `[out_ch]`
    pub bias: Tensor,
    pub geometry: ConvGeometry,
}

impl ConvLayer {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_forward(x, &self.weight, &self.bias, self.geometry)
    }

    pub fn backward(&self, x: &Tensor, upstream: &Tensor) -> Result<ConvGrads> {
        conv2d_backward(x, &self.weight, self.geometry, upstream)
    }
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

struct Dims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn dims(x: &Tensor, weight: &Tensor, g: ConvGeometry) -> Result<Dims> {
    let [n, cin, h, w] = *x.shape() else {
        return Err(Error::dim(format!("conv2d input must be N×C×H×W, got {:?}", x.shape())));
    };
    let [cout, wcin, kh, kw] = *weight.shape() else {
        return Err(Error::dim(format!("conv2d weight must be rank 4, got {:?}", weight.shape())));
    };
    if wcin != cin {
        return Err(Error::dim(format!(
            "conv2d channel mismatch: input has {cin}, weight expects {wcin}"
        )));
    }
    let (Some(ho), Some(wo)) = (g.output_len(h, kh), g.output_len(w, kw)) else {
        return Err(Error::dim(format!(
            "conv2d output would be empty for {h}×{w} input, {kh}×{kw} kernel, {g:?}"
        )));
    };
    Ok(Dims {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        ho,
        wo,
    })
}

fn im2col(x: &[f64], d: &Dims, g: ConvGeometry, cols: &mut [f64]) {
    let hw_out = d.ho * d.wo;
    for c in 0..d.cin {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = ((c * d.kh + ky) * d.kw + kx) * hw_out;
                let dst = &mut cols[row..row + hw_out];
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= d.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &Dims, g: ConvGeometry, x: &mut [f64]) {
    let hw_out = d.ho * d.wo;
    for c in 0..d.cin {
        let plane = &mut x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = ((c * d.kh + ky) * d.kw + kx) * hw_out;
                let src = &cols[row..row + hw_out];
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.wo {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    geometry: ConvGeometry,
) -> Result<Tensor> {
    let d = dims(x, weight, geometry)?;
    if bias.shape() != [d.cout] {
        return Err(Error::dim(format!(
            "conv2d bias must be [{}], got {:?}",
            d.cout,
            bias.shape()
        )));
    }
    let ckk = d.cin * d.kh * d.kw;
    let hw_out = d.ho * d.wo;
    let mut cols = vec![0.0; ckk * hw_out];
    let mut out = vec![0.0; d.n * d.cout * hw_out];
    for b in 0..d.n {
        let xb = &x.data()[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w];
        im2col(xb, &d, geometry, &mut cols);
        let ob = &mut out[b * d.cout * hw_out..(b + 1) * d.cout * hw_out];
        for (o, &bv) in bias.data().iter().enumerate() {
            ob[o * hw_out..(o + 1) * hw_out].fill(bv);
        }
        gemm(
            d.cout,
            ckk,
            hw_out,
            1.0,
            weight.data(),
            (ckk, 1),
            &cols,
            (hw_out, 1),
            1.0,
            ob,
            hw_out,
        );
    }
    Ok(Tensor::from_parts(vec![d.n, d.cout, d.ho, d.wo], out))
}

pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    geometry: ConvGeometry,
    upstream: &Tensor,
) -> Result<ConvGrads> {
    let d = dims(x, weight, geometry)?;
    if upstream.shape() != [d.n, d.cout, d.ho, d.wo] {
        return Err(Error::dim(format!(
            "conv2d upstream gradient {:?} does not match output [{}, {}, {}, {}]",
            upstream.shape(),
            d.n,
            d.cout,
            d.ho,
            d.wo
        )));
    }
    let ckk = d.cin * d.kh * d.kw;
    let hw_out = d.ho * d.wo;
    let in_len = d.cin * d.h * d.w;
    let mut cols = vec![0.0; ckk * hw_out];
    let mut dcols = vec![0.0; ckk * hw_out];
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; d.cout];
    for b in 0..d.n {
        let gb = &upstream.data()[b * d.cout * hw_out..(b + 1) * d.cout * hw_out];
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += gb[o * hw_out..(o + 1) * hw_out].iter().sum::<f64>();
        }
        im2col(&x.data()[b * in_len..(b + 1) * in_len], &d, geometry, &mut cols);
        // dW += dOut · colsᵀ
        gemm(d.cout, hw_out, ckk, 1.0, gb, (hw_out, 1), &cols, (1, hw_out), 1.0, &mut dw, ckk);
        // dCols = Wᵀ · dOut
        gemm(ckk, d.cout, hw_out, 1.0, weight.data(), (1, ckk), gb, (hw_out, 1), 0.0, &mut dcols, hw_out);
        col2im(&dcols, &d, geometry, &mut dx[b * in_len..(b + 1) * in_len]);
    }
    Ok(ConvGrads {
        input: Tensor::from_parts(x.shape().to_vec(), dx),
        weight: Tensor::from_parts(weight.shape().to_vec(), dw),
        bias: Tensor::from_parts(vec![d.cout], db),
    })
}

/// Expands a `k×k` kernel used at dilation `d` into the equivalent dense
/// kernel of size `d·(k−1)+1` (zeros between taps).
pub fn zero_inflate_kernel(weight: &Tensor, dilation: usize) -> Result<Tensor> {
    let [co, ci, kh, kw] = *weight.shape() else {
        return Err(Error::dim("kernel must be rank 4"));
    };
    let (eh, ew) = (dilation * (kh - 1) + 1, dilation * (kw - 1) + 1);
    let mut out = vec![0.0; co * ci * eh * ew];
    for p in 0..co * ci {
        for ky in 0..kh {
            for kx in 0..kw {
                out[p * eh * ew + ky * dilation * ew + kx * dilation] =
                    weight.data()[p * kh * kw + ky * kw + kx];
            }
        }
    }
    Ok(Tensor::from_parts(vec![co, ci, eh, ew], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop cross-correlation.
    fn naive(x: &Tensor, w: &Tensor, b: &Tensor, g: ConvGeometry) -> Tensor {
        let [n, cin, h, wd] = *x.shape() else { unreachable!() };
        let [cout, _, kh, kw] = *w.shape() else { unreachable!() };
        let ho = g.output_len(h, kh).unwrap();
        let wo = g.output_len(wd, kw).unwrap();
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        for bi in 0..n {
            for o in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[o];
                        for c in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((bi * cin + c) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * cin + c) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((bi * cout + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_t(&[2, 1, 4, 5], &mut rng);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), ConvGeometry::new(1, 1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        let c = 0.5;
        let x = Tensor::full(&[1, 1, 4, 4], c);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), ConvGeometry::new(1, 1, 1)).unwrap();
        let at = |r: usize, q: usize| y.data()[r * 4 + q];
        assert_eq!(at(1, 1), 9.0 * c);
        assert_eq!(at(2, 2), 9.0 * c);
        assert_eq!(at(0, 0), 4.0 * c);
        assert_eq!(at(3, 3), 4.0 * c);
        assert_eq!(at(0, 1), 6.0 * c);
    }

    #[test]
    fn dilation_moves_impulse_taps() {
        let mut x = Tensor::zeros(&[1, 1, 9, 9]);
        x.data_mut()[4 * 9 + 4] = 1.0;
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        for d in [1, 2] {
            let g = ConvGeometry::same(3, 1, d);
            let y = conv2d_forward(&x, &w, &b, g).unwrap();
            assert_eq!(y, naive(&x, &w, &b, g));
            let nz: Vec<(usize, usize)> = (0..81)
                .filter(|&i| y.data()[i] != 0.0)
                .map(|i| (i / 9, i % 9))
                .collect();
            let expect: Vec<(usize, usize)> = [4 - d, 4, 4 + d]
                .iter()
                .flat_map(|&r| [4 - d, 4, 4 + d].map(move |q| (r, q)))
                .collect();
            assert_eq!(nz, expect);
        }
    }

    #[test]
    fn matches_naive_over_geometry_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for stride in [1, 2] {
            for dilation in [1, 2, 3, 6] {
                for padding in [0, 1, 2] {
                    let x = rand_t(&[2, 3, 14, 15], &mut rng);
                    let w = rand_t(&[4, 3, 3, 3], &mut rng);
                    let b = rand_t(&[4], &mut rng);
                    let g = ConvGeometry::new(stride, dilation, padding);
                    let y = conv2d_forward(&x, &w, &b, g).unwrap();
                    assert!(y.max_abs_diff(&naive(&x, &w, &b, g)) < 1e-12, "{g:?}");
                }
            }
        }
    }

    #[test]
    fn dilated_equals_zero_inflated() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for d in [2, 3, 6] {
            let x = rand_t(&[1, 2, 16, 13], &mut rng);
            let w = rand_t(&[3, 2, 3, 3], &mut rng);
            let b = rand_t(&[3], &mut rng);
            let dilated = conv2d_forward(&x, &w, &b, ConvGeometry::new(1, d, d)).unwrap();
            let big = zero_inflate_kernel(&w, d).unwrap();
            let dense = conv2d_forward(&x, &big, &b, ConvGeometry::new(1, 1, d)).unwrap();
            assert!(dilated.max_abs_diff(&dense) < 1e-12);
        }
    }

    #[test]
    fn backward_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_t(&[2, 3, 5, 5], &mut rng);
        let w = rand_t(&[4, 3, 3, 3], &mut rng);
        let g = ConvGeometry::new(1, 1, 1);
        let zero = conv2d_backward(&x, &w, g, &Tensor::zeros(&[2, 4, 5, 5])).unwrap();
        assert!(zero.input.data().iter().chain(zero.weight.data()).chain(zero.bias.data()).all(|&v| v == 0.0));
        let up = rand_t(&[2, 4, 5, 5], &mut rng);
        let grads = conv2d_backward(&x, &w, g, &up).unwrap();
        for o in 0..4 {
            let s: f64 = (0..2)
                .flat_map(|b| up.data()[(b * 4 + o) * 25..(b * 4 + o + 1) * 25].iter())
                .sum();
            assert!((grads.bias.data()[o] - s).abs() < 1e-12);
        }
        assert!(conv2d_backward(&x, &w, g, &Tensor::zeros(&[2, 4, 4, 4])).is_err());
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(conv2d_forward(&x, &w, &Tensor::zeros(&[1]), ConvGeometry::new(1, 1, 1)).is_err());
        let w = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(conv2d_forward(&x, &w, &Tensor::zeros(&[1]), ConvGeometry::new(1, 2, 0)).is_err());
    }
}
