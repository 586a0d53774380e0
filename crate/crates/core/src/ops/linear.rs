use crate::error::{Error, Result};
use crate::tensor::{bilinear_resize, gemm, linear_taps, Tensor};

/// Affine map `x[N×D] · weightᵀ[D×K] + bias[K]`.
pub fn affine_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (&[n, d], &[k, d2]) = (x.shape(), weight.shape()) else {
        return Err(Error::dim("affine expects x: N×D and weight: K×D"));
    };
    if d != d2 || bias.shape() != [k] {
        return Err(Error::dim(format!(
            "affine shape mismatch: x {:?}, weight {:?}, bias {:?}",
            x.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out: Vec<f64> = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
    gemm(n, d, k, 1.0, x.data(), (d, 1), weight.data(), (1, d), 1.0, &mut out, k);
    Ok(Tensor::from_parts(vec![n, k], out))
}

/// Returns `(dx, dweight, dbias)`.
pub fn affine_backward(x: &Tensor, weight: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (&[n, d], &[k, _]) = (x.shape(), weight.shape()) else {
        return Err(Error::dim("affine expects x: N×D and weight: K×D"));
    };
    if upstream.shape() != [n, k] {
        return Err(Error::dim("affine upstream shape mismatch"));
    }
    let mut dx = vec![0.0; n * d];
    gemm(n, k, d, 1.0, upstream.data(), (k, 1), weight.data(), (d, 1), 0.0, &mut dx, d);
    let mut dw = vec![0.0; k * d];
    gemm(k, n, d, 1.0, upstream.data(), (1, k), x.data(), (d, 1), 0.0, &mut dw, d);
    let mut db = vec![0.0; k];
    for row in upstream.data().chunks_exact(k) {
        for (a, g) in db.iter_mut().zip(row) {
            *a += g;
        }
    }
    Ok((
        Tensor::from_parts(vec![n, d], dx),
        Tensor::from_parts(vec![k, d], dw),
        Tensor::from_parts(vec![k], db),
    ))
}

/// Re-export so the tape can treat resizing like any other layer.
pub fn resize_forward(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    bilinear_resize(x, out_h, out_w)
}

/// Adjoint of [`bilinear_resize`]: scatters every output gradient back onto
/// the four input pixels it was interpolated from.
pub fn resize_backward(upstream: &Tensor, in_h: usize, in_w: usize) -> Result<Tensor> {
    let (planes, out_h, out_w) = upstream.planes_hw()?;
    let mut shape = upstream.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = in_h;
    shape[r - 1] = in_w;
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(upstream.clone());
    }
    let ty = linear_taps(in_h, out_h);
    let tx = linear_taps(in_w, out_w);
    let mut dx = vec![0.0; planes * in_h * in_w];
    for p in 0..planes {
        let g = &upstream.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
        let d = &mut dx[p * in_h * in_w..(p + 1) * in_h * in_w];
        for (oy, ty) in ty.iter().enumerate() {
            for (ox, tx) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                let (wy0, wy1) = (1.0 - ty.frac, ty.frac);
                let (wx0, wx1) = (1.0 - tx.frac, tx.frac);
                d[ty.lo * in_w + tx.lo] += v * wy0 * wx0;
                d[ty.lo * in_w + tx.hi] += v * wy0 * wx1;
                d[ty.hi * in_w + tx.lo] += v * wy1 * wx0;
                d[ty.hi * in_w + tx.hi] += v * wy1 * wx1;
            }
        }
    }
    Ok(Tensor::from_parts(shape, dx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::from_fn(&[5, 4], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(&[5], |_| rng.gen_range(-1.0..1.0));
        let y = affine_forward(&x, &w, &b).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let e: f64 = b.data()[j] + (0..4).map(|t| x.data()[i * 4 + t] * w.data()[j * 4 + t]).sum::<f64>();
                assert!((y.data()[i * 5 + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_backward_is_adjoint() {
        // <resize(x), g> == <x, resize_backward(g)>
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (h, w, oh, ow) in [(2, 1, 16, 6), (3, 5, 7, 2), (4, 4, 4, 9), (6, 3, 1, 1)] {
            let x = Tensor::from_fn(&[2, h, w], |_| rng.gen_range(-1.0..1.0));
            let g = Tensor::from_fn(&[2, oh, ow], |_| rng.gen_range(-1.0..1.0));
            let y = resize_forward(&x, oh, ow).unwrap();
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let dx = resize_backward(&g, h, w).unwrap();
            let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
