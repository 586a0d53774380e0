use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel spatial mean: `[N×C×H×W] → [N×C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = *x.shape() else {
        return Err(Error::dim(format!("global_avg_pool expects N×C×H×W, got {:?}", x.shape())));
    };
    let hw = h * w;
    let out = x.data().chunks_exact(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub fn global_avg_pool_backward(upstream: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [n, c] = *upstream.shape() else {
        return Err(Error::dim("global_avg_pool upstream must be N×C"));
    };
    let hw = h * w;
    let inv = 1.0 / hw as f64;
    let mut out = Vec::with_capacity(n * c * hw);
    for &g in upstream.data() {
        out.extend(std::iter::repeat(g * inv).take(hw));
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PoolGeometry {
    pub kernel: usize,
    pub stride: usize,
    /// Implicit padding that never wins the max.
    pub padding: usize,
}

impl PoolGeometry {
    pub fn output_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        if self.stride == 0 || self.kernel == 0 || padded < self.kernel || self.padding >= self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

/// Windowed maximum. Returns the output and, for every output element, the
/// flat input index that produced it (first maximum in row-major scan order).
pub fn max_pool2d(x: &Tensor, g: PoolGeometry) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = *x.shape() else {
        return Err(Error::dim(format!("max_pool2d expects N×C×H×W, got {:?}", x.shape())));
    };
    let (Some(ho), Some(wo)) = (g.output_len(h), g.output_len(w)) else {
        return Err(Error::dim(format!("max_pool2d output empty for {h}×{w} with {g:?}")));
    };
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if x.data()[i] > best {
                            best = x.data()[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, ho, wo], out), arg))
}

pub fn max_pool2d_backward(upstream: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    if upstream.len() != argmax.len() {
        return Err(Error::dim("max_pool2d upstream does not match recorded argmax"));
    }
    let mut dx = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(upstream.data()) {
        dx.data_mut()[i] += g;
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gap_examples() {
        let x = Tensor::new(&[1, 2, 2, 2], vec![1.0, 3.0, 5.0, 7.0, 2.0, 2.0, 2.0, 2.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[4.0, 2.0]);
        let g = global_avg_pool_backward(&Tensor::new(&[1, 2], vec![4.0, 8.0]).unwrap(), 2, 2).unwrap();
        assert_eq!(g.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn max_of_four_and_constant() {
        let g = PoolGeometry { kernel: 2, stride: 2, padding: 0 };
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = max_pool2d(&x, g).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let c = Tensor::full(&[1, 2, 6, 6], 1.5);
        let (y, arg) = max_pool2d(&c, PoolGeometry { kernel: 3, stride: 2, padding: 1 }).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.5));
        // ties resolve to the first element scanned
        assert_eq!(arg[0], 0);
    }

    #[test]
    fn matches_nested_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (k, s, p) in [(2, 2, 0), (3, 2, 1), (3, 1, 1), (2, 1, 0)] {
            let x = Tensor::from_fn(&[2, 3, 7, 6], |_| rng.gen_range(-1.0..1.0));
            let g = PoolGeometry { kernel: k, stride: s, padding: p };
            let (y, _) = max_pool2d(&x, g).unwrap();
            let (ho, wo) = (g.output_len(7).unwrap(), g.output_len(6).unwrap());
            for pl in 0..6 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut m = f64::NEG_INFINITY;
                        for iy in (oy * s).saturating_sub(p)..(oy * s + k).saturating_sub(p).min(7) {
                            for ix in (ox * s).saturating_sub(p)..(ox * s + k).saturating_sub(p).min(6) {
                                m = m.max(x.data()[pl * 42 + iy * 6 + ix]);
                            }
                        }
                        assert_eq!(y.data()[(pl * ho + oy) * wo + ox], m);
                    }
                }
            }
        }
    }

    #[test]
    fn backward_routes_to_argmax() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 9.0, 3.0, 4.0]).unwrap();
        let (_, arg) = max_pool2d(&x, PoolGeometry { kernel: 2, stride: 2, padding: 0 }).unwrap();
        let dx = max_pool2d_backward(&Tensor::new(&[1, 1, 1, 1], vec![2.5]).unwrap(), &arg, x.shape()).unwrap();
        assert_eq!(dx.data(), &[0.0, 2.5, 0.0, 0.0]);
    }
}
