use super::gemm::{gemm, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

impl Tensor {
    /// `[..., k] @ [k, n] -> [..., n]`, leading axes flattened.
    pub fn matmul(&self, w: &Tensor) -> Result<Tensor> {
        let k = *self.shape().last().unwrap_or(&0);
        if w.rank() != 2 || w.shape()[0] != k {
            return Err(Error::shape("matmul", self.shape(), w.shape()));
        }
        let n = w.shape()[1];
        let m = self.numel() / k;
        let mut out = vec![0.0; m * n];
        gemm(MatRef::row_major(self.data(), m, k), MatRef::row_major(w.data(), k, n), &mut out, 0.0);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let (x, wc) = (self.clone(), w.clone());
        Ok(Tensor::from_op("matmul", out, shape, vec![self.clone(), w.clone()], move |g, _| {
            let gm = MatRef::row_major(g, m, n);
            let gx = x.requires_grad().then(|| {
                let mut gx = vec![0.0; m * k];
                gemm(gm, MatRef::row_major(wc.data(), k, n).t(), &mut gx, 0.0);
                gx
            });
            let gw = wc.requires_grad().then(|| {
                let mut gw = vec![0.0; k * n];
                gemm(MatRef::row_major(x.data(), m, k).t(), gm, &mut gw, 0.0);
                gw
            });
            vec![gx, gw]
        }))
    }

    /// Affine map over the last axis: `x @ weight + bias`.
    pub fn dense(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        self.matmul(weight)?.add_bias(bias)
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// when `transpose_rhs` is set.
    pub fn bmm(&self, rhs: &Tensor, transpose_rhs: bool) -> Result<Tensor> {
        if self.rank() != 3 || rhs.rank() != 3 || self.shape()[0] != rhs.shape()[0] {
            return Err(Error::shape("bmm", self.shape(), rhs.shape()));
        }
        let (b, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (rk, n) = if transpose_rhs {
            (rhs.shape()[2], rhs.shape()[1])
        } else {
            (rhs.shape()[1], rhs.shape()[2])
        };
        if rk != k {
            return Err(Error::shape("bmm", self.shape(), rhs.shape()));
        }
        fn rhs_view(data: &[f64], i: usize, k: usize, n: usize, transpose: bool) -> MatRef<'_> {
            let slab = &data[i * k * n..(i + 1) * k * n];
            if transpose {
                MatRef::row_major(slab, n, k).t()
            } else {
                MatRef::row_major(slab, k, n)
            }
        }
        let mut out = vec![0.0; b * m * n];
        for i in 0..b {
            let a = MatRef::row_major(&self.data()[i * m * k..(i + 1) * m * k], m, k);
            gemm(a, rhs_view(rhs.data(), i, k, n, transpose_rhs), &mut out[i * m * n..(i + 1) * m * n], 0.0);
        }
        let (x, r) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op("bmm", out, vec![b, m, n], vec![self.clone(), rhs.clone()], move |g, _| {
            let gx = x.requires_grad().then(|| {
                let mut gx = vec![0.0; b * m * k];
                for i in 0..b {
                    let gi = MatRef::row_major(&g[i * m * n..(i + 1) * m * n], m, n);
                    gemm(gi, rhs_view(r.data(), i, k, n, transpose_rhs).t(), &mut gx[i * m * k..(i + 1) * m * k], 0.0);
                }
                gx
            });
            let gr = r.requires_grad().then(|| {
                let mut gr = vec![0.0; b * k * n];
                for i in 0..b {
                    let gi = MatRef::row_major(&g[i * m * n..(i + 1) * m * n], m, n);
                    let xi = MatRef::row_major(&x.data()[i * m * k..(i + 1) * m * k], m, k);
                    let dst = &mut gr[i * k * n..(i + 1) * k * n];
                    if transpose_rhs {
                        // d(rhs)[n, k] = g^T x
                        gemm(gi.t(), xi, dst, 0.0);
                    } else {
                        gemm(xi.t(), gi, dst, 0.0);
                    }
                }
                gr
            });
            vec![gx, gr]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradient_check, GradCheckOptions, ParameterStore};

    #[test]
    fn dense_identity_and_hand_arithmetic() {
        let x = Tensor::new(vec![1.0, 2.0], &[1, 2]).unwrap();
        let eye = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let y = x.dense(&eye, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y.data(), x.data());
        let y = x.dense(&eye, &Tensor::new(vec![3.0, 4.0], &[2]).unwrap()).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0]);
    }

    #[test]
    fn dense_dim_mismatch() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(x.dense(&Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2])).is_err());
        assert!(x.dense(&Tensor::zeros(&[3, 2]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn matmul_and_bmm_gradients() {
        let mut store = ParameterStore::new();
        let v = |n: usize, s: f64| (0..n).map(|i| ((i as f64) * s).sin()).collect::<Vec<_>>();
        store.insert_parameter("x", v(12, 0.7), &[2, 2, 3]).unwrap();
        store.insert_parameter("w", v(6, 1.3), &[3, 2]).unwrap();
        store.insert_parameter("k", v(12, 0.4), &[2, 2, 3]).unwrap();
        let report = gradient_check(
            &mut store,
            |s| {
                let x = s.get("x")?;
                let k = s.get("k")?;
                let a = x.bmm(&k, true)?; // [2,2,2]
                let b = a.bmm(&x, false)?; // [2,2,3]
                Ok(b.matmul(&s.get("w")?)?.square().sum())
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }
}
