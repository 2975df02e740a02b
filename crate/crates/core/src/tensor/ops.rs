use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn unary<F, G>(x: &Tensor, name: &'static str, f: F, df: G) -> Tensor
where
    F: Fn(f64) -> f64,
    // derivative given (input, output)
    G: Fn(f64, f64) -> f64 + Send + Sync + 'static,
{
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let xc = x.clone();
    Tensor::from_op(name, data, x.shape().to_vec(), vec![x.clone()], move |g, out| {
        let gi = g
            .iter()
            .zip(xc.data())
            .zip(out)
            .map(|((&g, &x), &y)| g * df(x, y))
            .collect();
        vec![Some(gi)]
    })
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Gelu,
    Tanh,
    Softmax,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leaky_relu" => Ok(Activation::LeakyRelu),
            "gelu" => Ok(Activation::Gelu),
            "tanh" => Ok(Activation::Tanh),
            "softmax" => Ok(Activation::Softmax),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

/// Negative slope shared by every LeakyReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

impl Tensor {
    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            "add",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |g, _| vec![Some(g.to_vec()), Some(g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            "sub",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |g, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "mul",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            move |g, _| {
                let ga = a.requires_grad().then(|| g.iter().zip(b.data()).map(|(g, b)| g * b).collect());
                let gb = b.requires_grad().then(|| g.iter().zip(a.data()).map(|(g, a)| g * a).collect());
                vec![ga, gb]
            },
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * s).collect();
        Tensor::from_op("scale", data, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            vec![Some(g.iter().map(|v| v * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + s).collect();
        Tensor::from_op("add_scalar", data, self.shape().to_vec(), vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn abs(&self) -> Tensor {
        unary(self, "abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> Tensor {
        unary(self, "square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn relu(&self) -> Tensor {
        unary(self, "relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        unary(
            self,
            "leaky_relu",
            move |x| if x >= 0.0 { x } else { slope * x },
            move |x, _| if x >= 0.0 { 1.0 } else { slope },
        )
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, "tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn gelu(&self) -> Tensor {
        unary(self, "gelu", gelu, |x, _| gelu_grad(x))
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&self, lo: f64, hi: f64) -> Tensor {
        unary(
            self,
            "ln_clamped",
            move |x| x.clamp(lo, hi).ln(),
            move |x, _| if x > lo && x < hi { 1.0 / x } else { 0.0 },
        )
    }

    pub fn activation(&self, kind: Activation, axis: Option<usize>) -> Result<Tensor> {
        match kind {
            Activation::LeakyRelu => Ok(self.leaky_relu(LEAKY_SLOPE)),
            Activation::Gelu => Ok(self.gelu()),
            Activation::Tanh => Ok(self.tanh()),
            Activation::Softmax => {
                let axis = axis.ok_or_else(|| Error::InvalidArgument("softmax needs an axis".into()))?;
                self.softmax(axis)
            }
        }
    }

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum();
        Tensor::from_op("sum", vec![s], vec![1], vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum::<f64>() / n as f64;
        Tensor::from_op("mean", vec![s], vec![1], vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0] / n as f64; n])]
        })
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::invalid_shape("mean_axis", format!("axis {axis} for shape {:?}", self.shape())));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_op("mean_axis", out, shape, vec![self.clone()], move |g, _| {
            let mut gi = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let dst = &mut gi[(o * len + l) * inner..(o * len + l + 1) * inner];
                    dst.iter_mut()
                        .zip(&g[o * inner..(o + 1) * inner])
                        .for_each(|(d, g)| *d = g / len as f64);
                }
            }
            vec![Some(gi)]
        }))
    }

    /// Adds `bias` (1-D, length = last extent) along the last axis.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let c = *self.shape().last().unwrap_or(&0);
        if bias.rank() != 1 || bias.numel() != c {
            return Err(Error::shape("add_bias", self.shape(), bias.shape()));
        }
        let b = bias.data();
        let data = self
            .data()
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        Ok(Tensor::from_op(
            "add_bias",
            data,
            self.shape().to_vec(),
            vec![self.clone(), bias.clone()],
            move |g, _| {
                let mut gb = vec![0.0; c];
                for row in g.chunks_exact(c) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![Some(g.to_vec()), Some(gb)]
            },
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::invalid_shape("softmax", format!("axis {axis} for shape {:?}", self.shape())));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| x[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (x[idx(l)] - m).exp();
                    out[idx(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[idx(l)] /= z;
                }
            }
        }
        Ok(Tensor::from_op("softmax", out, self.shape().to_vec(), vec![self.clone()], move |g, y| {
            let mut gi = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                    for l in 0..len {
                        gi[idx(l)] = y[idx(l)] * (g[idx(l)] - dot);
                    }
                }
            }
            vec![Some(gi)]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            |g, _| vec![Some(g.to_vec())],
        ))
    }

    /// `out[i] = self[indices[i]]`; the backward pass scatter-adds.
    pub(crate) fn gather(&self, name: &'static str, indices: Arc<Vec<usize>>, shape: Vec<usize>) -> Tensor {
        let x = self.data();
        let data = indices.iter().map(|&i| x[i]).collect();
        let n = self.numel();
        Tensor::from_op(name, data, shape, vec![self.clone()], move |g, _| {
            let mut gi = vec![0.0; n];
            for (&i, &gv) in indices.iter().zip(g) {
                gi[i] += gv;
            }
            vec![Some(gi)]
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid_shape("permute", format!("axes {axes:?} for shape {:?}", self.shape())));
        }
        let shape = self.shape();
        let mut in_strides = vec![1usize; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * shape[d + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let mut idx = Vec::with_capacity(self.numel());
        let mut counter = vec![0usize; rank];
        for _ in 0..self.numel() {
            idx.push(counter.iter().zip(axes).map(|(&c, &a)| c * in_strides[a]).sum());
            for d in (0..rank).rev() {
                counter[d] += 1;
                if counter[d] < out_shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        Ok(self.gather("permute", Arc::new(idx), out_shape))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        if axis >= first.rank() {
            return Err(Error::invalid_shape("concat", format!("axis {axis} for shape {:?}", first.shape())));
        }
        for p in &parts[1..] {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op("concat", data, shape, parts.to_vec(), move |g, _| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    gp.extend_from_slice(&g[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradient_check, GradCheckOptions, ParameterStore};

    fn t(v: &[f64], s: &[usize]) -> Tensor {
        Tensor::new(v.to_vec(), s).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let y = t(&[0.0, 0.0], &[2]).softmax(0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn scalar_activations_at_zero() {
        assert_eq!(t(&[0.0], &[1]).tanh().item(), 0.0);
        assert_eq!(t(&[0.0], &[1]).gelu().item(), 0.0);
        let y = t(&[-1.0], &[1]).activation(Activation::LeakyRelu, None).unwrap();
        assert!((y.item() + 0.2).abs() < 1e-15);
    }

    #[test]
    fn softmax_without_axis_is_an_error() {
        assert!(t(&[1.0], &[1]).activation(Activation::Softmax, None).is_err());
        assert!("swish".parse::<Activation>().is_err());
        assert_eq!("gelu".parse::<Activation>().unwrap(), Activation::Gelu);
    }

    #[test]
    fn elementwise_shape_mismatch_names_both_shapes() {
        let err = t(&[1.0, 2.0], &[2]).add(&t(&[1.0], &[1])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[1]"), "{msg}");
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn concat_middle_axis() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 1, 2]);
        let b = t(&[5.0, 6.0, 7.0, 8.0], &[2, 1, 2]);
        let c = Tensor::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut store = ParameterStore::new();
        store.insert_parameter("a", vec![0.3, -0.7, 1.2, -0.1, 0.5, 0.9], &[2, 3]).unwrap();
        store.insert_parameter("b", vec![-0.4, 0.8, 0.2, 1.1, -0.6, 0.35], &[2, 3]).unwrap();
        store.insert_parameter("bias", vec![0.1, -0.2, 0.3], &[3]).unwrap();
        let report = gradient_check(
            &mut store,
            |s| {
                let a = s.get("a")?;
                let b = s.get("b")?;
                let x = a.mul(&b)?.add(&a.tanh())?.sub(&b.gelu())?;
                let x = x.add_bias(&s.get("bias")?)?.leaky_relu(0.2);
                let y = x.softmax(1)?.mul(&a.square())?;
                let z = Tensor::concat(&[y.clone(), a.abs()], 0)?.permute(&[1, 0])?;
                Ok(z.mean_axis(1)?.sum().add(&a.ln_clamped(1e-3, 10.0).mean())?)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }
}
