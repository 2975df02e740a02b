use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const LN_EPS: f64 = 1e-5;

/// Result of a training-mode batch norm: the output plus the batch
/// statistics the caller folds into its running averages.
pub struct BatchNormOutput {
    pub output: Tensor,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Identifies one dropout draw: the same key always yields the same mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub layer: u64,
    pub step: u64,
}

impl DropoutKey {
    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.layer);
        rng.set_word_pos(u128::from(self.step) << 40);
        rng
    }
}

/// Normalizes `(x - mean) * inv_std` per channel and applies `gamma`, `beta`.
/// With `batch_stats` the gradient to `x` also flows through the batch
/// mean and variance; otherwise the statistics are constants.
fn affine_normalize(
    name: &'static str,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
) -> Tensor {
    let c = gamma.numel();
    let m = x.numel() / c;
    let xd = x.data();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for r in 0..m {
        for j in 0..c {
            let i = r * c + j;
            xhat[i] = (xd[i] - mean[j]) * inv_std[j];
            out[i] = gd[j] * xhat[i] + bd[j];
        }
    }
    let (xt, gt, bt) = (x.clone(), gamma.clone(), beta.clone());
    Tensor::from_op(name, out, x.shape().to_vec(), vec![x.clone(), gamma.clone(), beta.clone()], move |g, _| {
        let gd = gt.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for r in 0..m {
            for j in 0..c {
                let i = r * c + j;
                dgamma[j] += g[i] * xhat[i];
                dbeta[j] += g[i];
            }
        }
        let dx = xt.requires_grad().then(|| {
            let mut dx = vec![0.0; m * c];
            if batch_stats {
                // dx = inv_std / m * (m * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
                let mut s1 = vec![0.0; c];
                let mut s2 = vec![0.0; c];
                for r in 0..m {
                    for j in 0..c {
                        let i = r * c + j;
                        let dxh = g[i] * gd[j];
                        s1[j] += dxh;
                        s2[j] += dxh * xhat[i];
                    }
                }
                let mf = m as f64;
                for r in 0..m {
                    for j in 0..c {
                        let i = r * c + j;
                        let dxh = g[i] * gd[j];
                        dx[i] = inv_std[j] / mf * (mf * dxh - s1[j] - xhat[i] * s2[j]);
                    }
                }
            } else {
                for r in 0..m {
                    for j in 0..c {
                        let i = r * c + j;
                        dx[i] = g[i] * gd[j] * inv_std[j];
                    }
                }
            }
            dx
        });
        vec![dx, gt.requires_grad().then_some(dgamma), bt.requires_grad().then_some(dbeta)]
    })
}

fn check_channel_params(x: &Tensor, gamma: &Tensor, beta: &Tensor, op: &'static str) -> Result<usize> {
    let c = *x.shape().last().unwrap_or(&0);
    if gamma.shape() != [c] {
        return Err(Error::shape(op, x.shape(), gamma.shape()));
    }
    if beta.shape() != [c] {
        return Err(Error::shape(op, x.shape(), beta.shape()));
    }
    Ok(c)
}

impl Tensor {
    /// Batch normalization over every axis but the last, using batch
    /// statistics (biased variance).
    pub fn batch_norm_train(&self, gamma: &Tensor, beta: &Tensor) -> Result<BatchNormOutput> {
        let c = check_channel_params(self, gamma, beta, "batch_norm")?;
        let m = self.numel() / c;
        if m < 2 {
            return Err(Error::invalid_shape(
                "batch_norm",
                format!("training mode needs at least 2 values per channel, input {:?}", self.shape()),
            ));
        }
        let xd = self.data();
        let mut mean = vec![0.0; c];
        for row in xd.chunks_exact(c) {
            mean.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0; c];
        for row in xd.chunks_exact(c) {
            for ((v, x), mu) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - mu) * (x - mu);
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let output = affine_normalize("batch_norm", self, gamma, beta, mean.clone(), inv_std, true);
        Ok(BatchNormOutput {
            output,
            batch_mean: mean,
            batch_var: var,
        })
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&self, gamma: &Tensor, beta: &Tensor, running_mean: &[f64], running_var: &[f64]) -> Result<Tensor> {
        let c = check_channel_params(self, gamma, beta, "batch_norm")?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::invalid_shape("batch_norm", format!("running stats of length {} for {c} channels", running_mean.len())));
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        Ok(affine_normalize("batch_norm_eval", self, gamma, beta, running_mean.to_vec(), inv_std, false))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let c = check_channel_params(self, gamma, beta, "layer_norm")?;
        let xd = self.data();
        let m = xd.len() / c;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; m];
        for (r, row) in xd.chunks_exact(c).enumerate() {
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for (h, x) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
                *h = (x - mu) * is;
            }
        }
        let (gd, bd) = (gamma.data(), beta.data());
        let out = xhat
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(gd).zip(bd).map(|((h, g), b)| h * g + b))
            .collect();
        let (xt, gt, bt) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Tensor::from_op(
            "layer_norm",
            out,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, _| {
                let gd = gt.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; m * c];
                let cf = c as f64;
                for r in 0..m {
                    let gr = &g[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..c {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dxh = gr[j] * gd[j];
                        s1 += dxh;
                        s2 += dxh * hr[j];
                    }
                    for j in 0..c {
                        let dxh = gr[j] * gd[j];
                        dx[r * c + j] = inv_std[r] / cf * (cf * dxh - s1 - hr[j] * s2);
                    }
                }
                vec![
                    xt.requires_grad().then_some(dx),
                    gt.requires_grad().then_some(dgamma),
                    bt.requires_grad().then_some(dbeta),
                ]
            },
        ))
    }

    /// Inverted dropout. `key = None` means evaluation mode (identity).
    pub fn dropout(&self, rate: f64, key: Option<DropoutKey>) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        let Some(key) = key.filter(|_| rate > 0.0) else {
            return self.reshape(self.shape());
        };
        let mut rng = key.rng();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.random::<f64>() >= rate { keep } else { 0.0 })
            .collect();
        let data = self.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        Ok(Tensor::from_op("dropout", data, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            vec![Some(g.iter().zip(&mask).map(|(g, m)| g * m).collect())]
        }))
    }
}
