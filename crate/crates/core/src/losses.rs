//! Adversarial, classification and reconstruction objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::tensor::Tensor;

/// Predictions are clipped to `[CCE_CLIP, 1 - CCE_CLIP]` before the log.
pub const CCE_CLIP: f64 = 1e-7;
const SIMPLEX_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_mse: f64,
    pub lambda_perc: f64,
    pub lambda_ef: f64,
    pub lambda_cce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_adv: 10.0,
            lambda_mse: 10.0,
            lambda_perc: 10.0,
            lambda_ef: 1.0,
            lambda_cce: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_adv, self.lambda_mse, self.lambda_perc, self.lambda_ef, self.lambda_cce];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and nonnegative: {all:?}")));
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Discriminator hinge loss: `mean(relu(1 - real)) + mean(relu(1 + fake))`.
pub fn hinge_d(real_map: &Tensor, fake_map: &Tensor) -> Result<Tensor> {
    same_shape("hinge_d", real_map, fake_map)?;
    let real = real_map.neg().add_scalar(1.0).relu().mean();
    let fake = fake_map.add_scalar(1.0).relu().mean();
    real.add(&fake)
}

/// Generator hinge loss: `-mean(fake)`.
pub fn hinge_g(fake_map: &Tensor) -> Tensor {
    fake_map.mean().neg()
}

/// `d_loss + lambda_adv * g_loss`.
pub fn combined_adversarial(d_loss: &Tensor, g_loss: &Tensor, lambda_adv: f64) -> Result<Tensor> {
    d_loss.add(&g_loss.scale(lambda_adv))
}

/// Categorical cross-entropy averaged over the batch. Both inputs are
/// `[B, K]`; each prediction row must lie on the simplex.
pub fn cce(y_true: &Tensor, y_pred: &Tensor) -> Result<Tensor> {
    same_shape("cce", y_true, y_pred)?;
    let k = *y_pred.shape().last().unwrap_or(&1);
    for row in y_pred.data().chunks_exact(k) {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|v| *v < -SIMPLEX_TOL) {
            return Err(Error::InvalidArgument(format!("cce: prediction {row:?} is not a probability vector")));
        }
    }
    let batch = (y_pred.numel() / k) as f64;
    let logp = y_pred.ln_clamped(CCE_CLIP, 1.0 - CCE_CLIP);
    Ok(y_true.mul(&logp)?.sum().scale(-1.0 / batch))
}

/// One-hot `[B, 2]` targets from class indices.
pub fn one_hot(classes: &[usize], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; classes.len() * k];
    for (i, &c) in classes.iter().enumerate() {
        if c >= k {
            return Err(Error::InvalidArgument(format!("class {c} out of range for {k} classes")));
        }
        data[i * k + c] = 1.0;
    }
    Tensor::new(data, &[classes.len(), k])
}

pub fn mse(fake: &Tensor, real: &Tensor) -> Result<Tensor> {
    same_shape("mse", fake, real)?;
    Ok(fake.sub(real)?.square().mean())
}

pub fn mean_abs(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mean_abs", a, b)?;
    Ok(a.sub(b)?.abs().mean())
}

/// Average over tapped layers of the per-layer mean absolute difference.
pub fn feature_l1(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "feature lists of length {} and {}",
            real.len(),
            fake.len()
        )));
    }
    let mut total = mean_abs(&real[0], &fake[0])?;
    for (r, f) in real.iter().zip(fake).skip(1) {
        total = total.add(&mean_abs(r, f)?)?;
    }
    Ok(total.scale(1.0 / real.len() as f64))
}

/// Perceptual loss through a fixed feature extractor.
pub fn perceptual(fake: &Tensor, real: &Tensor, fx: &dyn FeatureExtractor) -> Result<Tensor> {
    same_shape("perceptual", fake, real)?;
    let fr = fx.features(&real.detach())?;
    let ff = fx.features(fake)?;
    feature_l1(&fr, &ff)
}

/// Embedding-feature loss from the discriminator token features of the real
/// and the synthesized pair. The caller is responsible for computing both
/// lists with the discriminator parameters frozen.
pub fn embedding_feature_loss(real_feats: &[Tensor], fake_feats: &[Tensor]) -> Result<Tensor> {
    feature_l1(real_feats, fake_feats)
}

/// The generator-side terms, each already summed over both scales.
#[derive(Debug, Clone, Default)]
pub struct GeneratorTerms {
    pub adv: Option<Tensor>,
    pub mse: Option<Tensor>,
    pub perc: Option<Tensor>,
    pub ef: Option<Tensor>,
}

/// `lambda_adv * adv + lambda_mse * mse + lambda_perc * perc + lambda_ef * ef`.
pub fn total_generator_objective(terms: &GeneratorTerms, w: &LossWeights) -> Result<Tensor> {
    let get = |t: &Option<Tensor>, name: &str| -> Result<Tensor> {
        t.clone().ok_or_else(|| Error::InvalidArgument(format!("missing generator loss term `{name}`")))
    };
    let parts = [
        (get(&terms.adv, "adv")?, w.lambda_adv),
        (get(&terms.mse, "mse")?, w.lambda_mse),
        (get(&terms.perc, "perc")?, w.lambda_perc),
        (get(&terms.ef, "ef")?, w.lambda_ef),
    ];
    let mut total = parts[0].0.scale(parts[0].1);
    for (t, l) in &parts[1..] {
        total = total.add(&t.scale(*l))?;
    }
    Ok(total)
}
