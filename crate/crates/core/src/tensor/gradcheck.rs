//! Central finite-difference check of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{no_grad, ParameterStore, Tensor};
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so that gradients that are
/// zero up to rounding do not dominate the report.
pub const REL_FLOOR: f64 = 1e-3;

/// A probe interval counts as non-smooth when the central differences at
/// `eps` and `eps / 2` differ by more than this (relative, same floor); for
/// a smooth loss they agree to `O(eps^2)`. The probe is then repeated with
/// a ten times smaller step, up to `MAX_REFINEMENTS` times.
pub const SMOOTHNESS_TOL: f64 = 1e-5;
pub const MAX_REFINEMENTS: usize = 3;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates probed per parameter; `None` probes all of them.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// `max |a - n| / max(REL_FLOOR, |a|, |n|)` over probed coordinates.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    /// Coordinates where a piecewise-linear kink stayed inside the probe
    /// interval at every step size. They are excluded from the errors.
    pub nonsmooth_coords: usize,
}

/// Compares the gradient of `loss_fn` for every trainable parameter against
/// central differences. `loss_fn` must be deterministic.
pub fn gradient_check<F>(store: &mut ParameterStore, mut loss_fn: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParameterStore) -> Result<Tensor>,
{
    store.zero_grad();
    let loss = loss_fn(store)?;
    loss.backward()?;
    let paths = store.trainable_paths("");
    let mut analytic = Vec::with_capacity(paths.len());
    for p in &paths {
        let n = store.values(p)?.len();
        // Unreached parameters have a true gradient of zero.
        analytic.push(store.grad(p)?.unwrap_or_else(|| vec![0.0; n]));
    }
    store.zero_grad();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let _guard = no_grad();
    for (path, grad) in paths.iter().zip(&analytic) {
        let base = store.values(path)?.to_vec();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < base.len() => sample(&mut rng, base.len(), k).into_vec(),
            _ => (0..base.len()).collect(),
        };
        for i in coords {
            let mut probe = |delta: f64, store: &mut ParameterStore| -> Result<f64> {
                let mut v = base.clone();
                v[i] += delta;
                store.set_value(path, v)?;
                let l = loss_fn(store)?;
                if l.numel() != 1 {
                    return Err(Error::NonScalarLoss(l.shape().to_vec()));
                }
                Ok(l.item())
            };
            let mut eps = opts.eps;
            let mut numeric = None;
            for _ in 0..=MAX_REFINEMENTS {
                let wide = (probe(eps, store)? - probe(-eps, store)?) / (2.0 * eps);
                let narrow = (probe(eps / 2.0, store)? - probe(-eps / 2.0, store)?) / eps;
                if (wide - narrow).abs() <= SMOOTHNESS_TOL * REL_FLOOR.max(wide.abs()) {
                    numeric = Some(wide);
                    break;
                }
                eps /= 10.0;
            }
            report.coords_checked += 1;
            let Some(numeric) = numeric else {
                report.nonsmooth_coords += 1;
                continue;
            };
            let a = grad[i];
            let abs = (a - numeric).abs();
            let rel = abs / REL_FLOOR.max(a.abs()).max(numeric.abs());
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((path.clone(), i));
            }
        }
        store.set_value(path, base)?;
    }
    Ok(report)
}
