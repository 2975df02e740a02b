//! Weight initializers. Fans follow the NHWC/HWIO layouts used throughout.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// `(fan_in, fan_out)` for a dense `[in, out]` or conv `[kh, kw, in, out]` weight.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (*n, *n),
        [i, o] => (*i, *o),
        _ => {
            let rf: usize = shape[..shape.len() - 2].iter().product();
            let (i, o) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            (rf * i, rf * o)
        }
    }
}

pub fn uniform<R: Rng>(n: usize, limit: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

pub fn glorot_uniform<R: Rng>(shape: &[usize], rng: &mut R) -> Vec<f64> {
    let (fi, fo) = fans(shape);
    uniform(shape.iter().product(), (6.0 / (fi + fo) as f64).sqrt(), rng)
}

pub fn normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    (0..n).map(|_| dist.sample(rng)).collect()
}
