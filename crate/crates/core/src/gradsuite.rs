//! Finite-difference gradient suite over every primitive op, every
//! composite block and the full discriminator and generators. Each case
//! reduces its output to a scalar with fixed random weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::GanConfig;
use crate::error::Result;
use crate::losses;
use crate::models::{GeneratorPair, VisionTransformer};
use crate::nn::{Ctx, Downsample, EncoderBlock, ResidualBlock, SepConvBn, Sff, Upsample};
use crate::tensor::{gradient_check, DropoutKey, GradCheckOptions, GradCheckReport, Padding, ParameterStore, Tensor};

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

type LossFn = Box<dyn FnMut(&mut ParameterStore) -> Result<Tensor>>;

pub struct Case {
    pub name: String,
    store: ParameterStore,
    loss: LossFn,
    coords: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl CaseResult {
    /// Within tolerance, with at most 5% of the probes lost to kinks.
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE && self.report.nonsmooth_coords * 20 <= self.report.coords_checked
    }
}

/// Uniform values in `[-1, 1]` kept at least `gap` away from zero, which
/// keeps piecewise-linear ops away from their kinks.
fn values(rng: &mut ChaCha8Rng, n: usize, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// `sum(t * r)` for a fixed random `r` derived from the shape.
fn reduce(t: &Tensor) -> Result<Tensor> {
    let seed = t.shape().iter().fold(17u64, |h, d| h.wrapping_mul(31).wrapping_add(*d as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::new(values(&mut rng, t.numel(), 0.1), t.shape())?;
    Ok(t.mul(&r)?.sum())
}

struct Builder {
    rng: ChaCha8Rng,
    store: ParameterStore,
}

impl Builder {
    fn new(seed: u64) -> Builder {
        Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParameterStore::new(),
        }
    }

    fn input(&mut self, name: &str, shape: &[usize]) -> &mut Builder {
        self.input_with_gap(name, shape, 0.05)
    }

    fn input_with_gap(&mut self, name: &str, shape: &[usize], gap: f64) -> &mut Builder {
        let v = values(&mut self.rng, shape.iter().product(), gap);
        self.store.insert_parameter(name, v, shape).expect("unique input name");
        self
    }

    fn positive(&mut self, name: &str, shape: &[usize]) -> &mut Builder {
        let v = (0..shape.iter().product()).map(|_| self.rng.random_range(0.1..1.0)).collect();
        self.store.insert_parameter(name, v, shape).expect("unique input name");
        self
    }

    fn case(&mut self, name: &str, coords: Option<usize>, loss: impl FnMut(&mut ParameterStore) -> Result<Tensor> + 'static) -> Case {
        Case {
            name: name.to_string(),
            store: std::mem::take(&mut self.store),
            loss: Box::new(loss),
            coords,
        }
    }
}

fn g(s: &ParameterStore, name: &str) -> Result<Tensor> {
    s.get(name)
}

fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut b = Builder::new(seed);
    let mut cases = Vec::new();
    macro_rules! unary {
        ($name:expr, $shape:expr, $f:expr) => {{
            b.input("x", &$shape);
            let f = $f;
            cases.push(b.case($name, None, move |s| reduce(&f(g(s, "x")?)?)));
        }};
    }
    unary!("add_sub_mul_scalar", [3, 4], |x: Tensor| -> Result<Tensor> {
        let y = x.scale(1.5).add_scalar(0.2).neg();
        x.add(&y)?.sub(&x.scale(0.5))?.mul(&x)
    });
    unary!("abs", [3, 5], |x: Tensor| Ok::<_, crate::Error>(x.abs()));
    unary!("square", [3, 5], |x: Tensor| Ok::<_, crate::Error>(x.square()));
    unary!("relu", [3, 5], |x: Tensor| Ok::<_, crate::Error>(x.relu()));
    unary!("leaky_relu", [3, 5], |x: Tensor| Ok::<_, crate::Error>(x.leaky_relu(0.2)));
    unary!("tanh", [3, 5], |x: Tensor| Ok::<_, crate::Error>(x.tanh()));
    unary!("gelu", [3, 5], |x: Tensor| Ok::<_, crate::Error>(x.gelu()));
    unary!("sum_mean", [2, 3, 4], |x: Tensor| x.sum().add(&x.mean()));
    unary!("mean_axis", [2, 3, 4], |x: Tensor| x.mean_axis(1));
    unary!("softmax_last", [3, 4], |x: Tensor| x.softmax(1));
    unary!("softmax_first", [3, 4], |x: Tensor| x.softmax(0));
    unary!("reshape_permute", [2, 3, 4], |x: Tensor| x.permute(&[2, 0, 1])?.reshape(&[4, 6]));
    unary!("reflection_pad", [1, 5, 6, 2], |x: Tensor| x.reflection_pad(2));
    unary!("max_pool2x2", [2, 4, 6, 2], |x: Tensor| x.max_pool2x2());
    unary!("global_avg_pool", [2, 3, 4, 5], |x: Tensor| x.global_avg_pool());
    unary!("dropout", [4, 6], |x: Tensor| x.dropout(0.3, Some(DropoutKey { seed: 5, layer: 1, step: 2 })));

    b.positive("x", &[3, 4]);
    cases.push(b.case("ln_clamped", None, |s| reduce(&g(s, "x")?.ln_clamped(1e-7, 1.0 - 1e-7))));

    b.input("x", &[2, 3]).input("y", &[2, 2]);
    cases.push(b.case("concat", None, |s| reduce(&Tensor::concat(&[g(s, "x")?, g(s, "y")?], 1)?)));

    b.input("x", &[2, 3, 4]).input("b", &[4]);
    cases.push(b.case("add_bias", None, |s| reduce(&g(s, "x")?.add_bias(&g(s, "b")?)?)));

    b.input("x", &[2, 3, 4]).input("w", &[4, 5]).input("b", &[5]);
    cases.push(b.case("matmul_dense", None, |s| {
        let x = g(s, "x")?;
        let w = g(s, "w")?;
        reduce(&x.matmul(&w)?.add(&x.dense(&w, &g(s, "b")?)?.scale(0.5))?)
    }));

    b.input("a", &[3, 4, 5]).input("b", &[3, 5, 2]).input("c", &[3, 2, 5]);
    cases.push(b.case("bmm", None, |s| {
        let a = g(s, "a")?;
        reduce(&a.bmm(&g(s, "b")?, false)?.add(&a.bmm(&g(s, "c")?, true)?)?)
    }));

    for (name, stride, dilation, padding) in [
        ("conv2d_valid", 1, 1, Padding::Valid),
        ("conv2d_same_stride2", 2, 1, Padding::Same),
        ("conv2d_same_dilated", 1, 2, Padding::Same),
    ] {
        b.input("x", &[2, 7, 6, 3]).input("w", &[3, 3, 3, 4]).input("b", &[4]);
        cases.push(b.case(name, None, move |s| {
            reduce(&g(s, "x")?.conv2d(&g(s, "w")?, Some(&g(s, "b")?), stride, dilation, padding)?)
        }));
    }

    b.input("x", &[1, 3, 4, 3]).input("w", &[3, 3, 2, 3]).input("b", &[2]);
    cases.push(b.case("transposed_conv2d", None, |s| {
        reduce(&g(s, "x")?.transposed_conv2d(&g(s, "w")?, Some(&g(s, "b")?), 2)?)
    }));

    b.input("x", &[2, 6, 6, 3]).input("w", &[3, 3, 3, 1]);
    cases.push(b.case("depthwise_conv2d", None, |s| {
        reduce(&g(s, "x")?.depthwise_conv2d(&g(s, "w")?, 1, 2, Padding::Same)?)
    }));

    b.input("x", &[1, 7, 7, 2]).input("dw", &[3, 3, 2, 1]).input("pw", &[1, 1, 2, 3]);
    cases.push(b.case("separable_conv2d", None, |s| {
        reduce(&g(s, "x")?.separable_conv2d(&g(s, "dw")?, &g(s, "pw")?, 2, 1, Padding::Same)?)
    }));

    b.input("x", &[2, 3, 3, 4]).input("gamma", &[4]).input("beta", &[4]);
    cases.push(b.case("batch_norm_train", None, |s| {
        reduce(&g(s, "x")?.batch_norm_train(&g(s, "gamma")?, &g(s, "beta")?)?.output)
    }));

    b.input("x", &[2, 3, 6]).input("gamma", &[6]).input("beta", &[6]);
    cases.push(b.case("layer_norm", None, |s| reduce(&g(s, "x")?.layer_norm(&g(s, "gamma")?, &g(s, "beta")?)?)));

    b.input("real", &[2, 3, 4]).input("fake", &[2, 3, 4]);
    cases.push(b.case("hinge_losses", None, |s| {
        let (r, f) = (g(s, "real")?, g(s, "fake")?);
        losses::hinge_d(&r.scale(1.7), &f.scale(1.7))?.add(&losses::hinge_g(&f))
    }));

    b.input("logits", &[3, 2]);
    cases.push(b.case("cce_softmax", None, |s| {
        let y = losses::one_hot(&[0, 1, 1], 2)?;
        losses::cce(&y, &g(s, "logits")?.softmax(1)?)
    }));

    b.input("a", &[2, 3]).input("b", &[2, 3]).input("c", &[4]).input("d", &[4]);
    cases.push(b.case("mse_feature_l1", None, |s| {
        let (a, bb) = (g(s, "a")?, g(s, "b")?);
        losses::mse(&a, &bb)?.add(&losses::feature_l1(&[a.clone(), g(s, "c")?], &[bb.clone(), g(s, "d")?])?)
    }));
    cases
}

fn block_cases(seed: u64, gan: &GanConfig) -> Vec<Case> {
    let mut cases = Vec::new();
    let c = 4;

    let mut b = Builder::new(seed);
    b.input("x", &[2, 8, 8, 3]);
    let blk = Downsample::new(&mut b.store, &mut b.rng, "down", 3, c).expect("block");
    cases.push(b.case("downsample", None, move |s| {
        let x = g(s, "x")?;
        reduce(&blk.forward(s, &Ctx::train(0, 0), &x)?)
    }));

    b.input("x", &[2, 4, 4, c]);
    let blk = Upsample::new(&mut b.store, &mut b.rng, "up", c, 3).expect("block");
    cases.push(b.case("upsample", None, move |s| {
        let x = g(s, "x")?;
        reduce(&blk.forward(s, &Ctx::train(0, 0), &x)?)
    }));

    b.input("x", &[2, 6, 6, c]);
    let blk = Sff::new(&mut b.store, &mut b.rng, "sff", c).expect("block");
    cases.push(b.case("sff", None, move |s| {
        let x = g(s, "x")?;
        reduce(&blk.forward(s, &Ctx::train(0, 0), &x)?)
    }));

    b.input("x", &[2, 6, 6, c]);
    let blk = SepConvBn::new(&mut b.store, &mut b.rng, "sep", c, 2).expect("block");
    cases.push(b.case("sepconv_bn", None, move |s| {
        let x = g(s, "x")?;
        reduce(&blk.forward(s, &Ctx::train(0, 0), &x)?)
    }));

    b.input("x", &[2, 6, 6, c]);
    let blk = ResidualBlock::new(&mut b.store, &mut b.rng, "res", c).expect("block");
    cases.push(b.case("residual", None, move |s| {
        let x = g(s, "x")?;
        reduce(&blk.forward(s, &Ctx::train(0, 0), &x)?)
    }));

    b.input("x", &[2, 5, 8]);
    let cfg = crate::nn::EncoderConfig {
        dim: 8,
        heads: 2,
        mlp: vec![12, 8],
        dropout: 0.1,
    };
    let blk = EncoderBlock::new(&mut b.store, &mut b.rng, "enc", &cfg).expect("block");
    cases.push(b.case("transformer_encoder", None, move |s| {
        let x = g(s, "x")?;
        reduce(&blk.forward(s, &Ctx::eval(), &x)?)
    }));

    let (size, patch) = (gan.fine_size, gan.vt.patch_fine);
    b.input("fundus", &[1, size, size, 3]).input("angio", &[1, size, size, 1]);
    let vt = VisionTransformer::new(&mut b.store, &mut b.rng, "vt", size, patch, &gan.vt).expect("discriminator");
    cases.push(b.case("discriminator", Some(3), move |s| {
        let out = vt.forward(s, &Ctx::eval(), &g(s, "fundus")?, &g(s, "angio")?)?;
        reduce(&out.adv_map)?.add(&reduce(&out.class_probs)?)
    }));

    // the Lanczos downscale carries no gradient, so the coarse input is a
    // separate leaf here
    b.input("fundus", &[2, size, size, 3]).input("fundus_lo", &[2, size / 2, size / 2, 3]);
    let gens = GeneratorPair::new(&mut b.store, &mut b.rng, gan).expect("generators");
    cases.push(b.case("generators", Some(2), move |s| {
        let (x, lo) = (g(s, "fundus")?, g(s, "fundus_lo")?);
        let out = gens.synthesize_with_coarse_input(s, &Ctx::train(0, 0), &x, &lo)?;
        reduce(&out.fine)?.add(&reduce(&out.coarse)?)
    }));
    cases
}

/// All cases; `filter` keeps those whose name contains it.
pub fn cases(seed: u64, gan: &GanConfig, filter: Option<&str>) -> Vec<Case> {
    let mut all = primitive_cases(seed);
    all.extend(block_cases(seed, gan));
    all.retain(|c| filter.is_none_or(|f| c.name.contains(f)));
    all
}

pub fn run_case(mut case: Case, seed: u64) -> Result<CaseResult> {
    let opts = GradCheckOptions {
        max_coords_per_param: case.coords,
        seed,
        ..GradCheckOptions::default()
    };
    let report = gradient_check(&mut case.store, &mut case.loss, &opts)?;
    Ok(CaseResult { name: case.name, report })
}

/// Runs every selected case in order.
pub fn run(seed: u64, gan: &GanConfig, filter: Option<&str>) -> Result<Vec<CaseResult>> {
    cases(seed, gan, filter).into_iter().map(|c| run_case(c, seed)).collect()
}
