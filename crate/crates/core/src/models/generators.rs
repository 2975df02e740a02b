use rand::Rng;

use crate::config::GanConfig;
use crate::data::resample::lanczos_downscale;
use crate::error::{Error, Result};
use crate::nn::{join, Conv, Ctx, Downsample, ResidualBlock, Sff, Upsample};
use crate::tensor::{Padding, ParameterStore, Tensor};

pub const COARSE_PREFIX: &str = "g_coarse";
pub const FINE_PREFIX: &str = "g_fine";

fn check_input(x: &Tensor, size: usize, channels: usize, op: &'static str) -> Result<()> {
    if x.rank() != 4 || x.shape()[1] != size || x.shape()[2] != size || x.shape()[3] != channels {
        return Err(Error::invalid_shape(
            op,
            format!("expected [B, {size}, {size}, {channels}], got {:?}", x.shape()),
        ));
    }
    Ok(())
}

/// 1x1 convolution to one channel followed by tanh.
#[derive(Debug, Clone)]
struct Head {
    conv: Conv,
}

impl Head {
    fn new(store: &mut ParameterStore, rng: &mut impl Rng, path: &str, cin: usize) -> Result<Self> {
        Ok(Head {
            conv: Conv::new(store, rng, path, cin, 1, 1, 1, Padding::Valid, true)?,
        })
    }

    fn forward(&self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        Ok(self.conv.forward(store, x)?.tanh())
    }
}

/// Half-resolution generator: two downsampling blocks, a residual stack and
/// two upsampling blocks. Each downsampling output passes through an SFF
/// block into the input of the mirrored upsampling block.
#[derive(Debug, Clone)]
pub struct CoarseGenerator {
    size: usize,
    down1: Downsample,
    down2: Downsample,
    res: Vec<ResidualBlock>,
    sff1: Sff,
    sff2: Sff,
    up1: Upsample,
    up2: Upsample,
    head: Head,
}

impl CoarseGenerator {
    pub fn new(store: &mut ParameterStore, rng: &mut impl Rng, cfg: &GanConfig) -> Result<Self> {
        let p = COARSE_PREFIX;
        let c = cfg.base_channels;
        Ok(CoarseGenerator {
            size: cfg.coarse_size,
            down1: Downsample::new(store, rng, &join(p, "down1"), 3, c)?,
            down2: Downsample::new(store, rng, &join(p, "down2"), c, 2 * c)?,
            res: (0..cfg.coarse_res_blocks)
                .map(|i| ResidualBlock::new(store, rng, &join(p, &format!("res{i}")), 2 * c))
                .collect::<Result<_>>()?,
            sff1: Sff::new(store, rng, &join(p, "sff1"), c)?,
            sff2: Sff::new(store, rng, &join(p, "sff2"), 2 * c)?,
            up1: Upsample::new(store, rng, &join(p, "up1"), 2 * c, c)?,
            up2: Upsample::new(store, rng, &join(p, "up2"), c, c)?,
            head: Head::new(store, rng, &join(p, "head"), c)?,
        })
    }

    /// Returns the angiogram and the last upsampling activation, which is
    /// summed into the fine generator.
    pub fn forward(&self, store: &mut ParameterStore, ctx: &Ctx, fundus: &Tensor) -> Result<(Tensor, Tensor)> {
        check_input(fundus, self.size, 3, "coarse_forward")?;
        let d1 = self.down1.forward(store, ctx, fundus)?;
        let d2 = self.down2.forward(store, ctx, &d1)?;
        let mut r = d2.clone();
        for block in &self.res {
            r = block.forward(store, ctx, &r)?;
        }
        let s2 = self.sff2.forward(store, ctx, &d2)?;
        let u1 = self.up1.forward(store, ctx, &r.add(&s2)?)?;
        let s1 = self.sff1.forward(store, ctx, &d1)?;
        let feat = self.up2.forward(store, ctx, &u1.add(&s1)?)?;
        Ok((self.head.forward(store, &feat)?, feat))
    }
}

/// Full-resolution generator. The coarse features are added to the output of
/// its single downsampling block.
#[derive(Debug, Clone)]
pub struct FineGenerator {
    size: usize,
    channels: usize,
    down: Downsample,
    res: Vec<ResidualBlock>,
    sff: Sff,
    up: Upsample,
    head: Head,
}

impl FineGenerator {
    pub fn new(store: &mut ParameterStore, rng: &mut impl Rng, cfg: &GanConfig) -> Result<Self> {
        let p = FINE_PREFIX;
        let c = cfg.base_channels;
        Ok(FineGenerator {
            size: cfg.fine_size,
            channels: c,
            down: Downsample::new(store, rng, &join(p, "down1"), 3, c)?,
            res: (0..cfg.fine_res_blocks)
                .map(|i| ResidualBlock::new(store, rng, &join(p, &format!("res{i}")), c))
                .collect::<Result<_>>()?,
            sff: Sff::new(store, rng, &join(p, "sff1"), c)?,
            up: Upsample::new(store, rng, &join(p, "up1"), c, c)?,
            head: Head::new(store, rng, &join(p, "head"), c)?,
        })
    }

    pub fn forward(&self, store: &mut ParameterStore, ctx: &Ctx, fundus: &Tensor, coarse_feat: &Tensor) -> Result<Tensor> {
        check_input(fundus, self.size, 3, "fine_forward")?;
        let d = self.down.forward(store, ctx, fundus)?;
        if coarse_feat.shape() != d.shape() {
            return Err(Error::shape("fine_forward injection", d.shape(), coarse_feat.shape()));
        }
        let z = d.add(coarse_feat)?;
        let mut r = z.clone();
        for block in &self.res {
            r = block.forward(store, ctx, &r)?;
        }
        let s1 = self.sff.forward(store, ctx, &z)?;
        let u = self.up.forward(store, ctx, &r.add(&s1)?)?;
        self.head.forward(store, &u)
    }

    pub fn injection_channels(&self) -> usize {
        self.channels
    }
}

/// Both generators plus the half-resolution resampling that feeds the
/// coarse one.
#[derive(Debug, Clone)]
pub struct GeneratorPair {
    pub coarse: CoarseGenerator,
    pub fine: FineGenerator,
}

/// Output of the two-scale synthesis.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub fine: Tensor,
    pub coarse: Tensor,
    pub coarse_feat: Tensor,
}

/// Lanczos-downscales every image of an NHWC batch by 2. The result carries
/// no gradient.
pub fn downscale_batch(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::invalid_shape("downscale_batch", format!("expected NHWC, got {:?}", x.shape())));
    }
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Vec::with_capacity(n * h * w * c / 4);
    for img in x.data().chunks_exact(h * w * c) {
        out.extend(lanczos_downscale(img, h, w, c, 2)?);
    }
    Tensor::new(out, &[n, h / 2, w / 2, c])
}

impl GeneratorPair {
    pub fn new(store: &mut ParameterStore, rng: &mut impl Rng, cfg: &GanConfig) -> Result<Self> {
        Ok(GeneratorPair {
            coarse: CoarseGenerator::new(store, rng, cfg)?,
            fine: FineGenerator::new(store, rng, cfg)?,
        })
    }

    /// Runs both generators on a full-resolution fundus batch.
    pub fn synthesize(&self, store: &mut ParameterStore, ctx: &Ctx, fundus: &Tensor) -> Result<Synthesis> {
        let lo = downscale_batch(fundus)?;
        self.synthesize_with_coarse_input(store, ctx, fundus, &lo)
    }

    /// Like [`GeneratorPair::synthesize`] with a precomputed half-resolution input.
    pub fn synthesize_with_coarse_input(&self, store: &mut ParameterStore, ctx: &Ctx, fundus: &Tensor, fundus_lo: &Tensor) -> Result<Synthesis> {
        let (coarse, coarse_feat) = self.coarse.forward(store, ctx, fundus_lo)?;
        let fine = self.fine.forward(store, ctx, fundus, &coarse_feat)?;
        Ok(Synthesis {
            fine,
            coarse,
            coarse_feat,
        })
    }
}
