use rand::Rng;

use super::layers::{BatchNorm, Conv, SeparableConv, TransposedConv};
use super::{join, Ctx};
use crate::error::Result;
use crate::tensor::{Padding, ParameterStore, Tensor, LEAKY_SLOPE};

/// Strided convolution, batch norm, LeakyReLU. Halves the spatial extent.
#[derive(Debug, Clone)]
pub struct Downsample {
    conv: Conv,
    bn: BatchNorm,
}

impl Downsample {
    pub fn new(store: &mut ParameterStore, rng: &mut impl Rng, path: &str, cin: usize, cout: usize) -> Result<Self> {
        // no conv bias: batch norm removes it
        Ok(Downsample {
            conv: Conv::new(store, rng, &join(path, "conv"), cin, cout, 3, 2, Padding::Same, false)?,
            bn: BatchNorm::new(store, &join(path, "bn"), cout)?,
        })
    }

    pub fn forward(&self, store: &mut ParameterStore, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(store, x)?;
        Ok(self.bn.forward(store, ctx, &y)?.leaky_relu(LEAKY_SLOPE))
    }
}

/// Transposed convolution, batch norm, LeakyReLU. Doubles the spatial extent.
#[derive(Debug, Clone)]
pub struct Upsample {
    conv: TransposedConv,
    bn: BatchNorm,
}

impl Upsample {
    pub fn new(store: &mut ParameterStore, rng: &mut impl Rng, path: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Upsample {
            conv: TransposedConv::new(store, rng, &join(path, "tconv"), cin, cout, 3, 2)?,
            bn: BatchNorm::new(store, &join(path, "bn"), cout)?,
        })
    }

    pub fn forward(&self, store: &mut ParameterStore, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(store, x)?;
        Ok(self.bn.forward(store, ctx, &y)?.leaky_relu(LEAKY_SLOPE))
    }
}

/// Convolution (k=3, s=1), batch norm, LeakyReLU.
#[derive(Debug, Clone)]
pub struct Cbl {
    conv: Conv,
    bn: BatchNorm,
}

impl Cbl {
    pub fn new(store: &mut ParameterStore, rng: &mut impl Rng, path: &str, channels: usize) -> Result<Self> {
        Ok(Cbl {
            conv: Conv::new(store, rng, &join(path, "conv"), channels, channels, 3, 1, Padding::Same, false)?,
            bn: BatchNorm::new(store, &join(path, "bn"), channels)?,
        })
    }

    pub fn forward(&self, store: &mut ParameterStore, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(store, x)?;
        Ok(self.bn.forward(store, ctx, &y)?.leaky_relu(LEAKY_SLOPE))
    }
}

/// Spatial feature fusion: two conv units, each with a skip from the block
/// input.
#[derive(Debug, Clone)]
pub struct Sff {
    unit1: Cbl,
    unit2: Cbl,
}

impl Sff {
    pub fn new(store: &mut ParameterStore, rng: &mut impl Rng, path: &str, channels: usize) -> Result<Self> {
        Ok(Sff {
            unit1: Cbl::new(store, rng, &join(path, "unit1"), channels)?,
            unit2: Cbl::new(store, rng, &join(path, "unit2"), channels)?,
        })
    }

    pub fn forward(&self, store: &mut ParameterStore, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let s1 = x.add(&self.unit1.forward(store, ctx, x)?)?;
        x.add(&self.unit2.forward(store, ctx, &s1)?)
    }
}

/// Reflection pad, separable convolution, batch norm, LeakyReLU. The pad
/// equals the dilation so the spatial extent is kept.
#[derive(Debug, Clone)]
pub struct SepConvBn {
    pad: usize,
    conv: SeparableConv,
    bn: BatchNorm,
}

impl SepConvBn {
    pub fn new(store: &mut ParameterStore, rng: &mut impl Rng, path: &str, channels: usize, dilation: usize) -> Result<Self> {
        Ok(SepConvBn {
            pad: dilation,
            conv: SeparableConv::new(store, rng, &join(path, "sepconv"), channels, channels, 3, dilation, Padding::Valid)?,
            bn: BatchNorm::new(store, &join(path, "bn"), channels)?,
        })
    }

    pub fn forward(&self, store: &mut ParameterStore, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(store, &x.reflection_pad(self.pad)?)?;
        Ok(self.bn.forward(store, ctx, &y)?.leaky_relu(LEAKY_SLOPE))
    }
}

/// Residual block with a shared stem feeding a d=1 and a d=2 branch; the
/// branch outputs and the block input are summed.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    stem: SepConvBn,
    branch_d1: SepConvBn,
    branch_d2: SepConvBn,
}

impl ResidualBlock {
    pub fn new(store: &mut ParameterStore, rng: &mut impl Rng, path: &str, channels: usize) -> Result<Self> {
        Ok(ResidualBlock {
            stem: SepConvBn::new(store, rng, &join(path, "stem"), channels, 1)?,
            branch_d1: SepConvBn::new(store, rng, &join(path, "branch_d1"), channels, 1)?,
            branch_d2: SepConvBn::new(store, rng, &join(path, "branch_d2"), channels, 2)?,
        })
    }

    pub fn forward(&self, store: &mut ParameterStore, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let stem = self.stem.forward(store, ctx, x)?;
        let a = self.branch_d1.forward(store, ctx, &stem)?;
        let b = self.branch_d2.forward(store, ctx, &stem)?;
        a.add(&b)?.add(x)
    }
}
