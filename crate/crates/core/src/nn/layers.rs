use rand::Rng;

use super::{join, Ctx};
use crate::error::Result;
use crate::tensor::{init, Padding, ParameterStore, Tensor, BN_MOMENTUM};

#[derive(Debug, Clone)]
pub struct Conv {
    pub path: String,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
    pub bias: bool,
}

impl Conv {
    /// Registers a `[k, k, cin, cout]` weight (and optional bias) under `path`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut impl Rng,
        path: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    ) -> Result<Conv> {
        let shape = [kernel, kernel, cin, cout];
        store.insert_parameter(&join(path, "weight"), init::glorot_uniform(&shape, rng), &shape)?;
        if bias {
            store.insert_parameter(&join(path, "bias"), vec![0.0; cout], &[cout])?;
        }
        Ok(Conv {
            path: path.to_string(),
            kernel,
            stride,
            dilation: 1,
            padding,
            bias,
        })
    }

    pub fn forward(&self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        let w = store.get(&join(&self.path, "weight"))?;
        let b = if self.bias { Some(store.get(&join(&self.path, "bias"))?) } else { None };
        x.conv2d(&w, b.as_ref(), self.stride, self.dilation, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct TransposedConv {
    pub path: String,
    pub stride: usize,
}

impl TransposedConv {
    /// Registers a `[k, k, cout, cin]` weight under `path`.
    pub fn new(store: &mut ParameterStore, rng: &mut impl Rng, path: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        let shape = [kernel, kernel, cout, cin];
        // fans of the equivalent forward convolution
        let w = init::glorot_uniform(&[kernel, kernel, cin, cout], rng);
        store.insert_parameter(&join(path, "weight"), w, &shape)?;
        Ok(TransposedConv {
            path: path.to_string(),
            stride,
        })
    }

    pub fn forward(&self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        x.transposed_conv2d(&store.get(&join(&self.path, "weight"))?, None, self.stride)
    }
}

#[derive(Debug, Clone)]
pub struct SeparableConv {
    pub path: String,
    pub dilation: usize,
    pub padding: Padding,
}

impl SeparableConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut impl Rng,
        path: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
        padding: Padding,
    ) -> Result<Self> {
        let dw = [kernel, kernel, cin, 1];
        // each depthwise filter maps k*k inputs to one output
        let limit = (3.0 / (kernel * kernel) as f64).sqrt();
        let dw_vals = init::uniform(kernel * kernel * cin, limit, rng);
        store.insert_parameter(&join(path, "dw"), dw_vals, &dw)?;
        let pw = [1, 1, cin, cout];
        store.insert_parameter(&join(path, "pw"), init::glorot_uniform(&pw, rng), &pw)?;
        Ok(SeparableConv {
            path: path.to_string(),
            dilation,
            padding,
        })
    }

    pub fn forward(&self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        let dw = store.get(&join(&self.path, "dw"))?;
        let pw = store.get(&join(&self.path, "pw"))?;
        x.separable_conv2d(&dw, &pw, 1, self.dilation, self.padding)
    }
}

/// Batch normalization over the channel axis with running statistics kept
/// as store buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub path: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParameterStore, path: &str, channels: usize) -> Result<Self> {
        store.insert_parameter(&join(path, "gamma"), vec![1.0; channels], &[channels])?;
        store.insert_parameter(&join(path, "beta"), vec![0.0; channels], &[channels])?;
        store.insert_buffer(&join(path, "running_mean"), vec![0.0; channels], &[channels])?;
        store.insert_buffer(&join(path, "running_var"), vec![1.0; channels], &[channels])?;
        Ok(BatchNorm {
            path: path.to_string(),
            channels,
        })
    }

    pub fn forward(&self, store: &mut ParameterStore, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let gamma = store.get(&join(&self.path, "gamma"))?;
        let beta = store.get(&join(&self.path, "beta"))?;
        let mean_path = join(&self.path, "running_mean");
        let var_path = join(&self.path, "running_var");
        if ctx.is_train() {
            let out = x.batch_norm_train(&gamma, &beta)?;
            let blend = |old: &[f64], new: &[f64]| -> Vec<f64> {
                old.iter().zip(new).map(|(o, n)| BN_MOMENTUM * o + (1.0 - BN_MOMENTUM) * n).collect()
            };
            let mean = blend(store.values(&mean_path)?, &out.batch_mean);
            let var = blend(store.values(&var_path)?, &out.batch_var);
            store.set_value(&mean_path, mean)?;
            store.set_value(&var_path, var)?;
            Ok(out.output)
        } else {
            x.batch_norm_eval(&gamma, &beta, store.values(&mean_path)?, store.values(&var_path)?)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub path: String,
}

impl Dense {
    pub fn new(store: &mut ParameterStore, rng: &mut impl Rng, path: &str, din: usize, dout: usize) -> Result<Self> {
        store.insert_parameter(&join(path, "weight"), init::glorot_uniform(&[din, dout], rng), &[din, dout])?;
        store.insert_parameter(&join(path, "bias"), vec![0.0; dout], &[dout])?;
        Ok(Dense { path: path.to_string() })
    }

    pub fn forward(&self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        x.dense(&store.get(&join(&self.path, "weight"))?, &store.get(&join(&self.path, "bias"))?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub path: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, path: &str, dim: usize) -> Result<Self> {
        store.insert_parameter(&join(path, "gamma"), vec![1.0; dim], &[dim])?;
        store.insert_parameter(&join(path, "beta"), vec![0.0; dim], &[dim])?;
        Ok(LayerNorm { path: path.to_string() })
    }

    pub fn forward(&self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&store.get(&join(&self.path, "gamma"))?, &store.get(&join(&self.path, "beta"))?)
    }
}
