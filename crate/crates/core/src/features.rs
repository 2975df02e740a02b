//! Fixed image feature extractors for the perceptual loss and for FID/KID.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Conv};
use crate::tensor::{no_grad, Padding, ParameterStore, Tensor};
use crate::weights::WeightFile;

/// Seed of the default random extractor; fixed so that feature clouds from
/// different runs are comparable.
pub const DEFAULT_EXTRACTOR_SEED: u64 = 7;

/// The extractor stored at `path`, or the seeded random one.
pub fn load_extractor(path: Option<&Path>) -> Result<Arc<dyn FeatureExtractor>> {
    Ok(match path {
        Some(p) => Arc::new(ConvStack::load(p)?),
        None => Arc::new(ConvStack::desk(DEFAULT_EXTRACTOR_SEED)),
    })
}

pub trait FeatureExtractor: Send + Sync {
    /// Identifies the extractor; feature clouds from different ids are not
    /// comparable.
    fn id(&self) -> &str;

    /// Activations of every tapped layer for an NHWC batch. Differentiable
    /// with respect to the input.
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;

    /// One pooled vector per image: global average of the last tap.
    fn embed(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let _guard = no_grad();
        let feats = self.features(x)?;
        let last = feats.last().ok_or_else(|| Error::InvalidArgument("extractor has no taps".into()))?;
        let pooled = last.global_avg_pool()?;
        let d = pooled.shape()[1];
        Ok(pooled.data().chunks_exact(d).map(<[f64]>::to_vec).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    /// 2x2 max pooling after the activation.
    pub pool: bool,
    /// Whether this layer's activation is returned by `features`.
    pub tap: bool,
}

/// A plain stack of same-padded convolutions with ReLU, optionally pooled.
/// Single-channel inputs are replicated when the first layer expects three.
#[derive(Debug, Clone)]
pub struct ConvStack {
    id: String,
    layers: Vec<ConvLayerSpec>,
    convs: Vec<Conv>,
    store: ParameterStore,
}

fn layer_path(i: usize) -> String {
    format!("layer{i}")
}

impl ConvStack {
    fn build(id: &str, layers: Vec<ConvLayerSpec>, store: &mut ParameterStore, seed: u64) -> Result<ConvStack> {
        if layers.is_empty() || !layers.iter().any(|l| l.tap) {
            return Err(Error::InvalidArgument("extractor needs at least one tapped layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(layers.len());
        for (i, l) in layers.iter().enumerate() {
            if i > 0 && layers[i - 1].cout != l.cin {
                return Err(Error::InvalidArgument(format!("layer {i} expects {} channels, previous gives {}", l.cin, layers[i - 1].cout)));
            }
            convs.push(Conv::new(store, &mut rng, &layer_path(i), l.cin, l.cout, l.kernel, l.stride, Padding::Same, true)?);
        }
        Ok(ConvStack {
            id: id.to_string(),
            layers,
            convs,
            store: std::mem::take(store),
        })
    }

    /// Seeded random-weight extractor: three stride-2 convolutions
    /// (1 -> 16 -> 32 -> 64 channels), every layer tapped.
    pub fn desk(seed: u64) -> ConvStack {
        let spec = |cin, cout| ConvLayerSpec {
            cin,
            cout,
            kernel: 3,
            stride: 2,
            pool: false,
            tap: true,
        };
        let layers = vec![spec(1, 16), spec(16, 32), spec(32, 64)];
        let mut store = ParameterStore::new();
        let mut fx = ConvStack::build(&format!("desk-cnn-{seed}"), layers, &mut store, seed).expect("valid desk layout");
        fx.store.freeze("");
        // random biases keep some units active for every input
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for i in 0..fx.layers.len() {
            let path = join(&layer_path(i), "bias");
            let n = fx.store.values(&path).map(|v| v.len()).unwrap_or(0);
            let b = crate::tensor::init::uniform(n, 0.1, &mut rng);
            fx.store.set_value(&path, b).expect("bias exists");
        }
        fx
    }

    /// VGG-19 convolutional layout (16 conv layers, 5 pooling stages) tapped
    /// after the last convolution of each stage.
    pub fn vgg19_layout() -> Vec<ConvLayerSpec> {
        let stages: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)];
        let mut layers = Vec::new();
        let mut cin = 3;
        for (cout, reps) in stages {
            for r in 0..reps {
                let last = r + 1 == reps;
                layers.push(ConvLayerSpec {
                    cin,
                    cout,
                    kernel: 3,
                    stride: 1,
                    pool: last,
                    tap: last,
                });
                cin = cout;
            }
        }
        layers
    }

    /// Randomly initialized stack with the given layout.
    pub fn random(id: &str, layers: Vec<ConvLayerSpec>, seed: u64) -> Result<ConvStack> {
        let mut store = ParameterStore::new();
        let mut fx = ConvStack::build(id, layers, &mut store, seed)?;
        fx.store.freeze("");
        Ok(fx)
    }

    pub fn layers(&self) -> &[ConvLayerSpec] {
        &self.layers
    }

    pub fn taps(&self) -> usize {
        self.layers.iter().filter(|l| l.tap).count()
    }

    /// Weight file with `{"id", "layers", "taps"}` in its metadata.
    pub fn to_weight_file(&self) -> Result<WeightFile> {
        let taps: Vec<usize> = (0..self.layers.len()).filter(|&i| self.layers[i].tap).collect();
        let meta = serde_json::json!({
            "id": self.id,
            "layers": self.layers,
            "taps": taps,
        });
        WeightFile::from_store(&self.store, &[], meta)
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<ConvStack> {
        let meta = &file.meta;
        let id = meta["id"].as_str().ok_or_else(|| Error::WeightFormat("extractor id missing".into()))?;
        let mut layers: Vec<ConvLayerSpec> = serde_json::from_value(meta["layers"].clone())
            .map_err(|e| Error::WeightFormat(format!("extractor layers: {e}")))?;
        let taps: Vec<usize> = serde_json::from_value(meta["taps"].clone())
            .map_err(|e| Error::WeightFormat(format!("extractor taps: {e}")))?;
        for (i, l) in layers.iter_mut().enumerate() {
            l.tap = taps.contains(&i);
        }
        let mut store = ParameterStore::new();
        let mut fx = ConvStack::build(id, layers, &mut store, 0)?;
        file.load_into(&mut fx.store, &[])?;
        fx.store.freeze("");
        Ok(fx)
    }

    pub fn load(path: &Path) -> Result<ConvStack> {
        ConvStack::from_weight_file(&WeightFile::load(path)?)
    }
}

impl FeatureExtractor for ConvStack {
    fn id(&self) -> &str {
        &self.id
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        if x.rank() != 4 {
            return Err(Error::invalid_shape("features", format!("expected NHWC, got {:?}", x.shape())));
        }
        let cin = self.layers[0].cin;
        let mut h = match (x.shape()[3], cin) {
            (a, b) if a == b => x.clone(),
            (1, 3) => Tensor::concat(&[x.clone(), x.clone(), x.clone()], 3)?,
            (a, b) => return Err(Error::shape("features", x.shape(), &[b, a])),
        };
        let mut out = Vec::with_capacity(self.taps());
        for (spec, conv) in self.layers.iter().zip(&self.convs) {
            h = conv.forward(&self.store, &h)?.relu();
            if spec.tap {
                out.push(h.clone());
            }
            if spec.pool {
                h = h.max_pool2x2()?;
            }
        }
        Ok(out)
    }
}

/// Passes the input through unchanged as its single tap.
#[derive(Debug, Clone, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn id(&self) -> &str {
        "identity"
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: f64) -> Tensor {
        Tensor::new((0..2 * 16 * 16).map(|i| ((i as f64) * 0.13 + seed).sin()).collect(), &[2, 16, 16, 1]).unwrap()
    }

    #[test]
    fn desk_extractor_shapes_and_determinism() {
        let fx = ConvStack::desk(7);
        let f = fx.features(&image(0.0)).unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(f[2].shape(), &[2, 2, 2, 64]);
        let e = fx.embed(&image(0.0)).unwrap();
        assert_eq!((e.len(), e[0].len()), (2, 64));
        assert_eq!(e, ConvStack::desk(7).embed(&image(0.0)).unwrap());
    }

    #[test]
    fn weight_file_round_trip() {
        let fx = ConvStack::desk(3);
        let back = ConvStack::from_weight_file(&WeightFile::decode(&fx.to_weight_file().unwrap().encode().unwrap()).unwrap()).unwrap();
        assert_eq!(back.id(), fx.id());
        assert_eq!(back.embed(&image(1.0)).unwrap(), fx.embed(&image(1.0)).unwrap());
    }

    #[test]
    fn vgg_layout_has_sixteen_convs_and_five_taps() {
        let l = ConvStack::vgg19_layout();
        assert_eq!(l.len(), 16);
        assert_eq!(l.iter().filter(|s| s.tap).count(), 5);
        let fx = ConvStack::random("vgg19-random", l, 0).unwrap();
        let f = fx.features(&Tensor::zeros(&[1, 32, 32, 1])).unwrap();
        assert_eq!(f[4].shape(), &[1, 2, 2, 512]);
    }
}
