pub mod discriminator;
pub mod generators;

pub use discriminator::{embed, patchify, unpatchify, DiscriminatorPair, VisionTransformer, VtOutput};
pub use generators::{downscale_batch, CoarseGenerator, FineGenerator, GeneratorPair, Synthesis};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::GanConfig;
use crate::error::Result;
use crate::tensor::ParameterStore;

/// All four networks with their parameters in one store.
#[derive(Debug, Clone)]
pub struct Vtgan {
    pub config: GanConfig,
    pub generators: GeneratorPair,
    pub discriminators: DiscriminatorPair,
}

impl Vtgan {
    /// Builds the networks and registers freshly initialized parameters.
    pub fn new(cfg: &GanConfig, seed: u64) -> Result<(Vtgan, ParameterStore)> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generators = GeneratorPair::new(&mut store, &mut rng, cfg)?;
        let discriminators = DiscriminatorPair::new(&mut store, &mut rng, cfg)?;
        Ok((
            Vtgan {
                config: cfg.clone(),
                generators,
                discriminators,
            },
            store,
        ))
    }

    pub const GENERATOR_PREFIXES: [&'static str; 2] = [generators::COARSE_PREFIX, generators::FINE_PREFIX];
    pub const DISCRIMINATOR_PREFIXES: [&'static str; 2] = [discriminator::FINE_PREFIX, discriminator::COARSE_PREFIX];
}
