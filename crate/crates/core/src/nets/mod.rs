//! Generator, global and local discriminators, and frozen feature extractors.

pub mod conv;
mod discriminator;
mod features;
mod generator;
pub mod layers;
mod params;

pub use discriminator::{
    Discriminator, DiscriminatorConfig, LChannel, LocalDiscriminator, LocalDiscriminatorConfig, PatchPair,
};
pub use features::{FeatureExtractor, FeatureTaps, Tap, TinyExtractor, TinyExtractorConfig, Vgg19};
pub use generator::{generator_forward, stack_inputs, Generator, GeneratorConfig};
pub use params::{fingerprint, ParamBuilder, ParamStore};
