//! Fixtures shared by the criterion benches. Purification cost does not
//! depend on trained weights, so the benches run on freshly initialized
//! purifiers and a classifier taken straight from its init.

use patchpure_core::dataset::{synthetic_textures, TextureSpec};
use patchpure_core::models::{train_classifier, Architecture, Classifier, TrainConfig};
use patchpure_core::purify::{EncoderFamily, Purifier, PurifierPool};
use patchpure_core::rng::Stream;
use patchpure_core::tensor::Tensor;

pub const DEPTH: usize = 32;

/// Pool of `size` untrained purifiers, alternating encoder families.
pub fn stand_in_pool(size: usize, seed: u64) -> PurifierPool {
    let stream = Stream::master(seed);
    let families = [EncoderFamily::EdsrLite, EncoderFamily::RcanLite];
    let members: Vec<Purifier> = (0..size)
        .map(|i| {
            Purifier::build(families[i % families.len()], DEPTH, &stream.derive(i as u64))
                .expect("known family and depth")
        })
        .collect();
    PurifierPool::from_purifiers(members, &[], stream.id()).expect("non-empty pool")
}

/// One synthetic texture image of the given extent.
pub fn sample_image(height: usize, width: usize, seed: u64) -> Tensor {
    let spec = TextureSpec::new(2, 2, height, width);
    let data = synthetic_textures(&spec, &Stream::master(seed)).expect("valid spec");
    data.images.into_iter().next().expect("n = 2")
}

/// An initialized (epochs = 0) linear classifier over `[3, height, width]`.
pub fn stand_in_classifier(height: usize, width: usize, seed: u64) -> Classifier {
    let spec = TextureSpec::new(4, 2, height, width);
    let data = synthetic_textures(&spec, &Stream::master(seed)).expect("valid spec");
    let arch = Architecture::linear(3 * height * width, 2);
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    train_classifier(&data, arch, &cfg, &Stream::master(seed))
        .expect("init cannot diverge")
        .0
}
