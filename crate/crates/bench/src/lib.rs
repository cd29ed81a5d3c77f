//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softdist::{CnnModel, Image, NetArch, NetParams};

/// Untrained LeNet-style model on 28x28 grayscale inputs.
pub fn lenet(seed: u64) -> CnnModel {
    let arch = NetArch::lenet([28, 28, 1], 10).expect("valid architecture");
    let params = NetParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(seed)).expect("init");
    CnnModel {
        arch,
        params,
        meta: Default::default(),
    }
}

pub fn random_image(seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..28 * 28).map(|_| rng.gen::<f32>()).collect();
    Image::from_vec(&[28, 28, 1], v).expect("shape")
}
