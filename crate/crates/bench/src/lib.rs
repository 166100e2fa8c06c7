//! Shared builders for the benchmarks: a deterministic gallery, a probe
//! batch and a transformation net sized like the default experiment.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use cmce_core::embedding::{EmbeddingItem, EmbeddingSet, EmbeddingVector};
use cmce_core::transform::{init_transform, TransformNet};

pub const DIM: usize = 64;
pub const GALLERY_CLASSES: u32 = 100;
pub const SAMPLES_PER_CLASS: u32 = 8;

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn random_vector(rng: &mut StdRng, dim: usize) -> EmbeddingVector {
    EmbeddingVector::new((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// A gallery-sized embedding set with contiguous item ids.
pub fn gallery_set(seed: u64) -> EmbeddingSet {
    let mut rng = rng(seed);
    let mut set = EmbeddingSet::new("bench", DIM).unwrap();
    let mut item_id = 0;
    for class in 0..GALLERY_CLASSES {
        for _ in 0..SAMPLES_PER_CLASS {
            set.push(EmbeddingItem {
                item_id,
                class_label: class,
                vector: random_vector(&mut rng, DIM),
            })
            .unwrap();
            item_id += 1;
        }
    }
    set
}

pub fn net(seed: u64) -> TransformNet {
    let mut net = init_transform(DIM, DIM, seed, false).unwrap();
    let mut rng = rng(seed ^ 0x9e37);
    net.randomize(&mut rng, 0.2);
    net
}
