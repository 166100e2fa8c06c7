//! Synthetic multi-model embedding world.
//!
//! A [`LatentWorld`] holds class prototypes on the unit sphere of a shared
//! latent space. A [`SynthModel`] is a simulated independently trained
//! embedding model: a seeded orthonormal map out of the latent space,
//! followed by a family-specific nonlinearity and keyed Gaussian noise.
//! Two models over the same world see the same latent samples but emit
//! mutually incompatible embedding spaces, which is the condition the
//! transformation training is built to repair.
//!
//! All randomness is counter-keyed: the latent point of a sample depends
//! only on (world seed, class, sample id) and the model noise only on
//! (model seed, class, sample id), so generation order and roster size
//! never change any embedding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingItem, EmbeddingSet, EmbeddingVector, EPS_NORM};
use crate::error::{Error, Result};
use crate::mat::{dot_slices, orthonormal_rows, Mat};
use crate::seedmix;

/// Sample ids live in the low 16 bits of an item id, class labels in the
/// high 16 bits, so the same (class, sample) pair maps to the same item id
/// in every model's embedding set.
const SAMPLE_ID_BITS: u32 = 16;
const SAMPLE_ID_LIMIT: u32 = 1 << SAMPLE_ID_BITS;

pub fn encode_item_id(class_label: u32, sample_id: u32) -> Result<u32> {
    if class_label >= SAMPLE_ID_LIMIT || sample_id >= SAMPLE_ID_LIMIT {
        return Err(Error::invalid_config(format!(
            "class_label {class_label} / sample_id {sample_id} exceed the 16-bit item id fields"
        )));
    }
    Ok((class_label << SAMPLE_ID_BITS) | sample_id)
}

pub fn decode_item_id(item_id: u32) -> (u32, u32) {
    (item_id >> SAMPLE_ID_BITS, item_id & (SAMPLE_ID_LIMIT - 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub latent_dim: usize,
    pub num_classes: u32,
    /// Angular scale (radians) of per-sample perturbation around the class
    /// prototype.
    pub intra_class_spread: f64,
    pub seed: u64,
}

/// Shared latent class world: one unit-norm prototype per class.
#[derive(Debug, Clone)]
pub struct LatentWorld {
    config: WorldConfig,
    prototypes: Vec<Vec<f64>>,
}

pub fn make_world(config: WorldConfig) -> Result<LatentWorld> {
    if config.latent_dim < 8 {
        return Err(Error::invalid_config(format!(
            "latent_dim must be >= 8, got {}",
            config.latent_dim
        )));
    }
    if config.num_classes < 2 {
        return Err(Error::invalid_config(format!(
            "num_classes must be >= 2, got {}",
            config.num_classes
        )));
    }
    if !(config.intra_class_spread >= 0.0 && config.intra_class_spread.is_finite()) {
        return Err(Error::invalid_config(
            "intra_class_spread must be finite and non-negative",
        ));
    }
    let proto_seed = seedmix::mix_str(config.seed, "prototype");
    let prototypes = (0..config.num_classes)
        .map(|c| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seedmix::mix_u64(proto_seed, c as u64));
            unit_gaussian(&mut rng, config.latent_dim)
        })
        .collect();
    Ok(LatentWorld { config, prototypes })
}

impl LatentWorld {
    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn num_classes(&self) -> u32 {
        self.config.num_classes
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn prototype(&self, class_label: u32) -> Result<&[f64]> {
        self.prototypes
            .get(class_label as usize)
            .map(|p| p.as_slice())
            .ok_or_else(|| {
                Error::invalid_config(format!(
                    "class_label {class_label} outside world with {} classes",
                    self.config.num_classes
                ))
            })
    }

    /// Latent point of one sample: the class prototype rotated by a keyed
    /// random angle of scale `intra_class_spread` toward a keyed random
    /// tangent direction. Stays on the unit sphere.
    pub fn latent_point(&self, spec: SampleSpec) -> Result<Vec<f64>> {
        let proto = self.prototype(spec.class_label)?;
        if self.config.intra_class_spread == 0.0 {
            return Ok(proto.to_vec());
        }
        let mut seed = seedmix::mix_str(self.config.seed, "sample");
        seed = seedmix::mix_u64(seed, spec.class_label as u64);
        seed = seedmix::mix_u64(seed, spec.sample_id as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: f64 = StandardNormal.sample(&mut rng);
        let angle = self.config.intra_class_spread * z;
        // Project a Gaussian draw onto the tangent plane at the prototype.
        let tangent = loop {
            let g = unit_gaussian(&mut rng, self.config.latent_dim);
            let along = dot_slices(&g, proto);
            let t: Vec<f64> = g
                .iter()
                .zip(proto)
                .map(|(gi, pi)| gi - along * pi)
                .collect();
            let norm = dot_slices(&t, &t).sqrt();
            if norm > EPS_NORM {
                break t.into_iter().map(|v| v / norm).collect::<Vec<f64>>();
            }
        };
        let (s, c) = angle.sin_cos();
        Ok(proto
            .iter()
            .zip(&tangent)
            .map(|(p, t)| c * p + s * t)
            .collect())
    }
}

/// Architecture stand-ins. Each family applies a different element-wise
/// distortion after the orthonormal map, so cross-family models differ
/// structurally, not just by rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchFamily {
    /// Linear (no distortion).
    A,
    /// tanh squashing with input gain.
    B,
    /// Signed square root.
    C,
}

impl ArchFamily {
    fn gain(self) -> f64 {
        match self {
            ArchFamily::A => 1.0,
            ArchFamily::B => 2.0,
            ArchFamily::C => 1.0,
        }
    }

    fn apply(self, gain: f64, x: &mut [f64]) {
        match self {
            ArchFamily::A => {}
            ArchFamily::B => {
                for v in x {
                    *v = (gain * *v).tanh();
                }
            }
            ArchFamily::C => {
                for v in x {
                    *v = v.signum() * v.abs().sqrt();
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_id: String,
    pub arch_family: ArchFamily,
    pub out_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// A simulated embedding model over a latent world.
#[derive(Debug, Clone)]
pub struct SynthModel {
    config: ModelConfig,
    nonlinearity_gain: f64,
    rotation: Mat,
}

pub fn spawn_model(world: &LatentWorld, config: ModelConfig) -> Result<SynthModel> {
    if config.out_dim < 2 || config.out_dim > world.latent_dim() {
        return Err(Error::invalid_config(format!(
            "out_dim {} must be in 2..={}",
            config.out_dim,
            world.latent_dim()
        )));
    }
    if !(config.noise_sigma >= 0.0 && config.noise_sigma.is_finite()) {
        return Err(Error::invalid_config(
            "noise_sigma must be finite and non-negative",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seedmix::mix_str(config.seed, "rotation"));
    let rotation = orthonormal_rows(&mut rng, config.out_dim, world.latent_dim())?;
    Ok(SynthModel {
        nonlinearity_gain: config.arch_family.gain(),
        config,
        rotation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub class_label: u32,
    pub sample_id: u32,
}

impl SynthModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn model_id(&self) -> &str {
        &self.config.model_id
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    pub fn rotation(&self) -> &Mat {
        &self.rotation
    }

    /// Embed one sample. Output is unit-normalized, then rounded to f32
    /// precision so in-memory values match file round-trips bit for bit.
    pub fn embed(&self, world: &LatentWorld, spec: SampleSpec) -> Result<EmbeddingVector> {
        let latent = world.latent_point(spec)?;
        let mut out = self.rotation.matvec(&latent);
        self.config
            .arch_family
            .apply(self.nonlinearity_gain, &mut out);
        if self.config.noise_sigma > 0.0 {
            let mut seed = seedmix::mix_str(self.config.seed, "noise");
            seed = seedmix::mix_u64(seed, spec.class_label as u64);
            seed = seedmix::mix_u64(seed, spec.sample_id as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in &mut out {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += self.config.noise_sigma * z;
            }
        }
        let normed = crate::embedding::l2_normalize(&EmbeddingVector::new(out)?)?;
        Ok(normed.quantize_f32())
    }
}

/// Embed `samples_per_class` samples of each requested class. Sample ids
/// run from `id_offset`, so calls with non-overlapping offset ranges
/// produce disjoint (class, sample) pairs.
pub fn generate_split(
    world: &LatentWorld,
    model: &SynthModel,
    classes: &[u32],
    samples_per_class: u32,
    id_offset: u32,
) -> Result<EmbeddingSet> {
    if classes.is_empty() || samples_per_class == 0 {
        return Err(Error::invalid_config(
            "split needs at least one class and one sample per class",
        ));
    }
    let mut set = EmbeddingSet::new(model.model_id(), model.out_dim())?;
    for &class in classes {
        for k in 0..samples_per_class {
            let sample_id = id_offset + k;
            let spec = SampleSpec {
                class_label: class,
                sample_id,
            };
            set.push(EmbeddingItem {
                item_id: encode_item_id(class, sample_id)?,
                class_label: class,
                vector: model.embed(world, spec)?,
            })?;
        }
    }
    Ok(set)
}

fn unit_gaussian<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = dot_slices(&v, &v).sqrt();
        if norm > EPS_NORM {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}
