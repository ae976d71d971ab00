//! Desk-scale synthetic benchmark: isotropic Gaussian class clusters inside
//! the unit cube, with a recorded fraction of labels flipped.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Origin, Sample, Split};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub n_per_class: usize,
    /// `[d]` for feature vectors or `[c, h, w]` for images.
    pub shape: Vec<usize>,
    /// Distance of each class centre from the cube centre.
    pub class_separation: f64,
    #[serde(default = "default_cluster_std")]
    pub cluster_std: f64,
    pub noise_frac: f64,
    pub seed: u64,
    #[serde(default = "default_split")]
    pub split: Split,
}

fn default_cluster_std() -> f64 {
    0.1
}

fn default_split() -> Split {
    Split::Train
}

impl SynthSpec {
    /// Default desk benchmark: K=4, 500 per class, 16-d, 5% flipped labels.
    pub fn desk(seed: u64) -> Self {
        Self {
            num_classes: 4,
            n_per_class: 500,
            shape: vec![16],
            class_separation: 0.3,
            cluster_std: default_cluster_std(),
            noise_frac: 0.05,
            seed,
            split: Split::Train,
        }
    }

    /// Held-out split drawn from the same class clusters, with clean labels.
    pub fn test_split(&self, n_per_class: usize) -> Self {
        Self {
            n_per_class,
            noise_frac: 0.0,
            split: Split::Test,
            ..self.clone()
        }
    }

    pub fn num_samples(&self) -> usize {
        self.num_classes * self.n_per_class
    }

    pub fn flip_count(&self) -> usize {
        (self.noise_frac * self.num_samples() as f64).floor() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("synthetic data needs at least 2 classes"));
        }
        if self.n_per_class == 0 {
            return Err(Error::config("n_per_class must be positive"));
        }
        if self.shape.is_empty() || self.shape.contains(&0) {
            return Err(Error::config(format!("bad synthetic shape {:?}", self.shape)));
        }
        if !(0.0..1.0).contains(&self.noise_frac) {
            return Err(Error::config(format!("noise_frac {} outside [0,1)", self.noise_frac)));
        }
        if !(self.class_separation.is_finite() && self.class_separation >= 0.0) {
            return Err(Error::config("class_separation must be finite and non-negative"));
        }
        if !(self.cluster_std.is_finite() && self.cluster_std > 0.0) {
            return Err(Error::config("cluster_std must be positive"));
        }
        Ok(())
    }

    fn dim(&self) -> usize {
        self.shape.iter().product()
    }
}

fn unit_direction<R: Rng>(r: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(r)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn centres(spec: &SynthSpec, count: usize, stream: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(spec.seed, stream);
    (0..count)
        .map(|_| {
            unit_direction(&mut r, spec.dim())
                .into_iter()
                .map(|u| 0.5 + spec.class_separation * u)
                .collect()
        })
        .collect()
}

fn draw<R: Rng>(r: &mut R, centre: &[f64], std: f64) -> Vec<f64> {
    centre
        .iter()
        .map(|c| {
            let z: f64 = StandardNormal.sample(r);
            (c + std * z).clamp(0.0, 1.0)
        })
        .collect()
}

/// Generates the dataset. Ids run 0..N in generation order (round-robin over
/// classes); `floor(noise_frac·N)` uniformly chosen samples get a uniformly
/// chosen wrong label and the `label_flipped` tag.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let centres = centres(spec, spec.num_classes, rng::STREAM_DATA);
    let split_salt = match spec.split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let mut r = rng::stream(rng::derive_seed(spec.seed, split_salt), rng::STREAM_DATA);
    let n = spec.num_samples();
    let mut samples: Vec<Sample> = (0..n)
        .map(|i| {
            let y = i % spec.num_classes;
            Sample {
                id: i as u64,
                x: draw(&mut r, &centres[y], spec.cluster_std),
                y,
                origin: Origin::Native,
            }
        })
        .collect();

    let mut nr = rng::stream(rng::derive_seed(spec.seed, split_salt), rng::STREAM_NOISE);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut nr);
    for &i in &order[..spec.flip_count()] {
        let s = &mut samples[i];
        let shift = nr.random_range(1..spec.num_classes);
        s.y = (s.y + shift) % spec.num_classes;
        s.origin = Origin::LabelFlipped;
    }

    let generator = serde_json::to_string(spec).expect("spec serializes");
    Ok(Dataset::new(
        format!("synth-k{}-d{}", spec.num_classes, spec.dim()),
        spec.num_classes,
        spec.shape.clone(),
        samples,
    )?
    .with_generator(generator))
}

/// Out-of-distribution pool for the synthetic benchmark: draws from `clusters`
/// extra Gaussian clusters whose centres are independent of the class centres.
pub fn synth_ood_pool(spec: &SynthSpec, clusters: usize, count: usize) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    if clusters == 0 {
        return Err(Error::config("OOD pool needs at least one cluster"));
    }
    let centres = centres(spec, clusters, rng::STREAM_INJECT);
    let mut r = rng::stream(rng::derive_seed(spec.seed, 2), rng::STREAM_INJECT);
    Ok((0..count)
        .map(|i| draw(&mut r, &centres[i % clusters], spec.cluster_std))
        .collect())
}
