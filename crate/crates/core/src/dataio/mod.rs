//! Datasets: samples with stable ids, synthetic generators, real benchmark
//! loaders, OOD injection, and manifest persistence.

mod blob;
mod cifar;
mod manifest;
mod svhn;
mod synth;

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use blob::{load_blob, save_blob};
pub use cifar::{load_cifar10, load_cifar100_pool, DEFAULT_CIFAR100_EXCLUDED};
pub use manifest::{load_manifest, save_manifest, DatasetManifest};
pub use svhn::load_svhn;
pub use synth::{synth_dataset, synth_ood_pool, SynthSpec};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub type SampleId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Native,
    InjectedOod,
    LabelFlipped,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Native => "native",
            Origin::InjectedOod => "injected_ood",
            Origin::LabelFlipped => "label_flipped",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "native" => Some(Origin::Native),
            "injected_ood" => Some(Origin::InjectedOod),
            "label_flipped" => Some(Origin::LabelFlipped),
            _ => None,
        }
    }

    /// Whether the stored label is trustworthy.
    pub fn is_correctly_labeled(self) -> bool {
        self == Origin::Native
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: SampleId,
    pub x: Vec<f64>,
    pub y: usize,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// An immutable labeled dataset. Filtering keeps ids; nothing renumbers.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    num_classes: usize,
    item_shape: Vec<usize>,
    samples: Vec<Sample>,
    generator: Option<String>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, num_classes: usize, item_shape: Vec<usize>, samples: Vec<Sample>) -> Result<Self> {
        let per: usize = item_shape.iter().product();
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if s.x.len() != per {
                return Err(Error::Shape(format!(
                    "sample {} has {} values, item shape {item_shape:?} needs {per}",
                    s.id,
                    s.x.len()
                )));
            }
            if s.y >= num_classes {
                return Err(Error::Label {
                    label: s.y,
                    num_classes,
                });
            }
            if !seen.insert(s.id) {
                return Err(Error::Manifest(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Self {
            name: name.into(),
            num_classes,
            item_shape,
            samples,
            generator: None,
        })
    }

    pub fn with_generator(mut self, generator: impl Into<String>) -> Self {
        self.generator = Some(generator.into());
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn item_shape(&self) -> &[usize] {
        &self.item_shape
    }

    pub fn generator(&self) -> Option<&str> {
        self.generator.as_deref()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn ids(&self) -> Vec<SampleId> {
        self.samples.iter().map(|s| s.id).collect()
    }

    pub fn ids_with_origin(&self, origin: Origin) -> Vec<SampleId> {
        self.samples.iter().filter(|s| s.origin == origin).map(|s| s.id).collect()
    }

    /// Stacks the samples at `indices` (positions, not ids) into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let x = Tensor::stack(&self.item_shape, indices.iter().map(|&i| self.samples[i].x.as_slice()))
            .expect("samples validated at construction");
        let y = indices.iter().map(|&i| self.samples[i].y).collect();
        (x, y)
    }

    /// The whole dataset as one batch, in storage order.
    pub fn all(&self) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    /// Keeps samples matching the predicate; ids and origin tags are untouched.
    pub fn filter(&self, mut keep: impl FnMut(&Sample) -> bool) -> Dataset {
        Dataset {
            name: self.name.clone(),
            num_classes: self.num_classes,
            item_shape: self.item_shape.clone(),
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            generator: self.generator.clone(),
        }
    }

    pub fn without_ids(&self, ids: &HashSet<SampleId>) -> Dataset {
        self.filter(|s| !ids.contains(&s.id))
    }

    pub fn with_ids(&self, ids: &HashSet<SampleId>) -> Dataset {
        self.filter(|s| ids.contains(&s.id))
    }

    /// Seed-deterministic subset of `n` samples, kept in canonical order.
    pub fn subset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::config(format!("subset of {n} from {} samples", self.len())));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(seed, rng::STREAM_SUBSET));
        let mut keep: Vec<usize> = idx[..n].to_vec();
        keep.sort_unstable();
        let keep: HashSet<SampleId> = keep.into_iter().map(|i| self.samples[i].id).collect();
        Ok(self.with_ids(&keep))
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            name: self.name.clone(),
            num_classes: self.num_classes,
            entries: self.samples.iter().map(|s| (s.id, s.origin)).collect(),
            generator: self.generator.clone(),
        }
    }

    fn next_id(&self) -> SampleId {
        self.samples.iter().map(|s| s.id + 1).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageDataset {
    Cifar10,
    Svhn,
}

/// Loads a real benchmark in its published layout, pixels scaled to [0,1],
/// ids in canonical file order, optionally subsampled.
pub fn load_image_dataset(
    name: ImageDataset,
    split: Split,
    root: &Path,
    subset_size: Option<usize>,
    seed: u64,
) -> Result<Dataset> {
    let full = match name {
        ImageDataset::Cifar10 => load_cifar10(root, split)?,
        ImageDataset::Svhn => load_svhn(root, split)?,
    };
    match subset_size {
        Some(n) => full.subset(n, seed),
        None => Ok(full),
    }
}

/// Appends `count` samples drawn without replacement from `pool`, each given
/// a uniformly random label in `[0, K)` and a fresh id.
pub fn inject_ood(
    dataset: &Dataset,
    pool: &[Vec<f64>],
    count: usize,
    num_classes: usize,
    seed: u64,
) -> Result<(Dataset, Vec<SampleId>)> {
    if count > pool.len() {
        return Err(Error::config(format!(
            "cannot inject {count} samples from a pool of {}",
            pool.len()
        )));
    }
    if num_classes != dataset.num_classes {
        return Err(Error::config(format!(
            "injection label space {num_classes} differs from dataset's {}",
            dataset.num_classes
        )));
    }
    let mut r = rng::stream(seed, rng::STREAM_INJECT);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut r);
    let first = dataset.next_id();
    let mut samples = dataset.samples.clone();
    let mut injected = Vec::with_capacity(count);
    for (j, &p) in order[..count].iter().enumerate() {
        let id = first + j as u64;
        samples.push(Sample {
            id,
            x: pool[p].clone(),
            y: r.random_range(0..num_classes),
            origin: Origin::InjectedOod,
        });
        injected.push(id);
    }
    let mut out = Dataset::new(dataset.name.clone(), dataset.num_classes, dataset.item_shape.clone(), samples)?;
    out.generator = dataset.generator.clone();
    Ok((out, injected))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| Sample {
                id: i as u64,
                x: vec![i as f64 / n as f64; 2],
                y: i % 3,
                origin: Origin::Native,
            })
            .collect();
        Dataset::new("tiny", 3, vec![2], samples).unwrap()
    }

    #[test]
    fn duplicate_ids_rejected() {
        let s = Sample {
            id: 1,
            x: vec![0.0],
            y: 0,
            origin: Origin::Native,
        };
        assert!(matches!(
            Dataset::new("d", 2, vec![1], vec![s.clone(), s]),
            Err(Error::Manifest(_))
        ));
    }

    #[test]
    fn subset_is_seed_deterministic() {
        let d = tiny(100);
        let a = d.subset(10, 7).unwrap().ids();
        let b = d.subset(10, 7).unwrap().ids();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_ne!(a, d.subset(10, 8).unwrap().ids());
    }

    #[test]
    fn inject_ood_appends_fresh_ids_with_spread_labels() {
        let d = tiny(30);
        let pool: Vec<Vec<f64>> = (0..80).map(|i| vec![i as f64 / 80.0; 2]).collect();
        let (out, injected) = inject_ood(&d, &pool, 50, 3, 1).unwrap();
        assert_eq!(out.len(), 80);
        assert_eq!(injected.len(), 50);
        let native: HashSet<_> = d.ids().into_iter().collect();
        assert!(injected.iter().all(|id| !native.contains(id)));
        let labels: HashSet<usize> = out
            .samples()
            .iter()
            .filter(|s| s.origin == Origin::InjectedOod)
            .map(|s| s.y)
            .collect();
        assert!(labels.len() > 1);
        assert_eq!(out.ids_with_origin(Origin::InjectedOod), injected);
    }

    #[test]
    fn inject_more_than_pool_is_config_error() {
        let d = tiny(3);
        let pool = vec![vec![0.0, 0.0]; 4];
        assert!(matches!(inject_ood(&d, &pool, 5, 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn filtering_keeps_ids_and_origins() {
        let d = tiny(10);
        let drop: HashSet<SampleId> = [2, 5].into_iter().collect();
        let kept = d.without_ids(&drop);
        assert_eq!(kept.ids(), vec![0, 1, 3, 4, 6, 7, 8, 9]);
        assert!(kept.samples().iter().all(|s| s.origin == Origin::Native));
    }
}
