use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{architecture, data_root, DatasetSpec, ExperimentConfig};
use crate::dataio::{
    inject_ood, load_cifar100_pool, synth_ood_pool, Dataset, Origin, SampleId, Split, SynthSpec,
    DEFAULT_CIFAR100_EXCLUDED,
};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::trainer::{train, NoHook, RunReport, TrainConfig};

/// Where the samples whose memorization is measured come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectSource {
    /// The synthetic generator's label-flipped samples.
    Flipped,
    /// Points from extra synthetic clusters no class uses.
    SynthOod,
    /// CIFAR-100 images from classes not shared with CIFAR-10.
    Cifar100,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemorizationSpec {
    pub source: InjectSource,
    /// Samples to inject (ignored for `flipped`).
    #[serde(default)]
    pub count: usize,
    #[serde(default = "default_clusters")]
    pub ood_clusters: usize,
    /// CIFAR-100 fine labels kept out of the pool.
    #[serde(default)]
    pub cifar100_excluded: Option<Vec<usize>>,
}

fn default_clusters() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub sample_id: SampleId,
    pub assigned: usize,
    pub predicted: usize,
    pub learned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationResult {
    /// Share of injected samples predicted as their assigned label.
    pub fraction_learned: f64,
    pub verdicts: Vec<Verdict>,
}

fn inject(train: &Dataset, spec: &MemorizationSpec, ds: &DatasetSpec, seed: u64) -> Result<(Dataset, Vec<SampleId>)> {
    match spec.source {
        InjectSource::Flipped => Ok((train.clone(), train.ids_with_origin(Origin::LabelFlipped))),
        InjectSource::SynthOod => {
            let DatasetSpec::Synth { train: s, .. } = ds else {
                return Err(Error::config("synth_ood injection needs a synthetic dataset"));
            };
            let s = SynthSpec {
                seed: s.seed.wrapping_add(seed),
                ..s.clone()
            };
            let pool = synth_ood_pool(&s, spec.ood_clusters, spec.count)?;
            inject_ood(train, &pool, spec.count, train.num_classes(), seed)
        }
        InjectSource::Cifar100 => {
            let DatasetSpec::Image { root, .. } = ds else {
                return Err(Error::config("cifar100 injection needs an image dataset"));
            };
            let excluded = spec.cifar100_excluded.as_deref().unwrap_or(DEFAULT_CIFAR100_EXCLUDED);
            let pool = load_cifar100_pool(&data_root(root)?, Split::Train, excluded)?;
            inject_ood(train, &pool, spec.count, train.num_classes(), seed)
        }
    }
}

/// Injects OOD (or uses flipped) samples, trains on the result, and reports
/// how many injected samples end up predicted as their assigned label on
/// clean inputs. Returns the result, the trained model, its report and the
/// training set actually used.
pub fn memorization_experiment(
    train_set: &Dataset,
    test: Option<&Dataset>,
    spec: &MemorizationSpec,
    cfg: &ExperimentConfig,
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<(MemorizationResult, Classifier, RunReport, Dataset)> {
    let (data, injected) = inject(train_set, spec, &cfg.dataset, seed)?;
    if injected.is_empty() {
        return Err(Error::EmptyInput(
            "memorization needs at least one injected sample; the learned fraction is undefined".into(),
        ));
    }
    let arch = architecture(&cfg.model, &data);
    let mut model = Classifier::new(arch, tcfg.seed)?;
    let out = train(&mut model, &data, test, tcfg, Some(&cfg.attack), &mut NoHook)?;
    let result = verdicts(&model, &data, &injected)?;
    Ok((result, model, out.report, data))
}

/// Clean-input predictions of `model` on the `injected` samples of `data`.
pub fn verdicts(model: &Classifier, data: &Dataset, injected: &[SampleId]) -> Result<MemorizationResult> {
    let wanted: HashSet<SampleId> = injected.iter().copied().collect();
    let idx: Vec<usize> = (0..data.len()).filter(|&i| wanted.contains(&data.samples()[i].id)).collect();
    if idx.is_empty() {
        return Err(Error::EmptyInput("no injected samples found in the dataset".into()));
    }
    let mut m = model.clone();
    m.set_mode(crate::model::Mode::Eval);
    let (x, y) = data.batch(&idx);
    let pred = m.predict(&x)?;
    let verdicts: Vec<Verdict> = idx
        .iter()
        .zip(pred.iter().zip(&y))
        .map(|(&i, (&p, &t))| Verdict {
            sample_id: data.samples()[i].id,
            assigned: t,
            predicted: p,
            learned: p == t,
        })
        .collect();
    let learned = verdicts.iter().filter(|v| v.learned).count();
    Ok(MemorizationResult {
        fraction_learned: learned as f64 / verdicts.len() as f64,
        verdicts,
    })
}
