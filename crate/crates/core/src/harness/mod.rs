//! Experiment orchestration: a declarative TOML config describes data, model,
//! training, attack and purification; [`run_experiment`] executes it per R
//! value and seed and writes reports into an output directory.
//!
//! Output layout:
//!
//! ```text
//! <out>/config.toml            effective config
//! <out>/summary.csv            experiment,R,seed,clean_acc,robust_acc,wallclock_s
//! <out>/table.txt              aligned per-R means
//! <out>/data/seed<S>.csv       dataset manifest of the run seed
//! <out>/scores/seed<S>.csv     offline k-fold scores (offline sweeps)
//! <out>/runs/R<r>-seed<S>/     report.json, epochs.csv, purified.csv,
//!                              removals.csv, scores.csv, model.ckpt
//! ```

pub mod desk;
mod memorization;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::dataio::{load_image_dataset, save_manifest, synth_dataset, Dataset, ImageDataset, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Architecture, Checkpoint, Preset};
use crate::purification::{
    offline_scores, run_purification, sample_statuses, save_removal_history, statuses_to_csv, train_without,
    Action, PurifyConfig, Setup, Strategy,
};
use crate::scoring::{save_scores, ScoreRecord};
use crate::trainer::{evaluate, EvalResult, RunReport, TrainConfig};

pub use memorization::{memorization_experiment, verdicts as memorization_verdicts, InjectSource, MemorizationResult, MemorizationSpec, Verdict};
pub use report::{
    compare_report, literature_from_toml, load_run_records, render_table, summary_csv, ComparisonRow,
    ComparisonTable, Literature, LiteratureRow, LiteratureTarget, RowSource, RunRecord, DEFAULT_LITERATURE,
};

pub const CONFIG_VERSION: u32 = 1;

/// Environment variable naming the directory that holds the image datasets.
pub const DATA_ROOT_ENV: &str = "PURIFYAT_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Baseline,
    OfflineSweep,
    Online,
    CleanTrain,
    Memorization,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Baseline => "baseline",
            ExperimentKind::OfflineSweep => "offline_sweep",
            ExperimentKind::Online => "online",
            ExperimentKind::CleanTrain => "clean_train",
            ExperimentKind::Memorization => "memorization",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Synthetic clusters. The generator seed is `train.seed + run seed`; the
    /// test set shares the clusters and has clean labels.
    Synth { train: SynthSpec, test_per_class: usize },
    /// CIFAR-10 or SVHN from `root` (or `$PURIFYAT_DATA_ROOT`).
    Image {
        name: ImageDataset,
        #[serde(default)]
        root: Option<PathBuf>,
        #[serde(default)]
        subset: Option<usize>,
        #[serde(default)]
        test_subset: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub preset: Preset,
    #[serde(default)]
    pub hidden: Option<usize>,
    /// Fixed input normalization `(x − mean)/std` inside the model.
    #[serde(default)]
    pub input_mean: Option<f64>,
    #[serde(default)]
    pub input_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub config_version: u32,
    pub name: String,
    pub kind: ExperimentKind,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub purify: PurifyConfig,
    /// R values of the sweep; ignored by `baseline` and `memorization`.
    #[serde(default)]
    pub r_values: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Worker threads; 0 uses all cores. With 1 the run is single-threaded
    /// and `wallclock_s` is written as 0 so reruns are byte-identical.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub memorization: Option<MemorizationSpec>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub desk_scale: bool,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config_version {} unsupported (expected {CONFIG_VERSION})",
                self.config_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.r_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!("r_values {:?} must be sorted ascending and unique", self.r_values)));
        }
        let sweeps = matches!(
            self.kind,
            ExperimentKind::OfflineSweep | ExperimentKind::Online | ExperimentKind::CleanTrain
        );
        if sweeps && self.r_values.is_empty() {
            return Err(Error::config(format!("{} needs a non-empty r_values list", self.kind.as_str())));
        }
        if self.kind == ExperimentKind::Memorization && self.memorization.is_none() {
            return Err(Error::config("memorization experiments need a [memorization] section"));
        }
        self.train.validate()?;
        self.attack.validate()?;
        self.purify_for(0).validate()
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(out) = &o.out {
            self.out_dir = Some(out.clone());
        }
        if o.desk_scale {
            let arch = desk::architecture();
            self.dataset = DatasetSpec::Synth {
                train: desk::spec(0),
                test_per_class: desk::TEST_PER_CLASS,
            };
            self.model = ModelSpec {
                preset: arch.preset,
                hidden: Some(arch.hidden),
                input_mean: Some(arch.input_mean),
                input_std: Some(arch.input_std),
            };
            self.train.epochs = match self.kind {
                ExperimentKind::Memorization => desk::LONG_EPOCHS,
                _ => desk::EPOCHS,
            };
            self.attack.epsilon = desk::EPSILON;
            self.purify.fold_epochs = Some(desk::FOLD_EPOCHS);
            if let Some(m) = &mut self.memorization {
                if m.source == InjectSource::Cifar100 {
                    m.source = InjectSource::Flipped;
                }
            }
        }
    }

    /// The purification config of one sweep point.
    pub fn purify_for(&self, r: usize) -> PurifyConfig {
        let mut p = self.purify.clone();
        p.r = r;
        match self.kind {
            ExperimentKind::Baseline | ExperimentKind::OfflineSweep | ExperimentKind::Memorization => {
                p.strategy = Strategy::Offline;
                p.action = Action::Remove;
            }
            ExperimentKind::Online => {
                p.strategy = Strategy::Online;
                p.action = Action::Remove;
            }
            ExperimentKind::CleanTrain => {
                p.strategy = Strategy::Online;
                p.action = Action::CleanTrain;
            }
        }
        p
    }

    fn out_dir(&self) -> Result<PathBuf> {
        self.out_dir
            .clone()
            .ok_or_else(|| Error::config("no output directory (set out_dir or pass --out)"))
    }

    fn single_threaded(&self) -> bool {
        self.threads == 1
    }
}

fn data_root(explicit: &Option<PathBuf>) -> Result<PathBuf> {
    if let Some(r) = explicit {
        return Ok(r.clone());
    }
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| Error::config(format!("no dataset root: set dataset.root or ${DATA_ROOT_ENV}")))
}

/// Training and test sets for one run seed.
pub fn build_datasets(spec: &DatasetSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    match spec {
        DatasetSpec::Synth { train, test_per_class } => {
            let s = SynthSpec {
                seed: train.seed.wrapping_add(seed),
                ..train.clone()
            };
            Ok((synth_dataset(&s)?, synth_dataset(&s.test_split(*test_per_class))?))
        }
        DatasetSpec::Image {
            name,
            root,
            subset,
            test_subset,
        } => {
            let root = data_root(root)?;
            Ok((
                load_image_dataset(*name, Split::Train, &root, *subset, seed)?,
                load_image_dataset(*name, Split::Test, &root, *test_subset, seed)?,
            ))
        }
    }
}

pub fn architecture(model: &ModelSpec, data: &Dataset) -> Architecture {
    let mut arch = Architecture::new(model.preset, data.item_shape().to_vec(), data.num_classes());
    if let Some(h) = model.hidden {
        arch = arch.with_hidden(h);
    }
    arch.with_input_norm(model.input_mean.unwrap_or(0.0), model.input_std.unwrap_or(1.0))
}

fn with_context<T>(context: impl FnOnce() -> String, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Experiment {
        context: context(),
        source: Box::new(e),
    })
}

/// Everything a finished experiment produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<RunRecord>,
    pub table: String,
    pub summary_csv: String,
    pub out_dir: PathBuf,
}

struct RunArtifacts {
    record: RunRecord,
    checkpoint: Checkpoint,
    scores: Vec<ScoreRecord>,
    statuses: String,
}

/// Runs the experiment the config describes, writing all artifacts into its
/// output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(|| run_in_pool(cfg, &out))
}

fn run_in_pool(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutput> {
    for dir in ["data", "runs", "scores"] {
        fs::create_dir_all(out.join(dir))?;
    }
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;

    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let runs = with_context(
            || format!("{} seed {seed}", cfg.name),
            run_seed(cfg, seed, out),
        )?;
        for a in runs {
            let dir = out.join(&a.record.run_dir);
            fs::create_dir_all(&dir)?;
            write_run(&dir, &a)?;
            records.push(a.record);
        }
    }
    records.sort_by_key(|r| (r.r, r.seed));
    let single = cfg.single_threaded();
    let summary = summary_csv(&records, single);
    let table = render_table(&records);
    fs::write(out.join("summary.csv"), &summary)?;
    fs::write(out.join("table.txt"), &table)?;
    Ok(ExperimentOutput {
        records,
        table,
        summary_csv: summary,
        out_dir: out.to_path_buf(),
    })
}

fn write_run(dir: &Path, a: &RunArtifacts) -> Result<()> {
    let json = serde_json::to_string_pretty(&a.record).map_err(|e| Error::config(format!("report: {e}")))?;
    fs::write(dir.join("report.json"), json)?;
    fs::write(dir.join("epochs.csv"), a.record.report.to_csv())?;
    fs::write(dir.join("purified.csv"), &a.statuses)?;
    save_removal_history(&dir.join("removals.csv"), &a.record.report.removal_history)?;
    if !a.scores.is_empty() {
        save_scores(&dir.join("scores.csv"), &a.scores)?;
    }
    save_checkpoint(&dir.join("model.ckpt"), &a.checkpoint)
}

fn run_dir(r: usize, seed: u64) -> String {
    format!("runs/R{r}-seed{seed}")
}

fn seeded(cfg: &ExperimentConfig, seed: u64) -> (TrainConfig, ExperimentConfig) {
    let tcfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let mut c = cfg.clone();
    c.purify.seed = seed;
    (tcfg, c)
}

fn run_seed(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<Vec<RunArtifacts>> {
    let (tcfg, cfg) = seeded(cfg, seed);
    let cfg = &cfg;
    if cfg.kind == ExperimentKind::Memorization {
        return memorization_run(cfg, &tcfg, seed, out).map(|a| vec![a]);
    }
    let (train, test) = build_datasets(&cfg.dataset, seed)?;
    save_manifest(&out.join(format!("data/seed{seed}.csv")), &train.manifest())?;
    let arch = architecture(&cfg.model, &train);
    let setup = Setup {
        arch: &arch,
        train: &tcfg,
        attack: Some(&cfg.attack),
        eval: Some(&test),
    };
    let r_values: Vec<usize> = match cfg.kind {
        ExperimentKind::Baseline => vec![0],
        _ => cfg.r_values.clone(),
    };

    let record = |r: usize, report: RunReport| RunRecord {
        experiment: cfg.name.clone(),
        kind: cfg.kind,
        r,
        seed,
        run_dir: run_dir(r, seed),
        report,
        memorization: None,
    };

    if matches!(cfg.kind, ExperimentKind::Baseline | ExperimentKind::OfflineSweep) {
        // One k-fold scoring pass serves every R of the sweep.
        let scores = if r_values.iter().any(|&r| r > 0) {
            let s = offline_scores(&train, &cfg.purify_for(1), setup)?;
            save_scores(&out.join(format!("scores/seed{seed}.csv")), &s.records)?;
            s.records
        } else {
            Vec::new()
        };
        return r_values
            .par_iter()
            .map(|&r| {
                let p = cfg.purify_for(r);
                let (model, report) = with_context(|| format!("R={r}"), train_without(&train, &scores, &p, setup))?;
                let statuses = statuses_to_csv(&sample_statuses(&train, &report, p.action));
                Ok(RunArtifacts {
                    checkpoint: Checkpoint::from_model(&model, None, tcfg.epochs, seed),
                    record: record(r, report),
                    scores: Vec::new(),
                    statuses,
                })
            })
            .collect();
    }

    r_values
        .par_iter()
        .map(|&r| {
            let p = cfg.purify_for(r);
            let o = with_context(|| format!("R={r}"), run_purification(&train, &p, setup))?;
            let statuses = statuses_to_csv(&sample_statuses(&train, &o.report, p.action));
            Ok(RunArtifacts {
                checkpoint: Checkpoint::from_model(&o.model, None, tcfg.epochs, seed),
                record: record(r, o.report),
                scores: o.scores,
                statuses,
            })
        })
        .collect()
}

fn memorization_run(cfg: &ExperimentConfig, tcfg: &TrainConfig, seed: u64, out: &Path) -> Result<RunArtifacts> {
    let spec = cfg.memorization.as_ref().expect("validated");
    let (train, test) = build_datasets(&cfg.dataset, seed)?;
    let (m, model, report, data) = memorization_experiment(&train, Some(&test), spec, cfg, tcfg, seed)?;
    save_manifest(&out.join(format!("data/seed{seed}.csv")), &data.manifest())?;
    let statuses = statuses_to_csv(&sample_statuses(&data, &report, Action::Remove));
    Ok(RunArtifacts {
        checkpoint: Checkpoint::from_model(&model, None, tcfg.epochs, seed),
        record: RunRecord {
            experiment: cfg.name.clone(),
            kind: cfg.kind,
            r: 0,
            seed,
            run_dir: run_dir(0, seed),
            report,
            memorization: Some(m),
        },
        scores: Vec::new(),
        statuses,
    })
}

/// Computes offline k-fold scores for every seed without the final training,
/// writing `<out>/scores/seed<S>.csv`. Returns the records per seed.
pub fn score_experiment(cfg: &ExperimentConfig) -> Result<BTreeMap<u64, Vec<ScoreRecord>>> {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    fs::create_dir_all(out.join("scores"))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let mut all = BTreeMap::new();
        for &seed in &cfg.seeds {
            let (tcfg, c) = seeded(cfg, seed);
            let (train, _) = build_datasets(&c.dataset, seed)?;
            let arch = architecture(&c.model, &train);
            let setup = Setup {
                arch: &arch,
                train: &tcfg,
                attack: Some(&c.attack),
                eval: None,
            };
            let mut p = c.purify.clone();
            p.strategy = Strategy::Offline;
            p.action = Action::Remove;
            let s = with_context(|| format!("scoring seed {seed}"), offline_scores(&train, &p, setup))?;
            save_scores(&out.join(format!("scores/seed{seed}.csv")), &s.records)?;
            all.insert(seed, s.records);
        }
        Ok(all)
    })
}

/// Clean and robust accuracy of a saved checkpoint on the config's test set.
pub fn eval_checkpoint(path: &Path, cfg: &ExperimentConfig, seed: u64) -> Result<EvalResult> {
    let model = load_checkpoint(path)?.into_model()?;
    let (_, test) = build_datasets(&cfg.dataset, seed)?;
    if model.architecture().input_shape != test.item_shape() || model.num_classes() != test.num_classes() {
        return Err(Error::Shape(format!(
            "checkpoint expects {:?} with {} classes, test set has {:?} with {}",
            model.architecture().input_shape,
            model.num_classes(),
            test.item_shape(),
            test.num_classes()
        )));
    }
    evaluate(&model, &test, Some(&cfg.attack), seed)
}

/// Distinct R values present in a set of records.
pub fn r_values_of(records: &[RunRecord]) -> BTreeSet<usize> {
    records.iter().map(|r| r.r).collect()
}
