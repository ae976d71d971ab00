//! Hard-training-sample purification: offline k-fold scoring with removal and
//! retraining, online per-epoch exclusion, and the online clean-training
//! variant.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::dataio::{Dataset, SampleId};
use crate::error::{Error, Result};
use crate::model::{Architecture, Classifier};
use crate::rng;
use crate::scoring::{
    fit_stats_on, score_dataset, GaussianStats, MdForm, Provenance, Regularization, ScoreContext, ScoreMethod,
    ScoreRecord,
};
use crate::trainer::{train, EpochHook, EpochPlan, NoHook, RunReport, TrainConfig, TrainMode, Treatment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Offline,
    Online,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Remove,
    CleanTrain,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalDirection {
    #[default]
    Lowest,
    Highest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PurifyConfig {
    pub strategy: Strategy,
    pub scorer: ScoreMethod,
    /// Number of samples acted on (removed or clean-trained).
    pub r: usize,
    pub k_folds: usize,
    pub action: Action,
    /// Training regime of the offline fold models.
    pub fold_mode: TrainMode,
    /// Epoch budget of the fold models; `None` uses the main budget.
    pub fold_epochs: Option<usize>,
    pub removal_direction: RemovalDirection,
    pub seed: u64,
    /// Use `(h−μ)ᵀ Σ (h−μ)` instead of the inverse in ARMD.
    pub md_use_plain_sigma: bool,
    pub regularization: Regularization,
}

impl Default for PurifyConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Offline,
            scorer: ScoreMethod::Ccsp,
            r: 0,
            k_folds: 4,
            action: Action::Remove,
            fold_mode: TrainMode::Adversarial,
            fold_epochs: None,
            removal_direction: RemovalDirection::Lowest,
            seed: 0,
            md_use_plain_sigma: false,
            regularization: Regularization::default(),
        }
    }
}

impl PurifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategy == Strategy::Offline && self.k_folds < 2 {
            return Err(Error::config(format!("k_folds must be >= 2, got {}", self.k_folds)));
        }
        if self.strategy == Strategy::Offline && self.action == Action::CleanTrain {
            return Err(Error::config("clean_train is only defined for the online strategy"));
        }
        if self.fold_epochs == Some(0) {
            return Err(Error::config("fold_epochs must be positive"));
        }
        Ok(())
    }

    fn md_form(&self) -> MdForm {
        if self.md_use_plain_sigma {
            MdForm::PlainSigma
        } else {
            MdForm::Inverse
        }
    }
}

/// Everything a pipeline needs besides the data and the purification config.
#[derive(Debug, Clone, Copy)]
pub struct Setup<'a> {
    pub arch: &'a Architecture,
    pub train: &'a TrainConfig,
    pub attack: Option<&'a AttackConfig>,
    /// Held-out set for final clean/robust accuracy.
    pub eval: Option<&'a Dataset>,
}

/// Sample id → fold index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: BTreeMap<SampleId, usize>,
}

impl FoldAssignment {
    pub fn members(&self, fold: usize) -> HashSet<SampleId> {
        self.fold_of
            .iter()
            .filter(|&(_, &f)| f == fold)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in self.fold_of.values() {
            s[f] += 1;
        }
        s
    }
}

/// Seeded shuffle of the ids, then fold = position mod k.
pub fn kfold_split(data: &Dataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > data.len() {
        return Err(Error::config(format!("k={k} folds invalid for {} samples", data.len())));
    }
    let mut ids = data.ids();
    ids.shuffle(&mut rng::stream(seed, rng::STREAM_SPLIT));
    Ok(FoldAssignment {
        k,
        fold_of: ids.into_iter().enumerate().map(|(i, id)| (id, i % k)).collect(),
    })
}

/// What one fold model was trained on and what it scored.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldAudit {
    pub fold: usize,
    pub model_id: String,
    pub trained_on: Vec<SampleId>,
    pub scored: Vec<SampleId>,
}

#[derive(Debug, Clone)]
pub struct OfflineScores {
    pub assignment: FoldAssignment,
    pub records: Vec<ScoreRecord>,
    pub audits: Vec<FoldAudit>,
}

impl OfflineScores {
    /// Number of records whose scoring model trained on the scored sample.
    pub fn audit_violations(&self) -> usize {
        let by_model: HashMap<&str, HashSet<SampleId>> = self
            .audits
            .iter()
            .map(|a| (a.model_id.as_str(), a.trained_on.iter().copied().collect()))
            .collect();
        self.records
            .iter()
            .filter(|r| by_model.get(r.model_id.as_str()).is_none_or(|t| t.contains(&r.sample_id)))
            .count()
    }
}

fn fold_train_config(pcfg: &PurifyConfig, tcfg: &TrainConfig, fold: usize) -> TrainConfig {
    TrainConfig {
        epochs: pcfg.fold_epochs.unwrap_or(tcfg.epochs),
        mode: pcfg.fold_mode,
        seed: rng::derive_seed(tcfg.seed, 0xF01D_0000 + fold as u64),
        ..tcfg.clone()
    }
}

fn score_one_fold(
    data: &Dataset,
    assignment: &FoldAssignment,
    fold: usize,
    pcfg: &PurifyConfig,
    setup: Setup<'_>,
) -> Result<(Vec<ScoreRecord>, FoldAudit)> {
    let held = assignment.members(fold);
    let train_part = data.without_ids(&held);
    let test_part = data.with_ids(&held);
    let tcfg = fold_train_config(pcfg, setup.train, fold);
    let model_seed = rng::derive_seed(pcfg.seed, fold as u64);
    let mut model = Classifier::new(setup.arch.clone(), model_seed)?;
    train(&mut model, &train_part, None, &tcfg, setup.attack, &mut NoHook)?;
    let stats = match pcfg.scorer {
        ScoreMethod::Armd => Some(fit_stats_on(&model, &train_part, pcfg.regularization)?),
        _ => None,
    };
    let model_id = format!("fold{fold}-seed{model_seed}");
    let ctx = ScoreContext {
        provenance: Provenance::Fold(fold),
        model_id: model_id.clone(),
        md_form: pcfg.md_form(),
    };
    let records = score_dataset(&model, &test_part, pcfg.scorer, stats.as_ref(), &ctx)?;
    let audit = FoldAudit {
        fold,
        model_id,
        trained_on: train_part.ids(),
        scored: test_part.ids(),
    };
    Ok((records, audit))
}

/// Scores every sample with a model trained on the other k−1 folds. Folds run
/// in parallel on the current rayon pool; the result does not depend on the
/// pool size.
pub fn offline_scores(data: &Dataset, pcfg: &PurifyConfig, setup: Setup<'_>) -> Result<OfflineScores> {
    pcfg.validate()?;
    let assignment = kfold_split(data, pcfg.k_folds, pcfg.seed)?;
    let per_fold: Vec<_> = (0..pcfg.k_folds)
        .into_par_iter()
        .map(|f| {
            score_one_fold(data, &assignment, f, pcfg, setup).map_err(|e| Error::Fold {
                fold: f,
                source: Box::new(e),
            })
        })
        .collect();
    let mut records = Vec::with_capacity(data.len());
    let mut audits = Vec::with_capacity(pcfg.k_folds);
    for r in per_fold {
        let (recs, audit) = r?;
        records.extend(recs);
        audits.push(audit);
    }
    records.sort_by_key(|r| r.sample_id);
    Ok(OfflineScores {
        assignment,
        records,
        audits,
    })
}

/// The `min(R, n)` ids with the lowest (or highest) scores, ties broken by
/// ascending id. Returned in ascending id order.
pub fn select_removals(records: &[ScoreRecord], r: usize, direction: RemovalDirection) -> Result<Vec<SampleId>> {
    let mut seen = HashSet::with_capacity(records.len());
    if let Some(dup) = records.iter().find(|rec| !seen.insert(rec.sample_id)) {
        return Err(Error::Manifest(format!("duplicate sample_id {} in score records", dup.sample_id)));
    }
    let mut order: Vec<&ScoreRecord> = records.iter().collect();
    order.sort_by(|a, b| {
        let by_score = match direction {
            RemovalDirection::Lowest => a.score.total_cmp(&b.score),
            RemovalDirection::Highest => b.score.total_cmp(&a.score),
        };
        by_score.then(a.sample_id.cmp(&b.sample_id))
    });
    let mut ids: Vec<SampleId> = order.iter().take(r).map(|rec| rec.sample_id).collect();
    ids.sort_unstable();
    Ok(ids)
}

#[derive(Debug, Clone)]
pub struct PurifyOutcome {
    pub model: Classifier,
    pub report: RunReport,
    /// Offline: the k-fold scores. Online: the scores from the last rescoring.
    pub scores: Vec<ScoreRecord>,
    pub audits: Vec<FoldAudit>,
}

/// Trains the final model on `data` minus the `R` selected ids.
pub fn train_without(
    data: &Dataset,
    records: &[ScoreRecord],
    pcfg: &PurifyConfig,
    setup: Setup<'_>,
) -> Result<(Classifier, RunReport)> {
    let removed = select_removals(records, pcfg.r, pcfg.removal_direction)?;
    let retained = data.without_ids(&removed.iter().copied().collect());
    let mut model = Classifier::new(setup.arch.clone(), setup.train.seed)?;
    let out = train(&mut model, &retained, setup.eval, setup.train, setup.attack, &mut NoHook)?;
    let mut report = out.report;
    report.removed = removed;
    Ok((model, report))
}

/// k-fold scoring, removal of the R lowest-scored samples, and a fresh
/// training run on the rest. With R = 0 the scoring pass is skipped and the
/// result is plain training.
pub fn offline_purify_and_train(data: &Dataset, pcfg: &PurifyConfig, setup: Setup<'_>) -> Result<PurifyOutcome> {
    pcfg.validate()?;
    if pcfg.strategy != Strategy::Offline {
        return Err(Error::config("offline_purify_and_train needs strategy = offline"));
    }
    let (records, audits) = if pcfg.r == 0 {
        (Vec::new(), Vec::new())
    } else {
        let s = offline_scores(data, pcfg, setup)?;
        (s.records, s.audits)
    };
    let (model, report) = train_without(data, &records, pcfg, setup)?;
    Ok(PurifyOutcome {
        model,
        report,
        scores: records,
        audits,
    })
}

/// Produces per-sample scores from the end-of-epoch model.
pub trait EpochScorer {
    fn score(&mut self, model: &Classifier, data: &Dataset, epoch: usize) -> Result<Vec<ScoreRecord>>;
}

/// Scores with one of the built-in methods; ARMD statistics are refitted on
/// the whole training set each time.
#[derive(Debug, Clone)]
pub struct ModelScorer {
    pub method: ScoreMethod,
    pub md_form: MdForm,
    pub regularization: Regularization,
    pub model_id: String,
}

impl ModelScorer {
    pub fn from_config(pcfg: &PurifyConfig, model_id: impl Into<String>) -> Self {
        Self {
            method: pcfg.scorer,
            md_form: pcfg.md_form(),
            regularization: pcfg.regularization,
            model_id: model_id.into(),
        }
    }
}

impl EpochScorer for ModelScorer {
    fn score(&mut self, model: &Classifier, data: &Dataset, epoch: usize) -> Result<Vec<ScoreRecord>> {
        let stats: Option<GaussianStats> = match self.method {
            ScoreMethod::Armd => Some(fit_stats_on(model, data, self.regularization)?),
            _ => None,
        };
        let ctx = ScoreContext {
            provenance: Provenance::Epoch(epoch),
            model_id: self.model_id.clone(),
            md_form: self.md_form,
        };
        score_dataset(model, data, self.method, stats.as_ref(), &ctx)
    }
}

struct OnlineHook<'a> {
    data: &'a Dataset,
    r: usize,
    direction: RemovalDirection,
    treatment: Treatment,
    scorer: &'a mut dyn EpochScorer,
    history: BTreeMap<usize, Vec<SampleId>>,
    last_scores: Vec<ScoreRecord>,
}

impl EpochHook for OnlineHook<'_> {
    fn after_epoch(&mut self, model: &Classifier, epoch: usize, last: bool) -> Result<EpochPlan> {
        if last || self.r == 0 {
            return Ok(EpochPlan::default());
        }
        let records = self.scorer.score(model, self.data, epoch)?;
        if records.len() != self.data.len() {
            return Err(Error::Manifest(format!(
                "scorer returned {} records for {} samples",
                records.len(),
                self.data.len()
            )));
        }
        let ids = select_removals(&records, self.r, self.direction)?;
        self.last_scores = records;
        self.history.insert(epoch + 1, ids.clone());
        Ok(EpochPlan::uniform(ids, self.treatment))
    }
}

/// Online purification with a caller-supplied scorer. After every epoch but
/// the last, all samples are rescored and the selected R are excluded from
/// (or, with `clean_train`, trained clean in) the next epoch only.
pub fn online_train_with_scorer(
    data: &Dataset,
    pcfg: &PurifyConfig,
    setup: Setup<'_>,
    scorer: &mut dyn EpochScorer,
) -> Result<PurifyOutcome> {
    pcfg.validate()?;
    let mut hook = OnlineHook {
        data,
        r: pcfg.r,
        direction: pcfg.removal_direction,
        treatment: match pcfg.action {
            Action::Remove => Treatment::Excluded,
            Action::CleanTrain => Treatment::Clean,
        },
        scorer,
        history: BTreeMap::new(),
        last_scores: Vec::new(),
    };
    let mut model = Classifier::new(setup.arch.clone(), setup.train.seed)?;
    let out = train(&mut model, data, setup.eval, setup.train, setup.attack, &mut hook)?;
    let mut report = out.report;
    report.removal_history = hook.history;
    Ok(PurifyOutcome {
        model,
        report,
        scores: hook.last_scores,
        audits: Vec::new(),
    })
}

pub fn online_train(data: &Dataset, pcfg: &PurifyConfig, setup: Setup<'_>) -> Result<PurifyOutcome> {
    if pcfg.action != Action::Remove {
        return Err(Error::config("online_train needs action = remove"));
    }
    let mut scorer = ModelScorer::from_config(pcfg, format!("online-seed{}", setup.train.seed));
    online_train_with_scorer(data, pcfg, setup, &mut scorer)
}

pub fn clean_train_variant(data: &Dataset, pcfg: &PurifyConfig, setup: Setup<'_>) -> Result<PurifyOutcome> {
    if pcfg.action != Action::CleanTrain || pcfg.strategy != Strategy::Online {
        return Err(Error::config("clean_train_variant needs action = clean_train, strategy = online"));
    }
    let mut scorer = ModelScorer::from_config(pcfg, format!("online-seed{}", setup.train.seed));
    online_train_with_scorer(data, pcfg, setup, &mut scorer)
}

/// Runs the pipeline the config asks for.
pub fn run_purification(data: &Dataset, pcfg: &PurifyConfig, setup: Setup<'_>) -> Result<PurifyOutcome> {
    match (pcfg.strategy, pcfg.action) {
        (Strategy::Offline, _) => offline_purify_and_train(data, pcfg, setup),
        (Strategy::Online, Action::Remove) => online_train(data, pcfg, setup),
        (Strategy::Online, Action::CleanTrain) => clean_train_variant(data, pcfg, setup),
    }
}

/// Per-sample status after a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Retained,
    Removed,
    /// Clean-trained, most recently in this epoch.
    CleanTrained(usize),
}

impl Status {
    fn render(self) -> String {
        match self {
            Status::Retained => "retained".into(),
            Status::Removed => "removed".into(),
            Status::CleanTrained(e) => format!("clean_trained@epoch{e}"),
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "retained" => Some(Status::Retained),
            "removed" => Some(Status::Removed),
            _ => s.strip_prefix("clean_trained@epoch")?.parse().ok().map(Status::CleanTrained),
        }
    }
}

/// Offline: removed ids are `removed`. Online removal: ids excluded from the
/// final epoch are `removed`. Clean training: ids clean-trained in any epoch
/// carry the last such epoch.
pub fn sample_statuses(data: &Dataset, report: &RunReport, action: Action) -> Vec<(SampleId, Status)> {
    let mut status: BTreeMap<SampleId, Status> = data.ids().into_iter().map(|id| (id, Status::Retained)).collect();
    for &id in &report.removed {
        status.insert(id, Status::Removed);
    }
    match action {
        Action::Remove => {
            let final_epoch = report.epochs.len().saturating_sub(1);
            if let Some(ids) = report.removal_history.get(&final_epoch) {
                for &id in ids {
                    status.insert(id, Status::Removed);
                }
            }
        }
        Action::CleanTrain => {
            for (&epoch, ids) in &report.removal_history {
                for &id in ids {
                    status.insert(id, Status::CleanTrained(epoch));
                }
            }
        }
    }
    status.into_iter().collect()
}

pub fn statuses_to_csv(rows: &[(SampleId, Status)]) -> String {
    let mut out = String::from("sample_id,status\n");
    for (id, s) in rows {
        let _ = writeln!(out, "{id},{}", s.render());
    }
    out
}

pub fn statuses_from_csv(text: &str, file: &str) -> Result<Vec<(SampleId, Status)>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    if lines.next().map(|(_, l)| l) != Some("sample_id,status") {
        return Err(Error::parse(file, 1, "missing purified manifest header"));
    }
    lines
        .map(|(no, line)| {
            let (id, s) = line.split_once(',').ok_or_else(|| Error::parse(file, no, "expected 2 columns"))?;
            Ok((
                id.parse().map_err(|_| Error::parse(file, no, "bad sample_id"))?,
                Status::parse(s).ok_or_else(|| Error::parse(file, no, format!("bad status {s:?}")))?,
            ))
        })
        .collect()
}

/// `epoch,sample_id` rows in epoch order, ids ascending within an epoch.
pub fn removal_history_to_csv(history: &BTreeMap<usize, Vec<SampleId>>) -> String {
    let mut out = String::from("epoch,sample_id\n");
    for (epoch, ids) in history {
        let mut ids = ids.clone();
        ids.sort_unstable();
        for id in ids {
            let _ = writeln!(out, "{epoch},{id}");
        }
    }
    out
}

pub fn removal_history_from_csv(text: &str, file: &str) -> Result<BTreeMap<usize, Vec<SampleId>>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    if lines.next().map(|(_, l)| l) != Some("epoch,sample_id") {
        return Err(Error::parse(file, 1, "missing removal history header"));
    }
    let mut out: BTreeMap<usize, Vec<SampleId>> = BTreeMap::new();
    for (no, line) in lines {
        let (e, id) = line.split_once(',').ok_or_else(|| Error::parse(file, no, "expected 2 columns"))?;
        let e: usize = e.parse().map_err(|_| Error::parse(file, no, "bad epoch"))?;
        let id: SampleId = id.parse().map_err(|_| Error::parse(file, no, "bad sample_id"))?;
        out.entry(e).or_default().push(id);
    }
    Ok(out)
}

pub fn save_removal_history(path: &Path, history: &BTreeMap<usize, Vec<SampleId>>) -> Result<()> {
    fs::write(path, removal_history_to_csv(history))?;
    Ok(())
}

pub fn load_removal_history(path: &Path) -> Result<BTreeMap<usize, Vec<SampleId>>> {
    removal_history_from_csv(&fs::read_to_string(path)?, &path.display().to_string())
}
