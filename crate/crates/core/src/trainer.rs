//! Standard and adversarial training loops with the step learning-rate
//! schedule, plus clean/robust evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd_perturb, AttackConfig};
use crate::dataio::{Dataset, SampleId};
use crate::error::{Error, Result};
use crate::model::{argmax, Classifier, Mode, Sgd};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Standard,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    /// Fractions of the epoch budget after which the rate is decayed.
    pub lr_decay_points: Vec<f64>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: TrainMode,
    /// Evaluate on the held-out set every this many epochs (0: only at the end).
    #[serde(default)]
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            lr_initial: 0.1,
            lr_decay_points: vec![0.5, 0.75],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            mode: TrainMode::Adversarial,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr_initial.is_finite() && self.lr_initial >= 0.0) {
            return Err(Error::config("lr_initial must be finite and >= 0"));
        }
        let pts = &self.lr_decay_points;
        if pts.iter().any(|p| !(*p > 0.0 && *p < 1.0)) || pts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "lr_decay_points {pts:?} must be strictly increasing within (0,1)"
            )));
        }
        Ok(())
    }
}

/// `lr_initial · factor^(#decay points p with epoch ≥ ⌈p·epochs⌉)`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Range(format!("epoch {epoch} outside [0, {})", cfg.epochs)));
    }
    let passed = cfg
        .lr_decay_points
        .iter()
        .filter(|&&p| epoch as f64 >= (p * cfg.epochs as f64).ceil())
        .count();
    Ok(cfg.lr_initial * cfg.lr_decay_factor.powi(passed as i32))
}

/// How a sample is used in an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Treatment {
    /// The run's mode decides: PGD-perturbed when adversarial, clean otherwise.
    Default,
    /// Trained on the unperturbed input.
    Clean,
    /// Left out of the epoch entirely.
    Excluded,
}

/// Per-sample overrides for the next epoch; unlisted samples get
/// [`Treatment::Default`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochPlan {
    pub overrides: HashMap<SampleId, Treatment>,
}

impl EpochPlan {
    pub fn uniform(ids: impl IntoIterator<Item = SampleId>, t: Treatment) -> Self {
        Self {
            overrides: ids.into_iter().map(|id| (id, t)).collect(),
        }
    }

    pub fn treatment(&self, id: SampleId) -> Treatment {
        self.overrides.get(&id).copied().unwrap_or(Treatment::Default)
    }
}

/// Runs after every epoch with the freshly updated model (in eval mode) and
/// returns the plan for the next epoch.
pub trait EpochHook {
    fn after_epoch(&mut self, model: &Classifier, epoch: usize, last: bool) -> Result<EpochPlan>;
}

pub struct NoHook;

impl EpochHook for NoHook {
    fn after_epoch(&mut self, _: &Classifier, _: usize, _: bool) -> Result<EpochPlan> {
        Ok(EpochPlan::default())
    }
}

impl<F> EpochHook for F
where
    F: FnMut(&Classifier, usize, bool) -> Result<EpochPlan>,
{
    fn after_epoch(&mut self, model: &Classifier, epoch: usize, last: bool) -> Result<EpochPlan> {
        self(model, epoch, last)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Accuracy (percent) on the inputs actually trained on this epoch.
    pub train_acc: f64,
    pub n_adversarial: usize,
    pub n_clean: usize,
    pub n_excluded: usize,
    pub eval_clean_acc: Option<f64>,
    pub eval_robust_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub final_clean_acc: Option<f64>,
    pub final_robust_acc: Option<f64>,
    /// Offline purification: the ids removed before training.
    #[serde(default)]
    pub removed: Vec<SampleId>,
    /// Online purification: epoch → ids excluded (or clean-trained) in it.
    #[serde(default)]
    pub removal_history: BTreeMap<usize, Vec<SampleId>>,
    pub wallclock_s: f64,
}

impl RunReport {
    /// Equality on everything except wall-clock time.
    pub fn same_outcome(&self, other: &RunReport) -> bool {
        self.seed == other.seed
            && self.epochs == other.epochs
            && self.final_clean_acc == other.final_clean_acc
            && self.final_robust_acc == other.final_robust_acc
            && self.removed == other.removed
            && self.removal_history == other.removal_history
    }

    /// Per-epoch CSV rows followed by one `final` summary row.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out =
            String::from("epoch,lr,train_loss,train_acc,n_adversarial,n_clean,n_excluded,eval_clean_acc,eval_robust_acc\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                e.epoch,
                e.lr,
                e.train_loss,
                e.train_acc,
                e.n_adversarial,
                e.n_clean,
                e.n_excluded,
                opt(e.eval_clean_acc),
                opt(e.eval_robust_acc)
            );
        }
        let _ = writeln!(
            out,
            "final,,,,,,,{},{}",
            opt(self.final_clean_acc),
            opt(self.final_robust_acc)
        );
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub report: RunReport,
    pub optimizer: Sgd,
}

/// Trains `model` in place. In adversarial mode every default-treated sample
/// is replaced by its PGD perturbation (computed against the eval-mode model)
/// before the update. Data order is a fresh seed-determined permutation of the
/// full dataset each epoch; excluded samples are filtered out of it.
pub fn train(
    model: &mut Classifier,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    attack: Option<&AttackConfig>,
    hook: &mut dyn EpochHook,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let attack = match (cfg.mode, attack) {
        (TrainMode::Adversarial, None) => {
            return Err(Error::config("adversarial training needs an attack config"));
        }
        (TrainMode::Adversarial, Some(a)) => {
            a.validate()?;
            Some(a)
        }
        (TrainMode::Standard, a) => a,
    };
    let started = Instant::now();
    let mut sgd = Sgd::new(model.params(), cfg.momentum, cfg.weight_decay);
    let mut shuffle_rng = rng::stream(cfg.seed, rng::STREAM_SHUFFLE);
    let mut attack_rng = rng::stream(cfg.seed, rng::STREAM_ATTACK);
    let eval_seed = rng::derive_seed(cfg.seed, 0xE7A1);
    let mut report = RunReport {
        seed: cfg.seed,
        ..Default::default()
    };
    let mut plan = EpochPlan::default();

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch)?;
        let mut perm: Vec<usize> = (0..data.len()).collect();
        perm.shuffle(&mut shuffle_rng);
        let treat = |i: usize| plan.treatment(data.samples()[i].id);
        let order: Vec<usize> = perm.into_iter().filter(|&i| treat(i) != Treatment::Excluded).collect();
        let n_excluded = data.len() - order.len();
        let (mut n_adv, mut n_clean) = (0usize, 0usize);
        let (mut loss_sum, mut correct) = (0.0, 0usize);

        model.set_mode(Mode::Train);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (mut x, y) = data.batch(chunk);
            let perturb: Vec<usize> = match cfg.mode {
                TrainMode::Adversarial => (0..chunk.len()).filter(|&j| treat(chunk[j]) == Treatment::Default).collect(),
                TrainMode::Standard => Vec::new(),
            };
            n_adv += perturb.len();
            n_clean += chunk.len() - perturb.len();
            if let (Some(a), false) = (attack, perturb.is_empty()) {
                model.set_mode(Mode::Eval);
                let sub_x = x.select_rows(&perturb);
                let sub_y: Vec<usize> = perturb.iter().map(|&j| y[j]).collect();
                let adv = pgd_perturb(model, &sub_x, &sub_y, a, &mut attack_rng)?;
                for (k, &j) in perturb.iter().enumerate() {
                    x.row_mut(j).copy_from_slice(adv.row(k));
                }
                model.set_mode(Mode::Train);
            }
            let step = model.loss_and_grads(&x, &y)?;
            if !step.loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
            model.commit_stats(step.stats);
            sgd.step(model.params_mut(), &step.grads, lr)?;
            loss_sum += step.loss * chunk.len() as f64;
            correct += (0..chunk.len())
                .filter(|&j| argmax(step.logits.row(j)) == y[j])
                .count();
        }

        model.set_mode(Mode::Eval);
        let trained = order.len().max(1) as f64;
        let mut rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / trained,
            train_acc: 100.0 * correct as f64 / trained,
            n_adversarial: n_adv,
            n_clean,
            n_excluded,
            eval_clean_acc: None,
            eval_robust_acc: None,
        };
        let last = epoch + 1 == cfg.epochs;
        if let (Some(ev), true) = (eval, cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 && !last) {
            let r = evaluate(model, ev, attack, eval_seed)?;
            rec.eval_clean_acc = Some(r.clean_acc);
            rec.eval_robust_acc = r.robust_acc;
        }
        report.epochs.push(rec);
        plan = hook.after_epoch(model, epoch, last)?;
    }

    model.set_mode(Mode::Eval);
    if let Some(ev) = eval {
        let r = evaluate(model, ev, attack, eval_seed)?;
        report.final_clean_acc = Some(r.clean_acc);
        report.final_robust_acc = r.robust_acc;
        if let Some(last) = report.epochs.last_mut() {
            last.eval_clean_acc = Some(r.clean_acc);
            last.eval_robust_acc = r.robust_acc;
        }
    }
    report.wallclock_s = started.elapsed().as_secs_f64();
    Ok(TrainOutput {
        report,
        optimizer: sgd,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Percent.
    pub clean_acc: f64,
    /// Percent; present when an attack was given.
    pub robust_acc: Option<f64>,
}

/// Clean accuracy and, with an attack, PGD robust accuracy, both in percent.
/// The model is evaluated through an eval-mode copy and left untouched.
pub fn evaluate(model: &Classifier, data: &Dataset, attack: Option<&AttackConfig>, seed: u64) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation set is empty".into()));
    }
    let frozen;
    let m = if model.mode() == Mode::Eval {
        model
    } else {
        let mut c = model.clone();
        c.set_mode(Mode::Eval);
        frozen = c;
        &frozen
    };
    let mut r = rng::stream(seed, rng::STREAM_ATTACK);
    let (mut clean_ok, mut robust_ok) = (0usize, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, y) = data.batch(chunk);
        let pred = m.predict(&x)?;
        clean_ok += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
        if let Some(a) = attack {
            let adv = pgd_perturb(m, &x, &y, a, &mut r)?;
            let pred = m.predict(&adv)?;
            robust_ok += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
        }
    }
    let n = data.len() as f64;
    Ok(EvalResult {
        clean_acc: 100.0 * clean_ok as f64 / n,
        robust_acc: attack.map(|_| 100.0 * robust_ok as f64 / n),
    })
}
