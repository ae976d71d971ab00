//! ℓ∞ PGD: random start in the ε-ball, `N` signed-gradient steps of size α,
//! each followed by projection onto the ball and the [0,1] pixel box.

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::model::{per_sample_cross_entropy, Classifier, Mode};
use crate::rng;
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// ℓ∞ radius in [0,1] pixel units. Accepts a number or a fraction string
    /// such as `"8/255"`.
    #[serde(deserialize_with = "de_fraction")]
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to `2.5·ε/steps` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    pub restarts: usize,
    pub random_init: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            steps: 10,
            step_size: None,
            restarts: 1,
            random_init: true,
        }
    }
}

impl AttackConfig {
    pub fn step_size(&self) -> f64 {
        self.step_size.unwrap_or(2.5 * self.epsilon / self.steps as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::config(format!("epsilon {} must be finite and >= 0", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::config("attack steps must be positive"));
        }
        if self.restarts == 0 {
            return Err(Error::config("attack restarts must be positive"));
        }
        if let Some(a) = self.step_size {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::config(format!("step size {a} must be positive")));
            }
        }
        Ok(())
    }
}

/// Parses `"a/b"` or a plain decimal into an f64; `"8/255"` yields exactly
/// `8.0 / 255.0`.
pub fn parse_fraction(s: &str) -> Result<f64> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| Error::config(format!("bad numerator in {s:?}")))?;
            let d: f64 = d.trim().parse().map_err(|_| Error::config(format!("bad denominator in {s:?}")))?;
            if d == 0.0 {
                return Err(Error::config(format!("zero denominator in {s:?}")));
            }
            n / d
        }
        None => s.parse().map_err(|_| Error::config(format!("bad number {s:?}")))?,
    };
    Ok(v)
}

fn de_fraction<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum NumOrStr {
        Num(f64),
        Str(String),
    }
    match NumOrStr::deserialize(d)? {
        NumOrStr::Num(v) => Ok(v),
        NumOrStr::Str(s) => parse_fraction(&s).map_err(serde::de::Error::custom),
    }
}

/// Elementwise clamp of `delta` to `[−ε, ε]`.
pub fn project_linf(delta: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon >= 0.0) {
        return Err(Error::config(format!("negative epsilon {epsilon}")));
    }
    Ok(delta.iter().map(|d| d.clamp(-epsilon, epsilon)).collect())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn single_run<R: Rng>(model: &Classifier, x: &Tensor, y: &[usize], cfg: &AttackConfig, r: &mut R) -> Result<Tensor> {
    let eps = cfg.epsilon;
    let alpha = cfg.step_size();
    let mut adv = x.clone();
    if cfg.random_init {
        for (a, &x0) in adv.data_mut().iter_mut().zip(x.data()) {
            *a = (x0 + r.random_range(-eps..=eps)).clamp(0.0, 1.0);
        }
    }
    for _ in 0..cfg.steps {
        let (_, grad) = model.loss_and_input_grad(&adv, y)?;
        for ((a, &x0), &g) in adv.data_mut().iter_mut().zip(x.data()).zip(grad.data()) {
            let d = (*a - x0 + alpha * sign(g)).clamp(-eps, eps);
            *a = (x0 + d).clamp(0.0, 1.0);
        }
    }
    Ok(adv)
}

/// Runs PGD against a frozen (eval-mode) model. With several restarts the
/// per-sample result with the highest loss wins.
pub fn pgd_perturb<R: Rng>(model: &Classifier, x: &Tensor, y: &[usize], cfg: &AttackConfig, r: &mut R) -> Result<Tensor> {
    cfg.validate()?;
    if model.mode() != Mode::Eval {
        return Err(Error::config("PGD requires the model in eval mode"));
    }
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Range("attack input outside [0,1]".into()));
    }
    if cfg.epsilon == 0.0 {
        // shape and label checks still apply
        per_sample_cross_entropy(&model.forward(x)?, y)?;
        return Ok(x.clone());
    }
    let mut best = single_run(model, x, y, cfg, r)?;
    if cfg.restarts == 1 {
        return Ok(best);
    }
    let mut best_loss = per_sample_cross_entropy(&model.forward(&best)?, y)?;
    for _ in 1..cfg.restarts {
        let cand = single_run(model, x, y, cfg, r)?;
        let loss = per_sample_cross_entropy(&model.forward(&cand)?, y)?;
        for (i, l) in loss.into_iter().enumerate() {
            if l > best_loss[i] {
                best_loss[i] = l;
                best.row_mut(i).copy_from_slice(cand.row(i));
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    /// Fraction of all samples whose perturbed prediction differs from the label.
    pub success_rate: f64,
    /// Fraction of correctly-labeled samples still classified correctly
    /// after the attack.
    pub robust_accuracy: f64,
    pub clean_accuracy: f64,
}

/// Attacks every sample of `dataset` (eval-mode copy of `model`) and tallies
/// both the raw success rate and robust accuracy on trustworthy labels.
pub fn attack_success_rate(model: &Classifier, dataset: &Dataset, cfg: &AttackConfig, seed: u64) -> Result<AttackOutcome> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("attack on an empty dataset".into()));
    }
    let mut frozen = model.clone();
    frozen.set_mode(Mode::Eval);
    let mut r = rng::stream(seed, rng::STREAM_ATTACK);
    let (mut flipped, mut robust_ok, mut clean_ok, mut trusted) = (0usize, 0usize, 0usize, 0usize);
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = dataset.batch(chunk);
        let clean_pred = frozen.predict(&x)?;
        let adv = pgd_perturb(&frozen, &x, &y, cfg, &mut r)?;
        let adv_pred = frozen.predict(&adv)?;
        for (j, &i) in chunk.iter().enumerate() {
            if adv_pred[j] != y[j] {
                flipped += 1;
            }
            if dataset.samples()[i].origin.is_correctly_labeled() {
                trusted += 1;
                robust_ok += (adv_pred[j] == y[j]) as usize;
                clean_ok += (clean_pred[j] == y[j]) as usize;
            }
        }
    }
    let denom = trusted.max(1) as f64;
    Ok(AttackOutcome {
        success_rate: flipped as f64 / dataset.len() as f64,
        robust_accuracy: robust_ok as f64 / denom,
        clean_accuracy: clean_ok as f64 / denom,
    })
}
