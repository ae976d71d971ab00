//! Hard-training-sample scores: correct-class softmax probability (CCSP),
//! maximum softmax probability (MSP), and the Mahalanobis family (MD, RMD,
//! ARMD) over pre-logit features.

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, SampleId};
use crate::error::{Error, Result};
use crate::model::{argmax, softmax, Classifier, Mode};
use crate::tensor::Tensor;

const SCORE_BATCH: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMethod {
    Ccsp,
    Msp,
    Armd,
}

impl ScoreMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMethod::Ccsp => "ccsp",
            ScoreMethod::Msp => "msp",
            ScoreMethod::Armd => "armd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ccsp" => Some(ScoreMethod::Ccsp),
            "msp" => Some(ScoreMethod::Msp),
            "armd" => Some(ScoreMethod::Armd),
            _ => None,
        }
    }
}

/// Which model produced a score: a held-out fold model or the online model at
/// the end of an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Fold(usize),
    Epoch(usize),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Fold(i) => write!(f, "fold:{i}"),
            Provenance::Epoch(e) => write!(f, "epoch:{e}"),
        }
    }
}

impl Provenance {
    pub fn parse(s: &str) -> Option<Self> {
        let (kind, n) = s.split_once(':')?;
        let n = n.parse().ok()?;
        match kind {
            "fold" => Some(Provenance::Fold(n)),
            "epoch" => Some(Provenance::Epoch(n)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: SampleId,
    pub method: ScoreMethod,
    pub score: f64,
    pub provenance: Provenance,
    pub model_id: String,
}

/// Softmax probability of the labeled class, `exp(z_y) / Σ_j exp(z_j)`.
pub fn ccsp(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::Label {
            label: y,
            num_classes: logits.len(),
        });
    }
    Ok(softmax(logits)[y])
}

/// Largest softmax probability; equals `ccsp(z, argmax z)`.
pub fn msp(logits: &[f64]) -> f64 {
    softmax(logits)[argmax(logits)]
}

/// Diagonal loading added to a covariance before inversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Regularization {
    /// `λ = scale · trace(Σ)/D`, falling back to `λ = scale` when the trace
    /// vanishes.
    TraceScaled(f64),
    Fixed(f64),
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization::TraceScaled(1e-6)
    }
}

impl Regularization {
    fn lambda(self, sigma: &[f64], dim: usize) -> f64 {
        match self {
            Regularization::Fixed(l) => l,
            Regularization::TraceScaled(scale) => {
                let trace: f64 = (0..dim).map(|i| sigma[i * dim + i]).sum();
                let l = scale * trace / dim as f64;
                if l > 0.0 {
                    l
                } else {
                    scale
                }
            }
        }
    }
}

/// Class-conditional Gaussians with a shared covariance, plus one global
/// Gaussian over all features. Matrices are D×D row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub dim: usize,
    pub mu_k: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    pub mu_0: Vec<f64>,
    pub sigma_0: Vec<f64>,
    pub sigma_inv: Vec<f64>,
    pub sigma_0_inv: Vec<f64>,
    pub reg_lambda: f64,
    pub reg_lambda_0: f64,
}

fn regularized_inverse(sigma: &[f64], dim: usize, lambda: f64) -> Result<Vec<f64>> {
    let mut m = DMatrix::from_row_slice(dim, dim, sigma);
    for i in 0..dim {
        m[(i, i)] += lambda;
    }
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Numeric(format!("covariance not positive definite after adding λ={lambda}")))?;
    let inv = chol.inverse();
    let mut out = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            out[i * dim + j] = 0.5 * (inv[(i, j)] + inv[(j, i)]);
        }
    }
    Ok(out)
}

/// Fits per-class means `μ_k`, the shared covariance
/// `Σ = (1/N) Σ_k Σ_{i:y_i=k} (h_i−μ_k)(h_i−μ_k)ᵀ`, the global `μ_0`, `Σ_0`,
/// and the regularized inverses of both covariances.
pub fn fit_gaussian_stats(
    features: &Tensor,
    labels: &[usize],
    num_classes: usize,
    reg: Regularization,
) -> Result<GaussianStats> {
    let n = features.batch();
    if n < 2 {
        return Err(Error::Stats(format!("need at least 2 samples, got {n}")));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} features", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Label {
            label: bad,
            num_classes,
        });
    }
    let d = features.row_len();
    let mut counts = vec![0usize; num_classes];
    let mut mu_k = vec![vec![0.0; d]; num_classes];
    let mut mu_0 = vec![0.0; d];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for (m, h) in mu_k[y].iter_mut().zip(features.row(i)) {
            *m += h;
        }
        for (m, h) in mu_0.iter_mut().zip(features.row(i)) {
            *m += h;
        }
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Stats(format!("class {k} has no samples")));
    }
    for (m, &c) in mu_k.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c as f64);
    }
    mu_0.iter_mut().for_each(|v| *v /= n as f64);

    let mut sigma = vec![0.0; d * d];
    let mut sigma_0 = vec![0.0; d * d];
    let mut dk = vec![0.0; d];
    let mut d0 = vec![0.0; d];
    for (i, &y) in labels.iter().enumerate() {
        let h = features.row(i);
        for j in 0..d {
            dk[j] = h[j] - mu_k[y][j];
            d0[j] = h[j] - mu_0[j];
        }
        for a in 0..d {
            for b in 0..d {
                sigma[a * d + b] += dk[a] * dk[b];
                sigma_0[a * d + b] += d0[a] * d0[b];
            }
        }
    }
    sigma.iter_mut().for_each(|v| *v /= n as f64);
    sigma_0.iter_mut().for_each(|v| *v /= n as f64);

    let reg_lambda = reg.lambda(&sigma, d);
    let reg_lambda_0 = reg.lambda(&sigma_0, d);
    let sigma_inv = regularized_inverse(&sigma, d, reg_lambda)?;
    let sigma_0_inv = regularized_inverse(&sigma_0, d, reg_lambda_0)?;
    Ok(GaussianStats {
        dim: d,
        mu_k,
        sigma,
        mu_0,
        sigma_0,
        sigma_inv,
        sigma_0_inv,
        reg_lambda,
        reg_lambda_0,
    })
}

/// Quadratic form `(h−μ)ᵀ M (h−μ)`; with `M = Σ⁻¹` this is the Mahalanobis
/// distance.
pub fn md(h: &[f64], mu: &[f64], m: &[f64]) -> Result<f64> {
    let d = h.len();
    if mu.len() != d || m.len() != d * d {
        return Err(Error::Shape(format!(
            "md: h has {d} dims, μ has {}, matrix has {} entries",
            mu.len(),
            m.len()
        )));
    }
    let diff: Vec<f64> = h.iter().zip(mu).map(|(a, b)| a - b).collect();
    let mut s = 0.0;
    for a in 0..d {
        let row = &m[a * d..(a + 1) * d];
        let inner: f64 = row.iter().zip(&diff).map(|(x, y)| x * y).sum();
        s += diff[a] * inner;
    }
    Ok(s)
}

/// Which matrix the Mahalanobis quadratic form uses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MdForm {
    /// `(h−μ)ᵀ Σ⁻¹ (h−μ)`.
    #[default]
    Inverse,
    /// `(h−μ)ᵀ Σ (h−μ)`, the uninverted form, kept for comparison runs.
    PlainSigma,
}

/// `MD_k(h) − MD_0(h)`.
pub fn rmd_with(h: &[f64], stats: &GaussianStats, k: usize, form: MdForm) -> Result<f64> {
    let mu = stats.mu_k.get(k).ok_or(Error::Label {
        label: k,
        num_classes: stats.mu_k.len(),
    })?;
    let (m, m0) = match form {
        MdForm::Inverse => (&stats.sigma_inv, &stats.sigma_0_inv),
        MdForm::PlainSigma => (&stats.sigma, &stats.sigma_0),
    };
    Ok(md(h, mu, m)? - md(h, &stats.mu_0, m0)?)
}

pub fn rmd(h: &[f64], stats: &GaussianStats, k: usize) -> Result<f64> {
    rmd_with(h, stats, k, MdForm::Inverse)
}

/// `|RMD_y(h)|`.
pub fn armd(h: &[f64], stats: &GaussianStats, y: usize) -> Result<f64> {
    Ok(rmd(h, stats, y)?.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreContext {
    pub provenance: Provenance,
    pub model_id: String,
    pub md_form: MdForm,
}

impl ScoreContext {
    pub fn new(provenance: Provenance, model_id: impl Into<String>) -> Self {
        Self {
            provenance,
            model_id: model_id.into(),
            md_form: MdForm::Inverse,
        }
    }
}

/// Fits Gaussian stats on the model's eval-mode features of `data`.
pub fn fit_stats_on(model: &Classifier, data: &Dataset, reg: Regularization) -> Result<GaussianStats> {
    let m = eval_view(model);
    let mut feats = Vec::with_capacity(data.len() * m.feature_dim());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(SCORE_BATCH) {
        let (x, _) = data.batch(chunk);
        feats.extend_from_slice(m.features(&x)?.data());
    }
    let labels: Vec<usize> = data.samples().iter().map(|s| s.y).collect();
    let feats = Tensor::new(vec![data.len(), m.feature_dim()], feats)?;
    fit_gaussian_stats(&feats, &labels, data.num_classes(), reg)
}

fn eval_view(model: &Classifier) -> std::borrow::Cow<'_, Classifier> {
    if model.mode() == Mode::Eval {
        std::borrow::Cow::Borrowed(model)
    } else {
        let mut c = model.clone();
        c.set_mode(Mode::Eval);
        std::borrow::Cow::Owned(c)
    }
}

/// One score per sample, computed on clean inputs with an eval-mode view of
/// the model.
pub fn score_dataset(
    model: &Classifier,
    data: &Dataset,
    method: ScoreMethod,
    stats: Option<&GaussianStats>,
    ctx: &ScoreContext,
) -> Result<Vec<ScoreRecord>> {
    let stats = match (method, stats) {
        (ScoreMethod::Armd, None) => return Err(Error::config("armd scoring needs fitted Gaussian stats")),
        (_, s) => s,
    };
    let m = eval_view(model);
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(SCORE_BATCH) {
        let (x, y) = data.batch(chunk);
        let (logits, feats) = m.forward_with_features(&x)?;
        for (j, &i) in chunk.iter().enumerate() {
            let score = match method {
                ScoreMethod::Ccsp => ccsp(logits.row(j), y[j])?,
                ScoreMethod::Msp => msp(logits.row(j)),
                ScoreMethod::Armd => rmd_with(feats.row(j), stats.unwrap(), y[j], ctx.md_form)?.abs(),
            };
            out.push(ScoreRecord {
                sample_id: data.samples()[i].id,
                method,
                score,
                provenance: ctx.provenance,
                model_id: ctx.model_id.clone(),
            });
        }
    }
    Ok(out)
}

/// Nine significant digits in scientific notation.
pub fn format_score(v: f64) -> String {
    format!("{v:.8e}")
}

/// Score manifest CSV, rows stably sorted by sample id.
pub fn scores_to_csv(records: &[ScoreRecord]) -> String {
    let mut rows: Vec<&ScoreRecord> = records.iter().collect();
    rows.sort_by_key(|r| r.sample_id);
    let mut out = String::from("sample_id,method,score,provenance,model_id\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.sample_id,
            r.method.as_str(),
            format_score(r.score),
            r.provenance,
            r.model_id
        ));
    }
    out
}

pub fn scores_from_csv(text: &str, file: &str) -> Result<Vec<ScoreRecord>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, "sample_id,method,score,provenance,model_id")) => {}
        _ => return Err(Error::parse(file, 1, "missing score manifest header")),
    }
    lines
        .map(|(no, line)| {
            let cols: Vec<&str> = line.splitn(5, ',').collect();
            if cols.len() != 5 {
                return Err(Error::parse(file, no, "expected 5 columns"));
            }
            Ok(ScoreRecord {
                sample_id: cols[0].parse().map_err(|_| Error::parse(file, no, "bad sample_id"))?,
                method: ScoreMethod::parse(cols[1]).ok_or_else(|| Error::parse(file, no, "bad method"))?,
                score: cols[2].parse().map_err(|_| Error::parse(file, no, "bad score"))?,
                provenance: Provenance::parse(cols[3]).ok_or_else(|| Error::parse(file, no, "bad provenance"))?,
                model_id: cols[4].to_string(),
            })
        })
        .collect()
}

pub fn save_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    fs::write(path, scores_to_csv(records))?;
    Ok(())
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    scores_from_csv(&fs::read_to_string(path)?, &path.display().to_string())
}
