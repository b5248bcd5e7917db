// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logistic-regression probing of SAE latents.
//!
//! A probe is fit on the latent codes of a frozen SAE against binary labels.
//! The latent with the largest positive coefficient is taken as the feature
//! index φ, and φ is then scored on its own as a detector: a sample is
//! predicted positive iff its activation at φ is strictly greater than zero.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{CorpusSplit, EmbeddingCorpus, LabelSet};
use crate::error::{Error, Result};
use crate::gridsearch::{CellStatus, GridResult};
use crate::sae::{load_model_file, SaeModel};

/// Rows per chunk in the parallel reductions. Fixed so that sums do not
/// depend on the thread count.
const CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_l2")]
    pub l2_lambda: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Stop once the gradient norm falls below this.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub seed: u64,
    /// Half-width of the uniform initial weights; 0 starts from zero.
    #[serde(default)]
    pub init_scale: f64,
}

fn default_l2() -> f64 {
    1e-3
}
fn default_max_iters() -> usize {
    20_000
}
fn default_tolerance() -> f64 {
    1e-5
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2_lambda: default_l2(),
            max_iters: default_max_iters(),
            tolerance: default_tolerance(),
            seed: 0,
            init_scale: 0.0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::Usage(format!("probe tolerance {} must be > 0", self.tolerance)));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::Usage(format!("l2_lambda {} must be >= 0", self.l2_lambda)));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Usage(format!("init_scale {} must be >= 0", self.init_scale)));
        }
        Ok(())
    }
}

/// Row-major feature matrix with binary targets.
#[derive(Debug, Clone, Copy)]
pub struct Design<'a> {
    pub features: &'a [f32],
    pub dim: usize,
    pub labels: &'a [bool],
}

impl Design<'_> {
    fn rows(&self) -> usize {
        self.labels.len()
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub iterations: usize,
    pub final_loss: f64,
    pub grad_norm: f64,
}

impl LogisticModel {
    pub fn decision(&self, x: &[f32]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>()
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Regularized logistic loss `mean log(1 + exp(−y·z)) + λ/2 ‖w‖²` and its
/// gradient. The last gradient entry is the (unregularized) intercept.
pub fn logistic_loss_grad(design: Design<'_>, weights: &[f64], intercept: f64, l2: f64) -> (f64, Vec<f64>) {
    let d = design.dim;
    let n = design.rows();
    let partials: Vec<(f64, Vec<f64>)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut g = vec![0.0; d + 1];
            let mut loss = 0.0;
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let x = design.row(i);
                let z = intercept + weights.iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>();
                let y = design.labels[i];
                loss += if y { softplus(-z) } else { softplus(z) };
                let r = sigmoid(z) - if y { 1.0 } else { 0.0 };
                for (gj, &v) in g.iter_mut().zip(x) {
                    *gj += r * v as f64;
                }
                g[d] += r;
            }
            (loss, g)
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; d + 1];
    for (l, g) in partials {
        loss += l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    let inv_n = 1.0 / n.max(1) as f64;
    loss *= inv_n;
    grad.iter_mut().for_each(|g| *g *= inv_n);
    loss += 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>();
    for j in 0..d {
        grad[j] += l2 * weights[j];
    }
    (loss, grad)
}

/// Largest eigenvalue of `AᵀA / n` for the design augmented with a constant
/// column, by power iteration from the all-ones vector.
fn gram_spectral_norm(design: Design<'_>) -> f64 {
    let d = design.dim;
    let n = design.rows().max(1) as f64;
    let mut v = vec![1.0 / ((d + 1) as f64).sqrt(); d + 1];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let partials: Vec<Vec<f64>> = (0..design.rows().div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut out = vec![0.0; d + 1];
                for i in c * CHUNK..((c + 1) * CHUNK).min(design.rows()) {
                    let x = design.row(i);
                    let av = v[d] + x.iter().zip(&v).map(|(&a, b)| a as f64 * b).sum::<f64>();
                    for (o, &a) in out.iter_mut().zip(x) {
                        *o += av * a as f64;
                    }
                    out[d] += av;
                }
                out
            })
            .collect();
        let mut w = vec![0.0; d + 1];
        for p in partials {
            w.iter_mut().zip(p).for_each(|(a, b)| *a += b / n);
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let converged = (norm - lambda).abs() <= 1e-9 * norm;
        lambda = norm;
        v = w.into_iter().map(|x| x / norm).collect();
        if converged {
            break;
        }
    }
    lambda
}

/// Fits an L2-regularized logistic regression by accelerated full-batch
/// gradient descent with a fixed step of `1 / Lipschitz` and
/// function-value restarts. Deterministic for a fixed input and config.
pub fn fit_logistic(design: Design<'_>, config: &ProbeConfig) -> Result<LogisticModel> {
    config.validate()?;
    let d = design.dim;
    if design.features.len() != design.rows() * d {
        return Err(Error::Shape(format!(
            "feature matrix has {} entries for {} rows of dimension {d}",
            design.features.len(),
            design.rows()
        )));
    }
    if design.rows() == 0 {
        return Err(Error::Usage("probe needs at least one training row".into()));
    }
    let lipschitz = 0.25 * gram_spectral_norm(design) * 1.05 + config.l2_lambda;
    let step = if lipschitz > 0.0 { 1.0 / lipschitz } else { 1.0 };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x: Vec<f64> = (0..=d)
        .map(|_| {
            if config.init_scale > 0.0 {
                rng.gen_range(-config.init_scale..=config.init_scale)
            } else {
                0.0
            }
        })
        .collect();
    let mut x_prev = x.clone();
    let mut t = 1.0f64;
    let (mut loss_x, _) = logistic_loss_grad(design, &x[..d], x[d], config.l2_lambda);
    let mut grad_norm = f64::INFINITY;

    for iter in 0..config.max_iters {
        let beta = (t - 1.0) / (t + 1.0).max(1.0);
        let y: Vec<f64> = x.iter().zip(&x_prev).map(|(a, b)| a + beta * (a - b)).collect();
        let (_, gy) = logistic_loss_grad(design, &y[..d], y[d], config.l2_lambda);
        let next: Vec<f64> = y.iter().zip(&gy).map(|(a, g)| a - step * g).collect();
        let (loss_next, g_next) = logistic_loss_grad(design, &next[..d], next[d], config.l2_lambda);
        grad_norm = g_next.iter().map(|g| g * g).sum::<f64>().sqrt();
        if loss_next > loss_x {
            // restart momentum from the current iterate
            t = 1.0;
            x_prev = x.clone();
            continue;
        }
        x_prev = std::mem::replace(&mut x, next);
        loss_x = loss_next;
        t = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        if grad_norm < config.tolerance {
            return Ok(LogisticModel {
                weights: x[..d].to_vec(),
                intercept: x[d],
                iterations: iter + 1,
                final_loss: loss_x,
                grad_norm,
            });
        }
    }
    Err(Error::Convergence {
        iters: config.max_iters,
        grad_norm,
    })
}

/// Confusion counts for the rule "positive iff activation > 0".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IndexMetrics {
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    /// Set when no sample was predicted positive; precision is then reported as 0.
    pub no_positive_predictions: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IndexEvaluation {
    pub metrics: IndexMetrics,
    pub false_positive_ids: Vec<String>,
    pub false_negative_ids: Vec<String>,
}

/// Scores one latent column as a detector. `activations[i]` is the latent
/// value of sample `ids[i]`, whose true class is `labels[i]`.
pub fn evaluate_activations(activations: &[f32], labels: &[bool], ids: &[String]) -> IndexEvaluation {
    let mut ev = IndexEvaluation::default();
    let m = &mut ev.metrics;
    for ((&a, &y), id) in activations.iter().zip(labels).zip(ids) {
        match (a > 0.0, y) {
            (true, true) => m.true_positives += 1,
            (true, false) => {
                m.false_positives += 1;
                ev.false_positive_ids.push(id.clone());
            }
            (false, false) => m.true_negatives += 1,
            (false, true) => {
                m.false_negatives += 1;
                ev.false_negative_ids.push(id.clone());
            }
        }
    }
    let predicted = m.true_positives + m.false_positives;
    m.no_positive_predictions = predicted == 0;
    m.precision = if predicted == 0 {
        0.0
    } else {
        m.true_positives as f64 / predicted as f64
    };
    let actual = m.true_positives + m.false_negatives;
    m.recall = if actual == 0 {
        0.0
    } else {
        m.true_positives as f64 / actual as f64
    };
    ev
}

/// Evaluates latent `phi` of `model` as a detector over the rows in `index_set`.
pub fn evaluate_index(
    model: &SaeModel,
    phi: usize,
    corpus: &EmbeddingCorpus,
    labels: &LabelSet,
    index_set: &[usize],
) -> Result<IndexEvaluation> {
    if index_set.is_empty() {
        return Err(Error::Usage("evaluate_index needs a non-empty index set".into()));
    }
    if phi >= model.latent_dim() {
        return Err(Error::Shape(format!(
            "phi {phi} out of range for L={}",
            model.latent_dim()
        )));
    }
    let row_labels = labels.row_labels(corpus)?;
    let mut y = Vec::with_capacity(index_set.len());
    let mut ids = Vec::with_capacity(index_set.len());
    for &i in index_set {
        let label = row_labels
            .get(i)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Validation(format!("row {i} has no label")))?;
        y.push(label);
        ids.push(corpus.sample_id(i).into_owned());
    }
    let acts = latent_column(model, corpus, index_set, phi)?;
    Ok(evaluate_activations(&acts, &y, &ids))
}

fn latent_column(model: &SaeModel, corpus: &EmbeddingCorpus, rows: &[usize], phi: usize) -> Result<Vec<f32>> {
    let l = model.latent_dim();
    Ok(model
        .encode_rows(corpus, rows)?
        .chunks_exact(l)
        .map(|v| v[phi])
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub attribute: String,
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Latent with the largest positive-class coefficient.
    pub phi: usize,
    pub iterations: usize,
    pub final_loss: f64,
    pub train: IndexMetrics,
    pub test: IndexMetrics,
    /// Held-out samples the φ detector gets wrong.
    pub false_positive_ids: Vec<String>,
    pub false_negative_ids: Vec<String>,
}

impl ProbeResult {
    /// The `n` latent indices with the largest coefficients, descending; ties
    /// go to the lower index.
    pub fn ranked_indices(&self, n: usize) -> Vec<(usize, f64)> {
        let mut order: Vec<usize> = (0..self.weights.len()).collect();
        order.sort_by(|&a, &b| {
            self.weights[b]
                .partial_cmp(&self.weights[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order.into_iter().take(n).map(|j| (j, self.weights[j])).collect()
    }
}

/// Index of the largest weight, lowest index on ties.
pub fn argmax(weights: &[f64]) -> usize {
    let mut best = 0;
    for (j, &w) in weights.iter().enumerate() {
        if w > weights[best] {
            best = j;
        }
    }
    best
}

/// Latent-space probe data for one partition.
#[derive(Debug, Clone)]
pub struct LatentPartition {
    /// `rows × L`
    pub latents: Vec<f32>,
    pub labels: Vec<bool>,
    pub ids: Vec<String>,
}

/// Probes a precomputed latent matrix. `fit_probe` is this plus encoding.
pub fn fit_probe_latents(
    attribute: &str,
    latent_dim: usize,
    train: &LatentPartition,
    test: &LatentPartition,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    for (name, part) in [("train", train), ("test", test)] {
        let pos = part.labels.iter().filter(|&&y| y).count();
        if pos == 0 || pos == part.labels.len() {
            return Err(Error::Usage(format!(
                "{name} partition needs both classes, has {pos} positive of {}",
                part.labels.len()
            )));
        }
        if part.latents.len() != part.labels.len() * latent_dim {
            return Err(Error::Shape(format!(
                "{name} latent matrix does not match L={latent_dim}"
            )));
        }
    }
    let fit = fit_logistic(
        Design {
            features: &train.latents,
            dim: latent_dim,
            labels: &train.labels,
        },
        config,
    )?;
    let phi = argmax(&fit.weights);
    let column = |p: &LatentPartition| -> Vec<f32> { p.latents.chunks_exact(latent_dim).map(|v| v[phi]).collect() };
    let train_eval = evaluate_activations(&column(train), &train.labels, &train.ids);
    let test_eval = evaluate_activations(&column(test), &test.labels, &test.ids);
    Ok(ProbeResult {
        attribute: attribute.to_owned(),
        weights: fit.weights,
        intercept: fit.intercept,
        phi,
        iterations: fit.iterations,
        final_loss: fit.final_loss,
        train: train_eval.metrics,
        test: test_eval.metrics,
        false_positive_ids: test_eval.false_positive_ids,
        false_negative_ids: test_eval.false_negative_ids,
    })
}

/// Encodes the labeled rows of one partition.
pub fn latent_partition(
    model: &SaeModel,
    corpus: &EmbeddingCorpus,
    row_labels: &[Option<bool>],
    rows: &[usize],
) -> Result<LatentPartition> {
    let rows: Vec<usize> = rows.iter().copied().filter(|&i| row_labels[i].is_some()).collect();
    Ok(LatentPartition {
        latents: model.encode_rows(corpus, &rows)?,
        labels: rows.iter().map(|&i| row_labels[i].unwrap()).collect(),
        ids: rows.iter().map(|&i| corpus.sample_id(i).into_owned()).collect(),
    })
}

/// Fits a probe on the training rows of `split` and scores φ on the test rows.
/// Rows without a label are ignored.
pub fn fit_probe(
    model: &SaeModel,
    corpus: &EmbeddingCorpus,
    labels: &LabelSet,
    split: &CorpusSplit,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    split.validate(corpus.len())?;
    model.check_corpus(corpus)?;
    let row_labels = labels.row_labels(corpus)?;
    let train = latent_partition(model, corpus, &row_labels, &split.train)?;
    let test = latent_partition(model, corpus, &row_labels, &split.test)?;
    fit_probe_latents(&labels.positive_label, model.latent_dim(), &train, &test, config)
}

/// One row of the latent-dimension × k heatmap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub latent_dim: usize,
    pub k: usize,
    pub phi: Option<usize>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub error: Option<String>,
}

/// Probes every completed cell of a grid. Failures are recorded per cell.
pub fn probe_grid(
    grid: &GridResult,
    grid_dir: &Path,
    corpus: &EmbeddingCorpus,
    labels: &LabelSet,
    split: &CorpusSplit,
    config: &ProbeConfig,
) -> Vec<ProbeCell> {
    grid.cells
        .iter()
        .filter(|c| c.status == CellStatus::Completed)
        .map(|cell| {
            let outcome = load_model_file(&grid_dir.join(&cell.checkpoint))
                .and_then(|model| fit_probe(&model, corpus, labels, split, config));
            match outcome {
                Ok(r) => ProbeCell {
                    latent_dim: cell.latent_dim,
                    k: cell.k,
                    phi: Some(r.phi),
                    precision: Some(r.test.precision),
                    recall: Some(r.test.recall),
                    error: None,
                },
                Err(e) => ProbeCell {
                    latent_dim: cell.latent_dim,
                    k: cell.k,
                    phi: None,
                    precision: None,
                    recall: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn part(latents: Vec<f32>, labels: Vec<bool>) -> LatentPartition {
        let ids = (0..labels.len()).map(|i| format!("r{i}")).collect();
        LatentPartition { latents, labels, ids }
    }

    #[test]
    fn all_zero_activations_give_zero_recall_and_flag() {
        let ev = evaluate_activations(
            &[0.0, 0.0, 0.0],
            &[true, false, true],
            &["a".into(), "b".into(), "c".into()],
        );
        assert_eq!(ev.metrics.recall, 0.0);
        assert_eq!(ev.metrics.precision, 0.0);
        assert!(ev.metrics.no_positive_predictions);
        assert_eq!(ev.false_negative_ids, vec!["a".to_string(), "c".to_string()]);
    }

    #[test]
    fn decision_rule_is_strictly_positive() {
        let ev = evaluate_activations(
            &[1e-30, -0.0, -1.0],
            &[true, true, false],
            &["a".into(), "b".into(), "c".into()],
        );
        assert_eq!(ev.metrics.true_positives, 1);
        assert_eq!(ev.metrics.false_negatives, 1);
        assert_eq!(ev.metrics.true_negatives, 1);
    }

    #[test]
    fn constant_training_labels_rejected() {
        let train = part(vec![1.0, 0.0, 0.5, 0.0], vec![true, true]);
        let test = part(vec![1.0, 0.0, 0.0, 1.0], vec![true, false]);
        let r = fit_probe_latents("x", 2, &train, &test, &ProbeConfig::default());
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn planted_latent_is_found_exactly() {
        // latent 2 equals the label; the others are deterministic noise
        let l = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let make = |n: usize, rng: &mut ChaCha8Rng| {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for i in 0..n {
                let label = i % 3 == 0;
                for j in 0..l {
                    x.push(if j == 2 {
                        label as u8 as f32
                    } else {
                        rng.gen_range(0.0..1.0)
                    });
                }
                y.push(label);
            }
            part(x, y)
        };
        let train = make(300, &mut rng);
        let test = make(120, &mut rng);
        let r = fit_probe_latents("x", l, &train, &test, &ProbeConfig::default()).unwrap();
        assert_eq!(r.phi, 2);
        assert_eq!(r.test.precision, 1.0);
        assert_eq!(r.test.recall, 1.0);
        assert_eq!(r.ranked_indices(1)[0].0, 2);
        assert_eq!(r.ranked_indices(l).len(), l);
    }

    #[test]
    fn max_iters_exhaustion_is_convergence_error() {
        let train = part(vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5], vec![true, false, true]);
        let cfg = ProbeConfig {
            max_iters: 2,
            tolerance: 1e-14,
            ..Default::default()
        };
        let r = fit_logistic(
            Design {
                features: &train.latents,
                dim: 2,
                labels: &train.labels,
            },
            &cfg,
        );
        match r {
            Err(Error::Convergence { iters, grad_norm }) => {
                assert_eq!(iters, 2);
                assert!(grad_norm.is_finite());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.5, 2.0, 2.0, -1.0]), 1);
    }
}
