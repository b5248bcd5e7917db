// SPDX-License-Identifier: MIT OR Apache-2.0

//! The sparse autoencoder: parameters, activations and the forward pass.
//!
//! A latent code is `v = act(W_enc · (e − μ) + b_enc)` and the reconstruction
//! is `ε = W_dec · v + b_dec + μ`, where `μ` is the training-corpus mean (zero
//! when centering is off). `act` is either TopK over raw pre-activations or a
//! ReLU paired with an L1 penalty at training time.

mod checkpoint;
mod grad;
mod train;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_store::EmbeddingCorpus;
use crate::error::{Error, Result};
use crate::linalg::{dot, Scalar};

pub use checkpoint::{load_model, load_model_file, save_model, save_model_file, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use grad::{loss, Gradients, LossOutput};
pub use train::{train, TrainStats};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Activation {
    /// Keep the `k` largest pre-activations by value, zero the rest.
    #[serde(rename = "topk")]
    TopK { k: usize },
    /// Rectify, with `l1_lambda · Σ|v|` added to the training loss.
    #[serde(rename = "relu")]
    Relu { l1_lambda: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub activation: Activation,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_center")]
    pub center_inputs: bool,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    10
}
fn default_center() -> bool {
    true
}

impl SaeConfig {
    pub fn topk(input_dim: usize, latent_dim: usize, k: usize) -> Self {
        Self {
            input_dim,
            latent_dim,
            activation: Activation::TopK { k },
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            seed: 0,
            center_inputs: true,
        }
    }

    pub fn relu(input_dim: usize, latent_dim: usize, l1_lambda: f64) -> Self {
        Self {
            activation: Activation::Relu { l1_lambda },
            ..Self::topk(input_dim, latent_dim, 1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Usage(format!(
                "input_dim ({}) and latent_dim ({}) must be positive",
                self.input_dim, self.latent_dim
            )));
        }
        match self.activation {
            Activation::TopK { k } if k == 0 || k > self.latent_dim => {
                return Err(Error::Usage(format!(
                    "TopK needs 1 <= k <= latent_dim, got k={k}, L={}",
                    self.latent_dim
                )))
            }
            Activation::Relu { l1_lambda } if !(l1_lambda >= 0.0 && l1_lambda.is_finite()) => {
                return Err(Error::Usage(format!("l1_lambda {l1_lambda} must be finite and >= 0")))
            }
            _ => {}
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Usage(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Usage("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> Option<usize> {
        match self.activation {
            Activation::TopK { k } => Some(k),
            Activation::Relu { .. } => None,
        }
    }
}

/// Sparse latent code of one embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector<T = f32> {
    pub values: Vec<T>,
}

impl<T: Scalar> LatentVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn nonzeros(&self) -> usize {
        self.values.iter().filter(|v| !v.is_zero()).count()
    }
}

/// SAE parameters. `enc_weight` is L×M and `dec_weight` is M×L, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel<T = f32> {
    pub config: SaeConfig,
    pub enc_weight: Vec<T>,
    pub enc_bias: Vec<T>,
    pub dec_weight: Vec<T>,
    pub dec_bias: Vec<T>,
    pub input_mean: Vec<T>,
}

/// Indices of the `k` largest entries, ordered by value descending with the
/// lowest index winning ties.
pub fn topk_support<T: Scalar>(pre: &[T], k: usize, scratch: &mut Vec<usize>) {
    scratch.clear();
    scratch.extend(0..pre.len());
    let k = k.min(pre.len());
    if k == 0 {
        scratch.clear();
        return;
    }
    let by_rank = |&a: &usize, &b: &usize| {
        pre[b]
            .partial_cmp(&pre[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    };
    if k < pre.len() {
        scratch.select_nth_unstable_by(k - 1, by_rank);
        scratch.truncate(k);
    }
    scratch.sort_unstable_by(by_rank);
}

/// Applies the configured activation to `pre` in place and records the set of
/// latents through which gradients flow.
pub(crate) fn activate<T: Scalar>(act: Activation, pre: &mut [T], support: &mut Vec<usize>) {
    match act {
        Activation::TopK { k } => {
            topk_support(pre, k, support);
            support.sort_unstable();
            let mut next = 0;
            for (j, v) in pre.iter_mut().enumerate() {
                if support.get(next) == Some(&j) {
                    next += 1;
                } else {
                    *v = T::zero();
                }
            }
        }
        Activation::Relu { .. } => {
            support.clear();
            for (j, v) in pre.iter_mut().enumerate() {
                if *v > T::zero() {
                    support.push(j);
                } else {
                    *v = T::zero();
                }
            }
        }
    }
}

impl<T: Scalar> SaeModel<T> {
    /// Random initialization: decoder columns are Gaussian then unit-normalized,
    /// the encoder is the decoder's transpose and both biases start at zero.
    pub fn init(config: &SaeConfig, input_mean: Vec<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (m, l) = (config.input_dim, config.latent_dim);
        if input_mean.len() != m {
            return Err(Error::Shape(format!(
                "input mean has length {}, expected {m}",
                input_mean.len()
            )));
        }
        let mut dec = vec![T::zero(); m * l];
        for v in dec.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = T::of(z);
        }
        let mut model = Self {
            config: config.clone(),
            enc_weight: vec![T::zero(); l * m],
            enc_bias: vec![T::zero(); l],
            dec_weight: dec,
            dec_bias: vec![T::zero(); m],
            input_mean,
        };
        model.normalize_decoder();
        for j in 0..l {
            for i in 0..m {
                model.enc_weight[j * m + i] = model.dec_weight[i * l + j];
            }
        }
        Ok(model)
    }

    /// Untrained model for `config`, seeded from `config.seed`.
    pub fn init_seeded(config: &SaeConfig, input_mean: Vec<T>) -> Result<Self> {
        Self::init(config, input_mean, &mut ChaCha8Rng::seed_from_u64(config.seed))
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Checks shapes against the config and that every parameter is finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let (m, l) = (self.input_dim(), self.latent_dim());
        for (name, v, len) in [
            ("enc_weight", &self.enc_weight, l * m),
            ("enc_bias", &self.enc_bias, l),
            ("dec_weight", &self.dec_weight, m * l),
            ("dec_bias", &self.dec_bias, m),
            ("input_mean", &self.input_mean, m),
        ] {
            if v.len() != len {
                return Err(Error::Shape(format!("{name} has {} entries, expected {len}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!("{name} contains non-finite values")));
            }
        }
        Ok(())
    }

    /// Rescales every decoder column to unit norm. Zero columns are left as is.
    pub fn normalize_decoder(&mut self) {
        let (m, l) = (self.input_dim(), self.latent_dim());
        for j in 0..l {
            let mut sq = 0.0f64;
            for i in 0..m {
                let w = self.dec_weight[i * l + j].as_f64();
                sq += w * w;
            }
            let n = sq.sqrt();
            if n > 0.0 {
                let inv = T::of(1.0 / n);
                for i in 0..m {
                    self.dec_weight[i * l + j] *= inv;
                }
            }
        }
    }

    pub fn decoder_column(&self, j: usize) -> Vec<T> {
        let l = self.latent_dim();
        (0..self.input_dim()).map(|i| self.dec_weight[i * l + j]).collect()
    }

    fn check_input(&self, e: &[T]) -> Result<()> {
        if e.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has length {}, model expects {}",
                e.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// `W_enc · (e − μ) + b_enc` written into `pre`; `centered` receives `e − μ`.
    pub(crate) fn pre_activation_into(&self, e: &[T], centered: &mut [T], pre: &mut [T]) {
        let m = self.input_dim();
        for ((c, &x), &mu) in centered.iter_mut().zip(e).zip(&self.input_mean) {
            *c = x - mu;
        }
        for (j, p) in pre.iter_mut().enumerate() {
            *p = dot(&self.enc_weight[j * m..(j + 1) * m], centered) + self.enc_bias[j];
        }
    }

    pub fn pre_activation(&self, e: &[T]) -> Result<Vec<T>> {
        self.check_input(e)?;
        let mut centered = vec![T::zero(); self.input_dim()];
        let mut pre = vec![T::zero(); self.latent_dim()];
        self.pre_activation_into(e, &mut centered, &mut pre);
        Ok(pre)
    }

    pub fn encode(&self, e: &[T]) -> Result<LatentVector<T>> {
        let mut pre = self.pre_activation(e)?;
        let mut support = Vec::new();
        activate(self.config.activation, &mut pre, &mut support);
        Ok(LatentVector::new(pre))
    }

    /// `W_dec · v + b_dec + μ`
    pub fn decode(&self, v: &LatentVector<T>) -> Result<Vec<T>> {
        let (m, l) = (self.input_dim(), self.latent_dim());
        if v.len() != l {
            return Err(Error::Shape(format!(
                "latent has length {}, model expects {l}",
                v.len()
            )));
        }
        let mut out: Vec<T> = self
            .dec_bias
            .iter()
            .zip(&self.input_mean)
            .map(|(&b, &mu)| b + mu)
            .collect();
        for (j, &a) in v.values.iter().enumerate() {
            if a.is_zero() {
                continue;
            }
            for i in 0..m {
                out[i] += self.dec_weight[i * l + j] * a;
            }
        }
        Ok(out)
    }

    pub fn reconstruct(&self, e: &[T]) -> Result<Vec<T>> {
        self.decode(&self.encode(e)?)
    }

    /// Casts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> SaeModel<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::of(x.as_f64())).collect();
        SaeModel {
            config: self.config.clone(),
            enc_weight: c(&self.enc_weight),
            enc_bias: c(&self.enc_bias),
            dec_weight: c(&self.dec_weight),
            dec_bias: c(&self.dec_bias),
            input_mean: c(&self.input_mean),
        }
    }
}

impl SaeModel<f32> {
    /// Encodes every row of a corpus, in parallel, preserving row order.
    pub fn encode_corpus(&self, corpus: &EmbeddingCorpus) -> Result<Vec<LatentVector>> {
        self.check_corpus(corpus)?;
        Ok((0..corpus.len())
            .into_par_iter()
            .map(|i| self.encode(corpus.row(i)).expect("dimension checked"))
            .collect())
    }

    /// Encodes the listed rows into a dense `rows × L` matrix.
    pub fn encode_rows(&self, corpus: &EmbeddingCorpus, rows: &[usize]) -> Result<Vec<f32>> {
        self.check_corpus(corpus)?;
        let latents: Vec<Vec<f32>> = rows
            .par_iter()
            .map(|&i| self.encode(corpus.row(i)).expect("dimension checked").values)
            .collect();
        Ok(latents.concat())
    }

    pub(crate) fn check_corpus(&self, corpus: &EmbeddingCorpus) -> Result<()> {
        if corpus.dim() != self.input_dim() {
            return Err(Error::Shape(format!(
                "corpus dimension {} does not match model input {}",
                corpus.dim(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Mean over rows of the per-element squared reconstruction error.
    pub fn reconstruction_mse(&self, corpus: &EmbeddingCorpus) -> Result<f64> {
        Ok(self.reconstruction_stats(corpus, 0.0)?.0)
    }

    /// Reconstruction MSE and the dead-latent set at `threshold`, in one pass.
    pub(crate) fn reconstruction_stats(
        &self,
        corpus: &EmbeddingCorpus,
        threshold: f64,
    ) -> Result<(f64, BTreeSet<usize>)> {
        self.check_corpus(corpus)?;
        let m = self.input_dim() as f64;
        let l = self.latent_dim();
        let per_row: Vec<(f64, Vec<usize>)> = (0..corpus.len())
            .into_par_iter()
            .map(|i| {
                let e = corpus.row(i);
                let v = self.encode(e).expect("dimension checked");
                let r = self.decode(&v).expect("latent length");
                let se: f64 = r
                    .iter()
                    .zip(e)
                    .map(|(&a, &b)| {
                        let d = a as f64 - b as f64;
                        d * d
                    })
                    .sum();
                let alive = (0..l).filter(|&j| (v.values[j] as f64).abs() > threshold).collect();
                (se / m, alive)
            })
            .collect();
        let mut alive = vec![false; l];
        let mut total = 0.0;
        for (mse, idx) in &per_row {
            total += mse;
            for &j in idx {
                alive[j] = true;
            }
        }
        let mse = if corpus.is_empty() {
            0.0
        } else {
            total / corpus.len() as f64
        };
        let dead = (0..l).filter(|&j| !alive[j]).collect();
        Ok((mse, dead))
    }

    /// Latent indices whose activation magnitude never exceeds `threshold`
    /// anywhere in `corpus`.
    pub fn dead_latents(&self, corpus: &EmbeddingCorpus, threshold: f64) -> Result<BTreeSet<usize>> {
        Ok(self.reconstruction_stats(corpus, threshold)?.1)
    }

    /// True when every parameter matches bit for bit.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.config == other.config
            && bits(&self.enc_weight) == bits(&other.enc_weight)
            && bits(&self.enc_bias) == bits(&other.enc_bias)
            && bits(&self.dec_weight) == bits(&other.dec_weight)
            && bits(&self.dec_bias) == bits(&other.dec_bias)
            && bits(&self.input_mean) == bits(&other.input_mean)
    }
}

/// Column means of a corpus, accumulated in `f64`.
pub fn corpus_mean(corpus: &EmbeddingCorpus) -> Vec<f32> {
    let mut acc = vec![0.0f64; corpus.dim()];
    for row in corpus.rows() {
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += x as f64;
        }
    }
    let n = corpus.len().max(1) as f64;
    acc.into_iter().map(|a| (a / n) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(activation: Activation, m: usize, l: usize) -> SaeModel<f64> {
        let mut cfg = SaeConfig::topk(m, l, 1);
        cfg.activation = activation;
        SaeModel {
            config: cfg,
            enc_weight: vec![0.0; l * m],
            enc_bias: vec![0.0; l],
            dec_weight: vec![0.0; m * l],
            dec_bias: vec![0.0; m],
            input_mean: vec![0.0; m],
        }
    }

    #[test]
    fn topk_keeps_largest_values() {
        let mut model = tiny(Activation::TopK { k: 2 }, 1, 3);
        model.enc_bias = vec![3.0, 1.0, 2.0];
        assert_eq!(model.encode(&[0.0]).unwrap().values, vec![3.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut model = tiny(Activation::Relu { l1_lambda: 0.0 }, 1, 2);
        model.enc_bias = vec![-1.0, 2.0];
        assert_eq!(model.encode(&[0.0]).unwrap().values, vec![0.0, 2.0]);
    }

    #[test]
    fn topk_with_k_equal_l_is_identity() {
        let mut model = tiny(Activation::TopK { k: 4 }, 1, 4);
        model.enc_bias = vec![-0.5, 2.0, 0.25, -3.0];
        assert_eq!(model.encode(&[0.0]).unwrap().values, model.enc_bias);
    }

    #[test]
    fn topk_ties_go_to_lowest_index() {
        let mut s = Vec::new();
        topk_support(&[1.0f32, 2.0, 2.0, 2.0, 0.0], 2, &mut s);
        assert_eq!(s, vec![1, 2]);
        topk_support(&[5.0f32, 5.0, 5.0], 1, &mut s);
        assert_eq!(s, vec![0]);
    }

    #[test]
    fn topk_may_select_negative_values() {
        let mut model = tiny(Activation::TopK { k: 2 }, 1, 3);
        model.enc_bias = vec![-3.0, -1.0, -2.0];
        assert_eq!(model.encode(&[0.0]).unwrap().values, vec![0.0, -1.0, -2.0]);
    }

    #[test]
    fn decode_of_zero_is_zero() {
        let model = tiny(Activation::TopK { k: 1 }, 3, 2);
        assert_eq!(model.decode(&LatentVector::new(vec![0.0, 0.0])).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn decode_unit_vector_selects_column() {
        let mut model = tiny(Activation::TopK { k: 1 }, 2, 3);
        model.dec_weight = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        model.dec_bias = vec![0.5, -0.5];
        model.input_mean = vec![10.0, 20.0];
        let out = model.decode(&LatentVector::new(vec![0.0, 1.0, 0.0])).unwrap();
        assert_eq!(out, vec![2.0 + 0.5 + 10.0, 5.0 - 0.5 + 20.0]);
    }

    #[test]
    fn shape_mismatches_are_reported() {
        let model = tiny(Activation::TopK { k: 1 }, 3, 2);
        assert!(matches!(model.encode(&[0.0; 2]), Err(Error::Shape(_))));
        assert!(matches!(
            model.decode(&LatentVector::new(vec![0.0; 3])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn init_has_unit_decoder_columns_and_tied_encoder() {
        let cfg = SaeConfig::topk(5, 7, 2);
        let model: SaeModel<f32> = SaeModel::init_seeded(&cfg, vec![0.0; 5]).unwrap();
        for j in 0..7 {
            let n: f32 = model.decoder_column(j).iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            for i in 0..5 {
                assert_eq!(model.enc_weight[j * 5 + i], model.dec_weight[i * 7 + j]);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(SaeConfig::topk(4, 8, 0).validate().is_err());
        assert!(SaeConfig::topk(4, 8, 9).validate().is_err());
        assert!(SaeConfig::topk(4, 8, 8).validate().is_ok());
        assert!(SaeConfig::relu(4, 8, -1.0).validate().is_err());
    }

    #[test]
    fn dead_latents_infinite_threshold_is_everything() {
        let cfg = SaeConfig::topk(3, 4, 2);
        let model: SaeModel<f32> = SaeModel::init_seeded(&cfg, vec![0.0; 3]).unwrap();
        let corpus = EmbeddingCorpus::new(3, vec![1.0, 2.0, 3.0], None, None).unwrap();
        let dead = model.dead_latents(&corpus, f64::INFINITY).unwrap();
        assert_eq!(dead.len(), 4);
    }
}
