// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mini-batch Adam training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::debug;

use super::grad::{accumulate, Gradients, Workspace};
use super::{corpus_mean, SaeConfig, SaeModel};
use crate::embedding_store::EmbeddingCorpus;
use crate::error::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    /// Validation MSE of the freshly initialized model.
    pub initial_val_mse: f64,
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    /// Dead latents on the validation corpus at threshold 0, per epoch.
    pub dead_latents: Vec<usize>,
    pub epochs_completed: usize,
}

impl TrainStats {
    pub fn final_val_mse(&self) -> f64 {
        self.val_mse.last().copied().unwrap_or(self.initial_val_mse)
    }

    pub fn final_dead_latents(&self) -> Option<usize> {
        self.dead_latents.last().copied()
    }
}

struct Adam {
    step: i32,
    lr: f64,
    m: Gradients<f32>,
    v: Gradients<f32>,
}

impl Adam {
    fn new(lr: f64, m: usize, l: usize) -> Self {
        Self {
            step: 0,
            lr,
            m: Gradients::zeros(m, l),
            v: Gradients::zeros(m, l),
        }
    }

    fn update(&mut self, model: &mut SaeModel<f32>, g: &Gradients<f32>) {
        self.step += 1;
        let b1 = BETA1 as f32;
        let b2 = BETA2 as f32;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        let step_size = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (EPS * c2.sqrt()) as f32;
        let tensors = [
            (
                &mut model.enc_weight,
                &g.enc_weight,
                &mut self.m.enc_weight,
                &mut self.v.enc_weight,
            ),
            (
                &mut model.enc_bias,
                &g.enc_bias,
                &mut self.m.enc_bias,
                &mut self.v.enc_bias,
            ),
            (
                &mut model.dec_weight,
                &g.dec_weight,
                &mut self.m.dec_weight,
                &mut self.v.dec_weight,
            ),
            (
                &mut model.dec_bias,
                &g.dec_bias,
                &mut self.m.dec_bias,
                &mut self.v.dec_bias,
            ),
        ];
        for (p, g, m, v) in tensors {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p[i] -= step_size * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// Trains an SAE on `train_corpus`, tracking validation error and dead latents
/// on `val_corpus` after every epoch. Output is a pure function of the inputs.
pub fn train(
    config: &SaeConfig,
    train_corpus: &EmbeddingCorpus,
    val_corpus: &EmbeddingCorpus,
) -> Result<(SaeModel<f32>, TrainStats)> {
    config.validate()?;
    for (name, c) in [("training", train_corpus), ("validation", val_corpus)] {
        if c.dim() != config.input_dim {
            return Err(Error::Shape(format!(
                "{name} corpus dimension {} does not match input_dim {}",
                c.dim(),
                config.input_dim
            )));
        }
        if c.is_empty() {
            return Err(Error::Usage(format!("{name} corpus is empty")));
        }
    }
    let (m, l) = (config.input_dim, config.latent_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mean = if config.center_inputs {
        corpus_mean(train_corpus)
    } else {
        vec![0.0; m]
    };
    let mut model = SaeModel::init(config, mean, &mut rng)?;
    let initial_val_mse = model.reconstruction_mse(val_corpus)?;

    let mut stats = TrainStats {
        initial_val_mse,
        train_mse: Vec::with_capacity(config.epochs),
        val_mse: Vec::with_capacity(config.epochs),
        dead_latents: Vec::with_capacity(config.epochs),
        epochs_completed: 0,
    };
    let mut adam = Adam::new(config.learning_rate, m, l);
    let mut grads = Gradients::zeros(m, l);
    let mut ws = Workspace::new(m, l);
    let mut order: Vec<usize> = (0..train_corpus.len()).collect();
    let mut batch: Vec<&[f32]> = Vec::with_capacity(config.batch_size);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut se_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_corpus.row(i)));
            grads.reset();
            let (mse, l1) = accumulate(&model, &batch, &mut grads, &mut ws);
            if !(mse + l1).is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("loss became {}", mse + l1),
                });
            }
            se_sum += mse * chunk.len() as f64;
            adam.update(&mut model, &grads);
            model.normalize_decoder();
        }
        if model.enc_weight.iter().chain(&model.dec_weight).any(|v| !v.is_finite()) {
            return Err(Error::Training {
                epoch,
                message: "parameters became non-finite".into(),
            });
        }
        let train_mse = se_sum / train_corpus.len() as f64;
        let (val_mse, dead) = model.reconstruction_stats(val_corpus, 0.0)?;
        debug!(epoch, train_mse, val_mse, dead = dead.len(), "epoch finished");
        stats.train_mse.push(train_mse);
        stats.val_mse.push(val_mse);
        stats.dead_latents.push(dead.len());
        stats.epochs_completed = epoch + 1;
    }
    Ok((model, stats))
}
