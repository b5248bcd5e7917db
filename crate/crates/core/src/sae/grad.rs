// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training loss and its analytic gradient.
//!
//! The loss is the batch mean of the per-element squared reconstruction
//! error, plus `λ · mean_b Σ_j |v_bj|` for the ReLU variant. The TopK mask and
//! the ReLU gate are held fixed during backpropagation, so gradients flow
//! only through the selected support.

use super::{activate, Activation, SaeModel};
use crate::error::{Error, Result};
use crate::linalg::{axpy, Scalar};

/// Gradients with the same layout as the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub enc_weight: Vec<T>,
    pub enc_bias: Vec<T>,
    pub dec_weight: Vec<T>,
    pub dec_bias: Vec<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros(m: usize, l: usize) -> Self {
        Self {
            enc_weight: vec![T::zero(); l * m],
            enc_bias: vec![T::zero(); l],
            dec_weight: vec![T::zero(); m * l],
            dec_bias: vec![T::zero(); m],
        }
    }

    pub(crate) fn reset(&mut self) {
        for v in [
            &mut self.enc_weight,
            &mut self.enc_bias,
            &mut self.dec_weight,
            &mut self.dec_bias,
        ] {
            v.iter_mut().for_each(|x| *x = T::zero());
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    /// `mse + l1`
    pub loss: f64,
    pub mse: f64,
    pub l1: f64,
    pub grads: Gradients<T>,
}

/// Per-sample scratch space for the forward/backward pass.
pub(crate) struct Workspace<T> {
    centered: Vec<T>,
    latent: Vec<T>,
    support: Vec<usize>,
    residual: Vec<T>,
}

impl<T: Scalar> Workspace<T> {
    pub(crate) fn new(m: usize, l: usize) -> Self {
        Self {
            centered: vec![T::zero(); m],
            latent: vec![T::zero(); l],
            support: Vec::with_capacity(l),
            residual: vec![T::zero(); m],
        }
    }
}

/// Loss and gradients over a batch of input rows.
pub fn loss<T: Scalar>(model: &SaeModel<T>, batch: &[&[T]]) -> Result<LossOutput<T>> {
    if batch.is_empty() {
        return Err(Error::Usage("loss needs a non-empty batch".into()));
    }
    let (m, l) = (model.input_dim(), model.latent_dim());
    if let Some(row) = batch.iter().find(|r| r.len() != m) {
        return Err(Error::Shape(format!(
            "batch row has length {}, model expects {m}",
            row.len()
        )));
    }
    let mut grads = Gradients::zeros(m, l);
    let mut ws = Workspace::new(m, l);
    let (mse, l1) = accumulate(model, batch, &mut grads, &mut ws);
    Ok(LossOutput {
        loss: mse + l1,
        mse,
        l1,
        grads,
    })
}

/// Adds the batch gradient into `grads` (which the caller zeroes) and returns
/// the `(mse, l1)` loss terms.
pub(crate) fn accumulate<T: Scalar>(
    model: &SaeModel<T>,
    batch: &[&[T]],
    grads: &mut Gradients<T>,
    ws: &mut Workspace<T>,
) -> (f64, f64) {
    let (m, l) = (model.input_dim(), model.latent_dim());
    let b = batch.len();
    let lambda = match model.config.activation {
        Activation::Relu { l1_lambda } => l1_lambda,
        Activation::TopK { .. } => 0.0,
    };
    // d(mean_b mean_i r²)/dr = 2 r / (M B)
    let scale = T::of(2.0 / (m * b) as f64);
    let l1_grad = T::of(lambda / b as f64);
    let mut se_total = 0.0f64;
    let mut l1_total = 0.0f64;

    for &x in batch {
        model.pre_activation_into(x, &mut ws.centered, &mut ws.latent);
        activate(model.config.activation, &mut ws.latent, &mut ws.support);

        // residual = W_dec v + b_dec − (x − μ)
        for i in 0..m {
            ws.residual[i] = model.dec_bias[i] - ws.centered[i];
        }
        for &j in &ws.support {
            let a = ws.latent[j];
            for i in 0..m {
                ws.residual[i] += model.dec_weight[i * l + j] * a;
            }
        }
        se_total += ws.residual.iter().map(|r| r.as_f64() * r.as_f64()).sum::<f64>();
        if lambda > 0.0 {
            l1_total += ws.support.iter().map(|&j| ws.latent[j].as_f64().abs()).sum::<f64>();
        }

        for r in ws.residual.iter_mut() {
            *r *= scale;
        }
        axpy(T::one(), &ws.residual, &mut grads.dec_bias);
        for &j in &ws.support {
            let a = ws.latent[j];
            let mut dv = T::zero();
            for i in 0..m {
                let g = ws.residual[i];
                grads.dec_weight[i * l + j] += g * a;
                dv += model.dec_weight[i * l + j] * g;
            }
            if lambda > 0.0 {
                dv += l1_grad * a.signum();
            }
            grads.enc_bias[j] += dv;
            axpy(dv, &ws.centered, &mut grads.enc_weight[j * m..(j + 1) * m]);
        }
    }
    let mse = se_total / (m * b) as f64;
    let l1 = lambda * l1_total / b as f64;
    (mse, l1)
}
