// SPDX-License-Identifier: MIT OR Apache-2.0

use latent_lens::sae::{loss, Activation, SaeConfig, SaeModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Forward pass written from the definition with dense loops and a full sort.
fn naive_loss(model: &SaeModel<f64>, batch: &[Vec<f64>]) -> f64 {
    let (m, l) = (model.input_dim(), model.latent_dim());
    let mut total = 0.0;
    for e in batch {
        let mut pre = vec![0.0; l];
        for j in 0..l {
            pre[j] = model.enc_bias[j];
            for i in 0..m {
                pre[j] += model.enc_weight[j * m + i] * (e[i] - model.input_mean[i]);
            }
        }
        let v: Vec<f64> = match model.config.activation {
            Activation::TopK { k } => {
                let mut order: Vec<usize> = (0..l).collect();
                order.sort_by(|&a, &b| pre[b].partial_cmp(&pre[a]).unwrap().then(a.cmp(&b)));
                let keep = &order[..k];
                (0..l).map(|j| if keep.contains(&j) { pre[j] } else { 0.0 }).collect()
            }
            Activation::Relu { .. } => pre.iter().map(|&p| p.max(0.0)).collect(),
        };
        let mut se = 0.0;
        for i in 0..m {
            let mut r = model.dec_bias[i] + model.input_mean[i];
            for j in 0..l {
                r += model.dec_weight[i * l + j] * v[j];
            }
            se += (r - e[i]).powi(2);
        }
        total += se / m as f64;
        if let Activation::Relu { l1_lambda } = model.config.activation {
            total += l1_lambda * v.iter().map(|x| x.abs()).sum::<f64>();
        }
    }
    total / batch.len() as f64
}

fn random_model(rng: &mut ChaCha8Rng, activation: Activation, m: usize, l: usize) -> SaeModel<f64> {
    let mut cfg = SaeConfig::topk(m, l, 1);
    cfg.activation = activation;
    let mut u = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    SaeModel {
        config: cfg,
        enc_weight: u(l * m),
        enc_bias: u(l),
        dec_weight: u(m * l),
        dec_bias: u(m),
        input_mean: u(m),
    }
}

fn support_margin(model: &SaeModel<f64>, e: &[f64], k: usize) -> f64 {
    let mut pre = model.pre_activation(e).unwrap();
    pre.sort_by(|a, b| b.partial_cmp(a).unwrap());
    pre[k - 1] - pre[k]
}

fn params(model: &mut SaeModel<f64>) -> [&mut Vec<f64>; 4] {
    [
        &mut model.enc_weight,
        &mut model.enc_bias,
        &mut model.dec_weight,
        &mut model.dec_bias,
    ]
}

fn check(model: &SaeModel<f64>, batch: &[Vec<f64>], h: f64, tol: f64) {
    let rows: Vec<&[f64]> = batch.iter().map(Vec::as_slice).collect();
    let out = loss(model, &rows).unwrap();
    assert!((out.loss - naive_loss(model, batch)).abs() < 1e-12 * out.loss.max(1.0));
    let g = &out.grads;
    let analytic = [&g.enc_weight, &g.enc_bias, &g.dec_weight, &g.dec_bias];
    for (t, grad) in analytic.iter().enumerate() {
        for idx in 0..grad.len() {
            let mut plus = model.clone();
            params(&mut plus)[t][idx] += h;
            let mut minus = model.clone();
            params(&mut minus)[t][idx] -= h;
            let fd = (naive_loss(&plus, batch) - naive_loss(&minus, batch)) / (2.0 * h);
            let a = grad[idx];
            let scale = a.abs().max(fd.abs());
            if scale > 1e-6 {
                assert!(
                    (a - fd).abs() / scale < tol,
                    "tensor {t} index {idx}: analytic {a} vs numeric {fd}"
                );
            } else {
                assert!(
                    (a - fd).abs() < 1e-9,
                    "tensor {t} index {idx}: analytic {a} vs numeric {fd}"
                );
            }
        }
    }
}

#[test]
fn topk_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (m, l, k) = (6, 9, 3);
    let mut checked = 0;
    while checked < 25 {
        let model = random_model(&mut rng, Activation::TopK { k }, m, l);
        let batch: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        if batch.iter().any(|e| support_margin(&model, e, k) < 1e-2) {
            continue;
        }
        check(&model, &batch, 1e-4, 1e-4);
        checked += 1;
    }
}

#[test]
fn relu_l1_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (m, l) = (5, 7);
    let mut checked = 0;
    while checked < 25 {
        let model = random_model(&mut rng, Activation::Relu { l1_lambda: 0.05 }, m, l);
        let batch: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let near_kink = batch
            .iter()
            .any(|e| model.pre_activation(e).unwrap().iter().any(|p| p.abs() < 1e-2));
        if near_kink {
            continue;
        }
        check(&model, &batch, 1e-4, 1e-4);
        checked += 1;
    }
}

#[test]
fn empty_batch_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = random_model(&mut rng, Activation::TopK { k: 2 }, 4, 6);
    assert!(loss(&model, &[]).is_err());
}
