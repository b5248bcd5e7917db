// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature steering and the relative similarity score.
//!
//! Steering overwrites one latent of an encoded sample before decoding:
//! deactivation writes `-a_φ`, activation writes `+a_φ`. The effect is
//! measured by δ_s(x) = cos(x, c⁺) − cos(x, c⁻), where c⁺ and c⁻ are the
//! centroids of the SAE reconstructions of the two classes in the training
//! set.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{EmbeddingCorpus, LabelSet};
use crate::error::{Error, Result};
use crate::linalg::{cosine, Scalar};
use crate::sae::{LatentVector, SaeModel};

pub const HIST_BINS: usize = 40;
pub const HIST_LO: f64 = -1.2;
pub const HIST_HI: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SteerDirection {
    Activate,
    Deactivate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteerConfig {
    pub phi: usize,
    #[serde(default = "default_a_phi")]
    pub a_phi: f64,
    #[serde(default = "default_positive")]
    pub positive_class: String,
    #[serde(default = "default_negative")]
    pub negative_class: String,
    #[serde(default = "default_direction")]
    pub direction: SteerDirection,
}

fn default_a_phi() -> f64 {
    1.0
}
fn default_positive() -> String {
    "positive".into()
}
fn default_negative() -> String {
    "negative".into()
}
fn default_direction() -> SteerDirection {
    SteerDirection::Deactivate
}

impl SteerConfig {
    pub fn new(phi: usize, direction: SteerDirection) -> Self {
        Self {
            phi,
            a_phi: default_a_phi(),
            positive_class: default_positive(),
            negative_class: default_negative(),
            direction,
        }
    }

    pub fn with_direction(&self, direction: SteerDirection) -> Self {
        Self {
            direction,
            ..self.clone()
        }
    }

    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        if !(self.a_phi > 0.0 && self.a_phi.is_finite()) {
            return Err(Error::Usage(format!(
                "a_phi {} must be a positive finite number",
                self.a_phi
            )));
        }
        if self.phi >= latent_dim {
            return Err(Error::Shape(format!(
                "phi {} out of range for L={latent_dim}",
                self.phi
            )));
        }
        Ok(())
    }
}

/// Class centroids of SAE reconstructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringContext {
    pub centroid_pos: Vec<f32>,
    pub centroid_neg: Vec<f32>,
    pub source: String,
    /// Rows the centroids were computed from.
    pub training_rows: Vec<usize>,
}

impl SteeringContext {
    pub fn swapped(&self) -> Self {
        Self {
            centroid_pos: self.centroid_neg.clone(),
            centroid_neg: self.centroid_pos.clone(),
            ..self.clone()
        }
    }
}

/// Means the reconstructions of the positive and negative rows among
/// `train_indices`. Unlabeled rows are skipped.
pub fn build_context(
    model: &SaeModel,
    corpus: &EmbeddingCorpus,
    labels: &LabelSet,
    train_indices: &[usize],
) -> Result<SteeringContext> {
    model.check_corpus(corpus)?;
    let row_labels = labels.row_labels(corpus)?;
    let m = model.input_dim();
    let sums = train_indices
        .par_iter()
        .map(|&i| -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
            let mut pos = vec![0.0; m];
            let mut neg = vec![0.0; m];
            let label = *row_labels
                .get(i)
                .ok_or_else(|| Error::Shape(format!("row {i} out of range for N={}", corpus.len())))?;
            let (target, np, nn) = match label {
                Some(true) => (&mut pos, 1, 0),
                Some(false) => (&mut neg, 0, 1),
                None => return Ok((pos, neg, 0, 0)),
            };
            for (t, r) in target.iter_mut().zip(model.reconstruct(corpus.row(i))?) {
                *t += r as f64;
            }
            Ok((pos, neg, np, nn))
        })
        .try_reduce(
            || (vec![0.0; m], vec![0.0; m], 0, 0),
            |mut a, b| {
                a.0.iter_mut().zip(&b.0).for_each(|(x, y)| *x += y);
                a.1.iter_mut().zip(&b.1).for_each(|(x, y)| *x += y);
                Ok((a.0, a.1, a.2 + b.2, a.3 + b.3))
            },
        )?;
    let (pos, neg, np, nn) = sums;
    if np == 0 || nn == 0 {
        return Err(Error::Usage(format!(
            "centroids need both classes among the training rows, found {np} positive and {nn} negative"
        )));
    }
    let centroid = |s: Vec<f64>, n: usize| -> Vec<f32> { s.into_iter().map(|x| (x / n as f64) as f32).collect() };
    let ctx = SteeringContext {
        centroid_pos: centroid(pos, np),
        centroid_neg: centroid(neg, nn),
        source: format!("{np} positive and {nn} negative training reconstructions"),
        training_rows: train_indices.to_vec(),
    };
    for (name, c) in [("positive", &ctx.centroid_pos), ("negative", &ctx.centroid_neg)] {
        if c.iter().any(|x| !x.is_finite()) || c.iter().all(|&x| x == 0.0) {
            return Err(Error::Numerical(format!("{name} centroid is zero or non-finite")));
        }
    }
    Ok(ctx)
}

/// Copy of `v` with element φ set to `-a_φ` (deactivate) or `+a_φ` (activate).
pub fn steer_latent<T: Scalar>(v: &LatentVector<T>, config: &SteerConfig) -> Result<LatentVector<T>> {
    if config.phi >= v.len() {
        return Err(Error::Shape(format!(
            "phi {} out of range for L={}",
            config.phi,
            v.len()
        )));
    }
    let mut out = v.clone();
    out.values[config.phi] = T::of(match config.direction {
        SteerDirection::Activate => config.a_phi,
        SteerDirection::Deactivate => -config.a_phi,
    });
    Ok(out)
}

/// δ_s(x) = cos(x, centroid_pos) − cos(x, centroid_neg).
pub fn relative_similarity(x: &[f32], ctx: &SteeringContext) -> Result<f64> {
    if x.len() != ctx.centroid_pos.len() || x.len() != ctx.centroid_neg.len() {
        return Err(Error::Shape(format!(
            "vector of length {} does not match centroids of length {}",
            x.len(),
            ctx.centroid_pos.len()
        )));
    }
    let pos = cosine(x, &ctx.centroid_pos);
    let neg = cosine(x, &ctx.centroid_neg);
    match (pos, neg) {
        (Some(p), Some(n)) => Ok(p - n),
        _ => Err(Error::Numerical("relative similarity of a zero-norm vector".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeredSample {
    pub id: String,
    pub positive: bool,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMeans {
    pub count: usize,
    pub before: f64,
    pub after: f64,
}

/// Counts over `HIST_BINS` uniform bins on `[HIST_LO, HIST_HI)`; the last bin
/// also takes `HIST_HI`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<usize>,
    pub underflow: usize,
    pub overflow: usize,
}

impl Histogram {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let mut h = Histogram {
            counts: vec![0; HIST_BINS],
            ..Default::default()
        };
        let width = (HIST_HI - HIST_LO) / HIST_BINS as f64;
        for x in values {
            if x < HIST_LO {
                h.underflow += 1;
            } else if x > HIST_HI {
                h.overflow += 1;
            } else {
                let b = (((x - HIST_LO) / width) as usize).min(HIST_BINS - 1);
                h.counts[b] += 1;
            }
        }
        h
    }

    pub fn edges() -> Vec<f64> {
        let width = (HIST_HI - HIST_LO) / HIST_BINS as f64;
        (0..=HIST_BINS).map(|b| HIST_LO + b as f64 * width).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringHistograms {
    pub edges: Vec<f64>,
    pub positive_before: Histogram,
    pub positive_after: Histogram,
    pub negative_before: Histogram,
    pub negative_after: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringReport {
    pub phi: usize,
    pub a_phi: f64,
    pub positive_class: String,
    pub negative_class: String,
    /// Positive samples are deactivated, negative samples activated.
    pub positive: ClassMeans,
    pub negative: ClassMeans,
    pub samples: Vec<SteeredSample>,
    pub histograms: SteeringHistograms,
}

impl SteeringReport {
    /// `class,count,before,after`
    pub fn means_table(&self) -> String {
        let mut s = String::from("class,count,before,after\n");
        for (name, m) in [
            (&self.positive_class, &self.positive),
            (&self.negative_class, &self.negative),
        ] {
            let _ = writeln!(s, "{name},{},{},{}", m.count, m.before, m.after);
        }
        s
    }

    /// One row per bin with the four distributions as columns. Out-of-range
    /// values are reported as the first and last rows.
    pub fn histogram_csv(&self) -> String {
        let h = &self.histograms;
        let series = [
            &h.positive_before,
            &h.positive_after,
            &h.negative_before,
            &h.negative_after,
        ];
        let mut s = String::from("bin_lo,bin_hi,positive_before,positive_after,negative_before,negative_after\n");
        let row = |s: &mut String, lo: f64, hi: f64, get: &dyn Fn(&Histogram) -> usize| {
            let _ = write!(s, "{lo},{hi}");
            for hist in series {
                let _ = write!(s, ",{}", get(hist));
            }
            s.push('\n');
        };
        row(&mut s, f64::NEG_INFINITY, HIST_LO, &|x| x.underflow);
        for b in 0..HIST_BINS {
            row(&mut s, h.edges[b], h.edges[b + 1], &|x| x.counts[b]);
        }
        row(&mut s, HIST_HI, f64::INFINITY, &|x| x.overflow);
        s
    }
}

/// Deactivates φ for every positive test sample and activates it for every
/// negative one, scoring δ_s before and after.
pub fn run_steering(
    model: &SaeModel,
    ctx: &SteeringContext,
    corpus: &EmbeddingCorpus,
    labels: &LabelSet,
    test_indices: &[usize],
    config: &SteerConfig,
) -> Result<SteeringReport> {
    config.validate(model.latent_dim())?;
    model.check_corpus(corpus)?;
    let train: BTreeSet<usize> = ctx.training_rows.iter().copied().collect();
    if let Some(i) = test_indices.iter().find(|i| train.contains(i)) {
        return Err(Error::Usage(format!("test row {i} was used to build the centroids")));
    }
    let row_labels = labels.row_labels(corpus)?;
    let deactivate = config.with_direction(SteerDirection::Deactivate);
    let activate = config.with_direction(SteerDirection::Activate);
    let rows: Vec<(usize, bool)> = test_indices
        .iter()
        .filter_map(|&i| row_labels.get(i).copied().flatten().map(|y| (i, y)))
        .collect();
    let samples = rows
        .par_iter()
        .map(|&(i, positive)| -> Result<SteeredSample> {
            let v = model.encode(corpus.row(i))?;
            let before = relative_similarity(&model.decode(&v)?, ctx)?;
            let steered = steer_latent(&v, if positive { &deactivate } else { &activate })?;
            let after = relative_similarity(&model.decode(&steered)?, ctx)?;
            Ok(SteeredSample {
                id: corpus.sample_id(i).into_owned(),
                positive,
                before,
                after,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let means = |positive: bool| {
        let class: Vec<&SteeredSample> = samples.iter().filter(|s| s.positive == positive).collect();
        let n = class.len();
        let mean = |f: fn(&SteeredSample) -> f64| {
            if n == 0 {
                f64::NAN
            } else {
                class.iter().map(|s| f(s)).sum::<f64>() / n as f64
            }
        };
        ClassMeans {
            count: n,
            before: mean(|s| s.before),
            after: mean(|s| s.after),
        }
    };
    let hist = |positive: bool, after: bool| {
        Histogram::of(
            samples
                .iter()
                .filter(|s| s.positive == positive)
                .map(|s| if after { s.after } else { s.before }),
        )
    };
    Ok(SteeringReport {
        phi: config.phi,
        a_phi: config.a_phi,
        positive_class: config.positive_class.clone(),
        negative_class: config.negative_class.clone(),
        positive: means(true),
        negative: means(false),
        histograms: SteeringHistograms {
            edges: Histogram::edges(),
            positive_before: hist(true, false),
            positive_after: hist(true, true),
            negative_before: hist(false, false),
            negative_after: hist(false, true),
        },
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(pos: Vec<f32>, neg: Vec<f32>) -> SteeringContext {
        SteeringContext {
            centroid_pos: pos,
            centroid_neg: neg,
            source: "test".into(),
            training_rows: vec![],
        }
    }

    #[test]
    fn deactivate_writes_negative_magnitude() {
        let v = LatentVector::new(vec![0.7f32, 0.2]);
        let out = steer_latent(&v, &SteerConfig::new(0, SteerDirection::Deactivate)).unwrap();
        assert_eq!(out.values, vec![-1.0, 0.2]);
    }

    #[test]
    fn activate_writes_positive_magnitude() {
        let v = LatentVector::new(vec![0.0f32, 0.2]);
        let out = steer_latent(&v, &SteerConfig::new(0, SteerDirection::Activate)).unwrap();
        assert_eq!(out.values, vec![1.0, 0.2]);
    }

    #[test]
    fn out_of_range_phi_is_shape_error() {
        let v = LatentVector::new(vec![0.0f32; 3]);
        let err = steer_latent(&v, &SteerConfig::new(3, SteerDirection::Activate)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn centroid_itself_scores_one_against_orthogonal() {
        let c = ctx(vec![1.0, 0.0], vec![0.0, 2.0]);
        assert!((relative_similarity(&[1.0, 0.0], &c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_centroids_score_zero() {
        let c = ctx(vec![0.3, -1.0], vec![0.3, -1.0]);
        assert_eq!(relative_similarity(&[5.0, 2.0], &c).unwrap(), 0.0);
    }

    #[test]
    fn zero_vector_is_numerical_error() {
        let c = ctx(vec![1.0, 0.0], vec![0.0, 1.0]);
        assert!(matches!(relative_similarity(&[0.0, 0.0], &c), Err(Error::Numerical(_))));
        let z = ctx(vec![0.0, 0.0], vec![0.0, 1.0]);
        assert!(matches!(relative_similarity(&[1.0, 0.0], &z), Err(Error::Numerical(_))));
    }

    #[test]
    fn histogram_routes_out_of_range_values() {
        let h = Histogram::of([-1.5, -1.2, 0.0, 1.2, 1.3]);
        assert_eq!((h.underflow, h.overflow), (1, 1));
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[20], 1);
        assert_eq!(h.counts[HIST_BINS - 1], 1);
        assert_eq!(h.counts.iter().sum::<usize>(), 3);
    }
}
