// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic embedding corpora with planted binary attributes.
//!
//! Every sample is a unit-norm speaker base vector, plus `strength · d` for
//! each attribute it carries, plus isotropic Gaussian noise. An attribute may
//! be realized by two orthogonal sub-directions, which gives a known
//! sub-structure for feature-splitting experiments.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{EmbeddingCorpus, LabelSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedAttribute {
    pub name: String,
    /// Probability that a sample carries the attribute.
    pub prevalence: f64,
    pub strength: f64,
    /// Number of orthogonal directions realizing the attribute (1 or 2).
    #[serde(default = "one")]
    pub subcomponents: usize,
    /// Probability of the first direction when there are two.
    #[serde(default)]
    pub subcomponent_mix: Option<f64>,
    /// Strength of a direction common to both subcomponents, added to every
    /// positive. Zero leaves the subcomponents with nothing in common.
    #[serde(default)]
    pub shared_strength: f64,
}

impl PlantedAttribute {
    fn direction_count(&self) -> usize {
        self.subcomponents + usize::from(self.shared_strength > 0.0)
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub dim: usize,
    pub n_samples: usize,
    pub n_speakers: usize,
    pub attributes: Vec<PlantedAttribute>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// The reference corpus used throughout the test suite: M=64, N=20000,
    /// 200 speakers, two attributes, σ=0.1, seed 42.
    pub fn standard() -> Self {
        Self {
            dim: 64,
            n_samples: 20_000,
            n_speakers: 200,
            attributes: vec![
                PlantedAttribute {
                    name: "spanish".into(),
                    prevalence: 0.4,
                    strength: 1.0,
                    subcomponents: 1,
                    subcomponent_mix: None,
                    shared_strength: 0.0,
                },
                PlantedAttribute {
                    name: "music".into(),
                    prevalence: 0.25,
                    strength: 1.0,
                    subcomponents: 1,
                    subcomponent_mix: None,
                    shared_strength: 0.0,
                },
            ],
            noise_sigma: 0.1,
            seed: 42,
        }
    }

    /// Like [`standard`](Self::standard) but with a single attribute realized
    /// by two orthogonal subcomponents (mix 0.4) on top of a shared
    /// direction. Small SAEs give it one latent, larger ones one per
    /// subcomponent.
    pub fn splitting() -> Self {
        Self {
            attributes: vec![PlantedAttribute {
                name: "spanish".into(),
                prevalence: 0.4,
                strength: 0.66,
                subcomponents: 2,
                subcomponent_mix: Some(0.4),
                shared_strength: 1.2,
            }],
            ..Self::standard()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Spec("dim must be positive".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Spec("n_samples must be positive".into()));
        }
        if self.n_speakers == 0 {
            return Err(Error::Spec("n_speakers must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Spec(format!(
                "noise_sigma {} must be finite and >= 0",
                self.noise_sigma
            )));
        }
        let mut names = std::collections::HashSet::new();
        for a in &self.attributes {
            if a.name.is_empty() || !names.insert(a.name.as_str()) {
                return Err(Error::Spec(format!("attribute name {:?} empty or repeated", a.name)));
            }
            if !(a.prevalence > 0.0 && a.prevalence < 1.0) {
                return Err(Error::Spec(format!(
                    "attribute {}: prevalence {} outside (0, 1)",
                    a.name, a.prevalence
                )));
            }
            if !(a.strength >= 0.0 && a.strength.is_finite()) {
                return Err(Error::Spec(format!(
                    "attribute {}: strength {} invalid",
                    a.name, a.strength
                )));
            }
            if !(a.shared_strength >= 0.0 && a.shared_strength.is_finite()) {
                return Err(Error::Spec(format!(
                    "attribute {}: shared_strength {} invalid",
                    a.name, a.shared_strength
                )));
            }
            if a.shared_strength > 0.0 && a.subcomponents != 2 {
                return Err(Error::Spec(format!(
                    "attribute {}: shared_strength needs two subcomponents",
                    a.name
                )));
            }
            match (a.subcomponents, a.subcomponent_mix) {
                (1, None) => {}
                (1, Some(_)) => {
                    return Err(Error::Spec(format!(
                        "attribute {}: subcomponent_mix needs two subcomponents",
                        a.name
                    )))
                }
                (2, Some(m)) if m > 0.0 && m < 1.0 => {}
                (2, _) => {
                    return Err(Error::Spec(format!(
                        "attribute {}: two subcomponents need subcomponent_mix in (0, 1)",
                        a.name
                    )))
                }
                (n, _) => {
                    return Err(Error::Spec(format!(
                        "attribute {}: subcomponents must be 1 or 2, got {n}",
                        a.name
                    )))
                }
            }
        }
        let total: usize = self.attributes.iter().map(PlantedAttribute::direction_count).sum();
        if total > self.dim {
            return Err(Error::Spec(format!(
                "{total} attribute directions do not fit in dimension {}",
                self.dim
            )));
        }
        Ok(())
    }
}

/// Per-sample planted assignments for one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeTruth {
    pub name: String,
    /// Unit directions, one per subcomponent.
    pub directions: Vec<Vec<f32>>,
    /// Direction common to both subcomponents, when planted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_direction: Option<Vec<f32>>,
    pub active: Vec<bool>,
    /// Subcomponent used by each active sample; `None` when inactive.
    pub subcomponent: Vec<Option<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub speaker: Vec<usize>,
    pub attributes: Vec<AttributeTruth>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub corpus: EmbeddingCorpus,
    pub labels: Vec<LabelSet>,
    pub truth: GroundTruth,
}

/// Stratum name written to the label CSV for subcomponent `i`.
pub fn stratum_name(i: u8) -> String {
    format!("sub{i}")
}

/// Gram–Schmidt (modified, in `f64`). Fails on rank deficiency or when
/// there are more vectors than dimensions.
pub fn orthogonalize(directions: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let Some(dim) = directions.first().map(Vec::len) else {
        return Ok(Vec::new());
    };
    if directions.iter().any(|d| d.len() != dim) {
        return Err(Error::Spec("directions differ in length".into()));
    }
    if directions.len() > dim {
        return Err(Error::Spec(format!(
            "cannot orthogonalize {} vectors in dimension {dim}",
            directions.len()
        )));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(directions.len());
    for (i, d) in directions.iter().enumerate() {
        let scale = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut v = d.clone();
        // two passes keep the result orthogonal to 1e-15 even for nearly
        // dependent inputs
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(scale > 0.0) || !(n > 1e-10 * scale) {
            return Err(Error::Spec(format!(
                "direction {i} is linearly dependent on earlier ones"
            )));
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    Ok(basis)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Draws a corpus. Output is a pure function of `spec`.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let dim = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let raw: Vec<Vec<f64>> = spec
        .attributes
        .iter()
        .flat_map(|a| std::iter::repeat_n((), a.direction_count()))
        .map(|_| gaussian_vec(&mut rng, dim))
        .collect();
    let ortho = orthogonalize(&raw)?;
    let mut dirs_iter = ortho.into_iter();
    let directions: Vec<Vec<Vec<f64>>> = spec
        .attributes
        .iter()
        .map(|a| dirs_iter.by_ref().take(a.direction_count()).collect())
        .collect();

    let speakers: Vec<Vec<f64>> = (0..spec.n_speakers)
        .map(|_| loop {
            let v = gaussian_vec(&mut rng, dim);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect();

    let n = spec.n_samples;
    let mut data = Vec::with_capacity(n * dim);
    let mut speaker_of = Vec::with_capacity(n);
    let mut active = vec![Vec::with_capacity(n); spec.attributes.len()];
    let mut sub = vec![Vec::with_capacity(n); spec.attributes.len()];
    let mut x = vec![0.0f64; dim];
    for _ in 0..n {
        let s = rng.gen_range(0..spec.n_speakers);
        speaker_of.push(s);
        x.copy_from_slice(&speakers[s]);
        for (ai, attr) in spec.attributes.iter().enumerate() {
            // both draws happen for every sample so the stream layout does not
            // depend on the outcome
            let on = rng.gen::<f64>() < attr.prevalence;
            let pick = rng.gen::<f64>();
            let which = match attr.subcomponent_mix {
                Some(mix) if pick >= mix => 1u8,
                _ => 0u8,
            };
            active[ai].push(on);
            sub[ai].push(on.then_some(which));
            if on {
                let d = &directions[ai][which as usize];
                x.iter_mut().zip(d).for_each(|(xi, di)| *xi += attr.strength * di);
                if attr.shared_strength > 0.0 {
                    let c = &directions[ai][2];
                    x.iter_mut()
                        .zip(c)
                        .for_each(|(xi, ci)| *xi += attr.shared_strength * ci);
                }
            }
        }
        for xi in x.iter_mut() {
            *xi += spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
        data.extend(x.iter().map(|&v| v as f32));
    }

    let sample_ids: Vec<String> = (0..n).map(|i| format!("s{i:06}")).collect();
    let speaker_ids: Vec<String> = speaker_of.iter().map(|s| format!("spk{s:04}")).collect();

    let mut labels = Vec::with_capacity(spec.attributes.len());
    let mut truth_attrs = Vec::with_capacity(spec.attributes.len());
    for (ai, attr) in spec.attributes.iter().enumerate() {
        let mut map = BTreeMap::new();
        let mut strata = BTreeMap::new();
        for i in 0..n {
            map.insert(sample_ids[i].clone(), active[ai][i]);
            if attr.subcomponents == 2 {
                if let Some(w) = sub[ai][i] {
                    strata.insert(sample_ids[i].clone(), stratum_name(w));
                }
            }
        }
        labels.push(LabelSet {
            positive_label: attr.name.clone(),
            labels: map,
            strata,
        });
        truth_attrs.push(AttributeTruth {
            name: attr.name.clone(),
            directions: directions[ai][..attr.subcomponents]
                .iter()
                .map(|d| d.iter().map(|&v| v as f32).collect())
                .collect(),
            shared_direction: directions[ai]
                .get(attr.subcomponents)
                .map(|d| d.iter().map(|&v| v as f32).collect()),
            active: std::mem::take(&mut active[ai]),
            subcomponent: std::mem::take(&mut sub[ai]),
        });
    }

    let corpus = EmbeddingCorpus::new(dim, data, Some(sample_ids), Some(speaker_ids))
        .map_err(|e| Error::Spec(format!("generated corpus invalid: {e}")))?;
    Ok(SynthOutput {
        corpus,
        labels,
        truth: GroundTruth {
            speaker: speaker_of,
            attributes: truth_attrs,
        },
    })
}
