// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature-splitting analysis across models of growing latent dimension.
//!
//! For each model the dominant index of every stratum is the probe φ fit on
//! that stratum's positives against all negatives. Each tracked positive
//! sample is then routed, per model, to whichever candidate index (the
//! per-stratum indices and the overall φ) it activates most, or to an
//! explicit "none" node when none of them fire. Consecutive models are
//! joined into stratified flows that a Sankey plot can consume directly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::embedding_store::{CorpusSplit, EmbeddingCorpus, LabelSet};
use crate::error::{Error, Result};
use crate::probe::{fit_probe, fit_probe_latents, latent_partition, ProbeConfig};
use crate::sae::SaeModel;

/// Stratum assigned to tracked positives that have none in the label set.
pub const UNSTRATIFIED: &str = "all";

/// The `n` largest probe coefficients, descending, as `(index, weight)`.
pub fn top_indices(
    model: &SaeModel,
    corpus: &EmbeddingCorpus,
    labels: &LabelSet,
    split: &CorpusSplit,
    n: usize,
    config: &ProbeConfig,
) -> Result<Vec<(usize, f64)>> {
    if n == 0 {
        return Err(Error::Usage("top_indices needs n >= 1".into()));
    }
    Ok(fit_probe(model, corpus, labels, split, config)?.ranked_indices(n))
}

/// One model in a flow sequence.
#[derive(Debug, Clone, Copy)]
pub struct FlowModel<'a> {
    pub latent_dim: usize,
    pub k: usize,
    pub model: &'a SaeModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCell {
    pub latent_dim: usize,
    pub k: usize,
    /// Probe φ over all positives.
    pub phi: usize,
    pub stratum_phi: BTreeMap<String, usize>,
    /// Among tracked samples routed to the stratum's index, the fraction that
    /// belong to that stratum.
    pub stratum_purity: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedSample {
    pub id: String,
    pub stratum: String,
    /// Index per cell, `None` for the "none" node.
    pub assignments: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Flow {
    /// Position of the source cell; the target is the next cell.
    pub from_cell: usize,
    pub from_index: Option<usize>,
    pub to_index: Option<usize>,
    pub stratum: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTable {
    pub attribute: String,
    pub cells: Vec<FlowCell>,
    pub samples: Vec<TrackedSample>,
    pub flows: Vec<Flow>,
}

/// Tracks the positive test samples of `split` through `models`.
pub fn build_flows(
    models: &[FlowModel<'_>],
    corpus: &EmbeddingCorpus,
    labels: &LabelSet,
    split: &CorpusSplit,
    config: &ProbeConfig,
) -> Result<FlowTable> {
    if models.len() < 2 {
        return Err(Error::Usage(format!(
            "flows need at least 2 models, got {}",
            models.len()
        )));
    }
    for w in models.windows(2) {
        if w[0].k != w[1].k {
            return Err(Error::Usage(format!(
                "flow models must share k, got {} and {}",
                w[0].k, w[1].k
            )));
        }
        if w[1].latent_dim <= w[0].latent_dim {
            return Err(Error::Usage(format!(
                "flow models must have strictly increasing L, got {} then {}",
                w[0].latent_dim, w[1].latent_dim
            )));
        }
    }
    for fm in models {
        fm.model.check_corpus(corpus)?;
        if fm.model.latent_dim() != fm.latent_dim {
            return Err(Error::Shape(format!(
                "model listed with L={} has {} latents",
                fm.latent_dim,
                fm.model.latent_dim()
            )));
        }
    }
    split.validate(corpus.len())?;
    let row_labels = labels.row_labels(corpus)?;
    let row_strata = labels.row_strata(corpus)?;
    let stratum_of = |i: usize| -> String { row_strata[i].clone().unwrap_or_else(|| UNSTRATIFIED.to_owned()) };

    let tracked: Vec<usize> = split
        .test
        .iter()
        .copied()
        .filter(|&i| row_labels[i] == Some(true))
        .collect();
    if tracked.is_empty() {
        return Err(Error::Usage("no positive test samples to track".into()));
    }
    let tracked_strata: Vec<String> = tracked.iter().map(|&i| stratum_of(i)).collect();
    let strata: BTreeSet<String> = split
        .train
        .iter()
        .chain(&tracked)
        .filter(|&&i| row_labels[i] == Some(true))
        .map(|&i| stratum_of(i))
        .collect();

    let mut cells = Vec::with_capacity(models.len());
    let mut assignments: Vec<Vec<Option<usize>>> = vec![Vec::with_capacity(models.len()); tracked.len()];
    for fm in models {
        let l = fm.latent_dim;
        let phi = fit_probe(fm.model, corpus, labels, split, config)?.phi;
        let mut stratum_phi = BTreeMap::new();
        for s in &strata {
            let only_s: Vec<Option<bool>> = (0..corpus.len())
                .map(|i| match row_labels[i] {
                    Some(true) if stratum_of(i) != *s => None,
                    y => y,
                })
                .collect();
            let train = latent_partition(fm.model, corpus, &only_s, &split.train)?;
            let test = latent_partition(fm.model, corpus, &only_s, &split.test)?;
            let r = fit_probe_latents(s, l, &train, &test, config)?;
            stratum_phi.insert(s.clone(), r.phi);
        }

        let latents = fm.model.encode_rows(corpus, &tracked)?;
        let mut candidates: Vec<usize> = stratum_phi.values().copied().chain([phi]).collect();
        candidates.sort_unstable();
        candidates.dedup();
        for (t, v) in latents.chunks_exact(l).enumerate() {
            let mut best: Option<usize> = None;
            for &c in &candidates {
                if v[c] > 0.0 && best.is_none_or(|b| v[c] > v[b]) {
                    best = Some(c);
                }
            }
            assignments[t].push(best);
        }

        let mut stratum_purity = BTreeMap::new();
        for (s, &j) in &stratum_phi {
            let routed: Vec<&String> = assignments
                .iter()
                .zip(&tracked_strata)
                .filter(|(a, _)| a.last() == Some(&Some(j)))
                .map(|(_, st)| st)
                .collect();
            let purity = if routed.is_empty() {
                0.0
            } else {
                routed.iter().filter(|st| **st == s).count() as f64 / routed.len() as f64
            };
            stratum_purity.insert(s.clone(), purity);
        }
        cells.push(FlowCell {
            latent_dim: l,
            k: fm.k,
            phi,
            stratum_phi,
            stratum_purity,
        });
    }

    let samples: Vec<TrackedSample> = tracked
        .iter()
        .zip(tracked_strata)
        .zip(assignments)
        .map(|((&i, stratum), assignments)| TrackedSample {
            id: corpus.sample_id(i).into_owned(),
            stratum,
            assignments,
        })
        .collect();
    let flows = aggregate_flows(&samples, cells.len());
    Ok(FlowTable {
        attribute: labels.positive_label.clone(),
        cells,
        samples,
        flows,
    })
}

fn aggregate_flows(samples: &[TrackedSample], n_cells: usize) -> Vec<Flow> {
    let mut counts: BTreeMap<(usize, Option<usize>, Option<usize>, &str), usize> = BTreeMap::new();
    for s in samples {
        for c in 0..n_cells.saturating_sub(1) {
            *counts
                .entry((c, s.assignments[c], s.assignments[c + 1], s.stratum.as_str()))
                .or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|((from_cell, from_index, to_index, stratum), count)| Flow {
            from_cell,
            from_index,
            to_index,
            stratum: stratum.to_owned(),
            count,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SankeyNode {
    pub id: String,
    pub latent_dim: usize,
    pub index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SankeyLink {
    pub source: usize,
    pub target: usize,
    pub value: usize,
    pub stratum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sankey {
    pub attribute: String,
    pub nodes: Vec<SankeyNode>,
    pub links: Vec<SankeyLink>,
}

fn node_id(latent_dim: usize, index: Option<usize>) -> String {
    match index {
        Some(j) => format!("L{latent_dim}:{j}"),
        None => format!("L{latent_dim}:none"),
    }
}

impl FlowTable {
    /// Nodes are `(cell, index)` pairs in first-seen order; links reference
    /// nodes by position.
    pub fn sankey(&self) -> Sankey {
        let mut nodes = Vec::new();
        let mut lookup: BTreeMap<(usize, Option<usize>), usize> = BTreeMap::new();
        let mut node = |cell: usize, index: Option<usize>, nodes: &mut Vec<SankeyNode>| -> usize {
            *lookup.entry((cell, index)).or_insert_with(|| {
                let latent_dim = self.cells[cell].latent_dim;
                nodes.push(SankeyNode {
                    id: node_id(latent_dim, index),
                    latent_dim,
                    index,
                });
                nodes.len() - 1
            })
        };
        let links = self
            .flows
            .iter()
            .map(|f| SankeyLink {
                source: node(f.from_cell, f.from_index, &mut nodes),
                target: node(f.from_cell + 1, f.to_index, &mut nodes),
                value: f.count,
                stratum: f.stratum.clone(),
            })
            .collect();
        Sankey {
            attribute: self.attribute.clone(),
            nodes,
            links,
        }
    }

    /// Flow total leaving cell `c`.
    pub fn outflow(&self, c: usize) -> usize {
        self.flows.iter().filter(|f| f.from_cell == c).map(|f| f.count).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDominance {
    pub latent_dim: usize,
    pub stratum_phi: BTreeMap<String, usize>,
    pub stratum_purity: BTreeMap<String, f64>,
    pub shared: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEvent {
    /// Latent dimension of the previous cell, absent for the first cell.
    pub from_latent_dim: Option<usize>,
    pub latent_dim: usize,
    /// Index the strata shared in the previous cell.
    pub shared_index: Option<usize>,
    pub stratum_phi: BTreeMap<String, usize>,
    /// Smallest per-stratum purity in the split cell.
    pub min_purity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub attribute: String,
    pub k: usize,
    pub cells: Vec<CellDominance>,
    pub events: Vec<SplitEvent>,
    /// Smallest L at which the per-stratum indices differ.
    pub split_latent_dim: Option<usize>,
}

pub fn detect_splits(flows: &FlowTable) -> SplitReport {
    let cells: Vec<CellDominance> = flows
        .cells
        .iter()
        .map(|c| {
            let distinct: BTreeSet<usize> = c.stratum_phi.values().copied().collect();
            CellDominance {
                latent_dim: c.latent_dim,
                stratum_phi: c.stratum_phi.clone(),
                stratum_purity: c.stratum_purity.clone(),
                shared: distinct.len() <= 1,
            }
        })
        .collect();
    let mut events = Vec::new();
    for (i, c) in cells.iter().enumerate() {
        if c.shared {
            continue;
        }
        let prev = i.checked_sub(1).map(|p| &cells[p]);
        if prev.is_none_or(|p| p.shared) {
            events.push(SplitEvent {
                from_latent_dim: prev.map(|p| p.latent_dim),
                latent_dim: c.latent_dim,
                shared_index: prev.and_then(|p| p.stratum_phi.values().next().copied()),
                stratum_phi: c.stratum_phi.clone(),
                min_purity: c.stratum_purity.values().copied().fold(f64::INFINITY, f64::min),
            });
        }
    }
    SplitReport {
        attribute: flows.attribute.clone(),
        k: flows.cells.first().map_or(0, |c| c.k),
        split_latent_dim: events.first().map(|e| e.latent_dim),
        cells,
        events,
    }
}

/// Split latent dimension as a function of k, sorted by k.
pub fn split_plateau(reports: &[SplitReport]) -> Vec<(usize, Option<usize>)> {
    let mut out: Vec<(usize, Option<usize>)> = reports.iter().map(|r| (r.k, r.split_latent_dim)).collect();
    out.sort_unstable();
    out
}
