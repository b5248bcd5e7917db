// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use latent_lens::embedding_store::{
    read_corpus_file, read_labels_file, write_corpus_file, write_labels, CorpusSplit, EmbeddingCorpus, LabelSet,
};
use latent_lens::fsutil::{read_json, write_atomic, write_json_atomic};
use latent_lens::gridsearch::{run_grid, write_summary, GridResult, GridSpec, Table, MANIFEST_FILE, SUMMARY_FILE};
use latent_lens::probe::{fit_probe, probe_grid, ProbeCell, ProbeResult};
use latent_lens::sae::{load_model_file, save_model_file, train, SaeModel};
use latent_lens::splitting::{build_flows, detect_splits, FlowModel, FlowTable, Sankey, SplitReport};
use latent_lens::steering::{build_context, run_steering, SteerConfig, SteerDirection, SteeringReport};
use latent_lens::synth::{generate, GroundTruth, SynthSpec};
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::config::Effective;
use crate::{artifacts, export, meta, CliError, Command};

pub fn run(command: Command, eff: &Effective) -> Result<(), CliError> {
    meta::ensure_dir(&eff.out)?;
    let start = Instant::now();
    match command {
        Command::Synth => synth(eff)?,
        Command::Train => train_one(eff)?,
        Command::Grid => grid(eff)?,
        Command::Probe { grid: false } => probe(eff)?,
        Command::Probe { grid: true } => probe_cells(eff)?,
        Command::Steer => steer(eff)?,
        Command::Split => split(eff)?,
        Command::Export => export::export(eff)?,
    }
    let seconds = start.elapsed().as_secs_f64();
    info!(command = command.name(), seconds, "done");
    meta::record(eff, command.name(), seconds)
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

fn load_corpus(eff: &Effective) -> Result<EmbeddingCorpus, CliError> {
    let (path, _) = eff.corpus_path();
    require(&path)?;
    Ok(read_corpus_file(&path)?)
}

fn load_labels(eff: &Effective, corpus: &EmbeddingCorpus, attribute: &str) -> Result<LabelSet, CliError> {
    let (path, _) = eff.labels_path(attribute);
    require(&path)?;
    Ok(read_labels_file(&path, corpus, attribute)?)
}

fn load_model(path: &Path) -> Result<SaeModel, CliError> {
    require(path)?;
    Ok(load_model_file(path)?)
}

/// Requested attributes, else every configured or discovered label file.
fn attributes(eff: &Effective, requested: &[String]) -> Result<Vec<String>, CliError> {
    if !requested.is_empty() {
        return Ok(requested.to_vec());
    }
    let mut found: BTreeSet<String> = eff.config.data.labels.keys().cloned().collect();
    if let Ok(entries) = std::fs::read_dir(&eff.out) {
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(attr) = name.strip_prefix("labels_").and_then(|n| n.strip_suffix(".csv")) {
                found.insert(attr.to_owned());
            }
        }
    }
    if found.is_empty() {
        return Err(CliError::Missing(eff.out.join(artifacts::labels("<attribute>"))));
    }
    Ok(found.into_iter().collect())
}

fn corpus_split(eff: &Effective, n: usize) -> Result<CorpusSplit, CliError> {
    Ok(CorpusSplit::random(n, eff.config.data.test_fraction, eff.seed)?)
}

#[derive(Serialize, Deserialize)]
struct GroundTruthFile {
    spec: SynthSpec,
    truth: GroundTruth,
}

fn synth(eff: &Effective) -> Result<(), CliError> {
    let spec = eff.synth_spec();
    let out = generate(&spec)?;
    write_corpus_file(&out.corpus, &eff.out.join(artifacts::CORPUS))?;
    for labels in &out.labels {
        let mut buf = Vec::new();
        write_labels(labels, &out.corpus, &mut buf)?;
        write_atomic(&eff.out.join(artifacts::labels(&labels.positive_label)), &buf)?;
    }
    write_json_atomic(&eff.out.join(artifacts::SYNTH_SPEC), &spec)?;
    write_json_atomic(
        &eff.out.join(artifacts::GROUND_TRUTH),
        &GroundTruthFile {
            spec: spec.clone(),
            truth: out.truth,
        },
    )?;
    info!(n = out.corpus.len(), dim = out.corpus.dim(), "synthetic corpus written");
    Ok(())
}

fn train_one(eff: &Effective) -> Result<(), CliError> {
    let corpus = load_corpus(eff)?;
    let split = corpus_split(eff, corpus.len())?;
    let config = eff.sae_config(corpus.dim());
    let (model, stats) = train(&config, &corpus.subset(&split.train)?, &corpus.subset(&split.test)?)?;
    save_model_file(&model, &eff.out.join(artifacts::MODEL))?;
    write_json_atomic(&eff.out.join(artifacts::TRAIN_STATS), &stats)?;
    info!(
        initial_val_mse = stats.initial_val_mse,
        final_val_mse = stats.final_val_mse(),
        dead_latents = stats.final_dead_latents(),
        "model trained"
    );
    Ok(())
}

fn grid_dir(eff: &Effective) -> PathBuf {
    eff.out.join(artifacts::GRID_DIR)
}

fn grid(eff: &Effective) -> Result<(), CliError> {
    let corpus = load_corpus(eff)?;
    let split = corpus_split(eff, corpus.len())?;
    let spec = GridSpec {
        latent_dims: eff.config.grid.latent_dims.clone(),
        k_values: eff.config.grid.k_values.clone(),
        base: eff.sae_config(corpus.dim()),
        output_dir: grid_dir(eff),
        parallel_workers: eff.workers,
    };
    let result = run_grid(&spec, &corpus.subset(&split.train)?, &corpus.subset(&split.test)?)?;
    let table = write_summary(&result, &spec.output_dir)?;
    table.write(&spec.output_dir.join(artifacts::HEATMAP))?;
    info!(
        cells = result.cells.len(),
        completed = result.completed().count(),
        "grid finished"
    );
    Ok(())
}

fn misclassified_csv(r: &ProbeResult) -> String {
    let mut s = String::from("sample_id,error\n");
    for id in &r.false_positive_ids {
        s.push_str(&format!("{id},false_positive\n"));
    }
    for id in &r.false_negative_ids {
        s.push_str(&format!("{id},false_negative\n"));
    }
    s
}

fn probe(eff: &Effective) -> Result<(), CliError> {
    let model = load_model(&eff.out.join(artifacts::MODEL))?;
    let corpus = load_corpus(eff)?;
    let split = corpus_split(eff, corpus.len())?;
    let config = eff.probe_config();
    for attr in attributes(eff, &eff.config.probe.attributes)? {
        let labels = load_labels(eff, &corpus, &attr)?;
        let r = fit_probe(&model, &corpus, &labels, &split, &config)?;
        write_json_atomic(&eff.out.join(artifacts::probe(&attr)), &r)?;
        write_atomic(
            &eff.out.join(artifacts::misclassified(&attr)),
            misclassified_csv(&r).as_bytes(),
        )?;
        info!(
            attribute = attr.as_str(),
            phi = r.phi,
            precision = r.test.precision,
            recall = r.test.recall,
            "probe fitted"
        );
    }
    Ok(())
}

fn load_grid(eff: &Effective) -> Result<(PathBuf, GridResult), CliError> {
    let dir = grid_dir(eff);
    require(&dir.join(MANIFEST_FILE))?;
    let result = GridResult::load(&dir)?;
    Ok((dir, result))
}

fn probe_cells(eff: &Effective) -> Result<(), CliError> {
    let (dir, result) = load_grid(eff)?;
    let corpus = load_corpus(eff)?;
    let split = corpus_split(eff, corpus.len())?;
    let config = eff.probe_config();
    let summary = dir.join(SUMMARY_FILE);
    let mut table = if summary.is_file() {
        Table::read(&summary)?
    } else {
        write_summary(&result, &dir)?
    };
    for attr in attributes(eff, &eff.config.probe.attributes)? {
        let labels = load_labels(eff, &corpus, &attr)?;
        let cells: Vec<ProbeCell> = probe_grid(&result, &dir, &corpus, &labels, &split, &config);
        write_json_atomic(&dir.join(artifacts::grid_probe(&attr)), &cells)?;
        table.join_probe(&attr, &cells);
        info!(attribute = attr.as_str(), cells = cells.len(), "grid probed");
    }
    table.write(&dir.join(artifacts::HEATMAP))?;
    Ok(())
}

/// Centroids as written next to a steering report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CentroidsOut {
    pub centroid_pos: Vec<f32>,
    pub centroid_neg: Vec<f32>,
    pub source: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteeringOut {
    pub attribute: String,
    pub context: CentroidsOut,
    pub report: SteeringReport,
}

fn steer(eff: &Effective) -> Result<(), CliError> {
    let model_path = eff.out.join(artifacts::MODEL);
    require(&model_path)?;
    let attrs = attributes(eff, &eff.config.steer.attributes)?;
    for attr in &attrs {
        require(&eff.out.join(artifacts::probe(attr)))?;
    }
    let model = load_model(&model_path)?;
    let corpus = load_corpus(eff)?;
    let split = corpus_split(eff, corpus.len())?;
    for attr in attrs {
        let probe: ProbeResult = read_json(&eff.out.join(artifacts::probe(&attr)))?;
        let labels = load_labels(eff, &corpus, &attr)?;
        let ctx = build_context(&model, &corpus, &labels, &split.train)?;
        let config = SteerConfig {
            phi: probe.phi,
            a_phi: eff.config.steer.a_phi,
            positive_class: attr.clone(),
            negative_class: eff
                .config
                .steer
                .negative_class
                .get(&attr)
                .cloned()
                .unwrap_or_else(|| format!("not_{attr}")),
            direction: SteerDirection::Deactivate,
        };
        let report = run_steering(&model, &ctx, &corpus, &labels, &split.test, &config)?;
        write_atomic(
            &eff.out.join(artifacts::steering_hist(&attr)),
            report.histogram_csv().as_bytes(),
        )?;
        info!(
            attribute = attr.as_str(),
            phi = probe.phi,
            positive_before = report.positive.before,
            positive_after = report.positive.after,
            negative_before = report.negative.before,
            negative_after = report.negative.after,
            "steering scored"
        );
        let out = SteeringOut {
            attribute: attr.clone(),
            context: CentroidsOut {
                centroid_pos: ctx.centroid_pos,
                centroid_neg: ctx.centroid_neg,
                source: ctx.source,
            },
            report,
        };
        write_json_atomic(&eff.out.join(artifacts::steering(&attr)), &out)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowsOut {
    pub attribute: String,
    pub k: usize,
    pub sankey: Sankey,
    pub table: FlowTable,
}

fn split(eff: &Effective) -> Result<(), CliError> {
    let (dir, result) = load_grid(eff)?;
    let corpus = load_corpus(eff)?;
    let attr = match &eff.config.split.attribute {
        Some(a) => a.clone(),
        None => {
            let mut stratified = Vec::new();
            for a in attributes(eff, &[])? {
                if !load_labels(eff, &corpus, &a)?.strata.is_empty() {
                    stratified.push(a);
                }
            }
            match stratified.as_slice() {
                [one] => one.clone(),
                [] => return Err(CliError::Config("split: no label file has a stratum column".into())),
                _ => {
                    return Err(CliError::Config(format!(
                        "split.attribute: several stratified attributes ({}), pick one",
                        stratified.join(", ")
                    )))
                }
            }
        }
    };
    let labels = load_labels(eff, &corpus, &attr)?;
    let k = match eff.config.split.k {
        Some(k) => k,
        None => result
            .completed()
            .map(|c| c.k)
            .min()
            .ok_or_else(|| CliError::Missing(dir.join("<L>_<k>").join("model.saec")))?,
    };
    let mut cells: Vec<_> = result.completed().filter(|c| c.k == k).collect();
    cells.sort_by_key(|c| c.latent_dim);
    let mut models = Vec::with_capacity(cells.len());
    for c in &cells {
        models.push((c.latent_dim, load_model(&dir.join(&c.checkpoint))?));
    }
    let flow_models: Vec<FlowModel> = models
        .iter()
        .map(|(l, m)| FlowModel {
            latent_dim: *l,
            k,
            model: m,
        })
        .collect();
    let split = corpus_split(eff, corpus.len())?;
    let table = build_flows(&flow_models, &corpus, &labels, &split, &eff.probe_config())?;
    let report: SplitReport = detect_splits(&table);
    info!(
        attribute = attr.as_str(),
        k,
        split_latent_dim = report.split_latent_dim,
        "flows built"
    );
    write_json_atomic(&eff.out.join(artifacts::SPLIT_REPORT), &report)?;
    write_json_atomic(
        &eff.out.join(artifacts::FLOWS),
        &FlowsOut {
            attribute: attr,
            k,
            sankey: table.sankey(),
            table,
        },
    )?;
    Ok(())
}
