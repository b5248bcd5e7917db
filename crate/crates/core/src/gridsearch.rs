// SPDX-License-Identifier: MIT OR Apache-2.0

//! Resumable training sweeps over (latent dimension, k).
//!
//! Layout under the grid directory:
//!
//! ```text
//! <L>_<k>/model.saec
//! <L>_<k>/stats.json
//! manifest.json
//! summary.csv
//! ```

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::embedding_store::EmbeddingCorpus;
use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_atomic, write_json_atomic};
use crate::probe::ProbeCell;
use crate::sae::{load_model_file, save_model_file, train, Activation, SaeConfig, TrainStats};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const MODEL_FILE: &str = "model.saec";
pub const STATS_FILE: &str = "stats.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub latent_dims: Vec<usize>,
    pub k_values: Vec<usize>,
    /// Template for every cell; `latent_dim`, `activation` and `seed` are
    /// replaced per cell.
    pub base: SaeConfig,
    pub output_dir: PathBuf,
    pub parallel_workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Completed,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub latent_dim: usize,
    pub k: usize,
    pub seed: u64,
    pub status: CellStatus,
    /// Checkpoint path relative to the grid directory.
    pub checkpoint: String,
    pub stats: Option<TrainStats>,
    pub wall_clock_seconds: Option<f64>,
    /// True when an existing checkpoint was reused instead of retraining.
    #[serde(default)]
    pub resumed: bool,
    pub message: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<CellRecord>,
}

impl GridResult {
    pub fn completed(&self) -> impl Iterator<Item = &CellRecord> {
        self.cells.iter().filter(|c| c.status == CellStatus::Completed)
    }

    pub fn load(grid_dir: &Path) -> Result<Self> {
        read_json(&grid_dir.join(MANIFEST_FILE))
    }
}

/// Per-cell seed: a 64-bit mix of `(base, L, k)`.
pub fn derive_seed(base: u64, latent_dim: usize, k: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(base) ^ latent_dim as u64) ^ k as u64)
}

pub fn cell_dir_name(latent_dim: usize, k: usize) -> String {
    format!("{latent_dim}_{k}")
}

#[derive(Debug, Serialize, Deserialize)]
struct CellStatsFile {
    config: SaeConfig,
    stats: TrainStats,
    wall_clock_seconds: f64,
}

fn cell_config(spec: &GridSpec, latent_dim: usize, k: usize) -> SaeConfig {
    SaeConfig {
        latent_dim,
        activation: Activation::TopK { k },
        seed: derive_seed(spec.base.seed, latent_dim, k),
        ..spec.base.clone()
    }
}

/// A finished cell from an earlier run, if its checkpoint and stats are
/// both readable and were produced by `config`.
fn existing_cell(dir: &Path, config: &SaeConfig) -> Option<CellStatsFile> {
    let model = load_model_file(&dir.join(MODEL_FILE)).ok()?;
    let stats: CellStatsFile = read_json(&dir.join(STATS_FILE)).ok()?;
    (model.config == *config && stats.config == *config).then_some(stats)
}

fn run_cell(
    spec: &GridSpec,
    config: SaeConfig,
    train_corpus: &EmbeddingCorpus,
    val_corpus: &EmbeddingCorpus,
) -> CellRecord {
    let (latent_dim, k) = (config.latent_dim, config.k().unwrap_or(0));
    let rel = format!("{}/{MODEL_FILE}", cell_dir_name(latent_dim, k));
    let dir = spec.output_dir.join(cell_dir_name(latent_dim, k));
    let mut record = CellRecord {
        latent_dim,
        k,
        seed: config.seed,
        status: CellStatus::Completed,
        checkpoint: rel,
        stats: None,
        wall_clock_seconds: None,
        resumed: false,
        message: None,
    };
    if let Some(prev) = existing_cell(&dir, &config) {
        info!(latent_dim, k, "reusing existing checkpoint");
        record.stats = Some(prev.stats);
        record.wall_clock_seconds = Some(prev.wall_clock_seconds);
        record.resumed = true;
        return record;
    }
    let start = Instant::now();
    let outcome = train(&config, train_corpus, val_corpus).and_then(|(model, stats)| {
        let secs = start.elapsed().as_secs_f64();
        save_model_file(&model, &dir.join(MODEL_FILE))?;
        write_json_atomic(
            &dir.join(STATS_FILE),
            &CellStatsFile {
                config: config.clone(),
                stats: stats.clone(),
                wall_clock_seconds: secs,
            },
        )?;
        Ok((stats, secs))
    });
    match outcome {
        Ok((stats, secs)) => {
            info!(latent_dim, k, val_mse = stats.final_val_mse(), secs, "cell trained");
            record.stats = Some(stats);
            record.wall_clock_seconds = Some(secs);
        }
        Err(e) => {
            warn!(latent_dim, k, error = %e, "cell failed");
            record.status = CellStatus::Failed;
            record.message = Some(e.to_string());
        }
    }
    record
}

fn sort_cells(cells: &mut [CellRecord]) {
    cells.sort_by_key(|c| (c.latent_dim, c.k));
}

/// Trains every valid (L, k) cell of `spec`. Cells with `k > L` are skipped,
/// failures are recorded without stopping the sweep, and cells whose
/// checkpoint already exists are reused. The manifest is rewritten after
/// every finished cell.
pub fn run_grid(spec: &GridSpec, train_corpus: &EmbeddingCorpus, val_corpus: &EmbeddingCorpus) -> Result<GridResult> {
    if spec.parallel_workers == 0 {
        return Err(Error::Usage("parallel_workers must be positive".into()));
    }
    std::fs::create_dir_all(&spec.output_dir).map_err(|e| Error::io(&spec.output_dir, e))?;

    let mut pending = Vec::new();
    let mut records = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for &l in &spec.latent_dims {
        for &k in &spec.k_values {
            if !seen.insert((l, k)) {
                continue;
            }
            let config = cell_config(spec, l, k);
            if k == 0 || k > l {
                warn!(latent_dim = l, k, "skipping cell: k must be in 1..=L");
                records.push(CellRecord {
                    latent_dim: l,
                    k,
                    seed: config.seed,
                    status: CellStatus::Skipped,
                    checkpoint: String::new(),
                    stats: None,
                    wall_clock_seconds: None,
                    resumed: false,
                    message: Some(format!("k={k} is not in 1..=L={l}")),
                });
                continue;
            }
            pending.push(config);
        }
    }

    let manifest_path = spec.output_dir.join(MANIFEST_FILE);
    let manifest = Mutex::new(GridResult { cells: records });
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.parallel_workers)
        .build()
        .map_err(|e| Error::Usage(format!("worker pool: {e}")))?;
    let write_result: Mutex<Result<()>> = Mutex::new(Ok(()));
    pool.install(|| {
        pending.into_par_iter().for_each(|config| {
            let record = run_cell(spec, config, train_corpus, val_corpus);
            let mut m = manifest.lock().unwrap();
            m.cells.push(record);
            sort_cells(&mut m.cells);
            if let Err(e) = write_json_atomic(&manifest_path, &*m) {
                *write_result.lock().unwrap() = Err(e);
            }
        })
    });
    write_result.into_inner().unwrap()?;
    let mut result = manifest.into_inner().unwrap();
    sort_cells(&mut result.cells);
    write_json_atomic(&manifest_path, &result)?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub latent_dim: usize,
    pub k: usize,
    pub status: CellStatus,
    pub checkpoint_present: bool,
    pub final_val_mse: Option<f64>,
    pub dead_latents: Option<usize>,
    pub runtime_seconds: Option<f64>,
}

/// One row per manifest cell.
pub fn summarize(result: &GridResult, grid_dir: &Path) -> Vec<SummaryRow> {
    result
        .cells
        .iter()
        .map(|c| {
            let present = c.status == CellStatus::Completed && grid_dir.join(&c.checkpoint).is_file();
            SummaryRow {
                latent_dim: c.latent_dim,
                k: c.k,
                status: c.status,
                checkpoint_present: present,
                final_val_mse: c.stats.as_ref().map(TrainStats::final_val_mse),
                dead_latents: c.stats.as_ref().and_then(TrainStats::final_dead_latents),
                runtime_seconds: c.wall_clock_seconds,
            }
        })
        .collect()
}

/// A CSV table keyed by its first two columns (`latent_dim`, `k`).
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl Table {
    pub fn from_summary(rows: &[SummaryRow]) -> Self {
        let header = [
            "latent_dim",
            "k",
            "status",
            "checkpoint_present",
            "final_val_mse",
            "dead_latents",
            "runtime_seconds",
        ]
        .map(String::from)
        .to_vec();
        let rows = rows
            .iter()
            .map(|r| {
                vec![
                    r.latent_dim.to_string(),
                    r.k.to_string(),
                    format!("{:?}", r.status).to_lowercase(),
                    r.checkpoint_present.to_string(),
                    opt(r.final_val_mse),
                    opt(r.dead_latents),
                    opt(r.runtime_seconds),
                ]
            })
            .collect();
        Self { header, rows }
    }

    /// Adds (or replaces) `phi_<attr>`, `precision_<attr>`, `recall_<attr>`.
    pub fn join_probe(&mut self, attribute: &str, cells: &[ProbeCell]) {
        let names = [
            format!("phi_{attribute}"),
            format!("precision_{attribute}"),
            format!("recall_{attribute}"),
        ];
        let cols: Vec<usize> = names
            .iter()
            .map(|n| match self.header.iter().position(|h| h == n) {
                Some(i) => i,
                None => {
                    self.header.push(n.clone());
                    for row in &mut self.rows {
                        row.push(String::new());
                    }
                    self.header.len() - 1
                }
            })
            .collect();
        for row in &mut self.rows {
            let cell = cells
                .iter()
                .find(|c| row[0] == c.latent_dim.to_string() && row[1] == c.k.to_string());
            let values = match cell {
                Some(c) => [opt(c.phi), opt(c.precision), opt(c.recall)],
                None => Default::default(),
            };
            for (&col, v) in cols.iter().zip(values) {
                row[col] = v;
            }
        }
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Format(format!("csv: {e}"));
        w.write_record(&self.header).map_err(err)?;
        for row in &self.rows {
            w.write_record(row).map_err(err)?;
        }
        w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(file);
        let header = r
            .headers()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
            .iter()
            .map(String::from)
            .collect();
        let rows = r
            .records()
            .map(|rec| {
                rec.map(|rec| rec.iter().map(String::from).collect())
                    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
            })
            .collect::<Result<_>>()?;
        Ok(Self { header, rows })
    }
}

/// Writes `summary.csv` for a grid.
pub fn write_summary(result: &GridResult, grid_dir: &Path) -> Result<Table> {
    let table = Table::from_summary(&summarize(result, grid_dir));
    table.write(&grid_dir.join(SUMMARY_FILE))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_distinct_per_cell() {
        let mut seen = std::collections::HashSet::new();
        for l in [100, 200, 300, 400, 600, 800, 1200] {
            for k in [5, 10, 15, 20, 25, 30, 35] {
                assert!(seen.insert(derive_seed(42, l, k)));
            }
        }
        assert_ne!(derive_seed(1, 100, 20), derive_seed(2, 100, 20));
        assert_ne!(derive_seed(1, 20, 100), derive_seed(1, 100, 20));
    }

    #[test]
    fn empty_grid_summary_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let table = write_summary(&GridResult::default(), dir.path()).unwrap();
        assert!(table.rows.is_empty());
        let text = std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("latent_dim,k,"));
    }

    #[test]
    fn join_probe_adds_and_replaces_columns() {
        let rows = vec![SummaryRow {
            latent_dim: 100,
            k: 20,
            status: CellStatus::Completed,
            checkpoint_present: true,
            final_val_mse: Some(0.5),
            dead_latents: Some(3),
            runtime_seconds: Some(1.0),
        }];
        let mut t = Table::from_summary(&rows);
        let cell = |phi| ProbeCell {
            latent_dim: 100,
            k: 20,
            phi: Some(phi),
            precision: Some(1.0),
            recall: Some(0.5),
            error: None,
        };
        t.join_probe("a", &[cell(3)]);
        t.join_probe("a", &[cell(4)]);
        assert_eq!(t.header.len(), 10);
        assert_eq!(t.rows[0][7], "4");
    }
}
