// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use latent_lens::embedding_store::EmbeddingCorpus;
use latent_lens::gridsearch::{
    run_grid, summarize, write_summary, CellStatus, GridResult, GridSpec, Table, MODEL_FILE,
};
use latent_lens::sae::{load_model_file, SaeConfig};
use latent_lens::synth::{generate, SynthSpec};

fn corpora() -> (EmbeddingCorpus, EmbeddingCorpus) {
    let spec = SynthSpec {
        dim: 16,
        n_samples: 600,
        n_speakers: 20,
        ..SynthSpec::standard()
    };
    let c = generate(&spec).unwrap().corpus;
    let train: Vec<usize> = (0..480).collect();
    let val: Vec<usize> = (480..600).collect();
    (c.subset(&train).unwrap(), c.subset(&val).unwrap())
}

fn spec(dir: &Path, workers: usize) -> GridSpec {
    let mut base = SaeConfig::topk(16, 8, 1);
    base.epochs = 2;
    base.batch_size = 32;
    base.seed = 11;
    GridSpec {
        latent_dims: vec![8, 24, 4],
        k_values: vec![2, 6],
        base,
        output_dir: dir.to_path_buf(),
        parallel_workers: workers,
    }
}

fn checkpoint_bytes(dir: &Path, r: &GridResult) -> Vec<Vec<u8>> {
    r.completed()
        .map(|c| std::fs::read(dir.join(&c.checkpoint)).unwrap())
        .collect()
}

#[test]
fn worker_count_does_not_change_results() {
    let (train, val) = corpora();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_grid(&spec(a.path(), 1), &train, &val).unwrap();
    let rb = run_grid(&spec(b.path(), 4), &train, &val).unwrap();
    assert_eq!(checkpoint_bytes(a.path(), &ra), checkpoint_bytes(b.path(), &rb));
    let keys = |r: &GridResult| {
        r.cells
            .iter()
            .map(|c| (c.latent_dim, c.k, c.status, c.seed))
            .collect::<Vec<_>>()
    };
    assert_eq!(keys(&ra), keys(&rb));
    for (x, y) in ra.cells.iter().zip(&rb.cells) {
        assert_eq!(x.stats, y.stats);
    }
}

#[test]
fn invalid_cells_are_skipped_and_the_rest_complete() {
    let (train, val) = corpora();
    let dir = tempfile::tempdir().unwrap();
    let r = run_grid(&spec(dir.path(), 2), &train, &val).unwrap();
    assert_eq!(r.cells.len(), 6);
    for c in &r.cells {
        let want = if c.k > c.latent_dim {
            CellStatus::Skipped
        } else {
            CellStatus::Completed
        };
        assert_eq!(c.status, want, "{}x{}", c.latent_dim, c.k);
        if want == CellStatus::Completed {
            let m = load_model_file(&dir.path().join(&c.checkpoint)).unwrap();
            assert_eq!((m.latent_dim(), m.config.k()), (c.latent_dim, Some(c.k)));
        }
    }
    assert!(r
        .cells
        .windows(2)
        .all(|w| (w[0].latent_dim, w[0].k) < (w[1].latent_dim, w[1].k)));
    assert_eq!(GridResult::load(dir.path()).unwrap(), r);
}

#[test]
fn rerun_reuses_finished_cells_and_retrains_missing_ones() {
    let (train, val) = corpora();
    let dir = tempfile::tempdir().unwrap();
    let s = spec(dir.path(), 1);
    let first = run_grid(&s, &train, &val).unwrap();
    let before = checkpoint_bytes(dir.path(), &first);

    // simulate an interrupted run: one checkpoint lost
    std::fs::remove_file(dir.path().join("24_6").join(MODEL_FILE)).unwrap();
    let second = run_grid(&s, &train, &val).unwrap();
    for c in second.completed() {
        assert_eq!(c.resumed, !(c.latent_dim == 24 && c.k == 6), "{}x{}", c.latent_dim, c.k);
    }
    assert_eq!(checkpoint_bytes(dir.path(), &second), before);
}

#[test]
fn summary_agrees_with_manifest() {
    let (train, val) = corpora();
    let dir = tempfile::tempdir().unwrap();
    let r = run_grid(&spec(dir.path(), 1), &train, &val).unwrap();
    let rows = summarize(&r, dir.path());
    assert_eq!(rows.len(), r.cells.len());
    for (row, cell) in rows.iter().zip(&r.cells) {
        assert_eq!(
            (row.latent_dim, row.k, row.status),
            (cell.latent_dim, cell.k, cell.status)
        );
        assert_eq!(row.checkpoint_present, cell.status == CellStatus::Completed);
        assert_eq!(row.final_val_mse, cell.stats.as_ref().map(|s| s.final_val_mse()));
    }
    let table = write_summary(&r, dir.path()).unwrap();
    let read = Table::read(&dir.path().join(latent_lens::gridsearch::SUMMARY_FILE)).unwrap();
    assert_eq!(read, table);
    assert_eq!(read.rows.len(), r.cells.len());
}

#[test]
fn zero_workers_is_a_usage_error() {
    let (train, val) = corpora();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        run_grid(&spec(dir.path(), 0), &train, &val),
        Err(latent_lens::Error::Usage(_))
    ));
}
