// SPDX-License-Identifier: MIT OR Apache-2.0

use latent_lens::embedding_store::{CorpusSplit, EmbeddingCorpus, LabelSet};
use latent_lens::probe::{fit_logistic, fit_probe, Design, ProbeConfig};
use latent_lens::sae::{train, SaeConfig, SaeModel};
use latent_lens::splitting::{build_flows, detect_splits, top_indices, FlowModel};
use latent_lens::synth::{generate, SynthOutput, SynthSpec};

fn small(spec: SynthSpec) -> SynthOutput {
    generate(&SynthSpec {
        n_samples: 4000,
        n_speakers: 80,
        ..spec
    })
    .unwrap()
}

fn trained(out: &SynthOutput, split: &CorpusSplit, latent_dim: usize, k: usize) -> SaeModel {
    let mut cfg = SaeConfig::topk(out.corpus.dim(), latent_dim, k);
    cfg.epochs = 10;
    cfg.seed = 5;
    let tr = out.corpus.subset(&split.train).unwrap();
    let te = out.corpus.subset(&split.test).unwrap();
    train(&cfg, &tr, &te).unwrap().0
}

/// Copy of `model` with `extra` latents that can never enter the top k.
fn padded(model: &SaeModel, extra: usize) -> SaeModel {
    let (m, l) = (model.input_dim(), model.latent_dim());
    let mut cfg = model.config.clone();
    cfg.latent_dim = l + extra;
    let mut enc_weight = model.enc_weight.clone();
    enc_weight.extend(std::iter::repeat_n(0.0, extra * m));
    let mut enc_bias = model.enc_bias.clone();
    enc_bias.extend(std::iter::repeat_n(-1e6, extra));
    let mut dec_weight = Vec::with_capacity(m * (l + extra));
    for i in 0..m {
        dec_weight.extend_from_slice(&model.dec_weight[i * l..(i + 1) * l]);
        dec_weight.extend(std::iter::repeat_n(0.0, extra));
    }
    SaeModel {
        config: cfg,
        enc_weight,
        enc_bias,
        dec_weight,
        dec_bias: model.dec_bias.clone(),
        input_mean: model.input_mean.clone(),
    }
}

fn raw_accuracy(corpus: &EmbeddingCorpus, labels: &LabelSet) -> f64 {
    let y: Vec<bool> = labels
        .row_labels(corpus)
        .unwrap()
        .into_iter()
        .map(Option::unwrap)
        .collect();
    let fit = fit_logistic(
        Design {
            features: corpus.data(),
            dim: corpus.dim(),
            labels: &y,
        },
        &ProbeConfig::default(),
    )
    .unwrap();
    let hits = corpus
        .rows()
        .zip(&y)
        .filter(|(x, &t)| (fit.decision(x) > 0.0) == t)
        .count();
    hits as f64 / y.len() as f64
}

#[test]
fn planted_attributes_are_linearly_separable_in_raw_space() {
    let out = small(SynthSpec::standard());
    for labels in &out.labels {
        let acc = raw_accuracy(&out.corpus, labels);
        assert!(acc > 0.99, "{}: {acc}", labels.positive_label);
    }
}

#[test]
fn zero_strength_attribute_is_not_separable() {
    let mut spec = SynthSpec::standard();
    spec.attributes.truncate(1);
    spec.attributes[0].strength = 0.0;
    let out = small(spec);
    let acc = raw_accuracy(&out.corpus, &out.labels[0]);
    let p = out.labels[0].positives() as f64 / out.corpus.len() as f64;
    // no better than the majority class by more than overfitting noise
    assert!(acc < p.max(1.0 - p) + 0.05, "{acc}");
}

#[test]
fn top_index_is_the_probe_phi() {
    let out = small(SynthSpec::standard());
    let split = CorpusSplit::random(out.corpus.len(), 0.2, 1).unwrap();
    let model = trained(&out, &split, 32, 4);
    let cfg = ProbeConfig::default();
    for labels in &out.labels {
        let probe = fit_probe(&model, &out.corpus, labels, &split, &cfg).unwrap();
        let top = top_indices(&model, &out.corpus, labels, &split, 3, &cfg).unwrap();
        assert_eq!(top[0].0, probe.phi);
        assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));
        assert!(top_indices(&model, &out.corpus, labels, &split, 0, &cfg).is_err());
    }
}

#[test]
fn padding_a_model_maps_every_sample_to_itself() {
    let out = small(SynthSpec::splitting());
    let split = CorpusSplit::random(out.corpus.len(), 0.2, 2).unwrap();
    let base = trained(&out, &split, 16, 4);
    let wide = padded(&base, 16);
    let models = [
        FlowModel {
            latent_dim: 16,
            k: 4,
            model: &base,
        },
        FlowModel {
            latent_dim: 32,
            k: 4,
            model: &wide,
        },
    ];
    let table = build_flows(&models, &out.corpus, &out.labels[0], &split, &ProbeConfig::default()).unwrap();
    assert_eq!(table.cells[0].stratum_phi, table.cells[1].stratum_phi);
    assert_eq!(table.cells[0].phi, table.cells[1].phi);
    for f in &table.flows {
        assert_eq!(f.from_index, f.to_index);
    }
    for s in &table.samples {
        assert_eq!(s.assignments[0], s.assignments[1]);
    }
    let report = detect_splits(&table);
    assert_eq!(report.cells[0].shared, report.cells[1].shared);
}

#[test]
fn flows_conserve_tracked_samples() {
    let out = small(SynthSpec::splitting());
    let split = CorpusSplit::random(out.corpus.len(), 0.2, 3).unwrap();
    let trained_models: Vec<SaeModel> = [8, 16, 32].iter().map(|&l| trained(&out, &split, l, 4)).collect();
    let models: Vec<FlowModel> = trained_models
        .iter()
        .map(|m| FlowModel {
            latent_dim: m.latent_dim(),
            k: 4,
            model: m,
        })
        .collect();
    let labels = &out.labels[0];
    let table = build_flows(&models, &out.corpus, labels, &split, &ProbeConfig::default()).unwrap();
    let row_labels = labels.row_labels(&out.corpus).unwrap();
    let tracked = split.test.iter().filter(|&&i| row_labels[i] == Some(true)).count();
    assert_eq!(table.samples.len(), tracked);
    for c in 0..models.len() - 1 {
        assert_eq!(table.outflow(c), tracked);
        for s in &table.samples {
            let matching: usize = table
                .flows
                .iter()
                .filter(|f| {
                    f.from_cell == c
                        && f.from_index == s.assignments[c]
                        && f.to_index == s.assignments[c + 1]
                        && f.stratum == s.stratum
                })
                .map(|f| f.count)
                .sum();
            assert!(matching >= 1);
        }
    }
    // inflow of the middle cell equals its outflow, per node
    let inflow = |j: Option<usize>| {
        table
            .flows
            .iter()
            .filter(|f| f.from_cell == 0 && f.to_index == j)
            .map(|f| f.count)
            .sum::<usize>()
    };
    let outflow = |j: Option<usize>| {
        table
            .flows
            .iter()
            .filter(|f| f.from_cell == 1 && f.from_index == j)
            .map(|f| f.count)
            .sum::<usize>()
    };
    for s in &table.samples {
        assert_eq!(inflow(s.assignments[1]), outflow(s.assignments[1]));
    }
    let sankey = table.sankey();
    assert_eq!(sankey.links.iter().map(|l| l.value).sum::<usize>(), 2 * tracked);
}

#[test]
fn flow_preconditions_are_enforced() {
    let out = small(SynthSpec::splitting());
    let split = CorpusSplit::random(out.corpus.len(), 0.2, 4).unwrap();
    let a = trained(&out, &split, 8, 4);
    let b = padded(&a, 8);
    let cfg = ProbeConfig::default();
    let labels = &out.labels[0];
    let fm = |latent_dim, k, model| FlowModel { latent_dim, k, model };
    assert!(build_flows(&[fm(8, 4, &a)], &out.corpus, labels, &split, &cfg).is_err());
    assert!(build_flows(&[fm(16, 4, &b), fm(8, 4, &a)], &out.corpus, labels, &split, &cfg).is_err());
    assert!(build_flows(&[fm(8, 4, &a), fm(16, 3, &b)], &out.corpus, labels, &split, &cfg).is_err());
    assert!(build_flows(&[fm(8, 4, &a), fm(20, 4, &b)], &out.corpus, labels, &split, &cfg).is_err());
}

#[test]
fn top_two_indices_partition_positives_by_subcomponent() {
    let out = generate(&SynthSpec::splitting()).unwrap();
    let split = CorpusSplit::random(out.corpus.len(), 0.2, 42).unwrap();
    let mut cfg = SaeConfig::topk(out.corpus.dim(), 256, 10);
    cfg.epochs = 20;
    cfg.seed = 42;
    let tr = out.corpus.subset(&split.train).unwrap();
    let te = out.corpus.subset(&split.test).unwrap();
    let model = train(&cfg, &tr, &te).unwrap().0;
    let labels = &out.labels[0];
    let top = top_indices(&model, &out.corpus, labels, &split, 2, &ProbeConfig::default()).unwrap();
    let (a, b) = (top[0].0, top[1].0);
    let truth = &out.truth.attributes[0];
    // routed[x][s]: test positives of subcomponent s whose larger top-2 activation is index x
    let mut routed = [[0usize; 2]; 2];
    for &i in split.test.iter().filter(|&&i| truth.active[i]) {
        let v = model.encode(out.corpus.row(i)).unwrap().values;
        if v[a].max(v[b]) <= 0.0 {
            continue;
        }
        let x = usize::from(v[b] > v[a]);
        routed[x][usize::from(truth.subcomponent[i].unwrap())] += 1;
    }
    for (x, row) in routed.iter().enumerate() {
        let total = row[0] + row[1];
        assert!(total > 0, "index {x} receives nothing: {routed:?}");
        let purity = row[0].max(row[1]) as f64 / total as f64;
        assert!(purity >= 0.8, "{routed:?}");
    }
    // the two indices capture different subcomponents
    let majority = |row: &[usize; 2]| usize::from(row[1] > row[0]);
    assert_ne!(majority(&routed[0]), majority(&routed[1]));
}
