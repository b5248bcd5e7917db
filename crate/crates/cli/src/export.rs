// SPDX-License-Identifier: MIT OR Apache-2.0

//! Consolidated `report.json` over whatever artifacts exist.

use std::collections::BTreeMap;
use std::path::Path;

use latent_lens::fsutil::{read_json, write_atomic, write_json_atomic};
use latent_lens::gridsearch::{Table, SUMMARY_FILE};
use latent_lens::probe::ProbeResult;
use latent_lens::splitting::SplitReport;
use latent_lens::steering::{ClassMeans, SteeringHistograms};
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::commands::{FlowsOut, SteeringOut};
use crate::config::Effective;
use crate::{artifacts, CliError};

pub const SECTIONS: [&str; 5] = ["heatmap", "probe", "steering", "histograms", "flows"];
pub const HEATMAP_CSV: &str = "report_heatmap.csv";
pub const STEERING_CSV: &str = "report_steering_means.csv";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gap {
    pub section: String,
    pub expected: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatmapSection {
    pub header: Vec<String>,
    /// Completed cells only.
    pub rows: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub phi: usize,
    pub precision: f64,
    pub recall: f64,
    pub no_positive_predictions: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteeringSummary {
    pub phi: usize,
    pub a_phi: f64,
    pub positive_class: String,
    pub negative_class: String,
    pub positive: ClassMeans,
    pub negative: ClassMeans,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowsSection {
    pub attribute: String,
    pub k: usize,
    pub sankey: latent_lens::splitting::Sankey,
    pub split_report: Option<SplitReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub heatmap: Option<HeatmapSection>,
    pub probe: Option<BTreeMap<String, ProbeSummary>>,
    pub steering: Option<BTreeMap<String, SteeringSummary>>,
    pub histograms: Option<BTreeMap<String, SteeringHistograms>>,
    pub flows: Option<FlowsSection>,
    pub gaps: Vec<Gap>,
}

impl Report {
    pub fn present_sections(&self) -> Vec<&'static str> {
        let present = [
            self.heatmap.is_some(),
            self.probe.is_some(),
            self.steering.is_some(),
            self.histograms.is_some(),
            self.flows.is_some(),
        ];
        SECTIONS
            .iter()
            .zip(present)
            .filter(|(_, p)| *p)
            .map(|(s, _)| *s)
            .collect()
    }
}

/// Attribute names of files `<prefix><attr><suffix>` in `dir`, sorted.
fn discover(dir: &Path, prefix: &str, suffix: &str) -> Vec<String> {
    let mut found: Vec<String> = std::fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_prefix(prefix)?.strip_suffix(suffix).map(str::to_owned)
        })
        .collect();
    found.sort();
    found
}

pub fn export(eff: &Effective) -> Result<(), CliError> {
    let out = &eff.out;
    let mut gaps = Vec::new();
    let mut gap = |section: &str, expected: &Path| {
        gaps.push(Gap {
            section: section.to_owned(),
            expected: expected.display().to_string(),
        })
    };

    let grid = out.join(artifacts::GRID_DIR);
    let heatmap_src = [grid.join(artifacts::HEATMAP), grid.join(SUMMARY_FILE)]
        .into_iter()
        .find(|p| p.is_file());
    let heatmap = match heatmap_src {
        Some(p) => {
            let table = Table::read(&p)?;
            let status = table.header.iter().position(|h| h == "status");
            let rows: Vec<Vec<String>> = table
                .rows
                .into_iter()
                .filter(|r| status.is_none_or(|s| r[s] == "completed"))
                .collect();
            let filtered = Table {
                header: table.header.clone(),
                rows: rows.clone(),
            };
            filtered.write(&out.join(HEATMAP_CSV))?;
            Some(HeatmapSection {
                header: table.header,
                rows,
            })
        }
        None => {
            gap("heatmap", &grid.join(SUMMARY_FILE));
            None
        }
    };

    let probe_attrs: Vec<String> = discover(out, "probe_", ".json");
    let probe = if probe_attrs.is_empty() {
        gap("probe", &out.join(artifacts::probe("<attribute>")));
        None
    } else {
        let mut m = BTreeMap::new();
        for a in probe_attrs {
            let r: ProbeResult = read_json(&out.join(artifacts::probe(&a)))?;
            m.insert(
                a,
                ProbeSummary {
                    phi: r.phi,
                    precision: r.test.precision,
                    recall: r.test.recall,
                    no_positive_predictions: r.test.no_positive_predictions,
                },
            );
        }
        Some(m)
    };

    let steer_attrs = discover(out, "steering_", ".json");
    let (steering, histograms) = if steer_attrs.is_empty() {
        gap("steering", &out.join(artifacts::steering("<attribute>")));
        gap("histograms", &out.join(artifacts::steering_hist("<attribute>")));
        (None, None)
    } else {
        let mut means = BTreeMap::new();
        let mut hists = BTreeMap::new();
        let mut csv = String::from("attribute,class,role,count,before,after\n");
        for a in steer_attrs {
            let s: SteeringOut = read_json(&out.join(artifacts::steering(&a)))?;
            let r = s.report;
            for (class, role, m) in [
                (&r.positive_class, "deactivated", &r.positive),
                (&r.negative_class, "activated", &r.negative),
            ] {
                csv.push_str(&format!("{a},{class},{role},{},{},{}\n", m.count, m.before, m.after));
            }
            hists.insert(a.clone(), r.histograms);
            means.insert(
                a,
                SteeringSummary {
                    phi: r.phi,
                    a_phi: r.a_phi,
                    positive_class: r.positive_class,
                    negative_class: r.negative_class,
                    positive: r.positive,
                    negative: r.negative,
                },
            );
        }
        write_atomic(&out.join(STEERING_CSV), csv.as_bytes())?;
        (Some(means), Some(hists))
    };

    let flows_path = out.join(artifacts::FLOWS);
    let flows = if flows_path.is_file() {
        let f: FlowsOut = read_json(&flows_path)?;
        let report_path = out.join(artifacts::SPLIT_REPORT);
        let split_report = if report_path.is_file() {
            Some(read_json(&report_path)?)
        } else {
            gap("flows", &report_path);
            None
        };
        Some(FlowsSection {
            attribute: f.attribute,
            k: f.k,
            sankey: f.sankey,
            split_report,
        })
    } else {
        gap("flows", &flows_path);
        None
    };

    let report = Report {
        heatmap,
        probe,
        steering,
        histograms,
        flows,
        gaps,
    };
    write_json_atomic(&out.join(artifacts::REPORT), &report)?;
    let present = report.present_sections();
    info!(sections = ?present, gaps = report.gaps.len(), "report written");
    Ok(())
}
