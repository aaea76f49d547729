//! Ablation suites: fusion-method comparison, triplet-scheme grid,
//! modality scaling, and data-token-index stability. Every cell shares the
//! suite's seeds; per-cell failures are recorded and the suite continues.

use std::collections::BTreeMap;

use serde::Serialize;

use graft::data::DatasetSplit;
use graft::error::{Error, Result};
use graft::losses::TripletScheme;
use graft::model::FusionMethod;
use graft::train::NullSink;

use crate::commands::{load_data, run_experiment_on};
use crate::config::{DataKind, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteKind {
    Fusion,
    TripletScheme,
    Modalities,
    TokenIndex,
}

impl SuiteKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "fusion" => Ok(SuiteKind::Fusion),
            "triplet-scheme" => Ok(SuiteKind::TripletScheme),
            "modalities" => Ok(SuiteKind::Modalities),
            "token-index" => Ok(SuiteKind::TokenIndex),
            other => Err(Error::config(format!(
                "unknown suite {other:?}; expected fusion | triplet-scheme | modalities | token-index"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SuiteKind::Fusion => "fusion",
            SuiteKind::TripletScheme => "triplet-scheme",
            SuiteKind::Modalities => "modalities",
            SuiteKind::TokenIndex => "token-index",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellMetrics {
    pub map: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteCell {
    pub label: String,
    /// Per-seed mAP values in seed order (successful runs only).
    pub per_seed_map: Vec<f64>,
    /// Mean over successful seeds.
    pub mean: Option<CellMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<SuiteCell>,
    pub notes: BTreeMap<String, String>,
}

impl SuiteReport {
    pub fn cell(&self, label: &str) -> Option<&SuiteCell> {
        self.cells.iter().find(|c| c.label == label)
    }

    /// CSV table: one row per cell, `delta_map` against the first row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,seeds,map,r1,r5,r10,delta_map,error\n");
        let base_map = self
            .cells
            .first()
            .and_then(|c| c.mean.as_ref())
            .map(|m| m.map);
        for c in &self.cells {
            let (map, r1, r5, r10, delta) = match (&c.mean, base_map) {
                (Some(m), Some(b)) => (
                    format!("{:.6}", m.map),
                    format!("{:.6}", m.r1),
                    format!("{:.6}", m.r5),
                    format!("{:.6}", m.r10),
                    format!("{:.6}", m.map - b),
                ),
                (Some(m), None) => (
                    format!("{:.6}", m.map),
                    format!("{:.6}", m.r1),
                    format!("{:.6}", m.r5),
                    format!("{:.6}", m.r10),
                    String::new(),
                ),
                _ => Default::default(),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.label,
                c.per_seed_map.len(),
                map,
                r1,
                r5,
                r10,
                delta,
                c.error.as_deref().unwrap_or("")
            ));
        }
        out
    }
}

/// Runs one cell over every seed; failures mark the cell without stopping
/// the suite.
fn run_cell(
    label: &str,
    seeds: &[u64],
    mut make_cfg: impl FnMut(u64) -> RunConfig,
    data: Option<&dyn Fn(u64, &RunConfig) -> Result<DatasetSplit>>,
) -> SuiteCell {
    let mut per_seed_map = Vec::new();
    let mut sums = (0.0, 0.0, 0.0, 0.0);
    let mut error = None;
    for &seed in seeds {
        let cfg = match make_cfg(seed).resolve(Some(seed)) {
            Ok(c) => c,
            Err(e) => {
                error = Some(e.to_string());
                continue;
            }
        };
        let result = (|| -> Result<graft::eval::MetricReport> {
            match data {
                Some(make_split) => {
                    let split = make_split(seed, &cfg)?;
                    run_experiment_on(&cfg, &split, &mut NullSink)
                }
                None => {
                    let split = load_data(&cfg)?;
                    run_experiment_on(&cfg, &split, &mut NullSink)
                }
            }
        })();
        match result {
            Ok(m) => {
                per_seed_map.push(m.map);
                sums.0 += m.map;
                sums.1 += m.rank(1);
                sums.2 += m.rank(5);
                sums.3 += m.rank(10);
            }
            Err(e) => error = Some(format!("seed {seed}: {e}")),
        }
    }
    let n = per_seed_map.len() as f64;
    SuiteCell {
        label: label.to_string(),
        mean: (n > 0.0).then(|| CellMetrics {
            map: sums.0 / n,
            r1: sums.1 / n,
            r5: sums.2 / n,
            r10: sums.3 / n,
        }),
        per_seed_map,
        error,
    }
}

pub fn run_suite(kind: SuiteKind, base: &RunConfig, seeds: &[u64]) -> Result<SuiteReport> {
    if seeds.is_empty() {
        return Err(Error::config("suite needs at least one seed"));
    }
    match kind {
        SuiteKind::Fusion => fusion_suite(base, seeds),
        SuiteKind::TripletScheme => {
            let labels: Vec<String> = TripletScheme::grid().iter().map(|s| s.label()).collect();
            let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
            triplet_scheme_cells(base, &refs, seeds)
        }
        SuiteKind::Modalities => modalities_suite(base, seeds),
        SuiteKind::TokenIndex => token_index_suite(base, seeds),
    }
}

fn fusion_suite(base: &RunConfig, seeds: &[u64]) -> Result<SuiteReport> {
    let variants = [
        ("vanilla-cls", FusionMethod::VanillaCls),
        ("vanilla-averaged", FusionMethod::VanillaAverage),
        ("graft-fusion-token", FusionMethod::FusionToken),
    ];
    let cells = variants
        .iter()
        .map(|(label, method)| {
            run_cell(
                label,
                seeds,
                |_| {
                    let mut cfg = base.clone();
                    cfg.model.fusion_method = *method;
                    cfg
                },
                None,
            )
        })
        .collect();
    Ok(SuiteReport {
        suite: "fusion".into(),
        seeds: seeds.to_vec(),
        cells,
        notes: BTreeMap::new(),
    })
}

/// Arbitrary scheme labels over the shared seeds; the full grid uses all 8.
pub fn triplet_scheme_cells(base: &RunConfig, labels: &[&str], seeds: &[u64]) -> Result<SuiteReport> {
    for label in labels {
        TripletScheme::parse(label, 0)?;
    }
    let cells = labels
        .iter()
        .map(|label| {
            run_cell(
                label,
                seeds,
                |_| {
                    let mut cfg = base.clone();
                    cfg.loss.scheme = label.to_string();
                    cfg
                },
                None,
            )
        })
        .collect();
    Ok(SuiteReport {
        suite: "triplet-scheme".into(),
        seeds: seeds.to_vec(),
        cells,
        notes: BTreeMap::new(),
    })
}

/// All non-empty modality subsets of one generated dataset, singles first.
fn modalities_suite(base: &RunConfig, seeds: &[u64]) -> Result<SuiteReport> {
    if base.data.kind != DataKind::Synthetic {
        return Err(Error::config("the modalities suite requires synthetic data"));
    }
    let m = base.model.n_modalities;
    if m < 2 {
        return Err(Error::config("the modalities suite needs n_modalities >= 2"));
    }
    let names = base.data.synthetic.modality_names();
    let mut subsets: Vec<Vec<usize>> = Vec::new();
    for mask in 1u32..(1 << m) {
        let subset: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        subsets.push(subset);
    }
    subsets.sort_by_key(|s| (s.len(), s.clone()));

    let cells = subsets
        .iter()
        .map(|subset| {
            let label = subset
                .iter()
                .map(|&i| names[i].clone())
                .collect::<Vec<_>>()
                .join("+");
            let make_split = |_seed: u64, cfg: &RunConfig| -> Result<DatasetSplit> {
                // Generate the full M-modality dataset, then view the subset.
                let mut full_spec = base.data.synthetic.clone();
                full_spec.seed = cfg.seed;
                let full = graft::data::generate_synthetic(&full_spec)?;
                full.select_modalities(subset)
            };
            run_cell(
                &label,
                seeds,
                |_| {
                    let mut cfg = base.clone();
                    cfg.model.n_modalities = subset.len();
                    cfg.data.synthetic.n_modalities = subset.len();
                    cfg
                },
                Some(&make_split),
            )
        })
        .collect();
    Ok(SuiteReport {
        suite: "modalities".into(),
        seeds: seeds.to_vec(),
        cells,
        notes: BTreeMap::new(),
    })
}

/// Data-token indices {0, L/4, L/2, 3L/4}, deduplicated.
fn token_index_suite(base: &RunConfig, seeds: &[u64]) -> Result<SuiteReport> {
    let l_d = base.model.n_data_tokens();
    let mut indices: Vec<usize> = vec![0, l_d / 4, l_d / 2, 3 * l_d / 4];
    indices.dedup();
    indices.retain(|&i| i < l_d);

    let cells: Vec<SuiteCell> = indices
        .iter()
        .map(|&idx| {
            run_cell(
                &format!("index-{idx}"),
                seeds,
                |_| {
                    let mut cfg = base.clone();
                    cfg.loss.data_token_index = idx;
                    cfg
                },
                None,
            )
        })
        .collect();

    let maps: Vec<f64> = cells
        .iter()
        .filter_map(|c| c.mean.as_ref().map(|m| m.map))
        .collect();
    let mut notes = BTreeMap::new();
    if !maps.is_empty() {
        let mean = maps.iter().sum::<f64>() / maps.len() as f64;
        let var = maps.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / maps.len() as f64;
        notes.insert("map_std".into(), format!("{:.6}", var.sqrt()));
        notes.insert("map_mean".into(), format!("{:.6}", mean));
    }
    Ok(SuiteReport {
        suite: "token-index".into(),
        seeds: seeds.to_vec(),
        cells,
        notes,
    })
}

/// Sample standard deviation of the per-cell mean mAPs.
pub fn map_std(report: &SuiteReport) -> f64 {
    let maps: Vec<f64> = report
        .cells
        .iter()
        .filter_map(|c| c.mean.as_ref().map(|m| m.map))
        .collect();
    if maps.is_empty() {
        return f64::NAN;
    }
    let mean = maps.iter().sum::<f64>() / maps.len() as f64;
    (maps.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / maps.len() as f64).sqrt()
}
