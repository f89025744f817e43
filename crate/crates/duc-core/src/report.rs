//! Report writers: CSV (RFC 4180, header row, UTF-8) with JSON mirrors, and
//! plot-data series files consumable by any plotting tool.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionResult;
use crate::metrics::CurveTable;
use crate::steering::{FeatureClass, FeatureRecord, MitigationRow, RatioReport};
use crate::{DucError, Result};

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| DucError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> DucError {
    DucError::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| DucError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| DucError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DucError::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })
}

pub fn write_curves_csv(path: &Path, table: &CurveTable) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["scenario", "n_start", "group_size", "metric", "n", "mean", "std", "count"])
        .map_err(|e| csv_err(path, e))?;
    for r in &table.rows {
        w.write_record([
            r.scenario.clone(),
            r.n_start.to_string(),
            r.group_size.to_string(),
            r.metric.clone(),
            r.n.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
            r.count.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| DucError::io(path, e))
}

pub fn write_attribution_csv(path: &Path, result: &AttributionResult) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["layer", "mean_contribution", "rank"])
        .map_err(|e| csv_err(path, e))?;
    for (layer, c) in result.layer_contributions.iter().enumerate() {
        let rank = result
            .ranked_layers
            .iter()
            .position(|&l| l == layer)
            .expect("every layer is ranked");
        w.write_record([layer.to_string(), c.to_string(), (rank + 1).to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| DucError::io(path, e))
}

fn class_label(c: FeatureClass) -> &'static str {
    match c {
        FeatureClass::RepetitionFeature => "repetition",
        FeatureClass::CommonFeature => "common",
    }
}

pub fn write_features_csv(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["layer", "idx", "rs", "class", "max_act"])
        .map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record([
            r.layer.to_string(),
            r.feature_idx.to_string(),
            r.mean_repeat_score.to_string(),
            class_label(r.class).to_string(),
            r.max_activation.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| DucError::io(path, e))
}

pub fn write_features_jsonl(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    use std::io::Write;
    let mut file = std::fs::File::create(path).map_err(|e| DucError::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(file, "{line}").map_err(|e| DucError::io(path, e))?;
    }
    Ok(())
}

pub fn read_features_jsonl(path: &Path) -> Result<Vec<FeatureRecord>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path).map_err(|e| DucError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DucError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DucError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_ratio_csv(path: &Path, report: &RatioReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "dataset",
        "condition",
        "ratio",
        "features_used",
        "mean_repeat_score",
        "mean_entropy",
        "mean_perplexity",
        "count",
    ])
    .map_err(|e| csv_err(path, e))?;
    for r in &report.rows {
        w.write_record([
            r.dataset.clone(),
            r.condition.clone(),
            r.ratio.to_string(),
            r.features_used.to_string(),
            r.stats.mean_repeat_score.to_string(),
            r.stats.mean_entropy.to_string(),
            r.stats.mean_perplexity.to_string(),
            r.stats.count.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| DucError::io(path, e))
}

pub fn write_mitigation_csv(path: &Path, rows: &[MitigationRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "dataset",
        "method",
        "mean_repeat_score",
        "mean_entropy",
        "mean_perplexity",
        "count",
    ])
    .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.method.clone(),
            r.stats.mean_repeat_score.to_string(),
            r.stats.mean_entropy.to_string(),
            r.stats.mean_perplexity.to_string(),
            r.stats.count.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| DucError::io(path, e))
}

// ---------------------------------------------------------------------------
// Plot data

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlotSeries {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlotFile {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<PlotSeries>,
}

/// One series per (metric, group size) over the token-scenario cells,
/// x = repetition start position, y = mean metric value.
pub fn curve_plot(table: &CurveTable) -> PlotFile {
    use std::collections::BTreeMap;
    let mut series: BTreeMap<(String, usize), Vec<(usize, f64)>> = BTreeMap::new();
    for r in &table.rows {
        if r.scenario != "token" {
            continue;
        }
        series
            .entry((r.metric.clone(), r.group_size))
            .or_default()
            .push((r.n_start, r.mean));
    }
    PlotFile {
        title: "metric curves".to_string(),
        x_label: "repetition start position".to_string(),
        y_label: "metric value".to_string(),
        series: series
            .into_iter()
            .map(|((metric, m), mut pts)| {
                pts.sort_by_key(|&(n, _)| n);
                PlotSeries {
                    label: format!("{metric} M={m}"),
                    x: pts.iter().map(|&(n, _)| n as f64).collect(),
                    y: pts.iter().map(|&(_, v)| v).collect(),
                }
            })
            .collect(),
    }
}

/// One bar per layer from the attribution result.
pub fn attribution_plot(result: &AttributionResult) -> PlotFile {
    PlotFile {
        title: "layer attribution".to_string(),
        x_label: "layer".to_string(),
        y_label: "mean contribution".to_string(),
        series: vec![PlotSeries {
            label: "logit difference".to_string(),
            x: (0..result.layer_contributions.len())
                .map(|l| l as f64)
                .collect(),
            y: result.layer_contributions.clone(),
        }],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::CurveRow;
    use crate::steering::ConditionStats;

    fn table() -> CurveTable {
        CurveTable {
            rows: vec![
                CurveRow {
                    scenario: "token".to_string(),
                    n_start: 10,
                    group_size: 1,
                    metric: "repeat_n1".to_string(),
                    n: 1,
                    mean: 0.9,
                    std: 0.01,
                    count: 100,
                },
                CurveRow {
                    scenario: "token".to_string(),
                    n_start: 0,
                    group_size: 1,
                    metric: "repeat_n1".to_string(),
                    n: 1,
                    mean: 0.99,
                    std: 0.0,
                    count: 100,
                },
                CurveRow {
                    scenario: "paragraph".to_string(),
                    n_start: 0,
                    group_size: 0,
                    metric: "repeat_n1".to_string(),
                    n: 1,
                    mean: 0.8,
                    std: 0.0,
                    count: 100,
                },
            ],
            empty_cells_skipped: 0,
        }
    }

    #[test]
    fn curves_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        write_curves_csv(&path, &table()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(
            lines[0],
            "scenario,n_start,group_size,metric,n,mean,std,count"
        );
        assert!(lines[1].starts_with("token,10,1,repeat_n1,1,0.9,"));
    }

    #[test]
    fn curve_plot_one_series_per_metric_group_sorted_by_x() {
        let p = curve_plot(&table());
        assert_eq!(p.series.len(), 1);
        assert_eq!(p.series[0].label, "repeat_n1 M=1");
        assert_eq!(p.series[0].x, vec![0.0, 10.0]);
        assert_eq!(p.series[0].y, vec![0.99, 0.9]);
    }

    #[test]
    fn empty_table_gives_empty_series() {
        let p = curve_plot(&CurveTable {
            rows: vec![],
            empty_cells_skipped: 0,
        });
        assert!(p.series.is_empty());
    }

    #[test]
    fn attribution_outputs() {
        let r = AttributionResult {
            layer_contributions: vec![0.2, 1.5, -0.1],
            ranked_layers: vec![1, 0, 2],
            templates_used: 8,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attr.csv");
        write_attribution_csv(&path, &r).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "layer,mean_contribution,rank\n0,0.2,2\n1,1.5,1\n2,-0.1,3\n"
        );
        let p = attribution_plot(&r);
        assert_eq!(p.series[0].x.len(), 3);
    }

    #[test]
    fn features_jsonl_roundtrip() {
        let records = vec![FeatureRecord {
            layer: 1,
            feature_idx: 7,
            mean_repeat_score: 0.5,
            class: FeatureClass::RepetitionFeature,
            max_activation: 2.25,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.jsonl");
        write_features_jsonl(&path, &records).unwrap();
        let back = read_features_jsonl(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].feature_idx, 7);
        assert_eq!(back[0].class, FeatureClass::RepetitionFeature);
    }

    #[test]
    fn csv_quoting_is_rfc4180() {
        let rows = vec![MitigationRow {
            dataset: "a,b".to_string(),
            method: "greedy".to_string(),
            stats: ConditionStats {
                mean_repeat_score: 0.0,
                mean_entropy: 0.0,
                mean_perplexity: 0.0,
                count: 1,
            },
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mit.csv");
        write_mitigation_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"a,b\",greedy"));
    }
}
