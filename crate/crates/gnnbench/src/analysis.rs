//! Aggregation of run records: accuracy curves with standard-deviation
//! bands, Jensen-Shannon divergence between the two settings, and file
//! emission (tab-separated tables plus SVG charts).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::ResultRecord;
use crate::plot::{panel_grid, Series};

/// Per-epoch mean and population standard deviation for one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveSummary {
    pub config_id: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub repetitions: usize,
}

/// Summarizes equal-length accuracy trajectories of one configuration.
pub fn summarize(config_id: &str, trajectories: &[&[f64]]) -> Result<CurveSummary> {
    if trajectories.len() < 2 {
        return Err(Error::NotEnoughRecords {
            needed: 2,
            found: trajectories.len(),
        });
    }
    let len = trajectories[0].len();
    for t in trajectories {
        if t.len() != len {
            return Err(Error::MixedRecordLengths(len, t.len()));
        }
    }
    let n = trajectories.len() as f64;
    let mut mean = vec![0.0; len];
    for t in trajectories {
        for (m, &v) in mean.iter_mut().zip(*t) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut std = vec![0.0; len];
    for t in trajectories {
        for ((s, &v), &m) in std.iter_mut().zip(*t).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut std {
        *s = (*s / n).sqrt();
    }
    Ok(CurveSummary {
        config_id: config_id.to_string(),
        mean,
        std,
        repetitions: trajectories.len(),
    })
}

/// Jensen-Shannon divergence between two sample sets over a shared
/// equal-width histogram, base-2 logarithm, so the result lies in [0, 1].
/// Empty bins contribute zero; identical constant samples give 0.
pub fn js_divergence(samples_a: &[f64], samples_b: &[f64], bins: usize) -> Result<f64> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::NoRecords);
    }
    if bins == 0 {
        return Err(Error::InvalidParameter {
            name: "bins",
            reason: "must be positive".into(),
        });
    }
    let min = samples_a
        .iter()
        .chain(samples_b)
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let max = samples_a
        .iter()
        .chain(samples_b)
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Ok(0.0);
    }
    let width = (max - min) / bins as f64;
    let histogram = |samples: &[f64]| -> Vec<f64> {
        let mut counts = vec![0.0; bins];
        for &s in samples {
            let idx = (((s - min) / width) as usize).min(bins - 1);
            counts[idx] += 1.0;
        }
        let total = samples.len() as f64;
        counts.iter().map(|c| c / total).collect()
    };
    let p = histogram(samples_a);
    let q = histogram(samples_b);
    let mut jsd = 0.0;
    for (pi, qi) in p.iter().zip(&q) {
        let m = 0.5 * (pi + qi);
        if *pi > 0.0 {
            jsd += 0.5 * pi * (pi / m).log2();
        }
        if *qi > 0.0 {
            jsd += 0.5 * qi * (qi / m).log2();
        }
    }
    Ok(jsd.clamp(0.0, 1.0))
}

/// One row of the setting-divergence table.
#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceRow {
    pub model: String,
    pub pretrain_epochs: usize,
    pub jsd: f64,
}

/// JSD between the setting-A and setting-B distributions of final-epoch
/// accuracies, one row per (model, pretraining mode), samples pooled over
/// whatever datasets are present. Cells missing one setting are skipped
/// with a warning.
pub fn settings_divergence_report(records: &[ResultRecord], bins: usize) -> Result<Vec<DivergenceRow>> {
    use crate::data::Setting;
    let mut cells: BTreeMap<(String, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for record in records {
        let Some(&last) = record.accuracies.last() else {
            continue;
        };
        let entry = cells
            .entry((record.model.clone(), record.pretrain_epochs))
            .or_default();
        match record.setting {
            Setting::A => entry.0.push(last),
            Setting::B => entry.1.push(last),
        }
    }
    let mut rows = Vec::new();
    for ((model, pretrain_epochs), (a, b)) in cells {
        if a.is_empty() || b.is_empty() {
            log::warn!(
                "skipping divergence row for {model} pre{pretrain_epochs}: missing one setting"
            );
            continue;
        }
        rows.push(DivergenceRow {
            model,
            pretrain_epochs,
            jsd: js_divergence(&a, &b, bins)?,
        });
    }
    Ok(rows)
}

/// Serializes a curve as a tab-separated table with a single header row.
/// Floats use the shortest round-trip representation, so
/// [`parse_curve_table`] reproduces the summary bit-exactly.
pub fn write_curve_table(summary: &CurveSummary) -> String {
    let mut out = String::from("epoch\tmean\tstd\n");
    for (epoch, (mean, std)) in summary.mean.iter().zip(&summary.std).enumerate() {
        out.push_str(&format!("{epoch}\t{mean}\t{std}\n"));
    }
    out
}

pub fn parse_curve_table(config_id: &str, text: &str, repetitions: usize) -> Result<CurveSummary> {
    let mut mean = Vec::new();
    let mut std = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (_, m, s) = (
            fields.next(),
            fields.next().ok_or(Error::NoRecords)?,
            fields.next().ok_or(Error::NoRecords)?,
        );
        mean.push(m.parse::<f64>().map_err(|_| Error::InvalidParameter {
            name: "curve_table",
            reason: format!("bad float {m:?}"),
        })?);
        std.push(s.parse::<f64>().map_err(|_| Error::InvalidParameter {
            name: "curve_table",
            reason: format!("bad float {s:?}"),
        })?);
    }
    Ok(CurveSummary {
        config_id: config_id.to_string(),
        mean,
        std,
        repetitions,
    })
}

fn model_color(model: &str) -> &'static str {
    match model {
        "gcn" => "#1f77b4",
        "gcn64" => "#ff7f0e",
        "sage" => "#2ca02c",
        "gat" => "#d62728",
        "mlp" => "#9467bd",
        _ => "#7f7f7f",
    }
}

/// Groups records by configuration id, preserving lexicographic order.
pub fn group_by_config(records: &[ResultRecord]) -> BTreeMap<String, Vec<&ResultRecord>> {
    let mut groups: BTreeMap<String, Vec<&ResultRecord>> = BTreeMap::new();
    for record in records {
        groups.entry(record.config_id.clone()).or_default().push(record);
    }
    groups
}

/// Writes curve tables, accuracy charts (one per dataset/setting plus a
/// combined grid mirroring the published figure), and the divergence
/// table. Returns the written paths.
pub fn emit_outputs(records: &[ResultRecord], bins: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::IoAt {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let mut written = Vec::new();

    // Curve tables per configuration.
    let groups = group_by_config(records);
    let mut summaries: BTreeMap<String, CurveSummary> = BTreeMap::new();
    for (config_id, group) in &groups {
        let trajectories: Vec<&[f64]> = group.iter().map(|r| r.accuracies.as_slice()).collect();
        match summarize(config_id, &trajectories) {
            Ok(summary) => {
                let path = out_dir.join(format!("curve_{config_id}.tsv"));
                fs::write(&path, write_curve_table(&summary)).map_err(|e| Error::IoAt {
                    path: path.clone(),
                    source: e,
                })?;
                written.push(path);
                summaries.insert(config_id.clone(), summary);
            }
            Err(e) => log::warn!("skipping curve for {config_id}: {e}"),
        }
    }

    // Panels keyed (setting, dataset): settings stacked as rows, datasets
    // as columns.
    let mut panel_map: BTreeMap<(String, String), Vec<Series>> = BTreeMap::new();
    for (config_id, group) in &groups {
        let Some(summary) = summaries.get(config_id) else {
            continue;
        };
        let first = group[0];
        let key = (first.setting.to_string(), first.dataset.clone());
        let pretrained = first.pretrain_epochs > 0;
        panel_map.entry(key).or_default().push(Series {
            label: format!(
                "{} {}",
                first.model,
                if pretrained {
                    format!("pre{}", first.pretrain_epochs)
                } else {
                    "scratch".to_string()
                }
            ),
            mean: summary.mean.clone(),
            std: summary.std.clone(),
            color: model_color(&first.model).to_string(),
            dashed: pretrained,
        });
    }
    let mut datasets: Vec<String> = panel_map.keys().map(|(_, d)| d.clone()).collect();
    datasets.sort();
    datasets.dedup();
    for ((setting, dataset), series) in &panel_map {
        let path = out_dir.join(format!("accuracy_{dataset}_{setting}.svg"));
        let svg = panel_grid(
            &[(format!("{dataset} setting {setting}"), series.as_slice())],
            1,
        );
        fs::write(&path, svg).map_err(|e| Error::IoAt {
            path: path.clone(),
            source: e,
        })?;
        written.push(path);
    }
    if !panel_map.is_empty() {
        let mut panels = Vec::new();
        for setting in ["A", "B"] {
            for dataset in &datasets {
                if let Some(series) = panel_map.get(&(setting.to_string(), dataset.clone())) {
                    panels.push((format!("{dataset} setting {setting}"), series.as_slice()));
                }
            }
        }
        let path = out_dir.join("accuracy_grid.svg");
        fs::write(&path, panel_grid(&panels, datasets.len().max(1))).map_err(|e| Error::IoAt {
            path: path.clone(),
            source: e,
        })?;
        written.push(path);
    }

    // Divergence table.
    let rows = settings_divergence_report(records, bins)?;
    let mut table = String::from("model\tpretrain_epochs\tjsd\n");
    for row in &rows {
        table.push_str(&format!("{}\t{}\t{}\n", row.model, row.pretrain_epochs, row.jsd));
    }
    let path = out_dir.join("jsd_report.tsv");
    fs::write(&path, table).map_err(|e| Error::IoAt {
        path: path.clone(),
        source: e,
    })?;
    written.push(path);

    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Setting;

    #[test]
    fn summarize_identical_records_zero_std() {
        let t = vec![0.5, 0.6, 0.7];
        let s = summarize("x", &[&t, &t, &t]).unwrap();
        assert_eq!(s.mean, t);
        assert!(s.std.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn summarize_two_point_formula() {
        let a = vec![0.2, 0.2];
        let b = vec![0.4, 0.4];
        let s = summarize("x", &[&a, &b]).unwrap();
        assert!((s.mean[0] - 0.3).abs() < 1e-15);
        // population std of {0.2, 0.4} is 0.1
        assert!((s.std[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn summarize_rejects_mixed_lengths_and_singletons() {
        let a = vec![0.1];
        let b = vec![0.1, 0.2];
        assert!(matches!(
            summarize("x", &[&a, &b]),
            Err(Error::MixedRecordLengths(..))
        ));
        assert!(matches!(
            summarize("x", &[&a]),
            Err(Error::NotEnoughRecords { .. })
        ));
    }

    #[test]
    fn summarize_is_permutation_invariant() {
        let a = vec![0.1, 0.9];
        let b = vec![0.4, 0.3];
        let c = vec![0.7, 0.5];
        let s1 = summarize("x", &[&a, &b, &c]).unwrap();
        let s2 = summarize("x", &[&c, &a, &b]).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn jsd_identical_sets_zero() {
        let a = vec![0.1, 0.5, 0.9, 0.5];
        assert_eq!(js_divergence(&a, &a, 20).unwrap(), 0.0);
    }

    #[test]
    fn jsd_disjoint_supports_one() {
        let a = vec![0.0, 0.01, 0.02, 0.03];
        let b = vec![0.9, 0.91, 0.92, 0.93];
        let jsd = js_divergence(&a, &b, 10).unwrap();
        assert!((jsd - 1.0).abs() < 1e-12, "jsd {jsd}");
    }

    #[test]
    fn jsd_half_half_versus_point_mass() {
        // direct KL computation: P = (1/2, 1/2), Q = (1, 0) over 2 bins
        // gives 1/2 [ 1/2 lg(2/3) + 1/2 lg 2 ] + 1/2 [ lg(4/3) ] = 0.31128
        let a = vec![0.0, 1.0];
        let b = vec![0.0, 0.0];
        let jsd = js_divergence(&a, &b, 2).unwrap();
        let expect = 0.5 * (0.5 * (2.0f64 / 3.0).log2() + 0.5 * 2.0f64.log2())
            + 0.5 * (4.0f64 / 3.0).log2();
        assert!((jsd - expect).abs() < 1e-12);
        assert!((jsd - 0.3113).abs() < 1e-4);
    }

    #[test]
    fn jsd_is_symmetric() {
        let a = vec![0.1, 0.2, 0.2, 0.7];
        let b = vec![0.15, 0.5, 0.8];
        assert_eq!(
            js_divergence(&a, &b, 20).unwrap(),
            js_divergence(&b, &a, 20).unwrap()
        );
    }

    #[test]
    fn jsd_constant_identical_samples() {
        let a = vec![0.5, 0.5];
        let b = vec![0.5, 0.5, 0.5];
        assert_eq!(js_divergence(&a, &b, 20).unwrap(), 0.0);
    }

    fn record(model: &str, setting: Setting, pretrain: usize, last_acc: f64) -> ResultRecord {
        ResultRecord {
            config_id: format!("cora-{setting}-{model}-pre{pretrain}"),
            model: model.into(),
            dataset: "cora".into(),
            setting,
            pretrain_epochs: pretrain,
            repetition: 0,
            seed: 0,
            accuracies: vec![0.1, last_acc],
            wall_ms: 0,
        }
    }

    #[test]
    fn divergence_report_identical_settings_zero() {
        let mut records = Vec::new();
        for i in 0..10 {
            let acc = 0.5 + (i as f64) * 0.01;
            records.push(record("gcn", Setting::A, 200, acc));
            records.push(record("gcn", Setting::B, 200, acc));
        }
        let rows = settings_divergence_report(&records, 20).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].jsd, 0.0);
    }

    #[test]
    fn divergence_report_shifted_settings_near_one() {
        let mut records = Vec::new();
        for i in 0..10 {
            records.push(record("gcn", Setting::A, 0, 0.2 + (i as f64) * 0.001));
            records.push(record("gcn", Setting::B, 0, 0.7 + (i as f64) * 0.001));
        }
        let rows = settings_divergence_report(&records, 20).unwrap();
        assert!(rows[0].jsd > 0.99);
    }

    #[test]
    fn divergence_report_skips_missing_setting() {
        let records = vec![record("gcn", Setting::A, 0, 0.5)];
        let rows = settings_divergence_report(&records, 20).unwrap();
        assert!(rows.is_empty());
    }

    #[test]
    fn curve_table_round_trips_bit_exactly() {
        let summary = CurveSummary {
            config_id: "cora-A-gcn-pre200".into(),
            mean: vec![0.1, 1.0 / 3.0, 0.7654321098765432],
            std: vec![0.0, 1e-17, 0.2],
            repetitions: 5,
        };
        let text = write_curve_table(&summary);
        let parsed = parse_curve_table(&summary.config_id, &text, 5).unwrap();
        assert_eq!(parsed, summary);
        let bits_mean: Vec<u64> = parsed.mean.iter().map(|v| v.to_bits()).collect();
        let orig_mean: Vec<u64> = summary.mean.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_mean, orig_mean);
    }

    #[test]
    fn emit_outputs_empty_records_error() {
        let tmp = tempfile::TempDir::new().unwrap();
        assert!(matches!(
            emit_outputs(&[], 20, tmp.path()),
            Err(Error::NoRecords)
        ));
    }

    #[test]
    fn emit_outputs_writes_expected_files() {
        let tmp = tempfile::TempDir::new().unwrap();
        let mut records = Vec::new();
        for rep in 0..3 {
            for setting in [Setting::A, Setting::B] {
                for pretrain in [0, 200] {
                    let mut r = record("gcn", setting, pretrain, 0.5 + rep as f64 * 0.05);
                    r.repetition = rep;
                    records.push(r);
                }
            }
        }
        let written = emit_outputs(&records, 20, tmp.path()).unwrap();
        assert!(written.iter().any(|p| p.ends_with("jsd_report.tsv")));
        assert!(written.iter().any(|p| p.ends_with("accuracy_grid.svg")));
        let curve = tmp.path().join("curve_cora-A-gcn-pre200.tsv");
        assert!(curve.exists());
        let text = fs::read_to_string(curve).unwrap();
        // header + K+1 = 2 epochs
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("epoch\tmean\tstd\n"));
    }
}
