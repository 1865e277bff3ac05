//! Merged comparison tables and static bar charts over finished runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::run::REPORTS_FILE;
use crate::error::{Error, Result};

/// One report row with its value kept as the text written by the run.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub scenario: String,
    pub mode: String,
    pub models_for_test: String,
    pub seed: String,
    pub config_hash: String,
    pub metric: String,
    pub value: String,
}

impl ReportRow {
    fn key(&self) -> (String, String, String, String, String) {
        (
            self.scenario.clone(),
            self.mode.clone(),
            self.models_for_test.clone(),
            self.seed.clone(),
            self.config_hash.clone(),
        )
    }
}

pub struct ReportSummary {
    pub rows: Vec<ReportRow>,
    pub table_csv: PathBuf,
    pub table_txt: PathBuf,
    pub plots: Vec<PathBuf>,
    /// Mixed metric families, such as classifier accuracy next to Type1.
    pub warnings: Vec<String>,
}

/// Reads `reports.csv` from a run directory, or from its `evaluation` or
/// `ablation` stage.
pub fn read_run_rows(run_dir: &Path) -> Result<Vec<ReportRow>> {
    if !run_dir.is_dir() {
        return Err(Error::Ingest {
            path: run_dir.to_path_buf(),
            reason: "run directory does not exist".into(),
        });
    }
    let candidates = [
        run_dir.join(REPORTS_FILE),
        run_dir.join("evaluation").join(REPORTS_FILE),
        run_dir.join("ablation").join(REPORTS_FILE),
    ];
    let files: Vec<&PathBuf> = candidates.iter().filter(|p| p.is_file()).collect();
    if files.is_empty() {
        return Err(Error::Ingest {
            path: run_dir.to_path_buf(),
            reason: format!("no {REPORTS_FILE} found; the run has not completed"),
        });
    }
    let mut rows = Vec::new();
    for file in files {
        let mut r = csv::Reader::from_path(file)?;
        let headers = r.headers()?.clone();
        let col = |name: &str| {
            headers.iter().position(|h| h == name).ok_or_else(|| Error::Ingest {
                path: file.clone(),
                reason: format!("missing column {name}"),
            })
        };
        let idx = [
            col("scenario")?,
            col("mode")?,
            col("models_for_test")?,
            col("seed")?,
            col("config_hash")?,
            col("metric")?,
            col("value")?,
        ];
        for rec in r.records() {
            let rec = rec?;
            let f = |i: usize| rec.get(idx[i]).unwrap_or_default().to_string();
            rows.push(ReportRow {
                scenario: f(0),
                mode: f(1),
                models_for_test: f(2),
                seed: f(3),
                config_hash: f(4),
                metric: f(5),
                value: f(6),
            });
        }
    }
    Ok(rows)
}

fn metric_family(metric: &str) -> &'static str {
    match metric {
        "type1" | "rank1" => "feature_extractor_inversion",
        "classifier_acc" => "classifier_inversion",
        "mi_acc" => "membership",
        _ => "other",
    }
}

/// Merges the reports of `run_dirs` into one table with a column per
/// metric, written to `out_dir` as CSV and text, plus one SVG bar chart
/// per metric.
pub fn render_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<ReportSummary> {
    if run_dirs.is_empty() {
        return Err(Error::Precondition("render_report needs at least one run directory".into()));
    }
    let mut rows = Vec::new();
    for dir in run_dirs {
        rows.extend(read_run_rows(dir)?);
    }
    let metrics: BTreeSet<String> = rows.iter().map(|r| r.metric.clone()).collect();
    let families: BTreeSet<&str> = metrics
        .iter()
        .map(|m| metric_family(m))
        .filter(|f| *f != "membership")
        .collect();
    let mut warnings = Vec::new();
    if families.len() > 1 {
        let list: Vec<&str> = families.into_iter().collect();
        warnings.push(format!("incompatible metric families in one table: {}", list.join(", ")));
    }

    let mut table: BTreeMap<(String, String, String, String, String), BTreeMap<String, String>> = BTreeMap::new();
    for r in &rows {
        let cell = table.entry(r.key()).or_default();
        if let Some(old) = cell.insert(r.metric.clone(), r.value.clone()) {
            if old != r.value {
                warnings.push(format!("conflicting {} values for {:?}: {old} vs {}", r.metric, r.key(), r.value));
            }
        }
    }

    fs::create_dir_all(out_dir)?;
    let table_csv = out_dir.join("comparison.csv");
    let mut w = csv::Writer::from_path(&table_csv)?;
    let mut header = vec!["scenario", "mode", "models_for_test", "seed", "config_hash"];
    header.extend(metrics.iter().map(String::as_str));
    w.write_record(&header)?;
    let mut text = format!(
        "{:<28} {:<8} {:<6} {:>6} {:<18}",
        "scenario", "mode", "test", "seed", "config_hash"
    );
    for m in &metrics {
        text.push_str(&format!(" {m:>14}"));
    }
    text.push('\n');
    for (key, cells) in &table {
        let mut rec = vec![key.0.clone(), key.1.clone(), key.2.clone(), key.3.clone(), key.4.clone()];
        text.push_str(&format!("{:<28} {:<8} {:<6} {:>6} {:<18}", key.0, key.1, key.2, key.3, key.4));
        for m in &metrics {
            let v = cells.get(m).cloned().unwrap_or_default();
            text.push_str(&format!(" {v:>14}"));
            rec.push(v);
        }
        text.push('\n');
        w.write_record(&rec)?;
    }
    w.flush()?;
    let table_txt = out_dir.join("comparison.txt");
    fs::write(&table_txt, text)?;

    let mut plots = Vec::new();
    for m in &metrics {
        let bars: Vec<(String, f64)> = table
            .iter()
            .filter_map(|(k, cells)| {
                let v = cells.get(m)?.parse::<f64>().ok()?;
                Some((format!("{} {} {} s{}", k.0, k.1, k.2, k.3), v))
            })
            .collect();
        let path = out_dir.join(format!("{m}.svg"));
        bar_chart(&path, m, &bars)?;
        plots.push(path);
    }
    Ok(ReportSummary {
        rows,
        table_csv,
        table_txt,
        plots,
        warnings,
    })
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Config(format!("plotting failed: {e}"))
}

fn bar_chart(path: &Path, metric: &str, bars: &[(String, f64)]) -> Result<()> {
    let width = (160 + 90 * bars.len()).max(480) as u32;
    let root = SVGBackend::new(path, (width, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let n = bars.len().max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption(metric, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(90)
        .y_label_area_size(48)
        .build_cartesian_2d((0..n).into_segmented(), 0.0..1.0)
        .map_err(plot_err)?;
    let labels: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .y_desc("value")
        .x_labels(n)
        .x_label_formatter(&|x| match x {
            SegmentValue::CenterOf(i) => labels.get(*i).cloned().unwrap_or_default(),
            _ => String::new(),
        })
        .x_label_style(("sans-serif", 11))
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, (_, v))| {
            let mut bar = Rectangle::new(
                [(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), v.clamp(0.0, 1.0))],
                BLUE.mix(0.6).filled(),
            );
            bar.set_margin(0, 0, 8, 8);
            bar
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{write_reports_csv, EvalContext, EvalReport};
    use crate::incorporation::{Mode, ModelsForTest, TestPlan};

    fn fake_run(root: &Path, mode: Mode, tp: usize) -> PathBuf {
        let plan = TestPlan {
            mode,
            models_for_test: ModelsForTest::Final,
            alpha: 5,
        };
        let ctx = EvalContext::new("upslope", &plan, 0, mode.as_str());
        let dir = root.join(mode.as_str());
        fs::create_dir_all(dir.join("evaluation")).unwrap();
        write_reports_csv(
            &[
                EvalReport::new("type1", tp, 7, 0, &ctx),
                EvalReport::new("rank1", tp, 9, 1, &ctx),
            ],
            &dir.join("evaluation").join(REPORTS_FILE),
        )
        .unwrap();
        dir
    }

    #[test]
    fn four_runs_make_four_rows() {
        let tmp = tempfile::tempdir().unwrap();
        let dirs: Vec<PathBuf> = Mode::ALL
            .iter()
            .enumerate()
            .map(|(i, m)| fake_run(tmp.path(), *m, i + 1))
            .collect();
        let out = tmp.path().join("report");
        let summary = render_report(&dirs, &out).unwrap();
        let text = fs::read_to_string(&summary.table_csv).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(summary.warnings.is_empty());
        assert_eq!(summary.plots.len(), 2);
        assert!(fs::read_to_string(&summary.plots[0]).unwrap().contains("<svg"));
        // Values are copied verbatim from the run reports.
        let source = fs::read_to_string(dirs[2].join("evaluation").join(REPORTS_FILE)).unwrap();
        let v = (3.0f64 / 7.0).to_string();
        assert!(source.contains(&v) && text.contains(&v));
    }

    #[test]
    fn missing_run_directory_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        let missing = tmp.path().join("nope");
        let err = render_report(&[missing.clone()], &tmp.path().join("out")).err().unwrap();
        assert!(err.to_string().contains(&missing.display().to_string()));
    }

    #[test]
    fn mixed_families_are_flagged() {
        let tmp = tempfile::tempdir().unwrap();
        let a = fake_run(tmp.path(), Mode::Rand, 1);
        let plan = TestPlan {
            mode: Mode::Sr,
            models_for_test: ModelsForTest::Final,
            alpha: 5,
        };
        let ctx = EvalContext::new("upslope", &plan, 0, "c");
        let b = tmp.path().join("cls");
        fs::create_dir_all(&b).unwrap();
        write_reports_csv(&[EvalReport::new("classifier_acc", 1, 2, 0, &ctx)], &b.join(REPORTS_FILE)).unwrap();
        let summary = render_report(&[a, b], &tmp.path().join("out")).unwrap();
        assert_eq!(summary.warnings.len(), 1);
    }
}
