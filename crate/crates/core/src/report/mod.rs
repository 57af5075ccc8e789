//! Run manifests, metrics files, summaries and plots.

pub mod config;
pub mod manifest;
pub mod metrics;
pub mod plot;
pub mod summary;

use std::fs;
use std::path::{Path, PathBuf};

pub use config::{resolve_out_root, ConfigFile, DEFAULT_OUT_DIR, OUT_DIR_ENV};
pub use manifest::{ExperimentManifest, OutputPaths, RunKind, MANIFEST_FILE, TOOL_VERSION};
pub use metrics::{read_jsonl, write_jsonl, JsonlWriter, FEATURE_GRADS_FILE, METRICS_FILE};
pub use plot::{bar_chart, line_chart, padded_range, render_plots, rolling_bias, PlotReport, Series, Trace};
pub use summary::{read_csv, write_csv, AggregateRow, CsvRow, SummaryRow, AGGREGATES_FILE, SUMMARY_FILE};

use crate::error::{Error, Result};
use crate::sim::{
    derive_seed, gen_sample, run_experiment_suite_with, run_single, CellObserver, CellSpec, ExperimentReport,
    FeatureGradRecord, RunResult, StepRecord, SyntheticSample,
};

pub const REPORT_FILE: &str = "report.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const CELLS_DIR: &str = "cells";
pub const TRAIN_GROUP: &str = "train";

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Directory of a run under the output root.
pub fn run_dir(out_root: &Path, manifest: &ExperimentManifest) -> PathBuf {
    out_root.join(&manifest.run_id)
}

fn check_kind(manifest: &ExperimentManifest, kind: RunKind) -> Result<()> {
    if manifest.kind != kind {
        return Err(Error::invalid(format!("manifest is for {:?}, expected {kind:?}", manifest.kind)));
    }
    Ok(())
}

fn train_label(manifest: &ExperimentManifest) -> String {
    format!("{} seed {}", manifest.run.effective_strategy(), manifest.run.seed)
}

/// Runs a single training job, streaming its metrics into `dir`.
///
/// The manifest is written first, so an interrupted run still leaves a
/// manifest and a valid metrics prefix.
pub fn execute_train(manifest: &mut ExperimentManifest, dir: &Path) -> Result<RunResult> {
    check_kind(manifest, RunKind::Train)?;
    manifest.validate()?;
    create_dir(dir)?;
    manifest.outputs = OutputPaths {
        metrics: Some(METRICS_FILE.into()),
        feature_grads: Some(FEATURE_GRADS_FILE.into()),
        summary: Some(SUMMARY_FILE.into()),
        ..Default::default()
    };
    manifest.save(&dir.join(MANIFEST_FILE))?;

    let mut metrics = JsonlWriter::<StepRecord>::create(&dir.join(METRICS_FILE))?;
    let mut grads = JsonlWriter::<FeatureGradRecord>::create(&dir.join(FEATURE_GRADS_FILE))?;
    let result = run_single(&manifest.run, &manifest.generator, |r, g| {
        metrics.append(r)?;
        grads.append(g)
    })?;

    let row = SummaryRow::from_summary(&manifest.run_id, TRAIN_GROUP, &train_label(manifest), manifest.run.seed, &result.summary);
    write_csv(&dir.join(SUMMARY_FILE), &[row])?;
    let report = PlotReport {
        run_id: manifest.run_id.clone(),
        window: manifest.run.bias_window,
        traces: vec![Trace {
            label: train_label(manifest),
            records: result.records.clone(),
            eval: Some(result.summary.eval),
        }],
    };
    manifest.outputs.plots = plot_names(render_plots(&report, dir, "")?);
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(result)
}

fn plot_names(paths: Vec<PathBuf>) -> Vec<String> {
    paths
        .into_iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect()
}

/// Per-step mean over several runs, truncated to the shortest.
pub fn mean_records(runs: &[&[StepRecord]]) -> Vec<StepRecord> {
    let Some(len) = runs.iter().map(|r| r.len()).min() else {
        return Vec::new();
    };
    let n = runs.len() as f64;
    (0..len)
        .map(|i| {
            let avg = |f: fn(&StepRecord) -> f64| runs.iter().map(|r| f(&r[i])).sum::<f64>() / n;
            StepRecord {
                step: runs[0][i].step,
                task_loss: avg(|r| r.task_loss),
                distill_loss: avg(|r| r.distill_loss),
                grad_a: avg(|r| r.grad_a),
                grad_b: avg(|r| r.grad_b),
                s_a: avg(|r| r.s_a),
                s_b: avg(|r| r.s_b),
                entropy_a: avg(|r| r.entropy_a),
                entropy_b: avg(|r| r.entropy_b),
            }
        })
        .collect()
}

/// Seed-averaged traces for one group of a suite.
fn suite_traces(report: &ExperimentReport, group: &str, records_of: &dyn Fn(&CellSpec) -> Result<Vec<StepRecord>>) -> Result<Vec<Trace>> {
    let mut traces = Vec::new();
    for agg in report.group(group) {
        let mut runs = Vec::new();
        for c in report.cells.iter().filter(|c| c.cell.group == group && c.cell.label == agg.label && c.summary.is_some()) {
            runs.push(records_of(&c.cell)?);
        }
        if runs.is_empty() {
            continue;
        }
        let slices: Vec<&[StepRecord]> = runs.iter().map(|r| r.as_slice()).collect();
        traces.push(Trace {
            label: agg.label.clone(),
            records: mean_records(&slices),
            eval: Some(crate::sim::EvalScores {
                both: agg.iou_both.mean,
                a_only: agg.iou_a_only.mean,
                b_only: agg.iou_b_only.mean,
            }),
        });
    }
    Ok(traces)
}

fn render_suite_plots(
    report: &ExperimentReport,
    run_id: &str,
    dir: &Path,
    records_of: &dyn Fn(&CellSpec) -> Result<Vec<StepRecord>>,
) -> Result<Vec<String>> {
    let mut groups: Vec<&str> = Vec::new();
    for a in &report.aggregates {
        if !groups.contains(&a.group.as_str()) {
            groups.push(&a.group);
        }
    }
    let mut names = Vec::new();
    for g in groups {
        let traces = suite_traces(report, g, records_of)?;
        if traces.is_empty() {
            continue;
        }
        let plot = PlotReport {
            run_id: run_id.to_string(),
            window: report.base.bias_window,
            traces,
        };
        names.extend(plot_names(render_plots(&plot, dir, &format!("{g}_"))?));
    }
    Ok(names)
}

fn cell_dir(dir: &Path, cell: &CellSpec) -> PathBuf {
    dir.join(CELLS_DIR).join(cell.slug())
}

/// Runs a full suite; each cell streams into its own directory.
pub fn execute_suite(manifest: &mut ExperimentManifest, dir: &Path) -> Result<ExperimentReport> {
    check_kind(manifest, RunKind::Suite)?;
    manifest.validate()?;
    let spec = manifest
        .suite
        .clone()
        .ok_or_else(|| Error::invalid("suite manifest has no suite specification"))?;
    create_dir(&dir.join(CELLS_DIR))?;
    manifest.outputs = OutputPaths {
        summary: Some(SUMMARY_FILE.into()),
        aggregates: Some(AGGREGATES_FILE.into()),
        report: Some(REPORT_FILE.into()),
        cells_dir: Some(CELLS_DIR.into()),
        ..Default::default()
    };
    manifest.save(&dir.join(MANIFEST_FILE))?;

    let open = |cell: &CellSpec| -> Result<CellObserver> {
        let cdir = cell_dir(dir, cell);
        create_dir(&cdir)?;
        let mut m = JsonlWriter::<StepRecord>::create(&cdir.join(METRICS_FILE))?;
        let mut g = JsonlWriter::<FeatureGradRecord>::create(&cdir.join(FEATURE_GRADS_FILE))?;
        Ok(Box::new(move |r: &StepRecord, f: &FeatureGradRecord| {
            m.append(r)?;
            g.append(f)
        }))
    };
    let report = run_experiment_suite_with(&manifest.run, &manifest.generator, &spec, &open)?;

    let rows: Vec<SummaryRow> = report.cells.iter().map(|c| SummaryRow::from_cell(&manifest.run_id, c)).collect();
    write_csv(&dir.join(SUMMARY_FILE), &rows)?;
    let aggs: Vec<AggregateRow> = report.aggregates.iter().map(|a| AggregateRow::new(&manifest.run_id, a)).collect();
    write_csv(&dir.join(AGGREGATES_FILE), &aggs)?;
    write_json(&dir.join(REPORT_FILE), &report)?;

    let records_of = |cell: &CellSpec| -> Result<Vec<StepRecord>> {
        Ok(report.cells.iter().find(|c| &c.cell == cell).map(|c| c.records.clone()).unwrap_or_default())
    };
    manifest.outputs.plots = render_suite_plots(&report, &manifest.run_id, dir, &records_of)?;
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(report)
}

/// The samples a `gen-data` manifest describes.
pub fn generate_samples(manifest: &ExperimentManifest) -> Result<Vec<SyntheticSample>> {
    let n = manifest.sample_count.unwrap_or(0);
    (0..n as u64)
        .map(|i| gen_sample(&manifest.generator, derive_seed(&[manifest.run.seed, i])))
        .collect()
}

pub fn execute_gen_data(manifest: &mut ExperimentManifest, dir: &Path) -> Result<Vec<SyntheticSample>> {
    check_kind(manifest, RunKind::GenData)?;
    manifest.generator.validate()?;
    let samples = generate_samples(manifest)?;
    create_dir(dir)?;
    write_jsonl(&dir.join(SAMPLES_FILE), &samples)?;
    manifest.outputs = OutputPaths {
        samples: Some(SAMPLES_FILE.into()),
        ..Default::default()
    };
    if !samples.is_empty() {
        let path = dir.join(plot::PREVIEW_FILE);
        fs::write(&path, plot::sample_preview(&samples, &manifest.run_id)?).map_err(|e| Error::io(&path, e))?;
        manifest.outputs.plots = vec![plot::PREVIEW_FILE.into()];
    }
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(samples)
}

/// Re-renders the plots of a finished run from its files.
pub fn render_run(dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = ExperimentManifest::load(&dir.join(MANIFEST_FILE))?;
    match manifest.kind {
        RunKind::Train => {
            let records: Vec<StepRecord> = read_jsonl(&dir.join(METRICS_FILE))?;
            let rows: Vec<SummaryRow> = read_csv(&dir.join(SUMMARY_FILE))?;
            let report = PlotReport {
                run_id: manifest.run_id.clone(),
                window: manifest.run.bias_window,
                traces: vec![Trace {
                    label: train_label(&manifest),
                    records,
                    eval: rows.first().and_then(|r| r.eval()),
                }],
            };
            render_plots(&report, dir, "")
        }
        RunKind::Suite => {
            let text = fs::read_to_string(dir.join(REPORT_FILE)).map_err(|e| Error::io(dir.join(REPORT_FILE), e))?;
            let report: ExperimentReport = serde_json::from_str(&text)?;
            let records_of = |cell: &CellSpec| read_jsonl::<StepRecord>(&cell_dir(dir, cell).join(METRICS_FILE));
            let names = render_suite_plots(&report, &manifest.run_id, dir, &records_of)?;
            if names.is_empty() {
                return Err(Error::invalid("suite report has nothing to plot"));
            }
            Ok(names.into_iter().map(|n| dir.join(n)).collect())
        }
        RunKind::GenData => {
            let samples: Vec<SyntheticSample> = read_jsonl(&dir.join(SAMPLES_FILE))?;
            let path = dir.join(plot::PREVIEW_FILE);
            fs::write(&path, plot::sample_preview(&samples, &manifest.run_id)?).map_err(|e| Error::io(&path, e))?;
            Ok(vec![path])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{AblationRow, GeneratorConfig, RunConfig, SuiteSpec};

    fn quick_run() -> RunConfig {
        RunConfig {
            steps: 12,
            eval_samples: 4,
            bias_window: 5,
            ..RunConfig::full()
        }
    }

    #[test]
    fn train_writes_every_artifact() {
        let tmp = tempfile::tempdir().unwrap();
        let mut m = ExperimentManifest::new(RunKind::Train, quick_run(), GeneratorConfig::a_dominant(), None, None).unwrap();
        let dir = run_dir(tmp.path(), &m);
        let res = execute_train(&mut m, &dir).unwrap();
        let recs: Vec<StepRecord> = read_jsonl(&dir.join(METRICS_FILE)).unwrap();
        assert_eq!(recs, res.records);
        let fg: Vec<FeatureGradRecord> = read_jsonl(&dir.join(FEATURE_GRADS_FILE)).unwrap();
        assert_eq!(fg.len(), 12);
        let rows: Vec<SummaryRow> = read_csv(&dir.join(SUMMARY_FILE)).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].run_id, m.run_id);
        assert_eq!(m.outputs.plots.len(), 3);
        for p in &m.outputs.plots {
            assert!(fs::read_to_string(dir.join(p)).unwrap().contains(&m.run_id));
        }
        assert_eq!(ExperimentManifest::load(&dir.join(MANIFEST_FILE)).unwrap(), m);
        assert_eq!(render_run(&dir).unwrap().len(), 3);
    }

    #[test]
    fn replay_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let mut m = ExperimentManifest::new(RunKind::Train, quick_run(), GeneratorConfig::a_dominant(), None, None).unwrap();
        let first = tmp.path().join("one");
        execute_train(&mut m, &first).unwrap();
        let mut again = ExperimentManifest::load(&first.join(MANIFEST_FILE)).unwrap();
        let second = tmp.path().join("two");
        execute_train(&mut again, &second).unwrap();
        for f in [METRICS_FILE, FEATURE_GRADS_FILE, SUMMARY_FILE, MANIFEST_FILE] {
            assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn zero_steps_gives_empty_metrics() {
        let tmp = tempfile::tempdir().unwrap();
        let run = RunConfig {
            steps: 0,
            ..quick_run()
        };
        let mut m = ExperimentManifest::new(RunKind::Train, run, GeneratorConfig::a_dominant(), None, None).unwrap();
        let dir = run_dir(tmp.path(), &m);
        execute_train(&mut m, &dir).unwrap();
        assert_eq!(fs::read(dir.join(METRICS_FILE)).unwrap().len(), 0);
        assert!(dir.join(MANIFEST_FILE).exists());
    }

    #[test]
    fn suite_writes_per_cell_files() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SuiteSpec {
            grad_boost: vec![1.0, 3.0],
            ablation: vec![AblationRow::standard()[0].clone()],
            seeds: vec![0, 1],
            ..Default::default()
        };
        let mut m =
            ExperimentManifest::new(RunKind::Suite, quick_run(), GeneratorConfig::a_dominant(), Some(spec), None).unwrap();
        let dir = run_dir(tmp.path(), &m);
        let report = execute_suite(&mut m, &dir).unwrap();
        assert_eq!(report.cells.len(), 6);
        for c in &report.cells {
            let recs: Vec<StepRecord> = read_jsonl(&cell_dir(&dir, &c.cell).join(METRICS_FILE)).unwrap();
            assert_eq!(recs, c.records);
        }
        let rows: Vec<SummaryRow> = read_csv(&dir.join(SUMMARY_FILE)).unwrap();
        assert_eq!(rows.len(), 6);
        let aggs: Vec<AggregateRow> = read_csv(&dir.join(AGGREGATES_FILE)).unwrap();
        assert_eq!(aggs.len(), 3);
        assert_eq!(m.outputs.plots.len(), 6);
        let rerendered = render_run(&dir).unwrap();
        assert_eq!(rerendered.len(), 6);
        let svg = fs::read_to_string(dir.join("grad_boost_gradient_bias.svg")).unwrap();
        assert_eq!(svg.matches("class=\"legend-entry\"").count(), 2);
    }

    #[test]
    fn gen_data_is_deterministic() {
        let tmp = tempfile::tempdir().unwrap();
        let mut m = ExperimentManifest::new(RunKind::GenData, RunConfig::default(), GeneratorConfig::a_dominant(), None, Some(3))
            .unwrap();
        let dir = run_dir(tmp.path(), &m);
        let a = execute_gen_data(&mut m, &dir).unwrap();
        assert_eq!(a, generate_samples(&m).unwrap());
        assert_eq!(read_jsonl::<SyntheticSample>(&dir.join(SAMPLES_FILE)).unwrap(), a);
        assert!(dir.join(plot::PREVIEW_FILE).exists());
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let mut m = ExperimentManifest::new(RunKind::Train, quick_run(), GeneratorConfig::a_dominant(), None, None).unwrap();
        assert!(execute_suite(&mut m, tmp.path()).is_err());
    }

    #[test]
    fn mean_records_oracle() {
        let r = |a: f64| StepRecord {
            step: 0,
            task_loss: a,
            distill_loss: 0.0,
            grad_a: a,
            grad_b: 2.0 * a,
            s_a: 0.5,
            s_b: 0.5,
            entropy_a: 0.0,
            entropy_b: 0.0,
        };
        let x = [r(1.0), r(2.0)];
        let y = [r(3.0)];
        let m = mean_records(&[&x, &y]);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].grad_a, 2.0);
        assert_eq!(m[0].grad_b, 4.0);
        assert!(mean_records(&[]).is_empty());
    }
}
