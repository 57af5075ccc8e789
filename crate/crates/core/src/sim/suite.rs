//! Multi-configuration, multi-seed experiment runner.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::WeightingStrategy;

use super::config::RunConfig;
use super::data::{derive_seed, gen_sample, GeneratorConfig, SyntheticSample};
use super::model::ToyModel;
use super::train::{
    eval_restricted, gradient_bias, train, windowed_bias, EvalMode, FeatureGradRecord, StepRecord, SyntheticStream,
};

const MODEL_STREAM: u64 = 1;
const DATA_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub both: f64,
    pub a_only: f64,
    pub b_only: f64,
}

impl EvalScores {
    pub fn get(&self, mode: EvalMode) -> f64 {
        match mode {
            EvalMode::Both => self.both,
            EvalMode::AOnly => self.a_only,
            EvalMode::BOnly => self.b_only,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub records: Vec<StepRecord>,
    pub feature_grads: Vec<FeatureGradRecord>,
    pub model: ToyModel,
    pub summary: RunSummary,
}

/// Scalar outcome of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    /// Mean task loss over the final bias window; `None` for an empty run.
    pub final_task_loss: Option<f64>,
    pub gradient_bias: Option<f64>,
    pub eval: EvalScores,
    /// Per-window gradient bias.
    pub bias_curve: Vec<f64>,
    /// Per-window mean gradient contribution of each branch.
    pub grad_curve_a: Vec<f64>,
    pub grad_curve_b: Vec<f64>,
}

/// The held-out evaluation set for `run`.
pub fn eval_set(run: &RunConfig, generator: &GeneratorConfig) -> Result<Vec<SyntheticSample>> {
    (0..run.eval_samples)
        .map(|i| gen_sample(generator, derive_seed(&[run.seed, EVAL_STREAM, i as u64])))
        .collect()
}

fn window_means(records: &[StepRecord], window: usize, f: impl Fn(&StepRecord) -> f64) -> Vec<f64> {
    records
        .chunks(window)
        .map(|c| c.iter().map(&f).sum::<f64>() / c.len() as f64)
        .collect()
}

/// Model initialisation, data stream and evaluation set all derive from `run.seed`.
pub fn run_single(
    run: &RunConfig,
    generator: &GeneratorConfig,
    observer: impl FnMut(&StepRecord, &FeatureGradRecord) -> Result<()>,
) -> Result<RunResult> {
    run.validate()?;
    generator.validate()?;
    let model = ToyModel::init(run.model, derive_seed(&[run.seed, MODEL_STREAM]), false)?;
    let stream = SyntheticStream {
        generator: generator.clone(),
        seed: derive_seed(&[run.seed, DATA_STREAM]),
    };
    let outcome = train(model, &stream, run, observer)?;
    let eval_samples = eval_set(run, generator)?;
    let eval = if eval_samples.is_empty() {
        EvalScores::default()
    } else {
        EvalScores {
            both: eval_restricted(&outcome.model, &eval_samples, EvalMode::Both, run)?,
            a_only: eval_restricted(&outcome.model, &eval_samples, EvalMode::AOnly, run)?,
            b_only: eval_restricted(&outcome.model, &eval_samples, EvalMode::BOnly, run)?,
        }
    };
    let records = outcome.records;
    let w = run.bias_window;
    let (final_task_loss, gradient_bias, bias_curve) = if records.is_empty() {
        (None, None, Vec::new())
    } else {
        let tail = &records[records.len().saturating_sub(w)..];
        (
            Some(tail.iter().map(|r| r.task_loss).sum::<f64>() / tail.len() as f64),
            Some(gradient_bias(&records, w)?),
            windowed_bias(&records, w)?,
        )
    };
    let summary = RunSummary {
        steps: records.len(),
        final_task_loss,
        gradient_bias,
        eval,
        bias_curve,
        grad_curve_a: window_means(&records, w, |r| r.grad_a),
        grad_curve_b: window_means(&records, w, |r| r.grad_b),
    };
    Ok(RunResult {
        records,
        feature_grads: outcome.feature_grads,
        model: outcome.model,
        summary,
    })
}

/// One row of the component ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub mdi: bool,
    pub hcg_low: bool,
    pub hcg_high: bool,
    pub miw: bool,
}

impl AblationRow {
    pub fn new(name: &str, mdi: bool, hcg_low: bool, hcg_high: bool, miw: bool) -> Self {
        Self {
            name: name.to_string(),
            mdi,
            hcg_low,
            hcg_high,
            miw,
        }
    }

    /// Baseline, each component added on top of MDI, and everything.
    pub fn standard() -> Vec<Self> {
        vec![
            Self::new("baseline", false, false, false, false),
            Self::new("mdi+hcg_low", true, true, false, false),
            Self::new("mdi+hcg_high", true, false, true, false),
            Self::new("mdi+hcg", true, true, true, false),
            Self::new("mdi+miw", true, false, false, true),
            Self::new("full", true, true, true, true),
        ]
    }

    pub fn is_baseline(&self) -> bool {
        !(self.mdi || self.hcg_low || self.hcg_high || self.miw)
    }

    pub fn is_full(&self) -> bool {
        self.mdi && self.hcg_low && self.hcg_high && self.miw
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub grad_boost: Vec<f64>,
    pub weighting: Vec<WeightingStrategy>,
    pub ablation: Vec<AblationRow>,
    pub seeds: Vec<u64>,
}

impl SuiteSpec {
    /// `0..n` as the seed list.
    pub fn seeds(n: usize) -> Vec<u64> {
        (0..n as u64).collect()
    }
}

pub const GROUP_GRAD_BOOST: &str = "grad_boost";
pub const GROUP_WEIGHTING: &str = "weighting";
pub const GROUP_ABLATION: &str = "ablation";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub group: String,
    pub label: String,
    pub seed: u64,
    pub config: RunConfig,
}

impl CellSpec {
    /// Filesystem-friendly identifier, unique within a suite.
    pub fn slug(&self) -> String {
        let label: String = self
            .label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
            .collect();
        format!("{}-{}-seed{}", self.group, label, self.seed)
    }
}

/// Expands the suite into `(configuration x seed)` cells in a fixed order.
///
/// Weighting cells switch MDI on (the strategies only differ when scores are
/// unbalanced) and MIW off (it would override the strategy).
pub fn expand_cells(base: &RunConfig, spec: &SuiteSpec) -> Result<Vec<CellSpec>> {
    if spec.seeds.is_empty() {
        return Err(Error::invalid("suite needs at least one seed"));
    }
    let mut configs: Vec<(String, String, RunConfig)> = Vec::new();
    for &lambda in &spec.grad_boost {
        let c = RunConfig {
            grad_boost_lambda: lambda,
            ..base.clone()
        };
        configs.push((GROUP_GRAD_BOOST.into(), format!("lambda={lambda}"), c));
    }
    for &s in &spec.weighting {
        let c = RunConfig {
            strategy: s,
            enable_mdi: true,
            enable_miw: false,
            ..base.clone()
        };
        configs.push((GROUP_WEIGHTING.into(), s.to_string(), c));
    }
    for row in &spec.ablation {
        let c = base.clone().with_components(row.mdi, row.hcg_low, row.hcg_high, row.miw);
        configs.push((GROUP_ABLATION.into(), row.name.clone(), c));
    }
    if configs.is_empty() {
        return Err(Error::invalid("suite has no configurations"));
    }
    let mut cells = Vec::with_capacity(configs.len() * spec.seeds.len());
    for (group, label, config) in configs {
        config.validate()?;
        for &seed in &spec.seeds {
            cells.push(CellSpec {
                group: group.clone(),
                label: label.clone(),
                seed,
                config: RunConfig {
                    seed,
                    ..config.clone()
                },
            });
        }
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: CellSpec,
    /// Error message of a failed cell.
    pub error: Option<String>,
    pub summary: Option<RunSummary>,
    #[serde(skip)]
    pub records: Vec<StepRecord>,
    #[serde(skip)]
    pub feature_grads: Vec<FeatureGradRecord>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
    /// Standard error of the mean.
    pub se: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            n,
            mean,
            std,
            se: std / (n as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub group: String,
    pub label: String,
    pub failed: usize,
    pub gradient_bias: Stat,
    pub final_task_loss: Stat,
    pub iou_both: Stat,
    pub iou_a_only: Stat,
    pub iou_b_only: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub base: RunConfig,
    pub generator: GeneratorConfig,
    pub spec: SuiteSpec,
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<Aggregate>,
}

impl ExperimentReport {
    pub fn aggregate(&self, group: &str, label: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.group == group && a.label == label)
    }

    pub fn group(&self, group: &str) -> Vec<&Aggregate> {
        self.aggregates.iter().filter(|a| a.group == group).collect()
    }
}

fn aggregate(cells: &[CellResult]) -> Vec<Aggregate> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for c in cells {
        let k = (c.cell.group.clone(), c.cell.label.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(group, label)| {
            let mine: Vec<&CellResult> = cells
                .iter()
                .filter(|c| c.cell.group == group && c.cell.label == label)
                .collect();
            let ok: Vec<&RunSummary> = mine.iter().filter_map(|c| c.summary.as_ref()).collect();
            let collect = |f: &dyn Fn(&RunSummary) -> Option<f64>| -> Stat {
                Stat::of(&ok.iter().filter_map(|s| f(s)).collect::<Vec<_>>())
            };
            Aggregate {
                failed: mine.len() - ok.len(),
                gradient_bias: collect(&|s| s.gradient_bias),
                final_task_loss: collect(&|s| s.final_task_loss),
                iou_both: collect(&|s| Some(s.eval.both)),
                iou_a_only: collect(&|s| Some(s.eval.a_only)),
                iou_b_only: collect(&|s| Some(s.eval.b_only)),
                group,
                label,
            }
        })
        .collect()
}

/// Per-step callback handed to one cell.
pub type CellObserver = Box<dyn FnMut(&StepRecord, &FeatureGradRecord) -> Result<()> + Send>;

/// Runs every cell (in parallel) and aggregates over seeds.
///
/// A failing cell is recorded with its error; the others still run.
/// `open_observer` is called once per cell before it starts.
pub fn run_experiment_suite_with(
    base: &RunConfig,
    generator: &GeneratorConfig,
    spec: &SuiteSpec,
    open_observer: &(dyn Fn(&CellSpec) -> Result<CellObserver> + Sync),
) -> Result<ExperimentReport> {
    let cells = expand_cells(base, spec)?;
    generator.validate()?;
    let results: Vec<CellResult> = cells
        .into_par_iter()
        .map(|cell| {
            let outcome = open_observer(&cell).and_then(|obs| run_single(&cell.config, generator, obs));
            match outcome {
                Ok(r) => CellResult {
                    cell,
                    error: None,
                    summary: Some(r.summary),
                    records: r.records,
                    feature_grads: r.feature_grads,
                },
                Err(e) => CellResult {
                    cell,
                    error: Some(e.to_string()),
                    summary: None,
                    records: Vec::new(),
                    feature_grads: Vec::new(),
                },
            }
        })
        .collect();
    Ok(ExperimentReport {
        base: base.clone(),
        generator: generator.clone(),
        spec: spec.clone(),
        aggregates: aggregate(&results),
        cells: results,
    })
}

pub fn run_experiment_suite(base: &RunConfig, generator: &GeneratorConfig, spec: &SuiteSpec) -> Result<ExperimentReport> {
    run_experiment_suite_with(base, generator, spec, &|_| Ok(Box::new(|_, _| Ok(()))))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> RunConfig {
        RunConfig {
            steps: 30,
            eval_samples: 4,
            bias_window: 10,
            ..RunConfig::default()
        }
    }

    #[test]
    fn stat_values() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((s.se - s.std / 2.0).abs() < 1e-15);
        assert_eq!(Stat::of(&[7.0]).std, 0.0);
        assert_eq!(Stat::of(&[]).n, 0);
    }

    #[test]
    fn single_cell_reduces_to_one_run() {
        let spec = SuiteSpec {
            grad_boost: vec![1.0],
            seeds: vec![4],
            ..SuiteSpec::default()
        };
        let report = run_experiment_suite(&quick(), &GeneratorConfig::a_dominant(), &spec).unwrap();
        assert_eq!(report.cells.len(), 1);
        let direct = run_single(
            &RunConfig { seed: 4, ..quick() },
            &GeneratorConfig::a_dominant(),
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(report.cells[0].records, direct.records);
        assert_eq!(report.cells[0].summary.as_ref(), Some(&direct.summary));
        let agg = &report.aggregates[0];
        assert_eq!(agg.iou_both.mean, direct.summary.eval.both);
        assert_eq!(agg.iou_both.std, 0.0);
    }

    #[test]
    fn lambda_cells_share_data() {
        let spec = SuiteSpec {
            grad_boost: vec![1.0, 3.0, 5.0],
            seeds: vec![0, 1],
            ..SuiteSpec::default()
        };
        let cells = expand_cells(&quick(), &spec).unwrap();
        assert_eq!(cells.len(), 6);
        let report = run_experiment_suite(&quick(), &GeneratorConfig::a_dominant(), &spec).unwrap();
        // Same seed -> same first batch -> same step-0 loss across lambdas.
        for seed in [0, 1] {
            let first: Vec<f64> = report
                .cells
                .iter()
                .filter(|c| c.cell.seed == seed)
                .map(|c| c.records[0].task_loss)
                .collect();
            assert_eq!(first.len(), 3);
            assert!(first.iter().all(|&l| l == first[0]));
        }
        assert_eq!(report.aggregates.len(), 3);
    }

    #[test]
    fn weighting_cells_force_mdi() {
        let spec = SuiteSpec {
            weighting: WeightingStrategy::ALL.to_vec(),
            seeds: SuiteSpec::seeds(5),
            ..SuiteSpec::default()
        };
        let cells = expand_cells(&RunConfig::full(), &spec).unwrap();
        assert_eq!(cells.len(), 15);
        assert!(cells.iter().all(|c| c.config.enable_mdi && !c.config.enable_miw));
    }

    #[test]
    fn failed_cell_does_not_abort_others() {
        let spec = SuiteSpec {
            grad_boost: vec![1.0, 2.0],
            seeds: vec![0],
            ..SuiteSpec::default()
        };
        let report = run_experiment_suite_with(&quick(), &GeneratorConfig::a_dominant(), &spec, &|cell| {
            if cell.config.grad_boost_lambda == 2.0 {
                Err(Error::invalid("boom"))
            } else {
                Ok(Box::new(|_, _| Ok(())))
            }
        })
        .unwrap();
        assert!(report.cells[0].error.is_none());
        assert!(report.cells[1].error.as_deref().unwrap().contains("boom"));
        assert_eq!(report.aggregates[1].failed, 1);
    }

    #[test]
    fn empty_suite_errors() {
        assert!(expand_cells(&quick(), &SuiteSpec::default()).is_err());
        let no_seeds = SuiteSpec {
            grad_boost: vec![1.0],
            ..SuiteSpec::default()
        };
        assert!(expand_cells(&quick(), &no_seeds).is_err());
    }

    #[test]
    fn slugs_are_unique() {
        let spec = SuiteSpec {
            grad_boost: vec![1.0, 3.0],
            weighting: WeightingStrategy::ALL.to_vec(),
            ablation: AblationRow::standard(),
            seeds: vec![0, 1],
        };
        let cells = expand_cells(&quick(), &spec).unwrap();
        let mut slugs: Vec<String> = cells.iter().map(|c| c.slug()).collect();
        slugs.sort();
        slugs.dedup();
        assert_eq!(slugs.len(), cells.len());
    }

    #[test]
    fn zero_step_run_is_valid() {
        let r = run_single(&RunConfig { steps: 0, ..quick() }, &GeneratorConfig::a_dominant(), |_, _| Ok(())).unwrap();
        assert!(r.records.is_empty());
        assert_eq!(r.summary.gradient_bias, None);
    }
}
