//! Metrics, mean baselines, the density protocol and parameter sweeps.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{filter_outliers, split_by_density, Metadata, Observation, QosMatrix, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::model::{self, npe_label, EntityFeatures, ModelDims, RahnModel, TrainReport};
use crate::rcm::{compute_reputations, ReputationTable};

/// Published RAHN scores on WS-DREAM response time, as `(density, mae, rmse)`.
pub const REFERENCE_SCORES: [(f64, f64, f64); 5] = [
    (0.02, 0.156, 0.366),
    (0.04, 0.134, 0.348),
    (0.06, 0.125, 0.343),
    (0.08, 0.118, 0.337),
    (0.10, 0.115, 0.335),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
}

fn metrics_from_residuals(residuals: impl Iterator<Item = f64>) -> Result<Metrics> {
    let (mut n, mut abs, mut sq) = (0usize, 0.0, 0.0);
    for r in residuals {
        n += 1;
        abs += r.abs();
        sq += r * r;
    }
    if n == 0 {
        return Err(Error::Validation("metrics over an empty entry set".into()));
    }
    Ok(Metrics {
        mae: abs / n as f64,
        rmse: (sq / n as f64).sqrt(),
    })
}

/// MAE and RMSE over two observation lists covering the same entries.
pub fn mae_rmse(truth: &[Observation], pred: &[Observation]) -> Result<Metrics> {
    if truth.len() != pred.len() {
        return Err(Error::Validation(format!(
            "entry sets differ: {} truth vs {} predicted",
            truth.len(),
            pred.len()
        )));
    }
    let mut t: Vec<&Observation> = truth.iter().collect();
    let mut p: Vec<&Observation> = pred.iter().collect();
    t.sort_by_key(|o| o.key());
    p.sort_by_key(|o| o.key());
    if let Some((a, b)) = t.iter().zip(&p).find(|(a, b)| a.key() != b.key()) {
        return Err(Error::Validation(format!(
            "entry sets differ at {:?} vs {:?}",
            a.key(),
            b.key()
        )));
    }
    if t.windows(2).any(|w| w[0].key() == w[1].key()) {
        return Err(Error::Validation("duplicate entries in truth".into()));
    }
    metrics_from_residuals(t.iter().zip(&p).map(|(a, b)| a.value - b.value))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    GlobalMean,
    UserMean,
    ServiceMean,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [
        BaselineKind::GlobalMean,
        BaselineKind::UserMean,
        BaselineKind::ServiceMean,
    ];
}

/// Mean of the training values over a scope, with the global mean for
/// entities that have no training value.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselinePredictor {
    pub kind: BaselineKind,
    pub global_mean: f64,
    pub entity_means: Vec<Option<f64>>,
}

impl BaselinePredictor {
    pub fn fit(train: &QosMatrix, kind: BaselineKind) -> Result<Self> {
        let global_mean = train
            .mean()
            .ok_or_else(|| Error::Validation("baseline needs training entries".into()))?;
        let (n, pick): (usize, fn(&Observation) -> usize) = match kind {
            BaselineKind::GlobalMean => (0, |_| 0),
            BaselineKind::UserMean => (train.n_users(), |o| o.user),
            BaselineKind::ServiceMean => (train.n_services(), |o| o.service),
        };
        let mut sums = vec![(0.0, 0usize); n];
        if n > 0 {
            for o in train.entries() {
                let s = &mut sums[pick(o)];
                s.0 += o.value;
                s.1 += 1;
            }
        }
        Ok(BaselinePredictor {
            kind,
            global_mean,
            entity_means: sums
                .into_iter()
                .map(|(s, c)| (c > 0).then(|| s / c as f64))
                .collect(),
        })
    }

    pub fn predict(&self, user: usize, service: usize) -> f64 {
        let idx = match self.kind {
            BaselineKind::GlobalMean => return self.global_mean,
            BaselineKind::UserMean => user,
            BaselineKind::ServiceMean => service,
        };
        self.entity_means
            .get(idx)
            .copied()
            .flatten()
            .unwrap_or(self.global_mean)
    }
}

pub fn baseline_fit_predict(train: &QosMatrix, test: &[Observation], kind: BaselineKind) -> Result<Vec<Observation>> {
    let b = BaselinePredictor::fit(train, kind)?;
    Ok(test
        .iter()
        .map(|o| Observation::new(o.user, o.service, b.predict(o.user, o.service)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScore {
    pub kind: BaselineKind,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScore {
    pub mae: f64,
    pub rmse: f64,
}

/// The published score for `density`, when one exists.
pub fn reference_score(density: f64) -> Option<ReferenceScore> {
    REFERENCE_SCORES
        .iter()
        .find(|(d, _, _)| (d - density).abs() < 1e-9)
        .map(|&(_, mae, rmse)| ReferenceScore { mae, rmse })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub npe_label: String,
    pub density: f64,
    pub seed: u64,
    pub mae: f64,
    pub rmse: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_removed_outliers: usize,
    pub n_evaluated: usize,
    pub baselines: Vec<BaselineScore>,
    pub reference: Option<ReferenceScore>,
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn baseline(&self, kind: BaselineKind) -> Option<&BaselineScore> {
        self.baselines.iter().find(|b| b.kind == kind)
    }

    /// One table row: label, density, MAE, RMSE and the published pair.
    pub fn table_row(&self) -> String {
        let reference = match self.reference {
            Some(r) => format!("{:.3} / {:.3}", r.mae, r.rmse),
            None => "-".into(),
        };
        format!(
            "NPEd={}  MD={:>4.1}%  MAE={:.4}  RMSE={:.4}  (published {})",
            self.npe_label,
            self.density * 100.0,
            self.mae,
            self.rmse,
            reference
        )
    }
}

/// The dataset a run works on.
#[derive(Debug, Clone, Copy)]
pub struct ExperimentInputs<'a> {
    pub matrix: &'a QosMatrix,
    pub users: &'a Metadata,
    pub services: &'a Metadata,
}

impl ExperimentInputs<'_> {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            n_users: self.matrix.n_users(),
            n_services: self.matrix.n_services(),
            n_user_regions: self.users.vocab_size(),
            n_service_regions: self.services.vocab_size(),
        }
    }

    pub fn features(&self, reputations: &ReputationTable) -> EntityFeatures {
        EntityFeatures {
            user_reputation: reputations.user_values(),
            service_reputation: reputations.service_values(),
            user_region: self.users.region_indices(self.matrix.n_users()),
            service_region: self.services.region_indices(self.matrix.n_services()),
        }
    }
}

/// Scores on the outlier-filtered test set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub n_test: usize,
    pub n_removed_outliers: usize,
    pub n_evaluated: usize,
    pub baselines: Vec<BaselineScore>,
}

/// Predicts every test entry, drops the outliers and scores the model and
/// the mean baselines on the same retained entries.
pub fn evaluate_split(model: &RahnModel, features: &EntityFeatures, split: &Split, outlier_fraction: f64) -> Result<Evaluation> {
    let filtered = filter_outliers(&split.test, &split.train, outlier_fraction)
        .map_err(|e| e.in_stage("outlier-filter"))?;
    let kept = filtered.retained.entries();
    let predictions = model
        .predict(&features.samples(&filtered.retained))
        .map_err(|e| e.in_stage("predict"))?;
    let pred: Vec<Observation> = kept
        .iter()
        .zip(&predictions)
        .map(|(o, &p)| Observation::new(o.user, o.service, p))
        .collect();
    let score = |pred: &[Observation]| mae_rmse(kept, pred).map_err(|e| e.in_stage("metrics"));
    let metrics = score(&pred)?;
    let mut baselines = Vec::with_capacity(3);
    for kind in BaselineKind::ALL {
        let p = baseline_fit_predict(&split.train, kept, kind).map_err(|e| e.in_stage("baseline"))?;
        let m = score(&p)?;
        baselines.push(BaselineScore {
            kind,
            mae: m.mae,
            rmse: m.rmse,
        });
    }
    Ok(Evaluation {
        metrics,
        n_test: split.test.len(),
        n_removed_outliers: filtered.removed.len(),
        n_evaluated: kept.len(),
        baselines,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: MetricReport,
    pub split: Split,
    pub reputations: ReputationTable,
    pub model: RahnModel,
    pub training: TrainReport,
}

/// Split, reputations from the training matrix, training, prediction,
/// outlier filtering and scoring at one density.
pub fn run_experiment(inputs: ExperimentInputs<'_>, config: &ExperimentConfig, density: f64) -> Result<ExperimentOutcome> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    let seed = config.seed();
    let split = split_by_density(inputs.matrix, SplitSpec { density, seed }).map_err(|e| e.in_stage("split"))?;
    let reputations =
        compute_reputations(&split.train, &config.rcm_config()).map_err(|e| e.in_stage("reputation"))?;
    let features = inputs.features(&reputations);
    let mut model = RahnModel::new(config.model_config(), inputs.dims()).map_err(|e| e.in_stage("train"))?;
    let training = model::train(&mut model, &features.samples(&split.train), None)
        .map_err(|e| e.in_stage("train"))?;
    let eval = evaluate_split(&model, &features, &split, config.protocol.outlier_fraction)?;
    let report = metric_report(config, density, split.train.len(), eval);
    log::info!("{}", report.table_row());
    Ok(ExperimentOutcome {
        report,
        split,
        reputations,
        model,
        training,
    })
}

pub fn metric_report(config: &ExperimentConfig, density: f64, n_train: usize, eval: Evaluation) -> MetricReport {
    MetricReport {
        npe_label: config.model.npe_label(),
        density,
        seed: config.seed(),
        mae: eval.metrics.mae,
        rmse: eval.metrics.rmse,
        n_train,
        n_test: eval.n_test,
        n_removed_outliers: eval.n_removed_outliers,
        n_evaluated: eval.n_evaluated,
        baselines: eval.baselines,
        reference: reference_score(density),
        config: config.to_value(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub n_stack: Vec<usize>,
    pub use_pe: Vec<bool>,
    pub d: Vec<usize>,
    pub densities: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            n_stack: vec![0, 1, 2],
            use_pe: vec![false, true],
            d: vec![8],
            densities: vec![0.02, 0.04],
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        let empty: Vec<&str> = [
            ("n_stack", self.n_stack.is_empty()),
            ("use_pe", self.use_pe.is_empty()),
            ("d", self.d.is_empty()),
            ("densities", self.densities.is_empty()),
        ]
        .iter()
        .filter(|(_, e)| *e)
        .map(|(n, _)| *n)
        .collect();
        if empty.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("empty sweep axis: {}", empty.join(", "))))
        }
    }

    pub fn len(&self) -> usize {
        self.n_stack.len() * self.use_pe.len() * self.d.len() * self.densities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub npe_label: String,
    pub n_stack: usize,
    pub use_pe: bool,
    pub d: usize,
    pub density: f64,
    pub seed: u64,
    pub wall_seconds: f64,
    /// The report, or the error message of a failed cell.
    pub outcome: std::result::Result<MetricReport, String>,
}

/// Runs every grid cell with the base config's seed. Cell failures are
/// recorded, not propagated.
pub fn sweep(inputs: ExperimentInputs<'_>, base: &ExperimentConfig, grid: &SweepGrid) -> Result<Vec<SweepCell>> {
    grid.validate()?;
    let mut cells = Vec::with_capacity(grid.len());
    for &density in &grid.densities {
        for &d in &grid.d {
            for &n_stack in &grid.n_stack {
                for &use_pe in &grid.use_pe {
                    let mut config = base.clone();
                    config.model.d = d;
                    config.model.n_stack = n_stack;
                    config.model.use_pe = use_pe;
                    config.protocol.densities = vec![density];
                    let label = npe_label(n_stack, use_pe, d);
                    let start = Instant::now();
                    let outcome = run_experiment(inputs, &config, density)
                        .map(|o| o.report)
                        .map_err(|e| e.to_string());
                    if let Err(e) = &outcome {
                        log::warn!("sweep cell {label} at density {density} failed: {e}");
                    }
                    cells.push(SweepCell {
                        npe_label: label,
                        n_stack,
                        use_pe,
                        d,
                        density,
                        seed: config.seed(),
                        wall_seconds: start.elapsed().as_secs_f64(),
                        outcome,
                    });
                }
            }
        }
    }
    Ok(cells)
}

/// Long-format CSV; failed cells leave the metric columns empty.
pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("npe_label,density,mae,rmse,n_test,n_removed,seed,wall_seconds\n");
    for c in cells {
        let metrics = match &c.outcome {
            Ok(r) => format!("{},{},{},{}", r.mae, r.rmse, r.n_test, r.n_removed_outliers),
            Err(_) => ",,,".into(),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{:.3}",
            c.npe_label, c.density, metrics, c.seed, c.wall_seconds
        );
    }
    out
}

/// Whether the deepest stack beats `N = 0` for one (density, d, PE) slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub density: f64,
    pub d: usize,
    pub use_pe: bool,
    pub shallow_n: usize,
    pub deep_n: usize,
    pub shallow_mae: f64,
    pub deep_mae: f64,
    pub passed: bool,
}

/// Depth trend per slice. Reported only; single-seed trends are noisy.
pub fn depth_trends(cells: &[SweepCell]) -> Vec<TrendCheck> {
    let mut out = Vec::new();
    for c in cells {
        let Ok(shallow) = &c.outcome else { continue };
        if c.n_stack != 0 {
            continue;
        }
        let deepest = cells
            .iter()
            .filter(|o| o.density == c.density && o.d == c.d && o.use_pe == c.use_pe && o.n_stack > 0)
            .filter_map(|o| o.outcome.as_ref().ok().map(|r| (o.n_stack, r)))
            .max_by_key(|(n, _)| *n);
        if let Some((deep_n, deep)) = deepest {
            out.push(TrendCheck {
                density: c.density,
                d: c.d,
                use_pe: c.use_pe,
                shallow_n: 0,
                deep_n,
                shallow_mae: shallow.mae,
                deep_mae: deep.mae,
                passed: deep.mae <= shallow.mae,
            });
        }
    }
    out
}
