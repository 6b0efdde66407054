use std::path::{Path, PathBuf};
use std::time::Instant;

use rahn::config::ExperimentConfig;
use rahn::data::{load_matrix, load_metadata, split_by_density, EntityKind, Metadata, QosMatrix, SplitSpec};
use rahn::eval::{
    depth_trends, evaluate_split, metric_report, run_experiment, sweep, sweep_csv, ExperimentInputs, MetricReport,
    SweepCell, SweepGrid, TrendCheck,
};
use rahn::fixture::{generate, FixtureSpec};
use rahn::model::{ModelDims, RahnModel, TrainReport};
use rahn::rcm::{compute_reputations, KindSummary, ReputationTable};
use rahn::tensor::{read_checkpoint, Checkpoint};
use rahn::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::output::{to_json, write_all};
use crate::{
    FixtureArgs, CHECKPOINT, EVALUATION, REPUTATIONS_CSV, REPUTATION_SUMMARY, SWEEP_CSV, SWEEP_SUMMARY, TIMING,
    TRAIN_REPORT,
};

/// The matrix and region metadata named by a config.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub matrix: QosMatrix,
    pub users: Metadata,
    pub services: Metadata,
}

impl Inputs {
    pub fn view(&self) -> ExperimentInputs<'_> {
        ExperimentInputs {
            matrix: &self.matrix,
            users: &self.users,
            services: &self.services,
        }
    }
}

pub fn load_inputs(config: &ExperimentConfig) -> Result<Inputs> {
    let paths = &config.paths;
    let matrix_path = paths
        .matrix
        .as_ref()
        .ok_or_else(|| Error::Config("paths.matrix is not set".into()))?;
    let matrix = load_matrix(matrix_path, paths.matrix_format).map_err(|e| e.in_stage("load"))?;
    let meta = |p: &Option<PathBuf>, kind| match p {
        Some(p) => load_metadata(p, kind).map_err(|e| e.in_stage("load")),
        None => Ok(Metadata::unknown(kind)),
    };
    Ok(Inputs {
        users: meta(&paths.user_metadata, EntityKind::User)?,
        services: meta(&paths.service_metadata, EntityKind::Service)?,
        matrix,
    })
}

#[derive(Debug, Serialize)]
struct ReputationSummary<'a> {
    source: &'static str,
    density: Option<f64>,
    seed: u64,
    n_observations: usize,
    users: &'a KindSummary,
    services: &'a KindSummary,
    config: serde_json::Value,
}

/// Reputations from the training split of the first density, or from the
/// whole matrix with `full`.
pub fn cmd_reputation(config: &ExperimentConfig, full: bool) -> Result<ReputationTable> {
    let inputs = load_inputs(config)?;
    let density = config.primary_density();
    let source = if full {
        inputs.matrix.clone()
    } else {
        split_by_density(
            &inputs.matrix,
            SplitSpec {
                density,
                seed: config.seed(),
            },
        )
        .map_err(|e| e.in_stage("split"))?
        .train
    };
    let table = compute_reputations(&source, &config.rcm_config()).map_err(|e| e.in_stage("reputation"))?;
    let summary = ReputationSummary {
        source: if full { "full" } else { "train" },
        density: (!full).then_some(density),
        seed: config.seed(),
        n_observations: source.len(),
        users: &table.user_summary,
        services: &table.service_summary,
        config: config.to_value(),
    };
    write_all(
        &config.paths.output_dir,
        &[
            (REPUTATIONS_CSV, table.to_csv().into_bytes()),
            (REPUTATION_SUMMARY, to_json(&summary)?),
        ],
    )?;
    Ok(table)
}

/// What the checkpoint header stores besides the parameter list.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointConfig {
    experiment: ExperimentConfig,
    dims: ModelDims,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunReport {
    pub npe_label: String,
    pub seed: u64,
    pub density: f64,
    pub parameter_count: usize,
    pub dims: ModelDims,
    pub training: TrainReport,
    pub evaluation: MetricReport,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub report: TrainRunReport,
    pub evaluation: MetricReport,
    pub checkpoint: PathBuf,
    pub wall_seconds: f64,
}

/// Full protocol at the first density; writes the checkpoint, a
/// deterministic `report.json` and a separate `timing.json`.
pub fn cmd_train(config: &ExperimentConfig) -> Result<TrainOutputs> {
    let inputs = load_inputs(config)?;
    let density = config.primary_density();
    let start = Instant::now();
    let outcome = run_experiment(inputs.view(), config, density)?;
    let wall_seconds = start.elapsed().as_secs_f64();
    let dims = outcome.model.dims;
    let checkpoint = Checkpoint::from_store(
        &outcome.model.params,
        serde_json::to_value(CheckpointConfig {
            experiment: config.clone(),
            dims,
        })?,
    );
    let report = TrainRunReport {
        npe_label: config.model.npe_label(),
        seed: config.seed(),
        density,
        parameter_count: outcome.model.parameter_count(),
        dims,
        training: outcome.training,
        evaluation: outcome.report.clone(),
        config: config.to_value(),
    };
    let timing = json!({ "wall_seconds": wall_seconds, "steps": report.training.steps });
    let dir = &config.paths.output_dir;
    write_all(
        dir,
        &[
            (CHECKPOINT, checkpoint.encode()?),
            (TRAIN_REPORT, to_json(&report)?),
            (TIMING, to_json(&timing)?),
        ],
    )?;
    Ok(TrainOutputs {
        evaluation: outcome.report,
        report,
        checkpoint: dir.join(CHECKPOINT),
        wall_seconds,
    })
}

fn check_compatible(stored: &CheckpointConfig, config: &ExperimentConfig, dims: ModelDims) -> Result<()> {
    let (a, b) = (&stored.experiment.model, &config.model);
    let mut diffs = Vec::new();
    if a.d != b.d {
        diffs.push(format!("d {} vs {}", a.d, b.d));
    }
    if a.n_stack != b.n_stack {
        diffs.push(format!("n_stack {} vs {}", a.n_stack, b.n_stack));
    }
    if a.use_pe != b.use_pe {
        diffs.push(format!("use_pe {} vs {}", a.use_pe, b.use_pe));
    }
    if a.token_dim() != b.token_dim() {
        diffs.push(format!("token_dim {} vs {}", a.token_dim(), b.token_dim()));
    }
    if stored.dims != dims {
        diffs.push(format!("data dims {:?} vs {:?}", stored.dims, dims));
    }
    if !diffs.is_empty() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint vs config: {}",
            diffs.join(", ")
        )));
    }
    let (sp, cp) = (&stored.experiment.protocol, &config.protocol);
    if sp.seed != cp.seed || stored.experiment.primary_density() != config.primary_density() {
        log::warn!("checkpoint was trained with a different seed or density; test entries may overlap its training data");
    }
    Ok(())
}

/// Scores a checkpoint under the full protocol (split, training-only
/// reputations, outlier filter) and writes `evaluation.json`.
pub fn cmd_evaluate(config: &ExperimentConfig, checkpoint: &Path) -> Result<MetricReport> {
    let ck = read_checkpoint(checkpoint).map_err(|e| e.in_stage("checkpoint"))?;
    let stored: CheckpointConfig = serde_json::from_value(ck.config.clone())
        .map_err(|e| Error::IncompatibleCheckpoint(format!("unreadable config header: {e}")))?;
    let inputs = load_inputs(config)?;
    let view = inputs.view();
    check_compatible(&stored, config, view.dims())?;

    let density = config.primary_density();
    let split = split_by_density(
        view.matrix,
        SplitSpec {
            density,
            seed: config.seed(),
        },
    )
    .map_err(|e| e.in_stage("split"))?;
    let reputations = compute_reputations(&split.train, &config.rcm_config()).map_err(|e| e.in_stage("reputation"))?;
    let features = view.features(&reputations);
    let mut model = RahnModel::new(config.model_config(), view.dims())?;
    model.params.load_values(&ck.named_values())?;
    let eval = evaluate_split(&model, &features, &split, config.protocol.outlier_fraction)?;
    let report = metric_report(config, density, split.train.len(), eval);
    write_all(&config.paths.output_dir, &[(EVALUATION, to_json(&report)?)])?;
    Ok(report)
}

#[derive(Debug, Serialize)]
struct CellSummary<'a> {
    npe_label: &'a str,
    n_stack: usize,
    use_pe: bool,
    d: usize,
    density: f64,
    seed: u64,
    error: Option<&'a str>,
    report: Option<&'a MetricReport>,
}

#[derive(Debug, Clone)]
pub struct SweepOutputs {
    pub cells: Vec<SweepCell>,
    pub n_failed: usize,
    pub trends: Vec<TrendCheck>,
    pub csv: String,
}

/// Runs the grid and writes `sweep.csv` plus `sweep_summary.json` with the
/// per-cell reports and the depth trend checks.
pub fn cmd_sweep(config: &ExperimentConfig, grid: &SweepGrid) -> Result<SweepOutputs> {
    grid.validate()?;
    let inputs = load_inputs(config)?;
    let cells = sweep(inputs.view(), config, grid)?;
    let trends = depth_trends(&cells);
    for t in &trends {
        log::info!(
            "trend MD={} d={} PE={}: N={} MAE {:.4} vs N=0 MAE {:.4} -> {}",
            t.density,
            t.d,
            u8::from(t.use_pe),
            t.deep_n,
            t.deep_mae,
            t.shallow_mae,
            if t.passed { "pass" } else { "fail" }
        );
    }
    let summary = json!({
        "config": config.to_value(),
        "grid": grid,
        "cells": cells.iter().map(|c| CellSummary {
            npe_label: &c.npe_label,
            n_stack: c.n_stack,
            use_pe: c.use_pe,
            d: c.d,
            density: c.density,
            seed: c.seed,
            error: c.outcome.as_ref().err().map(String::as_str),
            report: c.outcome.as_ref().ok(),
        }).collect::<Vec<_>>(),
        "trends": trends,
    });
    let csv = sweep_csv(&cells);
    write_all(
        &config.paths.output_dir,
        &[(SWEEP_CSV, csv.clone().into_bytes()), (SWEEP_SUMMARY, to_json(&summary)?)],
    )?;
    let n_failed = cells.iter().filter(|c| c.outcome.is_err()).count();
    Ok(SweepOutputs {
        cells,
        n_failed,
        trends,
        csv,
    })
}

/// Writes `rtMatrix.txt`, `userlist.csv`, `wslist.csv`, `fixture.json` and a
/// `config.json` that points at them. Returns the config path.
pub fn cmd_gen_fixture(args: &FixtureArgs) -> Result<PathBuf> {
    let spec = FixtureSpec {
        n_users: args.users,
        n_services: args.services,
        rank: args.rank,
        noise_sigma: args.noise,
        observed_fraction: args.observed,
        n_user_regions: args.user_regions,
        n_service_regions: args.service_regions,
        seed: args.seed,
    };
    let fixture = generate(&spec)?;
    let mut config = ExperimentConfig::default();
    config.paths.matrix = Some("rtMatrix.txt".into());
    config.paths.user_metadata = Some("userlist.csv".into());
    config.paths.service_metadata = Some("wslist.csv".into());
    config.paths.output_dir = "out".into();
    config.rcm.n_user_clusters = config.rcm.n_user_clusters.min(spec.n_users);
    config.rcm.n_service_clusters = config.rcm.n_service_clusters.min(spec.n_services);
    config.model.d = 8;
    config.model.n_stack = 1;
    config.model.learning_rate = 0.001;
    config.model.batch_size = 32;
    config.protocol.densities = vec![0.2];
    write_all(
        &args.out,
        &[
            ("rtMatrix.txt", fixture.matrix.to_matrix_text().into_bytes()),
            ("userlist.csv", fixture.users.to_csv().into_bytes()),
            ("wslist.csv", fixture.services.to_csv().into_bytes()),
            ("fixture.json", to_json(&spec)?),
            ("config.json", to_json(&config)?),
        ],
    )?;
    Ok(args.out.join("config.json"))
}
