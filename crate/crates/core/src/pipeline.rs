//! Relax, round, evaluate, and optionally compare against the exhaustive optimum.

use serde::Serialize;

use crate::community::{round_to_partition, Rounding, RoundingOptions};
use crate::error::Result;
use crate::game::GameInstance;
use crate::metrics::{
    evaluate_partition, exhaustive_search, Evaluation, MetricSpec, SearchOptions, SearchReport,
};
use crate::relax::{solve_relaxation, FeasibleSetSpec, SolverParams, SolverReport};

/// Largest `n` for which the pipeline offers the exhaustive comparison.
pub const COMPARE_LIMIT: usize = 12;

#[derive(Debug, Clone, Copy)]
pub struct PipelineOptions {
    pub min_block: usize,
    pub threshold: f64,
    pub solver: SolverParams,
    pub compare_exhaustive: bool,
    pub jobs: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            min_block: 1,
            threshold: crate::community::DEFAULT_THRESHOLD,
            solver: SolverParams::default(),
            compare_exhaustive: false,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub exhaustive_value: f64,
    pub rounded_value: f64,
    /// Loss of the rounded partition relative to the optimum (0 when optimal).
    pub gap: f64,
    pub same_partition: bool,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub relaxation: SolverReport,
    pub rounding: Rounding,
    pub evaluation: Evaluation,
    pub search: Option<SearchReport>,
    pub comparison: Option<Comparison>,
}

pub fn optimize(
    instance: &GameInstance,
    metric: &MetricSpec,
    opts: &PipelineOptions,
) -> Result<PipelineResult> {
    let spec = FeasibleSetSpec::new(instance.n(), opts.min_block)?;
    let relaxation = solve_relaxation(instance, metric, &spec, &opts.solver)?;
    let rounding = round_to_partition(
        relaxation.h_star.matrix(),
        &RoundingOptions {
            min_block: opts.min_block,
            threshold: opts.threshold,
            ..RoundingOptions::default()
        },
    )?;
    let evaluation = evaluate_partition(instance, &rounding.partition, metric)?;
    let (search, comparison) = if opts.compare_exhaustive && instance.n() <= COMPARE_LIMIT {
        let report = exhaustive_search(
            instance,
            metric,
            &SearchOptions {
                min_block_size: opts.min_block,
                jobs: opts.jobs,
                ..SearchOptions::default()
            },
        )?;
        let gap = metric.loss(evaluation.value) - metric.loss(report.value);
        let cmp = Comparison {
            exhaustive_value: report.value,
            rounded_value: evaluation.value,
            gap: gap.max(0.0),
            same_partition: report.best_partition == rounding.partition,
        };
        (Some(report), Some(cmp))
    } else {
        (None, None)
    };
    Ok(PipelineResult {
        relaxation,
        rounding,
        evaluation,
        search,
        comparison,
    })
}
