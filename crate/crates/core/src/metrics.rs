//! Performance metrics at equilibrium and the exhaustive partition search.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{self, EquilibriumResult, LcpResidual};
use crate::error::{Error, Result};
use crate::game::{check_actions, ConcavePayoff, GameInstance};
use crate::partition::{h_matrix, split_enumeration, Partition, PartitionJson};

/// Largest `n` searched exhaustively without an explicit override.
pub const EXHAUSTIVE_LIMIT: usize = 14;
/// Values within this distance of the best are ties.
pub const TIE_TOL: f64 = 1e-12;
pub const DEFAULT_TOP_K: usize = 5;
/// LCP tolerance used when certifying the winner.
pub const CERTIFY_EPS: f64 = 1e-8;

/// What the principal optimises.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetricSpec {
    /// Maximise total payoff.
    Welfare,
    /// Minimise `sum_i eta_i` over all agents.
    TotalFreeRiding,
    /// Minimise `sum_{i in S} eta_i`; 0-indexed, sorted, nonempty.
    SubsetFreeRiding(Vec<usize>),
}

impl MetricSpec {
    pub fn subset(agents: Vec<usize>, n: usize) -> Result<Self> {
        let mut agents = agents;
        agents.sort_unstable();
        agents.dedup();
        if agents.is_empty() {
            return Err(Error::InvalidArgument("free-riding subset is empty".into()));
        }
        if let Some(&bad) = agents.iter().find(|&&a| a >= n) {
            return Err(Error::AgentOutOfRange { index: bad, n });
        }
        Ok(MetricSpec::SubsetFreeRiding(agents))
    }

    pub fn maximize(&self) -> bool {
        matches!(self, MetricSpec::Welfare)
    }

    /// Agents whose free riding is summed, or `None` for all.
    pub fn free_riding_subset(&self) -> Option<&[usize]> {
        match self {
            MetricSpec::SubsetFreeRiding(s) => Some(s),
            _ => None,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if let MetricSpec::SubsetFreeRiding(s) = self {
            MetricSpec::subset(s.clone(), n)?;
        }
        Ok(())
    }

    /// Metric value at an equilibrium profile.
    pub fn evaluate(&self, instance: &GameInstance, x: &DVector<f64>) -> Result<f64> {
        match self {
            MetricSpec::Welfare => welfare(instance, x),
            MetricSpec::TotalFreeRiding => {
                Ok(free_riding(instance, x, FreeRidingVariant::Partial, None)?.total)
            }
            MetricSpec::SubsetFreeRiding(s) => {
                Ok(free_riding(instance, x, FreeRidingVariant::Partial, Some(s))?.total)
            }
        }
    }

    /// Orientation where smaller is better.
    pub fn loss(&self, value: f64) -> f64 {
        if self.maximize() {
            -value
        } else {
            value
        }
    }
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricSpec::Welfare => f.write_str("welfare"),
            MetricSpec::TotalFreeRiding => f.write_str("freeriding"),
            MetricSpec::SubsetFreeRiding(s) => {
                f.write_str("freeriding:")?;
                for (k, a) in s.iter().enumerate() {
                    if k > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{}", a + 1)?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for MetricSpec {
    type Err = Error;

    /// `welfare`, `freeriding`, or `freeriding:1,4,7` (1-indexed subset).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "welfare" => Ok(MetricSpec::Welfare),
            "freeriding" | "free-riding" => Ok(MetricSpec::TotalFreeRiding),
            other => {
                let list = other
                    .strip_prefix("freeriding:")
                    .or_else(|| other.strip_prefix("free-riding:"))
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown metric {other:?}")))?;
                let mut agents = Vec::new();
                for tok in list.split(',') {
                    let a: usize = tok.trim().parse().map_err(|_| {
                        Error::InvalidArgument(format!("bad agent {tok:?} in metric subset"))
                    })?;
                    if a == 0 {
                        return Err(Error::InvalidArgument("agents are numbered from 1".into()));
                    }
                    agents.push(a - 1);
                }
                if agents.is_empty() {
                    return Err(Error::InvalidArgument("free-riding subset is empty".into()));
                }
                agents.sort_unstable();
                agents.dedup();
                Ok(MetricSpec::SubsetFreeRiding(agents))
            }
        }
    }
}

impl Serialize for MetricSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

/// `sum_i S_i(W_i x) - c_i x_i`.
pub fn welfare(instance: &GameInstance, x: &DVector<f64>) -> Result<f64> {
    check_actions(x, instance.n())?;
    let effective = instance.w() * x;
    let payoff = instance.payoff_spec();
    Ok((0..instance.n())
        .map(|i| payoff.value(i, effective[i]) - instance.c()[i] * x[i])
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreeRidingVariant {
    /// `eta_i = (b_i - x_i) / b_i`.
    Partial,
    /// `gamma_i = (W_i x - x_i) / b_i`, the fully transparent index.
    Transparent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreeRiding {
    pub per_agent: DVector<f64>,
    pub total: f64,
}

pub fn free_riding(
    instance: &GameInstance,
    x: &DVector<f64>,
    variant: FreeRidingVariant,
    subset: Option<&[usize]>,
) -> Result<FreeRiding> {
    check_actions(x, instance.n())?;
    let b = instance.b();
    let per_agent = match variant {
        FreeRidingVariant::Partial => DVector::from_fn(x.len(), |i, _| (b[i] - x[i]) / b[i]),
        FreeRidingVariant::Transparent => {
            let wx = instance.w() * x;
            DVector::from_fn(x.len(), |i, _| (wx[i] - x[i]) / b[i])
        }
    };
    let total = match subset {
        None => per_agent.sum(),
        Some(s) => {
            if let Some(&bad) = s.iter().find(|&&a| a >= x.len()) {
                return Err(Error::AgentOutOfRange {
                    index: bad,
                    n: x.len(),
                });
            }
            s.iter().map(|&i| per_agent[i]).sum()
        }
    };
    Ok(FreeRiding { per_agent, total })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub equilibrium: EquilibriumResult,
}

/// Metric value at the unique equilibrium induced by `p`.
pub fn evaluate_partition(
    instance: &GameInstance,
    p: &Partition,
    metric: &MetricSpec,
) -> Result<Evaluation> {
    if p.n() != instance.n() {
        return Err(Error::Dimension {
            what: "partition",
            expected: instance.n(),
            found: p.n(),
        });
    }
    metric.validate(instance.n())?;
    let eq = dynamics::equilibrium(instance, &h_matrix(p))?;
    let value = metric.evaluate(instance, &eq.x_star)?;
    Ok(Evaluation {
        value,
        equilibrium: eq,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct SearchOptions {
    pub min_block_size: usize,
    pub top_k: usize,
    /// Worker threads; `1` runs on the calling thread.
    pub jobs: usize,
    pub allow_large: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            min_block_size: 1,
            top_k: DEFAULT_TOP_K,
            jobs: 1,
            allow_large: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RankedPartition {
    pub blocks: PartitionJson,
    pub value: f64,
    #[serde(skip)]
    pub partition: Partition,
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchReport {
    pub metric: MetricSpec,
    #[serde(rename = "L")]
    pub min_block_size: usize,
    pub best: PartitionJson,
    pub value: f64,
    pub top_k: Vec<RankedPartition>,
    pub partitions_evaluated: u64,
    pub wall_seconds: f64,
    pub certificate: LcpResidual,
    #[serde(skip)]
    pub best_partition: Partition,
}

/// Candidate kept during the search: loss (smaller is better) then assignment.
#[derive(Debug, Clone)]
struct Candidate {
    loss: f64,
    assignment: Vec<usize>,
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    a.loss
        .total_cmp(&b.loss)
        .then_with(|| a.assignment.cmp(&b.assignment))
}

fn insert_bounded(list: &mut Vec<Candidate>, cand: Candidate, cap: usize) {
    if list.len() == cap {
        if let Some(last) = list.last() {
            if rank(&cand, last) != Ordering::Less {
                return;
            }
        }
    }
    let pos = list
        .binary_search_by(|c| rank(c, &cand))
        .unwrap_or_else(|e| e);
    list.insert(pos, cand);
    list.truncate(cap);
}

struct ChunkResult {
    best: Vec<Candidate>,
    evaluated: u64,
}

/// Exact optimum over every partition whose blocks have at least
/// `min_block_size` agents.
///
/// Ties within [`TIE_TOL`] go to the lexicographically smallest canonical
/// assignment. The enumeration is split into fixed prefix ranges and reduced
/// in range order, so the report does not depend on `jobs`.
pub fn exhaustive_search(
    instance: &GameInstance,
    metric: &MetricSpec,
    opts: &SearchOptions,
) -> Result<SearchReport> {
    let n = instance.n();
    if n > EXHAUSTIVE_LIMIT && !opts.allow_large {
        return Err(Error::TooLarge {
            n,
            limit: EXHAUSTIVE_LIMIT,
        });
    }
    metric.validate(n)?;
    let started = Instant::now();
    let keep = opts.top_k.max(1) + 16;
    let chunks = split_enumeration(n, opts.min_block_size, 4)?;
    if chunks.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no partition of {n} agents has all blocks of size >= {}",
            opts.min_block_size
        )));
    }

    let scan = |mut chunk: crate::partition::PartitionEnumerator| -> Result<ChunkResult> {
        let mut best = Vec::with_capacity(keep + 1);
        let mut evaluated = 0u64;
        let mut labels = Vec::with_capacity(n);
        while let Some(a) = chunk.next_assignment() {
            labels.clear();
            labels.extend_from_slice(a);
            let p = Partition::from_assignment(labels.clone())?;
            let value = evaluate_partition(instance, &p, metric)?.value;
            evaluated += 1;
            insert_bounded(
                &mut best,
                Candidate {
                    loss: metric.loss(value),
                    assignment: labels.clone(),
                },
                keep,
            );
        }
        Ok(ChunkResult { best, evaluated })
    };

    let results: Vec<Result<ChunkResult>> = if opts.jobs <= 1 {
        chunks.into_iter().map(scan).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        pool.install(|| chunks.into_par_iter().map(scan).collect())
    };

    let mut merged: Vec<Candidate> = Vec::new();
    let mut evaluated = 0;
    for r in results {
        let r = r?;
        evaluated += r.evaluated;
        for c in r.best {
            insert_bounded(&mut merged, c, keep);
        }
    }
    let best_loss = merged[0].loss;
    let winner = merged
        .iter()
        .filter(|c| c.loss - best_loss <= TIE_TOL * best_loss.abs().max(1.0))
        .min_by(|a, b| a.assignment.cmp(&b.assignment))
        .expect("nonempty")
        .clone();
    let best_partition = Partition::from_assignment(winner.assignment.clone())?;
    let eval = evaluate_partition(instance, &best_partition, metric)?;
    let mut certificate = eval.equilibrium.lcp;
    if !certificate.is_certified(CERTIFY_EPS) {
        let it = dynamics::iterate_equilibrium(
            instance,
            &h_matrix(&best_partition),
            &DVector::zeros(n),
            &dynamics::IterationOptions::default(),
        )?;
        certificate = it.lcp;
    }

    let top_k = merged
        .iter()
        .take(opts.top_k)
        .map(|c| {
            let p = Partition::from_assignment(c.assignment.clone()).expect("canonical");
            RankedPartition {
                blocks: p.to_json_value(),
                value: metric.loss(c.loss),
                partition: p,
            }
        })
        .collect();

    Ok(SearchReport {
        metric: metric.clone(),
        min_block_size: opts.min_block_size,
        best: best_partition.to_json_value(),
        value: eval.value,
        top_k,
        partitions_evaluated: evaluated,
        wall_seconds: started.elapsed().as_secs_f64(),
        certificate,
        best_partition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::PayoffSpec;
    use nalgebra::DMatrix;

    fn single() -> GameInstance {
        GameInstance::new(
            DMatrix::identity(1, 1),
            DVector::from_element(1, 100.0),
            PayoffSpec::sqrt_uniform(1, 200.0),
        )
        .unwrap()
    }

    #[test]
    fn welfare_examples() {
        let inst = single();
        assert!((welfare(&inst, &DVector::from_element(1, 100.0)).unwrap() - 1000.0).abs() < 1e-9);
        assert_eq!(welfare(&inst, &DVector::zeros(1)).unwrap(), 0.0);
    }

    #[test]
    fn decoupled_welfare_peaks_at_b() {
        let inst = GameInstance::new(
            DMatrix::identity(3, 3),
            DVector::from_vec(vec![50.0, 200.0, 700.0]),
            PayoffSpec::sqrt_uniform(3, 200.0),
        )
        .unwrap();
        let at_b = welfare(&inst, inst.b()).unwrap();
        for i in 0..3 {
            for delta in [-1.0, -1e-3, 1e-3, 1.0] {
                let mut x = inst.b().clone();
                x[i] += delta;
                assert!(welfare(&inst, &x).unwrap() < at_b);
            }
        }
    }

    #[test]
    fn free_riding_at_b_is_zero() {
        let inst = single();
        let fr = free_riding(&inst, inst.b(), FreeRidingVariant::Partial, None).unwrap();
        assert_eq!(fr.total, 0.0);
        let eval = evaluate_partition(
            &inst,
            &Partition::singletons(1),
            &MetricSpec::TotalFreeRiding,
        )
        .unwrap();
        assert_eq!(eval.value, 0.0);
    }

    #[test]
    fn metric_parsing() {
        assert_eq!(
            "welfare".parse::<MetricSpec>().unwrap(),
            MetricSpec::Welfare
        );
        assert_eq!(
            "freeriding".parse::<MetricSpec>().unwrap(),
            MetricSpec::TotalFreeRiding
        );
        let m: MetricSpec = "freeriding:3,1".parse().unwrap();
        assert_eq!(m, MetricSpec::SubsetFreeRiding(vec![0, 2]));
        assert_eq!(m.to_string(), "freeriding:1,3");
        assert!("freeriding:0".parse::<MetricSpec>().is_err());
        assert!("speed".parse::<MetricSpec>().is_err());
        assert!(MetricSpec::subset(vec![5], 3).is_err());
    }

    #[test]
    fn single_agent_search() {
        let r =
            exhaustive_search(&single(), &MetricSpec::Welfare, &SearchOptions::default()).unwrap();
        assert_eq!(r.best_partition, Partition::singletons(1));
        assert_eq!(r.partitions_evaluated, 1);
    }

    #[test]
    fn large_n_needs_override() {
        let inst = GameInstance::new(
            DMatrix::identity(15, 15),
            DVector::from_element(15, 1.0),
            PayoffSpec::sqrt_uniform(15, 200.0),
        )
        .unwrap();
        assert!(matches!(
            exhaustive_search(&inst, &MetricSpec::Welfare, &SearchOptions::default()),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn bounded_insert_keeps_order() {
        let mut v = Vec::new();
        for (loss, a) in [(3.0, 1), (1.0, 2), (2.0, 0), (1.0, 1), (0.5, 9)] {
            insert_bounded(
                &mut v,
                Candidate {
                    loss,
                    assignment: vec![a],
                },
                3,
            );
        }
        let got: Vec<(f64, usize)> = v.iter().map(|c| (c.loss, c.assignment[0])).collect();
        assert_eq!(got, vec![(0.5, 9), (1.0, 1), (1.0, 2)]);
    }
}
