use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde_json::{json, Value};

use partobs::community::to_dot;
use partobs::dynamics::{iterate_equilibrium, trajectory_csv, EquilibriumResult, IterationOptions};
use partobs::game::generate_instance;
use partobs::metrics::{evaluate_partition, exhaustive_search, SearchOptions};
use partobs::partition::PartitionJson;
use partobs::pipeline::{optimize, PipelineOptions};
use partobs::relax::{matrix_csv, SolverParams};
use partobs::{h_matrix, Error, GameInstance, GeneratorParams, MetricSpec, Partition};

#[derive(Parser)]
#[command(
    name = "partobs",
    version,
    about = "Partial-observability design for network aggregative games"
)]
struct Cli {
    /// Print machine-readable JSON on stdout instead of a summary.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random instance satisfying dominance and interiority.
    Gen(GenArgs),
    /// Run best-response dynamics under a partition and record the trajectory.
    Simulate(SimulateArgs),
    /// Search every partition for the best metric value.
    Exhaustive(ExhaustiveArgs),
    /// Relax, round with community detection, and evaluate.
    Optimize(OptimizeArgs),
    /// Evaluate a metric at the equilibrium of one partition.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bound on the off-diagonal row mass of W.
    #[arg(long, default_value_t = 0.49)]
    gamma: f64,
    /// Lower bound on min(b) / max(b).
    #[arg(long, default_value_t = 0.97)]
    rho: f64,
    #[arg(long, default_value_t = 0.5)]
    density: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    instance: PathBuf,
    /// Partition text such as `{1,5,8},{2,9}` or a file holding text or JSON.
    #[arg(long)]
    partition: String,
    /// Comma-separated starting actions; zero when omitted.
    #[arg(long)]
    x0: Option<String>,
    #[arg(long, default_value_t = partobs::dynamics::DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = partobs::dynamics::DEFAULT_MAX_ITER)]
    max_iter: usize,
    /// Trajectory CSV destination.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Equilibrium JSON destination.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExhaustiveArgs {
    #[arg(long)]
    instance: PathBuf,
    /// `welfare`, `freeriding` or `freeriding:1,3,7`.
    #[arg(long, default_value = "freeriding")]
    metric: MetricSpec,
    /// Minimum block size.
    #[arg(long = "L", default_value_t = 1)]
    min_block: usize,
    /// Number of runners-up to report.
    #[arg(long, default_value_t = partobs::metrics::DEFAULT_TOP_K)]
    k: usize,
    #[arg(long, env = "PARTOBS_JOBS", default_value_t = 1)]
    jobs: usize,
    /// Permit n above the default enumeration limit.
    #[arg(long)]
    allow_large: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long, default_value = "freeriding")]
    metric: MetricSpec,
    #[arg(long = "L", default_value_t = 1)]
    min_block: usize,
    /// Prefix for the solver report, H* CSV, DOT graph, partition and comparison files.
    #[arg(long, default_value = "partobs")]
    out_prefix: String,
    /// Edge threshold for the graph built from H*.
    #[arg(long, default_value_t = partobs::community::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 5000)]
    max_iter: usize,
    /// Also run the exhaustive search and report the optimality gap (n <= 12).
    #[arg(long)]
    compare: bool,
    #[arg(long, env = "PARTOBS_JOBS", default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    partition: String,
    #[arg(long, default_value = "freeriding")]
    metric: MetricSpec,
    /// Equilibrium JSON destination.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A run that finished but did not meet its numerical target.
#[derive(Debug)]
struct NumericalFailure(String);

impl fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<NumericalFailure>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(
            Error::NoConvergence { .. } | Error::Singular | Error::NonPositiveInvestment { .. },
        ) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = cli.quiet;
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a, quiet),
        Command::Simulate(a) => cmd_simulate(a, quiet),
        Command::Exhaustive(a) => cmd_exhaustive(a, quiet),
        Command::Optimize(a) => cmd_optimize(a, quiet),
        Command::Eval(a) => cmd_eval(a, quiet),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn load_instance(path: &Path) -> anyhow::Result<GameInstance> {
    GameInstance::load(path).with_context(|| format!("loading instance {}", path.display()))
}

fn parse_partition(arg: &str) -> anyhow::Result<Partition> {
    let path = Path::new(arg);
    let text = if !arg.trim_start().starts_with('{') && path.exists() {
        fs::read_to_string(path).with_context(|| format!("reading partition {arg}"))?
    } else {
        arg.to_string()
    };
    let trimmed = text.trim();
    if trimmed.contains("\"blocks\"") {
        let json: PartitionJson = serde_json::from_str(trimmed)
            .map_err(Error::from)
            .context("partition JSON")?;
        return Ok(Partition::try_from(json)?);
    }
    trimmed.parse::<Partition>().context("partition text")
}

fn parse_x0(text: &str, n: usize) -> anyhow::Result<DVector<f64>> {
    let values = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Error::InvalidArgument(format!("x0: {e}")))?;
    if values.len() != n {
        return Err(Error::Dimension {
            what: "x0",
            expected: n,
            found: values.len(),
        }
        .into());
    }
    Ok(DVector::from_vec(values))
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents)
        .map_err(Error::from)
        .with_context(|| format!("writing {}", path.display()))
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values serialize");
    s.push('\n');
    s
}

fn equilibrium_json(eq: &EquilibriumResult) -> Value {
    json!({
        "x_star": eq.x_star.as_slice(),
        "iterations": eq.iterations,
        "method": eq.method,
        "lcp": eq.lcp,
        "max_ratio": eq.ratios.iter().cloned().fold(0.0, f64::max),
    })
}

fn cmd_gen(a: GenArgs, quiet: bool) -> anyhow::Result<()> {
    let inst = generate_instance(&GeneratorParams {
        n: a.n,
        seed: a.seed,
        gamma: a.gamma,
        rho: a.rho,
        density: a.density,
    })?;
    inst.save(&a.out)?;
    let int = inst.check_interiority();
    if quiet {
        println!(
            "{}",
            json!({
                "out": a.out.display().to_string(),
                "gamma": inst.gamma(),
                "interiority": int,
            })
        );
    } else {
        println!("wrote {} (n = {})", a.out.display(), inst.n());
        println!("gamma = {:.6}", inst.gamma());
        println!(
            "interiority: {} (min b - bound = {:.6}, bound = {:.6})",
            if int.holds { "holds" } else { "fails" },
            int.margin,
            int.bound
        );
    }
    Ok(())
}

fn cmd_simulate(a: SimulateArgs, quiet: bool) -> anyhow::Result<()> {
    let inst = load_instance(&a.instance)?;
    let p = parse_partition(&a.partition)?;
    let x0 = match &a.x0 {
        Some(text) => parse_x0(text, inst.n())?,
        None => DVector::zeros(inst.n()),
    };
    let eq = iterate_equilibrium(
        &inst,
        &h_matrix(&p),
        &x0,
        &IterationOptions {
            tol: a.tol,
            max_iter: a.max_iter,
            record_trace: true,
        },
    )?;
    if let (Some(path), Some(trace)) = (&a.trace_out, &eq.trace) {
        write_file(path, &trajectory_csv(trace))?;
    }
    let report = equilibrium_json(&eq);
    if let Some(path) = &a.out {
        write_file(path, &pretty(&report))?;
    }
    if quiet {
        println!("{report}");
    } else {
        println!("partition {p}");
        println!("converged in {} steps", eq.iterations);
        for (i, v) in eq.x_star.iter().enumerate() {
            println!("  x{:<3} {v:.6}", i + 1);
        }
        println!(
            "LCP residuals: min y = {:.3e}, min x = {:.3e}, max |y x| = {:.3e}",
            eq.lcp.min_slack, eq.lcp.min_action, eq.lcp.max_complementarity
        );
    }
    Ok(())
}

fn cmd_exhaustive(a: ExhaustiveArgs, quiet: bool) -> anyhow::Result<()> {
    let inst = load_instance(&a.instance)?;
    let report = exhaustive_search(
        &inst,
        &a.metric,
        &SearchOptions {
            min_block_size: a.min_block,
            top_k: a.k,
            jobs: a.jobs.max(1),
            allow_large: a.allow_large,
        },
    )?;
    let value = serde_json::to_value(&report).expect("search reports serialize");
    if let Some(path) = &a.out {
        write_file(path, &pretty(&value))?;
    }
    if quiet {
        println!("{value}");
    } else {
        println!("metric {}, L = {}", report.metric, report.min_block_size);
        println!(
            "best   {}  value {:.9}",
            report.best_partition, report.value
        );
        for (rank, r) in report.top_k.iter().enumerate() {
            println!(
                "  {:>2}. {:<40} {:.9}",
                rank + 1,
                r.partition.to_string(),
                r.value
            );
        }
        println!(
            "{} partitions in {:.3} s",
            report.partitions_evaluated, report.wall_seconds
        );
    }
    Ok(())
}

fn cmd_optimize(a: OptimizeArgs, quiet: bool) -> anyhow::Result<()> {
    let inst = load_instance(&a.instance)?;
    if a.compare && inst.n() > partobs::pipeline::COMPARE_LIMIT {
        bail!(Error::TooLarge {
            n: inst.n(),
            limit: partobs::pipeline::COMPARE_LIMIT,
        });
    }
    let res = optimize(
        &inst,
        &a.metric,
        &PipelineOptions {
            min_block: a.min_block,
            threshold: a.threshold,
            solver: SolverParams {
                max_iter: a.max_iter,
                ..SolverParams::default()
            },
            compare_exhaustive: a.compare,
            jobs: a.jobs.max(1),
        },
    )?;
    let prefix = &a.out_prefix;
    let solver_path = PathBuf::from(format!("{prefix}_solver.json"));
    let h_path = PathBuf::from(format!("{prefix}_H.csv"));
    let dot_path = PathBuf::from(format!("{prefix}.dot"));
    let part_path = PathBuf::from(format!("{prefix}_partition.txt"));
    write_file(&solver_path, &pretty(&res.relaxation.to_json()))?;
    write_file(&h_path, &matrix_csv(res.relaxation.h_star.matrix()))?;
    write_file(
        &dot_path,
        &to_dot(&res.rounding.graph, Some(&res.rounding.partition)),
    )?;
    write_file(&part_path, &format!("{}\n", res.rounding.partition))?;
    let comparison = res.comparison.as_ref().map(|c| {
        let search = res.search.as_ref().expect("comparison implies a search");
        json!({
            "exhaustive_best": PartitionJson::from(&search.best_partition),
            "exhaustive_value": c.exhaustive_value,
            "rounded_value": c.rounded_value,
            "gap": c.gap,
            "same_partition": c.same_partition,
        })
    });
    if let Some(c) = &comparison {
        write_file(
            &PathBuf::from(format!("{prefix}_comparison.json")),
            &pretty(c),
        )?;
    }
    let summary = json!({
        "metric": a.metric,
        "L": a.min_block,
        "partition": PartitionJson::from(&res.rounding.partition),
        "value": res.evaluation.value,
        "relaxed_objective": res.relaxation.objective(),
        "iterations": res.relaxation.iterations,
        "converged": res.relaxation.converged,
        "comparison": comparison,
    });
    if quiet {
        println!("{summary}");
    } else {
        let r = &res.relaxation;
        println!(
            "relaxation: objective {:.9} after {} iterations ({})",
            r.objective(),
            r.iterations,
            if r.converged {
                "converged"
            } else {
                "not converged"
            }
        );
        println!(
            "residuals: row sums {:.1e}, min eigenvalue {:.1e}, cap {:.1e}, min entry {:.1e}",
            r.residuals.row_sum_deviation,
            r.residuals.min_eigenvalue,
            r.residuals.cap_violation,
            r.residuals.min_entry
        );
        println!(
            "partition {}  value {:.9}",
            res.rounding.partition, res.evaluation.value
        );
        if let (Some(c), Some(s)) = (&res.comparison, &res.search) {
            println!(
                "exhaustive {}  value {:.9}  gap {:.3e}",
                s.best_partition, c.exhaustive_value, c.gap
            );
        }
        println!(
            "wrote {}, {}, {}, {}",
            solver_path.display(),
            h_path.display(),
            dot_path.display(),
            part_path.display()
        );
    }
    if !res.relaxation.converged {
        return Err(NumericalFailure(format!(
            "relaxation did not converge in {} iterations",
            res.relaxation.iterations
        ))
        .into());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, quiet: bool) -> anyhow::Result<()> {
    let inst = load_instance(&a.instance)?;
    let p = parse_partition(&a.partition)?;
    let ev = evaluate_partition(&inst, &p, &a.metric)?;
    let eq = equilibrium_json(&ev.equilibrium);
    if let Some(path) = &a.out {
        write_file(path, &pretty(&eq))?;
    }
    if quiet {
        println!(
            "{}",
            json!({
                "metric": a.metric,
                "partition": PartitionJson::from(&p),
                "value": ev.value,
                "equilibrium": eq,
            })
        );
    } else {
        println!("{} at {p}: {:.9}", a.metric, ev.value);
    }
    Ok(())
}
