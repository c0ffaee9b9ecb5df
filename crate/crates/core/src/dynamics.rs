//! Best-response dynamics under partial observability.
//!
//! Players estimate the action profile with `H x` and best respond, giving
//! `x(t+1) = max(0, (I - W) H x(t) + b)`. Under diagonal dominance the map is a
//! contraction in the infinity norm with factor `gamma = ||I - W||`, so the
//! limit exists, is unique, and satisfies the linear complementarity
//! conditions `y = (I - (I-W)H) x - b >= 0`, `x >= 0`, `y'x = 0`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::game::{check_actions, GameInstance};
use crate::partition::ObservationMatrix;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 1_000_000;
/// Smallest coordinate accepted as strictly interior by [`interior_solve`].
pub const INTERIOR_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Iteration,
    InteriorSolve,
}

/// Residuals of the complementarity conditions at a candidate equilibrium.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LcpResidual {
    /// `min_i y_i`.
    pub min_slack: f64,
    /// `min_i x_i`.
    pub min_action: f64,
    /// `max_i |y_i x_i|`.
    pub max_complementarity: f64,
}

impl LcpResidual {
    pub fn is_certified(&self, eps: f64) -> bool {
        self.min_slack >= -eps && self.min_action >= 0.0 && self.max_complementarity <= eps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumResult {
    pub x_star: DVector<f64>,
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<DVector<f64>>>,
    /// `||x(t+1) - x(t)||` for every executed step.
    pub step_norms: Vec<f64>,
    /// Successive step-norm ratios `||x(t+2)-x(t+1)|| / ||x(t+1)-x(t)||`.
    pub ratios: Vec<f64>,
    pub lcp: LcpResidual,
    pub method: Method,
}

#[derive(Debug, Clone, Copy)]
pub struct IterationOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub record_trace: bool,
}

impl Default for IterationOptions {
    fn default() -> Self {
        IterationOptions {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            record_trace: false,
        }
    }
}

fn check_h(instance: &GameInstance, h: &ObservationMatrix) -> Result<()> {
    if h.n() != instance.n() {
        return Err(Error::Dimension {
            what: "observation matrix",
            expected: instance.n(),
            found: h.n(),
        });
    }
    Ok(())
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.amax()
}

/// `(I - W) H`, the linear part of the best-response map.
pub fn response_matrix(instance: &GameInstance, h: &ObservationMatrix) -> DMatrix<f64> {
    instance.interaction() * h.matrix()
}

/// One synchronous best-response step.
pub fn br_step(
    instance: &GameInstance,
    h: &ObservationMatrix,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_h(instance, h)?;
    check_actions(x, instance.n())?;
    let m = response_matrix(instance, h);
    Ok(step_with(&m, instance.b(), x))
}

fn step_with(m: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
    (m * x + b).map(|v| v.max(0.0))
}

/// Runs the dynamics from `x0` until `||x(t+1) - x(t)|| <= tol (1 - gamma)`,
/// which bounds the distance to the fixed point by `tol`.
pub fn iterate_equilibrium(
    instance: &GameInstance,
    h: &ObservationMatrix,
    x0: &DVector<f64>,
    opts: &IterationOptions,
) -> Result<EquilibriumResult> {
    check_h(instance, h)?;
    check_actions(x0, instance.n())?;
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tol = {} must be positive",
            opts.tol
        )));
    }
    let m = response_matrix(instance, h);
    let b = instance.b();
    let stop = opts.tol * (1.0 - instance.gamma());

    let mut x = x0.clone();
    let mut trace = opts.record_trace.then(|| vec![x.clone()]);
    let mut step_norms = Vec::new();
    let mut ratios = Vec::new();
    let mut iterations = 0;
    loop {
        if iterations >= opts.max_iter {
            return Err(Error::NoConvergence {
                iterations,
                last_ratio: ratios.last().copied().unwrap_or(f64::NAN),
            });
        }
        let next = step_with(&m, b, &x);
        let d = inf_norm(&(&next - &x));
        if let Some(&prev) = step_norms.last() {
            if prev > 0.0 {
                ratios.push(d / prev);
            }
        }
        step_norms.push(d);
        if d <= stop {
            // ||x - x*|| <= d / (1 - gamma) <= tol
            break;
        }
        x = next;
        iterations += 1;
        if let Some(t) = trace.as_mut() {
            t.push(x.clone());
        }
    }
    let x = polish(&m, b, &x, opts.tol).unwrap_or(x);
    let lcp = lcp_check(instance, h, &x)?;
    Ok(EquilibriumResult {
        x_star: x,
        iterations,
        trace,
        step_norms,
        ratios,
        lcp,
        method: Method::Iteration,
    })
}

/// Solves the linear system on the support of `x` to remove the iteration's
/// truncation error. Returns `None` unless the result is an equilibrium
/// within `tol` of `x`.
fn polish(m: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>, tol: f64) -> Option<DVector<f64>> {
    let support: Vec<usize> = (0..x.len()).filter(|&i| x[i] > 0.0).collect();
    let k = support.len();
    let mut out = DVector::zeros(x.len());
    if k > 0 {
        let system = DMatrix::from_fn(k, k, |r, c| {
            let delta = if r == c { 1.0 } else { 0.0 };
            delta - m[(support[r], support[c])]
        });
        let rhs = DVector::from_fn(k, |r, _| b[support[r]]);
        let lu = system.clone().lu();
        let mut sol = lu.solve(&rhs)?;
        let residual = &rhs - &system * &sol;
        sol += lu.solve(&residual)?;
        for (r, &i) in support.iter().enumerate() {
            if !(sol[r] > 0.0) {
                return None;
            }
            out[i] = sol[r];
        }
    }
    let response = m * &out + b;
    let off_support_ok = (0..x.len())
        .filter(|i| !support.contains(i))
        .all(|i| response[i] <= 0.0);
    (off_support_ok && (&out - x).amax() <= tol).then_some(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum InteriorOutcome {
    Interior(EquilibriumResult),
    /// The linear solution has a coordinate at or below the interior threshold.
    NotInterior {
        solution: DVector<f64>,
    },
}

/// Solves `(I - (I-W)H) x = b` and accepts the solution when strictly positive.
pub fn interior_solve(instance: &GameInstance, h: &ObservationMatrix) -> Result<InteriorOutcome> {
    check_h(instance, h)?;
    let n = instance.n();
    let system = DMatrix::identity(n, n) - response_matrix(instance, h);
    let lu = system.clone().lu();
    let mut x = lu.solve(instance.b()).ok_or(Error::Singular)?;
    // one round of iterative refinement
    let residual = instance.b() - &system * &x;
    x += lu.solve(&residual).ok_or(Error::Singular)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular);
    }
    if x.min() <= INTERIOR_THRESHOLD {
        return Ok(InteriorOutcome::NotInterior { solution: x });
    }
    let lcp = lcp_check(instance, h, &x)?;
    Ok(InteriorOutcome::Interior(EquilibriumResult {
        x_star: x,
        iterations: 0,
        trace: None,
        step_norms: Vec::new(),
        ratios: Vec::new(),
        lcp,
        method: Method::InteriorSolve,
    }))
}

/// Unique equilibrium: interior solve when it succeeds, iteration from 0 otherwise.
pub fn equilibrium(instance: &GameInstance, h: &ObservationMatrix) -> Result<EquilibriumResult> {
    match interior_solve(instance, h)? {
        InteriorOutcome::Interior(r) => Ok(r),
        InteriorOutcome::NotInterior { .. } => iterate_equilibrium(
            instance,
            h,
            &DVector::zeros(instance.n()),
            &IterationOptions::default(),
        ),
    }
}

/// `y = (I - (I-W)H) x - b`.
pub fn lcp_slack(
    instance: &GameInstance,
    h: &ObservationMatrix,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_h(instance, h)?;
    check_actions(x, instance.n())?;
    Ok(x - response_matrix(instance, h) * x - instance.b())
}

pub fn lcp_check(
    instance: &GameInstance,
    h: &ObservationMatrix,
    x: &DVector<f64>,
) -> Result<LcpResidual> {
    let y = lcp_slack(instance, h, x)?;
    let max_complementarity = y
        .iter()
        .zip(x.iter())
        .map(|(yi, xi)| (yi * xi).abs())
        .fold(0.0, f64::max);
    Ok(LcpResidual {
        min_slack: y.min(),
        min_action: x.min(),
        max_complementarity,
    })
}

/// Two-term Neumann approximation `(I + (I-W)H) b`, without clamping.
pub fn neumann_approx(instance: &GameInstance, h: &ObservationMatrix) -> Result<DVector<f64>> {
    check_h(instance, h)?;
    let b = instance.b();
    Ok(b + response_matrix(instance, h) * b)
}

/// Trajectory CSV: header `t,x1,...,xn`, 12 significant digits.
pub fn trajectory_csv(trace: &[DVector<f64>]) -> String {
    let n = trace.first().map_or(0, |x| x.len());
    let mut out = String::from("t");
    for i in 1..=n {
        let _ = write!(out, ",x{i}");
    }
    out.push('\n');
    for (t, x) in trace.iter().enumerate() {
        let _ = write!(out, "{t}");
        for v in x.iter() {
            let _ = write!(out, ",{}", sig12(*v));
        }
        out.push('\n');
    }
    out
}

fn sig12(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let s = format!("{:.11e}", v);
    // normalise through parse so trailing zeros and exponent noise disappear
    let parsed: f64 = s.parse().unwrap_or(v);
    format!("{parsed}")
}
