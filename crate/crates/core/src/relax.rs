//! Continuous relaxation of the partition problem.
//!
//! The discrete observation matrices `H_p` are relaxed to the convex set of
//! symmetric doubly-stochastic positive-semidefinite matrices, optionally
//! capped entrywise by `1/L`. Equilibria are replaced by the two-term
//! approximation `u(H) = (I + (I-W)H) b`, which makes the free-riding objective
//! linear and the welfare objective concave in `H`. Both are optimised by
//! projected gradient with an Armijo backtracking line search; the projection
//! is Dykstra's alternating scheme between the stochastic PSD matrices and the
//! entrywise box.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::game::{ConcavePayoff, GameInstance};
use crate::metrics::MetricSpec;
use crate::partition::ObservationMatrix;

/// `{ H = H', H1 = 1, H >= 0, H PSD }`, optionally with `H <= 1/L`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibleSetSpec {
    n: usize,
    min_block: usize,
}

impl FeasibleSetSpec {
    pub fn new(n: usize, min_block: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        if min_block == 0 || min_block > n {
            return Err(Error::InvalidArgument(format!(
                "minimum block size {min_block} must lie in 1..={n}"
            )));
        }
        Ok(FeasibleSetSpec { n, min_block })
    }

    pub fn unconstrained(n: usize) -> Result<Self> {
        Self::new(n, 1)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn min_block(&self) -> usize {
        self.min_block
    }

    /// Entrywise upper bound `1/L`; `None` when `L = 1`.
    pub fn cap(&self) -> Option<f64> {
        (self.min_block > 1).then(|| 1.0 / self.min_block as f64)
    }

    /// A feasible starting point: identity without a cap, `J/n` with one.
    pub fn initial_point(&self) -> DMatrix<f64> {
        if self.min_block == 1 {
            DMatrix::identity(self.n, self.n)
        } else {
            DMatrix::from_element(self.n, self.n, 1.0 / self.n as f64)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Residuals {
    /// Largest `|row sum - 1|` (rows and columns).
    pub row_sum_deviation: f64,
    pub min_eigenvalue: f64,
    /// `max(0, max entry - cap)`; zero without a cap.
    pub cap_violation: f64,
    pub min_entry: f64,
}

impl Residuals {
    pub fn of(h: &DMatrix<f64>, spec: &FeasibleSetSpec) -> Self {
        let o = ObservationMatrix::relaxed(h.clone()).expect("square");
        Residuals {
            row_sum_deviation: o.stochasticity_error(),
            min_eigenvalue: o.min_eigenvalue(),
            cap_violation: spec.cap().map_or(0.0, |c| (h.max() - c).max(0.0)),
            min_entry: h.min(),
        }
    }

    pub fn within(&self, tol: f64) -> bool {
        self.row_sum_deviation <= tol
            && self.min_eigenvalue >= -tol
            && self.cap_violation <= tol
            && self.min_entry >= -tol
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectionOptions {
    pub tol: f64,
    pub max_cycles: usize,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        ProjectionOptions {
            tol: 1e-10,
            max_cycles: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub matrix: ObservationMatrix,
    pub cycles: usize,
    pub residuals: Residuals,
    /// False when `max_cycles` ran out with residuals above `tol`.
    pub converged: bool,
    /// Final box correction; passing it back speeds up nearby projections.
    pub dual: DMatrix<f64>,
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn project_box(m: &DMatrix<f64>, cap: Option<f64>) -> DMatrix<f64> {
    let hi = cap.unwrap_or(f64::INFINITY);
    m.map(|v| v.clamp(0.0, hi))
}

/// Eigen-decomposes and clamps negative eigenvalues to zero.
pub fn project_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = symmetrize(m);
    let n = sym.nrows();
    let mat = faer::Mat::<f64>::from_fn(n, n, |i, j| sym[(i, j)]);
    let Ok(eig) = mat.self_adjoint_eigen(faer::Side::Lower) else {
        return project_psd_fallback(&sym);
    };
    let (q, d) = (eig.U(), eig.S());
    if (0..n).all(|k| d[k] >= 0.0) {
        return sym;
    }
    let keep: Vec<usize> = (0..n).filter(|&k| d[k] > 0.0).collect();
    let out = DMatrix::from_fn(n, n, |i, j| {
        keep.iter().map(|&k| q[(i, k)] * d[k] * q[(j, k)]).sum()
    });
    symmetrize(&out)
}

fn project_psd_fallback(sym: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(sym.clone());
    let q = &eig.eigenvectors;
    let d = eig.eigenvalues.map(|l| l.max(0.0));
    let qd = DMatrix::from_fn(q.nrows(), q.ncols(), |i, j| q[(i, j)] * d[j]);
    symmetrize(&(qd * q.transpose()))
}

/// Nearest PSD symmetric matrix with unit row sums.
///
/// Every such matrix is `J/n + Z` with `Z` PSD and `Z1 = 0`, and the two
/// parts live on orthogonal subspaces, so the projection is
/// `J/n + proj_psd(P M P)` with `P = I - J/n`.
fn project_stochastic_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let nf = n as f64;
    let sym = symmetrize(m);
    let row_mean = DVector::from_fn(n, |i, _| sym.row(i).sum() / nf);
    let total_mean = row_mean.sum() / nf;
    let centered = DMatrix::from_fn(n, n, |i, j| {
        sym[(i, j)] - row_mean[i] - row_mean[j] + total_mean
    });
    let z = project_psd(&centered);
    // re-centre to remove rounding drift in the null direction
    let z_mean = DVector::from_fn(n, |i, _| z.row(i).sum() / nf);
    let z_total = z_mean.sum() / nf;
    DMatrix::from_fn(n, n, |i, j| {
        z[(i, j)] - z_mean[i] - z_mean[j] + z_total + 1.0 / nf
    })
}

/// Euclidean projection of `m` onto the feasible set.
///
/// The affine and PSD constraints are handled jointly in closed form, which
/// leaves two sets: the stochastic PSD matrices `A` and the box `B = [0, cap]`.
/// The iteration is Dykstra's scheme in its dual form: `Y` is the box
/// correction term, the primal point is `X = proj_A(M - Y)`, and
/// `Y <- V - proj_B(V)` with `V = Y + X`. The dual steps are accelerated with
/// Nesterov momentum and adaptive restart. Every returned point is exactly
/// stochastic and PSD; the box residual is what the iteration drives below
/// `tol`.
pub fn project_feasible(
    m: &DMatrix<f64>,
    spec: &FeasibleSetSpec,
    opts: &ProjectionOptions,
) -> Result<Projection> {
    project_feasible_warm(m, spec, opts, None)
}

/// [`project_feasible`] started from a previous dual term.
pub fn project_feasible_warm(
    m: &DMatrix<f64>,
    spec: &FeasibleSetSpec,
    opts: &ProjectionOptions,
    warm: Option<&DMatrix<f64>>,
) -> Result<Projection> {
    if m.nrows() != spec.n() || m.ncols() != spec.n() {
        return Err(Error::Dimension {
            what: "matrix to project",
            expected: spec.n(),
            found: m.nrows(),
        });
    }
    let n = spec.n();
    let cap = spec.cap();
    let box_error = |x: &DMatrix<f64>| cap.map_or(0.0, |c| (x.max() - c).max(0.0)).max(-x.min());
    let m = symmetrize(m);

    let mut y = match warm {
        Some(d) if d.nrows() == n && d.ncols() == n => d.clone(),
        _ => DMatrix::<f64>::zeros(n, n),
    };
    let mut x = project_stochastic_psd(&(&m - &y));
    let mut cycles = 0;
    let mut converged = box_error(&x) <= opts.tol;
    if !converged && warm.is_some() {
        let cold = project_stochastic_psd(&m);
        if box_error(&cold) <= opts.tol {
            x = cold;
            y.fill(0.0);
            converged = true;
        }
    }

    let mut z = y.clone();
    let mut momentum = 1.0f64;
    while !converged && cycles < opts.max_cycles {
        cycles += 1;
        // the primal estimate at the extrapolated dual point doubles as the iterate
        let x_z = project_stochastic_psd(&(&m - &z));
        let moved = (&x_z - &x).amax();
        x = x_z;
        if moved <= opts.tol && box_error(&x) <= opts.tol {
            converged = true;
            y = z.clone();
            break;
        }
        let v = &z + &x;
        let y_next = &v - project_box(&v, cap);
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        // restart when the step opposes the momentum direction
        let restart = (&z - &y_next).dot(&(&y_next - &y)) > 0.0;
        if restart {
            momentum = 1.0;
            z = y_next.clone();
        } else {
            z = &y_next + (&y_next - &y) * ((momentum - 1.0) / next_momentum);
            momentum = next_momentum;
        }
        y = y_next;
    }
    let residuals = Residuals::of(&x, spec);
    Ok(Projection {
        matrix: ObservationMatrix::relaxed(x)?,
        cycles,
        residuals,
        converged,
        dual: y,
    })
}

/// `u(H) = (I + (I-W)H) b`.
pub fn approx_actions(instance: &GameInstance, h: &DMatrix<f64>) -> DVector<f64> {
    let b = instance.b();
    b + instance.interaction() * (h * b)
}

/// Relaxed welfare `sum_i S_i((W u)_i) - c_i u_i`.
pub fn welfare_objective(instance: &GameInstance, h: &DMatrix<f64>) -> Result<f64> {
    let u = approx_actions(instance, h);
    let v = instance.w() * &u;
    let payoff = instance.payoff_spec();
    let mut total = 0.0;
    for i in 0..instance.n() {
        if !(v[i] > 0.0) {
            return Err(Error::NonPositiveInvestment {
                agent: i + 1,
                value: v[i],
            });
        }
        total += payoff.value(i, v[i]) - instance.c()[i] * u[i];
    }
    Ok(total)
}

/// Gradient of [`welfare_objective`]: the rank-one matrix `A'(W's - c) b'`
/// with `A = I - W` and `s_i = S_i'((W u)_i)`.
pub fn grad_welfare(instance: &GameInstance, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let u = approx_actions(instance, h);
    let v = instance.w() * &u;
    let payoff = instance.payoff_spec();
    let mut s = DVector::zeros(instance.n());
    for i in 0..instance.n() {
        if !(v[i] > 0.0) {
            return Err(Error::NonPositiveInvestment {
                agent: i + 1,
                value: v[i],
            });
        }
        s[i] = payoff.derivative(i, v[i]);
    }
    let left = instance.interaction().transpose() * (instance.w().transpose() * s - instance.c());
    Ok(left * instance.b().transpose())
}

fn subset_indicator(n: usize, subset: Option<&[usize]>) -> DVector<f64> {
    match subset {
        None => DVector::from_element(n, 1.0),
        Some(s) => {
            let mut v = DVector::zeros(n);
            for &i in s {
                v[i] = 1.0;
            }
            v
        }
    }
}

/// Relaxed free riding `sum_{i in S} (b_i - u_i) / b_i`.
pub fn free_riding_objective(
    instance: &GameInstance,
    h: &DMatrix<f64>,
    subset: Option<&[usize]>,
) -> f64 {
    let u = approx_actions(instance, h);
    let b = instance.b();
    let ind = subset_indicator(instance.n(), subset);
    (0..instance.n())
        .map(|i| ind[i] * (b[i] - u[i]) / b[i])
        .sum()
}

/// Constant gradient `-(A' diag(b)^{-1} 1_S) b'` of [`free_riding_objective`].
pub fn grad_free_riding(instance: &GameInstance, subset: Option<&[usize]>) -> DMatrix<f64> {
    let b = instance.b();
    let ind = subset_indicator(instance.n(), subset);
    let weights = DVector::from_fn(instance.n(), |i, _| ind[i] / b[i]);
    -(instance.interaction().transpose() * weights) * b.transpose()
}

/// Relaxed objective in the metric's natural orientation.
pub fn relaxed_objective(
    instance: &GameInstance,
    metric: &MetricSpec,
    h: &DMatrix<f64>,
) -> Result<f64> {
    match metric {
        MetricSpec::Welfare => welfare_objective(instance, h),
        _ => Ok(free_riding_objective(
            instance,
            h,
            metric.free_riding_subset(),
        )),
    }
}

pub fn relaxed_gradient(
    instance: &GameInstance,
    metric: &MetricSpec,
    h: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    match metric {
        MetricSpec::Welfare => grad_welfare(instance, h),
        _ => Ok(grad_free_riding(instance, metric.free_riding_subset())),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverParams {
    pub max_iter: usize,
    /// Stop once the relative objective change stays below this ...
    pub rel_tol: f64,
    /// ... for this many consecutive iterations.
    pub patience: usize,
    pub armijo: f64,
    pub max_halvings: usize,
    pub projection: ProjectionOptions,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            max_iter: 5000,
            rel_tol: 1e-9,
            patience: 5,
            armijo: 1e-4,
            max_halvings: 60,
            projection: ProjectionOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientCheck {
    pub analytic: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct SolverReport {
    pub metric: MetricSpec,
    pub min_block: usize,
    pub h_star: ObservationMatrix,
    /// Objective after every accepted step, starting at the initial point.
    pub objective_trace: Vec<f64>,
    pub residuals: Residuals,
    pub gradient_check: GradientCheck,
    pub iterations: usize,
    pub converged: bool,
    /// Set when some projection hit its cycle limit.
    pub projection_warning: bool,
}

impl SolverReport {
    pub fn objective(&self) -> f64 {
        *self
            .objective_trace
            .last()
            .expect("trace starts with the initial value")
    }

    pub fn to_json(&self) -> serde_json::Value {
        let h = self.h_star.matrix();
        let rows: Vec<Vec<f64>> = (0..h.nrows())
            .map(|i| h.row(i).iter().copied().collect())
            .collect();
        serde_json::json!({
            "metric": self.metric,
            "L": self.min_block,
            "objective": self.objective(),
            "objective_trace": self.objective_trace,
            "residuals": self.residuals,
            "gradient_check": self.gradient_check,
            "iterations": self.iterations,
            "converged": self.converged,
            "projection_warning": self.projection_warning,
            "H_star": rows,
        })
    }
}

/// Row-major CSV of a matrix, full precision.
pub fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Central-difference check of the gradient along a fixed symmetric direction.
fn gradient_check(
    instance: &GameInstance,
    metric: &MetricSpec,
    h: &DMatrix<f64>,
) -> Result<GradientCheck> {
    let n = instance.n();
    let dir = DMatrix::from_fn(n, n, |i, j| {
        let k = (i + j) as f64;
        (0.7 * k + 0.3).sin() / n as f64
    });
    let g = relaxed_gradient(instance, metric, h)?;
    let analytic = g.dot(&dir);
    let eps = 1e-6;
    let plus = relaxed_objective(instance, metric, &(h + &dir * eps))?;
    let minus = relaxed_objective(instance, metric, &(h - &dir * eps))?;
    let finite_difference = (plus - minus) / (2.0 * eps);
    let relative_error = (analytic - finite_difference).abs()
        / analytic.abs().max(finite_difference.abs()).max(1e-12);
    Ok(GradientCheck {
        analytic,
        finite_difference,
        relative_error,
    })
}

/// Maximises relaxed welfare or minimises relaxed free riding over the
/// feasible set. Deterministic for fixed inputs.
pub fn solve_relaxation(
    instance: &GameInstance,
    metric: &MetricSpec,
    spec: &FeasibleSetSpec,
    params: &SolverParams,
) -> Result<SolverReport> {
    if spec.n() != instance.n() {
        return Err(Error::Dimension {
            what: "feasible set",
            expected: instance.n(),
            found: spec.n(),
        });
    }
    metric.validate(instance.n())?;
    let sign = if metric.maximize() { -1.0 } else { 1.0 };
    let v_floor = 1e-9 * instance.b().min();
    let loss = |h: &DMatrix<f64>| -> Option<f64> {
        if metric.maximize() {
            let v = instance.w() * approx_actions(instance, h);
            if v.min() <= v_floor {
                return None;
            }
        }
        relaxed_objective(instance, metric, h)
            .ok()
            .map(|f| sign * f)
    };

    let mut h = spec.initial_point();
    let mut current = loss(&h).ok_or(Error::NonPositiveInvestment {
        agent: 0,
        value: f64::NAN,
    })?;
    let gradient_check = gradient_check(instance, metric, &h)?;
    let mut trace = vec![sign * current];
    let mut projection_warning = false;

    let g0 = relaxed_gradient(instance, metric, &h)? * sign;
    let g0_norm = g0.norm();
    if g0_norm == 0.0 {
        let residuals = Residuals::of(&h, spec);
        return Ok(SolverReport {
            metric: metric.clone(),
            min_block: spec.min_block(),
            h_star: ObservationMatrix::relaxed(h)?,
            objective_trace: trace,
            residuals,
            gradient_check,
            iterations: 0,
            converged: true,
            projection_warning,
        });
    }
    let mut step = 1.0 / g0_norm;
    let mut quiet = 0;
    let mut iterations = 0;
    let mut converged = false;
    let mut dual: Option<DMatrix<f64>> = None;

    while iterations < params.max_iter {
        let g = relaxed_gradient(instance, metric, &h)? * sign;
        let mut accepted = None;
        let mut trial_step = step;
        for _ in 0..=params.max_halvings {
            let proj = project_feasible_warm(
                &(&h - &g * trial_step),
                spec,
                &params.projection,
                dual.as_ref(),
            )?;
            if !proj.converged {
                // far-off trial points are slow to project; a shorter step is closer
                projection_warning = true;
                trial_step *= 0.5;
                continue;
            }
            let candidate = proj.matrix.into_matrix();
            if let Some(f) = loss(&candidate) {
                let decrease = g.dot(&(&candidate - &h));
                if f <= current + params.armijo * decrease {
                    dual = Some(proj.dual);
                    accepted = Some((candidate, f));
                    break;
                }
            }
            trial_step *= 0.5;
        }
        iterations += 1;
        let Some((next, f)) = accepted else {
            // no descent along the projection arc: stationary to working precision
            converged = true;
            break;
        };
        let rel = (current - f).abs() / current.abs().max(1e-12);
        h = next;
        current = f;
        trace.push(sign * current);
        // grow only after a step that went through untouched
        step = if trial_step == step {
            step * 2.0
        } else {
            trial_step
        };
        if rel < params.rel_tol {
            quiet += 1;
            if quiet >= params.patience {
                converged = true;
                break;
            }
        } else {
            quiet = 0;
        }
    }

    let residuals = Residuals::of(&h, spec);
    Ok(SolverReport {
        metric: metric.clone(),
        min_block: spec.min_block(),
        h_star: ObservationMatrix::relaxed(h)?,
        objective_trace: trace,
        residuals,
        gradient_check,
        iterations,
        converged,
        projection_warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::PayoffSpec;
    use crate::partition::{h_matrix, Partition};

    #[test]
    fn zero_projects_to_uniform_matrix() {
        for n in 1..=4 {
            let spec = FeasibleSetSpec::unconstrained(n).unwrap();
            let p = project_feasible(&DMatrix::zeros(n, n), &spec, &ProjectionOptions::default())
                .unwrap();
            let expect = DMatrix::from_element(n, n, 1.0 / n as f64);
            assert!((p.matrix.matrix() - expect).amax() < 1e-9, "n={n}");
            assert!(p.converged);
        }
    }

    #[test]
    fn feasible_points_are_fixed() {
        let p: Partition = "{1,3},{2,4,5},{6,7}".parse().unwrap();
        let h = h_matrix(&p);
        let spec = FeasibleSetSpec::new(7, 2).unwrap();
        let out = project_feasible(h.matrix(), &spec, &ProjectionOptions::default()).unwrap();
        assert!((out.matrix.matrix() - h.matrix()).amax() < 1e-9);
    }

    #[test]
    fn spec_validation() {
        assert!(FeasibleSetSpec::new(3, 4).is_err());
        assert!(FeasibleSetSpec::new(3, 0).is_err());
        assert_eq!(FeasibleSetSpec::new(3, 1).unwrap().cap(), None);
        assert_eq!(FeasibleSetSpec::new(4, 2).unwrap().cap(), Some(0.5));
    }

    #[test]
    fn decoupled_game_has_flat_objectives() {
        let inst = GameInstance::new(
            DMatrix::identity(3, 3),
            DVector::from_vec(vec![10.0, 20.0, 30.0]),
            PayoffSpec::sqrt_uniform(3, 200.0),
        )
        .unwrap();
        let h = DMatrix::from_element(3, 3, 1.0 / 3.0);
        assert_eq!(grad_welfare(&inst, &h).unwrap().amax(), 0.0);
        assert_eq!(grad_free_riding(&inst, None).amax(), 0.0);
        assert_eq!(free_riding_objective(&inst, &h, None), 0.0);
        let report = solve_relaxation(
            &inst,
            &MetricSpec::TotalFreeRiding,
            &FeasibleSetSpec::unconstrained(3).unwrap(),
            &SolverParams::default(),
        )
        .unwrap();
        assert!(report.converged);
        assert_eq!(report.objective(), 0.0);
    }
}
