//! Game instances: interaction matrix `W`, standalone investments `b` and the
//! concave payoff family.
//!
//! Player `i` earns `S_i(W_i x) - c_i x_i`, where `W_i x` is its effective
//! investment. The cost `c_i` is never stored independently: it is derived
//! from the standalone investment through `S_i'(b_i) = c_i`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for the unit diagonal and other exact-input checks.
pub const INVARIANT_TOL: f64 = 1e-12;

/// Tolerance for cross-checking a supplied cost vector against `S'(b)`.
pub const COST_CHECK_TOL: f64 = 1e-9;

/// Largest standalone investment drawn by the instance generator.
pub const GENERATOR_B_MAX: f64 = 1000.0;

/// Payoff scale used by generated instances.
pub const DEFAULT_SCALE: f64 = 200.0;

/// A strictly increasing, strictly concave payoff with an invertible derivative.
pub trait ConcavePayoff {
    fn value(&self, agent: usize, x: f64) -> f64;
    fn derivative(&self, agent: usize, x: f64) -> f64;
    /// Returns the unique `x` with `S'(x) = slope`.
    fn derivative_inverse(&self, agent: usize, slope: f64) -> f64;
}

/// Per-agent payoff family and parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum PayoffSpec {
    /// `S_i(x) = a_i * sqrt(x)`.
    Sqrt { scale: Vec<f64> },
}

impl PayoffSpec {
    pub fn sqrt_uniform(n: usize, scale: f64) -> Self {
        PayoffSpec::Sqrt {
            scale: vec![scale; n],
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            PayoffSpec::Sqrt { .. } => "sqrt",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            PayoffSpec::Sqrt { scale } => scale.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks scales and samples `S'` on a grid: positive and strictly decreasing.
    pub fn validate(&self) -> Result<()> {
        let PayoffSpec::Sqrt { scale } = self;
        for (i, &a) in scale.iter().enumerate() {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::InvalidAgentValue {
                    what: "payoff scale",
                    agent: i + 1,
                    value: a,
                });
            }
        }
        for i in 0..self.len() {
            let mut prev = f64::INFINITY;
            for k in 1..=32 {
                let x = 2f64.powi(k - 8);
                let d = self.derivative(i, x);
                if !(d > 0.0 && d < prev) {
                    return Err(Error::InvalidAgentValue {
                        what: "payoff derivative",
                        agent: i + 1,
                        value: d,
                    });
                }
                prev = d;
            }
        }
        Ok(())
    }
}

impl ConcavePayoff for PayoffSpec {
    fn value(&self, agent: usize, x: f64) -> f64 {
        match self {
            PayoffSpec::Sqrt { scale } => scale[agent] * x.sqrt(),
        }
    }

    fn derivative(&self, agent: usize, x: f64) -> f64 {
        match self {
            PayoffSpec::Sqrt { scale } => scale[agent] / (2.0 * x.sqrt()),
        }
    }

    fn derivative_inverse(&self, agent: usize, slope: f64) -> f64 {
        match self {
            PayoffSpec::Sqrt { scale } => {
                let r = scale[agent] / (2.0 * slope);
                r * r
            }
        }
    }
}

/// Returns `max_i sum_{j != i} W_ij`, the infinity norm of `I - W`.
///
/// Fails unless `W` is square with unit diagonal, nonnegative off-diagonal
/// entries and strictly diagonally dominant rows.
pub fn contraction_factor(w: &DMatrix<f64>) -> Result<f64> {
    let (rows, cols) = w.shape();
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    let mut gamma: f64 = 0.0;
    for i in 0..rows {
        let d = w[(i, i)];
        if !d.is_finite() || (d - 1.0).abs() > INVARIANT_TOL {
            return Err(Error::Diagonal {
                agent: i + 1,
                value: d,
            });
        }
        let mut mass = 0.0;
        for j in 0..cols {
            if i == j {
                continue;
            }
            let v = w[(i, j)];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::NegativeWeight {
                    row: i + 1,
                    col: j + 1,
                    value: v,
                });
            }
            mass += v;
        }
        if mass >= 1.0 {
            return Err(Error::NotDominant { row: i + 1, mass });
        }
        gamma = gamma.max(mass);
    }
    Ok(gamma)
}

/// Outcome of the sufficient condition `min b > gamma/(1-gamma) * max b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interiority {
    pub holds: bool,
    pub margin: f64,
    pub bound: f64,
}

/// A validated network aggregative game. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GameInstance {
    w: DMatrix<f64>,
    b: DVector<f64>,
    payoff: PayoffSpec,
    c: DVector<f64>,
    gamma: f64,
}

impl GameInstance {
    pub fn new(w: DMatrix<f64>, b: DVector<f64>, payoff: PayoffSpec) -> Result<Self> {
        let gamma = contraction_factor(&w)?;
        let n = w.nrows();
        if n == 0 {
            return Err(Error::InvalidArgument(
                "instance needs at least one agent".into(),
            ));
        }
        if b.len() != n {
            return Err(Error::Dimension {
                what: "b",
                expected: n,
                found: b.len(),
            });
        }
        if payoff.len() != n {
            return Err(Error::Dimension {
                what: "payoff scale",
                expected: n,
                found: payoff.len(),
            });
        }
        for (i, &bi) in b.iter().enumerate() {
            if !(bi.is_finite() && bi > 0.0) {
                return Err(Error::InvalidAgentValue {
                    what: "standalone investment b",
                    agent: i + 1,
                    value: bi,
                });
            }
        }
        payoff.validate()?;
        let c = DVector::from_fn(n, |i, _| payoff.derivative(i, b[i]));
        Ok(GameInstance {
            w,
            b,
            payoff,
            c,
            gamma,
        })
    }

    /// Builds an instance and cross-checks a supplied cost vector against `S'(b)`.
    pub fn with_costs(
        w: DMatrix<f64>,
        b: DVector<f64>,
        payoff: PayoffSpec,
        c: &DVector<f64>,
    ) -> Result<Self> {
        let inst = Self::new(w, b, payoff)?;
        if c.len() != inst.n() {
            return Err(Error::Dimension {
                what: "c",
                expected: inst.n(),
                found: c.len(),
            });
        }
        for i in 0..inst.n() {
            let derived = inst.c[i];
            if (c[i] - derived).abs() > COST_CHECK_TOL * derived.abs().max(1.0) {
                return Err(Error::CostMismatch {
                    agent: i + 1,
                    given: c[i],
                    derived,
                });
            }
        }
        Ok(inst)
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn payoff_spec(&self) -> &PayoffSpec {
        &self.payoff
    }

    /// `||I - W||_inf`, cached at construction.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `I - W`.
    pub fn interaction(&self) -> DMatrix<f64> {
        DMatrix::identity(self.n(), self.n()) - &self.w
    }

    /// Indices `j != i` with `W_ij > 0`.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n())
            .filter(|&j| j != i && self.w[(i, j)] > 0.0)
            .collect()
    }

    pub fn check_interiority(&self) -> Interiority {
        let min_b = self.b.min();
        let max_b = self.b.max();
        let bound = self.gamma / (1.0 - self.gamma) * max_b;
        Interiority {
            holds: min_b > bound,
            margin: min_b - bound,
            bound,
        }
    }

    /// `U_i(x) = S_i(W_i x) - c_i x_i`.
    pub fn payoff(&self, i: usize, x: &DVector<f64>) -> Result<f64> {
        if i >= self.n() {
            return Err(Error::AgentOutOfRange {
                index: i,
                n: self.n(),
            });
        }
        check_actions(x, self.n())?;
        let effective = self.w.row(i).dot(&x.transpose());
        Ok(self.payoff.value(i, effective) - self.c[i] * x[i])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: InstanceFile = serde_json::from_str(text)?;
        file.into_instance()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&InstanceFile::from(self))?;
        s.push('\n');
        Ok(s)
    }
}

pub(crate) fn check_actions(x: &DVector<f64>, n: usize) -> Result<()> {
    if x.len() != n {
        return Err(Error::Dimension {
            what: "action vector",
            expected: n,
            found: x.len(),
        });
    }
    for (i, &v) in x.iter().enumerate() {
        if !(v >= 0.0) {
            return Err(Error::NegativeAction {
                agent: i + 1,
                value: v,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum ScaleField {
    Uniform(f64),
    PerAgent(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PayoffField {
    family: String,
    scale: ScaleField,
}

/// On-disk instance layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    n: usize,
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    payoff: PayoffField,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    c: Option<Vec<f64>>,
}

impl InstanceFile {
    fn into_instance(self) -> Result<GameInstance> {
        let n = self.n;
        if self.w.len() != n {
            return Err(Error::Dimension {
                what: "rows of W",
                expected: n,
                found: self.w.len(),
            });
        }
        for row in &self.w {
            if row.len() != n {
                return Err(Error::Dimension {
                    what: "columns of W",
                    expected: n,
                    found: row.len(),
                });
            }
        }
        let w = DMatrix::from_fn(n, n, |i, j| self.w[i][j]);
        let b = DVector::from_vec(self.b);
        if self.payoff.family != "sqrt" {
            return Err(Error::InvalidArgument(format!(
                "unknown payoff family {:?}",
                self.payoff.family
            )));
        }
        let scale = match self.payoff.scale {
            ScaleField::Uniform(a) => vec![a; n],
            ScaleField::PerAgent(v) => v,
        };
        let payoff = PayoffSpec::Sqrt { scale };
        match self.c {
            Some(c) => GameInstance::with_costs(w, b, payoff, &DVector::from_vec(c)),
            None => GameInstance::new(w, b, payoff),
        }
    }
}

impl From<&GameInstance> for InstanceFile {
    fn from(inst: &GameInstance) -> Self {
        let n = inst.n();
        let PayoffSpec::Sqrt { scale } = &inst.payoff;
        let scale = if scale.iter().all(|&a| a == scale[0]) {
            ScaleField::Uniform(scale[0])
        } else {
            ScaleField::PerAgent(scale.clone())
        };
        InstanceFile {
            n,
            w: (0..n)
                .map(|i| (0..n).map(|j| inst.w[(i, j)]).collect())
                .collect(),
            b: inst.b.iter().copied().collect(),
            payoff: PayoffField {
                family: "sqrt".into(),
                scale,
            },
            c: None,
        }
    }
}

/// Parameters for [`generate_instance`].
#[derive(Debug, Clone, Copy)]
pub struct GeneratorParams {
    pub n: usize,
    pub seed: u64,
    /// Upper bound on the contraction factor, in (0, 1).
    pub gamma: f64,
    /// Ratio `min b / max b` lower bound; must exceed `gamma / (1 - gamma)`.
    pub rho: f64,
    /// Probability that an off-diagonal entry is nonzero.
    pub density: f64,
}

/// Draws a random instance that satisfies diagonal dominance and the
/// interiority condition by construction.
///
/// Each row's off-diagonal mass is rescaled to a uniform draw in
/// `[gamma/2, gamma]` and `b` is drawn uniformly from `[rho * B, B]`.
pub fn generate_instance(params: &GeneratorParams) -> Result<GameInstance> {
    let GeneratorParams {
        n,
        seed,
        gamma,
        rho,
        density,
    } = *params;
    if n < 1 {
        return Err(Error::Infeasible("n must be at least 1".into()));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Infeasible(format!(
            "gamma = {gamma} must lie in (0, 1)"
        )));
    }
    let threshold = gamma / (1.0 - gamma);
    if !(rho > threshold && rho <= 1.0) {
        return Err(Error::Infeasible(format!(
            "rho = {rho} must lie in (gamma/(1-gamma), 1] = ({threshold}, 1]"
        )));
    }
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::Infeasible(format!(
            "density = {density} must lie in [0, 1]"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        let mut mass = 0.0;
        for j in 0..n {
            if i != j && rng.gen::<f64>() < density {
                let v = rng.gen_range(f64::EPSILON..1.0);
                w[(i, j)] = v;
                mass += v;
            }
        }
        let target = rng.gen_range(0.5 * gamma..=gamma);
        if mass > 0.0 {
            let s = target / mass;
            for j in 0..n {
                if i != j {
                    w[(i, j)] *= s;
                }
            }
        }
    }
    let b = DVector::from_fn(n, |_, _| {
        rng.gen_range(rho * GENERATOR_B_MAX..=GENERATOR_B_MAX)
    });
    GameInstance::new(w, b, PayoffSpec::sqrt_uniform(n, DEFAULT_SCALE))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(b: f64) -> GameInstance {
        GameInstance::new(
            DMatrix::identity(1, 1),
            DVector::from_element(1, b),
            PayoffSpec::sqrt_uniform(1, 200.0),
        )
        .unwrap()
    }

    #[test]
    fn contraction_factor_of_identity_is_zero() {
        for n in 1..5 {
            assert_eq!(contraction_factor(&DMatrix::identity(n, n)).unwrap(), 0.0);
        }
    }

    #[test]
    fn contraction_factor_rejects_unit_row_mass() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(matches!(
            contraction_factor(&w),
            Err(Error::NotDominant { row: 1, .. })
        ));
    }

    #[test]
    fn contraction_factor_rejects_bad_shapes_and_entries() {
        let w = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert!(matches!(
            contraction_factor(&w),
            Err(Error::NotSquare { .. })
        ));
        let w = DMatrix::from_row_slice(2, 2, &[1.0, -0.1, 0.0, 1.0]);
        assert!(matches!(
            contraction_factor(&w),
            Err(Error::NegativeWeight { .. })
        ));
        let w = DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.0, 1.0]);
        assert!(matches!(
            contraction_factor(&w),
            Err(Error::Diagonal { agent: 1, .. })
        ));
    }

    #[test]
    fn cost_is_derivative_at_standalone_investment() {
        let inst = single(100.0);
        assert_eq!(inst.c()[0], 10.0);
        assert!((inst.payoff_spec().derivative_inverse(0, 10.0) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn payoff_examples() {
        let inst = single(100.0);
        let x = DVector::from_element(1, 100.0);
        assert!((inst.payoff(0, &x).unwrap() - 1000.0).abs() < 1e-9);
        assert_eq!(inst.payoff(0, &DVector::zeros(1)).unwrap(), 0.0);
        assert!(matches!(
            inst.payoff(0, &DVector::from_element(1, -1.0)),
            Err(Error::NegativeAction { .. })
        ));
        assert!(matches!(
            inst.payoff(1, &x),
            Err(Error::AgentOutOfRange { .. })
        ));
    }

    #[test]
    fn decoupled_payoff_ignores_other_agents() {
        let inst = GameInstance::new(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![50.0, 80.0]),
            PayoffSpec::sqrt_uniform(2, 200.0),
        )
        .unwrap();
        let a = inst.payoff(0, &DVector::from_vec(vec![30.0, 0.0])).unwrap();
        let b = inst
            .payoff(0, &DVector::from_vec(vec![30.0, 900.0]))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn interiority_examples() {
        let it = single(5.0).check_interiority();
        assert!(it.holds);
        assert_eq!(it.margin, 5.0);

        let mut w = DMatrix::identity(3, 3);
        w[(0, 1)] = 0.1;
        let inst = GameInstance::new(
            w,
            DVector::from_element(3, 7.0),
            PayoffSpec::sqrt_uniform(3, 200.0),
        )
        .unwrap();
        assert!(inst.check_interiority().holds);
    }

    #[test]
    fn zero_investment_is_rejected() {
        let err = GameInstance::new(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, 0.0]),
            PayoffSpec::sqrt_uniform(2, 200.0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidAgentValue { agent: 2, .. }));
    }

    #[test]
    fn json_rejects_bad_diagonal() {
        let text = r#"{"n":2,"W":[[0.9,0.0],[0.0,1.0]],"b":[1.0,2.0],"payoff":{"family":"sqrt","scale":200}}"#;
        let err = GameInstance::from_json(text).unwrap_err();
        assert!(err.to_string().contains("W[1,1]"), "{err}");
    }

    #[test]
    fn json_cost_cross_check() {
        let ok = r#"{"n":1,"W":[[1.0]],"b":[100.0],"payoff":{"family":"sqrt","scale":[200.0]},"c":[10.0]}"#;
        assert!(GameInstance::from_json(ok).is_ok());
        let bad = r#"{"n":1,"W":[[1.0]],"b":[100.0],"payoff":{"family":"sqrt","scale":[200.0]},"c":[11.0]}"#;
        assert!(matches!(
            GameInstance::from_json(bad),
            Err(Error::CostMismatch { .. })
        ));
    }

    #[test]
    fn generator_rejects_infeasible_rho() {
        let p = GeneratorParams {
            n: 5,
            seed: 1,
            gamma: 0.6,
            rho: 0.5,
            density: 0.5,
        };
        assert!(matches!(generate_instance(&p), Err(Error::Infeasible(_))));
        let p = GeneratorParams {
            n: 0,
            gamma: 0.3,
            ..p
        };
        assert!(generate_instance(&p).is_err());
    }

    #[test]
    fn generator_is_deterministic_and_feasible() {
        let p = GeneratorParams {
            n: 10,
            seed: 42,
            gamma: 0.49,
            rho: 0.97,
            density: 0.5,
        };
        let a = generate_instance(&p).unwrap();
        let b = generate_instance(&p).unwrap();
        assert_eq!(a, b);
        assert!(a.gamma() <= 0.49 + 1e-12);
        let it = a.check_interiority();
        assert!(it.holds && it.margin > 0.0);
    }
}
