//! Solver-agnostic convex conic programs.
//!
//! A [`ConicProgram`] is a list of scalar decision variables (grouped into
//! named blocks), a linear objective to minimize, and constraints of the
//! form "this vector of affine expressions lies in cone K". Cones supported:
//!
//! * `Zero`, `Nonneg`: componentwise `= 0` and `≥ 0`.
//! * `SecondOrder`: `(t, x) : ‖x‖₂ ≤ t`.
//! * `Psd { dim }`: the rows are the upper triangle, column by column, of a
//!   real symmetric `dim × dim` matrix (unscaled entries), which must be PSD.
//!   Complex Hermitian blocks enter through [`HermitianExpr::psd_rows`].
//! * `Exp`: `(x, y, z) : y·exp(x/y) ≤ z, y > 0`.
//! * `Power { alpha }`: `(x, y, z) : x^α·y^(1−α) ≥ |z|, x, y ≥ 0`.
//!
//! Backends implement [`ConicBackend`]; [`ClarabelBackend`] is the bundled one.

mod clarabel_backend;
mod dump;
mod hermitian;

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use nalgebra::DMatrix;
use num_complex::Complex;
use thiserror::Error;

pub use clarabel_backend::ClarabelBackend;
pub use dump::write_text;
pub use hermitian::{extract_hermitian, hermitian_embed, Extracted, HermitianExpr, HermitianVar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConicError {
    #[error("constraint `{label}`: {reason}")]
    Malformed { label: String, reason: String },
    #[error("matrix is not Hermitian (deviation {deviation:e})")]
    NotHermitian { deviation: f64 },
    #[error("embedded block violates the Hermitian structure by {deviation:e}")]
    EmbeddingStructure { deviation: f64 },
    #[error("backend setup failed: {0}")]
    Backend(String),
}

/// Index of one scalar decision variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub usize);

/// `Σ coeff·x_var + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AffineExpr {
    pub terms: Vec<(Var, f64)>,
    pub constant: f64,
}

impl AffineExpr {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(v: Var) -> Self {
        Self::term(v, 1.0)
    }

    pub fn term(v: Var, coeff: f64) -> Self {
        Self {
            terms: vec![(v, coeff)],
            constant: 0.0,
        }
    }

    pub fn add_term(&mut self, v: Var, coeff: f64) -> &mut Self {
        if coeff != 0.0 {
            self.terms.push((v, coeff));
        }
        self
    }

    pub fn add_expr(&mut self, other: &AffineExpr, scale: f64) -> &mut Self {
        if scale != 0.0 {
            self.terms
                .extend(other.terms.iter().map(|&(v, c)| (v, c * scale)));
            self.constant += other.constant * scale;
        }
        self
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = AffineExpr::zero();
        out.add_expr(self, s);
        out
    }

    /// Merges duplicate variables and drops zero coefficients.
    pub fn compact(&self) -> Self {
        let mut terms = self.terms.clone();
        terms.sort_by_key(|t| t.0);
        let mut merged: Vec<(Var, f64)> = Vec::with_capacity(terms.len());
        for (v, c) in terms {
            match merged.last_mut() {
                Some(last) if last.0 == v => last.1 += c,
                _ => merged.push((v, c)),
            }
        }
        merged.retain(|t| t.1 != 0.0);
        Self {
            terms: merged,
            constant: self.constant,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .fold(self.constant, |acc, &(v, c)| acc + c * x[v.0])
    }

    pub fn sum<'a>(items: impl IntoIterator<Item = &'a AffineExpr>) -> Self {
        let mut out = AffineExpr::zero();
        for e in items {
            out.add_expr(e, 1.0);
        }
        out
    }
}

impl From<Var> for AffineExpr {
    fn from(v: Var) -> Self {
        AffineExpr::var(v)
    }
}

impl From<f64> for AffineExpr {
    fn from(c: f64) -> Self {
        AffineExpr::constant(c)
    }
}

impl Add for AffineExpr {
    type Output = AffineExpr;
    fn add(mut self, rhs: AffineExpr) -> AffineExpr {
        self.add_expr(&rhs, 1.0);
        self
    }
}

impl Sub for AffineExpr {
    type Output = AffineExpr;
    fn sub(mut self, rhs: AffineExpr) -> AffineExpr {
        self.add_expr(&rhs, -1.0);
        self
    }
}

impl AddAssign<&AffineExpr> for AffineExpr {
    fn add_assign(&mut self, rhs: &AffineExpr) {
        self.add_expr(rhs, 1.0);
    }
}

impl Mul<f64> for AffineExpr {
    type Output = AffineExpr;
    fn mul(self, rhs: f64) -> AffineExpr {
        self.scaled(rhs)
    }
}

impl Neg for AffineExpr {
    type Output = AffineExpr;
    fn neg(self) -> AffineExpr {
        self.scaled(-1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cone {
    Zero,
    Nonneg,
    SecondOrder,
    Psd { dim: usize },
    Exp,
    Power { alpha: f64 },
}

impl Cone {
    fn name(&self) -> &'static str {
        match self {
            Cone::Zero => "zero",
            Cone::Nonneg => "nonneg",
            Cone::SecondOrder => "soc",
            Cone::Psd { .. } => "psd",
            Cone::Exp => "exp",
            Cone::Power { .. } => "pow",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub label: String,
    pub rows: Vec<AffineExpr>,
    pub cone: Cone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Scalar,
    Vector,
    Hermitian { dim: usize },
}

/// A named, contiguous range of scalar variables.
#[derive(Debug, Clone, PartialEq)]
pub struct VarBlock {
    pub name: String,
    pub kind: BlockKind,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConicProgram {
    blocks: Vec<VarBlock>,
    n_vars: usize,
    objective: AffineExpr,
    constraints: Vec<Constraint>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.n_vars
    }

    pub fn blocks(&self) -> &[VarBlock] {
        &self.blocks
    }

    pub fn objective(&self) -> &AffineExpr {
        &self.objective
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    fn alloc(&mut self, name: impl Into<String>, kind: BlockKind, len: usize) -> usize {
        let start = self.n_vars;
        self.blocks.push(VarBlock {
            name: name.into(),
            kind,
            start,
            len,
        });
        self.n_vars += len;
        start
    }

    pub fn scalar(&mut self, name: impl Into<String>) -> Var {
        Var(self.alloc(name, BlockKind::Scalar, 1))
    }

    pub fn vector(&mut self, name: impl Into<String>, len: usize) -> Vec<Var> {
        let start = self.alloc(name, BlockKind::Vector, len);
        (start..start + len).map(Var).collect()
    }

    /// An `n × n` complex Hermitian matrix variable (n² real unknowns).
    pub fn hermitian(&mut self, name: impl Into<String>, n: usize) -> HermitianVar {
        let start = self.alloc(name, BlockKind::Hermitian { dim: n }, n * n);
        HermitianVar::new(n, start)
    }

    pub fn minimize(&mut self, objective: AffineExpr) {
        self.objective = objective;
    }

    pub fn add_constraint(
        &mut self,
        label: impl Into<String>,
        rows: Vec<AffineExpr>,
        cone: Cone,
    ) -> Result<(), ConicError> {
        let label = label.into();
        let bad = |reason: String| ConicError::Malformed {
            label: label.clone(),
            reason,
        };
        match cone {
            Cone::Zero | Cone::Nonneg if rows.is_empty() => {
                return Err(bad("empty constraint".into()))
            }
            Cone::SecondOrder if rows.len() < 2 => {
                return Err(bad(format!("second-order cone needs ≥ 2 rows, got {}", rows.len())))
            }
            Cone::Psd { dim } if rows.len() != dim * (dim + 1) / 2 => {
                return Err(bad(format!(
                    "psd cone of dim {dim} needs {} rows, got {}",
                    dim * (dim + 1) / 2,
                    rows.len()
                )))
            }
            Cone::Exp | Cone::Power { .. } if rows.len() != 3 => {
                return Err(bad(format!("3-d cone needs 3 rows, got {}", rows.len())))
            }
            Cone::Power { alpha } if !(alpha > 0.0 && alpha < 1.0) => {
                return Err(bad(format!("power cone exponent {alpha} outside (0, 1)")))
            }
            _ => {}
        }
        for r in &rows {
            if let Some(&(v, _)) = r.terms.iter().find(|t| t.0 .0 >= self.n_vars) {
                return Err(bad(format!("references undeclared variable {}", v.0)));
            }
            if !r.constant.is_finite() || r.terms.iter().any(|t| !t.1.is_finite()) {
                return Err(bad("non-finite coefficient".into()));
            }
        }
        self.constraints.push(Constraint { label, rows, cone });
        Ok(())
    }

    /// `lhs ≥ rhs`.
    pub fn geq(
        &mut self,
        label: impl Into<String>,
        lhs: AffineExpr,
        rhs: AffineExpr,
    ) -> Result<(), ConicError> {
        self.add_constraint(label, vec![lhs - rhs], Cone::Nonneg)
    }

    /// `lhs = rhs`.
    pub fn equal(
        &mut self,
        label: impl Into<String>,
        lhs: AffineExpr,
        rhs: AffineExpr,
    ) -> Result<(), ConicError> {
        self.add_constraint(label, vec![lhs - rhs], Cone::Zero)
    }

    /// `‖x‖₂ ≤ t`.
    pub fn norm_leq(
        &mut self,
        label: impl Into<String>,
        x: Vec<AffineExpr>,
        t: AffineExpr,
    ) -> Result<(), ConicError> {
        let mut rows = Vec::with_capacity(x.len() + 1);
        rows.push(t);
        rows.extend(x);
        self.add_constraint(label, rows, Cone::SecondOrder)
    }

    /// `x² ≤ a·b` with `a, b ≥ 0`, as the second-order cone
    /// `‖(2x, a − b)‖ ≤ a + b`.
    pub fn square_leq_product(
        &mut self,
        label: impl Into<String>,
        x: AffineExpr,
        a: AffineExpr,
        b: AffineExpr,
    ) -> Result<(), ConicError> {
        let rows = vec![a.clone() + b.clone(), x * 2.0, a - b];
        self.add_constraint(label, rows, Cone::SecondOrder)
    }

    /// `‖x‖₂² ≤ a·b` with `a, b ≥ 0`.
    pub fn sum_squares_leq_product(
        &mut self,
        label: impl Into<String>,
        x: Vec<AffineExpr>,
        a: AffineExpr,
        b: AffineExpr,
    ) -> Result<(), ConicError> {
        let mut rows = vec![a.clone() + b.clone()];
        rows.extend(x.into_iter().map(|e| e * 2.0));
        rows.push(a - b);
        self.add_constraint(label, rows, Cone::SecondOrder)
    }

    /// Hermitian affine matrix expression constrained PSD via its real
    /// symmetric embedding.
    pub fn psd_hermitian(
        &mut self,
        label: impl Into<String>,
        expr: &HermitianExpr,
    ) -> Result<(), ConicError> {
        let dim = 2 * expr.dim();
        self.add_constraint(label, expr.psd_rows(), Cone::Psd { dim })
    }

    /// Largest violation of any constraint at `x`, measured in the cone's
    /// natural units (distance below zero for orthants, norm excess for
    /// second-order cones, negative eigenvalue for PSD blocks).
    pub fn max_violation(&self, x: &[f64]) -> (f64, Option<String>) {
        let mut worst = (0.0_f64, None);
        for c in &self.constraints {
            let vals: Vec<f64> = c.rows.iter().map(|r| r.eval(x)).collect();
            let v = cone_violation(c.cone, &vals);
            if v > worst.0 {
                worst = (v, Some(c.label.clone()));
            }
        }
        worst
    }

    /// Largest absolute coefficient appearing in the program.
    pub fn data_norm(&self) -> f64 {
        let mut m = self
            .objective
            .terms
            .iter()
            .map(|t| t.1.abs())
            .fold(0.0, f64::max);
        for c in &self.constraints {
            for r in &c.rows {
                m = m.max(r.constant.abs());
                for t in &r.terms {
                    m = m.max(t.1.abs());
                }
            }
        }
        m
    }
}

fn cone_violation(cone: Cone, vals: &[f64]) -> f64 {
    match cone {
        Cone::Zero => vals.iter().map(|v| v.abs()).fold(0.0, f64::max),
        Cone::Nonneg => vals.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max),
        Cone::SecondOrder => {
            let n = vals[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
            (n - vals[0]).max(0.0)
        }
        Cone::Psd { dim } => {
            let mut m = DMatrix::<f64>::zeros(dim, dim);
            let mut k = 0;
            for j in 0..dim {
                for i in 0..=j {
                    m[(i, j)] = vals[k];
                    m[(j, i)] = vals[k];
                    k += 1;
                }
            }
            let min = m.symmetric_eigenvalues().min();
            (-min).max(0.0)
        }
        Cone::Exp => {
            let (x, y, z) = (vals[0], vals[1], vals[2]);
            if y > 0.0 {
                (y * (x / y).exp() - z).clamp(0.0, f64::MAX)
            } else if y.abs() <= 1e-12 && x <= 0.0 && z >= 0.0 {
                0.0
            } else {
                y.abs().max((x).max(0.0))
            }
        }
        Cone::Power { alpha } => {
            let (x, y, z) = (vals[0], vals[1], vals[2]);
            let neg = (-x).max(0.0).max((-y).max(0.0));
            let lhs = x.max(0.0).powf(alpha) * y.max(0.0).powf(1.0 - alpha);
            neg.max((z.abs() - lhs).max(0.0))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverStats {
    pub iterations: u32,
    pub runtime_s: f64,
    /// Backend reached only its reduced-accuracy tolerances.
    pub reduced_accuracy: bool,
    /// Backend status string, verbatim.
    pub backend_status: String,
    pub primal_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicSolution {
    pub status: SolveStatus,
    /// Variable values; present iff `status == Optimal`.
    pub values: Option<Vec<f64>>,
    pub objective_value: f64,
    pub stats: SolverStats,
}

impl ConicSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values.as_ref().map(|x| x[v.0]).unwrap_or(f64::NAN)
    }

    pub fn eval(&self, e: &AffineExpr) -> f64 {
        self.values.as_ref().map(|x| e.eval(x)).unwrap_or(f64::NAN)
    }

    pub fn hermitian(&self, h: &HermitianVar) -> DMatrix<Complex<f64>> {
        match &self.values {
            Some(x) => h.value(x),
            None => DMatrix::from_element(h.dim(), h.dim(), Complex::new(f64::NAN, f64::NAN)),
        }
    }
}

/// Anything that can solve a [`ConicProgram`].
pub trait ConicBackend {
    fn solve(&self, program: &ConicProgram, tolerance: f64) -> Result<ConicSolution, ConicError>;
}

/// Solves `program` with the bundled backend.
pub fn solve(program: &ConicProgram, tolerance: f64) -> Result<ConicSolution, ConicError> {
    ClarabelBackend::default().solve(program, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn nonneg_lower_bound() {
        let mut p = ConicProgram::new();
        let x = p.scalar("x");
        p.geq("x>=3", x.into(), 3.0.into()).unwrap();
        p.minimize(x.into());
        let s = solve(&p, 1e-9).unwrap();
        assert!(s.is_optimal());
        assert_relative_eq!(s.value(x), 3.0, epsilon = 1e-7);
        assert_relative_eq!(s.objective_value, 3.0, epsilon = 1e-7);
    }

    #[test]
    fn trace_above_identity() {
        // min Tr(X) s.t. X ⪰ I for a 2×2 real symmetric X (a Hermitian
        // variable with zero imaginary part).
        let mut p = ConicProgram::new();
        let x = p.hermitian("X", 2);
        let im = x.entry(0, 1).1;
        p.equal("real", im, 0.0.into()).unwrap();
        let shifted = x.expr() - HermitianExpr::identity(2);
        p.psd_hermitian("X-I", &shifted).unwrap();
        p.minimize(x.trace());
        let s = solve(&p, 1e-9).unwrap();
        assert!(s.is_optimal());
        assert_relative_eq!(s.objective_value, 2.0, epsilon = 1e-6);
        let xv = s.hermitian(&x);
        assert_relative_eq!(xv[(0, 0)].re, 1.0, epsilon = 1e-6);
        assert_relative_eq!(xv[(0, 1)].norm(), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn norm_with_equality() {
        let mut p = ConicProgram::new();
        let x = p.scalar("x");
        let y = p.scalar("y");
        let t = p.scalar("t");
        p.norm_leq("norm", vec![x.into(), y.into()], t.into()).unwrap();
        p.equal("sum", AffineExpr::var(x) + AffineExpr::var(y), 2.0.into())
            .unwrap();
        p.minimize(t.into());
        let s = solve(&p, 1e-9).unwrap();
        assert!(s.is_optimal());
        assert_relative_eq!(s.value(x), 1.0, epsilon = 1e-6);
        assert_relative_eq!(s.value(y), 1.0, epsilon = 1e-6);
        assert_relative_eq!(s.objective_value, 2f64.sqrt(), epsilon = 1e-6);
    }

    #[test]
    fn exp_cone_orientation() {
        // max t s.t. t ≤ ln(1 + μ), μ ≤ e − 1 → t = 1.
        let mut p = ConicProgram::new();
        let t = p.scalar("t");
        let mu = p.scalar("mu");
        p.add_constraint(
            "hypo",
            vec![t.into(), 1.0.into(), AffineExpr::var(mu) + 1.0.into()],
            Cone::Exp,
        )
        .unwrap();
        p.geq("cap", (std::f64::consts::E - 1.0).into(), mu.into())
            .unwrap();
        p.minimize(-AffineExpr::var(t));
        let s = solve(&p, 1e-9).unwrap();
        assert!(s.is_optimal());
        assert_relative_eq!(s.value(t), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn power_cone_orientation() {
        // min u s.t. u ≥ t³ (u^{1/3}·1^{2/3} ≥ t), t ≥ 2 → u = 8.
        let mut p = ConicProgram::new();
        let t = p.scalar("t");
        let u = p.scalar("u");
        p.add_constraint(
            "cube",
            vec![u.into(), 1.0.into(), t.into()],
            Cone::Power { alpha: 1.0 / 3.0 },
        )
        .unwrap();
        p.geq("t>=2", t.into(), 2.0.into()).unwrap();
        p.minimize(u.into());
        let s = solve(&p, 1e-9).unwrap();
        assert!(s.is_optimal());
        assert_relative_eq!(s.value(u), 8.0, epsilon = 1e-5);
    }

    #[test]
    fn infeasible_and_unbounded_statuses() {
        let mut p = ConicProgram::new();
        let x = p.scalar("x");
        p.geq("lo", x.into(), 2.0.into()).unwrap();
        p.geq("hi", 1.0.into(), x.into()).unwrap();
        p.minimize(x.into());
        assert_eq!(solve(&p, 1e-8).unwrap().status, SolveStatus::Infeasible);
        assert!(solve(&p, 1e-8).unwrap().values.is_none());

        let mut q = ConicProgram::new();
        let y = q.scalar("y");
        q.geq("hi", 1.0.into(), y.into()).unwrap();
        q.minimize(y.into());
        assert_eq!(solve(&q, 1e-8).unwrap().status, SolveStatus::Unbounded);
    }

    #[test]
    fn malformed_constraints_rejected() {
        let mut p = ConicProgram::new();
        let x = p.scalar("x");
        assert!(p
            .add_constraint("bad", vec![x.into()], Cone::SecondOrder)
            .is_err());
        assert!(p
            .add_constraint("bad", vec![x.into(); 2], Cone::Psd { dim: 2 })
            .is_err());
        assert!(p
            .add_constraint("bad", vec![AffineExpr::var(Var(7))], Cone::Nonneg)
            .is_err());
        assert!(p
            .add_constraint("bad", vec![x.into(); 3], Cone::Power { alpha: 1.5 })
            .is_err());
    }

    #[test]
    fn solve_is_deterministic() {
        let mut p = ConicProgram::new();
        let w = p.hermitian("W", 3);
        let a: Vec<Complex<f64>> = (0..3)
            .map(|m| Complex::from_polar(1.0, 0.7 * m as f64))
            .collect();
        p.psd_hermitian("W", &w.expr()).unwrap();
        p.geq("gain", w.quad_form(&a), 1.0.into()).unwrap();
        p.minimize(w.trace());
        let s1 = solve(&p, 1e-8).unwrap();
        let s2 = solve(&p, 1e-8).unwrap();
        assert_eq!(s1.values, s2.values);
        assert_eq!(s1.objective_value.to_bits(), s2.objective_value.to_bits());
        // Optimal: (1/M²)·a aᴴ with trace 1/M.
        assert_relative_eq!(s1.objective_value, 1.0 / 3.0, epsilon = 1e-6);
        let (viol, _) = p.max_violation(s1.values.as_ref().unwrap());
        assert!(viol <= 1e-7 * (1.0 + p.data_norm()));
    }
}
