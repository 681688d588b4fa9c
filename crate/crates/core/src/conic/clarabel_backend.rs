//! [`ConicBackend`] backed by the Clarabel interior-point solver.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

use super::{
    AffineExpr, Cone, ConicBackend, ConicError, ConicProgram, ConicSolution, SolveStatus,
    SolverStats,
};

#[derive(Debug, Clone)]
pub struct ClarabelBackend {
    pub max_iter: u32,
    pub time_limit_s: f64,
}

impl Default for ClarabelBackend {
    fn default() -> Self {
        Self {
            max_iter: 200,
            time_limit_s: f64::INFINITY,
        }
    }
}

/// Clarabel's form is `A x + s = b, s ∈ K`. A row `a·x + c ∈ K` therefore
/// becomes `A = −a`, `b = c`. Orthant rows are gathered first so that each
/// orthant is a single cone; the remaining cones keep their order.
struct Assembly {
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    b: Vec<f64>,
    cones: Vec<SupportedConeT<f64>>,
}

impl Assembly {
    fn push_row(&mut self, row: &AffineExpr, scale: f64) {
        let r = self.b.len();
        for &(v, c) in &row.terms {
            self.rows.push(r);
            self.cols.push(v.0);
            self.vals.push(-c * scale);
        }
        self.b.push(row.constant * scale);
    }
}

fn assemble(program: &ConicProgram) -> Assembly {
    let mut asm = Assembly {
        rows: Vec::new(),
        cols: Vec::new(),
        vals: Vec::new(),
        b: Vec::new(),
        cones: Vec::new(),
    };
    for (kind, make) in [
        (Cone::Zero, SupportedConeT::ZeroConeT as fn(usize) -> SupportedConeT<f64>),
        (Cone::Nonneg, SupportedConeT::NonnegativeConeT),
    ] {
        let before = asm.b.len();
        for c in program.constraints().iter().filter(|c| c.cone == kind) {
            for r in &c.rows {
                asm.push_row(r, 1.0);
            }
        }
        let count = asm.b.len() - before;
        if count > 0 {
            asm.cones.push(make(count));
        }
    }
    let sqrt2 = std::f64::consts::SQRT_2;
    for c in program.constraints() {
        match c.cone {
            Cone::Zero | Cone::Nonneg => continue,
            Cone::SecondOrder => {
                c.rows.iter().for_each(|r| asm.push_row(r, 1.0));
                asm.cones.push(SupportedConeT::SecondOrderConeT(c.rows.len()));
            }
            Cone::Exp => {
                c.rows.iter().for_each(|r| asm.push_row(r, 1.0));
                asm.cones.push(SupportedConeT::ExponentialConeT());
            }
            Cone::Power { alpha } => {
                c.rows.iter().for_each(|r| asm.push_row(r, 1.0));
                asm.cones.push(SupportedConeT::PowerConeT(alpha));
            }
            Cone::Psd { dim } => {
                // Clarabel expects the upper triangle with off-diagonals
                // scaled by √2.
                let mut k = 0;
                for j in 0..dim {
                    for i in 0..=j {
                        asm.push_row(&c.rows[k], if i == j { 1.0 } else { sqrt2 });
                        k += 1;
                    }
                }
                asm.cones.push(SupportedConeT::PSDTriangleConeT(dim));
            }
        }
    }
    asm
}

fn map_status(s: SolverStatus) -> (SolveStatus, bool) {
    match s {
        SolverStatus::Solved => (SolveStatus::Optimal, false),
        SolverStatus::AlmostSolved => (SolveStatus::Optimal, true),
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            (SolveStatus::Infeasible, false)
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            (SolveStatus::Unbounded, false)
        }
        _ => (SolveStatus::NumericalFailure, false),
    }
}

impl ConicBackend for ClarabelBackend {
    fn solve(&self, program: &ConicProgram, tolerance: f64) -> Result<ConicSolution, ConicError> {
        let n = program.num_vars();
        let asm = assemble(program);
        let m = asm.b.len();
        let a = CscMatrix::new_from_triplets(m, n, asm.rows, asm.cols, asm.vals);
        let p = CscMatrix::<f64>::zeros((n, n));
        let mut q = vec![0.0; n];
        for &(v, c) in &program.objective().terms {
            q[v.0] += c;
        }
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(self.max_iter)
            .time_limit(self.time_limit_s)
            .tol_gap_abs(tolerance)
            .tol_gap_rel(tolerance)
            .tol_feas(tolerance)
            .tol_infeas_abs(tolerance)
            .tol_infeas_rel(tolerance)
            .max_threads(1)
            .build()
            .map_err(|e| ConicError::Backend(e.to_string()))?;
        let mut solver = DefaultSolver::new(&p, &q, &a, &asm.b, &asm.cones, settings)
            .map_err(|e| ConicError::Backend(e.to_string()))?;
        solver.solve();
        let sol = &solver.solution;
        let (status, reduced_accuracy) = map_status(sol.status);
        let stats = SolverStats {
            iterations: sol.iterations,
            runtime_s: sol.solve_time,
            reduced_accuracy,
            backend_status: format!("{:?}", sol.status),
            primal_residual: sol.r_prim,
        };
        let values = (status == SolveStatus::Optimal).then(|| sol.x.clone());
        let objective_value = match status {
            SolveStatus::Optimal => sol.obj_val + program.objective().constant,
            SolveStatus::Infeasible => f64::INFINITY,
            SolveStatus::Unbounded => f64::NEG_INFINITY,
            SolveStatus::NumericalFailure => f64::NAN,
        };
        Ok(ConicSolution {
            status,
            values,
            objective_value,
            stats,
        })
    }
}
