//! Beamformer and sensing-indicator subproblem at a fixed trajectory.
//!
//! Covariances W_k[n] are relaxed to Hermitian PSD matrices. The SINR of
//! user k is split as Tr(W_k Ĥ_k) ≥ μ·φ and φ ≥ Σ_{i≠k} Tr(W_i Ĥ_k) + 1 with
//! Ĥ_k = h_k h_kᴴ/σ_k², and the product μφ is replaced by its convex
//! majorizer at the previous iterate. The average rate enters through
//! exponential cones r ≤ ln(1 + μ).
//!
//! Sensing indicators only exist at slots where the UAV hovers within the
//! hover radius of a target; elsewhere C7/C8/C10 pin them to zero. Each
//! indicator α carries coupled copies W̃_k with W̃ ⪰ 0, W − W̃ ⪰ 0,
//! Tr W̃ ≤ α·P_max and Tr(W − W̃) ≤ (1 − α)·P_max, so W̃ = α·W whenever α is
//! binary.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::channel::quad_form;
use crate::conic::{self, AffineExpr, Cone, ConicProgram, HermitianExpr, HermitianVar, SolveStatus, Var};
use crate::error::SolveError;
use crate::plan::{Covariance, SensingSchedule, SlotChannels, Trajectory};
use crate::power::flight_power;
use crate::scalar::{norm2, sub2};
use crate::scenario::{CMatrix, Scenario};

const STAGE: &str = "beamforming";

/// Objective weight times the mean communication power scale. Chosen so
/// that interior-point accuracy on communication-only slots is enough to
/// resolve rank one to λ₂/λ₁ ≈ 1e-8.
const OBJECTIVE_WEIGHT: f64 = 0.03;

/// Relative slack added to the rate targets so that rounding in the conic
/// solve cannot leave the true rate below R_min.
pub const RATE_MARGIN: f64 = 1e-6;

/// ½(μ+φ)² − ½(μ_t² + φ_t²) − μ_t(μ − μ_t) − φ_t(φ − φ_t).
///
/// Convex in (μ, φ), never below μφ, equal to it at (μ_t, φ_t).
pub fn dc_product_majorizer(mu: f64, phi: f64, mu_t: f64, phi_t: f64) -> f64 {
    0.5 * (mu + phi).powi(2) - 0.5 * (mu_t * mu_t + phi_t * phi_t) - mu_t * (mu - mu_t)
        - phi_t * (phi - phi_t)
}

/// SINR slack values, `[slot][user]`. `phi` is the normalized
/// interference-plus-noise Σ_{i≠k} Tr(W_i Ĥ_k) + 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinrPoint {
    pub mu: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
}

impl SinrPoint {
    /// Exact decomposition of the SINRs of `covariances`.
    pub fn from_covariances(
        scenario: &Scenario,
        channels: &SlotChannels,
        covariances: &[Vec<CMatrix>],
    ) -> Self {
        let mut mu = Vec::with_capacity(covariances.len());
        let mut phi = Vec::with_capacity(covariances.len());
        for (n, covs) in covariances.iter().enumerate() {
            let mut mrow = Vec::new();
            let mut prow = Vec::new();
            for (k, user) in scenario.users.iter().enumerate() {
                let h = &channels.users[n][k];
                let g: Vec<f64> = covs.iter().map(|w| quad_form(w, h).max(0.0) / user.noise_power).collect();
                let interference: f64 = g.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, v)| v).sum();
                let p = interference + 1.0;
                mrow.push(g[k] / p);
                prow.push(p);
            }
            mu.push(mrow);
            phi.push(prow);
        }
        Self { mu, phi }
    }
}

/// How the SINR requirement enters the program.
#[derive(Debug, Clone)]
pub enum SinrModel<'a> {
    /// Slack system with the product majorized at the given point and the
    /// average rate through exponential cones.
    Majorized(&'a SinrPoint),
    /// Per-slot SINR target γ_k; linear in W. Meeting log₂(1 + γ_k) = R_min
    /// in every slot is sufficient for the average rate.
    PerSlotTarget(Vec<f64>),
}

/// How the sensing indicators enter the program.
#[derive(Debug, Clone)]
pub enum IndicatorModel<'a> {
    /// α ∈ [0, 1] with the penalty τ·Σ(α − 2α_t(α − α_t)).
    Relaxed {
        expansion: &'a SensingSchedule,
        penalty: f64,
    },
    /// Binary α held fixed.
    Frozen(&'a SensingSchedule),
}

/// Slots where target `e` may be sensed: hovering (zero velocity and no
/// displacement to the next slot) within the hover radius. `[target][slot]`.
pub fn sensing_candidates(scenario: &Scenario, trajectory: &Trajectory) -> Vec<Vec<bool>> {
    let n_slots = trajectory.len();
    let radius = scenario.platform.hover_radius * (1.0 + 1e-6);
    scenario
        .targets
        .iter()
        .map(|t| {
            (0..n_slots)
                .map(|n| {
                    let still = trajectory.speed(n) <= 1e-6
                        && (n + 1 == n_slots
                            || norm2(sub2(trajectory.positions[n + 1], trajectory.positions[n])) <= 1e-6);
                    still && norm2(sub2(trajectory.positions[n], t.position)) <= radius
                })
                .collect()
        })
        .collect()
}

/// Coupled copies W̃_{k,e}[n] of one sensing indicator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledBlock {
    pub target: usize,
    pub slot: usize,
    pub per_user: Vec<Covariance>,
}

impl CoupledBlock {
    pub fn sum(&self) -> CMatrix {
        let m = self.per_user[0].0.nrows();
        self.per_user
            .iter()
            .fold(DMatrix::from_element(m, m, Complex::new(0.0, 0.0)), |acc, c| acc + &c.0)
    }
}

/// Hermitian variable X standing for the covariance scale·X.
#[derive(Debug, Clone)]
struct ScaledHermitian {
    var: HermitianVar,
    scale: f64,
}

impl ScaledHermitian {
    fn new(p: &mut ConicProgram, name: String, dim: usize, scale: f64) -> Self {
        Self {
            var: p.hermitian(name, dim),
            scale,
        }
    }

    fn expr(&self) -> HermitianExpr {
        let mut out = HermitianExpr::zeros(self.var.dim());
        out.add_scaled(&self.var.expr(), self.scale);
        out
    }

    fn trace(&self) -> AffineExpr {
        self.var.trace() * self.scale
    }

    fn quad_form(&self, a: &[Complex<f64>]) -> AffineExpr {
        self.var.quad_form(a) * self.scale
    }

    fn value(&self, sol: &conic::ConicSolution) -> Covariance {
        Covariance(sol.hermitian(&self.var) * Complex::new(self.scale, 0.0))
    }
}

/// Reference power of slot `n` used to scale its covariance variables:
/// P_max where sensing may happen, otherwise the sum over users of the
/// matched-filter power meeting the per-slot SINR target without
/// interference.
fn slot_scale(scenario: &Scenario, channels: &SlotChannels, n: usize, sensing: bool) -> f64 {
    let p_max = scenario.platform.p_max;
    if sensing {
        return p_max;
    }
    let gamma = per_slot_sinr_targets(scenario);
    let comm: f64 = scenario
        .users
        .iter()
        .enumerate()
        .map(|(k, u)| {
            let g: f64 = channels.users[n][k].iter().map(|z| z.norm_sqr()).sum();
            gamma[k] * u.noise_power / g
        })
        .sum();
    comm.clamp(1e-12 * p_max, p_max)
}

struct CoupledVars {
    target: usize,
    slot: usize,
    alpha: Var,
    per_user: Vec<ScaledHermitian>,
}

/// An assembled beamforming subproblem.
pub struct P2Program {
    pub program: ConicProgram,
    /// Objective terms that do not depend on the variables.
    pub objective_constant: f64,
    /// Factor applied to the variable part of the objective before solving.
    pub objective_weight: f64,
    penalty: f64,
    slots: usize,
    users: usize,
    targets: usize,
    w: Vec<Vec<ScaledHermitian>>,
    mu: Vec<Vec<Option<Var>>>,
    phi: Vec<Vec<Option<Var>>>,
    coupled: Vec<CoupledVars>,
    frozen: Option<SensingSchedule>,
    propulsion: Vec<f64>,
    hover: f64,
}

/// Solution of one beamforming subproblem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P2Solution {
    /// `[slot][user]`.
    pub covariances: Vec<Vec<Covariance>>,
    pub coupled: Vec<CoupledBlock>,
    pub alpha: SensingSchedule,
    pub sinr: Option<SinrPoint>,
    /// Program objective plus its constant terms.
    pub objective: f64,
    /// (1/N)Σ_n[Σ_k Tr W_k + Σ_e α P_hover + (1 − Σ_e α) P_fly(v[n])].
    pub power_objective: f64,
    pub penalty: f64,
    pub iterations: u32,
    pub reduced_accuracy: bool,
}

impl P2Solution {
    pub fn raw_covariances(&self) -> Vec<Vec<CMatrix>> {
        self.covariances
            .iter()
            .map(|row| row.iter().map(|c| c.0.clone()).collect())
            .collect()
    }

    /// Power objective plus the exact concave penalty τ·Σα(1 − α).
    pub fn penalized_objective(&self) -> f64 {
        self.power_objective
            + self.penalty
                * self
                    .alpha
                    .alpha
                    .iter()
                    .flatten()
                    .map(|a| a * (1.0 - a))
                    .sum::<f64>()
    }
}

fn dimension(detail: String) -> SolveError {
    SolveError::Dimension {
        stage: STAGE,
        detail,
    }
}

/// Builds the beamforming subproblem at a fixed trajectory.
pub fn build_p2(
    scenario: &Scenario,
    trajectory: &Trajectory,
    sinr: &SinrModel<'_>,
    indicators: &IndicatorModel<'_>,
) -> Result<P2Program, SolveError> {
    let n_slots = scenario.num_slots();
    let k_users = scenario.num_users();
    let e_targets = scenario.num_targets();
    let m = scenario.platform.antennas;
    if trajectory.len() != n_slots || trajectory.velocities.len() != n_slots {
        return Err(dimension(format!(
            "trajectory has {} slots, scenario {n_slots}",
            trajectory.len()
        )));
    }
    if let SinrModel::Majorized(p) = sinr {
        if p.mu.len() != n_slots || p.mu.iter().chain(&p.phi).any(|r| r.len() != k_users) {
            return Err(dimension("SINR expansion point shape".into()));
        }
        if p.mu.iter().chain(&p.phi).flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(dimension("SINR expansion point must be finite and nonnegative".into()));
        }
    }
    if let SinrModel::PerSlotTarget(g) = sinr {
        if g.len() != k_users {
            return Err(dimension("one SINR target per user".into()));
        }
    }
    let schedule = match indicators {
        IndicatorModel::Relaxed { expansion, .. } => expansion,
        IndicatorModel::Frozen(s) => s,
    };
    if schedule.targets() != e_targets || schedule.alpha.iter().any(|r| r.len() != n_slots) {
        return Err(dimension(format!(
            "indicator schedule must be {e_targets}×{n_slots}"
        )));
    }

    let channels = SlotChannels::new(scenario, trajectory);
    let candidates = sensing_candidates(scenario, trajectory);
    let hover = scenario.hover_power();
    let propulsion: Vec<f64> = trajectory
        .velocities
        .iter()
        .map(|v| flight_power(*v, &scenario.power_model).total)
        .collect();
    let inv_n = 1.0 / n_slots as f64;
    let p_max = scenario.platform.p_max;
    let mut p = ConicProgram::new();
    let mut objective = AffineExpr::zero();
    let mut constant = propulsion.iter().sum::<f64>() * inv_n;

    let may_sense: Vec<bool> = (0..n_slots)
        .map(|n| (0..e_targets).any(|e| candidates[e][n] || schedule.alpha[e][n] > 0.0))
        .collect();
    let scales: Vec<f64> = (0..n_slots)
        .map(|n| slot_scale(scenario, &channels, n, may_sense[n]))
        .collect();
    let w: Vec<Vec<ScaledHermitian>> = (0..n_slots)
        .map(|n| {
            (0..k_users)
                .map(|k| ScaledHermitian::new(&mut p, format!("W[{n}][{k}]"), m, scales[n]))
                .collect()
        })
        .collect();
    for n in 0..n_slots {
        let total = AffineExpr::sum(w[n].iter().map(|x| x.trace()).collect::<Vec<_>>().iter());
        objective.add_expr(&total, inv_n);
        p.geq(format!("C1[{n}]"), p_max.into(), total)?;
    }

    // Communication.
    let mut mu = vec![vec![None; k_users]; n_slots];
    let mut phi = vec![vec![None; k_users]; n_slots];
    let mut rates: Vec<AffineExpr> = vec![AffineExpr::zero(); k_users];
    for n in 0..n_slots {
        for (k, user) in scenario.users.iter().enumerate() {
            let scale = user.noise_power.sqrt();
            let h: Vec<Complex<f64>> = channels.users[n][k].iter().map(|z| z / scale).collect();
            let signal = w[n][k].quad_form(&h);
            let mut interference = AffineExpr::zero();
            for i in (0..k_users).filter(|&i| i != k) {
                interference.add_expr(&w[n][i].quad_form(&h), 1.0);
            }
            match sinr {
                SinrModel::PerSlotTarget(gamma) => {
                    let g = gamma[k];
                    p.geq(
                        format!("C2[{n}][{k}]"),
                        signal,
                        interference * g + AffineExpr::constant(g),
                    )?;
                }
                SinrModel::Majorized(point) => {
                    let (mt, pt) = (point.mu[n][k], point.phi[n][k]);
                    let mv = p.scalar(format!("mu[{n}][{k}]"));
                    let pv = p.scalar(format!("phi[{n}][{k}]"));
                    let rv = p.scalar(format!("r[{n}][{k}]"));
                    p.geq(format!("mu>=0[{n}][{k}]"), mv.into(), 0.0.into())?;
                    p.geq(
                        format!("C2b[{n}][{k}]"),
                        pv.into(),
                        interference + AffineExpr::constant(1.0),
                    )?;
                    // With x = μ/μt and y = φ/φt (both 1 at the expansion
                    // point): signal/(μt·φt) ≥ ½(x+y)² − x − y + 1 ≥ x·y.
                    let (mt, pt) = (mt.max(1e-9), pt.max(1.0));
                    let x = AffineExpr::term(mv, 1.0 / mt);
                    let y = AffineExpr::term(pv, 1.0 / pt);
                    let mut rhs = signal * (1.0 / (mt * pt)) + x.clone() + y.clone();
                    rhs.constant -= 1.0;
                    p.square_leq_product(format!("C2a[{n}][{k}]"), x + y, rhs * 2.0, 1.0.into())?;
                    p.add_constraint(
                        format!("rate[{n}][{k}]"),
                        vec![rv.into(), 1.0.into(), AffineExpr::var(mv) + AffineExpr::constant(1.0)],
                        Cone::Exp,
                    )?;
                    rates[k].add_term(rv, 1.0);
                    mu[n][k] = Some(mv);
                    phi[n][k] = Some(pv);
                }
            }
        }
    }
    if matches!(sinr, SinrModel::Majorized(_)) {
        for (k, user) in scenario.users.iter().enumerate() {
            let target = n_slots as f64 * user.min_rate * std::f64::consts::LN_2 * (1.0 + RATE_MARGIN);
            p.geq(format!("C2c[{k}]"), rates[k].clone(), target.into())?;
        }
    }

    // Sensing.
    let mut coupled: Vec<CoupledVars> = Vec::new();
    let mut has_coupled = vec![false; n_slots];
    let mut penalty = 0.0;
    let mut frozen = None;
    let mut echo: Vec<AffineExpr> = vec![AffineExpr::zero(); e_targets];
    let sqrt_eps = |e: usize| scenario.targets[e].beampattern_error_budget.sqrt();
    match indicators {
        IndicatorModel::Relaxed { expansion, penalty: tau } => {
            penalty = *tau;
            for e in 0..e_targets {
                for n in (0..n_slots).filter(|&n| candidates[e][n]) {
                    let alpha = p.scalar(format!("alpha[{e}][{n}]"));
                    let at = expansion.alpha[e][n].clamp(0.0, 1.0);
                    p.geq(format!("C11a[{e}][{n}]"), alpha.into(), 0.0.into())?;
                    p.geq(format!("C11b[{e}][{n}]"), 1.0.into(), alpha.into())?;
                    objective.add_term(alpha, inv_n * (hover - propulsion[n]) + tau * (1.0 - 2.0 * at));
                    constant += tau * at * at;
                    let copies: Vec<ScaledHermitian> = (0..k_users)
                        .map(|k| ScaledHermitian::new(&mut p, format!("Wt[{k}][{e}][{n}]"), m, scales[n]))
                        .collect();
                    let mut sum = HermitianExpr::zeros(m);
                    for (k, wt) in copies.iter().enumerate() {
                        p.psd_hermitian(format!("Wt psd[{k}][{e}][{n}]"), &wt.expr())?;
                        p.psd_hermitian(format!("W-Wt psd[{k}][{e}][{n}]"), &(w[n][k].expr() - wt.expr()))?;
                        p.geq(
                            format!("Wt trace on[{k}][{e}][{n}]"),
                            AffineExpr::term(alpha, p_max),
                            wt.trace(),
                        )?;
                        p.geq(
                            format!("W-Wt trace off[{k}][{e}][{n}]"),
                            AffineExpr::constant(p_max) - AffineExpr::term(alpha, p_max),
                            w[n][k].trace() - wt.trace(),
                        )?;
                        sum.add_scaled(&wt.expr(), 1.0);
                        echo[e].add_expr(
                            &wt.quad_form(&channels.targets[n][e]),
                            channels.echo_gain[n][e] / scenario.targets[e].snr_threshold,
                        );
                    }
                    let mut diff = sum;
                    diff.add_scaled_constant(
                        &scenario.targets[e].desired_covariance,
                        &AffineExpr::term(alpha, -1.0),
                    );
                    p.norm_leq(format!("C3[{e}][{n}]"), diff.frobenius_rows(), sqrt_eps(e).into())?;
                    has_coupled[n] = true;
                    coupled.push(CoupledVars {
                        target: e,
                        slot: n,
                        alpha,
                        per_user: copies,
                    });
                }
            }
            for n in 0..n_slots {
                let here: Vec<&CoupledVars> = coupled.iter().filter(|c| c.slot == n).collect();
                if here.len() > 1 {
                    let sum = AffineExpr::sum(here.iter().map(|c| AffineExpr::var(c.alpha)).collect::<Vec<_>>().iter());
                    p.geq(format!("C5[{n}]"), 1.0.into(), sum)?;
                }
                if !here.is_empty() {
                    let mut c7 = AffineExpr::zero();
                    for c in &here {
                        let d = norm2(sub2(trajectory.positions[n], scenario.targets[c.target].position));
                        c7.add_term(c.alpha, d * d);
                    }
                    let r = scenario.platform.hover_radius;
                    p.geq(format!("C7[{n}]"), (r * r).into(), c7)?;
                }
            }
            for e in 0..e_targets {
                let count = AffineExpr::sum(
                    coupled.iter().filter(|c| c.target == e).map(|c| AffineExpr::var(c.alpha)).collect::<Vec<_>>().iter(),
                );
                p.geq(
                    format!("C6[{e}]"),
                    (scenario.timing.max_sensing_slots as f64).into(),
                    count,
                )?;
            }
        }
        IndicatorModel::Frozen(s) => {
            if s.max_binary_violation() > 0.0 {
                return Err(dimension("frozen indicators must be binary".into()));
            }
            for e in 0..e_targets {
                for n in (0..n_slots).filter(|&n| s.alpha[e][n] == 1.0) {
                    if !candidates[e][n] {
                        return Err(SolveError::Infeasible {
                            stage: STAGE,
                            detail: format!("target {e} scheduled in slot {n} without hovering over it"),
                        });
                    }
                    constant += inv_n * (hover - propulsion[n]);
                    let mut diff = HermitianExpr::constant(
                        &scenario.targets[e].desired_covariance,
                    );
                    diff = HermitianExpr::zeros(m) - diff;
                    for (k, wk) in w[n].iter().enumerate() {
                        diff.add_scaled(&wk.expr(), 1.0);
                        let _ = k;
                        echo[e].add_expr(
                            &wk.quad_form(&channels.targets[n][e]),
                            channels.echo_gain[n][e] / scenario.targets[e].snr_threshold,
                        );
                    }
                    p.norm_leq(format!("C3[{e}][{n}]"), diff.frobenius_rows(), sqrt_eps(e).into())?;
                }
            }
            frozen = Some((*s).clone());
        }
    }
    for n in 0..n_slots {
        if !has_coupled[n] {
            for (k, wk) in w[n].iter().enumerate() {
                p.psd_hermitian(format!("W>=0[{n}][{k}]"), &wk.expr())?;
            }
        }
    }
    for (e, expr) in echo.into_iter().enumerate() {
        if expr.terms.is_empty() {
            return Err(SolveError::SensingInfeasible(format!(
                "target {e} has no hover slot within the hover radius"
            )));
        }
        p.geq(format!("C4[{e}]"), expr, 1.0.into())?;
    }
    let comm_scales: Vec<f64> = (0..n_slots).filter(|&n| !may_sense[n]).map(|n| scales[n]).collect();
    let reference = if comm_scales.is_empty() {
        p_max
    } else {
        comm_scales.iter().sum::<f64>() / comm_scales.len() as f64
    };
    let objective_weight = OBJECTIVE_WEIGHT / reference;
    p.minimize(objective * objective_weight);
    Ok(P2Program {
        program: p,
        objective_constant: constant,
        objective_weight,
        penalty,
        slots: n_slots,
        users: k_users,
        targets: e_targets,
        w,
        mu,
        phi,
        coupled,
        frozen,
        propulsion,
        hover,
    })
}

impl P2Program {
    pub fn solve(&self, tolerance: f64) -> Result<P2Solution, SolveError> {
        let sol = conic::solve(&self.program, tolerance)?;
        match sol.status {
            SolveStatus::Optimal => {}
            SolveStatus::Infeasible => {
                return Err(SolveError::Infeasible {
                    stage: STAGE,
                    detail: format!("backend status {}", sol.stats.backend_status),
                })
            }
            _ => {
                return Err(SolveError::NumericalFailure {
                    stage: STAGE,
                    diagnostics: format!(
                        "backend status {} after {} iterations",
                        sol.stats.backend_status, sol.stats.iterations
                    ),
                })
            }
        }
        let covariances: Vec<Vec<Covariance>> = self
            .w
            .iter()
            .map(|row| row.iter().map(|h| h.value(&sol)).collect())
            .collect();
        let mut alpha = match &self.frozen {
            Some(s) => s.clone(),
            None => SensingSchedule::zeros(self.targets, self.slots),
        };
        let mut coupled = Vec::with_capacity(self.coupled.len());
        for c in &self.coupled {
            alpha.alpha[c.target][c.slot] = sol.value(c.alpha).clamp(0.0, 1.0);
            coupled.push(CoupledBlock {
                target: c.target,
                slot: c.slot,
                per_user: c.per_user.iter().map(|h| h.value(&sol)).collect(),
            });
        }
        let sinr = if self.mu.first().is_some_and(|r| r.iter().all(|v| v.is_some())) {
            let grab = |vars: &Vec<Vec<Option<Var>>>| {
                vars.iter()
                    .map(|r| r.iter().map(|v| sol.value(v.expect("slack present")).max(0.0)).collect())
                    .collect()
            };
            Some(SinrPoint {
                mu: grab(&self.mu),
                phi: grab(&self.phi),
            })
        } else {
            None
        };
        let inv_n = 1.0 / self.slots as f64;
        let mut power_objective = 0.0;
        for n in 0..self.slots {
            let tx: f64 = covariances[n].iter().map(|c| c.0.trace().re).sum();
            let sensed = alpha.sum_at(n);
            power_objective += inv_n * (tx + sensed * self.hover + (1.0 - sensed) * self.propulsion[n]);
        }
        let _ = self.users;
        Ok(P2Solution {
            covariances,
            coupled,
            alpha,
            sinr,
            objective: sol.objective_value / self.objective_weight + self.objective_constant,
            power_objective,
            penalty: self.penalty,
            iterations: sol.stats.iterations,
            reduced_accuracy: sol.stats.reduced_accuracy,
        })
    }
}

/// One inner iteration of the beamforming stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamIteration {
    pub objective: f64,
    pub penalized_objective: f64,
    pub penalty_weight: f64,
    pub max_binary_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamOutcome {
    pub solution: P2Solution,
    pub trace: Vec<BeamIteration>,
    /// Indicators were rounded (rather than snapped within tolerance).
    pub rounded: bool,
    /// Largest distance from {0, 1} before snapping or rounding.
    pub pre_rounding_binary_violation: f64,
}

/// Per-user SINR targets that give exactly R_min (plus margin) per slot.
pub fn per_slot_sinr_targets(scenario: &Scenario) -> Vec<f64> {
    scenario
        .users
        .iter()
        .map(|u| 2f64.powf(u.min_rate * (1.0 + RATE_MARGIN)) - 1.0)
        .collect()
}

/// Feasible starting covariances: per-slot SINR targets, indicators frozen.
pub fn initial_covariances(
    scenario: &Scenario,
    trajectory: &Trajectory,
    schedule: &SensingSchedule,
) -> Result<P2Solution, SolveError> {
    let model = SinrModel::PerSlotTarget(per_slot_sinr_targets(scenario));
    build_p2(scenario, trajectory, &model, &IndicatorModel::Frozen(schedule))?
        .solve(scenario.solver.conic_tolerance)
}

fn rel_change(prev: f64, cur: f64) -> f64 {
    (prev - cur).abs() / prev.abs().max(1e-12)
}

/// Successive convex approximation at a fixed indicator mode.
fn sca(
    scenario: &Scenario,
    trajectory: &Trajectory,
    start: &SinrPoint,
    alpha_start: &SensingSchedule,
    penalty: Option<f64>,
    trace: &mut Vec<BeamIteration>,
) -> Result<P2Solution, SolveError> {
    let tol = scenario.solver.conic_tolerance;
    let mut point = start.clone();
    let mut alpha_t = alpha_start.clone();
    let mut prev: Option<f64> = None;
    let mut last = None;
    for _ in 0..scenario.solver.max_sca_iters {
        let indicators = match penalty {
            Some(tau) => IndicatorModel::Relaxed {
                expansion: &alpha_t,
                penalty: tau,
            },
            None => IndicatorModel::Frozen(&alpha_t),
        };
        let sol = build_p2(scenario, trajectory, &SinrModel::Majorized(&point), &indicators)?.solve(tol)?;
        let f = sol.penalized_objective();
        trace.push(BeamIteration {
            objective: sol.power_objective,
            penalized_objective: f,
            penalty_weight: sol.penalty,
            max_binary_violation: sol.alpha.max_binary_violation(),
        });
        point = sol.sinr.clone().expect("majorized model has slacks");
        if penalty.is_some() {
            alpha_t = sol.alpha.clone();
        }
        let done = prev.is_some_and(|p| rel_change(p, f) <= scenario.solver.ao_tolerance);
        prev = Some(f);
        last = Some(sol);
        if done {
            break;
        }
    }
    Ok(last.expect("at least one iteration"))
}

/// Solves the beamforming stage from feasible covariances `start` and
/// binary indicators `alpha_start`, escalating the penalty until the
/// indicators are binary within tolerance; otherwise rounds them and
/// re-solves with the rounded schedule frozen.
pub fn solve_beamforming(
    scenario: &Scenario,
    trajectory: &Trajectory,
    start: &[Vec<CMatrix>],
    alpha_start: &SensingSchedule,
) -> Result<BeamOutcome, SolveError> {
    let channels = SlotChannels::new(scenario, trajectory);
    let point = SinrPoint::from_covariances(scenario, &channels, start);
    let settings = &scenario.solver;
    let mut trace = Vec::new();
    let mut tau = settings.penalty;
    let mut sol = sca(scenario, trajectory, &point, alpha_start, Some(tau), &mut trace)?;
    for _ in 0..3 {
        if sol.alpha.max_binary_violation() <= settings.binary_tol {
            break;
        }
        tau *= 5.0;
        let p = sol.sinr.clone().expect("majorized model has slacks");
        let a = sol.alpha.clone();
        sol = sca(scenario, trajectory, &p, &a, Some(tau), &mut trace)?;
    }
    let violation = sol.alpha.max_binary_violation();
    let mut rounded = false;
    let snapped = sol.alpha.snapped(settings.binary_tol);
    if snapped.max_binary_violation() > 0.0 {
        let schedule = round_indicators(&sol.alpha, scenario.timing.max_sensing_slots);
        let p = sol.sinr.clone().expect("majorized model has slacks");
        sol = sca(scenario, trajectory, &p, &schedule, None, &mut trace).map_err(sensing_infeasible)?;
        rounded = true;
    } else {
        sol.alpha = snapped;
    }
    let sol = polished(scenario, trajectory, &sol, &mut trace)?;
    Ok(BeamOutcome {
        solution: sol,
        trace,
        rounded,
        pre_rounding_binary_violation: violation,
    })
}

/// Re-solves the slots without sensing with the indicators and the sensing
/// slots' covariances held fixed, crediting the sensing slots' exact rates
/// against the average-rate requirement. Starts from a feasible point, so the
/// transmit power cannot increase beyond solver accuracy; the rejoined
/// solution is discarded otherwise.
pub fn polish_communication(
    scenario: &Scenario,
    trajectory: &Trajectory,
    solution: &P2Solution,
) -> Result<P2Solution, SolveError> {
    let n_slots = scenario.num_slots();
    let free: Vec<usize> = (0..n_slots).filter(|&n| solution.alpha.sum_at(n) == 0.0).collect();
    if free.is_empty() {
        return Ok(solution.clone());
    }
    let channels = SlotChannels::new(scenario, trajectory);
    let covs = solution.raw_covariances();
    let exact = SinrPoint::from_covariances(scenario, &channels, &covs);
    let mut sub = scenario.clone();
    sub.targets.clear();
    sub.timing.slots = free.len();
    sub.timing.duration = free.len() as f64 * scenario.timing.slot_length;
    for (k, user) in sub.users.iter_mut().enumerate() {
        let fixed: f64 = (0..n_slots)
            .filter(|n| !free.contains(n))
            .map(|n| (1.0 + exact.mu[n][k]).log2())
            .sum();
        let need = n_slots as f64 * user.min_rate * (1.0 + RATE_MARGIN) - fixed;
        user.min_rate = (need / free.len() as f64).max(0.0);
    }
    let sub_traj = Trajectory {
        positions: free.iter().map(|&n| trajectory.positions[n]).collect(),
        velocities: free.iter().map(|&n| trajectory.velocities[n]).collect(),
        slot_length: trajectory.slot_length,
    };
    let point = SinrPoint {
        mu: free.iter().map(|&n| exact.mu[n].clone()).collect(),
        phi: free.iter().map(|&n| exact.phi[n].clone()).collect(),
    };
    let schedule = SensingSchedule::zeros(0, free.len());
    let polished = build_p2(&sub, &sub_traj, &SinrModel::Majorized(&point), &IndicatorModel::Frozen(&schedule))?
        .solve(scenario.solver.conic_tolerance)?;
    let slot_power = |c: &[Covariance]| c.iter().map(|w| w.0.trace().re).sum::<f64>();
    let before: f64 = free.iter().map(|&n| slot_power(&solution.covariances[n])).sum();
    let after: f64 = polished.covariances.iter().map(|c| slot_power(c)).sum();
    if after > before * (1.0 + 1e-6) {
        log::debug!("communication polish raised power {before:e} -> {after:e}; kept the joint solution");
        return Ok(solution.clone());
    }
    let mut out = solution.clone();
    for (i, &n) in free.iter().enumerate() {
        out.covariances[n] = polished.covariances[i].clone();
    }
    let delta = (after - before) / n_slots as f64;
    out.power_objective += delta;
    out.objective += delta;
    out.sinr = Some(SinrPoint::from_covariances(scenario, &channels, &out.raw_covariances()));
    out.reduced_accuracy |= polished.reduced_accuracy;
    Ok(out)
}

fn polished(
    scenario: &Scenario,
    trajectory: &Trajectory,
    sol: &P2Solution,
    trace: &mut Vec<BeamIteration>,
) -> Result<P2Solution, SolveError> {
    let out = polish_communication(scenario, trajectory, sol)?;
    trace.push(BeamIteration {
        objective: out.power_objective,
        penalized_objective: out.penalized_objective(),
        penalty_weight: out.penalty,
        max_binary_violation: out.alpha.max_binary_violation(),
    });
    Ok(out)
}

fn sensing_infeasible(e: SolveError) -> SolveError {
    match e {
        SolveError::Infeasible { detail, .. } => {
            SolveError::SensingInfeasible(format!("rounded schedule cannot meet the echo SNR: {detail}"))
        }
        other => other,
    }
}

/// Re-solves with `schedule` frozen, starting from `start`.
pub fn solve_frozen(
    scenario: &Scenario,
    trajectory: &Trajectory,
    start: &[Vec<CMatrix>],
    schedule: &SensingSchedule,
) -> Result<BeamOutcome, SolveError> {
    let channels = SlotChannels::new(scenario, trajectory);
    let point = SinrPoint::from_covariances(scenario, &channels, start);
    let mut trace = Vec::new();
    let sol = sca(scenario, trajectory, &point, schedule, None, &mut trace).map_err(sensing_infeasible)?;
    let sol = polished(scenario, trajectory, &sol, &mut trace)?;
    Ok(BeamOutcome {
        solution: sol,
        trace,
        rounded: false,
        pre_rounding_binary_violation: 0.0,
    })
}

/// Threshold at ½, then keep at most one target per slot (largest α) and at
/// most `max_slots` slots per target (largest α). Ties go to the lower target
/// index, then the lower slot index.
pub fn round_indicators(alpha: &SensingSchedule, max_slots: usize) -> SensingSchedule {
    let e_targets = alpha.targets();
    let n_slots = alpha.alpha.first().map_or(0, |r| r.len());
    let mut out = SensingSchedule::zeros(e_targets, n_slots);
    for n in 0..n_slots {
        let best = (0..e_targets)
            .filter(|&e| alpha.alpha[e][n] >= 0.5)
            .max_by(|&a, &b| alpha.alpha[a][n].total_cmp(&alpha.alpha[b][n]).then(b.cmp(&a)));
        if let Some(e) = best {
            out.alpha[e][n] = 1.0;
        }
    }
    for e in 0..e_targets {
        let mut chosen: Vec<usize> = (0..n_slots).filter(|&n| out.alpha[e][n] == 1.0).collect();
        if chosen.len() > max_slots {
            chosen.sort_by(|&a, &b| alpha.alpha[e][b].total_cmp(&alpha.alpha[e][a]).then(a.cmp(&b)));
            for &n in &chosen[max_slots..] {
                out.alpha[e][n] = 0.0;
            }
        }
    }
    out
}

/// Principal-eigenpair beamformer of one covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOne {
    pub beam: Vec<Complex<f64>>,
    /// λ₂/λ₁ (0 for an exactly rank-one or zero matrix).
    pub ratio: f64,
    pub tight: bool,
}

/// `w = √λ₁·u₁` and whether λ₂/λ₁ ≤ `rank_tol`.
pub fn extract_rank_one(w: &CMatrix, rank_tol: f64) -> RankOne {
    let m = w.nrows();
    let herm = (w + w.adjoint()) * Complex::new(0.5, 0.0);
    let eig = herm.symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let l1 = eig.eigenvalues[order[0]].max(0.0);
    let l2 = if m > 1 { eig.eigenvalues[order[1]].max(0.0) } else { 0.0 };
    if l1 <= 0.0 {
        return RankOne {
            beam: vec![Complex::new(0.0, 0.0); m],
            ratio: 0.0,
            tight: true,
        };
    }
    let u = eig.eigenvectors.column(order[0]);
    // Fix the global phase so the first nonzero entry is real and positive.
    let pivot = u.iter().find(|z| z.norm() > 1e-12).copied().unwrap_or(Complex::new(1.0, 0.0));
    let phase = pivot.conj() / pivot.norm();
    let beam = u.iter().map(|z| z * phase * l1.sqrt()).collect();
    let ratio = l2 / l1;
    RankOne {
        beam,
        ratio,
        tight: ratio <= rank_tol,
    }
}

/// Powers p ≥ 0 giving user k the SINR `targets[k]` with unit directions
/// `dirs`, or `None` when the power-control system has no nonnegative
/// solution.
pub fn power_control(
    channels: &[Vec<Complex<f64>>],
    noise: &[f64],
    dirs: &[Vec<Complex<f64>>],
    targets: &[f64],
    extra_interference: &[f64],
) -> Option<Vec<f64>> {
    let k_users = dirs.len();
    let gain = |k: usize, i: usize| -> f64 {
        channels[k]
            .iter()
            .zip(&dirs[i])
            .map(|(h, u)| h.conj() * u)
            .sum::<Complex<f64>>()
            .norm_sqr()
    };
    let a = DMatrix::from_fn(k_users, k_users, |k, i| {
        if k == i {
            gain(k, k)
        } else {
            -targets[k] * gain(k, i)
        }
    });
    let b = DVector::from_fn(k_users, |k, _| targets[k] * (noise[k] + extra_interference[k]));
    let p = a.lu().solve(&b)?;
    if p.iter().all(|x| x.is_finite() && *x >= 0.0) {
        Some(p.iter().copied().collect())
    } else {
        None
    }
}

/// Gaussian randomization for one slot whose relaxed covariances are not
/// rank one: draws candidate directions with covariance W_k, restores the
/// relaxed SINRs by power control, and keeps the lowest-power candidate that
/// respects the power budget and, in sensing slots, the beampattern budget
/// and the relaxed echo gain. Returns `None` if no draw qualifies.
pub fn randomize_slot(
    scenario: &Scenario,
    channels: &SlotChannels,
    slot: usize,
    covariances: &[CMatrix],
    sensed_target: Option<usize>,
    seed: u64,
) -> Option<Vec<Vec<Complex<f64>>>> {
    let k_users = covariances.len();
    let m = scenario.platform.antennas;
    let noise: Vec<f64> = scenario.users.iter().map(|u| u.noise_power).collect();
    let h = &channels.users[slot];
    let targets: Vec<f64> = (0..k_users)
        .map(|k| {
            let s = quad_form(&covariances[k], &h[k]);
            let i: f64 = (0..k_users).filter(|&i| i != k).map(|i| quad_form(&covariances[i], &h[k])).sum();
            s.max(0.0) / (i.max(0.0) + noise[k])
        })
        .collect();
    let roots: Vec<CMatrix> = covariances
        .iter()
        .map(|w| {
            let eig = ((w + w.adjoint()) * Complex::new(0.5, 0.0)).symmetric_eigen();
            let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| Complex::new(l.max(0.0).sqrt(), 0.0)));
            &eig.eigenvectors * d * eig.eigenvectors.adjoint()
        })
        .collect();
    let relaxed_total: CMatrix = covariances.iter().fold(DMatrix::zeros(m, m), |acc, w| acc + w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (slot as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut best: Option<(f64, Vec<Vec<Complex<f64>>>)> = None;
    for _ in 0..scenario.solver.randomization_draws {
        let dirs: Vec<Vec<Complex<f64>>> = roots
            .iter()
            .map(|r| {
                let z = DVector::from_fn(m, |_, _| {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    Complex::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
                });
                let v = r * z;
                let nv = v.norm();
                if nv > 0.0 {
                    v.iter().map(|x| x / nv).collect()
                } else {
                    vec![Complex::new(0.0, 0.0); m]
                }
            })
            .collect();
        let Some(powers) = power_control(h, &noise, &dirs, &targets, &vec![0.0; k_users]) else {
            continue;
        };
        let total: f64 = powers.iter().sum();
        if total > scenario.platform.p_max {
            continue;
        }
        let beams: Vec<Vec<Complex<f64>>> = dirs
            .iter()
            .zip(&powers)
            .map(|(d, p)| d.iter().map(|x| x * p.sqrt()).collect())
            .collect();
        if let Some(e) = sensed_target {
            let cov = beams.iter().fold(DMatrix::zeros(m, m), |acc: CMatrix, w| {
                acc + DMatrix::from_fn(m, m, |i, j| w[i] * w[j].conj())
            });
            let t = &scenario.targets[e];
            if (&cov - &t.desired_covariance).norm_squared() > t.beampattern_error_budget {
                continue;
            }
            let a = &channels.targets[slot][e];
            if quad_form(&cov, a) < quad_form(&relaxed_total, a) * (1.0 - 1e-9) {
                continue;
            }
        }
        if best.as_ref().is_none_or(|(p, _)| total < *p) {
            best = Some((total, beams));
        }
    }
    best.map(|(_, b)| b)
}
