//! Trajectory and velocity subproblem at fixed covariances and sensing
//! schedule, and the time-filling initial trajectory.
//!
//! Three nonconvex pieces are restricted around the previous iterate: the
//! induced-power slack through 1/y² ≤ g(y, v), the squared slant range
//! through the affine lower bound of ‖q − d‖², and the off-diagonal
//! beampattern term J through its first-order expansion in s. The last one
//! is not a one-sided bound, so each candidate is checked against the exact
//! channel model and the trust regions halve on failure.

use nalgebra::DMatrix;
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::channel::{expansion_gradient, quad_form, quadratic_form_expansion, ArrayGeometry};
use crate::conic::{self, AffineExpr, Cone, ConicProgram, SolveStatus, Var};
use crate::error::SolveError;
use crate::plan::{SensingSchedule, SlotChannels, Trajectory};
use crate::power::{flight_power, induced_slack};
use crate::scalar::{dot2, norm2, norm2_sq, sub2, Scalar, Vec2};
use crate::scenario::{CMatrix, Scenario};

const STAGE: &str = "trajectory";

/// Relative slack of the exact-model check applied to every candidate.
pub const STEP_AUDIT_SLACK: f64 = 1e-3;

/// The slant-range trust region may not shrink below this, m².
pub const MIN_TRUST_REGION: f64 = 1e-3;

/// Largest number of stops ordered by exhaustive search.
const EXHAUSTIVE_TOUR_LIMIT: usize = 8;

/// ‖q_t − d‖² + 2(q_t − d)ᵀ(q − q_t): the tangent plane of ‖q − d‖² at q_t,
/// which never exceeds it.
pub fn affine_f_bound<T: Scalar>(q: Vec2<T>, d: Vec2<T>, qt: Vec2<T>) -> T {
    let e = sub2(qt, d);
    norm2_sq(e) + T::two() * dot2(e, sub2(q, qt))
}

/// Tangent plane of y² + ‖v‖²/v0² at (y_t, v_t); a global lower bound.
pub fn induced_lower_bound<T: Scalar>(y: T, v: Vec2<T>, yt: T, vt: Vec2<T>, v0: T) -> T {
    let v02 = v0 * v0;
    yt * yt + norm2_sq(vt) / v02 + T::two() * yt * (y - yt) + T::two() * dot2(vt, sub2(v, vt)) / v02
}

/// J(s_t) + J'(s_t)(s − s_t) for the covariance `w`.
pub fn linearized_off_diagonal<T: Scalar>(
    w: &DMatrix<Complex<T>>,
    s: T,
    st: T,
    geometry: &ArrayGeometry<T>,
    beta0: T,
) -> Result<T, SolveError> {
    let e = quadratic_form_expansion(w, st, geometry, beta0)?;
    let grad = expansion_gradient(w, gradient_point(st, geometry), geometry, beta0)?;
    Ok(e.off_diagonal + grad * (s - st))
}

/// The gradient is undefined exactly overhead; evaluate it just above.
fn gradient_point<T: Scalar>(st: T, geometry: &ArrayGeometry<T>) -> T {
    st.max(geometry.altitude * geometry.altitude * T::lit(1.0 + 1e-9))
}

/// Restriction of one waypoint to a fixed point or a straight segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PathSlot {
    Free,
    Fixed(Vec2<f64>),
    Segment { from: Vec2<f64>, to: Vec2<f64> },
}

/// Fixed inputs of the trajectory stage.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryState<'a> {
    /// `covariances[n][k]` is W_k[n].
    pub covariances: &'a [Vec<CMatrix>],
    /// Binary sensing indicators.
    pub schedule: &'a SensingSchedule,
    /// Per-slot waypoint restriction, or `None` for a free path.
    pub path: Option<&'a [PathSlot]>,
}

/// Trust region sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrustRegion {
    /// On every slant-range slack s_k[n], m².
    pub slack: f64,
    /// On every waypoint, m.
    pub position: f64,
}

/// Exact channel quantities along a trajectory, `[slot][user]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPoint {
    /// s_k[n] = ‖q[n] − u_k‖² + H², m².
    pub slant_sq: Vec<Vec<f64>>,
    /// SINR of user k.
    pub sinr: Vec<Vec<f64>>,
    /// Normalized denominator (Σ_{i≠k} β0²aᴴW_i a + σ²s)/(σ²H²).
    pub denominator: Vec<Vec<f64>>,
    /// Average rates, bit/s/Hz.
    pub rates: Vec<f64>,
}

impl ChannelPoint {
    pub fn new(scenario: &Scenario, covariances: &[Vec<CMatrix>], trajectory: &Trajectory) -> Result<Self, SolveError> {
        let g = scenario.geometry();
        let beta0 = scenario.timing.beta0;
        let h2 = g.altitude * g.altitude;
        let n_slots = trajectory.len();
        let mut out = Self {
            slant_sq: Vec::with_capacity(n_slots),
            sinr: Vec::with_capacity(n_slots),
            denominator: Vec::with_capacity(n_slots),
            rates: vec![0.0; scenario.num_users()],
        };
        for n in 0..n_slots {
            let mut srow = Vec::new();
            let mut mrow = Vec::new();
            let mut drow = Vec::new();
            for (k, user) in scenario.users.iter().enumerate() {
                let s = norm2_sq(sub2(trajectory.positions[n], user.position)) + h2;
                let terms = covariances[n]
                    .iter()
                    .map(|w| quadratic_form_expansion(w, s, &g, beta0).map(|e| e.total().max(0.0)))
                    .collect::<Result<Vec<_>, _>>()?;
                let c = 1.0 / (user.noise_power * h2);
                let interference: f64 = terms.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, t)| t).sum();
                let den = c * interference + s / h2;
                let sinr = c * terms[k] / den;
                out.rates[k] += (1.0 + sinr).log2() / n_slots as f64;
                srow.push(s);
                mrow.push(sinr);
                drow.push(den);
            }
            out.slant_sq.push(srow);
            out.sinr.push(mrow);
            out.denominator.push(drow);
        }
        Ok(out)
    }
}

/// Echo SNR Γ_e accumulated over the scheduled slots.
pub fn echo_snr(
    scenario: &Scenario,
    covariances: &[Vec<CMatrix>],
    schedule: &SensingSchedule,
    trajectory: &Trajectory,
) -> Vec<f64> {
    let channels = SlotChannels::new(scenario, trajectory);
    let m = scenario.platform.antennas;
    (0..scenario.num_targets())
        .map(|e| {
            (0..trajectory.len())
                .filter(|&n| schedule.alpha[e][n] > 0.0)
                .map(|n| {
                    let mut total = DMatrix::from_element(m, m, Complex::new(0.0, 0.0));
                    for w in &covariances[n] {
                        total += w;
                    }
                    schedule.alpha[e][n] * channels.echo_gain[n][e] * quad_form(&total, &channels.targets[n][e])
                })
                .sum()
        })
        .collect()
}

/// (1/N)·Σ_n[Σ_e α P_hover + (1 − Σ_e α)·P_fly(v[n])], W.
pub fn propulsion_objective(scenario: &Scenario, trajectory: &Trajectory, schedule: &SensingSchedule) -> f64 {
    let p = &scenario.power_model;
    let hover = scenario.hover_power();
    let n_slots = trajectory.len();
    (0..n_slots)
        .map(|n| {
            let a = schedule.sum_at(n);
            a * hover + (1.0 - a) * flight_power(trajectory.velocities[n], p).total
        })
        .sum::<f64>()
        / n_slots as f64
}

fn dimension(detail: String) -> SolveError {
    SolveError::Dimension { stage: STAGE, detail }
}

/// The assembled trajectory subproblem.
#[derive(Debug, Clone)]
pub struct P4Program {
    pub program: ConicProgram,
    positions: Vec<[Var; 2]>,
    velocities: Vec<[Var; 2]>,
    slot_length: f64,
    objective_constant: f64,
}

/// Minimizer of one trajectory subproblem.
#[derive(Debug, Clone, PartialEq)]
pub struct P4Solution {
    /// Waypoints and velocities as returned by the backend.
    pub trajectory: Trajectory,
    /// Restricted objective value, W.
    pub objective: f64,
    pub reduced_accuracy: bool,
}

impl P4Program {
    pub fn solve(&self, tolerance: f64) -> Result<P4Solution, SolveError> {
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
        let grab = |v: &[Var; 2]| [sol.value(v[0]), sol.value(v[1])];
        Ok(P4Solution {
            trajectory: Trajectory {
                positions: self.positions.iter().map(grab).collect(),
                velocities: self.velocities.iter().map(grab).collect(),
                slot_length: self.slot_length,
            },
            objective: sol.objective_value + self.objective_constant,
            reduced_accuracy: sol.stats.reduced_accuracy,
        })
    }
}

fn xy(v: &[Var; 2]) -> [AffineExpr; 2] {
    [AffineExpr::var(v[0]), AffineExpr::var(v[1])]
}

fn minus_point(v: &[Var; 2], p: Vec2<f64>) -> Vec<AffineExpr> {
    vec![AffineExpr::var(v[0]) - AffineExpr::constant(p[0]), AffineExpr::var(v[1]) - AffineExpr::constant(p[1])]
}

/// Per-user average-rate requirement imposed at an expansion point: R_min
/// with the rate margin, or the rate already achieved there if lower.
fn rate_targets(scenario: &Scenario, point: &ChannelPoint) -> Vec<f64> {
    scenario
        .users
        .iter()
        .zip(&point.rates)
        .map(|(u, &r)| (u.min_rate * (1.0 + crate::beamforming::RATE_MARGIN)).min(r))
        .collect()
}

/// Builds the trajectory subproblem restricted around `expansion`.
pub fn build_p4(
    scenario: &Scenario,
    state: &TrajectoryState,
    expansion: &Trajectory,
    trust: TrustRegion,
) -> Result<P4Program, SolveError> {
    let n_slots = scenario.num_slots();
    let k_users = scenario.num_users();
    let platform = &scenario.platform;
    if expansion.len() != n_slots || expansion.velocities.len() != n_slots {
        return Err(dimension(format!("expansion has {} slots, expected {n_slots}", expansion.len())));
    }
    if state.covariances.len() != n_slots || state.covariances.iter().any(|r| r.len() != k_users) {
        return Err(dimension("covariances must be [slots][users]".into()));
    }
    if state.schedule.targets() != scenario.num_targets() || state.schedule.alpha.iter().any(|r| r.len() != n_slots) {
        return Err(dimension("schedule must be [targets][slots]".into()));
    }
    if state.schedule.max_binary_violation() > 0.0 {
        return Err(dimension("the trajectory stage needs binary indicators".into()));
    }
    if state.path.is_some_and(|p| p.len() != n_slots) {
        return Err(dimension("path restriction must cover every slot".into()));
    }
    let g = scenario.geometry();
    let beta0 = scenario.timing.beta0;
    let h2 = g.altitude * g.altitude;
    let dt = scenario.timing.slot_length;
    let pm = &scenario.power_model;
    let inv_n = 1.0 / n_slots as f64;
    let point = ChannelPoint::new(scenario, state.covariances, expansion)?;
    let targets = rate_targets(scenario, &point);

    let mut prog = ConicProgram::new();
    let positions: Vec<[Var; 2]> = (0..n_slots)
        .map(|n| {
            let v = prog.vector(format!("q[{n}]"), 2);
            [v[0], v[1]]
        })
        .collect();
    let velocities: Vec<[Var; 2]> = (0..n_slots)
        .map(|n| {
            let v = prog.vector(format!("v[{n}]"), 2);
            [v[0], v[1]]
        })
        .collect();

    let mut objective = AffineExpr::zero();
    let mut constant = 0.0;
    let v0 = pm.induced_velocity;
    for n in 0..n_slots {
        let sensed = state.schedule.sum_at(n);
        let v = xy(&velocities[n]);
        if sensed > 0.5 {
            constant += inv_n * scenario.hover_power();
            for (c, vc) in v.iter().enumerate() {
                prog.equal(format!("C10 hover slot {n}.{c}"), vc.clone(), AffineExpr::zero())?;
            }
            for (e, t) in scenario.targets.iter().enumerate() {
                if state.schedule.alpha[e][n] > 0.5 {
                    prog.norm_leq(
                        format!("C7 target {e} slot {n}"),
                        minus_point(&positions[n], t.position),
                        AffineExpr::constant(platform.hover_radius),
                    )?;
                }
            }
            continue;
        }
        let y = prog.scalar(format!("y[{n}]"));
        let z = prog.scalar(format!("z[{n}]"));
        let w = prog.scalar(format!("w[{n}]"));
        let t = prog.scalar(format!("t[{n}]"));
        let u = prog.scalar(format!("u[{n}]"));
        prog.sum_squares_leq_product(format!("speed² slot {n}"), v.to_vec(), AffineExpr::var(w), AffineExpr::constant(1.0))?;
        prog.norm_leq(format!("speed slot {n}"), v.to_vec(), AffineExpr::var(t))?;
        // u ≥ t³ as u^{1/3}·1^{2/3} ≥ |t|
        prog.add_constraint(
            format!("speed³ slot {n}"),
            vec![AffineExpr::var(u), AffineExpr::constant(1.0), AffineExpr::var(t)],
            Cone::Power { alpha: 1.0 / 3.0 },
        )?;
        prog.norm_leq(format!("C10 slot {n}"), v.to_vec(), AffineExpr::constant(platform.v_max))?;
        // 1/y ≤ z and z² ≤ g(y, v) together give 1/y² ≤ g.
        prog.square_leq_product(
            format!("induced reciprocal slot {n}"),
            AffineExpr::constant(1.0),
            AffineExpr::var(y),
            AffineExpr::var(z),
        )?;
        let vt = expansion.velocities[n];
        let yt = induced_slack(norm2(vt), pm);
        let mut gb = AffineExpr::constant(yt * yt + norm2_sq(vt) / (v0 * v0) - 2.0 * yt * yt - 2.0 * norm2_sq(vt) / (v0 * v0));
        gb.add_term(y, 2.0 * yt);
        gb.add_term(velocities[n][0], 2.0 * vt[0] / (v0 * v0));
        gb.add_term(velocities[n][1], 2.0 * vt[1] / (v0 * v0));
        prog.square_leq_product(format!("induced bound slot {n}"), AffineExpr::var(z), gb, AffineExpr::constant(1.0))?;
        constant += inv_n * (pm.blade_profile_power - pm.variant_offset());
        objective.add_term(w, inv_n * pm.blade_speed_coeff());
        objective.add_term(y, inv_n * pm.induced_power);
        objective.add_term(u, inv_n * pm.parasite_coeff());
    }

    for n in 0..n_slots.saturating_sub(1) {
        let f = (1.0 - state.schedule.sum_at(n)) * dt;
        for c in 0..2 {
            let mut r = AffineExpr::var(positions[n + 1][c]);
            r.add_term(positions[n][c], -1.0);
            r.add_term(velocities[n][c], -f);
            prog.equal(format!("C8 slot {n}.{c}"), r, AffineExpr::zero())?;
        }
        let dv = vec![
            AffineExpr::var(velocities[n + 1][0]) - AffineExpr::var(velocities[n][0]),
            AffineExpr::var(velocities[n + 1][1]) - AffineExpr::var(velocities[n][1]),
        ];
        prog.norm_leq(format!("C9 slot {n}"), dv, AffineExpr::constant(platform.a_max * dt))?;
    }
    for c in 0..2 {
        prog.equal(
            format!("start.{c}"),
            AffineExpr::var(positions[0][c]),
            AffineExpr::constant(platform.start_pos[c]),
        )?;
        prog.equal(
            format!("end.{c}"),
            AffineExpr::var(positions[n_slots - 1][c]),
            AffineExpr::constant(platform.end_pos[c]),
        )?;
    }
    for n in 0..n_slots {
        prog.norm_leq(
            format!("position trust slot {n}"),
            minus_point(&positions[n], expansion.positions[n]),
            AffineExpr::constant(trust.position),
        )?;
        match state.path.map(|p| &p[n]) {
            None | Some(PathSlot::Free) => {}
            Some(PathSlot::Fixed(p)) => {
                for c in 0..2 {
                    prog.equal(format!("path slot {n}.{c}"), AffineExpr::var(positions[n][c]), AffineExpr::constant(p[c]))?;
                }
            }
            Some(PathSlot::Segment { from, to }) => {
                let d = sub2(*to, *from);
                let rel = minus_point(&positions[n], *from);
                let along = rel[0].clone() * d[0] + rel[1].clone() * d[1];
                let across = rel[0].clone() * (-d[1]) + rel[1].clone() * d[0];
                prog.equal(format!("path normal slot {n}"), across, AffineExpr::zero())?;
                prog.geq(format!("path after start slot {n}"), along.clone(), AffineExpr::zero())?;
                prog.geq(format!("path before end slot {n}"), AffineExpr::constant(norm2_sq(d)), along)?;
            }
        }
    }

    for (k, user) in scenario.users.iter().enumerate() {
        if user.min_rate <= 0.0 {
            continue;
        }
        let c = 1.0 / (user.noise_power * h2);
        let mut rate_sum = AffineExpr::zero();
        for n in 0..n_slots {
            let st = point.slant_sq[n][k];
            let mu_t = point.sinr[n][k].max(1e-12);
            let den_t = point.denominator[n][k];
            let s = prog.scalar(format!("s[{n}][{k}]"));
            let x = prog.scalar(format!("mu[{n}][{k}]"));
            let b = prog.scalar(format!("beta[{n}][{k}]"));
            let r = prog.scalar(format!("r[{n}][{k}]"));
            // s is carried as s/H².
            let qt = expansion.positions[n];
            let e = sub2(qt, user.position);
            let mut f = AffineExpr::constant((norm2_sq(e) - 2.0 * dot2(e, qt) + h2) / h2);
            f.add_term(positions[n][0], 2.0 * e[0] / h2);
            f.add_term(positions[n][1], 2.0 * e[1] / h2);
            prog.geq(format!("slant bound slot {n} user {k}"), f, AffineExpr::var(s))?;
            prog.geq(format!("s above H² slot {n} user {k}"), AffineExpr::var(s), AffineExpr::constant(1.0))?;
            let ds = trust.slack / h2;
            prog.geq(format!("s trust up slot {n} user {k}"), AffineExpr::constant(st / h2 + ds), AffineExpr::var(s))?;
            prog.geq(format!("s trust down slot {n} user {k}"), AffineExpr::var(s), AffineExpr::constant(st / h2 - ds))?;

            // c·(U_i + J_i(s_t) + J'_i(s_t)·H²(s' − s'_t)) as an affine expression in s'.
            let beam_term = |i: usize| -> Result<AffineExpr, SolveError> {
                let w = &state.covariances[n][i];
                let ex = quadratic_form_expansion(w, st, &g, beta0)?;
                let grad = expansion_gradient(w, gradient_point(st, &g), &g, beta0)?;
                let mut a = AffineExpr::constant(c * (ex.total() - grad * st));
                a.add_term(s, c * grad * h2);
                Ok(a)
            };
            let mut den = AffineExpr::var(s);
            for i in 0..k_users {
                if i != k {
                    den = den + beam_term(i)?;
                }
            }
            // Normalized slacks: μ' = μ'_t·x and β = β_t·b.
            prog.geq(format!("C2b slot {n} user {k}"), AffineExpr::term(b, 1.0), den.scaled(1.0 / den_t))?;
            let mut rhs = beam_term(k)?.scaled(1.0 / (mu_t * den_t));
            rhs.add_term(x, 1.0);
            rhs.add_term(b, 1.0);
            rhs.constant -= 1.0;
            prog.square_leq_product(
                format!("C2a slot {n} user {k}"),
                AffineExpr::var(x) + AffineExpr::var(b),
                rhs.scaled(2.0),
                AffineExpr::constant(1.0),
            )?;
            let mut one_plus = AffineExpr::term(x, mu_t);
            one_plus.constant += 1.0;
            prog.add_constraint(
                format!("rate slot {n} user {k}"),
                vec![AffineExpr::var(r), AffineExpr::constant(1.0), one_plus],
                Cone::Exp,
            )?;
            rate_sum.add_term(r, 1.0);
        }
        prog.geq(
            format!("C2c user {k}"),
            rate_sum,
            AffineExpr::constant(n_slots as f64 * std::f64::consts::LN_2 * targets[k]),
        )?;
    }

    prog.minimize(objective);
    Ok(P4Program {
        program: prog,
        positions,
        velocities,
        slot_length: dt,
        objective_constant: constant,
    })
}

/// Enforces the boundary waypoints and the dynamics exactly: hover slots copy
/// the waypoint forward (backward for a hover run that ends the mission),
/// and every other velocity is recomputed from consecutive waypoints.
pub fn clean_trajectory(scenario: &Scenario, raw: &Trajectory, schedule: &SensingSchedule) -> Trajectory {
    let n_slots = raw.len();
    let dt = raw.slot_length;
    let mut q = raw.positions.clone();
    let hover = |n: usize| schedule.sum_at(n) > 0.5;
    q[0] = scenario.platform.start_pos;
    for n in 0..n_slots - 1 {
        if hover(n) {
            q[n + 1] = q[n];
        }
    }
    q[n_slots - 1] = scenario.platform.end_pos;
    let mut n = n_slots - 1;
    while n > 0 && hover(n - 1) {
        q[n - 1] = q[n];
        n -= 1;
    }
    let mut v = raw.velocities.clone();
    for n in 0..n_slots - 1 {
        v[n] = if hover(n) {
            [0.0, 0.0]
        } else {
            [(q[n + 1][0] - q[n][0]) / dt, (q[n + 1][1] - q[n][1]) / dt]
        };
    }
    if hover(n_slots - 1) {
        v[n_slots - 1] = [0.0, 0.0];
    }
    Trajectory {
        positions: q,
        velocities: v,
        slot_length: dt,
    }
}

/// One accepted or rejected candidate of the trajectory stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryIteration {
    /// Exact propulsion objective of the candidate, W.
    pub objective: f64,
    pub slack_trust_region: f64,
    pub position_trust_region: f64,
    /// The candidate passed the exact-model check and was accepted.
    pub audit_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryOutcome {
    pub trajectory: Trajectory,
    /// Exact propulsion objective of `trajectory`, W.
    pub objective: f64,
    pub trace: Vec<TrajectoryIteration>,
    /// The trust region fell below its floor and the last accepted point was
    /// returned.
    pub collapsed: bool,
}

/// Checks a candidate against the exact channel model: every rate at least
/// the requirement used at the expansion, every echo SNR at least min(Γ_th,
/// Γ at the expansion), both up to [`STEP_AUDIT_SLACK`].
fn step_audit(
    scenario: &Scenario,
    state: &TrajectoryState,
    candidate: &Trajectory,
    rate_req: &[f64],
    snr_req: &[f64],
) -> Result<bool, SolveError> {
    let point = ChannelPoint::new(scenario, state.covariances, candidate)?;
    let rates_ok = point
        .rates
        .iter()
        .zip(rate_req)
        .all(|(&r, &req)| r >= req * (1.0 - STEP_AUDIT_SLACK));
    let snr = echo_snr(scenario, state.covariances, state.schedule, candidate);
    let snr_ok = snr.iter().zip(snr_req).all(|(&g, &req)| g >= req * (1.0 - STEP_AUDIT_SLACK));
    Ok(rates_ok && snr_ok)
}

fn rel_change(prev: f64, cur: f64) -> f64 {
    (prev - cur).abs() / prev.abs().max(1e-12)
}

/// Sequential convex restriction of the trajectory subproblem from `start`.
///
/// Returns the last candidate that passed the exact-model check, never one
/// with a larger objective than `start`.
pub fn solve_trajectory(
    scenario: &Scenario,
    state: &TrajectoryState,
    start: &Trajectory,
) -> Result<TrajectoryOutcome, SolveError> {
    let settings = &scenario.solver;
    let start_point = ChannelPoint::new(scenario, state.covariances, start)?;
    let rate_req: Vec<f64> = scenario
        .users
        .iter()
        .zip(&start_point.rates)
        .map(|(u, &r)| u.min_rate.min(r))
        .collect();
    let start_snr = echo_snr(scenario, state.covariances, state.schedule, start);
    let snr_req: Vec<f64> = scenario
        .targets
        .iter()
        .zip(&start_snr)
        .map(|(t, &g)| t.snr_threshold.min(g))
        .collect();
    let absolute_ok = scenario
        .users
        .iter()
        .zip(&start_point.rates)
        .all(|(u, &r)| r >= u.min_rate * (1.0 - STEP_AUDIT_SLACK))
        && scenario
            .targets
            .iter()
            .zip(&start_snr)
            .all(|(t, &g)| g >= t.snr_threshold * (1.0 - STEP_AUDIT_SLACK));

    let mut current = clean_trajectory(scenario, start, state.schedule);
    let mut f_cur = propulsion_objective(scenario, &current, state.schedule);
    let mut trust = TrustRegion {
        slack: settings.trust_region,
        position: settings.position_trust_region,
    };
    let mut trace = Vec::new();
    let mut collapsed = false;
    'outer: for _ in 0..settings.max_sca_iters {
        let accepted = loop {
            let attempt = build_p4(scenario, state, &current, trust)?.solve(settings.conic_tolerance);
            let candidate = match attempt {
                Ok(sol) => Some(clean_trajectory(scenario, &sol.trajectory, state.schedule)),
                Err(SolveError::NumericalFailure { diagnostics, .. }) => {
                    log::debug!("trajectory step rejected: {diagnostics}");
                    None
                }
                Err(e) => return Err(e),
            };
            let verdict = match &candidate {
                Some(c) => {
                    let f = propulsion_objective(scenario, c, state.schedule);
                    let pass = f <= f_cur + 1e-9 * f_cur.abs() && step_audit(scenario, state, c, &rate_req, &snr_req)?;
                    trace.push(TrajectoryIteration {
                        objective: f,
                        slack_trust_region: trust.slack,
                        position_trust_region: trust.position,
                        audit_pass: pass,
                    });
                    pass.then_some(f)
                }
                None => None,
            };
            if let (Some(f), Some(c)) = (verdict, candidate) {
                break (c, f);
            }
            trust.slack *= 0.5;
            trust.position *= 0.5;
            if trust.slack < MIN_TRUST_REGION {
                if !absolute_ok {
                    return Err(SolveError::TrustRegionCollapse { radius: trust.slack });
                }
                collapsed = true;
                break 'outer;
            }
        };
        let (c, f) = accepted;
        let done = rel_change(f_cur, f) <= settings.ao_tolerance;
        current = c;
        f_cur = f;
        if done {
            break;
        }
    }
    Ok(TrajectoryOutcome {
        trajectory: current,
        objective: f_cur,
        trace,
        collapsed,
    })
}

// ---------------------------------------------------------------------------
// Initial trajectory
// ---------------------------------------------------------------------------

/// Slots of hovering needed above target `e` so that a single focused beam
/// at full power meets the echo SNR threshold:
/// ⌈Γ_th·16πH⁴σ_e²/(ϑβ0²·M·P_max)⌉, at least one.
pub fn hover_slots_required(scenario: &Scenario, e: usize) -> Result<usize, SolveError> {
    let t = &scenario.targets[e];
    let p = &scenario.platform;
    let h4 = p.altitude.powi(4);
    let beta0 = scenario.timing.beta0;
    let best = t.rcs * beta0 * beta0 * p.antennas as f64 * p.p_max / (16.0 * std::f64::consts::PI * h4 * t.echo_noise);
    let slots = ((t.snr_threshold / best) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    if slots > scenario.timing.max_sensing_slots {
        return Err(SolveError::SensingInfeasible(format!(
            "target {e} needs {slots} hover slots, at most {} allowed",
            scenario.timing.max_sensing_slots
        )));
    }
    Ok(slots)
}

fn tour_length(start: Vec2<f64>, end: Vec2<f64>, points: &[Vec2<f64>], order: &[usize]) -> f64 {
    let mut prev = start;
    let mut total = 0.0;
    for &i in order {
        total += norm2(sub2(points[i], prev));
        prev = points[i];
    }
    total + norm2(sub2(end, prev))
}

fn permutations(items: &mut Vec<usize>, k: usize, visit: &mut dyn FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permutations(items, k + 1, visit);
        items.swap(k, i);
    }
}

/// Visiting order of `points` minimizing the chord length from `start`
/// through all of them to `end`. Exhaustive up to eight points; beyond that,
/// nearest neighbour followed by 2-opt. Ties go to the lexicographically
/// first order.
pub fn shortest_tour(start: Vec2<f64>, end: Vec2<f64>, points: &[Vec2<f64>]) -> Vec<usize> {
    let len = |o: &[usize]| tour_length(start, end, points, o);
    if points.len() <= EXHAUSTIVE_TOUR_LIMIT {
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut items: Vec<usize> = (0..points.len()).collect();
        permutations(&mut items, 0, &mut |o| {
            let l = len(o);
            let better = match &best {
                None => true,
                Some((bl, bo)) => l < bl - 1e-9 || (l <= bl + 1e-9 && o < bo.as_slice()),
            };
            if better {
                best = Some((l, o.to_vec()));
            }
        });
        return best.map(|b| b.1).unwrap_or_default();
    }
    let mut order = Vec::with_capacity(points.len());
    let mut left: Vec<usize> = (0..points.len()).collect();
    let mut at = start;
    while !left.is_empty() {
        let (j, _) = left
            .iter()
            .enumerate()
            .min_by(|a, b| norm2(sub2(points[*a.1], at)).total_cmp(&norm2(sub2(points[*b.1], at))))
            .expect("non-empty");
        let i = left.remove(j);
        at = points[i];
        order.push(i);
    }
    let mut improved = true;
    while improved {
        improved = false;
        for i in 0..order.len() {
            for j in i + 1..order.len() {
                let mut cand = order.clone();
                cand[i..=j].reverse();
                if len(&cand) < len(&order) - 1e-9 {
                    order = cand;
                    improved = true;
                }
            }
        }
    }
    order
}

/// How the UAV passes a waypoint of the initial path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopKind {
    /// Arrives and leaves at rest (mission ends and hover stops).
    Rest,
    /// Touches the waypoint at a slot boundary and turns there, with speed at
    /// most a_max·δt/2 on either side so the turn respects the acceleration
    /// limit.
    Touch,
}

/// A waypoint of the initial path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stop {
    pub position: Vec2<f64>,
    pub kind: StopKind,
    /// Hover slots spent at the waypoint.
    pub dwell: usize,
    /// Target sensed during the hover slots.
    pub sensed: Option<usize>,
}

/// Where the initial path meets each waypoint, by slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub position: Vec2<f64>,
    /// First slot at the waypoint.
    pub arrival: usize,
    /// Slot at which the UAV leaves the waypoint (equal to `arrival` with no
    /// dwell).
    pub departure: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialPlan {
    pub trajectory: Trajectory,
    pub schedule: SensingSchedule,
    /// Start, every stop, end.
    pub visits: Vec<Visit>,
}

impl InitialPlan {
    /// Pins every visit and keeps the slots between consecutive visits on the
    /// straight segment joining them.
    pub fn path_restriction(&self) -> Vec<PathSlot> {
        let n_slots = self.trajectory.len();
        let mut path = vec![PathSlot::Free; n_slots];
        for w in self.visits.windows(2) {
            for slot in path.iter_mut().take(w[1].arrival).skip(w[0].departure + 1) {
                *slot = PathSlot::Segment {
                    from: w[0].position,
                    to: w[1].position,
                };
            }
        }
        for v in &self.visits {
            for slot in path.iter_mut().take(v.departure + 1).skip(v.arrival) {
                *slot = PathSlot::Fixed(v.position);
            }
        }
        if let Some(last) = self.visits.last() {
            for slot in path.iter_mut().skip(last.departure) {
                *slot = PathSlot::Fixed(last.position);
            }
        }
        path
    }
}

/// Ramp bounds of one straight leg of `d` slots.
#[derive(Debug, Clone, Copy)]
struct Leg {
    length: f64,
    from: StopKind,
    to: StopKind,
}

impl Leg {
    /// Speed in slot j of d at cruise cap `c`: the cap, v_max, and the
    /// acceleration ramps out of and into the end stops.
    fn speed(&self, j: usize, d: usize, c: f64, step: f64, v_max: f64) -> f64 {
        let ramp = |kind: StopKind, k: usize| match kind {
            StopKind::Rest => step * (k as f64 + 1.0),
            StopKind::Touch => step * (k as f64 + 0.5),
        };
        c.min(v_max).min(ramp(self.from, j)).min(ramp(self.to, d - 1 - j))
    }

    fn reach(&self, d: usize, c: f64, step: f64, v_max: f64, dt: f64) -> f64 {
        (0..d).map(|j| self.speed(j, d, c, step, v_max)).sum::<f64>() * dt
    }

    /// Fewest slots covering the leg at cap `c`, if at most `limit`.
    fn slots_needed(&self, c: f64, step: f64, v_max: f64, dt: f64, limit: usize) -> Option<usize> {
        if self.length <= 0.0 {
            return Some(0);
        }
        (1..=limit).find(|&d| self.reach(d, c, step, v_max, dt) >= self.length * (1.0 - 1e-12))
    }

    /// Cap at which `d` slots cover the leg exactly.
    fn cap_for(&self, d: usize, step: f64, v_max: f64, dt: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, v_max);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.reach(d, mid, step, v_max, dt) >= self.length {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }
}

/// Per-leg slot counts for a moving budget of `budget` slots, or `None` if
/// the legs cannot be covered. Speeds share one cap; leftover slots go one at
/// a time to the leg with the highest cap.
fn allocate(legs: &[Leg], budget: usize, step: f64, v_max: f64, dt: f64) -> Option<Vec<usize>> {
    let moving: Vec<usize> = (0..legs.len()).filter(|&i| legs[i].length > 0.0).collect();
    if moving.is_empty() {
        return (budget == 0).then(|| vec![0; legs.len()]);
    }
    let counts_at = |c: f64| -> Option<Vec<usize>> {
        let mut out = vec![0; legs.len()];
        let mut used = 0;
        for &i in &moving {
            let d = legs[i].slots_needed(c, step, v_max, dt, budget - used)?;
            out[i] = d;
            used += d;
        }
        Some(out)
    };
    counts_at(v_max)?;
    let (mut lo, mut hi) = (0.0, v_max);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if counts_at(mid).is_some() {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut counts = counts_at(hi)?;
    let mut caps: Vec<f64> = (0..legs.len())
        .map(|i| if legs[i].length > 0.0 { legs[i].cap_for(counts[i], step, v_max, dt) } else { 0.0 })
        .collect();
    let mut used: usize = counts.iter().sum();
    while used < budget {
        let i = *moving
            .iter()
            .max_by(|&&a, &&b| caps[a].total_cmp(&caps[b]).then(b.cmp(&a)))
            .expect("non-empty");
        counts[i] += 1;
        caps[i] = legs[i].cap_for(counts[i], step, v_max, dt);
        used += 1;
    }
    Some(counts)
}

/// Lays out the path start → `stops` → end over the mission slots, filling
/// the time at the moving budget of least propulsion energy. Leftover slots
/// hover at the end.
pub fn time_path(scenario: &Scenario, stops: &[Stop]) -> Result<InitialPlan, SolveError> {
    let p = &scenario.platform;
    let n_slots = scenario.num_slots();
    let dt = scenario.timing.slot_length;
    let step = p.a_max * dt;
    let mut nodes = vec![Stop {
        position: p.start_pos,
        kind: StopKind::Rest,
        dwell: 0,
        sensed: None,
    }];
    nodes.extend_from_slice(stops);
    nodes.push(Stop {
        position: p.end_pos,
        kind: StopKind::Rest,
        dwell: 0,
        sensed: None,
    });
    let legs: Vec<Leg> = nodes
        .windows(2)
        .map(|w| Leg {
            length: norm2(sub2(w[1].position, w[0].position)),
            from: w[0].kind,
            to: w[1].kind,
        })
        .collect();
    let dwell: usize = stops.iter().map(|s| s.dwell).sum();
    let transitions = n_slots.saturating_sub(1);
    if dwell > transitions {
        return Err(SolveError::TimingInfeasible(format!(
            "{dwell} hover slots exceed the {transitions} available"
        )));
    }
    let free = transitions - dwell;
    let mut best: Option<(f64, InitialPlan)> = None;
    for budget in 0..=free {
        let Some(counts) = allocate(&legs, budget, step, p.v_max, dt) else {
            continue;
        };
        let plan = lay_out(scenario, &nodes, &legs, &counts, step, dt);
        let cost = propulsion_objective(scenario, &plan.trajectory, &plan.schedule);
        if best.as_ref().is_none_or(|(b, _)| cost <= *b + 1e-12) {
            best = Some((cost, plan));
        }
    }
    best.map(|b| b.1).ok_or_else(|| {
        let length: f64 = legs.iter().map(|l| l.length).sum();
        SolveError::TimingInfeasible(format!(
            "a {length:.1} m path with {dwell} hover slots does not fit in {transitions} slots of {dt} s at {} m/s",
            p.v_max
        ))
    })
}

fn lay_out(scenario: &Scenario, nodes: &[Stop], legs: &[Leg], counts: &[usize], step: f64, dt: f64) -> InitialPlan {
    let n_slots = scenario.num_slots();
    let v_max = scenario.platform.v_max;
    let mut q = Vec::with_capacity(n_slots);
    let mut schedule = SensingSchedule::zeros(scenario.num_targets(), n_slots);
    let mut visits = vec![Visit {
        position: nodes[0].position,
        arrival: 0,
        departure: 0,
    }];
    q.push(nodes[0].position);
    for (j, leg) in legs.iter().enumerate() {
        let a = nodes[j].position;
        let b = nodes[j + 1].position;
        let d = counts[j];
        if d > 0 {
            let cap = leg.cap_for(d, step, v_max, dt);
            let dir = sub2(b, a);
            let mut cum = 0.0;
            for i in 0..d {
                cum += leg.speed(i, d, cap, step, v_max) * dt;
                let f = (cum / leg.length).min(1.0);
                q.push(if i + 1 == d { b } else { [a[0] + f * dir[0], a[1] + f * dir[1]] });
            }
        }
        let arrival = q.len() - 1;
        let stop = &nodes[j + 1];
        for _ in 0..stop.dwell {
            if let Some(e) = stop.sensed {
                schedule.alpha[e][q.len() - 1] = 1.0;
            }
            q.push(b);
        }
        visits.push(Visit {
            position: b,
            arrival,
            departure: q.len() - 1,
        });
    }
    let end = nodes[nodes.len() - 1].position;
    while q.len() < n_slots {
        q.push(end);
    }
    let mut v: Vec<Vec2<f64>> = q
        .windows(2)
        .map(|w| [(w[1][0] - w[0][0]) / dt, (w[1][1] - w[0][1]) / dt])
        .collect();
    v.push([0.0, 0.0]);
    InitialPlan {
        trajectory: Trajectory {
            positions: q,
            velocities: v,
            slot_length: dt,
        },
        schedule,
        visits,
    }
}

/// Start → targets (shortest order) → end, hovering above each target for
/// [`hover_slots_required`] slots, timed for least propulsion energy.
pub fn initial_trajectory(scenario: &Scenario) -> Result<InitialPlan, SolveError> {
    let p = &scenario.platform;
    let points: Vec<Vec2<f64>> = scenario.targets.iter().map(|t| t.position).collect();
    let order = shortest_tour(p.start_pos, p.end_pos, &points);
    let stops = order
        .iter()
        .map(|&e| {
            Ok(Stop {
                position: points[e],
                kind: StopKind::Rest,
                dwell: hover_slots_required(scenario, e)?,
                sensed: Some(e),
            })
        })
        .collect::<Result<Vec<_>, SolveError>>()?;
    time_path(scenario, &stops)
}
