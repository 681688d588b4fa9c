//! Alternating optimization of beamformers and trajectory, the two reference
//! schemes, and the sensing-threshold sweep.

use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::audit::{verify_solution_with, AuditOptions, ConstraintAudit};
use crate::beamforming::{
    extract_rank_one, initial_covariances, per_slot_sinr_targets, randomize_slot, solve_beamforming, solve_frozen,
    BeamIteration,
};
use crate::conic::{self, AffineExpr, ConicProgram, HermitianExpr, SolveStatus};
use crate::error::SolveError;
use crate::plan::{Covariance, SensingSchedule, SlotChannels, Trajectory, TransmitPlan};
use crate::power::flight_power;
use crate::scalar::{norm2, sub2, Vec2};
use crate::scenario::{CMatrix, Scenario};
use crate::trajectory::{
    hover_slots_required, initial_trajectory, propulsion_objective, shortest_tour, solve_trajectory, time_path,
    InitialPlan, PathSlot, Stop, StopKind, TrajectoryIteration, TrajectoryState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "proposed")]
    Proposed,
    /// Shortest tour through every user and target.
    #[serde(rename = "baseline-1")]
    MinDistance,
    /// Zero-forcing information beams, a separate sensing beam, flight at
    /// maximum speed.
    #[serde(rename = "baseline-2")]
    ZeroForcing,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Proposed, Scheme::MinDistance, Scheme::ZeroForcing];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Proposed => "proposed",
            Scheme::MinDistance => "baseline-1",
            Scheme::ZeroForcing => "baseline-2",
        }
    }

    /// Accepts the canonical names plus `baseline-md` and `baseline-zf`.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "baseline-md" => Some(Scheme::MinDistance),
            "baseline-zf" => Some(Scheme::ZeroForcing),
            _ => Self::ALL.into_iter().find(|x| x.name() == s),
        }
    }

    pub fn audit_options(self) -> AuditOptions {
        AuditOptions {
            check_acceleration: self != Scheme::ZeroForcing,
        }
    }
}

/// Per-iteration record of the alternating loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AoIteration {
    /// Average power after both stages, W.
    pub objective: f64,
    pub beam: Vec<BeamIteration>,
    pub trajectory: Vec<TrajectoryIteration>,
    /// The beam stage failed and fell back to fixed-SINR covariances.
    pub beam_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveStats {
    /// Absent from saved reports so they stay reproducible.
    #[serde(default)]
    pub wallclock_s: f64,
    /// Indicators were rounded rather than snapped.
    pub rounded: bool,
    pub pre_rounding_binary_violation: f64,
    /// Largest λ₂/λ₁ over the final covariances.
    pub max_rank_ratio: f64,
    /// Slots whose beams came from Gaussian randomization.
    pub randomized_slots: Vec<usize>,
    /// Slots that kept principal eigenvectors although not rank one.
    pub untight_slots: Vec<usize>,
    /// Some trajectory stage stopped at its trust-region floor.
    pub trust_region_collapsed: bool,
    pub reduced_accuracy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub scheme: Scheme,
    pub scenario_digest: String,
    /// O⁽⁰⁾ at the initial point, then one entry per iteration, W.
    pub objective_trace: Vec<f64>,
    pub iterations: Vec<AoIteration>,
    pub plan: TransmitPlan,
    pub trajectory: Trajectory,
    pub schedule: SensingSchedule,
    pub audit: ConstraintAudit,
    /// Average power of the final plan, W.
    pub objective: f64,
    /// Average transmit power, W.
    pub tx_power: f64,
    /// Average propulsion power (hover power in sensing slots), W.
    pub propulsion_power: f64,
    pub stats: SolveStats,
}

impl SolveReport {
    /// The report, or `AuditFailed` if the audit did not pass.
    pub fn checked(self) -> Result<Self, SolveError> {
        if self.audit.pass {
            Ok(self)
        } else {
            Err(SolveError::AuditFailed {
                summary: self.audit.failing().map(|f| f.family.clone()).collect::<Vec<_>>().join(", "),
                audit: Box::new(self.audit),
            })
        }
    }
}

/// (1/N)·Σ_n[Σ_k Tr W_k[n] + Σ_e α P_hover + (1 − Σ_e α)P_fly(v[n])], W.
pub fn average_power(
    scenario: &Scenario,
    covariances: &[Vec<CMatrix>],
    trajectory: &Trajectory,
    schedule: &SensingSchedule,
) -> f64 {
    let tx: f64 = covariances.iter().flatten().map(|w| w.trace().re).sum();
    tx / scenario.num_slots() as f64 + propulsion_objective(scenario, trajectory, schedule)
}

fn rel_change(prev: f64, cur: f64) -> f64 {
    (prev - cur).abs() / prev.abs().max(1e-12)
}

/// Alternates the beamforming and trajectory stages from the initializer.
pub fn run_ao(scenario: &Scenario) -> Result<SolveReport, SolveError> {
    scenario.validate()?;
    let init = initial_trajectory(scenario)?;
    alternate(scenario, Scheme::Proposed, init, None)
}

fn alternate(
    scenario: &Scenario,
    scheme: Scheme,
    init: InitialPlan,
    path: Option<Vec<PathSlot>>,
) -> Result<SolveReport, SolveError> {
    let clock = Instant::now();
    let settings = &scenario.solver;
    let mut trajectory = init.trajectory;
    let mut schedule = init.schedule;
    let mut covs = initial_covariances(scenario, &trajectory, &schedule)?.raw_covariances();
    let mut trace = vec![average_power(scenario, &covs, &trajectory, &schedule)];
    let mut iterations = Vec::new();
    let mut stats = SolveStats::default();
    for _ in 0..settings.max_ao_iters {
        let (beam_trace, fallback) = match solve_beamforming(scenario, &trajectory, &covs, &schedule) {
            Ok(out) => {
                stats.rounded |= out.rounded;
                stats.pre_rounding_binary_violation = stats.pre_rounding_binary_violation.max(out.pre_rounding_binary_violation);
                stats.reduced_accuracy |= out.solution.reduced_accuracy;
                schedule = out.solution.alpha.clone();
                covs = out.solution.raw_covariances();
                (out.trace, false)
            }
            Err(e @ (SolveError::Infeasible { .. } | SolveError::NumericalFailure { .. })) => {
                log::warn!("beam stage failed ({e}); restarting from fixed-SINR covariances");
                covs = initial_covariances(scenario, &trajectory, &schedule)?.raw_covariances();
                (Vec::new(), true)
            }
            Err(e) => return Err(e),
        };
        let state = TrajectoryState {
            covariances: &covs,
            schedule: &schedule,
            path: path.as_deref(),
        };
        let traj_out = solve_trajectory(scenario, &state, &trajectory)?;
        stats.trust_region_collapsed |= traj_out.collapsed;
        trajectory = traj_out.trajectory;
        let objective = average_power(scenario, &covs, &trajectory, &schedule);
        iterations.push(AoIteration {
            objective,
            beam: beam_trace,
            trajectory: traj_out.trace,
            beam_fallback: fallback,
        });
        let prev = *trace.last().expect("initial entry");
        trace.push(objective);
        if rel_change(prev, objective) <= settings.ao_tolerance {
            break;
        }
    }
    let last = solve_frozen(scenario, &trajectory, &covs, &schedule)?;
    stats.reduced_accuracy |= last.solution.reduced_accuracy;
    let covs = last.solution.raw_covariances();
    let (plan, rank_tight) = extract_beams(scenario, &trajectory, &schedule, &covs, &mut stats);
    finish(scenario, scheme, plan, trajectory, schedule, trace, iterations, Some(rank_tight), stats, clock)
}

/// Principal eigenvectors where the covariances are rank one; Gaussian
/// randomization in the other slots, keeping the principal eigenvectors if no
/// draw qualifies.
fn extract_beams(
    scenario: &Scenario,
    trajectory: &Trajectory,
    schedule: &SensingSchedule,
    covs: &[Vec<CMatrix>],
    stats: &mut SolveStats,
) -> (TransmitPlan, Vec<Vec<bool>>) {
    let channels = SlotChannels::new(scenario, trajectory);
    let mut plan = TransmitPlan::zeros(scenario.num_slots(), scenario.num_users(), scenario.platform.antennas);
    let mut tight = Vec::with_capacity(covs.len());
    for (n, row) in covs.iter().enumerate() {
        let r1: Vec<_> = row.iter().map(|w| extract_rank_one(w, scenario.solver.rank_tol)).collect();
        stats.max_rank_ratio = r1.iter().map(|r| r.ratio).fold(stats.max_rank_ratio, f64::max);
        tight.push(r1.iter().map(|r| r.tight).collect());
        plan.beams[n] = r1.iter().map(|r| r.beam.clone()).collect();
        if r1.iter().all(|r| r.tight) {
            continue;
        }
        match randomize_slot(scenario, &channels, n, row, schedule.sensing_target(n), scenario.solver.seed) {
            Some(beams) => {
                plan.beams[n] = beams;
                stats.randomized_slots.push(n);
            }
            None => stats.untight_slots.push(n),
        }
    }
    (plan, tight)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    scenario: &Scenario,
    scheme: Scheme,
    plan: TransmitPlan,
    trajectory: Trajectory,
    schedule: SensingSchedule,
    objective_trace: Vec<f64>,
    iterations: Vec<AoIteration>,
    rank_tight: Option<Vec<Vec<bool>>>,
    mut stats: SolveStats,
    clock: Instant,
) -> Result<SolveReport, SolveError> {
    let mut audit = verify_solution_with(&plan, &trajectory, &schedule, scenario, scheme.audit_options());
    if let Some(t) = rank_tight {
        audit.rank_tight = t;
    }
    let n_slots = scenario.num_slots() as f64;
    let tx_power = (0..scenario.num_slots()).map(|n| plan.slot_power(n)).sum::<f64>() / n_slots;
    let propulsion_power = propulsion_objective(scenario, &trajectory, &schedule);
    stats.wallclock_s = clock.elapsed().as_secs_f64();
    Ok(SolveReport {
        scheme,
        scenario_digest: scenario.digest(),
        objective_trace,
        iterations,
        plan,
        trajectory,
        schedule,
        audit,
        objective: tx_power + propulsion_power,
        tx_power,
        propulsion_power,
        stats,
    })
}

/// Stops at every user and target along the shortest tour, then optimizes
/// the timing along that fixed path together with the beamformers.
pub fn baseline_min_distance(scenario: &Scenario) -> Result<SolveReport, SolveError> {
    scenario.validate()?;
    let p = &scenario.platform;
    let k_users = scenario.num_users();
    let mut points: Vec<Vec2<f64>> = scenario.users.iter().map(|u| u.position).collect();
    points.extend(scenario.targets.iter().map(|t| t.position));
    let order = shortest_tour(p.start_pos, p.end_pos, &points);
    let stops = order
        .iter()
        .map(|&i| {
            Ok(if i < k_users {
                Stop {
                    position: points[i],
                    kind: StopKind::Touch,
                    dwell: 0,
                    sensed: None,
                }
            } else {
                Stop {
                    position: points[i],
                    kind: StopKind::Rest,
                    dwell: hover_slots_required(scenario, i - k_users)?,
                    sensed: Some(i - k_users),
                }
            })
        })
        .collect::<Result<Vec<_>, SolveError>>()?;
    let init = time_path(scenario, &stops)?;
    let path = init.path_restriction();
    alternate(scenario, Scheme::MinDistance, init, Some(path))
}

/// Unit zero-forcing directions u_k ∝ column k of Hᴴ(HHᴴ)⁻¹.
pub fn zero_forcing_directions(channels: &[Vec<Complex<f64>>]) -> Result<Vec<Vec<Complex<f64>>>, SolveError> {
    let k = channels.len();
    let m = channels.first().map_or(0, |h| h.len());
    if k > m {
        return Err(SolveError::ZeroForcing(format!("{k} users exceed {m} antennas")));
    }
    // Row k of H is h_kᴴ.
    let h = DMatrix::from_fn(k, m, |r, c| channels[r][c].conj());
    let gram = &h * h.adjoint();
    let inv = gram
        .clone()
        .try_inverse()
        .filter(|inv| (inv.norm() * gram.norm()).is_finite() && inv.norm() * gram.norm() < 1e12)
        .ok_or_else(|| SolveError::ZeroForcing("user channels are linearly dependent".into()))?;
    let u = h.adjoint() * inv;
    Ok((0..k)
        .map(|c| {
            let col = u.column(c);
            let nrm = col.norm();
            col.iter().map(|z| z / nrm).collect()
        })
        .collect())
}

/// Straight flight at v_max in every moving slot: each leg between stops is
/// two links of whole slots meeting at a kink, on the side with the lower
/// zero-forcing power. Moving slots are shared among legs in proportion to
/// their length.
fn full_speed_path(scenario: &Scenario) -> Result<InitialPlan, SolveError> {
    let p = &scenario.platform;
    let n_slots = scenario.num_slots();
    let dt = scenario.timing.slot_length;
    let hop = p.v_max * dt;
    let points: Vec<Vec2<f64>> = scenario.targets.iter().map(|t| t.position).collect();
    let order = shortest_tour(p.start_pos, p.end_pos, &points);
    let mut nodes = vec![(p.start_pos, 0usize, None)];
    for &e in &order {
        nodes.push((points[e], hover_slots_required(scenario, e)?, Some(e)));
    }
    nodes.push((p.end_pos, 0, None));
    let lengths: Vec<f64> = nodes.windows(2).map(|w| norm2(sub2(w[1].0, w[0].0))).collect();
    let dwell: usize = nodes.iter().map(|n| n.1).sum();
    let moving = (n_slots - 1).checked_sub(dwell).ok_or_else(|| {
        SolveError::TimingInfeasible(format!("{dwell} hover slots exceed the mission"))
    })?;
    let counts = share_slots(&lengths, moving, hop).ok_or_else(|| {
        SolveError::TimingInfeasible(format!(
            "cannot spend {moving} slots at {} m/s over legs of {lengths:.1?} m",
            p.v_max
        ))
    })?;
    let mut q: Vec<Vec2<f64>> = vec![nodes[0].0];
    let mut schedule = SensingSchedule::zeros(scenario.num_targets(), n_slots);
    for (j, w) in nodes.windows(2).enumerate() {
        let (a, b) = (w[0].0, w[1].0);
        let m = counts[j];
        if m > 0 {
            let m1 = m.div_ceil(2);
            let m2 = m - m1;
            let kinks = kink_points(a, b, m1 as f64 * hop, m2 as f64 * hop);
            let best = kinks
                .into_iter()
                .map(|k| {
                    let pts = leg_points(a, k, b, m1, m2);
                    (zf_power_along(scenario, &pts), pts)
                })
                .min_by(|x, y| x.0.total_cmp(&y.0))
                .expect("two kink candidates");
            q.extend(best.1);
        }
        let (pos, hover, sensed) = w[1];
        for _ in 0..hover {
            if let Some(e) = sensed {
                schedule.alpha[e][q.len() - 1] = 1.0;
            }
            q.push(pos);
        }
    }
    let mut v: Vec<Vec2<f64>> = q.windows(2).map(|w| [(w[1][0] - w[0][0]) / dt, (w[1][1] - w[0][1]) / dt]).collect();
    let last = *v.iter().rev().find(|x| norm2(**x) > 0.0).unwrap_or(&[p.v_max, 0.0]);
    let mut tail = last;
    if norm2(tail) > 0.0 && schedule.sum_at(n_slots - 2) < 0.5 {
        let s = p.v_max / norm2(tail);
        tail = [tail[0] * s, tail[1] * s];
    } else {
        tail = [0.0, 0.0];
    }
    v.push(tail);
    Ok(InitialPlan {
        trajectory: Trajectory {
            positions: q,
            velocities: v,
            slot_length: dt,
        },
        schedule,
        visits: Vec::new(),
    })
}

/// Whole-slot counts per leg summing to `total`, each leg coverable by two
/// links of `hop`-metre slots. Largest-remainder shares of the leg lengths,
/// then adjusted one slot at a time until every leg is coverable.
fn share_slots(lengths: &[f64], total: usize, hop: f64) -> Option<Vec<usize>> {
    let coverable = |l: f64, m: usize| -> bool {
        if m == 0 {
            return l <= 1e-9;
        }
        let m1 = m.div_ceil(2) as f64 * hop;
        let m2 = (m / 2) as f64 * hop;
        l <= (m1 + m2) * (1.0 + 1e-12) && l >= (m1 - m2) - 1e-9
    };
    let sum: f64 = lengths.iter().sum();
    if sum <= 0.0 {
        return (total == 0).then(|| vec![0; lengths.len()]);
    }
    let raw: Vec<f64> = lengths.iter().map(|l| l / sum * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let left = total - counts.iter().sum::<usize>();
    for &i in order.iter().cycle().take(left) {
        counts[i] += 1;
    }
    for _ in 0..4 * total.max(1) {
        let Some(bad) = (0..lengths.len()).find(|&i| !coverable(lengths[i], counts[i])) else {
            return Some(counts);
        };
        // Move one slot between the failing leg and the leg that can best
        // spare or absorb it, keeping the total.
        let need_more = lengths[bad] > counts[bad] as f64 * hop;
        let donor = (0..lengths.len())
            .filter(|&i| i != bad)
            .filter(|&i| {
                let m = if need_more { counts[i].checked_sub(1) } else { Some(counts[i] + 1) };
                m.is_some_and(|m| coverable(lengths[i], m))
            })
            .max_by(|&a, &b| {
                let slack = |i: usize| counts[i] as f64 * hop - lengths[i];
                if need_more { slack(a).total_cmp(&slack(b)) } else { slack(b).total_cmp(&slack(a)) }
            });
        if let Some(d) = donor {
            if need_more {
                counts[d] -= 1;
                counts[bad] += 1;
            } else {
                counts[d] += 1;
                counts[bad] -= 1;
            }
        } else if counts[bad] % 2 == 1 && (0..lengths.len()).any(|i| i != bad) {
            // Odd count on a leg shorter than one hop: trade parity with the
            // longest other leg.
            let other = (0..lengths.len())
                .filter(|&i| i != bad && counts[i] > 0)
                .max_by(|&a, &b| lengths[a].total_cmp(&lengths[b]))?;
            counts[other] -= 1;
            counts[bad] += 1;
        } else {
            return None;
        }
    }
    None
}

/// The two points k with ‖k − a‖ = r1 and ‖b − k‖ = r2.
fn kink_points(a: Vec2<f64>, b: Vec2<f64>, r1: f64, r2: f64) -> Vec<Vec2<f64>> {
    let d = sub2(b, a);
    let l = norm2(d);
    if l <= 1e-12 {
        // Out and back along the x axis (r1 = r2).
        return vec![[a[0] + r1, a[1]], [a[0] - r1, a[1]]];
    }
    let x = ((l * l + r1 * r1 - r2 * r2) / (2.0 * l)).clamp(-r1, r1);
    let h = (r1 * r1 - x * x).max(0.0).sqrt();
    let u = [d[0] / l, d[1] / l];
    let nrm = [-u[1], u[0]];
    vec![
        [a[0] + x * u[0] + h * nrm[0], a[1] + x * u[1] + h * nrm[1]],
        [a[0] + x * u[0] - h * nrm[0], a[1] + x * u[1] - h * nrm[1]],
    ]
}

/// Waypoints after each slot along a → k (m1 slots) → b (m2 slots); the
/// last one is exactly `b`.
fn leg_points(a: Vec2<f64>, k: Vec2<f64>, b: Vec2<f64>, m1: usize, m2: usize) -> Vec<Vec2<f64>> {
    let lerp = |p: Vec2<f64>, q: Vec2<f64>, f: f64| [p[0] + f * (q[0] - p[0]), p[1] + f * (q[1] - p[1])];
    let mut out: Vec<Vec2<f64>> = (1..=m1).map(|i| lerp(a, k, i as f64 / m1 as f64)).collect();
    out.extend((1..=m2).map(|i| lerp(k, b, i as f64 / m2 as f64)));
    if let Some(last) = out.last_mut() {
        *last = b;
    }
    out
}

/// Zero-forcing transmit power meeting the per-slot SINR targets at the
/// given waypoints, W.
fn zf_power_along(scenario: &Scenario, points: &[Vec2<f64>]) -> f64 {
    let traj = Trajectory {
        positions: points.to_vec(),
        velocities: vec![[0.0, 0.0]; points.len()],
        slot_length: scenario.timing.slot_length,
    };
    let channels = SlotChannels::new(scenario, &traj);
    let targets = per_slot_sinr_targets(scenario);
    (0..points.len())
        .map(|n| match zero_forcing_directions(&channels.users[n]) {
            Ok(dirs) => zf_powers(scenario, &channels.users[n], &dirs, &targets, &[]).iter().sum(),
            Err(_) => f64::INFINITY,
        })
        .sum()
}

/// p_k = γ_k(hᴴW_s h + σ²)/|h_kᴴu_k|² with zero inter-user interference.
fn zf_powers(
    scenario: &Scenario,
    channels: &[Vec<Complex<f64>>],
    dirs: &[Vec<Complex<f64>>],
    targets: &[f64],
    extra: &[f64],
) -> Vec<f64> {
    (0..dirs.len())
        .map(|k| {
            let g: Complex<f64> = channels[k].iter().zip(&dirs[k]).map(|(h, u)| h.conj() * u).sum();
            targets[k] * (scenario.users[k].noise_power + extra.get(k).copied().unwrap_or(0.0)) / g.norm_sqr()
        })
        .collect()
}

/// Zero-forcing information beams meeting R_min in every slot, a dedicated
/// sensing covariance in the hover slots, and flight at v_max elsewhere.
pub fn baseline_zero_forcing(scenario: &Scenario) -> Result<SolveReport, SolveError> {
    scenario.validate()?;
    let clock = Instant::now();
    let m = scenario.platform.antennas;
    let k_users = scenario.num_users();
    if m < k_users + 1 {
        return Err(SolveError::ZeroForcing(format!(
            "{m} antennas cannot serve {k_users} users and a sensing beam"
        )));
    }
    let init = full_speed_path(scenario)?;
    let trajectory = init.trajectory;
    let schedule = init.schedule;
    let channels = SlotChannels::new(scenario, &trajectory);
    let targets = per_slot_sinr_targets(scenario);
    let n_slots = scenario.num_slots();
    let mut plan = TransmitPlan::zeros(n_slots, k_users, m);
    let mut dirs_all = Vec::with_capacity(n_slots);
    for n in 0..n_slots {
        let dirs = zero_forcing_directions(&channels.users[n])?;
        let powers = zf_powers(scenario, &channels.users[n], &dirs, &targets, &[]);
        plan.beams[n] = dirs.iter().zip(&powers).map(|(d, p)| d.iter().map(|x| x * p.sqrt()).collect()).collect();
        dirs_all.push(dirs);
    }
    let sensing_slots: Vec<usize> = (0..n_slots).filter(|&n| schedule.sum_at(n) > 0.5).collect();
    if !sensing_slots.is_empty() {
        let mut prog = ConicProgram::new();
        let mut objective = AffineExpr::zero();
        let mut echo = vec![AffineExpr::zero(); scenario.num_targets()];
        let mut vars = Vec::new();
        for &n in &sensing_slots {
            let e = schedule.sensing_target(n).expect("sensing slot");
            let target = &scenario.targets[e];
            let p = prog.vector(format!("p[{n}]"), k_users);
            let ws = prog.hermitian(format!("Ws[{n}]"), m);
            prog.psd_hermitian(format!("Ws>=0[{n}]"), &ws.expr())?;
            let mut total = ws.expr();
            let mut tx = ws.trace();
            for (k, dir) in dirs_all[n].iter().enumerate() {
                let uu = DMatrix::from_fn(m, m, |i, j| dir[i] * dir[j].conj());
                total.add_scaled_constant(&uu, &AffineExpr::var(p[k]));
                tx.add_term(p[k], 1.0);
                let h = &channels.users[n][k];
                let g: Complex<f64> = h.iter().zip(dir).map(|(h, u)| h.conj() * u).sum();
                // p_k|h_kᴴu_k|² ≥ γ_k(h_kᴴW_s h_k + σ_k²), scaled by 1/σ_k².
                let sigma = scenario.users[k].noise_power;
                let mut rhs = ws.quad_form(h).scaled(targets[k] / sigma);
                rhs.constant += targets[k];
                prog.geq(format!("rate[{n}][{k}]"), AffineExpr::term(p[k], g.norm_sqr() / sigma), rhs)?;
            }
            prog.geq(format!("C1[{n}]"), AffineExpr::constant(scenario.platform.p_max), tx.clone())?;
            let diff = total.clone() - HermitianExpr::constant(&target.desired_covariance);
            prog.norm_leq(
                format!("C3[{n}]"),
                diff.frobenius_rows(),
                AffineExpr::constant(target.beampattern_error_budget.sqrt()),
            )?;
            let a = &channels.targets[n][e];
            let mut gain = ws.quad_form(a);
            for (k, dir) in dirs_all[n].iter().enumerate() {
                let ga: Complex<f64> = a.iter().zip(dir).map(|(a, u)| a.conj() * u).sum();
                gain.add_term(p[k], ga.norm_sqr());
            }
            echo[e].add_expr(&gain, channels.echo_gain[n][e] / target.snr_threshold);
            objective.add_expr(&tx, 1.0 / scenario.platform.p_max);
            vars.push((n, p, ws));
        }
        for (e, expr) in echo.into_iter().enumerate() {
            prog.geq(format!("C4[{e}]"), expr, AffineExpr::constant(1.0))?;
        }
        prog.minimize(objective);
        let sol = conic::solve(&prog, scenario.solver.conic_tolerance)?;
        if sol.status != SolveStatus::Optimal {
            return Err(SolveError::SensingInfeasible(format!(
                "sensing beam program: backend status {}",
                sol.stats.backend_status
            )));
        }
        for (n, p, ws) in vars {
            plan.beams[n] = dirs_all[n]
                .iter()
                .zip(&p)
                .map(|(d, &pk)| {
                    let pk = sol.value(pk).max(0.0);
                    d.iter().map(|x| x * pk.sqrt()).collect()
                })
                .collect();
            plan.sensing[n] = Some(Covariance(sol.hermitian(&ws)));
        }
    }
    let objective = {
        let tx: f64 = (0..n_slots).map(|n| plan.slot_power(n)).sum::<f64>() / n_slots as f64;
        tx + propulsion_objective(scenario, &trajectory, &schedule)
    };
    let stats = SolveStats::default();
    finish(scenario, Scheme::ZeroForcing, plan, trajectory, schedule, vec![objective], Vec::new(), None, stats, clock)
}

pub fn solve_scheme(scenario: &Scenario, scheme: Scheme) -> Result<SolveReport, SolveError> {
    match scheme {
        Scheme::Proposed => run_ao(scenario),
        Scheme::MinDistance => baseline_min_distance(scenario),
        Scheme::ZeroForcing => baseline_zero_forcing(scenario),
    }
}

/// One (threshold, scheme) cell of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold_db: f64,
    pub scheme: Scheme,
    /// Average power of the reported plan, W; NaN if no plan qualifies.
    pub avg_power_w: f64,
    pub tx_power_w: f64,
    pub propulsion_w: f64,
    pub iterations: usize,
    pub wallclock_s: f64,
    pub audit_pass: bool,
    /// Threshold the reported plan was solved for, dB.
    pub plan_threshold_db: f64,
    /// Error of this cell's own solve, if it failed.
    pub error: Option<String>,
}

/// Sets every target's echo SNR threshold to `db` decibels.
pub fn with_threshold_db(scenario: &Scenario, db: f64) -> Scenario {
    let mut s = scenario.clone();
    for t in &mut s.targets {
        t.snr_threshold = 10f64.powf(db / 10.0);
    }
    s
}

/// Solves every scheme at every threshold (dB, ascending). A plan that passes
/// the audit at one threshold also meets every lower threshold, so each cell
/// reports the least-power audited plan among its own solve and the solves at
/// higher thresholds. Schemes run on up to `jobs` threads.
pub fn snr_sweep(scenario: &Scenario, thresholds_db: &[f64], schemes: &[Scheme], jobs: usize) -> Vec<SweepRow> {
    let run = |scheme: Scheme| -> Vec<SweepRow> {
        let cells: Vec<(f64, Result<SolveReport, SolveError>)> = thresholds_db
            .iter()
            .map(|&db| (db, solve_scheme(&with_threshold_db(scenario, db), scheme)))
            .collect();
        (0..cells.len())
            .map(|i| {
                let (db, own) = &cells[i];
                let best = cells[i..]
                    .iter()
                    .filter_map(|(d, r)| r.as_ref().ok().filter(|r| r.audit.pass).map(|r| (*d, r)))
                    .min_by(|a, b| a.1.objective.total_cmp(&b.1.objective).then(a.0.total_cmp(&b.0)));
                let (iterations, wallclock_s) = match own {
                    Ok(r) => (r.iterations.len(), r.stats.wallclock_s),
                    Err(_) => (0, 0.0),
                };
                let error = own.as_ref().err().map(|e| e.to_string());
                match best {
                    Some((d, r)) => SweepRow {
                        threshold_db: *db,
                        scheme,
                        avg_power_w: r.objective,
                        tx_power_w: r.tx_power,
                        propulsion_w: r.propulsion_power,
                        iterations,
                        wallclock_s,
                        audit_pass: true,
                        plan_threshold_db: d,
                        error,
                    },
                    None => SweepRow {
                        threshold_db: *db,
                        scheme,
                        avg_power_w: own.as_ref().map_or(f64::NAN, |r| r.objective),
                        tx_power_w: own.as_ref().map_or(f64::NAN, |r| r.tx_power),
                        propulsion_w: own.as_ref().map_or(f64::NAN, |r| r.propulsion_power),
                        iterations,
                        wallclock_s,
                        audit_pass: false,
                        plan_threshold_db: *db,
                        error,
                    },
                }
            })
            .collect()
    };
    let jobs = jobs.max(1);
    let mut per_scheme: Vec<Vec<SweepRow>> = vec![Vec::new(); schemes.len()];
    for chunk in (0..schemes.len()).collect::<Vec<_>>().chunks(jobs) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk.iter().map(|&i| (i, scope.spawn(move || run(schemes[i])))).collect();
            for (i, h) in handles {
                per_scheme[i] = h.join().expect("sweep worker panicked");
            }
        });
    }
    let mut rows = Vec::new();
    for (t, _) in thresholds_db.iter().enumerate() {
        for s in &per_scheme {
            rows.push(s[t].clone());
        }
    }
    rows
}

/// Flight power of every slot, W: hover power in sensing slots.
pub fn slot_propulsion(scenario: &Scenario, trajectory: &Trajectory, schedule: &SensingSchedule) -> Vec<f64> {
    (0..trajectory.len())
        .map(|n| {
            let a = schedule.sum_at(n);
            a * scenario.hover_power() + (1.0 - a) * flight_power(trajectory.velocities[n], &scenario.power_model).total
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_user_zero_forcing_is_matched_filter() {
        let h = vec![vec![Complex::new(1.0, 2.0), Complex::new(-0.5, 0.3), Complex::new(0.0, 1.0)]];
        let u = zero_forcing_directions(&h).unwrap();
        let nh: f64 = h[0].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        for (a, b) in u[0].iter().zip(&h[0]) {
            assert_relative_eq!(a.re, b.re / nh, epsilon = 1e-12);
            assert_relative_eq!(a.im, b.im / nh, epsilon = 1e-12);
        }
    }

    #[test]
    fn orthogonal_channels_give_matched_filters() {
        let z = Complex::new(0.0, 0.0);
        let h = vec![vec![Complex::new(2.0, 0.0), z, z], vec![z, Complex::new(0.0, 3.0), z]];
        let u = zero_forcing_directions(&h).unwrap();
        assert_relative_eq!(u[0][0].re, 1.0, epsilon = 1e-12);
        assert_relative_eq!(u[1][1].im, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn dependent_channels_are_rejected() {
        let h = vec![vec![Complex::new(1.0, 0.0); 3], vec![Complex::new(2.0, 0.0); 3]];
        assert!(matches!(zero_forcing_directions(&h), Err(SolveError::ZeroForcing(_))));
    }

    #[test]
    fn kink_points_sit_at_both_radii() {
        let a = [0.0, 0.0];
        let b = [40.0, 10.0];
        for k in kink_points(a, b, 30.0, 30.0) {
            assert_relative_eq!(norm2(sub2(k, a)), 30.0, epsilon = 1e-9);
            assert_relative_eq!(norm2(sub2(b, k)), 30.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn slot_shares_cover_every_leg() {
        let lengths = [170.0, 164.0, 116.0];
        let c = share_slots(&lengths, 52, 15.0).unwrap();
        assert_eq!(c.iter().sum::<usize>(), 52);
        for (l, m) in lengths.iter().zip(&c) {
            assert!(*l <= *m as f64 * 15.0);
        }
    }
}
