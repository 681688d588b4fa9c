//! True-model constraint audit of a transmit plan and trajectory.
//!
//! Every family is measured as a violation relative to its own scale and
//! passes when that violation is at most [`AUDIT_SLACK`].

use serde::{Deserialize, Serialize};

use crate::channel::quad_form;
use crate::plan::{SensingSchedule, SlotChannels, TransmitPlan, Trajectory};
use crate::scalar::{norm2, sub2};
use crate::scenario::Scenario;

pub const AUDIT_SLACK: f64 = 0.01;

/// One violated instance of a constraint family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub location: String,
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyCheck {
    pub family: String,
    /// Largest relative violation over the family (≤ 0 when strictly met).
    pub worst: f64,
    pub worst_location: Option<String>,
    /// All instances above the slack.
    pub failures: Vec<Violation>,
    pub pass: bool,
    pub checked: bool,
}

impl FamilyCheck {
    fn new(family: &str) -> Self {
        Self {
            family: family.to_string(),
            worst: f64::NEG_INFINITY,
            worst_location: None,
            failures: Vec::new(),
            pass: true,
            checked: true,
        }
    }

    fn skipped(family: &str) -> Self {
        Self {
            worst: 0.0,
            checked: false,
            ..Self::new(family)
        }
    }

    fn record(&mut self, location: impl FnOnce() -> String, relative: f64) {
        let relative = if relative.is_nan() { f64::INFINITY } else { relative };
        let fails = relative > AUDIT_SLACK;
        if relative > self.worst || fails {
            let loc = location();
            if relative > self.worst {
                self.worst = relative;
                self.worst_location = Some(loc.clone());
            }
            if fails {
                self.pass = false;
                self.failures.push(Violation { location: loc, relative });
            }
        }
    }

    fn finish(mut self) -> Self {
        if self.worst == f64::NEG_INFINITY {
            self.worst = 0.0;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeampatternError {
    pub target: usize,
    pub slot: usize,
    /// ‖Σ W − R_d‖_F².
    pub squared_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintAudit {
    pub families: Vec<FamilyCheck>,
    /// (1/N)Σ_n log₂(1 + γ_k[n]) per user, bps/Hz.
    pub average_rates: Vec<f64>,
    /// Accumulated echo SNR Γ_e per target, linear.
    pub sensing_snr: Vec<f64>,
    pub beampattern_errors: Vec<BeampatternError>,
    /// `[slot][user]`; empty when the plan did not come from covariances.
    pub rank_tight: Vec<Vec<bool>>,
    pub pass: bool,
}

impl ConstraintAudit {
    pub fn family(&self, name: &str) -> Option<&FamilyCheck> {
        self.families.iter().find(|f| f.family == name)
    }

    pub fn failing(&self) -> impl Iterator<Item = &FamilyCheck> {
        self.families.iter().filter(|f| !f.pass)
    }

    /// One line per family.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for f in &self.families {
            let status = match (f.checked, f.pass) {
                (false, _) => "skip",
                (true, true) => "pass",
                (true, false) => "FAIL",
            };
            out.push_str(&format!("{:<9} {status} worst {:+.3e}", f.family, f.worst));
            if let Some(loc) = &f.worst_location {
                out.push_str(&format!(" at {loc}"));
            }
            if f.failures.len() > 1 {
                out.push_str(&format!(" ({} failing)", f.failures.len()));
            }
            out.push('\n');
        }
        out
    }
}

/// Which families apply to a scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditOptions {
    /// The fixed-speed baseline has no acceleration constraint.
    pub check_acceleration: bool,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            check_acceleration: true,
        }
    }
}

/// Audits a plan against every constraint of the original problem with
/// exact formulas: rates from rank-one beams plus the sensing covariance,
/// echo SNR accumulated over the scheduled slots.
pub fn verify_solution(
    plan: &TransmitPlan,
    trajectory: &Trajectory,
    schedule: &SensingSchedule,
    scenario: &Scenario,
) -> ConstraintAudit {
    verify_solution_with(plan, trajectory, schedule, scenario, AuditOptions::default())
}

pub fn verify_solution_with(
    plan: &TransmitPlan,
    trajectory: &Trajectory,
    schedule: &SensingSchedule,
    scenario: &Scenario,
    options: AuditOptions,
) -> ConstraintAudit {
    let n_slots = scenario.num_slots();
    let k_users = scenario.num_users();
    let e_targets = scenario.num_targets();
    let platform = &scenario.platform;
    let dt = scenario.timing.slot_length;

    let mut shape = FamilyCheck::new("shape");
    let shape_ok = trajectory.len() == n_slots
        && trajectory.velocities.len() == n_slots
        && plan.beams.len() == n_slots
        && plan.sensing.len() == n_slots
        && plan.beams.iter().all(|b| b.len() == k_users && b.iter().all(|w| w.len() == platform.antennas))
        && plan.sensing.iter().flatten().all(|c| c.0.nrows() == platform.antennas && c.0.ncols() == platform.antennas)
        && schedule.targets() == e_targets
        && schedule.alpha.iter().all(|r| r.len() == n_slots);
    if !shape_ok {
        shape.record(|| "plan, trajectory or schedule dimensions".into(), f64::INFINITY);
        return ConstraintAudit {
            families: vec![shape.finish()],
            average_rates: Vec::new(),
            sensing_snr: Vec::new(),
            beampattern_errors: Vec::new(),
            rank_tight: Vec::new(),
            pass: false,
        };
    }

    let channels = SlotChannels::new(scenario, trajectory);
    let covs: Vec<Vec<_>> = (0..n_slots)
        .map(|n| (0..k_users).map(|k| plan.user_covariance(n, k)).collect())
        .collect();

    let mut c1 = FamilyCheck::new("C1");
    for n in 0..n_slots {
        c1.record(|| format!("slot {n}"), (plan.slot_power(n) - platform.p_max) / platform.p_max);
    }

    let mut c2 = FamilyCheck::new("C2");
    let mut rates = vec![0.0; k_users];
    for (k, user) in scenario.users.iter().enumerate() {
        for n in 0..n_slots {
            let h = &channels.users[n][k];
            let signal = quad_form(&covs[n][k], h).max(0.0);
            let mut interference: f64 = (0..k_users)
                .filter(|&i| i != k)
                .map(|i| quad_form(&covs[n][i], h))
                .sum();
            if let Some(ws) = &plan.sensing[n] {
                interference += quad_form(&ws.0, h);
            }
            let g = signal / (interference.max(0.0) + user.noise_power);
            rates[k] += (1.0 + g).log2();
        }
        rates[k] /= n_slots as f64;
        if user.min_rate > 0.0 {
            c2.record(|| format!("user {k}"), (user.min_rate - rates[k]) / user.min_rate);
        }
    }

    let mut c3 = FamilyCheck::new("C3");
    let mut c4 = FamilyCheck::new("C4");
    let mut errors = Vec::new();
    let mut snr = vec![0.0; e_targets];
    for (e, target) in scenario.targets.iter().enumerate() {
        for n in 0..n_slots {
            let a = schedule.alpha[e][n];
            if a <= 0.0 {
                continue;
            }
            let total = plan.total_covariance(n);
            snr[e] += a * channels.echo_gain[n][e] * quad_form(&total, &channels.targets[n][e]);
            let err = (&total - &target.desired_covariance).norm_squared();
            errors.push(BeampatternError {
                target: e,
                slot: n,
                squared_error: err,
            });
            c3.record(
                || format!("target {e} slot {n}"),
                a * (err - target.beampattern_error_budget) / target.beampattern_error_budget,
            );
        }
        c4.record(
            || format!("target {e}"),
            (target.snr_threshold - snr[e]) / target.snr_threshold,
        );
    }

    let mut c5 = FamilyCheck::new("C5");
    let mut c7 = FamilyCheck::new("C7");
    let d2 = platform.hover_radius * platform.hover_radius;
    for n in 0..n_slots {
        c5.record(|| format!("slot {n}"), schedule.sum_at(n) - 1.0);
        let mut lhs = 0.0;
        for (e, t) in scenario.targets.iter().enumerate() {
            let d = norm2(sub2(trajectory.positions[n], t.position));
            lhs += schedule.alpha[e][n] * d * d;
        }
        if schedule.sum_at(n) > 0.0 {
            c7.record(|| format!("slot {n}"), (lhs - d2) / d2);
        }
    }
    let mut c6 = FamilyCheck::new("C6");
    let cap = scenario.timing.max_sensing_slots as f64;
    for e in 0..e_targets {
        c6.record(|| format!("target {e}"), (schedule.count(e) - cap) / cap.max(1.0));
    }

    let step = platform.v_max * dt;
    let mut c8 = FamilyCheck::new("C8");
    for n in 0..n_slots.saturating_sub(1) {
        let f = (1.0 - schedule.sum_at(n)) * dt;
        let q = trajectory.positions[n];
        let v = trajectory.velocities[n];
        let r = norm2(sub2(trajectory.positions[n + 1], [q[0] + f * v[0], q[1] + f * v[1]]));
        c8.record(|| format!("slot {n}"), r / step);
    }
    let mut c9 = if options.check_acceleration {
        FamilyCheck::new("C9")
    } else {
        FamilyCheck::skipped("C9")
    };
    if options.check_acceleration {
        let bound = platform.a_max * dt;
        for n in 0..n_slots.saturating_sub(1) {
            let dv = norm2(sub2(trajectory.velocities[n + 1], trajectory.velocities[n]));
            c9.record(|| format!("slot {n}"), (dv - bound) / bound);
        }
    }
    let mut c10 = FamilyCheck::new("C10");
    for n in 0..n_slots {
        let bound = (1.0 - schedule.sum_at(n)) * platform.v_max;
        c10.record(|| format!("slot {n}"), (trajectory.speed(n) - bound) / platform.v_max);
    }
    let mut c11 = FamilyCheck::new("C11");
    for e in 0..e_targets {
        for n in 0..n_slots {
            let a = schedule.alpha[e][n];
            let off = if (0.0..=1.0).contains(&a) { a.min(1.0 - a) } else { f64::INFINITY };
            c11.record(|| format!("target {e} slot {n}"), off);
        }
    }
    let mut boundary = FamilyCheck::new("boundary");
    if n_slots > 0 {
        boundary.record(
            || "start".into(),
            norm2(sub2(trajectory.positions[0], platform.start_pos)) / step,
        );
        boundary.record(
            || "end".into(),
            norm2(sub2(trajectory.positions[n_slots - 1], platform.end_pos)) / step,
        );
    }

    let families: Vec<FamilyCheck> = [c1, c2, c3, c4, c5, c6, c7, c8, c9, c10, c11, boundary]
        .into_iter()
        .map(FamilyCheck::finish)
        .collect();
    let pass = families.iter().all(|f| f.pass);
    ConstraintAudit {
        families,
        average_rates: rates,
        sensing_snr: snr,
        beampattern_errors: errors,
        rank_tight: Vec::new(),
        pass,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{steering_vector, SteeringContext};
    use crate::plan::Covariance;
    use crate::scenario::{default_scenario, smoke_scenario};
    use nalgebra::DMatrix;
    use num_complex::Complex;

    fn hovering(s: &Scenario, at: [f64; 2]) -> Trajectory {
        let n = s.num_slots();
        Trajectory {
            positions: vec![at; n],
            velocities: vec![[0.0, 0.0]; n],
            slot_length: s.timing.slot_length,
        }
    }

    fn single_slot(mut s: Scenario) -> Scenario {
        s.timing.slots = 1;
        s.timing.duration = s.timing.slot_length;
        s.platform.end_pos = s.platform.start_pos;
        s
    }

    #[test]
    fn zero_beams_fail_rate_at_every_user() {
        let s = smoke_scenario();
        let plan = TransmitPlan::zeros(s.num_slots(), s.num_users(), s.platform.antennas);
        let traj = hovering(&s, s.platform.start_pos);
        let audit = verify_solution(&plan, &traj, &SensingSchedule::zeros(1, s.num_slots()), &s);
        let c2 = audit.family("C2").unwrap();
        assert!(!c2.pass);
        assert_eq!(c2.failures.len(), s.num_users());
        assert!(!audit.pass);
    }

    #[test]
    fn overhead_focused_hover_meets_echo_threshold() {
        let mut s = single_slot(default_scenario());
        s.targets.truncate(1);
        let d = s.targets[0].position;
        s.platform.start_pos = d;
        s.platform.end_pos = d;
        s.targets[0].snr_threshold = 1.0;
        let g = s.geometry();
        let a = steering_vector(&SteeringContext::new(d, d, g));
        let m = a.len();
        let p = s.platform.p_max / m as f64;
        let r = DMatrix::from_fn(m, m, |i, j| a[i] * a[j].conj() * p);
        let mut plan = TransmitPlan::zeros(1, s.num_users(), m);
        plan.sensing[0] = Some(Covariance(r));
        let schedule = SensingSchedule { alpha: vec![vec![1.0]] };
        let audit = verify_solution(&plan, &hovering(&s, d), &schedule, &s);
        assert!(audit.family("C4").unwrap().pass);
        assert!((audit.sensing_snr[0] - 46.6274247339537).abs() < 1e-6 * 46.6);
    }

    #[test]
    fn doubling_noise_halves_single_user_sinr() {
        let mut s = smoke_scenario();
        s.users.truncate(1);
        s.users[0].min_rate = 1e-3;
        let traj = hovering(&s, s.platform.start_pos);
        let mut plan = TransmitPlan::zeros(s.num_slots(), 1, s.platform.antennas);
        for b in &mut plan.beams {
            b[0] = vec![Complex::new(1e-4, 0.0); s.platform.antennas];
        }
        let schedule = SensingSchedule::zeros(1, s.num_slots());
        let base = verify_solution(&plan, &traj, &schedule, &s).average_rates[0];
        s.users[0].noise_power *= 2.0;
        let halved = verify_solution(&plan, &traj, &schedule, &s).average_rates[0];
        let g1 = 2f64.powf(base) - 1.0;
        let g2 = 2f64.powf(halved) - 1.0;
        assert!((g1 / g2 - 2.0).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_fails_without_panicking() {
        let s = smoke_scenario();
        let plan = TransmitPlan::zeros(1, 1, 1);
        let audit = verify_solution(&plan, &hovering(&s, [0.0, 0.0]), &SensingSchedule::zeros(0, 0), &s);
        assert!(!audit.pass);
    }
}
