//! Mission descriptions: users, targets, platform, propulsion constants,
//! timing and solver settings, all in linear SI units.
//!
//! Documents are JSON objects with top-level keys `users`, `targets`,
//! `platform`, `power_model`, `timing`, `solver`. Any numeric field may be
//! given instead under a `_db` (linear ratio in dB) or `_dbm` (power in
//! dBm) suffixed name; conversion happens once, in [`Scenario::from_value`].
//!
//! Field units:
//!
//! | section | field | unit |
//! |---|---|---|
//! | users[] | `position` | m |
//! | users[] | `min_rate` | bit/s/Hz |
//! | users[] | `noise_power` | W |
//! | targets[] | `position` | m |
//! | targets[] | `rcs` | m² |
//! | targets[] | `snr_threshold` | linear |
//! | targets[] | `echo_noise` | W |
//! | targets[] | `beampattern_error_budget` (optional) | W² (squared Frobenius) |
//! | targets[] | `desired_covariance` (optional) | W, `{ "re": [[..]], "im": [[..]] }` |
//! | platform | `antennas` | count |
//! | platform | `altitude`, `wavelength`, `element_spacing`, `hover_radius` | m |
//! | platform | `p_max` | W |
//! | platform | `v_max` | m/s |
//! | platform | `a_max` | m/s² |
//! | platform | `start_pos`, `end_pos` | m |
//! | power_model | see [`PowerParams`] | SI |
//! | timing | `duration`, `slot_length` | s |
//! | timing | `slots`, `max_sensing_slots` | count |
//! | timing | `beta0` | linear gain at 1 m |
//! | solver | see [`SolverSettings`] | |
//!
//! When `desired_covariance` is omitted the focused rank-one covariance at
//! full power is used; when `beampattern_error_budget` is omitted it is
//! `0.1·‖R_d‖_F²`.

use nalgebra::DMatrix;
use num_complex::Complex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::channel::{steering_from_cos, ArrayGeometry};
use crate::conic::{self, AffineExpr, ConicProgram};
use crate::power::{hover_power, PowerParams};
use crate::scalar::Vec2;

pub type CMatrix = DMatrix<Complex<f64>>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("malformed document: {0}")]
    Parse(String),
    #[error("schema violation in `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("field `{field}` given both in linear and dB form")]
    DuplicateUnits { field: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("end position unreachable: {distance:.3} m apart, at most {reach:.3} m coverable")]
    Unreachable { distance: f64, reach: f64 },
    #[error("override `{path}`: {reason}")]
    Override { path: String, reason: String },
    #[error("desired covariance fit failed: {0}")]
    CovarianceFit(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommUser {
    pub position: Vec2<f64>,
    pub min_rate: f64,
    pub noise_power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensingTarget {
    pub position: Vec2<f64>,
    pub rcs: f64,
    pub snr_threshold: f64,
    pub echo_noise: f64,
    pub beampattern_error_budget: f64,
    #[serde(with = "cmatrix_serde")]
    pub desired_covariance: CMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UavPlatform {
    pub antennas: usize,
    pub altitude: f64,
    pub wavelength: f64,
    pub element_spacing: f64,
    pub p_max: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub hover_radius: f64,
    pub start_pos: Vec2<f64>,
    pub end_pos: Vec2<f64>,
}

impl UavPlatform {
    pub fn geometry(&self) -> ArrayGeometry<f64> {
        ArrayGeometry {
            antennas: self.antennas,
            altitude: self.altitude,
            spacing: self.element_spacing,
            wavelength: self.wavelength,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissionTiming {
    pub duration: f64,
    pub slot_length: f64,
    pub slots: usize,
    pub max_sensing_slots: usize,
    pub beta0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    /// Penalty weight τ on non-binary sensing indicators, W.
    pub penalty: f64,
    /// Relative objective change that ends the outer and inner loops.
    pub ao_tolerance: f64,
    pub max_ao_iters: usize,
    pub max_sca_iters: usize,
    /// Initial trust region on the squared slant-range slacks, m².
    pub trust_region: f64,
    /// Initial trust region on each waypoint, m.
    pub position_trust_region: f64,
    pub binary_tol: f64,
    /// Largest accepted λ₂/λ₁ for a covariance to count as rank one.
    pub rank_tol: f64,
    /// Conic backend feasibility and gap tolerance.
    pub conic_tolerance: f64,
    /// Gaussian randomization candidates per covariance when rank one fails.
    pub randomization_draws: usize,
    pub seed: u64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            penalty: 1e3,
            ao_tolerance: 1e-3,
            max_ao_iters: 6,
            max_sca_iters: 4,
            trust_region: 25.0,
            position_trust_region: 10.0,
            binary_tol: 1e-3,
            rank_tol: 1e-4,
            conic_tolerance: 1e-8,
            randomization_draws: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub users: Vec<CommUser>,
    pub targets: Vec<SensingTarget>,
    pub platform: UavPlatform,
    pub power_model: PowerParams<f64>,
    pub timing: MissionTiming,
    #[serde(default)]
    pub solver: SolverSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    FocusedRankOne,
    LeastSquaresFit,
}

/// Angular grid and mainlobe used by the least-squares covariance fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MainlobeMask {
    /// Uniform grid over departure angles in [−90°, 90°].
    pub grid_points: usize,
    /// Full mainlobe width around boresight, degrees.
    pub width_deg: f64,
}

impl Default for MainlobeMask {
    fn default() -> Self {
        Self {
            grid_points: 181,
            width_deg: 10.0,
        }
    }
}

impl MainlobeMask {
    fn angles_deg(&self) -> impl Iterator<Item = f64> + '_ {
        let n = self.grid_points;
        (0..n).map(move |i| -90.0 + 180.0 * i as f64 / (n - 1) as f64)
    }

    fn values(&self) -> Vec<f64> {
        self.angles_deg()
            .map(|t| if t.abs() <= 0.5 * self.width_deg { 1.0 } else { 0.0 })
            .collect()
    }

    fn steering(&self, g: &ArrayGeometry<f64>) -> Vec<Vec<Complex<f64>>> {
        self.angles_deg()
            .map(|t| steering_from_cos(g, t.to_radians().cos()))
            .collect()
    }
}

/// Smallest `‖κ·mask − gain‖₂` over the scale κ, for the beampattern of `r`
/// sampled on the mask grid.
pub fn mask_fit_residual(platform: &UavPlatform, r: &CMatrix, mask: &MainlobeMask) -> f64 {
    let g = platform.geometry();
    let m = mask.values();
    let gains: Vec<f64> = mask
        .steering(&g)
        .iter()
        .map(|a| crate::channel::beampattern_gain(r, a))
        .collect();
    let mm: f64 = m.iter().map(|x| x * x).sum();
    let mg: f64 = m.iter().zip(&gains).map(|(a, b)| a * b).sum();
    let kappa = mg / mm;
    m.iter()
        .zip(&gains)
        .map(|(a, b)| (kappa * a - b).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Desired sensing covariance with trace `power_budget`.
pub fn build_desired_covariance(
    platform: &UavPlatform,
    power_budget: f64,
    mode: CovarianceMode,
) -> Result<CMatrix, ScenarioError> {
    build_desired_covariance_with(platform, power_budget, mode, &MainlobeMask::default())
}

pub fn build_desired_covariance_with(
    platform: &UavPlatform,
    power_budget: f64,
    mode: CovarianceMode,
    mask: &MainlobeMask,
) -> Result<CMatrix, ScenarioError> {
    if !(power_budget > 0.0 && power_budget <= platform.p_max * (1.0 + 1e-12)) {
        return Err(ScenarioError::Invariant(format!(
            "covariance budget {power_budget} W must lie in (0, P_max = {} W]",
            platform.p_max
        )));
    }
    let g = platform.geometry();
    let m = platform.antennas;
    match mode {
        CovarianceMode::FocusedRankOne => {
            let a0 = steering_from_cos(&g, 1.0);
            let scale = power_budget / m as f64;
            Ok(DMatrix::from_fn(m, m, |i, j| a0[i] * a0[j].conj() * scale))
        }
        CovarianceMode::LeastSquaresFit => {
            let mut p = ConicProgram::new();
            let r = p.hermitian("R", m);
            let kappa = p.scalar("kappa");
            let t = p.scalar("t");
            let residuals: Vec<AffineExpr> = mask
                .values()
                .iter()
                .zip(mask.steering(&g))
                .map(|(&mv, a)| AffineExpr::term(kappa, mv) - r.quad_form(&a))
                .collect();
            let fit = |e: conic::ConicError| ScenarioError::CovarianceFit(e.to_string());
            p.norm_leq("fit", residuals, t.into()).map_err(fit)?;
            p.equal("budget", r.trace(), power_budget.into()).map_err(fit)?;
            p.psd_hermitian("psd", &r.expr()).map_err(fit)?;
            p.minimize(t.into());
            let sol = conic::solve(&p, 1e-9).map_err(fit)?;
            if !sol.is_optimal() {
                return Err(ScenarioError::CovarianceFit(format!(
                    "mask unattainable with {m} antennas ({})",
                    sol.stats.backend_status
                )));
            }
            let raw = sol.hermitian(&r);
            Ok(project_psd(&raw, power_budget))
        }
    }
}

/// Clips negative eigenvalues left by the interior-point solve and restores
/// the trace.
fn project_psd(r: &CMatrix, trace: f64) -> CMatrix {
    let eig = r.clone().symmetric_eigen();
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let total: f64 = clipped.iter().sum();
    let scale = if total > 0.0 { trace / total } else { 0.0 };
    let d = DMatrix::from_diagonal(&clipped.map(|l| Complex::new(l * scale, 0.0)));
    let v = &eig.eigenvectors;
    let out = v * d * v.adjoint();
    (&out + out.adjoint()) * Complex::new(0.5, 0.0)
}

/// Decibel-to-linear conversion selected by a key suffix.
type UnitConversion = fn(f64) -> f64;

impl Scenario {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn num_slots(&self) -> usize {
        self.timing.slots
    }

    pub fn geometry(&self) -> ArrayGeometry<f64> {
        self.platform.geometry()
    }

    pub fn hover_power(&self) -> f64 {
        hover_power(&self.power_model)
    }

    /// Builds a scenario from a parsed document, converting dB fields and
    /// filling derived defaults, then validates it.
    pub fn from_value(mut doc: Value) -> Result<Self, ScenarioError> {
        convert_db_fields(&mut doc, "")?;
        let root = doc
            .as_object_mut()
            .ok_or_else(|| ScenarioError::Parse("document root must be an object".into()))?;
        for key in root.keys() {
            if !matches!(
                key.as_str(),
                "users" | "targets" | "platform" | "power_model" | "timing" | "solver"
            ) {
                return Err(schema(key, "unknown top-level key"));
            }
        }
        let platform: UavPlatform = section(root, "platform")?;
        if let Some(Value::Array(targets)) = root.get_mut("targets") {
            for (i, t) in targets.iter_mut().enumerate() {
                let Some(obj) = t.as_object_mut() else {
                    return Err(schema(&format!("targets.{i}"), "expected an object"));
                };
                if !obj.contains_key("desired_covariance") {
                    if !(platform.p_max > 0.0) || platform.antennas == 0 {
                        return Err(ScenarioError::Invariant(
                            "P_max > 0 and M ≥ 1 needed to derive R_d".into(),
                        ));
                    }
                    let rd = build_desired_covariance(
                        &platform,
                        platform.p_max,
                        CovarianceMode::FocusedRankOne,
                    )?;
                    obj.insert(
                        "desired_covariance".into(),
                        cmatrix_serde::to_value(&rd),
                    );
                }
                if !obj.contains_key("beampattern_error_budget") {
                    let rd: CMatrix = cmatrix_serde::from_value(&obj["desired_covariance"])
                        .map_err(|e| schema(&format!("targets.{i}.desired_covariance"), &e))?;
                    obj.insert(
                        "beampattern_error_budget".into(),
                        Value::from(0.1 * rd.norm_squared()),
                    );
                }
            }
        }
        let scenario = Scenario {
            users: section(root, "users")?,
            targets: section(root, "targets")?,
            platform,
            power_model: section(root, "power_model")?,
            timing: section(root, "timing")?,
            solver: match root.get("solver") {
                Some(_) => section(root, "solver")?,
                None => SolverSettings::default(),
            },
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// Canonical document: linear units, every field explicit.
    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("scenario serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// SHA-256 of the canonical document, hex encoded.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scenario serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let inv = |cond: bool, what: &str| {
            if cond {
                Ok(())
            } else {
                Err(ScenarioError::Invariant(what.to_string()))
            }
        };
        let finite2 = |p: &Vec2<f64>| p.iter().all(|x| x.is_finite());
        inv(!self.users.is_empty(), "at least one communication user")?;
        for (k, u) in self.users.iter().enumerate() {
            inv(finite2(&u.position), &format!("users.{k}.position finite"))?;
            inv(u.min_rate > 0.0 && u.min_rate.is_finite(), &format!("users.{k}.min_rate > 0"))?;
            inv(u.noise_power > 0.0 && u.noise_power.is_finite(), &format!("users.{k}.noise_power > 0"))?;
        }
        let pl = &self.platform;
        inv(pl.antennas >= 2, "platform.antennas ≥ 2")?;
        inv(pl.altitude > 0.0 && pl.altitude.is_finite(), "platform.altitude > 0")?;
        inv(pl.wavelength > 0.0 && pl.wavelength.is_finite(), "platform.wavelength > 0")?;
        inv(
            pl.element_spacing > 0.0 && pl.element_spacing.is_finite(),
            "platform.element_spacing > 0",
        )?;
        inv(pl.p_max > 0.0 && pl.p_max.is_finite(), "platform.p_max > 0")?;
        inv(pl.v_max > 0.0 && pl.v_max.is_finite(), "platform.v_max > 0")?;
        inv(pl.a_max > 0.0 && pl.a_max.is_finite(), "platform.a_max > 0")?;
        inv(pl.hover_radius > 0.0 && pl.hover_radius.is_finite(), "platform.hover_radius > 0")?;
        inv(finite2(&pl.start_pos) && finite2(&pl.end_pos), "platform start/end finite")?;
        if pl.element_spacing > 0.5 * pl.wavelength {
            log::warn!("element spacing exceeds half a wavelength; grating lobes possible");
        }
        let m = pl.antennas;
        for (e, t) in self.targets.iter().enumerate() {
            inv(finite2(&t.position), &format!("targets.{e}.position finite"))?;
            inv(t.rcs > 0.0 && t.rcs.is_finite(), &format!("targets.{e}.rcs > 0"))?;
            inv(t.snr_threshold > 0.0 && t.snr_threshold.is_finite(), &format!("targets.{e}.snr_threshold > 0"))?;
            inv(t.echo_noise > 0.0 && t.echo_noise.is_finite(), &format!("targets.{e}.echo_noise > 0"))?;
            inv(
                t.beampattern_error_budget > 0.0 && t.beampattern_error_budget.is_finite(),
                &format!("targets.{e}.beampattern_error_budget > 0"),
            )?;
            let rd = &t.desired_covariance;
            inv(rd.nrows() == m && rd.ncols() == m, &format!("targets.{e}.desired_covariance is M×M"))?;
            let norm = rd.norm();
            let asym = (rd - rd.adjoint()).norm();
            inv(asym <= 1e-12 * norm.max(1e-300), &format!("targets.{e}.desired_covariance Hermitian"))?;
            let tr = rd.trace().re;
            let min_eig = rd.clone().symmetric_eigenvalues().min();
            inv(min_eig >= -1e-9 * tr.abs().max(1e-300), &format!("targets.{e}.desired_covariance PSD"))?;
            inv(tr <= pl.p_max * (1.0 + 1e-9), &format!("targets.{e}.desired_covariance trace ≤ P_max"))?;
        }
        let pm = &self.power_model;
        for (name, v) in [
            ("blade_angular_velocity", pm.blade_angular_velocity),
            ("rotor_radius", pm.rotor_radius),
            ("air_density", pm.air_density),
            ("rotor_solidity", pm.rotor_solidity),
            ("rotor_disc_area", pm.rotor_disc_area),
            ("blade_profile_power", pm.blade_profile_power),
            ("induced_power", pm.induced_power),
            ("induced_velocity", pm.induced_velocity),
            ("fuselage_drag_ratio", pm.fuselage_drag_ratio),
        ] {
            inv(v > 0.0 && v.is_finite(), &format!("power_model.{name} > 0"))?;
        }
        let tm = &self.timing;
        inv(tm.slots >= 2, "timing.slots ≥ 2")?;
        inv(tm.slot_length > 0.0 && tm.duration > 0.0, "timing durations > 0")?;
        inv(
            (tm.slots as f64 * tm.slot_length - tm.duration).abs() <= 1e-12 * tm.duration,
            "timing.slots · timing.slot_length = timing.duration",
        )?;
        inv(tm.max_sensing_slots >= 1, "timing.max_sensing_slots ≥ 1")?;
        inv(tm.beta0 > 0.0 && tm.beta0.is_finite(), "timing.beta0 > 0")?;
        let s = &self.solver;
        inv(s.penalty >= 1.0, "solver.penalty ≥ 1")?;
        for (name, v) in [
            ("ao_tolerance", s.ao_tolerance),
            ("trust_region", s.trust_region),
            ("position_trust_region", s.position_trust_region),
            ("binary_tol", s.binary_tol),
            ("rank_tol", s.rank_tol),
            ("conic_tolerance", s.conic_tolerance),
        ] {
            inv(v > 0.0 && v.is_finite(), &format!("solver.{name} > 0"))?;
        }
        inv(s.max_ao_iters >= 1 && s.max_sca_iters >= 1, "solver iteration caps ≥ 1")?;
        let dx = pl.end_pos[0] - pl.start_pos[0];
        let dy = pl.end_pos[1] - pl.start_pos[1];
        let distance = dx.hypot(dy);
        let reach = (tm.slots - 1) as f64 * tm.slot_length * pl.v_max;
        if distance > reach {
            return Err(ScenarioError::Unreachable { distance, reach });
        }
        Ok(())
    }
}

fn schema(field: &str, message: &str) -> ScenarioError {
    ScenarioError::Schema {
        field: field.to_string(),
        message: message.to_string(),
    }
}

fn section<T: for<'de> Deserialize<'de>>(
    root: &Map<String, Value>,
    key: &str,
) -> Result<T, ScenarioError> {
    let v = root.get(key).ok_or_else(|| schema(key, "missing section"))?;
    T::deserialize(v).map_err(|e| schema(key, &e.to_string()))
}

/// Rewrites every `<name>_dbm` / `<name>_db` numeric field to `<name>` in
/// linear units.
fn convert_db_fields(v: &mut Value, path: &str) -> Result<(), ScenarioError> {
    match v {
        Value::Object(map) => {
            let keys: Vec<String> = map.keys().cloned().collect();
            for key in keys {
                let child_path = if path.is_empty() {
                    key.clone()
                } else {
                    format!("{path}.{key}")
                };
                let conv: Option<(&str, UnitConversion)> = if let Some(b) = key.strip_suffix("_dbm") {
                    Some((b, |x| 10f64.powf((x - 30.0) / 10.0)))
                } else if let Some(b) = key.strip_suffix("_db") {
                    Some((b, |x| 10f64.powf(x / 10.0)))
                } else {
                    None
                };
                match conv {
                    Some((base, f)) => {
                        let base = base.to_string();
                        if map.contains_key(&base) {
                            return Err(ScenarioError::DuplicateUnits { field: child_path });
                        }
                        let raw = map.remove(&key).expect("key listed");
                        let x = raw
                            .as_f64()
                            .ok_or_else(|| schema(&child_path, "dB value must be a number"))?;
                        map.insert(base, Value::from(f(x)));
                    }
                    None => convert_db_fields(map.get_mut(&key).expect("key listed"), &child_path)?,
                }
            }
            Ok(())
        }
        Value::Array(items) => {
            for (i, item) in items.iter_mut().enumerate() {
                convert_db_fields(item, &format!("{path}.{i}"))?;
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

/// Parses and validates a scenario document.
pub fn load_scenario(document: &str) -> Result<Scenario, ScenarioError> {
    let v: Value = serde_json::from_str(document).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    Scenario::from_value(v)
}

/// Applies `path=value` to a document. `path` is dot separated with array
/// indices as numbers (`users.0.min_rate`); `value` is parsed as JSON and
/// falls back to a string. Setting `x_db`/`x_dbm` replaces `x` and the other
/// way round.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), ScenarioError> {
    let err = |path: &str, reason: &str| ScenarioError::Override {
        path: path.to_string(),
        reason: reason.to_string(),
    };
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| err(assignment, "expected key=value"))?;
    let path = path.trim();
    let value: Value =
        serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = path.split('.').collect();
    let (last, parents) = parts.split_last().ok_or_else(|| err(path, "empty path"))?;
    let mut cur = doc;
    for part in parents {
        cur = match cur {
            Value::Object(m) => m.get_mut(*part).ok_or_else(|| err(path, &format!("no key `{part}`")))?,
            Value::Array(a) => {
                let i: usize = part.parse().map_err(|_| err(path, &format!("`{part}` is not an index")))?;
                a.get_mut(i).ok_or_else(|| err(path, &format!("index {i} out of range")))?
            }
            _ => return Err(err(path, &format!("`{part}` is not a container"))),
        };
    }
    match cur {
        Value::Object(m) => {
            let base = last
                .strip_suffix("_dbm")
                .or_else(|| last.strip_suffix("_db"))
                .unwrap_or(last);
            let variants = [base.to_string(), format!("{base}_db"), format!("{base}_dbm")];
            let existed = variants.iter().any(|k| m.contains_key(k));
            let derived = matches!(base, "desired_covariance" | "beampattern_error_budget");
            if !existed && !derived && !parents.first().is_some_and(|p| *p == "solver") {
                return Err(err(path, "no such field"));
            }
            for k in &variants {
                m.remove(k);
            }
            m.insert(last.to_string(), value);
            Ok(())
        }
        Value::Array(a) => {
            let i: usize = last.parse().map_err(|_| err(path, "expected an index"))?;
            let slot = a.get_mut(i).ok_or_else(|| err(path, "index out of range"))?;
            *slot = value;
            Ok(())
        }
        _ => Err(err(path, "parent is not a container")),
    }
}

/// Default mission document. Derived fields (`desired_covariance`,
/// `beampattern_error_budget`) are left out so overrides of the platform
/// propagate into them.
///
/// Layout in a 500 m × 500 m area: start (0, 0), end (380, 220), targets at
/// (130, 110) and (290, 150), users at (160, 60) and (230, 190). The direct
/// start–targets–end path is about 449 m. The shortest tour through all four
/// nodes is about 543 m and needs 51 of the 52 moving slots at v_max once the
/// acceleration ramps are counted.
pub fn default_document() -> Value {
    let wavelength = 0.1;
    serde_json::json!({
        "users": [
            { "position": [160.0, 60.0], "min_rate": 1.0, "noise_power_dbm": -110.0 },
            { "position": [230.0, 190.0], "min_rate": 1.0, "noise_power_dbm": -110.0 }
        ],
        "targets": [
            { "position": [130.0, 110.0], "rcs": 1.0, "snr_threshold_db": 0.0, "echo_noise_dbm": -110.0 },
            { "position": [290.0, 150.0], "rcs": 1.0, "snr_threshold_db": 0.0, "echo_noise_dbm": -110.0 }
        ],
        "platform": {
            "antennas": 6,
            "altitude": 40.0,
            "wavelength": wavelength,
            "element_spacing": wavelength / 2.0,
            "p_max_dbm": 40.0,
            "v_max": 15.0,
            "a_max": 5.0,
            "hover_radius": 5.0,
            "start_pos": [0.0, 0.0],
            "end_pos": [380.0, 220.0]
        },
        "power_model": PowerParams::<f64>::reference(),
        "timing": {
            "duration": 55.0,
            "slot_length": 1.0,
            "slots": 55,
            "max_sensing_slots": 3,
            "beta0_db": -30.0
        },
        "solver": SolverSettings::default()
    })
}

pub fn default_scenario() -> Scenario {
    Scenario::from_value(default_document()).expect("default document is valid")
}

/// Ten-slot, two-user, one-target, four-antenna mission for fast checks.
pub fn smoke_document() -> Value {
    let mut doc = default_document();
    doc["users"] = serde_json::json!([
        { "position": [15.0, 40.0], "min_rate": 1.0, "noise_power_dbm": -110.0 },
        { "position": [45.0, -40.0], "min_rate": 1.0, "noise_power_dbm": -110.0 }
    ]);
    doc["targets"] = serde_json::json!([
        { "position": [25.0, 4.0], "rcs": 1.0, "snr_threshold_db": 0.0, "echo_noise_dbm": -110.0 }
    ]);
    doc["platform"]["antennas"] = 4.into();
    doc["platform"]["end_pos"] = serde_json::json!([50.0, 0.0]);
    doc["timing"]["duration"] = 10.0.into();
    doc["timing"]["slots"] = 10.into();
    doc
}

pub fn smoke_scenario() -> Scenario {
    Scenario::from_value(smoke_document()).expect("smoke document is valid")
}

/// `{ "re": [[..]], "im": [[..]] }`, row-major.
pub mod cmatrix_serde {
    use super::CMatrix;
    use num_complex::Complex;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use serde_json::Value;

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Parts {
        re: Vec<Vec<f64>>,
        im: Vec<Vec<f64>>,
    }

    fn split(m: &CMatrix) -> Parts {
        let rows = |f: fn(&Complex<f64>) -> f64| {
            (0..m.nrows())
                .map(|i| (0..m.ncols()).map(|j| f(&m[(i, j)])).collect())
                .collect()
        };
        Parts {
            re: rows(|z| z.re),
            im: rows(|z| z.im),
        }
    }

    fn join(p: Parts) -> Result<CMatrix, String> {
        let n = p.re.len();
        let square = |rows: &Vec<Vec<f64>>| rows.len() == n && rows.iter().all(|r| r.len() == n);
        if !square(&p.re) || !square(&p.im) {
            return Err("re and im must be square arrays of equal size".into());
        }
        Ok(CMatrix::from_fn(n, n, |i, j| Complex::new(p.re[i][j], p.im[i][j])))
    }

    pub fn serialize<S: Serializer>(m: &CMatrix, s: S) -> Result<S::Ok, S::Error> {
        split(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CMatrix, D::Error> {
        join(Parts::deserialize(d)?).map_err(serde::de::Error::custom)
    }

    pub fn to_value(m: &CMatrix) -> Value {
        serde_json::to_value(split(m)).expect("matrix serializes")
    }

    pub fn from_value(v: &Value) -> Result<CMatrix, String> {
        let p = Parts::deserialize(v).map_err(|e| e.to_string())?;
        join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::beampattern_gain;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn db_conversions() {
        let s = default_scenario();
        assert_relative_eq!(s.users[0].noise_power, 1.0e-14, max_relative = 1e-12);
        assert_relative_eq!(s.targets[0].echo_noise, 1.0e-14, max_relative = 1e-12);
        assert_eq!(s.platform.p_max, 10.0);
        assert_relative_eq!(s.timing.beta0, 1.0e-3, max_relative = 1e-12);
        assert_eq!(s.targets[0].snr_threshold, 1.0);
    }

    #[test]
    fn default_matches_reference_setup() {
        let s = default_scenario();
        assert_eq!(s.num_slots(), 55);
        assert_eq!(s.timing.slot_length, 1.0);
        assert_eq!(s.hover_power(), 168.6);
        assert_eq!(s.targets[0].rcs, 1.0);
        assert_eq!((s.num_users(), s.num_targets(), s.platform.antennas), (2, 2, 6));
        assert_eq!((s.platform.altitude, s.platform.v_max, s.platform.a_max), (40.0, 15.0, 5.0));
        assert_eq!(s.platform.hover_radius, 5.0);
        let rd = &s.targets[0].desired_covariance;
        assert_relative_eq!(s.targets[0].beampattern_error_budget, 0.1 * rd.norm_squared(), max_relative = 1e-15);
        for u in &s.users {
            assert_eq!(u.min_rate, 1.0);
        }
        for p in s.users.iter().map(|u| u.position).chain(s.targets.iter().map(|t| t.position)) {
            assert!(p.iter().all(|c| (0.0..=500.0).contains(c)));
        }
    }

    #[test]
    fn echo_snr_rcs_sensitivity() {
        // Best-case single-slot echo SNR at full power overhead, for the
        // RCS values {0.1, 1, 10}; the 0 dB threshold is met by one slot in
        // every case.
        let s = default_scenario();
        for rcs in [0.1, 1.0, 10.0] {
            let m = s.platform.antennas as f64;
            let h = s.platform.altitude;
            let snr = rcs * 1e-6 * m * m * 10.0 / m / (16.0 * std::f64::consts::PI * h.powi(4) * 1e-14);
            assert!(snr >= 1.0, "rcs {rcs}: {snr}");
        }
    }

    #[test]
    fn smoke_dimensions() {
        let s = smoke_scenario();
        assert_eq!((s.num_slots(), s.num_users(), s.num_targets(), s.platform.antennas), (10, 2, 1, 4));
        assert_eq!(s.timing.duration, 10.0);
    }

    #[test]
    fn focused_covariance_properties() {
        let s = default_scenario();
        let rd = build_desired_covariance(&s.platform, 10.0, CovarianceMode::FocusedRankOne).unwrap();
        assert_relative_eq!(rd.trace().re, 10.0, max_relative = 1e-14);
        let ev = rd.clone().symmetric_eigenvalues();
        let mut ev: Vec<f64> = ev.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert!(ev[..5].iter().all(|l| l.abs() < 1e-12));
        let a0 = steering_from_cos(&s.geometry(), 1.0);
        assert_relative_eq!(beampattern_gain(&rd, &a0), 60.0, max_relative = 1e-12);
    }

    #[test]
    fn least_squares_fit_beats_focused_beam() {
        let s = default_scenario();
        let mask = MainlobeMask::default();
        let focused = build_desired_covariance(&s.platform, 10.0, CovarianceMode::FocusedRankOne).unwrap();
        let fitted = build_desired_covariance(&s.platform, 10.0, CovarianceMode::LeastSquaresFit).unwrap();
        let rf = mask_fit_residual(&s.platform, &focused, &mask);
        let rl = mask_fit_residual(&s.platform, &fitted, &mask);
        assert!(rl < rf, "{rl} vs {rf}");
        assert!((&fitted - fitted.adjoint()).norm() <= 1e-12 * fitted.norm());
        assert!(fitted.clone().symmetric_eigenvalues().min() >= -1e-9 * 10.0);
        assert_relative_eq!(fitted.trace().re, 10.0, max_relative = 1e-9);
    }

    #[test]
    fn budget_above_pmax_rejected() {
        let s = default_scenario();
        assert!(build_desired_covariance(&s.platform, 11.0, CovarianceMode::FocusedRankOne).is_err());
    }

    #[test]
    fn schema_errors_name_field() {
        let mut doc = default_document();
        doc["platform"].as_object_mut().unwrap().remove("altitude");
        match Scenario::from_value(doc) {
            Err(ScenarioError::Schema { field, message }) => {
                assert_eq!(field, "platform");
                assert!(message.contains("altitude"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let mut doc = default_document();
        doc["platform"]["p_max"] = 10.0.into();
        assert!(matches!(Scenario::from_value(doc), Err(ScenarioError::DuplicateUnits { .. })));
        assert!(matches!(load_scenario("{"), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn invariant_and_reachability_errors() {
        let mut doc = default_document();
        doc["users"][0]["min_rate"] = 0.0.into();
        assert!(matches!(Scenario::from_value(doc), Err(ScenarioError::Invariant(m)) if m.contains("min_rate")));
        let mut doc = default_document();
        doc["platform"]["end_pos"] = serde_json::json!([900.0, 0.0]);
        assert!(matches!(Scenario::from_value(doc), Err(ScenarioError::Unreachable { .. })));
        let mut doc = default_document();
        doc["timing"]["slots"] = 54.into();
        assert!(matches!(Scenario::from_value(doc), Err(ScenarioError::Invariant(_))));
    }

    #[test]
    fn overrides_patch_document() {
        let mut doc = default_document();
        apply_override(&mut doc, "platform.v_max=5").unwrap();
        apply_override(&mut doc, "users.1.min_rate=2.5").unwrap();
        apply_override(&mut doc, "platform.p_max=5").unwrap();
        apply_override(&mut doc, "platform.end_pos=[100, 0]").unwrap();
        let s = Scenario::from_value(doc.clone()).unwrap();
        assert_eq!(s.platform.v_max, 5.0);
        assert_eq!(s.users[1].min_rate, 2.5);
        assert_eq!(s.platform.p_max, 5.0);
        assert_relative_eq!(s.targets[0].desired_covariance.trace().re, 5.0, max_relative = 1e-12);
        assert!(apply_override(&mut doc, "platform.nope=1").is_err());
        assert!(apply_override(&mut doc, "users.9.min_rate=1").is_err());
        assert!(apply_override(&mut doc, "platform.v_max").is_err());
        apply_override(&mut doc, "platform.v_max=\"fast\"").unwrap();
        assert!(matches!(Scenario::from_value(doc), Err(ScenarioError::Schema { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn round_trip_is_bit_exact(
            ux in -1e3f64..1e3, uy in -1e3f64..1e3,
            rate in 1e-3f64..10.0,
            noise in -130.0f64..-80.0,
            tau in 1.0f64..1e6,
        ) {
            let mut doc = default_document();
            doc["users"][0]["position"] = serde_json::json!([ux, uy]);
            doc["users"][0]["min_rate"] = rate.into();
            doc["users"][1]["noise_power_dbm"] = noise.into();
            doc["solver"]["penalty"] = tau.into();
            let s = Scenario::from_value(doc).unwrap();
            let back = load_scenario(&s.to_json()).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(back.digest(), s.digest());
            prop_assert_eq!(s.users[1].noise_power.to_bits(), back.users[1].noise_power.to_bits());
        }

        #[test]
        fn loaded_scenarios_validate(vmax in 9.0f64..30.0, h in 10.0f64..200.0, m in 2usize..9) {
            let mut doc = default_document();
            doc["platform"]["v_max"] = vmax.into();
            doc["platform"]["altitude"] = h.into();
            doc["platform"]["antennas"] = m.into();
            let s = Scenario::from_value(doc).unwrap();
            prop_assert!(s.validate().is_ok());
            prop_assert_eq!(s.targets[0].desired_covariance.nrows(), m);
        }
    }
}
