//! Acceptance criteria, each checked at its stated tolerance with one
//! pass/fail line per criterion. Oracles here are written independently of
//! the library code they check.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tempfile::TempDir;

use uavisac::ao::{run_ao, SolveReport};
use uavisac::beamforming::dc_product_majorizer;
use uavisac::channel::{expansion_gradient, quadratic_form_expansion, sinr};
use uavisac::power::{
    flight_power_at_speed, hover_power, induced_slack, induced_slack_residual, min_power_speed, FlightPowerVariant,
};
use uavisac::scenario::{apply_override, default_document, smoke_document};
use uavisac::{default_scenario, smoke_scenario, ArrayGeometry, PowerParams, Scenario};

type C64 = Complex<f64>;
type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_hermitian_psd(rng: &mut impl Rng, m: usize) -> DMatrix<C64> {
    let b = DMatrix::from_fn(m, m, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    &b * b.adjoint()
}

/// a_m = exp(j·2π·(spacing/λ)·m·cosθ).
fn ula_steering(g: &ArrayGeometry, cos_theta: f64) -> DVector<C64> {
    DVector::from_fn(g.antennas, |m, _| {
        C64::from_polar(1.0, 2.0 * PI * g.spacing / g.wavelength * m as f64 * cos_theta)
    })
}

fn quadratic(w: &DMatrix<C64>, a: &DVector<C64>) -> f64 {
    (a.adjoint() * w * a)[(0, 0)].re
}

// 1. Kernel oracles.

fn kernels() -> Outcome {
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let geometry = default_scenario().geometry();
    let h2 = geometry.altitude * geometry.altitude;
    let beta0 = 1e-3;

    let mut expansion_err = 0.0f64;
    let mut gradient_err = 0.0f64;
    for _ in 0..100 {
        let w = random_hermitian_psd(&mut rng, geometry.antennas);
        let s = h2 * rng.random_range(1.01..25.0);
        let e = quadratic_form_expansion(&w, s, &geometry, beta0).map_err(|e| e.to_string())?;
        let direct = beta0 * beta0 * quadratic(&w, &ula_steering(&geometry, geometry.altitude / s.sqrt()));
        expansion_err = expansion_err.max((e.total() - direct).abs() / direct.abs());

        // Richardson-extrapolated central difference of J(s).
        let j = |x: f64| quadratic_form_expansion(&w, x, &geometry, beta0).unwrap().off_diagonal;
        let central = |h: f64| (j(s + h) - j(s - h)) / (2.0 * h);
        let h = 1e-3 * (s - h2).min(s);
        let fd = (4.0 * central(h / 2.0) - central(h)) / 3.0;
        let grad = expansion_gradient(&w, s, &geometry, beta0).map_err(|e| e.to_string())?;
        // Natural scale of dJ/ds: |J|/s bounds it away from zero crossings.
        let scale = grad.abs().max(e.off_diagonal.abs() / s).max(e.diagonal / s * 1e-3);
        gradient_err = gradient_err.max((grad - fd).abs() / scale);
    }

    let pm = PowerParams::reference();
    let mut slack_residual = 0.0f64;
    for i in 0..50 {
        let v = 30.0 * i as f64 / 49.0;
        let y = induced_slack(v, &pm);
        let r = induced_slack_residual(y, [v, 0.0], &pm).map_err(|e| e.to_string())?;
        slack_residual = slack_residual.max(r.abs() * y * y);
    }

    let mut majorizer_gap = f64::INFINITY;
    let mut expansion_gap = 0.0f64;
    for _ in 0..10_000 {
        let (mu, phi) = (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
        let (mt, pt) = (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
        majorizer_gap = majorizer_gap.min(dc_product_majorizer(mu, phi, mt, pt) - mu * phi);
        expansion_gap = expansion_gap.max((dc_product_majorizer(mt, pt, mt, pt) - mt * pt).abs());
    }
    let elapsed = clock.elapsed();

    check(
        expansion_err <= 1e-9
            && gradient_err <= 1e-6
            && slack_residual <= 1e-12
            && majorizer_gap >= -1e-12
            && expansion_gap <= 1e-12
            && elapsed < Duration::from_secs(10),
        format!(
            "expansion {expansion_err:.1e}, gradient {gradient_err:.1e}, slack residual {slack_residual:.1e}, \
             majorizer min gap {majorizer_gap:.1e}, gap at expansion {expansion_gap:.1e}, {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

// 2. Power model.

fn power_model() -> Outcome {
    let std = PowerParams::reference();
    let hover = flight_power_at_speed(0.0, &std).total;
    let v_star = min_power_speed(&std, 30.0);
    let offset = std.with_variant(FlightPowerVariant::HoverSubtracted);
    let mut variant_err = 0.0f64;
    for i in 0..50 {
        let v = 30.0 * i as f64 / 49.0;
        let d = flight_power_at_speed(v, &std).total - flight_power_at_speed(v, &offset).total;
        variant_err = variant_err.max((d - offset.variant_offset()).abs());
    }
    check(
        hover == 168.6 && hover_power(&std) == 168.6 && (9.0..=11.5).contains(&v_star) && variant_err <= 1e-9,
        format!("hover {hover} W, min-power speed {v_star:.2} m/s, variant offset error {variant_err:.1e}"),
    )
}

// 3. Smoke-scale alternating optimization.

fn smoke_ao() -> Outcome {
    let clock = Instant::now();
    let scenario = smoke_scenario();
    let r = run_ao(&scenario).map_err(|e| e.to_string())?;
    let elapsed = clock.elapsed();
    let trace_ok = r.objective_trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-6));
    let alpha_ok = r.stats.pre_rounding_binary_violation <= 1e-3;
    let blocks: Vec<(usize, bool)> = r
        .audit
        .rank_tight
        .iter()
        .enumerate()
        .flat_map(|(n, row)| row.iter().map(move |t| (n, *t)))
        .collect();
    let tight = blocks.iter().filter(|(_, t)| *t).count() as f64 / blocks.len() as f64;
    let covered = blocks.iter().all(|(n, t)| *t || r.stats.randomized_slots.contains(n));
    let failing: Vec<String> = r.audit.failing().map(|f| f.family.clone()).collect();
    check(
        trace_ok && alpha_ok && tight >= 0.95 && covered && r.audit.pass && elapsed < Duration::from_secs(300),
        format!(
            "trace {:?}, binary violation {:.1e}, rank-one blocks {:.0}% (max λ₂/λ₁ {:.1e}), audit {}, {:.1} s",
            r.objective_trace.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>(),
            r.stats.pre_rounding_binary_violation,
            100.0 * tight,
            r.stats.max_rank_ratio,
            if failing.is_empty() { "pass".to_string() } else { format!("fails {}", failing.join(",")) },
            elapsed.as_secs_f64()
        ),
    )
}

// 4. Hover to sense on the default mission.

fn default_hover(r: &SolveReport, scenario: &Scenario) -> Outcome {
    let mut worst_speed = 0.0f64;
    let mut worst_distance = 0.0f64;
    let mut sensing = 0;
    for n in 0..r.trajectory.len() {
        if let Some(e) = r.schedule.sensing_target(n) {
            sensing += 1;
            let q = r.trajectory.positions[n];
            let d = scenario.targets[e].position;
            worst_speed = worst_speed.max(r.trajectory.speed(n));
            worst_distance = worst_distance.max((q[0] - d[0]).hypot(q[1] - d[1]));
        }
    }
    check(
        sensing > 0 && worst_speed <= 1e-8 && worst_distance <= 5.0,
        format!("{sensing} sensing slots, max speed {worst_speed:.1e} m/s, max distance {worst_distance:.3} m"),
    )
}

// 5. Average power against the echo SNR threshold.

fn uavisac(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_uavisac")).args(args).output().expect("binary runs")
}

fn sweep(out: &Path, thresholds: &str) -> Result<Vec<Vec<String>>, String> {
    let o = uavisac(&["sweep", "--thresholds-db", thresholds, "--out", out.to_str().unwrap()]);
    if o.status.code() != Some(0) {
        return Err(format!("sweep exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)));
    }
    let text = fs::read_to_string(out.join("sweep.csv")).map_err(|e| e.to_string())?;
    Ok(text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect())
}

fn snr_trends(dir: &Path) -> Outcome {
    let rows = sweep(dir, "0,2,4,6")?;
    let thresholds = [0.0, 2.0, 4.0, 6.0];
    let power = |scheme: &str| -> Vec<f64> {
        thresholds
            .iter()
            .map(|t| {
                rows.iter()
                    .find(|r| r[1] == scheme && r[0].parse::<f64>().unwrap() == *t)
                    .map_or(f64::NAN, |r| r[2].parse().unwrap())
            })
            .collect()
    };
    let (p, b1, b2) = (power("proposed"), power("baseline-1"), power("baseline-2"));
    let all_pass = rows.len() == 12 && rows.iter().all(|r| r[7] == "true");
    let monotone = [&p, &b1, &b2].iter().all(|s| s.windows(2).all(|w| w[1] >= w[0]));
    let dominant = (0..4).all(|i| p[i] <= b1[i] && p[i] <= b2[i]);
    let borrowed = rows.iter().filter(|r| r[0] != r[8]).count();
    check(
        all_pass && monotone && dominant,
        format!(
            "proposed {p:.3?}, baseline-1 {b1:.3?}, baseline-2 {b2:.3?} W; \
             {borrowed} of 12 cells report a plan solved at a higher threshold"
        ),
    )
}

// 6. Degenerate missions.

/// Least total transmit power meeting SINR targets γ at one position, by the
/// uplink-downlink duality fixed point.
fn min_power_beamforming(channels: &[DVector<C64>], noise: &[f64], gamma: &[f64]) -> f64 {
    let m = channels[0].len();
    let g: Vec<DVector<C64>> = channels.iter().zip(noise).map(|(h, s)| h / C64::new(s.sqrt(), 0.0)).collect();
    let mut lambda = vec![1.0; g.len()];
    let mut sigma_inv = DMatrix::identity(m, m);
    for _ in 0..2000 {
        let mut sigma = DMatrix::<C64>::identity(m, m);
        for (gi, li) in g.iter().zip(&lambda) {
            sigma += gi * gi.adjoint() * C64::new(*li, 0.0);
        }
        sigma_inv = sigma.try_inverse().expect("positive definite");
        for (k, gk) in g.iter().enumerate() {
            let q = (gk.adjoint() * &sigma_inv * gk)[(0, 0)].re;
            lambda[k] = 1.0 / ((1.0 + 1.0 / gamma[k]) * q);
        }
    }
    let u: Vec<DVector<C64>> = g.iter().map(|gk| (&sigma_inv * gk).normalize()).collect();
    let k = g.len();
    let a = DMatrix::from_fn(k, k, |r, c| {
        let x = (g[r].adjoint() * &u[c])[(0, 0)].norm_sqr();
        if r == c {
            x / gamma[r]
        } else {
            -x
        }
    });
    let p = a.lu().solve(&DVector::from_element(k, 1.0)).expect("invertible");
    p.sum()
}

fn degenerate() -> Outcome {
    let mut doc = smoke_document();
    for o in ["targets=[]", "platform.end_pos=[0,0]", "users.0.min_rate=1e-3", "users.1.min_rate=1e-3"] {
        apply_override(&mut doc, o).map_err(|e| e.to_string())?;
    }
    let scenario = Scenario::from_value(doc).map_err(|e| e.to_string())?;
    let r = run_ao(&scenario).map_err(|e| e.to_string())?;
    let geometry = scenario.geometry();
    let start = scenario.platform.start_pos;
    let channels: Vec<DVector<C64>> = scenario
        .users
        .iter()
        .map(|u| {
            let range = (start[0] - u.position[0])
                .hypot(start[1] - u.position[1])
                .hypot(geometry.altitude);
            ula_steering(&geometry, geometry.altitude / range) * C64::new(scenario.timing.beta0 / range, 0.0)
        })
        .collect();
    let noise: Vec<f64> = scenario.users.iter().map(|u| u.noise_power).collect();
    let gamma: Vec<f64> = scenario.users.iter().map(|u| 2f64.powf(u.min_rate) - 1.0).collect();
    let floor = min_power_beamforming(&channels, &noise, &gamma);
    let bound = hover_power(&scenario.power_model) + floor;
    let hover_ok = r.audit.pass && r.objective <= bound * (1.0 + 1e-9);

    // Single user: the SINR reduces to hᴴWh/σ².
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut sinr_err = 0.0f64;
    for _ in 0..100 {
        let w = random_hermitian_psd(&mut rng, 6);
        let h = DVector::from_fn(6, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let noise = rng.random_range(0.01..1.0);
        let closed = quadratic(&w, &h) / noise;
        let got = sinr(&[w], h.as_slice(), 0, noise).map_err(|e| e.to_string())?;
        sinr_err = sinr_err.max((got - closed).abs() / closed);
    }
    check(
        hover_ok && sinr_err <= 1e-9,
        format!(
            "objective {:.9} W against hover plus transmit floor {bound:.9} W (floor {floor:.3e} W), \
             single-user SINR error {sinr_err:.1e}",
            r.objective
        ),
    )
}

// 7. Determinism and scenario round trip.

fn determinism(dir: &Path) -> Outcome {
    let mut identical = Vec::new();
    let runs: Vec<_> = ["a", "b"].iter().map(|s| dir.join(s)).collect();
    for out in &runs {
        let o = uavisac(&["run", "--scenario", "smoke", "--seed", "11", "--out", out.to_str().unwrap()]);
        if o.status.code() != Some(0) {
            return Err(format!("smoke run exited {:?}", o.status.code()));
        }
    }
    for f in ["trajectory.csv", "power.csv", "report.json"] {
        identical.push(fs::read(runs[0].join(f)).ok() == fs::read(runs[1].join(f)).ok());
    }
    let sweeps: Vec<_> = ["s1", "s2"].iter().map(|s| dir.join(s)).collect();
    for out in &sweeps {
        sweep(out, "0")?;
    }
    identical.push(fs::read(sweeps[0].join("sweep.csv")).ok() == fs::read(sweeps[1].join("sweep.csv")).ok());

    let mut patched = default_document();
    apply_override(&mut patched, "platform.v_max=14.300000000000001").map_err(|e| e.to_string())?;
    apply_override(&mut patched, "users.0.min_rate=0.1").map_err(|e| e.to_string())?;
    let mut round_trip = true;
    for doc in [default_document(), smoke_document(), patched] {
        let s = Scenario::from_value(doc).map_err(|e| e.to_string())?;
        let text = s.to_json();
        let back = Scenario::from_value(serde_json::from_str::<Value>(&text).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        round_trip &= back == s && back.to_json() == text && back.digest() == s.digest();
    }
    check(
        identical.iter().all(|x| *x) && round_trip,
        format!("byte-identical artifacts {identical:?}, exact scenario round trip {round_trip}"),
    )
}

fn main() -> std::process::ExitCode {
    let dir = TempDir::new().unwrap();
    let default = default_scenario();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 kernel oracles", kernels()),
        ("2 power model", power_model()),
        ("3 smoke alternating optimization", smoke_ao()),
    ];
    results.push((
        "4 hover over targets on the default mission",
        run_ao(&default).map_err(|e| e.to_string()).and_then(|r| default_hover(&r, &default)),
    ));
    results.push(("5 average power against sensing threshold", snr_trends(&dir.path().join("sweep"))));
    results.push(("6 degenerate missions", degenerate()));
    results.push(("7 determinism and round trip", determinism(dir.path())));

    for (name, outcome) in &results {
        match outcome {
            Ok(d) => println!("PASS criterion {name}: {d}"),
            Err(d) => println!("FAIL criterion {name}: {d}"),
        }
    }
    let failed = results.iter().filter(|(_, o)| o.is_err()).count();
    println!("acceptance: {} of {} criteria pass", results.len() - failed, results.len());
    if failed == 0 {
        std::process::ExitCode::SUCCESS
    } else {
        std::process::ExitCode::FAILURE
    }
}
