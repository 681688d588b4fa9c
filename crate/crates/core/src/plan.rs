//! Trajectories, sensing schedules and transmit plans exchanged between the
//! stages, the verifier and the report.

use nalgebra::DMatrix;
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::channel::{comm_channel, steering_vector, SteeringContext};
use crate::scalar::{norm2, Vec2};
use crate::scenario::{cmatrix_serde, CMatrix, Scenario};

/// Hermitian matrix with the `{ "re", "im" }` document encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariance(#[serde(with = "cmatrix_serde")] pub CMatrix);

/// Slotted horizontal trajectory. `positions[n]` is q[n] and `velocities[n]`
/// is v[n]; q[n+1] = q[n] + (1 − Σ_e α_{e,n})·v[n]·δt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub positions: Vec<Vec2<f64>>,
    pub velocities: Vec<Vec2<f64>>,
    pub slot_length: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn speed(&self, n: usize) -> f64 {
        norm2(self.velocities[n])
    }

    /// Largest ‖q[n+1] − q[n] − (1 − Σα)·v[n]·δt‖ over the slots.
    pub fn dynamics_residual(&self, schedule: &SensingSchedule) -> (f64, usize) {
        let mut worst = (0.0, 0);
        for n in 0..self.len().saturating_sub(1) {
            let f = (1.0 - schedule.sum_at(n)) * self.slot_length;
            let r = [
                self.positions[n + 1][0] - self.positions[n][0] - f * self.velocities[n][0],
                self.positions[n + 1][1] - self.positions[n][1] - f * self.velocities[n][1],
            ];
            let r = norm2(r);
            if r > worst.0 {
                worst = (r, n);
            }
        }
        worst
    }

    /// Path length Σ‖q[n+1] − q[n]‖.
    pub fn path_length(&self) -> f64 {
        self.positions
            .windows(2)
            .map(|w| norm2([w[1][0] - w[0][0], w[1][1] - w[0][1]]))
            .sum()
    }
}

/// Sensing indicators α_{e,n}, indexed `[target][slot]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensingSchedule {
    pub alpha: Vec<Vec<f64>>,
}

impl SensingSchedule {
    pub fn zeros(targets: usize, slots: usize) -> Self {
        Self {
            alpha: vec![vec![0.0; slots]; targets],
        }
    }

    pub fn targets(&self) -> usize {
        self.alpha.len()
    }

    pub fn sum_at(&self, n: usize) -> f64 {
        self.alpha.iter().map(|a| a[n]).sum()
    }

    pub fn count(&self, e: usize) -> f64 {
        self.alpha[e].iter().sum()
    }

    /// Largest distance of any indicator from {0, 1}.
    pub fn max_binary_violation(&self) -> f64 {
        self.alpha
            .iter()
            .flatten()
            .map(|a| a.min(1.0 - a).max(0.0))
            .fold(0.0, f64::max)
    }

    /// Target sensed in slot `n`, if any indicator there is at least ½.
    pub fn sensing_target(&self, n: usize) -> Option<usize> {
        (0..self.targets())
            .filter(|&e| self.alpha[e][n] >= 0.5)
            .max_by(|&a, &b| self.alpha[a][n].total_cmp(&self.alpha[b][n]).then(b.cmp(&a)))
    }

    /// Snaps indicators within `tol` of {0, 1} to the exact value.
    pub fn snapped(&self, tol: f64) -> Self {
        let alpha = self
            .alpha
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&a| {
                        if a <= tol {
                            0.0
                        } else if a >= 1.0 - tol {
                            1.0
                        } else {
                            a
                        }
                    })
                    .collect()
            })
            .collect();
        Self { alpha }
    }
}

/// What the UAV transmits in every slot: one information beamformer per
/// user and an optional dedicated sensing covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmitPlan {
    /// `beams[n][k]` is w_k[n], √W.
    pub beams: Vec<Vec<Vec<Complex<f64>>>>,
    /// `sensing[n]` is W_s[n], W.
    pub sensing: Vec<Option<Covariance>>,
}

impl TransmitPlan {
    pub fn zeros(slots: usize, users: usize, antennas: usize) -> Self {
        Self {
            beams: vec![vec![vec![Complex::new(0.0, 0.0); antennas]; users]; slots],
            sensing: vec![None; slots],
        }
    }

    /// Covariance w_k[n]·w_k[n]ᴴ.
    pub fn user_covariance(&self, n: usize, k: usize) -> CMatrix {
        let w = &self.beams[n][k];
        DMatrix::from_fn(w.len(), w.len(), |i, j| w[i] * w[j].conj())
    }

    /// Σ_k w_k wᴴ_k + W_s in slot `n`.
    pub fn total_covariance(&self, n: usize) -> CMatrix {
        let m = self.beams[n].first().map_or_else(
            || self.sensing[n].as_ref().map_or(0, |c| c.0.nrows()),
            |w| w.len(),
        );
        let mut total = DMatrix::from_element(m, m, Complex::new(0.0, 0.0));
        for k in 0..self.beams[n].len() {
            total += self.user_covariance(n, k);
        }
        if let Some(ws) = &self.sensing[n] {
            total += &ws.0;
        }
        total
    }

    pub fn slot_power(&self, n: usize) -> f64 {
        let info: f64 = self.beams[n]
            .iter()
            .map(|w| w.iter().map(|z| z.norm_sqr()).sum::<f64>())
            .sum();
        info + self.sensing[n].as_ref().map_or(0.0, |c| c.0.trace().re)
    }
}

/// Per-slot channels and steering vectors along a trajectory.
#[derive(Debug, Clone)]
pub struct SlotChannels {
    /// `users[n][k]` is h_k[n].
    pub users: Vec<Vec<Vec<Complex<f64>>>>,
    /// `targets[n][e]` is a(q[n], d_e).
    pub targets: Vec<Vec<Vec<Complex<f64>>>>,
    /// `echo_gain[n][e]` is ϑβ0²/(16πΨ⁴σ_e²), so the slot echo SNR is
    /// `echo_gain · aᴴWa`.
    pub echo_gain: Vec<Vec<f64>>,
}

impl SlotChannels {
    pub fn new(scenario: &Scenario, trajectory: &Trajectory) -> Self {
        let g = scenario.geometry();
        let beta0 = scenario.timing.beta0;
        let mut users = Vec::with_capacity(trajectory.len());
        let mut targets = Vec::with_capacity(trajectory.len());
        let mut echo_gain = Vec::with_capacity(trajectory.len());
        for q in &trajectory.positions {
            users.push(
                scenario
                    .users
                    .iter()
                    .map(|u| comm_channel(&SteeringContext::new(*q, u.position, g), beta0))
                    .collect(),
            );
            let mut a = Vec::new();
            let mut c = Vec::new();
            for t in &scenario.targets {
                let ctx = SteeringContext::new(*q, t.position, g);
                a.push(steering_vector(&ctx));
                let psi2 = ctx.range_sq();
                c.push(
                    t.rcs * beta0 * beta0
                        / (16.0 * std::f64::consts::PI * psi2 * psi2 * t.echo_noise),
                );
            }
            targets.push(a);
            echo_gain.push(c);
        }
        Self {
            users,
            targets,
            echo_gain,
        }
    }
}
