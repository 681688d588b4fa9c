//! Uniform-linear-array geometry, free-space channels, SINR, beampattern gain
//! and echo SNR, plus the trace expansion of the array quadratic form used by
//! the trajectory stage.
//!
//! Everything here is a pure function over immutable inputs.

use nalgebra::DMatrix;
use num_complex::Complex;
use thiserror::Error;

use crate::scalar::{norm2_sq, sub2, Scalar, Vec2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("user index {index} out of range for {users} covariance blocks")]
    UserIndex { index: usize, users: usize },
    #[error("negative SINR {value:e}: covariance input is not PSD")]
    NegativeSinr { value: f64 },
    #[error("slack s = {s:e} m^2 must exceed H^2 = {h2:e} m^2")]
    SlackBelowAltitude { s: f64, h2: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Static array and altitude description.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrayGeometry<T> {
    pub antennas: usize,
    /// Flight altitude H, meters.
    pub altitude: T,
    /// Element spacing, meters.
    pub spacing: T,
    /// Carrier wavelength, meters.
    pub wavelength: T,
}

impl<T: Scalar> ArrayGeometry<T> {
    /// Phase increment per element and per unit of cos(theta): 2π·d̂/λ.
    #[inline]
    pub fn phase_scale(&self) -> T {
        T::two() * T::PI() * self.spacing / self.wavelength
    }
}

/// UAV position relative to one ground node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteeringContext<T> {
    pub uav: Vec2<T>,
    pub ground: Vec2<T>,
    pub geometry: ArrayGeometry<T>,
}

impl<T: Scalar> SteeringContext<T> {
    pub fn new(uav: Vec2<T>, ground: Vec2<T>, geometry: ArrayGeometry<T>) -> Self {
        Self {
            uav,
            ground,
            geometry,
        }
    }

    /// Squared slant range ‖q − d‖² + H².
    #[inline]
    pub fn range_sq(&self) -> T {
        norm2_sq(sub2(self.uav, self.ground)) + self.geometry.altitude * self.geometry.altitude
    }

    /// Slant range Ψ.
    #[inline]
    pub fn range(&self) -> T {
        self.range_sq().sqrt()
    }

    /// cos θ = H / Ψ.
    #[inline]
    pub fn cos_theta(&self) -> T {
        self.geometry.altitude / self.range()
    }
}

/// Steering vector for a given cos θ: element m is exp(j·2π(d̂/λ)·m·cosθ).
pub fn steering_from_cos<T: Scalar>(geometry: &ArrayGeometry<T>, cos_theta: T) -> Vec<Complex<T>> {
    let step = geometry.phase_scale() * cos_theta;
    (0..geometry.antennas)
        .map(|m| Complex::from_polar(T::one(), step * T::lit(m as f64)))
        .collect()
}

pub fn steering_vector<T: Scalar>(ctx: &SteeringContext<T>) -> Vec<Complex<T>> {
    steering_from_cos(&ctx.geometry, ctx.cos_theta())
}

/// Free-space channel h = β0·a / Ψ.
pub fn comm_channel<T: Scalar>(ctx: &SteeringContext<T>, beta0: T) -> Vec<Complex<T>> {
    let scale = beta0 / ctx.range();
    steering_vector(ctx).into_iter().map(|a| a * scale).collect()
}

/// Real part of vᴴ·W·v.
pub fn quad_form<T: Scalar>(w: &DMatrix<Complex<T>>, v: &[Complex<T>]) -> T {
    let n = v.len();
    let mut acc = Complex::new(T::zero(), T::zero());
    for r in 0..n {
        let mut row = Complex::new(T::zero(), T::zero());
        for c in 0..n {
            row = row + w[(r, c)] * v[c];
        }
        acc = acc + v[r].conj() * row;
    }
    acc.re
}

/// Transmit beampattern gain aᴴ(Σ W_k)a toward the direction encoded by `a`.
pub fn beampattern_gain<T: Scalar>(wsum: &DMatrix<Complex<T>>, a: &[Complex<T>]) -> T {
    quad_form(wsum, a)
}

/// SINR of user `k`: hᴴW_k h / (Σ_{i≠k} hᴴW_i h + σ²).
pub fn sinr<T: Scalar>(
    covs: &[DMatrix<Complex<T>>],
    h: &[Complex<T>],
    k: usize,
    noise: T,
) -> Result<T, ChannelError> {
    if k >= covs.len() {
        return Err(ChannelError::UserIndex {
            index: k,
            users: covs.len(),
        });
    }
    let signal = quad_form(&covs[k], h);
    let interference = covs
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != k)
        .fold(T::zero(), |acc, (_, w)| acc + quad_form(w, h));
    let value = signal / (interference + noise);
    if value < T::lit(-1e-9) {
        return Err(ChannelError::NegativeSinr {
            value: value.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(value.max(T::zero()))
}

/// Per-slot echo SNR ϑ·β0²·aᴴW a / (16π·Ψ⁴·σ_e²).
pub fn sensing_snr_slot<T: Scalar>(
    ctx: &SteeringContext<T>,
    wsum: &DMatrix<Complex<T>>,
    rcs: T,
    beta0: T,
    echo_noise: T,
) -> T {
    let gain = beampattern_gain(wsum, &steering_vector(ctx));
    let psi2 = ctx.range_sq();
    rcs * beta0 * beta0 * gain / (T::lit(16.0) * T::PI() * psi2 * psi2 * echo_noise)
}

/// Diagonal part U and off-diagonal part J of β0²·aᴴW a written as a
/// function of the squared slant range `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Expansion<T> {
    pub diagonal: T,
    pub off_diagonal: T,
}

impl<T: Scalar> Expansion<T> {
    pub fn total(&self) -> T {
        self.diagonal + self.off_diagonal
    }
}

fn phase<T: Scalar>(z: Complex<T>) -> T {
    if z.re == T::zero() && z.im == T::zero() {
        T::zero()
    } else {
        z.im.atan2(z.re)
    }
}

/// U = β0²·Σ_m W_mm and J = β0²·Σ_{m<m'} 2|W_mm'|·cos(2π(d̂/λ)(m'−m)H/√s + ∠W_mm').
///
/// Each conjugate pair (m, m'), (m', m) contributes 2·Re(W_mm'·e^{jx}); the
/// factor 2 is that pair sum.
pub fn quadratic_form_expansion<T: Scalar>(
    w: &DMatrix<Complex<T>>,
    s: T,
    geometry: &ArrayGeometry<T>,
    beta0: T,
) -> Result<Expansion<T>, ChannelError> {
    let h2 = geometry.altitude * geometry.altitude;
    if !(s >= h2) {
        return Err(ChannelError::SlackBelowAltitude {
            s: s.to_f64().unwrap_or(f64::NAN),
            h2: h2.to_f64().unwrap_or(f64::NAN),
        });
    }
    let n = geometry.antennas;
    check_square(w, n)?;
    let b2 = beta0 * beta0;
    let cos = geometry.altitude / s.sqrt();
    let step = geometry.phase_scale() * cos;
    let mut diag = T::zero();
    let mut off = T::zero();
    for m in 0..n {
        diag = diag + w[(m, m)].re;
        for mp in (m + 1)..n {
            let z = w[(m, mp)];
            let arg = step * T::lit((mp - m) as f64) + phase(z);
            off = off + T::two() * z.norm() * arg.cos();
        }
    }
    Ok(Expansion {
        diagonal: b2 * diag,
        off_diagonal: b2 * off,
    })
}

/// dJ/ds for the expansion above.
pub fn expansion_gradient<T: Scalar>(
    w: &DMatrix<Complex<T>>,
    s: T,
    geometry: &ArrayGeometry<T>,
    beta0: T,
) -> Result<T, ChannelError> {
    let h2 = geometry.altitude * geometry.altitude;
    if !(s > h2 * T::lit(1.0 + 1e-12)) {
        return Err(ChannelError::SlackBelowAltitude {
            s: s.to_f64().unwrap_or(f64::NAN),
            h2: h2.to_f64().unwrap_or(f64::NAN),
        });
    }
    let n = geometry.antennas;
    check_square(w, n)?;
    let scale = geometry.phase_scale();
    let cos = geometry.altitude / s.sqrt();
    // d(H/√s)/ds = −H/2 · s^{−3/2}
    let dcos = -geometry.altitude / (T::two() * s * s.sqrt());
    let mut acc = T::zero();
    for m in 0..n {
        for mp in (m + 1)..n {
            let z = w[(m, mp)];
            let k = scale * T::lit((mp - m) as f64);
            let arg = k * cos + phase(z);
            acc = acc - T::two() * z.norm() * arg.sin() * k * dcos;
        }
    }
    Ok(beta0 * beta0 * acc)
}

fn check_square<T: Scalar>(w: &DMatrix<Complex<T>>, n: usize) -> Result<(), ChannelError> {
    if w.nrows() != n || w.ncols() != n {
        return Err(ChannelError::Dimension {
            expected: n,
            got: w.nrows().max(w.ncols()),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn geom(m: usize) -> ArrayGeometry<f64> {
        ArrayGeometry {
            antennas: m,
            altitude: 40.0,
            spacing: 0.05,
            wavelength: 0.1,
        }
    }

    fn outer(v: &[Complex<f64>], p: f64) -> DMatrix<Complex<f64>> {
        let n = v.len();
        DMatrix::from_fn(n, n, |r, c| v[r] * v[c].conj() * p)
    }

    #[test]
    fn overhead_steering_alternates_sign() {
        let ctx = SteeringContext::new([3.0, 4.0], [3.0, 4.0], geom(6));
        let a = steering_vector(&ctx);
        for (m, z) in a.iter().enumerate() {
            let expect = if m % 2 == 0 { 1.0 } else { -1.0 };
            assert!((z.re - expect).abs() < 1e-12 && z.im.abs() < 1e-12);
        }
    }

    #[test]
    fn three_four_five_geometry() {
        let ctx = SteeringContext::new([30.0, 0.0], [0.0, 0.0], geom(6));
        assert_relative_eq!(ctx.range(), 50.0, epsilon = 1e-12);
        assert_relative_eq!(ctx.cos_theta(), 0.8, epsilon = 1e-12);
        let a = steering_vector(&ctx);
        for (m, z) in a.iter().enumerate() {
            let expect = std::f64::consts::PI * 0.8 * m as f64;
            assert!((z - Complex::from_polar(1.0, expect)).norm() < 1e-9);
        }
    }

    #[test]
    fn channel_norm_and_square_law() {
        let ctx = SteeringContext::new([0.0, 0.0], [0.0, 0.0], geom(6));
        let h = comm_channel(&ctx, 1e-3);
        let n2: f64 = h.iter().map(|z| z.norm_sqr()).sum();
        assert_relative_eq!(n2, 3.75e-9, max_relative = 1e-12);
        for z in &h {
            assert_relative_eq!(z.norm(), 1e-3 / 40.0, max_relative = 1e-12);
        }
        // Ψ = 80: horizontal offset √(80² − 40²)
        let far = SteeringContext::new([(80.0f64 * 80.0 - 1600.0).sqrt(), 0.0], [0.0, 0.0], geom(6));
        let n2_far: f64 = comm_channel(&far, 1e-3).iter().map(|z| z.norm_sqr()).sum();
        assert_relative_eq!(n2 / n2_far, 4.0, max_relative = 1e-12);
    }

    #[test]
    fn sinr_special_cases() {
        let ctx = SteeringContext::new([10.0, 5.0], [0.0, 0.0], geom(4));
        let h = comm_channel(&ctx, 1e-3);
        let g: f64 = h.iter().map(|z| z.norm_sqr()).sum();
        let w = outer(&steering_vector(&ctx), 0.5);
        let single = sinr(std::slice::from_ref(&w), &h, 0, 1e-14).unwrap();
        assert_relative_eq!(single, quad_form(&w, &h) / 1e-14, max_relative = 1e-12);

        let zero = DMatrix::<Complex<f64>>::zeros(4, 4);
        assert_eq!(sinr(&[zero.clone(), zero.clone()], &h, 0, 1e-14).unwrap(), 0.0);

        // W1 = W2 = (P/2M) I
        let p = 10.0;
        let iso = DMatrix::<Complex<f64>>::identity(4, 4) * Complex::new(p / 8.0, 0.0);
        let val = sinr(&[iso.clone(), iso], &h, 1, 1e-14).unwrap();
        let x = g * p / 8.0;
        assert_relative_eq!(val, x / (x + 1e-14), max_relative = 1e-12);
        assert!(val < 1.0);

        assert!(matches!(sinr(&[zero], &h, 3, 1.0), Err(ChannelError::UserIndex { .. })));
    }

    #[test]
    fn sinr_rejects_indefinite_input() {
        let ctx = SteeringContext::new([0.0, 0.0], [0.0, 0.0], geom(4));
        let h = comm_channel(&ctx, 1e-3);
        let neg = outer(&steering_vector(&ctx), -1.0);
        assert!(matches!(
            sinr(&[neg], &h, 0, 1e-14),
            Err(ChannelError::NegativeSinr { .. })
        ));
    }

    #[test]
    fn beampattern_identity_and_focused() {
        let ctx = SteeringContext::new([12.0, -7.0], [0.0, 0.0], geom(6));
        let a = steering_vector(&ctx);
        let eye = DMatrix::<Complex<f64>>::identity(6, 6);
        assert_relative_eq!(beampattern_gain(&eye, &a), 6.0, epsilon = 1e-12);
        let focused = outer(&a, 10.0 / 6.0);
        assert_relative_eq!(beampattern_gain(&focused, &a), 60.0, max_relative = 1e-12);
    }

    #[test]
    fn sensing_snr_overhead_reference() {
        // Independent evaluation: ϑβ0²·gain/(16πΨ⁴σ²) with gain = 60, Ψ = 40.
        let oracle = 1.0 * 1e-6 * 60.0 / (16.0 * std::f64::consts::PI * 40f64.powi(4) * 1e-14);
        let ctx = SteeringContext::new([100.0, 100.0], [100.0, 100.0], geom(6));
        let a0 = steering_vector(&ctx);
        let w = outer(&a0, 10.0 / 6.0);
        let got = sensing_snr_slot(&ctx, &w, 1.0, 1e-3, 1e-14);
        assert_relative_eq!(got, oracle, max_relative = 1e-12);
        assert_relative_eq!(got, 46.627_424_733_953_7, max_relative = 1e-9);

        let zero = DMatrix::<Complex<f64>>::zeros(6, 6);
        assert_eq!(sensing_snr_slot(&ctx, &zero, 1.0, 1e-3, 1e-14), 0.0);
    }

    #[test]
    fn sensing_snr_fourth_power_law() {
        let g = geom(6);
        let eye = DMatrix::<Complex<f64>>::identity(6, 6);
        let near = SteeringContext::new([30.0, 0.0], [0.0, 0.0], g);
        // Ψ = 100 = 2·50
        let far = SteeringContext::new([(100.0f64 * 100.0 - 1600.0).sqrt(), 0.0], [0.0, 0.0], g);
        let r = sensing_snr_slot(&near, &eye, 1.0, 1e-3, 1e-14)
            / sensing_snr_slot(&far, &eye, 1.0, 1e-3, 1e-14);
        assert_relative_eq!(r, 16.0, max_relative = 1e-12);
    }

    #[test]
    fn expansion_special_cases() {
        let g = geom(6);
        let diag = DMatrix::from_fn(6, 6, |r, c| {
            if r == c {
                Complex::new(1.0 + r as f64, 0.0)
            } else {
                Complex::new(0.0, 0.0)
            }
        });
        let e = quadratic_form_expansion(&diag, 2500.0, &g, 1e-3).unwrap();
        assert_eq!(e.off_diagonal, 0.0);
        assert_relative_eq!(e.diagonal, 1e-6 * 21.0, max_relative = 1e-12);
        assert_eq!(expansion_gradient(&diag, 2500.0, &g, 1e-3).unwrap(), 0.0);

        let s: f64 = 3000.0;
        let a = steering_from_cos(&g, 40.0 / s.sqrt());
        let coherent = outer(&a, 1.0);
        let e = quadratic_form_expansion(&coherent, s, &g, 1e-3).unwrap();
        assert_relative_eq!(e.total(), 1e-6 * 36.0, max_relative = 1e-10);

        assert!(quadratic_form_expansion(&coherent, 1500.0, &g, 1e-3).is_err());
        assert!(expansion_gradient(&coherent, 1600.0, &g, 1e-3).is_err());
    }

    #[test]
    fn gradient_sign_follows_sine() {
        // Real W with a single off-diagonal pair (0,1), zero phase.
        let g = geom(2);
        let mut w = DMatrix::<Complex<f64>>::zeros(2, 2);
        w[(0, 1)] = Complex::new(1.0, 0.0);
        w[(1, 0)] = Complex::new(1.0, 0.0);
        // argument k·H/√s with k = π: sin > 0 for argument in (0, π)
        let s = 1600.0 / 0.25; // cos = 0.5, arg = π/2
        let grad_mid = expansion_gradient(&w, s, &g, 1.0).unwrap();
        // dJ/ds = −2·sin(arg)·k·dcos/ds, with dcos/ds < 0 → positive
        assert!(grad_mid > 0.0);
        // Shift the phase by π: sine flips, so does the gradient.
        w[(0, 1)] = Complex::new(-1.0, 0.0);
        w[(1, 0)] = Complex::new(-1.0, 0.0);
        let flipped = expansion_gradient(&w, s, &g, 1.0).unwrap();
        assert_relative_eq!(flipped, -grad_mid, max_relative = 1e-9);
    }

    fn random_hermitian(vals: &[f64], n: usize) -> DMatrix<Complex<f64>> {
        let mut w = DMatrix::<Complex<f64>>::zeros(n, n);
        let mut it = vals.iter().cycle();
        for r in 0..n {
            w[(r, r)] = Complex::new(*it.next().unwrap(), 0.0);
            for c in (r + 1)..n {
                let z = Complex::new(*it.next().unwrap(), *it.next().unwrap());
                w[(r, c)] = z;
                w[(c, r)] = z.conj();
            }
        }
        w
    }

    proptest! {
        #[test]
        fn steering_norm_is_antenna_count(x in -300.0..300.0f64, y in -300.0..300.0f64, m in 2usize..12) {
            let ctx = SteeringContext::new([x, y], [0.0, 0.0], geom(m));
            let n2: f64 = steering_vector(&ctx).iter().map(|z| z.norm_sqr()).sum();
            prop_assert!((n2 - m as f64).abs() <= 1e-12 * m as f64);
        }

        #[test]
        fn expansion_matches_quadratic_form(
            vals in proptest::collection::vec(-1.0..1.0f64, 36),
            x in -400.0..400.0f64, y in -400.0..400.0f64,
        ) {
            let g = geom(6);
            let w = random_hermitian(&vals, 6);
            let ctx = SteeringContext::new([x, y], [0.0, 0.0], g);
            let direct = 1e-6 * quad_form(&w, &steering_vector(&ctx));
            let e = quadratic_form_expansion(&w, ctx.range_sq(), &g, 1e-3).unwrap();
            let scale = 1e-6 * w.iter().map(|z| z.norm()).sum::<f64>();
            prop_assert!((e.total() - direct).abs() <= 1e-12 * scale.max(1e-300) + 1e-9 * direct.abs());
        }

        #[test]
        fn psd_gain_nonnegative(vals in proptest::collection::vec(-1.0..1.0f64, 12), x in -200.0..200.0f64) {
            let v: Vec<Complex<f64>> = vals.chunks(2).map(|c| Complex::new(c[0], c[1])).collect();
            let w = outer(&v, 1.0) + DMatrix::identity(6, 6) * Complex::new(0.1, 0.0);
            let ctx = SteeringContext::new([x, 0.0], [0.0, 0.0], geom(6));
            let tr: f64 = (0..6).map(|i| w[(i, i)].re).sum();
            prop_assert!(beampattern_gain(&w, &steering_vector(&ctx)) >= -1e-9 * tr);
        }

        #[test]
        fn sinr_scale_invariant(c in 0.01..100.0f64, p1 in 0.001..1.0f64, p2 in 0.001..1.0f64) {
            let g = geom(4);
            let ctx = SteeringContext::new([50.0, 20.0], [0.0, 0.0], g);
            let h = comm_channel(&ctx, 1e-3);
            let a1 = steering_from_cos(&g, 0.3);
            let a2 = steering_from_cos(&g, 0.7);
            let covs = [outer(&a1, p1), outer(&a2, p2)];
            let base = sinr(&covs, &h, 0, 1e-12).unwrap();
            let scaled: Vec<_> = covs.iter().map(|w| w * Complex::new(c, 0.0)).collect();
            let after = sinr(&scaled, &h, 0, 1e-12 * c).unwrap();
            prop_assert!((base - after).abs() <= 1e-9 * base.abs().max(1e-300));
        }
    }

    #[test]
    fn f32_kernels_agree_with_f64() {
        let g32 = ArrayGeometry::<f32> {
            antennas: 6,
            altitude: 40.0,
            spacing: 0.05,
            wavelength: 0.1,
        };
        let ctx = SteeringContext::new([30.0f32, 0.0], [0.0, 0.0], g32);
        let a = steering_vector(&ctx);
        let n2: f32 = a.iter().map(|z| z.norm_sqr()).sum();
        assert!((n2 - 6.0).abs() < 1e-5);
        assert!((ctx.cos_theta() - 0.8).abs() < 1e-6);
    }
}
