//! Complex Hermitian matrix variables over real scalar unknowns.
//!
//! An `n × n` Hermitian variable owns `n²` consecutive reals laid out as
//! the diagonal, then the real parts of the strict upper triangle (row-major),
//! then the imaginary parts in the same order.

use std::ops::{Add, Sub};

use nalgebra::DMatrix;
use num_complex::Complex;

use super::{AffineExpr, ConicError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HermitianVar {
    n: usize,
    start: usize,
}

impl HermitianVar {
    pub(crate) fn new(n: usize, start: usize) -> Self {
        Self { n, start }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn upper_index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < self.n);
        // Position of (i, j) among the row-major strict upper triangle.
        i * self.n - i * (i + 1) / 2 + (j - i - 1)
    }

    fn n_upper(&self) -> usize {
        self.n * (self.n - 1) / 2
    }

    pub fn diag(&self, i: usize) -> Var {
        Var(self.start + i)
    }

    pub fn re_upper(&self, i: usize, j: usize) -> Var {
        Var(self.start + self.n + self.upper_index(i, j))
    }

    pub fn im_upper(&self, i: usize, j: usize) -> Var {
        Var(self.start + self.n + self.n_upper() + self.upper_index(i, j))
    }

    /// `(Re W_ij, Im W_ij)` as affine expressions.
    pub fn entry(&self, i: usize, j: usize) -> (AffineExpr, AffineExpr) {
        use std::cmp::Ordering::*;
        match i.cmp(&j) {
            Equal => (AffineExpr::var(self.diag(i)), AffineExpr::zero()),
            Less => (
                AffineExpr::var(self.re_upper(i, j)),
                AffineExpr::var(self.im_upper(i, j)),
            ),
            Greater => (
                AffineExpr::var(self.re_upper(j, i)),
                AffineExpr::term(self.im_upper(j, i), -1.0),
            ),
        }
    }

    pub fn expr(&self) -> HermitianExpr {
        let n = self.n;
        let mut re = vec![AffineExpr::zero(); n * n];
        let mut im = vec![AffineExpr::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                let (r, m) = self.entry(i, j);
                re[i * n + j] = r;
                im[i * n + j] = m;
            }
        }
        HermitianExpr { n, re, im }
    }

    pub fn trace(&self) -> AffineExpr {
        let mut e = AffineExpr::zero();
        for i in 0..self.n {
            e.add_term(self.diag(i), 1.0);
        }
        e
    }

    /// `Re Tr(W C)` for any complex `C`.
    pub fn inner_real(&self, c: &DMatrix<Complex<f64>>) -> AffineExpr {
        assert_eq!(c.nrows(), self.n);
        assert_eq!(c.ncols(), self.n);
        let mut e = AffineExpr::zero();
        for i in 0..self.n {
            e.add_term(self.diag(i), c[(i, i)].re);
            for j in (i + 1)..self.n {
                // W_ij C_ji + W_ji C_ij with W_ji = conj(W_ij).
                let (cij, cji) = (c[(i, j)], c[(j, i)]);
                e.add_term(self.re_upper(i, j), cji.re + cij.re);
                e.add_term(self.im_upper(i, j), cij.im - cji.im);
            }
        }
        e
    }

    /// `aᴴ W a`.
    pub fn quad_form(&self, a: &[Complex<f64>]) -> AffineExpr {
        let n = self.n;
        assert_eq!(a.len(), n);
        let c = DMatrix::from_fn(n, n, |i, j| a[i] * a[j].conj());
        self.inner_real(&c)
    }

    /// Numeric value at `x`.
    pub fn value(&self, x: &[f64]) -> DMatrix<Complex<f64>> {
        let n = self.n;
        let mut m = DMatrix::from_element(n, n, Complex::new(0.0, 0.0));
        for i in 0..n {
            m[(i, i)] = Complex::new(x[self.diag(i).0], 0.0);
            for j in (i + 1)..n {
                let z = Complex::new(x[self.re_upper(i, j).0], x[self.im_upper(i, j).0]);
                m[(i, j)] = z;
                m[(j, i)] = z.conj();
            }
        }
        m
    }

    /// Variables holding this block, in storage order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (self.start..self.start + self.n * self.n).map(Var)
    }
}

/// Hermitian matrix whose entries are affine in the decision variables.
/// `re` and `im` are dense row-major `n × n` arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianExpr {
    n: usize,
    re: Vec<AffineExpr>,
    im: Vec<AffineExpr>,
}

impl HermitianExpr {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            re: vec![AffineExpr::zero(); n * n],
            im: vec![AffineExpr::zero(); n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut e = Self::zeros(n);
        for i in 0..n {
            e.re[i * n + i] = AffineExpr::constant(1.0);
        }
        e
    }

    /// Constant matrix; only the Hermitian part of `c` is kept.
    pub fn constant(c: &DMatrix<Complex<f64>>) -> Self {
        let n = c.nrows();
        let mut e = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                let h = (c[(i, j)] + c[(j, i)].conj()) * 0.5;
                e.re[i * n + j] = AffineExpr::constant(h.re);
                e.im[i * n + j] = AffineExpr::constant(h.im);
            }
        }
        e
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn re(&self, i: usize, j: usize) -> &AffineExpr {
        &self.re[i * self.n + j]
    }

    pub fn im(&self, i: usize, j: usize) -> &AffineExpr {
        &self.im[i * self.n + j]
    }

    /// `self += s·other`.
    pub fn add_scaled(&mut self, other: &HermitianExpr, s: f64) -> &mut Self {
        assert_eq!(self.n, other.n);
        for (a, b) in self.re.iter_mut().zip(&other.re) {
            a.add_expr(b, s);
        }
        for (a, b) in self.im.iter_mut().zip(&other.im) {
            a.add_expr(b, s);
        }
        self
    }

    /// `self += v·C` for a constant Hermitian `C` and scalar expression `v`.
    pub fn add_scaled_constant(&mut self, c: &DMatrix<Complex<f64>>, v: &AffineExpr) -> &mut Self {
        let n = self.n;
        for i in 0..n {
            for j in 0..n {
                let z = c[(i, j)];
                self.re[i * n + j].add_expr(v, z.re);
                self.im[i * n + j].add_expr(v, z.im);
            }
        }
        self
    }

    pub fn trace(&self) -> AffineExpr {
        AffineExpr::sum((0..self.n).map(|i| &self.re[i * self.n + i]))
    }

    /// Rows of the real symmetric embedding `[[Re, −Im], [Im, Re]]`, upper
    /// triangle column by column, for a [`super::Cone::Psd`] constraint.
    pub fn psd_rows(&self) -> Vec<AffineExpr> {
        let n = self.n;
        let big = 2 * n;
        let mut rows = Vec::with_capacity(big * (big + 1) / 2);
        for j in 0..big {
            for i in 0..=j {
                let e = match (i < n, j < n) {
                    (true, true) => self.re(i, j).clone(),
                    (true, false) => self.im(i, j - n).scaled(-1.0),
                    (false, true) => self.im(i - n, j).clone(),
                    (false, false) => self.re(i - n, j - n).clone(),
                };
                rows.push(e);
            }
        }
        rows
    }

    /// Real vector whose Euclidean norm equals the Frobenius norm:
    /// the diagonal, then `√2·Re` and `√2·Im` of the strict upper triangle.
    pub fn frobenius_rows(&self) -> Vec<AffineExpr> {
        let n = self.n;
        let s2 = std::f64::consts::SQRT_2;
        let mut rows: Vec<AffineExpr> = (0..n).map(|i| self.re(i, i).clone()).collect();
        for i in 0..n {
            for j in (i + 1)..n {
                rows.push(self.re(i, j).scaled(s2));
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                rows.push(self.im(i, j).scaled(s2));
            }
        }
        rows
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<Complex<f64>> {
        let n = self.n;
        DMatrix::from_fn(n, n, |i, j| {
            Complex::new(self.re(i, j).eval(x), self.im(i, j).eval(x))
        })
    }
}

impl Add for HermitianExpr {
    type Output = HermitianExpr;
    fn add(mut self, rhs: HermitianExpr) -> HermitianExpr {
        self.add_scaled(&rhs, 1.0);
        self
    }
}

impl Sub for HermitianExpr {
    type Output = HermitianExpr;
    fn sub(mut self, rhs: HermitianExpr) -> HermitianExpr {
        self.add_scaled(&rhs, -1.0);
        self
    }
}

fn hermitian_deviation(w: &DMatrix<Complex<f64>>) -> f64 {
    let n = w.nrows();
    let mut dev = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            dev = dev.max((w[(i, j)] - w[(j, i)].conj()).norm());
        }
    }
    dev
}

/// Real symmetric `2n × 2n` embedding `[[Re W, −Im W], [Im W, Re W]]`.
/// Its eigenvalues are those of `W`, each repeated twice.
pub fn hermitian_embed(w: &DMatrix<Complex<f64>>) -> Result<DMatrix<f64>, ConicError> {
    let n = w.nrows();
    if w.ncols() != n {
        return Err(ConicError::NotHermitian {
            deviation: f64::INFINITY,
        });
    }
    let scale = w.iter().map(|z| z.norm()).fold(1.0, f64::max);
    let deviation = hermitian_deviation(w);
    if deviation > 1e-10 * scale {
        return Err(ConicError::NotHermitian { deviation });
    }
    Ok(DMatrix::from_fn(2 * n, 2 * n, |i, j| {
        match (i < n, j < n) {
            (true, true) => w[(i, j)].re,
            (true, false) => -w[(i, j - n)].im,
            (false, true) => w[(i - n, j)].im,
            (false, false) => w[(i - n, j - n)].re,
        }
    }))
}

/// Result of [`extract_hermitian`].
#[derive(Debug, Clone, PartialEq)]
pub struct Extracted {
    pub matrix: DMatrix<Complex<f64>>,
    /// Largest departure from the `[[A, −B], [B, A]]` structure.
    pub structure_deviation: f64,
    /// `structure_deviation` is within the requested tolerance.
    pub within_tolerance: bool,
}

/// Inverse of [`hermitian_embed`] for a block `[[A, B], [C, D]]`:
/// `Re Z = ½(A + D)`, `Im Z = ½(C − B)`, then Hermitian-symmetrized.
/// Structure violations beyond `tol` (relative to the largest entry) are
/// reported in the result and logged; only a non-square or odd-sized block
/// is an error.
pub fn extract_hermitian(e: &DMatrix<f64>, tol: f64) -> Result<Extracted, ConicError> {
    let big = e.nrows();
    if !big.is_multiple_of(2) || e.ncols() != big {
        return Err(ConicError::EmbeddingStructure {
            deviation: f64::INFINITY,
        });
    }
    let n = big / 2;
    let scale = e.iter().map(|v| v.abs()).fold(1.0, f64::max);
    let mut deviation = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            deviation = deviation
                .max((e[(i, j)] - e[(i + n, j + n)]).abs())
                .max((e[(i, j + n)] + e[(i + n, j)]).abs())
                .max((e[(i, j)] - e[(j, i)]).abs())
                .max((e[(i + n, j)] + e[(j + n, i)]).abs());
        }
    }
    let within_tolerance = deviation <= tol * scale;
    if !within_tolerance {
        log::warn!("embedded block deviates from Hermitian structure by {deviation:e}");
    }
    let raw = DMatrix::from_fn(n, n, |i, j| {
        let re = 0.5 * (e[(i, j)] + e[(i + n, j + n)]);
        let im = 0.5 * (e[(i + n, j)] - e[(i, j + n)]);
        Complex::new(re, im)
    });
    let matrix = (&raw + raw.adjoint()) * Complex::new(0.5, 0.0);
    Ok(Extracted {
        matrix,
        structure_deviation: deviation,
        within_tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::ConicProgram;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn random_hermitian(n: usize, seed: &[f64]) -> DMatrix<Complex<f64>> {
        let g = DMatrix::from_fn(n, n, |i, j| {
            Complex::new(seed[(i * n + j) % seed.len()], seed[(i + 3 * j + 1) % seed.len()])
        });
        &g + g.adjoint()
    }

    #[test]
    fn layout_covers_all_reals_once() {
        let mut p = ConicProgram::new();
        let _pad = p.scalar("pad");
        let w = p.hermitian("W", 4);
        let mut seen: Vec<usize> = Vec::new();
        for i in 0..4 {
            seen.push(w.diag(i).0);
            for j in (i + 1)..4 {
                seen.push(w.re_upper(i, j).0);
                seen.push(w.im_upper(i, j).0);
            }
        }
        seen.sort();
        assert_eq!(seen, (1..17).collect::<Vec<_>>());
    }

    #[test]
    fn embed_rejects_non_hermitian() {
        let mut w = DMatrix::from_element(2, 2, Complex::new(1.0, 0.0));
        w[(0, 1)] = Complex::new(0.0, 1.0);
        assert!(hermitian_embed(&w).is_err());
    }

    #[test]
    fn extract_rejects_broken_structure() {
        let mut e = DMatrix::<f64>::identity(4, 4);
        e[(2, 2)] = 3.0;
        let x = extract_hermitian(&e, 1e-9).unwrap();
        assert!(!x.within_tolerance);
        assert_eq!(x.structure_deviation, 2.0);
        assert_eq!(x.matrix[(0, 0)].re, 2.0);
        assert_eq!(x.matrix[(1, 1)].re, 1.0);
        assert!(extract_hermitian(&DMatrix::<f64>::identity(3, 3), 1e-9).is_err());
    }

    #[test]
    fn identity_and_pauli_cases() {
        let i3 = DMatrix::from_element(3, 3, Complex::new(0.0, 0.0)) + DMatrix::identity(3, 3);
        assert_eq!(hermitian_embed(&i3).unwrap(), DMatrix::<f64>::identity(6, 6));
        let back = extract_hermitian(&DMatrix::<f64>::identity(6, 6), 1e-12).unwrap();
        assert!(back.within_tolerance);
        assert_eq!(back.matrix, i3);

        let mut pauli = DMatrix::from_element(2, 2, Complex::new(0.0, 0.0));
        pauli[(0, 1)] = Complex::new(0.0, -1.0);
        pauli[(1, 0)] = Complex::new(0.0, 1.0);
        let mut ev: Vec<f64> = hermitian_embed(&pauli).unwrap().symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        for (got, want) in ev.iter().zip([-1.0, -1.0, 1.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }

        // B = C = 0, A = D gives a real Z.
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let mut blk = DMatrix::<f64>::zeros(4, 4);
        blk.view_mut((0, 0), (2, 2)).copy_from(&a);
        blk.view_mut((2, 2), (2, 2)).copy_from(&a);
        let z = extract_hermitian(&blk, 1e-12).unwrap().matrix;
        assert!(z.iter().zip(a.iter()).all(|(z, a)| z.re == *a && z.im == 0.0));
    }

    proptest! {
        #[test]
        fn embedding_round_trip_and_spectrum(seed in prop::collection::vec(-1.0f64..1.0, 9)) {
            let w = random_hermitian(3, &seed);
            let e = hermitian_embed(&w).unwrap();
            let back = extract_hermitian(&e, 1e-12).unwrap().matrix;
            prop_assert!((&back - &w).iter().all(|z| z.norm() < 1e-14));
            let mut ew: Vec<f64> = w.clone().symmetric_eigenvalues().iter().copied().collect();
            let mut ee: Vec<f64> = e.symmetric_eigenvalues().iter().copied().collect();
            ew.sort_by(f64::total_cmp);
            ee.sort_by(f64::total_cmp);
            for (k, v) in ew.iter().enumerate() {
                prop_assert!((ee[2 * k] - v).abs() < 1e-10);
                prop_assert!((ee[2 * k + 1] - v).abs() < 1e-10);
            }
        }

        #[test]
        fn embedding_doubles_inner_products(
            xs in prop::collection::vec(-1.0f64..1.0, 16),
            ys in prop::collection::vec(-1.0f64..1.0, 16),
        ) {
            let x = random_hermitian(4, &xs);
            let y = random_hermitian(4, &ys);
            let ex = hermitian_embed(&x).unwrap();
            let ey = hermitian_embed(&y).unwrap();
            let real = ex.component_mul(&ey).sum();
            let complex = (x.adjoint() * &y).trace().re;
            prop_assert!((real - 2.0 * complex).abs() <= 1e-12 * (1.0 + complex.abs()));
            prop_assert!((ex.trace() - 2.0 * x.trace().re).abs() < 1e-12);
        }

        #[test]
        fn psd_stays_psd_under_embedding(seed in prop::collection::vec(-1.0f64..1.0, 9)) {
            let g = random_hermitian(3, &seed);
            let psd = &g * &g;
            let min = hermitian_embed(&psd).unwrap().symmetric_eigenvalues().min();
            prop_assert!(min >= -1e-9);
        }

        #[test]
        fn symbolic_forms_match_numeric(
            seed in prop::collection::vec(-1.0f64..1.0, 9),
            cseed in prop::collection::vec(-1.0f64..1.0, 9),
        ) {
            let mut p = ConicProgram::new();
            let w = p.hermitian("W", 3);
            let wn = random_hermitian(3, &seed);
            let mut x = vec![0.0; p.num_vars()];
            for i in 0..3 {
                x[w.diag(i).0] = wn[(i, i)].re;
                for j in (i + 1)..3 {
                    x[w.re_upper(i, j).0] = wn[(i, j)].re;
                    x[w.im_upper(i, j).0] = wn[(i, j)].im;
                }
            }
            prop_assert!((&w.value(&x) - &wn).iter().all(|z| z.norm() < 1e-15));
            // Arbitrary (non-Hermitian) C.
            let c = DMatrix::from_fn(3, 3, |i, j| Complex::new(cseed[i * 3 + j], cseed[(i + 2 * j) % 9]));
            let expect = (&wn * &c).trace().re;
            prop_assert!((w.inner_real(&c).eval(&x) - expect).abs() < 1e-12);
            let fro: f64 = w.expr().frobenius_rows().iter().map(|r| r.eval(&x).powi(2)).sum::<f64>().sqrt();
            prop_assert!((fro - wn.norm()).abs() < 1e-12);
            let rows = w.expr().psd_rows();
            let e = hermitian_embed(&wn).unwrap();
            let mut k = 0;
            for j in 0..6 {
                for i in 0..=j {
                    prop_assert!((rows[k].eval(&x) - e[(i, j)]).abs() < 1e-15);
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn quad_form_matches_direct() {
        let mut p = ConicProgram::new();
        let w = p.hermitian("W", 2);
        let mut x = vec![0.0; p.num_vars()];
        x[w.diag(0).0] = 2.0;
        x[w.diag(1).0] = 1.0;
        x[w.re_upper(0, 1).0] = 0.5;
        x[w.im_upper(0, 1).0] = -0.25;
        let a = [Complex::new(1.0, 0.0), Complex::new(0.0, 1.0)];
        let wn = w.value(&x);
        let av = nalgebra::DVector::from_column_slice(&a);
        let direct = (av.adjoint() * &wn * &av)[(0, 0)].re;
        assert_relative_eq!(w.quad_form(&a).eval(&x), direct, epsilon = 1e-14);
    }
}
