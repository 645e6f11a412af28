//! Complex vector and matrix primitives, random state sampling and the
//! quantum Fourier transform.
//!
//! Sign convention: the forward transform has elements
//! `F[k][j] = exp(-2πi·jk/d) / √d` and the inverse is its conjugate
//! transpose. Flipping the sign still gives a working reconstructor but
//! datasets produced under one convention are not readable under the other.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|Σ|c_k|² − 1|` for a state to count as normalized.
pub const NORM_TOL: f64 = 1e-12;

pub type TrialRng = ChaCha8Rng;

/// Deterministic generator for stream `stream` of a master seed. Streams of
/// the same seed are statistically independent.
pub fn split_rng(master: u64, stream: u64) -> TrialRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

/// One draw of a standard complex Gaussian, `E|z|² = 1`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

pub fn norm_sqr(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum()
}

/// `⟨a|b⟩`, conjugating the first argument.
pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Wire form shared by states and matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct ComplexArrayRepr {
    dim: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexArrayRepr {
    fn from_slice(dim: usize, v: &[Complex64]) -> Self {
        Self {
            dim,
            re: v.iter().map(|c| c.re).collect(),
            im: v.iter().map(|c| c.im).collect(),
        }
    }

    fn into_values(self, expected_len: usize) -> Result<Vec<Complex64>> {
        if self.re.len() != expected_len || self.im.len() != expected_len {
            return Err(Error::Malformed(format!(
                "field `re`/`im`: expected {} entries for dim {}, got {}/{}",
                expected_len,
                self.dim,
                self.re.len(),
                self.im.len()
            )));
        }
        Ok(self
            .re
            .into_iter()
            .zip(self.im)
            .map(|(re, im)| Complex64::new(re, im))
            .collect())
    }
}

// ── PureState ───────────────────────────────────────────────────────────────

/// A vector of `d` complex amplitudes in the computational basis.
///
/// States built by [`PureState::new`] or by sampling carry a `normalized`
/// flag; intermediate vectors (after a projection, or mid-reconstruction)
/// are created with [`PureState::unnormalized`].
#[derive(Debug, Clone, PartialEq)]
pub struct PureState {
    amplitudes: Vec<Complex64>,
    normalized: bool,
}

impl PureState {
    /// Wraps the amplitudes, marking the state normalized iff its norm is 1
    /// within [`NORM_TOL`].
    pub fn new(amplitudes: Vec<Complex64>) -> Result<Self> {
        if amplitudes.is_empty() {
            return Err(Error::InvalidDimension(0));
        }
        let normalized = (norm_sqr(&amplitudes) - 1.0).abs() < NORM_TOL;
        Ok(Self {
            amplitudes,
            normalized,
        })
    }

    pub fn unnormalized(amplitudes: Vec<Complex64>) -> Result<Self> {
        if amplitudes.is_empty() {
            return Err(Error::InvalidDimension(0));
        }
        Ok(Self {
            amplitudes,
            normalized: false,
        })
    }

    /// The computational basis state `|k⟩`.
    pub fn basis(dim: usize, k: usize) -> Result<Self> {
        if dim == 0 || k >= dim {
            return Err(Error::InvalidDimension(dim));
        }
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); dim];
        amplitudes[k] = Complex64::new(1.0, 0.0);
        Ok(Self {
            amplitudes,
            normalized: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn into_amplitudes(self) -> Vec<Complex64> {
        self.amplitudes
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm_sqr(&self) -> f64 {
        norm_sqr(&self.amplitudes)
    }

    /// Rescales to unit norm. Fails on the zero vector.
    pub fn normalize(mut self) -> Result<Self> {
        let n = self.norm_sqr().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroEstimate);
        }
        for c in &mut self.amplitudes {
            *c /= n;
        }
        self.normalized = true;
        Ok(self)
    }

    /// Multiplies every amplitude by `e^{iθ}`.
    pub fn with_global_phase(&self, theta: f64) -> Self {
        let p = Complex64::from_polar(1.0, theta);
        Self {
            amplitudes: self.amplitudes.iter().map(|c| c * p).collect(),
            normalized: self.normalized,
        }
    }
}

impl Serialize for PureState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ComplexArrayRepr::from_slice(self.dim(), &self.amplitudes).serialize(s)
    }
}

impl<'de> Deserialize<'de> for PureState {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = ComplexArrayRepr::deserialize(d)?;
        let dim = repr.dim;
        let amps = repr.into_values(dim).map_err(serde::de::Error::custom)?;
        PureState::new(amps).map_err(serde::de::Error::custom)
    }
}

// ── Dense complex matrices ──────────────────────────────────────────────────

/// Square complex matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    dim: usize,
    data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![Complex64::new(0.0, 0.0); dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_row_major(dim: usize, data: Vec<Complex64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension(0));
        }
        if data.len() != dim * dim {
            return Err(Error::Malformed(format!(
                "matrix of dim {} needs {} entries, got {}",
                dim,
                dim * dim,
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    /// `|v⟩⟨v|`
    pub fn outer(v: &[Complex64]) -> Self {
        let dim = v.len();
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                m.data[i * dim + j] = v[i] * v[j].conj();
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.dim + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: Complex64) {
        self.data[row * self.dim + col] = v;
    }

    pub fn row(&self, row: usize) -> &[Complex64] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn adjoint(&self) -> Self {
        let n = self.dim;
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.data[j * n + i] = self.data[i * n + j].conj();
            }
        }
        m
    }

    pub fn matmul(&self, other: &CMatrix) -> Self {
        let n = self.dim;
        let mut m = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let row = &other.data[k * n..(k + 1) * n];
                let out = &mut m.data[i * n..(i + 1) * n];
                for (o, b) in out.iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        m
    }

    pub fn mul_vec(&self, v: &[Complex64]) -> Vec<Complex64> {
        (0..self.dim)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|c| c * s).collect(),
        }
    }

    pub fn add(&self, other: &CMatrix) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    /// Largest elementwise modulus of `self − other`.
    pub fn max_abs_diff(&self, other: &CMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn hermiticity_error(&self) -> f64 {
        self.max_abs_diff(&self.adjoint())
    }
}

impl Serialize for CMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ComplexArrayRepr::from_slice(self.dim, &self.data).serialize(s)
    }
}

impl<'de> Deserialize<'de> for CMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = ComplexArrayRepr::deserialize(d)?;
        let dim = repr.dim;
        let data = repr
            .into_values(dim * dim)
            .map_err(serde::de::Error::custom)?;
        CMatrix::from_row_major(dim, data).map_err(serde::de::Error::custom)
    }
}

// ── DensityMatrix ───────────────────────────────────────────────────────────

/// Hermitian, unit-trace, positive semidefinite `d×d` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DensityMatrix(CMatrix);

impl DensityMatrix {
    /// Checks hermiticity and trace; positivity is the caller's contract.
    pub fn new(m: CMatrix) -> Result<Self> {
        let herm = m.hermiticity_error();
        if herm >= 1e-12 {
            return Err(Error::Malformed(format!("density matrix not Hermitian ({herm:e})")));
        }
        let tr = m.trace();
        if (tr.re - 1.0).abs() >= 1e-10 || tr.im.abs() >= 1e-10 {
            return Err(Error::Malformed(format!("density matrix trace {tr}")));
        }
        Ok(Self(m))
    }

    pub fn pure(state: &PureState) -> Result<Self> {
        if !state.is_normalized() {
            return Err(Error::NotNormalized(state.norm_sqr()));
        }
        Self::new(CMatrix::outer(state.amplitudes()))
    }

    /// `(1 − η)·a + η·b`
    pub fn mix(a: &DensityMatrix, b: &DensityMatrix, eta: f64) -> Result<Self> {
        if a.dim() != b.dim() {
            return Err(Error::DimensionMismatch {
                expected: a.dim(),
                found: b.dim(),
            });
        }
        Ok(Self(a.0.scale(1.0 - eta).add(&b.0.scale(eta))))
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    /// `Tr(ρ²)`
    pub fn purity(&self) -> f64 {
        // ρ Hermitian, so Tr(ρ²) = Σ |ρ_ij|².
        self.0.as_slice().iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.0.get(i, i).re).collect()
    }
}

// ── UnitaryOp ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitaryOp(CMatrix);

impl UnitaryOp {
    pub fn new(m: CMatrix) -> Result<Self> {
        let u = Self(m);
        let err = u.unitarity_error();
        if err >= 1e-12 {
            return Err(Error::Malformed(format!("matrix not unitary ({err:e})")));
        }
        Ok(u)
    }

    pub fn identity(dim: usize) -> Self {
        Self(CMatrix::identity(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.adjoint())
    }

    /// `‖U†U − I‖_max`
    pub fn unitarity_error(&self) -> f64 {
        self.0
            .adjoint()
            .matmul(&self.0)
            .max_abs_diff(&CMatrix::identity(self.dim()))
    }
}

/// The `d`-dimensional quantum Fourier transform,
/// `F[k][j] = exp(-2πi·jk/d)/√d`.
pub fn qft(d: usize) -> Result<UnitaryOp> {
    if d == 0 {
        return Err(Error::InvalidDimension(0));
    }
    let scale = 1.0 / (d as f64).sqrt();
    // Reduce jk mod d before taking the angle so large products stay exact.
    let roots: Vec<Complex64> = (0..d)
        .map(|m| Complex64::from_polar(scale, -2.0 * PI * m as f64 / d as f64))
        .collect();
    let mut m = CMatrix::zeros(d);
    for k in 0..d {
        for j in 0..d {
            m.set(k, j, roots[(j * k) % d]);
        }
    }
    Ok(UnitaryOp(m))
}

pub fn apply_unitary(u: &UnitaryOp, s: &PureState) -> Result<PureState> {
    if u.dim() != s.dim() {
        return Err(Error::DimensionMismatch {
            expected: u.dim(),
            found: s.dim(),
        });
    }
    let out = u.0.mul_vec(s.amplitudes());
    Ok(PureState {
        amplitudes: out,
        normalized: s.normalized,
    })
}

/// Haar-random pure state: independent complex Gaussians, normalized.
pub fn sample_haar_state<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<PureState> {
    if d == 0 {
        return Err(Error::InvalidDimension(0));
    }
    loop {
        let amps: Vec<Complex64> = (0..d).map(|_| complex_gaussian(rng)).collect();
        if norm_sqr(&amps) > 0.0 {
            return PureState::unnormalized(amps)?.normalize();
        }
    }
}

/// Hilbert–Schmidt random density matrix `GG†/Tr(GG†)` with `G` Ginibre.
pub fn sample_hs_density<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<DensityMatrix> {
    if d == 0 {
        return Err(Error::InvalidDimension(0));
    }
    let g = CMatrix::from_row_major(d, (0..d * d).map(|_| complex_gaussian(rng)).collect())?;
    let mut w = g.matmul(&g.adjoint());
    let tr = w.trace().re;
    w = w.scale(1.0 / tr);
    // Symmetrize away round-off so the Hermitian check is exact.
    for i in 0..d {
        w.set(i, i, Complex64::new(w.get(i, i).re, 0.0));
        for j in (i + 1)..d {
            let avg = (w.get(i, j) + w.get(j, i).conj()) * 0.5;
            w.set(i, j, avg);
            w.set(j, i, avg.conj());
        }
    }
    let tr = w.trace().re;
    DensityMatrix::new(w.scale(1.0 / tr))
}

/// `|⟨a|b⟩|²` for two normalized states.
pub fn fidelity(a: &PureState, b: &PureState) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    for s in [a, b] {
        if !s.is_normalized() {
            return Err(Error::NotNormalized(s.norm_sqr()));
        }
    }
    Ok(inner(a.amplitudes(), b.amplitudes()).norm_sqr().clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn qft_small_cases() {
        let f1 = qft(1).unwrap();
        assert!((f1.matrix().get(0, 0) - c(1.0, 0.0)).norm() < 1e-15);

        let f2 = qft(2).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let expect = [c(h, 0.0), c(h, 0.0), c(h, 0.0), c(-h, 0.0)];
        for (a, b) in f2.matrix().as_slice().iter().zip(expect) {
            assert!((a - b).norm() < 1e-15);
        }
        let plus = apply_unitary(&f2, &PureState::basis(2, 0).unwrap()).unwrap();
        assert!((plus.amplitudes()[0] - c(h, 0.0)).norm() < 1e-15);
        assert!((plus.amplitudes()[1] - c(h, 0.0)).norm() < 1e-15);
        let minus = apply_unitary(&f2, &PureState::basis(2, 1).unwrap()).unwrap();
        assert!((minus.amplitudes()[1] - c(-h, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn qft_d4_element_matches_dft_sum() {
        let f = qft(4).unwrap();
        // F_{13} = e^{-i3π/2}/2 = i/2
        assert!((f.matrix().get(1, 3) - c(0.0, 0.5)).norm() < 1e-15);
        // hand-written DFT of |3⟩, component 1
        let e3 = PureState::basis(4, 3).unwrap();
        let dft: Complex64 = (0..4)
            .map(|j| e3.amplitudes()[j] * Complex64::from_polar(0.5, -2.0 * PI * j as f64 / 4.0))
            .sum();
        assert!((f.matrix().get(1, 3) - dft).norm() < 1e-15);
    }

    #[test]
    fn qft_zero_dim_rejected() {
        assert_eq!(qft(0).unwrap_err(), Error::InvalidDimension(0));
    }

    #[test]
    fn apply_unitary_checks_dims() {
        let f = qft(3).unwrap();
        let s = PureState::basis(4, 0).unwrap();
        assert!(matches!(
            apply_unitary(&f, &s),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn identity_leaves_state_alone() {
        let mut rng = split_rng(3, 0);
        let s = sample_haar_state(6, &mut rng).unwrap();
        let out = apply_unitary(&UnitaryOp::identity(6), &s).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn qft_preserves_norm_d8() {
        let mut rng = split_rng(11, 0);
        let s = sample_haar_state(8, &mut rng).unwrap();
        let out = apply_unitary(&qft(8).unwrap(), &s).unwrap();
        assert!((out.norm_sqr() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn haar_deterministic_and_normalized() {
        let a = sample_haar_state(5, &mut split_rng(42, 0)).unwrap();
        let b = sample_haar_state(5, &mut split_rng(42, 0)).unwrap();
        assert_eq!(a, b);
        assert!(a.is_normalized());
        assert!((a.norm_sqr() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hs_density_dim1_is_one() {
        let rho = sample_hs_density(1, &mut split_rng(1, 0)).unwrap();
        assert!((rho.matrix().get(0, 0) - c(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn hs_density_invariants() {
        let mut rng = split_rng(5, 0);
        for d in [2, 3, 10] {
            let rho = sample_hs_density(d, &mut rng).unwrap();
            assert!(rho.matrix().hermiticity_error() < 1e-12);
            assert!((rho.matrix().trace() - c(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn fidelity_examples() {
        let e0 = PureState::basis(2, 0).unwrap();
        let e1 = PureState::basis(2, 1).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let plus = PureState::new(vec![c(h, 0.0), c(h, 0.0)]).unwrap();
        assert!((fidelity(&e0, &e0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(fidelity(&e0, &e1).unwrap(), 0.0);
        assert!((fidelity(&e0, &plus).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fidelity_rejects_bad_input() {
        let e0 = PureState::basis(2, 0).unwrap();
        let e3 = PureState::basis(3, 0).unwrap();
        assert!(matches!(
            fidelity(&e0, &e3),
            Err(Error::DimensionMismatch { .. })
        ));
        let raw = PureState::unnormalized(vec![c(2.0, 0.0), c(0.0, 0.0)]).unwrap();
        assert!(matches!(fidelity(&e0, &raw), Err(Error::NotNormalized(_))));
    }

    #[test]
    fn json_shape() {
        let s = PureState::new(vec![c(0.6, 0.0), c(0.0, 0.8)]).unwrap();
        let v = serde_json::to_value(&s).unwrap();
        assert_eq!(v, serde_json::json!({"dim": 2, "re": [0.6, 0.0], "im": [0.0, 0.8]}));
        let back: PureState = serde_json::from_value(v).unwrap();
        assert_eq!(back, s);

        let bad = serde_json::json!({"dim": 3, "re": [1.0], "im": [0.0]});
        assert!(serde_json::from_value::<PureState>(bad).is_err());
    }
}
