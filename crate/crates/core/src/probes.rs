//! Probe projectors and the families built from them.
//!
//! Qubit ordering: qubit 0 is the most significant bit of the basis index,
//! so for `N = 2` the index `i = 2·q0 + q1`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qcore::{CMatrix, PureState};

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Eigenstate label of a single-qubit Pauli operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PauliLabel {
    #[serde(rename = "0")]
    Zero,
    #[serde(rename = "1")]
    One,
    #[serde(rename = "+")]
    Plus,
    #[serde(rename = "-")]
    Minus,
    #[serde(rename = "R")]
    Right,
    #[serde(rename = "L")]
    Left,
}

impl PauliLabel {
    pub const ALL: [PauliLabel; 6] = [
        PauliLabel::Zero,
        PauliLabel::One,
        PauliLabel::Plus,
        PauliLabel::Minus,
        PauliLabel::Right,
        PauliLabel::Left,
    ];

    /// Single-qubit ket `(⟨0|ℓ⟩, ⟨1|ℓ⟩)`.
    pub fn ket(self) -> [Complex64; 2] {
        let h = FRAC_1_SQRT_2;
        let (a, b) = match self {
            PauliLabel::Zero => (Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)),
            PauliLabel::One => (Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)),
            PauliLabel::Plus => (Complex64::new(h, 0.0), Complex64::new(h, 0.0)),
            PauliLabel::Minus => (Complex64::new(h, 0.0), Complex64::new(-h, 0.0)),
            PauliLabel::Right => (Complex64::new(h, 0.0), Complex64::new(0.0, h)),
            PauliLabel::Left => (Complex64::new(h, 0.0), Complex64::new(0.0, -h)),
        };
        [a, b]
    }
}

impl fmt::Display for PauliLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PauliLabel::Zero => "0",
            PauliLabel::One => "1",
            PauliLabel::Plus => "+",
            PauliLabel::Minus => "-",
            PauliLabel::Right => "R",
            PauliLabel::Left => "L",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProbeKind {
    /// Passes the listed computational-basis indices.
    DiagonalSupport { support: Vec<usize> },
    /// `|ℓ⟩⟨ℓ|` on one qubit, identity on the others.
    SingleQubitPauli {
        num_qubits: usize,
        qubit: usize,
        label: PauliLabel,
    },
    ExplicitMatrix { matrix: CMatrix },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeProjector {
    dim: usize,
    rank: usize,
    kind: ProbeKind,
}

impl ProbeProjector {
    pub fn diagonal(dim: usize, support: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension(0));
        }
        let distinct: BTreeSet<usize> = support.iter().copied().collect();
        if distinct.len() != support.len() {
            return Err(Error::InvalidProbes(format!(
                "support {support:?} has repeated indices"
            )));
        }
        if let Some(&bad) = support.iter().find(|&&j| j >= dim) {
            return Err(Error::InvalidProbes(format!(
                "support index {bad} out of range for dim {dim}"
            )));
        }
        Ok(Self {
            dim,
            rank: support.len(),
            kind: ProbeKind::DiagonalSupport { support },
        })
    }

    pub fn pauli(num_qubits: usize, qubit: usize, label: PauliLabel) -> Result<Self> {
        if num_qubits == 0 || num_qubits > 30 {
            return Err(Error::InvalidProbes(format!(
                "unsupported qubit count {num_qubits}"
            )));
        }
        if qubit >= num_qubits {
            return Err(Error::InvalidProbes(format!(
                "qubit {qubit} out of range for {num_qubits} qubits"
            )));
        }
        Ok(Self {
            dim: 1 << num_qubits,
            rank: 1 << (num_qubits - 1),
            kind: ProbeKind::SingleQubitPauli {
                num_qubits,
                qubit,
                label,
            },
        })
    }

    /// Arbitrary projector given as a matrix; checked for hermiticity,
    /// idempotency and integer trace.
    pub fn explicit(matrix: CMatrix) -> Result<Self> {
        let tr = matrix.trace();
        let rank = tr.re.round();
        if (tr.re - rank).abs() >= 1e-10 || tr.im.abs() >= 1e-10 || rank < 0.0 {
            return Err(Error::InvalidProbes(format!(
                "projector trace {tr} is not a nonnegative integer"
            )));
        }
        let p = Self {
            dim: matrix.dim(),
            rank: rank as usize,
            kind: ProbeKind::ExplicitMatrix { matrix },
        };
        p.check()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn kind(&self) -> &ProbeKind {
        &self.kind
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.kind, ProbeKind::DiagonalSupport { .. })
    }

    /// The support for diagonal projectors, `None` otherwise.
    pub fn support(&self) -> Option<&[usize]> {
        match &self.kind {
            ProbeKind::DiagonalSupport { support } => Some(support),
            _ => None,
        }
    }

    /// `P·v` written into `out`.
    pub fn apply_into(&self, v: &[Complex64], out: &mut [Complex64]) {
        debug_assert_eq!(v.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        let zero = Complex64::new(0.0, 0.0);
        match &self.kind {
            ProbeKind::DiagonalSupport { support } => {
                out.fill(zero);
                for &j in support {
                    out[j] = v[j];
                }
            }
            ProbeKind::SingleQubitPauli {
                num_qubits,
                qubit,
                label,
            } => {
                let [k0, k1] = label.ket();
                let mask = 1usize << (num_qubits - 1 - qubit);
                for i0 in (0..self.dim).filter(|i| i & mask == 0) {
                    let i1 = i0 | mask;
                    let a = k0.conj() * v[i0] + k1.conj() * v[i1];
                    out[i0] = k0 * a;
                    out[i1] = k1 * a;
                }
            }
            ProbeKind::ExplicitMatrix { matrix } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = matrix.row(i).iter().zip(v).map(|(a, b)| a * b).sum();
                }
            }
        }
    }

    pub fn apply_vec(&self, v: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.dim];
        self.apply_into(v, &mut out);
        out
    }

    /// Dense `d×d` matrix of the projector.
    pub fn to_matrix(&self) -> CMatrix {
        match &self.kind {
            ProbeKind::ExplicitMatrix { matrix } => matrix.clone(),
            ProbeKind::DiagonalSupport { support } => {
                let mut m = CMatrix::zeros(self.dim);
                for &j in support {
                    m.set(j, j, Complex64::new(1.0, 0.0));
                }
                m
            }
            ProbeKind::SingleQubitPauli { .. } => {
                let mut m = CMatrix::zeros(self.dim);
                let mut e = vec![Complex64::new(0.0, 0.0); self.dim];
                for col in 0..self.dim {
                    e[col] = Complex64::new(1.0, 0.0);
                    let c = self.apply_vec(&e);
                    e[col] = Complex64::new(0.0, 0.0);
                    for (row, v) in c.into_iter().enumerate() {
                        m.set(row, col, v);
                    }
                }
                m
            }
        }
    }

    /// Idempotency, hermiticity and `Tr P == rank`.
    pub fn check(&self) -> Result<()> {
        let m = self.to_matrix();
        let herm = m.hermiticity_error();
        if herm >= 1e-12 {
            return Err(Error::InvalidProbes(format!("projector not Hermitian ({herm:e})")));
        }
        let idem = m.matmul(&m).max_abs_diff(&m);
        if idem >= 1e-12 {
            return Err(Error::InvalidProbes(format!("projector not idempotent ({idem:e})")));
        }
        let tr = m.trace();
        if (tr.re - self.rank as f64).abs() >= 1e-10 || tr.im.abs() >= 1e-10 {
            return Err(Error::InvalidProbes(format!(
                "trace {tr} differs from rank {}",
                self.rank
            )));
        }
        Ok(())
    }

    /// Basis indices `k` with `⟨k|P|k⟩ > 0`.
    pub fn addressed_indices(&self) -> Vec<usize> {
        match &self.kind {
            ProbeKind::DiagonalSupport { support } => support.clone(),
            ProbeKind::SingleQubitPauli {
                num_qubits,
                qubit,
                label,
            } => {
                let [k0, k1] = label.ket();
                let mask = 1usize << (num_qubits - 1 - qubit);
                (0..self.dim)
                    .filter(|i| {
                        let amp = if i & mask == 0 { k0 } else { k1 };
                        amp.norm_sqr() > 1e-12
                    })
                    .collect()
            }
            ProbeKind::ExplicitMatrix { matrix } => (0..self.dim)
                .filter(|&k| matrix.get(k, k).re > 1e-12)
                .collect(),
        }
    }
}

/// The probe projection `P|s⟩`; the result is not normalized.
pub fn apply_projector(p: &ProbeProjector, s: &PureState) -> Result<PureState> {
    if p.dim() != s.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            found: s.dim(),
        });
    }
    PureState::unnormalized(p.apply_vec(s.amplitudes()))
}

/// `Tr(P₁P₂)/r`. For unequal ranks the larger rank is the normalizer.
pub fn overlap(p1: &ProbeProjector, p2: &ProbeProjector) -> Result<f64> {
    if p1.dim() != p2.dim() {
        return Err(Error::DimensionMismatch {
            expected: p1.dim(),
            found: p2.dim(),
        });
    }
    let r = p1.rank().max(p2.rank());
    if r == 0 {
        return Ok(0.0);
    }
    let tr = match (p1.support(), p2.support()) {
        (Some(a), Some(b)) => {
            let a: BTreeSet<_> = a.iter().collect();
            b.iter().filter(|j| a.contains(j)).count() as f64
        }
        _ => {
            let a = p1.to_matrix();
            let b = p2.to_matrix();
            let n = a.dim();
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    acc += a.get(i, j) * b.get(j, i);
                }
            }
            acc.re
        }
    };
    Ok(tr / r as f64)
}

// ── Probe sets ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyTag {
    Four,
    Cyclic,
    Multiqubit,
    Custom,
    Adaptive,
}

impl fmt::Display for FamilyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FamilyTag::Four => "four",
            FamilyTag::Cyclic => "cyclic",
            FamilyTag::Multiqubit => "multiqubit",
            FamilyTag::Custom => "custom",
            FamilyTag::Adaptive => "adaptive",
        };
        f.write_str(s)
    }
}

impl FromStr for FamilyTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "four" => Ok(FamilyTag::Four),
            "cyclic" => Ok(FamilyTag::Cyclic),
            "multiqubit" => Ok(FamilyTag::Multiqubit),
            "custom" => Ok(FamilyTag::Custom),
            "adaptive" => Ok(FamilyTag::Adaptive),
            other => Err(Error::InvalidConfig(format!("unknown family `{other}`"))),
        }
    }
}

/// Coverage or overlap condition that a probe set fails.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeWarning {
    Uncovered(Vec<usize>),
    /// Projectors with no partially overlapping partner.
    NoPartialOverlap(Vec<usize>),
}

impl fmt::Display for ProbeWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbeWarning::Uncovered(ix) => write!(f, "basis indices never addressed: {ix:?}"),
            ProbeWarning::NoPartialOverlap(ix) => {
                write!(f, "projectors without a partially overlapping partner: {ix:?}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    dim: usize,
    family: FamilyTag,
    projectors: Vec<ProbeProjector>,
}

impl ProbeSet {
    pub fn new(dim: usize, family: FamilyTag, projectors: Vec<ProbeProjector>) -> Result<Self> {
        if projectors.is_empty() {
            return Err(Error::InvalidProbes("empty probe set".into()));
        }
        if let Some(p) = projectors.iter().find(|p| p.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: p.dim(),
            });
        }
        Ok(Self {
            dim,
            family,
            projectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn family(&self) -> FamilyTag {
        self.family
    }

    pub fn projectors(&self) -> &[ProbeProjector] {
        &self.projectors
    }

    pub fn len(&self) -> usize {
        self.projectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projectors.is_empty()
    }

    /// The common rank, if all projectors share one.
    pub fn uniform_rank(&self) -> Option<usize> {
        let r = self.projectors[0].rank();
        self.projectors.iter().all(|p| p.rank() == r).then_some(r)
    }

    pub fn uncovered(&self) -> Vec<usize> {
        let mut hit = vec![false; self.dim];
        for p in &self.projectors {
            for k in p.addressed_indices() {
                hit[k] = true;
            }
        }
        (0..self.dim).filter(|&k| !hit[k]).collect()
    }

    /// Indices of projectors lacking a partner with `0 < 𝒪 < 1`.
    pub fn isolated(&self) -> Vec<usize> {
        let n = self.projectors.len();
        let mut partnered = vec![false; n];
        for a in 0..n {
            for b in (a + 1)..n {
                let o = overlap(&self.projectors[a], &self.projectors[b]).unwrap_or(0.0);
                if o > 1e-12 && o < 1.0 - 1e-12 {
                    partnered[a] = true;
                    partnered[b] = true;
                }
            }
        }
        (0..n).filter(|&i| !partnered[i]).collect()
    }

    /// Coverage and overlap diagnostics; empty for a well-formed set.
    pub fn warnings(&self) -> Vec<ProbeWarning> {
        let mut w = Vec::new();
        let uncovered = self.uncovered();
        if !uncovered.is_empty() {
            w.push(ProbeWarning::Uncovered(uncovered));
        }
        let isolated = self.isolated();
        if !isolated.is_empty() {
            w.push(ProbeWarning::NoPartialOverlap(isolated));
        }
        w
    }

    /// Runs [`ProbeProjector::check`] on every member.
    pub fn check_projectors(&self) -> Result<()> {
        self.projectors.iter().try_for_each(ProbeProjector::check)
    }
}

fn check_rank(d: usize, r: usize) -> Result<()> {
    if d < 3 || r <= 1 || r >= d {
        return Err(Error::RankOutOfRange { rank: r, dim: d });
    }
    Ok(())
}

fn window(d: usize, start: usize, r: usize) -> Vec<usize> {
    (0..r).map(|j| (j + start) % d).collect()
}

/// Default rank `⌊d/2⌋`.
pub fn default_rank(d: usize) -> usize {
    d / 2
}

/// Skip vector `(0, ⌈(d−r−2)/3⌉, 2⌈(d−r−2)/3⌉, ⌈d/2⌉)` of the four-probe
/// family.
pub fn four_skips(d: usize, r: usize) -> [usize; 4] {
    let step = (d as i64 - r as i64 - 2).max(0) as usize;
    let s = step.div_ceil(3);
    [0, s, 2 * s, d.div_ceil(2)]
}

/// Four contiguous windows of rank `r`, roughly equally spaced.
pub fn family_four(d: usize, r: usize) -> Result<ProbeSet> {
    check_rank(d, r)?;
    let projectors = four_skips(d, r)
        .iter()
        .map(|&s| ProbeProjector::diagonal(d, window(d, s % d, r)))
        .collect::<Result<_>>()?;
    ProbeSet::new(d, FamilyTag::Four, projectors)
}

/// `d` windows of rank `r`, one starting at every index.
pub fn family_cyclic(d: usize, r: usize) -> Result<ProbeSet> {
    check_rank(d, r)?;
    let projectors = (0..d)
        .map(|s| ProbeProjector::diagonal(d, window(d, s, r)))
        .collect::<Result<_>>()?;
    ProbeSet::new(d, FamilyTag::Cyclic, projectors)
}

/// `6N` single-qubit Pauli-eigenstate projectors on `N` qubits, ordered by
/// qubit then label `0, 1, +, −, R, L`.
pub fn family_multiqubit(num_qubits: usize) -> Result<ProbeSet> {
    if num_qubits < 2 {
        return Err(Error::RankOutOfRange {
            rank: 1usize << num_qubits.saturating_sub(1),
            dim: 1 << num_qubits,
        });
    }
    let mut projectors = Vec::with_capacity(6 * num_qubits);
    for q in 0..num_qubits {
        for label in PauliLabel::ALL {
            projectors.push(ProbeProjector::pauli(num_qubits, q, label)?);
        }
    }
    ProbeSet::new(1 << num_qubits, FamilyTag::Multiqubit, projectors)
}

/// Number of qubits `N` with `d = 2^N`, if any.
pub fn qubit_count(d: usize) -> Option<usize> {
    (d.is_power_of_two() && d > 1).then(|| d.trailing_zeros() as usize)
}

/// One rank-`r` window per skip. Coverage and overlap are reported through
/// [`ProbeSet::warnings`] rather than rejected.
pub fn family_custom(d: usize, skips: &[usize], r: usize) -> Result<ProbeSet> {
    if skips.is_empty() {
        return Err(Error::InvalidProbes("empty skip list".into()));
    }
    if d == 0 {
        return Err(Error::InvalidDimension(0));
    }
    if r == 0 || r > d {
        return Err(Error::RankOutOfRange { rank: r, dim: d });
    }
    if let Some(&s) = skips.iter().find(|&&s| s >= d) {
        return Err(Error::InvalidProbes(format!("skip {s} must be < {d}")));
    }
    let projectors = skips
        .iter()
        .map(|&s| ProbeProjector::diagonal(d, window(d, s, r)))
        .collect::<Result<_>>()?;
    ProbeSet::new(d, FamilyTag::Custom, projectors)
}

/// Rank used by [`adaptive_for_support`]: `max(⌊d/2⌋+1, g+1)` where `g` is
/// the largest cyclic gap between consecutive support indices, capped at
/// `d − 1`.
pub fn adaptive_rank(d: usize, support: &BTreeSet<usize>) -> Result<usize> {
    if support.is_empty() {
        return Err(Error::InvalidProbes("empty support".into()));
    }
    if let Some(&bad) = support.iter().find(|&&k| k >= d) {
        return Err(Error::InvalidProbes(format!(
            "support index {bad} out of range for dim {d}"
        )));
    }
    let idx: Vec<usize> = support.iter().copied().collect();
    let max_gap = if idx.len() == 1 {
        0
    } else {
        let wrap = idx[0] + d - idx[idx.len() - 1];
        idx.windows(2).map(|w| w[1] - w[0]).fold(wrap, usize::max)
    };
    Ok((d / 2 + 1).max(max_gap + 1).min(d - 1))
}

/// Cyclic family whose rank guarantees neighbouring nonzero components of a
/// sparse state are addressed together.
pub fn adaptive_for_support(d: usize, support: &BTreeSet<usize>) -> Result<ProbeSet> {
    let r = adaptive_rank(d, support)?;
    let mut set = family_cyclic(d, r)?;
    set.family = FamilyTag::Adaptive;
    Ok(set)
}

// ── JSON ────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProjectorRepr {
    kind: String,
    rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    support: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    qubit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<PauliLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    matrix: Option<CMatrix>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProbeSetRepr {
    dim: usize,
    family: FamilyTag,
    projectors: Vec<ProjectorRepr>,
}

impl ProjectorRepr {
    fn from_projector(p: &ProbeProjector) -> Self {
        let mut repr = ProjectorRepr {
            kind: String::new(),
            rank: p.rank,
            support: None,
            qubit: None,
            label: None,
            matrix: None,
        };
        match &p.kind {
            ProbeKind::DiagonalSupport { support } => {
                repr.kind = "diagonal-support".into();
                repr.support = Some(support.clone());
            }
            ProbeKind::SingleQubitPauli { qubit, label, .. } => {
                repr.kind = "single-qubit-pauli".into();
                repr.qubit = Some(*qubit);
                repr.label = Some(*label);
            }
            ProbeKind::ExplicitMatrix { matrix } => {
                repr.kind = "explicit-matrix".into();
                repr.matrix = Some(matrix.clone());
            }
        }
        repr
    }

    fn into_projector(self, dim: usize, index: usize) -> Result<ProbeProjector> {
        let field = |name: &str| Error::Malformed(format!("projectors[{index}].{name} missing"));
        let p = match self.kind.as_str() {
            "diagonal-support" => {
                ProbeProjector::diagonal(dim, self.support.ok_or_else(|| field("support"))?)?
            }
            "single-qubit-pauli" => {
                let n = qubit_count(dim).ok_or_else(|| {
                    Error::Malformed(format!("projectors[{index}]: dim {dim} is not 2^N"))
                })?;
                ProbeProjector::pauli(
                    n,
                    self.qubit.ok_or_else(|| field("qubit"))?,
                    self.label.ok_or_else(|| field("label"))?,
                )?
            }
            "explicit-matrix" => {
                let m = self.matrix.ok_or_else(|| field("matrix"))?;
                if m.dim() != dim {
                    return Err(Error::Malformed(format!(
                        "projectors[{index}].matrix has dim {}, expected {dim}",
                        m.dim()
                    )));
                }
                ProbeProjector::explicit(m)?
            }
            other => {
                return Err(Error::Malformed(format!(
                    "projectors[{index}].kind: unknown kind `{other}`"
                )))
            }
        };
        if p.rank != self.rank {
            return Err(Error::Malformed(format!(
                "projectors[{index}].rank: declared {}, actual {}",
                self.rank, p.rank
            )));
        }
        Ok(p)
    }
}

impl Serialize for ProbeSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ProbeSetRepr {
            dim: self.dim,
            family: self.family,
            projectors: self.projectors.iter().map(ProjectorRepr::from_projector).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ProbeSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = ProbeSetRepr::deserialize(d)?;
        let dim = repr.dim;
        let projectors = repr
            .projectors
            .into_iter()
            .enumerate()
            .map(|(i, p)| p.into_projector(dim, i))
            .collect::<Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        ProbeSet::new(dim, repr.family, projectors).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qcore::{sample_haar_state, split_rng};

    fn supports(set: &ProbeSet) -> Vec<Vec<usize>> {
        set.projectors()
            .iter()
            .map(|p| p.support().unwrap().to_vec())
            .collect()
    }

    #[test]
    fn four_family_d8_r4() {
        assert_eq!(four_skips(8, 4), [0, 1, 2, 4]);
        let set = family_four(8, 4).unwrap();
        assert_eq!(
            supports(&set),
            vec![
                vec![0, 1, 2, 3],
                vec![1, 2, 3, 4],
                vec![2, 3, 4, 5],
                vec![4, 5, 6, 7]
            ]
        );
        assert!(set.uncovered().is_empty());
    }

    #[test]
    fn four_family_d20_r10_skips() {
        assert_eq!(four_skips(20, 10), [0, 3, 6, 10]);
    }

    #[test]
    fn rank_out_of_range() {
        for (d, r) in [(8, 1), (8, 8), (8, 0), (8, 9)] {
            assert!(matches!(family_four(d, r), Err(Error::RankOutOfRange { .. })));
            assert!(matches!(family_cyclic(d, r), Err(Error::RankOutOfRange { .. })));
        }
    }

    #[test]
    fn cyclic_wraps() {
        let set = family_cyclic(5, 3).unwrap();
        assert_eq!(set.projectors()[3].support().unwrap(), &[3, 4, 0]);
        let set = family_cyclic(20, 10).unwrap();
        assert_eq!(set.len(), 20);
        assert!(set.projectors().iter().all(|p| p.rank() == 10));
    }

    #[test]
    fn cyclic_adjacent_overlap() {
        let set = family_cyclic(8, 4).unwrap();
        let p = set.projectors();
        assert_eq!(overlap(&p[0], &p[1]).unwrap(), 0.75);
        assert_eq!(overlap(&p[0], &p[0]).unwrap(), 1.0);
        assert_eq!(overlap(&p[0], &p[4]).unwrap(), 0.0);
    }

    #[test]
    fn multiqubit_n2() {
        let set = family_multiqubit(2).unwrap();
        assert_eq!(set.len(), 12);
        assert!(set.projectors().iter().all(|p| p.rank() == 2));
        set.check_projectors().unwrap();
        let plus0 = ProbeProjector::pauli(2, 0, PauliLabel::Plus).unwrap();
        let r0 = ProbeProjector::pauli(2, 0, PauliLabel::Right).unwrap();
        assert!((overlap(&plus0, &r0).unwrap() - 0.5).abs() < 1e-12);
        let z1 = ProbeProjector::pauli(2, 1, PauliLabel::Zero).unwrap();
        assert!((overlap(&plus0, &z1).unwrap() - 0.5).abs() < 1e-12);
        assert!(family_multiqubit(1).is_err());
    }

    #[test]
    fn pauli_plus_on_00() {
        let p = ProbeProjector::pauli(2, 0, PauliLabel::Plus).unwrap();
        let s = PureState::basis(4, 0).unwrap();
        let out = apply_projector(&p, &s).unwrap();
        // (|00⟩ + |10⟩)/2 with qubit 0 as the high bit
        let want = [0.5, 0.0, 0.5, 0.0];
        for (a, w) in out.amplitudes().iter().zip(want) {
            assert!((a - Complex64::new(w, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn custom_disjoint_warns() {
        let set = family_custom(20, &[0, 5, 10, 15], 5).unwrap();
        assert!(set.uncovered().is_empty());
        assert_eq!(
            set.warnings(),
            vec![ProbeWarning::NoPartialOverlap(vec![0, 1, 2, 3])]
        );
    }

    #[test]
    fn custom_all_skips_matches_cyclic() {
        let skips: Vec<usize> = (0..8).collect();
        let custom = family_custom(8, &skips, 4).unwrap();
        let cyclic = family_cyclic(8, 4).unwrap();
        assert_eq!(custom.projectors(), cyclic.projectors());
    }

    #[test]
    fn custom_single_skip_uncovered() {
        let set = family_custom(8, &[0], 4).unwrap();
        assert!(set.warnings().contains(&ProbeWarning::Uncovered(vec![4, 5, 6, 7])));
        assert!(family_custom(8, &[], 4).is_err());
        assert!(family_custom(8, &[8], 4).is_err());
    }

    #[test]
    fn adaptive_ranks() {
        let all: BTreeSet<usize> = (0..20).collect();
        assert_eq!(adaptive_rank(20, &all).unwrap(), 11);
        assert_eq!(adaptive_rank(20, &[0, 10].into()).unwrap(), 11);
        assert_eq!(adaptive_rank(9, &[0, 4, 8].into()).unwrap(), 5);
        assert!(adaptive_for_support(20, &[3, 25].into()).is_err());
        assert!(adaptive_for_support(20, &BTreeSet::new()).is_err());
        let set = adaptive_for_support(20, &[0, 10].into()).unwrap();
        assert_eq!(set.family(), FamilyTag::Adaptive);
        assert_eq!(set.uniform_rank(), Some(11));
    }

    #[test]
    fn diagonal_projection_and_idempotency() {
        let p = ProbeProjector::diagonal(4, vec![0, 1]).unwrap();
        let s = PureState::new(vec![Complex64::new(0.5, 0.0); 4]).unwrap();
        let once = apply_projector(&p, &s).unwrap();
        assert_eq!(&once.amplitudes()[2..], &[Complex64::new(0.0, 0.0); 2]);
        assert_eq!(once.amplitudes()[0], s.amplitudes()[0]);
        let twice = apply_projector(&p, &once).unwrap();
        assert_eq!(once, twice);

        let q = ProbeProjector::pauli(3, 1, PauliLabel::Left).unwrap();
        let s = sample_haar_state(8, &mut split_rng(2, 0)).unwrap();
        let a = apply_projector(&q, &s).unwrap();
        let b = apply_projector(&q, &a).unwrap();
        for (x, y) in a.amplitudes().iter().zip(b.amplitudes()) {
            assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn explicit_validation() {
        let ok = ProbeProjector::explicit(
            ProbeProjector::pauli(2, 1, PauliLabel::Minus).unwrap().to_matrix(),
        )
        .unwrap();
        assert_eq!(ok.rank(), 2);
        let mut bad = CMatrix::identity(3);
        bad.set(0, 1, Complex64::new(0.3, 0.0));
        assert!(ProbeProjector::explicit(bad).is_err());
    }

    #[test]
    fn probe_set_json() {
        let set = family_four(8, 4).unwrap();
        let v = serde_json::to_value(&set).unwrap();
        assert_eq!(v["family"], "four");
        assert_eq!(v["projectors"][1]["kind"], "diagonal-support");
        assert_eq!(v["projectors"][1]["support"], serde_json::json!([1, 2, 3, 4]));
        let back: ProbeSet = serde_json::from_value(v).unwrap();
        assert_eq!(back, set);

        let mq = family_multiqubit(2).unwrap();
        let v = serde_json::to_value(&mq).unwrap();
        assert_eq!(v["projectors"][4]["label"], "R");
        let back: ProbeSet = serde_json::from_value(v).unwrap();
        assert_eq!(back, mq);

        let bad = serde_json::json!({"dim": 4, "family": "custom",
            "projectors": [{"kind": "diagonal-support", "rank": 3, "support": [0, 1]}]});
        let err = serde_json::from_value::<ProbeSet>(bad).unwrap_err().to_string();
        assert!(err.contains("projectors[0].rank"), "{err}");
    }
}
