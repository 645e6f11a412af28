//! Ptychographic datasets: exact Fourier moduli of each probe projection,
//! or counts under depolarization and Poisson shot noise.
//!
//! Noisy datasets store `√(counts/λ)`, i.e. the overall flux constant is
//! set to `λ` and divided back out, so clean and noisy data share one scale.

use std::io::Write;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probes::ProbeSet;
use crate::qcore::{qft, sample_hs_density, CMatrix, DensityMatrix, PureState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Depolarization level η.
    pub eta: f64,
    /// Expected counts per unit probability.
    pub lambda: f64,
    pub depolarize: bool,
    pub poisson: bool,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            eta: 0.05,
            lambda: 1e3,
            depolarize: true,
            poisson: true,
        }
    }
}

impl NoiseModel {
    /// Both channels off.
    pub fn disabled() -> Self {
        Self {
            depolarize: false,
            poisson: false,
            ..Self::default()
        }
    }

    pub fn new(eta: f64, lambda: f64) -> Result<Self> {
        let m = Self {
            eta,
            lambda,
            ..Self::default()
        };
        m.validate()?;
        Ok(m)
    }

    pub fn is_disabled(&self) -> bool {
        !self.depolarize && !self.poisson
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidNoise(format!("eta {} outside [0, 1]", self.eta)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidNoise(format!("lambda {} must be > 0", self.lambda)));
        }
        Ok(())
    }

    fn effective_eta(&self) -> f64 {
        if self.depolarize {
            self.eta
        } else {
            0.0
        }
    }

    fn effective_lambda(&self) -> Option<f64> {
        self.poisson.then_some(self.lambda)
    }
}

/// `n` rows of `d` Fourier moduli, one row per probe projector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DatasetRepr", into = "DatasetRepr")]
pub struct PtychoDataset {
    pub dim: usize,
    pub moduli: Vec<Vec<f64>>,
    /// Flux constant absorbed into the moduli (provenance only).
    pub scale: f64,
    pub lambda: Option<f64>,
    pub eta: Option<f64>,
    pub probe_set: ProbeSet,
    pub seed: Option<u64>,
    pub run_config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct DatasetRepr {
    dim: usize,
    n: usize,
    lambda: Option<f64>,
    eta: Option<f64>,
    #[serde(default = "one")]
    scale: f64,
    probe_set: ProbeSet,
    moduli: Vec<Vec<f64>>,
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run_config: Option<serde_json::Value>,
}

fn one() -> f64 {
    1.0
}

impl TryFrom<DatasetRepr> for PtychoDataset {
    type Error = Error;
    fn try_from(r: DatasetRepr) -> Result<Self> {
        if r.moduli.len() != r.n {
            return Err(Error::Malformed(format!(
                "moduli: expected {} rows (n), got {}",
                r.n,
                r.moduli.len()
            )));
        }
        let ds = PtychoDataset {
            dim: r.dim,
            moduli: r.moduli,
            scale: r.scale,
            lambda: r.lambda,
            eta: r.eta,
            probe_set: r.probe_set,
            seed: r.seed,
            run_config: r.run_config,
        };
        ds.validate()?;
        Ok(ds)
    }
}

impl From<PtychoDataset> for DatasetRepr {
    fn from(d: PtychoDataset) -> Self {
        DatasetRepr {
            dim: d.dim,
            n: d.moduli.len(),
            lambda: d.lambda,
            eta: d.eta,
            scale: d.scale,
            probe_set: d.probe_set,
            moduli: d.moduli,
            seed: d.seed,
            run_config: d.run_config,
        }
    }
}

impl PtychoDataset {
    pub fn n(&self) -> usize {
        self.moduli.len()
    }

    /// Row-power ceiling `1 + 5/√λ` (or `1` plus round-off for exact data).
    pub fn row_power_limit(&self) -> f64 {
        match self.lambda {
            Some(l) => 1.0 + 5.0 / l.sqrt(),
            None => 1.0 + 1e-9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != self.probe_set.dim() {
            return Err(Error::Malformed(format!(
                "dim: {} but probe_set.dim is {}",
                self.dim,
                self.probe_set.dim()
            )));
        }
        if self.n() != self.probe_set.len() {
            return Err(Error::Malformed(format!(
                "n: {} rows but probe_set has {} projectors",
                self.n(),
                self.probe_set.len()
            )));
        }
        let limit = self.row_power_limit();
        for (l, row) in self.moduli.iter().enumerate() {
            if row.len() != self.dim {
                return Err(Error::Malformed(format!(
                    "moduli[{l}]: expected {} entries, got {}",
                    self.dim,
                    row.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::Malformed(format!("moduli[{l}]: invalid entry {v}")));
            }
            let power: f64 = row.iter().map(|m| m * m).sum();
            if power > limit {
                return Err(Error::Malformed(format!(
                    "moduli[{l}]: row power {power} exceeds {limit}"
                )));
            }
        }
        Ok(())
    }

    /// One CSV line per cell: `probe_index,fourier_index,modulus`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["probe_index", "fourier_index", "modulus"])?;
        for (l, row) in self.moduli.iter().enumerate() {
            for (k, m) in row.iter().enumerate() {
                out.write_record([l.to_string(), k.to_string(), format!("{m:e}")])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn check_dims(state: &PureState, probes: &ProbeSet) -> Result<()> {
    if state.dim() != probes.dim() {
        return Err(Error::DimensionMismatch {
            expected: probes.dim(),
            found: state.dim(),
        });
    }
    if !state.is_normalized() {
        return Err(Error::NotNormalized(state.norm_sqr()));
    }
    Ok(())
}

/// Exact moduli `|⟨k|F P_ℓ|ψ⟩|`.
pub fn measure_exact(state: &PureState, probes: &ProbeSet) -> Result<PtychoDataset> {
    check_dims(state, probes)?;
    let f = qft(state.dim())?;
    let moduli = probes
        .projectors()
        .iter()
        .map(|p| {
            let projected = p.apply_vec(state.amplitudes());
            f.matrix()
                .mul_vec(&projected)
                .iter()
                .map(|c| c.norm())
                .collect()
        })
        .collect();
    Ok(PtychoDataset {
        dim: state.dim(),
        moduli,
        scale: 1.0,
        lambda: None,
        eta: None,
        probe_set: probes.clone(),
        seed: None,
        run_config: None,
    })
}

/// Outcome probabilities `diag(F P_ℓ ρ P_ℓ F†)` for every probe.
pub fn outcome_probabilities(rho: &DensityMatrix, probes: &ProbeSet) -> Result<Vec<Vec<f64>>> {
    if rho.dim() != probes.dim() {
        return Err(Error::DimensionMismatch {
            expected: probes.dim(),
            found: rho.dim(),
        });
    }
    let d = rho.dim();
    let f = qft(d)?;
    let rm = rho.matrix();
    let mut out = Vec::with_capacity(probes.len());
    for p in probes.projectors() {
        let fp: CMatrix = f.matrix().matmul(&p.to_matrix());
        let row = (0..d)
            .map(|k| {
                let m = fp.row(k);
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..d {
                    if m[i] == Complex64::new(0.0, 0.0) {
                        continue;
                    }
                    let r = rm.row(i);
                    let inner: Complex64 = r.iter().zip(m).map(|(a, b)| a * b.conj()).sum();
                    acc += m[i] * inner;
                }
                acc.re.max(0.0)
            })
            .collect();
        out.push(row);
    }
    Ok(out)
}

/// Depolarized preparation `(1−η)|ψ⟩⟨ψ| + η ρ_rand` followed by Poisson
/// counting with mean `λ·p`. One `ρ_rand` is drawn per call.
pub fn measure_noisy<R: Rng + ?Sized>(
    state: &PureState,
    probes: &ProbeSet,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<PtychoDataset> {
    check_dims(state, probes)?;
    noise.validate()?;
    let rho = prepare_noisy_state(state, noise, rng)?;
    let probs = outcome_probabilities(&rho, probes)?;
    let lambda = noise.effective_lambda();
    let moduli = probs
        .iter()
        .map(|row| match lambda {
            Some(l) => row.iter().map(|&p| (poisson_count(l * p, rng) / l).sqrt()).collect(),
            None => row.iter().map(|p| p.sqrt()).collect(),
        })
        .collect();
    Ok(PtychoDataset {
        dim: state.dim(),
        moduli,
        scale: lambda.unwrap_or(1.0),
        lambda,
        eta: Some(noise.effective_eta()),
        probe_set: probes.clone(),
        seed: None,
        run_config: None,
    })
}

/// `(1−η)|ψ⟩⟨ψ| + η ρ_rand`; consumes no randomness when depolarization is
/// off.
pub fn prepare_noisy_state<R: Rng + ?Sized>(
    state: &PureState,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<DensityMatrix> {
    let pure = DensityMatrix::pure(state)?;
    if !noise.depolarize {
        return Ok(pure);
    }
    let rand = sample_hs_density(state.dim(), rng)?;
    DensityMatrix::mix(&pure, &rand, noise.eta)
}

/// One Poisson draw; a zero mean yields zero.
pub fn poisson_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    Poisson::new(mean).map(|p| p.sample(rng)).unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::{family_cyclic, family_four, FamilyTag, ProbeProjector};
    use crate::qcore::{sample_haar_state, split_rng};

    fn single_probe(d: usize, support: Vec<usize>) -> ProbeSet {
        ProbeSet::new(
            d,
            FamilyTag::Custom,
            vec![ProbeProjector::diagonal(d, support).unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn exact_d2_support0() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let s = PureState::new(vec![Complex64::new(h, 0.0); 2]).unwrap();
        let ds = measure_exact(&s, &single_probe(2, vec![0])).unwrap();
        assert!((ds.moduli[0][0] - 0.5).abs() < 1e-15);
        assert!((ds.moduli[0][1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exact_zero_row() {
        let s = PureState::basis(4, 0).unwrap();
        let ds = measure_exact(&s, &single_probe(4, vec![2, 3])).unwrap();
        assert!(ds.moduli[0].iter().all(|&m| m == 0.0));
    }

    #[test]
    fn exact_parseval() {
        let mut rng = split_rng(4, 0);
        let s = sample_haar_state(12, &mut rng).unwrap();
        let probes = family_four(12, 6).unwrap();
        let ds = measure_exact(&s, &probes).unwrap();
        for (row, p) in ds.moduli.iter().zip(probes.projectors()) {
            let power: f64 = row.iter().map(|m| m * m).sum();
            let norm = crate::qcore::norm_sqr(&p.apply_vec(s.amplitudes()));
            assert!((power - norm).abs() < 1e-12);
        }
    }

    #[test]
    fn noisy_disabled_equals_exact() {
        let mut rng = split_rng(8, 0);
        let s = sample_haar_state(10, &mut rng).unwrap();
        let probes = family_cyclic(10, 5).unwrap();
        let exact = measure_exact(&s, &probes).unwrap();
        let noisy = measure_noisy(&s, &probes, &NoiseModel::disabled(), &mut rng).unwrap();
        for (a, b) in exact.moduli.iter().flatten().zip(noisy.moduli.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn noisy_rejects_bad_lambda() {
        let s = PureState::basis(4, 0).unwrap();
        let probes = family_cyclic(4, 2).unwrap();
        let noise = NoiseModel {
            lambda: 0.0,
            ..NoiseModel::default()
        };
        assert!(matches!(
            measure_noisy(&s, &probes, &noise, &mut split_rng(0, 0)),
            Err(Error::InvalidNoise(_))
        ));
        assert!(NoiseModel::new(1.5, 10.0).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let s = PureState::basis(5, 0).unwrap();
        let probes = family_cyclic(4, 2).unwrap();
        assert!(matches!(
            measure_exact(&s, &probes),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dataset_json_and_csv() {
        let mut rng = split_rng(1, 0);
        let s = sample_haar_state(6, &mut rng).unwrap();
        let probes = family_cyclic(6, 3).unwrap();
        let mut ds = measure_noisy(&s, &probes, &NoiseModel::default(), &mut rng).unwrap();
        ds.seed = Some(1);
        let v = serde_json::to_value(&ds).unwrap();
        for key in ["dim", "n", "lambda", "eta", "probe_set", "moduli", "seed"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["n"], 6);
        let back: PtychoDataset = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(back, ds);

        let mut broken = v;
        broken["n"] = 5.into();
        let err = serde_json::from_value::<PtychoDataset>(broken).unwrap_err();
        assert!(err.to_string().contains("moduli"), "{err}");

        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 36);
        assert!(text.starts_with("probe_index,fourier_index,modulus\n"));
    }
}
