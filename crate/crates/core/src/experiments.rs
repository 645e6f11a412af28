//! Monte Carlo studies: blind reconstruction, β and rank sweeps, the
//! non-overlapping control, sparse states and noise calibration.
//!
//! Trial `i` at dimension `d` draws everything from
//! `split_rng(seed ^ mix(d), i)`, so every arm of a study sees the same
//! target state for a given `(d, i)` and results do not depend on worker
//! count or scheduling.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use num_complex::Complex64;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::{measure_exact, measure_noisy, poisson_count, prepare_noisy_state, NoiseModel};
use crate::pie::{reconstruct_from, PieConfig, CONVERGENCE_RULE};
use crate::probes::{
    adaptive_for_support, default_rank, family_custom, family_cyclic, family_four,
    family_multiqubit, qubit_count, FamilyTag, ProbeSet,
};
use crate::qcore::{complex_gaussian, fidelity, sample_haar_state, split_rng, PureState, TrialRng};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Success means `F > SUCCESS_FIDELITY`.
pub const SUCCESS_FIDELITY: f64 = 0.9;

pub const HIST_BINS: usize = 32;
pub const HIST_LO: f64 = 1e-8;
pub const HIST_HI: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    Blind,
    BetaSweep,
    RankSweep,
    NonOverlap,
    Sparse,
    NoiseCalibration,
}

impl StudyKind {
    pub const ALL: [StudyKind; 6] = [
        StudyKind::Blind,
        StudyKind::BetaSweep,
        StudyKind::RankSweep,
        StudyKind::NonOverlap,
        StudyKind::Sparse,
        StudyKind::NoiseCalibration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StudyKind::Blind => "blind",
            StudyKind::BetaSweep => "beta-sweep",
            StudyKind::RankSweep => "rank-sweep",
            StudyKind::NonOverlap => "non-overlap",
            StudyKind::Sparse => "sparse",
            StudyKind::NoiseCalibration => "noise-calibration",
        }
    }
}

impl fmt::Display for StudyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StudyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        StudyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown study kind `{s}`")))
    }
}

/// How to pick the rank of a windowed family when none is given. Even
/// dimensions always get `d/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RankPolicy {
    Floor,
    Ceil,
    /// Pilot run with `⌊d/2⌋` and `⌈d/2⌉`, keep the one with lower mean
    /// infidelity.
    #[default]
    Best,
}

impl FromStr for RankPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "floor" => Ok(RankPolicy::Floor),
            "ceil" => Ok(RankPolicy::Ceil),
            "best" => Ok(RankPolicy::Best),
            other => Err(Error::InvalidConfig(format!("unknown rank policy `{other}`"))),
        }
    }
}

/// Sparse-state sampler settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SparseSpec {
    /// Number of nonzero components; uniform in `2..=max(2, ⌊d/4⌋)` when
    /// unset.
    pub k: Option<usize>,
    /// Minimum cyclic distance between any two support indices.
    pub min_separation: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySpec {
    pub kind: StudyKind,
    pub dims: Vec<usize>,
    pub family: FamilyTag,
    /// Explicit rank for windowed families; overrides `rank_policy`.
    pub rank: Option<usize>,
    pub rank_policy: RankPolicy,
    /// Ranks for a rank sweep; `2..=d−2` when empty.
    pub ranks: Vec<usize>,
    pub betas: Vec<f64>,
    /// Skip vector of the non-overlapping control.
    pub skips: Vec<usize>,
    pub sparse: SparseSpec,
    pub trials: usize,
    pub noise: NoiseModel,
    pub cfg: PieConfig,
    pub seed: u64,
}

impl StudySpec {
    /// Default settings for one study kind.
    pub fn defaults(kind: StudyKind) -> Self {
        let cfg = PieConfig {
            keep_trace: false,
            ..PieConfig::default()
        };
        let base = StudySpec {
            kind,
            dims: vec![20],
            family: FamilyTag::Cyclic,
            rank: None,
            rank_policy: RankPolicy::Best,
            ranks: Vec::new(),
            betas: Vec::new(),
            skips: Vec::new(),
            sparse: SparseSpec::default(),
            trials: 200,
            noise: NoiseModel::default(),
            cfg,
            seed: 0,
        };
        match kind {
            StudyKind::Blind => StudySpec { trials: 500, ..base },
            StudyKind::BetaSweep => StudySpec {
                betas: vec![0.5, 1.0, 1.5, 2.0],
                trials: 100,
                noise: NoiseModel::disabled(),
                cfg: PieConfig { keep_trace: true, ..cfg },
                ..base
            },
            StudyKind::RankSweep => StudySpec {
                dims: vec![10, 15, 20],
                noise: NoiseModel::disabled(),
                ..base
            },
            StudyKind::NonOverlap => StudySpec {
                family: FamilyTag::Custom,
                rank: Some(5),
                skips: vec![0, 5, 10, 15],
                trials: 2000,
                noise: NoiseModel::disabled(),
                ..base
            },
            StudyKind::Sparse => StudySpec {
                noise: NoiseModel::disabled(),
                ..base
            },
            StudyKind::NoiseCalibration => StudySpec {
                trials: 10_000,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be ≥ 1".into()));
        }
        if self.dims.is_empty() {
            return Err(Error::InvalidConfig("no dimensions given".into()));
        }
        if let Some(&d) = self.dims.iter().find(|&&d| !(2..=128).contains(&d)) {
            return Err(Error::InvalidConfig(format!("dimension {d} outside 2..=128")));
        }
        self.noise.validate()?;
        self.cfg.validate()?;
        for &b in &self.betas {
            if !(b > 0.0 && b <= 2.0) {
                return Err(Error::InvalidConfig(format!("beta {b} must lie in (0, 2]")));
            }
        }
        if self.kind == StudyKind::BetaSweep && self.betas.is_empty() {
            return Err(Error::InvalidConfig("beta sweep needs at least one beta".into()));
        }
        if self.kind == StudyKind::Blind
            && !matches!(
                self.family,
                FamilyTag::Four | FamilyTag::Cyclic | FamilyTag::Multiqubit
            )
        {
            return Err(Error::InvalidConfig(format!(
                "blind study needs family four, cyclic or multiqubit, got {}",
                self.family
            )));
        }
        if self.family == FamilyTag::Multiqubit {
            if let Some(&d) = self.dims.iter().find(|&&d| qubit_count(d).is_none_or(|n| n < 2)) {
                return Err(Error::InvalidConfig(format!(
                    "multiqubit family needs d = 2^N with N ≥ 2, got {d}"
                )));
            }
        }
        for &r in &self.ranks {
            for &d in &self.dims {
                if r <= 1 || r >= d {
                    return Err(Error::RankOutOfRange { rank: r, dim: d });
                }
            }
        }
        if self.kind == StudyKind::NonOverlap && self.skips.is_empty() {
            return Err(Error::InvalidConfig("non-overlap study needs skips".into()));
        }
        Ok(())
    }
}

/// One row of the per-trial CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub d: usize,
    pub family: FamilyTag,
    pub r: Option<usize>,
    pub beta: Option<f64>,
    pub eta: Option<f64>,
    pub lambda: Option<f64>,
    pub fidelity: f64,
    pub infidelity: f64,
    pub sweeps: usize,
    pub restarts: usize,
    pub converged: bool,
    pub seconds: f64,
    pub arm: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Logarithmic bins over `[1e-8, 1]`; out-of-range values land in the
    /// end bins.
    pub fn of_infidelities(values: impl IntoIterator<Item = f64>) -> Self {
        let (lo, hi) = (HIST_LO.log10(), HIST_HI.log10());
        let width = (hi - lo) / HIST_BINS as f64;
        let edges = (0..=HIST_BINS)
            .map(|i| 10f64.powf(lo + width * i as f64))
            .collect();
        let mut counts = vec![0; HIST_BINS];
        for v in values {
            let bin = if v > 0.0 {
                ((v.log10() - lo) / width).floor()
            } else {
                0.0
            };
            counts[(bin.max(0.0) as usize).min(HIST_BINS - 1)] += 1;
        }
        Self { edges, counts }
    }

    /// `bin_lo,bin_hi,count` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["bin_lo", "bin_hi", "count"])?;
        for (i, c) in self.counts.iter().enumerate() {
            out.write_record([
                format!("{:e}", self.edges[i]),
                format!("{:e}", self.edges[i + 1]),
                c.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub arm: String,
    pub d: usize,
    pub family: FamilyTag,
    pub r: Option<usize>,
    pub beta: Option<f64>,
    pub trials: usize,
    pub mean_infidelity: f64,
    pub std_infidelity: f64,
    pub mean_fidelity: f64,
    pub min_fidelity: f64,
    pub max_fidelity: f64,
    pub success_fraction: f64,
    /// Sweeps summed over all starts, averaged over trials.
    pub mean_sweeps: f64,
    pub mean_restarts: f64,
    pub converged_fraction: f64,
    /// Trials with `F ≤ 0.9`.
    pub failures: usize,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankChoice {
    pub d: usize,
    pub rank: usize,
    pub policy: RankPolicy,
    /// `(rank, pilot mean infidelity)` for each candidate when piloted.
    pub pilot: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec: StudySpec,
    pub seed: u64,
    pub code_version: String,
    pub convergence_rule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub provenance: Provenance,
    pub rank_choices: Vec<RankChoice>,
    pub configurations: Vec<ConfigSummary>,
    #[serde(skip)]
    pub records: Vec<TrialRecord>,
}

// ── Arms ────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
enum ProbeSource {
    Fixed(Arc<ProbeSet>),
    /// Cyclic family built from the target's support.
    Adaptive,
}

#[derive(Debug, Clone, Copy)]
enum TargetKind {
    Haar,
    Sparse(SparseSpec),
}

#[derive(Debug, Clone)]
struct Arm {
    label: String,
    d: usize,
    family: FamilyTag,
    rank: Option<usize>,
    beta: f64,
    probes: ProbeSource,
    target: TargetKind,
    calibration: bool,
}

impl Arm {
    fn key(&self) -> String {
        format!("{}|{}|{}", self.label, self.d, self.family)
    }
}

fn windowed(family: FamilyTag, d: usize, r: usize) -> Result<ProbeSet> {
    match family {
        FamilyTag::Four => family_four(d, r),
        FamilyTag::Cyclic => family_cyclic(d, r),
        other => Err(Error::InvalidConfig(format!(
            "family {other} has no rank parameter"
        ))),
    }
}

fn fixed_arm(label: String, d: usize, family: FamilyTag, rank: Option<usize>, beta: f64, probes: ProbeSet, target: TargetKind) -> Arm {
    Arm {
        label,
        d,
        family,
        rank,
        beta,
        probes: ProbeSource::Fixed(Arc::new(probes)),
        target,
        calibration: false,
    }
}

fn dim_stream_seed(seed: u64, d: usize) -> u64 {
    seed ^ (d as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Generator for trial `trial` at dimension `d`.
pub fn trial_rng(seed: u64, d: usize, trial: usize) -> TrialRng {
    split_rng(dim_stream_seed(seed, d), trial as u64)
}

/// Random `k`-sparse state: support uniform among `k`-subsets meeting the
/// separation constraint, Haar amplitudes on the support.
pub fn sample_sparse_state<R: Rng + ?Sized>(d: usize, spec: &SparseSpec, rng: &mut R) -> Result<PureState> {
    let k = match spec.k {
        Some(k) => k,
        None => rng.random_range(2..=(d / 4).max(2)),
    };
    if k == 0 || k > d {
        return Err(Error::InvalidConfig(format!("sparsity {k} invalid for d = {d}")));
    }
    let sep = spec.min_separation.unwrap_or(0);
    if k > 1 && sep * k > d {
        return Err(Error::InvalidConfig(format!(
            "cannot place {k} components {sep} apart in d = {d}"
        )));
    }
    let support: Vec<usize> = loop {
        let mut s: Vec<usize> = sample_indices(rng, d, k).into_vec();
        s.sort_unstable();
        if k < 2 || min_cyclic_separation(d, &s) >= sep {
            break s;
        }
    };
    let mut amps = vec![Complex64::new(0.0, 0.0); d];
    loop {
        for &j in &support {
            amps[j] = complex_gaussian(rng);
        }
        if crate::qcore::norm_sqr(&amps) > 0.0 {
            break;
        }
    }
    PureState::unnormalized(amps)?.normalize()
}

/// Smallest cyclic distance between two entries of a sorted index list.
pub fn min_cyclic_separation(d: usize, sorted: &[usize]) -> usize {
    let mut best = d;
    for (i, &a) in sorted.iter().enumerate() {
        for &b in &sorted[i + 1..] {
            let gap = b - a;
            best = best.min(gap.min(d - gap));
        }
    }
    best
}

fn support_of(state: &PureState) -> BTreeSet<usize> {
    state
        .amplitudes()
        .iter()
        .enumerate()
        .filter(|(_, c)| c.norm_sqr() > 0.0)
        .map(|(i, _)| i)
        .collect()
}

// ── Trials ──────────────────────────────────────────────────────────────────

fn run_trial(arm: &Arm, spec: &StudySpec, trial: usize) -> Result<TrialRecord> {
    let started = Instant::now();
    let mut rng = trial_rng(spec.seed, arm.d, trial);
    let target = match arm.target {
        TargetKind::Haar => sample_haar_state(arm.d, &mut rng)?,
        TargetKind::Sparse(s) => sample_sparse_state(arm.d, &s, &mut rng)?,
    };
    let noise = &spec.noise;
    let eta = noise.depolarize.then_some(noise.eta);
    let lambda = noise.poisson.then_some(noise.lambda);

    if arm.calibration {
        let f = degraded_fidelity(&target, noise, &mut rng)?;
        return Ok(TrialRecord {
            trial,
            d: arm.d,
            family: arm.family,
            r: None,
            beta: None,
            eta,
            lambda,
            fidelity: f,
            infidelity: 1.0 - f,
            sweeps: 0,
            restarts: 0,
            converged: true,
            seconds: started.elapsed().as_secs_f64(),
            arm: arm.label.clone(),
        });
    }

    let adaptive;
    let probes: &ProbeSet = match &arm.probes {
        ProbeSource::Fixed(p) => p,
        ProbeSource::Adaptive => {
            adaptive = adaptive_for_support(arm.d, &support_of(&target))?;
            &adaptive
        }
    };
    let dataset = if noise.is_disabled() {
        measure_exact(&target, probes)?
    } else {
        measure_noisy(&target, probes, noise, &mut rng)?
    };
    let initial = sample_haar_state(arm.d, &mut rng)?;
    let cfg = PieConfig {
        beta: arm.beta,
        keep_trace: false,
        ..spec.cfg
    };
    let report = reconstruct_from(&dataset, probes, &cfg, Some(initial), &mut rng)?;
    let f = fidelity(&report.estimate, &target)?;
    Ok(TrialRecord {
        trial,
        d: arm.d,
        family: arm.family,
        r: probes.uniform_rank(),
        beta: Some(arm.beta),
        eta,
        lambda,
        fidelity: f,
        infidelity: 1.0 - f,
        sweeps: report.total_sweeps,
        restarts: report.restarts_used,
        converged: report.converged,
        seconds: started.elapsed().as_secs_f64(),
        arm: arm.label.clone(),
    })
}

/// `(Σ_k √(p_k q_k))²` between the ideal computational-basis distribution
/// of `state` and the one measured after depolarization and Poisson
/// counting (counts renormalized to frequencies).
pub fn degraded_fidelity<R: Rng + ?Sized>(state: &PureState, noise: &NoiseModel, rng: &mut R) -> Result<f64> {
    let rho = prepare_noisy_state(state, noise, rng)?;
    let ideal: Vec<f64> = state.amplitudes().iter().map(|c| c.norm_sqr()).collect();
    let diag = rho.diagonal();
    let degraded: Vec<f64> = if noise.poisson {
        let counts: Vec<f64> = diag
            .iter()
            .map(|&p| poisson_count(noise.lambda * p.max(0.0), rng))
            .collect();
        let total: f64 = counts.iter().sum();
        if total == 0.0 {
            return Ok(0.0);
        }
        counts.iter().map(|c| c / total).collect()
    } else {
        diag.iter().map(|p| p.max(0.0)).collect()
    };
    let bc: f64 = ideal
        .iter()
        .zip(&degraded)
        .map(|(p, q)| (p * q).sqrt())
        .sum();
    Ok((bc * bc).min(1.0))
}

// ── Study assembly ──────────────────────────────────────────────────────────

fn choose_rank(spec: &StudySpec, d: usize, family: FamilyTag) -> Result<RankChoice> {
    if let Some(r) = spec.rank {
        return Ok(RankChoice {
            d,
            rank: r,
            policy: spec.rank_policy,
            pilot: Vec::new(),
        });
    }
    let floor = default_rank(d);
    let ceil = d.div_ceil(2);
    let rank = match spec.rank_policy {
        RankPolicy::Floor => floor,
        RankPolicy::Ceil => ceil,
        RankPolicy::Best if floor == ceil => floor,
        RankPolicy::Best => {
            let mut pilot = Vec::new();
            for r in [floor, ceil] {
                let arm = fixed_arm(
                    "pilot".into(),
                    d,
                    family,
                    Some(r),
                    spec.cfg.beta,
                    windowed(family, d, r)?,
                    TargetKind::Haar,
                );
                let pilot_spec = StudySpec {
                    seed: spec.seed ^ 0x05EE_D0FF_1107,
                    ..spec.clone()
                };
                let n = spec.trials.clamp(1, 16);
                let mean = (0..n)
                    .into_par_iter()
                    .map(|t| run_trial(&arm, &pilot_spec, t).map(|rec| rec.infidelity))
                    .collect::<Result<Vec<_>>>()?
                    .iter()
                    .sum::<f64>()
                    / n as f64;
                pilot.push((r, mean));
            }
            let best = if pilot[1].1 < pilot[0].1 { ceil } else { floor };
            return Ok(RankChoice {
                d,
                rank: best,
                policy: spec.rank_policy,
                pilot,
            });
        }
    };
    Ok(RankChoice {
        d,
        rank,
        policy: spec.rank_policy,
        pilot: Vec::new(),
    })
}

fn build_arms(spec: &StudySpec, choices: &mut Vec<RankChoice>) -> Result<Vec<Arm>> {
    let beta = spec.cfg.beta;
    let mut arms = Vec::new();
    for &d in &spec.dims {
        match spec.kind {
            StudyKind::Blind | StudyKind::BetaSweep => {
                let (probes, rank) = if spec.family == FamilyTag::Multiqubit {
                    let n = qubit_count(d).ok_or_else(|| {
                        Error::InvalidConfig(format!("multiqubit family needs d = 2^N, got {d}"))
                    })?;
                    (family_multiqubit(n)?, None)
                } else {
                    let choice = choose_rank(spec, d, spec.family)?;
                    let r = choice.rank;
                    choices.push(choice);
                    (windowed(spec.family, d, r)?, Some(r))
                };
                if spec.kind == StudyKind::Blind {
                    arms.push(fixed_arm("blind".into(), d, spec.family, rank, beta, probes, TargetKind::Haar));
                } else {
                    for &b in &spec.betas {
                        arms.push(fixed_arm(format!("beta={b}"), d, spec.family, rank, b, probes.clone(), TargetKind::Haar));
                    }
                }
            }
            StudyKind::RankSweep => {
                let ranks: Vec<usize> = if spec.ranks.is_empty() {
                    (2..=d.saturating_sub(2)).collect()
                } else {
                    spec.ranks.clone()
                };
                for r in ranks {
                    arms.push(fixed_arm(format!("r={r}"), d, spec.family, Some(r), beta, windowed(spec.family, d, r)?, TargetKind::Haar));
                }
            }
            StudyKind::NonOverlap => {
                let r = spec.rank.unwrap_or(d / spec.skips.len().max(1));
                arms.push(fixed_arm("disjoint".into(), d, FamilyTag::Custom, Some(r), beta, family_custom(d, &spec.skips, r)?, TargetKind::Haar));
                let rc = default_rank(d);
                arms.push(fixed_arm("overlapping".into(), d, FamilyTag::Cyclic, Some(rc), beta, family_cyclic(d, rc)?, TargetKind::Haar));
            }
            StudyKind::Sparse => {
                let target = TargetKind::Sparse(spec.sparse);
                let r0 = default_rank(d);
                arms.push(fixed_arm("default-rank".into(), d, FamilyTag::Cyclic, Some(r0), beta, family_cyclic(d, r0)?, target));
                arms.push(fixed_arm("half-plus-one".into(), d, FamilyTag::Cyclic, Some(r0 + 1), beta, family_cyclic(d, r0 + 1)?, target));
                arms.push(Arm {
                    label: "adaptive".into(),
                    d,
                    family: FamilyTag::Adaptive,
                    rank: None,
                    beta,
                    probes: ProbeSource::Adaptive,
                    target,
                    calibration: false,
                });
            }
            StudyKind::NoiseCalibration => arms.push(Arm {
                label: "calibration".into(),
                d,
                family: spec.family,
                rank: None,
                beta,
                probes: ProbeSource::Adaptive,
                target: TargetKind::Haar,
                calibration: true,
            }),
        }
    }
    Ok(arms)
}

/// Identifies one persisted trial, for resuming interrupted studies.
pub fn record_key(rec: &TrialRecord) -> (String, usize) {
    (format!("{}|{}|{}", rec.arm, rec.d, rec.family), rec.trial)
}

/// Runs a study. Each finished trial is passed to `sink` (one call at a
/// time, in completion order); trials already present in `previous` are not
/// rerun.
pub fn run_study_with(
    spec: &StudySpec,
    workers: usize,
    previous: Vec<TrialRecord>,
    sink: &mut (dyn FnMut(&TrialRecord) -> Result<()> + Send),
) -> Result<StudyResult> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    pool.install(|| {
        let mut choices = Vec::new();
        let arms = build_arms(spec, &mut choices)?;
        let done: HashSet<(String, usize)> = previous.iter().map(record_key).collect();
        let units: Vec<(usize, usize)> = arms
            .iter()
            .enumerate()
            .flat_map(|(a, arm)| {
                let key = arm.key();
                let done = &done;
                (0..spec.trials)
                    .filter(move |t| !done.contains(&(key.clone(), *t)))
                    .map(move |t| (a, t))
            })
            .collect();
        let sink = Mutex::new(sink);
        let fresh = units
            .par_iter()
            .map(|&(a, t)| {
                let rec = run_trial(&arms[a], spec, t)?;
                let mut s = sink.lock().expect("sink poisoned");
                (*s)(&rec)?;
                Ok(rec)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut records = previous;
        records.extend(fresh);
        aggregate(spec, choices, &arms, records)
    })
}

/// Runs a study without streaming output.
pub fn run_study(spec: &StudySpec, workers: usize) -> Result<StudyResult> {
    run_study_with(spec, workers, Vec::new(), &mut |_| Ok(()))
}

fn aggregate(spec: &StudySpec, choices: Vec<RankChoice>, arms: &[Arm], mut records: Vec<TrialRecord>) -> Result<StudyResult> {
    let order: Vec<String> = arms.iter().map(Arm::key).collect();
    let pos = |rec: &TrialRecord| {
        let k = record_key(rec).0;
        order.iter().position(|o| *o == k).unwrap_or(usize::MAX)
    };
    records.sort_by(|a, b| pos(a).cmp(&pos(b)).then(a.trial.cmp(&b.trial)));
    let configurations = arms
        .iter()
        .map(|arm| {
            let key = arm.key();
            let rows: Vec<&TrialRecord> = records
                .iter()
                .filter(|r| record_key(r).0 == key)
                .collect();
            summarize(arm, &rows)
        })
        .collect();
    Ok(StudyResult {
        provenance: Provenance {
            spec: spec.clone(),
            seed: spec.seed,
            code_version: VERSION.to_string(),
            convergence_rule: CONVERGENCE_RULE.to_string(),
        },
        rank_choices: choices,
        configurations,
        records,
    })
}

/// Rebuilds a result from persisted per-trial records.
pub fn aggregate_records(spec: &StudySpec, rank_choices: Vec<RankChoice>, records: Vec<TrialRecord>) -> Result<StudyResult> {
    let mut choices = Vec::new();
    let fixed = StudySpec {
        rank: spec.rank,
        ..spec.clone()
    };
    // Reuse the recorded rank choices instead of piloting again.
    let arms = {
        let mut s = fixed;
        if s.rank.is_none() && rank_choices.len() == s.dims.len() {
            let mut all = Vec::new();
            for c in &rank_choices {
                s.dims = vec![c.d];
                s.rank = Some(c.rank);
                all.extend(build_arms(&s, &mut choices)?);
            }
            all
        } else {
            build_arms(&s, &mut choices)?
        }
    };
    let choices = if rank_choices.is_empty() { choices } else { rank_choices };
    aggregate(spec, choices, &arms, records)
}

fn summarize(arm: &Arm, rows: &[&TrialRecord]) -> ConfigSummary {
    let n = rows.len();
    let nf = n.max(1) as f64;
    let mean = |f: &dyn Fn(&TrialRecord) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / nf;
    let mean_inf = mean(&|r| r.infidelity);
    let var = rows
        .iter()
        .map(|r| (r.infidelity - mean_inf).powi(2))
        .sum::<f64>()
        / (n.saturating_sub(1).max(1)) as f64;
    let successes = rows.iter().filter(|r| r.fidelity > SUCCESS_FIDELITY).count();
    ConfigSummary {
        arm: arm.label.clone(),
        d: arm.d,
        family: arm.family,
        r: rows.first().and_then(|r| r.r).or(arm.rank),
        beta: (!arm.calibration).then_some(arm.beta),
        trials: n,
        mean_infidelity: mean_inf,
        std_infidelity: var.sqrt(),
        mean_fidelity: mean(&|r| r.fidelity),
        min_fidelity: rows.iter().map(|r| r.fidelity).fold(f64::INFINITY, f64::min),
        max_fidelity: rows.iter().map(|r| r.fidelity).fold(f64::NEG_INFINITY, f64::max),
        success_fraction: successes as f64 / nf,
        mean_sweeps: mean(&|r| r.sweeps as f64),
        mean_restarts: mean(&|r| r.restarts as f64),
        converged_fraction: rows.iter().filter(|r| r.converged).count() as f64 / nf,
        failures: n - successes,
        histogram: Histogram::of_infidelities(rows.iter().map(|r| r.infidelity)),
    }
}

// ── Per-trial CSV ───────────────────────────────────────────────────────────

/// Append-only per-trial CSV writer; flushes after every row.
pub struct TrialCsvWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> TrialCsvWriter<W> {
    pub fn new(w: W, write_header: bool) -> Self {
        Self {
            inner: csv::WriterBuilder::new()
                .has_headers(write_header)
                .from_writer(w),
        }
    }

    pub fn write(&mut self, rec: &TrialRecord) -> Result<()> {
        self.inner.serialize(rec)?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Reads records written by [`TrialCsvWriter`]. A truncated final line is
/// dropped.
pub fn read_trial_csv<R: Read>(r: R) -> Result<Vec<TrialRecord>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(r);
    let mut out = Vec::new();
    for row in rdr.deserialize::<TrialRecord>() {
        match row {
            Ok(rec) => out.push(rec),
            Err(_) => break,
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(kind: StudyKind) -> StudySpec {
        StudySpec {
            trials: 4,
            dims: vec![8],
            seed: 3,
            cfg: PieConfig {
                max_restarts: 2,
                keep_trace: false,
                ..PieConfig::default()
            },
            ..StudySpec::defaults(kind)
        }
    }

    #[test]
    fn histogram_bins() {
        let h = Histogram::of_infidelities([0.0, 1e-9, 1e-8, 0.5, 1.0, 2.0]);
        assert_eq!(h.counts.len(), 32);
        assert_eq!(h.edges.len(), 33);
        assert_eq!(h.counts.iter().sum::<usize>(), 6);
        assert_eq!(h.counts[0], 3);
        assert_eq!(h.counts[30], 1);
        assert_eq!(h.counts[31], 2);
        assert!((h.edges[0] - 1e-8).abs() < 1e-20);
        assert!((h.edges[32] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kind_names_roundtrip() {
        for k in StudyKind::ALL {
            assert_eq!(k.name().parse::<StudyKind>().unwrap(), k);
        }
        assert!("bogus".parse::<StudyKind>().is_err());
    }

    #[test]
    fn spec_validation() {
        let mut s = quick(StudyKind::Blind);
        s.trials = 0;
        assert!(s.validate().is_err());
        let mut s = quick(StudyKind::Blind);
        s.family = FamilyTag::Multiqubit;
        s.dims = vec![12];
        assert!(s.validate().is_err());
        let mut s = quick(StudyKind::BetaSweep);
        s.betas = vec![2.5];
        assert!(s.validate().is_err());
        let mut s = quick(StudyKind::RankSweep);
        s.ranks = vec![1];
        assert!(s.validate().is_err());
        let mut s = quick(StudyKind::Blind);
        s.dims = vec![200];
        assert!(s.validate().is_err());
    }

    #[test]
    fn sparse_sampler() {
        let mut rng = split_rng(4, 0);
        let spec = SparseSpec {
            k: Some(2),
            min_separation: Some(10),
        };
        for _ in 0..50 {
            let s = sample_sparse_state(20, &spec, &mut rng).unwrap();
            let sup: Vec<usize> = support_of(&s).into_iter().collect();
            assert_eq!(sup.len(), 2);
            assert_eq!(sup[1] - sup[0], 10);
            assert!(s.is_normalized());
        }
        let s = sample_sparse_state(20, &SparseSpec::default(), &mut rng).unwrap();
        let k = support_of(&s).len();
        assert!((2..=5).contains(&k));
        assert!(sample_sparse_state(20, &SparseSpec { k: Some(3), min_separation: Some(10) }, &mut rng).is_err());
    }

    #[test]
    fn calibration_without_noise_is_exact() {
        let mut s = quick(StudyKind::NoiseCalibration);
        s.noise = NoiseModel::disabled();
        let res = run_study(&s, 1).unwrap();
        for r in &res.records {
            assert!((r.fidelity - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn study_is_deterministic_across_workers() {
        let s = quick(StudyKind::Blind);
        let a = run_study(&s, 1).unwrap();
        let b = run_study(&s, 3).unwrap();
        let strip = |r: &StudyResult| {
            r.records
                .iter()
                .map(|x| (x.trial, x.fidelity, x.sweeps))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.configurations, b.configurations);
        assert_eq!(a.configurations[0].histogram.counts.iter().sum::<usize>(), 4);
    }

    #[test]
    fn csv_roundtrip_reaggregates() {
        let s = quick(StudyKind::Sparse);
        let res = run_study(&s, 1).unwrap();
        let mut buf = Vec::new();
        {
            let mut w = TrialCsvWriter::new(&mut buf, true);
            for r in &res.records {
                w.write(r).unwrap();
            }
        }
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "trial,d,family,r,beta,eta,lambda,fidelity,infidelity,sweeps,restarts,converged,seconds,arm"
        ));
        let back = read_trial_csv(buf.as_slice()).unwrap();
        assert_eq!(back, res.records);
        let again = aggregate_records(&s, res.rank_choices.clone(), back).unwrap();
        assert_eq!(again.configurations, res.configurations);
    }

    #[test]
    fn resume_skips_completed() {
        let s = quick(StudyKind::Blind);
        let full = run_study(&s, 1).unwrap();
        let partial: Vec<TrialRecord> = full.records[..2].to_vec();
        let mut rerun = 0;
        let res = run_study_with(&s, 1, partial, &mut |_| {
            rerun += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(rerun, 2);
        assert_eq!(res.configurations, full.configurations);
    }
}
