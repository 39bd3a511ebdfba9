//! The real ensemble: `N` members, each carrying a beable class and a
//! phase, evolved by stochastic copy events and continuous phase drift.
//!
//! A copy event writes one member's `(class, phase)` pair onto another.
//! The unit rate of the event that propagates member `i`'s pair onto
//! member `j` is
//!
//! ```text
//! copy_rate(i, j) = R_{a_i a_j} / sqrt(n_{a_i} n_{a_j}) * sin^+(phi_i - phi_j + delta_{a_i a_j})
//! ```
//!
//! and the steppers fire each ordered pair at `FLOW_SCALE` times that
//! rate, which is what makes the ensemble relative frequencies follow the
//! induced Hamiltonian (see [`crate::spec::FLOW_SCALE`]). Between events
//! every phase drifts at [`EnsembleState::phase_drift`].
//!
//! Two evolution modes exist. In per-member mode each member owns its
//! phase and rate sums run over members. In aligned mode all members of a
//! class share one phase, which turns the O(N^2) pair structure into an
//! O(P^2) class structure; the aligned representation stores one phase
//! per class, so alignment is preserved exactly rather than to roundoff.
//! Copy events preserve alignment either way because they copy the phase
//! together with the class.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spec::{sin_plus, wrap_angle, ModelSpec, FLOW_SCALE};

/// Per-class phase spread above which a member list no longer counts as
/// aligned.
pub const ALIGNMENT_TOL: f64 = 1e-12;

/// Hard cap on `dt * max per-member rate` for the fixed-step stepper.
pub const TAU_LEAP_RATE_BOUND: f64 = 0.1;

/// One member's beable pair. `beable` is a 0-based class index; the wire
/// format uses 1-based values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemberState {
    pub beable: usize,
    pub phase: f64,
}

/// Phase bookkeeping mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseMode {
    /// Every member of a class shares the class phase.
    Aligned,
    /// Each member owns its phase.
    PerMember,
}

enum PhaseStore {
    /// One phase per class; a member's phase is its class phase. Entries
    /// of empty classes are frozen bookkeeping values.
    Aligned(Vec<f64>),
    /// One phase per member.
    PerMember(Vec<f64>),
}

/// Occupation numbers `n_a`; sums to `N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupationCounts {
    counts: Vec<usize>,
}

impl OccupationCounts {
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    #[inline]
    pub fn count(&self, a: usize) -> usize {
        self.counts[a]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Relative frequencies `rho_a = n_a / N`.
    pub fn frequencies(&self) -> Vec<f64> {
        let n = self.total() as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }
}

/// The ensemble: member beables and phases plus the simulation clock.
pub struct EnsembleState {
    dim: usize,
    beables: Vec<usize>,
    pinned: Vec<bool>,
    phases: PhaseStore,
    time: f64,
}

impl EnsembleState {
    /// Aligned ensemble built from per-class counts and class phases,
    /// members laid out class by class.
    pub fn aligned(counts: &[usize], class_phases: &[f64]) -> Result<Self> {
        let dim = counts.len();
        if dim == 0 || class_phases.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "counts has {dim} classes, phases has {}",
                class_phases.len()
            )));
        }
        for (a, &p) in class_phases.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::NonFinite {
                    field: "class phase",
                    index: format!("{}", a + 1),
                });
            }
        }
        let n: usize = counts.iter().sum();
        if n == 0 {
            return Err(Error::EmptyEnsemble);
        }
        let mut beables = Vec::with_capacity(n);
        for (a, &c) in counts.iter().enumerate() {
            beables.extend(std::iter::repeat(a).take(c));
        }
        Ok(Self {
            dim,
            pinned: vec![false; beables.len()],
            beables,
            phases: PhaseStore::Aligned(class_phases.iter().map(|&p| wrap_angle(p)).collect()),
            time: 0.0,
        })
    }

    /// Per-member ensemble from an explicit member list.
    pub fn per_member(dim: usize, members: &[MemberState]) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        let mut beables = Vec::with_capacity(members.len());
        let mut phases = Vec::with_capacity(members.len());
        for (i, m) in members.iter().enumerate() {
            if m.beable >= dim {
                return Err(Error::ClassIndex(m.beable, dim));
            }
            if !m.phase.is_finite() {
                return Err(Error::NonFinite {
                    field: "phase",
                    index: format!("{}", i + 1),
                });
            }
            beables.push(m.beable);
            phases.push(wrap_angle(m.phase));
        }
        Ok(Self {
            dim,
            pinned: vec![false; members.len()],
            beables,
            phases: PhaseStore::PerMember(phases),
            time: 0.0,
        })
    }

    /// Aligned ensemble from a member list; classmates must share their
    /// phase to [`ALIGNMENT_TOL`].
    pub fn aligned_from_members(dim: usize, members: &[MemberState]) -> Result<Self> {
        let state = Self::per_member(dim, members)?;
        let mut class_phase = vec![0.0f64; dim];
        let mut seen = vec![false; dim];
        let phases = match &state.phases {
            PhaseStore::PerMember(p) => p,
            PhaseStore::Aligned(_) => unreachable!(),
        };
        for (i, &a) in state.beables.iter().enumerate() {
            if !seen[a] {
                seen[a] = true;
                class_phase[a] = phases[i];
            } else {
                let d = (phases[i] - class_phase[a]).abs();
                if d.min(2.0 * std::f64::consts::PI - d) > ALIGNMENT_TOL {
                    return Err(Error::MisalignedClass(a + 1));
                }
            }
        }
        Ok(Self {
            dim,
            beables: state.beables,
            pinned: state.pinned,
            phases: PhaseStore::Aligned(class_phase),
            time: 0.0,
        })
    }

    /// Aligned ensemble of `n` members drawn class-by-class from `rho` by
    /// sequential binomial splitting (a multinomial sample).
    pub fn multinomial_aligned(
        rho: &[f64],
        class_phases: &[f64],
        n: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        use rand_distr::{Binomial, Distribution};
        let p = rho.len();
        if p == 0 || class_phases.len() != p {
            return Err(Error::DimensionMismatch(
                "rho and phases must have equal positive length".into(),
            ));
        }
        let sum: f64 = rho.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Unnormalized(sum));
        }
        let mut counts = vec![0usize; p];
        let mut remaining = n as u64;
        let mut mass = 1.0f64;
        for a in 0..p {
            if remaining == 0 {
                break;
            }
            if a + 1 == p {
                counts[a] = remaining as usize;
                break;
            }
            let q = (rho[a] / mass).clamp(0.0, 1.0);
            let draw = Binomial::new(remaining, q)
                .map_err(|e| Error::NonFiniteRate(e.to_string()))?
                .sample(rng);
            counts[a] = draw as usize;
            remaining -= draw;
            mass = (mass - rho[a]).max(f64::MIN_POSITIVE);
        }
        Self::aligned(&counts, class_phases)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of members `N`.
    pub fn len(&self) -> usize {
        self.beables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beables.is_empty()
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn mode(&self) -> PhaseMode {
        match self.phases {
            PhaseStore::Aligned(_) => PhaseMode::Aligned,
            PhaseStore::PerMember(_) => PhaseMode::PerMember,
        }
    }

    #[inline]
    pub fn beable(&self, i: usize) -> usize {
        self.beables[i]
    }

    /// Phase of member `i` (its class phase in aligned mode).
    #[inline]
    pub fn phase(&self, i: usize) -> f64 {
        match &self.phases {
            PhaseStore::Aligned(cp) => cp[self.beables[i]],
            PhaseStore::PerMember(p) => p[i],
        }
    }

    /// Whether member `i` is a spectator (never overwritten by copies).
    pub fn is_pinned(&self, i: usize) -> bool {
        self.pinned[i]
    }

    pub fn member(&self, i: usize) -> MemberState {
        MemberState {
            beable: self.beables[i],
            phase: self.phase(i),
        }
    }

    pub fn members(&self) -> Vec<MemberState> {
        (0..self.len()).map(|i| self.member(i)).collect()
    }

    /// Occupation numbers: `counts[a] = #{ i : a_i = a }`.
    pub fn occupation_counts(&self) -> OccupationCounts {
        let mut counts = vec![0usize; self.dim];
        for &a in &self.beables {
            counts[a] += 1;
        }
        OccupationCounts { counts }
    }

    /// Aligned class phases. Errors in per-member mode.
    pub fn class_phases(&self) -> Result<&[f64]> {
        match &self.phases {
            PhaseStore::Aligned(cp) => Ok(cp),
            PhaseStore::PerMember(_) => Err(Error::NotAligned),
        }
    }

    /// Circular mean phase per class; NaN for empty classes. In aligned
    /// mode this is the stored class phase.
    pub fn mean_class_phases(&self) -> Vec<f64> {
        let counts = self.occupation_counts();
        match &self.phases {
            PhaseStore::Aligned(cp) => cp
                .iter()
                .enumerate()
                .map(|(a, &p)| if counts.count(a) > 0 { p } else { f64::NAN })
                .collect(),
            PhaseStore::PerMember(phases) => {
                let mut sin = vec![0.0f64; self.dim];
                let mut cos = vec![0.0f64; self.dim];
                for (i, &a) in self.beables.iter().enumerate() {
                    sin[a] += phases[i].sin();
                    cos[a] += phases[i].cos();
                }
                (0..self.dim)
                    .map(|a| {
                        if counts.count(a) > 0 {
                            wrap_angle(sin[a].atan2(cos[a]))
                        } else {
                            f64::NAN
                        }
                    })
                    .collect()
            }
        }
    }

    /// Append `s` spectator members per class, carrying the class phase
    /// (phase 0 where no phase is defined). Spectators count toward the
    /// occupation numbers and may be copied from, but they are never
    /// chosen as copy receivers, so no class they occupy can empty.
    pub fn add_spectators(&mut self, s: usize) {
        if s == 0 {
            return;
        }
        let counts = self.occupation_counts();
        let phases_per_class: Vec<f64> = match &self.phases {
            PhaseStore::Aligned(cp) => cp.clone(),
            PhaseStore::PerMember(_) => self
                .mean_class_phases()
                .iter()
                .zip(counts.counts())
                .map(|(&p, &c)| if c > 0 { p } else { 0.0 })
                .collect(),
        };
        for a in 0..self.dim {
            for _ in 0..s {
                self.beables.push(a);
                self.pinned.push(true);
                if let PhaseStore::PerMember(p) = &mut self.phases {
                    p.push(phases_per_class[a]);
                }
            }
        }
    }

    /// Number of pinned spectators per class.
    pub fn spectator_counts(&self) -> Vec<usize> {
        let mut s = vec![0usize; self.dim];
        for (i, &a) in self.beables.iter().enumerate() {
            if self.pinned[i] {
                s[a] += 1;
            }
        }
        s
    }

    /// Unit rate of the copy event that writes member `i`'s beable pair
    /// onto member `j`:
    /// `R_{a_i a_j} / sqrt(n_{a_i} n_{a_j}) * sin^+(phi_i - phi_j + delta_{a_i a_j})`.
    /// Zero when the members share a class (the coupling diagonal is
    /// zero). Summed over the members of two classes this gives
    /// [`aggregate_class_rate`]; the steppers fire events at `FLOW_SCALE`
    /// times this value.
    pub fn copy_rate(&self, i: usize, j: usize, spec: &ModelSpec) -> Result<f64> {
        let n = self.len();
        if i >= n {
            return Err(Error::MemberIndex(i, n));
        }
        if j >= n {
            return Err(Error::MemberIndex(j, n));
        }
        if i == j {
            return Err(Error::SamePair(i));
        }
        let counts = self.occupation_counts();
        let (a, b) = (self.beables[i], self.beables[j]);
        let r = spec.coupling(a, b);
        if r == 0.0 {
            return Ok(0.0);
        }
        let pair_norm = ((counts.count(a) * counts.count(b)) as f64).sqrt();
        Ok(r / pair_norm * sin_plus(self.phase(i) - self.phase(j) + spec.phase_offset(a, b)))
    }

    /// Angular drift velocity of member `i`:
    /// `omega_{a_i} + sum_{j != i} R / sqrt(n_i n_j) cos(phi_i - phi_j + delta)`.
    /// Direct member sum; the steppers use the class-aggregated
    /// equivalents, which this function serves as the oracle for.
    pub fn phase_drift(&self, i: usize, spec: &ModelSpec) -> Result<f64> {
        let n = self.len();
        if i >= n {
            return Err(Error::MemberIndex(i, n));
        }
        let counts = self.occupation_counts();
        let a = self.beables[i];
        let phi_i = self.phase(i);
        let mut drift = spec.omega(a);
        for j in 0..n {
            if j == i {
                continue;
            }
            let b = self.beables[j];
            let r = spec.coupling(a, b);
            if r == 0.0 {
                continue;
            }
            let pair_norm = ((counts.count(a) * counts.count(b)) as f64).sqrt();
            drift += r / pair_norm * (phi_i - self.phase(j) + spec.phase_offset(a, b)).cos();
        }
        Ok(drift)
    }

    /// Total unit flow rate of class `b` members into class `a` (events
    /// sourced in `a` targeting receivers in `b`). Aligned mode only.
    pub fn class_flow_rate(&self, a: usize, b: usize, spec: &ModelSpec) -> Result<f64> {
        let cp = self.class_phases()?;
        if a >= self.dim {
            return Err(Error::ClassIndex(a, self.dim));
        }
        if b >= self.dim {
            return Err(Error::ClassIndex(b, self.dim));
        }
        let counts = self.occupation_counts();
        Ok(aggregate_class_rate(&counts, cp, spec, a, b))
    }
}

/// Total unit rate of copy events sourced in class `a` and received in
/// class `b`, under phase alignment:
/// `sqrt(n_a n_b) R_ab sin^+(phi_a - phi_b + delta_ab)`.
///
/// Each such event moves one member from `b` to `a`, so this is the
/// aggregate `b -> a` occupation flow. Identical to the sum of
/// [`EnsembleState::copy_rate`] over the `n_a * n_b` ordered member pairs.
/// Zero when either class is empty: an empty class offers nothing to copy.
pub fn aggregate_class_rate(
    counts: &OccupationCounts,
    class_phases: &[f64],
    spec: &ModelSpec,
    a: usize,
    b: usize,
) -> f64 {
    if a == b {
        return 0.0;
    }
    let r = spec.coupling(a, b);
    let (na, nb) = (counts.count(a), counts.count(b));
    if r == 0.0 || na == 0 || nb == 0 {
        return 0.0;
    }
    ((na * nb) as f64).sqrt()
        * r
        * sin_plus(class_phases[a] - class_phases[b] + spec.phase_offset(a, b))
}

// ---------------------------------------------------------------------------
// Class-aggregated drift evaluation
// ---------------------------------------------------------------------------

/// Drift of each nonempty class under alignment:
/// `omega_a + sum_b sqrt(n_b / n_a) R_ab cos(phi_a - phi_b + delta_ab)`.
/// Empty classes get zero drift (their stored phase is frozen).
fn class_drift(counts: &[usize], cp: &[f64], spec: &ModelSpec, out: &mut [f64]) {
    let p = spec.dim();
    for a in 0..p {
        if counts[a] == 0 {
            out[a] = 0.0;
            continue;
        }
        let mut d = spec.omega(a);
        for b in 0..p {
            if b == a || counts[b] == 0 {
                continue;
            }
            let r = spec.coupling(a, b);
            if r == 0.0 {
                continue;
            }
            d += (counts[b] as f64 / counts[a] as f64).sqrt()
                * r
                * (cp[a] - cp[b] + spec.phase_offset(a, b)).cos();
        }
        out[a] = d;
    }
}

/// Drift of every member in per-member mode, O(N P) via per-class
/// trigonometric sums: `sum_{j in B} cos(phi_i - phi_j + delta_AB)`
/// expands over `sum cos(phi_j)` and `sum sin(phi_j)`.
pub(crate) fn member_drift_all(
    beables: &[usize],
    phases: &[f64],
    counts: &[usize],
    spec: &ModelSpec,
    out: &mut [f64],
) {
    let p = spec.dim();
    let n = beables.len();
    let mut cos_sum = vec![0.0f64; p];
    let mut sin_sum = vec![0.0f64; p];
    for i in 0..n {
        let (s, c) = phases[i].sin_cos();
        cos_sum[beables[i]] += c;
        sin_sum[beables[i]] += s;
    }
    // Per-class-pair normalizations.
    let mut norm = vec![0.0f64; p * p];
    for a in 0..p {
        for b in 0..p {
            if a != b && counts[a] > 0 && counts[b] > 0 && spec.coupling(a, b) != 0.0 {
                norm[a * p + b] = spec.coupling(a, b) / ((counts[a] * counts[b]) as f64).sqrt();
            }
        }
    }
    for i in 0..n {
        let a = beables[i];
        let mut d = spec.omega(a);
        for b in 0..p {
            let w = norm[a * p + b];
            if w == 0.0 {
                continue;
            }
            let (s, c) = (phases[i] + spec.phase_offset(a, b)).sin_cos();
            d += w * (c * cos_sum[b] + s * sin_sum[b]);
        }
        out[i] = d;
    }
}

// ---------------------------------------------------------------------------
// Stepping
// ---------------------------------------------------------------------------

/// Which stochastic stepper to use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Stepper {
    /// Event-by-event thinning against a counts-only rate bound;
    /// statistically exact.
    ExactEvent,
    /// Fixed-step approximation: per step each member independently
    /// receives at most one copy, drawn from the pre-step snapshot.
    TauLeap { dt: f64 },
}

/// A full run recipe: stepper, phase-ODE substep, horizon and sample times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub stepper: Stepper,
    /// Upper bound on the phase-ODE integration step.
    pub substep: f64,
    pub duration: f64,
    /// Nondecreasing sample times within `[0, duration]`.
    pub sample_times: Vec<f64>,
}

impl StepSchedule {
    /// `n_samples` evenly spaced samples over `[0, duration]`, endpoints
    /// included.
    pub fn uniform(stepper: Stepper, substep: f64, duration: f64, n_samples: usize) -> Self {
        let sample_times = match n_samples {
            0 => Vec::new(),
            1 => vec![0.0],
            _ => (0..n_samples)
                .map(|k| duration * k as f64 / (n_samples - 1) as f64)
                .collect(),
        };
        Self {
            stepper,
            substep,
            duration,
            sample_times,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.substep > 0.0) {
            return Err(Error::InvalidSchedule(format!(
                "substep must be positive, got {}",
                self.substep
            )));
        }
        if let Stepper::TauLeap { dt } = self.stepper {
            if !(dt > 0.0) {
                return Err(Error::InvalidSchedule(format!(
                    "tau-leap dt must be positive, got {dt}"
                )));
            }
        }
        if !(self.duration >= 0.0) {
            return Err(Error::InvalidSchedule(format!(
                "duration must be nonnegative, got {}",
                self.duration
            )));
        }
        let mut prev = 0.0f64;
        for &t in &self.sample_times {
            if t < prev || t > self.duration + 1e-12 {
                return Err(Error::InvalidSchedule(format!(
                    "sample time {t} outside nondecreasing range [0, {}]",
                    self.duration
                )));
            }
            prev = t;
        }
        Ok(())
    }
}

/// Swap-removal index structure over the per-class member lists.
struct ClassTable {
    counts: Vec<usize>,
    all: Vec<Vec<u32>>,
    pos_all: Vec<u32>,
    /// Receiver candidates: unpinned members per class.
    free: Vec<Vec<u32>>,
    pos_free: Vec<u32>,
}

const NO_POS: u32 = u32::MAX;

impl ClassTable {
    fn build(state: &EnsembleState) -> Self {
        let p = state.dim;
        let n = state.len();
        let mut counts = vec![0usize; p];
        let mut all: Vec<Vec<u32>> = vec![Vec::new(); p];
        let mut free: Vec<Vec<u32>> = vec![Vec::new(); p];
        let mut pos_all = vec![NO_POS; n];
        let mut pos_free = vec![NO_POS; n];
        for i in 0..n {
            let a = state.beables[i];
            counts[a] += 1;
            pos_all[i] = all[a].len() as u32;
            all[a].push(i as u32);
            if !state.pinned[i] {
                pos_free[i] = free[a].len() as u32;
                free[a].push(i as u32);
            }
        }
        Self {
            counts,
            all,
            pos_all,
            free,
            pos_free,
        }
    }

    fn free_count(&self, a: usize) -> usize {
        self.free[a].len()
    }

    /// Move (unpinned) member `j` from its class to `to`.
    fn move_member(&mut self, j: usize, from: usize, to: usize) {
        debug_assert_ne!(from, to);
        swap_remove_tracked(&mut self.all[from], &mut self.pos_all, j);
        self.pos_all[j] = self.all[to].len() as u32;
        self.all[to].push(j as u32);
        swap_remove_tracked(&mut self.free[from], &mut self.pos_free, j);
        self.pos_free[j] = self.free[to].len() as u32;
        self.free[to].push(j as u32);
        self.counts[from] -= 1;
        self.counts[to] += 1;
    }
}

fn swap_remove_tracked(list: &mut Vec<u32>, pos: &mut [u32], member: usize) {
    let at = pos[member] as usize;
    let last = *list.last().expect("member list cannot be empty here") as usize;
    list.swap_remove(at);
    if last != member {
        pos[last] = at as u32;
    }
    pos[member] = NO_POS;
}

/// Integrate the phase ODE for `span` time units with RK4 substeps of at
/// most `substep`, on a fixed class assignment.
fn drift_phases(
    state: &mut EnsembleState,
    counts: &[usize],
    spec: &ModelSpec,
    span: f64,
    substep: f64,
) {
    if span <= 0.0 {
        return;
    }
    let n_steps = (span / substep).ceil().max(1.0) as usize;
    let h = span / n_steps as f64;
    match &mut state.phases {
        PhaseStore::Aligned(cp) => {
            let p = cp.len();
            let mut k1 = vec![0.0; p];
            let mut k2 = vec![0.0; p];
            let mut k3 = vec![0.0; p];
            let mut k4 = vec![0.0; p];
            let mut tmp = vec![0.0; p];
            for _ in 0..n_steps {
                class_drift(counts, cp, spec, &mut k1);
                for a in 0..p {
                    tmp[a] = cp[a] + 0.5 * h * k1[a];
                }
                class_drift(counts, &tmp, spec, &mut k2);
                for a in 0..p {
                    tmp[a] = cp[a] + 0.5 * h * k2[a];
                }
                class_drift(counts, &tmp, spec, &mut k3);
                for a in 0..p {
                    tmp[a] = cp[a] + h * k3[a];
                }
                class_drift(counts, &tmp, spec, &mut k4);
                for a in 0..p {
                    if counts[a] > 0 {
                        cp[a] = wrap_angle(
                            cp[a] + h / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]),
                        );
                    }
                }
            }
        }
        PhaseStore::PerMember(phases) => {
            let n = phases.len();
            let beables = &state.beables;
            let mut k1 = vec![0.0; n];
            let mut k2 = vec![0.0; n];
            let mut k3 = vec![0.0; n];
            let mut k4 = vec![0.0; n];
            let mut tmp = vec![0.0; n];
            for _ in 0..n_steps {
                member_drift_all(beables, phases, counts, spec, &mut k1);
                for i in 0..n {
                    tmp[i] = phases[i] + 0.5 * h * k1[i];
                }
                member_drift_all(beables, &tmp, counts, spec, &mut k2);
                for i in 0..n {
                    tmp[i] = phases[i] + 0.5 * h * k2[i];
                }
                member_drift_all(beables, &tmp, counts, spec, &mut k3);
                for i in 0..n {
                    tmp[i] = phases[i] + h * k3[i];
                }
                member_drift_all(beables, &tmp, counts, spec, &mut k4);
                for i in 0..n {
                    phases[i] = wrap_angle(
                        phases[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]),
                    );
                }
            }
        }
    }
}

/// Rate-bound table over ordered class pairs: entry `(a, b)` bounds the
/// total event rate with sources in `a` and receivers in `b`, using
/// `sin^+ <= 1`. Depends only on counts, so it stays valid along the
/// deterministic drift between events.
fn bound_table(table: &ClassTable, spec: &ModelSpec, w: &mut [f64]) -> Result<f64> {
    let p = spec.dim();
    let mut total = 0.0;
    for a in 0..p {
        for b in 0..p {
            let idx = a * p + b;
            w[idx] = 0.0;
            if a == b || table.counts[a] == 0 {
                continue;
            }
            let nf = table.free_count(b);
            if nf == 0 {
                continue;
            }
            let r = spec.coupling(a, b);
            if r == 0.0 {
                continue;
            }
            let rate = FLOW_SCALE * r / ((table.counts[a] * table.counts[b]) as f64).sqrt()
                * table.counts[a] as f64
                * nf as f64;
            if !rate.is_finite() {
                return Err(Error::NonFiniteRate(format!(
                    "class pair ({}, {})",
                    a + 1,
                    b + 1
                )));
            }
            w[idx] = rate;
            total += rate;
        }
    }
    Ok(total)
}

impl EnsembleState {
    /// Advance by `horizon` time units with the exact event-driven
    /// stepper: deterministic phase drift between events, copy events
    /// sampled by thinning against the counts-only rate bound. An accepted
    /// event writes the source's `(class, phase)` onto the receiver.
    pub fn step_exact_event(
        &mut self,
        spec: &ModelSpec,
        horizon: f64,
        substep: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<()> {
        self.check_spec(spec)?;
        if !(substep > 0.0) {
            return Err(Error::InvalidSchedule(format!(
                "substep must be positive, got {substep}"
            )));
        }
        let t_end = self.time + horizon;
        let p = self.dim;
        let mut table = ClassTable::build(self);
        let mut w = vec![0.0f64; p * p];
        loop {
            let remaining = t_end - self.time;
            if remaining <= 0.0 {
                self.time = t_end;
                return Ok(());
            }
            let total = bound_table(&table, spec, &mut w)?;
            if total <= 0.0 {
                drift_phases(self, &table.counts, spec, remaining, substep);
                self.time = t_end;
                return Ok(());
            }
            let u: f64 = rng.gen();
            let tau = -(1.0 - u).ln() / total;
            if tau >= remaining {
                drift_phases(self, &table.counts, spec, remaining, substep);
                self.time = t_end;
                return Ok(());
            }
            drift_phases(self, &table.counts, spec, tau, substep);
            self.time += tau;

            // Candidate class pair proportional to the bound weights.
            let mut pick = rng.gen::<f64>() * total;
            let mut pair = p * p - 1;
            for (idx, &weight) in w.iter().enumerate() {
                if weight <= 0.0 {
                    continue;
                }
                pick -= weight;
                if pick <= 0.0 {
                    pair = idx;
                    break;
                }
            }
            let (a, b) = (pair / p, pair % p);
            let (source_phase, receiver, accept) = match &self.phases {
                PhaseStore::Aligned(cp) => {
                    let j = table.free[b][rng.gen_range(0..table.free[b].len())] as usize;
                    let theta = cp[a] - cp[b] + spec.phase_offset(a, b);
                    (cp[a], j, sin_plus(theta))
                }
                PhaseStore::PerMember(phases) => {
                    let i = table.all[a][rng.gen_range(0..table.all[a].len())] as usize;
                    let j = table.free[b][rng.gen_range(0..table.free[b].len())] as usize;
                    let theta = phases[i] - phases[j] + spec.phase_offset(a, b);
                    (phases[i], j, sin_plus(theta))
                }
            };
            if rng.gen::<f64>() < accept {
                self.beables[receiver] = a;
                if let PhaseStore::PerMember(phases) = &mut self.phases {
                    phases[receiver] = source_phase;
                }
                table.move_member(receiver, b, a);
            }
        }
    }

    /// Advance by one fixed step `dt`: each unpinned member independently
    /// receives at most one copy with probability `1 - exp(-dt * rate)`,
    /// all rates and counts read from the pre-step snapshot; then the
    /// phases take one ODE step. Enforces
    /// `dt * max member rate <=` [`TAU_LEAP_RATE_BOUND`].
    pub fn step_tau_leap(
        &mut self,
        spec: &ModelSpec,
        dt: f64,
        substep: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<()> {
        self.check_spec(spec)?;
        if !(dt > 0.0) || !(substep > 0.0) {
            return Err(Error::InvalidSchedule(format!(
                "dt and substep must be positive, got {dt}, {substep}"
            )));
        }
        let p = self.dim;
        let snapshot_counts = self.occupation_counts().counts().to_vec();

        // (receiver, class, phase) updates, committed synchronously.
        let mut updates: Vec<(usize, usize, f64)> = Vec::new();

        match &self.phases {
            PhaseStore::Aligned(cp) => {
                // Incoming rate seen by one member of class b from all of
                // class a: FLOW_SCALE * sqrt(n_a / n_b) R_ab sin+(theta_ab).
                let mut incoming = vec![0.0f64; p * p];
                let mut lambda = vec![0.0f64; p];
                for b in 0..p {
                    if snapshot_counts[b] == 0 {
                        continue;
                    }
                    for a in 0..p {
                        if a == b || snapshot_counts[a] == 0 {
                            continue;
                        }
                        let r = spec.coupling(a, b);
                        if r == 0.0 {
                            continue;
                        }
                        let rate = FLOW_SCALE
                            * (snapshot_counts[a] as f64 / snapshot_counts[b] as f64).sqrt()
                            * r
                            * sin_plus(cp[a] - cp[b] + spec.phase_offset(a, b));
                        incoming[b * p + a] = rate;
                        lambda[b] += rate;
                    }
                }
                let max_rate = lambda.iter().cloned().fold(0.0f64, f64::max);
                if dt * max_rate > TAU_LEAP_RATE_BOUND * (1.0 + 1e-9) {
                    return Err(Error::StepTooLarge {
                        dt,
                        product: dt * max_rate,
                    });
                }
                let cp_snapshot = cp.clone();
                for j in 0..self.len() {
                    if self.pinned[j] {
                        continue;
                    }
                    let b = self.beables[j];
                    let lam = lambda[b];
                    if lam <= 0.0 {
                        continue;
                    }
                    if rng.gen::<f64>() < 1.0 - (-dt * lam).exp() {
                        let mut pick = rng.gen::<f64>() * lam;
                        let mut chosen = 0;
                        for a in 0..p {
                            let rate = incoming[b * p + a];
                            if rate <= 0.0 {
                                continue;
                            }
                            pick -= rate;
                            chosen = a;
                            if pick <= 0.0 {
                                break;
                            }
                        }
                        updates.push((j, chosen, cp_snapshot[chosen]));
                    }
                }
            }
            PhaseStore::PerMember(phases) => {
                let n = self.len();
                let mut rates = vec![0.0f64; n];
                let mut pair_norm = vec![0.0f64; p * p];
                for a in 0..p {
                    for b in 0..p {
                        if a != b
                            && snapshot_counts[a] > 0
                            && snapshot_counts[b] > 0
                            && spec.coupling(a, b) != 0.0
                        {
                            pair_norm[a * p + b] = FLOW_SCALE * spec.coupling(a, b)
                                / ((snapshot_counts[a] * snapshot_counts[b]) as f64).sqrt();
                        }
                    }
                }
                let member_rate = |i: usize, j: usize| -> f64 {
                    let w = pair_norm[self.beables[i] * p + self.beables[j]];
                    if w == 0.0 {
                        0.0
                    } else {
                        w * sin_plus(
                            phases[i] - phases[j]
                                + spec.phase_offset(self.beables[i], self.beables[j]),
                        )
                    }
                };
                let mut max_rate = 0.0f64;
                for j in 0..n {
                    if self.pinned[j] {
                        continue;
                    }
                    let mut lam = 0.0;
                    for i in 0..n {
                        if i != j {
                            lam += member_rate(i, j);
                        }
                    }
                    rates[j] = lam;
                    max_rate = max_rate.max(lam);
                }
                if dt * max_rate > TAU_LEAP_RATE_BOUND * (1.0 + 1e-9) {
                    return Err(Error::StepTooLarge {
                        dt,
                        product: dt * max_rate,
                    });
                }
                for j in 0..n {
                    if self.pinned[j] || rates[j] <= 0.0 {
                        continue;
                    }
                    if rng.gen::<f64>() < 1.0 - (-dt * rates[j]).exp() {
                        let mut pick = rng.gen::<f64>() * rates[j];
                        let mut chosen = if j == 0 { 1 } else { 0 };
                        for i in 0..n {
                            if i == j {
                                continue;
                            }
                            let rate = member_rate(i, j);
                            if rate <= 0.0 {
                                continue;
                            }
                            pick -= rate;
                            chosen = i;
                            if pick <= 0.0 {
                                break;
                            }
                        }
                        updates.push((j, self.beables[chosen], phases[chosen]));
                    }
                }
            }
        }

        for &(j, class, phase) in &updates {
            self.beables[j] = class;
            if let PhaseStore::PerMember(phases) = &mut self.phases {
                phases[j] = phase;
            }
        }
        let counts_after = self.occupation_counts();
        drift_phases(self, counts_after.counts(), spec, dt, substep);
        self.time += dt;
        Ok(())
    }

    fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        if spec.dim() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "ensemble has {} classes, spec has {}",
                self.dim,
                spec.dim()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// One sampled row: occupation numbers and per-class mean phases (NaN for
/// empty classes).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    pub counts: Vec<usize>,
    pub mean_phases: Vec<f64>,
}

/// Sampled output of [`run`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    pub n_members: usize,
    pub samples: Vec<TrajectorySample>,
}

impl Trajectory {
    /// CSV with header `t,n_1..n_P,phi_1..phi_P` (UTF-8, LF line ends).
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        write!(w, "t")?;
        for a in 1..=self.dim {
            write!(w, ",n_{a}")?;
        }
        for a in 1..=self.dim {
            write!(w, ",phi_{a}")?;
        }
        writeln!(w)?;
        for row in &self.samples {
            write!(w, "{}", row.t)?;
            for &c in &row.counts {
                write!(w, ",{c}")?;
            }
            for &p in &row.mean_phases {
                write!(w, ",{p}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Relative frequencies at sample `k`.
    pub fn frequencies(&self, k: usize) -> Vec<f64> {
        let n = self.n_members as f64;
        self.samples[k]
            .counts
            .iter()
            .map(|&c| c as f64 / n)
            .collect()
    }
}

/// Run `state` through `schedule`, sampling occupation counts and mean
/// class phases at the scheduled times (relative to the state's clock at
/// entry). Deterministic given inputs and the RNG seed.
pub fn run(
    state: &mut EnsembleState,
    spec: &ModelSpec,
    schedule: &StepSchedule,
    rng: &mut ChaCha12Rng,
) -> Result<Trajectory> {
    schedule.validate()?;
    state.check_spec(spec)?;
    let t0 = state.time;
    let mut samples = Vec::with_capacity(schedule.sample_times.len());
    let mut advance =
        |state: &mut EnsembleState, target: f64, rng: &mut ChaCha12Rng| -> Result<()> {
            match schedule.stepper {
                Stepper::ExactEvent => {
                    let span = target - state.time;
                    if span > 0.0 {
                        state.step_exact_event(spec, span, schedule.substep, rng)?;
                    }
                }
                Stepper::TauLeap { dt } => {
                    while state.time < target - 1e-12 {
                        let step = dt.min(target - state.time);
                        state.step_tau_leap(spec, step, schedule.substep, rng)?;
                    }
                    state.time = target;
                }
            }
            Ok(())
        };
    for &ts in &schedule.sample_times {
        advance(state, t0 + ts, rng)?;
        let counts = state.occupation_counts();
        samples.push(TrajectorySample {
            t: state.time,
            counts: counts.counts().to_vec(),
            mean_phases: state.mean_class_phases(),
        });
    }
    advance(state, t0 + schedule.duration, rng)?;
    Ok(Trajectory {
        dim: state.dim,
        n_members: state.len(),
        samples,
    })
}

// ---------------------------------------------------------------------------
// Wire format
// ---------------------------------------------------------------------------

/// Wire form of an ensemble:
/// `{"members": [{"a": 1, "phi": 0.0}, ...], "mode": "aligned"|"per-member"}`.
/// Beable values `a` are 1-based on the wire. Spectators round-trip via an
/// optional per-member `"pinned"` flag.
#[derive(Serialize, Deserialize)]
struct EnsembleDoc {
    members: Vec<MemberDoc>,
    mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct MemberDoc {
    a: usize,
    phi: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pinned: bool,
}

impl EnsembleState {
    /// Load from the JSON member-list format. The class count is the
    /// largest `a` present unless `"dim"` says otherwise.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: EnsembleDoc = serde_json::from_str(s)?;
        if doc.members.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        let max_a = doc.members.iter().map(|m| m.a).max().unwrap_or(0);
        if doc.members.iter().any(|m| m.a == 0) {
            return Err(Error::InvalidMemberDoc(
                "beable values are 1-based; got a = 0".into(),
            ));
        }
        let dim = doc.dim.unwrap_or(max_a);
        if max_a > dim {
            return Err(Error::InvalidMemberDoc(format!(
                "member has a = {max_a} but dim = {dim}"
            )));
        }
        let members: Vec<MemberState> = doc
            .members
            .iter()
            .map(|m| MemberState {
                beable: m.a - 1,
                phase: m.phi,
            })
            .collect();
        let mut state = match doc.mode.as_str() {
            "aligned" => Self::aligned_from_members(dim, &members)?,
            "per-member" => Self::per_member(dim, &members)?,
            other => {
                return Err(Error::InvalidMemberDoc(format!(
                    "mode must be \"aligned\" or \"per-member\", got {other:?}"
                )))
            }
        };
        for (i, m) in doc.members.iter().enumerate() {
            state.pinned[i] = m.pinned;
        }
        Ok(state)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let doc = EnsembleDoc {
            members: (0..self.len())
                .map(|i| MemberDoc {
                    a: self.beables[i] + 1,
                    phi: self.phase(i),
                    pinned: self.pinned[i],
                })
                .collect(),
            mode: match self.mode() {
                PhaseMode::Aligned => "aligned".into(),
                PhaseMode::PerMember => "per-member".into(),
            },
            dim: Some(self.dim),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}
