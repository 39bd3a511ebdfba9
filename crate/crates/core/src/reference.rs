//! Exact ensemble-level dynamics: eigendecomposition propagation for the
//! induced Hamiltonian, and deterministic integration of the equivalent
//! density/phase ODEs. These are the oracles the stochastic core is
//! checked against, so the propagator is built to be more accurate than
//! anything it verifies.
//!
//! Conventions: a class with density `rho_a` and phase `phi_a` carries the
//! amplitude `psi_a = sqrt(rho_a) * exp(-i phi_a)`. With the induced
//! Hamiltonian of [`ModelSpec::to_hamiltonian`] the exact equations are
//!
//! ```text
//! drho_a/dt = FLOW_SCALE * sum_{b != a} sqrt(rho_a rho_b) R_ab sin(phi_a - phi_b + delta_ab)
//! dphi_a/dt = omega_a   +  sum_{b != a} sqrt(rho_b / rho_a) R_ab cos(phi_a - phi_b + delta_ab)
//! ```
//!
//! both verified against the propagator in this module's tests.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spec::{wrap_angle, Hamiltonian, ModelSpec, FLOW_SCALE};

/// How far a state's total probability may sit from 1.
pub const NORM_TOL: f64 = 1e-10;

/// Densities below this floor make the phase equation singular
/// (`sqrt(rho_b / rho_a)` diverges); the integrator refuses to continue
/// rather than regularize, since that is exactly where the ensemble
/// correspondence is expected to break.
pub const NODE_FLOOR: f64 = 1e-8;

/// `P` complex amplitudes with unit total probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuantumStateDoc", into = "QuantumStateDoc")]
pub struct QuantumState {
    amplitudes: Vec<Complex64>,
}

impl QuantumState {
    pub fn new(amplitudes: Vec<Complex64>) -> Result<Self> {
        if amplitudes.is_empty() {
            return Err(Error::DimensionMismatch("state must have P >= 1".into()));
        }
        let norm_sq: f64 = amplitudes.iter().map(|z| z.norm_sqr()).sum();
        if (norm_sq - 1.0).abs() > NORM_TOL {
            return Err(Error::Unnormalized(norm_sq));
        }
        Ok(Self { amplitudes })
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    /// `rho_a = |psi_a|^2`.
    pub fn densities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|z| z.norm_sqr()).collect()
    }

    pub fn norm_sq(&self) -> f64 {
        self.amplitudes.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Madelung form: `rho_a = |psi_a|^2`, `phi_a = -arg(psi_a)` in
    /// `[0, 2pi)`. Phases of zero-amplitude classes are undefined and
    /// stored as NaN.
    pub fn to_madelung(&self) -> MadelungState {
        let rho: Vec<f64> = self.densities();
        let phi: Vec<f64> = self
            .amplitudes
            .iter()
            .map(|z| {
                if z.norm_sqr() > 0.0 {
                    wrap_angle(-z.arg())
                } else {
                    f64::NAN
                }
            })
            .collect();
        MadelungState { rho, phi }
    }
}

/// Wire form: amplitudes as `[re, im]` pairs.
#[derive(Serialize, Deserialize)]
struct QuantumStateDoc {
    amplitudes: Vec<[f64; 2]>,
}

impl TryFrom<QuantumStateDoc> for QuantumState {
    type Error = Error;
    fn try_from(doc: QuantumStateDoc) -> Result<Self> {
        QuantumState::new(
            doc.amplitudes
                .iter()
                .map(|p| Complex64::new(p[0], p[1]))
                .collect(),
        )
    }
}

impl From<QuantumState> for QuantumStateDoc {
    fn from(q: QuantumState) -> Self {
        QuantumStateDoc {
            amplitudes: q.amplitudes.iter().map(|z| [z.re, z.im]).collect(),
        }
    }
}

/// Density/phase pair `(rho_a, phi_a)`. Phases are meaningful only where
/// `rho_a > 0`; undefined entries are NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MadelungStateDoc", into = "MadelungStateDoc")]
pub struct MadelungState {
    rho: Vec<f64>,
    phi: Vec<f64>,
}

impl MadelungState {
    pub fn new(rho: Vec<f64>, phi: Vec<f64>) -> Result<Self> {
        if rho.is_empty() || rho.len() != phi.len() {
            return Err(Error::DimensionMismatch(format!(
                "rho has {} entries, phi has {}",
                rho.len(),
                phi.len()
            )));
        }
        let mut sum = 0.0;
        for (a, &r) in rho.iter().enumerate() {
            if !r.is_finite() || r < 0.0 {
                return Err(Error::NonFinite {
                    field: "rho",
                    index: format!("{}", a + 1),
                });
            }
            if r > 0.0 && !phi[a].is_finite() {
                return Err(Error::NonFinite {
                    field: "phi",
                    index: format!("{}", a + 1),
                });
            }
            sum += r;
        }
        if (sum - 1.0).abs() > NORM_TOL {
            return Err(Error::Unnormalized(sum));
        }
        Ok(Self { rho, phi })
    }

    pub fn dim(&self) -> usize {
        self.rho.len()
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    /// Measurement probability of class `a`: the relative frequency
    /// `rho_a` itself.
    pub fn observation_probability(&self, a: usize) -> Result<f64> {
        self.rho
            .get(a)
            .copied()
            .ok_or(Error::ClassIndex(a, self.rho.len()))
    }

    /// `psi_a = sqrt(rho_a) exp(-i phi_a)`; zero-density classes map to 0.
    pub fn to_quantum(&self) -> Result<QuantumState> {
        let amplitudes = self
            .rho
            .iter()
            .zip(&self.phi)
            .map(|(&r, &p)| {
                if r > 0.0 {
                    Complex64::from_polar(r.sqrt(), -p)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect();
        QuantumState::new(amplitudes)
    }
}

#[derive(Serialize, Deserialize)]
struct MadelungStateDoc {
    rho: Vec<f64>,
    phi: Vec<f64>,
}

impl TryFrom<MadelungStateDoc> for MadelungState {
    type Error = Error;
    fn try_from(doc: MadelungStateDoc) -> Result<Self> {
        MadelungState::new(doc.rho, doc.phi)
    }
}

impl From<MadelungState> for MadelungStateDoc {
    fn from(m: MadelungState) -> Self {
        MadelungStateDoc {
            rho: m.rho,
            phi: m.phi,
        }
    }
}

/// Unitary propagator `exp(-i H t / hbar)` realized through one Hermitian
/// eigendecomposition, reused across evaluation times.
pub struct SchrodingerPropagator {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<Complex64>,
    hbar: f64,
}

impl SchrodingerPropagator {
    pub fn new(h: &Hamiltonian, hbar: f64) -> Result<Self> {
        if !hbar.is_finite() || hbar <= 0.0 {
            return Err(Error::NonPositiveHbar(hbar));
        }
        let eig = h.matrix().clone().symmetric_eigen();
        Ok(Self {
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
            hbar,
        })
    }

    /// Propagator for the Hamiltonian induced by `spec`, with the spec's
    /// own `hbar`.
    pub fn for_spec(spec: &ModelSpec) -> Result<Self> {
        Self::new(&spec.to_hamiltonian(), spec.hbar())
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `psi(t) = V exp(-i E t / hbar) V^dagger psi(0)`.
    pub fn evolve(&self, q: &QuantumState, t: f64) -> Result<QuantumState> {
        if q.dim() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "state has {} amplitudes, Hamiltonian is {}x{}",
                q.dim(),
                self.dim(),
                self.dim()
            )));
        }
        let psi0 = DVector::from_column_slice(q.amplitudes());
        let coeffs = self.eigenvectors.adjoint() * psi0;
        let rotated = DVector::from_fn(self.dim(), |k, _| {
            coeffs[k] * Complex64::from_polar(1.0, -self.eigenvalues[k] * t / self.hbar)
        });
        let psi = &self.eigenvectors * rotated;
        QuantumState::new(psi.iter().copied().collect())
    }
}

/// One-shot eigendecomposition propagation. For many evaluation times on
/// one Hamiltonian build a [`SchrodingerPropagator`] instead.
pub fn evolve_schrodinger(
    q: &QuantumState,
    h: &Hamiltonian,
    hbar: f64,
    t: f64,
) -> Result<QuantumState> {
    SchrodingerPropagator::new(h, hbar)?.evolve(q, t)
}

/// Right-hand side of the density/phase equations. `rho` entries must be
/// positive wherever they participate.
fn madelung_rhs(spec: &ModelSpec, rho: &[f64], phi: &[f64], drho: &mut [f64], dphi: &mut [f64]) {
    let p = spec.dim();
    let sqrt_rho: Vec<f64> = rho.iter().map(|r| r.sqrt()).collect();
    for a in 0..p {
        let mut flow = 0.0;
        let mut drift = spec.omega(a);
        for b in 0..p {
            if b == a {
                continue;
            }
            let r_ab = spec.coupling(a, b);
            if r_ab == 0.0 {
                continue;
            }
            let theta = phi[a] - phi[b] + spec.phase_offset(a, b);
            flow += sqrt_rho[a] * sqrt_rho[b] * r_ab * theta.sin();
            drift += sqrt_rho[b] / sqrt_rho[a] * r_ab * theta.cos();
        }
        drho[a] = FLOW_SCALE * flow;
        dphi[a] = drift;
    }
}

fn check_floor(rho: &[f64], time: f64) -> Result<()> {
    for (a, &r) in rho.iter().enumerate() {
        if r < NODE_FLOOR {
            return Err(Error::NodeFloor { class: a + 1, time });
        }
    }
    Ok(())
}

/// Classical fourth-order fixed-step integration of the density/phase
/// equations over `t`, with step size at most `step` (the actual step is
/// `t / ceil(t / step)` so the horizon is hit exactly).
///
/// Errors with the class and time if any density falls below
/// [`NODE_FLOOR`] along the way. Total probability is conserved by the
/// flow's antisymmetry up to roundoff. Returned phases are wrapped to
/// `[0, 2pi)`.
pub fn integrate_madelung(
    m: &MadelungState,
    spec: &ModelSpec,
    t: f64,
    step: f64,
) -> Result<MadelungState> {
    let samples = integrate_madelung_sampled(m, spec, &[t], step)?;
    Ok(samples.into_iter().next().expect("one sample requested"))
}

/// As [`integrate_madelung`], sampling the state at each of `times`
/// (nondecreasing; a leading 0 samples the initial state).
pub fn integrate_madelung_sampled(
    m: &MadelungState,
    spec: &ModelSpec,
    times: &[f64],
    step: f64,
) -> Result<Vec<MadelungState>> {
    if m.dim() != spec.dim() {
        return Err(Error::DimensionMismatch(format!(
            "state has {} classes, spec has {}",
            m.dim(),
            spec.dim()
        )));
    }
    if !(step > 0.0) {
        return Err(Error::InvalidSchedule(format!(
            "step must be positive, got {step}"
        )));
    }
    let p = m.dim();
    let mut rho = m.rho().to_vec();
    let mut phi = m.phi().to_vec();
    let mut t_now = 0.0;
    check_floor(&rho, t_now)?;

    let mut out = Vec::with_capacity(times.len());
    let mut k1r = vec![0.0; p];
    let mut k1p = vec![0.0; p];
    let mut k2r = vec![0.0; p];
    let mut k2p = vec![0.0; p];
    let mut k3r = vec![0.0; p];
    let mut k3p = vec![0.0; p];
    let mut k4r = vec![0.0; p];
    let mut k4p = vec![0.0; p];
    let mut sr = vec![0.0; p];
    let mut sp = vec![0.0; p];

    for &t_target in times {
        if t_target < t_now - 1e-12 {
            return Err(Error::InvalidSchedule(format!(
                "sample times must be nondecreasing ({t_target} after {t_now})"
            )));
        }
        let span = (t_target - t_now).max(0.0);
        if span > 0.0 {
            let n_steps = (span / step).ceil().max(1.0) as usize;
            let h = span / n_steps as f64;
            for _ in 0..n_steps {
                madelung_rhs(spec, &rho, &phi, &mut k1r, &mut k1p);
                stage(&rho, &phi, &k1r, &k1p, 0.5 * h, &mut sr, &mut sp);
                madelung_rhs(spec, &sr, &sp, &mut k2r, &mut k2p);
                stage(&rho, &phi, &k2r, &k2p, 0.5 * h, &mut sr, &mut sp);
                madelung_rhs(spec, &sr, &sp, &mut k3r, &mut k3p);
                stage(&rho, &phi, &k3r, &k3p, h, &mut sr, &mut sp);
                madelung_rhs(spec, &sr, &sp, &mut k4r, &mut k4p);
                for a in 0..p {
                    rho[a] += h / 6.0 * (k1r[a] + 2.0 * k2r[a] + 2.0 * k3r[a] + k4r[a]);
                    phi[a] += h / 6.0 * (k1p[a] + 2.0 * k2p[a] + 2.0 * k3p[a] + k4p[a]);
                }
                t_now += h;
                check_floor(&rho, t_now)?;
            }
            t_now = t_target;
        }
        out.push(MadelungState {
            rho: rho.clone(),
            phi: phi.iter().map(|&x| wrap_angle(x)).collect(),
        });
    }
    Ok(out)
}

#[inline]
fn stage(rho: &[f64], phi: &[f64], kr: &[f64], kp: &[f64], h: f64, sr: &mut [f64], sp: &mut [f64]) {
    for a in 0..rho.len() {
        // Stage densities are clamped away from zero so sqrt stays real;
        // the floor check on committed states still reports node proximity.
        sr[a] = (rho[a] + h * kr[a]).max(NODE_FLOOR * 1e-3);
        sp[a] = phi[a] + h * kp[a];
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::MadelungState;
    use crate::spec::ModelSpec;
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand_chacha::ChaCha12Rng;
    use std::f64::consts::PI;

    /// Random validated spec with couplings in `[0, r_scale]`, offsets in
    /// `(-0.95 pi, 0.95 pi)` and frequencies in `[-1, 1]`.
    pub fn random_spec(rng: &mut ChaCha12Rng, p: usize, r_scale: f64) -> ModelSpec {
        let mut coupling = DMatrix::zeros(p, p);
        let mut delta = DMatrix::zeros(p, p);
        for a in 0..p {
            for b in (a + 1)..p {
                let r = rng.gen::<f64>() * r_scale;
                coupling[(a, b)] = r;
                coupling[(b, a)] = r;
                let d = (rng.gen::<f64>() - 0.5) * 2.0 * PI * 0.95;
                delta[(a, b)] = d;
                delta[(b, a)] = -d;
            }
        }
        let omega: Vec<f64> = (0..p).map(|_| (rng.gen::<f64>() - 0.5) * 2.0).collect();
        ModelSpec::new(1.0, omega, coupling, delta).unwrap()
    }

    /// Random state mixed toward uniform so every class starts well off the
    /// node floor (min density >= 1/(2P)).
    pub fn random_interior_state(rng: &mut ChaCha12Rng, p: usize) -> MadelungState {
        let raw: Vec<f64> = (0..p).map(|_| rng.gen::<f64>() + 0.05).collect();
        let sum: f64 = raw.iter().sum();
        let rho: Vec<f64> = raw
            .iter()
            .map(|r| 0.5 * r / sum + 0.5 / p as f64)
            .collect();
        let phi: Vec<f64> = (0..p).map(|_| rng.gen::<f64>() * 2.0 * PI).collect();
        MadelungState::new(rho, phi).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::{random_interior_state, random_spec};
    use super::*;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use std::f64::consts::PI;

    fn sigma_x_spec() -> ModelSpec {
        let coupling = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        ModelSpec::new(1.0, vec![0.0, 0.0], coupling, DMatrix::zeros(2, 2)).unwrap()
    }

    #[test]
    fn quantum_state_rejects_unnormalized() {
        let err = QuantumState::new(vec![Complex64::new(1.0, 0.0), Complex64::new(0.5, 0.0)]);
        assert!(matches!(err, Err(Error::Unnormalized(_))));
    }

    #[test]
    fn madelung_quantum_conversions() {
        // rho = (1, 0) with phi_1 = 0 -> psi = (1, 0)
        let m = MadelungState::new(vec![1.0, 0.0], vec![0.0, f64::NAN]).unwrap();
        let q = m.to_quantum().unwrap();
        assert_eq!(q.amplitudes()[0], Complex64::new(1.0, 0.0));
        assert_eq!(q.amplitudes()[1], Complex64::new(0.0, 0.0));

        // rho = (1/2, 1/2), phi = (0, pi/2) -> psi = (1/sqrt2, e^{-i pi/2}/sqrt2)
        let m = MadelungState::new(vec![0.5, 0.5], vec![0.0, PI / 2.0]).unwrap();
        let q = m.to_quantum().unwrap();
        let s = 0.5f64.sqrt();
        assert!((q.amplitudes()[0] - Complex64::new(s, 0.0)).norm() < 1e-15);
        assert!((q.amplitudes()[1] - Complex64::new(0.0, -s)).norm() < 1e-15);
    }

    #[test]
    fn conversion_roundtrip_on_positive_densities() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = random_interior_state(&mut rng, 5);
            let back = m.to_quantum().unwrap().to_madelung();
            for a in 0..5 {
                assert!((back.rho()[a] - m.rho()[a]).abs() < 1e-14);
                let d = (back.phi()[a] - m.phi()[a]).rem_euclid(2.0 * PI);
                assert!(d.min(2.0 * PI - d) < 1e-12, "phase mismatch {d}");
            }
        }
    }

    #[test]
    fn observation_probability_is_relative_frequency() {
        let m = MadelungState::new(vec![0.75, 0.25], vec![0.0, 0.0]).unwrap();
        assert_eq!(m.observation_probability(0).unwrap(), 0.75);
        assert_eq!(m.observation_probability(1).unwrap(), 0.25);
        let total: f64 = (0..2).map(|a| m.observation_probability(a).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-15);
        assert!(m.observation_probability(2).is_err());
    }

    #[test]
    fn evolve_identity_at_zero_time() {
        let q =
            QuantumState::new(vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]).unwrap();
        let h = sigma_x_spec().to_hamiltonian();
        let out = evolve_schrodinger(&q, &h, 1.0, 0.0).unwrap();
        for a in 0..2 {
            assert!((out.amplitudes()[a] - q.amplitudes()[a]).norm() < 1e-14);
        }
    }

    #[test]
    fn rabi_half_period_inverts_population() {
        // exp(-i sigma_x t) on (1, 0): rho_1 = cos^2 t, so t = pi/2 empties it.
        let q =
            QuantumState::new(vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]).unwrap();
        let h = sigma_x_spec().to_hamiltonian();
        let out = evolve_schrodinger(&q, &h, 1.0, PI / 2.0).unwrap();
        let rho = out.densities();
        assert!(rho[0].abs() < 1e-12, "rho_1 = {}", rho[0]);
        assert!((rho[1] - 1.0).abs() < 1e-12);

        // And the closed form along the way.
        let prop = SchrodingerPropagator::new(&h, 1.0).unwrap();
        for k in 0..8 {
            let t = 0.3 * k as f64;
            let rho = prop.evolve(&q, t).unwrap().densities();
            assert!((rho[0] - t.cos().powi(2)).abs() < 1e-12);
        }
    }

    #[test]
    fn unitarity_norm_drift() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for p in [2, 5, 8] {
            let spec = random_spec(&mut rng, p, 1.0);
            let prop = SchrodingerPropagator::for_spec(&spec).unwrap();
            let q = random_interior_state(&mut rng, p).to_quantum().unwrap();
            for t in [0.1, 1.0, 10.0, 100.0] {
                let drift = (prop.evolve(&q, t).unwrap().norm_sq() - 1.0).abs();
                assert!(drift < 1e-12, "P={p} t={t}: norm drift {drift:.3e}");
            }
        }
    }

    #[test]
    fn spectral_shift_leaves_densities_unchanged() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let spec = random_spec(&mut rng, 4, 1.0);
        let q = random_interior_state(&mut rng, 4).to_quantum().unwrap();
        let h = spec.to_hamiltonian();
        let shifted = Hamiltonian::new(
            h.matrix() + DMatrix::<Complex64>::identity(4, 4) * Complex64::new(2.7, 0.0),
        )
        .unwrap();
        for t in [0.5, 3.0] {
            let r1 = evolve_schrodinger(&q, &h, 1.0, t).unwrap().densities();
            let r2 = evolve_schrodinger(&q, &shifted, 1.0, t).unwrap().densities();
            for a in 0..4 {
                assert!((r1[a] - r2[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn free_rotation_without_coupling() {
        let spec = ModelSpec::new(
            1.0,
            vec![0.7, -0.3],
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        let m = MadelungState::new(vec![0.4, 0.6], vec![0.1, 0.2]).unwrap();
        let out = integrate_madelung(&m, &spec, 2.0, 0.01).unwrap();
        assert!((out.rho()[0] - 0.4).abs() < 1e-14);
        assert!((out.phi()[0] - wrap_angle(0.1 + 0.7 * 2.0)).abs() < 1e-10);
        assert!((out.phi()[1] - wrap_angle(0.2 - 0.3 * 2.0)).abs() < 1e-10);
    }

    #[test]
    fn ode_matches_eigendecomposition_oracle() {
        // The central equivalence: the density/phase ODEs and the unitary
        // propagator are two routes to the same trajectory.
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for _ in 0..5 {
            let spec = random_spec(&mut rng, 4, 0.5);
            let m0 = random_interior_state(&mut rng, 4);
            let prop = SchrodingerPropagator::for_spec(&spec).unwrap();
            let q0 = m0.to_quantum().unwrap();
            let m1 = integrate_madelung(&m0, &spec, 1.0, 0.002).unwrap();
            let rho_exact = prop.evolve(&q0, 1.0).unwrap().densities();
            for a in 0..4 {
                assert!(
                    (m1.rho()[a] - rho_exact[a]).abs() < 1e-8,
                    "class {a}: ode {} vs exact {}",
                    m1.rho()[a],
                    rho_exact[a]
                );
            }
        }
    }

    #[test]
    fn ode_phases_match_oracle_phases() {
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let spec = random_spec(&mut rng, 4, 0.5);
        let m0 = random_interior_state(&mut rng, 4);
        let prop = SchrodingerPropagator::for_spec(&spec).unwrap();
        let q0 = m0.to_quantum().unwrap();
        let m1 = integrate_madelung(&m0, &spec, 1.0, 0.002).unwrap();
        let exact = prop.evolve(&q0, 1.0).unwrap().to_madelung();
        for a in 0..4 {
            let d = Complex64::from_polar(1.0, m1.phi()[a])
                - Complex64::from_polar(1.0, exact.phi()[a]);
            assert!(d.norm() < 1e-8, "class {a}: phase mismatch {:.3e}", d.norm());
        }
    }

    #[test]
    fn probability_is_conserved() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let spec = random_spec(&mut rng, 5, 1.0);
        let m0 = random_interior_state(&mut rng, 5);
        let out = integrate_madelung_sampled(&m0, &spec, &[1.0, 5.0, 10.0], 0.01).unwrap();
        for (m, t) in out.iter().zip([1.0, 5.0, 10.0]) {
            let sum: f64 = m.rho().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9 * t, "t={t}: sum={sum}");
        }
    }

    #[test]
    fn node_proximity_is_an_error_not_a_guess() {
        // Pure two-state coupling from a nearly pure state drives the small
        // class straight through the floor.
        let spec = sigma_x_spec();
        let m = MadelungState::new(vec![1.0 - 1e-7, 1e-7], vec![0.0, 0.0]).unwrap();
        let err = integrate_madelung(&m, &spec, 1.0, 0.01);
        assert!(matches!(err, Err(Error::NodeFloor { .. })), "{err:?}");
    }

    #[test]
    fn phase_gauge_shift_leaves_densities_unchanged() {
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        let spec = random_spec(&mut rng, 4, 0.8);
        let m0 = random_interior_state(&mut rng, 4);
        let shifted = MadelungState::new(
            m0.rho().to_vec(),
            m0.phi().iter().map(|p| p + 1.234).collect(),
        )
        .unwrap();
        let a_out = integrate_madelung(&m0, &spec, 3.0, 0.01).unwrap();
        let b_out = integrate_madelung(&shifted, &spec, 3.0, 0.01).unwrap();
        for a in 0..4 {
            assert!((a_out.rho()[a] - b_out.rho()[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn time_reversal_roundtrip_at_ode_level() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let spec = random_spec(&mut rng, 4, 0.4);
        let m0 = random_interior_state(&mut rng, 4);
        let fwd = integrate_madelung(&m0, &spec, 1.0, 0.005).unwrap();
        let flipped = MadelungState::new(
            fwd.rho().to_vec(),
            fwd.phi().iter().map(|p| wrap_angle(-p)).collect(),
        )
        .unwrap();
        let back = integrate_madelung(&flipped, &spec.time_reversed(), 1.0, 0.005).unwrap();
        for a in 0..4 {
            assert!((back.rho()[a] - m0.rho()[a]).abs() < 1e-8);
            let d = Complex64::from_polar(1.0, -back.phi()[a])
                - Complex64::from_polar(1.0, m0.phi()[a]);
            assert!(d.norm() < 1e-8);
        }
    }
}
