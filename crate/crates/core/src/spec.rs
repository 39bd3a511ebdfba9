//! Dynamical parameters of a real-ensemble model and their two-way
//! correspondence with a Hermitian Hamiltonian.
//!
//! A model over `P` beable values is specified by per-class angular
//! frequencies `omega_a`, a symmetric nonnegative coupling matrix `R_ab`,
//! an antisymmetric phase-offset matrix `delta_ab` and an action scale
//! `hbar`. The induced Hamiltonian has diagonal `hbar * omega_a` and
//! off-diagonal `hbar * R_ab * exp(i delta_ab)`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Exponent of the occupation ratio `n_a / n_b` in the copy-rate law.
///
/// Time-reversal invariance of the density flow forces this to 1/2; with it
/// the per-pair rate carries the prefactor `1 / sqrt(n_a n_b)`.
pub const COPY_RATE_RATIO_EXPONENT: f64 = 0.5;

/// Exponent of the occupation ratio `n_a / n_b` in the phase-drift law.
///
/// The value -1/2 turns the drift sum over members of class `b` into
/// `sqrt(n_b / n_a) R_ab cos(...)`, the form that matches evolution under
/// the induced Hamiltonian.
pub const DRIFT_RATIO_EXPONENT: f64 = -0.5;

/// Scale applied to the unit pair rates when they drive actual dynamics.
///
/// [`crate::ensemble::EnsembleState::copy_rate`] and
/// [`crate::ensemble::aggregate_class_rate`] are unit-normalized:
/// `R_ab sin^+(phi_a - phi_b + delta_ab) / sqrt(n_a n_b)` per ordered pair.
/// The probability current of the induced Hamiltonian is twice the net flow
/// of those unit rates (`d|psi_a|^2/dt = 2 Re(conj(psi_a) dpsi_a/dt)`), so
/// the steppers and the density ODE multiply pair rates by this constant.
/// The value is pinned by the reference-equivalence tests, which compare
/// ensemble flows against eigendecomposition propagation.
pub const FLOW_SCALE: f64 = 2.0;

/// Tolerance for Hermiticity and antisymmetry checks, relative to the
/// matrix max-norm. Double-precision roundoff headroom.
pub const HERMITICITY_TOL: f64 = 1e-12;

const TWO_PI: f64 = 2.0 * PI;

/// Reduce an angle to `[0, 2pi)`.
pub fn wrap_angle(phi: f64) -> f64 {
    let w = phi.rem_euclid(TWO_PI);
    if w == TWO_PI {
        0.0
    } else {
        w
    }
}

/// Reduce an angle to the canonical branch `(-pi, pi]`.
pub fn wrap_angle_signed(phi: f64) -> f64 {
    let mut w = phi.rem_euclid(TWO_PI);
    if w > PI {
        w -= TWO_PI;
    }
    w
}

/// `sin` clipped to zero where negative; keeps copy rates nonnegative.
#[inline]
pub fn sin_plus(theta: f64) -> f64 {
    theta.sin().max(0.0)
}

/// Validated dynamical data of a real-ensemble model.
///
/// Construct through [`ModelSpec::new`] (or deserialize, which routes
/// through the same validation); instances are immutable afterwards and
/// safe to share across threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelSpecDoc", into = "ModelSpecDoc")]
pub struct ModelSpec {
    dim: usize,
    hbar: f64,
    omega: Vec<f64>,
    coupling: DMatrix<f64>,
    phase_offset: DMatrix<f64>,
}

impl ModelSpec {
    /// Validate and build a spec. Reports the first violated invariant,
    /// with 1-based indices.
    pub fn new(
        hbar: f64,
        omega: Vec<f64>,
        coupling: DMatrix<f64>,
        phase_offset: DMatrix<f64>,
    ) -> Result<Self> {
        let dim = omega.len();
        if dim == 0 {
            return Err(Error::DimensionMismatch("P must be >= 1".into()));
        }
        if coupling.nrows() != dim || coupling.ncols() != dim {
            return Err(Error::DimensionMismatch(format!(
                "coupling is {}x{}, expected {dim}x{dim}",
                coupling.nrows(),
                coupling.ncols()
            )));
        }
        if phase_offset.nrows() != dim || phase_offset.ncols() != dim {
            return Err(Error::DimensionMismatch(format!(
                "phase offset is {}x{}, expected {dim}x{dim}",
                phase_offset.nrows(),
                phase_offset.ncols()
            )));
        }
        if !hbar.is_finite() || hbar <= 0.0 {
            return Err(Error::NonPositiveHbar(hbar));
        }
        for (a, w) in omega.iter().enumerate() {
            if !w.is_finite() {
                return Err(Error::NonFinite {
                    field: "omega",
                    index: format!("{}", a + 1),
                });
            }
        }
        for a in 0..dim {
            for b in 0..dim {
                let r = coupling[(a, b)];
                let d = phase_offset[(a, b)];
                if !r.is_finite() {
                    return Err(Error::NonFinite {
                        field: "coupling",
                        index: format!("({}, {})", a + 1, b + 1),
                    });
                }
                if !d.is_finite() {
                    return Err(Error::NonFinite {
                        field: "phase offset",
                        index: format!("({}, {})", a + 1, b + 1),
                    });
                }
                if a == b {
                    if r != 0.0 {
                        return Err(Error::CouplingDiagonal(a + 1));
                    }
                    if d != 0.0 {
                        return Err(Error::PhaseOffsetDiagonal(a + 1));
                    }
                    continue;
                }
                if r < 0.0 {
                    return Err(Error::NegativeCoupling(a + 1, b + 1));
                }
                if a < b {
                    if r != coupling[(b, a)] {
                        return Err(Error::AsymmetricCoupling(a + 1, b + 1));
                    }
                    if wrap_angle_signed(d + phase_offset[(b, a)]).abs() > HERMITICITY_TOL {
                        return Err(Error::PhaseOffsetNotAntisymmetric(a + 1, b + 1));
                    }
                }
            }
        }
        Ok(Self {
            dim,
            hbar,
            omega,
            coupling,
            phase_offset,
        })
    }

    /// Number of beable values `P`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    /// Angular frequency of class `a` (0-based).
    #[inline]
    pub fn omega(&self, a: usize) -> f64 {
        self.omega[a]
    }

    /// Coupling `R_ab` (0-based indices).
    #[inline]
    pub fn coupling(&self, a: usize, b: usize) -> f64 {
        self.coupling[(a, b)]
    }

    /// Phase offset `delta_ab` (0-based indices).
    #[inline]
    pub fn phase_offset(&self, a: usize, b: usize) -> f64 {
        self.phase_offset[(a, b)]
    }

    /// The induced Hamiltonian: diagonal `hbar * omega_a`, off-diagonal
    /// `hbar * R_ab * exp(i delta_ab)`. Exactly Hermitian by construction:
    /// the `(b, a)` entry is written as the conjugate of `(a, b)`.
    pub fn to_hamiltonian(&self) -> Hamiltonian {
        let p = self.dim;
        let mut m = DMatrix::<Complex64>::zeros(p, p);
        for a in 0..p {
            m[(a, a)] = Complex64::new(self.hbar * self.omega[a], 0.0);
            for b in (a + 1)..p {
                let z = Complex64::from_polar(
                    self.hbar * self.coupling[(a, b)],
                    self.phase_offset[(a, b)],
                );
                m[(a, b)] = z;
                m[(b, a)] = z.conj();
            }
        }
        Hamiltonian { matrix: m }
    }

    /// Time-reversed spec: `delta_ab -> -delta_ab`, everything else fixed.
    /// An involution; the induced Hamiltonian of the result is the entrywise
    /// conjugate of the original one.
    pub fn time_reversed(&self) -> Self {
        let mut rev = self.clone();
        for a in 0..self.dim {
            for b in 0..self.dim {
                if a != b {
                    rev.phase_offset[(a, b)] = -self.phase_offset[(a, b)];
                }
            }
        }
        rev
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Wire form of a [`ModelSpec`]:
/// `{"dim", "hbar", "omega", "R", "delta"}` with row-major matrices.
/// Deserialization runs full validation.
#[derive(Serialize, Deserialize)]
struct ModelSpecDoc {
    dim: usize,
    hbar: f64,
    omega: Vec<f64>,
    #[serde(rename = "R")]
    coupling: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl TryFrom<ModelSpecDoc> for ModelSpec {
    type Error = Error;

    fn try_from(doc: ModelSpecDoc) -> Result<Self> {
        if doc.omega.len() != doc.dim {
            return Err(Error::DimensionMismatch(format!(
                "omega has {} entries, dim = {}",
                doc.omega.len(),
                doc.dim
            )));
        }
        let to_matrix = |rows: &[Vec<f64>], name: &str| -> Result<DMatrix<f64>> {
            if rows.len() != doc.dim || rows.iter().any(|r| r.len() != doc.dim) {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is not a {0}x{0} matrix",
                    doc.dim
                )));
            }
            Ok(DMatrix::from_fn(doc.dim, doc.dim, |a, b| rows[a][b]))
        };
        let coupling = to_matrix(&doc.coupling, "R")?;
        let delta = to_matrix(&doc.delta, "delta")?;
        ModelSpec::new(doc.hbar, doc.omega, coupling, delta)
    }
}

impl From<ModelSpec> for ModelSpecDoc {
    fn from(spec: ModelSpec) -> Self {
        let p = spec.dim;
        ModelSpecDoc {
            dim: p,
            hbar: spec.hbar,
            omega: spec.omega,
            coupling: (0..p)
                .map(|a| (0..p).map(|b| spec.coupling[(a, b)]).collect())
                .collect(),
            delta: (0..p)
                .map(|a| (0..p).map(|b| spec.phase_offset[(a, b)]).collect())
                .collect(),
        }
    }
}

/// Dense Hermitian Hamiltonian in energy units.
#[derive(Debug, Clone, PartialEq)]
pub struct Hamiltonian {
    matrix: DMatrix<Complex64>,
}

impl Hamiltonian {
    /// Wrap a matrix, checking Hermiticity to [`HERMITICITY_TOL`] relative
    /// to the max-norm.
    pub fn new(matrix: DMatrix<Complex64>) -> Result<Self> {
        let p = matrix.nrows();
        if p == 0 || matrix.ncols() != p {
            return Err(Error::DimensionMismatch(format!(
                "Hamiltonian is {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let scale = matrix
            .iter()
            .map(|z| z.norm())
            .fold(0.0f64, f64::max)
            .max(1.0);
        for a in 0..p {
            for b in a..p {
                if (matrix[(a, b)] - matrix[(b, a)].conj()).norm() > HERMITICITY_TOL * scale {
                    return Err(Error::NotHermitian(a + 1, b + 1));
                }
            }
        }
        Ok(Self { matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    #[inline]
    pub fn entry(&self, a: usize, b: usize) -> Complex64 {
        self.matrix[(a, b)]
    }

    /// Recover the model parameters: `omega_a = Re H_aa / hbar`,
    /// `R_ab = |H_ab| / hbar`, `delta_ab = arg H_ab` in `(-pi, pi]`, with
    /// `delta_ab = 0` wherever `R_ab = 0` (the argument of zero carries no
    /// information and the induced Hamiltonian does not depend on it).
    ///
    /// Errors when a diagonal entry has an imaginary part beyond
    /// [`HERMITICITY_TOL`] relative to the max-norm.
    pub fn to_spec(&self, hbar: f64) -> Result<ModelSpec> {
        if !hbar.is_finite() || hbar <= 0.0 {
            return Err(Error::NonPositiveHbar(hbar));
        }
        let p = self.dim();
        let scale = self
            .matrix
            .iter()
            .map(|z| z.norm())
            .fold(0.0f64, f64::max)
            .max(1.0);
        let mut omega = Vec::with_capacity(p);
        for a in 0..p {
            let z = self.matrix[(a, a)];
            if z.im.abs() > HERMITICITY_TOL * scale {
                return Err(Error::ComplexDiagonal(z.im, a + 1));
            }
            omega.push(z.re / hbar);
        }
        let mut coupling = DMatrix::zeros(p, p);
        let mut delta = DMatrix::zeros(p, p);
        for a in 0..p {
            for b in (a + 1)..p {
                let z = self.matrix[(a, b)];
                let r = z.norm() / hbar;
                coupling[(a, b)] = r;
                coupling[(b, a)] = r;
                if r > 0.0 {
                    // atan2 lands in [-pi, pi]; fold -pi onto the canonical
                    // branch so the representative is unique.
                    let mut arg = z.arg();
                    if arg <= -PI {
                        arg = PI;
                    }
                    delta[(a, b)] = arg;
                    delta[(b, a)] = if arg == PI { PI } else { -arg };
                }
            }
        }
        ModelSpec::new(hbar, omega, coupling, delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn two_state_spec(r: f64, delta: f64, omega: [f64; 2], hbar: f64) -> ModelSpec {
        let coupling = DMatrix::from_row_slice(2, 2, &[0.0, r, r, 0.0]);
        let offsets = DMatrix::from_row_slice(2, 2, &[0.0, delta, -delta, 0.0]);
        ModelSpec::new(hbar, omega.to_vec(), coupling, offsets).unwrap()
    }

    #[test]
    fn accepts_valid_two_state_spec() {
        let spec = two_state_spec(1.0, 0.3, [0.0, 0.0], 1.0);
        assert_eq!(spec.dim(), 2);
        assert_eq!(spec.coupling(0, 1), 1.0);
        assert_eq!(spec.phase_offset(1, 0), -0.3);
    }

    #[test]
    fn rejects_asymmetric_coupling() {
        let coupling = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0]);
        let err = ModelSpec::new(1.0, vec![0.0, 0.0], coupling, DMatrix::zeros(2, 2)).unwrap_err();
        assert_eq!(err.to_string(), "asymmetric coupling at (1, 2)");
    }

    #[test]
    fn rejects_negative_coupling_and_bad_hbar() {
        let coupling = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]);
        assert!(matches!(
            ModelSpec::new(1.0, vec![0.0, 0.0], coupling, DMatrix::zeros(2, 2)),
            Err(Error::NegativeCoupling(1, 2))
        ));
        assert!(matches!(
            ModelSpec::new(0.0, vec![0.0], DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)),
            Err(Error::NonPositiveHbar(_))
        ));
    }

    #[test]
    fn rejects_non_antisymmetric_offsets() {
        let coupling = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let offsets = DMatrix::from_row_slice(2, 2, &[0.0, 0.3, 0.3, 0.0]);
        assert!(matches!(
            ModelSpec::new(1.0, vec![0.0, 0.0], coupling, offsets),
            Err(Error::PhaseOffsetNotAntisymmetric(1, 2))
        ));
    }

    #[test]
    fn accepts_offsets_antisymmetric_mod_two_pi() {
        // delta_ab = pi together with delta_ba = pi satisfies antisymmetry
        // mod 2pi, which is what Hermiticity actually needs.
        let coupling = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let offsets = DMatrix::from_row_slice(2, 2, &[0.0, PI, PI, 0.0]);
        let spec = ModelSpec::new(1.0, vec![0.0, 0.0], coupling, offsets).unwrap();
        let h = spec.to_hamiltonian();
        assert!((h.entry(0, 1) - h.entry(1, 0).conj()).norm() < 1e-15);
    }

    #[test]
    fn accepts_degenerate_one_state_model() {
        let spec = ModelSpec::new(1.0, vec![5.0], DMatrix::zeros(1, 1), DMatrix::zeros(1, 1));
        assert!(spec.is_ok());
    }

    #[test]
    fn hamiltonian_of_symmetric_coupler_is_sigma_x() {
        let spec = two_state_spec(1.0, 0.0, [0.0, 0.0], 1.0);
        let h = spec.to_hamiltonian();
        assert_eq!(h.entry(0, 0), Complex64::new(0.0, 0.0));
        assert_eq!(h.entry(0, 1), Complex64::new(1.0, 0.0));
        assert_eq!(h.entry(1, 0), Complex64::new(1.0, 0.0));
        assert_eq!(h.entry(1, 1), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn hamiltonian_zero_coupling_is_diagonal() {
        let spec = two_state_spec(0.0, 0.0, [2.0, 3.0], 1.0);
        let h = spec.to_hamiltonian();
        assert_eq!(h.entry(0, 0), Complex64::new(2.0, 0.0));
        assert_eq!(h.entry(1, 1), Complex64::new(3.0, 0.0));
        assert_eq!(h.entry(0, 1), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn hamiltonian_quarter_phase_offset() {
        let spec = two_state_spec(1.0, PI / 2.0, [0.0, 0.0], 2.0);
        let h = spec.to_hamiltonian();
        assert!((h.entry(0, 1) - Complex64::new(0.0, 2.0)).norm() < 1e-15);
        assert!((h.entry(1, 0) - Complex64::new(0.0, -2.0)).norm() < 1e-15);
    }

    #[test]
    fn spec_recovery_from_sigma_x() {
        let m = DMatrix::from_row_slice(2, 2, &[
            Complex64::new(0.0, 0.0),
            Complex64::new(1.0, 0.0),
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 0.0),
        ]);
        let spec = Hamiltonian::new(m).unwrap().to_spec(1.0).unwrap();
        assert_eq!(spec.omega(0), 0.0);
        assert_eq!(spec.coupling(0, 1), 1.0);
        assert_eq!(spec.phase_offset(0, 1), 0.0);
    }

    #[test]
    fn spec_recovery_from_sigma_y_like() {
        let m = DMatrix::from_row_slice(2, 2, &[
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 2.0),
            Complex64::new(0.0, -2.0),
            Complex64::new(0.0, 0.0),
        ]);
        let spec = Hamiltonian::new(m).unwrap().to_spec(1.0).unwrap();
        assert_eq!(spec.coupling(0, 1), 2.0);
        assert!((spec.phase_offset(0, 1) - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_hermitian_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[
            Complex64::new(0.0, 0.0),
            Complex64::new(1.0, 0.0),
            Complex64::new(0.5, 0.0),
            Complex64::new(0.0, 0.0),
        ]);
        assert!(matches!(Hamiltonian::new(m), Err(Error::NotHermitian(1, 2))));
    }

    #[test]
    fn time_reverse_negates_offsets_and_is_involutive() {
        let spec = two_state_spec(1.0, 0.3, [0.5, -0.2], 1.0);
        let rev = spec.time_reversed();
        assert_eq!(rev.phase_offset(0, 1), -0.3);
        assert_eq!(rev.coupling(0, 1), 1.0);
        assert_eq!(rev.omega(0), 0.5);
        assert_eq!(rev.time_reversed(), spec);
    }

    #[test]
    fn time_reverse_fixes_zero_offsets() {
        let spec = two_state_spec(1.0, 0.0, [0.0, 0.0], 1.0);
        assert_eq!(spec.time_reversed(), spec);
    }

    #[test]
    fn time_reverse_conjugates_hamiltonian() {
        let spec = two_state_spec(0.7, 1.1, [0.4, 0.9], 1.3);
        let h = spec.to_hamiltonian();
        let hr = spec.time_reversed().to_hamiltonian();
        for a in 0..2 {
            for b in 0..2 {
                assert!((hr.entry(a, b) - h.entry(a, b).conj()).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn json_roundtrip_runs_validation() {
        let spec = two_state_spec(1.0, 0.3, [0.0, 0.0], 1.0);
        let json = spec.to_json_string().unwrap();
        let back = ModelSpec::from_json_str(&json).unwrap();
        assert_eq!(back, spec);

        let bad = r#"{"dim":2,"hbar":1.0,"omega":[0.0,0.0],
            "R":[[0.0,1.0],[2.0,0.0]],"delta":[[0.0,0.0],[0.0,0.0]]}"#;
        assert!(ModelSpec::from_json_str(bad).is_err());
    }
}
