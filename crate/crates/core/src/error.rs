//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while building or evolving a model.
///
/// Indices in messages are 1-based to match the `n_1..n_P` column naming
/// used by the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("asymmetric coupling at ({0}, {1})")]
    AsymmetricCoupling(usize, usize),
    #[error("negative coupling at ({0}, {1})")]
    NegativeCoupling(usize, usize),
    #[error("nonzero coupling diagonal at ({0}, {0})")]
    CouplingDiagonal(usize),
    #[error("phase offsets not antisymmetric (mod 2pi) at ({0}, {1})")]
    PhaseOffsetNotAntisymmetric(usize, usize),
    #[error("nonzero phase offset diagonal at ({0}, {0})")]
    PhaseOffsetDiagonal(usize),
    #[error("hbar must be positive, got {0}")]
    NonPositiveHbar(f64),
    #[error("non-finite entry in {field} at {index}")]
    NonFinite { field: &'static str, index: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not Hermitian at ({0}, {1})")]
    NotHermitian(usize, usize),
    #[error("Hamiltonian diagonal has imaginary part {0:.3e} at ({1}, {1})")]
    ComplexDiagonal(f64, usize),

    #[error("member index {0} out of range (N = {1})")]
    MemberIndex(usize, usize),
    #[error("class index {0} out of range (P = {1})")]
    ClassIndex(usize, usize),
    #[error("source and receiver are the same member ({0})")]
    SamePair(usize),
    #[error("operation requires an aligned ensemble")]
    NotAligned,
    #[error("ensemble must contain at least one member")]
    EmptyEnsemble,
    #[error("members of class {0} do not share a phase (aligned mode)")]
    MisalignedClass(usize),
    #[error("non-finite rate encountered: {0}")]
    NonFiniteRate(String),
    #[error("tau-leap step {dt} too large: dt * max member rate = {product:.3} > 0.1")]
    StepTooLarge { dt: f64, product: f64 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("state is not normalized: sum = {0}")]
    Unnormalized(f64),
    #[error("density of class {class} fell below the node floor at t = {time:.6}")]
    NodeFloor { class: usize, time: f64 },
    #[error("class {0} is empty")]
    EmptyClass(usize),

    #[error("alignment step {dt} too large: dt * stiffness = {product:.3} > 0.1")]
    AlignmentStepTooLarge { dt: f64, product: f64 },
    #[error("stiffness must be positive, got {0}")]
    NonPositiveStiffness(f64),

    #[error("lattice field {0} must be positive")]
    NonPositiveLattice(&'static str),
    #[error("zero density at site {0}")]
    ZeroDensitySite(usize),
    #[error("packet mean reached the lattice boundary at t = {0:.6}")]
    PacketAtBoundary(f64),

    #[error("invalid member document: {0}")]
    InvalidMemberDoc(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
