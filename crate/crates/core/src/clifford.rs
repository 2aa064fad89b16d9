//! Concrete Clifford algebra representations acting on spinor fibers.
//!
//! Sign convention: generators square to minus the identity, so Clifford
//! multiplication satisfies v·v·φ = -|v|²φ and every gamma matrix is
//! skew-hermitian. Both signs appear in the literature; this one makes the
//! Lichnerowicz-type identities used elsewhere in the crate come out with
//! +R/4, which is how all downstream checks are normalized.
//!
//! The representation is built deterministically by an iterated tensor
//! product of Pauli matrices: even dimensions double the fiber and append
//! two generators, odd dimensions reuse the even fiber and append the
//! normalized volume element. Odd dimensions have two inequivalent
//! irreducible representations; either satisfies every identity used here,
//! so no attempt is made to distinguish them.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type Spinor = DVector<Complex64>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

/// Matrix representation of the Clifford algebra in dimension `dim`,
/// acting on a complex spinor fiber of dimension `2^(dim/2)`.
#[derive(Debug, Clone)]
pub struct CliffordRep {
    dim: usize,
    fiber_dim: usize,
    gamma: Vec<CMatrix>,
}

fn pauli_x() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO])
}

fn pauli_y() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ZERO, -I, I, ZERO])
}

fn pauli_z() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, -ONE])
}

/// Hermitian anticommuting generators with square +1, built recursively.
fn hermitian_generators(dim: usize) -> Vec<CMatrix> {
    match dim {
        0 => Vec::new(),
        1 => vec![CMatrix::from_element(1, 1, ONE)],
        2 => vec![pauli_x(), pauli_y()],
        n if n % 2 == 0 => {
            let prev = hermitian_generators(n - 2);
            let fiber = prev[0].nrows();
            let id = CMatrix::identity(fiber, fiber);
            let mut out: Vec<CMatrix> = prev.iter().map(|g| g.kronecker(&pauli_z())).collect();
            out.push(id.kronecker(&pauli_x()));
            out.push(id.kronecker(&pauli_y()));
            out
        }
        n => {
            // Odd: append the normalized volume element of the even part.
            let mut out = hermitian_generators(n - 1);
            let m = (n - 1) / 2;
            let fiber = out[0].nrows();
            let mut vol = CMatrix::identity(fiber, fiber);
            for g in &out {
                vol = &vol * g;
            }
            let phase = (-I).powu(m as u32);
            out.push(vol.map(|z| z * phase));
            out
        }
    }
}

impl CliffordRep {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fiber_dim(&self) -> usize {
        self.fiber_dim
    }

    pub fn gamma(&self, a: usize) -> Result<&CMatrix> {
        self.gamma.get(a).ok_or(Error::IndexOutOfRange {
            index: a,
            dim: self.dim,
        })
    }

    pub fn gammas(&self) -> &[CMatrix] {
        &self.gamma
    }
}

/// Build the representation for manifold dimension `dim` (>= 1).
pub fn build_clifford(dim: usize) -> Result<CliffordRep> {
    if dim == 0 {
        return Err(Error::InvalidDimension(0));
    }
    let gamma: Vec<CMatrix> = hermitian_generators(dim)
        .into_iter()
        .map(|g| g.map(|z| z * I))
        .collect();
    let fiber_dim = gamma[0].nrows();
    debug_assert_eq!(fiber_dim, 1 << (dim / 2));
    Ok(CliffordRep {
        dim,
        fiber_dim,
        gamma,
    })
}

/// Clifford multiplication by a vector given in an orthonormal frame:
/// (Σ_a v_a γ_a) φ.
pub fn clifford_mul(rep: &CliffordRep, v: &[f64], spinor: &Spinor) -> Result<Spinor> {
    if v.len() != rep.dim {
        return Err(Error::DimensionMismatch {
            expected: rep.dim,
            got: v.len(),
        });
    }
    if spinor.len() != rep.fiber_dim {
        return Err(Error::DimensionMismatch {
            expected: rep.fiber_dim,
            got: spinor.len(),
        });
    }
    let mut out = Spinor::zeros(rep.fiber_dim);
    for (a, &va) in v.iter().enumerate() {
        if va != 0.0 {
            out += rep.gamma[a] .clone()* spinor * Complex64::new(va, 0.0);
        }
    }
    Ok(out)
}

/// Apply the commutator [γ_a, γ_b] to a spinor. Zero when a == b.
pub fn commutator_action(
    rep: &CliffordRep,
    a: usize,
    b: usize,
    spinor: &Spinor,
) -> Result<Spinor> {
    let ga = rep.gamma(a)?;
    let gb = rep.gamma(b)?;
    if spinor.len() != rep.fiber_dim {
        return Err(Error::DimensionMismatch {
            expected: rep.fiber_dim,
            got: spinor.len(),
        });
    }
    if a == b {
        return Ok(Spinor::zeros(rep.fiber_dim));
    }
    Ok(ga * (gb * spinor) - gb * (ga * spinor))
}

/// Commutator matrix [γ_a, γ_b].
pub fn commutator_matrix(rep: &CliffordRep, a: usize, b: usize) -> Result<CMatrix> {
    let ga = rep.gamma(a)?;
    let gb = rep.gamma(b)?;
    Ok(ga * gb - gb * ga)
}

/// Hermitian inner product, linear in the first argument.
pub fn inner(u: &Spinor, v: &Spinor) -> Complex64 {
    v.dotc(u)
}
