//! Discrete differential geometry on a complete latent graph.
//!
//! A latent vector field assigns a weight to every directed edge of the
//! complete graph on `kappa` nodes; it is stored as a `kappa x kappa` real
//! matrix with zero diagonal (no self-loops). A hidden state plays the role
//! of a scalar function on the nodes. This module provides the gradient and
//! divergence operators, the directional-derivative operator `D_V` with its
//! rotation/flux decomposition, the matrix commutator, and the membership
//! test for the operator space `VF_kappa = { D_V }`.

use nalgebra::{DMatrix, DVector};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::io::SquareMatrixJson;

/// Scalar function on the latent nodes; doubles as the recurrent hidden state.
pub type HiddenState = DVector<f64>;

/// Absolute tolerance for floating-point identity checks, accumulation-aware:
/// flat `1e-12` up to `kappa = 64`, scaled by `kappa * max|entry|` beyond.
pub fn default_tol(kappa: usize, max_abs: f64) -> f64 {
    if kappa > 64 {
        1e-12 * kappa as f64 * max_abs.max(1.0)
    } else {
        1e-12
    }
}

/// Latent vector field: a square real matrix with zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    entries: DMatrix<f64>,
}

impl VectorField {
    /// Wraps a square matrix as a vector field. Rejects matrices with a
    /// nonzero diagonal rather than silently zeroing it.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "vector field must be square, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.nrows() == 0 {
            return Err(Error::DimensionMismatch(
                "vector field needs at least one node".into(),
            ));
        }
        for i in 0..entries.nrows() {
            if entries[(i, i)] != 0.0 {
                return Err(Error::NonzeroDiagonal {
                    index: i,
                    value: entries[(i, i)],
                });
            }
        }
        Ok(Self { entries })
    }

    /// The zero field on `kappa` nodes.
    pub fn zeros(kappa: usize) -> Self {
        Self {
            entries: DMatrix::zeros(kappa, kappa),
        }
    }

    /// Builds a field from a function over off-diagonal index pairs; the
    /// diagonal is left at zero.
    pub fn from_fn<F: FnMut(usize, usize) -> f64>(kappa: usize, mut f: F) -> Self {
        let mut entries = DMatrix::zeros(kappa, kappa);
        for i in 0..kappa {
            for j in 0..kappa {
                if i != j {
                    entries[(i, j)] = f(i, j);
                }
            }
        }
        Self { entries }
    }

    pub fn kappa(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Per-node divergence: net flux over all incoming and outgoing edges,
    /// `div(V)_i = sum_j (V_ji - V_ij)`. Components always sum to zero.
    pub fn divergence(&self) -> DVector<f64> {
        let n = self.kappa();
        DVector::from_fn(n, |i, _| {
            let mut s = 0.0;
            for j in 0..n {
                s += self.entries[(j, i)] - self.entries[(i, j)];
            }
            s
        })
    }

    /// Euclidean norm of the divergence vector.
    pub fn divergence_norm(&self) -> f64 {
        self.divergence().norm()
    }

    /// The directional-derivative operator associated with this field.
    pub fn operator(&self) -> DirectionalDerivative {
        DirectionalDerivative::from_field(self)
    }

    /// Entrywise `alpha * a + beta * b`. The zero diagonal is preserved and
    /// the operator map stays linear: `D_{alpha a + beta b} = alpha D_a + beta D_b`.
    pub fn linear_combination(
        alpha: f64,
        a: &VectorField,
        beta: f64,
        b: &VectorField,
    ) -> Result<VectorField> {
        if a.kappa() != b.kappa() {
            return Err(Error::DimensionMismatch(format!(
                "linear combination of fields with kappa {} and {}",
                a.kappa(),
                b.kappa()
            )));
        }
        let n = a.kappa();
        Ok(VectorField::from_fn(n, |i, j| {
            alpha * a.entries[(i, j)] + beta * b.entries[(i, j)]
        }))
    }

    /// Minimal adjustment of the antisymmetric part that zeroes the
    /// divergence; the symmetric (gauge) part is untouched.
    pub fn project_divergence_free(&self) -> VectorField {
        let n = self.kappa();
        let d = self.divergence();
        let scale = 1.0 / (2.0 * n as f64);
        VectorField::from_fn(n, |i, j| self.entries[(i, j)] + (d[i] - d[j]) * scale)
    }

    /// Off-diagonal entries in row-major order; the trainable coordinates.
    pub fn to_offdiag_flat(&self) -> Vec<f64> {
        let n = self.kappa();
        let mut out = Vec::with_capacity(n * (n - 1));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    out.push(self.entries[(i, j)]);
                }
            }
        }
        out
    }

    /// Rebuilds a field from its off-diagonal coordinates (row-major).
    pub fn from_offdiag_flat(kappa: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != kappa * (kappa - 1) {
            return Err(Error::DimensionMismatch(format!(
                "expected {} off-diagonal entries for kappa {}, got {}",
                kappa * (kappa - 1),
                kappa,
                flat.len()
            )));
        }
        let mut it = flat.iter();
        Ok(VectorField::from_fn(kappa, |_, _| *it.next().unwrap()))
    }
}

impl Serialize for VectorField {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        SquareMatrixJson::from_matrix(&self.entries).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for VectorField {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let json = SquareMatrixJson::deserialize(deserializer)?;
        let m = json.to_matrix().map_err(D::Error::custom)?;
        VectorField::new(m).map_err(D::Error::custom)
    }
}

/// Gradient of a hidden state: forward finite differences between every
/// pair of nodes, `(grad h)_ij = h_i - h_j`. Skew-symmetric, zero diagonal.
pub fn grad(h: &HiddenState) -> DMatrix<f64> {
    let n = h.len();
    DMatrix::from_fn(n, n, |i, j| h[i] - h[j])
}

/// The operator `D_V` acting on hidden states, decomposed into a
/// skew-symmetric rotation `R_V = V^T - V` and a diagonal flux `div(V)`:
/// `D_V = R_V - diag(div V)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionalDerivative {
    matrix: DMatrix<f64>,
    rotation: DMatrix<f64>,
    flux: DVector<f64>,
}

impl DirectionalDerivative {
    /// Builds the operator from a field. Skew-symmetry of the rotation part
    /// is enforced constructively, never checked-and-repaired.
    pub fn from_field(v: &VectorField) -> Self {
        let n = v.kappa();
        let e = v.entries();
        let rotation = DMatrix::from_fn(n, n, |i, j| e[(j, i)] - e[(i, j)]);
        // flux_i = sum_j rotation[(i, j)], bitwise identical to divergence().
        let flux = DVector::from_fn(n, |i, _| {
            let mut s = 0.0;
            for j in 0..n {
                s += rotation[(i, j)];
            }
            s
        });
        let mut matrix = rotation.clone();
        for i in 0..n {
            matrix[(i, i)] = -flux[i];
        }
        Self {
            matrix,
            rotation,
            flux,
        }
    }

    pub fn kappa(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn rotation(&self) -> &DMatrix<f64> {
        &self.rotation
    }

    /// Diagonal of the flux part; equals the divergence of the source field.
    pub fn flux(&self) -> &DVector<f64> {
        &self.flux
    }

    /// Applies the operator to a hidden state. Constant states are
    /// annihilated since every row of the matrix sums to zero.
    pub fn apply(&self, h: &HiddenState) -> Result<HiddenState> {
        if h.len() != self.kappa() {
            return Err(Error::DimensionMismatch(format!(
                "operator on {} nodes applied to state of length {}",
                self.kappa(),
                h.len()
            )));
        }
        Ok(&self.matrix * h)
    }
}

/// Matrix commutator `[A, B] = A B - B A` of two operators. The result has
/// zero diagonal but is in general not skew plus diagonal, so it leaves
/// `VF_kappa`; see [`is_in_vf`].
pub fn commutator(a: &DirectionalDerivative, b: &DirectionalDerivative) -> Result<DMatrix<f64>> {
    if a.kappa() != b.kappa() {
        return Err(Error::DimensionMismatch(format!(
            "commutator of operators on {} and {} nodes",
            a.kappa(),
            b.kappa()
        )));
    }
    Ok(a.matrix() * b.matrix() - b.matrix() * a.matrix())
}

/// Membership test for `VF_kappa`: the off-diagonal part must be
/// skew-symmetric within `tol` and each diagonal entry must equal the
/// negated row sum of the off-diagonal part within `tol`.
pub fn is_in_vf(m: &DMatrix<f64>, tol: f64) -> bool {
    assert_eq!(m.nrows(), m.ncols(), "membership test needs a square matrix");
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] + m[(j, i)]).abs() > tol {
                return false;
            }
        }
        let mut row = 0.0;
        for j in 0..n {
            if j != i {
                row += m[(i, j)];
            }
        }
        if (m[(i, i)] + row).abs() > tol {
            return false;
        }
    }
    true
}
