//! Hidden-to-hidden transition matrices and spectral diagnostics.
//!
//! One integrator step of the latent transport equation turns an operator
//! `D_V` into the recurrent matrix `C_V`. The explicit Euler step gives
//! `C_V = I - tau D_V`; the midpoint rule gives the Cayley-type form
//! `C_V = (I + tau/2 D_V)^-1 (I - tau/2 D_V)`, which is orthogonal whenever
//! `D_V` is skew-symmetric (divergence-free field). Spectral reports back
//! the stability and normality analysis: eigenvalue real parts of `D_V`
//! always lie in `[-max div, -min div]`.

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DirectionalDerivative;
use crate::io::fmt_sig17;

/// Integration rule used to build the transition matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Euler,
    Midpoint,
}

/// Condition-estimate ceiling for the midpoint linear solve.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Tolerance on `Re(lambda(C_V)) <= 1` in [`check_stability`].
pub const STABILITY_TOL: f64 = 1e-9;

/// Per-node tolerance for [`check_normality`].
pub const NORMALITY_TOL: f64 = 1e-10;

/// The hidden-to-hidden matrix together with how it was built.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    pub matrix: DMatrix<f64>,
    pub integrator: Integrator,
    pub tau: f64,
}

/// Explicit Euler step: `C_V = I - tau D_V`.
pub fn euler_transition(d: &DirectionalDerivative, tau: f64) -> Result<TransitionMatrix> {
    if !(tau > 0.0) {
        return Err(Error::InvalidTimestep(tau));
    }
    let n = d.kappa();
    let mut matrix = d.matrix() * (-tau);
    for i in 0..n {
        matrix[(i, i)] += 1.0;
    }
    Ok(TransitionMatrix {
        matrix,
        integrator: Integrator::Euler,
        tau,
    })
}

/// Midpoint step: `C_V = (I + tau/2 D_V)^-1 (I - tau/2 D_V)`, computed via
/// an LU solve with the full right-hand side rather than an explicit
/// inverse. Near-singular systems are reported as errors.
pub fn midpoint_transition(d: &DirectionalDerivative, tau: f64) -> Result<TransitionMatrix> {
    if !(tau > 0.0) {
        return Err(Error::InvalidTimestep(tau));
    }
    let n = d.kappa();
    let half = 0.5 * tau;
    let mut a = d.matrix() * half;
    let mut b = d.matrix() * (-half);
    for i in 0..n {
        a[(i, i)] += 1.0;
        b[(i, i)] += 1.0;
    }
    let lu = a.lu();
    let estimate = lu_condition_estimate(&lu);
    if !estimate.is_finite() || estimate > CONDITION_LIMIT {
        return Err(Error::NearSingular { estimate });
    }
    let matrix = lu
        .solve(&b)
        .ok_or(Error::NearSingular { estimate: f64::INFINITY })?;
    Ok(TransitionMatrix {
        matrix,
        integrator: Integrator::Midpoint,
        tau,
    })
}

/// Builds the transition matrix with the requested integrator.
pub fn transition(
    d: &DirectionalDerivative,
    integrator: Integrator,
    tau: f64,
) -> Result<TransitionMatrix> {
    match integrator {
        Integrator::Euler => euler_transition(d, tau),
        Integrator::Midpoint => midpoint_transition(d, tau),
    }
}

// Cheap conditioning proxy: ratio of extreme pivot magnitudes of the U factor.
fn lu_condition_estimate(lu: &nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> f64 {
    let u = lu.u();
    let n = u.nrows().min(u.ncols());
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for i in 0..n {
        let p = u[(i, i)].abs();
        lo = lo.min(p);
        hi = hi.max(p);
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Eigenvalues of a square matrix together with its normality and
/// orthogonality defects.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub eigenvalues: Vec<ComplexEntry>,
    pub max_real_part: f64,
    /// Frobenius norm of `M^T M - M M^T`.
    pub normality_defect: f64,
    /// Frobenius norm of `M^T M - I`.
    pub orthogonality_defect: f64,
}

/// One eigenvalue in serialized form.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ComplexEntry {
    pub re: f64,
    pub im: f64,
}

impl From<Complex<f64>> for ComplexEntry {
    fn from(z: Complex<f64>) -> Self {
        Self { re: z.re, im: z.im }
    }
}

impl SpectrumReport {
    /// Largest absolute real part over the eigenvalues.
    pub fn max_abs_real(&self) -> f64 {
        self.eigenvalues
            .iter()
            .fold(0.0f64, |acc, z| acc.max(z.re.abs()))
    }

    /// Smallest real part over the eigenvalues.
    pub fn min_real_part(&self) -> f64 {
        self.eigenvalues
            .iter()
            .fold(f64::INFINITY, |acc, z| acc.min(z.re))
    }

    /// Writes the eigenvalues as CSV with header `index,re,im`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "index,re,im")?;
        for (i, z) in self.eigenvalues.iter().enumerate() {
            let mut line = String::new();
            let _ = write!(line, "{i},{},{}", fmt_sig17(z.re), fmt_sig17(z.im));
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Computes the spectrum of a dense real matrix via its real Schur form.
pub fn spectrum(m: &DMatrix<f64>) -> Result<SpectrumReport> {
    assert_eq!(m.nrows(), m.ncols(), "spectrum needs a square matrix");
    let n = m.nrows();
    let max_sweeps = 100 * n.max(10);
    let schur = nalgebra::linalg::Schur::try_new(m.clone(), f64::EPSILON, max_sweeps)
        .ok_or(Error::EigenNonConvergence { max_sweeps })?;
    let eigen = schur.complex_eigenvalues();

    let mt = m.transpose();
    let gram = &mt * m;
    let normality_defect = (&gram - m * &mt).norm();
    let mut gram_minus_i = gram;
    for i in 0..n {
        gram_minus_i[(i, i)] -= 1.0;
    }
    let orthogonality_defect = gram_minus_i.norm();

    let eigenvalues: Vec<ComplexEntry> = eigen.iter().map(|z| ComplexEntry::from(*z)).collect();
    let max_real_part = eigenvalues
        .iter()
        .fold(f64::NEG_INFINITY, |acc, z| acc.max(z.re));
    Ok(SpectrumReport {
        eigenvalues,
        max_real_part,
        normality_defect,
        orthogonality_defect,
    })
}

/// Stability of the Euler transition: true iff every eigenvalue of `C_V`
/// has real part at most `1 + STABILITY_TOL`. Holds in particular whenever
/// the divergence is nonpositive at every node.
pub fn check_stability(d: &DirectionalDerivative, tau: f64) -> Result<(bool, SpectrumReport)> {
    let c = euler_transition(d, tau)?;
    let report = spectrum(&c.matrix)?;
    Ok((report.max_real_part <= 1.0 + STABILITY_TOL, report))
}

/// Normality of the operator: `||D^T D - D D^T||_F < NORMALITY_TOL * kappa`.
/// Divergence-free fields give skew-symmetric, hence normal, operators.
pub fn check_normality(d: &DirectionalDerivative) -> bool {
    let m = d.matrix();
    let mt = m.transpose();
    let defect = (&mt * m - m * &mt).norm();
    defect < NORMALITY_TOL * d.kappa() as f64
}
