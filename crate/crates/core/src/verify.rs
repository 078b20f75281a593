//! Registered invariant and property checks: the discrete toolbox
//! identities, the operator-algebra fixtures, spectral bounds, gradient
//! cross-checks, sampler convergence, and optimizer sanity. The `verify`
//! subcommand runs everything here and reports residuals.
//!
//! Randomized checks that assert exact (bitwise) identities draw from a
//! coarse dyadic grid (multiples of 2^-10), where products and the sums
//! that appear in the identities stay exactly representable, so "equal"
//! means equal. Tolerance-based spectral checks use continuous draws.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cell::{
    backward, forward, modrelu, vanilla_forward, LvfCellParams, Nonlinearity, VanillaCellParams,
};
use crate::error::Result;
use crate::geometry::{commutator, grad, is_in_vf, HiddenState, VectorField};
use crate::gradcheck::{finite_difference_gradient, max_relative_error};
use crate::init::{sample_doubly_stochastic, seeded_rng, SamplerConfig};
use crate::optim::OptimState;
use crate::task::{cross_entropy, generate_copy_batch, CopyTaskSpec};
use crate::transition::{
    check_stability, euler_transition, midpoint_transition, spectrum, Integrator,
};

/// What the verification run covers.
#[derive(Clone, Debug)]
pub struct VerifyConfig {
    pub kappas: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            kappas: vec![2, 3, 8, 64],
            trials: 100,
            seed: 0,
        }
    }
}

/// Outcome of one registered check.
#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    /// Largest measured deviation, when the check is numeric.
    pub residual: f64,
    pub detail: String,
}

impl CheckReport {
    fn new(name: &str, passed: bool, residual: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            residual,
            detail: detail.into(),
        }
    }

    fn from_residual(name: &str, residual: f64, tol: f64) -> Self {
        Self::new(
            name,
            residual <= tol,
            residual,
            format!("max residual {residual:.3e}, tolerance {tol:.3e}"),
        )
    }
}

pub fn all_passed(reports: &[CheckReport]) -> bool {
    reports.iter().all(|r| r.passed)
}

/// Runs every registered check. With `trials == 0` only the deterministic
/// fixtures run.
pub fn run_all_checks(cfg: &VerifyConfig) -> Vec<CheckReport> {
    let mut reports = vec![
        fixture_commutator_bracket(),
        fixture_leibniz_product_rule(),
        fixture_transition_examples(),
        fixture_baseline_loss(),
        fixture_adam_first_step(),
        fixture_modrelu_values(),
    ];
    if cfg.trials == 0 {
        return reports;
    }
    reports.extend([
        toolbox_integration_by_parts(cfg),
        toolbox_constant_annihilation(cfg),
        toolbox_total_divergence(cfg),
        toolbox_skew_iff_divfree(cfg),
        toolbox_gauge_invariance(cfg),
        toolbox_operator_linearity(cfg),
        toolbox_dimension(),
        toolbox_commutator_nonclosure(cfg),
        spectral_divfree_normality(cfg),
        spectral_numerical_range(cfg),
        spectral_midpoint_orthogonality(cfg),
        spectral_midpoint_determinant(cfg),
        spectral_euler_consistency(cfg),
        spectral_stability(cfg),
        cell_gradient_check(cfg),
        cell_isometry(cfg),
        cell_vanilla_equivalence(cfg),
        sampler_convergence(cfg),
        sampler_determinism(cfg),
        task_batch_layout(cfg),
        task_cross_entropy_values(cfg),
        optim_fixed_point(cfg),
        oracle_quadratic(cfg),
    ]);
    reports
}

// ---------------------------------------------------------------------------
// Random data helpers (also used by the integration tests).

/// Uniform entries in [-1, 1).
pub fn random_field(kappa: usize, rng: &mut ChaCha8Rng) -> VectorField {
    VectorField::from_fn(kappa, |_, _| rng.gen::<f64>() * 2.0 - 1.0)
}

/// Entries on the dyadic grid k / 1024, k in [-1024, 1024].
pub fn random_dyadic_field(kappa: usize, rng: &mut ChaCha8Rng) -> VectorField {
    VectorField::from_fn(kappa, |_, _| rng.gen_range(-1024i32..=1024) as f64 / 1024.0)
}

/// Hidden state on the same dyadic grid.
pub fn random_dyadic_state(kappa: usize, rng: &mut ChaCha8Rng) -> HiddenState {
    HiddenState::from_fn(kappa, |_, _| rng.gen_range(-1024i32..=1024) as f64 / 1024.0)
}

/// Exactly divergence-free field assembled from directed 3-cycles with
/// dyadic weights; every node's inflow and outflow cancel termwise, so the
/// divergence is exactly zero in floating point. Fields on fewer than
/// three nodes are zero (the only divergence-free choice there).
pub fn random_divfree_dyadic_field(kappa: usize, rng: &mut ChaCha8Rng) -> VectorField {
    let mut entries = DMatrix::zeros(kappa, kappa);
    if kappa >= 3 {
        for _ in 0..3 * kappa {
            let mut nodes = [0usize; 3];
            nodes[0] = rng.gen_range(0..kappa);
            loop {
                nodes[1] = rng.gen_range(0..kappa);
                if nodes[1] != nodes[0] {
                    break;
                }
            }
            loop {
                nodes[2] = rng.gen_range(0..kappa);
                if nodes[2] != nodes[0] && nodes[2] != nodes[1] {
                    break;
                }
            }
            let w = rng.gen_range(-1024i32..=1024) as f64 / 1024.0;
            entries[(nodes[0], nodes[1])] += w;
            entries[(nodes[1], nodes[2])] += w;
            entries[(nodes[2], nodes[0])] += w;
        }
    }
    VectorField::new(entries).expect("cycle construction keeps the diagonal zero")
}

/// Continuous divergence-free field via the gauge projection (divergence
/// is zero up to roundoff, good enough for tolerance-based checks).
pub fn random_divfree_field(kappa: usize, rng: &mut ChaCha8Rng) -> VectorField {
    random_field(kappa, rng).project_divergence_free()
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

// ---------------------------------------------------------------------------
// Deterministic fixtures.

fn fixture_commutator_bracket() -> CheckReport {
    let name = "fixture/commutator-bracket";
    let du = VectorField::from_fn(3, |i, j| {
        -0.5 * [[1.0, 1.0, -2.0], [-1.0, 0.0, 1.0], [2.0, -1.0, -1.0]][i][j]
    })
    .operator();
    let dv = VectorField::from_fn(3, |i, j| {
        -0.5 * [[0.0, 1.0, -1.0], [-1.0, 0.0, 1.0], [1.0, -1.0, 0.0]][i][j]
    })
    .operator();
    let bracket = match commutator(&du, &dv) {
        Ok(b) => b,
        Err(e) => return CheckReport::new(name, false, f64::NAN, e.to_string()),
    };
    let expected = DMatrix::from_row_slice(3, 3, &[0.0, 2.0, -2.0, 0.0, 0.0, 0.0, -2.0, 2.0, 0.0]);
    let exact = bracket == expected;
    let leaves = !is_in_vf(&bracket, 1e-12);
    let both_in = is_in_vf(du.matrix(), 1e-12) && is_in_vf(dv.matrix(), 1e-12);
    CheckReport::new(
        name,
        exact && leaves && both_in,
        (&bracket - &expected).abs().max(),
        format!("exact match {exact}, bracket leaves the operator space {leaves}"),
    )
}

fn fixture_leibniz_product_rule() -> CheckReport {
    let name = "fixture/leibniz-product-rule";
    let v = VectorField::from_fn(2, |i, j| [[0.0, 1.0], [2.0, 0.0]][i][j]);
    let d = v.operator();
    let f = HiddenState::from_vec(vec![1.0, 0.0]);
    let g = HiddenState::from_vec(vec![0.0, 1.0]);
    let product = d.apply(&f.component_mul(&g)).unwrap();
    let rule = d.apply(&f).unwrap().component_mul(&g) + f.component_mul(&d.apply(&g).unwrap());
    let ok = product == DVector::zeros(2) && rule == DVector::from_vec(vec![1.0, -1.0]);
    CheckReport::new(
        name,
        ok,
        0.0,
        format!("D(fg) = ({}, {}), Df*g + f*Dg = ({}, {})", product[0], product[1], rule[0], rule[1]),
    )
}

fn fixture_transition_examples() -> CheckReport {
    let name = "fixture/transition-examples";
    let v = VectorField::from_fn(2, |i, j| [[0.0, 1.0], [2.0, 0.0]][i][j]);
    let euler = match euler_transition(&v.operator(), 1.0) {
        Ok(c) => c,
        Err(e) => return CheckReport::new(name, false, f64::NAN, e.to_string()),
    };
    let euler_want = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, 1.0, 0.0]);
    // Pure rotation generator at tau = 2 maps to the quarter turn.
    let rot = VectorField::from_fn(2, |i, j| [[0.0, -0.5], [0.5, 0.0]][i][j]);
    let mid = match midpoint_transition(&rot.operator(), 2.0) {
        Ok(c) => c,
        Err(e) => return CheckReport::new(name, false, f64::NAN, e.to_string()),
    };
    let mid_want = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
    let residual = (euler.matrix - euler_want)
        .abs()
        .max()
        .max((mid.matrix - mid_want).abs().max());
    CheckReport::from_residual(name, residual, 1e-15)
}

fn fixture_baseline_loss() -> CheckReport {
    let name = "fixture/baseline-loss";
    let paper = CopyTaskSpec {
        blank_len: 200,
        payload_len: 10,
        alphabet: 9,
        batch: 1,
        seed: 0,
    };
    let desk = CopyTaskSpec {
        blank_len: 50,
        payload_len: 5,
        alphabet: 9,
        batch: 1,
        seed: 0,
    };
    let r1 = (paper.baseline_loss() - 10.0 * 9.0f64.ln() / 220.0).abs();
    let r2 = (desk.baseline_loss() - 5.0 * 9.0f64.ln() / 60.0).abs();
    CheckReport::from_residual(name, r1.max(r2), 1e-15)
}

fn fixture_adam_first_step() -> CheckReport {
    let name = "fixture/adam-first-step";
    let mut st = OptimState::new(1, 0.1, -1.0);
    let mut params = vec![0.0];
    if let Err(e) = st.adam_step(&mut params, &[1.0]) {
        return CheckReport::new(name, false, f64::NAN, e.to_string());
    }
    CheckReport::from_residual(name, (params[0] + 0.1).abs(), 1e-8)
}

fn fixture_modrelu_values() -> CheckReport {
    let name = "fixture/modrelu-values";
    let a = modrelu(
        &DVector::from_vec(vec![2.0, -2.0]),
        &DVector::from_vec(vec![-1.0, -1.0]),
    );
    let b = modrelu(&DVector::from_vec(vec![0.5]), &DVector::from_vec(vec![-1.0]));
    let z = DVector::from_vec(vec![1.5, -0.25]);
    let id = modrelu(&z, &DVector::zeros(2));
    let ok = a == DVector::from_vec(vec![1.0, -1.0]) && b == DVector::zeros(1) && id == z;
    CheckReport::new(name, ok, 0.0, "thresholding and identity branches")
}

// ---------------------------------------------------------------------------
// Toolbox identities.

fn toolbox_integration_by_parts(cfg: &VerifyConfig) -> CheckReport {
    let name = "toolbox/integration-by-parts";
    let mut rng = rng_for(cfg.seed, 1);
    let mut worst: f64 = 0.0;
    for &kappa in &cfg.kappas {
        for _ in 0..cfg.trials {
            let v = random_dyadic_field(kappa, &mut rng);
            let h = random_dyadic_state(kappa, &mut rng);
            let g = grad(&h);
            let mut pairing = 0.0;
            for i in 0..kappa {
                for j in 0..kappa {
                    pairing += v.entries()[(i, j)] * g[(i, j)];
                }
            }
            let boundary = v.divergence().dot(&h);
            worst = worst.max((pairing + boundary).abs());
        }
    }
    CheckReport::from_residual(name, worst, 1e-12)
}

fn toolbox_constant_annihilation(cfg: &VerifyConfig) -> CheckReport {
    let name = "toolbox/constant-annihilation";
    let mut rng = rng_for(cfg.seed, 2);
    let mut worst: f64 = 0.0;
    for &kappa in &cfg.kappas {
        for _ in 0..cfg.trials {
            let v = random_dyadic_field(kappa, &mut rng);
            let c = rng.gen_range(-1024i32..=1024) as f64 / 1024.0;
            let state = HiddenState::from_element(kappa, c);
            let out = v.operator().apply(&state).unwrap();
            worst = worst.max(out.amax());
        }
    }
    CheckReport::from_residual(name, worst, 1e-12)
}

fn toolbox_total_divergence(cfg: &VerifyConfig) -> CheckReport {
    let name = "toolbox/total-divergence";
    let mut rng = rng_for(cfg.seed, 3);
    let mut worst: f64 = 0.0;
    for &kappa in &cfg.kappas {
        for _ in 0..cfg.trials {
            let v = random_dyadic_field(kappa, &mut rng);
            worst = worst.max(v.divergence().iter().sum::<f64>().abs());
        }
    }
    CheckReport::from_residual(name, worst, 1e-12)
}

fn toolbox_skew_iff_divfree(cfg: &VerifyConfig) -> CheckReport {
    let name = "toolbox/skew-iff-divfree";
    let mut rng = rng_for(cfg.seed, 4);
    let is_exactly_skew = |m: &DMatrix<f64>| -> bool {
        let n = m.nrows();
        (0..n).all(|i| (0..n).all(|j| m[(i, j)] == -m[(j, i)]))
    };
    let mut failures = 0usize;
    let mut total = 0usize;
    for &kappa in &cfg.kappas {
        for trial in 0..cfg.trials {
            // Alternate exactly divergence-free and generic fields; the
            // equivalence must hold exactly in both directions.
            let v = if trial % 2 == 0 {
                random_divfree_dyadic_field(kappa, &mut rng)
            } else {
                random_dyadic_field(kappa, &mut rng)
            };
            let divfree = v.divergence().iter().all(|&d| d == 0.0);
            let skew = is_exactly_skew(v.operator().matrix());
            if skew != divfree {
                failures += 1;
            }
            total += 1;
        }
    }
    CheckReport::new(
        name,
        failures == 0,
        failures as f64,
        format!("{failures} equivalence failures over {total} fields"),
    )
}

fn toolbox_gauge_invariance(cfg: &VerifyConfig) -> CheckReport {
    let name = "toolbox/gauge-invariance";
    let mut rng = rng_for(cfg.seed, 5);
    let mut failures = 0usize;
    for &kappa in &cfg.kappas {
        for _ in 0..cfg.trials {
            let v = random_dyadic_field(kappa, &mut rng);
            let mut sym = DMatrix::zeros(kappa, kappa);
            for i in 0..kappa {
                for j in (i + 1)..kappa {
                    let s = rng.gen_range(-1024i32..=1024) as f64 / 1024.0;
                    sym[(i, j)] = s;
                    sym[(j, i)] = s;
                }
            }
            let shifted = VectorField::new(v.entries() + &sym).unwrap();
            if shifted.operator().matrix() != v.operator().matrix() {
                failures += 1;
            }
        }
    }
    CheckReport::new(
        name,
        failures == 0,
        failures as f64,
        format!("{failures} gauge violations"),
    )
}

fn toolbox_operator_linearity(cfg: &VerifyConfig) -> CheckReport {
    let name = "toolbox/operator-linearity";
    let mut rng = rng_for(cfg.seed, 6);
    let mut failures = 0usize;
    for &kappa in &cfg.kappas {
        for _ in 0..cfg.trials {
            let a = random_dyadic_field(kappa, &mut rng);
            let b = random_dyadic_field(kappa, &mut rng);
            let alpha = rng.gen_range(-16i32..=16) as f64 / 16.0;
            let beta = rng.gen_range(-16i32..=16) as f64 / 16.0;
            let combo = VectorField::linear_combination(alpha, &a, beta, &b).unwrap();
            let lhs = combo.operator();
            let rhs = a.operator().matrix() * alpha + b.operator().matrix() * beta;
            if lhs.matrix() != &rhs {
                failures += 1;
            }
        }
    }
    CheckReport::new(
        name,
        failures == 0,
        failures as f64,
        format!("{failures} linearity violations"),
    )
}

fn toolbox_dimension() -> CheckReport {
    let name = "toolbox/dimension";
    let mut detail = String::new();
    let mut passed = true;
    for kappa in 2..=8usize {
        // Vectorized operators of the single-edge basis fields.
        let basis: Vec<DMatrix<f64>> = (0..kappa)
            .flat_map(|p| (0..kappa).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| {
                VectorField::from_fn(kappa, |i, j| if (i, j) == (p, q) { 1.0 } else { 0.0 })
                    .operator()
                    .matrix()
                    .clone()
            })
            .collect();
        let stacked = DMatrix::from_fn(kappa * kappa, basis.len(), |r, c| {
            basis[c][(r / kappa, r % kappa)]
        });
        let rank = stacked.rank(1e-9);
        let expected = kappa * (kappa - 1) / 2;
        if rank != expected {
            passed = false;
        }
        detail.push_str(&format!("kappa {kappa}: rank {rank} (expected {expected}); "));
    }
    CheckReport::new(name, passed, 0.0, detail)
}

fn toolbox_commutator_nonclosure(cfg: &VerifyConfig) -> CheckReport {
    let name = "toolbox/commutator-nonclosure";
    let mut rng = rng_for(cfg.seed, 7);
    let mut worst: f64 = 0.0;
    let mut diag_exact = true;
    for &kappa in &cfg.kappas {
        if kappa < 3 {
            continue;
        }
        for _ in 0..cfg.trials.max(250) {
            let a = random_divfree_dyadic_field(kappa, &mut rng).operator();
            let b = random_divfree_dyadic_field(kappa, &mut rng).operator();
            let c = commutator(&a, &b).unwrap();
            for i in 0..kappa {
                if c[(i, i)] != 0.0 {
                    diag_exact = false;
                }
                for j in (i + 1)..kappa {
                    worst = worst.max((c[(i, j)] + c[(j, i)]).abs());
                }
            }
        }
    }
    CheckReport::new(
        name,
        diag_exact && worst <= 1e-12,
        worst,
        format!(
            "divergence-free brackets stay skew (defect {worst:.3e}), diagonal exact {diag_exact}"
        ),
    )
}

// ---------------------------------------------------------------------------
// Spectral checks.

fn spectral_divfree_normality(cfg: &VerifyConfig) -> CheckReport {
    let name = "spectral/divfree-normality";
    let mut rng = rng_for(cfg.seed, 8);
    let mut worst: f64 = 0.0;
    for &kappa in &cfg.kappas {
        for _ in 0..cfg.trials {
            let d = random_divfree_field(kappa, &mut rng).operator();
            match spectrum(d.matrix()) {
                Ok(report) => {
                    worst = worst.max(report.normality_defect).max(report.max_abs_real());
                }
                Err(e) => return CheckReport::new(name, false, f64::NAN, e.to_string()),
            }
        }
    }
    CheckReport::from_residual(name, worst, 1e-10)
}

fn spectral_numerical_range(cfg: &VerifyConfig) -> CheckReport {
    let name = "spectral/numerical-range";
    let mut rng = rng_for(cfg.seed, 9);
    let mut worst: f64 = 0.0;
    for &kappa in &cfg.kappas {
        for _ in 0..cfg.trials {
            let v = random_field(kappa, &mut rng);
            let div = v.divergence();
            match spectrum(v.operator().matrix()) {
                Ok(report) => {
                    let lo = -div.max();
                    let hi = -div.min();
                    for z in &report.eigenvalues {
                        worst = worst.max(lo - z.re).max(z.re - hi);
                    }
                }
                Err(e) => return CheckReport::new(name, false, f64::NAN, e.to_string()),
            }
        }
    }
    CheckReport::from_residual(name, worst.max(0.0), 1e-10)
}

fn spectral_midpoint_orthogonality(cfg: &VerifyConfig) -> CheckReport {
    let name = "spectral/midpoint-orthogonality";
    let mut rng = rng_for(cfg.seed, 10);
    let mut worst: f64 = 0.0;
    for &kappa in &cfg.kappas {
        let trials = cfg.trials.min(25).max(5);
        for _ in 0..trials {
            let d = random_divfree_field(kappa, &mut rng).operator();
            for &tau in &[0.1, 1.0, 2.0, 15.0] {
                match midpoint_transition(&d, tau) {
                    Ok(c) => {
                        let defect = (c.matrix.transpose() * &c.matrix
                            - DMatrix::identity(kappa, kappa))
                        .norm();
                        worst = worst.max(defect);
                    }
                    Err(e) => return CheckReport::new(name, false, f64::NAN, e.to_string()),
                }
            }
        }
    }
    CheckReport::from_residual(name, worst, 1e-10)
}

fn spectral_midpoint_determinant(cfg: &VerifyConfig) -> CheckReport {
    let name = "spectral/midpoint-determinant";
    let mut rng = rng_for(cfg.seed, 11);
    let mut worst: f64 = 0.0;
    for kappa in 2..=16usize {
        let d = random_divfree_field(kappa, &mut rng).operator();
        for &tau in &[0.5, 2.0, 15.0] {
            match midpoint_transition(&d, tau) {
                Ok(c) => worst = worst.max((c.matrix.determinant() - 1.0).abs()),
                Err(e) => return CheckReport::new(name, false, f64::NAN, e.to_string()),
            }
        }
    }
    CheckReport::from_residual(name, worst, 1e-10)
}

fn spectral_euler_consistency(cfg: &VerifyConfig) -> CheckReport {
    let name = "spectral/euler-consistency";
    let mut rng = rng_for(cfg.seed, 12);
    let mut worst: f64 = 0.0;
    for &kappa in &cfg.kappas {
        for _ in 0..cfg.trials.min(25) {
            let d = random_field(kappa, &mut rng).operator();
            for &tau in &[0.1, 1.0, 15.0] {
                let c = match euler_transition(&d, tau) {
                    Ok(c) => c,
                    Err(e) => return CheckReport::new(name, false, f64::NAN, e.to_string()),
                };
                let recovered = (DMatrix::identity(kappa, kappa) - &c.matrix) / tau;
                worst = worst.max((recovered - d.matrix()).abs().max());
            }
        }
    }
    CheckReport::from_residual(name, worst, 1e-14)
}

fn spectral_stability(cfg: &VerifyConfig) -> CheckReport {
    let name = "spectral/stability";
    let mut rng = rng_for(cfg.seed, 13);
    let mut failures = 0usize;
    for &kappa in &cfg.kappas {
        for _ in 0..cfg.trials.min(25) {
            // Divergence-free: stable at any timestep.
            let d = random_divfree_field(kappa, &mut rng).operator();
            match check_stability(&d, 15.0) {
                Ok((stable, _)) if stable => {}
                Ok(_) => failures += 1,
                Err(e) => return CheckReport::new(name, false, f64::NAN, e.to_string()),
            }
            // Any field: stable in the vanishing-timestep limit.
            let d = random_field(kappa, &mut rng).operator();
            match check_stability(&d, 1e-12) {
                Ok((stable, _)) if stable => {}
                Ok(_) => failures += 1,
                Err(e) => return CheckReport::new(name, false, f64::NAN, e.to_string()),
            }
        }
    }
    CheckReport::new(name, failures == 0, failures as f64, format!("{failures} failures"))
}

// ---------------------------------------------------------------------------
// Cell checks.

/// Builds a deterministic gradient-check case and returns the worst
/// componentwise deviation between backpropagation and central finite
/// differences over every trainable scalar.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check_case(
    kappa: usize,
    input_dim: usize,
    output_dim: usize,
    steps: usize,
    integrator: Integrator,
    nonlinearity: Nonlinearity,
    lambda: f64,
    seed: u64,
) -> Result<f64> {
    let sampler = SamplerConfig::new(kappa, seed);
    let params = LvfCellParams::init(
        kappa,
        input_dim,
        output_dim,
        1.3,
        integrator,
        nonlinearity,
        &sampler,
        seed.wrapping_add(1),
    )?;
    let mut rng = seeded_rng(seed.wrapping_add(2));
    let inputs: Vec<DMatrix<f64>> = (0..steps)
        .map(|_| DMatrix::from_fn(input_dim, 1, |_, _| rng.gen::<f64>() * 2.0 - 1.0))
        .collect();
    let targets: Vec<DMatrix<f64>> = (0..steps)
        .map(|_| DMatrix::from_fn(output_dim, 1, |_, _| rng.gen::<f64>() * 2.0 - 1.0))
        .collect();

    // Quadratic task loss 0.5 sum_t ||y_t - y*_t||^2 plus the divergence
    // penalty handled inside backward.
    let (trace, outputs) = forward(&params, &inputs)?;
    let output_grads: Vec<DMatrix<f64>> = outputs
        .iter()
        .zip(&targets)
        .map(|(y, t)| y - t)
        .collect();
    let (grads, _) = backward(&params, &trace, &output_grads, lambda)?;
    let analytic = grads.to_flat();

    let template = params.clone();
    let loss = |flat: &[f64]| -> Result<f64> {
        let mut p = template.clone();
        p.set_from_flat(flat)?;
        let (_, outputs) = forward(&p, &inputs)?;
        let task: f64 = outputs
            .iter()
            .zip(&targets)
            .map(|(y, t)| 0.5 * (y - t).norm_squared())
            .sum();
        Ok(task + lambda * p.v.divergence().norm_squared())
    };
    let numeric = finite_difference_gradient(loss, &params.to_flat(), 1e-6)?;
    Ok(max_relative_error(&analytic, &numeric))
}

fn cell_gradient_check(cfg: &VerifyConfig) -> CheckReport {
    let name = "cell/gradient-check";
    let mut worst: f64 = 0.0;
    for integrator in [Integrator::Euler, Integrator::Midpoint] {
        for nonlinearity in [Nonlinearity::Tanh, Nonlinearity::Identity] {
            for lambda in [0.0, 0.1] {
                match gradient_check_case(5, 3, 2, 6, integrator, nonlinearity, lambda, cfg.seed)
                {
                    Ok(err) => worst = worst.max(err),
                    Err(e) => return CheckReport::new(name, false, f64::NAN, e.to_string()),
                }
            }
        }
    }
    CheckReport::from_residual(name, worst, 1e-6)
}

fn cell_isometry(cfg: &VerifyConfig) -> CheckReport {
    let name = "cell/isometry";
    let mut rng = rng_for(cfg.seed, 14);
    let kappa = 8;
    let v = random_divfree_field(kappa, &mut rng);
    let params = match LvfCellParams::new(
        v,
        DMatrix::identity(kappa, kappa),
        DMatrix::identity(kappa, kappa),
        DVector::zeros(kappa),
        DVector::zeros(kappa),
        15.0,
        Integrator::Midpoint,
        Nonlinearity::Identity,
    ) {
        Ok(p) => p,
        Err(e) => return CheckReport::new(name, false, f64::NAN, e.to_string()),
    };
    let mut inputs = vec![DMatrix::zeros(kappa, 1); 12];
    inputs[0] = DMatrix::from_fn(kappa, 1, |i, _| ((i + 1) as f64 * 0.37).sin());
    let trace = match forward(&params, &inputs) {
        Ok((t, _)) => t,
        Err(e) => return CheckReport::new(name, false, f64::NAN, e.to_string()),
    };
    let reference = trace.hidden_states[1].norm();
    let mut worst: f64 = 0.0;
    for t in 2..=12 {
        worst = worst.max((trace.hidden_states[t].norm() - reference).abs());
    }
    CheckReport::from_residual(name, worst, 1e-10)
}

fn cell_vanilla_equivalence(cfg: &VerifyConfig) -> CheckReport {
    let name = "cell/vanilla-equivalence";
    let sampler = SamplerConfig::new(6, cfg.seed);
    let params = match LvfCellParams::init(
        6,
        3,
        2,
        2.0,
        Integrator::Midpoint,
        Nonlinearity::Tanh,
        &sampler,
        cfg.seed.wrapping_add(5),
    ) {
        Ok(p) => p,
        Err(e) => return CheckReport::new(name, false, f64::NAN, e.to_string()),
    };
    let c = match params.transition() {
        Ok(c) => c,
        Err(e) => return CheckReport::new(name, false, f64::NAN, e.to_string()),
    };
    let vanilla = VanillaCellParams::new(
        c.matrix,
        params.u.clone(),
        params.w_out.clone(),
        params.b_out.clone(),
        params.b.clone(),
        params.nonlinearity,
    )
    .unwrap();
    let mut rng = rng_for(cfg.seed, 15);
    let inputs: Vec<DMatrix<f64>> = (0..9)
        .map(|_| DMatrix::from_fn(3, 2, |_, _| rng.gen::<f64>() - 0.5))
        .collect();
    let ours = forward(&params, &inputs).map(|(_, y)| y);
    let theirs = vanilla_forward(&vanilla, &inputs).map(|(_, y)| y);
    match (ours, theirs) {
        (Ok(a), Ok(b)) => CheckReport::new(
            name,
            a == b,
            0.0,
            "fixed W = C_V reproduces the field cell bit for bit",
        ),
        (Err(e), _) | (_, Err(e)) => CheckReport::new(name, false, f64::NAN, e.to_string()),
    }
}

// ---------------------------------------------------------------------------
// Sampler / task / optimizer checks.

fn sampler_convergence(cfg: &VerifyConfig) -> CheckReport {
    let name = "sampler/convergence";
    let mut worst_marginal: f64 = 0.0;
    let mut worst_iters = 0usize;
    let mut negative = false;
    for &kappa in &cfg.kappas {
        for s in 0..cfg.trials as u64 {
            let out = match sample_doubly_stochastic(&SamplerConfig::new(kappa, cfg.seed ^ s)) {
                Ok(o) => o,
                Err(e) => return CheckReport::new(name, false, f64::NAN, e.to_string()),
            };
            worst_iters = worst_iters.max(out.iterations);
            negative |= out.matrix.iter().any(|&x| x < 0.0);
            worst_marginal = worst_marginal.max(crate::init::max_marginal_deviation(&out.matrix));
        }
    }
    CheckReport::new(
        name,
        !negative && worst_marginal <= 1e-8 && worst_iters <= 100,
        worst_marginal,
        format!("worst marginal {worst_marginal:.3e}, worst iterations {worst_iters}"),
    )
}

fn sampler_determinism(cfg: &VerifyConfig) -> CheckReport {
    let name = "sampler/determinism";
    for &kappa in &cfg.kappas {
        let a = sample_doubly_stochastic(&SamplerConfig::new(kappa, cfg.seed));
        let b = sample_doubly_stochastic(&SamplerConfig::new(kappa, cfg.seed));
        match (a, b) {
            (Ok(a), Ok(b)) if a.matrix == b.matrix => {}
            (Ok(_), Ok(_)) => {
                return CheckReport::new(name, false, 1.0, format!("kappa {kappa} differs"))
            }
            (Err(e), _) | (_, Err(e)) => {
                return CheckReport::new(name, false, f64::NAN, e.to_string())
            }
        }
    }
    CheckReport::new(name, true, 0.0, "identical seeds give identical matrices")
}

fn task_batch_layout(cfg: &VerifyConfig) -> CheckReport {
    let name = "task/batch-layout";
    let spec = CopyTaskSpec {
        blank_len: 10,
        payload_len: 5,
        alphabet: 9,
        batch: 16,
        seed: cfg.seed,
    };
    let batch = match generate_copy_batch(&spec) {
        Ok(b) => b,
        Err(e) => return CheckReport::new(name, false, f64::NAN, e.to_string()),
    };
    let again = generate_copy_batch(&spec).unwrap();
    let s = spec.seq_len();
    let mut ok = batch == again;
    for (input, target) in batch.inputs.iter().zip(&batch.targets) {
        ok &= input.len() == s && target.len() == s;
        ok &= input[..5].iter().all(|&p| p < 9);
        ok &= input[5..15].iter().all(|&x| x == spec.blank_token());
        ok &= input[15] == spec.marker_token();
        ok &= target[..15].iter().all(|&x| x == spec.blank_token());
        ok &= target[15..] == input[..5];
    }
    CheckReport::new(name, ok, 0.0, "payload, blanks, marker, and recall window")
}

fn task_cross_entropy_values(cfg: &VerifyConfig) -> CheckReport {
    let name = "task/cross-entropy";
    let spec = CopyTaskSpec {
        blank_len: 10,
        payload_len: 5,
        alphabet: 9,
        batch: 4,
        seed: cfg.seed ^ 0xce,
    };
    let batch = match generate_copy_batch(&spec) {
        Ok(b) => b,
        Err(e) => return CheckReport::new(name, false, f64::NAN, e.to_string()),
    };
    let uniform: Vec<DMatrix<f64>> = (0..spec.seq_len())
        .map(|_| DMatrix::zeros(spec.vocab(), spec.batch))
        .collect();
    let ce_uniform = cross_entropy(&uniform, &batch.targets).unwrap();
    let r1 = (ce_uniform - (spec.vocab() as f64).ln()).abs();

    // Blank off the recall window, uniform over the alphabet inside it.
    let recall_start = spec.seq_len() - spec.payload_len;
    let structured: Vec<DMatrix<f64>> = (0..spec.seq_len())
        .map(|t| {
            let mut block = DMatrix::from_element(spec.vocab(), spec.batch, -1e4);
            for b in 0..spec.batch {
                if t < recall_start {
                    block[(spec.blank_token(), b)] = 0.0;
                } else {
                    for a in 0..spec.alphabet {
                        block[(a, b)] = 0.0;
                    }
                }
            }
            block
        })
        .collect();
    let ce_structured = cross_entropy(&structured, &batch.targets).unwrap();
    let r2 = (ce_structured - spec.baseline_loss()).abs();
    CheckReport::from_residual(name, r1.max(r2), 1e-12)
}

fn optim_fixed_point(cfg: &VerifyConfig) -> CheckReport {
    let name = "optim/fixed-point";
    let mut rng = rng_for(cfg.seed, 16);
    let mut st = OptimState::new(8, 0.05, -1.0);
    let mut params: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
    let before = params.clone();
    if let Err(e) = st.adam_step(&mut params, &vec![0.0; 8]) {
        return CheckReport::new(name, false, f64::NAN, e.to_string());
    }
    CheckReport::new(
        name,
        params == before && st.step == 1,
        0.0,
        "zero gradients leave parameters untouched",
    )
}

fn oracle_quadratic(cfg: &VerifyConfig) -> CheckReport {
    let name = "oracle/quadratic";
    let mut rng = rng_for(cfg.seed, 17);
    let theta: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
    let grad = match finite_difference_gradient(
        |p| Ok(0.5 * p.iter().map(|x| x * x).sum::<f64>()),
        &theta,
        1e-6,
    ) {
        Ok(g) => g,
        Err(e) => return CheckReport::new(name, false, f64::NAN, e.to_string()),
    };
    CheckReport::from_residual(name, max_relative_error(&grad, &theta), 1e-9)
}
