//! The recurrent cell `h_t = sigma(C_V h_{t-1} + U x_t)` and its exact
//! backpropagation through time, plus a vanilla RNN baseline with an
//! unconstrained hidden-to-hidden matrix.
//!
//! Sequences are processed in batched form: timestep `t` carries an
//! `m x B` input block and a `kappa x B` hidden block, so a single
//! sequence is the `B = 1` case. `C_V` is built once per forward pass.
//! Gradients with respect to the latent field flow through both the
//! rotation and the flux part of `D_V`, through the integrator (a linear
//! solve adjoint for the midpoint rule), and through the optional soft
//! divergence penalty `lambda * ||div V||^2`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::VectorField;
use crate::init::{field_from_stochastic, sample_doubly_stochastic, seeded_rng, SamplerConfig};
use crate::transition::{transition, Integrator, TransitionMatrix};

/// Pointwise nonlinearity applied to the pre-activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Tanh,
    Modrelu,
    Identity,
}

/// Magnitude-thresholded nonlinearity `sign(z) * max(|z| + b, 0)` with the
/// convention `sign(0) = 0`; the subgradient at the kink is taken as zero.
pub fn modrelu(z: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    assert_eq!(z.len(), b.len(), "modrelu bias length mismatch");
    DVector::from_fn(z.len(), |i, _| modrelu_scalar(z[i], b[i]))
}

#[inline]
fn modrelu_scalar(z: f64, b: f64) -> f64 {
    let mag = z.abs() + b;
    if mag > 0.0 {
        if z > 0.0 {
            mag
        } else if z < 0.0 {
            -mag
        } else {
            0.0
        }
    } else {
        0.0
    }
}

/// All trainables of one cell: the latent field, the input embedding, the
/// affine output head, and the modReLU bias. The timestep, integrator, and
/// nonlinearity are fixed hyperparameters carried along for the forward
/// pass.
#[derive(Clone, Debug)]
pub struct LvfCellParams {
    pub v: VectorField,
    /// Input embedding, `kappa x m`.
    pub u: DMatrix<f64>,
    /// Output head weight, `o x kappa`.
    pub w_out: DMatrix<f64>,
    /// Output head bias, length `o`.
    pub b_out: DVector<f64>,
    /// Nonlinearity bias (used by modReLU), length `kappa`.
    pub b: DVector<f64>,
    pub tau: f64,
    pub integrator: Integrator,
    pub nonlinearity: Nonlinearity,
}

impl LvfCellParams {
    pub fn new(
        v: VectorField,
        u: DMatrix<f64>,
        w_out: DMatrix<f64>,
        b_out: DVector<f64>,
        b: DVector<f64>,
        tau: f64,
        integrator: Integrator,
        nonlinearity: Nonlinearity,
    ) -> Result<Self> {
        let kappa = v.kappa();
        if u.nrows() != kappa {
            return Err(Error::DimensionMismatch(format!(
                "input embedding has {} rows, expected kappa {kappa}",
                u.nrows()
            )));
        }
        if w_out.ncols() != kappa {
            return Err(Error::DimensionMismatch(format!(
                "output head has {} columns, expected kappa {kappa}",
                w_out.ncols()
            )));
        }
        if b_out.len() != w_out.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "output bias length {} does not match head rows {}",
                b_out.len(),
                w_out.nrows()
            )));
        }
        if b.len() != kappa {
            return Err(Error::DimensionMismatch(format!(
                "nonlinearity bias length {} does not match kappa {kappa}",
                b.len()
            )));
        }
        if !(tau > 0.0) {
            return Err(Error::InvalidTimestep(tau));
        }
        Ok(Self {
            v,
            u,
            w_out,
            b_out,
            b,
            tau,
            integrator,
            nonlinearity,
        })
    }

    /// Fresh parameters: the field from the doubly-stochastic sampler, the
    /// embedding and head from scale-balanced uniform draws, zero biases.
    pub fn init(
        kappa: usize,
        input_dim: usize,
        output_dim: usize,
        tau: f64,
        integrator: Integrator,
        nonlinearity: Nonlinearity,
        sampler: &SamplerConfig,
        weight_seed: u64,
    ) -> Result<Self> {
        let sample = sample_doubly_stochastic(sampler)?;
        let v = field_from_stochastic(&sample.matrix)?;
        let mut rng = seeded_rng(weight_seed);
        let u = glorot_uniform(kappa, input_dim, &mut rng);
        let w_out = glorot_uniform(output_dim, kappa, &mut rng);
        Self::new(
            v,
            u,
            w_out,
            DVector::zeros(output_dim),
            DVector::zeros(kappa),
            tau,
            integrator,
            nonlinearity,
        )
    }

    pub fn kappa(&self) -> usize {
        self.v.kappa()
    }

    pub fn input_dim(&self) -> usize {
        self.u.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w_out.nrows()
    }

    /// Builds the hidden-to-hidden matrix for the current field.
    pub fn transition(&self) -> Result<TransitionMatrix> {
        transition(&self.v.operator(), self.integrator, self.tau)
    }

    /// Replaces the field by its divergence-free projection (the hard
    /// constraint variant of the divergence penalty).
    pub fn project_divergence_free(&mut self) {
        self.v = self.v.project_divergence_free();
    }

    /// Number of trainable scalars: the field off-diagonal plus embedding,
    /// head, and biases.
    pub fn n_params(&self) -> usize {
        let k = self.kappa();
        k * (k - 1) + self.u.len() + self.w_out.len() + self.b_out.len() + self.b.len()
    }

    /// Trainable scalars in a fixed order: field off-diagonal (row-major),
    /// embedding, head weight (row-major), head bias, nonlinearity bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.v.to_offdiag_flat();
        push_matrix(&mut out, &self.u);
        push_matrix(&mut out, &self.w_out);
        out.extend(self.b_out.iter());
        out.extend(self.b.iter());
        out
    }

    /// Writes back a flat vector produced with the [`Self::to_flat`] layout.
    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let k = self.kappa();
        let (head, rest) = flat.split_at(k * (k - 1));
        self.v = VectorField::from_offdiag_flat(k, head)?;
        let rest = pop_matrix(&mut self.u, rest);
        let rest = pop_matrix(&mut self.w_out, rest);
        let (bo, bb) = rest.split_at(self.b_out.len());
        self.b_out.copy_from_slice(bo);
        self.b.copy_from_slice(bb);
        Ok(())
    }
}

fn glorot_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| (rng.gen::<f64>() * 2.0 - 1.0) * s)
}

fn push_matrix(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
}

fn pop_matrix<'a>(m: &mut DMatrix<f64>, flat: &'a [f64]) -> &'a [f64] {
    let (head, rest) = flat.split_at(m.len());
    let mut it = head.iter();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            m[(i, j)] = *it.next().unwrap();
        }
    }
    rest
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Input blocks, `T` of `m x B`.
    pub inputs: Vec<DMatrix<f64>>,
    /// Pre-activations `C_V h_{t-1} + U x_t`, `T` of `kappa x B`.
    pub pre_activations: Vec<DMatrix<f64>>,
    /// Hidden states including `h_0 = 0`, `T + 1` of `kappa x B`.
    pub hidden_states: Vec<DMatrix<f64>>,
    /// The transition matrix built for this pass.
    pub transition: TransitionMatrix,
}

/// Gradients for all trainables of the cell; the field gradient keeps a
/// zero diagonal.
#[derive(Clone, Debug)]
pub struct LvfGradients {
    pub d_v: DMatrix<f64>,
    pub d_u: DMatrix<f64>,
    pub d_w_out: DMatrix<f64>,
    pub d_b_out: DVector<f64>,
    pub d_b: DVector<f64>,
}

impl LvfGradients {
    /// Same layout as [`LvfCellParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let n = self.d_v.nrows();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    out.push(self.d_v[(i, j)]);
                }
            }
        }
        push_matrix(&mut out, &self.d_u);
        push_matrix(&mut out, &self.d_w_out);
        out.extend(self.d_b_out.iter());
        out.extend(self.d_b.iter());
        out
    }
}

/// Runs the cell over a batched sequence. Returns the trace and the
/// per-timestep outputs `W_out h_t + b_out`.
pub fn forward(
    params: &LvfCellParams,
    inputs: &[DMatrix<f64>],
) -> Result<(ForwardTrace, Vec<DMatrix<f64>>)> {
    let c = params.transition()?;
    let (pre, hidden, outputs) = run_forward(
        &c.matrix,
        &params.u,
        &params.w_out,
        &params.b_out,
        &params.b,
        params.nonlinearity,
        inputs,
    )?;
    Ok((
        ForwardTrace {
            inputs: inputs.to_vec(),
            pre_activations: pre,
            hidden_states: hidden,
            transition: c,
        },
        outputs,
    ))
}

/// Exact reverse-mode gradients of `task loss + lambda ||div V||^2` given
/// the upstream gradients of the task loss with respect to the outputs.
/// Also returns the penalty value itself.
pub fn backward(
    params: &LvfCellParams,
    trace: &ForwardTrace,
    output_grads: &[DMatrix<f64>],
    lambda: f64,
) -> Result<(LvfGradients, f64)> {
    check_trace(params.kappa(), trace, output_grads)?;
    if trace.transition.integrator != params.integrator || trace.transition.tau != params.tau {
        return Err(Error::DimensionMismatch(
            "trace was produced with different integrator settings".into(),
        ));
    }
    let (d_whh, d_u, d_w_out, d_b_out, d_b) = run_backward(
        &trace.transition.matrix,
        &params.w_out,
        &params.b,
        params.nonlinearity,
        &trace.inputs,
        &trace.pre_activations,
        &trace.hidden_states,
        output_grads,
    );

    // Chain through the integrator to the operator D_V.
    let n = params.kappa();
    let g_d = match params.integrator {
        Integrator::Euler => &d_whh * (-params.tau),
        Integrator::Midpoint => {
            // C = A^-1 B with A = I + tau/2 D: dL/dD = -tau/2 A^-T G (I + C^T).
            let half = 0.5 * params.tau;
            let d = params.v.operator();
            let mut a_t = d.matrix().transpose() * half;
            for i in 0..n {
                a_t[(i, i)] += 1.0;
            }
            let m = &d_whh + &d_whh * trace.transition.matrix.transpose();
            let solved = a_t
                .lu()
                .solve(&m)
                .ok_or(Error::NearSingular { estimate: f64::INFINITY })?;
            solved * (-half)
        }
    };

    // From the operator to the field: D depends on V through both the
    // rotation V^T - V and the flux row sums, and the penalty adds
    // 2 lambda (div_q - div_p) on edge (p, q).
    let div = params.v.divergence();
    let penalty = lambda * div.norm_squared();
    let mut d_v = DMatrix::zeros(n, n);
    for p in 0..n {
        for q in 0..n {
            if p != q {
                d_v[(p, q)] = g_d[(q, p)] - g_d[(p, q)] + g_d[(p, p)] - g_d[(q, q)]
                    + 2.0 * lambda * (div[q] - div[p]);
            }
        }
    }

    Ok((
        LvfGradients {
            d_v,
            d_u,
            d_w_out,
            d_b_out,
            d_b,
        },
        penalty,
    ))
}

/// Vanilla RNN baseline: `h_t = sigma(W h_{t-1} + U x_t)` with an
/// unconstrained hidden-to-hidden matrix.
#[derive(Clone, Debug)]
pub struct VanillaCellParams {
    pub w: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub w_out: DMatrix<f64>,
    pub b_out: DVector<f64>,
    pub b: DVector<f64>,
    pub nonlinearity: Nonlinearity,
}

impl VanillaCellParams {
    pub fn new(
        w: DMatrix<f64>,
        u: DMatrix<f64>,
        w_out: DMatrix<f64>,
        b_out: DVector<f64>,
        b: DVector<f64>,
        nonlinearity: Nonlinearity,
    ) -> Result<Self> {
        if w.nrows() != w.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "hidden matrix must be square, got {}x{}",
                w.nrows(),
                w.ncols()
            )));
        }
        let kappa = w.nrows();
        if u.nrows() != kappa || w_out.ncols() != kappa || b.len() != kappa {
            return Err(Error::DimensionMismatch(
                "vanilla cell shapes are inconsistent with kappa".into(),
            ));
        }
        if b_out.len() != w_out.nrows() {
            return Err(Error::DimensionMismatch(
                "output bias does not match head rows".into(),
            ));
        }
        Ok(Self {
            w,
            u,
            w_out,
            b_out,
            b,
            nonlinearity,
        })
    }

    pub fn init(
        kappa: usize,
        input_dim: usize,
        output_dim: usize,
        nonlinearity: Nonlinearity,
        weight_seed: u64,
    ) -> Result<Self> {
        let mut rng = seeded_rng(weight_seed);
        let w = glorot_uniform(kappa, kappa, &mut rng);
        let u = glorot_uniform(kappa, input_dim, &mut rng);
        let w_out = glorot_uniform(output_dim, kappa, &mut rng);
        Self::new(
            w,
            u,
            w_out,
            DVector::zeros(output_dim),
            DVector::zeros(kappa),
            nonlinearity,
        )
    }

    pub fn kappa(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.u.len() + self.w_out.len() + self.b_out.len() + self.b.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        push_matrix(&mut out, &self.w);
        push_matrix(&mut out, &self.u);
        push_matrix(&mut out, &self.w_out);
        out.extend(self.b_out.iter());
        out.extend(self.b.iter());
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let rest = pop_matrix(&mut self.w, flat);
        let rest = pop_matrix(&mut self.u, rest);
        let rest = pop_matrix(&mut self.w_out, rest);
        let (bo, bb) = rest.split_at(self.b_out.len());
        self.b_out.copy_from_slice(bo);
        self.b.copy_from_slice(bb);
        Ok(())
    }
}

/// Trace of a vanilla forward pass; caches the hidden matrix used.
#[derive(Clone, Debug)]
pub struct VanillaTrace {
    pub inputs: Vec<DMatrix<f64>>,
    pub pre_activations: Vec<DMatrix<f64>>,
    pub hidden_states: Vec<DMatrix<f64>>,
    pub w: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct VanillaGradients {
    pub d_w: DMatrix<f64>,
    pub d_u: DMatrix<f64>,
    pub d_w_out: DMatrix<f64>,
    pub d_b_out: DVector<f64>,
    pub d_b: DVector<f64>,
}

impl VanillaGradients {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        push_matrix(&mut out, &self.d_w);
        push_matrix(&mut out, &self.d_u);
        push_matrix(&mut out, &self.d_w_out);
        out.extend(self.d_b_out.iter());
        out.extend(self.d_b.iter());
        out
    }
}

pub fn vanilla_forward(
    params: &VanillaCellParams,
    inputs: &[DMatrix<f64>],
) -> Result<(VanillaTrace, Vec<DMatrix<f64>>)> {
    let (pre, hidden, outputs) = run_forward(
        &params.w,
        &params.u,
        &params.w_out,
        &params.b_out,
        &params.b,
        params.nonlinearity,
        inputs,
    )?;
    Ok((
        VanillaTrace {
            inputs: inputs.to_vec(),
            pre_activations: pre,
            hidden_states: hidden,
            w: params.w.clone(),
        },
        outputs,
    ))
}

pub fn vanilla_backward(
    params: &VanillaCellParams,
    trace: &VanillaTrace,
    output_grads: &[DMatrix<f64>],
) -> Result<VanillaGradients> {
    if trace.pre_activations.len() != output_grads.len() {
        return Err(Error::DimensionMismatch(format!(
            "trace has {} timesteps, output gradients have {}",
            trace.pre_activations.len(),
            output_grads.len()
        )));
    }
    let (d_w, d_u, d_w_out, d_b_out, d_b) = run_backward(
        &trace.w,
        &params.w_out,
        &params.b,
        params.nonlinearity,
        &trace.inputs,
        &trace.pre_activations,
        &trace.hidden_states,
        output_grads,
    );
    Ok(VanillaGradients {
        d_w,
        d_u,
        d_w_out,
        d_b_out,
        d_b,
    })
}

fn check_trace(kappa: usize, trace: &ForwardTrace, output_grads: &[DMatrix<f64>]) -> Result<()> {
    let t = trace.pre_activations.len();
    if trace.hidden_states.len() != t + 1 || trace.inputs.len() != t {
        return Err(Error::DimensionMismatch(
            "trace timestep counts are inconsistent".into(),
        ));
    }
    if output_grads.len() != t {
        return Err(Error::DimensionMismatch(format!(
            "trace has {t} timesteps, output gradients have {}",
            output_grads.len()
        )));
    }
    if trace.transition.matrix.nrows() != kappa {
        return Err(Error::DimensionMismatch(
            "trace kappa does not match parameters".into(),
        ));
    }
    Ok(())
}

/// Shared recurrence; both cells funnel through here so a vanilla cell with
/// `W = C_V` reproduces the field cell bit for bit.
#[allow(clippy::type_complexity)]
fn run_forward(
    w_hh: &DMatrix<f64>,
    u: &DMatrix<f64>,
    w_out: &DMatrix<f64>,
    b_out: &DVector<f64>,
    bias: &DVector<f64>,
    nonlinearity: Nonlinearity,
    inputs: &[DMatrix<f64>],
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    let kappa = w_hh.nrows();
    let steps = inputs.len();
    if steps == 0 {
        return Err(Error::DimensionMismatch("empty input sequence".into()));
    }
    let bsz = inputs[0].ncols();
    let m = u.ncols();
    for (t, x) in inputs.iter().enumerate() {
        if x.nrows() != m || x.ncols() != bsz {
            return Err(Error::DimensionMismatch(format!(
                "input block {t} is {}x{}, expected {m}x{bsz}",
                x.nrows(),
                x.ncols()
            )));
        }
    }
    let o = w_out.nrows();

    let mut pre = Vec::with_capacity(steps);
    let mut hidden = Vec::with_capacity(steps + 1);
    let mut outputs = Vec::with_capacity(steps);
    hidden.push(DMatrix::zeros(kappa, bsz));

    for t in 0..steps {
        let mut z = DMatrix::zeros(kappa, bsz);
        z.gemm(1.0, w_hh, &hidden[t], 0.0);
        z.gemm(1.0, u, &inputs[t], 1.0);
        let h = activate(&z, bias, nonlinearity);
        if !h.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { timestep: t + 1 });
        }
        let mut y = DMatrix::zeros(o, bsz);
        y.gemm(1.0, w_out, &h, 0.0);
        for c in 0..bsz {
            for r in 0..o {
                y[(r, c)] += b_out[r];
            }
        }
        pre.push(z);
        hidden.push(h);
        outputs.push(y);
    }
    Ok((pre, hidden, outputs))
}

fn activate(z: &DMatrix<f64>, bias: &DVector<f64>, nonlinearity: Nonlinearity) -> DMatrix<f64> {
    match nonlinearity {
        Nonlinearity::Tanh => z.map(f64::tanh),
        Nonlinearity::Identity => z.clone(),
        Nonlinearity::Modrelu => {
            DMatrix::from_fn(z.nrows(), z.ncols(), |i, c| modrelu_scalar(z[(i, c)], bias[i]))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_backward(
    w_hh: &DMatrix<f64>,
    w_out: &DMatrix<f64>,
    bias: &DVector<f64>,
    nonlinearity: Nonlinearity,
    inputs: &[DMatrix<f64>],
    pre: &[DMatrix<f64>],
    hidden: &[DMatrix<f64>],
    output_grads: &[DMatrix<f64>],
) -> (
    DMatrix<f64>,
    DMatrix<f64>,
    DMatrix<f64>,
    DVector<f64>,
    DVector<f64>,
) {
    let kappa = w_hh.nrows();
    let steps = pre.len();
    let bsz = pre[0].ncols();

    let w_hh_t = w_hh.transpose();
    let w_out_t = w_out.transpose();

    let mut d_w_hh = DMatrix::zeros(kappa, kappa);
    let mut d_u = DMatrix::zeros(kappa, inputs[0].nrows());
    let mut d_w_out = DMatrix::zeros(w_out.nrows(), kappa);
    let mut d_b_out = DVector::zeros(w_out.nrows());
    let mut d_b = DVector::zeros(kappa);

    let mut dh = DMatrix::zeros(kappa, bsz);
    for t in (0..steps).rev() {
        let g = &output_grads[t];
        let h_t = &hidden[t + 1];
        d_w_out.gemm(1.0, g, &h_t.transpose(), 1.0);
        d_b_out += g.column_sum();
        dh.gemm(1.0, &w_out_t, g, 1.0);

        // Through the nonlinearity: delta = dh .* sigma'(z_t).
        let z = &pre[t];
        let delta = match nonlinearity {
            Nonlinearity::Identity => dh.clone(),
            Nonlinearity::Tanh => {
                DMatrix::from_fn(kappa, bsz, |i, c| dh[(i, c)] * (1.0 - h_t[(i, c)] * h_t[(i, c)]))
            }
            Nonlinearity::Modrelu => {
                let mut delta = DMatrix::zeros(kappa, bsz);
                for c in 0..bsz {
                    for i in 0..kappa {
                        let zv = z[(i, c)];
                        if zv != 0.0 && zv.abs() + bias[i] > 0.0 {
                            delta[(i, c)] = dh[(i, c)];
                            d_b[i] += dh[(i, c)] * zv.signum();
                        }
                    }
                }
                delta
            }
        };

        d_u.gemm(1.0, &delta, &inputs[t].transpose(), 1.0);
        d_w_hh.gemm(1.0, &delta, &hidden[t].transpose(), 1.0);
        dh.gemm(1.0, &w_hh_t, &delta, 0.0);
    }
    (d_w_hh, d_u, d_w_out, d_b_out, d_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn small_params(
        integrator: Integrator,
        nonlinearity: Nonlinearity,
        kappa: usize,
        m: usize,
        o: usize,
        seed: u64,
    ) -> LvfCellParams {
        let sampler = SamplerConfig::new(kappa, seed);
        LvfCellParams::init(kappa, m, o, 1.0, integrator, nonlinearity, &sampler, seed + 1)
            .unwrap()
    }

    fn const_inputs(steps: usize, m: usize, bsz: usize, value: f64) -> Vec<DMatrix<f64>> {
        (0..steps)
            .map(|_| DMatrix::from_element(m, bsz, value))
            .collect()
    }

    #[test]
    fn zero_inputs_tanh_stays_at_zero() {
        let p = small_params(Integrator::Euler, Nonlinearity::Tanh, 6, 3, 2, 0);
        let inputs = const_inputs(5, 3, 4, 0.0);
        let (trace, outputs) = forward(&p, &inputs).unwrap();
        for h in &trace.hidden_states {
            assert_eq!(h, &DMatrix::zeros(6, 4));
        }
        for y in &outputs {
            for c in 0..4 {
                for r in 0..2 {
                    assert_eq!(y[(r, c)], p.b_out[r]);
                }
            }
        }
    }

    #[test]
    fn identity_single_step_example() {
        // V = [[0,1],[2,0]] with Euler tau = 1 gives C_V = [[2,-1],[1,0]];
        // from h_0 = 0 the first state is U x_1 = (1, 1).
        let v = VectorField::new(dmatrix![0.0, 1.0; 2.0, 0.0]).unwrap();
        let p = LvfCellParams::new(
            v,
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DVector::zeros(2),
            1.0,
            Integrator::Euler,
            Nonlinearity::Identity,
        )
        .unwrap();
        assert_eq!(p.transition().unwrap().matrix, dmatrix![2.0, -1.0; 1.0, 0.0]);
        let inputs = vec![DMatrix::from_element(2, 1, 1.0)];
        let (trace, outputs) = forward(&p, &inputs).unwrap();
        assert_eq!(trace.hidden_states[1], DMatrix::from_element(2, 1, 1.0));
        assert_eq!(outputs[0], DMatrix::from_element(2, 1, 1.0));
    }

    #[test]
    fn modrelu_values() {
        let z = DVector::from_vec(vec![2.0, -2.0]);
        let b = DVector::from_vec(vec![-1.0, -1.0]);
        assert_eq!(modrelu(&z, &b), DVector::from_vec(vec![1.0, -1.0]));

        let z = DVector::from_vec(vec![0.5]);
        let b = DVector::from_vec(vec![-1.0]);
        assert_eq!(modrelu(&z, &b), DVector::from_vec(vec![0.0]));

        let z = DVector::from_vec(vec![1.5, -0.25, 0.0]);
        let zero = DVector::zeros(3);
        assert_eq!(modrelu(&z, &zero), z);
    }

    #[test]
    fn modrelu_large_negative_bias_silences_cell() {
        let mut p = small_params(Integrator::Euler, Nonlinearity::Modrelu, 4, 2, 2, 3);
        p.b = DVector::from_element(4, -5.0);
        // Bounded inputs keep every pre-activation magnitude under 5.
        let inputs = const_inputs(6, 2, 3, 0.2);
        let (trace, _) = forward(&p, &inputs).unwrap();
        for h in &trace.hidden_states[1..] {
            assert_eq!(h, &DMatrix::zeros(4, 3));
        }
    }

    #[test]
    fn zero_output_grads_zero_gradients() {
        let p = small_params(Integrator::Midpoint, Nonlinearity::Tanh, 5, 3, 2, 7);
        let inputs = const_inputs(4, 3, 2, 0.3);
        let (trace, _) = forward(&p, &inputs).unwrap();
        let zero_grads: Vec<DMatrix<f64>> =
            (0..4).map(|_| DMatrix::zeros(2, 2)).collect();
        let (grads, penalty) = backward(&p, &trace, &zero_grads, 0.0).unwrap();
        assert_eq!(penalty, 0.0);
        assert_eq!(grads.d_v, DMatrix::zeros(5, 5));
        assert_eq!(grads.d_u, DMatrix::zeros(5, 3));
        assert_eq!(grads.d_w_out, DMatrix::zeros(2, 5));
        assert_eq!(grads.d_b_out, DVector::zeros(2));
        assert_eq!(grads.d_b, DVector::zeros(5));
    }

    #[test]
    fn penalty_value_and_gradient() {
        // V = [[0,1],[2,0]] has div = (1,-1), penalty = lambda * 2.
        let v = VectorField::new(dmatrix![0.0, 1.0; 2.0, 0.0]).unwrap();
        let p = LvfCellParams::new(
            v,
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DVector::zeros(2),
            1.0,
            Integrator::Euler,
            Nonlinearity::Identity,
        )
        .unwrap();
        let inputs = vec![DMatrix::zeros(2, 1)];
        let (trace, _) = forward(&p, &inputs).unwrap();
        let zero_grads = vec![DMatrix::zeros(2, 1)];
        let (grads, penalty) = backward(&p, &trace, &zero_grads, 1.0).unwrap();
        assert_eq!(penalty, 2.0);
        // d||div||^2/dV_pq = 2 (div_q - div_p).
        assert_eq!(grads.d_v, dmatrix![0.0, -4.0; 4.0, 0.0]);
    }

    #[test]
    fn d_v_diagonal_stays_zero() {
        let p = small_params(Integrator::Midpoint, Nonlinearity::Modrelu, 6, 3, 3, 9);
        let inputs = const_inputs(5, 3, 2, 0.4);
        let (trace, outputs) = forward(&p, &inputs).unwrap();
        let grads: Vec<DMatrix<f64>> = outputs.iter().map(|y| y.map(|v| v + 0.1)).collect();
        let (g, _) = backward(&p, &trace, &grads, 0.5).unwrap();
        for i in 0..6 {
            assert_eq!(g.d_v[(i, i)], 0.0);
        }
    }

    #[test]
    fn vanilla_matches_field_cell_bit_for_bit() {
        let p = small_params(Integrator::Midpoint, Nonlinearity::Tanh, 8, 4, 3, 11);
        let c = p.transition().unwrap();
        let vp = VanillaCellParams::new(
            c.matrix.clone(),
            p.u.clone(),
            p.w_out.clone(),
            p.b_out.clone(),
            p.b.clone(),
            p.nonlinearity,
        )
        .unwrap();
        let inputs: Vec<DMatrix<f64>> = (0..7)
            .map(|t| DMatrix::from_fn(4, 2, |i, c| ((t + i + c) as f64 * 0.7).sin()))
            .collect();
        let (_, ours) = forward(&p, &inputs).unwrap();
        let (_, theirs) = vanilla_forward(&vp, &inputs).unwrap();
        assert_eq!(ours, theirs);
    }

    #[test]
    fn isometry_under_midpoint_divfree_identity() {
        // Divergence-free field, identity nonlinearity, orthogonal C_V:
        // with zero input the hidden norm is preserved.
        let kappa = 8;
        let v = VectorField::from_fn(kappa, |i, j| ((i * 3 + j * 5) % 7) as f64 / 3.0)
            .project_divergence_free();
        let p = LvfCellParams::new(
            v,
            DMatrix::identity(kappa, kappa),
            DMatrix::identity(kappa, kappa),
            DVector::zeros(kappa),
            DVector::zeros(kappa),
            15.0,
            Integrator::Midpoint,
            Nonlinearity::Identity,
        )
        .unwrap();
        let mut inputs = const_inputs(10, kappa, 1, 0.0);
        inputs[0] = DMatrix::from_fn(kappa, 1, |i, _| (i as f64 + 1.0) / 4.0);
        let (trace, _) = forward(&p, &inputs).unwrap();
        let norm1 = trace.hidden_states[1].norm();
        assert!(norm1 > 0.5);
        for t in 2..=10 {
            let n = trace.hidden_states[t].norm();
            assert!((n - norm1).abs() < 1e-10, "step {t}: {n} vs {norm1}");
        }
    }

    #[test]
    fn non_finite_forward_reports_timestep() {
        let mut p = small_params(Integrator::Euler, Nonlinearity::Identity, 3, 2, 2, 13);
        p.u[(0, 0)] = 1e308;
        let mut inputs = const_inputs(3, 2, 1, 1.0);
        inputs[1][(0, 0)] = 1e308; // overflow at the second step
        match forward(&p, &inputs) {
            Err(Error::NonFinite { timestep }) => assert_eq!(timestep, 2),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_trace_rejected() {
        let p = small_params(Integrator::Euler, Nonlinearity::Tanh, 4, 2, 2, 17);
        let inputs = const_inputs(3, 2, 1, 0.1);
        let (trace, _) = forward(&p, &inputs).unwrap();
        let wrong_grads = vec![DMatrix::zeros(2, 1); 2];
        assert!(backward(&p, &trace, &wrong_grads, 0.0).is_err());

        let mut other = p.clone();
        other.tau = 2.0;
        let full_grads = vec![DMatrix::zeros(2, 1); 3];
        assert!(backward(&other, &trace, &full_grads, 0.0).is_err());
    }

    #[test]
    fn flat_round_trip_preserves_params() {
        let p = small_params(Integrator::Euler, Nonlinearity::Modrelu, 5, 3, 4, 19);
        let flat = p.to_flat();
        assert_eq!(flat.len(), p.n_params());
        let mut q = small_params(Integrator::Euler, Nonlinearity::Modrelu, 5, 3, 4, 23);
        q.set_from_flat(&flat).unwrap();
        assert_eq!(q.v.entries(), p.v.entries());
        assert_eq!(q.u, p.u);
        assert_eq!(q.w_out, p.w_out);
        assert_eq!(q.b_out, p.b_out);
        assert_eq!(q.b, p.b);

        let vp = VanillaCellParams::init(4, 2, 3, Nonlinearity::Tanh, 29).unwrap();
        let flat = vp.to_flat();
        let mut wq = VanillaCellParams::init(4, 2, 3, Nonlinearity::Tanh, 31).unwrap();
        wq.set_from_flat(&flat).unwrap();
        assert_eq!(wq.w, vp.w);
        assert_eq!(wq.to_flat(), flat);
    }
}
