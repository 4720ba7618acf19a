//! The denoiser contract shared by the analytic oracle, the per-step
//! affine model and the trainable network, including Jacobian access.
//!
//! ## Jacobian convention
//!
//! `jac_diag[t][n][d]` is the derivative of the coordinate-`d` output sum
//! `sum_{t',n'} eps_mu[t'][n'][d]` with respect to the input entry
//! `x[t][n][d]` — the quantity two reverse-mode passes (one per output
//! coordinate) produce when the seed is all-ones on that coordinate. For
//! any denoiser whose states do not interact (the analytic oracle, the
//! affine model, or a network with mixing weights zeroed) this equals the
//! literal per-state partial `d eps_mu[t][n][d] / d x[t][n][d]`; with
//! cross-state mixing it is the standard one-pass autodiff estimate of
//! that partial. `jac_full` extends the same convention to the off-
//! diagonal input coordinate. [`jacobian_finite_diff`] measures the same
//! functional by central differences and is the validation oracle.
//!
//! Only the mean head's Jacobian is exposed: the covariance propagation
//! never consumes the covariance head's own input sensitivity, so it is
//! intentionally not part of the contract.

pub mod analytic;
pub mod linear;
pub mod net;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::scene::CondScene;

/// Which per-state Jacobian blocks of the predicted mean to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianMode {
    None,
    Diagonal,
    Full,
}

/// One denoiser invocation: the noisy state tensor, the step index and the
/// conditioning information.
pub struct DenoiserQuery<'a> {
    /// `(T, N, 2)` noisy coordinates.
    pub x_s: &'a Array3<f64>,
    /// Diffusion step, `1 <= s <= S`.
    pub s: usize,
    pub cond: &'a CondScene,
    pub jacobian_mode: JacobianMode,
}

/// Predicted per-state noise distribution plus optional Jacobian blocks.
/// Covariance parameters satisfy `sx, sy in (0, 1)` and `rho in (-1, 1)`;
/// Jacobian fields are present iff requested.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    /// `(T, N, 2)` predicted mean noise.
    pub eps_mu: Array3<f64>,
    /// `(T, N)` covariance parameters of the predicted noise.
    pub cov_sx: Array2<f64>,
    pub cov_sy: Array2<f64>,
    pub cov_rho: Array2<f64>,
    /// `[d x/d x, d y/d y]` diagonal Jacobian entries, each `(T, N)`.
    pub jac_diag: Option<[Array2<f64>; 2]>,
    /// Full per-state blocks `jac_full[out][in]`, each `(T, N)`.
    pub jac_full: Option<[[Array2<f64>; 2]; 2]>,
}

impl DenoiserOutput {
    pub fn validate_against(&self, x_s: &Array3<f64>, mode: JacobianMode) -> Result<()> {
        if self.eps_mu.dim() != x_s.dim() {
            return Err(Error::Shape(format!(
                "denoiser mean {:?} vs query {:?}",
                self.eps_mu.dim(),
                x_s.dim()
            )));
        }
        match mode {
            JacobianMode::None => {
                if self.jac_diag.is_some() || self.jac_full.is_some() {
                    return Err(Error::Param("jacobian fields present but not requested".into()));
                }
            }
            JacobianMode::Diagonal => {
                if self.jac_diag.is_none() {
                    return Err(Error::Param("diagonal jacobian requested but absent".into()));
                }
            }
            JacobianMode::Full => {
                if self.jac_full.is_none() {
                    return Err(Error::Param("full jacobian requested but absent".into()));
                }
            }
        }
        Ok(())
    }
}

/// The denoiser contract. `evaluate` must be a pure function of the model
/// parameters and the query, so repeated evaluation is bit-identical and
/// concurrent evaluation across modes is safe.
pub trait Denoiser: Sync {
    fn evaluate(&self, q: &DenoiserQuery) -> Result<DenoiserOutput>;

    /// Number of diffusion steps the model was built for.
    fn step_count(&self) -> usize;
}

/// Raw heads of a trainable denoiser before Jacobian extraction.
#[derive(Debug, Clone)]
pub struct ModelOutputCore {
    pub eps_mu: Array3<f64>,
    pub cov_sx: Array2<f64>,
    pub cov_sy: Array2<f64>,
    pub cov_rho: Array2<f64>,
}

/// A denoiser with exact reverse-mode gradients. The model struct doubles
/// as its own gradient container: `backward` accumulates parameter
/// gradients into an optional same-shaped struct and always returns the
/// gradient with respect to the noisy input tensor.
pub trait TrainableModel: crate::nn::ParamTensors + Clone + Sync + Sized {
    type Cache;

    fn forward_cached(&self, x_s: &Array3<f64>, s: usize, cond: &CondScene) -> Result<(ModelOutputCore, Self::Cache)>;

    /// Upstream gradients arrive separately for the mean head and the three
    /// covariance channels (post-activation). Returns `d loss / d x_s`.
    fn backward(
        &self,
        cache: &Self::Cache,
        d_mu: &Array3<f64>,
        d_sx: &Array2<f64>,
        d_sy: &Array2<f64>,
        d_rho: &Array2<f64>,
        grads: Option<&mut Self>,
    ) -> Array3<f64>;

    fn step_count(&self) -> usize;
}

/// Per-state Jacobian blocks of the mean head via two reverse-mode passes,
/// one per output coordinate, reading the same-state input gradient.
pub fn reverse_mode_jacobian<M: TrainableModel>(
    model: &M,
    cache: &M::Cache,
    dims: (usize, usize),
    mode: JacobianMode,
) -> (Option<[Array2<f64>; 2]>, Option<[[Array2<f64>; 2]; 2]>) {
    let (t, n) = dims;
    if mode == JacobianMode::None {
        return (None, None);
    }
    let zero2 = Array2::zeros((t, n));
    let mut rows: Vec<[Array2<f64>; 2]> = Vec::with_capacity(2);
    for d in 0..2 {
        let mut seed = Array3::zeros((t, n, 2));
        seed.index_axis_mut(ndarray::Axis(2), d).fill(1.0);
        let gin = model.backward(cache, &seed, &zero2, &zero2, &zero2, None);
        rows.push([
            gin.index_axis(ndarray::Axis(2), 0).to_owned(),
            gin.index_axis(ndarray::Axis(2), 1).to_owned(),
        ]);
    }
    let row1 = rows.pop().unwrap();
    let row0 = rows.pop().unwrap();
    match mode {
        JacobianMode::Diagonal => {
            let [j00, _] = row0;
            let [_, j11] = row1;
            (Some([j00, j11]), None)
        }
        JacobianMode::Full => (None, Some([row0, row1])),
        JacobianMode::None => unreachable!(),
    }
}

/// Central-difference oracle for the diagonal Jacobian convention above:
/// for each input entry `(t, n, d)` perturbed by `+-h`, the response of
/// the coordinate-`d` output sum. Intended for tests; cost is `2 T N 2`
/// model evaluations.
pub fn jacobian_finite_diff(model: &dyn Denoiser, q: &DenoiserQuery, h: f64) -> Result<Array3<f64>> {
    if h <= 0.0 {
        return Err(Error::Param(format!("finite-difference step must be positive, got {h}")));
    }
    let (t_len, n_len, _) = q.x_s.dim();
    let mut out = Array3::zeros((t_len, n_len, 2));
    for t in 0..t_len {
        for n in 0..n_len {
            for d in 0..2 {
                let mut plus = q.x_s.clone();
                plus[(t, n, d)] += h;
                let mut minus = q.x_s.clone();
                minus[(t, n, d)] -= h;
                let qp = DenoiserQuery { x_s: &plus, s: q.s, cond: q.cond, jacobian_mode: JacobianMode::None };
                let qm = DenoiserQuery { x_s: &minus, s: q.s, cond: q.cond, jacobian_mode: JacobianMode::None };
                let op = model.evaluate(&qp)?;
                let om = model.evaluate(&qm)?;
                let sum_p: f64 = op.eps_mu.index_axis(ndarray::Axis(2), d).sum();
                let sum_m: f64 = om.eps_mu.index_axis(ndarray::Axis(2), d).sum();
                out[(t, n, d)] = (sum_p - sum_m) / (2.0 * h);
            }
        }
    }
    Ok(out)
}
