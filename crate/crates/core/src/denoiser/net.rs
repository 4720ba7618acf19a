//! Trainable social-temporal denoiser.
//!
//! Input channels per state: noisy coordinates (2), conditioning
//! observations (2), mask bit (1) and an agent-role one-hot. A shared
//! linear embedding feeds residual blocks, each consisting of a learned
//! step-embedding shift, a bidirectional diagonal recurrence over time
//! (per agent), single-head self-attention across agents (per frame) and
//! a position-wise feed-forward, all with residual connections. Per-block
//! skip projections are summed and drive a two-layer output head emitting
//! the mean noise and the `(sx, sy, rho)` covariance parameters; standard
//! deviations pass through a sigmoid, the correlation through a tanh (or
//! is pinned to zero in uni-variate mode).
//!
//! All gradients are exact reverse-mode; the per-state Jacobian of the
//! mean head is extracted with two input-gradient passes over a shared
//! forward cache.

use ndarray::{Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    relu2, relu2_backward, sigmoid, silu1, silu1_backward, Attention, AttnCache, BiScan, BiScanCache, Ffn, FfnCache,
    Linear, ParamTensors,
};
use crate::scene::CondScene;

use super::{
    reverse_mode_jacobian, Denoiser, DenoiserOutput, DenoiserQuery, ModelOutputCore, TrainableModel,
};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub d_step: usize,
    /// Feed-forward width; 0 means `2 * d_model`.
    pub d_ff: usize,
    pub attn_heads: usize,
    /// Bi-variate covariance head; uni-variate mode pins `rho = 0`.
    pub bivariate: bool,
    pub n_roles: usize,
    /// Diffusion step count the step-embedding table covers.
    pub s_max: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { d_model: 64, n_blocks: 2, d_step: 32, d_ff: 0, attn_heads: 1, bivariate: true, n_roles: 2, s_max: 50 }
    }
}

impl NetConfig {
    pub fn d_ff_actual(&self) -> usize {
        if self.d_ff == 0 {
            2 * self.d_model
        } else {
            self.d_ff
        }
    }

    pub fn in_channels(&self) -> usize {
        5 + self.n_roles
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_blocks == 0 || self.d_step == 0 || self.s_max == 0 || self.n_roles == 0 {
            return Err(Error::Param("net config widths must be positive".into()));
        }
        if self.attn_heads != 1 {
            return Err(Error::Param(format!("only single-head attention is supported, got {}", self.attn_heads)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub step_proj: Linear,
    pub scan: BiScan,
    pub attn: Attention,
    pub ffn: Ffn,
    pub skip: Linear,
}

/// The full parameter set; also serves as its own gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct SocialTemporalNet {
    pub cfg: NetConfig,
    pub w_in: Linear,
    pub step_table: Array2<f64>,
    pub step_lin: Linear,
    pub blocks: Vec<Block>,
    pub head1: Linear,
    pub head2: Linear,
}

impl SocialTemporalNet {
    /// Deterministic initialization from an RNG stream. The final output
    /// head starts at zero: the initial prediction is zero mean noise with
    /// `sx = sy = 0.5`, `rho = 0`.
    pub fn init(cfg: &NetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let blocks = (0..cfg.n_blocks)
            .map(|_| Block {
                step_proj: Linear::init(rng, cfg.d_step, d),
                scan: BiScan::init(rng, d),
                attn: Attention::init(rng, d),
                ffn: Ffn::init(rng, d, cfg.d_ff_actual()),
                skip: Linear::init(rng, d, d),
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            w_in: Linear::init(rng, cfg.in_channels(), d),
            step_table: Array2::from_shape_fn((cfg.s_max, cfg.d_step), |_| {
                0.5 * rng.sample::<f64, _>(rand_distr::StandardNormal)
            }),
            step_lin: Linear::init(rng, cfg.d_step, cfg.d_step),
            blocks,
            head1: Linear::init(rng, d, d),
            head2: Linear::zeros(d, 5),
        })
    }

    /// Zero the temporal and social mixing weights so every output state
    /// depends only on its own inputs (used by the exact-diagonal-Jacobian
    /// tests).
    pub fn disable_mixing(&mut self) {
        for b in &mut self.blocks {
            b.scan.w_f.fill(0.0);
            b.scan.w_b.fill(0.0);
            b.attn.wo.w.fill(0.0);
            b.attn.wo.b.fill(0.0);
        }
    }

    fn build_input(&self, x_s: &Array3<f64>, cond: &CondScene) -> Result<Array2<f64>> {
        let (t, n, d) = x_s.dim();
        if d != 2 {
            return Err(Error::Shape(format!("expected (T, N, 2), got last dim {d}")));
        }
        if cond.observed.dim() != (t, n, 2) || cond.mask.dim() != (t, n) {
            return Err(Error::Shape(format!(
                "conditioning shapes {:?}/{:?} vs state ({t}, {n}, 2)",
                cond.observed.dim(),
                cond.mask.dim()
            )));
        }
        if cond.roles.len() != n {
            return Err(Error::Shape(format!("roles length {} vs N = {n}", cond.roles.len())));
        }
        let c_in = self.cfg.in_channels();
        let mut xin = Array2::zeros((t * n, c_in));
        for ti in 0..t {
            for ni in 0..n {
                let r = ti * n + ni;
                xin[(r, 0)] = x_s[(ti, ni, 0)];
                xin[(r, 1)] = x_s[(ti, ni, 1)];
                xin[(r, 2)] = cond.observed[(ti, ni, 0)];
                xin[(r, 3)] = cond.observed[(ti, ni, 1)];
                xin[(r, 4)] = cond.mask[(ti, ni)] as f64;
                let role = cond.roles[ni] as usize;
                if role >= self.cfg.n_roles {
                    return Err(Error::Param(format!("role {role} out of range (n_roles = {})", self.cfg.n_roles)));
                }
                xin[(r, 5 + role)] = 1.0;
            }
        }
        Ok(xin)
    }
}

/// Rows `(T*N, d)` -> per-agent sequences `(N, T, d)`.
fn rows_to_agent_seq(x: &Array2<f64>, t: usize, n: usize) -> Array3<f64> {
    let d = x.ncols();
    let mut out = Array3::zeros((n, t, d));
    for ti in 0..t {
        for ni in 0..n {
            out.slice_mut(ndarray::s![ni, ti, ..]).assign(&x.row(ti * n + ni));
        }
    }
    out
}

fn agent_seq_to_rows(x: &Array3<f64>) -> Array2<f64> {
    let (n, t, d) = x.dim();
    let mut out = Array2::zeros((t * n, d));
    for ti in 0..t {
        for ni in 0..n {
            out.row_mut(ti * n + ni).assign(&x.slice(ndarray::s![ni, ti, ..]));
        }
    }
    out
}

/// Rows `(T*N, d)` are already `(T, N, d)` in memory order.
fn rows_to_frames(x: &Array2<f64>, t: usize, n: usize) -> Array3<f64> {
    let d = x.ncols();
    x.clone().to_shape((t, n, d)).unwrap().to_owned()
}

fn frames_to_rows(x: &Array3<f64>) -> Array2<f64> {
    let (t, n, d) = x.dim();
    x.clone().to_shape((t * n, d)).unwrap().to_owned()
}

struct BlockCache {
    scan: BiScanCache,
    attn: AttnCache,
    ffn: FfnCache,
    /// Block output (input of the skip projection and the next block).
    h_out: Array2<f64>,
}

pub struct NetCache {
    dims: (usize, usize),
    s: usize,
    xin: Array2<f64>,
    pre_in: Array2<f64>,
    step_vec: Array2<f64>,
    pre_se: Array2<f64>,
    es: Array2<f64>,
    blocks: Vec<BlockCache>,
    skip_sum: Array2<f64>,
    g1pre: Array2<f64>,
    out5: Array2<f64>,
}

impl TrainableModel for SocialTemporalNet {
    type Cache = NetCache;

    fn forward_cached(&self, x_s: &Array3<f64>, s: usize, cond: &CondScene) -> Result<(ModelOutputCore, NetCache)> {
        if s < 1 || s > self.cfg.s_max {
            return Err(Error::Param(format!("step {s} out of 1..={}", self.cfg.s_max)));
        }
        let (t, n, _) = x_s.dim();
        let xin = self.build_input(x_s, cond)?;
        let pre_in = self.w_in.forward(&xin);
        let mut h = relu2(&pre_in);

        let step_vec = self.step_table.row(s - 1).to_owned().insert_axis(Axis(0));
        let pre_se = self.step_lin.forward(&step_vec);
        let es = silu1(&pre_se.row(0).to_owned()).insert_axis(Axis(0));

        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut skip_sum = Array2::zeros((t * n, self.cfg.d_model));
        for block in &self.blocks {
            let sp = block.step_proj.forward(&es);
            let u = &h + &sp.row(0);
            let (tout3, scan_cache) = block.scan.forward(&rows_to_agent_seq(&u, t, n));
            let v = &u + &agent_seq_to_rows(&tout3);
            let (aout3, attn_cache) = block.attn.forward(&rows_to_frames(&v, t, n));
            let w = &v + &frames_to_rows(&aout3);
            let (fout, ffn_cache) = block.ffn.forward(&w);
            let h_out = &w + &fout;
            skip_sum += &block.skip.forward(&h_out);
            blocks.push(BlockCache { scan: scan_cache, attn: attn_cache, ffn: ffn_cache, h_out: h_out.clone() });
            h = h_out;
        }

        let g1pre = self.head1.forward(&skip_sum);
        let out5 = self.head2.forward(&relu2(&g1pre));

        let mut eps_mu = Array3::zeros((t, n, 2));
        let mut cov_sx = Array2::zeros((t, n));
        let mut cov_sy = Array2::zeros((t, n));
        let mut cov_rho = Array2::zeros((t, n));
        for ti in 0..t {
            for ni in 0..n {
                let r = ti * n + ni;
                eps_mu[(ti, ni, 0)] = out5[(r, 0)];
                eps_mu[(ti, ni, 1)] = out5[(r, 1)];
                cov_sx[(ti, ni)] = sigmoid(out5[(r, 2)]);
                cov_sy[(ti, ni)] = sigmoid(out5[(r, 3)]);
                cov_rho[(ti, ni)] = if self.cfg.bivariate { out5[(r, 4)].tanh() } else { 0.0 };
            }
        }
        if eps_mu.iter().any(|v| !v.is_finite()) || out5.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("denoiser forward produced non-finite values at step {s}")));
        }
        let core = ModelOutputCore { eps_mu, cov_sx, cov_sy, cov_rho };
        let cache = NetCache {
            dims: (t, n),
            s,
            xin,
            pre_in,
            step_vec,
            pre_se,
            es,
            blocks,
            skip_sum,
            g1pre,
            out5,
        };
        Ok((core, cache))
    }

    fn backward(
        &self,
        cache: &NetCache,
        d_mu: &Array3<f64>,
        d_sx: &Array2<f64>,
        d_sy: &Array2<f64>,
        d_rho: &Array2<f64>,
        mut grads: Option<&mut Self>,
    ) -> Array3<f64> {
        let (t, n) = cache.dims;
        let rows = t * n;

        // Chain the post-activation covariance gradients onto the raw head.
        let mut d_out5 = Array2::zeros((rows, 5));
        for ti in 0..t {
            for ni in 0..n {
                let r = ti * n + ni;
                d_out5[(r, 0)] = d_mu[(ti, ni, 0)];
                d_out5[(r, 1)] = d_mu[(ti, ni, 1)];
                let sx = sigmoid(cache.out5[(r, 2)]);
                let sy = sigmoid(cache.out5[(r, 3)]);
                d_out5[(r, 2)] = d_sx[(ti, ni)] * sx * (1.0 - sx);
                d_out5[(r, 3)] = d_sy[(ti, ni)] * sy * (1.0 - sy);
                if self.cfg.bivariate {
                    let rho = cache.out5[(r, 4)].tanh();
                    d_out5[(r, 4)] = d_rho[(ti, ni)] * (1.0 - rho * rho);
                }
            }
        }

        let g1 = relu2(&cache.g1pre);
        let d_g1 = self.head2.backward(&g1, &d_out5, grads.as_deref_mut().map(|g| &mut g.head2));
        let d_g1pre = relu2_backward(&d_g1, &cache.g1pre);
        let d_skip_sum = self.head1.backward(&cache.skip_sum, &d_g1pre, grads.as_deref_mut().map(|g| &mut g.head1));

        let mut d_h = Array2::zeros((rows, self.cfg.d_model));
        let mut d_es_total = Array2::zeros((1, self.cfg.d_step));
        for (bi, block) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[bi];
            d_h += &block.skip.backward(&bc.h_out, &d_skip_sum, grads.as_deref_mut().map(|g| &mut g.blocks[bi].skip));
            // h_out = w + ffn(w)
            let d_w = &d_h + &block.ffn.backward(&bc.ffn, &d_h, grads.as_deref_mut().map(|g| &mut g.blocks[bi].ffn));
            // w = v + attn(v)
            let d_w3 = rows_to_frames(&d_w, t, n);
            let d_v = &d_w
                + &frames_to_rows(&block.attn.backward(&bc.attn, &d_w3, grads.as_deref_mut().map(|g| &mut g.blocks[bi].attn)));
            // v = u + scan(u)
            let d_v3 = rows_to_agent_seq(&d_v, t, n);
            let d_u = &d_v
                + &agent_seq_to_rows(&block.scan.backward(&bc.scan, &d_v3, grads.as_deref_mut().map(|g| &mut g.blocks[bi].scan)));
            // u = h_prev + step_proj(es) broadcast over rows
            let d_sp = d_u.sum_axis(Axis(0)).insert_axis(Axis(0));
            d_es_total += &block.step_proj.backward(&cache.es, &d_sp, grads.as_deref_mut().map(|g| &mut g.blocks[bi].step_proj));
            d_h = d_u;
        }

        // Step-embedding path.
        let d_pre_se = silu1_backward(&d_es_total.row(0).to_owned(), &cache.pre_se.row(0).to_owned()).insert_axis(Axis(0));
        let d_step_vec = self.step_lin.backward(&cache.step_vec, &d_pre_se, grads.as_deref_mut().map(|g| &mut g.step_lin));
        if let Some(g) = grads.as_deref_mut() {
            let mut row = g.step_table.row_mut(cache.s - 1);
            row += &d_step_vec.row(0);
        }

        // Input path.
        let d_pre_in = relu2_backward(&d_h, &cache.pre_in);
        let d_xin = self.w_in.backward(&cache.xin, &d_pre_in, grads.as_deref_mut().map(|g| &mut g.w_in));
        let mut d_x = Array3::zeros((t, n, 2));
        for ti in 0..t {
            for ni in 0..n {
                let r = ti * n + ni;
                d_x[(ti, ni, 0)] = d_xin[(r, 0)];
                d_x[(ti, ni, 1)] = d_xin[(r, 1)];
            }
        }
        d_x
    }

    fn step_count(&self) -> usize {
        self.cfg.s_max
    }
}

impl ParamTensors for SocialTemporalNet {
    fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        self.w_in.for_each(&format!("{prefix}.w_in"), f);
        f(format!("{prefix}.step_table"), self.step_table.view().into_dyn());
        self.step_lin.for_each(&format!("{prefix}.step_lin"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.step_proj.for_each(&format!("{prefix}.block{i}.step_proj"), f);
            b.scan.for_each(&format!("{prefix}.block{i}.scan"), f);
            b.attn.for_each(&format!("{prefix}.block{i}.attn"), f);
            b.ffn.for_each(&format!("{prefix}.block{i}.ffn"), f);
            b.skip.for_each(&format!("{prefix}.block{i}.skip"), f);
        }
        self.head1.for_each(&format!("{prefix}.head1"), f);
        self.head2.for_each(&format!("{prefix}.head2"), f);
    }
    fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, f64>)) {
        self.w_in.for_each_mut(&format!("{prefix}.w_in"), f);
        f(format!("{prefix}.step_table"), self.step_table.view_mut().into_dyn());
        self.step_lin.for_each_mut(&format!("{prefix}.step_lin"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.step_proj.for_each_mut(&format!("{prefix}.block{i}.step_proj"), f);
            b.scan.for_each_mut(&format!("{prefix}.block{i}.scan"), f);
            b.attn.for_each_mut(&format!("{prefix}.block{i}.attn"), f);
            b.ffn.for_each_mut(&format!("{prefix}.block{i}.ffn"), f);
            b.skip.for_each_mut(&format!("{prefix}.block{i}.skip"), f);
        }
        self.head1.for_each_mut(&format!("{prefix}.head1"), f);
        self.head2.for_each_mut(&format!("{prefix}.head2"), f);
    }
}

impl Denoiser for SocialTemporalNet {
    fn evaluate(&self, q: &DenoiserQuery) -> Result<DenoiserOutput> {
        let (core, cache) = self.forward_cached(q.x_s, q.s, q.cond)?;
        let (t, n, _) = q.x_s.dim();
        let (jac_diag, jac_full) = reverse_mode_jacobian(self, &cache, (t, n), q.jacobian_mode);
        let out = DenoiserOutput {
            eps_mu: core.eps_mu,
            cov_sx: core.cov_sx,
            cov_sy: core.cov_sy,
            cov_rho: core.cov_rho,
            jac_diag,
            jac_full,
        };
        out.validate_against(q.x_s, q.jacobian_mode)?;
        Ok(out)
    }

    fn step_count(&self) -> usize {
        self.cfg.s_max
    }
}
