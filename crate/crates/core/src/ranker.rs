//! Permutation-equivariant mode ranker.
//!
//! Given K completions of one scene, the ranker assigns each mode an
//! error probability `e_k` (softmax-normalized across modes) trained to
//! correlate with the per-mode scene displacement error. Inputs per state
//! are the predicted mean, the square roots of the covariance eigenvalues
//! and the mask bit; a social-temporal block processes states, a mean
//! pool collapses each mode to one embedding, and a multi-mode attention
//! block ranks the K embeddings jointly. No positional encoding is
//! applied along the mode axis, so permuting modes permutes the output.
//!
//! The training objective maximizes a differentiable Spearman correlation
//! built from pairwise-sigmoid soft ranks with a scale-relative
//! temperature.

use ndarray::{Array2, Array3, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::gaussian2d::avg_ucty;
use crate::metrics::{sade, spearman};
use crate::nn::{relu2, relu2_backward, zeros_like, Adam, Attention, AttnCache, BiScan, BiScanCache, Ffn, FfnCache, Linear, ParamTensors};
use crate::rng::{substream, subseed};
use crate::sampler::{sample, ModeSet, SamplerConfig};
use crate::training::TrainExample;

/// Ranker architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankerConfig {
    pub d_model: usize,
    /// Feed-forward width; 0 means `2 * d_model`.
    pub d_ff: usize,
    /// Relative soft-rank temperature.
    pub tau: f64,
}

impl Default for RankerConfig {
    fn default() -> Self {
        Self { d_model: 64, d_ff: 0, tau: 0.1 }
    }
}

impl RankerConfig {
    fn d_ff_actual(&self) -> usize {
        if self.d_ff == 0 {
            2 * self.d_model
        } else {
            self.d_ff
        }
    }
}

/// Stacked ranker input: `(K, T, N, 5)` with channels
/// `[mean_x, mean_y, sqrt(l1), sqrt(l2), mask]`.
#[derive(Debug, Clone)]
pub struct RankInput {
    pub feats: Array4<f64>,
}

impl RankInput {
    pub fn from_modes(set: &ModeSet, mask: &Array2<u8>) -> Result<Self> {
        if set.modes.is_empty() {
            return Err(Error::UndefinedInput("rank input needs at least one mode".into()));
        }
        let (t, n) = set.modes[0].dims();
        if mask.dim() != (t, n) {
            return Err(Error::Shape(format!("mask {:?} vs modes ({t}, {n})", mask.dim())));
        }
        let k = set.modes.len();
        let mut feats = Array4::zeros((k, t, n, 5));
        for (ki, mode) in set.modes.iter().enumerate() {
            if mode.dims() != (t, n) {
                return Err(Error::Shape("inconsistent mode shapes".into()));
            }
            for ti in 0..t {
                for ni in 0..n {
                    let (l1, l2) = mode.cov(ti, ni).eigenvalues();
                    feats[(ki, ti, ni, 0)] = mode.means[(ti, ni, 0)];
                    feats[(ki, ti, ni, 1)] = mode.means[(ti, ni, 1)];
                    feats[(ki, ti, ni, 2)] = l1.max(0.0).sqrt();
                    feats[(ki, ti, ni, 3)] = l2.max(0.0).sqrt();
                    feats[(ki, ti, ni, 4)] = mask[(ti, ni)] as f64;
                }
            }
        }
        Ok(Self { feats })
    }
}

/// Ranker parameters; doubles as its own gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct RankNet {
    pub cfg: RankerConfig,
    pub embed: Linear,
    pub scan: BiScan,
    pub attn: Attention,
    pub ffn: Ffn,
    pub mst_attn: Attention,
    pub mst_ffn: Ffn,
    pub head: Linear,
}

impl RankNet {
    /// The scoring head starts small-random with a positive bias that
    /// keeps the ReLU above zero for typical embedding magnitudes; an
    /// all-dead head would freeze every probability at 1/K and block all
    /// gradient flow.
    pub fn init(cfg: &RankerConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let mut head = Linear::init(rng, d, 1);
        head.w.mapv_inplace(|v| 0.1 * v);
        head.b.fill(1.0);
        Self {
            cfg: cfg.clone(),
            embed: Linear::init(rng, 5, d),
            scan: BiScan::init(rng, d),
            attn: Attention::init(rng, d),
            ffn: Ffn::init(rng, d, cfg.d_ff_actual()),
            mst_attn: Attention::init(rng, d),
            mst_ffn: Ffn::init(rng, d, cfg.d_ff_actual()),
            head,
        }
    }
}

impl ParamTensors for RankNet {
    fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        self.embed.for_each(&format!("{prefix}.embed"), f);
        self.scan.for_each(&format!("{prefix}.scan"), f);
        self.attn.for_each(&format!("{prefix}.attn"), f);
        self.ffn.for_each(&format!("{prefix}.ffn"), f);
        self.mst_attn.for_each(&format!("{prefix}.mst_attn"), f);
        self.mst_ffn.for_each(&format!("{prefix}.mst_ffn"), f);
        self.head.for_each(&format!("{prefix}.head"), f);
    }
    fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, f64>)) {
        self.embed.for_each_mut(&format!("{prefix}.embed"), f);
        self.scan.for_each_mut(&format!("{prefix}.scan"), f);
        self.attn.for_each_mut(&format!("{prefix}.attn"), f);
        self.ffn.for_each_mut(&format!("{prefix}.ffn"), f);
        self.mst_attn.for_each_mut(&format!("{prefix}.mst_attn"), f);
        self.mst_ffn.for_each_mut(&format!("{prefix}.mst_ffn"), f);
        self.head.for_each_mut(&format!("{prefix}.head"), f);
    }
}

pub struct RankCache {
    dims: (usize, usize, usize),
    flat_in: Array2<f64>,
    scan_cache: BiScanCache,
    attn_cache: AttnCache,
    ffn_cache: FfnCache,
    pooled: Array2<f64>,
    mst_attn_cache: AttnCache,
    mst_ffn_cache: FfnCache,
    m2: Array2<f64>,
    score_pre: Array2<f64>,
    e: Vec<f64>,
}

/// Row layout for the flattened state axis: `r = (k * T + t) * N + n`.
fn flat_to_scan_groups(x: &Array2<f64>, k: usize, t: usize, n: usize) -> Array3<f64> {
    let d = x.ncols();
    let mut out = Array3::zeros((k * n, t, d));
    for ki in 0..k {
        for ti in 0..t {
            for ni in 0..n {
                out.slice_mut(ndarray::s![ki * n + ni, ti, ..]).assign(&x.row((ki * t + ti) * n + ni));
            }
        }
    }
    out
}

fn scan_groups_to_flat(x: &Array3<f64>, k: usize, t: usize, n: usize) -> Array2<f64> {
    let d = x.dim().2;
    let mut out = Array2::zeros((k * t * n, d));
    for ki in 0..k {
        for ti in 0..t {
            for ni in 0..n {
                out.row_mut((ki * t + ti) * n + ni).assign(&x.slice(ndarray::s![ki * n + ni, ti, ..]));
            }
        }
    }
    out
}

impl RankNet {
    /// Forward pass: error probabilities over the K modes plus the cache
    /// for the backward pass.
    pub fn forward(&self, input: &RankInput) -> Result<(Vec<f64>, RankCache)> {
        let (k, t, n, c) = input.feats.dim();
        if c != 5 {
            return Err(Error::Shape(format!("rank input must have 5 channels, got {c}")));
        }
        let d = self.cfg.d_model;
        let flat_in = input.feats.to_shape((k * t * n, 5)).unwrap().to_owned();
        let h = self.embed.forward(&flat_in);

        let (scan_out, scan_cache) = self.scan.forward(&flat_to_scan_groups(&h, k, t, n));
        let v = &h + &scan_groups_to_flat(&scan_out, k, t, n);

        let v3 = v.clone().to_shape((k * t, n, d)).unwrap().to_owned();
        let (attn_out, attn_cache) = self.attn.forward(&v3);
        let w = &v + &attn_out.to_shape((k * t * n, d)).unwrap().to_owned();

        let (ffn_out, ffn_cache) = self.ffn.forward(&w);
        let h2 = &w + &ffn_out;

        // Mean pool over (T, N) per mode.
        let mut pooled = Array2::zeros((k, d));
        for ki in 0..k {
            for r in ki * t * n..(ki + 1) * t * n {
                let row = h2.row(r);
                let mut dst = pooled.row_mut(ki);
                dst += &row;
            }
        }
        pooled /= (t * n) as f64;

        let p3 = pooled.clone().insert_axis(Axis(0));
        let (m_attn, mst_attn_cache) = self.mst_attn.forward(&p3);
        let m1 = &pooled + &m_attn.index_axis(Axis(0), 0);
        let (m_ffn, mst_ffn_cache) = self.mst_ffn.forward(&m1);
        let m2 = &m1 + &m_ffn;

        let score_pre = self.head.forward(&m2);
        let scores = relu2(&score_pre);
        // Softmax over K with max subtraction.
        let max = scores.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        let exps: Vec<f64> = (0..k).map(|i| (scores[(i, 0)] - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let e: Vec<f64> = exps.iter().map(|x| x / sum).collect();
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("ranker produced non-finite probabilities".into()));
        }
        let cache = RankCache {
            dims: (k, t, n),
            flat_in,
            scan_cache,
            attn_cache,
            ffn_cache,
            pooled,
            mst_attn_cache,
            mst_ffn_cache,
            m2,
            score_pre,
            e: e.clone(),
        };
        Ok((e, cache))
    }

    /// Reverse pass from `d(loss)/d(e)`; accumulates parameter gradients.
    pub fn backward(&self, cache: &RankCache, d_e: &[f64], mut grads: Option<&mut Self>) {
        let (k, t, n) = cache.dims;
        let d = self.cfg.d_model;
        // Softmax backward.
        let dot: f64 = cache.e.iter().zip(d_e.iter()).map(|(e, g)| e * g).sum();
        let mut d_scores = Array2::zeros((k, 1));
        for i in 0..k {
            d_scores[(i, 0)] = cache.e[i] * (d_e[i] - dot);
        }
        let d_score_pre = relu2_backward(&d_scores, &cache.score_pre);
        let d_m2 = self.head.backward(&cache.m2, &d_score_pre, grads.as_deref_mut().map(|g| &mut g.head));

        // m2 = m1 + ffn(m1); m1 = pooled + attn(pooled).
        let m1 = {
            // Recover m1 from the caches: pooled + attention output. The
            // ffn cache holds its input, which is exactly m1.
            // (FfnCache.x is private to nn; recompute instead.)
            let p3 = cache.pooled.clone().insert_axis(Axis(0));
            let (m_attn, _) = self.mst_attn.forward(&p3);
            &cache.pooled + &m_attn.index_axis(Axis(0), 0)
        };
        let _ = &m1;
        let d_m1 = &d_m2 + &self.mst_ffn.backward(&cache.mst_ffn_cache, &d_m2, grads.as_deref_mut().map(|g| &mut g.mst_ffn));
        let d_m1_3 = d_m1.clone().insert_axis(Axis(0));
        let d_pooled = &d_m1
            + &self
                .mst_attn
                .backward(&cache.mst_attn_cache, &d_m1_3, grads.as_deref_mut().map(|g| &mut g.mst_attn))
                .index_axis(Axis(0), 0);

        // Unpool: every state row of mode k receives d_pooled[k] / (T N).
        let mut d_h2 = Array2::zeros((k * t * n, d));
        let scale = 1.0 / (t * n) as f64;
        for ki in 0..k {
            for r in ki * t * n..(ki + 1) * t * n {
                let mut dst = d_h2.row_mut(r);
                dst.assign(&d_pooled.row(ki));
                dst *= scale;
            }
        }

        let d_w = &d_h2 + &self.ffn.backward(&cache.ffn_cache, &d_h2, grads.as_deref_mut().map(|g| &mut g.ffn));
        let d_w3 = d_w.clone().to_shape((k * t, n, d)).unwrap().to_owned();
        let d_v = &d_w
            + &self
                .attn
                .backward(&cache.attn_cache, &d_w3, grads.as_deref_mut().map(|g| &mut g.attn))
                .to_shape((k * t * n, d)).unwrap().to_owned();
        let d_v3 = flat_to_scan_groups(&d_v, k, t, n);
        let d_h = &d_v
            + &scan_groups_to_flat(
                &self.scan.backward(&cache.scan_cache, &d_v3, grads.as_deref_mut().map(|g| &mut g.scan)),
                k,
                t,
                n,
            );
        self.embed.backward(&cache.flat_in, &d_h, grads.as_deref_mut().map(|g| &mut g.embed));
    }
}

/// Differentiable Spearman correlation via pairwise-sigmoid soft ranks.
///
/// `R[v_k] = 1 + sum_{j != k} sigmoid((v_k - v_j) / tau_v)` with the
/// temperature `tau_v = tau * std(v)`, followed by the Pearson correlation
/// of the two soft-rank vectors. Returns `(rho, d rho / d e, degenerate)`;
/// zero-variance inputs define `rho = 0` with a zero gradient and the
/// `degenerate` flag raised.
pub fn soft_spearman_grad(e: &[f64], target: &[f64], tau: f64) -> Result<(f64, Vec<f64>, bool)> {
    let k = e.len();
    if k < 2 || target.len() != k {
        return Err(Error::Param(format!("soft Spearman needs matching K >= 2, got {k} and {}", target.len())));
    }
    if tau <= 0.0 {
        return Err(Error::Param(format!("temperature must be positive, got {tau}")));
    }
    let kf = k as f64;
    let mean_e = e.iter().sum::<f64>() / kf;
    let var_e = e.iter().map(|v| (v - mean_e) * (v - mean_e)).sum::<f64>() / kf;
    let std_e = var_e.sqrt();
    let mean_u = target.iter().sum::<f64>() / kf;
    let var_u = target.iter().map(|v| (v - mean_u) * (v - mean_u)).sum::<f64>() / kf;
    if std_e < 1e-12 || var_u.sqrt() < 1e-12 {
        return Ok((0.0, vec![0.0; k], true));
    }
    let tau_e = tau * std_e;
    let tau_u = tau * var_u.sqrt();

    let soft_ranks = |v: &[f64], t: f64| -> Vec<f64> {
        (0..v.len())
            .map(|i| {
                1.0 + (0..v.len())
                    .filter(|&j| j != i)
                    .map(|j| crate::nn::sigmoid((v[i] - v[j]) / t))
                    .sum::<f64>()
            })
            .collect()
    };
    let x = soft_ranks(e, tau_e);
    let y = soft_ranks(target, tau_u);

    let mx = x.iter().sum::<f64>() / kf;
    let my = y.iter().sum::<f64>() / kf;
    let xt: Vec<f64> = x.iter().map(|v| v - mx).collect();
    let yt: Vec<f64> = y.iter().map(|v| v - my).collect();
    let nx = xt.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = yt.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx < 1e-12 || ny < 1e-12 {
        return Ok((0.0, vec![0.0; k], true));
    }
    let rho = xt.iter().zip(yt.iter()).map(|(a, b)| a * b).sum::<f64>() / (nx * ny);

    // d rho / d x_k (centering terms vanish against zero-mean vectors).
    let gx: Vec<f64> = (0..k).map(|i| yt[i] / (nx * ny) - rho * xt[i] / (nx * nx)).collect();

    // d x_i / d e_m: direct pairwise part plus the temperature path
    // through tau_e = tau * std(e).
    let mut s = vec![vec![0.0; k]; k]; // sigma'((e_i - e_j)/tau_e)
    let mut delta = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let dlt = (e[i] - e[j]) / tau_e;
            let sg = crate::nn::sigmoid(dlt);
            s[i][j] = sg * (1.0 - sg);
            delta[i][j] = dlt;
        }
    }
    // D_i = sum_j s_ij * delta_ij multiplies the tau-path.
    let d_i: Vec<f64> = (0..k).map(|i| (0..k).filter(|&j| j != i).map(|j| s[i][j] * delta[i][j]).sum()).collect();
    // d tau_e / d e_m = tau * (e_m - mean) / (K std).
    let dtau: Vec<f64> = e.iter().map(|v| tau * (v - mean_e) / (kf * std_e)).collect();

    let mut grad = vec![0.0; k];
    let gx_dot_d: f64 = gx.iter().zip(d_i.iter()).map(|(a, b)| a * b).sum();
    for m in 0..k {
        // Direct part.
        let own: f64 = (0..k).filter(|&j| j != m).map(|j| s[m][j]).sum();
        let mut acc = gx[m] * own / tau_e;
        for i in 0..k {
            if i != m {
                acc -= gx[i] * s[i][m] / tau_e;
            }
        }
        // Temperature path.
        acc -= dtau[m] / tau_e * gx_dot_d;
        grad[m] = acc;
    }
    Ok((rho, grad, false))
}

/// Value-only wrapper.
pub fn soft_spearman(e: &[f64], target: &[f64], tau: f64) -> Result<(f64, bool)> {
    let (rho, _, degenerate) = soft_spearman_grad(e, target, tau)?;
    Ok((rho, degenerate))
}

/// AvgUcty ranking scores: per-mode mean semi-axis length. Ascending
/// order = most-confident first.
pub fn rank_by_avg_ucty(set: &ModeSet, mask: &Array2<u8>) -> Result<Vec<f64>> {
    set.modes.iter().map(|m| avg_ucty(m, mask)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct RankerEpoch {
    pub epoch: usize,
    pub train_soft_rho: f64,
    pub holdout_hard_rho: f64,
    pub skipped_degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankerTrainConfig {
    pub epochs: usize,
    pub k: usize,
    pub lr: f64,
    pub tau: f64,
    pub seed: u64,
    /// Fraction of scenes held out for the per-epoch hard-Spearman report.
    pub holdout_frac: f64,
}

impl Default for RankerTrainConfig {
    fn default() -> Self {
        Self { epochs: 20, k: 20, lr: 1e-3, tau: 0.1, seed: 0, holdout_frac: 0.2 }
    }
}

/// Mode features plus per-mode SADE targets for one scene.
pub struct RankScene {
    pub input: RankInput,
    pub sades: Vec<f64>,
    pub mask: Array2<u8>,
}

/// Generate K modes per scene with the frozen denoiser and compute the
/// SADE targets. Modes are sampled once per scene and reused across
/// epochs.
pub fn build_rank_scenes(
    denoiser: &dyn Denoiser,
    template: &SamplerConfig,
    examples: &[TrainExample],
    k: usize,
    seed: u64,
    sched: &crate::schedule::NoiseSchedule,
) -> Result<Vec<RankScene>> {
    let mut out = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let mut cfg = template.clone();
        cfg.k = k;
        cfg.seed = subseed(seed, &format!("rank-scene-{i}"));
        let cond = crate::scene::split_condition(&ex.scene, &ex.mask)?;
        let set = sample(denoiser, &ex.scene.scene_id, &cond, sched, &cfg)?;
        let sades: Vec<f64> = set.modes.iter().map(|m| sade(&m.means, &ex.scene, &ex.mask)).collect::<Result<_>>()?;
        out.push(RankScene { input: RankInput::from_modes(&set, &ex.mask)?, sades, mask: ex.mask.clone() });
    }
    Ok(out)
}

/// Train the ranker to maximize the soft Spearman correlation between its
/// error probabilities and the SADE targets. Returns the trained
/// parameters plus the per-epoch log (held-out hard Spearman included).
pub fn train_ranker(
    rank_scenes: &[RankScene],
    net_cfg: &RankerConfig,
    cfg: &RankerTrainConfig,
) -> Result<(RankNet, Vec<RankerEpoch>)> {
    if rank_scenes.len() < 2 {
        return Err(Error::UndefinedInput("ranker training needs at least two scenes".into()));
    }
    let n_holdout = ((rank_scenes.len() as f64 * cfg.holdout_frac).ceil() as usize).clamp(1, rank_scenes.len() - 1);
    let n_train = rank_scenes.len() - n_holdout;
    let (train_set, holdout_set) = rank_scenes.split_at(n_train);

    let mut rng = substream(cfg.seed, "ranker-init");
    let mut net = RankNet::init(&RankerConfig { tau: cfg.tau, ..net_cfg.clone() }, &mut rng);
    let mut adam = Adam::new(&net);
    let mut order_rng = substream(cfg.seed, "ranker-order");
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        for i in (1..order.len()).rev() {
            let j = order_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut rho_sum = 0.0;
        let mut skipped = 0usize;
        for &i in &order {
            let scene = &train_set[i];
            let (e, cache) = net.forward(&scene.input)?;
            let (rho, grad_e, degenerate) = soft_spearman_grad(&e, &scene.sades, cfg.tau)?;
            if degenerate {
                skipped += 1;
                continue;
            }
            rho_sum += rho;
            // Maximize rho: descend on -rho.
            let d_e: Vec<f64> = grad_e.iter().map(|g| -g).collect();
            let mut grads = zeros_like(&net);
            net.backward(&cache, &d_e, Some(&mut grads));
            adam.step(&mut net, &grads, cfg.lr);
        }
        let holdout_hard_rho = holdout_hard_spearman(&net, holdout_set)?;
        log.push(RankerEpoch {
            epoch,
            train_soft_rho: rho_sum / (order.len() - skipped).max(1) as f64,
            holdout_hard_rho,
            skipped_degenerate: skipped,
        });
    }
    Ok((net, log))
}

/// Mean hard Spearman of the ranker's probabilities against the SADE
/// targets over a scene set.
pub fn holdout_hard_spearman(net: &RankNet, scenes: &[RankScene]) -> Result<f64> {
    if scenes.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for scene in scenes {
        let (e, _) = net.forward(&scene.input)?;
        acc += spearman(&e, &scene.sades)?;
    }
    Ok(acc / scenes.len() as f64)
}
