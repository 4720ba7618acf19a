//! Minimal neural-network layer library with exact reverse-mode gradients.
//!
//! Everything is `f64` and hand-differentiated: each layer's `backward`
//! consumes the cache produced by its `forward` and returns the input
//! gradient, optionally accumulating parameter gradients into a
//! same-shaped parameter struct. Gradients are verified against central
//! finite differences in the tests.

use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

/// Named enumeration of a model's parameter tensors, used by the
/// optimizer, the checkpoint container and gradient plumbing. Tensor
/// order must be deterministic and identical between `for_each` and
/// `for_each_mut`.
pub trait ParamTensors {
    fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>));
    fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, f64>));
}

pub fn collect<'a, P: ParamTensors + ?Sized>(p: &'a P) -> Vec<(String, ArrayViewD<'a, f64>)> {
    let mut out = Vec::new();
    p.for_each("", &mut |name, view| out.push((name, view)));
    out
}

pub fn collect_mut<'a, P: ParamTensors + ?Sized>(p: &'a mut P) -> Vec<(String, ArrayViewMutD<'a, f64>)> {
    let mut out = Vec::new();
    p.for_each_mut("", &mut |name, view| out.push((name, view)));
    out
}

pub fn zero_all<P: ParamTensors + ?Sized>(p: &mut P) {
    p.for_each_mut("", &mut |_, mut view| view.fill(0.0));
}

/// Clone a parameter struct with all tensors zeroed (gradient/optimizer
/// state buffers).
pub fn zeros_like<P: ParamTensors + Clone>(p: &P) -> P {
    let mut q = p.clone();
    zero_all(&mut q);
    q
}

pub fn param_count<P: ParamTensors + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.for_each("", &mut |_, view| n += view.len());
    n
}

/// Scale every tensor in place (used to average accumulated gradients).
pub fn scale_all<P: ParamTensors + ?Sized>(p: &mut P, factor: f64) {
    p.for_each_mut("", &mut |_, mut view| view.mapv_inplace(|v| v * factor));
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn relu2(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu2_backward(gy: &Array2<f64>, pre: &Array2<f64>) -> Array2<f64> {
    let mut g = gy.clone();
    Zip::from(&mut g).and(pre).for_each(|g, p| {
        if *p <= 0.0 {
            *g = 0.0;
        }
    });
    g
}

pub fn silu1(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu1_backward(gy: &Array1<f64>, pre: &Array1<f64>) -> Array1<f64> {
    let mut g = gy.clone();
    Zip::from(&mut g).and(pre).for_each(|g, p| {
        let s = sigmoid(*p);
        *g *= s * (1.0 + p * (1.0 - s));
    });
    g
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Gradient through a row-wise softmax given its output `alpha`.
pub fn softmax_rows_backward(alpha: &Array2<f64>, g_alpha: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(alpha.dim());
    for ((mut orow, arow), grow) in out.rows_mut().into_iter().zip(alpha.rows()).zip(g_alpha.rows()) {
        let dot = arow.iter().zip(grow.iter()).map(|(a, g)| a * g).sum::<f64>();
        Zip::from(&mut orow).and(&arow).and(&grow).for_each(|o, a, g| *o = a * (g - dot));
    }
    out
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

/// Dense layer `y = x . w + b` with `w: (fan_in, fan_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| std * rng.sample::<f64, _>(StandardNormal));
        Self { w, b: Array1::zeros(fan_out) }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { w: Array2::zeros((fan_in, fan_out)), b: Array1::zeros(fan_out) }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Returns the input gradient; accumulates parameter gradients into
    /// `grad` when given (skipped on Jacobian-only passes).
    pub fn backward(&self, x: &Array2<f64>, gy: &Array2<f64>, grad: Option<&mut Linear>) -> Array2<f64> {
        if let Some(g) = grad {
            g.w += &x.t().dot(gy);
            g.b += &gy.sum_axis(Axis(0));
        }
        gy.dot(&self.w.t())
    }
}

impl ParamTensors for Linear {
    fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        f(format!("{prefix}.w"), self.w.view().into_dyn());
        f(format!("{prefix}.b"), self.b.view().into_dyn());
    }
    fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, f64>)) {
        f(format!("{prefix}.w"), self.w.view_mut().into_dyn());
        f(format!("{prefix}.b"), self.b.view_mut().into_dyn());
    }
}

// ---------------------------------------------------------------------------
// bidirectional diagonal linear recurrence
// ---------------------------------------------------------------------------

/// Bidirectional diagonal linear recurrence over the sequence axis:
/// a forward scan `h_t = a (.) h_{t-1} + x_t . w_f` and a mirrored
/// backward scan, summed. Per-channel decays `a = sigmoid(lam)` stay in
/// `(0, 1)`. No positional encoding; time reversal maps one scan onto the
/// other when the two parameter sets are tied.
#[derive(Debug, Clone, PartialEq)]
pub struct BiScan {
    pub w_f: Array2<f64>,
    pub w_b: Array2<f64>,
    pub lam_f: Array1<f64>,
    pub lam_b: Array1<f64>,
}

pub struct BiScanCache {
    x: Array3<f64>,
    hf: Array3<f64>,
    hb: Array3<f64>,
}

impl BiScan {
    pub fn init(rng: &mut impl Rng, d: usize) -> Self {
        let std = (1.0 / d as f64).sqrt();
        let w_f = Array2::from_shape_fn((d, d), |_| std * rng.sample::<f64, _>(StandardNormal));
        let w_b = Array2::from_shape_fn((d, d), |_| std * rng.sample::<f64, _>(StandardNormal));
        let lam_f = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
        let lam_b = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
        Self { w_f, w_b, lam_f, lam_b }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            w_f: Array2::zeros((d, d)),
            w_b: Array2::zeros((d, d)),
            lam_f: Array1::zeros(d),
            lam_b: Array1::zeros(d),
        }
    }

    /// `x: (groups, T, d)`; each group is scanned independently.
    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, BiScanCache) {
        let (g_count, t_len, d) = x.dim();
        let flat = x.to_shape((g_count * t_len, d)).unwrap();
        let xw_f = flat.dot(&self.w_f).to_shape((g_count, t_len, d)).unwrap().to_owned();
        let xw_b = flat.dot(&self.w_b).to_shape((g_count, t_len, d)).unwrap().to_owned();
        let af = self.lam_f.mapv(sigmoid);
        let ab = self.lam_b.mapv(sigmoid);

        let mut hf = Array3::zeros((g_count, t_len, d));
        let mut hb = Array3::zeros((g_count, t_len, d));
        for g in 0..g_count {
            let mut h = Array1::<f64>::zeros(d);
            for t in 0..t_len {
                h = &h * &af + &xw_f.index_axis(Axis(0), g).index_axis(Axis(0), t);
                hf.index_axis_mut(Axis(0), g).index_axis_mut(Axis(0), t).assign(&h);
            }
            let mut h = Array1::<f64>::zeros(d);
            for t in (0..t_len).rev() {
                h = &h * &ab + &xw_b.index_axis(Axis(0), g).index_axis(Axis(0), t);
                hb.index_axis_mut(Axis(0), g).index_axis_mut(Axis(0), t).assign(&h);
            }
        }
        let y = &hf + &hb;
        (y, BiScanCache { x: x.clone(), hf, hb })
    }

    pub fn backward(&self, cache: &BiScanCache, gy: &Array3<f64>, grad: Option<&mut BiScan>) -> Array3<f64> {
        let (g_count, t_len, d) = cache.x.dim();
        let af = self.lam_f.mapv(sigmoid);
        let ab = self.lam_b.mapv(sigmoid);

        // Adjoint of the scans: r_t = gy_t + a (.) r_{t +- 1}.
        let mut g_xw_f = Array3::zeros((g_count, t_len, d));
        let mut g_xw_b = Array3::zeros((g_count, t_len, d));
        let mut g_af = Array1::<f64>::zeros(d);
        let mut g_ab = Array1::<f64>::zeros(d);
        for g in 0..g_count {
            let mut r = Array1::<f64>::zeros(d);
            for t in (0..t_len).rev() {
                r = &r * &af + &gy.index_axis(Axis(0), g).index_axis(Axis(0), t);
                g_xw_f.index_axis_mut(Axis(0), g).index_axis_mut(Axis(0), t).assign(&r);
                if t > 0 {
                    let hf_g = cache.hf.index_axis(Axis(0), g);
                    let h_prev = hf_g.index_axis(Axis(0), t - 1);
                    Zip::from(&mut g_af).and(&r).and(&h_prev).for_each(|ga, r, h| *ga += r * h);
                }
            }
            let mut r = Array1::<f64>::zeros(d);
            for t in 0..t_len {
                r = &r * &ab + &gy.index_axis(Axis(0), g).index_axis(Axis(0), t);
                g_xw_b.index_axis_mut(Axis(0), g).index_axis_mut(Axis(0), t).assign(&r);
                if t + 1 < t_len {
                    let hb_g = cache.hb.index_axis(Axis(0), g);
                    let h_next = hb_g.index_axis(Axis(0), t + 1);
                    Zip::from(&mut g_ab).and(&r).and(&h_next).for_each(|ga, r, h| *ga += r * h);
                }
            }
        }

        let flat_x = cache.x.to_shape((g_count * t_len, d)).unwrap();
        let flat_gf = g_xw_f.to_shape((g_count * t_len, d)).unwrap();
        let flat_gb = g_xw_b.to_shape((g_count * t_len, d)).unwrap();
        if let Some(g) = grad {
            g.w_f += &flat_x.t().dot(&flat_gf);
            g.w_b += &flat_x.t().dot(&flat_gb);
            Zip::from(&mut g.lam_f).and(&g_af).and(&af).for_each(|gl, ga, a| *gl += ga * a * (1.0 - a));
            Zip::from(&mut g.lam_b).and(&g_ab).and(&ab).for_each(|gl, ga, a| *gl += ga * a * (1.0 - a));
        }
        let gx = flat_gf.dot(&self.w_f.t()) + flat_gb.dot(&self.w_b.t());
        gx.to_shape((g_count, t_len, d)).unwrap().to_owned()
    }
}

impl ParamTensors for BiScan {
    fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        f(format!("{prefix}.w_f"), self.w_f.view().into_dyn());
        f(format!("{prefix}.w_b"), self.w_b.view().into_dyn());
        f(format!("{prefix}.lam_f"), self.lam_f.view().into_dyn());
        f(format!("{prefix}.lam_b"), self.lam_b.view().into_dyn());
    }
    fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, f64>)) {
        f(format!("{prefix}.w_f"), self.w_f.view_mut().into_dyn());
        f(format!("{prefix}.w_b"), self.w_b.view_mut().into_dyn());
        f(format!("{prefix}.lam_f"), self.lam_f.view_mut().into_dyn());
        f(format!("{prefix}.lam_b"), self.lam_b.view_mut().into_dyn());
    }
}

// ---------------------------------------------------------------------------
// single-head self-attention over a set axis
// ---------------------------------------------------------------------------

/// Single-head dot-product self-attention applied independently to each
/// group: `x (groups, M, d)` attends over the M elements of a group. No
/// positional encoding, so the layer is permutation-equivariant in M.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

pub struct AttnCache {
    x: Array3<f64>,
    q: Array3<f64>,
    k: Array3<f64>,
    v: Array3<f64>,
    alpha: Array3<f64>,
    att: Array3<f64>,
}

impl Attention {
    pub fn init(rng: &mut impl Rng, d: usize) -> Self {
        Self {
            wq: Linear::init(rng, d, d),
            wk: Linear::init(rng, d, d),
            wv: Linear::init(rng, d, d),
            wo: Linear::init(rng, d, d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self { wq: Linear::zeros(d, d), wk: Linear::zeros(d, d), wv: Linear::zeros(d, d), wo: Linear::zeros(d, d) }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, AttnCache) {
        let (g_count, m, d) = x.dim();
        let flat = x.to_shape((g_count * m, d)).unwrap().to_owned();
        let q = self.wq.forward(&flat).to_shape((g_count, m, d)).unwrap().to_owned();
        let k = self.wk.forward(&flat).to_shape((g_count, m, d)).unwrap().to_owned();
        let v = self.wv.forward(&flat).to_shape((g_count, m, d)).unwrap().to_owned();
        let scale = 1.0 / (d as f64).sqrt();

        let mut alpha = Array3::zeros((g_count, m, m));
        let mut att = Array3::zeros((g_count, m, d));
        for g in 0..g_count {
            let qg = q.index_axis(Axis(0), g);
            let kg = k.index_axis(Axis(0), g);
            let vg = v.index_axis(Axis(0), g);
            let scores = qg.dot(&kg.t()).mapv(|v| v * scale);
            let a = softmax_rows(&scores);
            att.index_axis_mut(Axis(0), g).assign(&a.dot(&vg));
            alpha.index_axis_mut(Axis(0), g).assign(&a);
        }
        let att_flat = att.to_shape((g_count * m, d)).unwrap().to_owned();
        let out = self.wo.forward(&att_flat).to_shape((g_count, m, d)).unwrap().to_owned();
        (out, AttnCache { x: x.clone(), q, k, v, alpha, att })
    }

    pub fn backward(&self, cache: &AttnCache, gy: &Array3<f64>, mut grad: Option<&mut Attention>) -> Array3<f64> {
        let (g_count, m, d) = cache.x.dim();
        let scale = 1.0 / (d as f64).sqrt();
        let gy_flat = gy.to_shape((g_count * m, d)).unwrap().to_owned();
        let att_flat = cache.att.to_shape((g_count * m, d)).unwrap().to_owned();
        let g_att = self
            .wo
            .backward(&att_flat, &gy_flat, grad.as_deref_mut().map(|g| &mut g.wo))
            .to_shape((g_count, m, d)).unwrap().to_owned();

        let mut g_q = Array3::zeros((g_count, m, d));
        let mut g_k = Array3::zeros((g_count, m, d));
        let mut g_v = Array3::zeros((g_count, m, d));
        for g in 0..g_count {
            let ga = g_att.index_axis(Axis(0), g);
            let vg = cache.v.index_axis(Axis(0), g);
            let ag = cache.alpha.index_axis(Axis(0), g);
            let g_alpha = ga.dot(&vg.t());
            g_v.index_axis_mut(Axis(0), g).assign(&ag.t().dot(&ga));
            let g_scores = softmax_rows_backward(&ag.to_owned(), &g_alpha);
            let qg = cache.q.index_axis(Axis(0), g);
            let kg = cache.k.index_axis(Axis(0), g);
            g_q.index_axis_mut(Axis(0), g).assign(&g_scores.dot(&kg).mapv(|v| v * scale));
            g_k.index_axis_mut(Axis(0), g).assign(&g_scores.t().dot(&qg).mapv(|v| v * scale));
        }

        let x_flat = cache.x.to_shape((g_count * m, d)).unwrap().to_owned();
        let gq_flat = g_q.to_shape((g_count * m, d)).unwrap().to_owned();
        let gk_flat = g_k.to_shape((g_count * m, d)).unwrap().to_owned();
        let gv_flat = g_v.to_shape((g_count * m, d)).unwrap().to_owned();
        let mut gx = self.wq.backward(&x_flat, &gq_flat, grad.as_deref_mut().map(|g| &mut g.wq));
        gx += &self.wk.backward(&x_flat, &gk_flat, grad.as_deref_mut().map(|g| &mut g.wk));
        gx += &self.wv.backward(&x_flat, &gv_flat, grad.as_deref_mut().map(|g| &mut g.wv));
        gx.to_shape((g_count, m, d)).unwrap().to_owned()
    }
}

impl ParamTensors for Attention {
    fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        self.wq.for_each(&format!("{prefix}.wq"), f);
        self.wk.for_each(&format!("{prefix}.wk"), f);
        self.wv.for_each(&format!("{prefix}.wv"), f);
        self.wo.for_each(&format!("{prefix}.wo"), f);
    }
    fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, f64>)) {
        self.wq.for_each_mut(&format!("{prefix}.wq"), f);
        self.wk.for_each_mut(&format!("{prefix}.wk"), f);
        self.wv.for_each_mut(&format!("{prefix}.wv"), f);
        self.wo.for_each_mut(&format!("{prefix}.wo"), f);
    }
}

// ---------------------------------------------------------------------------
// position-wise feed-forward
// ---------------------------------------------------------------------------

/// Two dense layers with a ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    pub lin1: Linear,
    pub lin2: Linear,
}

pub struct FfnCache {
    x: Array2<f64>,
    pre: Array2<f64>,
}

impl Ffn {
    pub fn init(rng: &mut impl Rng, d: usize, d_ff: usize) -> Self {
        Self { lin1: Linear::init(rng, d, d_ff), lin2: Linear::init(rng, d_ff, d) }
    }

    pub fn zeros(d: usize, d_ff: usize) -> Self {
        Self { lin1: Linear::zeros(d, d_ff), lin2: Linear::zeros(d_ff, d) }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, FfnCache) {
        let pre = self.lin1.forward(x);
        let y = self.lin2.forward(&relu2(&pre));
        (y, FfnCache { x: x.clone(), pre })
    }

    pub fn backward(&self, cache: &FfnCache, gy: &Array2<f64>, mut grad: Option<&mut Ffn>) -> Array2<f64> {
        let act = relu2(&cache.pre);
        let g_act = self.lin2.backward(&act, gy, grad.as_deref_mut().map(|g| &mut g.lin2));
        let g_pre = relu2_backward(&g_act, &cache.pre);
        self.lin1.backward(&cache.x, &g_pre, grad.as_deref_mut().map(|g| &mut g.lin1))
    }
}

impl ParamTensors for Ffn {
    fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        self.lin1.for_each(&format!("{prefix}.lin1"), f);
        self.lin2.for_each(&format!("{prefix}.lin2"), f);
    }
    fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'a, f64>)) {
        self.lin1.for_each_mut(&format!("{prefix}.lin1"), f);
        self.lin2.for_each_mut(&format!("{prefix}.lin2"), f);
    }
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// Adam with the standard constants. The moment buffers mirror the
/// parameter struct; tensor identity is checked by name.
pub struct Adam<P> {
    m: P,
    v: P,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<P: ParamTensors + Clone> Adam<P> {
    pub fn new(template: &P) -> Self {
        Self { m: zeros_like(template), v: zeros_like(template), t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
        let g_views = collect(grads);
        let p_views = collect_mut(params);
        let m_views = collect_mut(&mut self.m);
        let v_views = collect_mut(&mut self.v);
        assert_eq!(g_views.len(), p_views.len());
        for (((pn, mut p), (gn, g)), ((mn, mut m), (_, mut v))) in
            p_views.into_iter().zip(g_views).zip(m_views.into_iter().zip(v_views))
        {
            debug_assert_eq!(pn, gn);
            debug_assert_eq!(pn, mn);
            Zip::from(&mut p).and(&g).and(&mut m).and(&mut v).for_each(|p, g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}
