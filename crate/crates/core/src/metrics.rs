//! Evaluation metrics: displacement errors, likelihoods, calibration,
//! uncertainty summaries, rank correlation and the Top-k protocol.
//!
//! All displacement metrics reduce over unobserved states only
//! (`mask == 0`). Scene-level metrics (`SADE`/`SFDE`) pick the best mode
//! for the whole scene; agent-level metrics (`ADE`/`FDE`) pick the best
//! mode per agent and then average, so `minADE_K <= minSADE_K`.

use ndarray::{Array2, Array3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gaussian2d::{avg_ucty, inside_confidence, nll};
use crate::sampler::ModeSet;
use crate::scene::Scene;

fn dist(a: &Array3<f64>, b: &Array3<f64>, t: usize, n: usize) -> f64 {
    let dx = a[(t, n, 0)] - b[(t, n, 0)];
    let dy = a[(t, n, 1)] - b[(t, n, 1)];
    (dx * dx + dy * dy).sqrt()
}

/// Scene average displacement error: mean Euclidean displacement over
/// unobserved states.
pub fn sade(pred_means: &Array3<f64>, gt: &Scene, mask: &Array2<u8>) -> Result<f64> {
    let (t, n) = gt.dims();
    if pred_means.dim() != (t, n, 2) {
        return Err(Error::Shape(format!("prediction {:?} vs scene ({t}, {n}, 2)", pred_means.dim())));
    }
    if mask.dim() != (t, n) {
        return Err(Error::Shape(format!("mask {:?} vs scene ({t}, {n})", mask.dim())));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for ti in 0..t {
        for ni in 0..n {
            if mask[(ti, ni)] == 0 {
                acc += dist(pred_means, &gt.coords, ti, ni);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::UndefinedInput("SADE over a mask with no unobserved states".into()));
    }
    Ok(acc / count as f64)
}

/// Scene final displacement error: per agent, the displacement at that
/// agent's last unobserved frame, averaged over agents with unobserved
/// frames.
pub fn sfde(pred_means: &Array3<f64>, gt: &Scene, mask: &Array2<u8>) -> Result<f64> {
    let (t, n) = gt.dims();
    let mut acc = 0.0;
    let mut count = 0usize;
    for ni in 0..n {
        if let Some(tf) = (0..t).rev().find(|&ti| mask[(ti, ni)] == 0) {
            acc += dist(pred_means, &gt.coords, tf, ni);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedInput("SFDE over a mask with no unobserved states".into()));
    }
    Ok(acc / count as f64)
}

/// `(minSADE_K, minSFDE_K)`: min over the first `k` modes of the
/// scene-level metrics.
pub fn min_scene_metrics(modes: &ModeSet, gt: &Scene, mask: &Array2<u8>, k: usize) -> Result<(f64, f64)> {
    let k = k.min(modes.modes.len());
    if k == 0 {
        return Err(Error::UndefinedInput("no modes".into()));
    }
    let mut best_sade = f64::INFINITY;
    let mut best_sfde = f64::INFINITY;
    for mode in modes.modes.iter().take(k) {
        best_sade = best_sade.min(sade(&mode.means, gt, mask)?);
        best_sfde = best_sfde.min(sfde(&mode.means, gt, mask)?);
    }
    Ok((best_sade, best_sfde))
}

/// `(minADE_K, minFDE_K)`: the best mode is selected per agent. ADE
/// accumulates each agent's best summed displacement and normalizes by
/// the total number of unobserved states, so agents weigh by how much of
/// them is hidden and `minADE_K <= minSADE_K` holds for every mode set.
/// FDE takes each agent's best final-frame displacement, averaged over
/// agents.
pub fn min_agent_metrics(modes: &ModeSet, gt: &Scene, mask: &Array2<u8>, k: usize) -> Result<(f64, f64)> {
    let k = k.min(modes.modes.len());
    if k == 0 {
        return Err(Error::UndefinedInput("no modes".into()));
    }
    let (t, n) = gt.dims();
    let mut ade_sum = 0.0;
    let mut fde_acc = 0.0;
    let mut agents = 0usize;
    let mut states = 0usize;
    for ni in 0..n {
        let frames: Vec<usize> = (0..t).filter(|&ti| mask[(ti, ni)] == 0).collect();
        if frames.is_empty() {
            continue;
        }
        let t_final = *frames.last().unwrap();
        let mut best_sum = f64::INFINITY;
        let mut best_fde = f64::INFINITY;
        for mode in modes.modes.iter().take(k) {
            let sum: f64 = frames.iter().map(|&ti| dist(&mode.means, &gt.coords, ti, ni)).sum();
            best_sum = best_sum.min(sum);
            best_fde = best_fde.min(dist(&mode.means, &gt.coords, t_final, ni));
        }
        ade_sum += best_sum;
        fde_acc += best_fde;
        agents += 1;
        states += frames.len();
    }
    if agents == 0 {
        return Err(Error::UndefinedInput("no agent has unobserved states".into()));
    }
    Ok((ade_sum / states as f64, fde_acc / agents as f64))
}

/// Percentage of ground-truth states inside the per-state confidence
/// ellipse, per mode. Returns `(mean over modes, min over modes)`.
pub fn acc_rate(modes: &ModeSet, gt: &Scene, mask: &Array2<u8>, level: f64) -> Result<(f64, f64)> {
    let (t, n) = gt.dims();
    if modes.modes.is_empty() {
        return Err(Error::UndefinedInput("no modes".into()));
    }
    let mut per_mode = Vec::with_capacity(modes.modes.len());
    for (k, mode) in modes.modes.iter().enumerate() {
        let mut inside = 0usize;
        let mut count = 0usize;
        for ti in 0..t {
            for ni in 0..n {
                if mask[(ti, ni)] == 0 {
                    let g = mode
                        .gauss(ti, ni)
                        .map_err(|e| Error::Numeric(format!("mode {k}: {e}")))?;
                    if inside_confidence(&g, [gt.coords[(ti, ni, 0)], gt.coords[(ti, ni, 1)]], level)? {
                        inside += 1;
                    }
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::UndefinedInput("AccRate over a mask with no unobserved states".into()));
        }
        per_mode.push(100.0 * inside as f64 / count as f64);
    }
    let mean = per_mode.iter().sum::<f64>() / per_mode.len() as f64;
    let min = per_mode.iter().fold(f64::INFINITY, |a, b| a.min(*b));
    Ok((mean, min))
}

/// Mean per-state NLL of the ground truth under each mode's per-state
/// Gaussians, over unobserved states. Returns `(mean over modes, min over
/// modes)`.
pub fn nll_metric(modes: &ModeSet, gt: &Scene, mask: &Array2<u8>) -> Result<(f64, f64)> {
    let (t, n) = gt.dims();
    if modes.modes.is_empty() {
        return Err(Error::UndefinedInput("no modes".into()));
    }
    let mut per_mode = Vec::with_capacity(modes.modes.len());
    for (k, mode) in modes.modes.iter().enumerate() {
        let mut acc = 0.0;
        let mut count = 0usize;
        for ti in 0..t {
            for ni in 0..n {
                if mask[(ti, ni)] == 0 {
                    let g = mode
                        .gauss(ti, ni)
                        .map_err(|e| Error::Numeric(format!("mode {k}: {e}")))?;
                    acc += nll(&g, [gt.coords[(ti, ni, 0)], gt.coords[(ti, ni, 1)]])
                        .map_err(|e| Error::Numeric(format!("mode {k}, state (t={ti}, n={ni}): {e}")))?;
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::UndefinedInput("NLL over a mask with no unobserved states".into()));
        }
        per_mode.push(acc / count as f64);
    }
    let mean = per_mode.iter().sum::<f64>() / per_mode.len() as f64;
    let min = per_mode.iter().fold(f64::INFINITY, |a, b| a.min(*b));
    Ok((mean, min))
}

/// Average ranks with ties averaged.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // Tied block [i, j]: average of 1-based ranks.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Hard Spearman correlation: Pearson correlation of tie-averaged ranks.
/// Zero-variance inputs yield 0.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("rank vectors {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::Param("Spearman needs at least two values".into()));
    }
    Ok(pearson(&average_ranks(xs), &average_ranks(ys)))
}

/// Top-k protocol: rank modes by ascending score (best candidates first),
/// keep the top `k`, and report `minSADE` over the kept subset for every
/// requested `k`.
pub fn topk_protocol(
    modes: &ModeSet,
    scores: &[f64],
    gt: &Scene,
    mask: &Array2<u8>,
    ks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let n_modes = modes.modes.len();
    if scores.len() != n_modes {
        return Err(Error::Shape(format!("{} scores vs {} modes", scores.len(), n_modes)));
    }
    let mut order: Vec<usize> = (0..n_modes).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    let sades: Vec<f64> = modes.modes.iter().map(|m| sade(&m.means, gt, mask)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(ks.len());
    for &k in ks {
        let k_eff = k.min(n_modes).max(1);
        let best = order[..k_eff].iter().map(|&i| sades[i]).fold(f64::INFINITY, f64::min);
        out.push((k, best));
    }
    Ok(out)
}

/// Per-scene evaluation row.
#[derive(Debug, Clone, Serialize)]
pub struct SceneReport {
    pub scene_id: String,
    pub min_ade: f64,
    pub min_fde: f64,
    pub min_sade: f64,
    pub min_sfde: f64,
    pub nll_mean: f64,
    pub nll_min: f64,
    pub acc_rate_mean: f64,
    pub acc_rate_min: f64,
    pub avg_ucty_mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spearman_avg_ucty: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spearman_e: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TopkRow {
    pub k: usize,
    pub min_sade: f64,
}

/// Aggregate evaluation report.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n_scenes: usize,
    pub k: usize,
    pub level: f64,
    pub aggregate: SceneReport,
    pub topk_by_e: Option<Vec<TopkRow>>,
    pub topk_by_avg_ucty: Option<Vec<TopkRow>>,
    pub scenes: Vec<SceneReport>,
}

/// Evaluate one scene's mode set against ground truth.
pub fn evaluate_scene(modes: &ModeSet, gt: &Scene, mask: &Array2<u8>, level: f64) -> Result<SceneReport> {
    let k = modes.modes.len();
    let (min_sade, min_sfde) = min_scene_metrics(modes, gt, mask, k)?;
    let (min_ade, min_fde) = min_agent_metrics(modes, gt, mask, k)?;
    let (nll_mean, nll_min) = nll_metric(modes, gt, mask)?;
    let (acc_mean, acc_min) = acc_rate(modes, gt, mask, level)?;
    let uctys: Vec<f64> = modes.modes.iter().map(|m| avg_ucty(m, mask)).collect::<Result<_>>()?;
    let sades: Vec<f64> = modes.modes.iter().map(|m| sade(&m.means, gt, mask)).collect::<Result<_>>()?;
    let avg_ucty_mean = uctys.iter().sum::<f64>() / uctys.len() as f64;
    let spearman_avg_ucty = if k >= 2 { Some(spearman(&uctys, &sades)?) } else { None };
    let spearman_e = match (&modes.e, k >= 2) {
        (Some(e), true) => Some(spearman(e, &sades)?),
        _ => None,
    };
    Ok(SceneReport {
        scene_id: modes.scene_id.clone(),
        min_ade,
        min_fde,
        min_sade,
        min_sfde,
        nll_mean,
        nll_min,
        acc_rate_mean: acc_mean,
        acc_rate_min: acc_min,
        avg_ucty_mean,
        spearman_avg_ucty,
        spearman_e,
    })
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = values.flatten().collect();
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Aggregate per-scene rows (uniform scene weights) plus two Top-k tables
/// when rank scores are available.
pub fn evaluate(
    sets: &[ModeSet],
    gts: &[(&Scene, &Array2<u8>)],
    level: f64,
    ks: &[usize],
) -> Result<EvalReport> {
    if sets.len() != gts.len() || sets.is_empty() {
        return Err(Error::Param(format!("{} mode sets vs {} scenes", sets.len(), gts.len())));
    }
    let mut scenes = Vec::with_capacity(sets.len());
    let mut topk_e: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut topk_u: Vec<Vec<(usize, f64)>> = Vec::new();
    for (set, (gt, mask)) in sets.iter().zip(gts.iter()) {
        scenes.push(evaluate_scene(set, gt, mask, level)?);
        if set.modes.len() >= 2 {
            let uctys: Vec<f64> = set.modes.iter().map(|m| avg_ucty(m, mask)).collect::<Result<_>>()?;
            topk_u.push(topk_protocol(set, &uctys, gt, mask, ks)?);
            if let Some(e) = &set.e {
                topk_e.push(topk_protocol(set, e, gt, mask, ks)?);
            }
        }
    }
    let agg = |f: &dyn Fn(&SceneReport) -> f64| scenes.iter().map(f).sum::<f64>() / scenes.len() as f64;
    let aggregate = SceneReport {
        scene_id: "__aggregate__".into(),
        min_ade: agg(&|s| s.min_ade),
        min_fde: agg(&|s| s.min_fde),
        min_sade: agg(&|s| s.min_sade),
        min_sfde: agg(&|s| s.min_sfde),
        nll_mean: agg(&|s| s.nll_mean),
        nll_min: agg(&|s| s.nll_min),
        acc_rate_mean: agg(&|s| s.acc_rate_mean),
        acc_rate_min: agg(&|s| s.acc_rate_min),
        avg_ucty_mean: agg(&|s| s.avg_ucty_mean),
        spearman_avg_ucty: mean_opt(scenes.iter().map(|s| s.spearman_avg_ucty)),
        spearman_e: mean_opt(scenes.iter().map(|s| s.spearman_e)),
    };
    let fold_topk = |tables: &[Vec<(usize, f64)>]| -> Option<Vec<TopkRow>> {
        if tables.is_empty() {
            return None;
        }
        Some(
            (0..tables[0].len())
                .map(|i| TopkRow {
                    k: tables[0][i].0,
                    min_sade: tables.iter().map(|t| t[i].1).sum::<f64>() / tables.len() as f64,
                })
                .collect(),
        )
    };
    Ok(EvalReport {
        n_scenes: sets.len(),
        k: sets.iter().map(|s| s.modes.len()).max().unwrap_or(0),
        level,
        aggregate,
        topk_by_e: fold_topk(&topk_e),
        topk_by_avg_ucty: fold_topk(&topk_u),
        scenes,
    })
}

/// Flat CSV rendering of a report: one row per scene plus the aggregate.
pub fn report_to_csv(report: &EvalReport) -> String {
    let mut out = String::from(
        "scene_id,min_ade,min_fde,min_sade,min_sfde,nll_mean,nll_min,acc_rate_mean,acc_rate_min,avg_ucty_mean,spearman_avg_ucty,spearman_e\n",
    );
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for row in report.scenes.iter().chain(std::iter::once(&report.aggregate)) {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.scene_id,
            row.min_ade,
            row.min_fde,
            row.min_sade,
            row.min_sfde,
            row.nll_mean,
            row.nll_min,
            row.acc_rate_mean,
            row.acc_rate_min,
            row.avg_ucty_mean,
            fmt_opt(row.spearman_avg_ucty),
            fmt_opt(row.spearman_e),
        ));
    }
    out
}
