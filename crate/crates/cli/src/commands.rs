//! Command implementations. Kept in the library so integration tests can
//! drive the pipeline in-process.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use hetdiff::checkpoint;
use hetdiff::config::RunConfig;
use hetdiff::denoiser::net::{NetConfig, SocialTemporalNet};
use hetdiff::denoiser::Denoiser;
use hetdiff::error::{Error, Result};
use hetdiff::metrics::{evaluate, report_to_csv, spearman};
use hetdiff::ranker::{
    build_rank_scenes, rank_by_avg_ucty, train_ranker, RankInput, RankNet, RankerConfig,
};
use hetdiff::rng::{subseed, substream};
use hetdiff::sampler::{sample, save_modes, timing_probe, ModeSet, SamplerConfig, Variant};
use hetdiff::scene::{generate_synthetic_scenes, load_scenes, save_scenes, split_condition, Scene};
use hetdiff::training::{build_examples, train, TrainExample};

pub fn load_config(path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(out) = out {
        cfg.paths.out_dir = out.to_string_lossy().into_owned();
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    Ok(())
}

fn scenes_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_path("scenes.jsonl")
}

fn read_scenes(cfg: &RunConfig, explicit: Option<&Path>) -> Result<Vec<Scene>> {
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| scenes_path(cfg));
    if !path.exists() {
        return Err(Error::Param(format!(
            "scene file {} not found; run `hetdiff gen-data` first or pass --scenes",
            path.display()
        )));
    }
    load_scenes(&path)
}

/// Rebuild the per-scene masks exactly as training and sampling see them.
fn masked_examples(cfg: &RunConfig, scenes: Vec<Scene>) -> Result<Vec<TrainExample>> {
    let mask_seed = subseed(cfg.seed, "mask").wrapping_add(cfg.data.mask_seed_offset);
    build_examples(scenes, &cfg.data.mask, mask_seed)
}

fn load_denoiser(cfg: &RunConfig, explicit: Option<&Path>) -> Result<SocialTemporalNet> {
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_path("checkpoint.ckpt"));
    if !path.exists() {
        return Err(Error::Param(format!(
            "checkpoint {} not found; run `hetdiff train` first or pass --checkpoint",
            path.display()
        )));
    }
    // Architecture comes from the stored config; initialize a matching
    // skeleton and fill it.
    let probe = std::fs::File::open(&path)?;
    drop(probe);
    let mut skeleton_cfg = cfg.net.clone();
    // Read the stored config first by loading into a throwaway header pass.
    let stored = peek_checkpoint_config(&path)?;
    if let Ok(parsed) = serde_json::from_value::<NetConfig>(stored.clone()) {
        skeleton_cfg = parsed;
    }
    let mut model = SocialTemporalNet::init(&skeleton_cfg, &mut substream(0, "skeleton"))?;
    checkpoint::load(&mut model, "denoiser_net", &path)?;
    Ok(model)
}

fn peek_checkpoint_config(path: &Path) -> Result<serde_json::Value> {
    use std::io::Read;
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    let mut len = [0u8; 8];
    f.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    f.read_exact(&mut header)?;
    let v: serde_json::Value =
        serde_json::from_slice(&header).map_err(|e| Error::Parse { line: 0, msg: format!("checkpoint header: {e}") })?;
    Ok(v.get("config").cloned().unwrap_or(serde_json::Value::Null))
}

/// Sampler configuration for one scene: the per-scene seed derives from
/// the root through the `sample` stage and the scene index, so adding
/// scenes never perturbs earlier ones.
fn scene_sampler_cfg(cfg: &RunConfig, scene_index: usize) -> Result<SamplerConfig> {
    Ok(SamplerConfig {
        variant: cfg.sampler.variant,
        plan: cfg.build_plan()?,
        k: cfg.sampler.k,
        seed: subseed(cfg.stage_seed("sample"), &format!("scene-{scene_index}")),
        sv_clamp: cfg.sampler.sv_clamp,
        condition_replace: cfg.sampler.condition_replace,
    })
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let scenes = match &cfg.data.file {
        Some(file) => load_scenes(Path::new(file))?,
        None => generate_synthetic_scenes(
            cfg.data.n_scenes,
            cfg.data.t,
            cfg.data.n_agents,
            &cfg.data.dynamics,
            cfg.stage_seed("data"),
        )?,
    };
    // Validate mask feasibility on the actual shapes before persisting.
    let n = scenes.len();
    masked_examples(cfg, scenes.clone())?;
    save_scenes(&scenes, &scenes_path(cfg))?;
    println!("wrote {n} scenes to {}", scenes_path(cfg).display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let scenes = read_scenes(cfg, None)?;
    let examples = masked_examples(cfg, scenes)?;
    let sched = cfg.build_schedule()?;
    let mut model = SocialTemporalNet::init(&cfg.net, &mut substream(cfg.stage_seed("net-init"), "init"))?;
    let mut tc = cfg.train.clone();
    tc.seed = cfg.stage_seed("train").wrapping_add(cfg.train.seed);
    let log = train(&mut model, &examples, &sched, &tc)?;

    let ckpt = cfg.out_path("checkpoint.ckpt");
    checkpoint::save(&model, "denoiser_net", &cfg.net, &ckpt)?;

    // Timestamp sidecar: the wall_ms column is the one artifact allowed to
    // differ between reruns.
    let mut csv = String::from("epoch,lr,l_simple,l_nll,l_total,wall_ms\n");
    for r in &log {
        csv.push_str(&format!("{},{},{},{},{},{:.3}\n", r.epoch, r.lr, r.l_simple, r.l_nll, r.l_total, r.wall_ms));
    }
    std::fs::write(cfg.out_path("train_log.csv"), csv)?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!(
            "trained {} epochs: L_total {:.4} -> {:.4}; checkpoint at {}",
            log.len(),
            first.l_total,
            last.l_total,
            ckpt.display()
        );
    }
    Ok(())
}

fn sample_all(cfg: &RunConfig, model: &dyn Denoiser, examples: &[TrainExample]) -> Result<Vec<ModeSet>> {
    let sets: Result<Vec<ModeSet>> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let scfg = scene_sampler_cfg(cfg, i)?;
            let cond = split_condition(&ex.scene, &ex.mask)?;
            sample(model, &ex.scene.scene_id, &cond, &cfg.build_schedule()?, &scfg)
        })
        .collect();
    sets
}

pub fn cmd_sample(cfg: &RunConfig, ckpt: Option<&Path>) -> Result<()> {
    ensure_out_dir(cfg)?;
    let scenes = read_scenes(cfg, None)?;
    let examples = masked_examples(cfg, scenes)?;
    let model = load_denoiser(cfg, ckpt)?;
    let sets = sample_all(cfg, &model, &examples)?;
    let path = cfg.out_path("modes.jsonl");
    save_modes(&sets, &path)?;
    println!("wrote {} mode sets (k = {}) to {}", sets.len(), cfg.sampler.k, path.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, modes: Option<&Path>, scenes: Option<&Path>) -> Result<()> {
    ensure_out_dir(cfg)?;
    let scene_list = read_scenes(cfg, scenes)?;
    let examples = masked_examples(cfg, scene_list)?;
    let modes_path = modes.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_path("modes.jsonl"));
    let sets = hetdiff::sampler::load_modes(&modes_path)?;

    // Pair mode sets with scenes by id.
    let mut by_id: std::collections::BTreeMap<&str, &TrainExample> =
        examples.iter().map(|e| (e.scene.scene_id.as_str(), e)).collect();
    let mut pairs: Vec<(&Scene, &Array2<u8>)> = Vec::with_capacity(sets.len());
    for set in &sets {
        let ex = by_id.remove(set.scene_id.as_str()).ok_or_else(|| {
            Error::Param(format!("modes reference scene '{}' missing from the scene file", set.scene_id))
        })?;
        pairs.push((&ex.scene, &ex.mask));
    }
    let report = evaluate(&sets, &pairs, cfg.eval.level, &cfg.eval.ks)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Numeric(format!("report: {e}")))?;
    std::fs::write(cfg.out_path("report.json"), format!("{json}\n"))?;
    std::fs::write(cfg.out_path("report.csv"), report_to_csv(&report))?;
    println!(
        "evaluated {} scenes: minSADE_{} = {:.4}, NLL = {:.4}, AccRate = {:.1}%",
        report.n_scenes, report.k, report.aggregate.min_sade, report.aggregate.nll_mean, report.aggregate.acc_rate_mean
    );
    Ok(())
}

#[derive(Serialize)]
struct SpearmanSummary {
    n_scenes: usize,
    k: usize,
    ranknn_mean_rho: f64,
    ranknn_median_rho: f64,
    avg_ucty_mean_rho: f64,
    avg_ucty_median_rho: f64,
    holdout_log: Vec<hetdiff::ranker::RankerEpoch>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn cmd_rank(cfg: &RunConfig, ckpt: Option<&Path>, ranker_ckpt: Option<&Path>) -> Result<()> {
    ensure_out_dir(cfg)?;
    let scenes = read_scenes(cfg, None)?;
    let examples = masked_examples(cfg, scenes)?;
    let model = load_denoiser(cfg, ckpt)?;
    let sched = cfg.build_schedule()?;

    let template = SamplerConfig {
        variant: cfg.sampler.variant,
        plan: cfg.build_plan()?,
        k: cfg.ranker_train.k,
        seed: 0,
        sv_clamp: cfg.sampler.sv_clamp,
        condition_replace: cfg.sampler.condition_replace,
    };

    let (net, log) = match ranker_ckpt {
        Some(path) => {
            let stored = peek_checkpoint_config(path)?;
            let rcfg: RankerConfig = serde_json::from_value(stored)
                .map_err(|e| Error::Parse { line: 0, msg: format!("ranker checkpoint config: {e}") })?;
            let mut net = RankNet::init(&rcfg, &mut substream(0, "skeleton"));
            checkpoint::load(&mut net, "ranker", path)?;
            (net, Vec::new())
        }
        None => {
            let rank_scenes =
                build_rank_scenes(&model, &template, &examples, cfg.ranker_train.k, cfg.stage_seed("ranker"), &sched)?;
            let mut rtc = cfg.ranker_train.clone();
            rtc.seed = cfg.stage_seed("ranker").wrapping_add(cfg.ranker_train.seed);
            let (net, log) = train_ranker(&rank_scenes, &cfg.ranker, &rtc)?;
            checkpoint::save(&net, "ranker", &cfg.ranker, &cfg.out_path("ranker.ckpt"))?;
            (net, log)
        }
    };

    // Annotate fresh modes (the same draws cmd_sample would produce) with
    // error probabilities and summarize correlations against SADE.
    let mut sets = sample_all(cfg, &model, &examples)?;
    let mut rho_e = Vec::new();
    let mut rho_u = Vec::new();
    for (set, ex) in sets.iter_mut().zip(examples.iter()) {
        let input = RankInput::from_modes(set, &ex.mask)?;
        let (e, _) = net.forward(&input)?;
        if set.modes.len() >= 2 {
            let sades: Vec<f64> = set
                .modes
                .iter()
                .map(|m| hetdiff::metrics::sade(&m.means, &ex.scene, &ex.mask))
                .collect::<Result<_>>()?;
            rho_e.push(spearman(&e, &sades)?);
            rho_u.push(spearman(&rank_by_avg_ucty(set, &ex.mask)?, &sades)?);
        }
        set.e = Some(e);
    }
    let path = cfg.out_path("modes_ranked.jsonl");
    save_modes(&sets, &path)?;
    let summary = SpearmanSummary {
        n_scenes: sets.len(),
        k: cfg.sampler.k,
        ranknn_mean_rho: rho_e.iter().sum::<f64>() / rho_e.len().max(1) as f64,
        ranknn_median_rho: median(rho_e.clone()),
        avg_ucty_mean_rho: rho_u.iter().sum::<f64>() / rho_u.len().max(1) as f64,
        avg_ucty_median_rho: median(rho_u.clone()),
        holdout_log: log,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Numeric(format!("summary: {e}")))?;
    std::fs::write(cfg.out_path("spearman_summary.json"), format!("{json}\n"))?;
    println!(
        "ranked {} scenes: mean rho(e, SADE) = {:.3} vs AvgUcty {:.3}; wrote {}",
        summary.n_scenes,
        summary.ranknn_mean_rho,
        summary.avg_ucty_mean_rho,
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    variant: String,
    ms_per_mode: f64,
    ratio_vs_first: f64,
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let scenes = read_scenes(cfg, None)?;
    let examples = masked_examples(cfg, scenes)?;
    let ex = examples.first().ok_or_else(|| Error::UndefinedInput("bench needs at least one scene".into()))?;
    let model = load_denoiser(cfg, None)?;
    let sched = cfg.build_schedule()?;
    let plan = cfg.build_plan()?;
    let cond = split_condition(&ex.scene, &ex.mask)?;
    let variants = [Variant::U2Diff, Variant::U2Diffine, Variant::FullJacobian];
    let timings = timing_probe(&model, &cond, &sched, &plan, &variants, cfg.sampler.k.min(8).max(1), 21)?;
    let base = timings[0].1;
    let rows: Vec<BenchRow> = timings
        .iter()
        .map(|(v, ms)| BenchRow { variant: v.to_string(), ms_per_mode: *ms, ratio_vs_first: ms / base })
        .collect();
    println!("variant          ms/mode   ratio");
    for r in &rows {
        println!("{:-14}  {:8.3}  x{:.2}", r.variant, r.ms_per_mode, r.ratio_vs_first);
    }
    let json = serde_json::to_string_pretty(&rows).map_err(|e| Error::Numeric(format!("bench: {e}")))?;
    std::fs::write(cfg.out_path("bench.json"), format!("{json}\n"))?;
    Ok(())
}
