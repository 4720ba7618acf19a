//! Scene data model, masking strategies, synthetic data generation and
//! JSONL persistence.
//!
//! Coordinates are normalized to `[-1, 1]` per axis. A mask entry of 1
//! marks an observed state; metrics and losses reduce over the unobserved
//! complement.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::rng::substream_indexed;

/// Ball agents get role label 1, players role 0.
pub const ROLE_PLAYER: u8 = 0;
pub const ROLE_BALL: u8 = 1;

/// A fully observed scene: `T x N x 2` coordinates plus the observation
/// mask and per-agent role labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    /// `(T, N, 2)`, normalized to `[-1, 1]`.
    pub coords: Array3<f64>,
    /// `(T, N)`, entries in `{0, 1}`; 1 = observed.
    pub mask: Array2<u8>,
    /// `N` role labels; `None` means all players.
    pub agent_roles: Option<Vec<u8>>,
}

impl Scene {
    pub fn dims(&self) -> (usize, usize) {
        let (t, n, _) = self.coords.dim();
        (t, n)
    }

    pub fn roles(&self) -> Vec<u8> {
        let (_, n) = self.dims();
        self.agent_roles.clone().unwrap_or_else(|| vec![ROLE_PLAYER; n])
    }

    pub fn validate(&self) -> Result<()> {
        let (t, n, d) = self.coords.dim();
        if t < 2 || n < 1 || d != 2 {
            return Err(Error::Shape(format!("scene coords must be (T>=2, N>=1, 2), got ({t}, {n}, {d})")));
        }
        if self.mask.dim() != (t, n) {
            return Err(Error::Shape(format!("mask {:?} vs coords ({t}, {n})", self.mask.dim())));
        }
        if self.coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("scene {}: non-finite coordinates", self.scene_id)));
        }
        if self.mask.iter().any(|m| *m > 1) {
            return Err(Error::Param(format!("scene {}: mask entries must be 0 or 1", self.scene_id)));
        }
        if let Some(r) = &self.agent_roles {
            if r.len() != n {
                return Err(Error::Shape(format!("roles length {} vs N = {n}", r.len())));
            }
        }
        Ok(())
    }
}

/// Partial observations: `observed[t][n] = coords[t][n] * mask[t][n]`,
/// zeros at unobserved entries, plus the conditioning metadata the
/// denoiser consumes (mask and agent roles).
#[derive(Debug, Clone, PartialEq)]
pub struct CondScene {
    pub observed: Array3<f64>,
    pub mask: Array2<u8>,
    pub roles: Vec<u8>,
}

/// Zero out unobserved entries of a coordinate tensor.
pub fn split_condition(scene: &Scene, mask: &Array2<u8>) -> Result<CondScene> {
    let (t, n) = scene.dims();
    if mask.dim() != (t, n) {
        return Err(Error::Shape(format!("mask {:?} vs coords ({t}, {n})", mask.dim())));
    }
    let mut observed = scene.coords.clone();
    for ti in 0..t {
        for ni in 0..n {
            if mask[(ti, ni)] == 0 {
                observed[(ti, ni, 0)] = 0.0;
                observed[(ti, ni, 1)] = 0.0;
            }
        }
    }
    Ok(CondScene { observed, mask: mask.clone(), roles: scene.roles() })
}

/// Masking strategies for trajectory completion.
#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSpec {
    /// Observe the first `t_obs` frames of every agent, hide the rest.
    Forecast { t_obs: usize },
    /// Hide `n_gaps` random in-between windows of `gap_len` frames per
    /// agent; the first and last frames stay observed.
    Gaps { n_gaps: usize, gap_len: usize },
    /// Hide `hidden` entire agents.
    AgentDropout { hidden: usize },
    /// Load a fixed mask from a JSON file (`[[0|1, ...], ...]`).
    File { path: String },
}

/// Generate a binary mask for a `T x N` scene. Deterministic given
/// `(spec, t, n, seed)`.
pub fn make_mask(spec: &MaskSpec, t: usize, n: usize, seed: u64) -> Result<Array2<u8>> {
    if t < 2 || n < 1 {
        return Err(Error::Param(format!("mask needs T >= 2, N >= 1, got ({t}, {n})")));
    }
    let mask = match spec {
        MaskSpec::Forecast { t_obs } => {
            if *t_obs < 1 || *t_obs >= t {
                return Err(Error::Param(format!("forecast t_obs must be in [1, T), got {t_obs} for T = {t}")));
            }
            Array2::from_shape_fn((t, n), |(ti, _)| u8::from(ti < *t_obs))
        }
        MaskSpec::Gaps { n_gaps, gap_len } => {
            if *n_gaps == 0 || *gap_len == 0 {
                return Err(Error::Param("gaps spec needs n_gaps >= 1 and gap_len >= 1".into()));
            }
            if n_gaps * gap_len > t.saturating_sub(2) {
                return Err(Error::Param(format!(
                    "gaps spec infeasible: {n_gaps} gaps of {gap_len} frames do not fit in T - 2 = {}",
                    t.saturating_sub(2)
                )));
            }
            let mut rng = substream_indexed(seed, "mask-gaps", (t * 1024 + n) as u64);
            let mut mask = Array2::<u8>::ones((t, n));
            for ni in 0..n {
                let mut placed = 0usize;
                let mut guard = 0usize;
                let mut taken = vec![false; t];
                while placed < *n_gaps {
                    guard += 1;
                    if guard > 10_000 {
                        return Err(Error::Param("gaps spec infeasible: could not place non-overlapping gaps".into()));
                    }
                    let start = 1 + rng.gen_range(0..t - 1 - gap_len);
                    if taken[start..start + gap_len].iter().any(|x| *x) {
                        continue;
                    }
                    for f in start..start + gap_len {
                        taken[f] = true;
                        mask[(f, ni)] = 0;
                    }
                    placed += 1;
                }
            }
            mask
        }
        MaskSpec::AgentDropout { hidden } => {
            if *hidden == 0 {
                return Err(Error::Param("agent_dropout with 0 hidden agents leaves no unobserved state".into()));
            }
            if *hidden >= n {
                return Err(Error::Param(format!(
                    "agent_dropout of {hidden} agents leaves no observed state for N = {n}"
                )));
            }
            let mut rng = substream_indexed(seed, "mask-dropout", (t * 1024 + n) as u64);
            let mut idx: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                idx.swap(i, j);
            }
            let mut mask = Array2::<u8>::ones((t, n));
            for &ni in idx.iter().take(*hidden) {
                for ti in 0..t {
                    mask[(ti, ni)] = 0;
                }
            }
            mask
        }
        MaskSpec::File { path } => {
            let text = std::fs::read_to_string(path)?;
            let rows: Vec<Vec<u8>> = serde_json::from_str(&text)
                .map_err(|e| Error::Parse { line: 1, msg: format!("mask file {path}: {e}") })?;
            if rows.len() != t || rows.iter().any(|r| r.len() != n) {
                return Err(Error::Shape(format!("mask file {path} does not match (T, N) = ({t}, {n})")));
            }
            if rows.iter().flatten().any(|v| *v > 1) {
                return Err(Error::Param(format!("mask file {path}: entries must be 0 or 1")));
            }
            Array2::from_shape_fn((t, n), |(ti, ni)| rows[ti][ni])
        }
    };
    let observed = mask.iter().filter(|m| **m == 1).count();
    if observed == 0 || observed == t * n {
        return Err(Error::Param(format!(
            "mask must leave >= 1 observed and >= 1 unobserved state (observed = {observed} of {})",
            t * n
        )));
    }
    Ok(mask)
}

/// Parameters of the interacting-agents process used for synthetic scenes.
///
/// Players follow a damped spring toward a shared moving attractor with
/// pairwise soft repulsion and Gaussian process noise; one optional ball
/// agent follows a stiffer spring toward a randomly switching carrier.
#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsParams {
    pub spring: f64,
    pub damping: f64,
    /// Attractor drift rate toward its waypoint; 0 freezes the attractor.
    pub attractor_speed: f64,
    pub repulsion: f64,
    pub repulsion_radius: f64,
    pub noise: f64,
    pub ball_spring: f64,
    pub ball_damping: f64,
    pub carrier_switch_prob: f64,
    pub dt: f64,
    pub include_ball: bool,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        Self {
            spring: 4.0,
            damping: 2.5,
            attractor_speed: 1.2,
            repulsion: 0.08,
            repulsion_radius: 0.25,
            noise: 0.02,
            ball_spring: 9.0,
            ball_damping: 3.0,
            carrier_switch_prob: 0.06,
            dt: 0.1,
            include_ball: true,
        }
    }
}

/// Generate `n_scenes` synthetic scenes of `t` frames and `n` agents
/// (including the ball when `params.include_ball`). Scenes get independent
/// RNG substreams, so the output is deterministic per scene index.
pub fn generate_synthetic_scenes(
    n_scenes: usize,
    t: usize,
    n: usize,
    params: &DynamicsParams,
    seed: u64,
) -> Result<Vec<Scene>> {
    if t < 2 || n < 1 {
        return Err(Error::Param(format!("scene shape must be T >= 2, N >= 1, got ({t}, {n})")));
    }
    if params.include_ball && n < 2 {
        return Err(Error::Param("include_ball requires at least 2 agents".into()));
    }
    (0..n_scenes)
        .into_par_iter()
        .map(|i| Ok(generate_one(i, t, n, params, seed)))
        .collect()
}

fn generate_one(index: usize, t: usize, n: usize, params: &DynamicsParams, seed: u64) -> Scene {
    let mut rng = substream_indexed(seed, "scene", index as u64);
    let n_players = if params.include_ball { n - 1 } else { n };

    let mut pos: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)])
        .collect();
    let mut vel: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            [
                0.1 * rng.sample::<f64, _>(StandardNormal),
                0.1 * rng.sample::<f64, _>(StandardNormal),
            ]
        })
        .collect();
    let mut attractor = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
    let mut waypoint = [rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7)];
    let mut carrier = if n_players > 0 { rng.gen_range(0..n_players) } else { 0 };

    let mut coords = Array3::zeros((t, n, 2));
    for ti in 0..t {
        for ni in 0..n {
            coords[(ti, ni, 0)] = pos[ni][0];
            coords[(ti, ni, 1)] = pos[ni][1];
        }
        // Attractor drifts toward its waypoint; waypoints are resampled
        // occasionally. Draw order is fixed so parameter values never
        // change the stream layout.
        let resample: f64 = rng.gen();
        let (wx, wy) = (rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7));
        if resample < 0.05 {
            waypoint = [wx, wy];
        }
        attractor[0] += params.attractor_speed * params.dt * (waypoint[0] - attractor[0]);
        attractor[1] += params.attractor_speed * params.dt * (waypoint[1] - attractor[1]);

        let switch: f64 = rng.gen();
        let next_carrier = if n_players > 0 { rng.gen_range(0..n_players) } else { 0 };
        if switch < params.carrier_switch_prob {
            carrier = next_carrier;
        }

        let snapshot = pos.clone();
        for ni in 0..n {
            let is_ball = params.include_ball && ni == n - 1;
            let (target, k, c) = if is_ball {
                (snapshot[carrier], params.ball_spring, params.ball_damping)
            } else {
                (attractor, params.spring, params.damping)
            };
            let mut acc = [
                k * (target[0] - snapshot[ni][0]) - c * vel[ni][0],
                k * (target[1] - snapshot[ni][1]) - c * vel[ni][1],
            ];
            if !is_ball && params.repulsion > 0.0 {
                for mi in 0..n_players {
                    if mi == ni {
                        continue;
                    }
                    let dx = snapshot[ni][0] - snapshot[mi][0];
                    let dy = snapshot[ni][1] - snapshot[mi][1];
                    let dist = (dx * dx + dy * dy).sqrt().max(1e-6);
                    if dist < params.repulsion_radius {
                        let push = params.repulsion * (params.repulsion_radius - dist) / (params.repulsion_radius * dist);
                        acc[0] += push * dx / params.dt;
                        acc[1] += push * dy / params.dt;
                    }
                }
            }
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            acc[0] += params.noise * nx / params.dt;
            acc[1] += params.noise * ny / params.dt;
            vel[ni][0] += params.dt * acc[0];
            vel[ni][1] += params.dt * acc[1];
            pos[ni][0] = (pos[ni][0] + params.dt * vel[ni][0]).clamp(-1.0, 1.0);
            pos[ni][1] = (pos[ni][1] + params.dt * vel[ni][1]).clamp(-1.0, 1.0);
        }
    }

    let mut roles = vec![ROLE_PLAYER; n];
    if params.include_ball {
        roles[n - 1] = ROLE_BALL;
    }
    Scene {
        scene_id: format!("syn-{index:06}"),
        coords,
        mask: Array2::ones((t, n)),
        agent_roles: Some(roles),
    }
}

/// Format with 9 significant digits; the declared persistence precision.
pub fn fmt_sig9(x: f64) -> String {
    format!("{x:.8e}")
}

#[derive(Deserialize)]
struct SceneRecord {
    scene_id: String,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "N")]
    n: usize,
    coords: Vec<Vec<[f64; 2]>>,
    mask: Vec<Vec<u8>>,
    #[serde(default)]
    roles: Option<Vec<u8>>,
}

/// Serialize one scene as a JSONL line with fixed field order and
/// 9-significant-digit coordinates, so save/load/save is byte-stable.
fn scene_to_line(scene: &Scene) -> String {
    let (t, n) = scene.dims();
    let mut out = String::with_capacity(t * n * 32);
    write!(
        out,
        "{{\"scene_id\":{},\"T\":{t},\"N\":{n},\"coords\":[",
        serde_json::to_string(&scene.scene_id).unwrap()
    )
    .unwrap();
    for ti in 0..t {
        if ti > 0 {
            out.push(',');
        }
        out.push('[');
        for ni in 0..n {
            if ni > 0 {
                out.push(',');
            }
            write!(out, "[{},{}]", fmt_sig9(scene.coords[(ti, ni, 0)]), fmt_sig9(scene.coords[(ti, ni, 1)])).unwrap();
        }
        out.push(']');
    }
    out.push_str("],\"mask\":[");
    for ti in 0..t {
        if ti > 0 {
            out.push(',');
        }
        out.push('[');
        for ni in 0..n {
            if ni > 0 {
                out.push(',');
            }
            write!(out, "{}", scene.mask[(ti, ni)]).unwrap();
        }
        out.push(']');
    }
    out.push(']');
    if let Some(roles) = &scene.agent_roles {
        out.push_str(",\"roles\":[");
        for (i, r) in roles.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{r}").unwrap();
        }
        out.push(']');
    }
    out.push('}');
    out
}

/// Write scenes to a JSONL file, one scene per line.
pub fn save_scenes(scenes: &[Scene], path: &Path) -> Result<()> {
    let mut f = File::create(path)?;
    for scene in scenes {
        writeln!(f, "{}", scene_to_line(scene))?;
    }
    Ok(())
}

/// Load scenes from a JSONL file. Malformed records report their line
/// number. An empty file yields an empty list.
pub fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let f = File::open(path)?;
    let reader = BufReader::new(f);
    let mut scenes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        if rec.coords.len() != rec.t
            || rec.coords.iter().any(|row| row.len() != rec.n)
            || rec.mask.len() != rec.t
            || rec.mask.iter().any(|row| row.len() != rec.n)
        {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("coords/mask do not match declared T = {}, N = {}", rec.t, rec.n),
            });
        }
        let coords = Array3::from_shape_fn((rec.t, rec.n, 2), |(t, n, d)| rec.coords[t][n][d]);
        let mask = Array2::from_shape_fn((rec.t, rec.n), |(t, n)| rec.mask[t][n]);
        let scene = Scene { scene_id: rec.scene_id, coords, mask, agent_roles: rec.roles };
        scene.validate().map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        scenes.push(scene);
    }
    Ok(scenes)
}
