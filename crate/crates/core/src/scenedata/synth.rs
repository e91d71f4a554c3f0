//! Single-roundabout traffic simulator used as a license-free data source.
//!
//! Agents move along three kinds of path: a radial approach arm, the
//! counter-clockwise ring, and a radial exit. Longitudinal control is IDM.
//! An approaching agent inside the decision zone yields to every circulating
//! agent whose arrival time at the merge point differs from its own by less
//! than the accepted gap: it holds at the yield line, and once the circulating
//! agent is nearer the merge point than itself it follows that agent's
//! projection onto the arm. Each such (yielder, circulating) pair is labelled
//! as interacting at that frame. Circulating agents' desired speeds diffuse
//! and occasionally jump, and the yielder tracks them, so the two futures are
//! coupled.

use std::collections::HashSet;
use std::f64::consts::{PI, TAU};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tracks::{AgentClass, Track, TrackPoint};
use super::DT;
use crate::error::{Error, Result};

const CAR_LEN: f64 = 4.5;
const IDM_MIN_GAP: f64 = 2.0;
const IDM_HEADWAY: f64 = 1.2;
const IDM_ACCEL: f64 = 1.8;
const IDM_DECEL: f64 = 2.5;
const MAX_BRAKE: f64 = 8.0;
const YIELD_MARGIN: f64 = 3.0;
const DECISION_ZONE: f64 = 30.0;
const APPROACH_LEN: f64 = 32.0;
const EXIT_LEN: f64 = 25.0;
/// A circulating agent this close past the merge point still blocks it.
const BLOCKING_TAIL: f64 = 6.0;
/// How far past the merge point a circulating agent still acts as a
/// virtual leader for a yielding agent.
const FOLLOW_TAIL: f64 = 25.0;
/// Mean-reversion rate of the desired-speed diffusion, 1/s.
pub const SPEED_REVERSION: f64 = 0.5;
const MIN_DESIRED: f64 = 1.0;
const MAX_DESIRED: f64 = 11.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Agents per episode.
    pub n_agents: usize,
    pub ring_radius: f64,
    pub entry_arms: usize,
    pub gap_accept_s: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub episodes: usize,
    pub episode_frames: usize,
    /// Per-frame probability that a circulating agent picks a new desired speed.
    pub speed_change_prob: f64,
    /// Diffusion of a circulating agent's desired speed, m/s per √s. The
    /// desired speed reverts to its initial value with rate `SPEED_REVERSION`.
    pub speed_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_agents: 6,
            ring_radius: 15.0,
            entry_arms: 4,
            gap_accept_s: 3.0,
            noise_std: 0.05,
            seed: 7,
            episodes: 4,
            episode_frames: 150,
            speed_change_prob: 0.04,
            speed_noise: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(2..=25).contains(&self.n_agents) {
            return bad(format!("n_agents must be in [2, 25], got {}", self.n_agents));
        }
        if !(self.ring_radius > 0.0) {
            return bad("ring_radius must be > 0".into());
        }
        if self.entry_arms == 0 {
            return bad("entry_arms must be ≥ 1".into());
        }
        if !(self.gap_accept_s >= 0.0) || !(self.noise_std >= 0.0) {
            return bad("gap_accept_s and noise_std must be ≥ 0".into());
        }
        if self.episodes == 0 || self.episode_frames < 2 {
            return bad("need ≥ 1 episode of ≥ 2 frames".into());
        }
        if !(self.speed_noise >= 0.0) {
            return bad("speed_noise must be ≥ 0".into());
        }
        if !(0.0..=1.0).contains(&self.speed_change_prob) {
            return bad("speed_change_prob must be in [0, 1]".into());
        }
        Ok(())
    }

    /// Angle of arm `k` on the ring.
    pub fn arm_angle(&self, k: usize) -> f64 {
        TAU * k as f64 / self.entry_arms as f64
    }
}

/// `label = 1` when `agent_a` yields to `agent_b` at `frame`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InteractionLabel {
    pub frame: i64,
    pub agent_a: i64,
    pub agent_b: i64,
    pub label: u8,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StartPhase {
    Ring { angle: f64 },
    Approach { arm: usize, distance: f64 },
}

/// Initial condition of one simulated agent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentSpec {
    pub spawn_frame: usize,
    pub start: StartPhase,
    pub speed: f64,
    pub desired_speed: f64,
    /// Arc length in radians driven on the ring before exiting.
    pub exit_arc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Phase {
    Approach { arm: usize, dist: f64 },
    Ring { angle: f64, travelled: f64 },
    Exit { angle: f64, radius: f64 },
    Gone,
}

#[derive(Clone, Debug)]
struct Agent {
    id: i64,
    spec: AgentSpec,
    phase: Option<Phase>,
    speed: f64,
    desired: f64,
    points: Vec<TrackPoint>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthOutput {
    pub tracks: Vec<Track>,
    pub labels: Vec<InteractionLabel>,
}

fn idm(v: f64, v_des: f64, gap: Option<(f64, f64)>) -> f64 {
    let free = 1.0 - (v / v_des.max(0.1)).powi(4);
    let inter = match gap {
        Some((g, v_lead)) => {
            let dv = v - v_lead;
            let s_star =
                IDM_MIN_GAP + (v * IDM_HEADWAY + v * dv / (2.0 * (IDM_ACCEL * IDM_DECEL).sqrt())).max(0.0);
            (s_star / g.max(0.1)).powi(2)
        }
        None => 0.0,
    };
    (IDM_ACCEL * (free - inter)).clamp(-MAX_BRAKE, IDM_ACCEL)
}

/// Runs one episode from explicit agent specs. Track ids start at `first_id`
/// and frames at `frame_offset`.
pub fn simulate(
    cfg: &SynthConfig,
    specs: &[AgentSpec],
    n_frames: usize,
    first_id: i64,
    frame_offset: i64,
    rng: &mut ChaCha8Rng,
) -> SynthOutput {
    simulate_forked(cfg, specs, n_frames, first_id, frame_offset, rng, None)
}

/// [`simulate`], reseeding the generator at the start of local frame
/// `fork.0` with seed `fork.1`. Runs sharing a prefix diverge only after it,
/// which samples the future distribution of one history.
pub fn simulate_forked(
    cfg: &SynthConfig,
    specs: &[AgentSpec],
    n_frames: usize,
    first_id: i64,
    frame_offset: i64,
    rng: &mut ChaCha8Rng,
    fork: Option<(usize, u64)>,
) -> SynthOutput {
    let r = cfg.ring_radius;
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("noise std");
    let mut agents: Vec<Agent> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| Agent {
            id: first_id + i as i64,
            spec: *s,
            phase: None,
            speed: s.speed,
            desired: s.desired_speed,
            points: Vec::new(),
        })
        .collect();
    let mut labels = Vec::new();

    for f in 0..n_frames {
        if let Some((at, seed)) = fork {
            if f == at {
                *rng = ChaCha8Rng::seed_from_u64(seed);
            }
        }
        for a in agents.iter_mut() {
            if a.phase.is_none() && a.spec.spawn_frame == f {
                a.phase = Some(match a.spec.start {
                    StartPhase::Ring { angle } => Phase::Ring {
                        angle: angle.rem_euclid(TAU),
                        travelled: 0.0,
                    },
                    StartPhase::Approach { arm, distance } => Phase::Approach { arm, dist: distance },
                });
            }
        }
        // Record the state at frame f.
        for a in agents.iter_mut() {
            let Some(phase) = a.phase else { continue };
            let (x, y, heading) = match phase {
                Phase::Approach { arm, dist } => {
                    let th = cfg.arm_angle(arm);
                    ((r + dist) * th.cos(), (r + dist) * th.sin(), th + PI)
                }
                Phase::Ring { angle, .. } => (r * angle.cos(), r * angle.sin(), angle + PI / 2.0),
                Phase::Exit { angle, radius } => (radius * angle.cos(), radius * angle.sin(), angle),
                Phase::Gone => continue,
            };
            let (nx, ny) = if cfg.noise_std > 0.0 {
                (noise.sample(rng), noise.sample(rng))
            } else {
                (0.0, 0.0)
            };
            let heading = (heading + PI).rem_euclid(TAU) - PI;
            a.points.push(TrackPoint {
                track_id: a.id,
                frame: frame_offset + f as i64,
                x: x + nx,
                y: y + ny,
                heading,
                speed: a.speed,
            });
        }

        // Decide accelerations on a snapshot.
        let snapshot: Vec<(Option<Phase>, f64)> = agents.iter().map(|a| (a.phase, a.speed)).collect();
        let mut accel = vec![0.0; agents.len()];
        for (i, a) in agents.iter().enumerate() {
            let Some(phase) = a.phase else { continue };
            let mut leader: Option<(f64, f64)> = None;
            let mut consider = |gap: f64, v: f64| {
                if leader.is_none_or(|(g, _)| gap < g) {
                    leader = Some((gap, v));
                }
            };
            match phase {
                Phase::Approach { arm, dist } => {
                    for (j, (p, v)) in snapshot.iter().enumerate() {
                        if let (true, Some(Phase::Approach { arm: arm2, dist: d2 })) = (j != i, p) {
                            if *arm2 == arm && *d2 < dist {
                                consider(dist - d2 - CAR_LEN, *v);
                            }
                        }
                    }
                    if dist - YIELD_MARGIN < DECISION_ZONE && dist > YIELD_MARGIN - 0.5 {
                        let merge = cfg.arm_angle(arm);
                        let t_e = (dist - YIELD_MARGIN).max(0.0) / a.speed.max(1.0);
                        for (j, (p, v)) in snapshot.iter().enumerate() {
                            let Some(Phase::Ring { angle, .. }) = p else {
                                continue;
                            };
                            // Arc distance of the circulating agent to the merge
                            // point, negative once it has passed.
                            let ahead = (merge - angle).rem_euclid(TAU) * r;
                            let signed = if ahead > TAU * r - FOLLOW_TAIL {
                                ahead - TAU * r
                            } else {
                                ahead
                            };
                            let t_c = if signed < 0.0 && signed > -BLOCKING_TAIL {
                                0.0
                            } else {
                                signed / v.max(1.0)
                            };
                            let conflict = (t_c - t_e).abs() < cfg.gap_accept_s;
                            labels.push(InteractionLabel {
                                frame: frame_offset + f as i64,
                                agent_a: a.id,
                                agent_b: agents[j].id,
                                label: conflict as u8,
                            });
                            if !conflict {
                                continue;
                            }
                            // Merge behind it: follow its projection onto this
                            // arm once it is nearer the merge point, otherwise
                            // hold at the yield line.
                            if signed + CAR_LEN < dist {
                                consider(dist - signed - CAR_LEN, *v);
                            } else {
                                consider((dist - YIELD_MARGIN).max(0.0), 0.0);
                            }
                        }
                    }
                }
                Phase::Ring { angle, .. } => {
                    for (j, (p, v)) in snapshot.iter().enumerate() {
                        if let (true, Some(Phase::Ring { angle: a2, .. })) = (j != i, p) {
                            let ahead = (a2 - angle).rem_euclid(TAU) * r;
                            if ahead > 0.0 {
                                consider(ahead - CAR_LEN, *v);
                            }
                        }
                    }
                }
                Phase::Exit { angle, radius } => {
                    for (j, (p, v)) in snapshot.iter().enumerate() {
                        if let (
                            true,
                            Some(Phase::Exit {
                                angle: a2,
                                radius: r2,
                            }),
                        ) = (j != i, p)
                        {
                            if (a2 - angle).abs() < 1e-9 && *r2 > radius {
                                consider(r2 - radius - CAR_LEN, *v);
                            }
                        }
                    }
                }
                Phase::Gone => continue,
            }
            accel[i] = idm(a.speed, a.desired, leader);
        }

        // Integrate.
        for (a, &acc) in agents.iter_mut().zip(&accel) {
            let Some(phase) = a.phase else { continue };
            if phase == Phase::Gone {
                continue;
            }
            let v0 = a.speed;
            let v1 = (v0 + acc * DT).max(0.0);
            let ds = 0.5 * (v0 + v1) * DT;
            a.speed = v1;
            a.phase = Some(match phase {
                Phase::Approach { arm, dist } => {
                    if dist - ds <= 0.0 {
                        let angle = cfg.arm_angle(arm) + (ds - dist) / r;
                        Phase::Ring {
                            angle: angle.rem_euclid(TAU),
                            travelled: (ds - dist) / r,
                        }
                    } else {
                        Phase::Approach { arm, dist: dist - ds }
                    }
                }
                Phase::Ring { angle, travelled } => {
                    let t = travelled + ds / r;
                    let angle = (angle + ds / r).rem_euclid(TAU);
                    if t >= a.spec.exit_arc {
                        Phase::Exit { angle, radius: r }
                    } else {
                        Phase::Ring { angle, travelled: t }
                    }
                }
                Phase::Exit { angle, radius } => {
                    if radius + ds > r + EXIT_LEN {
                        Phase::Gone
                    } else {
                        Phase::Exit {
                            angle,
                            radius: radius + ds,
                        }
                    }
                }
                Phase::Gone => Phase::Gone,
            });
            if matches!(a.phase, Some(Phase::Ring { .. }))
                && cfg.speed_change_prob > 0.0
                && rng.random_bool(cfg.speed_change_prob)
            {
                a.desired = rng.random_range(2.5..9.0);
            }
            if matches!(a.phase, Some(Phase::Ring { .. })) && cfg.speed_noise > 0.0 {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                a.desired += SPEED_REVERSION * (a.spec.desired_speed - a.desired) * DT
                    + cfg.speed_noise * DT.sqrt() * z;
                a.desired = a.desired.clamp(MIN_DESIRED, MAX_DESIRED);
            }
        }
    }

    let tracks = agents
        .into_iter()
        .filter(|a| !a.points.is_empty())
        .map(|a| Track {
            id: a.id,
            class: Some(AgentClass::Vehicle),
            points: a.points,
        })
        .collect();
    labels.sort();
    SynthOutput { tracks, labels }
}

/// Random agent specs for one episode.
pub fn random_specs(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<AgentSpec> {
    let n_ring = cfg.n_agents.div_ceil(3);
    let base = rng.random_range(0.0..TAU);
    let mut specs = Vec::with_capacity(cfg.n_agents);
    for k in 0..n_ring {
        let v = rng.random_range(5.0..8.5);
        specs.push(AgentSpec {
            spawn_frame: 0,
            start: StartPhase::Ring {
                angle: base + TAU * k as f64 / n_ring as f64 + rng.random_range(-0.2..0.2),
            },
            speed: v,
            desired_speed: v,
            exit_arc: rng.random_range(PI..2.0 * PI),
        });
    }
    let horizon = (cfg.episode_frames as f64 * 0.6) as usize;
    for _ in n_ring..cfg.n_agents {
        let v = rng.random_range(5.0..8.5);
        specs.push(AgentSpec {
            spawn_frame: rng.random_range(0..horizon.max(1)),
            start: StartPhase::Approach {
                arm: rng.random_range(0..cfg.entry_arms),
                distance: APPROACH_LEN,
            },
            speed: v,
            desired_speed: v,
            exit_arc: rng.random_range(0.5 * PI..1.5 * PI),
        });
    }
    // Space out agents spawning on the same arm.
    specs.sort_by_key(|s| s.spawn_frame);
    let mut last_on_arm: Vec<Option<usize>> = vec![None; cfg.entry_arms];
    for s in specs.iter_mut() {
        if let StartPhase::Approach { arm, .. } = s.start {
            if let Some(prev) = last_on_arm[arm] {
                s.spawn_frame = s.spawn_frame.max(prev + 12);
            }
            last_on_arm[arm] = Some(s.spawn_frame);
        }
    }
    specs.retain(|s| s.spawn_frame < cfg.episode_frames);
    specs
}

/// Simulates `cfg.episodes` independent episodes. Episodes occupy disjoint
/// frame ranges separated by a gap, so no window spans two episodes.
pub fn synth_roundabout(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut out = SynthOutput::default();
    let mut next_id = 1;
    for e in 0..cfg.episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(e as u64));
        let specs = random_specs(cfg, &mut rng);
        let offset = (e * (cfg.episode_frames + 50)) as i64;
        let ep = simulate(cfg, &specs, cfg.episode_frames, next_id, offset, &mut rng);
        next_id += specs.len() as i64;
        out.tracks.extend(ep.tracks);
        out.labels.extend(ep.labels);
    }
    Ok(out)
}

pub fn write_labels(labels: &[InteractionLabel], path: &Path) -> Result<()> {
    let mut buf = b"frame,agent_a,agent_b,label\n".to_vec();
    for l in labels {
        writeln!(buf, "{},{},{},{}", l.frame, l.agent_a, l.agent_b, l.label).expect("vec write");
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_labels(path: &Path) -> Result<Vec<InteractionLabel>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let get = |i: usize| -> Result<i64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("invalid integer in column {}", i + 1),
                })
        };
        let label = get(3)?;
        if label != 0 && label != 1 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("label must be 0 or 1, got {label}"),
            });
        }
        out.push(InteractionLabel {
            frame: get(0)?,
            agent_a: get(1)?,
            agent_b: get(2)?,
            label: label as u8,
        });
    }
    Ok(out)
}

/// Positive interaction labels keyed by unordered pair and frame.
#[derive(Clone, Debug, Default)]
pub struct InteractionIndex {
    positive: HashSet<(i64, i64, i64)>,
}

impl InteractionIndex {
    pub fn new(labels: &[InteractionLabel]) -> Self {
        InteractionIndex {
            positive: labels
                .iter()
                .filter(|l| l.label == 1)
                .map(|l| (l.frame, l.agent_a.min(l.agent_b), l.agent_a.max(l.agent_b)))
                .collect(),
        }
    }

    /// Whether `a` and `b` interact at any frame in `frames`.
    pub fn interacts(&self, a: i64, b: i64, frames: std::ops::Range<i64>) -> bool {
        let (lo, hi) = (a.min(b), a.max(b));
        frames.into_iter().any(|f| self.positive.contains(&(f, lo, hi)))
    }

    pub fn n_positive(&self) -> usize {
        self.positive.len()
    }
}
