use std::ops::Range;

use super::tracks::{AgentClass, Track};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Per-step agent features: x, y (relative to the scene centroid),
/// cos heading, sin heading, speed, vehicle one-hot, vulnerable one-hot.
pub const AGENT_FEATURES: usize = 7;
pub const MAX_AGENTS: usize = 25;

/// One fixed-shape prediction instance.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub agent_ids: Vec<i64>,
    /// `[A, T_h, AGENT_FEATURES]`, zero where invalid.
    pub history: Tensor,
    /// `[A, T_f, 2]` in the scene frame, zero where invalid.
    pub future_gt: Tensor,
    /// Row-major `[A, T_h + T_f]`.
    pub valid_mask: Vec<bool>,
    pub ego_index: usize,
    pub map_ref: String,
    /// Frame index of the last history step.
    pub anchor_frame: i64,
    /// World position of the scene-frame origin.
    pub origin: [f64; 2],
}

impl SceneSample {
    pub fn n_agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn t_h(&self) -> usize {
        self.history.shape()[1]
    }

    pub fn t_f(&self) -> usize {
        self.future_gt.shape()[1]
    }

    /// Validity at window step `t` (history steps first).
    pub fn valid(&self, agent: usize, t: usize) -> bool {
        self.valid_mask[agent * (self.t_h() + self.t_f()) + t]
    }

    pub fn future_valid(&self, agent: usize, t: usize) -> bool {
        self.valid(agent, self.t_h() + t)
    }

    pub fn current_pos(&self, agent: usize) -> [f64; 2] {
        let t = self.t_h() - 1;
        [self.history.get(&[agent, t, 0]), self.history.get(&[agent, t, 1])]
    }

    pub fn future_pos(&self, agent: usize, t: usize) -> [f64; 2] {
        [
            self.future_gt.get(&[agent, t, 0]),
            self.future_gt.get(&[agent, t, 1]),
        ]
    }

    /// Frames covered by history and future.
    pub fn frames(&self) -> Range<i64> {
        let start = self.anchor_frame + 1 - self.t_h() as i64;
        start..start + (self.t_h() + self.t_f()) as i64
    }

    /// Frames covered by the future only.
    pub fn future_frames(&self) -> Range<i64> {
        self.anchor_frame + 1..self.anchor_frame + 1 + self.t_f() as i64
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.n_agents();
        if !(2..=MAX_AGENTS).contains(&a) {
            return Err(Error::Validation(format!("scene has {a} agents, need 2..=25")));
        }
        if self.history.shape() != [a, self.t_h(), AGENT_FEATURES]
            || self.future_gt.shape() != [a, self.t_f(), 2]
            || self.valid_mask.len() != a * (self.t_h() + self.t_f())
        {
            return Err(Error::Validation("scene sample shape mismatch".into()));
        }
        if self.ego_index >= a {
            return Err(Error::Validation("ego index out of range".into()));
        }
        if (0..a).any(|i| !self.valid(i, self.t_h() - 1)) {
            return Err(Error::Validation("agent invalid at current frame".into()));
        }
        Ok(())
    }
}

/// Cuts fixed-length windows out of a track set.
///
/// Window `k` covers frames `[f0 + k·stride, f0 + k·stride + t_h + t_f)`
/// where `f0` is the earliest frame in `tracks`. A window becomes a sample iff
/// at least two tracks are valid over its entire span; every track valid at
/// the current frame joins the sample, partially observed ones masked.
pub fn window_scenes(tracks: &[Track], t_h: usize, t_f: usize, stride: usize) -> Result<Vec<SceneSample>> {
    if t_h < 2 || t_f < 1 || stride < 1 {
        return Err(Error::Validation(format!(
            "window needs t_h ≥ 2, t_f ≥ 1, stride ≥ 1 (got {t_h}, {t_f}, {stride})"
        )));
    }
    let Some(f0) = tracks.iter().map(Track::first_frame).min() else {
        return Ok(Vec::new());
    };
    let f_end = tracks.iter().map(Track::last_frame).max().unwrap();
    let span = (t_h + t_f) as i64;
    let mut out = Vec::new();
    let mut start = f0;
    while start + span - 1 <= f_end {
        if let Some(s) = make_sample(tracks, start, t_h, t_f) {
            out.push(s);
        }
        start += stride as i64;
    }
    Ok(out)
}

fn make_sample(tracks: &[Track], start: i64, t_h: usize, t_f: usize) -> Option<SceneSample> {
    let span = (t_h + t_f) as i64;
    let current = start + t_h as i64 - 1;
    let full = |t: &Track| t.first_frame() <= start && t.last_frame() >= start + span - 1;
    if tracks.iter().filter(|t| full(t)).count() < 2 {
        return None;
    }
    let mut members: Vec<&Track> = tracks.iter().filter(|t| t.at(current).is_some()).collect();
    members.sort_by_key(|t| (!full(t), t.id));
    members.truncate(MAX_AGENTS);
    members.sort_by_key(|t| t.id);

    let a = members.len();
    let origin = {
        let (sx, sy) = members.iter().fold((0.0, 0.0), |(sx, sy), t| {
            let p = t.at(current).unwrap();
            (sx + p.x, sy + p.y)
        });
        [sx / a as f64, sy / a as f64]
    };
    let mut history = Tensor::zeros(&[a, t_h, AGENT_FEATURES]);
    let mut future = Tensor::zeros(&[a, t_f, 2]);
    let mut mask = vec![false; a * (t_h + t_f)];
    for (i, t) in members.iter().enumerate() {
        for s in 0..(t_h + t_f) {
            let Some(p) = t.at(start + s as i64) else { continue };
            mask[i * (t_h + t_f) + s] = true;
            let (x, y) = (p.x - origin[0], p.y - origin[1]);
            if s < t_h {
                let (vehicle, vru) = match t.class {
                    Some(AgentClass::Vehicle) => (1.0, 0.0),
                    Some(AgentClass::Vulnerable) => (0.0, 1.0),
                    None => (0.0, 0.0),
                };
                let feats = [x, y, p.heading.cos(), p.heading.sin(), p.speed, vehicle, vru];
                for (k, v) in feats.into_iter().enumerate() {
                    history.set(&[i, s, k], v);
                }
            } else {
                future.set(&[i, s - t_h, 0], x);
                future.set(&[i, s - t_h, 1], y);
            }
        }
    }
    // Ego: closest to the centroid at the current frame, ties to lowest id.
    let ego_index = (0..a)
        .min_by(|&i, &j| {
            let d = |k: usize| {
                let p = members[k].at(current).unwrap();
                (p.x - origin[0]).hypot(p.y - origin[1])
            };
            d(i).total_cmp(&d(j)).then(members[i].id.cmp(&members[j].id))
        })
        .unwrap();
    Some(SceneSample {
        agent_ids: members.iter().map(|t| t.id).collect(),
        history,
        future_gt: future,
        valid_mask: mask,
        ego_index,
        map_ref: String::new(),
        anchor_frame: current,
        origin,
    })
}
