//! Scene-level displacement metrics and the constant-velocity reference.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::scenedata::{SceneSample, DT};

/// A scene is a miss when some agent's endpoint error exceeds this.
pub const MISS_THRESHOLD_M: f64 = 2.0;

/// Predictions `[M, A, T, 2]` against ground truth `[A, T, 2]`; `valid`
/// (row-major `[A, T]`) excludes steps when given.
#[derive(Clone, Copy)]
pub struct SceneView<'a> {
    pub pred: &'a Tensor,
    pub gt: &'a Tensor,
    pub valid: Option<&'a [bool]>,
}

impl<'a> SceneView<'a> {
    pub fn new(pred: &'a Tensor, gt: &'a Tensor, valid: Option<&'a [bool]>) -> Result<Self> {
        let (ps, gs) = (pred.shape(), gt.shape());
        if ps.len() != 4 || gs.len() != 3 || ps[1..] != *gs || ps[3] != 2 || ps[0] == 0 {
            return Err(Error::Dimension {
                op: "metrics",
                lhs: ps.to_vec(),
                rhs: gs.to_vec(),
            });
        }
        if gs[1] == 0 {
            return Err(Error::Validation("metrics need at least one future step".into()));
        }
        if valid.is_some_and(|v| v.len() != gs[0] * gs[1]) {
            return Err(Error::Validation("validity mask length mismatch".into()));
        }
        Ok(SceneView { pred, gt, valid })
    }

    pub fn n_modes(&self) -> usize {
        self.pred.shape()[0]
    }

    pub fn n_agents(&self) -> usize {
        self.gt.shape()[0]
    }

    pub fn n_steps(&self) -> usize {
        self.gt.shape()[1]
    }

    fn ok(&self, a: usize, t: usize) -> bool {
        self.valid.is_none_or(|v| v[a * self.n_steps() + t])
    }

    fn err(&self, m: usize, a: usize, t: usize) -> f64 {
        let dx = self.pred.get(&[m, a, t, 0]) - self.gt.get(&[a, t, 0]);
        let dy = self.pred.get(&[m, a, t, 1]) - self.gt.get(&[a, t, 1]);
        (dx * dx + dy * dy).sqrt()
    }

    /// Mean pointwise error of one agent in one mode over valid steps.
    pub fn ade(&self, m: usize, a: usize) -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for t in 0..self.n_steps() {
            if self.ok(a, t) {
                sum += self.err(m, a, t);
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Error at the last valid step.
    pub fn fde(&self, m: usize, a: usize) -> Option<f64> {
        (0..self.n_steps())
            .rev()
            .find(|&t| self.ok(a, t))
            .map(|t| self.err(m, a, t))
    }

    fn agent_mean(&self, f: impl Fn(usize) -> Option<f64>) -> f64 {
        let (mut sum, mut n) = (0.0, 0usize);
        for a in 0..self.n_agents() {
            if let Some(v) = f(a) {
                sum += v;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn sade(&self, m: usize) -> f64 {
        self.agent_mean(|a| self.ade(m, a))
    }

    pub fn sfde(&self, m: usize) -> f64 {
        self.agent_mean(|a| self.fde(m, a))
    }

    /// Mode with the lowest SFDE, ties to the lowest index.
    pub fn best_sfde_mode(&self) -> usize {
        let mut best = 0;
        let mut best_v = self.sfde(0);
        for m in 1..self.n_modes() {
            let v = self.sfde(m);
            if v < best_v {
                best = m;
                best_v = v;
            }
        }
        best
    }

    pub fn is_miss(&self) -> bool {
        let m = self.best_sfde_mode();
        (0..self.n_agents()).any(|a| self.fde(m, a).is_some_and(|e| e > MISS_THRESHOLD_M))
    }
}

fn min_over_modes(v: &SceneView<'_>, f: impl Fn(usize) -> f64) -> f64 {
    (0..v.n_modes()).map(f).fold(f64::INFINITY, f64::min)
}

pub fn min_sade(pred: &Tensor, gt: &Tensor, valid: Option<&[bool]>) -> Result<f64> {
    let v = SceneView::new(pred, gt, valid)?;
    Ok(min_over_modes(&v, |m| v.sade(m)))
}

pub fn min_sfde(pred: &Tensor, gt: &Tensor, valid: Option<&[bool]>) -> Result<f64> {
    let v = SceneView::new(pred, gt, valid)?;
    Ok(min_over_modes(&v, |m| v.sfde(m)))
}

/// Fraction of scenes whose best-SFDE mode misses.
pub fn smr(scenes: &[SceneView<'_>]) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::Validation("miss rate over zero scenes".into()));
    }
    let misses = scenes.iter().filter(|s| s.is_miss()).count();
    Ok(misses as f64 / scenes.len() as f64)
}

/// Per-scene summary feeding a [`MetricsReport`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneMetrics {
    pub min_sade: f64,
    pub min_sfde: f64,
    pub miss: bool,
}

pub fn scene_metrics(v: &SceneView<'_>) -> SceneMetrics {
    SceneMetrics {
        min_sade: min_over_modes(v, |m| v.sade(m)),
        min_sfde: min_over_modes(v, |m| v.sfde(m)),
        miss: v.is_miss(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub horizon_s: f64,
    pub min_sade: f64,
    pub min_sfde: f64,
    pub smr: f64,
    pub n_scenes: usize,
}

impl MetricsReport {
    /// Scene-averaged report, accumulated in scene order.
    pub fn from_scenes(horizon_s: f64, scenes: &[SceneMetrics]) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Validation("no scenes to evaluate".into()));
        }
        let n = scenes.len() as f64;
        Ok(MetricsReport {
            horizon_s,
            min_sade: scenes.iter().map(|s| s.min_sade).sum::<f64>() / n,
            min_sfde: scenes.iter().map(|s| s.min_sfde).sum::<f64>() / n,
            smr: scenes.iter().filter(|s| s.miss).count() as f64 / n,
            n_scenes: scenes.len(),
        })
    }
}

/// Writes reports as `[label,]horizon_s,min_sade,min_sfde,smr,n_scenes`.
pub fn write_reports(path: &Path, rows: &[(&str, &MetricsReport)]) -> Result<()> {
    let labelled = rows.iter().any(|(l, _)| !l.is_empty());
    let mut out = String::new();
    if labelled {
        out.push_str("model,");
    }
    out.push_str("horizon_s,min_sade,min_sfde,smr,n_scenes\n");
    for (label, r) in rows {
        if labelled {
            out.push_str(label);
            out.push(',');
        }
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{}\n",
            r.horizon_s, r.min_sade, r.min_sfde, r.smr, r.n_scenes
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Rolls each agent forward at its last observed speed and heading:
/// `[1, A, T_f, 2]`.
pub fn constant_velocity_baseline(sample: &SceneSample) -> Tensor {
    let (a, t_f) = (sample.n_agents(), sample.t_f());
    let t = sample.t_h() - 1;
    let mut out = Tensor::zeros(&[1, a, t_f, 2]);
    for i in 0..a {
        let f = |k| sample.history.get(&[i, t, k]);
        let (vx, vy) = (f(4) * f(2), f(4) * f(3));
        for k in 0..t_f {
            let dt = (k + 1) as f64 * DT;
            out.set(&[0, i, k, 0], f(0) + vx * dt);
            out.set(&[0, i, k, 1], f(1) + vy * dt);
        }
    }
    out
}

/// Future part of the sample's validity mask, `[A, T_f]` row-major.
pub fn future_mask(sample: &SceneSample) -> Vec<bool> {
    let t_f = sample.t_f();
    (0..sample.n_agents() * t_f)
        .map(|i| sample.future_valid(i / t_f, i % t_f))
        .collect()
}
