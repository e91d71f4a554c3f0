//! Pairwise dependency scores read off the predicted cross-covariance, their
//! ranking, and per-scene plots.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{future_mask, SceneView};
use crate::model::PredictionOutput;
use crate::paircov::{build_sigma, marginal_blocks, CovParams, PairCovariance};
use crate::scenedata::SceneSample;
use crate::scenegraph::RoadGraph;

/// Sum of absolute entries of the ego/other cross block.
pub fn dependency_score(c: &PairCovariance) -> f64 {
    marginal_blocks(c).cross.iter().flatten().map(|v| v.abs()).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependencyRecord {
    pub ego_id: i64,
    pub other_id: i64,
    pub mode: usize,
    /// Mean of `per_step_scores`.
    pub score: f64,
    pub per_step_scores: Vec<f64>,
}

/// Which mode's covariance a record describes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeChoice {
    /// Mode with the lowest SFDE against ground truth.
    #[default]
    BestSfde,
    /// Per-step scores averaged over modes with the predicted
    /// probabilities; the record carries the most probable mode.
    ProbabilityWeighted,
}

fn step_scores(out: &PredictionOutput, mode: usize, pair: usize) -> Result<Vec<f64>> {
    (0..out.t_f())
        .map(|t| {
            let c = out.cov(mode, pair, t);
            let p = CovParams::from_slice(&c)?;
            Ok(dependency_score(&build_sigma(&p)?))
        })
        .collect()
}

/// One record per non-ego agent, in agent order.
pub fn scene_records(
    sample: &SceneSample,
    out: &PredictionOutput,
    choice: ModeChoice,
) -> Result<Vec<DependencyRecord>> {
    let ego = out.ego_index;
    let mut records = Vec::with_capacity(out.n_agents() - 1);
    let (mode, weights) = match choice {
        ModeChoice::BestSfde => {
            let mask = future_mask(sample);
            let v = SceneView::new(&out.traj, &sample.future_gt, Some(&mask))?;
            (v.best_sfde_mode(), None)
        }
        ModeChoice::ProbabilityWeighted => {
            let p = out.mode_probs();
            let top = (0..p.len()).fold(0, |b, m| if p[m] > p[b] { m } else { b });
            (top, Some(p))
        }
    };
    for pair in 0..out.n_agents() - 1 {
        let per_step_scores = match &weights {
            None => step_scores(out, mode, pair)?,
            Some(w) => {
                let mut acc = vec![0.0; out.t_f()];
                for (m, wm) in w.iter().enumerate() {
                    for (a, s) in acc.iter_mut().zip(step_scores(out, m, pair)?) {
                        *a += wm * s;
                    }
                }
                acc
            }
        };
        let score = per_step_scores.iter().sum::<f64>() / per_step_scores.len() as f64;
        records.push(DependencyRecord {
            ego_id: sample.agent_ids[ego],
            other_id: sample.agent_ids[out.pair_agent(pair)],
            mode,
            score,
            per_step_scores,
        });
    }
    Ok(records)
}

/// Highest score first; equal scores by ascending `other_id`, otherwise stable.
pub fn rank_pairs(records: &[DependencyRecord]) -> Vec<DependencyRecord> {
    let mut r = records.to_vec();
    r.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.other_id.cmp(&b.other_id)));
    r
}

/// Rows `scene,ego_id,other_id,mode,score`.
pub fn write_dependency_csv(path: &Path, rows: &[(usize, DependencyRecord)]) -> Result<()> {
    let mut out = String::from("scene,ego_id,other_id,mode,score\n");
    for (scene, r) in rows {
        writeln!(
            out,
            "{scene},{},{},{},{:.9}",
            r.ego_id, r.other_id, r.mode, r.score
        )
        .unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub const MIN_STROKE: f64 = 0.3;
pub const MAX_STROKE: f64 = 3.0;

/// Linear width map with the largest score at [`MAX_STROKE`].
pub fn stroke_width(score: f64, max_score: f64) -> f64 {
    if max_score > 0.0 {
        MIN_STROKE + (MAX_STROKE - MIN_STROKE) * score / max_score
    } else {
        MIN_STROKE
    }
}

/// SVG of road nodes, past tracks, ground truth, the best-SFDE mode and one
/// ego-pair line per record. Output depends only on the inputs.
pub fn render_scene_svg(
    sample: &SceneSample,
    road: Option<&RoadGraph>,
    out: &PredictionOutput,
    records: &[DependencyRecord],
) -> Result<String> {
    let a = sample.n_agents();
    let (t_h, t_f) = (sample.t_h(), sample.t_f());
    let mask = future_mask(sample);
    let mode = SceneView::new(&out.traj, &sample.future_gt, Some(&mask))?.best_sfde_mode();

    let mut pts: Vec<[f64; 2]> = Vec::new();
    for i in 0..a {
        for t in 0..t_h {
            if sample.valid(i, t) {
                pts.push([sample.history.get(&[i, t, 0]), sample.history.get(&[i, t, 1])]);
            }
        }
        for t in 0..t_f {
            if sample.future_valid(i, t) {
                pts.push(sample.future_pos(i, t));
            }
            pts.push(out.pos(mode, i, t));
        }
    }
    let pad = 8.0;
    let fold = |k: usize, f: fn(f64, f64) -> f64, init: f64| pts.iter().map(|p| p[k]).fold(init, f);
    let (x0, x1) = (
        fold(0, f64::min, f64::INFINITY) - pad,
        fold(0, f64::max, f64::NEG_INFINITY) + pad,
    );
    let (y0, y1) = (
        fold(1, f64::min, f64::INFINITY) - pad,
        fold(1, f64::max, f64::NEG_INFINITY) + pad,
    );
    let (w, h) = (x1 - x0, y1 - y0);
    let scale = 800.0 / w.max(h);
    let px = |p: [f64; 2]| ((p[0] - x0) * scale, (y1 - p[1]) * scale);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="0 0 {:.3} {:.3}">"#,
        w * scale,
        h * scale,
        w * scale,
        h * scale
    )
    .unwrap();
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    if let Some(road) = road {
        svg.push_str("<g fill=\"#bbbbbb\">\n");
        for p in &road.node_pos {
            let q = [p[0] - sample.origin[0], p[1] - sample.origin[1]];
            if (x0..=x1).contains(&q[0]) && (y0..=y1).contains(&q[1]) {
                let (x, y) = px(q);
                writeln!(svg, r#"<circle cx="{x:.3}" cy="{y:.3}" r="2"/>"#).unwrap();
            }
        }
        svg.push_str("</g>\n");
    }

    let polyline = |svg: &mut String, pts: &[[f64; 2]], style: &str| {
        if pts.len() < 2 {
            return;
        }
        let coords: Vec<String> = pts
            .iter()
            .map(|&p| {
                let (x, y) = px(p);
                format!("{x:.3},{y:.3}")
            })
            .collect();
        writeln!(
            svg,
            r#"<polyline points="{}" fill="none" {style}/>"#,
            coords.join(" ")
        )
        .unwrap();
    };
    for i in 0..a {
        let past: Vec<[f64; 2]> = (0..t_h)
            .filter(|&t| sample.valid(i, t))
            .map(|t| [sample.history.get(&[i, t, 0]), sample.history.get(&[i, t, 1])])
            .collect();
        let now = sample.current_pos(i);
        let gt: Vec<[f64; 2]> = std::iter::once(now)
            .chain(
                (0..t_f)
                    .filter(|&t| sample.future_valid(i, t))
                    .map(|t| sample.future_pos(i, t)),
            )
            .collect();
        let pred: Vec<[f64; 2]> = std::iter::once(now)
            .chain((0..t_f).map(|t| out.pos(mode, i, t)))
            .collect();
        polyline(&mut svg, &past, r##"stroke="#333333" stroke-width="2""##);
        polyline(&mut svg, &gt, r##"stroke="#2a9d4a" stroke-width="1.5""##);
        polyline(
            &mut svg,
            &pred,
            r##"stroke="#1f5fbf" stroke-width="1.5" stroke-dasharray="4 3""##,
        );
    }

    let max_score = records.iter().map(|r| r.score).fold(0.0, f64::max);
    let index_of = |id: i64| sample.agent_ids.iter().position(|&x| x == id);
    svg.push_str("<g stroke=\"#d62828\" stroke-opacity=\"0.8\">\n");
    for r in records {
        let (Some(e), Some(o)) = (index_of(r.ego_id), index_of(r.other_id)) else {
            return Err(Error::Validation(format!(
                "record ({}, {}) names an agent outside the scene",
                r.ego_id, r.other_id
            )));
        };
        let ((xe, ye), (xo, yo)) = (px(sample.current_pos(e)), px(sample.current_pos(o)));
        writeln!(
            svg,
            r#"<line x1="{xe:.3}" y1="{ye:.3}" x2="{xo:.3}" y2="{yo:.3}" stroke-width="{:.3}"/>"#,
            stroke_width(r.score, max_score)
        )
        .unwrap();
    }
    svg.push_str("</g>\n");

    svg.push_str("<g font-family=\"monospace\" font-size=\"11\">\n");
    for i in 0..a {
        let (x, y) = px(sample.current_pos(i));
        let fill = if i == sample.ego_index {
            "#d62828"
        } else {
            "#000000"
        };
        writeln!(
            svg,
            r#"<circle cx="{x:.3}" cy="{y:.3}" r="4" fill="{fill}"/><text x="{:.3}" y="{:.3}">{}</text>"#,
            x + 6.0,
            y - 6.0,
            sample.agent_ids[i]
        )
        .unwrap();
    }
    svg.push_str("</g>\n</svg>\n");
    Ok(svg)
}

pub fn export_scene_plot(
    path: &Path,
    sample: &SceneSample,
    road: Option<&RoadGraph>,
    out: &PredictionOutput,
    records: &[DependencyRecord],
) -> Result<()> {
    let svg = render_scene_svg(sample, road, out, records)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cov_with_cross(cross: [[f64; 2]; 2]) -> PairCovariance {
        let mut s = [[0.0; 4]; 4];
        for (i, row) in s.iter_mut().enumerate() {
            row[i] = 2.0;
        }
        for i in 0..2 {
            for j in 0..2 {
                s[i][2 + j] = cross[i][j];
                s[2 + j][i] = cross[i][j];
            }
        }
        PairCovariance { sigma: s }
    }

    fn rec(other_id: i64, score: f64) -> DependencyRecord {
        DependencyRecord {
            ego_id: 0,
            other_id,
            mode: 0,
            score,
            per_step_scores: vec![score],
        }
    }

    #[test]
    fn identity_scores_zero() {
        let c = build_sigma(&CovParams::identity()).unwrap();
        assert_eq!(dependency_score(&c), 0.0);
    }

    #[test]
    fn cross_block_sum_of_absolutes() {
        let c = cov_with_cross([[0.5, -0.2], [0.1, 0.3]]);
        assert!((dependency_score(&c) - 1.1).abs() < 1e-15);
        // Lower block mirrors the upper one.
        let lower: f64 = (2..4)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| c.sigma[i][j].abs())
            .sum();
        assert!((lower - dependency_score(&c)).abs() < 1e-15);
    }

    #[test]
    fn ranking() {
        let order = |r: Vec<DependencyRecord>| rank_pairs(&r).iter().map(|r| r.other_id).collect::<Vec<_>>();
        assert_eq!(order(vec![rec(2, 0.1), rec(9, 0.9), rec(3, 1.4)]), vec![3, 9, 2]);
        assert_eq!(order(vec![rec(1, 0.5), rec(4, 0.5), rec(7, 0.5)]), vec![1, 4, 7]);
        assert_eq!(order(vec![rec(5, 0.2)]), vec![5]);
    }

    #[test]
    fn stroke_widths() {
        assert_eq!(stroke_width(0.0, 2.0), MIN_STROKE);
        assert_eq!(stroke_width(2.0, 2.0), MAX_STROKE);
        assert_eq!(stroke_width(0.0, 0.0), MIN_STROKE);
    }
}
