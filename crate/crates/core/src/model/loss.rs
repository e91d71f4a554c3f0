use serde::{Deserialize, Serialize};

use super::{pair_agents, PredictionVars};
use crate::diffcore::{Tensor, Var};
use crate::error::{Error, Result};
use crate::paircov::mgnll_var;
use crate::scenedata::SceneSample;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Winner-takes-all over modes; otherwise the mixture NLL under the
    /// predicted mode probabilities.
    pub wta: bool,
    pub mode_ce_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            wta: true,
            mode_ce_weight: 1.0,
        }
    }
}

pub struct SceneLoss<'t> {
    pub total: Var<'t>,
    /// Summed MGNLL of each mode.
    pub per_mode: Vec<f64>,
    pub winner: usize,
    /// Jointly valid (pair, step) terms in each mode's sum.
    pub n_terms: usize,
}

impl SceneLoss<'_> {
    /// Winner-mode MGNLL per term.
    pub fn mean_mgnll(&self) -> Option<f64> {
        (self.n_terms > 0).then(|| self.per_mode[self.winner] / self.n_terms as f64)
    }
}

/// Pair MGNLL summed over jointly valid future steps, per mode, combined
/// across modes by `cfg`.
pub fn scene_loss<'t>(
    pred: &PredictionVars<'t>,
    sample: &SceneSample,
    cfg: &LossConfig,
) -> Result<SceneLoss<'t>> {
    let a = sample.n_agents();
    let t_f = sample.t_f();
    let ego = pred.ego_index;
    let others = pair_agents(a, ego);
    let tape = pred.logits.tape();
    if pred.traj[0].shape()[1] != t_f {
        return Err(Error::Validation(format!(
            "prediction has {} steps, sample has {t_f}",
            pred.traj[0].shape()[1]
        )));
    }

    let mut target = Tensor::zeros(&[a - 1, t_f, 4]);
    let mut mask = Tensor::zeros(&[a - 1, t_f]);
    let mut n_terms = 0;
    for (p, &o) in others.iter().enumerate() {
        for t in 0..t_f {
            let (pe, po) = (sample.future_pos(ego, t), sample.future_pos(o, t));
            for (k, v) in [pe[0], pe[1], po[0], po[1]].into_iter().enumerate() {
                target.set(&[p, t, k], v);
            }
            if sample.future_valid(ego, t) && sample.future_valid(o, t) {
                mask.set(&[p, t], 1.0);
                n_terms += 1;
            }
        }
    }
    let mask = tape.constant(mask);

    let mut losses = Vec::with_capacity(pred.traj.len());
    for (traj, cov) in pred.traj.iter().zip(&pred.cov) {
        let mu = Var::concat_last(&[traj.gather_rows(&vec![ego; a - 1])?, traj.gather_rows(&others)?])?;
        losses.push(mgnll_var(*cov, mu, &target)?.mul(mask)?.sum_all());
    }
    let per_mode: Vec<f64> = losses.iter().map(|l| l.item()).collect();
    let winner = argmin(&per_mode);

    let total = if cfg.wta {
        let mut total = losses[winner];
        if cfg.mode_ce_weight != 0.0 {
            let logp = pred.logits.softmax().log();
            let ce = logp
                .slice(0, winner, winner + 1)?
                .sum_all()
                .scale(-cfg.mode_ce_weight);
            total = total.add(ce)?;
        }
        total
    } else {
        // −log Σ_m π_m exp(−loss_m), shifted by the max exponent.
        let stacked = Var::concat(
            &losses
                .iter()
                .map(|l| l.reshape(&[1]))
                .collect::<Result<Vec<_>>>()?,
            0,
        )?;
        let x = pred.logits.softmax().log().sub(stacked)?;
        let shift = x.value().data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        x.add_scalar(-shift)
            .exp()
            .sum_all()
            .log()
            .add_scalar(shift)
            .scale(-1.0)
    };
    Ok(SceneLoss {
        total,
        per_mode,
        winner,
        n_terms,
    })
}

/// Index of the smallest value, ties to the lowest index.
pub(crate) fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}
