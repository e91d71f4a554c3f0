//! Finite-difference gradient suite behind the `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::gradcheck::{check, check_params};
use crate::diffcore::{CustomOp, Tape, Tensor, Var};
use crate::error::Result;
use crate::model::{scene_loss, Ctx, LossConfig, MapFormer, ModelConfig, SaiEnc};
use crate::paircov::mgnll_var;
use crate::scenedata::{SceneSample, AGENT_FEATURES, HISTORY_STEPS};
use crate::scenegraph::{attach_agents, NodeKind, RoadGraph};

const H_OPS: f64 = 1e-5;
const H_MODEL: f64 = 1e-6;
pub const OPS_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct GradcheckOptions {
    /// Swap softplus for a copy whose backward is wrong, to prove the
    /// suite catches it.
    pub corrupt_softplus: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub rel_err: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_err < self.tol
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed())
    }

    /// One line per check: `name rel_err tol PASS|FAIL`.
    pub fn to_text(&self) -> String {
        let w = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut s = String::new();
        for c in &self.checks {
            let verdict = if c.passed() { "PASS" } else { "FAIL" };
            s.push_str(&format!(
                "{:w$}  {:.3e}  < {:.0e}  {verdict}\n",
                c.name, c.rel_err, c.tol
            ));
        }
        s
    }
}

/// Softplus with a deliberately wrong derivative (plain sigmoid scaled by 2).
struct BrokenSoftplus;

impl CustomOp for BrokenSoftplus {
    fn name(&self) -> &'static str {
        "broken_softplus"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>> {
        let g = inputs[0]
            .data()
            .iter()
            .zip(grad)
            .map(|(x, g)| 2.0 * g / (1.0 + (-x).exp()))
            .collect();
        vec![g]
    }
}

fn softplus<'t>(v: Var<'t>, broken: bool) -> Var<'t> {
    if !broken {
        return v.softplus();
    }
    let value = v.softplus().value();
    v.tape().custom(&[v], value, Box::new(BrokenSoftplus))
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
}

fn weighted_sum<'t>(v: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = v.tape().constant(rand_tensor(&mut rng, &v.shape()));
    Ok(v.mul(w)?.sum_all())
}

type OpFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

fn op_checks(broken: bool) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 3, 4]);
    let bias = rand_tensor(&mut rng, &[4]);
    let w = rand_tensor(&mut rng, &[4, 5]);
    let bw = rand_tensor(&mut rng, &[2, 4, 5]);
    let pos = Tensor::from_fn(&[2, 3, 4], |_| rng.random_range(0.2..3.0));
    // relu is checked away from its kink
    let away = Tensor::from_fn(&[2, 3, 4], |_| {
        let v: f64 = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    });

    let cases: Vec<(&str, Vec<Tensor>, OpFn)> = vec![
        (
            "add",
            vec![a.clone(), b.clone()],
            Box::new(|_, v| weighted_sum(v[0].add(v[1])?, 1)),
        ),
        (
            "add_broadcast",
            vec![a.clone(), bias.clone()],
            Box::new(|_, v| weighted_sum(v[0].add(v[1])?, 2)),
        ),
        (
            "sub",
            vec![a.clone(), bias.clone()],
            Box::new(|_, v| weighted_sum(v[0].sub(v[1])?, 3)),
        ),
        (
            "mul",
            vec![a.clone(), b.clone()],
            Box::new(|_, v| weighted_sum(v[0].mul(v[1])?, 4)),
        ),
        (
            "scale",
            vec![a.clone()],
            Box::new(|_, v| weighted_sum(v[0].scale(-1.7), 6)),
        ),
        (
            "add_scalar",
            vec![a.clone()],
            Box::new(|_, v| weighted_sum(v[0].add_scalar(0.3), 26)),
        ),
        (
            "matmul",
            vec![a.clone(), w.clone()],
            Box::new(|_, v| weighted_sum(v[0].matmul(v[1])?, 7)),
        ),
        (
            "matmul_batched",
            vec![a.clone(), bw],
            Box::new(|_, v| weighted_sum(v[0].matmul(v[1])?, 8)),
        ),
        (
            "permute",
            vec![a.clone()],
            Box::new(|_, v| weighted_sum(v[0].permute(&[2, 0, 1])?, 9)),
        ),
        (
            "reshape",
            vec![a.clone()],
            Box::new(|_, v| weighted_sum(v[0].reshape(&[6, 4])?, 11)),
        ),
        (
            "concat",
            vec![a.clone(), b.clone()],
            Box::new(|_, v| weighted_sum(Var::concat(&[v[0], v[1]], 0)?, 13)),
        ),
        (
            "slice",
            vec![a.clone()],
            Box::new(|_, v| weighted_sum(v[0].slice(1, 1, 3)?, 14)),
        ),
        (
            "sum",
            vec![a.clone()],
            Box::new(|_, v| weighted_sum(v[0].sum(1)?, 15)),
        ),
        (
            "mean",
            vec![a.clone()],
            Box::new(|_, v| weighted_sum(v[0].mean(2)?, 16)),
        ),
        (
            "softmax",
            vec![a.clone()],
            Box::new(|_, v| weighted_sum(v[0].softmax(), 17)),
        ),
        (
            "layer_norm",
            vec![a.clone()],
            Box::new(|_, v| weighted_sum(v[0].layer_norm(), 18)),
        ),
        ("relu", vec![away], Box::new(|_, v| weighted_sum(v[0].relu(), 19))),
        (
            "softplus",
            vec![a.clone()],
            Box::new(move |_, v| weighted_sum(softplus(v[0], broken), 20)),
        ),
        (
            "exp",
            vec![a.clone()],
            Box::new(|_, v| weighted_sum(v[0].exp(), 21)),
        ),
        ("log", vec![pos], Box::new(|_, v| weighted_sum(v[0].log(), 22))),
        (
            "gather_rows",
            vec![a.clone()],
            Box::new(|_, v| weighted_sum(v[0].gather_rows(&[1, 0, 1])?, 23)),
        ),
        (
            "scatter_add_rows",
            vec![a.clone()],
            Box::new(|_, v| weighted_sum(v[0].scatter_add_rows(&[2, 2], 3)?, 24)),
        ),
        (
            "expand",
            vec![bias],
            Box::new(|_, v| weighted_sum(v[0].expand(3), 25)),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| {
            Ok(CheckResult {
                name: format!("op/{name}"),
                rel_err: check(&inputs, H_OPS, f)?,
                tol: OPS_TOL,
            })
        })
        .collect()
}

fn cov<'t>(raw: Var<'t>, broken: bool) -> Result<Var<'t>> {
    let scales = softplus(raw.slice(1, 0, 4)?, broken).add_scalar(0.05);
    Var::concat_last(&[scales, raw.slice(1, 4, 10)?])
}

/// MGNLL over a batch of random pairs, gradients w.r.t. the ten raw
/// parameters (through softplus + bias) and the mean.
fn mgnll_checks(broken: bool) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 8;
    let raw = Tensor::from_fn(&[n, 10], |_| rng.random_range(-1.0..1.0));
    let mu = Tensor::from_fn(&[n, 4], |_| rng.random_range(-2.0..2.0));
    let x = Tensor::from_fn(&[n, 4], |_| rng.random_range(-2.0..2.0));
    let params = check(std::slice::from_ref(&raw), H_OPS, |tape, v| {
        Ok(mgnll_var(cov(v[0], broken)?, tape.constant(mu.clone()), &x)?.sum_all())
    })?;
    let means = check(std::slice::from_ref(&mu), H_OPS, |tape, v| {
        Ok(mgnll_var(cov(tape.constant(raw.clone()), broken)?, v[0], &x)?.sum_all())
    })?;
    Ok(vec![
        CheckResult {
            name: "mgnll/params".into(),
            rel_err: params,
            tol: OPS_TOL,
        },
        CheckResult {
            name: "mgnll/mu".into(),
            rel_err: means,
            tol: OPS_TOL,
        },
    ])
}

/// Three agents on straight lines, deterministic.
pub fn tiny_sample(t_f: usize, seed: u64) -> SceneSample {
    let (a, t_h) = (3, HISTORY_STEPS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Tensor::zeros(&[a, t_h, AGENT_FEATURES]);
    let mut future = Tensor::zeros(&[a, t_f, 2]);
    for i in 0..a {
        let (x0, y0) = (rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0));
        let h: f64 = rng.random_range(-3.0..3.0);
        let v: f64 = rng.random_range(1.0..6.0);
        for t in 0..t_h + t_f {
            let s = (t as f64 - (t_h - 1) as f64) * 0.2 * v;
            let (x, y) = (x0 + s * h.cos(), y0 + s * h.sin());
            if t < t_h {
                for (k, f) in [x, y, h.cos(), h.sin(), v, 1.0, 0.0].into_iter().enumerate() {
                    history.set(&[i, t, k], f);
                }
            } else {
                future.set(&[i, t - t_h, 0], x + rng.random_range(-0.3..0.3));
                future.set(&[i, t - t_h, 1], y + rng.random_range(-0.3..0.3));
            }
        }
    }
    SceneSample {
        agent_ids: (1..=a as i64).collect(),
        history,
        future_gt: future,
        valid_mask: vec![true; a * (t_h + t_f)],
        ego_index: 0,
        map_ref: String::new(),
        anchor_frame: t_h as i64 - 1,
        origin: [0.0, 0.0],
    }
}

/// Four road nodes on a line through the scene.
pub fn tiny_road() -> RoadGraph {
    RoadGraph {
        node_ids: (0..4).collect(),
        node_pos: (0..4).map(|k| [k as f64 * 3.0 - 4.5, 1.0]).collect(),
        node_kind: vec![NodeKind::Ring; 4],
        edges: (1..4).map(|k| (k - 1, k)).collect(),
    }
}

/// End-to-end loss gradient of a small model (A = 3, T_f = 5, d = 16) for
/// one spatial-encoder variant.
pub fn model_check(saienc: SaiEnc) -> Result<CheckResult> {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 4,
        n_dec: 1,
        n_gnn: 1,
        n_modes: 2,
        saienc,
        t_f: 5,
        sigma_bias: 0.05,
    };
    let model = MapFormer::new(&cfg, 21)?;
    let sample = tiny_sample(5, 5);
    let graph = attach_agents(&tiny_road(), &sample);
    let loss = LossConfig {
        wta: true,
        mode_ce_weight: 0.5,
    };
    let r = check_params(&model.params, H_MODEL, |tape, ps| {
        let pred = model.forward(&Ctx::new(tape, ps), &sample, Some(&graph))?;
        Ok(scene_loss(&pred, &sample, &loss)?.total)
    })?;
    let name = format!(
        "model/{}",
        serde_json::to_value(saienc)
            .expect("enum serializes")
            .as_str()
            .unwrap_or("?")
    );
    Ok(CheckResult {
        name,
        rel_err: r.worst(),
        tol: MODEL_TOL,
    })
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut checks = op_checks(opts.corrupt_softplus)?;
    checks.extend(mgnll_checks(opts.corrupt_softplus)?);
    for s in [SaiEnc::None, SaiEnc::Gnn, SaiEnc::Attention] {
        checks.push(model_check(s)?);
    }
    Ok(GradcheckReport { checks })
}
