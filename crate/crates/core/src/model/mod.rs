//! The prediction network: temporal encoder, spatial-and-interaction
//! encoder (GNN or attention, switchable), factorized decoder and the
//! trajectory, pair-covariance and mode heads.

mod layers;
mod loss;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Checkpoint, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::paircov::N_PARAMS;
use crate::scenedata::{SceneSample, AGENT_FEATURES, DT};
use crate::scenegraph::{SceneGraph, EDGE_FEATURES, ROAD_FEATURES};

pub use layers::{sinusoidal_encoding, Ctx, EncoderLayer, LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use loss::{scene_loss, LossConfig, SceneLoss};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaiEnc {
    None,
    Gnn,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Decoder repetitions.
    pub n_dec: usize,
    /// GNN layers, also the layer count of the attention variant.
    pub n_gnn: usize,
    pub n_modes: usize,
    pub saienc: SaiEnc,
    pub t_f: usize,
    /// Lower bound added to every predicted scale, meters.
    pub sigma_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_dec: 2,
            n_gnn: 3,
            n_modes: 6,
            saienc: SaiEnc::Attention,
            t_f: 15,
            sigma_bias: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_modes == 0 || self.n_dec == 0 || self.t_f == 0 {
            return bad("n_modes, n_dec and t_f must be at least 1".into());
        }
        if self.saienc != SaiEnc::None && self.n_gnn == 0 {
            return bad("n_gnn must be at least 1".into());
        }
        if !(self.sigma_bias > 0.0) || !self.sigma_bias.is_finite() {
            return bad(format!("sigma_bias must be > 0, got {}", self.sigma_bias));
        }
        Ok(())
    }
}

/// Plain-value network output.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionOutput {
    /// `[M, A, T_f, 2]` in the scene frame.
    pub traj: Tensor,
    /// `[M, A−1, T_f, 10]`; scales first, then `a..f`.
    pub cov_params: Tensor,
    /// `[M]`.
    pub mode_logits: Tensor,
    pub ego_index: usize,
}

impl PredictionOutput {
    pub fn n_modes(&self) -> usize {
        self.traj.shape()[0]
    }

    pub fn n_agents(&self) -> usize {
        self.traj.shape()[1]
    }

    pub fn t_f(&self) -> usize {
        self.traj.shape()[2]
    }

    pub fn pos(&self, mode: usize, agent: usize, t: usize) -> [f64; 2] {
        [
            self.traj.get(&[mode, agent, t, 0]),
            self.traj.get(&[mode, agent, t, 1]),
        ]
    }

    pub fn cov(&self, mode: usize, pair: usize, t: usize) -> [f64; N_PARAMS] {
        std::array::from_fn(|k| self.cov_params.get(&[mode, pair, t, k]))
    }

    /// Agent index of the non-ego member of `pair`.
    pub fn pair_agent(&self, pair: usize) -> usize {
        pair_agents(self.n_agents(), self.ego_index)[pair]
    }

    pub fn mode_probs(&self) -> Vec<f64> {
        let l = self.mode_logits.data();
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    }
}

/// Non-ego agents in index order.
pub fn pair_agents(a: usize, ego: usize) -> Vec<usize> {
    (0..a).filter(|&i| i != ego).collect()
}

/// Per-mode graph nodes of one forward pass.
pub struct PredictionVars<'t> {
    /// `[A, T_f, 2]` per mode.
    pub traj: Vec<Var<'t>>,
    /// `[A−1, T_f, 10]` per mode.
    pub cov: Vec<Var<'t>>,
    pub logits: Var<'t>,
    pub ego_index: usize,
}

impl PredictionVars<'_> {
    pub fn to_output(&self) -> Result<PredictionOutput> {
        let stack = |vs: &[Var<'_>]| -> Result<Tensor> {
            let mut shape = vec![vs.len()];
            shape.extend(vs[0].shape());
            let data = vs.iter().flat_map(|v| v.value().into_data()).collect();
            Tensor::new(shape, data)
        };
        Ok(PredictionOutput {
            traj: stack(&self.traj)?,
            cov_params: stack(&self.cov)?,
            mode_logits: self.logits.value(),
            ego_index: self.ego_index,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TemporalEncoder {
    pub input: Linear,
    pub layer: EncoderLayer,
}

#[derive(Clone, Debug)]
pub struct GinLayer {
    pub edge: Linear,
    pub mlp: Mlp,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub enum SpatialEncoder {
    Gnn {
        agent_in: Linear,
        road_in: Linear,
        layers: Vec<GinLayer>,
    },
    Attention {
        agent_in: Linear,
        road_in: Linear,
        layers: Vec<EncoderLayer>,
    },
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attn: MultiHeadAttention,
    pub ln_self: LayerNorm,
    pub spatial: Option<(MultiHeadAttention, LayerNorm)>,
    pub temporal_attn: MultiHeadAttention,
    pub ln_temporal: LayerNorm,
    pub ff: Mlp,
    pub ln_ff: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub traj: Vec<Mlp>,
    pub cov: Vec<Mlp>,
    pub mode: Linear,
}

/// Network layout plus parameters.
#[derive(Clone, Debug)]
pub struct MapFormer {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub temporal: TemporalEncoder,
    pub spatial: Option<SpatialEncoder>,
    /// Learned future queries `[T_f, d]`, shared by all agents.
    pub queries: crate::diffcore::ParamId,
    pub decoder: Vec<DecoderBlock>,
    pub heads: Heads,
}

impl MapFormer {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut ps = ParamStore::new();
        let (d, h) = (cfg.d_model, cfg.n_heads);

        let temporal = TemporalEncoder {
            input: Linear::new(&mut ps, "tenc.in", AGENT_FEATURES, d, rng),
            layer: EncoderLayer::new(&mut ps, "tenc.layer", d, h, rng),
        };
        let spatial = match cfg.saienc {
            SaiEnc::None => None,
            SaiEnc::Gnn => Some(SpatialEncoder::Gnn {
                agent_in: Linear::new(&mut ps, "gnn.agent_in", AGENT_FEATURES, d, rng),
                road_in: Linear::new(&mut ps, "gnn.road_in", ROAD_FEATURES, d, rng),
                layers: (0..cfg.n_gnn)
                    .map(|k| GinLayer {
                        edge: Linear::new(&mut ps, &format!("gnn.{k}.edge"), EDGE_FEATURES, d, rng),
                        mlp: Mlp::new(&mut ps, &format!("gnn.{k}.mlp"), &[d, d, d], rng),
                        norm: LayerNorm::new(&mut ps, &format!("gnn.{k}.ln"), d),
                    })
                    .collect(),
            }),
            SaiEnc::Attention => Some(SpatialEncoder::Attention {
                agent_in: Linear::new(&mut ps, "sattn.agent_in", AGENT_FEATURES, d, rng),
                road_in: Linear::new(&mut ps, "sattn.road_in", ROAD_FEATURES, d, rng),
                layers: (0..cfg.n_gnn)
                    .map(|k| EncoderLayer::new(&mut ps, &format!("sattn.{k}"), d, h, rng))
                    .collect(),
            }),
        };
        let queries = ps.add_uniform("dec.queries", &[cfg.t_f, d], 1, rng);
        let decoder = (0..cfg.n_dec)
            .map(|n| {
                let name = |s: &str| format!("dec.{n}.{s}");
                DecoderBlock {
                    self_attn: MultiHeadAttention::new(&mut ps, &name("self"), d, h, rng),
                    ln_self: LayerNorm::new(&mut ps, &name("ln_self"), d),
                    spatial: spatial.as_ref().map(|_| {
                        (
                            MultiHeadAttention::new(&mut ps, &name("spatial"), d, h, rng),
                            LayerNorm::new(&mut ps, &name("ln_spatial"), d),
                        )
                    }),
                    temporal_attn: MultiHeadAttention::new(&mut ps, &name("temporal"), d, h, rng),
                    ln_temporal: LayerNorm::new(&mut ps, &name("ln_temporal"), d),
                    ff: Mlp::new(&mut ps, &name("ff"), &[d, 2 * d, d], rng),
                    ln_ff: LayerNorm::new(&mut ps, &name("ln_ff"), d),
                }
            })
            .collect();
        let heads = Heads {
            traj: (0..cfg.n_modes)
                .map(|m| Mlp::new(&mut ps, &format!("head.traj.{m}"), &[d, d, d, 2], rng))
                .collect(),
            cov: (0..cfg.n_modes)
                .map(|m| Mlp::new(&mut ps, &format!("head.cov.{m}"), &[2 * d, d, d, N_PARAMS], rng))
                .collect(),
            mode: Linear::new(&mut ps, "head.mode", d, cfg.n_modes, rng),
        };
        Ok(MapFormer {
            cfg: cfg.clone(),
            params: ps,
            temporal,
            spatial,
            queries,
            decoder,
            heads,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: serde_json::to_string(&self.cfg).expect("config serializes"),
            params: self.params.clone(),
        }
    }

    /// Rebuilds the layout from the stored config and adopts the stored
    /// values; names and shapes must line up exactly.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(&ck.meta)
            .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        let mut model = MapFormer::new(&cfg, 0)?;
        if ck.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                ck.params.len(),
                model.params.len()
            )));
        }
        for id in ck.params.ids() {
            let (name, want) = (model.params.name(id), model.params.get(id));
            let got = ck.params.get(id);
            if ck.params.name(id) != name || got.shape() != want.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match model tensor {name} {:?}",
                    ck.params.name(id),
                    got.shape(),
                    want.shape()
                )));
            }
        }
        model.params = ck.params.clone();
        Ok(model)
    }

    pub fn ctx<'t>(&'t self, tape: &'t Tape) -> Ctx<'t> {
        Ctx::new(tape, &self.params)
    }

    /// `[A, T_h, d]`; attention stays within each agent's own history.
    pub fn temporal_encode<'t>(&self, cx: &Ctx<'t>, sample: &SceneSample) -> Result<Var<'t>> {
        let (a, t_h) = (sample.n_agents(), sample.t_h());
        let x = self
            .temporal
            .input
            .forward(cx, cx.constant(sample.history.clone()))?;
        let pe = cx.constant(sinusoidal_encoding(t_h, self.cfg.d_model));
        let x = x.add(pe)?;
        let valid: Vec<bool> = (0..a * t_h).map(|i| sample.valid(i / t_h, i % t_h)).collect();
        self.temporal.layer.forward(cx, x, Some(&valid))
    }

    /// `[A, d]`, or `None` when the spatial encoder is disabled.
    pub fn spatial_encode<'t>(&self, cx: &Ctx<'t>, graph: &SceneGraph) -> Result<Option<Var<'t>>> {
        match &self.spatial {
            None => Ok(None),
            Some(SpatialEncoder::Gnn {
                agent_in,
                road_in,
                layers,
            }) => {
                let mut h = embed_nodes(cx, agent_in, road_in, graph)?;
                let src: Vec<usize> = graph.edges.iter().map(|e| e.0).collect();
                let dst: Vec<usize> = graph.edges.iter().map(|e| e.1).collect();
                let ef = cx.constant(graph.edge_feat.clone());
                for l in layers {
                    let e = l.edge.forward(cx, ef)?;
                    let agg = gin_aggregate(h, e, &src, &dst)?;
                    h = l.norm.forward(cx, l.mlp.forward(cx, agg)?)?;
                }
                Ok(Some(h.slice(0, 0, graph.n_agents)?))
            }
            Some(SpatialEncoder::Attention {
                agent_in,
                road_in,
                layers,
            }) => {
                let n = graph.n_nodes();
                let mut h = embed_nodes(cx, agent_in, road_in, graph)?.reshape(&[1, n, self.cfg.d_model])?;
                for l in layers {
                    h = l.forward(cx, h, None)?;
                }
                Ok(Some(h.reshape(&[n, self.cfg.d_model])?.slice(
                    0,
                    0,
                    graph.n_agents,
                )?))
            }
        }
    }

    /// `[A, T_f, d]` from the temporal embeddings and optional spatial ones.
    pub fn decode<'t>(
        &self,
        cx: &Ctx<'t>,
        temporal: Var<'t>,
        spatial: Option<Var<'t>>,
        history_valid: &[bool],
    ) -> Result<Var<'t>> {
        let a = temporal.shape()[0];
        let mut x = cx.p(self.queries).expand(a);
        for block in &self.decoder {
            x = block.forward(cx, x, temporal, spatial, history_valid)?;
        }
        Ok(x)
    }

    /// Heads on the decoded embeddings. Trajectories are residuals on a
    /// constant-velocity rollout from each agent's current state.
    pub fn predict<'t>(
        &self,
        cx: &Ctx<'t>,
        decoded: Var<'t>,
        sample: &SceneSample,
    ) -> Result<PredictionVars<'t>> {
        let a = sample.n_agents();
        if a < 2 {
            return Err(Error::Validation(format!(
                "prediction needs at least 2 agents, got {a}"
            )));
        }
        let t_f = decoded.shape()[1];
        let ego = sample.ego_index;
        let anchor = cx.constant(cv_rollout(sample, t_f));
        let others = pair_agents(a, ego);
        let pair = Var::concat_last(&[
            decoded.gather_rows(&vec![ego; a - 1])?,
            decoded.gather_rows(&others)?,
        ])?;
        let bias = self.cfg.sigma_bias;
        let mut traj = Vec::with_capacity(self.cfg.n_modes);
        let mut cov = Vec::with_capacity(self.cfg.n_modes);
        for (th, ch) in self.heads.traj.iter().zip(&self.heads.cov) {
            traj.push(th.forward(cx, decoded)?.add(anchor)?);
            let raw = ch.forward(cx, pair)?;
            let scales = raw.slice(2, 0, 4)?.softplus().add_scalar(bias);
            cov.push(Var::concat_last(&[scales, raw.slice(2, 4, N_PARAMS)?])?);
        }
        let pooled = decoded.mean(0)?.mean(0)?.reshape(&[1, self.cfg.d_model])?;
        let logits = self
            .heads
            .mode
            .forward(cx, pooled)?
            .reshape(&[self.cfg.n_modes])?;
        Ok(PredictionVars {
            traj,
            cov,
            logits,
            ego_index: ego,
        })
    }

    /// Full forward pass over the model's `t_f` steps; the sample may have
    /// a shorter future. `graph` is required unless the spatial encoder is
    /// disabled, in which case it is ignored.
    pub fn forward<'t>(
        &self,
        cx: &Ctx<'t>,
        sample: &SceneSample,
        graph: Option<&SceneGraph>,
    ) -> Result<PredictionVars<'t>> {
        if sample.t_f() > self.cfg.t_f {
            return Err(Error::Validation(format!(
                "sample has T_f = {}, model predicts {}",
                sample.t_f(),
                self.cfg.t_f
            )));
        }
        let temporal = self.temporal_encode(cx, sample)?;
        let spatial = match (&self.spatial, graph) {
            (None, _) => None,
            (Some(_), Some(g)) => self.spatial_encode(cx, g)?,
            (Some(_), None) => return Err(Error::Validation("spatial encoder needs a scene graph".into())),
        };
        let t_h = sample.t_h();
        let hv: Vec<bool> = (0..sample.n_agents() * t_h)
            .map(|i| sample.valid(i / t_h, i % t_h))
            .collect();
        let decoded = self.decode(cx, temporal, spatial, &hv)?;
        self.predict(cx, decoded, sample)
    }

    /// Inference without gradient bookkeeping beyond one throwaway tape.
    pub fn infer(&self, sample: &SceneSample, graph: Option<&SceneGraph>) -> Result<PredictionOutput> {
        let tape = Tape::new();
        let out = self.forward(&self.ctx(&tape), sample, graph)?.to_output()?;
        if !out.traj.is_finite() || !out.cov_params.is_finite() || !out.mode_logits.is_finite() {
            return Err(Error::Numeric("non-finite model output".into()));
        }
        Ok(out)
    }
}

fn embed_nodes<'t>(cx: &Ctx<'t>, agent_in: &Linear, road_in: &Linear, g: &SceneGraph) -> Result<Var<'t>> {
    let agents = agent_in.forward(cx, cx.constant(g.agent_feat.clone()))?;
    if g.n_road == 0 {
        return Ok(agents);
    }
    let road = road_in.forward(cx, cx.constant(g.road_feat.clone()))?;
    Var::concat(&[agents, road], 0)
}

/// `h_v + Σ_{(u,v)} relu(h_u + e_uv)`: the pre-MLP half of a GIN layer.
pub fn gin_aggregate<'t>(h: Var<'t>, edge_embed: Var<'t>, src: &[usize], dst: &[usize]) -> Result<Var<'t>> {
    if src.is_empty() {
        return Ok(h);
    }
    let n = h.shape()[0];
    let msg = h.gather_rows(src)?.add(edge_embed)?.relu();
    h.add(msg.scatter_add_rows(dst, n)?)
}

/// Current position plus `speed·(cos, sin)·t` for each future step.
fn cv_rollout(sample: &SceneSample, t_f: usize) -> Tensor {
    let a = sample.n_agents();
    let t = sample.t_h() - 1;
    let mut out = Tensor::zeros(&[a, t_f, 2]);
    for i in 0..a {
        let h = |k| sample.history.get(&[i, t, k]);
        let (x, y, c, s, v) = (h(0), h(1), h(2), h(3), h(4));
        for k in 0..t_f {
            let dt = (k + 1) as f64 * DT;
            out.set(&[i, k, 0], x + v * c * dt);
            out.set(&[i, k, 1], y + v * s * dt);
        }
    }
    out
}

impl DecoderBlock {
    /// `x [A, T_f, d]`, `temporal [A, T_h, d]`, `spatial [A, d]`.
    pub fn forward<'t>(
        &self,
        cx: &Ctx<'t>,
        x: Var<'t>,
        temporal: Var<'t>,
        spatial: Option<Var<'t>>,
        history_valid: &[bool],
    ) -> Result<Var<'t>> {
        let a = x.shape()[0];
        let d = x.shape()[2];
        let y = self.self_attn.forward(cx, x, x, None)?;
        let mut x = self.ln_self.forward(cx, x.add(y)?)?;
        if let (Some((attn, ln)), Some(s)) = (&self.spatial, spatial) {
            let kv = s.reshape(&[a, 1, d])?;
            let y = attn.forward(cx, x, kv, None)?;
            x = ln.forward(cx, x.add(y)?)?;
        }
        let y = self.temporal_attn.forward(cx, x, temporal, Some(history_valid))?;
        x = self.ln_temporal.forward(cx, x.add(y)?)?;
        let y = self.ff.forward(cx, x)?;
        self.ln_ff.forward(cx, x.add(y)?)
    }
}
