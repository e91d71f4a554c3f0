use mapformer_core::diffcore::{gradcheck, ParamStore, Tape, Tensor};
use mapformer_core::model::{
    gin_aggregate, scene_loss, Ctx, LossConfig, MapFormer, ModelConfig, MultiHeadAttention, SaiEnc,
};
use mapformer_core::scenedata::{SceneSample, AGENT_FEATURES};
use mapformer_core::scenegraph::{attach_agents, EdgeType, NodeKind, RoadGraph, SceneGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_sample(a: usize, t_h: usize, t_f: usize, seed: u64) -> SceneSample {
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
        agent_ids: (0..a as i64).map(|i| 10 + i).collect(),
        history,
        future_gt: future,
        valid_mask: vec![true; a * (t_h + t_f)],
        ego_index: 0,
        map_ref: String::new(),
        anchor_frame: 100,
        origin: [0.0, 0.0],
    }
}

fn toy_road(n: usize) -> RoadGraph {
    RoadGraph {
        node_ids: (0..n as i64).collect(),
        node_pos: (0..n).map(|k| [k as f64 * 2.0 - 4.0, 1.0]).collect(),
        node_kind: vec![NodeKind::Ring; n],
        edges: (1..n).map(|k| (k - 1, k)).collect(),
    }
}

fn cfg(d: usize, t_f: usize, saienc: SaiEnc) -> ModelConfig {
    ModelConfig {
        d_model: d,
        n_heads: 4,
        n_dec: 2,
        n_gnn: 2,
        n_modes: 3,
        saienc,
        t_f,
        sigma_bias: 0.05,
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let r = t.shape()[0];
    t.data().chunks(t.numel() / r).map(|c| c.to_vec()).collect()
}

#[test]
fn temporal_shape_and_agent_independence() {
    let m = MapFormer::new(&cfg(32, 5, SaiEnc::None), 1).unwrap();
    let s = toy_sample(2, 5, 5, 3);
    let tape = Tape::new();
    let out = m.temporal_encode(&m.ctx(&tape), &s).unwrap();
    assert_eq!(out.shape(), vec![2, 5, 32]);

    // Swapping agents swaps rows.
    let mut p = s.clone();
    let w = 5 * AGENT_FEATURES;
    let mut h = s.history.data().to_vec();
    h.rotate_left(w);
    p.history = Tensor::new(vec![2, 5, AGENT_FEATURES], h).unwrap();
    let tape = Tape::new();
    let out_p = m.temporal_encode(&m.ctx(&tape), &p).unwrap().value();
    let (a, b) = (rows(&out.value()), rows(&out_p));
    assert_eq!(a[0], b[1]);
    assert_eq!(a[1], b[0]);
}

#[test]
fn zeroing_one_agent_changes_only_its_row() {
    let m = MapFormer::new(&cfg(16, 5, SaiEnc::None), 2).unwrap();
    let s = toy_sample(4, 5, 5, 4);
    let mut z = s.clone();
    for t in 0..5 {
        for k in 0..AGENT_FEATURES {
            z.history.set(&[2, t, k], 0.0);
        }
    }
    let enc = |s: &SceneSample| {
        let tape = Tape::new();
        rows(&m.temporal_encode(&m.ctx(&tape), s).unwrap().value())
    };
    let (a, b) = (enc(&s), enc(&z));
    for i in 0..4 {
        assert_eq!(a[i] == b[i], i != 2, "row {i}");
    }
}

#[test]
fn gin_aggregate_isolated_node_is_identity() {
    let tape = Tape::new();
    let h = tape.leaf(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.3 - 1.0));
    let e = tape.leaf(Tensor::zeros(&[1, 4]));
    // Only edge 0 → 1; node 2 is isolated.
    let out = gin_aggregate(h, e, &[0], &[1]).unwrap().value();
    assert_eq!(rows(&out)[2], rows(&h.value())[2]);
    assert_eq!(rows(&out)[0], rows(&h.value())[0]);
}

#[test]
fn gin_aggregate_star_sums_identical_neighbors() {
    let tape = Tape::new();
    let (center, leaf) = ([0.1, 0.2, -0.3], [0.5, -1.0, 2.0]);
    let nodes = |n: usize| {
        tape.constant(Tensor::from_fn(&[n + 1, 3], |i| {
            if i < 3 {
                center[i]
            } else {
                leaf[i % 3]
            }
        }))
    };
    let one = gin_aggregate(nodes(1), tape.constant(Tensor::zeros(&[1, 3])), &[1], &[0])
        .unwrap()
        .value();
    let three = gin_aggregate(
        nodes(3),
        tape.constant(Tensor::zeros(&[3, 3])),
        &[1, 2, 3],
        &[0, 0, 0],
    )
    .unwrap()
    .value();
    for k in 0..3 {
        let single = one.get(&[0, k]) - center[k];
        let triple = three.get(&[0, k]) - center[k];
        assert!((triple - 3.0 * single).abs() < 1e-12);
    }
}

/// Plain-loop GIN layer on a 4-node graph: two agents, two road nodes.
#[test]
fn gnn_one_layer_matches_dense_oracle() {
    let c = ModelConfig {
        n_gnn: 1,
        d_model: 8,
        n_heads: 2,
        ..cfg(8, 5, SaiEnc::Gnn)
    };
    let m = MapFormer::new(&c, 5).unwrap();
    let mut s = toy_sample(2, 5, 5, 6);
    for i in 0..2 {
        s.history.set(&[i, 4, 0], i as f64 * 2.0 - 3.0);
        s.history.set(&[i, 4, 1], 1.5);
    }
    let g = attach_agents(&toy_road(2), &s);
    assert_eq!(g.n_nodes(), 4);
    let tape = Tape::new();
    let got = m.spatial_encode(&m.ctx(&tape), &g).unwrap().unwrap().value();

    let ps = &m.params;
    let names: std::collections::HashMap<&str, &Tensor> = ps.iter().collect();
    let lin = |x: &[f64], pre: &str| -> Vec<f64> {
        let (w, b) = (names[&*format!("{pre}.w")], names[&*format!("{pre}.b")]);
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        (0..dout)
            .map(|o| b.data()[o] + (0..din).map(|i| x[i] * w.get(&[i, o])).sum::<f64>())
            .collect()
    };
    let mut h: Vec<Vec<f64>> = Vec::new();
    for i in 0..2 {
        h.push(lin(&rows(&g.agent_feat)[i], "gnn.agent_in"));
    }
    for r in 0..2 {
        h.push(lin(&rows(&g.road_feat)[r], "gnn.road_in"));
    }
    // Dense adjacency with per-edge embeddings.
    let mut adj = vec![vec![None; 4]; 4];
    for (e, &(u, v)) in g.edges.iter().enumerate() {
        adj[u][v] = Some(lin(&rows(&g.edge_feat)[e], "gnn.0.edge"));
    }
    for v in 0..2 {
        let mut agg = h[v].clone();
        for u in 0..4 {
            if let Some(emb) = &adj[u][v] {
                for k in 0..8 {
                    agg[k] += (h[u][k] + emb[k]).max(0.0);
                }
            }
        }
        let hidden: Vec<f64> = lin(&agg, "gnn.0.mlp.0").into_iter().map(|x| x.max(0.0)).collect();
        let y = lin(&hidden, "gnn.0.mlp.1");
        let mean = y.iter().sum::<f64>() / 8.0;
        let var = y.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
        for k in 0..8 {
            let want = (y[k] - mean) / (var + 1e-5).sqrt() * names["gnn.0.ln.gain"].data()[k]
                + names["gnn.0.ln.bias"].data()[k];
            assert!((got.get(&[v, k]) - want).abs() < 1e-12, "node {v} ch {k}");
        }
    }
}

/// A chain road graph r1 → r0 → agent 0 needs two layers to carry r1's
/// features to the agent.
#[test]
fn gnn_receptive_field_grows_one_hop_per_layer() {
    let graph = |r1: f64| SceneGraph {
        n_agents: 2,
        n_road: 2,
        agent_feat: Tensor::from_fn(&[2, AGENT_FEATURES], |i| i as f64 * 0.1),
        road_feat: Tensor::from_fn(&[2, 6], |i| if i >= 6 { r1 } else { 0.2 }),
        node_pos: vec![[0.0; 2]; 4],
        edges: vec![(0, 1), (1, 0), (2, 0), (3, 2)],
        edge_type: vec![
            EdgeType::AgentAgent,
            EdgeType::AgentAgent,
            EdgeType::RoadAgent,
            EdgeType::RoadRoad,
        ],
        edge_feat: Tensor::zeros(&[4, 5]),
    };
    for (layers, reaches) in [(1, false), (2, true)] {
        let c = ModelConfig {
            n_gnn: layers,
            ..cfg(8, 5, SaiEnc::Gnn)
        };
        let m = MapFormer::new(&c, 9).unwrap();
        let enc = |g: &SceneGraph| {
            let tape = Tape::new();
            rows(&m.spatial_encode(&m.ctx(&tape), g).unwrap().unwrap().value())
        };
        let (a, b) = (enc(&graph(0.0)), enc(&graph(3.0)));
        assert_eq!(a[0] != b[0], reaches, "layers = {layers}");
    }
}

/// Dense per-head softmax(QKᵀ/√d_h)V on 5 tokens.
#[test]
fn attention_matches_dense_oracle() {
    let (d, heads, n) = (8, 2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ps = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut ps, "a", d, heads, &mut rng);
    let x = Tensor::from_fn(&[1, n, d], |_| rng.random_range(-1.0..1.0));
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &ps);
    let xv = tape.constant(x.clone());
    let got = mha.forward(&cx, xv, xv, None).unwrap().value();

    let proj = |l: &mapformer_core::model::Linear, v: &[f64]| -> Vec<f64> {
        let (w, b) = (ps.get(l.w), ps.get(l.b));
        (0..d)
            .map(|o| b.data()[o] + (0..d).map(|i| v[i] * w.get(&[i, o])).sum::<f64>())
            .collect()
    };
    let toks: Vec<Vec<f64>> = x.data().chunks(d).map(|c| c.to_vec()).collect();
    let q: Vec<_> = toks.iter().map(|t| proj(&mha.q, t)).collect();
    let k: Vec<_> = toks.iter().map(|t| proj(&mha.k, t)).collect();
    let v: Vec<_> = toks.iter().map(|t| proj(&mha.v, t)).collect();
    let dh = d / heads;
    for i in 0..n {
        let mut concat = vec![0.0; d];
        for hd in 0..heads {
            let r = hd * dh..(hd + 1) * dh;
            let s: Vec<f64> = (0..n)
                .map(|j| r.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in r.clone() {
                concat[c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
        let out = proj(&mha.o, &concat);
        for c in 0..d {
            assert!((got.get(&[0, i, c]) - out[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_encoder_single_agent_and_duplicate_road_node() {
    let m = MapFormer::new(&cfg(8, 5, SaiEnc::Attention), 3).unwrap();
    let lone = |f: f64| SceneGraph {
        n_agents: 1,
        n_road: 0,
        agent_feat: Tensor::full(&[1, AGENT_FEATURES], f),
        road_feat: Tensor::zeros(&[0, 6]),
        node_pos: vec![[0.0; 2]],
        edges: vec![],
        edge_type: vec![],
        edge_feat: Tensor::zeros(&[0, 5]),
    };
    let enc = |g: &SceneGraph| {
        let tape = Tape::new();
        m.spatial_encode(&m.ctx(&tape), g).unwrap().unwrap().value()
    };
    assert_eq!(enc(&lone(0.3)), enc(&lone(0.3)));
    assert_ne!(enc(&lone(0.3)), enc(&lone(0.4)));

    let s = toy_sample(2, 5, 5, 1);
    let road = toy_road(3);
    let mut dup = road.clone();
    dup.node_ids.push(99);
    dup.node_pos.push(road.node_pos[1]);
    dup.node_kind.push(NodeKind::Ring);
    let (a, b) = (enc(&attach_agents(&road, &s)), enc(&attach_agents(&dup, &s)));
    assert_ne!(a, b);
    assert!(b.is_finite());
}

#[test]
fn decoder_shapes_and_block_composition() {
    let c = cfg(16, 7, SaiEnc::Gnn);
    let m = MapFormer::new(&c, 4).unwrap();
    let s = toy_sample(3, 5, 7, 2);
    let g = attach_agents(&toy_road(3), &s);
    let tape = Tape::new();
    let cx = m.ctx(&tape);
    let temporal = m.temporal_encode(&cx, &s).unwrap();
    let spatial = m.spatial_encode(&cx, &g).unwrap();
    assert_eq!(spatial.unwrap().shape(), vec![3, 16]);
    let valid = vec![true; 15];
    let out = m.decode(&cx, temporal, spatial, &valid).unwrap();
    assert_eq!(out.shape(), vec![3, 7, 16]);

    let mut x = cx.p(m.queries).expand(3);
    for block in &m.decoder {
        x = block.forward(&cx, x, temporal, spatial, &valid).unwrap();
    }
    assert_eq!(x.value(), out.value());
}

#[test]
fn no_spatial_encoder_ignores_the_map() {
    let m = MapFormer::new(&cfg(16, 5, SaiEnc::None), 4).unwrap();
    let s = toy_sample(3, 5, 5, 2);
    let a = m.infer(&s, None).unwrap();
    let b = m.infer(&s, Some(&attach_agents(&toy_road(4), &s))).unwrap();
    let c = m.infer(&s, Some(&attach_agents(&toy_road(9), &s))).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn prediction_shapes() {
    let m = MapFormer::new(&cfg(16, 6, SaiEnc::Attention), 8).unwrap();
    let s = toy_sample(4, 5, 6, 8);
    let out = m.infer(&s, Some(&attach_agents(&toy_road(3), &s))).unwrap();
    assert_eq!(out.traj.shape(), &[3, 4, 6, 2]);
    assert_eq!(out.cov_params.shape(), &[3, 3, 6, 10]);
    assert_eq!(out.mode_logits.shape(), &[3]);
    for chunk in out.cov_params.data().chunks(10) {
        assert!(chunk[..4].iter().all(|&s| s > 0.05));
    }
}

#[test]
fn single_agent_is_rejected() {
    let m = MapFormer::new(&cfg(16, 5, SaiEnc::None), 8).unwrap();
    let mut s = toy_sample(2, 5, 5, 8);
    s.agent_ids.truncate(1);
    s.history = Tensor::zeros(&[1, 5, AGENT_FEATURES]);
    s.future_gt = Tensor::zeros(&[1, 5, 2]);
    s.valid_mask.truncate(10);
    assert!(m.infer(&s, None).is_err());
}

fn set_cov_head(m: &mut MapFormer, scale_bias: f64) {
    for mlp in &m.heads.cov {
        for l in &mlp.layers {
            m.params.get_mut(l.w).data_mut().fill(0.0);
            m.params.get_mut(l.b).data_mut().fill(0.0);
        }
        let last = mlp.layers.last().unwrap();
        m.params.get_mut(last.b).data_mut()[..4].fill(scale_bias);
    }
}

#[test]
fn zero_covariance_head_gives_ln2_plus_bias() {
    let mut m = MapFormer::new(&cfg(16, 5, SaiEnc::None), 8).unwrap();
    set_cov_head(&mut m, 0.0);
    let out = m.infer(&toy_sample(3, 5, 5, 1), None).unwrap();
    for chunk in out.cov_params.data().chunks(10) {
        for &s in &chunk[..4] {
            assert!((s - (2f64.ln() + 0.05)).abs() < 1e-15);
        }
        assert!(chunk[4..].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn very_negative_scale_logit_hits_the_bias() {
    let mut m = MapFormer::new(&cfg(16, 5, SaiEnc::None), 8).unwrap();
    set_cov_head(&mut m, -1000.0);
    let out = m.infer(&toy_sample(3, 5, 5, 1), None).unwrap();
    for chunk in out.cov_params.data().chunks(10) {
        assert!(chunk[..4].iter().all(|&s| s == 0.05));
    }
}

#[test]
fn checkpoint_roundtrip_and_mismatch() {
    let m = MapFormer::new(&cfg(16, 5, SaiEnc::Gnn), 8).unwrap();
    let s = toy_sample(3, 5, 5, 1);
    let g = attach_agents(&toy_road(3), &s);
    let bytes = m.to_checkpoint().to_bytes();
    let back = MapFormer::from_checkpoint(&mapformer_core::diffcore::Checkpoint::from_bytes(&bytes).unwrap())
        .unwrap();
    assert_eq!(m.infer(&s, Some(&g)).unwrap(), back.infer(&s, Some(&g)).unwrap());

    let mut ck = m.to_checkpoint();
    ck.meta = serde_json::to_string(&cfg(32, 5, SaiEnc::Gnn)).unwrap();
    assert!(MapFormer::from_checkpoint(&ck).is_err());
}

#[test]
fn zero_ce_weight_leaves_mode_head_without_gradient() {
    let m = MapFormer::new(&cfg(16, 5, SaiEnc::None), 8).unwrap();
    let s = toy_sample(3, 5, 5, 1);
    for (w, zero) in [(0.0, true), (0.5, false)] {
        let tape = Tape::new();
        let cx = m.ctx(&tape);
        let pred = m.forward(&cx, &s, None).unwrap();
        let loss = scene_loss(
            &pred,
            &s,
            &LossConfig {
                wta: true,
                mode_ce_weight: w,
            },
        )
        .unwrap();
        let g = tape.backward(loss.total).unwrap().params(&m.params);
        let gw = &g[m.heads.mode.w.index()];
        assert_eq!(gw.data().iter().all(|&x| x == 0.0), zero);
    }
}

/// Rotating which head sits in which slot only relabels the winner.
#[test]
fn wta_loss_is_mode_permutation_invariant() {
    let m = MapFormer::new(&cfg(16, 5, SaiEnc::None), 8).unwrap();
    let s = toy_sample(3, 5, 5, 1);
    let eval = |m: &MapFormer| {
        let tape = Tape::new();
        let pred = m.forward(&m.ctx(&tape), &s, None).unwrap();
        let l = scene_loss(
            &pred,
            &s,
            &LossConfig {
                wta: true,
                mode_ce_weight: 0.0,
            },
        )
        .unwrap();
        (l.total.item(), l.winner)
    };
    let mut p = m.clone();
    p.heads.traj.rotate_left(1);
    p.heads.cov.rotate_left(1);
    let ((la, wa), (lb, wb)) = (eval(&m), eval(&p));
    assert_eq!(la, lb);
    assert_eq!((wb + 1) % 3, wa);
}

#[test]
fn mixture_loss_matches_hand_logsumexp() {
    let m = MapFormer::new(&cfg(16, 5, SaiEnc::None), 8).unwrap();
    let s = toy_sample(3, 5, 5, 1);
    let tape = Tape::new();
    let pred = m.forward(&m.ctx(&tape), &s, None).unwrap();
    let l = scene_loss(
        &pred,
        &s,
        &LossConfig {
            wta: false,
            mode_ce_weight: 0.0,
        },
    )
    .unwrap();
    let probs = pred.to_output().unwrap().mode_probs();
    let want = -probs
        .iter()
        .zip(&l.per_mode)
        .map(|(p, lm)| p * (-(lm - l.per_mode[l.winner])).exp())
        .sum::<f64>()
        .ln()
        + l.per_mode[l.winner];
    assert!((l.total.item() - want).abs() < 1e-9 * want.abs().max(1.0));
}

#[test]
fn small_model_gradients_match_finite_differences() {
    let c = ModelConfig {
        n_modes: 2,
        n_dec: 1,
        n_gnn: 1,
        ..cfg(8, 3, SaiEnc::Gnn)
    };
    let m = MapFormer::new(&c, 21).unwrap();
    let s = toy_sample(3, 4, 3, 5);
    let g = attach_agents(&toy_road(3), &s);
    let lc = LossConfig {
        wta: true,
        mode_ce_weight: 0.7,
    };
    let r = gradcheck::check_params(&m.params, 1e-6, |tape, ps| {
        let cx = Ctx::new(tape, ps);
        let pred = m.forward(&cx, &s, Some(&g))?;
        Ok(scene_loss(&pred, &s, &lc)?.total)
    })
    .unwrap();
    assert!(r.worst() < 1e-4, "{:?}", r.per_tensor);
}
