use std::collections::BTreeSet;

use mapformer_core::diffcore::Tensor;
use mapformer_core::scenedata::{SceneSample, AGENT_FEATURES};
use mapformer_core::scenegraph::{attach_agents, NodeKind, RoadGraph, ATTACH_RADIUS};
use proptest::prelude::*;

fn sample_at(positions: &[[f64; 2]], origin: [f64; 2]) -> SceneSample {
    let a = positions.len();
    let mut history = Tensor::zeros(&[a, 5, AGENT_FEATURES]);
    for (i, p) in positions.iter().enumerate() {
        for t in 0..5 {
            history.set(&[i, t, 0], p[0] - origin[0]);
            history.set(&[i, t, 1], p[1] - origin[1]);
        }
    }
    SceneSample {
        agent_ids: (0..a as i64).collect(),
        history,
        future_gt: Tensor::zeros(&[a, 3, 2]),
        valid_mask: vec![true; a * 8],
        ego_index: 0,
        map_ref: String::new(),
        anchor_frame: 0,
        origin,
    }
}

fn road(points: &[[f64; 2]]) -> RoadGraph {
    RoadGraph {
        node_ids: (0..points.len() as i64).collect(),
        node_pos: points.to_vec(),
        node_kind: vec![NodeKind::Ring; points.len()],
        edges: (1..points.len()).map(|i| (i - 1, i)).collect(),
    }
}

#[test]
fn three_agents_six_edges() {
    let g = attach_agents(
        &road(&[[100.0, 100.0]]),
        &sample_at(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [0.0, 0.0]),
    );
    assert_eq!(g.agent_agent_edges().count(), 6);
}

#[test]
fn radius_boundary() {
    let r = road(&[[5.01, 0.0], [20.0, 0.0]]);
    let g = attach_agents(&r, &sample_at(&[[0.0, 0.0], [20.0, 4.0]], [0.0, 0.0]));
    let edges: Vec<_> = g.agent_road_edges().collect();
    assert_eq!(edges, vec![(1, 1)]);
    // exactly at the radius still connects
    let r = road(&[[ATTACH_RADIUS, 0.0]]);
    let g = attach_agents(&r, &sample_at(&[[0.0, 0.0], [50.0, 0.0]], [0.0, 0.0]));
    assert_eq!(g.agent_road_edges().count(), 1);
}

fn brute_force(road: &RoadGraph, agents: &[[f64; 2]]) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for (i, a) in agents.iter().enumerate() {
        for (v, p) in road.node_pos.iter().enumerate() {
            let d2 = (a[0] - p[0]).powi(2) + (a[1] - p[1]).powi(2);
            if d2.sqrt() <= ATTACH_RADIUS {
                out.insert((i, v));
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn agent_road_edges_match_exhaustive_scan(
        agents in prop::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 2..8),
        nodes in prop::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 1..40),
        shift in (-1e3f64..1e3, -1e3f64..1e3),
    ) {
        let agents: Vec<[f64; 2]> = agents.into_iter().map(|(x, y)| [x, y]).collect();
        let nodes: Vec<[f64; 2]> = nodes.into_iter().map(|(x, y)| [x, y]).collect();
        let r = road(&nodes);
        let g = attach_agents(&r, &sample_at(&agents, [0.0, 0.0]));
        let got: BTreeSet<_> = g.agent_road_edges().collect();
        prop_assert_eq!(&got, &brute_force(&r, &agents));
        let a = agents.len();
        prop_assert_eq!(g.agent_agent_edges().count(), a * (a - 1));

        // Rigid translation of everything leaves the edge set unchanged.
        let moved: Vec<[f64; 2]> = nodes.iter().map(|p| [p[0] + shift.0, p[1] + shift.1]).collect();
        let agents_moved: Vec<[f64; 2]> = agents.iter().map(|p| [p[0] + shift.0, p[1] + shift.1]).collect();
        let g2 = attach_agents(&road(&moved), &sample_at(&agents_moved, [shift.0, shift.1]));
        let got2: BTreeSet<_> = g2.agent_road_edges().collect();
        prop_assert_eq!(got2, got);
    }

    #[test]
    fn relabeling_agents_permutes_edges(
        agents in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..6),
        nodes in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..20),
    ) {
        let agents: Vec<[f64; 2]> = agents.into_iter().map(|(x, y)| [x, y]).collect();
        let nodes: Vec<[f64; 2]> = nodes.into_iter().map(|(x, y)| [x, y]).collect();
        let r = road(&nodes);
        let a = agents.len();
        let perm: Vec<usize> = (0..a).rev().collect(); // new index i holds old agent perm[i]
        let permuted: Vec<[f64; 2]> = perm.iter().map(|&k| agents[k]).collect();
        let g = attach_agents(&r, &sample_at(&agents, [0.0, 0.0]));
        let h = attach_agents(&r, &sample_at(&permuted, [0.0, 0.0]));
        let mut inv = vec![0; a];
        for (i, &k) in perm.iter().enumerate() { inv[k] = i; }
        let mapped: BTreeSet<_> = g.agent_road_edges().map(|(i, v)| (inv[i], v)).collect();
        let direct: BTreeSet<_> = h.agent_road_edges().collect();
        prop_assert_eq!(mapped, direct);
        for i in 0..a {
            for k in 0..AGENT_FEATURES {
                prop_assert_eq!(h.agent_feat.get(&[inv[i], k]), g.agent_feat.get(&[i, k]));
            }
        }
    }
}
