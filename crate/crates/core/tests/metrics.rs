mod common;

use common::MetricCase;
use mapformer_core::diffcore::Tensor;
use mapformer_core::metrics::{constant_velocity_baseline, min_sade, min_sfde, smr, SceneView};
use mapformer_core::scenedata::{SceneSample, AGENT_FEATURES};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensors(c: &MetricCase) -> (Tensor, Tensor) {
    (
        Tensor::new(vec![c.m, c.a, c.t, 2], c.pred.clone()).unwrap(),
        Tensor::new(vec![c.a, c.t, 2], c.gt.clone()).unwrap(),
    )
}

fn sample_with(pos: &[[f64; 2]], heading: &[f64], speed: &[f64], t_f: usize) -> SceneSample {
    let a = pos.len();
    let mut history = Tensor::zeros(&[a, 5, AGENT_FEATURES]);
    for i in 0..a {
        for (k, v) in [pos[i][0], pos[i][1], heading[i].cos(), heading[i].sin(), speed[i]]
            .into_iter()
            .enumerate()
        {
            history.set(&[i, 4, k], v);
        }
    }
    SceneSample {
        agent_ids: (0..a as i64).collect(),
        history,
        future_gt: Tensor::zeros(&[a, t_f, 2]),
        valid_mask: vec![true; a * (5 + t_f)],
        ego_index: 0,
        map_ref: String::new(),
        anchor_frame: 4,
        origin: [0.0; 2],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_equal_loop_oracle(seed in 0u64..u64::MAX, masked in any::<bool>()) {
        let c = MetricCase::random(&mut ChaCha8Rng::seed_from_u64(seed), 6, 8, 25, masked);
        let (p, g) = tensors(&c);
        let valid = Some(c.valid.as_slice());
        prop_assert_eq!(min_sade(&p, &g, valid).unwrap(), c.min_sade());
        prop_assert_eq!(min_sfde(&p, &g, valid).unwrap(), c.min_sfde());
        prop_assert_eq!(SceneView::new(&p, &g, valid).unwrap().is_miss(), c.miss());
    }

    #[test]
    fn appending_modes_never_increases_min(seed in 0u64..u64::MAX) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = MetricCase::random(&mut rng, 6, 5, 10, false);
        let extra = MetricCase::random(&mut rng, 1, 1, 1, false);
        let (p, g) = tensors(&c);
        let mut more = c.pred.clone();
        more.extend(c.pred[..c.a * c.t * 2].iter().map(|v| v + extra.gt[0]));
        let p2 = Tensor::new(vec![c.m + 1, c.a, c.t, 2], more).unwrap();
        prop_assert!(min_sade(&p2, &g, None).unwrap() <= min_sade(&p, &g, None).unwrap());
        prop_assert!(min_sfde(&p2, &g, None).unwrap() <= min_sfde(&p, &g, None).unwrap());
    }

    #[test]
    fn translation_invariance(seed in 0u64..u64::MAX, dx in -1e3f64..1e3, dy in -1e3f64..1e3) {
        let c = MetricCase::random(&mut ChaCha8Rng::seed_from_u64(seed), 4, 4, 10, false);
        let (p, g) = tensors(&c);
        let shift = |t: &Tensor| Tensor::from_fn(t.shape(), |i| t.data()[i] + if i % 2 == 0 { dx } else { dy });
        let (ps, gs) = (shift(&p), shift(&g));
        prop_assert!((min_sade(&p, &g, None).unwrap() - min_sade(&ps, &gs, None).unwrap()).abs() < 1e-9);
        prop_assert!((min_sfde(&p, &g, None).unwrap() - min_sfde(&ps, &gs, None).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn cv_baseline_matches_closed_form(x in -50f64..50.0, y in -50f64..50.0, h in -3.2f64..3.2, v in 0f64..20.0) {
        let out = constant_velocity_baseline(&sample_with(&[[x, y], [0.0, 0.0]], &[h, 0.0], &[v, 0.0], 25));
        for k in 0..25 {
            let t = 0.2 * (k + 1) as f64;
            prop_assert!((out.get(&[0, 0, k, 0]) - (x + v * h.cos() * t)).abs() < 1e-9);
            prop_assert!((out.get(&[0, 0, k, 1]) - (y + v * h.sin() * t)).abs() < 1e-9);
        }
    }
}

#[test]
fn single_mode_single_agent_is_plain_ade_fde() {
    let c = MetricCase::random(&mut ChaCha8Rng::seed_from_u64(3), 1, 1, 12, false);
    let (p, g) = tensors(&c);
    assert_eq!(min_sade(&p, &g, None).unwrap(), c.sade(0));
    assert_eq!(min_sfde(&p, &g, None).unwrap(), c.fde(0, 0).unwrap());
}

#[test]
fn cv_baseline_kinematics() {
    let out = constant_velocity_baseline(&sample_with(
        &[[1.0, 2.0], [3.0, -1.0]],
        &[0.0, 0.7],
        &[2.0, 0.0],
        15,
    ));
    for k in 0..15 {
        assert!((out.get(&[0, 0, k, 0]) - (1.0 + 0.4 * (k + 1) as f64)).abs() < 1e-12);
        assert_eq!(out.get(&[0, 1, k, 0]), 3.0);
        assert_eq!(out.get(&[0, 1, k, 1]), -1.0);
    }
}

#[test]
fn smr_counts_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cases: Vec<MetricCase> = (0..40)
        .map(|_| MetricCase::random(&mut rng, 3, 3, 6, false))
        .collect();
    let ts: Vec<(Tensor, Tensor)> = cases.iter().map(tensors).collect();
    let views: Vec<SceneView> = ts
        .iter()
        .map(|(p, g)| SceneView::new(p, g, None).unwrap())
        .collect();
    let want = cases.iter().filter(|c| c.miss()).count() as f64 / 40.0;
    assert_eq!(smr(&views).unwrap(), want);
}
