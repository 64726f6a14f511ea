//! End-to-end behavior: train on a synthetic scene, run fusion, evaluate,
//! and check the invariances that hold across the whole pipeline.

use ciae_core::fusion::{prediction_from_files, prediction_to_files};
use ciae_core::loss::LossConfig;
use ciae_core::scene::{generate_scene, SceneGenConfig};
use ciae_core::trainer::{train, TrainConfig};
use ciae_core::{
    assign, build_queries, default_min_stuff_area, evaluate, simulate_proposals, OobScore,
    PanopticPrediction, ProposalSimConfig,
};

fn convergence_scene(seed: u64) -> ciae_core::PanopticScene {
    generate_scene(&SceneGenConfig {
        height: 32,
        width: 32,
        num_stuff_regions: 3,
        num_things: 4,
        num_thing_categories: 3,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn train_on(scene: &ciae_core::PanopticScene, iters: usize, seed: u64) -> (ciae_core::EmbeddingMap, ciae_core::MemoryBank) {
    let cfg = TrainConfig {
        total_iters: iters,
        dim: 8,
        seed,
        log_every: 100,
        ..Default::default()
    };
    let (map, bank, _) = train(std::slice::from_ref(scene), &cfg, &LossConfig::default()).unwrap();
    (map, bank)
}

#[test]
fn trained_scene_reaches_high_pq_with_clean_proposals() {
    let scene = convergence_scene(1);
    let (map, bank) = train_on(&scene, 2000, 11);
    let view = map.normalize().unwrap();
    let proposals = simulate_proposals(&scene, &ProposalSimConfig::default()).unwrap();
    let queries = build_queries(&view, &map, &proposals, &bank, None, false).unwrap();
    let pred = assign(
        &view,
        &queries,
        default_min_stuff_area(32, 32),
        OobScore::Zero,
    )
    .unwrap();
    let report = evaluate(&pred, &scene).unwrap();
    assert!(
        report.pq > 0.8,
        "single-seed sanity run should segment well, pq = {}",
        report.pq
    );
}

#[test]
fn rescaled_parameters_change_nothing() {
    let scene = convergence_scene(2);
    let (map, bank) = train_on(&scene, 300, 5);
    let mut scaled = map.clone();
    scaled.apply_update(|p| p.iter_mut().for_each(|v| *v *= 41.7));

    // Loss value is scale invariant.
    let cfg = LossConfig::default();
    let a = ciae_core::ciae_loss(&map, &scene, &bank, &cfg).unwrap();
    let b = ciae_core::ciae_loss(&scaled, &scene, &bank, &cfg).unwrap();
    assert!((a.value - b.value).abs() < 1e-9);

    // Assignments are identical.
    let proposals = simulate_proposals(&scene, &ProposalSimConfig::default()).unwrap();
    let (va, vb) = (map.normalize().unwrap(), scaled.normalize().unwrap());
    let qa = build_queries(&va, &map, &proposals, &bank, None, false).unwrap();
    let qb = build_queries(&vb, &scaled, &proposals, &bank, None, false).unwrap();
    let min_area = default_min_stuff_area(32, 32);
    let pa = assign(&va, &qa, min_area, OobScore::Zero).unwrap();
    let pb = assign(&vb, &qb, min_area, OobScore::Zero).unwrap();
    assert_eq!(pa.assignment(), pb.assignment());
}

#[test]
fn oracle_queries_do_not_lose_to_seed_points_under_noise() {
    let scene = convergence_scene(3);
    let (map, bank) = train_on(&scene, 800, 9);
    let view = map.normalize().unwrap();
    let noisy = ProposalSimConfig {
        center_jitter: 0.15,
        size_jitter: 0.15,
        seed: 21,
        ..Default::default()
    };
    let proposals = simulate_proposals(&scene, &noisy).unwrap();
    let min_area = default_min_stuff_area(32, 32);

    let standard = {
        let q = build_queries(&view, &map, &proposals, &bank, None, false).unwrap();
        evaluate(&assign(&view, &q, min_area, OobScore::Zero).unwrap(), &scene).unwrap()
    };
    let oracle = {
        let q = build_queries(&view, &map, &proposals, &bank, Some(&scene), true).unwrap();
        evaluate(&assign(&view, &q, min_area, OobScore::Zero).unwrap(), &scene).unwrap()
    };
    assert!(
        oracle.pq >= standard.pq - 1e-12,
        "oracle pq {} vs standard pq {}",
        oracle.pq,
        standard.pq
    );
}

#[test]
fn gt_to_prediction_round_trip_evaluates_to_one() {
    let scene = convergence_scene(4);
    let pred = PanopticPrediction::from_scene(&scene);
    let dir = std::env::temp_dir().join("ciae_pipeline_pred_rt");
    prediction_to_files(&pred, &dir).unwrap();
    let back = prediction_from_files(&dir).unwrap();
    let report = evaluate(&back, &scene).unwrap();
    assert!((report.pq - 1.0).abs() < 1e-12);
    assert!((report.miou.unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn deterministic_end_to_end() {
    let scene = convergence_scene(5);
    let run = || {
        let (map, bank) = train_on(&scene, 150, 3);
        let view = map.normalize().unwrap();
        let proposals = simulate_proposals(
            &scene,
            &ProposalSimConfig {
                center_jitter: 0.1,
                size_jitter: 0.1,
                seed: 8,
                ..Default::default()
            },
        )
        .unwrap();
        let q = build_queries(&view, &map, &proposals, &bank, None, false).unwrap();
        let pred = assign(&view, &q, 7, OobScore::Zero).unwrap();
        (map, pred)
    };
    let (m1, p1) = run();
    let (m2, p2) = run();
    assert_eq!(m1.prenorm(), m2.prenorm());
    assert_eq!(p1, p2);
}
