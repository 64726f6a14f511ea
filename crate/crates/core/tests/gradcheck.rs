//! Finite-difference verification of the analytic loss gradient, plus a
//! naive re-implementation of the objective that the fast path must agree
//! with.
//!
//! The oracle perturbs one pre-normalization parameter at a time and takes
//! central differences of the loss value with the query set frozen, which
//! matches the stop-gradient convention of the implementation.

use ciae_core::loss::{LossConfig, LossInputs, TopKScope};
use ciae_core::scene::{generate_scene, SceneGenConfig, VOID_ID};
use ciae_core::{
    linalg, DenseMatrix, EmbeddingMap, LabelSpace, MemoryBank, ThingShape,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

/// Central finite differences of `f` at `map`, one parameter at a time.
fn finite_difference_grad(
    map: &EmbeddingMap,
    f: &dyn Fn(&EmbeddingMap) -> f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; map.prenorm().len()];
    for j in 0..map.prenorm().len() {
        let mut plus = map.clone();
        plus.apply_update(|p| p[j] += FD_STEP);
        let mut minus = map.clone();
        minus.apply_update(|p| p[j] -= FD_STEP);
        grad[j] = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
    }
    grad
}

fn max_rel_error(analytic: &[f64], fd: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0f64, f64::max)
}

/// Straightforward re-implementation of the objective value: normalize,
/// measure distances, hinge, log, sort, select, weight, average. Kept
/// independent of the production code path.
fn naive_loss_value(
    map: &EmbeddingMap,
    pixel_to_query: &[u16],
    queries: &DenseMatrix,
    valid: Option<&[bool]>,
    weights: Option<&[f64]>,
    cfg: &LossConfig,
) -> f64 {
    let num_q = queries.rows();
    let n = pixel_to_query.iter().filter(|q| **q != VOID_ID).count();
    let mut all_terms: Vec<(f64, usize, usize)> = Vec::new();
    for (i, &a) in pixel_to_query.iter().enumerate() {
        if a == VOID_ID {
            continue;
        }
        let p = linalg::l2_normalize(map.pixel_flat(i)).unwrap();
        let d_pos = 1.0 - linalg::dot(&p, queries.row(a as usize));
        for k in 0..num_q {
            if k == a as usize {
                continue;
            }
            let ok = valid.map_or(true, |v| v[i * num_q + k]);
            let d_neg = if ok {
                1.0 - linalg::dot(&p, queries.row(k))
            } else {
                1.0
            };
            let l_prime = (d_pos - d_neg + cfg.margin).max(0.0);
            let l = -((1.0 - l_prime / (2.0 + cfg.margin)).max(cfg.clamp_eps)).ln();
            if l > 0.0 {
                all_terms.push((l, i, k));
            }
        }
    }
    let selected: Vec<(f64, usize, usize)> = match cfg.topk_scope {
        TopKScope::PerPixel => {
            let mut out = Vec::new();
            for (i, _) in pixel_to_query.iter().enumerate() {
                let mut mine: Vec<_> =
                    all_terms.iter().filter(|(_, pi, _)| *pi == i).collect();
                mine.sort_by(|s, t| t.0.total_cmp(&s.0).then(s.2.cmp(&t.2)));
                out.extend(mine.into_iter().take(cfg.top_k).cloned());
            }
            out
        }
        TopKScope::Global => {
            let mut sorted = all_terms.clone();
            sorted.sort_by(|s, t| t.0.total_cmp(&s.0).then(s.1.cmp(&t.1)).then(s.2.cmp(&t.2)));
            sorted.truncate(cfg.top_k);
            sorted
        }
    };
    let mut total = 0.0;
    for (l, i, _) in selected {
        total += weights.map_or(1.0, |w| w[i]) * l;
    }
    total / n as f64
}

struct RandomInstance {
    map: EmbeddingMap,
    inputs: LossInputs,
    cfg: LossConfig,
}

fn random_instance(seed: u64) -> RandomInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.random_range(2..=8usize);
    let w = rng.random_range(2..=8usize);
    let dim = rng.random_range(2..=8usize);
    let num_q = rng.random_range(2..=6usize);
    let map = EmbeddingMap::init_random(h, w, dim, rng.random()).unwrap();

    let mut qdata = Vec::new();
    for _ in 0..num_q {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        qdata.extend(linalg::l2_normalize(&v).unwrap());
    }
    let queries = DenseMatrix::from_vec(num_q, dim, qdata).unwrap();

    let pixel_to_query: Vec<u16> = (0..h * w)
        .map(|_| {
            if rng.random_range(0.0..1.0) < 0.1 {
                VOID_ID
            } else {
                rng.random_range(0..num_q) as u16
            }
        })
        .collect();
    // Keep at least one labeled pixel.
    let mut pixel_to_query = pixel_to_query;
    if pixel_to_query.iter().all(|q| *q == VOID_ID) {
        pixel_to_query[0] = 0;
    }

    let valid = if rng.random_range(0.0..1.0) < 0.5 {
        Some(
            (0..h * w * num_q)
                .map(|_| rng.random_range(0.0..1.0) < 0.8)
                .collect::<Vec<bool>>(),
        )
    } else {
        None
    };
    let pixel_weights = if rng.random_range(0.0..1.0) < 0.5 {
        Some(
            (0..h * w)
                .map(|_| if rng.random_range(0.0..1.0) < 0.3 { 5.0 } else { 1.0 })
                .collect::<Vec<f64>>(),
        )
    } else {
        None
    };

    let margins = [0.0, 0.1, 0.15, 0.3];
    let cfg = LossConfig {
        margin: margins[rng.random_range(0..margins.len())],
        top_k: rng.random_range(1..=5),
        topk_scope: if rng.random_range(0.0..1.0) < 0.25 {
            TopKScope::Global
        } else {
            TopKScope::PerPixel
        },
        ..LossConfig::default()
    };
    RandomInstance {
        map,
        inputs: LossInputs {
            pixel_to_query,
            queries,
            valid,
            pixel_weights,
        },
        cfg,
    }
}

fn check_instance(inst: &RandomInstance, label: &str) {
    let analytic = inst.inputs.eval(&inst.map, &inst.cfg).unwrap();
    let value_naive = naive_loss_value(
        &inst.map,
        &inst.inputs.pixel_to_query,
        &inst.inputs.queries,
        inst.inputs.valid.as_deref(),
        inst.inputs.pixel_weights.as_deref(),
        &inst.cfg,
    );
    assert!(
        (analytic.value - value_naive).abs() < 1e-10,
        "{label}: fast value {} vs naive {}",
        analytic.value,
        value_naive
    );

    let fd = finite_difference_grad(&inst.map, &|m| inst.inputs.eval(m, &inst.cfg).unwrap().value);
    let err = max_rel_error(&analytic.grad, &fd);
    assert!(
        err < TOLERANCE,
        "{label}: max relative gradient error {err}"
    );
}

#[test]
fn gradient_matches_fd_on_random_instances() {
    for seed in 0..20u64 {
        let inst = random_instance(seed);
        check_instance(&inst, &format!("random instance {seed}"));
    }
}

#[test]
fn gradient_matches_fd_with_clamp_active() {
    // A pixel sitting exactly opposite its positive query (and on the
    // negative one) drives the hinge to its ceiling where the log argument
    // clamps and the analytic gradient is zero. Both distance extremes are
    // stationary points of the normalization, so finite differences stay
    // inside the clamp too.
    let dim = 4;
    let mut prenorm = vec![0.0; 2 * dim];
    prenorm[0] = -0.5; // pixel 0 at -e0
    prenorm[dim] = 0.3; // pixel 1 at +e0
    prenorm[dim + 1] = 0.4;
    let map = EmbeddingMap::from_parts(1, 2, dim, prenorm, 0).unwrap();
    let mut qdata = vec![0.0; 2 * dim];
    qdata[0] = 1.0; // q0 = e0
    qdata[dim] = -1.0; // q1 = -e0
    let inputs = LossInputs {
        pixel_to_query: vec![0, 1],
        queries: DenseMatrix::from_vec(2, dim, qdata).unwrap(),
        valid: None,
        pixel_weights: None,
    };
    let cfg = LossConfig::default();
    let analytic = inputs.eval(&map, &cfg).unwrap();
    // Pixel 0's single term is fully clamped: loss includes -ln(clamp_eps).
    assert!(analytic.value > 0.5 * -(1e-7f64).ln() / 2.0);
    let fd = finite_difference_grad(&map, &|m| inputs.eval(m, &cfg).unwrap().value);
    let err = max_rel_error(&analytic.grad, &fd);
    assert!(err < TOLERANCE, "clamp case: max relative error {err}");
}

#[test]
fn gradient_matches_fd_with_topk_boundary_active() {
    // More violating negatives than top_k, so the selection boundary is
    // exercised (top_k = 2 of up to 5 positive terms).
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let dim = 6;
    let map = EmbeddingMap::init_random(4, 4, dim, 7).unwrap();
    let mut qdata = Vec::new();
    for _ in 0..6 {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        qdata.extend(linalg::l2_normalize(&v).unwrap());
    }
    let inputs = LossInputs {
        pixel_to_query: (0..16).map(|i| (i % 6) as u16).collect(),
        queries: DenseMatrix::from_vec(6, dim, qdata).unwrap(),
        valid: None,
        pixel_weights: None,
    };
    let cfg = LossConfig {
        top_k: 2,
        margin: 0.3,
        ..LossConfig::default()
    };
    // Confirm the boundary is really active for at least one pixel.
    let breakdown =
        ciae_core::loss::loss_breakdown(&map, &inputs.pixel_to_query, &inputs.queries, None, &cfg)
            .unwrap();
    assert!(breakdown
        .iter()
        .any(|b| b.terms.iter().filter(|t| t.l > 0.0).count() > cfg.top_k));
    let analytic = inputs.eval(&map, &cfg).unwrap();
    let fd = finite_difference_grad(&map, &|m| inputs.eval(m, &cfg).unwrap().value);
    let err = max_rel_error(&analytic.grad, &fd);
    assert!(err < TOLERANCE, "top-k case: max relative error {err}");
}

/// Frozen combined objective: category and instance inputs are built once
/// from the base map (stop-gradient on every query), then evaluated at
/// perturbed maps.
fn frozen_ciae(
    map: &EmbeddingMap,
    cae: &LossInputs,
    iae: &LossInputs,
    cfg: &LossConfig,
) -> f64 {
    cae.eval(map, cfg).unwrap().value + cfg.alpha * iae.eval(map, cfg).unwrap().value
}

#[test]
fn combined_gradient_matches_fd_on_scenes() {
    for seed in 0..6u64 {
        let scene = generate_scene(&SceneGenConfig {
            height: 8,
            width: 8,
            num_stuff_regions: 2,
            num_things: 2,
            num_thing_categories: 2,
            thing_shape: if seed % 2 == 0 {
                ThingShape::Rectangle
            } else {
                ThingShape::Ellipse
            },
            size_range: (0.3, 0.5),
            merge_things: seed % 2 == 0,
            seed,
        })
        .unwrap();
        let map = EmbeddingMap::init_random(8, 8, 4, seed ^ 0xabc).unwrap();
        let bank = MemoryBank::init(scene.label_space(), 4, 100, seed ^ 0x123).unwrap();
        let cfg = LossConfig::default();

        let cae = ciae_core::loss::cae_inputs(&scene, &bank).unwrap();
        let iae = ciae_core::loss::iae_inputs(&map, &scene, &bank, &cfg).unwrap();

        // The production combined loss agrees with the frozen evaluation at
        // the base point.
        let combined = ciae_core::ciae_loss(&map, &scene, &bank, &cfg).unwrap();
        let frozen = frozen_ciae(&map, &cae, &iae, &cfg);
        assert!((combined.value - frozen).abs() < 1e-12);

        let fd = finite_difference_grad(&map, &|m| frozen_ciae(m, &cae, &iae, &cfg));
        let err = max_rel_error(&combined.grad, &fd);
        assert!(
            err < TOLERANCE,
            "scene instance {seed}: max relative gradient error {err}"
        );
    }
}

#[test]
fn linearity_of_the_combined_loss() {
    let scene = generate_scene(&SceneGenConfig {
        height: 8,
        width: 8,
        num_things: 2,
        num_thing_categories: 2,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let map = EmbeddingMap::init_random(8, 8, 4, 1).unwrap();
    let bank = MemoryBank::init(scene.label_space(), 4, 100, 2).unwrap();

    let mut cfg = LossConfig::default();
    let cae = ciae_core::cae_loss(&map, &scene, &bank, &cfg).unwrap();
    let iae = ciae_core::iae_loss(&map, &scene, &bank, &cfg).unwrap();
    let total = ciae_core::ciae_loss(&map, &scene, &bank, &cfg).unwrap();
    assert!((total.value - (cae.value + cfg.alpha * iae.value)).abs() < 1e-12);
    for ((t, c), i) in total.grad.iter().zip(&cae.grad).zip(&iae.grad) {
        assert!((t - (c + cfg.alpha * i)).abs() < 1e-12);
    }

    // alpha = 0 degenerates to the category loss exactly.
    cfg.alpha = 0.0;
    let total0 = ciae_core::ciae_loss(&map, &scene, &bank, &cfg).unwrap();
    assert_eq!(total0.value, cae.value);
    assert_eq!(total0.grad, cae.grad);
}

#[test]
fn untrained_label_space_mismatch_is_rejected() {
    let scene = generate_scene(&SceneGenConfig {
        merge_things: true,
        ..Default::default()
    })
    .unwrap();
    // Bank sized for the unmerged space cannot serve the merged scene.
    let wrong = LabelSpace {
        num_stuff: 3,
        num_thing: 3,
        merge_things: false,
    };
    let bank = MemoryBank::init(&wrong, 4, 10, 0).unwrap();
    let map = EmbeddingMap::init_random(32, 32, 4, 0).unwrap();
    assert!(ciae_core::cae_loss(&map, &scene, &bank, &LossConfig::default()).is_err());
}
