use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn rot(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    // Rz(c) * Ry(b) * Rx(a)
    [
        [cc * cb, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa],
        [sc * cb, sc * sb * sa + cc * ca, sc * sb * ca - cc * sa],
        [-sb, cb * sa, cb * ca],
    ]
}

fn apply(r: &[[f64; 3]; 3], s: f64, t: [f64; 3], p: [f64; 3]) -> [f64; 3] {
    let mut q = [0.0; 3];
    for i in 0..3 {
        q[i] = s * (r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]) + t[i];
    }
    q
}

fn sq_residual(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
        .sum()
}

#[test]
fn mpjpe_matches_loop_oracle() {
    let gt = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
    let pred = [[0.003, 0.004, 0.0], [1.0, 0.0, 0.012], [0.0, 2.0, 0.0]];
    // distances 5 mm, 12 mm, 0 mm
    assert!((mpjpe(&pred, &gt).unwrap() - 17.0 / 3.0).abs() < 1e-9);
    assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
    assert!(matches!(mpjpe(&pred[..2], &gt), Err(DecaError::Dimension(_))));
}

#[test]
fn map_threshold_is_strict() {
    let gt = [[0.0; 3]; 4];
    let pred = [[0.05, 0.0, 0.0], [0.10, 0.0, 0.0], [0.0, 0.2, 0.0], [0.0, 0.0, 0.0999]];
    assert_eq!(map_at_threshold(&pred, &gt, 0.10).unwrap(), 0.5);
    assert_eq!(map_at_threshold(&gt, &gt, 0.10).unwrap(), 1.0);
}

#[test]
fn procrustes_recovers_exact_similarity() {
    let gt = [[0.0, 0.0, 0.0], [1.0, 0.2, 0.0], [0.1, 1.0, 0.3], [0.4, -0.3, 0.9], [-0.5, 0.5, 0.2]];
    let r = rot(0.4, -1.1, 2.3);
    let pred: Vec<[f64; 3]> = gt.iter().map(|&p| apply(&r, 1.7, [0.3, -2.0, 5.0], p)).collect();
    let aligned = procrustes_align(&pred, &gt).unwrap();
    assert!(sq_residual(&aligned, &gt) < 1e-20);
}

#[test]
fn procrustes_never_reflects() {
    let gt = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mirrored: Vec<[f64; 3]> = gt.iter().map(|p| [-p[0], p[1], p[2]]).collect();
    let aligned = procrustes_align(&mirrored, &gt).unwrap();
    // a reflection would fit exactly; a proper rotation cannot
    assert!(sq_residual(&aligned, &gt) > 1e-3);
}

#[test]
fn procrustes_matches_grid_search_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let gt: Vec<[f64; 3]> = (0..4).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    let r0 = rot(0.5, 0.3, -0.8);
    let pred: Vec<[f64; 3]> = gt
        .iter()
        .map(|&p| {
            let q = apply(&r0, 0.8, [0.5, 0.1, -0.2], p);
            [q[0] + rng.gen_range(-0.05..0.05), q[1] + rng.gen_range(-0.05..0.05), q[2] + rng.gen_range(-0.05..0.05)]
        })
        .collect();
    let svd_res = sq_residual(&procrustes_align(&pred, &gt).unwrap(), &gt);

    // exhaustive search over Euler angles and scale, then successively finer
    // grids around the best cell; translation is the centroid difference
    let n = pred.len() as f64;
    let score = |a: f64, b: f64, c: f64, s: f64| {
        let r = rot(a, b, c);
        let moved: Vec<[f64; 3]> = pred.iter().map(|&p| apply(&r, s, [0.0; 3], p)).collect();
        let mut t = [0.0; 3];
        for k in 0..3 {
            t[k] = (gt.iter().map(|p| p[k]).sum::<f64>() - moved.iter().map(|p| p[k]).sum::<f64>()) / n;
        }
        let cand: Vec<[f64; 3]> = moved.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect();
        sq_residual(&cand, &gt)
    };
    use std::f64::consts::PI;
    let mut best = (f64::INFINITY, [0.0; 4]);
    let steps = 36;
    for ia in 0..steps {
        for ib in 0..=steps / 2 {
            for ic in 0..steps {
                for is in 0..30 {
                    let x = [
                        -PI + 2.0 * PI * ia as f64 / steps as f64,
                        -PI / 2.0 + PI * ib as f64 / (steps / 2) as f64,
                        -PI + 2.0 * PI * ic as f64 / steps as f64,
                        0.3 + 0.05 * is as f64,
                    ];
                    let v = score(x[0], x[1], x[2], x[3]);
                    if v < best.0 {
                        best = (v, x);
                    }
                }
            }
        }
    }
    let mut span = [2.0 * PI / steps as f64, PI / steps as f64, 2.0 * PI / steps as f64, 0.05];
    for _ in 0..12 {
        let c = best.1;
        for ia in -4..=4 {
            for ib in -4..=4 {
                for ic in -4..=4 {
                    for is in -4..=4 {
                        let x = [
                            c[0] + span[0] * ia as f64 / 4.0,
                            c[1] + span[1] * ib as f64 / 4.0,
                            c[2] + span[2] * ic as f64 / 4.0,
                            c[3] + span[3] * is as f64 / 4.0,
                        ];
                        let v = score(x[0], x[1], x[2], x[3]);
                        if v < best.0 {
                            best = (v, x);
                        }
                    }
                }
            }
        }
        span.iter_mut().for_each(|s| *s /= 2.0);
    }
    let grid_best = best.0;
    assert!(svd_res <= grid_best + 1e-12, "svd {svd_res} grid {grid_best}");
    assert!(grid_best - svd_res < 1e-9, "svd {svd_res} grid {grid_best}");
}

#[test]
fn procrustes_rejects_degenerate_sets() {
    let line = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
    let tri = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
    assert!(matches!(procrustes_align(&tri, &line), Err(DecaError::Degenerate(_))));
    assert!(matches!(procrustes_align(&[[1.0; 3]; 3], &tri), Err(DecaError::Degenerate(_))));
    assert!(matches!(procrustes_align(&tri[..2], &tri[..2]), Err(DecaError::Degenerate(_))));
}

#[test]
fn purity_on_separated_clusters() {
    let (n, j) = (6, 3);
    let mut e = Vec::new();
    for s in 0..n {
        for k in 0..j {
            for d in 0..16 {
                e.push(if d == k { 10.0 } else { 0.0 } + 0.01 * s as f64);
            }
        }
    }
    assert_eq!(cluster_purity(&e, j, 16).unwrap(), 1.0);
    let (mean, _) = shuffled_purity_baseline(&e, j, 16, 10, 1).unwrap();
    assert!(mean < 0.8, "{mean}");
}

#[test]
fn purity_ties_go_to_lowest_index() {
    // every entity identical: all centroids coincide, everything lands on joint 0
    let e = vec![1.0; 4 * 2 * 16];
    assert_eq!(cluster_purity(&e, 2, 16).unwrap(), 0.5);
    assert!(matches!(cluster_purity(&e[..16], 2, 16), Err(DecaError::Dimension(_))));
}

#[test]
fn report_groups_and_serialization() {
    let names: Vec<String> = crate::data::joint_names(15).unwrap().into_iter().map(String::from).collect();
    let gt: Vec<Vec<[f64; 3]>> = (0..3).map(|_| crate::data::Skeleton::canonical(15).unwrap().joints).collect();
    let mut pred = gt.clone();
    for p in pred.iter_mut() {
        p[13][0] += 0.2; // r_foot off by 20 cm
    }
    let rep = compute_report(&pred, &gt, &names, None).unwrap();
    assert!((rep.mpjpe_mm - 200.0 / 15.0).abs() < 1e-9);
    assert!((rep.map_010 - 14.0 / 15.0).abs() < 1e-12);
    assert_eq!(rep.per_joint["r_foot"].hit_rate, 0.0);
    assert_eq!(rep.body_part_groups.upper.as_ref().unwrap().error_mm, 0.0);
    assert!((rep.body_part_groups.lower.as_ref().unwrap().error_mm - 200.0 / 6.0).abs() < 1e-9);
    assert!(rep.mpjpe_pa_mm.is_finite() && rep.mpjpe_pa_mm > 0.0);
    let back: MetricsReport = serde_json::from_str(&serde_json::to_string(&rep).unwrap()).unwrap();
    assert_eq!(back, rep);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn metrics_are_nonnegative_and_bounded(seed in 0u64..1000, j in 3usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = || -> Vec<[f64; 3]> { (0..j).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect() };
        let (p, g) = (pts(), pts());
        let m = mpjpe(&p, &g).unwrap();
        prop_assert!(m >= 0.0);
        let a = map_at_threshold(&p, &g, 0.5).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let aligned = procrustes_align(&p, &g).unwrap();
        prop_assert!(sq_residual(&aligned, &g) <= sq_residual(&p, &g) + 1e-12);
    }

    #[test]
    fn procrustes_is_invariant_to_similarity_of_prediction(seed in 0u64..1000, a in -3.0f64..3.0, b in -1.5f64..1.5, s in 0.2f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = || -> Vec<[f64; 3]> { (0..6).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect() };
        let (p, g) = (pts(), pts());
        let r = rot(a, b, 0.3);
        let moved: Vec<[f64; 3]> = p.iter().map(|&x| apply(&r, s, [1.0, -2.0, 0.5], x)).collect();
        let r1 = sq_residual(&procrustes_align(&p, &g).unwrap(), &g);
        let r2 = sq_residual(&procrustes_align(&moved, &g).unwrap(), &g);
        prop_assert!((r1 - r2).abs() < 1e-9 * (1.0 + r1));
    }
}
