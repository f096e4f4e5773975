//! Acceptance suite. Prints one PASS/FAIL line per criterion. A failing
//! criterion makes the process exit non-zero only when
//! `DECA_ACCEPTANCE_STRICT=1`, so the rest of the workspace tests still run.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use deca_cli::experiments::{ablation_ladder, median, transfer_study};
use deca_cli::pipeline::{train_model, transfer};
use deca_cli::{Checkpoint, RunConfig};
use deca_core::autodiff::gradcheck::{finite_diff_check, GradCheckOptions};
use deca_core::capsules::{vb_routing, ClassCapsules, ConvCapsules, PrimaryCapsules, RoutingConfig};
use deca_core::data::{generate_synthetic, load_dataset, Dataset, GenParams, Skeleton, ViewTag};
use deca_core::losses::{inverse_graphics_loss, masked_l1_loss, mse_loss, total_loss, InverseGraphicsMode};
use deca_core::metrics::{map_at_threshold, mpjpe, procrustes_align};
use deca_core::model::{Deca, DecaConfig, Task, Variant};
use deca_core::nn::{dropout, Conv2dLayer, InstanceNormLayer, LinearLayer, Mode};
use deca_core::train::{evaluate, TrainConfig, Trainer};
use deca_core::{Graph, ParamStore, Tensor};
use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LAYER_TOL: f64 = 1e-5;
const MODEL_TOL: f64 = 1e-4;
const GRADCHECK_BUDGET_S: f64 = 120.0;
const ROUTING_INSTANCES: usize = 100;
const ROUTING_TOL: f64 = 1e-6;
const LOSS_TOL: f64 = 1e-9;
const S_TOL: f64 = 1e-3;
const S_MAX_STEPS: usize = 10_000;
const INVERSE_TOL: f64 = 1e-5;
const METRIC_TOL_MM: f64 = 1e-9;
const OVERFIT_STEPS: u64 = 500;
const OVERFIT_FRACTION: f64 = 0.10;
const OVERFIT_BUDGET_S: f64 = 600.0;
const SEEDS: [u64; 3] = [0, 1, 2];
const DESK_EPOCHS: usize = 8;
const TRANSFER_GAIN: f64 = 0.25;
const PURITY_MIN: f64 = 0.9;
const PURITY_SIGMAS: f64 = 5.0;
const FORWARD_BUDGET_S: f64 = 2.0;

type Outcome = (bool, String);

fn uniform(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Widths used for every desk-scale training experiment.
fn desk_model(variant: Variant) -> DecaConfig {
    DecaConfig {
        capsule_types: 4,
        encoder_channels: [16, 32, 64, 68],
        decoder_hidden: 64,
        ..DecaConfig::for_variant(variant)
    }
}

fn desk_run(variant: Variant) -> RunConfig {
    RunConfig {
        model: desk_model(variant),
        train: TrainConfig { learning_rate: 1e-3, batch_size: 16, epochs: DESK_EPOCHS, ..TrainConfig::default() },
    }
}

// ---------------------------------------------------------------- 1

fn gradient_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut errs: Vec<(&str, f64)> = Vec::new();
    let opts = GradCheckOptions::default();

    let mut s = ParamStore::<f64>::new();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let conv = Conv2dLayer::new(&mut s, "conv", 2, 3, 3, 2, 1, &mut r).unwrap();
    let lin = LinearLayer::new(&mut s, "lin", 12, 4, &mut r).unwrap();
    for p in s.iter_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.3..0.3));
    }
    let x = uniform(2, 2 * 2 * 4 * 4, -1.0, 1.0);
    let proj = uniform(3, 8, -1.0, 1.0);
    let rep = finite_diff_check(&mut s, &opts, |g, s| {
        let h = conv.forward(g, s, g.input(&[2, 2, 4, 4], x.clone())?)?;
        let y = lin.forward(g, s, h.reshape(&[2, 12])?)?;
        y.mul(g.input(&[2, 4], proj.clone())?).map(|v| v.sum())
    })
    .unwrap();
    errs.push(("conv+linear", rep.max_relative_error));

    let mut s = ParamStore::<f64>::new();
    let conv_nb = Conv2dLayer::without_bias(&mut s, "conv", 2, 3, 3, 1, 1, &mut r).unwrap();
    let norm = InstanceNormLayer::new(&mut s, "norm", 3).unwrap();
    for p in s.iter_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.3..0.3));
    }
    let wts = uniform(4, 2 * 3 * 16, -1.0, 1.0);
    let rep = finite_diff_check(&mut s, &opts, |g, s| {
        let h = conv_nb.forward(g, s, g.input(&[2, 2, 4, 4], x.clone())?)?;
        let h = norm.forward(g, s, h)?.gelu();
        let mut drng = ChaCha8Rng::seed_from_u64(5);
        let h = dropout(h, 0.3, Mode::Train, &mut drng)?;
        h.mul(g.input(&[2, 3, 4, 4], wts.clone())?).map(|v| v.sum())
    })
    .unwrap();
    errs.push(("conv_nobias+instance_norm+gelu+dropout", rep.max_relative_error));

    let (ni, nj) = (5, 3);
    let mut s = ParamStore::<f64>::new();
    s.add("a_logit", Tensor::new(&[1, ni], uniform(7, ni, -1.0, 1.0)).unwrap()).unwrap();
    s.add("votes", Tensor::new(&[1, ni, nj, 16], uniform(8, ni * nj * 16, -1.0, 1.0)).unwrap()).unwrap();
    s.add("beta_a", Tensor::scalar(0.1)).unwrap();
    s.add("beta_u", Tensor::scalar(0.9)).unwrap();
    let w = uniform(9, nj * 17, -1.0, 1.0);
    let rep = finite_diff_check(&mut s, &opts, |g, s| {
        let out = vb_routing(
            g.param(s, s.id_of("a_logit").unwrap()).sigmoid(),
            g.param(s, s.id_of("votes").unwrap()),
            &RoutingConfig::with_iterations(3),
            g.param(s, s.id_of("beta_a").unwrap()),
            g.param(s, s.id_of("beta_u").unwrap()),
        )?;
        let wp = g.input(&[1, nj, 16], w[..nj * 16].to_vec())?;
        let wa = g.input(&[1, nj], w[nj * 16..].to_vec())?;
        out.poses.mul(wp)?.sum().add(out.activations.mul(wa)?.sum())
    })
    .unwrap();
    errs.push(("vb_routing(3 it)", rep.max_relative_error));

    let mut s = ParamStore::<f64>::new();
    let mut r = ChaCha8Rng::seed_from_u64(22);
    let pc = PrimaryCapsules::new(&mut s, "p", 17, 1, &mut r).unwrap();
    let cc = ConvCapsules::new(&mut s, "cc", 1, 2, 3, 2, 1, &mut r).unwrap();
    let cl = ClassCapsules::new(&mut s, "cls", 2, 2, &mut r).unwrap();
    let xc = uniform(23, 17 * 9, -1.0, 1.0);
    let wc = uniform(24, 2 * 17 + 32, -1.0, 1.0);
    let caps_opts = GradCheckOptions { max_coords_per_param: Some(24), ..Default::default() };
    let rep = finite_diff_check(&mut s, &caps_opts, |g, s| {
        let cfg = RoutingConfig::default();
        let st = pc.forward(g, s, g.input(&[1, 17, 3, 3], xc.clone())?)?;
        let st = cc.forward(g, s, st, &cfg)?;
        let out = cl.forward(g, s, st, &cfg)?;
        out.state
            .poses
            .mul(g.input(&[1, 2, 16], wc[..32].to_vec())?)?
            .sum()
            .add(out.state.activations.mul(g.input(&[1, 2], wc[32..34].to_vec())?)?.sum())?
            .add(out.inverse_graphics.mul(g.input(&[2, 4, 4], wc[34..].to_vec())?)?.sum())
    })
    .unwrap();
    errs.push(("capsule layers", rep.max_relative_error));

    let mut s = ParamStore::<f64>::new();
    s.add("p", Tensor::new(&[2, 3, 2], uniform(6, 12, -1.0, 1.0)).unwrap()).unwrap();
    s.add("y", Tensor::new(&[2, 4, 4], uniform(7, 32, -1.0, 1.0)).unwrap()).unwrap();
    s.add("w", Tensor::new(&[3, 2, 4, 4], uniform(8, 96, -1.0, 1.0)).unwrap()).unwrap();
    let s_ids: Vec<_> = [0.7, 1.3, -0.2]
        .iter()
        .enumerate()
        .map(|(k, &v)| s.add(format!("s{k}"), Tensor::scalar(v)).unwrap())
        .collect();
    let t: Vec<f64> = uniform(9, 12, -1.0, 1.0).iter().map(|v| v.abs() + 0.05).collect();
    let rep = finite_diff_check(&mut s, &opts, |g, s| {
        let p = g.param(s, s.id_of("p").unwrap());
        let tv = g.input(&[2, 3, 2], t.clone())?;
        let losses = BTreeMap::from([
            (Task::Pose3d, mse_loss(p, tv)?),
            (Task::DepthMap, masked_l1_loss(p, tv, 0.5)?),
            (
                Task::InverseGraphics,
                inverse_graphics_loss(
                    g.param(s, s.id_of("y").unwrap()),
                    g.param(s, s.id_of("w").unwrap()),
                    InverseGraphicsMode::IdentityResidual,
                )?,
            ),
        ]);
        let weights = BTreeMap::from([
            (Task::Pose3d, s_ids[0]),
            (Task::DepthMap, s_ids[1]),
            (Task::InverseGraphics, s_ids[2]),
        ]);
        total_loss(g, s, &weights, &losses)
    })
    .unwrap();
    errs.push(("losses", rep.max_relative_error));
    let layer_ok = errs.iter().all(|(_, e)| *e < LAYER_TOL);

    let cfg = DecaConfig {
        joints: 3,
        input_resolution: [32, 32],
        recon_resolution: [4, 4],
        capsule_types: 1,
        encoder_channels: [3, 4, 6, 17],
        decoder_hidden: 6,
        ..DecaConfig::for_variant(Variant::D3)
    };
    let mut s = ParamStore::<f64>::new();
    let m = Deca::new(cfg, &mut s, 11).unwrap();
    let xm = uniform(12, 2 * 1024, 0.0, 1.0);
    let model_opts = GradCheckOptions { max_coords_per_param: Some(6), seed: 1, ..Default::default() };
    let rep = finite_diff_check(&mut s, &model_opts, |g, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m.forward(g, s, g.input(&[2, 1, 32, 32], xm.clone())?, Mode::Eval, &mut rng)?;
        let p = out.predictions;
        let t3 = g.input(&[2, 3, 3], (0..18).map(|i| (i as f64 * 0.37).sin()).collect())?;
        let t2 = g.input(&[2, 3, 2], (0..12).map(|i| (i as f64 * 0.11).cos()).collect())?;
        let w = inverse_graphics_loss(
            out.encoded.inverse_graphics,
            out.encoded.class_transforms,
            InverseGraphicsMode::IdentityResidual,
        )?;
        let probe = g.input(&[2, 3], vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6])?;
        mse_loss(p.y3d, t3)?
            .add(mse_loss(p.y2d.expect("D3 has a 2D head"), t2)?)?
            .add(w)?
            .add(out.encoded.class_activations.mul(probe)?.sum())
    })
    .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let model_ok = rep.max_relative_error < MODEL_TOL;
    let detail = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    (
        layer_ok && model_ok && secs < GRADCHECK_BUDGET_S,
        format!(
            "max rel err: {detail} (tol {LAYER_TOL:.0e}); tiny D3 model J=3 32x32 {:.1e} (tol {MODEL_TOL:.0e}); {secs:.1}s",
            rep.max_relative_error
        ),
    )
}

// ---------------------------------------------------------------- 2

fn route(a: &[f64], v: &[f64], ni: usize, nj: usize, cfg: &RoutingConfig) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let g = Graph::<f64>::new();
    let out = vb_routing(
        g.input(&[1, ni], a.to_vec()).unwrap(),
        g.input(&[1, ni, nj, 16], v.to_vec()).unwrap(),
        cfg,
        g.scalar(0.0),
        g.scalar(1.0),
    )
    .unwrap();
    (out.poses.to_vec(), out.activations.to_vec(), out.responsibilities.iter().map(|r| r.to_vec()).collect())
}

fn routing_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut sum_err, mut perm_err, mut lin_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut act_ok = true;
    for inst in 0..ROUTING_INSTANCES as u64 {
        let ni = rng.gen_range(1..9);
        let nj = rng.gen_range(1..7);
        let a = uniform(inst * 3, ni, 0.01, 0.99);
        let v = uniform(inst * 3 + 1, ni * nj * 16, -2.0, 2.0);
        let cfg = RoutingConfig::default();
        let (mu, act, rs) = route(&a, &v, ni, nj, &cfg);
        for r in &rs {
            for i in 0..ni {
                sum_err = sum_err.max((r[i * nj..(i + 1) * nj].iter().sum::<f64>() - 1.0).abs());
            }
        }
        act_ok &= act.iter().all(|&x| x > 0.0 && x < 1.0);

        let mut perm: Vec<usize> = (0..nj).collect();
        for k in (1..nj).rev() {
            perm.swap(k, rng.gen_range(0..=k));
        }
        let mut pv = vec![0.0; v.len()];
        for i in 0..ni {
            for j in 0..nj {
                let src = (i * nj + j) * 16;
                let dst = (i * nj + perm[j]) * 16;
                pv[dst..dst + 16].copy_from_slice(&v[src..src + 16]);
            }
        }
        let (mu2, act2, _) = route(&a, &pv, ni, nj, &cfg);
        for j in 0..nj {
            perm_err = perm_err.max((act[j] - act2[perm[j]]).abs());
            for k in 0..16 {
                perm_err = perm_err.max((mu[j * 16 + k] - mu2[perm[j] * 16 + k]).abs());
            }
        }

        let c = rng.gen_range(0.2..3.0);
        let lin = RoutingConfig { prior_strength: 0.0, ..RoutingConfig::with_iterations(1) };
        let (m1, _, _) = route(&a, &v, ni, nj, &lin);
        let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
        let (mc, _, _) = route(&a, &scaled, ni, nj, &lin);
        for (x, y) in m1.iter().zip(&mc) {
            lin_err = lin_err.max((y - c * x).abs());
        }
    }
    (
        act_ok && sum_err < ROUTING_TOL && perm_err < ROUTING_TOL && lin_err < ROUTING_TOL,
        format!(
            "{ROUTING_INSTANCES} instances: |sum_j r - 1| {sum_err:.1e}, activations in (0,1) {act_ok}, \
             permutation {perm_err:.1e}, vote linearity {lin_err:.1e} (tol {ROUTING_TOL:.0e})"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn one_task_total(s: f64, l: f64) -> f64 {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("s", Tensor::scalar(s)).unwrap();
    let g = Graph::new();
    let losses = BTreeMap::from([(Task::Pose3d, g.scalar(l))]);
    total_loss(&g, &store, &BTreeMap::from([(Task::Pose3d, id)]), &losses).unwrap().item()
}

fn loss_identities() -> Outcome {
    let zero = one_task_total(1.0, 0.0);
    let two = one_task_total(1.0, 2.0);
    let two_err = (two - (1.0 + 2.0 * (-1.0f64).exp())).abs();
    let mut fits = Vec::new();
    for l in [0.5, 2.0, 10.0] {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("s", Tensor::scalar(1.0)).unwrap();
        let mut steps = 0;
        while steps < S_MAX_STEPS {
            let g = Graph::new();
            let losses = BTreeMap::from([(Task::Pose3d, g.scalar(l))]);
            let total = total_loss(&g, &store, &BTreeMap::from([(Task::Pose3d, id)]), &losses).unwrap();
            g.backward(total, &mut store).unwrap();
            let p = store.get_mut(id);
            let grad = p.tensor.grad.as_ref().unwrap()[0];
            p.tensor.data_mut()[0] -= 0.1 * grad;
            store.zero_grad();
            steps += 1;
            if (store.get(id).tensor.data()[0] - l.ln()).abs() < S_TOL * 1e-2 {
                break;
            }
        }
        fits.push((l, store.get(id).tensor.data()[0], steps));
    }
    let s_ok = fits.iter().all(|(l, s, _)| (s - l.ln()).abs() < S_TOL);
    let detail = fits
        .iter()
        .map(|(l, s, n)| format!("L={l}: s={s:.6} vs ln L={:.6} in {n} steps", l.ln()))
        .collect::<Vec<_>>()
        .join("; ");
    (
        zero == 1.0 && two_err < LOSS_TOL && s_ok,
        format!("total(s=1,L=0)={zero}; |total(s=1,L=2) - (1+2/e)| {two_err:.1e}; {detail}"),
    )
}

// ---------------------------------------------------------------- 4

fn invert4(m: &[f64]) -> Vec<f64> {
    let m = nalgebra::Matrix4::from_row_slice(m);
    let inv = m.try_inverse().expect("invertible");
    (0..16).map(|k| inv[(k / 4, k % 4)]).collect()
}

fn inverse_graphics() -> Outcome {
    let g = Graph::<f64>::new();
    let j = 5;
    let w = uniform(40, j * 16, -1.0, 1.0);
    let y: Vec<f64> = (0..j).flat_map(|k| invert4(&w[k * 16..(k + 1) * 16])).collect();
    let exact = inverse_graphics_loss(
        g.input(&[j, 4, 4], y).unwrap(),
        g.input(&[1, j, 4, 4], w).unwrap(),
        InverseGraphicsMode::IdentityResidual,
    )
    .unwrap()
    .item();
    let w2 = g.input(&[3, j, 4, 4], uniform(41, 3 * j * 16, -1.0, 1.0)).unwrap();
    let zero = inverse_graphics_loss(g.input(&[j, 4, 4], vec![0.0; j * 16]).unwrap(), w2, InverseGraphicsMode::IdentityResidual)
        .unwrap()
        .item();
    (
        exact < INVERSE_TOL && zero == 2.0,
        format!("exact inverse residual {exact:.1e} (tol {INVERSE_TOL:.0e}); y_W = 0 gives {zero} per pair"),
    )
}

// ---------------------------------------------------------------- 5

fn loop_mpjpe(p: &[[f64; 3]], g: &[[f64; 3]]) -> f64 {
    let mut s = 0.0;
    for k in 0..p.len() {
        let mut d = 0.0;
        for c in 0..3 {
            d += (p[k][c] - g[k][c]) * (p[k][c] - g[k][c]);
        }
        s += d.sqrt();
    }
    1000.0 * s / p.len() as f64
}

fn rot(ax: f64, ay: f64, az: f64) -> Matrix3<f64> {
    *Rotation3::from_euler_angles(ax, ay, az).matrix()
}

fn similarity_cost(p: &[[f64; 3]], g: &[[f64; 3]], r: &Matrix3<f64>, s: f64) -> f64 {
    let n = p.len() as f64;
    let mp = p.iter().fold(Vector3::zeros(), |a, x| a + Vector3::from(*x)) / n;
    let mg = g.iter().fold(Vector3::zeros(), |a, x| a + Vector3::from(*x)) / n;
    p.iter()
        .zip(g)
        .map(|(x, y)| (s * r * (Vector3::from(*x) - mp) - (Vector3::from(*y) - mg)).norm_squared())
        .sum()
}

/// Exhaustive Euler-angle and scale search, then local refinement.
fn grid_procrustes(p: &[[f64; 3]], g: &[[f64; 3]]) -> f64 {
    let steps = 36;
    let mut best = (f64::INFINITY, [0.0; 3], 1.0);
    let pi = std::f64::consts::PI;
    for a in 0..steps {
        for b in 0..steps / 2 {
            for c in 0..steps {
                let ang = [
                    -pi + 2.0 * pi * a as f64 / steps as f64,
                    -pi / 2.0 + pi * b as f64 / (steps / 2) as f64,
                    -pi + 2.0 * pi * c as f64 / steps as f64,
                ];
                let r = rot(ang[0], ang[1], ang[2]);
                for k in 0..30 {
                    let s = 0.2 + 0.1 * k as f64;
                    let cost = similarity_cost(p, g, &r, s);
                    if cost < best.0 {
                        best = (cost, ang, s);
                    }
                }
            }
        }
    }
    let mut step = 2.0 * pi / steps as f64;
    let mut sstep = 0.1;
    for _ in 0..60 {
        let mut improved = true;
        while improved {
            improved = false;
            for d in 0..4 {
                for sign in [-1.0, 1.0] {
                    let (mut ang, mut s) = (best.1, best.2);
                    if d < 3 {
                        ang[d] += sign * step;
                    } else {
                        s += sign * sstep;
                    }
                    let cost = similarity_cost(p, g, &rot(ang[0], ang[1], ang[2]), s);
                    if cost < best.0 {
                        best = (cost, ang, s);
                        improved = true;
                    }
                }
            }
        }
        step *= 0.5;
        sstep *= 0.5;
    }
    best.0
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut mpjpe_err = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(1..40);
        let p: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let g: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        mpjpe_err = mpjpe_err.max((mpjpe(&p, &g).unwrap() - loop_mpjpe(&p, &g)).abs());
    }

    let gt = vec![[0.0, 0.0, 0.0]; 5];
    let pred = vec![[0.05, 0.0, 0.0], [0.1, 0.0, 0.0], [0.0, 0.099_999, 0.0], [0.0, 0.0, 0.2], [0.0, 0.0, 0.0]];
    let map = map_at_threshold(&pred, &gt, 0.10).unwrap();
    let strict_ok = map == 0.6 && map_at_threshold(&[[0.10, 0.0, 0.0]], &[[0.0; 3]], 0.10).unwrap() == 0.0;

    let mut grid_gap = 0.0f64;
    for trial in 0..3u64 {
        let pts = uniform(60 + trial, 24, -1.0, 1.0);
        let p: Vec<[f64; 3]> = pts[..12].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let g: Vec<[f64; 3]> = pts[12..].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let aligned = procrustes_align(&p, &g).unwrap();
        let svd_cost: f64 = aligned
            .iter()
            .zip(&g)
            .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
            .sum();
        let grid = grid_procrustes(&p, &g);
        if svd_cost > grid + 1e-12 {
            grid_gap = f64::INFINITY;
        }
        grid_gap = grid_gap.max(grid - svd_cost);
    }

    let mut recover = 0.0f64;
    for trial in 0..20u64 {
        let v = uniform(80 + trial, 15 * 3 + 7, -1.0, 1.0);
        let gt: Vec<[f64; 3]> = v[..45].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let r = rot(v[45] * 3.0, v[46] * 1.5, v[47] * 3.0);
        let s = 0.5 + v[48].abs() * 2.0;
        let t = Vector3::new(v[49], v[50], v[51]) * 2.0;
        let pred: Vec<[f64; 3]> = gt
            .iter()
            .map(|x| {
                let q = r.transpose() * (Vector3::from(*x) - t) / s;
                [q.x, q.y, q.z]
            })
            .collect();
        let aligned = procrustes_align(&pred, &gt).unwrap();
        recover = recover.max(loop_mpjpe(&aligned, &gt));
    }
    (
        mpjpe_err < 1e-9 && strict_ok && grid_gap < 1e-9 && recover < METRIC_TOL_MM,
        format!(
            "mpjpe vs loop oracle {mpjpe_err:.1e} mm; strict threshold cases ok {strict_ok} (mAP {map}); \
             grid-search minus SVD cost {grid_gap:.1e}; similarity recovery residual {recover:.1e} mm (tol {METRIC_TOL_MM:.0e})"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn overfit() -> Outcome {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(&GenParams { num: 16, test_fraction: 0.0, seed: 6, ..GenParams::default() }, dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let pool: Vec<usize> = (0..ds.samples.len()).collect();
    let mut store = ParamStore::<f32>::new();
    let model = Deca::new(desk_model(Variant::D1), &mut store, 0).unwrap();
    let cfg = TrainConfig { learning_rate: 1e-3, batch_size: 16, ..TrainConfig::default() };
    let mut tr = Trainer::new(model, store, cfg).unwrap();
    tr.train_steps(&ds, &pool, OVERFIT_STEPS).unwrap();
    let r = evaluate(&tr.model, &tr.store, &ds, None, None).unwrap();
    let diameter_mm = 1000.0 * Skeleton::canonical(15).unwrap().bounding_sphere_diameter();
    let limit = OVERFIT_FRACTION * diameter_mm;
    let secs = t0.elapsed().as_secs_f64();
    (
        r.mpjpe_mm < limit && secs < OVERFIT_BUDGET_S,
        format!(
            "D1, {} samples, {OVERFIT_STEPS} steps: train MPJPE {:.1} mm < {limit:.1} mm (10% of {diameter_mm:.0} mm); {secs:.0}s",
            pool.len(),
            r.mpjpe_mm
        ),
    )
}

// ---------------------------------------------------------------- 7, 8, 9

struct Desk {
    ladder: Outcome,
    transfer: Outcome,
    purity: Outcome,
}

fn desk_dataset(dir: &std::path::Path) -> Dataset {
    let params = GenParams { num: 2000, views: vec![ViewTag::Front, ViewTag::Top], seed: 7, ..GenParams::default() };
    generate_synthetic(&params, dir).unwrap();
    load_dataset(dir).unwrap()
}

fn desk_experiments() -> Desk {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let ds = desk_dataset(dir.path());

    let mut top_d3: Vec<std::path::PathBuf> = Vec::new();
    let runs = ablation_ladder(
        &desk_run(Variant::D1),
        &ds,
        Some(ViewTag::Top),
        &[Variant::D1, Variant::D2, Variant::D3],
        &SEEDS,
        |run, ck| {
            if run.variant == Variant::D3 {
                let path = dir.path().join(format!("top_d3_seed{}", run.seed));
                ck.save(&path).unwrap();
                top_d3.push(path);
            }
        },
    )
    .unwrap();
    let ladder_secs = t0.elapsed().as_secs_f64();
    let med = |v: Variant, f: &dyn Fn(&deca_core::metrics::MetricsReport) -> f64| {
        median(&runs.iter().filter(|r| r.variant == v).map(|r| f(&r.test)).collect::<Vec<_>>())
    };
    let map = |v| med(v, &|t| t.map_010);
    let (d1, d2, d3) = (map(Variant::D1), map(Variant::D2), map(Variant::D3));
    let ladder = (
        d3 >= d1,
        format!(
            "median test mAP@0.10 over seeds {SEEDS:?}: D1 {d1:.3}, D2 {d2:.3}, D3 {d3:.3}; D3 >= D1 required, \
             D2 >= D1 {} (informative); MPJPE D1 {:.1} D2 {:.1} D3 {:.1} mm; {ladder_secs:.0}s",
            d2 >= d1,
            med(Variant::D1, &|t| t.mpjpe_mm),
            med(Variant::D2, &|t| t.mpjpe_mm),
            med(Variant::D3, &|t| t.mpjpe_mm),
        ),
    );

    let d3_runs: Vec<_> = runs.iter().filter(|r| r.variant == Variant::D3).collect();
    let purities: Vec<f64> = d3_runs.iter().map(|r| r.test.cluster_purity.unwrap()).collect();
    let sigmas: Vec<f64> = d3_runs
        .iter()
        .map(|r| {
            (r.test.cluster_purity.unwrap() - r.test.cluster_purity_shuffle_mean.unwrap())
                / r.test.cluster_purity_shuffle_std.unwrap().max(f64::MIN_POSITIVE)
        })
        .collect();
    let shuffle = median(&d3_runs.iter().map(|r| r.test.cluster_purity_shuffle_mean.unwrap()).collect::<Vec<_>>());
    let (p_med, s_med) = (median(&purities), median(&sigmas));
    let purity = (
        p_med >= PURITY_MIN && s_med >= PURITY_SIGMAS,
        format!(
            "D3 top-view test entities: median purity {p_med:.3} (need >= {PURITY_MIN}), per seed {purities:.3?}; \
             shuffle baseline {shuffle:.3}, margin {s_med:.1} std (need >= {PURITY_SIGMAS})"
        ),
    );

    let t1 = Instant::now();
    let front = transfer_study(&desk_run(Variant::D3), &ds, ViewTag::Front, ViewTag::Top, &SEEDS).unwrap();
    let back: Vec<_> = top_d3.iter().map(|p| transfer(&Checkpoint::load(p).unwrap(), &ds, ViewTag::Top, ViewTag::Front).unwrap()).collect();
    let gain_ft = median(&front.iter().map(|r| r.report.mpjpe_improvement).collect::<Vec<_>>());
    let gain_tf = median(&back.iter().map(|r| r.mpjpe_improvement).collect::<Vec<_>>());
    let summary = |reports: Vec<&deca_cli::pipeline::TransferReport>| {
        format!(
            "model {:.1} mm vs baseline {:.1} mm, mAP {:.3}",
            median(&reports.iter().map(|r| r.model.mpjpe_mm).collect::<Vec<_>>()),
            median(&reports.iter().map(|r| r.mean_pose_baseline.mpjpe_mm).collect::<Vec<_>>()),
            median(&reports.iter().map(|r| r.model.map_010).collect::<Vec<_>>()),
        )
    };
    let transfer = (
        gain_ft >= TRANSFER_GAIN,
        format!(
            "D3 front->top: median MPJPE gain over mean-pose baseline {:.1}% (need >= {:.0}%), {}; \
             top->front: {:.1}%, {}; {:.0}s",
            100.0 * gain_ft,
            100.0 * TRANSFER_GAIN,
            summary(front.iter().map(|r| &r.report).collect()),
            100.0 * gain_tf,
            summary(back.iter().collect()),
            t1.elapsed().as_secs_f64()
        ),
    );
    Desk { ladder, transfer, purity }
}

// ---------------------------------------------------------------- 10

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let params = GenParams { num: 24, resolution: [32, 32], seed: 10, ..GenParams::default() };
    generate_synthetic(&params, dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let cfg = RunConfig {
        model: DecaConfig {
            input_resolution: [32, 32],
            recon_resolution: [8, 8],
            capsule_types: 2,
            encoder_channels: [4, 8, 16, 34],
            decoder_hidden: 16,
            ..DecaConfig::for_variant(Variant::D3)
        },
        train: TrainConfig { learning_rate: 1e-3, batch_size: 4, epochs: 2, seed: 5, ..TrainConfig::default() },
    };
    let a = train_model(&cfg, &ds, None, None, |_| Ok(())).unwrap();
    let b = train_model(&cfg, &ds, None, None, |_| Ok(())).unwrap();
    let identical = a.blob() == b.blob() && serde_json::to_string(&a.manifest()).unwrap() == serde_json::to_string(&b.manifest()).unwrap();

    let ck_dir = dir.path().join("ck");
    a.save(&ck_dir).unwrap();
    let loaded = Checkpoint::load(&ck_dir).unwrap();
    let roundtrip = loaded.blob() == a.blob() && loaded.manifest() == a.manifest();

    let half = RunConfig { train: TrainConfig { epochs: 1, ..cfg.train.clone() }, ..cfg.clone() };
    let first = train_model(&half, &ds, None, None, |_| Ok(())).unwrap();
    let half_dir = dir.path().join("half");
    first.save(&half_dir).unwrap();
    let resumed = train_model(&cfg, &ds, None, Some(Checkpoint::load(&half_dir).unwrap()), |_| Ok(())).unwrap();
    let resume_ok = resumed.blob() == a.blob() && resumed.step == a.step;

    let steps = a.step;
    (
        identical && roundtrip && resume_ok,
        format!(
            "two identical runs bitwise equal {identical}; save/load round-trip bitwise {roundtrip}; \
             1 epoch + resume equals 2 epochs ({steps} steps) bitwise {resume_ok}"
        ),
    )
}

// ---------------------------------------------------------------- 11

fn throughput() -> Outcome {
    let mut store = ParamStore::<f32>::new();
    let m = Deca::new(DecaConfig::for_variant(Variant::D1), &mut store, 0).unwrap();
    let x: Vec<f32> = uniform(11, 32 * 64 * 64, 0.0, 1.0).into_iter().map(|v| v as f32).collect();
    let t0 = Instant::now();
    let g = Graph::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = m.forward(&g, &store, g.input(&[32, 1, 64, 64], x).unwrap(), Mode::Eval, &mut rng).unwrap();
    let y = out.predictions.y3d.to_vec();
    let secs = t0.elapsed().as_secs_f64();
    let finite = y.iter().all(|v| v.is_finite());
    (
        secs < FORWARD_BUDGET_S && finite,
        format!("eval forward, default D1 widths, batch 32 at 64x64: {secs:.3}s (budget {FORWARD_BUDGET_S}s)"),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (false, format!("panicked: {msg}"))
        }
    }
}

fn report((n, name, (ok, detail)): &(usize, &str, Outcome)) {
    println!("criterion {n:>2} {} {name}: {detail}", if *ok { "PASS" } else { "FAIL" });
}

/// `DECA_ACCEPTANCE_ONLY=1,5,10` restricts the run to those criteria.
fn selected() -> impl Fn(usize) -> bool {
    let only: Option<Vec<usize>> = std::env::var("DECA_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    move |n| only.as_ref().map_or(true, |o| o.contains(&n))
}

fn main() {
    let want = selected();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let quick: Vec<(usize, &str, fn() -> Outcome)> = vec![
        (1, "gradient oracle", gradient_oracle),
        (2, "routing invariants", routing_invariants),
        (3, "loss identities", loss_identities),
        (4, "inverse-graphics loss", inverse_graphics),
        (5, "metric oracles", metric_oracles),
        (6, "overfit regression", overfit),
    ];
    for (n, name, f) in quick {
        if want(n) {
            results.push((n, name, guarded(f)));
            eprintln!("criterion {n} finished");
        }
    }
    if want(7) || want(8) || want(9) {
        let desk = match catch_unwind(AssertUnwindSafe(desk_experiments)) {
            Ok(d) => d,
            Err(_) => {
                let failed = (false, "desk experiments panicked".to_string());
                Desk { ladder: failed.clone(), transfer: failed.clone(), purity: failed }
            }
        };
        for (n, name, o) in [(7, "ablation ladder", desk.ladder), (8, "viewpoint transfer", desk.transfer), (9, "latent clustering", desk.purity)] {
            results.push((n, name, o));
            eprintln!("criterion {n} finished");
        }
    }
    let tail: Vec<(usize, &str, fn() -> Outcome)> =
        vec![(10, "determinism and persistence", determinism), (11, "throughput", throughput)];
    for (n, name, f) in tail {
        if want(n) {
            results.push((n, name, guarded(f)));
            eprintln!("criterion {n} finished");
        }
    }
    for r in &results {
        report(r);
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2 .0).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: {} criteria PASS", results.len());
    } else {
        println!("acceptance: FAIL on criteria {failed:?}");
        if std::env::var("DECA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
