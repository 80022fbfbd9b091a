//! Acceptance criteria. Every criterion runs, prints one PASS/FAIL line and
//! the binary exits non-zero if any of them failed.

use std::error::Error;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use voxelfill_core::augment::{apply_mirror, apply_rotation, Interpolation};
use voxelfill_core::losses::{masked_mae, ssim, LossConfig, SsimVariant};
use voxelfill_core::maskgen::{build_augmented_set, generate_healthy_mask, MaskGenParams};
use voxelfill_core::metrics::{
    aggregate_report, eval_metrics, psnr, EvalReport, ReportSummary, ScanMetrics,
};
use voxelfill_core::patch::{crop_to_patch, make_training_pair, stitch, PatchSpec};
use voxelfill_core::phantom::{synth_phantom, PhantomSpec};
use voxelfill_core::train::{train_loop, Retention, TrainConfig};
use voxelfill_core::unet::{build_unet, forward, UNetConfig};
use voxelfill_core::{Dims, Label, LabelMask, Volume};
use voxelfill_tensor::gradcheck::{self, FdConfig, FdReport};
use voxelfill_tensor::rng::stream;
use voxelfill_tensor::{AdamConfig, Graph, Mode, Tensor, Var};

type Outcome = Result<String, Box<dyn Error>>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+).into());
        }
    };
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn random_labels(d: Dims, p: f64, rng: &mut impl Rng) -> LabelMask {
    LabelMask::from_fn(d, |_, _, _| {
        if !rng.random_bool(p) {
            Label::Background
        } else if rng.random_bool(0.5) {
            Label::Healthy
        } else {
            Label::Unhealthy
        }
    })
}

fn bits(v: &Volume) -> Vec<u64> {
    v.voxels().iter().map(|x| x.to_bits()).collect()
}

// 1

fn psnr_anchors() -> Outcome {
    let anchors: [(f64, f64); 3] = [
        (0.005796814, 22.3681049),
        (0.000171515, 37.65698624),
        (0.022642322, 16.45079041),
    ];
    let d = Dims::new(8, 8, 8);
    let healthy = LabelMask::from_fn(d, |_, _, _| Label::Healthy);
    let gt = Volume::from_fn(d, |x, y, z| 0.2 + 0.01 * (x + 2 * y + 3 * z) as f64)?;
    let mut worst: f64 = 0.0;
    for (mse, expect) in anchors {
        let e = mse.sqrt();
        let pred = Volume::from_fn(d, |x, y, z| {
            gt.get(x, y, z) + if (x + y + z) % 2 == 0 { e } else { -e }
        })?;
        let m = eval_metrics("anchor", &pred, &gt, &healthy, &LossConfig::evaluation())?;
        for got in [psnr(mse), m.psnr] {
            let err = (got - expect).abs();
            worst = worst.max(err);
            ensure!(err <= 1e-4, "mse {mse}: psnr {got} vs {expect}");
        }
    }
    Ok(format!("max deviation {worst:.2e}"))
}

// 2

/// Loss = Σ op(inputs) ⊙ w for a fixed random projection w.
fn projected<F>(
    inputs: &[Tensor],
    op: &F,
    grad: bool,
) -> voxelfill_tensor::Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> voxelfill_tensor::Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            if grad {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
        .collect();
    let out = op(&mut g, &vars)?;
    let w = random_tensor(g.shape(out), -1.0, 1.0, &mut stream(1, "projection", 0));
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    let loss = g.sum_all(p);
    Ok((g, vars, loss))
}

fn fd_op<F>(inputs: Vec<Tensor>, op: F) -> Result<FdReport, Box<dyn Error>>
where
    F: Fn(&mut Graph, &[Var]) -> voxelfill_tensor::Result<Var>,
{
    let (g, vars, loss) = projected(&inputs, &op, true)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get(v).unwrap().clone())
        .collect();
    let mut coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(t, x)| (0..x.numel()).map(move |i| (t, i)))
        .collect();
    coords.shuffle(&mut stream(2, "fd-order", 0));
    let report = gradcheck::check(&inputs, &analytic, &coords, 200, FdConfig::default(), |p| {
        let (g, _, loss) = projected(p, &op, false)?;
        Ok((g.value(loss).item().unwrap(), g.branch_signature()))
    })?;
    Ok(report)
}

type OpCase = (
    &'static str,
    Vec<Tensor>,
    Box<dyn Fn(&mut Graph, &[Var]) -> voxelfill_tensor::Result<Var>>,
);

fn gradient_integrity() -> Outcome {
    let r = &mut stream(3, "grad-inputs", 0);
    let shape = [2, 5, 5, 5];
    let a = random_tensor(&shape, -1.0, 1.0, r);
    let b = random_tensor(&shape, 0.5, 2.0, r);
    let even = random_tensor(&[2, 6, 6, 6], -1.0, 1.0, r);
    let kernel = random_tensor(&[2, 2, 3, 3, 3], -0.5, 0.5, r);
    let bias = random_tensor(&[2], -0.5, 0.5, r);
    let slope = Tensor::new(vec![2], vec![0.25, 0.6])?;
    let gamma = random_tensor(&[2], 0.5, 1.5, r);
    let cases: Vec<OpCase> = vec![
        (
            "add",
            vec![a.clone(), b.clone()],
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        (
            "sub",
            vec![a.clone(), b.clone()],
            Box::new(|g, v| g.sub(v[0], v[1])),
        ),
        (
            "mul",
            vec![a.clone(), b.clone()],
            Box::new(|g, v| g.mul(v[0], v[1])),
        ),
        (
            "div",
            vec![a.clone(), b.clone()],
            Box::new(|g, v| g.div(v[0], v[1])),
        ),
        (
            "add_scalar",
            vec![a.clone()],
            Box::new(|g, v| Ok(g.add_scalar(v[0], 0.3))),
        ),
        (
            "mul_scalar",
            vec![a.clone()],
            Box::new(|g, v| Ok(g.mul_scalar(v[0], -1.7))),
        ),
        (
            "square",
            vec![a.clone()],
            Box::new(|g, v| Ok(g.square(v[0]))),
        ),
        ("abs", vec![a.clone()], Box::new(|g, v| Ok(g.abs(v[0])))),
        ("relu", vec![a.clone()], Box::new(|g, v| Ok(g.relu(v[0])))),
        ("tanh", vec![a.clone()], Box::new(|g, v| Ok(g.tanh(v[0])))),
        (
            "prelu",
            vec![a.clone(), slope],
            Box::new(|g, v| g.prelu(v[0], v[1])),
        ),
        (
            "sum_all",
            vec![a.clone()],
            Box::new(|g, v| Ok(g.sum_all(v[0]))),
        ),
        (
            "mean_all",
            vec![a.clone()],
            Box::new(|g, v| Ok(g.mean_all(v[0]))),
        ),
        (
            "conv3d",
            vec![a.clone(), kernel, bias.clone()],
            Box::new(|g, v| g.conv3d(v[0], v[1], Some(v[2]), 1)),
        ),
        ("maxpool3d", vec![even], Box::new(|g, v| g.maxpool3d(v[0]))),
        (
            "upsample_nn",
            vec![a.clone()],
            Box::new(|g, v| g.upsample_nn(v[0])),
        ),
        (
            "instance_norm",
            vec![a.clone(), gamma, bias],
            Box::new(|g, v| g.instance_norm(v[0], v[1], v[2], 1e-5)),
        ),
        (
            "dropout",
            vec![a.clone()],
            Box::new(|g, v| g.dropout(v[0], 0.2, Mode::Train, &mut stream(5, "dropout", 0))),
        ),
        (
            "concat_channels",
            vec![a.clone(), b],
            Box::new(|g, v| g.concat_channels(v[0], v[1])),
        ),
        (
            "box_mean3d",
            vec![a],
            Box::new(|g, v| g.box_mean3d(v[0], 3)),
        ),
    ];
    let mut worst: f64 = 0.0;
    let n_ops = cases.len();
    for (name, inputs, op) in cases {
        let rep = fd_op(inputs, op)?;
        ensure!(
            rep.probes.len() >= 200,
            "{name}: only {} valid probes",
            rep.probes.len()
        );
        ensure!(
            rep.all_within(1e-4),
            "{name}: worst probe {:?}",
            rep.worst()
        );
        worst = worst.max(rep.max_rel_error());
    }

    let cfg = UNetConfig::tiny(2, 2);
    let params = build_unet(&cfg, 3)?;
    let n = 8;
    let x = random_tensor(&[2, n, n, n], -1.0, 1.0, &mut stream(5, "input", 0));
    let target = random_tensor(&[1, n, n, n], -1.0, 1.0, &mut stream(6, "input", 0));
    let mask = random_labels(Dims::new(n, n, n), 0.6, &mut stream(7, "mask", 0));
    let loss_cfg = LossConfig::default();
    let run = |tensors: &[Tensor], grad: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| {
                if grad {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let xv = g.constant(x.clone());
        let tv = g.constant(target.clone());
        let out = forward(
            &mut g,
            &vars,
            &cfg,
            xv,
            Mode::Train,
            &mut stream(9, "dropout", 0),
        )?;
        let loss = voxelfill_core::losses::combined_loss(&mut g, out, tv, &mask, &loss_cfg)?;
        Ok::<_, voxelfill_core::Error>((g, vars, loss))
    };
    let (g, vars, loss) = run(params.tensors(), true)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get(v).unwrap().clone())
        .collect();
    let coords = gradcheck::sample_coords(params.tensors(), 800, &mut stream(10, "coords", 0));
    let rep = gradcheck::check(
        params.tensors(),
        &analytic,
        &coords,
        200,
        FdConfig::default(),
        |t| {
            let (g, _, loss) =
                run(t, false).map_err(|e| voxelfill_tensor::TensorError::Shape(e.to_string()))?;
            Ok((g.value(loss).item().unwrap(), g.branch_signature()))
        },
    )?;
    ensure!(
        rep.probes.len() >= 200,
        "u-net: only {} valid probes",
        rep.probes.len()
    );
    ensure!(rep.all_within(1e-4), "u-net: worst probe {:?}", rep.worst());
    Ok(format!(
        "{n_ops} ops max rel error {worst:.2e}; u-net {} probes ({} skipped) max rel error {:.2e}",
        rep.probes.len(),
        rep.skipped,
        rep.max_rel_error()
    ))
}

// 3

#[allow(clippy::needless_range_loop)]
fn conv_oracle(x: &Tensor, k: &Tensor, b: &[f64], pad: usize) -> (Vec<usize>, Vec<f64>) {
    let xs = x.shape();
    let ks = k.shape();
    let o: Vec<usize> = (0..3)
        .map(|a| xs[a + 1] + 2 * pad + 1 - ks[a + 2])
        .collect();
    let mut out = Vec::new();
    for co in 0..ks[0] {
        for ox in 0..o[0] {
            for oy in 0..o[1] {
                for oz in 0..o[2] {
                    let mut s = b[co];
                    for ci in 0..ks[1] {
                        for i in 0..ks[2] {
                            for j in 0..ks[3] {
                                for l in 0..ks[4] {
                                    let p = [ox + i, oy + j, oz + l];
                                    if (0..3).any(|a| p[a] < pad || p[a] - pad >= xs[a + 1]) {
                                        continue;
                                    }
                                    let (px, py, pz) = (p[0] - pad, p[1] - pad, p[2] - pad);
                                    let w = k.data()
                                        [(((co * ks[1] + ci) * ks[2] + i) * ks[3] + j) * ks[4] + l];
                                    s +=
                                        w * x.data()[((ci * xs[1] + px) * xs[2] + py) * xs[3] + pz];
                                }
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    (vec![ks[0], o[0], o[1], o[2]], out)
}

fn ssim_eq(x: &[f64], y: &[f64], c1: f64, c2: f64) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let vx = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n;
    let vy = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n;
    let cxy = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / n;
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

fn oracle_equivalence() -> Outcome {
    let mut conv_err: f64 = 0.0;
    for case in 0..50 {
        let r = &mut stream(20, "conv-shape", case);
        let (cin, cout) = (r.random_range(1..=3), r.random_range(1..=3));
        let ksize = if r.random_bool(0.5) { 3 } else { 1 };
        let pad = if ksize == 3 && r.random_bool(0.7) {
            1
        } else {
            0
        };
        let lo = if pad == 0 { ksize } else { 1 };
        let dims: Vec<usize> = (0..3).map(|_| r.random_range(lo..=6)).collect();
        let x = random_tensor(&[cin, dims[0], dims[1], dims[2]], -1.0, 1.0, r);
        let k = random_tensor(&[cout, cin, ksize, ksize, ksize], -1.0, 1.0, r);
        let b = random_tensor(&[cout], -1.0, 1.0, r);
        let mut g = Graph::new();
        let (xv, kv, bv) = (
            g.constant(x.clone()),
            g.constant(k.clone()),
            g.constant(b.clone()),
        );
        let y = g.conv3d(xv, kv, Some(bv), pad)?;
        let (shape, expect) = conv_oracle(&x, &k, b.data(), pad);
        ensure!(
            g.shape(y) == &shape[..],
            "conv case {case}: shape {:?} vs {shape:?}",
            g.shape(y)
        );
        for (a, e) in g.value(y).data().iter().zip(&expect) {
            conv_err = conv_err.max((a - e).abs());
        }
    }
    ensure!(conv_err <= 1e-12, "conv max error {conv_err:.3e}");

    let cfg = LossConfig {
        variant: SsimVariant::Windowed,
        ..LossConfig::default()
    };
    let (n, w) = (8usize, cfg.window);
    let mut ssim_err: f64 = 0.0;
    for case in 0..20 {
        let r = &mut stream(21, "ssim-pair", case);
        let xt = random_tensor(&[1, n, n, n], -1.0, 1.0, r);
        let yt = Tensor::new(
            xt.shape().to_vec(),
            xt.data()
                .iter()
                .map(|v| 0.6 * v + r.random_range(-0.4..0.4))
                .collect(),
        )?;
        let mut g = Graph::new();
        let (x, y) = (g.constant(xt.clone()), g.constant(yt.clone()));
        let s = ssim(&mut g, x, y, &cfg)?;
        let got = g.value(s).item().unwrap();
        let m = n - w + 1;
        let mut total = 0.0;
        for a in 0..m {
            for b in 0..m {
                for c in 0..m {
                    let (mut wx, mut wy) = (Vec::new(), Vec::new());
                    for i in a..a + w {
                        for j in b..b + w {
                            for k in c..c + w {
                                wx.push(xt.data()[(i * n + j) * n + k]);
                                wy.push(yt.data()[(i * n + j) * n + k]);
                            }
                        }
                    }
                    total += ssim_eq(&wx, &wy, cfg.c1(), cfg.c2());
                }
            }
        }
        ssim_err = ssim_err.max((got - total / (m * m * m) as f64).abs());
    }
    ensure!(ssim_err <= 1e-10, "ssim max error {ssim_err:.3e}");

    let mut loop_err: f64 = 0.0;
    for case in 0..10 {
        let r = &mut stream(22, "masked-loss", case);
        let d = Dims::new(
            r.random_range(2..7),
            r.random_range(2..7),
            r.random_range(2..7),
        );
        let mut mask = random_labels(d, 0.6, r);
        mask.set(0, Label::Healthy);
        let pred = Volume::from_fn(d, |_, _, _| r.random_range(0.0..1.0))?;
        let gt = Volume::from_fn(d, |_, _, _| r.random_range(0.0..1.0))?;
        let (mut abs, mut sq, mut cnt) = (0.0, 0.0, 0.0);
        for i in 0..d.len() {
            if mask.labels()[i] == Label::Healthy {
                let e = pred.voxels()[i] - gt.voxels()[i];
                abs += e.abs();
                sq += e * e;
                cnt += 1.0;
            }
        }
        let mut g = Graph::new();
        let (p, t) = (g.constant(pred.to_tensor()), g.constant(gt.to_tensor()));
        let mae = masked_mae(&mut g, p, t, &mask)?;
        loop_err = loop_err.max((g.value(mae).item().unwrap() - abs / cnt).abs());
        if d.as_array().iter().all(|&k| k >= 7) {
            let m = eval_metrics("loop", &pred, &gt, &mask, &LossConfig::evaluation())?;
            loop_err = loop_err.max((m.mse - sq / cnt).abs());
        }
    }
    for case in 0..5 {
        let r = &mut stream(23, "masked-mse", case);
        let d = Dims::new(7 + case as usize, 8, 7);
        let mut mask = random_labels(d, 0.5, r);
        mask.set(0, Label::Healthy);
        let pred = Volume::from_fn(d, |_, _, _| r.random_range(0.0..1.0))?;
        let gt = Volume::from_fn(d, |_, _, _| r.random_range(0.0..1.0))?;
        let (mut sq, mut cnt) = (0.0, 0.0);
        for i in 0..d.len() {
            if mask.labels()[i] == Label::Healthy {
                sq += (pred.voxels()[i] - gt.voxels()[i]).powi(2);
                cnt += 1.0;
            }
        }
        let m = eval_metrics("loop", &pred, &gt, &mask, &LossConfig::evaluation())?;
        loop_err = loop_err.max((m.mse - sq / cnt).abs());
    }
    ensure!(loop_err <= 1e-12, "masked loss max error {loop_err:.3e}");
    Ok(format!(
        "conv {conv_err:.1e} over 50 shapes, ssim {ssim_err:.1e} over 20 pairs, mae/mse {loop_err:.1e}"
    ))
}

// 4

fn overfit_convergence() -> Outcome {
    let ph = synth_phantom(&PhantomSpec::default())?;
    let healthy = generate_healthy_mask(
        &ph.brain,
        &ph.unhealthy,
        &MaskGenParams::default(),
        &mut stream(0, "maskgen", 0),
    )?;
    let patch = Dims::new(32, 32, 32);
    let pair = make_training_pair(&ph.t1n, &healthy, &ph.unhealthy, patch)?;
    let cfg = TrainConfig {
        epochs: 300,
        n_best: 1,
        adam: AdamConfig {
            lr: 1e-4,
            ..AdamConfig::default()
        },
        loss: LossConfig {
            mae_weight: 1.0,
            ssim_weight: 1.0,
            ..LossConfig::default()
        },
        unet: UNetConfig::tiny(4, 2),
        patch,
        augment: false,
        ..TrainConfig::default()
    };
    let out = train_loop(build_unet(&cfg.unet, 0)?, &vec![pair], &[], &cfg)?;
    let steps = &out.history.step_loss;
    ensure!(steps.len() == 300, "ran {} steps", steps.len());
    let (first, last) = (steps[0], steps[299]);
    let detail = format!(
        "loss step 1 {first:.4}, step 300 {last:.4} (ratio {:.3})",
        last / first
    );
    ensure!(
        last < 0.05 && last < 0.2 * first,
        "{detail}; needs < 0.05 and < 20% of step 1"
    );
    Ok(detail)
}

// 5

fn geometry_suite() -> Outcome {
    let mut checks = 0usize;
    for case in 0..40u64 {
        let r = &mut stream(40, "geometry", case);
        let d = Dims::new(
            r.random_range(1..9),
            r.random_range(1..9),
            r.random_range(1..9),
        );
        let v = Volume::from_fn(d, |_, _, _| r.random_range(-5.0..5.0))?;
        let m = random_labels(d, 0.5, r);
        for f in 0..8 {
            let flags = [f & 1 == 1, f & 2 == 2, f & 4 == 4];
            ensure!(
                bits(&apply_mirror(&apply_mirror(&v, flags)?, flags)?) == bits(&v),
                "mirror twice {flags:?}"
            );
            ensure!(
                apply_mirror(&apply_mirror(&m, flags)?, flags)? == m,
                "mask mirror twice {flags:?}"
            );
            checks += 2;
        }
        for (a, b) in [
            (0.0, 0.0),
            (360.0, 0.0),
            (0.0, 360.0),
            (360.0, -360.0),
            (720.0, 360.0),
        ] {
            for interp in [Interpolation::Nearest, Interpolation::Trilinear] {
                ensure!(
                    bits(&apply_rotation(&v, a, b, interp)?) == bits(&v),
                    "rotation {a}/{b} {interp}"
                );
            }
            ensure!(
                apply_rotation(&m, a, b, Interpolation::Nearest)? == m,
                "mask rotation {a}/{b}"
            );
            checks += 3;
        }
        let n = 2 * r.random_range(0..5) + 1;
        let cube = Dims::new(n, n, n);
        let cv = Volume::from_fn(cube, |_, _, _| r.random_range(-5.0..5.0))?;
        for k in 1..4u32 {
            for plane_xy in [true, false] {
                let angle = 90.0 * k as f64;
                let (txy, tyz) = if plane_xy { (angle, 0.0) } else { (0.0, angle) };
                let rot = apply_rotation(&cv, txy, tyz, Interpolation::Nearest)?;
                for i in 0..cube.len() {
                    let src = cube.coords(i);
                    let mut p = src;
                    for _ in 0..k {
                        p = if plane_xy {
                            (n - 1 - p.1, p.0, p.2)
                        } else {
                            (p.0, n - 1 - p.2, p.1)
                        };
                    }
                    ensure!(
                        rot.get(p.0, p.1, p.2).to_bits() == cv.get(src.0, src.1, src.2).to_bits(),
                        "quarter turn k={k} xy={plane_xy} n={n} at {src:?}"
                    );
                }
                checks += 1;
            }
        }
    }
    for seed in 0..5 {
        let ph = synth_phantom(&PhantomSpec {
            seed,
            ..PhantomSpec::default()
        })?;
        let combined = LabelMask::combine(&ph.brain, &ph.unhealthy)?;
        for patch in [Dims::new(32, 32, 32), Dims::new(28, 28, 28)] {
            let (pv, _, spec) = crop_to_patch(&ph.t1n, &combined, patch)?;
            ensure!(
                bits(&stitch(&ph.t1n, &pv, &spec, &combined)?) == bits(&ph.t1n),
                "crop/stitch seed {seed}"
            );
            checks += 1;
        }
    }
    for case in 0..40u64 {
        let r = &mut stream(41, "stitch", case);
        let d = Dims::new(7, 8, 6);
        let patch = Dims::new(
            r.random_range(1..=7),
            r.random_range(1..=8),
            r.random_range(1..=6),
        );
        let offset = [
            r.random_range(0..=d.nx - patch.nx),
            r.random_range(0..=d.ny - patch.ny),
            r.random_range(0..=d.nz - patch.nz),
        ];
        let orig = Volume::from_fn(d, |_, _, _| r.random_range(-5.0..5.0))?;
        let mask = random_labels(d, 0.4, r);
        let pred = Volume::from_fn(patch, |_, _, _| r.random_range(100.0..200.0))?;
        let spec = PatchSpec {
            dims: patch,
            offset,
            intensity_max: 1.0,
        };
        let out = stitch(&orig, &pred, &spec, &mask)?;
        for i in 0..d.len() {
            let (x, y, z) = d.coords(i);
            let p = [x, y, z];
            let inside =
                (0..3).all(|a| p[a] >= offset[a] && p[a] < offset[a] + patch.as_array()[a]);
            if !(inside && mask.labels()[i].is_masked()) {
                ensure!(
                    out.voxels()[i].to_bits() == orig.voxels()[i].to_bits(),
                    "stitch touched {p:?}"
                );
            }
        }
        checks += 1;
    }
    Ok(format!("{checks} bit-exact checks"))
}

// 6

fn mask_safety() -> Outcome {
    let ph = synth_phantom(&PhantomSpec::default())?;
    let d = ph.t1n.dims();
    let params = MaskGenParams::default();
    let tumour: Vec<(usize, usize, usize)> = (0..d.len())
        .filter(|&i| ph.unhealthy.labels()[i].is_masked())
        .map(|i| d.coords(i))
        .collect();
    ensure!(!tumour.is_empty(), "phantom has no tumour");
    let brain = ph.brain.count_masked() as f64;
    let r2 = params.safety_radius * params.safety_radius;
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for k in 0..100 {
        let m = generate_healthy_mask(
            &ph.brain,
            &ph.unhealthy,
            &params,
            &mut stream(60, "maskgen", k),
        )?;
        let frac = m.count(Label::Healthy) as f64 / brain;
        lo = lo.min(frac);
        hi = hi.max(frac);
        ensure!(
            (params.frac_min..=params.frac_max).contains(&frac),
            "mask {k}: fraction {frac}"
        );
        for i in 0..d.len() {
            if m.labels()[i] != Label::Healthy {
                continue;
            }
            let (x, y, z) = d.coords(i);
            for &(a, b, c) in &tumour {
                let q = (x as f64 - a as f64).powi(2)
                    + (y as f64 - b as f64).powi(2)
                    + (z as f64 - c as f64).powi(2);
                ensure!(
                    q > r2,
                    "mask {k}: voxel {:?} within {} of tumour",
                    (x, y, z),
                    params.safety_radius
                );
            }
        }
    }
    for seed in 0..5 {
        let set = build_augmented_set(&ph.brain, &ph.unhealthy, 5, &params, seed)?;
        for i in 0..5 {
            for j in i + 1..5 {
                ensure!(
                    set[i].0 != set[j].0,
                    "seed {seed}: masks {i} and {j} coincide"
                );
            }
        }
    }
    Ok(format!(
        "100 masks clear of tumour, fractions in [{lo:.4}, {hi:.4}], 5 distinct sets"
    ))
}

// 7

fn voxelfill(threads: usize, args: &[&str]) -> Result<(), Box<dyn Error>> {
    let out = Command::new(env!("CARGO_BIN_EXE_voxelfill"))
        .args(["--quiet", "--seed", "11", "--threads", &threads.to_string()])
        .args(args)
        .output()?;
    ensure!(
        out.status.success(),
        "voxelfill {args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

type Files = Vec<(PathBuf, Vec<u8>)>;

/// Full synthetic pipeline in `root`; returns every produced file, sorted.
fn smoke_pipeline(root: &Path, threads: usize) -> Result<Files, Box<dyn Error>> {
    let s = |p: PathBuf| p.to_string_lossy().into_owned();
    let data = root.join("data");
    let run = root.join("run");
    let metrics = root.join("metrics");
    let config = root.join("train.cfg");
    fs::write(
        &config,
        "# smoke configuration\nepochs = 5\nfolds = 2\nn_best = 2\nbase_channels = 4\nlevels = 2\n\
         patch = 32,32,32\nmasks_per_scan = 2\nlr = 0.001\n",
    )?;
    voxelfill(
        threads,
        &["synth-data", "--out-dir", &s(data.clone()), "--count", "2"],
    )?;
    let scans = ["scan000", "scan001"];
    for id in scans {
        voxelfill(
            threads,
            &[
                "gen-masks",
                "--brain",
                &s(data.join(format!("{id}_brain.vol"))),
                "--unhealthy",
                &s(data.join(format!("{id}_unhealthy.vol"))),
                "--t1n",
                &s(data.join(format!("{id}_t1n.vol"))),
                "--count",
                "2",
                "--out-dir",
                &s(data.clone()),
            ],
        )?;
    }
    voxelfill(
        threads,
        &[
            "train",
            "--data-dir",
            &s(data.clone()),
            "--config",
            &s(config),
            "--fold",
            "0",
            "--out-dir",
            &s(run.clone()),
        ],
    )?;
    for id in scans {
        let pred = root.join(format!("{id}_pred.vol"));
        voxelfill(
            threads,
            &[
                "infer",
                "--checkpoint",
                &s(run.join("best_1.unck")),
                "--voided",
                &s(data.join(format!("{id}_voided_0.vol"))),
                "--mask",
                &s(data.join(format!("{id}_mask_0.vol"))),
                "--out",
                &s(pred.clone()),
            ],
        )?;
        voxelfill(
            threads,
            &[
                "eval",
                "--pred",
                &s(pred),
                "--gt",
                &s(data.join(format!("{id}_t1n.vol"))),
                "--mask",
                &s(data.join(format!("{id}_healthy_0.vol"))),
                "--id",
                id,
                "--out",
                &s(metrics.join(format!("{id}.metrics"))),
            ],
        )?;
    }
    voxelfill(
        threads,
        &[
            "report",
            "--dir",
            &s(metrics),
            "--out",
            &s(root.join("report.txt")),
        ],
    )?;
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(root)?.to_path_buf(), fs::read(&p)?));
            }
        }
    }
    files.sort();
    Ok(files)
}

fn determinism() -> Outcome {
    let mut runs = Vec::new();
    for threads in [1, 4, 1] {
        let dir = tempfile::tempdir()?;
        runs.push((threads, smoke_pipeline(dir.path(), threads)?));
    }
    let (_, base) = &runs[0];
    let names: Vec<_> = base.iter().map(|(p, _)| p.clone()).collect();
    for needed in ["run/best_1.unck", "scan000_pred.vol", "report.txt"] {
        ensure!(
            names.iter().any(|p| p == Path::new(needed)),
            "pipeline did not produce {needed}"
        );
    }
    let report = String::from_utf8(
        base.iter()
            .find(|(p, _)| p == Path::new("report.txt"))
            .unwrap()
            .1
            .clone(),
    )?;
    for row in [
        "Mean",
        "Standard deviation",
        "25 quantile",
        "Median",
        "75 quantile",
    ] {
        ensure!(
            report.lines().any(|l| l.starts_with(row)),
            "report lacks row {row}"
        );
    }
    for (threads, files) in &runs[1..] {
        ensure!(
            files.len() == base.len(),
            "threads {threads}: {} files vs {}",
            files.len(),
            base.len()
        );
        for ((pa, a), (pb, b)) in base.iter().zip(files) {
            ensure!(
                pa == pb && a == b,
                "threads {threads}: {} differs",
                pa.display()
            );
        }
    }
    Ok(format!(
        "{} files bit-identical across --threads 1, 4 and a repeat",
        base.len()
    ))
}

// 8

fn reporting() -> Outcome {
    let mse = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0].map(|k: f64| k / 64.0);
    let psnr_vals = [28.0, 20.0, f64::INFINITY, 24.0, 22.0, 26.0];
    let ssim_vals = [0.875, 0.25, 0.5, 0.375, 0.75, 0.625];
    let metrics: Vec<ScanMetrics> = (0..6)
        .map(|i| ScanMetrics {
            id: format!("s{i}"),
            mse: mse[i],
            psnr: psnr_vals[i],
            ssim: ssim_vals[i],
        })
        .collect();
    let rep: EvalReport = aggregate_report(&metrics)?;
    let s = &rep.summary;
    // sorted mse 1..6 /64: mean 3.5/64, squared deviations sum 17.5/4096
    let expect_mse = [
        3.5 / 64.0,
        (17.5 / 4096.0 / 6.0f64).sqrt(),
        2.25 / 64.0,
        3.5 / 64.0,
        4.75 / 64.0,
    ];
    // sorted psnr 20 22 24 26 28 99 (capped): mean 36.5
    let expect_psnr = [36.5, (4727.5f64 / 6.0).sqrt(), 22.5, 25.0, 27.5];
    // sorted ssim 0.25 .. 0.875 step 0.125: mean 0.5625, squared deviations sum 0.2734375
    let expect_ssim = [
        0.5625,
        (0.2734375f64 / 6.0).sqrt(),
        0.40625,
        0.5625,
        0.71875,
    ];
    for (name, got, want) in [
        ("mse", s.mse, expect_mse),
        ("psnr", s.psnr, expect_psnr),
        ("ssim", s.ssim, expect_ssim),
    ] {
        let got = [got.mean, got.std, got.q25, got.median, got.q75];
        ensure!(got == want, "{name}: {got:?} vs {want:?}");
    }
    ensure!(s.scans == 6, "scan count {}", s.scans);
    let text = rep.to_string();
    let rows = [
        "Mean",
        "Standard deviation",
        "25 quantile",
        "Median",
        "75 quantile",
    ];
    for row in rows {
        ensure!(
            text.lines().any(|l| l.starts_with(row)),
            "missing row {row}"
        );
    }
    let kv = s.key_values();
    ensure!(
        ReportSummary::parse(&kv)?.key_values() == kv,
        "key=value block does not round-trip"
    );
    Ok("15 statistics exact, five rows present, key=value block round-trips".into())
}

// 9

fn brute_force(losses: &[f64], n: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = losses
        .iter()
        .enumerate()
        .map(|(e, &l)| (l, e + 1))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(n).map(|x| x.1).collect()
}

fn checkpoint_selection() -> Outcome {
    let mut sequences: Vec<Vec<f64>> = vec![
        vec![0.5; 12],
        (0..20).map(|i| i as f64).collect(),
        (0..20).map(|i| -(i as f64)).collect(),
        (0..20)
            .map(|i| if i % 2 == 0 { 1.0 } else { 0.0 })
            .collect(),
        vec![3.0, 1.0, 1.0, 2.0, 1.0, 0.0, 1.0, 1.0],
        vec![2.0, 2.0, 1.0, 1.0, 1.0, 3.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
        vec![],
        vec![1.0],
    ];
    for case in 0..200 {
        let r = &mut stream(90, "losses", case);
        let len = r.random_range(0..40);
        sequences.push(
            (0..len)
                .map(|_| r.random_range(0..6) as f64 / 4.0)
                .collect(),
        );
    }
    for seq in &sequences {
        for n in 1..8 {
            let mut keep = Retention::new(n);
            for (e, &l) in seq.iter().enumerate() {
                keep.offer(l, e + 1, ());
            }
            ensure!(
                keep.epochs() == brute_force(seq, n),
                "{seq:?} with n_best {n}"
            );
        }
    }

    let phantom = synth_phantom(&PhantomSpec {
        dims: Dims::new(16, 16, 16),
        ..PhantomSpec::default()
    })?;
    let patch = Dims::new(16, 16, 16);
    let pairs: Vec<_> = (0..3)
        .map(|k| {
            let h = generate_healthy_mask(
                &phantom.brain,
                &phantom.unhealthy,
                &MaskGenParams::default(),
                &mut stream(91, "maskgen", k),
            )?;
            make_training_pair(&phantom.t1n, &h, &phantom.unhealthy, patch)
        })
        .collect::<Result<_, _>>()?;
    let cfg = TrainConfig {
        epochs: 12,
        n_best: 5,
        adam: AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        unet: UNetConfig::tiny(2, 2),
        patch,
        augment: false,
        ..TrainConfig::default()
    };
    let out = train_loop(build_unet(&cfg.unet, 1)?, &pairs[..2], &pairs[2..], &cfg)?;
    let kept: Vec<usize> = out.retained.iter().map(|c| c.epoch).collect();
    ensure!(
        kept == brute_force(&out.history.val_loss, cfg.n_best),
        "training kept {kept:?} from {:?}",
        out.history.val_loss
    );
    for c in &out.retained {
        ensure!(
            c.val_loss == out.history.val_loss[c.epoch - 1],
            "epoch {} loss mismatch",
            c.epoch
        );
    }
    Ok(format!(
        "{} synthetic sequences and a 12-epoch run, kept epochs {kept:?}",
        sequences.len()
    ))
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "psnr anchors", psnr_anchors),
        (2, "gradient integrity", gradient_integrity),
        (3, "oracle equivalence", oracle_equivalence),
        (4, "overfit convergence", overfit_convergence),
        (5, "geometry", geometry_suite),
        (6, "mask safety", mask_safety),
        (7, "determinism", determinism),
        (8, "reporting", reporting),
        (9, "checkpoint selection", checkpoint_selection),
    ];
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}").into())
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("ACCEPTANCE {n} {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(e) => {
                failed += 1;
                println!("ACCEPTANCE {n} {name}: FAIL ({e}) [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
