//! Embedded verification suite behind `tode check`.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attention_mask, cyclic_shift, multi_head_attention_with_weights, window_partition, AttentionWeights, WindowGrid,
};
use crate::data::{generate_sample, load_sample, write_sample, CameraIntrinsics, SynthConfig};
use crate::error::{Error, Result};
use crate::geometry::{depth_to_pointcloud, parse_ply, ply_string, pointcloud_to_depth};
use crate::loss::{depth_loss, final_loss, LossConfig};
use crate::metrics::{aggregate, evaluate};
use crate::model::{ModelConfig, ParamVars, TodeNet};
use crate::tensor::gradcheck::{check_gradients, GradCheckOptions, MODEL_STEP, TOLERANCE};
use crate::tensor::{set_backward_fault, Tape, Tensor, UpsampleMode, Var};
use crate::train::{decode_checkpoint, encode_checkpoint};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn render(&self) -> String {
        let w = self.results.iter().map(|r| r.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for r in &self.results {
            let status = if r.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{status}  {:<w$}  {:>7.3}s  {}", r.name, r.seconds, r.detail);
        }
        let failed = self.results.iter().filter(|r| !r.passed).count();
        let _ = writeln!(
            out,
            "{} checks, {} failed, total runtime {:.3}s",
            self.results.len(),
            failed,
            self.seconds
        );
        out
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CheckOptions {
    /// Corrupts a backward rule for the duration of the run.
    pub inject_fault: bool,
}

type Check = (&'static str, fn() -> Result<String>);

const CHECKS: &[Check] = &[
    ("grad.matmul", grad_matmul),
    ("grad.batched_matmul", grad_batched_matmul),
    ("grad.conv2d", grad_conv2d),
    ("grad.layer_norm", grad_layer_norm),
    ("grad.softmax", grad_softmax),
    ("grad.pointwise", grad_pointwise),
    ("grad.broadcast", grad_broadcast),
    ("grad.pool_upsample", grad_pool_upsample),
    ("grad.reshape_gather_concat", grad_structural),
    ("grad.window_attention", grad_window_attention),
    ("grad.loss", grad_loss),
    ("grad.model", grad_model),
    ("attention.row_stochastic", attention_rows),
    ("attention.cross_region_mass", attention_cross_region),
    ("attention.global_reference", attention_global),
    ("loss.identities", loss_identities),
    ("metrics.scalar_oracle", metrics_oracle),
    ("roundtrip.checkpoint", roundtrip_checkpoint),
    ("roundtrip.ply", roundtrip_ply),
    ("roundtrip.geometry", roundtrip_geometry),
    ("roundtrip.dataset", roundtrip_dataset),
];

/// Runs every check on the current thread.
pub fn run_checks(opts: &CheckOptions) -> CheckReport {
    set_backward_fault(opts.inject_fault);
    let start = Instant::now();
    let results = CHECKS
        .iter()
        .map(|(name, f)| {
            let t0 = Instant::now();
            let (passed, detail) = match f() {
                Ok(d) => (true, d),
                Err(e) => (false, e.to_string()),
            };
            CheckResult { name: name.to_string(), passed, detail, seconds: t0.elapsed().as_secs_f64() }
        })
        .collect();
    set_backward_fault(false);
    CheckReport { results, seconds: start.elapsed().as_secs_f64() }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `sum(y ⊙ r)` for a fixed random `r`, so every output element matters.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = tape.constant(random(tape.shape(y), &mut rng(seed)));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn grad_case<F>(inputs: Vec<Tensor<f64>>, f: F) -> Result<String>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let report = check_gradients(&inputs, f, &GradCheckOptions::default())?;
    let err = report.max_rel_error();
    if report.passes(TOLERANCE) {
        Ok(format!("max rel error {err:.2e}"))
    } else {
        Err(Error::Numerical(format!("max rel error {err:.2e} ≥ {TOLERANCE:e}")))
    }
}

fn grad_matmul() -> Result<String> {
    let mut r = rng(1);
    grad_case(vec![random(&[3, 4], &mut r), random(&[4, 5], &mut r)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, 10)
    })
}

fn grad_batched_matmul() -> Result<String> {
    let mut r = rng(2);
    grad_case(vec![random(&[2, 3, 4], &mut r), random(&[2, 5, 4], &mut r)], |t, v| {
        let y = t.matmul_nt(v[0], v[1])?;
        project(t, y, 11)
    })
}

fn grad_conv2d() -> Result<String> {
    let mut r = rng(3);
    grad_case(vec![random(&[2, 5, 7], &mut r), random(&[3, 2, 3, 3], &mut r)], |t, v| {
        let a = t.conv2d(v[0], v[1], 1, 1)?;
        let b = t.conv2d(v[0], v[1], 2, 0)?;
        let pa = project(t, a, 12)?;
        let pb = project(t, b, 13)?;
        t.add(pa, pb)
    })
}

fn grad_layer_norm() -> Result<String> {
    let mut r = rng(4);
    grad_case(vec![random(&[3, 6], &mut r), random(&[6], &mut r), random(&[6], &mut r)], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        project(t, y, 14)
    })
}

fn grad_softmax() -> Result<String> {
    let mut r = rng(5);
    grad_case(vec![random(&[4, 5], &mut r)], |t, v| {
        let y = t.softmax(v[0]);
        project(t, y, 15)
    })
}

fn grad_pointwise() -> Result<String> {
    let mut r = rng(6);
    let mut pos = random(&[3, 4], &mut r);
    pos.data_mut().iter_mut().for_each(|x| *x = x.abs() + 0.5);
    grad_case(vec![random(&[3, 4], &mut r), pos], |t, v| {
        let (x, p) = (v[0], v[1]);
        let sum = t.add(x, p)?;
        let diff = t.sub(sum, x)?;
        let outputs = [
            t.gelu(x),
            t.sigmoid(x),
            t.relu(x),
            t.sqrt(p),
            t.scale(x, 1.7),
            t.add_scalar(x, 0.3),
            t.div(x, p)?,
            t.mul(diff, x)?,
        ];
        let mut total = project(t, outputs[0], 30)?;
        for (k, &y) in outputs.iter().enumerate().skip(1) {
            let s = project(t, y, 30 + k as u64)?;
            total = t.add(total, s)?;
        }
        Ok(total)
    })
}

fn grad_broadcast() -> Result<String> {
    let mut r = rng(7);
    grad_case(vec![random(&[2, 3, 4], &mut r), random(&[3], &mut r), random(&[3, 4], &mut r)], |t, v| {
        let a = t.add_broadcast(v[0], v[1], 1)?;
        let b = t.mul_broadcast(a, v[1], 1)?;
        let c = t.add_broadcast_axes(b, v[2], 1..3)?;
        project(t, c, 17)
    })
}

fn grad_pool_upsample() -> Result<String> {
    let mut r = rng(8);
    grad_case(vec![random(&[2, 3, 4], &mut r)], |t, v| {
        let g = t.global_avg_pool(v[0])?;
        let b = t.upsample2x(v[0], UpsampleMode::Bilinear)?;
        let n = t.upsample2x(v[0], UpsampleMode::Nearest)?;
        let pg = project(t, g, 18)?;
        let pb = project(t, b, 19)?;
        let pn = project(t, n, 20)?;
        let s = t.add(pg, pb)?;
        t.add(s, pn)
    })
}

fn grad_structural() -> Result<String> {
    let mut r = rng(9);
    grad_case(vec![random(&[2, 3, 4], &mut r), random(&[2, 3, 2], &mut r)], |t, v| {
        let c = t.concat(&[v[0], v[1]], 2)?;
        let p = t.permute(c, &[2, 0, 1])?;
        let s = t.reshape(p, &[6, 6])?;
        let idx: Vec<usize> = (0..20).map(|i| (i * 7) % 36).collect();
        let g = t.gather(s, std::sync::Arc::new(idx), &[4, 5])?;
        let sl = t.sum_last(g);
        let m = t.mean(sl);
        let pg = project(t, g, 21)?;
        t.add(pg, m)
    })
}

fn attention_inputs(c: usize, heads: usize, window: usize, r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let span = 2 * window - 1;
    vec![
        random(&[c, c], r),
        random(&[c, c], r),
        random(&[c, c], r),
        random(&[c, c], r),
        random(&[span * span, heads], r),
    ]
}

fn attention_weights(v: &[Var], heads: usize) -> AttentionWeights {
    AttentionWeights { wq: v[0], wk: v[1], wv: v[2], wout: v[3], bias_table: v[4], heads }
}

fn grad_window_attention() -> Result<String> {
    let mut r = rng(10);
    let grid = WindowGrid::new(4, 4, 2, 1)?;
    let mut inputs = attention_inputs(4, 2, 2, &mut r);
    inputs.push(random(&[4, 4, 4], &mut r));
    grad_case(inputs, move |t, v| {
        let shifted = cyclic_shift(t, v[5], grid.shift)?;
        let win = window_partition(t, shifted, grid.window)?;
        let mask = attention_mask::<f64>(&grid);
        let out = multi_head_attention_with_weights(t, win, &attention_weights(v, 2), Some(&mask))?;
        project(t, out.output, 22)
    })
}

fn grad_loss() -> Result<String> {
    let mut r = rng(11);
    let mut pred = random(&[5, 6], &mut r);
    pred.data_mut().iter_mut().for_each(|x| *x = 1.0 + 0.2 * *x);
    let gt = Tensor::from_fn(&[5, 6], |i| 1.0 + 0.05 * (i as f64).sin());
    let mask = Tensor::from_fn(&[5, 6], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
    let cfg = LossConfig { beta_normal: 0.5, ..Default::default() };
    grad_case(vec![pred], move |t, v| {
        let g = t.constant(gt.clone());
        final_loss(t, v[0], g, &mask, &cfg)
    })
}

/// A tiny network for end-to-end checks; every stage keeps a shifted window.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 4,
        stage_depths: [2, 2, 2, 2],
        heads: [1, 2, 2, 2],
        window: 2,
        height: 32,
        width: 32,
        max_depth: 2.0,
        ..Default::default()
    }
}

fn grad_model() -> Result<String> {
    let cfg = tiny_model_config();
    let net = TodeNet::<f64>::new(cfg.clone(), 3)?;
    let mut r = rng(12);
    let input = Tensor::from_fn(&[cfg.in_channels(), cfg.height, cfg.width], |_| r.gen_range(0.0..1.0));
    let gt = Tensor::from_fn(&[cfg.height, cfg.width], |_| r.gen_range(0.5..1.5));
    let mask = Tensor::from_fn(&[cfg.height, cfg.width], |i| if (i / 7) % 2 == 0 { 1.0 } else { 0.0 });
    let params = net.params().tensors().to_vec();
    let opts = GradCheckOptions { step: MODEL_STEP, max_coords: Some(2), ..Default::default() };
    let report = check_gradients(
        &params,
        |t, v| {
            let pv = ParamVars::from_vars(v.to_vec());
            let x = t.constant(input.clone());
            let y = net.forward(t, &pv, x)?;
            let pred = t.scale(y, cfg.max_depth);
            let g = t.constant(gt.clone());
            final_loss(t, pred, g, &mask, &LossConfig::default())
        },
        &opts,
    )?;
    let err = report.max_rel_error();
    if report.passes(TOLERANCE) {
        Ok(format!("{} parameters, {} coordinates, max rel error {err:.2e}", params.len(), report.coords_checked))
    } else {
        Err(Error::Numerical(format!("max rel error {err:.2e} ≥ {TOLERANCE:e}")))
    }
}

fn attention_case(shift: usize) -> Result<(Tensor<f64>, WindowGrid)> {
    let mut r = rng(13);
    let grid = WindowGrid::new(8, 8, 4, shift)?;
    let inputs = attention_inputs(6, 2, 4, &mut r);
    let x = random(&[8, 8, 6], &mut r);
    let mut t = Tape::new();
    let v: Vec<Var> = inputs.into_iter().map(|i| t.constant(i)).collect();
    let x = t.constant(x);
    let shifted = if shift > 0 { cyclic_shift(&mut t, x, shift)? } else { x };
    let win = window_partition(&mut t, shifted, 4)?;
    let mask = (shift > 0).then(|| attention_mask::<f64>(&grid));
    let out = multi_head_attention_with_weights(&mut t, win, &attention_weights(&v, 2), mask.as_ref())?;
    Ok((t.value(out.weights).clone(), grid))
}

fn attention_rows() -> Result<String> {
    let mut worst = 0.0f64;
    for shift in [0, 2] {
        let (w, grid) = attention_case(shift)?;
        let t = grid.tokens_per_window();
        for row in w.data().chunks(t) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    if worst < 1e-6 {
        Ok(format!("max |row sum − 1| = {worst:.1e}"))
    } else {
        Err(Error::Numerical(format!("row sum deviates by {worst:.1e}")))
    }
}

/// Whether a token of the rolled map wrapped around in each axis; tokens
/// of one window may attend to each other only when these agree.
fn wrapped(pos: usize, extent: usize, shift: usize) -> bool {
    pos + shift >= extent
}

fn attention_cross_region() -> Result<String> {
    let (w, grid) = attention_case(2)?;
    let (win, t) = (grid.window, grid.tokens_per_window());
    let per_row = grid.width / win;
    let heads = w.shape()[1];
    let mut worst = 0.0f64;
    for n in 0..grid.num_windows() {
        let (wy, wx) = (n / per_row, n % per_row);
        let region = |i: usize| {
            let (r, c) = (wy * win + i / win, wx * win + i % win);
            (wrapped(r, grid.height, grid.shift), wrapped(c, grid.width, grid.shift))
        };
        for h in 0..heads {
            for i in 0..t {
                let mass: f64 = (0..t).filter(|&j| region(i) != region(j)).map(|j| w.at(&[n, h, i, j])).sum();
                worst = worst.max(mass);
            }
        }
    }
    if worst < 1e-6 {
        Ok(format!("max cross-region mass {worst:.1e}"))
    } else {
        Err(Error::Numerical(format!("cross-region mass {worst:.1e}")))
    }
}

/// Plain-loop global attention over an `n×n` map with the same weights.
fn global_attention_reference(x: &Tensor<f64>, w: &[Tensor<f64>], heads: usize) -> Tensor<f64> {
    let (n, c) = (x.shape()[0], x.shape()[2]);
    let t = n * n;
    let d = c / heads;
    let proj = |m: &Tensor<f64>| -> Vec<Vec<f64>> {
        (0..t)
            .map(|i| (0..c).map(|o| (0..c).map(|k| x.data()[i * c + k] * m.at(&[k, o])).sum()).collect())
            .collect()
    };
    let (q, k, v) = (proj(&w[0]), proj(&w[1]), proj(&w[2]));
    let span = 2 * n - 1;
    let mut ctx = vec![vec![0.0; c]; t];
    for h in 0..heads {
        for i in 0..t {
            let logits: Vec<f64> = (0..t)
                .map(|j| {
                    let dot: f64 = (0..d).map(|e| q[i][h * d + e] * k[j][h * d + e]).sum();
                    let dy = i / n + n - 1 - j / n;
                    let dx = i % n + n - 1 - j % n;
                    dot / (d as f64).sqrt() + w[4].at(&[dy * span + dx, h])
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..t {
                for dd in 0..d {
                    ctx[i][h * d + dd] += e[j] / z * v[j][h * d + dd];
                }
            }
        }
    }
    Tensor::from_fn(&[t, c], |idx| {
        let (i, o) = (idx / c, idx % c);
        (0..c).map(|k| ctx[i][k] * w[3].at(&[k, o])).sum()
    })
}

fn attention_global() -> Result<String> {
    let mut r = rng(14);
    let inputs = attention_inputs(6, 3, 4, &mut r);
    let x = random(&[4, 4, 6], &mut r);
    let reference = global_attention_reference(&x, &inputs, 3);
    let mut t = Tape::new();
    let v: Vec<Var> = inputs.into_iter().map(|i| t.constant(i)).collect();
    let xv = t.constant(x);
    let win = window_partition(&mut t, xv, 4)?;
    let out = multi_head_attention_with_weights(&mut t, win, &attention_weights(&v, 3), None)?;
    let got = t.value(out.output).clone().reshape(&[16, 6])?;
    let diff = got.max_abs_diff(&reference);
    if diff < 1e-5 {
        Ok(format!("max abs diff {diff:.1e}"))
    } else {
        Err(Error::Numerical(format!("windowed attention differs from global reference by {diff:.1e}")))
    }
}

fn loss_identities() -> Result<String> {
    let gt = Tensor::from_fn(&[8, 8], |i| 0.8 + 0.1 * ((i as f64) * 0.37).sin());
    let mut t = Tape::new();
    let g = t.constant(gt.clone());
    let p = t.constant(gt.clone());
    let zero = depth_loss(&mut t, p, g, &LossConfig::default())?;
    let zero = t.value(zero).item();
    let c = 0.25;
    let off = t.constant(Tensor::from_fn(&[8, 8], |i| gt.data()[i] + c));
    let offset = depth_loss(&mut t, off, g, &LossConfig::default())?;
    let offset = t.value(offset).item();
    if zero.abs() > 1e-7 || (offset - c * c).abs() > 1e-6 {
        return Err(Error::Numerical(format!("loss(gt, gt) = {zero:e}, loss(gt + {c}, gt) = {offset}")));
    }
    Ok(format!("loss(gt, gt) = {zero:e}, offset loss = {offset}"))
}

fn metrics_oracle() -> Result<String> {
    let mut r = rng(15);
    let mut worst = 0.0f64;
    let mut reports = Vec::new();
    for _ in 0..20 {
        let gt: Vec<f64> = (0..256).map(|_| r.gen_range(0.2..3.0)).collect();
        let pred: Vec<f64> = gt.iter().map(|g| g * r.gen_range(0.7..1.3)).collect();
        let mask: Vec<u8> = (0..256).map(|_| u8::from(r.gen_bool(0.6))).collect();
        let rep = evaluate(&pred, &gt, &mask)?;
        let (mut n, mut sq, mut ab, mut rel, mut d125) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..256 {
            if mask[i] == 1 {
                let e = pred[i] - gt[i];
                n += 1.0;
                sq += e * e;
                ab += e.abs();
                rel += e.abs() / gt[i];
                if (pred[i] / gt[i]).max(gt[i] / pred[i]) < 1.25 {
                    d125 += 1.0;
                }
            }
        }
        for (a, b) in [
            (rep.rmse, (sq / n as f64).sqrt()),
            (rep.mae, ab / n),
            (rep.rel, rel / n),
            (rep.delta_125, 100.0 * d125 / n),
        ] {
            worst = worst.max((a - b).abs());
        }
        if !(rep.delta_105 <= rep.delta_110 && rep.delta_110 <= rep.delta_125) {
            return Err(Error::Numerical("δ thresholds are not monotone".into()));
        }
        reports.push(rep);
    }
    aggregate(&reports)?;
    if worst < 1e-9 {
        Ok(format!("max deviation {worst:.1e}"))
    } else {
        Err(Error::Numerical(format!("metrics deviate from scalar loop by {worst:.1e}")))
    }
}

fn roundtrip_checkpoint() -> Result<String> {
    let net = TodeNet::<f32>::new(tiny_model_config(), 5)?;
    let bytes = encode_checkpoint(net.params())?;
    let back = decode_checkpoint::<f32>(&bytes)?;
    let same = back.len() == net.params().len()
        && back.iter().zip(net.params().iter()).all(|((n, t), (m, u))| {
            n == m && t.shape() == u.shape() && t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        });
    if same {
        Ok(format!("{} tensors, {} bytes", back.len(), bytes.len()))
    } else {
        Err(Error::Format("checkpoint round trip changed a tensor".into()))
    }
}

fn roundtrip_ply() -> Result<String> {
    let mut r = rng(16);
    let n = 50;
    let points: Vec<[f32; 3]> = (0..n).map(|_| [r.gen(), r.gen::<f32>() - 0.5, r.gen::<f32>() + 0.1]).collect();
    let colors: Vec<[u8; 3]> = (0..n).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
    let pc = crate::geometry::PointCloud::new(points, colors)?;
    let back = parse_ply(&ply_string(&pc))?;
    if back == pc {
        Ok(format!("{n} vertices"))
    } else {
        Err(Error::Format("PLY re-parse differs".into()))
    }
}

fn roundtrip_geometry() -> Result<String> {
    let mut r = rng(17);
    let (h, w) = (24, 32);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let intr = CameraIntrinsics::new(
            r.gen_range(20.0..60.0),
            r.gen_range(20.0..60.0),
            r.gen_range(0.0..w as f64),
            r.gen_range(0.0..h as f64),
        )?;
        let depth: Vec<f32> =
            (0..h * w).map(|_| if r.gen_bool(0.9) { r.gen_range(0.2..4.0) } else { 0.0 }).collect();
        let pc = depth_to_pointcloud(&depth, h, w, None, &intr)?;
        let back = pointcloud_to_depth(&pc, &intr, h, w);
        for (a, b) in depth.iter().zip(&back) {
            worst = worst.max((a - b).abs() as f64);
        }
    }
    if worst < 1e-5 {
        Ok(format!("max abs error {worst:.1e} m"))
    } else {
        Err(Error::Numerical(format!("round trip error {worst:e} m")))
    }
}

fn roundtrip_dataset() -> Result<String> {
    let dir = std::env::temp_dir().join(format!("tode-check-{}-{}", std::process::id(), rng(0).gen::<u32>()));
    let sample = generate_sample(&SynthConfig { width: 32, height: 24, seed: 18, ..Default::default() })?;
    let result = write_sample(&dir, &sample).and_then(|_| load_sample(&dir));
    let _ = std::fs::remove_dir_all(&dir);
    if result? == sample {
        Ok("sample reloads identically".into())
    } else {
        Err(Error::Format("dataset round trip changed the sample".into()))
    }
}
