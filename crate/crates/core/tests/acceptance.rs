//! Acceptance gate for the whole pipeline. Each test checks one shipping
//! guarantee and prints a single `ACCEPT <name>: PASS (<elapsed>, <detail>)`
//! line (visible with `--nocapture`), so a log scrape shows the gate at a
//! glance. Runtime budgets are asserted, not aspirational.
//!
//! Every oracle in this file is written from scratch against the documented
//! conventions — dense per-voxel math, all-pairs distance scans, byte
//! comparisons — so it cannot share a code path (or a bug) with the
//! production implementation it checks.

use std::fs;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use avseg_core::config::RunConfig;
use avseg_core::infer;
use avseg_core::losses::{ce_loss, ce_loss_grad, dice_loss, dice_loss_grad, sup_loss};
use avseg_core::manifest::Manifest;
use avseg_core::metrics;
use avseg_core::model::SegModel;
use avseg_core::nn::adapters::{ImageAdapter, TextAdapterStack};
use avseg_core::nn::attention::{CrossAttentionFusion, SelfAttentionBlock};
use avseg_core::nn::head::{theta_len, DynamicHead, ThetaGenerator};
use avseg_core::nn::{Module, Tensor};
use avseg_core::phantom::{write_phantom_dataset, PhantomConfig};
use avseg_core::preproc::{
    collapse_labels, remap_labels, SideSplit, SupervisionMask,
};
use avseg_core::rng;
use avseg_core::train::train;
use avseg_core::volume::{Grid3, LabelScheme, LabelVolume};
use avseg_core::checkpoint::{file_sha256, Checkpoint};
use avseg_core::dataset::load_cases;

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Prints the one-line verdict for a criterion that has fully passed.
fn pass(name: &str, t0: Instant, detail: &str) {
    println!(
        "ACCEPT {name}: PASS ({:.2}s, {detail})",
        t0.elapsed().as_secs_f64()
    );
}

/// Asserts the test finished inside its runtime budget (seconds).
fn assert_budget(name: &str, t0: Instant, limit_s: f64) {
    let el = t0.elapsed().as_secs_f64();
    assert!(
        el < limit_s,
        "{name} blew its runtime budget: {el:.1}s ≥ {limit_s}s"
    );
}

/// Relative error with an absolute floor so near-zero gradients compare
/// absolutely instead of dividing by ~0.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// 1. Attention rows are probability distributions
// ---------------------------------------------------------------------------

#[test]
fn accept_01_attention_rows_sum_to_one() {
    let t0 = Instant::now();
    let dims = [4usize, 8, 16];
    let mut rows_checked = 0usize;
    for trial in 0..1000u64 {
        let mut r = rng::stream(6101, "accept.attn", trial);
        let k = r.gen_range(1..=6);
        let d = dims[r.gen_range(0..dims.len())];
        let attn = if trial % 2 == 0 {
            let b = r.gen_range(1..=3);
            let mut fusion = CrossAttentionFusion::new("a.fuse", d, &mut r);
            let text = Tensor::uniform(&[b, k, d], 2.0, &mut r);
            let image = Tensor::uniform(&[b, k, d], 2.0, &mut r);
            fusion.forward(&text, &image).unwrap();
            fusion.last_attention.clone().unwrap()
        } else {
            let mut block = SelfAttentionBlock::new("a.self", d, &mut r);
            let x = Tensor::uniform(&[k, d], 3.0, &mut r);
            block.forward(&x).unwrap();
            block.last_attention.clone().unwrap()
        };
        for row in attn.data.chunks_exact(k) {
            let sum: f64 = row.iter().sum();
            assert!(
                (sum - 1.0).abs() < 1e-6,
                "attention row sums to {sum} (trial {trial}, K={k}, D={d})"
            );
            assert!(row.iter().all(|&w| w >= 0.0), "negative attention weight");
            rows_checked += 1;
        }
    }
    assert_budget("attention_rows_sum_to_one", t0, 10.0);
    pass(
        "attention_rows_sum_to_one",
        t0,
        &format!("{rows_checked} rows over 1000 random modules, |Σ−1| < 1e-6"),
    );
}

// ---------------------------------------------------------------------------
// 2. Analytic gradients match central finite differences
// ---------------------------------------------------------------------------

/// Scalarizes a tensor output against a fixed random weighting so vector
/// outputs reduce to one differentiable number.
fn dot(t: &Tensor, w: &[f64]) -> f64 {
    t.data.iter().zip(w).map(|(a, b)| a * b).sum()
}

/// Checks every parameter coordinate of a module against a central
/// difference of `loss`, which must evaluate the module from scratch.
fn check_param_grads<M: Module + Clone>(
    what: &str,
    module: &mut M,
    analytic: &[Vec<f64>],
    mut loss: impl FnMut(&mut M) -> f64,
    h: f64,
    tol: f64,
) {
    let mut checked = 0usize;
    for (ti, grads) in analytic.iter().enumerate() {
        for i in 0..grads.len() {
            let mut eval = |delta: f64| -> f64 {
                let mut probe = module.clone();
                let mut tj = 0usize;
                probe.visit_params(&mut |p| {
                    if tj == ti {
                        p.value[i] += delta;
                    }
                    tj += 1;
                });
                loss(&mut probe)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = grads[i];
            assert!(
                rel_err(a, numeric) <= tol,
                "{what}: param tensor {ti} coord {i}: analytic {a} vs numeric {numeric}"
            );
            checked += 1;
        }
    }
    assert!(checked > 0, "{what}: no parameters checked");
}

/// Central finite difference of `f` over a flat slice, one coordinate at a
/// time.
fn numeric_grad_vec(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xv = x.to_vec();
    (0..xv.len())
        .map(|i| {
            let orig = xv[i];
            xv[i] = orig + h;
            let fp = f(&xv);
            xv[i] = orig - h;
            let fm = f(&xv);
            xv[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn collect_grads<M: Module>(m: &mut M) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    m.visit_params(&mut |p| out.push(p.grad.clone()));
    out
}

#[test]
fn accept_02_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let (h, tol) = (1e-5, 1e-3);
    let mut coords = 0usize;

    // --- per-class text adapter stack ------------------------------------
    {
        let mut r = rng::stream(6102, "accept.grad", 0);
        let (k, d) = (3usize, 8usize);
        let mut m = TextAdapterStack::new("g.text", k, d, 4, true, &mut r).unwrap();
        // The output projection of the inner attention starts at zero; give
        // it real weights so every upstream parameter is first-order active.
        m.attn.wo.w.value.iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
        let x = Tensor::uniform(&[k, d], 1.0, &mut r);
        let w: Vec<f64> = (0..k * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y = m.forward(&x).unwrap();
        m.zero_grad();
        let gx = m.backward(&Tensor::from_vec(&y.shape, w.clone()).unwrap());
        let analytic = collect_grads(&mut m);
        coords += analytic.iter().map(Vec::len).sum::<usize>();
        check_param_grads(
            "text adapter stack",
            &mut m,
            &analytic,
            |probe| dot(&probe.forward(&x).unwrap(), &w),
            h,
            tol,
        );
        let num_gx = numeric_grad_vec(&x.data, h, |vals| {
            let mut probe = m.clone();
            let xin = Tensor::from_vec(&x.shape, vals.to_vec()).unwrap();
            dot(&probe.forward(&xin).unwrap(), &w)
        });
        for (i, (&a, &n)) in gx.data.iter().zip(&num_gx).enumerate() {
            assert!(rel_err(a, n) <= tol, "text adapter input grad {i}: {a} vs {n}");
        }
    }

    // --- image adapter -----------------------------------------------------
    {
        let mut r = rng::stream(6102, "accept.grad", 1);
        let (b, c, d) = (2usize, 3usize, 8usize);
        let mut m = ImageAdapter::new("g.img", c, d, &mut r);
        let x = Tensor::uniform(&[b, c, 2, 2, 2], 1.0, &mut r);
        let w: Vec<f64> = (0..b * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y = m.forward(&x).unwrap();
        m.zero_grad();
        let gx = m.backward(&Tensor::from_vec(&y.shape, w.clone()).unwrap());
        let analytic = collect_grads(&mut m);
        coords += analytic.iter().map(Vec::len).sum::<usize>();
        check_param_grads(
            "image adapter",
            &mut m,
            &analytic,
            |probe| dot(&probe.forward(&x).unwrap(), &w),
            h,
            tol,
        );
        let num_gx = numeric_grad_vec(&x.data, h, |vals| {
            let mut probe = m.clone();
            let xin = Tensor::from_vec(&x.shape, vals.to_vec()).unwrap();
            dot(&probe.forward(&xin).unwrap(), &w)
        });
        for (i, (&a, &n)) in gx.data.iter().zip(&num_gx).enumerate() {
            assert!(rel_err(a, n) <= tol, "image adapter input grad {i}: {a} vs {n}");
        }
    }

    // --- cross-attention fusion (parameters and both inputs) ---------------
    {
        let mut r = rng::stream(6102, "accept.grad", 2);
        let (b, k, d) = (2usize, 3usize, 8usize);
        let mut m = CrossAttentionFusion::new("g.fuse", d, &mut r);
        let text = Tensor::uniform(&[b, k, d], 1.0, &mut r);
        let image = Tensor::uniform(&[b, k, d], 1.0, &mut r);
        let w: Vec<f64> = (0..b * k * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y = m.forward(&text, &image).unwrap();
        m.zero_grad();
        let (g_text, g_image) = m.backward(&Tensor::from_vec(&y.shape, w.clone()).unwrap());
        let analytic = collect_grads(&mut m);
        coords += analytic.iter().map(Vec::len).sum::<usize>();
        check_param_grads(
            "cross-attention fusion",
            &mut m,
            &analytic,
            |probe| dot(&probe.forward(&text, &image).unwrap(), &w),
            h,
            tol,
        );
        let num_gt = numeric_grad_vec(&text.data, h, |vals| {
            let mut probe = m.clone();
            let tin = Tensor::from_vec(&text.shape, vals.to_vec()).unwrap();
            dot(&probe.forward(&tin, &image).unwrap(), &w)
        });
        for (i, (&a, &n)) in g_text.data.iter().zip(&num_gt).enumerate() {
            assert!(rel_err(a, n) <= tol, "fusion text grad {i}: {a} vs {n}");
        }
        let num_gi = numeric_grad_vec(&image.data, h, |vals| {
            let mut probe = m.clone();
            let iin = Tensor::from_vec(&image.shape, vals.to_vec()).unwrap();
            dot(&probe.forward(&text, &iin).unwrap(), &w)
        });
        for (i, (&a, &n)) in g_image.data.iter().zip(&num_gi).enumerate() {
            assert!(rel_err(a, n) <= tol, "fusion image grad {i}: {a} vs {n}");
        }
    }

    // --- head-parameter generator ------------------------------------------
    {
        let mut r = rng::stream(6102, "accept.grad", 3);
        let (b, k, d, c_dec, c_mid) = (1usize, 2usize, 8usize, 4usize, 3usize);
        let mut m = ThetaGenerator::new("g.theta", d, c_dec, c_mid, &mut r);
        let x = Tensor::uniform(&[b, k, d], 1.0, &mut r);
        let w: Vec<f64> = (0..b * k * theta_len(c_dec, c_mid))
            .map(|_| r.gen_range(-1.0..1.0))
            .collect();
        let y = m.forward(&x).unwrap();
        m.zero_grad();
        let gx = m.backward(&Tensor::from_vec(&y.shape, w.clone()).unwrap());
        let analytic = collect_grads(&mut m);
        coords += analytic.iter().map(Vec::len).sum::<usize>();
        check_param_grads(
            "theta generator",
            &mut m,
            &analytic,
            |probe| dot(&probe.forward(&x).unwrap(), &w),
            h,
            tol,
        );
        let num_gx = numeric_grad_vec(&x.data, h, |vals| {
            let mut probe = m.clone();
            let xin = Tensor::from_vec(&x.shape, vals.to_vec()).unwrap();
            dot(&probe.forward(&xin).unwrap(), &w)
        });
        for (i, (&a, &n)) in gx.data.iter().zip(&num_gx).enumerate() {
            assert!(rel_err(a, n) <= tol, "theta generator input grad {i}: {a} vs {n}");
        }
    }

    // --- dynamic head (both inputs; the head itself owns no parameters) ----
    {
        let mut r = rng::stream(6102, "accept.grad", 4);
        let (b, k, c, c_mid) = (1usize, 2usize, 3usize, 2usize);
        let tlen = theta_len(c, c_mid);
        let mut m = DynamicHead::new(c_mid);
        let f = Tensor::uniform(&[b, c, 2, 2, 2], 1.0, &mut r);
        let theta = Tensor::uniform(&[b, k, tlen], 1.0, &mut r);
        let w: Vec<f64> = (0..b * k * 8).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y = m.forward(&f, &theta).unwrap();
        let (gf, gtheta) = m.backward(&Tensor::from_vec(&y.shape, w.clone()).unwrap());
        let num_gf = numeric_grad_vec(&f.data, h, |vals| {
            let mut probe = DynamicHead::new(c_mid);
            let fin = Tensor::from_vec(&f.shape, vals.to_vec()).unwrap();
            dot(&probe.forward(&fin, &theta).unwrap(), &w)
        });
        for (i, (&a, &n)) in gf.data.iter().zip(&num_gf).enumerate() {
            assert!(rel_err(a, n) <= tol, "dynamic head feature grad {i}: {a} vs {n}");
        }
        let num_gth = numeric_grad_vec(&theta.data, h, |vals| {
            let mut probe = DynamicHead::new(c_mid);
            let tin = Tensor::from_vec(&theta.shape, vals.to_vec()).unwrap();
            dot(&probe.forward(&f, &tin).unwrap(), &w)
        });
        for (i, (&a, &n)) in gtheta.data.iter().zip(&num_gth).enumerate() {
            assert!(rel_err(a, n) <= tol, "dynamic head theta grad {i}: {a} vs {n}");
        }
        coords += gf.data.len() + gtheta.data.len();
    }

    // --- dice and cross-entropy losses --------------------------------------
    {
        let mut r = rng::stream(6102, "accept.grad", 5);
        let n = 40usize;
        let p: Vec<f64> = (0..n).map(|_| r.gen_range(0.05..0.95)).collect();
        let y: Vec<f64> = (0..n).map(|_| f64::from(r.gen_bool(0.4))).collect();
        let gd = dice_loss_grad(&p, &y);
        let num_gd = numeric_grad_vec(&p, 1e-6, |v| dice_loss(v, &y).unwrap());
        for (i, (&a, &nv)) in gd.iter().zip(&num_gd).enumerate() {
            assert!(rel_err(a, nv) <= tol, "dice grad {i}: {a} vs {nv}");
        }
        let gc = ce_loss_grad(&p, &y);
        let num_gc = numeric_grad_vec(&p, 1e-6, |v| ce_loss(v, &y).unwrap());
        for (i, (&a, &nv)) in gc.iter().zip(&num_gc).enumerate() {
            assert!(rel_err(a, nv) <= tol, "ce grad {i}: {a} vs {nv}");
        }
        coords += 2 * n;

        // And the combined supervised loss over a full batch tensor, which
        // also exercises the class/spatial masking paths.
        let (kc, s) = (2usize, 3usize);
        let shape = [1usize, kc, s, s, s];
        let nvox = s * s * s;
        let probs = Tensor::from_vec(
            &shape,
            (0..kc * nvox).map(|_| sigmoid(r.gen_range(-2.0..2.0))).collect(),
        )
        .unwrap();
        let labels = vec![Grid3::from_fn([s, s, s], |x, y, z| {
            // Guarantee both classes appear so both dice terms are active.
            match (x + 2 * y + 3 * z) % 5 {
                0 => 1u8,
                1 => 2u8,
                _ => 0u8,
            }
        })];
        let masks = vec![SupervisionMask {
            supervised_classes: vec![1, 2],
            spatial_mask: None,
        }];
        let (_, grad) = sup_loss(&probs, &labels, &masks).unwrap();
        let num = numeric_grad_vec(&probs.data, 1e-6, |vals| {
            let pin = Tensor::from_vec(&shape, vals.to_vec()).unwrap();
            sup_loss(&pin, &labels, &masks).unwrap().0.total
        });
        for (i, (&a, &nv)) in grad.data.iter().zip(&num).enumerate() {
            assert!(rel_err(a, nv) <= tol, "sup_loss grad {i}: {a} vs {nv}");
        }
        coords += grad.data.len();
    }

    assert_budget("gradients_match_finite_differences", t0, 120.0);
    pass(
        "gradients_match_finite_differences",
        t0,
        &format!("{coords} coordinates, rel err ≤ 1e-3 vs central differences"),
    );
}

// ---------------------------------------------------------------------------
// 3. Overlap and surface metrics match brute-force oracles
// ---------------------------------------------------------------------------

/// All-pairs, loop-everything reimplementation of the four metrics with the
/// same documented conventions: DSC/Jaccard in percent with both-empty = 100;
/// HD95 = interpolated 95th percentile of pooled symmetric border distances,
/// falling back to the physical extent diagonal when either mask is empty;
/// NSD = fraction of pooled border points within `tau` (squared comparison),
/// 1 when both masks are empty, 0 when exactly one is.
struct OracleMetrics {
    dsc: f64,
    jaccard: f64,
    hd95: f64,
    nsd: f64,
}

fn oracle_border(mask: &Grid3<bool>) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = mask.shape();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask.get(x, y, z) {
                    continue;
                }
                let inside = |dx: isize, dy: isize, dz: isize| -> bool {
                    let (a, b, c) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    a >= 0
                        && b >= 0
                        && c >= 0
                        && (a as usize) < nx
                        && (b as usize) < ny
                        && (c as usize) < nz
                        && mask.get(a as usize, b as usize, c as usize)
                };
                let interior = inside(-1, 0, 0)
                    && inside(1, 0, 0)
                    && inside(0, -1, 0)
                    && inside(0, 1, 0)
                    && inside(0, 0, -1)
                    && inside(0, 0, 1);
                if !interior {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Minimum squared physical distance from `p` to any point in `points`.
fn oracle_min_sq(p: [usize; 3], points: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    points
        .iter()
        .map(|q| {
            (0..3)
                .map(|i| {
                    let d = (p[i] as f64 - q[i] as f64) * spacing[i];
                    d * d
                })
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

fn oracle_percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

fn oracle_metrics(
    pred: &Grid3<bool>,
    gt: &Grid3<bool>,
    spacing: [f64; 3],
    tau: f64,
) -> OracleMetrics {
    let mut tp = 0usize;
    let mut np = 0usize;
    let mut ng = 0usize;
    let [nx, ny, nz] = pred.shape();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (p, g) = (pred.get(x, y, z), gt.get(x, y, z));
                tp += usize::from(p && g);
                np += usize::from(p);
                ng += usize::from(g);
            }
        }
    }
    let dsc = if np + ng == 0 {
        100.0
    } else {
        200.0 * tp as f64 / (np + ng) as f64
    };
    let union = np + ng - tp;
    let jaccard = if union == 0 {
        100.0
    } else {
        100.0 * tp as f64 / union as f64
    };

    let (hd95, nsd);
    if np == 0 || ng == 0 {
        hd95 = (0..3)
            .map(|i| (pred.shape()[i] as f64 * spacing[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        nsd = if np == 0 && ng == 0 { 1.0 } else { 0.0 };
    } else {
        let bp = oracle_border(pred);
        let bg = oracle_border(gt);
        let tau_sq = tau * tau;
        let mut pooled_sq = Vec::with_capacity(bp.len() + bg.len());
        for &p in &bp {
            pooled_sq.push(oracle_min_sq(p, &bg, spacing));
        }
        for &g in &bg {
            pooled_sq.push(oracle_min_sq(g, &bp, spacing));
        }
        let dists: Vec<f64> = pooled_sq.iter().map(|&d| d.sqrt()).collect();
        hd95 = oracle_percentile(&dists, 95.0);
        let within = pooled_sq.iter().filter(|&&d| d <= tau_sq).count();
        nsd = within as f64 / pooled_sq.len() as f64;
    }
    OracleMetrics { dsc, jaccard, hd95, nsd }
}

#[test]
fn accept_03_metrics_match_all_pairs_oracle() {
    let t0 = Instant::now();
    // Dyadic spacings keep both distance routes exactly representable, so
    // the 1e-9 comparison tests logic rather than floating-point luck.
    let spacings = [
        [1.0, 1.0, 1.0],
        [1.0, 2.0, 1.0],
        [0.5, 1.0, 2.0],
        [2.0, 0.5, 1.0],
        [1.0, 1.0, 4.0],
    ];
    for trial in 0..200u64 {
        let mut r = rng::stream(6103, "accept.metrics", trial);
        let shape = [
            r.gen_range(1..=12usize),
            r.gen_range(1..=12usize),
            r.gen_range(1..=12usize),
        ];
        let spacing = spacings[r.gen_range(0..spacings.len())];
        let tau = [0.5, 1.0, 2.0][r.gen_range(0..3)];
        // First trials pin the degenerate conventions; the rest are random
        // densities, some of which come out empty on their own.
        let (pred, gt): (Grid3<bool>, Grid3<bool>) = match trial {
            0 => (Grid3::new(shape), Grid3::new(shape)),
            1 => (Grid3::new(shape), Grid3::from_fn(shape, |_, _, _| true)),
            2 => (Grid3::from_fn(shape, |_, _, _| true), Grid3::new(shape)),
            3 => {
                let m = Grid3::from_fn(shape, |x, y, z| (x + y + z) % 3 == 0);
                (m.clone(), m)
            }
            _ => {
                let dp = r.gen_range(0.02..0.5);
                let dg = r.gen_range(0.02..0.5);
                let mk = |dens: f64, r: &mut ChaCha20Rng| {
                    Grid3::from_fn(shape, |_, _, _| r.gen_bool(dens))
                };
                let p = mk(dp, &mut r);
                let g = mk(dg, &mut r);
                (p, g)
            }
        };

        let got = metrics::StructureMetrics::compute(&pred, &gt, spacing, tau).unwrap();
        let want = oracle_metrics(&pred, &gt, spacing, tau);
        assert!(
            (got.dsc - want.dsc).abs() <= 1e-9,
            "trial {trial}: dsc {} vs oracle {}",
            got.dsc,
            want.dsc
        );
        assert!(
            (got.jaccard - want.jaccard).abs() <= 1e-9,
            "trial {trial}: jaccard {} vs oracle {}",
            got.jaccard,
            want.jaccard
        );
        assert!(
            (got.hd95 - want.hd95).abs() <= 1e-9,
            "trial {trial}: hd95 {} vs oracle {}",
            got.hd95,
            want.hd95
        );
        assert!(
            (got.nsd - want.nsd).abs() <= 1e-9,
            "trial {trial}: nsd {} vs oracle {}",
            got.nsd,
            want.nsd
        );
        // Dice and Jaccard are tied by J = D/(2−D); in percent terms
        // J = 100·D/(200−D). Holds for the both-empty convention too.
        let j_from_d = 100.0 * got.dsc / (200.0 - got.dsc);
        assert!(
            (got.jaccard - j_from_d).abs() <= 1e-9,
            "trial {trial}: J {} vs D-derived {}",
            got.jaccard,
            j_from_d
        );
    }
    assert_budget("metrics_match_all_pairs_oracle", t0, 120.0);
    pass(
        "metrics_match_all_pairs_oracle",
        t0,
        "200 mask pairs ≤ 12³: dsc/jaccard/hd95/nsd within 1e-9, J = D/(2−D)",
    );
}

// ---------------------------------------------------------------------------
// 4. The generated voxel head equals a dense per-voxel network
// ---------------------------------------------------------------------------

/// Dense oracle: run the generated three-layer classifier one voxel at a
/// time with its own parameter-slicing arithmetic.
fn oracle_head(f: &Tensor, theta: &Tensor, c_mid: usize) -> Tensor {
    let (b, c) = (f.shape[0], f.shape[1]);
    let k = theta.shape[1];
    let (sx, sy, sz) = (f.shape[2], f.shape[3], f.shape[4]);
    let nvox = sx * sy * sz;
    let tlen = theta.shape[2];
    let mut out = Tensor::zeros(&[b, k, sx, sy, sz]);
    for bi in 0..b {
        for ki in 0..k {
            let th = &theta.data[(bi * k + ki) * tlen..(bi * k + ki + 1) * tlen];
            // Walk the flat layout with a cursor: w1, b1, w2, b2, w3, b3.
            let mut cur = 0usize;
            let w1 = &th[cur..cur + c_mid * c];
            cur += c_mid * c;
            let b1 = &th[cur..cur + c_mid];
            cur += c_mid;
            let w2 = &th[cur..cur + c_mid * c_mid];
            cur += c_mid * c_mid;
            let b2 = &th[cur..cur + c_mid];
            cur += c_mid;
            let w3 = &th[cur..cur + c_mid];
            cur += c_mid;
            let b3 = th[cur];
            for v in 0..nvox {
                let feat: Vec<f64> =
                    (0..c).map(|ci| f.data[(bi * c + ci) * nvox + v]).collect();
                let h1: Vec<f64> = (0..c_mid)
                    .map(|m| {
                        let z: f64 = b1[m]
                            + (0..c).map(|ci| w1[m * c + ci] * feat[ci]).sum::<f64>();
                        z.max(0.0)
                    })
                    .collect();
                let h2: Vec<f64> = (0..c_mid)
                    .map(|m| {
                        let z: f64 = b2[m]
                            + (0..c_mid).map(|j| w2[m * c_mid + j] * h1[j]).sum::<f64>();
                        z.max(0.0)
                    })
                    .collect();
                let z = b3 + (0..c_mid).map(|j| w3[j] * h2[j]).sum::<f64>();
                out.data[(bi * k + ki) * nvox + v] = sigmoid(z);
            }
        }
    }
    out
}

#[test]
fn accept_04_generated_head_equals_dense_oracle() {
    let t0 = Instant::now();
    let mut voxels = 0usize;
    for trial in 0..20u64 {
        let mut r = rng::stream(6104, "accept.head", trial);
        let b = r.gen_range(1..=2usize);
        let c = r.gen_range(1..=5usize);
        let c_mid = r.gen_range(1..=4usize);
        let k = r.gen_range(1..=3usize);
        let shape = [
            r.gen_range(1..=4usize),
            r.gen_range(1..=4usize),
            r.gen_range(1..=4usize),
        ];
        let f = Tensor::uniform(&[b, c, shape[0], shape[1], shape[2]], 1.5, &mut r);
        let theta = Tensor::uniform(&[b, k, theta_len(c, c_mid)], 1.0, &mut r);
        let mut head = DynamicHead::new(c_mid);
        let got = head.forward(&f, &theta).unwrap();
        let want = oracle_head(&f, &theta, c_mid);
        assert_eq!(got.shape, want.shape);
        for (i, (&a, &o)) in got.data.iter().zip(&want.data).enumerate() {
            assert!(
                (a - o).abs() <= 1e-6,
                "trial {trial} coord {i}: head {a} vs oracle {o}"
            );
        }
        voxels += got.data.len();
    }
    assert_budget("generated_head_equals_dense_oracle", t0, 30.0);
    pass(
        "generated_head_equals_dense_oracle",
        t0,
        &format!("{voxels} voxel probabilities over 20 random shapes within 1e-6"),
    );
}

// ---------------------------------------------------------------------------
// 5. Side remap round-trips; masked supervision has exactly zero influence
// ---------------------------------------------------------------------------

#[test]
fn accept_05_remap_roundtrip_and_masked_zero_influence() {
    let t0 = Instant::now();

    // collapse ∘ remap = identity on random artery/vein volumes, for the
    // midplane split and for arbitrary split planes.
    for trial in 0..100u64 {
        let mut r = rng::stream(6105, "accept.remap", trial);
        let shape = [
            r.gen_range(2..=10usize),
            r.gen_range(1..=10usize),
            r.gen_range(1..=10usize),
        ];
        let grid = Grid3::from_fn(shape, |_, _, _| r.gen_range(0..=2u8));
        let labels =
            LabelVolume::new(grid, LabelScheme::ThreeClass, [1.0, 1.0, 1.0], [0.0; 3]).unwrap();
        let side = if trial % 3 == 0 {
            SideSplit::Plane(r.gen_range(0..=shape[0]))
        } else {
            SideSplit::midplane(shape)
        };
        let five = remap_labels(&labels, &side).unwrap();
        let back = collapse_labels(&five).unwrap();
        assert_eq!(back.scheme, LabelScheme::ThreeClass);
        assert_eq!(back.data.data(), labels.data.data(), "trial {trial}");
    }

    // A half-labeled case supervises only its annotated side's classes and
    // voxels: the loss gradient is exactly zero elsewhere, and the loss value
    // ignores whatever the model predicts there.
    let s = 4usize;
    let shape = [1usize, 4, s, s, s];
    let nvox = s * s * s;
    let mut r = rng::stream(6105, "accept.remap", 1000);
    let probs = Tensor::from_vec(
        &shape,
        (0..4 * nvox).map(|_| sigmoid(r.gen_range(-2.0..2.0))).collect(),
    )
    .unwrap();
    let labels = vec![Grid3::from_fn([s, s, s], |x, y, z| match (x < s / 2, (y + z) % 3) {
        (true, 0) => 1u8,
        (true, 1) => 2u8,
        (false, 0) => 3u8,
        (false, 1) => 4u8,
        _ => 0u8,
    })];
    let left_mask = Grid3::from_fn([s, s, s], |x, _, _| x < s / 2);
    let masks = vec![SupervisionMask {
        supervised_classes: vec![1, 2],
        spatial_mask: Some(left_mask),
    }];
    let (report, grad) = sup_loss(&probs, &labels, &masks).unwrap();
    assert!(report.masked_classes.contains(&3) && report.masked_classes.contains(&4));
    let mut zero_coords = 0usize;
    for k in 0..4usize {
        for v in 0..nvox {
            let g = grad.data[k * nvox + v];
            let x = v / (s * s); // channel layout is [K, X, Y, Z], x slowest
            let unsupervised_class = k >= 2; // channels 2,3 ↔ classes 3,4
            let unsupervised_voxel = x >= s / 2;
            if unsupervised_class || unsupervised_voxel {
                assert!(
                    g == 0.0,
                    "gradient {g} leaked to channel {k}, voxel {v} (x={x})"
                );
                zero_coords += 1;
            }
        }
    }

    // Rewriting the unsupervised region of the predictions must not move the
    // loss by a single bit.
    let mut tampered = probs.clone();
    for k in 0..4usize {
        for v in 0..nvox {
            let x = v / (s * s);
            if k >= 2 || x >= s / 2 {
                tampered.data[k * nvox + v] = sigmoid(r.gen_range(-3.0..3.0));
            }
        }
    }
    let (report2, grad2) = sup_loss(&tampered, &labels, &masks).unwrap();
    assert_eq!(report.total.to_bits(), report2.total.to_bits());
    for (a, b) in grad.data.iter().zip(&grad2.data) {
        assert_eq!(a.to_bits(), b.to_bits());
    }

    assert_budget("remap_roundtrip_and_masked_zero_influence", t0, 60.0);
    pass(
        "remap_roundtrip_and_masked_zero_influence",
        t0,
        &format!("100 round-trips exact; {zero_coords} masked gradient coords all 0.0"),
    );
}

// ---------------------------------------------------------------------------
// 6. Text embeddings stay frozen while every adapter parameter trains
// ---------------------------------------------------------------------------

#[test]
fn accept_06_frozen_embeddings_trainable_adapters() {
    let t0 = Instant::now();
    let data = tempfile::tempdir().unwrap();
    let pc = PhantomConfig {
        shape: [24, 24, 24],
        ..PhantomConfig::default()
    };
    write_phantom_dataset(data.path(), &pc, 10, 7, 601).unwrap();

    let mut cfg = RunConfig::desk();
    cfg.manifest = data.path().join("manifest.tsv");
    cfg.split = [80, 20, 0];
    cfg.patch_size = [16, 16, 16];
    cfg.base_channels = 4;
    cfg.batch_size = 2;
    // 8 training cases / batch 2 = 4 steps per epoch; 25 epochs = 100 steps.
    cfg.epochs = 25;
    cfg.validate_every = 25;
    cfg.seed = 602;

    let before = cfg.embedder().unwrap().embed(&cfg.prompts().unwrap()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let outcome = train(&cfg, out.path()).unwrap();
    assert_eq!(outcome.steps, 100, "expected exactly 100 optimization steps");
    let after = cfg.embedder().unwrap().embed(&cfg.prompts().unwrap()).unwrap();

    // Frozen contract: the text embeddings the pipeline would feed the model
    // are bit-identical after training.
    assert_eq!(before.shape, after.shape);
    for (a, b) in before.data.iter().zip(&after.data) {
        assert_eq!(a.to_bits(), b.to_bits(), "text embedding drifted");
    }

    // Trainable contract: every parameter vector of the text and image
    // adapters (and the fusion/generator stages behind them) moved away from
    // its freshly-initialized value.
    let spec = cfg.model_spec().unwrap();
    let mut init = SegModel::new(&spec, &mut rng::stream(cfg.seed, "model.init", 0)).unwrap();
    let mut init_params: Vec<(String, Vec<f64>)> = Vec::new();
    init.visit_params(&mut |p| init_params.push((p.name.clone(), p.value.clone())));

    let ckpt = Checkpoint::load(&outcome.final_checkpoint).unwrap();
    let mut trained = ckpt.restore_model().unwrap();
    let mut trained_params: Vec<(String, Vec<f64>)> = Vec::new();
    trained.visit_params(&mut |p| trained_params.push((p.name.clone(), p.value.clone())));

    assert_eq!(init_params.len(), trained_params.len());
    // No parameter belongs to the embedding provider: the text encoder
    // contributes data, not weights.
    assert!(init_params.iter().all(|(n, _)| !n.contains("embed")));

    let mut adapter_params = 0usize;
    for ((name, v0), (name2, v1)) in init_params.iter().zip(&trained_params) {
        assert_eq!(name, name2, "parameter order drifted between init and restore");
        let adapter_stage = name.starts_with("model.text")
            || name.starts_with("model.image")
            || name.starts_with("model.fusion")
            || name.starts_with("model.theta");
        if adapter_stage {
            assert!(
                v0 != v1,
                "adapter parameter {name} did not change over 100 steps"
            );
            adapter_params += 1;
        }
    }
    assert!(adapter_params >= 10, "suspiciously few adapter parameters");

    assert_budget("frozen_embeddings_trainable_adapters", t0, 300.0);
    pass(
        "frozen_embeddings_trainable_adapters",
        t0,
        &format!(
            "100 steps: embeddings bit-identical, {adapter_params} adapter-stage parameter vectors all changed"
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Both ablation axes train and evaluate end to end
// ---------------------------------------------------------------------------

#[test]
fn accept_08_ablation_axes_train_and_evaluate() {
    let t0 = Instant::now();
    let data = tempfile::tempdir().unwrap();
    let pc = PhantomConfig {
        shape: [32, 32, 32],
        ..PhantomConfig::default()
    };
    write_phantom_dataset(data.path(), &pc, 6, 5, 801).unwrap();

    let mut details = Vec::new();
    for (axis, plain_inputs, plain_fusion) in
        [("enriched_data=off", true, false), ("adaptive_fusion=off", false, true)]
    {
        let mut cfg = RunConfig::desk();
        cfg.manifest = data.path().join("manifest.tsv");
        cfg.split = [4, 1, 1];
        cfg.patch_size = [32, 32, 32];
        cfg.base_channels = 8;
        cfg.batch_size = 2;
        cfg.epochs = 2;
        cfg.validate_every = 1;
        cfg.seed = 802;
        cfg.enriched_data = !plain_inputs;
        cfg.adaptive_fusion = !plain_fusion;

        let out = tempfile::tempdir().unwrap();
        let outcome = train(&cfg, out.path())
            .unwrap_or_else(|e| panic!("{axis}: training failed: {e}"));
        assert!(outcome.final_loss.is_finite());

        let manifest = Manifest::load(&cfg.manifest).unwrap();
        let [_, _, test] = manifest.split(cfg.split, cfg.seed).unwrap();
        let root = cfg.manifest.parent().unwrap().to_path_buf();
        let cases = load_cases(&test, &root, &cfg).unwrap();
        assert!(!cases.is_empty(), "{axis}: test split is empty");
        let ckpt = Checkpoint::load(&outcome.best_checkpoint).unwrap();
        let mut model = ckpt.restore_model().unwrap();
        let text = cfg.embedder().unwrap().embed(&cfg.prompts().unwrap()).unwrap();
        let report = infer::evaluate(&mut model, &text, &cases, &cfg, "acceptance")
            .unwrap_or_else(|e| panic!("{axis}: evaluation failed: {e}"));
        assert_eq!(report.records.len(), cases.len() * 2);
        for rec in &report.records {
            assert!(
                rec.metrics.dsc.is_finite()
                    && rec.metrics.jaccard.is_finite()
                    && rec.metrics.nsd.is_finite()
                    && rec.metrics.hd95.is_finite(),
                "{axis}: non-finite metric for {}/{}",
                rec.case_id,
                rec.structure
            );
        }
        details.push(format!(
            "{axis}: {} steps, {} eval records",
            outcome.steps,
            report.records.len()
        ));
    }

    assert_budget("ablation_axes_train_and_evaluate", t0, 600.0);
    pass(
        "ablation_axes_train_and_evaluate",
        t0,
        &details.join("; "),
    );
}

// ---------------------------------------------------------------------------
// 9. Bitwise deterministic training
// ---------------------------------------------------------------------------

#[test]
fn accept_09_training_runs_are_bitwise_deterministic() {
    let t0 = Instant::now();
    let data = tempfile::tempdir().unwrap();
    let pc = PhantomConfig {
        shape: [24, 24, 24],
        ..PhantomConfig::default()
    };
    write_phantom_dataset(data.path(), &pc, 4, 3, 901).unwrap();

    let mut cfg = RunConfig::desk();
    cfg.manifest = data.path().join("manifest.tsv");
    cfg.split = [75, 25, 0];
    cfg.patch_size = [16, 16, 16];
    cfg.base_channels = 4;
    cfg.batch_size = 2;
    cfg.epochs = 3;
    cfg.validate_every = 3;
    cfg.seed = 902;

    let run = |tag: &str| {
        let out = tempfile::tempdir().unwrap();
        let outcome = train(&cfg, out.path())
            .unwrap_or_else(|e| panic!("{tag} run failed: {e}"));
        let log = fs::read(&outcome.log_path).unwrap();
        let final_hash = file_sha256(&outcome.final_checkpoint).unwrap();
        let best_hash = file_sha256(&outcome.best_checkpoint).unwrap();
        (log, final_hash, best_hash, outcome.best_val_dsc)
    };

    let (log_a, final_a, best_a, dsc_a) = run("first");
    let (log_b, final_b, best_b, dsc_b) = run("second");

    assert_eq!(log_a, log_b, "training logs differ between identical runs");
    assert_eq!(final_a, final_b, "final checkpoint hashes differ");
    assert_eq!(best_a, best_b, "best checkpoint hashes differ");
    assert_eq!(dsc_a.to_bits(), dsc_b.to_bits());

    assert_budget("training_runs_are_bitwise_deterministic", t0, 300.0);
    pass(
        "training_runs_are_bitwise_deterministic",
        t0,
        &format!(
            "two runs: {} log bytes identical, checkpoint sha256 {}… equal",
            log_a.len(),
            &final_a[..12]
        ),
    );
}
