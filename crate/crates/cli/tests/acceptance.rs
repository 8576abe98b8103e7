//! Acceptance gate: runs every criterion and prints one verdict line per
//! criterion (plain binary, no libtest harness, so the lines always show
//! in `cargo test` output).
//!
//! Criteria 5 and 6 share one desk-scale end-to-end run (settings 1, 2
//! and 7 in a common work directory); everything else is self-contained.
//! Positional arguments filter criteria by number or label substring.

use std::collections::HashMap;
use std::fs;
use std::panic::catch_unwind;
use std::path::{Path, PathBuf};
use std::time::Instant;

use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use lesionflow_cli::config::PipelineConfig;
use lesionflow_cli::pipeline::Pipeline;
use lesionflow_core::eval::{
    case_result, dice, paired_ttest, pearson_log_size, stratified_dsc, ChallengeMetrics,
};
use lesionflow_core::models::{
    attach_dice_ce, build_densenet2d, build_unet3d, build_unetpp3d, DenseNetSpec, UNetSpec,
};
use lesionflow_core::nn::graph::Graph;
use lesionflow_core::nn::tensor::Tensor;
use lesionflow_core::postprocess::{
    connected_components, ensemble_average, radiomics_filter, slice_filter, Connectivity,
    SliceClassifier, VoxelClassifier,
};
use lesionflow_core::radiomics::{
    default_offsets_3d, glcm_features, predict_gbt, train_gbt, FeatureTable, GBTParams,
};
use lesionflow_core::train::{train_slice_classifier, ClassifierConfig};
use lesionflow_core::volume::{Mask, Volume};

type Verdict = (bool, String);

fn main() {
    let criteria: Vec<(usize, &str, fn() -> Verdict)> = vec![
        (1, "gradient fidelity", criterion_gradient_fidelity),
        (2, "oracle equivalence", criterion_oracle_equivalence),
        (3, "fusion exactness", criterion_fusion_exactness),
        (4, "filter contract", criterion_filter_contract),
        (5, "synthetic end-to-end", criterion_synthetic_end_to_end),
        (6, "ensemble sanity", criterion_ensemble_sanity),
        (7, "statistics", criterion_statistics),
        (8, "metric conventions", criterion_metric_conventions),
        (9, "determinism", criterion_determinism),
        (10, "classifier training", criterion_classifier_training),
    ];
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let selected = |n: usize, label: &str| {
        filters.is_empty()
            || filters
                .iter()
                .any(|f| f == &n.to_string() || label.contains(f.as_str()))
    };

    let mut failed = 0usize;
    let mut ran = 0usize;
    for (n, label, check) in criteria {
        if !selected(n, label) {
            continue;
        }
        ran += 1;
        let (ok, detail) = match catch_unwind(check) {
            Ok(v) => v,
            Err(payload) => {
                let msg = payload
                    .downcast_ref::<String>()
                    .map(String::as_str)
                    .or_else(|| payload.downcast_ref::<&str>().copied())
                    .unwrap_or("panic");
                (false, format!("panicked: {msg}"))
            }
        };
        let status = if ok { "PASS" } else { "FAIL" };
        println!("criterion {n} ({label}): {status} [{detail}]");
        if !ok {
            failed += 1;
        }
    }
    if ran == 0 {
        eprintln!("no criteria matched the filter");
        std::process::exit(2);
    }
    if failed > 0 {
        eprintln!("acceptance: {failed} of {ran} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all {ran} criteria passed");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn wavy(n: usize, f: f32) -> Vec<f32> {
    (0..n).map(|i| (i as f32 * f).sin() * 0.5 + 0.1).collect()
}

fn feeds(items: Vec<(&str, Tensor)>) -> HashMap<String, Tensor> {
    items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

// ---- criterion 1: gradient fidelity ---------------------------------------

fn criterion_gradient_fidelity() -> Verdict {
    let t0 = Instant::now();
    // (name, linear, max relative error)
    let mut checks: Vec<(&'static str, bool, f64)> = Vec::new();
    let x3 = || Tensor::new(vec![1, 1, 4, 4, 4], wavy(64, 0.37)).unwrap();

    {
        let mut g = Graph::new();
        let x = g.input("x");
        let mut r = rng(11);
        let c = g.conv3d(x, "c", 1, 2, 3, 1, 1, &mut r).unwrap();
        let s = g.sum(c);
        g.set_output(s);
        let e = g.gradient_check(&feeds(vec![("x", x3())]), 1e-3, 1).unwrap();
        checks.push(("conv3d", true, e));
    }
    {
        let mut g = Graph::new();
        let x = g.input("x");
        let mut r = rng(12);
        let c = g.tconv3d(x, "t", 2, 2, 2, 2, &mut r).unwrap();
        let s = g.sum(c);
        g.set_output(s);
        let f = feeds(vec![(
            "x",
            Tensor::new(vec![1, 2, 3, 3, 3], wavy(54, 0.53)).unwrap(),
        )]);
        checks.push(("tconv3d", true, g.gradient_check(&f, 1e-3, 2).unwrap()));
    }
    {
        let mut g = Graph::new();
        let x = g.input("x");
        let mut r = rng(13);
        let d = g.dense(x, "d", 5, 3, &mut r).unwrap();
        let s = g.sum(d);
        g.set_output(s);
        let f = feeds(vec![("x", Tensor::new(vec![2, 5], wavy(10, 0.71)).unwrap())]);
        checks.push(("dense", true, g.gradient_check(&f, 1e-3, 3).unwrap()));
    }
    {
        let mut g = Graph::new();
        let x = g.input("x");
        let mut r = rng(14);
        let c = g.conv3d(x, "c", 1, 2, 3, 1, 1, &mut r).unwrap();
        let p = g.avgpool(c, 2, 2);
        let s = g.sum(p);
        g.set_output(s);
        let e = g.gradient_check(&feeds(vec![("x", x3())]), 1e-3, 4).unwrap();
        checks.push(("avgpool", true, e));
    }
    {
        let mut g = Graph::new();
        let x = g.input("x");
        let mut r = rng(15);
        let c = g.conv2d(x, "c", 1, 3, 3, 1, 1, &mut r).unwrap();
        let p = g.global_avg_pool(c);
        let s = g.sum(p);
        g.set_output(s);
        let f = feeds(vec![("x", Tensor::new(vec![1, 1, 6, 6], wavy(36, 0.43)).unwrap())]);
        checks.push(("global_avg_pool", true, g.gradient_check(&f, 1e-3, 5).unwrap()));
    }
    {
        let mut g = Graph::new();
        let x = g.input("x");
        let mut r = rng(16);
        let a = g.conv3d(x, "a", 1, 2, 3, 1, 1, &mut r).unwrap();
        let b = g.conv3d(x, "b", 1, 2, 3, 1, 1, &mut r).unwrap();
        let cat = g.concat_channels(&[a, b]);
        let s = g.sum(cat);
        g.set_output(s);
        let e = g.gradient_check(&feeds(vec![("x", x3())]), 1e-3, 6).unwrap();
        checks.push(("concat_channels", true, e));
    }
    {
        let mut g = Graph::new();
        let x = g.input("x");
        let mut r = rng(17);
        let c = g.conv3d(x, "c", 1, 2, 3, 1, 1, &mut r).unwrap();
        let sc = g.scale(c, 0.37);
        let s = g.sum(sc);
        g.set_output(s);
        let e = g.gradient_check(&feeds(vec![("x", x3())]), 1e-3, 7).unwrap();
        checks.push(("scale", true, e));
    }
    {
        let mut g = Graph::new();
        let x = g.input("x");
        let mut r = rng(18);
        let c = g.conv3d(x, "c", 1, 2, 3, 1, 1, &mut r).unwrap();
        let p = g.maxpool(c, 2, 2);
        let s = g.sum(p);
        g.set_output(s);
        let e = g.gradient_check(&feeds(vec![("x", x3())]), 1e-3, 8).unwrap();
        checks.push(("maxpool", false, e));
    }
    {
        let mut g = Graph::new();
        let x = g.input("x");
        let mut r = rng(19);
        let c = g.conv3d(x, "c", 1, 2, 3, 1, 1, &mut r).unwrap();
        let a = g.relu(c);
        let s = g.sum(a);
        g.set_output(s);
        let e = g.gradient_check(&feeds(vec![("x", x3())]), 1e-3, 9).unwrap();
        checks.push(("relu", false, e));
    }
    {
        let mut g = Graph::new();
        let x = g.input("x");
        let mut r = rng(20);
        let c = g.conv3d(x, "c", 1, 2, 3, 1, 1, &mut r).unwrap();
        let a = g.leaky_relu(c, 0.01);
        let s = g.sum(a);
        g.set_output(s);
        let e = g.gradient_check(&feeds(vec![("x", x3())]), 1e-3, 10).unwrap();
        checks.push(("leaky_relu", false, e));
    }
    // Normalization removes per-channel mean and scale, so parameters
    // feeding only the normalized path (conv bias especially) have an
    // exactly zero true gradient and the relative-error metric would
    // measure pure float noise on them. Concatenating the raw conv output
    // alongside the normalized one and weighting by a fed pattern keeps
    // every parameter's gradient at usable scale.
    let norm_feeds = || {
        let x: Vec<f32> = (0..64).map(|i| (i as f32 * 0.41).sin() + 0.02).collect();
        let k: Vec<f32> = (0..256)
            .map(|i| 0.7 + 0.5 * (i as f32 * 0.41).sin())
            .collect();
        feeds(vec![
            ("x", Tensor::new(vec![1, 1, 4, 4, 4], x).unwrap()),
            ("k", Tensor::new(vec![1, 4, 4, 4, 4], k).unwrap()),
        ])
    };
    {
        let mut g = Graph::new();
        let x = g.input("x");
        let k = g.input("k");
        let mut r = rng(21);
        let c = g.conv3d(x, "c", 1, 2, 3, 1, 1, &mut r).unwrap();
        let n = g.instance_norm(c, "in", 2).unwrap();
        let cat = g.concat_channels(&[n, c]);
        let m = g.mul(cat, k);
        let s = g.sum(m);
        g.set_output(s);
        checks.push(("instance_norm", false, g.gradient_check(&norm_feeds(), 1e-3, 11).unwrap()));
    }
    {
        let mut g = Graph::new();
        let x = g.input("x");
        let k = g.input("k");
        let mut r = rng(22);
        let c = g.conv3d(x, "c", 1, 2, 3, 1, 1, &mut r).unwrap();
        let n = g.batch_norm(c, "bn", 2).unwrap();
        let cat = g.concat_channels(&[n, c]);
        let m = g.mul(cat, k);
        let s = g.sum(m);
        g.set_output(s);
        checks.push(("batch_norm", false, g.gradient_check(&norm_feeds(), 1e-3, 12).unwrap()));
    }
    {
        let mut g = Graph::new();
        let x = g.input("x");
        let mut r = rng(23);
        let c = g.conv3d(x, "c", 1, 2, 3, 1, 1, &mut r).unwrap();
        let p = g.softmax_channels(c);
        let t = g.input("t");
        let loss = g.dice_ce(p, t, 1.0, 1.0);
        g.set_output(loss);
        let tgt: Vec<f32> = (0..64).map(|i| f32::from(i % 5 == 0)).collect();
        let f = feeds(vec![
            ("x", x3()),
            ("t", Tensor::new(vec![1, 4, 4, 4], tgt).unwrap()),
        ]);
        checks.push(("softmax+dice_ce", false, g.gradient_check(&f, 1e-3, 13).unwrap()));
    }
    {
        let mut g = Graph::new();
        let x = g.input("x");
        let mut r = rng(24);
        let a = g.conv3d(x, "a", 1, 2, 3, 1, 1, &mut r).unwrap();
        let b = g.conv3d(x, "b", 1, 2, 3, 1, 1, &mut r).unwrap();
        let m = g.mul(a, b);
        let s = g.sum(m);
        g.set_output(s);
        let e = g.gradient_check(&feeds(vec![("x", x3())]), 1e-3, 14).unwrap();
        checks.push(("mul", false, e));
    }

    // The three architectures at micro scale.
    let spec = UNetSpec {
        in_channels: 1,
        base_width: 2,
        depth: 1,
        classes: 2,
    };
    let img: Vec<f32> = (0..64).map(|i| (i as f32 * 0.41).sin() + 0.02).collect();
    let tgt: Vec<f32> = (0..64).map(|i| f32::from(i % 7 == 0)).collect();
    for (name, build) in [
        ("unet3d", build_unet3d as fn(&UNetSpec, u64) -> lesionflow_core::Result<Graph>),
        ("unetpp3d", build_unetpp3d),
    ] {
        let mut g = build(&spec, 13).unwrap();
        attach_dice_ce(&mut g, 1.0, 1.0);
        let f = feeds(vec![
            ("x", Tensor::new(vec![1, 1, 4, 4, 4], img.clone()).unwrap()),
            ("t", Tensor::new(vec![1, 4, 4, 4], tgt.clone()).unwrap()),
        ]);
        checks.push((name, false, g.gradient_check(&f, 1e-3, 3).unwrap()));
    }
    {
        let dspec = DenseNetSpec {
            growth: 2,
            layers_per_block: 1,
            blocks: 1,
            classes: 2,
        };
        let mut g = build_densenet2d(&dspec, 5).unwrap();
        attach_dice_ce(&mut g, 0.0, 1.0);
        let f = feeds(vec![
            ("x", Tensor::new(vec![2, 1, 6, 6], (0..72).map(|i| (i as f32 * 0.23).cos()).collect()).unwrap()),
            ("t", Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()),
        ]);
        checks.push(("densenet2d", false, g.gradient_check(&f, 1e-3, 3).unwrap()));
    }

    let elapsed = t0.elapsed().as_secs_f64();
    let mut linear_max = 0f64;
    let mut nonlinear_max = 0f64;
    let mut failures = Vec::new();
    for (name, linear, err) in &checks {
        let tol = if *linear { 1e-5 } else { 1e-2 };
        if *linear {
            linear_max = linear_max.max(*err);
        } else {
            nonlinear_max = nonlinear_max.max(*err);
        }
        if !(*err <= tol) {
            failures.push(format!("{name} err {err:.3e} > {tol:.0e}"));
        }
    }
    if elapsed >= 60.0 {
        failures.push(format!("runtime {elapsed:.1}s >= 60s"));
    }
    let detail = format!(
        "linear max {linear_max:.2e}, nonlinear max {nonlinear_max:.2e}, {:.1}s{}",
        elapsed,
        if failures.is_empty() {
            String::new()
        } else {
            format!("; {}", failures.join("; "))
        }
    );
    (failures.is_empty(), detail)
}

// ---- criterion 2: oracle equivalence ---------------------------------------

fn random_mask(r: &mut ChaCha8Rng, shape: [usize; 3], p: f64) -> Mask {
    let n = shape[0] * shape[1] * shape[2];
    let data: Vec<u8> = (0..n).map(|_| u8::from(r.random::<f64>() < p)).collect();
    Mask::new(shape, [1.0, 1.0, 1.0], data).unwrap()
}

fn dice_oracle(a: &Mask, b: &Mask) -> f64 {
    let [nx, ny, nz] = a.shape();
    let mut inter = 0u64;
    let mut na = 0u64;
    let mut nb = 0u64;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (pa, pb) = (a.get(x, y, z), b.get(x, y, z));
                na += u64::from(pa);
                nb += u64::from(pb);
                inter += u64::from(pa == 1 && pb == 1);
            }
        }
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Min-label fixpoint propagation; returns components as sorted voxel
/// lists, ordered by their smallest flat index.
fn cc_oracle(m: &Mask, conn: Connectivity) -> Vec<Vec<usize>> {
    let [nx, ny, nz] = m.shape();
    let n = nx * ny * nz;
    let offsets: Vec<[i64; 3]> = {
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if (dx, dy, dz) == (0, 0, 0) {
                        continue;
                    }
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    match conn {
                        Connectivity::Six if manhattan == 1 => out.push([dx, dy, dz]),
                        Connectivity::TwentySix => out.push([dx, dy, dz]),
                        _ => {}
                    }
                }
            }
        }
        out
    };
    let mut label: Vec<Option<usize>> = (0..n)
        .map(|i| {
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            (m.get(x, y, z) == 1).then_some(i)
        })
        .collect();
    loop {
        let mut changed = false;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = x + nx * (y + ny * z);
                    let Some(cur) = label[i] else { continue };
                    let mut best = cur;
                    for o in &offsets {
                        let (qx, qy, qz) = (x as i64 + o[0], y as i64 + o[1], z as i64 + o[2]);
                        if qx < 0 || qy < 0 || qz < 0 {
                            continue;
                        }
                        let (qx, qy, qz) = (qx as usize, qy as usize, qz as usize);
                        if qx >= nx || qy >= ny || qz >= nz {
                            continue;
                        }
                        if let Some(l) = label[qx + nx * (qy + ny * qz)] {
                            best = best.min(l);
                        }
                    }
                    if best < cur {
                        label[i] = Some(best);
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, l) in label.iter().enumerate() {
        if let Some(root) = l {
            groups.entry(*root).or_default().push(i);
        }
    }
    groups.into_values().collect()
}

/// Quantize then count co-occurrences by exhaustive pair enumeration, and
/// derive the same five features from the matrix.
fn glcm_oracle(patch: &[f32], dims: [usize; 3], levels: usize, offsets: &[[i64; 3]]) -> [f64; 5] {
    let [nx, ny, _] = dims;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in patch {
        lo = lo.min(v as f64);
        hi = hi.max(v as f64);
    }
    let quant: Vec<usize> = if hi > lo {
        patch
            .iter()
            .map(|&v| ((((v as f64) - lo) / (hi - lo) * levels as f64) as usize).min(levels - 1))
            .collect()
    } else {
        vec![0; patch.len()]
    };
    let coord = |i: usize| [(i % nx) as i64, ((i / nx) % ny) as i64, (i / (nx * ny)) as i64];
    let mut counts = vec![0f64; levels * levels];
    let mut total = 0f64;
    for a in 0..patch.len() {
        for b in 0..patch.len() {
            let (ca, cb) = (coord(a), coord(b));
            let d = [cb[0] - ca[0], cb[1] - ca[1], cb[2] - ca[2]];
            if offsets.contains(&d) {
                counts[quant[a] * levels + quant[b]] += 1.0;
                counts[quant[b] * levels + quant[a]] += 1.0;
                total += 2.0;
            }
        }
    }
    for c in counts.iter_mut() {
        *c /= total;
    }
    let mut contrast = 0f64;
    let mut energy = 0f64;
    let mut homogeneity = 0f64;
    let mut entropy = 0f64;
    let mut marginal = vec![0f64; levels];
    for i in 0..levels {
        for j in 0..levels {
            let p = counts[i * levels + j];
            marginal[i] += p;
            if p == 0.0 {
                continue;
            }
            let d = i as f64 - j as f64;
            contrast += p * d * d;
            energy += p * p;
            homogeneity += p / (1.0 + d * d);
            entropy -= p * p.log2();
        }
    }
    let mu: f64 = marginal.iter().enumerate().map(|(i, p)| i as f64 * p).sum();
    let var: f64 = marginal
        .iter()
        .enumerate()
        .map(|(i, p)| (i as f64 - mu) * (i as f64 - mu) * p)
        .sum();
    let correlation = if var > 1e-30 {
        let mut cov = 0f64;
        for i in 0..levels {
            for j in 0..levels {
                cov += (i as f64 - mu) * (j as f64 - mu) * counts[i * levels + j];
            }
        }
        cov / var
    } else {
        0.0
    };
    [contrast, correlation, energy, homogeneity, entropy]
}

fn criterion_oracle_equivalence() -> Verdict {
    let mut failures = Vec::new();

    let mut r = rng(101);
    for i in 0..60 {
        let shape = [
            r.random_range(2..6usize),
            r.random_range(2..6usize),
            r.random_range(2..6usize),
        ];
        let p = [0.0, 0.2, 0.5, 0.8][i % 4];
        let a = random_mask(&mut r, shape, p);
        let b = random_mask(&mut r, shape, 0.3);
        let got = dice(&a, &b).unwrap();
        let want = dice_oracle(&a, &b);
        if got != want {
            failures.push(format!("dice instance {i}: {got} != {want}"));
        }
    }

    let mut r = rng(102);
    for conn in [Connectivity::Six, Connectivity::TwentySix] {
        for i in 0..50 {
            let shape = [
                r.random_range(3..10usize),
                r.random_range(3..10usize),
                r.random_range(3..10usize),
            ];
            let m = random_mask(&mut r, shape, if i % 2 == 0 { 0.25 } else { 0.45 });
            let comps = connected_components(&m, conn);
            let want = cc_oracle(&m, conn);
            let got: Vec<Vec<usize>> = comps.iter().map(|c| c.voxels.clone()).collect();
            if got != want {
                failures.push(format!("cc {conn:?} instance {i}: {} vs {} comps", got.len(), want.len()));
            }
            for (k, c) in comps.iter().enumerate() {
                if c.label != k + 1 || c.voxel_count != c.voxels.len() {
                    failures.push(format!("cc {conn:?} instance {i}: bad component bookkeeping"));
                }
            }
        }
    }

    let mut r = rng(103);
    let offsets = default_offsets_3d();
    for i in 0..50 {
        let dims = [
            r.random_range(2..5usize),
            r.random_range(2..5usize),
            r.random_range(2..5usize),
        ];
        let n = dims[0] * dims[1] * dims[2];
        let levels = r.random_range(2..6usize);
        let patch: Vec<f32> = if i % 7 == 3 {
            vec![3.3; n]
        } else {
            (0..n).map(|_| r.random::<f32>() * 10.0 - 5.0).collect()
        };
        let got = glcm_features(&patch, dims, levels, &offsets).unwrap();
        let want = glcm_oracle(&patch, dims, levels, &offsets);
        if got != want {
            failures.push(format!("glcm instance {i}: {got:?} != {want:?}"));
        }
    }

    let detail = if failures.is_empty() {
        "dice x60, cc x100 (6+26), glcm x50 all exact".to_string()
    } else {
        failures.join("; ")
    };
    (failures.is_empty(), detail)
}

// ---- criterion 3: fusion exactness -----------------------------------------

fn criterion_fusion_exactness() -> Verdict {
    let mut failures = Vec::new();
    let shape = [6usize, 5, 4];
    let n = 120;
    let mut r = rng(31);
    let base = Volume::new(shape, [1.0; 3], (0..n).map(|_| r.random::<f32>()).collect()).unwrap();

    for k in 1..=5usize {
        let maps = vec![base.clone(); k];
        let avg = ensemble_average(&maps, None).unwrap();
        let max_diff = avg
            .data()
            .iter()
            .zip(base.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0, f64::max);
        if max_diff > 1e-7 {
            failures.push(format!("k={k} identical maps diff {max_diff:.2e}"));
        }
    }

    let zeros = Volume::new(shape, [1.0; 3], vec![0.0; n]).unwrap();
    let ones = Volume::new(shape, [1.0; 3], vec![1.0; n]).unwrap();
    let half = ensemble_average(&[zeros.clone(), ones.clone()], None).unwrap();
    if half.data().iter().any(|&v| v != 0.5) {
        failures.push("uniform mean of 0 and 1 maps is not exactly 0.5".into());
    }
    let quarter = ensemble_average(&[zeros, ones], Some(&[3.0, 1.0])).unwrap();
    if quarter.data().iter().any(|&v| v != 0.25) {
        failures.push("weights (3,1) on 0 and 1 maps is not exactly 0.25".into());
    }

    let other = Volume::new(shape, [1.0; 3], (0..n).map(|_| r.random::<f32>()).collect()).unwrap();
    let (wa, wb) = (0.3f64, 0.7f64);
    let fused = ensemble_average(&[base.clone(), other.clone()], Some(&[wa, wb])).unwrap();
    for i in 0..n {
        let want = ((wa * base.data()[i] as f64 + wb * other.data()[i] as f64) / (wa + wb)) as f32;
        if fused.data()[i] != want {
            failures.push(format!("weighted voxel {i}: {} != {want}", fused.data()[i]));
            break;
        }
    }

    let detail = if failures.is_empty() {
        "identical maps <= 1e-7, closed-form weighted cases exact".to_string()
    } else {
        failures.join("; ")
    };
    (failures.is_empty(), detail)
}

// ---- criterion 4: filter contract ------------------------------------------

struct ConstSlice(f64);
impl SliceClassifier for ConstSlice {
    fn lesion_probability(&self, _s: &[f32], _h: usize, _w: usize) -> lesionflow_core::Result<f64> {
        Ok(self.0)
    }
}

/// Calls a slice lesion-free when its mean intensity is above 5.
struct BrightNoLesion;
impl SliceClassifier for BrightNoLesion {
    fn lesion_probability(&self, s: &[f32], _h: usize, _w: usize) -> lesionflow_core::Result<f64> {
        let mean = s.iter().sum::<f32>() / s.len() as f32;
        Ok(if mean > 5.0 { 0.0 } else { 1.0 })
    }
}

struct ConstVoxel(f64);
impl VoxelClassifier for ConstVoxel {
    fn keep_probability(&self, _features: &[f64]) -> lesionflow_core::Result<f64> {
        Ok(self.0)
    }
}

fn mask_at(shape: [usize; 3], spacing: [f32; 3], voxels: &[[usize; 3]]) -> Mask {
    let mut m = Mask::zeros(shape, spacing).unwrap();
    for &[x, y, z] in voxels {
        m.set(x, y, z, 1);
    }
    m
}

fn criterion_filter_contract() -> Verdict {
    let mut failures = Vec::new();
    let mut fail = |cond: bool, msg: &str| {
        if !cond {
            failures.push(msg.to_string());
        }
    };

    // 1: total volume over the 2000 mm3 gate is untouched, whatever the
    // classifier would have said.
    {
        let spacing = [5.0, 5.0, 5.0];
        let voxels: Vec<[usize; 3]> = (0..20).map(|i| [i % 5, (i / 5) % 4, 1 + i % 4]).collect();
        let m = mask_at([10, 10, 6], spacing, &voxels);
        let v = Volume::new([10, 10, 6], spacing, vec![1.0; 600]).unwrap();
        let (out, rep) = slice_filter(&m, &ConstSlice(0.0), &v, 2000.0, 0.5).unwrap();
        fail(!rep.applied, "scenario 1: filter applied despite 2500 mm3 volume");
        fail(out.data() == m.data(), "scenario 1: mask changed");
        fail(
            rep.voxels_in == rep.voxels_out + rep.voxels_removed,
            "scenario 1: voxel accounting",
        );
    }

    // 2: 500 mm3 under the gate, 3 of 5 segmented slices lesion-free
    // (0.6 > 0.5) empties the mask.
    {
        let shape = [10usize, 10, 8];
        let spacing = [5.0, 5.0, 4.0];
        let voxels: Vec<[usize; 3]> = (1..=5).map(|z| [5, 5, z]).collect();
        let m = mask_at(shape, spacing, &voxels);
        let mut vdata = vec![0f32; 800];
        for z in 1..=3 {
            for i in 0..100 {
                vdata[z * 100 + i] = 9.0;
            }
        }
        let v = Volume::new(shape, spacing, vdata).unwrap();
        let (out, rep) = slice_filter(&m, &BrightNoLesion, &v, 2000.0, 0.5).unwrap();
        fail(rep.applied, "scenario 2: filter not applied at 500 mm3");
        fail(rep.slices_segmented == Some(5), "scenario 2: segmented slice count");
        fail(rep.slices_no_lesion == Some(3), "scenario 2: no-lesion slice count");
        fail(out.is_empty_mask(), "scenario 2: mask not emptied at fraction 0.6");
        fail(rep.voxels_removed == 5, "scenario 2: removed voxel count");
        // Strict >50%: with 2 of 4 slices lesion-free the mask survives.
        let voxels: Vec<[usize; 3]> = (1..=4).map(|z| [5, 5, z]).collect();
        let m = mask_at(shape, spacing, &voxels);
        let mut vdata = vec![0f32; 800];
        for z in 1..=2 {
            for i in 0..100 {
                vdata[z * 100 + i] = 9.0;
            }
        }
        let v = Volume::new(shape, spacing, vdata).unwrap();
        let (out, rep) = slice_filter(&m, &BrightNoLesion, &v, 2000.0, 0.5).unwrap();
        fail(
            rep.fraction_no_lesion == Some(0.5),
            "scenario 2b: fraction at exactly one half",
        );
        fail(out.data() == m.data(), "scenario 2b: strict >50% violated");
    }

    // 3: empty input mask is a no-op with an explicit reason.
    {
        let m = Mask::zeros([4, 4, 4], [1.0; 3]).unwrap();
        let v = Volume::new([4, 4, 4], [1.0; 3], vec![0.0; 64]).unwrap();
        let (out, rep) = slice_filter(&m, &ConstSlice(0.0), &v, 2000.0, 0.5).unwrap();
        fail(!rep.applied, "scenario 3: applied on empty input");
        fail(rep.reason.contains("no segmentation"), "scenario 3: reason text");
        fail(out.is_empty_mask(), "scenario 3: output not empty");
    }

    // 4: components at or over 1000 voxels bypass the radiomics filter.
    {
        let shape = [12usize, 12, 12];
        let mut m = Mask::zeros(shape, [1.0; 3]).unwrap();
        for z in 1..11 {
            for y in 1..11 {
                for x in 1..11 {
                    m.set(x, y, z, 1);
                }
            }
        }
        let v = Volume::new(shape, [1.0; 3], wavy(12 * 12 * 12, 0.19)).unwrap();
        let (out, rep) =
            radiomics_filter(&m, &v, &ConstVoxel(0.0), 1000, Connectivity::TwentySix).unwrap();
        fail(out.data() == m.data(), "scenario 4: 1000-voxel component touched");
        fail(rep.voxels_removed == 0, "scenario 4: voxels removed");
        fail(rep.components_removed == 0, "scenario 4: components removed");
    }

    // 5: a keep-everything classifier leaves small components alone.
    {
        let shape = [12usize, 12, 6];
        let mut voxels = Vec::new();
        for x in 2..4 {
            for y in 2..4 {
                voxels.push([x, y, 2]);
            }
        }
        for x in 8..11 {
            voxels.push([x, 8, 4]);
        }
        let m = mask_at(shape, [1.0; 3], &voxels);
        let v = Volume::new(shape, [1.0; 3], wavy(12 * 12 * 6, 0.31)).unwrap();
        let (out, rep) =
            radiomics_filter(&m, &v, &ConstVoxel(1.0), 1000, Connectivity::TwentySix).unwrap();
        fail(rep.applied, "scenario 5: filter skipped small components");
        fail(out.data() == m.data(), "scenario 5: keep-all classifier changed mask");
        fail(rep.voxels_removed == 0, "scenario 5: voxels removed");
    }

    // 6: a remove-everything classifier erases a 10-voxel component.
    {
        let shape = [10usize, 10, 6];
        let voxels: Vec<[usize; 3]> = (0..10).map(|i| [2 + i % 5, 3 + i / 5, 2]).collect();
        let m = mask_at(shape, [1.0; 3], &voxels);
        let v = Volume::new(shape, [1.0; 3], wavy(600, 0.27)).unwrap();
        let (out, rep) =
            radiomics_filter(&m, &v, &ConstVoxel(0.0), 1000, Connectivity::TwentySix).unwrap();
        fail(out.is_empty_mask(), "scenario 6: mask not emptied");
        fail(rep.components_removed == 1, "scenario 6: component count");
        fail(rep.voxels_removed == 10, "scenario 6: voxel count");
        fail(
            rep.voxels_in == rep.voxels_out + rep.voxels_removed,
            "scenario 6: voxel accounting",
        );
    }

    let detail = if failures.is_empty() {
        "6 scenarios, both gates, strict >50%".to_string()
    } else {
        failures.join("; ")
    };
    (failures.is_empty(), detail)
}

// ---- criteria 5 and 6: shared desk-scale end-to-end run ---------------------

struct E2e {
    _tmp: TempDir,
    s1: ChallengeMetrics,
    s2: ChallengeMetrics,
    s7: ChallengeMetrics,
    s1_secs: f64,
}

static E2E: Lazy<E2e> = Lazy::new(|| {
    let tmp = TempDir::new().expect("tempdir");
    let mut cfg = PipelineConfig::desk();
    cfg.work_dir = tmp.path().join("work");

    let t0 = Instant::now();
    cfg.setting = 1;
    let s1 = Pipeline::new(cfg.clone()).unwrap().run_setting().expect("setting 1");
    let s1_secs = t0.elapsed().as_secs_f64();

    cfg.setting = 2;
    let s2 = Pipeline::new(cfg.clone()).unwrap().run_setting().expect("setting 2");
    cfg.setting = 7;
    let s7 = Pipeline::new(cfg.clone()).unwrap().run_setting().expect("setting 7");

    E2e {
        _tmp: tmp,
        s1,
        s2,
        s7,
        s1_secs,
    }
});

fn criterion_synthetic_end_to_end() -> Verdict {
    let e = &*E2E;
    let lesion = e.s1.dsc_lesion.as_ref().expect("lesion stratum");
    let no_lesion = e.s1.dsc_no_lesion.as_ref().expect("no-lesion stratum");
    let ok = lesion.mean >= 0.5 && no_lesion.mean == 1.0 && e.s1_secs <= 1200.0;
    let detail = format!(
        "dsc-lesion {:.4} (>= 0.5), dsc-no-lesion {} (== 1.0), {:.0}s (<= 1200s)",
        lesion.mean, no_lesion.mean, e.s1_secs
    );
    (ok, detail)
}

fn criterion_ensemble_sanity() -> Verdict {
    let e = &*E2E;
    let floor = e.s1.overall.mean.min(e.s2.overall.mean) - 0.02;
    let ok = e.s7.overall.mean >= floor;
    let detail = format!(
        "setting 7 overall {:.4} vs min(s1 {:.4}, s2 {:.4}) - 0.02 = {:.4}",
        e.s7.overall.mean, e.s1.overall.mean, e.s2.overall.mean, floor
    );
    (ok, detail)
}

// ---- criterion 7: statistics ------------------------------------------------

fn criterion_statistics() -> Verdict {
    let mut failures = Vec::new();

    // Oracle values computed with scipy.stats.ttest_rel before the build.
    let datasets: [(&[f64], &[f64], f64, f64); 3] = [
        (
            &[2.9, 3.0, 3.1, 3.0],
            &[2.0, 2.0, 2.0, 2.0],
            24.4948974278318,
            0.000149157201284936,
        ),
        (
            &[
                0.70, 0.30, 0.20, 0.60, 0.40, 0.40, 0.00, 0.70, 0.10, 0.30, 0.50, 0.40, 0.00,
                0.60, 0.50, 0.30, 0.10, 0.50, 0.20, 0.10,
            ],
            &[
                0.50, 0.10, 0.00, 0.20, 0.40, 0.30, 0.00, 0.50, 0.30, 0.30, 0.40, 0.40, 0.10,
                0.40, 0.20, 0.10, 0.10, 0.60, 0.30, 0.20,
            ],
            2.11575986127347,
            0.0477967618449643,
        ),
        (
            &[0.71, 0.64, 0.80, 0.55, 0.92, 0.61, 0.73],
            &[0.69, 0.66, 0.74, 0.58, 0.88, 0.63, 0.70],
            0.867721831274626,
            0.418893882684157,
        ),
    ];
    for (i, (a, b, t_want, p_want)) in datasets.iter().enumerate() {
        let r = paired_ttest(a, b).unwrap();
        if (r.t - t_want).abs() > 1e-6 {
            failures.push(format!("dataset {}: t {} vs {}", i + 1, r.t, t_want));
        }
        if (r.p - p_want).abs() > 1e-6 {
            failures.push(format!("dataset {}: p {} vs {}", i + 1, r.p, p_want));
        }
    }

    let volumes = [500.0, 1200.0, 3000.0, 8000.0, 20000.0, 52000.0];
    let dices: Vec<f64> = volumes.iter().map(|v: &f64| 0.09 * v.ln() + 0.02).collect();
    let r = pearson_log_size(&volumes, &dices).unwrap();
    if (r - 1.0).abs() > 1e-12 {
        failures.push(format!("pearson on log-linear data: {r}"));
    }

    let detail = if failures.is_empty() {
        format!("3 t-test datasets within 1e-6, pearson 1.0 within 1e-12 (r - 1 = {:.1e})", r - 1.0)
    } else {
        failures.join("; ")
    };
    (failures.is_empty(), detail)
}

// ---- criterion 8: metric conventions ----------------------------------------

fn criterion_metric_conventions() -> Verdict {
    let shape = [8usize, 8, 8];
    let spacing = [1.0f32; 3];
    let mut results = Vec::new();
    let mut lesion_gt = Mask::zeros(shape, spacing).unwrap();
    for z in 2..5 {
        for y in 2..5 {
            for x in 2..5 {
                lesion_gt.set(x, y, z, 1);
            }
        }
    }
    for i in 0..19 {
        results.push(case_result(&format!("lesion_{i:02}"), &lesion_gt, &lesion_gt).unwrap());
    }
    let empty = Mask::zeros(shape, spacing).unwrap();
    for i in 0..3 {
        results.push(case_result(&format!("clean_{i}"), &empty, &empty).unwrap());
    }
    for i in 0..2 {
        let mut fp = Mask::zeros(shape, spacing).unwrap();
        fp.set(6, 6, 6, 1);
        fp.set(6, 6, 7, 1);
        results.push(case_result(&format!("fp_{i}"), &fp, &empty).unwrap());
    }

    let m = stratified_dsc(&results).unwrap();
    let lesion = m.dsc_lesion.as_ref().expect("lesion stratum");
    let no_lesion = m.dsc_no_lesion.as_ref().expect("no-lesion stratum");
    let mut failures = Vec::new();
    if m.n != 24 {
        failures.push(format!("n {} != 24", m.n));
    }
    if lesion.n != 19 || no_lesion.n != 5 {
        failures.push(format!("strata sizes {} / {}", lesion.n, no_lesion.n));
    }
    if no_lesion.mean != 0.6 {
        failures.push(format!("dsc-no-lesion mean {} != 0.6", no_lesion.mean));
    }
    if (no_lesion.sd - 0.3f64.sqrt()).abs() > 1e-12 {
        failures.push(format!("dsc-no-lesion sd {}", no_lesion.sd));
    }
    if (m.accuracy - 22.0 / 24.0).abs() > 1e-15 {
        failures.push(format!("accuracy {} != 22/24", m.accuracy));
    }

    let detail = if failures.is_empty() {
        format!(
            "19/5 strata, dsc-no-lesion {:.2}+-{:.2}, accuracy {:.4}",
            no_lesion.mean, no_lesion.sd, m.accuracy
        )
    } else {
        failures.join("; ")
    };
    (failures.is_empty(), detail)
}

// ---- criterion 9: determinism ------------------------------------------------

fn tiny_cfg(work: PathBuf) -> PipelineConfig {
    let mut c = PipelineConfig::desk();
    c.setting = 5;
    c.work_dir = work;
    c.seed = 3;
    c.synth.n_train = 4;
    c.synth.n_test = 2;
    c.synth.test_no_lesion_fraction = 0.5;
    c.synth.phantom.shape = [32, 32, 32];
    c.synth.phantom.lesion_radius_range = (2.5, 4.0);
    c.folds = 2;
    c.train.epochs = 2;
    c.train.iters_per_epoch = Some(2);
    c.train.patch = [16, 16, 16];
    c.train.batch_size = 1;
    c.predict.patch = [16, 16, 16];
    c.classifier.epochs = 2;
    c.classifier.neck_exclude = 2;
    c.gbt.trees = 10;
    c
}

/// Final masks plus metrics, as (relative path, bytes), sorted.
fn outputs(work: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(work).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name().into_string().unwrap();
        if name.starts_with("postprocess-s") {
            let masks = entry.path().join("masks");
            for f in fs::read_dir(masks).unwrap() {
                let f = f.unwrap();
                let rel = format!("{name}/masks/{}", f.file_name().into_string().unwrap());
                out.push((rel, fs::read(f.path()).unwrap()));
            }
        }
        if name.starts_with("evaluate-s") {
            for file in ["metrics.json", "metrics.csv", "cases.json"] {
                out.push((
                    format!("{name}/{file}"),
                    fs::read(entry.path().join(file)).unwrap(),
                ));
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn criterion_determinism() -> Verdict {
    let tmp = TempDir::new().unwrap();
    let run = |name: &str| {
        let work = tmp.path().join(name);
        Pipeline::new(tiny_cfg(work.clone()))
            .unwrap()
            .run_setting()
            .expect("tiny setting 5 run");
        outputs(&work)
    };
    let a = run("a");
    let b = run("b");

    let mut failures = Vec::new();
    if a.len() != b.len() || a.is_empty() {
        failures.push(format!("artifact counts differ: {} vs {}", a.len(), b.len()));
    } else {
        for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
            if na != nb {
                failures.push(format!("artifact names diverge: {na} vs {nb}"));
                break;
            }
            if ba != bb {
                failures.push(format!("bytes differ in {na}"));
            }
        }
    }
    let detail = if failures.is_empty() {
        format!("{} artifacts bit-identical across re-run (setting 5)", a.len())
    } else {
        failures.join("; ")
    };
    (failures.is_empty(), detail)
}

// ---- criterion 10: classifier training ----------------------------------------

fn criterion_classifier_training() -> Verdict {
    let mut failures = Vec::new();

    // GBT on an axis-separable toy set.
    let mut r = rng(42);
    let mut rows = Vec::new();
    let mut y = Vec::new();
    while rows.len() < 120 {
        let a = r.random::<f64>() * 2.0 - 1.0;
        let b = r.random::<f64>() * 2.0 - 1.0;
        if (a - 0.2).abs() < 0.05 {
            continue;
        }
        rows.push(vec![a, b]);
        y.push(u8::from(a > 0.2));
    }
    let table = FeatureTable {
        names: vec!["f0".into(), "f1".into()],
        rows: rows.clone(),
    };
    let params = GBTParams {
        trees: 25,
        max_depth: 3,
        learning_rate: 0.3,
        seed: 1,
    };
    let (model, trace) = train_gbt(&table, &y, &params).unwrap();
    let correct = rows
        .iter()
        .zip(&y)
        .filter(|(row, &label)| (predict_gbt(&model, row).unwrap() > 0.5) == (label == 1))
        .count();
    if correct != y.len() {
        failures.push(format!("gbt training accuracy {correct}/{}", y.len()));
    }
    if !trace.windows(2).all(|w| w[1] <= w[0] + 1e-12) {
        failures.push("gbt loss trace not non-increasing".into());
    }

    // DenseNet slice classifier on a separable synthetic slice task:
    // lesion slices carry a bright disk.
    let shape = [24usize, 24, 10];
    let mut cases = Vec::new();
    for case in 0..6u64 {
        let mut v = Volume::new(shape, [1.0; 3], vec![1.0; 24 * 24 * 10]).unwrap();
        let mut m = Mask::zeros(shape, [1.0; 3]).unwrap();
        for z in 1..10 {
            if (z + case as usize) % 2 == 0 {
                for y in 0..24 {
                    for x in 0..24 {
                        let (dx, dy) = (x as f64 - 11.5, y as f64 - 11.5);
                        if dx * dx + dy * dy <= 36.0 {
                            v.set(x, y, z, 5.0);
                            m.set(x, y, z, 1);
                        }
                    }
                }
            }
        }
        cases.push((v, m));
    }
    let spec = DenseNetSpec {
        growth: 4,
        layers_per_block: 1,
        blocks: 2,
        classes: 2,
    };
    let mut g = build_densenet2d(&spec, 9).unwrap();
    let cfg = ClassifierConfig {
        epochs: 12,
        batch_size: 8,
        initial_lr: 1e-2,
        seed: 9,
        neck_exclude: 1,
        val_fraction: 0.25,
    };
    let (val_acc, _) = train_slice_classifier(&mut g, &cases, &cfg).unwrap();
    if val_acc < 0.9 {
        failures.push(format!("slice classifier validation accuracy {val_acc:.3}"));
    }

    let detail = if failures.is_empty() {
        format!(
            "gbt {}/{} train accuracy, non-increasing trace; densenet val accuracy {:.3}",
            correct,
            y.len(),
            val_acc
        )
    } else {
        failures.join("; ")
    };
    (failures.is_empty(), detail)
}
