//! The acceptance gate: eight numbered criteria covering the analytic loss,
//! gradients, architecture invariants, metric oracles, scoring, and the
//! end-to-end synthetic scenarios. Each criterion prints exactly one
//! PASS/FAIL line with its measured values; the test fails if any gating
//! criterion fails. Criterion 8 is the optional full-scale stretch run and
//! only gates when `RDFABRIC_MVTEC_ROOT` points at a dataset.

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use rdfabric::accept::{load_scenario, mvtec_root_from_env, run_mvtec_stretch, run_scenario};
use rdfabric::data::extract_patches;
use rdfabric::metrics::{auroc, coverage_at_full_precision_recall, COVERAGE_TOLERANCES};
use rdfabric::model::{
    AttentionBlock, Bottleneck, ModelConfig, ModelOut, RdModel, ResidualLink, Sspcab,
};
use rdfabric::nn::gradcheck::{self, GradCheckCfg};
use rdfabric::nn::{Adam, Init};
use rdfabric::objective::{objective_with_grads, pixel_distance_map, LossWeights};
use rdfabric::scoring::{build_localization_map, gaussian_kernel, image_score};
use rdfabric::teacher::{ArchPlan, BackboneSpec, FeaturePyramid, Teacher, DEFAULT_TEACHER_SEED};
use rdfabric::trainer::train_step;

// Tolerances and thresholds, pinned here rather than read from anywhere.
const TOL_ANALYTIC: f64 = 1e-10;
const TOL_GRAD_REL: f64 = 1e-4;
const TOL_AUROC_ORACLE: f64 = 1e-12;
const PLAIN_MIN_AUROC: f64 = 0.90;
const PLAIN_MIN_COVERAGE_TOL0: f64 = 0.5;
const PLAIN_MIN_LOC_HIT: f64 = 0.90;
const PLAIN_MAX_WALL_SECS: f64 = 1800.0;
const DG_MIN_AUROC: f64 = 0.85;
const STRETCH_MIN_AUROC: f64 = 97.0;

type Outcome = Result<String, String>;

fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    Init::seeded(seed)
        .normal::<f64>(&[shape.0, shape.1, shape.2, shape.3], 1.0)
        .into_dimensionality()
        .unwrap()
}

fn pyramid(plan: &ArchPlan, b: usize, seed: u64) -> FeaturePyramid<f64> {
    let mut init = Init::seeded(seed);
    let taps = (0..4)
        .map(|l| {
            init.normal::<f64>(&[b, plan.tap_channels[l], plan.tap_hw[l].0, plan.tap_hw[l].1], 1.0)
                .into_dimensionality()
                .unwrap()
        })
        .collect();
    FeaturePyramid::new(taps).unwrap()
}

/// Cosine distance at a single pixel with two channels.
fn one_pixel(t: [f64; 2], s: [f64; 2]) -> f64 {
    let tt = Array4::from_shape_vec((1, 2, 1, 1), t.to_vec()).unwrap();
    let ss = Array4::from_shape_vec((1, 2, 1, 1), s.to_vec()).unwrap();
    pixel_distance_map(&tt, &ss).unwrap()[[0, 0, 0]]
}

/// Criterion 1: the loss operations reproduce the hand-computed examples and
/// the zero-vector rules without non-finite values.
fn criterion_1() -> Outcome {
    let cases = [
        ([1.0, 0.0], [1.0, 0.0], 0.0),
        ([2.0, 0.0], [5.0, 0.0], 0.0), // scale-free
        ([1.0, 0.0], [0.0, 2.0], 1.0), // orthogonal
        ([1.0, 0.0], [-3.0, 0.0], 2.0), // opposite
        ([3.0, 4.0], [4.0, 3.0], 0.04), // 1 - 24/25
        ([0.0, 0.0], [0.0, 0.0], 0.0), // both degenerate
        ([0.0, 0.0], [1.0, 1.0], 1.0), // one degenerate
        ([1.0, 1.0], [0.0, 0.0], 1.0),
    ];
    let mut worst = 0.0f64;
    for (t, s, want) in cases {
        let got = one_pixel(t, s);
        if !got.is_finite() {
            return Err(format!("distance({t:?}, {s:?}) is not finite: {got}"));
        }
        worst = worst.max((got - want).abs());
    }

    // Assembled breakdown on identical pyramids: distillation term vanishes,
    // the auxiliary MSE carries through with lambda = 0.1.
    let mut init = Init::seeded(5);
    let taps: Vec<Array4<f64>> = vec![
        init.normal::<f64>(&[1, 2, 4, 4], 1.0).into_dimensionality().unwrap(),
        init.normal::<f64>(&[1, 2, 4, 4], 1.0).into_dimensionality().unwrap(),
        init.normal::<f64>(&[1, 3, 2, 2], 1.0).into_dimensionality().unwrap(),
        init.normal::<f64>(&[1, 4, 1, 1], 1.0).into_dimensionality().unwrap(),
    ];
    let teacher = FeaturePyramid::new(taps.clone()).unwrap();
    let out = ModelOut {
        student: taps,
        fused: Array4::from_shape_vec((1, 1, 1, 2), vec![1.0, 2.0]).unwrap(),
        sspcab_out: Array4::zeros((1, 1, 1, 2)),
    };
    let w = LossWeights::default();
    if w.alpha != [0.4, 0.3, 0.2, 0.1] || (w.lambda - 0.1).abs() > TOL_ANALYTIC {
        return Err(format!("published weights drifted: {w:?}"));
    }
    let (b, g) = objective_with_grads(&teacher, &out, &w).unwrap();
    worst = worst.max(b.distill.abs());
    worst = worst.max((b.aux - 2.5).abs());
    worst = worst.max((b.total - 0.25).abs());
    worst = worst.max((g.d_sspcab_out[[0, 0, 0, 1]] + 0.2).abs());
    for l in 0..4 {
        let stationary = g.d_student[l].iter().all(|&v| v.abs() < 1e-12);
        if !stationary {
            return Err(format!("identical pyramids leave a layer-{l} gradient"));
        }
    }
    if worst <= TOL_ANALYTIC {
        Ok(format!("loss examples reproduce, max |error| {worst:.2e} <= {TOL_ANALYTIC:.0e}"))
    } else {
        Err(format!("max |error| {worst:.2e} > {TOL_ANALYTIC:.0e}"))
    }
}

/// Criterion 2: analytic gradients of every trainable block match central
/// finite differences on toy shapes.
fn criterion_2() -> Outcome {
    let mut worst: (f64, &str) = (0.0, "none");
    let mut track = |err: f64, what: &'static str| {
        if err > worst.0 {
            worst = (err, what);
        }
    };

    let mut attention = AttentionBlock::<f64>::new(12, 4, &mut Init::seeded(5));
    let x = rand4((2, 12, 4, 4), 6);
    let r = rand4((2, 12, 4, 4), 7);
    let report = gradcheck::check(
        &mut attention,
        |m| {
            let (y, cache) = m.forward(&x).unwrap();
            m.backward(&x, &cache, &r);
            (&y * &r).sum()
        },
        |m| (&m.forward(&x).unwrap().0 * &r).sum(),
        &GradCheckCfg::default(),
    );
    track(report.max_rel_err, "attention");

    let mut link = ResidualLink::<f64>::new(6, 10, 2, 2, &mut Init::seeded(4));
    let tap = rand4((2, 6, 6, 6), 5);
    let r = rand4((2, 10, 3, 3), 6);
    let report = gradcheck::check(
        &mut link,
        |m| {
            let (y, cache) = m.forward(&tap).unwrap();
            m.backward(&tap, &cache, &r);
            (&y * &r).sum()
        },
        |m| (&m.forward(&tap).unwrap().0 * &r).sum(),
        &GradCheckCfg::default(),
    );
    track(report.max_rel_err, "residual link");

    let plan = ArchPlan::tiny();
    let mut bottleneck = Bottleneck::<f64>::new(&plan, 8, &mut Init::seeded(6));
    let pyr = pyramid(&plan, 2, 7);
    let (eh, ew) = plan.embed_hw();
    let r_emb = rand4((2, plan.embed_channels, eh, ew), 8);
    let r_ssp = rand4((2, plan.fused_channels(), plan.fused_hw.0, plan.fused_hw.1), 9);
    let report = gradcheck::check(
        &mut bottleneck,
        |m| {
            let (fused, fc) = m.fuse(&pyr).unwrap();
            let (emb, sspcab_out, cache) = m.forward_train(&fused).unwrap();
            let g_fused = m.backward(&cache, &r_emb, &r_ssp);
            m.fuse_backward(&fc, &g_fused);
            (&emb * &r_emb).sum() + (&sspcab_out * &r_ssp).sum()
        },
        |m| {
            let (fused, _) = m.fuse(&pyr).unwrap();
            let (emb, sspcab_out, _) = m.forward_train(&fused).unwrap();
            (&emb * &r_emb).sum() + (&sspcab_out * &r_ssp).sum()
        },
        &GradCheckCfg { max_per_param: 6, ..Default::default() },
    );
    track(report.max_rel_err, "bottleneck");

    let mut sspcab = Sspcab::<f64>::new(3, 2, &mut Init::seeded(10));
    let x = rand4((2, 3, 5, 5), 11);
    let r = rand4((2, 3, 5, 5), 12);
    let report = gradcheck::check(
        &mut sspcab,
        |m| {
            let (y, cache) = m.forward(&x);
            m.backward(&x, &cache, &r);
            (&y * &r).sum()
        },
        |m| (&m.forward(&x).0 * &r).sum(),
        &GradCheckCfg { max_per_param: 12, ..Default::default() },
    );
    track(report.max_rel_err, "sspcab");

    // Full model: probe every output head at once so the check covers the
    // grand-total backward path.
    let mut model = RdModel::<f64>::seeded(&plan, &ModelConfig::default(), 11).unwrap();
    let pyr = pyramid(&plan, 2, 12);
    let probes: Vec<Array4<f64>> = {
        let (out, _) = model.forward_train(&pyr).unwrap();
        let mut ps: Vec<Array4<f64>> = out
            .student
            .iter()
            .enumerate()
            .map(|(l, s)| {
                Init::seeded(20 + l as u64)
                    .normal::<f64>(s.shape(), 1.0)
                    .into_dimensionality()
                    .unwrap()
            })
            .collect();
        ps.push(Init::seeded(30).normal::<f64>(out.sspcab_out.shape(), 1.0).into_dimensionality().unwrap());
        ps.push(Init::seeded(31).normal::<f64>(out.fused.shape(), 1.0).into_dimensionality().unwrap());
        ps
    };
    let score = |out: &ModelOut<f64>| -> f64 {
        out.student.iter().zip(&probes).map(|(s, p)| (s * p).sum()).sum::<f64>()
            + (&out.sspcab_out * &probes[4]).sum()
            + (&out.fused * &probes[5]).sum()
    };
    let report = gradcheck::check(
        &mut model,
        |m| {
            let (out, cache) = m.forward_train(&pyr).unwrap();
            let d: [Array4<f64>; 4] = std::array::from_fn(|l| probes[l].clone());
            m.backward(&pyr, &cache, &d, &probes[4], &probes[5]);
            score(&out)
        },
        |m| score(&m.forward_train(&pyr).unwrap().0),
        &GradCheckCfg { max_per_param: 4, ..Default::default() },
    );
    track(report.max_rel_err, "full model");

    if worst.0 <= TOL_GRAD_REL {
        Ok(format!(
            "finite differences agree, worst rel err {:.2e} ({}) <= {TOL_GRAD_REL:.0e}",
            worst.0, worst.1
        ))
    } else {
        Err(format!("rel err {:.2e} in {} > {TOL_GRAD_REL:.0e}", worst.0, worst.1))
    }
}

/// Criterion 3: student output shapes mirror the teacher taps, the frozen
/// teacher survives a 100-step training run bit-for-bit, and the SSPCAB
/// masked convolution has no path from a position to itself.
fn criterion_3() -> Outcome {
    // Shape agreement on both the test-scale and a real plan.
    for (plan, seed) in [(ArchPlan::tiny(), 1u64), (ArchPlan::for_input(64), 2)] {
        let model = RdModel::<f64>::seeded(&plan, &ModelConfig::default(), seed).unwrap();
        let pyr = pyramid(&plan, 2, seed + 10);
        let out = model.forward_eval(&pyr).unwrap();
        for l in 0..4 {
            if out.student[l].shape() != pyr.taps[l].shape() {
                return Err(format!(
                    "student layer {l} shape {:?} != teacher tap {:?}",
                    out.student[l].shape(),
                    pyr.taps[l].shape()
                ));
            }
        }
    }

    // 100 optimizer steps against a real teacher must leave its weights
    // untouched (checksum is recomputed from the tensors inside verify).
    let mut backbone = BackboneSpec::resnet34_256();
    backbone.input_size = 64;
    let teacher = Teacher::seeded(backbone, DEFAULT_TEACHER_SEED).unwrap();
    let checksum_before = teacher.checksum().to_string();
    let batch = Init::seeded(3)
        .normal::<f32>(&[2, 3, 64, 64], 0.5)
        .into_dimensionality()
        .unwrap();
    let pyr = teacher.extract_features(&batch).unwrap();
    let plan = teacher.plan();
    let mut model = RdModel::<f32>::seeded(&plan, &ModelConfig::default(), 4).unwrap();
    let mut opt = Adam::new(5e-3);
    for step in 0..100 {
        train_step(&mut model, &pyr, &LossWeights::default(), &mut opt)
            .map_err(|e| format!("training failed at step {step}: {e}"))?;
    }
    teacher.verify_unchanged().map_err(|e| format!("teacher changed: {e}"))?;
    if teacher.checksum() != checksum_before {
        return Err("teacher checksum drifted across training".into());
    }

    // SSPCAB center masking on the toy grid: bumping x at (3, 3) leaves the
    // response there and at the axis-aligned neighbours exactly unchanged,
    // while all four diagonal readers react.
    let block = Sspcab::<f64>::new(2, 2, &mut Init::seeded(4));
    let x = rand4((1, 2, 6, 6), 5);
    let base = block.masked_conv(&x);
    let mut bumped = x.clone();
    bumped[[0, 1, 3, 3]] += 10.0;
    let after = block.masked_conv(&bumped);
    for co in 0..2 {
        if base[[0, co, 3, 3]] != after[[0, co, 3, 3]] {
            return Err("masked conv reads its own center".into());
        }
    }
    for (di, dj) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
        let (i, j) = ((3 - di) as usize, (3 - dj) as usize);
        if base[[0, 0, i, j]] != after[[0, 0, i, j]] {
            return Err("masked conv reads axis-aligned neighbours".into());
        }
    }
    let mut corners_reacting = 0;
    for (di, dj) in [(-1i64, -1i64), (-1, 1), (1, -1), (1, 1)] {
        let (i, j) = ((3 - di) as usize, (3 - dj) as usize);
        if (base[[0, 0, i, j]] - after[[0, 0, i, j]]).abs() > 1e-9 {
            corners_reacting += 1;
        }
    }
    if corners_reacting != 4 {
        return Err(format!("only {corners_reacting}/4 corner readers saw the center bump"));
    }
    Ok("shapes mirror taps, teacher checksum stable over 100 steps, center masking holds".into())
}

/// Criterion 4: AUROC against the O(n^2) pairwise oracle and coverage
/// against exhaustive band enumeration, on 200 random instances each, with
/// coverage monotone in tolerance throughout.
fn criterion_4() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(41);
    let mut worst_auroc = 0.0f64;
    for _ in 0..200 {
        let n_good = rng.random_range(1..=25);
        let n_def = rng.random_range(1..=25);
        // A coarse score grid forces plenty of ties.
        let scores: Vec<f64> = (0..n_good + n_def)
            .map(|_| rng.random_range(0..12) as f64 / 4.0)
            .collect();
        let labels: Vec<bool> =
            (0..n_good + n_def).map(|i| i >= n_good).collect();
        let fast = auroc(&scores, &labels).unwrap();
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (sd, _) in scores.iter().zip(&labels).filter(|(_, &l)| l) {
            for (sg, _) in scores.iter().zip(&labels).filter(|(_, &l)| !l) {
                pairs += 1.0;
                if sd > sg {
                    wins += 1.0;
                } else if sd == sg {
                    wins += 0.5;
                }
            }
        }
        worst_auroc = worst_auroc.max((fast - wins / pairs).abs());
    }
    if worst_auroc > TOL_AUROC_ORACLE {
        return Err(format!("AUROC oracle disagreement {worst_auroc:.2e} > {TOL_AUROC_ORACLE:.0e}"));
    }

    let mut worst_cov = 0.0f64;
    for _ in 0..200 {
        let n_good = rng.random_range(1..=25);
        let n_def = rng.random_range(1..=25);
        let scores: Vec<f64> = (0..n_good + n_def)
            .map(|_| rng.random_range(0..20) as f64 / 10.0)
            .collect();
        let labels: Vec<bool> = (0..n_good + n_def).map(|i| i >= n_good).collect();
        let mut previous = f64::INFINITY;
        for &tol in &COVERAGE_TOLERANCES {
            let fast = coverage_at_full_precision_recall(&scores, &labels, tol).unwrap();
            // Pairwise enumeration oracle: a sample is auto-classified
            // exactly when it clears every sample of the other class by the
            // tolerance margin, checked sample against sample.
            let auto = scores
                .iter()
                .filter(|&&s| {
                    let safely_good = scores
                        .iter()
                        .zip(&labels)
                        .filter(|(_, &l)| l)
                        .all(|(&d, _)| s < d - tol);
                    let safely_defective = scores
                        .iter()
                        .zip(&labels)
                        .filter(|(_, &l)| !l)
                        .all(|(&g, _)| s > g + tol);
                    safely_good || safely_defective
                })
                .count();
            let oracle = auto as f64 / scores.len() as f64;
            worst_cov = worst_cov.max((fast - oracle).abs());
            if fast > previous + 1e-15 {
                return Err(format!("coverage increased with tolerance: {fast} after {previous}"));
            }
            previous = fast;
        }
    }
    if worst_cov > 1e-12 {
        return Err(format!("coverage oracle disagreement {worst_cov:.2e}"));
    }
    Ok(format!(
        "200+200 instances: AUROC within {worst_auroc:.1e}, coverage within {worst_cov:.1e}, monotone"
    ))
}

/// Criterion 5: the anomaly-map examples reproduce, the max score never
/// drops when any single pixel rises, and the published patch count for a
/// full-resolution fabric image comes out of the tiling arithmetic.
fn criterion_5() -> Outcome {
    // Upsample-then-sum hand example at a sigma small enough that smoothing
    // is the identity.
    let m1 = Array2::from_shape_vec((2, 2), vec![0.0f32, 0.0, 0.0, 1.0]).unwrap();
    let m2 = Array2::from_shape_vec((1, 1), vec![0.5f32]).unwrap();
    let out = build_localization_map(&[m1, m2], 2, 1e-3).unwrap();
    let want = [0.5f32, 0.5, 0.5, 1.5];
    for (a, b) in out.map.iter().zip(want.iter()) {
        if (a - b).abs() > 1e-6 {
            return Err(format!("hand example map {:?} != {want:?}", out.map));
        }
    }
    // A delta spike smoothed at sigma 4 peaks at the kernel center weight.
    let mut spike = Array2::<f32>::zeros((33, 33));
    spike[[16, 16]] = 1.0;
    let smoothed = build_localization_map(&[spike], 33, 4.0).unwrap();
    let taps = gaussian_kernel(4.0).unwrap();
    let center = (taps[16] * taps[16]) as f32;
    let s = image_score(&smoothed);
    if (s.score - center).abs() > 1e-6 || s.argmax_location != (16, 16) {
        return Err(format!("delta spike peaked at {:?} with {}", s.argmax_location, s.score));
    }

    // Monotonicity: raising one pixel never lowers the smoothed max.
    let mut rng = ChaCha20Rng::seed_from_u64(51);
    let base: Array2<f32> =
        Array2::from_shape_fn((12, 12), |_| rng.random_range(0.0..1.0));
    let base_score = image_score(&build_localization_map(&[base.clone()], 12, 2.0).unwrap()).score;
    for trial in 0..1000 {
        let mut bumped = base.clone();
        let (i, j) = (rng.random_range(0..12), rng.random_range(0..12));
        bumped[[i, j]] += rng.random_range(0.0..2.0f32);
        let s = image_score(&build_localization_map(&[bumped], 12, 2.0).unwrap()).score;
        if s < base_score - 1e-6 {
            return Err(format!("trial {trial}: bump at ({i}, {j}) lowered max {base_score} -> {s}"));
        }
    }

    // 3088x2076 at 256x256 patches: floor(3088/256) * floor(2076/256) = 96.
    let grid = extract_patches(3088, 2076, 256).unwrap();
    if grid.n_patches() != 96 {
        return Err(format!("3088x2076/256 tiling gave {} patches, not 96", grid.n_patches()));
    }
    Ok("map examples reproduce, 1000-bump monotonicity holds, 3088x2076/256 tiles to 96".into())
}

/// Criterion 6: the plain synthetic scenario trains within budget and clears
/// the detection, coverage, and localization bars.
fn criterion_6() -> Outcome {
    let spec = load_scenario("plain").map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let report = run_scenario(&spec, dir.path()).map_err(|e| e.to_string())?;
    let class = report
        .reports
        .first()
        .ok_or_else(|| "scenario produced no class report".to_string())?;
    let loc = report.localization_hit_rate.unwrap_or(0.0);
    let detail = format!(
        "image AUROC {:.4} (>= {PLAIN_MIN_AUROC}), coverage(0) {:.2} (>= {PLAIN_MIN_COVERAGE_TOL0}), localization {:.2} (>= {PLAIN_MIN_LOC_HIT}), {:.0}s of {PLAIN_MAX_WALL_SECS:.0}s",
        class.image_auroc, class.coverage.tol_0, loc, report.wall_clock_secs
    );
    let ok = class.image_auroc >= PLAIN_MIN_AUROC
        && class.coverage.tol_0 >= PLAIN_MIN_COVERAGE_TOL0
        && loc >= PLAIN_MIN_LOC_HIT
        && report.wall_clock_secs <= PLAIN_MAX_WALL_SECS
        && !report.budget_exceeded
        && report.passed;
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Criterion 7: the two modes compute different functions on linked taps
/// even with identical shared weights, and the pooled domain-generalized
/// scenario clears the per-class bar.
fn criterion_7() -> Outcome {
    // Same seed => identical bottleneck and student weights; the standard
    // model differs only by its residual links.
    let plan = ArchPlan::tiny();
    let standard = RdModel::<f64>::seeded(&plan, &ModelConfig::default(), 3).unwrap();
    let generalized = RdModel::<f64>::seeded(&plan, &ModelConfig::domain_generalized(), 3).unwrap();
    let pyr = pyramid(&plan, 2, 9);
    let out_std = standard.forward_eval(&pyr).unwrap();
    let out_dg = generalized.forward_eval(&pyr).unwrap();
    let linked: Vec<usize> = ModelConfig::default().link_taps.into_iter().collect();
    let mut max_abs = 0.0f64;
    for &l in &linked {
        for (a, b) in out_std.student[l].iter().zip(out_dg.student[l].iter()) {
            max_abs = max_abs.max((a - b).abs());
        }
    }
    if max_abs <= 0.0 {
        return Err("standard and domain-generalized outputs coincide on linked taps".into());
    }

    let spec = load_scenario("domain_generalized").map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let report = run_scenario(&spec, dir.path()).map_err(|e| e.to_string())?;
    if report.reports.len() != 2 {
        return Err(format!("expected 2 class reports, got {}", report.reports.len()));
    }
    let aurocs: Vec<String> =
        report.reports.iter().map(|r| format!("{} {:.4}", r.class_name, r.image_auroc)).collect();
    let detail = format!(
        "modes differ (max-abs {max_abs:.3}); per-class AUROC {} (each >= {DG_MIN_AUROC})",
        aurocs.join(", ")
    );
    if report.reports.iter().all(|r| r.image_auroc >= DG_MIN_AUROC) && report.passed {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Criterion 8: full-scale paper numbers are out of desk-scale reach and
/// only checked when a real MVTEC root is supplied.
fn criterion_8() -> Outcome {
    let Some(root) = mvtec_root_from_env() else {
        return Ok(format!(
            "skipped: full-scale stretch needs RDFABRIC_MVTEC_ROOT (bar: image AUROC >= {STRETCH_MIN_AUROC} on carpet and leather)"
        ));
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let outcomes = run_mvtec_stretch(&root, dir.path()).map_err(|e| e.to_string())?;
    let detail: Vec<String> = outcomes
        .iter()
        .map(|o| format!("{} {:.1} (paper {:.1})", o.class_name, o.measured_auroc, o.reference_auroc))
        .collect();
    let detail = detail.join(", ");
    if outcomes.iter().all(|o| o.meets_bar) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

#[test]
fn acceptance() {
    let criteria: [(u32, fn() -> Outcome); 8] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
    ];
    let mut failed = Vec::new();
    for (n, run) in criteria {
        match run() {
            Ok(detail) => println!("criterion {n}: PASS — {detail}"),
            Err(detail) => {
                println!("criterion {n}: FAIL — {detail}");
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "acceptance criteria failed: {failed:?}");
}
