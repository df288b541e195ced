//! Acceptance suite: one PASS/FAIL line per criterion, each with its own
//! time budget. Run with `cargo test -p vqadiff-cli --test acceptance -- --nocapture`.

use std::process::Command;
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqadiff_core::appearance::canny::{canny, CannyParams};
use vqadiff_core::backends::{BackendKind, Backends, StubVqa, TraceLog};
use vqadiff_core::digest::dir_digest;
use vqadiff_core::eval::fixtures::{deltas, fewer_views_lower_fid, multi_expert_beats_single};
use vqadiff_core::eval::{fid, EvalReport, FeatureSet, Metric, MetricValues, ReferenceTables};
use vqadiff_core::geometry::{camera_ring, CameraRing};
use vqadiff_core::grid::{expert_assignment, split, tile};
use vqadiff_core::raster::write_png;
use vqadiff_core::vqa::{refine_question, AnswerScorer, QuestionTemplateBank, CANONICAL_QUESTION};

#[path = "../../core/tests/support/canny_reference.rs"]
mod canny_reference;
#[path = "../../core/tests/support/published_tables.rs"]
mod published_tables;

type Check = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn geometry() -> Check {
    let ring = camera_ring(16, 5.0, 1.5, 0.0).map_err(|e| e.to_string())?;
    ensure(ring.poses.len() == 16, || format!("{} poses", ring.poses.len()))?;
    let height = 1.5 * 5f64.to_radians().sin();
    for (i, p) in ring.poses.iter().enumerate() {
        let pos = p.position();
        ensure((pos.norm() - 1.5).abs() < 1e-9, || format!("view {i}: |p| = {}", pos.norm()))?;
        ensure((pos.z - height).abs() < 1e-9, || format!("view {i}: height {}", pos.z))?;
    }
    for (i, w) in ring.poses.windows(2).enumerate() {
        let gap = w[1].azimuth_deg - w[0].azimuth_deg;
        ensure(gap == 22.5, || format!("gap {i}->{} is {gap}", i + 1))?;
    }
    let wrap = 360.0 + ring.poses[0].azimuth_deg - ring.poses[15].azimuth_deg;
    ensure(wrap == 22.5, || format!("wrap-around gap is {wrap}"))
}

/// Random views cut at random offsets from one pool; filling every view
/// from the rng directly is too slow in a debug build.
fn noise(rng: &mut ChaCha8Rng, pool: &[u8], side: u32) -> RgbImage {
    let len = (side * side * 3) as usize;
    let at = rng.random_range(0..=pool.len() - len);
    RgbImage::from_raw(side, side, pool[at..at + len].to_vec()).expect("buffer matches dimensions")
}

fn grid_codec() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut pool = vec![0u8; 4 << 20];
    rng.fill_bytes(&mut pool);
    for case in 0..1000 {
        let views = [(); 4].map(|_| noise(&mut rng, &pool, 256));
        let grid = tile(&views, [0, 1, 2, 3]).map_err(|e| e.to_string())?;
        ensure(grid.image.dimensions() == (512, 512), || format!("case {case}: grid size"))?;
        let back = split(&grid).map_err(|e| e.to_string())?;
        ensure(back == views, || format!("case {case}: round trip differs"))?;
    }
    let a = expert_assignment(16, 4).map_err(|e| e.to_string())?;
    ensure(a.anchor_indices == [0, 4, 8, 12], || format!("anchors {:?}", a.anchor_indices))?;
    let mut seen: Vec<usize> = Vec::new();
    for (k, &anchor) in a.anchor_indices.iter().enumerate() {
        let want: Vec<usize> = (anchor..anchor + 4).collect();
        ensure(a.block(k) == want.as_slice(), || format!("block {k} is {:?}", a.block(k)))?;
        seen.extend(a.block(k));
    }
    seen.sort();
    ensure(seen == (0..16).collect::<Vec<_>>(), || "blocks do not partition 0..16".into())
}

fn canny_check() -> Check {
    let step = RgbImage::from_fn(64, 64, |x, _| if x < 32 { Rgb([0; 3]) } else { Rgb([255; 3]) });
    let params = CannyParams::default();
    let got = canny(&step, &params).map_err(|e| e.to_string())?;
    let want = canny_reference::reference_canny(&step, params.sigma, params.low as i128, params.high as i128);
    let mut edges = 0;
    for (y, row) in want.iter().enumerate() {
        for (x, &v) in row.iter().enumerate() {
            edges += usize::from(v == 255);
            let g = got.raster.get_pixel(x as u32, y as u32)[0];
            ensure(g == v, || format!("step pixel ({x},{y}): {g} vs {v}"))?;
        }
    }
    ensure(edges > 0, || "reference found no edges on the step".into())?;

    for c in [0u8, 1, 77, 128, 254, 255] {
        let flat = RgbImage::from_pixel(40, 40, Rgb([c, c / 2, 255 - c]));
        let e = canny(&flat, &params).map_err(|e| e.to_string())?;
        ensure(e.raster.pixels().all(|p| p[0] == 0), || format!("constant {c} has edges"))?;
    }

    // equal thresholds keep hysteresis local, so interior pixels far
    // from the crop border must follow the shift exactly
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let eq = CannyParams {
        sigma: 1.4,
        low: 40.0,
        high: 40.0,
    };
    let (size, base, margin) = (48u32, 8u32, 6i64);
    for case in 0..100 {
        let mut full = RgbImage::from_pixel(64, 64, Rgb([128; 3]));
        for _ in 0..rng.random_range(1..5) {
            let (x0, y0) = (rng.random_range(0..56u32), rng.random_range(0..56u32));
            let (w, h) = (rng.random_range(4..24u32), rng.random_range(4..24u32));
            let v = rng.random_range(0..=255u8);
            for y in y0..(y0 + h).min(64) {
                for x in x0..(x0 + w).min(64) {
                    full.put_pixel(x, y, Rgb([v; 3]));
                }
            }
        }
        let (dx, dy) = (rng.random_range(-8i64..=8), rng.random_range(-8i64..=8));
        let crop = |ox: i64, oy: i64| image::imageops::crop_imm(&full, ox as u32, oy as u32, size, size).to_image();
        let a = canny(&crop(base as i64, base as i64), &eq).map_err(|e| e.to_string())?.raster;
        let b = canny(&crop(base as i64 + dx, base as i64 + dy), &eq).map_err(|e| e.to_string())?.raster;
        let inside = |v: i64| v >= margin && v < size as i64 - margin;
        for y in 0..size as i64 {
            for x in 0..size as i64 {
                let (bx, by) = (x - dx, y - dy);
                if inside(x) && inside(y) && inside(bx) && inside(by) {
                    let (pa, pb) = (a.get_pixel(x as u32, y as u32)[0], b.get_pixel(bx as u32, by as u32)[0]);
                    ensure(pa == pb, || format!("case {case}, shift ({dx},{dy}) at ({x},{y})"))?;
                }
            }
        }
    }
    Ok(())
}

fn hadamard(n: usize) -> Vec<Vec<f64>> {
    let mut h = vec![vec![1.0]];
    while h.len() < n {
        let m = h.len();
        let mut next = vec![vec![0.0; 2 * m]; 2 * m];
        for i in 0..m {
            for j in 0..m {
                next[i][j] = h[i][j];
                next[i][j + m] = h[i][j];
                next[i + m][j] = h[i][j];
                next[i + m][j + m] = -h[i][j];
            }
        }
        h = next;
    }
    h
}

/// Samples with mean `mu` and diagonal covariance (axis j is Hadamard
/// column j + 1 scaled by `s[j]`), so sample variances are exactly
/// `s[j]² · n / (n - 1)`.
fn diagonal_set(n: usize, mu: &[f64], s: &[f64]) -> FeatureSet {
    let h = hadamard(n);
    let vectors = (0..n)
        .map(|i| (0..mu.len()).map(|j| mu[j] + s[j] * h[i][j + 1]).collect())
        .collect();
    FeatureSet::new(vectors, "oracle").expect("valid set")
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, d: usize) -> FeatureSet {
    let a: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let vectors = (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            (0..d).map(|i| (0..d).map(|k| a[i][k] * z[k]).sum::<f64>() + i as f64).collect()
        })
        .collect();
    FeatureSet::new(vectors, "rand").expect("valid set")
}

fn fid_check() -> Check {
    let f = |a: &FeatureSet, b: &FeatureSet| fid(a, b).map_err(|e| e.to_string());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_set(&mut rng, 24, 6);
    let same = f(&a, &a)?;
    ensure(same.abs() < 1e-6, || format!("identical sets give {same}"))?;

    let one_a = FeatureSet::new(vec![vec![-1.0], vec![1.0]], "x").map_err(|e| e.to_string())?;
    let one_b = FeatureSet::new(vec![vec![0.0], vec![2.0]], "x").map_err(|e| e.to_string())?;
    let one = f(&one_a, &one_b)?;
    ensure((one - 1.0).abs() < 1e-6, || format!("1-D case gives {one}"))?;

    let mu_a: [f64; 8] = [0.0, 1.0, -2.0, 0.5, 3.0, 0.0, 1.5, -1.0];
    let mu_b = [1.0, 1.0, 0.0, 0.0, 2.5, -1.0, 1.5, 2.0];
    let s_a = [1.0, 0.5, 2.0, 0.1, 1.5, 3.0, 0.7, 1.1];
    let s_b = [2.0, 0.5, 1.0, 0.4, 0.2, 1.0, 0.7, 2.2];
    let (na, nb) = (16.0f64, 32.0f64);
    let oracle: f64 = (0..8)
        .map(|j| {
            let sa = s_a[j] * (na / (na - 1.0)).sqrt();
            let sb = s_b[j] * (nb / (nb - 1.0)).sqrt();
            (mu_a[j] - mu_b[j]).powi(2) + (sa - sb).powi(2)
        })
        .sum();
    let diag = f(&diagonal_set(16, &mu_a, &s_a), &diagonal_set(32, &mu_b, &s_b))?;
    ensure((diag - oracle).abs() < 1e-6, || format!("diagonal case {diag} vs {oracle}"))?;

    for pair in 0..50 {
        let d = rng.random_range(1..7);
        let (n1, n2) = (rng.random_range(d + 2..30), rng.random_range(d + 2..30));
        let x = random_set(&mut rng, n1, d);
        let y = random_set(&mut rng, n2, d);
        let (xy, yx) = (f(&x, &y)?, f(&y, &x)?);
        ensure((xy - yx).abs() < 1e-8, || format!("pair {pair}: {xy} vs {yx}"))?;
    }
    Ok(())
}

fn end_to_end() -> Check {
    let photo = RgbImage::from_fn(96, 64, |x, y| {
        if (22..46).contains(&y) && (10..86).contains(&x) {
            Rgb([30, 60, 160])
        } else {
            Rgb([220, 224, 226])
        }
    });
    let mut digests = Vec::new();
    for run in 0..3 {
        let ws = tempfile::tempdir().map_err(|e| e.to_string())?;
        std::fs::write(ws.path().join("vqadiff.toml"), "seed = 42\n").map_err(|e| e.to_string())?;
        write_png(&ws.path().join("car.png"), &photo).map_err(|e| e.to_string())?;
        let out = Command::new(env!("CARGO_BIN_EXE_vqadiff"))
            .current_dir(ws.path())
            .env_remove("VQADIFF_BACKEND_TIMEOUT_S")
            .args(["generate", "--image", "car.png", "--trace", "trace.jsonl", "--out", "bundle"])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || {
            format!("run {run} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr))
        })?;
        let bundle = ws.path().join("bundle");
        digests.push(dir_digest(&bundle).map_err(|e| e.to_string())?);

        let records = TraceLog::read_jsonl(&ws.path().join("trace.jsonl")).map_err(|e| e.to_string())?;
        let count = |stage: &str| {
            records
                .iter()
                .filter(|r| r.stage == stage && r.ok && r.kind.is_generation())
                .count()
        };
        ensure(count("structure") == 5, || format!("run {run}: {} structure calls", count("structure")))?;
        ensure(count("appearance") == 16, || format!("run {run}: {} appearance calls", count("appearance")))?;

        let poses: CameraRing = vqadiff_core::json::read_json(&bundle.join("poses.json")).map_err(|e| e.to_string())?;
        let want = camera_ring(16, 5.0, 1.5, 0.0).map_err(|e| e.to_string())?;
        ensure(poses == want, || format!("run {run}: poses.json differs from the configured ring"))?;
        let views = (0..16).filter(|i| bundle.join(format!("view_{i:02}.png")).is_file()).count();
        ensure(views == 16, || format!("run {run}: {views} views exported"))?;
    }
    ensure(digests.iter().all(|d| *d == digests[0]), || format!("digests differ: {digests:?}"))
}

/// Scores by how specific the asked question is.
struct Specificity;

impl AnswerScorer for Specificity {
    fn score(&self, _: &Backends, _: &RgbImage, question: &str, _: &str) -> vqadiff_core::Result<f64> {
        Ok(match question {
            "What is this image?" => 0.2,
            "What car is it?" => 0.5,
            q if q == CANONICAL_QUESTION => 0.9,
            _ => 0.1,
        })
    }
}

fn refinement() -> Check {
    let backends = || {
        let vqa = StubVqa::default()
            .answer_question("What is this image?", "a car")
            .answer_question("What car is it?", "a Dodge Ram")
            .answer_question(CANONICAL_QUESTION, "2014 Dodge Ram 1500, a full-size pick-up truck")
            .answer_question("Is it a 2014 Dodge?", "yes");
        Backends::stub_with(vqa, Default::default(), Default::default())
    };
    let img = RgbImage::from_pixel(16, 16, Rgb([90, 20, 20]));
    let b = backends();
    let p = refine_question(&b, &img, &QuestionTemplateBank::default(), &Specificity, 5, 0.01)
        .map_err(|e| e.to_string())?;
    ensure(p.question == CANONICAL_QUESTION, || format!("chose {:?}", p.question))?;
    let scores: Vec<f64> = p.refinement_trace.iter().map(|e| e.score).collect();
    ensure(scores.len() >= 2 && scores.windows(2).all(|w| w[0] < w[1]), || format!("trace scores {scores:?}"))?;

    // the slotted template only becomes askable in a second iteration
    let bank = QuestionTemplateBank::new(vec![
        "What is this image?".into(),
        CANONICAL_QUESTION.into(),
        "Is it a {year} {manufacturer}?".into(),
    ])
    .map_err(|e| e.to_string())?;
    let b = backends();
    refine_question(&b, &img, &bank, &Specificity, 5, f64::INFINITY).map_err(|e| e.to_string())?;
    let asked = b.trace().records().iter().filter(|r| r.kind == BackendKind::Vqa).count();
    ensure(asked == 2, || format!("epsilon = inf asked {asked} questions"))?;
    let b = backends();
    refine_question(&b, &img, &bank, &Specificity, 5, 0.0).map_err(|e| e.to_string())?;
    let asked = b.trace().records().iter().filter(|r| r.kind == BackendKind::Vqa).count();
    ensure(asked == 3, || format!("epsilon = 0 asked {asked} questions"))
}

/// Exact decimal in thousandths.
fn milli(s: &str) -> i64 {
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    let frac = format!("{frac:0<3}");
    int.parse::<i64>().expect("integer part") * 1000 + frac[..3].parse::<i64>().expect("fraction")
}

fn fixtures() -> Check {
    let t = ReferenceTables::bundled();
    let rows: usize = t.tables.values().map(|t| t.methods.len()).sum();
    ensure(rows == published_tables::EXPECTED.len(), || format!("{rows} rows in the fixtures"))?;
    for &(table, method, itc, clip, fid, vqa) in published_tables::EXPECTED {
        let row = t.row(table, method).map_err(|e| e.to_string())?;
        for (metric, want) in [("itc", itc), ("clip_similarity", clip), ("fid", fid), ("vqa_score", vqa)] {
            let got = row.values.get(metric).map(String::as_str).unwrap_or("--");
            ensure(got == want, || format!("{table}/{method}/{metric}: {got} vs {want}"))?;
        }
    }
    let ours = t.row("pascal3d_comparison", "Ours").map_err(|e| e.to_string())?;
    ensure(ours.values["fid"] == "117.49", || "pascal3d Ours FID".into())?;
    let multi = t.row("expert_training_ablation", "Multi-expert DMs (50 epochs)").map_err(|e| e.to_string())?;
    ensure(multi.values["itc"] == "0.333", || "multi-expert ITC".into())?;

    let report: EvalReport = serde_json::from_value(serde_json::json!({
        "itc": 0.401, "clip_similarity": 0.8, "fid": 120.0, "vqa_score": 0.5, "n_views": 16,
        "method_label": "synthetic", "fixture_delta": null,
        "corpus": {"reference_digest": "", "fid_generated": 16, "fid_reference": 2,
                   "extractor_id": "x", "vqa_question": "q"}
    }))
    .map_err(|e| e.to_string())?;
    let d = deltas(&report.values(), ours).map_err(|e| e.to_string())?;
    let want = [
        (Metric::Itc, milli("0.401") - milli("0.380")),
        (Metric::ClipSimilarity, milli("0.800") - milli("0.856")),
        (Metric::Fid, milli("120.000") - milli("117.490")),
        (Metric::VqaScore, milli("0.500") - milli("0.903")),
    ];
    for (m, w) in want {
        ensure((d[&m] - w as f64 / 1000.0).abs() < 1e-9, || format!("{m:?} delta {} vs {w}", d[&m]))?;
    }
    Ok(())
}

/// Published metric values cannot be regenerated without the real models;
/// what is checked here is the ordinal-claims checker that the GPU runbook
/// applies to real runs, fed with the published rows.
fn published_scale_substitute() -> Check {
    let t = ReferenceTables::bundled();
    let values = |table: &str, method: &str| -> Result<MetricValues, String> {
        t.row(table, method)
            .and_then(|r| r.metric_values())
            .map_err(|e| e.to_string())
    };
    let multi = values("expert_training_ablation", "Multi-expert DMs (50 epochs)")?;
    for single in ["Single DM (50 epochs)", "Single DM (100 epochs)"] {
        for c in multi_expert_beats_single(&multi, &values("expert_training_ablation", single)?) {
            ensure(c.holds, || format!("{}: {}", c.claim, c.detail))?;
        }
    }
    let c = fewer_views_lower_fid(
        &values("view_count_ablation", "Single DM (9)")?,
        &values("view_count_ablation", "Single DM (16)")?,
    );
    ensure(c.holds, || format!("{}: {}", c.claim, c.detail))?;
    // the checker must also be able to fail
    let c = fewer_views_lower_fid(
        &values("view_count_ablation", "Single DM (16)")?,
        &values("view_count_ablation", "Single DM (9)")?,
    );
    ensure(!c.holds, || "swapped rows still satisfy the FID claim".into())
}

#[test]
fn acceptance() {
    let criteria: [(&str, Duration, fn() -> Check); 8] = [
        ("geometry", Duration::from_secs(1), geometry),
        ("grid_codec", Duration::from_secs(10), grid_codec),
        ("canny", Duration::from_secs(30), canny_check),
        ("fid", Duration::from_secs(10), fid_check),
        ("end_to_end_stub", Duration::from_secs(60), end_to_end),
        ("question_refinement", Duration::from_secs(5), refinement),
        ("fixtures", Duration::from_secs(60), fixtures),
        ("published_scale (ordinal claims on published rows only)", Duration::from_secs(60), published_scale_substitute),
    ];
    let mut failed = Vec::new();
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|()| {
            ensure(elapsed < budget, || format!("took {elapsed:.2?}, budget {budget:?}"))
        });
        match outcome {
            Ok(()) => println!("PASS {name} ({elapsed:.2?})"),
            Err(why) => {
                println!("FAIL {name} ({elapsed:.2?}): {why}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
