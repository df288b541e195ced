//! The `vqadiff` binary end to end on stub backends.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use tempfile::TempDir;
use vqadiff_core::backends::{BackendKind, TraceLog};
use vqadiff_core::geometry::view_file_name;
use vqadiff_core::raster::write_png;

struct Workspace {
    dir: TempDir,
}

fn car_photo() -> RgbImage {
    RgbImage::from_fn(64, 64, |x, y| {
        if (20..44).contains(&y) && (6..58).contains(&x) {
            Rgb([170, 30, 40])
        } else {
            Rgb([225, 228, 232])
        }
    })
}

impl Workspace {
    fn new(config: &str) -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(ws.path("vqadiff.toml"), config).unwrap();
        write_png(&ws.path("car.png"), &car_photo()).unwrap();
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_vqadiff"))
            .current_dir(self.dir.path())
            .env_remove("VQADIFF_BACKEND_TIMEOUT_S")
            .args(args)
            .output()
            .unwrap()
    }
}

/// Small views keep the stub pipeline fast.
const CONFIG: &str = "seed = 7\n[ring]\nimage_size = 32\n";

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field(o: &Output, name: &str) -> String {
    let prefix = format!("{name}: ");
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix(&prefix).map(str::to_string))
        .unwrap_or_else(|| panic!("no {name} in {}{}", stdout(o), stderr(o)))
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\n{}\n{}", o.status.code(), stdout(&o), stderr(&o));
    o
}

fn trace(path: &Path) -> Vec<vqadiff_core::backends::TraceRecord> {
    if path.exists() {
        TraceLog::read_jsonl(path).unwrap()
    } else {
        Vec::new()
    }
}

#[test]
fn generate_is_deterministic_and_replays_from_cache() {
    let a = Workspace::new(CONFIG);
    let b = Workspace::new(CONFIG);
    let first = ok(a.run(&["generate", "--image", "car.png", "--trace", "t1.jsonl"]));
    let other = ok(b.run(&["generate", "--image", "car.png"]));
    assert_eq!(field(&first, "digest"), field(&other, "digest"));
    let calls = trace(&a.path("t1.jsonl"));
    let gen = |stage: &str, kind| calls.iter().filter(|r| r.stage == stage && r.kind == kind && r.ok).count();
    assert_eq!(gen("structure", BackendKind::Text2image) + gen("structure", BackendKind::Image2image), 5);
    assert_eq!(gen("appearance", BackendKind::Edge2image), 16);

    let again = ok(a.run(&["generate", "--image", "car.png", "--trace", "t2.jsonl"]));
    assert_eq!(field(&again, "digest"), field(&first, "digest"));
    assert_eq!(field(&again, "backend calls"), "0");
    assert!(trace(&a.path("t2.jsonl")).is_empty());

    // a different seed is new work
    let seeded = ok(a.run(&["generate", "--image", "car.png", "--seed", "8"]));
    assert_ne!(field(&seeded, "digest"), field(&first, "digest"));
    assert!(ok(a.run(&["audit-cache"])).status.success());
}

#[test]
fn prompt_override_skips_vqa() {
    let ws = Workspace::new(CONFIG);
    let o = ok(ws.run(&[
        "generate",
        "--image",
        "car.png",
        "--prompt-override",
        "1967 Ford Mustang fastback",
        "--prompt-suffix",
        "with a rear spoiler",
        "--trace",
        "t.jsonl",
        "--out",
        "bundle",
    ]));
    let calls = trace(&ws.path("t.jsonl"));
    assert!(!calls.is_empty());
    assert!(calls.iter().all(|r| r.kind != BackendKind::Vqa));
    let prompt: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("bundle/prompt.json")).unwrap()).unwrap();
    assert_eq!(prompt["answer"], "1967 Ford Mustang fastback with a rear spoiler");
    assert_eq!(field(&o, "bundle"), "bundle");
}

#[test]
fn reference_transform_runs_before_description() {
    let ws = Workspace::new(CONFIG);
    ok(ws.run(&["generate", "--image", "car.png", "--reference-transform", "snowy street", "--trace", "t.jsonl"]));
    let calls = trace(&ws.path("t.jsonl"));
    let prompt: Vec<_> = calls.iter().filter(|r| r.stage == "prompt").collect();
    assert_eq!(prompt[0].kind, BackendKind::Image2image);
    assert!(prompt.iter().any(|r| r.kind == BackendKind::Vqa));
}

#[test]
fn missing_image_fails_without_touching_the_cache() {
    let ws = Workspace::new(CONFIG);
    let o = ws.run(&["generate", "--image", "nope.png"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("nope.png"));
    assert!(!ws.path("cache").exists());
}

#[test]
fn config_errors_exit_2() {
    let ws = Workspace::new("[ring]\nradius = -1.0\n[eval]\nvqa_template = \"Is it?\"\n");
    let o = ws.run(&["generate", "--image", "car.png"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("ring") && err.contains("vqa_template"), "{err}");
    assert!(!ws.path("cache").exists());

    let ws = Workspace::new("[ring]\nviews = 3\n");
    assert_eq!(ws.run(&["audit-cache"]).status.code(), Some(2));
}

#[test]
fn unreachable_backend_exits_3_with_stage() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let ws = Workspace::new(&format!(
        "{CONFIG}[http]\nbackoff_ms = 1\n[backends.vqa]\nendpoint = \"http://127.0.0.1:{port}\"\ntimeout_s = 2.0\n"
    ));
    let o = ws.run(&["generate", "--image", "car.png"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("prompt stage"), "{}", stderr(&o));
}

fn write_index(ws: &Workspace, ids: &[&str]) {
    let entries: Vec<_> = ids
        .iter()
        .map(|id| {
            serde_json::json!({
                "instance_id": id,
                "model_path": format!("/models/{id}/model.obj"),
                "bbox_min": [-2.0, -0.5, -1.0],
                "bbox_max": [2.0, 1.0, 1.0],
            })
        })
        .collect();
    std::fs::write(ws.path("index.json"), serde_json::to_string(&entries).unwrap()).unwrap();
}

fn render(ws: &Workspace, id: &str, n: usize) {
    let dir = ws.path("renders").join(id);
    std::fs::create_dir_all(&dir).unwrap();
    for i in 0..n {
        let v = (i * 15) as u8;
        let img = RgbImage::from_fn(16, 16, |x, y| if x > 4 && y > 6 { Rgb([v, 80, 255 - v]) } else { Rgb([240; 3]) });
        write_png(&dir.join(view_file_name(i)), &img).unwrap();
    }
}

#[test]
fn build_dataset_then_train_and_generate_with_experts() {
    let ws = Workspace::new(CONFIG);
    let ids = ["car_a", "car_b", "car_c"];
    write_index(&ws, &ids);
    let o = ok(ws.run(&["build-dataset", "--index", "index.json", "--manifests-only"]));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("manifest: ")).count(), 3);
    for id in ids {
        assert!(ws.path("renders").join(id).join("manifest.json").is_file());
    }

    // nothing rendered yet
    let o = ws.run(&["build-dataset", "--index", "index.json"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("car_b is incomplete"), "{}", stderr(&o));

    for id in ids {
        render(&ws, id, 16);
    }
    let o = ok(ws.run(&["build-dataset", "--index", "index.json"]));
    assert_eq!(field(&o, "pairs"), "15");
    assert_eq!(field(&o, "cache"), "miss");
    let datasets = field(&o, "datasets");

    let again = ok(ws.run(&["build-dataset", "--index", "index.json"]));
    assert_eq!(field(&again, "cache"), "hit");
    assert_eq!(field(&again, "backend calls"), "0");

    let t = ok(ws.run(&["train-experts", "--datasets", &datasets, "--out", "experts.json"]));
    assert_eq!(field(&t, "experts"), "experts.json");
    let t2 = ok(ws.run(&["train-experts", "--datasets", &datasets]));
    assert_eq!(field(&t2, "cache"), "hit");

    // trained expert ids reach the structure requests
    std::fs::write(ws.path("vqadiff.toml"), format!("experts_path = \"experts.json\"\n{CONFIG}")).unwrap();
    ok(ws.run(&["generate", "--image", "car.png", "--out", "bundle"]));
    let prov = std::fs::read_to_string(ws.path("bundle/provenance.json")).unwrap();
    assert!(prov.contains("experts_digest"));
    assert!(ok(ws.run(&["audit-cache"])).status.success());
}

#[test]
fn corrupt_view_is_named() {
    let ws = Workspace::new(CONFIG);
    write_index(&ws, &["car_a", "car_b", "car_c"]);
    for id in ["car_a", "car_b", "car_c"] {
        render(&ws, id, 16);
    }
    std::fs::write(ws.path("renders/car_b").join(view_file_name(7)), b"not a png").unwrap();
    let o = ws.run(&["build-dataset", "--index", "index.json"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("instance car_b view 7"), "{}", stderr(&o));
}

#[test]
fn evaluate_writes_report_csv_and_optional_deltas() {
    let ws = Workspace::new(CONFIG);
    ok(ws.run(&["generate", "--image", "car.png", "--out", "bundle"]));
    let o = ok(ws.run(&["evaluate", "--bundle", "bundle", "--reference", "car.png", "--out", "eval"]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("eval/report.json")).unwrap()).unwrap();
    for m in ["itc", "clip_similarity", "fid", "vqa_score"] {
        assert!(report[m].as_f64().unwrap().is_finite(), "{m}");
    }
    assert!(report["fixture_delta"].is_null());
    assert!(!stdout(&o).contains("delta "));

    let rows = |ws: &Workspace| std::fs::read_to_string(ws.path("reports.csv")).unwrap().lines().count() - 1;
    assert_eq!(rows(&ws), 1);
    // the same bundle again replaces its row
    let again = ok(ws.run(&["evaluate", "--bundle", "bundle", "--reference", "car.png"]));
    assert_eq!(field(&again, "backend calls"), "0");
    assert_eq!(rows(&ws), 1);

    ok(ws.run(&["generate", "--image", "car.png", "--seed", "3", "--out", "bundle3"]));
    ok(ws.run(&["evaluate", "--bundle", "bundle3", "--reference", "car.png"]));
    assert_eq!(rows(&ws), 2);

    std::fs::write(ws.path("tables.json"), vqadiff_core::eval::fixtures::BUNDLED_FIXTURES).unwrap();
    std::fs::write(ws.path("vqadiff.toml"), format!("fixtures_path = \"tables.json\"\n{CONFIG}")).unwrap();
    let with = ok(ws.run(&["evaluate", "--bundle", "bundle", "--reference", "car.png"]));
    let deltas: Vec<_> = stdout(&with).lines().filter(|l| l.starts_with("delta pascal3d_comparison/Ours")).map(str::to_string).collect();
    assert_eq!(deltas.len(), 4, "{}", stdout(&with));
    let fid: f64 = field(&with, "fid").parse().unwrap();
    let delta: f64 = deltas.iter().find(|l| l.contains(" fid: ")).unwrap().rsplit(' ').next().unwrap().parse().unwrap();
    assert!((delta - (fid - 117.49)).abs() < 1e-5);
}

#[test]
fn evaluate_lists_missing_bundle_pieces() {
    let ws = Workspace::new(CONFIG);
    ok(ws.run(&["generate", "--image", "car.png", "--out", "bundle"]));
    std::fs::remove_file(ws.path("bundle").join(view_file_name(3))).unwrap();
    std::fs::remove_file(ws.path("bundle/prompt.json")).unwrap();
    let o = ws.run(&["evaluate", "--bundle", "bundle", "--reference", "car.png"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("prompt.json is missing"), "{}", stderr(&o));

    ok(ws.run(&["generate", "--image", "car.png", "--out", "bundle2"]));
    std::fs::remove_file(ws.path("bundle2").join(view_file_name(3))).unwrap();
    let o = ws.run(&["evaluate", "--bundle", "bundle2", "--reference", "car.png"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("view_03.png is missing"), "{}", stderr(&o));
}

#[test]
fn audit_flags_orphans_and_tampering() {
    let ws = Workspace::new(CONFIG);
    let o = ok(ws.run(&["generate", "--image", "car.png"]));
    let bundle = PathBuf::from(field(&o, "bundle"));
    assert!(ok(ws.run(&["audit-cache"])).status.success());

    std::fs::write(ws.path("cache/objects/appearance/stray.png"), b"x").unwrap();
    let a = ws.run(&["audit-cache"]);
    assert_eq!(a.status.code(), Some(4));
    assert!(stdout(&a).contains("orphan file: objects/appearance/stray.png"), "{}", stdout(&a));
    std::fs::remove_file(ws.path("cache/objects/appearance/stray.png")).unwrap();

    // a tampered view is rebuilt on the next run
    let view = ws.dir.path().join(&bundle).join(view_file_name(0));
    std::fs::write(&view, b"garbage").unwrap();
    let a = ws.run(&["audit-cache"]);
    assert!(stdout(&a).contains("modified file"), "{}", stdout(&a));
    let again = ok(ws.run(&["generate", "--image", "car.png"]));
    assert_eq!(field(&again, "digest"), field(&o, "digest"));
    assert!(ok(ws.run(&["audit-cache"])).status.success());
}
