use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;
use textrect::cli::ParamsFile;
use textrect::imagebuf::{psnr, read_ppm, resize_bilinear, write_ppm, Image};
use textrect::rectifier::init_state;
use textrect::synth::{banner_glyphs, render_template};

fn textrect(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_textrect"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &TempDir, seed: u64, difficulty: &str) -> String {
    let out = p(dir, &format!("case{seed}"));
    let o = textrect(&[
        "synth",
        "--seed",
        &seed.to_string(),
        "--difficulty",
        difficulty,
        "--out-dir",
        &out,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn zero_params(dir: &TempDir) -> String {
    let path = p(dir, "zero.json");
    std::fs::write(&path, ParamsFile::from_state(&init_state(20).unwrap()).to_json()).unwrap();
    path
}

fn sha(path: &str) -> String {
    Sha256::digest(std::fs::read(path).unwrap())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[test]
fn synth_bundle_round_trips_at_ground_truth() {
    let dir = TempDir::new().unwrap();
    let case = synth(&dir, 3, "curved");
    for f in ["template.ppm", "distorted.ppm", "params.json", "meta.json"] {
        assert!(Path::new(&case).join(f).exists(), "{f}");
    }
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{case}/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["difficulty"], "curved");
    let out = p(&dir, "rect.ppm");
    let o = textrect(&[
        "rectify",
        "--input",
        &format!("{case}/distorted.ppm"),
        "--params",
        &format!("{case}/params.json"),
        "--out",
        &out,
        "--iters",
        "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let got = psnr(
        &read_ppm(&out).unwrap(),
        &read_ppm(format!("{case}/template.ppm")).unwrap(),
    )
    .unwrap();
    assert!(got >= 25.0, "{got}");
}

#[test]
fn identity_rectify_is_resize() {
    let dir = TempDir::new().unwrap();
    let case = synth(&dir, 1, "mild");
    let input = format!("{case}/distorted.ppm");
    let resized = resize_bilinear(&read_ppm(&input).unwrap(), 100, 32).unwrap();
    let zero = zero_params(&dir);
    for iters in ["0", "3"] {
        let out = p(&dir, "rect.ppm");
        let trace = p(&dir, "trace.jsonl");
        let o = textrect(&[
            "rectify", "--input", &input, "--params", &zero, "--out", &out, "--iters", iters, "--trace", &trace,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let got = read_ppm(&out).unwrap();
        // 8-bit output: every pixel is the float resize rounded to the nearest level
        let dev = got
            .data()
            .iter()
            .zip(resized.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev <= 0.5 / 255.0 + 1e-9, "{dev}");
        let lines: Vec<serde_json::Value> = std::fs::read_to_string(&trace)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), iters.parse::<usize>().unwrap() + 1);
        assert!(lines[0]["loss"].is_null());
        assert_eq!(lines[0]["delta_norm"], 0.0);
    }
}

#[test]
fn rectify_trace_records_loss_with_template() {
    let dir = TempDir::new().unwrap();
    let case = synth(&dir, 2, "severe");
    let trace = p(&dir, "trace.jsonl");
    let o = textrect(&[
        "rectify",
        "--input",
        &format!("{case}/distorted.ppm"),
        "--params",
        &format!("{case}/params.json"),
        "--out",
        &p(&dir, "r.ppm"),
        "--trace",
        &trace,
        "--template",
        &format!("{case}/template.ppm"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let losses: Vec<f64> = std::fs::read_to_string(&trace)
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["loss"]
                .as_f64()
                .unwrap()
        })
        .collect();
    assert_eq!(losses.len(), 6);
    assert!(losses[5] < losses[0]);
}

#[test]
fn warp_with_flat_params_keeps_a_white_template_white() {
    let dir = TempDir::new().unwrap();
    let tpl = p(&dir, "white.ppm");
    write_ppm(&tpl, &Image::filled(100, 32, 1, 1.0).unwrap()).unwrap();
    let out = p(&dir, "w.ppm");
    let o = textrect(&[
        "warp",
        "--template",
        &tpl,
        "--params",
        &zero_params(&dir),
        "--out",
        &out,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let w = read_ppm(&out).unwrap();
    assert_eq!((w.width(), w.height()), (200, 64));
    assert!(w.data().iter().all(|&v| v == 1.0));
}

#[test]
fn warp_output_is_stable() {
    let dir = TempDir::new().unwrap();
    let case = synth(&dir, 42, "mild");
    let out = p(&dir, "w.ppm");
    let args = [
        "warp",
        "--template",
        &format!("{case}/template.ppm"),
        "--params",
        &format!("{case}/params.json"),
        "--out",
        &out,
    ];
    assert!(textrect(&args).status.success());
    let first = sha(&out);
    assert!(textrect(&args).status.success());
    assert_eq!(sha(&out), first);
    assert_eq!(first, GOLDEN_WARP_42);
}

const GOLDEN_WARP_42: &str = "c81901780c7eb22110bba6a48edafbf2319e3226cd3fd91cf4d8db7bd2b946df";

#[test]
fn missing_input_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let o = textrect(&[
        "rectify",
        "--input",
        &p(&dir, "nope.ppm"),
        "--params",
        &zero_params(&dir),
        "--out",
        &p(&dir, "o.ppm"),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cannot read"));
    let bad = p(&dir, "bad.json");
    std::fs::write(&bad, "{\"space\":\"control\",\"L\":20,\"delta\":[]}").unwrap();
    let tpl = p(&dir, "t.ppm");
    write_ppm(&tpl, &render_template(&banner_glyphs(0, 100, 32), 100, 32).unwrap()).unwrap();
    let o = textrect(&["warp", "--template", &tpl, "--params", &bad, "--out", &p(&dir, "o.ppm")]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(textrect(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn fit_on_identity_input_stays_near_zero() {
    let dir = TempDir::new().unwrap();
    let case = synth(&dir, 5, "mild");
    let input = format!("{case}/distorted.ppm");
    let tpl = p(&dir, "ident.ppm");
    let o = textrect(&[
        "rectify",
        "--input",
        &input,
        "--params",
        &zero_params(&dir),
        "--out",
        &tpl,
        "--iters",
        "0",
    ]);
    assert!(o.status.success());
    let params = p(&dir, "fit.json");
    let trace = p(&dir, "fit.jsonl");
    let o = textrect(&[
        "fit",
        "--input",
        &input,
        "--template",
        &tpl,
        "--out-params",
        &params,
        "--iters",
        "2",
        "--trace",
        &trace,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("psnr"));
    let file = ParamsFile::from_json(&std::fs::read_to_string(&params).unwrap()).unwrap();
    let state = file.to_state().unwrap();
    // the template is quantized, so the optimum sits a hair away from zero
    assert!(
        state.delta().iter().all(|d| d.x.abs() < 2e-3 && d.y.abs() < 2e-3),
        "{:?}",
        state.delta()
    );
    assert!(!std::fs::read_to_string(&trace).unwrap().is_empty());
}

#[test]
fn finite_difference_fit_tracks_analytic() {
    let dir = TempDir::new().unwrap();
    let case = synth(&dir, 6, "mild");
    let loss = |grad: &str| {
        let o = textrect(&[
            "fit",
            "--input",
            &format!("{case}/distorted.ppm"),
            "--template",
            &format!("{case}/template.ppm"),
            "--out-params",
            &p(&dir, &format!("{grad}.json")),
            "--iters",
            "1",
            "--steps",
            "4",
            "--grad",
            grad,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let text = stdout(&o);
        let line = text.lines().find(|l| l.starts_with("loss ")).unwrap().to_string();
        line[5..].trim().parse::<f64>().unwrap()
    };
    let (a, f) = (loss("analytic"), loss("fd"));
    assert!((a - f).abs() <= 0.1 * a, "{a} {f}");
}

#[test]
fn gradcheck_exit_codes() {
    let o = textrect(&["gradcheck", "--seed", "0", "--cases", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("worst seed"));
    let o = textrect(&["gradcheck", "--cases", "1", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(1));
    let o = textrect(&["gradcheck", "--cases", "0"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("no cases"));
}

#[test]
fn gridviz_draws_and_reports_write_errors() {
    let dir = TempDir::new().unwrap();
    let img = p(&dir, "white.ppm");
    write_ppm(&img, &Image::filled(100, 32, 3, 1.0).unwrap()).unwrap();
    let out = p(&dir, "viz.ppm");
    let o = textrect(&[
        "gridviz",
        "--input",
        &img,
        "--params",
        &zero_params(&dir),
        "--out",
        &out,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let viz = read_ppm(&out).unwrap();
    // flat pose: the middle line is the center row, rows between stay clean
    assert!(viz.get(40, 16, 0) < 1.0);
    assert_eq!(viz.get(40, 8, 0), 1.0);
    let o = textrect(&[
        "gridviz",
        "--input",
        &img,
        "--params",
        &zero_params(&dir),
        "--out",
        &p(&dir, "missing/viz.ppm"),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_writes_csv() {
    let dir = TempDir::new().unwrap();
    let out = p(&dir, "b.csv");
    let o = Command::new(env!("CARGO_BIN_EXE_textrect"))
        .args(["bench", "--suite", "boundary", "--cases", "3", "--out", &out])
        .env("ESIR_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "suite,config,cases,mean_psnr,std_psnr,mean_mse,wall_ms");
    assert!(lines[1].starts_with("boundary,compose,3,"));
    assert!(lines[2].starts_with("boundary,chained,3,"));
    let bad = Command::new(env!("CARGO_BIN_EXE_textrect"))
        .args(["bench", "--suite", "boundary", "--cases", "1", "--out", &out])
        .env("ESIR_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn synth_is_deterministic() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let (x, y) = (synth(&a, 9, "perspective"), synth(&b, 9, "perspective"));
    for f in ["template.ppm", "distorted.ppm", "params.json"] {
        assert_eq!(sha(&format!("{x}/{f}")), sha(&format!("{y}/{f}")), "{f}");
    }
}
