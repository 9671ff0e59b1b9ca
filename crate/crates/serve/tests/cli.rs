use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use dlf_core::metrics::psnr;
use dlf_core::{checkpoint, BaseNetConfig, Image, OperatorKind, OperatorSpec};
use serde_json::{json, Value};
use tempfile::TempDir;

fn dlf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run dlf")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_png(path: &Path, h: usize, w: usize, phase: f32) -> Image {
    let img = Image::from_fn(h, w, |c, y, x| ((y * 5 + x * 2 + c * 3) as f32 * 0.13 + phase).sin() * 0.45 + 0.5).unwrap();
    img.save_png(path).unwrap();
    Image::load(path).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

struct Trained {
    dir: TempDir,
    model: PathBuf,
    eval_image: PathBuf,
    train_stdout: String,
}

fn train_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "operators": ["gaussian"],
        "base": BaseNetConfig::with_depth(8, 4),
        "patch_size": 32,
        "batch_size": 2,
        "steps": 4,
        "seed": 5,
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn trained() -> Trained {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus");
    let eval = dir.path().join("eval");
    std::fs::create_dir_all(&corpus).unwrap();
    std::fs::create_dir_all(&eval).unwrap();
    write_png(&corpus.join("a.png"), 40, 48, 0.0);
    write_png(&corpus.join("b.png"), 36, 36, 1.0);
    let eval_image = eval.join("e.png");
    write_png(&eval_image, 32, 32, 2.0);
    let config = train_config(dir.path(), json!({}));
    let model = dir.path().join("model.dlf");
    let out = dlf(&["train", "--config", s(&config), "--corpus", s(&corpus), "--out", s(&model), "--eval", s(&eval)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    Trained {
        train_stdout: stdout(&out),
        dir,
        model,
        eval_image,
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&dlf(&[])), 1);
    assert_eq!(code(&dlf(&["frobnicate"])), 1);
    assert_eq!(code(&dlf(&["oracle", "--operator", "gaussian"])), 1);
    assert_eq!(code(&dlf(&["oracle", "--operator", "gaussian", "--gamma", "x", "--input", "a", "--output", "b"])), 1);
    let help = dlf(&["--help"]);
    assert_eq!(code(&help), 0);
    assert!(stdout(&help).contains("analyze"));
}

#[test]
fn counts_on_default_config() {
    let dir = TempDir::new().unwrap();
    let out_path = dir.path().join("counts.json");
    let out = dlf(&["analyze", "counts", "--out", s(&out_path)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).split_whitespace().any(|t| t == "conv=696256"), "{}", stdout(&out));
    assert!(stdout(&out).split_whitespace().any(|t| t == "norm=2432"));
    let r = read_json(&out_path);
    assert_eq!(r["conv_count"], 696256);

    let out = dlf(&["analyze", "counts", "--gamma-dim", "2", "--out", s(&out_path)]);
    assert_eq!(code(&out), 0);
    let r = read_json(&out_path);
    assert_eq!(r["fc_count"], 2088768);
    assert_eq!(r["total_saved"], 2091200);
}

#[test]
fn oracle_runs_the_reference_operator() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("in.png");
    let img = write_png(&input, 20, 24, 0.5);
    let output = dir.path().join("out.png");
    let out = dlf(&["oracle", "--operator", "gaussian", "--gamma", "1.5", "--input", s(&input), "--output", s(&output)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let want = OperatorSpec::builtin(OperatorKind::Gaussian).apply(&img, &[1.5], 0).unwrap();
    assert_eq!(std::fs::read(&output).unwrap(), want.encode_png().unwrap());
}

#[test]
fn oracle_rejects_non_positive_lambda() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("in.png");
    write_png(&input, 16, 16, 0.0);
    let output = dir.path().join("out.png");
    let out = dlf(&["oracle", "--operator", "l0", "--gamma", "0.0", "--input", s(&input), "--output", s(&output)]);
    assert_eq!(code(&out), 1);
    assert!(!stderr(&out).is_empty());
    assert!(!output.exists());
}

#[test]
fn unknown_operator_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("in.png");
    write_png(&input, 16, 16, 0.0);
    let out = dlf(&["oracle", "--operator", "sharpen", "--gamma", "1", "--input", s(&input), "--output", s(&dir.path().join("x.png"))]);
    assert_eq!(code(&out), 1);
}

#[test]
fn io_failures_exit_two() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.png");
    let out = dlf(&["oracle", "--operator", "gaussian", "--gamma", "1", "--input", s(&missing), "--output", s(&dir.path().join("x.png"))]);
    assert_eq!(code(&out), 2);

    let garbage = dir.path().join("garbage.png");
    std::fs::write(&garbage, b"not an image").unwrap();
    let out = dlf(&["oracle", "--operator", "gaussian", "--gamma", "1", "--input", s(&garbage), "--output", s(&dir.path().join("x.png"))]);
    assert_eq!(code(&out), 2);

    let bad_model = dir.path().join("bad.dlf");
    std::fs::write(&bad_model, b"DLF0junk").unwrap();
    let input = dir.path().join("in.png");
    write_png(&input, 32, 32, 0.0);
    for model in [&missing, &bad_model] {
        let out = dlf(&[
            "apply", "--model", s(model), "--operator", "gaussian", "--gamma", "1", "--input", s(&input), "--output", s(&dir.path().join("x.png")),
        ]);
        assert_eq!(code(&out), 2, "{}", stderr(&out));
    }
}

#[test]
fn divergent_training_exits_three() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus");
    std::fs::create_dir_all(&corpus).unwrap();
    write_png(&corpus.join("a.png"), 32, 32, 0.0);
    let config = train_config(
        dir.path(),
        json!({
            "base": BaseNetConfig::plain(3, 4, 3),
            "optimizer": { "learning_rate": 1e30 },
            "steps": 20,
        }),
    );
    let out = dlf(&["train", "--config", s(&config), "--corpus", s(&corpus), "--out", s(&dir.path().join("m.dlf"))]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"));
}

#[test]
fn bad_configs_exit_one() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus");
    std::fs::create_dir_all(&corpus).unwrap();
    write_png(&corpus.join("a.png"), 32, 32, 0.0);
    let model = dir.path().join("m.dlf");
    let config = dir.path().join("bad.json");
    std::fs::write(&config, "{ nope").unwrap();
    let out = dlf(&["train", "--config", s(&config), "--corpus", s(&corpus), "--out", s(&model)]);
    assert_eq!(code(&out), 1);
    let config = train_config(dir.path(), json!({ "patch_size": 31 }));
    let out = dlf(&["train", "--config", s(&config), "--corpus", s(&corpus), "--out", s(&model)]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    let config = train_config(dir.path(), json!({ "operators": ["sharpen"] }));
    let out = dlf(&["train", "--config", s(&config), "--corpus", s(&corpus), "--out", s(&model)]);
    assert_eq!(code(&out), 1);
    assert!(!model.exists());
}

#[test]
fn apply_reproduces_eval_psnr() {
    let t = trained();
    let model = checkpoint::load(&t.model).unwrap();
    let report = model.eval.clone().expect("final eval stored");
    let entry = report.entry("gaussian", &[1.25]).expect("mid-range eval point");
    let line: Value = serde_json::from_str(t.train_stdout.lines().next().unwrap()).unwrap();
    assert_eq!(line["psnr"], entry.psnr);

    let output = t.dir.path().join("pred.png");
    let out = dlf(&[
        "apply", "--model", s(&t.model), "--operator", "gaussian", "--gamma", "1.25",
        "--input", s(&t.eval_image), "--output", s(&output),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let clean = Image::load(&t.eval_image).unwrap();
    let target = OperatorSpec::builtin(OperatorKind::Gaussian).apply(&clean, &[1.25], 0).unwrap();
    let got = psnr(&Image::load(&output).unwrap(), &target).unwrap();
    assert!((got - entry.psnr).abs() <= 1e-4, "{got} vs {}", entry.psnr);

    let cheap = t.dir.path().join("cheap.png");
    let out = dlf(&[
        "apply", "--model", s(&t.model), "--operator", "gaussian", "--gamma", "1.25",
        "--input", s(&t.eval_image), "--output", s(&cheap), "--cheap",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read(&cheap).unwrap(), std::fs::read(&output).unwrap());

    let out = dlf(&[
        "apply", "--model", s(&t.model), "--operator", "gaussian", "--gamma", "2.5",
        "--input", s(&t.eval_image), "--output", s(&cheap),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn analysis_reports_on_a_trained_model() {
    let t = trained();
    let p = |name: &str| t.dir.path().join(name);

    let out = dlf(&[
        "analyze", "erf", "--model", s(&t.model), "--operator", "gaussian", "--gamma", "1.0",
        "--input", s(&t.eval_image), "--point", "16,16", "--out", s(&p("erf.json")), "--overlay", s(&p("erf.png")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let erf = read_json(&p("erf.json"));
    assert_eq!(erf["point"], json!([16, 16]));
    assert_eq!(erf["mask"].as_array().unwrap().len(), 32 * 32);
    assert_eq!(Image::load(&p("erf.png")).unwrap().height(), 32);
    let out = dlf(&[
        "analyze", "erf", "--model", s(&t.model), "--operator", "gaussian", "--gamma", "1.0",
        "--input", s(&t.eval_image), "--point", "16", "--out", s(&p("erf.json")),
    ]);
    assert_eq!(code(&out), 1);

    let out = dlf(&[
        "analyze", "weights", "--model", s(&t.model), "--other", s(&t.model), "--operator", "gaussian",
        "--gamma", "1.0", "--out", s(&p("w.json")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let w = read_json(&p("w.json"));
    let layers = w["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 8);
    assert!(layers.iter().all(|l| l["correlation"] == 1.0 && l["var_a"] == l["var_b"]));

    let out = dlf(&["analyze", "equiv", "--model", s(&t.model), "--trials", "10", "--out", s(&p("eq.json"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_json(&p("eq.json"))["passed"], true);

    let out = dlf(&[
        "analyze", "interp", "--model", s(&t.model), "--operator", "gaussian", "--train", "0.5,2.0",
        "--test", "1.0", "--eval", s(t.eval_image.parent().unwrap()), "--out", s(&p("interp.json")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_json(&p("interp.json"))["gaps"].as_array().unwrap().len(), 1);
    let out = dlf(&[
        "analyze", "interp", "--model", s(&t.model), "--operator", "gaussian", "--train", "0.5,1.0",
        "--test", "1.5", "--out", s(&p("interp.json")),
    ]);
    assert_eq!(code(&out), 1);
}

fn http(port: u16, method: &str, path: &str) -> Option<(u16, String)> {
    let mut stream = TcpStream::connect(("127.0.0.1", port)).ok()?;
    stream.set_read_timeout(Some(Duration::from_secs(10))).ok()?;
    write!(stream, "{method} {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut buf = String::new();
    stream.read_to_string(&mut buf).ok()?;
    let status = buf.split_whitespace().nth(1)?.parse().ok()?;
    let body = buf.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
    Some((status, body))
}

#[test]
fn serve_exposes_the_api() {
    let t = trained();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_dlf"))
        .args(["serve", "--model", s(&t.model), "--port", &port.to_string()])
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(30);
    let mut operators = None;
    while Instant::now() < deadline {
        if let Some((200, body)) = http(port, "GET", "/api/operators") {
            operators = Some(body);
            break;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    let health = http(port, "GET", "/healthz");
    let missing = http(port, "DELETE", "/api/session/none");
    child.kill().unwrap();
    child.wait().unwrap();
    let operators = operators.expect("service came up");
    assert!(operators.contains("\"gaussian\""), "{operators}");
    assert_eq!(health.map(|(s, b)| (s, b.trim().to_string())), Some((200, "ok".into())));
    assert_eq!(missing.map(|(s, _)| s), Some(404));
}

#[test]
fn serve_without_a_checkpoint_exits_two() {
    let out = dlf(&["serve", "--model", "/nonexistent/model.dlf", "--port", "0"]);
    assert_eq!(code(&out), 2);
}
