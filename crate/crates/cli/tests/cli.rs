use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mftryon(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mftryon"))
        .args(args)
        .current_dir(dir)
        .env_remove("MFTRYON_OUT")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstdout: {}\nstderr: {}", o.status.code(), stdout(&o), stderr(&o));
    o
}

/// The JSON error line printed last on stderr.
fn error_json(o: &Output) -> serde_json::Value {
    let err = stderr(o);
    let line = err.lines().last().expect("stderr has a line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const TINY_TRAIN: &str = "[train]\nbatch = 2\nlr = 0.001\ncheckpoint_interval = 0\n\n[train.model]\nd_model = 16\nheads = 2\nlayers = 1\nmlp_ratio = 2\ntime_dim = 16\n";

#[test]
fn synth_gen_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        ok(mftryon(d, &["synth", "gen", "--n", "10", "--seed", "7", "--out", "data"]));
    }
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.len(), 10 * 2 + 2);
    assert_eq!(fa, fb);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let o = mftryon(d.path(), &["synth", "gen", "--colour", "red"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(error_json(&o)["category"], "usage");
}

#[test]
fn help_succeeds() {
    let d = tempfile::tempdir().unwrap();
    let o = ok(mftryon(d.path(), &["--help"]));
    for sub in ["synth", "dataprep", "train", "infer", "eval", "attn", "gradcheck"] {
        assert!(stdout(&o).contains(sub), "{sub} missing from help");
    }
}

#[test]
fn missing_required_path_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let o = mftryon(d.path(), &["train", "--steps", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_json(&o)["error"].as_str().unwrap().contains("--triplets"));
}

#[test]
fn error_categories_map_to_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let o = mftryon(d.path(), &["dataprep", "--manifest", "nowhere/manifest.jsonl"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert_eq!(error_json(&o)["category"], "io");

    ok(mftryon(d.path(), &["synth", "gen", "--n", "2", "--out", "data"]));
    let o = mftryon(d.path(), &["dataprep", "--manifest", "data/manifest.jsonl", "--filter", "sometimes"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_json(&o)["category"], "validation");

    let o = mftryon(d.path(), &["gradcheck", "--samples", "3", "--tolerance", "0"]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    assert_eq!(error_json(&o)["category"], "numerical");
}

#[test]
fn out_root_comes_from_the_environment() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_mftryon"))
        .args(["synth", "gen", "--n", "2"])
        .current_dir(d.path())
        .env("MFTRYON_OUT", d.path().join("elsewhere"))
        .output()
        .unwrap();
    ok(o);
    assert!(d.path().join("elsewhere/synth/manifest.jsonl").is_file());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(mftryon(p, &["synth", "gen", "--n", "4", "--out", "data"]));
    ok(mftryon(p, &["dataprep", "--manifest", "data/manifest.jsonl", "--out", "prep"]));
    fs::write(p.join("cfg.toml"), TINY_TRAIN.replace("[train]\n", "[train]\nsteps = 3\n")).unwrap();

    let o = ok(mftryon(p, &["--config-file", "cfg.toml", "train", "--triplets", "prep/triplets.jsonl", "--ckpt-dir", "a"]));
    assert!(stderr(&o).contains("\"steps\":3"), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(p.join("a/metrics.jsonl")).unwrap().lines().count(), 3);

    ok(mftryon(p, &["--config-file", "cfg.toml", "train", "--triplets", "prep/triplets.jsonl", "--ckpt-dir", "b", "--steps", "2"]));
    assert_eq!(fs::read_to_string(p.join("b/metrics.jsonl")).unwrap().lines().count(), 2);

    fs::write(p.join("bad.toml"), "[train]\nstepz = 3\n").unwrap();
    let o = mftryon(p, &["--config-file", "bad.toml", "train", "--triplets", "prep/triplets.jsonl"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("stepz"));
}

#[test]
fn full_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fs::write(p.join("cfg.toml"), TINY_TRAIN).unwrap();
    ok(mftryon(p, &["synth", "gen", "--n", "4", "--seed", "3", "--out", "data"]));
    let o = ok(mftryon(p, &["dataprep", "--manifest", "data/manifest.jsonl", "--filter", "cycle:0.9", "--out", "prep"]));
    assert!(stdout(&o).contains("kept 8 of 8"), "{}", stdout(&o));

    let header: serde_json::Value =
        serde_json::from_str(fs::read_to_string(p.join("prep/triplets.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(header["provenance"]["command"], "dataprep");

    ok(mftryon(
        p,
        &["--config-file", "cfg.toml", "train", "--triplets", "prep/triplets.jsonl", "--steps", "2", "--fa-weight", "0", "--ckpt-dir", "ck"],
    ));
    assert!(p.join("ck/final.ckpt").is_file());
    let prov: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("ck/provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["config"]["lambda_fa"], 0.0);

    let images: Vec<_> = files(&p.join("data/images")).into_iter().map(|(f, _)| p.join("data/images").join(f)).collect();
    let (r, t) = (images[0].to_str().unwrap(), images[1].to_str().unwrap());
    let o = ok(mftryon(p, &["infer", "--ckpt", "ck/final.ckpt", "--ref", r, "--target", t, "--out", "pred/a.png", "--save-canvas"]));
    assert!(stderr(&o).contains("\"steps\":30"), "default steps: {}", stderr(&o));
    assert!(p.join("pred/a.png").is_file() && p.join("pred/a_canvas.png").is_file());
    assert!(p.join("pred/a.provenance.json").is_file());
    let first = fs::read(p.join("pred/a.png")).unwrap();
    ok(mftryon(p, &["infer", "--ckpt", "ck/final.ckpt", "--ref", r, "--target", t, "--out", "pred/a.png", "--steps", "30"]));
    assert_eq!(first, fs::read(p.join("pred/a.png")).unwrap());

    fs::create_dir_all(p.join("gt")).unwrap();
    fs::copy(&images[1], p.join("gt/a.png")).unwrap();
    fs::remove_file(p.join("pred/a_canvas.png")).unwrap();
    fs::remove_file(p.join("pred/a.provenance.json")).unwrap();
    let o = ok(mftryon(p, &["eval", "--pred", "pred", "--gt", "gt", "--metrics", "ssim", "--paired", "--out", "ev"]));
    assert!(stdout(&o).to_lowercase().contains("ssim"), "{}", stdout(&o));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("ev/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pairs"], 1);
    assert_eq!(summary["provenance"]["command"], "eval");
    assert!(p.join("ev/report.jsonl").is_file() && p.join("ev/summary.txt").is_file());

    ok(mftryon(p, &["attn", "dump", "--ckpt", "ck/final.ckpt", "--ref", r, "--target", t, "--layer", "0", "--out", "maps"]));
    for h in 0..2 {
        assert!(p.join(format!("maps/layer0_head{h}_ref.png")).is_file());
        assert!(p.join(format!("maps/layer0_head{h}_target.png")).is_file());
    }
    let o = mftryon(p, &["attn", "dump", "--ckpt", "ck/final.ckpt", "--ref", r, "--target", t, "--layer", "4", "--out", "maps"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn gradcheck_reports_json() {
    let d = tempfile::tempdir().unwrap();
    let o = ok(mftryon(d.path(), &["gradcheck", "--config", "tiny", "--samples", "10", "--out", "g.json"]));
    let line: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(line["pass"], true);
    assert!(line["max_rel_error"].as_f64().unwrap() <= 1e-3);
    let full: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("g.json")).unwrap()).unwrap();
    assert_eq!(full["entries"].as_array().unwrap().len(), 10);
}
