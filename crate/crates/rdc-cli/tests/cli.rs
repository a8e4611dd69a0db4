//! End-to-end tests of the `rdc` binary: subcommand plumbing, file outputs,
//! and the documented exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rdc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rdc"))
        .args(args)
        .output()
        .expect("failed to spawn rdc")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "rdc failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_mini_config(path: &Path) {
    fs::write(
        path,
        "# compact schedule for tests\narch=tiny\nstage0_steps=4\nstage1_steps=4\nstage2_steps=4\ncrop=32\ncorpus_n=3\ncorpus_size=64\n",
    )
    .unwrap();
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = rdc(&["gen-data", "--out", d.to_str().unwrap(), "--count", "2", "--size", "32", "--seed", "9"]);
        assert_ok(&out);
    }
    for name in ["img_0000.ppm", "img_0001.ppm", "lbl_0000.pgm"] {
        let x = fs::read(a.join(name)).unwrap();
        let y = fs::read(b.join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between same-seed runs");
    }
}

#[test]
fn full_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    assert_ok(&rdc(&["gen-data", "--out", data.to_str().unwrap(), "--count", "3", "--size", "64", "--seed", "4"]));

    let cfg = d.join("cfg");
    write_mini_config(&cfg);
    let model = d.join("m.bin");
    assert_ok(&rdc(&[
        "train", "--lambda-d", "512", "--out", model.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(), "--log", d.join("log.csv").to_str().unwrap(),
    ]));
    let log = fs::read_to_string(d.join("log.csv")).unwrap();
    assert!(log.starts_with("step,stage,rate_bpp"));
    assert_eq!(log.lines().count(), 13, "header + 12 steps");

    let stream = d.join("x.rdc");
    let input = data.join("img_0000.ppm");
    assert_ok(&rdc(&[
        "encode", "--model", model.to_str().unwrap(), "--level", "0.5",
        "--out", stream.to_str().unwrap(), input.to_str().unwrap(),
    ]));

    let out_img = d.join("x.ppm");
    let mask_img = d.join("mask.pgm");
    let out = rdc(&[
        "decode", "--model", model.to_str().unwrap(), "--out", out_img.to_str().unwrap(),
        "--mask-out", mask_img.to_str().unwrap(), stream.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("serial_steps="), "stats line missing: {stdout}");
    assert!(fs::read(&out_img).unwrap().starts_with(b"P6"));
    assert!(fs::read(&mask_img).unwrap().starts_with(b"P5"));

    // Decoding twice produces identical bytes (determinism).
    let out2 = d.join("x2.ppm");
    assert_ok(&rdc(&[
        "decode", "--model", model.to_str().unwrap(), "--out", out2.to_str().unwrap(),
        stream.to_str().unwrap(),
    ]));
    assert_eq!(fs::read(&out_img).unwrap(), fs::read(&out2).unwrap());

    // Eval + bench + viz produce their artifacts.
    assert_ok(&rdc(&[
        "eval", "--model", model.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--levels", "0,1", "--out", d.join("rd.csv").to_str().unwrap(),
        "--svg", d.join("rd.svg").to_str().unwrap(), "--max-images", "2",
    ]));
    assert!(fs::read_to_string(d.join("rd.csv")).unwrap().starts_with("level,lambda_d,bpp,psnr"));
    assert!(fs::read_to_string(d.join("rd.svg")).unwrap().starts_with("<svg"));

    assert_ok(&rdc(&[
        "bench", "--model", model.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--levels", "0,1", "--repeats", "1", "--out", d.join("bench.csv").to_str().unwrap(),
        "--max-images", "2",
    ]));
    assert!(fs::read_to_string(d.join("bench.csv")).unwrap().starts_with("level,achieved_ce"));

    assert_ok(&rdc(&[
        "viz", "--model", model.to_str().unwrap(), "--image", input.to_str().unwrap(),
        "--levels", "0,1", "--out", d.join("viz").to_str().unwrap(),
    ]));
    for f in ["mask_l000.pgm", "mask_l100.pgm", "entropy_l000.pgm", "entropy_l100.pgm"] {
        assert!(d.join("viz").join(f).exists(), "missing viz output {f}");
    }
}

#[test]
fn bd_rate_command_scales() {
    let dir = tempfile::tempdir().unwrap();
    let anchor = dir.path().join("a.csv");
    let test = dir.path().join("t.csv");
    fs::write(&anchor, "bpp,psnr\n0.25,30\n0.5,33\n1.0,36\n2.0,39\n").unwrap();
    // Same quality at 10% fewer bits everywhere -> about -10%.
    fs::write(&test, "bpp,psnr\n0.225,30\n0.45,33\n0.9,36\n1.8,39\n").unwrap();
    let out = rdc(&["bd-rate", "--anchor", anchor.to_str().unwrap(), "--test", test.to_str().unwrap()]);
    assert_ok(&out);
    let v: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!((v + 10.0).abs() < 0.05, "bd-rate {v}");
}

#[test]
fn exit_codes_follow_contract() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    // Usage error: bad level.
    let out = rdc(&["encode", "--model", "nope.bin", "--level", "3", "--out", "x", "y"]);
    assert_eq!(out.status.code(), Some(2), "bad level should be usage error");

    // Usage error from clap itself: unknown subcommand.
    let out = rdc(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    // Data error: missing input file.
    let out = rdc(&["decode", "--model", d.join("m.bin").to_str().unwrap(), "--out", "x.ppm", "missing.rdc"]);
    assert_eq!(out.status.code(), Some(3));

    // Usage error: RDC_THREADS=0.
    let out = Command::new(env!("CARGO_BIN_EXE_rdc"))
        .env("RDC_THREADS", "0")
        .args(["bd-rate", "--anchor", "a", "--test", "b"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Model/stream mismatch: decode with a model of a different lambda_d.
    let data = d.join("data");
    assert_ok(&rdc(&["gen-data", "--out", data.to_str().unwrap(), "--count", "1", "--size", "64", "--seed", "2"]));
    let cfg = d.join("cfg");
    write_mini_config(&cfg);
    let (m1, m2) = (d.join("m1.bin"), d.join("m2.bin"));
    assert_ok(&rdc(&["train", "--lambda-d", "512", "--out", m1.to_str().unwrap(), "--config", cfg.to_str().unwrap()]));
    assert_ok(&rdc(&["train", "--lambda-d", "1024", "--out", m2.to_str().unwrap(), "--config", cfg.to_str().unwrap()]));
    let stream = d.join("s.rdc");
    let input = data.join("img_0000.ppm");
    assert_ok(&rdc(&["encode", "--model", m1.to_str().unwrap(), "--level", "0", "--out", stream.to_str().unwrap(), input.to_str().unwrap()]));
    let out = rdc(&["decode", "--model", m2.to_str().unwrap(), "--out", d.join("o.ppm").to_str().unwrap(), stream.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "lambda mismatch should exit 4");
}

#[test]
fn checkpoint_resume_continues_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("cfg");
    write_mini_config(&cfg);
    let ckpt = d.join("ck.bin");
    // Full run writes a checkpoint; resuming from it runs zero extra steps
    // and must produce the identical model.
    let m1 = d.join("m1.bin");
    assert_ok(&rdc(&[
        "train", "--lambda-d", "512", "--out", m1.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(),
    ]));
    let m2 = d.join("m2.bin");
    assert_ok(&rdc(&[
        "train", "--lambda-d", "512", "--out", m2.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(), "--resume", ckpt.to_str().unwrap(),
    ]));
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
}
