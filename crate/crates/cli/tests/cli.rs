use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn radar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radar")).args(args).output().expect("spawn radar")
}

fn ok(args: &[&str]) -> Output {
    let out = radar(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 4x4 constant-source checkpoint shared by the sampling tests.
fn model() -> &'static (tempfile::TempDir, PathBuf) {
    static M: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    M.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("tiny.cfg");
        std::fs::write(
            &cfg,
            "grid = 4 4\nvocab_size = 8\nnum_classes = 2\ndim = 16\nmax_steps = 4\nsource = constant\nepochs = 3\ngrids_per_epoch = 256\n",
        )
        .unwrap();
        let ckpt = dir.path().join("m.radr");
        let log = dir.path().join("train.tsv");
        ok(&["train", "--config", s(&cfg), "--seed", "1", "--out", s(&ckpt), "--log", s(&log)]);
        let lines = std::fs::read_to_string(&log).unwrap();
        assert_eq!(lines.lines().count(), 4);
        (dir, ckpt)
    })
}

fn read_grid(p: &Path) -> Vec<Vec<u32>> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| l.split_whitespace().map(|t| t.parse().unwrap()).collect())
        .collect()
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let out = radar(&["gen", "--out", "x.txt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--ckpt"));
    assert_eq!(radar(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(radar(&["schedule", "--grid", "4", "4", "--bogus"]).status.code(), Some(1));
    assert_eq!(
        radar(&["schedule", "--grid", "4", "4", "--preset", "center", "--anchor", "center"]).status.code(),
        Some(1)
    );
    assert_eq!(radar(&["render", "--grid", "g", "--mode", "vq-decode", "--out", "o.ppm"]).status.code(), Some(1));
    assert_eq!(radar(&["--help"]).status.code(), Some(0));
    let out = Command::new(env!("CARGO_BIN_EXE_radar"))
        .args(["schedule", "--grid", "4", "4"])
        .env("RADAR_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.radr");
    let out = radar(&["gen", "--ckpt", s(&missing), "--out", s(&dir.path().join("g.txt"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(radar(&["schedule", "--grid", "4", "4", "--preset", "nope"]).status.code(), Some(1));
}

#[test]
fn schedule_prints_the_ring_file() {
    let out = ok(&["schedule", "--grid", "16", "16", "--anchor", "center", "--thickness", "1"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let steps: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(steps.len(), 8);
    assert_eq!(steps[0], "1: 7,7,9,9");
    assert_eq!(steps[7], "8: 0,0,16,16");
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.txt");
    ok(&["schedule", "--grid", "16", "16", "--preset", "center13", "--out", s(&p)]);
    assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 15);
    let out = ok(&["mask", "--schedule", s(&p), "--grid", "16", "16"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("check Ok"));
}

#[test]
fn mask_dump_is_square_and_nested() {
    let out = ok(&["mask", "--schedule", "center", "--grid", "3", "3", "--dump"]);
    let rows: Vec<String> = String::from_utf8(out.stdout).unwrap().lines().map(String::from).collect();
    // prefix + 1 + 9 positions for a 3x3 center schedule
    assert_eq!(rows.len(), 11);
    assert!(rows.iter().all(|r| r.len() == 11));
    assert_eq!(rows[0], "10000000000");
    let causal = ok(&["mask", "--schedule", "center", "--grid", "3", "3", "--dump", "--kind", "block-causal"]);
    let causal: Vec<String> = String::from_utf8(causal.stdout).unwrap().lines().map(String::from).collect();
    let ones = |v: &[String]| v.iter().map(|r| r.matches('1').count()).sum::<usize>();
    assert!(ones(&rows) < ones(&causal));
}

#[test]
fn gen_is_deterministic_and_logs_revisions() {
    let (dir, ckpt) = model();
    let (a, b) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    let revs = dir.path().join("revs.tsv");
    let img = dir.path().join("a.ppm");
    let base = ["gen", "--ckpt", s(ckpt), "--class", "1", "--seed", "5"];
    ok(&[&base[..], &["--out", s(&a), "--log-revisions", s(&revs), "--render", s(&img)]].concat());
    ok(&[&base[..], &["--out", s(&b)]].concat());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let g = read_grid(&a);
    assert_eq!((g.len(), g[0].len()), (4, 4));
    assert!(std::fs::read_to_string(&revs).unwrap().lines().all(|l| l.split('\t').count() == 5));
    assert!(std::fs::read(&img).unwrap().starts_with(b"P6"));

    let big = dir.path().join("big.txt");
    ok(&["gen", "--ckpt", s(ckpt), "--size", "6", "6", "--correction", "off", "--out", s(&big)]);
    assert_eq!(read_grid(&big).len(), 6);
    let out = radar(&["gen", "--ckpt", s(ckpt), "--correction", "sometimes", "--out", s(&big)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn outpaint_and_edit_conserve_known_cells() {
    let (dir, ckpt) = model();
    let base = dir.path().join("base.txt");
    std::fs::write(&base, "1 2 3 4\n5 6 7 0\n1 2 3 4\n5 6 7 0\n").unwrap();
    let out = dir.path().join("edit.txt");
    ok(&["edit", "--ckpt", s(ckpt), "--base", s(&base), "--region", "1,1,3,3", "--class", "1", "--out", s(&out)]);
    let (b, e) = (read_grid(&base), read_grid(&out));
    for r in 0..4 {
        for c in 0..4 {
            if !(1..3).contains(&r) || !(1..3).contains(&c) {
                assert_eq!(b[r][c], e[r][c]);
            }
        }
    }
    let out = dir.path().join("out.txt");
    ok(&[
        "outpaint",
        "--ckpt",
        s(ckpt),
        "--base",
        s(&base),
        "--keep",
        "0,0,4,2",
        "--attention",
        "nested",
        "--out",
        s(&out),
    ]);
    let o = read_grid(&out);
    for row in 0..4 {
        assert_eq!(o[row][..2], b[row][..2]);
    }
    let bad = radar(&["edit", "--ckpt", s(ckpt), "--base", s(&base), "--region", "0,0,9,9", "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn bench_suites_write_tables() {
    let (dir, ckpt) = model();
    let out = dir.path().join("bench");
    ok(&["bench", "--suite", "speed", "--ckpt", s(ckpt), "--runs", "2", "--warmup", "0", "--out", s(&out)]);
    let tsv = std::fs::read_to_string(out.join("speed.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 4);
    assert!(tsv.lines().last().unwrap().starts_with("raster\t"));
    assert!(std::fs::read_to_string(out.join("speed.manifest")).unwrap().contains("runs=2"));
    ok(&["bench", "--suite", "correction", "--ckpt", s(ckpt), "--trials", "20", "--out", s(&out)]);
    let manifest = std::fs::read_to_string(out.join("correction.manifest")).unwrap();
    assert!(manifest.contains("recovery.greedy=") && manifest.contains("recovery.off=0.0000"));
    ok(&["bench", "--suite", "ablate", "--epochs", "1", "--seeds", "1", "--eval-grids", "8", "--out", s(&out)]);
    assert_eq!(std::fs::read_to_string(out.join("ablate.tsv")).unwrap().lines().count(), 1 + 4 + 3);
}

#[test]
fn tokenizer_train_and_render() {
    let dir = tempfile::tempdir().unwrap();
    let tok = dir.path().join("tok.radr");
    ok(&["tokenizer-train", "--count", "16", "--size", "16", "--vocab", "16", "--epochs", "2", "--out", s(&tok)]);
    let grid = dir.path().join("g.txt");
    std::fs::write(&grid, "0 1 2 3\n4 5 6 7\n8 9 10 11\n12 13 14 15\n").unwrap();
    let (a, b) = (dir.path().join("a.ppm"), dir.path().join("b.ppm"));
    ok(&["render", "--grid", s(&grid), "--mode", "vq-decode", "--tokenizer", s(&tok), "--out", s(&a)]);
    ok(&["render", "--grid", s(&grid), "--mode", "vq-decode", "--tokenizer", s(&tok), "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let pal = dir.path().join("p.ppm");
    ok(&["render", "--grid", s(&grid), "--scale", "2", "--out", s(&pal)]);
    let bytes = std::fs::read(&pal).unwrap();
    let header: Vec<&str> = std::str::from_utf8(&bytes[..11]).unwrap().split_whitespace().collect();
    assert_eq!(header, ["P6", "8", "8", "255"]);
    assert_eq!(bytes.len(), 11 + 8 * 8 * 3);

    let model = dir.path().join("vq.radr");
    ok(&["train", "--tokenizer", s(&tok), "--epochs", "1", "--grids-per-epoch", "16", "--out", s(&model)]);
    let g = dir.path().join("vq.txt");
    ok(&["gen", "--ckpt", s(&model), "--out", s(&g)]);
    ok(&["render", "--grid", s(&g), "--mode", "vq-decode", "--tokenizer", s(&model), "--out", s(&a)]);
}
