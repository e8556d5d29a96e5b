mod common;

use std::fs;
use std::path::Path;

use stmformer::checkpoint;
use stmformer::cli::{run_cli, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};

use common::{tiny_gen, tiny_run_text};

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn cli(args: &[&str]) -> Run {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_cli(std::iter::once("stmformer").chain(args.iter().copied()), &mut out, &mut err);
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_all_row(csv_path: &Path, model: &str) -> f64 {
    let mut r = csv::Reader::from_path(csv_path).unwrap();
    let row = r
        .records()
        .map(Result::unwrap)
        .find(|row| &row[0] == model && &row[2] == "all")
        .unwrap();
    row[3].parse().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    let r = cli(&["generate", "--bogus"]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.err.contains("Usage"), "{}", r.err);
    assert_eq!(cli(&[]).code, EXIT_USAGE);
    assert_eq!(cli(&["frobnicate"]).code, EXIT_USAGE);
    assert_eq!(cli(&["--help"]).code, EXIT_OK);
}

#[test]
fn malformed_config_exits_one_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.txt");
    fs::write(&cfg, "samples=10\nfoo\n").unwrap();
    let r = cli(&["generate", "--config", p(&cfg), "--out", p(&dir.path().join("d"))]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.err.contains("gen.txt:2:"), "{}", r.err);
}

#[test]
fn missing_files_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let r = cli(&["generate", "--config", p(&dir.path().join("none.txt")), "--out", p(dir.path())]);
    assert_eq!(r.code, EXIT_FAILURE);
    assert!(r.err.starts_with("error:"));
    let r = cli(&["baselines", "--data", p(&dir.path().join("none")), "--report", p(&dir.path().join("r.csv"))]);
    assert_eq!(r.code, EXIT_FAILURE);
}

#[test]
fn gradcheck_passes() {
    let r = cli(&["gradcheck"]);
    assert_eq!(r.code, EXIT_OK, "{}{}", r.out, r.err);
    assert!(!r.out.contains("FAIL"));
    assert!(r.out.lines().count() >= 5);
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let gen = root.join("gen.txt");
    fs::write(&gen, tiny_gen(7).to_kv_lines().join("\n")).unwrap();
    let data = root.join("data");
    let r = cli(&["generate", "--config", p(&gen), "--out", p(&data)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);

    let run = root.join("run.txt");
    fs::write(&run, tiny_run_text(4)).unwrap();
    let ckpt = root.join("ckpt");
    let losses = root.join("losses.csv");
    let r = cli(&["train", "--data", p(&data), "--config", p(&run), "--ckpt", p(&ckpt), "--losses", p(&losses)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(r.out.contains("update 1: loss"));
    assert_eq!(fs::read_to_string(&losses).unwrap().lines().count(), 5);

    let report = root.join("val.csv");
    let r = cli(&["evaluate", "--data", p(&data), "--ckpt", p(&ckpt), "--report", p(&report), "--split", "val"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let train_time: f64 = checkpoint::load(&ckpt).unwrap().meta("val.mae").unwrap().parse().unwrap();
    assert!((read_all_row(&report, "full") - train_time).abs() <= 1e-6);

    let base = root.join("base.csv");
    let r = cli(&["baselines", "--data", p(&data), "--report", p(&base)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(read_all_row(&base, "persistence") > 0.0);
    assert!(read_all_row(&base, "linear") >= 0.0);

    // A checkpoint cannot be evaluated against data of other extents.
    let other = root.join("other");
    let other_gen = root.join("other.txt");
    fs::write(&other_gen, stmformer::GenConfig { n: 5, ..tiny_gen(7) }.to_kv_lines().join("\n")).unwrap();
    assert_eq!(cli(&["generate", "--config", p(&other_gen), "--out", p(&other)]).code, EXIT_OK);
    let r = cli(&["evaluate", "--data", p(&other), "--ckpt", p(&ckpt), "--report", p(&report)]);
    assert_eq!(r.code, EXIT_FAILURE);
    assert!(r.err.contains("extents"), "{}", r.err);
}

#[test]
fn ablate_without_adjacency_needs_no_adjacency_file() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let gen = root.join("gen.txt");
    fs::write(&gen, tiny_gen(8).to_kv_lines().join("\n")).unwrap();
    let data = root.join("data");
    assert_eq!(cli(&["generate", "--config", p(&gen), "--out", p(&data)]).code, EXIT_OK);
    fs::remove_file(data.join(stmformer::bundle::ADJACENCY)).unwrap();
    let run = root.join("run.txt");
    fs::write(&run, tiny_run_text(2)).unwrap();
    let report = root.join("ablate.csv");
    let r = cli(&["ablate", "--data", p(&data), "--variant", "no-adjacency", "--config", p(&run), "--report", p(&report)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(read_all_row(&report, "w/o Adjacency") > 0.0);

    let r = cli(&["ablate", "--data", p(&data), "--variant", "full", "--config", p(&run)]);
    assert_eq!(r.code, EXIT_FAILURE);
    assert_eq!(cli(&["ablate", "--data", p(&data), "--variant", "bogus"]).code, EXIT_USAGE);
}
