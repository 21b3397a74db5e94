use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use sst_cli::{run, EXIT_ATTRACTOR, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

struct Assets {
    _dir: tempfile::TempDir,
    root: PathBuf,
    cfg: String,
    weights: String,
}

fn sst(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut full = vec!["sst"];
    full.extend_from_slice(args);
    let code = run(full, &mut out, &mut err);
    (
        code,
        String::from_utf8_lossy(&out).into_owned(),
        String::from_utf8_lossy(&err).into_owned(),
    )
}

fn assets() -> Assets {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let cfg = root.join("toy.cfg").display().to_string();
    let weights = root.join("toy.sstw").display().to_string();
    let (code, _, err) = sst(&["init", "--toy", "--config", &cfg, "--weights", &weights]);
    assert_eq!(code, EXIT_OK, "{err}");
    Assets {
        _dir: dir,
        root,
        cfg,
        weights,
    }
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn repo_file(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
        .display()
        .to_string()
}

fn generate_to(a: &Assets, name: &str, extra: &[&str]) -> (i32, PathBuf) {
    let out = a.root.join(name);
    let out_s = out.display().to_string();
    let joke = repo_file("assets/prompts/joke.txt");
    let mut args = vec![
        "generate", "--config", &a.cfg, "--weights", &a.weights, "--prompt-file", &joke,
        "--max-tokens", "32", "--out", &out_s,
    ];
    args.extend_from_slice(extra);
    let (code, _, err) = sst(&args);
    assert!(code == EXIT_OK || code == EXIT_ATTRACTOR, "{err}");
    (code, out)
}

// Snapshot of the greedy base-path output for the joke prompt on seed-1 toy
// weights; regenerate only when the model or initializer changes on purpose.
const GOLDEN_BASE: &str = "fbd7f1752db43244c8599b46c0935ba06acaf8b91031f2c73dfd258018ea518b";

#[test]
fn base_output_matches_golden_and_alpha_zero_sst_matches_base() {
    let a = assets();
    let (_, base) = generate_to(&a, "base.txt", &["--mode", "base", "--alpha", "0", "--recursions", "0"]);
    assert_eq!(sha(&base), GOLDEN_BASE);
    let (_, sst0) = generate_to(&a, "sst0.txt", &["--mode", "sst", "--alpha", "0", "--recursions", "0"]);
    assert_eq!(std::fs::read(&base).unwrap(), std::fs::read(&sst0).unwrap());
}

#[test]
fn bad_flags_are_usage_errors() {
    let a = assets();
    let base = ["generate", "--config", &a.cfg, "--weights", &a.weights, "--prompt", "x"];
    let with = |extra: &[&str]| {
        let mut v = base.to_vec();
        v.extend_from_slice(extra);
        sst(&v)
    };
    let (code, _, err) = with(&["--alpha", "1.2"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("alpha"));
    assert_eq!(with(&["--mode", "fast"]).0, EXIT_USAGE);
    assert_eq!(with(&["--alignment", "middle"]).0, EXIT_USAGE);
    assert_eq!(with(&["--max-tokens", "0"]).0, EXIT_USAGE);
    assert_eq!(sst(&["generate", "--config", &a.cfg, "--weights", &a.weights]).0, EXIT_USAGE);
    assert_eq!(sst(&["frobnicate"]).0, EXIT_USAGE);
}

#[test]
fn missing_files_are_runtime_errors() {
    let a = assets();
    let (code, _, err) = sst(&["generate", "--config", &a.cfg, "--weights", "/nonexistent/w", "--prompt", "x"]);
    assert_eq!(code, EXIT_RUNTIME);
    assert!(err.contains("/nonexistent/w"));
}

#[test]
fn attractor_exits_with_code_three() {
    let a = assets();
    let (code, _, err) = sst(&[
        "generate", "--config", &a.cfg, "--weights", &a.weights, "--prompt", "the the", "--mode",
        "base", "--max-tokens", "300", "--no-stop",
    ]);
    assert_eq!(code, EXIT_ATTRACTOR, "{err}");
    assert!(err.contains("stop attractor"));
    assert!(err.contains("repetition: attractor"));
}

fn compare(a: &Assets, extra: &[&str]) -> (i32, String, String) {
    let mut args = vec![
        "compare", "--config", &a.cfg, "--weights", &a.weights, "--prompt", "Please give me a very punny joke",
        "--max-tokens", "32", "--no-stop",
    ];
    args.extend_from_slice(extra);
    sst(&args)
}

#[test]
fn compare_alpha_zero_reports_no_divergence() {
    let a = assets();
    let (code, out, _) = compare(&a, &["--alpha", "0", "--recursions", "2"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("no divergence"));
    assert!(out.contains("max state diff 0\n"));
}

// First token index where the seed-1 toy model's state-stream output leaves the
// base output at alpha 0.027, two recursions.
const SNAPSHOT_DIVERGENCE: &str = "first divergence at token 6\n";

#[test]
fn compare_alpha_default_diverges_at_snapshot_index() {
    let a = assets();
    let (code, out, _) = compare(&a, &["--alpha", "0.027", "--recursions", "2"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains(SNAPSHOT_DIVERGENCE), "{out}");
}

#[test]
fn compare_refuses_different_weights() {
    let a = assets();
    let other = a.root.join("other.sstw").display().to_string();
    let (code, _, _) = sst(&["init", "--config", &a.cfg, "--weights", &other, "--seed", "2"]);
    assert_eq!(code, EXIT_OK);
    let (code, _, err) = compare(&a, &["--weights-b", &other]);
    assert_eq!(code, EXIT_RUNTIME);
    assert!(err.contains("identical weights"));
    let (code, _, _) = compare(&a, &["--weights-b", &a.weights.clone()]);
    assert_eq!(code, EXIT_OK);
}

fn trace_fc(a: &Assets, tag: &str, extra: &[&str]) -> PathBuf {
    let dir = a.root.join(tag);
    let trace = a.root.join(format!("{tag}.trace"));
    let mut args = vec![
        "trace".to_string(), "--config".into(), a.cfg.clone(), "--weights".into(), a.weights.clone(),
        "--prompt".into(), "Please give me a very punny joke".into(), "--max-tokens".into(), "12".into(),
        "--no-stop".into(), "--trace-out".into(), trace.display().to_string(), "--fc-out".into(),
        dir.display().to_string(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let (code, _, err) = sst(&refs);
    assert_eq!(code, EXIT_OK, "{err}");
    dir
}

fn fc_hashes(dir: &Path, step: usize, passes: usize) -> Vec<String> {
    (0..passes)
        .map(|p| sha(&dir.join(format!("fc_step{step:04}_pass{p}.txt"))))
        .collect()
}

#[test]
fn base_fc_files_identical_across_passes() {
    let a = assets();
    let dir = trace_fc(&a, "base", &["--mode", "base", "--recursions", "4"]);
    for step in 1..12 {
        let h = fc_hashes(&dir, step, 5);
        assert!(h.iter().all(|x| *x == h[0]), "step {step}");
    }
}

#[test]
fn sst_fc_files_differ_across_passes() {
    let a = assets();
    let dir = trace_fc(&a, "sst", &["--mode", "sst", "--alpha", "0.027", "--recursions", "4"]);
    for step in 1..12 {
        let h = fc_hashes(&dir, step, 5);
        assert!(h[1..].iter().any(|x| *x != h[0]), "step {step}");
    }
}

#[test]
fn zero_recursions_give_one_fc_file_per_step() {
    let a = assets();
    let dir = trace_fc(&a, "r0", &["--mode", "sst", "--recursions", "0"]);
    let mut names: Vec<String> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    let want: Vec<String> = (1..12).map(|s| format!("fc_step{s:04}_pass0.txt")).collect();
    assert_eq!(names, want);
    let fc = sst_core::trace::FcMatrix::parse(&std::fs::read_to_string(dir.join(&want[0])).unwrap()).unwrap();
    // Default selection for d_model 64: dims 0..16 plus every fourth from 16.
    assert_eq!(fc.size(), 28);
    let trace = sst_core::import_trace(a.root.join("r0.trace")).unwrap();
    assert_eq!(trace.steps(), 12);
    assert_eq!(trace.passes(), 1);
}

#[test]
fn membudget_examples() {
    let (code, out, _) = sst(&["membudget"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("256 KB/token"));
    assert!(sst(&["membudget", "--tokens", "2048"]).1.contains("512 MB"));
    assert!(sst(&["membudget", "--tokens", "0"]).1.contains(": 0 B"));
}

fn bench(a: &Assets, tasks: &str, out: &str, extra: &[&str]) -> (i32, String, String) {
    let mut args = vec![
        "bench", "--config", &a.cfg, "--weights", &a.weights, "--tasks", tasks, "--out", out,
        "--max-tokens", "12",
    ];
    args.extend_from_slice(extra);
    sst(&args)
}

// Results file for the 3-item set on seed-1 toy weights.
const GOLDEN_BENCH: &str = "\
id,phase1_answer,phase1_correct,retried,phase2_answer,phase2_correct,changed,error
add00,,false,true,,false,false,
add01,,false,true,,false,false,
add02,,false,true,,false,false,
aggregate:3,,0,3,,0,0,0
";

#[test]
fn bench_three_items_golden_and_worker_independent() {
    let a = assets();
    let tasks = repo_file("assets/tasks/arith3.tsv");
    let one = a.root.join("one.csv");
    let three = a.root.join("three.csv");
    assert_eq!(bench(&a, &tasks, &one.display().to_string(), &[]).0, EXIT_OK);
    assert_eq!(
        bench(&a, &tasks, &three.display().to_string(), &["--workers", "3"]).0,
        EXIT_OK
    );
    assert_eq!(std::fs::read(&one).unwrap(), std::fs::read(&three).unwrap());
    assert_eq!(std::fs::read_to_string(&one).unwrap(), GOLDEN_BENCH);
}

#[test]
fn bench_stub_all_correct_never_retries() {
    let a = assets();
    let tasks = repo_file("assets/tasks/arith3.tsv");
    let out = a.root.join("ok.csv");
    let (code, stdout, _) = bench(&a, &tasks, &out.display().to_string(), &["--evaluator", "all-correct"]);
    assert_eq!(code, EXIT_OK);
    assert!(stdout.contains("retried 0"));
    let text = std::fs::read_to_string(&out).unwrap();
    let last = text.lines().last().unwrap();
    assert_eq!(last.split(',').nth(3), Some("0"));
}

#[test]
fn bench_skips_malformed_lines() {
    let a = assets();
    let tasks = a.root.join("tasks.tsv");
    std::fs::write(&tasks, "ok\t1+1=\t2\tlast-integer\nbroken line\nx\ty\tz\tfuzzy\n").unwrap();
    let out = a.root.join("b.csv");
    let (code, stdout, err) = bench(
        &a,
        &tasks.display().to_string(),
        &out.display().to_string(),
        &["--evaluator", "all-wrong"],
    );
    assert_eq!(code, EXIT_OK);
    assert_eq!(err.matches("warning").count(), 2);
    assert!(stdout.contains("items 1 "));
    assert!(stdout.contains("retried 1"));
}
