//! End-to-end tests of the `patchpure` binary: pipeline wiring, exit codes,
//! emitted files, and byte-level determinism on a miniature configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_patchpure")
}

fn temp(name: &str) -> PathBuf {
    let p = std::env::temp_dir().join(format!("patchpure-cli-{}-{name}", std::process::id()));
    fs::create_dir_all(&p).unwrap();
    p
}

/// A configuration small enough to run the whole pipeline in seconds.
const TINY: &str = r#"
seed = 11

[dataset]
kind = "synthetic-textures"
n = 8
classes = 2
height = 6
width = 6

[eval]
images = 2

[classifier]
epochs = 4

[advdata]
methods = ["bim"]
steps = 4

[pool]
families = ["edsr-lite"]
epochs = 2

[[defense]]
kind = "none"

[[defense]]
kind = "patchwise"
grid = [2, 2]

[[attack]]
kind = "square"
norm = "linf"
radius = 0.15
budgets = [15, 40]

[theory]
pool_sizes = [1]
images = 2

[theory.theorem1]
dim = 6
pool_sizes = [1, 2]
seeds = 2
steps = 8
norm_samples = 32
lipschitz_pairs = 500

[theory.theorem2]
dim = 6
pool_size = 2
probes = 3
trials = 50
lipschitz_pairs = 500

[theory.convergence]
budget = 25

[bench]
sizes = [1, 2]
reps = 12
warmup = 2
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn run_ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn pipeline(cfg: &str, out_dir: &Path, extra: &[&str]) {
    for sub in ["train-classifier", "gen-advdata", "train-pool", "attack", "theory"] {
        let mut args = vec![sub, "--config", cfg, "--out", out_dir.to_str().unwrap()];
        args.extend_from_slice(extra);
        run_ok(&args);
    }
}

/// Minimal well-formedness check: tags balance, one root, quoted attributes.
fn assert_well_formed_xml(text: &str) {
    let mut stack: Vec<String> = Vec::new();
    let mut roots = 0usize;
    let mut rest = text;
    while let Some(start) = rest.find('<') {
        let tail = &rest[start + 1..];
        let end = tail.find('>').expect("every tag closes");
        let tag = &tail[..end];
        rest = &tail[end + 1..];
        assert_eq!(tag.matches('"').count() % 2, 0, "unbalanced quotes in <{tag}>");
        if let Some(name) = tag.strip_prefix('/') {
            let open = stack.pop().unwrap_or_else(|| panic!("stray closer </{name}>"));
            assert_eq!(open, name, "mismatched </{name}>");
        } else if !tag.ends_with('/') && !tag.starts_with('?') && !tag.starts_with('!') {
            let name: String = tag.split_whitespace().next().unwrap().to_string();
            if stack.is_empty() {
                roots += 1;
            }
            stack.push(name);
        }
    }
    assert!(stack.is_empty(), "unclosed tags: {stack:?}");
    assert_eq!(roots, 1, "exactly one root element");
}

fn read(p: PathBuf) -> String {
    fs::read_to_string(&p).unwrap_or_else(|e| panic!("missing {}: {e}", p.display()))
}

#[test]
fn full_pipeline_emits_every_report_file() {
    let root = temp("pipeline");
    let cfg = write_config(&root, TINY);
    let out = root.join("run");
    let cfg = cfg.to_str().unwrap();
    pipeline(cfg, &out, &[]);
    run_ok(&["bench", "--config", cfg, "--out", out.to_str().unwrap()]);
    run_ok(&["report", "--config", cfg, "--out", out.to_str().unwrap()]);

    let robust = read(out.join("robust_accuracy.csv"));
    let mut lines = robust.lines();
    assert_eq!(lines.next(), Some("defense,attack,budget,robust_accuracy"));
    // 2 defenses x 1 attack x 2 budgets.
    assert_eq!(lines.count(), 4);
    assert!(robust.contains("patchwise-full-g2x2,square,40,"));

    let clean = read(out.join("clean_accuracy.csv"));
    assert_eq!(clean.lines().count(), 3);

    for slug in ["none", "patchwise-full-g2x2"] {
        let curve = read(out.join(format!("convergence_{slug}.csv")));
        let ids: Vec<usize> = curve
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(ids.len(), 41, "budget 40 gives 41 curve points");
        assert!(ids.windows(2).all(|w| w[1] > w[0]), "query_index monotone");
    }

    let trace = read(out.join("trace_square.csv"));
    assert_eq!(
        trace.lines().next(),
        Some("image_id,query_index,margin_or_distance,accepted,norm")
    );
    assert!(trace.lines().count() > 1);

    let latency = read(out.join("latency.csv"));
    assert_eq!(latency.lines().count(), 5, "header + 2 modes x 2 sizes");

    for name in ["theorem1.csv", "theorem2.csv"] {
        let text = read(out.join(name));
        assert_eq!(
            text.lines().next(),
            Some("experiment,config_id,K,nu_hat,measured,bound,pass")
        );
        assert!(text.lines().count() > 1, "{name} should carry rows");
    }

    for name in ["convergence.svg", "latency.svg"] {
        let svg = read(out.join(name));
        assert_well_formed_xml(&svg);
        assert!(svg.contains("<polyline"), "{name} should plot series");
        assert!(svg.contains("robust accuracy") || svg.contains("latency"));
    }

    let meta = read(out.join("run_meta.json"));
    assert!(meta.contains("config_hash"));
    assert!(meta.contains("checkpoint_hash"));
    assert!(!meta.contains("unix"), "timestamps only in the sidecar");
    assert!(read(out.join("sidecar.json")).contains("written_unix_ms"));

    fs::remove_dir_all(&root).ok();
}

#[test]
fn deterministic_pipeline_is_byte_identical_and_jobs_invariant() {
    let root = temp("determinism");
    let cfg_path = write_config(&root, TINY);
    let cfg = cfg_path.to_str().unwrap();
    let a = root.join("a");
    let b = root.join("b");
    pipeline(cfg, &a, &["--jobs", "1"]);
    pipeline(cfg, &b, &["--jobs", "4"]);

    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .filter_map(|e| {
            let name = e.unwrap().file_name().to_string_lossy().into_owned();
            (name.ends_with(".csv") || name.ends_with(".svg") || name == "run_meta.json")
                .then_some(name)
        })
        .collect();
    names.sort();
    assert!(names.iter().any(|n| n == "robust_accuracy.csv"));
    for name in names {
        let x = fs::read(a.join(&name)).unwrap();
        let y = fs::read(b.join(&name)).unwrap();
        assert_eq!(x, y, "{name} must not depend on scheduling or reruns");
    }
    fs::remove_dir_all(&root).ok();
}

#[test]
fn empty_attack_list_reports_clean_accuracy_only() {
    let root = temp("cleanonly");
    // `attack = []` must precede the first table header to stay a top-level key.
    let tiny = r#"
seed = 11
attack = []

[dataset]
kind = "synthetic-textures"
n = 8
classes = 2
height = 6
width = 6

[eval]
images = 2

[classifier]
epochs = 4

[theory]
images = 2

[[defense]]
kind = "none"

[[defense]]
kind = "shrink"
factor = 0.5
"#;
    let cfg_path = write_config(&root, tiny);
    let cfg = cfg_path.to_str().unwrap();
    let out = root.join("run");
    let out_s = out.to_str().unwrap();
    run_ok(&["train-classifier", "--config", cfg, "--out", out_s]);
    run_ok(&["attack", "--config", cfg, "--out", out_s]);

    assert_eq!(
        read(out.join("robust_accuracy.csv")),
        "defense,attack,budget,robust_accuracy\n",
        "no attacks means a header-only robust accuracy table"
    );
    let clean = read(out.join("clean_accuracy.csv"));
    assert_eq!(clean.lines().count(), 3);
    assert!(!out.join("convergence.svg").exists());
    fs::remove_dir_all(&root).ok();
}

#[test]
fn config_problems_exit_one() {
    let root = temp("badconfig");
    let out = root.join("run");
    let out_s = out.to_str().unwrap();

    let unknown = write_config(&root, "seed = 3\nturbo = true\n");
    let got = run(&["attack", "--config", unknown.to_str().unwrap(), "--out", out_s]);
    assert_eq!(got.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&got.stderr).contains("config"));

    let zero_budget = TINY.replace("budgets = [15, 40]", "budgets = [0]");
    let p = root.join("zero.toml");
    fs::write(&p, zero_budget).unwrap();
    let got = run(&["attack", "--config", p.to_str().unwrap(), "--out", out_s]);
    assert_eq!(got.status.code(), Some(1));

    fs::remove_dir_all(&root).ok();
}

#[test]
fn missing_checkpoints_exit_one_and_name_the_stage() {
    let root = temp("missing");
    let cfg_path = write_config(&root, TINY);
    let cfg = cfg_path.to_str().unwrap();
    let out = root.join("run");
    let out_s = out.to_str().unwrap();

    let got = run(&["attack", "--config", cfg, "--out", out_s]);
    assert_eq!(got.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&got.stderr).contains("train-classifier"));

    run_ok(&["train-classifier", "--config", cfg, "--out", out_s]);
    let got = run(&["attack", "--config", cfg, "--out", out_s]);
    assert_eq!(got.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&got.stderr).contains("train-pool"));

    let got = run(&["gen-advdata", "--config", cfg, "--out", root.join("other").to_str().unwrap()]);
    assert_eq!(got.status.code(), Some(1), "other dir has no classifier");

    fs::remove_dir_all(&root).ok();
}

#[test]
fn recorded_cell_failures_exit_two() {
    use patchpure_cli::experiment::{CellError, RunReport};
    use patchpure_cli::pipeline::Ctx;

    let root = temp("partial");
    let cfg_path = write_config(&root, TINY);
    let out = root.join("run");
    let loaded = patchpure_cli::load_config(Some(&cfg_path), None, Some(&out)).unwrap();
    let ctx = Ctx::new(loaded);
    ctx.dirs.ensure().unwrap();
    let mut fragment = RunReport::new(ctx.provenance().unwrap());
    fragment.cell_errors.push(CellError {
        defense: "none".into(),
        attack: "square".into(),
        budget: 40,
        image_id: 0,
        message: "injected".into(),
    });
    patchpure_cli::artifacts::write_json(&ctx.dirs.fragment("attack"), &fragment).unwrap();

    let got = run(&[
        "report",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(got.status.code(), Some(2), "partial cell failures exit 2");

    fs::remove_dir_all(&root).ok();
}

#[test]
fn stale_fragments_from_other_checkpoints_are_rejected() {
    use patchpure_cli::experiment::RunReport;
    use patchpure_cli::experiment::Provenance;

    let root = temp("stale");
    let cfg_path = write_config(&root, TINY);
    let out = root.join("run");
    let loaded = patchpure_cli::load_config(Some(&cfg_path), None, Some(&out)).unwrap();
    let ctx = patchpure_cli::pipeline::Ctx::new(loaded);
    ctx.dirs.ensure().unwrap();
    let fragment = RunReport::new(Provenance {
        config_hash: "somebody-else".into(),
        checkpoint_hash: "different".into(),
        master_seed: 1,
    });
    patchpure_cli::artifacts::write_json(&ctx.dirs.fragment("attack"), &fragment).unwrap();

    let got = run(&[
        "report",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(got.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&got.stderr).contains("provenance"));

    fs::remove_dir_all(&root).ok();
}
