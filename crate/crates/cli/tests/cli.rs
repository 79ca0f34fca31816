use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_gridhier");
const FAST: &[&str] = &["--pose-radius", "2", "--rot-step", "1.5707963267948966", "--max-iters", "8"];

fn run(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).env("GRIDHIER_THREADS", "1").output().unwrap()
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `dir` with its bytes, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Runs the whole pipeline into `root`.
fn pipeline(root: &Path) {
    let [gen, ds, learn_dir, flat_dir, sel, eval_dir, png, model] =
        ["gen", "ds", "learn", "flat", "sel", "eval", "png", "learn/model"].map(|s| root.join(s));
    ok(&["generate", "--preset", "study-room", "--seed", "7", "--out", p(&gen)]);
    ok(&["segment", "--input", p(&gen), "--out", p(&ds)]);
    let mut learn = vec!["learn", "--input", p(&ds), "-N", "4", "-M", "3", "--out", p(&learn_dir)];
    learn.extend(FAST);
    ok(&learn);
    let mut flat = vec!["learn", "--flat", "--input", p(&ds), "-N", "4", "--out", p(&flat_dir)];
    flat.extend(FAST);
    ok(&flat);
    let mut select = vec!["select", "--input", p(&ds), "--restarts", "1", "--max-n", "5", "--out", p(&sel)];
    select.extend(FAST);
    ok(&select);
    let mut eval = vec!["eval", "--input", p(&ds), "-N", "4", "-M", "3", "--restarts", "1", "--out", p(&eval_dir)];
    eval.extend(FAST);
    ok(&eval);
    ok(&["export", "--input", p(&model), "--dataset", p(&ds), "--maps", p(&gen), "--out", p(&png)]);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        if k.file_name().unwrap() == "run_config.json" {
            // Records the output path, which differs between the two roots.
            continue;
        }
        assert!(v == &sb[k], "{k:?} differs between reruns");
    }
}

#[test]
fn generate_writes_the_preset() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["generate", "--preset", "study-room", "--out", p(dir.path())]);
    let names: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    let count = |prefix: &str| names.iter().filter(|n| n.starts_with(prefix)).count();
    assert_eq!((count("map_"), count("true_object_"), count("true_template_")), (4, 4, 3));
    assert!(names.contains(&"scenario.json".to_string()));

    let lab = tempfile::tempdir().unwrap();
    ok(&["generate", "--preset", "robotics-lab", "--out", p(lab.path())]);
    assert!(lab.path().join("map_8.pgm").exists());
    assert!(!lab.path().join("map_9.pgm").exists());
}

#[test]
fn run_config_cites_its_hash() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["generate", "--seed", "3", "--out", p(dir.path())]);
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run_config.json")).unwrap()).unwrap();
    assert_eq!(doc["command"], "generate");
    assert_eq!(doc["config"]["seed"], 3);
    assert_eq!(doc["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn config_file_is_merged_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"seed": 11, "em": {"gamma": 0.5}}"#).unwrap();
    let out = dir.path().join("o");
    ok(&["generate", "--config", p(&cfg), "--seed", "12", "--out", p(&out)]);
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(doc["config"]["seed"], 12);
    assert_eq!(doc["config"]["em"]["gamma"], 0.5);
}

#[test]
fn failures_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["learn", "--input", "/nonexistent/ds", "-N", "2", "--out", p(dir.path())],
        vec!["generate", "--preset", "attic", "--out", p(dir.path())],
        vec!["learn", "--gamma", "2", "--out", p(dir.path())],
        vec!["select", "--restarts", "0", "--out", p(dir.path())],
    ] {
        let out = run(&args);
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    }
}

#[test]
fn selection_header_echoes_penalties() {
    let dir = tempfile::tempdir().unwrap();
    let [gen, ds, sel] = ["gen", "ds", "sel"].map(|s| dir.path().join(s));
    ok(&["generate", "--preset", "study-room", "--out", p(&gen)]);
    ok(&["segment", "--input", p(&gen), "--out", p(&ds)]);
    let mut args = vec!["select", "--input", p(&ds), "--restarts", "1", "--max-n", "4", "--out", p(&sel)];
    args.extend(FAST);
    ok(&args);
    let csv = fs::read_to_string(sel.join("selection.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "# penalty_n=35 penalty_m=15");
    assert!(sel.join("model").join("model.json").exists());
}
