use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn xdrive(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xdrive"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn xdrive")
}

fn ok(args: &[&str]) {
    let out = xdrive(args);
    assert!(
        out.status.success(),
        "xdrive {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(args: &[&str]) -> i32 {
    xdrive(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Prepared {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Prepared {
    fn new(clips: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&["synth", "--clips", clips, "--seed", "3", "--out-dir", p(&root.join("raw"))]);
        ok(&["prep", "--input", p(&root.join("raw")), "--out-dir", p(&root.join("prep"))]);
        Prepared { _dir: dir, root }
    }

    fn data(&self) -> PathBuf {
        self.root.join("prep")
    }

    fn run(&self) -> PathBuf {
        self.root.join("run")
    }

    fn controller(&self, lambda_c: &str) -> PathBuf {
        let ck = self.run().join(format!("controller_lc{lambda_c}.gdv1"));
        if !ck.exists() {
            ok(&[
                "train-controller", "--data", p(&self.data()), "--epochs", "1", "--lambda-c", lambda_c,
                "--seed", "7", "--out-dir", p(&self.run()),
            ]);
        }
        ck
    }
}

fn sha(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn golden_path_synth_to_explain() {
    let d = Prepared::new("12");
    let ctrl = d.controller("10");
    assert!(d.run().join("controller_lc10.loss.csv").exists());
    assert!(d.run().join("controller_lc10.manifest.json").exists());
    ok(&[
        "train-explainer", "--data", p(&d.data()), "--controller", p(&ctrl), "--mode", "waa", "--epochs", "2",
        "--out-dir", p(&d.run()),
    ]);
    let expl = d.run().join("explainer_waa_la10_lc10.gdv1");
    assert!(expl.exists());
    ok(&[
        "evaluate", "--data", p(&d.data()), "--controller", p(&ctrl), "--explainer", p(&expl), "--ground-truth",
        "--out-dir", p(&d.run()),
    ]);
    let metrics = std::fs::read_to_string(d.run().join("metrics.csv")).unwrap();
    let header = metrics.lines().next().unwrap();
    for col in [
        "explanation_bleu4", "explanation_cider_d", "description_bleu4", "description_cider_d", "accel_mae",
        "accel_dcor", "course_mae", "course_dcor",
    ] {
        assert!(header.split(',').any(|c| c == col), "missing {col} in {header}");
    }
    let gt = metrics.lines().find(|l| l.starts_with("ground_truth,")).unwrap();
    let cols: Vec<&str> = header.split(',').collect();
    let vals: Vec<&str> = gt.split(',').collect();
    let get = |name: &str| vals[cols.iter().position(|c| *c == name).unwrap()];
    assert_eq!(get("explanation_bleu4"), "1.0");
    assert_eq!(get("description_bleu4"), "1.0");
    assert!(metrics.lines().any(|l| l.starts_with("waa,10.0,10.0,")));

    let ex = d.root.join("explain");
    ok(&[
        "explain", "--data", p(&d.data()), "--controller", p(&ctrl), "--explainer", p(&expl), "--out-dir", p(&ex),
    ]);
    let jsonl = std::fs::read_to_string(ex.join("explanations.jsonl")).unwrap();
    assert!(!jsonl.is_empty());
    for line in jsonl.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let rendered = v["rendered"].as_str().unwrap();
        assert_eq!(rendered.matches(" + ").count(), 1, "{rendered}");
        let files = v["alpha_files"].as_array().unwrap();
        assert!(files.iter().any(|f| f.as_str().unwrap().contains("alpha_j_")));
        let first = ex.join(files[0].as_str().unwrap());
        let bytes = std::fs::read(first).unwrap();
        assert!(bytes.starts_with(b"P5\n20 12\n255\n"));
        assert_eq!(bytes.len(), b"P5\n20 12\n255\n".len() + 240);
        assert!(!v["beta"].as_array().unwrap().is_empty());
        assert!(v["control"].as_array().unwrap().len() > 0);
    }
    assert!(ex.join("explanations.csv").exists());
}

#[test]
fn seeded_reruns_are_byte_identical() {
    let d = Prepared::new("10");
    let a = d.root.join("a");
    let b = d.root.join("b");
    for out in [&a, &b] {
        ok(&[
            "train-controller", "--data", p(&d.data()), "--epochs", "1", "--lambda-c", "100", "--seed", "7",
            "--out-dir", p(out),
        ]);
        let ck = out.join("controller_lc100.gdv1");
        ok(&[
            "train-explainer", "--data", p(&d.data()), "--controller", p(&ck), "--mode", "rat", "--epochs", "1",
            "--seed", "7", "--out-dir", p(out),
        ]);
        ok(&[
            "evaluate", "--data", p(&d.data()), "--controller", p(&ck), "--explainer",
            p(&out.join("explainer_rationalization_la0_lc100.gdv1")), "--out-dir", p(out), "--jobs", "2",
        ]);
    }
    for f in ["controller_lc100.gdv1", "explainer_rationalization_la0_lc100.gdv1", "metrics.csv"] {
        assert_eq!(sha(&a.join(f)), sha(&b.join(f)), "{f} differs between runs");
    }
    let c = d.root.join("c");
    ok(&[
        "train-controller", "--data", p(&d.data()), "--epochs", "1", "--lambda-c", "100", "--seed", "8",
        "--out-dir", p(&c),
    ]);
    assert_ne!(sha(&a.join("controller_lc100.gdv1")), sha(&c.join("controller_lc100.gdv1")));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert_eq!(code(&["train-controller", "--data", p(&missing), "--out-dir", p(dir.path())]), 2);
    assert_eq!(code(&["train-controller", "--bogus-flag"]), 2);
    assert_eq!(code(&[]), 2);
    assert_eq!(code(&["stats", "--annotations", p(&missing), "--out-dir", p(dir.path())]), 2);

    let d = Prepared::new("8");
    let ctrl = d.controller("0");
    let (data, run) = (d.data(), d.run());
    let base = ["train-explainer", "--data", p(&data), "--controller", p(&ctrl), "--out-dir", p(&run)];
    let with = |extra: &[&str]| -> i32 {
        let mut args = base.to_vec();
        args.extend_from_slice(extra);
        code(&args)
    };
    assert_eq!(with(&["--mode", "saa", "--lambda-a", "10"]), 2);
    assert_eq!(with(&["--mode", "rat", "--lambda-a", "10"]), 2);
    assert_eq!(with(&["--mode", "nonsense"]), 2);
    assert_eq!(with(&["--grid", "--mode", "waa"]), 2);
    assert_eq!(code(&["train-controller", "--data", p(&data), "--lambda-c", "-1", "--out-dir", p(&d.run())]), 2);
    assert_eq!(code(&["train-controller", "--data", p(&data)]), 2, "missing --out-dir");
}

#[test]
fn runtime_errors_exit_1() {
    let d = Prepared::new("8");
    let ctrl = d.controller("0");
    let bad = d.root.join("corrupt.gdv1");
    let mut bytes = std::fs::read(&ctrl).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0xff;
    bytes.truncate(n - 1);
    std::fs::write(&bad, bytes).unwrap();
    assert_eq!(
        code(&["explain", "--data", p(&d.data()), "--controller", p(&bad), "--out-dir", p(&d.root.join("x"))]),
        1
    );

    let raw = d.root.join("raw");
    let all_train = d.root.join("all_train");
    ok(&["prep", "--input", p(&raw), "--out-dir", p(&all_train), "--train-frac", "1.0", "--val-frac", "0"]);
    assert_eq!(
        code(&["evaluate", "--data", p(&all_train), "--ground-truth", "--out-dir", p(&d.root.join("e"))]),
        1,
        "empty test split"
    );
}

#[test]
fn explainer_modes_and_grid() {
    let d = Prepared::new("8");
    for lc in ["0", "10", "100"] {
        d.controller(lc);
    }
    ok(&[
        "train-explainer", "--data", p(&d.data()), "--controller", p(&d.controller("0")), "--mode", "rat",
        "--epochs", "1", "--out-dir", p(&d.run()),
    ]);
    assert!(d.run().join("explainer_rationalization_la0_lc0.gdv1").exists());

    ok(&["train-explainer", "--data", p(&d.data()), "--grid", "--epochs", "1", "--out-dir", p(&d.run())]);
    let mut grid: Vec<String> = std::fs::read_dir(d.run())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".gdv1") && (n.starts_with("explainer_saa") || n.starts_with("explainer_waa")))
        .collect();
    grid.sort();
    assert_eq!(
        grid,
        [
            "explainer_saa_la0_lc0.gdv1",
            "explainer_saa_la0_lc10.gdv1",
            "explainer_saa_la0_lc100.gdv1",
            "explainer_waa_la10_lc0.gdv1",
            "explainer_waa_la10_lc10.gdv1",
            "explainer_waa_la10_lc100.gdv1",
        ]
    );

    let ex = d.root.join("saa_explain");
    ok(&[
        "explain", "--data", p(&d.data()), "--controller", p(&d.controller("10")), "--explainer",
        p(&d.run().join("explainer_saa_la0_lc10.gdv1")), "--out-dir", p(&ex),
    ]);
    let names: Vec<String> = walk(&ex);
    assert!(names.iter().any(|n| n.contains("alpha_c_")));
    assert!(!names.iter().any(|n| n.contains("alpha_j")), "SAA must not emit α^j maps");

    // an explainer scored without the controller it was trained on
    assert_eq!(
        code(&[
            "evaluate", "--data", p(&d.data()), "--controller", p(&d.controller("0")), "--explainer",
            p(&d.run().join("explainer_saa_la0_lc10.gdv1")), "--out-dir", p(&d.root.join("e")),
        ]),
        2
    );
}

fn walk(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path.to_string_lossy().into_owned());
        }
    }
    out
}

#[test]
fn config_file_fills_unset_flags() {
    let d = Prepared::new("8");
    let cfg = d.root.join("run.toml");
    std::fs::write(&cfg, "seed = 7\n[train-controller]\nepochs = 1\nlambda_c = 10\n").unwrap();
    ok(&["train-controller", "--data", p(&d.data()), "--config", p(&cfg), "--out-dir", p(&d.run())]);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.run().join("controller_lc10.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["epochs"], 1);
    assert_eq!(m["config"]["seed"], 7);
    // the flag wins over the file
    ok(&[
        "train-controller", "--data", p(&d.data()), "--config", p(&cfg), "--lambda-c", "0", "--out-dir", p(&d.run()),
    ]);
    assert!(d.run().join("controller_lc0.gdv1").exists());
    std::fs::write(&cfg, "epochs = \"many\"\n").unwrap();
    assert_eq!(code(&["train-controller", "--data", p(&d.data()), "--config", p(&cfg), "--out-dir", p(&d.run())]), 2);
}

#[test]
fn stats_and_agreement_reports() {
    let d = Prepared::new("6");
    let ann = d.root.join("raw").join("annotations.jsonl");
    let out = d.root.join("reports");
    ok(&["stats", "--annotations", p(&ann), "--out-dir", p(&out)]);
    let st: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("stats.json")).unwrap()).unwrap();
    assert_eq!(st["stats"]["videos"], 6);
    ok(&["agreement", "--worker-a", p(&ann), "--worker-b", p(&ann), "--out-dir", p(&out)]);
    let ag: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("agreement.json")).unwrap()).unwrap();
    assert_eq!(ag["clips"], 6);
    assert_eq!(ag["mean_iou"], 1.0);
}
