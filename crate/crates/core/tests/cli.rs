use std::path::{Path, PathBuf};
use std::process::{Command, Output};

struct Scratch(PathBuf);

impl Scratch {
    fn new(name: &str) -> Scratch {
        let dir = std::env::temp_dir().join(format!("sohot-cli-{}-{name}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        Scratch(dir)
    }

    fn path(&self, file: &str) -> PathBuf {
        self.0.join(file)
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn sohot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sohot")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
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

fn gen(dir: &Scratch, file: &str, extra: &[&str]) -> PathBuf {
    let path = dir.path(file);
    let mut args = vec!["gen", "--out", s(&path)];
    args.extend_from_slice(extra);
    let out = sohot(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    path
}

fn printed_value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key))
        .unwrap_or_else(|| panic!("no {key:?} in {text:?}"))
        .trim()
}

/// Manifest JSON with the wall-clock field removed.
fn manifest_without_timing(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("timings");
    v
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let dir = Scratch::new("gen-det");
    let a = gen(&dir, "a.csv", &["--classes", "3", "--dim", "2", "--seed", "7"]);
    let b = gen(&dir, "b.csv", &["--classes", "3", "--dim", "2", "--seed", "7"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let mut ma = manifest_without_timing(&dir.path("a.csv.manifest.json"));
    let mut mb = manifest_without_timing(&dir.path("b.csv.manifest.json"));
    for m in [&mut ma, &mut mb] {
        m["config"].as_object_mut().unwrap().remove("out");
        m.as_object_mut().unwrap().remove("artifacts");
    }
    assert_eq!(ma, mb);
}

#[test]
fn negative_rotation_is_rejected_by_name() {
    let dir = Scratch::new("rot");
    let out = sohot(&["gen", "--rot-deg", "-5", "--out", s(&dir.path("x.csv"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--rot-deg"), "{}", stderr(&out));
    assert!(!dir.path("x.csv").exists());
}

#[test]
fn default_gen_row_count() {
    let dir = Scratch::new("rows");
    let path = gen(&dir, "d.csv", &[]);
    let text = std::fs::read_to_string(path).unwrap();
    let (classes, n, nt, test) = (3, 20, 3, 200);
    assert_eq!(text.lines().count() - 1, classes * (n + nt + 2 * test));
    assert!(text.starts_with("domain,split,label,f0,f1\n"));
}

#[test]
fn zero_strength_training_prints_the_baseline_accuracy() {
    let dir = Scratch::new("s-t");
    let data = gen(&dir, "d.csv", &["--seed", "3"]);
    let common = ["train", "--features", s(&data), "--epochs", "20", "--seed", "4"];
    let zero = sohot(
        &[
            &common[..],
            &["--out", s(&dir.path("zero")), "--sigma1", "0", "--sigma2", "0"],
        ]
        .concat(),
    );
    let base = sohot(&[&common[..], &["--out", s(&dir.path("base")), "--baseline"]].concat());
    assert_eq!(code(&zero), 0, "{}", stderr(&zero));
    assert_eq!(code(&base), 0, "{}", stderr(&base));
    let key = "final target accuracy:";
    assert_eq!(printed_value(&stdout(&zero), key), printed_value(&stdout(&base), key));
    assert_eq!(printed_value(&stdout(&base), "configuration:"), "S+T");
}

#[test]
fn order_four_weighted_names_its_configuration() {
    let dir = Scratch::new("so-to-fo");
    let data = gen(&dir, "d.csv", &[]);
    let out = sohot(&[
        "train",
        "--features",
        s(&data),
        "--out",
        s(&dir.path("run")),
        "--order",
        "4",
        "--weighted",
        "--epochs",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(printed_value(&stdout(&out), "configuration:"), "So+To+Fo+ζ");
}

#[test]
fn train_without_features_is_a_usage_error() {
    let out = sohot(&["train", "--out", "/tmp/never-written"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--features"));
}

#[test]
fn unreadable_features_exit_two() {
    let dir = Scratch::new("parse");
    let bad = dir.path("bad.csv");
    std::fs::write(
        &bad,
        "domain,split,label,f0\nsource,train,0,1.0\nsource,train,zero,2.0\n",
    )
    .unwrap();
    let out = sohot(&["train", "--features", s(&bad), "--out", s(&dir.path("o"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn divergence_exits_three() {
    let dir = Scratch::new("diverge");
    let data = gen(&dir, "d.csv", &[]);
    let out = sohot(&[
        "train",
        "--features",
        s(&data),
        "--out",
        s(&dir.path("o")),
        "--lr",
        "1e300",
        "--epochs",
        "3",
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("epoch 1"), "{}", stderr(&out));
}

#[test]
fn eval_reproduces_the_trained_accuracy() {
    let dir = Scratch::new("eval");
    let data = gen(&dir, "d.csv", &["--seed", "5"]);
    let run = dir.path("run");
    let train = sohot(&[
        "train",
        "--features",
        s(&data),
        "--out",
        s(&run),
        "--epochs",
        "5",
        "--sigma1",
        "0.1",
    ]);
    assert_eq!(code(&train), 0, "{}", stderr(&train));
    let report = dir.path("eval.csv");
    let eval = sohot(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.json")),
        "--features",
        s(&data),
        "--out",
        s(&report),
    ]);
    assert_eq!(code(&eval), 0, "{}", stderr(&eval));
    assert_eq!(
        printed_value(&stdout(&eval), "accuracy:"),
        printed_value(&stdout(&train), "final target accuracy:")
    );
    assert!(std::fs::read_to_string(report)
        .unwrap()
        .starts_with("split,accuracy\ntarget-test,"));
}

#[test]
fn gradcheck_default_passes() {
    let out = sohot(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    for order in 2..=4 {
        let row = format!("kernel_r{order},");
        assert_eq!(text.lines().filter(|l| l.starts_with(&row)).count(), 1, "{text}");
    }
    assert!(text.lines().skip(1).all(|l| l.ends_with(",pass")));
}

#[test]
fn gradcheck_with_zero_tolerance_fails() {
    let out = sohot(&["gradcheck", "--tol", "0", "--instances", "2", "--orders", "2"]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains(",fail"));
}

#[test]
fn equiv_defaults_pass() {
    let out = sohot(&["equiv"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).lines().any(|l| l == "PASS"));
}

#[test]
fn equiv_rejects_infeasible_and_empty_runs() {
    let huge = sohot(&["equiv", "--dims", "4096", "--orders", "3"]);
    assert_eq!(code(&huge), 2);
    let msg = stderr(&huge);
    assert!(
        msg.contains("capacity exceeded") && msg.contains("11461636096"),
        "{msg}"
    );
    assert_eq!(code(&sohot(&["equiv", "--trials", "0"])), 2);
}

#[test]
fn bench_smoke_writes_two_rows() {
    let dir = Scratch::new("bench");
    let csv = dir.path("bench.csv");
    let out = sohot(&[
        "bench",
        "--dims",
        "2",
        "--n-src",
        "2",
        "--n-tgt",
        "2",
        "--orders",
        "2",
        "--reps",
        "1",
        "--out",
        s(&csv),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "mode,d,N,N*,r,wall_ns,predicted_ops");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("explicit,2,2,2,2,"));
    assert!(lines[2].starts_with("kernelized,2,2,2,2,"));
}

#[test]
fn replaying_manifests_reproduces_outputs() {
    let dir = Scratch::new("replay");
    let data = gen(&dir, "d.csv", &["--seed", "12", "--n-test", "20"]);
    let original = std::fs::read(&data).unwrap();
    std::fs::remove_file(&data).unwrap();
    let replay = sohot(&["replay", "--manifest", s(&dir.path("d.csv.manifest.json"))]);
    assert_eq!(code(&replay), 0, "{}", stderr(&replay));
    assert_eq!(std::fs::read(&data).unwrap(), original);

    let run = dir.path("run");
    let train = sohot(&[
        "train",
        "--features",
        s(&data),
        "--out",
        s(&run),
        "--epochs",
        "3",
        "--weighted",
    ]);
    assert_eq!(code(&train), 0, "{}", stderr(&train));
    let files = ["checkpoint.json", "metrics.csv"];
    let before: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(run.join(f)).unwrap()).collect();
    let manifest = manifest_without_timing(&run.join("manifest.json"));
    let again = sohot(&["replay", "--manifest", s(&run.join("manifest.json"))]);
    assert_eq!(code(&again), 0, "{}", stderr(&again));
    assert_eq!(stdout(&again), stdout(&train));
    for (f, bytes) in files.iter().zip(&before) {
        assert_eq!(&std::fs::read(run.join(f)).unwrap(), bytes, "{f}");
    }
    assert_eq!(manifest_without_timing(&run.join("manifest.json")), manifest);
}
