use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_contour-marl");

const TINY: &str = "\
# small enough for a quick end-to-end run
seed = 3
epochs = 1
n_points = 16
horizon = 3
batch_size = 8
batch_groups = 2
hidden = 4
layers = 1
window = 2
head_hidden = 8
critic_hidden = 8
embed_dim = 4
";

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("CONTOUR_MARL_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn corpus(dir: &Path, count: &str) -> PathBuf {
    let out = dir.join("corpus");
    let o = run(&["gen", "--count", count, "--size", "32", "--seed", "7", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("tiny.cfg");
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn train(corpus: &Path, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", s(cfg), "--corpus", s(corpus), "--out", s(out)];
    args.extend_from_slice(extra);
    run(&args)
}

fn log_epochs(out: &Path) -> Vec<String> {
    fs::read_to_string(out.join("train_log.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect()
}

#[test]
fn gen_prints_manifest_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["gen", "--count", "12", "--size", "32", "--seed", "7", "--out", s(out)]);
        assert_eq!(code(&o), 0);
        assert!(String::from_utf8_lossy(&o.stdout).contains("manifest.csv"));
    }
    let ma = fs::read(a.join("manifest.csv")).unwrap();
    assert_eq!(ma, fs::read(b.join("manifest.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&ma).lines().count(), 13);
}

#[test]
fn bad_arguments_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    assert_eq!(code(&run(&["gen", "--count", "0", "--out", s(&out)])), 2);
    assert_eq!(code(&run(&["gen", "--count", "5", "--size", "8", "--out", s(&out)])), 2);
    assert_eq!(code(&run(&["train", "--bogus"])), 2);
    assert_eq!(code(&run(&["nonsense"])), 2);
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), "10");
    let cfg = config(dir.path(), "warp_speed = 9\n");
    assert_eq!(code(&train(&c, &cfg, &dir.path().join("run"), &[])), 2);
}

#[test]
fn missing_corpus_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let o = train(&dir.path().join("absent"), &cfg, &dir.path().join("run"), &[]);
    assert_eq!(code(&o), 3);
}

#[test]
fn zero_epochs_writes_initial_checkpoint_and_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), "10");
    let cfg = config(dir.path(), "");
    let out = dir.path().join("run");
    assert_eq!(code(&train(&c, &cfg, &out, &["--epochs", "0"])), 0);
    assert!(out.join("checkpoint_0000.bin").exists());
    assert!(log_epochs(&out).is_empty());
    assert!(out.join("config.cfg").exists());
    assert!(out.join("run_info.txt").exists());
}

#[test]
fn zero_lr_keeps_checkpoint_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), "10");
    let cfg = config(dir.path(), "");
    let out = dir.path().join("run");
    assert_eq!(code(&train(&c, &cfg, &out, &["--lr", "0"])), 0);
    let a = fs::read(out.join("checkpoint_0000.bin")).unwrap();
    assert_eq!(a, fs::read(out.join("checkpoint_0001.bin")).unwrap());
}

#[test]
fn resume_continues_without_duplicate_rows() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), "10");
    let cfg = config(dir.path(), "");
    let out = dir.path().join("run");
    assert_eq!(code(&train(&c, &cfg, &out, &["--epochs", "1"])), 0);
    assert_eq!(log_epochs(&out), ["1"]);
    assert_eq!(code(&train(&c, &cfg, &out, &["--epochs", "3", "--resume"])), 0);
    assert_eq!(log_epochs(&out), ["1", "2", "3"]);
    assert!(out.join("checkpoint_0003.bin").exists());
}

#[test]
fn resolved_config_replays_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), "10");
    let cfg = config(dir.path(), "");
    let first = dir.path().join("first");
    assert_eq!(code(&train(&c, &cfg, &first, &["--lr", "3e-4", "--set", "tau=0.02"])), 0);
    let echoed = first.join("config.cfg");
    let second = dir.path().join("second");
    assert_eq!(code(&train(&c, &echoed, &second, &[])), 0);
    for f in ["checkpoint_0001.bin", "train_log.csv", "episodes.csv", "config.cfg"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), "10");
    let cfg = config(dir.path(), "");
    let out = dir.path().join("run");
    let o = Command::new(BIN)
        .args(["train", "--config", s(&cfg), "--corpus", s(&c), "--out", s(&out), "--epochs", "0"])
        .env("CONTOUR_MARL_SEED", "41")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(out.join("config.cfg")).unwrap();
    assert!(text.lines().any(|l| l.replace(' ', "") == "seed=41"), "{text}");
}

fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let c = corpus(dir, "10");
    let cfg = config(dir, "");
    let out = dir.join("run");
    assert_eq!(code(&train(&c, &cfg, &out, &[])), 0);
    (c, out.join("checkpoint_0001.bin"))
}

#[test]
fn eval_is_repeatable_and_zero_perturbation_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let (c, ck) = trained(dir.path());
    let eval = |name: &str, extra: &[&str]| {
        let p = dir.path().join(name);
        let mut args = vec!["eval", "--checkpoint", s(&ck), "--corpus", s(&c), "--out", s(&p)];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("policy,"));
        fs::read(p).unwrap()
    };
    let a = eval("a.csv", &[]);
    assert_eq!(a, eval("b.csv", &[]));
    assert_eq!(a, eval("c.csv", &["--shift-frac", "0", "--scale-frac", "0"]));
    assert_ne!(a, eval("d.csv", &["--shift-frac", "0.2", "--scale-frac", "0.2"]));
}

#[test]
fn trace_has_one_polyline_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let (c, ck) = trained(dir.path());
    let tr = dir.path().join("trace");
    let o = run(&["eval", "--checkpoint", s(&ck), "--corpus", s(&c), "-T", "5", "--trace", s(&tr)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let svgs: Vec<PathBuf> = fs::read_dir(&tr)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "svg"))
        .collect();
    assert!(!svgs.is_empty());
    for p in svgs {
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.matches("<polyline").count(), 5);
        let csv = fs::read_to_string(p.with_extension("csv")).unwrap();
        assert_eq!(csv.lines().count(), 6);
    }
}

#[test]
fn mismatched_checkpoint_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let (c, ck) = trained(dir.path());
    let cfg = ck.parent().unwrap().join("config.cfg");
    let text = fs::read_to_string(&cfg).unwrap();
    let changed: String = text
        .lines()
        .map(|l| if l.starts_with("critic_hidden") { "critic_hidden = 12".to_string() } else { l.to_string() })
        .collect::<Vec<_>>()
        .join("\n");
    fs::write(&cfg, changed).unwrap();
    assert_eq!(code(&run(&["eval", "--checkpoint", s(&ck), "--corpus", s(&c)])), 5);
}

#[test]
fn sweep_emits_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let (c, ck) = trained(dir.path());
    let out = dir.path().join("sweep.csv");
    let o = run(&["sweep", "--checkpoint", s(&ck), "--corpus", s(&c), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 5);
    assert!(text.lines().any(|l| l.starts_with("128,7,")));
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let o = run(&["gradcheck", "--trials", "2"]);
    let out = String::from_utf8_lossy(&o.stdout).to_string();
    assert_eq!(code(&o), 0, "{out}");
    assert_eq!(out.lines().filter(|l| l.ends_with(",pass")).count(), 9);

    let o = run(&["gradcheck", "--trials", "2", "--corrupt-op", "scan"]);
    assert_eq!(code(&o), 6);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("ss2d_scan"), "{err}");
}
