use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dam(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dam")).arg("--run-dir").arg(run_dir).args(args).output().expect("dam binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    o
}

/// Small enough to train in seconds: 2 classes, T=20, 32 points.
const TINY: &str = "\
run.profile = toy
data.classes = 2
data.per_class = 6
data.test_per_class = 3
data.n_points = 32
schedule.steps = 20
classifier.epochs = 2
noised.epochs = 1
diffusion.iterations = 30
diffusion.save_every = 10
diffusion.train_points = 0
explain.n_points = 32
explain.count = 2
explain.state_stride = 5
saliency.stride = 5
saliency.steps = 16
eval.references = 2
";

fn tiny_run() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.conf");
    fs::write(&cfg, TINY).unwrap();
    ok(dam(dir.path(), &["--config", cfg.to_str().unwrap(), "gen-data", "--toy"]));
    dir
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&dam(dir.path(), &["gen-data", "--n", "0"])), 2);
    assert_eq!(code(&dam(dir.path(), &["--set", "nosuch.key=1", "gen-data"])), 2);
    assert_eq!(code(&dam(dir.path(), &["--profile", "huge", "gen-data"])), 2);
    assert_eq!(code(&dam(dir.path(), &["gen-data", "--classes", "9"])), 2);
    assert_eq!(code(&dam(dir.path(), &["frobnicate"])), 2);
    // a rejected command leaves no config behind
    assert!(!dir.path().join("config.resolved").exists());
}

#[test]
fn missing_dependencies_exit_3_and_name_the_command() {
    let dir = tempfile::tempdir().unwrap();
    let o = dam(dir.path(), &["train", "classifier"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("dam gen-data"), "{}", stderr(&o));
    let dir = tiny_run();
    let o = dam(dir.path(), &["train", "noised-classifier"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("dam train classifier"), "{}", stderr(&o));
    let o = dam(dir.path(), &["plot", "--saliency"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("_tNNN.ply"), "{}", stderr(&o));
}

#[test]
fn gen_data_is_reproducible() {
    let a = tiny_run();
    let b = tiny_run();
    for f in ["train.dam", "test.dam", "summary.json"] {
        assert_eq!(fs::read(a.path().join("data").join(f)).unwrap(), fs::read(b.path().join("data").join(f)).unwrap(), "{f}");
    }
    let resolved = fs::read_to_string(a.path().join("config.resolved")).unwrap();
    assert!(resolved.contains("schedule.steps = 20"));
    assert!(resolved.contains("run.profile = toy"));
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let a = tiny_run();
    let b = tiny_run();
    ok(dam(a.path(), &["train", "diffusion"]));
    ok(dam(b.path(), &["train", "diffusion", "--stop-after", "10"]));
    assert!(!b.path().join("checkpoints/diffusion.json").exists());
    ok(dam(b.path(), &["train", "diffusion", "--resume"]));
    assert_eq!(fs::read(a.path().join("checkpoints/diffusion.json")).unwrap(), fs::read(b.path().join("checkpoints/diffusion.json")).unwrap());
}

#[test]
fn full_pipeline_with_replay() {
    let dir = tiny_run();
    let p = dir.path();
    ok(dam(p, &["train", "classifier"]));
    ok(dam(p, &["train", "noised-classifier"]));
    ok(dam(p, &["train", "diffusion"]));
    ok(dam(p, &["explain"]));
    let manifest = fs::read_to_string(p.join("explanations/manifest.json")).unwrap();
    assert!(manifest.contains("dam-run-manifest-v1"));
    let plys: Vec<_> = fs::read_dir(p.join("explanations")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ply")).collect();
    assert_eq!(plys.len(), 4);
    let o = ok(dam(p, &["explain", "--replay"]));
    assert!(stdout(&o).contains("4 explanations bitwise identical"), "{}", stdout(&o));

    // stride must be a multiple of the stored state stride
    assert_eq!(code(&dam(p, &["saliency", "--stride", "7"])), 2);
    assert_eq!(code(&dam(p, &["saliency", "--stride", "50"])), 2);
    for m in ["igd", "ig", "random"] {
        ok(dam(p, &["saliency", "--method", m]));
    }
    // levels 15, 10, 5 and 0 for T=20 at stride 5
    let maps = fs::read_dir(p.join("saliency/igd")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ply")).count();
    assert_eq!(maps, 4 * 4);
    assert!(p.join("saliency/igd/b00_c0_000_t015.csv").exists());

    ok(dam(p, &["eval", "--faithfulness"]));
    let first = fs::read(p.join("reports/metrics.json")).unwrap();
    ok(dam(p, &["eval", "--faithfulness"]));
    assert_eq!(first, fs::read(p.join("reports/metrics.json")).unwrap());
    let table = fs::read_to_string(p.join("reports/attribution.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);

    ok(dam(p, &["plot"]));
    ok(dam(p, &["plot", "--saliency", "--method", "igd"]));
    assert!(p.join("reports/plots/saliency/igd/b00_c1_001_t000.svg").exists());
}

#[test]
fn numeric_failure_exits_4() {
    let dir = tiny_run();
    let p = dir.path();
    ok(dam(p, &["train", "classifier"]));
    ok(dam(p, &["train", "noised-classifier"]));
    ok(dam(p, &["train", "diffusion"]));
    let o = dam(p, &["explain", "--count", "1", "--scale", "1.7e308"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}
