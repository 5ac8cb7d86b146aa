use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use hprompt_core::harness::run::{read_json, ACC_FILE, CONFIG_FILE, METRICS_FILE, PREDICTIONS_FILE};
use hprompt_core::harness::report::REPORT_CSV_HEADER;
use hprompt_core::harness::{report_rows_from_csv, ExperimentConfig, Preset};
use hprompt_core::metrics::{AccuracyMatrix, MetricsSummary};
use hprompt_core::trainer::Mode;
use tempfile::TempDir;

fn hprompt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hprompt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn hprompt")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// A config small enough to train in a second or two.
fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::preset(Preset::Desk);
    c.name = "tiny".into();
    let hprompt_core::harness::DataSource::Synthetic(s) = &mut c.data else { panic!("desk is synthetic") };
    s.tasks = 2;
    s.train_per_class = 8;
    s.test_per_class = 4;
    s.pretrain_classes = 4;
    s.pretrain_train_per_class = 8;
    s.pretrain_test_per_class = 4;
    s.side = 8;
    c.backbone.image_side = 8;
    c.backbone.dim = 16;
    c.backbone.depth = 2;
    c.backbone.heads = 2;
    c.pretrain.epochs = 1;
    c.prompts.task_len = 2;
    c.train.gke_epochs = 1;
    c.train.max_epochs = 2;
    c.train.batch_size = 8;
    c.train.o_per_class = 1;
    c.train.diagnostic_samples_per_class = 4;
    c
}

struct Fixture {
    _tmp: TempDir,
    config: PathBuf,
    hprompts: PathBuf,
    ftseq: PathBuf,
}

// Runs shared by the read-only tests; tests that modify a run copy it first.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let tmp = TempDir::new().unwrap();
        let config = tmp.path().join("tiny.json");
        fs::write(&config, tiny_config().to_json().unwrap()).unwrap();
        let train = |mode: &str| {
            let out = tmp.path().join(mode);
            let o = hprompt(&["train", "--config", config.to_str().unwrap(), "--mode", mode, "--out", out.to_str().unwrap()]);
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
            out
        };
        let hprompts = train("hprompts");
        let ftseq = train("ftseq");
        Fixture { config, hprompts, ftseq, _tmp: tmp }
    })
}

fn copy_run(src: &Path, dst: &Path) {
    fs::create_dir_all(dst).unwrap();
    for e in fs::read_dir(src).unwrap() {
        let p = e.unwrap().path();
        let target = dst.join(p.file_name().unwrap());
        if p.is_dir() {
            copy_run(&p, &target);
        } else {
            fs::copy(&p, &target).unwrap();
        }
    }
}

fn has_task_dirs(dir: &Path) -> bool {
    fs::read_dir(dir).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().starts_with("task"))
}

#[test]
fn ftseq_stores_no_prompts() {
    let f = fixture();
    assert!(!has_task_dirs(&f.ftseq));
    assert!(has_task_dirs(&f.hprompts));
    let cfg: ExperimentConfig = read_json(&f.ftseq.join(CONFIG_FILE)).unwrap();
    assert_eq!(cfg.train.mode, Mode::Ftseq);
}

#[test]
fn eval_reproduces_training_and_is_idempotent() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    copy_run(&fixture().hprompts, &run);
    let before = fs::read(run.join(METRICS_FILE)).unwrap();
    for _ in 0..2 {
        let s = hprompt_core::harness::eval(&run, false).unwrap();
        assert!(s.reproduces_stored);
        assert_eq!(fs::read(run.join(METRICS_FILE)).unwrap(), before);
    }
    let o = hprompt(&["verify", "--run", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
}

#[test]
fn oracle_task_identity_does_not_lose_accuracy() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    copy_run(&fixture().hprompts, &run);
    let predicted: MetricsSummary = read_json(&run.join(METRICS_FILE)).unwrap();
    let o = hprompt(&["eval", "--run", run.to_str().unwrap(), "--oracle-task-id"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let oracle: MetricsSummary = serde_json::from_slice(&o.stdout).unwrap();
    assert!(oracle.average_accuracy >= predicted.average_accuracy, "{oracle:?} vs {predicted:?}");
}

#[test]
fn predictions_cover_every_test_image() {
    let f = fixture();
    let cfg = tiny_config();
    let bench = cfg.benchmark(0).unwrap();
    let total: usize = bench.tasks.iter().map(|t| t.test.len()).sum();
    for dir in [&f.hprompts, &f.ftseq] {
        let text = fs::read_to_string(dir.join(PREDICTIONS_FILE)).unwrap();
        assert_eq!(text.lines().count(), total + 1);
    }
    let acc: AccuracyMatrix = read_json(&f.hprompts.join(ACC_FILE)).unwrap();
    assert_eq!(acc.rows.len(), bench.tasks.len());
}

#[test]
fn report_csv_round_trips() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("report.csv");
    let o = hprompt(&[
        "report",
        "--runs",
        f.hprompts.to_str().unwrap(),
        f.ftseq.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some(REPORT_CSV_HEADER));
    let rows = report_rows_from_csv(&text).unwrap();
    let direct = hprompt_core::harness::report_runs(&[f.hprompts.clone(), f.ftseq.clone()]).unwrap();
    assert_eq!(rows, direct.rows);
}

#[test]
fn single_run_gives_single_row_with_zero_spread() {
    let r = hprompt_core::harness::report_runs(&[fixture().hprompts.clone()]).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.rows[0].runs, 1);
    assert_eq!(r.rows[0].average_accuracy.std, 0.0);
    assert!(r.violations.is_empty());
}

#[test]
fn config_errors_exit_one() {
    let f = fixture();
    assert_eq!(code(&hprompt(&["train", "--preset", "nope", "--out", "/tmp/unused-hprompt"])), 1);
    assert_eq!(code(&hprompt(&["train", "--mode", "bogus", "--out", "/tmp/unused-hprompt"])), 1);
    assert_eq!(code(&hprompt(&["frobnicate"])), 1);

    // occupied output directory without --force
    let o = hprompt(&["train", "--config", f.config.to_str().unwrap(), "--out", f.hprompts.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));

    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.json");
    let mut c = tiny_config();
    c.train.gke_epochs = c.train.max_epochs + 1;
    fs::write(&bad, serde_json::to_string(&c).unwrap()).unwrap();
    let o = hprompt(&["train", "--config", bad.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));

    let o = Command::new(env!("CARGO_BIN_EXE_hprompt"))
        .args(["config"])
        .env("HPROMPT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn check_failures_exit_three() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();

    // an ftseq run relabelled as hprompts ties ftseq with itself, which the
    // strict ordering rejects
    let fake = tmp.path().join("fake");
    copy_run(&f.ftseq, &fake);
    let mut cfg: ExperimentConfig = read_json(&fake.join(CONFIG_FILE)).unwrap();
    cfg.train.mode = Mode::Hprompts;
    fs::write(fake.join(CONFIG_FILE), cfg.to_json().unwrap()).unwrap();
    let args = ["report", "--runs", f.ftseq.to_str().unwrap(), fake.to_str().unwrap()];
    assert_eq!(code(&hprompt(&args)), 0);
    let mut strict = args.to_vec();
    strict.push("--strict");
    let o = hprompt(&strict);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stdout));

    // the relabelled config no longer matches its checksum
    let o = hprompt(&["verify", "--run", fake.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains(CONFIG_FILE));
    assert!(hprompt_core::harness::eval(&fake, false).is_err());
}

#[test]
fn gradcheck_passes_and_names_every_check() {
    let o = hprompt(&["gradcheck", "--instances", "2"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for name in hprompt_core::harness::check_names() {
        assert!(text.lines().any(|l| l.starts_with("PASS") && l.contains(name)), "{name}");
    }
}

#[test]
fn config_prints_parseable_presets() {
    for p in ["desk", "paper-cifar", "paper-imagenet-r"] {
        let o = hprompt(&["config", "--preset", p]);
        assert_eq!(code(&o), 0, "{p}");
        let c: ExperimentConfig = serde_json::from_slice(&o.stdout).unwrap();
        c.validate().unwrap();
    }
}
