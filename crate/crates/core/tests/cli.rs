//! End-to-end checks of the `opkernel` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use opkernel::checkpoint::Checkpoint;
use opkernel::cli::RunConfig;
use opkernel::data::{read_manifest, Degradation, SceneKind, Source};
use opkernel::pgm::read_pgm;

fn opkernel(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opkernel"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset.source = Source::Synth {
        scene: SceneKind::Shapes,
        count: 6,
        rows: 12,
        cols: 12,
        seed: 5,
    };
    cfg.dataset.degradation = Degradation::Disc { rho: 1 };
    cfg.train.max_iter = 4;
    cfg.restarts = 5;
    cfg
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    assert!(text.ends_with("\r\n"), "{} lacks CRLF", path.display());
    text.split("\r\n")
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn gradcheck_exit_codes_and_mode_filter() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &RunConfig::default());
    let out = dir.path().join("out");

    let ok = opkernel(&["gradcheck"], &config, &out);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS"));

    let bad = opkernel(&["gradcheck", "--corrupt"], &config, &out);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));

    let learnable = opkernel(&["gradcheck", "--modes", "learnable"], &config, &out);
    assert_eq!(learnable.status.code(), Some(0));
    let rows = read_csv(&out.join("gradcheck/gradcheck.csv"));
    assert_eq!(rows[0][0], "mode");
    assert!(rows.len() > 1);
    assert!(rows[1..].iter().all(|r| r[0] == "learnable"));
    assert!(rows[1..].iter().any(|r| r[5] == "alpha"));
}

#[test]
fn config_errors_name_the_field_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    fs::write(&config, "{\n  \"train\": {\n    \"max_iter\": 5,\n    \"learning_rate\": 0.1\n  }\n}\n").unwrap();
    let out = opkernel(&["train"], &config, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rate") && err.contains("line 4"), "{err}");

    let missing = opkernel(&["poc"], &dir.path().join("none.json"), &dir.path().join("out"));
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("none.json"));
}

#[test]
fn synth_writes_disc5_pairs_and_a_parsable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.dataset.source = Source::Synth {
        scene: SceneKind::Natural,
        count: 2,
        rows: 60,
        cols: 60,
        seed: 1,
    };
    cfg.dataset.degradation = Degradation::Disc { rho: 5 };
    let config = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");
    assert!(opkernel(&["synth"], &config, &out).status.success());
    let input = read_pgm(&out.join("synth/pair_000_input.pgm")).unwrap();
    let target = read_pgm(&out.join("synth/pair_000_target.pgm")).unwrap();
    assert_eq!((input.width, input.height), (60, 60));
    assert_ne!(input.pixels, target.pixels);
    let manifest = read_manifest(&out.join("synth/manifest.json")).unwrap();
    assert_eq!(manifest.pairs.len(), 2);
    assert_eq!(manifest.degradation, Degradation::Disc { rho: 5 });
    assert_eq!(manifest.source, cfg.dataset.source);

    // Training from the manifest sees the same data as the recipe.
    let mut from_manifest = cfg.clone();
    from_manifest.dataset.manifest = Some(out.join("synth/manifest.json"));
    assert_eq!(from_manifest.dataset.load().unwrap(), cfg.dataset.load().unwrap());

    let again = dir.path().join("again");
    assert!(opkernel(&["synth"], &config, &again).status.success());
    for name in ["manifest.json", "pair_001_input.pgm", "pair_001_target.pgm"] {
        assert_eq!(fs::read(out.join("synth").join(name)).unwrap(), fs::read(again.join("synth").join(name)).unwrap());
    }
}

#[test]
fn train_restarts_select_the_argmin_and_eval_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.dataset.folds = 2;
    cfg.eval_split = opkernel::cli::EvalSplit::Train;
    let config = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");
    let train = opkernel(&["train"], &config, &out);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));

    let traces: Vec<_> = fs::read_dir(out.join("train"))
        .unwrap()
        .filter_map(|e| {
            let name = e.unwrap().file_name().into_string().unwrap();
            name.starts_with("loss_restart_").then_some(name)
        })
        .collect();
    assert_eq!(traces.len(), 5);
    let trace = read_csv(&out.join("train/loss_restart_0.csv"));
    assert_eq!(trace[0], ["iteration", "loss", "snr_db"]);
    assert_eq!(trace.len(), 1 + 4);

    let summary = read_csv(&out.join("train/summary.csv"));
    let mses: Vec<f64> = summary[1..].iter().map(|r| r[5].parse().unwrap()).collect();
    let best = summary[1..].iter().position(|r| r[8] == "true").unwrap();
    assert!(mses.iter().all(|&m| m >= mses[best]));
    assert_eq!(summary[1..].iter().filter(|r| r[8] == "true").count(), 1);

    let ck = Checkpoint::load(&out.join("train/checkpoint.json")).unwrap();
    assert_eq!(ck.rng.seed, cfg.train.seed + best as u64);

    let eval = opkernel(&["eval"], &config, &out);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let agg = read_csv(&out.join("eval/aggregate.csv"));
    assert_eq!(agg[0], ["split", "count", "mse", "snr_db", "psnr_db", "peak"]);
    let eval_mse: f64 = agg[1][2].parse().unwrap();
    assert!((eval_mse - mses[best]).abs() < 1e-10, "{eval_mse} vs {}", mses[best]);
    let samples = read_csv(&out.join("eval/samples.csv"));
    assert_eq!(samples.len() - 1, 3);
    for row in &samples[1..] {
        assert!(out.join(format!("eval/output_{:03}.pgm", row[0].parse::<usize>().unwrap())).exists());
    }
}

#[test]
fn eval_reports_architecture_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.restarts = 1;
    let config = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");
    assert!(opkernel(&["train"], &config, &out).status.success());

    let mut other = cfg.clone();
    other.architecture[0].neurons = 3;
    other.architecture[2].gamma = 1;
    let other_path = dir.path().join("other.json");
    fs::write(&other_path, other.to_json()).unwrap();
    let eval = opkernel(&["eval"], &other_path, &out);
    assert_eq!(eval.status.code(), Some(2));
    let err = String::from_utf8_lossy(&eval.stderr);
    assert!(err.contains("layer 0 neurons: expected 3, found 4"), "{err}");
    assert!(err.contains("layer 2 gamma: expected 1, found 2"), "{err}");
}

#[test]
fn poc_writes_traces_kernels_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.poc.runs = 2;
    cfg.poc.rows = 24;
    cfg.poc.cols = 24;
    cfg.poc.gamma = 3;
    cfg.poc.max_iter = 25;
    cfg.poc.shifts = vec![(2, -1), (0, 3)];
    let config = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");
    let run = opkernel(&["poc"], &config, &out);
    assert!(run.status.success());
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.contains("shift ( 2,-1)") && stdout.contains("converged"), "{stdout}");

    let trace = read_csv(&out.join("poc/run_00_trace.csv"));
    assert_eq!(
        trace[0],
        ["iteration", "loss", "snr_db", "alpha_0", "beta_0", "alpha_1", "beta_1", "cum_alpha", "cum_beta"]
    );
    assert_eq!(trace[1][..3], ["0".to_string(), String::new(), String::new()]);
    assert_eq!(trace[1][7], "0");
    let last = trace.last().unwrap();
    let cum: f64 = last[7].parse().unwrap();
    let parts: f64 = last[3].parse::<f64>().unwrap() + last[5].parse::<f64>().unwrap();
    assert_eq!(cum, parts);

    let summary = read_csv(&out.join("poc/summary.csv"));
    assert_eq!(summary.len(), 3);
    assert_eq!((summary[1][1].as_str(), summary[1][2].as_str()), ("2", "-1"));
    assert_eq!(read_csv(&out.join("poc/run_01_kernels.csv")).len(), 1 + 2 * 4);
    for suffix in ["input", "target", "output"] {
        let img = read_pgm(&out.join(format!("poc/run_01_{suffix}.pgm"))).unwrap();
        assert_eq!((img.width, img.height), (24, 24));
    }
}

#[test]
fn seed_override_changes_outputs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.restarts = 1;
    let config = write_config(dir.path(), &cfg);
    let run = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_opkernel"))
            .args(["train", "--seed", seed, "--restarts", "2", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(o.status.success());
        fs::read(out.join("train/checkpoint.json")).unwrap()
    };
    let a = run("3", "a");
    assert_eq!(a, run("3", "b"));
    assert_ne!(a, run("4", "c"));
    assert!(dir.path().join("a/train/loss_restart_1.csv").exists());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let default = RunConfig::load(&dir.join("default.json")).unwrap();
    assert_eq!(default, RunConfig::default());
    let quick = RunConfig::load(&dir.join("quick.json")).unwrap();
    assert_eq!(quick.architecture, default.architecture);
    assert!(quick.dataset.load().unwrap().len() == 6);
}
