//! Command implementations behind the `opkernel` binary. Each command reads a
//! strict JSON [`RunConfig`] and writes its artifacts below `output_dir`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{architecture_diff, Checkpoint, RngDescriptor};
use crate::data::{denormalize, write_dataset, DatasetSpec, SamplePair};
use crate::error::{Error, Result};
use crate::experiments::{run_poc, PocConfig, TrendConfig};
use crate::gradcheck::{run_suite, ParamKind, SuiteConfig};
use crate::layers::{BiasMode, LayerSpec};
use crate::pgm::write_pgm;
use crate::trainer::{evaluate, train_with_restarts, TrainConfig};

/// Factor applied to analytic kernel gradients by `gradcheck --corrupt`.
pub const CORRUPT_FACTOR: f64 = 1.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    #[default]
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub architecture: Vec<LayerSpec>,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    pub output_dir: PathBuf,
    pub restarts: usize,
    /// Checkpoint read by `eval`; defaults to `<output_dir>/train/checkpoint.json`.
    pub checkpoint: Option<PathBuf>,
    pub eval_split: EvalSplit,
    pub gradcheck: SuiteConfig,
    pub poc: PocConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let trend = TrendConfig::default();
        RunConfig {
            architecture: trend.architecture,
            train: trend.train,
            dataset: trend.dataset,
            output_dir: PathBuf::from("out"),
            restarts: trend.restarts,
            checkpoint: None,
            eval_split: EvalSplit::default(),
            gradcheck: SuiteConfig::default(),
            poc: PocConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    /// Replaces every seed: training, PoC, gradcheck and synthetic data.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub restarts: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::json(path, e))
    }

    /// Canonical pretty JSON with every field spelled out.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
            self.poc.seed = seed;
            self.gradcheck.seed = seed;
            if let crate::data::Source::Synth { seed: s, .. } = &mut self.dataset.source {
                *s = seed;
            }
            if let crate::data::Degradation::Shift { seed: s, .. } = &mut self.dataset.degradation {
                *s = seed;
            }
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        if let Some(r) = o.restarts {
            self.restarts = r;
        }
    }

    fn subdir(&self, name: &str) -> Result<PathBuf> {
        let dir = self.output_dir.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }
}

/// Parses a mode name; `generative` is accepted for `none`.
pub fn parse_mode(s: &str) -> std::result::Result<BiasMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "none" | "generative" => Ok(BiasMode::None),
        "random" => Ok(BiasMode::Random),
        "learnable" => Ok(BiasMode::Learnable),
        _ => Err(format!("unknown bias mode {s:?} (none, random, learnable)")),
    }
}

pub fn mode_name(mode: BiasMode) -> &'static str {
    match mode {
        BiasMode::None => "none",
        BiasMode::Random => "random",
        BiasMode::Learnable => "learnable",
    }
}

/// Sizes the global rayon pool from `OPKERNEL_THREADS` (unset or 0 = auto).
pub fn configure_threads(value: Option<&str>) -> Result<()> {
    let n = match value.map(str::trim).filter(|v| !v.is_empty()) {
        None => 0,
        Some(v) => v
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("OPKERNEL_THREADS must be a non-negative integer, got {v:?}")))?,
    };
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// RFC 4180 CSV with CRLF line endings.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::Precondition(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(to_err)?;
    for row in rows {
        w.write_record(row).map_err(to_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Precondition(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// What a command prints and how the process should exit.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub exit_code: i32,
    pub summary: String,
}

impl Outcome {
    fn ok(summary: String) -> Self {
        Outcome { exit_code: 0, summary }
    }
}

fn param_name(kind: ParamKind) -> String {
    match kind {
        ParamKind::Kernel { r, t, q } => format!("kernel[{r},{t},{q}]"),
        ParamKind::AdditiveBias => "additive_bias".into(),
        ParamKind::Alpha => "alpha".into(),
        ParamKind::Beta => "beta".into(),
    }
}

/// Exit code 0 iff every checked sensitivity is within tolerance.
///
/// Writes `gradcheck.csv`: `mode,network,layer,neuron,input,parameter,analytic,numeric,rel_error,tolerance,status`,
/// where skipped spatial biases have status `skipped` and empty numbers.
pub fn cmd_gradcheck(cfg: &RunConfig, modes: &[BiasMode], corrupt: bool) -> Result<Outcome> {
    let modes = if modes.is_empty() { &crate::experiments::MODES[..] } else { modes };
    let results = run_suite(&cfg.gradcheck, modes, corrupt.then_some(CORRUPT_FACTOR))?;
    let dir = cfg.subdir("gradcheck")?;
    let mut rows = Vec::new();
    let mut text = format!(
        "{:<10} {:>7} {:>8} {:>8} {:>11}  {}\n",
        "mode", "network", "checked", "skipped", "max_rel", "status"
    );
    let mut all_passed = true;
    let (mut checked, mut failed) = (0, 0);
    for (mode, index, report) in &results {
        let passed = report.passed();
        all_passed &= passed;
        checked += report.entries.len();
        failed += report.failures().count();
        text.push_str(&format!(
            "{:<10} {:>7} {:>8} {:>8} {:>11.3e}  {}\n",
            mode_name(*mode),
            index,
            report.entries.len(),
            report.skipped.len(),
            report.max_rel_error(),
            if passed { "ok" } else { "FAIL" }
        ));
        for e in &report.entries {
            let h = e.handle;
            rows.push(vec![
                mode_name(*mode).into(),
                index.to_string(),
                h.layer.to_string(),
                h.neuron.to_string(),
                h.input.to_string(),
                param_name(h.kind),
                num(e.analytic),
                num(e.numeric),
                num(e.rel_error),
                num(e.tolerance),
                if e.passed { "ok" } else { "fail" }.into(),
            ]);
        }
        for (h, _) in &report.skipped {
            rows.push(vec![
                mode_name(*mode).into(),
                index.to_string(),
                h.layer.to_string(),
                h.neuron.to_string(),
                h.input.to_string(),
                param_name(h.kind),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                "skipped".into(),
            ]);
        }
    }
    write_csv(
        &dir.join("gradcheck.csv"),
        &["mode", "network", "layer", "neuron", "input", "parameter", "analytic", "numeric", "rel_error", "tolerance", "status"],
        &rows,
    )?;
    for (mode, index, report) in &results {
        if !report.passed() {
            text.push_str(&format!("\nfailures in {} network {index}:\n", mode_name(*mode)));
            for e in report.failures() {
                text.push_str(&format!(
                    "  {:<28} analytic {:.6e} numeric {:.6e} rel {:.2e}\n",
                    e.handle.to_string(),
                    e.analytic,
                    e.numeric,
                    e.rel_error
                ));
            }
        }
    }
    text.push_str(&format!(
        "{} networks, {checked} sensitivities, {failed} failed: {}\n",
        results.len(),
        if all_passed { "PASS" } else { "FAIL" }
    ));
    Ok(Outcome {
        exit_code: if all_passed { 0 } else { 1 },
        summary: text,
    })
}

/// Per run `r`: `run_RR_trace.csv`, `run_RR_kernels.csv` and input, target
/// and output PGMs; plus `summary.csv` over all runs.
///
/// Trace columns: `iteration,loss,snr_db,alpha_0,beta_0,alpha_1,beta_1,cum_alpha,cum_beta`.
/// Row 0 holds the initial biases with empty loss and SNR; row `t` holds
/// the loss and SNR measured during iteration `t` and the biases after it.
pub fn cmd_poc(cfg: &RunConfig) -> Result<Outcome> {
    let summary = run_poc(&cfg.poc)?;
    let dir = cfg.subdir("poc")?;
    let mut rows = Vec::new();
    for run in &summary.runs {
        let stem = format!("run_{:02}", run.run);
        let mut trace = Vec::new();
        if let Some(rep) = &run.report {
            for (t, biases) in rep.bias_trace.iter().enumerate() {
                let mut row = vec![t.to_string()];
                if t == 0 {
                    row.extend([String::new(), String::new()]);
                } else {
                    row.extend([num(rep.loss[t - 1]), num(rep.snr_db[t - 1])]);
                }
                let (mut ca, mut cb) = (0.0, 0.0);
                for &(a, b) in biases {
                    row.extend([num(a), num(b)]);
                    ca += a;
                    cb += b;
                }
                row.extend([num(ca), num(cb)]);
                trace.push(row);
            }
        }
        write_csv(
            &dir.join(format!("{stem}_trace.csv")),
            &["iteration", "loss", "snr_db", "alpha_0", "beta_0", "alpha_1", "beta_1", "cum_alpha", "cum_beta"],
            &trace,
        )?;
        let mut kernels = Vec::new();
        for (l, layer) in run.network.layers.iter().enumerate() {
            let k = &layer.connections[0][0].kernel;
            for r in 0..k.kx {
                for t in 0..k.ky {
                    for q in 1..=k.q {
                        kernels.push(vec![l.to_string(), r.to_string(), t.to_string(), q.to_string(), num(k.get(r, t, q))]);
                    }
                }
            }
        }
        write_csv(&dir.join(format!("{stem}_kernels.csv")), &["layer", "r", "t", "q", "value"], &kernels)?;
        write_pgm(&dir.join(format!("{stem}_input.pgm")), &denormalize(&run.pair.input))?;
        write_pgm(&dir.join(format!("{stem}_target.pgm")), &denormalize(&run.pair.target))?;
        let output = run.network.predict(std::slice::from_ref(&run.pair.input))?;
        write_pgm(&dir.join(format!("{stem}_output.pgm")), &denormalize(&output[0]))?;
        rows.push(vec![
            run.run.to_string(),
            run.shift.0.to_string(),
            run.shift.1.to_string(),
            run.report.as_ref().map_or(0, |r| r.iterations).to_string(),
            num(run.snr_db),
            num(run.cumulative.0),
            num(run.cumulative.1),
            num(run.bias_error.0),
            num(run.bias_error.1),
            num(run.effective_error.0),
            num(run.effective_error.1),
            run.converged.to_string(),
            run.within_tolerance.to_string(),
            run.error.clone().unwrap_or_default(),
        ]);
    }
    write_csv(
        &dir.join("summary.csv"),
        &[
            "run", "shift_a", "shift_b", "iterations", "snr_db", "cum_alpha", "cum_beta", "err_alpha", "err_beta",
            "kernel_adjusted_err_alpha", "kernel_adjusted_err_beta", "converged", "within_tolerance", "error",
        ],
        &rows,
    )?;
    let n = summary.runs.len();
    let mut text = String::new();
    for run in &summary.runs {
        text.push_str(&format!(
            "run {:>2}: shift ({:>2},{:>2}) snr {:>6.2} dB after {:>4} it, cumulative bias ({:>6.3},{:>6.3}), error ({:>6.3},{:>6.3}){}\n",
            run.run,
            run.shift.0,
            run.shift.1,
            run.snr_db,
            run.report.as_ref().map_or(0, |r| r.iterations),
            run.cumulative.0,
            run.cumulative.1,
            run.bias_error.0,
            run.bias_error.1,
            run.error.as_ref().map(|e| format!(" [{e}]")).unwrap_or_default()
        ));
    }
    text.push_str(&format!(
        "converged {}/{n} ({:.0}%), bias within {} px in {}/{} converged runs, worst |error| {:.3}\n",
        summary.converged,
        100.0 * summary.convergence_rate(),
        cfg.poc.bias_tolerance,
        summary.within_tolerance,
        summary.converged,
        summary.worst_bias_error()
    ));
    Ok(Outcome::ok(text))
}

/// Writes the paired PGMs and `manifest.json` into `<output_dir>/synth`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Outcome> {
    let dir = cfg.subdir("synth")?;
    let manifest = write_dataset(&cfg.dataset, &dir)?;
    Ok(Outcome::ok(format!(
        "wrote {} pairs and manifest.json to {}\n",
        manifest.pairs.len(),
        dir.display()
    )))
}

fn samples(cfg: &RunConfig) -> Result<Vec<SamplePair>> {
    Ok(cfg.dataset.load()?.iter().map(|p| p.to_sample()).collect())
}

/// Trains `restarts` runs on the training split. Writes `loss_restart_R.csv`
/// (`iteration,loss,snr_db`) per run, `summary.csv` and the checkpoint of
/// the run with the lowest final training MSE.
pub fn cmd_train(cfg: &RunConfig) -> Result<Outcome> {
    let data = samples(cfg)?;
    let (train_set, _) = cfg.dataset.split(&data)?;
    let res = train_with_restarts(1, &cfg.architecture, &train_set, &cfg.train, cfg.restarts)?;
    let dir = cfg.subdir("train")?;
    let mut rows = Vec::new();
    for (r, run) in res.runs.iter().enumerate() {
        let seed = cfg.train.seed.wrapping_add(r as u64);
        let mut trace = Vec::new();
        match run {
            Ok(rep) => {
                for (t, (loss, snr)) in rep.loss.iter().zip(&rep.snr_db).enumerate() {
                    trace.push(vec![(t + 1).to_string(), num(*loss), num(*snr)]);
                }
                let m = rep.final_metrics;
                rows.push(vec![
                    r.to_string(),
                    seed.to_string(),
                    "ok".into(),
                    rep.iterations.to_string(),
                    serde_json::to_value(rep.stop).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                    num(m.mse),
                    num(m.snr_db),
                    num(m.psnr_db),
                    (r == res.best).to_string(),
                ]);
            }
            Err(e) => rows.push(vec![
                r.to_string(),
                seed.to_string(),
                e.clone(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                "false".into(),
            ]),
        }
        write_csv(&dir.join(format!("loss_restart_{r}.csv")), &["iteration", "loss", "snr_db"], &trace)?;
    }
    write_csv(
        &dir.join("summary.csv"),
        &["restart", "seed", "status", "iterations", "stop", "train_mse", "train_snr_db", "train_psnr_db", "selected"],
        &rows,
    )?;
    let best = res.runs[res.best].as_ref().expect("selected run succeeded");
    let ck = Checkpoint::from_network(
        &res.network,
        best.iterations,
        RngDescriptor::chacha8(cfg.train.seed.wrapping_add(res.best as u64)),
    );
    let path = dir.join("checkpoint.json");
    ck.save(&path)?;
    Ok(Outcome::ok(format!(
        "{} samples, {} restarts; kept restart {} (train mse {}, psnr {:.3} dB); checkpoint {}\n",
        train_set.len(),
        res.runs.len(),
        res.best,
        best.final_metrics.mse,
        best.final_metrics.psnr_db,
        path.display()
    )))
}

/// Writes `samples.csv` (`index,mse,snr_db,psnr_db`), `aggregate.csv`
/// (`split,count,mse,snr_db,psnr_db,peak`) and `output_NNN.pgm` per sample,
/// where `NNN` is the index in the full dataset.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Outcome> {
    let path = cfg
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("train").join("checkpoint.json"));
    let ck = Checkpoint::load(&path)?;
    let diff = architecture_diff(1, &cfg.architecture, ck.input_channels, &ck.architecture);
    if !diff.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} does not match the configured architecture:\n  {}",
            path.display(),
            diff.join("\n  ")
        )));
    }
    let net = ck.to_network()?;
    let data = samples(cfg)?;
    let indices: Vec<usize> = (0..data.len()).collect();
    let (train_idx, test_idx) = cfg.dataset.split(&indices)?;
    let chosen = match cfg.eval_split {
        EvalSplit::Train => train_idx,
        EvalSplit::Test => test_idx,
        EvalSplit::All => indices,
    };
    if chosen.is_empty() {
        return Err(Error::Config(format!("the {:?} split is empty", cfg.eval_split)));
    }
    let subset: Vec<SamplePair> = chosen.iter().map(|&i| data[i].clone()).collect();
    let (summary, per_sample, preds) = evaluate(&net, &subset, cfg.train.psnr_peak)?;
    let dir = cfg.subdir("eval")?;
    let mut rows = Vec::new();
    for ((&i, m), pred) in chosen.iter().zip(&per_sample).zip(&preds) {
        rows.push(vec![i.to_string(), num(m.mse), num(m.snr_db), num(m.psnr_db)]);
        write_pgm(&dir.join(format!("output_{i:03}.pgm")), &denormalize(pred))?;
    }
    write_csv(&dir.join("samples.csv"), &["index", "mse", "snr_db", "psnr_db"], &rows)?;
    let split = serde_json::to_value(cfg.eval_split)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default();
    write_csv(
        &dir.join("aggregate.csv"),
        &["split", "count", "mse", "snr_db", "psnr_db", "peak"],
        &[vec![
            split.clone(),
            summary.count.to_string(),
            num(summary.mse),
            num(summary.snr_db),
            num(summary.psnr_db),
            num(summary.peak),
        ]],
    )?;
    Ok(Outcome::ok(format!(
        "{split} split: {} samples, mse {}, snr {:.3} dB, psnr {:.3} dB\n",
        summary.count, summary.mse, summary.snr_db, summary.psnr_db
    )))
}
