//! Seeded experiment drivers: the shift-recovery proof of concept and the
//! desk-scale deblurring comparison of the three neuron modes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_pairs, make_shift_pair, normalize, partition, random_shift, sample_rng, synth_image, DatasetSpec,
    Degradation, SamplePair, SceneKind, Source,
};
use crate::error::{Error, Result};
use crate::layers::{Activation, BiasMode, LayerSpec, Network, Resample};
use crate::metrics::{psnr_db, MetricSummary};
use crate::trainer::{evaluate, init_network, train, train_with_restarts, BiasInit, TrainConfig, TrainReport};

/// Shift recovery with two learnable single-neuron layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PocConfig {
    pub runs: usize,
    pub rows: usize,
    pub cols: usize,
    pub gamma: u32,
    pub kernel: usize,
    pub scene: SceneKind,
    pub seed: u64,
    pub max_iter: usize,
    pub lr_weights: f64,
    pub lr_bias: f64,
    pub weight_init_range: f64,
    pub target_snr_db: f64,
    /// Allowed per-axis distance between cumulative bias and true shift.
    pub bias_tolerance: f64,
    /// Fixed `(a, b)` shifts, one per run; random when empty.
    pub shifts: Vec<(i64, i64)>,
}

impl Default for PocConfig {
    fn default() -> Self {
        PocConfig {
            runs: 20,
            rows: 60,
            cols: 60,
            gamma: 8,
            kernel: 2,
            scene: SceneKind::Blobs,
            seed: 100,
            max_iter: 2000,
            lr_weights: 0.1,
            lr_bias: 10.0,
            weight_init_range: 0.1,
            target_snr_db: 35.0,
            bias_tolerance: 1.0,
            shifts: Vec::new(),
        }
    }
}

impl PocConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 || self.rows == 0 || self.cols == 0 || self.kernel == 0 {
            return Err(Error::Config("poc sizes must be positive".into()));
        }
        if !self.shifts.is_empty() && self.shifts.len() != self.runs {
            return Err(Error::Config(format!(
                "{} shifts given for {} runs",
                self.shifts.len(),
                self.runs
            )));
        }
        let g = self.gamma as i64;
        if self.shifts.iter().any(|&(a, b)| a.abs() > g || b.abs() > g) {
            return Err(Error::Config("shift outside [-gamma, gamma]".into()));
        }
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_iter: self.max_iter,
            min_mse: 0.0,
            weight_init_range: self.weight_init_range,
            lr_weights: self.lr_weights,
            lr_bias: self.lr_bias,
            bias_init: BiasInit::Zero,
            stop_snr_db: Some(self.target_snr_db),
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn architecture(&self) -> Vec<LayerSpec> {
        let spec = LayerSpec::new(1, self.kernel, 1, BiasMode::Learnable, self.gamma)
            .with_activation(Activation::Identity);
        vec![spec.clone(), spec]
    }
}

#[derive(Debug, Clone)]
pub struct PocRun {
    pub run: usize,
    pub shift: (i64, i64),
    pub pair: SamplePair,
    pub network: Network,
    /// `None` when training diverged.
    pub report: Option<TrainReport>,
    pub error: Option<String>,
    /// Sum of `(alpha, beta)` over both layers.
    pub cumulative: (f64, f64),
    /// `cumulative - shift`.
    pub bias_error: (f64, f64),
    /// `bias_error` plus the centroid offsets of the learned kernels.
    pub effective_error: (f64, f64),
    pub snr_db: f64,
    pub converged: bool,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone)]
pub struct PocSummary {
    pub runs: Vec<PocRun>,
    pub converged: usize,
    /// Converged runs whose cumulative bias is within tolerance.
    pub within_tolerance: usize,
}

impl PocSummary {
    pub fn convergence_rate(&self) -> f64 {
        self.converged as f64 / self.runs.len().max(1) as f64
    }

    /// Largest per-axis bias error over converged runs; NaN when none converged.
    pub fn worst_bias_error(&self) -> f64 {
        self.runs
            .iter()
            .filter(|r| r.converged)
            .map(|r| r.bias_error.0.abs().max(r.bias_error.1.abs()))
            .fold(f64::NAN, f64::max)
    }
}

/// Offset of the q=1 weight centroid from the kernel anchor.
fn kernel_centroid(net: &Network) -> (f64, f64) {
    let mut total = (0.0, 0.0);
    for layer in &net.layers {
        let (ax, ay) = layer.spec.anchor();
        let k = &layer.connections[0][0].kernel;
        let w = k.sub_kernel(1);
        let mass = w.sum();
        if mass.abs() < 1e-12 {
            continue;
        }
        let (mut r_sum, mut t_sum) = (0.0, 0.0);
        for r in 0..k.kx {
            for t in 0..k.ky {
                r_sum += r as f64 * w.get(r, t);
                t_sum += t as f64 * w.get(r, t);
            }
        }
        total.0 += r_sum / mass - ax as f64;
        total.1 += t_sum / mass - ay as f64;
    }
    total
}

pub fn run_poc_case(cfg: &PocConfig, run: usize) -> Result<PocRun> {
    let mut rng = sample_rng(cfg.seed, run as u64);
    let image = normalize(&synth_image(cfg.scene, cfg.rows, cfg.cols, &mut rng));
    let drawn = random_shift(&mut rng, cfg.gamma);
    let shift = cfg.shifts.get(run).copied().unwrap_or(drawn);
    let pair = make_shift_pair(&image, shift.0, shift.1, cfg.gamma)?;
    let train_cfg = TrainConfig {
        seed: cfg.seed.wrapping_add(run as u64),
        ..cfg.train_config()
    };
    let mut network = init_network(1, &cfg.architecture(), &train_cfg, &mut rng)?;
    let (report, error) = match train(&mut network, std::slice::from_ref(&pair), &train_cfg) {
        Ok(r) => (Some(r), None),
        Err(e @ (Error::Diverged { .. } | Error::NonFiniteLoss(_))) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    let cumulative = network.layers.iter().fold((0.0, 0.0), |acc, l| {
        let b = &l.connections[0][0].bias;
        (acc.0 + b.alpha, acc.1 + b.beta)
    });
    let bias_error = (cumulative.0 - shift.0 as f64, cumulative.1 - shift.1 as f64);
    let centroid = kernel_centroid(&network);
    let snr_db = report.as_ref().map_or(f64::NAN, |r| r.final_metrics.snr_db);
    let converged = snr_db >= cfg.target_snr_db;
    let within_tolerance =
        bias_error.0.abs() <= cfg.bias_tolerance && bias_error.1.abs() <= cfg.bias_tolerance;
    Ok(PocRun {
        run,
        shift,
        pair,
        network,
        report,
        error,
        cumulative,
        bias_error,
        effective_error: (bias_error.0 + centroid.0, bias_error.1 + centroid.1),
        snr_db,
        converged,
        within_tolerance,
    })
}

pub fn run_poc(cfg: &PocConfig) -> Result<PocSummary> {
    cfg.validate()?;
    let runs = (0..cfg.runs)
        .into_par_iter()
        .map(|run| run_poc_case(cfg, run))
        .collect::<Result<Vec<_>>>()?;
    let converged = runs.iter().filter(|r| r.converged).count();
    let within_tolerance = runs.iter().filter(|r| r.converged && r.within_tolerance).count();
    Ok(PocSummary {
        runs,
        converged,
        within_tolerance,
    })
}

/// Same data, folds and seeds for every neuron mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrendConfig {
    pub dataset: DatasetSpec,
    /// Shared topology; each mode overrides `bias_mode` (and zeroes gamma
    /// for the generative mode).
    pub architecture: Vec<LayerSpec>,
    pub train: TrainConfig,
    pub restarts: usize,
}

impl Default for TrendConfig {
    fn default() -> Self {
        let mode = BiasMode::Learnable;
        TrendConfig {
            dataset: DatasetSpec {
                source: Source::Synth {
                    scene: SceneKind::Shapes,
                    count: 24,
                    rows: 60,
                    cols: 60,
                    seed: 77,
                },
                degradation: Degradation::Disc { rho: 5 },
                manifest: None,
                folds: 3,
                fold: 0,
                split_seed: 5,
            },
            architecture: vec![
                LayerSpec::new(4, 3, 3, mode, 4).with_resample(Resample::Down { ssx: 2, ssy: 2 }),
                LayerSpec::new(4, 3, 5, mode, 4).with_resample(Resample::Up { usx: 2, usy: 2 }),
                LayerSpec::new(1, 3, 7, mode, 2),
            ],
            train: TrainConfig {
                seed: 11,
                ..TrainConfig::default()
            },
            restarts: 5,
        }
    }
}

pub const MODES: [BiasMode; 3] = [BiasMode::None, BiasMode::Random, BiasMode::Learnable];

pub fn architecture_for_mode(template: &[LayerSpec], mode: BiasMode) -> Vec<LayerSpec> {
    template
        .iter()
        .map(|s| LayerSpec {
            bias_mode: mode,
            gamma: if mode == BiasMode::None { 0 } else { s.gamma },
            ..s.clone()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeResult {
    pub mode: BiasMode,
    pub best_restart: usize,
    pub train: MetricSummary,
    pub test: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendFold {
    pub fold: usize,
    /// PSNR of the degraded inputs against the targets.
    pub input_psnr_db: f64,
    /// In [`MODES`] order.
    pub modes: Vec<ModeResult>,
}

impl TrendFold {
    /// learnable >= random >= generative in mean test PSNR.
    pub fn ordered(&self) -> bool {
        let p: Vec<f64> = self.modes.iter().map(|m| m.test.psnr_db).collect();
        p[2] >= p[1] && p[1] >= p[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendReport {
    pub folds: Vec<TrendFold>,
}

impl TrendReport {
    pub fn ordered_folds(&self) -> usize {
        self.folds.iter().filter(|f| f.ordered()).count()
    }
}

pub fn run_trend_fold(cfg: &TrendConfig, pairs: &[SamplePair], fold: usize) -> Result<TrendFold> {
    let (train_set, test_set) = partition(pairs, fold, cfg.dataset.folds, cfg.dataset.split_seed)?;
    let peak = cfg.train.psnr_peak;
    let input_psnr = test_set
        .iter()
        .map(|p| psnr_db(&p.input, &p.target, peak))
        .collect::<Result<Vec<_>>>()?;
    let mut modes = Vec::new();
    for mode in MODES {
        let arch = architecture_for_mode(&cfg.architecture, mode);
        let res = train_with_restarts(1, &arch, &train_set, &cfg.train, cfg.restarts)?;
        let train = res.runs[res.best]
            .as_ref()
            .map(|r| r.final_metrics)
            .map_err(|e| Error::Precondition(e.clone()))?;
        let (test, _, _) = evaluate(&res.network, &test_set, peak)?;
        modes.push(ModeResult {
            mode,
            best_restart: res.best,
            train,
            test,
        });
    }
    Ok(TrendFold {
        fold,
        input_psnr_db: input_psnr.iter().sum::<f64>() / input_psnr.len().max(1) as f64,
        modes,
    })
}

pub fn run_trend(cfg: &TrendConfig) -> Result<TrendReport> {
    if cfg.dataset.folds < 2 {
        return Err(Error::Config("trend needs at least 2 folds".into()));
    }
    cfg.train.validate()?;
    let pairs: Vec<SamplePair> = build_pairs(&cfg.dataset)?.iter().map(|p| p.to_sample()).collect();
    let folds = (0..cfg.dataset.folds)
        .map(|f| run_trend_fold(cfg, &pairs, f))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrendReport { folds })
}
