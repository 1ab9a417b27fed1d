//! Plain SGD training loop with separate learning factors for weights and
//! spatial biases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backprop::{backward_from_output, mse_output_grad, GradientSet};
use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::layers::{BiasMode, LayerSpec, Network};
use crate::metrics::{sample_metrics, MetricSummary, SampleMetrics, DEFAULT_PEAK};
use crate::tensor::FeatureMap;

/// How learnable spatial biases start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasInit {
    /// `U(-gamma, gamma)`.
    #[default]
    Uniform,
    /// `(0, 0)`.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_iter: usize,
    pub min_mse: f64,
    pub weight_init_range: f64,
    pub lr_weights: f64,
    pub lr_bias: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub bias_init: BiasInit,
    /// Extra stopping rule: mean SNR of the pass at or above this level.
    pub stop_snr_db: Option<f64>,
    pub psnr_peak: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iter: 200,
            min_mse: 1e-3,
            weight_init_range: 0.1,
            lr_weights: 0.1,
            lr_bias: 10.0,
            batch_size: 1,
            seed: 0,
            bias_init: BiasInit::Uniform,
            stop_snr_db: None,
            psnr_peak: DEFAULT_PEAK,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.max_iter == 0 {
            return bad("max_iter must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr_weights > 0.0) || !(self.lr_bias >= 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.weight_init_range >= 0.0) || !(self.min_mse >= 0.0) {
            return bad("ranges must be non-negative");
        }
        if !(self.psnr_peak > 0.0) {
            return bad("psnr_peak must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIter,
    MinMse,
    TargetSnr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-sample loss of each pass, measured before each batch update.
    pub loss: Vec<f64>,
    /// Mean per-sample SNR of each pass, same timing as `loss`.
    pub snr_db: Vec<f64>,
    pub stop: StopReason,
    pub iterations: usize,
    /// Metrics of the final network on the training set.
    pub final_metrics: MetricSummary,
    /// `(alpha, beta)` of every learnable connection, in layer/neuron/input
    /// order; entry 0 is the initial state, entry `t` follows iteration `t`.
    pub bias_trace: Vec<Vec<(f64, f64)>>,
}

/// Draws all parameters from `rng`.
pub fn init_network(input_channels: usize, arch: &[LayerSpec], cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Network> {
    let mut net = Network::zeros(input_channels, arch)?;
    let w = cfg.weight_init_range;
    let draw = |rng: &mut dyn rand::RngCore| if w > 0.0 { rng.gen_range(-w..=w) } else { 0.0 };
    for layer in &mut net.layers {
        let g = layer.spec.gamma as f64;
        let mode = layer.spec.bias_mode;
        for row in &mut layer.connections {
            for conn in row {
                conn.kernel.coeffs.iter_mut().for_each(|c| *c = draw(rng));
                match mode {
                    BiasMode::None => {}
                    BiasMode::Random => {
                        let mut pick = || rng.gen_range(-g - 1.0..g + 1.0).floor().clamp(-g, g);
                        conn.bias.alpha = pick();
                        conn.bias.beta = pick();
                    }
                    BiasMode::Learnable => match cfg.bias_init {
                        BiasInit::Zero => {}
                        BiasInit::Uniform if g > 0.0 => {
                            conn.bias.alpha = rng.gen_range(-g..g);
                            conn.bias.beta = rng.gen_range(-g..g);
                        }
                        BiasInit::Uniform => {}
                    },
                }
            }
        }
        layer.additive_bias.iter_mut().for_each(|b| *b = draw(rng));
    }
    Ok(net)
}

/// `p <- p - lr * grad`; learnable spatial biases use `lr_bias` and are
/// clamped to their range afterwards.
pub fn sgd_step(net: &mut Network, grads: &GradientSet, lr_weights: f64, lr_bias: f64) {
    for (layer, lg) in net.layers.iter_mut().zip(&grads.layers) {
        let learnable = layer.spec.bias_mode == BiasMode::Learnable;
        for (row, grow) in layer.connections.iter_mut().zip(&lg.connections) {
            for (conn, g) in row.iter_mut().zip(grow) {
                for (w, d) in conn.kernel.coeffs.iter_mut().zip(&g.kernel) {
                    *w -= lr_weights * d;
                }
                if learnable {
                    conn.bias.alpha -= lr_bias * g.d_alpha;
                    conn.bias.beta -= lr_bias * g.d_beta;
                    conn.bias.clamp();
                }
            }
        }
        for (b, d) in layer.additive_bias.iter_mut().zip(&lg.d_bias) {
            *b -= lr_weights * d;
        }
    }
}

fn bias_snapshot(net: &Network) -> Vec<(f64, f64)> {
    net.layers
        .iter()
        .filter(|l| l.spec.bias_mode == BiasMode::Learnable)
        .flat_map(|l| l.connections.iter().flatten().map(|c| (c.bias.alpha, c.bias.beta)))
        .collect()
}

fn check_dataset(net: &Network, data: &[SamplePair]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Precondition("empty dataset".into()));
    }
    if net.input_channels != 1 || net.output_channels() != 1 {
        return Err(Error::Dimension(
            "sample pairs carry one input and one target map".into(),
        ));
    }
    Ok(())
}

/// Per-sample `(metrics, gradients)` of one batch, in sample order.
fn batch_gradients(net: &Network, batch: &[SamplePair], peak: f64) -> Result<Vec<(SampleMetrics, GradientSet)>> {
    batch
        .par_iter()
        .map(|pair| {
            let target = std::slice::from_ref(&pair.target);
            let cache = net.forward(std::slice::from_ref(&pair.input))?;
            let metrics = sample_metrics(&cache.output, target, peak)?;
            let grad = mse_output_grad(&cache.output, target)?;
            let back = backward_from_output(net, &cache, &grad, false)?;
            Ok((metrics, back.grads))
        })
        .collect()
}

/// Runs SGD until a stopping rule fires. Gradients are summed over each batch
/// in sample order, so results do not depend on the thread count.
pub fn train(net: &mut Network, data: &[SamplePair], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    net.validate()?;
    check_dataset(net, data)?;
    let mut loss = Vec::new();
    let mut snr = Vec::new();
    let mut bias_trace = vec![bias_snapshot(net)];
    let mut stop = StopReason::MaxIter;
    for iter in 1..=cfg.max_iter {
        let mut pass: Vec<SampleMetrics> = Vec::with_capacity(data.len());
        for batch in data.chunks(cfg.batch_size) {
            let results = batch_gradients(net, batch, cfg.psnr_peak)?;
            let mut total = GradientSet::zeros_like(net);
            for (m, g) in &results {
                if !m.mse.is_finite() {
                    return Err(Error::Diverged {
                        iteration: iter,
                        loss: m.mse,
                    });
                }
                total.accumulate(g);
                pass.push(*m);
            }
            sgd_step(net, &total, cfg.lr_weights, cfg.lr_bias);
        }
        let summary = MetricSummary::from_samples(&pass, cfg.psnr_peak);
        loss.push(summary.mse);
        snr.push(summary.snr_db);
        bias_trace.push(bias_snapshot(net));
        if summary.mse < cfg.min_mse {
            stop = StopReason::MinMse;
        } else if cfg.stop_snr_db.is_some_and(|s| summary.snr_db >= s) {
            stop = StopReason::TargetSnr;
        } else {
            continue;
        }
        break;
    }
    let final_metrics = evaluate(net, data, cfg.psnr_peak)?.0;
    if !final_metrics.mse.is_finite() {
        return Err(Error::Diverged {
            iteration: loss.len(),
            loss: final_metrics.mse,
        });
    }
    Ok(TrainReport {
        iterations: loss.len(),
        loss,
        snr_db: snr,
        stop,
        final_metrics,
        bias_trace,
    })
}

/// Forward-only pass: dataset summary plus per-sample metrics and predictions.
pub fn evaluate(net: &Network, data: &[SamplePair], peak: f64) -> Result<(MetricSummary, Vec<SampleMetrics>, Vec<FeatureMap>)> {
    check_dataset(net, data)?;
    let results: Vec<(SampleMetrics, FeatureMap)> = data
        .par_iter()
        .map(|pair| {
            let mut out = net.predict(std::slice::from_ref(&pair.input))?;
            let m = sample_metrics(&out, std::slice::from_ref(&pair.target), peak)?;
            Ok((m, out.remove(0)))
        })
        .collect::<Result<_>>()?;
    let (per_sample, preds): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok((MetricSummary::from_samples(&per_sample, peak), per_sample, preds))
}

/// Outcome of [`train_with_restarts`].
#[derive(Debug, Clone)]
pub struct RestartResult {
    /// Index of the kept run.
    pub best: usize,
    pub network: Network,
    /// Per-run report, or the error that ended it.
    pub runs: Vec<std::result::Result<TrainReport, String>>,
}

/// Trains `restarts` independently initialised networks; run `r` uses seed
/// `cfg.seed + r`. Keeps the run with the lowest final training MSE (first
/// on ties). Fails only when every run fails.
pub fn train_with_restarts(
    input_channels: usize,
    arch: &[LayerSpec],
    data: &[SamplePair],
    cfg: &TrainConfig,
    restarts: usize,
) -> Result<RestartResult> {
    if restarts == 0 {
        return Err(Error::Config("restarts must be at least 1".into()));
    }
    let outcomes: Vec<Result<(Network, TrainReport)>> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let run_cfg = TrainConfig { seed: cfg.seed.wrapping_add(r as u64), ..cfg.clone() };
            let mut net = init_network(input_channels, arch, &run_cfg, &mut run_rng(run_cfg.seed))?;
            let report = train(&mut net, data, &run_cfg)?;
            Ok((net, report))
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (r, o) in outcomes.iter().enumerate() {
        if let Ok((_, rep)) = o {
            if best.is_none_or(|(_, m)| rep.final_metrics.mse < m) {
                best = Some((r, rep.final_metrics.mse));
            }
        }
    }
    let Some((best, _)) = best else {
        return Err(outcomes.into_iter().find_map(|o| o.err()).unwrap_or(Error::Precondition("no runs".into())));
    };
    let mut network = None;
    let runs = outcomes
        .into_iter()
        .enumerate()
        .map(|(r, o)| match o {
            Ok((net, rep)) => {
                if r == best {
                    network = Some(net);
                }
                Ok(rep)
            }
            Err(e) => Err(e.to_string()),
        })
        .collect();
    Ok(RestartResult {
        best,
        network: network.expect("best run has a network"),
        runs,
    })
}

/// Seeded generator for a training run.
pub fn run_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
