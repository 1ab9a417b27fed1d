//! Central finite-difference oracle for every trainable scalar.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backprop::{loss, sample_gradients, GradientSet};
use crate::data::sample_rng;
use crate::error::{Error, Result};
use crate::layers::{BiasMode, LayerSpec, Network};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Kernel { r: usize, t: usize, q: usize },
    AdditiveBias,
    Alpha,
    Beta,
}

/// One scalar parameter: `(layer, neuron, input)` plus what it is.
/// `input` is ignored for additive biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamHandle {
    pub layer: usize,
    pub neuron: usize,
    pub input: usize,
    pub kind: ParamKind,
}

impl ParamHandle {
    pub fn is_spatial(&self) -> bool {
        matches!(self.kind, ParamKind::Alpha | ParamKind::Beta)
    }

    fn missing(&self) -> Error {
        Error::Precondition(format!("no parameter at {self}"))
    }

    /// Flat `(connection, coefficient)` position of a kernel handle.
    fn kernel_index(&self, net: &Network) -> Result<usize> {
        let ParamKind::Kernel { r, t, q } = self.kind else {
            return Err(self.missing());
        };
        let k = &net
            .layers
            .get(self.layer)
            .and_then(|l| l.connections.get(self.neuron))
            .and_then(|row| row.get(self.input))
            .ok_or_else(|| self.missing())?
            .kernel;
        if r >= k.kx || t >= k.ky || q == 0 || q > k.q {
            return Err(self.missing());
        }
        Ok(k.index(r, t, q))
    }

    fn slot<'a>(&self, net: &'a mut Network) -> Result<&'a mut f64> {
        let kernel_idx = match self.kind {
            ParamKind::Kernel { .. } => Some(self.kernel_index(net)?),
            _ => None,
        };
        let missing = self.missing();
        let layer = net.layers.get_mut(self.layer).ok_or(missing)?;
        if self.kind == ParamKind::AdditiveBias {
            return layer.additive_bias.get_mut(self.neuron).ok_or_else(|| self.missing());
        }
        let conn = layer
            .connections
            .get_mut(self.neuron)
            .and_then(|row| row.get_mut(self.input))
            .ok_or_else(|| self.missing())?;
        Ok(match self.kind {
            ParamKind::Kernel { .. } => &mut conn.kernel.coeffs[kernel_idx.unwrap_or_default()],
            ParamKind::Alpha => &mut conn.bias.alpha,
            ParamKind::Beta => &mut conn.bias.beta,
            ParamKind::AdditiveBias => unreachable!("handled above"),
        })
    }

    pub fn value(&self, net: &Network) -> Result<f64> {
        let mut copy = net.clone();
        Ok(*self.slot(&mut copy)?)
    }

    /// Reads this handle's entry out of an analytic gradient set for `net`.
    pub fn analytic(&self, net: &Network, grads: &GradientSet) -> Result<f64> {
        let layer = grads.layers.get(self.layer).ok_or_else(|| self.missing())?;
        if self.kind == ParamKind::AdditiveBias {
            return layer.d_bias.get(self.neuron).copied().ok_or_else(|| self.missing());
        }
        let c = layer
            .connections
            .get(self.neuron)
            .and_then(|row| row.get(self.input))
            .ok_or_else(|| self.missing())?;
        match self.kind {
            ParamKind::Kernel { .. } => c
                .kernel
                .get(self.kernel_index(net)?)
                .copied()
                .ok_or_else(|| self.missing()),
            ParamKind::Alpha => Ok(c.d_alpha),
            ParamKind::Beta => Ok(c.d_beta),
            ParamKind::AdditiveBias => unreachable!("handled above"),
        }
    }
}

impl fmt::Display for ParamHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (l, i, k) = (self.layer, self.neuron, self.input);
        match self.kind {
            ParamKind::Kernel { r, t, q } => write!(f, "L{l} n{i} k{k} w({r},{t},{q})"),
            ParamKind::AdditiveBias => write!(f, "L{l} n{i} b"),
            ParamKind::Alpha => write!(f, "L{l} n{i} k{k} alpha"),
            ParamKind::Beta => write!(f, "L{l} n{i} k{k} beta"),
        }
    }
}

/// Every trainable scalar of `net`: kernels, additive biases and, for
/// learnable layers, both spatial-bias components.
pub fn handles(net: &Network) -> Vec<ParamHandle> {
    let mut out = Vec::new();
    for (l, layer) in net.layers.iter().enumerate() {
        let spec = &layer.spec;
        for (i, row) in layer.connections.iter().enumerate() {
            for k in 0..row.len() {
                for r in 0..spec.kx {
                    for t in 0..spec.ky {
                        for q in 1..=spec.q {
                            out.push(ParamHandle { layer: l, neuron: i, input: k, kind: ParamKind::Kernel { r, t, q } });
                        }
                    }
                }
                if spec.bias_mode == BiasMode::Learnable {
                    for kind in [ParamKind::Alpha, ParamKind::Beta] {
                        out.push(ParamHandle { layer: l, neuron: i, input: k, kind });
                    }
                }
            }
            out.push(ParamHandle { layer: l, neuron: i, input: 0, kind: ParamKind::AdditiveBias });
        }
    }
    out
}

/// `(E(p + h) - E(p - h)) / 2h`. The network is restored bit-exactly.
pub fn numeric_gradient(
    net: &mut Network,
    input: &[FeatureMap],
    target: &[FeatureMap],
    handle: &ParamHandle,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Precondition("step must be positive".into()));
    }
    let original = *handle.slot(net)?;
    let mut eval = |value: f64| -> Result<f64> {
        *handle.slot(net)? = value;
        let e = net.predict(input).and_then(|out| loss(&out, target));
        match e {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(_) => Err(Error::NonFiniteLoss(handle.to_string())),
            Err(err) => Err(err),
        }
    };
    let plus = eval(original + h);
    let minus = eval(original - h);
    *handle.slot(net)? = original;
    Ok((plus? - minus?) / (2.0 * h))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub rel: f64,
    pub rel_spatial: f64,
    pub h: f64,
    pub h_spatial: f64,
    /// Spatial biases this close to an integer are skipped.
    pub integer_margin: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rel: 1e-5,
            rel_spatial: 1e-4,
            h: 1e-5,
            h_spatial: 1e-4,
            integer_margin: 1e-3,
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckEntry {
    pub handle: ParamHandle,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
    pub skipped: Vec<(ParamHandle, String)>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn merge(&mut self, other: CheckReport) {
        self.entries.extend(other.entries);
        self.skipped.extend(other.skipped);
    }

    /// Fixed-width text table, one row per checked handle.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<28} {:>14} {:>14} {:>10}  {}\n",
            "parameter", "analytic", "numeric", "rel_err", "status"
        );
        for e in &self.entries {
            s.push_str(&format!(
                "{:<28} {:>14.6e} {:>14.6e} {:>10.2e}  {}\n",
                e.handle.to_string(),
                e.analytic,
                e.numeric,
                e.rel_error,
                if e.passed { "ok" } else { "FAIL" }
            ));
        }
        for (h, why) in &self.skipped {
            s.push_str(&format!("{:<28} skipped: {why}\n", h.to_string()));
        }
        s
    }
}

/// Options for [`check_all`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CheckOptions {
    pub tolerances: Tolerances,
    /// Check at most this many handles, evenly strided.
    pub max_handles: Option<usize>,
    /// Test hook: multiply analytic kernel gradients by this factor.
    pub corrupt_kernel: Option<f64>,
}

/// One analytic backward pass, then a finite difference per handle.
pub fn check_all(net: &Network, input: &[FeatureMap], target: &[FeatureMap], opts: &CheckOptions) -> Result<CheckReport> {
    let tol = &opts.tolerances;
    let (_, grads) = sample_gradients(net, input, target)?;
    let mut all = handles(net);
    if let Some(max) = opts.max_handles.filter(|&m| m > 0 && m < all.len()) {
        let stride = all.len() as f64 / max as f64;
        all = (0..max).map(|j| all[(j as f64 * stride) as usize]).collect();
    }
    let mut work = net.clone();
    let mut report = CheckReport::default();
    for handle in all {
        let value = handle.value(net)?;
        if handle.is_spatial() && (value - value.round()).abs() < tol.integer_margin {
            report.skipped.push((handle, "near-integer spatial bias".into()));
            continue;
        }
        let mut analytic = handle.analytic(net, &grads)?;
        if let (Some(f), ParamKind::Kernel { .. }) = (opts.corrupt_kernel, handle.kind) {
            analytic *= f;
        }
        let (h, tolerance) = if handle.is_spatial() {
            (tol.h_spatial, tol.rel_spatial)
        } else {
            (tol.h, tol.rel)
        };
        let numeric = numeric_gradient(&mut work, input, target, &handle, h)?;
        let rel_error = relative_error(analytic, numeric);
        report.entries.push(CheckEntry {
            handle,
            analytic,
            numeric,
            rel_error,
            tolerance,
            passed: rel_error < tolerance,
        });
    }
    Ok(report)
}

/// Shape of the randomized networks used by the check suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub networks: usize,
    pub rows: usize,
    pub cols: usize,
    pub hidden: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub orders: Vec<usize>,
    pub gamma: u32,
    pub weight_range: f64,
    pub seed: u64,
    pub tolerances: Tolerances,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            networks: 20,
            rows: 6,
            cols: 6,
            hidden: vec![2, 2],
            kernel_sizes: vec![2, 3],
            orders: vec![1, 2, 3],
            gamma: 2,
            weight_range: 0.5,
            seed: 2024,
            tolerances: Tolerances::default(),
        }
    }
}

/// A randomized network plus one `(input, target)` sample.
#[derive(Debug, Clone)]
pub struct Case {
    pub net: Network,
    pub input: Vec<FeatureMap>,
    pub target: Vec<FeatureMap>,
}

/// Case `index` of the suite for `mode`. Kernel size and order cycle through
/// the configured lists; every draw comes from `(seed, index)`.
pub fn build_case(cfg: &SuiteConfig, index: usize, mode: BiasMode) -> Result<Case> {
    if cfg.kernel_sizes.is_empty() || cfg.orders.is_empty() {
        return Err(Error::Config("kernel_sizes and orders must be non-empty".into()));
    }
    let mut rng = sample_rng(cfg.seed ^ (mode as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15), index as u64);
    let k = cfg.kernel_sizes[index % cfg.kernel_sizes.len()];
    let q = cfg.orders[(index / cfg.kernel_sizes.len()) % cfg.orders.len()];
    let gamma = if mode == BiasMode::None { 0 } else { cfg.gamma };
    let mut specs: Vec<LayerSpec> = cfg
        .hidden
        .iter()
        .map(|&n| LayerSpec::new(n, k, q, mode, gamma))
        .collect();
    specs.push(LayerSpec::new(1, k, q, mode, gamma));
    let mut net = Network::zeros(1, &specs)?;
    let w = cfg.weight_range;
    let g = gamma as f64;
    for layer in &mut net.layers {
        for conn in layer.connections.iter_mut().flatten() {
            conn.kernel.coeffs.iter_mut().for_each(|c| *c = rng.gen_range(-w..=w));
            match mode {
                BiasMode::None => {}
                BiasMode::Random => {
                    conn.bias.alpha = rng.gen_range(-g..=g).round();
                    conn.bias.beta = rng.gen_range(-g..=g).round();
                }
                BiasMode::Learnable => {
                    conn.bias.alpha = rng.gen_range(-g..=g);
                    conn.bias.beta = rng.gen_range(-g..=g);
                }
            }
        }
        layer.additive_bias.iter_mut().for_each(|b| *b = rng.gen_range(-w..=w));
    }
    let input = vec![FeatureMap::from_fn(cfg.rows, cfg.cols, |_, _| rng.gen_range(-1.0..1.0))];
    let target = vec![FeatureMap::from_fn(cfg.rows, cfg.cols, |_, _| rng.gen_range(-1.0..1.0))];
    Ok(Case { net, input, target })
}

/// Runs the suite over `modes`; returns one report per `(mode, index)`.
pub fn run_suite(cfg: &SuiteConfig, modes: &[BiasMode], corrupt_kernel: Option<f64>) -> Result<Vec<(BiasMode, usize, CheckReport)>> {
    let opts = CheckOptions {
        tolerances: cfg.tolerances,
        max_handles: None,
        corrupt_kernel,
    };
    let mut out = Vec::new();
    for &mode in modes {
        for index in 0..cfg.networks {
            let case = build_case(cfg, index, mode)?;
            out.push((mode, index, check_all(&case.net, &case.input, &case.target, &opts)?));
        }
    }
    Ok(out)
}
