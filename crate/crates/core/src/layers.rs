//! Generative and super neurons.
//!
//! Every connection from input map `k` to neuron `i` owns a Q-order nodal
//! kernel and a spatial bias. The previous-layer map is first shifted by the
//! bias (integer read for the random model, bilinear for the learnable one),
//! then each kernel element applies a Maclaurin polynomial without DC term and
//! the results are summed.
//!
//! Kernels are corner-anchored in the shifted map, and that map is laid out on
//! an extended window of `(M + Kx - 1) x (N + Ky - 1)` pixels whose origin is
//! `(-ax, -ay)` with `ax = (Kx - 1) / 2`, `ay = (Ky - 1) / 2`. A valid slide over
//! the window therefore returns an `M x N` map; for odd kernels the element at
//! `(ax, ay)` sits over the output pixel. Forward and backward passes use the
//! same window.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_valid, down_sample_avg, power_stack, shift_window, shift_window_integer,
    up_sample_replicate, FeatureMap, PowerStack, ShiftVector,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasMode {
    /// Generative neuron: no spatial bias.
    None,
    /// Integer bias drawn once and frozen.
    Random,
    /// Real bias trained by backpropagation.
    Learnable,
}

impl BiasMode {
    pub fn name(self) -> &'static str {
        match self {
            BiasMode::None => "none",
            BiasMode::Random => "random",
            BiasMode::Learnable => "learnable",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum Resample {
    None,
    Down { ssx: usize, ssy: usize },
    Up { usx: usize, usy: usize },
}

impl Resample {
    pub fn apply(&self, map: &FeatureMap) -> Result<FeatureMap> {
        match *self {
            Resample::None => Ok(map.clone()),
            Resample::Down { ssx, ssy } => down_sample_avg(map, ssx, ssy),
            Resample::Up { usx, usy } => up_sample_replicate(map, usx, usy),
        }
    }
}

fn default_resample() -> Resample {
    Resample::None
}

fn default_activation() -> Activation {
    Activation::Tanh
}

/// Shape and behaviour of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub neurons: usize,
    pub kx: usize,
    pub ky: usize,
    pub q: usize,
    #[serde(default)]
    pub gamma: u32,
    pub bias_mode: BiasMode,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_resample")]
    pub resample: Resample,
}

impl LayerSpec {
    pub fn new(neurons: usize, k: usize, q: usize, bias_mode: BiasMode, gamma: u32) -> Self {
        LayerSpec {
            neurons,
            kx: k,
            ky: k,
            q,
            gamma: if bias_mode == BiasMode::None { 0 } else { gamma },
            bias_mode,
            activation: Activation::Tanh,
            resample: Resample::None,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_resample(mut self, resample: Resample) -> Self {
        self.resample = resample;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.neurons == 0 || self.kx == 0 || self.ky == 0 {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.q == 0 {
            return Err(Error::Config("Maclaurin order Q must be >= 1".into()));
        }
        if self.bias_mode == BiasMode::None && self.gamma != 0 {
            return Err(Error::Config(
                "gamma must be 0 for layers without spatial bias".into(),
            ));
        }
        match self.resample {
            Resample::Down { ssx, ssy } if ssx == 0 || ssy == 0 => {
                Err(Error::Config("zero down-sampling factor".into()))
            }
            Resample::Up { usx, usy } if usx == 0 || usy == 0 => {
                Err(Error::Config("zero up-sampling factor".into()))
            }
            _ => Ok(()),
        }
    }

    pub(crate) fn anchor(&self) -> (i64, i64) {
        (((self.kx - 1) / 2) as i64, ((self.ky - 1) / 2) as i64)
    }
}

/// `Kx x Ky x Q` Maclaurin coefficients; `q` runs from 1, there is no DC term.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalKernel {
    pub kx: usize,
    pub ky: usize,
    pub q: usize,
    pub coeffs: Vec<f64>,
}

impl NodalKernel {
    pub fn zeros(kx: usize, ky: usize, q: usize) -> Self {
        NodalKernel {
            kx,
            ky,
            q,
            coeffs: vec![0.0; kx * ky * q],
        }
    }

    #[inline]
    pub fn index(&self, r: usize, t: usize, q: usize) -> usize {
        debug_assert!(q >= 1 && q <= self.q);
        (r * self.ky + t) * self.q + (q - 1)
    }

    #[inline]
    pub fn get(&self, r: usize, t: usize, q: usize) -> f64 {
        self.coeffs[self.index(r, t, q)]
    }

    pub fn set(&mut self, r: usize, t: usize, q: usize, value: f64) {
        let i = self.index(r, t, q);
        self.coeffs[i] = value;
    }

    /// The Q coefficients of element `(r, t)`.
    #[inline]
    pub fn element(&self, r: usize, t: usize) -> &[f64] {
        let start = (r * self.ky + t) * self.q;
        &self.coeffs[start..start + self.q]
    }

    /// The `Kx x Ky` slice for a fixed order `q`.
    pub fn sub_kernel(&self, q: usize) -> FeatureMap {
        FeatureMap::from_fn(self.kx, self.ky, |r, t| self.get(r, t, q))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Connection {
    pub kernel: NodalKernel,
    pub bias: ShiftVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// `connections[i][k]` links input map `k` to neuron `i`.
    pub connections: Vec<Vec<Connection>>,
    pub additive_bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(spec: LayerSpec, inputs: usize) -> Result<Self> {
        spec.validate()?;
        let conn = Connection {
            kernel: NodalKernel::zeros(spec.kx, spec.ky, spec.q),
            bias: ShiftVector::zero(spec.gamma),
        };
        Ok(Layer {
            connections: vec![vec![conn; inputs]; spec.neurons],
            additive_bias: vec![0.0; spec.neurons],
            spec,
        })
    }

    pub fn inputs(&self) -> usize {
        self.connections.first().map_or(0, Vec::len)
    }

    pub fn neurons(&self) -> usize {
        self.spec.neurons
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input_channels: usize,
    pub layers: Vec<Layer>,
}

impl Network {
    /// A network with every parameter zero.
    pub fn zeros(input_channels: usize, specs: &[LayerSpec]) -> Result<Self> {
        if input_channels == 0 || specs.is_empty() {
            return Err(Error::Config("network needs inputs and at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut width = input_channels;
        for spec in specs {
            layers.push(Layer::zeros(spec.clone(), width)?);
            width = spec.neurons;
        }
        Ok(Network {
            input_channels,
            layers,
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().map_or(0, Layer::neurons)
    }

    pub fn validate(&self) -> Result<()> {
        let mut width = self.input_channels;
        for (l, layer) in self.layers.iter().enumerate() {
            layer.spec.validate()?;
            if layer.connections.len() != layer.spec.neurons
                || layer.additive_bias.len() != layer.spec.neurons
                || layer.connections.iter().any(|row| row.len() != width)
            {
                return Err(Error::Dimension(format!(
                    "layer {l} connection matrix does not match {} x {width}",
                    layer.spec.neurons
                )));
            }
            width = layer.spec.neurons;
        }
        Ok(())
    }

    /// Forward pass keeping everything backpropagation needs.
    pub fn forward(&self, inputs: &[FeatureMap]) -> Result<ForwardCache> {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut current = inputs.to_vec();
        for layer in &self.layers {
            let (y, cache) = layer_forward(&current, layer)?;
            layers.push(cache);
            current = y;
        }
        Ok(ForwardCache {
            layers,
            output: current,
        })
    }

    pub fn predict(&self, inputs: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        Ok(self.forward(inputs)?.output)
    }

    /// Order-sensitive FNV-1a hash over every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |v: f64| {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for layer in &self.layers {
            for row in &layer.connections {
                for c in row {
                    c.kernel.coeffs.iter().for_each(|&v| feed(v));
                    feed(c.bias.alpha);
                    feed(c.bias.beta);
                }
            }
            layer.additive_bias.iter().for_each(|&v| feed(v));
        }
        h
    }
}

/// Per-layer state stored by the forward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Previous-layer output maps, unshifted.
    pub inputs: Vec<FeatureMap>,
    /// `shifted[i][k]`: powers of the shifted window for connection `(i, k)`.
    pub shifted: Vec<Vec<PowerStack>>,
    pub x: Vec<FeatureMap>,
    pub fprime: Vec<FeatureMap>,
    /// Activated maps before resampling.
    pub activated: Vec<FeatureMap>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub layers: Vec<LayerCache>,
    pub output: Vec<FeatureMap>,
}

/// `sum_{q=1..Q} coeffs[q-1] * y^q`.
#[inline]
pub fn nodal_response(y: f64, coeffs: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &c in coeffs.iter().rev() {
        acc = (acc + c) * y;
    }
    acc
}

pub fn activate(x: &FeatureMap, kind: Activation) -> FeatureMap {
    match kind {
        Activation::Tanh => x.map(f64::tanh),
        Activation::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
        Activation::Identity => x.clone(),
    }
}

/// Element-wise `f'(x)`. The ReLU derivative at exactly zero is 0.
pub fn activate_grad(x: &FeatureMap, kind: Activation) -> FeatureMap {
    match kind {
        Activation::Tanh => x.map(|v| {
            let t = v.tanh();
            1.0 - t * t
        }),
        Activation::Relu => x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        Activation::Identity => x.map(|_| 1.0),
    }
}

/// Shifted extended window of `y` for one connection.
pub fn shifted_window(y: &FeatureMap, conn: &Connection, spec: &LayerSpec) -> FeatureMap {
    let (ax, ay) = spec.anchor();
    let rows = y.rows() + spec.kx - 1;
    let cols = y.cols() + spec.ky - 1;
    let origin = (-ax, -ay);
    match spec.bias_mode {
        BiasMode::None => shift_window_integer(y, 0, 0, origin, rows, cols),
        BiasMode::Random => shift_window_integer(
            y,
            conn.bias.alpha as i64,
            conn.bias.beta as i64,
            origin,
            rows,
            cols,
        ),
        BiasMode::Learnable => shift_window(y, conn.bias.alpha, conn.bias.beta, origin, rows, cols),
    }
}

fn check_inputs(prev: &[FeatureMap], layer: &Layer) -> Result<(usize, usize)> {
    if prev.len() != layer.inputs() {
        return Err(Error::Dimension(format!(
            "{} input maps for a layer with {} inputs",
            prev.len(),
            layer.inputs()
        )));
    }
    let dims = prev
        .first()
        .ok_or_else(|| Error::Dimension("no input maps".into()))?
        .dims();
    if prev.iter().any(|p| p.dims() != dims) {
        return Err(Error::Dimension("input maps differ in size".into()));
    }
    if layer.spec.q == 0 {
        return Err(Error::Precondition("Q must be >= 1".into()));
    }
    Ok(dims)
}

/// One layer of forward propagation. Returns the output maps `y` and the cache.
pub fn layer_forward(prev: &[FeatureMap], layer: &Layer) -> Result<(Vec<FeatureMap>, LayerCache)> {
    let (rows, cols) = check_inputs(prev, layer)?;
    let spec = &layer.spec;
    let mut shifted = Vec::with_capacity(spec.neurons);
    let mut xs = Vec::with_capacity(spec.neurons);
    for (i, row) in layer.connections.iter().enumerate() {
        let mut x = FeatureMap::filled(rows, cols, layer.additive_bias[i]);
        let mut stacks = Vec::with_capacity(row.len());
        for (conn, y) in row.iter().zip(prev) {
            let window = shifted_window(y, conn, spec);
            accumulate_nodal(&mut x, &window, &conn.kernel);
            stacks.push(power_stack(&window, spec.q)?);
        }
        shifted.push(stacks);
        xs.push(x);
    }
    let mut ys = Vec::with_capacity(spec.neurons);
    let mut fprime = Vec::with_capacity(spec.neurons);
    let mut activated = Vec::with_capacity(spec.neurons);
    for x in &xs {
        let a = activate(x, spec.activation);
        ys.push(spec.resample.apply(&a)?);
        fprime.push(activate_grad(x, spec.activation));
        activated.push(a);
    }
    Ok((
        ys,
        LayerCache {
            inputs: prev.to_vec(),
            shifted,
            x: xs,
            fprime,
            activated,
        },
    ))
}

/// Pixel-wise nodal sum over the kernel footprint.
fn accumulate_nodal(x: &mut FeatureMap, window: &FeatureMap, kernel: &NodalKernel) {
    let (rows, cols) = x.dims();
    let wc = window.cols();
    let w = window.as_slice();
    let out = x.as_mut_slice();
    for m in 0..rows {
        for n in 0..cols {
            let mut acc = 0.0;
            for r in 0..kernel.kx {
                let base = (m + r) * wc + n;
                for t in 0..kernel.ky {
                    acc += nodal_response(w[base + t], kernel.element(r, t));
                }
            }
            out[m * cols + n] += acc;
        }
    }
}

/// Input maps `x` computed as `Q x N_prev` independent valid correlations of the
/// shifted powers with the per-order sub-kernels.
pub fn layer_forward_decomposed(prev: &[FeatureMap], layer: &Layer) -> Result<Vec<FeatureMap>> {
    let (rows, cols) = check_inputs(prev, layer)?;
    let spec = &layer.spec;
    let mut xs = Vec::with_capacity(spec.neurons);
    for (i, row) in layer.connections.iter().enumerate() {
        let mut x = FeatureMap::filled(rows, cols, layer.additive_bias[i]);
        let stacks: Vec<PowerStack> = row
            .iter()
            .zip(prev)
            .map(|(conn, y)| power_stack(&shifted_window(y, conn, spec), spec.q))
            .collect::<Result<_>>()?;
        for q in 1..=spec.q {
            for (conn, stack) in row.iter().zip(&stacks) {
                x.add_assign(&conv2d_valid(stack.power(q), &conn.kernel.sub_kernel(q))?)?;
            }
        }
        xs.push(x);
    }
    Ok(xs)
}

/// Trainable parameter count. With `include_spatial_bias` each connection
/// contributes two extra parameters.
pub fn param_count(net: &Network, include_spatial_bias: bool) -> usize {
    let extra = if include_spatial_bias { 2 } else { 0 };
    let mut prev = net.input_channels;
    let mut total = 0;
    for layer in &net.layers {
        let s = &layer.spec;
        total += (prev * (s.kx * s.ky * s.q + extra) + 1) * s.neurons;
        prev = s.neurons;
    }
    total
}
