//! Hand-derived backward pass for all three neuron modes.
//!
//! For each connection the delta of the shifted window is formed by a
//! position-dependent full correlation of the next-layer delta with the nodal
//! derivative. From there the kernel and spatial-bias sensitivities are read
//! off directly, and the delta is carried back onto the unshifted grid by
//! reverse interpolation plus an integer back-shift.

use crate::error::{Error, Result};
use crate::layers::{BiasMode, ForwardCache, Layer, LayerCache, NodalKernel, Network, Resample};
use crate::tensor::{
    conv2d_valid, down_sample_avg, reverse_interpolate_window, shift_gradients_window,
    shift_window_integer, up_sample_replicate, FeatureMap, PowerStack,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionGrad {
    /// Same layout as [`NodalKernel::coeffs`].
    pub kernel: Vec<f64>,
    pub d_alpha: f64,
    pub d_beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub connections: Vec<Vec<ConnectionGrad>>,
    pub d_bias: Vec<f64>,
}

/// Sensitivities for every trainable parameter of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn zeros_like(net: &Network) -> Self {
        GradientSet {
            layers: net
                .layers
                .iter()
                .map(|layer| LayerGrad {
                    connections: layer
                        .connections
                        .iter()
                        .map(|row| {
                            row.iter()
                                .map(|c| ConnectionGrad {
                                    kernel: vec![0.0; c.kernel.coeffs.len()],
                                    d_alpha: 0.0,
                                    d_beta: 0.0,
                                })
                                .collect()
                        })
                        .collect(),
                    d_bias: vec![0.0; layer.neurons()],
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &GradientSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (ra, rb) in a.connections.iter_mut().zip(&b.connections) {
                for (ca, cb) in ra.iter_mut().zip(rb) {
                    for (x, y) in ca.kernel.iter_mut().zip(&cb.kernel) {
                        *x += y;
                    }
                    ca.d_alpha += cb.d_alpha;
                    ca.d_beta += cb.d_beta;
                }
            }
            for (x, y) in a.d_bias.iter_mut().zip(&b.d_bias) {
                *x += y;
            }
        }
    }

    /// Flat view in a fixed order: per layer, per connection kernel then
    /// `(d_alpha, d_beta)`, then the additive biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for row in &layer.connections {
                for c in row {
                    out.extend_from_slice(&c.kernel);
                    out.push(c.d_alpha);
                    out.push(c.d_beta);
                }
            }
            out.extend_from_slice(&layer.d_bias);
        }
        out
    }
}

/// Result of a full backward pass.
#[derive(Debug, Clone)]
pub struct Backward {
    pub grads: GradientSet,
    /// `dE/dy` for each network input map.
    pub input_deltas: Vec<FeatureMap>,
}

/// Mean squared error over every pixel of every output map.
pub fn loss(pred: &[FeatureMap], target: &[FeatureMap]) -> Result<f64> {
    check_pairs(pred, target)?;
    let count: usize = pred.iter().map(FeatureMap::len).sum();
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(target) {
        for (a, b) in p.as_slice().iter().zip(t.as_slice()) {
            let d = a - b;
            acc += d * d;
        }
    }
    Ok(acc / count as f64)
}

fn check_pairs(pred: &[FeatureMap], target: &[FeatureMap]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    for (p, t) in pred.iter().zip(target) {
        p.expect_same_dims(t)?;
    }
    Ok(())
}

/// Output-layer delta for the MSE loss: `(2 / |I|) (pred - target) f'`.
pub fn output_delta(pred: &FeatureMap, target: &FeatureMap, fprime: &FeatureMap) -> Result<FeatureMap> {
    let scale = 2.0 / pred.len() as f64;
    let diff = pred.zip_map(target, |p, t| scale * (p - t))?;
    diff.zip_map(fprime, |d, f| d * f)
}

/// `sum_q q * w(r, t, q) * y^(q-1)` over the cached powers.
pub fn nodal_grad_y(shifted: &PowerStack, kernel: &NodalKernel, r: usize, t: usize) -> FeatureMap {
    let (rows, cols) = shifted.dims();
    let mut out = FeatureMap::filled(rows, cols, kernel.get(r, t, 1));
    for q in 2..=kernel.q {
        let c = q as f64 * kernel.get(r, t, q);
        for (o, p) in out.as_mut_slice().iter_mut().zip(shifted.power(q - 1).as_slice()) {
            *o += c * p;
        }
    }
    out
}

/// Delta of the shifted window: `d(u, v) = sum_{r,t} next(u - r, v - t) * g_rt(u, v)`,
/// where `g_rt` is the nodal derivative at window pixel `(u, v)` for kernel
/// element `(r, t)`. Reads of `next` outside its support are zero.
pub fn shifted_delta(next: &FeatureMap, shifted: &PowerStack, kernel: &NodalKernel) -> FeatureMap {
    let (rows, cols) = shifted.dims();
    let base = shifted.base().as_slice();
    let (nr, nc) = (next.rows() as i64, next.cols() as i64);
    let nd = next.as_slice();
    let mut out = FeatureMap::zeros(rows, cols);
    let od = out.as_mut_slice();
    for u in 0..rows {
        for v in 0..cols {
            let y = base[u * cols + v];
            let mut acc = 0.0;
            for r in 0..kernel.kx {
                let m = u as i64 - r as i64;
                if m < 0 || m >= nr {
                    continue;
                }
                for t in 0..kernel.ky {
                    let n = v as i64 - t as i64;
                    if n < 0 || n >= nc {
                        continue;
                    }
                    let d = nd[(m * nc + n) as usize];
                    if d == 0.0 {
                        continue;
                    }
                    acc += d * nodal_derivative(y, kernel.element(r, t));
                }
            }
            od[u * cols + v] = acc;
        }
    }
    out
}

#[inline]
fn nodal_derivative(y: f64, coeffs: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (j, &c) in coeffs.iter().enumerate().rev() {
        acc = acc * y + (j + 1) as f64 * c;
    }
    acc
}

/// `grad(r, t, q) = sum_{m,n} next(m, n) * shifted^q(m + r, n + t)`.
pub fn kernel_sensitivity(next: &FeatureMap, shifted: &PowerStack) -> Result<Vec<f64>> {
    let (rows, cols) = shifted.dims();
    if rows < next.rows() || cols < next.cols() {
        return Err(Error::Dimension("delta larger than shifted window".into()));
    }
    let (kx, ky, order) = (rows - next.rows() + 1, cols - next.cols() + 1, shifted.order());
    let mut out = vec![0.0; kx * ky * order];
    for q in 1..=order {
        let g = conv2d_valid(shifted.power(q), next)?;
        for r in 0..kx {
            for t in 0..ky {
                out[(r * ky + t) * order + (q - 1)] = g.get(r, t);
            }
        }
    }
    Ok(out)
}

pub fn additive_bias_sensitivity(delta_x: &FeatureMap) -> f64 {
    delta_x.sum()
}

/// Zero-lag cross-correlations of the shifted delta with the shift derivatives.
pub fn spatial_bias_sensitivity(
    delta_shifted: &FeatureMap,
    grad_alpha: &FeatureMap,
    grad_beta: &FeatureMap,
) -> Result<(f64, f64)> {
    Ok((grad_alpha.dot(delta_shifted)?, grad_beta.dot(delta_shifted)?))
}

/// Carries `dE/dy` through resampling and the activation derivative.
pub fn delta_through_activation(
    delta_y: &FeatureMap,
    fprime: &FeatureMap,
    resample: Resample,
) -> Result<FeatureMap> {
    let routed = match resample {
        Resample::None => delta_y.clone(),
        Resample::Down { ssx, ssy } => {
            let scale = 1.0 / (ssx * ssy) as f64;
            up_sample_replicate(delta_y, ssx, ssy)?.map(|v| v * scale)
        }
        Resample::Up { usx, usy } => {
            let scale = (usx * usy) as f64;
            down_sample_avg(delta_y, usx, usy)?.map(|v| v * scale)
        }
    };
    routed.zip_map(fprime, |d, f| d * f)
}

/// Backward step through one layer: sensitivities of its parameters and, when
/// `want_input_delta` is set, `dE/dy` for each of its input maps.
pub fn layer_backward(
    layer: &Layer,
    cache: &LayerCache,
    next_deltas: &[FeatureMap],
    want_input_delta: bool,
) -> Result<(LayerGrad, Vec<FeatureMap>)> {
    let spec = &layer.spec;
    if next_deltas.len() != layer.neurons() || cache.shifted.len() != layer.neurons() {
        return Err(Error::Dimension(format!(
            "{} deltas / {} cached neurons for a layer of {}",
            next_deltas.len(),
            cache.shifted.len(),
            layer.neurons()
        )));
    }
    let (rows, cols) = cache
        .inputs
        .first()
        .map(FeatureMap::dims)
        .ok_or_else(|| Error::Dimension("empty layer cache".into()))?;
    for d in next_deltas {
        if d.dims() != (rows, cols) {
            return Err(Error::Dimension("delta does not match the layer's map size".into()));
        }
    }
    let (ax, ay) = spec.anchor();
    let (wr, wc) = (rows + spec.kx - 1, cols + spec.ky - 1);
    let mut input_deltas = if want_input_delta {
        vec![FeatureMap::zeros(rows, cols); layer.inputs()]
    } else {
        Vec::new()
    };
    let mut connections = Vec::with_capacity(layer.neurons());
    let mut d_bias = Vec::with_capacity(layer.neurons());
    for (i, row) in layer.connections.iter().enumerate() {
        let next = &next_deltas[i];
        let mut grads = Vec::with_capacity(row.len());
        for (k, conn) in row.iter().enumerate() {
            let stack = &cache.shifted[i][k];
            if stack.dims() != (wr, wc) {
                return Err(Error::Dimension("cache does not match layer".into()));
            }
            let dshift = shifted_delta(next, stack, &conn.kernel);
            let kernel = kernel_sensitivity(next, stack)?;
            let (mut d_alpha, mut d_beta) = (0.0, 0.0);
            if spec.bias_mode == BiasMode::Learnable {
                let (ga, gb) = shift_gradients_window(
                    &cache.inputs[k],
                    conn.bias.alpha,
                    conn.bias.beta,
                    (-ax, -ay),
                    wr,
                    wc,
                );
                (d_alpha, d_beta) = spatial_bias_sensitivity(&dshift, &ga, &gb)?;
            }
            if want_input_delta {
                let back = match spec.bias_mode {
                    BiasMode::None => shift_window_integer(&dshift, 0, 0, (ax, ay), rows, cols),
                    BiasMode::Random => shift_window_integer(
                        &dshift,
                        -(conn.bias.alpha as i64),
                        -(conn.bias.beta as i64),
                        (ax, ay),
                        rows,
                        cols,
                    ),
                    // Reverse interpolation followed by the back-shift by
                    // (-floor alpha, -floor beta), fused into one window read.
                    BiasMode::Learnable => reverse_interpolate_window(
                        &dshift,
                        conn.bias.frac_alpha(),
                        conn.bias.frac_beta(),
                        (ax - conn.bias.floor_alpha(), ay - conn.bias.floor_beta()),
                        rows,
                        cols,
                    ),
                };
                input_deltas[k].add_assign(&back)?;
            }
            grads.push(ConnectionGrad {
                kernel,
                d_alpha,
                d_beta,
            });
        }
        connections.push(grads);
        d_bias.push(additive_bias_sensitivity(next));
    }
    Ok((LayerGrad { connections, d_bias }, input_deltas))
}

/// `dE/dy` of the previous layer's maps for one layer.
pub fn backprop_delta(layer: &Layer, cache: &LayerCache, next_deltas: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
    Ok(layer_backward(layer, cache, next_deltas, true)?.1)
}

/// Full backward pass starting from `dE/dy` of the output maps.
pub fn backward_from_output(
    net: &Network,
    cache: &ForwardCache,
    output_grad: &[FeatureMap],
    want_input_delta: bool,
) -> Result<Backward> {
    if cache.layers.len() != net.layers.len() {
        return Err(Error::Dimension("cache depth does not match network".into()));
    }
    let last = net.layers.len() - 1;
    let mut deltas: Vec<FeatureMap> = output_grad
        .iter()
        .zip(&cache.layers[last].fprime)
        .map(|(dy, fp)| delta_through_activation(dy, fp, net.layers[last].spec.resample))
        .collect::<Result<_>>()?;
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut input_deltas = Vec::new();
    for l in (0..net.layers.len()).rev() {
        let need = l > 0 || want_input_delta;
        let (grad, dy) = layer_backward(&net.layers[l], &cache.layers[l], &deltas, need)?;
        layers.push(grad);
        if l > 0 {
            let prev = &net.layers[l - 1];
            deltas = dy
                .iter()
                .zip(&cache.layers[l - 1].fprime)
                .map(|(d, fp)| delta_through_activation(d, fp, prev.spec.resample))
                .collect::<Result<_>>()?;
        } else {
            input_deltas = dy;
        }
    }
    layers.reverse();
    Ok(Backward {
        grads: GradientSet { layers },
        input_deltas,
    })
}

/// Forward, MSE loss and gradients for one sample.
pub fn sample_gradients(
    net: &Network,
    input: &[FeatureMap],
    target: &[FeatureMap],
) -> Result<(f64, GradientSet)> {
    let cache = net.forward(input)?;
    let e = loss(&cache.output, target)?;
    let grad = mse_output_grad(&cache.output, target)?;
    let back = backward_from_output(net, &cache, &grad, false)?;
    Ok((e, back.grads))
}

/// `dE/dy` of the MSE loss over all output pixels.
pub fn mse_output_grad(pred: &[FeatureMap], target: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
    check_pairs(pred, target)?;
    let count: usize = pred.iter().map(FeatureMap::len).sum();
    let scale = 2.0 / count as f64;
    pred.iter()
        .zip(target)
        .map(|(p, t)| p.zip_map(t, |a, b| scale * (a - b)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Activation, LayerSpec};
    use crate::tensor::ShiftVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> FeatureMap {
        FeatureMap::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_net(rng: &mut ChaCha8Rng, specs: &[LayerSpec], inputs: usize) -> Network {
        let mut net = Network::zeros(inputs, specs).unwrap();
        for layer in &mut net.layers {
            let g = layer.spec.gamma as f64;
            let mode = layer.spec.bias_mode;
            for row in &mut layer.connections {
                for c in row {
                    c.kernel.coeffs.iter_mut().for_each(|w| *w = rng.gen_range(-0.5..0.5));
                    match mode {
                        BiasMode::None => {}
                        BiasMode::Random => {
                            c.bias.alpha = rng.gen_range(-g..=g).round();
                            c.bias.beta = rng.gen_range(-g..=g).round();
                        }
                        BiasMode::Learnable => {
                            c.bias.alpha = rng.gen_range(-g..g);
                            c.bias.beta = rng.gen_range(-g..g);
                        }
                    }
                }
            }
            layer.additive_bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        }
        net
    }

    #[test]
    fn output_delta_examples() {
        let p = FeatureMap::filled(2, 2, 0.3);
        assert_eq!(output_delta(&p, &p, &FeatureMap::filled(2, 2, 1.0)).unwrap(), FeatureMap::zeros(2, 2));
        let d = output_delta(
            &FeatureMap::filled(1, 1, 0.75),
            &FeatureMap::filled(1, 1, 0.25),
            &FeatureMap::filled(1, 1, 1.0),
        )
        .unwrap();
        assert_eq!(d.get(0, 0), 1.0);
        assert!(output_delta(&p, &FeatureMap::zeros(2, 3), &p).is_err());
    }

    #[test]
    fn output_delta_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_map(&mut rng, 3, 4);
        let target = random_map(&mut rng, 3, 4);
        let pred = x.map(f64::tanh);
        let fprime = x.map(|v| 1.0 - v.tanh().powi(2));
        let delta = output_delta(&pred, &target, &fprime).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let e = |dv: f64| {
                let mut xp = x.clone();
                xp.as_mut_slice()[i] += dv;
                loss(&[xp.map(f64::tanh)], std::slice::from_ref(&target)).unwrap()
            };
            let fd = (e(h) - e(-h)) / (2.0 * h);
            assert!((fd - delta.as_slice()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn nodal_grad_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let window = random_map(&mut rng, 4, 4);
        let mut k1 = NodalKernel::zeros(2, 2, 1);
        k1.set(1, 0, 1, 0.7);
        let stack = crate::tensor::power_stack(&window, 1).unwrap();
        assert_eq!(nodal_grad_y(&stack, &k1, 1, 0), FeatureMap::filled(4, 4, 0.7));

        let mut k3 = NodalKernel::zeros(2, 2, 3);
        k3.coeffs.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        let zero = crate::tensor::power_stack(&FeatureMap::zeros(3, 3), 3).unwrap();
        assert_eq!(nodal_grad_y(&zero, &k3, 0, 1), FeatureMap::filled(3, 3, k3.get(0, 1, 1)));

        let stack = crate::tensor::power_stack(&window, 3).unwrap();
        let g = nodal_grad_y(&stack, &k3, 1, 1);
        let h = 1e-6;
        for (i, &y) in window.as_slice().iter().enumerate() {
            let f = |v: f64| crate::layers::nodal_response(v, k3.element(1, 1));
            let fd = (f(y + h) - f(y - h)) / (2.0 * h);
            assert!((fd - g.as_slice()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn sensitivities_trivial_cases() {
        let stack = crate::tensor::power_stack(&FeatureMap::filled(5, 5, 0.4), 2).unwrap();
        let zero = FeatureMap::zeros(3, 3);
        assert!(kernel_sensitivity(&zero, &stack).unwrap().iter().all(|&g| g == 0.0));
        assert_eq!(additive_bias_sensitivity(&zero), 0.0);
        assert_eq!(additive_bias_sensitivity(&FeatureMap::filled(3, 4, 0.5)), 6.0);
    }

    #[test]
    fn constant_input_has_no_spatial_gradient() {
        // A constant map shifted inside its support has zero shift derivative.
        let y = FeatureMap::filled(12, 12, 0.6);
        let (ga, gb) = shift_gradients_window(&y, 0.3, -0.4, (0, 0), 12, 12);
        let mut delta = FeatureMap::zeros(12, 12);
        for m in 3..9 {
            for n in 3..9 {
                delta.set(m, n, 0.1 * (m + n) as f64);
            }
        }
        assert_eq!(spatial_bias_sensitivity(&delta, &ga, &gb).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn delta_through_activation_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let d = random_map(&mut rng, 3, 3);
        let ones = FeatureMap::filled(3, 3, 1.0);
        assert_eq!(delta_through_activation(&d, &ones, Resample::None).unwrap(), d);
        let out = delta_through_activation(
            &FeatureMap::filled(1, 1, 4.0),
            &FeatureMap::filled(2, 2, 1.0),
            Resample::Down { ssx: 2, ssy: 2 },
        )
        .unwrap();
        assert_eq!(out, FeatureMap::filled(2, 2, 1.0));
        assert!(delta_through_activation(&d, &FeatureMap::zeros(2, 2), Resample::None).is_err());
    }

    #[test]
    fn zero_next_delta_gives_zero_input_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for mode in [BiasMode::None, BiasMode::Random, BiasMode::Learnable] {
            let net = random_net(&mut rng, &[LayerSpec::new(2, 3, 2, mode, 2)], 2);
            let input = vec![random_map(&mut rng, 6, 6), random_map(&mut rng, 6, 6)];
            let cache = net.forward(&input).unwrap();
            let zeros = vec![FeatureMap::zeros(6, 6); 2];
            let dy = backprop_delta(&net.layers[0], &cache.layers[0], &zeros).unwrap();
            assert!(dy.iter().all(|m| m.as_slice().iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn input_delta_matches_finite_difference_in_every_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for mode in [BiasMode::None, BiasMode::Random, BiasMode::Learnable] {
            let specs = [
                LayerSpec::new(2, 2, 2, mode, 2),
                LayerSpec::new(1, 2, 3, mode, 1),
            ];
            let net = random_net(&mut rng, &specs, 1);
            let input = vec![random_map(&mut rng, 6, 6)];
            let target = vec![random_map(&mut rng, 6, 6)];
            let cache = net.forward(&input).unwrap();
            let grad = mse_output_grad(&cache.output, &target).unwrap();
            let back = backward_from_output(&net, &cache, &grad, true).unwrap();
            let h = 1e-5;
            for p in 0..36 {
                let e = |dv: f64| {
                    let mut x = input.clone();
                    x[0].as_mut_slice()[p] += dv;
                    loss(&net.predict(&x).unwrap(), &target).unwrap()
                };
                let fd = (e(h) - e(-h)) / (2.0 * h);
                let a = back.input_deltas[0].as_slice()[p];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-5 || (a - fd).abs() < 1e-10, "{mode:?} pixel {p}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn resampling_chain_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let specs = [
            LayerSpec::new(2, 3, 2, BiasMode::Learnable, 2).with_resample(Resample::Down { ssx: 2, ssy: 2 }),
            LayerSpec::new(2, 3, 2, BiasMode::Learnable, 2).with_resample(Resample::Up { usx: 2, usy: 2 }),
            LayerSpec::new(1, 3, 2, BiasMode::Learnable, 1).with_activation(Activation::Identity),
        ];
        let net = random_net(&mut rng, &specs, 1);
        let input = vec![random_map(&mut rng, 8, 8)];
        let target = vec![random_map(&mut rng, 8, 8)];
        let (_, grads) = sample_gradients(&net, &input, &target).unwrap();
        let h = 1e-5;
        for l in 0..3 {
            for i in 0..net.layers[l].neurons() {
                let e = |dv: f64| {
                    let mut n = net.clone();
                    n.layers[l].additive_bias[i] += dv;
                    loss(&n.predict(&input).unwrap(), &target).unwrap()
                };
                let fd = (e(h) - e(-h)) / (2.0 * h);
                let a = grads.layers[l].d_bias[i];
                assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8) < 1e-5, "layer {l}");
            }
        }
    }

    #[test]
    fn gradients_are_linear_in_output_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let specs = [LayerSpec::new(2, 3, 3, BiasMode::Learnable, 2), LayerSpec::new(1, 2, 2, BiasMode::Learnable, 2)];
        let net = random_net(&mut rng, &specs, 1);
        let input = vec![random_map(&mut rng, 6, 6)];
        let cache = net.forward(&input).unwrap();
        let g = vec![random_map(&mut rng, 6, 6)];
        let g4: Vec<FeatureMap> = g.iter().map(|m| m.map(|v| 4.0 * v)).collect();
        let a = backward_from_output(&net, &cache, &g, true).unwrap();
        let b = backward_from_output(&net, &cache, &g4, true).unwrap();
        for (x, y) in a.grads.flatten().iter().zip(b.grads.flatten()) {
            assert_eq!(4.0 * x, y);
        }
    }

    #[test]
    fn non_learnable_modes_have_no_spatial_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        for mode in [BiasMode::None, BiasMode::Random] {
            let specs = [LayerSpec::new(2, 3, 2, mode, 3), LayerSpec::new(1, 3, 2, mode, 3)];
            let net = random_net(&mut rng, &specs, 1);
            let input = vec![random_map(&mut rng, 7, 7)];
            let target = vec![random_map(&mut rng, 7, 7)];
            let (_, grads) = sample_gradients(&net, &input, &target).unwrap();
            for layer in &grads.layers {
                for c in layer.connections.iter().flatten() {
                    assert_eq!((c.d_alpha, c.d_beta), (0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn spatial_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let specs = [LayerSpec::new(1, 2, 2, BiasMode::Learnable, 3), LayerSpec::new(1, 2, 1, BiasMode::Learnable, 3)];
        let mut net = random_net(&mut rng, &specs, 1);
        net.layers[0].connections[0][0].bias = ShiftVector::new(0.37, -1.62, 3).unwrap();
        let input = vec![random_map(&mut rng, 6, 6)];
        let target = vec![random_map(&mut rng, 6, 6)];
        let (_, grads) = sample_gradients(&net, &input, &target).unwrap();
        let h = 1e-4;
        let e = |da: f64, db: f64| {
            let mut n = net.clone();
            n.layers[0].connections[0][0].bias.alpha += da;
            n.layers[0].connections[0][0].bias.beta += db;
            loss(&n.predict(&input).unwrap(), &target).unwrap()
        };
        let fa = (e(h, 0.0) - e(-h, 0.0)) / (2.0 * h);
        let fb = (e(0.0, h) - e(0.0, -h)) / (2.0 * h);
        let c = &grads.layers[0].connections[0][0];
        assert!((c.d_alpha - fa).abs() / fa.abs().max(1e-8) < 1e-4, "{} vs {fa}", c.d_alpha);
        assert!((c.d_beta - fb).abs() / fb.abs().max(1e-8) < 1e-4, "{} vs {fb}", c.d_beta);
    }
}
