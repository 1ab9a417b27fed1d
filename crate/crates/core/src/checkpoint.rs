//! Versioned JSON checkpoints. Every `f64` is stored as a C99-style hex-float
//! string so a save/load/save cycle is bit-exact and byte-identical.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::layers::{BiasMode, LayerSpec, Network};
use crate::tensor::ShiftVector;

pub const FORMAT: &str = "opkernel-checkpoint";
pub const VERSION: u32 = 1;

const MANTISSA_BITS: u32 = 52;
const MANTISSA_MASK: u64 = (1 << MANTISSA_BITS) - 1;
const EXP_BIAS: i64 = 1023;

/// `0x1.8p+1` style rendering: shortest hex fraction, decimal exponent.
/// Zeros keep their sign; subnormals use a `0x0.` lead with exponent -1022.
pub fn format_hex(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    let sign = if v.is_sign_negative() { "-" } else { "" };
    if v.is_infinite() {
        return format!("{sign}inf");
    }
    let bits = v.to_bits();
    let raw_exp = ((bits >> MANTISSA_BITS) & 0x7ff) as i64;
    let mantissa = bits & MANTISSA_MASK;
    let (lead, exp) = match (raw_exp, mantissa) {
        (0, 0) => return format!("{sign}0x0p+0"),
        (0, _) => (0, 1 - EXP_BIAS),
        _ => (1, raw_exp - EXP_BIAS),
    };
    let frac = format!("{mantissa:013x}");
    let frac = frac.trim_end_matches('0');
    let dot = if frac.is_empty() { "" } else { "." };
    format!("{sign}0x{lead}{dot}{frac}p{exp:+}")
}

/// Inverse of [`format_hex`]; accepts only its canonical output shape
/// (trailing zeros in the fraction are tolerated).
pub fn parse_hex(s: &str) -> std::result::Result<f64, String> {
    let bad = || format!("invalid hex float {s:?}");
    let (negative, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let signed = |v: f64| if negative { -v } else { v };
    match body {
        "nan" if !negative => return Ok(f64::NAN),
        "inf" => return Ok(signed(f64::INFINITY)),
        _ => {}
    }
    let body = body.strip_prefix("0x").ok_or_else(bad)?;
    let (mant_part, exp_part) = body.split_once('p').ok_or_else(bad)?;
    let exp: i64 = exp_part.parse().map_err(|_| bad())?;
    let (lead, frac) = mant_part.split_once('.').unwrap_or((mant_part, ""));
    if frac.len() > 13 || (mant_part.contains('.') && frac.is_empty()) {
        return Err(bad());
    }
    let mut mantissa = 0u64;
    for (i, c) in frac.chars().enumerate() {
        let d = c.to_digit(16).ok_or_else(bad)? as u64;
        mantissa |= d << (4 * (12 - i));
    }
    let bits = match lead {
        "1" if (1 - EXP_BIAS..=EXP_BIAS).contains(&exp) => (((exp + EXP_BIAS) as u64) << MANTISSA_BITS) | mantissa,
        "0" if mantissa == 0 && exp == 0 => 0,
        "0" if mantissa != 0 && exp == 1 - EXP_BIAS => mantissa,
        _ => return Err(bad()),
    };
    Ok(signed(f64::from_bits(bits)))
}

/// `f64` that serializes as a hex-float string.
#[derive(Debug, Clone, Copy)]
pub struct Hex(pub f64);

impl PartialEq for Hex {
    fn eq(&self, other: &Self) -> bool {
        self.0.to_bits() == other.0.to_bits()
    }
}

impl Serialize for Hex {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&format_hex(self.0))
    }
}

impl<'de> Deserialize<'de> for Hex {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct HexVisitor;
        impl Visitor<'_> for HexVisitor {
            type Value = Hex;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a hex-float string")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Hex, E> {
                parse_hex(v).map(Hex).map_err(E::custom)
            }
        }
        d.deserialize_str(HexVisitor)
    }
}

fn hexes(values: &[f64]) -> Vec<Hex> {
    values.iter().copied().map(Hex).collect()
}

/// Where the parameters came from, enough to replay the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngDescriptor {
    pub algorithm: String,
    pub seed: u64,
}

impl RngDescriptor {
    pub fn chacha8(seed: u64) -> Self {
        RngDescriptor {
            algorithm: "chacha8".into(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectionParams {
    /// Row-major over `(r, t)`, then `q`.
    pub kernel: Vec<Hex>,
    pub bias_mode: BiasMode,
    pub alpha: Hex,
    pub beta: Hex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerParams {
    pub additive_bias: Vec<Hex>,
    /// `connections[i][k]`: input `k` to neuron `i`.
    pub connections: Vec<Vec<ConnectionParams>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub input_channels: usize,
    pub architecture: Vec<LayerSpec>,
    pub iteration: usize,
    pub rng: RngDescriptor,
    pub layers: Vec<LayerParams>,
}

impl Checkpoint {
    pub fn from_network(net: &Network, iteration: usize, rng: RngDescriptor) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|layer| LayerParams {
                additive_bias: hexes(&layer.additive_bias),
                connections: layer
                    .connections
                    .iter()
                    .map(|row| {
                        row.iter()
                            .map(|c| ConnectionParams {
                                kernel: hexes(&c.kernel.coeffs),
                                bias_mode: layer.spec.bias_mode,
                                alpha: Hex(c.bias.alpha),
                                beta: Hex(c.bias.beta),
                            })
                            .collect()
                    })
                    .collect(),
            })
            .collect();
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            input_channels: net.input_channels,
            architecture: net.specs(),
            iteration,
            rng,
            layers,
        }
    }

    pub fn to_network(&self) -> Result<Network> {
        let fail = |msg: String| Err(Error::Checkpoint(msg));
        if self.format != FORMAT {
            return fail(format!("unknown format {:?}", self.format));
        }
        if self.version != VERSION {
            return fail(format!("unsupported version {} (expected {VERSION})", self.version));
        }
        let mut net = Network::zeros(self.input_channels, &self.architecture)?;
        if self.layers.len() != net.layers.len() {
            return fail(format!("{} parameter blocks for {} layers", self.layers.len(), net.layers.len()));
        }
        for (l, (layer, params)) in net.layers.iter_mut().zip(&self.layers).enumerate() {
            if params.additive_bias.len() != layer.neurons()
                || params.connections.len() != layer.neurons()
                || params.connections.iter().any(|row| row.len() != layer.inputs())
            {
                return fail(format!("layer {l}: parameter shape does not match the architecture"));
            }
            for (b, h) in layer.additive_bias.iter_mut().zip(&params.additive_bias) {
                *b = h.0;
            }
            let gamma = layer.spec.gamma;
            let mode = layer.spec.bias_mode;
            for (i, row) in params.connections.iter().enumerate() {
                for (k, p) in row.iter().enumerate() {
                    let conn = &mut layer.connections[i][k];
                    if p.kernel.len() != conn.kernel.coeffs.len() {
                        return fail(format!("layer {l} connection ({i},{k}): {} kernel values", p.kernel.len()));
                    }
                    if p.bias_mode != mode {
                        return fail(format!("layer {l} connection ({i},{k}): mode {:?} in a {mode:?} layer", p.bias_mode));
                    }
                    let (alpha, beta) = (p.alpha.0, p.beta.0);
                    let integral = alpha.fract() == 0.0 && beta.fract() == 0.0;
                    if (mode == BiasMode::None && (alpha != 0.0 || beta != 0.0)) || (mode == BiasMode::Random && !integral) {
                        return fail(format!("layer {l} connection ({i},{k}): shift ({alpha}, {beta}) invalid for {mode:?}"));
                    }
                    conn.bias = ShiftVector::new(alpha, beta, gamma)?;
                    for (c, h) in conn.kernel.coeffs.iter_mut().zip(&p.kernel) {
                        *c = h.0;
                    }
                }
            }
        }
        Ok(net)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::json(path, e))
    }
}

/// One line per differing field, empty when the architectures agree.
pub fn architecture_diff(
    expected_inputs: usize,
    expected: &[LayerSpec],
    found_inputs: usize,
    found: &[LayerSpec],
) -> Vec<String> {
    let mut diff = Vec::new();
    if expected_inputs != found_inputs {
        diff.push(format!("input_channels: expected {expected_inputs}, found {found_inputs}"));
    }
    if expected.len() != found.len() {
        diff.push(format!("layer count: expected {}, found {}", expected.len(), found.len()));
    }
    for (l, (e, f)) in expected.iter().zip(found).enumerate() {
        let fields = [
            ("neurons", e.neurons.to_string(), f.neurons.to_string()),
            ("kx", e.kx.to_string(), f.kx.to_string()),
            ("ky", e.ky.to_string(), f.ky.to_string()),
            ("q", e.q.to_string(), f.q.to_string()),
            ("gamma", e.gamma.to_string(), f.gamma.to_string()),
            ("bias_mode", format!("{:?}", e.bias_mode), format!("{:?}", f.bias_mode)),
            ("activation", format!("{:?}", e.activation), format!("{:?}", f.activation)),
            ("resample", format!("{:?}", e.resample), format!("{:?}", f.resample)),
        ];
        for (name, a, b) in fields {
            if a != b {
                diff.push(format!("layer {l} {name}: expected {a}, found {b}"));
            }
        }
    }
    diff
}
