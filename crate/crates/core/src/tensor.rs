//! Dense 2D maps and the spatial primitives the neurons are built from.
//!
//! Indexing is `(m, n) = (row, col)` everywhere. A spatial bias `(alpha, beta)`
//! displaces reads along rows and columns respectively, so a shifted map reads
//! `y(m + alpha, n + beta)`. Reads that fall outside the source grid are zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A row-major grid of activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "feature maps must be non-empty");
        FeatureMap {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Dimension(format!("empty map {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}x{cols} map",
                data.len()
            )));
        }
        Ok(FeatureMap { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "feature maps must be non-empty");
        let mut data = Vec::with_capacity(rows * cols);
        for m in 0..rows {
            for n in 0..cols {
                data.push(f(m, n));
            }
        }
        FeatureMap { rows, cols, data }
    }

    /// Builds a map from nested rows; handy in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::from_vec(r, c, rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.data[m * self.cols + n]
    }

    #[inline]
    pub fn set(&mut self, m: usize, n: usize, value: f64) {
        self.data[m * self.cols + n] = value;
    }

    /// Signed read with the zero halo.
    #[inline]
    pub fn at(&self, m: i64, n: i64) -> f64 {
        if m < 0 || n < 0 || m >= self.rows as i64 || n >= self.cols as i64 {
            0.0
        } else {
            self.data[m as usize * self.cols + n as usize]
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureMap {
        FeatureMap {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &FeatureMap, f: impl Fn(f64, f64) -> f64) -> Result<FeatureMap> {
        self.expect_same_dims(other)?;
        Ok(FeatureMap {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &FeatureMap) -> Result<()> {
        self.expect_same_dims(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &FeatureMap) -> Result<f64> {
        self.expect_same_dims(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> Result<f64> {
        self.expect_same_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn expect_same_dims(&self, other: &FeatureMap) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

/// A per-connection spatial bias bounded by `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftVector {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: u32,
}

impl ShiftVector {
    pub fn new(alpha: f64, beta: f64, gamma: u32) -> Result<Self> {
        let sv = ShiftVector { alpha, beta, gamma };
        sv.check_range()?;
        Ok(sv)
    }

    pub fn zero(gamma: u32) -> Self {
        ShiftVector {
            alpha: 0.0,
            beta: 0.0,
            gamma,
        }
    }

    pub fn check_range(&self) -> Result<()> {
        let g = self.gamma as f64;
        if !(self.alpha.abs() <= g && self.beta.abs() <= g) {
            return Err(Error::Precondition(format!(
                "shift ({}, {}) exceeds range {}",
                self.alpha, self.beta, self.gamma
            )));
        }
        Ok(())
    }

    /// Clamps both components into `[-gamma, gamma]`.
    pub fn clamp(&mut self) {
        let g = self.gamma as f64;
        self.alpha = self.alpha.clamp(-g, g);
        self.beta = self.beta.clamp(-g, g);
    }

    pub fn floor_alpha(&self) -> i64 {
        self.alpha.floor() as i64
    }

    pub fn floor_beta(&self) -> i64 {
        self.beta.floor() as i64
    }

    pub fn frac_alpha(&self) -> f64 {
        self.alpha - self.alpha.floor()
    }

    pub fn frac_beta(&self) -> f64 {
        self.beta - self.beta.floor()
    }

    pub fn is_integral(&self) -> bool {
        self.frac_alpha() == 0.0 && self.frac_beta() == 0.0
    }
}

/// The powers `base^1 ..= base^Q` of one map.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerStack {
    maps: Vec<FeatureMap>,
}

impl PowerStack {
    pub fn order(&self) -> usize {
        self.maps.len()
    }

    /// The `q`-th power, `q` counted from 1.
    pub fn power(&self, q: usize) -> &FeatureMap {
        &self.maps[q - 1]
    }

    pub fn base(&self) -> &FeatureMap {
        &self.maps[0]
    }

    pub fn dims(&self) -> (usize, usize) {
        self.maps[0].dims()
    }
}

pub fn power_stack(map: &FeatureMap, order: usize) -> Result<PowerStack> {
    if order == 0 {
        return Err(Error::Precondition("power stack order must be >= 1".into()));
    }
    let mut maps = Vec::with_capacity(order);
    maps.push(map.clone());
    for q in 2..=order {
        maps.push(map.map(|v| v.powi(q as i32)));
    }
    Ok(PowerStack { maps })
}

fn check_shift(a: i64, b: i64, gamma: u32) -> Result<()> {
    if a.unsigned_abs() > gamma as u64 || b.unsigned_abs() > gamma as u64 {
        return Err(Error::Precondition(format!(
            "shift ({a}, {b}) exceeds range {gamma}"
        )));
    }
    Ok(())
}

/// `out(m, n) = map(m + a, n + b)` with zero fill; same size as the input.
pub fn shift_integer(map: &FeatureMap, a: i64, b: i64, gamma: u32) -> Result<FeatureMap> {
    check_shift(a, b, gamma)?;
    Ok(shift_window_integer(map, a, b, (0, 0), map.rows(), map.cols()))
}

/// Bilinear fractional shift onto the same grid.
pub fn shift_fractional(map: &FeatureMap, sv: &ShiftVector) -> Result<FeatureMap> {
    sv.check_range()?;
    Ok(shift_window(map, sv.alpha, sv.beta, (0, 0), map.rows(), map.cols()))
}

/// Pointwise derivatives of [`shift_fractional`] with respect to `alpha` and `beta`.
///
/// At integer-valued components this is the right-sided derivative.
pub fn shift_gradients(map: &FeatureMap, sv: &ShiftVector) -> Result<(FeatureMap, FeatureMap)> {
    sv.check_range()?;
    Ok(shift_gradients_window(
        map,
        sv.alpha,
        sv.beta,
        (0, 0),
        map.rows(),
        map.cols(),
    ))
}

/// Scatters a delta from the fractional grid back onto the integer grid.
///
/// `out(m, n)` collects `delta(m, n)`, `delta(m-1, n)`, `delta(m, n-1)` and
/// `delta(m-1, n-1)` with the bilinear weights. Together with an integer
/// back-shift by `(-floor alpha, -floor beta)` it is the adjoint of
/// [`shift_fractional`].
pub fn reverse_interpolate(delta: &FeatureMap, zeta_a: f64, zeta_b: f64) -> Result<FeatureMap> {
    for z in [zeta_a, zeta_b] {
        if !(0.0..1.0).contains(&z) {
            return Err(Error::Precondition(format!(
                "fractional part {z} outside [0, 1)"
            )));
        }
    }
    Ok(reverse_interpolate_window(
        delta,
        zeta_a,
        zeta_b,
        (0, 0),
        delta.rows(),
        delta.cols(),
    ))
}

/// Integer-shifted read onto a `rows x cols` window whose origin sits at
/// `origin` on the source grid: `out(u, v) = map(u + o_r + a, v + o_c + b)`.
pub fn shift_window_integer(
    map: &FeatureMap,
    a: i64,
    b: i64,
    origin: (i64, i64),
    rows: usize,
    cols: usize,
) -> FeatureMap {
    let (r0, c0) = (origin.0 + a, origin.1 + b);
    let mut out = FeatureMap::zeros(rows, cols);
    let (mr, mc) = (map.rows() as i64, map.cols() as i64);
    for u in 0..rows {
        let p = u as i64 + r0;
        if p < 0 || p >= mr {
            continue;
        }
        let src = &map.as_slice()[p as usize * map.cols()..(p as usize + 1) * map.cols()];
        let dst = &mut out.as_mut_slice()[u * cols..(u + 1) * cols];
        for (v, d) in dst.iter_mut().enumerate() {
            let q = v as i64 + c0;
            if q >= 0 && q < mc {
                *d = src[q as usize];
            }
        }
    }
    out
}

/// Bilinear read at `(u + o_r + alpha, v + o_c + beta)` for every window pixel.
pub fn shift_window(
    map: &FeatureMap,
    alpha: f64,
    beta: f64,
    origin: (i64, i64),
    rows: usize,
    cols: usize,
) -> FeatureMap {
    let (fa, fb) = (alpha.floor(), beta.floor());
    let (za, zb) = (alpha - fa, beta - fb);
    let (r0, c0) = (origin.0 + fa as i64, origin.1 + fb as i64);
    let w00 = (1.0 - za) * (1.0 - zb);
    let w11 = za * zb;
    let w10 = za * (1.0 - zb);
    let w01 = (1.0 - za) * zb;
    FeatureMap::from_fn(rows, cols, |u, v| {
        let p = u as i64 + r0;
        let q = v as i64 + c0;
        map.at(p, q) * w00 + map.at(p + 1, q + 1) * w11 + map.at(p + 1, q) * w10 + map.at(p, q + 1) * w01
    })
}

/// Derivatives of [`shift_window`] with respect to `alpha` and `beta`.
pub fn shift_gradients_window(
    map: &FeatureMap,
    alpha: f64,
    beta: f64,
    origin: (i64, i64),
    rows: usize,
    cols: usize,
) -> (FeatureMap, FeatureMap) {
    let (fa, fb) = (alpha.floor(), beta.floor());
    let (za, zb) = (alpha - fa, beta - fb);
    let (r0, c0) = (origin.0 + fa as i64, origin.1 + fb as i64);
    let mut ga = FeatureMap::zeros(rows, cols);
    let mut gb = FeatureMap::zeros(rows, cols);
    for u in 0..rows {
        for v in 0..cols {
            let p = u as i64 + r0;
            let q = v as i64 + c0;
            let y00 = map.at(p, q);
            let y10 = map.at(p + 1, q);
            let y01 = map.at(p, q + 1);
            let y11 = map.at(p + 1, q + 1);
            ga.set(u, v, (1.0 - zb) * (y10 - y00) + zb * (y11 - y01));
            gb.set(u, v, (1.0 - za) * (y01 - y00) + za * (y11 - y10));
        }
    }
    (ga, gb)
}

/// Windowed reverse interpolation: `out(s) = sum_d w_d * delta(s + origin - d)`
/// over the four bilinear corners `d`.
pub fn reverse_interpolate_window(
    delta: &FeatureMap,
    zeta_a: f64,
    zeta_b: f64,
    origin: (i64, i64),
    rows: usize,
    cols: usize,
) -> FeatureMap {
    let w00 = (1.0 - zeta_a) * (1.0 - zeta_b);
    let w11 = zeta_a * zeta_b;
    let w10 = zeta_a * (1.0 - zeta_b);
    let w01 = (1.0 - zeta_a) * zeta_b;
    FeatureMap::from_fn(rows, cols, |u, v| {
        let p = u as i64 + origin.0;
        let q = v as i64 + origin.1;
        delta.at(p, q) * w00
            + delta.at(p - 1, q - 1) * w11
            + delta.at(p - 1, q) * w10
            + delta.at(p, q - 1) * w01
    })
}

/// Sliding cross-correlation without padding (no kernel flip).
pub fn conv2d_valid(map: &FeatureMap, kernel: &FeatureMap) -> Result<FeatureMap> {
    let (kr, kc) = kernel.dims();
    if map.rows() < kr || map.cols() < kc {
        return Err(Error::Dimension(format!(
            "kernel {kr}x{kc} larger than map {}x{}",
            map.rows(),
            map.cols()
        )));
    }
    let (or, oc) = (map.rows() - kr + 1, map.cols() - kc + 1);
    let src = map.as_slice();
    let k = kernel.as_slice();
    let mc = map.cols();
    let mut out = FeatureMap::zeros(or, oc);
    for m in 0..or {
        for n in 0..oc {
            let mut acc = 0.0;
            for r in 0..kr {
                let row = &src[(m + r) * mc + n..(m + r) * mc + n + kc];
                for t in 0..kc {
                    acc += row[t] * k[r * kc + t];
                }
            }
            out.set(m, n, acc);
        }
    }
    Ok(out)
}

/// Block average; `ssx` divides the column count and `ssy` the row count.
pub fn down_sample_avg(map: &FeatureMap, ssx: usize, ssy: usize) -> Result<FeatureMap> {
    if ssx == 0 || ssy == 0 || !map.rows().is_multiple_of(ssy) || !map.cols().is_multiple_of(ssx) {
        return Err(Error::Dimension(format!(
            "{}x{} map not divisible by factors ({ssy}, {ssx})",
            map.rows(),
            map.cols()
        )));
    }
    let (or, oc) = (map.rows() / ssy, map.cols() / ssx);
    let scale = 1.0 / (ssx * ssy) as f64;
    Ok(FeatureMap::from_fn(or, oc, |m, n| {
        let mut acc = 0.0;
        for r in 0..ssy {
            for t in 0..ssx {
                acc += map.get(m * ssy + r, n * ssx + t);
            }
        }
        acc * scale
    }))
}

/// Nearest-neighbour replication.
pub fn up_sample_replicate(map: &FeatureMap, usx: usize, usy: usize) -> Result<FeatureMap> {
    if usx == 0 || usy == 0 {
        return Err(Error::Dimension("zero up-sampling factor".into()));
    }
    Ok(FeatureMap::from_fn(map.rows() * usy, map.cols() * usx, |m, n| {
        map.get(m / usy, n / usx)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> FeatureMap {
        FeatureMap::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn impulse(rows: usize, cols: usize, m: usize, n: usize) -> FeatureMap {
        let mut map = FeatureMap::zeros(rows, cols);
        map.set(m, n, 1.0);
        map
    }

    #[test]
    fn integer_shift_identity_and_index_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = random_map(&mut rng, 4, 5);
        assert_eq!(shift_integer(&map, 0, 0, 2).unwrap(), map);

        let out = shift_integer(&impulse(3, 3, 1, 1), 1, 0, 1).unwrap();
        assert_eq!(out, impulse(3, 3, 0, 1));
    }

    #[test]
    fn integer_shift_reads_zero_halo() {
        let out = shift_integer(&impulse(5, 5, 0, 0), 3, 0, 3).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn integer_shift_rejects_out_of_range() {
        let map = FeatureMap::zeros(3, 3);
        assert!(matches!(
            shift_integer(&map, 3, 0, 2),
            Err(Error::Precondition(_))
        ));
        assert!(shift_fractional(&map, &ShiftVector { alpha: 0.0, beta: -2.5, gamma: 2 }).is_err());
    }

    #[test]
    fn fractional_shift_degenerates_to_integer() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = random_map(&mut rng, 6, 7);
        for (a, b) in [(0, 0), (2, -1), (-3, 3)] {
            let sv = ShiftVector::new(a as f64, b as f64, 3).unwrap();
            assert_eq!(
                shift_fractional(&map, &sv).unwrap(),
                shift_integer(&map, a, b, 3).unwrap()
            );
        }
    }

    #[test]
    fn fractional_shift_constant_interior_and_corner_average() {
        let map = FeatureMap::filled(9, 9, 0.7);
        let out = shift_fractional(&map, &ShiftVector::new(1.3, -0.6, 2).unwrap()).unwrap();
        for m in 2..6 {
            for n in 2..6 {
                assert!((out.get(m, n) - 0.7).abs() < 1e-15);
            }
        }
        let map = FeatureMap::from_rows(&[&[0.0, 1.0], &[2.0, 3.0]]).unwrap();
        let out = shift_fractional(&map, &ShiftVector::new(0.5, 0.5, 1).unwrap()).unwrap();
        assert_eq!(out.get(0, 0), 1.5);
    }

    #[test]
    fn shift_gradients_on_constant_and_ramp() {
        let sv = ShiftVector::new(0.4, 0.0, 2).unwrap();
        let (ga, gb) = shift_gradients(&FeatureMap::filled(8, 8, 3.0), &sv).unwrap();
        for m in 2..6 {
            for n in 2..6 {
                assert_eq!(ga.get(m, n), 0.0);
                assert_eq!(gb.get(m, n), 0.0);
            }
        }
        let ramp = FeatureMap::from_fn(8, 8, |m, _| m as f64);
        let (ga, _) = shift_gradients(&ramp, &sv).unwrap();
        for m in 1..6 {
            for n in 0..8 {
                assert_eq!(ga.get(m, n), 1.0);
            }
        }
    }

    #[test]
    fn shift_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map = random_map(&mut rng, 6, 6);
        let (alpha, beta, h) = (1.3, -0.7, 1e-5);
        let sv = ShiftVector::new(alpha, beta, 2).unwrap();
        let (ga, gb) = shift_gradients(&map, &sv).unwrap();
        let eval = |a: f64, b: f64| shift_fractional(&map, &ShiftVector::new(a, b, 2).unwrap()).unwrap();
        let (ap, am) = (eval(alpha + h, beta), eval(alpha - h, beta));
        let (bp, bm) = (eval(alpha, beta + h), eval(alpha, beta - h));
        for i in 0..map.len() {
            let fa = (ap.as_slice()[i] - am.as_slice()[i]) / (2.0 * h);
            let fb = (bp.as_slice()[i] - bm.as_slice()[i]) / (2.0 * h);
            let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            assert!(rel(ga.as_slice()[i], fa) < 1e-6, "alpha pixel {i}");
            assert!(rel(gb.as_slice()[i], fb) < 1e-6, "beta pixel {i}");
        }
    }

    #[test]
    fn reverse_interpolation_identity_and_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = random_map(&mut rng, 5, 5);
        assert_eq!(reverse_interpolate(&d, 0.0, 0.0).unwrap(), d);

        // An impulse at (2,2) spreads onto (2,2), (3,2), (2,3), (3,3).
        let out = reverse_interpolate(&impulse(6, 6, 2, 2), 0.5, 0.5).unwrap();
        let mut expected = FeatureMap::zeros(6, 6);
        for (m, n) in [(2, 2), (3, 3), (3, 2), (2, 3)] {
            expected.set(m, n, 0.25);
        }
        assert_eq!(out, expected);
        assert!(reverse_interpolate(&d, 1.0, 0.0).is_err());
    }

    #[test]
    fn reverse_interpolation_is_adjoint_on_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gamma = 2u32;
        for _ in 0..20 {
            // y vanishes within gamma + 1 of the border.
            let y = FeatureMap::from_fn(9, 9, |m, n| {
                if (3..6).contains(&m) && (3..6).contains(&n) {
                    rng.gen_range(-1.0..1.0)
                } else {
                    0.0
                }
            });
            let d = random_map(&mut rng, 9, 9);
            let sv = ShiftVector::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), gamma).unwrap();
            let lhs = shift_fractional(&y, &sv).unwrap().dot(&d).unwrap();
            let scattered = reverse_interpolate(&d, sv.frac_alpha(), sv.frac_beta()).unwrap();
            let back = shift_integer(&scattered, -sv.floor_alpha(), -sv.floor_beta(), gamma + 1).unwrap();
            let rhs = y.dot(&back).unwrap();
            assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv2d_valid_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let map = random_map(&mut rng, 5, 4);
        let one = FeatureMap::filled(1, 1, 1.0);
        assert_eq!(conv2d_valid(&map, &one).unwrap(), map);
        let out = conv2d_valid(&FeatureMap::filled(3, 3, 1.0), &FeatureMap::filled(2, 2, 1.0)).unwrap();
        assert_eq!(out, FeatureMap::filled(2, 2, 4.0));
        assert!(matches!(
            conv2d_valid(&FeatureMap::zeros(2, 2), &FeatureMap::zeros(3, 1)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn conv2d_valid_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let map = random_map(&mut rng, 8, 8);
        let k = random_map(&mut rng, 3, 3);
        let out = conv2d_valid(&map, &k).unwrap();
        for m in 0..6 {
            for n in 0..6 {
                let mut acc = 0.0;
                for r in 0..3 {
                    for t in 0..3 {
                        acc += map.get(m + r, n + t) * k.get(r, t);
                    }
                }
                assert_eq!(out.get(m, n), acc);
            }
        }
    }

    #[test]
    fn power_stack_examples() {
        let base = FeatureMap::filled(2, 3, 2.0);
        let one = power_stack(&base, 1).unwrap();
        assert_eq!(one.order(), 1);
        assert_eq!(one.power(1), &base);
        let three = power_stack(&base, 3).unwrap();
        for (q, v) in [(1, 2.0), (2, 4.0), (3, 8.0)] {
            assert!(three.power(q).as_slice().iter().all(|&x| x == v));
        }
        assert!(power_stack(&base, 0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let map = random_map(&mut rng, 4, 4);
        let stack = power_stack(&map, 7).unwrap();
        for q in 1..=7 {
            for i in 0..map.len() {
                assert_eq!(stack.power(q).as_slice()[i], map.as_slice()[i].powi(q as i32));
            }
        }
    }

    #[test]
    fn resampling_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let map = random_map(&mut rng, 4, 6);
        assert_eq!(down_sample_avg(&map, 1, 1).unwrap(), map);
        assert_eq!(up_sample_replicate(&map, 1, 1).unwrap(), map);

        let small = FeatureMap::from_rows(&[&[1.0, 3.0], &[5.0, 7.0]]).unwrap();
        assert_eq!(down_sample_avg(&small, 2, 2).unwrap(), FeatureMap::filled(1, 1, 4.0));

        let block = up_sample_replicate(&map, 2, 2).unwrap();
        assert_eq!(up_sample_replicate(&down_sample_avg(&block, 2, 2).unwrap(), 2, 2).unwrap(), block);
        assert!(down_sample_avg(&FeatureMap::zeros(3, 4), 2, 2).is_err());
    }

    #[test]
    fn down_sampling_preserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let map = random_map(&mut rng, 6, 9);
        let down = down_sample_avg(&map, 3, 2).unwrap();
        assert!((down.sum() * 6.0 - map.sum()).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bilinear_weights_preserve_constants(c in -5.0f64..5.0, a in -2.0f64..2.0, b in -2.0f64..2.0) {
                let map = FeatureMap::filled(10, 10, c);
                let out = shift_fractional(&map, &ShiftVector::new(a, b, 2).unwrap()).unwrap();
                for m in 3..7 {
                    for n in 3..7 {
                        prop_assert!((out.get(m, n) - c).abs() < 1e-12);
                    }
                }
            }

            #[test]
            fn up_then_down_is_identity(vals in proptest::collection::vec(-1.0f64..1.0, 12), f in 1usize..4) {
                let map = FeatureMap::from_vec(3, 4, vals).unwrap();
                let round = down_sample_avg(&up_sample_replicate(&map, f, f).unwrap(), f, f).unwrap();
                prop_assert!(round.max_abs_diff(&map).unwrap() < 1e-15);
            }
        }
    }
}
