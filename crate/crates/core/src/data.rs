//! Blur kernels, sample pairs, partitioning, normalization and synthetic scenes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm::GrayImage;
use crate::tensor::{shift_integer, FeatureMap};

/// Square, non-negative blur kernel summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    pub size: usize,
    pub weights: FeatureMap,
}

impl BlurKernel {
    fn normalized(weights: FeatureMap) -> Self {
        let total = weights.sum();
        BlurKernel {
            size: weights.rows(),
            weights: weights.map(|v| v / total),
        }
    }
}

/// Generation parameters recorded with each pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PairMeta {
    Disc { rho: usize },
    Motion { length: usize, theta: f64 },
    Shift { a: i64, b: i64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub input: FeatureMap,
    pub target: FeatureMap,
    pub meta: PairMeta,
}

/// Pillbox of radius `rho` in a `(2 rho + 1)` square, boundary pixels weighted
/// by 4x4 supersampled coverage.
pub fn disc_kernel(rho: usize) -> BlurKernel {
    if rho == 0 {
        return BlurKernel::normalized(FeatureMap::filled(1, 1, 1.0));
    }
    let size = 2 * rho + 1;
    let c = rho as f64;
    let r2 = c * c;
    let weights = FeatureMap::from_fn(size, size, |r, t| {
        let mut hits = 0u32;
        for i in 0..4 {
            for j in 0..4 {
                let dy = r as f64 - c + (i as f64 + 0.5) / 4.0 - 0.5;
                let dx = t as f64 - c + (j as f64 + 0.5) / 4.0 - 0.5;
                if dy * dy + dx * dx <= r2 {
                    hits += 1;
                }
            }
        }
        hits as f64
    });
    BlurKernel::normalized(weights)
}

/// Linear motion of `length` pixels at angle `theta` (counter-clockwise from
/// the column axis), antialiased by perpendicular distance.
pub fn motion_kernel(length: usize, theta: f64) -> Result<BlurKernel> {
    if length == 0 {
        return Err(Error::Precondition("motion length must be at least 1".into()));
    }
    let a = length as f64;
    let (s, co) = theta.sin_cos();
    let extent = a * s.abs().max(co.abs()) + 1.0;
    let mut size = extent.ceil() as usize;
    if size.is_multiple_of(2) {
        size += 1;
    }
    let c = (size / 2) as f64;
    let (ur, uc) = (-s, co);
    let half = a / 2.0 + 0.5;
    let weights = FeatureMap::from_fn(size, size, |r, t| {
        let (dr, dc) = (r as f64 - c, t as f64 - c);
        let along = (dr * ur + dc * uc).abs();
        let perp = (dr * uc - dc * ur).abs();
        (1.0 - perp).max(0.0) * (half - along).clamp(0.0, 1.0)
    });
    Ok(BlurKernel::normalized(weights))
}

/// Same-size, zero-padded, centred correlation.
pub fn blur(image: &FeatureMap, kernel: &BlurKernel) -> FeatureMap {
    let c = (kernel.size / 2) as i64;
    let k = &kernel.weights;
    FeatureMap::from_fn(image.rows(), image.cols(), |m, n| {
        let mut acc = 0.0;
        for r in 0..kernel.size {
            for t in 0..kernel.size {
                acc += k.get(r, t) * image.at(m as i64 + r as i64 - c, n as i64 + t as i64 - c);
            }
        }
        acc
    })
}

/// `target(m, n) = image(m + a, n + b)` with zero fill.
pub fn make_shift_pair(image: &FeatureMap, a: i64, b: i64, gamma: u32) -> Result<SamplePair> {
    Ok(SamplePair {
        input: image.clone(),
        target: shift_integer(image, a, b, gamma)?,
        meta: PairMeta::Shift { a, b },
    })
}

/// Uniform draw from `[-gamma, gamma]^2`.
pub fn random_shift(rng: &mut impl Rng, gamma: u32) -> (i64, i64) {
    let g = gamma as i64;
    (rng.gen_range(-g..=g), rng.gen_range(-g..=g))
}

pub fn blur_pair(image: &FeatureMap, kernel: &BlurKernel, meta: PairMeta) -> SamplePair {
    SamplePair {
        input: blur(image, kernel),
        target: image.clone(),
        meta,
    }
}

/// Seeded shuffle split into `fold_count` contiguous slices; slice
/// `fold_index` is the training set and the remainder the test set.
pub fn partition_indices(
    len: usize,
    fold_index: usize,
    fold_count: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if len == 0 {
        return Err(Error::Precondition("cannot partition an empty dataset".into()));
    }
    if fold_count == 0 || fold_index >= fold_count {
        return Err(Error::Precondition(format!(
            "fold {fold_index} out of range for {fold_count} folds"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let lo = fold_index * len / fold_count;
    let hi = (fold_index + 1) * len / fold_count;
    let train = order[lo..hi].to_vec();
    let test = order[..lo].iter().chain(&order[hi..]).copied().collect();
    Ok((train, test))
}

pub fn partition<T: Clone>(data: &[T], fold_index: usize, fold_count: usize, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let (train, test) = partition_indices(data.len(), fold_index, fold_count, seed)?;
    Ok((
        train.iter().map(|&i| data[i].clone()).collect(),
        test.iter().map(|&i| data[i].clone()).collect(),
    ))
}

/// `[0, 255] -> [-1, 1]`.
pub fn normalize(img: &GrayImage) -> FeatureMap {
    FeatureMap::from_fn(img.height, img.width, |m, n| {
        img.pixels[m * img.width + n] as f64 / 127.5 - 1.0
    })
}

/// Inverse of [`normalize`], clamped and rounded half up.
pub fn denormalize(map: &FeatureMap) -> GrayImage {
    GrayImage {
        width: map.cols(),
        height: map.rows(),
        pixels: map
            .as_slice()
            .iter()
            .map(|&v| round_half_up(((v + 1.0) * 127.5).clamp(0.0, 255.0)))
            .collect(),
    }
}

fn round_half_up(v: f64) -> u8 {
    (v + 0.5).floor().min(255.0) as u8
}

/// Per-sample generator seeded from `(seed, index)`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    /// Sum of broad Gaussian blobs.
    Smooth,
    /// Rectangles and ellipses over a linear gradient.
    Shapes,
    /// Broad blobs on a flat mid-gray background, fading out towards the
    /// border.
    Blobs,
    /// Shapes plus broad blobs plus fine texture, loosely mimicking the
    /// spectrum of natural photographs.
    Natural,
}

/// Synthetic 8-bit test image.
pub fn synth_image(kind: SceneKind, rows: usize, cols: usize, rng: &mut impl Rng) -> GrayImage {
    let field = match kind {
        SceneKind::Smooth => smooth_field(rows, cols, rng),
        SceneKind::Shapes => shapes_field(rows, cols, rng),
        SceneKind::Natural => natural_field(rows, cols, rng),
        SceneKind::Blobs => blob_field(rows, cols, rng),
    };
    denormalize(&field)
}

fn smooth_field(rows: usize, cols: usize, rng: &mut impl Rng) -> FeatureMap {
    stretch(&blob_sum(rows, cols, 6, (0.12, 0.3), rng), 0.85)
}

/// Sum of `count` Gaussian blobs with widths drawn as fractions of the span.
fn blob_sum(rows: usize, cols: usize, count: usize, sigma: (f64, f64), rng: &mut impl Rng) -> FeatureMap {
    let span = rows.max(cols) as f64;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            (
                rng.gen_range(0.0..rows as f64),
                rng.gen_range(0.0..cols as f64),
                rng.gen_range(sigma.0..sigma.1) * span,
                rng.gen_range(-1.0..1.0),
            )
        })
        .collect();
    FeatureMap::from_fn(rows, cols, |m, n| {
        blobs
            .iter()
            .map(|&(cm, cn, s, amp)| {
                let d2 = (m as f64 - cm).powi(2) + (n as f64 - cn).powi(2);
                amp * (-d2 / (2.0 * s * s)).exp()
            })
            .sum()
    })
}

fn shapes_field(rows: usize, cols: usize, rng: &mut impl Rng) -> FeatureMap {
    let (gm, gn) = (rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6));
    let mut map = FeatureMap::from_fn(rows, cols, |m, n| {
        gm * (m as f64 / rows as f64 - 0.5) + gn * (n as f64 / cols as f64 - 0.5)
    });
    let count = rng.gen_range(4..9);
    for _ in 0..count {
        let level = rng.gen_range(-0.9..0.9);
        let (cm, cn) = (rng.gen_range(0.0..rows as f64), rng.gen_range(0.0..cols as f64));
        let (hm, hn) = (
            rng.gen_range(0.08..0.3) * rows as f64,
            rng.gen_range(0.08..0.3) * cols as f64,
        );
        let ellipse = rng.gen_bool(0.5);
        for m in 0..rows {
            for n in 0..cols {
                let (dm, dn) = ((m as f64 - cm) / hm, (n as f64 - cn) / hn);
                let inside = if ellipse {
                    dm * dm + dn * dn <= 1.0
                } else {
                    dm.abs() <= 1.0 && dn.abs() <= 1.0
                };
                if inside {
                    map.set(m, n, level);
                }
            }
        }
    }
    map.map(|v| v.clamp(-0.95, 0.95))
}

fn blob_field(rows: usize, cols: usize, rng: &mut impl Rng) -> FeatureMap {
    let field = stretch(&blob_sum(rows, cols, BLOB_COUNT, BLOB_SIGMA, rng), 0.85);
    let margin = BLOB_MARGIN.min(rows.min(cols) as f64 / 4.0);
    let ramp = |i: usize, len: usize| {
        let d = (i.min(len - 1 - i) as f64 / margin).min(1.0);
        d * d * (3.0 - 2.0 * d)
    };
    FeatureMap::from_fn(rows, cols, |m, n| field.get(m, n) * ramp(m, rows) * ramp(n, cols))
}

const BLOB_MARGIN: f64 = 10.0;
const BLOB_COUNT: usize = 6;
const BLOB_SIGMA: (f64, f64) = (0.12, 0.3);

fn natural_field(rows: usize, cols: usize, rng: &mut impl Rng) -> FeatureMap {
    let shapes = shapes_field(rows, cols, rng);
    let smooth = smooth_field(rows, cols, rng);
    let noise = FeatureMap::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0));
    let texture = blur(&noise, &disc_kernel(1));
    let mixed = FeatureMap::from_fn(rows, cols, |m, n| {
        0.5 * shapes.get(m, n) + 0.3 * smooth.get(m, n) + TEXTURE_GAIN * texture.get(m, n)
    });
    stretch(&mixed, 0.9)
}

const TEXTURE_GAIN: f64 = 0.35;

fn stretch(map: &FeatureMap, peak: f64) -> FeatureMap {
    let lo = map.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    map.map(|v| peak * (2.0 * (v - lo) / span - 1.0))
}

/// Where clean images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Source {
    Synth {
        scene: SceneKind,
        count: usize,
        rows: usize,
        cols: usize,
        seed: u64,
    },
    /// Every `.pgm`/`.ppm` file in a directory, in name order.
    Dir { path: PathBuf },
}

/// How an input is derived from a clean image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Degradation {
    Disc { rho: usize },
    Motion { length: usize, theta: f64 },
    /// Target is the clean image shifted by a random integer vector.
    Shift { gamma: u32, seed: u64 },
}

/// Recipe for a paired dataset and its train/test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: Source,
    pub degradation: Degradation,
    /// Read pairs from a manifest written by `synth` instead of the recipe.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default = "one")]
    pub folds: usize,
    #[serde(default)]
    pub fold: usize,
    #[serde(default)]
    pub split_seed: u64,
}

fn one() -> usize {
    1
}

/// 8-bit pair as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub input: GrayImage,
    pub target: GrayImage,
    pub meta: PairMeta,
}

impl ImagePair {
    pub fn to_sample(&self) -> SamplePair {
        SamplePair {
            input: normalize(&self.input),
            target: normalize(&self.target),
            meta: self.meta,
        }
    }
}

pub fn load_sources(source: &Source) -> Result<Vec<GrayImage>> {
    match source {
        Source::Synth { scene, count, rows, cols, seed } => Ok((0..*count)
            .map(|i| synth_image(*scene, *rows, *cols, &mut sample_rng(*seed, i as u64)))
            .collect()),
        Source::Dir { path } => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("ppm"))
                })
                .collect();
            files.sort();
            files.iter().map(|p| crate::pgm::read_pgm(p)).collect()
        }
    }
}

/// Applies `degradation` to image `index`, quantizing both sides to 8 bits.
pub fn degrade(img: &GrayImage, degradation: &Degradation, index: usize) -> Result<ImagePair> {
    let clean = normalize(img);
    let pair = match *degradation {
        Degradation::Disc { rho } => blur_pair(&clean, &disc_kernel(rho), PairMeta::Disc { rho }),
        Degradation::Motion { length, theta } => {
            blur_pair(&clean, &motion_kernel(length, theta)?, PairMeta::Motion { length, theta })
        }
        Degradation::Shift { gamma, seed } => {
            let (a, b) = random_shift(&mut sample_rng(seed, index as u64), gamma);
            make_shift_pair(&clean, a, b, gamma)?
        }
    };
    Ok(ImagePair {
        input: denormalize(&pair.input),
        target: denormalize(&pair.target),
        meta: pair.meta,
    })
}

pub fn build_pairs(spec: &DatasetSpec) -> Result<Vec<ImagePair>> {
    load_sources(&spec.source)?
        .iter()
        .enumerate()
        .map(|(i, img)| degrade(img, &spec.degradation, i))
        .collect()
}

impl DatasetSpec {
    /// Pairs from the manifest when one is set, otherwise from the recipe.
    pub fn load(&self) -> Result<Vec<ImagePair>> {
        match &self.manifest {
            Some(path) => read_manifest_pairs(path),
            None => build_pairs(self),
        }
    }

    /// `(train, test)` for the configured fold.
    pub fn split<T: Clone>(&self, data: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        partition(data, self.fold, self.folds, self.split_seed)
    }
}

pub const MANIFEST_FORMAT: &str = "opkernel-dataset";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub index: usize,
    /// File names relative to the manifest.
    pub input: String,
    pub target: String,
    pub meta: PairMeta,
}

/// Generation record written next to a synthesized dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub source: Source,
    pub degradation: Degradation,
    pub pairs: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Writes `pair_NNN_{input,target}.pgm` and `manifest.json` into `dir`.
pub fn write_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pairs = build_pairs(spec)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (index, pair) in pairs.iter().enumerate() {
        let input = format!("pair_{index:03}_input.pgm");
        let target = format!("pair_{index:03}_target.pgm");
        crate::pgm::write_pgm(&dir.join(&input), &pair.input)?;
        crate::pgm::write_pgm(&dir.join(&target), &pair.target)?;
        entries.push(ManifestEntry { index, input, target, meta: pair.meta });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        source: spec.source.clone(),
        degradation: spec.degradation,
        pairs: entries,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported manifest {} v{}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    Ok(manifest)
}

pub fn read_manifest_pairs(path: &Path) -> Result<Vec<ImagePair>> {
    let manifest = read_manifest(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    manifest
        .pairs
        .iter()
        .map(|e| {
            Ok(ImagePair {
                input: crate::pgm::read_pgm(&dir.join(&e.input))?,
                target: crate::pgm::read_pgm(&dir.join(&e.target))?,
                meta: e.meta,
            })
        })
        .collect()
}
