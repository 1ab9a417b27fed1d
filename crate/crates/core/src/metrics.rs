//! Regression quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::FeatureMap;

/// Returned by [`snr_db`] and [`psnr_db`] when the error power vanishes.
pub const DB_CAP: f64 = 300.0;

/// Default PSNR peak: the width of the normalized `[-1, 1]` range.
pub const DEFAULT_PEAK: f64 = 2.0;

const NOISE_FLOOR: f64 = 1e-12;

pub fn mse(pred: &FeatureMap, target: &FeatureMap) -> Result<f64> {
    pred.expect_same_dims(target)?;
    Ok(sq_err(pred, target) / pred.len() as f64)
}

fn sq_err(pred: &FeatureMap, target: &FeatureMap) -> f64 {
    pred.as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(p, t)| (p - t) * (p - t))
        .sum()
}

/// `10 log10(var(target) / mse)`.
pub fn snr_db(pred: &FeatureMap, target: &FeatureMap) -> Result<f64> {
    let noise = mse(pred, target)?;
    Ok(snr_from(variance(target.as_slice()), noise))
}

pub fn psnr_db(pred: &FeatureMap, target: &FeatureMap, peak: f64) -> Result<f64> {
    let noise = mse(pred, target)?;
    Ok(psnr_from(peak, noise))
}

fn snr_from(signal: f64, noise: f64) -> f64 {
    if noise < NOISE_FLOOR {
        DB_CAP
    } else {
        10.0 * (signal / noise).log10()
    }
}

fn psnr_from(peak: f64, noise: f64) -> f64 {
    if noise < NOISE_FLOOR {
        DB_CAP
    } else {
        10.0 * (peak * peak / noise).log10()
    }
}

fn variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Metrics of one sample, pooled over all of its output maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub mse: f64,
    pub snr_db: f64,
    pub psnr_db: f64,
}

pub fn sample_metrics(pred: &[FeatureMap], target: &[FeatureMap], peak: f64) -> Result<SampleMetrics> {
    let mut err = 0.0;
    let mut count = 0usize;
    let mut pooled = Vec::new();
    for (p, t) in pred.iter().zip(target) {
        p.expect_same_dims(t)?;
        err += sq_err(p, t);
        count += p.len();
        pooled.extend_from_slice(t.as_slice());
    }
    if pred.len() != target.len() || count == 0 {
        return Err(crate::Error::Dimension(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    let noise = err / count as f64;
    Ok(SampleMetrics {
        mse: noise,
        snr_db: snr_from(variance(&pooled), noise),
        psnr_db: psnr_from(peak, noise),
    })
}

/// Per-sample metrics averaged over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mse: f64,
    pub snr_db: f64,
    pub psnr_db: f64,
    pub peak: f64,
    pub count: usize,
}

impl MetricSummary {
    pub fn from_samples(samples: &[SampleMetrics], peak: f64) -> Self {
        let n = samples.len().max(1) as f64;
        MetricSummary {
            mse: samples.iter().map(|s| s.mse).sum::<f64>() / n,
            snr_db: samples.iter().map(|s| s.snr_db).sum::<f64>() / n,
            psnr_db: samples.iter().map(|s| s.psnr_db).sum::<f64>() / n,
            peak,
            count: samples.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mse_examples() {
        let t = FeatureMap::from_fn(3, 4, |m, n| (m * 4 + n) as f64 * 0.1);
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
        assert_eq!(mse(&t.map(|v| v + 0.5), &t).unwrap(), 0.25);
        assert!(mse(&t, &FeatureMap::zeros(4, 3)).is_err());
    }

    #[test]
    fn mse_matches_loop() {
        let p = FeatureMap::from_fn(5, 7, |m, n| ((m * 31 + n * 17) % 11) as f64 / 7.0);
        let t = FeatureMap::from_fn(5, 7, |m, n| ((m * 13 + n * 5) % 9) as f64 / 4.0);
        let mut acc = 0.0;
        for m in 0..5 {
            for n in 0..7 {
                acc += (p.get(m, n) - t.get(m, n)).powi(2);
            }
        }
        assert!((mse(&p, &t).unwrap() - acc / 35.0).abs() < 1e-15);
    }

    #[test]
    fn snr_examples() {
        // target variance 1, noise 0.1 everywhere
        let t = FeatureMap::from_fn(2, 2, |m, _| if m == 0 { 1.0 } else { -1.0 });
        let noise = 0.1f64.sqrt();
        let p = t.map(|v| v + noise);
        assert!((snr_db(&p, &t).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(snr_db(&t, &t).unwrap(), DB_CAP);
    }

    #[test]
    fn psnr_examples() {
        let t = FeatureMap::zeros(3, 3);
        assert!((psnr_db(&t.map(|_| 2.0), &t, 2.0).unwrap()).abs() < 1e-12);
        assert!((psnr_db(&t.map(|_| 0.1), &t, 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr_db(&t, &t, 2.0).unwrap(), DB_CAP);
    }

    #[test]
    fn summary_averages_samples() {
        let s = [
            SampleMetrics { mse: 1.0, snr_db: 10.0, psnr_db: 20.0 },
            SampleMetrics { mse: 3.0, snr_db: 30.0, psnr_db: 40.0 },
        ];
        let sum = MetricSummary::from_samples(&s, 2.0);
        assert_eq!((sum.mse, sum.snr_db, sum.psnr_db, sum.count), (2.0, 20.0, 30.0, 2));
    }

    proptest! {
        #[test]
        fn improving_a_pixel_never_lowers_psnr(
            vals in prop::collection::vec(-1.0f64..1.0, 16),
            noise in prop::collection::vec(-0.5f64..0.5, 16),
            idx in 0usize..16,
        ) {
            let t = FeatureMap::from_vec(4, 4, vals).unwrap();
            let mut p = t.clone();
            for (v, e) in p.as_mut_slice().iter_mut().zip(&noise) {
                *v += e;
            }
            let before = psnr_db(&p, &t, 2.0).unwrap();
            let mut q = p.clone();
            q.as_mut_slice()[idx] = 0.5 * (p.as_slice()[idx] + t.as_slice()[idx]);
            prop_assert!(psnr_db(&q, &t, 2.0).unwrap() >= before - 1e-12);
        }

        #[test]
        fn metrics_are_permutation_invariant(
            vals in prop::collection::vec(-1.0f64..1.0, 12),
            noise in prop::collection::vec(-0.5f64..0.5, 12),
        ) {
            let t = FeatureMap::from_vec(3, 4, vals.clone()).unwrap();
            let p = FeatureMap::from_vec(3, 4, vals.iter().zip(&noise).map(|(a, b)| a + b).collect()).unwrap();
            let rev = |m: &FeatureMap| FeatureMap::from_vec(3, 4, m.as_slice().iter().rev().copied().collect()).unwrap();
            prop_assert!((mse(&p, &t).unwrap() - mse(&rev(&p), &rev(&t)).unwrap()).abs() < 1e-12);
            prop_assert!((snr_db(&p, &t).unwrap() - snr_db(&rev(&p), &rev(&t)).unwrap()).abs() < 1e-9);
        }
    }
}
