//! Evaluation metrics: SMSE, MSLL, ensemble autocovariance, amplitude
//! histograms and the F²ID score.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{channelwise_prior_moments, fit_batch, w2_squared_gaussian, GaussianMomentPair, GaussianProcessSpec};
use crate::grid::FunctionBatch;

/// Mean squared error normalised by the population variance of `truth`.
pub fn smse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("prediction and truth lengths differ"));
    }
    if truth.len() < 2 {
        return Err(Error::invalid("SMSE needs at least 2 points"));
    }
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let var = truth.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(Error::invalid("SMSE is undefined for a constant truth"));
    }
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    Ok(mse / var)
}

/// Mean over points of `½ log(2π σ̂²) + (y − ŷ)² / 2σ̂²`.
pub fn msll(pred_mean: &[f64], pred_var: &[f64], truth: &[f64]) -> Result<f64> {
    if pred_mean.len() != truth.len() || pred_var.len() != truth.len() {
        return Err(Error::shape("mean, variance and truth lengths differ"));
    }
    if truth.is_empty() {
        return Err(Error::invalid("MSLL needs at least one point"));
    }
    if let Some(v) = pred_var.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::invalid(format!("predictive variance must be positive, got {v}")));
    }
    let total: f64 = pred_mean
        .iter()
        .zip(pred_var)
        .zip(truth)
        .map(|((m, v), y)| 0.5 * (2.0 * PI * v).ln() + (y - m).powi(2) / (2.0 * v))
        .sum();
    Ok(total / truth.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutocovarianceCurve {
    pub lags: Vec<usize>,
    /// Lag in coordinate units (node spacing of the last axis).
    pub distances: Vec<f64>,
    pub values: Vec<f64>,
    /// Standard error of each value across samples.
    pub std_errors: Vec<f64>,
}

/// Ensemble autocovariance of channel 0: the ensemble mean field is removed,
/// then products at separation `lag` are averaged over positions and over
/// samples (`n − 1` denominator). In 2D horizontal and vertical pairs are
/// pooled.
pub fn autocovariance(batch: &FunctionBatch, max_lag: usize) -> Result<AutocovarianceCurve> {
    let n = batch.count();
    if n < 2 {
        return Err(Error::invalid("autocovariance needs at least 2 samples"));
    }
    let grid = batch.grid();
    let res = grid.resolution();
    let (rows, cols) = if grid.dims() == 1 { (1, res[0]) } else { (res[0], res[1]) };
    let limit = if grid.dims() == 1 { cols } else { rows.min(cols) };
    if max_lag >= limit {
        return Err(Error::invalid(format!("lag {max_lag} exceeds the grid extent {limit}")));
    }
    let nodes = rows * cols;
    let mut mean = vec![0.0; nodes];
    for i in 0..n {
        let s = &batch.sample_values(i)[..nodes];
        mean.iter_mut().zip(s).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let scale = n as f64 / (n - 1) as f64;
    let mut values = Vec::with_capacity(max_lag + 1);
    let mut std_errors = Vec::with_capacity(max_lag + 1);
    let mut centred = vec![0.0; nodes];
    let mut per_sample = vec![vec![0.0; n]; max_lag + 1];
    for i in 0..n {
        let s = &batch.sample_values(i)[..nodes];
        centred.iter_mut().zip(s).zip(&mean).for_each(|((c, v), m)| *c = v - m);
        for (lag, slot) in per_sample.iter_mut().enumerate() {
            let mut acc = 0.0;
            let mut pairs = 0usize;
            for r in 0..rows {
                for c in 0..cols - lag {
                    acc += centred[r * cols + c] * centred[r * cols + c + lag];
                    pairs += 1;
                }
            }
            if grid.dims() == 2 {
                for r in 0..rows - lag {
                    for c in 0..cols {
                        acc += centred[r * cols + c] * centred[(r + lag) * cols + c];
                        pairs += 1;
                    }
                }
            }
            slot[i] = scale * acc / pairs as f64;
        }
    }
    for s in &per_sample {
        let m = s.iter().sum::<f64>() / n as f64;
        let var = s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        values.push(m);
        std_errors.push((var / n as f64).sqrt());
    }
    let ax = grid.axis_coordinates(grid.dims() - 1);
    let h = ax[1] - ax[0];
    Ok(AutocovarianceCurve {
        lags: (0..=max_lag).collect(),
        distances: (0..=max_lag).map(|l| l as f64 * h).collect(),
        values,
        std_errors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` increasing edges.
    pub edges: Vec<f64>,
    pub masses: Vec<f64>,
    /// Mass of values outside the edges; bin masses plus this sum to 1.
    pub outside: f64,
}

impl Histogram {
    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }
}

/// Normalised histogram of all pointwise values. Without a range the bins
/// span the observed minimum to maximum (a constant batch gets a unit-wide
/// range around its value).
pub fn amplitude_histogram(batch: &FunctionBatch, bins: usize, range: Option<(f64, f64)>) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::invalid("a histogram needs at least 2 bins"));
    }
    let vals = batch.values();
    if vals.is_empty() {
        return Err(Error::invalid("cannot histogram an empty batch"));
    }
    let (lo, hi) = match range {
        Some((lo, hi)) if lo < hi => (lo, hi),
        Some((lo, hi)) => return Err(Error::invalid(format!("empty histogram range [{lo}, {hi}]"))),
        None => {
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if lo == hi {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        }
    };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    let mut outside = 0usize;
    for &v in vals {
        if v < lo || v > hi || !v.is_finite() {
            outside += 1;
        } else {
            // the top edge belongs to the last bin
            let k = (((v - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
    }
    let total = vals.len() as f64;
    Ok(Histogram {
        edges: (0..=bins).map(|k| lo + k as f64 * width).collect(),
        masses: counts.iter().map(|&c| c as f64 / total).collect(),
        outside: outside as f64 / total,
    })
}

/// Exact squared 2-Wasserstein distance (normalised by dimension) between
/// the empirical Gaussian fit of `batch` and `reference`.
pub fn f2id_against(batch: &FunctionBatch, reference: &GaussianMomentPair) -> Result<f64> {
    let fit = fit_batch(batch)?;
    w2_squared_gaussian(reference, &fit)
}

/// F²ID score of `batch` against independent copies of the GP `spec` on the
/// batch's grid, one per channel.
pub fn f2id_score(batch: &FunctionBatch, spec: &GaussianProcessSpec) -> Result<f64> {
    let reference = channelwise_prior_moments(spec, batch.grid(), batch.channels(), 0.0);
    f2id_against(batch, &reference)
}

/// Named scalars and curves from one evaluation, with provenance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scalars: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub autocovariance: Option<AutocovarianceCurve>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<Histogram>,
    pub provenance: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn insert(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!("metric {name} is {value}")));
        }
        self.scalars.insert(name.to_string(), value);
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Two-column text tables (`lag_distance value` / `bin_center mass`).
    pub fn curve_tables(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if let Some(c) = &self.autocovariance {
            let t = c.distances.iter().zip(&c.values).map(|(d, v)| format!("{d} {v}\n")).collect();
            out.push(("autocovariance.txt".to_string(), t));
        }
        if let Some(h) = &self.histogram {
            let t = h.centers().iter().zip(&h.masses).map(|(c, m)| format!("{c} {m}\n")).collect();
            out.push(("histogram.txt".to_string(), t));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{gp_sample, matern_kernel, prior_moments};
    use crate::grid::Grid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn smse_examples() {
        let t = [0.0, 2.0];
        assert_eq!(smse(&t, &t).unwrap(), 0.0);
        assert_eq!(smse(&[1.0, 1.0], &t).unwrap(), 1.0);
        assert_eq!(smse(&[0.0, 1.0], &t).unwrap(), 0.5);
        assert!(smse(&[1.0, 1.0], &[3.0, 3.0]).is_err());
    }

    #[test]
    fn msll_examples() {
        let y = [0.3, -1.0, 2.0];
        let v = msll(&y, &[1.0; 3], &y).unwrap();
        assert!((v - 0.918_938_533_204_672_7).abs() < 1e-12);
        let v = msll(&y, &[1.0 / (2.0 * PI); 3], &y).unwrap();
        assert!(v.abs() < 1e-12);
        assert!(msll(&y, &[1.0, 0.0, 1.0], &y).is_err());
    }

    proptest! {
        #[test]
        fn scores_are_permutation_invariant(
            vals in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0, 0.1f64..2.0), 3..20),
            seed in any::<u64>()
        ) {
            let mut idx: Vec<usize> = (0..vals.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            let p: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let t: Vec<f64> = vals.iter().map(|v| v.1).collect();
            let s: Vec<f64> = vals.iter().map(|v| v.2).collect();
            let pp: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
            let tp: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
            let sp: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
            prop_assert!((msll(&p, &s, &t).unwrap() - msll(&pp, &sp, &tp).unwrap()).abs() < 1e-12);
            if let (Ok(a), Ok(b)) = (smse(&p, &t), smse(&pp, &tp)) {
                prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn autocovariance_basics() {
        let g = Grid::line(16).unwrap();
        let zero = FunctionBatch::zeros(g.clone(), 1, 4);
        assert!(autocovariance(&zero, 5).unwrap().values.iter().all(|v| *v == 0.0));
        let b = gp_sample(&GaussianProcessSpec::new(0.3, 1.5).unwrap(), &g, 20, 1).unwrap();
        let mut shifted = b.clone();
        shifted.values_mut().iter_mut().for_each(|v| *v += 7.0);
        let a = autocovariance(&b, 6).unwrap();
        let s = autocovariance(&shifted, 6).unwrap();
        for (x, y) in a.values.iter().zip(&s.values) {
            assert!((x - y).abs() < 1e-10);
        }
        assert!(autocovariance(&b, 16).is_err());
    }

    #[test]
    fn autocovariance_matches_kernel() {
        let spec = GaussianProcessSpec::new(0.5, 1.5).unwrap();
        let g = Grid::line(64).unwrap();
        let b = gp_sample(&spec, &g, 10_000, 2).unwrap();
        let c = autocovariance(&b, 20).unwrap();
        for ((d, v), se) in c.distances.iter().zip(&c.values).zip(&c.std_errors) {
            let k = matern_kernel(*d, &spec);
            assert!((v - k).abs() < 3.0 * se, "lag {d}: {v} vs {k} (se {se})");
        }
    }

    #[test]
    fn white_noise_autocovariance_vanishes() {
        let g = Grid::square(12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..500 * 144).map(|_| rng.sample(StandardNormal)).collect();
        let b = FunctionBatch::new(g, 1, 500, v).unwrap();
        let c = autocovariance(&b, 5).unwrap();
        for (v, se) in c.values.iter().zip(&c.std_errors).skip(1) {
            assert!(v.abs() < 3.0 * se);
        }
    }

    #[test]
    fn histogram_examples() {
        let g = Grid::line(8).unwrap();
        let mut c = FunctionBatch::zeros(g.clone(), 1, 3);
        c.values_mut().iter_mut().for_each(|v| *v = 0.7);
        let h = amplitude_histogram(&c, 10, None).unwrap();
        assert_eq!(h.masses.iter().filter(|m| **m > 0.0).count(), 1);
        assert!((h.masses.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(amplitude_histogram(&c, 1, None).is_err());
        let out = amplitude_histogram(&c, 4, Some((-0.5, 0.5))).unwrap();
        assert_eq!(out.outside, 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 200_000;
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let b = FunctionBatch::new(Grid::line(100).unwrap(), 1, n / 100, v).unwrap();
        let h = amplitude_histogram(&b, 16, Some((-4.0, 4.0))).unwrap();
        let cdf = |x: f64| 0.5 * (1.0 + erf(x / 2f64.sqrt()));
        for (w, m) in h.edges.windows(2).zip(&h.masses) {
            let p = cdf(w[1]) - cdf(w[0]);
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            assert!((m - p).abs() < 3.0 * sd + 1e-12, "bin {w:?}: {m} vs {p}");
        }
    }

    // Simpson quadrature; closed-form approximations are too coarse for the bands.
    fn erf(x: f64) -> f64 {
        let steps = 4000;
        let h = x / steps as f64;
        let f = |t: f64| (-t * t).exp();
        let mut s = f(0.0) + f(x);
        for k in 1..steps {
            s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(k as f64 * h);
        }
        s * h / 3.0 * 2.0 / PI.sqrt()
    }

    #[test]
    fn f2id_examples() {
        let g = Grid::square(6).unwrap();
        let spec = GaussianProcessSpec::new(0.5, 1.5).unwrap();
        let m = prior_moments(&spec, &g, 0.0);
        assert!(w2_squared_gaussian(&m, &m).unwrap().abs() < 1e-9);
        let b = gp_sample(&spec, &g, 2000, 5).unwrap();
        let near = f2id_score(&b, &spec).unwrap();
        let far = f2id_score(&b, &GaussianProcessSpec::new(0.1, 1.5).unwrap()).unwrap();
        assert!(near >= 0.0 && near < far, "{near} vs {far}");
    }

    #[test]
    fn report_rejects_non_finite() {
        let mut r = MetricReport::default();
        assert!(r.insert("x", f64::NAN).is_err());
        r.insert("smse", 0.1).unwrap();
        assert!(r.to_json().contains("smse"));
    }
}
