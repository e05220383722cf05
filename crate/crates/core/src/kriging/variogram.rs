//! Exponential semivariogram and its method-of-moments fit.

use serde::{Deserialize, Serialize};

use super::StationObservation;
use crate::error::{HintError, Result};

const SILL_EPS: f64 = 1e-12;
const RANGE_GRID: usize = 80;

/// `gamma(h) = nugget + (sill - nugget) * (1 - exp(-h / range))` for `h > 0`,
/// `gamma(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramModel {
    pub nugget: f64,
    pub sill: f64,
    pub range_km: f64,
}

impl VariogramModel {
    pub fn semivariance(&self, h: f64) -> f64 {
        if h <= 0.0 {
            return 0.0;
        }
        self.nugget + (self.sill - self.nugget) * (1.0 - (-h / self.range_km).exp())
    }

    fn fallback(variance: f64, max_dist: f64) -> Self {
        VariogramModel {
            nugget: 0.0,
            sill: variance.max(SILL_EPS),
            range_km: if max_dist > 0.0 { max_dist / 4.0 } else { 1.0 },
        }
    }
}

/// One bin of the empirical semivariogram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariogramBin {
    pub distance: f64,
    pub semivariance: f64,
    pub pairs: usize,
}

/// Method-of-moments semivariogram over equal-width distance bins. Pairs are
/// only formed within a group (e.g. within one day); bins without pairs are
/// dropped.
pub fn empirical_variogram(groups: &[&[StationObservation]], n_bins: usize) -> Vec<VariogramBin> {
    let mut pairs = Vec::new();
    for g in groups {
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                let d = g[i].distance(&g[j]);
                if d > 0.0 {
                    pairs.push((d, 0.5 * (g[i].value - g[j].value).powi(2)));
                }
            }
        }
    }
    let max_d = pairs.iter().map(|p| p.0).fold(0.0, f64::max);
    if pairs.is_empty() || n_bins == 0 {
        return Vec::new();
    }
    let width = max_d / n_bins as f64;
    let mut acc = vec![(0.0, 0.0, 0usize); n_bins];
    for (d, sv) in pairs {
        let b = ((d / width) as usize).min(n_bins - 1);
        acc[b].0 += d;
        acc[b].1 += sv;
        acc[b].2 += 1;
    }
    acc.into_iter()
        .filter(|a| a.2 > 0)
        .map(|(sd, ssv, n)| VariogramBin { distance: sd / n as f64, semivariance: ssv / n as f64, pairs: n })
        .collect()
}

/// Fits an exponential model to a single set of observations.
pub fn fit_variogram(obs: &[StationObservation], n_bins: usize) -> Result<VariogramModel> {
    fit_variogram_pooled(&[obs], n_bins)
}

/// Fits one exponential model to the pooled empirical semivariogram of
/// several observation groups.
pub fn fit_variogram_pooled(groups: &[&[StationObservation]], n_bins: usize) -> Result<VariogramModel> {
    let total: usize = groups.iter().map(|g| g.len()).sum();
    if total < 5 {
        return Err(HintError::InsufficientData(format!(
            "variogram fit needs >= 5 observations, got {total}; use a constant fill instead"
        )));
    }
    let values: Vec<f64> = groups.iter().flat_map(|g| g.iter().map(|o| o.value)).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    let max_d = groups
        .iter()
        .flat_map(|g| g.iter().enumerate().flat_map(move |(i, a)| g[i + 1..].iter().map(move |b| a.distance(b))))
        .fold(0.0, f64::max);

    let bins = empirical_variogram(groups, n_bins);
    if bins.len() < 2 || bins.iter().all(|b| b.semivariance <= 0.0) {
        return Ok(VariogramModel::fallback(variance, max_d));
    }
    match least_squares_exponential(&bins) {
        Some(m) if m.nugget.is_finite() && m.sill.is_finite() && m.sill > 0.0 => Ok(m),
        _ => Ok(VariogramModel::fallback(variance, max_d)),
    }
}

/// Weighted least squares over `(nugget, partial sill)` for each range on a
/// log grid, keeping both linear coefficients nonnegative. The range is
/// searched between the shortest lag and half the longest lag.
fn least_squares_exponential(bins: &[VariogramBin]) -> Option<VariogramModel> {
    let h_min = bins.iter().map(|b| b.distance).fold(f64::INFINITY, f64::min);
    let h_max = bins.iter().map(|b| b.distance).fold(0.0, f64::max);
    let (lo, hi) = (h_min.ln(), (0.5 * h_max).max(h_min).ln());
    let mut best: Option<(f64, VariogramModel)> = None;
    for k in 0..RANGE_GRID {
        let range = (lo + (hi - lo) * k as f64 / (RANGE_GRID - 1) as f64).exp();
        let (nugget, psill, sse) = nnls2(bins, range);
        if best.as_ref().is_none_or(|b| sse < b.0 - 1e-15 * b.0.abs()) {
            best = Some((sse, VariogramModel { nugget, sill: nugget + psill, range_km: range }));
        }
    }
    best.map(|(_, mut m)| {
        if m.sill <= m.nugget {
            m.sill = m.nugget + SILL_EPS.max(m.nugget * 1e-9);
        }
        m
    })
}

/// Two-variable nonnegative least squares for `y ~ a + b * f(h)`,
/// `f(h) = 1 - exp(-h / range)`, weighted by pair counts.
fn nnls2(bins: &[VariogramBin], range: f64) -> (f64, f64, f64) {
    let f: Vec<f64> = bins.iter().map(|b| 1.0 - (-b.distance / range).exp()).collect();
    let (mut sw, mut sf, mut sff, mut sy, mut sfy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (b, &fi) in bins.iter().zip(&f) {
        let w = b.pairs as f64;
        sw += w;
        sf += w * fi;
        sff += w * fi * fi;
        sy += w * b.semivariance;
        sfy += w * fi * b.semivariance;
    }
    let sse = |a: f64, c: f64| -> f64 {
        bins.iter().zip(&f).map(|(b, &fi)| b.pairs as f64 * (b.semivariance - a - c * fi).powi(2)).sum()
    };
    let mut candidates = vec![(sy / sw, 0.0)];
    if sff > 0.0 {
        candidates.push((0.0, (sfy / sff).max(0.0)));
    }
    let det = sw * sff - sf * sf;
    if det.abs() > 1e-12 * sw * sff.max(1e-300) {
        let a = (sy * sff - sf * sfy) / det;
        let c = (sw * sfy - sf * sy) / det;
        if a >= 0.0 && c >= 0.0 {
            candidates.push((a, c));
        }
    }
    candidates
        .into_iter()
        .map(|(a, c)| (a.max(0.0), c, sse(a.max(0.0), c)))
        .min_by(|x, y| x.2.total_cmp(&y.2))
        .expect("at least one candidate")
}
