//! Kriging interpolation of station-observed spatio-temporal channels onto
//! the grid: Ordinary Kriging for weather, Universal Kriging with a linear
//! drift and a pluggable distance for traffic.

mod network;
mod variogram;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{HintError, Result};
use crate::grid::{GridSpec, RoadMask};

pub use network::NetworkDistance;
pub use variogram::{empirical_variogram, fit_variogram, fit_variogram_pooled, VariogramBin, VariogramModel};

const SINGULAR_RIDGE: f64 = 1e-10;

/// One station reading, in grid-local kilometres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationObservation {
    pub x: f64,
    pub y: f64,
    pub value: f64,
    pub day: usize,
}

impl StationObservation {
    pub fn distance(&self, other: &StationObservation) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

pub trait DistanceMetric {
    fn distance(&self, a: (f64, f64), b: (f64, f64)) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Euclidean;

impl DistanceMetric for Euclidean {
    fn distance(&self, a: (f64, f64), b: (f64, f64)) -> f64 {
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
    }
}

/// Averages observations at identical coordinates.
pub fn dedupe(obs: &[StationObservation]) -> Vec<StationObservation> {
    let mut groups: BTreeMap<(u64, u64), (StationObservation, usize)> = BTreeMap::new();
    for o in obs {
        let key = (o.x.to_bits(), o.y.to_bits());
        groups
            .entry(key)
            .and_modify(|(acc, n)| {
                acc.value += o.value;
                *n += 1;
            })
            .or_insert((*o, 1));
    }
    let mut out: Vec<StationObservation> = groups
        .into_values()
        .map(|(mut o, n)| {
            o.value /= n as f64;
            o
        })
        .collect();
    // restore first-seen order so results do not depend on float bit patterns
    out.sort_by_key(|o| obs.iter().position(|p| p.x == o.x && p.y == o.y));
    out
}

/// A factorized kriging system for one set of stations.
pub struct Kriger<'m> {
    sites: Vec<StationObservation>,
    model: VariogramModel,
    metric: &'m dyn DistanceMetric,
    inverse: DMatrix<f64>,
    drift: Option<DriftScaling>,
}

#[derive(Debug, Clone, Copy)]
struct DriftScaling {
    mx: f64,
    my: f64,
    scale: f64,
}

impl DriftScaling {
    fn basis(&self, x: f64, y: f64) -> [f64; 3] {
        [1.0, (x - self.mx) / self.scale, (y - self.my) / self.scale]
    }
}

impl<'m> Kriger<'m> {
    /// Ordinary Kriging: constant unknown mean, weights sum to one.
    pub fn ordinary(obs: &[StationObservation], model: VariogramModel, metric: &'m dyn DistanceMetric) -> Result<Self> {
        Self::build(obs, model, metric, false)
    }

    /// Universal Kriging with drift basis `{1, x, y}`. Falls back to
    /// Ordinary Kriging when the drift design is rank deficient.
    pub fn universal(obs: &[StationObservation], model: VariogramModel, metric: &'m dyn DistanceMetric) -> Result<Self> {
        Self::build(obs, model, metric, true)
    }

    fn build(obs: &[StationObservation], model: VariogramModel, metric: &'m dyn DistanceMetric, drift: bool) -> Result<Self> {
        if obs.iter().any(|o| !o.x.is_finite() || !o.y.is_finite() || !o.value.is_finite()) {
            return Err(HintError::InvalidInput("station observation is not finite".into()));
        }
        let sites = dedupe(obs);
        if sites.is_empty() {
            return Err(HintError::InsufficientData("kriging needs at least one observation".into()));
        }
        let n = sites.len();
        let drift = if drift { drift_scaling(&sites) } else { None };
        let extra = if drift.is_some() { 3 } else { 1 };
        let dim = n + extra;
        let mut sys = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let d = metric.distance((sites[i].x, sites[i].y), (sites[j].x, sites[j].y));
                    sys[(i, j)] = model.semivariance(d);
                }
            }
            let row = match drift {
                Some(s) => s.basis(sites[i].x, sites[i].y).to_vec(),
                None => vec![1.0],
            };
            for (k, v) in row.into_iter().enumerate() {
                sys[(i, n + k)] = v;
                sys[(n + k, i)] = v;
            }
        }
        let inverse = match sys.clone().try_inverse() {
            Some(inv) if inv.iter().all(|v| v.is_finite()) => inv,
            _ => {
                for i in 0..n {
                    sys[(i, i)] += SINGULAR_RIDGE;
                }
                sys.try_inverse()
                    .ok_or_else(|| HintError::InsufficientData("kriging system is singular".into()))?
            }
        };
        Ok(Kriger { sites, model, metric, inverse, drift })
    }

    pub fn is_universal(&self) -> bool {
        self.drift.is_some()
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    /// Station weights for one target, in deduplicated site order.
    pub fn weights(&self, target: (f64, f64)) -> Vec<f64> {
        let n = self.sites.len();
        let extra = if self.drift.is_some() { 3 } else { 1 };
        let mut rhs = DVector::<f64>::zeros(n + extra);
        for (i, s) in self.sites.iter().enumerate() {
            rhs[i] = self.model.semivariance(self.metric.distance((s.x, s.y), target));
        }
        match self.drift {
            Some(sc) => {
                for (k, v) in sc.basis(target.0, target.1).into_iter().enumerate() {
                    rhs[n + k] = v;
                }
            }
            None => rhs[n] = 1.0,
        }
        let sol = &self.inverse * rhs;
        sol.iter().take(n).copied().collect()
    }

    pub fn predict(&self, target: (f64, f64)) -> f64 {
        if self.sites.len() == 1 {
            return self.sites[0].value;
        }
        self.weights(target).iter().zip(&self.sites).map(|(w, s)| w * s.value).sum()
    }

    pub fn sites(&self) -> &[StationObservation] {
        &self.sites
    }
}

fn drift_scaling(sites: &[StationObservation]) -> Option<DriftScaling> {
    if sites.len() < 4 {
        log::warn!("universal kriging needs >= 4 stations, got {}; using ordinary kriging", sites.len());
        return None;
    }
    let n = sites.len() as f64;
    let mx = sites.iter().map(|s| s.x).sum::<f64>() / n;
    let my = sites.iter().map(|s| s.y).sum::<f64>() / n;
    let scale = sites
        .iter()
        .map(|s| ((s.x - mx).powi(2) + (s.y - my).powi(2)).sqrt())
        .fold(0.0, f64::max);
    if scale <= 0.0 {
        log::warn!("drift design is rank deficient; using ordinary kriging");
        return None;
    }
    let sc = DriftScaling { mx, my, scale };
    let mut gram = nalgebra::Matrix3::<f64>::zeros();
    for s in sites {
        let b = nalgebra::Vector3::from(sc.basis(s.x, s.y));
        gram += b * b.transpose();
    }
    let eig = gram.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if lo <= 1e-10 * hi {
        log::warn!("drift design is rank deficient; using ordinary kriging");
        return None;
    }
    Some(sc)
}

pub fn ordinary_krige(
    obs: &[StationObservation],
    model: VariogramModel,
    targets: &[(f64, f64)],
) -> Result<Vec<f64>> {
    let k = Kriger::ordinary(obs, model, &Euclidean)?;
    Ok(targets.iter().map(|&t| k.predict(t)).collect())
}

pub fn universal_krige(
    obs: &[StationObservation],
    model: VariogramModel,
    targets: &[(f64, f64)],
    metric: &dyn DistanceMetric,
) -> Result<Vec<f64>> {
    let k = Kriger::universal(obs, model, metric)?;
    Ok(targets.iter().map(|&t| k.predict(t)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Weather,
    Traffic,
}

/// Interpolates one channel onto the grid for every day, `[rows, cols, days]`.
///
/// Weather channels use Ordinary Kriging at every cell; traffic channels use
/// Universal Kriging at road cells only (other cells stay 0). A day without
/// observations repeats the previous day's field; the first day falls back to
/// the mean of all observations on days before `train_end`.
pub fn impute_channel(
    per_day: &[Vec<StationObservation>],
    spec: &GridSpec,
    mask: &RoadMask,
    kind: ChannelKind,
    metric: &dyn DistanceMetric,
    train_end: usize,
) -> Result<Array3<f64>> {
    let (rows, cols, days) = (spec.rows, spec.cols, spec.num_days);
    if per_day.len() != days {
        return Err(HintError::InvalidInput(format!(
            "expected observations for {days} days, got {}",
            per_day.len()
        )));
    }
    let targets: Vec<(usize, usize)> = match kind {
        ChannelKind::Weather => (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect(),
        ChannelKind::Traffic => mask.road_cells(),
    };
    let train: Vec<&[StationObservation]> = per_day[..train_end.min(days)]
        .iter()
        .map(|d| d.as_slice())
        .filter(|d| !d.is_empty())
        .collect();
    let train_obs: Vec<f64> = train.iter().flat_map(|d| d.iter().map(|o| o.value)).collect();
    let train_mean = if train_obs.is_empty() {
        0.0
    } else {
        train_obs.iter().sum::<f64>() / train_obs.len() as f64
    };
    let model = fit_variogram_pooled(&train, 15).ok();

    let mut out = Array3::<f64>::zeros((rows, cols, days));
    for day in 0..days {
        let obs = &per_day[day];
        if obs.is_empty() {
            for &(r, c) in &targets {
                out[[r, c, day]] = if day == 0 { train_mean } else { out[[r, c, day - 1]] };
            }
            continue;
        }
        let model = match model {
            Some(m) => m,
            None => {
                let mean = obs.iter().map(|o| o.value).sum::<f64>() / obs.len() as f64;
                for &(r, c) in &targets {
                    out[[r, c, day]] = mean;
                }
                continue;
            }
        };
        let kriger = match kind {
            ChannelKind::Weather => Kriger::ordinary(obs, model, metric)?,
            ChannelKind::Traffic => Kriger::universal(obs, model, metric)?,
        };
        for &(r, c) in &targets {
            out[[r, c, day]] = kriger.predict(spec.cell_center_xy(r, c));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn obs(x: f64, y: f64, value: f64) -> StationObservation {
        StationObservation { x, y, value, day: 0 }
    }

    fn model() -> VariogramModel {
        VariogramModel { nugget: 0.0, sill: 2.0, range_km: 15.0 }
    }

    fn random_obs(seed: u64, n: usize) -> Vec<StationObservation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| obs(rng.random::<f64>() * 50.0, rng.random::<f64>() * 50.0, rng.random::<f64>() * 10.0))
            .collect()
    }

    #[test]
    fn single_station_is_constant() {
        let p = ordinary_krige(&[obs(3.0, 4.0, 7.5)], model(), &[(0.0, 0.0), (40.0, 1.0)]).unwrap();
        assert_eq!(p, vec![7.5, 7.5]);
    }

    #[test]
    fn weights_sum_to_one() {
        let o = random_obs(1, 12);
        let k = Kriger::ordinary(&o, model(), &Euclidean).unwrap();
        for t in [(1.0, 1.0), (25.0, 30.0), (80.0, -10.0)] {
            let s: f64 = k.weights(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn exact_at_stations() {
        let o = random_obs(2, 10);
        let targets: Vec<_> = o.iter().map(|s| (s.x, s.y)).collect();
        let p = ordinary_krige(&o, model(), &targets).unwrap();
        for (pi, s) in p.iter().zip(&o) {
            assert!((pi - s.value).abs() < 1e-9);
        }
    }

    #[test]
    fn symmetric_pair_midpoint() {
        // [[0, g, 1], [g, 0, 1], [1, 1, 0]] [l1, l2, mu] = [g0, g0, 1] gives l1 = l2 = 1/2
        let o = [obs(0.0, 0.0, 2.0), obs(10.0, 0.0, 4.0)];
        let p = ordinary_krige(&o, model(), &[(5.0, 0.0), (5.0, 7.0)]).unwrap();
        assert!((p[0] - 3.0).abs() < 1e-9);
        assert!((p[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn duplicates_are_averaged() {
        let o = [obs(0.0, 0.0, 2.0), obs(0.0, 0.0, 4.0), obs(10.0, 0.0, 3.0)];
        let k = Kriger::ordinary(&o, model(), &Euclidean).unwrap();
        assert_eq!(k.n_sites(), 2);
        assert!((k.predict((0.0, 0.0)) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn universal_reproduces_a_plane() {
        let mut o = random_obs(4, 9);
        for s in &mut o {
            s.value = 1.5 + 0.3 * s.x - 0.2 * s.y;
        }
        let targets = [(10.0, 10.0), (30.0, 5.0), (45.0, 45.0)];
        let p = universal_krige(&o, model(), &targets, &Euclidean).unwrap();
        for (pi, t) in p.iter().zip(targets) {
            assert!((pi - (1.5 + 0.3 * t.0 - 0.2 * t.1)).abs() < 1e-6);
        }
    }

    #[test]
    fn universal_matches_ordinary_on_constant_field() {
        let mut o = random_obs(5, 8);
        for s in &mut o {
            s.value = 4.0;
        }
        let targets = [(3.0, 3.0), (20.0, 40.0)];
        let a = universal_krige(&o, model(), &targets, &Euclidean).unwrap();
        let b = ordinary_krige(&o, model(), &targets).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn collinear_stations_fall_back_to_ordinary() {
        let o: Vec<_> = (0..5).map(|i| obs(i as f64 * 5.0, 0.0, i as f64)).collect();
        let k = Kriger::universal(&o, model(), &Euclidean).unwrap();
        assert!(!k.is_universal());
    }

    #[test]
    fn predictions_stay_in_sanity_envelope() {
        for seed in 0..5 {
            let o = random_obs(seed + 10, 15);
            let vals: Vec<f64> = o.iter().map(|s| s.value).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            let (lo, hi) = (vals.iter().cloned().fold(f64::INFINITY, f64::min), vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            let fitted = fit_variogram(&o, 15).unwrap();
            let targets: Vec<_> = (0..10).flat_map(|i| (0..10).map(move |j| (i as f64 * 5.0, j as f64 * 5.0))).collect();
            for p in ordinary_krige(&o, fitted, &targets).unwrap() {
                assert!(p >= lo - 3.0 * sd && p <= hi + 3.0 * sd);
            }
            for p in universal_krige(&o, fitted, &targets, &Euclidean).unwrap() {
                assert!(p >= lo - 3.0 * sd && p <= hi + 3.0 * sd);
            }
        }
    }

    fn spec(rows: usize, cols: usize, days: usize) -> GridSpec {
        GridSpec {
            rows,
            cols,
            cell_size_km: 5.0,
            origin_lat: 41.0,
            origin_lon: -93.0,
            time_start: NaiveDate::from_ymd_opt(2016, 1, 1).unwrap(),
            num_days: days,
        }
    }

    #[test]
    fn stations_at_every_cell_reproduce_input() {
        let s = spec(3, 3, 8);
        let mask = RoadMask::full(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = Array3::from_shape_fn((3, 3, 8), |_| rng.random::<f64>() * 3.0);
        let per_day: Vec<Vec<StationObservation>> = (0..8)
            .map(|d| {
                (0..3)
                    .flat_map(|r| (0..3).map(move |c| (r, c)))
                    .map(|(r, c)| {
                        let (x, y) = s.cell_center_xy(r, c);
                        StationObservation { x, y, value: truth[[r, c, d]], day: d }
                    })
                    .collect()
            })
            .collect();
        let out = impute_channel(&per_day, &s, &mask, ChannelKind::Weather, &Euclidean, 6).unwrap();
        for (a, b) in out.iter().zip(truth.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn single_constant_station_fills_everything() {
        let s = spec(4, 4, 8);
        let mask = RoadMask::full(4, 4);
        let per_day: Vec<Vec<StationObservation>> = (0..8)
            .map(|d| vec![StationObservation { x: 7.0, y: 3.0, value: 5.0, day: d }])
            .collect();
        let out = impute_channel(&per_day, &s, &mask, ChannelKind::Weather, &Euclidean, 6).unwrap();
        assert!(out.iter().all(|&v| v == 5.0));
    }

    #[test]
    fn missing_day_repeats_previous_field() {
        let s = spec(3, 3, 8);
        let mut mask = RoadMask::full(3, 3);
        mask.mask[[0, 0]] = 0;
        let mut per_day: Vec<Vec<StationObservation>> = (0..8)
            .map(|d| {
                random_obs(d as u64, 6)
                    .into_iter()
                    .map(|mut o| {
                        o.x *= 0.3;
                        o.y *= 0.3;
                        o.day = d;
                        o
                    })
                    .collect()
            })
            .collect();
        per_day[3].clear();
        per_day[0].clear();
        let out = impute_channel(&per_day, &s, &mask, ChannelKind::Traffic, &Euclidean, 6).unwrap();
        let train: Vec<f64> = per_day[..6].iter().flatten().map(|o| o.value).collect();
        let mean = train.iter().sum::<f64>() / train.len() as f64;
        for r in 0..3 {
            for c in 0..3 {
                if (r, c) == (0, 0) {
                    assert!(out.slice(ndarray::s![0, 0, ..]).iter().all(|&v| v == 0.0));
                    continue;
                }
                assert_eq!(out[[r, c, 3]], out[[r, c, 2]]);
                assert_eq!(out[[r, c, 0]], mean);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn ordinary_weights_sum_to_one_anywhere(
            seed in 0u64..1000,
            n in 2usize..15,
            tx in -20.0f64..70.0,
            ty in -20.0f64..70.0,
            range in 1.0f64..40.0,
        ) {
            let o = random_obs(seed, n);
            let m = VariogramModel { nugget: 0.1, sill: 2.0, range_km: range };
            let k = Kriger::ordinary(&o, m, &Euclidean).unwrap();
            let s: f64 = k.weights((tx, ty)).iter().sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-8);
        }
    }
}
