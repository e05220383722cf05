//! Day splits, the Historical Average baseline, masked error metrics and the
//! knowledge-transfer ablation.

use std::collections::BTreeMap;

use log::info;
use ndarray::{Array2, Array3};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HintError, Result};
use crate::grid::{AccidentTensor, RoadMask};
use crate::model::HyperParams;
use crate::partition::LevelMap;
use crate::sample::Dataset;
use crate::transfer::{cross_level_train, predict_grid, ModelPool};

/// Chronological day split. Train and validation interleave inside the
/// leading segment; test is the trailing segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// First test day; every statistic is fitted on days before it.
    pub fn test_start(&self) -> usize {
        self.test.first().copied().unwrap_or(self.train.len() + self.validation.len())
    }

    /// Train and validation days together, in order.
    pub fn training_period(&self) -> Vec<usize> {
        (0..self.test_start()).collect()
    }
}

/// Which part of a [`Split`] to draw target days from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn days(&self, part: SplitPart) -> &[usize] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Validation => &self.validation,
            SplitPart::Test => &self.test,
        }
    }
}

/// The last `floor(num_days * test_fraction)` days form the test split. Of
/// the remaining `n` days, `round(val_fraction * n)` days chosen at random
/// among valid target days (index >= 7) form the validation split.
pub fn make_split(num_days: usize, test_fraction: f64, val_fraction: f64, seed: u64) -> Result<Split> {
    if !(0.0..1.0).contains(&test_fraction) || !(0.0..1.0).contains(&val_fraction) {
        return Err(HintError::InvalidInput(format!(
            "split fractions must lie in [0, 1): test {test_fraction}, validation {val_fraction}"
        )));
    }
    let n_test = (num_days as f64 * test_fraction).floor() as usize;
    let rest = num_days - n_test;
    let n_val = (val_fraction * rest as f64).round() as usize;
    let n_train = rest.saturating_sub(n_val);
    if n_test < 8 || n_val < 8 || n_train < 8 || rest < 7 + n_val {
        return Err(HintError::InsufficientData(format!(
            "{num_days} days give train/validation/test of {n_train}/{n_val}/{n_test}; each needs >= 8"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut validation: Vec<usize> = index::sample(&mut rng, rest - 7, n_val).into_iter().map(|i| i + 7).collect();
    validation.sort_unstable();
    let train = (0..rest).filter(|d| validation.binary_search(d).is_err()).collect();
    Ok(Split { train, validation, test: (rest..num_days).collect() })
}

/// Per-cell mean daily count over `days`.
pub fn historical_average(counts: &AccidentTensor, days: &[usize]) -> Result<Array2<f64>> {
    if days.is_empty() {
        return Err(HintError::InsufficientData("historical average needs >= 1 day".into()));
    }
    Ok(counts.aggregate(days.iter().copied()) / days.len() as f64)
}

/// Truth values `[rows, cols, days.len()]` for the given days.
pub fn truth_for(counts: &AccidentTensor, days: &[usize]) -> Array3<f64> {
    let (rows, cols, _) = counts.counts.dim();
    Array3::from_shape_fn((rows, cols, days.len()), |(r, c, t)| counts.get(r, c, days[t]) as f64)
}

/// Mean squared error over the listed cells and every day slice.
pub fn mse_cells(pred: &Array3<f64>, truth: &Array3<f64>, cells: &[(usize, usize)]) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(HintError::InvalidInput(format!("prediction {:?} vs truth {:?}", pred.dim(), truth.dim())));
    }
    let days = pred.dim().2;
    if cells.is_empty() || days == 0 {
        return Err(HintError::InsufficientData("mean over zero (cell, day) pairs".into()));
    }
    let mut sum = 0.0;
    for &(r, c) in cells {
        for t in 0..days {
            sum += (pred[[r, c, t]] - truth[[r, c, t]]).powi(2);
        }
    }
    Ok(sum / (cells.len() * days) as f64)
}

/// Mean squared error over road cells only.
pub fn mse_masked(pred: &Array3<f64>, truth: &Array3<f64>, mask: &RoadMask) -> Result<f64> {
    if mask.mask.dim() != (pred.dim().0, pred.dim().1) {
        return Err(HintError::InvalidInput("mask and prediction cover different grids".into()));
    }
    mse_cells(pred, truth, &mask.road_cells())
}

/// Historical-average prediction repeated over `days` slices.
pub fn ha_prediction(ha: &Array2<f64>, days: usize) -> Array3<f64> {
    let (rows, cols) = ha.dim();
    Array3::from_shape_fn((rows, cols, days), |(r, c, _)| ha[[r, c]])
}

/// `100 (HA - model) / HA` per level; `None` where HA error is 0.
pub fn improvement_per_level(
    model_mse: &BTreeMap<u32, f64>,
    ha_mse: &BTreeMap<u32, f64>,
) -> Result<BTreeMap<u32, Option<f64>>> {
    if model_mse.keys().ne(ha_mse.keys()) {
        return Err(HintError::InvalidInput("model and HA errors cover different levels".into()));
    }
    Ok(model_mse
        .iter()
        .map(|(&l, &m)| {
            let h = ha_mse[&l];
            (l, (h != 0.0).then(|| 100.0 * (h - m) / h))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub level: u32,
    pub cells: usize,
    pub model_mse: f64,
    pub ha_mse: f64,
    /// `null` when the HA error is 0.
    pub improvement_pct: Option<f64>,
}

/// Contents of `metrics.json`. Wall-clock times are deliberately absent so
/// identical runs produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub config_hash: String,
    pub seed: u64,
    pub test_days: usize,
    pub road_cells: usize,
    pub overall_mse: f64,
    pub ha_overall_mse: f64,
    pub overall_improvement_pct: Option<f64>,
    pub per_level: Vec<LevelMetrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ablation: Option<AblationReport>,
}

/// Model and HA test errors, overall and per level (level 0 included, where
/// the model predicts 0).
pub fn evaluate_predictions(
    pred: &Array3<f64>,
    counts: &AccidentTensor,
    levels: &LevelMap,
    mask: &RoadMask,
    split: &Split,
) -> Result<(f64, f64, Vec<LevelMetrics>)> {
    let truth = truth_for(counts, &split.test);
    let ha = historical_average(counts, &split.training_period())?;
    let ha_pred = ha_prediction(&ha, split.test.len());
    let overall = mse_masked(pred, &truth, mask)?;
    let ha_overall = mse_masked(&ha_pred, &truth, mask)?;
    let mut by_level: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
    for (r, c) in mask.road_cells() {
        by_level.entry(levels.level(r, c)).or_default().push((r, c));
    }
    let mut model_mse = BTreeMap::new();
    let mut ha_mse = BTreeMap::new();
    for (&l, cells) in &by_level {
        model_mse.insert(l, mse_cells(pred, &truth, cells)?);
        ha_mse.insert(l, mse_cells(&ha_pred, &truth, cells)?);
    }
    let imp = improvement_per_level(&model_mse, &ha_mse)?;
    let rows = by_level
        .iter()
        .map(|(&level, cells)| LevelMetrics {
            level,
            cells: cells.len(),
            model_mse: model_mse[&level],
            ha_mse: ha_mse[&level],
            improvement_pct: imp[&level],
        })
        .collect();
    Ok((overall, ha_overall, rows))
}

/// Mean, sample variance and median of a series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub variance: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        if values.is_empty() {
            return Summary { mean: f64::NAN, variance: f64::NAN, median: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 { sorted[mid] } else { 0.5 * (sorted[mid - 1] + sorted[mid]) };
        Summary { mean, variance, median }
    }
}

/// One arm (transfer on or off) of the ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub transfer: bool,
    pub seeds: Vec<u64>,
    /// Masked test MSE per run.
    pub test_mse: Vec<f64>,
    /// Per run, epochs-to-target averaged over levels.
    pub epochs_to_target: Vec<f64>,
    /// Per level, epochs-to-target of each run.
    pub per_level_epochs: BTreeMap<u32, Vec<usize>>,
    /// Per level, whether each run reached the target (unreached runs count
    /// as the epoch budget).
    pub per_level_reached: BTreeMap<u32, Vec<bool>>,
    pub test_mse_summary: Summary,
    pub epochs_summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub n_runs: usize,
    /// Per level, the validation target taken from the reference run.
    pub targets: BTreeMap<u32, f64>,
    pub with_transfer: ArmReport,
    pub without_transfer: ArmReport,
}

/// First 1-based epoch whose validation loss is at or below `target`.
pub fn epochs_to_target(val_loss: &[f64], target: f64) -> Option<usize> {
    val_loss.iter().position(|&v| v <= target).map(|i| i + 1)
}

fn pool_test_mse(pool: &ModelPool, levels: &LevelMap, dataset: &Dataset, split: &Split) -> Result<f64> {
    let pred = predict_grid(pool, levels, dataset, &split.test)?;
    mse_masked(&pred, &truth_for(&dataset.counts, &split.test), &dataset.mask)
}

/// Runs one arm over `seeds` and scores it against `targets`.
#[allow(clippy::too_many_arguments)]
pub fn ablation_arm(
    levels: &LevelMap,
    dataset: &Dataset,
    split: &Split,
    hyper: &HyperParams,
    overrides: &BTreeMap<u32, HyperParams>,
    transfer: bool,
    seeds: &[u64],
    targets: &BTreeMap<u32, f64>,
) -> Result<ArmReport> {
    let mut report = ArmReport {
        transfer,
        seeds: seeds.to_vec(),
        test_mse: Vec::new(),
        epochs_to_target: Vec::new(),
        per_level_epochs: BTreeMap::new(),
        per_level_reached: BTreeMap::new(),
        test_mse_summary: Summary::of(&[]),
        epochs_summary: Summary::of(&[]),
    };
    for &seed in seeds {
        let h = HyperParams { seed, ..hyper.clone() };
        let pool = cross_level_train(levels, dataset, split, &h, overrides, transfer)?;
        let mse = pool_test_mse(&pool, levels, dataset, split)?;
        let mut total = 0.0;
        for &level in &pool.order {
            let budget = crate::transfer::hyper_for(&h, overrides, level).epochs;
            let reached = epochs_to_target(&pool.reports[&level].val_loss, targets[&level]);
            let epochs = reached.unwrap_or(budget);
            total += epochs as f64;
            report.per_level_epochs.entry(level).or_default().push(epochs);
            report.per_level_reached.entry(level).or_default().push(reached.is_some());
        }
        info!("ablation transfer={transfer} seed={seed}: test mse {mse:.5}, mean epochs {:.1}", total / pool.order.len() as f64);
        report.test_mse.push(mse);
        report.epochs_to_target.push(total / pool.order.len() as f64);
    }
    report.test_mse_summary = Summary::of(&report.test_mse);
    report.epochs_summary = Summary::of(&report.epochs_to_target);
    Ok(report)
}

/// Knowledge-transfer ablation: `n_runs` seeded runs with and without
/// transfer. Targets are the best per-level validation errors of a
/// transfer-off reference run with the base seed.
pub fn ablation_transfer(
    levels: &LevelMap,
    dataset: &Dataset,
    split: &Split,
    hyper: &HyperParams,
    overrides: &BTreeMap<u32, HyperParams>,
    n_runs: usize,
) -> Result<AblationReport> {
    if n_runs == 0 {
        return Err(HintError::InvalidInput("ablation needs >= 1 run".into()));
    }
    let reference = cross_level_train(levels, dataset, split, hyper, overrides, false)?;
    let targets: BTreeMap<u32, f64> = reference.reports.iter().map(|(&l, r)| (l, r.best_val_loss)).collect();
    let seeds: Vec<u64> = (1..=n_runs as u64).map(|i| hyper.seed.wrapping_add(i)).collect();
    let with_transfer = ablation_arm(levels, dataset, split, hyper, overrides, true, &seeds, &targets)?;
    let without_transfer = ablation_arm(levels, dataset, split, hyper, overrides, false, &seeds, &targets)?;
    Ok(AblationReport { n_runs, targets, with_transfer, without_transfer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    #[test]
    fn hundred_day_split() {
        let s = make_split(100, 1.0 / 3.0, 0.2, 5).unwrap();
        assert_eq!(s.test, (67..100).collect::<Vec<_>>());
        assert_eq!(s.validation.len(), 13);
        assert_eq!(s.train.len(), 54);
        assert!(s.validation.iter().all(|d| !s.train.contains(d) && *d >= 7));
        assert_eq!(s, make_split(100, 1.0 / 3.0, 0.2, 5).unwrap());
        assert_ne!(s.validation, make_split(100, 1.0 / 3.0, 0.2, 6).unwrap().validation);
        assert_eq!(s.training_period(), (0..67).collect::<Vec<_>>());
    }

    #[test]
    fn historical_average_examples() {
        let mut c = AccidentTensor { counts: Array3::zeros((2, 1, 3)) };
        c.counts[[0, 0, 2]] = 3;
        c.counts[[1, 0, 0]] = 2;
        c.counts[[1, 0, 1]] = 2;
        c.counts[[1, 0, 2]] = 2;
        let ha = historical_average(&c, &[0, 1, 2]).unwrap();
        assert_eq!(ha[[0, 0]], 1.0);
        assert_eq!(ha[[1, 0]], 2.0);
        let z = AccidentTensor { counts: Array3::zeros((1, 1, 2)) };
        assert_eq!(historical_average(&z, &[0, 1]).unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn masked_mse_examples() {
        let truth = Array3::from_elem((2, 2, 1), 1.0);
        let mut mask = RoadMask { mask: Array2::zeros((2, 2)) };
        assert_eq!(mse_masked(&truth, &truth, &RoadMask::full(2, 2)).unwrap(), 0.0);
        mask.mask[[1, 0]] = 1;
        let mut pred = truth.clone();
        pred[[1, 0, 0]] = 3.0;
        pred[[0, 1, 0]] = 100.0;
        assert_eq!(mse_masked(&pred, &truth, &mask).unwrap(), 4.0);
        let none = RoadMask { mask: Array2::zeros((2, 2)) };
        assert!(mse_masked(&pred, &truth, &none).is_err());
    }

    #[test]
    fn improvement_examples() {
        let ha: BTreeMap<u32, f64> = [(1, 0.027), (2, 0.5), (3, 0.0)].into();
        let model: BTreeMap<u32, f64> = [(1, 0.021), (2, 0.5), (3, 0.1)].into();
        let imp = improvement_per_level(&model, &ha).unwrap();
        assert!((imp[&1].unwrap() - 22.222).abs() < 1e-3);
        assert_eq!(imp[&2], Some(0.0));
        assert_eq!(imp[&3], None);
        assert!(improvement_per_level(&ha, &ha).unwrap().values().all(|v| v.is_none_or(|x| x == 0.0)));
    }

    #[test]
    fn summary_and_targets() {
        let s = Summary::of(&[3.0, 1.0, 2.0, 10.0]);
        assert_eq!(s.median, 2.5);
        assert_eq!(s.mean, 4.0);
        assert!((s.variance - 50.0 / 3.0).abs() < 1e-12);
        assert_eq!(epochs_to_target(&[0.5, 0.4, 0.3], 0.4), Some(2));
        assert_eq!(epochs_to_target(&[0.5, 0.45], 0.4), None);
    }

    #[test]
    fn too_few_days() {
        assert!(make_split(20, 1.0 / 3.0, 0.2, 0).is_err());
    }
}
