//! Cross-level training: one model per risk level, trained from the most
//! urban level down, each warm-started from the level trained before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::info;
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HintError, Result};
use crate::eval::Split;
use crate::model::{predict, train_level, HyperParams, ModelDims, ModelParams, TrainReport};
use crate::partition::LevelMap;
use crate::sample::{Dataset, LazySamples, SampleKey};

/// Trained models by level plus the record of how they were trained.
#[derive(Debug, Clone)]
pub struct ModelPool {
    /// Levels in training order.
    pub order: Vec<u32>,
    pub models: BTreeMap<u32, ModelParams>,
    pub reports: BTreeMap<u32, TrainReport>,
    /// Parameters each level started training from.
    pub initial: BTreeMap<u32, ModelParams>,
    pub transfer: bool,
}

/// Populated nonzero levels on road cells, most urban first.
pub fn level_order(levels: &LevelMap, dataset_mask: Option<&crate::grid::RoadMask>) -> Result<Vec<u32>> {
    let mut present: Vec<u32> = levels
        .levels
        .indexed_iter()
        .filter(|&((r, c), &v)| v > 0 && dataset_mask.is_none_or(|m| m.is_road(r, c)))
        .map(|(_, &v)| v)
        .collect();
    present.sort_unstable_by(|a, b| b.cmp(a));
    present.dedup();
    if present.is_empty() {
        return Err(HintError::InsufficientData("level map has no nonzero level".into()));
    }
    Ok(present)
}

fn level_seed(seed: u64, level: u32) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(level as u64)
}

/// Hyperparameters for one level: the override if present, else the base.
pub fn hyper_for(base: &HyperParams, overrides: &BTreeMap<u32, HyperParams>, level: u32) -> HyperParams {
    let mut h = overrides.get(&level).cloned().unwrap_or_else(|| base.clone());
    h.seed = level_seed(base.seed, level);
    h
}

/// Trains every level in [`level_order`]. With `transfer` the first level
/// starts from a fresh initialization and every later level from a copy of
/// the previously trained level; without it each level starts fresh.
pub fn cross_level_train(
    levels: &LevelMap,
    dataset: &Dataset,
    split: &Split,
    hyper: &HyperParams,
    overrides: &BTreeMap<u32, HyperParams>,
    transfer: bool,
) -> Result<ModelPool> {
    let order = level_order(levels, Some(&dataset.mask))?;
    let f = &dataset.features;
    let mut pool = ModelPool {
        order: Vec::new(),
        models: BTreeMap::new(),
        reports: BTreeMap::new(),
        initial: BTreeMap::new(),
        transfer,
    };
    let mut previous: Option<ModelParams> = None;
    for &level in &order {
        let h = hyper_for(hyper, overrides, level);
        if h.w != dataset.w {
            return Err(HintError::Level {
                level,
                source: Box::new(HintError::InvalidInput(format!("window {} differs from dataset window {}", h.w, dataset.w))),
            });
        }
        let dims: ModelDims = h.dims(f.n_st(), f.n_spatial(), f.n_temporal());
        let init = match (&previous, transfer) {
            (Some(prev), true) if prev.dims == dims => prev.clone(),
            (Some(_), true) => {
                return Err(HintError::Level {
                    level,
                    source: Box::new(HintError::InvalidInput("per-level overrides change the architecture; transfer impossible".into())),
                })
            }
            _ => ModelParams::init(dims, &mut ChaCha8Rng::seed_from_u64(h.seed)),
        };
        let train = LazySamples { dataset, keys: dataset.keys(levels, level, &split.train) };
        let val = LazySamples { dataset, keys: dataset.keys(levels, level, &split.validation) };
        info!("level {level}: {} training and {} validation samples", train.keys.len(), val.keys.len());
        pool.initial.insert(level, init.clone());
        let (params, report) = train_level(&train, Some(&val), init, &h)
            .map_err(|e| HintError::Level { level, source: Box::new(e) })?;
        info!(
            "level {level}: {} epochs, best epoch {}, validation mse {:.5}",
            report.epochs_run, report.best_epoch, report.best_val_loss
        );
        previous = Some(params.clone());
        pool.order.push(level);
        pool.models.insert(level, params);
        pool.reports.insert(level, report);
    }
    Ok(pool)
}

/// Predicted counts `[rows, cols, days.len()]`, clamped at 0. Level-0 and
/// off-road cells are 0.
pub fn predict_grid(pool: &ModelPool, levels: &LevelMap, dataset: &Dataset, days: &[usize]) -> Result<Array3<f64>> {
    let (rows, cols) = (dataset.rows(), dataset.cols());
    if levels.levels.dim() != (rows, cols) {
        return Err(HintError::InvalidInput("level map and dataset cover different grids".into()));
    }
    let mut out = Array3::<f64>::zeros((rows, cols, days.len()));
    for ((r, c), &level) in levels.levels.indexed_iter() {
        if level == 0 || !dataset.mask.is_road(r, c) {
            continue;
        }
        let params = pool.models.get(&level).ok_or_else(|| {
            HintError::InvalidInput(format!("no model for level {level}; the pool covers {:?}", pool.order))
        })?;
        for (t, &day) in days.iter().enumerate() {
            let sample = dataset.sample(SampleKey { center: (r, c), day })?;
            out[[r, c, t]] = predict(&sample, params)?.max(0.0);
        }
    }
    Ok(out)
}

pub const POOL_FORMAT_VERSION: u32 = 1;

/// Contents of `manifest.json` in a pool directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub format_version: u32,
    pub level_order: Vec<u32>,
    pub levelmap_hash: String,
    pub config_hash: String,
    pub seed: u64,
    pub transfer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorFile {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReportSummary {
    epochs_run: usize,
    best_epoch: usize,
    best_val_loss: f64,
    train_loss: Vec<f64>,
    val_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LevelFile {
    format_version: u32,
    level: u32,
    hyper: HyperParams,
    dims: ModelDims,
    n_params: usize,
    tensors: Vec<TensorFile>,
    report: ReportSummary,
}

fn level_path(dir: &Path, level: u32) -> std::path::PathBuf {
    dir.join(format!("level_{level}.json"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HintError::Json { path: path.display().to_string(), source: e })?;
    fs::write(path, text + "\n").map_err(|e| HintError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| HintError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HintError::Json { path: path.display().to_string(), source: e })
}

/// Writes one JSON file per level plus `manifest.json`.
pub fn save_pool(
    pool: &ModelPool,
    dir: &Path,
    hyper: &HyperParams,
    overrides: &BTreeMap<u32, HyperParams>,
    manifest: &PoolManifest,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HintError::io(dir, e))?;
    for &level in &pool.order {
        let p = &pool.models[&level];
        let r = &pool.reports[&level];
        let file = LevelFile {
            format_version: POOL_FORMAT_VERSION,
            level,
            hyper: hyper_for(hyper, overrides, level),
            dims: p.dims,
            n_params: p.n_params(),
            tensors: p
                .tensors()
                .iter()
                .zip(p.shapes())
                .map(|((name, data), shape)| TensorFile { name: name.to_string(), shape, data: data.to_vec() })
                .collect(),
            report: ReportSummary {
                epochs_run: r.epochs_run,
                best_epoch: r.best_epoch,
                best_val_loss: r.best_val_loss,
                train_loss: r.train_loss.clone(),
                val_loss: r.val_loss.clone(),
            },
        };
        write_json(&level_path(dir, level), &file)?;
    }
    write_json(&dir.join("manifest.json"), manifest)
}

/// Loads a pool, refusing it when it was built from another level map or
/// configuration.
pub fn load_pool(dir: &Path, levelmap_hash: &str, config_hash: Option<&str>) -> Result<(ModelPool, PoolManifest)> {
    let manifest: PoolManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format_version != POOL_FORMAT_VERSION {
        return Err(HintError::Stale(format!(
            "pool format {} is not supported (expected {POOL_FORMAT_VERSION}); re-run `train`",
            manifest.format_version
        )));
    }
    if manifest.levelmap_hash != levelmap_hash {
        return Err(HintError::Stale(format!(
            "pool in {} was trained on a different level map; re-run `train` after `partition`",
            dir.display()
        )));
    }
    if let Some(h) = config_hash {
        if manifest.config_hash != h {
            return Err(HintError::Stale(format!(
                "pool in {} was trained with a different configuration; re-run `train`",
                dir.display()
            )));
        }
    }
    let mut pool = ModelPool {
        order: manifest.level_order.clone(),
        models: BTreeMap::new(),
        reports: BTreeMap::new(),
        initial: BTreeMap::new(),
        transfer: manifest.transfer,
    };
    for &level in &manifest.level_order {
        let path = level_path(dir, level);
        let file: LevelFile = read_json(&path)?;
        if file.level != level {
            return Err(HintError::InvalidInput(format!("{} holds level {}, expected {level}", path.display(), file.level)));
        }
        let tensors: Vec<(String, Vec<f64>)> = file.tensors.into_iter().map(|t| (t.name, t.data)).collect();
        let params = ModelParams::from_tensors(file.dims, &tensors)?;
        for (shape, t) in params.shapes().iter().zip(&tensors) {
            if shape.iter().product::<usize>() != t.1.len() {
                return Err(HintError::InvalidInput(format!("tensor {} has the wrong size", t.0)));
            }
        }
        pool.models.insert(level, params);
        pool.reports.insert(
            level,
            TrainReport {
                train_loss: file.report.train_loss,
                val_loss: file.report.val_loss,
                epochs_run: file.report.epochs_run,
                best_epoch: file.report.best_epoch,
                best_val_loss: file.report.best_val_loss,
                wall_time_s: 0.0,
            },
        );
    }
    Ok((pool, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::make_split;
    use crate::features::{Channel, FeatureSet};
    use crate::grid::{AccidentTensor, RoadMask};
    use ndarray::{Array2, Array4};
    use rand::Rng;

    #[test]
    fn order_is_descending_without_zero_and_gaps() {
        let lm = LevelMap { levels: ndarray::array![[0, 1, 2], [6, 5, 3], [0, 6, 1]] };
        assert_eq!(level_order(&lm, None).unwrap(), vec![6, 5, 3, 2, 1]);
        let single = LevelMap { levels: ndarray::array![[0, 2], [2, 0]] };
        assert_eq!(level_order(&single, None).unwrap(), vec![2]);
        assert!(level_order(&LevelMap { levels: Array2::zeros((2, 2)) }, None).is_err());
    }

    fn tiny_world() -> (Dataset, LevelMap, Split) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (rows, cols, days) = (5, 5, 40);
        let counts = AccidentTensor { counts: Array3::from_shape_fn((rows, cols, days), |(r, _, _)| rng.random_range(0..(r as u32 + 1))) };
        let features = FeatureSet {
            spatial: Array3::from_shape_fn((rows, cols, 2), |(r, c, _)| (r * c) as f64),
            temporal: Array2::from_shape_fn((days, 1), |(d, _)| (d % 7) as f64),
            st: Array4::from_shape_fn((rows, cols, days, 2), |_| rng.random::<f64>()),
            spatial_channels: vec![Channel::new("a", false), Channel::new("b", false)],
            temporal_channels: vec![Channel::new("dow", false)],
            st_channels: vec![Channel::new("x", false), Channel::new("y", false)],
        };
        let mut mask = RoadMask::full(rows, cols);
        mask.mask[[0, 0]] = 0;
        let split = make_split(days, 0.25, 0.25, 1).unwrap();
        let ds = Dataset::new(counts, features, mask, 3, &split.training_period()).unwrap();
        let levels = LevelMap { levels: Array2::from_shape_fn((rows, cols), |(r, _)| if r < 2 { 1 } else { 2 }) };
        (ds, levels, split)
    }

    fn hyper() -> HyperParams {
        HyperParams { w: 3, h: 3, h_l: 3, s_d: 2, lstm_input: 3, epochs: 3, batch_size: 16, learning_rate: 0.01, ..HyperParams::default() }
    }

    #[test]
    fn transfer_copies_previous_level() {
        let (ds, levels, split) = tiny_world();
        let pool = cross_level_train(&levels, &ds, &split, &hyper(), &BTreeMap::new(), true).unwrap();
        assert_eq!(pool.order, vec![2, 1]);
        assert!(pool.initial[&1].bit_identical(&pool.models[&2]));
        let again = cross_level_train(&levels, &ds, &split, &hyper(), &BTreeMap::new(), true).unwrap();
        for l in [1, 2] {
            assert!(pool.models[&l].bit_identical(&again.models[&l]));
        }
        let off = cross_level_train(&levels, &ds, &split, &hyper(), &BTreeMap::new(), false).unwrap();
        assert!(!off.initial[&1].bit_identical(&off.initial[&2]));
        assert!(off.initial[&2].bit_identical(&pool.initial[&2]));
    }

    #[test]
    fn predictions_cover_each_road_cell_once() {
        let (ds, levels, split) = tiny_world();
        let pool = cross_level_train(&levels, &ds, &split, &hyper(), &BTreeMap::new(), true).unwrap();
        let pred = predict_grid(&pool, &levels, &ds, &split.test).unwrap();
        assert!(pred.iter().all(|&v| v >= 0.0));
        assert!(pred.slice(ndarray::s![0, 0, ..]).iter().all(|&v| v == 0.0));
        let (r, c, t) = (3, 2, 4);
        let sample = ds.sample(SampleKey { center: (r, c), day: split.test[t] }).unwrap();
        assert_eq!(pred[[r, c, t]], predict(&sample, &pool.models[&2]).unwrap().max(0.0));
        let zero = LevelMap { levels: Array2::zeros((5, 5)) };
        assert!(predict_grid(&pool, &zero, &ds, &split.test).unwrap().iter().all(|&v| v == 0.0));
        let mut missing = levels.clone();
        missing.levels[[4, 4]] = 7;
        assert!(predict_grid(&pool, &missing, &ds, &split.test).is_err());
    }

    #[test]
    fn pool_round_trips_and_refuses_other_partitions() {
        let (ds, levels, split) = tiny_world();
        let pool = cross_level_train(&levels, &ds, &split, &hyper(), &BTreeMap::new(), true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = PoolManifest {
            format_version: POOL_FORMAT_VERSION,
            level_order: pool.order.clone(),
            levelmap_hash: levels.digest(),
            config_hash: "abc".into(),
            seed: 0,
            transfer: true,
        };
        save_pool(&pool, dir.path(), &hyper(), &BTreeMap::new(), &manifest).unwrap();
        let (loaded, _) = load_pool(dir.path(), &levels.digest(), Some("abc")).unwrap();
        for l in [1, 2] {
            assert!(loaded.models[&l].bit_identical(&pool.models[&l]));
        }
        let mut other = levels.clone();
        other.levels[[0, 1]] = 2;
        assert!(matches!(load_pool(dir.path(), &other.digest(), None), Err(HintError::Stale(_))));
        assert!(matches!(load_pool(dir.path(), &levels.digest(), Some("xyz")), Err(HintError::Stale(_))));
    }
}
