//! Stage functions behind the CLI: ingest, partition, train, predict,
//! evaluate and ablate. Each stage reads the artifacts of earlier stages from
//! the output directory and stamps what it writes with the config hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::calendar::{calendar_features, HolidayList, TEMPORAL_BINARY, TEMPORAL_CHANNELS};
use crate::config::{Config, TrafficMetric};
use crate::error::{HintError, Result};
use crate::eval::{self, make_split, AblationReport, Metrics, Split};
use crate::features::{Channel, FeatureSet};
use crate::grid::{map_events_to_grid, map_poi, rasterize_roads, AccidentTensor, GridSpec, RoadMask, ROAD_CHANNELS};
use crate::io::{self, NamedTensor, StationRecord};
use crate::kriging::{impute_channel, ChannelKind, DistanceMetric, Euclidean, NetworkDistance, StationObservation};
use crate::partition::{aggregate_levels, m_rsp, LevelMap};
use crate::sample::Dataset;
use crate::spectral::spectral_features;
use crate::subregion::AdjacencyCache;
use crate::transfer::{self, cross_level_train, load_pool, predict_grid, save_pool, ModelPool, PoolManifest};

/// Station channels interpolated with Ordinary Kriging.
pub const WEATHER_ST: [&str; 7] =
    ["precipitation", "snowfall", "snow_depth", "temp_min", "temp_max", "wind", "visibility"];
/// Station channels interpolated with Universal Kriging on road cells.
pub const TRAFFIC_ST: [&str; 3] = ["speed", "volume", "truck_volume"];
/// Extra weather channels appended after the accident history channel.
pub const EXTRA_WEATHER_ST: [&str; 2] = ["humidity", "pressure"];

pub const INGEST_FILE: &str = "ingest.bin";
pub const LEVELMAP_CSV: &str = "levelmap.csv";
pub const LEVELMAP_GEOJSON: &str = "levelmap.geojson";
pub const PARTITION_FILE: &str = "partition.json";
pub const ADJACENCY_FILE: &str = "adjacency.bin";
pub const POOL_DIR: &str = "pool";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const ABLATION_FILE: &str = "ablation.json";

/// Gridded inputs with unstandardized features.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub spec: GridSpec,
    pub counts: AccidentTensor,
    pub mask: RoadMask,
    pub features: FeatureSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IngestMeta {
    config_hash: String,
    seed: u64,
    grid: GridSpec,
    spatial_channels: Vec<Channel>,
    temporal_channels: Vec<Channel>,
    st_channels: Vec<Channel>,
}

pub fn split_for(cfg: &Config) -> Result<Split> {
    make_split(cfg.grid.num_days, cfg.test_fraction, cfg.val_fraction, cfg.seed)
}

/// Per-day observations of one station channel in grid-local kilometres.
pub fn station_series(records: &[StationRecord], channel: &str, spec: &GridSpec) -> Vec<Vec<StationObservation>> {
    let mut per_day = vec![Vec::new(); spec.num_days];
    for r in records.iter().filter(|r| r.channel == channel) {
        if let Some(day) = spec.day_index(r.date) {
            let (x, y) = spec.to_local(r.lat, r.lon);
            per_day[day].push(StationObservation { x, y, value: r.value, day });
        }
    }
    per_day
}

/// Assembles the spatial, temporal and spatio-temporal feature tensors.
#[allow(clippy::too_many_arguments)]
pub fn build_features(
    spec: &GridSpec,
    counts: &AccidentTensor,
    road_channels: &Array3<f64>,
    mask: &RoadMask,
    poi: &Array3<f64>,
    stations: &[StationRecord],
    holidays: &HolidayList,
    n_spectral: usize,
    traffic_metric: TrafficMetric,
    train_end: usize,
) -> Result<FeatureSet> {
    let (rows, cols, days) = (spec.rows, spec.cols, spec.num_days);
    let spectral = spectral_features(mask, n_spectral)?;
    let spatial = ndarray::concatenate(Axis(2), &[poi.view(), road_channels.view(), spectral.view()])
        .map_err(|e| HintError::InvalidInput(format!("spatial features: {e}")))?;
    let mut spatial_channels: Vec<Channel> =
        (1..=poi.dim().2).map(|i| Channel::new(format!("poi_{i:02}"), false)).collect();
    spatial_channels.extend(ROAD_CHANNELS.iter().map(|n| Channel::new(*n, *n == "road_mask" || n.starts_with("road_class"))));
    spatial_channels.extend((1..=spectral.dim().2).map(|i| Channel::new(format!("spectral_{i:02}"), false)));

    let temporal = Array2::from_shape_fn((days, TEMPORAL_CHANNELS.len()), |(d, k)| {
        calendar_features(spec.date_of(d), holidays)[k]
    });
    let temporal_channels =
        TEMPORAL_CHANNELS.iter().zip(TEMPORAL_BINARY).map(|(n, b)| Channel::new(*n, b)).collect();

    let euclid = Euclidean;
    let network = NetworkDistance::new(mask.clone(), spec.cell_size_km);
    let traffic_metric: &dyn DistanceMetric = match traffic_metric {
        TrafficMetric::Network => &network,
        TrafficMetric::Euclidean => &euclid,
    };
    let mut slices: Vec<Array3<f64>> = Vec::new();
    let mut st_channels = Vec::new();
    let impute = |name: &str, kind: ChannelKind, slices: &mut Vec<Array3<f64>>, st_channels: &mut Vec<Channel>| -> Result<()> {
        let per_day = station_series(stations, name, spec);
        let field = if per_day.iter().all(|d| d.is_empty()) {
            warn!("no station observations for channel {name}; using zeros");
            Array3::zeros((rows, cols, days))
        } else {
            let metric: &dyn DistanceMetric = match kind {
                ChannelKind::Weather => &euclid,
                ChannelKind::Traffic => traffic_metric,
            };
            impute_channel(&per_day, spec, mask, kind, metric, train_end)?
        };
        slices.push(field);
        st_channels.push(Channel::new(name, false));
        Ok(())
    };
    for name in WEATHER_ST {
        impute(name, ChannelKind::Weather, &mut slices, &mut st_channels)?;
    }
    for name in TRAFFIC_ST {
        impute(name, ChannelKind::Traffic, &mut slices, &mut st_channels)?;
    }
    slices.push(counts.counts.mapv(|v| v as f64));
    st_channels.push(Channel::new("accident_count", false));
    for name in EXTRA_WEATHER_ST {
        impute(name, ChannelKind::Weather, &mut slices, &mut st_channels)?;
    }
    let views: Vec<_> = slices.iter().map(|s| s.view().insert_axis(Axis(3))).collect();
    let st: Array4<f64> = ndarray::concatenate(Axis(3), &views).expect("equal slice shapes");

    let f = FeatureSet { spatial, temporal, st, spatial_channels, temporal_channels, st_channels };
    f.validate()?;
    Ok(f)
}

/// Reads the input CSVs and grids everything.
pub fn ingest(cfg: &Config) -> Result<Ingested> {
    let spec = cfg.grid.clone();
    spec.validate()?;
    let split = split_for(cfg)?;
    let events = io::read_accidents(&cfg.accidents)?;
    let roads = io::read_roads(&cfg.roads)?;
    let poi = io::read_poi(&cfg.poi)?;
    let stations = io::read_stations(&cfg.stations)?;
    let holidays = match &cfg.holidays {
        Some(p) => HolidayList::parse(&std::fs::read_to_string(p).map_err(|e| HintError::io(p, e))?)?,
        None => HolidayList::us_federal(),
    };
    info!("{} accidents, {} road segments, {} POIs, {} station readings", events.len(), roads.len(), poi.len(), stations.len());
    let counts = map_events_to_grid(&events, &spec)?.value;
    let raster = rasterize_roads(&roads, &spec)?;
    if raster.mask.count() == 0 {
        return Err(HintError::InvalidInput("no road segment falls inside the grid".into()));
    }
    let off_road: u64 = counts
        .counts
        .indexed_iter()
        .filter(|((r, c, _), &v)| v > 0 && !raster.mask.is_road(*r, *c))
        .map(|(_, &v)| v as u64)
        .sum();
    if off_road > 0 {
        warn!("{off_road} accidents lie in cells without roads; they are masked out of training and evaluation");
    }
    let poi = map_poi(&poi, &spec)?.value;
    let features = build_features(
        &spec,
        &counts,
        &raster.channels,
        &raster.mask,
        &poi,
        &stations,
        &holidays,
        cfg.n_spectral,
        cfg.traffic_metric,
        split.test_start(),
    )?;
    Ok(Ingested { spec, counts, mask: raster.mask, features })
}

fn tensor_from<D: ndarray::Dimension>(name: &str, a: &ndarray::Array<f64, D>) -> Result<NamedTensor> {
    NamedTensor::new(name, a.shape(), a.iter().copied().collect())
}

pub fn save_ingested(path: &Path, ing: &Ingested, cfg: &Config) -> Result<()> {
    let meta = IngestMeta {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        grid: ing.spec.clone(),
        spatial_channels: ing.features.spatial_channels.clone(),
        temporal_channels: ing.features.temporal_channels.clone(),
        st_channels: ing.features.st_channels.clone(),
    };
    let meta = serde_json::to_value(&meta).expect("serializable");
    let tensors = vec![
        tensor_from("counts", &ing.counts.counts.mapv(|v| v as f64))?,
        tensor_from("mask", &ing.mask.mask.mapv(|v| v as f64))?,
        tensor_from("spatial", &ing.features.spatial)?,
        tensor_from("temporal", &ing.features.temporal)?,
        tensor_from("st", &ing.features.st)?,
    ];
    io::write_tensors(path, &meta, &tensors)
}

fn shaped<D: ndarray::Dimension>(t: &NamedTensor, dim: D) -> Result<ndarray::Array<f64, D>> {
    ndarray::Array::from_shape_vec(dim, t.data.clone())
        .map_err(|e| HintError::InvalidInput(format!("tensor {}: {e}", t.name)))
}

pub fn load_ingested(path: &Path) -> Result<Ingested> {
    let (meta, tensors) = io::read_tensors(path)?;
    let meta: IngestMeta =
        serde_json::from_value(meta).map_err(|e| HintError::Json { path: path.display().to_string(), source: e })?;
    let (rows, cols, days) = (meta.grid.rows, meta.grid.cols, meta.grid.num_days);
    let counts = shaped(io::take_tensor(&tensors, "counts")?, ndarray::Ix3(rows, cols, days))?;
    let mask = shaped(io::take_tensor(&tensors, "mask")?, ndarray::Ix2(rows, cols))?;
    let spatial = shaped(io::take_tensor(&tensors, "spatial")?, ndarray::Ix3(rows, cols, meta.spatial_channels.len()))?;
    let temporal = shaped(io::take_tensor(&tensors, "temporal")?, ndarray::Ix2(days, meta.temporal_channels.len()))?;
    let st = shaped(io::take_tensor(&tensors, "st")?, ndarray::Ix4(rows, cols, days, meta.st_channels.len()))?;
    let features = FeatureSet {
        spatial,
        temporal,
        st,
        spatial_channels: meta.spatial_channels,
        temporal_channels: meta.temporal_channels,
        st_channels: meta.st_channels,
    };
    features.validate()?;
    Ok(Ingested {
        spec: meta.grid,
        counts: AccidentTensor { counts: counts.mapv(|v| v as u32) },
        mask: RoadMask { mask: mask.mapv(|v| v as u8) },
        features,
    })
}

/// M-RSP on training-period totals, then aggregation of every `k` levels.
pub fn partition_levels(counts: &AccidentTensor, mask: &RoadMask, split: &Split, cfg: &Config) -> Result<LevelMap> {
    let totals = counts.aggregate(split.training_period().into_iter());
    let raw = m_rsp(&totals, mask, &cfg.mrsp)?;
    aggregate_levels(&raw, cfg.k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionRecord {
    pub config_hash: String,
    pub seed: u64,
    pub levelmap_hash: String,
    /// Road cells per level.
    pub road_cells_per_level: BTreeMap<u32, usize>,
}

pub fn road_cells_per_level(levels: &LevelMap, mask: &RoadMask) -> BTreeMap<u32, usize> {
    let mut out = BTreeMap::new();
    for (r, c) in mask.road_cells() {
        *out.entry(levels.level(r, c)).or_insert(0) += 1;
    }
    out
}

/// Everything later stages need, loaded from the output directory.
pub struct Workspace {
    pub cfg: Config,
    pub spec: GridSpec,
    pub split: Split,
    pub levels: LevelMap,
    pub dataset: Dataset,
}

fn out_file(cfg: &Config, name: &str) -> PathBuf {
    cfg.out.join(name)
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(HintError::Stale(format!("{} is missing; run `{stage}` first", path.display())))
    }
}

pub fn run_ingest(cfg: &Config) -> Result<Ingested> {
    let ing = ingest(cfg)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| HintError::io(&cfg.out, e))?;
    save_ingested(&out_file(cfg, INGEST_FILE), &ing, cfg)?;
    Ok(ing)
}

fn load_or_ingest(cfg: &Config) -> Result<Ingested> {
    let path = out_file(cfg, INGEST_FILE);
    if path.exists() {
        let ing = load_ingested(&path)?;
        if ing.spec != cfg.grid {
            return Err(HintError::Stale(format!("{} was built for another grid; rerun `ingest`", path.display())));
        }
        Ok(ing)
    } else {
        run_ingest(cfg)
    }
}

/// Writes `levelmap.csv` (always), `levelmap.geojson` (when asked) and
/// `partition.json`.
pub fn run_partition(cfg: &Config, geojson: bool) -> Result<(LevelMap, PartitionRecord)> {
    let ing = load_or_ingest(cfg)?;
    let split = split_for(cfg)?;
    let levels = partition_levels(&ing.counts, &ing.mask, &split, cfg)?;
    io::write_levelmap_csv(&out_file(cfg, LEVELMAP_CSV), &levels)?;
    if geojson {
        io::write_json(&out_file(cfg, LEVELMAP_GEOJSON), &io::levelmap_geojson(&levels, &ing.spec))?;
    }
    let record = PartitionRecord {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        levelmap_hash: levels.digest(),
        road_cells_per_level: road_cells_per_level(&levels, &ing.mask),
    };
    io::write_json(&out_file(cfg, PARTITION_FILE), &record)?;
    Ok((levels, record))
}

/// Loads ingest output and the level map, builds the dataset (reusing the
/// adjacency cache when it matches).
pub fn workspace(cfg: &Config) -> Result<Workspace> {
    let lm_path = out_file(cfg, LEVELMAP_CSV);
    require(&lm_path, "partition")?;
    let ing = load_or_ingest(cfg)?;
    let levels = io::read_levelmap_csv(&lm_path)?;
    if levels.levels.dim() != (ing.spec.rows, ing.spec.cols) {
        return Err(HintError::Stale(format!("{} does not match the grid; rerun `partition`", lm_path.display())));
    }
    let split = split_for(cfg)?;
    let period = split.training_period();
    let adj_path = out_file(cfg, ADJACENCY_FILE);
    let cached = if adj_path.exists() {
        AdjacencyCache::load(&adj_path).ok().filter(|a| a.matches(cfg.hyper.w, ing.spec.rows, ing.spec.cols, &period))
    } else {
        None
    };
    let dataset = match cached {
        Some(a) => Dataset::with_adjacency(ing.counts, ing.features, ing.mask, cfg.hyper.w, &period, a)?,
        None => {
            let d = Dataset::new(ing.counts, ing.features, ing.mask, cfg.hyper.w, &period)?;
            d.adjacency.save(&adj_path)?;
            d
        }
    };
    Ok(Workspace { cfg: cfg.clone(), spec: ing.spec, split, levels, dataset })
}

pub fn manifest_for(ws: &Workspace, transfer: bool) -> PoolManifest {
    PoolManifest {
        format_version: transfer::POOL_FORMAT_VERSION,
        level_order: Vec::new(),
        levelmap_hash: ws.levels.digest(),
        config_hash: ws.cfg.hash(),
        seed: ws.cfg.seed,
        transfer,
    }
}

pub fn run_train(cfg: &Config) -> Result<ModelPool> {
    let ws = workspace(cfg)?;
    let pool = cross_level_train(&ws.levels, &ws.dataset, &ws.split, &cfg.hyper, &cfg.overrides, cfg.transfer)?;
    let manifest = PoolManifest { level_order: pool.order.clone(), ..manifest_for(&ws, cfg.transfer) };
    save_pool(&pool, &out_file(cfg, POOL_DIR), &cfg.hyper, &cfg.overrides, &manifest)?;
    Ok(pool)
}

fn load_checked_pool(ws: &Workspace) -> Result<ModelPool> {
    let dir = out_file(&ws.cfg, POOL_DIR);
    require(&dir, "train")?;
    let (pool, _) = load_pool(&dir, &ws.levels.digest(), None)?;
    Ok(pool)
}

/// Predictions for `days` (default: the test split) written to `predictions.csv`.
pub fn run_predict(cfg: &Config, days: Option<Vec<usize>>) -> Result<(Vec<usize>, Array3<f64>)> {
    let ws = workspace(cfg)?;
    let pool = load_checked_pool(&ws)?;
    let days = days.unwrap_or_else(|| ws.split.test.clone());
    let pred = predict_grid(&pool, &ws.levels, &ws.dataset, &days)?;
    io::write_predictions(&out_file(cfg, PREDICTIONS_FILE), &pred, &days, &ws.spec, &ws.dataset.mask)?;
    Ok((days, pred))
}

/// Test-split metrics written to `metrics.json`; includes `ablation.json`
/// when it exists for the same config.
pub fn run_evaluate(cfg: &Config) -> Result<Metrics> {
    let ws = workspace(cfg)?;
    let pool = load_checked_pool(&ws)?;
    let pred = predict_grid(&pool, &ws.levels, &ws.dataset, &ws.split.test)?;
    let (overall, ha_overall, per_level) =
        eval::evaluate_predictions(&pred, &ws.dataset.counts, &ws.levels, &ws.dataset.mask, &ws.split)?;
    let ablation_path = out_file(cfg, ABLATION_FILE);
    let ablation = if ablation_path.exists() {
        let a: AblationFile = io::read_json(&ablation_path)?;
        (a.config_hash == cfg.hash()).then_some(a.report)
    } else {
        None
    };
    let metrics = Metrics {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        test_days: ws.split.test.len(),
        road_cells: ws.dataset.mask.count(),
        overall_mse: overall,
        ha_overall_mse: ha_overall,
        overall_improvement_pct: (ha_overall != 0.0).then(|| 100.0 * (ha_overall - overall) / ha_overall),
        per_level,
        ablation,
    };
    io::write_json(&out_file(cfg, METRICS_FILE), &metrics)?;
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationFile {
    pub config_hash: String,
    pub seed: u64,
    pub report: AblationReport,
}

pub fn run_ablate(cfg: &Config) -> Result<AblationReport> {
    let ws = workspace(cfg)?;
    let report = eval::ablation_transfer(&ws.levels, &ws.dataset, &ws.split, &cfg.hyper, &cfg.overrides, cfg.ablation_runs)?;
    io::write_json(
        &out_file(cfg, ABLATION_FILE),
        &AblationFile { config_hash: cfg.hash(), seed: cfg.seed, report: report.clone() },
    )?;
    Ok(report)
}

/// Human-readable summary: one overall row and one row per level.
pub fn format_report(m: &Metrics) -> String {
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |p| format!("{p:.1}%"));
    let mut s = String::new();
    s.push_str(&format!("config {}  seed {}  test days {}\n\n", &m.config_hash[..12.min(m.config_hash.len())], m.seed, m.test_days));
    s.push_str(&format!("{:<12} {:>10} {:>10} {:>12}\n", "model", "mse", "ha mse", "improvement"));
    s.push_str(&format!("{:<12} {:>10.5} {:>10.5} {:>12}\n\n", "hintnet", m.overall_mse, m.ha_overall_mse, pct(m.overall_improvement_pct)));
    s.push_str(&format!("{:<6} {:>6} {:>10} {:>10} {:>12}\n", "level", "cells", "mse", "ha mse", "improvement"));
    for l in &m.per_level {
        s.push_str(&format!(
            "{:<6} {:>6} {:>10.5} {:>10.5} {:>12}\n",
            l.level,
            l.cells,
            l.model_mse,
            l.ha_mse,
            pct(l.improvement_pct)
        ));
    }
    let total: usize = m.per_level.iter().map(|l| l.cells).sum();
    s.push_str(&format!("{:<6} {:>6}\n", "total", total));
    if let Some(a) = &m.ablation {
        s.push_str(&format!(
            "\ntransfer ablation over {} runs\n{:<10} {:>14} {:>14} {:>16}\n",
            a.n_runs, "arm", "median epochs", "mse mean", "mse variance"
        ));
        for arm in [&a.with_transfer, &a.without_transfer] {
            s.push_str(&format!(
                "{:<10} {:>14.1} {:>14.5} {:>16.3e}\n",
                if arm.transfer { "transfer" } else { "scratch" },
                arm.epochs_summary.median,
                arm.test_mse_summary.mean,
                arm.test_mse_summary.variance
            ));
        }
    }
    s
}

pub fn run_report(cfg: &Config) -> Result<String> {
    let path = out_file(cfg, METRICS_FILE);
    require(&path, "evaluate")?;
    let m: Metrics = io::read_json(&path)?;
    Ok(format_report(&m))
}
