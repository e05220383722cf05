//! Flat `key = value` experiment config.
//!
//! `#` starts a comment. Unknown or repeated keys are errors carrying the line
//! number. Per-level training overrides use `level.<v>.<train key>`, e.g.
//! `level.3.learning_rate = 0.0005`. Fractions may be written as `a/b`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use sha2::{Digest, Sha256};

use crate::error::{HintError, Result};
use crate::grid::GridSpec;
use crate::model::{Activation, HyperParams};
use crate::partition::MrspParams;
use crate::synth::SynthSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrafficMetric {
    Euclidean,
    Network,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub out: PathBuf,
    pub accidents: PathBuf,
    pub roads: PathBuf,
    pub poi: PathBuf,
    pub stations: PathBuf,
    /// `None` uses the bundled US federal list.
    pub holidays: Option<PathBuf>,
    pub grid: GridSpec,
    pub n_spectral: usize,
    pub traffic_metric: TrafficMetric,
    pub mrsp: MrspParams,
    pub k: u32,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub transfer: bool,
    pub hyper: HyperParams,
    pub overrides: BTreeMap<u32, HyperParams>,
    pub synth: SynthSpec,
    pub ablation_runs: usize,
    /// Effective settings as text, the input to [`Config::hash`].
    entries: BTreeMap<String, String>,
}

const DEFAULTS: &[(&str, &str)] = &[
    ("out", "out"),
    ("data.accidents", ""),
    ("data.roads", ""),
    ("data.poi", ""),
    ("data.stations", ""),
    ("data.holidays", ""),
    ("grid.rows", "32"),
    ("grid.cols", "32"),
    ("grid.cell_size_km", "1.0"),
    ("grid.origin_lat", "41.45"),
    ("grid.origin_lon", "-93.8"),
    ("grid.start_date", "2016-01-01"),
    ("grid.num_days", "1095"),
    ("features.n_spectral", "10"),
    ("features.traffic_metric", "network"),
    ("mrsp.eta", "5000"),
    ("mrsp.epsilon", "1"),
    ("mrsp.gamma", "50"),
    ("mrsp.lambda", "0"),
    ("partition.k", "2"),
    ("split.test_fraction", "1/3"),
    ("split.val_fraction", "0.2"),
    ("seed", "0"),
    ("train.transfer", "on"),
    ("train.w", "5"),
    ("train.h", "16"),
    ("train.h_l", "32"),
    ("train.s_d", "16"),
    ("train.lstm_input", "16"),
    ("train.learning_rate", "0.01"),
    ("train.epochs", "40"),
    ("train.batch_size", "64"),
    ("train.patience", "8"),
    ("train.momentum", "0.9"),
    ("train.activation", "relu"),
    ("train.samples_per_epoch", "2048"),
    ("train.max_val_samples", "1024"),
    ("synth.urban_radius", "4.5"),
    ("synth.suburban_radius", "9"),
    ("synth.rural_spacing", "6"),
    ("synth.rate_urban", "0.5"),
    ("synth.rate_suburban", "0.05"),
    ("synth.rate_corridor", "0.1"),
    ("synth.rate_rural", "0.005"),
    ("synth.rain_multiplier", "1.5"),
    ("synth.weekday_factors", "0.5,0.7,0.9,1.0,2.0,1.5,0.4"),
    ("synth.p_rain_after_rain", "0.6"),
    ("synth.p_rain_after_dry", "0.15"),
    ("synth.weather_stations", "10"),
    ("synth.traffic_stations", "10"),
    ("synth.missing_fraction", "0.05"),
    ("ablation.runs", "10"),
];

/// Keys that may follow `level.<v>.`.
const LEVEL_KEYS: &[&str] = &[
    "w",
    "h",
    "h_l",
    "s_d",
    "lstm_input",
    "learning_rate",
    "epochs",
    "batch_size",
    "patience",
    "momentum",
    "activation",
    "samples_per_epoch",
    "max_val_samples",
];

/// Keys that do not affect numerical results and stay out of the hash.
const UNHASHED: &[&str] = &["out"];

struct Entry {
    line: usize,
    value: String,
}

fn perr(line: usize, msg: impl Into<String>) -> HintError {
    HintError::Config { line, msg: msg.into() }
}

fn num<T: std::str::FromStr>(key: &str, e: &Entry) -> Result<T> {
    e.value.parse().map_err(|_| perr(e.line, format!("{key}: cannot parse {:?}", e.value)))
}

fn real(key: &str, e: &Entry) -> Result<f64> {
    let v = match e.value.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| perr(e.line, format!("{key}: bad fraction {:?}", e.value)))?;
            let b: f64 = b.trim().parse().map_err(|_| perr(e.line, format!("{key}: bad fraction {:?}", e.value)))?;
            a / b
        }
        None => num(key, e)?,
    };
    if !v.is_finite() {
        return Err(perr(e.line, format!("{key}: {:?} is not finite", e.value)));
    }
    Ok(v)
}

fn on_off(key: &str, e: &Entry) -> Result<bool> {
    match e.value.as_str() {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        v => Err(perr(e.line, format!("{key}: expected on|off, got {v:?}"))),
    }
}

fn apply_train_key(h: &mut HyperParams, key: &str, e: &Entry) -> Result<()> {
    match key {
        "w" => h.w = num(key, e)?,
        "h" => h.h = num(key, e)?,
        "h_l" => h.h_l = num(key, e)?,
        "s_d" => h.s_d = num(key, e)?,
        "lstm_input" => h.lstm_input = num(key, e)?,
        "learning_rate" => h.learning_rate = real(key, e)?,
        "epochs" => h.epochs = num(key, e)?,
        "batch_size" => h.batch_size = num(key, e)?,
        "patience" => h.patience = num(key, e)?,
        "momentum" => h.momentum = real(key, e)?,
        "activation" => {
            h.activation = match e.value.as_str() {
                "relu" => Activation::Relu,
                "identity" | "linear" => Activation::Identity,
                v => return Err(perr(e.line, format!("{key}: expected relu|identity, got {v:?}"))),
            }
        }
        "samples_per_epoch" => h.samples_per_epoch = num(key, e)?,
        "max_val_samples" => h.max_val_samples = num(key, e)?,
        _ => return Err(perr(e.line, format!("unknown key {key:?}"))),
    }
    h.validate().map_err(|err| perr(e.line, err.to_string()))
}

impl Default for Config {
    fn default() -> Self {
        Config::parse("", Path::new(".")).expect("defaults are valid")
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| HintError::io(path, e))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Config::parse(&text, base)
    }

    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Config> {
        let mut raw: BTreeMap<String, Entry> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| perr(n, format!("expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            let known = DEFAULTS.iter().any(|(d, _)| *d == k) || level_key(&k).is_some();
            if !known {
                return Err(perr(n, format!("unknown key {k:?}")));
            }
            if let Some(prev) = raw.get(&k) {
                return Err(perr(n, format!("key {k:?} already set on line {}", prev.line)));
            }
            raw.insert(k, Entry { line: n, value: v });
        }
        Config::from_entries(raw, base)
    }

    fn from_entries(mut raw: BTreeMap<String, Entry>, base: &Path) -> Result<Config> {
        for (k, v) in DEFAULTS {
            raw.entry(k.to_string()).or_insert(Entry { line: 0, value: v.to_string() });
        }
        let get = |k: &str| &raw[k];
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let out = resolve(&get("out").value);
        let data = |k: &str, file: &str| {
            let v = &get(k).value;
            if v.is_empty() {
                out.join("data").join(file)
            } else {
                resolve(v)
            }
        };

        let grid = GridSpec {
            rows: num("grid.rows", get("grid.rows"))?,
            cols: num("grid.cols", get("grid.cols"))?,
            cell_size_km: real("grid.cell_size_km", get("grid.cell_size_km"))?,
            origin_lat: real("grid.origin_lat", get("grid.origin_lat"))?,
            origin_lon: real("grid.origin_lon", get("grid.origin_lon"))?,
            time_start: NaiveDate::parse_from_str(&get("grid.start_date").value, "%Y-%m-%d").map_err(|_| {
                perr(get("grid.start_date").line, format!("grid.start_date: bad date {:?}", get("grid.start_date").value))
            })?,
            num_days: num("grid.num_days", get("grid.num_days"))?,
        };
        grid.validate().map_err(|e| perr(get("grid.rows").line, e.to_string()))?;

        let mut hyper = HyperParams::default();
        for key in LEVEL_KEYS {
            let full = format!("train.{key}");
            apply_train_key(&mut hyper, key, get(&full))?;
        }
        let seed: u64 = num("seed", get("seed"))?;
        hyper.seed = seed;
        let mut overrides: BTreeMap<u32, HyperParams> = BTreeMap::new();
        for (k, e) in &raw {
            if let Some((level, key)) = level_key(k) {
                let h = overrides.entry(level).or_insert_with(|| hyper.clone());
                apply_train_key(h, key, e)?;
            }
        }

        let mrsp = MrspParams {
            eta: real("mrsp.eta", get("mrsp.eta"))?,
            epsilon: num("mrsp.epsilon", get("mrsp.epsilon"))?,
            gamma: real("mrsp.gamma", get("mrsp.gamma"))?,
            lambda: real("mrsp.lambda", get("mrsp.lambda"))?,
        };
        mrsp.rsp(0).validate().map_err(|e| perr(get("mrsp.epsilon").line, e.to_string()))?;
        if !(mrsp.eta > 0.0) {
            return Err(perr(get("mrsp.eta").line, "mrsp.eta must be > 0"));
        }
        let k: u32 = num("partition.k", get("partition.k"))?;
        if k == 0 {
            return Err(perr(get("partition.k").line, "partition.k must be >= 1"));
        }

        let weekday: Vec<f64> = get("synth.weekday_factors")
            .value
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| perr(get("synth.weekday_factors").line, "synth.weekday_factors: expected 7 numbers"))?;
        let weekday_factors: [f64; 7] = weekday
            .try_into()
            .map_err(|_| perr(get("synth.weekday_factors").line, "synth.weekday_factors: expected 7 numbers"))?;
        let synth = SynthSpec {
            rows: grid.rows,
            cols: grid.cols,
            num_days: grid.num_days,
            start_date: grid.time_start,
            cell_size_km: grid.cell_size_km,
            origin_lat: grid.origin_lat,
            origin_lon: grid.origin_lon,
            seed,
            urban_radius: real("synth.urban_radius", get("synth.urban_radius"))?,
            suburban_radius: real("synth.suburban_radius", get("synth.suburban_radius"))?,
            rural_spacing: num("synth.rural_spacing", get("synth.rural_spacing"))?,
            rate_urban: real("synth.rate_urban", get("synth.rate_urban"))?,
            rate_suburban: real("synth.rate_suburban", get("synth.rate_suburban"))?,
            rate_corridor: real("synth.rate_corridor", get("synth.rate_corridor"))?,
            rate_rural: real("synth.rate_rural", get("synth.rate_rural"))?,
            rain_multiplier: real("synth.rain_multiplier", get("synth.rain_multiplier"))?,
            weekday_factors,
            p_rain_after_rain: real("synth.p_rain_after_rain", get("synth.p_rain_after_rain"))?,
            p_rain_after_dry: real("synth.p_rain_after_dry", get("synth.p_rain_after_dry"))?,
            weather_stations: num("synth.weather_stations", get("synth.weather_stations"))?,
            traffic_stations: num("synth.traffic_stations", get("synth.traffic_stations"))?,
            missing_fraction: real("synth.missing_fraction", get("synth.missing_fraction"))?,
            ..SynthSpec::default()
        };

        let traffic_metric = match get("features.traffic_metric").value.as_str() {
            "network" => TrafficMetric::Network,
            "euclidean" => TrafficMetric::Euclidean,
            v => {
                return Err(perr(
                    get("features.traffic_metric").line,
                    format!("features.traffic_metric: expected network|euclidean, got {v:?}"),
                ))
            }
        };
        let holidays = {
            let v = &get("data.holidays").value;
            (!v.is_empty()).then(|| resolve(v))
        };

        Ok(Config {
            accidents: data("data.accidents", "accidents.csv"),
            roads: data("data.roads", "roads.csv"),
            poi: data("data.poi", "poi.csv"),
            stations: data("data.stations", "stations.csv"),
            holidays,
            out,
            grid,
            n_spectral: num("features.n_spectral", get("features.n_spectral"))?,
            traffic_metric,
            mrsp,
            k,
            test_fraction: real("split.test_fraction", get("split.test_fraction"))?,
            val_fraction: real("split.val_fraction", get("split.val_fraction"))?,
            seed,
            transfer: on_off("train.transfer", get("train.transfer"))?,
            hyper,
            overrides,
            synth,
            ablation_runs: num("ablation.runs", get("ablation.runs"))?,
            entries: raw.into_iter().map(|(k, e)| (k, e.value)).collect(),
        })
    }

    /// Applies `--seed`, `--out` and `--transfer` style overrides.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Config> {
        let mut raw: BTreeMap<String, Entry> =
            self.entries.iter().map(|(k, v)| (k.clone(), Entry { line: 0, value: v.clone() })).collect();
        raw.insert(key.to_string(), Entry { line: 0, value: value.to_string() });
        // `out` must stay absolute or relative to the working directory here.
        let mut c = Config::from_entries(raw, Path::new(""))?;
        if key != "out" {
            c.out = self.out.clone();
            c.accidents = self.accidents.clone();
            c.roads = self.roads.clone();
            c.poi = self.poi.clone();
            c.stations = self.stations.clone();
            c.holidays = self.holidays.clone();
        } else {
            for (k, file, slot) in [
                ("data.accidents", "accidents.csv", &mut c.accidents),
                ("data.roads", "roads.csv", &mut c.roads),
                ("data.poi", "poi.csv", &mut c.poi),
                ("data.stations", "stations.csv", &mut c.stations),
            ] {
                let explicit = !self.entries[k].is_empty();
                *slot = if explicit { self.path_for(k) } else { c.out.join("data").join(file) };
            }
            c.holidays = self.holidays.clone();
        }
        Ok(c)
    }

    fn path_for(&self, key: &str) -> PathBuf {
        match key {
            "data.accidents" => self.accidents.clone(),
            "data.roads" => self.roads.clone(),
            "data.poi" => self.poi.clone(),
            _ => self.stations.clone(),
        }
    }

    /// SHA-256 over every effective setting except the output directory.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.entries {
            if UNHASHED.contains(&k.as_str()) {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn hyper_for(&self, level: u32) -> HyperParams {
        crate::transfer::hyper_for(&self.hyper, &self.overrides, level)
    }
}

fn level_key(k: &str) -> Option<(u32, &str)> {
    let rest = k.strip_prefix("level.")?;
    let (level, key) = rest.split_once('.')?;
    let level: u32 = level.parse().ok()?;
    LEVEL_KEYS.contains(&key).then_some((level, key))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Config> {
        Config::parse(text, Path::new("/base"))
    }

    #[test]
    fn defaults() {
        let c = parse("").unwrap();
        assert_eq!(c.grid.rows, 32);
        assert_eq!(c.grid.num_days, 1095);
        assert_eq!(c.k, 2);
        assert!((c.test_fraction - 1.0 / 3.0).abs() < 1e-15);
        let expected = HyperParams {
            learning_rate: 0.01,
            epochs: 40,
            patience: 8,
            momentum: 0.9,
            samples_per_epoch: 2048,
            max_val_samples: 1024,
            ..HyperParams::default()
        };
        assert_eq!(c.hyper, expected);
        assert_eq!(c.accidents, PathBuf::from("/base/out/data/accidents.csv"));
        assert!(c.holidays.is_none());
        assert!(c.transfer);
    }

    #[test]
    fn values_comments_and_overrides() {
        let c = parse(
            "# experiment\nseed = 7  # trailing\ntrain.epochs = 3\nlevel.2.learning_rate = 1e-4\n\
             data.roads = /abs/roads.csv\nout = runs/a\ntrain.transfer = off\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.hyper.seed, 7);
        assert_eq!(c.hyper.epochs, 3);
        assert_eq!(c.overrides[&2].learning_rate, 1e-4);
        assert_eq!(c.overrides[&2].epochs, 3);
        assert_eq!(c.hyper_for(1).learning_rate, 0.01);
        assert_eq!(c.roads, PathBuf::from("/abs/roads.csv"));
        assert_eq!(c.out, PathBuf::from("/base/runs/a"));
        assert_eq!(c.poi, PathBuf::from("/base/runs/a/data/poi.csv"));
        assert!(!c.transfer);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse("seed = 1\n\nbogus.key = 3\n").unwrap_err();
        assert!(matches!(err, HintError::Config { line: 3, .. }), "{err}");
        let err = parse("seed = 1\nseed = 2\n").unwrap_err();
        assert!(matches!(err, HintError::Config { line: 2, .. }), "{err}");
        let err = parse("train.w = 4\n").unwrap_err();
        assert!(matches!(err, HintError::Config { line: 1, .. }), "{err}");
        let err = parse("\ngrid.rows = x\n").unwrap_err();
        assert!(matches!(err, HintError::Config { line: 2, .. }), "{err}");
        assert!(parse("no equals sign\n").is_err());
        assert!(parse("level.x.epochs = 3\n").is_err());
        assert!(parse("level.1.seed = 3\n").is_err());
    }

    #[test]
    fn hash_tracks_settings_not_output() {
        let a = parse("seed = 1\n").unwrap();
        let b = parse("# same\nseed=1\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash(), parse("seed = 1\nout = elsewhere\n").unwrap().hash());
        assert_ne!(a.hash(), parse("seed = 2\n").unwrap().hash());
        assert_ne!(a.hash(), a.with_override("seed", "2").unwrap().hash());
        assert_eq!(a.with_override("seed", "2").unwrap().hash(), parse("seed = 2\n").unwrap().hash());
    }

    #[test]
    fn out_override_moves_default_data() {
        let a = parse("data.roads = r.csv\n").unwrap();
        let b = a.with_override("out", "/tmp/x").unwrap();
        assert_eq!(b.out, PathBuf::from("/tmp/x"));
        assert_eq!(b.accidents, PathBuf::from("/tmp/x/data/accidents.csv"));
        assert_eq!(b.roads, PathBuf::from("/base/r.csv"));
        assert_eq!(a.hash(), b.hash());
    }
}
