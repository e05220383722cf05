//! Seeded synthetic world: an urban core with a street mesh, a suburban ring,
//! highway corridors and sparse rural roads, with regional weather, traffic
//! stations and Poisson accident counts.
//!
//! Accident rate of a road cell on day `t` is
//! `zone rate * weekday factor * (rain multiplier if it rains)`.
//! Rain follows a two-state Markov chain shared by the whole region.

use std::f64::consts::PI;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{HintError, Result};
use crate::grid::{segment_cells_xy, EventRecord, GridSpec, PoiRecord, RoadSegment, POI_CATEGORIES};
use crate::io::{self, StationRecord};

pub const WEATHER_CHANNELS: [&str; 9] = [
    "precipitation",
    "snowfall",
    "snow_depth",
    "temp_min",
    "temp_max",
    "wind",
    "visibility",
    "humidity",
    "pressure",
];

pub const TRAFFIC_CHANNELS: [&str; 3] = ["speed", "volume", "truck_volume"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub rows: usize,
    pub cols: usize,
    pub num_days: usize,
    pub start_date: NaiveDate,
    pub cell_size_km: f64,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub seed: u64,
    /// Urban centres as `(row, col)` fractions of the grid.
    pub urban_centers: Vec<(f64, f64)>,
    /// Radii in cells.
    pub urban_radius: f64,
    pub suburban_radius: f64,
    /// Highway corridors as `[row0, col0, row1, col1]` grid fractions.
    pub corridors: Vec<[f64; 4]>,
    /// Spacing of rural local roads in cells.
    pub rural_spacing: usize,
    pub rate_urban: f64,
    pub rate_suburban: f64,
    pub rate_corridor: f64,
    pub rate_rural: f64,
    pub rain_multiplier: f64,
    /// Monday first.
    pub weekday_factors: [f64; 7],
    pub p_rain_after_rain: f64,
    pub p_rain_after_dry: f64,
    pub weather_stations: usize,
    pub traffic_stations: usize,
    /// Probability that a station reading is missing.
    pub missing_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            rows: 32,
            cols: 32,
            num_days: 730 + 365,
            start_date: NaiveDate::from_ymd_opt(2016, 1, 1).expect("valid date"),
            cell_size_km: 1.0,
            origin_lat: 41.45,
            origin_lon: -93.80,
            seed: 0,
            urban_centers: vec![(0.5, 0.5)],
            urban_radius: 4.5,
            suburban_radius: 9.0,
            corridors: vec![[0.25, 0.0, 0.25, 1.0], [0.0, 0.75, 1.0, 0.75]],
            rural_spacing: 6,
            rate_urban: 0.5,
            rate_suburban: 0.05,
            rate_corridor: 0.1,
            rate_rural: 0.005,
            rain_multiplier: 1.5,
            weekday_factors: [0.5, 0.7, 0.9, 1.0, 2.0, 1.5, 0.4],
            p_rain_after_rain: 0.6,
            p_rain_after_dry: 0.15,
            weather_stations: 10,
            traffic_stations: 10,
            missing_fraction: 0.05,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HintError::InvalidInput(format!("synth: {m}")));
        if self.rows < 16 || self.cols < 16 {
            return bad(format!("grid {}x{} is below the 16x16 minimum", self.rows, self.cols));
        }
        if self.num_days < 8 {
            return bad(format!("num_days = {} (need >= 8)", self.num_days));
        }
        let rates = [self.rate_rural, self.rate_suburban, self.rate_corridor, self.rate_urban];
        if rates.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return bad("all zone rates must be > 0".into());
        }
        if !(self.rate_rural < self.rate_suburban && self.rate_suburban < self.rate_urban) {
            return bad("rates must satisfy rural < suburban < urban".into());
        }
        if !(self.rain_multiplier > 0.0) || self.weekday_factors.iter().any(|f| !(*f > 0.0)) {
            return bad("rain multiplier and weekday factors must be > 0".into());
        }
        for p in [self.p_rain_after_rain, self.p_rain_after_dry, self.missing_fraction] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("probability {p} outside [0, 1]"));
            }
        }
        if !(self.cell_size_km > 0.0) || !(self.suburban_radius >= self.urban_radius) || self.urban_radius < 0.0 {
            return bad("cell size must be > 0 and 0 <= urban radius <= suburban radius".into());
        }
        if self.rural_spacing == 0 || self.weather_stations == 0 || self.traffic_stations == 0 {
            return bad("rural spacing and station counts must be >= 1".into());
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            rows: self.rows,
            cols: self.cols,
            cell_size_km: self.cell_size_km,
            origin_lat: self.origin_lat,
            origin_lon: self.origin_lon,
            time_start: self.start_date,
            num_days: self.num_days,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Zone {
    OffRoad,
    Rural,
    Corridor,
    Suburban,
    Urban,
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub spec: GridSpec,
    pub zones: Array2<Zone>,
    /// Regional rain state per day.
    pub rain: Vec<bool>,
    pub events: Vec<EventRecord>,
    pub roads: Vec<RoadSegment>,
    pub poi: Vec<PoiRecord>,
    pub stations: Vec<StationRecord>,
}

impl SynthWorld {
    /// Writes `accidents.csv`, `roads.csv`, `poi.csv` and `stations.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| HintError::io(dir, e))?;
        io::write_accidents(&dir.join("accidents.csv"), &self.events)?;
        io::write_roads(&dir.join("roads.csv"), &self.roads)?;
        io::write_poi(&dir.join("poi.csv"), &self.poi)?;
        io::write_stations(&dir.join("stations.csv"), &self.stations)
    }
}

struct Layout {
    spec: GridSpec,
    segments: Vec<RoadSegment>,
    zones: Array2<Zone>,
    speed: Array2<f64>,
    aadt: Array2<f64>,
}

fn dist_to_center(s: &SynthSpec, r: usize, c: usize) -> f64 {
    s.urban_centers
        .iter()
        .map(|&(fr, fc)| {
            let (cr, cc) = (fr * (s.rows - 1) as f64, fc * (s.cols - 1) as f64);
            ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

fn layout(s: &SynthSpec) -> Layout {
    let spec = s.grid_spec();
    let center = |r: f64, c: f64| ((c + 0.5) * s.cell_size_km, (r + 0.5) * s.cell_size_km);
    let mut segments = Vec::new();
    let mut push = |a: (f64, f64), b: (f64, f64), speed: f64, aadt: f64, class: u8| {
        let (lat1, lon1) = spec.to_latlon(a.0, a.1);
        let (lat2, lon2) = spec.to_latlon(b.0, b.1);
        segments.push(RoadSegment { lat1, lon1, lat2, lon2, speed_limit: speed, aadt, road_class: class });
    };
    let (rows, cols) = (s.rows, s.cols);

    // Street chords through the urban and suburban discs.
    let mut chords = |radius: f64, step: usize, speed: f64, aadt: f64, class: u8| {
        for r in 0..rows {
            let inside: Vec<usize> = (0..cols).filter(|&c| dist_to_center(s, r, c) <= radius).collect();
            if let (Some(&a), Some(&b)) = (inside.first(), inside.last()) {
                if r % step == 0 {
                    push(center(r as f64, a as f64), center(r as f64, b as f64), speed, aadt, class);
                }
            }
        }
        for c in 0..cols {
            let inside: Vec<usize> = (0..rows).filter(|&r| dist_to_center(s, r, c) <= radius).collect();
            if let (Some(&a), Some(&b)) = (inside.first(), inside.last()) {
                if c % step == 0 {
                    push(center(a as f64, c as f64), center(b as f64, c as f64), speed, aadt, class);
                }
            }
        }
    };
    chords(s.urban_radius, 1, 40.0, 15000.0, 2);
    chords(s.suburban_radius, 2, 55.0, 5000.0, 3);

    let mut corridor_cells = Vec::new();
    for k in &s.corridors {
        let a = center(k[0] * (rows - 1) as f64, k[1] * (cols - 1) as f64);
        let b = center(k[2] * (rows - 1) as f64, k[3] * (cols - 1) as f64);
        push(a, b, 110.0, 30000.0, 1);
        corridor_cells.extend(segment_cells_xy(&spec, a, b));
    }
    let sp = s.rural_spacing;
    for r in (sp / 2..rows).step_by(sp) {
        push(center(r as f64, 0.0), center(r as f64, (cols - 1) as f64), 90.0, 800.0, 3);
    }
    for c in (sp / 2..cols).step_by(sp + 2) {
        push(center(0.0, c as f64), center((rows - 1) as f64, c as f64), 90.0, 800.0, 3);
    }

    let raster = crate::grid::rasterize_roads(&segments, &spec).expect("valid synthetic roads");
    let zones = Array2::from_shape_fn((rows, cols), |(r, c)| {
        if !raster.mask.is_road(r, c) {
            return Zone::OffRoad;
        }
        let d = dist_to_center(s, r, c);
        if d <= s.urban_radius {
            Zone::Urban
        } else if corridor_cells.contains(&(r, c)) {
            Zone::Corridor
        } else if d <= s.suburban_radius {
            Zone::Suburban
        } else {
            Zone::Rural
        }
    });
    let speed = raster.channels.index_axis(ndarray::Axis(2), 1).to_owned();
    let aadt = raster.channels.index_axis(ndarray::Axis(2), 2).to_owned();
    Layout { spec, segments, zones, speed, aadt }
}

fn zone_rate(s: &SynthSpec, z: Zone) -> f64 {
    match z {
        Zone::OffRoad => 0.0,
        Zone::Rural => s.rate_rural,
        Zone::Corridor => s.rate_corridor,
        Zone::Suburban => s.rate_suburban,
        Zone::Urban => s.rate_urban,
    }
}

/// Random point inside a cell, kept away from the edges.
fn point_in_cell(rng: &mut ChaCha8Rng, spec: &GridSpec, r: usize, c: usize) -> (f64, f64) {
    let fx: f64 = rng.random_range(0.05..0.95);
    let fy: f64 = rng.random_range(0.05..0.95);
    spec.to_latlon((c as f64 + fx) * spec.cell_size_km, (r as f64 + fy) * spec.cell_size_km)
}

struct DayWeather {
    rain: bool,
    amount: f64,
    temp: f64,
    snowfall: f64,
    snow_depth: f64,
}

fn regional_weather(s: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<DayWeather> {
    let anomaly_noise = Normal::<f64>::new(0.0, 3.0).expect("sd > 0");
    let amount = Exp::new(1.0 / 6.0).expect("rate > 0");
    let mut rain = false;
    let mut anomaly = 0.0;
    let mut depth: f64 = 0.0;
    (0..s.num_days)
        .map(|d| {
            let p = if rain { s.p_rain_after_rain } else { s.p_rain_after_dry };
            rain = rng.random_bool(p);
            let date = s.start_date + Duration::days(d as i64);
            let doy = date.ordinal() as f64;
            anomaly = 0.7 * anomaly + anomaly_noise.sample(rng);
            let temp = 9.0 - 15.0 * (2.0 * PI * (doy - 15.0) / 365.0).cos() + anomaly;
            let amt = if rain { 0.5 + amount.sample(rng) } else { 0.0 };
            let snowfall = if rain && temp < 0.0 { amt } else { 0.0 };
            depth = (depth + snowfall - 0.5 * temp.max(0.0)).max(0.0);
            DayWeather { rain, amount: amt, temp, snowfall, snow_depth: depth }
        })
        .collect()
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// Generates the world from one seeded stream of draws.
pub fn generate(s: &SynthSpec) -> Result<SynthWorld> {
    s.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let Layout { spec, segments, zones, speed, aadt } = layout(s);
    let std_normal = Normal::<f64>::new(0.0, 1.0).expect("sd > 0");
    let weather = regional_weather(s, &mut rng);

    let road_cells: Vec<(usize, usize)> =
        zones.indexed_iter().filter(|(_, z)| **z != Zone::OffRoad).map(|(ix, _)| ix).collect();

    let mut poi = Vec::new();
    for ((r, c), &z) in zones.indexed_iter() {
        let mean = match z {
            Zone::Urban => 6.0,
            Zone::Suburban => 2.0,
            Zone::Corridor => 1.0,
            Zone::Rural => 0.2,
            Zone::OffRoad => 0.05,
        };
        let n = Poisson::new(mean).expect("mean > 0").sample(&mut rng) as usize;
        for _ in 0..n {
            let (lat, lon) = point_in_cell(&mut rng, &spec, r, c);
            let category = if z == Zone::Urban {
                rng.random_range(1..=POI_CATEGORIES as u8)
            } else {
                rng.random_range(7..=POI_CATEGORIES as u8)
            };
            poi.push(PoiRecord { lat, lon, category });
        }
    }

    let weather_sites: Vec<(f64, f64)> = (0..s.weather_stations)
        .map(|_| {
            let x = rng.random_range(0.0..s.cols as f64 * s.cell_size_km);
            let y = rng.random_range(0.0..s.rows as f64 * s.cell_size_km);
            spec.to_latlon(x, y)
        })
        .collect();
    let traffic_sites: Vec<((f64, f64), (usize, usize))> = (0..s.traffic_stations)
        .map(|_| {
            let (r, c) = road_cells[rng.random_range(0..road_cells.len())];
            (point_in_cell(&mut rng, &spec, r, c), (r, c))
        })
        .collect();

    let mut stations = Vec::new();
    let mut events = Vec::new();
    for (d, w) in weather.iter().enumerate() {
        let date = s.start_date + Duration::days(d as i64);
        let dow = date.weekday().num_days_from_monday() as usize;
        for (i, &(lat, lon)) in weather_sites.iter().enumerate() {
            let mut n = || std_normal.sample(&mut rng);
            let precip = if w.rain { w.amount * (0.3 * n()).exp() } else { 0.0 };
            let values = [
                precip,
                w.snowfall * (0.2 * n()).exp(),
                (w.snow_depth + 0.5 * n()).max(0.0),
                w.temp - 6.0 + n(),
                w.temp + 6.0 + n(),
                12.0 + if w.rain { 8.0 } else { 0.0 } + (4.0 * n()).abs(),
                (10.0 - if w.rain { 5.0 } else { 0.0 } - if w.snowfall > 0.0 { 3.0 } else { 0.0 } + 0.5 * n())
                    .clamp(0.2, 10.0),
                (60.0 + if w.rain { 30.0 } else { 0.0 } + 5.0 * n()).clamp(10.0, 100.0),
                1013.0 - if w.rain { 8.0 } else { 0.0 } + 3.0 * n(),
            ];
            for (ch, v) in WEATHER_CHANNELS.iter().zip(values) {
                if !rng.random_bool(s.missing_fraction) {
                    stations.push(StationRecord {
                        station_id: format!("w{i:02}"),
                        lat,
                        lon,
                        date,
                        channel: ch.to_string(),
                        value: round3(v),
                    });
                }
            }
        }
        const TRAFFIC_WEEKDAY: [f64; 7] = [1.0, 1.0, 1.0, 1.05, 1.1, 0.8, 0.7];
        for (i, &((lat, lon), (r, c))) in traffic_sites.iter().enumerate() {
            let mut n = || std_normal.sample(&mut rng);
            let volume = aadt[[r, c]] * TRAFFIC_WEEKDAY[dow] * (0.1 * n()).exp();
            let values = [
                speed[[r, c]] * if w.rain { 0.85 } else { 1.0 } + 2.0 * n(),
                volume,
                0.12 * volume * if dow >= 5 { 0.5 } else { 1.0 },
            ];
            for (ch, v) in TRAFFIC_CHANNELS.iter().zip(values) {
                if !rng.random_bool(s.missing_fraction) {
                    stations.push(StationRecord {
                        station_id: format!("t{i:02}"),
                        lat,
                        lon,
                        date,
                        channel: ch.to_string(),
                        value: round3(v),
                    });
                }
            }
        }
        let factor = s.weekday_factors[dow] * if w.rain { s.rain_multiplier } else { 1.0 };
        for &(r, c) in &road_cells {
            let rate = zone_rate(s, zones[[r, c]]) * factor;
            let k = Poisson::new(rate).expect("rate > 0").sample(&mut rng) as usize;
            for _ in 0..k {
                let secs: i64 = rng.random_range(0..86_400);
                let timestamp = date.and_hms_opt(0, 0, 0).expect("midnight") + Duration::seconds(secs);
                let (lat, lon) = point_in_cell(&mut rng, &spec, r, c);
                events.push(EventRecord { timestamp, lat, lon });
            }
        }
    }
    Ok(SynthWorld { spec, zones, rain: weather.iter().map(|w| w.rain).collect(), events, roads: segments, poi, stations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{map_events_to_grid, rasterize_roads};

    fn small(seed: u64) -> SynthSpec {
        SynthSpec { rows: 16, cols: 16, num_days: 365, seed, suburban_radius: 7.0, ..SynthSpec::default() }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SynthSpec { num_days: 30, ..small(7) };
        generate(&spec).unwrap().write(a.path()).unwrap();
        generate(&spec).unwrap().write(b.path()).unwrap();
        for f in ["accidents.csv", "roads.csv", "poi.csv", "stations.csv"] {
            let x = std::fs::read(a.path().join(f)).unwrap();
            assert!(!x.is_empty());
            assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let other = generate(&SynthSpec { seed: 8, ..spec }).unwrap();
        other.write(b.path()).unwrap();
        assert_ne!(std::fs::read(a.path().join("accidents.csv")).unwrap(), std::fs::read(b.path().join("accidents.csv")).unwrap());
    }

    #[test]
    fn zones_and_rates() {
        let s = small(1);
        let w = generate(&s).unwrap();
        let grid = map_events_to_grid(&w.events, &w.spec).unwrap();
        assert_eq!(grid.skipped, 0);
        assert_eq!(grid.value.total() as usize, w.events.len());
        let raster = rasterize_roads(&w.roads, &w.spec).unwrap();
        let days = s.num_days as f64;
        let (mut urban, mut nu, mut rural, mut nr) = (0.0, 0.0, 0.0, 0.0);
        for ((r, c), &z) in w.zones.indexed_iter() {
            let total: f64 = (0..s.num_days).map(|d| grid.value.get(r, c, d) as f64).sum();
            assert_eq!(z != Zone::OffRoad, raster.mask.is_road(r, c), "({r},{c})");
            if z == Zone::OffRoad {
                assert_eq!(total, 0.0, "event off the road network at ({r},{c})");
            }
            match z {
                Zone::Urban => (urban, nu) = (urban + total, nu + 1.0),
                Zone::Rural => (rural, nr) = (rural + total, nr + 1.0),
                _ => {}
            }
        }
        assert!(nu > 0.0 && nr > 0.0);
        let (mu, mr) = (urban / nu / days, rural / nr / days);
        assert!(mu > 20.0 * mr, "urban {mu} rural {mr}");
    }

    #[test]
    fn rain_days_raise_counts() {
        let s = small(3);
        let w = generate(&s).unwrap();
        let grid = map_events_to_grid(&w.events, &w.spec).unwrap().value;
        // Rain days are read back from the station file, not the hidden state.
        let mut precip = vec![0.0; s.num_days];
        for r in w.stations.iter().filter(|r| r.channel == "precipitation") {
            precip[(r.date - s.start_date).num_days() as usize] += r.value;
        }
        let urban: Vec<(usize, usize)> =
            w.zones.indexed_iter().filter(|(_, z)| **z == Zone::Urban).map(|(ix, _)| ix).collect();
        let (mut wet, mut nw, mut dry, mut nd) = (0.0, 0.0, 0.0, 0.0);
        for (d, &p) in precip.iter().enumerate() {
            let total: f64 = urban.iter().map(|&(r, c)| grid.get(r, c, d) as f64).sum();
            if p > 0.0 {
                wet += total;
                nw += urban.len() as f64;
            } else {
                dry += total;
                nd += urban.len() as f64;
            }
        }
        let ratio = (wet / nw) / (dry / nd);
        assert!((ratio - 1.5).abs() <= 0.3, "rain/dry ratio {ratio}");
    }

    #[test]
    fn stations_cover_every_channel() {
        let w = generate(&SynthSpec { num_days: 20, ..small(2) }).unwrap();
        for ch in WEATHER_CHANNELS.iter().chain(TRAFFIC_CHANNELS.iter()) {
            assert!(w.stations.iter().any(|r| r.channel == *ch), "{ch}");
        }
        assert!(w.stations.iter().all(|r| r.value.is_finite()));
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&SynthSpec { rows: 8, ..SynthSpec::default() }).is_err());
        assert!(generate(&SynthSpec { rate_rural: 0.0, ..SynthSpec::default() }).is_err());
        assert!(generate(&SynthSpec { rate_urban: 0.01, ..SynthSpec::default() }).is_err());
    }
}
