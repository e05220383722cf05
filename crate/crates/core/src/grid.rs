//! The spatio-temporal field: a `rows x cols` grid of square cells crossed
//! with whole days, and the gridding of raw event, road and POI records.
//!
//! Coordinates are projected with a local equirectangular approximation
//! about the grid origin (the south-west corner). Row 0 is the southern edge,
//! column 0 the western edge. Cells are half-open, `[x, x + d)`, so a point on
//! a shared edge belongs to the cell with the larger index on that axis and a
//! point exactly at the origin belongs to cell `(0, 0)`.

use chrono::{Duration, NaiveDate, NaiveDateTime};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{HintError, Result};

const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Number of POI categories (1-based in input files).
pub const POI_CATEGORIES: usize = 13;

/// Road attribute channels produced by [`rasterize_roads`].
pub const ROAD_CHANNELS: [&str; 6] = [
    "road_mask",
    "speed_limit",
    "aadt",
    "road_class_1",
    "road_class_2",
    "road_class_3",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub cell_size_km: f64,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub time_start: NaiveDate,
    pub num_days: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(HintError::InvalidGrid("rows and cols must be >= 1".into()));
        }
        if !(self.cell_size_km > 0.0) || !self.cell_size_km.is_finite() {
            return Err(HintError::InvalidGrid("cell_size_km must be > 0".into()));
        }
        if !self.origin_lat.is_finite() || !self.origin_lon.is_finite() {
            return Err(HintError::InvalidGrid("origin must be finite".into()));
        }
        if self.origin_lat.abs() >= 89.0 {
            return Err(HintError::InvalidGrid("origin latitude too close to a pole".into()));
        }
        if self.num_days < 8 {
            return Err(HintError::InvalidGrid(format!(
                "num_days = {} but a 7-day window plus a target day needs at least 8",
                self.num_days
            )));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    fn lon_scale(&self) -> f64 {
        EARTH_RADIUS_KM * self.origin_lat.to_radians().cos()
    }

    /// Grid-local kilometres `(x east, y north)` of a WGS84 point.
    pub fn to_local(&self, lat: f64, lon: f64) -> (f64, f64) {
        let x = (lon - self.origin_lon).to_radians() * self.lon_scale();
        let y = (lat - self.origin_lat).to_radians() * EARTH_RADIUS_KM;
        (x, y)
    }

    /// Inverse of [`GridSpec::to_local`].
    pub fn to_latlon(&self, x: f64, y: f64) -> (f64, f64) {
        let lat = self.origin_lat + (y / EARTH_RADIUS_KM).to_degrees();
        let lon = self.origin_lon + (x / self.lon_scale()).to_degrees();
        (lat, lon)
    }

    pub fn cell_of_xy(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = (x / self.cell_size_km).floor();
        let r = (y / self.cell_size_km).floor();
        if r < 0.0 || c < 0.0 || r >= self.rows as f64 || c >= self.cols as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    pub fn cell_of(&self, lat: f64, lon: f64) -> Option<(usize, usize)> {
        let (x, y) = self.to_local(lat, lon);
        self.cell_of_xy(x, y)
    }

    /// Centre of a cell in grid-local kilometres.
    pub fn cell_center_xy(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5) * self.cell_size_km,
            (row as f64 + 0.5) * self.cell_size_km,
        )
    }

    pub fn day_index(&self, date: NaiveDate) -> Option<usize> {
        let d = (date - self.time_start).num_days();
        (d >= 0 && (d as usize) < self.num_days).then_some(d as usize)
    }

    pub fn date_of(&self, day: usize) -> NaiveDate {
        self.time_start + Duration::days(day as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub timestamp: NaiveDateTime,
    pub lat: f64,
    pub lon: f64,
}

/// Daily accident counts `C(l, t)`, indexed `[row, col, day]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AccidentTensor {
    pub counts: Array3<u32>,
}

impl AccidentTensor {
    pub fn zeros(spec: &GridSpec) -> Self {
        AccidentTensor { counts: Array3::zeros((spec.rows, spec.cols, spec.num_days)) }
    }

    pub fn rows(&self) -> usize {
        self.counts.dim().0
    }

    pub fn cols(&self) -> usize {
        self.counts.dim().1
    }

    pub fn days(&self) -> usize {
        self.counts.dim().2
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&v| v as u64).sum()
    }

    pub fn get(&self, row: usize, col: usize, day: usize) -> u32 {
        self.counts[[row, col, day]]
    }

    /// Per-cell totals over the given days.
    pub fn aggregate(&self, days: impl Iterator<Item = usize> + Clone) -> Array2<f64> {
        let (rows, cols, _) = self.counts.dim();
        Array2::from_shape_fn((rows, cols), |(r, c)| {
            days.clone().map(|d| self.counts[[r, c, d]] as f64).sum()
        })
    }
}

/// Binary road mask `H`: 1 where a cell contains any road segment.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadMask {
    pub mask: Array2<u8>,
}

impl RoadMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        RoadMask { mask: Array2::from_elem((rows, cols), 1) }
    }

    pub fn is_road(&self, row: usize, col: usize) -> bool {
        self.mask[[row, col]] != 0
    }

    pub fn road_cells(&self) -> Vec<(usize, usize)> {
        self.mask
            .indexed_iter()
            .filter(|(_, &v)| v != 0)
            .map(|(ix, _)| ix)
            .collect()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&v| v != 0).count()
    }
}

/// Result of a gridding pass; `skipped` counts in-range-checked records that
/// fell outside the grid or the study period.
#[derive(Debug, Clone)]
pub struct Gridded<T> {
    pub value: T,
    pub skipped: usize,
}

pub fn map_events_to_grid(events: &[EventRecord], spec: &GridSpec) -> Result<Gridded<AccidentTensor>> {
    spec.validate()?;
    let mut tensor = AccidentTensor::zeros(spec);
    let mut skipped = 0;
    for (i, ev) in events.iter().enumerate() {
        if !ev.lat.is_finite() || !ev.lon.is_finite() {
            return Err(HintError::InvalidInput(format!("event {i} has non-finite coordinates")));
        }
        let cell = spec.cell_of(ev.lat, ev.lon);
        let day = spec.day_index(ev.timestamp.date());
        match (cell, day) {
            (Some((r, c)), Some(d)) => tensor.counts[[r, c, d]] += 1,
            _ => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} accident records outside the grid or study period were skipped");
    }
    Ok(Gridded { value: tensor, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub lat1: f64,
    pub lon1: f64,
    pub lat2: f64,
    pub lon2: f64,
    pub speed_limit: f64,
    pub aadt: f64,
    /// 1 = interstate/primary, 2 = secondary, 3 = local.
    pub road_class: u8,
}

/// Road mask plus per-cell road attribute channels, indexed `[row, col, ch]`
/// in the order of [`ROAD_CHANNELS`].
#[derive(Debug, Clone)]
pub struct RoadRaster {
    pub mask: RoadMask,
    pub channels: Array3<f64>,
}

/// Cells visited by a segment given in grid-local kilometres, sampled at a
/// step no larger than a quarter cell. Out-of-grid samples are ignored.
pub fn segment_cells_xy(spec: &GridSpec, a: (f64, f64), b: (f64, f64)) -> Vec<(usize, usize)> {
    let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
    let step = spec.cell_size_km / 4.0;
    let n = (len / step).ceil().max(1.0) as usize;
    let mut cells = Vec::new();
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let x = a.0 + t * (b.0 - a.0);
        let y = a.1 + t * (b.1 - a.1);
        if let Some(cell) = spec.cell_of_xy(x, y) {
            if !cells.contains(&cell) {
                cells.push(cell);
            }
        }
    }
    cells
}

pub fn rasterize_roads(segments: &[RoadSegment], spec: &GridSpec) -> Result<RoadRaster> {
    spec.validate()?;
    let (rows, cols) = (spec.rows, spec.cols);
    let mut sums = Array3::<f64>::zeros((rows, cols, ROAD_CHANNELS.len()));
    let mut hits = Array2::<u32>::zeros((rows, cols));
    for (i, s) in segments.iter().enumerate() {
        if ![s.lat1, s.lon1, s.lat2, s.lon2].iter().all(|v| v.is_finite()) {
            return Err(HintError::InvalidInput(format!("road segment {i} has non-finite endpoints")));
        }
        if !(1..=3).contains(&s.road_class) {
            return Err(HintError::InvalidInput(format!(
                "road segment {i} has road_class {} (expected 1..3)",
                s.road_class
            )));
        }
        let a = spec.to_local(s.lat1, s.lon1);
        let b = spec.to_local(s.lat2, s.lon2);
        for (r, c) in segment_cells_xy(spec, a, b) {
            hits[[r, c]] += 1;
            sums[[r, c, 1]] += s.speed_limit;
            sums[[r, c, 2]] += s.aadt;
            sums[[r, c, 2 + s.road_class as usize]] += 1.0;
        }
    }
    let mut mask = Array2::<u8>::zeros((rows, cols));
    for ((r, c), &n) in hits.indexed_iter() {
        if n == 0 {
            continue;
        }
        mask[[r, c]] = 1;
        sums[[r, c, 0]] = 1.0;
        for ch in 1..ROAD_CHANNELS.len() {
            sums[[r, c, ch]] /= n as f64;
        }
    }
    Ok(RoadRaster { mask: RoadMask { mask }, channels: sums })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiRecord {
    pub lat: f64,
    pub lon: f64,
    /// 1-based category in `1..=13`.
    pub category: u8,
}

/// Per-category POI frequency, indexed `[row, col, category - 1]`.
pub fn map_poi(points: &[PoiRecord], spec: &GridSpec) -> Result<Gridded<Array3<f64>>> {
    spec.validate()?;
    let mut out = Array3::<f64>::zeros((spec.rows, spec.cols, POI_CATEGORIES));
    let mut skipped = 0;
    for (i, p) in points.iter().enumerate() {
        if p.category == 0 || p.category as usize > POI_CATEGORIES {
            return Err(HintError::InvalidInput(format!(
                "poi {i} has category {} (expected 1..{POI_CATEGORIES})",
                p.category
            )));
        }
        if !p.lat.is_finite() || !p.lon.is_finite() {
            return Err(HintError::InvalidInput(format!("poi {i} has non-finite coordinates")));
        }
        match spec.cell_of(p.lat, p.lon) {
            Some((r, c)) => out[[r, c, p.category as usize - 1]] += 1.0,
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} POI records outside the grid were skipped");
    }
    Ok(Gridded { value: out, skipped })
}
