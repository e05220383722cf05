//! WebAssembly bindings for the demo page: a synthetic city with its risk
//! level map, a kriged station field and the accident correlation around a
//! chosen cell.

use ndarray::Array2;
use wasm_bindgen::prelude::*;

use hintnet::grid::{map_events_to_grid, rasterize_roads, AccidentTensor, GridSpec, RoadMask};
use hintnet::kriging::{ordinary_krige, StationObservation, VariogramModel};
use hintnet::partition::{aggregate_levels, m_rsp, MrspParams};
use hintnet::subregion::{pearson_correlation, window_series};
use hintnet::synth::{generate, SynthSpec};

fn js(e: hintnet::HintError) -> JsError {
    JsError::new(&e.to_string())
}

/// A generated city kept in memory between calls from the page.
#[wasm_bindgen]
pub struct Demo {
    spec: GridSpec,
    mask: RoadMask,
    counts: AccidentTensor,
    totals: Array2<f64>,
}

impl Demo {
    pub fn build(size: usize, days: usize, seed: u64) -> hintnet::Result<Demo> {
        let synth = SynthSpec { rows: size, cols: size, num_days: days, seed, ..SynthSpec::default() };
        let world = generate(&synth)?;
        let spec = world.spec.clone();
        let mask = rasterize_roads(&world.roads, &spec)?.mask;
        let counts = map_events_to_grid(&world.events, &spec)?.value;
        let totals = counts.aggregate(0..counts.days());
        Ok(Demo { spec, mask, counts, totals })
    }

    pub fn level_map(&self, gamma: f64, eta: f64, epsilon: usize, k: u32) -> hintnet::Result<Vec<u32>> {
        let params = MrspParams { eta, epsilon, gamma, lambda: 0.0 };
        let levels = aggregate_levels(&m_rsp(&self.totals, &self.mask, &params)?, k)?;
        Ok(levels.levels.iter().copied().collect())
    }

    /// Correlation of the centre cell's daily series with every cell of the
    /// `w x w` window, row-major.
    pub fn window_correlation(&self, row: usize, col: usize, w: usize) -> hintnet::Result<Vec<f64>> {
        if row >= self.spec.rows || col >= self.spec.cols {
            return Err(hintnet::HintError::InvalidInput(format!("cell ({row}, {col}) is outside the grid")));
        }
        let days: Vec<usize> = (0..self.counts.days()).collect();
        let series = window_series(&self.counts, (row, col), w, &days)?;
        let corr = pearson_correlation(&series)?;
        Ok(corr.a.row(w * w / 2).to_vec())
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, days: usize, seed: u64) -> Result<Demo, JsError> {
        Demo::build(size, days, seed).map_err(js)
    }

    pub fn size(&self) -> usize {
        self.spec.rows
    }

    pub fn accidents(&self) -> f64 {
        self.counts.total() as f64
    }

    /// Accident totals per cell, row-major.
    pub fn totals(&self) -> Vec<f64> {
        self.totals.iter().copied().collect()
    }

    /// 1 for road cells, row-major.
    pub fn road_mask(&self) -> Vec<u8> {
        self.mask.mask.iter().copied().collect()
    }

    pub fn levels(&self, gamma: f64, eta: f64, epsilon: usize, k: u32) -> Result<Vec<u32>, JsError> {
        self.level_map(gamma, eta, epsilon, k).map_err(js)
    }

    pub fn correlation(&self, row: usize, col: usize, w: usize) -> Result<Vec<f64>, JsError> {
        self.window_correlation(row, col, w).map_err(js)
    }
}

/// Ordinary kriging of point readings (cell coordinates) onto the centres of
/// a `size x size` grid of unit cells, row-major.
pub fn krige_cells(
    xs: &[f64],
    ys: &[f64],
    values: &[f64],
    size: usize,
    model: VariogramModel,
) -> hintnet::Result<Vec<f64>> {
    if xs.len() != ys.len() || xs.len() != values.len() || xs.is_empty() {
        return Err(hintnet::HintError::InvalidInput("need matching, nonempty station arrays".into()));
    }
    let obs: Vec<StationObservation> = xs
        .iter()
        .zip(ys)
        .zip(values)
        .map(|((&x, &y), &value)| StationObservation { x, y, value, day: 0 })
        .collect();
    let targets: Vec<(f64, f64)> =
        (0..size * size).map(|i| ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5)).collect();
    ordinary_krige(&obs, model, &targets)
}

#[wasm_bindgen]
pub fn krige_field(
    xs: &[f64],
    ys: &[f64],
    values: &[f64],
    size: usize,
    nugget: f64,
    sill: f64,
    range: f64,
) -> Result<Vec<f64>, JsError> {
    krige_cells(xs, ys, values, size, VariogramModel { nugget, sill, range_km: range }).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_map_covers_grid_and_is_zero_off_road() {
        let demo = Demo::build(16, 60, 3).unwrap();
        let levels = demo.level_map(10.0, 200.0, 1, 1).unwrap();
        assert_eq!(levels.len(), 256);
        for (l, m) in levels.iter().zip(demo.road_mask()) {
            if m == 0 {
                assert_eq!(*l, 0);
            }
        }
        assert!(levels.iter().any(|&l| l > 0));
    }

    #[test]
    fn correlation_centre_is_one() {
        let demo = Demo::build(16, 60, 3).unwrap();
        let c = demo.window_correlation(8, 8, 5).unwrap();
        assert_eq!(c.len(), 25);
        assert!((c[12] - 1.0).abs() < 1e-12);
        assert!(demo.window_correlation(16, 0, 5).is_err());
    }

    #[test]
    fn kriging_reproduces_stations_without_nugget() {
        let model = VariogramModel { nugget: 0.0, sill: 1.0, range_km: 3.0 };
        let f = krige_cells(&[0.5, 3.5, 1.5], &[0.5, 1.5, 3.5], &[1.0, 5.0, -2.0], 4, model).unwrap();
        assert!((f[0] - 1.0).abs() < 1e-9);
        assert!((f[4 + 3] - 5.0).abs() < 1e-9);
        assert!((f[3 * 4 + 1] + 2.0).abs() < 1e-9);
    }
}
