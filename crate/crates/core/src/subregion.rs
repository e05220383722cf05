//! The `w x w` window around a cell and its accident-correlation graph.
//!
//! Window cells are flattened row-major: index `i * w + j` is the cell at
//! offset `(i - w/2, j - w/2)` from the centre. Positions outside the grid are
//! zero-filled.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};

use crate::error::{HintError, Result};
use crate::grid::{AccidentTensor, RoadMask};

/// Correlation adjacency between the `w^2` window cells.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    pub a: Array2<f64>,
    pub row_normalized: bool,
}

impl AdjacencyMatrix {
    pub fn identity(n: usize) -> Self {
        AdjacencyMatrix { a: Array2::eye(n), row_normalized: true }
    }

    /// Clamps negative correlations to 0 and divides each row by its sum.
    pub fn normalized(&self) -> AdjacencyMatrix {
        let mut a = self.a.mapv(|v| v.max(0.0));
        for mut row in a.rows_mut() {
            let s: f64 = row.sum();
            if s > 0.0 {
                row.mapv_inplace(|v| v / s);
            }
        }
        AdjacencyMatrix { a, row_normalized: true }
    }
}

/// Pearson correlation between every pair of series (rows of `series`).
/// Zero-variance series correlate 0 with others and 1 with themselves.
pub fn pearson_correlation(series: &Array2<f64>) -> Result<AdjacencyMatrix> {
    let (n, len) = series.dim();
    if len < 2 {
        return Err(HintError::InsufficientData(format!("correlation needs >= 2 days, got {len}")));
    }
    let centered: Vec<Vec<f64>> = series
        .rows()
        .into_iter()
        .map(|row| {
            let mean = row.sum() / len as f64;
            row.iter().map(|v| v - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = centered.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>()).collect();
    let mut a = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        a[[i, i]] = 1.0;
        for j in i + 1..n {
            if norms[i] <= 0.0 || norms[j] <= 0.0 {
                continue;
            }
            let cov: f64 = centered[i].iter().zip(&centered[j]).map(|(x, y)| x * y).sum();
            let r = (cov / (norms[i] * norms[j]).sqrt()).clamp(-1.0, 1.0);
            a[[i, j]] = r;
            a[[j, i]] = r;
        }
    }
    Ok(AdjacencyMatrix { a, row_normalized: false })
}

/// Row-normalized, clamped correlation adjacency from per-cell count series.
pub fn pearson_adjacency(series: &Array2<f64>) -> Result<AdjacencyMatrix> {
    Ok(pearson_correlation(series)?.normalized())
}

fn window_cells(rows: usize, cols: usize, center: (usize, usize), w: usize) -> impl Iterator<Item = Option<(usize, usize)>> {
    let half = (w / 2) as i64;
    let (r0, c0) = (center.0 as i64, center.1 as i64);
    (0..w as i64).flat_map(move |i| {
        (0..w as i64).map(move |j| {
            let (r, c) = (r0 + i - half, c0 + j - half);
            (r >= 0 && c >= 0 && r < rows as i64 && c < cols as i64).then_some((r as usize, c as usize))
        })
    })
}

fn check_odd(w: usize) -> Result<()> {
    if w % 2 == 0 {
        return Err(HintError::InvalidInput(format!("window size w = {w} must be odd")));
    }
    Ok(())
}

/// `[w^2, channels]` slice of a `[rows, cols, channels]` tensor.
pub fn extract_window(tensor: &Array3<f64>, center: (usize, usize), w: usize) -> Result<Array2<f64>> {
    check_odd(w)?;
    let (rows, cols, ch) = tensor.dim();
    let mut out = Array2::<f64>::zeros((w * w, ch));
    for (k, cell) in window_cells(rows, cols, center, w).enumerate() {
        if let Some((r, c)) = cell {
            for q in 0..ch {
                out[[k, q]] = tensor[[r, c, q]];
            }
        }
    }
    Ok(out)
}

/// Accident series `[w^2, days]` of the window cells over the given days;
/// padding cells are all-zero series.
pub fn window_series(counts: &AccidentTensor, center: (usize, usize), w: usize, days: &[usize]) -> Result<Array2<f64>> {
    check_odd(w)?;
    let mut out = Array2::<f64>::zeros((w * w, days.len()));
    for (k, cell) in window_cells(counts.rows(), counts.cols(), center, w).enumerate() {
        if let Some((r, c)) = cell {
            for (t, &d) in days.iter().enumerate() {
                out[[k, t]] = counts.get(r, c, d) as f64;
            }
        }
    }
    Ok(out)
}

/// Grid positions of the window cells (`None` for padding).
pub fn window_positions(rows: usize, cols: usize, center: (usize, usize), w: usize) -> Vec<Option<(usize, usize)>> {
    window_cells(rows, cols, center, w).collect()
}

const CACHE_MAGIC: &[u8; 4] = b"HNAD";
const CACHE_VERSION: u32 = 1;

/// One normalized adjacency per road-cell centre, computed from the
/// training-period counts.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyCache {
    pub w: usize,
    pub rows: usize,
    pub cols: usize,
    pub train_days: Vec<usize>,
    entries: BTreeMap<(usize, usize), Array2<f64>>,
}

impl AdjacencyCache {
    pub fn build(counts: &AccidentTensor, mask: &RoadMask, w: usize, train_days: &[usize]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for center in mask.road_cells() {
            let series = window_series(counts, center, w, train_days)?;
            entries.insert(center, pearson_adjacency(&series)?.a);
        }
        Ok(AdjacencyCache { w, rows: counts.rows(), cols: counts.cols(), train_days: train_days.to_vec(), entries })
    }

    pub fn get(&self, center: (usize, usize)) -> Option<&Array2<f64>> {
        self.entries.get(&center)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True when the cache was built for this window size, grid and period.
    pub fn matches(&self, w: usize, rows: usize, cols: usize, train_days: &[usize]) -> bool {
        self.w == w && self.rows == rows && self.cols == cols && self.train_days == train_days
    }

    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(CACHE_MAGIC)?;
        out.write_u32::<LittleEndian>(CACHE_VERSION)?;
        for v in [self.w, self.rows, self.cols, self.train_days.len()] {
            out.write_u32::<LittleEndian>(v as u32)?;
        }
        for &d in &self.train_days {
            out.write_u32::<LittleEndian>(d as u32)?;
        }
        out.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for (&(r, c), a) in &self.entries {
            out.write_u32::<LittleEndian>(r as u32)?;
            out.write_u32::<LittleEndian>(c as u32)?;
            for &v in a.iter() {
                out.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let bad = |msg: &str| HintError::InvalidInput(format!("adjacency cache: {msg}"));
        let io = |e: std::io::Error| bad(&e.to_string());
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(io)?;
        if &magic != CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = input.read_u32::<LittleEndian>().map_err(io)?;
        if version != CACHE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut next = || input.read_u32::<LittleEndian>().map(|v| v as usize);
        let (w, rows, cols, n_days) = (next().map_err(io)?, next().map_err(io)?, next().map_err(io)?, next().map_err(io)?);
        let train_days = (0..n_days).map(|_| next()).collect::<std::io::Result<Vec<_>>>().map_err(io)?;
        let n = next().map_err(io)?;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let r = input.read_u32::<LittleEndian>().map_err(io)? as usize;
            let c = input.read_u32::<LittleEndian>().map_err(io)? as usize;
            let mut a = Array2::<f64>::zeros((w * w, w * w));
            for v in a.iter_mut() {
                *v = input.read_f64::<LittleEndian>().map_err(io)?;
            }
            entries.insert((r, c), a);
        }
        Ok(AdjacencyCache { w, rows, cols, train_days, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| HintError::io(path, e))?);
        self.write_to(&mut f).and_then(|_| f.flush()).map_err(|e| HintError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| HintError::io(path, e))?);
        Self::read_from(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    #[test]
    fn identical_series_correlate_one() {
        let s = array![[1.0, 3.0, 2.0, 5.0], [1.0, 3.0, 2.0, 5.0]];
        let a = pearson_correlation(&s).unwrap();
        assert!((a.a[[0, 1]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reversed_series_correlate_minus_one_then_clamp() {
        let s = array![[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]];
        let raw = pearson_correlation(&s).unwrap();
        assert!((raw.a[[0, 1]] + 1.0).abs() < 1e-15);
        let n = raw.normalized();
        assert_eq!(n.a[[0, 1]], 0.0);
        assert_eq!(n.a[[0, 0]], 1.0);
    }

    #[test]
    fn constant_window_is_identity() {
        let s = Array2::from_elem((9, 20), 3.0);
        assert_eq!(pearson_adjacency(&s).unwrap().a, Array2::<f64>::eye(9));
    }

    #[test]
    fn short_series_is_an_error() {
        assert!(pearson_correlation(&Array2::zeros((4, 1))).is_err());
    }

    #[test]
    fn corner_window_is_padded() {
        let t = Array3::from_elem((6, 6, 2), 1.0);
        let win = extract_window(&t, (0, 0), 5).unwrap();
        let zeros = win.rows().into_iter().filter(|r| r.iter().all(|&v| v == 0.0)).count();
        assert_eq!(zeros, 16);
        assert!(extract_window(&t, (2, 2), 4).is_err());
    }

    #[test]
    fn interior_window_is_a_plain_slice() {
        let t = Array3::from_shape_fn((7, 7, 1), |(r, c, _)| (r * 7 + c) as f64);
        let win = extract_window(&t, (3, 3), 3).unwrap();
        let expected: Vec<f64> = [16, 17, 18, 23, 24, 25, 30, 31, 32].iter().map(|&v| v as f64).collect();
        assert_eq!(win.column(0).to_vec(), expected);
    }

    #[test]
    fn cache_round_trips_and_ignores_test_days() {
        use crate::grid::{AccidentTensor, RoadMask};
        let mut counts = AccidentTensor { counts: ndarray::Array3::<u32>::zeros((5, 5, 12)) };
        for d in 0..12 {
            counts.counts[[2, 2, d]] = (d % 3) as u32;
            counts.counts[[2, 3, d]] = (d % 4) as u32;
        }
        let mask = RoadMask::full(5, 5);
        let train: Vec<usize> = (0..8).collect();
        let cache = AdjacencyCache::build(&counts, &mask, 3, &train).unwrap();
        assert_eq!(cache.len(), 25);
        let mut buf = Vec::new();
        cache.write_to(&mut buf).unwrap();
        assert_eq!(AdjacencyCache::read_from(&mut buf.as_slice()).unwrap(), cache);
        for d in 8..12 {
            counts.counts[[2, 2, d]] = 50;
        }
        assert_eq!(AdjacencyCache::build(&counts, &mask, 3, &train).unwrap(), cache);
        assert!(cache.matches(3, 5, 5, &train) && !cache.matches(5, 5, 5, &train));
    }

    proptest! {
        #[test]
        fn window_sum_never_exceeds_tensor_sum(r in 0usize..6, c in 0usize..6, half in 0usize..4) {
            let t = Array3::from_shape_fn((6, 6, 1), |(a, b, _)| (a + 2 * b) as f64);
            let win = extract_window(&t, (r, c), 2 * half + 1).unwrap();
            prop_assert!(win.sum() <= t.sum());
        }

        #[test]
        fn normalized_rows_sum_to_one(data in proptest::collection::vec(0u8..5, 9 * 12)) {
            let s = Array2::from_shape_vec((9, 12), data.into_iter().map(f64::from).collect()).unwrap();
            let raw = pearson_correlation(&s).unwrap();
            for i in 0..9 {
                prop_assert_eq!(raw.a[[i, i]], 1.0);
                for j in 0..9 {
                    prop_assert_eq!(raw.a[[i, j]], raw.a[[j, i]]);
                    prop_assert!(raw.a[[i, j]].abs() <= 1.0);
                }
            }
            let n = raw.normalized();
            for row in n.a.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-10);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }
}
