//! Risk-based spatial partitioning (RSP) and its multi-level wrapper (M-RSP).
//!
//! RSP is a DBSCAN-style region growing on a raster of accident counts. A cell
//! is *high-risk* when its count exceeds `gamma` and reaches `lambda`. A cell
//! is *critical* when the number of high-risk cells in its `(2 eps + 1)^2`
//! block (itself included) exceeds `beta`; *border* when it is not critical
//! but has a critical cell in its block; an *outlier* otherwise.
//!
//! M-RSP sweeps `beta` from 0 to `(2 eps + 1)^2`, peeling off less-risky
//! regions (total count `<= eta`) as successive levels.

use std::collections::VecDeque;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{HintError, Result};
use crate::grid::RoadMask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RspParams {
    pub epsilon: usize,
    /// min_points: high-risk requires `count > gamma`.
    pub gamma: f64,
    /// min_risk: high-risk also requires `count >= lambda`.
    pub lambda: f64,
    /// min_neighbors: critical requires `high-risk neighbours > beta`.
    pub beta: usize,
}

impl RspParams {
    pub fn validate(&self) -> Result<()> {
        let block = (2 * self.epsilon + 1).pow(2);
        if self.epsilon < 1 {
            return Err(HintError::InvalidInput("epsilon must be >= 1".into()));
        }
        if !(self.gamma >= 0.0) || !(self.lambda >= 0.0) {
            return Err(HintError::InvalidInput("gamma and lambda must be >= 0".into()));
        }
        if self.beta > block {
            return Err(HintError::InvalidInput(format!("beta {} exceeds block size {block}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MrspParams {
    pub eta: f64,
    pub epsilon: usize,
    pub gamma: f64,
    pub lambda: f64,
}

impl MrspParams {
    pub fn iterations(&self) -> usize {
        (2 * self.epsilon + 1).pow(2)
    }

    pub fn rsp(&self, beta: usize) -> RspParams {
        RspParams { epsilon: self.epsilon, gamma: self.gamma, lambda: self.lambda, beta }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellClass {
    Critical,
    Border,
    Outlier,
}

/// Region labels: 0 = noise, `>= 1` = region id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionLabeling {
    pub labels: Array2<u32>,
}

impl PartitionLabeling {
    pub fn n_regions(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Cells of each region, index `id - 1`, in row-major order.
    pub fn regions(&self) -> Vec<Vec<(usize, usize)>> {
        let mut out = vec![Vec::new(); self.n_regions() as usize];
        for ((r, c), &id) in self.labels.indexed_iter() {
            if id > 0 {
                out[id as usize - 1].push((r, c));
            }
        }
        out
    }
}

/// Per-cell risk level; 0 = no road / no risk, higher = riskier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelMap {
    pub levels: Array2<u32>,
}

impl LevelMap {
    pub fn max_level(&self) -> u32 {
        self.levels.iter().copied().max().unwrap_or(0)
    }

    pub fn cells_at(&self, level: u32) -> Vec<(usize, usize)> {
        self.levels
            .indexed_iter()
            .filter(|(_, &v)| v == level)
            .map(|(ix, _)| ix)
            .collect()
    }

    pub fn level(&self, row: usize, col: usize) -> u32 {
        self.levels[[row, col]]
    }

    /// SHA-256 of the dimensions and row-major levels, hex encoded.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let (rows, cols) = self.levels.dim();
        h.update((rows as u64).to_le_bytes());
        h.update((cols as u64).to_le_bytes());
        for &v in self.levels.iter() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn block(rows: usize, cols: usize, r: usize, c: usize, eps: usize) -> impl Iterator<Item = (usize, usize)> {
    let r0 = r.saturating_sub(eps);
    let c0 = c.saturating_sub(eps);
    let r1 = (r + eps).min(rows - 1);
    let c1 = (c + eps).min(cols - 1);
    (r0..=r1).flat_map(move |rr| (c0..=c1).map(move |cc| (rr, cc)))
}

fn is_high_risk(count: f64, p: &RspParams) -> bool {
    count > p.gamma && count >= p.lambda
}

pub fn classify_cells(counts: &Array2<f64>, params: &RspParams) -> Array2<CellClass> {
    let (rows, cols) = counts.dim();
    let eps = params.epsilon;
    let high = counts.mapv(|v| is_high_risk(v, params));
    let critical = Array2::from_shape_fn((rows, cols), |(r, c)| {
        block(rows, cols, r, c, eps).filter(|&ix| high[ix]).count() > params.beta
    });
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        if critical[[r, c]] {
            CellClass::Critical
        } else if block(rows, cols, r, c, eps).any(|ix| critical[ix]) {
            CellClass::Border
        } else {
            CellClass::Outlier
        }
    })
}

/// Region growing over a row-major scan. Border cells reachable from two
/// regions keep the first region that reached them.
pub fn rsp(counts: &Array2<f64>, params: &RspParams) -> PartitionLabeling {
    let (rows, cols) = counts.dim();
    let classes = classify_cells(counts, params);
    let mut labels = Array2::<u32>::zeros((rows, cols));
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for r in 0..rows {
        for c in 0..cols {
            if classes[[r, c]] != CellClass::Critical || labels[[r, c]] != 0 {
                continue;
            }
            next += 1;
            labels[[r, c]] = next;
            queue.push_back((r, c));
            while let Some((cr, cc)) = queue.pop_front() {
                for ix in block(rows, cols, cr, cc, params.epsilon) {
                    if labels[ix] != 0 {
                        continue;
                    }
                    match classes[ix] {
                        CellClass::Critical => {
                            labels[ix] = next;
                            queue.push_back(ix);
                        }
                        CellClass::Border => labels[ix] = next,
                        CellClass::Outlier => {}
                    }
                }
            }
        }
    }
    PartitionLabeling { labels }
}

pub fn count_accidents(region: &[(usize, usize)], counts: &Array2<f64>) -> f64 {
    region.iter().map(|&ix| counts[ix]).sum()
}

/// Multi-level partitioning. `counts` must be aggregated over the training
/// period only.
///
/// For each `beta` in `0..=iter`: cells that RSP leaves as noise and that are
/// still unassigned get level `beta - 1`; every region whose total count is
/// `<= eta` (`eta = inf` on the last pass) assigns level `beta` to its
/// unassigned cells. Levels are shifted by one at the end and cells off the
/// road network are forced to 0.
pub fn m_rsp(counts: &Array2<f64>, mask: &RoadMask, params: &MrspParams) -> Result<LevelMap> {
    if counts.dim() != mask.mask.dim() {
        return Err(HintError::InvalidInput("counts and mask dimensions differ".into()));
    }
    if !(params.eta > 0.0) {
        return Err(HintError::InvalidInput("eta must be > 0".into()));
    }
    if counts.iter().any(|&v| !(v >= 0.0)) {
        return Err(HintError::InvalidInput("accident counts must be nonnegative".into()));
    }
    params.rsp(0).validate()?;
    let iter = params.iterations();
    let (rows, cols) = counts.dim();
    let mut result = Array2::<i64>::from_elem((rows, cols), -1);
    let mut assigned = Array2::<bool>::from_elem((rows, cols), false);
    for beta in 0..=iter {
        let part = rsp(counts, &params.rsp(beta));
        let eta = if beta == iter { f64::INFINITY } else { params.eta };
        for ((r, c), &label) in part.labels.indexed_iter() {
            if label == 0 && !assigned[[r, c]] {
                assigned[[r, c]] = true;
                result[[r, c]] = beta as i64 - 1;
            }
        }
        for region in part.regions() {
            if count_accidents(&region, counts) <= eta {
                for ix in region {
                    if !assigned[ix] {
                        assigned[ix] = true;
                        result[ix] = beta as i64;
                    }
                }
            }
        }
    }
    let levels = Array2::from_shape_fn((rows, cols), |(r, c)| {
        if mask.is_road(r, c) {
            (result[[r, c]] + 1) as u32
        } else {
            0
        }
    });
    Ok(LevelMap { levels })
}

/// Merges every `k` consecutive levels: 0 stays 0, `v >= 1` maps to `ceil(v / k)`.
pub fn aggregate_levels(levels: &LevelMap, k: u32) -> Result<LevelMap> {
    if k == 0 {
        return Err(HintError::InvalidInput("aggregation k must be >= 1".into()));
    }
    Ok(LevelMap { levels: levels.levels.mapv(|v| v.div_ceil(k)) })
}
