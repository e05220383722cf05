//! Per-(cell, day) training instances and the dataset they are cut from.
//!
//! A sample for target day `t` sees the seven days `t-7 .. t-1`.

use ndarray::{Array2, Array3};

use crate::error::{HintError, Result};
use crate::eval::{Split, SplitPart};
use crate::features::{FeatureSet, Standardization};
use crate::grid::{AccidentTensor, RoadMask};
use crate::partition::LevelMap;
use crate::subregion::{window_positions, AdjacencyCache};

/// Days of history fed to the sequence model.
pub const HISTORY_DAYS: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct SubregionSample {
    pub center: (usize, usize),
    pub day: usize,
    /// `[7, w^2, n_st]`, oldest day first.
    pub st: Array3<f64>,
    /// `[7, n_t]`.
    pub temporal: Array2<f64>,
    /// `[w^2, n_s]`.
    pub spatial: Array2<f64>,
    /// `[w^2, w^2]`, row-normalized.
    pub adjacency: Array2<f64>,
    pub target: f64,
}

impl SubregionSample {
    pub fn window(&self) -> usize {
        (self.spatial.dim().0 as f64).sqrt().round() as usize
    }
}

/// Standardized features, counts and cached adjacencies: everything needed
/// to cut a sample for any road cell and day.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub counts: AccidentTensor,
    pub features: FeatureSet,
    pub standardization: Standardization,
    pub mask: RoadMask,
    pub adjacency: AdjacencyCache,
    pub w: usize,
}

impl Dataset {
    /// Standardizes `features` and builds adjacencies, both from
    /// `training_days` only.
    pub fn new(
        counts: AccidentTensor,
        mut features: FeatureSet,
        mask: RoadMask,
        w: usize,
        training_days: &[usize],
    ) -> Result<Self> {
        if w % 2 == 0 {
            return Err(HintError::InvalidInput(format!("window size w = {w} must be odd")));
        }
        let (rows, cols, days) = counts.counts.dim();
        if features.st.dim().0 != rows || features.st.dim().1 != cols || features.days() != days {
            return Err(HintError::InvalidInput("features and counts cover different grids".into()));
        }
        if mask.mask.dim() != (rows, cols) {
            return Err(HintError::InvalidInput("road mask and counts cover different grids".into()));
        }
        let standardization = features.standardize(training_days)?;
        let adjacency = AdjacencyCache::build(&counts, &mask, w, training_days)?;
        Ok(Dataset { counts, features, standardization, mask, adjacency, w })
    }

    /// Like [`Dataset::new`] but reuses a previously built adjacency cache
    /// when it matches.
    pub fn with_adjacency(
        counts: AccidentTensor,
        mut features: FeatureSet,
        mask: RoadMask,
        w: usize,
        training_days: &[usize],
        adjacency: AdjacencyCache,
    ) -> Result<Self> {
        if !adjacency.matches(w, counts.rows(), counts.cols(), training_days) {
            return Err(HintError::Stale("adjacency cache built for another window, grid or period".into()));
        }
        let standardization = features.standardize(training_days)?;
        Ok(Dataset { counts, features, standardization, mask, adjacency, w })
    }

    pub fn rows(&self) -> usize {
        self.counts.rows()
    }

    pub fn cols(&self) -> usize {
        self.counts.cols()
    }

    pub fn days(&self) -> usize {
        self.counts.days()
    }

    /// Sample keys for every road cell at `level` and every usable target day.
    pub fn keys(&self, levels: &LevelMap, level: u32, days: &[usize]) -> Vec<SampleKey> {
        let cells: Vec<(usize, usize)> =
            levels.cells_at(level).into_iter().filter(|&(r, c)| self.mask.is_road(r, c)).collect();
        days.iter()
            .filter(|&&d| d >= HISTORY_DAYS && d < self.days())
            .flat_map(|&day| cells.iter().map(move |&center| SampleKey { center, day }))
            .collect()
    }

    pub fn sample(&self, key: SampleKey) -> Result<SubregionSample> {
        let SampleKey { center, day } = key;
        if day < HISTORY_DAYS || day >= self.days() {
            return Err(HintError::InvalidInput(format!("target day {day} needs 7 prior days inside the period")));
        }
        let adjacency = self
            .adjacency
            .get(center)
            .ok_or_else(|| HintError::InvalidInput(format!("cell {center:?} is not a road cell")))?
            .clone();
        let w2 = self.w * self.w;
        let f = &self.features;
        let (n_s, n_t, n_st) = (f.n_spatial(), f.n_temporal(), f.n_st());
        let cells = window_positions(self.rows(), self.cols(), center, self.w);
        let mut st = Array3::<f64>::zeros((HISTORY_DAYS, w2, n_st));
        let mut spatial = Array2::<f64>::zeros((w2, n_s));
        for (k, cell) in cells.iter().enumerate() {
            let Some((r, c)) = *cell else { continue };
            for q in 0..n_s {
                spatial[[k, q]] = f.spatial[[r, c, q]];
            }
            for s in 0..HISTORY_DAYS {
                let d = day - HISTORY_DAYS + s;
                for q in 0..n_st {
                    st[[s, k, q]] = f.st[[r, c, d, q]];
                }
            }
        }
        let temporal = f.temporal.slice(ndarray::s![day - HISTORY_DAYS..day, ..]).to_owned();
        debug_assert_eq!(temporal.dim(), (HISTORY_DAYS, n_t));
        Ok(SubregionSample {
            center,
            day,
            st,
            temporal,
            spatial,
            adjacency,
            target: self.counts.get(center.0, center.1, day) as f64,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleKey {
    pub center: (usize, usize),
    pub day: usize,
}

/// Random access to training samples, materialized or cut on demand.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> Result<SubregionSample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [SubregionSample] {
    fn len(&self) -> usize {
        <[SubregionSample]>::len(self)
    }

    fn get(&self, i: usize) -> Result<SubregionSample> {
        Ok(self[i].clone())
    }
}

impl SampleSource for Vec<SubregionSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, i: usize) -> Result<SubregionSample> {
        Ok(self[i].clone())
    }
}

/// Samples cut lazily from a [`Dataset`].
pub struct LazySamples<'a> {
    pub dataset: &'a Dataset,
    pub keys: Vec<SampleKey>,
}

impl SampleSource for LazySamples<'_> {
    fn len(&self) -> usize {
        self.keys.len()
    }

    fn get(&self, i: usize) -> Result<SubregionSample> {
        self.dataset.sample(self.keys[i])
    }
}

/// All samples of one level over one part of the split. Features are
/// standardized with statistics of the split's training period.
#[allow(clippy::too_many_arguments)]
pub fn make_samples(
    counts: &AccidentTensor,
    features: &FeatureSet,
    mask: &RoadMask,
    levels: &LevelMap,
    level: u32,
    w: usize,
    split: &Split,
    part: SplitPart,
) -> Result<Vec<SubregionSample>> {
    let ds = Dataset::new(counts.clone(), features.clone(), mask.clone(), w, &split.training_period())?;
    ds.keys(levels, level, split.days(part)).into_iter().map(|k| ds.sample(k)).collect()
}
