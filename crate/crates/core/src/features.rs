//! Feature tensors `F_S`, `F_T`, `F_ST` and their per-channel z-scoring.

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{HintError, Result};

/// All model inputs other than the accident counts themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    /// `[rows, cols, n_s]`, static.
    pub spatial: Array3<f64>,
    /// `[days, n_t]`, shared by every cell.
    pub temporal: Array2<f64>,
    /// `[rows, cols, days, n_st]`.
    pub st: Array4<f64>,
    pub spatial_channels: Vec<Channel>,
    pub temporal_channels: Vec<Channel>,
    pub st_channels: Vec<Channel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    /// Binary channels are never standardized.
    pub binary: bool,
}

impl Channel {
    pub fn new(name: impl Into<String>, binary: bool) -> Self {
        Channel { name: name.into(), binary }
    }
}

impl FeatureSet {
    pub fn n_spatial(&self) -> usize {
        self.spatial.dim().2
    }

    pub fn n_temporal(&self) -> usize {
        self.temporal.dim().1
    }

    pub fn n_st(&self) -> usize {
        self.st.dim().3
    }

    pub fn days(&self) -> usize {
        self.temporal.dim().0
    }

    /// Checks shapes against each other and that every value is finite.
    pub fn validate(&self) -> Result<()> {
        let (rows, cols, n_s) = self.spatial.dim();
        let (days, n_t) = self.temporal.dim();
        let (r2, c2, d2, n_st) = self.st.dim();
        if (r2, c2, d2) != (rows, cols, days) {
            return Err(HintError::InvalidInput(format!(
                "ST features are {r2}x{c2}x{d2} but spatial/temporal imply {rows}x{cols}x{days}"
            )));
        }
        for (what, n, names) in [
            ("spatial", n_s, &self.spatial_channels),
            ("temporal", n_t, &self.temporal_channels),
            ("st", n_st, &self.st_channels),
        ] {
            if names.len() != n {
                return Err(HintError::InvalidInput(format!("{what}: {n} channels but {} names", names.len())));
            }
        }
        let finite = |v: &f64| v.is_finite();
        if !self.spatial.iter().all(finite) || !self.temporal.iter().all(finite) || !self.st.iter().all(finite) {
            return Err(HintError::NonFinite("feature tensors contain NaN or infinity".into()));
        }
        Ok(())
    }

    /// Fits z-score parameters on `train_days` and applies them in place.
    pub fn standardize(&mut self, train_days: &[usize]) -> Result<Standardization> {
        let s = Standardization::fit(self, train_days)?;
        s.apply(self)?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub sd: f64,
}

impl ChannelStats {
    const IDENTITY: ChannelStats = ChannelStats { mean: 0.0, sd: 1.0 };

    fn from_values(vals: &[f64]) -> ChannelStats {
        if vals.is_empty() {
            return Self::IDENTITY;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        ChannelStats { mean, sd: if sd > 1e-12 * mean.abs().max(1.0) { sd } else { 1.0 } }
    }

    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }
}

/// Per-channel z-score parameters fitted on training days only. Spatial
/// channels use every cell; temporal channels use the training days; ST
/// channels use every cell on the training days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub spatial: Vec<ChannelStats>,
    pub temporal: Vec<ChannelStats>,
    pub st: Vec<ChannelStats>,
}

impl Standardization {
    pub fn fit(f: &FeatureSet, train_days: &[usize]) -> Result<Self> {
        f.validate()?;
        if train_days.is_empty() {
            return Err(HintError::InsufficientData("standardization needs >= 1 training day".into()));
        }
        if let Some(&d) = train_days.iter().find(|&&d| d >= f.days()) {
            return Err(HintError::InvalidInput(format!("training day {d} outside {} days", f.days())));
        }
        let pick = |ch: &Channel, values: &mut dyn FnMut() -> ChannelStats| {
            if ch.binary {
                ChannelStats::IDENTITY
            } else {
                values()
            }
        };
        let spatial = f
            .spatial_channels
            .iter()
            .enumerate()
            .map(|(q, ch)| pick(ch, &mut || ChannelStats::from_values(&f.spatial.index_axis(Axis(2), q).iter().copied().collect::<Vec<_>>())))
            .collect();
        let temporal = f
            .temporal_channels
            .iter()
            .enumerate()
            .map(|(q, ch)| pick(ch, &mut || ChannelStats::from_values(&train_days.iter().map(|&d| f.temporal[[d, q]]).collect::<Vec<_>>())))
            .collect();
        let st = f
            .st_channels
            .iter()
            .enumerate()
            .map(|(q, ch)| {
                pick(ch, &mut || {
                    let chan = f.st.index_axis(Axis(3), q);
                    let vals: Vec<f64> = train_days.iter().flat_map(|&d| chan.index_axis(Axis(2), d).into_iter().copied()).collect();
                    ChannelStats::from_values(&vals)
                })
            })
            .collect();
        Ok(Standardization { spatial, temporal, st })
    }

    pub fn apply(&self, f: &mut FeatureSet) -> Result<()> {
        if self.spatial.len() != f.n_spatial() || self.temporal.len() != f.n_temporal() || self.st.len() != f.n_st() {
            return Err(HintError::InvalidInput("standardization channel counts do not match features".into()));
        }
        for (q, s) in self.spatial.iter().enumerate() {
            f.spatial.index_axis_mut(Axis(2), q).mapv_inplace(|v| s.apply(v));
        }
        for (q, s) in self.temporal.iter().enumerate() {
            f.temporal.index_axis_mut(Axis(1), q).mapv_inplace(|v| s.apply(v));
        }
        for (q, s) in self.st.iter().enumerate() {
            f.st.index_axis_mut(Axis(3), q).mapv_inplace(|v| s.apply(v));
        }
        Ok(())
    }
}
