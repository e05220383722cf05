//! Calendar (temporal) features shared by every cell on a given day.

use std::collections::BTreeSet;

use chrono::{Datelike, NaiveDate};

use crate::error::{HintError, Result};

pub const TEMPORAL_CHANNELS: [&str; 5] = ["day_of_week", "day_of_year", "month", "is_weekend", "is_holiday"];

/// Channels of the temporal vector that are 0/1 indicators.
pub const TEMPORAL_BINARY: [bool; 5] = [false, false, false, true, true];

const DEFAULT_HOLIDAYS: &str = include_str!("../data/us_federal_holidays_2016_2018.txt");

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HolidayList {
    dates: BTreeSet<NaiveDate>,
}

impl HolidayList {
    /// Parses one ISO date per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut dates = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let d = NaiveDate::parse_from_str(line, "%Y-%m-%d")
                .map_err(|e| HintError::InvalidInput(format!("holiday list line {}: {e}", i + 1)))?;
            dates.insert(d);
        }
        Ok(HolidayList { dates })
    }

    /// US federal holidays (observed) for 2016-2018.
    pub fn us_federal() -> Self {
        Self::parse(DEFAULT_HOLIDAYS).expect("bundled holiday list parses")
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.dates.contains(&date)
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }
}

/// `(day_of_week [Mon=0], day_of_year, month, is_weekend, is_holiday)`.
pub fn calendar_features(date: NaiveDate, holidays: &HolidayList) -> [f64; 5] {
    let dow = date.weekday().num_days_from_monday();
    [
        dow as f64,
        date.ordinal() as f64,
        date.month() as f64,
        if dow >= 5 { 1.0 } else { 0.0 },
        if holidays.contains(date) { 1.0 } else { 0.0 },
    ]
}
