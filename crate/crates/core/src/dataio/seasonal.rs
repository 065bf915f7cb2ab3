use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{DataError, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Mean target per time-of-day slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeasonalProfile {
    pub slots_per_day: usize,
    pub means: Vec<f64>,
}

impl SeasonalProfile {
    pub fn slot(&self, timestamp: i64) -> usize {
        let width = SECONDS_PER_DAY / self.slots_per_day as i64;
        (timestamp.rem_euclid(SECONDS_PER_DAY) / width) as usize
    }

    pub fn apply(&self, values: &[f64], timestamps: &[i64]) -> Vec<f64> {
        values.iter().zip(timestamps).map(|(v, &t)| v - self.means[self.slot(t)]).collect()
    }

    /// Maps residuals back to raw units.
    pub fn invert(&self, residuals: &[f64], timestamps: &[i64]) -> Vec<f64> {
        residuals.iter().zip(timestamps).map(|(r, &t)| r + self.means[self.slot(t)]).collect()
    }
}

/// Fits per-slot means on `train` rows and subtracts them from the whole
/// series. Slots never seen in training fall back to the training mean.
pub fn deseasonalize(values: &[f64], timestamps: &[i64], slots_per_day: usize, train: Range<usize>) -> Result<(Vec<f64>, SeasonalProfile)> {
    if slots_per_day == 0 || SECONDS_PER_DAY % slots_per_day as i64 != 0 {
        return Err(DataError::Invalid(format!("slots per day must divide {}, got {}", SECONDS_PER_DAY, slots_per_day)));
    }
    if values.len() != timestamps.len() || train.end > values.len() || train.is_empty() {
        return Err(DataError::Invalid("deseasonalize needs a non-empty training range inside the series".into()));
    }
    let mut profile = SeasonalProfile { slots_per_day, means: vec![0.0; slots_per_day] };
    let mut counts = vec![0usize; slots_per_day];
    // running means stay exact on constant input
    let (mut global, mut n) = (0.0, 0usize);
    for i in train {
        let k = profile.slot(timestamps[i]);
        counts[k] += 1;
        profile.means[k] += (values[i] - profile.means[k]) / counts[k] as f64;
        n += 1;
        global += (values[i] - global) / n as f64;
    }
    for (m, c) in profile.means.iter_mut().zip(&counts) {
        if *c == 0 {
            *m = global;
        }
    }
    Ok((profile.apply(values, timestamps), profile))
}
