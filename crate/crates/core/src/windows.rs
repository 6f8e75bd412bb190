//! Stride-1 sliding windows over the slot axis.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Input `[t - L, t)` and target `[t, t + T)` for one origin `t`.
///
/// Windows are index ranges into a series matrix; callers slice the rows
/// they need (all nodes for inputs, prediction-layer nodes for targets).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowedSample {
    /// First target slot.
    pub t_origin: usize,
    pub lookback: usize,
    pub horizon: usize,
}

impl WindowedSample {
    pub fn input_range(&self) -> std::ops::Range<usize> {
        self.t_origin - self.lookback..self.t_origin
    }

    pub fn target_range(&self) -> std::ops::Range<usize> {
        self.t_origin..self.t_origin + self.horizon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Slot boundaries: train is `[0, train_end)`, validation
/// `[train_end, val_end)`, test `[val_end, slots)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPoints {
    pub train_end: usize,
    pub val_end: usize,
}

impl SplitPoints {
    /// Split at whole-day boundaries by fractions of the day count.
    pub fn by_days(slots: usize, slots_per_day: usize, train_frac: f64, val_frac: f64) -> Result<Self> {
        let days = slots / slots_per_day.max(1);
        // floor with a little slack so 30 × 0.7 still gives 21
        let train_days = (days as f64 * train_frac + 1e-9).floor() as usize;
        let val_days = (days as f64 * val_frac + 1e-9).floor() as usize;
        if train_days == 0 || val_days == 0 || train_days + val_days >= days {
            return Err(Error::config(format!(
                "{days} days cannot be split {train_frac}/{val_frac}/rest with every part non-empty"
            )));
        }
        Ok(SplitPoints {
            train_end: train_days * slots_per_day,
            val_end: (train_days + val_days) * slots_per_day,
        })
    }

    /// Split owning a slot.
    pub fn split_of(&self, slot: usize) -> Split {
        if slot < self.train_end {
            Split::Train
        } else if slot < self.val_end {
            Split::Validation
        } else {
            Split::Test
        }
    }
}

/// All stride-1 windows over `slots` time steps, origins ascending.
pub fn make_windows(slots: usize, lookback: usize, horizon: usize) -> Result<Vec<WindowedSample>> {
    if lookback == 0 || horizon == 0 {
        return Err(Error::config("lookback and horizon must be at least 1"));
    }
    if slots < lookback + horizon {
        warn!("{slots} slots cannot hold a window of {lookback}+{horizon}; no samples");
        return Ok(Vec::new());
    }
    Ok((lookback..=slots - horizon)
        .map(|t_origin| WindowedSample {
            t_origin,
            lookback,
            horizon,
        })
        .collect())
}

/// Windows belonging to `split`. A window belongs to the split that owns
/// its last target slot, so a target straddling a boundary goes to the
/// later split and no earlier split ever sees a later split's targets.
pub fn windows_for_split(
    slots: usize,
    lookback: usize,
    horizon: usize,
    points: SplitPoints,
    split: Split,
) -> Result<Vec<WindowedSample>> {
    if points.train_end > points.val_end || points.val_end > slots {
        return Err(Error::config(format!(
            "split boundaries {points:?} outside the {slots}-slot series"
        )));
    }
    Ok(make_windows(slots, lookback, horizon)?
        .into_iter()
        .filter(|w| points.split_of(w.target_range().end - 1) == split)
        .collect())
}
