use chrono::NaiveDate;
use serde::Serialize;

use super::parse::{StopRegistry, Transaction};
use crate::error::{Error, Result};
use crate::geom::Point;

/// A journey built from one or more chained legs of a single card on one day.
#[derive(Debug, Clone, PartialEq)]
pub struct Trip {
    pub card_id: String,
    pub date: NaiveDate,
    pub origin_stop: String,
    pub destination_stop: String,
    pub origin: Point,
    pub destination: Point,
    /// Seconds since midnight of the first boarding.
    pub start_s: u32,
    /// Seconds since midnight of the last alighting.
    pub end_s: u32,
    pub leg_count: u32,
}

impl Trip {
    /// Start time in fractional hours since midnight.
    pub fn start(&self) -> f64 {
        f64::from(self.start_s) / 3600.0
    }

    pub fn end(&self) -> f64 {
        f64::from(self.end_s) / 3600.0
    }

    pub fn duration_s(&self) -> u32 {
        self.end_s - self.start_s
    }

    pub fn duration_h(&self) -> f64 {
        f64::from(self.duration_s()) / 3600.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChainOutcome {
    pub trips: Vec<Trip>,
    /// Legs boarding before the previous leg alighted.
    pub overlap_anomalies: usize,
}

/// Merges consecutive legs of one card-day whose boarding follows the
/// previous alighting by at most `transfer_threshold_s`.
///
/// `legs` must share card and date and be sorted by boarding time. A negative
/// gap never merges and is counted as an anomaly.
pub fn chain_trips(legs: &[Transaction], registry: &StopRegistry, transfer_threshold_s: u32) -> Result<ChainOutcome> {
    let mut out = ChainOutcome::default();
    let Some(first) = legs.first() else {
        return Ok(out);
    };
    let locate = |stop: &str| {
        registry
            .get(stop)
            .ok_or_else(|| Error::UndefinedInput(format!("stop {stop} missing from registry")))
    };

    let mut open = (first, first);
    let mut count = 1u32;
    let close = |from: &Transaction, to: &Transaction, count: u32| -> Result<Trip> {
        Ok(Trip {
            card_id: from.card_id.clone(),
            date: from.service_date,
            origin_stop: from.board_stop.clone(),
            destination_stop: to.alight_stop.clone(),
            origin: locate(&from.board_stop)?,
            destination: locate(&to.alight_stop)?,
            start_s: from.board_time,
            end_s: to.alight_time,
            leg_count: count,
        })
    };

    for leg in &legs[1..] {
        debug_assert!(leg.card_id == first.card_id && leg.service_date == first.service_date);
        let prev = open.1;
        let gap = i64::from(leg.board_time) - i64::from(prev.alight_time);
        if gap < 0 {
            out.overlap_anomalies += 1;
        }
        if (0..=i64::from(transfer_threshold_s)).contains(&gap) {
            open.1 = leg;
            count += 1;
        } else {
            out.trips.push(close(open.0, open.1, count)?);
            open = (leg, leg);
            count = 1;
        }
    }
    out.trips.push(close(open.0, open.1, count)?);
    Ok(out)
}

/// Inclusive bounds on chained trip duration, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DurationBounds {
    pub min_s: u32,
    pub max_s: u32,
}

impl Default for DurationBounds {
    fn default() -> Self {
        DurationBounds {
            min_s: 60,
            max_s: 3 * 3600,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FilterCounts {
    pub too_short: usize,
    pub too_long: usize,
}

impl FilterCounts {
    pub fn total(&self) -> usize {
        self.too_short + self.too_long
    }
}

/// Drops trips shorter than `bounds.min_s` or longer than `bounds.max_s`.
pub fn filter_trips(trips: Vec<Trip>, bounds: DurationBounds) -> (Vec<Trip>, FilterCounts) {
    let mut counts = FilterCounts::default();
    let kept = trips
        .into_iter()
        .filter(|t| {
            let d = t.duration_s();
            if d < bounds.min_s {
                counts.too_short += 1;
                false
            } else if d > bounds.max_s {
                counts.too_long += 1;
                false
            } else {
                true
            }
        })
        .collect();
    (kept, counts)
}
