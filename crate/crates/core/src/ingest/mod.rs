//! Raw tap records to per-rider peak-period trip sets.

mod chain;
mod parse;
mod period;

pub use chain::{chain_trips, filter_trips, ChainOutcome, DurationBounds, FilterCounts, Trip};
pub use parse::{
    format_clock, parse_clock, parse_transaction_bytes, parse_transactions, ParsedTransactions, SkipCounts,
    StopCoordinates, StopRegistry, Transaction, TRANSACTION_COLUMNS, write_transactions,
};
pub use period::{select_period, Period, PeriodCounts, PeriodTripSet, PeriodWindow, PeriodWindows};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IngestConfig {
    pub transfer_threshold_s: u32,
    pub durations: DurationBounds,
    pub windows: PeriodWindows,
    pub min_trips: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            transfer_threshold_s: 30 * 60,
            durations: DurationBounds::default(),
            windows: PeriodWindows::default(),
            min_trips: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ReconstructCounts {
    pub legs: usize,
    pub cards: usize,
    pub card_days: usize,
    pub chained_trips: usize,
    pub overlap_anomalies: usize,
    pub filtered: FilterCounts,
    pub retained_trips: usize,
    pub period: PeriodCounts,
    pub period_trips: usize,
}

impl ReconstructCounts {
    fn merge(mut self, o: ReconstructCounts) -> Self {
        self.legs += o.legs;
        self.cards += o.cards;
        self.card_days += o.card_days;
        self.chained_trips += o.chained_trips;
        self.overlap_anomalies += o.overlap_anomalies;
        self.filtered.too_short += o.filtered.too_short;
        self.filtered.too_long += o.filtered.too_long;
        self.retained_trips += o.retained_trips;
        self.period.trips_outside_windows += o.period.trips_outside_windows;
        self.period.morning_riders_below_min += o.period.morning_riders_below_min;
        self.period.evening_riders_below_min += o.period.evening_riders_below_min;
        self.period.trips_below_min += o.period.trips_below_min;
        self.period_trips += o.period_trips;
        self
    }
}

#[derive(Debug, Clone, Default)]
pub struct Reconstruction {
    /// Ordered by card id, then period.
    pub sets: Vec<PeriodTripSet>,
    pub counts: ReconstructCounts,
}

/// Chains, filters and period-selects every card in parallel.
pub fn reconstruct(mut transactions: Vec<Transaction>, registry: &StopRegistry, config: &IngestConfig) -> Result<Reconstruction> {
    transactions.par_sort_by(|a, b| {
        (&a.card_id, a.service_date, a.board_time, a.alight_time).cmp(&(
            &b.card_id,
            b.service_date,
            b.board_time,
            b.alight_time,
        ))
    });
    let cards: Vec<&[Transaction]> = transactions.chunk_by(|a, b| a.card_id == b.card_id).collect();

    let per_card: Vec<(Vec<PeriodTripSet>, ReconstructCounts)> = cards
        .par_iter()
        .map(|legs| reconstruct_card(legs, registry, config))
        .collect::<Result<_>>()?;

    let mut out = Reconstruction::default();
    for (sets, counts) in per_card {
        out.sets.extend(sets);
        out.counts = out.counts.merge(counts);
    }
    Ok(out)
}

fn reconstruct_card(
    legs: &[Transaction],
    registry: &StopRegistry,
    config: &IngestConfig,
) -> Result<(Vec<PeriodTripSet>, ReconstructCounts)> {
    let mut counts = ReconstructCounts {
        legs: legs.len(),
        cards: 1,
        ..Default::default()
    };
    let mut trips = Vec::new();
    for day in legs.chunk_by(|a, b| a.service_date == b.service_date) {
        counts.card_days += 1;
        let chained = chain_trips(day, registry, config.transfer_threshold_s)?;
        counts.overlap_anomalies += chained.overlap_anomalies;
        trips.extend(chained.trips);
    }
    counts.chained_trips = trips.len();
    let (trips, filtered) = filter_trips(trips, config.durations);
    counts.filtered = filtered;
    counts.retained_trips = trips.len();
    let (sets, period) = select_period(&trips, &config.windows, config.min_trips);
    counts.period = period;
    counts.period_trips = sets.iter().map(|s| s.trips.len()).sum();
    Ok((sets, counts))
}
