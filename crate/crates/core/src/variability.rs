//! Pairwise trip distances and the per-rider spatial and temporal
//! variability indices.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::{Period, PeriodTripSet, Trip};

/// Euclidean distance between the stacked (origin, destination) coordinate
/// vectors of two trips, in metres.
pub fn spatial_distance(a: &Trip, b: &Trip) -> f64 {
    let dx = a.origin.x - b.origin.x;
    let dy = a.origin.y - b.origin.y;
    let dx2 = a.destination.x - b.destination.x;
    let dy2 = a.destination.y - b.destination.y;
    (dx * dx + dy * dy + dx2 * dx2 + dy2 * dy2).sqrt()
}

/// Euclidean distance between the (start, end) time vectors of two trips, in
/// hours.
pub fn temporal_distance(a: &Trip, b: &Trip) -> f64 {
    let ds = a.start() - b.start();
    let de = a.end() - b.end();
    (ds * ds + de * de).sqrt()
}

/// Mean of `dist` over all unordered pairs, accumulated without
/// materialising the pair list.
fn mean_pairwise(trips: &[Trip], dist: impl Fn(&Trip, &Trip) -> f64) -> Result<f64> {
    let n = trips.len();
    if n < 2 {
        return Err(Error::UndefinedInput(format!("variability needs at least 2 trips, got {n}")));
    }
    let mut sum = 0.0;
    for (i, a) in trips.iter().enumerate() {
        for b in &trips[i + 1..] {
            sum += dist(a, b);
        }
    }
    Ok(sum / (n * (n - 1) / 2) as f64)
}

/// Spatial variability (metres): mean spatial distance over all pairs.
pub fn spatial_variability(trips: &[Trip]) -> Result<f64> {
    mean_pairwise(trips, spatial_distance)
}

/// Temporal variability (hours): mean temporal distance over all pairs.
pub fn temporal_variability(trips: &[Trip]) -> Result<f64> {
    mean_pairwise(trips, temporal_distance)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariabilityRecord {
    pub card_id: String,
    pub period: Period,
    pub n_trips: usize,
    /// Metres.
    pub sv: f64,
    /// Hours.
    pub tv: f64,
    /// Mean trip duration in hours.
    pub mean_duration: f64,
    /// Trips the rider made in this period over the observation window.
    pub trip_frequency: f64,
}

impl VariabilityRecord {
    pub fn from_set(set: &PeriodTripSet) -> Result<Self> {
        let n = set.trips.len();
        let sv = spatial_variability(&set.trips)?;
        let tv = temporal_variability(&set.trips)?;
        let mean_duration = set.trips.iter().map(Trip::duration_h).sum::<f64>() / n as f64;
        Ok(VariabilityRecord {
            card_id: set.card_id.clone(),
            period: set.period,
            n_trips: n,
            sv,
            tv,
            mean_duration,
            trip_frequency: n as f64,
        })
    }
}

/// One record per set, in input order.
pub fn compute_records(sets: &[PeriodTripSet]) -> Result<Vec<VariabilityRecord>> {
    sets.par_iter().map(VariabilityRecord::from_set).collect()
}

pub const RIDER_DUMP_HEADER: [&str; 7] = ["card_id", "period", "n_trips", "sv_m", "tv_h", "avedur_h", "tripfreq"];

pub fn write_rider_dump<W: Write>(records: &[VariabilityRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RIDER_DUMP_HEADER)?;
    for r in records {
        w.write_record([
            r.card_id.clone(),
            r.period.to_string(),
            r.n_trips.to_string(),
            r.sv.to_string(),
            r.tv.to_string(),
            r.mean_duration.to_string(),
            r.trip_frequency.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<rider dump>", e))?;
    Ok(())
}
