use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::chain::Trip;
use super::parse::{format_clock, parse_clock};
use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Period {
    Morning,
    Evening,
}

impl Period {
    pub const ALL: [Period; 2] = [Period::Morning, Period::Evening];

    pub fn as_str(&self) -> &'static str {
        match self {
            Period::Morning => "morning",
            Period::Evening => "evening",
        }
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Period {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "morning" => Ok(Period::Morning),
            "evening" => Ok(Period::Evening),
            other => Err(Error::config(format!("unknown period `{other}`"))),
        }
    }
}

/// Half-open time-of-day window `[start, end)` in seconds since midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeriodWindow {
    pub start_s: u32,
    pub end_s: u32,
}

impl PeriodWindow {
    pub fn new(start_s: u32, end_s: u32) -> Result<Self, Error> {
        if start_s >= end_s {
            return Err(Error::config(format!(
                "window {}-{} is empty",
                format_clock(start_s),
                format_clock(end_s)
            )));
        }
        Ok(PeriodWindow { start_s, end_s })
    }

    pub fn contains(&self, t: u32) -> bool {
        (self.start_s..self.end_s).contains(&t)
    }

    fn overlaps(&self, other: &PeriodWindow) -> bool {
        self.start_s < other.end_s && other.start_s < self.end_s
    }
}

impl FromStr for PeriodWindow {
    type Err = Error;

    /// Accepts `HH:MM-HH:MM` or `HH:MM:SS-HH:MM:SS`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || Error::config(format!("bad period window `{s}`"));
        let (a, b) = s.split_once('-').ok_or_else(bad)?;
        let clock = |p: &str| {
            let p = p.trim();
            let full = if p.matches(':').count() == 1 { format!("{p}:00") } else { p.to_owned() };
            parse_clock(&full).ok_or_else(bad)
        };
        PeriodWindow::new(clock(a)?, clock(b)?)
    }
}

impl fmt::Display for PeriodWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hm = |s: u32| {
            let c = format_clock(s);
            if c.ends_with(":00") { c[..5].to_owned() } else { c }
        };
        write!(f, "{}-{}", hm(self.start_s), hm(self.end_s))
    }
}

impl Serialize for PeriodWindow {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PeriodWindow {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Morning and evening peak windows; never overlapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PeriodWindows {
    pub morning: PeriodWindow,
    pub evening: PeriodWindow,
}

impl Default for PeriodWindows {
    fn default() -> Self {
        PeriodWindows {
            morning: PeriodWindow { start_s: 7 * 3600, end_s: 9 * 3600 },
            evening: PeriodWindow { start_s: 17 * 3600, end_s: 19 * 3600 },
        }
    }
}

impl PeriodWindows {
    pub fn new(morning: PeriodWindow, evening: PeriodWindow) -> Result<Self, Error> {
        if morning.overlaps(&evening) {
            return Err(Error::config(format!("period windows {morning} and {evening} overlap")));
        }
        Ok(PeriodWindows { morning, evening })
    }

    pub fn window(&self, period: Period) -> PeriodWindow {
        match period {
            Period::Morning => self.morning,
            Period::Evening => self.evening,
        }
    }

    /// The period a trip belongs to, judged by its start only.
    pub fn classify(&self, start_s: u32) -> Option<Period> {
        Period::ALL.into_iter().find(|p| self.window(*p).contains(start_s))
    }
}

/// All trips of one rider starting inside one peak window.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodTripSet {
    pub card_id: String,
    pub period: Period,
    pub trips: Vec<Trip>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PeriodCounts {
    pub trips_outside_windows: usize,
    pub morning_riders_below_min: usize,
    pub evening_riders_below_min: usize,
    /// Trips belonging to riders dropped for having too few trips.
    pub trips_below_min: usize,
}

/// Splits one rider's trips into peak-period sets, keeping a set only when it
/// holds at least `min_trips` trips. Input order is preserved inside a set.
pub fn select_period(trips: &[Trip], windows: &PeriodWindows, min_trips: usize) -> (Vec<PeriodTripSet>, PeriodCounts) {
    let mut counts = PeriodCounts::default();
    let mut by_period: [Vec<Trip>; 2] = [Vec::new(), Vec::new()];
    for t in trips {
        match windows.classify(t.start_s) {
            Some(p) => by_period[p as usize].push(t.clone()),
            None => counts.trips_outside_windows += 1,
        }
    }
    let mut sets = Vec::new();
    for (period, trips) in Period::ALL.into_iter().zip(by_period) {
        if trips.is_empty() {
            continue;
        }
        if trips.len() < min_trips {
            match period {
                Period::Morning => counts.morning_riders_below_min += 1,
                Period::Evening => counts.evening_riders_below_min += 1,
            }
            counts.trips_below_min += trips.len();
            continue;
        }
        sets.push(PeriodTripSet {
            card_id: trips[0].card_id.clone(),
            period,
            trips,
        });
    }
    (sets, counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Point;
    use chrono::NaiveDate;

    fn trip(day: u32, start_s: u32) -> Trip {
        Trip {
            card_id: "c".into(),
            date: NaiveDate::from_ymd_opt(2016, 6, day).unwrap(),
            origin_stop: "a".into(),
            destination_stop: "b".into(),
            origin: Point::default(),
            destination: Point::default(),
            start_s,
            end_s: start_s + 1800,
            leg_count: 1,
        }
    }

    #[test]
    fn window_parse_and_display() {
        let w: PeriodWindow = "07:00-09:00".parse().unwrap();
        assert_eq!(w, PeriodWindow { start_s: 25200, end_s: 32400 });
        assert_eq!(w.to_string(), "07:00-09:00");
        assert!("09:00-07:00".parse::<PeriodWindow>().is_err());
    }

    #[test]
    fn membership_is_half_open_on_start() {
        let w = PeriodWindows::default();
        assert_eq!(w.classify(7 * 3600 + 15 * 60), Some(Period::Morning));
        assert_eq!(w.classify(7 * 3600), Some(Period::Morning));
        assert_eq!(w.classify(9 * 3600), None);
        assert_eq!(w.classify(9 * 3600 + 1800), None);
        assert_eq!(w.classify(18 * 3600), Some(Period::Evening));
    }

    #[test]
    fn overlapping_windows_rejected() {
        let a: PeriodWindow = "07:00-09:00".parse().unwrap();
        let b: PeriodWindow = "08:00-10:00".parse().unwrap();
        assert!(PeriodWindows::new(a, b).is_err());
    }

    #[test]
    fn three_morning_trips_yield_no_set() {
        let trips: Vec<Trip> = (1..=3).map(|d| trip(d, 7 * 3600 + 900)).collect();
        let (sets, counts) = select_period(&trips, &PeriodWindows::default(), 4);
        assert!(sets.is_empty());
        assert_eq!(counts.morning_riders_below_min, 1);
    }

    #[test]
    fn four_morning_trips_yield_a_set_and_off_peak_is_dropped() {
        let mut trips: Vec<Trip> = (1..=4).map(|d| trip(d, 7 * 3600 + 900)).collect();
        trips.push(trip(5, 9 * 3600 + 1800));
        let (sets, counts) = select_period(&trips, &PeriodWindows::default(), 4);
        assert_eq!(sets.len(), 1);
        assert_eq!(sets[0].period, Period::Morning);
        assert_eq!(sets[0].trips.len(), 4);
        assert_eq!(counts.trips_outside_windows, 1);
    }
}
