//! Rider anchors onto a regular grid, and per-cell means of the variability
//! indices.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Point;
use crate::ingest::{Period, PeriodTripSet, Trip};
use crate::variability::VariabilityRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Lower-left corner in metres.
    pub origin: Point,
    pub cell_size: f64,
    pub n_cols: u32,
    pub n_rows: u32,
}

impl GridSpec {
    pub fn new(origin: Point, cell_size: f64, n_cols: u32, n_rows: u32) -> Result<Self> {
        let spec = GridSpec {
            origin,
            cell_size,
            n_cols,
            n_rows,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::config(format!("cell size must be positive, got {}", self.cell_size)));
        }
        if self.n_cols == 0 || self.n_rows == 0 || !self.origin.is_finite() {
            return Err(Error::config("grid must have at least one cell and a finite origin"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.cell_size * f64::from(self.n_cols)
    }

    pub fn height(&self) -> f64 {
        self.cell_size * f64::from(self.n_rows)
    }

    pub fn n_cells(&self) -> usize {
        self.n_cols as usize * self.n_rows as usize
    }

    pub fn centroid(&self, cell: CellId) -> Point {
        Point::new(
            self.origin.x + (f64::from(cell.col) + 0.5) * self.cell_size,
            self.origin.y + (f64::from(cell.row) + 0.5) * self.cell_size,
        )
    }

    pub fn cells(&self) -> impl Iterator<Item = CellId> + '_ {
        (0..self.n_rows).flat_map(move |row| (0..self.n_cols).map(move |col| CellId { col, row }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellId {
    pub col: u32,
    pub row: u32,
}

impl CellId {
    pub const fn new(col: u32, row: u32) -> Self {
        CellId { col, row }
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.col, self.row)
    }
}

/// Cells are half-open `[low, high)`, except that the top and right edges of
/// the grid fall into the last row and column. Points outside the extent get
/// `None`.
pub fn assign_grid(p: Point, grid: &GridSpec) -> Option<CellId> {
    let axis = |v: f64, lo: f64, n: u32| -> Option<u32> {
        let rel = (v - lo) / grid.cell_size;
        if rel.is_nan() || rel < 0.0 {
            return None;
        }
        let idx = rel.floor();
        if idx < f64::from(n) {
            Some(idx as u32)
        } else if v <= lo + grid.cell_size * f64::from(n) {
            Some(n - 1)
        } else {
            None
        }
    };
    Some(CellId {
        col: axis(p.x, grid.origin.x, grid.n_cols)?,
        row: axis(p.y, grid.origin.y, grid.n_rows)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Origin,
    Destination,
}

impl Role {
    pub const ALL: [Role; 2] = [Role::Origin, Role::Destination];

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Origin => "origin",
            Role::Destination => "destination",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "origin" => Ok(Role::Origin),
            "destination" => Ok(Role::Destination),
            other => Err(Error::config(format!("unknown role `{other}`"))),
        }
    }
}

/// The rider's most used boarding (origin) or alighting (destination) stop.
///
/// Stops are counted by id. When several stops share the top count, the
/// centroid of their coordinates is returned. `None` for an empty slice.
pub fn major_anchor(trips: &[Trip], role: Role) -> Option<Point> {
    let mut counts: HashMap<&str, (usize, Point)> = HashMap::new();
    for t in trips {
        let (stop, at) = match role {
            Role::Origin => (t.origin_stop.as_str(), t.origin),
            Role::Destination => (t.destination_stop.as_str(), t.destination),
        };
        counts.entry(stop).or_insert((0, at)).0 += 1;
    }
    let top = counts.values().map(|c| c.0).max()?;
    let mut tied: Vec<(&str, Point)> = counts
        .into_iter()
        .filter(|(_, (c, _))| *c == top)
        .map(|(id, (_, at))| (id, at))
        .collect();
    tied.sort_unstable_by(|a, b| a.0.cmp(b.0));
    let k = tied.len() as f64;
    let (sx, sy) = tied.iter().fold((0.0, 0.0), |(sx, sy), (_, p)| (sx + p.x, sy + p.y));
    Some(Point::new(sx / k, sy / k))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchoredRecord {
    pub cell: CellId,
    pub role: Role,
    pub record: VariabilityRecord,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AnchorCounts {
    pub origin_out_of_extent: usize,
    pub destination_out_of_extent: usize,
}

/// Anchors every rider-period on both roles and assigns the anchors to cells.
///
/// `sets` and `records` must be aligned.
pub fn anchor_records(
    sets: &[PeriodTripSet],
    records: &[VariabilityRecord],
    grid: &GridSpec,
) -> (Vec<AnchoredRecord>, AnchorCounts) {
    assert_eq!(sets.len(), records.len(), "trip sets and records must align");
    let mut counts = AnchorCounts::default();
    let mut out = Vec::with_capacity(records.len() * 2);
    for (set, rec) in sets.iter().zip(records) {
        for role in Role::ALL {
            let cell = major_anchor(&set.trips, role).and_then(|p| assign_grid(p, grid));
            match cell {
                Some(cell) => out.push(AnchoredRecord {
                    cell,
                    role,
                    record: rec.clone(),
                }),
                None => match role {
                    Role::Origin => counts.origin_out_of_extent += 1,
                    Role::Destination => counts.destination_out_of_extent += 1,
                },
            }
        }
    }
    (out, counts)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridAggregate {
    pub cell: CellId,
    pub role: Role,
    pub period: Period,
    pub mean_sv: f64,
    pub mean_tv: f64,
    pub mean_tripfreq: f64,
    pub mean_avedur: f64,
    pub n_individuals: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AggregateOutcome {
    /// Sorted by period, role, then cell.
    pub aggregates: Vec<GridAggregate>,
    pub dropped_cells: usize,
    pub dropped_individuals: usize,
}

/// Per (period, role, cell) means over individuals; groups with fewer than
/// `min_individuals` riders are dropped.
pub fn aggregate_grid(records: &[AnchoredRecord], min_individuals: usize) -> AggregateOutcome {
    #[derive(Default)]
    struct Acc {
        n: usize,
        sv: f64,
        tv: f64,
        freq: f64,
        dur: f64,
    }
    let mut groups: BTreeMap<(Period, Role, CellId), Acc> = BTreeMap::new();
    for r in records {
        let acc = groups.entry((r.record.period, r.role, r.cell)).or_default();
        acc.n += 1;
        acc.sv += r.record.sv;
        acc.tv += r.record.tv;
        acc.freq += r.record.trip_frequency;
        acc.dur += r.record.mean_duration;
    }
    let mut out = AggregateOutcome::default();
    for ((period, role, cell), acc) in groups {
        if acc.n < min_individuals {
            out.dropped_cells += 1;
            out.dropped_individuals += acc.n;
            continue;
        }
        let n = acc.n as f64;
        out.aggregates.push(GridAggregate {
            cell,
            role,
            period,
            mean_sv: acc.sv / n,
            mean_tv: acc.tv / n,
            mean_tripfreq: acc.freq / n,
            mean_avedur: acc.dur / n,
            n_individuals: acc.n,
        });
    }
    out
}

pub const AGGREGATE_HEADER: [&str; 9] = [
    "col",
    "row",
    "role",
    "period",
    "mean_sv",
    "mean_tv",
    "mean_tripfreq",
    "mean_avedur",
    "n_individuals",
];

pub fn write_aggregates<W: Write>(aggs: &[GridAggregate], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(AGGREGATE_HEADER)?;
    for a in aggs {
        w.write_record([
            a.cell.col.to_string(),
            a.cell.row.to_string(),
            a.role.to_string(),
            a.period.to_string(),
            a.mean_sv.to_string(),
            a.mean_tv.to_string(),
            a.mean_tripfreq.to_string(),
            a.mean_avedur.to_string(),
            a.n_individuals.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<grid aggregates>", e))?;
    Ok(())
}
