//! Per-cell explanatory features: behavioural, built environment and
//! socio-demographic.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{assign_grid, CellId, GridAggregate, GridSpec};
use crate::geom::Point;
use crate::ingest::StopRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Feature {
    TripFreq,
    AveDur,
    CentDist,
    SubcenDist,
    MetroSta,
    BusStop,
    BusRoute,
    PopDen,
    RoadDen,
    PoiEntropy,
    Eat,
    Recrea,
    DailySer,
    Finan,
    Cult,
    HousePrice,
    Female,
    Juveni,
    OldAge,
}

pub const N_FEATURES: usize = 19;

impl Feature {
    pub const ALL: [Feature; N_FEATURES] = [
        Feature::TripFreq,
        Feature::AveDur,
        Feature::CentDist,
        Feature::SubcenDist,
        Feature::MetroSta,
        Feature::BusStop,
        Feature::BusRoute,
        Feature::PopDen,
        Feature::RoadDen,
        Feature::PoiEntropy,
        Feature::Eat,
        Feature::Recrea,
        Feature::DailySer,
        Feature::Finan,
        Feature::Cult,
        Feature::HousePrice,
        Feature::Female,
        Feature::Juveni,
        Feature::OldAge,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn abbreviation(self) -> &'static str {
        match self {
            Feature::TripFreq => "tripfreq",
            Feature::AveDur => "avedur",
            Feature::CentDist => "centdist",
            Feature::SubcenDist => "subcendist",
            Feature::MetroSta => "metrosta",
            Feature::BusStop => "busstop",
            Feature::BusRoute => "busroute",
            Feature::PopDen => "popden",
            Feature::RoadDen => "roadden",
            Feature::PoiEntropy => "poi_entro",
            Feature::Eat => "eat",
            Feature::Recrea => "recrea",
            Feature::DailySer => "dailyser",
            Feature::Finan => "finan",
            Feature::Cult => "cult",
            Feature::HousePrice => "houseprice",
            Feature::Female => "female",
            Feature::Juveni => "juveni",
            Feature::OldAge => "oldage",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Feature::TripFreq => "Average trip frequency",
            Feature::AveDur => "Average trip duration (hour)",
            Feature::CentDist => "Distance to the nearest urban centre (km)",
            Feature::SubcenDist => "Distance to the nearest subcentre (km)",
            Feature::MetroSta => "Availability of metro stations",
            Feature::BusStop => "Availability of bus stops",
            Feature::BusRoute => "Availability of bus routes",
            Feature::PopDen => "Population density (persons/km2)",
            Feature::RoadDen => "Road density (km/km2)",
            Feature::PoiEntropy => "POI entropy",
            Feature::Eat => "Availability of restaurants",
            Feature::Recrea => "Availability of recreational facilities",
            Feature::DailySer => "Availability of daily services",
            Feature::Finan => "Availability of financial facilities",
            Feature::Cult => "Availability of cultural facilities",
            Feature::HousePrice => "Housing price (RMB)",
            Feature::Female => "Proportion of female (%)",
            Feature::Juveni => "Proportion of dependent children (%)",
            Feature::OldAge => "Proportion of older people (%)",
        }
    }

    pub fn from_abbreviation(s: &str) -> Option<Feature> {
        Feature::ALL.into_iter().find(|f| f.abbreviation() == s)
    }
}

/// The 19 features of one cell; `None` marks a missing value.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct FeatureVector {
    pub values: [Option<f64>; N_FEATURES],
}

impl FeatureVector {
    pub fn get(&self, f: Feature) -> Option<f64> {
        self.values[f.index()]
    }

    pub fn set(&mut self, f: Feature, v: Option<f64>) {
        self.values[f.index()] = v;
    }

    /// Dense row with NaN for missing values.
    pub fn to_row(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.unwrap_or(f64::NAN)).collect()
    }
}

/// Shannon entropy (nats) of the category shares.
pub fn poi_entropy(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::UndefinedInput("POI entropy of an empty cell".into()));
    }
    let total = total as f64;
    let h = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// Distance in kilometres from `p` to the closest of `centres` (metres).
pub fn nearest_distance(p: Point, centres: &[Point]) -> Result<f64> {
    centres
        .iter()
        .map(|c| p.distance(c))
        .min_by(f64::total_cmp)
        .map(|m| m / 1000.0)
        .ok_or_else(|| Error::config("no centres configured"))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CentreSet {
    pub centres: Vec<Point>,
    pub subcentres: Vec<Point>,
}

impl CentreSet {
    /// Reads `kind,x_m,y_m` rows where kind is `centre` or `subcentre`.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut set = CentreSet::default();
        for rec in rdr.records() {
            let rec = rec?;
            let num = |i: usize| {
                rec.get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| Error::config(format!("bad centre row {rec:?}")))
            };
            let p = Point::new(num(1)?, num(2)?);
            match &rec[0] {
                "centre" | "center" => set.centres.push(p),
                "subcentre" | "subcenter" => set.subcentres.push(p),
                other => return Err(Error::config(format!("unknown centre kind `{other}`"))),
            }
        }
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.centres.is_empty() || self.subcentres.is_empty() {
            return Err(Error::config("need at least one urban centre and one subcentre"));
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["kind", "x_m", "y_m"])?;
        for (kind, pts) in [("centre", &self.centres), ("subcentre", &self.subcentres)] {
            for p in pts {
                w.write_record([kind.to_owned(), p.x.to_string(), p.y.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<centres>", e))?;
        Ok(())
    }
}

/// Columns of the per-cell attribute file besides `col,row`.
pub const ATTRIBUTE_COLUMNS: [Feature; 7] = [
    Feature::MetroSta,
    Feature::PopDen,
    Feature::RoadDen,
    Feature::HousePrice,
    Feature::Female,
    Feature::Juveni,
    Feature::OldAge,
];

/// POI categories reported as availability counts.
pub const POI_AVAILABILITY: [Feature; 5] = [
    Feature::Eat,
    Feature::Recrea,
    Feature::DailySer,
    Feature::Finan,
    Feature::Cult,
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StopStats {
    pub n_stops: usize,
    pub routes: BTreeSet<String>,
}

/// Raw per-cell inputs, all keyed by cell.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellInputs {
    pub attributes: BTreeMap<CellId, [Option<f64>; ATTRIBUTE_COLUMNS.len()]>,
    pub poi: BTreeMap<CellId, BTreeMap<String, u64>>,
    pub stops: BTreeMap<CellId, StopStats>,
}

fn cell_key(rec: &csv::StringRecord, col: usize, row: usize) -> Result<CellId> {
    let parse = |i: usize| {
        rec.get(i)
            .and_then(|s| s.trim().parse::<u32>().ok())
            .ok_or_else(|| Error::UndefinedInput(format!("bad cell key in {rec:?}")))
    };
    Ok(CellId::new(parse(col)?, parse(row)?))
}

impl CellInputs {
    /// Reads `col,row,<attribute columns>`; any attribute column may be
    /// absent and any value may be empty.
    pub fn read_attributes<R: Read>(&mut self, reader: R) -> Result<()> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| headers.iter().position(|h| h == name);
        let (col, row) = match (find("col"), find("row")) {
            (Some(c), Some(r)) => (c, r),
            _ => return Err(Error::UndefinedInput("attribute file lacks col,row".into())),
        };
        let slots: Vec<Option<usize>> = ATTRIBUTE_COLUMNS.iter().map(|f| find(f.abbreviation())).collect();
        for rec in rdr.records() {
            let rec = rec?;
            let cell = cell_key(&rec, col, row)?;
            let mut vals = [None; ATTRIBUTE_COLUMNS.len()];
            for (v, slot) in vals.iter_mut().zip(&slots) {
                *v = match slot.and_then(|i| rec.get(i)) {
                    None | Some("") => None,
                    Some(s) => Some(s.parse::<f64>().map_err(|_| {
                        Error::UndefinedInput(format!("bad attribute value {s:?} at {cell}"))
                    })?),
                };
            }
            self.attributes.insert(cell, vals);
        }
        Ok(())
    }

    /// Reads long-format `col,row,category,count` rows.
    pub fn read_poi<R: Read>(&mut self, reader: R) -> Result<()> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        for rec in rdr.records() {
            let rec = rec?;
            let cell = cell_key(&rec, 0, 1)?;
            let count: u64 = rec
                .get(3)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::UndefinedInput(format!("bad POI count in {rec:?}")))?;
            *self
                .poi
                .entry(cell)
                .or_default()
                .entry(rec.get(2).unwrap_or_default().to_owned())
                .or_default() += count;
        }
        Ok(())
    }

    /// Counts registry stops per cell, and the distinct routes serving them.
    pub fn index_stops(
        &mut self,
        registry: &StopRegistry,
        stop_routes: &BTreeMap<String, BTreeSet<String>>,
        grid: &GridSpec,
    ) {
        for (id, at) in registry.iter_sorted() {
            let Some(cell) = assign_grid(at, grid) else { continue };
            let stats = self.stops.entry(cell).or_default();
            stats.n_stops += 1;
            if let Some(routes) = stop_routes.get(id) {
                stats.routes.extend(routes.iter().cloned());
            }
        }
    }

    fn knows(&self, cell: CellId) -> bool {
        self.attributes.contains_key(&cell) || self.poi.contains_key(&cell) || self.stops.contains_key(&cell)
    }
}

/// Reads `stop_id,route_id` pairs.
pub fn read_stop_routes<R: Read>(reader: R) -> Result<BTreeMap<String, BTreeSet<String>>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::UndefinedInput(format!("bad stop-route row {rec:?}")));
        }
        out.entry(rec[0].to_owned()).or_default().insert(rec[1].to_owned());
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureTable {
    /// In the order of the aggregates passed in.
    pub rows: Vec<(CellId, FeatureVector)>,
    /// Aggregated cells without any raw input.
    pub dropped: usize,
}

/// Assembles one feature vector per aggregated cell of a single
/// (period, role) slice.
pub fn build_feature_table(
    aggregates: &[GridAggregate],
    inputs: &CellInputs,
    centres: &CentreSet,
    grid: &GridSpec,
) -> Result<FeatureTable> {
    centres.validate()?;
    let mut table = FeatureTable::default();
    for agg in aggregates {
        if !inputs.knows(agg.cell) {
            table.dropped += 1;
            continue;
        }
        let mut v = FeatureVector::default();
        v.set(Feature::TripFreq, Some(agg.mean_tripfreq));
        v.set(Feature::AveDur, Some(agg.mean_avedur));
        let centroid = grid.centroid(agg.cell);
        v.set(Feature::CentDist, Some(nearest_distance(centroid, &centres.centres)?));
        v.set(Feature::SubcenDist, Some(nearest_distance(centroid, &centres.subcentres)?));

        let stops = inputs.stops.get(&agg.cell);
        v.set(Feature::BusStop, Some(stops.map_or(0, |s| s.n_stops) as f64));
        v.set(Feature::BusRoute, Some(stops.map_or(0, |s| s.routes.len()) as f64));

        if let Some(attrs) = inputs.attributes.get(&agg.cell) {
            for (f, val) in ATTRIBUTE_COLUMNS.iter().zip(attrs) {
                v.set(*f, *val);
            }
        }
        if let Some(poi) = inputs.poi.get(&agg.cell) {
            for f in POI_AVAILABILITY {
                v.set(f, Some(poi.get(f.abbreviation()).copied().unwrap_or(0) as f64));
            }
            let counts: Vec<u64> = poi.values().copied().collect();
            v.set(Feature::PoiEntropy, poi_entropy(&counts).ok());
        }
        table.rows.push((agg.cell, v));
    }
    Ok(table)
}

pub fn feature_header() -> Vec<&'static str> {
    let mut h = vec!["col", "row"];
    h.extend(Feature::ALL.iter().map(|f| f.abbreviation()));
    h
}

pub fn write_feature_table<W: Write>(table: &FeatureTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(feature_header())?;
    for (cell, v) in &table.rows {
        let mut rec = vec![cell.col.to_string(), cell.row.to_string()];
        rec.extend(v.values.iter().map(|x| x.map(|x| x.to_string()).unwrap_or_default()));
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io("<feature table>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Role;
    use crate::ingest::Period;
    use proptest::prelude::*;

    fn grid() -> GridSpec {
        GridSpec::new(Point::new(0.0, 0.0), 500.0, 4, 4).unwrap()
    }

    fn agg(col: u32, row: u32) -> GridAggregate {
        GridAggregate {
            cell: CellId::new(col, row),
            role: Role::Origin,
            period: Period::Morning,
            mean_sv: 1000.0,
            mean_tv: 0.5,
            mean_tripfreq: 8.0,
            mean_avedur: 0.4,
            n_individuals: 12,
        }
    }

    fn centres() -> CentreSet {
        CentreSet {
            centres: vec![Point::new(0.0, 0.0)],
            subcentres: vec![Point::new(2000.0, 2000.0)],
        }
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(poi_entropy(&[7]).unwrap(), 0.0);
        assert!((poi_entropy(&[3, 3]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((poi_entropy(&[2, 2, 2, 2, 2]).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!(poi_entropy(&[0, 0]).is_err());
        assert_eq!(poi_entropy(&[0, 4, 0]).unwrap(), 0.0);
    }

    #[test]
    fn nearest_distance_examples() {
        let cs = [Point::new(0.0, 0.0), Point::new(10_000.0, 0.0)];
        assert_eq!(nearest_distance(Point::new(0.0, 0.0), &cs).unwrap(), 0.0);
        assert!((nearest_distance(Point::new(7000.0, 0.0), &cs).unwrap() - 3.0).abs() < 1e-12);
        assert!((nearest_distance(Point::new(3000.0, 4000.0), &cs[..1]).unwrap() - 5.0).abs() < 1e-12);
        assert!(nearest_distance(Point::new(0.0, 0.0), &[]).is_err());
    }

    fn full_inputs() -> CellInputs {
        let mut inputs = CellInputs::default();
        inputs
            .read_attributes(
                "col,row,metrosta,popden,roadden,houseprice,female,juveni,oldage\n0,0,1,50000,12.5,60000,46,2.7,5.5\n1,0,0,40000,10,,47,3,6\n"
                    .as_bytes(),
            )
            .unwrap();
        inputs
            .read_poi("col,row,category,count\n0,0,eat,10\n0,0,cult,10\n0,0,retail,20\n1,0,eat,3\n".as_bytes())
            .unwrap();
        let mut reg = StopRegistry::new();
        reg.insert("s1", Point::new(100.0, 100.0)).unwrap();
        reg.insert("s2", Point::new(200.0, 100.0)).unwrap();
        reg.insert("s3", Point::new(300.0, 300.0)).unwrap();
        let routes = read_stop_routes("stop_id,route_id\ns1,r1\ns2,r1\ns3,r2\n".as_bytes()).unwrap();
        inputs.index_stops(&reg, &routes, &grid());
        inputs
    }

    #[test]
    fn complete_cell_has_all_features() {
        let table = build_feature_table(&[agg(0, 0)], &full_inputs(), &centres(), &grid()).unwrap();
        let (cell, v) = table.rows[0];
        assert_eq!(cell, CellId::new(0, 0));
        assert!(v.values.iter().all(Option::is_some), "{v:?}");
        assert_eq!(v.get(Feature::BusStop), Some(3.0));
        // routes {r1, r1, r2}
        assert_eq!(v.get(Feature::BusRoute), Some(2.0));
        assert_eq!(v.get(Feature::Eat), Some(10.0));
        assert_eq!(v.get(Feature::Finan), Some(0.0));
        let h = poi_entropy(&[10, 10, 20]).unwrap();
        assert_eq!(v.get(Feature::PoiEntropy), Some(h));
        let c = grid().centroid(cell);
        assert!((v.get(Feature::CentDist).unwrap() - c.distance(&Point::new(0.0, 0.0)) / 1000.0).abs() < 1e-12);
        assert_eq!(v.get(Feature::TripFreq), Some(8.0));
    }

    #[test]
    fn missing_house_price_is_flagged() {
        let table = build_feature_table(&[agg(1, 0)], &full_inputs(), &centres(), &grid()).unwrap();
        let v = table.rows[0].1;
        assert_eq!(v.get(Feature::HousePrice), None);
        assert_eq!(v.get(Feature::Female), Some(47.0));
        assert_eq!(v.get(Feature::BusStop), Some(0.0));
    }

    #[test]
    fn cell_without_any_input_is_dropped() {
        let table = build_feature_table(&[agg(0, 0), agg(3, 3)], &full_inputs(), &centres(), &grid()).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.dropped, 1);
    }

    #[test]
    fn feature_csv_uses_empty_for_missing() {
        let table = build_feature_table(&[agg(1, 0)], &full_inputs(), &centres(), &grid()).unwrap();
        let mut buf = Vec::new();
        write_feature_table(&table, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap().split(',').count(), 21);
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[2 + Feature::HousePrice.index()], "");
    }

    #[test]
    fn abbreviations_round_trip() {
        for f in Feature::ALL {
            assert_eq!(Feature::from_abbreviation(f.abbreviation()), Some(f));
            assert_eq!(Feature::ALL[f.index()], f);
        }
    }

    proptest! {
        #[test]
        fn entropy_permutation_invariant_and_bounded(counts in prop::collection::vec(0u64..50, 1..12)) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let h = poi_entropy(&counts).unwrap();
            let mut rev = counts.clone();
            rev.reverse();
            prop_assert!((h - poi_entropy(&rev).unwrap()).abs() < 1e-12);
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (counts.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn nearest_is_no_farther_than_any(px in -1e4..1e4f64, py in -1e4..1e4f64,
                                          cs in prop::collection::vec((-1e4..1e4f64, -1e4..1e4f64), 1..8)) {
            let pts: Vec<Point> = cs.iter().map(|&(x, y)| Point::new(x, y)).collect();
            let p = Point::new(px, py);
            let d = nearest_distance(p, &pts).unwrap();
            prop_assert!(d >= 0.0);
            for c in &pts {
                prop_assert!(d <= p.distance(c) / 1000.0 + 1e-12);
            }
        }
    }
}
