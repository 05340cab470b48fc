//! Seeded synthetic city with planted relationships between cell features and
//! rider variability.
//!
//! Riders come in groups sharing a home cell and a work cell 1 to 2 km away.
//! Each group gets a peak-period trip frequency `f`, and its riders a spatial
//! variability target that is convex in `f`:
//!
//! ```text
//! SV*(f) = sv_base_m + sv_curvature_m * (f - sv_optimum)^2
//! ```
//!
//! and a temporal variability target that falls with the home cell's distance
//! `d` (km) to the nearest subcentre:
//!
//! ```text
//! TV*(d) = tv_floor_h + tv_amplitude_h * exp(-d / tv_scale_km)
//! ```
//!
//! Both targets are multiplied by a per-rider log-normal factor. A share of
//! each rider's trips run exactly between the anchor stops; the rest jitter
//! origin and destination uniformly on a disc whose radius is calibrated so
//! the expected mean pairwise distance equals `SV*`, snapped to the nearest
//! stop. Start times are uniform around the window midpoint with a half-width
//! calibrated from `TV*`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{nearest_distance, CentreSet, Feature, ATTRIBUTE_COLUMNS};
use crate::fusion::{assign_grid, CellId, GridSpec};
use crate::geom::Point;
use crate::ingest::{write_transactions, PeriodWindow, PeriodWindows, StopRegistry, Transaction};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvEffect {
    pub base_m: f64,
    pub curvature_m: f64,
    pub optimum: f64,
}

impl SvEffect {
    pub fn eval(&self, frequency: f64) -> f64 {
        self.base_m + self.curvature_m * (frequency - self.optimum).powi(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvEffect {
    pub floor_h: f64,
    pub amplitude_h: f64,
    pub scale_km: f64,
}

impl TvEffect {
    pub fn eval(&self, subcentre_km: f64) -> f64 {
        self.floor_h + self.amplitude_h * (-subcentre_km / self.scale_km).exp()
    }
}

/// Deliberately broken input, to exercise the ingest filters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Faults {
    /// Rows with a bad clock, an unknown stop, reversed times or a missing
    /// column, in rotation.
    pub malformed_rows: usize,
    /// Single-leg trips of 30 s.
    pub short_trips: usize,
    /// Single-leg trips of 3.5 h.
    pub long_trips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_riders: usize,
    pub grid: GridSpec,
    pub n_stops: usize,
    pub min_stop_spacing_m: f64,
    pub n_routes: usize,
    pub n_centres: usize,
    pub n_subcentres: usize,
    pub group_size: usize,
    pub work_distance_km: (f64, f64),
    pub frequency_min: f64,
    pub frequency_max: f64,
    pub frequency_noise: f64,
    pub sv: SvEffect,
    pub tv: TvEffect,
    /// Standard deviation of the per-rider log-normal target multiplier.
    pub rider_spread: f64,
    /// Share of a rider's trips running exactly between the anchor stops.
    pub regular_share: f64,
    pub transfer_share: f64,
    pub noise_trips_per_rider: f64,
    pub start_date: NaiveDate,
    pub days: u32,
    pub morning: PeriodWindow,
    pub evening: PeriodWindow,
    pub faults: Faults,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let windows = PeriodWindows::default();
        SynthConfig {
            seed: 7,
            n_riders: 2000,
            grid: GridSpec {
                origin: Point::new(0.0, 0.0),
                cell_size: 500.0,
                n_cols: 40,
                n_rows: 25,
            },
            n_stops: 3000,
            min_stop_spacing_m: 100.0,
            n_routes: 120,
            n_centres: 2,
            n_subcentres: 4,
            group_size: 16,
            work_distance_km: (1.0, 2.0),
            frequency_min: 4.0,
            frequency_max: 14.0,
            frequency_noise: 0.7,
            sv: SvEffect {
                base_m: 800.0,
                curvature_m: 50.0,
                optimum: 9.0,
            },
            tv: TvEffect {
                floor_h: 0.15,
                amplitude_h: 0.6,
                scale_km: 3.0,
            },
            rider_spread: 0.3,
            regular_share: 0.3,
            transfer_share: 0.2,
            noise_trips_per_rider: 3.0,
            start_date: NaiveDate::from_ymd_opt(2016, 6, 1).expect("valid date"),
            days: 30,
            morning: windows.morning,
            evening: windows.evening,
            faults: Faults::default(),
        }
    }
}

const MIN_TRIPS: f64 = 4.0;

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("synth config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        PeriodWindows::new(self.morning, self.evening)?;
        let bad = |msg: &str| Err(Error::config(msg.to_owned()));
        if self.n_riders == 0 || self.group_size == 0 {
            return bad("n_riders and group_size must be positive");
        }
        if self.n_stops == 0 || self.n_routes == 0 || self.n_centres == 0 || self.n_subcentres == 0 {
            return bad("n_stops, n_routes, n_centres and n_subcentres must be positive");
        }
        if self.min_stop_spacing_m.is_nan() || self.min_stop_spacing_m <= 0.0 {
            return bad("min_stop_spacing_m must be positive");
        }
        let area = self.grid.width() * self.grid.height();
        if self.n_stops as f64 * self.min_stop_spacing_m.powi(2) > 0.5 * area {
            return Err(Error::config(format!(
                "extent of {:.1} km2 is too small for {} stops spaced {} m apart",
                area / 1e6,
                self.n_stops,
                self.min_stop_spacing_m
            )));
        }
        let (lo, hi) = self.work_distance_km;
        if !(lo > 0.0 && hi >= lo) {
            return bad("work_distance_km must be an increasing positive pair");
        }
        if !(self.frequency_min >= MIN_TRIPS && self.frequency_max >= self.frequency_min) {
            return bad("frequencies must satisfy 4 <= frequency_min <= frequency_max");
        }
        if self.frequency_max > f64::from(self.days) {
            return bad("frequency_max exceeds the number of days");
        }
        for (name, p) in [("regular_share", self.regular_share), ("transfer_share", self.transfer_share)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        let non_negative = [
            self.frequency_noise,
            self.rider_spread,
            self.noise_trips_per_rider,
            self.sv.base_m,
            self.sv.curvature_m,
            self.tv.floor_h,
            self.tv.amplitude_h,
        ];
        if non_negative.iter().any(|v| v.is_nan() || *v < 0.0) || self.tv.scale_km.is_nan() || self.tv.scale_km <= 0.0 {
            return bad("effect parameters must be non-negative with a positive tv scale");
        }
        Ok(())
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        (0..self.days)
            .map(|d| self.start_date + Days::new(u64::from(d)))
            .collect()
    }
}

/// Stops with a bucket index for nearest-stop queries.
#[derive(Debug, Clone)]
pub struct StopNetwork {
    pub ids: Vec<String>,
    pub points: Vec<Point>,
    pub routes: Vec<Vec<String>>,
    lo: Point,
    hi: Point,
    bucket: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<u32>>,
}

impl StopNetwork {
    pub fn new(ids: Vec<String>, points: Vec<Point>, routes: Vec<Vec<String>>, bucket_m: f64) -> Result<Self> {
        if points.is_empty() || ids.len() != points.len() || routes.len() != points.len() {
            return Err(Error::config("stop network needs matching, non-empty ids, points and routes"));
        }
        if routes.iter().any(Vec::is_empty) {
            return Err(Error::config("every stop needs at least one route"));
        }
        let lo = points.iter().fold(Point::new(f64::INFINITY, f64::INFINITY), |a, p| {
            Point::new(a.x.min(p.x), a.y.min(p.y))
        });
        let hi = points.iter().fold(Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY), |a, p| {
            Point::new(a.x.max(p.x), a.y.max(p.y))
        });
        let cols = (((hi.x - lo.x) / bucket_m).floor() as usize) + 1;
        let rows = (((hi.y - lo.y) / bucket_m).floor() as usize) + 1;
        let mut net = StopNetwork {
            ids,
            points,
            routes,
            lo,
            hi,
            bucket: bucket_m,
            cols,
            rows,
            buckets: vec![Vec::new(); cols * rows],
        };
        for i in 0..net.points.len() {
            let (c, r) = net.bucket_of(net.points[i]);
            net.buckets[r * cols + c].push(i as u32);
        }
        Ok(net)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn bucket_of(&self, p: Point) -> (usize, usize) {
        let c = ((p.x - self.lo.x) / self.bucket).floor().clamp(0.0, (self.cols - 1) as f64) as usize;
        let r = ((p.y - self.lo.y) / self.bucket).floor().clamp(0.0, (self.rows - 1) as f64) as usize;
        (c, r)
    }

    /// Index of the stop nearest to `p`, ties to the lower index. Queries
    /// outside the stops' bounding box are first clamped onto it.
    pub fn nearest(&self, p: Point) -> usize {
        let q = Point::new(p.x.clamp(self.lo.x, self.hi.x), p.y.clamp(self.lo.y, self.hi.y));
        let (bc, br) = self.bucket_of(q);
        let mut best = (f64::INFINITY, usize::MAX);
        for ring in 0..=self.cols.max(self.rows) {
            let r = ring as isize;
            for dr in -r..=r {
                for dc in -r..=r {
                    if dr.abs().max(dc.abs()) != r {
                        continue;
                    }
                    let (c, rr) = (bc as isize + dc, br as isize + dr);
                    if c < 0 || rr < 0 || c >= self.cols as isize || rr >= self.rows as isize {
                        continue;
                    }
                    for &i in &self.buckets[rr as usize * self.cols + c as usize] {
                        let d = q.distance(&self.points[i as usize]);
                        if d < best.0 || (d == best.0 && (i as usize) < best.1) {
                            best = (d, i as usize);
                        }
                    }
                }
            }
            if best.0 <= ring as f64 * self.bucket {
                break;
            }
        }
        best.1
    }

    pub fn registry(&self) -> Result<StopRegistry> {
        let mut reg = StopRegistry::new();
        for (id, p) in self.ids.iter().zip(&self.points) {
            reg.insert(id.clone(), *p)?;
        }
        Ok(reg)
    }

    pub fn write_stops<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["stop_id", "x_m", "y_m"])?;
        for (id, p) in self.ids.iter().zip(&self.points) {
            w.write_record([id.clone(), p.x.to_string(), p.y.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<stops>", e))
    }

    pub fn write_stop_routes<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["stop_id", "route_id"])?;
        for (id, routes) in self.ids.iter().zip(&self.routes) {
            for r in routes {
                w.write_record([id, r])?;
            }
        }
        w.flush().map_err(|e| Error::io("<stop routes>", e))
    }
}

/// How one rider's trips in one period are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct RiderProfile {
    pub card_id: String,
    pub origin_stop: usize,
    pub destination_stop: usize,
    pub origin_radius_m: f64,
    pub destination_radius_m: f64,
    pub regular_share: f64,
    pub start_mean_s: f64,
    pub start_half_width_s: f64,
    pub duration_s: u32,
    pub duration_jitter_s: u32,
    pub transfer_share: f64,
    pub n_trips: usize,
}

fn uniform_disc<R: Rng>(rng: &mut R, radius: f64) -> Point {
    let r = radius * rng.gen::<f64>().sqrt();
    let a = rng.gen_range(0.0..std::f64::consts::TAU);
    Point::new(r * a.cos(), r * a.sin())
}

#[allow(clippy::too_many_arguments)]
fn leg(card: &str, date: NaiveDate, board: u32, alight: u32, from: usize, to: usize, net: &StopNetwork, rng: &mut impl Rng) -> Transaction {
    Transaction {
        card_id: card.to_owned(),
        service_date: date,
        board_time: board,
        alight_time: alight,
        board_stop: net.ids[from].clone(),
        alight_stop: net.ids[to].clone(),
        route: net.routes[from].choose(rng).expect("stops have routes").clone(),
    }
}

/// Draws the taps of one rider in one period, one trip per chosen day.
pub fn simulate_rider<R: Rng>(
    profile: &RiderProfile,
    net: &StopNetwork,
    dates: &[NaiveDate],
    rng: &mut R,
) -> Result<Vec<Transaction>> {
    let n = profile.n_trips;
    if n > dates.len() {
        return Err(Error::config(format!("{n} trips do not fit in {} days", dates.len())));
    }
    let mut days = index::sample(rng, dates.len(), n).into_vec();
    days.sort_unstable();
    let n_regular = (profile.regular_share * n as f64).round() as usize;
    let mut regular: Vec<bool> = (0..n).map(|k| k < n_regular).collect();
    regular.shuffle(rng);

    let mut out = Vec::with_capacity(n);
    for (k, &day) in days.iter().enumerate() {
        let date = dates[day];
        let jitter = |stop: usize, radius: f64, rng: &mut R| {
            if regular[k] || radius <= 0.0 {
                stop
            } else {
                let d = uniform_disc(rng, radius);
                let at = net.points[stop];
                net.nearest(Point::new(at.x + d.x, at.y + d.y))
            }
        };
        let o = jitter(profile.origin_stop, profile.origin_radius_m, rng);
        let d = jitter(profile.destination_stop, profile.destination_radius_m, rng);
        let offset = if profile.start_half_width_s > 0.0 {
            rng.gen_range(-profile.start_half_width_s..=profile.start_half_width_s)
        } else {
            0.0
        };
        let start = (profile.start_mean_s + offset).round().max(0.0) as u32;
        let j = i64::from(profile.duration_jitter_s);
        let dur = (i64::from(profile.duration_s) + rng.gen_range(-j..=j)).max(60) as u32;
        let end = start + dur;
        if dur >= 300 && profile.transfer_share > 0.0 && rng.gen_bool(profile.transfer_share) {
            let gap = rng.gen_range(60..=(dur / 3).min(600));
            let first_end = start + (dur - gap) / 2;
            let (po, pd) = (net.points[o], net.points[d]);
            let x = net.nearest(Point::new((po.x + pd.x) / 2.0, (po.y + pd.y) / 2.0));
            out.push(leg(&profile.card_id, date, start, first_end, o, x, net, rng));
            out.push(leg(&profile.card_id, date, first_end + gap, end, x, d, net, rng));
        } else {
            out.push(leg(&profile.card_id, date, start, end, o, d, net, rng));
        }
    }
    Ok(out)
}

/// Expected `sqrt(|u|^2 + |v|^2)` and `sqrt(|u1-u2|^2 + |v1-v2|^2)` for
/// independent uniform points on the unit disc, by seeded Monte Carlo.
pub fn disc_distance_factors() -> (f64, f64) {
    const N: usize = 200_000;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let (mut one, mut two) = (0.0, 0.0);
    for _ in 0..N {
        let (u1, v1, u2, v2) = (
            uniform_disc(&mut rng, 1.0),
            uniform_disc(&mut rng, 1.0),
            uniform_disc(&mut rng, 1.0),
            uniform_disc(&mut rng, 1.0),
        );
        one += (u1.x * u1.x + u1.y * u1.y + v1.x * v1.x + v1.y * v1.y).sqrt();
        let (du, dv) = (Point::new(u1.x - u2.x, u1.y - u2.y), Point::new(v1.x - v2.x, v1.y - v2.y));
        two += (du.x * du.x + du.y * du.y + dv.x * dv.x + dv.y * dv.y).sqrt();
    }
    (one / N as f64, two / N as f64)
}

/// Disc radius whose expected mean pairwise distance over `n` trips, of
/// which `round(regular_share * n)` sit exactly on the anchors, equals
/// `target_m`.
pub fn calibrate_radius(target_m: f64, n: usize, regular_share: f64, factors: (f64, f64)) -> f64 {
    let m = (regular_share * n as f64).round();
    let n = n as f64;
    let mixed = m * (n - m) * factors.0;
    let jittered = (n - m) * (n - m - 1.0) / 2.0 * factors.1;
    let pairs = n * (n - 1.0) / 2.0;
    let per_radius = (mixed + jittered) / pairs;
    if per_radius > 0.0 {
        target_m / per_radius
    } else {
        0.0
    }
}

/// Start-time half-width giving an expected temporal variability of
/// `target_h` when durations are (nearly) fixed.
pub fn calibrate_half_width_s(target_h: f64) -> f64 {
    target_h * 3600.0 * 3.0 / (2.0 * std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupTruth {
    pub group: usize,
    pub home_cell: CellId,
    pub work_cell: CellId,
    pub trip_frequency: f64,
    pub subcentre_km: f64,
    pub sv_planted_m: f64,
    pub tv_planted_h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiderTruth {
    pub card_id: String,
    pub group: usize,
    pub sv_target_m: f64,
    pub tv_target_h: f64,
    pub morning_trips: usize,
    pub evening_trips: usize,
    pub jitter_radius_morning_m: f64,
    pub jitter_radius_evening_m: f64,
    pub start_half_width_h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub sv_driver: &'static str,
    pub sv_effect: SvEffect,
    pub tv_driver: &'static str,
    pub tv_effect: TvEffect,
    pub groups: Vec<GroupTruth>,
    pub riders: Vec<RiderTruth>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCity {
    pub config: SynthConfig,
    pub network: StopNetwork,
    pub centres: CentreSet,
    pub attributes: BTreeMap<CellId, [Option<f64>; ATTRIBUTE_COLUMNS.len()]>,
    pub poi: BTreeMap<CellId, BTreeMap<String, u64>>,
    pub transactions: Vec<Transaction>,
    pub malformed_rows: Vec<String>,
    pub truth: GroundTruth,
}

/// Paths written by [`SyntheticCity::write`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CityFiles {
    pub transactions: PathBuf,
    pub stops: PathBuf,
    pub stop_routes: PathBuf,
    pub centres: PathBuf,
    pub cell_attributes: PathBuf,
    pub poi: PathBuf,
    pub ground_truth: PathBuf,
}

pub const POI_CATEGORIES: [&str; 6] = ["eat", "recrea", "dailyser", "finan", "cult", "residential"];

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn place_stops(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Point>> {
    let g = &config.grid;
    let s = config.min_stop_spacing_m;
    let cols = (g.width() / s).ceil() as usize + 1;
    let rows = (g.height() / s).ceil() as usize + 1;
    let mut hash: Vec<Vec<Point>> = vec![Vec::new(); cols * rows];
    let mut out = Vec::with_capacity(config.n_stops);
    let mut attempts = 0;
    while out.len() < config.n_stops {
        attempts += 1;
        if attempts > 50 * config.n_stops {
            return Err(Error::config(format!(
                "could only place {} of {} stops with spacing {s} m",
                out.len(),
                config.n_stops
            )));
        }
        let p = Point::new(
            g.origin.x + rng.gen_range(0.0..g.width()),
            g.origin.y + rng.gen_range(0.0..g.height()),
        );
        let c = ((p.x - g.origin.x) / s) as usize;
        let r = ((p.y - g.origin.y) / s) as usize;
        let clash = (r.saturating_sub(1)..=(r + 1).min(rows - 1))
            .flat_map(|rr| (c.saturating_sub(1)..=(c + 1).min(cols - 1)).map(move |cc| rr * cols + cc))
            .any(|b| hash[b].iter().any(|q| q.distance(&p) < s));
        if !clash {
            hash[r * cols + c].push(p);
            out.push(p);
        }
    }
    Ok(out)
}

fn inner_point(g: &GridSpec, margin: f64, rng: &mut ChaCha8Rng) -> Point {
    Point::new(
        g.origin.x + g.width() * rng.gen_range(margin..1.0 - margin),
        g.origin.y + g.height() * rng.gen_range(margin..1.0 - margin),
    )
}

fn draw_frequency(config: &SynthConfig, rng: &mut impl Rng) -> f64 {
    if config.frequency_max > config.frequency_min {
        rng.gen_range(config.frequency_min..=config.frequency_max)
    } else {
        config.frequency_min
    }
}

fn trip_count(f: f64, config: &SynthConfig, rng: &mut impl Rng) -> usize {
    let z: f64 = StandardNormal.sample(rng);
    (f + config.frequency_noise * z).round().clamp(MIN_TRIPS, f64::from(config.days)) as usize
}

/// Builds the whole city. Identical configs give identical cities.
pub fn generate_city(config: &SynthConfig) -> Result<SyntheticCity> {
    config.validate()?;
    let grid = config.grid;
    let seed = config.seed;

    let mut rng = stream(seed, 1);
    let points = place_stops(config, &mut rng)?;
    let ids: Vec<String> = (0..points.len()).map(|i| format!("S{i:05}")).collect();
    let route_ids: Vec<String> = (0..config.n_routes).map(|i| format!("R{i:03}")).collect();
    let routes: Vec<Vec<String>> = (0..points.len())
        .map(|_| {
            let k = rng.gen_range(1..=3usize).min(route_ids.len());
            let mut r: Vec<String> = index::sample(&mut rng, route_ids.len(), k)
                .into_iter()
                .map(|i| route_ids[i].clone())
                .collect();
            r.sort();
            r
        })
        .collect();
    let net = StopNetwork::new(ids, points, routes, 250.0)?;

    let mut rng = stream(seed, 2);
    let centres = CentreSet {
        centres: (0..config.n_centres).map(|_| inner_point(&grid, 0.25, &mut rng)).collect(),
        subcentres: (0..config.n_subcentres).map(|_| inner_point(&grid, 0.1, &mut rng)).collect(),
    };

    let mut rng = stream(seed, 3);
    let mut attributes = BTreeMap::new();
    let mut poi = BTreeMap::new();
    for cell in grid.cells() {
        let mut a = [None; ATTRIBUTE_COLUMNS.len()];
        for (slot, f) in a.iter_mut().zip(ATTRIBUTE_COLUMNS) {
            *slot = match f {
                Feature::MetroSta => Some(f64::from(u8::from(rng.gen_bool(0.2)) + u8::from(rng.gen_bool(0.05)))),
                Feature::PopDen => Some((rng.gen_range(7.0..10.5f64)).exp().round()),
                Feature::RoadDen => Some(rng.gen_range(2.0..12.0)),
                Feature::HousePrice => rng.gen_bool(0.9).then(|| rng.gen_range(20_000.0..90_000.0f64).round()),
                Feature::Female => Some(rng.gen_range(0.46..0.54)),
                Feature::Juveni => Some(rng.gen_range(0.08..0.2)),
                _ => Some(rng.gen_range(0.08..0.25)),
            };
        }
        attributes.insert(cell, a);
        if rng.gen_bool(0.95) {
            let counts = POI_CATEGORIES
                .iter()
                .map(|c| ((*c).to_owned(), rng.gen_range(0..40u64)))
                .collect();
            poi.insert(cell, counts);
        }
    }

    let mut cell_stops: BTreeMap<CellId, Vec<usize>> = BTreeMap::new();
    for (i, p) in net.points.iter().enumerate() {
        if let Some(c) = assign_grid(*p, &grid) {
            cell_stops.entry(c).or_default().push(i);
        }
    }
    let mut homes: Vec<CellId> = cell_stops
        .keys()
        .copied()
        .filter(|c| c.col >= 1 && c.row >= 1 && c.col + 2 <= grid.n_cols && c.row + 2 <= grid.n_rows)
        .collect();
    if homes.is_empty() {
        return Err(Error::config("no interior cell has a stop"));
    }
    let mut rng = stream(seed, 4);
    homes.shuffle(&mut rng);
    let n_groups = config.n_riders.div_ceil(config.group_size);
    let (wlo, whi) = config.work_distance_km;
    let groups: Vec<GroupTruth> = (0..n_groups)
        .map(|g| {
            let home_cell = homes[g % homes.len()];
            let centroid = grid.centroid(home_cell);
            let mut work_cell = home_cell;
            for _ in 0..100 {
                let dist = 1000.0 * if whi > wlo { rng.gen_range(wlo..=whi) } else { wlo };
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                let target = Point::new(centroid.x + dist * a.cos(), centroid.y + dist * a.sin());
                if assign_grid(target, &grid).is_none() {
                    continue;
                }
                let cell = assign_grid(net.points[net.nearest(target)], &grid).expect("stops lie inside the grid");
                if cell != home_cell {
                    work_cell = cell;
                    break;
                }
            }
            let trip_frequency = draw_frequency(config, &mut rng);
            let subcentre_km = nearest_distance(centroid, &centres.subcentres)?;
            Ok(GroupTruth {
                group: g,
                home_cell,
                work_cell,
                trip_frequency,
                subcentre_km,
                sv_planted_m: config.sv.eval(trip_frequency),
                tv_planted_h: config.tv.eval(subcentre_km),
            })
        })
        .collect::<Result<_>>()?;

    let factors = disc_distance_factors();
    let dates = config.dates();
    let windows = [config.morning, config.evening];
    let per_rider: Vec<(Vec<Transaction>, RiderTruth)> = (0..config.n_riders)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed ^ 0x7269_6465_7273, i as u64);
            let group = &groups[i / config.group_size];
            let card_id = format!("C{i:07}");
            let home = *cell_stops[&group.home_cell].choose(&mut rng).expect("home cells have stops");
            let work = *cell_stops[&group.work_cell].choose(&mut rng).expect("work cells have stops");
            let z_sv: f64 = StandardNormal.sample(&mut rng);
            let z_tv: f64 = StandardNormal.sample(&mut rng);
            let sv = group.sv_planted_m * (config.rider_spread * z_sv).exp();
            let tv = group.tv_planted_h * (config.rider_spread * z_tv).exp();
            let distance = net.points[home].distance(&net.points[work]);
            let duration_s = (300.0 + distance * 0.24).round() as u32;

            let mut taps = Vec::new();
            let mut counts = [0usize; 2];
            let mut radii = [0.0; 2];
            let mut half_width_s = 0.0;
            for (k, window) in windows.iter().enumerate() {
                let n = trip_count(group.trip_frequency, config, &mut rng);
                let width = f64::from(window.end_s - window.start_s);
                let radius = calibrate_radius(sv, n, config.regular_share, factors);
                half_width_s = calibrate_half_width_s(tv).min(0.45 * width);
                let (o, d) = if k == 0 { (home, work) } else { (work, home) };
                let profile = RiderProfile {
                    card_id: card_id.clone(),
                    origin_stop: o,
                    destination_stop: d,
                    origin_radius_m: radius,
                    destination_radius_m: radius,
                    regular_share: config.regular_share,
                    start_mean_s: f64::from(window.start_s) + width / 2.0,
                    start_half_width_s: half_width_s,
                    duration_s,
                    duration_jitter_s: 60,
                    transfer_share: config.transfer_share,
                    n_trips: n,
                };
                taps.extend(simulate_rider(&profile, &net, &dates, &mut rng)?);
                counts[k] = n;
                radii[k] = radius;
            }
            let n_noise = if config.noise_trips_per_rider > 0.0 {
                rng.gen_range(0.0..=2.0 * config.noise_trips_per_rider).round() as usize
            } else {
                0
            };
            for _ in 0..n_noise {
                let date = dates[rng.gen_range(0..dates.len())];
                let start = rng.gen_range(12 * 3600..14 * 3600);
                let dur = rng.gen_range(600..2400);
                let (o, d) = (rng.gen_range(0..net.len()), rng.gen_range(0..net.len()));
                taps.push(leg(&card_id, date, start, start + dur, o, d, &net, &mut rng));
            }
            taps.sort_by_key(|t| (t.service_date, t.board_time));
            let truth = RiderTruth {
                card_id,
                group: group.group,
                sv_target_m: sv,
                tv_target_h: tv,
                morning_trips: counts[0],
                evening_trips: counts[1],
                jitter_radius_morning_m: radii[0],
                jitter_radius_evening_m: radii[1],
                start_half_width_h: half_width_s / 3600.0,
            };
            Ok((taps, truth))
        })
        .collect::<Result<_>>()?;

    let mut transactions = Vec::new();
    let mut riders = Vec::with_capacity(per_rider.len());
    for (taps, truth) in per_rider {
        transactions.extend(taps);
        riders.push(truth);
    }

    let mut rng = stream(seed, 5);
    let faults = config.faults;
    for k in 0..faults.short_trips + faults.long_trips {
        let card = format!("C{:07}", rng.gen_range(0..config.n_riders));
        let date = dates[rng.gen_range(0..dates.len())];
        let (o, d) = (rng.gen_range(0..net.len()), rng.gen_range(0..net.len()));
        let (board, alight) = if k < faults.short_trips {
            (10 * 3600, 10 * 3600 + 30)
        } else {
            (21 * 3600, 24 * 3600 + 30 * 60)
        };
        transactions.push(leg(&card, date, board, alight, o, d, &net, &mut rng));
    }
    let malformed_rows = (0..faults.malformed_rows)
        .map(|k| {
            let card = format!("C{:07}", rng.gen_range(0..config.n_riders));
            let date = dates[rng.gen_range(0..dates.len())];
            let (o, d) = (&net.ids[rng.gen_range(0..net.len())], &net.ids[rng.gen_range(0..net.len())]);
            match k % 4 {
                0 => format!("{card},{date},25:61:00,26:10:00,{o},{d},R000"),
                1 => format!("{card},{date},08:00:00,08:20:00,NOSTOP,{d},R000"),
                2 => format!("{card},{date},08:20:00,08:00:00,{o},{d},R000"),
                _ => format!("{card},{date},08:00:00,{o},{d}"),
            }
        })
        .collect();

    Ok(SyntheticCity {
        config: config.clone(),
        network: net,
        centres,
        attributes,
        poi,
        transactions,
        malformed_rows,
        truth: GroundTruth {
            seed,
            sv_driver: Feature::TripFreq.abbreviation(),
            sv_effect: config.sv,
            tv_driver: Feature::SubcenDist.abbreviation(),
            tv_effect: config.tv,
            groups,
            riders,
        },
    })
}

impl SyntheticCity {
    /// The transaction file, malformed rows last.
    pub fn transactions_csv(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_transactions(&self.transactions, &mut buf)?;
        for row in &self.malformed_rows {
            buf.extend_from_slice(row.as_bytes());
            buf.push(b'\n');
        }
        Ok(buf)
    }

    pub fn write_attributes<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["col", "row"];
        header.extend(ATTRIBUTE_COLUMNS.iter().map(|f| f.abbreviation()));
        w.write_record(header)?;
        for (cell, vals) in &self.attributes {
            let mut rec = vec![cell.col.to_string(), cell.row.to_string()];
            rec.extend(vals.iter().map(|v| v.map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(rec)?;
        }
        w.flush().map_err(|e| Error::io("<cell attributes>", e))
    }

    pub fn write_poi<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["col", "row", "category", "count"])?;
        for (cell, counts) in &self.poi {
            for (cat, n) in counts {
                w.write_record([cell.col.to_string(), cell.row.to_string(), cat.clone(), n.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<poi>", e))
    }

    /// Writes every input file plus `ground_truth.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<CityFiles> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = CityFiles {
            transactions: dir.join("transactions.csv"),
            stops: dir.join("stops.csv"),
            stop_routes: dir.join("stop_routes.csv"),
            centres: dir.join("centres.csv"),
            cell_attributes: dir.join("cell_attributes.csv"),
            poi: dir.join("poi.csv"),
            ground_truth: dir.join("ground_truth.json"),
        };
        let create = |p: &Path| File::create(p).map_err(|e| Error::io(p, e));
        std::fs::write(&files.transactions, self.transactions_csv()?).map_err(|e| Error::io(&files.transactions, e))?;
        self.network.write_stops(create(&files.stops)?)?;
        self.network.write_stop_routes(create(&files.stop_routes)?)?;
        self.centres.write_csv(create(&files.centres)?)?;
        self.write_attributes(create(&files.cell_attributes)?)?;
        self.write_poi(create(&files.poi)?)?;
        let mut gt = create(&files.ground_truth)?;
        serde_json::to_writer_pretty(&mut gt, &self.truth)?;
        gt.write_all(b"\n").map_err(|e| Error::io(&files.ground_truth, e))?;
        Ok(files)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_riders: 64,
            n_stops: 400,
            grid: GridSpec {
                origin: Point::new(0.0, 0.0),
                cell_size: 500.0,
                n_cols: 12,
                n_rows: 10,
            },
            ..SynthConfig::default()
        }
    }

    #[test]
    fn nearest_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point> = (0..300)
            .map(|_| Point::new(rng.gen_range(0.0..3000.0), rng.gen_range(0.0..2000.0)))
            .collect();
        let n = pts.len();
        let net = StopNetwork::new((0..n).map(|i| i.to_string()).collect(), pts.clone(), vec![vec!["r".into()]; n], 170.0).unwrap();
        for _ in 0..500 {
            let q = Point::new(rng.gen_range(0.0..3000.0), rng.gen_range(0.0..2000.0));
            let want = (0..n)
                .min_by(|&a, &b| q.distance(&pts[a]).total_cmp(&q.distance(&pts[b])).then(a.cmp(&b)))
                .unwrap();
            assert_eq!(net.nearest(q), want);
        }
    }

    #[test]
    fn too_many_stops_is_a_config_error() {
        let c = SynthConfig { n_stops: 100_000, ..small() };
        assert!(matches!(generate_city(&c), Err(Error::Config(_))));
    }

    #[test]
    fn calibration_cases() {
        let f = disc_distance_factors();
        assert!((f.0 - 4.0 / 15.0 * (2f64.powf(2.5) - 2.0)).abs() < 5e-3);
        assert_eq!(calibrate_radius(500.0, 4, 1.0, f), 0.0);
        let r = calibrate_radius(1000.0, 10, 0.0, f);
        assert!((r * f.1 - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_city(&small()).unwrap();
        let b = generate_city(&small()).unwrap();
        assert_eq!(a.transactions_csv().unwrap(), b.transactions_csv().unwrap());
        assert_eq!(a.truth, b.truth);
        let c = generate_city(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.transactions_csv().unwrap(), c.transactions_csv().unwrap());
    }

    #[test]
    fn groups_fill_home_cells() {
        let city = generate_city(&small()).unwrap();
        assert_eq!(city.truth.groups.len(), 4);
        assert_eq!(city.truth.riders.len(), 64);
        for g in &city.truth.groups {
            assert_ne!(g.home_cell, g.work_cell);
        }
        for r in &city.truth.riders {
            assert!(r.morning_trips >= 4 && r.evening_trips >= 4);
        }
    }
}
