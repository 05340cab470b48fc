//! Configuration-driven run from raw taps to explained models.
//!
//! Every stage writes its artifacts under the output directory and reports
//! how many records it received, emitted and dropped (by reason) in
//! `manifest.json`. Wall-clock timings go to `profile.json` only, so that the
//! manifest of a rerun is byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::boost::{cross_validate, fit_traced, BoostParams, Dataset};
use crate::error::{Error, Result};
use crate::explain::{dependence_data, relative_importance, ShapMatrix};
use crate::features::{
    build_feature_table, read_stop_routes, write_feature_table, CellInputs, CentreSet, Feature, FeatureTable,
};
use crate::fusion::{aggregate_grid, anchor_records, write_aggregates, GridAggregate, GridSpec, Role};
use crate::geom::Equirectangular;
use crate::geostats::{morans_i_test, MoranReport, SpatialField};
use crate::ingest::{
    format_clock, parse_transactions, reconstruct, DurationBounds, IngestConfig, Period, PeriodTripSet,
    PeriodWindow, PeriodWindows, StopCoordinates, StopRegistry,
};
use crate::variability::{compute_records, write_rider_dump, VariabilityRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Sv,
    Tv,
}

impl Target {
    pub const ALL: [Target; 2] = [Target::Sv, Target::Tv];

    pub fn as_str(&self) -> &'static str {
        match self {
            Target::Sv => "sv",
            Target::Tv => "tv",
        }
    }

    pub fn of(&self, agg: &GridAggregate) -> f64 {
        match self {
            Target::Sv => agg.mean_sv,
            Target::Tv => agg.mean_tv,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One of the (target, period, role) regression slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct ModelSpec {
    pub target: Target,
    pub period: Period,
    pub role: Role,
}

impl ModelSpec {
    pub fn name(&self) -> String {
        format!("{}_{}_{}", self.target, self.period, self.role)
    }
}

/// Pipeline stages in execution order; a run stops after the requested one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Variability,
    Fuse,
    Moran,
    Features,
    Fit,
    Explain,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Variability => "variability",
            Stage::Fuse => "fuse",
            Stage::Moran => "moran",
            Stage::Features => "features",
            Stage::Fit => "fit",
            Stage::Explain => "explain",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ingest" => Stage::Ingest,
            "variability" => Stage::Variability,
            "fuse" => Stage::Fuse,
            "moran" => Stage::Moran,
            "features" => Stage::Features,
            "fit" => Stage::Fit,
            "explain" | "run-all" => Stage::Explain,
            other => return Err(Error::config(format!("unknown stage `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordinateMode {
    #[default]
    Planar,
    Lonlat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub transactions: PathBuf,
    pub stops: PathBuf,
    #[serde(default)]
    pub coordinates: CoordinateMode,
    /// `[lat, lon]` of the projection reference, required for `lonlat`.
    #[serde(default)]
    pub reference: Option<[f64; 2]>,
    /// `stop_id,route_id`; derived from the transactions when absent.
    #[serde(default)]
    pub stop_routes: Option<PathBuf>,
    pub centres: PathBuf,
    #[serde(default)]
    pub cell_attributes: Option<PathBuf>,
    #[serde(default)]
    pub poi: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSettings {
    pub transfer_threshold_min: u32,
    pub min_duration_s: u32,
    pub max_duration_s: u32,
    pub morning: PeriodWindow,
    pub evening: PeriodWindow,
    pub min_trips: usize,
}

impl Default for IngestSettings {
    fn default() -> Self {
        let d = IngestConfig::default();
        IngestSettings {
            transfer_threshold_min: d.transfer_threshold_s / 60,
            min_duration_s: d.durations.min_s,
            max_duration_s: d.durations.max_s,
            morning: d.windows.morning,
            evening: d.windows.evening,
            min_trips: d.min_trips,
        }
    }
}

impl IngestSettings {
    pub fn to_config(&self) -> Result<IngestConfig> {
        if self.min_duration_s > self.max_duration_s {
            return Err(Error::config("min_duration_s exceeds max_duration_s"));
        }
        if self.min_trips < 2 {
            return Err(Error::config("min_trips must be at least 2 for pairwise indices"));
        }
        Ok(IngestConfig {
            transfer_threshold_s: self.transfer_threshold_min * 60,
            durations: DurationBounds {
                min_s: self.min_duration_s,
                max_s: self.max_duration_s,
            },
            windows: PeriodWindows::new(self.morning, self.evening)?,
            min_trips: self.min_trips,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSettings {
    pub min_individuals: usize,
}

impl Default for FusionSettings {
    fn default() -> Self {
        FusionSettings { min_individuals: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoranSettings {
    pub permutations: usize,
    pub seed: u64,
}

impl Default for MoranSettings {
    fn default() -> Self {
        MoranSettings {
            permutations: 999,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationSettings {
    /// k-fold RMSE is reported when at least 2.
    pub cv_folds: usize,
    pub cv_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSettings {
    /// Dependence data is written for this many top-ranked features.
    pub dependence_top: usize,
    /// Extra features (by abbreviation) always given dependence data.
    pub dependence_features: Vec<String>,
    pub svg: bool,
}

impl Default for ExplainSettings {
    fn default() -> Self {
        ExplainSettings {
            dependence_top: 5,
            dependence_features: Vec::new(),
            svg: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSelection {
    pub targets: Vec<Target>,
    pub periods: Vec<Period>,
    pub roles: Vec<Role>,
}

impl Default for ModelSelection {
    fn default() -> Self {
        ModelSelection {
            targets: Target::ALL.to_vec(),
            periods: Period::ALL.to_vec(),
            roles: Role::ALL.to_vec(),
        }
    }
}

impl ModelSelection {
    pub fn specs(&self) -> Vec<ModelSpec> {
        let mut out = BTreeSet::new();
        for &target in &self.targets {
            for &period in &self.periods {
                for &role in &self.roles {
                    out.insert(ModelSpec { target, period, role });
                }
            }
        }
        out.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSettings {
    #[serde(skip_serializing)]
    pub dir: PathBuf,
    pub rider_dump: bool,
    pub trip_dump: bool,
}

impl Default for OutputSettings {
    fn default() -> Self {
        OutputSettings {
            dir: PathBuf::from("out"),
            rider_dump: true,
            trip_dump: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub inputs: Inputs,
    pub grid: GridSpec,
    #[serde(default)]
    pub ingest: IngestSettings,
    #[serde(default)]
    pub fusion: FusionSettings,
    #[serde(default)]
    pub moran: MoranSettings,
    #[serde(default)]
    pub boost: BoostParams,
    #[serde(default)]
    pub validation: ValidationSettings,
    #[serde(default)]
    pub explain: ExplainSettings,
    #[serde(default)]
    pub models: ModelSelection,
    #[serde(default)]
    pub output: OutputSettings,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("pipeline config: {e}")))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    /// Reads a TOML config; relative paths are taken from the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let i = &mut self.inputs;
        fix(&mut i.transactions);
        fix(&mut i.stops);
        fix(&mut i.centres);
        for p in [&mut i.stop_routes, &mut i.cell_attributes, &mut i.poi].into_iter().flatten() {
            fix(p);
        }
        fix(&mut self.output.dir);
    }

    pub fn to_toml(&self) -> Result<String> {
        let mut doc = toml::Table::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        if let Some(toml::Value::Table(out)) = doc.get_mut("output") {
            out.insert("dir".into(), toml::Value::String(self.output.dir.display().to_string()));
        }
        toml::to_string(&doc).map_err(|e| Error::config(e.to_string()))
    }

    /// Checks everything that can be checked before reading any data.
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.ingest.to_config()?;
        self.boost.validate()?;
        if self.fusion.min_individuals == 0 {
            return Err(Error::config("min_individuals must be at least 1"));
        }
        if self.inputs.coordinates == CoordinateMode::Lonlat && self.inputs.reference.is_none() {
            return Err(Error::config("lonlat stop coordinates need `reference = [lat, lon]`"));
        }
        let i = &self.inputs;
        let required = [
            ("transactions", Some(&i.transactions)),
            ("stop registry", Some(&i.stops)),
            ("centres", Some(&i.centres)),
            ("stop routes", i.stop_routes.as_ref()),
            ("cell attributes", i.cell_attributes.as_ref()),
            ("poi", i.poi.as_ref()),
        ];
        for (what, path) in required {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(Error::config(format!("{what} file {} does not exist", p.display())));
                }
            }
        }
        for name in &self.explain.dependence_features {
            if Feature::from_abbreviation(name).is_none() {
                return Err(Error::config(format!("unknown feature `{name}` in dependence_features")));
            }
        }
        if self.models.specs().is_empty() {
            return Err(Error::config("model selection is empty"));
        }
        Ok(())
    }
}

/// Records in, out, and dropped by reason, for one processing step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub stage: &'static str,
    pub unit: &'static str,
    pub input: usize,
    pub output: usize,
    pub dropped: BTreeMap<&'static str, usize>,
}

impl StageRecord {
    /// True when `input == output + sum(dropped)`.
    pub fn balances(&self) -> bool {
        self.input == self.output + self.dropped.values().sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Artifact {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSummary {
    pub name: String,
    pub spec: ModelSpec,
    pub rows: usize,
    pub trees: usize,
    pub train_rmse: f64,
    pub cv_rmse: Option<Vec<f64>>,
    pub top_features: Vec<&'static str>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub last_stage: &'static str,
    pub config: PipelineConfig,
    pub notes: BTreeMap<&'static str, &'static str>,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<Artifact>,
    pub models: Vec<ModelSummary>,
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Profile {
    /// Stage name and wall time in milliseconds, in execution order.
    pub timings_ms: Vec<(String, f64)>,
    pub threads: usize,
}

const NOTES: [(&str, &str); 4] = [
    (
        "boost_hyperparameters",
        "implementation defaults (200 trees, depth 4, eta 0.1, lambda 1, gamma 0, subsample 1) unless overridden; not calibrated to any published model",
    ),
    ("shap", "path-dependent TreeSHAP using training covers"),
    ("moran_weights", "inverse distance between cell centroids, no cutoff, not row-standardised"),
    ("tripfreq", "number of the rider's trips in the period over the whole observation window"),
];

struct Run<'a> {
    config: &'a PipelineConfig,
    out: PathBuf,
    stages: Vec<StageRecord>,
    artifacts: Vec<Artifact>,
    models: Vec<ModelSummary>,
    skipped: Vec<String>,
    profile: Profile,
    clock: Instant,
}

fn in_stage<T>(stage: &'static str, processed: impl FnOnce() -> String, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage,
        processed: processed(),
        source: Box::new(e),
    })
}

impl Run<'_> {
    fn record(&mut self, rec: StageRecord) {
        let dropped: Vec<String> = rec.dropped.iter().map(|(k, v)| format!("{k}={v}")).collect();
        info!(
            "stage={} unit={} in={} out={} dropped=[{}]",
            rec.stage,
            rec.unit,
            rec.input,
            rec.output,
            dropped.join(",")
        );
        self.stages.push(rec);
    }

    fn lap(&mut self, stage: &str) {
        let ms = self.clock.elapsed().as_secs_f64() * 1000.0;
        info!("stage={stage} wall_ms={ms:.1}");
        self.profile.timings_ms.push((stage.to_owned(), ms));
        self.clock = Instant::now();
    }

    fn create(&mut self, rel: &str, rows: usize) -> Result<BufWriter<File>> {
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.artifacts.push(Artifact {
            path: rel.to_owned(),
            rows,
        });
        Ok(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?))
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn dropped<const N: usize>(pairs: [(&'static str, usize); N]) -> BTreeMap<&'static str, usize> {
    pairs.into_iter().collect()
}

fn write_trip_dump<W: Write>(sets: &[PeriodTripSet], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "card_id",
        "period",
        "date",
        "start",
        "end",
        "origin_stop",
        "destination_stop",
        "legs",
    ])?;
    for s in sets {
        for t in &s.trips {
            w.write_record([
                t.card_id.clone(),
                s.period.to_string(),
                t.date.to_string(),
                format_clock(t.start_s),
                format_clock(t.end_s),
                t.origin_stop.clone(),
                t.destination_stop.clone(),
                t.leg_count.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<trip dump>", e))
}

/// Slice of the aggregates for one period and role.
fn slice(aggs: &[GridAggregate], period: Period, role: Role) -> Vec<GridAggregate> {
    aggs.iter()
        .filter(|a| a.period == period && a.role == role)
        .cloned()
        .collect()
}

/// Dataset for one model: feature rows aligned with the target of the same
/// cell.
pub fn model_dataset(table: &FeatureTable, aggs: &[GridAggregate], target: Target) -> Result<Dataset> {
    let by_cell: BTreeMap<_, _> = aggs.iter().map(|a| (a.cell, a)).collect();
    let mut rows = Vec::with_capacity(table.rows.len());
    let mut y = Vec::with_capacity(table.rows.len());
    for (cell, v) in &table.rows {
        let agg = by_cell
            .get(cell)
            .ok_or_else(|| Error::UndefinedInput(format!("feature row for {cell} has no aggregate")))?;
        rows.push(v.to_row());
        y.push(target.of(agg));
    }
    Dataset::new(rows, y)
}

pub const MIN_MODEL_ROWS: usize = 20;

/// Runs every stage up to and including `until`.
pub fn run_pipeline(config: &PipelineConfig, until: Stage) -> Result<Manifest> {
    in_stage("config", String::new, config.validate())?;
    let ingest_cfg = config.ingest.to_config()?;
    let out = config.output.dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut run = Run {
        config,
        out,
        stages: Vec::new(),
        artifacts: Vec::new(),
        models: Vec::new(),
        skipped: Vec::new(),
        profile: Profile {
            threads: rayon::current_num_threads(),
            ..Profile::default()
        },
        clock: Instant::now(),
    };

    // Ingest.
    let coords = match (config.inputs.coordinates, config.inputs.reference) {
        (CoordinateMode::Lonlat, Some([lat, lon])) => StopCoordinates::LonLat(Equirectangular {
            reference_lat: lat,
            reference_lon: lon,
        }),
        _ => StopCoordinates::Planar,
    };
    let registry = in_stage(
        "load",
        || "0 stops".into(),
        open(&config.inputs.stops).and_then(|f| StopRegistry::from_csv(f, coords)),
    )?;
    let parsed = in_stage(
        "parse",
        || format!("{} stops", registry.len()),
        open(&config.inputs.transactions).and_then(|f| parse_transactions(f, &registry)),
    )?;
    let sk = parsed.skipped;
    run.record(StageRecord {
        stage: "parse",
        unit: "rows",
        input: parsed.rows_read(),
        output: parsed.transactions.len(),
        dropped: dropped([
            ("malformed", sk.malformed),
            ("time_order", sk.time_order),
            ("unknown_stop", sk.unknown_stop),
        ]),
    });
    run.lap("parse");

    let derived_routes = config.inputs.stop_routes.is_none().then(|| {
        let mut m: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for t in &parsed.transactions {
            m.entry(t.board_stop.clone()).or_default().insert(t.route.clone());
        }
        m
    });

    let n_tx = parsed.transactions.len();
    let recon = in_stage(
        "reconstruct",
        || format!("{n_tx} transactions"),
        reconstruct(parsed.transactions, &registry, &ingest_cfg),
    )?;
    let c = recon.counts;
    run.record(StageRecord {
        stage: "chain",
        unit: "legs",
        input: c.legs,
        output: c.chained_trips,
        dropped: dropped([("merged_into_trips", c.legs - c.chained_trips)]),
    });
    run.record(StageRecord {
        stage: "duration_filter",
        unit: "trips",
        input: c.chained_trips,
        output: c.retained_trips,
        dropped: dropped([("too_short", c.filtered.too_short), ("too_long", c.filtered.too_long)]),
    });
    run.record(StageRecord {
        stage: "period_select",
        unit: "trips",
        input: c.retained_trips,
        output: c.period_trips,
        dropped: dropped([
            ("outside_windows", c.period.trips_outside_windows),
            ("rider_below_min_trips", c.period.trips_below_min),
        ]),
    });
    info!(
        "stage=reconstruct cards={} card_days={} overlap_anomalies={} rider_periods={}",
        c.cards,
        c.card_days,
        c.overlap_anomalies,
        recon.sets.len()
    );
    if config.output.trip_dump {
        let rows = c.period_trips;
        let w = run.create("trips.csv", rows)?;
        write_trip_dump(&recon.sets, w)?;
    }
    run.lap("reconstruct");
    if until == Stage::Ingest {
        return finish(run, until);
    }

    // Variability.
    let n_sets = recon.sets.len();
    let records: Vec<VariabilityRecord> = in_stage(
        "variability",
        || format!("{n_sets} rider-periods"),
        compute_records(&recon.sets),
    )?;
    run.record(StageRecord {
        stage: "variability",
        unit: "rider_periods",
        input: n_sets,
        output: records.len(),
        dropped: BTreeMap::new(),
    });
    if config.output.rider_dump {
        let w = run.create("riders.csv", records.len())?;
        write_rider_dump(&records, w)?;
    }
    run.lap("variability");
    if until == Stage::Variability {
        return finish(run, until);
    }

    // Fusion.
    let (anchored, ac) = anchor_records(&recon.sets, &records, &config.grid);
    run.record(StageRecord {
        stage: "anchor",
        unit: "rider_period_roles",
        input: 2 * records.len(),
        output: anchored.len(),
        dropped: dropped([
            ("origin_out_of_extent", ac.origin_out_of_extent),
            ("destination_out_of_extent", ac.destination_out_of_extent),
        ]),
    });
    let agg = aggregate_grid(&anchored, config.fusion.min_individuals);
    run.record(StageRecord {
        stage: "aggregate",
        unit: "rider_period_roles",
        input: anchored.len(),
        output: agg.aggregates.iter().map(|a| a.n_individuals).sum(),
        dropped: dropped([("cell_below_min_individuals", agg.dropped_individuals)]),
    });
    info!(
        "stage=aggregate cells={} dropped_cells={}",
        agg.aggregates.len(),
        agg.dropped_cells
    );
    let w = run.create("grid_aggregates.csv", agg.aggregates.len())?;
    write_aggregates(&agg.aggregates, w)?;
    run.lap("fuse");
    if until == Stage::Fuse {
        return finish(run, until);
    }

    // Global Moran's I of each field, period and role.
    let mut reports = Vec::new();
    for target in Target::ALL {
        for period in Period::ALL {
            for role in Role::ALL {
                let cells = slice(&agg.aggregates, period, role);
                let label = format!("{target}_{period}_{role}");
                let field = SpatialField::new(
                    cells.iter().map(|a| config.grid.centroid(a.cell)).collect(),
                    cells.iter().map(|a| target.of(a)).collect(),
                );
                let test = field.and_then(|f| morans_i_test(&f, config.moran.permutations, config.moran.seed));
                match test {
                    Ok(t) => {
                        info!("stage=moran field={label} n={} i={} p={:?}", t.n, t.morans_i, t.p_value);
                        reports.push(MoranReport::new(target.as_str(), period.as_str(), role.as_str(), &t));
                    }
                    Err(e) => run.skipped.push(format!("moran {label}: {e}")),
                }
            }
        }
    }
    let mut w = run.create("moran_i.json", reports.len())?;
    serde_json::to_writer_pretty(&mut w, &reports)?;
    w.write_all(b"\n").map_err(|e| Error::io("moran_i.json", e))?;
    run.lap("moran");
    if until == Stage::Moran {
        return finish(run, until);
    }

    // Features.
    let mut inputs = CellInputs::default();
    let load_inputs = |inputs: &mut CellInputs| -> Result<CentreSet> {
        if let Some(p) = &config.inputs.cell_attributes {
            inputs.read_attributes(open(p)?)?;
        }
        if let Some(p) = &config.inputs.poi {
            inputs.read_poi(open(p)?)?;
        }
        let routes = match (&config.inputs.stop_routes, &derived_routes) {
            (Some(p), _) => read_stop_routes(open(p)?)?,
            (None, Some(d)) => d.clone(),
            (None, None) => BTreeMap::new(),
        };
        inputs.index_stops(&registry, &routes, &config.grid);
        CentreSet::from_csv(open(&config.inputs.centres)?)
    };
    let centres = in_stage(
        "features",
        || format!("{} aggregates", agg.aggregates.len()),
        load_inputs(&mut inputs),
    )?;
    let mut tables: BTreeMap<(Period, Role), (FeatureTable, Vec<GridAggregate>)> = BTreeMap::new();
    let (mut rows_in, mut rows_out, mut no_inputs) = (0, 0, 0);
    for period in Period::ALL {
        for role in Role::ALL {
            let cells = slice(&agg.aggregates, period, role);
            let table = in_stage(
                "features",
                || format!("{rows_in} cells"),
                build_feature_table(&cells, &inputs, &centres, &config.grid),
            )?;
            rows_in += cells.len();
            rows_out += table.rows.len();
            no_inputs += table.dropped;
            let w = run.create(&format!("features/{period}_{role}.csv"), table.rows.len())?;
            write_feature_table(&table, w)?;
            tables.insert((period, role), (table, cells));
        }
    }
    run.record(StageRecord {
        stage: "features",
        unit: "cells",
        input: rows_in,
        output: rows_out,
        dropped: dropped([("no_cell_inputs", no_inputs)]),
    });
    run.lap("features");
    if until == Stage::Features {
        return finish(run, until);
    }

    // Models.
    let specs = config.models.specs();
    let mut fitted = Vec::new();
    for spec in &specs {
        let name = spec.name();
        let (table, cells) = &tables[&(spec.period, spec.role)];
        let data = in_stage("fit", || format!("{} models", fitted.len()), model_dataset(table, cells, spec.target))?;
        if data.n_rows() < MIN_MODEL_ROWS {
            return Err(Error::Stage {
                stage: "fit",
                processed: format!("{} models", fitted.len()),
                source: Box::new(Error::UndefinedInput(format!(
                    "model {name} has {} rows, at least {MIN_MODEL_ROWS} are needed",
                    data.n_rows()
                ))),
            });
        }
        let (model, trace) = in_stage("fit", || format!("{} models", fitted.len()), fit_traced(&data, &config.boost))?;
        let cv = if config.validation.cv_folds >= 2 {
            Some(in_stage(
                "fit",
                || format!("{} models", fitted.len()),
                cross_validate(&data, &config.boost, config.validation.cv_folds, config.validation.cv_seed),
            )?)
        } else {
            None
        };
        info!(
            "stage=fit model={name} rows={} trees={} train_rmse={}",
            data.n_rows(),
            model.trees.len(),
            trace.final_rmse()
        );
        let mut notes: Vec<(&str, &str)> = NOTES.to_vec();
        let target_note = format!("mean {} of the cell's riders", spec.target);
        notes.push(("target", &target_note));
        let w = run.create(&format!("models/{name}.json"), model.trees.len())?;
        model.write_json(w, &notes)?;
        run.models.push(ModelSummary {
            name: name.clone(),
            spec: *spec,
            rows: data.n_rows(),
            trees: model.trees.len(),
            train_rmse: trace.final_rmse(),
            cv_rmse: cv,
            top_features: Vec::new(),
        });
        fitted.push((*spec, name, model, data));
    }
    run.record(StageRecord {
        stage: "fit",
        unit: "models",
        input: specs.len(),
        output: fitted.len(),
        dropped: BTreeMap::new(),
    });
    run.lap("fit");
    if until == Stage::Fit {
        return finish(run, until);
    }

    // Explanations.
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    let extra: Vec<Feature> = config
        .explain
        .dependence_features
        .iter()
        .filter_map(|s| Feature::from_abbreviation(s))
        .collect();
    for (k, (_, name, model, data)) in fitted.iter().enumerate() {
        let processed = || format!("{k} models");
        let shap = in_stage("explain", processed, ShapMatrix::compute(model, data))?;
        let ri = match relative_importance(&shap) {
            Ok(ri) => ri,
            Err(Error::DegenerateModel) => {
                run.skipped.push(format!("explain {name}: model has no splits"));
                vec![0.0; model.n_features]
            }
            Err(e) => return in_stage("explain", processed, Err(e)),
        };
        let mut w = run.create(&format!("importance/{name}.csv"), Feature::ALL.len())?;
        let mut cw = csv::Writer::from_writer(&mut w);
        cw.write_record(["feature", "abbreviation", "ri_percent"])?;
        for f in Feature::ALL {
            cw.write_record([f.label(), f.abbreviation(), &ri[f.index()].to_string()])?;
        }
        cw.flush().map_err(|e| Error::io("importance", e))?;
        drop(cw);
        w.flush().map_err(|e| Error::io("importance", e))?;

        let mut ranked: Vec<Feature> = Feature::ALL.to_vec();
        ranked.sort_by(|a, b| ri[b.index()].total_cmp(&ri[a.index()]).then(a.index().cmp(&b.index())));
        let top: Vec<Feature> = ranked
            .iter()
            .copied()
            .take(config.explain.dependence_top)
            .filter(|f| ri[f.index()] > 0.0)
            .collect();
        let mut chosen: BTreeSet<Feature> = top.iter().copied().collect();
        chosen.extend(extra.iter().copied());
        for f in chosen {
            let dep = in_stage("explain", processed, dependence_data(&shap, data, f.index()))?;
            let w = run.create(&format!("dependence/{name}/{}.csv", f.abbreviation()), dep.points.len())?;
            dep.write_csv(w)?;
            if config.explain.svg {
                let mut w = run.create(&format!("dependence/{name}/{}.svg", f.abbreviation()), dep.points.len())?;
                w.write_all(dep.to_svg(f.label()).as_bytes())
                    .map_err(|e| Error::io("dependence svg", e))?;
            }
        }
        run.models[k].top_features = ranked.iter().take(3).map(|f| f.abbreviation()).collect();
        columns.push((name.clone(), ri));
    }
    let mut w = run.create("importance_table.csv", Feature::ALL.len())?;
    let mut cw = csv::Writer::from_writer(&mut w);
    let mut header = vec!["feature".to_owned(), "abbreviation".to_owned()];
    header.extend(columns.iter().map(|(n, _)| n.clone()));
    cw.write_record(&header)?;
    for f in Feature::ALL {
        let mut rec = vec![f.label().to_owned(), f.abbreviation().to_owned()];
        rec.extend(columns.iter().map(|(_, ri)| ri[f.index()].to_string()));
        cw.write_record(&rec)?;
    }
    cw.flush().map_err(|e| Error::io("importance_table.csv", e))?;
    drop(cw);
    w.flush().map_err(|e| Error::io("importance_table.csv", e))?;
    run.lap("explain");
    finish(run, until)
}

fn finish(run: Run<'_>, until: Stage) -> Result<Manifest> {
    let manifest = Manifest {
        tool: "busvar",
        version: env!("CARGO_PKG_VERSION"),
        last_stage: until.as_str(),
        config: run.config.clone(),
        notes: NOTES.into_iter().collect(),
        stages: run.stages,
        artifacts: run.artifacts,
        models: run.models,
        skipped: run.skipped,
    };
    write_json(&run.out.join("manifest.json"), &manifest)?;
    write_json(&run.out.join("profile.json"), &run.profile)?;
    Ok(manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

/// Writes a synthetic city into `dir` together with a `pipeline.toml` that
/// runs on it, and returns that config.
pub fn write_synthetic_inputs(city: &crate::synth::SyntheticCity, dir: &Path) -> Result<PipelineConfig> {
    let files = city.write(dir)?;
    let rel = |p: &Path| PathBuf::from(p.file_name().expect("file paths"));
    let cfg = PipelineConfig {
        inputs: Inputs {
            transactions: rel(&files.transactions),
            stops: rel(&files.stops),
            coordinates: CoordinateMode::Planar,
            reference: None,
            stop_routes: Some(rel(&files.stop_routes)),
            centres: rel(&files.centres),
            cell_attributes: Some(rel(&files.cell_attributes)),
            poi: Some(rel(&files.poi)),
        },
        grid: city.config.grid,
        ingest: IngestSettings {
            morning: city.config.morning,
            evening: city.config.evening,
            ..IngestSettings::default()
        },
        fusion: FusionSettings::default(),
        moran: MoranSettings::default(),
        boost: BoostParams::default(),
        validation: ValidationSettings::default(),
        explain: ExplainSettings {
            dependence_features: vec![
                Feature::TripFreq.abbreviation().to_owned(),
                Feature::SubcenDist.abbreviation().to_owned(),
            ],
            ..ExplainSettings::default()
        },
        models: ModelSelection::default(),
        output: OutputSettings {
            dir: PathBuf::from("out"),
            ..OutputSettings::default()
        },
    };
    let path = dir.join("pipeline.toml");
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
    PipelineConfig::from_file(&path)
}
