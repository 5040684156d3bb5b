//! Statistical evaluation harness: the four mobility distributions, their
//! Jensen-Shannon divergences between a real and a generated dataset, and
//! attribute-slice ("multiscale") reports.
//!
//! Metric definitions, applied identically to both datasets:
//! - **SD** — great-circle distance between consecutive diary points,
//!   log-binned. Recorded leg distances are deliberately ignored here: real
//!   and generated legs record distance with different provenance, so a
//!   shared geometric definition is the only fair comparison.
//! - **SI** — time interval in minutes between consecutive arrivals,
//!   fixed-width bins.
//! - **ST-LOC** — categorical distribution over (origin cell, destination
//!   cell, departure hour) keys of every leg between consecutive points.
//! - **DailyLoc** — distinct destination grid cells per person-day,
//!   integer-binned; recorded zero-trip days count as 0.

use std::collections::{BTreeMap, BTreeSet};

use chrono::Datelike;
use serde::{Deserialize, Serialize};

use crate::domain::{AttributeDim, Dataset};
use crate::geo::{GeoPoint, GridProjection};
use crate::num::Real;

/// The four evaluation metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Sd,
    Si,
    StLoc,
    DailyLoc,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Sd, Metric::Si, Metric::StLoc, Metric::DailyLoc];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Sd => "sd",
            Metric::Si => "si",
            Metric::StLoc => "stloc",
            Metric::DailyLoc => "dailyloc",
        }
    }
}

/// Restricts which person-days feed a histogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DayFilter {
    #[default]
    All,
    Weekday,
    Weekend,
}

impl DayFilter {
    pub fn accepts(&self, date: chrono::NaiveDate) -> bool {
        let weekend = matches!(date.weekday(), chrono::Weekday::Sat | chrono::Weekday::Sun);
        match self {
            DayFilter::All => true,
            DayFilter::Weekday => !weekend,
            DayFilter::Weekend => weekend,
        }
    }
}

/// Tunable bin parameters; the resolved descriptors are recorded in every
/// report so a reported JSD is always auditable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinningConfig {
    /// Number of log-spaced SD bins between `sd_min_m` and `sd_max_m`
    /// (underflow and overflow bins are added on top).
    pub sd_bins: usize,
    pub sd_min_m: f64,
    pub sd_max_m: f64,
    /// Width of one SI bin in minutes; bins cover a full day.
    pub si_bin_minutes: u16,
    /// Side length of a square grid cell, meters.
    pub cell_size_m: f64,
    /// DailyLoc values above this land in the overflow bin.
    pub dailyloc_max: u32,
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self {
            sd_bins: 32,
            sd_min_m: 100.0,
            sd_max_m: 100_000.0,
            si_bin_minutes: 30,
            cell_size_m: 1000.0,
            dailyloc_max: 15,
        }
    }
}

/// A fully resolved binning descriptor. Two histograms are comparable iff
/// their descriptors are equal, which for OD grids pins both datasets to the
/// same projection center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Binning {
    /// Log-spaced distance bins plus underflow/overflow.
    LogDistance { bin_count: usize, min_m: f64, max_m: f64 },
    /// Fixed-width time-interval bins covering one day.
    TimeInterval { bin_minutes: u16, bin_count: usize },
    /// Integer bins `0..=max_value` plus one overflow bin.
    IntegerCount { max_value: u32 },
    /// Categorical origin-destination-hour keys on a shared grid.
    CategoricalOd { cell_size_m: f64, center_lat: f64, center_lon: f64 },
}

impl Binning {
    /// Number of dense bins, or `None` for categorical binnings whose
    /// support is data-dependent.
    pub fn dense_len(&self) -> Option<usize> {
        match self {
            Binning::LogDistance { bin_count, .. } => Some(bin_count + 2),
            Binning::TimeInterval { bin_count, .. } => Some(*bin_count),
            Binning::IntegerCount { max_value } => Some(*max_value as usize + 2),
            Binning::CategoricalOd { .. } => None,
        }
    }

    /// Lower/upper edges of dense bin `i`, for plot emission. The underflow
    /// bin starts at 0 and the overflow bin is open-ended.
    pub fn dense_edges(&self, i: usize) -> Option<(f64, f64)> {
        match self {
            Binning::LogDistance { bin_count, min_m, max_m } => {
                let n = *bin_count;
                let ratio = (max_m / min_m).powf(1.0 / n as f64);
                match i {
                    0 => Some((0.0, *min_m)),
                    j if j <= n => {
                        Some((min_m * ratio.powi(j as i32 - 1), min_m * ratio.powi(j as i32)))
                    }
                    j if j == n + 1 => Some((*max_m, f64::INFINITY)),
                    _ => None,
                }
            }
            Binning::TimeInterval { bin_minutes, bin_count } => {
                if i < *bin_count {
                    let w = f64::from(*bin_minutes);
                    Some((i as f64 * w, (i + 1) as f64 * w))
                } else {
                    None
                }
            }
            Binning::IntegerCount { max_value } => {
                let max = *max_value as usize;
                match i {
                    j if j <= max => Some((j as f64, j as f64 + 1.0)),
                    j if j == max + 1 => Some((max as f64 + 1.0, f64::INFINITY)),
                    _ => None,
                }
            }
            Binning::CategoricalOd { .. } => None,
        }
    }

    /// Dense bin index for a trip distance; only meaningful (and only
    /// called) on the log-distance layout. Public because cohort statistics
    /// reuse the evaluation distance bands.
    pub fn log_distance_index(&self, d: f64) -> usize {
        let Binning::LogDistance { bin_count, min_m, max_m } = self else {
            unreachable!("log-distance index on non-distance binning")
        };
        let n = *bin_count;
        if d < *min_m {
            return 0;
        }
        if d >= *max_m {
            return n + 1;
        }
        let step = (max_m / min_m).ln() / n as f64;
        let idx = ((d / min_m).ln() / step).floor() as usize;
        idx.min(n - 1) + 1
    }

    fn time_interval_index(&self, minutes: u16) -> usize {
        let Binning::TimeInterval { bin_minutes, bin_count } = self else {
            unreachable!("time-interval index on non-interval binning")
        };
        (usize::from(minutes) / usize::from(*bin_minutes)).min(bin_count - 1)
    }

    fn integer_count_index(&self, v: u32) -> usize {
        let Binning::IntegerCount { max_value } = self else {
            unreachable!("integer-count index on non-count binning")
        };
        v.min(max_value + 1) as usize
    }

    fn projection(&self) -> GridProjection {
        let Binning::CategoricalOd { cell_size_m, center_lat, center_lon } = self else {
            unreachable!("projection on non-OD binning")
        };
        GridProjection::new(GeoPoint::new(*center_lat, *center_lon), *cell_size_m)
    }
}

/// The four metric descriptors sharing one config and one grid center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBinnings {
    pub sd: Binning,
    pub si: Binning,
    pub stloc: Binning,
    pub dailyloc: Binning,
}

impl MetricBinnings {
    pub fn new(cfg: &BinningConfig, grid_center: GeoPoint) -> Self {
        let minutes_per_day = usize::from(crate::domain::MINUTES_PER_DAY);
        Self {
            sd: Binning::LogDistance {
                bin_count: cfg.sd_bins,
                min_m: cfg.sd_min_m,
                max_m: cfg.sd_max_m,
            },
            si: Binning::TimeInterval {
                bin_minutes: cfg.si_bin_minutes,
                bin_count: minutes_per_day.div_ceil(usize::from(cfg.si_bin_minutes)),
            },
            stloc: Binning::CategoricalOd {
                cell_size_m: cfg.cell_size_m,
                center_lat: grid_center.lat,
                center_lon: grid_center.lon,
            },
            dailyloc: Binning::IntegerCount { max_value: cfg.dailyloc_max },
        }
    }

    pub fn for_metric(&self, metric: Metric) -> &Binning {
        match metric {
            Metric::Sd => &self.sd,
            Metric::Si => &self.si,
            Metric::StLoc => &self.stloc,
            Metric::DailyLoc => &self.dailyloc,
        }
    }

    /// Grid projection shared by the ST-LOC and DailyLoc metrics.
    pub fn grid(&self) -> GridProjection {
        self.stloc.projection()
    }
}

/// Bin counts: a dense vector for fixed binnings, a keyed map for
/// categorical ones. Categorical keys are canonical strings
/// `"ox,oy>dx,dy@h"` so serialization and ordering are deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Counts {
    Dense(Vec<f64>),
    Categorical(BTreeMap<String, f64>),
}

/// An empirical distribution over a binning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub binning: Binning,
    pub counts: Counts,
    pub total: f64,
}

impl Histogram {
    pub fn new_dense(binning: Binning) -> Self {
        let len = binning.dense_len().expect("dense binning");
        Self { binning, counts: Counts::Dense(vec![0.0; len]), total: 0.0 }
    }

    pub fn new_categorical(binning: Binning) -> Self {
        Self { binning, counts: Counts::Categorical(BTreeMap::new()), total: 0.0 }
    }

    fn add_dense(&mut self, idx: usize) {
        let Counts::Dense(v) = &mut self.counts else {
            unreachable!("dense add on categorical histogram")
        };
        v[idx] += 1.0;
        self.total += 1.0;
    }

    fn add_key(&mut self, key: String) {
        let Counts::Categorical(m) = &mut self.counts else {
            unreachable!("categorical add on dense histogram")
        };
        *m.entry(key).or_insert(0.0) += 1.0;
        self.total += 1.0;
    }

    /// Number of recorded samples.
    pub fn sample_count(&self) -> u64 {
        self.total.round() as u64
    }
}

/// Canonical string key for one (origin cell, destination cell, hour) leg.
pub fn od_key(origin: (i32, i32), dest: (i32, i32), hour: u8) -> String {
    format!("{},{}>{},{}@{}", origin.0, origin.1, dest.0, dest.1, hour)
}

/// Parses a key produced by [`od_key`]; used when emitting plot data.
pub fn parse_od_key(key: &str) -> Option<((i32, i32), (i32, i32), u8)> {
    let (od, hour) = key.rsplit_once('@')?;
    let (o, d) = od.split_once('>')?;
    let cell = |s: &str| -> Option<(i32, i32)> {
        let (x, y) = s.split_once(',')?;
        Some((x.parse().ok()?, y.parse().ok()?))
    };
    Some((cell(o)?, cell(d)?, hour.parse().ok()?))
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("histograms use different binnings and cannot be compared")]
    BinningMismatch,
    #[error("empty distribution: {0}")]
    EmptyDistribution(String),
    #[error("unknown attribute dimension: {0}")]
    UnknownDimension(String),
}

/// Mean coordinate of every diary point in the dataset, falling back to
/// profile homes when there are no diaries. Used as the shared grid center.
pub fn dataset_centroid(ds: &Dataset) -> Option<GeoPoint> {
    let mut lat = 0.0;
    let mut lon = 0.0;
    let mut n = 0usize;
    for diary in &ds.diaries {
        for p in &diary.points {
            lat += p.location.lat;
            lon += p.location.lon;
            n += 1;
        }
    }
    if n == 0 {
        for prof in ds.profiles.values() {
            lat += prof.home.lat;
            lon += prof.home.lon;
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    Some(GeoPoint::new(lat / n as f64, lon / n as f64))
}

/// Builds the empirical distribution of one metric over a dataset.
/// Deterministic; an empty dataset yields an all-zero histogram.
pub fn metric_histogram(
    ds: &Dataset,
    metric: Metric,
    binnings: &MetricBinnings,
    day_filter: DayFilter,
) -> Histogram {
    let diaries = || ds.diaries.iter().filter(|d| day_filter.accepts(d.date));
    match metric {
        Metric::Sd => {
            let binning = &binnings.sd;
            let mut h = Histogram::new_dense(binning.clone());
            for diary in diaries() {
                for pair in diary.points.windows(2) {
                    let d = pair[0].location.haversine_m(&pair[1].location);
                    h.add_dense(binning.log_distance_index(d));
                }
            }
            h
        }
        Metric::Si => {
            let binning = &binnings.si;
            let mut h = Histogram::new_dense(binning.clone());
            for diary in diaries() {
                for pair in diary.points.windows(2) {
                    let dt = pair[1].arrive_time.saturating_sub(pair[0].arrive_time);
                    h.add_dense(binning.time_interval_index(dt));
                }
            }
            h
        }
        Metric::StLoc => {
            let proj = binnings.grid();
            let mut h = Histogram::new_categorical(binnings.stloc.clone());
            for diary in diaries() {
                for pair in diary.points.windows(2) {
                    let origin = proj.cell(&pair[0].location);
                    let dest = proj.cell(&pair[1].location);
                    let hour = (pair[1].depart_min().max(0) / 60).min(23) as u8;
                    h.add_key(od_key(origin, dest, hour));
                }
            }
            h
        }
        Metric::DailyLoc => {
            let proj = binnings.grid();
            let binning = &binnings.dailyloc;
            let mut h = Histogram::new_dense(binning.clone());
            for diary in diaries() {
                let cells: BTreeSet<(i32, i32)> =
                    diary.points.iter().map(|p| proj.cell(&p.location)).collect();
                h.add_dense(binning.integer_count_index(cells.len() as u32));
            }
            for _ in ds.zero_trip_days.iter().filter(|d| day_filter.accepts(d.date)) {
                h.add_dense(binning.integer_count_index(0));
            }
            h
        }
    }
}

/// Jensen-Shannon divergence over normalized counts, base-2 logarithms:
/// `½·KL(P‖M) + ½·KL(Q‖M)` with `M = ½(P+Q)`. Bounded in [0, 1]; zero-count
/// bins contribute nothing (0·log 0 = 0). Each bin's two terms are summed
/// before accumulation so the result is exactly symmetric in its arguments.
pub fn jsd_normalized<T: Real>(p: &[T], q: &[T]) -> T {
    debug_assert_eq!(p.len(), q.len());
    let sp = p.iter().fold(T::zero(), |a, &b| a + b);
    let sq = q.iter().fold(T::zero(), |a, &b| a + b);
    let half = T::from_f64(0.5).unwrap();
    let mut acc = T::zero();
    for (&pc, &qc) in p.iter().zip(q) {
        let pi = pc / sp;
        let qi = qc / sq;
        let m = (pi + qi) * half;
        let mut term = T::zero();
        if pi > T::zero() {
            term = term + pi * (pi / m).log2();
        }
        if qi > T::zero() {
            term = term + qi * (qi / m).log2();
        }
        acc = acc + term;
    }
    (acc * half).max(T::zero()).min(T::one())
}

/// JSD between two comparable histograms. Categorical supports are unioned
/// before normalization so a key present on one side counts as zero on the
/// other.
pub fn jsd(p: &Histogram, q: &Histogram) -> Result<f64, EvalError> {
    if p.binning != q.binning {
        return Err(EvalError::BinningMismatch);
    }
    if p.total <= 0.0 {
        return Err(EvalError::EmptyDistribution("first histogram has no samples".into()));
    }
    if q.total <= 0.0 {
        return Err(EvalError::EmptyDistribution("second histogram has no samples".into()));
    }
    match (&p.counts, &q.counts) {
        (Counts::Dense(a), Counts::Dense(b)) => {
            if a.len() != b.len() {
                return Err(EvalError::BinningMismatch);
            }
            Ok(jsd_normalized(a, b))
        }
        (Counts::Categorical(a), Counts::Categorical(b)) => {
            let keys: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
            let mut va = Vec::with_capacity(keys.len());
            let mut vb = Vec::with_capacity(keys.len());
            for k in keys {
                va.push(a.get(k).copied().unwrap_or(0.0));
                vb.push(b.get(k).copied().unwrap_or(0.0));
            }
            Ok(jsd_normalized(&va, &vb))
        }
        _ => Err(EvalError::BinningMismatch),
    }
}

/// Per-metric sample counts for one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MetricSamples {
    pub sd: u64,
    pub si: u64,
    pub stloc: u64,
    pub dailyloc: u64,
}

/// Per-metric JSD values; `None` when a metric could not be computed (its
/// reason appears under `metric_errors`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricJsd {
    pub jsd_sd: Option<f64>,
    pub jsd_si: Option<f64>,
    pub jsd_stloc: Option<f64>,
    pub jsd_dailyloc: Option<f64>,
}

impl MetricJsd {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Sd => self.jsd_sd,
            Metric::Si => self.jsd_si,
            Metric::StLoc => self.jsd_stloc,
            Metric::DailyLoc => self.jsd_dailyloc,
        }
    }

    fn set(&mut self, metric: Metric, v: Option<f64>) {
        match metric {
            Metric::Sd => self.jsd_sd = v,
            Metric::Si => self.jsd_si = v,
            Metric::StLoc => self.jsd_stloc = v,
            Metric::DailyLoc => self.jsd_dailyloc = v,
        }
    }
}

/// One attribute-value combination's comparison within a subset report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    /// Dimension name → value, e.g. {"age_band": "26-30", "income": "Low"}.
    pub values: BTreeMap<String, String>,
    pub real_persons: u64,
    pub generated_persons: u64,
    #[serde(flatten)]
    pub jsd: MetricJsd,
}

/// A slice present in only one dataset; reported, never silently dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UncoveredSlice {
    pub values: BTreeMap<String, String>,
    /// Which dataset covers it: "real" or "generated".
    pub only_in: String,
    pub persons: u64,
}

/// Per-attribute-subset sub-report (one table-row equivalent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    /// Letter label, e.g. "A+I+O".
    pub label: String,
    pub dimensions: Vec<AttributeDim>,
    /// Member-count-weighted mean JSD per metric over covered slices.
    #[serde(flatten)]
    pub weighted_mean: MetricJsd,
    pub slices: Vec<SliceReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub uncovered_slices: Vec<UncoveredSlice>,
}

/// The full evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub jsd: MetricJsd,
    pub real_samples: MetricSamples,
    pub generated_samples: MetricSamples,
    pub real_person_days: u64,
    pub generated_person_days: u64,
    pub day_filter: DayFilter,
    pub binnings: MetricBinnings,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metric_errors: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subsets: Vec<SubsetReport>,
}

fn person_days(ds: &Dataset, filter: DayFilter) -> u64 {
    let diaries = ds.diaries.iter().filter(|d| filter.accepts(d.date)).count();
    let zero = ds.zero_trip_days.iter().filter(|d| filter.accepts(d.date)).count();
    (diaries + zero) as u64
}

/// Builds all four histograms for one dataset under shared binnings.
pub fn dataset_histograms(
    ds: &Dataset,
    binnings: &MetricBinnings,
    day_filter: DayFilter,
) -> BTreeMap<Metric, Histogram> {
    Metric::ALL
        .iter()
        .map(|&m| (m, metric_histogram(ds, m, binnings, day_filter)))
        .collect()
}

fn compare(
    real: &Dataset,
    generated: &Dataset,
    binnings: &MetricBinnings,
    day_filter: DayFilter,
) -> (MetricJsd, MetricSamples, MetricSamples, BTreeMap<String, String>) {
    let hr = dataset_histograms(real, binnings, day_filter);
    let hg = dataset_histograms(generated, binnings, day_filter);
    let mut jsds = MetricJsd::default();
    let mut errors = BTreeMap::new();
    for metric in Metric::ALL {
        match jsd(&hr[&metric], &hg[&metric]) {
            Ok(v) => jsds.set(metric, Some(v)),
            Err(e) => {
                errors.insert(metric.name().to_owned(), e.to_string());
            }
        }
    }
    let samples = |h: &BTreeMap<Metric, Histogram>| MetricSamples {
        sd: h[&Metric::Sd].sample_count(),
        si: h[&Metric::Si].sample_count(),
        stloc: h[&Metric::StLoc].sample_count(),
        dailyloc: h[&Metric::DailyLoc].sample_count(),
    };
    (jsds, samples(&hr), samples(&hg), errors)
}

/// Computes the four JSDs between a real and a generated dataset under a
/// shared binning. The grid center is the real dataset's centroid so that
/// both sides use identical cells. Per-metric failures (e.g. too few points
/// for consecutive-pair metrics) are reported, not fatal.
pub fn evaluate(
    real: &Dataset,
    generated: &Dataset,
    cfg: &BinningConfig,
    day_filter: DayFilter,
) -> EvalReport {
    let center = dataset_centroid(real)
        .or_else(|| dataset_centroid(generated))
        .unwrap_or(GeoPoint::new(0.0, 0.0));
    let binnings = MetricBinnings::new(cfg, center);
    let (jsds, rs, gs, errors) = compare(real, generated, &binnings, day_filter);
    EvalReport {
        jsd: jsds,
        real_samples: rs,
        generated_samples: gs,
        real_person_days: person_days(real, day_filter),
        generated_person_days: person_days(generated, day_filter),
        day_filter,
        binnings,
        metric_errors: errors,
        subsets: Vec::new(),
    }
}

/// Canonical subset label: letters sorted alphabetically, joined with `+`.
pub fn subset_label(dims: &[AttributeDim]) -> String {
    let mut letters: Vec<char> = dims.iter().map(|d| d.letter()).collect();
    letters.sort_unstable();
    letters.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("+")
}

fn restrict(ds: &Dataset, keep: &BTreeSet<&str>) -> Dataset {
    Dataset {
        profiles: ds
            .profiles
            .iter()
            .filter(|(id, _)| keep.contains(id.as_str()))
            .map(|(id, p)| (id.clone(), p.clone()))
            .collect(),
        diaries: ds
            .diaries
            .iter()
            .filter(|d| keep.contains(d.person_id.as_str()))
            .cloned()
            .collect(),
        zero_trip_days: ds
            .zero_trip_days
            .iter()
            .filter(|d| keep.contains(d.person_id.as_str()))
            .cloned()
            .collect(),
    }
}

fn slice_combinations<'a>(
    ds: &'a Dataset,
    dims: &[AttributeDim],
) -> BTreeMap<Vec<&'static str>, Vec<&'a str>> {
    let mut map: BTreeMap<Vec<&'static str>, Vec<&'a str>> = BTreeMap::new();
    for (id, prof) in &ds.profiles {
        let combo: Vec<&'static str> = dims.iter().map(|d| d.value_str(prof)).collect();
        map.entry(combo).or_default().push(id.as_str());
    }
    map
}

/// Like [`evaluate`], plus one sub-report per attribute subset: both
/// datasets are partitioned by the subset's value combinations, per-slice
/// JSDs are computed where both sides are populated, and a
/// member-count-weighted mean is reported per metric. Slices present on only
/// one side are listed as uncovered, never silently dropped.
pub fn multiscale_evaluate(
    real: &Dataset,
    generated: &Dataset,
    subsets: &[Vec<AttributeDim>],
    cfg: &BinningConfig,
    day_filter: DayFilter,
) -> EvalReport {
    let mut report = evaluate(real, generated, cfg, day_filter);
    let binnings = report.binnings.clone();
    for dims in subsets {
        let real_combos = slice_combinations(real, dims);
        let gen_combos = slice_combinations(generated, dims);
        let all_combos: BTreeSet<&Vec<&'static str>> =
            real_combos.keys().chain(gen_combos.keys()).collect();
        let mut slices = Vec::new();
        let mut uncovered = Vec::new();
        let mut weighted = [0.0f64; 4];
        let mut covered = [0.0f64; 4];
        for combo in all_combos {
            let values: BTreeMap<String, String> = dims
                .iter()
                .zip(combo)
                .map(|(d, v)| (d.name().to_owned(), (*v).to_owned()))
                .collect();
            match (real_combos.get(combo), gen_combos.get(combo)) {
                (Some(r_ids), Some(g_ids)) => {
                    let r_keep: BTreeSet<&str> = r_ids.iter().copied().collect();
                    let g_keep: BTreeSet<&str> = g_ids.iter().copied().collect();
                    let r_slice = restrict(real, &r_keep);
                    let g_slice = restrict(generated, &g_keep);
                    let (jsds, _, _, _) = compare(&r_slice, &g_slice, &binnings, day_filter);
                    let weight = (r_ids.len() + g_ids.len()) as f64;
                    for (i, metric) in Metric::ALL.iter().enumerate() {
                        if let Some(v) = jsds.get(*metric) {
                            weighted[i] += weight * v;
                            covered[i] += weight;
                        }
                    }
                    slices.push(SliceReport {
                        values,
                        real_persons: r_ids.len() as u64,
                        generated_persons: g_ids.len() as u64,
                        jsd: jsds,
                    });
                }
                (Some(r_ids), None) => uncovered.push(UncoveredSlice {
                    values,
                    only_in: "real".to_owned(),
                    persons: r_ids.len() as u64,
                }),
                (None, Some(g_ids)) => uncovered.push(UncoveredSlice {
                    values,
                    only_in: "generated".to_owned(),
                    persons: g_ids.len() as u64,
                }),
                (None, None) => unreachable!("combo came from one of the maps"),
            }
        }
        let mut mean = MetricJsd::default();
        for (i, metric) in Metric::ALL.iter().enumerate() {
            if covered[i] > 0.0 {
                mean.set(*metric, Some(weighted[i] / covered[i]));
            }
        }
        report.subsets.push(SubsetReport {
            label: subset_label(dims),
            dimensions: dims.clone(),
            weighted_mean: mean,
            slices,
            uncovered_slices: uncovered,
        });
    }
    report
}
