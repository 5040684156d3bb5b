//! Survey ingestion and synthetic survey generation.
//!
//! Real microdata arrives as two CSV files in the survey's field layout:
//! `profiles.csv` (one row per person) and `trips.csv` (one row per trip).
//! Loading normalizes trip rows into [`TravelDiary`]s, reports every bad
//! row with its line number, and — in the default strict mode — aborts on
//! the first problem. Datasets serialize to newline-delimited JSON with a
//! stable record order so identical data always produces identical bytes.
//!
//! Because the original survey is private, [`synth_dataset`] fabricates a
//! survey from an archetype specification: a handful of named attribute
//! combinations, each with its own start-time, trip-count, purpose,
//! distance, and mode distributions. Generation is a pure function of the
//! spec, seed included.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockfmt::{fmt_hhmm, parse_hhmm};
use crate::domain::vocab::{
    owns_car_str, parse_owns_car, AgeBand, Education, Gender, Housing, Income, Occupation,
    TravelMode, TravelPurpose,
};
use crate::domain::{
    validate_diary, DayType, Dataset, IndividualProfile, PersonDay, SpeedCaps, TrajectoryPoint,
    TravelDiary, MINUTES_PER_DAY,
};
use crate::reasoner::default_cruise_speeds;
use crate::spatial::grid::{generate_grid, grid_coord, GridSpec};
use crate::{GeoPoint, Rng, SeededRng};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{file} line {line}: {reason}")]
    MalformedRow { file: String, line: u64, reason: String },
    #[error("trips line {line}: person {person_id:?} has no profile")]
    UnknownPersonId { line: u64, person_id: String },
    #[error("duplicate profile for person {0:?}")]
    DuplicateProfile(String),
    #[error("{0} contains no data rows")]
    EmptySource(String),
    #[error("person {person_id} on {date}: trips overlap in time (line {line})")]
    OverlappingTrips { person_id: String, date: NaiveDate, line: u64 },
    #[error("synthesis spec: {0}")]
    InvalidSpec(String),
    #[error("dataset file line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One skipped or rejected row, with enough context to locate it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowIssue {
    pub file: String,
    pub line: u64,
    pub reason: String,
}

impl std::fmt::Display for RowIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} line {}: {}", self.file, self.line, self.reason)
    }
}

/// One validated trip row, pre-assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct TripRecord {
    pub person_id: String,
    pub travel_date: NaiveDate,
    pub origin: GeoPoint,
    pub destination: GeoPoint,
    /// Minutes since midnight; end is the arrival.
    pub start_time: u16,
    pub end_time: u16,
    pub duration_min: u16,
    pub distance_m: f64,
    pub mode: TravelMode,
    pub purpose: TravelPurpose,
    /// Source line in `trips.csv`, for error reporting.
    pub line: u64,
}

// ---------------------------------------------------------------------------
// CSV schema
// ---------------------------------------------------------------------------

const PROFILE_COLUMNS: [&str; 11] = [
    "person_id",
    "age",
    "gender",
    "occupation",
    "income",
    "education",
    "own_a_car",
    "living_situation",
    "primary_mode_of_transportation",
    "residential_gps_coordinates",
    "company_gps_coordinates",
];

const TRIP_COLUMNS: [&str; 10] = [
    "person_id",
    "travel_date",
    "origin_gps_coordinates",
    "destination_gps_coordinates",
    "travel_start_time",
    "travel_end_time",
    "travel_duration",
    "travel_distance",
    "travel_mode",
    "travel_purpose",
];

/// `"lat,lon"` in decimal degrees.
fn parse_coordinate(raw: &str) -> Result<GeoPoint, String> {
    let (lat, lon) = raw
        .split_once(',')
        .ok_or_else(|| format!("coordinate {raw:?} is not \"lat,lon\""))?;
    let lat: f64 = lat.trim().parse().map_err(|e| format!("bad latitude {lat:?}: {e}"))?;
    let lon: f64 = lon.trim().parse().map_err(|e| format!("bad longitude {lon:?}: {e}"))?;
    let point = GeoPoint::new(lat, lon);
    if !point.in_bounds() {
        return Err(format!("coordinate ({lat}, {lon}) out of range"));
    }
    Ok(point)
}

fn format_coordinate(p: &GeoPoint) -> String {
    format!("{},{}", p.lat, p.lon)
}

/// Maps header names to indices, requiring every column in `required`.
/// Extra columns (such as the survey's free-text address fields) are
/// ignored; coordinates are authoritative.
fn header_map(
    file: &str,
    headers: &csv::StringRecord,
    required: &[&str],
) -> Result<BTreeMap<String, usize>, IngestError> {
    let map: BTreeMap<String, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_owned(), i))
        .collect();
    for col in required {
        if !map.contains_key(*col) {
            return Err(IngestError::MalformedRow {
                file: file.to_owned(),
                line: 1,
                reason: format!("missing required column {col:?}"),
            });
        }
    }
    Ok(map)
}

fn field<'r>(
    record: &'r csv::StringRecord,
    map: &BTreeMap<String, usize>,
    name: &str,
) -> &'r str {
    record.get(map[name]).unwrap_or("").trim()
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn parse_profile_row(
    record: &csv::StringRecord,
    map: &BTreeMap<String, usize>,
) -> Result<IndividualProfile, String> {
    let person_id = field(record, map, "person_id").to_owned();
    if person_id.is_empty() {
        return Err("person_id must be nonempty".to_owned());
    }
    let work = match field(record, map, "company_gps_coordinates") {
        "" | "none" => None,
        raw => Some(parse_coordinate(raw)?),
    };
    Ok(IndividualProfile {
        person_id,
        age_band: field(record, map, "age").parse::<AgeBand>().map_err(|e| e.to_string())?,
        gender: field(record, map, "gender").parse::<Gender>().map_err(|e| e.to_string())?,
        occupation: field(record, map, "occupation")
            .parse::<Occupation>()
            .map_err(|e| e.to_string())?,
        income: field(record, map, "income").parse::<Income>().map_err(|e| e.to_string())?,
        education: field(record, map, "education")
            .parse::<Education>()
            .map_err(|e| e.to_string())?,
        owns_car: parse_owns_car(field(record, map, "own_a_car")).map_err(|e| e.to_string())?,
        housing: field(record, map, "living_situation")
            .parse::<Housing>()
            .map_err(|e| e.to_string())?,
        primary_mode: field(record, map, "primary_mode_of_transportation")
            .parse::<TravelMode>()
            .map_err(|e| e.to_string())?,
        home: parse_coordinate(field(record, map, "residential_gps_coordinates"))?,
        work,
    })
}

fn parse_trip_row(
    record: &csv::StringRecord,
    map: &BTreeMap<String, usize>,
) -> Result<TripRecord, String> {
    let person_id = field(record, map, "person_id").to_owned();
    if person_id.is_empty() {
        return Err("person_id must be nonempty".to_owned());
    }
    let travel_date = NaiveDate::parse_from_str(field(record, map, "travel_date"), "%Y-%m-%d")
        .map_err(|e| format!("bad travel_date: {e}"))?;
    let start_time = parse_hhmm(field(record, map, "travel_start_time"))?;
    let end_time = parse_hhmm(field(record, map, "travel_end_time"))?;
    if end_time >= MINUTES_PER_DAY {
        return Err("travel_end_time must be before 24:00 (overnight trips unsupported)".into());
    }
    if end_time <= start_time {
        return Err(format!(
            "travel_end_time {} is not after travel_start_time {}",
            fmt_hhmm(end_time),
            fmt_hhmm(start_time)
        ));
    }
    let duration_min: u16 = field(record, map, "travel_duration")
        .parse()
        .map_err(|e| format!("bad travel_duration: {e}"))?;
    let gap = end_time - start_time;
    if duration_min.abs_diff(gap) > 1 {
        return Err(format!(
            "travel_duration {duration_min} disagrees with end-start {gap} by more than 1 minute"
        ));
    }
    if duration_min == 0 {
        return Err("travel_duration must be positive".into());
    }
    if duration_min > end_time {
        return Err("travel_duration reaches back past midnight".into());
    }
    let distance_m: f64 = field(record, map, "travel_distance")
        .parse()
        .map_err(|e| format!("bad travel_distance: {e}"))?;
    if !(distance_m.is_finite() && distance_m >= 0.0) {
        return Err(format!("travel_distance {distance_m} is not a nonnegative distance"));
    }
    Ok(TripRecord {
        person_id,
        travel_date,
        origin: parse_coordinate(field(record, map, "origin_gps_coordinates"))?,
        destination: parse_coordinate(field(record, map, "destination_gps_coordinates"))?,
        start_time,
        end_time,
        duration_min,
        distance_m,
        mode: field(record, map, "travel_mode").parse::<TravelMode>().map_err(|e| e.to_string())?,
        purpose: field(record, map, "travel_purpose")
            .parse::<TravelPurpose>()
            .map_err(|e| e.to_string())?,
        line: record_line(record),
    })
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// Reads `profiles.csv`. In strict mode the first bad row aborts;
/// otherwise bad rows are skipped and reported.
pub fn read_profiles_csv(
    path: &Path,
    strict: bool,
) -> Result<(BTreeMap<String, IndividualProfile>, Vec<RowIssue>), IngestError> {
    let file_name = path.display().to_string();
    let mut reader = csv::Reader::from_path(path)?;
    let map = header_map(&file_name, reader.headers()?, &PROFILE_COLUMNS)?;
    let mut profiles = BTreeMap::new();
    let mut issues = Vec::new();
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record?;
        rows += 1;
        match parse_profile_row(&record, &map) {
            Ok(profile) => {
                if profiles.contains_key(&profile.person_id) {
                    return Err(IngestError::DuplicateProfile(profile.person_id));
                }
                profiles.insert(profile.person_id.clone(), profile);
            }
            Err(reason) => {
                if strict {
                    return Err(IngestError::MalformedRow {
                        file: file_name,
                        line: record_line(&record),
                        reason,
                    });
                }
                issues.push(RowIssue { file: file_name.clone(), line: record_line(&record), reason });
            }
        }
    }
    if rows == 0 {
        return Err(IngestError::EmptySource(file_name));
    }
    Ok((profiles, issues))
}

/// Reads `trips.csv`, rejecting rows whose person has no profile.
pub fn read_trips_csv(
    path: &Path,
    profiles: &BTreeMap<String, IndividualProfile>,
    strict: bool,
) -> Result<(Vec<TripRecord>, Vec<RowIssue>), IngestError> {
    let file_name = path.display().to_string();
    let mut reader = csv::Reader::from_path(path)?;
    let map = header_map(&file_name, reader.headers()?, &TRIP_COLUMNS)?;
    let mut trips = Vec::new();
    let mut issues = Vec::new();
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record?;
        rows += 1;
        match parse_trip_row(&record, &map) {
            Ok(trip) => {
                if !profiles.contains_key(&trip.person_id) {
                    if strict {
                        return Err(IngestError::UnknownPersonId {
                            line: trip.line,
                            person_id: trip.person_id,
                        });
                    }
                    issues.push(RowIssue {
                        file: file_name.clone(),
                        line: trip.line,
                        reason: format!("person {:?} has no profile", trip.person_id),
                    });
                    continue;
                }
                trips.push(trip);
            }
            Err(reason) => {
                if strict {
                    return Err(IngestError::MalformedRow {
                        file: file_name,
                        line: record_line(&record),
                        reason,
                    });
                }
                issues.push(RowIssue { file: file_name.clone(), line: record_line(&record), reason });
            }
        }
    }
    if rows == 0 {
        return Err(IngestError::EmptySource(file_name));
    }
    Ok((trips, issues))
}

/// Groups validated trips into per-person-day diaries: each trip becomes
/// one point arriving at its end time at its destination, ordered by
/// arrival (the order diary points keep). A trip whose effective departure
/// (arrival minus duration) precedes the previous arrival of the same day
/// is an overlap.
pub fn build_diaries(mut trips: Vec<TripRecord>) -> Result<Vec<TravelDiary>, IngestError> {
    trips.sort_by(|a, b| {
        (&a.person_id, a.travel_date, a.end_time, a.line)
            .cmp(&(&b.person_id, b.travel_date, b.end_time, b.line))
    });
    let mut diaries: Vec<TravelDiary> = Vec::new();
    for trip in trips {
        let point = TrajectoryPoint {
            arrive_time: trip.end_time,
            location: trip.destination,
            purpose: trip.purpose,
            distance_m: trip.distance_m,
            mode: trip.mode,
            duration_min: trip.duration_min,
        };
        match diaries.last_mut() {
            Some(d) if d.person_id == trip.person_id && d.date == trip.travel_date => {
                let prev_arrive = d.points.last().expect("diaries never start empty").arrive_time;
                // The effective departure (arrival minus duration) is what
                // diary validation checks, so it is what overlap means here.
                if point.depart_min() < i32::from(prev_arrive) {
                    return Err(IngestError::OverlappingTrips {
                        person_id: trip.person_id,
                        date: trip.travel_date,
                        line: trip.line,
                    });
                }
                d.points.push(point);
            }
            _ => diaries.push(TravelDiary {
                person_id: trip.person_id,
                date: trip.travel_date,
                points: vec![point],
                provenance: None,
            }),
        }
    }
    Ok(diaries)
}

/// Strict survey load: both files parse completely, diaries assemble
/// without overlaps, and the result passes full dataset validation.
pub fn load_survey(profiles_path: &Path, trips_path: &Path) -> Result<Dataset, IngestError> {
    let (profiles, _) = read_profiles_csv(profiles_path, true)?;
    let (trips, _) = read_trips_csv(trips_path, &profiles, true)?;
    let diaries = build_diaries(trips)?;
    let dataset = Dataset { profiles, diaries, zero_trip_days: Vec::new() };
    let violations = dataset.validate(&SpeedCaps::default());
    if let Some(v) = violations.first() {
        return Err(IngestError::MalformedRow {
            file: trips_path.display().to_string(),
            line: 0,
            reason: format!("loaded dataset fails validation: {v}"),
        });
    }
    Ok(dataset)
}

/// Lenient survey load: skips bad rows, person-days that overlap, and
/// diaries that fail validation, reporting each with its location.
pub fn load_survey_lenient(
    profiles_path: &Path,
    trips_path: &Path,
) -> Result<(Dataset, Vec<RowIssue>), IngestError> {
    let (profiles, mut issues) = read_profiles_csv(profiles_path, false)?;
    let (mut trips, trip_issues) = read_trips_csv(trips_path, &profiles, false)?;
    issues.extend(trip_issues);
    let trips_file = trips_path.display().to_string();

    // Drop whole person-days that overlap, then diaries that fail
    // validation; every drop is reported against the offending line.
    loop {
        match build_diaries(trips.clone()) {
            Ok(mut diaries) => {
                let caps = SpeedCaps::default();
                diaries.retain(|d| {
                    let violations = validate_diary(d, &caps);
                    if violations.is_empty() {
                        return true;
                    }
                    issues.push(RowIssue {
                        file: trips_file.clone(),
                        line: 0,
                        reason: format!(
                            "dropped diary of {} on {}: {}",
                            d.person_id, d.date, violations[0]
                        ),
                    });
                    false
                });
                let dataset = Dataset { profiles, diaries, zero_trip_days: Vec::new() };
                return Ok((dataset, issues));
            }
            Err(IngestError::OverlappingTrips { person_id, date, line }) => {
                issues.push(RowIssue {
                    file: trips_file.clone(),
                    line,
                    reason: format!("dropped person-day {person_id} {date}: trips overlap"),
                });
                trips.retain(|t| !(t.person_id == person_id && t.travel_date == date));
            }
            Err(other) => return Err(other),
        }
    }
}

// ---------------------------------------------------------------------------
// CSV emission
// ---------------------------------------------------------------------------

/// Writes `profiles.csv` in the survey layout, one row per person in id
/// order.
pub fn write_profiles_csv(dataset: &Dataset, path: &Path) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PROFILE_COLUMNS)?;
    for p in dataset.profiles.values() {
        w.write_record([
            p.person_id.as_str(),
            p.age_band.as_str(),
            p.gender.as_str(),
            p.occupation.as_str(),
            p.income.as_str(),
            p.education.as_str(),
            owns_car_str(p.owns_car),
            p.housing.as_str(),
            p.primary_mode.as_str(),
            &format_coordinate(&p.home),
            &p.work.as_ref().map(format_coordinate).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `trips.csv` in the survey layout. Trip rows are reconstructed
/// from diary points: each leg departs at its effective departure time and
/// starts where the previous leg ended (the first from home).
pub fn write_trips_csv(dataset: &Dataset, path: &Path) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRIP_COLUMNS)?;
    for d in &dataset.diaries {
        let home = dataset.profiles.get(&d.person_id).map(|p| p.home);
        let mut origin = home.ok_or_else(|| IngestError::UnknownPersonId {
            line: 0,
            person_id: d.person_id.clone(),
        })?;
        for p in &d.points {
            let start = u16::try_from(p.depart_min().max(0)).expect("depart fits a day");
            w.write_record([
                d.person_id.as_str(),
                &d.date.to_string(),
                &format_coordinate(&origin),
                &format_coordinate(&p.location),
                &fmt_hhmm(start),
                &fmt_hhmm(p.arrive_time),
                &p.duration_min.to_string(),
                &p.distance_m.to_string(),
                p.mode.as_str(),
                p.purpose.as_str(),
            ])?;
            origin = p.location;
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset NDJSON
// ---------------------------------------------------------------------------

/// One line of a serialized dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum DatasetRecord {
    Meta { meta: serde_json::Value },
    Profile(IndividualProfile),
    Diary(TravelDiary),
    ZeroTripDay(PersonDay),
}

/// Serializes a dataset in a stable order: optional meta line, profiles in
/// id order, diaries, zero-trip days. Identical datasets yield identical
/// bytes.
pub fn write_dataset_ndjson<W: Write>(
    dataset: &Dataset,
    mut w: W,
    meta: Option<&serde_json::Value>,
) -> Result<(), IngestError> {
    let mut emit = |record: &DatasetRecord| -> Result<(), IngestError> {
        serde_json::to_writer(&mut w, record).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
        Ok(())
    };
    if let Some(meta) = meta {
        emit(&DatasetRecord::Meta { meta: meta.clone() })?;
    }
    for profile in dataset.profiles.values() {
        emit(&DatasetRecord::Profile(profile.clone()))?;
    }
    for diary in &dataset.diaries {
        emit(&DatasetRecord::Diary(diary.clone()))?;
    }
    for day in &dataset.zero_trip_days {
        emit(&DatasetRecord::ZeroTripDay(day.clone()))?;
    }
    Ok(())
}

/// Reads a dataset back from its NDJSON form.
pub fn read_dataset_ndjson<R: BufRead>(
    r: R,
) -> Result<(Dataset, Option<serde_json::Value>), IngestError> {
    let mut dataset = Dataset::default();
    let mut meta = None;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord =
            serde_json::from_str(&line).map_err(|e| IngestError::MalformedRecord {
                line: i + 1,
                reason: e.to_string(),
            })?;
        match record {
            DatasetRecord::Meta { meta: m } => meta = Some(m),
            DatasetRecord::Profile(p) => {
                if dataset.profiles.contains_key(&p.person_id) {
                    return Err(IngestError::DuplicateProfile(p.person_id));
                }
                dataset.profiles.insert(p.person_id.clone(), p);
            }
            DatasetRecord::Diary(d) => dataset.diaries.push(d),
            DatasetRecord::ZeroTripDay(z) => dataset.zero_trip_days.push(z),
        }
    }
    Ok((dataset, meta))
}

pub fn write_dataset_file(
    dataset: &Dataset,
    path: &Path,
    meta: Option<&serde_json::Value>,
) -> Result<(), IngestError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset_ndjson(dataset, &mut w, meta)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset_file(
    path: &Path,
) -> Result<(Dataset, Option<serde_json::Value>), IngestError> {
    read_dataset_ndjson(std::io::BufReader::new(std::fs::File::open(path)?))
}

// ---------------------------------------------------------------------------
// Synthetic surveys
// ---------------------------------------------------------------------------

/// The fixed attribute values of one archetype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeAttributes {
    pub age: AgeBand,
    pub gender: Gender,
    pub occupation: Occupation,
    pub income: Income,
    pub education: Education,
    pub owns_car: bool,
    pub living_situation: Housing,
    pub primary_mode: TravelMode,
}

/// A mode-share band: weights apply to trips up to `max_distance_m`
/// (exclusive); the last band must cover everything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeBand {
    pub max_distance_m: f64,
    pub mode_weights: BTreeMap<TravelMode, f64>,
}

/// Log-normal leg-distance law for one purpose: `ln d ~ N(ln median, sigma²)`,
/// clamped into the survey's plausible range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceLaw {
    pub median_m: f64,
    pub sigma: f64,
}

/// The behavioral template of one archetype. Every weight vector is a
/// probability distribution (nonnegative, sums to 1 within 1e-9).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Behavior {
    /// Index = trips per day.
    pub trip_count_weights: Vec<f64>,
    /// 24 weights over first-departure hours; trips within a day occupy
    /// distinct ascending hours sampled from this law.
    pub start_hour_weights: Vec<f64>,
    /// First-trip purpose law.
    pub purpose_weights: BTreeMap<TravelPurpose, f64>,
    /// Optional successor law; rows sum to 1. Purposes without a row fall
    /// back to `purpose_weights`.
    #[serde(default)]
    pub purpose_transition: BTreeMap<TravelPurpose, BTreeMap<TravelPurpose, f64>>,
    /// Per-purpose distance laws; `default_distance` covers the rest.
    #[serde(default)]
    pub distance_by_purpose: BTreeMap<TravelPurpose, DistanceLaw>,
    pub default_distance: DistanceLaw,
    /// Ascending mode-share bands by leg distance.
    pub mode_bands: Vec<ModeBand>,
}

/// One population archetype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    pub name: String,
    /// Population share; shares sum to 1 across archetypes.
    pub weight: f64,
    pub attributes: ArchetypeAttributes,
    pub behavior: Behavior,
    /// Optional weekend behavior; weekdays always use `behavior`.
    #[serde(default)]
    pub weekend: Option<Behavior>,
}

/// A complete synthetic-survey specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub person_count: u32,
    pub rng_seed: u64,
    /// First surveyed date; the survey covers `days` consecutive dates.
    pub start_date: NaiveDate,
    pub days: u32,
    /// Home/work placement: on the nodes of this grid when present,
    /// otherwise scattered around `center` within `spread_m`. The grid also
    /// fixes leg geometry: destinations are reached by rectilinear walks on
    /// the lattice, so recorded distances are route distances on it.
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default = "default_center")]
    pub center: GeoPoint,
    #[serde(default = "default_spread_m")]
    pub spread_m: f64,
    #[serde(rename = "archetype")]
    pub archetypes: Vec<Archetype>,
}

fn default_center() -> GeoPoint {
    GeoPoint::new(22.54, 114.05)
}

fn default_spread_m() -> f64 {
    2000.0
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<SynthSpec, IngestError> {
        let spec: SynthSpec =
            toml::from_str(text).map_err(|e| IngestError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<SynthSpec, IngestError> {
        SynthSpec::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let fail = |reason: String| Err(IngestError::InvalidSpec(reason));
        if self.person_count == 0 {
            return fail("person_count must be positive".into());
        }
        if self.days == 0 {
            return fail("days must be positive".into());
        }
        if self.archetypes.is_empty() {
            return fail("at least one archetype is required".into());
        }
        check_distribution(
            "archetype weights",
            self.archetypes.iter().map(|a| a.weight),
        )?;
        for a in &self.archetypes {
            a.behavior.validate(&format!("archetype {:?}", a.name))?;
            if let Some(weekend) = &a.weekend {
                weekend.validate(&format!("archetype {:?} weekend", a.name))?;
            }
        }
        Ok(())
    }
}

fn check_distribution(
    what: &str,
    weights: impl Iterator<Item = f64>,
) -> Result<(), IngestError> {
    let mut total = 0.0;
    let mut any = false;
    for w in weights {
        if !(w.is_finite() && w >= 0.0) {
            return Err(IngestError::InvalidSpec(format!("{what}: weight {w} is negative")));
        }
        total += w;
        any = true;
    }
    if !any {
        return Err(IngestError::InvalidSpec(format!("{what}: empty distribution")));
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(IngestError::InvalidSpec(format!("{what}: weights sum to {total}, not 1")));
    }
    Ok(())
}

impl Behavior {
    fn validate(&self, ctx: &str) -> Result<(), IngestError> {
        check_distribution(&format!("{ctx} trip_count_weights"), self.trip_count_weights.iter().copied())?;
        if self.start_hour_weights.len() != 24 {
            return Err(IngestError::InvalidSpec(format!(
                "{ctx} start_hour_weights: expected 24 entries, got {}",
                self.start_hour_weights.len()
            )));
        }
        check_distribution(&format!("{ctx} start_hour_weights"), self.start_hour_weights.iter().copied())?;
        check_distribution(&format!("{ctx} purpose_weights"), self.purpose_weights.values().copied())?;
        for (p, row) in &self.purpose_transition {
            check_distribution(&format!("{ctx} purpose_transition[{p}]"), row.values().copied())?;
        }
        for (p, law) in self
            .distance_by_purpose
            .iter()
            .map(|(p, l)| (Some(p), l))
            .chain(std::iter::once((None, &self.default_distance)))
        {
            let name = p.map_or("default".to_owned(), |p| p.to_string());
            if !(law.median_m.is_finite() && law.median_m > 0.0) {
                return Err(IngestError::InvalidSpec(format!(
                    "{ctx} distance law {name}: median must be positive"
                )));
            }
            if !(law.sigma.is_finite() && law.sigma >= 0.0) {
                return Err(IngestError::InvalidSpec(format!(
                    "{ctx} distance law {name}: sigma must be nonnegative"
                )));
            }
        }
        if self.mode_bands.is_empty() {
            return Err(IngestError::InvalidSpec(format!("{ctx}: at least one mode band")));
        }
        let mut prev = 0.0;
        for band in &self.mode_bands {
            if band.max_distance_m <= prev {
                return Err(IngestError::InvalidSpec(format!(
                    "{ctx} mode bands must ascend: {} after {prev}",
                    band.max_distance_m
                )));
            }
            prev = band.max_distance_m;
            check_distribution(&format!("{ctx} mode band {}", band.max_distance_m), band.mode_weights.values().copied())?;
        }
        Ok(())
    }

    fn sample_trip_count(&self, rng: &mut SeededRng) -> usize {
        weighted_index(&self.trip_count_weights, rng)
    }

    fn sample_hours(&self, count: usize, rng: &mut SeededRng) -> Vec<u16> {
        let mut hours: Vec<u16> = Vec::with_capacity(count);
        let mut weights = self.start_hour_weights.clone();
        for _ in 0..count.min(24) {
            let total: f64 = weights.iter().sum();
            if total <= 0.0 {
                break;
            }
            let hour = weighted_index(&weights, rng);
            weights[hour] = 0.0; // distinct hours within a day
            hours.push(hour as u16);
        }
        hours.sort_unstable();
        hours
    }

    fn sample_purpose(&self, prev: Option<TravelPurpose>, rng: &mut SeededRng) -> TravelPurpose {
        let row = prev.and_then(|p| self.purpose_transition.get(&p)).unwrap_or(&self.purpose_weights);
        weighted_map(row, rng)
    }

    fn sample_distance(&self, purpose: TravelPurpose, rng: &mut SeededRng) -> f64 {
        let law = self.distance_by_purpose.get(&purpose).unwrap_or(&self.default_distance);
        // Box-Muller standard normal from two uniforms keeps the only RNG
        // dependency on the seeded stream itself.
        let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.random();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        (law.median_m * (law.sigma * z).exp()).clamp(100.0, 100_000.0)
    }

    fn sample_mode(&self, distance_m: f64, rng: &mut SeededRng) -> TravelMode {
        let band = self
            .mode_bands
            .iter()
            .find(|b| distance_m < b.max_distance_m)
            .unwrap_or_else(|| self.mode_bands.last().expect("bands validated nonempty"));
        weighted_map(&band.mode_weights, rng)
    }
}

fn weighted_index(weights: &[f64], rng: &mut SeededRng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut draw = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        draw -= w;
        if draw < 0.0 {
            return i;
        }
    }
    weights.len().saturating_sub(1)
}

fn weighted_map<K: Copy>(weights: &BTreeMap<K, f64>, rng: &mut SeededRng) -> K {
    let values: Vec<f64> = weights.values().copied().collect();
    let idx = weighted_index(&values, rng);
    *weights.keys().nth(idx).expect("weighted map is nonempty")
}

/// Largest-remainder allotment of `total` across `weights`.
fn allot(total: u32, weights: &[f64]) -> Vec<u32> {
    let exact: Vec<f64> = weights.iter().map(|w| w * f64::from(total)).collect();
    let mut counts: Vec<u32> = exact.iter().map(|e| e.floor() as u32).collect();
    let assigned: u32 = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for i in 0..(total - assigned) as usize {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

/// Route-consistent destination stepper. Each leg walks from the previous
/// location and records the route distance the walk actually covered, so a
/// diary's geometry and its distance column tell the same story: on a grid
/// the walk is rectilinear (matching shortest paths on the lattice), in free
/// scatter it is a geodesic offset at a random bearing.
enum Stepper<'a> {
    Scatter,
    Grid { spec: &'a GridSpec },
}

impl Stepper<'_> {
    /// Moves roughly `target_m` away from `from`; returns the destination
    /// and the route distance covered (which the grid may truncate at its
    /// boundary).
    fn step(&self, from: GeoPoint, target_m: f64, rng: &mut SeededRng) -> (GeoPoint, f64) {
        match self {
            Stepper::Scatter => {
                let theta = rng.random::<f64>() * std::f64::consts::TAU;
                let dlat = (target_m * theta.cos() / crate::geo::EARTH_RADIUS_M).to_degrees();
                let dlon = (target_m * theta.sin()
                    / (crate::geo::EARTH_RADIUS_M * from.lat.to_radians().cos()))
                .to_degrees();
                (GeoPoint::new(from.lat + dlat, from.lon + dlon), target_m)
            }
            Stepper::Grid { spec } => {
                let (r0, c0) = grid_index(spec, &from);
                let steps = (target_m / spec.spacing_m).round().max(1.0) as i64;
                let row_mag = rng.random_range(0..=steps);
                let (row_pos, col_pos) = (rng.random::<bool>(), rng.random::<bool>());
                let r1 = offset_within(r0, row_mag, row_pos, spec.rows);
                let c1 = offset_within(c0, steps - row_mag, col_pos, spec.cols);
                let walked = f64::from(r1.abs_diff(r0) + c1.abs_diff(c0)) * spec.spacing_m;
                (grid_coord(spec, r1, c1), walked)
            }
        }
    }

    /// Route distance from `from` to a fixed destination (the trip home).
    fn route_m(&self, from: GeoPoint, to: GeoPoint) -> f64 {
        match self {
            Stepper::Scatter => from.haversine_m(&to),
            Stepper::Grid { spec } => {
                let (r0, c0) = grid_index(spec, &from);
                let (r1, c1) = grid_index(spec, &to);
                f64::from(r0.abs_diff(r1) + c0.abs_diff(c1)) * spec.spacing_m
            }
        }
    }
}

/// Nearest lattice indices for a point; exact for points on grid nodes
/// (the inverse of [`grid_coord`]).
fn grid_index(spec: &GridSpec, p: &GeoPoint) -> (u32, u32) {
    let row = (p.lat - spec.origin.lat).to_radians() * crate::geo::EARTH_RADIUS_M / spec.spacing_m;
    let col = (p.lon - spec.origin.lon).to_radians()
        * crate::geo::EARTH_RADIUS_M
        * spec.origin.lat.to_radians().cos()
        / spec.spacing_m;
    (
        (row.round().max(0.0) as u32).min(spec.rows - 1),
        (col.round().max(0.0) as u32).min(spec.cols - 1),
    )
}

/// `pos` moved by `mag` lattice steps, preferring the drawn direction,
/// falling back to the opposite one, and running to the farther wall when
/// the magnitude exceeds the grid both ways.
fn offset_within(pos: u32, mag: i64, positive: bool, len: u32) -> u32 {
    let (pos, len) = (i64::from(pos), i64::from(len));
    let signed = if positive { mag } else { -mag };
    for cand in [pos + signed, pos - signed] {
        if (0..len).contains(&cand) {
            return cand as u32;
        }
    }
    if len - 1 - pos >= pos {
        (len - 1) as u32
    } else {
        0
    }
}

/// Generates a survey dataset from the spec: a pure function of the spec,
/// seed included. Every diary passes validation; days on which a person
/// makes no trips are recorded as zero-trip days.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset, IngestError> {
    spec.validate()?;
    let grid_nodes: Vec<GeoPoint> = spec
        .grid
        .as_ref()
        .map(|g| generate_grid(g).nodes.into_iter().map(|(_, c)| c).collect())
        .unwrap_or_default();
    let weights: Vec<f64> = spec.archetypes.iter().map(|a| a.weight).collect();
    let counts = allot(spec.person_count, &weights);
    let cruise = default_cruise_speeds();
    let stepper = match spec.grid.as_ref() {
        Some(g) => Stepper::Grid { spec: g },
        None => Stepper::Scatter,
    };

    let mut dataset = Dataset::default();
    let mut person_index = 0u32;
    for (archetype, count) in spec.archetypes.iter().zip(&counts) {
        for _ in 0..*count {
            let person_id = format!("p{person_index:05}");
            let mut rng = crate::seeded_rng(crate::pattern::subseed(
                spec.rng_seed,
                &format!("person:{person_index}"),
            ));
            let place = |rng: &mut SeededRng| -> GeoPoint {
                if grid_nodes.is_empty() {
                    // Uniform square around the center, spread_m each way.
                    let dlat = (rng.random::<f64>() * 2.0 - 1.0) * spec.spread_m
                        / crate::geo::EARTH_RADIUS_M;
                    let dlon = (rng.random::<f64>() * 2.0 - 1.0) * spec.spread_m
                        / (crate::geo::EARTH_RADIUS_M * spec.center.lat.to_radians().cos());
                    GeoPoint::new(
                        spec.center.lat + dlat.to_degrees(),
                        spec.center.lon + dlon.to_degrees(),
                    )
                } else {
                    grid_nodes[rng.random_range(0..grid_nodes.len())]
                }
            };
            let home = place(&mut rng);
            let work = Some(place(&mut rng));
            let a = &archetype.attributes;
            dataset.profiles.insert(
                person_id.clone(),
                IndividualProfile {
                    person_id: person_id.clone(),
                    age_band: a.age,
                    gender: a.gender,
                    occupation: a.occupation,
                    income: a.income,
                    education: a.education,
                    owns_car: a.owns_car,
                    housing: a.living_situation,
                    primary_mode: a.primary_mode,
                    home,
                    work,
                },
            );
            for day in 0..spec.days {
                let date = spec.start_date + chrono::Days::new(u64::from(day));
                let behavior = match DayType::from_date(date) {
                    DayType::Weekend => archetype.weekend.as_ref().unwrap_or(&archetype.behavior),
                    DayType::Weekday => &archetype.behavior,
                };
                let points = synth_day(behavior, home, &mut rng, &cruise, &stepper);
                if points.is_empty() {
                    dataset
                        .zero_trip_days
                        .push(PersonDay { person_id: person_id.clone(), date });
                } else {
                    dataset.diaries.push(TravelDiary {
                        person_id: person_id.clone(),
                        date,
                        points,
                        provenance: None,
                    });
                }
            }
            person_index += 1;
        }
    }
    let violations = dataset.validate(&SpeedCaps::default());
    assert!(
        violations.is_empty(),
        "synthesized dataset violates its own invariants: {}",
        violations[0]
    );
    Ok(dataset)
}

/// One synthetic person-day. The day starts at home; each leg steps from
/// wherever the previous leg ended.
fn synth_day(
    behavior: &Behavior,
    home: GeoPoint,
    rng: &mut SeededRng,
    cruise: &SpeedCaps,
    stepper: &Stepper<'_>,
) -> Vec<TrajectoryPoint> {
    let count = behavior.sample_trip_count(rng);
    let hours = behavior.sample_hours(count, rng);
    let mut points: Vec<TrajectoryPoint> = Vec::with_capacity(hours.len());
    let mut purpose = None;
    let mut last_arrive: u16 = 0;
    let mut current = home;
    for hour in hours {
        let p = behavior.sample_purpose(purpose, rng);
        purpose = Some(p);
        let target = behavior.sample_distance(p, rng);
        let (location, route_m) = if p == TravelPurpose::ReturningHome {
            (home, stepper.route_m(current, home))
        } else {
            stepper.step(current, target, rng)
        };
        let distance_m = (route_m * 10.0).round() / 10.0;
        if distance_m < 100.0 {
            continue; // degenerate hop, e.g. returning home while already there
        }
        let mode = behavior.sample_mode(distance_m, rng);
        let speed = cruise.cap_kmh(mode).expect("cruise speeds cover all modes");
        let duration = ((distance_m / 1000.0 / speed * 60.0).ceil() as u16).max(1);
        let start =
            (hour * 60 + rng.random_range(0..60u16)).max(last_arrive.saturating_add(1));
        let Some(arrive) = start.checked_add(duration) else { continue };
        if arrive >= MINUTES_PER_DAY {
            continue; // the sampled leg no longer fits the day
        }
        points.push(TrajectoryPoint {
            arrive_time: arrive,
            location,
            purpose: p,
            distance_m,
            mode,
            duration_min: duration,
        });
        last_arrive = arrive;
        current = location;
    }
    points
}
