//! Core domain objects: individual profiles, trajectory points, travel
//! diaries, and the dataset container, plus their validity rules.
//!
//! All types are immutable after construction and safe to share across
//! worker threads. Validation is pure: violations are returned as data, not
//! raised as errors.

pub mod vocab;

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::geo::GeoPoint;
pub use vocab::{
    owns_car_str, parse_owns_car, AgeBand, Education, Gender, Housing, Income, Occupation,
    TravelMode, TravelPurpose, VocabError,
};

/// Minutes in a day; arrive times live in `[0, MINUTES_PER_DAY)`.
pub const MINUTES_PER_DAY: u16 = 1440;

/// Weekday/weekend classification of a calendar date. Mobility statistics
/// and daily plans are conditioned on this split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DayType {
    Weekday,
    Weekend,
}

impl DayType {
    pub fn from_date(date: NaiveDate) -> DayType {
        use chrono::{Datelike, Weekday};
        match date.weekday() {
            Weekday::Sat | Weekday::Sun => DayType::Weekend,
            _ => DayType::Weekday,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DayType::Weekday => "weekday",
            DayType::Weekend => "weekend",
        }
    }
}

impl std::fmt::Display for DayType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The ten-attribute description of one person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualProfile {
    pub person_id: String,
    pub age_band: AgeBand,
    pub gender: Gender,
    pub occupation: Occupation,
    pub income: Income,
    pub education: Education,
    pub owns_car: bool,
    pub housing: Housing,
    pub primary_mode: TravelMode,
    pub home: GeoPoint,
    /// Missing for non-workers (students, retired).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub work: Option<GeoPoint>,
}

/// One leg of a diary: the state after traveling to a location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// Arrival time in minutes since midnight, `[0, 1440)`.
    pub arrive_time: u16,
    pub location: GeoPoint,
    pub purpose: TravelPurpose,
    /// Distance traveled to reach this point, meters.
    pub distance_m: f64,
    pub mode: TravelMode,
    /// Travel duration of the leg, minutes, > 0.
    pub duration_min: u16,
}

impl TrajectoryPoint {
    /// Departure time of the leg in minutes since midnight. Negative means
    /// the leg would have started before the diary's day, which validation
    /// rejects.
    pub fn depart_min(&self) -> i32 {
        i32::from(self.arrive_time) - i32::from(self.duration_min)
    }

    /// Implied speed of the leg in km/h.
    pub fn speed_kmh(&self) -> f64 {
        self.distance_m * 0.06 / f64::from(self.duration_min)
    }
}

/// One person-day of movement: an ordered sequence of trajectory points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TravelDiary {
    pub person_id: String,
    pub date: NaiveDate,
    pub points: Vec<TrajectoryPoint>,
    /// Transcript ids of the model exchanges that produced this diary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Vec<String>>,
}

/// A (person, date) key for days with no recorded movement.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PersonDay {
    pub person_id: String,
    pub date: NaiveDate,
}

/// Profiles plus their diaries. Zero-trip days are tracked separately so
/// per-day statistics can count them without inventing empty diaries.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub profiles: BTreeMap<String, IndividualProfile>,
    pub diaries: Vec<TravelDiary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub zero_trip_days: Vec<PersonDay>,
}

/// One of the eight categorical profile attributes, used for cohort splits
/// and attribute-slice evaluation. `ALL` lists them in the default split
/// order (most to least behaviorally influential).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeDim {
    Occupation,
    AgeBand,
    Income,
    Gender,
    OwnsCar,
    Education,
    Housing,
    PrimaryMode,
}

impl AttributeDim {
    pub const ALL: [AttributeDim; 8] = [
        AttributeDim::Occupation,
        AttributeDim::AgeBand,
        AttributeDim::Income,
        AttributeDim::Gender,
        AttributeDim::OwnsCar,
        AttributeDim::Education,
        AttributeDim::Housing,
        AttributeDim::PrimaryMode,
    ];

    /// Snake-case name used in config files and reports.
    pub fn name(&self) -> &'static str {
        match self {
            AttributeDim::Occupation => "occupation",
            AttributeDim::AgeBand => "age_band",
            AttributeDim::Income => "income",
            AttributeDim::Gender => "gender",
            AttributeDim::OwnsCar => "owns_car",
            AttributeDim::Education => "education",
            AttributeDim::Housing => "housing",
            AttributeDim::PrimaryMode => "primary_mode",
        }
    }

    /// Single-letter label used in multiscale report rows (e.g. "A+I+O").
    pub fn letter(&self) -> char {
        match self {
            AttributeDim::Occupation => 'O',
            AttributeDim::AgeBand => 'A',
            AttributeDim::Income => 'I',
            AttributeDim::Gender => 'G',
            AttributeDim::OwnsCar => 'C',
            AttributeDim::Education => 'E',
            AttributeDim::Housing => 'H',
            AttributeDim::PrimaryMode => 'M',
        }
    }

    /// The profile's value on this dimension, as its canonical string.
    pub fn value_str(&self, p: &IndividualProfile) -> &'static str {
        match self {
            AttributeDim::Occupation => p.occupation.as_str(),
            AttributeDim::AgeBand => p.age_band.as_str(),
            AttributeDim::Income => p.income.as_str(),
            AttributeDim::Gender => p.gender.as_str(),
            AttributeDim::OwnsCar => owns_car_str(p.owns_car),
            AttributeDim::Education => p.education.as_str(),
            AttributeDim::Housing => p.housing.as_str(),
            AttributeDim::PrimaryMode => p.primary_mode.as_str(),
        }
    }

    /// Full vocabulary of the dimension, in canonical order.
    pub fn values(&self) -> Vec<&'static str> {
        match self {
            AttributeDim::Occupation => Occupation::ALL.iter().map(|v| v.as_str()).collect(),
            AttributeDim::AgeBand => AgeBand::ALL.iter().map(|v| v.as_str()).collect(),
            AttributeDim::Income => Income::ALL.iter().map(|v| v.as_str()).collect(),
            AttributeDim::Gender => Gender::ALL.iter().map(|v| v.as_str()).collect(),
            AttributeDim::OwnsCar => vec!["Yes", "No"],
            AttributeDim::Education => Education::ALL.iter().map(|v| v.as_str()).collect(),
            AttributeDim::Housing => Housing::ALL.iter().map(|v| v.as_str()).collect(),
            AttributeDim::PrimaryMode => TravelMode::ALL.iter().map(|v| v.as_str()).collect(),
        }
    }
}

impl std::str::FromStr for AttributeDim {
    type Err = VocabError;

    fn from_str(s: &str) -> Result<Self, VocabError> {
        AttributeDim::ALL
            .iter()
            .find(|d| d.name() == s)
            .copied()
            .ok_or_else(|| VocabError {
                field: "attribute_dimension",
                value: s.to_owned(),
                expected: &[
                    "occupation",
                    "age_band",
                    "income",
                    "gender",
                    "owns_car",
                    "education",
                    "housing",
                    "primary_mode",
                ],
            })
    }
}

impl std::fmt::Display for AttributeDim {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A named invariant failure. Violations are ordinary data so callers can
/// aggregate, count, or report them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Per-mode speed ceilings in km/h used to gate implausible legs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpeedCaps(pub BTreeMap<TravelMode, f64>);

impl SpeedCaps {
    pub fn cap_kmh(&self, mode: TravelMode) -> Option<f64> {
        self.0.get(&mode).copied()
    }

    /// True when every mode has a cap.
    pub fn covers_all_modes(&self) -> bool {
        TravelMode::ALL.iter().all(|m| self.0.contains_key(m))
    }
}

impl Default for SpeedCaps {
    fn default() -> Self {
        let mut caps = BTreeMap::new();
        caps.insert(TravelMode::Walking, 7.0);
        caps.insert(TravelMode::ElectricBikeBicycle, 25.0);
        caps.insert(TravelMode::BusAndSubway, 60.0);
        caps.insert(TravelMode::Driving, 90.0);
        caps.insert(TravelMode::TaxiRideHailing, 90.0);
        caps.insert(TravelMode::Other, 90.0);
        Self(caps)
    }
}

/// Slack applied to speed-cap comparisons so a leg at exactly the cap passes
/// despite float rounding.
const SPEED_EPS_KMH: f64 = 1e-9;

/// Checks all profile invariants; returns one violation per failed rule.
/// Vocabulary closure is enforced by construction (the enums are closed), so
/// this checks the remaining rules: nonempty id and in-range coordinates.
pub fn validate_profile(profile: &IndividualProfile) -> Vec<Violation> {
    let mut out = Vec::new();
    if profile.person_id.is_empty() {
        out.push(Violation::new("person_id", "must be nonempty"));
    }
    if !profile.home.in_bounds() {
        out.push(Violation::new(
            "home",
            format!("coordinate out of range: ({}, {})", profile.home.lat, profile.home.lon),
        ));
    }
    if let Some(work) = &profile.work {
        if !work.in_bounds() {
            out.push(Violation::new(
                "work",
                format!("coordinate out of range: ({}, {})", work.lat, work.lon),
            ));
        }
    }
    out
}

/// Checks all diary invariants: nonempty point list, in-range fields,
/// strictly increasing arrive times, non-overlapping legs (each leg departs
/// no earlier than the previous arrival, and the first leg departs no
/// earlier than midnight), and per-mode speed-cap feasibility.
pub fn validate_diary(diary: &TravelDiary, speed_caps: &SpeedCaps) -> Vec<Violation> {
    let mut out = Vec::new();
    if diary.person_id.is_empty() {
        out.push(Violation::new("person_id", "must be nonempty"));
    }
    if diary.points.is_empty() {
        out.push(Violation::new("points", "must be nonempty"));
        return out;
    }
    let mut prev_arrive: i32 = 0;
    for (i, p) in diary.points.iter().enumerate() {
        let field = |name: &str| format!("points[{i}].{name}");
        if p.arrive_time >= MINUTES_PER_DAY {
            out.push(Violation::new(
                field("arrive_time"),
                format!("{} is not within a single day", p.arrive_time),
            ));
        }
        if p.duration_min == 0 {
            out.push(Violation::new(field("duration_min"), "must be positive"));
        }
        if !(p.distance_m.is_finite() && p.distance_m >= 0.0) {
            out.push(Violation::new(
                field("distance_m"),
                format!("{} is not a nonnegative distance", p.distance_m),
            ));
        }
        if !p.location.in_bounds() {
            out.push(Violation::new(
                field("location"),
                format!("coordinate out of range: ({}, {})", p.location.lat, p.location.lon),
            ));
        }
        if i > 0 && i32::from(p.arrive_time) <= prev_arrive {
            out.push(Violation::new(
                field("arrive_time"),
                format!("non-monotone arrive_time: {} after {}", p.arrive_time, prev_arrive),
            ));
        }
        if p.duration_min > 0 && p.depart_min() < prev_arrive {
            out.push(Violation::new(
                field("duration_min"),
                format!(
                    "leg departing at minute {} overlaps the previous arrival at {}",
                    p.depart_min(),
                    prev_arrive
                ),
            ));
        }
        if p.duration_min > 0 && p.distance_m.is_finite() && p.distance_m >= 0.0 {
            match speed_caps.cap_kmh(p.mode) {
                Some(cap) => {
                    let speed = p.speed_kmh();
                    if speed > cap + SPEED_EPS_KMH {
                        out.push(Violation::new(
                            field("distance_m"),
                            format!(
                                "speed cap exceeded: {speed:.2} km/h > {cap} km/h for {}",
                                p.mode
                            ),
                        ));
                    }
                }
                None => {
                    out.push(Violation::new(
                        field("mode"),
                        format!("no speed cap configured for {}", p.mode),
                    ));
                }
            }
        }
        prev_arrive = i32::from(p.arrive_time);
    }
    out
}

impl Dataset {
    /// Number of distinct persons.
    pub fn person_count(&self) -> usize {
        self.profiles.len()
    }

    /// Total trajectory points across all diaries.
    pub fn point_count(&self) -> usize {
        self.diaries.iter().map(|d| d.points.len()).sum()
    }

    /// Checks referential integrity, diary-key uniqueness, and every
    /// profile and diary invariant.
    pub fn validate(&self, speed_caps: &SpeedCaps) -> Vec<Violation> {
        let mut out = Vec::new();
        for (id, profile) in &self.profiles {
            if *id != profile.person_id {
                out.push(Violation::new(
                    format!("profiles[{id}]"),
                    format!("keyed under {id:?} but person_id is {:?}", profile.person_id),
                ));
            }
            for v in validate_profile(profile) {
                out.push(Violation::new(format!("profiles[{id}].{}", v.field), v.message));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for diary in &self.diaries {
            let key = (diary.person_id.as_str(), diary.date);
            if !seen.insert(key) {
                out.push(Violation::new(
                    "diaries",
                    format!("duplicate diary for person {} on {}", diary.person_id, diary.date),
                ));
            }
            if !self.profiles.contains_key(&diary.person_id) {
                out.push(Violation::new(
                    "diaries",
                    format!("diary references unknown person {}", diary.person_id),
                ));
            }
            for v in validate_diary(diary, speed_caps) {
                out.push(Violation::new(
                    format!("diaries[{}@{}].{}", diary.person_id, diary.date, v.field),
                    v.message,
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(id: &str) -> IndividualProfile {
        IndividualProfile {
            person_id: id.to_owned(),
            age_band: AgeBand::From26To30,
            gender: Gender::Female,
            occupation: Occupation::ProfessionalTechnical,
            income: Income::Medium,
            education: Education::Bachelors,
            owns_car: false,
            housing: Housing::RentedHouse,
            primary_mode: TravelMode::BusAndSubway,
            home: GeoPoint::new(22.54, 114.06),
            work: Some(GeoPoint::new(22.55, 114.09)),
        }
    }

    fn point(arrive: u16, duration: u16, distance: f64, mode: TravelMode) -> TrajectoryPoint {
        TrajectoryPoint {
            arrive_time: arrive,
            location: GeoPoint::new(22.55, 114.09),
            purpose: TravelPurpose::CommutingToWork,
            distance_m: distance,
            mode,
            duration_min: duration,
        }
    }

    #[test]
    fn valid_profile_passes() {
        assert!(validate_profile(&profile("p1")).is_empty());
    }

    #[test]
    fn profile_without_work_is_valid() {
        let mut p = profile("p1");
        p.work = None;
        assert!(validate_profile(&p).is_empty());
    }

    #[test]
    fn out_of_range_home_names_the_field() {
        let mut p = profile("p1");
        p.home = GeoPoint::new(91.0, 114.06);
        let vs = validate_profile(&p);
        assert_eq!(vs.len(), 1);
        assert_eq!(vs[0].field, "home");
    }

    #[test]
    fn walking_leg_within_cap_is_ok() {
        // 1000 m in 20 min = 3 km/h, well under the 7 km/h walking cap.
        let diary = TravelDiary {
            person_id: "p1".into(),
            date: NaiveDate::from_ymd_opt(2016, 11, 15).unwrap(),
            points: vec![point(520, 20, 1000.0, TravelMode::Walking)],
            provenance: None,
        };
        assert!(validate_diary(&diary, &SpeedCaps::default()).is_empty());
    }

    #[test]
    fn walking_leg_over_cap_is_flagged() {
        // 10000 m in 10 min = 60 km/h, far over the 7 km/h walking cap.
        let diary = TravelDiary {
            person_id: "p1".into(),
            date: NaiveDate::from_ymd_opt(2016, 11, 15).unwrap(),
            points: vec![point(520, 10, 10_000.0, TravelMode::Walking)],
            provenance: None,
        };
        let vs = validate_diary(&diary, &SpeedCaps::default());
        assert_eq!(vs.len(), 1);
        assert!(vs[0].message.contains("speed cap exceeded"), "{}", vs[0]);
    }

    #[test]
    fn non_monotone_arrivals_are_flagged() {
        let diary = TravelDiary {
            person_id: "p1".into(),
            date: NaiveDate::from_ymd_opt(2016, 11, 15).unwrap(),
            points: vec![
                point(540, 10, 500.0, TravelMode::Walking),
                point(530, 10, 500.0, TravelMode::Walking),
            ],
            provenance: None,
        };
        let vs = validate_diary(&diary, &SpeedCaps::default());
        assert!(vs.iter().any(|v| v.message.contains("non-monotone")));
    }

    #[test]
    fn overlapping_legs_are_flagged() {
        // Second leg departs at 545 − 30 = 515, before the 540 arrival.
        let diary = TravelDiary {
            person_id: "p1".into(),
            date: NaiveDate::from_ymd_opt(2016, 11, 15).unwrap(),
            points: vec![
                point(540, 10, 500.0, TravelMode::Walking),
                point(545, 30, 1000.0, TravelMode::Walking),
            ],
            provenance: None,
        };
        let vs = validate_diary(&diary, &SpeedCaps::default());
        assert!(vs.iter().any(|v| v.message.contains("overlaps")));
    }

    #[test]
    fn first_leg_cannot_start_before_midnight() {
        let diary = TravelDiary {
            person_id: "p1".into(),
            date: NaiveDate::from_ymd_opt(2016, 11, 15).unwrap(),
            points: vec![point(10, 30, 1000.0, TravelMode::Walking)],
            provenance: None,
        };
        let vs = validate_diary(&diary, &SpeedCaps::default());
        assert!(vs.iter().any(|v| v.message.contains("overlaps")));
    }

    #[test]
    fn empty_diary_is_invalid() {
        let diary = TravelDiary {
            person_id: "p1".into(),
            date: NaiveDate::from_ymd_opt(2016, 11, 15).unwrap(),
            points: vec![],
            provenance: None,
        };
        let vs = validate_diary(&diary, &SpeedCaps::default());
        assert_eq!(vs.len(), 1);
        assert_eq!(vs[0].field, "points");
    }

    #[test]
    fn dataset_validation_catches_unknown_person_and_duplicates() {
        let mut ds = Dataset::default();
        ds.profiles.insert("p1".into(), profile("p1"));
        let d = TravelDiary {
            person_id: "p2".into(),
            date: NaiveDate::from_ymd_opt(2016, 11, 15).unwrap(),
            points: vec![point(520, 20, 1000.0, TravelMode::Walking)],
            provenance: None,
        };
        ds.diaries.push(d.clone());
        ds.diaries.push(d);
        let vs = ds.validate(&SpeedCaps::default());
        assert!(vs.iter().any(|v| v.message.contains("unknown person")));
        assert!(vs.iter().any(|v| v.message.contains("duplicate diary")));
    }

    #[test]
    fn attribute_dim_names_match_serde_and_letters_are_unique() {
        let mut letters = std::collections::BTreeSet::new();
        for dim in AttributeDim::ALL {
            let json = serde_json::to_string(&dim).unwrap();
            assert_eq!(json, format!("\"{}\"", dim.name()));
            assert_eq!(dim.name().parse::<AttributeDim>().unwrap(), dim);
            assert!(letters.insert(dim.letter()), "duplicate letter {}", dim.letter());
        }
        assert_eq!(AttributeDim::AgeBand.letter(), 'A');
        assert_eq!(AttributeDim::Income.letter(), 'I');
        assert_eq!(AttributeDim::Occupation.letter(), 'O');
    }

    #[test]
    fn attribute_values_come_from_profile() {
        let p = profile("p1");
        assert_eq!(AttributeDim::Occupation.value_str(&p), "Professional and Technical Personnel");
        assert_eq!(AttributeDim::OwnsCar.value_str(&p), "No");
        assert_eq!(AttributeDim::AgeBand.value_str(&p), "26-30");
    }

    #[test]
    fn removing_a_point_from_a_valid_diary_keeps_it_valid() {
        // Ordering violations cannot appear by deletion: the constraint set
        // only shrinks.
        let caps = SpeedCaps::default();
        let diary = TravelDiary {
            person_id: "p1".into(),
            date: NaiveDate::from_ymd_opt(2016, 11, 15).unwrap(),
            points: vec![
                point(510, 30, 2000.0, TravelMode::BusAndSubway),
                point(700, 15, 1000.0, TravelMode::Walking),
                point(1120, 40, 9000.0, TravelMode::Driving),
            ],
            provenance: None,
        };
        assert!(validate_diary(&diary, &caps).is_empty());
        for skip in 0..diary.points.len() {
            let mut thinner = diary.clone();
            thinner.points.remove(skip);
            assert!(
                validate_diary(&thinner, &caps).is_empty(),
                "dropping point {skip} broke validity"
            );
        }
    }
}
