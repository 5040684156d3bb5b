//! Per-person-day diary generation: plan the day, then walk it step by
//! step with recursive reasoning, validating each decision, re-thinking
//! rejected ones, and anchoring every committed step to the road network.
//!
//! The walk is strictly sequential within one person-day (each step
//! conditions on the committed schedule); person-days themselves are
//! independent and parallelize with per-person-day sub-seeds.

use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockfmt::{
    fmt_hhmm, parse_decision_block, parse_plan_block, render_plan_block, BlockError, PlanEntry,
};
use crate::domain::{
    validate_diary, DayType, IndividualProfile, PersonDay, SpeedCaps, TrajectoryPoint,
    TravelDiary, TravelMode, TravelPurpose, Violation, MINUTES_PER_DAY,
};
use crate::gateway::{render_prompt, CompletionParams, Gateway, GatewayError, ReplayContext, TemplateId};
use crate::pattern::{render_profile, subseed, MobilityPattern};
use crate::spatial::{AnchorResult, CategoryQuery, PoiCategory, SpatialError, SpatialIndex};
use crate::{GeoPoint, Rng, SeededRng};

#[derive(Debug, Error)]
pub enum ReasonerError {
    #[error("daily plan unparseable after re-prompt: {detail}")]
    PlanUnparseable { detail: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
}

/// Generation-time tunables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReasonerConfig {
    /// Maximum snap distance from a raw coordinate to a network node.
    pub snap_radius_m: f64,
    /// Re-prompts allowed per step before the sampling fallback kicks in.
    pub max_rethinks: u32,
    /// Skip re-prompting entirely: a rejected first decision falls straight
    /// back to the sampler.
    pub disable_rethink: bool,
    /// Assumed cruising speed per mode (km/h) for synthesizing durations.
    /// Every value must stay at or below the corresponding validation cap,
    /// or emitted legs would fail their own speed check.
    pub cruise_speeds_kmh: SpeedCaps,
    /// Hard per-mode speed ceilings used to validate decisions and diaries.
    pub speed_caps: SpeedCaps,
}

/// Cruising speeds sit well below the validation caps so that rounding a
/// duration down a minute can never push a leg over its cap.
pub fn default_cruise_speeds() -> SpeedCaps {
    let mut speeds = std::collections::BTreeMap::new();
    speeds.insert(TravelMode::Walking, 5.0);
    speeds.insert(TravelMode::ElectricBikeBicycle, 15.0);
    speeds.insert(TravelMode::BusAndSubway, 25.0);
    speeds.insert(TravelMode::Driving, 40.0);
    speeds.insert(TravelMode::TaxiRideHailing, 40.0);
    speeds.insert(TravelMode::Other, 30.0);
    SpeedCaps(speeds)
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        ReasonerConfig {
            snap_radius_m: 500.0,
            max_rethinks: 3,
            disable_rethink: false,
            cruise_speeds_kmh: default_cruise_speeds(),
            speed_caps: SpeedCaps::default(),
        }
    }
}

/// The structured plan for one person-day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyPlan {
    pub person_id: String,
    pub date: NaiveDate,
    pub day_type: DayType,
    pub entries: Vec<PlanEntry>,
}

/// Plan invariants beyond what parsing enforces: windows must be
/// well-formed, strictly increasing, and non-overlapping, and each distance
/// range must be ordered. Vocabulary closure holds by construction.
pub fn validate_plan(entries: &[PlanEntry]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut prev_end: u16 = 0;
    for (i, e) in entries.iter().enumerate() {
        let field = |name: &str| format!("entries[{i}].{name}");
        if e.window_start >= e.window_end {
            out.push(Violation::new(
                field("window"),
                format!("empty window {}-{}", fmt_hhmm(e.window_start), fmt_hhmm(e.window_end)),
            ));
        }
        if i > 0 && e.window_start < prev_end {
            out.push(Violation::new(
                field("window"),
                format!(
                    "window starting {} overlaps the previous window ending {}",
                    fmt_hhmm(e.window_start),
                    fmt_hhmm(prev_end)
                ),
            ));
        }
        if e.distance_lo_m > e.distance_hi_m {
            out.push(Violation::new(
                field("distance"),
                format!("inverted range {}-{}", e.distance_lo_m, e.distance_hi_m),
            ));
        }
        prev_end = prev_end.max(e.window_end);
    }
    out
}

/// One reasoned activity: what, when, roughly how far, and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityDecision {
    /// Departure, minutes since midnight, strictly within the day.
    pub depart_min: u16,
    pub purpose: TravelPurpose,
    pub category: CategoryQuery,
    pub distance_lo_m: u32,
    pub distance_hi_m: u32,
    pub mode: TravelMode,
    /// The full response the decision was parsed from.
    pub rationale: String,
}

impl ActivityDecision {
    /// The single target distance handed to the anchorer: the midpoint of
    /// the decided range.
    pub fn target_distance_m(&self) -> f64 {
        (f64::from(self.distance_lo_m) + f64::from(self.distance_hi_m)) / 2.0
    }
}

/// A committed step: the decision, where it anchored, and when it landed.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledStep {
    pub decision: ActivityDecision,
    pub anchor: AnchorResult,
    pub arrive_time: u16,
    pub duration_min: u16,
}

/// The walker's view of the day so far.
#[derive(Debug)]
pub struct ReasonerState<'a> {
    pub profile: &'a IndividualProfile,
    pub pattern: &'a MobilityPattern,
    pub plan: &'a DailyPlan,
    pub schedule: Vec<ScheduledStep>,
    /// Minutes since midnight; never before the last committed arrival.
    pub current_time: u16,
    pub current_location: GeoPoint,
    /// Network node of the current location.
    pub current_node: u32,
    /// Index of the next plan entry to reason about.
    pub next_entry: usize,
}

impl<'a> ReasonerState<'a> {
    pub fn new(
        profile: &'a IndividualProfile,
        pattern: &'a MobilityPattern,
        plan: &'a DailyPlan,
        home_node: u32,
    ) -> Self {
        ReasonerState {
            profile,
            pattern,
            plan,
            schedule: Vec::new(),
            current_time: 0,
            current_location: profile.home,
            current_node: home_node,
            next_entry: 0,
        }
    }

    fn pending_entry(&self) -> &PlanEntry {
        &self.plan.entries[self.next_entry]
    }

    /// The committed schedule as a prompt slot.
    fn schedule_text(&self) -> String {
        if self.schedule.is_empty() {
            return "none yet: the day has not started".to_owned();
        }
        self.schedule
            .iter()
            .map(|s| {
                format!(
                    "departed {} | {} | arrived {} at ({:.6}, {:.6}) | {} | {} m",
                    fmt_hhmm(s.decision.depart_min),
                    s.decision.purpose,
                    fmt_hhmm(s.arrive_time),
                    s.anchor.location.lat,
                    s.anchor.location.lon,
                    s.decision.mode,
                    s.anchor.network_distance_m.round() as i64,
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

// ---------------------------------------------------------------------------
// Daily plan
// ---------------------------------------------------------------------------

fn day_info(date: NaiveDate) -> String {
    format!("{} ({}), a {}", date, date.format("%A"), DayType::from_date(date).name())
}

/// Produces and validates the day's plan. An unparseable or invalid first
/// response earns exactly one re-prompt with the violation appended; a
/// second failure is fatal.
pub fn generate_plan(
    profile: &IndividualProfile,
    pattern: &MobilityPattern,
    date: NaiveDate,
    gateway: &Gateway,
) -> Result<(DailyPlan, Vec<String>), ReasonerError> {
    let day_type = DayType::from_date(date);
    let profile_slot = render_profile(profile);
    let pattern_slot = pattern.retrieval_text();
    let day_slot = day_info(date);
    let rendered =
        render_prompt(TemplateId::DailyPlan, &[&profile_slot, &pattern_slot, &day_slot])?;
    let ctx = ReplayContext::Plan { stats: Arc::new(pattern.stats.clone()), day_type };
    let mut provenance = Vec::with_capacity(2);

    let completion = gateway.complete(&rendered, &CompletionParams::generation(), &ctx)?;
    provenance.push(completion.request_hash.clone());
    let first_failure = match parse_and_check(&completion.text) {
        Ok(entries) => {
            return Ok((DailyPlan { person_id: profile.person_id.clone(), date, day_type, entries }, provenance))
        }
        Err(detail) => detail,
    };

    let retry = rendered.with_suffix(&format!(
        "Your previous answer was invalid ({first_failure}). \
         Answer again, following the required format exactly."
    ));
    let completion = gateway.complete(&retry, &CompletionParams::generation(), &ctx)?;
    provenance.push(completion.request_hash.clone());
    match parse_and_check(&completion.text) {
        Ok(entries) => {
            Ok((DailyPlan { person_id: profile.person_id.clone(), date, day_type, entries }, provenance))
        }
        Err(detail) => Err(ReasonerError::PlanUnparseable { detail }),
    }
}

fn parse_and_check(response: &str) -> Result<Vec<PlanEntry>, String> {
    let entries = parse_plan_block(response).map_err(|e| e.to_string())?;
    let violations = validate_plan(&entries);
    if violations.is_empty() {
        Ok(entries)
    } else {
        Err(violations.iter().map(Violation::to_string).collect::<Vec<_>>().join("; "))
    }
}

// ---------------------------------------------------------------------------
// Step reasoning
// ---------------------------------------------------------------------------

/// One backend exchange about the pending step. Gateway failures are
/// errors; an unparseable response is data for the rethink loop.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub decision: Result<ActivityDecision, BlockError>,
    pub response: String,
    pub request_hash: String,
}

/// Asks the backend for the pending step's decision. `suffix` carries the
/// previous round's violations during a rethink.
pub fn reason_step(
    state: &ReasonerState,
    gateway: &Gateway,
    suffix: Option<&str>,
) -> Result<StepOutcome, ReasonerError> {
    let time_slot = fmt_hhmm(state.current_time);
    let plan_slot = render_plan_block(&state.plan.entries);
    let schedule_slot = state.schedule_text();
    let profile_slot = render_profile(state.profile);
    let patterns_slot = state.pattern.retrieval_text();
    let mut rendered = render_prompt(
        TemplateId::RecursiveReasoning,
        &[&time_slot, &plan_slot, &schedule_slot, &profile_slot, &patterns_slot],
    )?;
    if let Some(suffix) = suffix {
        rendered = rendered.with_suffix(suffix);
    }
    let ctx = ReplayContext::Step { entry: state.pending_entry().clone() };
    let completion = gateway.complete(&rendered, &CompletionParams::generation(), &ctx)?;
    let decision = parse_decision_block(&completion.text).map(|d| ActivityDecision {
        depart_min: d.depart_min,
        purpose: d.purpose,
        category: d.category,
        distance_lo_m: d.distance_lo_m,
        distance_hi_m: d.distance_hi_m,
        mode: d.mode,
        rationale: completion.text.clone(),
    });
    Ok(StepOutcome { decision, response: completion.text, request_hash: completion.request_hash })
}

/// Feasibility checks on a decision against the day so far. Vocabulary
/// membership is enforced by the parser's closed enums, so the checks here
/// are the temporal and physical ones; violations are data for the rethink
/// loop, never errors.
pub fn validate_decision(
    decision: &ActivityDecision,
    current_time: u16,
    speed_caps: &SpeedCaps,
) -> Vec<Violation> {
    let mut out = Vec::new();
    if decision.depart_min <= current_time {
        out.push(Violation::new(
            "depart",
            format!(
                "time regression: departs at {} but the day has already reached {}",
                fmt_hhmm(decision.depart_min),
                fmt_hhmm(current_time)
            ),
        ));
    }
    if decision.distance_lo_m > decision.distance_hi_m {
        out.push(Violation::new(
            "distance",
            format!("inverted range {}-{}", decision.distance_lo_m, decision.distance_hi_m),
        ));
    }
    if decision.distance_hi_m > 100_000 {
        out.push(Violation::new(
            "distance",
            format!("range up to {} m exceeds the 100 km sanity bound", decision.distance_hi_m),
        ));
    }
    if let Some(cap) = speed_caps.cap_kmh(decision.mode) {
        let minimal_travel_min = f64::from(decision.distance_lo_m) / 1000.0 / cap * 60.0;
        if f64::from(decision.depart_min) + minimal_travel_min >= f64::from(MINUTES_PER_DAY) {
            out.push(Violation::new(
                "depart",
                format!(
                    "cannot complete before midnight: {} m at {cap} km/h from {}",
                    decision.distance_lo_m,
                    fmt_hhmm(decision.depart_min)
                ),
            ));
        }
    } else {
        out.push(Violation::new("mode", format!("no speed cap configured for {}", decision.mode)));
    }
    if decision.purpose == TravelPurpose::ReturningHome
        && decision.category != CategoryQuery::One(PoiCategory::Residence)
    {
        out.push(Violation::new(
            "category",
            format!("returning home must target residence, not {}", decision.category),
        ));
    }
    out
}

/// The sampling fallback for a step the backend kept getting wrong: the
/// plan entry's own fields with a seeded departure jitter inside the
/// window, clamped forward so time still advances.
fn fallback_decision(entry: &PlanEntry, current_time: u16, rng: &mut SeededRng) -> ActivityDecision {
    let end = entry.window_end.max(entry.window_start + 1);
    let jitter = rng.random_range(entry.window_start..end).min(MINUTES_PER_DAY - 1);
    ActivityDecision {
        depart_min: jitter.max(current_time.saturating_add(1)),
        purpose: entry.purpose,
        category: entry.category,
        distance_lo_m: entry.distance_lo_m,
        distance_hi_m: entry.distance_hi_m,
        mode: entry.mode,
        rationale: "(sampling fallback after exhausted rethinks)".to_owned(),
    }
}

// ---------------------------------------------------------------------------
// End-to-end person-day generation
// ---------------------------------------------------------------------------

/// How one committed step was anchored; kept alongside the diary so the
/// anchored-distance consistency of every point stays assertable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub point_index: usize,
    pub target_distance_m: f64,
    pub anchor: AnchorResult,
    /// Rethink rounds the step consumed before acceptance or fallback.
    pub rethinks: u32,
    /// True when the step came from the sampling fallback.
    pub fallback: bool,
}

/// A generated diary plus its anchoring trail and any dropped-step notes.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDiary {
    pub diary: TravelDiary,
    pub anchors: Vec<AnchorRecord>,
    pub warnings: Vec<String>,
}

/// What one person-day produced: a diary, or a zero-trip marker that the
/// per-day statistics still count.
#[derive(Debug, Clone, PartialEq)]
pub enum DiaryOutcome {
    Diary(GeneratedDiary),
    NoTrips(PersonDay),
}

/// Plans and walks one person-day end to end. Every committed point's
/// `distance_m` is exactly the anchored network distance; the finished
/// diary always passes [`validate_diary`], enforced here because emitting
/// an invalid diary is a defect, not a data condition.
pub fn generate_diary(
    profile: &IndividualProfile,
    pattern: &MobilityPattern,
    date: NaiveDate,
    gateway: &Gateway,
    spatial: &SpatialIndex,
    cfg: &ReasonerConfig,
    run_seed: u64,
) -> Result<DiaryOutcome, ReasonerError> {
    let (plan, mut provenance) = generate_plan(profile, pattern, date, gateway)?;
    let person_day = PersonDay { person_id: profile.person_id.clone(), date };
    if plan.entries.is_empty() {
        return Ok(DiaryOutcome::NoTrips(person_day));
    }
    let home_node = spatial.snap(&profile.home)?;
    let mut state = ReasonerState::new(profile, pattern, &plan, home_node);
    let mut rng =
        crate::seeded_rng(subseed(run_seed, &format!("diary:{}:{}", profile.person_id, date)));
    let mut points: Vec<TrajectoryPoint> = Vec::with_capacity(plan.entries.len());
    let mut anchors = Vec::with_capacity(plan.entries.len());
    let mut warnings = Vec::new();

    while state.next_entry < plan.entries.len() {
        if state.current_time >= MINUTES_PER_DAY - 1 {
            break; // no departure minute after current_time remains today
        }
        let decided = decide_step(&state, gateway, cfg, &mut rng)?;
        let decision = decided.decision;
        if decision.depart_min >= MINUTES_PER_DAY {
            break; // even the clamped fallback starts past midnight
        }

        let target_d = decision.target_distance_m();
        let anchored = if decision.purpose == TravelPurpose::ReturningHome {
            spatial.anchor_node(state.current_node, home_node)
        } else {
            spatial.anchor_from_node(state.current_node, &decision.category, target_d)
        };
        let anchor = match anchored {
            Ok(a) => a,
            Err(e @ (SpatialError::NoPoiOfCategory(_) | SpatialError::NoReachablePoi(_))) => {
                warnings.push(format!(
                    "dropped step {} ({}): {e}",
                    state.next_entry + 1,
                    decision.purpose
                ));
                state.next_entry += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };

        let cruise = cfg
            .cruise_speeds_kmh
            .cap_kmh(decision.mode)
            .expect("cruise speed table covers all modes");
        let duration_min =
            ((anchor.network_distance_m / 1000.0 / cruise * 60.0).ceil() as u16).max(1);
        let Some(arrive_time) = decision.depart_min.checked_add(duration_min) else {
            break;
        };
        if arrive_time >= MINUTES_PER_DAY {
            break; // the day ends before this leg could arrive
        }

        provenance.push(match &decided.request_hash {
            Some(hash) => hash.clone(),
            None => format!("fallback:step:{}", state.next_entry + 1),
        });
        points.push(TrajectoryPoint {
            arrive_time,
            location: anchor.location,
            purpose: decision.purpose,
            distance_m: anchor.network_distance_m,
            mode: decision.mode,
            duration_min,
        });
        anchors.push(AnchorRecord {
            point_index: points.len() - 1,
            target_distance_m: target_d,
            anchor: anchor.clone(),
            rethinks: decided.rethinks,
            fallback: decided.request_hash.is_none(),
        });
        state.current_time = arrive_time;
        state.current_location = anchor.location;
        state.current_node = anchor.dest_node;
        state.schedule.push(ScheduledStep { decision, anchor, arrive_time, duration_min });
        state.next_entry += 1;
    }

    if points.is_empty() {
        return Ok(DiaryOutcome::NoTrips(person_day));
    }
    let diary = TravelDiary {
        person_id: profile.person_id.clone(),
        date,
        points,
        provenance: Some(provenance),
    };
    let violations = validate_diary(&diary, &cfg.speed_caps);
    assert!(
        violations.is_empty(),
        "generated diary for {} on {date} violates its own invariants: {}",
        profile.person_id,
        violations.iter().map(Violation::to_string).collect::<Vec<_>>().join("; ")
    );
    Ok(DiaryOutcome::Diary(GeneratedDiary { diary, anchors, warnings }))
}

/// The rethink loop's result for one step.
struct DecidedStep {
    decision: ActivityDecision,
    /// Transcript id of the accepted exchange; `None` marks the fallback.
    request_hash: Option<String>,
    rethinks: u32,
}

/// Runs the rethink loop for the pending step: ask, validate, append the
/// violations and ask again (bounded), then fall back to sampling.
/// Backend calls per step never exceed `1 + max_rethinks`.
fn decide_step(
    state: &ReasonerState,
    gateway: &Gateway,
    cfg: &ReasonerConfig,
    rng: &mut SeededRng,
) -> Result<DecidedStep, ReasonerError> {
    let mut rethinks = 0u32;
    let mut suffix: Option<String> = None;
    loop {
        let outcome = reason_step(state, gateway, suffix.as_deref())?;
        let failure = match outcome.decision {
            Ok(decision) => {
                let violations =
                    validate_decision(&decision, state.current_time, &cfg.speed_caps);
                if violations.is_empty() {
                    return Ok(DecidedStep {
                        decision,
                        request_hash: Some(outcome.request_hash),
                        rethinks,
                    });
                }
                violations.iter().map(Violation::to_string).collect::<Vec<_>>().join("; ")
            }
            Err(e) => e.to_string(),
        };
        if cfg.disable_rethink || rethinks >= cfg.max_rethinks {
            let decision = fallback_decision(state.pending_entry(), state.current_time, rng);
            return Ok(DecidedStep { decision, request_hash: None, rethinks });
        }
        rethinks += 1;
        // The round number keeps repeated rejections from hashing to the
        // same request and short-circuiting through the transcript cache.
        suffix = Some(format!(
            "Rethink round {rethinks}: your previous answer was rejected ({failure}). \
             Think again and answer in the required format."
        ));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{summarize, CohortKey, CohortStats};
    use crate::domain::vocab::*;
    use crate::domain::Dataset;
    use crate::eval::BinningConfig;
    use crate::gateway::{BackendKind, ScriptedBackend, TranscriptStore};
    use crate::pattern::EvalScores;
    use crate::spatial::grid::{generate_grid, grid_coord, GridSpec};
    use crate::spatial::{PoiIndex, RoadNetwork};
    use std::collections::BTreeSet;

    fn grid_spec() -> GridSpec {
        GridSpec {
            rows: 5,
            cols: 6,
            spacing_m: 500.0,
            origin: GeoPoint::new(22.5, 114.0),
            pois_per_category: 4,
            seed: 11,
        }
    }

    fn spatial_index(spec: &GridSpec) -> SpatialIndex {
        let data = generate_grid(spec);
        let network = RoadNetwork::build(data.nodes, data.edges).unwrap();
        let (pois, rejected) = PoiIndex::build(&network, data.pois, 500.0, true).unwrap();
        assert!(rejected.is_empty());
        SpatialIndex::new(network, pois, 500.0)
    }

    fn grid_profile(spec: &GridSpec, id: &str) -> IndividualProfile {
        IndividualProfile {
            person_id: id.to_owned(),
            age_band: AgeBand::From31To35,
            gender: Gender::Female,
            occupation: Occupation::SkilledWorkers,
            income: Income::Medium,
            education: Education::Bachelors,
            owns_car: true,
            housing: Housing::OwnedHouse,
            primary_mode: TravelMode::Driving,
            home: grid_coord(spec, 0, 0),
            work: Some(grid_coord(spec, 4, 5)),
        }
    }

    fn point(arrive: u16, purpose: TravelPurpose, distance_m: f64) -> TrajectoryPoint {
        TrajectoryPoint {
            arrive_time: arrive,
            location: GeoPoint::new(22.51, 114.01),
            purpose,
            distance_m,
            mode: TravelMode::Driving,
            duration_min: 20,
        }
    }

    /// A cohort whose every member drives to work at 8 and home at 18,
    /// 2 km each way — the replay sampler reproduces exactly that plan.
    fn commuter_stats() -> CohortStats {
        let mut ds = Dataset::default();
        let spec = grid_spec();
        for i in 0..6 {
            let id = format!("p{i}");
            ds.profiles.insert(id.clone(), grid_profile(&spec, &id));
            for date in ["2016-11-21", "2016-11-22", "2016-11-23"] {
                ds.diaries.push(TravelDiary {
                    person_id: id.clone(),
                    date: NaiveDate::parse_from_str(date, "%Y-%m-%d").unwrap(),
                    points: vec![
                        point(8 * 60 + 20, TravelPurpose::CommutingToWork, 2000.0),
                        point(18 * 60 + 20, TravelPurpose::ReturningHome, 2000.0),
                    ],
                    provenance: None,
                });
            }
        }
        let members: BTreeSet<String> = ds.profiles.keys().cloned().collect();
        summarize(&ds, &members, &BinningConfig::default()).unwrap()
    }

    fn pattern_with(stats: CohortStats) -> MobilityPattern {
        MobilityPattern {
            cohort_key: CohortKey::root(),
            node_id: 0,
            stats,
            narrative: "commuters with a fixed 8-to-18 drive".into(),
            revision: 0,
            eval_scores: EvalScores::default(),
            provenance: Vec::new(),
        }
    }

    fn replay_gateway(seed: u64) -> Gateway {
        Gateway::new(BackendKind::Replay { run_seed: seed }, TranscriptStore::in_memory())
    }

    fn monday() -> NaiveDate {
        NaiveDate::parse_from_str("2016-11-21", "%Y-%m-%d").unwrap()
    }

    fn decision(depart: u16, purpose: TravelPurpose, lo: u32, hi: u32, mode: TravelMode) -> ActivityDecision {
        ActivityDecision {
            depart_min: depart,
            purpose,
            category: CategoryQuery::for_purpose(purpose),
            distance_lo_m: lo,
            distance_hi_m: hi,
            mode,
            rationale: String::new(),
        }
    }

    #[test]
    fn plan_validation_flags_overlaps_and_inverted_ranges() {
        let entry = |start: u16, end: u16| PlanEntry {
            window_start: start,
            window_end: end,
            purpose: TravelPurpose::Shopping,
            category: CategoryQuery::One(PoiCategory::Shop),
            distance_lo_m: 500,
            distance_hi_m: 1500,
            mode: TravelMode::Walking,
        };
        assert!(validate_plan(&[entry(480, 540), entry(600, 660)]).is_empty());
        let overlapping = validate_plan(&[entry(480, 540), entry(520, 600)]);
        assert!(overlapping.iter().any(|v| v.message.contains("overlaps")));
        let empty_window = validate_plan(&[entry(540, 540)]);
        assert!(empty_window.iter().any(|v| v.message.contains("empty window")));
        let mut inverted = entry(480, 540);
        inverted.distance_lo_m = 2000;
        assert!(validate_plan(&[inverted]).iter().any(|v| v.message.contains("inverted")));
    }

    #[test]
    fn replay_plan_reproduces_a_degenerate_cohort_exactly() {
        let pattern = pattern_with(commuter_stats());
        let profile = grid_profile(&grid_spec(), "p0");
        let (plan, provenance) =
            generate_plan(&profile, &pattern, monday(), &replay_gateway(3)).unwrap();
        assert_eq!(provenance.len(), 1, "valid on the first exchange");
        assert_eq!(plan.day_type, DayType::Weekday);
        assert_eq!(plan.entries.len(), 2);
        assert_eq!(plan.entries[0].window_start, 480);
        assert_eq!(plan.entries[0].window_end, 540);
        assert_eq!(plan.entries[0].purpose, TravelPurpose::CommutingToWork);
        assert_eq!(plan.entries[0].mode, TravelMode::Driving);
        assert!(plan.entries[0].distance_lo_m <= 2000 && 2000 <= plan.entries[0].distance_hi_m);
        assert_eq!(plan.entries[1].window_start, 1080);
        assert_eq!(plan.entries[1].purpose, TravelPurpose::ReturningHome);
        assert!(validate_plan(&plan.entries).is_empty());
    }

    #[test]
    fn invalid_plan_gets_one_reprompt_then_fails() {
        let pattern = pattern_with(commuter_stats());
        let profile = grid_profile(&grid_spec(), "p0");
        let profile_slot = render_profile(&profile);
        let pattern_slot = pattern.retrieval_text();
        let day_slot = day_info(monday());
        let slots: [&str; 3] = [&profile_slot, &pattern_slot, &day_slot];
        let overlapping = "```\nWINDOW: 08:00-09:00\nPURPOSE: Shopping\nCATEGORY: shop\n\
                           DISTANCE_M: 500-1500\nMODE: Walking\nWINDOW: 08:30-09:30\n\
                           PURPOSE: Shopping\nCATEGORY: shop\nDISTANCE_M: 500-1500\n\
                           MODE: Walking\n```";

        // Retry fixture also invalid -> fatal.
        let mut scripted = ScriptedBackend::new(false);
        scripted.insert(TemplateId::DailyPlan, &slots, overlapping);
        let gw = Gateway::new(BackendKind::Scripted(scripted), TranscriptStore::in_memory());
        let err = generate_plan(&profile, &pattern, monday(), &gw).unwrap_err();
        assert!(matches!(err, ReasonerError::PlanUnparseable { .. }), "{err}");
        assert_eq!(gw.dispatch_count(), 2, "exactly one re-prompt");

        // Retry fixture valid -> plan accepted with two transcript ids.
        let mut scripted = ScriptedBackend::new(false);
        scripted.insert(TemplateId::DailyPlan, &slots, overlapping);
        let violation = parse_and_check(overlapping).unwrap_err();
        let suffix = format!(
            "Your previous answer was invalid ({violation}). \
             Answer again, following the required format exactly."
        );
        scripted.insert_suffixed(
            TemplateId::DailyPlan,
            &slots,
            &suffix,
            "```\nWINDOW: 10:00-11:00\nPURPOSE: Shopping\nCATEGORY: shop\n\
             DISTANCE_M: 500-1500\nMODE: Walking\n```",
        );
        let gw = Gateway::new(BackendKind::Scripted(scripted), TranscriptStore::in_memory());
        let (plan, provenance) = generate_plan(&profile, &pattern, monday(), &gw).unwrap();
        assert_eq!(plan.entries.len(), 1);
        assert_eq!(plan.entries[0].window_start, 600);
        assert_eq!(provenance.len(), 2, "both exchanges recorded");
    }

    #[test]
    fn scripted_decision_block_parses_to_the_worked_example() {
        let pattern = pattern_with(commuter_stats());
        let profile = grid_profile(&grid_spec(), "p0");
        let plan = DailyPlan {
            person_id: "p0".into(),
            date: monday(),
            day_type: DayType::Weekday,
            entries: vec![PlanEntry {
                window_start: 600,
                window_end: 660,
                purpose: TravelPurpose::Shopping,
                category: CategoryQuery::One(PoiCategory::Shop),
                distance_lo_m: 1500,
                distance_hi_m: 3000,
                mode: TravelMode::Walking,
            }],
        };
        let state = ReasonerState::new(&profile, &pattern, &plan, 0);
        let time_slot = fmt_hhmm(state.current_time);
        let plan_slot = render_plan_block(&plan.entries);
        let schedule_slot = state.schedule_text();
        let profile_slot = render_profile(&profile);
        let patterns_slot = pattern.retrieval_text();
        let slots: [&str; 5] =
            [&time_slot, &plan_slot, &schedule_slot, &profile_slot, &patterns_slot];

        let mut scripted = ScriptedBackend::new(true);
        scripted.insert(
            TemplateId::RecursiveReasoning,
            &slots,
            "```\nPURPOSE: Shopping\nCATEGORY: shop\nDEPART: 10:30\n\
             DISTANCE_M: 1500-3000\nMODE: Walking\n```",
        );
        let gw = Gateway::new(BackendKind::Scripted(scripted), TranscriptStore::in_memory());
        let outcome = reason_step(&state, &gw, None).unwrap();
        let decision = outcome.decision.unwrap();
        assert_eq!(decision.depart_min, 630);
        assert_eq!(decision.distance_lo_m, 1500);
        assert_eq!(decision.distance_hi_m, 3000);
        assert_eq!(decision.mode, TravelMode::Walking);
        assert!(validate_decision(&decision, 0, &SpeedCaps::default()).is_empty());
    }

    #[test]
    fn response_missing_mode_is_unparseable_data() {
        let pattern = pattern_with(commuter_stats());
        let profile = grid_profile(&grid_spec(), "p0");
        let plan = DailyPlan {
            person_id: "p0".into(),
            date: monday(),
            day_type: DayType::Weekday,
            entries: vec![PlanEntry {
                window_start: 600,
                window_end: 660,
                purpose: TravelPurpose::Shopping,
                category: CategoryQuery::One(PoiCategory::Shop),
                distance_lo_m: 1500,
                distance_hi_m: 3000,
                mode: TravelMode::Walking,
            }],
        };
        let state = ReasonerState::new(&profile, &pattern, &plan, 0);
        let time_slot = fmt_hhmm(state.current_time);
        let plan_slot = render_plan_block(&plan.entries);
        let schedule_slot = state.schedule_text();
        let profile_slot = render_profile(&profile);
        let patterns_slot = pattern.retrieval_text();
        let slots: [&str; 5] =
            [&time_slot, &plan_slot, &schedule_slot, &profile_slot, &patterns_slot];
        let mut scripted = ScriptedBackend::new(true);
        scripted.insert(
            TemplateId::RecursiveReasoning,
            &slots,
            "```\nPURPOSE: Shopping\nCATEGORY: shop\nDEPART: 10:30\nDISTANCE_M: 1500-3000\n```",
        );
        let gw = Gateway::new(BackendKind::Scripted(scripted), TranscriptStore::in_memory());
        let outcome = reason_step(&state, &gw, None).unwrap();
        assert!(outcome.decision.is_err());
    }

    #[test]
    fn decision_validation_covers_the_feasibility_rules() {
        let caps = SpeedCaps::default();
        // Time regression.
        let d = decision(500, TravelPurpose::Shopping, 500, 1500, TravelMode::Walking);
        assert!(validate_decision(&d, 520, &caps)
            .iter()
            .any(|v| v.message.contains("time regression")));
        assert!(validate_decision(&d, 500, &caps)
            .iter()
            .any(|v| v.message.contains("time regression")), "equal times regress too");
        // 30 km on foot at 20:00 cannot finish before midnight
        // (30 km / 7 km/h ~ 257 min > the 240 remaining).
        let d = decision(1200, TravelPurpose::Other, 30_000, 30_000, TravelMode::Walking);
        assert!(validate_decision(&d, 1100, &caps)
            .iter()
            .any(|v| v.message.contains("cannot complete before midnight")));
        // The same trip by car (90 km/h cap -> 20 min) is fine.
        let d = decision(1200, TravelPurpose::Other, 30_000, 30_000, TravelMode::Driving);
        assert!(validate_decision(&d, 1100, &caps).is_empty());
        // Distance sanity bound.
        let d = decision(600, TravelPurpose::Other, 500, 150_000, TravelMode::Driving);
        assert!(validate_decision(&d, 0, &caps)
            .iter()
            .any(|v| v.message.contains("100 km")));
        // Returning home must target the residence category.
        let mut d = decision(600, TravelPurpose::ReturningHome, 500, 1500, TravelMode::Walking);
        d.category = CategoryQuery::One(PoiCategory::Shop);
        assert!(validate_decision(&d, 0, &caps)
            .iter()
            .any(|v| v.message.contains("returning home")));
        d.category = CategoryQuery::One(PoiCategory::Residence);
        assert!(validate_decision(&d, 0, &caps).is_empty());
    }

    #[test]
    fn replay_diary_anchors_every_point_to_the_network() {
        let spec = grid_spec();
        let spatial = spatial_index(&spec);
        let pattern = pattern_with(commuter_stats());
        let profile = grid_profile(&spec, "p0");
        let cfg = ReasonerConfig::default();
        let outcome = generate_diary(
            &profile, &pattern, monday(), &replay_gateway(9), &spatial, &cfg, 42,
        )
        .unwrap();
        let DiaryOutcome::Diary(generated) = outcome else {
            panic!("commuter cohort always plans trips");
        };
        assert_eq!(generated.diary.points.len(), 2);
        assert!(generated.warnings.is_empty());
        assert!(validate_diary(&generated.diary, &cfg.speed_caps).is_empty());
        // Anchored-distance consistency, exact by construction.
        for record in &generated.anchors {
            let p = &generated.diary.points[record.point_index];
            assert_eq!(p.distance_m, record.anchor.network_distance_m);
            assert_eq!(p.location, record.anchor.location);
            assert!(!record.fallback);
        }
        // Home start: the first leg's origin is home's snapped node, and
        // the return leg ends exactly at that node.
        let home_node = spatial.snap(&profile.home).unwrap();
        assert_eq!(generated.anchors[0].anchor.origin_node, "n000_000");
        let last = generated.anchors.last().unwrap();
        assert_eq!(last.anchor.dest_node, home_node);
        assert_eq!(
            generated.diary.points[0].purpose,
            TravelPurpose::CommutingToWork
        );
        assert_eq!(generated.diary.points[1].purpose, TravelPurpose::ReturningHome);
        // Departures respect the planned windows.
        let depart0 = generated.diary.points[0].depart_min();
        assert!((480..540).contains(&depart0), "depart {depart0}");
        // Provenance: one plan exchange plus one per committed step.
        assert_eq!(generated.diary.provenance.as_ref().unwrap().len(), 3);
    }

    #[test]
    fn same_seed_same_diary_byte_for_byte() {
        let spec = grid_spec();
        let spatial = spatial_index(&spec);
        let pattern = pattern_with(commuter_stats());
        let profile = grid_profile(&spec, "p0");
        let cfg = ReasonerConfig::default();
        let run = || {
            let outcome = generate_diary(
                &profile, &pattern, monday(), &replay_gateway(9), &spatial, &cfg, 42,
            )
            .unwrap();
            let DiaryOutcome::Diary(g) = outcome else { panic!("has trips") };
            serde_json::to_string(&g.diary).unwrap()
        };
        assert_eq!(run(), run());
        // A different backend seed moves the sampled departures.
        let outcome = generate_diary(
            &profile, &pattern, monday(), &replay_gateway(10), &spatial, &cfg, 42,
        )
        .unwrap();
        let DiaryOutcome::Diary(g) = outcome else { panic!("has trips") };
        assert_eq!(g.diary.points.len(), 2, "structure is stable across seeds");
    }

    #[test]
    fn zero_trip_cohort_yields_a_no_trip_marker() {
        let mut ds = Dataset::default();
        let spec = grid_spec();
        for i in 0..4 {
            let id = format!("z{i}");
            ds.profiles.insert(id.clone(), grid_profile(&spec, &id));
            ds.zero_trip_days.push(PersonDay { person_id: id.clone(), date: monday() });
        }
        let members: BTreeSet<String> = ds.profiles.keys().cloned().collect();
        let stats = summarize(&ds, &members, &BinningConfig::default()).unwrap();
        let pattern = pattern_with(stats);
        let spatial = spatial_index(&spec);
        let outcome = generate_diary(
            &grid_profile(&spec, "z0"),
            &pattern,
            monday(),
            &replay_gateway(5),
            &spatial,
            &ReasonerConfig::default(),
            42,
        )
        .unwrap();
        assert_eq!(
            outcome,
            DiaryOutcome::NoTrips(PersonDay { person_id: "z0".into(), date: monday() })
        );
    }

    #[test]
    fn rethink_budget_is_one_plus_max_rethinks_then_fallback() {
        let spec = grid_spec();
        let spatial = spatial_index(&spec);
        let pattern = pattern_with(commuter_stats());
        let profile = grid_profile(&spec, "p0");
        let profile_slot = render_profile(&profile);
        let pattern_slot = pattern.retrieval_text();
        let day_slot = day_info(monday());
        let plan_slots: [&str; 3] = [&profile_slot, &pattern_slot, &day_slot];
        // Valid single-entry plan; every step response is the lenient
        // backend's canned text, which never parses as a decision.
        let mut scripted = ScriptedBackend::new(false);
        scripted.insert(
            TemplateId::DailyPlan,
            &plan_slots,
            "```\nWINDOW: 09:00-10:00\nPURPOSE: Shopping\nCATEGORY: shop\n\
             DISTANCE_M: 1500-2500\nMODE: Walking\n```",
        );
        let gw = Gateway::new(BackendKind::Scripted(scripted), TranscriptStore::in_memory());
        let cfg = ReasonerConfig::default();
        let outcome =
            generate_diary(&profile, &pattern, monday(), &gw, &spatial, &cfg, 42).unwrap();
        let DiaryOutcome::Diary(generated) = outcome else { panic!("planned one trip") };
        assert_eq!(
            gw.dispatch_count(),
            1 + u64::from(cfg.max_rethinks) + 1,
            "one plan call plus the per-step budget of 1 + max_rethinks"
        );
        assert_eq!(generated.anchors[0].rethinks, cfg.max_rethinks);
        assert!(generated.anchors[0].fallback);
        let depart = generated.diary.points[0].depart_min();
        assert!((540..600).contains(&depart), "fallback departs in the window: {depart}");
        assert!(validate_diary(&generated.diary, &cfg.speed_caps).is_empty());
        assert_eq!(
            generated.diary.provenance.as_ref().unwrap()[1],
            "fallback:step:1"
        );
    }

    #[test]
    fn disabling_rethink_skips_the_reprompts() {
        let spec = grid_spec();
        let spatial = spatial_index(&spec);
        let pattern = pattern_with(commuter_stats());
        let profile = grid_profile(&spec, "p0");
        let profile_slot = render_profile(&profile);
        let pattern_slot = pattern.retrieval_text();
        let day_slot = day_info(monday());
        let plan_slots: [&str; 3] = [&profile_slot, &pattern_slot, &day_slot];
        let mut scripted = ScriptedBackend::new(false);
        scripted.insert(
            TemplateId::DailyPlan,
            &plan_slots,
            "```\nWINDOW: 09:00-10:00\nPURPOSE: Shopping\nCATEGORY: shop\n\
             DISTANCE_M: 1500-2500\nMODE: Walking\n```",
        );
        let gw = Gateway::new(BackendKind::Scripted(scripted), TranscriptStore::in_memory());
        let cfg = ReasonerConfig { disable_rethink: true, ..ReasonerConfig::default() };
        let outcome =
            generate_diary(&profile, &pattern, monday(), &gw, &spatial, &cfg, 42).unwrap();
        let DiaryOutcome::Diary(generated) = outcome else { panic!("planned one trip") };
        assert_eq!(gw.dispatch_count(), 2, "plan + a single step attempt");
        assert_eq!(generated.anchors[0].rethinks, 0);
        assert!(generated.anchors[0].fallback);
    }

    #[test]
    fn missing_poi_category_drops_the_step_with_a_warning() {
        let spec = grid_spec();
        // Network whose POI index has no hospitals: medical trips cannot
        // anchor and must be dropped.
        let data = generate_grid(&spec);
        let network = RoadNetwork::build(data.nodes, data.edges).unwrap();
        let no_hospitals: Vec<_> = data
            .pois
            .into_iter()
            .filter(|(_, _, c)| *c != PoiCategory::Hospital)
            .collect();
        let (pois, _) = PoiIndex::build(&network, no_hospitals, 500.0, true).unwrap();
        let spatial = SpatialIndex::new(network, pois, 500.0);

        let pattern = pattern_with(commuter_stats());
        let profile = grid_profile(&spec, "p0");
        let profile_slot = render_profile(&profile);
        let pattern_slot = pattern.retrieval_text();
        let day_slot = day_info(monday());
        let plan_slots: [&str; 3] = [&profile_slot, &pattern_slot, &day_slot];
        // Two planned trips: a doctor's visit (unanchorable) then home.
        // Step responses never parse, so both steps use the fallback and
        // inherit the plan entries' fields.
        let mut scripted = ScriptedBackend::new(false);
        scripted.insert(
            TemplateId::DailyPlan,
            &plan_slots,
            "```\nWINDOW: 09:00-10:00\nPURPOSE: Medical Appointment\nCATEGORY: hospital\n\
             DISTANCE_M: 1000-2000\nMODE: Driving\nWINDOW: 11:00-12:00\n\
             PURPOSE: Returning Home\nCATEGORY: residence\nDISTANCE_M: 1000-2000\n\
             MODE: Driving\n```",
        );
        let gw = Gateway::new(BackendKind::Scripted(scripted), TranscriptStore::in_memory());
        let cfg = ReasonerConfig { disable_rethink: true, ..ReasonerConfig::default() };
        let outcome =
            generate_diary(&profile, &pattern, monday(), &gw, &spatial, &cfg, 42).unwrap();
        let DiaryOutcome::Diary(generated) = outcome else { panic!("second step commits") };
        assert_eq!(generated.warnings.len(), 1);
        assert!(generated.warnings[0].contains("dropped step 1"), "{}", generated.warnings[0]);
        assert_eq!(generated.diary.points.len(), 1);
        assert_eq!(generated.diary.points[0].purpose, TravelPurpose::ReturningHome);
        // Returning home bypasses POI search: it lands on the home node
        // even though no residence POI was consulted.
        let home_node = spatial.snap(&profile.home).unwrap();
        assert_eq!(generated.anchors[0].anchor.dest_node, home_node);
        assert_eq!(generated.diary.points[0].distance_m, 0.0, "never left home");
    }

    #[test]
    fn late_window_step_past_midnight_ends_the_day() {
        let spec = grid_spec();
        let spatial = spatial_index(&spec);
        let pattern = pattern_with(commuter_stats());
        let profile = grid_profile(&spec, "p0");
        let profile_slot = render_profile(&profile);
        let pattern_slot = pattern.retrieval_text();
        let day_slot = day_info(monday());
        let plan_slots: [&str; 3] = [&profile_slot, &pattern_slot, &day_slot];
        // One walking trip windowed on the last minutes of the day: the
        // fallback departs at 23:58+ and a ~2 km walk cannot arrive before
        // midnight, so the day ends with no committed points.
        let mut scripted = ScriptedBackend::new(false);
        scripted.insert(
            TemplateId::DailyPlan,
            &plan_slots,
            "```\nWINDOW: 23:58-24:00\nPURPOSE: Shopping\nCATEGORY: shop\n\
             DISTANCE_M: 1800-2200\nMODE: Walking\n```",
        );
        let gw = Gateway::new(BackendKind::Scripted(scripted), TranscriptStore::in_memory());
        let cfg = ReasonerConfig { disable_rethink: true, ..ReasonerConfig::default() };
        let outcome =
            generate_diary(&profile, &pattern, monday(), &gw, &spatial, &cfg, 42).unwrap();
        assert_eq!(
            outcome,
            DiaryOutcome::NoTrips(PersonDay { person_id: "p0".into(), date: monday() })
        );
    }

    #[test]
    fn fallback_clamps_forward_when_a_window_is_already_past() {
        let spec = grid_spec();
        let spatial = spatial_index(&spec);
        let pattern = pattern_with(commuter_stats());
        let profile = grid_profile(&spec, "p0");
        let profile_slot = render_profile(&profile);
        let pattern_slot = pattern.retrieval_text();
        let day_slot = day_info(monday());
        let plan_slots: [&str; 3] = [&profile_slot, &pattern_slot, &day_slot];
        // A slow first leg (3.5 km on foot departs by 08:59, ~42 min +
        // walking cruise) arrives past 09:30; the second window 09:00-09:31
        // is then (almost) entirely in the past, so its fallback must clamp
        // the departure beyond the first arrival to stay monotone.
        let mut scripted = ScriptedBackend::new(false);
        scripted.insert(
            TemplateId::DailyPlan,
            &plan_slots,
            "```\nWINDOW: 08:00-09:00\nPURPOSE: Entertainment/Dining\nCATEGORY: entertainment\n\
             DISTANCE_M: 3400-3600\nMODE: Walking\nWINDOW: 09:00-09:31\n\
             PURPOSE: Returning Home\nCATEGORY: residence\nDISTANCE_M: 3400-3600\n\
             MODE: Driving\n```",
        );
        let gw = Gateway::new(BackendKind::Scripted(scripted), TranscriptStore::in_memory());
        let cfg = ReasonerConfig { disable_rethink: true, ..ReasonerConfig::default() };
        let outcome =
            generate_diary(&profile, &pattern, monday(), &gw, &spatial, &cfg, 42).unwrap();
        let DiaryOutcome::Diary(generated) = outcome else { panic!("both steps commit") };
        assert_eq!(generated.diary.points.len(), 2);
        let first_arrive = generated.diary.points[0].arrive_time;
        let second_depart = generated.diary.points[1].depart_min();
        assert!(
            second_depart > i32::from(first_arrive),
            "clamped forward: departs {second_depart} after arriving {first_arrive}"
        );
        assert!(validate_diary(&generated.diary, &cfg.speed_caps).is_empty());
    }
}
