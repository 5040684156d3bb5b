//! Population cohorts: attribute-keyed groups, their mobility statistics,
//! and the rating-gated hierarchy that divides the survey population into
//! fine-grained groups.
//!
//! A cohort is identified by a [`CohortKey`] — the ordered list of
//! `(attribute, value)` splits that produced it, root-first. The hierarchy
//! is grown breadth-first by [`refine_hierarchy`]: for each node, candidate
//! splits along the not-yet-used attribute dimensions are scored by
//! [`segmentation_gate`] (a 1–10 rating from the backend; the statistical
//! replay backend scores locally from the candidates' divergence), and the
//! first dimension that both passes the gate and keeps every child at or
//! above the minimum cohort size becomes the split.
//!
//! [`CohortStats`] is the structured digest consumed everywhere downstream:
//! prompt slots render it as text, the replay backend samples daily plans
//! from it, and the synthetic-data acceptance checks compare against it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockfmt::PlanEntry;
use crate::domain::vocab::{TravelMode, TravelPurpose};
use crate::domain::{AttributeDim, DayType, Dataset, IndividualProfile, TravelDiary};
use crate::eval::{Binning, BinningConfig};
use crate::gateway::{
    render_prompt, CompletionParams, GateCandidate, Gateway, GatewayError, ReplayContext,
    TemplateId,
};
use crate::spatial::CategoryQuery;
use crate::Rng;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("unknown attribute dimension `{0}`")]
    UnknownDimension(String),
    #[error("cohort has no members")]
    EmptyCohort,
    #[error("no rating between 1 and 10 in backend response: {response:?}")]
    UnparseableScore { response: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("cohort tree file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cohort tree line {line}: {source}")]
    MalformedTree {
        line: usize,
        source: serde_json::Error,
    },
}

/// Maps dimension names (as used in config files) to typed dimensions.
pub fn parse_dims(names: &[String]) -> Result<Vec<AttributeDim>, CohortError> {
    names
        .iter()
        .map(|n| {
            n.parse()
                .map_err(|_| CohortError::UnknownDimension(n.clone()))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// CohortKey
// ---------------------------------------------------------------------------

/// The ordered `(dimension, value)` splits identifying a cohort, root-first.
/// The empty key is the whole population.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub struct CohortKey(Vec<(AttributeDim, String)>);

impl CohortKey {
    pub fn root() -> CohortKey {
        CohortKey(Vec::new())
    }

    /// Extends the key by one split level.
    pub fn child(&self, dim: AttributeDim, value: &str) -> CohortKey {
        let mut pairs = self.0.clone();
        pairs.push((dim, value.to_owned()));
        CohortKey(pairs)
    }

    pub fn pairs(&self) -> &[(AttributeDim, String)] {
        &self.0
    }

    pub fn dims(&self) -> impl Iterator<Item = AttributeDim> + '_ {
        self.0.iter().map(|(d, _)| *d)
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn uses(&self, dim: AttributeDim) -> bool {
        self.0.iter().any(|(d, _)| *d == dim)
    }

    /// Whether a profile carries every attribute value of this key.
    pub fn matches(&self, profile: &IndividualProfile) -> bool {
        self.0.iter().all(|(d, v)| d.value_str(profile) == v)
    }

    /// Human-readable identity, also used as the pattern label that group
    /// inference matches against; distinct keys yield distinct labels.
    pub fn label(&self) -> String {
        if self.0.is_empty() {
            return "population".to_owned();
        }
        self.0
            .iter()
            .map(|(d, v)| format!("{}={v}", d.name()))
            .collect::<Vec<_>>()
            .join(" | ")
    }
}

impl std::fmt::Display for CohortKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

/// Count tables describing the trips of one cohort over one day-type slice.
/// All tables are raw counts (not normalized); consumers normalize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsBlock {
    pub trip_count: u64,
    /// Person-days observed, including days without any trip.
    pub person_days: u64,
    /// Departure-hour counts, 24 bins.
    pub start_time_hist: Vec<f64>,
    /// Trip distances over the evaluation log bands (incl. under/overflow).
    pub distance_hist: Vec<f64>,
    pub mode_freq: Vec<f64>,
    pub purpose_freq: Vec<f64>,
    /// Trips per person-day, 0..=max then overflow.
    pub trips_per_day_hist: Vec<f64>,
    /// First-order purpose transitions within a diary, `[from][to]`.
    pub purpose_transition: Vec<Vec<f64>>,
    /// Distance-band counts conditioned on purpose, `[purpose][band]`.
    pub distance_by_purpose: Vec<Vec<f64>>,
    /// Mode counts conditioned on distance band, `[band][mode]`.
    pub mode_by_distance: Vec<Vec<f64>>,
}

const HOURS: usize = 24;
const TRIPS_PER_DAY_BINS: usize = 17; // 0..=15 plus overflow

impl StatsBlock {
    fn new(distance_bins: usize) -> StatsBlock {
        let purposes = TravelPurpose::ALL.len();
        let modes = TravelMode::ALL.len();
        StatsBlock {
            trip_count: 0,
            person_days: 0,
            start_time_hist: vec![0.0; HOURS],
            distance_hist: vec![0.0; distance_bins],
            mode_freq: vec![0.0; modes],
            purpose_freq: vec![0.0; purposes],
            trips_per_day_hist: vec![0.0; TRIPS_PER_DAY_BINS],
            purpose_transition: vec![vec![0.0; purposes]; purposes],
            distance_by_purpose: vec![vec![0.0; distance_bins]; purposes],
            mode_by_distance: vec![vec![0.0; modes]; distance_bins],
        }
    }

    fn add_diary(&mut self, diary: &TravelDiary, binning: &Binning) {
        self.person_days += 1;
        let trips = diary.points.len().min(TRIPS_PER_DAY_BINS - 1);
        self.trips_per_day_hist[trips] += 1.0;
        let mut prev: Option<TravelPurpose> = None;
        for p in &diary.points {
            self.trip_count += 1;
            let hour = usize::try_from(p.depart_min().max(0) / 60).unwrap_or(0).min(HOURS - 1);
            self.start_time_hist[hour] += 1.0;
            let band = binning.log_distance_index(p.distance_m);
            self.distance_hist[band] += 1.0;
            self.mode_freq[p.mode.index()] += 1.0;
            self.purpose_freq[p.purpose.index()] += 1.0;
            self.distance_by_purpose[p.purpose.index()][band] += 1.0;
            self.mode_by_distance[band][p.mode.index()] += 1.0;
            if let Some(prev) = prev {
                self.purpose_transition[prev.index()][p.purpose.index()] += 1.0;
            }
            prev = Some(p.purpose);
        }
    }

    fn add_zero_trip_day(&mut self) {
        self.person_days += 1;
        self.trips_per_day_hist[0] += 1.0;
    }

    pub fn mean_trips_per_day(&self) -> f64 {
        if self.person_days == 0 {
            0.0
        } else {
            self.trip_count as f64 / self.person_days as f64
        }
    }

    /// Index of the largest entry; ties resolve to the smallest index.
    pub fn modal_index(weights: &[f64]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 && best.map_or(true, |(_, bw)| w > bw) {
                best = Some((i, w));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Index of the bin where the cumulative mass first reaches half the
    /// total; `None` when all weights are zero.
    pub fn median_index(weights: &[f64]) -> Option<usize> {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let mut acc = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            acc += w;
            if acc >= total / 2.0 {
                return Some(i);
            }
        }
        Some(weights.len() - 1)
    }

    /// Weighted draw over `weights`; `None` when all mass is zero.
    pub fn sample_index(weights: &[f64], rng: &mut impl Rng) -> Option<usize> {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let mut target = rng.random::<f64>() * total;
        for (i, &w) in weights.iter().enumerate() {
            target -= w;
            if target < 0.0 && w > 0.0 {
                return Some(i);
            }
        }
        weights.iter().rposition(|&w| w > 0.0)
    }

    fn sample_trip_count(&self, rng: &mut impl Rng) -> usize {
        Self::sample_index(&self.trips_per_day_hist, rng).unwrap_or(0)
    }

    /// Up to `n` distinct departure hours, ascending. Draws with
    /// replacement and deduplicates, so days wanting more trips than the
    /// cohort has active hours shrink instead of colliding.
    fn sample_start_hours(&self, n: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut hours = BTreeSet::new();
        for _ in 0..n.saturating_mul(3) {
            if hours.len() == n {
                break;
            }
            if let Some(h) = Self::sample_index(&self.start_time_hist, rng) {
                hours.insert(h);
            } else {
                break;
            }
        }
        hours.into_iter().collect()
    }

    fn first_purpose_weights(&self) -> Vec<f64> {
        // Marginal over transition sources; falls back to the overall
        // purpose frequencies when no diary had two or more trips.
        let row_sums: Vec<f64> = self
            .purpose_transition
            .iter()
            .map(|row| row.iter().sum())
            .collect();
        if row_sums.iter().sum::<f64>() > 0.0 {
            row_sums
        } else {
            self.purpose_freq.clone()
        }
    }

    fn sample_purpose_chain(&self, n: usize, rng: &mut impl Rng) -> Vec<TravelPurpose> {
        let mut out = Vec::with_capacity(n);
        let mut prev: Option<TravelPurpose> = None;
        for _ in 0..n {
            let weights = match prev {
                None => self.first_purpose_weights(),
                Some(p) => {
                    let row = &self.purpose_transition[p.index()];
                    if row.iter().sum::<f64>() > 0.0 {
                        row.clone()
                    } else {
                        self.purpose_freq.clone()
                    }
                }
            };
            let idx = Self::sample_index(&weights, rng).unwrap_or(TravelPurpose::Other.index());
            let purpose = TravelPurpose::ALL[idx];
            out.push(purpose);
            prev = Some(purpose);
        }
        out
    }

    fn sample_distance_band(&self, purpose: TravelPurpose, rng: &mut impl Rng) -> Option<usize> {
        Self::sample_index(&self.distance_by_purpose[purpose.index()], rng)
            .or_else(|| Self::sample_index(&self.distance_hist, rng))
    }

    fn sample_mode(&self, band: usize, rng: &mut impl Rng) -> Option<TravelMode> {
        Self::sample_index(&self.mode_by_distance[band], rng)
            .or_else(|| Self::sample_index(&self.mode_freq, rng))
            .map(|i| TravelMode::ALL[i])
    }

    /// Builds one day's plan by sampling this block: trip count from the
    /// trips-per-day table, departure hours (distinct, ascending) from the
    /// start-time table, purposes chained through the transition table,
    /// distances from the purpose-conditional bands and modes from the
    /// band-conditional mode table. Each entry's window is its departure
    /// hour. Returns an empty vec for a sampled zero-trip day.
    pub fn sample_plan(&self, binning: &Binning, rng: &mut impl Rng) -> Vec<PlanEntry> {
        let want = self.sample_trip_count(rng);
        if want == 0 {
            return Vec::new();
        }
        let hours = self.sample_start_hours(want, rng);
        let purposes = self.sample_purpose_chain(hours.len(), rng);
        hours
            .into_iter()
            .zip(purposes)
            .map(|(hour, purpose)| {
                let band = self.sample_distance_band(purpose, rng).unwrap_or(1);
                let (lo, hi) = distance_band_range(binning, band);
                let mode = self.sample_mode(band, rng).unwrap_or(TravelMode::Walking);
                PlanEntry {
                    window_start: (hour * 60) as u16,
                    window_end: ((hour + 1) * 60) as u16,
                    purpose,
                    category: CategoryQuery::for_purpose(purpose),
                    distance_lo_m: lo,
                    distance_hi_m: hi,
                    mode,
                }
            })
            .collect()
    }

    /// One-paragraph text digest used in prompt slots.
    pub fn summary_text(&self) -> String {
        if self.trip_count == 0 {
            return format!("no recorded trips over {} person-days", self.person_days);
        }
        let hours = top_entries(&self.start_time_hist, 3)
            .into_iter()
            .map(|(h, share)| format!("{h:02}:00 ({:.0}%)", share * 100.0))
            .collect::<Vec<_>>()
            .join(", ");
        let modes = top_entries(&self.mode_freq, 2)
            .into_iter()
            .map(|(i, share)| format!("{} ({:.0}%)", TravelMode::ALL[i], share * 100.0))
            .collect::<Vec<_>>()
            .join(", ");
        let purposes = top_entries(&self.purpose_freq, 3)
            .into_iter()
            .map(|(i, share)| format!("{} ({:.0}%)", TravelPurpose::ALL[i], share * 100.0))
            .collect::<Vec<_>>()
            .join(", ");
        format!(
            "{} trips over {} person-days ({:.2} trips/day); \
             busiest departure hours: {hours}; top modes: {modes}; top purposes: {purposes}",
            self.trip_count,
            self.person_days,
            self.mean_trips_per_day(),
        )
    }
}

/// The `(index, share)` list of the largest entries of a count table.
fn top_entries(weights: &[f64], n: usize) -> Vec<(usize, f64)> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    idx.sort_by(|&a, &b| weights[b].partial_cmp(&weights[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(n);
    idx.into_iter().map(|i| (i, weights[i] / total)).collect()
}

/// The integer meter range a distance band stands for when a sampled band
/// must become a concrete `DISTANCE_M: lo-hi` plan value. The open-ended
/// overflow band is capped at twice the top edge.
pub fn distance_band_range(binning: &Binning, band: usize) -> (u32, u32) {
    let (lo, hi) = binning.dense_edges(band).unwrap_or((0.0, 1000.0));
    let hi = if hi.is_finite() { hi } else { lo * 2.0 };
    (lo.round() as u32, hi.round().max(lo.round() + 1.0) as u32)
}

/// Per-cohort statistics: overall plus weekday/weekend splits, with the
/// distance-band descriptor that produced the distance tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub member_count: u64,
    pub all: StatsBlock,
    pub weekday: StatsBlock,
    pub weekend: StatsBlock,
    pub distance_binning: Binning,
}

impl CohortStats {
    pub fn block(&self, day_type: DayType) -> &StatsBlock {
        // Fall back to the pooled block when a day-type slice is empty, so
        // sampling never faces an all-zero table merely because e.g. the
        // survey window held no weekends.
        let block = match day_type {
            DayType::Weekday => &self.weekday,
            DayType::Weekend => &self.weekend,
        };
        if block.person_days == 0 {
            &self.all
        } else {
            block
        }
    }

    /// Multi-line digest rendered into prompt slots.
    pub fn summary_text(&self) -> String {
        format!(
            "members: {}\noverall: {}\nweekdays: {}\nweekends: {}",
            self.member_count,
            self.all.summary_text(),
            self.weekday.summary_text(),
            self.weekend.summary_text()
        )
    }

    /// Single-line canonical digest; the replay backend's pattern
    /// "narrative" is a deterministic rendering of this.
    pub fn digest_text(&self) -> String {
        let peak_hour = StatsBlock::modal_index(&self.all.start_time_hist);
        let top_mode = StatsBlock::modal_index(&self.all.mode_freq).map(|i| TravelMode::ALL[i]);
        let top_purpose =
            StatsBlock::modal_index(&self.all.purpose_freq).map(|i| TravelPurpose::ALL[i]);
        let band = StatsBlock::median_index(&self.all.distance_hist);
        let band_str = band
            .map(|b| {
                let (lo, hi) = distance_band_range(&self.distance_binning, b);
                format!("{lo}-{hi} m")
            })
            .unwrap_or_else(|| "n/a".to_owned());
        format!(
            "peak start hour: {}; top mode: {}; top purpose: {}; median distance band: {}; mean trips/day: {:.2}",
            peak_hour.map_or("n/a".to_owned(), |h| h.to_string()),
            top_mode.map_or("n/a".to_owned(), |m| m.to_string()),
            top_purpose.map_or("n/a".to_owned(), |p| p.to_string()),
            band_str,
            self.all.mean_trips_per_day(),
        )
    }
}

/// Computes [`CohortStats`] over the diaries and zero-trip days of the given
/// members. Every diary of a member counts; dates split the weekday/weekend
/// blocks.
pub fn summarize(
    dataset: &Dataset,
    members: &BTreeSet<String>,
    cfg: &BinningConfig,
) -> Result<CohortStats, CohortError> {
    if members.is_empty() {
        return Err(CohortError::EmptyCohort);
    }
    let binning = Binning::LogDistance {
        bin_count: cfg.sd_bins,
        min_m: cfg.sd_min_m,
        max_m: cfg.sd_max_m,
    };
    let bins = binning.dense_len().expect("log-distance binning is dense");
    let mut all = StatsBlock::new(bins);
    let mut weekday = StatsBlock::new(bins);
    let mut weekend = StatsBlock::new(bins);
    for diary in &dataset.diaries {
        if !members.contains(&diary.person_id) {
            continue;
        }
        all.add_diary(diary, &binning);
        match DayType::from_date(diary.date) {
            DayType::Weekday => weekday.add_diary(diary, &binning),
            DayType::Weekend => weekend.add_diary(diary, &binning),
        }
    }
    for day in &dataset.zero_trip_days {
        if !members.contains(&day.person_id) {
            continue;
        }
        all.add_zero_trip_day();
        match DayType::from_date(day.date) {
            DayType::Weekday => weekday.add_zero_trip_day(),
            DayType::Weekend => weekend.add_zero_trip_day(),
        }
    }
    Ok(CohortStats {
        member_count: members.len() as u64,
        all,
        weekday,
        weekend,
        distance_binning: binning,
    })
}

// ---------------------------------------------------------------------------
// Partition
// ---------------------------------------------------------------------------

/// Splits the population along `dims` into the cross product of attribute
/// values, omitting empty combinations. Member lists are sorted; together
/// they partition the population exactly.
pub fn partition(
    dataset: &Dataset,
    dims: &[AttributeDim],
) -> Vec<(CohortKey, Vec<String>)> {
    let mut groups: BTreeMap<Vec<&'static str>, Vec<String>> = BTreeMap::new();
    for (id, profile) in &dataset.profiles {
        let combo: Vec<&'static str> = dims.iter().map(|d| d.value_str(profile)).collect();
        groups.entry(combo).or_default().push(id.clone());
    }
    groups
        .into_iter()
        .map(|(combo, members)| {
            let mut key = CohortKey::root();
            for (dim, value) in dims.iter().zip(combo) {
                key = key.child(*dim, value);
            }
            (key, members)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Segmentation gate
// ---------------------------------------------------------------------------

/// Gate verdict for splitting one node along one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub dim: AttributeDim,
    /// 1..=10; at or above the threshold recommends the split.
    pub score: u8,
    pub split: bool,
    pub rationale: String,
}

/// Asks the backend whether splitting `parent` along `dim` is worthwhile.
/// Renders the group-division template with the parent's statistics digest,
/// the current classification criteria, and the candidate dimension; parses
/// a 1–10 rating from the answer (one clarifying retry before giving up).
/// Under the replay backend the score is derived locally from the largest
/// pairwise divergence among the candidate children's start-time and
/// distance histograms.
pub fn segmentation_gate(
    gateway: &Gateway,
    parent: &CohortStats,
    parent_key: &CohortKey,
    candidates: &[(String, CohortStats)],
    dim: AttributeDim,
    split_threshold: u8,
) -> Result<GateOutcome, CohortError> {
    let summary = parent.summary_text();
    let criteria = if parent_key.is_root() {
        "none yet: the subjects are one undivided population".to_owned()
    } else {
        parent_key.label()
    };
    let rendered = render_prompt(
        TemplateId::InitialGroupDivision,
        &[&summary, &criteria, dim.name()],
    )?;
    let ctx = ReplayContext::Gate {
        candidates: candidates
            .iter()
            .map(|(value, stats)| GateCandidate {
                label: value.clone(),
                start_time_hist: stats.all.start_time_hist.clone(),
                distance_hist: stats.all.distance_hist.clone(),
            })
            .collect(),
    };
    let params = CompletionParams::gate();
    let completion = gateway.complete(&rendered, &params, &ctx)?;
    let (score, rationale) = match crate::blockfmt::extract_rating(&completion.text) {
        Some(score) => (score, completion.text),
        None => {
            // One clarifying re-ask; the suffix changes the request hash so
            // the retry is a genuine second dispatch, not a cache echo.
            let retry = rendered
                .with_suffix("Answer with a single integer rating between 1 and 10.");
            let second = gateway.complete(&retry, &params, &ctx)?;
            match crate::blockfmt::extract_rating(&second.text) {
                Some(score) => (score, second.text),
                None => {
                    return Err(CohortError::UnparseableScore {
                        response: second.text,
                    })
                }
            }
        }
    };
    Ok(GateOutcome {
        dim,
        score,
        split: score >= split_threshold,
        rationale,
    })
}

// ---------------------------------------------------------------------------
// Tree
// ---------------------------------------------------------------------------

/// Hierarchy construction parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    /// Dimension names in split-preference order.
    pub dims: Vec<String>,
    pub min_cohort_size: u64,
    pub max_depth: u32,
    /// Gate scores at or above this recommend splitting (1..=10).
    pub split_threshold: u8,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            dims: AttributeDim::ALL.iter().map(|d| d.name().to_owned()).collect(),
            min_cohort_size: 30,
            max_depth: 4,
            split_threshold: 7,
        }
    }
}

/// One node of the cohort hierarchy; `id` is the breadth-first index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortNode {
    pub id: u32,
    pub parent: Option<u32>,
    pub key: CohortKey,
    pub depth: u32,
    pub member_ids: Vec<String>,
    pub stats: CohortStats,
    pub children: Vec<u32>,
    /// Gate verdicts tried at this node, in dimension order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gate_trials: Vec<GateOutcome>,
}

impl CohortNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn member_count(&self) -> u64 {
        self.member_ids.len() as u64
    }
}

/// The full hierarchy. Node 0 is the root (whole population); children of
/// any node partition its members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortTree {
    pub nodes: Vec<CohortNode>,
}

impl CohortTree {
    pub fn root(&self) -> &CohortNode {
        &self.nodes[0]
    }

    pub fn leaves(&self) -> impl Iterator<Item = &CohortNode> {
        self.nodes.iter().filter(|n| n.is_leaf())
    }

    /// Deepest node whose key matches the profile. A profile carrying an
    /// attribute value unseen during construction stops at the nearest
    /// ancestor, which is exactly the pattern-lookup fallback.
    pub fn resolve(&self, profile: &IndividualProfile) -> &CohortNode {
        let mut node = self.root();
        'descend: loop {
            for &child in &node.children {
                if self.nodes[child as usize].key.matches(profile) {
                    node = &self.nodes[child as usize];
                    continue 'descend;
                }
            }
            return node;
        }
    }

    /// Serializes one node per line, parent links included, preceded by an
    /// optional metadata line.
    pub fn write_ndjson<W: Write>(
        &self,
        mut w: W,
        meta: Option<&serde_json::Value>,
    ) -> Result<(), CohortError> {
        if let Some(meta) = meta {
            serde_json::to_writer(&mut w, &serde_json::json!({ "meta": meta }))
                .map_err(io_err)?;
            w.write_all(b"\n")?;
        }
        for node in &self.nodes {
            serde_json::to_writer(&mut w, node).map_err(io_err)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_ndjson<R: BufRead>(
        r: R,
    ) -> Result<(CohortTree, Option<serde_json::Value>), CohortError> {
        let mut meta = None;
        let mut nodes = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if i == 0 {
                if let Ok(v) = serde_json::from_str::<serde_json::Value>(&line) {
                    if let Some(m) = v.get("meta") {
                        meta = Some(m.clone());
                        continue;
                    }
                }
            }
            let node: CohortNode = serde_json::from_str(&line)
                .map_err(|source| CohortError::MalformedTree { line: i + 1, source })?;
            nodes.push(node);
        }
        Ok((CohortTree { nodes }, meta))
    }
}

fn io_err(e: serde_json::Error) -> CohortError {
    CohortError::Io(std::io::Error::other(e))
}

/// Grows the cohort hierarchy breadth-first. Each node tries the unused
/// dimensions in config order until one splits: a dimension is a candidate
/// only when it produces at least two non-empty children all at or above
/// `min_cohort_size` (undersized candidates are skipped without spending a
/// gate call), and it splits only when [`segmentation_gate`] recommends it.
/// Nodes at `max_depth` stay leaves.
pub fn refine_hierarchy(
    dataset: &Dataset,
    gateway: &Gateway,
    cfg: &CohortConfig,
    binning: &BinningConfig,
) -> Result<CohortTree, CohortError> {
    let dims = parse_dims(&cfg.dims)?;
    let all_members: BTreeSet<String> = dataset.profiles.keys().cloned().collect();
    let root_stats = summarize(dataset, &all_members, binning)?;
    let mut nodes = vec![CohortNode {
        id: 0,
        parent: None,
        key: CohortKey::root(),
        depth: 0,
        member_ids: all_members.iter().cloned().collect(),
        stats: root_stats,
        children: Vec::new(),
        gate_trials: Vec::new(),
    }];
    let mut queue = VecDeque::from([0u32]);
    while let Some(id) = queue.pop_front() {
        if nodes[id as usize].depth >= cfg.max_depth {
            continue;
        }
        let key = nodes[id as usize].key.clone();
        for &dim in dims.iter().filter(|d| !key.uses(**d)) {
            // Group this node's members by the candidate dimension.
            let mut groups: BTreeMap<&'static str, BTreeSet<String>> = BTreeMap::new();
            for pid in &nodes[id as usize].member_ids {
                let profile = &dataset.profiles[pid];
                groups
                    .entry(dim.value_str(profile))
                    .or_default()
                    .insert(pid.clone());
            }
            if groups.len() < 2
                || groups.values().any(|g| (g.len() as u64) < cfg.min_cohort_size)
            {
                continue;
            }
            // Deterministic child order: the dimension's vocabulary order.
            let ordered: Vec<(&'static str, BTreeSet<String>)> = dim
                .values()
                .into_iter()
                .filter_map(|v| groups.remove(v).map(|g| (v, g)))
                .collect();
            let candidates: Vec<(String, CohortStats)> = ordered
                .iter()
                .map(|(v, g)| Ok((v.to_string(), summarize(dataset, g, binning)?)))
                .collect::<Result<_, CohortError>>()?;
            let outcome = segmentation_gate(
                gateway,
                &nodes[id as usize].stats,
                &key,
                &candidates,
                dim,
                cfg.split_threshold,
            )?;
            let split = outcome.split;
            nodes[id as usize].gate_trials.push(outcome);
            if !split {
                continue;
            }
            for ((value, members), (_, stats)) in ordered.into_iter().zip(candidates) {
                let child_id = nodes.len() as u32;
                nodes[id as usize].children.push(child_id);
                nodes.push(CohortNode {
                    id: child_id,
                    parent: Some(id),
                    key: key.child(dim, value),
                    depth: nodes[id as usize].depth + 1,
                    member_ids: members.into_iter().collect(),
                    stats,
                    children: Vec::new(),
                    gate_trials: Vec::new(),
                });
                queue.push_back(child_id);
            }
            break; // this node is split; do not try further dimensions
        }
    }
    Ok(CohortTree { nodes })
}
