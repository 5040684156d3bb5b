//! Per-cohort mobility patterns and their self-evaluation loop.
//!
//! A [`MobilityPattern`] pairs a cohort's structured statistics with a
//! narrative explanation of how the group's attributes shape its travel.
//! Patterns are extracted from a training split of each cohort's members
//! and then audited against the held-out remainder in two ways: the backend
//! must recognize which group an anonymized holdout diary belongs to
//! ([`infer_group`]), and it must reconstruct masked fields of holdout
//! diaries from the patterns alone ([`complete_masked`]). Cohorts that fail
//! either audit get a bounded number of revision rounds in which the
//! extraction prompt is re-issued with concrete failure examples appended.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::blockfmt::{parse_fill, parse_hhmm, MaskField};
use crate::cohort::{summarize, CohortError, CohortKey, CohortStats, CohortTree};
use crate::domain::vocab::owns_car_str;
use crate::domain::{Dataset, IndividualProfile, TravelDiary, MINUTES_PER_DAY};
use crate::eval::BinningConfig;
use crate::gateway::{
    render_prompt, CompletionParams, GateCandidate, Gateway, GatewayError, MaskSlot,
    ReplayContext, TemplateId,
};
use crate::Rng;

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("masked diary: {0}")]
    InvalidMask(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error("pattern file: {0}")]
    Io(#[from] std::io::Error),
    #[error("pattern file line {line}: {source}")]
    Malformed {
        line: usize,
        source: serde_json::Error,
    },
}

/// Evaluation and revision parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternConfig {
    /// Fraction of each cohort's members held out for self-evaluation.
    pub holdout_fraction: f64,
    /// Holdout diaries audited per cohort (all of them when fewer exist).
    pub eval_min_trajectories: usize,
    /// Either audit score below this triggers a revision round.
    pub revision_threshold: f64,
    pub max_revision_rounds: u32,
    /// A reconstructed time is correct within this many minutes.
    pub time_tolerance_min: u16,
    /// A reconstructed distance is correct within this relative error.
    pub distance_tolerance: f64,
}

impl Default for PatternConfig {
    fn default() -> Self {
        PatternConfig {
            holdout_fraction: 0.2,
            eval_min_trajectories: 20,
            revision_threshold: 0.5,
            max_revision_rounds: 2,
            time_tolerance_min: 60,
            distance_tolerance: 0.5,
        }
    }
}

/// The two audit scores of one pattern, both in `[0, 1]`. Cohorts too small
/// to hold out any members keep the vacuous defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub group_inference_accuracy: f64,
    pub masked_completion_score: f64,
}

impl Default for EvalScores {
    fn default() -> Self {
        EvalScores { group_inference_accuracy: 1.0, masked_completion_score: 1.0 }
    }
}

impl EvalScores {
    fn below(&self, threshold: f64) -> bool {
        self.group_inference_accuracy < threshold || self.masked_completion_score < threshold
    }
}

/// One cohort's extracted mobility pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobilityPattern {
    pub cohort_key: CohortKey,
    /// Id of the cohort tree node the pattern describes.
    pub node_id: u32,
    /// Statistics of the training split the narrative was extracted from.
    pub stats: CohortStats,
    pub narrative: String,
    /// Number of revision rounds applied so far.
    pub revision: u32,
    pub eval_scores: EvalScores,
    /// Request hashes of the completions that produced the narrative.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<String>,
}

impl MobilityPattern {
    pub fn label(&self) -> String {
        self.cohort_key.label()
    }

    /// One-line identity plus digest, as listed in classification prompts.
    pub fn summary_line(&self) -> String {
        format!("- group `{}`: {}", self.label(), self.stats.digest_text())
    }

    /// The retrieval context handed to diary generation: the narrative with
    /// the structured digest attached.
    pub fn retrieval_text(&self) -> String {
        format!("{}\n\nStatistical digest: {}", self.narrative, self.stats.digest_text())
    }
}

/// All extracted patterns of a run, one per cohort tree node.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatternSet {
    pub patterns: Vec<MobilityPattern>,
}

impl PatternSet {
    /// The pattern whose key matches the profile at the greatest depth.
    /// Matching keys form a root-to-leaf chain, so the deepest is unique;
    /// profiles with attribute values unseen at some level stop at the
    /// nearest ancestor.
    pub fn resolve(&self, profile: &IndividualProfile) -> Option<&MobilityPattern> {
        self.patterns
            .iter()
            .filter(|p| p.cohort_key.matches(profile))
            .max_by_key(|p| p.cohort_key.depth())
    }

    pub fn by_label(&self, label: &str) -> Option<&MobilityPattern> {
        self.patterns.iter().find(|p| p.label() == label)
    }

    /// Patterns of leaf cohorts: keys with no deeper extension in the set.
    pub fn leaves(&self) -> Vec<&MobilityPattern> {
        self.patterns
            .iter()
            .filter(|p| {
                !self.patterns.iter().any(|other| {
                    other.cohort_key.depth() == p.cohort_key.depth() + 1
                        && other.cohort_key.pairs().starts_with(p.cohort_key.pairs())
                })
            })
            .collect()
    }

    pub fn write_ndjson<W: Write>(
        &self,
        mut w: W,
        meta: Option<&serde_json::Value>,
    ) -> Result<(), PatternError> {
        if let Some(meta) = meta {
            serde_json::to_writer(&mut w, &serde_json::json!({ "meta": meta }))
                .map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        for p in &self.patterns {
            serde_json::to_writer(&mut w, p).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_ndjson<R: BufRead>(
        r: R,
    ) -> Result<(PatternSet, Option<serde_json::Value>), PatternError> {
        let mut meta = None;
        let mut patterns = Vec::new();
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
            patterns.push(
                serde_json::from_str(&line)
                    .map_err(|source| PatternError::Malformed { line: i + 1, source })?,
            );
        }
        Ok((PatternSet { patterns }, meta))
    }
}

// ---------------------------------------------------------------------------
// Prompt slot rendering
// ---------------------------------------------------------------------------

/// The profile as a prompt slot, using the survey's field names.
pub fn render_profile(p: &IndividualProfile) -> String {
    let company = match &p.work {
        Some(w) => format!("({:.6}, {:.6})", w.lat, w.lon),
        None => "none".to_owned(),
    };
    format!(
        "Age: {}; Gender: {}; Occupation: {}; Income: {}; Education: {}; Own a Car: {}; \
         Living Situation: {}; Primary Mode of Transportation: {}; \
         Residential GPS Coordinates: ({:.6}, {:.6}); Company's GPS Coordinates: {}",
        p.age_band,
        p.gender,
        p.occupation,
        p.income,
        p.education,
        owns_car_str(p.owns_car),
        p.housing,
        p.primary_mode,
        p.home.lat,
        p.home.lon,
        company
    )
}

/// The diary as a prompt slot, one numbered line per trip. `anonymize`
/// omits the person id (dates stay: day type matters for judging behavior).
pub fn render_diary_text(d: &TravelDiary, anonymize: bool) -> String {
    let mut out = String::new();
    if !anonymize {
        out.push_str(&format!("Person: {}\n", d.person_id));
    }
    out.push_str(&format!("Travel Date: {}\n", d.date));
    for (i, p) in d.points.iter().enumerate() {
        out.push_str(&format!(
            "Trip {}: starts {} | arrives ({:.6}, {:.6}) at {} | duration {} min | \
             distance {} m | mode {} | purpose {}\n",
            i + 1,
            crate::blockfmt::fmt_hhmm(p.depart_min().max(0) as u16),
            p.location.lat,
            p.location.lon,
            crate::blockfmt::fmt_hhmm(p.arrive_time),
            p.duration_min,
            p.distance_m.round() as i64,
            p.mode,
            p.purpose
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Masked diaries
// ---------------------------------------------------------------------------

/// A diary with selected fields hidden, used to audit a pattern's ability
/// to reconstruct missing details. `point_index` is 0-based; prompt
/// rendering and `FILL` lines use 1-based trip numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedDiary {
    pub base: TravelDiary,
    pub masks: BTreeSet<(usize, MaskField)>,
}

impl MaskedDiary {
    pub fn new(
        base: TravelDiary,
        masks: BTreeSet<(usize, MaskField)>,
    ) -> Result<MaskedDiary, PatternError> {
        if masks.is_empty() {
            return Err(PatternError::InvalidMask("at least one field must be masked".into()));
        }
        for &(idx, field) in &masks {
            if idx >= base.points.len() {
                return Err(PatternError::InvalidMask(format!(
                    "mask ({idx}, {field}) exceeds the diary's {} point(s)",
                    base.points.len()
                )));
            }
        }
        Ok(MaskedDiary { base, masks })
    }

    fn is_masked(&self, idx: usize, field: MaskField) -> bool {
        self.masks.contains(&(idx, field))
    }

    /// The diary as a prompt slot with masked fields replaced by
    /// `[MASKED]`, plus an instruction line naming the blanks to fill.
    pub fn render(&self) -> String {
        let d = &self.base;
        let mut out = format!("Travel Date: {}\n", d.date);
        for (i, p) in d.points.iter().enumerate() {
            let arrive = if self.is_masked(i, MaskField::ArriveTime) {
                "[MASKED]".to_owned()
            } else {
                crate::blockfmt::fmt_hhmm(p.arrive_time)
            };
            let distance = if self.is_masked(i, MaskField::DistanceM) {
                "[MASKED]".to_owned()
            } else {
                format!("{}", p.distance_m.round() as i64)
            };
            let mode = if self.is_masked(i, MaskField::Mode) {
                "[MASKED]".to_owned()
            } else {
                p.mode.to_string()
            };
            let purpose = if self.is_masked(i, MaskField::Purpose) {
                "[MASKED]".to_owned()
            } else {
                p.purpose.to_string()
            };
            out.push_str(&format!(
                "Trip {}: arrives at {arrive} | distance {distance} m | mode {mode} | \
                 purpose {purpose}\n",
                i + 1
            ));
        }
        let blanks: Vec<String> = self
            .masks
            .iter()
            .map(|(idx, field)| format!("FILL {} {}: <value>", idx + 1, field))
            .collect();
        out.push_str(&format!(
            "Answer with one line per masked value, exactly:\n{}",
            blanks.join("\n")
        ));
        out
    }
}

// ---------------------------------------------------------------------------
// Extraction
// ---------------------------------------------------------------------------

/// A deterministic sub-seed for a named stage of a run.
pub fn subseed(run_seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(run_seed.to_be_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("sha256 yields at least 8 bytes"))
}

/// Splits member ids into `(train, holdout)` by seeded shuffle. The holdout
/// share is `holdout_fraction` rounded to the nearest person, with at least
/// one member always kept in training; groups of one have no holdout.
pub fn split_members(
    members: &[String],
    holdout_fraction: f64,
    seed: u64,
) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut shuffled: Vec<&String> = members.iter().collect();
    shuffled.sort();
    shuffled.shuffle(&mut crate::seeded_rng(seed));
    let n = shuffled.len();
    let mut holdout_count = ((n as f64) * holdout_fraction).round() as usize;
    holdout_count = holdout_count.min(n.saturating_sub(1));
    let holdout: BTreeSet<String> =
        shuffled[..holdout_count].iter().map(|s| (*s).clone()).collect();
    let train: BTreeSet<String> =
        shuffled[holdout_count..].iter().map(|s| (*s).clone()).collect();
    (train, holdout)
}

/// Short profile digest of a group for the extraction prompt: size plus the
/// group's defining attribute values (or a whole-population note).
fn render_group_profiles(key: &CohortKey, member_count: usize) -> String {
    if key.is_root() {
        format!("{member_count} individuals spanning the whole surveyed population")
    } else {
        format!("{member_count} individuals sharing: {}", key.label())
    }
}

/// Extracts one cohort's pattern narrative: one completion per attribute
/// dimension of the key (the whole-population root gets a single call with
/// a population-wide analysis dimension), concatenated in key order.
/// `extra_behavior_notes` carries failure examples during revision rounds;
/// it is appended to the behavior-distribution slot.
pub fn extract_pattern(
    key: &CohortKey,
    node_id: u32,
    stats: &CohortStats,
    gateway: &Gateway,
    extra_behavior_notes: Option<&str>,
) -> Result<MobilityPattern, PatternError> {
    let profiles_slot = render_group_profiles(key, stats.member_count as usize);
    let mut behavior_slot = stats.summary_text();
    if let Some(notes) = extra_behavior_notes {
        behavior_slot = format!("{behavior_slot}\n{notes}");
    }
    let dims: Vec<String> = if key.is_root() {
        vec!["the population as a whole".to_owned()]
    } else {
        key.dims().map(|d| d.name().to_owned()).collect()
    };
    let stats_arc = Arc::new(stats.clone());
    let mut narrative_parts = Vec::with_capacity(dims.len());
    let mut provenance = Vec::with_capacity(dims.len());
    for dim in &dims {
        let rendered = render_prompt(
            TemplateId::PatternExtraction,
            &[&profiles_slot, &behavior_slot, dim],
        )?;
        let ctx = ReplayContext::Extract { stats: stats_arc.clone(), label: key.label() };
        let completion = gateway.complete(&rendered, &CompletionParams::generation(), &ctx)?;
        narrative_parts.push(completion.text);
        provenance.push(completion.request_hash);
    }
    Ok(MobilityPattern {
        cohort_key: key.clone(),
        node_id,
        stats: stats.clone(),
        narrative: narrative_parts.join("\n\n"),
        revision: 0,
        eval_scores: EvalScores::default(),
        provenance,
    })
}

/// Everything the pattern stage produces: the patterns plus the per-node
/// holdout members reserved for self-evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternBuild {
    pub set: PatternSet,
    /// Training person ids per cohort node id — the members each pattern's
    /// statistics were computed over.
    pub trains: BTreeMap<u32, BTreeSet<String>>,
    /// Holdout person ids per cohort node id; disjoint from the node's
    /// training split.
    pub holdouts: BTreeMap<u32, BTreeSet<String>>,
}

/// Extracts a pattern for every node of the cohort tree. Each node's
/// members are split train/holdout first; the pattern's statistics and
/// narrative come from the training split only.
pub fn extract_pattern_set(
    dataset: &Dataset,
    tree: &CohortTree,
    gateway: &Gateway,
    cfg: &PatternConfig,
    binning: &BinningConfig,
    run_seed: u64,
) -> Result<PatternBuild, PatternError> {
    let mut set = PatternSet::default();
    let mut trains = BTreeMap::new();
    let mut holdouts = BTreeMap::new();
    for node in &tree.nodes {
        let seed = subseed(run_seed, &format!("holdout:{}", node.key.label()));
        let (train, holdout) = split_members(&node.member_ids, cfg.holdout_fraction, seed);
        assert!(
            train.is_disjoint(&holdout),
            "holdout discipline: train and holdout overlap for {}",
            node.key.label()
        );
        let stats = if train.is_empty() {
            node.stats.clone()
        } else {
            summarize(dataset, &train, binning)?
        };
        let pattern = extract_pattern(&node.key, node.id, &stats, gateway, None)?;
        set.patterns.push(pattern);
        trains.insert(node.id, train);
        holdouts.insert(node.id, holdout);
    }
    Ok(PatternBuild { set, trains, holdouts })
}

/// The understanding-ablated counterpart of [`extract_pattern_set`]: the
/// same splits and statistics, but each narrative is just the raw
/// statistical digest — no extraction prompts, no provenance.
pub fn digest_pattern_set(
    dataset: &Dataset,
    tree: &CohortTree,
    cfg: &PatternConfig,
    binning: &BinningConfig,
    run_seed: u64,
) -> Result<PatternBuild, PatternError> {
    let mut set = PatternSet::default();
    let mut trains = BTreeMap::new();
    let mut holdouts = BTreeMap::new();
    for node in &tree.nodes {
        let seed = subseed(run_seed, &format!("holdout:{}", node.key.label()));
        let (train, holdout) = split_members(&node.member_ids, cfg.holdout_fraction, seed);
        let stats = if train.is_empty() {
            node.stats.clone()
        } else {
            summarize(dataset, &train, binning)?
        };
        set.patterns.push(MobilityPattern {
            cohort_key: node.key.clone(),
            node_id: node.id,
            narrative: stats.digest_text(),
            stats,
            revision: 0,
            eval_scores: EvalScores::default(),
            provenance: Vec::new(),
        });
        trains.insert(node.id, train);
        holdouts.insert(node.id, holdout);
    }
    Ok(PatternBuild { set, trains, holdouts })
}

// ---------------------------------------------------------------------------
// Group inference
// ---------------------------------------------------------------------------

/// Depart-hour and distance histograms of one diary, over the binning the
/// candidate patterns use; the replay classifier compares these.
fn diary_histograms(diary: &TravelDiary, stats: &CohortStats) -> (Vec<f64>, Vec<f64>) {
    let mut start = vec![0.0; 24];
    let bins = stats.distance_binning.dense_len().unwrap_or(34);
    let mut distance = vec![0.0; bins];
    for p in &diary.points {
        let hour = usize::try_from(p.depart_min().max(0) / 60).unwrap_or(0).min(23);
        start[hour] += 1.0;
        distance[stats.distance_binning.log_distance_index(p.distance_m)] += 1.0;
    }
    (start, distance)
}

/// Predicted pattern for a response by label match: the label occurring
/// earliest in the text wins; ties at one position go to the longest label
/// (so a refined key beats its own prefix).
fn match_label<'a>(response: &str, patterns: &[&'a MobilityPattern]) -> Option<&'a MobilityPattern> {
    let mut best: Option<(usize, usize, &MobilityPattern)> = None;
    for p in patterns {
        let label = p.label();
        if let Some(pos) = response.find(&label) {
            let better = match best {
                None => true,
                Some((bpos, blen, _)) => pos < bpos || (pos == bpos && label.len() > blen),
            };
            if better {
                best = Some((pos, label.len(), p));
            }
        }
    }
    best.map(|(_, _, p)| p)
}

/// Asks the backend which candidate group an anonymized diary belongs to.
/// Returns `(matched pattern, response text)`; `None` when no candidate
/// label appears in the response, which audits count as a miss rather than
/// an error.
pub fn infer_group<'a>(
    anonymized: &TravelDiary,
    patterns: &[&'a MobilityPattern],
    gateway: &Gateway,
) -> Result<(Option<&'a MobilityPattern>, String), PatternError> {
    assert!(!patterns.is_empty(), "infer_group needs at least one candidate pattern");
    let summaries: Vec<String> = patterns.iter().map(|p| p.summary_line()).collect();
    let patterns_slot = summaries.join("\n");
    let diary_slot = render_diary_text(anonymized, true);
    let rendered =
        render_prompt(TemplateId::PatternsUpdateStep1, &[&patterns_slot, &diary_slot])?;
    let (start_hist, distance_hist) = diary_histograms(anonymized, &patterns[0].stats);
    let ctx = ReplayContext::Classify {
        start_hist,
        distance_hist,
        cohorts: patterns
            .iter()
            .map(|p| GateCandidate {
                label: p.label(),
                start_time_hist: p.stats.all.start_time_hist.clone(),
                distance_hist: p.stats.all.distance_hist.clone(),
            })
            .collect(),
    };
    let completion = gateway.complete(&rendered, &CompletionParams::gate(), &ctx)?;
    Ok((match_label(&completion.text, patterns), completion.text))
}

// ---------------------------------------------------------------------------
// Masked completion
// ---------------------------------------------------------------------------

/// Result of one masked-completion audit.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionOutcome {
    /// The diary with parseable fills substituted in.
    pub filled: TravelDiary,
    /// Per mask: `(point_index, field, score)` with score 0 or 1.
    pub field_scores: Vec<(usize, MaskField, f64)>,
    /// Mean of the field scores.
    pub score: f64,
    pub response: String,
}

fn parse_minutes(value: &str) -> Option<u16> {
    let v = value.trim();
    parse_hhmm(v)
        .ok()
        .or_else(|| v.parse::<u16>().ok())
        .filter(|&m| m < MINUTES_PER_DAY)
}

fn parse_meters(value: &str) -> Option<f64> {
    let v = value.trim().trim_end_matches('m').trim();
    v.parse::<f64>().ok().filter(|d| d.is_finite() && *d >= 0.0)
}

/// Asks the backend to reconstruct the masked fields from one pattern and
/// scores the fills against the ground truth: purpose and mode must match
/// exactly; times are correct within `time_tolerance_min`; distances within
/// `distance_tolerance` relative error. Unparseable fills score 0.
pub fn complete_masked(
    masked: &MaskedDiary,
    pattern: &MobilityPattern,
    gateway: &Gateway,
    cfg: &PatternConfig,
) -> Result<CompletionOutcome, PatternError> {
    let patterns_slot = pattern.retrieval_text();
    let masked_slot = masked.render();
    let rendered =
        render_prompt(TemplateId::PatternsUpdateStep2, &[&patterns_slot, &masked_slot])?;
    let ctx = ReplayContext::Mask {
        stats: Arc::new(pattern.stats.clone()),
        masks: masked
            .masks
            .iter()
            .map(|&(idx, field)| MaskSlot {
                point_index: idx + 1,
                field,
                purpose: match field {
                    // The leg's own purpose conditions distance fills; a
                    // masked purpose naturally cannot.
                    MaskField::DistanceM if !masked.is_masked(idx, MaskField::Purpose) => {
                        Some(masked.base.points[idx].purpose)
                    }
                    _ => None,
                },
            })
            .collect(),
    };
    let completion = gateway.complete(&rendered, &CompletionParams::generation(), &ctx)?;

    let mut filled = masked.base.clone();
    let mut field_scores = Vec::with_capacity(masked.masks.len());
    for &(idx, field) in &masked.masks {
        let truth = &masked.base.points[idx];
        let value = parse_fill(&completion.text, idx + 1, field);
        let score = match field {
            MaskField::ArriveTime => match value.as_deref().and_then(parse_minutes) {
                Some(minutes) => {
                    filled.points[idx].arrive_time = minutes;
                    let delta = (i32::from(minutes) - i32::from(truth.arrive_time)).abs();
                    f64::from(u8::from(delta <= i32::from(cfg.time_tolerance_min)))
                }
                None => 0.0,
            },
            MaskField::Purpose => match value.as_deref().and_then(|v| v.trim().parse().ok()) {
                Some(purpose) => {
                    filled.points[idx].purpose = purpose;
                    f64::from(u8::from(purpose == truth.purpose))
                }
                None => 0.0,
            },
            MaskField::Mode => match value.as_deref().and_then(|v| v.trim().parse().ok()) {
                Some(mode) => {
                    filled.points[idx].mode = mode;
                    f64::from(u8::from(mode == truth.mode))
                }
                None => 0.0,
            },
            MaskField::DistanceM => match value.as_deref().and_then(parse_meters) {
                Some(meters) => {
                    filled.points[idx].distance_m = meters;
                    let rel = (meters - truth.distance_m).abs() / truth.distance_m.max(1.0);
                    f64::from(u8::from(rel <= cfg.distance_tolerance))
                }
                None => 0.0,
            },
        };
        field_scores.push((idx, field, score));
    }
    let score = field_scores.iter().map(|(_, _, s)| s).sum::<f64>() / field_scores.len() as f64;
    Ok(CompletionOutcome { filled, field_scores, score, response: completion.text })
}

// ---------------------------------------------------------------------------
// Self-evaluation
// ---------------------------------------------------------------------------

/// Audits and (when necessary) revises every leaf pattern in place.
///
/// Per leaf: up to `eval_min_trajectories` holdout diaries are classified
/// with [`infer_group`] against all leaf patterns, and each diary also gets
/// one random field masked and reconstructed with [`complete_masked`].
/// When either mean score falls below `revision_threshold`, the pattern is
/// re-extracted with up to three failure examples appended to the behavior
/// slot and its revision count increments; the audit repeats until both
/// scores clear the threshold or `max_revision_rounds` is reached. Leaves
/// without holdout diaries keep their default scores.
pub fn self_evaluate(
    build: &mut PatternBuild,
    dataset: &Dataset,
    gateway: &Gateway,
    cfg: &PatternConfig,
    run_seed: u64,
) -> Result<(), PatternError> {
    let leaf_ids: Vec<u32> =
        build.set.leaves().iter().map(|p| p.node_id).collect();
    for node_id in leaf_ids {
        loop {
            let (scores, failures) =
                audit_pattern(build, node_id, dataset, gateway, cfg, run_seed)?;
            let pattern = build
                .set
                .patterns
                .iter_mut()
                .find(|p| p.node_id == node_id)
                .expect("audited pattern exists");
            pattern.eval_scores = scores;
            if !scores.below(cfg.revision_threshold) || pattern.revision >= cfg.max_revision_rounds
            {
                break;
            }
            let notes = format!(
                "Observed mismatches between these patterns and held-out trajectories:\n{}",
                failures.join("\n")
            );
            let revision = pattern.revision + 1;
            let revised = extract_pattern(
                &pattern.cohort_key.clone(),
                node_id,
                &pattern.stats.clone(),
                gateway,
                Some(&notes),
            )?;
            let pattern = build
                .set
                .patterns
                .iter_mut()
                .find(|p| p.node_id == node_id)
                .expect("audited pattern exists");
            pattern.narrative = revised.narrative;
            pattern.provenance.extend(revised.provenance);
            pattern.revision = revision;
        }
    }
    Ok(())
}

/// One audit round for one leaf: returns the scores and up to three
/// failure-example lines for a potential revision prompt.
fn audit_pattern(
    build: &PatternBuild,
    node_id: u32,
    dataset: &Dataset,
    gateway: &Gateway,
    cfg: &PatternConfig,
    run_seed: u64,
) -> Result<(EvalScores, Vec<String>), PatternError> {
    let leaves = build.set.leaves();
    let pattern = build
        .set
        .patterns
        .iter()
        .find(|p| p.node_id == node_id)
        .expect("leaf pattern exists");
    let holdout = build.holdouts.get(&node_id).cloned().unwrap_or_default();
    if let Some(train) = build.trains.get(&node_id) {
        // Holdout discipline, re-checked where it matters: nothing the
        // pattern was summarized from may appear in its audit set.
        assert!(
            train.is_disjoint(&holdout),
            "holdout audit set of {} overlaps its training split",
            pattern.label()
        );
    }
    let mut diaries: Vec<&TravelDiary> = dataset
        .diaries
        .iter()
        .filter(|d| holdout.contains(&d.person_id) && !d.points.is_empty())
        .collect();
    diaries.sort_by(|a, b| (&a.person_id, a.date).cmp(&(&b.person_id, b.date)));
    diaries.truncate(cfg.eval_min_trajectories);
    if diaries.is_empty() {
        return Ok((EvalScores::default(), Vec::new()));
    }

    let mask_seed = subseed(run_seed, &format!("mask:{}:{}", pattern.label(), pattern.revision));
    let mut rng = crate::seeded_rng(mask_seed);
    let mut inference_hits = 0usize;
    let mut completion_total = 0.0;
    let mut failures: Vec<String> = Vec::new();

    for diary in &diaries {
        let mut anonymized = (*diary).clone();
        anonymized.person_id = String::new();
        let (predicted, response) = infer_group(&anonymized, &leaves, gateway)?;
        let hit = predicted.map_or(false, |p| p.node_id == node_id);
        if hit {
            inference_hits += 1;
        } else if failures.len() < 3 {
            let predicted_label =
                predicted.map_or("(no group recognized)".to_owned(), |p| p.label());
            failures.push(format!(
                "- a trajectory of this group was attributed to {predicted_label}: {}",
                response.lines().last().unwrap_or("").trim()
            ));
        }

        let point = rng.random_range(0..diary.points.len());
        let field = MaskField::ALL[rng.random_range(0..MaskField::ALL.len())];
        let masked =
            MaskedDiary::new((*diary).clone(), BTreeSet::from([(point, field)]))?;
        let outcome = complete_masked(&masked, pattern, gateway, cfg)?;
        completion_total += outcome.score;
        if outcome.score < 1.0 && failures.len() < 3 {
            failures.push(format!(
                "- masked {field} of trip {} was not reconstructed within tolerance",
                point + 1
            ));
        }
    }
    let scores = EvalScores {
        group_inference_accuracy: inference_hits as f64 / diaries.len() as f64,
        masked_completion_score: completion_total / diaries.len() as f64,
    };
    Ok((scores, failures))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{refine_hierarchy, CohortConfig};
    use crate::domain::vocab::*;
    use crate::domain::TrajectoryPoint;
    use crate::gateway::{slots_hash, BackendKind, ScriptedBackend, TranscriptStore};
    use crate::GeoPoint;
    use chrono::NaiveDate;

    fn profile(id: &str, occupation: Occupation) -> IndividualProfile {
        IndividualProfile {
            person_id: id.to_owned(),
            age_band: AgeBand::From26To30,
            gender: Gender::Male,
            occupation,
            income: Income::Medium,
            education: Education::Bachelors,
            owns_car: false,
            housing: Housing::RentedHouse,
            primary_mode: TravelMode::BusAndSubway,
            home: GeoPoint::new(22.54, 114.05),
            work: None,
        }
    }

    fn point(arrive: u16, duration: u16, purpose: TravelPurpose) -> TrajectoryPoint {
        TrajectoryPoint {
            arrive_time: arrive,
            location: GeoPoint::new(22.55, 114.06),
            purpose,
            distance_m: 2000.0,
            mode: TravelMode::Driving,
            duration_min: duration,
        }
    }

    fn diary(person: &str, date: &str, points: Vec<TrajectoryPoint>) -> TravelDiary {
        TravelDiary {
            person_id: person.to_owned(),
            date: NaiveDate::parse_from_str(date, "%Y-%m-%d").unwrap(),
            points,
            provenance: None,
        }
    }

    /// `n` students departing at `student_hour` and `n` workers at
    /// `worker_hour`, several weekday diaries each.
    fn archetype_dataset(n: usize, student_hour: u16, worker_hour: u16) -> Dataset {
        let mut ds = Dataset::default();
        let dates = ["2016-11-21", "2016-11-22", "2016-11-23"];
        for i in 0..n {
            for (occ, hour, prefix) in [
                (Occupation::Students, student_hour, "s"),
                (Occupation::SkilledWorkers, worker_hour, "w"),
            ] {
                let id = format!("{prefix}{i:03}");
                ds.profiles.insert(id.clone(), profile(&id, occ));
                for date in dates {
                    ds.diaries.push(diary(
                        &id,
                        date,
                        vec![
                            point(hour * 60 + 30, 30, TravelPurpose::CommutingToWork),
                            point(18 * 60 + 30, 30, TravelPurpose::ReturningHome),
                        ],
                    ));
                }
            }
        }
        ds
    }

    fn members(ds: &Dataset) -> BTreeSet<String> {
        ds.profiles.keys().cloned().collect()
    }

    fn replay_gateway(seed: u64) -> Gateway {
        Gateway::new(BackendKind::Replay { run_seed: seed }, TranscriptStore::in_memory())
    }

    fn stats_of(ds: &Dataset, ids: &BTreeSet<String>) -> CohortStats {
        summarize(ds, ids, &BinningConfig::default()).unwrap()
    }

    fn pattern_for(key: CohortKey, node_id: u32, stats: CohortStats) -> MobilityPattern {
        MobilityPattern {
            cohort_key: key,
            node_id,
            stats,
            narrative: "test narrative".into(),
            revision: 0,
            eval_scores: EvalScores::default(),
            provenance: Vec::new(),
        }
    }

    #[test]
    fn masked_diary_rejects_empty_and_out_of_range_masks() {
        let d = diary("a", "2016-11-21", vec![point(510, 30, TravelPurpose::Shopping)]);
        assert!(matches!(
            MaskedDiary::new(d.clone(), BTreeSet::new()),
            Err(PatternError::InvalidMask(_))
        ));
        assert!(matches!(
            MaskedDiary::new(d.clone(), BTreeSet::from([(1, MaskField::Mode)])),
            Err(PatternError::InvalidMask(_))
        ));
        let ok = MaskedDiary::new(d, BTreeSet::from([(0, MaskField::Mode)])).unwrap();
        let text = ok.render();
        assert!(text.contains("mode [MASKED]"));
        assert!(text.contains("purpose Shopping"), "unmasked fields stay visible");
        assert!(text.contains("FILL 1 MODE"));
    }

    #[test]
    fn extraction_issues_one_call_per_key_dimension() {
        let ds = archetype_dataset(3, 8, 8);
        let stats = stats_of(&ds, &members(&ds));
        let key = CohortKey::root()
            .child(crate::domain::AttributeDim::Occupation, "Students")
            .child(crate::domain::AttributeDim::Gender, "Male");
        let profiles_slot = render_group_profiles(&key, stats.member_count as usize);
        let behavior_slot = stats.summary_text();
        let mut scripted = ScriptedBackend::new(true);
        scripted.insert(
            TemplateId::PatternExtraction,
            &[&profiles_slot, &behavior_slot, "occupation"],
            "students travel at school hours",
        );
        scripted.insert(
            TemplateId::PatternExtraction,
            &[&profiles_slot, &behavior_slot, "gender"],
            "gender shows little effect here",
        );
        let gw = Gateway::new(BackendKind::Scripted(scripted), TranscriptStore::in_memory());
        let pattern = extract_pattern(&key, 5, &stats, &gw, None).unwrap();
        assert_eq!(gw.dispatch_count(), 2, "exactly one call per key dimension");
        assert_eq!(
            pattern.narrative,
            "students travel at school hours\n\ngender shows little effect here",
            "responses concatenate in key order"
        );
        assert_eq!(pattern.revision, 0);
        assert_eq!(pattern.provenance.len(), 2);
    }

    #[test]
    fn root_extraction_is_a_single_population_call() {
        let ds = archetype_dataset(2, 8, 9);
        let stats = stats_of(&ds, &members(&ds));
        let gw = replay_gateway(1);
        let pattern = extract_pattern(&CohortKey::root(), 0, &stats, &gw, None).unwrap();
        assert_eq!(gw.dispatch_count(), 1);
        // The replay narrative is the deterministic stats digest.
        assert!(pattern.narrative.contains(&stats.digest_text()));
    }

    #[test]
    fn replay_narrative_matches_recomputed_stats_digest() {
        let ds = archetype_dataset(4, 7, 9);
        let stats = stats_of(&ds, &members(&ds));
        let pattern =
            extract_pattern(&CohortKey::root(), 0, &stats, &replay_gateway(3), None).unwrap();
        let recomputed = stats_of(&ds, &members(&ds));
        assert!(pattern.narrative.contains(&recomputed.digest_text()));
    }

    #[test]
    fn infer_group_with_one_candidate_predicts_it() {
        let ds = archetype_dataset(2, 8, 8);
        let stats = stats_of(&ds, &members(&ds));
        let pattern = pattern_for(CohortKey::root(), 0, stats);
        let d = diary("x", "2016-11-21", vec![point(510, 30, TravelPurpose::Shopping)]);
        let (predicted, _) = infer_group(&d, &[&pattern], &replay_gateway(1)).unwrap();
        assert_eq!(predicted.unwrap().node_id, 0);
    }

    #[test]
    fn replay_infer_group_picks_the_closer_start_peak() {
        let ds = archetype_dataset(5, 8, 20);
        let students: BTreeSet<String> =
            members(&ds).into_iter().filter(|id| id.starts_with('s')).collect();
        let workers: BTreeSet<String> =
            members(&ds).into_iter().filter(|id| id.starts_with('w')).collect();
        let dim = crate::domain::AttributeDim::Occupation;
        let p_students = pattern_for(
            CohortKey::root().child(dim, "Students"),
            1,
            stats_of(&ds, &students),
        );
        let p_workers = pattern_for(
            CohortKey::root().child(dim, "Skilled Workers"),
            2,
            stats_of(&ds, &workers),
        );
        // All starts at hour 8 → the hour-8 cohort must win.
        let d = diary(
            "q",
            "2016-11-24",
            vec![
                point(510, 30, TravelPurpose::CommutingToWork),
                point(540, 20, TravelPurpose::Shopping),
            ],
        );
        let (predicted, response) =
            infer_group(&d, &[&p_students, &p_workers], &replay_gateway(7)).unwrap();
        assert_eq!(predicted.unwrap().node_id, 1, "response: {response}");

        // Independent brute force over the same statistics agrees.
        let (start, distance) = diary_histograms(&d, &p_students.stats);
        let by_hand: Vec<(u32, f64)> = [(1u32, &p_students), (2, &p_workers)]
            .into_iter()
            .map(|(id, p)| {
                let d_start = crate::eval::jsd_normalized(&start, &p.stats.all.start_time_hist);
                let d_dist = crate::eval::jsd_normalized(&distance, &p.stats.all.distance_hist);
                (id, d_start + d_dist)
            })
            .collect();
        let best = by_hand
            .iter()
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(best, 1);
    }

    #[test]
    fn scripted_label_matching_prefers_earliest_then_longest() {
        let ds = archetype_dataset(2, 8, 9);
        let stats = stats_of(&ds, &members(&ds));
        let dim = crate::domain::AttributeDim::Occupation;
        let coarse = pattern_for(CohortKey::root().child(dim, "Students"), 1, stats.clone());
        let fine = pattern_for(
            CohortKey::root()
                .child(dim, "Students")
                .child(crate::domain::AttributeDim::Gender, "Male"),
            2,
            stats.clone(),
        );
        let other = pattern_for(CohortKey::root().child(dim, "Skilled Workers"), 3, stats);
        let candidates = [&coarse, &fine, &other];
        // The fine label contains the coarse one at the same position; the
        // longer match wins.
        let hit = match_label(
            "this looks like occupation=Students | gender=Male to me",
            &candidates,
        )
        .unwrap();
        assert_eq!(hit.node_id, 2);
        // Earliest mention wins over later ones.
        let hit = match_label(
            "occupation=Skilled Workers, though occupation=Students was close",
            &candidates,
        )
        .unwrap();
        assert_eq!(hit.node_id, 3);
        assert!(match_label("no label here", &candidates).is_none());
    }

    #[test]
    fn unmatchable_response_counts_as_miss_not_error() {
        let ds = archetype_dataset(2, 8, 9);
        let stats = stats_of(&ds, &members(&ds));
        let pattern = pattern_for(
            CohortKey::root().child(crate::domain::AttributeDim::Occupation, "Students"),
            1,
            stats,
        );
        let d = diary("x", "2016-11-21", vec![point(510, 30, TravelPurpose::Shopping)]);
        // Lenient scripted backend returns its canned no-fixture text,
        // which names no label.
        let gw = Gateway::new(
            BackendKind::Scripted(ScriptedBackend::new(false)),
            TranscriptStore::in_memory(),
        );
        let (predicted, _) = infer_group(&d, &[&pattern], &gw).unwrap();
        assert!(predicted.is_none());
    }

    #[test]
    fn masked_completion_scores_follow_the_tolerances() {
        let ds = archetype_dataset(2, 8, 9);
        let stats = stats_of(&ds, &members(&ds));
        let pattern = pattern_for(CohortKey::root(), 0, stats);
        let cfg = PatternConfig::default();
        let base = diary(
            "x",
            "2016-11-21",
            vec![point(510, 30, TravelPurpose::GoingToSchool)],
        );
        let masked = MaskedDiary::new(
            base,
            BTreeSet::from([
                (0, MaskField::ArriveTime),
                (0, MaskField::Purpose),
                (0, MaskField::DistanceM),
            ]),
        )
        .unwrap();
        // Scripted response: time off by 50 min (within ±60), purpose
        // exact, distance off by 75% (outside ±50%).
        let patterns_slot = pattern.retrieval_text();
        let masked_slot = masked.render();
        let mut scripted = ScriptedBackend::new(true);
        scripted.insert_raw(
            TemplateId::PatternsUpdateStep2,
            &slots_hash(TemplateId::PatternsUpdateStep2, &[&patterns_slot, &masked_slot]),
            "FILL 1 ARRIVE_TIME: 09:20\nFILL 1 PURPOSE: Going to School\nFILL 1 DISTANCE_M: 3500",
        );
        let gw = Gateway::new(BackendKind::Scripted(scripted), TranscriptStore::in_memory());
        let outcome = complete_masked(&masked, &pattern, &gw, &cfg).unwrap();
        let by_field: BTreeMap<MaskField, f64> =
            outcome.field_scores.iter().map(|&(_, f, s)| (f, s)).collect();
        assert_eq!(by_field[&MaskField::ArriveTime], 1.0, "|560-510| = 50 <= 60");
        assert_eq!(by_field[&MaskField::Purpose], 1.0);
        assert_eq!(by_field[&MaskField::DistanceM], 0.0, "75% error > 50%");
        assert!((outcome.score - 2.0 / 3.0).abs() < 1e-12, "mean of field scores");
        assert_eq!(outcome.filled.points[0].arrive_time, 560);
        assert_eq!(outcome.filled.points[0].distance_m, 3500.0);
    }

    #[test]
    fn replay_masked_completion_reconstructs_separable_data() {
        // Every trip in this cohort departs at hour 8, distance 2000 m,
        // mode Driving — the modal/median fills are exactly right.
        let ds = archetype_dataset(3, 8, 8);
        let stats = stats_of(&ds, &members(&ds));
        let pattern = pattern_for(CohortKey::root(), 0, stats);
        let cfg = PatternConfig::default();
        let base = diary(
            "x",
            "2016-11-21",
            vec![point(510, 30, TravelPurpose::CommutingToWork)],
        );
        let masked = MaskedDiary::new(
            base,
            BTreeSet::from([
                (0, MaskField::ArriveTime),
                (0, MaskField::Mode),
                (0, MaskField::DistanceM),
            ]),
        )
        .unwrap();
        let outcome = complete_masked(&masked, &pattern, &replay_gateway(5), &cfg).unwrap();
        assert_eq!(outcome.score, 1.0, "response: {}", outcome.response);
    }

    #[test]
    fn split_members_is_deterministic_and_leaves_training_nonempty() {
        let members: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
        let (train_a, holdout_a) = split_members(&members, 0.2, 99);
        let (train_b, holdout_b) = split_members(&members, 0.2, 99);
        assert_eq!(train_a, train_b);
        assert_eq!(holdout_a, holdout_b);
        assert_eq!(holdout_a.len(), 2);
        assert_eq!(train_a.len(), 8);
        assert!(train_a.is_disjoint(&holdout_a));
        let (_, holdout_c) = split_members(&members, 0.2, 100);
        // Different seeds shuffle differently (overwhelmingly likely for
        // 10 choose 2; equality would indicate the seed is ignored).
        assert!(holdout_a != holdout_c || split_members(&members, 0.2, 101).1 != holdout_a);
        let single = vec!["only".to_owned()];
        let (train, holdout) = split_members(&single, 0.5, 1);
        assert_eq!(train.len(), 1);
        assert!(holdout.is_empty());
    }

    fn build_over(ds: &Dataset, gateway: &Gateway, cfg: &PatternConfig) -> PatternBuild {
        let tree = refine_hierarchy(
            ds,
            &replay_gateway(1),
            &CohortConfig { min_cohort_size: 2, ..CohortConfig::default() },
            &BinningConfig::default(),
        )
        .unwrap();
        extract_pattern_set(ds, &tree, gateway, cfg, &BinningConfig::default(), 42).unwrap()
    }

    #[test]
    fn self_evaluation_on_separable_archetypes_scores_high_without_revision() {
        let ds = archetype_dataset(10, 7, 10);
        let gw = replay_gateway(2);
        let cfg = PatternConfig::default();
        let mut build = build_over(&ds, &gw, &cfg);
        assert!(build.set.patterns.len() >= 3, "root plus two occupation leaves");
        self_evaluate(&mut build, &ds, &gw, &cfg, 42).unwrap();
        for pattern in build.set.leaves() {
            assert_eq!(
                pattern.eval_scores.group_inference_accuracy, 1.0,
                "separable cohorts classify perfectly: {}",
                pattern.label()
            );
            assert_eq!(pattern.revision, 0, "no revision when scores clear the threshold");
            assert!(pattern.eval_scores.masked_completion_score >= 0.5);
        }
    }

    #[test]
    fn always_wrong_backend_revises_exactly_max_rounds() {
        let ds = archetype_dataset(10, 7, 10);
        // Lenient scripted backend: every response is the canned
        // no-fixture text, so inference never matches and fills never
        // parse — both scores pin at 0.
        let gw = Gateway::new(
            BackendKind::Scripted(ScriptedBackend::new(false)),
            TranscriptStore::in_memory(),
        );
        let cfg = PatternConfig { max_revision_rounds: 2, ..PatternConfig::default() };
        let mut build = build_over(&ds, &gw, &cfg);
        self_evaluate(&mut build, &ds, &gw, &cfg, 42).unwrap();
        for pattern in build.set.leaves() {
            assert_eq!(pattern.eval_scores.group_inference_accuracy, 0.0);
            assert_eq!(pattern.eval_scores.masked_completion_score, 0.0);
            assert_eq!(pattern.revision, 2, "exactly max_revision_rounds revisions");
        }
    }

    #[test]
    fn zero_threshold_never_revises() {
        let ds = archetype_dataset(10, 7, 10);
        let gw = Gateway::new(
            BackendKind::Scripted(ScriptedBackend::new(false)),
            TranscriptStore::in_memory(),
        );
        let cfg = PatternConfig { revision_threshold: 0.0, ..PatternConfig::default() };
        let mut build = build_over(&ds, &gw, &cfg);
        self_evaluate(&mut build, &ds, &gw, &cfg, 42).unwrap();
        for pattern in &build.set.patterns {
            assert_eq!(pattern.revision, 0);
        }
    }

    #[test]
    fn holdouts_are_disjoint_from_training_stats() {
        let ds = archetype_dataset(10, 7, 10);
        let gw = replay_gateway(2);
        let cfg = PatternConfig::default();
        let build = build_over(&ds, &gw, &cfg);
        for pattern in &build.set.patterns {
            let train = &build.trains[&pattern.node_id];
            let holdout = &build.holdouts[&pattern.node_id];
            // Training and holdout are disjoint, together cover the node,
            // and the training stats count exactly the training members.
            let node_members: BTreeSet<String> = ds
                .profiles
                .keys()
                .filter(|id| pattern.cohort_key.matches(&ds.profiles[*id]))
                .cloned()
                .collect();
            assert!(train.is_disjoint(holdout));
            assert_eq!(&(train | holdout), &node_members);
            assert_eq!(pattern.stats.member_count as usize, train.len());
        }
    }

    #[test]
    fn pattern_set_ndjson_round_trips_and_resolves_by_depth() {
        let ds = archetype_dataset(10, 7, 10);
        let gw = replay_gateway(2);
        let cfg = PatternConfig::default();
        let mut build = build_over(&ds, &gw, &cfg);
        self_evaluate(&mut build, &ds, &gw, &cfg, 42).unwrap();
        let mut buf = Vec::new();
        let meta = serde_json::json!({"run_seed": 42});
        build.set.write_ndjson(&mut buf, Some(&meta)).unwrap();
        let (reloaded, got_meta) = PatternSet::read_ndjson(buf.as_slice()).unwrap();
        assert_eq!(reloaded, build.set);
        assert_eq!(got_meta, Some(meta));

        let student = profile("q", Occupation::Students);
        let resolved = reloaded.resolve(&student).unwrap();
        assert_eq!(resolved.cohort_key.depth(), 1);
        assert_eq!(resolved.cohort_key.pairs()[0].1, "Students");
        // Unseen occupation falls back to the root pattern.
        let retiree = profile("r", Occupation::RetiredUnemployed);
        assert!(reloaded.resolve(&retiree).unwrap().cohort_key.is_root());
        // Leaf listing excludes the root once children exist.
        assert!(reloaded.leaves().iter().all(|p| !p.cohort_key.is_root()));
    }
}
