//! Grammar for the structured text exchanged with language-model backends.
//!
//! Free prose from a backend is never trusted directly: every machine-read
//! value travels inside a fenced code block of `KEY: value` lines. This
//! module owns that grammar — rendering (used by the deterministic backends
//! and by prompt construction) and parsing (used on every backend response,
//! regardless of origin). Keys are case-insensitive, unknown keys are
//! ignored, and when a response contains several fenced blocks the *last*
//! one wins, since models tend to restate their final answer.
//!
//! Two block shapes exist:
//! - a *decision block*: one activity decision (`PURPOSE`, `CATEGORY`,
//!   `DEPART`, `DISTANCE_M`, `MODE`);
//! - a *plan block*: repeated groups of the same keys, each introduced by a
//!   `WINDOW: HH:MM-HH:MM` line (or the single line `NO_TRIPS: true` for an
//!   empty day).
//!
//! Additionally, masked-field completions are exchanged as
//! `FILL <index> <FIELD>: value` lines and segmentation ratings as a lone
//! integer near the word "rating"; the lenient scanners for both live here
//! so that every module parses backend output the same way.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::vocab::{TravelMode, TravelPurpose};
use crate::spatial::CategoryQuery;

/// Minutes per day, used to bound parsed clock times.
const DAY_MIN: u16 = 24 * 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlockError {
    #[error("response contains no fenced block")]
    MissingBlock,
    #[error("line {line:?} is not a `KEY: value` pair")]
    MalformedLine { line: String },
    #[error("block is missing required key {key}")]
    MissingKey { key: &'static str },
    #[error("bad value for {key}: {reason}")]
    BadValue { key: &'static str, reason: String },
}

fn bad(key: &'static str, reason: impl Into<String>) -> BlockError {
    BlockError::BadValue {
        key,
        reason: reason.into(),
    }
}

/// Formats minutes-since-midnight as `HH:MM`; 1440 renders as `24:00`
/// (used only as an end-of-day window bound).
pub fn fmt_hhmm(minutes: u16) -> String {
    format!("{:02}:{:02}", minutes / 60, minutes % 60)
}

/// Parses `HH:MM` into minutes since midnight. Accepts `24:00` (= 1440)
/// because day-final plan windows end there; callers needing a departure
/// time must check `< 1440` themselves.
pub fn parse_hhmm(s: &str) -> Result<u16, String> {
    let (h, m) = s
        .trim()
        .split_once(':')
        .ok_or_else(|| format!("{s:?} is not HH:MM"))?;
    let h: u16 = h.trim().parse().map_err(|_| format!("bad hour in {s:?}"))?;
    let m: u16 = m
        .trim()
        .parse()
        .map_err(|_| format!("bad minute in {s:?}"))?;
    let total = h * 60 + m;
    if m > 59 || total > DAY_MIN {
        return Err(format!("{s:?} is out of range"));
    }
    Ok(total)
}

/// One activity decision as carried by a decision block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionFields {
    pub purpose: TravelPurpose,
    pub category: CategoryQuery,
    /// Departure, minutes since midnight, strictly before 24:00.
    pub depart_min: u16,
    pub distance_lo_m: u32,
    pub distance_hi_m: u32,
    pub mode: TravelMode,
}

/// One planned trip slot inside a daily plan block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    /// Window start, inclusive, minutes since midnight.
    pub window_start: u16,
    /// Window end, exclusive; at most 1440.
    pub window_end: u16,
    pub purpose: TravelPurpose,
    pub category: CategoryQuery,
    pub distance_lo_m: u32,
    pub distance_hi_m: u32,
    pub mode: TravelMode,
}

/// A masked diary field, named as it appears in `FILL` lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskField {
    ArriveTime,
    Purpose,
    Mode,
    DistanceM,
}

impl MaskField {
    pub const ALL: [MaskField; 4] = [
        MaskField::ArriveTime,
        MaskField::Purpose,
        MaskField::Mode,
        MaskField::DistanceM,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MaskField::ArriveTime => "ARRIVE_TIME",
            MaskField::Purpose => "PURPOSE",
            MaskField::Mode => "MODE",
            MaskField::DistanceM => "DISTANCE_M",
        }
    }
}

impl std::fmt::Display for MaskField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

pub fn render_decision_block(d: &DecisionFields) -> String {
    format!(
        "```\nPURPOSE: {}\nCATEGORY: {}\nDEPART: {}\nDISTANCE_M: {}-{}\nMODE: {}\n```",
        d.purpose,
        d.category,
        fmt_hhmm(d.depart_min),
        d.distance_lo_m,
        d.distance_hi_m,
        d.mode
    )
}

pub fn render_plan_block(entries: &[PlanEntry]) -> String {
    if entries.is_empty() {
        return "```\nNO_TRIPS: true\n```".to_owned();
    }
    let mut out = String::from("```\n");
    for e in entries {
        let _ = writeln!(
            out,
            "WINDOW: {}-{}\nPURPOSE: {}\nCATEGORY: {}\nDISTANCE_M: {}-{}\nMODE: {}",
            fmt_hhmm(e.window_start),
            fmt_hhmm(e.window_end),
            e.purpose,
            e.category,
            e.distance_lo_m,
            e.distance_hi_m,
            e.mode
        );
    }
    out.push_str("```");
    out
}

pub fn render_fill_line(point_index: usize, field: MaskField, value: &str) -> String {
    format!("FILL {point_index} {field}: {value}")
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

/// Returns the lines of the last fenced block in `text`. The fence marker is
/// a line starting with three backticks (an info string after the backticks
/// is tolerated); an unterminated final fence is accepted as running to the
/// end of the text, which saves truncated-but-complete responses.
fn last_fenced_block(text: &str) -> Result<Vec<&str>, BlockError> {
    let mut blocks: Vec<Vec<&str>> = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            match current.take() {
                Some(done) => blocks.push(done),
                None => current = Some(Vec::new()),
            }
            continue;
        }
        if let Some(buf) = current.as_mut() {
            buf.push(line);
        }
    }
    if let Some(open) = current {
        blocks.push(open);
    }
    blocks.pop().ok_or(BlockError::MissingBlock)
}

/// Splits a block line into `(KEY, value)`, uppercasing the key. Blank
/// lines yield `None`.
fn key_value(line: &str) -> Result<Option<(String, &str)>, BlockError> {
    let trimmed = line.trim();
    if trimmed.is_empty() {
        return Ok(None);
    }
    let (key, value) = trimmed
        .split_once(':')
        .ok_or_else(|| BlockError::MalformedLine {
            line: trimmed.to_owned(),
        })?;
    Ok(Some((key.trim().to_uppercase(), value.trim())))
}

fn parse_depart(value: &str) -> Result<u16, BlockError> {
    let t = parse_hhmm(value).map_err(|e| bad("DEPART", e))?;
    if t >= DAY_MIN {
        return Err(bad("DEPART", "departure must be before 24:00"));
    }
    Ok(t)
}

fn parse_distance_range(value: &str) -> Result<(u32, u32), BlockError> {
    const KEY: &str = "DISTANCE_M";
    let (lo, hi) = value
        .split_once('-')
        .ok_or_else(|| bad(KEY, format!("{value:?} is not `lo-hi`")))?;
    let parse = |s: &str| -> Result<u32, BlockError> {
        let s = s.trim();
        // Tolerate a decimal point; distances are meters, fractions noise.
        let whole = s.split('.').next().unwrap_or(s);
        whole
            .parse()
            .map_err(|_| bad(KEY, format!("{s:?} is not a non-negative integer")))
    };
    let (lo, hi) = (parse(lo)?, parse(hi)?);
    if lo > hi {
        return Err(bad(KEY, format!("range {lo}-{hi} is inverted")));
    }
    Ok((lo, hi))
}

fn parse_window(value: &str) -> Result<(u16, u16), BlockError> {
    const KEY: &str = "WINDOW";
    let (a, b) = value
        .split_once('-')
        .ok_or_else(|| bad(KEY, format!("{value:?} is not `HH:MM-HH:MM`")))?;
    let (start, end) = (
        parse_hhmm(a).map_err(|e| bad(KEY, e))?,
        parse_hhmm(b).map_err(|e| bad(KEY, e))?,
    );
    if start >= end {
        return Err(bad(KEY, format!("window {value:?} does not move forward")));
    }
    Ok((start, end))
}

fn parse_purpose(value: &str) -> Result<TravelPurpose, BlockError> {
    value.parse().map_err(|e| bad("PURPOSE", format!("{e}")))
}

fn parse_mode(value: &str) -> Result<TravelMode, BlockError> {
    value.parse().map_err(|e| bad("MODE", format!("{e}")))
}

fn parse_category(value: &str) -> Result<CategoryQuery, BlockError> {
    value
        .to_lowercase()
        .parse()
        .map_err(|e| bad("CATEGORY", format!("{e}")))
}

/// Parses the last fenced block of `text` as a single activity decision.
pub fn parse_decision_block(text: &str) -> Result<DecisionFields, BlockError> {
    let mut purpose = None;
    let mut category = None;
    let mut depart = None;
    let mut range = None;
    let mut mode = None;
    for line in last_fenced_block(text)? {
        let Some((key, value)) = key_value(line)? else {
            continue;
        };
        match key.as_str() {
            "PURPOSE" => purpose = Some(parse_purpose(value)?),
            "CATEGORY" => category = Some(parse_category(value)?),
            "DEPART" => depart = Some(parse_depart(value)?),
            "DISTANCE_M" => range = Some(parse_distance_range(value)?),
            "MODE" => mode = Some(parse_mode(value)?),
            _ => {} // unknown keys ignored by contract
        }
    }
    let purpose = purpose.ok_or(BlockError::MissingKey { key: "PURPOSE" })?;
    let (distance_lo_m, distance_hi_m) =
        range.ok_or(BlockError::MissingKey { key: "DISTANCE_M" })?;
    Ok(DecisionFields {
        purpose,
        // A missing CATEGORY falls back to the purpose's natural category
        // rather than failing: the category is derivable, the rest is not.
        category: category.unwrap_or_else(|| CategoryQuery::for_purpose(purpose)),
        depart_min: depart.ok_or(BlockError::MissingKey { key: "DEPART" })?,
        distance_lo_m,
        distance_hi_m,
        mode: mode.ok_or(BlockError::MissingKey { key: "MODE" })?,
    })
}

#[derive(Default)]
struct PlanEntryDraft {
    window: (u16, u16),
    purpose: Option<TravelPurpose>,
    category: Option<CategoryQuery>,
    range: Option<(u32, u32)>,
    mode: Option<TravelMode>,
}

impl PlanEntryDraft {
    fn finish(self) -> Result<PlanEntry, BlockError> {
        let purpose = self.purpose.ok_or(BlockError::MissingKey { key: "PURPOSE" })?;
        let (distance_lo_m, distance_hi_m) = self
            .range
            .ok_or(BlockError::MissingKey { key: "DISTANCE_M" })?;
        Ok(PlanEntry {
            window_start: self.window.0,
            window_end: self.window.1,
            purpose,
            category: self.category.unwrap_or_else(|| CategoryQuery::for_purpose(purpose)),
            distance_lo_m,
            distance_hi_m,
            mode: self.mode.ok_or(BlockError::MissingKey { key: "MODE" })?,
        })
    }
}

/// Parses the last fenced block of `text` as a daily plan: repeated
/// `WINDOW`-led groups, or `NO_TRIPS: true` / an empty block for a day
/// without trips. Entries are returned in block order; whether the windows
/// are consistent (increasing, non-overlapping) is the caller's check — this
/// function only enforces the grammar.
pub fn parse_plan_block(text: &str) -> Result<Vec<PlanEntry>, BlockError> {
    let mut entries = Vec::new();
    let mut draft: Option<PlanEntryDraft> = None;
    for line in last_fenced_block(text)? {
        let Some((key, value)) = key_value(line)? else {
            continue;
        };
        if key == "WINDOW" {
            if let Some(done) = draft.take() {
                entries.push(done.finish()?);
            }
            draft = Some(PlanEntryDraft {
                window: parse_window(value)?,
                ..PlanEntryDraft::default()
            });
            continue;
        }
        if key == "NO_TRIPS" {
            continue; // explicit empty-day marker
        }
        let Some(d) = draft.as_mut() else {
            // A known entry key before any WINDOW line means the block lost
            // its structure; ignoring it silently could hide a broken
            // fixture, so treat it as malformed.
            if matches!(key.as_str(), "PURPOSE" | "CATEGORY" | "DISTANCE_M" | "MODE" | "DEPART") {
                return Err(BlockError::MalformedLine {
                    line: line.trim().to_owned(),
                });
            }
            continue;
        };
        match key.as_str() {
            "PURPOSE" => d.purpose = Some(parse_purpose(value)?),
            "CATEGORY" => d.category = Some(parse_category(value)?),
            "DISTANCE_M" => d.range = Some(parse_distance_range(value)?),
            "MODE" => d.mode = Some(parse_mode(value)?),
            _ => {}
        }
    }
    if let Some(done) = draft.take() {
        entries.push(done.finish()?);
    }
    Ok(entries)
}

/// Scans any line of `text` (inside or outside fences) for
/// `FILL <point_index> <FIELD>: value` and returns the last matching value.
/// Keys are case-insensitive and whitespace-tolerant.
pub fn parse_fill(text: &str, point_index: usize, field: MaskField) -> Option<String> {
    let mut found = None;
    for line in text.lines() {
        let trimmed = line.trim();
        let Some(rest) = strip_prefix_ci(trimmed, "FILL") else {
            continue;
        };
        let rest = rest.trim_start();
        let Some(rest) = rest.strip_prefix(&point_index.to_string()) else {
            continue;
        };
        // Guard against index prefix collisions ("FILL 12 ..." vs index 1).
        if rest.starts_with(|c: char| c.is_ascii_digit()) {
            continue;
        }
        let rest = rest.trim_start();
        let Some(rest) = strip_prefix_ci(rest, field.as_str()) else {
            continue;
        };
        if let Some(value) = rest.trim_start().strip_prefix(':') {
            found = Some(value.trim().to_owned());
        }
    }
    found
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    if s.len() >= prefix.len() && s[..prefix.len()].eq_ignore_ascii_case(prefix) {
        Some(&s[prefix.len()..])
    } else {
        None
    }
}

/// Lenient extraction of a 1..=10 rating from free text. Numbers adjacent
/// to the word "rating" are preferred (so "rating: 8" beats the "1 to 10"
/// scale restated in prose); failing that, the *last* in-range integer wins,
/// since answers tend to end with the verdict.
pub fn extract_rating(text: &str) -> Option<u8> {
    let lower = text.to_lowercase();
    let mut near_rating = None;
    for (pos, _) in lower.match_indices("rating") {
        let tail = &lower[pos + "rating".len()..];
        let window = &tail[..tail.len().min(16)];
        if let Some(n) = first_int_in_range(window) {
            near_rating = Some(n);
        }
    }
    if near_rating.is_some() {
        return near_rating;
    }
    let mut last = None;
    let mut digits = String::new();
    for c in lower.chars().chain(std::iter::once(' ')) {
        if c.is_ascii_digit() {
            digits.push(c);
        } else if !digits.is_empty() {
            if let Ok(n) = digits.parse::<u32>() {
                if (1..=10).contains(&n) {
                    last = Some(n as u8);
                }
            }
            digits.clear();
        }
    }
    last
}

fn first_int_in_range(s: &str) -> Option<u8> {
    let mut digits = String::new();
    for c in s.chars().chain(std::iter::once(' ')) {
        if c.is_ascii_digit() {
            digits.push(c);
        } else if !digits.is_empty() {
            let n: u32 = digits.parse().ok()?;
            return (1..=10).contains(&n).then_some(n as u8);
        }
    }
    None
}
