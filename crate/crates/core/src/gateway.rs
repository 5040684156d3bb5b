//! Language-model gateway: the six prompt templates, request hashing, a
//! cache-first transcript store, and three interchangeable backends.
//!
//! Templates are compiled into the binary and rendered by substituting
//! `<INPUT n>` slots; generation templates additionally get a fixed output
//! contract appended so answers arrive in the fenced block grammar of
//! [`crate::blockfmt`]. Every completion is keyed by a request hash over
//! `(backend, model, prompt, temperature)`; the transcript store returns
//! cached responses for repeated hashes and appends newly dispatched
//! exchanges to an NDJSON log, which is what makes reruns reproducible and
//! resumable.
//!
//! Backends:
//! - **remote** posts a chat-completion request over HTTP. The API key is
//!   read from the `MOBFORGE_LLM_API_KEY` environment variable only, never
//!   from configuration files.
//! - **scripted** serves canned responses keyed by `(template, slots
//!   hash)`, for tests and offline fixtures.
//! - **replay** derives a deterministic structured response from the
//!   statistics attached to the call (see [`ReplayContext`]), seeded by
//!   the run seed and the request hash, so the full pipeline runs offline
//!   with outputs that are plausible for each prompt.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock, RwLock};
use std::time::Duration;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::blockfmt::{
    fmt_hhmm, render_decision_block, render_fill_line, render_plan_block, DecisionFields,
    MaskField, PlanEntry,
};
use crate::cohort::{CohortStats, StatsBlock};
use crate::domain::vocab::{TravelMode, TravelPurpose};
use crate::domain::{DayType, MINUTES_PER_DAY};
use crate::eval::jsd_normalized;
use crate::SeededRng;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("template {template} expects {expected} input slot(s), got {got}")]
    SlotArityMismatch {
        template: TemplateId,
        expected: usize,
        got: usize,
    },
    #[error("backend unreachable after {attempts} attempt(s): {detail}")]
    BackendUnreachable { attempts: u32, detail: String },
    #[error("no scripted fixture for template {template} with slots hash {slots_hash}")]
    FixtureMiss {
        template: TemplateId,
        slots_hash: String,
    },
    #[error("replay backend received no structured context for template {template}")]
    MissingContext { template: TemplateId },
    #[error("remote response is missing choices[0].message.content: {body}")]
    MalformedResponse { body: String },
    #[error("MOBFORGE_LLM_API_KEY environment variable is not set")]
    MissingApiKey,
    #[error("transcript store: {0}")]
    Io(#[from] std::io::Error),
    #[error("transcript line {line}: {source}")]
    MalformedTranscript {
        line: usize,
        source: serde_json::Error,
    },
    #[error("fixture line {line}: {source}")]
    MalformedFixture {
        line: usize,
        source: serde_json::Error,
    },
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

/// The six prompt templates, compiled in verbatim from `assets/prompts/`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    InitialGroupDivision,
    PatternExtraction,
    PatternsUpdateStep1,
    PatternsUpdateStep2,
    DailyPlan,
    RecursiveReasoning,
}

impl TemplateId {
    pub const ALL: [TemplateId; 6] = [
        TemplateId::InitialGroupDivision,
        TemplateId::PatternExtraction,
        TemplateId::PatternsUpdateStep1,
        TemplateId::PatternsUpdateStep2,
        TemplateId::DailyPlan,
        TemplateId::RecursiveReasoning,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TemplateId::InitialGroupDivision => "initial_group_division",
            TemplateId::PatternExtraction => "pattern_extraction",
            TemplateId::PatternsUpdateStep1 => "patterns_update_step1",
            TemplateId::PatternsUpdateStep2 => "patterns_update_step2",
            TemplateId::DailyPlan => "daily_plan",
            TemplateId::RecursiveReasoning => "recursive_reasoning",
        }
    }

    /// The unmodified template text.
    pub fn body(&self) -> &'static str {
        match self {
            TemplateId::InitialGroupDivision => {
                include_str!("../assets/prompts/initial_group_division.txt")
            }
            TemplateId::PatternExtraction => {
                include_str!("../assets/prompts/pattern_extraction.txt")
            }
            TemplateId::PatternsUpdateStep1 => {
                include_str!("../assets/prompts/patterns_update_step1.txt")
            }
            TemplateId::PatternsUpdateStep2 => {
                include_str!("../assets/prompts/patterns_update_step2.txt")
            }
            TemplateId::DailyPlan => include_str!("../assets/prompts/daily_plan.txt"),
            TemplateId::RecursiveReasoning => {
                include_str!("../assets/prompts/recursive_reasoning.txt")
            }
        }
    }

    /// Number of `<INPUT n>` slots the template declares.
    pub fn slot_count(&self) -> usize {
        match self {
            TemplateId::InitialGroupDivision => 3,
            TemplateId::PatternExtraction => 3,
            TemplateId::PatternsUpdateStep1 => 2,
            TemplateId::PatternsUpdateStep2 => 2,
            TemplateId::DailyPlan => 3,
            TemplateId::RecursiveReasoning => 5,
        }
    }
}

impl std::fmt::Display for TemplateId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Fixed formatting instructions appended to the two generation templates
/// so responses arrive in the machine-parseable block grammar. Returns
/// `None` for analysis templates, whose prose answers are parsed with
/// looser heuristics.
pub fn output_contract(id: TemplateId) -> Option<&'static str> {
    const PLAN_CONTRACT: &str = "Format your answer as a single fenced code block. Inside the block, write one group of lines per planned trip, in chronological order, each group exactly:\nWINDOW: HH:MM-HH:MM\nPURPOSE: <travel purpose>\nCATEGORY: <destination category>\nDISTANCE_M: <low>-<high>\nMODE: <travel mode>\nIf no trips are planned for this day, the block must contain exactly:\nNO_TRIPS: true";
    const DECISION_CONTRACT: &str = "Format your answer as a single fenced code block containing exactly these lines:\nPURPOSE: <travel purpose>\nCATEGORY: <destination category>\nDEPART: HH:MM\nDISTANCE_M: <low>-<high>\nMODE: <travel mode>";
    match id {
        TemplateId::DailyPlan => Some(PLAN_CONTRACT),
        TemplateId::RecursiveReasoning => Some(DECISION_CONTRACT),
        _ => None,
    }
}

/// A template with its slots substituted, ready to dispatch. `slots_hash`
/// identifies the call by inputs alone (independent of backend), which is
/// the key scripted fixtures match on.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPrompt {
    pub template_id: TemplateId,
    pub text: String,
    pub slots_hash: String,
}

impl RenderedPrompt {
    /// A follow-up variant of the same call with extra instructions
    /// appended. Both the text and the slots hash change, so the retry is a
    /// distinct request rather than a cache echo of the first answer.
    pub fn with_suffix(&self, suffix: &str) -> RenderedPrompt {
        RenderedPrompt {
            template_id: self.template_id,
            text: format!("{}\n\n{}", self.text, suffix),
            slots_hash: sha256_hex(&[self.slots_hash.as_bytes(), suffix.as_bytes()]),
        }
    }
}

/// Substitutes the slots into the template and appends the output contract
/// where one applies. Slot texts are inserted literally; placeholder-like
/// text inside a slot is never re-expanded.
pub fn render_prompt(id: TemplateId, slots: &[&str]) -> Result<RenderedPrompt, GatewayError> {
    let expected = id.slot_count();
    if slots.len() != expected {
        return Err(GatewayError::SlotArityMismatch {
            template: id,
            expected,
            got: slots.len(),
        });
    }
    let body = id.body();
    let mut text = String::with_capacity(
        body.len() + slots.iter().map(|s| s.len()).sum::<usize>(),
    );
    let mut rest = body;
    while let Some(pos) = rest.find("<INPUT ") {
        text.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        let close = tail.find('>');
        let index = close.and_then(|c| tail["<INPUT ".len()..c].trim().parse::<usize>().ok());
        match (close, index) {
            (Some(c), Some(n)) if (1..=slots.len()).contains(&n) => {
                text.push_str(slots[n - 1]);
                rest = &tail[c + 1..];
            }
            _ => {
                // Not a well-formed placeholder; keep the text literally.
                text.push_str("<INPUT ");
                rest = &tail["<INPUT ".len()..];
            }
        }
    }
    text.push_str(rest);
    if let Some(contract) = output_contract(id) {
        text = format!("{}\n\n{}", text.trim_end_matches('\n'), contract);
    }
    Ok(RenderedPrompt {
        template_id: id,
        text,
        slots_hash: slots_hash(id, slots),
    })
}

// ---------------------------------------------------------------------------
// Hashing
// ---------------------------------------------------------------------------

/// SHA-256 over length-prefixed fields, hex-encoded. Length prefixes keep
/// field boundaries unambiguous regardless of content.
fn sha256_hex(fields: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for f in fields {
        hasher.update((f.len() as u64).to_be_bytes());
        hasher.update(f);
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(digest.len() * 2);
    use std::fmt::Write as _;
    for b in digest {
        write!(out, "{b:02x}").expect("writing to a String cannot fail");
    }
    out
}

/// Identity of a call by its inputs: template plus slot texts.
pub fn slots_hash(id: TemplateId, slots: &[&str]) -> String {
    let mut fields: Vec<&[u8]> = Vec::with_capacity(slots.len() + 1);
    fields.push(id.name().as_bytes());
    fields.extend(slots.iter().map(|s| s.as_bytes()));
    sha256_hex(&fields)
}

/// Cache key of a completion: who would answer (backend, model), what was
/// asked (full rendered prompt), and how (temperature).
pub fn request_hash(backend_id: &str, model_name: &str, prompt: &str, temperature: f64) -> String {
    let temp = format!("{temperature:.6}");
    sha256_hex(&[
        backend_id.as_bytes(),
        model_name.as_bytes(),
        prompt.as_bytes(),
        temp.as_bytes(),
    ])
}

// ---------------------------------------------------------------------------
// Completion parameters and results
// ---------------------------------------------------------------------------

/// Sampling parameters of one completion call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CompletionParams {
    /// For generative calls (plans, decisions, narratives).
    pub fn generation() -> CompletionParams {
        CompletionParams { temperature: 0.2, max_tokens: 1024 }
    }

    /// For gate and scoring calls, which must be as stable as possible.
    pub fn gate() -> CompletionParams {
        CompletionParams { temperature: 0.0, max_tokens: 256 }
    }
}

/// A completion: the response text plus its cache identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub request_hash: String,
    /// Whether the response was served from the transcript store.
    pub cached: bool,
}

// ---------------------------------------------------------------------------
// Transcript store
// ---------------------------------------------------------------------------

/// One prompt/response exchange as persisted to the transcript log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTranscript {
    pub template_id: TemplateId,
    pub rendered_prompt: String,
    pub response_text: String,
    pub backend_id: String,
    pub model_name: String,
    pub request_hash: String,
    pub timestamp: String,
}

/// Append-only NDJSON log of every dispatched exchange, doubling as the
/// response cache: a request whose hash is already present is answered from
/// the log without touching the backend.
pub struct TranscriptStore {
    cache: RwLock<HashMap<String, Arc<str>>>,
    sink: Mutex<Option<std::io::BufWriter<std::fs::File>>>,
}

impl TranscriptStore {
    /// A cache with no backing file; exchanges live only in memory.
    pub fn in_memory() -> TranscriptStore {
        TranscriptStore {
            cache: RwLock::new(HashMap::new()),
            sink: Mutex::new(None),
        }
    }

    /// Opens (or creates) a transcript log, loading all prior exchanges
    /// into the cache and appending new ones to the file.
    pub fn open(path: &Path) -> Result<TranscriptStore, GatewayError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut cache = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(std::fs::File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let t: PromptTranscript = serde_json::from_str(&line)
                    .map_err(|source| GatewayError::MalformedTranscript { line: i + 1, source })?;
                cache.insert(t.request_hash, Arc::from(t.response_text.as_str()));
            }
        }
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(TranscriptStore {
            cache: RwLock::new(cache),
            sink: Mutex::new(Some(std::io::BufWriter::new(file))),
        })
    }

    pub fn get(&self, request_hash: &str) -> Option<Arc<str>> {
        self.cache.read().expect("transcript cache lock").get(request_hash).cloned()
    }

    pub fn len(&self) -> usize {
        self.cache.read().expect("transcript cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn record(&self, transcript: &PromptTranscript) -> Result<(), GatewayError> {
        self.cache
            .write()
            .expect("transcript cache lock")
            .insert(transcript.request_hash.clone(), Arc::from(transcript.response_text.as_str()));
        let mut sink = self.sink.lock().expect("transcript sink lock");
        if let Some(w) = sink.as_mut() {
            serde_json::to_writer(&mut *w, transcript).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

/// Remote chat-completionendpoint parameters. No secrets here: the API key
/// comes exclusively from the `MOBFORGE_LLM_API_KEY` environment variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    /// Extra attempts after the first on 429, 5xx, or transport errors,
    /// with exponential backoff.
    pub max_retries: u32,
    pub timeout_secs: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".to_owned(),
            model: "gpt-4o-mini".to_owned(),
            max_retries: 3,
            timeout_secs: 60,
        }
    }
}

/// Canned responses keyed by `(template, slots hash)`. In strict mode a
/// missing fixture is fatal; otherwise an unparseable placeholder response
/// is returned so parser fallbacks get exercised.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    fixtures: HashMap<(TemplateId, String), String>,
    strict: bool,
}

/// One fixture line in a scripted-backend NDJSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedFixture {
    pub template_id: TemplateId,
    pub slots_hash: String,
    pub response: String,
}

impl ScriptedBackend {
    pub fn new(strict: bool) -> ScriptedBackend {
        ScriptedBackend { fixtures: HashMap::new(), strict }
    }

    /// Registers the response for a call with these exact slots.
    pub fn insert(&mut self, id: TemplateId, slots: &[&str], response: &str) {
        self.fixtures.insert((id, slots_hash(id, slots)), response.to_owned());
    }

    /// Registers the response for the suffixed retry variant of a call
    /// (see [`RenderedPrompt::with_suffix`]).
    pub fn insert_suffixed(&mut self, id: TemplateId, slots: &[&str], suffix: &str, response: &str) {
        let base = slots_hash(id, slots);
        let hash = sha256_hex(&[base.as_bytes(), suffix.as_bytes()]);
        self.fixtures.insert((id, hash), response.to_owned());
    }

    /// Registers a response under an already-computed slots hash.
    pub fn insert_raw(&mut self, id: TemplateId, slots_hash: &str, response: &str) {
        self.fixtures.insert((id, slots_hash.to_owned()), response.to_owned());
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }

    /// Loads fixtures from an NDJSON file of [`ScriptedFixture`] lines.
    pub fn load_ndjson(path: &Path, strict: bool) -> Result<ScriptedBackend, GatewayError> {
        let mut backend = ScriptedBackend::new(strict);
        let reader = BufReader::new(std::fs::File::open(path)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: ScriptedFixture = serde_json::from_str(&line)
                .map_err(|source| GatewayError::MalformedFixture { line: i + 1, source })?;
            backend.fixtures.insert((f.template_id, f.slots_hash), f.response);
        }
        Ok(backend)
    }

    fn lookup(&self, rendered: &RenderedPrompt) -> Result<String, GatewayError> {
        match self.fixtures.get(&(rendered.template_id, rendered.slots_hash.clone())) {
            Some(response) => Ok(response.clone()),
            None if self.strict => Err(GatewayError::FixtureMiss {
                template: rendered.template_id,
                slots_hash: rendered.slots_hash.clone(),
            }),
            None => Ok("(scripted backend: no fixture registered for this prompt)".to_owned()),
        }
    }
}

/// Which backend a [`Gateway`] dispatches to.
pub enum BackendKind {
    Remote(RemoteConfig),
    Scripted(ScriptedBackend),
    /// Offline statistical replay; `run_seed` feeds the per-request RNG.
    Replay { run_seed: u64 },
}

impl BackendKind {
    pub fn id(&self) -> &'static str {
        match self {
            BackendKind::Remote(_) => "remote",
            BackendKind::Scripted(_) => "scripted",
            BackendKind::Replay { .. } => "replay",
        }
    }

    fn model_name(&self) -> &str {
        match self {
            BackendKind::Remote(cfg) => &cfg.model,
            BackendKind::Scripted(_) => "scripted",
            BackendKind::Replay { .. } => "replay",
        }
    }
}

// ---------------------------------------------------------------------------
// Replay context
// ---------------------------------------------------------------------------

/// The statistics a replay candidate group exposes to gate scoring and
/// group classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateCandidate {
    pub label: String,
    pub start_time_hist: Vec<f64>,
    pub distance_hist: Vec<f64>,
}

/// One masked trajectory field the backend is asked to reconstruct.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSlot {
    /// 1-based position of the masked point within the rendered diary.
    pub point_index: usize,
    pub field: MaskField,
    /// Purpose of the masked leg when it is itself unmasked; conditions
    /// distance reconstruction.
    pub purpose: Option<TravelPurpose>,
}

/// Structured data accompanying a call so the replay backend can derive its
/// response from the same statistics a live model would read as prose.
/// Other backends ignore it.
#[derive(Debug, Clone)]
pub enum ReplayContext {
    /// Nothing attached. Fatal under the replay backend.
    None,
    /// Split gate: the would-be children of a candidate segmentation.
    Gate { candidates: Vec<GateCandidate> },
    /// Pattern narrative extraction for one cohort.
    Extract { stats: Arc<CohortStats>, label: String },
    /// Which cohort do these trajectory histograms belong to?
    Classify {
        start_hist: Vec<f64>,
        distance_hist: Vec<f64>,
        cohorts: Vec<GateCandidate>,
    },
    /// Reconstruct masked fields from cohort statistics.
    Mask { stats: Arc<CohortStats>, masks: Vec<MaskSlot> },
    /// Sample a daily plan from cohort statistics.
    Plan { stats: Arc<CohortStats>, day_type: DayType },
    /// Decide the next trip from the current plan entry.
    Step { entry: PlanEntry },
}

/// Deterministic per-request RNG: seeded from the run seed and the request
/// hash, so distinct prompts draw independent streams and reruns repeat.
pub fn replay_rng(run_seed: u64, request_hash: &str) -> SeededRng {
    let mut hasher = Sha256::new();
    hasher.update(run_seed.to_be_bytes());
    hasher.update(request_hash.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    <SeededRng as rand::SeedableRng>::from_seed(seed)
}

/// Gate rating from candidate statistics: the largest pairwise divergence
/// among the candidates' start-time and distance histograms, mapped to
/// `round(1 + 9 * min(1, max_jsd / 0.3))`. Comparisons where either side
/// has no mass are skipped. Returns `(score, max_jsd)`.
pub fn replay_gate_score(candidates: &[GateCandidate]) -> (u8, f64) {
    let mut max_jsd = 0.0_f64;
    for i in 0..candidates.len() {
        for j in (i + 1)..candidates.len() {
            let pairs = [
                (&candidates[i].start_time_hist, &candidates[j].start_time_hist),
                (&candidates[i].distance_hist, &candidates[j].distance_hist),
            ];
            for (a, b) in pairs {
                if a.iter().sum::<f64>() <= 0.0 || b.iter().sum::<f64>() <= 0.0 {
                    continue;
                }
                let d: f64 = jsd_normalized(a, b);
                if d > max_jsd {
                    max_jsd = d;
                }
            }
        }
    }
    let score = (1.0 + 9.0 * (max_jsd / 0.3).min(1.0)).round() as u8;
    (score, max_jsd)
}

/// Divergence of one histogram family for classification: ordinary
/// divergence when both sides have mass, maximal when exactly one side is
/// empty, zero when both are.
fn family_divergence(a: &[f64], b: &[f64]) -> f64 {
    let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    match (sa > 0.0, sb > 0.0) {
        (true, true) => jsd_normalized(a, b),
        (true, false) | (false, true) => 1.0,
        (false, false) => 0.0,
    }
}

/// The cohort whose start-time and distance histograms are jointly closest
/// to the observed ones (sum of the two family divergences); ties keep the
/// earliest cohort. `None` when no cohorts are given.
pub fn nearest_cohort<'a>(
    start_hist: &[f64],
    distance_hist: &[f64],
    cohorts: &'a [GateCandidate],
) -> Option<&'a GateCandidate> {
    let mut best: Option<(&GateCandidate, f64)> = None;
    for c in cohorts {
        let d = family_divergence(start_hist, &c.start_time_hist)
            + family_divergence(distance_hist, &c.distance_hist);
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((c, d));
        }
    }
    best.map(|(c, _)| c)
}

fn replay_complete(
    run_seed: u64,
    rendered: &RenderedPrompt,
    ctx: &ReplayContext,
    request_hash: &str,
) -> Result<String, GatewayError> {
    match ctx {
        ReplayContext::None => Err(GatewayError::MissingContext {
            template: rendered.template_id,
        }),
        ReplayContext::Gate { candidates } => {
            let (score, max_jsd) = replay_gate_score(candidates);
            Ok(format!(
                "The candidate subgroups' start-time and distance distributions show a \
                 largest pairwise divergence of {max_jsd:.4}. Weighing that spread against \
                 the cost of finer segmentation, rating: {score}"
            ))
        }
        ReplayContext::Extract { stats, label } => Ok(format!(
            "Mobility analysis for group `{label}`:\n{}\n{}",
            stats.digest_text(),
            stats.summary_text()
        )),
        ReplayContext::Classify { start_hist, distance_hist, cohorts } => {
            let label = nearest_cohort(start_hist, distance_hist, cohorts)
                .map(|c| c.label.as_str())
                .unwrap_or("population");
            Ok(format!(
                "The observed trajectories align most closely with that group's \
                 start-time and distance distributions.\nGROUP: {label}"
            ))
        }
        ReplayContext::Mask { stats, masks } => {
            let block = &stats.all;
            let mut lines = Vec::with_capacity(masks.len());
            for m in masks {
                let value = match m.field {
                    MaskField::ArriveTime => {
                        let hour = StatsBlock::modal_index(&block.start_time_hist).unwrap_or(8);
                        fmt_hhmm((hour as u16) * 60 + 30)
                    }
                    MaskField::Purpose => {
                        let idx = StatsBlock::modal_index(&block.purpose_freq)
                            .unwrap_or(TravelPurpose::Other.index());
                        TravelPurpose::ALL[idx].as_str().to_owned()
                    }
                    MaskField::Mode => {
                        let idx = StatsBlock::modal_index(&block.mode_freq)
                            .unwrap_or(TravelMode::Walking.index());
                        TravelMode::ALL[idx].as_str().to_owned()
                    }
                    MaskField::DistanceM => {
                        let conditional = m
                            .purpose
                            .map(|p| &block.distance_by_purpose[p.index()])
                            .filter(|w| w.iter().sum::<f64>() > 0.0);
                        let weights = conditional.unwrap_or(&block.distance_hist);
                        let band = StatsBlock::median_index(weights).unwrap_or(1);
                        distance_band_midpoint(&stats.distance_binning, band).to_string()
                    }
                };
                lines.push(render_fill_line(m.point_index, m.field, &value));
            }
            Ok(format!("```\n{}\n```", lines.join("\n")))
        }
        ReplayContext::Plan { stats, day_type } => {
            let mut rng = replay_rng(run_seed, request_hash);
            let entries = stats.block(*day_type).sample_plan(&stats.distance_binning, &mut rng);
            Ok(render_plan_block(&entries))
        }
        ReplayContext::Step { entry } => {
            let mut rng = replay_rng(run_seed, request_hash);
            let end = entry.window_end.max(entry.window_start + 1);
            let depart = rng.random_range(entry.window_start..end);
            Ok(render_decision_block(&DecisionFields {
                purpose: entry.purpose,
                category: entry.category,
                depart_min: depart.min(MINUTES_PER_DAY - 1),
                distance_lo_m: entry.distance_lo_m,
                distance_hi_m: entry.distance_hi_m,
                mode: entry.mode,
            }))
        }
    }
}

/// Representative meters for a distance band: the band midpoint, or 150 km
/// for the open-ended overflow band.
pub fn distance_band_midpoint(binning: &crate::eval::Binning, band: usize) -> u32 {
    match binning.dense_edges(band) {
        Some((lo, hi)) if hi.is_finite() => ((lo + hi) / 2.0).round() as u32,
        _ => 150_000,
    }
}

// ---------------------------------------------------------------------------
// Remote dispatch
// ---------------------------------------------------------------------------

fn remote_complete(
    cfg: &RemoteConfig,
    client_slot: &OnceLock<reqwest::blocking::Client>,
    prompt: &str,
    params: &CompletionParams,
) -> Result<String, GatewayError> {
    let api_key =
        std::env::var("MOBFORGE_LLM_API_KEY").map_err(|_| GatewayError::MissingApiKey)?;
    let client = client_slot.get_or_init(|| {
        reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .unwrap_or_default()
    });
    let body = serde_json::json!({
        "model": cfg.model,
        "messages": [{ "role": "user", "content": prompt }],
        "temperature": params.temperature,
        "max_tokens": params.max_tokens,
    });
    let attempts = cfg.max_retries + 1;
    let mut delay = Duration::from_millis(500);
    let mut last_error = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            std::thread::sleep(delay);
            delay = delay.saturating_mul(2);
        }
        let sent = client.post(&cfg.endpoint).bearer_auth(&api_key).json(&body).send();
        match sent {
            Err(e) => last_error = e.to_string(),
            Ok(resp) => {
                let status = resp.status();
                if status.as_u16() == 429 || status.is_server_error() {
                    last_error = format!("HTTP {status}");
                    continue;
                }
                let text = match resp.text() {
                    Ok(t) => t,
                    Err(e) => {
                        last_error = e.to_string();
                        continue;
                    }
                };
                if !status.is_success() {
                    // Client errors other than rate limits will not heal on
                    // retry; fail immediately with the body for diagnosis.
                    return Err(GatewayError::BackendUnreachable {
                        attempts: attempt + 1,
                        detail: format!("HTTP {status}: {text}"),
                    });
                }
                let parsed: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|_| GatewayError::MalformedResponse { body: text.clone() })?;
                return parsed["choices"][0]["message"]["content"]
                    .as_str()
                    .map(str::to_owned)
                    .ok_or(GatewayError::MalformedResponse { body: text });
            }
        }
    }
    Err(GatewayError::BackendUnreachable { attempts, detail: last_error })
}

// ---------------------------------------------------------------------------
// Gateway
// ---------------------------------------------------------------------------

/// The single entry point for completions: checks the transcript store,
/// dispatches to the backend on a miss, and records the new exchange.
/// Shareable across worker threads.
pub struct Gateway {
    backend: BackendKind,
    store: TranscriptStore,
    dispatches: AtomicU64,
    http_client: OnceLock<reqwest::blocking::Client>,
}

impl Gateway {
    pub fn new(backend: BackendKind, store: TranscriptStore) -> Gateway {
        Gateway {
            backend,
            store,
            dispatches: AtomicU64::new(0),
            http_client: OnceLock::new(),
        }
    }

    pub fn backend_id(&self) -> &'static str {
        self.backend.id()
    }

    /// Completions dispatched to the backend by this gateway (cache hits
    /// excluded).
    pub fn dispatch_count(&self) -> u64 {
        self.dispatches.load(Ordering::Relaxed)
    }

    pub fn store(&self) -> &TranscriptStore {
        &self.store
    }

    /// Answers a rendered prompt: cache first, then the backend. `ctx`
    /// carries the structured statistics the replay backend derives its
    /// response from; other backends ignore it.
    pub fn complete(
        &self,
        rendered: &RenderedPrompt,
        params: &CompletionParams,
        ctx: &ReplayContext,
    ) -> Result<Completion, GatewayError> {
        let backend_id = self.backend.id();
        let model_name = self.backend.model_name().to_owned();
        let hash = request_hash(backend_id, &model_name, &rendered.text, params.temperature);
        if let Some(text) = self.store.get(&hash) {
            return Ok(Completion {
                text: text.to_string(),
                request_hash: hash,
                cached: true,
            });
        }
        let text = match &self.backend {
            BackendKind::Remote(cfg) => {
                remote_complete(cfg, &self.http_client, &rendered.text, params)?
            }
            BackendKind::Scripted(scripted) => scripted.lookup(rendered)?,
            BackendKind::Replay { run_seed } => {
                replay_complete(*run_seed, rendered, ctx, &hash)?
            }
        };
        self.dispatches.fetch_add(1, Ordering::Relaxed);
        self.store.record(&PromptTranscript {
            template_id: rendered.template_id,
            rendered_prompt: rendered.text.clone(),
            response_text: text.clone(),
            backend_id: backend_id.to_owned(),
            model_name,
            request_hash: hash.clone(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        })?;
        Ok(Completion { text, request_hash: hash, cached: false })
    }
}
