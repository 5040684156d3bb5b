//! The stage functions behind each subcommand. Every stage reads its
//! inputs from the configured paths, does its work, and writes artifacts
//! stamped with the resolved config hash and seed, so any output file is
//! traceable to the exact settings that produced it.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use mobforge_core::cohort::{refine_hierarchy, CohortTree};
use mobforge_core::config::RunConfig;
use mobforge_core::domain::AttributeDim;
use mobforge_core::eval::{
    metric_histogram, multiscale_evaluate, Counts, DayFilter, EvalReport, Metric,
};
use mobforge_core::gateway::{Gateway, TranscriptStore};
use mobforge_core::ingest::{
    load_survey, load_survey_lenient, read_dataset_file, synth_dataset, write_dataset_file,
    SynthSpec,
};
use mobforge_core::pattern::{
    digest_pattern_set, extract_pattern_set, self_evaluate, PatternSet,
};
use mobforge_core::reasoner::{generate_diary, DiaryOutcome, GeneratedDiary, ReasonerConfig};
use mobforge_core::spatial::{grid::generate_grid, load_network, PoiIndex, RoadNetwork, SpatialIndex};
use mobforge_core::{Dataset, IndividualProfile};

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating directory {}", parent.display()))?;
    }
    Ok(())
}

/// Opens the transcript cache and wires up the configured backend.
pub fn open_gateway(config: &RunConfig) -> Result<Gateway> {
    let cache = config.paths.cache_path();
    create_parent(&cache)?;
    let store = TranscriptStore::open(&cache)
        .with_context(|| format!("opening transcript cache {}", cache.display()))?;
    let backend = config.backend_kind().context("configuring backend")?;
    Ok(Gateway::new(backend, store))
}

fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let path = config.paths.dataset_path();
    let (dataset, _) = read_dataset_file(&path)
        .with_context(|| format!("loading dataset {}", path.display()))?;
    Ok(dataset)
}

// ---------------------------------------------------------------------------
// ingest & synth
// ---------------------------------------------------------------------------

/// Loads the survey CSVs, validates them, and writes the normalized
/// dataset. In lenient mode bad rows are skipped and reported to an issues
/// artifact instead of aborting the load.
pub fn cmd_ingest(config: &RunConfig, lenient: bool) -> Result<serde_json::Value> {
    let profiles = config
        .paths
        .survey_profiles
        .as_ref()
        .context("ingest needs paths.survey_profiles")?;
    let trips = config.paths.survey_trips.as_ref().context("ingest needs paths.survey_trips")?;

    let (dataset, issues) = if lenient {
        load_survey_lenient(profiles, trips).context("loading survey (lenient)")?
    } else {
        (load_survey(profiles, trips).context("loading survey")?, Vec::new())
    };

    let out = config.paths.dataset_path();
    create_parent(&out)?;
    write_dataset_file(&dataset, &out, Some(&config.echo_meta()))
        .with_context(|| format!("writing dataset {}", out.display()))?;

    let mut issues_path = None;
    if !issues.is_empty() {
        let path = config.paths.out_dir.join("ingest_issues.json");
        create_parent(&path)?;
        let body = serde_json::json!({ "meta": config.echo_meta(), "issues": issues });
        std::fs::write(&path, format!("{:#}\n", body))
            .with_context(|| format!("writing {}", path.display()))?;
        issues_path = Some(path);
    }

    Ok(serde_json::json!({
        "command": "ingest",
        "persons": dataset.profiles.len(),
        "diaries": dataset.diaries.len(),
        "zero_trip_days": dataset.zero_trip_days.len(),
        "skipped_rows": issues.len(),
        "issues_file": issues_path.map(|p| p.display().to_string()),
        "dataset": out.display().to_string(),
        "meta": config.echo_meta(),
    }))
}

/// Generates the synthetic survey described by the spec file and writes it
/// as the normalized dataset.
pub fn cmd_synth(config: &RunConfig) -> Result<serde_json::Value> {
    let spec_path =
        config.paths.synth_spec.as_ref().context("synth needs paths.synth_spec")?;
    let spec = SynthSpec::load(spec_path)
        .with_context(|| format!("loading synth spec {}", spec_path.display()))?;
    let dataset = synth_dataset(&spec).context("synthesizing dataset")?;

    let out = config.paths.dataset_path();
    create_parent(&out)?;
    write_dataset_file(&dataset, &out, Some(&config.echo_meta()))
        .with_context(|| format!("writing dataset {}", out.display()))?;

    Ok(serde_json::json!({
        "command": "synth",
        "persons": dataset.profiles.len(),
        "diaries": dataset.diaries.len(),
        "zero_trip_days": dataset.zero_trip_days.len(),
        "dataset": out.display().to_string(),
        "meta": config.echo_meta(),
    }))
}

// ---------------------------------------------------------------------------
// cohort
// ---------------------------------------------------------------------------

/// The cohort-tree artifact: the hierarchy plus the provenance stamp.
#[derive(Debug, Serialize, Deserialize)]
pub struct CohortArtifact {
    pub meta: serde_json::Value,
    pub tree: CohortTree,
}

fn read_cohorts(path: &Path) -> Result<CohortTree> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let artifact: CohortArtifact = serde_json::from_reader(std::io::BufReader::new(file))
        .with_context(|| format!("parsing cohort tree {}", path.display()))?;
    Ok(artifact.tree)
}

/// Divides the dataset's population into the cohort hierarchy and writes
/// it as JSON.
pub fn cmd_cohort(config: &RunConfig) -> Result<serde_json::Value> {
    let dataset = load_dataset(config)?;
    let gateway = open_gateway(config)?;
    let tree = refine_hierarchy(&dataset, &gateway, &config.effective_cohort(), &config.binning)
        .context("building cohort hierarchy")?;

    let out = config.paths.cohorts_path();
    create_parent(&out)?;
    let artifact = CohortArtifact { meta: config.echo_meta(), tree };
    let mut w = BufWriter::new(
        File::create(&out).with_context(|| format!("creating {}", out.display()))?,
    );
    serde_json::to_writer_pretty(&mut w, &artifact)?;
    w.write_all(b"\n")?;
    w.flush()?;

    let leaves = artifact.tree.leaves().count();
    Ok(serde_json::json!({
        "command": "cohort",
        "nodes": artifact.tree.nodes.len(),
        "leaves": leaves,
        "cohorts": out.display().to_string(),
        "meta": config.echo_meta(),
    }))
}

// ---------------------------------------------------------------------------
// patterns
// ---------------------------------------------------------------------------

/// Extracts a mobility pattern per cohort and runs the self-evaluation
/// loop, unless the understanding ablation is on, in which case patterns
/// carry only raw statistical digests.
pub fn cmd_patterns(config: &RunConfig) -> Result<serde_json::Value> {
    let dataset = load_dataset(config)?;
    let tree = read_cohorts(&config.paths.cohorts_path())?;

    let build = if config.ablation.disable_self_evaluation {
        digest_pattern_set(&dataset, &tree, &config.pattern, &config.binning, config.run_seed)
            .context("building digest-only patterns")?
    } else {
        let gateway = open_gateway(config)?;
        let mut build = extract_pattern_set(
            &dataset,
            &tree,
            &gateway,
            &config.pattern,
            &config.binning,
            config.run_seed,
        )
        .context("extracting patterns")?;
        self_evaluate(&mut build, &dataset, &gateway, &config.pattern, config.run_seed)
            .context("self-evaluating patterns")?;
        build
    };

    let out = config.paths.patterns_path();
    create_parent(&out)?;
    let mut w = BufWriter::new(
        File::create(&out).with_context(|| format!("creating {}", out.display()))?,
    );
    build.set.write_ndjson(&mut w, Some(&config.echo_meta()))?;
    w.flush()?;

    let revised = build.set.patterns.iter().filter(|p| p.revision > 0).count();
    let min_accuracy = build
        .set
        .leaves()
        .iter()
        .map(|p| p.eval_scores.group_inference_accuracy)
        .fold(f64::INFINITY, f64::min);
    Ok(serde_json::json!({
        "command": "patterns",
        "patterns": build.set.patterns.len(),
        "revised": revised,
        "min_group_inference_accuracy": if min_accuracy.is_finite() { Some(min_accuracy) } else { None },
        "digest_only": config.ablation.disable_self_evaluation,
        "patterns_file": out.display().to_string(),
        "meta": config.echo_meta(),
    }))
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

/// The in-memory result of a generation run: the generated dataset (same
/// profiles as the source population it was driven by) plus the per-diary
/// anchoring trails the file format does not carry.
pub struct Generated {
    pub dataset: Dataset,
    /// One entry per generated diary, aligned with `dataset.diaries`.
    pub details: Vec<GeneratedDiary>,
    pub fallback_steps: u64,
    pub rethink_rounds: u64,
    pub warnings: Vec<String>,
}

/// Builds the spatial index from the configured network CSVs, or from the
/// synthetic grid when no files are given.
pub fn build_spatial(config: &RunConfig) -> Result<SpatialIndex> {
    let paths = &config.paths;
    match (&paths.network_nodes, &paths.network_edges, &paths.network_pois) {
        (Some(nodes), Some(edges), Some(pois)) => {
            let (index, rejected) =
                load_network(nodes, edges, pois, config.reasoner.snap_radius_m, false)
                    .context("loading road network")?;
            if !rejected.is_empty() {
                eprintln!("warning: {} POIs beyond snap radius were dropped", rejected.len());
            }
            Ok(index)
        }
        (None, None, None) => {
            let grid = config
                .network_grid
                .as_ref()
                .context("no road network: set paths.network_* or [network_grid]")?;
            let data = generate_grid(grid);
            let network = RoadNetwork::build(data.nodes, data.edges)?;
            let (pois, _) =
                PoiIndex::build(&network, data.pois, config.reasoner.snap_radius_m, true)?;
            Ok(SpatialIndex::new(network, pois, config.reasoner.snap_radius_m))
        }
        _ => bail!("paths.network_nodes, network_edges, and network_pois go together"),
    }
}

/// Generates one candidate person-day per profile × configured date, in
/// profile order, truncated at `generate.max_person_days` when nonzero.
/// Parallelism never affects results: outcomes are collected in task order
/// and every random draw is keyed by (run_seed, person, date).
pub fn generate_dataset(
    config: &RunConfig,
    source: &Dataset,
    patterns: &PatternSet,
    spatial: &SpatialIndex,
    gateway: &Gateway,
) -> Result<Generated> {
    if config.generate.dates.is_empty() {
        bail!("generate.dates is empty; nothing to generate");
    }
    let mut reasoner_cfg: ReasonerConfig = config.reasoner.clone();
    reasoner_cfg.disable_rethink |= config.ablation.disable_rethink;

    let cap = usize::try_from(config.generate.max_person_days).unwrap_or(usize::MAX);
    let mut tasks: Vec<(&IndividualProfile, NaiveDate)> = Vec::new();
    'fill: for profile in source.profiles.values() {
        for &date in &config.generate.dates {
            if cap != 0 && tasks.len() == cap {
                break 'fill;
            }
            tasks.push((profile, date));
        }
    }

    // Resolve each profile's pattern up front so coverage gaps fail fast.
    let tasks: Vec<(&IndividualProfile, &_, NaiveDate)> = tasks
        .into_iter()
        .map(|(profile, date)| {
            patterns
                .resolve(profile)
                .map(|pattern| (profile, pattern, date))
                .with_context(|| format!("no pattern covers person {}", profile.person_id))
        })
        .collect::<Result<_>>()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .context("building worker pool")?;
    let outcomes: Vec<DiaryOutcome> = pool.install(|| {
        tasks
            .par_iter()
            .map(|(profile, pattern, date)| {
                generate_diary(profile, pattern, *date, gateway, spatial, &reasoner_cfg, config.run_seed)
                    .with_context(|| {
                        format!("generating diary for {} on {date}", profile.person_id)
                    })
            })
            .collect::<Result<_>>()
    })?;

    let mut generated = Generated {
        dataset: Dataset {
            profiles: tasks.iter().map(|(p, _, _)| ((*p).person_id.clone(), (*p).clone())).collect(),
            diaries: Vec::new(),
            zero_trip_days: Vec::new(),
        },
        details: Vec::new(),
        fallback_steps: 0,
        rethink_rounds: 0,
        warnings: Vec::new(),
    };
    for outcome in outcomes {
        match outcome {
            DiaryOutcome::Diary(detail) => {
                generated.dataset.diaries.push(detail.diary.clone());
                for anchor in &detail.anchors {
                    generated.fallback_steps += u64::from(anchor.fallback);
                    generated.rethink_rounds += u64::from(anchor.rethinks);
                }
                generated.warnings.extend(detail.warnings.iter().cloned());
                generated.details.push(detail);
            }
            DiaryOutcome::NoTrips(day) => generated.dataset.zero_trip_days.push(day),
        }
    }
    Ok(generated)
}

/// Generates diaries for the configured population and dates and writes
/// them as a dataset artifact.
pub fn cmd_generate(config: &RunConfig) -> Result<serde_json::Value> {
    let source = load_dataset(config)?;
    let patterns_path = config.paths.patterns_path();
    let file = File::open(&patterns_path)
        .with_context(|| format!("opening patterns {}", patterns_path.display()))?;
    let (patterns, _) = PatternSet::read_ndjson(std::io::BufReader::new(file))
        .with_context(|| format!("parsing patterns {}", patterns_path.display()))?;
    if patterns.patterns.is_empty() {
        bail!("pattern set {} is empty", patterns_path.display());
    }
    let spatial = build_spatial(config)?;
    let gateway = open_gateway(config)?;

    let generated = generate_dataset(config, &source, &patterns, &spatial, &gateway)?;

    let out = config.paths.diaries_path();
    create_parent(&out)?;
    write_dataset_file(&generated.dataset, &out, Some(&config.echo_meta()))
        .with_context(|| format!("writing diaries {}", out.display()))?;

    Ok(serde_json::json!({
        "command": "generate",
        "person_days": generated.dataset.diaries.len() + generated.dataset.zero_trip_days.len(),
        "diaries": generated.dataset.diaries.len(),
        "zero_trip_days": generated.dataset.zero_trip_days.len(),
        "fallback_steps": generated.fallback_steps,
        "rethink_rounds": generated.rethink_rounds,
        "warnings": generated.warnings.len(),
        "diaries_file": out.display().to_string(),
        "meta": config.echo_meta(),
    }))
}

// ---------------------------------------------------------------------------
// evaluate & report
// ---------------------------------------------------------------------------

/// The attribute subsets every evaluation slices by: age alone, then age
/// crossed with income, occupation, and both.
pub fn eval_subsets() -> Vec<Vec<AttributeDim>> {
    vec![
        vec![AttributeDim::AgeBand],
        vec![AttributeDim::AgeBand, AttributeDim::Income],
        vec![AttributeDim::AgeBand, AttributeDim::Occupation],
        vec![AttributeDim::AgeBand, AttributeDim::Income, AttributeDim::Occupation],
    ]
}

/// The evaluation-report artifact.
#[derive(Debug, Serialize, Deserialize)]
pub struct ReportArtifact {
    pub meta: serde_json::Value,
    pub report: EvalReport,
}

fn write_plot_csv(
    path: &Path,
    stamp: &str,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    create_parent(path)?;
    let mut file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(file, "# {stamp}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one plot CSV per metric: binned counts for the dense metrics,
/// key-based counts for ST-LOC. Each file carries a provenance comment.
fn write_plot_csvs(
    config: &RunConfig,
    report: &EvalReport,
    real: &Dataset,
    generated: &Dataset,
) -> Result<PathBuf> {
    let dir = config.paths.out_dir.join("plots");
    let stamp = format!(
        "config_sha256={} run_seed={}",
        config.config_hash(),
        config.run_seed
    );
    for metric in Metric::ALL {
        let hr = metric_histogram(real, metric, &report.binnings, report.day_filter);
        let hg = metric_histogram(generated, metric, &report.binnings, report.day_filter);
        let path = dir.join(format!("{}.csv", metric.name()));
        match (&hr.counts, &hg.counts) {
            (Counts::Dense(r), Counts::Dense(g)) => {
                let rows: Vec<Vec<String>> = (0..r.len())
                    .map(|i| {
                        let (lo, hi) = hr.binning.dense_edges(i).unwrap_or((f64::NAN, f64::NAN));
                        vec![lo.to_string(), hi.to_string(), r[i].to_string(), g[i].to_string()]
                    })
                    .collect();
                write_plot_csv(
                    &path,
                    &stamp,
                    &["bin_low", "bin_high", "count_real", "count_generated"],
                    &rows,
                )?;
            }
            (Counts::Categorical(r), Counts::Categorical(g)) => {
                let keys: std::collections::BTreeSet<&String> = r.keys().chain(g.keys()).collect();
                let rows: Vec<Vec<String>> = keys
                    .into_iter()
                    .map(|k| {
                        vec![
                            k.clone(),
                            r.get(k).copied().unwrap_or(0.0).to_string(),
                            g.get(k).copied().unwrap_or(0.0).to_string(),
                        ]
                    })
                    .collect();
                write_plot_csv(&path, &stamp, &["key", "count_real", "count_generated"], &rows)?;
            }
            _ => unreachable!("histogram kinds are fixed per metric"),
        }
    }
    Ok(dir)
}

/// Evaluates generated diaries against the source dataset across all
/// attribute subsets and writes the report plus per-metric plot CSVs.
pub fn cmd_evaluate(config: &RunConfig) -> Result<serde_json::Value> {
    let real = load_dataset(config)?;
    let diaries_path = config.paths.diaries_path();
    let (generated, _) = read_dataset_file(&diaries_path)
        .with_context(|| format!("loading generated diaries {}", diaries_path.display()))?;

    let report =
        multiscale_evaluate(&real, &generated, &eval_subsets(), &config.binning, DayFilter::All);

    let out = config.paths.report_path();
    create_parent(&out)?;
    let artifact = ReportArtifact { meta: config.echo_meta(), report };
    let mut w = BufWriter::new(
        File::create(&out).with_context(|| format!("creating {}", out.display()))?,
    );
    serde_json::to_writer_pretty(&mut w, &artifact)?;
    w.write_all(b"\n")?;
    w.flush()?;

    let plots = write_plot_csvs(config, &artifact.report, &real, &generated)?;
    Ok(serde_json::json!({
        "command": "evaluate",
        "jsd_sd": artifact.report.jsd.jsd_sd,
        "jsd_si": artifact.report.jsd.jsd_si,
        "jsd_stloc": artifact.report.jsd.jsd_stloc,
        "jsd_dailyloc": artifact.report.jsd.jsd_dailyloc,
        "report": out.display().to_string(),
        "plots": plots.display().to_string(),
        "meta": config.echo_meta(),
    }))
}

fn fmt_jsd(v: Option<f64>) -> String {
    v.map_or_else(|| "  n/a ".to_owned(), |v| format!("{v:.4}"))
}

/// Renders the last evaluation report as human-readable text.
pub fn cmd_report(config: &RunConfig) -> Result<String> {
    let path = config.paths.report_path();
    let file = File::open(&path).with_context(|| format!("opening report {}", path.display()))?;
    let artifact: ReportArtifact = serde_json::from_reader(std::io::BufReader::new(file))
        .with_context(|| format!("parsing report {}", path.display()))?;
    let report = &artifact.report;

    let mut text = String::new();
    let meta = &artifact.meta;
    text.push_str(&format!(
        "evaluation report  (backend {}, seed {}, config {})\n",
        meta["backend"].as_str().unwrap_or("?"),
        meta["run_seed"],
        meta["config_sha256"].as_str().map(|h| &h[..12]).unwrap_or("?"),
    ));
    text.push_str(&format!(
        "person-days: real {}, generated {}\n",
        report.real_person_days, report.generated_person_days
    ));
    text.push_str(&format!(
        "overall JSD:  SD {}  SI {}  ST-LOC {}  DailyLoc {}\n",
        fmt_jsd(report.jsd.jsd_sd),
        fmt_jsd(report.jsd.jsd_si),
        fmt_jsd(report.jsd.jsd_stloc),
        fmt_jsd(report.jsd.jsd_dailyloc),
    ));
    if !report.metric_errors.is_empty() {
        for (metric, why) in &report.metric_errors {
            text.push_str(&format!("  {metric}: {why}\n"));
        }
    }
    if !report.subsets.is_empty() {
        text.push_str("per-subset weighted mean JSD (slices covered/uncovered):\n");
        for subset in &report.subsets {
            text.push_str(&format!(
                "  {:<6} SD {}  SI {}  ST-LOC {}  DailyLoc {}   ({}/{})\n",
                subset.label,
                fmt_jsd(subset.weighted_mean.jsd_sd),
                fmt_jsd(subset.weighted_mean.jsd_si),
                fmt_jsd(subset.weighted_mean.jsd_stloc),
                fmt_jsd(subset.weighted_mean.jsd_dailyloc),
                subset.slices.len(),
                subset.uncovered_slices.len(),
            ));
        }
    }
    Ok(text)
}
