//! Subcommand implementations. Each returns `CliError` variants that map to
//! the documented exit codes.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::Deserialize;

use dialogue_forge_core::corpus::{
    load_raw_corpus, preprocess_unit, select_units, PreprocessOutcome, SourceLanguage, SourceUnit,
};
use dialogue_forge_core::eval::{aggregate, codebleu, curve_csv, debug_curve, evaluate_one, rate_percent, EvalRecord, MetricReport};
use dialogue_forge_core::gateway::{GatewayError, LlmGateway};
use dialogue_forge_core::pipeline::{run_corpus_cancellable, RunManifest};
use dialogue_forge_core::sandbox::Sandbox;
use dialogue_forge_core::store::{
    explode_qs, files, read_store, split_dialogues, to_code_pair, write_store, Dialogue,
    SplitOutput, SplitSpec,
};

use crate::config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Exit 2: invalid configuration or usage; lists every violation.
    Config(Vec<String>),
    /// Exit 3: a required toolchain is missing and compile-skip is off.
    Toolchain(String),
    /// Exit 4: the completion backend is unreachable.
    Backend(String),
    /// Exit 1: anything else.
    Other(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Toolchain(_) => 3,
            CliError::Backend(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn report(&self) {
        match self {
            CliError::Config(violations) => {
                eprintln!("config error ({} violation(s)):", violations.len());
                for v in violations {
                    eprintln!("  - {v}");
                }
            }
            CliError::Toolchain(msg) => eprintln!("toolchain error: {msg}"),
            CliError::Backend(msg) => eprintln!("backend error: {msg}"),
            CliError::Other(e) => eprintln!("error: {e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Other(e)
    }
}

fn gateway_error(e: GatewayError) -> CliError {
    match e {
        GatewayError::BackendUnavailable(m) | GatewayError::Transport(m) => CliError::Backend(m),
        GatewayError::InvalidConfig(m) => CliError::Config(vec![m]),
        GatewayError::FixtureIo(e) => CliError::Config(vec![format!("replay fixture: {e}")]),
        other => CliError::Other(anyhow::anyhow!(other)),
    }
}

fn build_gateway(config: &RunConfig) -> Result<LlmGateway, CliError> {
    // the solver backend answers completions; the questioner side is
    // template-driven and needs no model of its own
    let backend = config.solver_backend.as_ref().unwrap_or(&config.backend);
    LlmGateway::from_config(backend).map_err(gateway_error)
}

fn check_toolchains(sandbox: &Sandbox, config: &RunConfig) -> Result<(), CliError> {
    let probes = sandbox.probe_toolchains();
    let missing: Vec<String> = [config.direction.0, config.direction.1]
        .iter()
        .filter(|l| !probes.get(l).copied().unwrap_or(false))
        .map(|l| l.to_string())
        .collect();
    if !missing.is_empty() && !sandbox.compile_skip() {
        return Err(CliError::Toolchain(format!(
            "toolchain(s) unavailable: {} (pass --compile-skip to mark those stages untested)",
            missing.join(", ")
        )));
    }
    Ok(())
}

/// Preprocesses the raw corpus and returns the surviving units in the
/// requested index range, plus a per-reason drop histogram.
fn prepare_units(
    config: &RunConfig,
    gateway: &LlmGateway,
) -> Result<(Vec<SourceUnit>, BTreeMap<String, usize>), CliError> {
    let raw = load_raw_corpus(&config.corpus, config.direction.0)
        .map_err(|e| CliError::Config(vec![e.to_string()]))?;
    let mut units = Vec::new();
    let mut drops: BTreeMap<String, usize> = BTreeMap::new();
    for (index, language, code) in raw {
        if language != config.direction.0 {
            *drops.entry("wrong_language".into()).or_insert(0) += 1;
            continue;
        }
        let id = format!("unit_{index:06}");
        let gw = config.preprocess.require_self_contained.then_some(gateway);
        match preprocess_unit(&id, index, language, &code, &config.preprocess, gw) {
            PreprocessOutcome::Kept(unit) => units.push(unit),
            PreprocessOutcome::Dropped { reason, .. } => {
                *drops.entry(reason.to_string()).or_insert(0) += 1;
            }
        }
    }
    let units = match config.range {
        Some((start, end)) => {
            select_units(&units, start, end).map_err(|e| CliError::Config(vec![e.to_string()]))?
        }
        None => units,
    };
    Ok((units, drops))
}

pub fn cmd_generate(config: &RunConfig) -> Result<RunManifest, CliError> {
    let gateway = Arc::new(build_gateway(config)?);
    let sandbox = Arc::new(Sandbox::new(config.sandbox.clone()));
    check_toolchains(&sandbox, config)?;

    let (units, drops) = prepare_units(config, &gateway)?;
    if !drops.is_empty() {
        println!("preprocessing dropped units:");
        for (reason, count) in &drops {
            println!("  {reason}: {count}");
        }
    }
    println!("pipeline input: {} unit(s)", units.len());

    let cancel = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&cancel);
    // graceful drain: in-flight samples finish, queued ones stay for resume
    let _ = ctrlc::set_handler(move || {
        eprintln!("interrupt received: draining in-flight samples");
        flag.store(true, Ordering::SeqCst);
    });

    let mut manifest = run_corpus_cancellable(
        units,
        &config.pipeline,
        Arc::clone(&gateway),
        Arc::clone(&sandbox),
        &config.out,
        cancel,
    )
    .map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
    manifest.seed = Some(config.seed);
    let manifest_json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Other(e.into()))?;
    std::fs::write(config.out.join(files::MANIFEST), manifest_json)
        .map_err(|e| CliError::Other(e.into()))?;

    println!("accepted: {}", manifest.accepted);
    println!("rejected: {}", manifest.rejected);
    if !manifest.rejection_histogram.is_empty() {
        println!("rejections by stage:");
        for (stage, count) in &manifest.rejection_histogram {
            println!("  {}: {count}", stage.as_str());
        }
    }
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ExportFormat {
    CodePair,
    Dialogue,
    QsPair,
}

/// Builds a SplitSpec from `--ratios name=0.8,...` or `--ranges name=A:B,...`.
pub fn parse_split(
    format: ExportFormat,
    ratios: Option<&str>,
    ranges: Option<&str>,
    seed: u64,
) -> Result<SplitSpec, CliError> {
    let usage = |m: String| CliError::Config(vec![m]);
    match (ratios, ranges) {
        (Some(_), Some(_)) => Err(usage("--ratios and --ranges are mutually exclusive".into())),
        (None, None) => Err(usage("one of --ratios or --ranges is required".into())),
        (Some(r), None) => {
            let mut parsed = Vec::new();
            for part in r.split(',') {
                let (name, val) = part
                    .split_once('=')
                    .ok_or_else(|| usage(format!("bad ratio {part:?}, expected name=fraction")))?;
                let f: f64 = val
                    .trim()
                    .parse()
                    .map_err(|_| usage(format!("bad ratio value {val:?}")))?;
                parsed.push((name.trim().to_string(), f));
            }
            Ok(match format {
                ExportFormat::QsPair => SplitSpec::QsPairLevel { ratios: parsed, seed },
                _ => SplitSpec::DialogueLevel { ratios: parsed, seed },
            })
        }
        (None, Some(r)) => {
            let mut parsed = Vec::new();
            for part in r.split(',') {
                let (name, val) = part
                    .split_once('=')
                    .ok_or_else(|| usage(format!("bad range {part:?}, expected name=A:B")))?;
                let (start, end) = crate::config::parse_range(val.trim()).map_err(|e| usage(e))?;
                parsed.push((name.trim().to_string(), start, end));
            }
            Ok(SplitSpec::IndexRange { ranges: parsed })
        }
    }
}

pub fn cmd_export(
    store: &Path,
    format: ExportFormat,
    spec: &SplitSpec,
    out: &Path,
) -> Result<BTreeMap<String, usize>, CliError> {
    let store_file = if store.is_dir() { store.join(files::DIALOGUES) } else { store.to_path_buf() };
    if !store_file.exists() {
        return Err(CliError::Config(vec![format!("store {} does not exist", store_file.display())]));
    }
    let dialogues: Vec<Dialogue> =
        read_store(&store_file).map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
    spec.validate().map_err(|e| CliError::Config(vec![e.to_string()]))?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Other(e.into()))?;

    let split = split_dialogues(&dialogues, spec).map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
    let mut counts = BTreeMap::new();
    match (format, split) {
        (ExportFormat::QsPair, SplitOutput::QsPairs(map)) => {
            for (name, pairs) in map {
                let path = out.join(format!("qs_pairs.{name}.jsonl"));
                write_store(&pairs, &path).map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
                counts.insert(name, pairs.len());
            }
        }
        (ExportFormat::Dialogue, SplitOutput::Dialogues(map)) => {
            for (name, ds) in map {
                let path = out.join(format!("dialogues.{name}.jsonl"));
                write_store(&ds, &path).map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
                counts.insert(name, ds.len());
            }
        }
        (ExportFormat::QsPair, SplitOutput::Dialogues(map)) => {
            for (name, ds) in map {
                let pairs: Vec<_> = ds.iter().flat_map(explode_qs).collect();
                let path = out.join(format!("qs_pairs.{name}.jsonl"));
                write_store(&pairs, &path).map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
                counts.insert(name, pairs.len());
            }
        }
        (ExportFormat::CodePair, SplitOutput::Dialogues(map)) => {
            for (name, ds) in map {
                let mut pairs = Vec::new();
                for d in &ds {
                    if let Some(p) = to_code_pair(d).map_err(|e| CliError::Other(anyhow::anyhow!(e)))? {
                        pairs.push(p);
                    }
                }
                let path = out.join(format!("code_pairs.{name}.jsonl"));
                write_store(&pairs, &path).map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
                counts.insert(name, pairs.len());
            }
        }
        // qs_pair format always produces a QsPairs split and vice versa
        _ => unreachable!("split level is derived from the export format"),
    }
    for (name, count) in &counts {
        println!("{name}: {count} record(s)");
    }
    Ok(counts)
}

#[derive(Debug, Deserialize)]
struct CandidateRecord {
    id: String,
    code: String,
    #[serde(default)]
    harness: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ReferenceRecord {
    id: String,
    code: String,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .map_err(|e| CliError::Config(vec![format!("{}:{}: {e}", path.display(), i + 1)]))?,
        );
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_evaluate(
    candidates_path: &Path,
    references_path: Option<&Path>,
    language: SourceLanguage,
    debug_rounds: u32,
    gateway: Option<&LlmGateway>,
    sandbox: &Sandbox,
    out: Option<&Path>,
) -> Result<MetricReport, CliError> {
    let candidates: Vec<CandidateRecord> = read_jsonl(candidates_path)?;
    if candidates.is_empty() {
        return Err(CliError::Config(vec!["no candidates to evaluate".into()]));
    }
    let references: BTreeMap<String, String> = match references_path {
        Some(p) => {
            let refs: Vec<ReferenceRecord> = read_jsonl(p)?;
            if refs.len() != candidates.len() {
                return Err(CliError::Config(vec![format!(
                    "candidate/reference count mismatch: {} vs {}",
                    candidates.len(),
                    refs.len()
                )]));
            }
            refs.into_iter().map(|r| (r.id, r.code)).collect()
        }
        None => BTreeMap::new(),
    };
    if debug_rounds > 0 && gateway.is_none() {
        return Err(CliError::Config(vec![
            "--debug-rounds requires a backend (--replay FIXTURE or [backend] config)".into(),
        ]));
    }

    let mut records = Vec::new();
    for c in &candidates {
        let mut record = evaluate_one(
            &c.id,
            &c.code,
            language,
            c.harness.as_deref(),
            sandbox,
            debug_rounds,
            gateway,
        )
        .map_err(|e| match e {
            dialogue_forge_core::eval::EvalError::Gateway(g) => gateway_error(g),
            other => CliError::Other(anyhow::anyhow!(other)),
        })?;
        if let Some(reference) = references.get(&c.id) {
            match codebleu(&c.code, reference, language) {
                Ok(score) => record.codebleu = Some(score),
                Err(e) => log::warn!("sample {}: codebleu undefined: {e}", c.id),
            }
        }
        sandbox.cleanup_sample(&c.id);
        records.push(record);
    }

    let report = aggregate(&records).map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
    print!("{}", report.render_table());
    let scored: Vec<f64> = records
        .iter()
        .filter_map(|r| r.codebleu.as_ref().map(|s| s.combined))
        .collect();
    if !scored.is_empty() {
        println!(
            "codebleu (mean over {}): {:.4}",
            scored.len(),
            scored.iter().sum::<f64>() / scored.len() as f64
        );
    }

    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Other(e.into()))?;
        let report_json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Other(e.into()))?;
        std::fs::write(dir.join("report.json"), report_json).map_err(|e| CliError::Other(e.into()))?;
        write_store(&records, &dir.join("records.jsonl"))
            .map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
        let curve = per_round_reports(&report);
        let rows = debug_curve(&curve).map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
        std::fs::write(dir.join("curve.csv"), curve_csv(&rows)).map_err(|e| CliError::Other(e.into()))?;
    }
    Ok(report)
}

/// Expands a report's cumulative per-round counts into one report per round,
/// as `debug_curve` expects.
fn per_round_reports(report: &MetricReport) -> Vec<MetricReport> {
    report
        .per_round_curves
        .values()
        .map(|counts| MetricReport {
            total: report.total,
            untested: report.untested,
            compile_count: counts.compiled,
            compile_rate: rate_percent(counts.compiled, report.total),
            execute_count: counts.executed,
            execute_rate: rate_percent(counts.executed, report.total),
            unit_count: counts.unit_passed,
            unit_rate: rate_percent(counts.unit_passed, report.total),
            per_round_curves: BTreeMap::new(),
        })
        .collect()
}

pub fn cmd_probe(sandbox: &Sandbox, gateway: Option<&LlmGateway>) -> Result<(), CliError> {
    let probes = sandbox.probe_toolchains();
    println!("toolchains:");
    for (lang, ok) in &probes {
        println!("  {lang}: {}", if *ok { "available" } else { "missing" });
    }
    if let Some(gw) = gateway {
        match gw.complete_stateless("ping") {
            Ok(_) => println!("backend: reachable"),
            Err(GatewayError::ReplayMiss { .. }) => println!("backend: replay fixture loaded"),
            Err(e) => return Err(gateway_error(e)),
        }
    }
    Ok(())
}

pub fn cmd_report(records_path: &Path, csv_out: Option<&Path>) -> Result<MetricReport, CliError> {
    let records: Vec<EvalRecord> = read_jsonl(records_path)?;
    let report = aggregate(&records).map_err(|e| CliError::Config(vec![e.to_string()]))?;
    print!("{}", report.render_table());
    let rows = debug_curve(&per_round_reports(&report)).map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;
    if let Some(path) = csv_out {
        std::fs::write(path, curve_csv(&rows)).map_err(|e| CliError::Other(e.into()))?;
    } else if rows.len() > 1 {
        print!("{}", curve_csv(&rows));
    }
    Ok(report)
}

/// Builds the gateway for commands where a backend is optional.
pub fn optional_gateway(config: Option<&RunConfig>, replay: Option<&Path>) -> Result<Option<LlmGateway>, CliError> {
    if let Some(path) = replay {
        return LlmGateway::replay_from_fixture(path).map(Some).map_err(gateway_error);
    }
    match config {
        Some(c) => build_gateway(c).map(Some),
        None => Ok(None),
    }
}
