//! Pipeline state machine: drives one SourceUnit through source-side test
//! generation and refinement, initial translation, target-side refinement,
//! and duo-test verification, recording every questioner/solver turn.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{direction_supported, SourceLanguage, SourceUnit};
use crate::gateway::{extract_code_block, DialogueMemory, GatewayError, LlmGateway};
use crate::sandbox::{duo_compare, parse_summary, DuoMode, RunOutcome, Sandbox};
use crate::store::{Dialogue, DialogueTurn, StoreWriter};

/// Feedback shown to the solver is capped to this many trailing characters;
/// compilers can emit megabytes.
pub const FEEDBACK_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Preprocess,
    SplTestGen,
    SplRefine,
    InitTranslate,
    TgtRefine,
    DuoVerify,
    Accepted,
    Rejected,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Preprocess => "Preprocess",
            Stage::SplTestGen => "SplTestGen",
            Stage::SplRefine => "SplRefine",
            Stage::InitTranslate => "InitTranslate",
            Stage::TgtRefine => "TgtRefine",
            Stage::DuoVerify => "DuoVerify",
            Stage::Accepted => "Accepted",
            Stage::Rejected => "Rejected",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub direction: (SourceLanguage, SourceLanguage),
    #[serde(default = "default_refine_rounds")]
    pub max_refine_rounds: u32,
    pub duo_mode: DuoMode,
    #[serde(default = "default_worker_count")]
    pub worker_count: usize,
    #[serde(default = "default_token_budget")]
    pub memory_token_budget: usize,
}

fn default_refine_rounds() -> u32 {
    7
}
fn default_worker_count() -> usize {
    1
}
fn default_token_budget() -> usize {
    24_000
}

impl PipelineConfig {
    /// Defaults per direction: fortran→cpp compares full stdout with
    /// assert-based tests; cpp→cuda compares checksum summary lines.
    pub fn for_direction(source: SourceLanguage, target: SourceLanguage) -> Result<Self, PipelineError> {
        if !direction_supported(source, target) {
            return Err(PipelineError::UnsupportedDirection(source, target));
        }
        let duo_mode = match (source, target) {
            (SourceLanguage::Cpp, SourceLanguage::Cuda) => DuoMode::SummaryLine,
            _ => DuoMode::FullStdout,
        };
        Ok(PipelineConfig {
            direction: (source, target),
            max_refine_rounds: default_refine_rounds(),
            duo_mode,
            worker_count: default_worker_count(),
            memory_token_budget: default_token_budget(),
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("unsupported translation direction {0}→{1}")]
    UnsupportedDirection(SourceLanguage, SourceLanguage),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error("worker thread panicked")]
    WorkerPanic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleStatus {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleResult {
    pub status: SampleStatus,
    pub dialogue: Dialogue,
    pub verified_pair: Option<(String, String)>,
    pub failure_stage: Option<Stage>,
    pub rounds_used: BTreeMap<Stage, u32>,
    /// Diagnostic notes (e.g. CUDA stages untested in compile-skip mode).
    pub annotations: Vec<String>,
}

impl SampleResult {
    /// Turn-count accounting: one initial exchange for each of SplTestGen and
    /// InitTranslate (when reached), plus every refinement/repair round.
    pub fn expected_turn_count(&self) -> usize {
        let reached = |s: Stage| self.rounds_used.contains_key(&s);
        let rounds = |s: Stage| self.rounds_used.get(&s).copied().unwrap_or(0) as usize;
        let mut total = 0usize;
        if reached(Stage::SplTestGen) {
            total += 1 + rounds(Stage::SplTestGen);
        }
        total += rounds(Stage::SplRefine);
        if reached(Stage::InitTranslate) {
            total += 1 + rounds(Stage::InitTranslate);
        }
        total += rounds(Stage::TgtRefine);
        total += rounds(Stage::DuoVerify);
        total
    }
}

pub struct RefineOutcome {
    pub final_code: String,
    pub rounds_used: u32,
    pub passed: bool,
    pub last_feedback: String,
}

fn truncate_feedback(s: &str) -> &str {
    if s.len() <= FEEDBACK_CAP {
        return s;
    }
    let start = s.len() - FEEDBACK_CAP;
    // stay on a char boundary
    let mut idx = start;
    while !s.is_char_boundary(idx) {
        idx += 1;
    }
    &s[idx..]
}

/// The stage-2.2/3.2 feedback loop: round 0 checks the initial code; each
/// subsequent round sends a repair prompt embedding the feedback, extracts
/// new code, and re-checks. Stops on first pass or at the round cap. Every
/// round appends exactly one (question, solution) exchange. Unparseable
/// replies cost a round.
pub fn refine_until_pass(
    initial_code: &str,
    language: SourceLanguage,
    mut check: impl FnMut(&str, u32) -> (bool, String),
    memory: &mut DialogueMemory,
    gateway: &LlmGateway,
    cap: u32,
    stage: Stage,
) -> Result<RefineOutcome, GatewayError> {
    assert!(cap >= 1);
    let mut code = initial_code.to_string();
    let (pass, mut feedback) = check(&code, 0);
    if pass {
        return Ok(RefineOutcome { final_code: code, rounds_used: 0, passed: true, last_feedback: feedback });
    }
    let tag = language.fence_tag();
    for round in 1..=cap {
        let prompt = gateway.render(
            "refine_repair",
            &[("language", tag), ("code", &code), ("feedback", truncate_feedback(&feedback))],
        )?;
        let reply = gateway.complete(memory, &prompt, stage.as_str())?;
        match extract_code_block(&reply, tag) {
            Ok(new_code) if !new_code.trim().is_empty() => {
                code = new_code;
                let (pass, fb) = check(&code, round);
                if pass {
                    return Ok(RefineOutcome { final_code: code, rounds_used: round, passed: true, last_feedback: fb });
                }
                feedback = fb;
            }
            _ => {
                feedback = format!(
                    "Your reply did not contain a ```{tag} fenced block with a non-empty program. {}",
                    gateway.render("repair_format", &[])?
                );
            }
        }
    }
    Ok(RefineOutcome { final_code: code, rounds_used: cap, passed: false, last_feedback: feedback })
}

/// Requests a code block, reprompting once when the reply lacks the fence.
/// Returns the code and how many extra exchanges the reprompt consumed.
fn request_code_block(
    gateway: &LlmGateway,
    memory: &mut DialogueMemory,
    prompt: &str,
    tag: &str,
    stage: Stage,
) -> Result<Result<(String, u32), ()>, GatewayError> {
    let reply = gateway.complete(memory, prompt, stage.as_str())?;
    if let Ok(code) = extract_code_block(&reply, tag) {
        if !code.trim().is_empty() {
            return Ok(Ok((code, 0)));
        }
    }
    let reprompt = format!(
        "Your reply did not contain a ```{tag} fenced block. Return the entire program in a ```{tag} fenced block. Nothing else."
    );
    let reply = gateway.complete(memory, &reprompt, stage.as_str())?;
    match extract_code_block(&reply, tag) {
        Ok(code) if !code.trim().is_empty() => Ok(Ok((code, 1))),
        _ => Ok(Err(())),
    }
}

/// Stage 2.1: asks the solver for a single-file self-testing program in the
/// source language.
pub fn generate_spl_tests(
    unit: &SourceUnit,
    memory: &mut DialogueMemory,
    gateway: &LlmGateway,
) -> Result<Result<(String, u32), ()>, GatewayError> {
    let template = match unit.language {
        SourceLanguage::Cpp | SourceLanguage::Cuda => "spl_test_request_cpp",
        SourceLanguage::Fortran => "spl_test_request_fortran",
    };
    let prompt = gateway.render(template, &[("Code", &unit.code)])?;
    request_code_block(gateway, memory, &prompt, unit.language.fence_tag(), Stage::SplTestGen)
}

/// Stage 3.1: requests the initial target-language translation of the
/// validated source program.
pub fn initial_translate(
    source_program: &str,
    source: SourceLanguage,
    target: SourceLanguage,
    memory: &mut DialogueMemory,
    gateway: &LlmGateway,
) -> Result<Result<(String, u32), ()>, GatewayError> {
    let template = match (source, target) {
        (SourceLanguage::Cpp, SourceLanguage::Cuda) => "translate_cpp_to_cuda",
        _ => "translate_fortran_to_cpp",
    };
    let prompt = gateway.render(template, &[("Code", source_program)])?;
    request_code_block(gateway, memory, &prompt, target.fence_tag(), Stage::InitTranslate)
}

/// Compile-and-test check used by the refinement stages. Pass requires a
/// clean compile, a completed zero-exit run, and (summary-line mode) a
/// parseable `RESULT_OK checksum=` line.
fn sandbox_check<'a>(
    sandbox: &'a Sandbox,
    language: SourceLanguage,
    sample_id: &str,
    stage: Stage,
    duo_mode: DuoMode,
) -> impl FnMut(&str, u32) -> (bool, String) + 'a {
    let sample_id = sample_id.to_string();
    move |code: &str, attempt: u32| {
        match sandbox.compile_and_run(code, language, &sample_id, stage.as_str(), attempt) {
            Ok((compiled, run)) => {
                if !compiled.success {
                    return (false, format!("Compilation failed:\n{}", compiled.stderr));
                }
                let run = run.expect("run present after successful compile");
                if run.timed_out {
                    return (false, format!("Run timed out.\nstdout:\n{}\nstderr:\n{}", run.stdout, run.stderr));
                }
                if !run.passed() {
                    return (
                        false,
                        format!(
                            "Run failed with exit code {}.\nstdout:\n{}\nstderr:\n{}",
                            run.exit_code, run.stdout, run.stderr
                        ),
                    );
                }
                if duo_mode == DuoMode::SummaryLine && parse_summary(&run.stdout).summary.is_none() {
                    return (
                        false,
                        format!(
                            "The program must print exactly one final summary line `RESULT_OK checksum=<integer>`.\nstdout:\n{}",
                            run.stdout
                        ),
                    );
                }
                (true, run.stdout)
            }
            // sandbox errors mark the round failed with the error text as feedback
            Err(e) => (false, format!("sandbox error: {e}")),
        }
    }
}

/// Stage 3.3: compiles and runs both programs and compares outputs; on
/// mismatch issues one alignment-repair exchange and retries once.
pub fn duo_verify(
    source_program: &str,
    target_program: &str,
    config: &PipelineConfig,
    sandbox: &Sandbox,
    memory: &mut DialogueMemory,
    gateway: &LlmGateway,
    sample_id: &str,
) -> Result<(bool, String, u32), PipelineError> {
    let (source_lang, target_lang) = config.direction;
    let mut rounds = 0u32;
    let mut target_code = target_program.to_string();

    let run_one = |code: &str, lang: SourceLanguage, tag: &str, attempt: u32| -> Option<RunOutcome> {
        match sandbox.compile_and_run(code, lang, sample_id, tag, attempt) {
            Ok((compiled, run)) if compiled.success => run,
            _ => None,
        }
    };

    for attempt in 0..=1u32 {
        let src_run = run_one(source_program, source_lang, "DuoVerify_src", attempt);
        let tgt_run = run_one(&target_code, target_lang, "DuoVerify_tgt", attempt);
        let completed =
            |r: &Option<RunOutcome>| r.as_ref().map(|r| r.completed()).unwrap_or(false);
        if completed(&src_run) && completed(&tgt_run) {
            let (src_run, tgt_run) = (src_run.as_ref().unwrap(), tgt_run.as_ref().unwrap());
            if duo_compare(src_run, tgt_run, config.duo_mode) {
                return Ok((true, target_code, rounds));
            }
            if attempt == 1 {
                break;
            }
            let src_out = src_run.stdout.clone();
            let tgt_out = tgt_run.stdout.clone();
            let (got_code, code, extra) = duo_repair_exchange(
                source_program, &target_code, &src_out, &tgt_out, config, memory, gateway, target_lang,
            )?;
            rounds += extra;
            if !got_code {
                break;
            }
            target_code = code;
        } else {
            if attempt == 1 {
                break;
            }
            let missing = "<no output: compile or run failure>";
            let src_out = src_run.map(|r| r.stdout).unwrap_or_else(|| missing.to_string());
            let tgt_out = tgt_run.map(|r| r.stdout).unwrap_or_else(|| missing.to_string());
            let (got_code, code, extra) = duo_repair_exchange(
                source_program, &target_code, &src_out, &tgt_out, config, memory, gateway, target_lang,
            )?;
            rounds += extra;
            if !got_code {
                break;
            }
            target_code = code;
        }
    }
    Ok((false, target_code, rounds))
}

#[allow(clippy::too_many_arguments)]
fn duo_repair_exchange(
    source_program: &str,
    target_program: &str,
    source_stdout: &str,
    target_stdout: &str,
    config: &PipelineConfig,
    memory: &mut DialogueMemory,
    gateway: &LlmGateway,
    target_lang: SourceLanguage,
) -> Result<(bool, String, u32), PipelineError> {
    let tag = target_lang.fence_tag();
    let prompt = match config.duo_mode {
        DuoMode::SummaryLine => {
            let target_line = parse_summary(source_stdout)
                .summary
                .map(|s| format!("RESULT_OK checksum={}", s.checksum))
                .unwrap_or_else(|| "RESULT_OK checksum=<integer>".to_string());
            gateway.render(
                "duo_align_scaffold",
                &[
                    ("target_line", target_line.as_str()),
                    ("cpp_code", source_program),
                    ("cuda_code", target_program),
                ],
            )?
        }
        DuoMode::FullStdout => gateway.render(
            "duo_align_stdout",
            &[
                ("language", tag),
                ("source_output", truncate_feedback(source_stdout)),
                ("target_output", truncate_feedback(target_stdout)),
                ("code", target_program),
            ],
        )?,
    };
    let reply = gateway.complete(memory, &prompt, Stage::DuoVerify.as_str())?;
    match extract_code_block(&reply, tag) {
        Ok(code) if !code.trim().is_empty() => Ok((true, code, 1)),
        _ => Ok((false, target_program.to_string(), 1)),
    }
}

/// Runs one SourceUnit through the full state machine. All failures become
/// `status=rejected` with the failing stage recorded; the dialogue is kept
/// either way.
pub fn run_sample(
    unit: &SourceUnit,
    config: &PipelineConfig,
    gateway: &LlmGateway,
    sandbox: &Sandbox,
) -> SampleResult {
    let mut memory = DialogueMemory::new(config.memory_token_budget);
    let mut rounds_used: BTreeMap<Stage, u32> = BTreeMap::new();
    let mut annotations = Vec::new();
    let (source_lang, target_lang) = config.direction;

    let finish = |status: SampleStatus,
                  memory: &DialogueMemory,
                  rounds_used: BTreeMap<Stage, u32>,
                  failure_stage: Option<Stage>,
                  pair: Option<(String, String)>,
                  annotations: Vec<String>| {
        let turns: Vec<DialogueTurn> = memory
            .turns()
            .chunks(2)
            .filter(|c| c.len() == 2)
            .map(|c| DialogueTurn { question: c[0].content.clone(), solution: c[1].content.clone() })
            .collect();
        let accepted = status == SampleStatus::Accepted;
        SampleResult {
            status,
            dialogue: Dialogue {
                id: unit.id.clone(),
                origin_index: unit.origin_index,
                direction: config.direction,
                turns,
                accepted,
                rounds_used: rounds_used.clone(),
                failure_stage,
                final_source: pair.as_ref().map(|(s, _)| s.clone()),
                final_target: pair.as_ref().map(|(_, t)| t.clone()),
            },
            verified_pair: pair,
            failure_stage,
            rounds_used,
            annotations,
        }
    };

    let reject = |stage: Stage,
                  memory: &DialogueMemory,
                  rounds_used: BTreeMap<Stage, u32>,
                  annotations: Vec<String>| {
        finish(SampleStatus::Rejected, memory, rounds_used, Some(stage), None, annotations)
    };

    // Preprocess: validate the contract preprocessing established.
    if unit.code.trim().is_empty() || unit.token_count != crate::corpus::count_tokens(&unit.code) {
        return reject(Stage::Preprocess, &memory, rounds_used, annotations);
    }

    // Stage 2.1: source-side test generation.
    let spl_program = match generate_spl_tests(unit, &mut memory, gateway) {
        Ok(Ok((code, reprompts))) => {
            rounds_used.insert(Stage::SplTestGen, reprompts);
            code
        }
        Ok(Err(())) => {
            rounds_used.insert(Stage::SplTestGen, 1);
            return reject(Stage::SplTestGen, &memory, rounds_used, annotations);
        }
        Err(e) => {
            log::warn!("sample {}: backend failure in SplTestGen: {e}", unit.id);
            rounds_used.insert(Stage::SplTestGen, 0);
            return reject(Stage::SplTestGen, &memory, rounds_used, annotations);
        }
    };

    // Stage 2.2: source-side refinement until the embedded tests pass.
    let mut check = sandbox_check(sandbox, source_lang, &unit.id, Stage::SplRefine, config.duo_mode);
    let spl = match refine_until_pass(
        &spl_program,
        source_lang,
        &mut check,
        &mut memory,
        gateway,
        config.max_refine_rounds,
        Stage::SplRefine,
    ) {
        Ok(outcome) => outcome,
        Err(e) => {
            log::warn!("sample {}: backend failure in SplRefine: {e}", unit.id);
            return reject(Stage::SplRefine, &memory, rounds_used, annotations);
        }
    };
    drop(check);
    rounds_used.insert(Stage::SplRefine, spl.rounds_used);
    if !spl.passed {
        return reject(Stage::SplRefine, &memory, rounds_used, annotations);
    }
    let source_program = spl.final_code;

    // Stage 3.1: initial translation.
    let target_program = match initial_translate(&source_program, source_lang, target_lang, &mut memory, gateway) {
        Ok(Ok((code, reprompts))) => {
            rounds_used.insert(Stage::InitTranslate, reprompts);
            code
        }
        Ok(Err(())) => {
            rounds_used.insert(Stage::InitTranslate, 1);
            return reject(Stage::InitTranslate, &memory, rounds_used, annotations);
        }
        Err(e) => {
            log::warn!("sample {}: backend failure in InitTranslate: {e}", unit.id);
            rounds_used.insert(Stage::InitTranslate, 0);
            return reject(Stage::InitTranslate, &memory, rounds_used, annotations);
        }
    };

    // Stage 3.2: target-side refinement. On hosts without the target
    // toolchain (compile-skip mode) these stages are marked untested.
    let target_skipped = sandbox.compile_skip() && !sandbox.is_available(target_lang);
    let target_program = if target_skipped {
        annotations.push(format!("{target_lang} stages untested: toolchain unavailable (compile-skip mode)"));
        rounds_used.insert(Stage::TgtRefine, 0);
        target_program
    } else {
        let mut check = sandbox_check(sandbox, target_lang, &unit.id, Stage::TgtRefine, config.duo_mode);
        let tgt = match refine_until_pass(
            &target_program,
            target_lang,
            &mut check,
            &mut memory,
            gateway,
            config.max_refine_rounds,
            Stage::TgtRefine,
        ) {
            Ok(outcome) => outcome,
            Err(e) => {
                log::warn!("sample {}: backend failure in TgtRefine: {e}", unit.id);
                return reject(Stage::TgtRefine, &memory, rounds_used, annotations);
            }
        };
        rounds_used.insert(Stage::TgtRefine, tgt.rounds_used);
        if !tgt.passed {
            return reject(Stage::TgtRefine, &memory, rounds_used, annotations);
        }
        tgt.final_code
    };

    // Stage 3.3: duo-test verification.
    let (matched, final_target) = if target_skipped {
        annotations.push("duo verification skipped: target untested".to_string());
        rounds_used.insert(Stage::DuoVerify, 0);
        (true, target_program)
    } else {
        match duo_verify(&source_program, &target_program, config, sandbox, &mut memory, gateway, &unit.id) {
            Ok((matched, code, rounds)) => {
                rounds_used.insert(Stage::DuoVerify, rounds);
                (matched, code)
            }
            Err(e) => {
                log::warn!("sample {}: duo verification error: {e}", unit.id);
                rounds_used.insert(Stage::DuoVerify, 0);
                return reject(Stage::DuoVerify, &memory, rounds_used, annotations);
            }
        }
    };
    if !matched {
        return reject(Stage::DuoVerify, &memory, rounds_used, annotations);
    }

    finish(
        SampleStatus::Accepted,
        &memory,
        rounds_used,
        None,
        Some((source_program, final_target)),
        annotations,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub toolchain_availability: BTreeMap<SourceLanguage, bool>,
    pub total: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub skipped_resume: usize,
    /// Rejections per failing stage.
    pub rejection_histogram: BTreeMap<Stage, usize>,
    pub seed: Option<u64>,
}

/// Runs a corpus slice through the pipeline with a worker pool. Results are
/// appended to `dialogues.all.jsonl` in the run directory through a
/// single-writer channel; units already present there are skipped (resume).
pub fn run_corpus(
    units: Vec<SourceUnit>,
    config: &PipelineConfig,
    gateway: Arc<LlmGateway>,
    sandbox: Arc<Sandbox>,
    run_dir: &std::path::Path,
) -> Result<RunManifest, PipelineError> {
    run_corpus_cancellable(units, config, gateway, sandbox, run_dir, Arc::new(AtomicBool::new(false)))
}

/// `run_corpus` with a cancellation flag: once set, workers finish their
/// in-flight sample and stop; unstarted units remain for a resumed run.
pub fn run_corpus_cancellable(
    units: Vec<SourceUnit>,
    config: &PipelineConfig,
    gateway: Arc<LlmGateway>,
    sandbox: Arc<Sandbox>,
    run_dir: &std::path::Path,
    cancel: Arc<AtomicBool>,
) -> Result<RunManifest, PipelineError> {
    std::fs::create_dir_all(run_dir).map_err(crate::store::StoreError::Io)?;
    let all_path = run_dir.join("dialogues.all.jsonl");
    let existing: std::collections::HashSet<String> = if all_path.exists() {
        crate::store::read_store::<Dialogue>(&all_path)?
            .into_iter()
            .map(|d| d.id)
            .collect()
    } else {
        Default::default()
    };
    let availability = sandbox.probe_toolchains();

    let (pending, skipped): (Vec<SourceUnit>, Vec<SourceUnit>) =
        units.into_iter().partition(|u| !existing.contains(&u.id));
    let skipped_resume = skipped.len();

    let (tx, rx) = mpsc::channel::<SampleResult>();
    let job_queue = Arc::new(Mutexed::new(pending));
    let workers = config.worker_count.max(1);
    let mut handles = Vec::new();
    for _ in 0..workers {
        let tx = tx.clone();
        let queue = Arc::clone(&job_queue);
        let gateway = Arc::clone(&gateway);
        let sandbox = Arc::clone(&sandbox);
        let config = config.clone();
        let cancel = Arc::clone(&cancel);
        handles.push(std::thread::spawn(move || {
            while !cancel.load(Ordering::SeqCst) {
                let Some(unit) = queue.pop() else { break };
                let result = run_sample(&unit, &config, &gateway, &sandbox);
                sandbox.cleanup_sample(&unit.id);
                if tx.send(result).is_err() {
                    break;
                }
            }
        }));
    }
    drop(tx);

    let mut writer = StoreWriter::open(&all_path)?;
    let mut manifest = RunManifest {
        config: config.clone(),
        toolchain_availability: availability,
        total: 0,
        accepted: 0,
        rejected: 0,
        skipped_resume,
        rejection_histogram: BTreeMap::new(),
        seed: None,
    };
    for result in rx {
        writer.append(&result.dialogue)?;
        manifest.total += 1;
        match result.status {
            SampleStatus::Accepted => manifest.accepted += 1,
            SampleStatus::Rejected => {
                manifest.rejected += 1;
                if let Some(stage) = result.failure_stage {
                    *manifest.rejection_histogram.entry(stage).or_insert(0) += 1;
                }
            }
        }
    }
    for h in handles {
        h.join().map_err(|_| PipelineError::WorkerPanic)?;
    }

    // derive the three supervision formats from the full store
    let dialogues: Vec<Dialogue> = crate::store::read_store(&all_path)?;
    crate::store::export_all(&dialogues, run_dir)?;
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| crate::store::StoreError::ParseError { line: 0, message: e.to_string() })?;
    std::fs::write(run_dir.join(crate::store::files::MANIFEST), manifest_json)
        .map_err(crate::store::StoreError::Io)?;
    Ok(manifest)
}

struct Mutexed<T> {
    inner: std::sync::Mutex<Vec<T>>,
}

impl<T> Mutexed<T> {
    fn new(items: Vec<T>) -> Self {
        Mutexed { inner: std::sync::Mutex::new(items) }
    }

    fn pop(&self) -> Option<T> {
        let mut guard = self.inner.lock().unwrap();
        if guard.is_empty() {
            None
        } else {
            Some(guard.remove(0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feedback_truncation_keeps_tail() {
        let long = "x".repeat(FEEDBACK_CAP + 100);
        assert_eq!(truncate_feedback(&long).len(), FEEDBACK_CAP);
        assert_eq!(truncate_feedback("short"), "short");
    }

    #[test]
    fn stage_order_is_total() {
        assert!(Stage::Preprocess < Stage::SplTestGen);
        assert!(Stage::SplTestGen < Stage::SplRefine);
        assert!(Stage::SplRefine < Stage::InitTranslate);
        assert!(Stage::InitTranslate < Stage::TgtRefine);
        assert!(Stage::TgtRefine < Stage::DuoVerify);
        assert!(Stage::DuoVerify < Stage::Accepted);
        assert!(Stage::Accepted < Stage::Rejected);
    }

    #[test]
    fn unsupported_direction_rejected() {
        assert!(PipelineConfig::for_direction(SourceLanguage::Fortran, SourceLanguage::Cuda).is_err());
        assert!(PipelineConfig::for_direction(SourceLanguage::Cuda, SourceLanguage::Cpp).is_err());
        assert!(PipelineConfig::for_direction(SourceLanguage::Cpp, SourceLanguage::Cuda).is_ok());
    }
}
