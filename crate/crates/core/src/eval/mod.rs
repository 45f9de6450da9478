//! Evaluation harness: compilation / execution / unit-test success metrics,
//! CodeBLEU scoring, and the debug-round regeneration protocol.

mod codebleu;

pub use codebleu::{codebleu, codebleu_weighted, defuse_pairs, keyword_set, normalize_token, syntax_signatures, CodeBleuScore};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SourceLanguage;
use crate::gateway::{extract_code_block, LlmGateway};
use crate::sandbox::Sandbox;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot aggregate an empty evaluation")]
    EmptyEvaluation,
    #[error("score undefined: empty tokenization")]
    ScoreUndefined,
    #[error("weights must be non-negative and sum to 1, got {0:?}")]
    BadWeights(Vec<f64>),
    #[error("cumulative counts not monotone at round {round}: {previous} then {current}")]
    NonMonotoneCurve { round: usize, previous: usize, current: usize },
    #[error(transparent)]
    Gateway(#[from] crate::gateway::GatewayError),
}

/// Per-translation outcome. The implication chain
/// unit_passed ⇒ executed ⇒ compiled holds by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub compiled: bool,
    pub executed: bool,
    pub unit_passed: bool,
    /// First debug round at which compilation succeeded (0 = no repair needed).
    pub rounds_to_compile: Option<u32>,
    pub codebleu: Option<CodeBleuScore>,
    /// Sandbox was unavailable; excluded from denominators.
    #[serde(default)]
    pub untested: bool,
}

impl EvalRecord {
    pub fn chain_valid(&self) -> bool {
        (!self.unit_passed || self.executed) && (!self.executed || self.compiled)
    }
}

/// Percentage rounded half-up to two decimals, computed in integer
/// arithmetic so table cells reproduce exactly.
pub fn rate_percent(count: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let numerator = count as u128 * 10_000;
    let rounded = (2 * numerator + total as u128) / (2 * total as u128);
    rounded as f64 / 100.0
}

/// One-decimal variant (half-up), printed zero-padded to two places to match
/// published table formatting.
pub fn rate_percent_1dp(count: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let numerator = count as u128 * 1_000;
    let rounded = (2 * numerator + total as u128) / (2 * total as u128);
    rounded as f64 / 10.0
}

pub fn format_cell(count: usize, total: usize) -> String {
    format!("{count} ({:.2}%)", rate_percent(count, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RoundCounts {
    pub compiled: usize,
    pub executed: usize,
    pub unit_passed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub total: usize,
    pub untested: usize,
    pub compile_count: usize,
    pub compile_rate: f64,
    pub execute_count: usize,
    pub execute_rate: f64,
    pub unit_count: usize,
    pub unit_rate: f64,
    /// Cumulative compile/execute/unit counts per debug round.
    pub per_round_curves: BTreeMap<u32, RoundCounts>,
}

pub fn aggregate(records: &[EvalRecord]) -> Result<MetricReport, EvalError> {
    let tested: Vec<&EvalRecord> = records.iter().filter(|r| !r.untested).collect();
    if tested.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let untested = records.len() - tested.len();
    let total = tested.len();
    let compile_count = tested.iter().filter(|r| r.compiled).count();
    let execute_count = tested.iter().filter(|r| r.executed).count();
    let unit_count = tested.iter().filter(|r| r.unit_passed).count();

    let max_round = tested
        .iter()
        .filter_map(|r| r.rounds_to_compile)
        .max()
        .unwrap_or(0);
    let mut per_round_curves = BTreeMap::new();
    for round in 0..=max_round {
        let in_round = |r: &&&EvalRecord| matches!(r.rounds_to_compile, Some(k) if k <= round);
        let counts = RoundCounts {
            compiled: tested.iter().filter(|r| r.compiled).filter(in_round).count(),
            executed: tested.iter().filter(|r| r.executed).filter(in_round).count(),
            unit_passed: tested.iter().filter(|r| r.unit_passed).filter(in_round).count(),
        };
        per_round_curves.insert(round, counts);
    }

    Ok(MetricReport {
        total,
        untested,
        compile_count,
        compile_rate: rate_percent(compile_count, total),
        execute_count,
        execute_rate: rate_percent(execute_count, total),
        unit_count,
        unit_rate: rate_percent(unit_count, total),
        per_round_curves,
    })
}

impl MetricReport {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>8} {:>14} {:>10}", "metric", "count", "rate (2dp)", "rate (1dp)");
        let rows = [
            ("compile", self.compile_count),
            ("execute", self.execute_count),
            ("unit_test", self.unit_count),
        ];
        for (name, count) in rows {
            let _ = writeln!(
                out,
                "{:<12} {:>8} {:>13.2}% {:>9.2}%",
                name,
                count,
                rate_percent(count, self.total),
                rate_percent_1dp(count, self.total)
            );
        }
        let _ = writeln!(out, "total tested: {}  (untested excluded: {})", self.total, self.untested);
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveRow {
    pub round: usize,
    pub compile_count: usize,
    pub compile_rate: f64,
    pub execute_count: usize,
    pub execute_rate: f64,
    pub unit_count: usize,
    pub unit_rate: f64,
}

/// Per-round success-rate table for plotting. Errors when cumulative counts
/// regress between rounds (an accounting bug, never a data property).
pub fn debug_curve(reports: &[MetricReport]) -> Result<Vec<CurveRow>, EvalError> {
    let mut rows = Vec::new();
    let mut prev: Option<(usize, usize, usize)> = None;
    for (round, report) in reports.iter().enumerate() {
        let triple = (report.compile_count, report.execute_count, report.unit_count);
        if let Some(p) = prev {
            for (prev_c, cur_c) in [(p.0, triple.0), (p.1, triple.1), (p.2, triple.2)] {
                if cur_c < prev_c {
                    return Err(EvalError::NonMonotoneCurve { round, previous: prev_c, current: cur_c });
                }
            }
        }
        prev = Some(triple);
        rows.push(CurveRow {
            round,
            compile_count: report.compile_count,
            compile_rate: report.compile_rate,
            execute_count: report.execute_count,
            execute_rate: report.execute_rate,
            unit_count: report.unit_count,
            unit_rate: report.unit_rate,
        });
    }
    Ok(rows)
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("round,compile_count,compile_rate,execute_count,execute_rate,unit_count,unit_rate\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.2},{},{:.2},{},{:.2}",
            r.round, r.compile_count, r.compile_rate, r.execute_count, r.execute_rate, r.unit_count, r.unit_rate
        );
    }
    out
}

/// Merges a candidate with its unit-test harness (harness appended when the
/// candidate is not already self-testing).
pub fn merge_harness(candidate: &str, harness: Option<&str>) -> String {
    match harness {
        Some(h) if !h.trim().is_empty() => format!("{candidate}\n{h}"),
        _ => candidate.to_string(),
    }
}

/// Evaluates one candidate: round 0 compiles/executes/tests it; while
/// compilation fails and debug rounds remain, code+stderr go back to the
/// model for regeneration. Records the first round that compiled.
pub fn evaluate_one(
    sample_id: &str,
    candidate: &str,
    language: SourceLanguage,
    harness: Option<&str>,
    sandbox: &Sandbox,
    debug_rounds: u32,
    gateway: Option<&LlmGateway>,
) -> Result<EvalRecord, EvalError> {
    assert!(debug_rounds == 0 || gateway.is_some(), "debug rounds require a gateway");
    if !sandbox.is_available(language) {
        log::warn!("sample {sample_id}: {language} toolchain unavailable, marking untested");
        return Ok(EvalRecord {
            sample_id: sample_id.to_string(),
            compiled: false,
            executed: false,
            unit_passed: false,
            rounds_to_compile: None,
            codebleu: None,
            untested: true,
        });
    }
    let mut code = merge_harness(candidate, harness);
    let mut record = EvalRecord {
        sample_id: sample_id.to_string(),
        compiled: false,
        executed: false,
        unit_passed: false,
        rounds_to_compile: None,
        codebleu: None,
        untested: false,
    };
    for round in 0..=debug_rounds {
        match sandbox.compile_and_run(&code, language, sample_id, "eval", round) {
            Ok((compiled, run)) => {
                if compiled.success {
                    record.compiled = true;
                    record.rounds_to_compile = Some(round);
                    if let Some(run) = run {
                        record.executed = run.completed();
                        record.unit_passed = run.passed();
                    }
                    break;
                }
                if round == debug_rounds {
                    break;
                }
                let gateway = gateway.expect("checked above");
                let prompt = gateway.render(
                    "refine_repair",
                    &[
                        ("language", language.fence_tag()),
                        ("code", &code),
                        ("feedback", &compiled.stderr),
                    ],
                )?;
                let reply = gateway.complete_stateless(&prompt)?;
                if let Ok(new_code) = extract_code_block(&reply, language.fence_tag()) {
                    if !new_code.trim().is_empty() {
                        code = new_code;
                    }
                }
            }
            Err(e) => {
                log::warn!("sample {sample_id}: sandbox error: {e}; marking untested");
                record.untested = true;
                break;
            }
        }
    }
    debug_assert!(record.chain_valid());
    Ok(record)
}
