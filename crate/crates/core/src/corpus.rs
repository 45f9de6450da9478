//! Corpus ingestion and preprocessing: comment stripping, token counting,
//! dependency filtering, self-containment checks, and index-range selection.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{LlmGateway, Verdict};

/// Translation source/target language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceLanguage {
    Fortran,
    Cpp,
    Cuda,
}

impl SourceLanguage {
    pub fn as_str(&self) -> &'static str {
        match self {
            SourceLanguage::Fortran => "fortran",
            SourceLanguage::Cpp => "cpp",
            SourceLanguage::Cuda => "cuda",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fortran" | "f90" => Some(SourceLanguage::Fortran),
            "cpp" | "c++" | "cxx" => Some(SourceLanguage::Cpp),
            "cuda" | "cu" => Some(SourceLanguage::Cuda),
            _ => None,
        }
    }

    /// Source file extension used when writing code to disk.
    pub fn extension(&self) -> &'static str {
        match self {
            SourceLanguage::Fortran => "f90",
            SourceLanguage::Cpp => "cpp",
            SourceLanguage::Cuda => "cu",
        }
    }

    /// Fence tag the solver is instructed to use for this language.
    pub fn fence_tag(&self) -> &'static str {
        self.as_str()
    }
}

impl fmt::Display for SourceLanguage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Supported translation directions. Anything else is rejected at
/// configuration time.
pub fn direction_supported(source: SourceLanguage, target: SourceLanguage) -> bool {
    matches!(
        (source, target),
        (SourceLanguage::Fortran, SourceLanguage::Cpp) | (SourceLanguage::Cpp, SourceLanguage::Cuda)
    )
}

/// One preprocessed source snippet with provenance index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceUnit {
    pub id: String,
    pub origin_index: u64,
    pub language: SourceLanguage,
    pub code: String,
    pub token_count: usize,
}

impl SourceUnit {
    pub fn new(id: impl Into<String>, origin_index: u64, language: SourceLanguage, code: String) -> Self {
        let token_count = count_tokens(&code);
        SourceUnit { id: id.into(), origin_index, language, code, token_count }
    }
}

#[derive(Debug, Clone)]
pub struct PreprocessConfig {
    pub max_tokens: usize,
    pub strip_comments: bool,
    pub require_self_contained: bool,
    pub dependency_allowlist: BTreeSet<String>,
}

impl PreprocessConfig {
    pub fn for_language(language: SourceLanguage) -> Self {
        PreprocessConfig {
            max_tokens: 4000,
            strip_comments: true,
            require_self_contained: true,
            dependency_allowlist: default_allowlist(language),
        }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed source: {what} starting at byte {offset}")]
    MalformedSource { what: &'static str, offset: usize },
    #[error("self-containment verdict unparseable after reprompt")]
    VerdictUnparseable,
    #[error("invalid index range [{start}, {end}) over corpus span {span}")]
    RangeError { start: u64, end: u64, span: u64 },
    #[error("corpus io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus record on line {line}: {message}")]
    BadRecord { line: usize, message: String },
    #[error(transparent)]
    Gateway(#[from] crate::gateway::GatewayError),
}

/// Why a unit was dropped during preprocessing. Units are never silently
/// discarded; each rejection carries one of these codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Empty,
    TooLong,
    DependencyHeavy,
    NotSelfContained,
    Malformed,
    VerdictUnparseable,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DropReason::Empty => "empty",
            DropReason::TooLong => "too_long",
            DropReason::DependencyHeavy => "dependency_heavy",
            DropReason::NotSelfContained => "not_self_contained",
            DropReason::Malformed => "malformed",
            DropReason::VerdictUnparseable => "verdict_unparseable",
        };
        f.write_str(s)
    }
}

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Deterministic token count: maximal runs of identifier characters count as
/// one token, every other non-whitespace character counts as one token.
pub fn count_tokens(code: &str) -> usize {
    let mut count = 0usize;
    let mut in_ident = false;
    for c in code.chars() {
        if is_ident_char(c) {
            if !in_ident {
                count += 1;
                in_ident = true;
            }
        } else {
            in_ident = false;
            if !c.is_whitespace() {
                count += 1;
            }
        }
    }
    count
}

/// Splits code into the tokens counted by `count_tokens`.
pub fn tokenize(code: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut ident = String::new();
    for c in code.chars() {
        if is_ident_char(c) {
            ident.push(c);
        } else {
            if !ident.is_empty() {
                tokens.push(std::mem::take(&mut ident));
            }
            if !c.is_whitespace() {
                tokens.push(c.to_string());
            }
        }
    }
    if !ident.is_empty() {
        tokens.push(ident);
    }
    tokens
}

/// Removes line and block comments while leaving string-literal contents
/// untouched. Lines emptied by comment removal are dropped; trailing
/// whitespace on remaining lines is trimmed.
pub fn strip_comments(code: &str, language: SourceLanguage) -> Result<String, CorpusError> {
    let stripped = match language {
        SourceLanguage::Cpp | SourceLanguage::Cuda => strip_c_style(code)?,
        SourceLanguage::Fortran => strip_fortran(code)?,
    };
    // Drop lines that lost all content to comment removal; keep lines that
    // were already blank in the input so spacing survives a second pass.
    let had_content: Vec<bool> = code.lines().map(|l| !l.trim().is_empty()).collect();
    let mut out = String::new();
    for (i, line) in stripped.lines().enumerate() {
        let trimmed_end = line.trim_end();
        if trimmed_end.is_empty() && had_content.get(i).copied().unwrap_or(false) {
            continue;
        }
        out.push_str(trimmed_end);
        out.push('\n');
    }
    if !code.ends_with('\n') {
        // preserve absence of a trailing newline
        while out.ends_with('\n') {
            out.pop();
            if !out.ends_with('\n') {
                break;
            }
        }
    }
    Ok(out)
}

fn strip_c_style(code: &str) -> Result<String, CorpusError> {
    #[derive(PartialEq)]
    enum St {
        Code,
        Line,
        Block,
        Str,
        Chr,
    }
    let bytes: Vec<char> = code.chars().collect();
    let mut out = String::with_capacity(code.len());
    let mut st = St::Code;
    let mut i = 0;
    let mut open = 0usize; // byte offset of current block/string start
    let mut byte_pos = 0usize;
    while i < bytes.len() {
        let c = bytes[i];
        let next = bytes.get(i + 1).copied();
        match st {
            St::Code => match (c, next) {
                ('/', Some('/')) => {
                    st = St::Line;
                    byte_pos += 2;
                    i += 2;
                    continue;
                }
                ('/', Some('*')) => {
                    st = St::Block;
                    open = byte_pos;
                    byte_pos += 2;
                    i += 2;
                    continue;
                }
                ('"', _) => {
                    st = St::Str;
                    open = byte_pos;
                    out.push(c);
                }
                ('\'', _) => {
                    st = St::Chr;
                    open = byte_pos;
                    out.push(c);
                }
                _ => out.push(c),
            },
            St::Line => {
                if c == '\n' {
                    out.push('\n');
                    st = St::Code;
                }
            }
            St::Block => {
                if c == '*' && next == Some('/') {
                    st = St::Code;
                    byte_pos += 2;
                    i += 2;
                    continue;
                }
                if c == '\n' {
                    out.push('\n'); // keep line structure across multi-line comments
                }
            }
            St::Str => {
                out.push(c);
                if c == '\\' {
                    if let Some(n) = next {
                        out.push(n);
                        byte_pos += c.len_utf8() + n.len_utf8();
                        i += 2;
                        continue;
                    }
                } else if c == '"' {
                    st = St::Code;
                } else if c == '\n' {
                    return Err(CorpusError::MalformedSource { what: "unterminated string literal", offset: open });
                }
            }
            St::Chr => {
                out.push(c);
                if c == '\\' {
                    if let Some(n) = next {
                        out.push(n);
                        byte_pos += c.len_utf8() + n.len_utf8();
                        i += 2;
                        continue;
                    }
                } else if c == '\'' {
                    st = St::Code;
                } else if c == '\n' {
                    return Err(CorpusError::MalformedSource { what: "unterminated character literal", offset: open });
                }
            }
        }
        byte_pos += c.len_utf8();
        i += 1;
    }
    match st {
        St::Block => Err(CorpusError::MalformedSource { what: "unterminated block comment", offset: open }),
        St::Str => Err(CorpusError::MalformedSource { what: "unterminated string literal", offset: open }),
        St::Chr => Err(CorpusError::MalformedSource { what: "unterminated character literal", offset: open }),
        _ => Ok(out),
    }
}

/// Free-form Fortran: `!` starts a comment outside quoted strings. Quotes are
/// doubled to escape (`''` inside '...').
fn strip_fortran(code: &str) -> Result<String, CorpusError> {
    let mut out = String::with_capacity(code.len());
    let mut byte_pos = 0usize;
    for line in split_keep_newline(code) {
        let chars: Vec<char> = line.chars().collect();
        let mut quote: Option<char> = None;
        let mut open = 0usize;
        let mut i = 0;
        let mut local = 0usize;
        while i < chars.len() {
            let c = chars[i];
            match quote {
                None => {
                    if c == '!' {
                        // comment runs to end of line; keep the newline if any
                        if line.ends_with('\n') {
                            out.push('\n');
                        }
                        break;
                    }
                    if c == '\'' || c == '"' {
                        quote = Some(c);
                        open = byte_pos + local;
                    }
                    out.push(c);
                }
                Some(q) => {
                    out.push(c);
                    if c == q {
                        if chars.get(i + 1) == Some(&q) {
                            out.push(q);
                            local += c.len_utf8() + q.len_utf8();
                            i += 2;
                            continue;
                        }
                        quote = None;
                    } else if c == '\n' {
                        return Err(CorpusError::MalformedSource { what: "unterminated string literal", offset: open });
                    }
                }
            }
            local += c.len_utf8();
            i += 1;
        }
        if quote.is_some() {
            return Err(CorpusError::MalformedSource { what: "unterminated string literal", offset: open });
        }
        byte_pos += line.len();
    }
    Ok(out)
}

fn split_keep_newline(s: &str) -> impl Iterator<Item = &str> {
    let mut rest = s;
    std::iter::from_fn(move || {
        if rest.is_empty() {
            return None;
        }
        match rest.find('\n') {
            Some(idx) => {
                let (line, tail) = rest.split_at(idx + 1);
                rest = tail;
                Some(line)
            }
            None => {
                let line = rest;
                rest = "";
                Some(line)
            }
        }
    })
}

/// True iff the code references an include/use target outside the allowlist.
pub fn is_dependency_heavy(code: &str, language: SourceLanguage, allowlist: &BTreeSet<String>) -> bool {
    dependency_targets(code, language)
        .iter()
        .any(|t| !allowlist.contains(t.as_str()))
}

/// Extracts include/use targets referenced by the code.
pub fn dependency_targets(code: &str, language: SourceLanguage) -> Vec<String> {
    let mut targets = Vec::new();
    match language {
        SourceLanguage::Cpp | SourceLanguage::Cuda => {
            for line in code.lines() {
                let t = line.trim_start();
                let Some(rest) = t.strip_prefix('#') else { continue };
                let rest = rest.trim_start();
                let Some(rest) = rest.strip_prefix("include") else { continue };
                let rest = rest.trim_start();
                let (close, body) = match rest.chars().next() {
                    Some('<') => ('>', &rest[1..]),
                    Some('"') => ('"', &rest[1..]),
                    _ => continue,
                };
                if let Some(end) = body.find(close) {
                    targets.push(body[..end].trim().to_string());
                }
            }
        }
        SourceLanguage::Fortran => {
            for line in code.lines() {
                let t = line.trim_start();
                let lower = t.to_ascii_lowercase();
                let Some(rest) = lower.strip_prefix("use") else { continue };
                if !rest.starts_with(|c: char| c.is_whitespace() || c == ',') {
                    continue;
                }
                // `use, intrinsic :: name` or `use name, only: ...`
                let rest = rest.trim_start();
                let rest = rest.strip_prefix(',').map(str::trim_start).unwrap_or(rest);
                let rest = rest.strip_prefix("intrinsic").map(str::trim_start).unwrap_or(rest);
                let rest = rest.strip_prefix("::").map(str::trim_start).unwrap_or(rest);
                let name: String = rest
                    .chars()
                    .take_while(|c| c.is_alphanumeric() || *c == '_')
                    .collect();
                if !name.is_empty() {
                    targets.push(name);
                }
            }
        }
    }
    targets
}

/// Built-in standard-library/intrinsic allowlist for a language. Extend via
/// plain-text allowlist files (one name per line, `#` comments).
pub fn default_allowlist(language: SourceLanguage) -> BTreeSet<String> {
    let raw = match language {
        SourceLanguage::Cpp => include_str!("../data/allowlists/cpp.txt"),
        SourceLanguage::Cuda => include_str!("../data/allowlists/cuda.txt"),
        SourceLanguage::Fortran => include_str!("../data/allowlists/fortran.txt"),
    };
    parse_allowlist(raw)
}

pub fn parse_allowlist(raw: &str) -> BTreeSet<String> {
    raw.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn load_allowlist(path: &Path) -> Result<BTreeSet<String>, CorpusError> {
    Ok(parse_allowlist(&std::fs::read_to_string(path)?))
}

/// Asks the gateway whether the snippet is self-contained, reprompting once
/// when the verdict is unparseable.
pub fn check_self_contained(
    code: &str,
    language: SourceLanguage,
    gateway: &LlmGateway,
) -> Result<bool, CorpusError> {
    let _ = language; // the check prompt is language-agnostic
    let prompt = gateway.render("self_contained_check", &[("CPP_Code", code)])?;
    let reply = gateway.complete_stateless(&prompt)?;
    match crate::gateway::parse_verdict(&reply) {
        Verdict::Yes => Ok(true),
        Verdict::No => Ok(false),
        Verdict::Unparseable => {
            let reprompt = gateway.render("reprompt_yes_no", &[])?;
            let followup = format!("{prompt}\n\n{reprompt}");
            let reply = gateway.complete_stateless(&followup)?;
            match crate::gateway::parse_verdict(&reply) {
                Verdict::Yes => Ok(true),
                Verdict::No => Ok(false),
                Verdict::Unparseable => Err(CorpusError::VerdictUnparseable),
            }
        }
    }
}

/// Units whose origin_index lies in `[start, end)`, order preserved.
pub fn select_units(corpus: &[SourceUnit], start: u64, end: u64) -> Result<Vec<SourceUnit>, CorpusError> {
    let span = corpus.iter().map(|u| u.origin_index + 1).max().unwrap_or(0);
    if start > end || end > span {
        return Err(CorpusError::RangeError { start, end, span });
    }
    Ok(corpus
        .iter()
        .filter(|u| u.origin_index >= start && u.origin_index < end)
        .cloned()
        .collect())
}

/// Outcome of preprocessing one raw snippet.
#[derive(Debug, Clone)]
pub enum PreprocessOutcome {
    Kept(SourceUnit),
    Dropped { id: String, origin_index: u64, reason: DropReason },
}

/// Applies the preprocessing filters to one raw snippet. The gateway is only
/// consulted when `require_self_contained` is set.
pub fn preprocess_unit(
    id: &str,
    origin_index: u64,
    language: SourceLanguage,
    raw_code: &str,
    config: &PreprocessConfig,
    gateway: Option<&LlmGateway>,
) -> PreprocessOutcome {
    let dropped = |reason| PreprocessOutcome::Dropped { id: id.to_string(), origin_index, reason };
    let code = if config.strip_comments {
        match strip_comments(raw_code, language) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("unit {id}: {e}");
                return dropped(DropReason::Malformed);
            }
        }
    } else {
        raw_code.to_string()
    };
    if code.trim().is_empty() {
        return dropped(DropReason::Empty);
    }
    let unit = SourceUnit::new(id, origin_index, language, code);
    if unit.token_count > config.max_tokens {
        return dropped(DropReason::TooLong);
    }
    if is_dependency_heavy(&unit.code, language, &config.dependency_allowlist) {
        return dropped(DropReason::DependencyHeavy);
    }
    if config.require_self_contained {
        if let Some(gw) = gateway {
            match check_self_contained(&unit.code, language, gw) {
                Ok(true) => {}
                Ok(false) => return dropped(DropReason::NotSelfContained),
                Err(e) => {
                    log::warn!("unit {id}: self-containment check failed: {e}");
                    return dropped(DropReason::VerdictUnparseable);
                }
            }
        }
    }
    PreprocessOutcome::Kept(unit)
}

#[derive(Debug, Deserialize)]
struct RawCorpusRecord {
    index: u64,
    language: String,
    code: String,
}

/// Loads a raw corpus either from a JSONL file
/// (`{"index": int, "language": string, "code": string}`) or a directory of
/// source files (index assigned in sorted filename order).
pub fn load_raw_corpus(path: &Path, default_language: SourceLanguage) -> Result<Vec<(u64, SourceLanguage, String)>, CorpusError> {
    let mut out = Vec::new();
    if path.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(path)?
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        for (i, p) in entries.iter().enumerate() {
            let lang = p
                .extension()
                .and_then(|e| e.to_str())
                .and_then(SourceLanguage::parse)
                .unwrap_or(default_language);
            out.push((i as u64, lang, std::fs::read_to_string(p)?));
        }
    } else {
        let text = std::fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: RawCorpusRecord = serde_json::from_str(line).map_err(|e| CorpusError::BadRecord {
                line: lineno + 1,
                message: e.to_string(),
            })?;
            let lang = SourceLanguage::parse(&rec.language).ok_or_else(|| CorpusError::BadRecord {
                line: lineno + 1,
                message: format!("unknown language {:?}", rec.language),
            })?;
            out.push((rec.index, lang, rec.code));
        }
    }
    Ok(out)
}
