//! CodeBLEU-style translation similarity: smoothed n-gram precision,
//! keyword-weighted n-gram precision, approximate syntax-tree match, and
//! def-use dataflow match.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, SourceLanguage};

use super::EvalError;

const MAX_NGRAM: usize = 4;
const KEYWORD_WEIGHT: f64 = 5.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodeBleuScore {
    pub ngram: f64,
    pub weighted_ngram: f64,
    pub ast_match: f64,
    pub dataflow_match: f64,
    pub weights: [f64; 4],
    pub combined: f64,
}

pub fn keyword_set(language: SourceLanguage) -> BTreeSet<String> {
    let raw = match language {
        SourceLanguage::Cpp => include_str!("../../data/keywords/cpp.txt"),
        SourceLanguage::Cuda => include_str!("../../data/keywords/cuda.txt"),
        SourceLanguage::Fortran => include_str!("../../data/keywords/fortran.txt"),
    };
    raw.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| l.to_ascii_lowercase())
        .collect()
}

fn is_keyword(token: &str, keywords: &BTreeSet<String>) -> bool {
    keywords.contains(&token.to_ascii_lowercase())
}

pub fn codebleu(candidate: &str, reference: &str, language: SourceLanguage) -> Result<CodeBleuScore, EvalError> {
    codebleu_weighted(candidate, reference, language, [0.25; 4])
}

pub fn codebleu_weighted(
    candidate: &str,
    reference: &str,
    language: SourceLanguage,
    weights: [f64; 4],
) -> Result<CodeBleuScore, EvalError> {
    let wsum: f64 = weights.iter().sum();
    if weights.iter().any(|w| *w < 0.0) || (wsum - 1.0).abs() > 1e-9 {
        return Err(EvalError::BadWeights(weights.to_vec()));
    }
    let cand_tokens = tokenize(candidate);
    let ref_tokens = tokenize(reference);
    if cand_tokens.is_empty() || ref_tokens.is_empty() {
        return Err(EvalError::ScoreUndefined);
    }
    let keywords = keyword_set(language);
    let ngram = ngram_precision(&cand_tokens, &ref_tokens, |_| 1.0);
    let weighted_ngram = ngram_precision(&cand_tokens, &ref_tokens, |tok| {
        if is_keyword(tok, &keywords) {
            KEYWORD_WEIGHT
        } else {
            1.0
        }
    });
    let ast_match = ast_match(candidate, reference, language, &keywords);
    let dataflow_match = dataflow_match(candidate, reference, language, &keywords);
    let combined = weights[0] * ngram + weights[1] * weighted_ngram + weights[2] * ast_match + weights[3] * dataflow_match;
    Ok(CodeBleuScore { ngram, weighted_ngram, ast_match, dataflow_match, weights, combined })
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU-4 style: geometric mean of clipped n-gram precisions with a brevity
/// penalty. Smoothing (1 / (2·total)) applies only when a precision would be
/// zero, so identical inputs score exactly 1.
fn ngram_precision(cand: &[String], reference: &[String], weight_of: impl Fn(&str) -> f64) -> f64 {
    let gram_weight = |gram: &[String]| -> f64 {
        gram.iter().map(|t| weight_of(t)).sum::<f64>() / gram.len() as f64
    };
    let mut log_sum = 0.0;
    let mut used = 0usize;
    for n in 1..=MAX_NGRAM.min(cand.len()) {
        let cand_counts = ngrams(cand, n);
        let ref_counts = ngrams(reference, n);
        let mut total = 0.0;
        let mut matched = 0.0;
        for (gram, count) in &cand_counts {
            let w = gram_weight(gram);
            total += w * (*count as f64);
            let clip = ref_counts.get(gram).copied().unwrap_or(0).min(*count);
            matched += w * (clip as f64);
        }
        if total == 0.0 {
            continue;
        }
        let p = if matched > 0.0 {
            matched / total
        } else if n == 1 {
            return 0.0; // zero unigram overlap: no smoothing rescue
        } else {
            1.0 / (2.0 * total)
        };
        log_sum += p.ln();
        used += 1;
    }
    if used == 0 {
        return 0.0;
    }
    let precision = (log_sum / used as f64).exp();
    let (c, r) = (cand.len() as f64, reference.len() as f64);
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    precision * bp
}

/// Normalizes a token for structural comparison: keywords survive,
/// identifiers collapse to `id`, numbers to `num`.
pub fn normalize_token(token: &str, keywords: &BTreeSet<String>) -> String {
    let mut chars = token.chars();
    let first = chars.next().unwrap_or(' ');
    if is_keyword(token, keywords) {
        token.to_ascii_lowercase()
    } else if first.is_ascii_digit() {
        "num".to_string()
    } else if first.is_alphabetic() || first == '_' {
        "id".to_string()
    } else {
        token.to_string()
    }
}

fn tokenize_lines(code: &str) -> Vec<Vec<String>> {
    code.lines().map(tokenize).collect()
}

/// Subtree signatures from a bracket/keyword-driven chunker: one signature
/// per source line (normalized tokens) plus one per bracket group
/// (recursively normalized). No grammar required; monotone in structural
/// similarity.
pub fn syntax_signatures(code: &str, keywords: &BTreeSet<String>) -> Vec<String> {
    let mut sigs = Vec::new();
    for line in tokenize_lines(code) {
        if line.is_empty() {
            continue;
        }
        let norm: Vec<String> = line.iter().map(|t| normalize_token(t, keywords)).collect();
        sigs.push(format!("L:{}", norm.join(" ")));
    }

    #[derive(Default)]
    struct Node {
        open: char,
        items: Vec<String>,
    }
    let tokens = tokenize(code);
    let mut stack: Vec<Node> = vec![Node { open: '^', items: Vec::new() }];
    for tok in &tokens {
        match tok.as_str() {
            "(" | "[" | "{" => stack.push(Node { open: tok.chars().next().unwrap(), items: Vec::new() }),
            ")" | "]" | "}" => {
                if stack.len() > 1 {
                    let node = stack.pop().unwrap();
                    let sig = format!("B{}{{{}}}", node.open, node.items.join(" "));
                    sigs.push(sig.clone());
                    stack.last_mut().unwrap().items.push(sig);
                }
                // stray closers are ignored
            }
            _ => stack
                .last_mut()
                .unwrap()
                .items
                .push(normalize_token(tok, keywords)),
        }
    }
    // unterminated groups still contribute their collected signature
    while stack.len() > 1 {
        let node = stack.pop().unwrap();
        let sig = format!("B{}{{{}}}", node.open, node.items.join(" "));
        sigs.push(sig);
    }
    sigs
}

fn clipped_match_fraction(cand: &[String], reference: &[String]) -> f64 {
    if cand.is_empty() {
        return 1.0; // vacuously structural-identical
    }
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for s in reference {
        *ref_counts.entry(s.as_str()).or_insert(0) += 1;
    }
    let mut matched = 0usize;
    for s in cand {
        if let Some(c) = ref_counts.get_mut(s.as_str()) {
            if *c > 0 {
                *c -= 1;
                matched += 1;
            }
        }
    }
    matched as f64 / cand.len() as f64
}

fn ast_match(candidate: &str, reference: &str, _language: SourceLanguage, keywords: &BTreeSet<String>) -> f64 {
    let cand = syntax_signatures(candidate, keywords);
    let refs = syntax_signatures(reference, keywords);
    clipped_match_fraction(&cand, &refs)
}

/// One def-use pair: (variable normalized by first-def order within its
/// scope, 0-based ordinal of the governing definition).
pub fn defuse_pairs(code: &str, language: SourceLanguage, keywords: &BTreeSet<String>) -> Vec<(String, usize)> {
    let scopes = scope_token_ranges(code, language);
    let tokens = tokenize(code);
    let mut pairs = Vec::new();
    for (start, end) in scopes {
        let scope = &tokens[start..end.min(tokens.len())];
        pairs.extend(scope_defuse(scope, keywords));
    }
    pairs
}

fn is_identifier(token: &str, keywords: &BTreeSet<String>) -> bool {
    let mut chars = token.chars();
    match chars.next() {
        Some(c) if c.is_alphabetic() || c == '_' => !is_keyword(token, keywords),
        _ => false,
    }
}

/// A def is `ident =` where the `=` is plain assignment (not ==, <=, !=, +=…).
fn def_positions(scope: &[String], keywords: &BTreeSet<String>) -> Vec<usize> {
    let mut defs = Vec::new();
    for i in 0..scope.len() {
        if !is_identifier(&scope[i], keywords) {
            continue;
        }
        if scope.get(i + 1).map(String::as_str) != Some("=") {
            continue;
        }
        if scope.get(i + 2).map(String::as_str) == Some("=") {
            continue; // ==
        }
        defs.push(i);
    }
    defs
}

fn scope_defuse(scope: &[String], keywords: &BTreeSet<String>) -> Vec<(String, usize)> {
    let defs = def_positions(scope, keywords);
    let def_set: BTreeSet<usize> = defs.iter().copied().collect();
    // first-def order gives positional names
    let mut names: HashMap<&str, String> = HashMap::new();
    for &d in &defs {
        let var = scope[d].as_str();
        if !names.contains_key(var) {
            let fresh = format!("var{}", names.len());
            names.insert(var, fresh);
        }
    }
    let mut pairs = Vec::new();
    for (pos, tok) in scope.iter().enumerate() {
        if def_set.contains(&pos) || !is_identifier(tok, keywords) {
            continue;
        }
        let Some(norm) = names.get(tok.as_str()) else { continue };
        // latest def of this variable before the use
        let ordinal = defs
            .iter()
            .enumerate()
            .filter(|(_, &d)| d < pos && scope[d] == *tok)
            .map(|(_, _)| ())
            .count();
        if ordinal > 0 {
            pairs.push((norm.clone(), ordinal - 1));
        }
    }
    pairs
}

/// Scope windows: top-level brace groups for C-like languages, the whole
/// text for Fortran (and for C-like text without braces).
fn scope_token_ranges(code: &str, language: SourceLanguage) -> Vec<(usize, usize)> {
    let tokens = tokenize(code);
    if language == SourceLanguage::Fortran {
        return vec![(0, tokens.len())];
    }
    let mut ranges = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    for (i, tok) in tokens.iter().enumerate() {
        match tok.as_str() {
            "{" => {
                if depth == 0 {
                    start = i + 1;
                }
                depth += 1;
            }
            "}" => {
                if depth > 0 {
                    depth -= 1;
                    if depth == 0 {
                        ranges.push((start, i));
                    }
                }
            }
            _ => {}
        }
    }
    if ranges.is_empty() {
        vec![(0, tokens.len())]
    } else {
        ranges
    }
}

fn dataflow_match(candidate: &str, reference: &str, language: SourceLanguage, keywords: &BTreeSet<String>) -> f64 {
    let cand: Vec<String> = defuse_pairs(candidate, language, keywords)
        .into_iter()
        .map(|(v, k)| format!("{v}#{k}"))
        .collect();
    let refs: Vec<String> = defuse_pairs(reference, language, keywords)
        .into_iter()
        .map(|(v, k)| format!("{v}#{k}"))
        .collect();
    if cand.is_empty() && refs.is_empty() {
        // no dataflow on either side: fall back to normalized-token equality
        let norm = |code: &str| -> Vec<String> {
            tokenize(code).iter().map(|t| normalize_token(t, keywords)).collect()
        };
        return if norm(candidate) == norm(reference) { 1.0 } else { 0.0 };
    }
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    clipped_match_fraction(&cand, &refs)
}
