//! Brute-force oracle for the n-gram and def-use CodeBLEU components:
//! enumerates every n-gram and every def-use pair explicitly and compares
//! against the metric to 1e-9 on near-miss program pairs.

use std::collections::BTreeSet;

use dialogue_forge_core::corpus::{tokenize, SourceLanguage};
use dialogue_forge_core::eval::{codebleu, keyword_set};

const LANG: SourceLanguage = SourceLanguage::Cpp;

fn token_weight(tok: &str, keywords: &BTreeSet<String>, weighted: bool) -> f64 {
    if weighted && keywords.contains(&tok.to_ascii_lowercase()) {
        5.0
    } else {
        1.0
    }
}

/// Explicit enumeration: for each n, list every candidate n-gram, count its
/// occurrences on both sides by rescanning, and clip.
fn oracle_ngram(candidate: &str, reference: &str, keywords: &BTreeSet<String>, weighted: bool) -> f64 {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    let occurrences = |hay: &[String], gram: &[String]| -> usize {
        if hay.len() < gram.len() {
            return 0;
        }
        (0..=hay.len() - gram.len())
            .filter(|&i| &hay[i..i + gram.len()] == gram)
            .count()
    };
    let mut log_sum = 0.0;
    let mut used = 0usize;
    for n in 1..=4usize.min(cand.len()) {
        if cand.len() < n {
            break;
        }
        let mut grams: Vec<&[String]> = (0..=cand.len() - n).map(|i| &cand[i..i + n]).collect();
        grams.sort();
        grams.dedup();
        let mut total = 0.0;
        let mut matched = 0.0;
        for gram in grams {
            let w: f64 = gram.iter().map(|t| token_weight(t, keywords, weighted)).sum::<f64>() / n as f64;
            let c = occurrences(&cand, gram);
            let r = occurrences(&refr, gram);
            total += w * c as f64;
            matched += w * c.min(r) as f64;
        }
        if total == 0.0 {
            continue;
        }
        let p = if matched > 0.0 {
            matched / total
        } else if n == 1 {
            return 0.0;
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
    let (c, r) = (cand.len() as f64, refr.len() as f64);
    precision * if c >= r { 1.0 } else { (1.0 - r / c).exp() }
}

fn is_ident(tok: &str, keywords: &BTreeSet<String>) -> bool {
    tok.chars().next().map(|c| c.is_alphabetic() || c == '_').unwrap_or(false)
        && !keywords.contains(&tok.to_ascii_lowercase())
}

/// Enumerates def-use pairs by brute force inside each top-level brace group
/// (whole text when there are no braces): a def is `ident =` not followed by
/// another `=`; every later use of that identifier pairs with the count of
/// defs before it; variables are renamed var0.. in first-def order.
fn oracle_defuse(code: &str, keywords: &BTreeSet<String>) -> Vec<String> {
    let tokens = tokenize(code);
    let mut scopes: Vec<(usize, usize)> = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    for (i, t) in tokens.iter().enumerate() {
        if t == "{" {
            if depth == 0 {
                start = i + 1;
            }
            depth += 1;
        } else if t == "}" && depth > 0 {
            depth -= 1;
            if depth == 0 {
                scopes.push((start, i));
            }
        }
    }
    if scopes.is_empty() {
        scopes.push((0, tokens.len()));
    }
    let mut out = Vec::new();
    for (a, b) in scopes {
        let scope = &tokens[a..b.min(tokens.len())];
        let defs: Vec<usize> = (0..scope.len())
            .filter(|&i| {
                is_ident(&scope[i], keywords)
                    && scope.get(i + 1).map(String::as_str) == Some("=")
                    && scope.get(i + 2).map(String::as_str) != Some("=")
            })
            .collect();
        let mut order: Vec<&str> = Vec::new();
        for &d in &defs {
            if !order.contains(&scope[d].as_str()) {
                order.push(scope[d].as_str());
            }
        }
        for (pos, tok) in scope.iter().enumerate() {
            if defs.contains(&pos) || !is_ident(tok, keywords) {
                continue;
            }
            let Some(idx) = order.iter().position(|v| v == tok) else { continue };
            let before = defs.iter().filter(|&&d| d < pos && scope[d] == *tok).count();
            if before > 0 {
                out.push(format!("var{idx}#{}", before - 1));
            }
        }
    }
    out
}

fn oracle_dataflow(candidate: &str, reference: &str, keywords: &BTreeSet<String>) -> f64 {
    let cand = oracle_defuse(candidate, keywords);
    let mut refs = oracle_defuse(reference, keywords);
    if cand.is_empty() && refs.is_empty() {
        let norm = |code: &str| -> Vec<String> {
            tokenize(code)
                .iter()
                .map(|t| {
                    let first = t.chars().next().unwrap();
                    if keywords.contains(&t.to_ascii_lowercase()) {
                        t.to_ascii_lowercase()
                    } else if first.is_ascii_digit() {
                        "num".into()
                    } else if first.is_alphabetic() || first == '_' {
                        "id".into()
                    } else {
                        t.clone()
                    }
                })
                .collect()
        };
        return if norm(candidate) == norm(reference) { 1.0 } else { 0.0 };
    }
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut matched = 0usize;
    for c in &cand {
        if let Some(i) = refs.iter().position(|r| r == c) {
            refs.swap_remove(i);
            matched += 1;
        }
    }
    matched as f64 / cand.len() as f64
}

/// Ten near-miss pairs: small targeted edits of realistic programs.
fn near_miss_pairs() -> Vec<(&'static str, &'static str)> {
    const BASE: &str = "int main() {\n  int total = 0;\n  for (int i = 0; i < 10; ++i) { total = total + i; }\n  printf(\"%d\\n\", total);\n  return 0;\n}\n";
    vec![
        (BASE, "int main() {\n  int total = 0;\n  for (int i = 0; i < 20; ++i) { total = total + i; }\n  printf(\"%d\\n\", total);\n  return 0;\n}\n"),
        (BASE, "int main() {\n  int sum = 0;\n  for (int i = 0; i < 10; ++i) { sum = sum + i; }\n  printf(\"%d\\n\", sum);\n  return 0;\n}\n"),
        (BASE, "int main() {\n  int total = 0;\n  for (int i = 0; i < 10; ++i) { total = total * i; }\n  printf(\"%d\\n\", total);\n  return 0;\n}\n"),
        (BASE, "int main() {\n  int total = 0;\n  printf(\"%d\\n\", total);\n  return 0;\n}\n"),
        ("x = 1; y = x + x; z = y;", "x = 1; y = x + x; z = x;"),
        ("{ a = 1; b = a; a = 2; c = a; }", "{ a = 1; b = a; c = a; }"),
        ("double f(double v) { return v * v; }", "double f(double v) { return v + v; }"),
        ("while (n > 0) { n = n - 1; s = s + n; }", "while (n > 0) { s = s + n; n = n - 1; }"),
        ("if (x == 1) { y = 2; } else { y = 3; }", "if (x != 1) { y = 3; } else { y = 2; }"),
        ("for (;;) { break; }", "for (;;) { continue; }"),
    ]
}

#[test]
fn ngram_components_match_bruteforce_oracle() {
    let keywords = keyword_set(LANG);
    for (i, (cand, refr)) in near_miss_pairs().iter().enumerate() {
        let score = codebleu(cand, refr, LANG).unwrap();
        let plain = oracle_ngram(cand, refr, &keywords, false);
        let weighted = oracle_ngram(cand, refr, &keywords, true);
        assert!((score.ngram - plain).abs() < 1e-9, "pair {i}: ngram {} vs oracle {plain}", score.ngram);
        assert!(
            (score.weighted_ngram - weighted).abs() < 1e-9,
            "pair {i}: weighted {} vs oracle {weighted}",
            score.weighted_ngram
        );
    }
}

#[test]
fn dataflow_component_matches_bruteforce_oracle() {
    let keywords = keyword_set(LANG);
    for (i, (cand, refr)) in near_miss_pairs().iter().enumerate() {
        let score = codebleu(cand, refr, LANG).unwrap();
        let oracle = oracle_dataflow(cand, refr, &keywords);
        assert!(
            (score.dataflow_match - oracle).abs() < 1e-9,
            "pair {i}: dataflow {} vs oracle {oracle}",
            score.dataflow_match
        );
    }
}

#[test]
fn identity_pairs_score_one_on_all_components() {
    for (cand, _) in near_miss_pairs() {
        let s = codebleu(cand, cand, LANG).unwrap();
        for (name, v) in [("ngram", s.ngram), ("weighted", s.weighted_ngram), ("ast", s.ast_match), ("dataflow", s.dataflow_match), ("combined", s.combined)] {
            assert!((v - 1.0).abs() < 1e-9, "{name} = {v} for {cand:?}");
        }
    }
}

#[test]
fn components_stay_in_unit_interval() {
    for (cand, refr) in near_miss_pairs() {
        let s = codebleu(cand, refr, LANG).unwrap();
        for v in [s.ngram, s.weighted_ngram, s.ast_match, s.dataflow_match, s.combined] {
            assert!((0.0..=1.0 + 1e-12).contains(&v), "{v} out of range");
        }
    }
}
