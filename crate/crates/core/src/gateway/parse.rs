//! Structured-reply parsing: fenced code blocks, repair-intent tags, and
//! yes/no verdicts.

use serde::{Deserialize, Serialize};

use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Yes,
    No,
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedReply {
    pub code_blocks: Vec<(String, String)>,
    pub repair_tags: Vec<String>,
    pub verdict: Option<Verdict>,
    pub raw: String,
}

pub fn parse_reply(text: &str) -> ParsedReply {
    let verdict = match parse_verdict(text) {
        Verdict::Unparseable => None,
        v => Some(v),
    };
    ParsedReply {
        code_blocks: all_code_blocks(text),
        repair_tags: extract_repair_tags(text),
        verdict,
        raw: text.to_string(),
    }
}

/// Every fenced block in the reply, as (language_tag, contents).
pub fn all_code_blocks(text: &str) -> Vec<(String, String)> {
    let mut blocks = Vec::new();
    let mut current_tag: Option<String> = None;
    let mut current = String::new();
    for line in text.lines() {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix("```") {
            match current_tag.take() {
                Some(tag) => {
                    blocks.push((tag, trim_blank_edges(&current)));
                    current.clear();
                }
                None => {
                    current_tag = Some(rest.trim().to_string());
                }
            }
            continue;
        }
        if current_tag.is_some() {
            current.push_str(line);
            current.push('\n');
        }
    }
    // an unterminated fence is not a block
    blocks
}

fn trim_blank_edges(s: &str) -> String {
    let lines: Vec<&str> = s.lines().collect();
    let start = lines.iter().position(|l| !l.trim().is_empty()).unwrap_or(lines.len());
    let end = lines.iter().rposition(|l| !l.trim().is_empty()).map(|i| i + 1).unwrap_or(start);
    lines[start..end].join("\n")
}

/// Contents of the first fence whose tag equals `language_tag`.
pub fn extract_code_block(text: &str, language_tag: &str) -> Result<String, GatewayError> {
    all_code_blocks(text)
        .into_iter()
        .find(|(tag, _)| tag == language_tag)
        .map(|(_, code)| code)
        .ok_or_else(|| GatewayError::BlockNotFound(language_tag.to_string()))
}

/// First non-blank line parsed as a JSON array of strings; empty when it is
/// not one (tolerant mode — malformed tags are logged, never fatal).
pub fn extract_repair_tags(text: &str) -> Vec<String> {
    let Some(first) = text.lines().find(|l| !l.trim().is_empty()) else {
        return Vec::new();
    };
    match serde_json::from_str::<Vec<String>>(first.trim()) {
        Ok(tags) => tags,
        Err(_) => {
            if first.trim_start().starts_with('[') {
                log::debug!("malformed repair-tag line: {first:?}");
            }
            Vec::new()
        }
    }
}

/// Case-insensitive match of the first alphabetic token against yes/no.
/// Leading punctuation and markdown are skipped.
pub fn parse_verdict(text: &str) -> Verdict {
    let first_word: String = text
        .chars()
        .skip_while(|c| !c.is_alphabetic())
        .take_while(|c| c.is_alphabetic())
        .collect();
    match first_word.to_ascii_lowercase().as_str() {
        "yes" => Verdict::Yes,
        "no" => Verdict::No,
        _ => Verdict::Unparseable,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extract_simple_block() {
        assert_eq!(extract_code_block("```cpp\nint x;\n```", "cpp").unwrap(), "int x;");
    }

    #[test]
    fn missing_fence_is_error() {
        let reply = "```cuda\nk<<<1,1>>>();\n```";
        assert!(matches!(
            extract_code_block(reply, "cpp"),
            Err(GatewayError::BlockNotFound(tag)) if tag == "cpp"
        ));
    }

    #[test]
    fn tags_line_then_fence() {
        let reply = "[\"fix-index\"]\n```cuda\nint k;\n```";
        assert_eq!(extract_repair_tags(reply), vec!["fix-index"]);
        assert_eq!(extract_code_block(reply, "cuda").unwrap(), "int k;");
    }

    #[test]
    fn prose_then_tags_then_fence() {
        let reply = "Here is the fix.\n[\"sync\",\"bounds\"]\n```cuda\nx();\n```";
        // prose first means the tags line is not the first non-blank line
        assert_eq!(extract_repair_tags(reply), Vec::<String>::new());
        assert_eq!(extract_code_block(reply, "cuda").unwrap(), "x();");
    }

    #[test]
    fn tags_absent_when_reply_starts_with_fence() {
        let reply = "```cuda\nx();\n```";
        assert!(extract_repair_tags(reply).is_empty());
    }

    #[test]
    fn two_tags() {
        assert_eq!(
            extract_repair_tags("[\"sync\",\"bounds\"]\nrest"),
            vec!["sync", "bounds"]
        );
    }

    #[test]
    fn verdicts() {
        assert_eq!(parse_verdict("Yes"), Verdict::Yes);
        assert_eq!(parse_verdict("no, because…"), Verdict::No);
        assert_eq!(parse_verdict("It depends"), Verdict::Unparseable);
        assert_eq!(parse_verdict("**No.**"), Verdict::No);
        assert_eq!(parse_verdict("  \"YES\""), Verdict::Yes);
    }

    #[test]
    fn fence_roundtrip_identity() {
        let code = "int main() {\n  return 0;\n}";
        let wrapped = format!("```cpp\n{code}\n```");
        assert_eq!(extract_code_block(&wrapped, "cpp").unwrap(), code);
    }
}
