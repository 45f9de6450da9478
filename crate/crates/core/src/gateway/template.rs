//! Prompt template catalog. Templates live in external text files keyed by
//! template_id; the built-in catalog is embedded so the crate works without a
//! template directory, and a directory override allows hot-editing.

use std::collections::HashMap;
use std::path::Path;

use super::GatewayError;

macro_rules! builtin {
    ($($id:literal),* $(,)?) => {
        &[$(($id, include_str!(concat!("../../data/templates/", $id, ".txt")))),*]
    };
}

const BUILTIN: &[(&str, &str)] = builtin!(
    "ask_translation",
    "concise_question",
    "continue_modify",
    "duo_align_scaffold",
    "duo_align_stdout",
    "duo_repair_computation",
    "duo_verdict",
    "final_pair",
    "modify_unit_test",
    "refine_repair",
    "repair_format",
    "reprompt_yes_no",
    "self_contained_check",
    "solver_init_tests",
    "spl_test_request_cpp",
    "spl_test_request_fortran",
    "strip_comments",
    "system_questioner",
    "translate_cpp_to_cuda",
    "translate_fortran_to_cpp",
    "unit_test_generation",
    "unit_test_note",
);

#[derive(Debug, Clone)]
pub struct TemplateCatalog {
    templates: HashMap<String, String>,
}

impl TemplateCatalog {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(id, body)| (id.to_string(), body.trim_end().to_string()))
            .collect();
        TemplateCatalog { templates }
    }

    /// Builtin catalog with every `<id>.txt` under `dir` layered on top.
    pub fn with_overrides(dir: &Path) -> Result<Self, GatewayError> {
        let mut cat = Self::builtin();
        for entry in std::fs::read_dir(dir).map_err(GatewayError::TemplateIo)? {
            let path = entry.map_err(GatewayError::TemplateIo)?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            let body = std::fs::read_to_string(&path).map_err(GatewayError::TemplateIo)?;
            cat.templates.insert(id.to_string(), body.trim_end().to_string());
        }
        Ok(cat)
    }

    pub fn render(&self, template_id: &str, bindings: &[(&str, &str)]) -> Result<String, GatewayError> {
        let body = self
            .templates
            .get(template_id)
            .ok_or_else(|| GatewayError::TemplateNotFound(template_id.to_string()))?;
        render_str(body, bindings)
    }

    pub fn contains(&self, template_id: &str) -> bool {
        self.templates.contains_key(template_id)
    }
}

/// Substitutes `{placeholder}` markers. `{{` and `}}` escape literal braces;
/// a brace not opening a well-formed `{identifier}` marker passes through.
pub fn render_str(body: &str, bindings: &[(&str, &str)]) -> Result<String, GatewayError> {
    let chars: Vec<char> = body.chars().collect();
    let mut out = String::with_capacity(body.len());
    let mut i = 0;
    while i < chars.len() {
        match chars[i] {
            '{' if chars.get(i + 1) == Some(&'{') => {
                out.push('{');
                i += 2;
            }
            '}' if chars.get(i + 1) == Some(&'}') => {
                out.push('}');
                i += 2;
            }
            '{' => {
                let start = i + 1;
                let mut j = start;
                if j < chars.len() && (chars[j].is_alphabetic() || chars[j] == '_') {
                    while j < chars.len() && (chars[j].is_alphanumeric() || chars[j] == '_') {
                        j += 1;
                    }
                }
                if j > start && chars.get(j) == Some(&'}') {
                    let name: String = chars[start..j].iter().collect();
                    match bindings.iter().find(|(k, _)| *k == name) {
                        Some((_, v)) => out.push_str(v),
                        None => return Err(GatewayError::MissingBinding(name)),
                    }
                    i = j + 1;
                } else {
                    out.push('{');
                    i += 1;
                }
            }
            c => {
                out.push(c);
                i += 1;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitution() {
        let cat = TemplateCatalog::builtin();
        let text = cat.render("strip_comments", &[("CPP_Code", "int x;")]).unwrap();
        assert!(text.contains("int x;"));
        assert!(!text.contains("{CPP_Code}"));
    }

    #[test]
    fn missing_binding_named() {
        let cat = TemplateCatalog::builtin();
        match cat.render("strip_comments", &[]) {
            Err(GatewayError::MissingBinding(name)) => assert_eq!(name, "CPP_Code"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_template() {
        let cat = TemplateCatalog::builtin();
        assert!(matches!(
            cat.render("nope", &[]),
            Err(GatewayError::TemplateNotFound(_))
        ));
    }

    #[test]
    fn duo_verdict_contains_both_results() {
        let cat = TemplateCatalog::builtin();
        let text = cat
            .render(
                "duo_verdict",
                &[("cpp_compile_result", "AAA"), ("cuda_compile_result", "BBB")],
            )
            .unwrap();
        assert!(text.contains("AAA"));
        assert!(text.contains("BBB"));
        assert!(text.contains("IDENTICAL final summary lines"));
    }

    #[test]
    fn brace_escapes_and_literals() {
        assert_eq!(render_str("a {{b}} c", &[]).unwrap(), "a {b} c");
        // bare braces that do not form a marker pass through
        assert_eq!(render_str("if (x) { y(); }", &[]).unwrap(), "if (x) { y(); }");
    }
}
