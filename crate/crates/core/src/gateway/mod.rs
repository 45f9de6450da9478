//! LLM gateway: template rendering, dialogue memory, pluggable completion
//! backends (live HTTP or deterministic replay), and reply parsing.

mod backend;
mod memory;
mod parse;
mod template;

pub use backend::{
    prompt_digest, wire_role, BackendConfig, BackendKind, CompletionBackend, FlakyBackend,
    LiveBackend, ReplayBackend, WireMessage, API_KEY_ENV,
};
pub use memory::{ChatTurn, DialogueMemory, Role};
pub use parse::{
    all_code_blocks, extract_code_block, extract_repair_tags, parse_reply, parse_verdict,
    ParsedReply, Verdict,
};
pub use template::{render_str, TemplateCatalog};

use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("template not found: {0}")]
    TemplateNotFound(String),
    #[error("unbound placeholder: {0}")]
    MissingBinding(String),
    #[error("backend unavailable after retries: {0}")]
    BackendUnavailable(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("replay fixture has no entry for digest {digest}")]
    ReplayMiss { digest: String },
    #[error("no ```{0} fenced block in reply")]
    BlockNotFound(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("template io: {0}")]
    TemplateIo(std::io::Error),
    #[error("fixture io: {0}")]
    FixtureIo(std::io::Error),
}

/// Renders prompts and drives a completion backend. Shareable across
/// workers; each in-flight sample owns its own `DialogueMemory`.
pub struct LlmGateway {
    catalog: TemplateCatalog,
    backend: Arc<dyn CompletionBackend>,
    max_retries: u32,
    /// Base backoff; doubled per retry. Kept short in tests.
    pub backoff: Duration,
}

impl LlmGateway {
    pub fn new(catalog: TemplateCatalog, backend: Arc<dyn CompletionBackend>, max_retries: u32) -> Self {
        LlmGateway { catalog, backend, max_retries, backoff: Duration::from_millis(200) }
    }

    pub fn replay_from_fixture(path: &std::path::Path) -> Result<Self, GatewayError> {
        let backend = ReplayBackend::load(path)?;
        Ok(LlmGateway::new(TemplateCatalog::builtin(), Arc::new(backend), 3))
    }

    pub fn from_config(config: &BackendConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let backend: Arc<dyn CompletionBackend> = match config.kind {
            BackendKind::Replay => {
                let path = std::path::Path::new(config.fixture.as_deref().expect("validated"));
                Arc::new(ReplayBackend::load(path)?)
            }
            BackendKind::Live => Arc::new(LiveBackend::new(config)?),
        };
        Ok(LlmGateway::new(TemplateCatalog::builtin(), backend, config.max_retries))
    }

    pub fn with_templates(mut self, catalog: TemplateCatalog) -> Self {
        self.catalog = catalog;
        self
    }

    pub fn render(&self, template_id: &str, bindings: &[(&str, &str)]) -> Result<String, GatewayError> {
        self.catalog.render(template_id, bindings)
    }

    /// One Questioner→Solver exchange: appends the questioner turn, calls the
    /// backend with the rendered memory, appends the solver reply. Transport
    /// failures retry with exponential backoff up to max_retries.
    pub fn complete(
        &self,
        memory: &mut DialogueMemory,
        prompt: &str,
        stage_tag: &str,
    ) -> Result<String, GatewayError> {
        memory.push(Role::Questioner, prompt, stage_tag);
        let wire = backend::memory_to_wire(&memory.rendered());
        match self.call_with_retries(&wire, prompt) {
            Ok(reply) => {
                memory.push(Role::Solver, reply.clone(), stage_tag);
                Ok(reply)
            }
            Err(e) => {
                memory.pop();
                Err(e)
            }
        }
    }

    /// Single-shot completion with no memory (preprocessing checks).
    pub fn complete_stateless(&self, prompt: &str) -> Result<String, GatewayError> {
        let wire = vec![WireMessage { role: "user".to_string(), content: prompt.to_string() }];
        self.call_with_retries(&wire, prompt)
    }

    fn call_with_retries(&self, wire: &[WireMessage], prompt: &str) -> Result<String, GatewayError> {
        let mut attempt = 0u32;
        loop {
            match self.backend.complete(wire, prompt) {
                Ok(reply) => return Ok(reply),
                Err(GatewayError::Transport(msg)) => {
                    if attempt >= self.max_retries {
                        return Err(GatewayError::BackendUnavailable(msg));
                    }
                    let delay = self.backoff * 2u32.saturating_pow(attempt);
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(other) => return Err(other),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn replay_gateway(entries: &[(&str, &str)]) -> LlmGateway {
        let mut backend = ReplayBackend::new();
        for (prompt, reply) in entries {
            backend.insert_prompt(prompt, *reply);
        }
        let mut gw = LlmGateway::new(TemplateCatalog::builtin(), Arc::new(backend), 3);
        gw.backoff = Duration::from_millis(1);
        gw
    }

    #[test]
    fn replay_completion_grows_memory() {
        let gw = replay_gateway(&[("P", "ok")]);
        let mut mem = DialogueMemory::new(10_000);
        let reply = gw.complete(&mut mem, "P", "test").unwrap();
        assert_eq!(reply, "ok");
        assert_eq!(mem.len(), 2);
    }

    #[test]
    fn replay_miss_names_digest() {
        let gw = replay_gateway(&[]);
        let mut mem = DialogueMemory::new(10_000);
        match gw.complete(&mut mem, "unknown prompt", "test") {
            Err(GatewayError::ReplayMiss { digest }) => {
                assert_eq!(digest, prompt_digest("unknown prompt"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn retries_then_success() {
        let mut inner = ReplayBackend::new();
        inner.insert_prompt("P", "ok");
        let backend = FlakyBackend::new(inner, 2);
        let mut gw = LlmGateway::new(TemplateCatalog::builtin(), Arc::new(backend), 3);
        gw.backoff = Duration::from_millis(1);
        let mut mem = DialogueMemory::new(10_000);
        assert_eq!(gw.complete(&mut mem, "P", "t").unwrap(), "ok");
    }

    #[test]
    fn retries_exhausted() {
        let inner = ReplayBackend::new();
        let backend = FlakyBackend::new(inner, 10);
        let mut gw = LlmGateway::new(TemplateCatalog::builtin(), Arc::new(backend), 2);
        gw.backoff = Duration::from_millis(1);
        let mut mem = DialogueMemory::new(10_000);
        assert!(matches!(
            gw.complete(&mut mem, "P", "t"),
            Err(GatewayError::BackendUnavailable(_))
        ));
    }

    #[test]
    fn digest_ignores_whitespace_layout() {
        assert_eq!(prompt_digest("a  b\n c"), prompt_digest("a b c"));
        assert_ne!(prompt_digest("a b"), prompt_digest("a c"));
    }

    #[test]
    fn replay_is_deterministic() {
        let gw = replay_gateway(&[("P one", "r1"), ("P two", "r2")]);
        for _ in 0..2 {
            let mut mem = DialogueMemory::new(10_000);
            let a = gw.complete(&mut mem, "P one", "t").unwrap();
            let b = gw.complete(&mut mem, "P two", "t").unwrap();
            assert_eq!((a.as_str(), b.as_str()), ("r1", "r2"));
        }
    }
}
