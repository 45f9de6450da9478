//! Run configuration: a single TOML file plus flag overrides. The whole
//! config is validated before any work starts and every violation is listed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dialogue_forge_core::corpus::{direction_supported, PreprocessConfig, SourceLanguage};
use dialogue_forge_core::gateway::{BackendConfig, BackendKind, API_KEY_ENV};
use dialogue_forge_core::pipeline::PipelineConfig;
use dialogue_forge_core::sandbox::{SandboxConfig, Toolchain};

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub direction: Option<String>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub range: Option<String>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub backend: Option<RawBackend>,
    /// Separate solver backend; defaults to the questioner backend.
    #[serde(default)]
    pub solver_backend: Option<RawBackend>,
    #[serde(default)]
    pub preprocess: RawPreprocess,
    #[serde(default)]
    pub pipeline: RawPipeline,
    #[serde(default)]
    pub sandbox: RawSandbox,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawBackend {
    pub kind: String,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub fixture: Option<PathBuf>,
    pub temperature: Option<f64>,
    pub max_retries: Option<u32>,
    pub request_timeout_secs: Option<u64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPreprocess {
    pub max_tokens: Option<usize>,
    pub strip_comments: Option<bool>,
    pub require_self_contained: Option<bool>,
    pub allowlist: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPipeline {
    pub max_refine_rounds: Option<u32>,
    pub memory_token_budget: Option<usize>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSandbox {
    pub scratch: Option<PathBuf>,
    pub compile_skip: Option<bool>,
    pub output_cap_bytes: Option<usize>,
    #[serde(default)]
    pub toolchains: BTreeMap<String, RawToolchain>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawToolchain {
    pub compile_argv: Vec<String>,
    pub compile_timeout_secs: Option<u64>,
    pub run_timeout_secs: Option<u64>,
    #[serde(default)]
    pub wrapper: Vec<String>,
}

impl RawConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("config parse error: {e}"))
    }
}

/// Validated, fully-resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub direction: (SourceLanguage, SourceLanguage),
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub range: Option<(u64, u64)>,
    pub seed: u64,
    pub backend: BackendConfig,
    pub solver_backend: Option<BackendConfig>,
    pub preprocess: PreprocessConfig,
    pub pipeline: PipelineConfig,
    pub sandbox: SandboxConfig,
}

/// Flag-level overrides applied on top of the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub direction: Option<String>,
    pub range: Option<String>,
    pub replay: Option<PathBuf>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub compile_skip: bool,
}

pub fn parse_direction(s: &str) -> Result<(SourceLanguage, SourceLanguage), String> {
    let (a, b) = s
        .split_once([':', '-'])
        .map(|(a, b)| (a, b.trim_start_matches('>')))
        .ok_or_else(|| format!("direction {s:?} must look like src:tgt"))?;
    let src = SourceLanguage::parse(a.trim()).ok_or_else(|| format!("unknown source language {a:?}"))?;
    let tgt = SourceLanguage::parse(b.trim()).ok_or_else(|| format!("unknown target language {b:?}"))?;
    if !direction_supported(src, tgt) {
        return Err(format!("unsupported direction {src}:{tgt} (supported: fortran:cpp, cpp:cuda)"));
    }
    Ok((src, tgt))
}

pub fn parse_range(s: &str) -> Result<(u64, u64), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("range {s:?} must look like A:B"))?;
    let start: u64 = a.trim().parse().map_err(|_| format!("bad range start {a:?}"))?;
    let end: u64 = b.trim().parse().map_err(|_| format!("bad range end {b:?}"))?;
    if start > end {
        return Err(format!("range {s:?} is inverted"));
    }
    Ok((start, end))
}

fn resolve_backend(raw: &RawBackend, violations: &mut Vec<String>, label: &str) -> Option<BackendConfig> {
    let kind = match raw.kind.as_str() {
        "live" => BackendKind::Live,
        "replay" => BackendKind::Replay,
        other => {
            violations.push(format!("{label}: unknown backend kind {other:?} (expected live or replay)"));
            return None;
        }
    };
    let config = BackendConfig {
        kind,
        endpoint: raw.endpoint.clone(),
        model_name: raw.model.clone().unwrap_or_else(|| "replay".to_string()),
        temperature: raw.temperature.unwrap_or(0.2),
        max_retries: raw.max_retries.unwrap_or(3),
        request_timeout_secs: raw.request_timeout_secs.unwrap_or(120),
        fixture: raw.fixture.as_ref().map(|p| p.to_string_lossy().into_owned()),
    };
    if let Err(e) = config.validate() {
        violations.push(format!("{label}: {e}"));
    }
    match kind {
        BackendKind::Live => {
            if std::env::var(API_KEY_ENV).is_err() {
                violations.push(format!("{label}: live backend requires the {API_KEY_ENV} environment variable"));
            }
            if raw.model.is_none() {
                violations.push(format!("{label}: live backend requires a model name"));
            }
        }
        BackendKind::Replay => {
            if let Some(f) = &raw.fixture {
                if !f.exists() {
                    violations.push(format!("{label}: replay fixture {} does not exist", f.display()));
                }
            }
        }
    }
    Some(config)
}

/// Resolves the raw config plus overrides, collecting *every* violation.
pub fn resolve(raw: &RawConfig, overrides: &Overrides) -> Result<RunConfig, Vec<String>> {
    let mut violations = Vec::new();

    let direction_str = overrides.direction.clone().or_else(|| raw.direction.clone());
    let direction = match direction_str {
        Some(s) => match parse_direction(&s) {
            Ok(d) => Some(d),
            Err(e) => {
                violations.push(e);
                None
            }
        },
        None => {
            violations.push("no translation direction given (--direction or `direction` in config)".into());
            None
        }
    };

    let corpus = match &raw.corpus {
        Some(p) => {
            if !p.exists() {
                violations.push(format!("corpus path {} does not exist", p.display()));
            }
            p.clone()
        }
        None => {
            violations.push("no corpus path given".into());
            PathBuf::new()
        }
    };

    let out = overrides
        .out
        .clone()
        .or_else(|| raw.out.clone())
        .unwrap_or_else(|| {
            violations.push("no output directory given (--out or `out` in config)".into());
            PathBuf::new()
        });

    let range_str = overrides.range.clone().or_else(|| raw.range.clone());
    let range = match range_str {
        Some(s) => match parse_range(&s) {
            Ok(r) => Some(r),
            Err(e) => {
                violations.push(e);
                None
            }
        },
        None => None,
    };

    // --replay overrides any configured backend with a replay backend
    let mut raw_backend = raw.backend.clone();
    if let Some(fixture) = &overrides.replay {
        raw_backend = Some(RawBackend {
            kind: "replay".into(),
            endpoint: None,
            model: None,
            fixture: Some(fixture.clone()),
            temperature: None,
            max_retries: None,
            request_timeout_secs: None,
        });
    }
    let backend = match &raw_backend {
        Some(b) => resolve_backend(b, &mut violations, "backend"),
        None => {
            violations.push("no backend configured ([backend] in config or --replay FIXTURE)".into());
            None
        }
    };
    let solver_backend = raw
        .solver_backend
        .as_ref()
        .and_then(|b| resolve_backend(b, &mut violations, "solver_backend"));

    let mut preprocess = direction
        .map(|(src, _)| PreprocessConfig::for_language(src))
        .unwrap_or_else(|| PreprocessConfig::for_language(SourceLanguage::Cpp));
    if let Some(mt) = raw.preprocess.max_tokens {
        if mt == 0 {
            violations.push("preprocess.max_tokens must be positive".into());
        }
        preprocess.max_tokens = mt;
    }
    if let Some(sc) = raw.preprocess.strip_comments {
        preprocess.strip_comments = sc;
    }
    if let Some(rsc) = raw.preprocess.require_self_contained {
        preprocess.require_self_contained = rsc;
    }
    if let Some(path) = &raw.preprocess.allowlist {
        match dialogue_forge_core::corpus::load_allowlist(path) {
            Ok(list) => preprocess.dependency_allowlist = list,
            Err(e) => violations.push(format!("preprocess.allowlist: {e}")),
        }
    }

    let workers = overrides.workers.or(raw.workers);
    if workers == Some(0) {
        violations.push("workers must be at least 1".into());
    }

    let pipeline = direction.and_then(|(src, tgt)| match PipelineConfig::for_direction(src, tgt) {
        Ok(mut p) => {
            if let Some(r) = raw.pipeline.max_refine_rounds {
                if r == 0 {
                    violations.push("pipeline.max_refine_rounds must be at least 1".into());
                }
                p.max_refine_rounds = r;
            }
            if let Some(b) = raw.pipeline.memory_token_budget {
                p.memory_token_budget = b;
            }
            if let Some(w) = workers.filter(|&w| w > 0) {
                p.worker_count = w;
            }
            Some(p)
        }
        Err(e) => {
            violations.push(e.to_string());
            None
        }
    });

    let scratch = raw
        .sandbox
        .scratch
        .clone()
        .unwrap_or_else(|| out.join("scratch"));
    let mut sandbox = SandboxConfig::with_defaults(scratch);
    sandbox.compile_skip = overrides.compile_skip || raw.sandbox.compile_skip.unwrap_or(false);
    if let Some(cap) = raw.sandbox.output_cap_bytes {
        sandbox.output_cap_bytes = cap;
    }
    for (lang_name, tc) in &raw.sandbox.toolchains {
        let Some(lang) = SourceLanguage::parse(lang_name) else {
            violations.push(format!("sandbox.toolchains: unknown language {lang_name:?}"));
            continue;
        };
        let toolchain = Toolchain {
            language: lang,
            compile_argv_template: tc.compile_argv.clone(),
            compile_timeout_secs: tc.compile_timeout_secs.unwrap_or(30),
            run_timeout_secs: tc.run_timeout_secs.unwrap_or(10),
            wrapper: tc.wrapper.clone(),
            available: false,
        };
        if let Err(e) = toolchain.validate() {
            violations.push(format!("sandbox.toolchains.{lang_name}: {e}"));
        }
        sandbox.toolchains.insert(lang, toolchain);
    }

    if !violations.is_empty() {
        return Err(violations);
    }
    Ok(RunConfig {
        direction: direction.expect("validated"),
        corpus,
        out,
        range,
        seed: raw.seed.unwrap_or(42),
        backend: backend.expect("validated"),
        solver_backend,
        preprocess,
        pipeline: pipeline.expect("validated"),
        sandbox,
    })
}
