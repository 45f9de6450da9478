//! Compiles and executes candidate programs in isolated working directories
//! with timeouts, and implements the duo-test output comparison protocols.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SourceLanguage;

/// Exit code reported for forcibly terminated processes.
pub const TIMEOUT_EXIT_CODE: i32 = -1001;

const DEFAULT_OUTPUT_CAP: usize = 1 << 20; // 1 MiB per stream

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("toolchain for {0} is unavailable")]
    ToolchainMissing(SourceLanguage),
    #[error("compile artifact missing at {0}")]
    ArtifactMissing(PathBuf),
    #[error("invalid toolchain template: {0}")]
    BadTemplate(String),
    #[error("sandbox io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Toolchain {
    pub language: SourceLanguage,
    /// argv with `{src}` and `{out}` placeholders, each exactly once.
    pub compile_argv_template: Vec<String>,
    #[serde(default = "default_compile_timeout")]
    pub compile_timeout_secs: u64,
    #[serde(default = "default_run_timeout")]
    pub run_timeout_secs: u64,
    /// Optional jail wrapper prepended to compile/run argv.
    #[serde(default)]
    pub wrapper: Vec<String>,
    #[serde(skip, default)]
    pub available: bool,
}

fn default_compile_timeout() -> u64 {
    30
}
fn default_run_timeout() -> u64 {
    10
}

impl Toolchain {
    pub fn default_for(language: SourceLanguage) -> Self {
        let argv = match language {
            SourceLanguage::Cpp => vec!["g++", "-fopenmp", "-O2", "{src}", "-o", "{out}"],
            SourceLanguage::Fortran => vec!["gfortran", "-O2", "{src}", "-o", "{out}"],
            SourceLanguage::Cuda => vec!["nvcc", "-O2", "{src}", "-o", "{out}"],
        };
        Toolchain {
            language,
            compile_argv_template: argv.into_iter().map(String::from).collect(),
            compile_timeout_secs: default_compile_timeout(),
            run_timeout_secs: default_run_timeout(),
            wrapper: Vec::new(),
            available: false,
        }
    }

    pub fn validate(&self) -> Result<(), SandboxError> {
        let count = |needle: &str| {
            self.compile_argv_template
                .iter()
                .filter(|a| a.contains(needle))
                .count()
        };
        if count("{src}") != 1 || count("{out}") != 1 {
            return Err(SandboxError::BadTemplate(
                "compile argv must contain {src} and {out} exactly once".into(),
            ));
        }
        Ok(())
    }

    fn compile_argv(&self, src: &Path, out: &Path) -> Vec<String> {
        let mut argv: Vec<String> = self.wrapper.clone();
        argv.extend(self.compile_argv_template.iter().map(|a| {
            a.replace("{src}", &src.to_string_lossy())
                .replace("{out}", &out.to_string_lossy())
        }));
        argv
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompileOutcome {
    pub success: bool,
    pub stderr: String,
    pub artifact_path: Option<PathBuf>,
    pub duration: Duration,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    pub timed_out: bool,
    pub duration: Duration,
    /// Process was killed by a signal (crash) rather than exiting.
    pub crashed: bool,
}

impl RunOutcome {
    /// Ran to completion: exited normally, neither timed out nor crashed.
    pub fn completed(&self) -> bool {
        !self.timed_out && !self.crashed
    }

    pub fn passed(&self) -> bool {
        self.completed() && self.exit_code == 0
    }
}

/// The `RESULT_OK checksum=<integer>` summary line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryLine {
    pub checksum: BigInt,
}

/// Parses the last matching summary line; flags extras as a warning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SummaryScan {
    pub summary: Option<SummaryLine>,
    pub multiple: bool,
}

pub fn parse_summary(stdout: &str) -> SummaryScan {
    let mut found: Vec<SummaryLine> = Vec::new();
    for line in stdout.lines() {
        let line = line.trim_end();
        let Some(rest) = line.strip_prefix("RESULT_OK checksum=") else { continue };
        if rest.is_empty() {
            continue;
        }
        let Ok(checksum) = rest.parse::<BigInt>() else { continue };
        found.push(SummaryLine { checksum });
    }
    let multiple = found.len() > 1;
    if multiple {
        log::warn!("MultipleSummaries: {} summary lines in one output", found.len());
    }
    SummaryScan { summary: found.pop(), multiple }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DuoMode {
    SummaryLine,
    FullStdout,
}

/// Duo-test comparison. Symmetric in both modes.
pub fn duo_compare(source_run: &RunOutcome, target_run: &RunOutcome, mode: DuoMode) -> bool {
    match mode {
        DuoMode::SummaryLine => {
            let a = parse_summary(&source_run.stdout).summary;
            let b = parse_summary(&target_run.stdout).summary;
            matches!((a, b), (Some(x), Some(y)) if x == y)
        }
        DuoMode::FullStdout => normalize_stdout(&source_run.stdout) == normalize_stdout(&target_run.stdout),
    }
}

fn normalize_stdout(s: &str) -> String {
    let mut out: String = s.lines().map(|l| format!("{}\n", l.trim_end())).collect();
    while out.ends_with('\n') {
        out.pop();
    }
    out
}

struct CapturedProcess {
    exit_code: i32,
    timed_out: bool,
    crashed: bool,
    stdout: String,
    stderr: String,
    duration: Duration,
}

fn read_capped(mut pipe: impl Read + Send + 'static, cap: usize) -> std::thread::JoinHandle<String> {
    // reader threads drain pipes so a chatty child never blocks on a full pipe
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        let mut chunk = [0u8; 8192];
        loop {
            match pipe.read(&mut chunk) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    if buf.len() < cap {
                        let take = n.min(cap - buf.len());
                        buf.extend_from_slice(&chunk[..take]);
                    }
                    // keep draining past the cap
                }
            }
        }
        String::from_utf8_lossy(&buf).into_owned()
    })
}

fn wait_with_timeout(child: &mut Child, timeout: Duration) -> std::io::Result<(Option<i32>, bool, bool)> {
    let deadline = Instant::now() + timeout;
    loop {
        if let Some(status) = child.try_wait()? {
            let crashed = status.code().is_none();
            #[cfg(unix)]
            let code = status.code().unwrap_or_else(|| {
                use std::os::unix::process::ExitStatusExt;
                status.signal().map(|s| 128 + s).unwrap_or(-1)
            });
            #[cfg(not(unix))]
            let code = status.code().unwrap_or(-1);
            return Ok((Some(code), false, crashed));
        }
        if Instant::now() >= deadline {
            let _ = child.kill();
            let _ = child.wait();
            return Ok((Some(TIMEOUT_EXIT_CODE), true, false));
        }
        std::thread::sleep(Duration::from_millis(10));
    }
}

fn run_process(mut cmd: Command, timeout: Duration, output_cap: usize) -> std::io::Result<CapturedProcess> {
    let start = Instant::now();
    let mut child = cmd
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()?;
    let out_handle = read_capped(child.stdout.take().expect("piped"), output_cap);
    let err_handle = read_capped(child.stderr.take().expect("piped"), output_cap);
    let (code, timed_out, crashed) = wait_with_timeout(&mut child, timeout)?;
    let stdout = out_handle.join().unwrap_or_default();
    let stderr = err_handle.join().unwrap_or_default();
    Ok(CapturedProcess {
        exit_code: code.unwrap_or(-1),
        timed_out,
        crashed,
        stdout,
        stderr,
        duration: start.elapsed(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SandboxConfig {
    pub toolchains: BTreeMap<SourceLanguage, Toolchain>,
    pub scratch_root: PathBuf,
    #[serde(default = "default_output_cap")]
    pub output_cap_bytes: usize,
    /// CUDA stages on hosts without nvcc are marked untested, not failed.
    #[serde(default)]
    pub compile_skip: bool,
}

fn default_output_cap() -> usize {
    DEFAULT_OUTPUT_CAP
}

impl SandboxConfig {
    pub fn with_defaults(scratch_root: PathBuf) -> Self {
        let mut toolchains = BTreeMap::new();
        for lang in [SourceLanguage::Fortran, SourceLanguage::Cpp, SourceLanguage::Cuda] {
            toolchains.insert(lang, Toolchain::default_for(lang));
        }
        SandboxConfig { toolchains, scratch_root, output_cap_bytes: DEFAULT_OUTPUT_CAP, compile_skip: false }
    }
}

/// One compile/run host. Probe results are cached for the lifetime of the
/// run; a global semaphore caps concurrent subprocesses.
pub struct Sandbox {
    config: SandboxConfig,
    availability: Mutex<BTreeMap<SourceLanguage, bool>>,
    subprocess_gate: SubprocessGate,
}

struct SubprocessGate {
    slots: Mutex<usize>,
    cv: std::sync::Condvar,
}

impl SubprocessGate {
    fn new(cap: usize) -> Self {
        SubprocessGate { slots: Mutex::new(cap.max(1)), cv: std::sync::Condvar::new() }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut slots = self.slots.lock().unwrap();
        while *slots == 0 {
            slots = self.cv.wait(slots).unwrap();
        }
        *slots -= 1;
        GateGuard { gate: self }
    }
}

struct GateGuard<'a> {
    gate: &'a SubprocessGate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.gate.slots.lock().unwrap() += 1;
        self.gate.cv.notify_one();
    }
}

fn probe_program(language: SourceLanguage) -> &'static str {
    match language {
        SourceLanguage::Cpp => "int main() { return 0; }\n",
        SourceLanguage::Cuda => "int main() { return 0; }\n",
        SourceLanguage::Fortran => "program p\nend program p\n",
    }
}

impl Sandbox {
    pub fn new(config: SandboxConfig) -> Self {
        Self::with_subprocess_cap(config, 8)
    }

    pub fn with_subprocess_cap(config: SandboxConfig, cap: usize) -> Self {
        Sandbox { config, availability: Mutex::new(BTreeMap::new()), subprocess_gate: SubprocessGate::new(cap) }
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    pub fn compile_skip(&self) -> bool {
        self.config.compile_skip
    }

    /// Compiles a one-line probe per configured toolchain; results are cached
    /// so each language is probed at most once per run.
    pub fn probe_toolchains(&self) -> BTreeMap<SourceLanguage, bool> {
        let mut cache = self.availability.lock().unwrap();
        let langs: Vec<SourceLanguage> = self.config.toolchains.keys().copied().collect();
        for lang in langs {
            if cache.contains_key(&lang) {
                continue;
            }
            let ok = self.probe_one(lang).unwrap_or(false);
            cache.insert(lang, ok);
        }
        cache.clone()
    }

    pub fn is_available(&self, language: SourceLanguage) -> bool {
        if let Some(&ok) = self.availability.lock().unwrap().get(&language) {
            return ok;
        }
        self.probe_toolchains().get(&language).copied().unwrap_or(false)
    }

    fn probe_one(&self, language: SourceLanguage) -> Result<bool, SandboxError> {
        let toolchain = match self.config.toolchains.get(&language) {
            Some(t) => t.clone(),
            None => return Ok(false),
        };
        let workdir = self.workdir("probe", language.as_str(), 0)?;
        let mut probe = toolchain.clone();
        probe.available = true;
        let outcome = compile_in(probe_program(language), &probe, &workdir, self.config.output_cap_bytes, &self.subprocess_gate);
        let ok = matches!(outcome, Ok(o) if o.success);
        let _ = std::fs::remove_dir_all(&workdir);
        Ok(ok)
    }

    /// Fresh per-attempt working directory: `<scratch>/<sample>/<stage>/<attempt>/`.
    pub fn workdir(&self, sample_id: &str, stage: &str, attempt: u32) -> Result<PathBuf, SandboxError> {
        let dir = self
            .config
            .scratch_root
            .join(sanitize(sample_id))
            .join(sanitize(stage))
            .join(format!("attempt_{attempt}"));
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    pub fn compile(&self, code: &str, language: SourceLanguage, workdir: &Path) -> Result<CompileOutcome, SandboxError> {
        let toolchain = self
            .config
            .toolchains
            .get(&language)
            .ok_or(SandboxError::ToolchainMissing(language))?;
        if !self.is_available(language) {
            return Err(SandboxError::ToolchainMissing(language));
        }
        let mut tc = toolchain.clone();
        tc.available = true;
        compile_in(code, &tc, workdir, self.config.output_cap_bytes, &self.subprocess_gate)
    }

    pub fn execute(&self, outcome: &CompileOutcome, run_timeout: Duration) -> Result<RunOutcome, SandboxError> {
        assert!(outcome.success, "execute requires a successful compile");
        let artifact = outcome
            .artifact_path
            .as_ref()
            .filter(|p| p.exists())
            .ok_or_else(|| SandboxError::ArtifactMissing(outcome.artifact_path.clone().unwrap_or_default()))?;
        let mut cmd = Command::new(artifact);
        cmd.env_clear();
        // minimal environment allowlist
        for key in ["PATH", "LD_LIBRARY_PATH"] {
            if let Ok(val) = std::env::var(key) {
                cmd.env(key, val);
            }
        }
        if let Some(parent) = artifact.parent() {
            cmd.current_dir(parent);
        }
        let _guard = self.subprocess_gate.acquire();
        let cap = run_process(cmd, run_timeout, self.config.output_cap_bytes)?;
        Ok(RunOutcome {
            exit_code: cap.exit_code,
            stdout: cap.stdout,
            stderr: cap.stderr,
            timed_out: cap.timed_out,
            duration: cap.duration,
            crashed: cap.crashed,
        })
    }

    /// Convenience: compile then execute with the language's run timeout.
    pub fn compile_and_run(
        &self,
        code: &str,
        language: SourceLanguage,
        sample_id: &str,
        stage: &str,
        attempt: u32,
    ) -> Result<(CompileOutcome, Option<RunOutcome>), SandboxError> {
        let workdir = self.workdir(sample_id, stage, attempt)?;
        let compiled = self.compile(code, language, &workdir)?;
        let run = if compiled.success {
            let timeout = Duration::from_secs(
                self.config
                    .toolchains
                    .get(&language)
                    .map(|t| t.run_timeout_secs)
                    .unwrap_or(default_run_timeout()),
            );
            Some(self.execute(&compiled, timeout)?)
        } else {
            None
        };
        Ok((compiled, run))
    }

    /// Deletes a sample's scratch tree after result capture.
    pub fn cleanup_sample(&self, sample_id: &str) {
        let dir = self.config.scratch_root.join(sanitize(sample_id));
        let _ = std::fs::remove_dir_all(dir);
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn compile_in(
    code: &str,
    toolchain: &Toolchain,
    workdir: &Path,
    output_cap: usize,
    gate: &SubprocessGate,
) -> Result<CompileOutcome, SandboxError> {
    toolchain.validate()?;
    if !toolchain.available {
        return Err(SandboxError::ToolchainMissing(toolchain.language));
    }
    std::fs::create_dir_all(workdir)?;
    let src = workdir.join(format!("program.{}", toolchain.language.extension()));
    let out = workdir.join("program.bin");
    std::fs::write(&src, code)?;
    let argv = toolchain.compile_argv(&src, &out);
    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..]).current_dir(workdir);
    let _guard = gate.acquire();
    let cap = match run_process(cmd, Duration::from_secs(toolchain.compile_timeout_secs), output_cap) {
        Ok(cap) => cap,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(SandboxError::ToolchainMissing(toolchain.language));
        }
        Err(e) => return Err(e.into()),
    };
    let mut stderr = cap.stderr;
    if cap.timed_out {
        stderr.push_str("\nTIMEOUT: compile exceeded limit");
    }
    let success = !cap.timed_out && cap.exit_code == 0 && out.exists();
    Ok(CompileOutcome {
        success,
        stderr,
        artifact_path: success.then_some(out),
        duration: cap.duration,
    })
}
