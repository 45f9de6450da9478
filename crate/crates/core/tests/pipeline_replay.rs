//! End-to-end pipeline runs against a scripted replay backend and the host
//! C++ compiler. The target toolchain is remapped to `g++ -x c++` so both
//! sides of a direction compile on a CPU-only host.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use dialogue_forge_core::corpus::{SourceLanguage, SourceUnit};
use dialogue_forge_core::gateway::{
    CompletionBackend, GatewayError, LlmGateway, ReplayBackend, TemplateCatalog, WireMessage,
};
use dialogue_forge_core::pipeline::{run_sample, PipelineConfig, SampleStatus, Stage};
use dialogue_forge_core::sandbox::{Sandbox, SandboxConfig};

struct CountingBackend {
    inner: ReplayBackend,
    calls: AtomicUsize,
}

impl CompletionBackend for CountingBackend {
    fn complete(&self, messages: &[WireMessage], prompt: &str) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(messages, prompt)
    }
}

fn gateway(entries: &[(String, String)]) -> LlmGateway {
    let mut backend = ReplayBackend::new();
    for (prompt, reply) in entries {
        backend.insert_prompt(prompt, reply.clone());
    }
    LlmGateway::new(TemplateCatalog::builtin(), Arc::new(backend), 1)
}

fn counting_gateway(entries: &[(String, String)]) -> (LlmGateway, Arc<CountingBackend>) {
    let mut inner = ReplayBackend::new();
    for (prompt, reply) in entries {
        inner.insert_prompt(prompt, reply.clone());
    }
    let backend = Arc::new(CountingBackend { inner, calls: AtomicUsize::new(0) });
    (LlmGateway::new(TemplateCatalog::builtin(), Arc::clone(&backend) as Arc<dyn CompletionBackend>, 1), backend)
}

/// Sandbox where every configured language compiles with host g++. The fake
/// fortran compiler is a wrapper script so the availability probe (which
/// feeds it real Fortran) still passes.
fn host_sandbox(tmp: &tempfile::TempDir) -> Sandbox {
    let mut config = SandboxConfig::with_defaults(tmp.path().to_path_buf());
    let cuda = config.toolchains.get_mut(&SourceLanguage::Cuda).unwrap();
    cuda.compile_argv_template =
        ["g++", "-x", "c++", "{src}", "-o", "{out}"].map(String::from).to_vec();

    let script = tmp.path().join("fake-fc.sh");
    std::fs::write(
        &script,
        "#!/bin/sh\nsrc=\"$1\"; out=\"$2\"\nif grep -q '^program p$' \"$src\"; then\n  printf 'int main(){return 0;}\\n' > \"$src.cpp\"; src=\"$src.cpp\"\nfi\nexec g++ -x c++ \"$src\" -o \"$out\"\n",
    )
    .unwrap();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();
    }
    let fortran = config.toolchains.get_mut(&SourceLanguage::Fortran).unwrap();
    fortran.compile_argv_template =
        vec![script.to_string_lossy().into_owned(), "{src}".into(), "{out}".into()];
    Sandbox::new(config)
}

fn has_gxx() -> bool {
    std::process::Command::new("g++")
        .arg("--version")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn fenced(tag: &str, code: &str) -> String {
    format!("[\"fix\"]\n```{tag}\n{code}\n```")
}

/// Feedback the pipeline produces for a clean-compiling program that exits
/// with `code` printing nothing.
fn run_fail_feedback(code: i32) -> String {
    format!("Run failed with exit code {code}.\nstdout:\n\nstderr:\n")
}

const UNIT_CODE: &str = "int add(int a, int b) { return a + b; }";
const BAD1: &str = "int main(){return 1;}";
const BAD2: &str = "int main(){return 2;}";
const BAD_TGT: &str = "int main(){return 3;}";
const GOOD_SRC: &str = "#include <cstdio>\nint main(){ printf(\"RESULT_OK checksum=7\\n\"); return 0; }";
const GOOD_TGT: &str = "#include <cstdio>\nint main(){ printf(\"RESULT_OK checksum=7\\n\"); return 0; }\n// device";

fn render(gw: &LlmGateway, template: &str, bindings: &[(&str, &str)]) -> String {
    gw.render(template, bindings).unwrap()
}

/// Script: 2 failed source refinements, 1 failed target refinement, then a
/// matching duo run.
fn two_plus_one_script(gw: &LlmGateway) -> Vec<(String, String)> {
    vec![
        (render(gw, "spl_test_request_cpp", &[("Code", UNIT_CODE)]), fenced("cpp", BAD1)),
        (
            render(gw, "refine_repair", &[("language", "cpp"), ("code", BAD1), ("feedback", &run_fail_feedback(1))]),
            fenced("cpp", BAD2),
        ),
        (
            render(gw, "refine_repair", &[("language", "cpp"), ("code", BAD2), ("feedback", &run_fail_feedback(2))]),
            fenced("cpp", GOOD_SRC),
        ),
        (render(gw, "translate_cpp_to_cuda", &[("Code", GOOD_SRC)]), fenced("cuda", BAD_TGT)),
        (
            render(gw, "refine_repair", &[("language", "cuda"), ("code", BAD_TGT), ("feedback", &run_fail_feedback(3))]),
            fenced("cuda", GOOD_TGT),
        ),
    ]
}

#[test]
fn accepted_after_two_source_and_one_target_round() {
    if !has_gxx() {
        eprintln!("skipping: no host C++ compiler");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let sandbox = host_sandbox(&tmp);
    let probe = gateway(&[]);
    let gw = gateway(&two_plus_one_script(&probe));
    let config = PipelineConfig::for_direction(SourceLanguage::Cpp, SourceLanguage::Cuda).unwrap();
    let unit = SourceUnit::new("sample_a", 0, SourceLanguage::Cpp, UNIT_CODE.to_string());

    let result = run_sample(&unit, &config, &gw, &sandbox);
    assert_eq!(result.status, SampleStatus::Accepted, "{:?}", result.rounds_used);
    assert_eq!(result.rounds_used.get(&Stage::SplRefine), Some(&2));
    assert_eq!(result.rounds_used.get(&Stage::TgtRefine), Some(&1));
    assert_eq!(result.rounds_used.get(&Stage::DuoVerify), Some(&0));
    assert_eq!(result.dialogue.turns.len(), result.expected_turn_count());
    assert_eq!(result.dialogue.turns.len(), 5);
    let (src, tgt) = result.verified_pair.as_ref().unwrap();
    assert_eq!(src, GOOD_SRC);
    assert_eq!(tgt, GOOD_TGT);
}

#[test]
fn replay_runs_are_byte_identical() {
    if !has_gxx() {
        eprintln!("skipping: no host C++ compiler");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let sandbox = host_sandbox(&tmp);
    let probe = gateway(&[]);
    let gw = gateway(&two_plus_one_script(&probe));
    let config = PipelineConfig::for_direction(SourceLanguage::Cpp, SourceLanguage::Cuda).unwrap();
    let unit = SourceUnit::new("sample_b", 0, SourceLanguage::Cpp, UNIT_CODE.to_string());

    let first = serde_json::to_string(&run_sample(&unit, &config, &gw, &sandbox)).unwrap();
    let second = serde_json::to_string(&run_sample(&unit, &config, &gw, &sandbox)).unwrap();
    assert_eq!(first, second);
}

#[test]
fn refinement_cap_stops_at_seven_rounds() {
    if !has_gxx() {
        eprintln!("skipping: no host C++ compiler");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let sandbox = host_sandbox(&tmp);
    let probe = gateway(&[]);
    // the repair reply always returns the same failing program, so every
    // refinement round re-issues one of two prompts
    let script = vec![
        (render(&probe, "spl_test_request_cpp", &[("Code", UNIT_CODE)]), fenced("cpp", BAD1)),
        (
            render(&probe, "refine_repair", &[("language", "cpp"), ("code", BAD1), ("feedback", &run_fail_feedback(1))]),
            fenced("cpp", BAD1),
        ),
    ];
    let (gw, backend) = counting_gateway(&script);
    let config = PipelineConfig::for_direction(SourceLanguage::Cpp, SourceLanguage::Cuda).unwrap();
    let unit = SourceUnit::new("sample_c", 0, SourceLanguage::Cpp, UNIT_CODE.to_string());

    let result = run_sample(&unit, &config, &gw, &sandbox);
    assert_eq!(result.status, SampleStatus::Rejected);
    assert_eq!(result.failure_stage, Some(Stage::SplRefine));
    assert_eq!(result.rounds_used.get(&Stage::SplRefine), Some(&7));
    // 1 generation exchange + exactly 7 repair exchanges; round 8 never happens
    assert_eq!(backend.calls.load(Ordering::SeqCst), 8);
    assert_eq!(result.dialogue.turns.len(), 8);
    assert!(!result.dialogue.accepted);
}

#[test]
fn duo_mismatch_rejects_and_keeps_dialogue() {
    if !has_gxx() {
        eprintln!("skipping: no host C++ compiler");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let sandbox = host_sandbox(&tmp);
    let probe = gateway(&[]);
    let wrong_tgt = "#include <cstdio>\nint main(){ printf(\"RESULT_OK checksum=8\\n\"); return 0; }";
    let wrong_tgt2 = "#include <cstdio>\nint main(){ printf(\"RESULT_OK checksum=9\\n\"); return 0; }";
    let duo_prompt = render(
        &probe,
        "duo_align_scaffold",
        &[("target_line", "RESULT_OK checksum=7"), ("cpp_code", GOOD_SRC), ("cuda_code", wrong_tgt)],
    );
    let script = vec![
        (render(&probe, "spl_test_request_cpp", &[("Code", UNIT_CODE)]), fenced("cpp", GOOD_SRC)),
        (render(&probe, "translate_cpp_to_cuda", &[("Code", GOOD_SRC)]), fenced("cuda", wrong_tgt)),
        (duo_prompt, fenced("cuda", wrong_tgt2)),
    ];
    let gw = gateway(&script);
    let config = PipelineConfig::for_direction(SourceLanguage::Cpp, SourceLanguage::Cuda).unwrap();
    let unit = SourceUnit::new("sample_d", 0, SourceLanguage::Cpp, UNIT_CODE.to_string());

    let result = run_sample(&unit, &config, &gw, &sandbox);
    assert_eq!(result.status, SampleStatus::Rejected);
    assert_eq!(result.failure_stage, Some(Stage::DuoVerify));
    assert_eq!(result.rounds_used.get(&Stage::DuoVerify), Some(&1));
    // rejected dialogues are recorded with their full exchange history
    assert_eq!(result.dialogue.turns.len(), 3);
    assert!(result.verified_pair.is_none());
}

#[test]
fn full_stdout_direction_accepts_matching_outputs() {
    if !has_gxx() {
        eprintln!("skipping: no host C++ compiler");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let sandbox = host_sandbox(&tmp);
    let probe = gateway(&[]);
    // fortran side is remapped to g++ in this sandbox, so the scripted
    // "fortran" programs are C++ sources exercising the full_stdout protocol
    let src_prog = "#include <cstdio>\nint main(){ printf(\"a 1\\nb 2\\n\"); return 0; }";
    let tgt_prog = "#include <cstdio>\nint main(){ printf(\"a 1\\nb 2\\n\"); return 0; }\n// target";
    let unit_code = "subroutine-ish placeholder";
    let script = vec![
        (render(&probe, "spl_test_request_fortran", &[("Code", unit_code)]), fenced("fortran", src_prog)),
        (render(&probe, "translate_fortran_to_cpp", &[("Code", src_prog)]), fenced("cpp", tgt_prog)),
    ];
    let gw = gateway(&script);
    let config = PipelineConfig::for_direction(SourceLanguage::Fortran, SourceLanguage::Cpp).unwrap();
    assert_eq!(config.duo_mode, dialogue_forge_core::sandbox::DuoMode::FullStdout);
    let unit = SourceUnit::new("sample_e", 0, SourceLanguage::Fortran, unit_code.to_string());

    let result = run_sample(&unit, &config, &gw, &sandbox);
    assert_eq!(result.status, SampleStatus::Accepted, "{:?}", result.rounds_used);
    assert_eq!(result.dialogue.turns.len(), 2);
}

#[test]
fn compile_skip_marks_target_untested() {
    if !has_gxx() {
        eprintln!("skipping: no host C++ compiler");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    // default toolchains: cuda needs nvcc, which this host lacks
    let mut config = SandboxConfig::with_defaults(tmp.path().to_path_buf());
    config.compile_skip = true;
    let sandbox = Sandbox::new(config);
    if sandbox.is_available(SourceLanguage::Cuda) {
        eprintln!("skipping: host unexpectedly has nvcc");
        return;
    }
    let probe = gateway(&[]);
    let tgt = "__global__ void k(){}\nint main(){ return 0; }";
    let script = vec![
        (render(&probe, "spl_test_request_cpp", &[("Code", UNIT_CODE)]), fenced("cpp", GOOD_SRC)),
        (render(&probe, "translate_cpp_to_cuda", &[("Code", GOOD_SRC)]), fenced("cuda", tgt)),
    ];
    let gw = gateway(&script);
    let pipeline = PipelineConfig::for_direction(SourceLanguage::Cpp, SourceLanguage::Cuda).unwrap();
    let unit = SourceUnit::new("sample_f", 0, SourceLanguage::Cpp, UNIT_CODE.to_string());

    let result = run_sample(&unit, &pipeline, &gw, &sandbox);
    assert_eq!(result.status, SampleStatus::Accepted);
    assert!(result.annotations.iter().any(|a| a.contains("untested")));
    assert_eq!(result.rounds_used.get(&Stage::TgtRefine), Some(&0));
}
