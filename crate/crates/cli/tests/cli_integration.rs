//! Black-box tests of the binary: exit codes and file-level behavior.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Output;

use dialogue_forge_core::corpus::SourceLanguage;
use dialogue_forge_core::store::{read_store, write_store, Dialogue, DialogueTurn};

fn bin() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_dialogue-forge"))
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn has_gxx() -> bool {
    std::process::Command::new("g++")
        .arg("--version")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn dialogue(id: &str, origin: u64, turns: usize) -> Dialogue {
    Dialogue {
        id: id.to_string(),
        origin_index: origin,
        direction: (SourceLanguage::Cpp, SourceLanguage::Cuda),
        turns: (0..turns)
            .map(|i| DialogueTurn { question: format!("q{i}"), solution: format!("s{i}") })
            .collect(),
        accepted: true,
        rounds_used: BTreeMap::new(),
        failure_stage: None,
        final_source: Some("int main(){}".into()),
        final_target: Some("int main(){}".into()),
    }
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn invalid_config_exits_2_and_lists_every_violation() {
    let tmp = tempfile::tempdir().unwrap();
    // three independent problems: bad direction, missing corpus file,
    // zero workers
    let config = write_config(
        tmp.path(),
        r#"direction = "cpp:rust"
corpus = "/nonexistent/corpus.jsonl"
out = "/tmp/out"
workers = 0
"#,
    );
    let output = bin().arg("--config").arg(&config).arg("generate").output().unwrap();
    assert_eq!(output.status.code(), Some(2), "stderr: {}", stderr_of(&output));
    let err = stderr_of(&output);
    assert!(err.contains("unknown target language"), "missing direction violation: {err}");
    assert!(err.contains("corpus"), "missing corpus violation: {err}");
    assert!(err.contains("workers"), "missing workers violation: {err}");
    assert!(err.contains("backend"), "missing backend violation: {err}");
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "direction = \"cpp:cuda\"\ntypo_field = 1\n");
    let output = bin().arg("--config").arg(&config).arg("generate").output().unwrap();
    assert_eq!(output.status.code(), Some(2), "stderr: {}", stderr_of(&output));
}

#[test]
fn missing_toolchain_exits_3_without_compile_skip() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus.jsonl");
    std::fs::write(&corpus, "{\"index\":0,\"language\":\"cpp\",\"code\":\"int f();\"}\n").unwrap();
    let fixture = tmp.path().join("fixture.jsonl");
    std::fs::write(&fixture, "").unwrap();
    let config = write_config(
        tmp.path(),
        &format!(
            r#"direction = "cpp:cuda"
corpus = "{}"
out = "{}"

[sandbox.toolchains.cpp]
compile_argv = ["/nonexistent/compiler-binary", "{{src}}", "-o", "{{out}}"]
"#,
            corpus.display(),
            tmp.path().join("out").display(),
        ),
    );
    let output = bin()
        .arg("--config")
        .arg(&config)
        .args(["generate", "--replay"])
        .arg(&fixture)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3), "stderr: {}", stderr_of(&output));

    // with --compile-skip the same setup must proceed past the probe
    let output = bin()
        .arg("--config")
        .arg(&config)
        .args(["generate", "--compile-skip", "--replay"])
        .arg(&fixture)
        .output()
        .unwrap();
    assert_ne!(output.status.code(), Some(3), "stderr: {}", stderr_of(&output));
}

#[test]
fn export_writes_every_format_and_respects_ranges() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("dialogues.jsonl");
    let dialogues: Vec<Dialogue> = (0..6).map(|i| dialogue(&format!("d{i}"), i, 2)).collect();
    write_store(&dialogues, &store).unwrap();

    let out = tmp.path().join("exports");
    for format in ["code-pair", "dialogue", "qs-pair"] {
        let output = bin()
            .args(["export", "--store"])
            .arg(&store)
            .args(["--format", format, "--ranges", "train=0:4,test=4:6", "--out"])
            .arg(&out)
            .output()
            .unwrap();
        assert_eq!(output.status.code(), Some(0), "stderr: {}", stderr_of(&output));
    }
    for split in ["train", "test"] {
        for stem in ["code_pairs", "dialogues", "qs_pairs"] {
            assert!(out.join(format!("{stem}.{split}.jsonl")).exists(), "{stem}.{split}");
        }
    }
    let train: Vec<Dialogue> = read_store(&out.join("dialogues.train.jsonl")).unwrap();
    let test: Vec<Dialogue> = read_store(&out.join("dialogues.test.jsonl")).unwrap();
    assert_eq!(train.len(), 4);
    assert_eq!(test.len(), 2);
}

#[test]
fn export_rejects_bad_ratio_sum() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("dialogues.jsonl");
    write_store(&vec![dialogue("d0", 0, 1)], &store).unwrap();
    let output = bin()
        .args(["export", "--store"])
        .arg(&store)
        .args(["--format", "dialogue", "--ratios", "train=0.5,test=0.2", "--out"])
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "stderr: {}", stderr_of(&output));
}

#[test]
fn report_renders_table_from_records() {
    let tmp = tempfile::tempdir().unwrap();
    let records = tmp.path().join("records.jsonl");
    let lines: Vec<String> = (0..4)
        .map(|i| {
            serde_json::json!({
                "sample_id": format!("s{i}"),
                "compiled": i < 3,
                "executed": i < 2,
                "unit_passed": i < 1,
                "rounds_to_compile": if i < 3 { Some(0) } else { None },
                "codebleu": null,
                "untested": false,
            })
            .to_string()
        })
        .collect();
    std::fs::write(&records, lines.join("\n")).unwrap();
    let csv = tmp.path().join("curve.csv");
    let output = bin()
        .args(["report", "--records"])
        .arg(&records)
        .arg("--csv")
        .arg(&csv)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "stderr: {}", stderr_of(&output));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("75.00"), "compile rate cell missing: {stdout}");
    assert!(stdout.contains("50.00"), "execute rate cell missing: {stdout}");
    assert!(stdout.contains("25.00"), "unit rate cell missing: {stdout}");
    assert!(csv.exists());
}

#[test]
fn probe_reports_toolchains_and_backend() {
    if !has_gxx() {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let fixture = tmp.path().join("fixture.jsonl");
    std::fs::write(&fixture, "").unwrap();
    let config = write_config(
        tmp.path(),
        &format!(
            r#"direction = "cpp:cuda"
corpus = "{corpus}"
out = "{out}"

[sandbox.toolchains.cuda]
compile_argv = ["g++", "-x", "c++", "{{src}}", "-o", "{{out}}"]
"#,
            corpus = {
                let p = tmp.path().join("corpus.jsonl");
                std::fs::write(&p, "{\"index\":0,\"language\":\"cpp\",\"code\":\"int f();\"}\n").unwrap();
                p.display().to_string()
            },
            out = tmp.path().join("out").display(),
        ),
    );
    let output = bin()
        .arg("--config")
        .arg(&config)
        .args(["probe", "--replay"])
        .arg(&fixture)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "stderr: {}", stderr_of(&output));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("cpp"), "probe table missing cpp row: {stdout}");
}
