//! End-to-end runs of the `keynav` binary against fixture files: exit
//! codes, emitted artifacts, and rerun determinism.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use keynav::backend::{FixtureBackend, FixtureCandidate, FixtureData};
use keynav::tensor::Matrix;

fn keynav_bin() -> &'static str {
    env!("CARGO_BIN_EXE_keynav")
}

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(keynav_bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_city_fixture(dir: &Path) -> PathBuf {
    let base = "Please show me some cities";
    let mut data = FixtureData::default();
    data.script_candidates(
        base,
        [" Paris", " P", " Madrid", " Quito", " Lima"]
            .iter()
            .enumerate()
            .map(|(i, text)| FixtureCandidate {
                text: text.to_string(),
                logprob: -(i as f64) * 0.3,
                id: Some(i as u32),
            })
            .collect(),
    );
    for (text, continuation) in [
        (" Paris", ""),
        (" P", "rague"),
        (" Madrid", ""),
        (" Quito", ""),
        (" Lima", ""),
    ] {
        data.script_greedy(&format!("{base}{text}"), continuation);
    }
    let path = dir.join("fixture.json");
    FixtureBackend::save(&data, &path).unwrap();
    path
}

fn write_city_tasks(dir: &Path) -> PathBuf {
    let path = dir.join("tasks.toml");
    std::fs::write(
        &path,
        r#"
[task]
category = "cities"
template = "Please show me some [CATEGORY]"
validator = { custom-list = ["Paris", "Prague", "Madrid", "Lima"] }
"#,
    )
    .unwrap();
    path
}

fn write_config(dir: &Path, fixture: &Path, tasks: &Path) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(
        &path,
        format!(
            r#"
seed = 0
output_dir = {out:?}

[backend]
kind = "fixture"
path = {fixture:?}

[paths]
tasks = {tasks:?}

[probe]
strategy = "vanilla"
n_query = 1
n_key = 5
"#,
            out = dir.join("out"),
            fixture = fixture,
            tasks = tasks,
        ),
    )
    .unwrap();
    path
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(current) = stack.pop() {
        for entry in std::fs::read_dir(&current).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(
                    path.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    files
}

#[test]
fn probe_fixture_end_to_end_and_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = write_city_fixture(dir.path());
    let tasks = write_city_tasks(dir.path());
    let config = write_config(dir.path(), &fixture, &tasks);

    let out = run(
        &["probe", "--config", config.to_str().unwrap()],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    let session_raw =
        std::fs::read_to_string(dir.path().join("out/sessions/cities--vanilla.ndjson")).unwrap();
    let path_lines: Vec<&str> = session_raw
        .lines()
        .filter(|l| l.contains("\"kind\":\"path\""))
        .collect();
    assert_eq!(path_lines.len(), 5, "vanilla 1x5 probes five paths");
    assert!(path_lines[0].contains("\" Paris\""));
    // " P" decodes to " Prague", which is in the allow list; " Quito" is not.
    assert!(session_raw.contains("\"correct\":{\"greedy\":\"correct\"}"));
    assert!(session_raw.contains("\"correct\":{\"greedy\":\"incorrect\"}"));

    let metrics = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert!(metrics.lines().next().unwrap().starts_with("# config_hash="));
    assert!(metrics.contains("category,strategy,MAP@50,PREC@50,n_paths,judge_model,seed"));
    assert!(metrics.contains("cities,vanilla,"));

    // Rerun: byte-identical outputs.
    let before = snapshot(&dir.path().join("out"));
    let again = run(
        &["probe", "--config", config.to_str().unwrap()],
        dir.path(),
    );
    assert!(again.status.success());
    let after = snapshot(&dir.path().join("out"));
    assert_eq!(before, after, "rerun must be byte-identical");
}

#[test]
fn config_validation_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(
        &config,
        r#"
[paths]
tasks = "/nonexistent/tasks.toml"
"#,
    )
    .unwrap();
    let out = run(&["probe", "--config", config.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));
}

#[test]
fn unreachable_backend_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = write_city_tasks(dir.path());
    let config = dir.path().join("config.toml");
    std::fs::write(
        &config,
        format!(
            r#"
output_dir = {out:?}

[backend]
kind = "http"
endpoint_url = "http://127.0.0.1:9"
model = "none"
retries = 0
timeout_secs = 2

[paths]
tasks = {tasks:?}

[probe]
strategy = "vanilla"
n_query = 1
n_key = 2
"#,
            out = dir.path().join("out"),
            tasks = tasks,
        ),
    )
    .unwrap();
    let out = run(&["probe", "--config", config.to_str().unwrap()], dir.path());
    assert_eq!(
        out.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn rerank_demo_prints_the_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = run(
        &["rerank-demo", "--out", out_dir.to_str().unwrap()],
        dir.path(),
    );
    assert!(out.status.success());
    let md = std::fs::read_to_string(out_dir.join("rerank_demo.md")).unwrap();
    // token 2 (rank 3): cluster 1, in-cluster rank 3, added 6, new rank 4.
    assert!(md.contains("| 3 | 2 | 1 | 3 | 6 | 4 |"), "demo table:\n{md}");
    // token 3 (rank 4): cluster 2, in-cluster rank 1, added 5, new rank 3.
    assert!(md.contains("| 4 | 3 | 2 | 1 | 5 | 3 |"));
}

#[test]
fn project_emits_a_coordinate_csv() {
    let dir = tempfile::tempdir().unwrap();
    let tensor = dir.path().join("keys.tensors");
    let vocab = dir.path().join("vocab.json");
    let matrix = Matrix {
        rows: 4,
        cols: 3,
        values: vec![
            1.0, 0.0, 0.0, //
            0.0, 2.0, 0.0, //
            -1.0, -1.0, 0.5, //
            0.5, 0.5, -0.5,
        ],
    };
    keynav::tensor::write_matrix_file(&tensor, "unembed", &matrix).unwrap();
    std::fs::write(&vocab, r#"["a", "b", "c", "d"]"#).unwrap();

    let config = dir.path().join("config.toml");
    std::fs::write(
        &config,
        format!(
            r#"
output_dir = {out:?}

[paths]
tensor_file = {tensor:?}
tensor_name = "unembed"
vocab_file = {vocab:?}
"#,
            out = dir.path().join("out"),
            tensor = tensor,
            vocab = vocab,
        ),
    )
    .unwrap();
    let out = run(
        &[
            "project",
            "--config",
            config.to_str().unwrap(),
            "--ids",
            "0,1,2,3",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(dir.path().join("out/projection.csv")).unwrap();
    assert!(csv.contains("token_id,label,x,y,is_query"));
    assert_eq!(csv.lines().count(), 2 + 4, "comment + header + 4 points");
}

#[test]
fn cot_pipeline_votes_and_reports_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let question = "What is 2 plus 2?";
    let cot_prompt = format!("{question} Please show me some different ways to solve this problem.");
    let suffix = " **Final Answer (Only Number):**";

    let mut data = FixtureData::default();
    data.script_candidates(
        &cot_prompt,
        vec![
            FixtureCandidate {
                text: " First".into(),
                logprob: -0.1,
                id: None,
            },
            FixtureCandidate {
                text: " Second".into(),
                logprob: -0.2,
                id: None,
            },
        ],
    );
    for (token, rest) in [(" First", ", 2+2 = 4"), (" Second", ", double 2 is 4")] {
        let cot = format!("{token}{rest}");
        data.script_greedy(&format!("{cot_prompt}{token}"), rest);
        data.script_greedy(&format!("{cot}{suffix}"), " 4")
    }
    let fixture = dir.path().join("fixture.json");
    FixtureBackend::save(&data, &fixture).unwrap();

    let questions = dir.path().join("questions.ndjson");
    std::fs::write(
        &questions,
        format!("{}\n", serde_json::json!({"question": question, "kind": "numeric", "gold": "4"})),
    )
    .unwrap();

    let config = dir.path().join("config.toml");
    std::fs::write(
        &config,
        format!(
            r#"
output_dir = {out:?}

[backend]
kind = "fixture"
path = {fixture:?}
"#,
            out = dir.path().join("out"),
            fixture = fixture,
        ),
    )
    .unwrap();

    let out = run(
        &[
            "cot",
            "--config",
            config.to_str().unwrap(),
            "--questions",
            questions.to_str().unwrap(),
            "--strategy",
            "top",
            "--n-paths",
            "2",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let votes = std::fs::read_to_string(dir.path().join("out/votes.ndjson")).unwrap();
    assert!(votes.contains("\"winner\":\"4\""));
    let summary = std::fs::read_to_string(dir.path().join("out/cot_summary.json")).unwrap();
    assert!(summary.contains("\"accuracy\": 100.0"));
}
