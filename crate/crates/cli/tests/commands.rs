//! Subcommands run against the scripted end-to-end fixture.

mod common;

use std::process::Command;

use axum::routing::post;
use axum::{Json, Router};
use base64::Engine;
use cap_eval::dataset::load_dataset;
use cap_eval::forge::{AdPrompt, CpoTriple, TrainingConfig};
use cap_eval::pipeline::{FailedPair, ResultStore, FAILURES_FILE};
use cap_eval::Provenance;
use cap_eval_cli::args::{CpoArgs, GenImagesArgs, GenPromptsArgs, ImageSource, ReportArgs, ReportKind};
use cap_eval_cli::commands::{self, read_jsonl};
use serde_json::{json, Value};

fn config(dir: &std::path::Path) -> cap_eval::config::RunConfig {
    commands::load_config(Some(&dir.join("config.toml"))).unwrap()
}

#[tokio::test]
async fn gen_prompts_writes_single_paragraphs() {
    let tmp = common::fixture_copy();
    let out = tmp.path().join("prompts.jsonl");
    let summary = commands::gen_prompts(
        &config(tmp.path()),
        &GenPromptsArgs {
            dataset: None,
            out: out.clone(),
        },
    )
    .await
    .unwrap();
    assert_eq!(summary.written, 7);
    assert!(summary.failed.is_empty());
    let prompts: Vec<AdPrompt> = read_jsonl(&out).unwrap();
    assert_eq!(prompts[0].record_id, "c1");
    assert_eq!(prompts[0].d_llm, "An ad for c1. It shows a red running shoe on an empty road at dawn.");
    assert!(prompts.iter().all(|p| !p.d_llm.contains('\n')));
}

#[tokio::test]
async fn cpo_dataset_from_generated_descriptions() {
    let tmp = common::fixture_copy();
    let out = tmp.path().join("cpo/triples.jsonl");
    let summary = commands::build_cpo(
        Some(&config(tmp.path())),
        &CpoArgs {
            dataset: None,
            negatives: tmp.path().join("negatives.jsonl"),
            descriptions: None,
            out: out.clone(),
            training_config: None,
        },
    )
    .await
    .unwrap();
    // c1 has two statements, c2..p2 one each, two negatives per record;
    // p3 has no negatives and is skipped.
    assert_eq!(summary.triples, 2 * 2 + 4 * 2);
    assert_eq!(summary.records, 5);
    assert_eq!(summary.warnings, 1);
    let triples: Vec<CpoTriple> = read_jsonl(&out).unwrap();
    assert_eq!(triples.len(), 12);
    assert!(triples[0].prompt.starts_with("Training description of c1"));
    assert!(triples.iter().all(|t| t.preferred != t.dispreferred));
    let raw: Value = serde_json::from_str(std::fs::read_to_string(&out).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(
        raw.as_object().unwrap().keys().collect::<Vec<_>>(),
        vec!["chosen", "prompt", "rejected"]
    );
    let stub: TrainingConfig =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("cpo/triples.jsonl.training.json")).unwrap())
            .unwrap();
    assert_eq!((stub.batch_size, stub.method.as_str()), (4, "cpo"));
}

#[tokio::test]
async fn cpo_dataset_from_precomputed_descriptions_needs_no_config() {
    let tmp = common::fixture_copy();
    let desc = tmp.path().join("desc.jsonl");
    std::fs::write(&desc, "{\"record_id\":\"c2\",\"description\":\"a car\"}\n").unwrap();
    let summary = commands::build_cpo(
        None,
        &CpoArgs {
            dataset: Some(tmp.path().join("records.jsonl")),
            negatives: tmp.path().join("negatives.jsonl"),
            descriptions: Some(desc),
            out: tmp.path().join("t.jsonl"),
            training_config: Some(tmp.path().join("train.json")),
        },
    )
    .await
    .unwrap();
    assert_eq!(summary.triples, 2);
    assert_eq!(summary.distinct_prompts, 1);
    assert!(tmp.path().join("train.json").exists());
}

async fn image_server() -> String {
    let png = std::fs::read(common::fixture_dir().join("images/c1.png")).unwrap();
    let app = Router::new().route(
        "/v1/images/generations",
        post(move |Json(body): Json<Value>| {
            let png = png.clone();
            async move {
                if body["prompt"].as_str().unwrap_or_default().contains("vote") {
                    return Err(axum::http::StatusCode::BAD_REQUEST);
                }
                Ok(Json(json!({"data": [{"b64_json": base64::engine::general_purpose::STANDARD.encode(png)}]})))
            }
        }),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}/v1")
}

#[tokio::test]
async fn gen_images_writes_a_scorable_dataset() {
    let tmp = common::fixture_copy();
    let endpoint = image_server().await;
    let out = tmp.path().join("gen");
    let summary = commands::gen_images(
        Some(&config(tmp.path())),
        &GenImagesArgs {
            dataset: None,
            source: ImageSource::Ar,
            prompts: None,
            endpoint,
            model: "aura".into(),
            out: out.clone(),
        },
    )
    .await
    .unwrap();
    assert_eq!(summary.written, 6);
    assert_eq!(summary.failed.len(), 1);
    let loaded = load_dataset(out.join("records.jsonl")).unwrap();
    assert_eq!(loaded.records.len(), 6);
    assert!(loaded
        .records
        .iter()
        .all(|r| r.image.provenance == Provenance::GeneratedFromAr && r.statements.len() == 1));
    assert!(out.join("c1_ar_1.png").exists());
}

#[tokio::test]
async fn one_failing_pair_is_isolated() {
    let tmp = common::fixture_copy();
    // Drop the description rule for p2 so its only pair fails.
    let path = tmp.path().join("script.json");
    let mut script: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let p2_hash = {
        let loaded = load_dataset(tmp.path().join("records.jsonl")).unwrap();
        loaded.records.iter().find(|r| r.id == "p2").unwrap().image.content_hash.to_hex()
    };
    script["rules"]
        .as_array_mut()
        .unwrap()
        .retain(|r| !(r["image"] == json!(p2_hash) && r["prompt_contains"][0] == json!("Carefully analyze the image")));
    std::fs::write(&path, script.to_string()).unwrap();

    let summary = common::score_fixture(tmp.path(), "out", None).await;
    assert_eq!(summary.scored, 6);
    assert_eq!(summary.failures.len(), 1);
    assert_eq!(summary.failures[0].record_id, "p2");
    assert!(summary.exceeded(), "1/7 is above the 0.1 default");
    let written: Vec<FailedPair> =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("out").join(FAILURES_FILE)).unwrap()).unwrap();
    assert_eq!(written, summary.failures);
    let store = ResultStore::load(&tmp.path().join("out")).unwrap();
    assert!(store.cards.iter().all(|c| c.record_id != "p2"));

    // The binary reports the threshold breach through its exit status.
    let status = Command::new(env!("CARGO_BIN_EXE_cap-eval"))
        .args(["--config", "config.toml", "score", "--out", "out2"])
        .current_dir(tmp.path())
        .env_remove("CAP_CACHE_DIR")
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(i32::from(cap_eval_cli::EXIT_FAILURE_RATE)));
}

#[tokio::test]
async fn report_rewrites_identical_tables() {
    let tmp = common::fixture_copy();
    common::score_fixture(tmp.path(), "out", None).await;
    let again = tmp.path().join("again");
    let files = commands::report(
        None,
        &ReportArgs {
            scores: tmp.path().join("out"),
            out: Some(again.clone()),
            shape: vec![ReportKind::Scores, ReportKind::Components],
        },
    )
    .unwrap();
    assert_eq!(files.len(), 4);
    for name in ["scores.csv", "scores.json", "components.csv", "components.json"] {
        assert_eq!(
            std::fs::read(tmp.path().join("out").join(name)).unwrap(),
            std::fs::read(again.join(name)).unwrap(),
            "{name}"
        );
    }
    let empty = tempfile::tempdir().unwrap();
    assert!(commands::report(
        None,
        &ReportArgs {
            scores: empty.path().to_path_buf(),
            out: None,
            shape: vec![ReportKind::Scores],
        },
    )
    .is_err());
}

#[test]
fn binary_scores_with_config_from_environment() {
    let tmp = common::fixture_copy();
    let out = Command::new(env!("CARGO_BIN_EXE_cap-eval"))
        .args(["score", "--metrics", "cite"])
        .current_dir(tmp.path())
        .env("CAP_CONFIG", tmp.path().join("config.toml"))
        .env("CAP_CACHE_DIR", tmp.path().join("env-cache"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["scored"], 7);
    assert!(tmp.path().join("env-cache").is_dir());
    assert!(!tmp.path().join("cache").exists());
    // CITE only: no component table.
    assert!(tmp.path().join("out/scores.csv").exists());
    assert!(!tmp.path().join("out/components.csv").exists());

    let missing = Command::new(env!("CARGO_BIN_EXE_cap-eval"))
        .args(["score"])
        .current_dir(tmp.path())
        .env_remove("CAP_CONFIG")
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("CAP_CONFIG"));
}
