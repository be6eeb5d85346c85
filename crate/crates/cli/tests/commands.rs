use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use indexmap::IndexMap;
use serde_json::Value;

use fair_embed::augment::{
    run_rounds, AugmentConfig, AugmentationResult, PromptStore, ScriptedCorrections, ScriptedLlm,
};
use fair_embed::io::{self, EmbeddingStore, GroupsFile, RetrievalRecord};
use fair_embed::math::EmbeddingVector;
use fair_embed::synthetic::ScriptedSession;
use fair_embed::SensitiveLexicon;

fn fair_embed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fair-embed"))
        .args(args)
        .env_remove("FAIR_EMBED_LLM_ENDPOINT")
        .output()
        .unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct SessionFiles {
    texts: PathBuf,
    replies: PathBuf,
    corrections: PathBuf,
}

fn session_files(dir: &Path) -> SessionFiles {
    let s = ScriptedSession::new();
    let files = SessionFiles {
        texts: dir.join("texts.jsonl"),
        replies: dir.join("replies.jsonl"),
        corrections: dir.join("corrections.jsonl"),
    };
    io::write_text_records(&files.texts, &s.dataset).unwrap();
    io::write_json_lines(&files.replies, &s.replies).unwrap();
    io::write_json_lines(&files.corrections, &s.corrections).unwrap();
    files
}

#[test]
fn gradcheck_small_dimension() {
    let report = stdout_json(&fair_embed(&["gradcheck", "--dim", "4", "--seed", "7"]));
    assert!(report["max_relative_error"].as_f64().unwrap() < 1e-5, "{report}");
    assert_eq!(report["instances"], 1);

    let many = stdout_json(&fair_embed(&["gradcheck", "--dim", "8", "--instances", "50"]));
    assert!(many["max_relative_error"].as_f64().unwrap() < 1e-4, "{many}");
}

#[test]
fn gradcheck_reports_failure_with_data_code() {
    let out = fair_embed(&["gradcheck", "--dim", "3", "--instances", "2", "--tolerance", "1e-300"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(fair_embed(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(fair_embed(&[]).status.code(), Some(1));
    assert_eq!(fair_embed(&["--help"]).status.code(), Some(0));
    let out = fair_embed(&["gradcheck", "--dim", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

fn v(x: &[f64]) -> EmbeddingVector {
    EmbeddingVector::new(x.to_vec()).unwrap()
}

/// Two groups whose attributes sit at equal distance on either side of the
/// neutral vector, plus mirrored retrieval queries.
fn symmetric_fixture(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let mut store = EmbeddingStore::new(2).unwrap();
    let mut records = Vec::new();
    for (id, n) in [("a", [1.0, 2.0]), ("b", [-3.0, 0.5])] {
        store.insert(format!("{id}:neutral"), v(&n)).unwrap();
        store.insert(format!("{id}:male"), v(&[n[0] + 0.5, n[1]])).unwrap();
        store.insert(format!("{id}:female"), v(&[n[0] - 0.5, n[1]])).unwrap();
        records.push(AugmentationResult {
            content_id: id.into(),
            source_text: None,
            group_texts: IndexMap::from([
                ("male".into(), "He ran.".into()),
                ("female".into(), "She ran.".into()),
            ]),
            neutral_text: "They ran.".into(),
            confidence: 0.9,
            round: 1,
            polarity: None,
            confidence_defaulted: false,
        });
    }
    store.insert("q", v(&[0.3, 1.0])).unwrap();
    store.insert("d1", v(&[1.0, 0.0])).unwrap();
    store.insert("d2", v(&[0.0, 1.0])).unwrap();
    let retrieval = [
        RetrievalRecord { category: "job".into(), query: "q".into(), male: "d1".into(), female: "d2".into() },
        RetrievalRecord { category: "job".into(), query: "q".into(), male: "d2".into(), female: "d1".into() },
    ];
    let (g, e, r) = (dir.join("g.jsonl"), dir.join("e.femb"), dir.join("r.jsonl"));
    io::write_groups(&g, &GroupsFile::new(vec!["male".into(), "female".into()], records)).unwrap();
    io::write_embeddings(&store, &e).unwrap();
    io::write_json_lines(&r, &retrieval).unwrap();
    (g, e, r)
}

#[test]
fn eval_symmetric_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let (g, e, r) = symmetric_fixture(dir.path());
    let csv = dir.path().join("ratios.csv");
    let out_path = dir.path().join("report.json");
    let report = stdout_json(&fair_embed(&[
        "eval", "--groups", p(&g), "--embeddings", p(&e), "--retrieval", p(&r),
        "--out", p(&out_path), "--csv", p(&csv),
    ]));
    assert_eq!(report["metrics"]["cced_gap"], 0.0);
    assert_eq!(report["metrics"]["ratios"]["job"], 0.5);
    assert_eq!(report["metrics"]["avg_dev"], 0.0);
    assert_eq!(report["provenance"]["adapter_digest"], Value::Null);
    let on_disk: Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(on_disk, report);
    let csv = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(csv, "category,ratio,male_wins,female_wins,ties\njob,0.5,1,1,0\n");

    let euclid = stdout_json(&fair_embed(&[
        "eval", "--groups", p(&g), "--embeddings", p(&e), "--retrieval", p(&r), "--metric", "euclidean",
    ]));
    assert_eq!(euclid["provenance"]["similarity"], "euclidean");
    assert_eq!(euclid["metrics"]["ratios"]["job"], 0.5);
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (g, _, _) = symmetric_fixture(dir.path());
    let missing = dir.path().join("nope.femb");
    let out = fair_embed(&["eval", "--groups", p(&g), "--embeddings", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.femb"));
}

#[test]
fn synth_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (g, e, ck) = (dir.path().join("g.jsonl"), dir.path().join("e.femb"), dir.path().join("a.fadp"));
    let synth = stdout_json(&fair_embed(&[
        "synth", "--groups", "24", "--dim", "4", "--out-groups", p(&g), "--out-embeddings", p(&e),
    ]));
    assert!((synth["cced_gap"].as_f64().unwrap() - 2.0).abs() < 1e-12);

    let trained = stdout_json(&fair_embed(&[
        "train", "--groups", p(&g), "--embeddings", p(&e), "--out", p(&ck),
        "--batch-size", "8", "--epochs", "3", "--validate-every", "2", "--seed", "5",
    ]));
    assert_eq!(trained["steps"], 9);
    let (adapter, meta) = io::read_checkpoint(&ck).unwrap();
    let meta = meta.unwrap();
    assert_eq!(adapter.dim(), 4);
    assert_eq!(meta.seed, 5);
    assert_eq!(meta.learning_rate, Some(1e-3));
    assert_eq!(trained["meta"]["rho"], meta.rho);

    let report = stdout_json(&fair_embed(&[
        "eval", "--groups", p(&g), "--embeddings", p(&e), "--adapter", p(&ck),
    ]));
    assert_eq!(report["metrics"]["cced_gap"], trained["gap_after"]);
    let digest = fair_embed::digest::sha256_hex(io::encode_adapter(&adapter));
    assert_eq!(report["provenance"]["adapter_digest"], digest.as_str());
}

#[test]
fn single_round_has_no_correction_step() {
    let dir = tempfile::tempdir().unwrap();
    let f = session_files(dir.path());
    let (out, prompts) = (dir.path().join("groups.jsonl"), dir.path().join("prompts.json"));
    let summary = stdout_json(&fair_embed(&[
        "augment", "--in", p(&f.texts), "--mock", p(&f.replies), "--rounds", "1",
        "--corrections", p(&f.corrections), "--out", p(&out), "--prompts", p(&prompts),
    ]));
    let rounds = summary["rounds"].as_array().unwrap();
    assert_eq!(rounds.len(), 1);
    assert_eq!(rounds[0]["flagged"], 4);
    assert_eq!(rounds[0]["candidate"], Value::Null);
    assert_eq!(summary["store_size"], 8);
    assert_eq!(io::load_prompt_store(&prompts).unwrap(), PromptStore::seeded());
    let groups = io::load_groups(&out).unwrap();
    assert_eq!(groups.records.len(), 6);
    assert_eq!(groups.attributes, ["male", "female"]);
}

#[test]
fn three_rounds_match_library_replay() {
    let dir = tempfile::tempdir().unwrap();
    let f = session_files(dir.path());
    let (out, prompts) = (dir.path().join("groups.jsonl"), dir.path().join("prompts.json"));
    let summary = stdout_json(&fair_embed(&[
        "augment", "--in", p(&f.texts), "--mock", p(&f.replies), "--rounds", "3",
        "--corrections", p(&f.corrections), "--out", p(&out), "--prompts", p(&prompts),
    ]));
    let flagged: Vec<u64> = summary["rounds"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["flagged"].as_u64().unwrap())
        .collect();
    assert_eq!(flagged, [4, 2, 0]);

    let s = ScriptedSession::new();
    let mut store = PromptStore::seeded();
    run_rounds(
        &s.dataset,
        &mut store,
        &ScriptedLlm::new(s.replies.clone()).unwrap(),
        &SensitiveLexicon::default_english(),
        3,
        &mut ScriptedCorrections::new(s.corrections.clone()),
        &AugmentConfig::default(),
    )
    .unwrap();
    assert_eq!(summary["store_digest"], store.digest());
    assert_eq!(io::load_prompt_store(&prompts).unwrap(), store);

    // the written groups pass the polarity check
    let check = stdout_json(&fair_embed(&["polarity", "--in", p(&out)]));
    assert_eq!(check["union_accuracy"], 1.0);
    assert_eq!(check["flagged"], Value::Array(Vec::new()));
}

#[test]
fn polarity_of_one_text() {
    let out = stdout_json(&fair_embed(&["polarity", "--text", "Her brother and his father"]));
    assert_eq!(out["label"]["name"], "male");
    assert_eq!(out["counts"]["male"], 3);
    assert_eq!(out["counts"]["female"], 1);
    assert_eq!(out["matches"].as_array().unwrap().len(), 4);
}

#[test]
fn model_endpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let f = session_files(dir.path());
    let out_path = dir.path().join("o.jsonl");
    let args = ["augment", "--in", p(&f.texts), "--rounds", "1", "--out", p(&out_path)];

    // no endpoint configured
    assert_eq!(fair_embed(&args).status.code(), Some(1));

    // nothing listens on the discard port
    let out = Command::new(env!("CARGO_BIN_EXE_fair-embed"))
        .args(args)
        .env("FAIR_EMBED_LLM_ENDPOINT", "http://127.0.0.1:9/v1/augment")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!out_path.exists());
}
