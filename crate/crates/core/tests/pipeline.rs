use std::time::Duration;

use fair_embed::augment::{
    augment_text, run_rounds, AugmentConfig, AugmentationLoop, LlmClient, LoopStatus,
    PromptPayload, PromptStore, ScriptedCorrections, ScriptedLlm, ScriptedReply,
};
use fair_embed::io::TextRecord;
use fair_embed::synthetic::{ScriptedSession, GENDER_TRIPLES};
use fair_embed::{Error, Result, SensitiveLexicon};
use serde_json::json;

fn fast() -> AugmentConfig {
    AugmentConfig { backoff: Duration::from_millis(1), ..Default::default() }
}

fn attrs() -> Vec<String> {
    vec!["male".into(), "female".into()]
}

fn record(id: &str, text: &str) -> TextRecord {
    TextRecord { id: id.into(), text: text.into(), source: None }
}

fn reply(source: &str, fail_times: u32, body: serde_json::Value) -> ScriptedReply {
    ScriptedReply { source: Some(source.into()), source_sha256: None, when_example: None, fail_times, reply: body }
}

#[test]
fn kirchner_reply_becomes_a_result() {
    let [male, neutral, female] = GENDER_TRIPLES[2];
    let mock = ScriptedLlm::new(vec![reply(
        male,
        0,
        json!({"neutral": neutral, "groups": {"male": male, "female": female}, "confidence": 0.9}),
    )])
    .unwrap();
    let out = augment_text(&record("k", male), &PromptStore::seeded(), &attrs(), &mock, &fast(), 1).unwrap();
    assert_eq!(out.group_texts["female"], female);
    assert_eq!(out.neutral_text, neutral);
    assert_eq!(out.confidence, 0.9);
    assert_eq!(mock.calls()[0].examples.len(), 8);
}

#[test]
fn transport_failures_are_retried_up_to_three_times() {
    let body = json!({"neutral": "n", "groups": {"male": "m", "female": "f"}, "confidence": 1.0});
    let ok = ScriptedLlm::new(vec![reply("s", 2, body.clone())]).unwrap();
    augment_text(&record("a", "s"), &PromptStore::new("t"), &attrs(), &ok, &fast(), 1).unwrap();
    assert_eq!(ok.calls().len(), 3);

    let down = ScriptedLlm::new(vec![reply("s", 3, body)]).unwrap();
    let err = augment_text(&record("a", "s"), &PromptStore::new("t"), &attrs(), &down, &fast(), 1).unwrap_err();
    assert!(matches!(err, Error::Transport(_)));
    assert_eq!(down.calls().len(), 3);
}

/// Returns a bad body first and a good one once the reminder is present.
struct Forgetful;

impl LlmClient for Forgetful {
    fn endpoint(&self) -> String {
        "forgetful".into()
    }

    fn complete(&self, payload: &PromptPayload) -> Result<String> {
        Ok(match payload.format_reminder {
            None => "Sure! Here are the rewrites.".into(),
            Some(_) => r#"{"neutral":"n","groups":{"male":"m","female":"f"},"confidence":0.4}"#.into(),
        })
    }
}

#[test]
fn malformed_reply_gets_one_repair_attempt() {
    let out = augment_text(&record("a", "s"), &PromptStore::new("t"), &attrs(), &Forgetful, &fast(), 1).unwrap();
    assert_eq!(out.confidence, 0.4);

    let hopeless = ScriptedLlm::new(vec![reply("s", 0, json!("no json here"))]).unwrap();
    let err = augment_text(&record("a", "s"), &PromptStore::new("t"), &attrs(), &hopeless, &fast(), 1).unwrap_err();
    match err {
        Error::ReplyFormat { raw, .. } => assert_eq!(raw, "no json here"),
        other => panic!("{other:?}"),
    }
    let calls = hopeless.calls();
    assert_eq!(calls.len(), 2);
    assert!(calls[1].format_reminder.is_some());
}

fn run_session(dataset: &[TextRecord]) -> (fair_embed::augment::RoundsOutcome, PromptStore) {
    let session = ScriptedSession::new();
    let mock = ScriptedLlm::new(session.replies).unwrap();
    let mut corrections = ScriptedCorrections::new(session.corrections);
    let mut store = PromptStore::seeded();
    let lex = SensitiveLexicon::default_english();
    let out = run_rounds(dataset, &mut store, &mock, &lex, 3, &mut corrections, &fast()).unwrap();
    (out, store)
}

#[test]
fn three_rounds_select_grow_and_shrink() {
    let session = ScriptedSession::new();
    let (out, store) = run_session(&session.dataset);
    let flagged: Vec<usize> = out.stats.iter().map(|s| s.flagged).collect();
    assert_eq!(flagged, [4, 2, 0]);
    let picks: Vec<Option<&str>> = out.stats.iter().map(|s| s.candidate.as_deref()).collect();
    assert_eq!(picks, [Some("p2"), Some("p3"), None]);
    assert_eq!(store.len(), 10);
    assert_eq!(store.examples[8].round_added, 1);
    assert_eq!(store.examples[9].round_added, 2);
    assert_eq!(out.stats[2].union_accuracy, 1.0);
    assert!(out.results.iter().all(|r| r.round == 3));
}

#[test]
fn selection_does_not_depend_on_input_order() {
    let session = ScriptedSession::new();
    let (base, base_store) = run_session(&session.dataset);
    let mut reversed = session.dataset.clone();
    reversed.reverse();
    let (other, other_store) = run_session(&reversed);
    assert_eq!(base.stats, other.stats);
    assert_eq!(base_store.digest(), other_store.digest());
}

#[test]
fn single_round_never_asks_for_corrections() {
    let session = ScriptedSession::new();
    let mock = ScriptedLlm::new(session.replies).unwrap();
    let mut store = PromptStore::seeded();
    let before = store.clone();
    let lex = SensitiveLexicon::default_english();
    let mut asked = 0;
    let mut never = |_: &_, _: u32| {
        asked += 1;
        None
    };
    let out = run_rounds(&session.dataset, &mut store, &mock, &lex, 1, &mut never, &fast()).unwrap();
    assert_eq!(asked, 0);
    assert_eq!(store, before);
    assert_eq!(out.stats.len(), 1);
    assert_eq!(out.stats[0].candidate, None);
}

#[test]
fn store_is_append_only() {
    let session = ScriptedSession::new();
    let mock = ScriptedLlm::new(session.replies).unwrap();
    let lex = SensitiveLexicon::default_english();
    let mut lp = AugmentationLoop::new(session.dataset, PromptStore::seeded(), 3).unwrap();
    let mut prefixes = vec![lp.store().examples.clone()];
    let mut corrections = ScriptedCorrections::new(session.corrections);
    while lp.status() != LoopStatus::Done {
        lp.run_block_one(&mock, &lex, &fast()).unwrap();
        if lp.status() == LoopStatus::AwaitingCorrection {
            let cand = lp.candidate().unwrap().clone();
            use fair_embed::augment::CorrectionSource;
            let fix = corrections.correction(&cand, lp.round()).unwrap();
            lp.submit_correction(&cand.content_id, &fix, &lex).unwrap();
            let now = lp.store().examples.clone();
            let last = prefixes.last().unwrap();
            assert_eq!(now.len(), last.len() + 1);
            assert_eq!(&now[..last.len()], &last[..]);
            prefixes.push(now);
        }
    }
    assert_eq!(prefixes.len(), 3);
}

#[test]
fn rejected_correction_leaves_loop_waiting() {
    let session = ScriptedSession::new();
    let mock = ScriptedLlm::new(session.replies).unwrap();
    let lex = SensitiveLexicon::default_english();
    let mut lp = AugmentationLoop::new(session.dataset, PromptStore::seeded(), 2).unwrap();
    lp.run_block_one(&mock, &lex, &fast()).unwrap();
    let mut bad = session.corrections[0].correction.clone();
    bad.neutral = "Their brother drove home.".into();
    let err = lp.submit_correction("p2", &bad, &lex).unwrap_err();
    assert!(matches!(err, Error::CorrectionRejected { ref text, ref label } if text == "neutral" && label == "male"));
    assert_eq!(lp.status(), LoopStatus::AwaitingCorrection);
    assert!(matches!(lp.run_block_one(&mock, &lex, &fast()), Err(Error::State(_))));
    assert_eq!(lp.store().len(), 8);
}

#[test]
fn empty_dataset_is_a_no_op() {
    let mock = ScriptedLlm::new(vec![]).unwrap();
    let mut store = PromptStore::seeded();
    let mut none = |_: &_, _: u32| None;
    let out = run_rounds(&[], &mut store, &mock, &SensitiveLexicon::default_english(), 3, &mut none, &fast()).unwrap();
    assert!(out.results.is_empty() && out.stats.is_empty());
    assert!(mock.calls().is_empty());
}
