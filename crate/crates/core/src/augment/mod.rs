//! LLM-assisted fair augmentation.
//!
//! Each round rewrites every source text into one text per sensitive group
//! plus a neutral text. Between rounds, the polarity check flags wrong
//! rewrites; the most confident wrong one is corrected by a person and added
//! to the prompt store as a new exemplar, which steers the next round.

mod client;
mod prompt;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use client::{parse_reply, LlmClient, LlmReply, ScriptedLlm, ScriptedReply};
pub use prompt::{
    build_prompt, PayloadExample, PromptExample, PromptPayload, PromptStore,
    DEFAULT_TASK_DESCRIPTION, PAYLOAD_VERSION,
};

use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::io::TextRecord;
use crate::lexicon::{union_accuracy, PolarityLabel, SensitiveLexicon};

/// Polarity labels of every output text of one augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarityCheck {
    pub neutral: PolarityLabel,
    pub groups: IndexMap<String, PolarityLabel>,
}

impl PolarityCheck {
    pub fn neutral_ok(&self) -> bool {
        self.neutral == PolarityLabel::Neutral
    }

    pub fn group_ok(&self, attribute: &str) -> bool {
        self.groups
            .get(attribute)
            .is_some_and(|l| l.is_attribute(attribute))
    }

    pub fn all_ok(&self) -> bool {
        self.neutral_ok() && self.groups.keys().all(|a| self.group_ok(a))
    }

    /// `true`/`false` per output text, keyed by attribute plus `neutral`.
    pub fn flags(&self) -> IndexMap<String, bool> {
        let mut out: IndexMap<String, bool> =
            self.groups.keys().map(|a| (a.clone(), self.group_ok(a))).collect();
        out.insert("neutral".into(), self.neutral_ok());
        out
    }
}

/// One source text rewritten into every group plus neutral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationResult {
    pub content_id: String,
    #[serde(rename = "source", default, skip_serializing_if = "Option::is_none")]
    pub source_text: Option<String>,
    #[serde(rename = "groups")]
    pub group_texts: IndexMap<String, String>,
    #[serde(rename = "neutral")]
    pub neutral_text: String,
    pub confidence: f64,
    pub round: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity: Option<PolarityCheck>,
    /// Set by loaders when the confidence was missing and defaulted to 1.
    #[serde(skip)]
    pub confidence_defaulted: bool,
}

impl AugmentationResult {
    pub fn is_flagged(&self) -> bool {
        self.polarity.as_ref().is_some_and(|p| !p.all_ok())
    }
}

/// Retry and fan-out settings for Block I.
#[derive(Debug, Clone)]
pub struct AugmentConfig {
    /// Total attempts on transport failures.
    pub max_attempts: u32,
    /// First backoff delay; doubled after each transport failure.
    pub backoff: Duration,
    /// Upper bound on concurrent requests within a round.
    pub concurrency: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff: Duration::from_millis(250),
            concurrency: 4,
        }
    }
}

/// Rewrites one source text. Transport failures are retried with
/// exponential backoff; an unusable reply gets one repair attempt with a
/// format reminder appended to the prompt.
pub fn augment_text(
    record: &TextRecord,
    store: &PromptStore,
    attributes: &[String],
    client: &dyn LlmClient,
    cfg: &AugmentConfig,
    round: u32,
) -> Result<AugmentationResult> {
    let mut payload = build_prompt(&record.text, store, attributes);
    let mut transport_failures = 0u32;
    let mut repaired = false;
    loop {
        let raw = match client.complete(&payload) {
            Ok(raw) => raw,
            Err(Error::Transport(msg)) => {
                transport_failures += 1;
                if transport_failures >= cfg.max_attempts.max(1) {
                    return Err(Error::Transport(msg));
                }
                let delay = cfg.backoff * 2u32.pow(transport_failures - 1);
                log::warn!(
                    "{}: transport failure ({msg}), retrying in {delay:?}",
                    record.id
                );
                thread::sleep(delay);
                continue;
            }
            Err(e) => return Err(e),
        };
        match parse_reply(&raw, attributes) {
            Ok(reply) => {
                return Ok(AugmentationResult {
                    content_id: record.id.clone(),
                    source_text: Some(record.text.clone()),
                    group_texts: reply.groups,
                    neutral_text: reply.neutral,
                    confidence: reply.confidence,
                    round,
                    polarity: None,
                    confidence_defaulted: false,
                })
            }
            Err(e) if repaired => return Err(e),
            Err(e) => {
                log::warn!("{}: {e}; retrying with a format reminder", record.id);
                repaired = true;
                payload = payload.with_format_reminder();
            }
        }
    }
}

/// Block I over a whole dataset. Requests may run concurrently; results come
/// back in input order.
pub fn augment_all(
    dataset: &[TextRecord],
    store: &PromptStore,
    attributes: &[String],
    client: &dyn LlmClient,
    cfg: &AugmentConfig,
    round: u32,
) -> Result<Vec<AugmentationResult>> {
    let workers = cfg.concurrency.clamp(1, dataset.len().max(1));
    if workers == 1 {
        return dataset
            .iter()
            .map(|r| augment_text(r, store, attributes, client, cfg, round))
            .collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<AugmentationResult>>>> =
        Mutex::new((0..dataset.len()).map(|_| None).collect());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(record) = dataset.get(i) else { break };
                let out = augment_text(record, store, attributes, client, cfg, round);
                slots.lock().unwrap()[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|slot| slot.expect("every index is claimed by a worker"))
        .collect()
}

/// Labels every output text and returns the results whose neutral text is
/// not neutral or whose group text does not carry its own group.
pub fn flag_wrong(
    results: &mut [AugmentationResult],
    lex: &SensitiveLexicon,
) -> Vec<AugmentationResult> {
    let mut flagged = Vec::new();
    for r in results.iter_mut() {
        let groups = lex
            .attributes()
            .iter()
            .map(|a| {
                let label = match r.group_texts.get(a) {
                    Some(text) => lex.polarity(text),
                    None => PolarityLabel::Neutral,
                };
                (a.clone(), label)
            })
            .collect();
        let check = PolarityCheck {
            neutral: lex.polarity(&r.neutral_text),
            groups,
        };
        let wrong = !check.all_ok();
        r.polarity = Some(check);
        if wrong {
            flagged.push(r.clone());
        }
    }
    flagged
}

/// The flagged result with the highest confidence; ties go to the smallest
/// content id, so the choice does not depend on input order.
pub fn select_correction_candidate(flagged: &[AugmentationResult]) -> Option<&AugmentationResult> {
    flagged.iter().max_by(|a, b| {
        a.confidence
            .total_cmp(&b.confidence)
            .then_with(|| b.content_id.cmp(&a.content_id))
    })
}

/// Human-provided texts for a wrong augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub neutral: String,
    pub groups: IndexMap<String, String>,
}

/// Validates a correction against the lexicon and appends it to the store.
///
/// Whether `candidate` was actually flagged is the caller's concern.
pub fn apply_correction(
    store: &mut PromptStore,
    candidate: &AugmentationResult,
    correction: &Correction,
    round: u32,
    lex: &SensitiveLexicon,
) -> Result<()> {
    validate_correction(correction, lex)?;
    let original = candidate.source_text.clone().ok_or_else(|| {
        Error::malformed(&candidate.content_id, "no source text to use as exemplar")
    })?;
    store.push(PromptExample {
        original,
        neutral: correction.neutral.clone(),
        groups: lex
            .attributes()
            .iter()
            .map(|a| (a.clone(), correction.groups[a].clone()))
            .collect(),
        round_added: round,
    });
    Ok(())
}

pub fn validate_correction(correction: &Correction, lex: &SensitiveLexicon) -> Result<()> {
    for attr in lex.attributes() {
        let Some(text) = correction.groups.get(attr) else {
            return Err(Error::CorrectionRejected {
                text: attr.clone(),
                label: "missing".into(),
            });
        };
        let label = lex.polarity(text);
        if !label.is_attribute(attr) {
            return Err(Error::CorrectionRejected {
                text: attr.clone(),
                label: label.to_string(),
            });
        }
    }
    let label = lex.polarity(&correction.neutral);
    if label != PolarityLabel::Neutral {
        return Err(Error::CorrectionRejected {
            text: "neutral".into(),
            label: label.to_string(),
        });
    }
    Ok(())
}

/// Where corrections for selected candidates come from: a terminal prompt, a
/// scripted file, or the review service.
pub trait CorrectionSource {
    fn correction(&mut self, candidate: &AugmentationResult, round: u32) -> Option<Correction>;
}

impl<F> CorrectionSource for F
where
    F: FnMut(&AugmentationResult, u32) -> Option<Correction>,
{
    fn correction(&mut self, candidate: &AugmentationResult, round: u32) -> Option<Correction> {
        self(candidate, round)
    }
}

/// One line of a scripted correction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub content_id: String,
    /// Restricts the record to one round; any round when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
    #[serde(flatten)]
    pub correction: Correction,
}

/// Corrections looked up by content id (and optionally round).
#[derive(Debug, Clone, Default)]
pub struct ScriptedCorrections {
    records: Vec<CorrectionRecord>,
}

impl ScriptedCorrections {
    pub fn new(records: Vec<CorrectionRecord>) -> Self {
        Self { records }
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        Ok(Self::new(crate::io::read_json_lines(path)?))
    }
}

impl CorrectionSource for ScriptedCorrections {
    fn correction(&mut self, candidate: &AugmentationResult, round: u32) -> Option<Correction> {
        let matching = |r: &&CorrectionRecord| r.content_id == candidate.content_id;
        self.records
            .iter()
            .filter(matching)
            .find(|r| r.round == Some(round))
            .or_else(|| self.records.iter().filter(matching).find(|r| r.round.is_none()))
            .map(|r| r.correction.clone())
    }
}

/// Statistics of one Block I pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: u32,
    pub flagged: usize,
    pub union_accuracy: f64,
    pub candidate: Option<String>,
    pub candidate_confidence: Option<f64>,
    pub correction_applied: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopStatus {
    /// Ready for the next Block I pass.
    Running,
    AwaitingCorrection,
    Done,
}

/// The augmentation loop as a steppable state machine. [`run_rounds`] drives
/// it to completion; the review service steps it one request at a time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationLoop {
    dataset: Vec<TextRecord>,
    store: PromptStore,
    total_rounds: u32,
    round: u32,
    results: Vec<AugmentationResult>,
    candidate: Option<String>,
    status: LoopStatus,
    stats: Vec<RoundStats>,
}

impl AugmentationLoop {
    pub fn new(dataset: Vec<TextRecord>, store: PromptStore, total_rounds: u32) -> Result<Self> {
        if total_rounds == 0 {
            return Err(Error::InvalidParameter("round count must be at least 1".into()));
        }
        Ok(Self {
            dataset,
            store,
            total_rounds,
            round: 0,
            results: Vec::new(),
            candidate: None,
            status: LoopStatus::Running,
            stats: Vec::new(),
        })
    }

    /// Resumes from augmentations produced elsewhere (e.g. a groups file) as
    /// if `round` had just finished its Block I pass.
    pub fn resume(
        dataset: Vec<TextRecord>,
        store: PromptStore,
        total_rounds: u32,
        round: u32,
        results: Vec<AugmentationResult>,
        lex: &SensitiveLexicon,
    ) -> Result<Self> {
        let mut lp = Self::new(dataset, store, total_rounds)?;
        if round == 0 || round > total_rounds {
            return Err(Error::InvalidParameter(format!(
                "round {round} outside 1..={total_rounds}"
            )));
        }
        lp.round = round;
        lp.results = results;
        lp.finish_block_one(lex)?;
        Ok(lp)
    }

    pub fn status(&self) -> LoopStatus {
        self.status
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn total_rounds(&self) -> u32 {
        self.total_rounds
    }

    pub fn store(&self) -> &PromptStore {
        &self.store
    }

    pub fn dataset(&self) -> &[TextRecord] {
        &self.dataset
    }

    pub fn dataset_digest(&self) -> String {
        json_digest(&self.dataset)
    }

    pub fn results(&self) -> &[AugmentationResult] {
        &self.results
    }

    pub fn stats(&self) -> &[RoundStats] {
        &self.stats
    }

    pub fn flagged(&self) -> impl Iterator<Item = &AugmentationResult> {
        self.results.iter().filter(|r| r.is_flagged())
    }

    /// The selected wrong augmentation while awaiting a correction.
    pub fn candidate(&self) -> Option<&AugmentationResult> {
        let id = self.candidate.as_ref()?;
        self.results.iter().find(|r| &r.content_id == id)
    }

    pub fn into_parts(self) -> (Vec<AugmentationResult>, PromptStore, Vec<RoundStats>) {
        (self.results, self.store, self.stats)
    }

    fn expect_status(&self, wanted: LoopStatus) -> Result<()> {
        if self.status != wanted {
            return Err(Error::State(format!(
                "loop is {:?}, expected {:?}",
                self.status, wanted
            )));
        }
        Ok(())
    }

    /// Block I: rewrites the whole dataset with the current store, then runs
    /// the polarity check. On the last round the loop finishes; otherwise it
    /// waits for a correction of the selected candidate, if any.
    pub fn run_block_one(
        &mut self,
        client: &dyn LlmClient,
        lex: &SensitiveLexicon,
        cfg: &AugmentConfig,
    ) -> Result<&RoundStats> {
        self.expect_status(LoopStatus::Running)?;
        let round = self.round + 1;
        let results = augment_all(&self.dataset, &self.store, lex.attributes(), client, cfg, round)?;
        self.round = round;
        self.results = results;
        self.finish_block_one(lex)?;
        Ok(self.stats.last().expect("stats pushed"))
    }

    fn finish_block_one(&mut self, lex: &SensitiveLexicon) -> Result<()> {
        let accuracy = union_accuracy(&self.results, lex)?;
        let flagged = flag_wrong(&mut self.results, lex);
        let last = self.round == self.total_rounds;
        let candidate = if last {
            None
        } else {
            select_correction_candidate(&flagged)
        };
        self.stats.push(RoundStats {
            round: self.round,
            flagged: flagged.len(),
            union_accuracy: accuracy,
            candidate: candidate.map(|c| c.content_id.clone()),
            candidate_confidence: candidate.map(|c| c.confidence),
            correction_applied: false,
        });
        self.candidate = candidate.map(|c| c.content_id.clone());
        self.status = match (last, &self.candidate) {
            (true, _) => LoopStatus::Done,
            (false, Some(_)) => LoopStatus::AwaitingCorrection,
            (false, None) => LoopStatus::Running,
        };
        Ok(())
    }

    /// Block II: adds the corrected candidate to the prompt store.
    pub fn submit_correction(
        &mut self,
        content_id: &str,
        correction: &Correction,
        lex: &SensitiveLexicon,
    ) -> Result<()> {
        self.expect_status(LoopStatus::AwaitingCorrection)?;
        let candidate = self.candidate().expect("candidate present while awaiting").clone();
        if candidate.content_id != content_id {
            return Err(Error::State(format!(
                "correction for {content_id:?} but the selected candidate is {:?}",
                candidate.content_id
            )));
        }
        apply_correction(&mut self.store, &candidate, correction, self.round, lex)?;
        if let Some(s) = self.stats.last_mut() {
            s.correction_applied = true;
        }
        self.candidate = None;
        self.status = LoopStatus::Running;
        Ok(())
    }

    /// Moves on without a correction; the store stays as it is.
    pub fn skip_correction(&mut self) -> Result<()> {
        self.expect_status(LoopStatus::AwaitingCorrection)?;
        log::warn!(
            "round {}: no correction for {:?}, continuing with an unchanged prompt store",
            self.round,
            self.candidate
        );
        self.candidate = None;
        self.status = LoopStatus::Running;
        Ok(())
    }
}

/// Final augmentations plus one statistics row per round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundsOutcome {
    pub results: Vec<AugmentationResult>,
    pub stats: Vec<RoundStats>,
}

/// Runs `rounds` augmentation rounds, asking `corrections` for one fix per
/// round except the last. `store` ends up with every accepted correction.
pub fn run_rounds(
    dataset: &[TextRecord],
    store: &mut PromptStore,
    client: &dyn LlmClient,
    lex: &SensitiveLexicon,
    rounds: u32,
    corrections: &mut dyn CorrectionSource,
    cfg: &AugmentConfig,
) -> Result<RoundsOutcome> {
    let mut lp = AugmentationLoop::new(dataset.to_vec(), store.clone(), rounds)?;
    if dataset.is_empty() {
        return Ok(RoundsOutcome {
            results: Vec::new(),
            stats: Vec::new(),
        });
    }
    loop {
        lp.run_block_one(client, lex, cfg)?;
        match lp.status() {
            LoopStatus::Done => break,
            LoopStatus::Running => continue,
            LoopStatus::AwaitingCorrection => {
                let candidate = lp.candidate().expect("candidate while awaiting").clone();
                match corrections.correction(&candidate, lp.round()) {
                    Some(c) => lp.submit_correction(&candidate.content_id, &c, lex)?,
                    None => lp.skip_correction()?,
                }
            }
        }
    }
    let (results, final_store, stats) = lp.into_parts();
    *store = final_store;
    Ok(RoundsOutcome { results, stats })
}
