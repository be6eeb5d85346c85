//! HTTP review service for the augmentation loop.
//!
//! The loop state lives behind one mutex, so requests are applied strictly
//! one after another. Every transition is written to the state file before
//! the response goes out; restarting with the same file picks up where the
//! previous process stopped.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Mutex;

use fair_embed::augment::{
    AugmentConfig, AugmentationLoop, AugmentationResult, CorrectionRecord, LlmClient, LoopStatus,
    RoundStats,
};
use fair_embed::io::{self, GroupsFile, TextRecord};
use fair_embed::lexicon::{LexiconMatch, PolarityLabel};
use fair_embed::{Error, SensitiveLexicon};

/// Where the service mirrors its state.
#[derive(Debug, Clone, Default)]
pub struct Persistence {
    /// Full loop state, rewritten after every transition.
    pub state: Option<PathBuf>,
    /// Prompt store, rewritten after every accepted correction.
    pub prompts: Option<PathBuf>,
    /// Latest augmentations, rewritten after every round.
    pub groups: Option<PathBuf>,
}

/// The loop plus everything needed to step it.
#[derive(Debug)]
pub struct Review {
    lp: AugmentationLoop,
    lex: SensitiveLexicon,
    persist: Persistence,
}

impl Review {
    pub fn new(lp: AugmentationLoop, lex: SensitiveLexicon, persist: Persistence) -> Self {
        Self { lp, lex, persist }
    }

    /// Resumes from `persist.state` when that file exists, otherwise starts a
    /// fresh loop. A saved state for a different dataset is refused.
    pub fn open(
        dataset: Vec<TextRecord>,
        store: fair_embed::augment::PromptStore,
        rounds: u32,
        lex: SensitiveLexicon,
        persist: Persistence,
    ) -> fair_embed::Result<Self> {
        let fresh = AugmentationLoop::new(dataset, store, rounds)?;
        let lp = match persist.state.as_deref().filter(|p| p.exists()) {
            Some(path) => {
                let saved = load_state(path)?;
                if saved.dataset_digest() != fresh.dataset_digest() {
                    return Err(Error::State(format!(
                        "{} was saved for a different dataset",
                        path.display()
                    )));
                }
                log::info!(
                    "resuming round {} ({:?}) from {}",
                    saved.round(),
                    saved.status(),
                    path.display()
                );
                saved
            }
            None => fresh,
        };
        let review = Self::new(lp, lex, persist);
        review.save()?;
        Ok(review)
    }

    pub fn augmentation_loop(&self) -> &AugmentationLoop {
        &self.lp
    }

    fn save(&self) -> fair_embed::Result<()> {
        if let Some(path) = &self.persist.state {
            let json = serde_json::to_vec(&self.lp).expect("loop state serializes");
            io::write_locked(path, &json)?;
        }
        if let Some(path) = &self.persist.prompts {
            io::save_prompt_store(path, self.lp.store())?;
        }
        if let (Some(path), false) = (&self.persist.groups, self.lp.results().is_empty()) {
            let file = GroupsFile::new(self.lex.attributes().to_vec(), self.lp.results().to_vec());
            io::write_groups(path, &file)?;
        }
        Ok(())
    }

    pub fn next_round(
        &mut self,
        client: &dyn LlmClient,
        cfg: &AugmentConfig,
    ) -> fair_embed::Result<RoundStats> {
        if self.lp.status() != LoopStatus::Running {
            return Err(Error::State(format!(
                "cannot start a round while {}",
                status_name(self.lp.status())
            )));
        }
        let stats = self.lp.run_block_one(client, &self.lex, cfg)?.clone();
        self.save()?;
        Ok(stats)
    }

    pub fn correct(&mut self, record: &CorrectionRecord) -> fair_embed::Result<()> {
        if let Some(round) = record.round.filter(|r| *r != self.lp.round()) {
            return Err(Error::State(format!(
                "correction is for round {round}, the loop is in round {}",
                self.lp.round()
            )));
        }
        self.lp
            .submit_correction(&record.content_id, &record.correction, &self.lex)?;
        self.save()
    }

    pub fn skip(&mut self) -> fair_embed::Result<()> {
        self.lp.skip_correction()?;
        self.save()
    }

    pub fn state_view(&self) -> StateView {
        StateView {
            round: self.lp.round(),
            total_rounds: self.lp.total_rounds(),
            status: self.lp.status(),
            dataset_digest: self.lp.dataset_digest(),
            store_size: self.lp.store().len(),
            store_digest: self.lp.store().digest(),
            flagged: self.lp.flagged().map(|r| r.content_id.clone()).collect(),
            candidate: self.lp.candidate().map(|c| c.content_id.clone()),
            rounds: self.lp.stats().to_vec(),
        }
    }

    pub fn review_item(&self, r: &AugmentationResult) -> ReviewItem {
        let view = |text: &str, ok: bool| TextView {
            text: text.to_string(),
            label: self.lex.polarity(text),
            ok,
            matches: self.lex.find_matches(text),
        };
        let flags = r.polarity.as_ref().map(|p| p.flags()).unwrap_or_default();
        let mut texts: IndexMap<String, TextView> = r
            .group_texts
            .iter()
            .map(|(a, t)| (a.clone(), view(t, flags.get(a).copied().unwrap_or(false))))
            .collect();
        texts.insert(
            "neutral".into(),
            view(&r.neutral_text, flags.get("neutral").copied().unwrap_or(false)),
        );
        ReviewItem {
            content_id: r.content_id.clone(),
            round: r.round,
            confidence: r.confidence,
            source: r.source_text.clone(),
            texts,
        }
    }
}

fn status_name(s: LoopStatus) -> &'static str {
    match s {
        LoopStatus::Running => "running",
        LoopStatus::AwaitingCorrection => "awaiting a correction",
        LoopStatus::Done => "done",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub round: u32,
    pub total_rounds: u32,
    pub status: LoopStatus,
    pub dataset_digest: String,
    pub store_size: usize,
    pub store_digest: String,
    pub flagged: Vec<String>,
    pub candidate: Option<String>,
    pub rounds: Vec<RoundStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextView {
    pub text: String,
    pub label: PolarityLabel,
    pub ok: bool,
    pub matches: Vec<LexiconMatch>,
}

/// One augmentation as shown to a reviewer: every output text with its
/// label and the lexicon hits to highlight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub content_id: String,
    pub round: u32,
    pub confidence: f64,
    pub source: Option<String>,
    pub texts: IndexMap<String, TextView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsView {
    pub rounds: Vec<RoundStats>,
    pub store_size: usize,
    pub corrections_applied: usize,
}

#[derive(Clone)]
pub struct AppState {
    review: Arc<Mutex<Review>>,
    client: Arc<dyn LlmClient>,
    cfg: Arc<AugmentConfig>,
}

impl AppState {
    pub fn new(review: Review, client: Arc<dyn LlmClient>, cfg: AugmentConfig) -> Self {
        Self {
            review: Arc::new(Mutex::new(review)),
            client,
            cfg: Arc::new(cfg),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/state", get(get_state))
        .route("/api/flagged", get(get_flagged))
        .route("/api/candidate", get(get_candidate))
        .route("/api/corrections", post(post_correction))
        .route("/api/corrections/skip", post(post_skip))
        .route("/api/rounds/next", post(post_next_round))
        .route("/api/metrics", get(get_metrics))
        .with_state(state)
}

/// Serves `router(state)` on `addr` until the process is stopped.
pub async fn serve(state: AppState, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let message = self.0.to_string();
        let (status, body) = match &self.0 {
            Error::State(_) => (StatusCode::CONFLICT, json!({"error": message})),
            Error::CorrectionRejected { text, label } => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({"error": message, "text": text, "label": label}),
            ),
            Error::Transport(_) => (StatusCode::BAD_GATEWAY, json!({"error": message})),
            e if e.is_data_error() => (StatusCode::UNPROCESSABLE_ENTITY, json!({"error": message})),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, json!({"error": message})),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

async fn get_state(State(s): State<AppState>) -> Json<StateView> {
    Json(s.review.lock().await.state_view())
}

async fn get_flagged(State(s): State<AppState>) -> Json<Vec<ReviewItem>> {
    let review = s.review.lock().await;
    Json(review.lp.flagged().map(|r| review.review_item(r)).collect())
}

async fn get_candidate(State(s): State<AppState>) -> Response {
    let review = s.review.lock().await;
    match review.lp.candidate() {
        Some(c) => Json(review.review_item(c)).into_response(),
        None => (
            StatusCode::NOT_FOUND,
            Json(json!({"error": format!("no candidate while {}", status_name(review.lp.status()))})),
        )
            .into_response(),
    }
}

async fn post_correction(
    State(s): State<AppState>,
    Json(record): Json<CorrectionRecord>,
) -> ApiResult<StateView> {
    let mut review = s.review.lock().await;
    review.correct(&record)?;
    Ok(Json(review.state_view()))
}

async fn post_skip(State(s): State<AppState>) -> ApiResult<StateView> {
    let mut review = s.review.lock().await;
    review.skip()?;
    Ok(Json(review.state_view()))
}

async fn post_next_round(State(s): State<AppState>) -> ApiResult<RoundStats> {
    let review = s.review.clone();
    let (client, cfg) = (s.client.clone(), s.cfg.clone());
    let stats = tokio::task::spawn_blocking(move || {
        review.blocking_lock().next_round(client.as_ref(), &cfg)
    })
    .await
    .map_err(|e| Error::State(format!("round worker failed: {e}")))??;
    Ok(Json(stats))
}

async fn get_metrics(State(s): State<AppState>) -> Json<MetricsView> {
    let review = s.review.lock().await;
    let rounds = review.lp.stats().to_vec();
    Json(MetricsView {
        corrections_applied: rounds.iter().filter(|r| r.correction_applied).count(),
        store_size: review.lp.store().len(),
        rounds,
    })
}

/// Reads the state file written by a running or stopped service.
pub fn load_state(path: &Path) -> fair_embed::Result<AugmentationLoop> {
    serde_json::from_reader(io::open(path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
