//! Rating-session HTTP service.
//!
//! All endpoints live under `/v1`. Session state is authoritative on the
//! server; every mutation is first appended (and synced) to a JSON-lines
//! journal, then mirrored into the ratings CSV. On start-up the journal is
//! replayed, so a restarted service resumes each session at its first
//! unrated position and repairs any CSV row lost in a crash.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use axum::body::Body;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gsqa_core::subjective::{Rating, SCALE_MAX, SCALE_MIN};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Mutex;

pub const INDEX_FILE: &str = "index.json";
pub const DEFAULT_TRAINING_COUNT: usize = 5;
const CSV_HEADER: &str = "participant_id,stimulus_id,score,timestamp_iso8601\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusInfo {
    pub id: String,
    pub video_path: String,
    pub base_model: String,
    pub distortion_kind: String,
    pub level: f64,
    #[serde(default)]
    pub is_training: bool,
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub stimuli_dir: PathBuf,
    pub ratings_path: PathBuf,
    /// Used when no index entry is marked `is_training`.
    pub training_count: usize,
}

/// Training ratings go next to the main CSV and never enter MOS computation.
pub fn training_ratings_path(ratings: &Path) -> PathBuf {
    sibling(ratings, "training.csv")
}

pub fn journal_path(ratings: &Path) -> PathBuf {
    sibling(ratings, "sessions.jsonl")
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Training,
    Rating,
    Done,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum JournalEvent {
    Create {
        session_id: String,
        participant_id: String,
        seed: u64,
        playlist: Vec<String>,
        training_count: usize,
        created: String,
    },
    Rating {
        session_id: String,
        position: usize,
        stimulus_id: String,
        score: u8,
        training: bool,
        timestamp: String,
    },
}

#[derive(Debug)]
struct Session {
    id: String,
    participant_id: String,
    /// Indices into the stimulus list; training entries first.
    playlist: Vec<usize>,
    training_count: usize,
    cursor: usize,
    /// Cursor position whose video has been delivered.
    served: Option<usize>,
}

impl Session {
    fn phase(&self) -> Phase {
        if self.cursor >= self.playlist.len() {
            Phase::Done
        } else if self.cursor < self.training_count {
            Phase::Training
        } else {
            Phase::Rating
        }
    }
}

struct Store {
    journal: File,
    ratings: File,
    training: File,
    next_id: usize,
}

pub struct Service {
    stimuli_dir: PathBuf,
    stimuli: Vec<StimulusInfo>,
    by_id: HashMap<String, usize>,
    training_set: Vec<usize>,
    rating_set: Vec<usize>,
    sessions: std::sync::RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    store: Mutex<Store>,
}

pub fn load_index(dir: &Path) -> anyhow::Result<Vec<StimulusInfo>> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let index: Vec<StimulusInfo> = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut seen = HashSet::new();
    for s in &index {
        if !seen.insert(s.id.as_str()) {
            bail!("duplicate stimulus id `{}` in index", s.id);
        }
    }
    Ok(index)
}

/// Seeded Fisher–Yates playlist: shuffled training stimuli, then shuffled rating stimuli.
pub fn playlist(training: &[usize], rating: &[usize], seed: u64) -> Vec<usize> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut t = training.to_vec();
    t.shuffle(&mut rng);
    let mut r = rating.to_vec();
    r.shuffle(&mut rng);
    t.extend(r);
    t
}

/// Opens a CSV for appending, dropping a torn final line and writing the header if new.
fn open_csv(path: &Path) -> anyhow::Result<File> {
    let mut f = OpenOptions::new()
        .create(true)
        .read(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut text = String::new();
    f.read_to_string(&mut text)?;
    if !text.is_empty() && !text.ends_with('\n') {
        let keep = text.rfind('\n').map_or(0, |i| i + 1);
        f.set_len(keep as u64)?;
        f.seek(SeekFrom::End(0))?;
        text.truncate(keep);
    }
    if text.is_empty() {
        f.write_all(CSV_HEADER.as_bytes())?;
        f.sync_data()?;
    }
    Ok(f)
}

fn csv_line(r: &Rating) -> String {
    let field = |s: &str| {
        if s.contains([',', '"', '\n']) {
            format!("\"{}\"", s.replace('"', "\"\""))
        } else {
            s.to_string()
        }
    };
    format!(
        "{},{},{},{}\n",
        field(&r.participant_id),
        field(&r.stimulus_id),
        r.score,
        field(&r.timestamp_iso8601)
    )
}

fn append(f: &mut File, line: &str) -> std::io::Result<()> {
    f.write_all(line.as_bytes())?;
    f.sync_data()
}

impl Service {
    pub fn open(cfg: &ServiceConfig) -> anyhow::Result<Self> {
        let stimuli = load_index(&cfg.stimuli_dir)?;
        let by_id: HashMap<String, usize> = stimuli.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        let flagged: Vec<usize> = (0..stimuli.len()).filter(|&i| stimuli[i].is_training).collect();
        let (training_set, rating_set) = if flagged.is_empty() {
            ((0..cfg.training_count.min(stimuli.len())).collect(), (0..stimuli.len()).collect())
        } else {
            (flagged, (0..stimuli.len()).filter(|&i| !stimuli[i].is_training).collect())
        };

        let ratings_path = &cfg.ratings_path;
        let mut ratings = open_csv(ratings_path)?;
        let mut training = open_csv(&training_ratings_path(ratings_path))?;
        let jpath = journal_path(ratings_path);
        let events = read_journal(&jpath)?;
        let journal = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&jpath)
            .with_context(|| format!("opening {}", jpath.display()))?;

        let mut sessions = HashMap::new();
        let existing: HashSet<String> = [ratings_path.to_path_buf(), training_ratings_path(ratings_path)]
            .iter()
            .flat_map(|p| std::fs::read_to_string(p).unwrap_or_default().lines().map(str::to_string).collect::<Vec<_>>())
            .collect();
        for ev in events {
            match ev {
                JournalEvent::Create {
                    session_id,
                    participant_id,
                    playlist,
                    training_count,
                    ..
                } => {
                    let playlist = playlist
                        .iter()
                        .map(|id| by_id.get(id).copied().with_context(|| format!("journal names unknown stimulus `{id}`")))
                        .collect::<anyhow::Result<Vec<_>>>()?;
                    sessions.insert(
                        session_id.clone(),
                        Session {
                            id: session_id,
                            participant_id,
                            playlist,
                            training_count,
                            cursor: 0,
                            served: None,
                        },
                    );
                }
                JournalEvent::Rating {
                    session_id,
                    position,
                    stimulus_id,
                    score,
                    training: is_training,
                    timestamp,
                } => {
                    let s = sessions.get_mut(&session_id).with_context(|| format!("journal rating for unknown session `{session_id}`"))?;
                    if position != s.cursor {
                        bail!("journal out of order for session `{session_id}`");
                    }
                    s.cursor += 1;
                    let line = csv_line(&Rating {
                        participant_id: s.participant_id.clone(),
                        stimulus_id,
                        score,
                        timestamp_iso8601: timestamp,
                    });
                    if !existing.contains(line.trim_end()) {
                        append(if is_training { &mut training } else { &mut ratings }, &line)?;
                    }
                }
            }
        }
        let next_id = sessions.len() + 1;
        Ok(Self {
            stimuli_dir: cfg.stimuli_dir.clone(),
            stimuli,
            by_id,
            training_set,
            rating_set,
            sessions: std::sync::RwLock::new(sessions.into_iter().map(|(k, v)| (k, Arc::new(Mutex::new(v)))).collect()),
            store: Mutex::new(Store {
                journal,
                ratings,
                training,
                next_id,
            }),
        })
    }

    fn session(&self, id: &str) -> Option<Arc<Mutex<Session>>> {
        self.sessions.read().unwrap().get(id).cloned()
    }

    fn stimulus_json(&self, i: usize) -> serde_json::Value {
        let s = &self.stimuli[i];
        json!({
            "id": s.id,
            "base_model": s.base_model,
            "distortion_kind": s.distortion_kind,
            "level": s.level,
            "is_training": s.is_training,
        })
    }

    fn progress_json(&self, s: &Session) -> serde_json::Value {
        json!({
            "session_id": s.id,
            "phase": s.phase(),
            "cursor": s.cursor,
            "total": s.playlist.len(),
            "training_total": s.training_count,
            "rated_training": s.cursor.min(s.training_count),
            "rated": s.cursor.saturating_sub(s.training_count),
        })
    }
}

/// Reads journal events, ignoring a torn final line.
fn read_journal(path: &Path) -> anyhow::Result<Vec<JournalEvent>> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e).with_context(|| format!("opening {}", path.display())),
    };
    let lines: Vec<String> = BufReader::new(f).lines().collect::<std::io::Result<_>>()?;
    let mut events = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(ev) => events.push(ev),
            Err(_) if i + 1 == lines.len() => {
                let keep: usize = lines[..i].iter().map(|l| l.len() + 1).sum();
                OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
            }
            Err(e) => return Err(e).with_context(|| format!("{}:{}", path.display(), i + 1)),
        }
    }
    Ok(events)
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/:id/current", get(current))
        .route("/v1/sessions/:id/rating", post(rate))
        .route("/v1/sessions/:id/progress", get(progress))
        .route("/v1/stimuli/:sid/video", get(video))
        .with_state(service)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn unknown_session(id: &str) -> Response {
    error(StatusCode::NOT_FOUND, format!("unknown session `{id}`"))
}

#[derive(Deserialize)]
struct CreateBody {
    participant_id: String,
    seed: u64,
}

async fn create_session(State(svc): State<Arc<Service>>, body: Option<Json<CreateBody>>) -> Response {
    let Some(Json(body)) = body else {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "expected {\"participant_id\": string, \"seed\": integer}");
    };
    if body.participant_id.trim().is_empty() {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "participant_id must not be empty");
    }
    let order = playlist(&svc.training_set, &svc.rating_set, body.seed);
    let mut store = svc.store.lock().await;
    let id = format!("s{:06}", store.next_id);
    let ev = JournalEvent::Create {
        session_id: id.clone(),
        participant_id: body.participant_id.clone(),
        seed: body.seed,
        playlist: order.iter().map(|&i| svc.stimuli[i].id.clone()).collect(),
        training_count: svc.training_set.len(),
        created: chrono::Utc::now().to_rfc3339(),
    };
    let line = serde_json::to_string(&ev).unwrap() + "\n";
    if let Err(e) = append(&mut store.journal, &line) {
        return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    }
    store.next_id += 1;
    let session = Session {
        id: id.clone(),
        participant_id: body.participant_id,
        playlist: order,
        training_count: svc.training_set.len(),
        cursor: 0,
        served: None,
    };
    let length = session.playlist.len();
    svc.sessions.write().unwrap().insert(id.clone(), Arc::new(Mutex::new(session)));
    (
        StatusCode::CREATED,
        Json(json!({
            "session_id": id,
            "playlist_length": length,
            "training_count": svc.training_set.len(),
        })),
    )
        .into_response()
}

async fn current(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> Response {
    let Some(session) = svc.session(&id) else {
        return unknown_session(&id);
    };
    let s = session.lock().await;
    let mut body = svc.progress_json(&s);
    if let Some(&i) = s.playlist.get(s.cursor) {
        body["stimulus"] = svc.stimulus_json(i);
        body["video_url"] = json!(format!("/v1/stimuli/{}/video?session={}", svc.stimuli[i].id, s.id));
    } else {
        body["stimulus"] = serde_json::Value::Null;
        body["video_url"] = serde_json::Value::Null;
    }
    Json(body).into_response()
}

async fn progress(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> Response {
    let Some(session) = svc.session(&id) else {
        return unknown_session(&id);
    };
    let s = session.lock().await;
    Json(svc.progress_json(&s)).into_response()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RatingBody {
    Bare(i64),
    Object { score: i64 },
}

async fn rate(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>, body: Option<Json<RatingBody>>) -> Response {
    let Some(session) = svc.session(&id) else {
        return unknown_session(&id);
    };
    let score = match body {
        Some(Json(RatingBody::Bare(v) | RatingBody::Object { score: v })) => v,
        None => return error(StatusCode::UNPROCESSABLE_ENTITY, "expected an integer score"),
    };
    if !(i64::from(SCALE_MIN)..=i64::from(SCALE_MAX)).contains(&score) {
        return error(StatusCode::UNPROCESSABLE_ENTITY, format!("score {score} is outside {SCALE_MIN}..={SCALE_MAX}"));
    }
    let mut s = session.lock().await;
    if s.phase() == Phase::Done {
        return error(StatusCode::CONFLICT, "session is complete");
    }
    if s.served != Some(s.cursor) {
        return error(StatusCode::CONFLICT, "the current video has not been served yet");
    }
    let stim = s.playlist[s.cursor];
    let is_training = s.cursor < s.training_count;
    let timestamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
    let rating = Rating {
        participant_id: s.participant_id.clone(),
        stimulus_id: svc.stimuli[stim].id.clone(),
        score: score as u8,
        timestamp_iso8601: timestamp.clone(),
    };
    let ev = JournalEvent::Rating {
        session_id: s.id.clone(),
        position: s.cursor,
        stimulus_id: rating.stimulus_id.clone(),
        score: rating.score,
        training: is_training,
        timestamp,
    };
    {
        let mut store = svc.store.lock().await;
        let line = serde_json::to_string(&ev).unwrap() + "\n";
        if let Err(e) = append(&mut store.journal, &line) {
            return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
        }
        let target = if is_training { &mut store.training } else { &mut store.ratings };
        if let Err(e) = append(target, &csv_line(&rating)) {
            return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
        }
    }
    s.cursor += 1;
    s.served = None;
    let mut body = svc.progress_json(&s);
    body["recorded"] = json!({ "stimulus_id": rating.stimulus_id, "score": rating.score, "training": is_training });
    Json(body).into_response()
}

#[derive(Deserialize)]
struct VideoQuery {
    session: Option<String>,
}

/// Parses a single `bytes=` range against a body of `len` bytes.
fn parse_range(value: &str, len: u64) -> Option<std::result::Result<(u64, u64), ()>> {
    let spec = value.trim().strip_prefix("bytes=")?;
    if spec.contains(',') {
        return None; // multiple ranges: serve the whole body
    }
    let (a, b) = spec.split_once('-')?;
    let range = match (a.trim(), b.trim()) {
        ("", "") => return Some(Err(())),
        ("", n) => {
            let n: u64 = n.parse().ok()?;
            if n == 0 || len == 0 {
                return Some(Err(()));
            }
            (len.saturating_sub(n), len - 1)
        }
        (s, e) => {
            let s: u64 = s.parse().ok()?;
            let e: u64 = if e.is_empty() { len.saturating_sub(1) } else { e.parse().ok()? };
            if s >= len || e < s {
                return Some(Err(()));
            }
            (s, e.min(len - 1))
        }
    };
    Some(Ok(range))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("mp4") | Some("m4v") => "video/mp4",
        Some("webm") => "video/webm",
        Some("mov") => "video/quicktime",
        Some("ogv") => "video/ogg",
        _ => "application/octet-stream",
    }
}

async fn video(
    State(svc): State<Arc<Service>>,
    UrlPath(sid): UrlPath<String>,
    Query(q): Query<VideoQuery>,
    headers: HeaderMap,
) -> Response {
    let Some(&i) = svc.by_id.get(&sid) else {
        return error(StatusCode::NOT_FOUND, format!("unknown stimulus `{sid}`"));
    };
    let path = svc.stimuli_dir.join(&svc.stimuli[i].video_path);
    let bytes = match tokio::fs::read(&path).await {
        Ok(b) => b,
        Err(e) => return error(StatusCode::NOT_FOUND, format!("video for `{sid}` unavailable: {e}")),
    };
    if let Some(sess) = q.session.as_deref() {
        let Some(session) = svc.session(sess) else {
            return unknown_session(sess);
        };
        let mut s = session.lock().await;
        if s.playlist.get(s.cursor) == Some(&i) {
            s.served = Some(s.cursor);
        }
    }
    let len = bytes.len() as u64;
    let ctype = content_type(&path);
    let range = headers.get(header::RANGE).and_then(|v| v.to_str().ok()).and_then(|v| parse_range(v, len));
    match range {
        Some(Ok((start, end))) => (
            StatusCode::PARTIAL_CONTENT,
            [
                (header::CONTENT_TYPE, ctype.to_string()),
                (header::ACCEPT_RANGES, "bytes".into()),
                (header::CONTENT_RANGE, format!("bytes {start}-{end}/{len}")),
            ],
            Body::from(bytes[start as usize..=end as usize].to_vec()),
        )
            .into_response(),
        Some(Err(())) => (
            StatusCode::RANGE_NOT_SATISFIABLE,
            [(header::CONTENT_RANGE, format!("bytes */{len}"))],
        )
            .into_response(),
        None => (
            StatusCode::OK,
            [
                (header::CONTENT_TYPE, ctype.to_string()),
                (header::ACCEPT_RANGES, "bytes".into()),
            ],
            Body::from(bytes),
        )
            .into_response(),
    }
}
