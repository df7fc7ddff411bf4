//! Search sessions: state machine and bounded in-memory store.

use std::sync::Mutex;

use indexmap::IndexMap;
use needle_core::adapter::{encode_png, encode_png_b64, ErrorBody};
use needle_core::anomaly::AnomalyReport;
use needle_core::generation::FeedbackMode;
use needle_core::pipeline::ResultRow;
use needle_core::{GuideId, GuideTuple, QuerySpec, RankedList, Raster, ScoredImage};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// Longest side of a guide thumbnail.
pub const GUIDE_THUMB: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Generating,
    AwaitingReview,
    Searching,
    Done,
    Failed,
}

impl SessionState {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Done | Self::Failed)
    }

    /// generating -> (awaiting_review) -> searching -> done, and any live
    /// state -> failed.
    pub fn may_become(self, next: SessionState, mode: FeedbackMode) -> bool {
        use SessionState::*;
        match (self, next) {
            (Generating, AwaitingReview) => mode == FeedbackMode::On,
            (Generating, Searching) => mode == FeedbackMode::Off,
            (AwaitingReview, Searching) | (Searching, Done) => true,
            (s, Failed) => !s.is_terminal(),
            _ => false,
        }
    }
}

/// Scales `raster` so its longer side is at most `max_side`, then PNG-encodes.
pub fn thumbnail_png(raster: &Raster, max_side: u32) -> Vec<u8> {
    let (w, h) = raster.dimensions();
    if w.max(h) <= max_side {
        return encode_png(raster);
    }
    encode_png(&image::imageops::thumbnail(raster, (w * max_side / w.max(h)).max(1), (h * max_side / w.max(h)).max(1)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuideView {
    pub guide_id: GuideId,
    pub generator_id: String,
    pub seed: u64,
    pub prompt_used: String,
    pub discarded: bool,
    pub reason: Option<String>,
    /// Thumbnail, base64 PNG.
    pub png_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuideSummary {
    pub guide_id: GuideId,
    pub generator_id: String,
    pub seed: u64,
    pub discarded: bool,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub query_id: String,
    pub state: SessionState,
    pub text: String,
    pub topic: String,
    pub k: usize,
    pub feedback_mode: FeedbackMode,
    pub dataset: String,
    /// Unix milliseconds.
    pub created_at: u64,
    pub results: Vec<ResultRow>,
    pub guides: Vec<GuideSummary>,
    pub feedback_submitted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidesView {
    pub query_id: String,
    pub state: SessionState,
    pub guides: Vec<GuideView>,
}

pub struct Session {
    pub spec: QuerySpec,
    pub dataset: String,
    pub state: SessionState,
    pub created_at: u64,
    /// Full rasters while the pipeline may still need them.
    pub guides: Vec<GuideTuple>,
    pub thumbnails: Vec<String>,
    pub ranked: Vec<RankedList>,
    pub results: Vec<ScoredImage>,
    pub anomaly: Option<AnomalyReport>,
    pub feedback_submitted: bool,
    pub error: Option<ErrorBody>,
}

impl Session {
    pub fn new(spec: QuerySpec, dataset: String, created_at: u64) -> Self {
        Self {
            spec,
            dataset,
            state: SessionState::Generating,
            created_at,
            guides: Vec::new(),
            thumbnails: Vec::new(),
            ranked: Vec::new(),
            results: Vec::new(),
            anomaly: None,
            feedback_submitted: false,
            error: None,
        }
    }

    pub fn advance(&mut self, next: SessionState) -> Result<(), ServiceError> {
        if !self.state.may_become(next, self.spec.feedback_mode) {
            return Err(ServiceError::conflict(
                "invalid_state",
                format!(
                    "session {} cannot go from {:?} to {next:?}",
                    self.spec.query_id, self.state
                ),
            ));
        }
        self.state = next;
        Ok(())
    }

    pub fn set_guides(&mut self, guides: Vec<GuideTuple>) {
        self.thumbnails = guides.iter().map(|g| thumbnail_b64(&g.image)).collect();
        self.guides = guides;
    }

    /// Drops full-size guide rasters; thumbnails stay.
    pub fn release_rasters(&mut self) {
        for g in &mut self.guides {
            g.image = Raster::new(0, 0);
        }
    }

    pub fn fail(&mut self, err: &ServiceError) {
        if self.state.may_become(SessionState::Failed, self.spec.feedback_mode) {
            self.state = SessionState::Failed;
            self.error = Some(err.body());
            self.release_rasters();
        }
    }

    pub fn view(&self) -> SessionView {
        SessionView {
            query_id: self.spec.query_id.clone(),
            state: self.state,
            text: self.spec.text.clone(),
            topic: self.spec.topic.clone(),
            k: self.spec.k,
            feedback_mode: self.spec.feedback_mode,
            dataset: self.dataset.clone(),
            created_at: self.created_at,
            results: needle_core::pipeline::QueryResult::new(&self.spec.query_id, &self.results, &[]).results,
            guides: self
                .guides
                .iter()
                .map(|g| GuideSummary {
                    guide_id: g.guide_id,
                    generator_id: g.generator_id.clone(),
                    seed: g.seed,
                    discarded: g.discarded,
                    reason: g.reason.clone(),
                })
                .collect(),
            feedback_submitted: self.feedback_submitted,
            error: self.error.clone(),
        }
    }

    pub fn guides_view(&self) -> GuidesView {
        GuidesView {
            query_id: self.spec.query_id.clone(),
            state: self.state,
            guides: self
                .guides
                .iter()
                .zip(&self.thumbnails)
                .map(|(g, png)| GuideView {
                    guide_id: g.guide_id,
                    generator_id: g.generator_id.clone(),
                    seed: g.seed,
                    prompt_used: g.prompt_used.clone(),
                    discarded: g.discarded,
                    reason: g.reason.clone(),
                    png_b64: png.clone(),
                })
                .collect(),
        }
    }
}

fn thumbnail_b64(raster: &Raster) -> String {
    let (w, h) = raster.dimensions();
    if w.max(h) <= GUIDE_THUMB {
        return encode_png_b64(raster);
    }
    use base64::Engine as _;
    base64::engine::general_purpose::STANDARD.encode(thumbnail_png(raster, GUIDE_THUMB))
}

/// Least-recently-used session map. Reads and writes both count as use.
pub struct SessionStore {
    capacity: usize,
    map: Mutex<IndexMap<String, Session>>,
}

impl SessionStore {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            map: Mutex::new(IndexMap::new()),
        }
    }

    pub fn insert(&self, session: Session) {
        let mut map = self.map.lock().expect("session lock");
        map.shift_remove(&session.spec.query_id);
        while map.len() >= self.capacity {
            map.shift_remove_index(0);
        }
        map.insert(session.spec.query_id.clone(), session);
    }

    /// Runs `f` on the session, marking it most recently used.
    pub fn with<T>(&self, query_id: &str, f: impl FnOnce(&mut Session) -> T) -> Result<T, ServiceError> {
        let mut map = self.map.lock().expect("session lock");
        let idx = map
            .get_index_of(query_id)
            .ok_or_else(|| ServiceError::not_found("query", query_id))?;
        let last = map.len() - 1;
        map.move_index(idx, last);
        Ok(f(&mut map[last]))
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("session lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use SessionState::*;

    fn spec(id: &str, mode: FeedbackMode) -> QuerySpec {
        QuerySpec {
            query_id: id.into(),
            text: "t".into(),
            topic: "general".into(),
            k: 5,
            feedback_mode: mode,
        }
    }

    #[test]
    fn legal_transitions_only() {
        let all = [Generating, AwaitingReview, Searching, Done, Failed];
        let legal_off = [(Generating, Searching), (Searching, Done), (Generating, Failed), (Searching, Failed), (AwaitingReview, Searching), (AwaitingReview, Failed)];
        for a in all {
            for b in all {
                let off = a.may_become(b, FeedbackMode::Off);
                assert_eq!(off, legal_off.contains(&(a, b)), "{a:?} -> {b:?} off");
                let on = a.may_become(b, FeedbackMode::On);
                let want_on = (a, b) == (Generating, AwaitingReview) || (legal_off.contains(&(a, b)) && (a, b) != (Generating, Searching));
                assert_eq!(on, want_on, "{a:?} -> {b:?} on");
            }
        }
    }

    #[test]
    fn advance_rejects_skips() {
        let mut s = Session::new(spec("q", FeedbackMode::Off), "d".into(), 0);
        assert!(s.advance(AwaitingReview).is_err());
        assert!(s.advance(Done).is_err());
        s.advance(Searching).unwrap();
        s.advance(Done).unwrap();
        assert_eq!(s.advance(Failed).unwrap_err().code(), "invalid_state");
    }

    #[test]
    fn lru_evicts_least_recently_used() {
        let store = SessionStore::new(2);
        store.insert(Session::new(spec("a", FeedbackMode::Off), "d".into(), 0));
        store.insert(Session::new(spec("b", FeedbackMode::Off), "d".into(), 0));
        store.with("a", |_| ()).unwrap();
        store.insert(Session::new(spec("c", FeedbackMode::Off), "d".into(), 0));
        assert_eq!(store.len(), 2);
        assert!(store.with("a", |_| ()).is_ok());
        assert_eq!(store.with("b", |_| ()).unwrap_err().code(), "not_found");
    }

    #[test]
    fn thumbnails_are_bounded() {
        let big = Raster::new(800, 400);
        let t = needle_core::adapter::decode_image(&thumbnail_png(&big, 256)).unwrap();
        assert_eq!(t.dimensions(), (256, 128));
        let small = Raster::new(10, 10);
        assert_eq!(thumbnail_png(&small, 256), encode_png(&small));
    }
}
