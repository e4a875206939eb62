//! Pairwise win/tie/lose rating sessions.
//!
//! Each item compares a focal plan ("left", e.g. the bridged method) with an
//! alternative ("right"). Raters see the two as Sequence 1 / Sequence 2 in an
//! order fixed per item by `shuffle_bit`, never the method labels. Storage is
//! an append-only JSON Lines log per session, fsynced before every ack, plus a
//! periodic snapshot that bounds replay time.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use parking_lot::{Mutex, RwLock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{sha256_hex, write_atomic};
use crate::plan::{Goal, Method, MultimodalPlan};

pub const DEFAULT_RATERS_PER_ITEM: usize = 3;
pub const DEFAULT_LEASE: Duration = Duration::from_secs(30 * 60);
const SNAPSHOT_EVERY: usize = 100;

pub const INSTRUCTION: &str = "Given the Task (e.g, Task: How to muddle), please compare two sequences of steps Sequence 1 and Sequence 2, and determine which sequence is better in terms of four aspects:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aspect {
    TextualInformativeness,
    VisualInformativeness,
    TemporalCoherence,
    PlanAccuracy,
}

impl Aspect {
    pub const ALL: [Aspect; 4] =
        [Aspect::TextualInformativeness, Aspect::VisualInformativeness, Aspect::TemporalCoherence, Aspect::PlanAccuracy];

    pub fn as_str(self) -> &'static str {
        match self {
            Aspect::TextualInformativeness => "textual_informativeness",
            Aspect::VisualInformativeness => "visual_informativeness",
            Aspect::TemporalCoherence => "temporal_coherence",
            Aspect::PlanAccuracy => "plan_accuracy",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Aspect::TextualInformativeness => "Textual-Informativeness",
            Aspect::VisualInformativeness => "Visual-Informativeness",
            Aspect::TemporalCoherence => "Temporal Coherence",
            Aspect::PlanAccuracy => "Plan Accuracy",
        }
    }

    /// Definition shown to raters.
    pub fn definition(self) -> &'static str {
        match self {
            Aspect::TextualInformativeness => "Textual-Informativeness: whether the textual sequence (the sequence of texts) contains the amount of information needed to complete the task.",
            Aspect::VisualInformativeness => "Visual-Informativeness: whether the visual sequence (the sequence of images) contains the amount of information needed to complete the task.",
            Aspect::TemporalCoherence => "Temporal Coherence: whether the multimodal sequence (the paired sequence of texts and images) meets the temporal commonsense requirements, such as a step occurring before another step instead of after.",
            Aspect::PlanAccuracy => "Plan Accuracy: whether the multimodal sequence (the paired sequence of texts and images) can successfully complete the task.",
        }
    }
}

impl FromStr for Aspect {
    type Err = RaterError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Aspect::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| RaterError::UnknownAspect(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Seq1Better,
    Tie,
    Seq2Better,
}

impl Choice {
    pub const OPTIONS: [(Choice, &'static str); 3] = [
        (Choice::Seq1Better, "1 - Sequence 1 is better"),
        (Choice::Tie, "2 - Tie"),
        (Choice::Seq2Better, "3 - Sequence 2 is better"),
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Choice::Seq1Better => "seq1_better",
            Choice::Tie => "tie",
            Choice::Seq2Better => "seq2_better",
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Choice::Seq1Better => Choice::Seq2Better,
            Choice::Tie => Choice::Tie,
            Choice::Seq2Better => Choice::Seq1Better,
        }
    }
}

impl FromStr for Choice {
    type Err = RaterError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Choice::Seq1Better, Choice::Tie, Choice::Seq2Better]
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| RaterError::InvalidChoice(s.to_string()))
    }
}

/// Result for the focal (left) plan after undoing the presentation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Win,
    Tie,
    Lose,
}

pub fn deshuffle(choice: Choice, shuffle_bit: bool) -> Outcome {
    match (choice, shuffle_bit) {
        (Choice::Tie, _) => Outcome::Tie,
        (Choice::Seq1Better, false) | (Choice::Seq2Better, true) => Outcome::Win,
        _ => Outcome::Lose,
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RaterError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("duplicate item id `{0}`")]
    DuplicateItem(String),
    #[error("session needs at least one item")]
    NoItems,
    #[error("raters_per_item must be at least 1")]
    BadQuota,
    #[error("missing aspect `{}`", .0.as_str())]
    MissingAspect(Aspect),
    #[error("unknown aspect `{0}`")]
    UnknownAspect(String),
    #[error("invalid choice `{0}`")]
    InvalidChoice(String),
    #[error("rater `{rater}` already rated item `{item}`")]
    AlreadySubmitted { item: String, rater: String },
    #[error("item `{0}` has no remaining quota")]
    QuotaExhausted(String),
    #[error("empty rater id")]
    EmptyRater,
    #[error("storage: {0}")]
    Storage(String),
}

impl From<std::io::Error> for RaterError {
    fn from(e: std::io::Error) -> Self {
        RaterError::Storage(e.to_string())
    }
}

/// Item as submitted when creating a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSpec {
    pub id: String,
    pub left: MultimodalPlan,
    pub right: MultimodalPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonItem {
    pub id: String,
    pub goal: Goal,
    pub left: MultimodalPlan,
    pub right: MultimodalPlan,
    pub shuffle_bit: bool,
}

impl ComparisonItem {
    pub fn method_of_left(&self) -> Method {
        self.left.method
    }

    /// `"{left} vs {right}"`
    pub fn pair(&self) -> String {
        format!("{} vs {}", self.left.method, self.right.method)
    }

    /// Plans in presentation order.
    pub fn presented(&self) -> (&MultimodalPlan, &MultimodalPlan) {
        if self.shuffle_bit {
            (&self.right, &self.left)
        } else {
            (&self.left, &self.right)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepView {
    pub text: String,
    pub image_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectView {
    pub key: String,
    pub label: String,
    pub definition: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionView {
    pub value: String,
    pub label: String,
}

/// What a rater is shown: no method names, no shuffle bit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentView {
    pub item_id: String,
    pub goal_title: String,
    pub sequence_1: Vec<StepView>,
    pub sequence_2: Vec<StepView>,
    pub instruction: String,
    pub aspects: Vec<AspectView>,
    pub options: Vec<OptionView>,
}

impl AssignmentView {
    pub fn new(item: &ComparisonItem, image_base: &str) -> Self {
        let view = |p: &MultimodalPlan| {
            p.steps
                .iter()
                .map(|s| StepView {
                    text: s.text.clone(),
                    image_url: s.image.as_ref().map(|h| format!("{}/{}", image_base.trim_end_matches('/'), h.locator)),
                })
                .collect()
        };
        let (one, two) = item.presented();
        AssignmentView {
            item_id: item.id.clone(),
            goal_title: item.goal.title.clone(),
            sequence_1: view(one),
            sequence_2: view(two),
            instruction: INSTRUCTION.to_string(),
            aspects: Aspect::ALL
                .iter()
                .map(|a| AspectView {
                    key: a.as_str().into(),
                    label: a.label().into(),
                    definition: a.definition().into(),
                })
                .collect(),
            options: Choice::OPTIONS
                .iter()
                .map(|(c, l)| OptionView { value: c.as_str().into(), label: (*l).into() })
                .collect(),
        }
    }
}

/// A rating as received over the wire; validated into [`Rating`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingSubmission {
    pub item_id: String,
    pub rater: String,
    pub choices: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub item_id: String,
    pub rater: String,
    pub choices: BTreeMap<Aspect, Choice>,
    /// seconds since the Unix epoch
    pub timestamp: u64,
}

impl RatingSubmission {
    pub fn validate(&self) -> Result<Rating, RaterError> {
        if self.rater.trim().is_empty() {
            return Err(RaterError::EmptyRater);
        }
        let mut choices = BTreeMap::new();
        for (k, v) in &self.choices {
            choices.insert(k.parse::<Aspect>()?, v.parse::<Choice>()?);
        }
        if let Some(missing) = Aspect::ALL.into_iter().find(|a| !choices.contains_key(a)) {
            return Err(RaterError::MissingAspect(missing));
        }
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Ok(Rating { item_id: self.item_id.clone(), rater: self.rater.clone(), choices, timestamp })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateMode {
    /// every rating counts once
    #[default]
    Pooled,
    /// one vote per item: the outcome with a strict plurality, else tie
    Majority,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Cell {
    pub win: f64,
    pub tie: f64,
    pub lose: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AggregateTable {
    pub mode: AggregateMode,
    pub ratings: usize,
    /// method pair → aspect → percentages
    pub pairs: BTreeMap<String, BTreeMap<Aspect, Cell>>,
}

/// Win/tie/lose percentages per method pair and aspect, after de-shuffling.
pub fn aggregate(items: &[ComparisonItem], ratings: &[Rating], mode: AggregateMode) -> AggregateTable {
    let by_id: HashMap<&str, &ComparisonItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    // pair → aspect → item → outcomes
    let mut votes: BTreeMap<String, BTreeMap<Aspect, BTreeMap<&str, Vec<Outcome>>>> = BTreeMap::new();
    let mut counted = 0;
    for r in ratings {
        let Some(item) = by_id.get(r.item_id.as_str()) else { continue };
        counted += 1;
        for (aspect, choice) in &r.choices {
            votes
                .entry(item.pair())
                .or_default()
                .entry(*aspect)
                .or_default()
                .entry(item.id.as_str())
                .or_default()
                .push(deshuffle(*choice, item.shuffle_bit));
        }
    }
    let mut pairs = BTreeMap::new();
    for (pair, aspects) in votes {
        let mut row = BTreeMap::new();
        for (aspect, per_item) in aspects {
            let mut counts: BTreeMap<Outcome, usize> = BTreeMap::new();
            for outcomes in per_item.values() {
                match mode {
                    AggregateMode::Pooled => {
                        for o in outcomes {
                            *counts.entry(*o).or_default() += 1;
                        }
                    }
                    AggregateMode::Majority => *counts.entry(majority(outcomes)).or_default() += 1,
                }
            }
            let n: usize = counts.values().sum();
            let pct = |o: Outcome| 100.0 * counts.get(&o).copied().unwrap_or(0) as f64 / n as f64;
            row.insert(aspect, Cell { win: pct(Outcome::Win), tie: pct(Outcome::Tie), lose: pct(Outcome::Lose), n });
        }
        pairs.insert(pair, row);
    }
    AggregateTable { mode, ratings: counted, pairs }
}

fn majority(outcomes: &[Outcome]) -> Outcome {
    let mut counts: BTreeMap<Outcome, usize> = BTreeMap::new();
    for o in outcomes {
        *counts.entry(*o).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    let leaders: Vec<Outcome> = counts.iter().filter(|(_, &c)| c == best).map(|(o, _)| *o).collect();
    if leaders.len() == 1 {
        leaders[0]
    } else {
        Outcome::Tie
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Event {
    Created { session_id: String, raters_per_item: usize, items: Vec<ComparisonItem> },
    Rating { rating: Rating },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Snapshot {
    events: usize,
    session_id: String,
    raters_per_item: usize,
    items: Vec<ComparisonItem>,
    ratings: Vec<Rating>,
}

/// Read-only view of a session's durable state.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionSnapshot {
    pub session_id: String,
    pub raters_per_item: usize,
    pub items: Arc<Vec<ComparisonItem>>,
    pub ratings: Arc<Vec<Rating>>,
}

impl SessionSnapshot {
    pub fn quota(&self) -> usize {
        self.items.len() * self.raters_per_item
    }

    pub fn aggregate(&self, mode: AggregateMode) -> AggregateTable {
        aggregate(&self.items, &self.ratings, mode)
    }

    pub fn ratings_for(&self, item_id: &str) -> usize {
        self.ratings.iter().filter(|r| r.item_id == item_id).count()
    }
}

struct Lease {
    rater: String,
    expires: Instant,
}

struct Writer {
    dir: PathBuf,
    log: File,
    events: usize,
    rated: HashMap<String, BTreeSet<String>>,
    leases: HashMap<String, Vec<Lease>>,
}

struct Session {
    writer: Mutex<Writer>,
    snapshot: RwLock<SessionSnapshot>,
    lease: Duration,
}

impl Session {
    fn index_of(&self, snap: &SessionSnapshot, item_id: &str) -> Result<usize, RaterError> {
        snap.items.iter().position(|i| i.id == item_id).ok_or_else(|| RaterError::UnknownItem(item_id.to_string()))
    }
}

fn append(log: &mut File, event: &Event) -> Result<(), RaterError> {
    let mut line = serde_json::to_string(event).map_err(|e| RaterError::Storage(e.to_string()))?;
    line.push('\n');
    log.write_all(line.as_bytes())?;
    log.sync_data()?;
    Ok(())
}

/// All rating sessions under one directory.
pub struct RaterStore {
    dir: PathBuf,
    lease: Duration,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    counter: Mutex<u64>,
}

impl RaterStore {
    /// Opens (and replays) every session under `dir/sessions`.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, RaterError> {
        Self::open_with_lease(dir, DEFAULT_LEASE)
    }

    pub fn open_with_lease(dir: impl Into<PathBuf>, lease: Duration) -> Result<Self, RaterError> {
        let dir = dir.into();
        let root = dir.join("sessions");
        fs::create_dir_all(&root)?;
        let mut sessions = HashMap::new();
        let mut entries: Vec<PathBuf> = fs::read_dir(&root)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for path in entries.into_iter().filter(|p| p.join("log.jsonl").exists()) {
            let s = load_session(&path, lease)?;
            let id = s.snapshot.read().session_id.clone();
            sessions.insert(id, Arc::new(s));
        }
        Ok(RaterStore { dir, lease, sessions: RwLock::new(sessions), counter: Mutex::new(0) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, RaterError> {
        self.sessions.read().get(id).cloned().ok_or_else(|| RaterError::UnknownSession(id.to_string()))
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Creates a session with a fresh shuffle bit per item. `seed` pins the
    /// shuffle bits (and the id) for reproducible sessions.
    pub fn create_session(
        &self,
        items: Vec<ItemSpec>,
        raters_per_item: usize,
        seed: Option<u64>,
    ) -> Result<String, RaterError> {
        if items.is_empty() {
            return Err(RaterError::NoItems);
        }
        if raters_per_item == 0 {
            return Err(RaterError::BadQuota);
        }
        let mut seen = BTreeSet::new();
        for i in &items {
            if !seen.insert(i.id.as_str()) {
                return Err(RaterError::DuplicateItem(i.id.clone()));
            }
        }
        let nonce = {
            let mut c = self.counter.lock();
            *c += 1;
            let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_nanos());
            format!("{now}:{}:{}", *c, std::process::id())
        };
        let seed = seed.unwrap_or_else(|| u64::from_le_bytes(crate::backends::sha256_bytes(&nonce)[..8].try_into().expect("8 bytes")));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items: Vec<ComparisonItem> = items
            .into_iter()
            .map(|s| ComparisonItem { id: s.id, goal: s.left.goal.clone(), left: s.left, right: s.right, shuffle_bit: rng.random() })
            .collect();
        let ids: Vec<&str> = items.iter().map(|i| i.id.as_str()).collect();
        let mut session_id = sha256_hex(format!("{seed}:{nonce}:{}", ids.join(",")))[..16].to_string();
        while self.sessions.read().contains_key(&session_id) {
            session_id = sha256_hex(&session_id)[..16].to_string();
        }

        let dir = self.dir.join("sessions").join(&session_id);
        fs::create_dir_all(&dir)?;
        let mut log = OpenOptions::new().create(true).append(true).open(dir.join("log.jsonl"))?;
        append(&mut log, &Event::Created { session_id: session_id.clone(), raters_per_item, items: items.clone() })?;
        let session = Session {
            writer: Mutex::new(Writer { dir, log, events: 1, rated: HashMap::new(), leases: HashMap::new() }),
            snapshot: RwLock::new(SessionSnapshot {
                session_id: session_id.clone(),
                raters_per_item,
                items: Arc::new(items),
                ratings: Arc::new(Vec::new()),
            }),
            lease: self.lease,
        };
        self.sessions.write().insert(session_id.clone(), Arc::new(session));
        Ok(session_id)
    }

    /// Reserves an item for `rater`: one they have not rated whose stored
    /// ratings plus live reservations are below quota. A rater holding a live
    /// reservation gets the same item back.
    pub fn next_assignment(&self, session_id: &str, rater: &str) -> Result<Option<ComparisonItem>, RaterError> {
        if rater.trim().is_empty() {
            return Err(RaterError::EmptyRater);
        }
        let s = self.session(session_id)?;
        let mut w = s.writer.lock();
        let snap = s.snapshot.read().clone();
        let now = Instant::now();
        for leases in w.leases.values_mut() {
            leases.retain(|l| l.expires > now);
        }
        if let Some((id, _)) = w.leases.iter().find(|(_, ls)| ls.iter().any(|l| l.rater == rater)) {
            let idx = s.index_of(&snap, id)?;
            return Ok(Some(snap.items[idx].clone()));
        }
        for item in snap.items.iter() {
            let rated = w.rated.get(&item.id);
            if rated.is_some_and(|r| r.contains(rater)) {
                continue;
            }
            let used = rated.map_or(0, BTreeSet::len) + w.leases.get(&item.id).map_or(0, Vec::len);
            if used < snap.raters_per_item {
                w.leases.entry(item.id.clone()).or_default().push(Lease { rater: rater.to_string(), expires: now + s.lease });
                return Ok(Some(item.clone()));
            }
        }
        Ok(None)
    }

    /// Persists a rating exactly once. The rater must hold the item's
    /// reservation, or the item must still have unreserved quota.
    pub fn submit_rating(&self, session_id: &str, submission: &RatingSubmission) -> Result<Rating, RaterError> {
        let rating = submission.validate()?;
        let s = self.session(session_id)?;
        let mut guard = s.writer.lock();
        let w = &mut *guard;
        let snap = s.snapshot.read().clone();
        s.index_of(&snap, &rating.item_id)?;
        let now = Instant::now();
        let rated = w.rated.get(&rating.item_id).map_or(0, BTreeSet::len);
        if w.rated.get(&rating.item_id).is_some_and(|r| r.contains(&rating.rater)) {
            return Err(RaterError::AlreadySubmitted { item: rating.item_id.clone(), rater: rating.rater.clone() });
        }
        let leases = w.leases.entry(rating.item_id.clone()).or_default();
        leases.retain(|l| l.expires > now);
        let holds = leases.iter().any(|l| l.rater == rating.rater);
        if !holds && rated + leases.len() >= snap.raters_per_item {
            return Err(RaterError::QuotaExhausted(rating.item_id.clone()));
        }
        append(&mut w.log, &Event::Rating { rating: rating.clone() })?;
        w.events += 1;
        leases.retain(|l| l.rater != rating.rater);
        w.rated.entry(rating.item_id.clone()).or_default().insert(rating.rater.clone());

        let mut ratings = (*snap.ratings).clone();
        ratings.push(rating.clone());
        let next = SessionSnapshot { ratings: Arc::new(ratings), ..snap };
        if w.events % SNAPSHOT_EVERY == 0 {
            write_snapshot(&w.dir, w.events, &next)?;
        }
        *s.snapshot.write() = next;
        Ok(rating)
    }

    pub fn snapshot(&self, session_id: &str) -> Result<SessionSnapshot, RaterError> {
        Ok(self.session(session_id)?.snapshot.read().clone())
    }

    pub fn aggregate(&self, session_id: &str, mode: AggregateMode) -> Result<AggregateTable, RaterError> {
        Ok(self.snapshot(session_id)?.aggregate(mode))
    }
}

fn write_snapshot(dir: &Path, events: usize, s: &SessionSnapshot) -> Result<(), RaterError> {
    let snap = Snapshot {
        events,
        session_id: s.session_id.clone(),
        raters_per_item: s.raters_per_item,
        items: (*s.items).clone(),
        ratings: (*s.ratings).clone(),
    };
    let bytes = serde_json::to_vec(&snap).map_err(|e| RaterError::Storage(e.to_string()))?;
    write_atomic(&dir.join("snapshot.json"), &bytes).map_err(|e| RaterError::Storage(e.to_string()))
}

fn load_session(dir: &Path, lease: Duration) -> Result<Session, RaterError> {
    let storage = |msg: String| RaterError::Storage(format!("{}: {msg}", dir.display()));
    let mut state: Option<Snapshot> = match fs::read(dir.join("snapshot.json")) {
        Ok(bytes) => Some(serde_json::from_slice(&bytes).map_err(|e| storage(format!("snapshot: {e}")))?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    let skip = state.as_ref().map_or(0, |s| s.events);
    let reader = BufReader::new(File::open(dir.join("log.jsonl"))?);
    let mut events = 0;
    let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
    let last = lines.len();
    for (n, line) in lines.into_iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let event: Event = match serde_json::from_str(&line) {
            Ok(e) => e,
            // a torn final line was never acknowledged
            Err(_) if n + 1 == last => {
                tracing::warn!(dir = %dir.display(), "ignoring torn final log line");
                break;
            }
            Err(e) => return Err(storage(format!("log line {}: {e}", n + 1))),
        };
        events += 1;
        if events <= skip {
            continue;
        }
        match (event, state.as_mut()) {
            (Event::Created { session_id, raters_per_item, items }, None) => {
                state = Some(Snapshot { events: 0, session_id, raters_per_item, items, ratings: Vec::new() });
            }
            (Event::Rating { rating }, Some(s)) => s.ratings.push(rating),
            _ => return Err(storage(format!("unexpected event at log line {}", n + 1))),
        }
    }
    let state = state.ok_or_else(|| storage("empty log".into()))?;
    let mut rated: HashMap<String, BTreeSet<String>> = HashMap::new();
    for r in &state.ratings {
        rated.entry(r.item_id.clone()).or_default().insert(r.rater.clone());
    }
    let log = OpenOptions::new().append(true).open(dir.join("log.jsonl"))?;
    Ok(Session {
        writer: Mutex::new(Writer { dir: dir.to_path_buf(), log, events, rated, leases: HashMap::new() }),
        snapshot: RwLock::new(SessionSnapshot {
            session_id: state.session_id,
            raters_per_item: state.raters_per_item,
            items: Arc::new(state.items),
            ratings: Arc::new(state.ratings),
        }),
        lease,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::sample_plan;

    pub(crate) fn items(n: usize) -> Vec<ItemSpec> {
        (0..n)
            .map(|i| ItemSpec {
                id: format!("item-{i}"),
                left: sample_plan(Method::TipProcedure),
                right: sample_plan(Method::BaselineNoBridge),
            })
            .collect()
    }

    fn all(c: Choice, item: &str, rater: &str) -> RatingSubmission {
        RatingSubmission {
            item_id: item.into(),
            rater: rater.into(),
            choices: Aspect::ALL.iter().map(|a| (a.as_str().to_string(), c.as_str().to_string())).collect(),
        }
    }

    #[test]
    fn quota_and_exhaustion() {
        let dir = tempfile::tempdir().unwrap();
        let store = RaterStore::open(dir.path()).unwrap();
        let sid = store.create_session(items(2), 1, Some(1)).unwrap();
        assert_eq!(store.snapshot(&sid).unwrap().quota(), 2);
        let a = store.next_assignment(&sid, "r1").unwrap().unwrap();
        // same rater asks again before submitting: same item
        assert_eq!(store.next_assignment(&sid, "r1").unwrap().unwrap().id, a.id);
        let b = store.next_assignment(&sid, "r2").unwrap().unwrap();
        assert_ne!(a.id, b.id);
        assert!(store.next_assignment(&sid, "r3").unwrap().is_none());
        store.submit_rating(&sid, &all(Choice::Tie, &a.id, "r1")).unwrap();
        store.submit_rating(&sid, &all(Choice::Tie, &b.id, "r2")).unwrap();
        assert!(store.next_assignment(&sid, "r1").unwrap().is_none());
    }

    #[test]
    fn validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let store = RaterStore::open(dir.path()).unwrap();
        let mut dup = items(2);
        dup[1].id = dup[0].id.clone();
        assert_eq!(store.create_session(dup, 3, None), Err(RaterError::DuplicateItem("item-0".into())));
        assert_eq!(store.create_session(vec![], 3, None), Err(RaterError::NoItems));
        let sid = store.create_session(items(1), 3, None).unwrap();
        let mut r = all(Choice::Tie, "item-0", "r1");
        r.choices.remove("plan_accuracy");
        let err = store.submit_rating(&sid, &r).unwrap_err();
        assert_eq!(err.to_string(), "missing aspect `plan_accuracy`");
        assert!(matches!(store.submit_rating(&sid, &all(Choice::Tie, "nope", "r1")), Err(RaterError::UnknownItem(_))));
        assert!(matches!(store.next_assignment("zzz", "r1"), Err(RaterError::UnknownSession(_))));
    }

    #[test]
    fn resubmission_is_rejected_and_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let store = RaterStore::open(dir.path()).unwrap();
        let sid = store.create_session(items(1), 3, None).unwrap();
        store.submit_rating(&sid, &all(Choice::Seq1Better, "item-0", "r1")).unwrap();
        let again = store.submit_rating(&sid, &all(Choice::Seq2Better, "item-0", "r1"));
        assert!(matches!(again, Err(RaterError::AlreadySubmitted { .. })));
        let snap = store.snapshot(&sid).unwrap();
        assert_eq!(snap.ratings.len(), 1);
        assert_eq!(snap.ratings[0].choices[&Aspect::PlanAccuracy], Choice::Seq1Better);
    }

    #[test]
    fn deshuffle_law() {
        assert_eq!(deshuffle(Choice::Seq1Better, false), Outcome::Win);
        // the rater picked the left-hand sequence, which was the alternative
        assert_eq!(deshuffle(Choice::Seq1Better, true), Outcome::Lose);
        assert_eq!(deshuffle(Choice::Seq2Better, true), Outcome::Win);
        assert_eq!(deshuffle(Choice::Tie, true), Outcome::Tie);
    }

    #[test]
    fn aggregate_thirds_and_majority() {
        let mut it: Vec<ComparisonItem> = items(1)
            .into_iter()
            .map(|s| ComparisonItem { id: s.id, goal: s.left.goal.clone(), left: s.left, right: s.right, shuffle_bit: false })
            .collect();
        let mk = |c: Choice, rater: &str| all(c, "item-0", rater).validate().unwrap();
        let ratings = vec![mk(Choice::Seq1Better, "a"), mk(Choice::Tie, "b"), mk(Choice::Seq2Better, "c")];
        let t = aggregate(&it, &ratings, AggregateMode::Pooled);
        let cell = t.pairs["tip_procedure vs baseline_no_bridge"][&Aspect::PlanAccuracy];
        for v in [cell.win, cell.tie, cell.lose] {
            assert!((v - 100.0 / 3.0).abs() < 0.01);
        }
        let m = aggregate(&it, &ratings, AggregateMode::Majority);
        assert_eq!(m.pairs["tip_procedure vs baseline_no_bridge"][&Aspect::PlanAccuracy].tie, 100.0);

        it[0].shuffle_bit = true;
        let all_left = vec![mk(Choice::Seq1Better, "a"), mk(Choice::Seq1Better, "b"), mk(Choice::Seq1Better, "c")];
        let t = aggregate(&it, &all_left, AggregateMode::Pooled);
        assert_eq!(t.pairs["tip_procedure vs baseline_no_bridge"][&Aspect::TemporalCoherence].lose, 100.0);
    }

    #[test]
    fn restart_replays_log_and_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let sid;
        {
            let store = RaterStore::open(dir.path()).unwrap();
            sid = store.create_session(items(60), 3, Some(4)).unwrap();
            for i in 0..150 {
                let rater = format!("r{}", i % 7);
                if let Some(item) = store.next_assignment(&sid, &rater).unwrap() {
                    store.submit_rating(&sid, &all(Choice::Tie, &item.id, &rater)).unwrap();
                }
            }
        }
        assert!(dir.path().join("sessions").join(&sid).join("snapshot.json").exists());
        let before = 150;
        let store = RaterStore::open(dir.path()).unwrap();
        let snap = store.snapshot(&sid).unwrap();
        assert_eq!(snap.ratings.len(), before);
        // the rebuilt index still blocks duplicates
        let first = snap.ratings[0].clone();
        assert!(matches!(
            store.submit_rating(&sid, &all(Choice::Tie, &first.item_id, &first.rater)),
            Err(RaterError::AlreadySubmitted { .. })
        ));
    }

    #[test]
    fn torn_tail_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let sid = {
            let store = RaterStore::open(dir.path()).unwrap();
            let sid = store.create_session(items(2), 1, None).unwrap();
            store.submit_rating(&sid, &all(Choice::Tie, "item-0", "r")).unwrap();
            sid
        };
        let log = dir.path().join("sessions").join(&sid).join("log.jsonl");
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(b"{\"type\":\"rating\",\"rat").unwrap();
        let store = RaterStore::open(dir.path()).unwrap();
        assert_eq!(store.snapshot(&sid).unwrap().ratings.len(), 1);
    }

    #[test]
    fn assignment_view_hides_labels() {
        let it = ComparisonItem {
            id: "x".into(),
            goal: sample_plan(Method::TipProcedure).goal,
            left: sample_plan(Method::TipProcedure),
            right: sample_plan(Method::BaselineNoBridge),
            shuffle_bit: true,
        };
        let v = AssignmentView::new(&it, "/assets");
        let json = serde_json::to_string(&v).unwrap();
        for m in Method::ALL {
            assert!(!json.contains(m.as_str()));
        }
        assert!(!json.contains("shuffle"));
        assert_eq!(v.aspects.len(), 4);
        assert!(v.sequence_1[0].image_url.as_deref().unwrap().starts_with("/assets/"));
    }
}
