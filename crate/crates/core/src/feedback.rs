//! Human labeling plumbing shared by the training run and the labeling service.
//!
//! A run in human-feedback mode appends selected pairs to `queries.log` in its
//! output directory. The service tails that file, hands pairs to labelers and
//! appends their answers to `answers.log`, which the run tails in turn. Both
//! logs are append-only, so either side can restart and rebuild its state by
//! replaying them.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::{Mu, SegmentId};

pub const QUERIES_FILE: &str = "queries.log";
pub const ANSWERS_FILE: &str = "answers.log";
/// How long a served pair stays reserved for its labeler.
pub const PAIR_EXPIRY_MS: u64 = 120_000;
/// Retry hint returned when no pair is available.
pub const RETRY_AFTER_MS: u64 = 2_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Left,
    Right,
    Tie,
    CantTell,
}

impl Choice {
    /// Preference distribution for a choice; `None` for "can't tell", which is never stored.
    pub fn mu(self) -> Option<Mu> {
        match self {
            Choice::Left => Some(Mu::FIRST),
            Choice::Right => Some(Mu::SECOND),
            Choice::Tie => Some(Mu::TIE),
            Choice::CantTell => None,
        }
    }
}

/// One selected pair as written to `queries.log`. Frames are kept in their
/// wire encoding so the service can forward them byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLine {
    pub pair_id: String,
    pub seg1: SegmentId,
    pub seg2: SegmentId,
    pub fps: f64,
    pub enqueued_ms: u64,
    pub left: Vec<String>,
    pub right: Vec<String>,
}

impl QueryLine {
    /// `{"pair_id":..,"fps":..,"left":[Frame..],"right":[Frame..]}` with frames inlined verbatim.
    pub fn to_client_json(&self) -> String {
        let frames = |fs: &[String]| fs.join(",");
        format!(
            "{{\"pair_id\":{},\"fps\":{},\"left\":[{}],\"right\":[{}]}}",
            serde_json::to_string(&self.pair_id).expect("string serialises"),
            serde_json::to_string(&self.fps).expect("number serialises"),
            frames(&self.left),
            frames(&self.right)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerLine {
    pub pair_id: String,
    pub choice: Choice,
    pub latency_ms: Option<u64>,
    pub unix_ms: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
}

const QUERIES_FORMAT: &str = "prefrl-queries/1";
const ANSWERS_FORMAT: &str = "prefrl-answers/1";

/// Appends JSON lines to a log, writing the format header on creation.
#[derive(Debug)]
pub struct LogWriter {
    file: File,
}

impl LogWriter {
    fn open(path: &Path, format: &str) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(file, "{}", serde_json::to_string(&Header { format: format.into() })?)?;
            file.flush()?;
        }
        Ok(Self { file })
    }

    pub fn queries(dir: &Path) -> Result<Self> {
        Self::open(&dir.join(QUERIES_FILE), QUERIES_FORMAT)
    }

    pub fn answers(dir: &Path) -> Result<Self> {
        Self::open(&dir.join(ANSWERS_FILE), ANSWERS_FORMAT)
    }

    pub fn append<T: Serialize>(&mut self, line: &T) -> Result<()> {
        let mut text = serde_json::to_string(line)?;
        text.push('\n');
        self.file.write_all(text.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}

/// Incremental reader over a growing JSON-lines log. Only complete lines are
/// consumed; a partially written last line is picked up on the next poll.
#[derive(Debug)]
pub struct LogTail {
    path: PathBuf,
    format: &'static str,
    offset: u64,
    header_checked: bool,
    partial: String,
}

impl LogTail {
    fn new(path: PathBuf, format: &'static str) -> Self {
        Self { path, format, offset: 0, header_checked: false, partial: String::new() }
    }

    pub fn queries(dir: &Path) -> Self {
        Self::new(dir.join(QUERIES_FILE), QUERIES_FORMAT)
    }

    pub fn answers(dir: &Path) -> Self {
        Self::new(dir.join(ANSWERS_FILE), ANSWERS_FORMAT)
    }

    /// New complete entries since the last poll. A missing file yields nothing.
    pub fn poll<T: for<'de> Deserialize<'de>>(&mut self) -> Result<Vec<T>> {
        let mut file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        file.seek(SeekFrom::Start(self.offset))?;
        let mut chunk = String::new();
        let read = file.read_to_string(&mut chunk)?;
        self.offset += read as u64;
        self.partial.push_str(&chunk);
        let mut out = Vec::new();
        while let Some(end) = self.partial.find('\n') {
            let line: String = self.partial.drain(..=end).collect();
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if !self.header_checked {
                let header: Header = serde_json::from_str(line)?;
                if header.format != self.format {
                    return Err(Error::integrity(format!(
                        "{} has format {:?}, expected {:?}",
                        self.path.display(),
                        header.format,
                        self.format
                    )));
                }
                self.header_checked = true;
                continue;
            }
            out.push(serde_json::from_str(line)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ack {
    Stored(Choice),
    /// "Can't tell": the pair is closed and nothing is stored.
    Discarded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    UnknownPair,
    AlreadyAnswered,
    /// Known but not currently handed out.
    NotServed,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedbackMetrics {
    pub labels_stored: usize,
    pub cant_tell: usize,
    /// Median over stored labels that reported a latency.
    pub median_latency_ms: Option<f64>,
    pub queue_depth: usize,
    pub in_flight: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSubmission {
    pub pair_id: String,
    pub choice: Choice,
    #[serde(default)]
    pub latency_ms: Option<u64>,
}

fn median(values: &[u64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] as f64 } else { (v[mid - 1] + v[mid]) as f64 / 2.0 })
}

/// Serving state for pending pairs. Unserved pairs go out oldest first; a
/// served pair is reserved until answered or until its expiry passes, after
/// which it is served again.
#[derive(Debug)]
pub struct FeedbackQueue {
    unserved: VecDeque<QueryLine>,
    in_flight: HashMap<String, (QueryLine, u64)>,
    answered: HashSet<String>,
    known: HashSet<String>,
    labels_stored: usize,
    cant_tell: usize,
    latencies: Vec<u64>,
    answers: Option<LogWriter>,
    query_tail: Option<LogTail>,
}

impl Default for FeedbackQueue {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl FeedbackQueue {
    pub fn in_memory() -> Self {
        Self {
            unserved: VecDeque::new(),
            in_flight: HashMap::new(),
            answered: HashSet::new(),
            known: HashSet::new(),
            labels_stored: 0,
            cant_tell: 0,
            latencies: Vec::new(),
            answers: None,
            query_tail: None,
        }
    }

    /// Attaches to a run directory, replaying existing answers and queries.
    pub fn open(dir: &Path) -> Result<Self> {
        let mut queue = Self::in_memory();
        let mut answers = LogTail::answers(dir);
        for a in answers.poll::<AnswerLine>()? {
            queue.apply_answer(&a);
            queue.known.insert(a.pair_id);
        }
        queue.answers = Some(LogWriter::answers(dir)?);
        queue.query_tail = Some(LogTail::queries(dir));
        queue.refresh()?;
        Ok(queue)
    }

    fn apply_answer(&mut self, a: &AnswerLine) {
        if !self.answered.insert(a.pair_id.clone()) {
            return;
        }
        match a.choice {
            Choice::CantTell => self.cant_tell += 1,
            _ => {
                self.labels_stored += 1;
                if let Some(l) = a.latency_ms {
                    self.latencies.push(l);
                }
            }
        }
    }

    /// Picks up pairs newly appended to the run's query log.
    pub fn refresh(&mut self) -> Result<usize> {
        let Some(tail) = self.query_tail.as_mut() else { return Ok(0) };
        let lines: Vec<QueryLine> = tail.poll()?;
        let mut added = 0;
        for q in lines {
            if self.answered.contains(&q.pair_id) {
                continue;
            }
            if self.enqueue(q) {
                added += 1;
            }
        }
        Ok(added)
    }

    /// Adds a pair; ignored if its id has been seen before.
    pub fn enqueue(&mut self, query: QueryLine) -> bool {
        if !self.known.insert(query.pair_id.clone()) {
            return false;
        }
        self.unserved.push_back(query);
        true
    }

    fn reclaim_expired(&mut self, now_ms: u64) {
        let expired: Vec<String> = self
            .in_flight
            .iter()
            .filter(|(_, (_, expiry))| *expiry <= now_ms)
            .map(|(id, _)| id.clone())
            .collect();
        for id in expired {
            let (q, _) = self.in_flight.remove(&id).expect("listed above");
            self.unserved.push_back(q);
        }
        self.unserved
            .make_contiguous()
            .sort_by(|a, b| a.enqueued_ms.cmp(&b.enqueued_ms).then_with(|| a.pair_id.cmp(&b.pair_id)));
    }

    /// Oldest available pair, now reserved until `now_ms + PAIR_EXPIRY_MS`.
    pub fn serve_pair(&mut self, now_ms: u64) -> Option<QueryLine> {
        self.reclaim_expired(now_ms);
        let q = self.unserved.pop_front()?;
        self.in_flight.insert(q.pair_id.clone(), (q.clone(), now_ms + PAIR_EXPIRY_MS));
        Some(q)
    }

    pub fn record_label(&mut self, submission: &LabelSubmission, now_ms: u64) -> Result<std::result::Result<Ack, Rejection>> {
        if self.answered.contains(&submission.pair_id) {
            return Ok(Err(Rejection::AlreadyAnswered));
        }
        if !self.known.contains(&submission.pair_id) {
            return Ok(Err(Rejection::UnknownPair));
        }
        if self.in_flight.remove(&submission.pair_id).is_none() {
            return Ok(Err(Rejection::NotServed));
        }
        let line = AnswerLine {
            pair_id: submission.pair_id.clone(),
            choice: submission.choice,
            latency_ms: submission.latency_ms,
            unix_ms: now_ms,
        };
        if let Some(w) = &mut self.answers {
            w.append(&line)?;
        }
        self.apply_answer(&line);
        Ok(Ok(match submission.choice {
            Choice::CantTell => Ack::Discarded,
            c => Ack::Stored(c),
        }))
    }

    pub fn metrics(&self) -> FeedbackMetrics {
        FeedbackMetrics {
            labels_stored: self.labels_stored,
            cant_tell: self.cant_tell,
            median_latency_ms: median(&self.latencies),
            queue_depth: self.unserved.len(),
            in_flight: self.in_flight.len(),
        }
    }
}

/// Guidance shown to labelers before their first pair.
pub fn instructions(env: &str) -> String {
    match env {
        "pendulum" => "You will see two short clips of a pendulum on a pivot, side by side. \
Pick the clip in which the pendulum spends more time pointing approximately up and holds \
there steadily. Swinging wildly or spinning through the top is worse than balancing. \
If both clips look equally good, choose tie. If you cannot judge them, choose can't tell.\n\
Keys: left arrow = left clip, right arrow = right clip, up arrow = tie, down arrow = can't tell."
            .to_string(),
        "arcade" => "You will see two short clips of a catching game. A ball falls from the top \
and a paddle at the bottom moves left and right. Prefer the clip in which the paddle gets under \
the ball and catches it; letting a ball hit the floor is bad. Moving toward the ball before it \
lands is better than waiting in place. If both clips are equally good, choose tie. If you \
cannot judge them, choose can't tell.\n\
Keys: left arrow = left clip, right arrow = right clip, up arrow = tie, down arrow = can't tell."
            .to_string(),
        _ => "Compare the two clips and choose the one that better accomplishes the task. \
Keys: left arrow = left clip, right arrow = right clip, up arrow = tie, down arrow = can't tell."
            .to_string(),
    }
}
