//! Label storage: the bounded buffer the fitter loops over, the durable
//! append-only label log, and on-disk copies of labeled segments.

use std::collections::{HashSet, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{Action, ActionSpace, Frame, Observation};
use crate::error::{Error, Result};
use crate::segment::{PreferenceRecord, RecordId, SegmentId, SegmentStore, TrajectorySegment};

pub const DEFAULT_BUFFER_CAPACITY: usize = 3000;
const DATABASE_FORMAT: &str = "prefrl-labels/1";
const SEGMENT_FORMAT: &str = "prefrl-segment/1";

/// The most recent labels, oldest evicted first.
#[derive(Debug, Clone)]
pub struct LabelBuffer {
    capacity: usize,
    records: VecDeque<PreferenceRecord>,
    /// Fractional position of the fitter's continuous loop, in labels.
    cursor: f64,
}

impl LabelBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "label buffer needs room for one label");
        Self { capacity, records: VecDeque::with_capacity(capacity.min(4096)), cursor: 0.0 }
    }

    pub fn push(&mut self, record: PreferenceRecord) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn contents(&mut self) -> &[PreferenceRecord] {
        self.records.make_contiguous()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PreferenceRecord> {
        self.records.iter()
    }

    /// Advances the loop by `labels` and returns how many full passes over
    /// the current contents that completes.
    pub fn advance(&mut self, labels: f64) -> usize {
        if self.records.is_empty() {
            return 0;
        }
        self.cursor += labels;
        let len = self.records.len() as f64;
        let passes = (self.cursor / len).floor();
        self.cursor -= passes * len;
        passes as usize
    }

    pub fn referenced_segments(&self) -> HashSet<SegmentId> {
        self.records.iter().flat_map(|r| [r.seg1_id, r.seg2_id]).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct LogHeader {
    format: String,
}

/// Append-only label log: a header line, then one JSON record per line.
#[derive(Debug)]
pub struct PreferenceDatabase {
    path: Option<PathBuf>,
    file: Option<File>,
    ids: HashSet<RecordId>,
    count: usize,
}

impl PreferenceDatabase {
    pub fn in_memory() -> Self {
        Self { path: None, file: None, ids: HashSet::new(), count: 0 }
    }

    /// Opens or creates a log, replaying any existing records.
    pub fn open(path: &Path) -> Result<Self> {
        let existing = if path.exists() { read_label_log(path)? } else { Vec::new() };
        let fresh = !path.exists();
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(file, "{}", serde_json::to_string(&LogHeader { format: DATABASE_FORMAT.into() })?)?;
            file.flush()?;
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            file: Some(file),
            ids: existing.iter().map(|r| r.record_id).collect(),
            count: existing.len(),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn contains(&self, id: RecordId) -> bool {
        self.ids.contains(&id)
    }

    pub fn append(&mut self, record: &PreferenceRecord) -> Result<()> {
        record.validate()?;
        if self.ids.contains(&record.record_id) {
            return Err(Error::integrity(format!("duplicate label record {:?}", record.record_id)));
        }
        if let Some(file) = &mut self.file {
            writeln!(file, "{}", serde_json::to_string(record)?)?;
            file.flush()?;
        }
        self.ids.insert(record.record_id);
        self.count += 1;
        Ok(())
    }
}

/// Reads every record from a label log, checking the header and uniqueness.
pub fn read_label_log(path: &Path) -> Result<Vec<PreferenceRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header: LogHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return Ok(Vec::new()),
    };
    if header.format != DATABASE_FORMAT {
        return Err(Error::integrity(format!("unexpected label log format {:?}", header.format)));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PreferenceRecord = serde_json::from_str(&line)?;
        record.validate()?;
        if !seen.insert(record.record_id) {
            return Err(Error::integrity(format!("duplicate label record {:?} in log", record.record_id)));
        }
        out.push(record);
    }
    Ok(out)
}

/// Stores a record durably and in the fitting buffer. Both of its segments
/// must already be in `segments`.
pub fn ingest_label(
    database: &mut PreferenceDatabase,
    buffer: &mut LabelBuffer,
    segments: &SegmentStore,
    record: PreferenceRecord,
) -> Result<()> {
    record.validate()?;
    segments.get(record.seg1_id)?;
    segments.get(record.seg2_id)?;
    database.append(&record)?;
    buffer.push(record);
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SegmentFile {
    format: String,
    id: SegmentId,
    policy_version: u64,
    env_step: u64,
    observations: Vec<Observation>,
    actions: Vec<Action>,
    true_rewards: Option<Vec<f64>>,
    /// Frames in their wire encoding.
    frames: Vec<String>,
}

/// Directory of labeled segments, one JSON file each.
#[derive(Debug, Clone)]
pub struct SegmentArchive {
    dir: PathBuf,
}

impl SegmentArchive {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn path_for(&self, id: SegmentId) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    /// Writes the segment unless it is already archived.
    pub fn save(&self, segment: &TrajectorySegment) -> Result<()> {
        let path = self.path_for(segment.id);
        if path.exists() {
            return Ok(());
        }
        let file = SegmentFile {
            format: SEGMENT_FORMAT.into(),
            id: segment.id,
            policy_version: segment.policy_version,
            env_step: segment.env_step,
            observations: segment.observations.clone(),
            actions: segment.actions.clone(),
            true_rewards: segment.true_rewards.clone(),
            frames: segment.frames.iter().map(Frame::to_wire).collect(),
        };
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_string(&file)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(&self, id: SegmentId, space: &ActionSpace) -> Result<Arc<TrajectorySegment>> {
        let text = fs::read_to_string(self.path_for(id))
            .map_err(|e| Error::integrity(format!("segment {id} missing from archive: {e}")))?;
        let file: SegmentFile = serde_json::from_str(&text)?;
        if file.format != SEGMENT_FORMAT || file.id != id {
            return Err(Error::integrity(format!("segment file for {id} is malformed")));
        }
        let frames = file.frames.iter().map(|w| Frame::from_wire(w)).collect::<Result<Vec<_>>>()?;
        Ok(Arc::new(TrajectorySegment::new(
            id,
            file.observations,
            file.actions,
            file.true_rewards,
            file.policy_version,
            file.env_step,
            frames,
            space,
        )?))
    }
}
