//! Embedded persistence: append-only files replayed on open.
//!
//! Layout under the data directory:
//!
//! * `patients.log`: one `P|...` card line per patient.
//! * `sessions.idx`: `O|<session>|<patient>|<t0>` when a session opens and
//!   `X|<session>` when it closes.
//! * `sessions/<session>.log`: F and A lines in arrival order. Every write
//!   batch ends with a `K|<lines>` commit line and is fsynced before it is
//!   acknowledged. Replay ignores lines after the last commit, so a batch
//!   torn by a crash disappears as a whole.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use log::warn;
use thiserror::Error;
use tokio::sync::broadcast;

use crate::wire::{
    card_line, encode_session, parse_card_line, valid_id, ActivityNote, EmotionFrame,
    PatientCard, SessionSlice,
};

const LIVE_CAPACITY: usize = 1024;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("session {0} is closed")]
    Closed(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("entry {index} is out of order: {message}")]
    OutOfOrder { index: usize, message: String },
    #[error("invalid: {0}")]
    Invalid(String),
    #[error("{path}: line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("storage i/o: {0}")]
    Io(#[from] io::Error),
}

/// Acknowledgement of a durable write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ack {
    /// Entries of that kind now stored in the session.
    pub stored: usize,
    /// Sequence number of the last entry written.
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionSummary {
    pub session_id: String,
    pub patient_id: String,
    pub t0: u64,
    pub closed: bool,
    pub frames: usize,
    pub activities: usize,
}

/// One live-stream entry: its sequence number and EFS/1 line.
pub type LiveEvent = (u64, String);

struct SessionState {
    patient_id: String,
    t0: u64,
    closed: bool,
    frames: Vec<EmotionFrame>,
    activities: Vec<ActivityNote>,
    /// Lines in arrival order; the index is the sequence number.
    lines: Vec<String>,
    file: File,
    tx: broadcast::Sender<LiveEvent>,
}

impl SessionState {
    fn summary(&self, id: &str) -> SessionSummary {
        SessionSummary {
            session_id: id.to_string(),
            patient_id: self.patient_id.clone(),
            t0: self.t0,
            closed: self.closed,
            frames: self.frames.len(),
            activities: self.activities.len(),
        }
    }

    fn slice(&self, id: &str) -> SessionSlice {
        SessionSlice {
            session_id: id.to_string(),
            t0: self.t0,
            range: None,
            frames: self.frames.clone(),
            activities: self.activities.clone(),
        }
    }

    /// Appends `lines` plus a commit line and syncs the file.
    fn commit(&mut self, lines: &[String]) -> io::Result<()> {
        let mut buf = String::new();
        for l in lines {
            buf.push_str(l);
            buf.push('\n');
        }
        buf.push_str(&format!("K|{}\n", lines.len()));
        self.file.write_all(buf.as_bytes())?;
        self.file.sync_data()
    }

    fn publish(&mut self, lines: Vec<String>) -> u64 {
        for l in lines {
            let seq = self.lines.len() as u64;
            // No receivers is fine; the line stays in `lines` for replay.
            let _ = self.tx.send((seq, l.clone()));
            self.lines.push(l);
        }
        self.lines.len() as u64 - 1
    }
}

struct Meta {
    patients: File,
    index: File,
    next_session: u64,
}

pub struct Store {
    dir: PathBuf,
    patients: RwLock<BTreeMap<String, PatientCard>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionState>>>>,
    meta: Mutex<Meta>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn append_synced(file: &mut File, line: &str) -> io::Result<()> {
    file.write_all(format!("{line}\n").as_bytes())?;
    file.sync_data()
}

fn open_append(path: &Path) -> io::Result<File> {
    OpenOptions::new().create(true).append(true).open(path)
}

/// Complete lines of `path` and the byte length they cover; a trailing
/// partial line is dropped.
fn read_lines(path: &Path) -> io::Result<(Vec<String>, u64)> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(e),
    };
    let end = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if end < bytes.len() {
        warn!("{}: ignoring {} bytes of a partial line", path.display(), bytes.len() - end);
    }
    let text = String::from_utf8_lossy(&bytes[..end]);
    Ok((text.lines().map(String::from).collect(), end as u64))
}

fn truncate_to(path: &Path, len: u64) -> io::Result<()> {
    if fs::metadata(path).map(|m| m.len()).unwrap_or(0) > len {
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(len)?;
        f.sync_all()?;
    }
    Ok(())
}

impl Store {
    /// Opens or creates a store under `dir`, replaying every log.
    pub fn open(dir: &Path) -> Result<Store, StoreError> {
        fs::create_dir_all(dir.join("sessions"))?;
        let corrupt = |path: &Path, line: usize, message: String| StoreError::Corrupt {
            path: path.to_path_buf(),
            line,
            message,
        };

        let ppath = dir.join("patients.log");
        let (lines, valid) = read_lines(&ppath)?;
        truncate_to(&ppath, valid)?;
        let mut patients = BTreeMap::new();
        for (i, l) in lines.iter().enumerate() {
            let card = parse_card_line(l).map_err(|m| corrupt(&ppath, i + 1, m))?;
            patients.insert(card.patient_id.clone(), card);
        }

        let ipath = dir.join("sessions.idx");
        let (lines, valid) = read_lines(&ipath)?;
        truncate_to(&ipath, valid)?;
        let mut order: Vec<(String, String, u64)> = Vec::new();
        let mut closed = Vec::new();
        for (i, l) in lines.iter().enumerate() {
            let f: Vec<&str> = l.split('|').collect();
            match f.as_slice() {
                ["O", id, patient, t0] => {
                    let t0 = t0.parse().map_err(|_| corrupt(&ipath, i + 1, format!("bad t0 `{t0}`")))?;
                    order.push((id.to_string(), patient.to_string(), t0));
                }
                ["X", id] => closed.push(id.to_string()),
                _ => return Err(corrupt(&ipath, i + 1, format!("unexpected line `{l}`"))),
            }
        }

        let mut sessions = HashMap::new();
        for (id, patient_id, t0) in &order {
            let spath = dir.join("sessions").join(format!("{id}.log"));
            let (lines, _) = read_lines(&spath)?;
            let (mut frames, mut activities, mut committed) = (Vec::new(), Vec::new(), Vec::new());
            let (mut pending, mut pending_lines) = (Vec::new(), 0usize);
            let mut offset = 0u64;
            let mut committed_len = 0u64;
            let last_commit = lines.iter().rposition(|l| l.starts_with("K|"));
            for (i, l) in lines.iter().enumerate() {
                offset += l.len() as u64 + 1;
                if let Some(n) = l.strip_prefix("K|") {
                    if n.parse::<usize>().ok() != Some(pending_lines) {
                        return Err(corrupt(&spath, i + 1, format!("commit count `{n}` does not match")));
                    }
                    for (line, entry) in pending.drain(..) {
                        match entry {
                            Ok(f) => frames.push(f),
                            Err(a) => activities.push(a),
                        }
                        committed.push(line);
                    }
                    pending_lines = 0;
                    committed_len = offset;
                    continue;
                }
                let entry = if l.starts_with("F|") {
                    EmotionFrame::parse_line(l).map(Ok)
                } else {
                    ActivityNote::parse_line(l).map(Err)
                };
                let entry = match entry {
                    Ok(e) => e,
                    // Garbage after the last commit is a torn write.
                    Err(_) if last_commit.is_none_or(|c| i > c) => break,
                    Err(m) => return Err(corrupt(&spath, i + 1, m)),
                };
                pending.push((l.clone(), entry));
                pending_lines += 1;
            }
            if pending_lines > 0 || offset > committed_len {
                warn!("{}: dropping the uncommitted tail", spath.display());
            }
            truncate_to(&spath, committed_len)?;
            let (tx, _) = broadcast::channel(LIVE_CAPACITY);
            let state = SessionState {
                patient_id: patient_id.clone(),
                t0: *t0,
                closed: closed.contains(id),
                frames,
                activities,
                lines: committed,
                file: open_append(&spath)?,
                tx,
            };
            sessions.insert(id.clone(), Arc::new(Mutex::new(state)));
        }

        Ok(Store {
            dir: dir.to_path_buf(),
            patients: RwLock::new(patients),
            meta: Mutex::new(Meta {
                patients: open_append(&ppath)?,
                index: open_append(&ipath)?,
                next_session: order.len() as u64 + 1,
            }),
            sessions: RwLock::new(sessions),
        })
    }

    pub fn add_patient(&self, card: PatientCard) -> Result<(), StoreError> {
        if !valid_id(&card.patient_id) || card.patient_id.contains('|') {
            return Err(StoreError::Invalid(format!(
                "patient id `{}` must be 1 to 128 printable ASCII characters without `|`",
                card.patient_id
            )));
        }
        let mut meta = lock(&self.meta);
        let mut patients = self.patients.write().unwrap_or_else(|p| p.into_inner());
        if patients.contains_key(&card.patient_id) {
            return Err(StoreError::Conflict(format!("patient {} already exists", card.patient_id)));
        }
        append_synced(&mut meta.patients, &card_line(&card))?;
        patients.insert(card.patient_id.clone(), card);
        Ok(())
    }

    pub fn patients(&self) -> Vec<PatientCard> {
        self.patients.read().unwrap_or_else(|p| p.into_inner()).values().cloned().collect()
    }

    pub fn patient(&self, id: &str) -> Option<PatientCard> {
        self.patients.read().unwrap_or_else(|p| p.into_inner()).get(id).cloned()
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<SessionState>>, StoreError> {
        self.sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(format!("session {id}")))
    }

    pub fn sessions_of(&self, patient_id: &str) -> Vec<SessionSummary> {
        let sessions = self.sessions.read().unwrap_or_else(|p| p.into_inner());
        let mut out: Vec<SessionSummary> = sessions
            .iter()
            .map(|(id, s)| lock(s).summary(id))
            .filter(|s| s.patient_id == patient_id)
            .collect();
        out.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        out
    }

    pub fn summary(&self, id: &str) -> Result<SessionSummary, StoreError> {
        let session = self.session(id)?;
        let summary = lock(&session).summary(id);
        Ok(summary)
    }

    /// Opens a new session for an existing patient and returns its id.
    pub fn open_session(&self, patient_id: &str, t0: u64) -> Result<String, StoreError> {
        if self.patient(patient_id).is_none() {
            return Err(StoreError::NotFound(format!("patient {patient_id}")));
        }
        let mut meta = lock(&self.meta);
        let id = format!("s{:06}", meta.next_session);
        let path = self.dir.join("sessions").join(format!("{id}.log"));
        let file = OpenOptions::new().create_new(true).append(true).open(&path)?;
        file.sync_all()?;
        File::open(self.dir.join("sessions"))?.sync_all()?;
        append_synced(&mut meta.index, &format!("O|{id}|{patient_id}|{t0}"))?;
        meta.next_session += 1;
        let (tx, _) = broadcast::channel(LIVE_CAPACITY);
        let state = SessionState {
            patient_id: patient_id.to_string(),
            t0,
            closed: false,
            frames: Vec::new(),
            activities: Vec::new(),
            lines: Vec::new(),
            file,
            tx,
        };
        self.sessions
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(id.clone(), Arc::new(Mutex::new(state)));
        Ok(id)
    }

    /// Appends a time-ordered batch. The first frame may not precede the
    /// last stored one; equal times are kept in arrival order.
    pub fn ingest_frames(&self, id: &str, batch: &[EmotionFrame]) -> Result<Ack, StoreError> {
        let session = self.session(id)?;
        let mut s = lock(&session);
        if s.closed {
            return Err(StoreError::Closed(id.to_string()));
        }
        for (i, f) in batch.iter().enumerate() {
            f.check().map_err(|m| StoreError::Invalid(format!("frame {i}: {m}")))?;
            let prev = if i == 0 { s.frames.last().map(|p| p.dt_ms) } else { Some(batch[i - 1].dt_ms) };
            if let Some(p) = prev.filter(|&p| f.dt_ms < p) {
                return Err(StoreError::OutOfOrder {
                    index: i,
                    message: format!("dt_ms {} precedes {p}", f.dt_ms),
                });
            }
        }
        if batch.is_empty() {
            return Ok(Ack {
                stored: s.frames.len(),
                seq: s.lines.len().saturating_sub(1) as u64,
            });
        }
        let lines: Vec<String> = batch.iter().map(EmotionFrame::to_line).collect();
        s.commit(&lines)?;
        s.frames.extend_from_slice(batch);
        let seq = s.publish(lines);
        Ok(Ack {
            stored: s.frames.len(),
            seq,
        })
    }

    pub fn register_activity(&self, id: &str, note: ActivityNote) -> Result<Ack, StoreError> {
        if note.text.is_empty() {
            return Err(StoreError::Invalid("activity text must not be empty".into()));
        }
        let session = self.session(id)?;
        let mut s = lock(&session);
        if s.closed {
            return Err(StoreError::Closed(id.to_string()));
        }
        if let Some(p) = s.activities.last().map(|a| a.dt_ms).filter(|&p| note.dt_ms < p) {
            return Err(StoreError::OutOfOrder {
                index: 0,
                message: format!("dt_ms {} precedes {p}", note.dt_ms),
            });
        }
        let line = note.to_line();
        s.commit(std::slice::from_ref(&line))?;
        s.activities.push(note);
        let seq = s.publish(vec![line]);
        Ok(Ack {
            stored: s.activities.len(),
            seq,
        })
    }

    pub fn close_session(&self, id: &str) -> Result<(), StoreError> {
        let session = self.session(id)?;
        let mut s = lock(&session);
        if s.closed {
            return Ok(());
        }
        append_synced(&mut lock(&self.meta).index, &format!("X|{id}"))?;
        s.closed = true;
        Ok(())
    }

    /// The patient card and full record of a session.
    pub fn record(&self, id: &str) -> Result<(PatientCard, SessionSlice), StoreError> {
        let session = self.session(id)?;
        let (patient_id, slice) = {
            let s = lock(&session);
            (s.patient_id.clone(), s.slice(id))
        };
        let card = self
            .patient(&patient_id)
            .ok_or_else(|| StoreError::NotFound(format!("patient {patient_id}")))?;
        Ok((card, slice))
    }

    /// EFS/1 text of the whole session, or of the entries with
    /// `from <= dt_ms <= to` when a range is given.
    pub fn export(&self, id: &str, range: Option<(u64, u64)>) -> Result<String, StoreError> {
        let (card, slice) = self.record(id)?;
        let slice = match range {
            Some((a, b)) if a > b => {
                return Err(StoreError::Invalid(format!("range start {a} is after its end {b}")))
            }
            Some((a, b)) => slice.filtered(a, b),
            None => slice,
        };
        encode_session(&card, &slice).map_err(StoreError::Invalid)
    }

    /// Stored lines with a sequence number above `after` (all when `None`)
    /// and a receiver for everything written later, with no gap between.
    pub fn subscribe(
        &self,
        id: &str,
        after: Option<u64>,
    ) -> Result<(Vec<LiveEvent>, broadcast::Receiver<LiveEvent>, bool), StoreError> {
        let session = self.session(id)?;
        let s = lock(&session);
        let start = after.map_or(0, |a| a as usize + 1);
        let backlog = s
            .lines
            .iter()
            .enumerate()
            .skip(start)
            .map(|(i, l)| (i as u64, l.clone()))
            .collect();
        Ok((backlog, s.tx.subscribe(), s.closed))
    }
}

