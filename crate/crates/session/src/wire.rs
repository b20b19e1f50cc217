//! EFS/1: the line-oriented UTF-8 session format.
//!
//! ```text
//! EFS1 <session_id> <t0_epoch_ms> [<from_ms> <to_ms>]
//! P|<patient_id>|<display_name>|<age>|<notes>
//! F|<dt_ms>|<p0>,<p1>,<p2>,<p3>,<p4>,<p5>,<p6>
//! A|<dt_ms>|<text>
//! C|<crc32>
//! ```
//!
//! Text fields escape `\` as `\\`, `|` as `\|`, line feed as `\n` and
//! carriage return as `\r`. F and A lines are merged by `dt_ms`, frames
//! first on equal times. The final `C` line holds the CRC-32 (IEEE) of every
//! preceding byte as eight lowercase hex digits.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &str = "EFS1";
pub const EMOTION_COUNT: usize = 7;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct WireError {
    pub line: usize,
    pub message: String,
}

fn err(line: usize, message: impl Into<String>) -> WireError {
    WireError {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientCard {
    pub patient_id: String,
    pub display_name: String,
    pub age: u32,
    #[serde(default)]
    pub notes: String,
}

/// Percent probabilities per emotion in the fixed emotion order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionFrame {
    pub dt_ms: u64,
    pub probs: [u8; EMOTION_COUNT],
}

impl EmotionFrame {
    pub fn new(dt_ms: u64, probs: [u8; EMOTION_COUNT]) -> Result<Self, String> {
        let f = EmotionFrame { dt_ms, probs };
        f.check()?;
        Ok(f)
    }

    pub fn check(&self) -> Result<(), String> {
        if let Some(p) = self.probs.iter().find(|&&p| p > 100) {
            return Err(format!("probability {p} exceeds 100"));
        }
        let sum: u32 = self.probs.iter().map(|&p| p as u32).sum();
        if sum != 100 {
            return Err(format!("probabilities sum to {sum}, expected 100"));
        }
        Ok(())
    }

    /// `F|dt|p0,..,p6` without the line feed.
    pub fn to_line(&self) -> String {
        let mut s = format!("F|{}|", self.dt_ms);
        for (i, p) in self.probs.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{p}");
        }
        s
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        let rest = line.strip_prefix("F|").ok_or("expected an F line")?;
        let (dt, probs) = rest.split_once('|').ok_or("expected F|<dt_ms>|<probs>")?;
        let dt_ms = parse_u64(dt).ok_or_else(|| format!("bad dt_ms `{dt}`"))?;
        let parts: Vec<&str> = probs.split(',').collect();
        if parts.len() != EMOTION_COUNT {
            return Err(format!("expected {EMOTION_COUNT} probabilities, got {}", parts.len()));
        }
        let mut out = [0u8; EMOTION_COUNT];
        for (o, p) in out.iter_mut().zip(&parts) {
            *o = parse_u64(p)
                .filter(|&v| v <= 100)
                .ok_or_else(|| format!("bad probability `{p}`"))? as u8;
        }
        EmotionFrame::new(dt_ms, out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityNote {
    pub dt_ms: u64,
    pub text: String,
}

impl ActivityNote {
    pub fn new(dt_ms: u64, text: impl Into<String>) -> Result<Self, String> {
        let text = text.into();
        if text.is_empty() {
            return Err("activity text must not be empty".into());
        }
        Ok(ActivityNote { dt_ms, text })
    }

    pub fn to_line(&self) -> String {
        format!("A|{}|{}", self.dt_ms, escape(&self.text))
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        let rest = line.strip_prefix("A|").ok_or("expected an A line")?;
        let (dt, text) = rest.split_once('|').ok_or("expected A|<dt_ms>|<text>")?;
        let dt_ms = parse_u64(dt).ok_or_else(|| format!("bad dt_ms `{dt}`"))?;
        let fields = split_escaped(text)?;
        if fields.len() != 1 {
            return Err("unescaped `|` in activity text".into());
        }
        ActivityNote::new(dt_ms, fields.into_iter().next().expect("one field"))
    }
}

/// A session, or the part of it inside an export window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionSlice {
    pub session_id: String,
    pub t0: u64,
    /// Inclusive `dt_ms` bounds of an export.
    pub range: Option<(u64, u64)>,
    pub frames: Vec<EmotionFrame>,
    pub activities: Vec<ActivityNote>,
}

impl SessionSlice {
    /// Frames and activities with `from <= dt_ms <= to`, bounds recorded.
    pub fn filtered(&self, from: u64, to: u64) -> SessionSlice {
        SessionSlice {
            session_id: self.session_id.clone(),
            t0: self.t0,
            range: Some((from, to)),
            frames: self.frames.iter().filter(|f| (from..=to).contains(&f.dt_ms)).copied().collect(),
            activities: self
                .activities
                .iter()
                .filter(|a| (from..=to).contains(&a.dt_ms))
                .cloned()
                .collect(),
        }
    }
}

fn parse_u64(s: &str) -> Option<u64> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0')) {
        return None;
    }
    s.parse().ok()
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '|' => out.push_str("\\|"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

/// Splits on unescaped `|` and unescapes each field.
fn split_escaped(s: &str) -> Result<Vec<String>, String> {
    let mut fields = vec![String::new()];
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => {
                let cur = fields.last_mut().expect("non-empty");
                match chars.next() {
                    Some('\\') => cur.push('\\'),
                    Some('|') => cur.push('|'),
                    Some('n') => cur.push('\n'),
                    Some('r') => cur.push('\r'),
                    Some(o) => return Err(format!("unknown escape `\\{o}`")),
                    None => return Err("dangling `\\`".into()),
                }
            }
            '|' => fields.push(String::new()),
            c => fields.last_mut().expect("non-empty").push(c),
        }
    }
    Ok(fields)
}

pub fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.bytes().all(|b| b.is_ascii_graphic())
}

pub fn card_line(card: &PatientCard) -> String {
    format!(
        "P|{}|{}|{}|{}",
        escape(&card.patient_id),
        escape(&card.display_name),
        card.age,
        escape(&card.notes)
    )
}

pub fn parse_card_line(line: &str) -> Result<PatientCard, String> {
    let rest = line.strip_prefix("P|").ok_or("expected a P line")?;
    let f = split_escaped(rest)?;
    if f.len() != 4 {
        return Err(format!("expected 4 patient fields, got {}", f.len()));
    }
    let age = parse_u64(&f[2])
        .and_then(|a| u32::try_from(a).ok())
        .ok_or_else(|| format!("bad age `{}`", f[2]))?;
    let mut it = f.into_iter();
    let patient_id = it.next().expect("4 fields");
    if patient_id.is_empty() {
        return Err("empty patient id".into());
    }
    let display_name = it.next().expect("4 fields");
    Ok(PatientCard {
        patient_id,
        display_name,
        age,
        notes: it.nth(1).expect("4 fields"),
    })
}

pub fn header_line(slice: &SessionSlice) -> String {
    match slice.range {
        Some((a, b)) => format!("{MAGIC} {} {} {a} {b}", slice.session_id, slice.t0),
        None => format!("{MAGIC} {} {}", slice.session_id, slice.t0),
    }
}

/// Frame and activity lines merged by time, frames first on ties.
pub fn body_lines(slice: &SessionSlice) -> Vec<String> {
    let (mut i, mut j) = (0, 0);
    let (f, a) = (&slice.frames, &slice.activities);
    let mut out = Vec::with_capacity(f.len() + a.len());
    while i < f.len() || j < a.len() {
        if j >= a.len() || (i < f.len() && f[i].dt_ms <= a[j].dt_ms) {
            out.push(f[i].to_line());
            i += 1;
        } else {
            out.push(a[j].to_line());
            j += 1;
        }
    }
    out
}

fn check_slice(card: &PatientCard, slice: &SessionSlice) -> Result<(), String> {
    if !valid_id(&slice.session_id) {
        return Err(format!("invalid session id `{}`", slice.session_id));
    }
    if card.patient_id.is_empty() {
        return Err("empty patient id".into());
    }
    if let Some((a, b)) = slice.range {
        if a > b {
            return Err(format!("range start {a} is after its end {b}"));
        }
        let times = slice.frames.iter().map(|f| f.dt_ms).chain(slice.activities.iter().map(|x| x.dt_ms));
        if let Some(t) = times.into_iter().find(|t| !(a..=b).contains(t)) {
            return Err(format!("entry at {t} ms lies outside the range {a}..={b}"));
        }
    }
    for (i, f) in slice.frames.iter().enumerate() {
        f.check().map_err(|e| format!("frame {i}: {e}"))?;
    }
    if let Some(i) = slice.frames.windows(2).position(|w| w[1].dt_ms < w[0].dt_ms) {
        return Err(format!("frame {} goes back in time", i + 1));
    }
    if let Some(i) = slice.activities.windows(2).position(|w| w[1].dt_ms < w[0].dt_ms) {
        return Err(format!("activity {} goes back in time", i + 1));
    }
    if slice.activities.iter().any(|a| a.text.is_empty()) {
        return Err("empty activity text".into());
    }
    Ok(())
}

pub fn encode_session(card: &PatientCard, slice: &SessionSlice) -> Result<String, String> {
    check_slice(card, slice)?;
    let mut out = header_line(slice);
    out.push('\n');
    out.push_str(&card_line(card));
    out.push('\n');
    for line in body_lines(slice) {
        out.push_str(&line);
        out.push('\n');
    }
    let crc = crc32fast::hash(out.as_bytes());
    let _ = writeln!(out, "C|{crc:08x}");
    Ok(out)
}

fn parse_header(line: &str) -> Result<(String, u64, Option<(u64, u64)>), String> {
    let parts: Vec<&str> = line.split(' ').collect();
    if parts.first() != Some(&MAGIC) {
        return Err(format!("expected `{MAGIC}` header"));
    }
    if parts.len() != 3 && parts.len() != 5 {
        return Err("header needs a session id, t0 and optionally a range".into());
    }
    if !valid_id(parts[1]) {
        return Err(format!("invalid session id `{}`", parts[1]));
    }
    let num = |s: &str| parse_u64(s).ok_or_else(|| format!("bad number `{s}`"));
    let t0 = num(parts[2])?;
    let range = if parts.len() == 5 {
        let (a, b) = (num(parts[3])?, num(parts[4])?);
        if a > b {
            return Err(format!("range start {a} is after its end {b}"));
        }
        Some((a, b))
    } else {
        None
    };
    Ok((parts[1].to_string(), t0, range))
}

pub fn decode_session(text: &str) -> Result<(PatientCard, SessionSlice), WireError> {
    let body = text.strip_suffix('\n').ok_or_else(|| err(1, "missing final line feed"))?;
    let lines: Vec<&str> = body.split('\n').collect();
    let n = lines.len();
    if n < 3 {
        return Err(err(n, "expected a header, a P line and a C line"));
    }
    let last = lines[n - 1];
    let crc_hex = last
        .strip_prefix("C|")
        .filter(|h| h.len() == 8 && h.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)))
        .ok_or_else(|| err(n, "expected the C|<crc32> checksum line"))?;
    let covered = &text[..text.len() - last.len() - 1];
    let actual = format!("{:08x}", crc32fast::hash(covered.as_bytes()));
    if actual != crc_hex {
        return Err(err(n, format!("checksum mismatch: line says {crc_hex}, content is {actual}")));
    }
    let (session_id, t0, range) = parse_header(lines[0]).map_err(|m| err(1, m))?;
    let card = parse_card_line(lines[1]).map_err(|m| err(2, m))?;
    let mut slice = SessionSlice {
        session_id,
        t0,
        range,
        frames: Vec::new(),
        activities: Vec::new(),
    };
    for (i, line) in lines[2..n - 1].iter().enumerate() {
        let no = i + 3;
        match line.as_bytes().first() {
            Some(b'F') => {
                let f = EmotionFrame::parse_line(line).map_err(|m| err(no, m))?;
                if slice.frames.last().is_some_and(|p| f.dt_ms < p.dt_ms) {
                    return Err(err(no, "frame goes back in time"));
                }
                slice.frames.push(f);
            }
            Some(b'A') => {
                let a = ActivityNote::parse_line(line).map_err(|m| err(no, m))?;
                if slice.activities.last().is_some_and(|p| a.dt_ms < p.dt_ms) {
                    return Err(err(no, "activity goes back in time"));
                }
                slice.activities.push(a);
            }
            _ => return Err(err(no, format!("unexpected line `{}`", truncate(line)))),
        }
    }
    if let Some((a, b)) = slice.range {
        let outside = slice.frames.iter().map(|f| f.dt_ms).chain(slice.activities.iter().map(|x| x.dt_ms));
        if let Some(dt) = outside.into_iter().find(|dt| !(a..=b).contains(dt)) {
            return Err(err(1, format!("entry at {dt} ms lies outside the range {a}..={b}")));
        }
    }
    Ok((card, slice))
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(24) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Parses a request body of F lines (blank lines ignored). Errors name
/// the zero-based frame index.
pub fn parse_frame_lines(body: &str) -> Result<Vec<EmotionFrame>, (usize, String)> {
    body.lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| EmotionFrame::parse_line(l).map_err(|m| (i, m)))
        .collect()
}

/// A representative session: a card, 60 frames at 1 Hz with realistic
/// probabilities and three activities.
pub fn canonical_session() -> (PatientCard, SessionSlice) {
    let card = PatientCard {
        patient_id: "P-000123".into(),
        display_name: "Maria Fernanda Lopez".into(),
        age: 34,
        notes: "Quarantine-related anxiety | weekly follow-up\nSleep issues reported".into(),
    };
    let frames = (0..60u64)
        .map(|i| {
            // Happiness and neutral trade 12 points back and forth; the
            // other five emotions hold 6% each.
            let k = (i % 12) as u8;
            EmotionFrame::new(i * 1000, [6, 6, 6, 30 + k, 6, 6, 40 - k]).expect("sums to 100")
        })
        .collect();
    let activities = vec![
        ActivityNote::new(5_000, "Patient describes quarantine anxiety").expect("non-empty"),
        ActivityNote::new(31_000, "Breathing exercise started").expect("non-empty"),
        ActivityNote::new(58_000, "Homework assigned: sleep diary").expect("non-empty"),
    ];
    let slice = SessionSlice {
        session_id: "S-20201105-0001".into(),
        t0: 1_604_592_000_000,
        range: None,
        frames,
        activities,
    };
    (card, slice)
}
