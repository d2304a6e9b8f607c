//! Streaming-log ingestion: parsing, vocabulary, preprocessing, instance
//! expansion and day-based splits.
//!
//! Input log format (UTF-8 TSV, header required, column order free):
//!
//! ```text
//! session_id  position  track_uri  skipped  shuffle  day  premium
//! ```
//!
//! `skipped`, `shuffle` and `premium` are `0`/`1`; `premium` is optional.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::ops::RangeInclusive;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Dense track index in `[0, |V|)`.
pub type TrackId = u32;

/// Longest session kept after preprocessing.
pub const MAX_LEN: usize = 20;

/// Minimum number of training occurrences for a track to enter the vocabulary.
pub const MIN_COUNT: u64 = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlayEvent {
    pub track_uri: String,
    /// 1-based position within the session.
    pub position: u32,
    pub skipped: bool,
    pub shuffle: bool,
    pub day: i64,
}

/// Events of one session ordered by position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawSession {
    pub id: String,
    pub events: Vec<PlayEvent>,
}

impl RawSession {
    pub fn first_day(&self) -> Option<i64> {
        self.events.first().map(|e| e.day)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    uri_to_index: HashMap<String, TrackId>,
    index_to_uri: Vec<String>,
    counts: Vec<u64>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.index_to_uri.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_to_uri.is_empty()
    }

    pub fn index_of(&self, uri: &str) -> Option<TrackId> {
        self.uri_to_index.get(uri).copied()
    }

    pub fn uri(&self, id: TrackId) -> Option<&str> {
        self.index_to_uri.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: TrackId) -> Option<u64> {
        self.counts.get(id as usize).copied()
    }

    fn push(&mut self, uri: String, count: u64) -> TrackId {
        let id = self.index_to_uri.len() as TrackId;
        self.uri_to_index.insert(uri.clone(), id);
        self.index_to_uri.push(uri);
        self.counts.push(count);
        id
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, (uri, c)) in self.index_to_uri.iter().zip(&self.counts).enumerate() {
            writeln!(w, "{i}\t{uri}\t{c}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut vocab = Vocabulary::default();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(parse_err(lineno, format!("expected 3 fields, found {}", f.len())));
            }
            let idx: usize = parse_field(f[0], "index", lineno)?;
            if idx != vocab.len() {
                return Err(parse_err(lineno, format!("index {idx} out of sequence (expected {})", vocab.len())));
            }
            if vocab.uri_to_index.contains_key(f[1]) {
                return Err(parse_err(lineno, format!("duplicate track uri {:?}", f[1])));
            }
            let count = parse_field(f[2], "count", lineno)?;
            vocab.push(f[1].to_string(), count);
        }
        Ok(vocab)
    }
}

/// A preprocessed session. `skipped[t]` records whether the user skipped
/// `tracks[t]`; shuffle sessions never retain skipped tracks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub id: String,
    pub tracks: Vec<TrackId>,
    pub shuffle: bool,
    pub skipped: Vec<bool>,
}

impl Session {
    pub fn new(id: impl Into<String>, tracks: Vec<TrackId>, shuffle: bool) -> Self {
        let skipped = vec![false; tracks.len()];
        Self { id: id.into(), tracks, shuffle, skipped }
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    /// Same id and flag, different track list (no skips).
    pub fn with_tracks(&self, tracks: Vec<TrackId>) -> Self {
        Self::new(self.id.clone(), tracks, self.shuffle)
    }
}

/// Prefix → next-track training or evaluation example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingInstance {
    pub prefix: Vec<TrackId>,
    pub label: TrackId,
    pub shuffle: bool,
}

/// Inclusive day ranges for the three splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_days: RangeInclusive<i64>,
    pub valid_days: RangeInclusive<i64>,
    pub test_days: RangeInclusive<i64>,
}

impl SplitSpec {
    pub fn new(train: RangeInclusive<i64>, valid: RangeInclusive<i64>, test: RangeInclusive<i64>) -> Result<Self> {
        for (name, r) in [("train", &train), ("valid", &valid), ("test", &test)] {
            if r.is_empty() {
                return Err(Error::config(format!("{name} day range {r:?} is empty")));
            }
        }
        if train.end() >= valid.start() || valid.end() >= test.start() {
            return Err(Error::config(format!(
                "day ranges must be disjoint and ordered train < valid < test, got {train:?}, {valid:?}, {test:?}"
            )));
        }
        Ok(Self { train_days: train, valid_days: valid, test_days: test })
    }

    /// Three days of training, then one day each of validation and test,
    /// starting at `first_day`.
    pub fn three_day(first_day: i64) -> Self {
        Self {
            train_days: first_day..=first_day + 2,
            valid_days: first_day + 3..=first_day + 3,
            test_days: first_day + 4..=first_day + 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits<S> {
    pub train: Vec<S>,
    pub valid: Vec<S>,
    pub test: Vec<S>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn parse_field<F: std::str::FromStr>(s: &str, name: &str, line: usize) -> Result<F> {
    s.trim().parse().map_err(|_| parse_err(line, format!("invalid {name} {s:?}")))
}

fn parse_flag(s: &str, name: &str, line: usize) -> Result<bool> {
    match s.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(parse_err(line, format!("invalid {name} {other:?}, expected 0 or 1"))),
    }
}

const LOG_COLUMNS: [&str; 6] = ["session_id", "position", "track_uri", "skipped", "shuffle", "day"];

/// Parses a session log and groups its rows into sessions.
///
/// Sessions appear in order of first appearance. A session containing any
/// row with `premium = 0` is dropped when the column is present.
pub fn parse_log<R: BufRead>(reader: R) -> Result<Vec<RawSession>> {
    let mut lines = reader.lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Ok(Vec::new()),
            Some((_, line)) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
        }
    };
    let names: Vec<&str> = header.split('\t').map(str::trim).collect();
    let col = |name: &str| names.iter().position(|&n| n == name);
    let mut idx = [0usize; 6];
    for (slot, name) in idx.iter_mut().zip(LOG_COLUMNS) {
        *slot = col(name).ok_or_else(|| parse_err(1, format!("missing column {name:?} in header")))?;
    }
    let premium_col = col("premium");
    let [c_sid, c_pos, c_uri, c_skip, c_shuf, c_day] = idx;

    let mut order: HashMap<String, usize> = HashMap::new();
    let mut sessions: Vec<RawSession> = Vec::new();
    let mut non_premium: Vec<bool> = Vec::new();
    for (n, line) in lines {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != names.len() {
            return Err(parse_err(lineno, format!("expected {} fields, found {}", names.len(), f.len())));
        }
        let event = PlayEvent {
            track_uri: f[c_uri].trim().to_string(),
            position: parse_field(f[c_pos], "position", lineno)?,
            skipped: parse_flag(f[c_skip], "skipped", lineno)?,
            shuffle: parse_flag(f[c_shuf], "shuffle", lineno)?,
            day: parse_field(f[c_day], "day", lineno)?,
        };
        if event.track_uri.is_empty() {
            return Err(parse_err(lineno, "empty track_uri"));
        }
        let premium = match premium_col {
            Some(c) => parse_flag(f[c], "premium", lineno)?,
            None => true,
        };
        let sid = f[c_sid].trim();
        let slot = *order.entry(sid.to_string()).or_insert_with(|| {
            sessions.push(RawSession { id: sid.to_string(), events: Vec::new() });
            non_premium.push(false);
            sessions.len() - 1
        });
        sessions[slot].events.push(event);
        non_premium[slot] |= !premium;
    }

    let mut out = Vec::with_capacity(sessions.len());
    for (mut s, drop) in sessions.into_iter().zip(non_premium) {
        if drop {
            continue;
        }
        s.events.sort_by_key(|e| e.position);
        for (i, e) in s.events.iter().enumerate() {
            if e.position as usize != i + 1 {
                return Err(Error::Validation {
                    session: s.id.clone(),
                    message: format!("positions must be consecutive from 1, found {} at index {}", e.position, i),
                });
            }
        }
        out.push(s);
    }
    Ok(out)
}

/// Writes sessions in the log format read by [`parse_log`], all premium.
pub fn write_log<W: Write>(mut w: W, sessions: &[RawSession]) -> Result<()> {
    writeln!(w, "session_id\tposition\ttrack_uri\tskipped\tshuffle\tday\tpremium")?;
    for s in sessions {
        for e in &s.events {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t1",
                s.id,
                e.position,
                e.track_uri,
                u8::from(e.skipped),
                u8::from(e.shuffle),
                e.day
            )?;
        }
    }
    Ok(())
}

/// Counts track occurrences in `train` and indexes those seen at least
/// `min_count` times, in order of first appearance.
pub fn build_vocabulary(train: &[RawSession], min_count: u64) -> Vocabulary {
    let min_count = min_count.max(1);
    let mut counts: HashMap<&str, u64> = HashMap::new();
    let mut first_seen: Vec<&str> = Vec::new();
    for e in train.iter().flat_map(|s| &s.events) {
        let c = counts.entry(e.track_uri.as_str()).or_insert_with(|| {
            first_seen.push(e.track_uri.as_str());
            0
        });
        *c += 1;
    }
    let mut vocab = Vocabulary::default();
    for uri in first_seen {
        let c = counts[uri];
        if c >= min_count {
            vocab.push(uri.to_string(), c);
        }
    }
    if vocab.is_empty() {
        log::warn!("vocabulary is empty (min_count = {min_count}, {} training sessions)", train.len());
    }
    vocab
}

/// Maps one raw session to a [`Session`], or `None` if fewer than two tracks
/// survive filtering.
pub fn preprocess_session(raw: &RawSession, vocab: &Vocabulary, max_len: usize) -> Option<Session> {
    let shuffle = raw.events.iter().any(|e| e.shuffle);
    let mut tracks = Vec::with_capacity(raw.events.len());
    let mut skipped = Vec::with_capacity(raw.events.len());
    for e in &raw.events {
        let Some(id) = vocab.index_of(&e.track_uri) else { continue };
        if shuffle && e.skipped {
            continue;
        }
        tracks.push(id);
        skipped.push(e.skipped);
    }
    if tracks.len() > max_len {
        let cut = tracks.len() - max_len;
        tracks.drain(..cut);
        skipped.drain(..cut);
    }
    (tracks.len() >= 2).then(|| Session { id: raw.id.clone(), tracks, shuffle, skipped })
}

/// Applies vocabulary filtering, shuffle skip removal, mixed-mode detection,
/// length filtering and truncation to every session.
pub fn preprocess(raw: &[RawSession], vocab: &Vocabulary, max_len: usize) -> Vec<Session> {
    raw.par_iter().filter_map(|s| preprocess_session(s, vocab, max_len)).collect()
}

/// Prefix/label pairs of a session, omitting labels the user skipped.
pub fn expand_instances(session: &Session) -> Vec<TrainingInstance> {
    (1..session.tracks.len())
        .filter(|&t| !session.skipped.get(t).copied().unwrap_or(false))
        .map(|t| TrainingInstance {
            prefix: session.tracks[..t].to_vec(),
            label: session.tracks[t],
            shuffle: session.shuffle,
        })
        .collect()
}

pub fn expand_all(sessions: &[Session]) -> Vec<TrainingInstance> {
    sessions.iter().flat_map(expand_instances).collect()
}

/// Assigns each session to a split by the day of its first event; sessions
/// outside every range are dropped.
pub fn split_by_day(raw: Vec<RawSession>, spec: &SplitSpec) -> Splits<RawSession> {
    let mut out = Splits { train: Vec::new(), valid: Vec::new(), test: Vec::new() };
    for s in raw {
        let Some(day) = s.first_day() else { continue };
        if spec.train_days.contains(&day) {
            out.train.push(s);
        } else if spec.valid_days.contains(&day) {
            out.valid.push(s);
        } else if spec.test_days.contains(&day) {
            out.test.push(s);
        }
    }
    out
}

/// Writes `session_id<TAB>shuffle<TAB>t0,t1,...`, plus a fourth column with
/// the comma-separated skip mask when any retained track was skipped.
pub fn write_sessions<W: Write>(mut w: W, sessions: &[Session]) -> Result<()> {
    for s in sessions {
        let tracks = join(s.tracks.iter());
        write!(w, "{}\t{}\t{}", s.id, u8::from(s.shuffle), tracks)?;
        if s.skipped.iter().any(|&k| k) {
            write!(w, "\t{}", join(s.skipped.iter().map(|&k| u8::from(k))))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn join<I: Iterator<Item = D>, D: std::fmt::Display>(it: I) -> String {
    it.map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn read_sessions<R: BufRead>(r: R) -> Result<Vec<Session>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&f.len()) {
            return Err(parse_err(lineno, format!("expected 3 or 4 fields, found {}", f.len())));
        }
        let shuffle = parse_flag(f[1], "shuffle", lineno)?;
        let tracks: Vec<TrackId> = f[2]
            .split(',')
            .filter(|t| !t.is_empty())
            .map(|t| parse_field(t, "track id", lineno))
            .collect::<Result<_>>()?;
        let skipped = match f.get(3) {
            Some(mask) => mask.split(',').map(|k| parse_flag(k, "skip flag", lineno)).collect::<Result<Vec<_>>>()?,
            None => vec![false; tracks.len()],
        };
        if skipped.len() != tracks.len() {
            return Err(parse_err(lineno, "skip mask length differs from track count"));
        }
        out.push(Session { id: f[0].to_string(), tracks, shuffle, skipped });
    }
    Ok(out)
}
