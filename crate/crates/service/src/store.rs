//! Append-only session logs.
//!
//! Layout under the data directory:
//! `index.jsonl` lists sessions in creation order; `sessions/<id>.json` holds
//! the generated session; `sessions/<id>.jsonl` is the event log that
//! replays to the session's state.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use simbench_core::testbench::{ResponseRecord, TestSession};
use thiserror::Error;

use crate::session::{Answer, SessionState};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path} line {line}: {message}")]
    Replay { path: PathBuf, line: usize, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        session: Box<TestSession>,
        user: String,
        created_ms: u64,
    },
    Response {
        record: ResponseRecord,
    },
    /// Left phase `from`, which takes no answers.
    Advance {
        from: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    created_ms: u64,
}

pub struct Store {
    dir: PathBuf,
    index: Mutex<()>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut line = serde_json::to_string(value).expect("events serialize");
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io(path))?;
    f.write_all(line.as_bytes()).map_err(io(path))?;
    f.sync_data().map_err(io(path))
}

/// Parses JSON lines. A final line without a newline that fails to parse is
/// a write cut short by a crash and is dropped.
fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(_) if i + 1 == lines.len() && !complete => break,
            Err(source) => {
                return Err(StoreError::Json {
                    path: path.to_path_buf(),
                    line: i + 1,
                    source,
                })
            }
        }
    }
    Ok(out)
}

/// Rebuilds a session's state by re-applying its logged events.
pub fn replay(path: &Path, events: &[Event]) -> Result<SessionState, StoreError> {
    let fail = |line: usize, message: String| StoreError::Replay {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut state = match events.first() {
        Some(Event::Created {
            session,
            user,
            created_ms,
        }) => SessionState::new((**session).clone(), user.clone(), *created_ms),
        _ => return Err(fail(1, "log does not start with a created event".into())),
    };
    for (i, event) in events.iter().enumerate().skip(1) {
        match event {
            Event::Created { .. } => return Err(fail(i + 1, "second created event".into())),
            Event::Response { record } => {
                let answer = Answer {
                    item: record.item_id.clone(),
                    prediction: record.predicted_class,
                    rating: record.rating,
                    elapsed_ms: record.elapsed_ms,
                };
                let replayed = state
                    .respond(&answer, record.timestamp_ms)
                    .map_err(|r| fail(i + 1, r.to_string()))?;
                if &replayed != record {
                    return Err(fail(i + 1, "response does not match the session".into()));
                }
            }
            Event::Advance { from } => {
                if *from != state.phase {
                    return Err(fail(i + 1, format!("advance from phase {from} while in phase {}", state.phase)));
                }
                state.advance().map_err(|r| fail(i + 1, r.to_string()))?;
            }
        }
    }
    Ok(state)
}

impl Store {
    /// Opens (creating if needed) the store at `dir` and replays every session.
    pub fn open(dir: &Path) -> Result<(Self, Vec<SessionState>), StoreError> {
        let sessions = dir.join("sessions");
        fs::create_dir_all(&sessions).map_err(io(&sessions))?;
        let store = Self {
            dir: dir.to_path_buf(),
            index: Mutex::new(()),
        };
        let index = store.index_path();
        let entries: Vec<IndexEntry> = if index.exists() { read_lines(&index)? } else { Vec::new() };
        let mut states = Vec::with_capacity(entries.len());
        for e in entries {
            let path = store.log_path(&e.id);
            let events: Vec<Event> = read_lines(&path)?;
            states.push(replay(&path, &events)?);
        }
        Ok((store, states))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn index_path(&self) -> PathBuf {
        self.dir.join("index.jsonl")
    }

    pub fn log_path(&self, id: &str) -> PathBuf {
        self.dir.join("sessions").join(format!("{id}.jsonl"))
    }

    pub fn session_path(&self, id: &str) -> PathBuf {
        self.dir.join("sessions").join(format!("{id}.json"))
    }

    /// Persists a new session: its JSON, the first log event, then the index entry.
    pub fn create(&self, state: &SessionState) -> Result<(), StoreError> {
        let id = &state.session.id;
        let path = self.session_path(id);
        let mut json = serde_json::to_string_pretty(&state.session).expect("sessions serialize");
        json.push('\n');
        fs::write(&path, json).map_err(io(&path))?;
        self.append(
            id,
            &Event::Created {
                session: Box::new(state.session.clone()),
                user: state.user.clone(),
                created_ms: state.created_ms,
            },
        )?;
        let _guard = self.index.lock().unwrap_or_else(|e| e.into_inner());
        append_line(
            &self.index_path(),
            &IndexEntry {
                id: id.clone(),
                created_ms: state.created_ms,
            },
        )
    }

    pub fn append(&self, id: &str, event: &Event) -> Result<(), StoreError> {
        append_line(&self.log_path(id), event)
    }

    /// Reads a session's log back from disk.
    pub fn events(&self, id: &str) -> Result<Vec<Event>, StoreError> {
        read_lines(&self.log_path(id))
    }
}
