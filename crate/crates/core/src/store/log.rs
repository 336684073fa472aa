use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use super::{RunEvent, StoreError};
use crate::gateway::GenerationKey;

/// Append-only sequence of events. `append_batch` requires the first event's
/// seq to equal the current length and the rest to follow contiguously.
pub trait EventStore: Send {
    fn len(&self) -> u64;

    fn append_batch(&mut self, events: &[RunEvent]) -> Result<(), StoreError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn append(&mut self, event: &RunEvent) -> Result<(), StoreError> {
        self.append_batch(std::slice::from_ref(event))
    }
}

fn check_sequence(len: u64, events: &[RunEvent]) -> Result<(), StoreError> {
    for (i, e) in events.iter().enumerate() {
        let expected = len + i as u64;
        if e.seq < expected {
            return Err(StoreError::Duplicate { seq: e.seq });
        }
        if e.seq > expected {
            return Err(StoreError::SequenceGap { expected, got: e.seq });
        }
    }
    Ok(())
}

#[derive(Debug, Default, Clone)]
pub struct MemoryLog {
    pub events: Vec<RunEvent>,
}

impl EventStore for MemoryLog {
    fn len(&self) -> u64 {
        self.events.len() as u64
    }

    fn append_batch(&mut self, events: &[RunEvent]) -> Result<(), StoreError> {
        check_sequence(self.len(), events)?;
        self.events.extend_from_slice(events);
        Ok(())
    }
}

/// `events.log`: one JSON record per line, synced to disk after each batch.
pub struct FileLog {
    path: PathBuf,
    file: File,
    len: u64,
}

impl FileLog {
    /// Opens (creating if needed) the log and validates what is already there.
    pub fn open(path: &Path) -> Result<(Self, Vec<RunEvent>), StoreError> {
        let existing = if path.exists() { read_events(path)? } else { Vec::new() };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| StoreError::io(path, e))?;
        let log = FileLog {
            path: path.to_path_buf(),
            file,
            len: existing.len() as u64,
        };
        Ok((log, existing))
    }
}

impl EventStore for FileLog {
    fn len(&self) -> u64 {
        self.len
    }

    fn append_batch(&mut self, events: &[RunEvent]) -> Result<(), StoreError> {
        check_sequence(self.len, events)?;
        let mut buf = String::new();
        for e in events {
            buf.push_str(&e.to_line());
            buf.push('\n');
        }
        self.file
            .write_all(buf.as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(|e| StoreError::io(&self.path, e))?;
        self.len += events.len() as u64;
        Ok(())
    }
}

/// Reads and validates an event log: every line must parse, end with a
/// newline, and carry the next sequence number.
pub fn read_events(path: &Path) -> Result<Vec<RunEvent>, StoreError> {
    let text = std::fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
    if !text.is_empty() && !text.ends_with('\n') {
        let line = text.lines().count();
        return Err(StoreError::Corrupt {
            line,
            message: "truncated record (no trailing newline)".into(),
        });
    }
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let event: RunEvent = serde_json::from_str(line).map_err(|e| StoreError::Corrupt {
            line: i + 1,
            message: e.to_string(),
        })?;
        if event.seq != i as u64 {
            return Err(StoreError::Corrupt {
                line: i + 1,
                message: format!("expected seq {i}, found {}", event.seq),
            });
        }
        events.push(event);
    }
    Ok(events)
}

#[derive(Serialize)]
struct TimingLine<'a> {
    key: &'a GenerationKey,
    latency_ms: u128,
    attempt_count: u32,
    unix_ms: u128,
}

/// Side channel for wall-clock data that must stay out of `events.log`.
pub struct TimingLog {
    path: PathBuf,
    file: File,
}

impl TimingLog {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| StoreError::io(path, e))?;
        Ok(TimingLog {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn record(&mut self, key: &GenerationKey, latency: Duration, attempt_count: u32) -> Result<(), StoreError> {
        let line = TimingLine {
            key,
            latency_ms: latency.as_millis(),
            attempt_count,
            unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
        };
        let mut text = serde_json::to_string(&line).expect("timing serializes");
        text.push('\n');
        self.file
            .write_all(text.as_bytes())
            .map_err(|e| StoreError::io(&self.path, e))
    }
}
