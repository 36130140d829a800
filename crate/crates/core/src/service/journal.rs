//! Append-only JSONL event log with compacted snapshots.
//!
//! `events.jsonl` holds one full record per line, written after every state
//! change. `snapshot.jsonl` holds every record in queue order. Replay reads
//! the snapshot, then applies the log on top. Leases are never written.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SampleRecord;

const SNAPSHOT: &str = "snapshot.jsonl";
const EVENTS: &str = "events.jsonl";

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Upsert { record: SampleRecord },
}

#[derive(Debug)]
pub(super) struct Journal {
    dir: PathBuf,
    log: File,
    since_snapshot: usize,
    snapshot_every: usize,
    fsync: bool,
}

fn read_lines(
    path: &Path,
    out: &mut Vec<SampleRecord>,
    index: &mut HashMap<String, usize>,
    events: bool,
) -> std::io::Result<usize> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(0),
        Err(e) => return Err(e),
    };
    let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
    let mut applied = 0;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = if events {
            serde_json::from_str::<Event>(line).map(|Event::Upsert { record }| record)
        } else {
            serde_json::from_str::<SampleRecord>(line)
        };
        let mut rec = match parsed {
            Ok(r) => r,
            // A torn final line from a crash mid-append.
            Err(e) if i + 1 == lines.len() => {
                tracing::warn!(path = %path.display(), line = i + 1, error = %e, "ignoring torn journal tail");
                continue;
            }
            Err(e) => {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{} line {}: {e}", path.display(), i + 1),
                ))
            }
        };
        rec.lease = None;
        match index.get(&rec.id) {
            Some(&pos) => out[pos] = rec,
            None => {
                index.insert(rec.id.clone(), out.len());
                out.push(rec);
            }
        }
        applied += 1;
    }
    Ok(applied)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    let mut f = File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        // Persist the rename itself where the platform allows it.
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

impl Journal {
    pub(super) fn open(
        dir: &Path,
        snapshot_every: usize,
        fsync: bool,
    ) -> std::io::Result<(Self, Vec<SampleRecord>)> {
        std::fs::create_dir_all(dir)?;
        let mut records = Vec::new();
        let mut index = HashMap::new();
        read_lines(&dir.join(SNAPSHOT), &mut records, &mut index, false)?;
        let replayed = read_lines(&dir.join(EVENTS), &mut records, &mut index, true)?;
        let mut journal = Self {
            log: OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(EVENTS))?,
            dir: dir.to_path_buf(),
            since_snapshot: replayed,
            snapshot_every: snapshot_every.max(1),
            fsync,
        };
        // Fold the replayed log (and any torn tail) into a fresh snapshot.
        journal.compact(records.iter().collect())?;
        Ok((journal, records))
    }

    /// Replay without touching the files.
    pub(super) fn load(dir: &Path) -> std::io::Result<Vec<SampleRecord>> {
        let mut records = Vec::new();
        let mut index = HashMap::new();
        read_lines(&dir.join(SNAPSHOT), &mut records, &mut index, false)?;
        read_lines(&dir.join(EVENTS), &mut records, &mut index, true)?;
        Ok(records)
    }

    pub(super) fn append(&mut self, rec: &SampleRecord) -> std::io::Result<()> {
        let mut record = rec.clone();
        record.lease = None;
        let mut line = serde_json::to_vec(&Event::Upsert { record })?;
        line.push(b'\n');
        self.log.write_all(&line)?;
        if self.fsync {
            self.log.sync_data()?;
        }
        self.since_snapshot += 1;
        Ok(())
    }

    pub(super) fn due_for_snapshot(&self) -> bool {
        self.since_snapshot >= self.snapshot_every
    }

    pub(super) fn compact(&mut self, records: Vec<&SampleRecord>) -> std::io::Result<()> {
        let mut buf = Vec::new();
        for r in records {
            let mut r = r.clone();
            r.lease = None;
            serde_json::to_writer(&mut buf, &r)?;
            buf.push(b'\n');
        }
        write_atomic(&self.dir.join(SNAPSHOT), &buf)?;
        // The snapshot now covers every event; a crash before this truncation
        // only replays idempotent upserts.
        self.log.set_len(0)?;
        if self.fsync {
            self.log.sync_all()?;
        }
        self.since_snapshot = 0;
        Ok(())
    }
}
