//! Snapshots on disk, with the log split into chunk files.
//!
//! ```text
//! <dir>/manifest.json            cluster manifest, written last
//! <dir>/node_<id>/meta.json      certificate, election list, leader signatures
//! <dir>/node_<id>/chunk_<k>.log  one JSON entry per line
//! ```
//!
//! The manifest records the index and term range of every chunk, so a reader
//! can find an entry by index or by term while opening a single chunk.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::audit::LogView;
use crate::crypto::{NodeId, PublicRegistry, Signature};
use crate::types::{CommitCert, Index, LeaderCert, LogEntry, Snapshot, Term};

pub const MANIFEST: &str = "manifest.json";
pub const META: &str = "meta.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{0}: no manifest; the store is missing or was not finished")]
    MissingManifest(PathBuf),
    #[error("manifest: {0}")]
    Manifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StorageError + '_ {
    move |source| StorageError::Io { path: path.to_path_buf(), source }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> StorageError + '_ {
    move |source| StorageError::Json { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkInfo {
    pub file: String,
    pub first_index: Index,
    pub last_index: Index,
    pub first_term: Term,
    pub last_term: Term,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeManifest {
    pub node: NodeId,
    pub entries: u64,
    pub chunks: Vec<ChunkInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub n: usize,
    pub f: usize,
    /// Maximum entries per chunk; `None` keeps each log in one file.
    pub chunk_size: Option<u64>,
    pub registry: PublicRegistry,
    pub nodes: Vec<NodeManifest>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    node: NodeId,
    cert: Option<CommitCert>,
    elections: BTreeMap<Term, LeaderCert>,
    leader_sigs: BTreeMap<Term, Signature>,
}

#[derive(Serialize, Deserialize)]
struct Line {
    term: Term,
    index: Index,
    payload_hex: String,
}

pub fn node_dir(dir: &Path, node: NodeId) -> PathBuf {
    dir.join(format!("node_{}", node.0))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StorageError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(json_err(path))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StorageError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(BufReader::new(file)).map_err(json_err(path))
}

/// Writes one node's snapshot into `dir` (its node directory).
pub fn write_snapshot(dir: &Path, snap: &Snapshot, chunk_size: Option<u64>) -> Result<NodeManifest, StorageError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let per = chunk_size.unwrap_or(u64::MAX).max(1) as usize;
    let mut chunks = Vec::new();
    for (k, part) in snap.log.chunks(per).enumerate() {
        let name = format!("chunk_{k}.log");
        let path = dir.join(&name);
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        for e in part {
            let line = Line { term: e.term, index: e.index, payload_hex: hex::encode(&e.payload) };
            serde_json::to_writer(&mut w, &line).map_err(json_err(&path))?;
            w.write_all(b"\n").map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
        let (first, last) = (&part[0], &part[part.len() - 1]);
        chunks.push(ChunkInfo {
            file: name,
            first_index: first.index,
            last_index: last.index,
            first_term: first.term,
            last_term: last.term,
        });
    }
    let meta = Meta {
        node: snap.node,
        cert: snap.cert.clone(),
        elections: snap.elections.clone(),
        leader_sigs: snap.leader_sigs.clone(),
    };
    write_json(&dir.join(META), &meta)?;
    Ok(NodeManifest { node: snap.node, entries: snap.log.len() as u64, chunks })
}

/// Writes every snapshot, then the manifest. A crash before the manifest is
/// renamed into place leaves a store that `Store::open` refuses.
pub fn write_cluster(
    dir: &Path,
    snaps: &[Snapshot],
    registry: &PublicRegistry,
    f: usize,
    chunk_size: Option<u64>,
) -> Result<Manifest, StorageError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let final_path = dir.join(MANIFEST);
    if final_path.exists() {
        fs::remove_file(&final_path).map_err(io_err(&final_path))?;
    }
    let mut nodes = Vec::new();
    for s in snaps {
        let nd = node_dir(dir, s.node);
        if nd.exists() {
            fs::remove_dir_all(&nd).map_err(io_err(&nd))?;
        }
        nodes.push(write_snapshot(&nd, s, chunk_size)?);
    }
    let manifest =
        Manifest { version: FORMAT_VERSION, n: registry.len(), f, chunk_size, registry: registry.clone(), nodes };
    let tmp = dir.join("manifest.json.partial");
    write_json(&tmp, &manifest)?;
    fs::rename(&tmp, &final_path).map_err(io_err(&final_path))?;
    Ok(manifest)
}

fn check_node(m: &NodeManifest) -> Result<(), String> {
    let mut next = 0;
    let mut term = 0;
    for c in &m.chunks {
        if c.first_index != next || c.last_index < c.first_index || c.first_term < term || c.last_term < c.first_term {
            return Err(format!("node {}: chunk {} has an inconsistent range", m.node, c.file));
        }
        if c.file.contains(['/', '\\']) || c.file.starts_with('.') {
            return Err(format!("node {}: bad chunk name {:?}", m.node, c.file));
        }
        next = c.last_index + 1;
        term = c.last_term;
    }
    if next != m.entries {
        return Err(format!("node {}: chunks hold {next} entries, manifest says {}", m.node, m.entries));
    }
    Ok(())
}

/// A finished store opened for reading.
#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    manifest: Manifest,
}

impl Store {
    pub fn open(dir: &Path) -> Result<Store, StorageError> {
        let path = dir.join(MANIFEST);
        if !path.is_file() {
            return Err(StorageError::MissingManifest(dir.to_path_buf()));
        }
        let manifest: Manifest = read_json(&path)?;
        if manifest.version != FORMAT_VERSION {
            return Err(StorageError::Manifest(format!("unsupported version {}", manifest.version)));
        }
        if manifest.registry.len() != manifest.n || manifest.n != 2 * manifest.f + 1 {
            return Err(StorageError::Manifest(format!("n = {} does not match f = {}", manifest.n, manifest.f)));
        }
        for m in &manifest.nodes {
            check_node(m).map_err(StorageError::Manifest)?;
        }
        Ok(Store { dir: dir.to_path_buf(), manifest })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn registry(&self) -> &PublicRegistry {
        &self.manifest.registry
    }

    pub fn f(&self) -> usize {
        self.manifest.f
    }

    /// Loads one node's metadata; its log stays on disk.
    pub fn snapshot(&self, m: &NodeManifest) -> Result<Snapshot<ChunkedLog>, StorageError> {
        let dir = node_dir(&self.dir, m.node);
        let meta: Meta = read_json(&dir.join(META))?;
        if meta.node != m.node {
            return Err(StorageError::Manifest(format!("{} holds data of node {}", dir.display(), meta.node)));
        }
        let log = ChunkedLog::new(dir, m.chunks.clone(), m.entries);
        Ok(Snapshot { node: meta.node, log, elections: meta.elections, cert: meta.cert, leader_sigs: meta.leader_sigs })
    }

    pub fn load_cluster(&self) -> Result<Vec<Snapshot<ChunkedLog>>, StorageError> {
        self.manifest.nodes.iter().map(|m| self.snapshot(m)).collect()
    }
}

/// Where `locate_term` found the first entry of a later term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Location {
    At { chunk: usize, offset: usize, index: Index },
    End,
}

/// A log read lazily from chunk files, keeping the last chunk in memory.
/// Counts chunk loads and parsed entries.
#[derive(Debug)]
pub struct ChunkedLog {
    dir: PathBuf,
    chunks: Vec<ChunkInfo>,
    len: u64,
    cache: Mutex<Option<(usize, Arc<Vec<LogEntry>>)>>,
    loads: AtomicU64,
    parsed: AtomicU64,
}

impl ChunkedLog {
    fn new(dir: PathBuf, chunks: Vec<ChunkInfo>, len: u64) -> ChunkedLog {
        ChunkedLog { dir, chunks, len, cache: Mutex::new(None), loads: AtomicU64::new(0), parsed: AtomicU64::new(0) }
    }

    pub fn chunks(&self) -> &[ChunkInfo] {
        &self.chunks
    }

    /// Entries parsed from disk so far.
    pub fn entries_parsed(&self) -> u64 {
        self.parsed.load(Ordering::Relaxed)
    }

    /// Drops the cached chunk so the next read goes to disk.
    pub fn evict(&self) {
        *self.cache.lock().unwrap_or_else(|e| e.into_inner()) = None;
    }

    fn parse(&self, k: usize) -> Result<Vec<LogEntry>, StorageError> {
        let info = &self.chunks[k];
        let path = self.dir.join(&info.file);
        let file = fs::File::open(&path).map_err(io_err(&path))?;
        let mut out = Vec::with_capacity((info.last_index - info.first_index + 1) as usize);
        for line in BufReader::new(file).lines() {
            let line = line.map_err(io_err(&path))?;
            let l: Line = serde_json::from_str(&line).map_err(json_err(&path))?;
            let payload = hex::decode(&l.payload_hex)
                .map_err(|e| StorageError::Manifest(format!("{}: bad payload hex: {e}", path.display())))?;
            out.push(LogEntry { term: l.term, index: l.index, payload });
        }
        self.parsed.fetch_add(out.len() as u64, Ordering::Relaxed);
        if out.len() as u64 != info.last_index - info.first_index + 1 {
            return Err(StorageError::Manifest(format!("{}: entry count differs from manifest", path.display())));
        }
        Ok(out)
    }

    /// Chunk `k`, from the cache if it is the last one read. An unreadable
    /// chunk reads as empty, which the integrity check then rejects.
    fn chunk(&self, k: usize) -> Arc<Vec<LogEntry>> {
        let mut cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((ck, data)) = cache.as_ref() {
            if *ck == k {
                return data.clone();
            }
        }
        self.loads.fetch_add(1, Ordering::Relaxed);
        let data = Arc::new(self.parse(k).unwrap_or_default());
        *cache = Some((k, data.clone()));
        data
    }

    fn chunk_of(&self, index: Index) -> Option<usize> {
        if index >= self.len {
            return None;
        }
        Some(self.chunks.partition_point(|c| c.last_index < index))
    }

    /// First entry whose term exceeds `t`: binary search over chunk term
    /// ranges, then a scan inside the one chunk that can hold it.
    pub fn locate_term(&self, t: Term) -> Location {
        let k = self.chunks.partition_point(|c| c.last_term <= t);
        if k == self.chunks.len() {
            return Location::End;
        }
        let data = self.chunk(k);
        match data.iter().position(|e| e.term > t) {
            Some(offset) => Location::At { chunk: k, offset, index: self.chunks[k].first_index + offset as Index },
            None => Location::End,
        }
    }

    /// The whole log in memory.
    pub fn read_all(&self) -> Vec<LogEntry> {
        (0..self.chunks.len()).flat_map(|k| self.chunk(k).as_ref().clone()).collect()
    }
}

impl LogView for ChunkedLog {
    fn len(&self) -> u64 {
        self.len
    }

    fn entry(&self, index: Index) -> Option<LogEntry> {
        let k = self.chunk_of(index)?;
        let data = self.chunk(k);
        data.get((index - self.chunks[k].first_index) as usize).cloned()
    }

    fn scan(&self, from: Index, visit: &mut dyn FnMut(&LogEntry) -> bool) {
        let Some(start) = self.chunk_of(from) else { return };
        for k in start..self.chunks.len() {
            let data = self.chunk(k);
            let skip = from.saturating_sub(self.chunks[k].first_index) as usize;
            for e in data.iter().skip(skip) {
                if !visit(e) {
                    return;
                }
            }
            if data.len() as u64 != self.chunks[k].last_index - self.chunks[k].first_index + 1 {
                return;
            }
        }
    }

    fn chunk_reads(&self) -> u64 {
        self.loads.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::NodeState;

    fn snap(entries: u64) -> Snapshot {
        let mut s = NodeState::new(NodeId(0));
        for i in 1..=entries {
            s.append(LogEntry::new(1 + i / 40, i, format!("p{i}").into_bytes()));
        }
        Snapshot { node: NodeId(0), log: s.log, elections: BTreeMap::new(), cert: None, leader_sigs: BTreeMap::new() }
    }

    #[test]
    fn chunk_count_is_ceiling_of_entries() {
        let tmp = tempfile::tempdir().unwrap();
        let s = snap(249);
        let m = write_snapshot(tmp.path(), &s, Some(100)).unwrap();
        assert_eq!(m.chunks.len(), 3);
        let m = write_snapshot(&tmp.path().join("inf"), &s, None).unwrap();
        assert_eq!(m.chunks.len(), 1);
    }

    #[test]
    fn chunks_concatenate_to_the_log() {
        let tmp = tempfile::tempdir().unwrap();
        let s = snap(250);
        let m = write_snapshot(tmp.path(), &s, Some(7)).unwrap();
        let log = ChunkedLog::new(tmp.path().to_path_buf(), m.chunks, m.entries);
        assert_eq!(log.read_all(), s.log);
        assert_eq!(log.entry(123), Some(s.log[123].clone()));
        assert_eq!(log.entry(251), None);
    }

    #[test]
    fn missing_chunk_reads_short() {
        let tmp = tempfile::tempdir().unwrap();
        let s = snap(30);
        let m = write_snapshot(tmp.path(), &s, Some(10)).unwrap();
        fs::remove_file(tmp.path().join("chunk_1.log")).unwrap();
        let log = ChunkedLog::new(tmp.path().to_path_buf(), m.chunks, m.entries);
        assert_eq!(log.entry(15), None);
        let mut seen = 0;
        log.scan(0, &mut |_| {
            seen += 1;
            true
        });
        assert_eq!(seen, 10);
    }

    fn with_terms(terms: &[Term]) -> Snapshot {
        let mut s = NodeState::new(NodeId(0));
        for (i, t) in terms.iter().enumerate() {
            s.append(LogEntry::new(*t, i as Index + 1, vec![i as u8]));
        }
        Snapshot { node: NodeId(0), log: s.log, elections: BTreeMap::new(), cert: None, leader_sigs: BTreeMap::new() }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(1000))]

        #[test]
        fn locate_term_matches_a_linear_scan(
            steps in proptest::collection::vec(0u64..3, 0..60),
            chunk in 1u64..12,
            probe in 0u64..40,
        ) {
            let terms: Vec<Term> = steps.iter().scan(1, |t, d| { *t += d; Some(*t) }).collect();
            let s = with_terms(&terms);
            let tmp = tempfile::tempdir().unwrap();
            let m = write_snapshot(tmp.path(), &s, Some(chunk)).unwrap();
            let log = ChunkedLog::new(tmp.path().to_path_buf(), m.chunks, m.entries);
            let expected = s.log.iter().find(|e| e.term > probe).map(|e| e.index);
            let got = match log.locate_term(probe) {
                Location::At { index, chunk: k, offset } => {
                    proptest::prop_assert_eq!(log.chunks()[k].first_index + offset as Index, index);
                    Some(index)
                }
                Location::End => None,
            };
            proptest::prop_assert_eq!(got, expected);
            proptest::prop_assert!(log.chunk_reads() <= 1);
        }
    }
}
