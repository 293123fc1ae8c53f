//! Corpus storage and ingestion: a compact binary file of chord graphs, and
//! loaders for MIDI collections and pianoroll JSON directories.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;
use walkdir::WalkDir;

use crate::graph::{build_graph_with, ChordGraph, GraphError, Overflow};
use crate::midi::{parse_smf, to_pianoroll, TrackMap};
use crate::pianoroll::{FixtureError, Pianoroll};

const MAGIC: &[u8; 8] = b"POLYCRPS";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a corpus file")]
    BadMagic,
    #[error("unsupported corpus version {0}")]
    UnsupportedVersion(u32),
    #[error("corpus truncated")]
    Truncated,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{path}: {source}")]
    Fixture { path: PathBuf, source: FixtureError },
    #[error("sequences disagree on {what}: {a} vs {b}")]
    Inconsistent { what: &'static str, a: usize, b: usize },
    #[error("no sequences found under {0}")]
    Empty(PathBuf),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

/// Graphs sharing one bar count and one slot count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub graphs: Vec<ChordGraph>,
}

impl Corpus {
    pub fn new(graphs: Vec<ChordGraph>) -> Result<Self> {
        if let Some(first) = graphs.first() {
            for g in &graphs[1..] {
                if g.n_bars() != first.n_bars() {
                    return Err(CorpusError::Inconsistent { what: "bar count", a: first.n_bars(), b: g.n_bars() });
                }
                if g.sigma != first.sigma {
                    return Err(CorpusError::Inconsistent { what: "sigma", a: first.sigma, b: g.sigma });
                }
            }
        }
        Ok(Corpus { graphs })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn n_bars(&self) -> Option<usize> {
        self.graphs.first().map(ChordGraph::n_bars)
    }

    pub fn sigma(&self) -> Option<usize> {
        self.graphs.first().map(|g| g.sigma)
    }

    pub fn rolls(&self) -> Vec<Pianoroll> {
        self.graphs.iter().map(ChordGraph::to_pianoroll).collect()
    }

    /// `POLYCRPS`, version, count, then length-prefixed graph records.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.graphs.len() as u32).to_le_bytes());
        let mut record = Vec::new();
        for g in &self.graphs {
            record.clear();
            g.write_binary(&mut record);
            out.extend_from_slice(&(record.len() as u32).to_le_bytes());
            out.extend_from_slice(&record);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CorpusError::BadMagic);
        }
        let word = |at: usize| -> Result<usize> {
            let b = bytes.get(at..at + 4).ok_or(CorpusError::Truncated)?;
            Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        };
        let version = word(8)? as u32;
        if version != VERSION {
            return Err(CorpusError::UnsupportedVersion(version));
        }
        let count = word(12)?;
        let mut at = 16;
        let mut graphs = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = word(at)?;
            let body = bytes.get(at + 4..at + 4 + len).ok_or(CorpusError::Truncated)?;
            graphs.push(ChordGraph::read_binary(body)?);
            at += 4 + len;
        }
        Corpus::new(graphs)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(io(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Corpus::from_bytes(&fs::read(path).map_err(io(path))?)
    }
}

/// Counts reported by [`preprocess`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PreprocessSummary {
    pub files_seen: usize,
    pub files_used: usize,
    /// Files that failed to parse or held nothing quantizable.
    pub files_skipped: usize,
    pub sequences: usize,
}

fn files_with_extension(dir: &Path, exts: &[&str]) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| exts.iter().any(|e| x.eq_ignore_ascii_case(e)))
        })
        .collect();
    files.sort();
    files
}

/// Converts every MIDI file under `dir` into `bars`-bar sequences and builds
/// their graphs. Unreadable files are skipped with a warning; chords larger
/// than `sigma - 1` notes keep their highest pitches.
pub fn preprocess(dir: impl AsRef<Path>, bars: usize, sigma: usize, map: &TrackMap) -> Result<(Corpus, PreprocessSummary)> {
    let dir = dir.as_ref();
    let mut summary = PreprocessSummary::default();
    let mut graphs = Vec::new();
    for path in files_with_extension(dir, &["mid", "midi"]) {
        summary.files_seen += 1;
        let bytes = fs::read(&path).map_err(io(&path))?;
        let rolls = match parse_smf(&bytes).map_err(|e| e.to_string()).and_then(|f| to_pianoroll(&f, map, bars).map_err(|e| e.to_string())) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                summary.files_skipped += 1;
                continue;
            }
        };
        summary.files_used += 1;
        for roll in rolls {
            graphs.push(build_graph_with(&roll, sigma, Overflow::KeepHighest)?);
        }
    }
    summary.sequences = graphs.len();
    Ok((Corpus::new(graphs)?, summary))
}

/// Pianorolls from a directory of JSON fixtures, a single JSON fixture, or
/// a binary corpus file.
pub fn load_rolls(path: impl AsRef<Path>) -> Result<Vec<Pianoroll>> {
    let path = path.as_ref();
    let read_json = |p: &Path| -> Result<Pianoroll> {
        let text = fs::read_to_string(p).map_err(io(p))?;
        Pianoroll::from_json(&text).map_err(|source| CorpusError::Fixture { path: p.to_path_buf(), source })
    };
    if path.is_dir() {
        let rolls = files_with_extension(path, &["json"]).iter().map(|p| read_json(p)).collect::<Result<Vec<_>>>()?;
        if rolls.is_empty() {
            return Err(CorpusError::Empty(path.to_path_buf()));
        }
        return Ok(rolls);
    }
    if path.extension().and_then(|x| x.to_str()) == Some("json") {
        return Ok(vec![read_json(path)?]);
    }
    Ok(Corpus::read(path)?.rolls())
}
