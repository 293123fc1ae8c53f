//! Chord-level graphs.
//!
//! Every `(bar, track, timestep)` cell holding at least one onset becomes a
//! node whose content is the list of notes starting there. Nodes are joined
//! by three edge families, all confined to a single bar:
//!
//! * track edges between consecutive activations of one track (one edge
//!   type per track),
//! * onset edges between simultaneous activations of different tracks,
//! * next edges from an activation to each other track's earliest strictly
//!   later activation.
//!
//! Every edge is stored in both directions and carries the distance in
//! timesteps between its endpoints.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::pianoroll::{Onset, Pianoroll, MAX_DURATION, N_PITCHES, N_TRACKS, STEPS_PER_BAR};
use crate::Scalar;

pub const PITCH_SOS: u16 = 128;
pub const PITCH_EOS: u16 = 129;
pub const PITCH_PAD: u16 = 130;
pub const PITCH_VOCAB: usize = 131;
pub const DUR_SOS: u16 = 96;
pub const DUR_EOS: u16 = 97;
pub const DUR_PAD: u16 = 98;
pub const DUR_VOCAB: usize = 99;
/// Width of one note slot: pitch one-hot followed by duration one-hot.
pub const NOTE_WIDTH: usize = PITCH_VOCAB + DUR_VOCAB;
pub const DEFAULT_SIGMA: usize = 16;
/// Track edge types come first (one per track), then onset, then next.
pub const N_EDGE_TYPES: usize = N_TRACKS + 2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("{notes} simultaneous notes at bar {bar}, track {track}, step {step} exceed {max} slots")]
    ChordOverflow { bar: usize, track: usize, step: usize, notes: usize, max: usize },
    #[error("sigma must be at least 2, got {0}")]
    BadSigma(usize),
    #[error("malformed graph: {0}")]
    Malformed(String),
    #[error("structure must be shaped (bars, 4, 32) with 0/1 entries: {0}")]
    BadStructure(String),
}

/// Binary `(bar, track, timestep)` activation grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StructureTensor {
    n_bars: usize,
    cells: Vec<bool>,
}

impl StructureTensor {
    pub const CELLS_PER_BAR: usize = N_TRACKS * STEPS_PER_BAR;

    pub fn zeros(n_bars: usize) -> Self {
        StructureTensor { n_bars, cells: vec![false; n_bars * Self::CELLS_PER_BAR] }
    }

    pub fn from_cells(n_bars: usize, cells: Vec<bool>) -> Result<Self, GraphError> {
        if cells.len() != n_bars * Self::CELLS_PER_BAR {
            return Err(GraphError::BadStructure(format!("{} cells for {} bars", cells.len(), n_bars)));
        }
        Ok(StructureTensor { n_bars, cells })
    }

    pub fn n_bars(&self) -> usize {
        self.n_bars
    }

    fn index(&self, bar: usize, track: usize, step: usize) -> usize {
        assert!(bar < self.n_bars && track < N_TRACKS && step < STEPS_PER_BAR, "cell out of range");
        (bar * N_TRACKS + track) * STEPS_PER_BAR + step
    }

    pub fn get(&self, bar: usize, track: usize, step: usize) -> bool {
        self.cells[self.index(bar, track, step)]
    }

    pub fn set(&mut self, bar: usize, track: usize, step: usize, on: bool) {
        let i = self.index(bar, track, step);
        self.cells[i] = on;
    }

    /// Row-major `(bar, track, step)` cells.
    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Active cells in `(bar, track, step)` order.
    pub fn support(&self) -> Vec<NodeKey> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(|(k, _)| NodeKey {
                bar: k / Self::CELLS_PER_BAR,
                track: (k / STEPS_PER_BAR) % N_TRACKS,
                step: k % STEPS_PER_BAR,
            })
            .collect()
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<u8>>> {
        (0..self.n_bars)
            .map(|n| {
                (0..N_TRACKS)
                    .map(|i| (0..STEPS_PER_BAR).map(|t| u8::from(self.get(n, i, t))).collect())
                    .collect()
            })
            .collect()
    }

    pub fn from_nested(nested: &[Vec<Vec<u8>>]) -> Result<Self, GraphError> {
        let mut s = StructureTensor::zeros(nested.len());
        for (n, bar) in nested.iter().enumerate() {
            if bar.len() != N_TRACKS {
                return Err(GraphError::BadStructure(format!("bar {n} has {} tracks", bar.len())));
            }
            for (i, row) in bar.iter().enumerate() {
                if row.len() != STEPS_PER_BAR {
                    return Err(GraphError::BadStructure(format!("bar {n} track {i} has {} steps", row.len())));
                }
                for (t, &v) in row.iter().enumerate() {
                    match v {
                        0 => {}
                        1 => s.set(n, i, t, true),
                        other => return Err(GraphError::BadStructure(format!("entry {other} is not binary"))),
                    }
                }
            }
        }
        Ok(s)
    }
}

impl Serialize for StructureTensor {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_nested().serialize(s)
    }
}

impl<'de> Deserialize<'de> for StructureTensor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let nested = Vec::<Vec<Vec<u8>>>::deserialize(d)?;
        StructureTensor::from_nested(&nested).map_err(D::Error::custom)
    }
}

/// Activations only; sustained steps stay zero.
pub fn structure_of(roll: &Pianoroll) -> StructureTensor {
    let mut s = StructureTensor::zeros(roll.n_bars());
    for o in roll.onsets() {
        s.set(o.bar, o.track, o.step, true);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeKey {
    pub bar: usize,
    pub track: usize,
    pub step: usize,
}

impl NodeKey {
    pub fn global_step(&self) -> usize {
        self.bar * STEPS_PER_BAR + self.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    Track(usize),
    Onset,
    Next,
}

impl EdgeKind {
    pub fn index(self) -> usize {
        match self {
            EdgeKind::Track(i) => i,
            EdgeKind::Onset => N_TRACKS,
            EdgeKind::Next => N_TRACKS + 1,
        }
    }

    pub fn from_index(k: usize) -> Option<Self> {
        match k {
            k if k < N_TRACKS => Some(EdgeKind::Track(k)),
            k if k == N_TRACKS => Some(EdgeKind::Onset),
            k if k == N_TRACKS + 1 => Some(EdgeKind::Next),
            _ => None,
        }
    }

    pub fn name(self) -> String {
        match self {
            EdgeKind::Track(i) => format!("track_{i}"),
            EdgeKind::Onset => "onset".into(),
            EdgeKind::Next => "next".into(),
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "onset" => Some(EdgeKind::Onset),
            "next" => Some(EdgeKind::Next),
            _ => name
                .strip_prefix("track_")
                .and_then(|i| i.parse().ok())
                .filter(|&i| i < N_TRACKS)
                .map(EdgeKind::Track),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
    pub delta: usize,
}

/// Node set plus edges; everything a graph has except note content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub n_bars: usize,
    pub nodes: Vec<NodeKey>,
    pub edges: Vec<Edge>,
}

impl Topology {
    /// `nodes` must be sorted by `(bar, track, step)` and free of duplicates.
    pub fn from_nodes(n_bars: usize, nodes: Vec<NodeKey>) -> Self {
        let edges = structural_edges(&nodes);
        Topology { n_bars, nodes, edges }
    }

    pub fn from_structure(s: &StructureTensor) -> Self {
        Topology::from_nodes(s.n_bars(), s.support())
    }

    /// Number of incoming edges per node.
    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.nodes.len()];
        for e in &self.edges {
            deg[e.dst] += 1;
        }
        deg
    }
}

fn structural_edges(nodes: &[NodeKey]) -> Vec<Edge> {
    let mut edges = Vec::new();
    let mut both = |a: usize, b: usize, kind: EdgeKind, delta: usize| {
        edges.push(Edge { src: a, dst: b, kind, delta });
        edges.push(Edge { src: b, dst: a, kind, delta });
    };
    let mut start = 0;
    while start < nodes.len() {
        let bar = nodes[start].bar;
        let end = start + nodes[start..].iter().take_while(|k| k.bar == bar).count();
        // per-track node indices, ascending in step since nodes are sorted
        let mut by_track: [Vec<usize>; N_TRACKS] = Default::default();
        for v in start..end {
            by_track[nodes[v].track].push(v);
        }
        for (i, list) in by_track.iter().enumerate() {
            for w in list.windows(2) {
                both(w[0], w[1], EdgeKind::Track(i), nodes[w[1]].step - nodes[w[0]].step);
            }
        }
        for u in start..end {
            for v in u + 1..end {
                if nodes[u].step == nodes[v].step && nodes[u].track != nodes[v].track {
                    both(u, v, EdgeKind::Onset, 0);
                }
            }
        }
        for u in start..end {
            let (ti, tu) = (nodes[u].track, nodes[u].step);
            for (j, list) in by_track.iter().enumerate() {
                if j == ti {
                    continue;
                }
                if let Some(&v) = list.iter().find(|&&v| nodes[v].step > tu) {
                    both(u, v, EdgeKind::Next, nodes[v].step - tu);
                }
            }
        }
        start = end;
    }
    edges
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoteToken {
    pub pitch: u16,
    pub duration: u16,
}

impl NoteToken {
    pub const EOS: NoteToken = NoteToken { pitch: PITCH_EOS, duration: DUR_EOS };
    pub const PAD: NoteToken = NoteToken { pitch: PITCH_PAD, duration: DUR_PAD };

    /// Token for a real note; `duration` is in timesteps (1..=96).
    pub fn note(pitch: usize, duration: usize) -> Self {
        debug_assert!(pitch < N_PITCHES && (1..=MAX_DURATION).contains(&duration));
        NoteToken { pitch: pitch as u16, duration: (duration - 1) as u16 }
    }

    pub fn is_note(&self) -> bool {
        (self.pitch as usize) < N_PITCHES && (self.duration as usize) < MAX_DURATION
    }
}

/// Exactly `sigma` slots: notes by ascending pitch, then EOS, then PAD.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChordContent(pub Vec<NoteToken>);

impl ChordContent {
    /// `notes` are `(pitch, duration)` pairs; at most `sigma - 1` of them.
    fn from_notes(mut notes: Vec<(usize, usize)>, sigma: usize) -> Self {
        notes.sort_unstable();
        let mut slots: Vec<NoteToken> = notes.into_iter().map(|(p, d)| NoteToken::note(p, d)).collect();
        slots.push(NoteToken::EOS);
        slots.resize(sigma, NoteToken::PAD);
        ChordContent(slots)
    }

    pub fn notes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0
            .iter()
            .take_while(|t| t.pitch != PITCH_EOS)
            .filter(|t| t.is_note())
            .map(|t| (t.pitch as usize, t.duration as usize + 1))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChordGraph {
    pub sigma: usize,
    pub topology: Topology,
    pub content: Vec<ChordContent>,
}

/// How to treat a cell holding more than `sigma - 1` notes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Overflow {
    Reject,
    KeepHighest,
}

pub fn build_graph(roll: &Pianoroll, sigma: usize) -> Result<ChordGraph, GraphError> {
    build_graph_with(roll, sigma, Overflow::Reject)
}

/// Same as [`build_graph`] but drops the lowest pitches of overfull chords.
pub fn build_graph_truncating(roll: &Pianoroll, sigma: usize) -> ChordGraph {
    build_graph_with(roll, sigma, Overflow::KeepHighest).expect("truncation cannot overflow")
}

pub fn build_graph_with(roll: &Pianoroll, sigma: usize, overflow: Overflow) -> Result<ChordGraph, GraphError> {
    if sigma < 2 {
        return Err(GraphError::BadSigma(sigma));
    }
    let mut nodes: Vec<NodeKey> = Vec::new();
    let mut content = Vec::new();
    // onsets are sorted by (bar, track, step, pitch), so each cell is a run
    let onsets = roll.onsets();
    let mut k = 0;
    while k < onsets.len() {
        let first = onsets[k];
        let run = onsets[k..]
            .iter()
            .take_while(|o| (o.bar, o.track, o.step) == (first.bar, first.track, first.step))
            .count();
        let mut notes: Vec<(usize, usize)> = onsets[k..k + run].iter().map(|o| (o.pitch, o.duration)).collect();
        if notes.len() > sigma - 1 {
            match overflow {
                Overflow::Reject => {
                    return Err(GraphError::ChordOverflow {
                        bar: first.bar,
                        track: first.track,
                        step: first.step,
                        notes: notes.len(),
                        max: sigma - 1,
                    })
                }
                Overflow::KeepHighest => notes.drain(..notes.len() - (sigma - 1)).for_each(drop),
            }
        }
        nodes.push(NodeKey { bar: first.bar, track: first.track, step: first.step });
        content.push(ChordContent::from_notes(notes, sigma));
        k += run;
    }
    Ok(ChordGraph { sigma, topology: Topology::from_nodes(roll.n_bars(), nodes), content })
}

impl ChordGraph {
    pub fn n_bars(&self) -> usize {
        self.topology.n_bars
    }

    pub fn nodes(&self) -> &[NodeKey] {
        &self.topology.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.topology.edges
    }

    pub fn structure(&self) -> StructureTensor {
        let mut s = StructureTensor::zeros(self.n_bars());
        for k in self.nodes() {
            s.set(k.bar, k.track, k.step, true);
        }
        s
    }

    /// One-hot content tensor of shape `(|V|, sigma, 230)`, row-major.
    pub fn content_tensor<T: Scalar>(&self) -> Vec<T> {
        let mut x = vec![T::zero(); self.content.len() * self.sigma * NOTE_WIDTH];
        for (v, chord) in self.content.iter().enumerate() {
            for (s, tok) in chord.0.iter().enumerate() {
                let base = (v * self.sigma + s) * NOTE_WIDTH;
                x[base + tok.pitch as usize] = T::one();
                x[base + PITCH_VOCAB + tok.duration as usize] = T::one();
            }
        }
        x
    }

    pub fn to_pianoroll(&self) -> Pianoroll {
        let onsets = self.nodes().iter().zip(&self.content).flat_map(|(k, chord)| {
            chord.notes().map(move |(pitch, duration)| Onset::new(k.bar, k.track, k.step, pitch, duration))
        });
        Pianoroll::new(self.n_bars(), onsets.collect()).expect("graph content is in range")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&GraphJson::from(self)).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let wire: GraphJson = serde_json::from_str(text).map_err(|e| GraphError::Malformed(e.to_string()))?;
        ChordGraph::try_from(wire)
    }

    /// Appends the compact little-endian record (without length prefix).
    pub fn write_binary(&self, out: &mut Vec<u8>) {
        let mut put = |x: usize| out.extend((x as u32).to_le_bytes());
        put(self.n_bars());
        put(self.sigma);
        put(self.nodes().len());
        for (k, chord) in self.nodes().iter().zip(&self.content) {
            put(k.bar);
            put(k.track);
            put(k.step);
            for tok in &chord.0 {
                put(tok.pitch as usize);
                put(tok.duration as usize);
            }
        }
        put(self.edges().len());
        for e in self.edges() {
            put(e.src);
            put(e.dst);
            put(e.kind.index());
            put(e.delta);
        }
    }

    pub fn read_binary(bytes: &[u8]) -> Result<Self, GraphError> {
        let mut words = bytes.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize);
        if !bytes.len().is_multiple_of(4) {
            return Err(GraphError::Malformed("record length not a multiple of 4".into()));
        }
        let mut next = || words.next().ok_or_else(|| GraphError::Malformed("record truncated".into()));
        let n_bars = next()?;
        let sigma = next()?;
        let n_nodes = next()?;
        let mut nodes = Vec::with_capacity(n_nodes.min(1 << 16));
        for _ in 0..n_nodes {
            let key = NodeKey { bar: next()?, track: next()?, step: next()? };
            let mut slots = Vec::with_capacity(sigma.min(1 << 10));
            for _ in 0..sigma {
                slots.push([next()?, next()?]);
            }
            nodes.push(NodeJson { n: key.bar, i: key.track, t: key.step, notes: slots });
        }
        let n_edges = next()?;
        let mut edges = Vec::with_capacity(n_edges.min(1 << 16));
        for _ in 0..n_edges {
            let (u, v, kind, delta) = (next()?, next()?, next()?, next()?);
            let kind = EdgeKind::from_index(kind).ok_or_else(|| GraphError::Malformed(format!("edge type {kind}")))?;
            edges.push((u, v, kind.name(), delta));
        }
        ChordGraph::try_from(GraphJson { n_bars, sigma, nodes, edges })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeJson {
    pub n: usize,
    pub i: usize,
    pub t: usize,
    pub notes: Vec<[usize; 2]>,
}

/// `{n_bars, sigma, nodes: [{n, i, t, notes: [[pitch, dur], ...]}], edges: [[u, v, type, delta]]}`
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphJson {
    pub n_bars: usize,
    pub sigma: usize,
    pub nodes: Vec<NodeJson>,
    pub edges: Vec<(usize, usize, String, usize)>,
}

impl From<&ChordGraph> for GraphJson {
    fn from(g: &ChordGraph) -> Self {
        GraphJson {
            n_bars: g.n_bars(),
            sigma: g.sigma,
            nodes: g
                .nodes()
                .iter()
                .zip(&g.content)
                .map(|(k, c)| NodeJson {
                    n: k.bar,
                    i: k.track,
                    t: k.step,
                    notes: c.0.iter().map(|t| [t.pitch as usize, t.duration as usize]).collect(),
                })
                .collect(),
            edges: g.edges().iter().map(|e| (e.src, e.dst, e.kind.name(), e.delta)).collect(),
        }
    }
}

impl TryFrom<GraphJson> for ChordGraph {
    type Error = GraphError;

    /// Edges are recomputed from the node set and must match the stored ones.
    fn try_from(wire: GraphJson) -> Result<Self, GraphError> {
        let bad = |m: String| GraphError::Malformed(m);
        if wire.sigma < 2 {
            return Err(GraphError::BadSigma(wire.sigma));
        }
        let mut nodes = Vec::with_capacity(wire.nodes.len());
        let mut content = Vec::with_capacity(wire.nodes.len());
        for node in &wire.nodes {
            if node.n >= wire.n_bars || node.i >= N_TRACKS || node.t >= STEPS_PER_BAR {
                return Err(bad(format!("node ({}, {}, {}) out of range", node.n, node.i, node.t)));
            }
            if node.notes.len() != wire.sigma {
                return Err(bad(format!("node has {} slots, expected {}", node.notes.len(), wire.sigma)));
            }
            let mut slots = Vec::with_capacity(wire.sigma);
            for &[p, d] in &node.notes {
                if p >= PITCH_VOCAB || d >= DUR_VOCAB {
                    return Err(bad(format!("token ({p}, {d}) out of vocabulary")));
                }
                slots.push(NoteToken { pitch: p as u16, duration: d as u16 });
            }
            nodes.push(NodeKey { bar: node.n, track: node.i, step: node.t });
            content.push(ChordContent(slots));
        }
        if nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("nodes not strictly sorted by (bar, track, step)".into()));
        }
        let topology = Topology::from_nodes(wire.n_bars, nodes);
        let stored: Result<Vec<Edge>, GraphError> = wire
            .edges
            .iter()
            .map(|(u, v, kind, delta)| {
                let kind = EdgeKind::parse(kind).ok_or_else(|| bad(format!("edge type {kind:?}")))?;
                Ok(Edge { src: *u, dst: *v, kind, delta: *delta })
            })
            .collect();
        if stored? != topology.edges {
            return Err(bad("edges inconsistent with node set".into()));
        }
        Ok(ChordGraph { sigma: wire.sigma, topology, content })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pianoroll::{BASS, DRUMS};
    use std::collections::HashSet;

    fn roll(onsets: &[(usize, usize, usize, usize, usize)]) -> Pianoroll {
        let n_bars = onsets.iter().map(|o| o.0 + 1).max().unwrap_or(1);
        Pianoroll::new(n_bars, onsets.iter().map(|&(b, i, t, p, d)| Onset::new(b, i, t, p, d)).collect()).unwrap()
    }

    fn undirected(g: &ChordGraph) -> HashSet<(usize, usize, EdgeKind, usize)> {
        g.edges().iter().map(|e| (e.src.min(e.dst), e.src.max(e.dst), e.kind, e.delta)).collect()
    }

    #[test]
    fn structure_ignores_sustain() {
        let s = structure_of(&roll(&[(0, DRUMS, 5, 36, 2)]));
        assert!(s.get(0, DRUMS, 5));
        assert!(!s.get(0, DRUMS, 6));
        assert_eq!(s.count(), 1);
        assert_eq!(structure_of(&Pianoroll::empty(2)).count(), 0);
    }

    #[test]
    fn single_track_two_activations() {
        let g = build_graph(&roll(&[(0, BASS, 0, 40, 1), (0, BASS, 4, 40, 1)]), 4).unwrap();
        let e = undirected(&g);
        assert_eq!(e, HashSet::from([(0, 1, EdgeKind::Track(BASS), 4)]));
        assert_eq!(g.edges().len(), 2);
    }

    #[test]
    fn simultaneous_drums_and_bass() {
        let g = build_graph(&roll(&[(0, DRUMS, 0, 36, 1), (0, BASS, 0, 40, 1)]), 4).unwrap();
        assert_eq!(undirected(&g), HashSet::from([(0, 1, EdgeKind::Onset, 0)]));
    }

    #[test]
    fn three_node_example() {
        // drums at 0 and 4, bass at 2; node order (0,drums,0), (0,drums,4), (0,bass,2)
        let r = roll(&[(0, DRUMS, 0, 36, 1), (0, BASS, 2, 40, 1), (0, DRUMS, 4, 36, 1)]);
        let g = build_graph(&r, 4).unwrap();
        let d0 = 0;
        let d4 = 1;
        let b2 = 2;
        assert_eq!(g.nodes()[b2], NodeKey { bar: 0, track: BASS, step: 2 });
        let directed: HashSet<_> = g.edges().iter().map(|e| (e.src, e.dst, e.kind, e.delta)).collect();
        let expected = HashSet::from([
            (d0, d4, EdgeKind::Track(DRUMS), 4),
            (d4, d0, EdgeKind::Track(DRUMS), 4),
            (d0, b2, EdgeKind::Next, 2),
            (b2, d0, EdgeKind::Next, 2),
            (b2, d4, EdgeKind::Next, 2),
            (d4, b2, EdgeKind::Next, 2),
        ]);
        assert_eq!(directed, expected);
        assert_eq!(g.edges().len(), 6);
        assert_eq!(g.to_pianoroll(), r);
    }

    #[test]
    fn edges_stay_inside_bars() {
        let g = build_graph(&roll(&[(0, DRUMS, 31, 36, 1), (1, DRUMS, 0, 36, 1), (1, BASS, 3, 40, 1)]), 4).unwrap();
        for e in g.edges() {
            assert_eq!(g.nodes()[e.src].bar, g.nodes()[e.dst].bar);
        }
        assert_eq!(undirected(&g).len(), 1);
    }

    #[test]
    fn content_slots_and_one_hot() {
        let g = build_graph(&roll(&[(0, 2, 0, 67, 8), (0, 2, 0, 60, 8), (0, 2, 0, 64, 4)]), 5).unwrap();
        let c = &g.content[0].0;
        assert_eq!(c[0], NoteToken { pitch: 60, duration: 7 });
        assert_eq!(c[1], NoteToken { pitch: 64, duration: 3 });
        assert_eq!(c[2], NoteToken { pitch: 67, duration: 7 });
        assert_eq!(c[3], NoteToken::EOS);
        assert_eq!(c[4], NoteToken::PAD);

        let x: Vec<f64> = g.content_tensor();
        assert_eq!(x.len(), 5 * NOTE_WIDTH);
        assert_eq!(x[60], 1.0);
        assert_eq!(x[PITCH_VOCAB + 7], 1.0);
        let pad = 4 * NOTE_WIDTH;
        assert_eq!(x[pad + 130], 1.0);
        assert_eq!(x[pad + PITCH_VOCAB + 98], 1.0);
        assert_eq!(x.iter().filter(|&&v| v != 0.0).count(), 2 * 5);
    }

    #[test]
    fn overflow_rejected_or_truncated() {
        let r = roll(&[(0, 2, 0, 60, 1), (0, 2, 0, 64, 1), (0, 2, 0, 67, 1), (0, 2, 0, 72, 1)]);
        assert!(matches!(build_graph(&r, 4), Err(GraphError::ChordOverflow { notes: 4, max: 3, .. })));
        let g = build_graph_truncating(&r, 4);
        let kept: Vec<_> = g.content[0].notes().map(|(p, _)| p).collect();
        assert_eq!(kept, vec![64, 67, 72]);
        assert!(build_graph(&r, 5).is_ok());
        assert_eq!(build_graph(&r, 1), Err(GraphError::BadSigma(1)));
    }

    #[test]
    fn empty_graph_round_trip() {
        let g = build_graph(&Pianoroll::empty(2), 4).unwrap();
        assert!(g.nodes().is_empty());
        assert_eq!(g.to_pianoroll(), Pianoroll::empty(2));
    }

    #[test]
    fn serializations_round_trip_and_validate() {
        let r = roll(&[(0, DRUMS, 0, 36, 1), (0, BASS, 2, 40, 3), (1, 3, 4, 72, 96)]);
        let g = build_graph(&r, 4).unwrap();
        assert_eq!(ChordGraph::from_json(&g.to_json()).unwrap(), g);
        let mut bytes = Vec::new();
        g.write_binary(&mut bytes);
        assert_eq!(ChordGraph::read_binary(&bytes).unwrap(), g);
        assert!(ChordGraph::read_binary(&bytes[..bytes.len() - 4]).is_err());

        let mut wire = GraphJson::from(&g);
        wire.edges.pop();
        assert!(ChordGraph::try_from(wire).is_err());
    }

    #[test]
    fn structure_json_shape_is_validated() {
        let mut s = StructureTensor::zeros(1);
        s.set(0, 3, 31, true);
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<StructureTensor>(&text).unwrap(), s);
        assert!(serde_json::from_str::<StructureTensor>("[[[0,1]]]").is_err());
        let bad = text.replacen('1', "2", 1);
        assert!(serde_json::from_str::<StructureTensor>(&bad).is_err());
    }

    #[test]
    fn edge_kind_names() {
        for k in 0..N_EDGE_TYPES {
            let kind = EdgeKind::from_index(k).unwrap();
            assert_eq!(EdgeKind::parse(&kind.name()), Some(kind));
        }
        assert_eq!(EdgeKind::parse("track_4"), None);
    }
}
