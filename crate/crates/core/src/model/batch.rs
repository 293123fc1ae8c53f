use crate::graph::{ChordGraph, NodeKey, StructureTensor, Topology, DUR_PAD, N_EDGE_TYPES, PITCH_PAD};
use crate::pianoroll::{DRUMS, STEPS_PER_BAR};

use super::layers::EdgeIndex;
use super::{ModelConfig, ModelError};

/// Number of distance embeddings: distances are clipped to one bar.
pub const DIST_BINS: usize = STEPS_PER_BAR + 1;

/// Several graphs merged into one disjoint union, with the index arrays the
/// model needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub(crate) n_items: usize,
    pub(crate) n_bars: usize,
    pub(crate) sigma: usize,
    pub(crate) keys: Vec<(usize, NodeKey)>,
    /// `item * n_bars + bar` for every node.
    pub(crate) bar_slot: Vec<usize>,
    pub(crate) drum: Vec<bool>,
    pub(crate) edges: EdgeIndex,
    /// `|V| * sigma` token ids, slot-major within each node.
    pub(crate) pitch: Vec<usize>,
    pub(crate) duration: Vec<usize>,
    pub(crate) has_content: bool,
    /// 0/1 cells laid out `[item][bar][track][step]`.
    pub(crate) structure: Vec<f64>,
}

impl Batch {
    fn check(config: &ModelConfig, n_bars: usize, sigma: Option<usize>) -> Result<(), ModelError> {
        if n_bars != config.n_bars {
            return Err(ModelError::ConfigMismatch(format!("graph has {n_bars} bars, model expects {}", config.n_bars)));
        }
        if let Some(s) = sigma.filter(|&s| s != config.sigma) {
            return Err(ModelError::ConfigMismatch(format!("graph built with sigma {s}, model expects {}", config.sigma)));
        }
        Ok(())
    }

    pub fn from_graphs(graphs: &[&ChordGraph], config: &ModelConfig) -> Result<Self, ModelError> {
        let mut b = Batch::empty(config);
        for g in graphs {
            Batch::check(config, g.n_bars(), Some(g.sigma))?;
            let base = b.keys.len();
            b.push_topology(&g.topology, base);
            for chord in &g.content {
                for tok in &chord.0 {
                    b.pitch.push(tok.pitch as usize);
                    b.duration.push(tok.duration as usize);
                }
            }
            b.push_structure(&g.structure());
        }
        b.has_content = true;
        Ok(b)
    }

    /// Topology only; content slots are filled with PAD.
    pub fn from_structures(structures: &[&StructureTensor], config: &ModelConfig) -> Result<Self, ModelError> {
        let mut b = Batch::empty(config);
        for s in structures {
            Batch::check(config, s.n_bars(), None)?;
            let topo = Topology::from_structure(s);
            let base = b.keys.len();
            b.push_topology(&topo, base);
            let slots = topo.nodes.len() * config.sigma;
            b.pitch.extend(std::iter::repeat_n(PITCH_PAD as usize, slots));
            b.duration.extend(std::iter::repeat_n(DUR_PAD as usize, slots));
            b.push_structure(s);
        }
        Ok(b)
    }

    fn empty(config: &ModelConfig) -> Self {
        Batch {
            n_items: 0,
            n_bars: config.n_bars,
            sigma: config.sigma,
            keys: Vec::new(),
            bar_slot: Vec::new(),
            drum: Vec::new(),
            edges: EdgeIndex::default(),
            pitch: Vec::new(),
            duration: Vec::new(),
            has_content: false,
            structure: Vec::new(),
        }
    }

    fn push_topology(&mut self, topo: &Topology, base: usize) {
        let item = self.n_items;
        for k in &topo.nodes {
            self.keys.push((item, *k));
            self.bar_slot.push(item * self.n_bars + k.bar);
            self.drum.push(k.track == DRUMS);
        }
        let deg = topo.in_degrees();
        for e in &topo.edges {
            self.edges.src.push(base + e.src);
            self.edges.bucket.push((base + e.dst) * N_EDGE_TYPES + e.kind.index());
            self.edges.dist_bin.push(e.delta.min(STEPS_PER_BAR));
            self.edges.weight.push(1.0 / deg[e.dst] as f64);
        }
    }

    fn push_structure(&mut self, s: &StructureTensor) {
        self.structure.extend(s.cells().iter().map(|&c| if c { 1.0 } else { 0.0 }));
        self.n_items += 1;
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_nodes(&self) -> usize {
        self.keys.len()
    }

    pub fn sigma(&self) -> usize {
        self.sigma
    }

    /// `(item, node)` for every node of the union, in batch order.
    pub fn keys(&self) -> &[(usize, NodeKey)] {
        &self.keys
    }

    pub fn pitch_tokens(&self) -> &[usize] {
        &self.pitch
    }

    pub fn duration_tokens(&self) -> &[usize] {
        &self.duration
    }

    pub fn structure_cells(&self) -> &[f64] {
        &self.structure
    }

    pub fn has_content(&self) -> bool {
        self.has_content
    }

    /// The same batch with node `perm[i]` moved to position `i`.
    pub fn permute_nodes(&self, perm: &[usize]) -> Batch {
        let n = self.n_nodes();
        assert_eq!(perm.len(), n, "permutation length");
        let mut inverse = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let slots = |v: &[usize]| perm.iter().flat_map(|&old| v[old * self.sigma..(old + 1) * self.sigma].iter().copied()).collect();
        let edges = EdgeIndex {
            src: self.edges.src.iter().map(|&s| inverse[s]).collect(),
            bucket: self
                .edges
                .bucket
                .iter()
                .map(|&b| inverse[b / N_EDGE_TYPES] * N_EDGE_TYPES + b % N_EDGE_TYPES)
                .collect(),
            dist_bin: self.edges.dist_bin.clone(),
            weight: self.edges.weight.clone(),
        };
        Batch {
            keys: perm.iter().map(|&o| self.keys[o]).collect(),
            bar_slot: perm.iter().map(|&o| self.bar_slot[o]).collect(),
            drum: perm.iter().map(|&o| self.drum[o]).collect(),
            edges,
            pitch: slots(&self.pitch),
            duration: slots(&self.duration),
            ..self.clone()
        }
    }
}
