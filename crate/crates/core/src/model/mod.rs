//! Hierarchical structure/content variational autoencoder over chord-level
//! graphs.
//!
//! The encoder embeds every note, folds each node's note slots into a chord
//! vector, refines the chord vectors with residual graph convolutions and
//! reads out one vector per bar. A small CNN encodes the binary structure
//! bar by bar. Both summaries are merged into a single Gaussian latent; the
//! decoder splits a code back into a structure part, decoded by an
//! upsampling CNN, and a content part that seeds a second stack of graph
//! convolutions over the (real or generated) structure.

mod batch;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use batch::{Batch, DIST_BINS};
pub use layers::{Ctx, EdgeIndex};

use crate::graph::{NodeKey, StructureTensor, DUR_VOCAB, PITCH_VOCAB};
use crate::graph::{ChordGraph, Topology};
use crate::pianoroll::{Onset, Pianoroll, N_TRACKS, STEPS_PER_BAR};
use crate::tensor::{BatchStats, Checkpoint, CheckpointError, ParamStore, Tape, TensorError, Var};
use crate::Scalar;
use layers::{BatchNorm, Conv, Gcn, Linear};

/// Channels of the two structure-CNN stages.
const CNN_CHANNELS: [usize; 2] = [16, 32];
/// Flattened CNN output per bar: 32 channels on a 1x8 map.
const CNN_FLAT: usize = 32 * (N_TRACKS / 4) * (STEPS_PER_BAR / 4);
const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("latent vector has {found} entries, expected {expected}")]
    LatentSize { expected: usize, found: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint fingerprint {found} does not match its configuration ({expected})")]
    Fingerprint { expected: String, found: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_bars: usize,
    pub sigma: usize,
    /// Latent and hidden width; must be even.
    pub d: usize,
    /// Graph-convolution layers in each of the encoder and decoder.
    pub layers: usize,
    /// Batch norm after every graph convolution. Disabling it is only
    /// meant for tests of the residual path.
    #[serde(default = "default_true")]
    pub batch_norm: bool,
}

impl ModelConfig {
    pub fn new(n_bars: usize, sigma: usize, d: usize, layers: usize) -> Self {
        ModelConfig { n_bars, sigma, d, layers, batch_norm: true }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.d < 2 || !self.d.is_multiple_of(2) {
            return bad("d must be even and at least 2");
        }
        if self.layers == 0 {
            return bad("at least one graph-convolution layer is required");
        }
        if self.sigma < 2 {
            return bad("sigma must leave room for one note and EOS");
        }
        if self.n_bars == 0 {
            return bad("sequences need at least one bar");
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(2, crate::graph::DEFAULT_SIGMA, 512, 8)
    }
}

#[derive(Debug, Clone)]
struct Weights {
    pitch_drum: crate::tensor::ParamId,
    pitch: crate::tensor::ParamId,
    duration: crate::tensor::ParamId,
    chord_enc: Linear,
    enc_gcn: Vec<Gcn>,
    gate: Linear,
    value: Linear,
    compress_c: Linear,
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    dense1: Linear,
    dense2: Linear,
    compress_s: Linear,
    combine: Linear,
    mu: Linear,
    logvar: Linear,
    split: Linear,
    decompress_s: Linear,
    sdense1: Linear,
    sdense2: Linear,
    dconv1: Conv,
    dbn1: BatchNorm,
    dconv2: Conv,
    decompress_c: Linear,
    dec_gcn: Vec<Gcn>,
    chord_dec: Linear,
    pitch_drum_out: Linear,
    pitch_out: Linear,
    duration_out: Linear,
}

impl Weights {
    fn build<T: Scalar>(c: &ModelConfig, s: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let (d, h, n) = (c.d, c.d / 2, c.n_bars);
        let gcn_stack = |s: &mut ParamStore<T>, rng: &mut ChaCha8Rng, prefix: &str| {
            (0..c.layers)
                .map(|l| Gcn::new(s, &format!("{prefix}.gcn{l}"), d, DIST_BINS, c.batch_norm, rng))
                .collect()
        };
        Weights {
            pitch_drum: s.normal("enc.pitch_drum", &[PITCH_VOCAB, h], 1.0, rng),
            pitch: s.normal("enc.pitch", &[PITCH_VOCAB, h], 1.0, rng),
            duration: s.normal("enc.duration", &[DUR_VOCAB, h], 1.0, rng),
            chord_enc: Linear::new(s, "enc.chord", c.sigma * d, d, true, rng),
            enc_gcn: gcn_stack(s, rng, "enc"),
            gate: Linear::new(s, "enc.readout.gate", d, d, true, rng),
            value: Linear::new(s, "enc.readout.value", d, d, true, rng),
            compress_c: Linear::new(s, "enc.compress", n * d, d, true, rng),
            conv1: Conv::new(s, "senc.conv1", 1, CNN_CHANNELS[0], rng),
            bn1: BatchNorm::new(s, "senc.bn1", CNN_CHANNELS[0]),
            conv2: Conv::new(s, "senc.conv2", CNN_CHANNELS[0], CNN_CHANNELS[1], rng),
            bn2: BatchNorm::new(s, "senc.bn2", CNN_CHANNELS[1]),
            dense1: Linear::new(s, "senc.dense1", CNN_FLAT, d, true, rng),
            dense2: Linear::new(s, "senc.dense2", d, d, true, rng),
            compress_s: Linear::new(s, "senc.compress", n * d, d, true, rng),
            combine: Linear::new(s, "latent.combine", 2 * d, d, true, rng),
            mu: Linear::new(s, "latent.mu", d, d, true, rng),
            logvar: Linear::new(s, "latent.logvar", d, d, true, rng),
            split: Linear::new(s, "latent.split", d, 2 * d, true, rng),
            decompress_s: Linear::new(s, "sdec.decompress", d, n * d, true, rng),
            sdense1: Linear::new(s, "sdec.dense1", d, d, true, rng),
            sdense2: Linear::new(s, "sdec.dense2", d, CNN_FLAT, true, rng),
            dconv1: Conv::new(s, "sdec.conv1", CNN_CHANNELS[1], CNN_CHANNELS[0], rng),
            dbn1: BatchNorm::new(s, "sdec.bn1", CNN_CHANNELS[0]),
            dconv2: Conv::new(s, "sdec.conv2", CNN_CHANNELS[0], 1, rng),
            decompress_c: Linear::new(s, "cdec.decompress", d, n * d, true, rng),
            dec_gcn: gcn_stack(s, rng, "cdec"),
            chord_dec: Linear::new(s, "cdec.chord", d, c.sigma * d, true, rng),
            pitch_drum_out: Linear::new(s, "cdec.pitch_drum", h, PITCH_VOCAB, true, rng),
            pitch_out: Linear::new(s, "cdec.pitch", h, PITCH_VOCAB, true, rng),
            duration_out: Linear::new(s, "cdec.duration", h, DUR_VOCAB, true, rng),
        }
    }
}

/// Everything a training step needs from one forward pass.
pub struct Forward<'t, T> {
    /// `[B * N, 1, 4, 32]`.
    pub structure_logits: Var<'t, T>,
    /// `[|V| * sigma, 131]`.
    pub pitch_logits: Var<'t, T>,
    /// `[|V| * sigma, 99]`.
    pub duration_logits: Var<'t, T>,
    pub mu: Var<'t, T>,
    pub logvar: Var<'t, T>,
    pub z: Var<'t, T>,
}

/// Gaussian posterior parameters and the code drawn from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode<T> {
    pub mu: Vec<T>,
    pub logvar: Vec<T>,
    pub z: Vec<T>,
    pub z_s: Vec<T>,
    pub z_c: Vec<T>,
}

/// Per-slot pitch and duration distributions for the nodes of a structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentProbs<T> {
    pub nodes: Vec<NodeKey>,
    pub sigma: usize,
    /// `|V| * sigma * 131`, row-major.
    pub pitch: Vec<T>,
    /// `|V| * sigma * 99`, row-major.
    pub duration: Vec<T>,
}

impl<T: Scalar> ContentProbs<T> {
    pub fn pitch_row(&self, node: usize, slot: usize) -> &[T] {
        let r = node * self.sigma + slot;
        &self.pitch[r * PITCH_VOCAB..(r + 1) * PITCH_VOCAB]
    }

    pub fn duration_row(&self, node: usize, slot: usize) -> &[T] {
        let r = node * self.sigma + slot;
        &self.duration[r * DUR_VOCAB..(r + 1) * DUR_VOCAB]
    }
}

/// Output of a full decode from a latent code.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded<T> {
    /// `N * 4 * 32` activation probabilities.
    pub structure_probs: Vec<T>,
    pub structure: StructureTensor,
    pub content: ContentProbs<T>,
}

/// `S = [p >= threshold]` cell by cell.
pub fn binarize<T: Scalar>(probs: &[T], n_bars: usize, threshold: T) -> StructureTensor {
    let cells = probs.iter().map(|&p| p >= threshold).collect();
    StructureTensor::from_cells(n_bars, cells).expect("probability grid has N x 4 x 32 cells")
}

#[derive(Debug, Clone)]
pub struct ChordVae<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    w: Weights,
}

impl<T: Scalar> ChordVae<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Weights::build(&config, &mut params, &mut rng);
        Ok(ChordVae { config, params, w })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    /// Folds the batch statistics of a training pass into the running
    /// averages used in eval mode.
    pub fn update_running_stats(&mut self, ctx_stats: Vec<(BatchNormStats, BatchStats<T>)>) {
        for (bn, stats) in ctx_stats {
            bn.0.update(&mut self.params, &stats);
        }
    }

    // ----- differentiable pieces -----

    /// Chord vectors `h^0`, shape `[|V|, d]`.
    pub fn chord_states<'t>(&self, ctx: &Ctx<'t, T>, batch: &Batch) -> Result<Var<'t, T>> {
        let (d, h) = (self.config.d, self.config.d / 2);
        let v = batch.n_nodes();
        let table = ctx.tape.concat(&[ctx.p(self.w.pitch_drum), ctx.p(self.w.pitch)], 0)?;
        let pitch_idx: Vec<usize> = batch
            .pitch
            .iter()
            .enumerate()
            .map(|(r, &p)| if batch.drum[r / batch.sigma] { p } else { p + PITCH_VOCAB })
            .collect();
        let pe = table.gather_rows(&pitch_idx)?;
        let de = ctx.p(self.w.duration).gather_rows(&batch.duration)?;
        let notes = ctx.tape.concat(&[pe, de], 1)?;
        debug_assert_eq!(notes.shape(), vec![v * batch.sigma, 2 * h]);
        let flat = notes.reshape(&[v, batch.sigma * d])?;
        Ok(self.w.chord_enc.forward(ctx, flat)?)
    }

    /// Runs the encoder (`decoder = false`) or decoder graph convolutions.
    pub fn gcn_stack<'t>(&self, ctx: &Ctx<'t, T>, h0: Var<'t, T>, batch: &Batch, decoder: bool) -> Result<Var<'t, T>> {
        let stack = if decoder { &self.w.dec_gcn } else { &self.w.enc_gcn };
        stack.iter().try_fold(h0, |h, layer| layer.forward(ctx, h, &batch.edges).map_err(ModelError::from))
    }

    /// Per-bar readout before compression, `[B * N, d]`; empty bars are zero.
    pub fn bar_embeddings<'t>(&self, ctx: &Ctx<'t, T>, batch: &Batch) -> Result<Var<'t, T>> {
        let h = self.gcn_stack(ctx, self.chord_states(ctx, batch)?, batch, false)?;
        self.readout(ctx, h, batch)
    }

    pub fn readout<'t>(&self, ctx: &Ctx<'t, T>, h: Var<'t, T>, batch: &Batch) -> Result<Var<'t, T>> {
        let gate = self.w.gate.forward(ctx, h)?.sigmoid();
        let value = self.w.value.forward(ctx, h)?;
        Ok(gate.mul(value)?.scatter_rows(&batch.bar_slot, None, batch.n_items * batch.n_bars)?)
    }

    /// `z_C` per item, `[B, d]`.
    pub fn encode_content_var<'t>(&self, ctx: &Ctx<'t, T>, batch: &Batch) -> Result<Var<'t, T>> {
        let bars = self.bar_embeddings(ctx, batch)?;
        let flat = bars.reshape(&[batch.n_items, self.config.n_bars * self.config.d])?;
        Ok(self.w.compress_c.forward(ctx, flat)?)
    }

    /// `z_S` per item, `[B, d]`.
    pub fn encode_structure_var<'t>(&self, ctx: &Ctx<'t, T>, batch: &Batch) -> Result<Var<'t, T>> {
        let (b, n, d) = (batch.n_items, self.config.n_bars, self.config.d);
        let cells: Vec<T> = batch.structure.iter().map(|&c| T::lit(c)).collect();
        let x = ctx.tape.constant(cells, &[b * n, 1, N_TRACKS, STEPS_PER_BAR])?;
        let x = self.w.bn1.forward(ctx, self.w.conv1.forward(ctx, x)?.relu())?.maxpool2d(2)?;
        let x = self.w.bn2.forward(ctx, self.w.conv2.forward(ctx, x)?.relu())?.maxpool2d(2)?;
        let x = x.reshape(&[b * n, CNN_FLAT])?;
        let x = self.w.dense2.forward(ctx, self.w.dense1.forward(ctx, x)?.relu())?;
        Ok(self.w.compress_s.forward(ctx, x.reshape(&[b, n * d])?)?)
    }

    /// `(mu, logvar, z)`; `z = mu + exp(logvar / 2) * eps`, or `mu` when
    /// `eps` is `None`.
    pub fn latent<'t>(&self, ctx: &Ctx<'t, T>, z_s: Var<'t, T>, z_c: Var<'t, T>, eps: Option<&[T]>) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
        let zg = self.w.combine.forward(ctx, ctx.tape.concat(&[z_s, z_c], 1)?)?;
        let mu = self.w.mu.forward(ctx, zg)?;
        let bound = T::lit(LOGVAR_CLAMP);
        let logvar = self.w.logvar.forward(ctx, zg)?.clamp(-bound, bound);
        let z = match eps {
            Some(e) => {
                let e = ctx.tape.constant(e.to_vec(), &mu.shape())?;
                mu.add(logvar.scale(T::lit(0.5)).exp().mul(e)?)?
            }
            None => mu,
        };
        Ok((mu, logvar, z))
    }

    /// Splits `[B, d]` codes into structure and content halves.
    pub fn split_var<'t>(&self, ctx: &Ctx<'t, T>, z: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let both = self.w.split.forward(ctx, z)?;
        let d = self.config.d;
        Ok((both.narrow(1, 0, d)?, both.narrow(1, d, d)?))
    }

    /// Structure logits `[B * N, 1, 4, 32]`.
    pub fn decode_structure_var<'t>(&self, ctx: &Ctx<'t, T>, z_s: Var<'t, T>) -> Result<Var<'t, T>> {
        let b = z_s.shape()[0];
        let (n, d) = (self.config.n_bars, self.config.d);
        let x = self.w.decompress_s.forward(ctx, z_s)?.reshape(&[b * n, d])?;
        let x = self.w.sdense2.forward(ctx, self.w.sdense1.forward(ctx, x)?.relu())?.relu();
        let x = x.reshape(&[b * n, CNN_CHANNELS[1], N_TRACKS / 4, STEPS_PER_BAR / 4])?;
        let x = self.w.dconv1.forward(ctx, x.upsample_nearest(2)?)?.relu();
        let x = self.w.dbn1.forward(ctx, x)?;
        Ok(self.w.dconv2.forward(ctx, x.upsample_nearest(2)?)?)
    }

    /// Pitch and duration logits for every slot of every node of `batch`,
    /// seeded per bar from `z_c` (`[B, d]`).
    pub fn decode_content_var<'t>(&self, ctx: &Ctx<'t, T>, z_c: Var<'t, T>, batch: &Batch) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (n, d, sigma) = (self.config.n_bars, self.config.d, self.config.sigma);
        let seeds = self.w.decompress_c.forward(ctx, z_c)?.reshape(&[batch.n_items * n, d])?;
        let h0 = seeds.gather_rows(&batch.bar_slot)?;
        let h = self.gcn_stack(ctx, h0, batch, true)?;
        let slots = self.w.chord_dec.forward(ctx, h)?.reshape(&[batch.n_nodes() * sigma, d])?;
        let pitch_half = slots.narrow(1, 0, d / 2)?;
        let dur_half = slots.narrow(1, d / 2, d / 2)?;
        let rows = batch.n_nodes() * sigma;
        let (drum_rows, other_rows): (Vec<usize>, Vec<usize>) = (0..rows).partition(|&r| batch.drum[r / sigma]);
        let drum_logits = self.w.pitch_drum_out.forward(ctx, pitch_half.gather_rows(&drum_rows)?)?;
        let other_logits = self.w.pitch_out.forward(ctx, pitch_half.gather_rows(&other_rows)?)?;
        let mut position = vec![0; rows];
        for (i, &r) in drum_rows.iter().chain(&other_rows).enumerate() {
            position[r] = i;
        }
        let pitch = ctx.tape.concat(&[drum_logits, other_logits], 0)?.gather_rows(&position)?;
        let duration = self.w.duration_out.forward(ctx, dur_half)?;
        Ok((pitch, duration))
    }

    /// Full teacher-forced pass: content is decoded against the batch's
    /// real structure, never the generated one.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, T>, batch: &Batch, eps: Option<&[T]>) -> Result<Forward<'t, T>> {
        if !batch.has_content {
            return Err(ModelError::ConfigMismatch("training batch carries no note content".into()));
        }
        let z_c_enc = self.encode_content_var(ctx, batch)?;
        let z_s_enc = self.encode_structure_var(ctx, batch)?;
        let (mu, logvar, z) = self.latent(ctx, z_s_enc, z_c_enc, eps)?;
        let (z_s, z_c) = self.split_var(ctx, z)?;
        let structure_logits = self.decode_structure_var(ctx, z_s)?;
        let (pitch_logits, duration_logits) = self.decode_content_var(ctx, z_c, batch)?;
        Ok(Forward { structure_logits, pitch_logits, duration_logits, mu, logvar, z })
    }

    // ----- eval-mode convenience wrappers -----

    fn check_latent(&self, z: &[T]) -> Result<()> {
        if z.len() != self.config.d {
            return Err(ModelError::LatentSize { expected: self.config.d, found: z.len() });
        }
        Ok(())
    }

    fn eval<R>(&self, f: impl for<'t> FnOnce(&Ctx<'t, T>) -> Result<R>) -> Result<R> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.params, false);
        f(&ctx)
    }

    /// Encodes one graph. With `eps` the code is sampled, otherwise `z = mu`.
    pub fn encode(&self, graph: &ChordGraph, eps: Option<&[T]>) -> Result<LatentCode<T>> {
        if let Some(e) = eps {
            self.check_latent(e)?;
        }
        let batch = Batch::from_graphs(&[graph], &self.config)?;
        self.eval(|ctx| {
            let zc = self.encode_content_var(ctx, &batch)?;
            let zs = self.encode_structure_var(ctx, &batch)?;
            let (mu, logvar, z) = self.latent(ctx, zs, zc, eps)?;
            let (z_s, z_c) = self.split_var(ctx, z)?;
            Ok(LatentCode { mu: mu.value(), logvar: logvar.value(), z: z.value(), z_s: z_s.value(), z_c: z_c.value() })
        })
    }

    pub fn encode_content(&self, graph: &ChordGraph) -> Result<Vec<T>> {
        let batch = Batch::from_graphs(&[graph], &self.config)?;
        self.eval(|ctx| Ok(self.encode_content_var(ctx, &batch)?.value()))
    }

    pub fn encode_structure(&self, s: &StructureTensor) -> Result<Vec<T>> {
        let batch = Batch::from_structures(&[s], &self.config)?;
        self.eval(|ctx| Ok(self.encode_structure_var(ctx, &batch)?.value()))
    }

    /// `(z_S, z_C)` from a code `z`.
    pub fn split(&self, z: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        self.check_latent(z)?;
        self.eval(|ctx| {
            let (a, b) = self.split_var(ctx, ctx.tape.constant(z.to_vec(), &[1, self.config.d])?)?;
            Ok((a.value(), b.value()))
        })
    }

    /// Activation probabilities, `N * 4 * 32`.
    pub fn decode_structure(&self, z_s: &[T]) -> Result<Vec<T>> {
        self.check_latent(z_s)?;
        self.eval(|ctx| {
            let logits = self.decode_structure_var(ctx, ctx.tape.constant(z_s.to_vec(), &[1, self.config.d])?)?;
            Ok(logits.sigmoid().value())
        })
    }

    /// Content distributions over the nodes of `s`. An all-zero structure
    /// yields empty tensors.
    pub fn decode_content(&self, z_c: &[T], s: &StructureTensor) -> Result<ContentProbs<T>> {
        self.check_latent(z_c)?;
        let batch = Batch::from_structures(&[s], &self.config)?;
        let nodes: Vec<NodeKey> = batch.keys.iter().map(|&(_, k)| k).collect();
        if nodes.is_empty() {
            return Ok(ContentProbs { nodes, sigma: self.config.sigma, pitch: Vec::new(), duration: Vec::new() });
        }
        self.eval(|ctx| {
            let zc = ctx.tape.constant(z_c.to_vec(), &[1, self.config.d])?;
            let (p, d) = self.decode_content_var(ctx, zc, &batch)?;
            Ok(ContentProbs { nodes, sigma: self.config.sigma, pitch: p.softmax()?.value(), duration: d.softmax()?.value() })
        })
    }

    pub fn decode(&self, z: &[T], threshold: T) -> Result<Decoded<T>> {
        let (z_s, z_c) = self.split(z)?;
        let structure_probs = self.decode_structure(&z_s)?;
        let structure = binarize(&structure_probs, self.config.n_bars, threshold);
        let content = self.decode_content(&z_c, &structure)?;
        Ok(Decoded { structure_probs, structure, content })
    }

    /// Chord-encoder output for a single node holding `notes`
    /// (`(pitch, duration)` pairs) on `track`.
    pub fn chord_embedding(&self, notes: &[(usize, usize)], track: usize) -> Result<Vec<T>> {
        let key = NodeKey { bar: 0, track, step: 0 };
        let mut roll_notes: Vec<_> = notes.iter().map(|&(p, d)| Onset::new(0, track, 0, p, d)).collect();
        roll_notes.sort();
        let roll = Pianoroll::new(self.config.n_bars, roll_notes)
            .map_err(|e| ModelError::ConfigMismatch(e.to_string()))?;
        let graph = crate::graph::build_graph(&roll, self.config.sigma).map_err(|e| ModelError::ConfigMismatch(e.to_string()))?;
        debug_assert_eq!(graph.nodes(), &[key]);
        let batch = Batch::from_graphs(&[&graph], &self.config)?;
        self.eval(|ctx| Ok(self.chord_states(ctx, &batch)?.value()))
    }

    /// Rows of an embedding table: `"pitch_drum"`, `"pitch"` or `"duration"`.
    pub fn embedding_table(&self, which: &str) -> Option<Vec<Vec<T>>> {
        let id = match which {
            "pitch_drum" => self.w.pitch_drum,
            "pitch" => self.w.pitch,
            "duration" => self.w.duration,
            _ => return None,
        };
        let p = self.params.get(id);
        Some(p.value.chunks(p.shape[1]).map(<[T]>::to_vec).collect())
    }

    /// The topology a structure decodes into.
    pub fn topology_of(&self, s: &StructureTensor) -> Topology {
        Topology::from_structure(s)
    }

    // ----- persistence -----

    /// Parameters and buffers under `param/`, plus the configuration and its
    /// fingerprint in the manifest.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "fingerprint": self.config.fingerprint(),
            "model": self.config,
        });
        let mut c = Checkpoint::new(meta);
        c.push_store("param/", &self.params);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(c.meta["model"].clone())
            .map_err(|e| CheckpointError::Incompatible(format!("model configuration: {e}")))?;
        let found = c.meta["fingerprint"].as_str().unwrap_or_default().to_string();
        let expected = config.fingerprint();
        if found != expected {
            return Err(ModelError::Fingerprint { expected, found });
        }
        let mut model = ChordVae::new(config, 0)?;
        c.load_store("param/", &mut model.params)?;
        Ok(model)
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> ChordVae<U> {
        ChordVae { config: self.config.clone(), params: self.params.cast(), w: self.w.clone() }
    }
}

/// Opaque handle pairing a batch-norm layer with its statistics.
#[derive(Debug, Clone, Copy)]
pub struct BatchNormStats(BatchNorm);

impl<T: Scalar> Ctx<'_, T> {
    /// Batch statistics gathered by training-mode batch norms in this pass.
    pub fn batch_stats(&self) -> Vec<(BatchNormStats, BatchStats<T>)> {
        self.take_stats().into_iter().map(|(bn, s)| (BatchNormStats(bn), s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(2, 4, 16, 2).validate().is_ok());
        assert!(ModelConfig::new(2, 4, 15, 2).validate().is_err());
        assert!(ModelConfig::new(2, 4, 16, 0).validate().is_err());
        assert!(ModelConfig::new(2, 1, 16, 2).validate().is_err());
    }

    #[test]
    fn fingerprint_is_sixteen_hex_digits_and_config_sensitive() {
        let a = ModelConfig::new(2, 4, 16, 2);
        let b = ModelConfig::new(2, 4, 16, 3);
        assert_eq!(a.fingerprint().len(), 16);
        assert!(a.fingerprint().chars().all(|c| c.is_ascii_hexdigit()));
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn binarize_uses_greater_or_equal() {
        let half = vec![0.5f64; 2 * 128];
        assert_eq!(binarize(&half, 2, 0.5).count(), 256);
        assert_eq!(binarize(&half, 2, 1.0).count(), 0);
    }
}
