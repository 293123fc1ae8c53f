//! Sampling, interpolation and structure-conditioned generation on top of a
//! trained model, plus the rule that turns token distributions into notes.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::graph::{StructureTensor, PITCH_EOS};
use crate::model::{binarize, ChordVae, ContentProbs, ModelError};
use crate::pianoroll::{Onset, Pianoroll, MAX_DURATION, N_PITCHES};
use crate::Scalar;

pub type Result<T> = std::result::Result<T, ModelError>;

/// How a token is read off a categorical distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Decoding {
    #[default]
    Argmax,
    /// Draw from the distribution with a generator seeded per call.
    Sample { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    /// Structure cells with probability at or above this are kept.
    pub threshold: f64,
    pub decoding: Decoding,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions { threshold: 0.5, decoding: Decoding::Argmax }
    }
}

/// One generated sequence and everything it was produced from.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated<T> {
    pub z: Vec<T>,
    /// Empty when the structure was supplied by the caller.
    pub structure_probs: Vec<T>,
    pub structure: StructureTensor,
    pub content: ContentProbs<T>,
    pub pianoroll: Pianoroll,
    /// Set when the structure has no active cell, so nothing was decoded.
    pub empty_structure: bool,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn pick<T: Scalar>(row: &[T], rng: Option<&mut ChaCha8Rng>) -> usize {
    match rng {
        None => argmax(row),
        Some(rng) => match WeightedIndex::new(row.iter().map(|v| v.as_f64().max(0.0))) {
            Ok(dist) => dist.sample(rng),
            Err(_) => argmax(row),
        },
    }
}

/// Reads notes off per-slot distributions. Slots are scanned in order and
/// an EOS pitch ends the chord; SOS and PAD are skipped. A note's duration
/// is chosen among the real durations only. Repeated pitches in one chord
/// merge, keeping the longest duration.
pub fn render<T: Scalar>(content: &ContentProbs<T>, n_bars: usize, decoding: Decoding) -> Pianoroll {
    let mut rng = match decoding {
        Decoding::Argmax => None,
        Decoding::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
    };
    let mut onsets = Vec::new();
    for (n, key) in content.nodes.iter().enumerate() {
        for slot in 0..content.sigma {
            let pitch = pick(content.pitch_row(n, slot), rng.as_mut());
            if pitch == PITCH_EOS as usize {
                break;
            }
            if pitch >= N_PITCHES {
                continue;
            }
            let dur = pick(&content.duration_row(n, slot)[..MAX_DURATION], rng.as_mut());
            onsets.push(Onset::new(key.bar, key.track, key.step, pitch, dur + 1));
        }
    }
    Pianoroll::merging(n_bars, onsets).expect("decoded notes are in range")
}

/// A standard normal code of length `d`.
pub fn sample_latent<T: Scalar>(d: usize, rng: &mut impl Rng) -> Vec<T> {
    (0..d).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect()
}

/// The code drawn for `seed`; the same seed always gives the same code.
pub fn latent_for_seed<T: Scalar>(d: usize, seed: u64) -> Vec<T> {
    sample_latent(d, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Decodes structure and content from `z` and renders the result.
pub fn decode_latent<T: Scalar>(model: &ChordVae<T>, z: &[T], opts: &GenerateOptions) -> Result<Generated<T>> {
    let (z_s, z_c) = model.split(z)?;
    let structure_probs = model.decode_structure(&z_s)?;
    let structure = binarize(&structure_probs, model.config().n_bars, T::lit(opts.threshold));
    let content = model.decode_content(&z_c, &structure)?;
    let pianoroll = render(&content, model.config().n_bars, opts.decoding);
    let empty_structure = structure.count() == 0;
    Ok(Generated { z: z.to_vec(), structure_probs, structure, content, pianoroll, empty_structure })
}

/// The first `n` codes of the stream seeded by `seed`. The first one is
/// `latent_for_seed(d, seed)`.
pub fn sample_latents<T: Scalar>(d: usize, n: usize, seed: u64) -> Vec<Vec<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_latent(d, &mut rng)).collect()
}

/// `n` sequences decoded from `sample_latents(d, n, seed)`.
pub fn sample<T: Scalar>(model: &ChordVae<T>, n: usize, seed: u64, opts: &GenerateOptions) -> Result<Vec<Generated<T>>> {
    sample_latents(model.d(), n, seed).iter().map(|z| decode_latent(model, z, opts)).collect()
}

/// `a + t (b - a)` at `steps` evenly spaced `t` from 0 to 1 inclusive.
/// The last code is `b` itself, so both endpoints are exact.
pub fn interpolate_latents<T: Scalar>(a: &[T], b: &[T], steps: usize) -> Vec<Vec<T>> {
    assert_eq!(a.len(), b.len(), "codes differ in length");
    assert!(steps >= 2, "interpolation needs at least two steps");
    (0..steps)
        .map(|i| {
            if i == steps - 1 {
                return b.to_vec();
            }
            let t = T::lit(i as f64 / (steps - 1) as f64);
            a.iter().zip(b).map(|(&x, &y)| x + t * (y - x)).collect()
        })
        .collect()
}

pub fn interpolate<T: Scalar>(model: &ChordVae<T>, a: &[T], b: &[T], steps: usize, opts: &GenerateOptions) -> Result<Vec<Generated<T>>> {
    if a.len() != model.d() || b.len() != model.d() {
        let found = if a.len() != model.d() { a.len() } else { b.len() };
        return Err(ModelError::LatentSize { expected: model.d(), found });
    }
    interpolate_latents(a, b, steps).iter().map(|z| decode_latent(model, z, opts)).collect()
}

/// Decodes the content of `z` onto a caller-supplied structure, ignoring
/// the structure decoder. An all-zero structure gives an empty result with
/// `empty_structure` set.
pub fn conditioned_generate<T: Scalar>(
    model: &ChordVae<T>,
    z: &[T],
    structure: &StructureTensor,
    opts: &GenerateOptions,
) -> Result<Generated<T>> {
    let (_, z_c) = model.split(z)?;
    let content = model.decode_content(&z_c, structure)?;
    let pianoroll = render(&content, structure.n_bars(), opts.decoding);
    Ok(Generated {
        z: z.to_vec(),
        structure_probs: Vec::new(),
        structure: structure.clone(),
        content,
        pianoroll,
        empty_structure: structure.count() == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{NodeKey, DUR_VOCAB, PITCH_PAD, PITCH_SOS, PITCH_VOCAB};

    fn one_hot(n: usize, at: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[at] = 1.0;
        v
    }

    #[test]
    fn render_rules() {
        let sigma = 6;
        let picks = [(60, 3), (PITCH_SOS as usize, 0), (60, 7), (PITCH_PAD as usize, 0), (64, 1), (PITCH_EOS as usize, 0)];
        let mut pitch = Vec::new();
        let mut duration = Vec::new();
        for (p, d) in picks {
            pitch.extend(one_hot(PITCH_VOCAB, p));
            duration.extend(one_hot(DUR_VOCAB, d));
        }
        // A non-real duration token must never be chosen.
        duration[4 * DUR_VOCAB + 97] = 2.0;
        let content = ContentProbs { nodes: vec![NodeKey { bar: 1, track: 2, step: 5 }], sigma, pitch, duration };
        let roll = render(&content, 2, Decoding::Argmax);
        assert_eq!(roll.onsets(), &[Onset::new(1, 2, 5, 60, 8), Onset::new(1, 2, 5, 64, 2)]);
    }

    #[test]
    fn interpolation_endpoints() {
        let a: Vec<f64> = vec![0.3, -1.7, 2.25];
        let b = vec![-0.1, 0.9, 1e-3];
        let path = interpolate_latents(&a, &b, 5);
        assert_eq!(path[0], a);
        assert_eq!(path[4], b);
        for (x, y) in path[2].iter().zip([0.1, -0.4, 0.5 * 2.25 + 0.5 * 1e-3]) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(interpolate_latents(&a, &a, 4).iter().all(|z| *z == a));
    }
}
