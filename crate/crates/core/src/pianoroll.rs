//! Fixed-grid multitrack pianoroll: the musical surface shared by MIDI
//! conversion, graph construction, generation and metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tracks after consolidation: drums, bass, guitar/piano, strings.
pub const N_TRACKS: usize = 4;
/// Timesteps per 4/4 bar (8 per beat).
pub const STEPS_PER_BAR: usize = 32;
pub const N_PITCHES: usize = 128;
/// Longest representable note, three bars.
pub const MAX_DURATION: usize = 96;

pub const DRUMS: usize = 0;
pub const BASS: usize = 1;
pub const GUITAR_PIANO: usize = 2;
pub const STRINGS: usize = 3;

pub const TRACK_NAMES: [&str; N_TRACKS] = ["drums", "bass", "guitar_piano", "strings"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PianorollError {
    #[error("onset {0:?} is out of range")]
    OutOfRange(Onset),
    #[error("duplicate onset at bar {bar}, track {track}, step {step}, pitch {pitch}")]
    Duplicate { bar: usize, track: usize, step: usize, pitch: usize },
    #[error("fixture declares {tracks} tracks and {steps} steps; expected 4 and 32")]
    Layout { tracks: usize, steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Onset {
    pub bar: usize,
    pub track: usize,
    pub step: usize,
    pub pitch: usize,
    pub duration: usize,
}

impl Onset {
    pub fn new(bar: usize, track: usize, step: usize, pitch: usize, duration: usize) -> Self {
        Onset { bar, track, step, pitch, duration }
    }

    fn key(&self) -> (usize, usize, usize, usize) {
        (self.bar, self.track, self.step, self.pitch)
    }

    /// Timestep counted from the start of the sequence.
    pub fn global_step(&self) -> usize {
        self.bar * STEPS_PER_BAR + self.step
    }
}

/// Onsets over an `n_bars x 4 x 32 x 128` grid, each carrying a duration in
/// timesteps. Onsets are kept sorted by `(bar, track, step, pitch)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pianoroll {
    n_bars: usize,
    onsets: Vec<Onset>,
}

impl Pianoroll {
    pub fn empty(n_bars: usize) -> Self {
        Pianoroll { n_bars, onsets: Vec::new() }
    }

    pub fn new(n_bars: usize, mut onsets: Vec<Onset>) -> Result<Self, PianorollError> {
        onsets.sort();
        for o in &onsets {
            if o.bar >= n_bars
                || o.track >= N_TRACKS
                || o.step >= STEPS_PER_BAR
                || o.pitch >= N_PITCHES
                || o.duration == 0
                || o.duration > MAX_DURATION
            {
                return Err(PianorollError::OutOfRange(*o));
            }
        }
        for w in onsets.windows(2) {
            if w[0].key() == w[1].key() {
                let o = w[1];
                return Err(PianorollError::Duplicate {
                    bar: o.bar,
                    track: o.track,
                    step: o.step,
                    pitch: o.pitch,
                });
            }
        }
        Ok(Pianoroll { n_bars, onsets })
    }

    /// Builds a roll from possibly colliding onsets; on a collision the longer
    /// duration wins. Out-of-range onsets are still rejected.
    pub fn merging(n_bars: usize, onsets: impl IntoIterator<Item = Onset>) -> Result<Self, PianorollError> {
        let mut cells: BTreeMap<(usize, usize, usize, usize), usize> = BTreeMap::new();
        for o in onsets {
            let d = cells.entry(o.key()).or_insert(0);
            *d = (*d).max(o.duration);
        }
        let merged = cells
            .into_iter()
            .map(|((bar, track, step, pitch), duration)| Onset { bar, track, step, pitch, duration })
            .collect();
        Pianoroll::new(n_bars, merged)
    }

    pub fn n_bars(&self) -> usize {
        self.n_bars
    }

    pub fn onsets(&self) -> &[Onset] {
        &self.onsets
    }

    pub fn is_empty(&self) -> bool {
        self.onsets.is_empty()
    }

    pub fn onsets_in(&self, bar: usize, track: usize) -> impl Iterator<Item = &Onset> {
        self.onsets.iter().filter(move |o| o.bar == bar && o.track == track)
    }

    /// Copies bars `start..start + len` into a new roll, rebasing bar indices.
    pub fn slice_bars(&self, start: usize, len: usize) -> Pianoroll {
        let onsets = self
            .onsets
            .iter()
            .filter(|o| o.bar >= start && o.bar < start + len)
            .map(|o| Onset { bar: o.bar - start, ..*o })
            .collect();
        Pianoroll { n_bars: len, onsets }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&PianorollJson::from(self)).expect("pianoroll serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, FixtureError> {
        let wire: PianorollJson = serde_json::from_str(text)?;
        Ok(Pianoroll::try_from(wire)?)
    }
}

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("invalid pianoroll JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Roll(#[from] PianorollError),
}

/// Wire form shared by fixtures, CLI output and the HTTP API:
/// `{n_bars, tracks, steps, onsets: [[bar, track, step, pitch, dur], ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PianorollJson {
    pub n_bars: usize,
    pub tracks: usize,
    pub steps: usize,
    pub onsets: Vec<[usize; 5]>,
}

impl From<&Pianoroll> for PianorollJson {
    fn from(roll: &Pianoroll) -> Self {
        PianorollJson {
            n_bars: roll.n_bars,
            tracks: N_TRACKS,
            steps: STEPS_PER_BAR,
            onsets: roll
                .onsets
                .iter()
                .map(|o| [o.bar, o.track, o.step, o.pitch, o.duration])
                .collect(),
        }
    }
}

impl TryFrom<PianorollJson> for Pianoroll {
    type Error = PianorollError;

    fn try_from(wire: PianorollJson) -> Result<Self, Self::Error> {
        if wire.tracks != N_TRACKS || wire.steps != STEPS_PER_BAR {
            return Err(PianorollError::Layout { tracks: wire.tracks, steps: wire.steps });
        }
        let onsets = wire
            .onsets
            .into_iter()
            .map(|[bar, track, step, pitch, duration]| Onset { bar, track, step, pitch, duration })
            .collect();
        Pianoroll::new(wire.n_bars, onsets)
    }
}

impl Serialize for Pianoroll {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PianorollJson::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pianoroll {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let wire = PianorollJson::deserialize(d)?;
        Pianoroll::try_from(wire).map_err(serde::de::Error::custom)
    }
}
