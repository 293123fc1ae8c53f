//! Corpus-level generation metrics: empty bars (EB), used pitch classes per
//! bar (UPC) and the share of drum onsets on the 16-position grid (DP).

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pianoroll::{Pianoroll, BASS, DRUMS, GUITAR_PIANO, N_TRACKS, STRINGS, TRACK_NAMES};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("corpus contains no bars")]
    EmptyCorpus,
    #[error("track {0} has no non-empty bars")]
    NoNonEmptyBars(usize),
    #[error("corpus contains no drum onsets")]
    NoDrumNotes,
    #[error("pitch classes are undefined for the drum track")]
    DrumTrack,
    #[error("track index {0} out of range")]
    BadTrack(usize),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn total_bars(corpus: &[Pianoroll]) -> Result<usize> {
    match corpus.iter().map(Pianoroll::n_bars).sum() {
        0 => Err(MetricsError::EmptyCorpus),
        n => Ok(n),
    }
}

fn check_track(track: usize) -> Result<()> {
    if track >= N_TRACKS {
        return Err(MetricsError::BadTrack(track));
    }
    Ok(())
}

/// Percentage of bars in which `track` has no onset.
pub fn empty_bars(corpus: &[Pianoroll], track: usize) -> Result<f64> {
    check_track(track)?;
    let bars = total_bars(corpus)?;
    let used: usize = corpus
        .iter()
        .map(|r| r.onsets().iter().filter(|o| o.track == track).map(|o| o.bar).collect::<BTreeSet<_>>().len())
        .sum();
    Ok(100.0 * (bars - used) as f64 / bars as f64)
}

/// Mean number of distinct pitch classes among the onsets of `track`,
/// averaged over the bars where the track plays.
pub fn used_pitch_classes(corpus: &[Pianoroll], track: usize) -> Result<f64> {
    check_track(track)?;
    if track == DRUMS {
        return Err(MetricsError::DrumTrack);
    }
    total_bars(corpus)?;
    let mut bars = 0usize;
    let mut classes = 0usize;
    for roll in corpus {
        let mut per_bar: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); roll.n_bars()];
        for o in roll.onsets().iter().filter(|o| o.track == track) {
            per_bar[o.bar].insert(o.pitch % 12);
        }
        for set in per_bar.iter().filter(|s| !s.is_empty()) {
            bars += 1;
            classes += set.len();
        }
    }
    if bars == 0 {
        return Err(MetricsError::NoNonEmptyBars(track));
    }
    Ok(classes as f64 / bars as f64)
}

/// Percentage of drum onsets falling on even timesteps.
pub fn drum_patterns(corpus: &[Pianoroll]) -> Result<f64> {
    total_bars(corpus)?;
    let (mut even, mut all) = (0usize, 0usize);
    for o in corpus.iter().flat_map(|r| r.onsets()).filter(|o| o.track == DRUMS) {
        all += 1;
        even += usize::from(o.step % 2 == 0);
    }
    if all == 0 {
        return Err(MetricsError::NoDrumNotes);
    }
    Ok(100.0 * even as f64 / all as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmptyBars {
    pub drums: f64,
    pub bass: f64,
    pub guitar_piano: f64,
    pub strings: f64,
}

/// `None` where a track never plays in the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitchClasses {
    pub bass: Option<f64>,
    pub guitar_piano: Option<f64>,
    pub strings: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_sequences: usize,
    pub n_bars: usize,
    pub eb: EmptyBars,
    pub upc: PitchClasses,
    /// `None` when the corpus has no drum onsets.
    pub dp: Option<f64>,
}

fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(MetricsError::NoNonEmptyBars(_) | MetricsError::NoDrumNotes) => Ok(None),
        Err(e) => Err(e),
    }
}

/// All metrics for a corpus. Fails only on a corpus without bars.
pub fn report(corpus: &[Pianoroll]) -> Result<MetricsReport> {
    let n_bars = total_bars(corpus)?;
    Ok(MetricsReport {
        n_sequences: corpus.len(),
        n_bars,
        eb: EmptyBars {
            drums: empty_bars(corpus, DRUMS)?,
            bass: empty_bars(corpus, BASS)?,
            guitar_piano: empty_bars(corpus, GUITAR_PIANO)?,
            strings: empty_bars(corpus, STRINGS)?,
        },
        upc: PitchClasses {
            bass: optional(used_pitch_classes(corpus, BASS))?,
            guitar_piano: optional(used_pitch_classes(corpus, GUITAR_PIANO))?,
            strings: optional(used_pitch_classes(corpus, STRINGS))?,
        },
        dp: optional(drum_patterns(corpus))?,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table, one row per track.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        let eb = [self.eb.drums, self.eb.bass, self.eb.guitar_piano, self.eb.strings];
        let upc = [None, self.upc.bass, self.upc.guitar_piano, self.upc.strings];
        let mut out = format!("{} sequences, {} bars\n", self.n_sequences, self.n_bars);
        let _ = writeln!(out, "{:<14}{:>8}{:>8}{:>8}", "track", "EB", "UPC", "DP");
        for t in 0..N_TRACKS {
            let dp = if t == DRUMS { fmt(self.dp) } else { "-".into() };
            let _ = writeln!(out, "{:<14}{:>8.2}{:>8}{:>8}", TRACK_NAMES[t], eb[t], fmt(upc[t]), dp);
        }
        out
    }
}
