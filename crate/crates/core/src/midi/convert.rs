//! Conversion between MIDI event streams and fixed-grid pianorolls.

use std::collections::{BTreeMap, HashMap, VecDeque};

use thiserror::Error;

use super::smf::{Format, Message, MidiFile, TrackEvent};
use crate::pianoroll::{
    Onset, Pianoroll, BASS, DRUMS, GUITAR_PIANO, MAX_DURATION, N_TRACKS, STEPS_PER_BAR, STRINGS,
};

const DRUM_CHANNEL: u8 = 9;
const STEPS_PER_BEAT: u64 = (STEPS_PER_BAR / 4) as u64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConvertError {
    #[error("no notes survive quantization and track mapping")]
    NoQuantizableContent,
    #[error("bars per sequence must be positive")]
    ZeroBars,
}

/// Total mapping from `(channel, program)` to one of the four tracks, or to
/// nothing (the event is discarded).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackMap {
    table: Vec<[Option<u8>; 128]>,
}

impl Default for TrackMap {
    /// Channel 10 is drums; programs 32-39 bass; 0-7 and 24-31 guitar/piano;
    /// 112-127 (percussive and sound effects) discarded; everything else
    /// strings.
    fn default() -> Self {
        TrackMap::from_fn(|channel, program| {
            if channel == DRUM_CHANNEL {
                return Some(DRUMS);
            }
            match program {
                32..=39 => Some(BASS),
                0..=7 | 24..=31 => Some(GUITAR_PIANO),
                112..=127 => None,
                _ => Some(STRINGS),
            }
        })
    }
}

impl TrackMap {
    pub fn from_fn(rule: impl Fn(u8, u8) -> Option<usize>) -> Self {
        let table = (0..16u8)
            .map(|channel| {
                let mut row = [None; 128];
                for program in 0..128u8 {
                    row[program as usize] = rule(channel, program).map(|t| {
                        assert!(t < N_TRACKS, "track index {t} out of range");
                        t as u8
                    });
                }
                row
            })
            .collect();
        TrackMap { table }
    }

    pub fn resolve(&self, channel: u8, program: u8) -> Option<usize> {
        self.table[(channel & 0x0f) as usize][(program & 0x7f) as usize].map(usize::from)
    }
}

/// Rounds `ticks` to the nearest timestep, ties toward the earlier step.
fn ticks_to_steps(ticks: u64, division: u64) -> u64 {
    let num = ticks * STEPS_PER_BEAT;
    let (q, r) = (num / division, num % division);
    if 2 * r > division {
        q + 1
    } else {
        q
    }
}

/// A maximal run of whole 4/4 bars.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Segment {
    start: u64,
    n_bars: usize,
}

#[derive(Debug, Clone, Copy)]
struct Note {
    start: u64,
    end: u64,
    track: usize,
    key: u8,
}

struct Timeline {
    notes: Vec<Note>,
    segments: Vec<Segment>,
}

fn timeline(file: &MidiFile, map: &TrackMap) -> Timeline {
    let division = u64::from(file.division.max(1));
    let bar_ticks = 4 * division;

    // absolute ticks, merged across tracks in (tick, track, order) order
    let mut events: Vec<(u64, usize, usize, &Message)> = Vec::new();
    let mut song_end = 0u64;
    for (ti, track) in file.tracks.iter().enumerate() {
        let mut tick = 0u64;
        for (ei, TrackEvent { delta, message }) in track.iter().enumerate() {
            tick += u64::from(*delta);
            events.push((tick, ti, ei, message));
        }
        song_end = song_end.max(tick);
    }
    events.sort_by_key(|&(tick, ti, ei, _)| (tick, ti, ei));

    let mut program = [0u8; 16];
    let mut open: HashMap<(usize, u8, u8), VecDeque<(u64, Option<usize>)>> = HashMap::new();
    let mut notes = Vec::new();
    let mut meters: Vec<(u64, u8, u8)> = Vec::new();
    let mut last_onset = None;
    for &(tick, ti, _, message) in &events {
        match *message {
            Message::ProgramChange { channel, program: p } => program[channel as usize] = p,
            Message::NoteOn { channel, key, .. } => {
                let track = map.resolve(channel, program[channel as usize]);
                open.entry((ti, channel, key)).or_default().push_back((tick, track));
                last_onset = Some(tick);
            }
            Message::NoteOff { channel, key, .. } => {
                if let Some((start, track)) = open.get_mut(&(ti, channel, key)).and_then(|q| q.pop_front()) {
                    if let Some(track) = track {
                        notes.push(Note { start, end: tick, track, key });
                    }
                }
            }
            Message::TimeSignature { numerator, denominator_pow, .. } => {
                meters.push((tick, numerator, denominator_pow));
            }
            _ => {}
        }
    }
    if let Some(t) = last_onset {
        song_end = song_end.max(t + 1);
    }
    // notes left sounding run to the end of the song
    for ((_, _, key), queue) in open {
        for (start, track) in queue {
            if let Some(track) = track {
                notes.push(Note { start, end: song_end.max(start), track, key });
            }
        }
    }
    notes.sort_by_key(|n| (n.start, n.track, n.key, n.end));

    // meter regions; the latest signature at a given tick wins
    let mut regions: Vec<(u64, bool)> = vec![(0, true)];
    for (tick, num, pow) in meters {
        let common_time = num == 4 && pow == 2;
        match regions.last_mut() {
            Some(last) if last.0 == tick => last.1 = common_time,
            _ => regions.push((tick, common_time)),
        }
    }
    let mut segments: Vec<Segment> = Vec::new();
    for (k, &(start, common_time)) in regions.iter().enumerate() {
        if !common_time {
            continue;
        }
        let n_bars = match regions.get(k + 1) {
            Some(&(next, _)) => ((next - start) / bar_ticks) as usize,
            None => (song_end.saturating_sub(start)).div_ceil(bar_ticks) as usize,
        };
        if n_bars == 0 {
            continue;
        }
        match segments.last_mut() {
            Some(prev) if prev.start + prev.n_bars as u64 * bar_ticks == start => prev.n_bars += n_bars,
            _ => segments.push(Segment { start, n_bars }),
        }
    }
    Timeline { notes, segments }
}

/// Quantizes each 4/4 region of `file` into one pianoroll spanning the whole
/// region. Notes outside 4/4 regions are dropped.
pub fn to_region_rolls(file: &MidiFile, map: &TrackMap) -> Vec<Pianoroll> {
    let division = u64::from(file.division.max(1));
    let Timeline { notes, segments } = timeline(file, map);
    segments
        .iter()
        .map(|seg| {
            let onsets = notes.iter().filter(|n| n.start >= seg.start).filter_map(|n| {
                let step = ticks_to_steps(n.start - seg.start, division) as usize;
                let bar = step / STEPS_PER_BAR;
                if bar >= seg.n_bars {
                    return None;
                }
                let duration = ticks_to_steps(n.end - n.start, division).clamp(1, MAX_DURATION as u64) as usize;
                Some(Onset {
                    bar,
                    track: n.track,
                    step: step % STEPS_PER_BAR,
                    pitch: usize::from(n.key),
                    duration,
                })
            });
            Pianoroll::merging(seg.n_bars, onsets).expect("quantized onsets are in range")
        })
        .collect()
}

/// Cuts `file` into `bars_per_sequence`-bar pianorolls with a one-bar stride.
/// Windows never straddle a meter change and windows without onsets are
/// dropped.
pub fn to_pianoroll(file: &MidiFile, map: &TrackMap, bars_per_sequence: usize) -> Result<Vec<Pianoroll>, ConvertError> {
    if bars_per_sequence == 0 {
        return Err(ConvertError::ZeroBars);
    }
    let regions = to_region_rolls(file, map);
    if regions.iter().all(Pianoroll::is_empty) {
        return Err(ConvertError::NoQuantizableContent);
    }
    let mut out = Vec::new();
    for region in &regions {
        if region.n_bars() < bars_per_sequence {
            continue;
        }
        for start in 0..=region.n_bars() - bars_per_sequence {
            let window = region.slice_bars(start, bars_per_sequence);
            if !window.is_empty() {
                out.push(window);
            }
        }
    }
    Ok(out)
}

/// Division used for exported files; 60 ticks per timestep.
pub const EXPORT_DIVISION: u16 = 480;

/// `(channel, program)` used for each track on export.
pub const EXPORT_VOICES: [(u8, Option<u8>); N_TRACKS] =
    [(DRUM_CHANNEL, None), (0, Some(33)), (1, Some(0)), (2, Some(48))];

/// Renders a roll as a format-1 file: a conductor track followed by one track
/// per instrument.
///
/// Two overlapping notes of the same pitch in one track cannot be told apart
/// once written as note-on/note-off pairs; such rolls do not survive a round
/// trip through MIDI.
pub fn from_pianoroll(roll: &Pianoroll, bpm: f64) -> MidiFile {
    let step_ticks = u64::from(EXPORT_DIVISION) / STEPS_PER_BEAT;
    let bar_ticks = step_ticks * STEPS_PER_BAR as u64;
    let song_ticks = bar_ticks * roll.n_bars() as u64;
    let mut file = MidiFile::new(Format::MultiTrack, EXPORT_DIVISION);

    let tempo = (60_000_000.0 / bpm.max(1.0)).round().min(f64::from(0x00ff_ffff)) as u32;
    file.tracks.push(vec![
        TrackEvent::new(0, Message::Tempo(tempo)),
        TrackEvent::new(
            0,
            Message::TimeSignature { numerator: 4, denominator_pow: 2, clocks_per_click: 24, notated_32nds: 8 },
        ),
        TrackEvent::new(song_ticks as u32, Message::EndOfTrack),
    ]);

    for (track, &(channel, program)) in EXPORT_VOICES.iter().enumerate() {
        // (tick, is_on, key); offs sort before ons at equal ticks
        let mut timed: BTreeMap<(u64, bool, u8), usize> = BTreeMap::new();
        for o in roll.onsets().iter().filter(|o| o.track == track) {
            let on = o.global_step() as u64 * step_ticks;
            let off = on + o.duration as u64 * step_ticks;
            *timed.entry((on, true, o.pitch as u8)).or_default() += 1;
            *timed.entry((off, false, o.pitch as u8)).or_default() += 1;
        }
        let mut events = vec![TrackEvent::new(
            0,
            Message::Meta { kind: 0x03, data: crate::pianoroll::TRACK_NAMES[track].as_bytes().to_vec() },
        )];
        if let Some(program) = program {
            events.push(TrackEvent::new(0, Message::ProgramChange { channel, program }));
        }
        let mut now = 0u64;
        for (&(tick, is_on, key), &count) in &timed {
            for _ in 0..count {
                let message = if is_on {
                    Message::NoteOn { channel, key, velocity: 100 }
                } else {
                    Message::NoteOff { channel, key, velocity: 0 }
                };
                events.push(TrackEvent::new((tick - now) as u32, message));
                now = tick;
            }
        }
        events.push(TrackEvent::new(song_ticks.saturating_sub(now) as u32, Message::EndOfTrack));
        file.tracks.push(events);
    }
    file
}
