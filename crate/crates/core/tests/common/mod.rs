#![allow(dead_code)]

use poly_core::graph::build_graph;
use poly_core::pianoroll::{BASS, DRUMS, GUITAR_PIANO, STRINGS};
use poly_core::{ChordGraph, Onset, Pianoroll};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small band arrangement: a drum groove, a bass line, comping chords and
/// an occasional string pad, randomized per bar.
pub fn synthetic_roll(rng: &mut impl Rng, n_bars: usize) -> Pianoroll {
    let mut notes = Vec::new();
    for bar in 0..n_bars {
        for step in (0..32).step_by(4) {
            if step % 16 == 0 {
                notes.push(Onset::new(bar, DRUMS, step, 36, 1));
            }
            if step % 16 == 8 {
                notes.push(Onset::new(bar, DRUMS, step, 38, 1));
            }
            if rng.random_bool(0.7) {
                notes.push(Onset::new(bar, DRUMS, step, 42, 1));
            }
        }
        let root = rng.random_range(40..52);
        for step in (0..32).step_by(8) {
            let offset = [0, 7, 12, 5][rng.random_range(0..4)];
            notes.push(Onset::new(bar, BASS, step, root + offset - 12, 8));
        }
        let third = if rng.random_bool(0.5) { 4 } else { 3 };
        for step in [0, 16] {
            for iv in [0, third, 7] {
                notes.push(Onset::new(bar, GUITAR_PIANO, step, root + 12 + iv, 16));
            }
        }
        if rng.random_bool(0.5) {
            for iv in [0, 7, 12 + third] {
                notes.push(Onset::new(bar, STRINGS, 0, root + 24 + iv, 32));
            }
        }
    }
    notes.sort();
    Pianoroll::new(n_bars, notes).expect("synthetic notes are valid")
}

pub fn synthetic_graphs(n: usize, n_bars: usize, sigma: usize, seed: u64) -> Vec<ChordGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| build_graph(&synthetic_roll(&mut rng, n_bars), sigma).expect("chords fit")).collect()
}

/// Random in-range rolls of `bars` bars with at most `max_chord` notes in
/// any one cell.
pub fn roll_strategy(bars: usize, max_chord: usize) -> impl proptest::strategy::Strategy<Value = Pianoroll> {
    use poly_core::pianoroll::{MAX_DURATION, N_TRACKS, STEPS_PER_BAR};
    use proptest::prelude::*;
    let cell = (0..bars, 0..N_TRACKS, 0..STEPS_PER_BAR);
    let chord = prop::collection::btree_map(0usize..128, 1..=MAX_DURATION, 1..=max_chord);
    prop::collection::btree_map(cell, chord, 0..48).prop_map(move |cells| {
        let onsets = cells
            .into_iter()
            .flat_map(|((bar, track, step), notes)| {
                notes.into_iter().map(move |(pitch, dur)| Onset::new(bar, track, step, pitch, dur))
            })
            .collect();
        Pianoroll::new(bars, onsets).expect("generated notes are in range")
    })
}

/// Two 2-bar sequences whose metrics are worked out by hand: EB 25/50/50/75,
/// UPC 1.5/3/1 for bass/guitar/strings, DP 4 of 6.
pub fn hand_fixture() -> Vec<Pianoroll> {
    let a = Pianoroll::new(
        2,
        vec![
            Onset::new(0, DRUMS, 0, 36, 1),
            Onset::new(0, DRUMS, 3, 38, 1),
            Onset::new(0, DRUMS, 8, 42, 1),
            Onset::new(0, BASS, 0, 36, 8),
            Onset::new(0, BASS, 8, 43, 8),
            Onset::new(1, BASS, 0, 48, 16),
            Onset::new(1, GUITAR_PIANO, 0, 60, 8),
            Onset::new(1, GUITAR_PIANO, 0, 64, 8),
            Onset::new(1, GUITAR_PIANO, 0, 67, 8),
        ],
    )
    .unwrap();
    let b = Pianoroll::new(
        2,
        vec![
            Onset::new(0, DRUMS, 0, 36, 1),
            Onset::new(1, DRUMS, 16, 36, 1),
            Onset::new(1, DRUMS, 17, 42, 1),
            Onset::new(0, GUITAR_PIANO, 4, 62, 4),
            Onset::new(0, GUITAR_PIANO, 4, 65, 4),
            Onset::new(0, GUITAR_PIANO, 4, 69, 4),
            Onset::new(0, GUITAR_PIANO, 4, 74, 4),
            Onset::new(1, STRINGS, 0, 72, 32),
        ],
    )
    .unwrap();
    vec![a, b]
}
