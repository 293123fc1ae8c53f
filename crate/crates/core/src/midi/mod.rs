//! MIDI ingestion and export.

mod convert;
mod smf;

pub use convert::{
    from_pianoroll, to_pianoroll, to_region_rolls, ConvertError, TrackMap, EXPORT_DIVISION, EXPORT_VOICES,
};
pub use smf::{parse_smf, write_smf, Format, Message, MidiFile, SmfError, Track, TrackEvent};
