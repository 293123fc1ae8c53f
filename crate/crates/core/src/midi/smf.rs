//! Standard MIDI File reader and writer.
//!
//! The reader accepts running status and keeps every event it does not
//! interpret (controllers, pitch bend, text metas, sysex) as an opaque
//! message so that a parse/write/parse cycle is lossless at the event level.
//! The writer never emits running status.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SmfError {
    #[error("missing or malformed MThd header")]
    MalformedHeader,
    #[error("chunk or event truncated at byte {0}")]
    TruncatedChunk(usize),
    #[error("variable-length quantity longer than 4 bytes at byte {0}")]
    BadVlq(usize),
    #[error("unexpected status byte {status:#04x} at byte {offset}")]
    UnexpectedStatus { status: u8, offset: usize },
    #[error("SMPTE time division is not supported")]
    SmpteDivision,
    #[error("unknown SMF format {0}")]
    UnknownFormat(u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    SingleTrack = 0,
    MultiTrack = 1,
    Sequential = 2,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    NoteOn { channel: u8, key: u8, velocity: u8 },
    /// Also produced for note-on events with velocity 0.
    NoteOff { channel: u8, key: u8, velocity: u8 },
    ProgramChange { channel: u8, program: u8 },
    /// Microseconds per quarter note.
    Tempo(u32),
    TimeSignature { numerator: u8, denominator_pow: u8, clocks_per_click: u8, notated_32nds: u8 },
    EndOfTrack,
    /// Any other channel voice message, kept verbatim.
    Channel { status: u8, data: Vec<u8> },
    /// Any other meta event.
    Meta { kind: u8, data: Vec<u8> },
    /// `status` is 0xF0 or 0xF7.
    SysEx { status: u8, data: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackEvent {
    pub delta: u32,
    pub message: Message,
}

impl TrackEvent {
    pub fn new(delta: u32, message: Message) -> Self {
        TrackEvent { delta, message }
    }
}

pub type Track = Vec<TrackEvent>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MidiFile {
    pub format: Format,
    /// Ticks per quarter note.
    pub division: u16,
    pub tracks: Vec<Track>,
}

impl MidiFile {
    pub fn new(format: Format, division: u16) -> Self {
        MidiFile { format, division, tracks: Vec::new() }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> Reader<'a> {
    fn u8(&mut self) -> Result<u8, SmfError> {
        if self.pos >= self.end {
            return Err(SmfError::TruncatedChunk(self.pos));
        }
        let b = self.bytes[self.pos];
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], SmfError> {
        if self.end - self.pos < n {
            return Err(SmfError::TruncatedChunk(self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn vlq(&mut self) -> Result<u32, SmfError> {
        let start = self.pos;
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(SmfError::BadVlq(start))
    }
}

fn be_u16(b: &[u8]) -> u16 {
    u16::from_be_bytes([b[0], b[1]])
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

fn channel_data_len(status: u8) -> usize {
    match status & 0xf0 {
        0xc0 | 0xd0 => 1,
        _ => 2,
    }
}

pub fn parse_smf(bytes: &[u8]) -> Result<MidiFile, SmfError> {
    if bytes.len() < 14 || &bytes[0..4] != b"MThd" {
        return Err(SmfError::MalformedHeader);
    }
    let header_len = be_u32(&bytes[4..8]) as usize;
    if header_len < 6 {
        return Err(SmfError::MalformedHeader);
    }
    if bytes.len() < 8 + header_len {
        return Err(SmfError::TruncatedChunk(bytes.len()));
    }
    let format = match be_u16(&bytes[8..10]) {
        0 => Format::SingleTrack,
        1 => Format::MultiTrack,
        2 => Format::Sequential,
        other => return Err(SmfError::UnknownFormat(other)),
    };
    let n_tracks = be_u16(&bytes[10..12]) as usize;
    let division = be_u16(&bytes[12..14]);
    if division & 0x8000 != 0 {
        return Err(SmfError::SmpteDivision);
    }

    let mut pos = 8 + header_len;
    let mut tracks = Vec::with_capacity(n_tracks);
    while tracks.len() < n_tracks {
        if bytes.len() - pos < 8 {
            return Err(SmfError::TruncatedChunk(pos));
        }
        let kind = &bytes[pos..pos + 4];
        let len = be_u32(&bytes[pos + 4..pos + 8]) as usize;
        let body = pos + 8;
        if bytes.len() - body < len {
            return Err(SmfError::TruncatedChunk(body));
        }
        if kind == b"MTrk" {
            tracks.push(parse_track(&mut Reader { bytes, pos: body, end: body + len })?);
        } else {
            log::debug!("skipping unknown chunk {:?}", String::from_utf8_lossy(kind));
        }
        pos = body + len;
    }
    Ok(MidiFile { format, division, tracks })
}

fn parse_track(r: &mut Reader<'_>) -> Result<Track, SmfError> {
    let mut events = Vec::new();
    let mut running: Option<u8> = None;
    while r.pos < r.end {
        let delta = r.vlq()?;
        let offset = r.pos;
        let first = r.u8()?;
        let message = match first {
            0xff => {
                running = None;
                let kind = r.u8()?;
                let len = r.vlq()? as usize;
                let data = r.take(len)?;
                meta_message(kind, data)
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = r.vlq()? as usize;
                Message::SysEx { status: first, data: r.take(len)?.to_vec() }
            }
            0x80..=0xef => {
                running = Some(first);
                let data = r.take(channel_data_len(first))?;
                channel_message(first, data)
            }
            0x00..=0x7f => {
                let status = running.ok_or(SmfError::UnexpectedStatus { status: first, offset })?;
                let mut data = vec![first];
                if channel_data_len(status) == 2 {
                    data.push(r.u8()?);
                }
                channel_message(status, &data)
            }
            _ => return Err(SmfError::UnexpectedStatus { status: first, offset }),
        };
        let done = message == Message::EndOfTrack;
        events.push(TrackEvent { delta, message });
        if done {
            break;
        }
    }
    if events.last().map(|e| &e.message) != Some(&Message::EndOfTrack) {
        events.push(TrackEvent::new(0, Message::EndOfTrack));
    }
    Ok(events)
}

fn meta_message(kind: u8, data: &[u8]) -> Message {
    match (kind, data.len()) {
        (0x2f, _) => Message::EndOfTrack,
        (0x51, 3) => Message::Tempo(u32::from_be_bytes([0, data[0], data[1], data[2]])),
        (0x58, 4) => Message::TimeSignature {
            numerator: data[0],
            denominator_pow: data[1],
            clocks_per_click: data[2],
            notated_32nds: data[3],
        },
        _ => Message::Meta { kind, data: data.to_vec() },
    }
}

fn channel_message(status: u8, data: &[u8]) -> Message {
    let channel = status & 0x0f;
    match status & 0xf0 {
        0x90 if data[1] == 0 => Message::NoteOff { channel, key: data[0], velocity: 0 },
        0x90 => Message::NoteOn { channel, key: data[0], velocity: data[1] },
        0x80 => Message::NoteOff { channel, key: data[0], velocity: data[1] },
        0xc0 => Message::ProgramChange { channel, program: data[0] },
        _ => Message::Channel { status, data: data.to_vec() },
    }
}

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 5];
    let mut n = 0;
    loop {
        buf[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { buf[i] | 0x80 } else { buf[i] });
    }
}

fn push_message(out: &mut Vec<u8>, message: &Message) {
    match message {
        Message::NoteOn { channel, key, velocity } => out.extend([0x90 | channel, *key, *velocity]),
        Message::NoteOff { channel, key, velocity } => out.extend([0x80 | channel, *key, *velocity]),
        Message::ProgramChange { channel, program } => out.extend([0xc0 | channel, *program]),
        Message::Tempo(us) => {
            let b = us.to_be_bytes();
            out.extend([0xff, 0x51, 0x03, b[1], b[2], b[3]]);
        }
        Message::TimeSignature { numerator, denominator_pow, clocks_per_click, notated_32nds } => {
            out.extend([0xff, 0x58, 0x04, *numerator, *denominator_pow, *clocks_per_click, *notated_32nds])
        }
        Message::EndOfTrack => out.extend([0xff, 0x2f, 0x00]),
        Message::Channel { status, data } => {
            out.push(*status);
            out.extend(data);
        }
        Message::Meta { kind, data } => {
            out.extend([0xff, *kind]);
            push_vlq(out, data.len() as u32);
            out.extend(data);
        }
        Message::SysEx { status, data } => {
            out.push(*status);
            push_vlq(out, data.len() as u32);
            out.extend(data);
        }
    }
}

pub fn write_smf(file: &MidiFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(b"MThd");
    out.extend(6u32.to_be_bytes());
    out.extend((file.format as u16).to_be_bytes());
    out.extend((file.tracks.len() as u16).to_be_bytes());
    out.extend(file.division.to_be_bytes());
    for track in &file.tracks {
        let mut body = Vec::new();
        let mut ended = false;
        for event in track {
            push_vlq(&mut body, event.delta);
            push_message(&mut body, &event.message);
            if event.message == Message::EndOfTrack {
                ended = true;
                break;
            }
        }
        if !ended {
            push_vlq(&mut body, 0);
            push_message(&mut body, &Message::EndOfTrack);
        }
        out.extend(b"MTrk");
        out.extend((body.len() as u32).to_be_bytes());
        out.extend(body);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(format: u16, n_tracks: u16, division: u16) -> Vec<u8> {
        let mut h = b"MThd\x00\x00\x00\x06".to_vec();
        h.extend(format.to_be_bytes());
        h.extend(n_tracks.to_be_bytes());
        h.extend(division.to_be_bytes());
        h
    }

    fn with_track(mut bytes: Vec<u8>, body: &[u8]) -> Vec<u8> {
        bytes.extend(b"MTrk");
        bytes.extend((body.len() as u32).to_be_bytes());
        bytes.extend(body);
        bytes
    }

    #[test]
    fn decodes_header_fields() {
        let bytes = with_track(
            vec![0x4D, 0x54, 0x68, 0x64, 0x00, 0x00, 0x00, 0x06, 0x00, 0x01, 0x00, 0x01, 0x01, 0xE0],
            &[0x00, 0xff, 0x2f, 0x00],
        );
        let f = parse_smf(&bytes).unwrap();
        assert_eq!(f.format, Format::MultiTrack);
        assert_eq!(f.tracks.len(), 1);
        assert_eq!(f.division, 480);
    }

    #[test]
    fn two_byte_vlq() {
        let bytes = with_track(header(0, 1, 96), &[0x81, 0x00, 0xff, 0x2f, 0x00]);
        let f = parse_smf(&bytes).unwrap();
        assert_eq!(f.tracks[0][0].delta, 128);
    }

    #[test]
    fn vlq_encoding_boundaries() {
        for (value, enc) in [
            (0u32, vec![0x00]),
            (0x7f, vec![0x7f]),
            (0x80, vec![0x81, 0x00]),
            (0x3fff, vec![0xff, 0x7f]),
            (0x4000, vec![0x81, 0x80, 0x00]),
            (0x0fff_ffff, vec![0xff, 0xff, 0xff, 0x7f]),
        ] {
            let mut out = Vec::new();
            push_vlq(&mut out, value);
            assert_eq!(out, enc, "value {value:#x}");
        }
    }

    #[test]
    fn five_byte_vlq_is_rejected() {
        let bytes = with_track(header(0, 1, 96), &[0x81, 0x81, 0x81, 0x81, 0x00, 0xff, 0x2f, 0x00]);
        assert_eq!(parse_smf(&bytes), Err(SmfError::BadVlq(22)));
    }

    #[test]
    fn zero_velocity_note_on_is_note_off() {
        let bytes = with_track(header(0, 1, 96), &[0x00, 0x90, 60, 0, 0x00, 0xff, 0x2f, 0x00]);
        let f = parse_smf(&bytes).unwrap();
        assert_eq!(f.tracks[0][0].message, Message::NoteOff { channel: 0, key: 60, velocity: 0 });
    }

    #[test]
    fn missing_header_and_truncation() {
        assert_eq!(parse_smf(b"RIFF0000000000"), Err(SmfError::MalformedHeader));
        let mut bytes = header(0, 1, 96);
        bytes.extend(b"MTrk\x00\x00\x00\x10\x00\xff");
        assert!(matches!(parse_smf(&bytes), Err(SmfError::TruncatedChunk(_))));
        let bytes = with_track(header(0, 1, 96), &[0x00, 0x90, 60]);
        assert!(matches!(parse_smf(&bytes), Err(SmfError::TruncatedChunk(_))));
        // header promises two tracks, only one present
        let bytes = with_track(header(1, 2, 96), &[0x00, 0xff, 0x2f, 0x00]);
        assert!(matches!(parse_smf(&bytes), Err(SmfError::TruncatedChunk(_))));
    }

    #[test]
    fn running_status_and_opaque_events() {
        let body = [
            0x00, 0x90, 60, 100, // note on
            0x10, 64, 90, // running status note on
            0x00, 0xb0, 7, 100, // controller
            0x05, 10, 50, // running status controller
            0x00, 0xf0, 0x02, 0x7e, 0xf7, // sysex
            0x00, 0xff, 0x01, 0x02, b'h', b'i', // text meta
            0x20, 0x80, 60, 0, // note off
            0x00, 0xff, 0x2f, 0x00,
        ];
        let f = parse_smf(&with_track(header(0, 1, 96), &body)).unwrap();
        let msgs: Vec<_> = f.tracks[0].iter().map(|e| (e.delta, e.message.clone())).collect();
        assert_eq!(
            msgs,
            vec![
                (0, Message::NoteOn { channel: 0, key: 60, velocity: 100 }),
                (16, Message::NoteOn { channel: 0, key: 64, velocity: 90 }),
                (0, Message::Channel { status: 0xb0, data: vec![7, 100] }),
                (5, Message::Channel { status: 0xb0, data: vec![10, 50] }),
                (0, Message::SysEx { status: 0xf0, data: vec![0x7e, 0xf7] }),
                (0, Message::Meta { kind: 0x01, data: b"hi".to_vec() }),
                (32, Message::NoteOff { channel: 0, key: 60, velocity: 0 }),
                (0, Message::EndOfTrack),
            ]
        );
        let rewritten = write_smf(&f);
        assert_eq!(parse_smf(&rewritten).unwrap(), f);
        // no running status on output: rewritten track is longer than the input
        assert!(rewritten.len() > with_track(header(0, 1, 96), &body).len());
    }

    #[test]
    fn data_byte_without_running_status_is_an_error() {
        let bytes = with_track(header(0, 1, 96), &[0x00, 60, 100, 0x00, 0xff, 0x2f, 0x00]);
        assert!(matches!(parse_smf(&bytes), Err(SmfError::UnexpectedStatus { status: 60, .. })));
    }

    #[test]
    fn empty_single_track_file() {
        let mut f = MidiFile::new(Format::SingleTrack, 480);
        f.tracks.push(vec![]);
        let bytes = write_smf(&f);
        assert_eq!(bytes.windows(4).filter(|w| w == b"MTrk").count(), 1);
        assert!(bytes.ends_with(&[b'M', b'T', b'r', b'k', 0, 0, 0, 4, 0x00, 0xff, 0x2f, 0x00]));
        let back = parse_smf(&bytes).unwrap();
        assert_eq!(back.tracks, vec![vec![TrackEvent::new(0, Message::EndOfTrack)]]);
    }

    #[test]
    fn missing_end_of_track_is_appended() {
        let f = parse_smf(&with_track(header(0, 1, 96), &[0x00, 0x90, 60, 1])).unwrap();
        assert_eq!(f.tracks[0].last().unwrap().message, Message::EndOfTrack);
        assert_eq!(f.tracks[0].iter().filter(|e| e.message == Message::EndOfTrack).count(), 1);
    }

    #[test]
    fn smpte_division_rejected() {
        let bytes = with_track(header(0, 1, 0xe728), &[0x00, 0xff, 0x2f, 0x00]);
        assert_eq!(parse_smf(&bytes), Err(SmfError::SmpteDivision));
    }
}
