//! Standard MIDI File (format 0/1) reader and writer.
//!
//! The parser merges every track onto one timeline and pairs note-on/off
//! events into [`Note`]s; the writer emits a single-track format 0 file.
//! Big-endian chunk framing, VLQ delta times, and running status follow the
//! SMF wire format exactly. SysEx payloads are skipped, format 2 is rejected.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MidiError {
    #[error("not a standard MIDI file: missing MThd header")]
    BadMagic,
    #[error("unsupported SMF format {0} (only 0 and 1)")]
    UnsupportedFormat(u16),
    #[error("SMPTE time division is not supported")]
    SmpteDivision,
    #[error("truncated file: {0}")]
    Truncated(&'static str),
    #[error("chunk length {length} overruns remaining buffer of {remaining} bytes")]
    ChunkOverrun { length: usize, remaining: usize },
    #[error("variable-length quantity longer than 4 bytes")]
    VlqTooLong,
    #[error("data byte {0:#04x} with no running status")]
    OrphanDataByte(u8),
    #[error("invalid note field: {0}")]
    InvalidNote(String),
}

/// One note: onset and duration in ticks, MIDI pitch, MIDI velocity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Note {
    pub onset: u64,
    pub duration: u64,
    pub pitch: u8,
    pub velocity: u8,
}

/// A tempo change: microseconds per quarter note from `tick` onward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TempoEvent {
    pub tick: u64,
    pub us_per_quarter: u32,
}

/// Parsed musical content on a single merged timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub notes: Vec<Note>,
    pub ticks_per_quarter: u32,
    pub tempo_events: Vec<TempoEvent>,
    pub time_signature: (u8, u8),
}

/// Non-fatal oddities encountered while parsing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseWarnings {
    /// Note-ons still active at end of track; the notes are dropped.
    pub unmatched_note_ons: usize,
    /// Note-offs with no matching active note; ignored.
    pub stray_note_offs: usize,
}

pub const DEFAULT_US_PER_QUARTER: u32 = 500_000; // 120 BPM

impl Score {
    /// Build a score, sorting notes into canonical (onset, pitch) order and
    /// validating field ranges.
    pub fn new(
        mut notes: Vec<Note>,
        ticks_per_quarter: u32,
        tempo_events: Vec<TempoEvent>,
        time_signature: (u8, u8),
    ) -> Result<Self, MidiError> {
        assert!(ticks_per_quarter > 0, "ticks_per_quarter must be positive");
        for n in &notes {
            if n.duration == 0 {
                return Err(MidiError::InvalidNote(format!("zero duration at tick {}", n.onset)));
            }
            if n.pitch > 127 {
                return Err(MidiError::InvalidNote(format!("pitch {} out of range", n.pitch)));
            }
            if n.velocity == 0 || n.velocity > 127 {
                return Err(MidiError::InvalidNote(format!("velocity {} out of range", n.velocity)));
            }
        }
        notes.sort_by_key(|n| (n.onset, n.pitch, n.duration, n.velocity));
        Ok(Score {
            notes,
            ticks_per_quarter,
            tempo_events,
            time_signature,
        })
    }

    pub fn empty(ticks_per_quarter: u32) -> Self {
        Score {
            notes: Vec::new(),
            ticks_per_quarter,
            tempo_events: Vec::new(),
            time_signature: (4, 4),
        }
    }

    /// Ticks in one bar under the score's time signature.
    pub fn ticks_per_bar(&self) -> u64 {
        let (num, den) = self.time_signature;
        (self.ticks_per_quarter as u64 * 4 * num as u64) / den as u64
    }

    /// Effective microseconds per quarter at `tick` (SMF default when no
    /// tempo event applies).
    pub fn us_per_quarter_at(&self, tick: u64) -> u32 {
        let mut current = DEFAULT_US_PER_QUARTER;
        for ev in &self.tempo_events {
            if ev.tick <= tick {
                current = ev.us_per_quarter;
            } else {
                break;
            }
        }
        current
    }
}

// ── VLQ ─────────────────────────────────────────────────────────────

/// Decode one variable-length quantity: big-endian 7-bit groups, bit 7 set on
/// every byte except the last. Returns the value and the offset past it.
pub fn read_vlq(bytes: &[u8], offset: usize) -> Result<(u32, usize), MidiError> {
    let mut value: u32 = 0;
    let mut pos = offset;
    for i in 0.. {
        if i == 4 {
            return Err(MidiError::VlqTooLong);
        }
        let b = *bytes.get(pos).ok_or(MidiError::Truncated("VLQ"))?;
        pos += 1;
        value = (value << 7) | (b & 0x7f) as u32;
        if b & 0x80 == 0 {
            return Ok((value, pos));
        }
    }
    unreachable!()
}

/// Encode a value as a VLQ (1–4 bytes).
pub fn write_vlq(mut value: u32, out: &mut Vec<u8>) {
    debug_assert!(value <= 0x0FFF_FFFF, "VLQ range is 28 bits");
    let mut stack = [0u8; 4];
    let mut n = 0;
    loop {
        stack[n] = (value & 0x7f) as u8;
        value >>= 7;
        n += 1;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        let mut b = stack[i];
        if i != 0 {
            b |= 0x80;
        }
        out.push(b);
    }
}

// ── Parsing ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
enum TrackEvent {
    NoteOn { pitch: u8, velocity: u8 },
    NoteOff { pitch: u8 },
    Tempo(u32),
    TimeSignature(u8, u8),
}

pub struct Parsed {
    pub score: Score,
    pub warnings: ParseWarnings,
}

/// Parse an SMF byte buffer. All tracks are merged onto one timeline;
/// note-on with velocity 0 counts as note-off; an active same-pitch note is
/// closed when a new onset for that pitch arrives.
pub fn parse_midi(bytes: &[u8]) -> Result<Parsed, MidiError> {
    if bytes.len() < 14 || &bytes[0..4] != b"MThd" {
        return Err(MidiError::BadMagic);
    }
    let header_len = be_u32(&bytes[4..8]) as usize;
    if header_len < 6 || 8 + header_len > bytes.len() {
        return Err(MidiError::Truncated("header"));
    }
    let format = be_u16(&bytes[8..10]);
    if format > 1 {
        return Err(MidiError::UnsupportedFormat(format));
    }
    let division = be_u16(&bytes[12..14]);
    if division & 0x8000 != 0 {
        return Err(MidiError::SmpteDivision);
    }
    if division == 0 {
        return Err(MidiError::Truncated("zero time division"));
    }

    // Collect (tick, event) from every MTrk chunk; skip unknown chunks.
    let mut events: Vec<(u64, TrackEvent)> = Vec::new();
    let mut pos = 8 + header_len;
    while pos + 8 <= bytes.len() {
        let chunk_type = &bytes[pos..pos + 4];
        let chunk_len = be_u32(&bytes[pos + 4..pos + 8]) as usize;
        let body_start = pos + 8;
        if body_start + chunk_len > bytes.len() {
            return Err(MidiError::ChunkOverrun {
                length: chunk_len,
                remaining: bytes.len() - body_start,
            });
        }
        if chunk_type == b"MTrk" {
            parse_track(&bytes[body_start..body_start + chunk_len], &mut events)?;
        }
        pos = body_start + chunk_len;
    }

    // Merge: offs sort before ons at the same tick so back-to-back same-pitch
    // notes pair up cleanly.
    events.sort_by_key(|(tick, ev)| {
        let class = match ev {
            TrackEvent::Tempo(_) | TrackEvent::TimeSignature(..) => 0u8,
            TrackEvent::NoteOff { .. } => 1,
            TrackEvent::NoteOn { .. } => 2,
        };
        let pitch = match ev {
            TrackEvent::NoteOn { pitch, .. } | TrackEvent::NoteOff { pitch } => *pitch,
            _ => 0,
        };
        (*tick, class, pitch)
    });

    let mut warnings = ParseWarnings::default();
    let mut active: [Option<(u64, u8)>; 128] = [None; 128];
    let mut notes = Vec::new();
    let mut tempo_events = Vec::new();
    let mut time_signature: Option<(u8, u8)> = None;

    for (tick, ev) in events {
        match ev {
            TrackEvent::NoteOn { pitch, velocity } => {
                let slot = &mut active[pitch as usize];
                if let Some((onset, vel)) = slot.take() {
                    notes.push(Note {
                        onset,
                        duration: (tick - onset).max(1),
                        pitch,
                        velocity: vel,
                    });
                }
                *slot = Some((tick, velocity));
            }
            TrackEvent::NoteOff { pitch } => {
                let slot = &mut active[pitch as usize];
                match slot.take() {
                    Some((onset, vel)) => notes.push(Note {
                        onset,
                        duration: (tick - onset).max(1),
                        pitch,
                        velocity: vel,
                    }),
                    None => warnings.stray_note_offs += 1,
                }
            }
            TrackEvent::Tempo(uspq) => tempo_events.push(TempoEvent {
                tick,
                us_per_quarter: uspq,
            }),
            TrackEvent::TimeSignature(num, den) => {
                time_signature.get_or_insert((num, den));
            }
        }
    }
    warnings.unmatched_note_ons = active.iter().filter(|s| s.is_some()).count();

    tempo_events.sort_by_key(|e| e.tick);
    tempo_events.dedup_by_key(|e| e.tick);

    let score = Score::new(
        notes,
        division as u32,
        tempo_events,
        time_signature.unwrap_or((4, 4)),
    )?;
    Ok(Parsed { score, warnings })
}

fn parse_track(track: &[u8], events: &mut Vec<(u64, TrackEvent)>) -> Result<(), MidiError> {
    let mut pos = 0usize;
    let mut tick: u64 = 0;
    let mut running_status: Option<u8> = None;

    while pos < track.len() {
        let (delta, next) = read_vlq(track, pos)?;
        pos = next;
        tick += delta as u64;

        let first = *track.get(pos).ok_or(MidiError::Truncated("event status"))?;
        let status = if first & 0x80 != 0 {
            pos += 1;
            first
        } else {
            running_status.ok_or(MidiError::OrphanDataByte(first))?
        };

        match status {
            0xFF => {
                running_status = None;
                let ty = *track.get(pos).ok_or(MidiError::Truncated("meta type"))?;
                pos += 1;
                let (len, next) = read_vlq(track, pos)?;
                pos = next;
                let len = len as usize;
                if pos + len > track.len() {
                    return Err(MidiError::Truncated("meta payload"));
                }
                let data = &track[pos..pos + len];
                pos += len;
                match ty {
                    0x51 if len == 3 => {
                        let uspq =
                            ((data[0] as u32) << 16) | ((data[1] as u32) << 8) | data[2] as u32;
                        events.push((tick, TrackEvent::Tempo(uspq)));
                    }
                    0x58 if len >= 2 => {
                        let num = data[0];
                        let den = 1u8 << data[1].min(6);
                        events.push((tick, TrackEvent::TimeSignature(num, den)));
                    }
                    0x2F => return Ok(()),
                    _ => {}
                }
            }
            0xF0 | 0xF7 => {
                running_status = None;
                let (len, next) = read_vlq(track, pos)?;
                pos = next + len as usize;
                if pos > track.len() {
                    return Err(MidiError::Truncated("sysex payload"));
                }
            }
            _ => {
                running_status = Some(status);
                let kind = status & 0xF0;
                let n_data = match kind {
                    0xC0 | 0xD0 => 1,
                    _ => 2,
                };
                if pos + n_data > track.len() {
                    return Err(MidiError::Truncated("channel message data"));
                }
                let d1 = track[pos] & 0x7f;
                let d2 = if n_data == 2 { track[pos + 1] & 0x7f } else { 0 };
                pos += n_data;
                match kind {
                    0x90 if d2 > 0 => events.push((
                        tick,
                        TrackEvent::NoteOn {
                            pitch: d1,
                            velocity: d2,
                        },
                    )),
                    0x90 | 0x80 => events.push((tick, TrackEvent::NoteOff { pitch: d1 })),
                    _ => {}
                }
            }
        }
    }
    Ok(())
}

// ── Writing ─────────────────────────────────────────────────────────

/// Emit a format 0 single-track SMF: time signature and tempo map, then the
/// notes as paired on/off events in tick order.
pub fn write_midi(score: &Score) -> Vec<u8> {
    // event payloads with an ordering class: meta < off < on at equal ticks
    let mut track_events: Vec<(u64, u8, Vec<u8>)> = Vec::new();

    let (num, den) = score.time_signature;
    track_events.push((
        0,
        0,
        vec![0xFF, 0x58, 0x04, num, den.trailing_zeros() as u8, 24, 8],
    ));
    for ev in &score.tempo_events {
        let u = ev.us_per_quarter;
        track_events.push((
            ev.tick,
            0,
            vec![0xFF, 0x51, 0x03, (u >> 16) as u8, (u >> 8) as u8, u as u8],
        ));
    }
    for n in &score.notes {
        track_events.push((n.onset, 2, vec![0x90, n.pitch, n.velocity]));
        track_events.push((n.onset + n.duration, 1, vec![0x80, n.pitch, 0x40]));
    }
    track_events.sort_by(|a, b| (a.0, a.1, a.2.clone()).cmp(&(b.0, b.1, b.2.clone())));

    let mut body = Vec::new();
    let mut cursor = 0u64;
    for (tick, _, payload) in &track_events {
        write_vlq((tick - cursor) as u32, &mut body);
        cursor = *tick;
        body.extend_from_slice(payload);
    }
    write_vlq(0, &mut body);
    body.extend_from_slice(&[0xFF, 0x2F, 0x00]);

    let mut out = Vec::with_capacity(body.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(score.ticks_per_quarter as u16).to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

fn be_u16(b: &[u8]) -> u16 {
    u16::from_be_bytes([b[0], b[1]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vlq_decodes_hand_cases() {
        assert_eq!(read_vlq(&[0x00], 0).unwrap(), (0, 1));
        // 0x81 0x00: (1 << 7) | 0 = 128
        assert_eq!(read_vlq(&[0x81, 0x00], 0).unwrap(), (128, 2));
        // four bytes of 7-bit all-ones: 2^28 - 1
        assert_eq!(
            read_vlq(&[0xFF, 0xFF, 0xFF, 0x7F], 0).unwrap(),
            (268_435_455, 4)
        );
        assert!(matches!(
            read_vlq(&[0xFF, 0xFF, 0xFF, 0xFF, 0x7F], 0),
            Err(MidiError::VlqTooLong)
        ));
        assert!(matches!(read_vlq(&[0x80], 0), Err(MidiError::Truncated(_))));
    }

    #[test]
    fn vlq_round_trip() {
        for v in [0u32, 1, 127, 128, 200, 16383, 16384, 2_097_151, 268_435_455] {
            let mut buf = Vec::new();
            write_vlq(v, &mut buf);
            assert_eq!(read_vlq(&buf, 0).unwrap(), (v, buf.len()), "value {v}");
        }
    }

    /// A minimal hand-assembled format 0 file: one note (pitch 60, vel 64)
    /// held for 480 ticks.
    fn minimal_one_note_file() -> Vec<u8> {
        let mut f = Vec::new();
        f.extend_from_slice(b"MThd");
        f.extend_from_slice(&6u32.to_be_bytes());
        f.extend_from_slice(&0u16.to_be_bytes()); // format 0
        f.extend_from_slice(&1u16.to_be_bytes()); // one track
        f.extend_from_slice(&480u16.to_be_bytes());
        let body: Vec<u8> = vec![
            0x00, 0x90, 60, 64, // t=0 note on
            0x83, 0x60, 0x80, 60, 0x40, // t=480 note off (VLQ 0x83 0x60 = 480)
            0x00, 0xFF, 0x2F, 0x00, // end of track
        ];
        f.extend_from_slice(b"MTrk");
        f.extend_from_slice(&(body.len() as u32).to_be_bytes());
        f.extend_from_slice(&body);
        f
    }

    #[test]
    fn parses_minimal_one_note_file() {
        let parsed = parse_midi(&minimal_one_note_file()).unwrap();
        assert_eq!(parsed.score.ticks_per_quarter, 480);
        assert_eq!(
            parsed.score.notes,
            vec![Note {
                onset: 0,
                duration: 480,
                pitch: 60,
                velocity: 64
            }]
        );
        assert_eq!(parsed.warnings, ParseWarnings::default());
    }

    #[test]
    fn running_status_and_vel0_off() {
        // note on via explicit status, then a second on + vel-0 off using
        // running status only
        let mut body = vec![
            0x00, 0x90, 60, 64, // on p60
            0x10, 64, 80, // running status: on p64
            0x10, 60, 0, // running status: vel 0 = off p60
            0x10, 64, 0, // off p64
            0x00, 0xFF, 0x2F, 0x00,
        ];
        let mut f = Vec::new();
        f.extend_from_slice(b"MThd");
        f.extend_from_slice(&6u32.to_be_bytes());
        f.extend_from_slice(&[0, 0, 0, 1]);
        f.extend_from_slice(&480u16.to_be_bytes());
        f.extend_from_slice(b"MTrk");
        f.extend_from_slice(&(body.len() as u32).to_be_bytes());
        f.append(&mut body);
        let parsed = parse_midi(&f).unwrap();
        assert_eq!(parsed.score.notes.len(), 2);
        assert_eq!(parsed.score.notes[0].pitch, 60);
        assert_eq!(parsed.score.notes[0].duration, 0x20);
        assert_eq!(parsed.score.notes[1].pitch, 64);
    }

    #[test]
    fn empty_track_yields_empty_score() {
        let score = Score::empty(480);
        let bytes = write_midi(&score);
        let parsed = parse_midi(&bytes).unwrap();
        assert!(parsed.score.notes.is_empty());
    }

    #[test]
    fn rejects_bad_magic_and_format_2() {
        assert!(matches!(parse_midi(b"RIFFxxxxxxxxxx"), Err(MidiError::BadMagic)));
        let mut f = Vec::new();
        f.extend_from_slice(b"MThd");
        f.extend_from_slice(&6u32.to_be_bytes());
        f.extend_from_slice(&2u16.to_be_bytes());
        f.extend_from_slice(&[0, 1]);
        f.extend_from_slice(&480u16.to_be_bytes());
        assert!(matches!(
            parse_midi(&f),
            Err(MidiError::UnsupportedFormat(2))
        ));
    }

    #[test]
    fn chunk_overrun_is_an_error() {
        let mut f = minimal_one_note_file();
        // inflate the declared track length beyond the buffer
        let track_len_at = 14 + 4;
        f[track_len_at..track_len_at + 4].copy_from_slice(&999u32.to_be_bytes());
        assert!(matches!(parse_midi(&f), Err(MidiError::ChunkOverrun { .. })));
    }

    #[test]
    fn unmatched_note_on_is_dropped_and_counted() {
        let body: Vec<u8> = vec![0x00, 0x90, 72, 100, 0x40, 0xFF, 0x2F, 0x00];
        let mut f = Vec::new();
        f.extend_from_slice(b"MThd");
        f.extend_from_slice(&6u32.to_be_bytes());
        f.extend_from_slice(&[0, 0, 0, 1]);
        f.extend_from_slice(&480u16.to_be_bytes());
        f.extend_from_slice(b"MTrk");
        f.extend_from_slice(&(body.len() as u32).to_be_bytes());
        f.extend_from_slice(&body);
        let parsed = parse_midi(&f).unwrap();
        assert!(parsed.score.notes.is_empty());
        assert_eq!(parsed.warnings.unmatched_note_ons, 1);
    }

    #[test]
    fn single_note_round_trip() {
        let score = Score::new(
            vec![Note {
                onset: 240,
                duration: 480,
                pitch: 67,
                velocity: 99,
            }],
            480,
            vec![TempoEvent {
                tick: 0,
                us_per_quarter: 600_000,
            }],
            (4, 4),
        )
        .unwrap();
        let parsed = parse_midi(&write_midi(&score)).unwrap();
        assert_eq!(parsed.score, score);
    }

    #[test]
    fn chord_round_trip_preserves_identical_onsets() {
        let chord = vec![
            Note { onset: 0, duration: 480, pitch: 60, velocity: 80 },
            Note { onset: 0, duration: 480, pitch: 64, velocity: 80 },
            Note { onset: 0, duration: 480, pitch: 67, velocity: 80 },
        ];
        let score = Score::new(chord, 480, vec![], (4, 4)).unwrap();
        let parsed = parse_midi(&write_midi(&score)).unwrap();
        assert_eq!(parsed.score.notes.len(), 3);
        assert!(parsed.score.notes.iter().all(|n| n.onset == 0 && n.duration == 480));
        assert_eq!(parsed.score, score);
    }

    #[test]
    fn two_track_format1_merges_onto_one_timeline() {
        let t1: Vec<u8> = vec![0x00, 0x90, 60, 64, 0x60, 0x80, 60, 0x40, 0x00, 0xFF, 0x2F, 0x00];
        let t2: Vec<u8> = vec![0x30, 0x90, 72, 90, 0x60, 0x80, 72, 0x40, 0x00, 0xFF, 0x2F, 0x00];
        let mut f = Vec::new();
        f.extend_from_slice(b"MThd");
        f.extend_from_slice(&6u32.to_be_bytes());
        f.extend_from_slice(&1u16.to_be_bytes());
        f.extend_from_slice(&2u16.to_be_bytes());
        f.extend_from_slice(&96u16.to_be_bytes());
        for t in [&t1, &t2] {
            f.extend_from_slice(b"MTrk");
            f.extend_from_slice(&(t.len() as u32).to_be_bytes());
            f.extend_from_slice(t);
        }
        let parsed = parse_midi(&f).unwrap();
        assert_eq!(parsed.score.notes.len(), 2);
        assert_eq!(parsed.score.notes[0].onset, 0);
        assert_eq!(parsed.score.notes[1].onset, 0x30);
        assert_eq!(parsed.score.notes[1].pitch, 72);
    }

    #[test]
    fn overlapping_same_pitch_closes_at_second_onset() {
        let body: Vec<u8> = vec![
            0x00, 0x90, 60, 64, // on at 0
            0x30, 0x90, 60, 70, // on again at 48: first closes here
            0x30, 0x80, 60, 0x40, // off at 96
            0x00, 0xFF, 0x2F, 0x00,
        ];
        let mut f = Vec::new();
        f.extend_from_slice(b"MThd");
        f.extend_from_slice(&6u32.to_be_bytes());
        f.extend_from_slice(&[0, 0, 0, 1]);
        f.extend_from_slice(&96u16.to_be_bytes());
        f.extend_from_slice(b"MTrk");
        f.extend_from_slice(&(body.len() as u32).to_be_bytes());
        f.extend_from_slice(&body);
        let parsed = parse_midi(&f).unwrap();
        assert_eq!(parsed.score.notes.len(), 2);
        assert_eq!(parsed.score.notes[0].duration, 48);
        assert_eq!(parsed.score.notes[0].velocity, 64);
        assert_eq!(parsed.score.notes[1].onset, 48);
        assert_eq!(parsed.score.notes[1].duration, 48);
    }

    #[test]
    fn tempo_default_and_lookup() {
        let score = Score::empty(480);
        assert_eq!(score.us_per_quarter_at(1000), DEFAULT_US_PER_QUARTER);
        let score = Score::new(
            vec![],
            480,
            vec![
                TempoEvent { tick: 0, us_per_quarter: 500_000 },
                TempoEvent { tick: 960, us_per_quarter: 250_000 },
            ],
            (4, 4),
        )
        .unwrap();
        assert_eq!(score.us_per_quarter_at(0), 500_000);
        assert_eq!(score.us_per_quarter_at(959), 500_000);
        assert_eq!(score.us_per_quarter_at(960), 250_000);
    }
}
