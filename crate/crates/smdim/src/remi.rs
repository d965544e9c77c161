//! REMI tokenization: Bar / Position / Tempo / Pitch / Velocity / Duration
//! events on a per-bar grid, plus the PAD and MASK specials the diffusion
//! process needs. Includes fixed-length windowing and the binary token cache.

use crate::midi::{Note, Score, TempoEvent};
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

pub type TokenId = u16;

/// Ticks-per-quarter used when decoding tokens back into a [`Score`].
pub const DECODE_TPQ: u32 = 480;

const TEMPO_MIN_BPM: f64 = 30.0;
const TEMPO_MAX_BPM: f64 = 300.0;

#[derive(Debug, Error)]
pub enum RemiError {
    #[error("token cache: bad magic (expected SMDM)")]
    BadMagic,
    #[error("token cache: unsupported version {0}")]
    BadVersion(u32),
    #[error("token cache: truncated file")]
    Truncated,
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: TokenId, size: usize },
    #[error("vocabulary hash mismatch: cache has {found:#018x}, expected {expected:#018x}")]
    VocabHashMismatch { expected: u64, found: u64 },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// Sizing knobs for the vocabulary layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabConfig {
    /// Grid positions per bar.
    pub grid: usize,
    pub velocity_bins: usize,
    pub duration_bins: usize,
    pub tempo_bins: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            grid: 16,
            velocity_bins: 32,
            duration_bins: 64,
            tempo_bins: 32,
        }
    }
}

/// A REMI token. `Position` is 1-based; `Duration` counts 1/16-bar units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    Bar,
    Position(usize),
    Tempo(usize),
    Pitch(u8),
    Velocity(usize),
    Duration(usize),
    Pad,
    Mask,
}

/// Token ↔ id bijection with the layout
/// `[Bar][Position 1..Q][Tempo][Pitch 0..127][Velocity][Duration][PAD][MASK]`.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    pub config: VocabConfig,
    size: usize,
    tempo_base: usize,
    pitch_base: usize,
    velocity_base: usize,
    duration_base: usize,
}

impl Vocabulary {
    pub fn new(config: VocabConfig) -> Self {
        assert!(config.grid > 0 && config.velocity_bins > 0);
        assert!(config.duration_bins > 0 && config.tempo_bins > 0);
        assert_eq!(128 % config.velocity_bins, 0, "velocity bins must divide 128");
        let tempo_base = 1 + config.grid;
        let pitch_base = tempo_base + config.tempo_bins;
        let velocity_base = pitch_base + 128;
        let duration_base = velocity_base + config.velocity_bins;
        let size = duration_base + config.duration_bins + 2;
        Vocabulary {
            config,
            size,
            tempo_base,
            pitch_base,
            velocity_base,
            duration_base,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mask_id(&self) -> TokenId {
        (self.size - 1) as TokenId
    }

    pub fn pad_id(&self) -> TokenId {
        (self.size - 2) as TokenId
    }

    pub fn id(&self, token: Token) -> TokenId {
        let id = match token {
            Token::Bar => 0,
            Token::Position(p) => {
                assert!(p >= 1 && p <= self.config.grid, "position {p} out of range");
                p
            }
            Token::Tempo(b) => {
                assert!(b < self.config.tempo_bins);
                self.tempo_base + b
            }
            Token::Pitch(p) => self.pitch_base + p as usize,
            Token::Velocity(b) => {
                assert!(b < self.config.velocity_bins);
                self.velocity_base + b
            }
            Token::Duration(u) => {
                assert!(u >= 1 && u <= self.config.duration_bins, "duration {u} out of range");
                self.duration_base + (u - 1)
            }
            Token::Pad => self.size - 2,
            Token::Mask => self.size - 1,
        };
        id as TokenId
    }

    pub fn token(&self, id: TokenId) -> Result<Token, RemiError> {
        let i = id as usize;
        if i >= self.size {
            return Err(RemiError::IdOutOfRange { id, size: self.size });
        }
        Ok(if i == 0 {
            Token::Bar
        } else if i < self.tempo_base {
            Token::Position(i)
        } else if i < self.pitch_base {
            Token::Tempo(i - self.tempo_base)
        } else if i < self.velocity_base {
            Token::Pitch((i - self.pitch_base) as u8)
        } else if i < self.duration_base {
            Token::Velocity(i - self.velocity_base)
        } else if i < self.size - 2 {
            Token::Duration(i - self.duration_base + 1)
        } else if i == self.size - 2 {
            Token::Pad
        } else {
            Token::Mask
        })
    }

    /// Stable 64-bit FNV-1a over the layout-defining fields; embedded in
    /// caches and checkpoints to reject mixing incompatible vocabularies.
    pub fn config_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            for byte in v.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(1); // layout version
        eat(self.config.grid as u64);
        eat(self.config.velocity_bins as u64);
        eat(self.config.duration_bins as u64);
        eat(self.config.tempo_bins as u64);
        h
    }

    pub fn velocity_to_bin(&self, velocity: u8) -> usize {
        let width = 128 / self.config.velocity_bins;
        (velocity as usize / width).min(self.config.velocity_bins - 1)
    }

    pub fn bin_to_velocity(&self, bin: usize) -> u8 {
        let width = 128 / self.config.velocity_bins;
        ((bin * width + width / 2).clamp(1, 127)) as u8
    }

    /// Log-spaced tempo bins over 30–300 BPM.
    pub fn bpm_to_bin(&self, bpm: f64) -> usize {
        let clamped = bpm.clamp(TEMPO_MIN_BPM, TEMPO_MAX_BPM);
        let frac = (clamped.ln() - TEMPO_MIN_BPM.ln()) / (TEMPO_MAX_BPM.ln() - TEMPO_MIN_BPM.ln());
        ((frac * (self.config.tempo_bins - 1) as f64).round() as usize)
            .min(self.config.tempo_bins - 1)
    }

    pub fn bin_to_bpm(&self, bin: usize) -> f64 {
        let frac = bin as f64 / (self.config.tempo_bins - 1) as f64;
        (TEMPO_MIN_BPM.ln() + frac * (TEMPO_MAX_BPM.ln() - TEMPO_MIN_BPM.ln())).exp()
    }
}

/// An id sequence plus a tag describing where it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub source: String,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, source: impl Into<String>) -> Self {
        TokenSequence { ids, source: source.into() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

// ── Encoding ────────────────────────────────────────────────────────

/// Encode a score: per bar a Bar token, per occupied grid slot a Position
/// token followed by the slot's tempo change (if any) and its notes as
/// Pitch/Velocity/Duration triples. Onsets snap to the nearest of the Q grid
/// slots; durations clamp to `[1, duration_bins]` sixteenth-bar units.
pub fn encode(score: &Score, vocab: &Vocabulary) -> TokenSequence {
    let q = vocab.config.grid;
    let bar_ticks = score.ticks_per_bar() as f64;
    let slot_of = |tick: u64| (tick as f64 * q as f64 / bar_ticks).round() as u64;
    let duration_unit = bar_ticks / 16.0;

    // slot → notes (score order is already (onset, pitch))
    let mut note_slots: Vec<(u64, &Note)> = score
        .notes
        .iter()
        .map(|n| (slot_of(n.onset), n))
        .collect();
    note_slots.sort_by_key(|(slot, n)| (*slot, n.pitch, n.duration, n.velocity));

    // slot → tempo bin (last event in a slot wins)
    let mut tempo_slots: Vec<(u64, usize)> = Vec::new();
    for ev in &score.tempo_events {
        let bpm = 60_000_000.0 / ev.us_per_quarter as f64;
        let slot = slot_of(ev.tick);
        let bin = vocab.bpm_to_bin(bpm);
        match tempo_slots.last_mut() {
            Some((s, b)) if *s == slot => *b = bin,
            _ => tempo_slots.push((slot, bin)),
        }
    }

    let mut ids = Vec::new();
    let mut current_bar: i64 = -1;
    let mut ni = 0usize;
    let mut ti = 0usize;
    while ni < note_slots.len() || ti < tempo_slots.len() {
        let next_note = note_slots.get(ni).map(|(s, _)| *s);
        let next_tempo = tempo_slots.get(ti).map(|(s, _)| *s);
        let slot = match (next_note, next_tempo) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => unreachable!(),
        };
        let bar = (slot / q as u64) as i64;
        while current_bar < bar {
            ids.push(vocab.id(Token::Bar));
            current_bar += 1;
        }
        ids.push(vocab.id(Token::Position((slot % q as u64) as usize + 1)));
        if next_tempo == Some(slot) {
            ids.push(vocab.id(Token::Tempo(tempo_slots[ti].1)));
            ti += 1;
        }
        while ni < note_slots.len() && note_slots[ni].0 == slot {
            let n = note_slots[ni].1;
            let units = ((n.duration as f64 / duration_unit).round() as usize)
                .clamp(1, vocab.config.duration_bins);
            ids.push(vocab.id(Token::Pitch(n.pitch)));
            ids.push(vocab.id(Token::Velocity(vocab.velocity_to_bin(n.velocity))));
            ids.push(vocab.id(Token::Duration(units)));
            ni += 1;
        }
    }
    TokenSequence::new(ids, "encoded")
}

// ── Decoding ────────────────────────────────────────────────────────

/// Decode outcome: the reconstructed score plus a tally of tokens that did
/// not fit the grammar and were skipped.
#[derive(Debug)]
pub struct Decoded {
    pub score: Score,
    pub skipped: usize,
}

/// Total, fault-tolerant decoder: a stateful scan where Bar advances the bar
/// counter, Position moves the cursor, and a Pitch/Velocity/Duration triple
/// emits a note. Anything else (including incomplete triples) is skipped and
/// counted. Output is a 4/4 score at [`DECODE_TPQ`].
pub fn decode(tokens: &TokenSequence, vocab: &Vocabulary) -> Decoded {
    let q = vocab.config.grid as u64;
    let bar_ticks = (DECODE_TPQ as u64) * 4;
    let slot_ticks = bar_ticks / q;
    let duration_unit = bar_ticks / 16;

    let mut bar: i64 = -1;
    let mut pos_slot: u64 = 0;
    let mut skipped = 0usize;
    let mut notes = Vec::new();
    let mut tempo_events: Vec<TempoEvent> = Vec::new();

    let cursor_tick = |bar: i64, pos_slot: u64| (bar.max(0) as u64) * bar_ticks + pos_slot * slot_ticks;

    let mut i = 0usize;
    while i < tokens.ids.len() {
        let tok = match vocab.token(tokens.ids[i]) {
            Ok(t) => t,
            Err(_) => {
                skipped += 1;
                i += 1;
                continue;
            }
        };
        match tok {
            Token::Bar => {
                bar += 1;
                pos_slot = 0;
                i += 1;
            }
            Token::Position(p) => {
                if bar < 0 {
                    bar = 0;
                }
                pos_slot = (p as u64 - 1).min(q - 1);
                i += 1;
            }
            Token::Tempo(bin) => {
                let bpm = vocab.bin_to_bpm(bin);
                let uspq = (60_000_000.0 / bpm).round() as u32;
                let tick = cursor_tick(bar, pos_slot);
                match tempo_events.last_mut() {
                    Some(ev) if ev.tick == tick => ev.us_per_quarter = uspq,
                    _ => tempo_events.push(TempoEvent { tick, us_per_quarter: uspq }),
                }
                i += 1;
            }
            Token::Pitch(pitch) => {
                let vel = tokens.ids.get(i + 1).and_then(|&id| match vocab.token(id) {
                    Ok(Token::Velocity(b)) => Some(b),
                    _ => None,
                });
                let dur = tokens.ids.get(i + 2).and_then(|&id| match vocab.token(id) {
                    Ok(Token::Duration(u)) => Some(u),
                    _ => None,
                });
                match (vel, dur) {
                    (Some(vbin), Some(units)) => {
                        notes.push(Note {
                            onset: cursor_tick(bar, pos_slot),
                            duration: units as u64 * duration_unit,
                            pitch,
                            velocity: vocab.bin_to_velocity(vbin),
                        });
                        i += 3;
                    }
                    _ => {
                        skipped += 1;
                        i += 1;
                    }
                }
            }
            Token::Pad => {
                i += 1;
            }
            Token::Velocity(_) | Token::Duration(_) | Token::Mask => {
                skipped += 1;
                i += 1;
            }
        }
    }

    tempo_events.sort_by_key(|e| e.tick);
    let score = Score::new(notes, DECODE_TPQ, tempo_events, (4, 4))
        .expect("decoder emits only in-range notes");
    Decoded { score, skipped }
}

// ── Windowing ───────────────────────────────────────────────────────

/// Split into windows of exactly `len` ids, preferring to cut just before a
/// Bar token; every window is right-padded with PAD, and windows with fewer
/// than `len/4` real tokens are dropped.
pub fn window(tokens: &TokenSequence, len: usize, vocab: &Vocabulary) -> Vec<TokenSequence> {
    assert!(len > 0);
    let bar_id = vocab.id(Token::Bar);
    let pad_id = vocab.pad_id();
    let ids = &tokens.ids;
    let mut out = Vec::new();
    let mut pos = 0usize;
    let mut index = 0usize;
    while pos < ids.len() {
        let remaining = ids.len() - pos;
        let cut = if remaining <= len {
            ids.len()
        } else {
            let hard = pos + len;
            // last Bar strictly after the window start, so we always advance
            let bar_cut = (pos + 1..=hard).rev().find(|&i| ids[i] == bar_id);
            bar_cut.unwrap_or(hard)
        };
        let mut w = ids[pos..cut].to_vec();
        let real = w.len();
        w.resize(len, pad_id);
        if real * 4 >= len {
            out.push(TokenSequence::new(w, format!("{}[{}]", tokens.source, index)));
            index += 1;
        }
        pos = cut;
    }
    out
}

// ── Token cache file ────────────────────────────────────────────────

const CACHE_MAGIC: &[u8; 4] = b"SMDM";
const CACHE_VERSION: u32 = 1;

/// Write sequences to the binary cache: magic "SMDM", version, vocabulary
/// hash, count, then per-sequence u32 length + u16 ids (all little-endian).
pub fn write_cache(
    path: &Path,
    vocab_hash: u64,
    sequences: &[TokenSequence],
) -> Result<(), RemiError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&vocab_hash.to_le_bytes());
    buf.extend_from_slice(&(sequences.len() as u64).to_le_bytes());
    for seq in sequences {
        buf.extend_from_slice(&(seq.ids.len() as u32).to_le_bytes());
        for &id in &seq.ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read a token cache, returning its vocabulary hash and the sequences.
pub fn read_cache(path: &Path) -> Result<(u64, Vec<TokenSequence>), RemiError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let need = |ok: bool| if ok { Ok(()) } else { Err(RemiError::Truncated) };

    need(bytes.len() >= 24)?;
    if &bytes[0..4] != CACHE_MAGIC {
        return Err(RemiError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(RemiError::BadVersion(version));
    }
    let hash = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();

    let mut sequences = Vec::with_capacity(count);
    let mut pos = 24usize;
    for s in 0..count {
        need(pos + 4 <= bytes.len())?;
        let n = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        need(pos + 2 * n <= bytes.len())?;
        let mut ids = Vec::with_capacity(n);
        for i in 0..n {
            ids.push(u16::from_le_bytes(
                bytes[pos + 2 * i..pos + 2 * i + 2].try_into().unwrap(),
            ));
        }
        pos += 2 * n;
        sequences.push(TokenSequence::new(ids, format!("{stem}#{s}")));
    }
    Ok((hash, sequences))
}
