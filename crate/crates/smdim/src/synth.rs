//! Deterministic toy corpus: scales, arpeggios, and two-voice patterns as
//! grid-aligned 4/4 scores, written out as MIDI files. Stands in for the
//! real datasets so the training and evaluation pipelines are self-contained.

use crate::midi::{write_midi, Note, Score, TempoEvent};
use crate::train::stream_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

const TPQ: u32 = 480;
const BAR: u64 = 4 * TPQ as u64;

const MAJOR: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];
const MINOR: [i32; 7] = [0, 2, 3, 5, 7, 8, 10];
const PENTATONIC: [i32; 5] = [0, 2, 4, 7, 9];

fn scale_degrees(kind: usize) -> &'static [i32] {
    match kind {
        0 => &MAJOR,
        1 => &MINOR,
        _ => &PENTATONIC,
    }
}

fn clamp_pitch(p: i32) -> u8 {
    p.clamp(24, 100) as u8
}

fn jitter_velocity(rng: &mut ChaCha8Rng, base: i32) -> u8 {
    (base + rng.gen_range(-8..=8)).clamp(20, 110) as u8
}

/// One deterministic piece: the (seed, index) pair fully determines the
/// score. Onsets and durations stay on the sixteenth-bar grid.
pub fn synth_piece(seed: u64, index: usize) -> Score {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0x53594e54, index as u64));
    let bars = 4u64;
    let root = rng.gen_range(48..=67);
    let base_vel = rng.gen_range(50..=90);
    let bpm = [80u32, 100, 120, 140][rng.gen_range(0..4)];
    let tempo = TempoEvent { tick: 0, us_per_quarter: 60_000_000 / bpm };

    let mut notes = Vec::new();
    match rng.gen_range(0..3) {
        // scale runs
        0 => {
            let degrees = scale_degrees(rng.gen_range(0..3));
            let step_ticks: u64 = if rng.gen_bool(0.5) { 480 } else { 240 };
            let descending = rng.gen_bool(0.5);
            let total = (bars * BAR / step_ticks) as usize;
            for i in 0..total {
                let deg = i % degrees.len();
                let octave = (i / degrees.len()) as i32 % 2;
                let offset = degrees[deg] + 12 * octave;
                let pitch = if descending { root - offset } else { root + offset };
                notes.push(Note {
                    onset: i as u64 * step_ticks,
                    duration: step_ticks,
                    pitch: clamp_pitch(pitch),
                    velocity: jitter_velocity(&mut rng, base_vel),
                });
            }
        }
        // arpeggios
        1 => {
            let chord: &[i32] = if rng.gen_bool(0.5) {
                &[0, 4, 7, 12]
            } else {
                &[0, 3, 7, 12]
            };
            let step_ticks = 240u64;
            let total = (bars * BAR / step_ticks) as usize;
            let up_down = rng.gen_bool(0.5);
            for i in 0..total {
                let idx = if up_down {
                    let cycle = 2 * chord.len() - 2;
                    let pos = i % cycle;
                    if pos < chord.len() { pos } else { cycle - pos }
                } else {
                    i % chord.len()
                };
                notes.push(Note {
                    onset: i as u64 * step_ticks,
                    duration: step_ticks,
                    pitch: clamp_pitch(root + chord[idx]),
                    velocity: jitter_velocity(&mut rng, base_vel),
                });
            }
        }
        // two voices: a stepping melody over held bass notes
        _ => {
            let degrees = scale_degrees(rng.gen_range(0..2));
            let mut deg: i32 = rng.gen_range(0..degrees.len() as i32);
            for i in 0..(bars * 2) as usize {
                // half-note melody
                deg = (deg + rng.gen_range(-2..=2)).rem_euclid(degrees.len() as i32);
                notes.push(Note {
                    onset: i as u64 * 960,
                    duration: 960,
                    pitch: clamp_pitch(root + 12 + degrees[deg as usize]),
                    velocity: jitter_velocity(&mut rng, base_vel),
                });
            }
            for b in 0..bars {
                notes.push(Note {
                    onset: b * BAR,
                    duration: BAR,
                    pitch: clamp_pitch(root - 12),
                    velocity: jitter_velocity(&mut rng, base_vel - 10),
                });
            }
        }
    }

    Score::new(notes, TPQ, vec![tempo], (4, 4)).expect("synth emits valid notes")
}

/// Generate `pieces` scores and write them as `piece_NNN.mid` under `dir`.
/// Byte-identical across runs with the same arguments.
pub fn synth_to_dir(dir: &Path, pieces: usize, seed: u64) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(pieces);
    for i in 0..pieces {
        let score = synth_piece(seed, i);
        let path = dir.join(format!("piece_{i:03}.mid"));
        fs::write(&path, write_midi(&score))?;
        paths.push(path);
    }
    Ok(paths)
}
