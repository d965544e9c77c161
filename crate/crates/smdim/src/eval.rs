//! Overlap-area (OA) evaluation: seven per-score musical attributes, the
//! intra-/inter-set pairwise distances over them, Gaussian KDEs of those
//! distance samples, and the overlap integral ∫min(pdfA, pdfB) with a
//! bootstrap spread.

use crate::midi::Score;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{side} set has {got} scores; at least {need} required")]
    SetTooSmall { side: &'static str, need: usize, got: usize },
    #[error("need at least 2 values for a density estimate, got {0}")]
    TooFewValues(usize),
    #[error("intra-set distances need at least 2 items, got {0}")]
    IntraSetTooSmall(usize),
}

/// The seven attributes reported by the OA evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attribute {
    UsedPitch,
    Ioi,
    PitchClassHist,
    PitchRange,
    Velocity,
    NoteDuration,
    NoteDensity,
}

pub const ATTRIBUTES: [Attribute; 7] = [
    Attribute::UsedPitch,
    Attribute::Ioi,
    Attribute::PitchClassHist,
    Attribute::PitchRange,
    Attribute::Velocity,
    Attribute::NoteDuration,
    Attribute::NoteDensity,
];

impl Attribute {
    pub fn name(&self) -> &'static str {
        match self {
            Attribute::UsedPitch => "used_pitch",
            Attribute::Ioi => "ioi",
            Attribute::PitchClassHist => "pitch_class_hist",
            Attribute::PitchRange => "pitch_range",
            Attribute::Velocity => "velocity",
            Attribute::NoteDuration => "note_duration",
            Attribute::NoteDensity => "note_density",
        }
    }
}

/// Per-score attribute values. Scalars are in natural units (beats, MIDI
/// numbers, notes/bar); the pitch-class histogram sums to 1 unless the score
/// is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeVector {
    pub used_pitch: f64,
    /// Mean interval between consecutive distinct onsets, in beats.
    pub ioi: f64,
    pub pitch_class_hist: [f64; 12],
    pub pitch_range: f64,
    pub velocity: f64,
    /// Mean note duration in beats.
    pub note_duration: f64,
    /// Notes per bar over the onset span.
    pub note_density: f64,
    /// True for an empty score (all-zero vector).
    pub degenerate: bool,
}

/// Compute the seven attributes of one score.
pub fn extract_attributes(score: &Score) -> AttributeVector {
    if score.notes.is_empty() {
        return AttributeVector {
            used_pitch: 0.0,
            ioi: 0.0,
            pitch_class_hist: [0.0; 12],
            pitch_range: 0.0,
            velocity: 0.0,
            note_duration: 0.0,
            note_density: 0.0,
            degenerate: true,
        };
    }
    let tpq = score.ticks_per_quarter as f64;
    let mut pitches_seen = [false; 128];
    let mut hist = [0.0f64; 12];
    let (mut min_pitch, mut max_pitch) = (127u8, 0u8);
    let mut velocity_sum = 0.0;
    let mut duration_sum = 0.0;
    for n in &score.notes {
        pitches_seen[n.pitch as usize] = true;
        hist[(n.pitch % 12) as usize] += 1.0;
        min_pitch = min_pitch.min(n.pitch);
        max_pitch = max_pitch.max(n.pitch);
        velocity_sum += n.velocity as f64;
        duration_sum += n.duration as f64 / tpq;
    }
    let count = score.notes.len() as f64;
    for h in &mut hist {
        *h /= count;
    }

    // mean interval between consecutive distinct onsets
    let mut onsets: Vec<u64> = score.notes.iter().map(|n| n.onset).collect();
    onsets.dedup();
    let ioi = if onsets.len() >= 2 {
        let span: f64 = (onsets[onsets.len() - 1] - onsets[0]) as f64 / tpq;
        span / (onsets.len() - 1) as f64
    } else {
        0.0
    };

    let bar_ticks = score.ticks_per_bar();
    let last_onset = score.notes.last().map(|n| n.onset).unwrap_or(0);
    let bars = (last_onset / bar_ticks + 1) as f64;

    AttributeVector {
        used_pitch: pitches_seen.iter().filter(|&&p| p).count() as f64,
        ioi,
        pitch_class_hist: hist,
        pitch_range: (max_pitch - min_pitch) as f64,
        velocity: velocity_sum / count,
        note_duration: duration_sum / count,
        note_density: count / bars,
        degenerate: false,
    }
}

fn distance(a: &AttributeVector, b: &AttributeVector, attr: Attribute) -> f64 {
    match attr {
        Attribute::PitchClassHist => a
            .pitch_class_hist
            .iter()
            .zip(&b.pitch_class_hist)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
        Attribute::UsedPitch => (a.used_pitch - b.used_pitch).abs(),
        Attribute::Ioi => (a.ioi - b.ioi).abs(),
        Attribute::PitchRange => (a.pitch_range - b.pitch_range).abs(),
        Attribute::Velocity => (a.velocity - b.velocity).abs(),
        Attribute::NoteDuration => (a.note_duration - b.note_duration).abs(),
        Attribute::NoteDensity => (a.note_density - b.note_density).abs(),
    }
}

/// Pair selection for [`pairwise_distances`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    /// All unordered pairs within `set_a` (needs |set_a| ≥ 2).
    Intra,
    /// All cross pairs between `set_a` and `set_b`.
    Inter,
}

pub fn pairwise_distances(
    set_a: &[AttributeVector],
    set_b: &[AttributeVector],
    attr: Attribute,
    mode: PairMode,
) -> Result<Vec<f64>, EvalError> {
    match mode {
        PairMode::Intra => {
            if set_a.len() < 2 {
                return Err(EvalError::IntraSetTooSmall(set_a.len()));
            }
            let mut out = Vec::with_capacity(set_a.len() * (set_a.len() - 1) / 2);
            for i in 0..set_a.len() {
                for j in i + 1..set_a.len() {
                    out.push(distance(&set_a[i], &set_a[j], attr));
                }
            }
            Ok(out)
        }
        PairMode::Inter => {
            if set_a.is_empty() || set_b.is_empty() {
                return Err(EvalError::SetTooSmall {
                    side: if set_a.is_empty() { "first" } else { "second" },
                    need: 1,
                    got: 0,
                });
            }
            let mut out = Vec::with_capacity(set_a.len() * set_b.len());
            for a in set_a {
                for b in set_b {
                    out.push(distance(a, b, attr));
                }
            }
            Ok(out)
        }
    }
}

/// Bandwidth selection for [`kde_pdf`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Scott's rule, 1.06·σ̂·n^(−1/5), with the degenerate floor.
    Auto,
    Fixed(f64),
}

/// A density sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Pdf {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

pub const KDE_GRID_POINTS: usize = 512;

fn scott_bandwidth(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sigma = var.sqrt();
    let (min, max) = min_max(values);
    // floor keeps all-equal samples integrable as a narrow spike
    let floor = 1e-3 * ((max - min) + 1.0);
    (1.06 * sigma * n.powf(-0.2)).max(floor)
}

fn min_max(values: &[f64]) -> (f64, f64) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        min = min.min(v);
        max = max.max(v);
    }
    (min, max)
}

fn resolve_bandwidth(values: &[f64], bandwidth: Bandwidth) -> f64 {
    match bandwidth {
        Bandwidth::Auto => scott_bandwidth(values),
        Bandwidth::Fixed(b) => b,
    }
}

fn kde_on_grid(values: &[f64], bw: f64, grid: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (values.len() as f64 * bw * (2.0 * std::f64::consts::PI).sqrt());
    let mut density: Vec<f64> = grid
        .iter()
        .map(|&g| {
            values
                .iter()
                .map(|&v| {
                    let z = (g - v) / bw;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect();
    // renormalize over the evaluation window so the ±3-bandwidth truncation
    // cannot push the integral below the 1e-3 contract
    let integral = trapezoid(grid, &density);
    if integral > 0.0 {
        for d in &mut density {
            *d /= integral;
        }
    }
    density
}

fn uniform_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|i| lo + i as f64 * step).collect()
}

/// Gaussian KDE on a uniform 512-point grid spanning the sample range ±3
/// bandwidths.
pub fn kde_pdf(values: &[f64], bandwidth: Bandwidth) -> Result<Pdf, EvalError> {
    if values.len() < 2 {
        return Err(EvalError::TooFewValues(values.len()));
    }
    let bw = resolve_bandwidth(values, bandwidth);
    let (min, max) = min_max(values);
    let grid = uniform_grid(min - 3.0 * bw, max + 3.0 * bw, KDE_GRID_POINTS);
    let density = kde_on_grid(values, bw, &grid);
    Ok(Pdf { grid, density })
}

fn trapezoid(grid: &[f64], f: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 1..grid.len() {
        acc += 0.5 * (f[i] + f[i - 1]) * (grid[i] - grid[i - 1]);
    }
    acc
}

fn interp(pdf: &Pdf, x: f64) -> f64 {
    let g = &pdf.grid;
    if x < g[0] || x > g[g.len() - 1] {
        return 0.0;
    }
    let step = g[1] - g[0];
    let idx = ((x - g[0]) / step).floor() as usize;
    let idx = idx.min(g.len() - 2);
    let frac = (x - g[idx]) / step;
    pdf.density[idx] * (1.0 - frac) + pdf.density[idx + 1] * frac
}

/// OA = ∫ min(pdfA, pdfB). Densities on different grids are linearly
/// resampled onto a union grid (zero outside their support).
pub fn overlap_area(a: &Pdf, b: &Pdf) -> f64 {
    if a.grid == b.grid {
        let mins: Vec<f64> = a
            .density
            .iter()
            .zip(&b.density)
            .map(|(x, y)| x.min(*y))
            .collect();
        return trapezoid(&a.grid, &mins).clamp(0.0, 1.0);
    }
    let lo = a.grid[0].min(b.grid[0]);
    let hi = a.grid[a.grid.len() - 1].max(b.grid[b.grid.len() - 1]);
    let grid = uniform_grid(lo, hi, 2 * KDE_GRID_POINTS);
    let mins: Vec<f64> = grid
        .iter()
        .map(|&x| interp(a, x).min(interp(b, x)))
        .collect();
    trapezoid(&grid, &mins).clamp(0.0, 1.0)
}

/// OA from two distance samples on a common grid spanning the union range
/// ±3 of the larger bandwidth.
pub fn overlap_from_samples(a_vals: &[f64], b_vals: &[f64]) -> Result<f64, EvalError> {
    overlap_with_bandwidths(a_vals, b_vals, Bandwidth::Auto, Bandwidth::Auto)
}

fn overlap_with_bandwidths(
    a_vals: &[f64],
    b_vals: &[f64],
    a_bw: Bandwidth,
    b_bw: Bandwidth,
) -> Result<f64, EvalError> {
    if a_vals.len() < 2 {
        return Err(EvalError::TooFewValues(a_vals.len()));
    }
    if b_vals.len() < 2 {
        return Err(EvalError::TooFewValues(b_vals.len()));
    }
    let bw_a = resolve_bandwidth(a_vals, a_bw);
    let bw_b = resolve_bandwidth(b_vals, b_bw);
    let pad = 3.0 * bw_a.max(bw_b);
    let (a_min, a_max) = min_max(a_vals);
    let (b_min, b_max) = min_max(b_vals);
    let grid = uniform_grid(a_min.min(b_min) - pad, a_max.max(b_max) + pad, KDE_GRID_POINTS);
    let da = kde_on_grid(a_vals, bw_a, &grid);
    let db = kde_on_grid(b_vals, bw_b, &grid);
    let mins: Vec<f64> = da.iter().zip(&db).map(|(x, y)| x.min(*y)).collect();
    Ok(trapezoid(&grid, &mins).clamp(0.0, 1.0))
}

/// One attribute's line in the report.
#[derive(Debug, Clone, PartialEq)]
pub struct OaEntry {
    pub attribute: Attribute,
    pub oa: f64,
    pub std: f64,
}

/// The seven per-attribute OAs plus their unweighted average, each with a
/// bootstrap standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct OaReport {
    pub entries: Vec<OaEntry>,
    pub average: f64,
    pub average_std: f64,
}

pub const BOOTSTRAP_RESAMPLES: usize = 20;

fn oa_for_sets(
    gen: &[AttributeVector],
    reference: &[AttributeVector],
    attr: Attribute,
) -> Result<f64, EvalError> {
    let intra_ref = pairwise_distances(reference, &[], attr, PairMode::Intra)?;
    let inter = pairwise_distances(gen, reference, attr, PairMode::Inter)?;
    // one common bandwidth, derived from the reference side: a per-sample
    // Scott factor n^(−1/5) would make the OA depend on the multiset size,
    // breaking invariance under duplication of the generated set
    let bw = Bandwidth::Fixed(scott_bandwidth(&intra_ref));
    overlap_with_bandwidths(&intra_ref, &inter, bw, bw)
}

/// Full OA evaluation: per attribute the OA between the KDE of
/// intra-reference distances and the KDE of inter-set distances, a bootstrap
/// (20 resamples of both score sets) for the ± spreads, and the average.
pub fn evaluate_oa(
    generated: &[Score],
    reference: &[Score],
    seed: u64,
) -> Result<OaReport, EvalError> {
    if generated.len() < 4 {
        return Err(EvalError::SetTooSmall { side: "generated", need: 4, got: generated.len() });
    }
    if reference.len() < 4 {
        return Err(EvalError::SetTooSmall { side: "reference", need: 4, got: reference.len() });
    }
    let gen_attrs: Vec<AttributeVector> = generated.iter().map(extract_attributes).collect();
    let ref_attrs: Vec<AttributeVector> = reference.iter().map(extract_attributes).collect();

    let mut entries = Vec::with_capacity(ATTRIBUTES.len());
    let mut oas = Vec::with_capacity(ATTRIBUTES.len());
    for attr in ATTRIBUTES {
        let oa = oa_for_sets(&gen_attrs, &ref_attrs, attr)?;
        oas.push(oa);
        entries.push(OaEntry { attribute: attr, oa, std: 0.0 });
    }
    let average = oas.iter().sum::<f64>() / oas.len() as f64;

    // bootstrap both sets with replacement
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_attr: Vec<Vec<f64>> = vec![Vec::with_capacity(BOOTSTRAP_RESAMPLES); ATTRIBUTES.len()];
    let mut averages = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let g: Vec<AttributeVector> = (0..gen_attrs.len())
            .map(|_| gen_attrs[rng.gen_range(0..gen_attrs.len())].clone())
            .collect();
        let r: Vec<AttributeVector> = (0..ref_attrs.len())
            .map(|_| ref_attrs[rng.gen_range(0..ref_attrs.len())].clone())
            .collect();
        let mut sum = 0.0;
        for (ai, attr) in ATTRIBUTES.iter().enumerate() {
            let oa = oa_for_sets(&g, &r, *attr)?;
            per_attr[ai].push(oa);
            sum += oa;
        }
        averages.push(sum / ATTRIBUTES.len() as f64);
    }
    let sample_std = |vals: &[f64]| {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    for (entry, samples) in entries.iter_mut().zip(&per_attr) {
        entry.std = sample_std(samples);
    }

    Ok(OaReport {
        entries,
        average,
        average_std: sample_std(&averages),
    })
}

impl OaReport {
    /// CSV rows `attribute,oa,std` (plus the average), prefixed by comment
    /// lines pinning the attribute definitions this report used.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("# overlap area between intra-reference and inter-set attribute-distance densities\n");
        out.push_str("# definitions: used_pitch = distinct MIDI pitches; ioi = mean gap between consecutive distinct onsets (beats);\n");
        out.push_str("# pitch_class_hist = normalized pitch-class counts (Euclidean distance); pitch_range = max-min pitch (semitones);\n");
        out.push_str("# velocity = mean MIDI velocity; note_duration = mean duration (beats); note_density = notes per bar over the onset span\n");
        out.push_str("attribute,oa,std\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{:.6},{:.6}", e.attribute.name(), e.oa, e.std);
        }
        let _ = writeln!(out, "average,{:.6},{:.6}", self.average, self.average_std);
        out
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<18} {:>8} {:>8}", "attribute", "oa", "std");
        for e in &self.entries {
            let _ = writeln!(out, "{:<18} {:>8.4} {:>8.4}", e.attribute.name(), e.oa, e.std);
        }
        let _ = writeln!(out, "{:<18} {:>8.4} {:>8.4}", "average", self.average, self.average_std);
        out
    }
}
