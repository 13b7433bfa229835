//! Waveform I/O and the deterministic stub audio feature extractor.
//!
//! Waveforms are mono 16-bit PCM RIFF files at 16 kHz. Features are
//! per-frame log filterbank energies (640-sample window and hop, one frame
//! per 25 fps video frame) projected to `D_a` dimensions by a frozen seeded
//! matrix, standing in for a large pretrained speech encoder. Real features
//! can be dropped in as files with the same shape.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::types::AudioFeatureSequence;

/// Sample rate of every waveform in the pipeline.
pub const SAMPLE_RATE: u32 = 16_000;
/// Window and hop length in samples; 16000 / 640 = 25 feature frames per second.
pub const HOP: usize = 640;
/// Number of filterbank bands measured per frame.
pub const NUM_BANDS: usize = 16;
/// Default stub feature dimension.
pub const FEATURE_DIM: usize = 64;

/// Fixed seed of the filterbank-to-feature projection. Part of the feature
/// format: features must be comparable across corpora and training runs.
const PROJECTION_SEED: u64 = 0x57_0B_FE_A7;

/// Write a mono 16-bit PCM WAV at 16 kHz; samples are clamped to [-1, 1].
pub fn write_wav(path: &Path, samples: &[f32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let data_len = (samples.len() * 2) as u32;
    let byte_rate = SAMPLE_RATE * 2;
    w.write_all(b"RIFF")?;
    w.write_all(&(36 + data_len).to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&1u16.to_le_bytes())?; // PCM
    w.write_all(&1u16.to_le_bytes())?; // mono
    w.write_all(&SAMPLE_RATE.to_le_bytes())?;
    w.write_all(&byte_rate.to_le_bytes())?;
    w.write_all(&2u16.to_le_bytes())?; // block align
    w.write_all(&16u16.to_le_bytes())?; // bits per sample
    w.write_all(b"data")?;
    w.write_all(&data_len.to_le_bytes())?;
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_all(&q.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a mono 16-bit PCM WAV at 16 kHz back into normalized `f32` samples.
pub fn read_wav(path: &Path) -> Result<Vec<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 12];
    r.read_exact(&mut header)?;
    if &header[0..4] != b"RIFF" || &header[8..12] != b"WAVE" {
        return Err(Error::Format(format!(
            "'{}' is not a RIFF/WAVE file",
            path.display()
        )));
    }
    let mut fmt_ok = false;
    loop {
        let mut chunk = [0u8; 8];
        if r.read_exact(&mut chunk).is_err() {
            return Err(Error::Format("wav file has no data chunk".into()));
        }
        let size = u32::from_le_bytes(chunk[4..8].try_into().unwrap()) as usize;
        match &chunk[0..4] {
            b"fmt " => {
                let mut fmt = vec![0u8; size];
                r.read_exact(&mut fmt)?;
                let format = u16::from_le_bytes(fmt[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(fmt[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(fmt[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(fmt[14..16].try_into().unwrap());
                if format != 1 || channels != 1 || bits != 16 {
                    return Err(Error::Format(
                        "expected mono 16-bit PCM wav".into(),
                    ));
                }
                if rate != SAMPLE_RATE {
                    return Err(Error::Format(format!(
                        "expected {SAMPLE_RATE} Hz wav, got {rate}"
                    )));
                }
                fmt_ok = true;
            }
            b"data" => {
                if !fmt_ok {
                    return Err(Error::Format("wav data chunk before fmt".into()));
                }
                let mut raw = vec![0u8; size];
                r.read_exact(&mut raw)?;
                let samples = raw
                    .chunks_exact(2)
                    .map(|b| f32::from(i16::from_le_bytes([b[0], b[1]])) / 32767.0)
                    .collect();
                return Ok(samples);
            }
            _ => {
                // Skip unknown chunks.
                let mut skip = vec![0u8; size];
                r.read_exact(&mut skip)?;
            }
        }
    }
}

/// Log filterbank energies for one 640-sample window.
///
/// Band center frequencies are geometrically spaced over 100 Hz..6 kHz and
/// measured with a Goertzel-style windowed DFT probe.
fn band_energies(window: &[f32]) -> [f64; NUM_BANDS] {
    let mut out = [0.0f64; NUM_BANDS];
    let n = window.len() as f64;
    let f_lo = 100.0f64;
    let f_hi = 6000.0f64;
    for (b, slot) in out.iter_mut().enumerate() {
        let frac = b as f64 / (NUM_BANDS - 1) as f64;
        let freq = f_lo * (f_hi / f_lo).powf(frac);
        let omega = 2.0 * std::f64::consts::PI * freq / f64::from(SAMPLE_RATE);
        let mut re = 0.0f64;
        let mut im = 0.0f64;
        for (i, &s) in window.iter().enumerate() {
            // Hann window keeps band estimates local.
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos();
            let x = f64::from(s) * w;
            let phase = omega * i as f64;
            re += x * phase.cos();
            im -= x * phase.sin();
        }
        *slot = (re * re + im * im) / n;
    }
    out
}

/// Frozen projection matrix from band space to feature space.
fn projection(dim: usize) -> Array2<f32> {
    let mut rng = substream(PROJECTION_SEED, "stub-feature-projection");
    let scale = 1.0 / (NUM_BANDS as f32).sqrt();
    Array2::from_shape_fn((NUM_BANDS, dim), |_| {
        rand::Rng::gen_range(&mut rng, -1.0f32..1.0) * scale
    })
}

/// Extract per-frame stub features aligned to 25 fps video frames.
pub fn features_from_waveform(samples: &[f32], dim: usize, fps: f32) -> Result<AudioFeatureSequence> {
    let frames = samples.len() / HOP;
    if frames == 0 {
        return Err(Error::InsufficientData(
            "waveform shorter than one feature window".into(),
        ));
    }
    let proj = projection(dim);
    let mut features = Array2::<f32>::zeros((frames, dim));
    for t in 0..frames {
        let window = &samples[t * HOP..(t + 1) * HOP];
        let bands = band_energies(window);
        // Normalize log energies to O(1) before mixing.
        let normed: Vec<f32> = bands
            .iter()
            .map(|&e| (((e + 1e-6).ln() + 6.0) / 6.0) as f32)
            .collect();
        for d in 0..dim {
            let mut acc = 0.0f32;
            for (b, &v) in normed.iter().enumerate() {
                acc += v * proj[[b, d]];
            }
            features[[t, d]] = acc;
        }
    }
    AudioFeatureSequence::new(features, fps)
}

/// Per-frame onset strength: half-wave rectified difference of frame RMS
/// energy. Frame 0 has strength 0.
pub fn onset_envelope(samples: &[f32]) -> Vec<f32> {
    let frames = samples.len() / HOP;
    let mut energy = Vec::with_capacity(frames);
    for t in 0..frames {
        let window = &samples[t * HOP..(t + 1) * HOP];
        let e: f64 = window.iter().map(|&s| f64::from(s) * f64::from(s)).sum();
        energy.push((e / HOP as f64).sqrt() as f32);
    }
    let mut onset = vec![0.0f32; frames];
    for t in 1..frames {
        onset[t] = (energy[t] - energy[t - 1]).max(0.0);
    }
    onset
}

/// Frame RMS energy envelope.
pub fn energy_envelope(samples: &[f32]) -> Vec<f32> {
    let frames = samples.len() / HOP;
    (0..frames)
        .map(|t| {
            let window = &samples[t * HOP..(t + 1) * HOP];
            let e: f64 = window.iter().map(|&s| f64::from(s) * f64::from(s)).sum();
            (e / HOP as f64).sqrt() as f32
        })
        .collect()
}
