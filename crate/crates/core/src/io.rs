//! File formats for corpora, features, and intensity traces.
//!
//! Sequence-valued data uses line-delimited JSON (one clip per line);
//! numbers round-trip exactly through the shortest-representation float
//! encoding. Single documents (normalization spec, metric reports, configs)
//! are plain JSON.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::NormalizationSpec;
use crate::types::{AudioFeatureSequence, IntensitySequence, KeypointFrame, KeypointSequence};

/// One keypoint sequence as stored on disk: frames are flat `3K` rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub clip_id: String,
    pub identity_id: String,
    pub emotion_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity_level: Option<u8>,
    pub fps: f32,
    pub frames: Vec<Vec<f32>>,
}

impl CorpusRecord {
    pub fn from_sequence(clip_id: &str, seq: &KeypointSequence) -> Self {
        Self {
            clip_id: clip_id.to_string(),
            identity_id: seq.identity_id.clone(),
            emotion_label: seq.emotion_label.clone(),
            intensity_level: seq.intensity_level,
            fps: seq.fps,
            frames: seq
                .frames
                .iter()
                .map(|f| f.points.iter().copied().collect())
                .collect(),
        }
    }

    pub fn to_sequence(&self) -> Result<KeypointSequence> {
        let mut frames = Vec::with_capacity(self.frames.len());
        for (i, flat) in self.frames.iter().enumerate() {
            if flat.len() % 3 != 0 || flat.is_empty() {
                return Err(Error::Format(format!(
                    "clip '{}' frame {i} has {} values, expected a multiple of 3",
                    self.clip_id,
                    flat.len()
                )));
            }
            let k = flat.len() / 3;
            let points = Array2::from_shape_vec((k, 3), flat.clone())
                .map_err(|e| Error::Format(e.to_string()))?;
            frames.push(KeypointFrame::new(points, i)?);
        }
        let seq = KeypointSequence {
            frames,
            fps: self.fps,
            identity_id: self.identity_id.clone(),
            emotion_label: self.emotion_label.clone(),
            intensity_level: self.intensity_level,
        };
        seq.validate()?;
        Ok(seq)
    }
}

/// Per-clip audio features on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub clip_id: String,
    pub fps: f32,
    pub features: Vec<Vec<f32>>,
}

impl FeatureRecord {
    pub fn from_features(clip_id: &str, feats: &AudioFeatureSequence) -> Self {
        Self {
            clip_id: clip_id.to_string(),
            fps: feats.fps,
            features: feats
                .features
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
        }
    }

    pub fn to_features(&self) -> Result<AudioFeatureSequence> {
        let t = self.features.len();
        if t == 0 {
            return Err(Error::Format(format!("clip '{}' has no feature frames", self.clip_id)));
        }
        let d = self.features[0].len();
        let mut arr = Array2::<f32>::zeros((t, d));
        for (i, row) in self.features.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Format(format!(
                    "clip '{}' feature frame {i} has width {}, expected {d}",
                    self.clip_id,
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                arr[[i, j]] = v;
            }
        }
        AudioFeatureSequence::new(arr, self.fps)
    }
}

/// Per-clip intensity trace on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntensityRecord {
    pub clip_id: String,
    pub fps: f32,
    pub normalized: bool,
    pub values: Vec<f32>,
}

impl IntensityRecord {
    pub fn from_intensity(clip_id: &str, seq: &IntensitySequence) -> Self {
        Self {
            clip_id: clip_id.to_string(),
            fps: seq.fps,
            normalized: seq.normalized,
            values: seq.values.clone(),
        }
    }

    pub fn to_intensity(&self) -> Result<IntensitySequence> {
        IntensitySequence::new(self.values.clone(), self.fps, self.normalized)
    }
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    read_jsonl(path)
}

pub fn write_features(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    read_jsonl(path)
}

pub fn write_intensities(path: &Path, records: &[IntensityRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_intensities(path: &Path) -> Result<Vec<IntensityRecord>> {
    read_jsonl(path)
}

pub fn write_norm_spec(path: &Path, spec: &NormalizationSpec) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, spec)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_norm_spec(path: &Path) -> Result<NormalizationSpec> {
    let r = BufReader::new(File::open(path)?);
    let spec: NormalizationSpec = serde_json::from_reader(r)?;
    if spec.kind != "minmax" {
        return Err(Error::Format(format!(
            "unsupported normalization kind '{}'",
            spec.kind
        )));
    }
    Ok(spec)
}
