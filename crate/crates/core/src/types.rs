//! Core domain data: keypoint frames and sequences, intensity traces, and
//! audio feature sequences.
//!
//! Keypoints and intensities are stored in `f32` (the working precision of
//! labeling and interchange files); model internals upcast to `f64`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frames per second shared by keypoints, features, and intensity traces.
pub const DEFAULT_FPS: f32 = 25.0;

/// One frame of K expression keypoints in 3D model units.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointFrame {
    /// `(K, 3)` coordinates.
    pub points: Array2<f32>,
    pub frame_index: usize,
}

impl KeypointFrame {
    pub fn new(points: Array2<f32>, frame_index: usize) -> Result<Self> {
        if points.ncols() != 3 {
            return Err(Error::Dimension(format!(
                "keypoint frame must be K x 3, got {:?}",
                points.shape()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(
                "keypoint frame contains non-finite coordinates".into(),
            ));
        }
        Ok(Self {
            points,
            frame_index,
        })
    }

    /// Number of keypoints K.
    pub fn num_points(&self) -> usize {
        self.points.nrows()
    }
}

/// An ordered keypoint sequence with corpus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSequence {
    pub frames: Vec<KeypointFrame>,
    pub fps: f32,
    pub identity_id: String,
    pub emotion_label: String,
    /// Discrete MEAD-style level in {1,2,3}, when known.
    pub intensity_level: Option<u8>,
}

impl KeypointSequence {
    /// Validate frame-index contiguity and a shared K across frames.
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.frames.first() else {
            return Err(Error::InsufficientData("empty keypoint sequence".into()));
        };
        let k = first.num_points();
        for (i, frame) in self.frames.iter().enumerate() {
            if frame.frame_index != i {
                return Err(Error::Alignment(format!(
                    "frame index {} at position {i} is not contiguous",
                    frame.frame_index
                )));
            }
            if frame.num_points() != k {
                return Err(Error::Dimension(format!(
                    "frame {i} has {} keypoints, expected {k}",
                    frame.num_points()
                )));
            }
        }
        if let Some(level) = self.intensity_level {
            if !(1..=3).contains(&level) {
                return Err(Error::Domain(format!(
                    "intensity level {level} outside {{1,2,3}}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// K of the first frame (sequences are validated to share K).
    pub fn num_points(&self) -> usize {
        self.frames.first().map_or(0, KeypointFrame::num_points)
    }
}

/// Per-frame scalar emotion intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensitySequence {
    pub values: Vec<f32>,
    pub fps: f32,
    /// True once values are mapped into `[0, 1]`.
    pub normalized: bool,
}

impl IntensitySequence {
    pub fn new(values: Vec<f32>, fps: f32, normalized: bool) -> Result<Self> {
        let seq = Self {
            values,
            fps,
            normalized,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &v) in self.values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Domain(format!("intensity value {i} is not finite")));
            }
            if self.normalized {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Domain(format!(
                        "normalized intensity {v} at frame {i} outside [0,1]"
                    )));
                }
            } else if v < 0.0 {
                return Err(Error::Domain(format!(
                    "raw intensity {v} at frame {i} is negative"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-identity neutral keypoint reference.
#[derive(Debug, Clone, PartialEq)]
pub struct NeutralReference {
    pub identity_id: String,
    /// `(K, 3)` mean neutral keypoints.
    pub neutral_points: Array2<f32>,
}

/// Per-frame audio feature vectors aligned one-to-one with video frames.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSequence {
    /// `(T, D_a)` features.
    pub features: Array2<f32>,
    pub fps: f32,
}

impl AudioFeatureSequence {
    pub fn new(features: Array2<f32>, fps: f32) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::InsufficientData("empty audio feature sequence".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite audio feature".into()));
        }
        Ok(Self { features, fps })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}
