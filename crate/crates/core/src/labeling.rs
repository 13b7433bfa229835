//! Emotion-agnostic intensity pseudo-labeling.
//!
//! The pseudo intensity of a frame is the sum of absolute differences
//! between its keypoints and the same identity's neutral keypoints. Raw
//! values are mapped to `[0, 1]` by a corpus-level min-max spec fitted on
//! the training split and clipped at inference.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{IntensitySequence, KeypointFrame, KeypointSequence, NeutralReference};

/// Corpus-level map from raw pseudo intensity to `[0, 1]`.
///
/// Persisted as a small JSON document so labeling is reproducible across
/// runs and machines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationSpec {
    /// Always `"minmax"`; kept explicit in the file for forward compatibility.
    pub kind: String,
    pub min: f32,
    pub max: f32,
}

impl NormalizationSpec {
    pub fn minmax(min: f32, max: f32) -> Self {
        Self {
            kind: "minmax".into(),
            min,
            max,
        }
    }

    /// Fit min-max bounds over raw intensities of a training corpus.
    pub fn fit(raw_values: &[f32]) -> Result<Self> {
        if raw_values.is_empty() {
            return Err(Error::InsufficientData(
                "cannot fit normalization on an empty corpus".into(),
            ));
        }
        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        for &v in raw_values {
            min = min.min(v);
            max = max.max(v);
        }
        Ok(Self::minmax(min, max))
    }

    /// Map one raw value into `[0, 1]`, clipping outside the fitted range.
    ///
    /// A corpus whose every raw value was zero is valid as long as new
    /// frames are also exactly neutral; any deviation is then unnormalizable.
    pub fn apply(&self, raw: f32) -> Result<f32> {
        let scale = self.max - self.min;
        if scale > 0.0 {
            Ok(((raw - self.min) / scale).clamp(0.0, 1.0))
        } else if self.max == 0.0 && raw == 0.0 {
            Ok(0.0)
        } else {
            Err(Error::Degenerate(format!(
                "normalization scale is zero (min = max = {}); cannot map raw value {raw}",
                self.max
            )))
        }
    }
}

/// Sum of absolute differences between a frame and the neutral reference.
///
/// Accumulates in `f32` row-major order, matching the interchange precision.
pub fn raw_pseudo_intensity(frame: &KeypointFrame, neutral: &NeutralReference) -> Result<f32> {
    if frame.points.shape() != neutral.neutral_points.shape() {
        return Err(Error::Dimension(format!(
            "frame shape {:?} does not match neutral shape {:?}",
            frame.points.shape(),
            neutral.neutral_points.shape()
        )));
    }
    if frame.points.iter().any(|v| !v.is_finite())
        || neutral.neutral_points.iter().any(|v| !v.is_finite())
    {
        return Err(Error::Domain("non-finite keypoint coordinate".into()));
    }
    let mut total = 0.0_f32;
    for (a, b) in frame.points.iter().zip(neutral.neutral_points.iter()) {
        total += (a - b).abs();
    }
    Ok(total)
}

/// Label every frame of a sequence with normalized pseudo intensity.
pub fn label_sequence(
    seq: &KeypointSequence,
    neutral: &NeutralReference,
    norm: &NormalizationSpec,
) -> Result<IntensitySequence> {
    if seq.identity_id != neutral.identity_id {
        return Err(Error::Reference(format!(
            "sequence identity '{}' does not match neutral reference '{}'",
            seq.identity_id, neutral.identity_id
        )));
    }
    seq.validate()?;
    let mut values = Vec::with_capacity(seq.len());
    for frame in &seq.frames {
        let raw = raw_pseudo_intensity(frame, neutral)?;
        values.push(norm.apply(raw)?);
    }
    IntensitySequence::new(values, seq.fps, true)
}

/// Raw (unnormalized) labels for a sequence; used when fitting a spec.
pub fn raw_label_sequence(
    seq: &KeypointSequence,
    neutral: &NeutralReference,
) -> Result<Vec<f32>> {
    if seq.identity_id != neutral.identity_id {
        return Err(Error::Reference(format!(
            "sequence identity '{}' does not match neutral reference '{}'",
            seq.identity_id, neutral.identity_id
        )));
    }
    seq.frames
        .iter()
        .map(|f| raw_pseudo_intensity(f, neutral))
        .collect()
}

/// Mean keypoint frame over all neutral-labeled frames of one identity.
pub fn select_neutral_reference(
    corpus: &[KeypointSequence],
    identity_id: &str,
) -> Result<NeutralReference> {
    let mut accum: Option<Array2<f64>> = None;
    let mut count = 0usize;
    for seq in corpus {
        if seq.identity_id != identity_id || seq.emotion_label != "neutral" {
            continue;
        }
        for frame in &seq.frames {
            let pts = frame.points.mapv(f64::from);
            match &mut accum {
                Some(acc) => {
                    if acc.shape() != pts.shape() {
                        return Err(Error::Dimension(format!(
                            "neutral frames of '{identity_id}' disagree on K: {:?} vs {:?}",
                            acc.shape(),
                            pts.shape()
                        )));
                    }
                    *acc += &pts;
                }
                None => accum = Some(pts),
            }
            count += 1;
        }
    }
    let Some(total) = accum else {
        return Err(Error::Reference(format!(
            "no neutral sequence found for identity '{identity_id}'"
        )));
    };
    let mean = total.mapv(|v| (v / count as f64) as f32);
    Ok(NeutralReference {
        identity_id: identity_id.to_string(),
        neutral_points: mean,
    })
}

/// Fit a normalization spec over every frame of a labeled corpus, using each
/// sequence's own identity reference.
pub fn fit_normalization(
    corpus: &[KeypointSequence],
    neutrals: &dyn Fn(&str) -> Result<NeutralReference>,
) -> Result<NormalizationSpec> {
    let mut raws = Vec::new();
    for seq in corpus {
        let neutral = neutrals(&seq.identity_id)?;
        raws.extend(raw_label_sequence(seq, &neutral)?);
    }
    NormalizationSpec::fit(&raws)
}
