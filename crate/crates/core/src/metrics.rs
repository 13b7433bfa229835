//! Analysis metrics: expression diversity, beat alignment, intensity
//! reconstruction error, facial landmark distance, and a linear emotion
//! probe.
//!
//! Beat extraction follows the dance-metric convention: audio beats are
//! local maxima of the onset-energy envelope above its median, motion beats
//! are local minima of keypoint velocity magnitude (kinematic beats). The
//! alignment score is the mean Gaussian similarity between every audio beat
//! and its nearest motion beat, so 1.0 means exact coincidence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{label_sequence, NormalizationSpec};
use crate::transformer::sequence_to_matrix;
use crate::types::{IntensitySequence, KeypointSequence, NeutralReference};

/// Default beat-alignment kernel width in seconds.
pub const DEFAULT_BEAT_SIGMA: f64 = 0.1;

/// Sorted beat timestamps in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatList {
    pub times: Vec<f64>,
}

impl BeatList {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        for w in times.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Domain(
                    "beat timestamps must be strictly increasing".into(),
                ));
            }
        }
        Ok(Self { times })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Strict interior extrema of a signal: `kind > 0` finds maxima, `kind < 0`
/// minima. Returns frame indices.
fn interior_extrema(signal: &[f32], maxima: bool) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 1..signal.len().saturating_sub(1) {
        let is_ext = if maxima {
            signal[i] > signal[i - 1] && signal[i] > signal[i + 1]
        } else {
            signal[i] < signal[i - 1] && signal[i] < signal[i + 1]
        };
        if is_ext {
            out.push(i);
        }
    }
    out
}

fn median(values: &[f32]) -> f32 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite signal"));
    sorted[sorted.len() / 2]
}

/// Audio beats: local maxima of the onset-energy envelope above its median.
pub fn beats_from_onsets(envelope: &[f32], fps: f32) -> Result<BeatList> {
    if envelope.len() < 3 {
        return Err(Error::InsufficientData(
            "beat extraction needs at least 3 frames".into(),
        ));
    }
    let med = median(envelope);
    let times = interior_extrema(envelope, true)
        .into_iter()
        .filter(|&i| envelope[i] > med)
        .map(|i| f64::from(i as f32) / f64::from(fps))
        .collect();
    BeatList::new(times)
}

/// Motion beats: local minima of keypoint velocity magnitude.
pub fn beats_from_motion(velocity: &[f32], fps: f32) -> Result<BeatList> {
    if velocity.len() < 3 {
        return Err(Error::InsufficientData(
            "beat extraction needs at least 3 frames".into(),
        ));
    }
    let times = interior_extrema(velocity, false)
        .into_iter()
        .map(|i| f64::from(i as f32) / f64::from(fps))
        .collect();
    BeatList::new(times)
}

/// Frobenius-norm velocity of a keypoint sequence; entry `t` covers the
/// transition into frame `t + 1` and carries its timestamp.
pub fn motion_velocity(seq: &KeypointSequence) -> Vec<f32> {
    let m = sequence_to_matrix(seq);
    (1..seq.len())
        .map(|t| {
            let mut acc = 0.0f64;
            for j in 0..m.ncols() {
                let d = m[[t, j]] - m[[t - 1, j]];
                acc += d * d;
            }
            acc.sqrt() as f32
        })
        .collect()
}

/// Mean pairwise L2 distance between flattened keypoint sequences.
pub fn diversity(samples: &[KeypointSequence]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "diversity needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let mats: Vec<_> = samples.iter().map(sequence_to_matrix).collect();
    let shape = mats[0].dim();
    for (i, m) in mats.iter().enumerate() {
        if m.dim() != shape {
            return Err(Error::Dimension(format!(
                "sample {i} has shape {:?}, expected {:?}",
                m.dim(),
                shape
            )));
        }
    }
    let n = mats.len();
    let mut total = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = mats[i]
                .iter()
                .zip(mats[j].iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += d.sqrt();
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Mean Gaussian similarity between each audio beat and its nearest motion
/// beat: `exp(-d^2 / (2 sigma^2))`, averaged over audio beats.
pub fn beat_align(audio: &BeatList, motion: &BeatList, sigma: f64) -> Result<f64> {
    if audio.is_empty() || motion.is_empty() {
        return Err(Error::InsufficientData(
            "beat alignment needs non-empty beat lists".into(),
        ));
    }
    if sigma <= 0.0 {
        return Err(Error::Domain("sigma must be positive".into()));
    }
    let mut total = 0.0f64;
    for &ta in &audio.times {
        let d2 = motion
            .times
            .iter()
            .map(|&tm| (ta - tm) * (ta - tm))
            .fold(f64::INFINITY, f64::min);
        total += (-d2 / (2.0 * sigma * sigma)).exp();
    }
    Ok(total / audio.times.len() as f64)
}

/// Mean squared error between the target intensity and the pseudo-intensity
/// recomputed from the generated keypoints.
pub fn intensity_l2(
    generated: &KeypointSequence,
    target: &IntensitySequence,
    neutral: &NeutralReference,
    norm: &NormalizationSpec,
) -> Result<f64> {
    if generated.len() != target.len() {
        return Err(Error::Alignment(format!(
            "generated {} frames vs target {} intensities",
            generated.len(),
            target.len()
        )));
    }
    let relabeled = label_sequence(generated, neutral, norm)?;
    let n = target.len() as f64;
    Ok(relabeled
        .values
        .iter()
        .zip(target.values.iter())
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum::<f64>()
        / n)
}

/// Mean per-keypoint Euclidean distance over frames and keypoints.
pub fn f_lmd(pred: &KeypointSequence, target: &KeypointSequence) -> Result<f64> {
    if pred.len() != target.len() || pred.num_points() != target.num_points() {
        return Err(Error::Dimension(format!(
            "prediction {}x{} vs target {}x{}",
            pred.len(),
            pred.num_points(),
            target.len(),
            target.num_points()
        )));
    }
    let k = pred.num_points();
    let mut total = 0.0f64;
    for (fp, ft) in pred.frames.iter().zip(target.frames.iter()) {
        for i in 0..k {
            let mut d2 = 0.0f64;
            for c in 0..3 {
                let d = f64::from(fp.points[[i, c]]) - f64::from(ft.points[[i, c]]);
                d2 += d * d;
            }
            total += d2.sqrt();
        }
    }
    Ok(total / (pred.len() * k) as f64)
}

// ---- linear emotion probe ----

/// One probe example: mean-pooled keypoint deviation from neutral plus the
/// emotion label.
#[derive(Debug, Clone)]
pub struct ProbeExample {
    pub features: Vec<f64>,
    pub label: String,
}

impl ProbeExample {
    /// Mean over frames of the flattened signed deviation from neutral.
    pub fn from_sequence(seq: &KeypointSequence, neutral: &NeutralReference) -> Result<Self> {
        if seq.num_points() != neutral.neutral_points.nrows() {
            return Err(Error::Dimension(format!(
                "sequence has {} keypoints, neutral has {}",
                seq.num_points(),
                neutral.neutral_points.nrows()
            )));
        }
        let m = sequence_to_matrix(seq);
        let k3 = m.ncols();
        let t = m.nrows() as f64;
        let neutral_flat: Vec<f64> = neutral.neutral_points.iter().map(|&v| f64::from(v)).collect();
        let mut features = vec![0.0f64; k3];
        for row in m.rows() {
            for (j, f) in features.iter_mut().enumerate() {
                *f += row[j] - neutral_flat[j];
            }
        }
        for f in &mut features {
            *f /= t;
        }
        Ok(Self {
            features,
            label: seq.emotion_label.clone(),
        })
    }
}

/// Multinomial logistic probe: full-batch gradient descent from zero
/// weights, deterministic. Returns held-out accuracy.
pub fn emotion_probe(train: &[ProbeExample], eval: &[ProbeExample]) -> Result<f64> {
    if train.is_empty() || eval.is_empty() {
        return Err(Error::InsufficientData("empty probe split".into()));
    }
    let mut classes: Vec<String> = train.iter().map(|e| e.label.clone()).collect();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Degenerate(
            "probe training set has a single class".into(),
        ));
    }
    let eval_classes: std::collections::BTreeSet<&str> =
        eval.iter().map(|e| e.label.as_str()).collect();
    if eval_classes.len() < 2 {
        return Err(Error::Degenerate(
            "probe evaluation set has a single class".into(),
        ));
    }
    let dim = train[0].features.len();
    for (i, e) in train.iter().chain(eval.iter()).enumerate() {
        if e.features.len() != dim {
            return Err(Error::Dimension(format!(
                "probe example {i} has {} features, expected {dim}",
                e.features.len()
            )));
        }
    }
    let class_index = |label: &str| classes.iter().position(|c| c == label);

    let c = classes.len();
    // Weights (c x dim) and biases (c), trained with plain gradient descent.
    let mut w = vec![0.0f64; c * dim];
    let mut b = vec![0.0f64; c];
    let lr = 0.5;
    let iters = 300;
    let n = train.len() as f64;
    let mut probs = vec![0.0f64; c];
    for _ in 0..iters {
        let mut gw = vec![0.0f64; c * dim];
        let mut gb = vec![0.0f64; c];
        for ex in train {
            let y = class_index(&ex.label).expect("train label in classes");
            softmax_logits(&w, &b, &ex.features, dim, &mut probs);
            for (ci, &p) in probs.iter().enumerate() {
                let err = p - if ci == y { 1.0 } else { 0.0 };
                gb[ci] += err;
                for (j, &x) in ex.features.iter().enumerate() {
                    gw[ci * dim + j] += err * x;
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(gw.iter()) {
            *wi -= lr * gi / n;
        }
        for (bi, gi) in b.iter_mut().zip(gb.iter()) {
            *bi -= lr * gi / n;
        }
    }

    let mut correct = 0usize;
    let mut counted = 0usize;
    for ex in eval {
        let Some(y) = class_index(&ex.label) else {
            continue; // unseen label can never be predicted
        };
        softmax_logits(&w, &b, &ex.features, dim, &mut probs);
        let pred = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
            .map(|(i, _)| i)
            .expect("non-empty classes");
        if pred == y {
            correct += 1;
        }
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Degenerate(
            "no evaluation label overlaps the training classes".into(),
        ));
    }
    Ok(correct as f64 / counted as f64)
}

fn softmax_logits(w: &[f64], b: &[f64], x: &[f64], dim: usize, out: &mut [f64]) {
    let c = b.len();
    let mut max = f64::NEG_INFINITY;
    for ci in 0..c {
        let mut z = b[ci];
        for (j, &xj) in x.iter().enumerate() {
            z += w[ci * dim + j] * xj;
        }
        out[ci] = z;
        max = max.max(z);
    }
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

// ---- report ----

/// Per-clip metric breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip_id: String,
    pub beat_align: Option<f64>,
    pub intensity_l2: f64,
    pub f_lmd: f64,
}

/// Aggregate metric report; headline numbers are means of the per-clip
/// breakdown (diversity and probe accuracy are corpus-level).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub diversity: f64,
    pub beat_align: f64,
    pub intensity_l2: f64,
    pub f_lmd: f64,
    pub probe_accuracy: Option<f64>,
    pub per_clip: Vec<ClipMetrics>,
}

impl MetricReport {
    /// Aggregate per-clip rows (means over available entries) with the
    /// corpus-level diversity and probe numbers.
    pub fn from_breakdown(
        diversity: f64,
        probe_accuracy: Option<f64>,
        per_clip: Vec<ClipMetrics>,
    ) -> Result<Self> {
        if per_clip.is_empty() {
            return Err(Error::InsufficientData("no per-clip metrics".into()));
        }
        let n = per_clip.len() as f64;
        let beats: Vec<f64> = per_clip.iter().filter_map(|c| c.beat_align).collect();
        let beat_mean = if beats.is_empty() {
            0.0
        } else {
            beats.iter().sum::<f64>() / beats.len() as f64
        };
        Ok(Self {
            diversity,
            beat_align: beat_mean,
            intensity_l2: per_clip.iter().map(|c| c.intensity_l2).sum::<f64>() / n,
            f_lmd: per_clip.iter().map(|c| c.f_lmd).sum::<f64>() / n,
            probe_accuracy,
            per_clip,
        })
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut file, self)?;
        std::io::Write::write_all(&mut file, b"\n")?;
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}
