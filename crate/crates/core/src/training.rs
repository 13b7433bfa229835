//! Generator training: the composite loss, the contrastive sync embedder,
//! and the two-stage schedule (emotion-agnostic pretraining, then emotional
//! fine-tuning).
//!
//! The total loss is
//! `w_exp * L_exp + w_rec * L_rec + w_sync * L_sync + w_norm * L_norm`,
//! where the norm penalty applies only to neutral samples. The sync loss is
//! the negative log of the clamped cosine between a keypoint-window
//! embedding and an audio-window embedding from a small frozen expert
//! trained in-repo with a margin objective.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::{scalar, scalar_value, Graph, PadMode, Var};
use crate::emotion::{AdaptationNet, TextEncoder, NOISE_DIM};
use crate::error::{Error, Result};
use crate::nn::{Adam, Bound, Conv1d, Linear, ParamStore};
use crate::rng::substream;
use crate::transformer::{
    sequence_to_matrix, ExpressionTransformer, GraphCondition, ToyRenderer,
};
use crate::types::{AudioFeatureSequence, IntensitySequence, KeypointSequence};

/// Cosine clamp floor; bounds the sync loss at `-ln(δ) ≈ 16.118`.
pub const SYNC_COS_FLOOR: f64 = 1e-7;
/// Norm floor of the sync cosine denominator.
pub const SYNC_EPS: f64 = 1e-7;

/// Loss term weights of the generation objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub exp: f64,
    pub rec: f64,
    pub sync: f64,
    pub norm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            exp: 100.0,
            rec: 10.0,
            sync: 10.0,
            norm: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.exp < 0.0 || self.rec < 0.0 || self.sync < 0.0 || self.norm < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Unweighted loss components of one sample or batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, serde::Deserialize)]
pub struct LossParts {
    pub exp: f64,
    pub rec: f64,
    pub sync: f64,
    pub norm: f64,
}

/// Mean squared error over all `t * k * 3` keypoint entries.
pub fn loss_exp(pred: &KeypointSequence, target: &KeypointSequence) -> Result<f64> {
    if pred.len() != target.len() || pred.num_points() != target.num_points() {
        return Err(Error::Dimension(format!(
            "prediction {}x{} vs target {}x{}",
            pred.len(),
            pred.num_points(),
            target.len(),
            target.num_points()
        )));
    }
    let a = sequence_to_matrix(pred);
    let b = sequence_to_matrix(target);
    let n = a.len() as f64;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Mean absolute difference over masked pixels only.
pub fn loss_rec(
    pred: &Array2<f32>,
    target: &Array2<f32>,
    mask: &Array2<f32>,
) -> Result<f64> {
    if pred.dim() != target.dim() || pred.dim() != mask.dim() {
        return Err(Error::Dimension(format!(
            "image shapes disagree: {:?} vs {:?} vs {:?}",
            pred.dim(),
            target.dim(),
            mask.dim()
        )));
    }
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::Domain("mask values must be 0 or 1".into()));
    }
    let selected: f64 = mask.iter().map(|&m| f64::from(m)).sum();
    if selected == 0.0 {
        return Err(Error::Degenerate("mask selects no pixels".into()));
    }
    let total: f64 = pred
        .iter()
        .zip(target.iter())
        .zip(mask.iter())
        .map(|((&p, &t), &m)| f64::from(m) * f64::from((p - t).abs()))
        .sum();
    Ok(total / selected)
}

/// Weighted sum of Eq.-style loss parts; the norm term gates on neutrality.
pub fn total_loss(parts: &LossParts, w: &LossWeights, is_neutral: bool) -> Result<f64> {
    w.validate()?;
    for (name, v) in [
        ("exp", parts.exp),
        ("rec", parts.rec),
        ("sync", parts.sync),
        ("norm", parts.norm),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Domain(format!(
                "loss part '{name}' must be finite and non-negative, got {v}"
            )));
        }
    }
    let norm_term = if is_neutral { w.norm * parts.norm } else { 0.0 };
    Ok(w.exp * parts.exp + w.rec * parts.rec + w.sync * parts.sync + norm_term)
}

// ---- sync embedder ----

/// Two-branch window embedder for the sync loss: a video branch over
/// flattened keypoint windows and an audio branch over feature windows,
/// both emitting `embed_dim` vectors.
#[derive(Debug, Clone)]
pub struct SyncEmbedder {
    pub window: usize,
    pub kp_dim: usize,
    pub audio_dim: usize,
    pub channels: usize,
    pub embed_dim: usize,
    video: Branch,
    audio: Branch,
}

#[derive(Debug, Clone)]
struct Branch {
    conv1: Conv1d,
    conv2: Conv1d,
    out: Linear,
}

impl Branch {
    fn new(prefix: &str, in_dim: usize, channels: usize, embed_dim: usize) -> Self {
        Self {
            conv1: Conv1d::new(format!("{prefix}.conv1"), in_dim, channels, 3, 1),
            conv2: Conv1d::new(format!("{prefix}.conv2"), channels, channels, 3, 1),
            out: Linear::new(format!("{prefix}.out"), channels, embed_dim),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.conv1.init(store, rng);
        self.conv2.init(store, rng);
        self.out.init(store, rng);
    }

    /// `(in_dim, window)` to `(embed_dim,)`.
    fn forward(&self, g: &mut Graph, p: &Bound, window: Var) -> Var {
        let h = self.conv1.forward(g, p, window, PadMode::Zero);
        let h = g.relu(h);
        let h = self.conv2.forward(g, p, h, PadMode::Zero);
        let h = g.relu(h);
        let pooled = g.sum_axis(h, 1);
        let scaled = g.scale(pooled, 1.0 / self.conv2.out_ch as f64);
        self.out.forward_vec(g, p, scaled)
    }
}

impl SyncEmbedder {
    pub fn new(kp_dim: usize, audio_dim: usize) -> Self {
        let channels = 32;
        let embed_dim = 64;
        Self {
            window: 5,
            kp_dim,
            audio_dim,
            channels,
            embed_dim,
            video: Branch::new("sync.video", kp_dim, channels, embed_dim),
            audio: Branch::new("sync.audio", audio_dim, channels, embed_dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.video.init(store, rng);
        self.audio.init(store, rng);
    }

    /// Video embedding of a `(window, kp_dim)` keypoint slice on the graph.
    pub fn embed_video(&self, g: &mut Graph, p: &Bound, window_rows: Var) -> Var {
        let w = g.transpose2(window_rows);
        self.video.forward(g, p, w)
    }

    /// Audio embedding of a `(window, audio_dim)` feature slice on the graph.
    pub fn embed_audio(&self, g: &mut Graph, p: &Bound, window_rows: Var) -> Var {
        let w = g.transpose2(window_rows);
        self.audio.forward(g, p, w)
    }

    /// Clamped cosine similarity between two embeddings.
    pub fn cosine(&self, g: &mut Graph, v: Var, s: Var) -> Var {
        let dot = g.dot(v, s);
        let v2 = g.square(v);
        let v2s = g.sum(v2);
        let nv = g.sqrt(v2s);
        let s2 = g.square(s);
        let s2s = g.sum(s2);
        let ns = g.sqrt(s2s);
        let prod = g.mul(nv, ns);
        let denom = g.clamp_min(prod, SYNC_EPS);
        g.div(dot, denom)
    }

    /// `-log` of the cosine clamped into `[δ, 1]`.
    pub fn sync_loss(&self, g: &mut Graph, v: Var, s: Var) -> Var {
        let cos = self.cosine(g, v, s);
        let clamped = g.clamp(cos, SYNC_COS_FLOOR, 1.0);
        let l = g.ln(clamped);
        g.neg(l)
    }

    /// Convenience: sync loss of aligned `(window, kp_dim)` and
    /// `(window, audio_dim)` slices under fixed params.
    pub fn loss_sync(
        &self,
        store: &ParamStore,
        kp_window: &Array2<f64>,
        audio_window: &Array2<f64>,
    ) -> Result<f64> {
        if kp_window.nrows() != self.window || audio_window.nrows() != self.window {
            return Err(Error::Alignment(format!(
                "windows must span {} frames, got {} and {}",
                self.window,
                kp_window.nrows(),
                audio_window.nrows()
            )));
        }
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let kv = g.input(kp_window.clone().into_dyn());
        let av = g.input(audio_window.clone().into_dyn());
        let v = self.embed_video(&mut g, &bound, kv);
        let s = self.embed_audio(&mut g, &bound, av);
        let loss = self.sync_loss(&mut g, v, s);
        Ok(scalar_value(g.value(loss)))
    }

    /// Cosine between the branches for one aligned pair, under fixed params.
    pub fn pair_cosine(
        &self,
        store: &ParamStore,
        kp_window: &Array2<f64>,
        audio_window: &Array2<f64>,
    ) -> f64 {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let kv = g.input(kp_window.clone().into_dyn());
        let av = g.input(audio_window.clone().into_dyn());
        let v = self.embed_video(&mut g, &bound, kv);
        let s = self.embed_audio(&mut g, &bound, av);
        let cos = self.cosine(&mut g, v, s);
        scalar_value(g.value(cos))
    }
}

/// One training clip: ground-truth keypoints, aligned audio features, and
/// (for the fine-tune stage) pseudo-intensity labels.
#[derive(Debug, Clone)]
pub struct TrainClip {
    pub clip_id: String,
    pub keypoints: KeypointSequence,
    pub features: AudioFeatureSequence,
    pub labels: Option<IntensitySequence>,
}

impl TrainClip {
    fn len(&self) -> usize {
        self.keypoints.len()
    }

    fn is_neutral(&self) -> bool {
        self.keypoints.emotion_label == "neutral"
    }
}

fn window_slice(m: &Array2<f64>, start: usize, len: usize) -> Array2<f64> {
    m.slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
        .to_owned()
}

fn features_slice(a: &AudioFeatureSequence, start: usize, len: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, a.dim()), |(i, j)| {
        f64::from(a.features[[start + i, j]])
    })
}

/// Train the sync embedder contrastively: aligned windows pulled together,
/// shuffled windows pushed apart with a margin.
pub fn pretrain_sync_embedder(
    embedder: &SyncEmbedder,
    clips: &[TrainClip],
    steps: usize,
    seed: u64,
) -> Result<ParamStore> {
    if clips.len() < 20 {
        return Err(Error::InsufficientData(format!(
            "sync pretraining needs at least 20 sequences, got {}",
            clips.len()
        )));
    }
    let usable: Vec<&TrainClip> = clips
        .iter()
        .filter(|c| c.len() >= embedder.window && c.features.len() >= embedder.window)
        .collect();
    if usable.len() < 20 {
        return Err(Error::InsufficientData(
            "fewer than 20 sequences span a full sync window".into(),
        ));
    }
    let kp_mats: Vec<Array2<f64>> = usable.iter().map(|c| sequence_to_matrix(&c.keypoints)).collect();

    let mut store = ParamStore::new();
    let mut init_rng = substream(seed, "sync-init");
    embedder.init(&mut store, &mut init_rng);
    let mut opt = Adam::new(2e-4, 0.5, 0.999);
    let mut rng = substream(seed, "sync-batches");
    let margin = 0.5;
    let batch = 8;

    for _ in 0..steps {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let mut hinges = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = rng.gen_range(0..usable.len());
            let t = rng.gen_range(0..=usable[i].len() - embedder.window);
            // Misaligned window: a different clip, or a distant offset.
            let (j, tj) = loop {
                let j = rng.gen_range(0..usable.len());
                let tj = rng.gen_range(0..=usable[j].len() - embedder.window);
                if j != i || tj.abs_diff(t) >= embedder.window {
                    break (j, tj);
                }
            };
            let kp = g.input(window_slice(&kp_mats[i], t, embedder.window).into_dyn());
            let au = g.input(features_slice(&usable[i].features, t, embedder.window).into_dyn());
            let au_mis =
                g.input(features_slice(&usable[j].features, tj, embedder.window).into_dyn());
            let v = embedder.embed_video(&mut g, &bound, kp);
            let s_pos = embedder.embed_audio(&mut g, &bound, au);
            let s_neg = embedder.embed_audio(&mut g, &bound, au_mis);
            let cos_pos = embedder.cosine(&mut g, v, s_pos);
            let cos_neg = embedder.cosine(&mut g, v, s_neg);
            let gap = g.sub(cos_neg, cos_pos);
            let shifted = g.add_const(gap, margin);
            let hinge = g.relu(shifted);
            hinges.push(hinge);
        }
        let mut acc = hinges[0];
        for &h in &hinges[1..] {
            acc = g.add(acc, h);
        }
        let loss = g.scale(acc, 1.0 / batch as f64);
        let grads = g.backward(loss);
        opt.step(&mut store, &bound, &grads, &[]);
    }
    Ok(store)
}

/// Fraction of held-out pairs where the aligned window scores a higher
/// cosine than a misaligned one.
pub fn sync_discrimination(
    embedder: &SyncEmbedder,
    store: &ParamStore,
    clips: &[TrainClip],
    pairs: usize,
    seed: u64,
) -> Result<f32> {
    let usable: Vec<&TrainClip> = clips
        .iter()
        .filter(|c| c.len() >= embedder.window && c.features.len() >= embedder.window)
        .collect();
    if usable.len() < 2 {
        return Err(Error::InsufficientData(
            "discrimination needs at least two usable clips".into(),
        ));
    }
    let kp_mats: Vec<Array2<f64>> = usable.iter().map(|c| sequence_to_matrix(&c.keypoints)).collect();
    let mut rng = substream(seed, "sync-eval");
    let mut wins = 0usize;
    for _ in 0..pairs {
        let i = rng.gen_range(0..usable.len());
        let t = rng.gen_range(0..=usable[i].len() - embedder.window);
        let (j, tj) = loop {
            let j = rng.gen_range(0..usable.len());
            let tj = rng.gen_range(0..=usable[j].len() - embedder.window);
            if j != i || tj.abs_diff(t) >= embedder.window {
                break (j, tj);
            }
        };
        let kp = window_slice(&kp_mats[i], t, embedder.window);
        let aligned = embedder.pair_cosine(store, &kp, &features_slice(&usable[i].features, t, embedder.window));
        let misaligned =
            embedder.pair_cosine(store, &kp, &features_slice(&usable[j].features, tj, embedder.window));
        if aligned > misaligned {
            wins += 1;
        }
    }
    Ok(wins as f32 / pairs as f32)
}

// ---- generator training ----

/// Schedule and optimizer settings for generator training.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorTrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    /// Sequences are cropped to this many frames per step.
    pub crop_frames: usize,
    pub lr_transformer: f64,
    pub lr_other: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    /// Frames rendered per clip per step for the reconstruction loss.
    pub render_frames: usize,
    pub seed: u64,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 1000,
            stage2_steps: 1000,
            batch_size: 8,
            crop_frames: 40,
            lr_transformer: 1.5e-4,
            lr_other: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            render_frames: 2,
            seed: 0,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct GeneratorLogEntry {
    pub step: usize,
    pub stage: String,
    pub loss: f64,
    pub parts: LossParts,
}

/// Everything the two-stage run produces.
pub struct GeneratorArtifacts {
    /// Parameters after both stages (includes the frozen sync expert).
    pub params: ParamStore,
    /// Checkpoint after the emotion-agnostic stage.
    pub stage1_params: ParamStore,
    pub log: Vec<GeneratorLogEntry>,
}

/// All model pieces that participate in generator training.
pub struct GeneratorModel<'a> {
    pub transformer: &'a ExpressionTransformer,
    pub adaptation: &'a AdaptationNet,
    pub encoder: &'a TextEncoder,
    pub renderer: &'a ToyRenderer,
    pub norm_map: &'a crate::emotion::IntensityNormMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Pretrain,
    Finetune,
}

/// Two-stage training: neutral-only pretraining without emotion conditioning
/// or sync loss, then emotional fine-tuning with conditioning, norm penalty,
/// and the frozen sync expert.
pub fn train_generator(
    model: &GeneratorModel<'_>,
    clips: &[TrainClip],
    sync_params: &ParamStore,
    sync_embedder: &SyncEmbedder,
    cfg: &GeneratorTrainConfig,
) -> Result<GeneratorArtifacts> {
    cfg.weights.validate()?;
    if clips.is_empty() {
        return Err(Error::InsufficientData("no training clips".into()));
    }
    for clip in clips {
        if clip.keypoints.len() != clip.features.len() {
            return Err(Error::Alignment(format!(
                "clip '{}': {} keypoint frames vs {} feature frames",
                clip.clip_id,
                clip.keypoints.len(),
                clip.features.len()
            )));
        }
    }

    let mut store = ParamStore::new();
    let mut init_rng = substream(cfg.seed, "generator-init");
    model.transformer.init(&mut store, &mut init_rng);
    model.adaptation.init(&mut store, &mut init_rng);
    for (name, tensor) in sync_params.iter() {
        store.insert(name, tensor.clone());
    }

    let mut log = Vec::new();
    run_stage(
        model,
        clips,
        sync_embedder,
        cfg,
        Stage::Pretrain,
        &mut store,
        &mut log,
    )?;
    let stage1_params = store.clone();
    run_stage(
        model,
        clips,
        sync_embedder,
        cfg,
        Stage::Finetune,
        &mut store,
        &mut log,
    )?;
    Ok(GeneratorArtifacts {
        params: store,
        stage1_params,
        log,
    })
}

/// Run only the fine-tune stage on top of existing parameters; used for
/// loss-weight sweeps that share one pretrained checkpoint.
pub fn finetune_generator(
    model: &GeneratorModel<'_>,
    clips: &[TrainClip],
    sync_params: &ParamStore,
    sync_embedder: &SyncEmbedder,
    cfg: &GeneratorTrainConfig,
    stage1_params: &ParamStore,
) -> Result<(ParamStore, Vec<GeneratorLogEntry>)> {
    let mut store = stage1_params.clone();
    for (name, tensor) in sync_params.iter() {
        store.insert(name, tensor.clone());
    }
    let mut log = Vec::new();
    run_stage(
        model,
        clips,
        sync_embedder,
        cfg,
        Stage::Finetune,
        &mut store,
        &mut log,
    )?;
    Ok((store, log))
}

fn run_stage(
    model: &GeneratorModel<'_>,
    clips: &[TrainClip],
    sync_embedder: &SyncEmbedder,
    cfg: &GeneratorTrainConfig,
    stage: Stage,
    store: &mut ParamStore,
    log: &mut Vec<GeneratorLogEntry>,
) -> Result<()> {
    let (stage_name, steps) = match stage {
        Stage::Pretrain => ("pretrain", cfg.stage1_steps),
        Stage::Finetune => ("finetune", cfg.stage2_steps),
    };
    // Stage 1 sees only neutral clips; stage 2 sees everything.
    let pool: Vec<usize> = match stage {
        Stage::Pretrain => clips
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_neutral())
            .map(|(i, _)| i)
            .collect(),
        Stage::Finetune => (0..clips.len()).collect(),
    };
    if pool.is_empty() {
        return Err(Error::InsufficientData(
            "pretraining stage found no neutral clips".into(),
        ));
    }
    if stage == Stage::Finetune {
        for idx in &pool {
            let clip = &clips[*idx];
            if clip.labels.is_none() {
                return Err(Error::Config(format!(
                    "clip '{}' has no intensity labels for the fine-tune stage",
                    clip.clip_id
                )));
            }
        }
    }

    // Fresh optimizer moments per stage.
    let mut opt = Adam::new(cfg.lr_other, cfg.beta1, cfg.beta2)
        .with_override("xf.", cfg.lr_transformer);
    let mut rng = substream(cfg.seed, &format!("generator-{stage_name}"));

    let kp_mats: Vec<Array2<f64>> = clips.iter().map(|c| sequence_to_matrix(&c.keypoints)).collect();

    for step in 0..steps {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let mut batch_losses = Vec::with_capacity(cfg.batch_size);
        let mut parts_sum = LossParts::default();
        for _ in 0..cfg.batch_size {
            let idx = pool[rng.gen_range(0..pool.len())];
            let (loss, parts) = clip_loss(
                model,
                sync_embedder,
                cfg,
                stage,
                &mut g,
                &bound,
                &clips[idx],
                &kp_mats[idx],
                &mut rng,
            )?;
            parts_sum.exp += parts.exp;
            parts_sum.rec += parts.rec;
            parts_sum.sync += parts.sync;
            parts_sum.norm += parts.norm;
            batch_losses.push(loss);
        }
        let mut acc = batch_losses[0];
        for &l in &batch_losses[1..] {
            acc = g.add(acc, l);
        }
        let loss = g.scale(acc, 1.0 / cfg.batch_size as f64);
        let grads = g.backward(loss);
        opt.step(store, &bound, &grads, &["sync."]);

        let b = cfg.batch_size as f64;
        log.push(GeneratorLogEntry {
            step,
            stage: stage_name.to_string(),
            loss: scalar_value(g.value(loss)),
            parts: LossParts {
                exp: parts_sum.exp / b,
                rec: parts_sum.rec / b,
                sync: parts_sum.sync / b,
                norm: parts_sum.norm / b,
            },
        });
    }
    Ok(())
}

/// Weighted per-clip loss on the graph, plus unweighted parts for logging.
#[allow(clippy::too_many_arguments)]
fn clip_loss(
    model: &GeneratorModel<'_>,
    sync_embedder: &SyncEmbedder,
    cfg: &GeneratorTrainConfig,
    stage: Stage,
    g: &mut Graph,
    bound: &Bound,
    clip: &TrainClip,
    kp_mat: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, LossParts)> {
    let total_frames = clip.len();
    let crop = cfg.crop_frames.min(total_frames);
    let start = if total_frames > crop {
        rng.gen_range(0..=total_frames - crop)
    } else {
        0
    };

    let audio = AudioFeatureSequence {
        features: clip
            .features
            .features
            .slice_axis(Axis(0), ndarray::Slice::from(start..start + crop))
            .to_owned(),
        fps: clip.features.fps,
    };
    let target = window_slice(kp_mat, start, crop);

    // Conditioning and the optional norm penalty.
    let is_neutral = clip.is_neutral();
    let mut norm_part: Option<Var> = None;
    let condition = match stage {
        Stage::Pretrain => {
            let zero = g.input(ndarray::Array1::<f64>::zeros(model.transformer.cfg.emotion_dim).into_dyn());
            GraphCondition::Constant(zero)
        }
        Stage::Finetune => {
            let text = model.encoder.embed(&clip.keypoints.emotion_label)?;
            let noise: Vec<f64> = (0..NOISE_DIM).map(|_| StandardNormal.sample(rng)).collect();
            let noise_var = g.input(ndarray::Array1::from_vec(noise).into_dyn());
            let text_var = g.input(
                ndarray::Array1::from_iter(text.vector.iter().map(|&v| f64::from(v))).into_dyn(),
            );
            let emb = model.adaptation.forward_graph(g, bound, noise_var, text_var);
            if is_neutral {
                norm_part = Some(crate::emotion::graph_norm_penalty(g, emb));
                GraphCondition::Constant(emb)
            } else {
                let labels = clip.labels.as_ref().expect("checked in run_stage");
                // Frame-wise target norms from the pseudo-intensity labels.
                let sq = g.square(emb);
                let sum = g.sum(sq);
                let norm = g.sqrt(sum);
                let dim = model.transformer.cfg.emotion_dim;
                let mut rows = Vec::with_capacity(crop);
                for t in 0..crop {
                    let target_norm = model
                        .norm_map
                        .norm_for_intensity(labels.values[start + t].clamp(0.0, 1.0))?;
                    if target_norm == 0.0 {
                        rows.push(g.input(ndarray::Array2::<f64>::zeros((1, dim)).into_dyn()));
                    } else {
                        let tvar = g.input(scalar(f64::from(target_norm)));
                        let ratio = g.div(tvar, norm);
                        let scaled = g.mul_scalar_var(emb, ratio);
                        rows.push(g.reshape(scaled, &[1, dim]));
                    }
                }
                let stacked = g.concat(0, &rows);
                GraphCondition::PerFrame(stacked)
            }
        }
    };

    let (base, offsets) = model.transformer.forward_graph(g, bound, &audio, &condition)?;
    let pred = g.add(base, offsets);

    // Expression regression.
    let target_var = g.input(target.into_dyn());
    let diff = g.sub(pred, target_var);
    let sq = g.square(diff);
    let exp_part = g.mean(sq);

    // Reconstruction on a few rendered frames.
    let n_render = cfg.render_frames.min(crop);
    let mut rec_terms = Vec::with_capacity(n_render);
    for _ in 0..n_render {
        let f = rng.gen_range(0..crop);
        let row = g.slice_axis(pred, 0, f, 1);
        let pts = g.reshape(row, &[model.transformer.cfg.keypoints, 3]);
        let img = model.renderer.render_graph(g, pts);
        let gt_frame = &clip.keypoints.frames[start + f];
        let gt_img = model.renderer.render(gt_frame)?;
        let mask = model.renderer.facial_mask(gt_frame, 3.0);
        let selected: f64 = mask.iter().map(|&m| f64::from(m)).sum();
        if selected == 0.0 {
            return Err(Error::Degenerate(format!(
                "clip '{}' frame {} has an empty facial mask",
                clip.clip_id,
                start + f
            )));
        }
        let gt_var = g.input(gt_img.mapv(f64::from).into_dyn());
        let mask_var = g.input(mask.mapv(f64::from).into_dyn());
        let dimg = g.sub(img, gt_var);
        let aimg = g.abs(dimg);
        let masked = g.mul(aimg, mask_var);
        let total = g.sum(masked);
        rec_terms.push(g.scale(total, 1.0 / selected));
    }
    let rec_part = if rec_terms.is_empty() {
        g.input(scalar(0.0))
    } else {
        let mut acc = rec_terms[0];
        for &t in &rec_terms[1..] {
            acc = g.add(acc, t);
        }
        g.scale(acc, 1.0 / rec_terms.len() as f64)
    };

    // Sync loss on one aligned window (fine-tune stage only).
    let sync_part = if stage == Stage::Finetune
        && cfg.weights.sync > 0.0
        && crop >= sync_embedder.window
    {
        let w_start = rng.gen_range(0..=crop - sync_embedder.window);
        let kp_win = g.slice_axis(pred, 0, w_start, sync_embedder.window);
        let au_win = g.input(
            features_slice(&audio, w_start, sync_embedder.window).into_dyn(),
        );
        let v = sync_embedder.embed_video(g, bound, kp_win);
        let s = sync_embedder.embed_audio(g, bound, au_win);
        sync_embedder.sync_loss(g, v, s)
    } else {
        g.input(scalar(0.0))
    };

    // Weighted combination.
    let w = &cfg.weights;
    let mut loss = g.scale(exp_part, w.exp);
    let rec_w = g.scale(rec_part, w.rec);
    loss = g.add(loss, rec_w);
    let sync_w = g.scale(sync_part, w.sync);
    loss = g.add(loss, sync_w);
    let norm_value = if let Some(np) = norm_part {
        if is_neutral && w.norm > 0.0 {
            let norm_w = g.scale(np, w.norm);
            loss = g.add(loss, norm_w);
        }
        scalar_value(g.value(np))
    } else {
        0.0
    };

    let parts = LossParts {
        exp: scalar_value(g.value(exp_part)),
        rec: scalar_value(g.value(rec_part)),
        sync: scalar_value(g.value(sync_part)),
        norm: norm_value,
    };
    Ok((loss, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emotion::{IntensityNormMap, TEXT_DIM};
    use crate::transformer::TransformerConfig;
    use crate::types::KeypointFrame;
    use ndarray::arr2;

    fn keypoint_seq(t: usize, k: usize, seed: u64, label: &str) -> KeypointSequence {
        let mut rng = substream(seed, "train-test-kps");
        let frames = (0..t)
            .map(|i| {
                let pts = Array2::from_shape_fn((k, 3), |_| rng.gen_range(-1.0f32..1.0));
                KeypointFrame::new(pts, i).unwrap()
            })
            .collect();
        KeypointSequence {
            frames,
            fps: 25.0,
            identity_id: "id0".into(),
            emotion_label: label.into(),
            intensity_level: None,
        }
    }

    #[test]
    fn loss_exp_trivial_cases_and_oracle() {
        let a = keypoint_seq(3, 5, 1, "happy");
        assert_eq!(loss_exp(&a, &a).unwrap(), 0.0);

        // One entry differing by 2 out of 45 entries -> 4/45.
        let a = keypoint_seq(3, 5, 2, "happy");
        let mut b = a.clone();
        b.frames[1].points[[2, 0]] += 2.0;
        let got = loss_exp(&a, &b).unwrap();
        assert!((got - 4.0 / 45.0).abs() < 1e-9, "{got}");

        // Brute-force nested-loop oracle on random pairs.
        let mut rng = substream(3, "loss-exp-oracle");
        for _ in 0..20 {
            let a = keypoint_seq(4, 3, rng.gen(), "x");
            let b = keypoint_seq(4, 3, rng.gen(), "x");
            let mut acc = 0.0f64;
            let mut n = 0usize;
            for t in 0..4 {
                for k in 0..3 {
                    for c in 0..3 {
                        let d = f64::from(a.frames[t].points[[k, c]])
                            - f64::from(b.frames[t].points[[k, c]]);
                        acc += d * d;
                        n += 1;
                    }
                }
            }
            let expect = acc / n as f64;
            assert!((loss_exp(&a, &b).unwrap() - expect).abs() < 1e-6);
        }

        let c = keypoint_seq(2, 5, 4, "x");
        assert!(matches!(loss_exp(&a, &c), Err(Error::Dimension(_))));
    }

    #[test]
    fn loss_rec_trivial_cases_and_oracle() {
        let img = Array2::<f32>::from_elem((4, 4), 0.5);
        let mask = Array2::<f32>::ones((4, 4));
        assert_eq!(loss_rec(&img, &img, &mask).unwrap(), 0.0);

        // Single selected pixel with |delta| = 0.3.
        let mut mask1 = Array2::<f32>::zeros((4, 4));
        mask1[[2, 1]] = 1.0;
        let mut other = img.clone();
        other[[2, 1]] += 0.3;
        other[[0, 0]] += 9.0; // outside the mask, must not count
        let got = loss_rec(&other, &img, &mask1).unwrap();
        assert!((got - 0.3).abs() < 1e-6, "{got}");

        // Masked-mean oracle on random images.
        let mut rng = substream(5, "loss-rec-oracle");
        for _ in 0..20 {
            let a = Array2::from_shape_fn((5, 5), |_| rng.gen_range(0.0f32..1.0));
            let b = Array2::from_shape_fn((5, 5), |_| rng.gen_range(0.0f32..1.0));
            let m = Array2::from_shape_fn((5, 5), |_| f32::from(rng.gen_bool(0.6)));
            if m.iter().all(|&v| v == 0.0) {
                continue;
            }
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for i in 0..5 {
                for j in 0..5 {
                    if m[[i, j]] == 1.0 {
                        num += f64::from((a[[i, j]] - b[[i, j]]).abs());
                        den += 1.0;
                    }
                }
            }
            assert!((loss_rec(&a, &b, &m).unwrap() - num / den).abs() < 1e-6);
        }

        let zeros = Array2::<f32>::zeros((4, 4));
        assert!(matches!(
            loss_rec(&img, &img, &zeros),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn sync_loss_trivial_cases() {
        // v == s (both nonzero) -> cos 1 -> loss 0.
        let embedder = SyncEmbedder::new(6, 4);
        let mut g = Graph::new();
        let v = g.input(ndarray::arr1(&[0.3, -0.7, 1.1]).into_dyn());
        let loss = embedder.sync_loss(&mut g, v, v);
        assert!(scalar_value(g.value(loss)).abs() < 1e-12);

        // Orthogonal embeddings clamp to the floor.
        let mut g = Graph::new();
        let a = g.input(ndarray::arr1(&[1.0, 0.0]).into_dyn());
        let b = g.input(ndarray::arr1(&[0.0, 1.0]).into_dyn());
        let loss = embedder.sync_loss(&mut g, a, b);
        let expect = -(SYNC_COS_FLOOR.ln());
        let got = scalar_value(g.value(loss));
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        assert!((got - 16.1181).abs() < 1e-3);
    }

    #[test]
    fn sync_loss_matches_cosine_log_oracle_on_random_windows() {
        let embedder = SyncEmbedder::new(9, 4);
        let mut store = ParamStore::new();
        let mut rng = substream(6, "sync-oracle-init");
        embedder.init(&mut store, &mut rng);
        for trial in 0..10 {
            let kp = Array2::from_shape_fn((5, 9), |_| rng.gen_range(-1.0..1.0));
            let au = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
            let got = embedder.loss_sync(&store, &kp, &au).unwrap();

            // Hand-written oracle: embed both branches through the graph,
            // then cosine + clamp + log with plain arithmetic.
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let kv = g.input(kp.clone().into_dyn());
            let av = g.input(au.clone().into_dyn());
            let vvar = embedder.embed_video(&mut g, &bound, kv);
            let svar = embedder.embed_audio(&mut g, &bound, av);
            let v: Vec<f64> = g.value(vvar).iter().copied().collect();
            let s: Vec<f64> = g.value(svar).iter().copied().collect();
            let dot: f64 = v.iter().zip(&s).map(|(a, b)| a * b).sum();
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let ns = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cos = dot / (nv * ns).max(SYNC_EPS);
            let expect = -cos.clamp(SYNC_COS_FLOOR, 1.0).ln();
            assert!((got - expect).abs() < 1e-6, "trial {trial}: {got} vs {expect}");
        }
    }

    #[test]
    fn sync_loss_is_bounded() {
        let embedder = SyncEmbedder::new(3, 3);
        let mut store = ParamStore::new();
        let mut rng = substream(7, "sync-bounds");
        embedder.init(&mut store, &mut rng);
        for _ in 0..50 {
            let kp = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-2.0..2.0));
            let au = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-2.0..2.0));
            let loss = embedder.loss_sync(&store, &kp, &au).unwrap();
            assert!(loss >= 0.0);
            assert!(loss <= -(SYNC_COS_FLOOR.ln()) + 1e-9);
        }
    }

    #[test]
    fn total_loss_paper_coefficients_example() {
        let w = LossWeights::default();
        assert_eq!(
            (w.exp, w.rec, w.sync, w.norm),
            (100.0, 10.0, 10.0, 0.1)
        );
        let parts = LossParts {
            exp: 0.01,
            rec: 0.02,
            sync: 0.03,
            norm: 0.04,
        };
        let got = total_loss(&parts, &w, true).unwrap();
        assert!((got - 1.504).abs() < 1e-12, "{got}");
        let zero = LossParts::default();
        assert_eq!(total_loss(&zero, &w, true).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_linearity_and_neutral_gating() {
        let mut rng = substream(8, "total-loss");
        for _ in 0..50 {
            let w = LossWeights {
                exp: rng.gen_range(0.0..10.0),
                rec: rng.gen_range(0.0..10.0),
                sync: rng.gen_range(0.0..10.0),
                norm: rng.gen_range(0.0..10.0),
            };
            let parts = LossParts {
                exp: rng.gen_range(0.0..1.0),
                rec: rng.gen_range(0.0..1.0),
                sync: rng.gen_range(0.0..1.0),
                norm: rng.gen_range(0.0..1.0),
            };
            // Weighted-sum oracle.
            let expect =
                w.exp * parts.exp + w.rec * parts.rec + w.sync * parts.sync + w.norm * parts.norm;
            assert_eq!(total_loss(&parts, &w, true).unwrap(), expect);

            // Non-neutral samples ignore the norm part entirely.
            let without = total_loss(&parts, &w, false).unwrap();
            let mut parts2 = parts;
            parts2.norm = 123.0;
            assert_eq!(total_loss(&parts2, &w, false).unwrap(), without);

            // Doubling one part doubles its contribution.
            let mut doubled = parts;
            doubled.exp *= 2.0;
            let d = total_loss(&doubled, &w, true).unwrap() - total_loss(&parts, &w, true).unwrap();
            assert!((d - w.exp * parts.exp).abs() < 1e-12);
        }
        assert!(total_loss(
            &LossParts { exp: -0.1, ..Default::default() },
            &LossWeights::default(),
            false
        )
        .is_err());
    }

    fn toy_clips(n: usize, t: usize, k: usize, da: usize, seed: u64) -> Vec<TrainClip> {
        let mut rng = substream(seed, "train-toy-clips");
        (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { "neutral" } else { "happy" };
                let keypoints = keypoint_seq(t, k, rng.gen(), label);
                let features = AudioFeatureSequence::new(
                    Array2::from_shape_fn((t, da), |_| rng.gen_range(-1.0f32..1.0)),
                    25.0,
                )
                .unwrap();
                let labels = IntensitySequence::new(
                    (0..t).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
                    25.0,
                    true,
                )
                .unwrap();
                TrainClip {
                    clip_id: format!("clip_{i:04}"),
                    keypoints,
                    features,
                    labels: Some(labels),
                }
            })
            .collect()
    }

    fn tiny_model_cfg(k: usize, da: usize) -> TransformerConfig {
        TransformerConfig {
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            token_dim: 12,
            ffn_hidden: 16,
            audio_dim: da,
            emotion_dim: 10,
            keypoints: k,
            max_frames: 32,
            deform_hidden: 8,
            ..TransformerConfig::default()
        }
    }

    #[test]
    fn sync_pretraining_beats_chance_and_is_deterministic() {
        let clips = toy_sync_clips(24, 20, 3, 4, 11);
        let embedder = SyncEmbedder::new(9, 4);
        let p1 = pretrain_sync_embedder(&embedder, &clips, 60, 5).unwrap();
        let p2 = pretrain_sync_embedder(&embedder, &clips, 60, 5).unwrap();
        for (name, t1) in p1.iter() {
            let t2 = p2.get(name);
            assert_eq!(t1, t2, "{name} differs between identical runs");
        }
        let rate = sync_discrimination(&embedder, &p1, &clips, 200, 99).unwrap();
        assert!(rate >= 0.8, "discrimination rate {rate}");

        // Untrained params sit near chance.
        let mut untrained = ParamStore::new();
        let mut rng = substream(12, "sync-untrained");
        embedder.init(&mut untrained, &mut rng);
        let chance = sync_discrimination(&embedder, &untrained, &clips, 400, 100).unwrap();
        assert!((chance - 0.5).abs() <= 0.1, "untrained rate {chance}");

        assert!(matches!(
            pretrain_sync_embedder(&embedder, &clips[..10], 10, 5),
            Err(Error::InsufficientData(_))
        ));
    }

    /// Clips whose mouth row follows the audio energy, so alignment is
    /// learnable.
    fn toy_sync_clips(n: usize, t: usize, k: usize, da: usize, seed: u64) -> Vec<TrainClip> {
        let mut rng = substream(seed, "sync-toy-clips");
        (0..n)
            .map(|i| {
                let envelope: Vec<f32> = (0..t)
                    .map(|j| {
                        let phase = rng.gen_range(0.0f32..6.28);
                        (0.5 + 0.5 * ((j as f32) * 0.7 + phase).sin()).clamp(0.0, 1.0)
                    })
                    .collect();
                let mut frames = Vec::with_capacity(t);
                for (j, &e) in envelope.iter().enumerate() {
                    let mut pts = Array2::<f32>::zeros((k, 3));
                    pts[[k - 1, 1]] = e; // mouth opening follows the envelope
                    frames.push(KeypointFrame::new(pts, j).unwrap());
                }
                let mut feats = Array2::<f32>::zeros((t, da));
                for (j, &e) in envelope.iter().enumerate() {
                    feats[[j, 0]] = e;
                    for d in 1..da {
                        feats[[j, d]] = rng.gen_range(-0.05f32..0.05);
                    }
                }
                TrainClip {
                    clip_id: format!("sync_{i:04}"),
                    keypoints: KeypointSequence {
                        frames,
                        fps: 25.0,
                        identity_id: "id0".into(),
                        emotion_label: "neutral".into(),
                        intensity_level: None,
                    },
                    features: AudioFeatureSequence::new(feats, 25.0).unwrap(),
                    labels: None,
                }
            })
            .collect()
    }

    #[test]
    fn generator_training_descends_and_freezes_the_sync_expert() {
        let k = 3;
        let da = 4;
        let clips = toy_clips(6, 16, k, da, 13);
        let model_cfg = tiny_model_cfg(k, da);
        let transformer = ExpressionTransformer::new(model_cfg);
        let adaptation = AdaptationNet::with_dims(TEXT_DIM, 10, 24);
        let encoder = TextEncoder::build(1, TEXT_DIM, &["neutral", "happy"]);
        let renderer = ToyRenderer {
            height: 16,
            width: 16,
            sigma: 1.2,
            pixels_per_unit: 4.0,
            amplitude: 0.5,
        };
        let norm_map = IntensityNormMap::default();
        let embedder = SyncEmbedder::new(k * 3, da);
        let mut sync_store = ParamStore::new();
        let mut rng = substream(14, "gen-sync-init");
        embedder.init(&mut sync_store, &mut rng);

        let model = GeneratorModel {
            transformer: &transformer,
            adaptation: &adaptation,
            encoder: &encoder,
            renderer: &renderer,
            norm_map: &norm_map,
        };
        let cfg = GeneratorTrainConfig {
            stage1_steps: 12,
            stage2_steps: 12,
            batch_size: 2,
            crop_frames: 12,
            render_frames: 1,
            seed: 15,
            ..GeneratorTrainConfig::default()
        };
        let artifacts = train_generator(&model, &clips, &sync_store, &embedder, &cfg).unwrap();
        assert_eq!(artifacts.log.len(), 24);
        assert!(artifacts.log.iter().take(12).all(|e| e.stage == "pretrain"));
        assert!(artifacts.log.iter().skip(12).all(|e| e.stage == "finetune"));
        // Pretrain-stage sync part is identically zero.
        assert!(artifacts.log.iter().take(12).all(|e| e.parts.sync == 0.0));

        // The frozen expert is bit-identical before and after training.
        for (name, before) in sync_store.iter() {
            let after = artifacts.params.get(name);
            assert_eq!(before, after, "sync param '{name}' changed");
        }

        // Determinism: a second run reproduces the final loss exactly.
        let artifacts2 = train_generator(&model, &clips, &sync_store, &embedder, &cfg).unwrap();
        let a = artifacts.log.last().unwrap().loss;
        let b = artifacts2.log.last().unwrap().loss;
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");

        // Loss descends over the pretrain stage on this toy problem.
        let head = artifacts.log[0].loss;
        let tail = artifacts.log[11].loss;
        assert!(tail < head, "no descent: {head} -> {tail}");
    }

    #[test]
    fn every_parameter_group_receives_gradient_on_an_emotional_batch() {
        let k = 3;
        let da = 4;
        let clips = toy_clips(4, 16, k, da, 16);
        let emotional: Vec<TrainClip> = clips.into_iter().filter(|c| !c.is_neutral()).collect();
        let model_cfg = tiny_model_cfg(k, da);
        let transformer = ExpressionTransformer::new(model_cfg);
        let adaptation = AdaptationNet::with_dims(TEXT_DIM, 10, 24);
        let encoder = TextEncoder::build(1, TEXT_DIM, &["neutral", "happy"]);
        let renderer = ToyRenderer {
            height: 16,
            width: 16,
            sigma: 1.2,
            pixels_per_unit: 4.0,
            amplitude: 0.5,
        };
        let norm_map = IntensityNormMap::default();
        let embedder = SyncEmbedder::new(k * 3, da);

        let mut store = ParamStore::new();
        let mut rng = substream(17, "gradient-flow");
        transformer.init(&mut store, &mut rng);
        adaptation.init(&mut store, &mut rng);
        embedder.init(&mut store, &mut rng);

        let model = GeneratorModel {
            transformer: &transformer,
            adaptation: &adaptation,
            encoder: &encoder,
            renderer: &renderer,
            norm_map: &norm_map,
        };
        let cfg = GeneratorTrainConfig {
            crop_frames: 12,
            render_frames: 1,
            seed: 18,
            ..GeneratorTrainConfig::default()
        };
        let kp_mat = sequence_to_matrix(&emotional[0].keypoints);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let mut step_rng = substream(19, "gradient-flow-step");
        let (loss, _) = clip_loss(
            &model,
            &embedder,
            &cfg,
            Stage::Finetune,
            &mut g,
            &bound,
            &emotional[0],
            &kp_mat,
            &mut step_rng,
        )
        .unwrap();
        let grads = g.backward(loss);
        for prefix in ["xf.", "defo.", "adapt."] {
            let mut any_nonzero = false;
            for (name, var) in bound.iter() {
                if !name.starts_with(prefix) {
                    continue;
                }
                if let Some(grad) = grads.get(var) {
                    if grad.iter().any(|&v| v != 0.0) {
                        any_nonzero = true;
                        break;
                    }
                }
            }
            assert!(any_nonzero, "no gradient reached group '{prefix}'");
        }
    }

    #[test]
    fn stage_requirements_are_validated() {
        let k = 2;
        let da = 3;
        let transformer = ExpressionTransformer::new(tiny_model_cfg(k, da));
        let adaptation = AdaptationNet::with_dims(TEXT_DIM, 10, 24);
        let encoder = TextEncoder::build(1, TEXT_DIM, &["neutral", "happy"]);
        let renderer = ToyRenderer::default();
        let norm_map = IntensityNormMap::default();
        let embedder = SyncEmbedder::new(k * 3, da);
        let mut sync_store = ParamStore::new();
        let mut rng = substream(20, "stage-validate");
        embedder.init(&mut sync_store, &mut rng);
        let model = GeneratorModel {
            transformer: &transformer,
            adaptation: &adaptation,
            encoder: &encoder,
            renderer: &renderer,
            norm_map: &norm_map,
        };
        let cfg = GeneratorTrainConfig {
            stage1_steps: 1,
            stage2_steps: 1,
            batch_size: 1,
            crop_frames: 8,
            render_frames: 0,
            seed: 21,
            ..GeneratorTrainConfig::default()
        };

        // No neutral clips: pretraining cannot run.
        let mut clips = toy_clips(2, 12, k, da, 22);
        clips.retain(|c| !c.is_neutral());
        assert!(matches!(
            train_generator(&model, &clips, &sync_store, &embedder, &cfg),
            Err(Error::InsufficientData(_))
        ));

        // Missing labels on an emotional clip: fine-tune stage must refuse.
        let mut clips = toy_clips(4, 12, k, da, 23);
        for c in &mut clips {
            if !c.is_neutral() {
                c.labels = None;
            }
        }
        assert!(matches!(
            train_generator(&model, &clips, &sync_store, &embedder, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn loss_rec_rejects_nonbinary_mask() {
        let img = arr2(&[[0.5f32]]);
        let mask = arr2(&[[0.5f32]]);
        assert!(matches!(
            loss_rec(&img, &img, &mask),
            Err(Error::Domain(_))
        ));
    }
}
