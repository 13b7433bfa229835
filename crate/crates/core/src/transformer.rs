//! Audio-to-expression transformer with emotion-token conditioning, the
//! additive deformation sub-network, and the toy differentiable renderer.
//!
//! The encoder self-attends over projected audio tokens with the projected
//! emotion token prepended to every layer's input (its output slot is
//! dropped before the next layer). The decoder runs learned positional
//! queries, one per output frame, through self-attention and cross-attention
//! over the encoder memory, with the same per-layer emotion token. Frame-wise
//! conditioning prepends the mean token and injects the per-frame deviation
//! from that mean additively at each frame position, which reduces exactly
//! to the prepend-only path when every frame carries the same embedding.
//!
//! The emotion-free pathway is this same network conditioned on the zero
//! embedding; stage-one pretraining runs it that way.

use ndarray::{Array1, Array2, ArrayD, Axis};

use crate::autodiff::{Graph, Tensor, Var};
use crate::emotion::{rescale_to_norm, EmotionEmbedding, IntensityNormMap, EMOTION_DIM};
use crate::error::{Error, Result};
use crate::nn::{Bound, LayerNorm, Linear, ParamStore};
use crate::types::{AudioFeatureSequence, IntensitySequence, KeypointFrame, KeypointSequence};

/// Transformer and deformation-network architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub token_dim: usize,
    pub ffn_hidden: usize,
    /// Audio feature width entering the input projection.
    pub audio_dim: usize,
    pub emotion_dim: usize,
    /// Keypoints per frame.
    pub keypoints: usize,
    /// Positional table size; sequences longer than this are rejected.
    pub max_frames: usize,
    /// Per-layer self-attention window for the encoder (`None` = full).
    pub enc_window: Option<usize>,
    /// Cross-attention look-ahead window for the decoder (`None` = full).
    pub dec_window: Option<usize>,
    /// Look-ahead window for decoder self-attention (`None` = full). The
    /// effective audio horizon of output frame `t` is
    /// `dec_window + (decoder_layers - 1) * dec_self_window
    ///  + encoder_layers * enc_window`.
    pub dec_self_window: Option<usize>,
    /// Whether the emotion token is injected into the encoder stack.
    pub emotion_in_encoder: bool,
    /// Whether the emotion token is injected into the decoder stack.
    pub emotion_in_decoder: bool,
    /// Deformation sub-network hidden width.
    pub deform_hidden: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 6,
            decoder_layers: 6,
            heads: 8,
            token_dim: 128,
            ffn_hidden: 1024,
            audio_dim: crate::audio::FEATURE_DIM,
            emotion_dim: EMOTION_DIM,
            keypoints: 15,
            max_frames: 200,
            enc_window: None,
            dec_window: None,
            dec_self_window: None,
            emotion_in_encoder: true,
            emotion_in_decoder: true,
            deform_hidden: 256,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "token_dim {} not divisible by heads {}",
                self.token_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Emotion conditioning for one forward pass.
#[derive(Debug, Clone)]
pub enum EmotionCondition {
    /// One embedding for the whole clip.
    Constant(EmotionEmbedding),
    /// One embedding per output frame.
    PerFrame(Vec<EmotionEmbedding>),
}

/// Graph-side conditioning (embeddings already on the tape, so gradients can
/// flow into whatever produced them).
pub enum GraphCondition {
    /// `(emotion_dim,)`.
    Constant(Var),
    /// `(t, emotion_dim)`.
    PerFrame(Var),
}

struct AttentionBlock {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
}

impl AttentionBlock {
    fn new(prefix: &str, dim: usize, heads: usize) -> Self {
        Self {
            wq: Linear::new(format!("{prefix}.wq"), dim, dim),
            wk: Linear::new(format!("{prefix}.wk"), dim, dim),
            wv: Linear::new(format!("{prefix}.wv"), dim, dim),
            wo: Linear::new(format!("{prefix}.wo"), dim, dim),
            heads,
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl rand::Rng) {
        self.wq.init(store, rng);
        self.wk.init(store, rng);
        self.wv.init(store, rng);
        self.wo.init(store, rng);
    }

    /// Multi-head attention of `(tq, d)` queries over `(tk, d)` keys/values.
    fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        q_in: Var,
        kv_in: Var,
        mask: Option<&Array2<f64>>,
    ) -> Var {
        let d = self.wq.in_dim;
        let dh = d / self.heads;
        let q = self.wq.forward(g, p, q_in);
        let k = self.wk.forward(g, p, kv_in);
        let v = self.wv.forward(g, p, kv_in);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_axis(q, 1, h * dh, dh);
            let kh = g.slice_axis(k, 1, h * dh, dh);
            let vh = g.slice_axis(v, 1, h * dh, dh);
            let kt = g.transpose2(kh);
            let scores = g.matmul(qh, kt);
            let scaled = g.scale(scores, scale);
            let weights = g.softmax_rows(scaled, mask);
            head_outputs.push(g.matmul(weights, vh));
        }
        let merged = g.concat(1, &head_outputs);
        self.wo.forward(g, p, merged)
    }
}

struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    fn new(prefix: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(format!("{prefix}.fc1"), dim, hidden),
            fc2: Linear::new(format!("{prefix}.fc2"), hidden, dim),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl rand::Rng) {
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = self.fc1.forward(g, p, x);
        let h = g.relu(h);
        self.fc2.forward(g, p, h)
    }
}

struct EncoderLayer {
    attn: AttentionBlock,
    ffn: FeedForward,
    ln1: LayerNorm,
    ln2: LayerNorm,
}

struct DecoderLayer {
    self_attn: AttentionBlock,
    cross_attn: AttentionBlock,
    ffn: FeedForward,
    ln1: LayerNorm,
    ln2: LayerNorm,
    ln3: LayerNorm,
}

/// Transformer parameter layout (`xf.*` and `defo.*` archive names).
pub struct ExpressionTransformer {
    pub cfg: TransformerConfig,
    in_proj: Linear,
    emo_proj: Linear,
    out_head: Linear,
    defo_fc1: Linear,
    defo_fc2: Linear,
    enc_layers: Vec<EncoderLayer>,
    dec_layers: Vec<DecoderLayer>,
}

impl ExpressionTransformer {
    pub fn new(cfg: TransformerConfig) -> Self {
        cfg.validate().expect("valid transformer config");
        let d = cfg.token_dim;
        let enc_layers = (1..=cfg.encoder_layers)
            .map(|i| EncoderLayer {
                attn: AttentionBlock::new(&format!("xf.enc.l{i}.attn"), d, cfg.heads),
                ffn: FeedForward::new(&format!("xf.enc.l{i}.ffn"), d, cfg.ffn_hidden),
                ln1: LayerNorm::new(format!("xf.enc.l{i}.ln1"), d),
                ln2: LayerNorm::new(format!("xf.enc.l{i}.ln2"), d),
            })
            .collect();
        let dec_layers = (1..=cfg.decoder_layers)
            .map(|i| DecoderLayer {
                self_attn: AttentionBlock::new(&format!("xf.dec.l{i}.self_attn"), d, cfg.heads),
                cross_attn: AttentionBlock::new(&format!("xf.dec.l{i}.cross_attn"), d, cfg.heads),
                ffn: FeedForward::new(&format!("xf.dec.l{i}.ffn"), d, cfg.ffn_hidden),
                ln1: LayerNorm::new(format!("xf.dec.l{i}.ln1"), d),
                ln2: LayerNorm::new(format!("xf.dec.l{i}.ln2"), d),
                ln3: LayerNorm::new(format!("xf.dec.l{i}.ln3"), d),
            })
            .collect();
        Self {
            in_proj: Linear::new("xf.in_proj", cfg.audio_dim, d),
            emo_proj: Linear::new("xf.emo_proj", cfg.emotion_dim, d),
            out_head: Linear::new("xf.out_head", d, cfg.keypoints * 3),
            defo_fc1: Linear::new("defo.fc1", cfg.emotion_dim, cfg.deform_hidden),
            defo_fc2: Linear::new("defo.fc2", cfg.deform_hidden, cfg.keypoints * 3),
            enc_layers,
            dec_layers,
            cfg,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl rand::Rng) {
        self.in_proj.init(store, rng);
        self.emo_proj.init(store, rng);
        self.out_head.init(store, rng);
        self.defo_fc1.init(store, rng);
        self.defo_fc2.init(store, rng);
        for l in &self.enc_layers {
            l.attn.init(store, rng);
            l.ffn.init(store, rng);
            l.ln1.init(store);
            l.ln2.init(store);
        }
        for l in &self.dec_layers {
            l.self_attn.init(store, rng);
            l.cross_attn.init(store, rng);
            l.ffn.init(store, rng);
            l.ln1.init(store);
            l.ln2.init(store);
            l.ln3.init(store);
        }
        store.insert(
            "xf.pos_enc",
            crate::nn::xavier_uniform(
                &[self.cfg.max_frames, self.cfg.token_dim],
                self.cfg.token_dim,
                self.cfg.token_dim,
                rng,
            ),
        );
        store.insert(
            "xf.queries",
            crate::nn::xavier_uniform(
                &[self.cfg.max_frames, self.cfg.token_dim],
                self.cfg.token_dim,
                self.cfg.token_dim,
                rng,
            ),
        );
    }

    /// Additive `-inf` mask for the encoder's windowed self-attention over
    /// `t` audio tokens plus the prepended emotion slot at index 0.
    fn enc_mask(&self, t: usize) -> Option<Array2<f64>> {
        let w = self.cfg.enc_window?;
        let n = t + 1;
        let mut mask = Array2::<f64>::zeros((n, n));
        for i in 0..t {
            for j in 0..t {
                if i.abs_diff(j) > w {
                    mask[[i + 1, j + 1]] = f64::NEG_INFINITY;
                }
            }
        }
        Some(mask)
    }

    /// Cross-attention mask: query frame `t` may read memory indices up to
    /// `t + dec_window`; the emotion slot (row 0) reads everything.
    fn dec_cross_mask(&self, t: usize) -> Option<Array2<f64>> {
        let w = self.cfg.dec_window?;
        let mut mask = Array2::<f64>::zeros((t + 1, t));
        for q in 0..t {
            for m in 0..t {
                if m > q + w {
                    mask[[q + 1, m]] = f64::NEG_INFINITY;
                }
            }
        }
        Some(mask)
    }

    /// Decoder self-attention mask: query `t` may read queries up to
    /// `t + dec_self_window` (full past allowed); slot 0 is unrestricted.
    fn dec_self_mask(&self, t: usize) -> Option<Array2<f64>> {
        let w = self.cfg.dec_self_window?;
        let n = t + 1;
        let mut mask = Array2::<f64>::zeros((n, n));
        for q in 0..t {
            for s in 0..t {
                if s > q + w {
                    mask[[q + 1, s + 1]] = f64::NEG_INFINITY;
                }
            }
        }
        Some(mask)
    }

    /// Projected emotion token `(1, d)` and optional per-frame deviation
    /// rows `(t, d)` for frame-wise conditioning.
    fn project_condition(
        &self,
        g: &mut Graph,
        p: &Bound,
        cond: &GraphCondition,
        t: usize,
    ) -> (Var, Option<Var>) {
        match cond {
            GraphCondition::Constant(e) => {
                let row = g.reshape(*e, &[1, self.cfg.emotion_dim]);
                let tok = self.emo_proj.forward(g, p, row);
                (tok, None)
            }
            GraphCondition::PerFrame(rows) => {
                let sum = g.sum_axis(*rows, 0);
                let mean = g.scale(sum, 1.0 / t as f64);
                let mean_row = g.reshape(mean, &[1, self.cfg.emotion_dim]);
                let tok = self.emo_proj.forward(g, p, mean_row);
                // Per-frame deviations from the mean, projected to token space.
                let proj_rows = self.emo_proj.forward(g, p, *rows);
                let mean_tok_b = broadcast_rows(g, tok, t);
                let dev = g.sub(proj_rows, mean_tok_b);
                (tok, Some(dev))
            }
        }
    }

    /// Full graph forward; returns `(transformer_out, deformation_offsets)`,
    /// both `(t, k*3)`. The final keypoints are their sum.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        audio: &AudioFeatureSequence,
        cond: &GraphCondition,
    ) -> Result<(Var, Var)> {
        let t = audio.len();
        if t > self.cfg.max_frames {
            return Err(Error::Capacity(format!(
                "sequence of {t} frames exceeds positional table of {}",
                self.cfg.max_frames
            )));
        }
        if audio.dim() != self.cfg.audio_dim {
            return Err(Error::Dimension(format!(
                "audio feature width {} does not match configured {}",
                audio.dim(),
                self.cfg.audio_dim
            )));
        }
        match cond {
            GraphCondition::Constant(e) => {
                if g.value(*e).len() != self.cfg.emotion_dim {
                    return Err(Error::Dimension(format!(
                        "emotion embedding width {} does not match configured {}",
                        g.value(*e).len(),
                        self.cfg.emotion_dim
                    )));
                }
            }
            GraphCondition::PerFrame(rows) => {
                let shape = g.value(*rows).shape().to_vec();
                if shape != [t, self.cfg.emotion_dim] {
                    return Err(Error::Dimension(format!(
                        "per-frame emotion condition has shape {shape:?}, expected [{t}, {}]",
                        self.cfg.emotion_dim
                    )));
                }
            }
        }

        let (emo_tok, frame_dev) = self.project_condition(g, p, cond, t);

        // Audio tokens: projected features plus learned positions.
        let feats = Array2::from_shape_fn((t, self.cfg.audio_dim), |(i, j)| {
            f64::from(audio.features[[i, j]])
        });
        let feats_var = g.input(feats.into_dyn());
        let tokens = self.in_proj.forward(g, p, feats_var);
        let pos = p.var("xf.pos_enc");
        let pos_t = g.slice_axis(pos, 0, 0, t);
        let mut x = g.add(tokens, pos_t);

        // Encoder stack with the per-layer emotion token.
        let enc_mask = self.enc_mask(t);
        for layer in &self.enc_layers {
            let injected = if self.cfg.emotion_in_encoder {
                if let Some(dev) = frame_dev {
                    g.add(x, dev)
                } else {
                    x
                }
            } else {
                x
            };
            let aug = if self.cfg.emotion_in_encoder {
                g.concat(0, &[emo_tok, injected])
            } else {
                injected
            };
            let mask = if self.cfg.emotion_in_encoder {
                enc_mask.as_ref()
            } else {
                None
            };
            let h1 = layer.ln1.forward(g, p, aug);
            let attn = layer.attn.forward(g, p, h1, h1, mask);
            let aug = g.add(aug, attn);
            let h2 = layer.ln2.forward(g, p, aug);
            let ff = layer.ffn.forward(g, p, h2);
            let aug = g.add(aug, ff);
            // Drop the emotion slot before the next layer's audio tokens.
            x = if self.cfg.emotion_in_encoder {
                g.slice_axis(aug, 0, 1, t)
            } else {
                aug
            };
        }
        let memory = x;

        // Decoder: learned positional queries, one per output frame.
        let queries_table = p.var("xf.queries");
        let mut q = g.slice_axis(queries_table, 0, 0, t);
        let cross_mask = self.dec_cross_mask(t);
        let cross_mask_plain = cross_mask.as_ref().map(|m| {
            // Variant without the emotion row for decoders that skip it.
            m.slice_axis(Axis(0), ndarray::Slice::from(1..)).to_owned()
        });
        let self_mask = self.dec_self_mask(t);
        let self_mask_plain = self_mask.as_ref().map(|m| {
            m.slice(ndarray::s![1.., 1..]).to_owned()
        });
        for layer in &self.dec_layers {
            let injected = if self.cfg.emotion_in_decoder {
                if let Some(dev) = frame_dev {
                    g.add(q, dev)
                } else {
                    q
                }
            } else {
                q
            };
            let aug = if self.cfg.emotion_in_decoder {
                g.concat(0, &[emo_tok, injected])
            } else {
                injected
            };
            let h1 = layer.ln1.forward(g, p, aug);
            let smask = if self.cfg.emotion_in_decoder {
                self_mask.as_ref()
            } else {
                self_mask_plain.as_ref()
            };
            let sa = layer.self_attn.forward(g, p, h1, h1, smask);
            let aug = g.add(aug, sa);
            let h2 = layer.ln2.forward(g, p, aug);
            let mask = if self.cfg.emotion_in_decoder {
                cross_mask.as_ref()
            } else {
                cross_mask_plain.as_ref()
            };
            let ca = layer.cross_attn.forward(g, p, h2, memory, mask);
            let aug = g.add(aug, ca);
            let h3 = layer.ln3.forward(g, p, aug);
            let ff = layer.ffn.forward(g, p, h3);
            let aug = g.add(aug, ff);
            q = if self.cfg.emotion_in_decoder {
                g.slice_axis(aug, 0, 1, t)
            } else {
                aug
            };
        }
        let base = self.out_head.forward(g, p, q);

        // Deformation offsets from the conditioning embedding(s).
        let offsets = match cond {
            GraphCondition::Constant(e) => {
                let row = g.reshape(*e, &[1, self.cfg.emotion_dim]);
                let h = self.defo_fc1.forward(g, p, row);
                let h = g.relu(h);
                let off = self.defo_fc2.forward(g, p, h);
                broadcast_rows(g, off, t)
            }
            GraphCondition::PerFrame(rows) => {
                let h = self.defo_fc1.forward(g, p, *rows);
                let h = g.relu(h);
                self.defo_fc2.forward(g, p, h)
            }
        };
        Ok((base, offsets))
    }

    /// Forward pass outside training; deterministic given params and inputs.
    pub fn forward(
        &self,
        store: &ParamStore,
        audio: &AudioFeatureSequence,
        cond: &EmotionCondition,
    ) -> Result<KeypointSequence> {
        let (base, offsets) = self.forward_values(store, audio, cond)?;
        let summed = &base + &offsets;
        self.to_sequence(&summed, audio.fps)
    }

    /// Forward pass returning the transformer output and deformation offsets
    /// separately (both `(t, k*3)` in f64).
    pub fn forward_values(
        &self,
        store: &ParamStore,
        audio: &AudioFeatureSequence,
        cond: &EmotionCondition,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let t = audio.len();
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let graph_cond = lift_condition(&mut g, cond, t, self.cfg.emotion_dim)?;
        let (base, offsets) = self.forward_graph(&mut g, &bound, audio, &graph_cond)?;
        let base = to_2d(g.value(base));
        let offsets = to_2d(g.value(offsets));
        Ok((base, offsets))
    }

    fn to_sequence(&self, flat: &Array2<f64>, fps: f32) -> Result<KeypointSequence> {
        let k = self.cfg.keypoints;
        let frames = flat
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                let pts = Array2::from_shape_fn((k, 3), |(a, b)| row[a * 3 + b] as f32);
                KeypointFrame::new(pts, i)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(KeypointSequence {
            frames,
            fps,
            identity_id: String::new(),
            emotion_label: String::new(),
            intensity_level: None,
        })
    }
}

/// Put an [`EmotionCondition`] onto the tape as constants.
pub fn lift_condition(
    g: &mut Graph,
    cond: &EmotionCondition,
    t: usize,
    emotion_dim: usize,
) -> Result<GraphCondition> {
    match cond {
        EmotionCondition::Constant(e) => {
            if e.vector.len() != emotion_dim {
                return Err(Error::Dimension(format!(
                    "emotion embedding width {} does not match configured {emotion_dim}",
                    e.vector.len()
                )));
            }
            let arr = Array1::from_iter(e.vector.iter().map(|&v| f64::from(v)));
            Ok(GraphCondition::Constant(g.input(arr.into_dyn())))
        }
        EmotionCondition::PerFrame(rows) => {
            if rows.len() != t {
                return Err(Error::Alignment(format!(
                    "{} per-frame embeddings for {t} frames",
                    rows.len()
                )));
            }
            let mut arr = Array2::<f64>::zeros((t, emotion_dim));
            for (i, e) in rows.iter().enumerate() {
                if e.vector.len() != emotion_dim {
                    return Err(Error::Dimension(format!(
                        "frame {i} embedding width {} does not match configured {emotion_dim}",
                        e.vector.len()
                    )));
                }
                for (j, &v) in e.vector.iter().enumerate() {
                    arr[[i, j]] = f64::from(v);
                }
            }
            Ok(GraphCondition::PerFrame(g.input(arr.into_dyn())))
        }
    }
}

/// Repeat a `(1, d)` row `t` times (shared gradient accumulates).
fn broadcast_rows(g: &mut Graph, row: Var, t: usize) -> Var {
    let rows: Vec<Var> = (0..t).map(|_| row).collect();
    g.concat(0, &rows)
}

fn to_2d(v: &Tensor) -> Array2<f64> {
    v.view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned()
}

/// Map a per-frame intensity trace to a sequence of same-direction,
/// varying-norm embeddings. Frames at intensity zero collapse to the zero
/// vector (the origin is the neutral point of the space).
pub fn sequence_emotion_condition(
    direction: &EmotionEmbedding,
    intensities: &IntensitySequence,
    map: &IntensityNormMap,
) -> Result<Vec<EmotionEmbedding>> {
    if direction.norm() <= crate::emotion::DEGENERATE_NORM {
        return Err(Error::Degenerate(
            "cannot build a conditioning sequence from a zero direction".into(),
        ));
    }
    if !intensities.normalized {
        return Err(Error::Domain(
            "conditioning expects a normalized intensity sequence".into(),
        ));
    }
    let dim = direction.vector.len();
    intensities
        .values
        .iter()
        .map(|&intensity| {
            let norm = map.norm_for_intensity(intensity)?;
            if norm == 0.0 {
                Ok(EmotionEmbedding {
                    vector: vec![0.0; dim],
                    rescaled: true,
                })
            } else {
                rescale_to_norm(direction, norm)
            }
        })
        .collect()
}

// ---- toy renderer ----

/// Differentiable Gaussian-splat renderer standing in for the photoreal
/// generator. Orthographic drop-z projection onto an `h x w` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyRenderer {
    pub height: usize,
    pub width: usize,
    /// Splat standard deviation in pixels.
    pub sigma: f32,
    /// Model units to pixels.
    pub pixels_per_unit: f32,
    /// Peak contribution of a single splat.
    pub amplitude: f32,
}

impl Default for ToyRenderer {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            sigma: 1.5,
            pixels_per_unit: 8.0,
            amplitude: 0.8,
        }
    }
}

impl ToyRenderer {
    /// Pixel-space center of a keypoint.
    fn project(&self, x: f64, y: f64) -> (f64, f64) {
        let px = f64::from(self.pixels_per_unit) * x + (self.width as f64 - 1.0) / 2.0;
        let py = f64::from(self.pixels_per_unit) * y + (self.height as f64 - 1.0) / 2.0;
        (px, py)
    }

    /// Unclipped splat accumulation; linear in the splats.
    fn accumulate(&self, points: &Array2<f64>) -> Array2<f64> {
        let (h, w) = (self.height, self.width);
        let sigma = f64::from(self.sigma);
        let amp = f64::from(self.amplitude);
        let inv2s2 = 1.0 / (2.0 * sigma * sigma);
        let mut img = Array2::<f64>::zeros((h, w));
        for kp in points.rows() {
            let (px, py) = self.project(kp[0], kp[1]);
            for i in 0..h {
                for j in 0..w {
                    let dx = j as f64 - px;
                    let dy = i as f64 - py;
                    img[[i, j]] += amp * (-(dx * dx + dy * dy) * inv2s2).exp();
                }
            }
        }
        img
    }

    /// Render one frame to `[0, 1]` pixel values.
    pub fn render(&self, frame: &KeypointFrame) -> Result<Array2<f32>> {
        if frame.points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite keypoints".into()));
        }
        let pts = frame.points.mapv(f64::from);
        let img = self.accumulate(&pts);
        Ok(img.mapv(|v| v.clamp(0.0, 1.0) as f32))
    }

    /// Graph render of `(k, 3)` keypoints to a clipped `(h, w)` image, with
    /// an analytic backward pass into the keypoint coordinates.
    pub fn render_graph(&self, g: &mut Graph, points: Var) -> Var {
        let pts_val = to_2d(g.value(points));
        let raw = self.accumulate(&pts_val);
        let clipped = raw.mapv(|v| v.clamp(0.0, 1.0));
        let renderer = self.clone();
        g.custom_op(
            clipped.into_dyn(),
            &[points],
            Box::new(move |grad, _, parents| {
                let pts = parents[0].view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let gm = grad.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let (h, w) = (renderer.height, renderer.width);
                let sigma = f64::from(renderer.sigma);
                let amp = f64::from(renderer.amplitude);
                let inv2s2 = 1.0 / (2.0 * sigma * sigma);
                let ppu = f64::from(renderer.pixels_per_unit);
                // Recompute the raw accumulation to find saturated pixels.
                let raw = renderer.accumulate(&pts.to_owned());
                let mut dpts = Array2::<f64>::zeros(pts.dim());
                for (kidx, kp) in pts.rows().into_iter().enumerate() {
                    let (px, py) = renderer.project(kp[0], kp[1]);
                    let mut gx = 0.0;
                    let mut gy = 0.0;
                    for i in 0..h {
                        for j in 0..w {
                            if raw[[i, j]] >= 1.0 || raw[[i, j]] <= 0.0 {
                                continue; // clipped pixels pass no gradient
                            }
                            let dx = j as f64 - px;
                            let dy = i as f64 - py;
                            let e = amp * (-(dx * dx + dy * dy) * inv2s2).exp();
                            // d e / d px = e * dx / sigma^2, d px / d x = ppu
                            gx += gm[[i, j]] * e * dx / (sigma * sigma) * ppu;
                            gy += gm[[i, j]] * e * dy / (sigma * sigma) * ppu;
                        }
                    }
                    dpts[[kidx, 0]] = gx;
                    dpts[[kidx, 1]] = gy;
                    // z is dropped by the projection; its gradient is zero.
                }
                vec![dpts.into_dyn()]
            }),
        )
    }

    /// Mask of pixels within `radius_sigmas * sigma` of any projected
    /// keypoint; the toy world's notion of the facial region.
    pub fn facial_mask(&self, frame: &KeypointFrame, radius_sigmas: f32) -> Array2<f32> {
        let r = f64::from(self.sigma * radius_sigmas);
        let r2 = r * r;
        let mut mask = Array2::<f32>::zeros((self.height, self.width));
        for kp in frame.points.rows() {
            let (px, py) = self.project(f64::from(kp[0]), f64::from(kp[1]));
            for i in 0..self.height {
                for j in 0..self.width {
                    let dx = j as f64 - px;
                    let dy = i as f64 - py;
                    if dx * dx + dy * dy <= r2 {
                        mask[[i, j]] = 1.0;
                    }
                }
            }
        }
        mask
    }

    /// Persist renderer settings under `renderer.*` names.
    pub fn save(&self, archive: &mut crate::archive::Archive) {
        archive.insert(
            "renderer.image_size",
            vec![2],
            vec![self.height as f32, self.width as f32],
        );
        archive.insert("renderer.sigma", vec![1], vec![self.sigma]);
        archive.insert(
            "renderer.pixels_per_unit",
            vec![1],
            vec![self.pixels_per_unit],
        );
        archive.insert("renderer.amplitude", vec![1], vec![self.amplitude]);
    }

    pub fn load(archive: &crate::archive::Archive) -> Result<Self> {
        let size = archive
            .get("renderer.image_size")
            .ok_or_else(|| Error::Config("archive has no renderer entries".into()))?;
        let get1 = |name: &str| -> Result<f32> {
            archive
                .get(name)
                .map(|e| e.data[0])
                .ok_or_else(|| Error::Config(format!("archive missing '{name}'")))
        };
        Ok(Self {
            height: size.data[0] as usize,
            width: size.data[1] as usize,
            sigma: get1("renderer.sigma")?,
            pixels_per_unit: get1("renderer.pixels_per_unit")?,
            amplitude: get1("renderer.amplitude")?,
        })
    }
}

/// Keypoint sequence as a `(t, k*3)` f64 matrix.
pub fn sequence_to_matrix(seq: &KeypointSequence) -> Array2<f64> {
    let t = seq.len();
    let k3 = seq.num_points() * 3;
    let mut out = Array2::<f64>::zeros((t, k3));
    for (i, frame) in seq.frames.iter().enumerate() {
        for (j, &v) in frame.points.iter().enumerate() {
            out[[i, j]] = f64::from(v);
        }
    }
    out
}

/// `(t, k*3)` matrix view of one frame as a `(k, 3)` keypoint frame.
pub fn matrix_row_to_frame(row: ndarray::ArrayView1<'_, f64>, index: usize) -> KeypointFrame {
    let k = row.len() / 3;
    let pts = Array2::from_shape_fn((k, 3), |(a, b)| row[a * 3 + b] as f32);
    KeypointFrame::new(pts, index).expect("finite keypoints")
}

/// Flat tensor of a keypoint frame for graph input.
pub fn frame_to_tensor(frame: &KeypointFrame) -> Tensor {
    ArrayD::from_shape_vec(
        ndarray::IxDyn(&[frame.num_points(), 3]),
        frame.points.iter().map(|&v| f64::from(v)).collect(),
    )
    .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::scalar_value;
    use crate::rng::substream;
    use rand::Rng;

    fn tiny_cfg() -> TransformerConfig {
        TransformerConfig {
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            token_dim: 16,
            ffn_hidden: 24,
            audio_dim: 5,
            emotion_dim: 12,
            keypoints: 4,
            max_frames: 32,
            enc_window: None,
            dec_window: None,
            dec_self_window: None,
            emotion_in_encoder: true,
            emotion_in_decoder: true,
            deform_hidden: 8,
        }
    }

    fn random_model(cfg: TransformerConfig, seed: u64) -> (ExpressionTransformer, ParamStore) {
        let model = ExpressionTransformer::new(cfg);
        let mut store = ParamStore::new();
        let mut rng = substream(seed, "xf-test-init");
        model.init(&mut store, &mut rng);
        (model, store)
    }

    fn random_audio(t: usize, dim: usize, seed: u64) -> AudioFeatureSequence {
        let mut rng = substream(seed, "xf-test-audio");
        AudioFeatureSequence::new(
            Array2::from_shape_fn((t, dim), |_| rng.gen_range(-1.0f32..1.0)),
            25.0,
        )
        .unwrap()
    }

    fn random_embedding(dim: usize, seed: u64) -> EmotionEmbedding {
        let mut rng = substream(seed, "xf-test-emb");
        EmotionEmbedding {
            vector: (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            rescaled: false,
        }
    }

    #[test]
    fn forward_shape_contract() {
        let (model, store) = random_model(tiny_cfg(), 1);
        let audio = random_audio(10, 5, 2);
        let emb = random_embedding(12, 3);
        let seq = model
            .forward(&store, &audio, &EmotionCondition::Constant(emb))
            .unwrap();
        assert_eq!(seq.len(), 10);
        assert_eq!(seq.num_points(), 4);
    }

    #[test]
    fn capacity_and_dimension_errors() {
        let (model, store) = random_model(tiny_cfg(), 4);
        let audio = random_audio(40, 5, 5);
        let emb = random_embedding(12, 6);
        assert!(matches!(
            model.forward(&store, &audio, &EmotionCondition::Constant(emb.clone())),
            Err(Error::Capacity(_))
        ));
        let audio = random_audio(8, 5, 7);
        let bad = random_embedding(9, 8);
        assert!(matches!(
            model.forward(&store, &audio, &EmotionCondition::Constant(bad)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let (model, store) = random_model(tiny_cfg(), 9);
        let audio = random_audio(6, 5, 10);
        let emb = random_embedding(12, 11);
        let cond = EmotionCondition::Constant(emb);
        let a = model.forward(&store, &audio, &cond).unwrap();
        let b = model.forward(&store, &audio, &cond).unwrap();
        for (fa, fb) in a.frames.iter().zip(b.frames.iter()) {
            for (x, y) in fa.points.iter().zip(fb.points.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn zero_deformation_params_add_exactly_nothing() {
        let (model, mut store) = random_model(tiny_cfg(), 12);
        // Zero the deformation net and condition with the zero embedding:
        // the output must equal the bare transformer pathway exactly.
        for name in ["defo.fc1", "defo.fc2"] {
            let w_shape = store.get(&format!("{name}.weight")).shape().to_vec();
            let b_shape = store.get(&format!("{name}.bias")).shape().to_vec();
            store.insert(format!("{name}.weight"), ArrayD::zeros(ndarray::IxDyn(&w_shape)));
            store.insert(format!("{name}.bias"), ArrayD::zeros(ndarray::IxDyn(&b_shape)));
        }
        let audio = random_audio(7, 5, 13);
        let zero = EmotionEmbedding::zeros(12);
        let (base, offsets) = model
            .forward_values(&store, &audio, &EmotionCondition::Constant(zero.clone()))
            .unwrap();
        assert!(offsets.iter().all(|&v| v == 0.0));
        let seq = model
            .forward(&store, &audio, &EmotionCondition::Constant(zero))
            .unwrap();
        let flat = sequence_to_matrix(&seq);
        for (a, b) in flat.iter().zip(base.iter()) {
            assert_eq!(*a, *b as f32 as f64 * 1.0, "sum with zero offsets is the base");
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn constant_condition_equals_uniform_per_frame_condition() {
        // The frame-wise path must reduce to the prepend-only path when all
        // frames carry the same embedding.
        let (model, store) = random_model(tiny_cfg(), 14);
        let audio = random_audio(5, 5, 15);
        let emb = random_embedding(12, 16);
        let constant = model
            .forward(&store, &audio, &EmotionCondition::Constant(emb.clone()))
            .unwrap();
        let per_frame = model
            .forward(
                &store,
                &audio,
                &EmotionCondition::PerFrame(vec![emb; 5]),
            )
            .unwrap();
        for (fa, fb) in constant.frames.iter().zip(per_frame.frames.iter()) {
            for (x, y) in fa.points.iter().zip(fb.points.iter()) {
                assert!((x - y).abs() < 1e-5, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn norm_difference_changes_output() {
        let (model, store) = random_model(tiny_cfg(), 17);
        let audio = random_audio(6, 5, 18);
        let dir = random_embedding(12, 19);
        let low = rescale_to_norm(&dir, 5.0).unwrap();
        let high = rescale_to_norm(&dir, 30.0).unwrap();
        let a = model
            .forward(&store, &audio, &EmotionCondition::Constant(low))
            .unwrap();
        let b = model
            .forward(&store, &audio, &EmotionCondition::Constant(high))
            .unwrap();
        let d: f64 = sequence_to_matrix(&a)
            .iter()
            .zip(sequence_to_matrix(&b).iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(d > 1e-6, "norm 5 vs 30 must differ, got {d}");
    }

    #[test]
    fn decoder_output_ignores_audio_beyond_the_context_window() {
        let mut cfg = tiny_cfg();
        cfg.enc_window = Some(1);
        cfg.dec_window = Some(1);
        cfg.dec_self_window = Some(1);
        let (model, store) = random_model(cfg, 20);
        // Horizon = dec_window + (dec_layers-1)*dec_self_window
        //         + enc_layers*enc_window = 1 + 1 + 2 = 4.
        let t = 12;
        let audio = random_audio(t, 5, 21);
        let emb = random_embedding(12, 22);
        let cond = EmotionCondition::Constant(emb);
        let base = model.forward(&store, &audio, &cond).unwrap();
        let probe_frame = 2usize;
        let horizon = 4usize;
        let mut perturbed = audio.clone();
        for s in (probe_frame + horizon + 1)..t {
            for d in 0..5 {
                perturbed.features[[s, d]] += 10.0;
            }
        }
        let moved = model.forward(&store, &perturbed, &cond).unwrap();
        let pa = &base.frames[probe_frame].points;
        let pb = &moved.frames[probe_frame].points;
        for (x, y) in pa.iter().zip(pb.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "masked audio leaked into frame");
        }
        // Sanity: a frame inside the horizon of the perturbation does move.
        let inside = t - 1;
        let qa = &base.frames[inside].points;
        let qb = &moved.frames[inside].points;
        let d: f32 = qa.iter().zip(qb.iter()).map(|(x, y)| (x - y).abs()).sum();
        assert!(d > 0.0, "perturbation must reach frames in range");
    }

    #[test]
    fn sequence_condition_norms_track_intensity() {
        let dir = random_embedding(12, 23);
        let map = IntensityNormMap::default();
        let constant = IntensitySequence::new(vec![0.5; 4], 25.0, true).unwrap();
        let conds = sequence_emotion_condition(&dir, &constant, &map).unwrap();
        for c in &conds {
            assert!((c.norm() - 15.0).abs() < 1e-4);
            assert!(c.rescaled);
        }
        let endpoints = IntensitySequence::new(vec![0.0, 1.0], 25.0, true).unwrap();
        let conds = sequence_emotion_condition(&dir, &endpoints, &map).unwrap();
        assert_eq!(conds[0].norm(), 0.0);
        assert!((conds[1].norm() - 30.0).abs() < 1e-4);

        let mut rng = substream(24, "xf-cond-random");
        let values: Vec<f32> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let seq = IntensitySequence::new(values.clone(), 25.0, true).unwrap();
        let conds = sequence_emotion_condition(&dir, &seq, &map).unwrap();
        for (c, &v) in conds.iter().zip(values.iter()) {
            assert!(
                (c.norm() - f64::from(30.0 * v)).abs() < 1e-5 * 30.0,
                "norm {} vs {}",
                c.norm(),
                30.0 * v
            );
        }
        // All nonzero elements share the direction.
        for c in conds.iter().filter(|c| c.norm() > 1e-6) {
            let cos: f64 = c
                .vector
                .iter()
                .zip(dir.vector.iter())
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum::<f64>()
                / (c.norm() * dir.norm());
            assert!(cos > 1.0 - 1e-6);
        }

        let zero_dir = EmotionEmbedding::zeros(12);
        assert!(sequence_emotion_condition(&zero_dir, &constant, &map).is_err());
    }

    #[test]
    fn renderer_peak_at_projected_center() {
        let renderer = ToyRenderer::default();
        let frame = KeypointFrame::new(Array2::zeros((1, 3)), 0).unwrap();
        let img = renderer.render(&frame).unwrap();
        // The origin projects to the image center region.
        let (mut max_i, mut max_j, mut max_v) = (0, 0, -1.0f32);
        for i in 0..renderer.height {
            for j in 0..renderer.width {
                if img[[i, j]] > max_v {
                    max_v = img[[i, j]];
                    max_i = i;
                    max_j = j;
                }
            }
        }
        // Center falls between pixels 15 and 16 for a 32-wide grid.
        assert!((15..=16).contains(&max_i));
        assert!((15..=16).contains(&max_j));
        assert!(max_v > 0.5);
    }

    #[test]
    fn renderer_off_image_keypoints_leave_dark_frame() {
        let renderer = ToyRenderer::default();
        let mut pts = Array2::<f32>::zeros((3, 3));
        for (i, row) in [(0usize, 100.0f32), (1, -100.0), (2, 50.0)] {
            pts[[i, 0]] = row;
            pts[[i, 1] ] = row;
        }
        let frame = KeypointFrame::new(pts, 0).unwrap();
        let img = renderer.render(&frame).unwrap();
        assert!(img.iter().all(|&v| v < 1e-6));
    }

    #[test]
    fn renderer_gradient_matches_finite_differences() {
        // A plain pixel sum is translation-invariant for interior splats, so
        // the loss weights each pixel randomly to keep gradients O(1).
        let renderer = ToyRenderer {
            amplitude: 0.4, // keep pixels clear of the clip boundary
            ..ToyRenderer::default()
        };
        let mut rng = substream(25, "xf-render-grad");
        let pts = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0f64..1.0));
        let weights = ArrayD::from_shape_fn(
            ndarray::IxDyn(&[renderer.height, renderer.width]),
            |_| rng.gen_range(-1.0..1.0),
        );
        let run = |p: Array2<f64>| -> (f64, Option<Tensor>) {
            let mut g = Graph::new();
            let v = g.input(p.into_dyn());
            let img = renderer.render_graph(&mut g, v);
            let wv = g.input(weights.clone());
            let weighted = g.mul(img, wv);
            let loss = g.sum(weighted);
            let grads = g.backward(loss);
            (scalar_value(g.value(loss)), grads.get(v).cloned())
        };
        let (_, analytic) = run(pts.clone());
        let analytic = analytic.unwrap();
        let h = 1e-5;
        for k in 0..3 {
            for c in 0..3 {
                let eval = |delta: f64| {
                    let mut p = pts.clone();
                    p[[k, c]] += delta;
                    run(p).0
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let got = analytic[[k, c]];
                if c == 2 {
                    assert_eq!(got, 0.0, "z gradient must vanish");
                    assert!(numeric.abs() < 1e-6);
                } else {
                    let denom = numeric.abs().max(got.abs()).max(1e-6);
                    assert!(
                        (numeric - got).abs() / denom < 1e-4,
                        "({k},{c}): analytic {got} vs numeric {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn renderer_pixel_sum_gradient_at_the_image_boundary() {
        // With a splat near the edge the plain pixel sum does respond to
        // keypoint motion (mass leaves the frame); check that path too.
        let renderer = ToyRenderer {
            amplitude: 0.4,
            ..ToyRenderer::default()
        };
        let pts = ndarray::arr2(&[[1.82_f64, 0.1, 0.0]]); // near the right edge
        let run = |p: Array2<f64>| -> (f64, Option<Tensor>) {
            let mut g = Graph::new();
            let v = g.input(p.into_dyn());
            let img = renderer.render_graph(&mut g, v);
            let loss = g.sum(img);
            let grads = g.backward(loss);
            (scalar_value(g.value(loss)), grads.get(v).cloned())
        };
        let (_, analytic) = run(pts.clone());
        let analytic = analytic.unwrap();
        let h = 1e-5;
        let eval = |delta: f64| {
            let mut p = pts.clone();
            p[[0, 0]] += delta;
            run(p).0
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let got = analytic[[0, 0]];
        assert!(numeric.abs() > 1e-4, "edge splat must move mass off-image");
        assert!(
            (numeric - got).abs() / numeric.abs().max(got.abs()) < 1e-4,
            "analytic {got} vs numeric {numeric}"
        );
    }

    #[test]
    fn renderer_total_mass_matches_gaussian_integral() {
        // All splats well inside the frame and small enough not to clip:
        // sum over pixels ~= K * amplitude * 2*pi*sigma^2 within 2%.
        let renderer = ToyRenderer {
            height: 48,
            width: 48,
            sigma: 1.5,
            pixels_per_unit: 8.0,
            amplitude: 0.2,
        };
        let pts = ndarray::arr2(&[
            [-1.0f32, -1.0, 0.3],
            [1.0, -1.0, -0.2],
            [-1.0, 1.0, 0.0],
            [1.0, 1.0, 0.9],
        ]);
        let frame = KeypointFrame::new(pts, 0).unwrap();
        let img = renderer.render(&frame).unwrap();
        let total: f64 = img.iter().map(|&v| f64::from(v)).sum();
        let expect = 4.0
            * f64::from(renderer.amplitude)
            * 2.0
            * std::f64::consts::PI
            * f64::from(renderer.sigma * renderer.sigma);
        assert!(
            (total - expect).abs() / expect < 0.02,
            "mass {total} vs {expect}"
        );
    }

    #[test]
    fn facial_mask_covers_splat_neighborhoods() {
        let renderer = ToyRenderer::default();
        let frame = KeypointFrame::new(Array2::zeros((1, 3)), 0).unwrap();
        let mask = renderer.facial_mask(&frame, 3.0);
        let center = mask[[15, 15]];
        assert_eq!(center, 1.0);
        assert_eq!(mask[[0, 0]], 0.0);
        let count = mask.iter().filter(|&&v| v == 1.0).count();
        // A disc of radius 4.5px has ~64 pixels.
        assert!((40..=90).contains(&count), "mask size {count}");
    }

    #[test]
    fn renderer_settings_survive_archive() {
        let renderer = ToyRenderer::default();
        let mut archive = crate::archive::Archive::new(0);
        renderer.save(&mut archive);
        let back = ToyRenderer::load(&archive).unwrap();
        assert_eq!(renderer, back);
    }
}
