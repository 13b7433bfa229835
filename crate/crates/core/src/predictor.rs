//! Audio-to-intensity predictor: a variational encoder-decoder with a
//! flow-based prior, trained on pseudo-labels.
//!
//! The encoder (1-D conv, ReLU, layer norm, non-causal WaveNet) maps the
//! intensity trace plus audio condition to a per-frame diagonal Gaussian.
//! The decoder (WaveNet, conv, ReLU, layer norm) maps a latent sequence plus
//! audio back to per-frame intensity means under a unit-variance Gaussian
//! observation model. The prior is a normalizing flow: one audio-conditioned
//! affine coupling layer followed by a channel flip.
//!
//! The ELBO uses a single reparameterized sample. Its KL term is the
//! closed-form diagonal-Gaussian KL against the standard-normal base plus a
//! flow correction `log N(z) - log N(f(z)) - log|det J|` evaluated at the
//! sample; the correction vanishes identically when the flow is the identity
//! and acts as a control variate otherwise.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{scalar_value, Graph, PadMode, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Adam, Bound, Conv1d, LayerNorm, ParamStore};
use crate::rng::substream;
use crate::types::{AudioFeatureSequence, IntensitySequence};

const LOGVAR_MIN: f64 = -10.0;
const LOGVAR_MAX: f64 = 10.0;
const LN_2PI: f64 = 1.8378770664093453;

/// Architecture of the variational predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    /// Audio feature width `D_a`.
    pub feature_dim: usize,
    /// Latent width `D_z` (must be even for the coupling split).
    pub latent_dim: usize,
    /// WaveNet channel width.
    pub channels: usize,
    /// WaveNet depth; layer `i` uses dilation `2^i`.
    pub wavenet_layers: usize,
    /// Dilated-conv kernel width (odd).
    pub kernel_width: usize,
    /// Padding mode; `Circular` exists for shift-equivariance tests.
    pub pad: PadMode,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            feature_dim: crate::audio::FEATURE_DIM,
            latent_dim: 16,
            channels: 64,
            wavenet_layers: 4,
            kernel_width: 3,
            pad: PadMode::Zero,
        }
    }
}

/// Non-causal WaveNet stack with gated units, residual connections, and an
/// accumulated skip path, conditioned on audio.
#[derive(Debug, Clone)]
struct WaveNet {
    layers: Vec<WaveNetLayer>,
}

#[derive(Debug, Clone)]
struct WaveNetLayer {
    dil: Conv1d,
    cond: Conv1d,
    res: Conv1d,
    skip: Conv1d,
}

impl WaveNet {
    fn new(name: &str, channels: usize, cond_dim: usize, layers: usize, kw: usize) -> Self {
        let layers = (0..layers)
            .map(|i| WaveNetLayer {
                dil: Conv1d::new(
                    format!("{name}.l{i}.dil"),
                    channels,
                    2 * channels,
                    kw,
                    1 << i,
                ),
                cond: Conv1d::new(format!("{name}.l{i}.cond"), cond_dim, 2 * channels, 1, 1),
                res: Conv1d::new(format!("{name}.l{i}.res"), channels, channels, 1, 1),
                skip: Conv1d::new(format!("{name}.l{i}.skip"), channels, channels, 1, 1),
            })
            .collect();
        Self { layers }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for layer in &self.layers {
            layer.dil.init(store, rng);
            layer.cond.init(store, rng);
            layer.res.init(store, rng);
            layer.skip.init(store, rng);
        }
    }

    /// `(c, t)` with `(d_cond, t)` condition to `(c, t)` skip sum.
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var, cond: Var, pad: PadMode) -> Var {
        let channels = self.layers[0].res.in_ch;
        let mut h = x;
        let mut skip_sum: Option<Var> = None;
        for layer in &self.layers {
            let z_x = layer.dil.forward(g, p, h, pad);
            let z_c = layer.cond.forward(g, p, cond, pad);
            let z = g.add(z_x, z_c);
            let filt = g.slice_axis(z, 0, 0, channels);
            let gate = g.slice_axis(z, 0, channels, channels);
            let filt = g.tanh(filt);
            let gate = g.sigmoid(gate);
            let gated = g.mul(filt, gate);
            let res = layer.res.forward(g, p, gated, pad);
            h = g.add(h, res);
            let s = layer.skip.forward(g, p, gated, pad);
            skip_sum = Some(match skip_sum {
                Some(acc) => g.add(acc, s),
                None => s,
            });
        }
        skip_sum.expect("wavenet has at least one layer")
    }
}

/// Parameter layout of the full predictor (`vae.*` archive names).
#[derive(Debug, Clone)]
pub struct Vae {
    pub cfg: VaeConfig,
    enc_pre: Conv1d,
    enc_ln: LayerNorm,
    enc_net: WaveNet,
    enc_out: Conv1d,
    dec_pre: Conv1d,
    dec_net: WaveNet,
    dec_post: Conv1d,
    dec_ln: LayerNorm,
    dec_out: Conv1d,
    flow_in: Conv1d,
    flow_cond: Conv1d,
    flow_out: Conv1d,
}

impl Vae {
    pub fn new(cfg: VaeConfig) -> Self {
        assert!(cfg.latent_dim % 2 == 0, "latent_dim must be even");
        let c = cfg.channels;
        let kw = cfg.kernel_width;
        let da = cfg.feature_dim;
        let dz = cfg.latent_dim;
        let half = dz / 2;
        Self {
            enc_pre: Conv1d::new("vae.enc.pre", 1, c, kw, 1),
            enc_ln: LayerNorm::new("vae.enc.ln", c),
            enc_net: WaveNet::new("vae.enc.net", c, da, cfg.wavenet_layers, kw),
            enc_out: Conv1d::new("vae.enc.out", c, 2 * dz, 1, 1),
            dec_pre: Conv1d::new("vae.dec.pre", dz, c, 1, 1),
            dec_net: WaveNet::new("vae.dec.net", c, da, cfg.wavenet_layers, kw),
            dec_post: Conv1d::new("vae.dec.post", c, c, kw, 1),
            dec_ln: LayerNorm::new("vae.dec.ln", c),
            dec_out: Conv1d::new("vae.dec.out", c, 1, 1, 1),
            flow_in: Conv1d::new("vae.flow.in", half, c, kw, 1),
            flow_cond: Conv1d::new("vae.flow.cond", da, c, 1, 1),
            flow_out: Conv1d::new("vae.flow.out", c, dz, 1, 1),
            cfg,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.enc_pre.init(store, rng);
        self.enc_ln.init(store);
        self.enc_net.init(store, rng);
        self.enc_out.init(store, rng);
        self.dec_pre.init(store, rng);
        self.dec_net.init(store, rng);
        self.dec_post.init(store, rng);
        self.dec_ln.init(store);
        self.dec_out.init(store, rng);
        self.flow_in.init(store, rng);
        self.flow_cond.init(store, rng);
        // Zero output so the flow starts as the identity map.
        self.flow_out.init_zero(store);
    }

    fn check_alignment(&self, l_len: usize, a: &AudioFeatureSequence) -> Result<()> {
        if l_len != a.len() {
            return Err(Error::Alignment(format!(
                "intensity has {l_len} frames but audio features have {}",
                a.len()
            )));
        }
        if a.dim() != self.cfg.feature_dim {
            return Err(Error::Dimension(format!(
                "audio feature width {} does not match configured {}",
                a.dim(),
                self.cfg.feature_dim
            )));
        }
        Ok(())
    }

    /// Audio features `(t, d_a)` as a `(d_a, t)` graph constant.
    fn cond_var(&self, g: &mut Graph, a: &AudioFeatureSequence) -> Var {
        let t = a.len();
        let d = a.dim();
        let arr = Array2::from_shape_fn((d, t), |(i, j)| f64::from(a.features[[j, i]]));
        g.input(arr.into_dyn())
    }

    /// Graph encoder: `(1, t)` intensity to per-frame Gaussian parameters,
    /// both `(d_z, t)`, with the log variance clamped.
    fn encode_graph(&self, g: &mut Graph, p: &Bound, l: Var, cond: Var) -> (Var, Var) {
        let pad = self.cfg.pad;
        let h = self.enc_pre.forward(g, p, l, pad);
        let h = g.relu(h);
        let h = self.enc_ln.forward_channels(g, p, h);
        let h = self.enc_net.forward(g, p, h, cond, pad);
        let out = self.enc_out.forward(g, p, h, pad);
        let dz = self.cfg.latent_dim;
        let mean = g.slice_axis(out, 0, 0, dz);
        let logvar_raw = g.slice_axis(out, 0, dz, dz);
        let logvar = g.clamp(logvar_raw, LOGVAR_MIN, LOGVAR_MAX);
        (mean, logvar)
    }

    /// Graph decoder: `(d_z, t)` latent to `(1, t)` intensity mean.
    fn decode_graph(&self, g: &mut Graph, p: &Bound, z: Var, cond: Var) -> Var {
        let pad = self.cfg.pad;
        let h = self.dec_pre.forward(g, p, z, pad);
        let h = self.dec_net.forward(g, p, h, cond, pad);
        let h = self.dec_post.forward(g, p, h, pad);
        let h = g.relu(h);
        let h = self.dec_ln.forward_channels(g, p, h);
        self.dec_out.forward(g, p, h, pad)
    }

    /// Coupling statistics for the held half: `(shift, log_scale)`, each
    /// `(d_z/2, t)`.
    fn coupling_stats(&self, g: &mut Graph, p: &Bound, z_a: Var, cond: Var) -> (Var, Var) {
        let pad = self.cfg.pad;
        let hx = self.flow_in.forward(g, p, z_a, pad);
        let hc = self.flow_cond.forward(g, p, cond, pad);
        let h = g.add(hx, hc);
        let h = g.relu(h);
        let stats = self.flow_out.forward(g, p, h, pad);
        let half = self.cfg.latent_dim / 2;
        let shift = g.slice_axis(stats, 0, 0, half);
        let log_scale = g.slice_axis(stats, 0, half, half);
        (shift, log_scale)
    }

    /// Graph flow toward the base: coupling then channel flip. Returns the
    /// transformed latent `(d_z, t)` and the per-entry log-scales whose sum
    /// is the log-determinant.
    fn flow_forward_graph(&self, g: &mut Graph, p: &Bound, z: Var, cond: Var) -> (Var, Var) {
        let half = self.cfg.latent_dim / 2;
        let z_a = g.slice_axis(z, 0, 0, half);
        let z_b = g.slice_axis(z, 0, half, half);
        let (shift, log_scale) = self.coupling_stats(g, p, z_a, cond);
        let scale = g.exp(log_scale);
        let zb_scaled = g.mul(z_b, scale);
        let u_b = g.add(zb_scaled, shift);
        let coupled = g.concat(0, &[z_a, u_b]);
        let flipped = g.reverse_axis(coupled, 0);
        (flipped, log_scale)
    }

    // ---- public (non-training) operations ----

    /// Per-frame posterior parameters; both arrays are `(t, d_z)`.
    pub fn encode(
        &self,
        store: &ParamStore,
        l: &IntensitySequence,
        a: &AudioFeatureSequence,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_alignment(l.len(), a)?;
        if !l.normalized {
            return Err(Error::Domain(
                "encoder expects a normalized intensity sequence".into(),
            ));
        }
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let t = l.len();
        let l_arr = Array2::from_shape_fn((1, t), |(_, j)| f64::from(l.values[j]));
        let l_var = g.input(l_arr.into_dyn());
        let cond = self.cond_var(&mut g, a);
        let (mean, logvar) = self.encode_graph(&mut g, &bound, l_var, cond);
        Ok((
            to_tc(g.value(mean)),
            to_tc(g.value(logvar)),
        ))
    }

    /// Decoder mean intensity per frame.
    pub fn decode(
        &self,
        store: &ParamStore,
        z: &Array2<f64>,
        a: &AudioFeatureSequence,
    ) -> Result<Vec<f64>> {
        self.check_alignment(z.nrows(), a)?;
        if z.ncols() != self.cfg.latent_dim {
            return Err(Error::Dimension(format!(
                "latent width {} does not match configured {}",
                z.ncols(),
                self.cfg.latent_dim
            )));
        }
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let z_var = g.input(from_tc(z));
        let cond = self.cond_var(&mut g, a);
        let out = self.decode_graph(&mut g, &bound, z_var, cond);
        Ok(g.value(out).iter().copied().collect())
    }

    /// Flow toward the base distribution; returns `(u, total_log_det)`.
    pub fn prior_forward(
        &self,
        store: &ParamStore,
        z: &Array2<f64>,
        a: &AudioFeatureSequence,
    ) -> Result<(Array2<f64>, f64)> {
        self.check_alignment(z.nrows(), a)?;
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let z_var = g.input(from_tc(z));
        let cond = self.cond_var(&mut g, a);
        let (u, log_scale) = self.flow_forward_graph(&mut g, &bound, z_var, cond);
        let u_val = to_tc(g.value(u));
        if u_val.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("flow produced non-finite values".into()));
        }
        let log_det = g.value(log_scale).sum();
        Ok((u_val, log_det))
    }

    /// Exact inverse of [`Vae::prior_forward`].
    pub fn prior_inverse(
        &self,
        store: &ParamStore,
        u: &Array2<f64>,
        a: &AudioFeatureSequence,
    ) -> Result<Array2<f64>> {
        self.check_alignment(u.nrows(), a)?;
        let half = self.cfg.latent_dim / 2;
        // Undo the flip, recover (z_a, u_b).
        let mut unflipped = from_tc(u);
        unflipped.invert_axis(Axis(0));
        let z_a = unflipped.slice_axis(Axis(0), ndarray::Slice::from(0..half)).to_owned();
        let u_b = unflipped
            .slice_axis(Axis(0), ndarray::Slice::from(half..2 * half))
            .to_owned();
        // Re-run the coupling net on the held half.
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let za_var = g.input(z_a.clone());
        let cond = self.cond_var(&mut g, a);
        let (shift, log_scale) = self.coupling_stats(&mut g, &bound, za_var, cond);
        let shift = g.value(shift).clone();
        let log_scale = g.value(log_scale).clone();
        let z_b = (&u_b - &shift) * log_scale.mapv(|s| (-s).exp());
        let z = ndarray::concatenate(Axis(0), &[z_a.view(), z_b.view()])
            .expect("halves share time length");
        Ok(to_tc(&z))
    }

    /// Monte-Carlo ELBO of one sequence. Deterministic given the RNG state.
    pub fn elbo_loss(
        &self,
        store: &ParamStore,
        l: &IntensitySequence,
        a: &AudioFeatureSequence,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, ElboParts)> {
        self.check_alignment(l.len(), a)?;
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let eps = self.sample_eps(l.len(), rng);
        let (loss, nll, kl) = self.build_elbo(&mut g, &bound, l, a, &eps)?;
        Ok((
            scalar_value(g.value(loss)),
            ElboParts {
                nll: scalar_value(g.value(nll)),
                kl: scalar_value(g.value(kl)),
            },
        ))
    }

    /// Standard-normal reparameterization noise, `(d_z, t)`.
    pub fn sample_eps(&self, t: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((self.cfg.latent_dim, t), |_| {
            StandardNormal.sample(rng)
        })
    }

    /// Build the ELBO on an existing graph (shared by training and tests).
    ///
    /// Returns `(loss, nll, kl)`, each scalar. Frame-averaged: the NLL is the
    /// mean per-frame Gaussian negative log-likelihood, the KL is the mean
    /// per-frame KL summed over latent channels.
    pub fn build_elbo(
        &self,
        g: &mut Graph,
        p: &Bound,
        l: &IntensitySequence,
        a: &AudioFeatureSequence,
        eps: &Array2<f64>,
    ) -> Result<(Var, Var, Var)> {
        self.check_alignment(l.len(), a)?;
        let t = l.len();
        let t_f = t as f64;
        let l_arr = Array2::from_shape_fn((1, t), |(_, j)| f64::from(l.values[j]));
        let l_var = g.input(l_arr.into_dyn());
        let cond = self.cond_var(g, a);

        // Posterior sample z = mean + exp(logvar/2) * eps.
        let (mean, logvar) = self.encode_graph(g, p, l_var, cond);
        let half_logvar = g.scale(logvar, 0.5);
        let sigma = g.exp(half_logvar);
        let eps_var = g.input(eps.clone().into_dyn());
        let noise = g.mul(sigma, eps_var);
        let z = g.add(mean, noise);

        // Reconstruction: Gaussian NLL with unit observation variance.
        let m = self.decode_graph(g, p, z, cond);
        let diff = g.sub(l_var, m);
        let sq = g.square(diff);
        let mse_mean = g.mean(sq);
        let half_mse = g.scale(mse_mean, 0.5);
        let nll = g.add_const(half_mse, 0.5 * LN_2PI);

        // Closed-form KL(q || N(0, I)) per frame, averaged over frames.
        let var = g.exp(logvar);
        let mean_sq = g.square(mean);
        let vm = g.add(var, mean_sq);
        let vml = g.sub(vm, logvar);
        let kl_terms = g.add_const(vml, -1.0);
        let kl_sum = g.sum(kl_terms);
        let kl_closed = g.scale(kl_sum, 0.5 / t_f);

        // Flow correction: log N(z) - log N(u) - log|det J| at the sample.
        // Identically zero when the coupling nets are zero.
        let (u, log_scale) = self.flow_forward_graph(g, p, z, cond);
        let z_sq = g.square(z);
        let z_sq_sum = g.sum(z_sq);
        let u_sq = g.square(u);
        let u_sq_sum = g.sum(u_sq);
        let log_det = g.sum(log_scale);
        let diff_sq = g.sub(u_sq_sum, z_sq_sum);
        let half_diff = g.scale(diff_sq, 0.5);
        let corr_total = g.sub(half_diff, log_det);
        let correction = g.scale(corr_total, 1.0 / t_f);

        let kl = g.add(kl_closed, correction);
        let loss = g.add(nll, kl);
        Ok((loss, nll, kl))
    }

    /// Predict a normalized intensity sequence from audio alone.
    pub fn predict_intensity(
        &self,
        store: &ParamStore,
        a: &AudioFeatureSequence,
        mode: PredictMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<IntensitySequence> {
        let t = a.len();
        let dz = self.cfg.latent_dim;
        let u = match mode {
            PredictMode::Mean => Array2::<f64>::zeros((t, dz)),
            PredictMode::Sample => {
                Array2::from_shape_fn((t, dz), |_| StandardNormal.sample(rng))
            }
        };
        let z = self.prior_inverse(store, &u, a)?;
        let m = self.decode(store, &z, a)?;
        let values = m
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0)) as f32)
            .collect();
        IntensitySequence::new(values, a.fps, true)
    }
}

/// Inference mode for [`Vae::predict_intensity`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    /// Deterministic: push the base mean through the flow inverse.
    Mean,
    /// Draw the base sample from the RNG.
    Sample,
}

/// Logged ELBO components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboParts {
    pub nll: f64,
    pub kl: f64,
}

/// `(c, t)` graph layout to `(t, c)` row-major interface layout.
fn to_tc(v: &Tensor) -> Array2<f64> {
    let m = v.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    m.t().to_owned()
}

/// `(t, c)` interface layout to `(c, t)` graph layout.
fn from_tc(v: &Array2<f64>) -> Tensor {
    v.t().to_owned().into_dyn()
}

/// Training settings for the predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Sequences longer than this are randomly cropped per step.
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            max_frames: 80,
            seed: 0,
        }
    }
}

/// One aligned training example.
#[derive(Debug, Clone)]
pub struct PredictorExample {
    pub features: AudioFeatureSequence,
    pub labels: IntensitySequence,
}

/// Per-step training log entry.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PredictorLogEntry {
    pub step: usize,
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
}

/// Train the predictor on aligned (features, pseudo-label) pairs.
pub fn train_predictor(
    vae: &Vae,
    examples: &[PredictorExample],
    cfg: &PredictorTrainConfig,
) -> Result<(ParamStore, Vec<PredictorLogEntry>)> {
    if examples.is_empty() {
        return Err(Error::InsufficientData(
            "predictor training needs at least one example".into(),
        ));
    }
    for (i, ex) in examples.iter().enumerate() {
        if ex.features.len() != ex.labels.len() {
            return Err(Error::Alignment(format!(
                "example {i}: {} feature frames vs {} labels",
                ex.features.len(),
                ex.labels.len()
            )));
        }
    }
    let mut init_rng = substream(cfg.seed, "predictor-init");
    let mut store = ParamStore::new();
    vae.init(&mut store, &mut init_rng);

    let mut opt = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2);
    let mut batch_rng = substream(cfg.seed, "predictor-batches");
    let mut noise_rng = substream(cfg.seed, "predictor-noise");
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let mut losses = Vec::with_capacity(cfg.batch_size);
        let mut nll_total = 0.0;
        let mut kl_total = 0.0;
        for _ in 0..cfg.batch_size {
            let idx = batch_rng.gen_range(0..examples.len());
            let ex = &examples[idx];
            let (labels, feats) = crop_example(ex, cfg.max_frames, &mut batch_rng);
            let eps = vae.sample_eps(labels.len(), &mut noise_rng);
            let (loss, nll, kl) = vae.build_elbo(&mut g, &bound, &labels, &feats, &eps)?;
            nll_total += scalar_value(g.value(nll));
            kl_total += scalar_value(g.value(kl));
            losses.push(loss);
        }
        let total = sum_vars(&mut g, &losses);
        let loss = g.scale(total, 1.0 / cfg.batch_size as f64);
        let grads = g.backward(loss);
        opt.step(&mut store, &bound, &grads, &[]);
        log.push(PredictorLogEntry {
            step,
            loss: scalar_value(g.value(loss)),
            nll: nll_total / cfg.batch_size as f64,
            kl: kl_total / cfg.batch_size as f64,
        });
    }
    Ok((store, log))
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v);
    }
    acc
}

fn crop_example(
    ex: &PredictorExample,
    max_frames: usize,
    rng: &mut ChaCha8Rng,
) -> (IntensitySequence, AudioFeatureSequence) {
    let t = ex.labels.len();
    if t <= max_frames {
        return (ex.labels.clone(), ex.features.clone());
    }
    let start = rng.gen_range(0..=t - max_frames);
    let values = ex.labels.values[start..start + max_frames].to_vec();
    let feats = ex
        .features
        .features
        .slice_axis(Axis(0), ndarray::Slice::from(start..start + max_frames))
        .to_owned();
    (
        IntensitySequence {
            values,
            fps: ex.labels.fps,
            normalized: ex.labels.normalized,
        },
        AudioFeatureSequence {
            features: feats,
            fps: ex.features.fps,
        },
    )
}
