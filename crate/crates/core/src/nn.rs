//! Named parameter store, layer building blocks, and the Adam optimizer.
//!
//! Parameters live in a flat [`ParamStore`] keyed by dotted names
//! (`adapt.fc1.weight`, `vae.enc.pre.bias`, ...). Each training step binds
//! the store into a fresh [`Graph`], runs forward/backward, and applies one
//! optimizer step. Layer structs own only their name prefix and shape
//! metadata, so the optimizer and the model archive see a single namespace.

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::autodiff::{Gradients, Graph, PadMode, Tensor, Var};

/// Ordered map of named `f64` parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter '{name}'"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Insert every parameter into `g` as a leaf and return the binding.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let mut vars = IndexMap::new();
        for (name, tensor) in &self.params {
            vars.insert(name.clone(), g.input(tensor.clone()));
        }
        Bound { vars }
    }
}

/// Per-graph mapping from parameter names to leaf vars.
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Xavier-uniform initialization.
pub fn xavier_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-limit..limit))
}

/// Fully connected layer; weight is `(in_dim, out_dim)` so a `(t, in)` input
/// right-multiplies without a transpose.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.insert(
            self.weight_name(),
            xavier_uniform(&[self.in_dim, self.out_dim], self.in_dim, self.out_dim, rng),
        );
        store.insert(self.bias_name(), ArrayD::zeros(IxDyn(&[self.out_dim])));
    }

    pub fn init_zero(&self, store: &mut ParamStore) {
        store.insert(
            self.weight_name(),
            ArrayD::zeros(IxDyn(&[self.in_dim, self.out_dim])),
        );
        store.insert(self.bias_name(), ArrayD::zeros(IxDyn(&[self.out_dim])));
    }

    /// `(t, in) -> (t, out)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let w = p.var(&self.weight_name());
        let b = p.var(&self.bias_name());
        let mm = g.matmul(x, w);
        g.add_bias_row(mm, b)
    }

    /// `(in,) -> (out,)`.
    pub fn forward_vec(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let row = g.reshape(x, &[1, self.in_dim]);
        let out = self.forward(g, p, row);
        g.reshape(out, &[self.out_dim])
    }
}

/// Dilated 1-D convolution layer over `(c, t)` feature maps.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kw: usize,
    pub dilation: usize,
}

impl Conv1d {
    pub fn new(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        kw: usize,
        dilation: usize,
    ) -> Self {
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            kw,
            dilation,
        }
    }

    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.insert(
            self.weight_name(),
            xavier_uniform(
                &[self.out_ch, self.in_ch, self.kw],
                self.in_ch * self.kw,
                self.out_ch * self.kw,
                rng,
            ),
        );
        store.insert(self.bias_name(), ArrayD::zeros(IxDyn(&[self.out_ch])));
    }

    /// Zero weights and biases; used for flow coupling outputs so the flow
    /// starts as the identity map.
    pub fn init_zero(&self, store: &mut ParamStore) {
        store.insert(
            self.weight_name(),
            ArrayD::zeros(IxDyn(&[self.out_ch, self.in_ch, self.kw])),
        );
        store.insert(self.bias_name(), ArrayD::zeros(IxDyn(&[self.out_ch])));
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, pad: PadMode) -> Var {
        let w = p.var(&self.weight_name());
        let b = p.var(&self.bias_name());
        g.conv1d(x, w, b, self.dilation, pad)
    }
}

/// Layer normalization over the last axis of `(t, d)`.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
        }
    }

    fn gamma_name(&self) -> String {
        format!("{}.gamma", self.name)
    }

    fn beta_name(&self) -> String {
        format!("{}.beta", self.name)
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(self.gamma_name(), ArrayD::ones(IxDyn(&[self.dim])));
        store.insert(self.beta_name(), ArrayD::zeros(IxDyn(&[self.dim])));
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let gamma = p.var(&self.gamma_name());
        let beta = p.var(&self.beta_name());
        g.layer_norm_rows(x, gamma, beta, 1e-5)
    }

    /// Normalize the channel axis of a `(c, t)` map by transposing around
    /// the row-wise kernel.
    pub fn forward_channels(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let xt = g.transpose2(x);
        let y = self.forward(g, p, xt);
        g.transpose2(y)
    }
}

/// Adam with optional per-prefix learning-rate overrides.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    overrides: Vec<(String, f64)>,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            overrides: Vec::new(),
            m: IndexMap::new(),
            v: IndexMap::new(),
            step: 0,
        }
    }

    /// Use `lr` for parameters whose name starts with `prefix`.
    pub fn with_override(mut self, prefix: impl Into<String>, lr: f64) -> Self {
        self.overrides.push((prefix.into(), lr));
        self
    }

    fn lr_for(&self, name: &str) -> f64 {
        for (prefix, lr) in &self.overrides {
            if name.starts_with(prefix.as_str()) {
                return *lr;
            }
        }
        self.lr
    }

    /// Apply one update to every bound parameter that received a gradient.
    /// Parameters with `frozen_prefixes` names are skipped.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        bound: &Bound,
        grads: &Gradients,
        frozen_prefixes: &[&str],
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var) in bound.iter() {
            if frozen_prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let Some(grad) = grads.get(var) else {
                continue;
            };
            let lr = self.lr_for(name);
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            *m *= self.beta1;
            *m += &(grad * (1.0 - self.beta1));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            *v *= self.beta2;
            *v += &(grad.mapv(|x| x * x) * (1.0 - self.beta2));
            let m_hat = &*m / bc1;
            let v_hat = &*v / bc2;
            let update = m_hat / (v_hat.mapv(f64::sqrt) + self.eps) * lr;
            *store.get_mut(name) -= &update;
        }
    }
}
