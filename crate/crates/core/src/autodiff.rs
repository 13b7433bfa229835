//! Minimal reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Graph`] is a tape: every operation pushes a node holding its value,
//! parent indices, and a backward closure that maps the output gradient to
//! parent gradients. Training builds a fresh graph per step, calls
//! [`Graph::backward`] on a scalar loss, and reads gradients off leaf vars.
//!
//! The engine is deliberately small: same-shape elementwise ops, a few
//! explicit broadcasts, 2-D matmul, dilated 1-D convolution, softmax and
//! layer norm over the last axis, and slicing/concatenation. Everything is
//! single-threaded `f64`, so results are bitwise reproducible and accurate
//! enough to verify against central finite differences.

use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn, Slice};

/// Dynamic-rank tensor of `f64`.
pub type Tensor = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Padding behavior for [`Graph::conv1d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Symmetric zero padding; output length equals input length.
    Zero,
    /// Wrap-around padding; makes the convolution shift-equivariant.
    Circular,
}

type BackwardFn = Box<dyn Fn(&Tensor, &Tensor, &[&Tensor]) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Reverse-mode tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, if it received any contribution.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Remove and return the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

/// Scalar tensors are rank-0.
pub fn scalar(x: f64) -> Tensor {
    ArrayD::from_elem(IxDyn(&[]), x)
}

/// Read a rank-0 (or single-element) tensor as `f64`.
pub fn scalar_value(t: &Tensor) -> f64 {
    debug_assert_eq!(t.len(), 1, "expected scalar tensor, got shape {:?}", t.shape());
    *t.iter().next().expect("scalar tensor")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf. Gradients accumulate into leaves and can be read back;
    /// constants are just leaves whose gradient is ignored.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], None)
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register an operation with a custom backward closure.
    ///
    /// The closure receives (output gradient, output value, parent values)
    /// and must return one gradient tensor per parent, each parent-shaped.
    pub fn custom_op(
        &mut self,
        value: Tensor,
        parents: &[Var],
        backward: BackwardFn,
    ) -> Var {
        let parents: Vec<usize> = parents.iter().map(|v| v.0).collect();
        self.push(value, parents, Some(backward))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        value: Tensor,
        backward: BackwardFn,
    ) -> Var {
        self.push(value, vec![a.0, b.0], Some(backward))
    }

    fn unary(&mut self, a: Var, value: Tensor, backward: BackwardFn) -> Var {
        self.push(value, vec![a.0], Some(backward))
    }

    fn assert_same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{op}: shape mismatch"
        );
    }

    // ---- elementwise binary ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        let value = self.value(a) + self.value(b);
        self.binary(a, b, value, Box::new(|g, _, _| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        let value = self.value(a) - self.value(b);
        self.binary(a, b, value, Box::new(|g, _, _| vec![g.clone(), -g]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        let value = self.value(a) * self.value(b);
        self.binary(
            a,
            b,
            value,
            Box::new(|g, _, p| vec![g * p[1], g * p[0]]),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "div");
        let value = self.value(a) / self.value(b);
        self.binary(
            a,
            b,
            value,
            Box::new(|g, _, p| {
                let db = -(g * p[0]) / (p[1] * p[1]);
                vec![g / p[1], db]
            }),
        )
    }

    // ---- elementwise unary ----

    pub fn neg(&mut self, a: Var) -> Var {
        let value = -self.value(a);
        self.unary(a, value, Box::new(|g, _, _| vec![-g]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.unary(a, value, Box::new(move |g, _, _| vec![g * c]))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        self.unary(a, value, Box::new(|g, _, _| vec![g.clone()]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.unary(
            a,
            value,
            Box::new(|g, _, p| {
                let mask = p[0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![g * &mask]
            }),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.unary(a, value, Box::new(|g, out, _| vec![g * out]))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.unary(a, value, Box::new(|g, _, p| vec![g / p[0]]))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sqrt);
        self.unary(
            a,
            value,
            Box::new(|g, out, _| vec![g / &(out * 2.0)]),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.unary(a, value, Box::new(|g, _, p| vec![g * &(p[0] * 2.0)]))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        self.unary(
            a,
            value,
            Box::new(|g, _, p| {
                let sign = p[0].mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                vec![g * &sign]
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.unary(
            a,
            value,
            Box::new(|g, out, _| vec![g * &out.mapv(|y| 1.0 - y * y)]),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(
            a,
            value,
            Box::new(|g, out, _| vec![g * &out.mapv(|y| y * (1.0 - y))]),
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.unary(
            a,
            value,
            Box::new(move |g, _, p| {
                let mask = p[0].mapv(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
                vec![g * &mask]
            }),
        )
    }

    /// `max(x, c)` elementwise; gradient passes where `x > c`.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(c));
        self.unary(
            a,
            value,
            Box::new(move |g, _, p| {
                let mask = p[0].mapv(|x| if x > c { 1.0 } else { 0.0 });
                vec![g * &mask]
            }),
        )
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let value = scalar(self.value(a).sum());
        self.unary(
            a,
            value,
            Box::new(|g, _, p| {
                let gv = scalar_value(g);
                vec![ArrayD::from_elem(p[0].raw_dim(), gv)]
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let value = scalar(self.value(a).sum() / n);
        self.unary(
            a,
            value,
            Box::new(move |g, _, p| {
                let gv = scalar_value(g) / n;
                vec![ArrayD::from_elem(p[0].raw_dim(), gv)]
            }),
        )
    }

    /// Sum along one axis; the axis is removed from the output shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let value = self.value(a).sum_axis(Axis(axis)).into_dyn();
        self.unary(
            a,
            value,
            Box::new(move |g, _, p| {
                let mut out = ArrayD::zeros(p[0].raw_dim());
                for mut lane in out.axis_iter_mut(Axis(axis)) {
                    lane += g;
                }
                vec![out]
            }),
        )
    }

    /// Dot product of two rank-1 tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let av = self
            .value(a)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("dot: rank-1");
        let bv = self
            .value(b)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("dot: rank-1");
        assert_eq!(av.len(), bv.len(), "dot: length mismatch");
        let value = scalar(av.dot(&bv));
        self.binary(
            a,
            b,
            value,
            Box::new(|g, _, p| {
                let gv = scalar_value(g);
                vec![p[1] * gv, p[0] * gv]
            }),
        )
    }

    // ---- linear algebra ----

    /// 2-D matrix product `(m,k) @ (k,n) -> (m,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self
            .value(a)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul: lhs rank-2");
        let bv = self
            .value(b)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul: rhs rank-2");
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dims differ");
        let value = av.dot(&bv).into_dyn();
        self.binary(
            a,
            b,
            value,
            Box::new(|g, _, p| {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let am = p[0].view().into_dimensionality::<Ix2>().unwrap();
                let bm = p[1].view().into_dimensionality::<Ix2>().unwrap();
                vec![gm.dot(&bm.t()).into_dyn(), am.t().dot(&gm).into_dyn()]
            }),
        )
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("transpose2: rank-2")
            .t()
            .to_owned()
            .into_dyn();
        self.unary(
            a,
            value,
            Box::new(|g, _, _| {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                vec![gm.t().to_owned().into_dyn()]
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let shape_vec = shape.to_vec();
        let value = self
            .value(a)
            .to_shape(IxDyn(shape))
            .expect("reshape: element count mismatch")
            .to_owned();
        self.unary(
            a,
            value,
            Box::new(move |g, _, p| {
                let _ = &shape_vec;
                vec![g.to_shape(p[0].raw_dim()).unwrap().to_owned()]
            }),
        )
    }

    // ---- broadcasts ----

    /// Add a rank-1 bias `(c,)` to every column of `(c, t)`.
    pub fn add_bias_col(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(xv.nrows(), bv.len(), "add_bias_col: channel mismatch");
        let mut value = xv.to_owned();
        for mut col in value.columns_mut() {
            col += &bv;
        }
        self.binary(
            x,
            b,
            value.into_dyn(),
            Box::new(|g, _, _| {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                vec![g.clone(), gm.sum_axis(Axis(1)).into_dyn()]
            }),
        )
    }

    /// Add a rank-1 bias `(d,)` to every row of `(t, d)`.
    pub fn add_bias_row(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(xv.ncols(), bv.len(), "add_bias_row: width mismatch");
        let mut value = xv.to_owned();
        for mut row in value.rows_mut() {
            row += &bv;
        }
        self.binary(
            x,
            b,
            value.into_dyn(),
            Box::new(|g, _, _| {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                vec![g.clone(), gm.sum_axis(Axis(0)).into_dyn()]
            }),
        )
    }

    /// Multiply every element of `x` by a scalar variable `s` (rank-0).
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        let sv = scalar_value(self.value(s));
        let value = self.value(x) * sv;
        self.binary(
            x,
            s,
            value,
            Box::new(|g, _, p| {
                let sv = scalar_value(p[1]);
                let ds = (g * p[0]).sum();
                vec![g * sv, scalar(ds)]
            }),
        )
    }

    // ---- structure ----

    /// Concatenate along `axis`.
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no parts");
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat: shapes");
        let sizes: Vec<usize> = parts
            .iter()
            .map(|v| self.value(*v).shape()[axis])
            .collect();
        let parent_ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        self.push(
            value,
            parent_ids,
            Some(Box::new(move |g, _, _| {
                let mut grads = Vec::with_capacity(sizes.len());
                let mut offset = 0usize;
                for &sz in &sizes {
                    let part = g
                        .slice_axis(Axis(axis), Slice::from(offset..offset + sz))
                        .to_owned();
                    grads.push(part);
                    offset += sz;
                }
                grads
            })),
        )
    }

    /// Reverse the order of entries along `axis` (a volume-preserving
    /// permutation; its own inverse).
    pub fn reverse_axis(&mut self, a: Var, axis: usize) -> Var {
        let mut value = self.value(a).clone();
        value.invert_axis(Axis(axis));
        self.unary(
            a,
            value,
            Box::new(move |g, _, _| {
                let mut dg = g.clone();
                dg.invert_axis(Axis(axis));
                vec![dg]
            }),
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.unary(
            a,
            value,
            Box::new(move |g, _, p| {
                let mut out = ArrayD::zeros(p[0].raw_dim());
                out.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                vec![out]
            }),
        )
    }

    // ---- normalization ----

    /// Softmax over the last axis of a rank-2 tensor, with optional additive
    /// mask applied to the logits before normalization (`-inf` entries drop
    /// out of the distribution).
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&ndarray::Array2<f64>>) -> Var {
        let xv = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let mut logits = xv.to_owned();
        if let Some(m) = mask {
            assert_eq!(m.dim(), logits.dim(), "softmax mask shape");
            logits += m;
        }
        let mut value = logits;
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let total = row.sum();
            row.mapv_inplace(|x| x / total);
        }
        self.unary(
            a,
            value.into_dyn(),
            Box::new(|g, out, _| {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let ym = out.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = gm.to_owned();
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(ym.rows()) {
                    let inner: f64 = drow
                        .iter()
                        .zip(yrow.iter())
                        .map(|(d, y)| d * y)
                        .sum();
                    for (d, y) in drow.iter_mut().zip(yrow.iter()) {
                        *d = (*d - inner) * y;
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Layer normalization over the last axis of a rank-2 tensor with learned
    /// gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let gv = self.value(gamma).view().into_dimensionality::<Ix1>().unwrap();
        let bv = self.value(beta).view().into_dimensionality::<Ix1>().unwrap();
        let d = xv.ncols();
        assert_eq!(gv.len(), d, "layer_norm: gamma width");
        assert_eq!(bv.len(), d, "layer_norm: beta width");
        let mut value = xv.to_owned();
        for mut row in value.rows_mut() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (elem, (g, b)) in row.iter_mut().zip(gv.iter().zip(bv.iter())) {
                *elem = (*elem - mean) * inv * g + b;
            }
        }
        self.push(
            value.into_dyn(),
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |g, _, p| {
                let xm = p[0].view().into_dimensionality::<Ix2>().unwrap();
                let gam = p[1].view().into_dimensionality::<Ix1>().unwrap();
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let dn = xm.ncols() as f64;
                let mut dx = ndarray::Array2::<f64>::zeros(xm.dim());
                let mut dgamma = ndarray::Array1::<f64>::zeros(xm.ncols());
                let mut dbeta = ndarray::Array1::<f64>::zeros(xm.ncols());
                for ((xrow, grow), mut dxrow) in
                    xm.rows().into_iter().zip(gm.rows()).zip(dx.rows_mut())
                {
                    let mean = xrow.sum() / dn;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dn;
                    let inv = 1.0 / (var + eps).sqrt();
                    // x_hat and the two row-level reductions of the chain rule
                    let xhat: Vec<f64> = xrow.iter().map(|v| (v - mean) * inv).collect();
                    let gy: Vec<f64> = grow
                        .iter()
                        .zip(gam.iter())
                        .map(|(g, gm)| g * gm)
                        .collect();
                    let sum_gy: f64 = gy.iter().sum();
                    let sum_gy_xhat: f64 = gy.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for i in 0..xrow.len() {
                        dxrow[i] = inv * (gy[i] - sum_gy / dn - xhat[i] * sum_gy_xhat / dn);
                        dgamma[i] += grow[i] * xhat[i];
                        dbeta[i] += grow[i];
                    }
                }
                vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
            })),
        )
    }

    // ---- convolution ----

    /// Dilated 1-D convolution with 'same' output length.
    ///
    /// `x` is `(c_in, t)`, `w` is `(c_out, c_in, kw)` with odd `kw`, `b` is
    /// `(c_out,)`. Implemented as im2col + matmul.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize, pad: PadMode) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
        let (c_in, t) = xv.dim();
        let (c_out, wc_in, kw) = wv.dim();
        assert_eq!(c_in, wc_in, "conv1d: channel mismatch");
        assert_eq!(bv.len(), c_out, "conv1d: bias mismatch");
        assert!(kw % 2 == 1, "conv1d: kernel width must be odd");

        let cols = im2col(&xv.to_owned(), kw, dilation, pad);
        let w2 = wv.to_shape((c_out, c_in * kw)).unwrap().to_owned();
        let mut out = w2.dot(&cols);
        for mut col in out.columns_mut() {
            col += &bv;
        }

        self.push(
            out.into_dyn(),
            vec![x.0, w.0, b.0],
            Some(Box::new(move |g, _, p| {
                let xm = p[0].view().into_dimensionality::<Ix2>().unwrap().to_owned();
                let wm = p[1].view().into_dimensionality::<Ix3>().unwrap();
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let (c_in, t_) = xm.dim();
                debug_assert_eq!(t_, t);
                let cols = im2col(&xm, kw, dilation, pad);
                // dW = g @ cols^T, reshaped back to (c_out, c_in, kw)
                let dw2 = gm.dot(&cols.t());
                let dw = dw2
                    .to_shape((c_out, c_in, kw))
                    .unwrap()
                    .to_owned()
                    .into_dyn();
                let db = gm.sum_axis(Axis(1)).into_dyn();
                // dX = col2im(W^T @ g)
                let w2 = wm.to_shape((c_out, c_in * kw)).unwrap().to_owned();
                let dcols = w2.t().dot(&gm);
                let dx = col2im(&dcols, c_in, t, kw, dilation, pad);
                vec![dx.into_dyn(), dw, db]
            })),
        )
    }

    // ---- backward pass ----

    /// Backpropagate from a scalar loss; returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward: loss must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(
            self.nodes[loss.0].value.raw_dim(),
            1.0,
        ));
        for idx in (0..self.nodes.len()).rev() {
            let Some(grad_out) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(backward) = &node.backward {
                let parent_vals: Vec<&Tensor> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let parent_grads = backward(&grad_out, &node.value, &parent_vals);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    debug_assert_eq!(
                        pg.shape(),
                        self.nodes[*p].value.shape(),
                        "backward: gradient shape mismatch at node {p}"
                    );
                    match &mut grads[*p] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[idx] = Some(grad_out);
        }
        Gradients { grads }
    }
}

/// Source index for kernel tap `j` at output position `t`, or `None` when the
/// tap falls outside a zero-padded input.
fn tap_index(t: usize, j: usize, kw: usize, dilation: usize, len: usize, pad: PadMode) -> Option<usize> {
    let half = (kw / 2) as isize;
    let offset = (j as isize - half) * dilation as isize;
    let src = t as isize + offset;
    match pad {
        PadMode::Zero => {
            if src < 0 || src >= len as isize {
                None
            } else {
                Some(src as usize)
            }
        }
        PadMode::Circular => Some(src.rem_euclid(len as isize) as usize),
    }
}

fn im2col(x: &ndarray::Array2<f64>, kw: usize, dilation: usize, pad: PadMode) -> ndarray::Array2<f64> {
    let (c_in, t) = x.dim();
    let mut cols = ndarray::Array2::<f64>::zeros((c_in * kw, t));
    for c in 0..c_in {
        for j in 0..kw {
            let row = c * kw + j;
            for ti in 0..t {
                if let Some(src) = tap_index(ti, j, kw, dilation, t, pad) {
                    cols[[row, ti]] = x[[c, src]];
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &ndarray::Array2<f64>,
    c_in: usize,
    t: usize,
    kw: usize,
    dilation: usize,
    pad: PadMode,
) -> ndarray::Array2<f64> {
    let mut dx = ndarray::Array2::<f64>::zeros((c_in, t));
    for c in 0..c_in {
        for j in 0..kw {
            let row = c * kw + j;
            for ti in 0..t {
                if let Some(src) = tap_index(ti, j, kw, dilation, t, pad) {
                    dx[[c, src]] += dcols[[row, ti]];
                }
            }
        }
    }
    dx
}
