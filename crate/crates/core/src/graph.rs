//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its output value; node ids are
//! topologically ordered by construction, so the backward pass is a single
//! reverse sweep. Tensors whose leading axis is a channel axis are treated as
//! `[C, N]` matrices by the column-oriented operations, with `N` the
//! flattened remainder (spatial positions or vector count).

use std::rc::Rc;

use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A sparse linear map over the column axis, applied independently to every
/// row: `out[c, j] = sum_i w(j, i) * x[c, i]`.
///
/// Pooling, masked averaging and bilinear resampling are all instances.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMap {
    n_in: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SpatialMap {
    pub fn new(n_in: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        debug_assert!(rows.iter().flatten().all(|&(i, _)| i < n_in));
        Self { n_in, rows }
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    /// Applies the map to a plain `[C, n_in]` tensor.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let c = x.rows();
        assert_eq!(x.cols(), self.n_in, "spatial map input size mismatch");
        let n_out = self.rows.len();
        let mut out = vec![0.0; c * n_out];
        let xd = x.data();
        for ch in 0..c {
            let src = &xd[ch * self.n_in..(ch + 1) * self.n_in];
            let dst = &mut out[ch * n_out..(ch + 1) * n_out];
            for (j, row) in self.rows.iter().enumerate() {
                let mut acc = 0.0;
                for &(i, w) in row {
                    acc += w * src[i];
                }
                dst[j] = acc;
            }
        }
        Tensor::new(vec![c, n_out], out)
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Spatial {
        input: Var,
        map: Rc<SpatialMap>,
    },
    LayerNorm {
        input: Var,
        inv_std: f64,
    },
    ChannelAffine {
        input: Var,
        gamma: Var,
        beta: Var,
    },
    Silu {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    L2NormalizeCols {
        input: Var,
        norms: Vec<f64>,
    },
    MatTn {
        a: Var,
        b: Var,
    },
    ColDot {
        a: Var,
        b: Var,
    },
    GatherCols {
        input: Var,
        index: Vec<usize>,
    },
    ConcatCols {
        inputs: Vec<Var>,
    },
    InfoNce {
        pos: Var,
        neg: Var,
        tau: f64,
        probs: Vec<f64>,
    },
    GroupMax {
        input: Var,
        argmax: Vec<usize>,
        n_groups: usize,
    },
    SoftmaxRows {
        input: Var,
    },
    Nll {
        input: Var,
        target: Vec<usize>,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    LinComb {
        terms: Vec<(Var, f64)>,
    },
    Reshape {
        input: Var,
    },
    Sum {
        input: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence
    /// the differentiated output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LAYER_NORM_EPS: f64 = 1e-5;
/// Added to vector norms before division.
pub const L2_EPS: f64 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Same-padded 2-D convolution with unit stride.
    ///
    /// `input` is `[Cin, H, W]`, `weight` is `[Cout, Cin, k, k]` with odd `k`,
    /// `bias` is `[Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let x = self.value(input);
        let w = self.value(weight);
        let (cin, h, wd) = dims3(x);
        let (cout, wcin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        assert_eq!(self.value(bias).len(), cout);
        let col = im2col(x.data(), cin, h, wd, k);
        let hw = h * wd;
        let kk = cin * k * k;
        let mut out = vec![0.0; cout * hw];
        for (o, &b) in self.value(bias).data().iter().enumerate() {
            out[o * hw..(o + 1) * hw].fill(b);
        }
        gemm(cout, kk, hw, w.data(), false, &col, false, &mut out, 1.0);
        let ng = self.ng(input) || self.ng(weight) || self.ng(bias);
        self.push(
            Tensor::new(vec![cout, h, wd], out),
            Op::Conv2d { input, weight, bias },
            ng,
        )
    }

    /// Applies a [`SpatialMap`] to the column axis of `input`.
    pub fn spatial(&mut self, input: Var, map: Rc<SpatialMap>) -> Var {
        let out = map.apply(self.value(input));
        let ng = self.ng(input);
        self.push(out, Op::Spatial { input, map }, ng)
    }

    /// Normalizes all elements of `input` to zero mean and unit variance.
    pub fn layer_norm(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let n = x.len() as f64;
        let mean = x.data().iter().sum::<f64>() / n;
        let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let data = x.data().iter().map(|v| (v - mean) * inv_std).collect();
        let out = Tensor::new(x.shape().to_vec(), data);
        let ng = self.ng(input);
        self.push(out, Op::LayerNorm { input, inv_std }, ng)
    }

    /// `gamma[c] * x[c, :] + beta[c]`.
    pub fn channel_affine(&mut self, input: Var, gamma: Var, beta: Var) -> Var {
        let x = self.value(input);
        let (c, n) = (x.rows(), x.cols());
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), c);
        let mut data = x.data().to_vec();
        for ch in 0..c {
            for v in &mut data[ch * n..(ch + 1) * n] {
                *v = g[ch] * *v + b[ch];
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data);
        let ng = self.ng(input) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::ChannelAffine { input, gamma, beta }, ng)
    }

    /// `x * sigmoid(x)`, elementwise.
    pub fn silu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * sigmoid(v)).collect();
        let out = Tensor::new(x.shape().to_vec(), data);
        let ng = self.ng(input);
        self.push(out, Op::Silu { input }, ng)
    }

    /// Pointwise linear layer: `[Ci, N]` -> `weight [Co, Ci]` -> `[Co, N]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let x = self.value(input);
        let w = self.value(weight);
        let (ci, n) = (x.rows(), x.cols());
        let co = w.shape()[0];
        assert_eq!(w.shape()[1], ci, "linear input dimension mismatch");
        let mut out = vec![0.0; co * n];
        for (o, &b) in self.value(bias).data().iter().enumerate() {
            out[o * n..(o + 1) * n].fill(b);
        }
        gemm(co, ci, n, w.data(), false, x.data(), false, &mut out, 1.0);
        let ng = self.ng(input) || self.ng(weight) || self.ng(bias);
        self.push(Tensor::new(vec![co, n], out), Op::Linear { input, weight, bias }, ng)
    }

    /// Divides every column by its Euclidean norm (plus [`L2_EPS`]).
    pub fn l2_normalize_cols(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let (c, n) = (x.rows(), x.cols());
        let xd = x.data();
        let norms: Vec<f64> = (0..n)
            .map(|j| (0..c).map(|i| xd[i * n + j] * xd[i * n + j]).sum::<f64>().sqrt())
            .collect();
        let mut data = xd.to_vec();
        for i in 0..c {
            for j in 0..n {
                data[i * n + j] /= norms[j] + L2_EPS;
            }
        }
        let out = Tensor::new(vec![c, n], data);
        let ng = self.ng(input);
        self.push(out, Op::L2NormalizeCols { input, norms }, ng)
    }

    /// `a^T b` for `a: [C, N]`, `b: [C, M]`, giving `[N, M]`.
    pub fn mat_tn(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (c, n, m) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(bv.rows(), c, "mat_tn inner dimension mismatch");
        let mut out = vec![0.0; n * m];
        gemm(n, c, m, av.data(), true, bv.data(), false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![n, m], out), Op::MatTn { a, b }, ng)
    }

    /// Column-wise dot products of two `[C, N]` tensors, giving `[N]`.
    pub fn col_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (c, n) = (av.rows(), av.cols());
        assert_eq!((bv.rows(), bv.cols()), (c, n), "col_dot shape mismatch");
        let mut out = vec![0.0; n];
        for (ra, rb) in av.data().chunks_exact(n).zip(bv.data().chunks_exact(n)).take(c) {
            for (o, (x, y)) in out.iter_mut().zip(ra.iter().zip(rb)) {
                *o += x * y;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![n], out), Op::ColDot { a, b }, ng)
    }

    pub fn gather_cols(&mut self, input: Var, index: Vec<usize>) -> Var {
        let x = self.value(input);
        let (c, n) = (x.rows(), x.cols());
        let m = index.len();
        let mut out = vec![0.0; c * m];
        for i in 0..c {
            for (j, &src) in index.iter().enumerate() {
                assert!(src < n, "gather index out of range");
                out[i * m + j] = x.data()[i * n + src];
            }
        }
        let ng = self.ng(input);
        self.push(Tensor::new(vec![c, m], out), Op::GatherCols { input, index }, ng)
    }

    /// Concatenates `[C, N_k]` tensors along the column axis.
    pub fn concat_cols(&mut self, inputs: &[Var]) -> Var {
        assert!(!inputs.is_empty());
        let c = self.value(inputs[0]).rows();
        let total: usize = inputs.iter().map(|&v| self.value(v).cols()).sum();
        let mut out = vec![0.0; c * total];
        let mut offset = 0;
        for &v in inputs {
            let t = self.value(v);
            assert_eq!(t.rows(), c, "concat_cols row mismatch");
            let n = t.cols();
            for i in 0..c {
                out[i * total + offset..i * total + offset + n].copy_from_slice(&t.data()[i * n..(i + 1) * n]);
            }
            offset += n;
        }
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(
            Tensor::new(vec![c, total], out),
            Op::ConcatCols {
                inputs: inputs.to_vec(),
            },
            ng,
        )
    }

    /// Mean InfoNCE over rows: row `r` contributes
    /// `-log(exp(pos[r]/tau) / (exp(pos[r]/tau) + sum_m exp(neg[r, m]/tau)))`.
    pub fn info_nce(&mut self, pos: Var, neg: Var, tau: f64) -> Var {
        let (p, q) = (self.value(pos), self.value(neg));
        let n = p.len();
        let m = q.cols();
        assert_eq!(q.rows(), n, "info_nce row mismatch");
        let mut probs = vec![0.0; n * (m + 1)];
        let mut total = 0.0;
        for r in 0..n {
            let row = &mut probs[r * (m + 1)..(r + 1) * (m + 1)];
            row[0] = p.data()[r] / tau;
            for k in 0..m {
                row[k + 1] = q.data()[r * m + k] / tau;
            }
            let lse = log_sum_exp(row);
            total += lse - row[0];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let ng = self.ng(pos) || self.ng(neg);
        self.push(
            Tensor::scalar(total / n as f64),
            Op::InfoNce { pos, neg, tau, probs },
            ng,
        )
    }

    /// Row-group maximum: `out[g, j] = max_{r in groups[g]} x[r, j]`, with
    /// ties resolved to the earliest listed row.
    pub fn group_max(&mut self, input: Var, groups: &[Vec<usize>]) -> Var {
        let x = self.value(input);
        let n = x.cols();
        let mut out = vec![0.0; groups.len() * n];
        let mut argmax = vec![0; groups.len() * n];
        for (g, rows) in groups.iter().enumerate() {
            assert!(!rows.is_empty(), "group_max with an empty group");
            for j in 0..n {
                let mut best = rows[0];
                let mut best_v = x.data()[best * n + j];
                for &r in &rows[1..] {
                    let v = x.data()[r * n + j];
                    if v > best_v {
                        best = r;
                        best_v = v;
                    }
                }
                out[g * n + j] = best_v;
                argmax[g * n + j] = best;
            }
        }
        let ng = self.ng(input);
        self.push(
            Tensor::new(vec![groups.len(), n], out),
            Op::GroupMax {
                input,
                argmax,
                n_groups: groups.len(),
            },
            ng,
        )
    }

    /// Softmax over the leading axis, independently for every column.
    pub fn softmax_rows(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let (r, n) = (x.rows(), x.cols());
        let mut out = vec![0.0; r * n];
        let mut col = vec![0.0; r];
        for j in 0..n {
            for (i, v) in col.iter_mut().enumerate() {
                *v = x.data()[i * n + j];
            }
            let lse = log_sum_exp(&col);
            for i in 0..r {
                out[i * n + j] = (col[i] - lse).exp();
            }
        }
        let ng = self.ng(input);
        self.push(Tensor::new(vec![r, n], out), Op::SoftmaxRows { input }, ng)
    }

    /// Mean negative log-likelihood of per-column class probabilities:
    /// `mean_j -ln x[target[j], j]`.
    pub fn nll(&mut self, input: Var, target: Vec<usize>) -> Var {
        let x = self.value(input);
        let n = x.cols();
        assert_eq!(target.len(), n, "nll target length mismatch");
        let mut total = 0.0;
        for (j, &t) in target.iter().enumerate() {
            total -= x.data()[t * n + j].ln();
        }
        let ng = self.ng(input);
        self.push(Tensor::scalar(total / n as f64), Op::Nll { input, target }, ng)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(x.shape().to_vec(), data);
        let ng = self.ng(input);
        self.push(out, Op::Scale { input, factor }, ng)
    }

    /// `sum_k w_k * x_k` over same-shaped operands.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let shape = self.value(terms[0].0).shape().to_vec();
        let mut data = vec![0.0; self.value(terms[0].0).len()];
        for &(v, w) in terms {
            let t = self.value(v);
            assert_eq!(t.len(), data.len(), "lin_comb shape mismatch");
            for (d, x) in data.iter_mut().zip(t.data()) {
                *d += w * x;
            }
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(Tensor::new(shape, data), Op::LinComb { terms: terms.to_vec() }, ng)
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Var {
        let out = self.value(input).clone().reshape(shape);
        let ng = self.ng(input);
        self.push(out, Op::Reshape { input }, ng)
    }

    /// Sum of all elements.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        let ng = self.ng(input);
        self.push(Tensor::scalar(total), Op::Sum { input }, ng)
    }

    /// Arithmetic mean of same-shaped operands.
    pub fn mean_of(&mut self, inputs: &[Var]) -> Var {
        let w = 1.0 / inputs.len() as f64;
        let terms: Vec<(Var, f64)> = inputs.iter().map(|&v| (v, w)).collect();
        self.lin_comb(&terms)
    }

    /// Back-propagates from the single-element node `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(Tensor::new(self.value(output).shape().to_vec(), vec![1.0]));
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let go = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (cin, h, wd) = dims3(x);
                let (cout, k) = (w.shape()[0], w.shape()[2]);
                let hw = h * wd;
                let kk = cin * k * k;
                if self.ng(*bias) {
                    let db: Vec<f64> = (0..cout).map(|o| go[o * hw..(o + 1) * hw].iter().sum()).collect();
                    accumulate(grads, *bias, self.value(*bias).shape().to_vec(), db);
                }
                if self.ng(*weight) {
                    let col = im2col(x.data(), cin, h, wd, k);
                    let mut dw = vec![0.0; cout * kk];
                    gemm(cout, hw, kk, go, false, &col, true, &mut dw, 0.0);
                    accumulate(grads, *weight, w.shape().to_vec(), dw);
                }
                if self.ng(*input) {
                    let mut dcol = vec![0.0; kk * hw];
                    gemm(kk, cout, hw, w.data(), true, go, false, &mut dcol, 0.0);
                    let dx = col2im(&dcol, cin, h, wd, k);
                    accumulate(grads, *input, x.shape().to_vec(), dx);
                }
            }
            Op::Spatial { input, map } => {
                let x = self.value(*input);
                let (c, n_in) = (x.rows(), x.cols());
                let n_out = map.n_out();
                let mut dx = vec![0.0; c * n_in];
                for ch in 0..c {
                    let dst = &mut dx[ch * n_in..(ch + 1) * n_in];
                    let src = &go[ch * n_out..(ch + 1) * n_out];
                    for (j, row) in map.rows().iter().enumerate() {
                        let g = src[j];
                        for &(i, w) in row {
                            dst[i] += w * g;
                        }
                    }
                }
                accumulate(grads, *input, x.shape().to_vec(), dx);
            }
            Op::LayerNorm { input, inv_std } => {
                let y = node.value.data();
                let n = y.len() as f64;
                let mean_g = go.iter().sum::<f64>() / n;
                let mean_gy = go.iter().zip(y).map(|(g, y)| g * y).sum::<f64>() / n;
                let dx = go
                    .iter()
                    .zip(y)
                    .map(|(g, y)| inv_std * (g - mean_g - y * mean_gy))
                    .collect();
                accumulate(grads, *input, node.value.shape().to_vec(), dx);
            }
            Op::ChannelAffine { input, gamma, beta } => {
                let x = self.value(*input);
                let (c, n) = (x.rows(), x.cols());
                let g = self.value(*gamma).data();
                if self.ng(*gamma) {
                    let dg = (0..c)
                        .map(|ch| (0..n).map(|j| go[ch * n + j] * x.data()[ch * n + j]).sum())
                        .collect();
                    accumulate(grads, *gamma, vec![c], dg);
                }
                if self.ng(*beta) {
                    let db = (0..c).map(|ch| go[ch * n..(ch + 1) * n].iter().sum()).collect();
                    accumulate(grads, *beta, vec![c], db);
                }
                if self.ng(*input) {
                    let mut dx = go.to_vec();
                    for ch in 0..c {
                        for v in &mut dx[ch * n..(ch + 1) * n] {
                            *v *= g[ch];
                        }
                    }
                    accumulate(grads, *input, x.shape().to_vec(), dx);
                }
            }
            Op::Silu { input } => {
                let x = self.value(*input);
                let dx = x
                    .data()
                    .iter()
                    .zip(go)
                    .map(|(&v, g)| {
                        let s = sigmoid(v);
                        g * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, *input, x.shape().to_vec(), dx);
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (ci, n) = (x.rows(), x.cols());
                let co = w.shape()[0];
                if self.ng(*bias) {
                    let db = (0..co).map(|o| go[o * n..(o + 1) * n].iter().sum()).collect();
                    accumulate(grads, *bias, vec![co], db);
                }
                if self.ng(*weight) {
                    let mut dw = vec![0.0; co * ci];
                    gemm(co, n, ci, go, false, x.data(), true, &mut dw, 0.0);
                    accumulate(grads, *weight, w.shape().to_vec(), dw);
                }
                if self.ng(*input) {
                    let mut dx = vec![0.0; ci * n];
                    gemm(ci, co, n, w.data(), true, go, false, &mut dx, 0.0);
                    accumulate(grads, *input, x.shape().to_vec(), dx);
                }
            }
            Op::L2NormalizeCols { input, norms } => {
                let x = self.value(*input);
                let (c, n) = (x.rows(), x.cols());
                let xd = x.data();
                let mut dx = vec![0.0; c * n];
                for j in 0..n {
                    let d = norms[j] + L2_EPS;
                    let dot: f64 = (0..c).map(|i| go[i * n + j] * xd[i * n + j]).sum();
                    let coef = if norms[j] > 0.0 { dot / (d * d * norms[j]) } else { 0.0 };
                    for i in 0..c {
                        dx[i * n + j] = go[i * n + j] / d - xd[i * n + j] * coef;
                    }
                }
                accumulate(grads, *input, x.shape().to_vec(), dx);
            }
            Op::MatTn { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (c, n, m) = (av.rows(), av.cols(), bv.cols());
                if self.ng(*a) {
                    // dA[c, n] = sum_m B[c, m] G[n, m]
                    let mut da = vec![0.0; c * n];
                    gemm(c, m, n, bv.data(), false, go, true, &mut da, 0.0);
                    accumulate(grads, *a, av.shape().to_vec(), da);
                }
                if self.ng(*b) {
                    // dB[c, m] = sum_n A[c, n] G[n, m]
                    let mut db = vec![0.0; c * m];
                    gemm(c, n, m, av.data(), false, go, false, &mut db, 0.0);
                    accumulate(grads, *b, bv.shape().to_vec(), db);
                }
            }
            Op::ColDot { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (c, n) = (av.rows(), av.cols());
                if self.ng(*a) {
                    let mut da = vec![0.0; c * n];
                    for i in 0..c {
                        for j in 0..n {
                            da[i * n + j] = bv.data()[i * n + j] * go[j];
                        }
                    }
                    accumulate(grads, *a, av.shape().to_vec(), da);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; c * n];
                    for i in 0..c {
                        for j in 0..n {
                            db[i * n + j] = av.data()[i * n + j] * go[j];
                        }
                    }
                    accumulate(grads, *b, bv.shape().to_vec(), db);
                }
            }
            Op::GatherCols { input, index } => {
                let x = self.value(*input);
                let (c, n) = (x.rows(), x.cols());
                let m = index.len();
                let mut dx = vec![0.0; c * n];
                for i in 0..c {
                    for (j, &src) in index.iter().enumerate() {
                        dx[i * n + src] += go[i * m + j];
                    }
                }
                accumulate(grads, *input, x.shape().to_vec(), dx);
            }
            Op::ConcatCols { inputs } => {
                let total = node.value.cols();
                let c = node.value.rows();
                let mut offset = 0;
                for &v in inputs {
                    let t = self.value(v);
                    let n = t.cols();
                    if self.ng(v) {
                        let mut d = vec![0.0; c * n];
                        for i in 0..c {
                            d[i * n..(i + 1) * n].copy_from_slice(&go[i * total + offset..i * total + offset + n]);
                        }
                        accumulate(grads, v, t.shape().to_vec(), d);
                    }
                    offset += n;
                }
            }
            Op::InfoNce { pos, neg, tau, probs } => {
                let n = self.value(*pos).len();
                let m = self.value(*neg).cols();
                let scale = go[0] / (tau * n as f64);
                if self.ng(*pos) {
                    let dp = (0..n).map(|r| (probs[r * (m + 1)] - 1.0) * scale).collect();
                    accumulate(grads, *pos, self.value(*pos).shape().to_vec(), dp);
                }
                if self.ng(*neg) {
                    let mut dn = vec![0.0; n * m];
                    for r in 0..n {
                        for k in 0..m {
                            dn[r * m + k] = probs[r * (m + 1) + k + 1] * scale;
                        }
                    }
                    accumulate(grads, *neg, self.value(*neg).shape().to_vec(), dn);
                }
            }
            Op::GroupMax {
                input,
                argmax,
                n_groups,
            } => {
                let x = self.value(*input);
                let n = x.cols();
                let mut dx = vec![0.0; x.len()];
                for g in 0..*n_groups {
                    for j in 0..n {
                        dx[argmax[g * n + j] * n + j] += go[g * n + j];
                    }
                }
                accumulate(grads, *input, x.shape().to_vec(), dx);
            }
            Op::SoftmaxRows { input } => {
                let y = node.value.data();
                let (r, n) = (node.value.rows(), node.value.cols());
                let mut dx = vec![0.0; r * n];
                for j in 0..n {
                    let dot: f64 = (0..r).map(|i| y[i * n + j] * go[i * n + j]).sum();
                    for i in 0..r {
                        dx[i * n + j] = y[i * n + j] * (go[i * n + j] - dot);
                    }
                }
                accumulate(grads, *input, self.value(*input).shape().to_vec(), dx);
            }
            Op::Nll { input, target } => {
                let x = self.value(*input);
                let n = x.cols();
                let mut dx = vec![0.0; x.len()];
                for (j, &t) in target.iter().enumerate() {
                    dx[t * n + j] = -go[0] / (n as f64 * x.data()[t * n + j]);
                }
                accumulate(grads, *input, x.shape().to_vec(), dx);
            }
            Op::Scale { input, factor } => {
                let dx = go.iter().map(|g| g * factor).collect();
                accumulate(grads, *input, node.value.shape().to_vec(), dx);
            }
            Op::Reshape { input } => {
                let shape = self.value(*input).shape().to_vec();
                accumulate(grads, *input, shape, go.to_vec());
            }
            Op::Sum { input } => {
                let x = self.value(*input);
                accumulate(grads, *input, x.shape().to_vec(), vec![go[0]; x.len()]);
            }
            Op::LinComb { terms } => {
                for &(v, w) in terms {
                    if self.ng(v) {
                        let d = go.iter().map(|g| g * w).collect();
                        accumulate(grads, v, self.value(v).shape().to_vec(), d);
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: Vec<usize>, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(&d) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape, d)),
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected a [C, H, W] tensor, got {s:?}");
    (s[0], s[1], s[2])
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(sum(exp(x)))` with compensated summation.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + neumaier_sum(xs.iter().map(|x| (x - max).exp())).ln()
}

/// Neumaier's compensated summation.
pub fn neumaier_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let hw = h * w;
    let mut col = vec![0.0; cin * k * k * hw];
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &x[c * hw + sy as usize * w..c * hw + (sy as usize + 1) * w];
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            dst[y * w + xx] = src_row[sx as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let hw = h * w;
    let mut x = vec![0.0; cin * hw];
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            x[c * hw + sy as usize * w + sx as usize] += src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `[m, k]`, `op(b)` is
/// `[k, n]` and all buffers are row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every index reachable through the
    // given row/column strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn rand_tensor(shape: Vec<usize>, seed: &mut u64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| lcg(seed)).collect())
    }

    /// Checks the gradient of `build(graph, leaves) -> scalar` against
    /// central finite differences for every leaf element.
    fn check(leaves: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().cloned().map(|t| g.param(t)).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads
                .get(vars[li])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(leaf.shape().to_vec()));
            for e in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vars: Vec<Var> = leaves
                        .iter()
                        .enumerate()
                        .map(|(i, t)| {
                            let mut t = t.clone();
                            if i == li {
                                t.data_mut()[e] += delta;
                            }
                            g.param(t)
                        })
                        .collect();
                    let out = build(&mut g, &vars);
                    g.value(out).item()
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.data()[e];
                assert!(
                    (a - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "leaf {li} elem {e}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn conv_layer_norm_affine_silu_gradients() {
        let mut s = 7;
        let x = rand_tensor(vec![2, 5, 4], &mut s);
        let w = rand_tensor(vec![3, 2, 3, 3], &mut s);
        let b = rand_tensor(vec![3], &mut s);
        let gm = rand_tensor(vec![3], &mut s);
        let bt = rand_tensor(vec![3], &mut s);
        let probe = rand_tensor(vec![3, 5, 4], &mut s);
        check(vec![x, w, b, gm, bt], move |g, v| {
            let y = g.conv2d(v[0], v[1], v[2]);
            let y = g.layer_norm(y);
            let y = g.channel_affine(y, v[3], v[4]);
            let y = g.silu(y);
            let p = g.constant(probe.clone());
            let y = g.col_dot(y, p);
            g.sum(y)
        });
    }

    #[test]
    fn linear_normalize_similarity_gradients() {
        let mut s = 11;
        let x = rand_tensor(vec![4, 6], &mut s);
        let w = rand_tensor(vec![3, 4], &mut s);
        let b = rand_tensor(vec![3], &mut s);
        let other = rand_tensor(vec![3, 5], &mut s);
        check(vec![x, w, b, other], |g, v| {
            let y = g.linear(v[0], v[1], v[2]);
            let y = g.l2_normalize_cols(y);
            let o = g.l2_normalize_cols(v[3]);
            let sims = g.mat_tn(y, o);
            let pos = g.col_dot(y, y);
            let gathered = g.gather_cols(o, vec![0, 1, 2, 3, 4, 0]);
            let pos2 = g.col_dot(y, gathered);
            let _ = pos;
            g.info_nce(pos2, sims, 0.3)
        });
    }

    #[test]
    fn segmentation_head_gradients() {
        let mut s = 3;
        let protos = rand_tensor(vec![4, 3], &mut s);
        let feats = rand_tensor(vec![4, 6], &mut s);
        let upsample = Rc::new(SpatialMap::new(
            6,
            (0..9).map(|j| vec![(j % 6, 0.25), ((j + 1) % 6, 0.75)]).collect(),
        ));
        check(vec![protos, feats], move |g, v| {
            let p = g.l2_normalize_cols(v[0]);
            let f = g.l2_normalize_cols(v[1]);
            let sims = g.mat_tn(p, f);
            let scores = g.group_max(sims, &[vec![0], vec![1, 2]]);
            let scores = g.scale(scores, 5.0);
            let probs = g.softmax_rows(scores);
            let up = g.spatial(probs, upsample.clone());
            g.nll(up, vec![0, 1, 1, 0, 1, 0, 0, 1, 1])
        });
    }

    #[test]
    fn concat_and_lincomb_gradients() {
        let mut s = 5;
        let a = rand_tensor(vec![3, 2], &mut s);
        let b = rand_tensor(vec![3, 4], &mut s);
        check(vec![a, b], |g, v| {
            let c = g.concat_cols(&[v[0], v[1], v[0]]);
            let n = g.l2_normalize_cols(c);
            let q = g.gather_cols(n, vec![0, 1]);
            let pos = g.col_dot(q, q);
            let sims = g.mat_tn(q, n);
            let l1 = g.info_nce(pos, sims, 0.5);
            let l2 = g.info_nce(pos, sims, 1.5);
            let m = g.mean_of(&[l1, l2]);
            g.lin_comb(&[(m, 0.3), (l1, 0.7)])
        });
    }

    #[test]
    fn info_nce_uniform_similarities_give_log_n_plus_one() {
        let mut g = Graph::new();
        let pos = g.constant(Tensor::new(vec![2], vec![0.4, 0.4]));
        let neg = g.constant(Tensor::full(vec![2, 7], 0.4));
        let l = g.info_nce(pos, neg, 0.2);
        assert!((g.value(l).item() - 8f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn group_max_ties_pick_first_row() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 1], vec![1.0, 1.0]));
        let m = g.group_max(x, &[vec![0, 1]]);
        let l = g.lin_comb(&[(m, 1.0)]);
        let grads = g.backward(l);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn neumaier_recovers_cancelled_terms() {
        let s = neumaier_sum([1.0, 1e100, 1.0, -1e100]);
        assert_eq!(s, 2.0);
    }
}
