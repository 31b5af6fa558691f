//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients for
//! every node that depends on a trainable parameter. Graphs are cheap and are
//! rebuilt for every step.
//!
//! Operations panic on shape mismatches: shapes are fixed by validated model
//! configurations, so a mismatch here is a programming error.

use std::collections::BTreeMap;

use crate::matrix::{gemm_into, Matrix};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Geometry of a 2-D convolution over channel-last rows.
///
/// The input is a `(batch·height·width) × in_channels` matrix, one row per
/// pixel, images stacked in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }
}

/// One weighted cross-entropy term: `-weight · Σ_k target[target_row, k] · logp[pred_row, k]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CeTerm {
    pub target_row: usize,
    pub pred_row: usize,
    pub weight: f64,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    Scale(Var, f64),
    MulConst {
        x: Var,
        mask: Matrix,
    },
    ScaleRows {
        x: Var,
        factors: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Hardswish(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax {
        x: Var,
        probs: Matrix,
        active: Vec<bool>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    ReplaceRows {
        x: Var,
        token: Var,
        rows: Vec<bool>,
    },
    Attention {
        qkv: Var,
        segments: Vec<usize>,
        heads: usize,
        probs: Vec<Matrix>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
        cols: Option<Matrix>,
    },
    SegmentMean {
        x: Var,
        seg_len: usize,
    },
    WeightedCe {
        logp: Var,
        targets: Matrix,
        terms: Vec<CeTerm>,
    },
    Sum(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

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

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf registered under `name`. Registering the same name
    /// twice returns the existing node.
    pub fn param(&mut self, name: &str, value: &Matrix) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Gradient for every registered parameter, keyed by name. Parameters that
    /// did not influence the output get a zero gradient.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Matrix> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = grads.get(v).cloned().unwrap_or_else(|| {
                    let (r, c) = self.value(v).shape();
                    Matrix::zeros(r, c)
                });
                (name.clone(), g)
            })
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b)).expect("matmul shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_b: false,
            },
            ng,
        )
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .matmul_t(self.value(b), false, true)
            .expect("matmul_nt shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_b: true,
            },
            ng,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let mut value = x.clone();
        value.add_assign(y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a row vector");
        assert_eq!(xv.cols(), rv.cols(), "add_row width mismatch");
        let mut value = xv.clone();
        let r = rv.row(0).to_vec();
        for i in 0..value.rows() {
            for (a, b) in value.row_mut(i).iter_mut().zip(&r) {
                *a += b;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        self.push(value, Op::AddRow { x, row }, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, s), ng)
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: Matrix) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), mask.shape(), "mul_const shape mismatch");
        let data = xv
            .data()
            .iter()
            .zip(mask.data())
            .map(|(a, b)| a * b)
            .collect();
        let value = Matrix::from_vec(xv.rows(), xv.cols(), data).expect("shape");
        let ng = self.ng(x);
        self.push(value, Op::MulConst { x, mask }, ng)
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<f64>) -> Var {
        let mut value = self.value(x).clone();
        assert_eq!(value.rows(), factors.len(), "scale_rows length mismatch");
        for (i, f) in factors.iter().enumerate() {
            for v in value.row_mut(i) {
                *v *= f;
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::ScaleRows { x, factors }, ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()));
        let ng = self.ng(x);
        self.push(value, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn hardswish(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * (v + 3.0).clamp(0.0, 6.0) / 6.0);
        let ng = self.ng(x);
        self.push(value, Op::Hardswish(x), ng)
    }

    /// Normalizes each row to zero mean / unit variance, then applies the
    /// `1 × cols` affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (g, b) = (
            self.value(gamma).row(0).to_vec(),
            self.value(beta).row(0).to_vec(),
        );
        assert_eq!(g.len(), cols, "layer_norm width mismatch");
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Normalizes each column with the statistics of the current rows
    /// (training-mode batch normalization).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (g, b) = (
            self.value(gamma).row(0).to_vec(),
            self.value(beta).row(0).to_vec(),
        );
        assert_eq!(g.len(), cols, "batch_norm width mismatch");
        let (mean, var) = column_stats(xv);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let h = (xv.get(r, c) - mean[c]) * rstd[c];
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        let ng = self.ng(x);
        self.push(value, Op::Softmax(x), ng)
    }

    /// Row-wise `log(max(softmax(x), exp(floor)))`: entries whose log-probability
    /// falls below `floor` are clamped and pass no gradient.
    pub fn log_softmax_clamped(&mut self, x: Var, floor: f64) -> Var {
        let xv = self.value(x);
        let probs = softmax_rows(xv);
        let (rows, cols) = xv.shape();
        let mut out = Matrix::zeros(rows, cols);
        let mut active = vec![true; rows * cols];
        for r in 0..rows {
            let row = xv.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for c in 0..cols {
                let lp = row[c] - lse;
                if lp < floor {
                    out.set(r, c, floor);
                    active[r * cols + c] = false;
                } else {
                    out.set(r, c, lp);
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::LogSoftmax { x, probs, active }, ng)
    }

    /// Divides each row by `max(‖row‖, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.rows());
        for r in 0..value.rows() {
            let n = value
                .row(r)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(eps);
            norms.push(n);
            for v in value.row_mut(r) {
                *v /= n;
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::L2Normalize { x, norms }, ng)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let value = self.value(x).select_rows(&idx);
        let ng = self.ng(x);
        self.push(value, Op::GatherRows { x, idx }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::vstack(&mats).expect("concat_rows shape");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::hstack(&mats).expect("concat_cols shape");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Rows flagged in `rows` are replaced by the `1 × cols` `token`.
    pub fn replace_rows(&mut self, x: Var, token: Var, rows: Vec<bool>) -> Var {
        let mut value = self.value(x).clone();
        let t = self.value(token).row(0).to_vec();
        assert_eq!(rows.len(), value.rows(), "replace_rows mask length");
        assert_eq!(t.len(), value.cols(), "replace_rows token width");
        for (i, &rep) in rows.iter().enumerate() {
            if rep {
                value.row_mut(i).copy_from_slice(&t);
            }
        }
        let ng = self.ng(x) || self.ng(token);
        self.push(value, Op::ReplaceRows { x, token, rows }, ng)
    }

    /// Multi-head self-attention core. `qkv` holds `[q | k | v]` column blocks
    /// for every token; `segments` lists the token count of each sequence,
    /// sequences being stacked along rows. Returns `softmax(qkᵀ/√d)·v` per head,
    /// heads concatenated along columns.
    pub fn attention(&mut self, qkv: Var, segments: Vec<usize>, heads: usize) -> Var {
        let xv = self.value(qkv);
        let (rows, cols3) = xv.shape();
        assert_eq!(cols3 % 3, 0, "attention input must hold q, k and v");
        assert_eq!(
            segments.iter().sum::<usize>(),
            rows,
            "segments must cover all rows"
        );
        let width = cols3 / 3;
        assert_eq!(width % heads, 0, "width not divisible by heads");
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let keep = self.ng(qkv);
        let mut out = Matrix::zeros(rows, width);
        let mut cache = Vec::new();
        let mut start = 0;
        for &len in &segments {
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, width + h * dh, 2 * width + h * dh);
                let mut p = Matrix::zeros(len, len);
                for i in 0..len {
                    let qi = &xv.row(start + i)[qo..qo + dh];
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..len {
                        let kj = &xv.row(start + j)[ko..ko + dh];
                        let s = dot(qi, kj) * scale;
                        p.set(i, j, s);
                        m = m.max(s);
                    }
                    let mut z = 0.0;
                    for v in p.row_mut(i) {
                        *v = (*v - m).exp();
                        z += *v;
                    }
                    for v in p.row_mut(i) {
                        *v /= z;
                    }
                }
                for i in 0..len {
                    let mut acc = vec![0.0; dh];
                    for j in 0..len {
                        let pij = p.get(i, j);
                        let vj = &xv.row(start + j)[vo..vo + dh];
                        for d in 0..dh {
                            acc[d] += pij * vj[d];
                        }
                    }
                    out.row_mut(start + i)[h * dh..(h + 1) * dh].copy_from_slice(&acc);
                }
                if keep {
                    cache.push(p);
                }
            }
            start += len;
        }
        self.push(
            out,
            Op::Attention {
                qkv,
                segments,
                heads,
                probs: cache,
            },
            keep,
        )
    }

    /// Convolution of channel-last rows with a `(k·k·in) × out` weight matrix.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Var {
        let xv = self.value(x);
        assert_eq!(
            xv.shape(),
            (geom.batch * geom.height * geom.width, geom.in_channels),
            "conv2d input shape"
        );
        assert_eq!(
            self.value(w).shape(),
            (geom.patch_len(), geom.out_channels),
            "conv2d weight shape"
        );
        let cols = im2col(xv, &geom);
        let value = cols.matmul(self.value(w)).expect("conv2d matmul");
        let ng = self.ng(x) || self.ng(w);
        let cols = if ng { Some(cols) } else { None };
        self.push(value, Op::Conv2d { x, w, geom, cols }, ng)
    }

    /// Mean over consecutive groups of `seg_len` rows.
    pub fn segment_mean(&mut self, x: Var, seg_len: usize) -> Var {
        let xv = self.value(x);
        assert!(
            seg_len > 0 && xv.rows() % seg_len == 0,
            "segment_mean length"
        );
        let n = xv.rows() / seg_len;
        let mut out = Matrix::zeros(n, xv.cols());
        for s in 0..n {
            for r in 0..seg_len {
                for (o, v) in out.row_mut(s).iter_mut().zip(xv.row(s * seg_len + r)) {
                    *o += v;
                }
            }
            for o in out.row_mut(s) {
                *o /= seg_len as f64;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::SegmentMean { x, seg_len }, ng)
    }

    /// Weighted sum of cross-entropy terms between constant target rows and
    /// rows of `logp` (log-probabilities). Returns a `1 × 1` node.
    pub fn weighted_cross_entropy(
        &mut self,
        logp: Var,
        targets: Matrix,
        terms: Vec<CeTerm>,
    ) -> Var {
        let lv = self.value(logp);
        assert_eq!(
            lv.cols(),
            targets.cols(),
            "cross-entropy class count mismatch"
        );
        let mut total = 0.0;
        for t in &terms {
            total -= t.weight * dot(targets.row(t.target_row), lv.row(t.pred_row));
        }
        let ng = self.ng(logp);
        self.push(
            Matrix::scalar(total),
            Op::WeightedCe {
                logp,
                targets,
                terms,
            },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(value, Op::Sum(x), ng)
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Grads {
        assert_eq!(
            self.value(output).shape(),
            (1, 1),
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    // dA = G·B (trans_b) or G·Bᵀ
                    let ga = g.matmul_t(bv, false, !trans_b).expect("shape");
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    // dB = Gᵀ·A (trans_b) or Aᵀ·G
                    let gb = if *trans_b {
                        g.matmul_t(av, true, false).expect("shape")
                    } else {
                        av.matmul_t(g, true, false).expect("shape")
                    };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow { x, row } => {
                self.accumulate(grads, *x, g.clone());
                if self.ng(*row) {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (a, b) in gr.row_mut(0).iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.scale(*s)),
            Op::MulConst { x, mask } => {
                let data = g
                    .data()
                    .iter()
                    .zip(mask.data())
                    .map(|(a, b)| a * b)
                    .collect();
                self.accumulate(
                    grads,
                    *x,
                    Matrix::from_vec(g.rows(), g.cols(), data).expect("shape"),
                );
            }
            Op::ScaleRows { x, factors } => {
                let mut gx = g.clone();
                for (i, f) in factors.iter().enumerate() {
                    for v in gx.row_mut(i) {
                        *v *= f;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gi)| {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accumulate(
                    grads,
                    *x,
                    Matrix::from_vec(g.rows(), g.cols(), data).expect("shape"),
                );
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(
                    grads,
                    *x,
                    Matrix::from_vec(g.rows(), g.cols(), data).expect("shape"),
                );
            }
            Op::Hardswish(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gi)| {
                        if v <= -3.0 {
                            0.0
                        } else if v >= 3.0 {
                            gi
                        } else {
                            gi * (2.0 * v + 3.0) / 6.0
                        }
                    })
                    .collect();
                self.accumulate(
                    grads,
                    *x,
                    Matrix::from_vec(g.rows(), g.cols(), data).expect("shape"),
                );
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = xhat.shape();
                let gam = self.value(*gamma).row(0);
                let mut dgamma = Matrix::zeros(1, cols);
                let mut dbeta = Matrix::zeros(1, cols);
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let (gr, hr) = (g.row(r), xhat.row(r));
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for c in 0..cols {
                        let dh = gr[c] * gam[c];
                        s1 += dh;
                        s2 += dh * hr[c];
                        dgamma.data_mut()[c] += gr[c] * hr[c];
                        dbeta.data_mut()[c] += gr[c];
                    }
                    let n = cols as f64;
                    for c in 0..cols {
                        let dh = gr[c] * gam[c];
                        dx.set(r, c, rstd[r] * (dh - s1 / n - hr[c] * s2 / n));
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = xhat.shape();
                let gam = self.value(*gamma).row(0);
                let mut dgamma = Matrix::zeros(1, cols);
                let mut dbeta = Matrix::zeros(1, cols);
                let mut s1 = vec![0.0; cols];
                let mut s2 = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let gv = g.get(r, c);
                        let h = xhat.get(r, c);
                        dgamma.data_mut()[c] += gv * h;
                        dbeta.data_mut()[c] += gv;
                        s1[c] += gv * gam[c];
                        s2[c] += gv * gam[c] * h;
                    }
                }
                let n = rows as f64;
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let dh = g.get(r, c) * gam[c];
                        let h = xhat.get(r, c);
                        dx.set(r, c, rstd[c] * (dh - s1[c] / n - h * s2[c] / n));
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Softmax(x) => {
                let p = &node.value;
                let mut dx = Matrix::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let s = dot(g.row(r), p.row(r));
                    for c in 0..p.cols() {
                        dx.set(r, c, p.get(r, c) * (g.get(r, c) - s));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LogSoftmax { x, probs, active } => {
                let (rows, cols) = probs.shape();
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let mut s = 0.0;
                    for c in 0..cols {
                        if active[r * cols + c] {
                            s += g.get(r, c);
                        }
                    }
                    for c in 0..cols {
                        let gi = if active[r * cols + c] {
                            g.get(r, c)
                        } else {
                            0.0
                        };
                        dx.set(r, c, gi - probs.get(r, c) * s);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let raw = self
                        .value(*x)
                        .row(r)
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt();
                    let proj = if raw >= norms[r] {
                        dot(y.row(r), g.row(r))
                    } else {
                        0.0
                    };
                    for c in 0..y.cols() {
                        dx.set(r, c, (g.get(r, c) - y.get(r, c) * proj) / norms[r]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for (o, &i) in idx.iter().enumerate() {
                    for (a, b) in dx.row_mut(i).iter_mut().zip(g.row(o)) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.ng(p) {
                        let idx: Vec<usize> = (off..off + r).collect();
                        self.accumulate(grads, p, g.select_rows(&idx));
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.ng(p) {
                        let mut gp = Matrix::zeros(g.rows(), c);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    off += c;
                }
            }
            Op::ReplaceRows { x, token, rows } => {
                let mut gx = g.clone();
                let mut gt = Matrix::zeros(1, g.cols());
                for (i, &rep) in rows.iter().enumerate() {
                    if rep {
                        for (a, b) in gt.row_mut(0).iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                        gx.row_mut(i).fill(0.0);
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *token, gt);
            }
            Op::Attention {
                qkv,
                segments,
                heads,
                probs,
            } => {
                let xv = self.value(*qkv);
                let width = xv.cols() / 3;
                let dh = width / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                let mut start = 0;
                let mut pi = 0;
                for &len in segments {
                    for h in 0..*heads {
                        let p = &probs[pi];
                        pi += 1;
                        let (qo, ko, vo, oo) = (h * dh, width + h * dh, 2 * width + h * dh, h * dh);
                        // dP = dO·Vᵀ ; dV = Pᵀ·dO
                        let mut dp = Matrix::zeros(len, len);
                        for i in 0..len {
                            let go = &g.row(start + i)[oo..oo + dh];
                            for j in 0..len {
                                let vj = &xv.row(start + j)[vo..vo + dh];
                                dp.set(i, j, dot(go, vj));
                                let pij = p.get(i, j);
                                let dvj = &mut dx.row_mut(start + j)[vo..vo + dh];
                                for d in 0..dh {
                                    dvj[d] += pij * go[d];
                                }
                            }
                        }
                        // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                        for i in 0..len {
                            let s: f64 = (0..len).map(|j| dp.get(i, j) * p.get(i, j)).sum();
                            for j in 0..len {
                                let ds = p.get(i, j) * (dp.get(i, j) - s) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for d in 0..dh {
                                    let kj = xv.get(start + j, ko + d);
                                    let qi = xv.get(start + i, qo + d);
                                    dx.data_mut()[(start + i) * 3 * width + qo + d] += ds * kj;
                                    dx.data_mut()[(start + j) * 3 * width + ko + d] += ds * qi;
                                }
                            }
                        }
                    }
                    start += len;
                }
                self.accumulate(grads, *qkv, dx);
            }
            Op::Conv2d { x, w, geom, cols } => {
                let cols = cols
                    .as_ref()
                    .expect("conv2d cache present when gradients are needed");
                if self.ng(*w) {
                    let gw = cols.matmul_t(g, true, false).expect("shape");
                    self.accumulate(grads, *w, gw);
                }
                if self.ng(*x) {
                    let wv = self.value(*w);
                    let mut dcols = Matrix::zeros(cols.rows(), cols.cols());
                    gemm_into(g, false, wv, true, &mut dcols, 0.0);
                    self.accumulate(grads, *x, col2im(&dcols, geom));
                }
            }
            Op::SegmentMean { x, seg_len } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                let inv = 1.0 / *seg_len as f64;
                for r in 0..xv.rows() {
                    let s = r / seg_len;
                    for (a, b) in dx.row_mut(r).iter_mut().zip(g.row(s)) {
                        *a = b * inv;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::WeightedCe {
                logp,
                targets,
                terms,
            } => {
                let gs = g.item();
                let lv = self.value(*logp);
                let mut dl = Matrix::zeros(lv.rows(), lv.cols());
                for t in terms {
                    let tr = targets.row(t.target_row);
                    for (a, b) in dl.row_mut(t.pred_row).iter_mut().zip(tr) {
                        *a -= gs * t.weight * b;
                    }
                }
                self.accumulate(grads, *logp, dl);
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                self.accumulate(grads, *x, Matrix::filled(r, c, g.item()));
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise softmax of a plain matrix.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Per-column mean and biased variance.
pub fn column_stats(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = x.shape();
    let n = rows.max(1) as f64;
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            let d = x.get(r, c) - mean[c];
            var[c] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

fn im2col(x: &Matrix, g: &ConvGeometry) -> Matrix {
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut cols = Matrix::zeros(g.batch * oh * ow, g.patch_len());
    let c = g.in_channels;
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (b * oh + oy) * ow + ox;
                let dst = cols.row_mut(row);
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = (b * g.height + iy as usize) * g.width + ix as usize;
                        let off = (ky * g.kernel + kx) * c;
                        dst[off..off + c].copy_from_slice(x.row(src));
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &Matrix, g: &ConvGeometry) -> Matrix {
    let (oh, ow) = (g.out_height(), g.out_width());
    let c = g.in_channels;
    let mut dx = Matrix::zeros(g.batch * g.height * g.width, c);
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = dcols.row((b * oh + oy) * ow + ox);
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = (b * g.height + iy as usize) * g.width + ix as usize;
                        let off = (ky * g.kernel + kx) * c;
                        for (a, v) in dx.row_mut(dst).iter_mut().zip(&row[off..off + c]) {
                            *a += v;
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::collection::vec;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions_and_shift_invariant(
            data in vec(-50.0f64..50.0, 12),
            shift in -100.0f64..100.0,
        ) {
            let x = Matrix::from_vec(3, 4, data).unwrap();
            let p = softmax_rows(&x);
            let shifted = softmax_rows(&Matrix::from_vec(3, 4, x.data().iter().map(|v| v + shift).collect()).unwrap());
            for r in 0..3 {
                prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(p.row(r).iter().all(|v| *v >= 0.0));
                for (a, b) in p.row(r).iter().zip(shifted.row(r)) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
