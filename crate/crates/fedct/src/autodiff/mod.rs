//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records forward operations; [`Tape::backward`] walks the
//! recording in reverse and accumulates gradients for every leaf. The
//! operator set is exactly what the reconstruction network needs: 3x3
//! stride-1 convolutions, linear layers, relu, pooling, softmax attention
//! pieces, elementwise arithmetic with size-1-axis broadcasting, and
//! channel-wise affine modulation.

mod fdcheck;

pub use fdcheck::{
    check_gradients, check_gradients_subset, finite_diff_gradients, finite_diff_gradients_subset,
    relative_error, FdEntry, FdReport,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFiniteValue { op: &'static str },
    #[error("backward requires a scalar loss node")]
    NonScalarLoss,
    #[error("non-finite gradient while backpropagating through {op}")]
    NonFiniteGradient { op: &'static str },
}

pub type AdResult<T> = Result<T, AdError>;

/// Dense row-major tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a tensor with exactly one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Identifier of a node within one tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Softmax(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    AvgPool1d {
        x: NodeId,
        factor: usize,
    },
    ChannelAffine {
        x: NodeId,
        alpha: NodeId,
        beta: NodeId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A recording of forward operations, topologically ordered by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to tape nodes.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id`; leaves untouched by the loss get zeros.
    pub fn get(&self, id: NodeId) -> &Tensor {
        self.grads[id.0]
            .as_ref()
            .expect("gradient queried for a non-leaf node that was not materialized")
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for ax in (0..shape.len()).rev() {
        strides[ax] = acc;
        acc *= shape[ax];
    }
    strides
}

/// Strides for reading `shape` as if broadcast to `out_shape`
/// (stride 0 on size-1 axes).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let base = row_major_strides(shape);
    shape
        .iter()
        .zip(out_shape)
        .zip(base)
        .map(|((&d, &od), s)| if d == od { s } else { debug_assert_eq!(d, 1); 0 })
        .collect()
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> AdResult<Vec<usize>> {
    if a.len() != b.len() {
        return Err(AdError::ShapeMismatch {
            op,
            detail: format!("rank mismatch {a:?} vs {b:?}"),
        });
    }
    a.iter()
        .zip(b)
        .map(|(&da, &db)| {
            if da == db || da == 1 || db == 1 {
                Ok(da.max(db))
            } else {
                Err(AdError::ShapeMismatch {
                    op,
                    detail: format!("incompatible shapes {a:?} vs {b:?}"),
                })
            }
        })
        .collect()
}

/// Visit every output element of a broadcast binary op, yielding the linear
/// offsets into the output and both inputs.
fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    if rank == 0 {
        if total > 0 {
            f(0, 0, 0);
        }
        return;
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for lin in 0..total {
        f(lin, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: &'static str, value: Tensor, record: Op) -> AdResult<NodeId> {
        if !value.is_finite() {
            return Err(AdError::NonFiniteValue { op });
        }
        self.nodes.push(Node { value, op: record });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary_elementwise(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        record: Op,
    ) -> AdResult<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(op, va.shape(), vb.shape())?;
        let mut out = vec![0.0; out_shape.iter().product()];
        if va.shape() == vb.shape() {
            for (o, (x, y)) in out.iter_mut().zip(va.data().iter().zip(vb.data())) {
                *o = f(*x, *y);
            }
        } else {
            let (da, db) = (va.data(), vb.data());
            for_each_broadcast(&out_shape, va.shape(), vb.shape(), |lin, oa, ob| {
                out[lin] = f(da[oa], db[ob]);
            });
        }
        self.push(op, Tensor::new(out_shape, out), record)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> AdResult<NodeId> {
        let va = &self.nodes[a.0].value;
        let out = Tensor::new(va.shape.clone(), va.data.iter().map(|v| v * k).collect());
        self.push("scale", out, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: NodeId) -> AdResult<NodeId> {
        let va = &self.nodes[a.0].value;
        let out = Tensor::new(
            va.shape.clone(),
            va.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        );
        self.push("relu", out, Op::Relu(a))
    }

    /// Softmax over the last axis; rows of a 2-D tensor are independent.
    pub fn softmax(&mut self, a: NodeId) -> AdResult<NodeId> {
        let va = &self.nodes[a.0].value;
        let cols = *va.shape.last().ok_or(AdError::ShapeMismatch {
            op: "softmax",
            detail: "rank-0 input".into(),
        })?;
        let mut out = va.data.clone();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push("softmax", Tensor::new(va.shape.clone(), out), Op::Softmax(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let ([n, k], [k2, m]) = (va.shape(), vb.shape()) else {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                detail: format!("need 2-D operands, got {:?} x {:?}", va.shape(), vb.shape()),
            });
        };
        if k != k2 {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims {k} vs {k2}"),
            });
        }
        let out = matmul_raw(va.data(), vb.data(), *n, *k, *m);
        self.push("matmul", Tensor::new(vec![*n, *m], out), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> AdResult<NodeId> {
        let va = &self.nodes[a.0].value;
        let [n, m] = va.shape() else {
            return Err(AdError::ShapeMismatch {
                op: "transpose",
                detail: format!("need 2-D operand, got {:?}", va.shape()),
            });
        };
        let out = transpose_raw(va.data(), *n, *m);
        self.push("transpose", Tensor::new(vec![*m, *n], out), Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> AdResult<NodeId> {
        let va = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != va.len() {
            return Err(AdError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", va.shape(), shape),
            });
        }
        let out = Tensor::new(shape, va.data.clone());
        self.push("reshape", out, Op::Reshape(a))
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean_all(&mut self, a: NodeId) -> AdResult<NodeId> {
        let va = &self.nodes[a.0].value;
        let mean = va.data.iter().sum::<f64>() / va.len() as f64;
        self.push("mean", Tensor::scalar(mean), Op::MeanAll(a))
    }

    /// Sum over all elements, producing a scalar.
    pub fn sum_all(&mut self, a: NodeId) -> AdResult<NodeId> {
        let va = &self.nodes[a.0].value;
        let sum = va.data.iter().sum::<f64>();
        self.push("sum", Tensor::scalar(sum), Op::SumAll(a))
    }

    /// Fully connected layer: x (1 x n) * w (n x m) + b (m) -> (1 x m).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> AdResult<NodeId> {
        let (vx, vw, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let ([one, n], [n2, m], [m2]) = (vx.shape(), vw.shape(), vb.shape()) else {
            return Err(AdError::ShapeMismatch {
                op: "linear",
                detail: format!(
                    "want (1,n),(n,m),(m), got {:?},{:?},{:?}",
                    vx.shape(),
                    vw.shape(),
                    vb.shape()
                ),
            });
        };
        if *one != 1 || n != n2 || m != m2 {
            return Err(AdError::ShapeMismatch {
                op: "linear",
                detail: format!(
                    "want (1,n),(n,m),(m), got {:?},{:?},{:?}",
                    vx.shape(),
                    vw.shape(),
                    vb.shape()
                ),
            });
        }
        let mut out = vb.data.clone();
        for i in 0..*n {
            let xi = vx.data[i];
            if xi == 0.0 {
                continue;
            }
            let wrow = &vw.data[i * m..(i + 1) * m];
            for j in 0..*m {
                out[j] += xi * wrow[j];
            }
        }
        self.push("linear", Tensor::new(vec![1, *m], out), Op::Linear { x, w, b })
    }

    /// 3x3 convolution with stride 1 and zero padding 1:
    /// x (C_in x H x W) * w (C_out x C_in x 3 x 3) + b (C_out) -> (C_out x H x W).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> AdResult<NodeId> {
        let (vx, vw, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let ([c_in, h, wd], [c_out, c_in2, kh, kw], [c_out2]) =
            (vx.shape(), vw.shape(), vb.shape())
        else {
            return Err(AdError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "want (Ci,H,W),(Co,Ci,3,3),(Co), got {:?},{:?},{:?}",
                    vx.shape(),
                    vw.shape(),
                    vb.shape()
                ),
            });
        };
        if c_in != c_in2 || c_out != c_out2 || *kh != 3 || *kw != 3 {
            return Err(AdError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "want (Ci,H,W),(Co,Ci,3,3),(Co), got {:?},{:?},{:?}",
                    vx.shape(),
                    vw.shape(),
                    vb.shape()
                ),
            });
        }
        let (c_in, h, wd, c_out) = (*c_in, *h, *wd, *c_out);
        let mut out = vec![0.0; c_out * h * wd];
        for o in 0..c_out {
            let plane = &mut out[o * h * wd..(o + 1) * h * wd];
            plane.fill(vb.data[o]);
            for c in 0..c_in {
                let xplane = &vx.data[c * h * wd..(c + 1) * h * wd];
                let kbase = (o * c_in + c) * 9;
                for ki in 0..3usize {
                    for kj in 0..3usize {
                        let weight = vw.data[kbase + ki * 3 + kj];
                        if weight == 0.0 {
                            continue;
                        }
                        accumulate_shifted(plane, xplane, h, wd, ki, kj, weight);
                    }
                }
            }
        }
        self.push(
            "conv2d",
            Tensor::new(vec![c_out, h, wd], out),
            Op::Conv2d { x, w, b },
        )
    }

    /// Average pooling over the last axis of a (1 x d) vector.
    pub fn avgpool1d(&mut self, x: NodeId, factor: usize) -> AdResult<NodeId> {
        let vx = &self.nodes[x.0].value;
        let ([one, d], true) = (vx.shape(), factor >= 1) else {
            return Err(AdError::ShapeMismatch {
                op: "avgpool1d",
                detail: format!("want (1,d), got {:?}", vx.shape()),
            });
        };
        if *one != 1 || d % factor != 0 {
            return Err(AdError::ShapeMismatch {
                op: "avgpool1d",
                detail: format!("d={d} not divisible by factor {factor}"),
            });
        }
        let out: Vec<f64> = vx
            .data
            .chunks(factor)
            .map(|c| c.iter().sum::<f64>() / factor as f64)
            .collect();
        let dd = d / factor;
        self.push(
            "avgpool1d",
            Tensor::new(vec![1, dd], out),
            Op::AvgPool1d { x, factor },
        )
    }

    /// Per-channel affine: y[c,i,j] = alpha[c] * x[c,i,j] + beta[c].
    pub fn channel_affine(&mut self, x: NodeId, alpha: NodeId, beta: NodeId) -> AdResult<NodeId> {
        let (vx, va, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[alpha.0].value,
            &self.nodes[beta.0].value,
        );
        let [c, h, w] = vx.shape() else {
            return Err(AdError::ShapeMismatch {
                op: "channel_affine",
                detail: format!("want (C,H,W), got {:?}", vx.shape()),
            });
        };
        if va.shape() != [*c] || vb.shape() != [*c] {
            return Err(AdError::ShapeMismatch {
                op: "channel_affine",
                detail: format!(
                    "alpha {:?} / beta {:?} vs C={}",
                    va.shape(),
                    vb.shape(),
                    c
                ),
            });
        }
        let plane = h * w;
        let mut out = vec![0.0; vx.len()];
        for ch in 0..*c {
            let (a, b) = (va.data[ch], vb.data[ch]);
            let src = &vx.data[ch * plane..(ch + 1) * plane];
            let dst = &mut out[ch * plane..(ch + 1) * plane];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = a * v + b;
            }
        }
        self.push(
            "channel_affine",
            Tensor::new(vx.shape.clone(), out),
            Op::ChannelAffine { x, alpha, beta },
        )
    }

    /// Gradients of a scalar loss with respect to every leaf node.
    /// Leaves that do not influence the loss get zero gradients.
    pub fn backward(&self, loss: NodeId) -> AdResult<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AdError::NonScalarLoss);
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(
            self.nodes[loss.0].value.shape.clone(),
            vec![1.0],
        ));

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let op_name = self.op_name(i);
            if !gy.is_finite() {
                return Err(AdError::NonFiniteGradient { op: op_name });
            }
            self.accumulate_adjoints(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }

        // Materialize zeros for untouched leaves.
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape.clone()));
            }
        }
        Ok(Gradients { grads })
    }

    fn op_name(&self, i: usize) -> &'static str {
        match self.nodes[i].op {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::MeanAll(..) => "mean",
            Op::SumAll(..) => "sum",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool1d { .. } => "avgpool1d",
            Op::ChannelAffine { .. } => "channel_affine",
        }
    }

    fn accumulate_adjoints(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_reduced(*a, gy, 1.0, grads);
                self.add_reduced(*b, gy, 1.0, grads);
            }
            Op::Sub(a, b) => {
                self.add_reduced(*a, gy, 1.0, grads);
                self.add_reduced(*b, gy, -1.0, grads);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let ga = self.grad_buf(*a, grads);
                if va.shape() == vb.shape() {
                    for ((g, gyv), bv) in ga.data.iter_mut().zip(gy.data()).zip(vb.data()) {
                        *g += gyv * bv;
                    }
                } else {
                    for_each_broadcast(gy.shape(), va.shape(), vb.shape(), |lin, oa, ob| {
                        ga.data[oa] += gy.data[lin] * vb.data[ob];
                    });
                }
                let gb = self.grad_buf(*b, grads);
                if va.shape() == vb.shape() {
                    for ((g, gyv), av) in gb.data.iter_mut().zip(gy.data()).zip(va.data()) {
                        *g += gyv * av;
                    }
                } else {
                    for_each_broadcast(gy.shape(), va.shape(), vb.shape(), |lin, oa, ob| {
                        gb.data[ob] += gy.data[lin] * va.data[oa];
                    });
                }
            }
            Op::Scale(a, k) => {
                let k = *k;
                let ga = self.grad_buf(*a, grads);
                for (g, gyv) in ga.data.iter_mut().zip(gy.data()) {
                    *g += k * gyv;
                }
            }
            Op::Relu(a) => {
                let va = self.nodes[a.0].value.data().to_vec();
                let ga = self.grad_buf(*a, grads);
                for ((g, gyv), xv) in ga.data.iter_mut().zip(gy.data()).zip(va) {
                    if xv > 0.0 {
                        *g += gyv;
                    }
                }
            }
            Op::Softmax(a) => {
                let y = &self.nodes[i].value;
                let cols = *y.shape().last().unwrap();
                let ga = self.grad_buf(*a, grads);
                for (row, (yrow, gyrow)) in y.data().chunks(cols).zip(gy.data().chunks(cols)).enumerate()
                {
                    let dot: f64 = yrow.iter().zip(gyrow).map(|(y, g)| y * g).sum();
                    let garow = &mut ga.data[row * cols..(row + 1) * cols];
                    for ((g, &yv), &gv) in garow.iter_mut().zip(yrow).zip(gyrow) {
                        *g += yv * (gv - dot);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let bt = transpose_raw(vb.data(), k, m);
                let da = matmul_raw(gy.data(), &bt, n, m, k);
                let at = transpose_raw(va.data(), n, k);
                let db = matmul_raw(&at, gy.data(), k, n, m);
                let ga = self.grad_buf(*a, grads);
                for (g, v) in ga.data.iter_mut().zip(da) {
                    *g += v;
                }
                let gb = self.grad_buf(*b, grads);
                for (g, v) in gb.data.iter_mut().zip(db) {
                    *g += v;
                }
            }
            Op::Transpose(a) => {
                let [m, n] = self.nodes[i].value.shape() else { unreachable!() };
                let gt = transpose_raw(gy.data(), *m, *n);
                let ga = self.grad_buf(*a, grads);
                for (g, v) in ga.data.iter_mut().zip(gt) {
                    *g += v;
                }
            }
            Op::Reshape(a) => {
                let ga = self.grad_buf(*a, grads);
                for (g, v) in ga.data.iter_mut().zip(gy.data()) {
                    *g += v;
                }
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let g0 = gy.data[0] / n;
                let ga = self.grad_buf(*a, grads);
                for g in ga.data.iter_mut() {
                    *g += g0;
                }
            }
            Op::SumAll(a) => {
                let g0 = gy.data[0];
                let ga = self.grad_buf(*a, grads);
                for g in ga.data.iter_mut() {
                    *g += g0;
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (n, m) = (vw.shape()[0], vw.shape()[1]);
                let gx = self.grad_buf(*x, grads);
                for i2 in 0..n {
                    let wrow = &vw.data[i2 * m..(i2 + 1) * m];
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += gy.data[j] * wrow[j];
                    }
                    gx.data[i2] += acc;
                }
                let gw = self.grad_buf(*w, grads);
                for i2 in 0..n {
                    let xi = vx.data[i2];
                    if xi == 0.0 {
                        continue;
                    }
                    let grow = &mut gw.data[i2 * m..(i2 + 1) * m];
                    for j in 0..m {
                        grow[j] += xi * gy.data[j];
                    }
                }
                let gb = self.grad_buf(*b, grads);
                for j in 0..m {
                    gb.data[j] += gy.data[j];
                }
            }
            Op::Conv2d { x, w, b } => {
                let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let [c_in, h, wd] = vx.shape() else { unreachable!() };
                let c_out = vw.shape()[0];
                let (c_in, h, wd) = (*c_in, *h, *wd);
                let plane = h * wd;
                // Input gradient: correlate the output gradient with the
                // spatially flipped kernel.
                {
                    let gx = self.grad_buf(*x, grads);
                    for o in 0..c_out {
                        let gyp = &gy.data[o * plane..(o + 1) * plane];
                        for c in 0..c_in {
                            let kbase = (o * c_in + c) * 9;
                            let gxp = &mut gx.data[c * plane..(c + 1) * plane];
                            for ki in 0..3usize {
                                for kj in 0..3usize {
                                    let weight = vw.data[kbase + ki * 3 + kj];
                                    if weight == 0.0 {
                                        continue;
                                    }
                                    // y[o,i,j] consumed x[c,i+ki-1,j+kj-1], so
                                    // x at (ki,kj)-shift receives gy with the
                                    // opposite shift.
                                    accumulate_shifted(gxp, gyp, h, wd, 2 - ki, 2 - kj, weight);
                                }
                            }
                        }
                    }
                }
                // Kernel gradient.
                {
                    let gw = self.grad_buf(*w, grads);
                    for o in 0..c_out {
                        let gyp = &gy.data[o * plane..(o + 1) * plane];
                        for c in 0..c_in {
                            let xp = &vx.data[c * plane..(c + 1) * plane];
                            let kbase = (o * c_in + c) * 9;
                            for ki in 0..3usize {
                                for kj in 0..3usize {
                                    gw.data[kbase + ki * 3 + kj] +=
                                        shifted_dot(gyp, xp, h, wd, ki, kj);
                                }
                            }
                        }
                    }
                }
                let gb = self.grad_buf(*b, grads);
                for o in 0..c_out {
                    gb.data[o] += gy.data[o * plane..(o + 1) * plane].iter().sum::<f64>();
                }
            }
            Op::AvgPool1d { x, factor } => {
                let factor = *factor;
                let inv = 1.0 / factor as f64;
                let ga = self.grad_buf(*x, grads);
                for (k, gyv) in gy.data().iter().enumerate() {
                    for r in 0..factor {
                        ga.data[k * factor + r] += gyv * inv;
                    }
                }
            }
            Op::ChannelAffine { x, alpha, beta } => {
                let (vx, va) = (&self.nodes[x.0].value, &self.nodes[alpha.0].value);
                let [c, h, w] = vx.shape() else { unreachable!() };
                let plane = h * w;
                let gx = self.grad_buf(*x, grads);
                for ch in 0..*c {
                    let a = va.data[ch];
                    let gyp = &gy.data[ch * plane..(ch + 1) * plane];
                    let gxp = &mut gx.data[ch * plane..(ch + 1) * plane];
                    for (g, gyv) in gxp.iter_mut().zip(gyp) {
                        *g += a * gyv;
                    }
                }
                let galpha = self.grad_buf(*alpha, grads);
                for ch in 0..*c {
                    let gyp = &gy.data[ch * plane..(ch + 1) * plane];
                    let xp = &vx.data[ch * plane..(ch + 1) * plane];
                    galpha.data[ch] += gyp.iter().zip(xp).map(|(g, x)| g * x).sum::<f64>();
                }
                let gbeta = self.grad_buf(*beta, grads);
                for ch in 0..*c {
                    gbeta.data[ch] += gy.data[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
                }
            }
        }
    }

    fn grad_buf<'g>(&self, id: NodeId, grads: &'g mut [Option<Tensor>]) -> &'g mut Tensor {
        grads[id.0].get_or_insert_with(|| Tensor::zeros(self.nodes[id.0].value.shape.clone()))
    }

    /// Accumulate into `a` grad contributions scaled by `sign`, reducing over
    /// broadcast axes when `a` was broadcast to the output shape.
    fn add_reduced(&self, a: NodeId, gy: &Tensor, sign: f64, grads: &mut [Option<Tensor>]) {
        let a_shape = self.nodes[a.0].value.shape.clone();
        let ga = self.grad_buf(a, grads);
        if a_shape == gy.shape {
            for (g, v) in ga.data.iter_mut().zip(gy.data()) {
                *g += sign * v;
            }
        } else {
            for_each_broadcast(gy.shape(), &a_shape, &a_shape, |lin, oa, _| {
                ga.data[oa] += sign * gy.data[lin];
            });
        }
    }
}

/// dst[i][j] += weight * src[i + ki - 1][j + kj - 1] over the in-bounds range.
fn accumulate_shifted(
    dst: &mut [f64],
    src: &[f64],
    h: usize,
    w: usize,
    ki: usize,
    kj: usize,
    weight: f64,
) {
    let di = ki as isize - 1;
    let dj = kj as isize - 1;
    let i_lo = (-di).max(0) as usize;
    let i_hi = (h as isize - di).min(h as isize) as usize;
    let j_lo = (-dj).max(0) as usize;
    let j_hi = (w as isize - dj).min(w as isize) as usize;
    for i in i_lo..i_hi {
        let si = (i as isize + di) as usize;
        let drow = &mut dst[i * w + j_lo..i * w + j_hi];
        let srow = &src[si * w + (j_lo as isize + dj) as usize..];
        for (d, s) in drow.iter_mut().zip(srow) {
            *d += weight * s;
        }
    }
}

/// Sum of a[i][j] * b[i + ki - 1][j + kj - 1] over the in-bounds range.
fn shifted_dot(a: &[f64], b: &[f64], h: usize, w: usize, ki: usize, kj: usize) -> f64 {
    let di = ki as isize - 1;
    let dj = kj as isize - 1;
    let i_lo = (-di).max(0) as usize;
    let i_hi = (h as isize - di).min(h as isize) as usize;
    let j_lo = (-dj).max(0) as usize;
    let j_hi = (w as isize - dj).min(w as isize) as usize;
    let mut acc = 0.0;
    for i in i_lo..i_hi {
        let arow = &a[i * w + j_lo..i * w + j_hi];
        let brow = &b[(i as isize + di) as usize * w + (j_lo as isize + dj) as usize..];
        for (x, y) in arow.iter().zip(brow) {
            acc += x * y;
        }
    }
    acc
}
