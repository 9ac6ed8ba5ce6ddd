//! Define-by-run tape with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and the backward pass walks it in reverse.

use rand::Rng;

use super::tensor::{gemm, MatRef, Real, Tensor};
use super::EngineError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    height: usize,
    width: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }
    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        // im2col buffer; empty for 1×1 kernels, which read the input directly
        cols: Vec<T>,
    },
    Relu(Var),
    Dropout(Var, Vec<T>),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    ExpandCols(Var),
    Square(Var),
    Reshape(Var),
    SliceRows(Var, usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Test hook that deliberately breaks one backward rule so that gradient
/// checks can be shown to fail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FaultInjection {
    #[default]
    None,
    ReluBackward,
}

/// Computation tape. One graph per loss evaluation; not shared across threads.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    fault: FaultInjection,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); len],
        }
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<(), EngineError> {
    if a.shape() != b.shape() {
        return Err(EngineError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = if cols == 0 { 0 } else { shape.iter().product::<usize>() / cols };
    (rows, cols)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), fault: FaultInjection::None }
    }

    pub fn with_fault(fault: FaultInjection) -> Self {
        Self { nodes: Vec::new(), fault }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, EngineError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(va, vb, name)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = &self.nodes[a.0].value;
        let data = v.data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(v.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// `a + c` for a scalar constant `c`.
    pub fn offset(&mut self, a: Var, c: T) -> Var {
        let v = &self.nodes[a.0].value;
        let data = v.data().iter().map(|&x| x + c).collect();
        let value = Tensor::new(v.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(value, Op::Offset(a), ng)
    }

    /// `[m,k] × [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(EngineError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            MatRef::row_major(self.nodes[a.0].value.data(), k),
            MatRef::row_major(self.nodes[b.0].value.data(), n),
            T::zero(),
            &mut out,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    /// `[.., c] + [c]` broadcast over leading dimensions.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var, EngineError> {
        let (_, cols) = rows_cols(self.shape(a));
        if self.shape(bias) != [cols] {
            return Err(EngineError::ShapeMismatch {
                op: "add_row_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bv = self.nodes[bias.0].value.data().to_vec();
        let v = &self.nodes[a.0].value;
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (x, &b) in row.iter_mut().zip(&bv) {
                *x += b;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(value, Op::AddRowBias(a, bias), ng))
    }

    /// Stride-1 convolution with "same" zero padding on NHWC input.
    ///
    /// `x: [B,H,W,Cin]`, `w: [Cout,Cin,k,k]` (k odd), `b: [Cout]` → `[B,H,W,Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, EngineError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let mismatch = |op| EngineError::ShapeMismatch { op, lhs: sx.clone(), rhs: sw.clone() };
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] || sw[2] % 2 == 0 || sx[3] != sw[1] {
            return Err(mismatch("conv2d"));
        }
        if self.shape(b) != [sw[0]] {
            return Err(mismatch("conv2d bias"));
        }
        let geom = ConvGeom {
            batch: sx[0],
            height: sx[1],
            width: sx[2],
            c_in: sx[3],
            c_out: sw[0],
            k: sw[2],
        };
        let input = self.nodes[x.0].value.data();
        let cols = if geom.k == 1 { Vec::new() } else { im2col(input, &geom) };
        let a = if geom.k == 1 { input } else { &cols[..] };
        let rows = geom.rows();
        let plen = geom.patch_len();
        let mut out = vec![T::zero(); rows * geom.c_out];
        gemm(
            rows,
            plen,
            geom.c_out,
            MatRef::row_major(a, plen),
            MatRef::transposed(self.nodes[w.0].value.data(), plen),
            T::zero(),
            &mut out,
        );
        let bias = self.nodes[b.0].value.data();
        for row in out.chunks_mut(geom.c_out) {
            for (o, &bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let value = Tensor::new(vec![geom.batch, geom.height, geom.width, geom.c_out], out);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let data = v.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let value = Tensor::new(v.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// Inverted dropout. With `rng = None` (inference) this is the identity and
    /// adds no node.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: Option<&mut R>) -> Var {
        let Some(rng) = rng else { return a };
        if rate <= 0.0 {
            return a;
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let v = &self.nodes[a.0].value;
        let mask: Vec<T> = (0..v.len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(v.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(value, Op::Dropout(a, mask), ng)
    }

    /// Softmax over the last axis. Entries equal to `-inf` receive zero mass.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let (_, cols) = rows_cols(v.shape());
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x = *x / sum;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(value, Op::Softmax(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().fold(T::zero(), |acc, &x| acc + x);
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.data().iter().fold(T::zero(), |acc, &x| acc + x);
        let m = s / T::from_f64(v.len() as f64);
        let ng = self.needs(a);
        self.push(Tensor::scalar(m), Op::Mean(a), ng)
    }

    /// `[r, c] -> [r, 1]` sum along the last axis.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let (rows, cols) = rows_cols(v.shape());
        let data = v
            .data()
            .chunks(cols.max(1))
            .map(|r| r.iter().fold(T::zero(), |acc, &x| acc + x))
            .collect();
        let ng = self.needs(a);
        self.push(Tensor::new(vec![rows, 1], data), Op::SumRows(a), ng)
    }

    /// `[r, 1] -> [r, n]` by repetition.
    pub fn expand_cols(&mut self, a: Var, n: usize) -> Result<Var, EngineError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[1] != 1 {
            return Err(EngineError::ShapeMismatch { op: "expand_cols", lhs: s, rhs: vec![n] });
        }
        let v = &self.nodes[a.0].value;
        let data = v.data().iter().flat_map(|&x| std::iter::repeat_n(x, n)).collect();
        let ng = self.needs(a);
        Ok(self.push(Tensor::new(vec![s[0], n], data), Op::ExpandCols(a), ng))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let data = v.data().iter().map(|&x| x * x).collect();
        let value = Tensor::new(v.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(value, Op::Square(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, EngineError> {
        let v = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != v.len() {
            return Err(EngineError::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape,
            });
        }
        let value = v.clone().reshaped(shape);
        let ng = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Rows `start..end` along the first axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, EngineError> {
        let v = &self.nodes[a.0].value;
        let s = v.shape().to_vec();
        if s.is_empty() || start > end || end > s[0] {
            return Err(EngineError::ShapeMismatch { op: "slice_rows", lhs: s, rhs: vec![start, end] });
        }
        let row = v.len() / s[0].max(1);
        let data = v.data()[start * row..end * row].to_vec();
        let mut shape = s;
        shape[0] = end - start;
        let ng = self.needs(a);
        Ok(self.push(Tensor::new(shape, data), Op::SliceRows(a, start), ng))
    }

    /// Sign pattern of every relu input on the tape, in tape order. Two
    /// evaluations with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(a) = n.op {
                out.extend(self.nodes[a.0].value.data().iter().map(|&x| x > T::zero()));
            }
        }
        out
    }

    /// Smallest `|x|` over all relu inputs, `inf` when there are none.
    pub fn min_relu_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for n in &self.nodes {
            if let Op::Relu(a) = n.op {
                for &x in self.nodes[a.0].value.data() {
                    m = m.min(x.as_f64().abs());
                }
            }
        }
        m
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, EngineError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(EngineError::NotScalar(self.nodes[loss.0].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backward_node(node, &gy, &mut grads);
            }
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(x, &d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for ((x, &d), &o) in g.iter_mut().zip(gy).zip(vb) {
                        *x += d * o;
                    }
                });
                acc(*b, &mut |g| {
                    for ((x, &d), &o) in g.iter_mut().zip(gy).zip(va) {
                        *x += d * o;
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for ((x, &d), &q) in g.iter_mut().zip(gy).zip(vb) {
                        *x += d / q;
                    }
                });
                acc(*b, &mut |g| {
                    for (((x, &d), &p), &q) in g.iter_mut().zip(gy).zip(va).zip(vb) {
                        *x -= d * p / (q * q);
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |g| g.iter_mut().zip(gy).for_each(|(x, &d)| *x += d * *c));
            }
            Op::Offset(a) | Op::Reshape(a) => acc(*a, &mut |g| add_into(g, gy)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                // dA = dY · Bᵀ, dB = Aᵀ · dY
                acc(*a, &mut |g| {
                    gemm(m, n, k, MatRef::row_major(gy, n), MatRef::transposed(vb, n), T::one(), g)
                });
                acc(*b, &mut |g| {
                    gemm(k, m, n, MatRef::transposed(va, k), MatRef::row_major(gy, n), T::one(), g)
                });
            }
            Op::AddRowBias(a, bias) => {
                acc(*a, &mut |g| add_into(g, gy));
                let cols = self.nodes[bias.0].value.len();
                acc(*bias, &mut |g| {
                    for row in gy.chunks(cols) {
                        add_into(g, row);
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let rows = geom.rows();
                let plen = geom.patch_len();
                let input = val(*x);
                let a = if geom.k == 1 { input } else { &cols[..] };
                acc(*w, &mut |g| {
                    gemm(
                        geom.c_out,
                        rows,
                        plen,
                        MatRef::transposed(gy, geom.c_out),
                        MatRef::row_major(a, plen),
                        T::one(),
                        g,
                    )
                });
                acc(*b, &mut |g| {
                    for row in gy.chunks(geom.c_out) {
                        add_into(g, row);
                    }
                });
                let wv = val(*w);
                acc(*x, &mut |g| {
                    if geom.k == 1 {
                        gemm(
                            rows,
                            geom.c_out,
                            plen,
                            MatRef::row_major(gy, geom.c_out),
                            MatRef::row_major(wv, plen),
                            T::one(),
                            g,
                        );
                    } else {
                        let mut dcols = vec![T::zero(); rows * plen];
                        gemm(
                            rows,
                            geom.c_out,
                            plen,
                            MatRef::row_major(gy, geom.c_out),
                            MatRef::row_major(wv, plen),
                            T::zero(),
                            &mut dcols,
                        );
                        col2im_add(&dcols, geom, g);
                    }
                });
            }
            Op::Relu(a) => {
                let out = node.value.data();
                let slope = match self.fault {
                    FaultInjection::ReluBackward => T::from_f64(1.01),
                    FaultInjection::None => T::one(),
                };
                // gradient at exactly zero is zero
                acc(*a, &mut |g| {
                    for ((x, &d), &o) in g.iter_mut().zip(gy).zip(out) {
                        if o > T::zero() {
                            *x += d * slope;
                        }
                    }
                });
            }
            Op::Dropout(a, mask) => {
                acc(*a, &mut |g| {
                    for ((x, &d), &m) in g.iter_mut().zip(gy).zip(mask) {
                        *x += d * m;
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let (_, cols) = rows_cols(node.value.shape());
                acc(*a, &mut |g| {
                    for ((gr, yr), dr) in g.chunks_mut(cols).zip(y.chunks(cols)).zip(gy.chunks(cols)) {
                        let dot = yr.iter().zip(dr).fold(T::zero(), |s, (&p, &d)| s + p * d);
                        for ((x, &p), &d) in gr.iter_mut().zip(yr).zip(dr) {
                            *x += p * (d - dot);
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |g| g.iter_mut().for_each(|x| *x += gy[0])),
            Op::Mean(a) => {
                let n = T::from_f64(self.nodes[a.0].value.len() as f64);
                acc(*a, &mut |g| g.iter_mut().for_each(|x| *x += gy[0] / n));
            }
            Op::SumRows(a) => {
                let (_, cols) = rows_cols(self.nodes[a.0].value.shape());
                acc(*a, &mut |g| {
                    for (row, &d) in g.chunks_mut(cols).zip(gy) {
                        row.iter_mut().for_each(|x| *x += d);
                    }
                });
            }
            Op::ExpandCols(a) => {
                let (_, n) = rows_cols(node.value.shape());
                acc(*a, &mut |g| {
                    for (x, row) in g.iter_mut().zip(gy.chunks(n)) {
                        *x += row.iter().fold(T::zero(), |s, &d| s + d);
                    }
                });
            }
            Op::Square(a) => {
                let va = val(*a);
                let two = T::from_f64(2.0);
                acc(*a, &mut |g| {
                    for ((x, &d), &v) in g.iter_mut().zip(gy).zip(va) {
                        *x += two * v * d;
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let row = node.value.len() / node.value.shape()[0].max(1);
                let off = start * row;
                acc(*a, &mut |g| add_into(&mut g[off..off + gy.len()], gy));
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn im2col<T: Real>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let (h, w, c, k) = (g.height as isize, g.width as isize, g.c_in, g.k);
    let pad = (k / 2) as isize;
    let plen = g.patch_len();
    let mut cols = vec![T::zero(); g.rows() * plen];
    let mut row = 0;
    for b in 0..g.batch {
        let img = &input[b * g.height * g.width * c..(b + 1) * g.height * g.width * c];
        for y in 0..h {
            for x in 0..w {
                let dst = &mut cols[row * plen..(row + 1) * plen];
                for ky in 0..k {
                    let sy = y + ky as isize - pad;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = x + kx as isize - pad;
                        if sx < 0 || sx >= w {
                            continue;
                        }
                        let src = ((sy * w + sx) as usize) * c;
                        for ci in 0..c {
                            dst[(ci * k + ky) * k + kx] = img[src + ci];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(dcols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (h, w, c, k) = (g.height as isize, g.width as isize, g.c_in, g.k);
    let pad = (k / 2) as isize;
    let plen = g.patch_len();
    let mut row = 0;
    for b in 0..g.batch {
        let base = b * g.height * g.width * c;
        for y in 0..h {
            for x in 0..w {
                let src = &dcols[row * plen..(row + 1) * plen];
                for ky in 0..k {
                    let sy = y + ky as isize - pad;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = x + kx as isize - pad;
                        if sx < 0 || sx >= w {
                            continue;
                        }
                        let dst = base + ((sy * w + sx) as usize) * c;
                        for ci in 0..c {
                            dx[dst + ci] += src[(ci * k + ky) * k + kx];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
