use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gemm, shape_err, Gradients, ParamId, ParamStore, Tensor, TensorError};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.9;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by a train-mode batch-norm node, to be folded
/// into the running averages once the step is complete.
#[derive(Debug, Clone, PartialEq)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

impl StatUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        let m = BATCHNORM_MOMENTUM;
        for (r, b) in store
            .value_mut(self.running_mean)
            .data_mut()
            .iter_mut()
            .zip(&self.batch_mean)
        {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in store
            .value_mut(self.running_var)
            .data_mut()
            .iter_mut()
            .zip(&self.batch_var)
        {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pad_y: usize,
    pad_x: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Calls `f(row, col_offset, input_offset)` for every in-bounds kernel tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let g = *self;
        for b in 0..g.n {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let row = (b * g.oh + oy) * g.ow + ox;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad_y as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad_x as isize;
                            if ix < 0 || ix as usize >= g.w {
                                continue;
                            }
                            let col = (ky * g.kw + kx) * g.cin;
                            let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                            f(row, col, src);
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    MatMul(Var, Var),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        cols: Vec<f64>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Row(Var, usize),
    Slice(Var, usize),
    Reshape(Var),
    ColumnsToSeq {
        x: Var,
        h: usize,
        w: usize,
        c: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SeqCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Sum(Var),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass over a shared [`ParamStore`].
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha8Rng,
    stat_updates: Vec<StatUpdate>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self::with_seed(store, mode, 0)
    }

    /// The seed drives dropout masks.
    pub fn with_seed(store: &'a ParamStore, mode: Mode, seed: u64) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Direct inputs of a node, for structural inspection of the record.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Affine(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::Row(a, _)
            | Op::Slice(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::SumSquares(a) => vec![*a],
            Op::Dense { x, w, b } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            Op::Conv2d { x, k, b, .. } => [Some(*x), Some(*k), *b].into_iter().flatten().collect(),
            Op::MaxPool { x, .. } | Op::ColumnsToSeq { x, .. } | Op::Dropout { x, .. } => vec![*x],
            Op::Concat(vs) | Op::Stack(vs) => vs.clone(),
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::SeqCrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// True when `target` is reachable from `from` through recorded edges.
    pub fn depends_on(&self, target: Var, from: Var) -> bool {
        if target.0 < from.0 {
            return false;
        }
        let mut seen = vec![false; target.0 + 1];
        let mut stack = vec![target];
        while let Some(v) = stack.pop() {
            if v == from {
                return true;
            }
            if seen[v.0] {
                continue;
            }
            seen[v.0] = true;
            for i in self.inputs(v) {
                if i.0 >= from.0 {
                    stack.push(i);
                }
            }
        }
        false
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ----- leaves -----

    /// Constant input; gradients are not propagated into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let trainable = self.store.get(id).trainable;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    // ----- elementwise -----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let tb = self.value(b);
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Adds vector `b` to every row of `a` (last axis must match).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (_, cols) = self.value(a).rows_cols();
        if self.shape(b) != [cols] {
            return Err(shape_err(
                "add_row",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let ta = self.value(a);
        let tb = self.value(b).data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb[i % cols])
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::AddRow(a, b), ng))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| scale * v + shift).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| f(*v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(t, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Softmax over the last axis, max-shifted for stability.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (rows, cols) = tx.rows_cols();
        let mut data = tx.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut data[r * cols..(r + 1) * cols]);
        }
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Softmax(x), ng)
    }

    // ----- linear algebra -----

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// Affine map over the last axis: `x [.., n] · w [n, m] + b [m]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let n = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[0] != n || sx.is_empty() {
            return Err(shape_err("dense", format!("x {sx:?}, weight {sw:?}")));
        }
        let m = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(shape_err(
                    "dense",
                    format!("bias {:?}, expected [{m}]", self.shape(b)),
                ));
            }
        }
        let rows = self.value(x).len() / n.max(1);
        let mut out = vec![0.0; rows * m];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in 0..rows {
                out[r * m..(r + 1) * m].copy_from_slice(bd);
            }
        }
        gemm(
            rows,
            n,
            m,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            1.0,
            &mut out,
        );
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = m;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Dense { x, w, b }, ng))
    }

    /// Cross-correlation with zero "same" padding.
    ///
    /// `x` is `[h, w, c_in]` or `[n, h, w, c_in]`, the kernel `[k_h, k_w, c_in, c_out]`
    /// with odd spatial sizes. Output spatial size is `ceil(h / stride) × ceil(w / stride)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
    ) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(k).to_vec();
        let batched = sx.len() == 4;
        let (n, h, w, cin) = match sx.len() {
            3 => (1, sx[0], sx[1], sx[2]),
            4 => (sx[0], sx[1], sx[2], sx[3]),
            _ => return Err(shape_err("conv2d", format!("input rank {}", sx.len()))),
        };
        if sk.len() != 4
            || sk[2] != cin
            || sk[0].is_multiple_of(2)
            || sk[1].is_multiple_of(2)
            || stride == 0
        {
            return Err(shape_err(
                "conv2d",
                format!("input {sx:?}, kernel {sk:?}, stride {stride}"),
            ));
        }
        let cout = sk[3];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            n,
            h,
            w,
            cin,
            kh: sk[0],
            kw: sk[1],
            cout,
            stride,
            oh: h.div_ceil(stride),
            ow: w.div_ceil(stride),
            pad_y: sk[0] / 2,
            pad_x: sk[1] / 2,
        };
        let plen = geom.patch_len();
        let mut cols = vec![0.0; geom.rows() * plen];
        {
            let xd = self.value(x).data();
            geom.for_each_tap(|row, col, src| {
                cols[row * plen + col..row * plen + col + cin].copy_from_slice(&xd[src..src + cin]);
            });
        }
        let mut out = vec![0.0; geom.rows() * cout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in 0..geom.rows() {
                out[r * cout..(r + 1) * cout].copy_from_slice(bd);
            }
        }
        gemm(
            geom.rows(),
            plen,
            cout,
            &cols,
            false,
            self.value(k).data(),
            false,
            1.0,
            &mut out,
        );
        let shape = if batched {
            vec![n, geom.oh, geom.ow, cout]
        } else {
            vec![geom.oh, geom.ow, cout]
        };
        let ng = self.ng(x) || self.ng(k) || b.is_some_and(|b| self.ng(b));
        let cols = if ng { cols } else { Vec::new() };
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                x,
                k,
                b,
                cols,
                geom,
            },
            ng,
        ))
    }

    /// 2×2 max pooling with stride 2; odd edges use the partial window.
    /// Ties go to the first element in row-major scan order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let (n, h, w, c) = match sx.len() {
            3 => (1, sx[0], sx[1], sx[2]),
            4 => (sx[0], sx[1], sx[2], sx[3]),
            _ => return Err(shape_err("maxpool2", format!("input rank {}", sx.len()))),
        };
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best_i = usize::MAX;
                        let mut best = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            let iy = oy * 2 + dy;
                            if iy >= h {
                                continue;
                            }
                            for dx in 0..2 {
                                let ix = ox * 2 + dx;
                                if ix >= w {
                                    continue;
                                }
                                let i = ((b * h + iy) * w + ix) * c + ch;
                                if best_i == usize::MAX || xd[i] > best {
                                    best = xd[i];
                                    best_i = i;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_i);
                    }
                }
            }
        }
        let shape = if sx.len() == 4 {
            vec![n, oh, ow, c]
        } else {
            vec![oh, ow, c]
        };
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool { x, argmax }, ng))
    }

    // ----- structure -----

    /// Concatenates rank-1 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(shape_err(
                    "concat",
                    format!("part shape {:?}", self.shape(p)),
                ));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), ng))
    }

    /// Stacks equally sized rank-1 tensors into the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var, TensorError> {
        let first = rows.first().ok_or_else(|| shape_err("stack", "no rows"))?;
        let d = self.shape(*first).to_vec();
        if d.len() != 1 {
            return Err(shape_err("stack", format!("row shape {d:?}")));
        }
        let mut data = Vec::with_capacity(rows.len() * d[0]);
        for &r in rows {
            if self.shape(r) != d.as_slice() {
                return Err(shape_err("stack", format!("{:?} vs {d:?}", self.shape(r))));
            }
            data.extend_from_slice(self.value(r).data());
        }
        let ng = rows.iter().any(|&r| self.ng(r));
        Ok(self.push(
            Tensor::new(vec![rows.len(), d[0]], data)?,
            Op::Stack(rows.to_vec()),
            ng,
        ))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("row", format!("shape {s:?}")));
        }
        if i >= s[0] {
            return Err(TensorError::Index {
                op: "row",
                index: i,
                size: s[0],
            });
        }
        let d = self.value(x).data()[i * s[1]..(i + 1) * s[1]].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::vector(d), Op::Row(x, i), ng))
    }

    /// Elements `[start, end)` of a vector.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 || start > end || end > s[0] {
            return Err(shape_err("slice", format!("{start}..{end} of {s:?}")));
        }
        let d = self.value(x).data()[start..end].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::vector(d), Op::Slice(x, start), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// `[n, ...] -> [n, prod(...)]`.
    pub fn flatten_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        let n = *s.first().ok_or_else(|| shape_err("flatten", "scalar"))?;
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Turns feature maps `[h, w, c]` (or `[1, h, w, c]`) into `w` column
    /// vectors of length `h·c`, left to right; entry `y·c + ch` of vector `x`
    /// is map value `(y, x, ch)`.
    pub fn columns_to_sequence(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        let (h, w, c) = match s.as_slice() {
            [h, w, c] => (*h, *w, *c),
            [1, h, w, c] => (*h, *w, *c),
            _ => return Err(shape_err("columns_to_sequence", format!("shape {s:?}"))),
        };
        let xd = self.value(x).data();
        let mut out = vec![0.0; h * w * c];
        for col in 0..w {
            for y in 0..h {
                let src = (y * w + col) * c;
                let dst = col * h * c + y * c;
                out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![w, h * c], out)?,
            Op::ColumnsToSeq { x, h, w, c },
            ng,
        ))
    }

    // ----- regularization -----

    /// Batch normalization over every axis but the last.
    ///
    /// Train mode uses batch statistics and records a [`StatUpdate`]; eval mode
    /// reads the running averages.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Var, TensorError> {
        let (rows, c) = self.value(x).rows_cols();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "batchnorm",
                format!("channels {c}, gamma {:?}", self.shape(gamma)),
            ));
        }
        let train = self.mode == Mode::Train;
        let xd = self.value(x).data();
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for r in 0..rows {
                for ch in 0..c {
                    mean[ch] += xd[r * c + ch];
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            for r in 0..rows {
                for ch in 0..c {
                    let d = xd[r * c + ch] - mean[ch];
                    var[ch] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= rows as f64);
            (mean, var)
        } else {
            (
                self.store.value(running_mean).data().to_vec(),
                self.store.value(running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt())
            .collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; rows * c];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            for ch in 0..c {
                let i = r * c + ch;
                xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                out[i] = gd[ch] * xhat[i] + bd[ch];
            }
        }
        let shape = self.shape(x).to_vec();
        if train {
            self.stat_updates.push(StatUpdate {
                running_mean,
                running_var,
                batch_mean: mean,
                batch_var: var,
            });
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            ng,
        ))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)` in train mode;
    /// eval mode and `rate == 0` return `x` unchanged.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Dropout { x, mask }, ng))
    }

    // ----- reductions and losses -----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_squares();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), ng)
    }

    /// `Σ_t w_t · (−log softmax(logits_t)[target_t]) / Σ_t w_t` over `logits [T, V]`.
    pub fn weighted_sequence_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var, TensorError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || weights.len() != targets.len() {
            return Err(shape_err(
                "weighted_sequence_cross_entropy",
                format!(
                    "logits {s:?}, {} targets, {} weights",
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        let (t_len, v) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::Index {
                op: "weighted_sequence_cross_entropy",
                index: bad,
                size: v,
            });
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            return Err(TensorError::Invalid {
                op: "weighted_sequence_cross_entropy",
                detail: "weights must have a positive finite sum".into(),
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for t in 0..t_len {
            let row = &mut probs[t * v..(t + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += weights[t] * (lse - row[targets[t]]);
            softmax_in_place(row);
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss / total),
            Op::SeqCrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.iter().map(|w| w / total).collect(),
                probs,
            },
            ng,
        ))
    }

    // ----- backward -----

    /// Reverse sweep from a one-element `loss`, returning gradients for every
    /// trainable parameter that the loss depends on (other slots stay empty).
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut out = Gradients::empty(self.store.len());
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, Var(i), &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(
        &self,
        node: &Node,
        this: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) -> Result<(), TensorError> {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let t = Tensor::new(self.store.value(*id).shape().to_vec(), g.to_vec())?;
                out.add_into(*id, &t);
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(dst) = self.acc(grads, v) {
                        add_to(dst, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(dst) = self.acc(grads, *a) {
                    add_to(dst, g);
                }
                if let Some(dst) = self.acc(grads, *b) {
                    dst.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(dst) = self.acc(grads, *a) {
                    for ((d, x), y) in dst.iter_mut().zip(g).zip(vb) {
                        *d += x * y;
                    }
                }
                if let Some(dst) = self.acc(grads, *b) {
                    for ((d, x), y) in dst.iter_mut().zip(g).zip(va) {
                        *d += x * y;
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(dst) = self.acc(grads, *a) {
                    add_to(dst, g);
                }
                let cols = self.value(*b).len();
                if let Some(dst) = self.acc(grads, *b) {
                    for (i, x) in g.iter().enumerate() {
                        dst[i % cols] += x;
                    }
                }
            }
            Op::Affine(x, s) => {
                if let Some(dst) = self.acc(grads, *x) {
                    dst.iter_mut().zip(g).for_each(|(d, v)| *d += s * v);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(dst) = self.acc(grads, *a) {
                    gemm(m, n, k, g, false, vb, true, 1.0, dst);
                }
                if let Some(dst) = self.acc(grads, *b) {
                    gemm(k, m, n, va, true, g, false, 1.0, dst);
                }
            }
            Op::Dense { x, w, b } => {
                let sw = self.shape(*w).to_vec();
                let (n, m) = (sw[0], sw[1]);
                let rows = g.len() / m;
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                if let Some(dst) = self.acc(grads, *x) {
                    gemm(rows, m, n, g, false, vw, true, 1.0, dst);
                }
                if let Some(dst) = self.acc(grads, *w) {
                    gemm(n, rows, m, vx, true, g, false, 1.0, dst);
                }
                if let Some(b) = b {
                    if let Some(dst) = self.acc(grads, *b) {
                        for r in 0..rows {
                            add_to(dst, &g[r * m..(r + 1) * m]);
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                k,
                b,
                cols,
                geom,
            } => {
                let plen = geom.patch_len();
                let rows = geom.rows();
                let cout = geom.cout;
                if let Some(dst) = self.acc(grads, *k) {
                    gemm(plen, rows, cout, cols, true, g, false, 1.0, dst);
                }
                if let Some(b) = b {
                    if let Some(dst) = self.acc(grads, *b) {
                        for r in 0..rows {
                            add_to(dst, &g[r * cout..(r + 1) * cout]);
                        }
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let mut dcols = vec![0.0; rows * plen];
                    gemm(
                        rows,
                        cout,
                        plen,
                        g,
                        false,
                        self.value(*k).data(),
                        true,
                        0.0,
                        &mut dcols,
                    );
                    let dst = self.acc(grads, *x).expect("needs grad");
                    let cin = geom.cin;
                    geom.for_each_tap(|row, col, src| {
                        let s = &dcols[row * plen + col..row * plen + col + cin];
                        add_to(&mut dst[src..src + cin], s);
                    });
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(dst) = self.acc(grads, *x) {
                    for (o, &i) in argmax.iter().enumerate() {
                        dst[i] += g[o];
                    }
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                if let Some(dst) = self.acc(grads, *x) {
                    for ((d, gi), xi) in dst.iter_mut().zip(g).zip(vx) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                let y = self.value(this).data();
                if let Some(dst) = self.acc(grads, *x) {
                    for ((d, gi), yi) in dst.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = self.value(this).data();
                if let Some(dst) = self.acc(grads, *x) {
                    for ((d, gi), yi) in dst.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = self.value(this);
                let (rows, cols) = y.rows_cols();
                let yd = y.data();
                if let Some(dst) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let range = r * cols..(r + 1) * cols;
                        let dot: f64 = g[range.clone()]
                            .iter()
                            .zip(&yd[range.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        for j in range {
                            dst[j] += yd[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::Concat(parts) | Op::Stack(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(dst) = self.acc(grads, p) {
                        add_to(dst, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Row(x, i) => {
                let cols = g.len();
                if let Some(dst) = self.acc(grads, *x) {
                    add_to(&mut dst[i * cols..(i + 1) * cols], g);
                }
            }
            Op::Slice(x, start) => {
                if let Some(dst) = self.acc(grads, *x) {
                    add_to(&mut dst[*start..*start + g.len()], g);
                }
            }
            Op::Reshape(x) => {
                if let Some(dst) = self.acc(grads, *x) {
                    add_to(dst, g);
                }
            }
            Op::ColumnsToSeq { x, h, w, c } => {
                let (h, w, c) = (*h, *w, *c);
                if let Some(dst) = self.acc(grads, *x) {
                    for col in 0..w {
                        for y in 0..h {
                            let src = (y * w + col) * c;
                            let from = col * h * c + y * c;
                            add_to(&mut dst[src..src + c], &g[from..from + c]);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let rows = g.len() / c;
                let gd = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for r in 0..rows {
                    for ch in 0..c {
                        let i = r * c + ch;
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
                if let Some(dst) = self.acc(grads, *gamma) {
                    add_to(dst, &sum_gx);
                }
                if let Some(dst) = self.acc(grads, *beta) {
                    add_to(dst, &sum_g);
                }
                if let Some(dst) = self.acc(grads, *x) {
                    let nf = rows as f64;
                    for r in 0..rows {
                        for ch in 0..c {
                            let i = r * c + ch;
                            dst[i] += if *train {
                                gd[ch] * inv_std[ch] / nf
                                    * (nf * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch])
                            } else {
                                gd[ch] * inv_std[ch] * g[i]
                            };
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dst) = self.acc(grads, *x) {
                    for ((d, gi), m) in dst.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::SeqCrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let v = probs.len() / targets.len();
                if let Some(dst) = self.acc(grads, *logits) {
                    for (t, (&y, &w)) in targets.iter().zip(weights).enumerate() {
                        for j in 0..v {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            dst[t * v + j] += g[0] * w * (probs[t * v + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dst) = self.acc(grads, *x) {
                    dst.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumSquares(x) => {
                let vx = self.value(*x).data();
                if let Some(dst) = self.acc(grads, *x) {
                    for (d, xi) in dst.iter_mut().zip(vx) {
                        *d += 2.0 * xi * g[0];
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn add_to(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(name, t).unwrap();
        (s, id)
    }

    #[test]
    fn square_gradient() {
        let (s, id) = store_with("x", Tensor::vector(vec![3.0]));
        let mut g = Graph::new(&s, Mode::Train);
        let x = g.param(id);
        let l = g.mul(x, x).unwrap();
        let l = g.sum(l);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(id).unwrap().data(), &[6.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let p = s.add("p", Tensor::vector(vec![5.0])).unwrap();
        let mut g = Graph::new(&s, Mode::Train);
        let av = g.param(a);
        let l = g.sum_squares(av);
        let grads = g.backward(l).unwrap();
        let mut s2 = s.clone();
        s2.accumulate(&grads);
        assert!(grads.get(p).is_none());
        assert_eq!(s2.get(p).grad.data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let (s, id) = store_with("x", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new(&s, Mode::Train);
        let x = g.param(id);
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_twice_doubles() {
        let (mut s, id) = store_with("x", Tensor::vector(vec![1.5, -0.5]));
        let grads = {
            let mut g = Graph::new(&s, Mode::Train);
            let x = g.param(id);
            let t = g.tanh(x);
            let l = g.sum_squares(t);
            g.backward(l).unwrap()
        };
        s.accumulate(&grads);
        let once = s.get(id).grad.clone();
        s.accumulate(&grads);
        for (a, b) in s.get(id).grad.data().iter().zip(once.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn conv_identity_and_counting_kernels() {
        let mut s = ParamStore::new();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let kid = s
            .add("k", Tensor::new(vec![3, 3, 1, 1], k).unwrap())
            .unwrap();
        let ones = s.add("ones", Tensor::full(&[3, 3, 1, 1], 1.0)).unwrap();
        let bias = s.add("b", Tensor::zeros(&[1])).unwrap();
        let mut g = Graph::new(&s, Mode::Eval);
        let data: Vec<f64> = (0..25).map(|i| i as f64 * 0.1).collect();
        let x = g.input(Tensor::new(vec![5, 5, 1], data.clone()).unwrap());
        let (kv, bv) = (g.param(kid), g.param(bias));
        let y = g.conv2d(x, kv, Some(bv), 1).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());

        let c = g.input(Tensor::full(&[5, 5, 1], 1.0));
        let ov = g.param(ones);
        let y = g.conv2d(c, ov, None, 1).unwrap();
        let d = g.value(y).data();
        assert_eq!(d[0], 4.0);
        assert_eq!(d[12], 9.0);
        assert_eq!(d[1], 6.0);
    }

    #[test]
    fn maxpool_values_and_ceil_shape() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s, Mode::Eval);
        let x = g.input(Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let z = g.input(Tensor::full(&[5, 3, 2], 0.7));
        let p = g.maxpool2(z).unwrap();
        assert_eq!(g.shape(p), &[3, 2, 2]);
        assert!(g.value(p).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let (s, id) = store_with(
            "x",
            Tensor::new(vec![2, 2, 1], vec![1.0, 1.0, 1.0, 1.0]).unwrap(),
        );
        let mut g = Graph::new(&s, Mode::Train);
        let x = g.param(id);
        let y = g.maxpool2(x).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(id).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dense_examples() {
        let mut s = ParamStore::new();
        let w = s
            .add("w", Tensor::matrix(1, 1, vec![2.0]).unwrap())
            .unwrap();
        let b = s.add("b", Tensor::vector(vec![3.0])).unwrap();
        let eye = s
            .add(
                "eye",
                Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            )
            .unwrap();
        let mut g = Graph::new(&s, Mode::Eval);
        let x = g.input(Tensor::vector(vec![5.0]));
        let (wv, bv) = (g.param(w), g.param(b));
        let y = g.dense(x, wv, Some(bv)).unwrap();
        assert_eq!(g.value(y).data(), &[13.0]);
        let x2 = g.input(Tensor::vector(vec![-1.0, 4.0]));
        let ev = g.param(eye);
        let y2 = g.dense(x2, ev, None).unwrap();
        assert_eq!(g.value(y2).data(), &[-1.0, 4.0]);
        assert!(g.dense(x2, wv, None).is_err());
    }

    #[test]
    fn activations() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s, Mode::Eval);
        let x = g.input(Tensor::vector(vec![-2.0, 3.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 3.0]);
        let z = g.input(Tensor::vector(vec![0.0, 0.0]));
        let p = g.softmax(z);
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
        let big = g.input(Tensor::vector(vec![1000.0, 0.0, -1000.0]));
        let p = g.softmax(big);
        let total: f64 = g.value(p).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_modes() {
        let s = ParamStore::new();
        let mut g = Graph::with_seed(&s, Mode::Train, 7);
        let x = g.input(Tensor::full(&[100_000], 1.0));
        assert_eq!(g.dropout(x, 0.0).unwrap(), x);
        let y = g.dropout(x, 0.5).unwrap();
        let survivors = g.value(y).data().iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / 100_000.0;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(g.dropout(x, 1.0).is_err());

        let mut e = Graph::new(&s, Mode::Eval);
        let x = e.input(Tensor::full(&[10], 1.0));
        assert_eq!(e.dropout(x, 0.9).unwrap(), x);
    }

    #[test]
    fn cross_entropy_limits() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s, Mode::Eval);
        let uniform = g.input(Tensor::zeros(&[3, 4]));
        let l = g
            .weighted_sequence_cross_entropy(uniform, &[0, 1, 3], &[1.0; 3])
            .unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let mut sharp = vec![-30.0; 8];
        sharp[2] = 30.0;
        sharp[4] = 30.0;
        let sharp = g.input(Tensor::new(vec![2, 4], sharp).unwrap());
        let l = g
            .weighted_sequence_cross_entropy(sharp, &[2, 0], &[1.0, 1.0])
            .unwrap();
        assert!(g.value(l).item() < 1e-3);

        assert!(matches!(
            g.weighted_sequence_cross_entropy(uniform, &[0, 4, 1], &[1.0; 3]),
            Err(TensorError::Index { .. })
        ));
    }

    #[test]
    fn batchnorm_train_mode_centres_each_channel() {
        let mut s = ParamStore::new();
        let gamma = s.add("g", Tensor::full(&[3], 1.0)).unwrap();
        let beta = s.add("b", Tensor::zeros(&[3])).unwrap();
        let rm = s.add_buffer("rm", Tensor::zeros(&[3])).unwrap();
        let rv = s.add_buffer("rv", Tensor::full(&[3], 1.0)).unwrap();
        let data: Vec<f64> = (0..30)
            .map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0)
            .collect();
        let mut g = Graph::new(&s, Mode::Train);
        let x = g.input(Tensor::new(vec![10, 3], data).unwrap());
        let (gv, bv) = (g.param(gamma), g.param(beta));
        let y = g.batchnorm(x, gv, bv, rm, rv).unwrap();
        let yd = g.value(y).data();
        for ch in 0..3 {
            let mean: f64 = (0..10).map(|r| yd[r * 3 + ch]).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-6);
        }
        let updates = g.take_stat_updates();
        assert_eq!(updates.len(), 1);
        updates[0].apply(&mut s);
        assert!(s.value(rm).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn batchnorm_identity_on_standardized_input() {
        let mut s = ParamStore::new();
        let gamma = s.add("g", Tensor::full(&[1], 1.0)).unwrap();
        let beta = s.add("b", Tensor::zeros(&[1])).unwrap();
        let rm = s.add_buffer("rm", Tensor::zeros(&[1])).unwrap();
        let rv = s.add_buffer("rv", Tensor::full(&[1], 1.0)).unwrap();
        let mut g = Graph::new(&s, Mode::Train);
        let x = g.input(Tensor::new(vec![4, 1], vec![1.0, -1.0, 1.0, -1.0]).unwrap());
        let (gv, bv) = (g.param(gamma), g.param(beta));
        let y = g.batchnorm(x, gv, bv, rm, rv).unwrap();
        for (a, b) in g.value(y).data().iter().zip([1.0, -1.0, 1.0, -1.0]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn columns_to_sequence_layout() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s, Mode::Eval);
        // h=2, w=3, c=2; value encodes (y, x, ch)
        let data: Vec<f64> = (0..2)
            .flat_map(|y| {
                (0..3).flat_map(move |x| (0..2).map(move |c| (y * 100 + x * 10 + c) as f64))
            })
            .collect();
        let x = g.input(Tensor::new(vec![2, 3, 2], data).unwrap());
        let seq = g.columns_to_sequence(x).unwrap();
        assert_eq!(g.shape(seq), &[3, 4]);
        assert_eq!(&g.value(seq).data()[4..8], &[10.0, 11.0, 110.0, 111.0]);
    }

    #[test]
    fn dependency_queries() {
        let (s, id) = store_with("x", Tensor::vector(vec![1.0]));
        let mut g = Graph::new(&s, Mode::Eval);
        let x = g.param(id);
        let a = g.tanh(x);
        let b = g.input(Tensor::vector(vec![2.0]));
        let c = g.add(a, b).unwrap();
        assert!(g.depends_on(c, x));
        assert!(!g.depends_on(a, b));
    }
}
