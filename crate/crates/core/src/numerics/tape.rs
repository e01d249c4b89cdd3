//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Node ids are
//! assigned in creation order, which is already a topological order, so the
//! backward pass is a single reverse sweep that visits each node once and
//! sums gradient contributions at fan-out.
//!
//! Shape errors inside the graph are programming errors and panic. Numeric
//! poisoning (NaN/Inf) is recorded on the tape and reported by
//! [`Var::backward`] and [`Tape::check_finite`].

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::ops::Range;

use super::recurrence::{self, RecurrenceTrace, Transition};
use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Scalar, Tensor};
use super::NumericsError;

enum Op<T: Scalar> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    BroadcastRows(usize),
    Scale(usize, T),
    AddScalar(usize),
    Transpose(usize),
    Reshape(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    ClampMin(usize, T),
    SoftmaxRows(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    MeanCols(usize),
    SegmentMean(usize, Vec<Range<usize>>),
    GatherRows(usize, Vec<usize>),
    ScatterRows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Recurrence {
        u: usize,
        a: usize,
        gate: Option<usize>,
        h0: Vec<T>,
        transition: Transition,
        segments: Vec<Range<usize>>,
        trace: RecurrenceTrace<T>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::ClampMin(..) => "clamp_min",
            Op::SoftmaxRows(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::MeanCols(..) => "mean_cols",
            Op::SegmentMean(..) => "segment_mean",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Recurrence { .. } => "recurrence",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::BroadcastRows(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::ClampMin(a, _)
            | Op::SoftmaxRows(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::MeanCols(a)
            | Op::SegmentMean(a, _)
            | Op::GatherRows(a, _)
            | Op::ScatterRows(a, _) => vec![*a],
            Op::ConcatRows(ids) => ids.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Recurrence { u, a, gate, .. } => {
                let mut v = vec![*u, *a];
                v.extend(gate.iter().copied());
                v
            }
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations for one forward/backward pass.
pub struct Tape<T: Scalar = f64> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<Vec<(String, usize)>>,
    poisoned: Cell<Option<(usize, &'static str)>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f64> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
            poisoned: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.inputs().iter().any(|&i| nodes[i].needs_grad);
        let id = nodes.len();
        if self.poisoned.get().is_none() && !value.is_finite() {
            self.poisoned.set(Some((id, op.name())));
        }
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self, id }
    }

    /// Records a value that receives no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    /// Records a named trainable leaf. Registering the same name twice makes
    /// the gradients of both occurrences accumulate under that name.
    pub fn param(&self, name: &str, value: &Tensor<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.poisoned.get().is_none() && !value.is_finite() {
            self.poisoned.set(Some((id, "param")));
        }
        nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf,
            needs_grad: true,
        });
        self.params.borrow_mut().push((name.to_string(), id));
        Var { tape: self, id }
    }

    pub fn check_finite(&self) -> Result<(), NumericsError> {
        match self.poisoned.get() {
            Some((node, op)) => Err(NumericsError::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(&self, parts: &[Var<'_, T>]) -> Var<'_, T> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let nodes = self.nodes.borrow();
        let cols = nodes[parts[0].id].value.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = &nodes[p.id].value;
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        drop(nodes);
        let value = Tensor::new(vec![rows, cols], data).expect("concat shape");
        self.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
    }

    /// Gated recurrence `h_t = f(A h_{t-1} + u_t)` over `segments` of the
    /// rows of `u`; see [`recurrence::forward`].
    pub fn recurrence<'t>(
        &'t self,
        u: Var<'t, T>,
        a: Var<'t, T>,
        gate: Option<Var<'t, T>>,
        h0: &[T],
        transition: Transition,
        segments: Vec<Range<usize>>,
    ) -> Var<'t, T> {
        let nodes = self.nodes.borrow();
        let uv = &nodes[u.id].value;
        let av = &nodes[a.id].value;
        let width = uv.cols();
        assert_eq!(av.shape(), &[width, width], "state matrix must be square");
        assert_eq!(h0.len(), width, "initial state width");
        if let Some(g) = gate {
            assert_eq!(nodes[g.id].value.shape(), uv.shape(), "gate shape");
        }
        for s in &segments {
            assert!(s.end <= uv.rows(), "segment out of range");
        }
        let gate_data = gate.map(|g| nodes[g.id].value.data());
        let trace = recurrence::forward(
            uv.data(),
            gate_data,
            av.data(),
            h0,
            width,
            transition,
            &segments,
        );
        let value = Tensor::new(uv.shape().to_vec(), trace.states.clone()).expect("shape");
        drop(nodes);
        self.push(
            value,
            Op::Recurrence {
                u: u.id,
                a: a.id,
                gate: gate.map(|g| g.id),
                h0: h0.to_vec(),
                transition,
                segments,
                trace,
            },
        )
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Tensor<T>> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn backward_from(&self, root: usize) -> Result<Gradients<T>, NumericsError> {
        self.check_finite()?;
        let nodes = self.nodes.borrow();
        let out = &nodes[root].value;
        if !out.is_scalar() {
            return Err(NumericsError::NotScalar {
                shape: out.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::filled(out.shape(), T::one()));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let contributions = local_grads(&nodes, node, &g);
            for (input, delta) in contributions {
                if !nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                            *a = *a + *d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            }
            // keep leaf grads for collection
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        let mut map: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (name, id) in self.params.borrow().iter() {
            if *id > root {
                continue;
            }
            let g = grads[*id]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(nodes[*id].value.shape()));
            match map.get_mut(name) {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + *d;
                    }
                }
                None => {
                    map.insert(name.clone(), g);
                }
            }
        }
        for (name, g) in &map {
            if !g.is_finite() {
                return Err(NumericsError::NonFiniteGradient { name: name.clone() });
            }
        }
        Ok(Gradients { map })
    }
}

fn elementwise_grad<T: Scalar>(
    input: &Tensor<T>,
    output: &Tensor<T>,
    g: &Tensor<T>,
    f: impl Fn(T, T, T) -> T,
) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(output.data())
        .zip(g.data())
        .map(|((&x, &y), &d)| f(x, y, d))
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("shape")
}

fn local_grads<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
) -> Vec<(usize, Tensor<T>)> {
    let val = |i: usize| &nodes[i].value;
    let out = &node.value;
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            let mut ga = vec![T::zero(); m * k];
            matmul_nt_into(g.data(), bv.data(), &mut ga, m, n, k);
            let mut gb = vec![T::zero(); k * n];
            matmul_tn_into(av.data(), g.data(), &mut gb, m, k, n);
            vec![
                (*a, Tensor::new(av.shape().to_vec(), ga).expect("shape")),
                (*b, Tensor::new(bv.shape().to_vec(), gb).expect("shape")),
            ]
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => vec![
            (*a, g.zip_map(val(*b), |d, y| d * y)),
            (*b, g.zip_map(val(*a), |d, x| d * x)),
        ],
        Op::AddRow(a, b) => {
            let bv = val(*b);
            let n = bv.len();
            let mut gb = vec![T::zero(); n];
            for row in g.data().chunks(n) {
                for (acc, &d) in gb.iter_mut().zip(row) {
                    *acc = *acc + d;
                }
            }
            vec![
                (*a, g.clone()),
                (*b, Tensor::new(bv.shape().to_vec(), gb).expect("shape")),
            ]
        }
        Op::MulRow(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let n = bv.len();
            let mut ga = g.clone();
            for row in ga.data_mut().chunks_mut(n) {
                for (d, &s) in row.iter_mut().zip(bv.data()) {
                    *d = *d * s;
                }
            }
            let mut gb = vec![T::zero(); n];
            for (grow, xrow) in g.data().chunks(n).zip(av.data().chunks(n)) {
                for ((acc, &d), &x) in gb.iter_mut().zip(grow).zip(xrow) {
                    *acc = *acc + d * x;
                }
            }
            vec![
                (*a, ga),
                (*b, Tensor::new(bv.shape().to_vec(), gb).expect("shape")),
            ]
        }
        Op::BroadcastRows(a) => {
            let av = val(*a);
            let n = av.len();
            let mut ga = vec![T::zero(); n];
            for row in g.data().chunks(n) {
                for (acc, &d) in ga.iter_mut().zip(row) {
                    *acc = *acc + d;
                }
            }
            vec![(*a, Tensor::new(av.shape().to_vec(), ga).expect("shape"))]
        }
        Op::Scale(a, c) => vec![(*a, g.map(|d| d * *c))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::Transpose(a) => vec![(*a, g.transpose())],
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape()).expect("shape"))],
        Op::Exp(a) => vec![(*a, elementwise_grad(val(*a), out, g, |_, y, d| d * y))],
        Op::Log(a) => vec![(*a, elementwise_grad(val(*a), out, g, |x, _, d| d / x))],
        Op::Tanh(a) => vec![(
            *a,
            elementwise_grad(val(*a), out, g, |_, y, d| d * (T::one() - y * y)),
        )],
        Op::Sigmoid(a) => vec![(
            *a,
            elementwise_grad(val(*a), out, g, |_, y, d| d * y * (T::one() - y)),
        )],
        Op::ClampMin(a, lo) => vec![(
            *a,
            elementwise_grad(
                val(*a),
                out,
                g,
                |x, _, d| if x >= *lo { d } else { T::zero() },
            ),
        )],
        Op::SoftmaxRows(a) => {
            let n = out.cols();
            let mut ga = g.clone();
            for (grow, srow) in ga.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                let dot: T = grow.iter().zip(srow).map(|(&d, &s)| d * s).sum();
                for (d, &s) in grow.iter_mut().zip(srow) {
                    *d = s * (*d - dot);
                }
            }
            vec![(*a, ga)]
        }
        Op::Sum(a) => {
            let av = val(*a);
            vec![(*a, Tensor::filled(av.shape(), g.item()))]
        }
        Op::Mean(a) => {
            let av = val(*a);
            let n = T::of(av.len() as f64);
            vec![(*a, Tensor::filled(av.shape(), g.item() / n))]
        }
        Op::SumRows(a) => {
            let av = val(*a);
            let n = av.cols();
            let mut ga = vec![T::zero(); av.len()];
            for (row, &d) in ga.chunks_mut(n).zip(g.data()) {
                row.iter_mut().for_each(|v| *v = d);
            }
            vec![(*a, Tensor::new(av.shape().to_vec(), ga).expect("shape"))]
        }
        Op::MeanCols(a) => {
            let av = val(*a);
            let m = T::of(av.rows() as f64);
            let mut ga = vec![T::zero(); av.len()];
            for row in ga.chunks_mut(av.cols()) {
                for (v, &d) in row.iter_mut().zip(g.data()) {
                    *v = d / m;
                }
            }
            vec![(*a, Tensor::new(av.shape().to_vec(), ga).expect("shape"))]
        }
        Op::SegmentMean(a, segs) => {
            let av = val(*a);
            let n = av.cols();
            let mut ga = vec![T::zero(); av.len()];
            for (s, seg) in segs.iter().enumerate() {
                let inv = T::one() / T::of(seg.len() as f64);
                let grow = g.row(s);
                for r in seg.clone() {
                    for (v, &d) in ga[r * n..(r + 1) * n].iter_mut().zip(grow) {
                        *v = *v + d * inv;
                    }
                }
            }
            vec![(*a, Tensor::new(av.shape().to_vec(), ga).expect("shape"))]
        }
        Op::GatherRows(a, idx) => {
            let av = val(*a);
            let n = av.cols();
            let mut ga = vec![T::zero(); av.len()];
            for (k, &r) in idx.iter().enumerate() {
                for (v, &d) in ga[r * n..(r + 1) * n].iter_mut().zip(g.row(k)) {
                    *v = *v + d;
                }
            }
            vec![(*a, Tensor::new(av.shape().to_vec(), ga).expect("shape"))]
        }
        Op::ScatterRows(a, idx) => {
            let av = val(*a);
            let n = av.cols();
            let mut ga = Vec::with_capacity(av.len());
            for &r in idx {
                ga.extend_from_slice(&g.data()[r * n..(r + 1) * n]);
            }
            vec![(*a, Tensor::new(av.shape().to_vec(), ga).expect("shape"))]
        }
        Op::ConcatRows(ids) => {
            let n = out.cols();
            let mut offset = 0;
            ids.iter()
                .map(|&i| {
                    let v = val(i);
                    let len = v.rows() * n;
                    let part = g.data()[offset * n..offset * n + len].to_vec();
                    offset += v.rows();
                    (i, Tensor::new(v.shape().to_vec(), part).expect("shape"))
                })
                .collect()
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            normalized,
            inv_std,
        } => {
            let xv = val(*x);
            let gv = val(*gamma);
            let n = xv.cols();
            let nf = T::of(n as f64);
            let mut gx = vec![T::zero(); xv.len()];
            let mut ggamma = vec![T::zero(); n];
            let mut gbeta = vec![T::zero(); n];
            let mut dxhat = vec![T::zero(); n];
            for r in 0..xv.rows() {
                let grow = g.row(r);
                let xhat = &normalized[r * n..(r + 1) * n];
                for k in 0..n {
                    ggamma[k] = ggamma[k] + grow[k] * xhat[k];
                    gbeta[k] = gbeta[k] + grow[k];
                    dxhat[k] = grow[k] * gv.data()[k];
                }
                let sum_d: T = dxhat.iter().copied().sum();
                let sum_dx: T = dxhat.iter().zip(xhat).map(|(&d, &h)| d * h).sum();
                let scale = inv_std[r] / nf;
                for k in 0..n {
                    gx[r * n + k] = scale * (nf * dxhat[k] - sum_d - xhat[k] * sum_dx);
                }
            }
            vec![
                (*x, Tensor::new(xv.shape().to_vec(), gx).expect("shape")),
                (
                    *gamma,
                    Tensor::new(gv.shape().to_vec(), ggamma).expect("shape"),
                ),
                (
                    *beta,
                    Tensor::new(val(*beta).shape().to_vec(), gbeta).expect("shape"),
                ),
            ]
        }
        Op::Recurrence {
            u,
            a,
            gate,
            h0,
            transition,
            segments,
            trace,
        } => {
            let uv = val(*u);
            let av = val(*a);
            let width = uv.cols();
            let gate_data = gate.map(|gi| val(gi).data());
            let grads = recurrence::backward(
                trace,
                g.data(),
                gate_data,
                av.data(),
                h0,
                width,
                *transition,
                segments,
            );
            let mut v = vec![
                (
                    *u,
                    Tensor::new(uv.shape().to_vec(), grads.u).expect("shape"),
                ),
                (
                    *a,
                    Tensor::new(av.shape().to_vec(), grads.a).expect("shape"),
                ),
            ];
            if let Some(gi) = gate {
                v.push((
                    *gi,
                    Tensor::new(uv.shape().to_vec(), grads.gate).expect("shape"),
                ));
            }
            v
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Snapshot of the current value.
    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.id).shape().to_vec()
    }

    /// Runs the backward pass from this scalar and returns gradients for
    /// every named parameter recorded before it.
    pub fn backward(&self) -> Result<Gradients<T>, NumericsError> {
        self.tape.backward_from(self.id)
    }

    fn map_unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Self {
        let value = self.tape.value_of(self.id).map(f);
        self.tape.push(value, op)
    }

    fn zip(self, other: Self, op: Op<T>, f: impl Fn(T, T) -> T) -> Self {
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            assert_eq!(a.shape(), b.shape(), "{} shape mismatch", op.name());
            a.zip_map(&b, f)
        };
        self.tape.push(value, op)
    }

    pub fn matmul(self, other: Self) -> Self {
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            assert_eq!(
                k,
                b.rows(),
                "matmul inner dimension {:?} x {:?}",
                a.shape(),
                b.shape()
            );
            let mut data = vec![T::zero(); m * n];
            matmul_into(a.data(), b.data(), &mut data, m, k, n);
            Tensor::new(vec![m, n], data).expect("shape")
        };
        self.tape.push(value, Op::MatMul(self.id, other.id))
    }

    pub fn square(self) -> Self {
        self * self
    }

    /// `[m, n] + [n]`, broadcasting the vector over rows.
    pub fn add_row(self, row: Self) -> Self {
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(row.id);
            assert_eq!(a.cols(), b.len(), "add_row width mismatch");
            let mut out = a.clone();
            for r in out.data_mut().chunks_mut(b.len()) {
                for (v, &x) in r.iter_mut().zip(b.data()) {
                    *v = *v + x;
                }
            }
            out
        };
        self.tape.push(value, Op::AddRow(self.id, row.id))
    }

    /// `[m, n] * [n]`, broadcasting the vector over rows.
    pub fn mul_row(self, row: Self) -> Self {
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(row.id);
            assert_eq!(a.cols(), b.len(), "mul_row width mismatch");
            let mut out = a.clone();
            for r in out.data_mut().chunks_mut(b.len()) {
                for (v, &x) in r.iter_mut().zip(b.data()) {
                    *v = *v * x;
                }
            }
            out
        };
        self.tape.push(value, Op::MulRow(self.id, row.id))
    }

    /// Repeats a vector `rows` times into a `[rows, n]` matrix.
    pub fn broadcast_rows(self, rows: usize) -> Self {
        let value = {
            let a = self.tape.value_of(self.id);
            let mut data = Vec::with_capacity(rows * a.len());
            for _ in 0..rows {
                data.extend_from_slice(a.data());
            }
            Tensor::new(vec![rows, a.len()], data).expect("shape")
        };
        self.tape.push(value, Op::BroadcastRows(self.id))
    }

    pub fn scale(self, c: f64) -> Self {
        let c = T::of(c);
        self.map_unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn add_scalar(self, c: f64) -> Self {
        let c = T::of(c);
        self.map_unary(Op::AddScalar(self.id), |v| v + c)
    }

    pub fn transpose(self) -> Self {
        let value = self.tape.value_of(self.id).transpose();
        self.tape.push(value, Op::Transpose(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let value = self
            .tape
            .value_of(self.id)
            .reshape(shape)
            .expect("reshape element count");
        self.tape.push(value, Op::Reshape(self.id))
    }

    pub fn exp(self) -> Self {
        self.map_unary(Op::Exp(self.id), T::exp)
    }

    pub fn log(self) -> Self {
        self.map_unary(Op::Log(self.id), T::ln)
    }

    pub fn tanh(self) -> Self {
        self.map_unary(Op::Tanh(self.id), T::tanh)
    }

    pub fn sigmoid(self) -> Self {
        self.map_unary(Op::Sigmoid(self.id), |v| T::one() / (T::one() + (-v).exp()))
    }

    /// `max(x, lo)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(self, lo: f64) -> Self {
        let lo = T::of(lo);
        self.map_unary(Op::ClampMin(self.id, lo), |v| v.max(lo))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax_rows(self) -> Self {
        let value = {
            let mut out = self.tape.value_of(self.id).clone();
            let n = out.cols();
            for row in out.data_mut().chunks_mut(n) {
                softmax_in_place(row);
            }
            out
        };
        self.tape.push(value, Op::SoftmaxRows(self.id))
    }

    pub fn sum(self) -> Self {
        let value = Tensor::scalar(self.tape.value_of(self.id).sum());
        self.tape.push(value, Op::Sum(self.id))
    }

    pub fn mean(self) -> Self {
        let value = {
            let a = self.tape.value_of(self.id);
            Tensor::scalar(a.sum() / T::of(a.len() as f64))
        };
        self.tape.push(value, Op::Mean(self.id))
    }

    /// Sums over the last axis: `[m, n] -> [m]`.
    pub fn sum_rows(self) -> Self {
        let value = {
            let a = self.tape.value_of(self.id);
            let sums = a
                .data()
                .chunks(a.cols())
                .map(|r| r.iter().copied().sum())
                .collect();
            Tensor::vector(sums)
        };
        self.tape.push(value, Op::SumRows(self.id))
    }

    /// Averages over the row axis: `[m, n] -> [n]`.
    pub fn mean_cols(self) -> Self {
        let value = {
            let a = self.tape.value_of(self.id);
            let n = a.cols();
            let mut acc = vec![T::zero(); n];
            for row in a.data().chunks(n) {
                for (s, &v) in acc.iter_mut().zip(row) {
                    *s = *s + v;
                }
            }
            let m = T::of(a.rows() as f64);
            Tensor::vector(acc.into_iter().map(|s| s / m).collect())
        };
        self.tape.push(value, Op::MeanCols(self.id))
    }

    /// Mean of each row span: `[m, n] -> [segments.len(), n]`.
    pub fn segment_mean(self, segments: Vec<Range<usize>>) -> Self {
        let value = {
            let a = self.tape.value_of(self.id);
            let n = a.cols();
            let mut data = Vec::with_capacity(segments.len() * n);
            for seg in &segments {
                assert!(
                    !seg.is_empty() && seg.end <= a.rows(),
                    "bad segment {seg:?}"
                );
                let mut acc = vec![T::zero(); n];
                for r in seg.clone() {
                    for (s, &v) in acc.iter_mut().zip(a.row(r)) {
                        *s = *s + v;
                    }
                }
                let inv = T::one() / T::of(seg.len() as f64);
                data.extend(acc.into_iter().map(|s| s * inv));
            }
            Tensor::new(vec![segments.len(), n], data).expect("shape")
        };
        self.tape.push(value, Op::SegmentMean(self.id, segments))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(self, idx: &[usize]) -> Self {
        let value = {
            let a = self.tape.value_of(self.id);
            let n = a.cols();
            let mut data = Vec::with_capacity(idx.len() * n);
            for &r in idx {
                data.extend_from_slice(a.row(r));
            }
            Tensor::new(vec![idx.len(), n], data).expect("shape")
        };
        self.tape.push(value, Op::GatherRows(self.id, idx.to_vec()))
    }

    /// Places row `k` of `self` at row `idx[k]` of a zero matrix with
    /// `rows` rows. Indices must be distinct.
    pub fn scatter_rows(self, idx: &[usize], rows: usize) -> Self {
        let value = {
            let a = self.tape.value_of(self.id);
            assert_eq!(a.rows(), idx.len(), "scatter_rows index count");
            let n = a.cols();
            let mut data = vec![T::zero(); rows * n];
            for (k, &r) in idx.iter().enumerate() {
                data[r * n..(r + 1) * n].copy_from_slice(a.row(k));
            }
            Tensor::new(vec![rows, n], data).expect("shape")
        };
        self.tape
            .push(value, Op::ScatterRows(self.id, idx.to_vec()))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Self, beta: Self, eps: f64) -> Self {
        let (value, normalized, inv_std) = {
            let x = self.tape.value_of(self.id);
            let gv = self.tape.value_of(gamma.id);
            let bv = self.tape.value_of(beta.id);
            let n = x.cols();
            assert_eq!(gv.len(), n, "layer_norm gamma width");
            assert_eq!(bv.len(), n, "layer_norm beta width");
            let nf = T::of(n as f64);
            let mut normalized = Vec::with_capacity(x.len());
            let mut inv_std = Vec::with_capacity(x.rows());
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(n) {
                let mu = row.iter().copied().sum::<T>() / nf;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
                let is = T::one() / (var + T::of(eps)).sqrt();
                inv_std.push(is);
                for (k, &v) in row.iter().enumerate() {
                    let h = (v - mu) * is;
                    normalized.push(h);
                    out.push(h * gv.data()[k] + bv.data()[k]);
                }
            }
            (
                Tensor::new(x.shape().to_vec(), out).expect("shape"),
                normalized,
                inv_std,
            )
        };
        self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                normalized,
                inv_std,
            },
        )
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

impl<'t, T: Scalar> std::ops::Add for Var<'t, T> {
    type Output = Var<'t, T>;
    fn add(self, rhs: Self) -> Self::Output {
        self.zip(rhs, Op::Add(self.id, rhs.id), |a, b| a + b)
    }
}

impl<'t, T: Scalar> std::ops::Sub for Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        self.zip(rhs, Op::Sub(self.id, rhs.id), |a, b| a - b)
    }
}

impl<'t, T: Scalar> std::ops::Mul for Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        self.zip(rhs, Op::Mul(self.id, rhs.id), |a, b| a * b)
    }
}

impl<'t, T: Scalar> std::ops::Neg for Var<'t, T> {
    type Output = Var<'t, T>;
    fn neg(self) -> Self::Output {
        self.scale(-1.0)
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T: Scalar = f64> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>, NumericsError> {
        self.map
            .get(name)
            .ok_or_else(|| NumericsError::DetachedParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, name: &str, grad: Tensor<T>) {
        self.map.insert(name.to_string(), grad);
    }
}
