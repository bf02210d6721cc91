//! Define-by-run autodiff over the operation set the model needs.
//!
//! A `Graph` records every executed operation together with its inputs and
//! outputs; `backward` replays the adjoints in reverse execution order
//! exactly once, accumulating gradients into the owning `ParamStore`.
//! Graphs are rebuilt per step, which keeps changing attention windows
//! trivial to handle.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::tensor::{self, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// How a parameter participates in the max-norm constraint: `Weight`
/// matrices are constrained per row (the incoming weights of one output
/// unit), `ConvKernel` per column (one filter channel), biases and
/// embeddings are exempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    ConvKernel,
    Bias,
    Embedding,
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named model parameters with gradient accumulators.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            kind,
            value: Tensor::zeros(shape),
            grad: Tensor::zeros(shape),
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }
}

/// Handle to a node in a `Graph`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatVec { w: NodeRef, x: NodeRef },
    Affine { w: NodeRef, x: NodeRef, b: NodeRef },
    Add(NodeRef, NodeRef),
    Sub(NodeRef, NodeRef),
    Mul(NodeRef, NodeRef),
    /// (1 - gate) * a + gate * b, elementwise.
    Blend { gate: NodeRef, a: NodeRef, b: NodeRef },
    Tanh(NodeRef),
    Sigmoid(NodeRef),
    Softmax(NodeRef),
    LogSoftmax(NodeRef),
    Pick { x: NodeRef, index: usize },
    Dot(NodeRef, NodeRef),
    Scale { x: NodeRef, c: Real },
    Concat(NodeRef, NodeRef),
    Conv1d { q: NodeRef, signal: NodeRef },
    Row { m: NodeRef, index: usize },
    StackRows(Vec<NodeRef>),
    StackScalars(Vec<NodeRef>),
    /// Place a short vector at offset `lo` inside a zero vector of length `total`.
    ScatterSpan { x: NodeRef, lo: usize },
    /// Weighted sum of matrix rows lo..=hi with weights taken from a full-length vector.
    WeightedRows { weights: NodeRef, m: NodeRef, lo: usize, hi: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Tape of executed operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeRef>,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(1024),
            param_nodes: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeRef {
        let r = NodeRef(self.nodes.len());
        self.nodes.push(Node { value, op });
        r
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, r: NodeRef) -> &Tensor {
        &self.nodes[r.0].value
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> NodeRef {
        self.push(t, Op::Leaf)
    }

    /// Parameter leaf. Repeated registration of the same parameter returns
    /// the same node, so gradients from every use accumulate there.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeRef {
        if let Some(&r) = self.param_nodes.get(&id) {
            return r;
        }
        let r = self.push(store.value(id).clone(), Op::Param(id));
        self.param_nodes.insert(id, r);
        r
    }

    fn same_shape(&self, op: &'static str, a: NodeRef, b: NodeRef) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op,
                detail: format!(
                    "operand shapes {:?} and {:?} differ",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.same_shape("sub", a, b)?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= v;
        }
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.same_shape("mul", a, b)?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// (1 - gate) * a + gate * b
    pub fn blend(&mut self, gate: NodeRef, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.same_shape("blend", gate, a)?;
        self.same_shape("blend", gate, b)?;
        let n = self.value(gate).len();
        let mut out = Tensor::zeros(&[n]);
        {
            let g = self.value(gate).data();
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..n {
                out.data_mut()[i] = (1.0 - g[i]) * av[i] + g[i] * bv[i];
            }
        }
        Ok(self.push(out, Op::Blend { gate, a, b }))
    }

    pub fn matvec(&mut self, w: NodeRef, x: NodeRef) -> Result<NodeRef> {
        let out = tensor::matvec(self.value(w), self.value(x))?;
        Ok(self.push(out, Op::MatVec { w, x }))
    }

    pub fn affine(&mut self, x: NodeRef, w: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let out = tensor::affine(self.value(w), self.value(x), self.value(b))?;
        Ok(self.push(out, Op::Affine { w, x, b }))
    }

    pub fn tanh(&mut self, x: NodeRef) -> NodeRef {
        let out = tensor::tanh_map(self.value(x));
        self.push(out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeRef) -> NodeRef {
        let out = tensor::sigmoid_map(self.value(x));
        self.push(out, Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: NodeRef) -> NodeRef {
        let out = tensor::softmax(self.value(x));
        self.push(out, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: NodeRef) -> NodeRef {
        let out = tensor::log_softmax(self.value(x));
        self.push(out, Op::LogSoftmax(x))
    }

    pub fn pick(&mut self, x: NodeRef, index: usize) -> Result<NodeRef> {
        let v = self.value(x);
        if index >= v.len() {
            return Err(Error::Shape {
                op: "pick",
                detail: format!("index {} out of range for length {}", index, v.len()),
            });
        }
        let out = Tensor::scalar(v.data()[index]);
        Ok(self.push(out, Op::Pick { x, index }))
    }

    pub fn dot(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let out = Tensor::scalar(tensor::dot(self.value(a), self.value(b))?);
        Ok(self.push(out, Op::Dot(a, b)))
    }

    pub fn scale(&mut self, x: NodeRef, c: Real) -> NodeRef {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v *= c;
        }
        self.push(out, Op::Scale { x, c })
    }

    pub fn concat(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        self.push(Tensor::vector(data), Op::Concat(a, b))
    }

    pub fn conv1d(&mut self, q: NodeRef, signal: NodeRef) -> Result<NodeRef> {
        let out = tensor::conv1d(self.value(q), self.value(signal))?;
        Ok(self.push(out, Op::Conv1d { q, signal }))
    }

    pub fn row(&mut self, m: NodeRef, index: usize) -> Result<NodeRef> {
        let v = self.value(m);
        if v.shape().len() != 2 || index >= v.rows() {
            return Err(Error::Shape {
                op: "row",
                detail: format!("row {} of tensor with shape {:?}", index, v.shape()),
            });
        }
        let out = Tensor::vector(v.row(index).to_vec());
        Ok(self.push(out, Op::Row { m, index }))
    }

    pub fn stack_rows(&mut self, rows: &[NodeRef]) -> Result<NodeRef> {
        if rows.is_empty() {
            return Err(Error::EmptySequence);
        }
        let d = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if self.value(r).len() != d {
                return Err(Error::Shape {
                    op: "stack_rows",
                    detail: "rows have differing lengths".into(),
                });
            }
            data.extend_from_slice(self.value(r).data());
        }
        let out = Tensor::from_vec(&[rows.len(), d], data)?;
        Ok(self.push(out, Op::StackRows(rows.to_vec())))
    }

    pub fn stack_scalars(&mut self, xs: &[NodeRef]) -> Result<NodeRef> {
        if xs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut data = Vec::with_capacity(xs.len());
        for &x in xs {
            if self.value(x).len() != 1 {
                return Err(Error::Shape {
                    op: "stack_scalars",
                    detail: "inputs must be scalars".into(),
                });
            }
            data.push(self.value(x).item());
        }
        Ok(self.push(Tensor::vector(data), Op::StackScalars(xs.to_vec())))
    }

    pub fn scatter_span(&mut self, x: NodeRef, lo: usize, total: usize) -> Result<NodeRef> {
        let n = self.value(x).len();
        if lo + n > total {
            return Err(Error::Shape {
                op: "scatter_span",
                detail: format!("span {}..{} exceeds total length {}", lo, lo + n, total),
            });
        }
        let mut out = Tensor::zeros(&[total]);
        out.data_mut()[lo..lo + n].copy_from_slice(self.value(x).data());
        Ok(self.push(out, Op::ScatterSpan { x, lo }))
    }

    /// c = sum over l in lo..=hi of weights[l] * m[l, :]
    pub fn weighted_rows(&mut self, weights: NodeRef, m: NodeRef, lo: usize, hi: usize) -> Result<NodeRef> {
        let wt = self.value(weights);
        let mt = self.value(m);
        if mt.shape().len() != 2 || wt.len() != mt.rows() || hi >= mt.rows() || lo > hi {
            return Err(Error::Shape {
                op: "weighted_rows",
                detail: format!(
                    "weights of length {} over rows {}..={} of shape {:?}",
                    wt.len(),
                    lo,
                    hi,
                    mt.shape()
                ),
            });
        }
        let d = mt.cols();
        let mut out = Tensor::zeros(&[d]);
        for l in lo..=hi {
            let a = wt.data()[l];
            for (o, v) in out.data_mut().iter_mut().zip(mt.row(l)) {
                *o += a * v;
            }
        }
        Ok(self.push(out, Op::WeightedRows { weights, m, lo, hi }))
    }

    /// Reverse-mode pass from a scalar loss node. Parameter gradients are
    /// accumulated (added) into the store; callers zero them beforehand.
    pub fn backward(&self, loss: NodeRef, store: &mut ParamStore) -> Result<()> {
        let lnode = &self.nodes[loss.0];
        if matches!(lnode.op, Op::Leaf | Op::Param(_)) {
            return Err(Error::EmptyGraph);
        }
        if lnode.value.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", lnode.value.shape()),
            });
        }

        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn slot<'a>(grads: &'a mut [Option<Tensor>], r: NodeRef, shape: &[usize]) -> &'a mut Tensor {
            grads[r.0].get_or_insert_with(|| Tensor::zeros(shape))
        }

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => {
                    let g = store.get_mut(*pid);
                    for (d, v) in g.grad.data_mut().iter_mut().zip(gout.data()) {
                        *d += v;
                    }
                }
                Op::MatVec { w, x } => {
                    let wv = &self.nodes[w.0].value;
                    let xv = &self.nodes[x.0].value;
                    tensor::outer_accum(
                        slot(&mut grads, *w, wv.shape()).data_mut(),
                        gout.data(),
                        xv.data(),
                    );
                    tensor::matvec_t_accum(
                        slot(&mut grads, *x, xv.shape()).data_mut(),
                        wv,
                        gout.data(),
                    );
                }
                Op::Affine { w, x, b } => {
                    let wv = &self.nodes[w.0].value;
                    let xv = &self.nodes[x.0].value;
                    tensor::outer_accum(
                        slot(&mut grads, *w, wv.shape()).data_mut(),
                        gout.data(),
                        xv.data(),
                    );
                    tensor::matvec_t_accum(
                        slot(&mut grads, *x, xv.shape()).data_mut(),
                        wv,
                        gout.data(),
                    );
                    let bshape = self.nodes[b.0].value.shape().to_vec();
                    for (d, v) in slot(&mut grads, *b, &bshape)
                        .data_mut()
                        .iter_mut()
                        .zip(gout.data())
                    {
                        *d += v;
                    }
                }
                Op::Add(a, b) => {
                    let shape = node.value.shape().to_vec();
                    for (d, v) in slot(&mut grads, *a, &shape).data_mut().iter_mut().zip(gout.data()) {
                        *d += v;
                    }
                    for (d, v) in slot(&mut grads, *b, &shape).data_mut().iter_mut().zip(gout.data()) {
                        *d += v;
                    }
                }
                Op::Sub(a, b) => {
                    let shape = node.value.shape().to_vec();
                    for (d, v) in slot(&mut grads, *a, &shape).data_mut().iter_mut().zip(gout.data()) {
                        *d += v;
                    }
                    for (d, v) in slot(&mut grads, *b, &shape).data_mut().iter_mut().zip(gout.data()) {
                        *d -= v;
                    }
                }
                Op::Mul(a, b) => {
                    let shape = node.value.shape().to_vec();
                    let av = self.nodes[a.0].value.data().to_vec();
                    let bv = self.nodes[b.0].value.data().to_vec();
                    {
                        let ga = slot(&mut grads, *a, &shape).data_mut();
                        for i in 0..ga.len() {
                            ga[i] += bv[i] * gout.data()[i];
                        }
                    }
                    {
                        let gb = slot(&mut grads, *b, &shape).data_mut();
                        for i in 0..gb.len() {
                            gb[i] += av[i] * gout.data()[i];
                        }
                    }
                }
                Op::Blend { gate, a, b } => {
                    let shape = node.value.shape().to_vec();
                    let gv = self.nodes[gate.0].value.data().to_vec();
                    let av = self.nodes[a.0].value.data().to_vec();
                    let bv = self.nodes[b.0].value.data().to_vec();
                    {
                        let gg = slot(&mut grads, *gate, &shape).data_mut();
                        for i in 0..gg.len() {
                            gg[i] += (bv[i] - av[i]) * gout.data()[i];
                        }
                    }
                    {
                        let ga = slot(&mut grads, *a, &shape).data_mut();
                        for i in 0..ga.len() {
                            ga[i] += (1.0 - gv[i]) * gout.data()[i];
                        }
                    }
                    {
                        let gb = slot(&mut grads, *b, &shape).data_mut();
                        for i in 0..gb.len() {
                            gb[i] += gv[i] * gout.data()[i];
                        }
                    }
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    let shape = node.value.shape().to_vec();
                    let gx = slot(&mut grads, *x, &shape).data_mut();
                    for i in 0..gx.len() {
                        gx[i] += (1.0 - y[i] * y[i]) * gout.data()[i];
                    }
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let shape = node.value.shape().to_vec();
                    let gx = slot(&mut grads, *x, &shape).data_mut();
                    for i in 0..gx.len() {
                        gx[i] += y[i] * (1.0 - y[i]) * gout.data()[i];
                    }
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let shape = node.value.shape().to_vec();
                    let inner: Real = y.iter().zip(gout.data()).map(|(a, b)| a * b).sum();
                    let gx = slot(&mut grads, *x, &shape).data_mut();
                    for i in 0..gx.len() {
                        gx[i] += y[i] * (gout.data()[i] - inner);
                    }
                }
                Op::LogSoftmax(x) => {
                    let y = node.value.data();
                    let shape = node.value.shape().to_vec();
                    let gsum: Real = gout.data().iter().sum();
                    let gx = slot(&mut grads, *x, &shape).data_mut();
                    for i in 0..gx.len() {
                        gx[i] += gout.data()[i] - y[i].exp() * gsum;
                    }
                }
                Op::Pick { x, index } => {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    slot(&mut grads, *x, &shape).data_mut()[*index] += gout.item();
                }
                Op::Dot(a, b) => {
                    let av = self.nodes[a.0].value.data().to_vec();
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let g = gout.item();
                    {
                        let ga = slot(&mut grads, *a, &[av.len()]).data_mut();
                        for i in 0..ga.len() {
                            ga[i] += bv[i] * g;
                        }
                    }
                    {
                        let gb = slot(&mut grads, *b, &[bv.len()]).data_mut();
                        for i in 0..gb.len() {
                            gb[i] += av[i] * g;
                        }
                    }
                }
                Op::Scale { x, c } => {
                    let shape = node.value.shape().to_vec();
                    let gx = slot(&mut grads, *x, &shape).data_mut();
                    for i in 0..gx.len() {
                        gx[i] += c * gout.data()[i];
                    }
                }
                Op::Concat(a, b) => {
                    let na = self.nodes[a.0].value.len();
                    let nb = self.nodes[b.0].value.len();
                    {
                        let ga = slot(&mut grads, *a, &[na]).data_mut();
                        for i in 0..na {
                            ga[i] += gout.data()[i];
                        }
                    }
                    {
                        let gb = slot(&mut grads, *b, &[nb]).data_mut();
                        for i in 0..nb {
                            gb[i] += gout.data()[na + i];
                        }
                    }
                }
                Op::Conv1d { q, signal } => {
                    let qv = &self.nodes[q.0].value;
                    let (k, f) = (qv.shape()[0], qv.shape()[1]);
                    let sv = self.nodes[signal.0].value.data().to_vec();
                    let qshape = qv.shape().to_vec();
                    tensor::conv1d_accum_q(
                        slot(&mut grads, *q, &qshape).data_mut(),
                        &gout,
                        &sv,
                        k,
                        f,
                    );
                    let qv = self.nodes[q.0].value.clone();
                    tensor::conv1d_accum_signal(
                        slot(&mut grads, *signal, &[sv.len()]).data_mut(),
                        &gout,
                        &qv,
                        k,
                        f,
                    );
                }
                Op::Row { m, index } => {
                    let shape = self.nodes[m.0].value.shape().to_vec();
                    let d = shape[1];
                    let gm = slot(&mut grads, *m, &shape).data_mut();
                    for (i, v) in gout.data().iter().enumerate() {
                        gm[index * d + i] += v;
                    }
                }
                Op::StackRows(rows) => {
                    let d = node.value.cols();
                    for (t, &r) in rows.iter().enumerate() {
                        let gr = slot(&mut grads, r, &[d]).data_mut();
                        for i in 0..d {
                            gr[i] += gout.data()[t * d + i];
                        }
                    }
                }
                Op::StackScalars(xs) => {
                    for (t, &r) in xs.iter().enumerate() {
                        slot(&mut grads, r, &[1]).data_mut()[0] += gout.data()[t];
                    }
                }
                Op::ScatterSpan { x, lo } => {
                    let n = self.nodes[x.0].value.len();
                    let gx = slot(&mut grads, *x, &[n]).data_mut();
                    for i in 0..n {
                        gx[i] += gout.data()[lo + i];
                    }
                }
                Op::WeightedRows { weights, m, lo, hi } => {
                    let mt = self.nodes[m.0].value.clone();
                    let wt = self.nodes[weights.0].value.data().to_vec();
                    let d = mt.cols();
                    {
                        let gw = slot(&mut grads, *weights, &[wt.len()]).data_mut();
                        for l in *lo..=*hi {
                            let row = mt.row(l);
                            gw[l] += row.iter().zip(gout.data()).map(|(a, b)| a * b).sum::<Real>();
                        }
                    }
                    {
                        let shape = mt.shape().to_vec();
                        let gm = slot(&mut grads, *m, &shape).data_mut();
                        for l in *lo..=*hi {
                            let a = wt[l];
                            for i in 0..d {
                                gm[l * d + i] += a * gout.data()[i];
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
