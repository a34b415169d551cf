//! A small reverse-mode differentiation engine over dense `f64` matrices.
//!
//! A [`Graph`] is declared once (inputs, parameters, ops) and then evaluated
//! repeatedly with [`Graph::forward`] and [`Graph::backward`]; values and
//! adjoints live in per-node buffers that are reused between evaluations.
//! Parameters are stored outside the graph in a [`ParamStore`] so that many
//! graphs can share them.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Rng;

pub const WEIGHTS_FORMAT: &str = "scpo-weights-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {}", values.len())));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, values: vec![0.0; n] }
    }

    pub fn column(values: Vec<f64>) -> Self {
        Tensor { shape: vec![values.len(), 1], values }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1, 1], values: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [r] => (*r, 1),
            [r, c] => (*r, *c),
            s => (s[0], s[1..].iter().product()),
        }
    }
}

pub type ParamId = usize;

/// Named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a `rows x cols` parameter drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> ParamId {
        let a = 1.0 / (fan_in.max(1) as f64).sqrt();
        let values = (0..rows * cols).map(|_| rng.random_range(-a..=a)).collect();
        self.add(name, Tensor { shape: vec![rows, cols], values })
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> ParamId {
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.len()]).collect()
    }

    /// Checkpoint JSON with optional free-form metadata.
    pub fn to_json(&self, meta: serde_json::Value) -> Result<String> {
        let params: BTreeMap<&str, &Tensor> =
            self.names.iter().map(String::as_str).zip(&self.tensors).collect();
        let doc = serde_json::json!({ "format": WEIGHTS_FORMAT, "params": params, "meta": meta });
        Ok(serde_json::to_string(&doc)?)
    }

    /// Loads values into an existing store; every parameter must be present
    /// with a matching shape.
    pub fn load_json(&mut self, text: &str) -> Result<serde_json::Value> {
        #[derive(Deserialize)]
        struct Doc {
            format: String,
            params: BTreeMap<String, Tensor>,
            #[serde(default)]
            meta: serde_json::Value,
        }
        let doc: Doc = serde_json::from_str(text)?;
        if doc.format != WEIGHTS_FORMAT {
            return Err(Error::Format { expected: WEIGHTS_FORMAT.into(), found: doc.format });
        }
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = doc
                .params
                .get(name)
                .ok_or_else(|| Error::InvalidInput(format!("checkpoint lacks parameter {name}")))?;
            if src.shape != t.shape || src.values.len() != t.values.len() {
                return Err(Error::Shape(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    src.shape, t.shape
                )));
            }
            t.values.clone_from(&src.values);
        }
        Ok(doc.meta)
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
        std::fs::write(path, self.to_json(meta)?)?;
        Ok(())
    }
}

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Input(usize),
    Param(ParamId),
    Const,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    PosPart(NodeId),
    Concat(Vec<NodeId>),
    Slice(NodeId, usize),
    Sum(NodeId),
    Scale(NodeId, f64),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
}

/// Static computation graph; node ids are topologically ordered by
/// construction.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: Vec<NodeId>,
    vals: Vec<Vec<f64>>,
    adj: Vec<Vec<f64>>,
    param_nodes: HashMap<ParamId, NodeId>,
    evaluated: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> NodeId {
        self.nodes.push(Node { op, rows, cols });
        self.vals.push(vec![0.0; rows * cols]);
        self.adj.push(vec![0.0; rows * cols]);
        self.evaluated = false;
        self.nodes.len() - 1
    }

    fn shape(&self, n: NodeId) -> (usize, usize) {
        (self.nodes[n].rows, self.nodes[n].cols)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, rows: usize, cols: usize) -> NodeId {
        let k = self.inputs.len();
        let id = self.push(Op::Input(k), rows, cols);
        self.inputs.push(id);
        id
    }

    /// Node holding parameter `id`; repeated calls share one node.
    pub fn param(&mut self, params: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let (r, c) = params.get(id).dims();
        let n = self.push(Op::Param(id), r, c);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        let (r, c) = t.dims();
        let id = self.push(Op::Const, r, c);
        self.vals[id].clone_from(&t.values);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::Shape(format!("matmul {ar}x{ac} by {br}x{bc}")));
        }
        Ok(self.push(Op::MatMul(a, b), ar, bc))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape(format!("{what} of {sa:?} and {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape(a, b, "add")?;
        Ok(self.push(Op::Add(a, b), r, c))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape(a, b, "sub")?;
        Ok(self.push(Op::Sub(a, b), r, c))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b), r, c))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Tanh(a), r, c)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Sigmoid(a), r, c)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Relu(a), r, c)
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn pospart(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::PosPart(a), r, c)
    }

    /// Stacks nodes with equal column counts vertically.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = parts.first().map(|&p| self.shape(p).1).unwrap_or(1);
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(Error::Shape(format!("concat of {c} and {cols} columns")));
            }
            rows += r;
        }
        Ok(self.push(Op::Concat(parts.to_vec()), rows, cols))
    }

    /// Rows `start..start + len` of `a`.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(Error::Shape(format!("slice {start}..{} of {r} rows", start + len)));
        }
        Ok(self.push(Op::Slice(a, start), len, c))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), 1, 1)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Scale(a, s), r, c)
    }

    /// `W x + b` with parameters `w` (out x in) and `b` (out x 1).
    pub fn affine(&mut self, params: &ParamStore, w: ParamId, b: ParamId, x: NodeId) -> Result<NodeId> {
        let wn = self.param(params, w);
        let bn = self.param(params, b);
        let y = self.matmul(wn, x)?;
        self.add(y, bn)
    }

    pub fn value(&self, n: NodeId) -> &[f64] {
        &self.vals[n]
    }

    /// Evaluates every node with the given input tensors; returns the last node.
    pub fn forward(&mut self, params: &ParamStore, inputs: &[Tensor]) -> Result<Tensor> {
        let slices: Vec<&[f64]> = inputs.iter().map(|t| t.values.as_slice()).collect();
        self.forward_slices(params, &slices)?;
        let last = self.nodes.len() - 1;
        let (r, c) = self.shape(last);
        Ok(Tensor { shape: vec![r, c], values: self.vals[last].clone() })
    }

    /// As [`Graph::forward`] but with flat input buffers and no output copy.
    pub fn forward_slices(&mut self, params: &ParamStore, inputs: &[&[f64]]) -> Result<()> {
        if inputs.len() != self.inputs.len() {
            return Err(Error::Shape(format!("graph takes {} inputs, got {}", self.inputs.len(), inputs.len())));
        }
        if self.nodes.is_empty() {
            return Err(Error::Shape("empty graph".into()));
        }
        for n in 0..self.nodes.len() {
            let (rows, cols) = self.shape(n);
            let (done, rest) = self.vals.split_at_mut(n);
            let out = &mut rest[0];
            match &self.nodes[n].op {
                Op::Input(k) => {
                    let src = inputs[*k];
                    if src.len() != rows * cols {
                        return Err(Error::Shape(format!(
                            "input {k} expects {} values, got {}",
                            rows * cols,
                            src.len()
                        )));
                    }
                    out.copy_from_slice(src);
                }
                Op::Param(p) => {
                    let t = params.get(*p);
                    if t.len() != out.len() {
                        return Err(Error::Shape(format!("parameter {} changed shape", params.name(*p))));
                    }
                    out.copy_from_slice(&t.values);
                }
                Op::Const => {}
                Op::MatMul(a, b) if cols == 1 => {
                    let k = self.nodes[*a].cols;
                    let (av, bv) = (&done[*a], &done[*b]);
                    for (o, arow) in out.iter_mut().zip(av.chunks_exact(k)) {
                        *o = arow.iter().zip(bv.iter()).map(|(x, y)| x * y).sum();
                    }
                }
                Op::MatMul(a, b) => {
                    let k = self.nodes[*a].cols;
                    let (av, bv) = (&done[*a], &done[*b]);
                    out.iter_mut().for_each(|v| *v = 0.0);
                    for i in 0..rows {
                        let orow = &mut out[i * cols..(i + 1) * cols];
                        for (p, &aip) in av[i * k..(i + 1) * k].iter().enumerate() {
                            if aip != 0.0 {
                                for (o, &bpj) in orow.iter_mut().zip(&bv[p * cols..(p + 1) * cols]) {
                                    *o += aip * bpj;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => zip_into(out, &done[*a], &done[*b], |x, y| x + y),
                Op::Sub(a, b) => zip_into(out, &done[*a], &done[*b], |x, y| x - y),
                Op::Mul(a, b) => zip_into(out, &done[*a], &done[*b], |x, y| x * y),
                Op::Tanh(a) => map_into(out, &done[*a], f64::tanh),
                Op::Sigmoid(a) => map_into(out, &done[*a], sigmoid),
                Op::Relu(a) | Op::PosPart(a) => map_into(out, &done[*a], |x| x.max(0.0)),
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let v = &done[p];
                        out[off..off + v.len()].copy_from_slice(v);
                        off += v.len();
                    }
                }
                Op::Slice(a, start) => {
                    let src = &done[*a];
                    out.copy_from_slice(&src[start * cols..(start + rows) * cols]);
                }
                Op::Sum(a) => out[0] = done[*a].iter().sum(),
                Op::Scale(a, s) => map_into(out, &done[*a], |x| s * x),
            }
        }
        self.evaluated = true;
        Ok(())
    }

    /// Scalar value of the last node after a forward pass.
    pub fn output_scalar(&self) -> f64 {
        self.vals[self.nodes.len() - 1][0]
    }

    /// Reverse pass from the (scalar) last node; adds parameter gradients
    /// into `grads`, indexed like the parameter store.
    pub fn backward_into(&mut self, grads: &mut [Vec<f64>]) -> Result<()> {
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        let last = self.nodes.len() - 1;
        if self.vals[last].len() != 1 {
            return Err(Error::Shape("backward needs a scalar output".into()));
        }
        for a in self.adj.iter_mut() {
            a.iter_mut().for_each(|v| *v = 0.0);
        }
        self.adj[last][0] = 1.0;
        for n in (0..self.nodes.len()).rev() {
            let (rows, cols) = self.shape(n);
            let (lower, upper) = self.adj.split_at_mut(n);
            let g = &upper[0];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let vals = &self.vals;
            match &self.nodes[n].op {
                Op::Input(_) | Op::Const => {}
                Op::Param(p) => {
                    for (d, &s) in grads[*p].iter_mut().zip(g) {
                        *d += s;
                    }
                }
                Op::MatMul(a, b) if cols == 1 && *a != *b => {
                    let k = self.nodes[*a].cols;
                    let (av, bv) = (&vals[*a], &vals[*b]);
                    // dA = g b^T, db = A^T g
                    let da = &mut lower[*a];
                    for (i, &gi) in g.iter().enumerate() {
                        if gi != 0.0 {
                            for (d, &bp) in da[i * k..(i + 1) * k].iter_mut().zip(bv.iter()) {
                                *d += gi * bp;
                            }
                        }
                    }
                    let db = &mut lower[*b];
                    for (i, &gi) in g.iter().enumerate() {
                        if gi != 0.0 {
                            for (d, &ap) in db.iter_mut().zip(&av[i * k..(i + 1) * k]) {
                                *d += gi * ap;
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let k = self.nodes[*a].cols;
                    let (av, bv) = (&vals[*a], &vals[*b]);
                    if *a != *b {
                        // dA = G B^T
                        let da = &mut lower[*a];
                        for i in 0..rows {
                            let grow = &g[i * cols..(i + 1) * cols];
                            for p in 0..k {
                                let brow = &bv[p * cols..(p + 1) * cols];
                                da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                        // dB = A^T G
                        let db = &mut lower[*b];
                        for i in 0..rows {
                            let grow = &g[i * cols..(i + 1) * cols];
                            for p in 0..k {
                                let aip = av[i * k + p];
                                if aip != 0.0 {
                                    for (d, &gv) in db[p * cols..(p + 1) * cols].iter_mut().zip(grow) {
                                        *d += aip * gv;
                                    }
                                }
                            }
                        }
                    } else {
                        let mut tmp = vec![0.0; av.len()];
                        for i in 0..rows {
                            for p in 0..k {
                                for j in 0..cols {
                                    tmp[i * k + p] += g[i * cols + j] * bv[p * cols + j];
                                    tmp[p * cols + j] += av[i * k + p] * g[i * cols + j];
                                }
                            }
                        }
                        for (d, t) in lower[*a].iter_mut().zip(tmp) {
                            *d += t;
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut lower[*a], g, |x| x);
                    acc(&mut lower[*b], g, |x| x);
                }
                Op::Sub(a, b) => {
                    acc(&mut lower[*a], g, |x| x);
                    acc(&mut lower[*b], g, |x| -x);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&vals[*a], &vals[*b]);
                    for k in 0..g.len() {
                        let (ga, gb) = (g[k] * bv[k], g[k] * av[k]);
                        lower[*a][k] += ga;
                        lower[*b][k] += gb;
                    }
                }
                Op::Tanh(a) => {
                    let y = &vals[n];
                    for k in 0..g.len() {
                        lower[*a][k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &vals[n];
                    for k in 0..g.len() {
                        lower[*a][k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
                Op::Relu(a) | Op::PosPart(a) => {
                    let x = &vals[*a];
                    for k in 0..g.len() {
                        if x[k] > 0.0 {
                            lower[*a][k] += g[k];
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = lower[p].len();
                        acc(&mut lower[p], &g[off..off + len], |x| x);
                        off += len;
                    }
                }
                Op::Slice(a, start) => {
                    let dst = &mut lower[*a][start * cols..(start + rows) * cols];
                    acc(dst, g, |x| x);
                }
                Op::Sum(a) => {
                    let s = g[0];
                    lower[*a].iter_mut().for_each(|d| *d += s);
                }
                Op::Scale(a, s) => acc(&mut lower[*a], g, |x| s * x),
            }
        }
        Ok(())
    }

    /// Reverse pass returning fresh parameter gradients.
    pub fn backward(&mut self, params: &ParamStore) -> Result<Vec<Vec<f64>>> {
        let mut grads = params.zero_grads();
        self.backward_into(&mut grads)?;
        Ok(grads)
    }

    /// Adjoint of `n` from the last backward pass.
    pub fn adjoint(&self, n: NodeId) -> &[f64] {
        &self.adj[n]
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_into(out: &mut [f64], a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o = f(x, y);
    }
}

fn map_into(out: &mut [f64], a: &[f64], f: impl Fn(f64) -> f64) {
    for (o, &x) in out.iter_mut().zip(a) {
        *o = f(x);
    }
}

fn acc(dst: &mut [f64], g: &[f64], f: impl Fn(f64) -> f64) {
    for (d, &x) in dst.iter_mut().zip(g) {
        *d += f(x);
    }
}

/// Parameter ids of one LSTM cell: `w` is `4H x (in + H)`, `b` is `4H x 1`,
/// gate blocks ordered input, forget, output, candidate.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    pub fn new(params: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let fan_in = input + hidden;
        let w = params.add_uniform(&format!("{prefix}.w"), 4 * hidden, fan_in, fan_in, rng);
        let b = params.add_uniform(&format!("{prefix}.b"), 4 * hidden, 1, fan_in, rng);
        LstmParams { w, b, hidden }
    }
}

/// Adds one LSTM step to `g`; returns `(h, c)`.
pub fn lstm_cell(
    g: &mut Graph,
    params: &ParamStore,
    p: &LstmParams,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let hs = p.hidden;
    let xh = g.concat(&[x, h_prev])?;
    let z = g.affine(params, p.w, p.b, xh)?;
    let zi = g.slice(z, 0, hs)?;
    let zf = g.slice(z, hs, hs)?;
    let zo = g.slice(z, 2 * hs, hs)?;
    let zg = g.slice(z, 3 * hs, hs)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let o = g.sigmoid(zo);
    let cand = g.tanh(zg);
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// Adds the pinball loss `sum_b sum_t b (y - p)^+ + (1 - b) (p - y)^+`.
///
/// `pred` and `target` are `len x 1` nodes laid out horizon-major
/// (`t * |B| + b`); `levels` repeats the quantile level per entry.
pub fn quantile_loss_node(g: &mut Graph, pred: NodeId, target: NodeId, levels: &[f64]) -> Result<NodeId> {
    let under_w = g.constant(&Tensor::column(levels.to_vec()));
    let over_w = g.constant(&Tensor::column(levels.iter().map(|b| 1.0 - b).collect()));
    let diff = g.sub(target, pred)?;
    let under = g.pospart(diff);
    let neg = g.scale(diff, -1.0);
    let over = g.pospart(neg);
    let a = g.mul(under_w, under)?;
    let b = g.mul(over_w, over)?;
    let s = g.add(a, b)?;
    Ok(g.sum(s))
}

/// Pinball loss of `pred[t][b]` against `target[t]`.
pub fn quantile_loss(pred: &[Vec<f64>], target: &[f64], quantiles: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.iter().any(|row| row.len() != quantiles.len()) {
        return Err(Error::Shape("quantile_loss: prediction grid does not match targets".into()));
    }
    if quantiles.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
        return Err(Error::InvalidInput("quantile levels must lie in (0, 1)".into()));
    }
    let mut loss = 0.0;
    for (row, &y) in pred.iter().zip(target) {
        for (&p, &b) in row.iter().zip(quantiles) {
            loss += b * (y - p).max(0.0) + (1.0 - b) * (p - y).max(0.0);
        }
    }
    Ok(loss)
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zero_grads(),
            v: params.zero_grads(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, g) in grads.iter().enumerate() {
            let p = &mut params.get_mut(k).values;
            for j in 0..g.len() {
                let m = &mut self.m[k][j];
                let v = &mut self.v[k][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g[j];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g[j] * g[j];
                p[j] -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng_from_seed;

    /// Central finite differences of the graph output w.r.t. every parameter
    /// value; returns the worst relative error against `backward`.
    pub(crate) fn gradient_check(g: &mut Graph, params: &mut ParamStore, inputs: &[Tensor]) -> f64 {
        g.forward(params, inputs).unwrap();
        let grads = g.backward(params).unwrap();
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for k in 0..params.len() {
            for j in 0..params.get(k).len() {
                let orig = params.get(k).values[j];
                params.get_mut(k).values[j] = orig + eps;
                let up = g.forward(params, inputs).unwrap().values[0];
                params.get_mut(k).values[j] = orig - eps;
                let down = g.forward(params, inputs).unwrap().values[0];
                params.get_mut(k).values[j] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = grads[k][j];
                let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-3));
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn identity_and_matmul_identity() {
        let mut ps = ParamStore::new();
        let eye = ps.add("eye", Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let mut g = Graph::new();
        let x = g.input(3, 1);
        let w = g.param(&ps, eye);
        g.matmul(w, x).unwrap();
        let out = g.forward(&ps, &[Tensor::column(vec![1.0, -2.0, 3.5])]).unwrap();
        assert_eq!(out.values, vec![1.0, -2.0, 3.5]);

        let mut id = Graph::new();
        id.input(2, 1);
        let v = Tensor::column(vec![4.0, 5.0]);
        assert_eq!(id.forward(&ps, &[v.clone()]).unwrap().values, v.values);
    }

    #[test]
    fn pospart_forward() {
        let mut g = Graph::new();
        let x = g.input(1, 1);
        g.pospart(x);
        assert_eq!(g.forward(&ParamStore::new(), &[Tensor::scalar(-2.0)]).unwrap().values, vec![0.0]);
    }

    #[test]
    fn square_gradient() {
        let mut ps = ParamStore::new();
        let x = ps.add("x", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let xn = g.param(&ps, x);
        g.mul(xn, xn).unwrap();
        g.forward(&ps, &[]).unwrap();
        assert_eq!(g.backward(&ps).unwrap()[x], vec![6.0]);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut ps = ParamStore::new();
        let x = ps.add("x", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let xn = g.param(&ps, x);
        let z = g.scale(xn, 0.0);
        g.sum(z);
        g.forward(&ps, &[]).unwrap();
        assert_eq!(g.backward(&ps).unwrap()[x], vec![0.0]);
    }

    #[test]
    fn backward_before_forward_fails() {
        let mut ps = ParamStore::new();
        let x = ps.add("x", Tensor::scalar(1.0));
        let mut g = Graph::new();
        let n = g.param(&ps, x);
        g.sum(n);
        assert!(matches!(g.backward(&ps), Err(Error::NotEvaluated)));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut g = Graph::new();
        let a = g.input(2, 1);
        let b = g.input(3, 1);
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, b).is_err());
        let mut g = Graph::new();
        g.input(2, 1);
        assert!(g.forward(&ParamStore::new(), &[Tensor::column(vec![1.0])]).is_err());
    }

    #[test]
    fn quantile_loss_examples() {
        assert!((quantile_loss(&[vec![0.0]], &[2.0], &[0.5]).unwrap() - 1.0).abs() < 1e-12);
        assert!((quantile_loss(&[vec![1.0]], &[0.0], &[0.9]).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(quantile_loss(&[vec![3.0, 3.0]], &[3.0], &[0.1, 0.9]).unwrap(), 0.0);
    }

    #[test]
    fn quantile_loss_node_matches_function() {
        let levels = [0.1, 0.5, 0.9, 0.1, 0.5, 0.9];
        let pred = vec![1.0, 2.0, 3.0, 0.0, 5.0, 7.0];
        let target = vec![2.0, 2.0, 2.0, 4.0, 4.0, 4.0];
        let mut g = Graph::new();
        let p = g.input(6, 1);
        let t = g.input(6, 1);
        quantile_loss_node(&mut g, p, t, &levels).unwrap();
        let v = g.forward(&ParamStore::new(), &[Tensor::column(pred.clone()), Tensor::column(target)]).unwrap();
        let grid = vec![pred[0..3].to_vec(), pred[3..6].to_vec()];
        let f = quantile_loss(&grid, &[2.0, 4.0], &[0.1, 0.5, 0.9]).unwrap();
        assert!((v.values[0] - f).abs() < 1e-12);
    }

    #[test]
    fn adam_examples() {
        let mut ps = ParamStore::new();
        let x = ps.add("x", Tensor::scalar(2.0));
        let mut opt = Adam::new(&ps, 0.01);
        opt.step(&mut ps, &[vec![0.0]]);
        assert_eq!(ps.get(x).values[0], 2.0);
        let mut fresh = Adam::new(&ps, 0.01);
        fresh.step(&mut ps, &[vec![5.0]]);
        assert!((ps.get(x).values[0] - (2.0 - 0.01)).abs() < 1e-6);

        let mut ps = ParamStore::new();
        let x = ps.add("x", Tensor::column(vec![1.0, -0.5]));
        let mut opt = Adam::new(&ps, 1e-2);
        for _ in 0..500 {
            let g: Vec<f64> = ps.get(x).values.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut ps, &[g]);
        }
        // The bowl minimum is the origin.
        assert!(ps.get(x).values.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn lstm_zero_weights_and_forget_saturation() {
        let mut rng = rng_from_seed(1);
        let mut ps = ParamStore::new();
        let p = LstmParams::new(&mut ps, "l", 2, 3, &mut rng);
        ps.get_mut(p.w).values.iter_mut().for_each(|v| *v = 0.0);
        ps.get_mut(p.b).values.iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::new();
        let x = g.input(2, 1);
        let h0 = g.input(3, 1);
        let c0 = g.input(3, 1);
        let (h, c) = lstm_cell(&mut g, &ps, &p, x, h0, c0).unwrap();
        let ins = [Tensor::column(vec![1.0, 2.0]), Tensor::zeros(vec![3, 1]), Tensor::zeros(vec![3, 1])];
        g.forward(&ps, &ins).unwrap();
        assert!(g.value(h).iter().chain(g.value(c)).all(|&v| v == 0.0));

        for k in 3..6 {
            ps.get_mut(p.b).values[k] = 50.0;
        }
        let cprev = vec![0.7, -1.2, 2.0];
        let ins = [Tensor::column(vec![1.0, 2.0]), Tensor::zeros(vec![3, 1]), Tensor::column(cprev.clone())];
        g.forward(&ps, &ins).unwrap();
        for (a, b) in g.value(c).iter().zip(&cprev) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn lstm_unrolled_gradient_check() {
        let mut rng = rng_from_seed(3);
        let mut ps = ParamStore::new();
        let p = LstmParams::new(&mut ps, "l", 2, 3, &mut rng);
        let mut g = Graph::new();
        let mut h = g.constant(&Tensor::zeros(vec![3, 1]));
        let mut c = h;
        let mut xs = Vec::new();
        for _ in 0..5 {
            let x = g.input(2, 1);
            xs.push(Tensor::column(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]));
            (h, c) = lstm_cell(&mut g, &ps, &p, x, h, c).unwrap();
        }
        let sq = g.mul(h, h).unwrap();
        g.sum(sq);
        assert!(gradient_check(&mut g, &mut ps, &xs) <= 1e-4);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = rng_from_seed(9);
        let mut ps = ParamStore::new();
        ps.add_uniform("a", 2, 3, 3, &mut rng);
        ps.add_uniform("b", 2, 1, 3, &mut rng);
        let text = ps.to_json(serde_json::json!({"epochs": 1})).unwrap();
        assert!(text.contains("scpo-weights-v1"));
        let mut other = ps.clone();
        other.get_mut(0).values.iter_mut().for_each(|v| *v = 0.0);
        let meta = other.load_json(&text).unwrap();
        assert_eq!(other, ps);
        assert_eq!(meta["epochs"], 1);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = rng_from_seed(4);
        let mut ps = ParamStore::new();
        let w = ps.add_uniform("w", 4, 3, 3, &mut rng);
        let b = ps.add_uniform("b", 4, 1, 3, &mut rng);
        let mut g = Graph::new();
        let x = g.input(3, 1);
        let y = g.affine(&ps, w, b, x).unwrap();
        g.tanh(y);
        let ins = [Tensor::column(vec![0.3, -0.1, 2.0])];
        let a = g.forward(&ps, &ins).unwrap();
        let b2 = g.forward(&ps, &ins).unwrap();
        assert_eq!(a.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b2.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = rng_from_seed(21);
        for case in 0..40 {
            let mut ps = ParamStore::new();
            let a = ps.add_uniform("a", 3, 1, 1, &mut rng);
            let b = ps.add_uniform("b", 3, 1, 1, &mut rng);
            let w = ps.add_uniform("w", 2, 3, 1, &mut rng);
            let mut g = Graph::new();
            let an = g.param(&ps, a);
            let bn = g.param(&ps, b);
            let wn = g.param(&ps, w);
            let body = match case % 10 {
                0 => g.matmul(wn, an).unwrap(),
                1 => g.add(an, bn).unwrap(),
                2 => g.sub(an, bn).unwrap(),
                3 => g.mul(an, bn).unwrap(),
                4 => g.tanh(an),
                5 => g.sigmoid(an),
                6 => {
                    let s = g.scale(an, 1.7);
                    g.relu(s)
                }
                7 => g.pospart(an),
                8 => {
                    let c = g.concat(&[an, bn]).unwrap();
                    g.slice(c, 2, 3).unwrap()
                }
                _ => g.scale(an, -0.3),
            };
            // Square before summing so linear ops still have input-dependent gradients.
            let sq = g.mul(body, body).unwrap();
            g.sum(sq);
            let err = gradient_check(&mut g, &mut ps, &[]);
            assert!(err <= 1e-4, "case {case}: {err}");
        }
    }
}
