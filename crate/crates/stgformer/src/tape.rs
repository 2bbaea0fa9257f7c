//! Reverse-mode automatic differentiation over a single-threaded tape.
//!
//! Operations are recorded as nodes holding the output value, parent ids,
//! and a local-gradient closure. Parents always have smaller ids than their
//! children, so replaying the node list backward visits operations in exact
//! reverse topological order.
//!
//! Every op validates its result and fails fast on NaN/Inf rather than
//! letting divergence corrupt downstream metrics. The tape also keeps a
//! per-stage multiply-add counter used by the FLOPs analyzer.

use std::sync::Arc;

use crate::error::{Result, StgError};
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapeId(pub(crate) usize);

/// Pipeline stage a multiply-add is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Embedding,
    Propagation,
    Attention,
    Interaction,
    Head,
    Other,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct StageCounts {
    pub embedding: u128,
    pub propagation: u128,
    pub attention: u128,
    pub interaction: u128,
    pub head: u128,
    pub other: u128,
}

impl StageCounts {
    fn add(&mut self, stage: Stage, n: u128) {
        match stage {
            Stage::Embedding => self.embedding += n,
            Stage::Propagation => self.propagation += n,
            Stage::Attention => self.attention += n,
            Stage::Interaction => self.interaction += n,
            Stage::Head => self.head += n,
            Stage::Other => self.other += n,
        }
    }

    pub fn total(&self) -> u128 {
        self.embedding + self.propagation + self.attention + self.interaction + self.head + self.other
    }
}

type BackFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<TapeId>,
    back: Option<BackFn>,
}

pub struct Tape {
    nodes: Vec<Node>,
    stage: Stage,
    counts: StageCounts,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients computed by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: TapeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient data for a leaf, zeros when nothing flowed back to it.
    pub fn data_or_zeros(&self, id: TapeId, numel: usize) -> Vec<f64> {
        match self.get(id) {
            Some(t) => t.data.clone(),
            None => vec![0.0; numel],
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), stage: Stage::Other, counts: StageCounts::default() }
    }

    pub fn set_stage(&mut self, stage: Stage) {
        self.stage = stage;
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn counts(&self) -> &StageCounts {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TapeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<TapeId>, back: Option<BackFn>, op: &str) -> Result<TapeId> {
        if !value.all_finite() {
            return Err(StgError::NonFinite(op.to_string()));
        }
        self.nodes.push(Node { value, parents, back });
        Ok(TapeId(self.nodes.len() - 1))
    }

    // ---- leaves -------------------------------------------------------------

    pub fn leaf(&mut self, t: &Tensor) -> Result<TapeId> {
        let mut v = t.clone();
        v.grad = None;
        self.push(v, vec![], None, "leaf")
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Result<TapeId> {
        self.push(Tensor::zeros(shape), vec![], None, "zeros")
    }

    // ---- elementwise --------------------------------------------------------

    fn same_shape(&self, a: TapeId, b: TapeId, op: &str) -> Result<()> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa != sb {
            return Err(StgError::Shape(format!("{op}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        self.same_shape(a, b, "add")?;
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor { shape: self.value(a).shape.clone(), data, requires_grad: false, grad: None };
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g: &Tensor| vec![g.clone(), g.clone()])),
            "add",
        )
    }

    pub fn sub(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor { shape: self.value(a).shape.clone(), data, requires_grad: false, grad: None };
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g: &Tensor| {
                let neg = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|v| -v).collect(),
                    requires_grad: false,
                    grad: None,
                };
                vec![g.clone(), neg]
            })),
            "sub",
        )
    }

    pub fn mul(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        self.same_shape(a, b, "mul")?;
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let data: Vec<f64> = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        self.counts.add(self.stage, data.len() as u128);
        let out = Tensor { shape: av.shape.clone(), data, requires_grad: false, grad: None };
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g: &Tensor| {
                let da = zip_map(g, &bv, |g, b| g * b);
                let db = zip_map(g, &av, |g, a| g * a);
                vec![da, db]
            })),
            "mul",
        )
    }

    pub fn div(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        self.same_shape(a, b, "div")?;
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let data: Vec<f64> = av.data.iter().zip(&bv.data).map(|(x, y)| x / y).collect();
        self.counts.add(self.stage, data.len() as u128);
        let out = Tensor { shape: av.shape.clone(), data, requires_grad: false, grad: None };
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g: &Tensor| {
                let da = zip_map(g, &bv, |g, b| g / b);
                let db = Tensor {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(av.data.iter().zip(&bv.data))
                        .map(|(g, (a, b))| -g * a / (b * b))
                        .collect(),
                    requires_grad: false,
                    grad: None,
                };
                vec![da, db]
            })),
            "div",
        )
    }

    pub fn scale(&mut self, a: TapeId, c: f64) -> Result<TapeId> {
        let av = self.value(a);
        let out = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|v| v * c).collect(),
            requires_grad: false,
            grad: None,
        };
        self.counts.add(self.stage, out.data.len() as u128);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                vec![Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|v| v * c).collect(),
                    requires_grad: false,
                    grad: None,
                }]
            })),
            "scale",
        )
    }

    pub fn abs(&mut self, a: TapeId) -> Result<TapeId> {
        let av = self.value(a).clone();
        let out = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|v| v.abs()).collect(),
            requires_grad: false,
            grad: None,
        };
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                // subgradient 0 at the kink
                vec![zip_map(g, &av, |g, a| g * a.signum() * (a != 0.0) as u8 as f64)]
            })),
            "abs",
        )
    }

    pub fn sqrt(&mut self, a: TapeId) -> Result<TapeId> {
        let av = self.value(a);
        let data: Vec<f64> = av.data.iter().map(|v| v.sqrt()).collect();
        let out = Tensor { shape: av.shape.clone(), data: data.clone(), requires_grad: false, grad: None };
        let y = out.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Tensor| vec![zip_map(g, &y, |g, y| 0.5 * g / y)])),
            "sqrt",
        )
    }

    /// Broadcast-add a `[C]` bias over the leading axes of `a` (last extent C).
    pub fn add_bias(&mut self, a: TapeId, bias: TapeId) -> Result<TapeId> {
        let av = self.value(a);
        let bv = self.value(bias);
        let c = *av.shape.last().ok_or_else(|| StgError::Shape("add_bias on scalar".into()))?;
        if bv.shape != [c] {
            return Err(StgError::Shape(format!(
                "add_bias: bias {:?} does not match last extent of {:?}",
                bv.shape, av.shape
            )));
        }
        let mut data = av.data.clone();
        for chunk in data.chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(&bv.data) {
                *x += b;
            }
        }
        let out = Tensor { shape: av.shape.clone(), data, requires_grad: false, grad: None };
        self.push(
            out,
            vec![a, bias],
            Some(Box::new(move |g: &Tensor| {
                let mut db = vec![0.0; c];
                for chunk in g.data.chunks(c) {
                    for (acc, v) in db.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                vec![
                    g.clone(),
                    Tensor { shape: vec![c], data: db, requires_grad: false, grad: None },
                ]
            })),
            "add_bias",
        )
    }

    // ---- shape ops ----------------------------------------------------------

    /// Materialized axis permutation: output axis `i` takes input axis `perm[i]`.
    pub fn permute(&mut self, a: TapeId, perm: &[usize]) -> Result<TapeId> {
        let av = self.value(a);
        if perm.len() != av.rank() || {
            let mut seen = perm.to_vec();
            seen.sort_unstable();
            seen != (0..av.rank()).collect::<Vec<_>>()
        } {
            return Err(StgError::Contract(format!(
                "invalid permutation {:?} for rank {}",
                perm,
                av.rank()
            )));
        }
        let out = permute_val(av, perm);
        let inv = invert_perm(perm);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Tensor| vec![permute_val(g, &inv)])),
            "permute",
        )
    }

    pub fn transpose_last2(&mut self, a: TapeId) -> Result<TapeId> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(StgError::Shape("transpose_last2 needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: TapeId, shape: &[usize]) -> Result<TapeId> {
        let av = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != av.numel() {
            return Err(StgError::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                av.shape, shape
            )));
        }
        let old_shape = av.shape.clone();
        let out = Tensor { shape: shape.to_vec(), data: av.data.clone(), requires_grad: false, grad: None };
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                vec![Tensor {
                    shape: old_shape.clone(),
                    data: g.data.clone(),
                    requires_grad: false,
                    grad: None,
                }]
            })),
            "reshape",
        )
    }

    pub fn concat(&mut self, ids: &[TapeId], axis: usize) -> Result<TapeId> {
        if ids.is_empty() {
            return Err(StgError::Contract("concat of zero tensors".into()));
        }
        let first = self.value(ids[0]).shape.clone();
        if axis >= first.len() {
            return Err(StgError::Shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut extents = Vec::with_capacity(ids.len());
        for &id in ids {
            let s = &self.value(id).shape;
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(StgError::Shape(format!("concat: {s:?} incompatible with {first:?}")));
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let mut offset = 0;
        for (&id, &e) in ids.iter().zip(&extents) {
            let src = &self.value(id).data;
            for o in 0..outer {
                let dst_start = (o * total + offset) * inner;
                let src_start = o * e * inner;
                data[dst_start..dst_start + e * inner]
                    .copy_from_slice(&src[src_start..src_start + e * inner]);
            }
            offset += e;
        }
        let out = Tensor { shape: out_shape, data, requires_grad: false, grad: None };
        let ext = extents.clone();
        self.push(
            out,
            ids.to_vec(),
            Some(Box::new(move |g: &Tensor| {
                let mut parts = Vec::with_capacity(ext.len());
                let mut offset = 0;
                for &e in &ext {
                    let mut shape = g.shape.clone();
                    shape[axis] = e;
                    let mut data = vec![0.0; shape.iter().product()];
                    for o in 0..outer {
                        let src_start = (o * total + offset) * inner;
                        let dst_start = o * e * inner;
                        data[dst_start..dst_start + e * inner]
                            .copy_from_slice(&g.data[src_start..src_start + e * inner]);
                    }
                    parts.push(Tensor { shape, data, requires_grad: false, grad: None });
                    offset += e;
                }
                parts
            })),
            "concat",
        )
    }

    pub fn slice(&mut self, a: TapeId, axis: usize, start: usize, len: usize) -> Result<TapeId> {
        let av = self.value(a);
        if axis >= av.rank() || start + len > av.shape[axis] {
            return Err(StgError::Shape(format!(
                "slice [{start}, {start}+{len}) on axis {axis} of {:?}",
                av.shape
            )));
        }
        let full = av.shape[axis];
        let outer: usize = av.shape[..axis].iter().product();
        let inner: usize = av.shape[axis + 1..].iter().product();
        let mut shape = av.shape.clone();
        shape[axis] = len;
        let mut data = vec![0.0; shape.iter().product()];
        for o in 0..outer {
            let src_start = (o * full + start) * inner;
            let dst_start = o * len * inner;
            data[dst_start..dst_start + len * inner]
                .copy_from_slice(&av.data[src_start..src_start + len * inner]);
        }
        let in_shape = av.shape.clone();
        let out = Tensor { shape, data, requires_grad: false, grad: None };
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let mut data = vec![0.0; in_shape.iter().product()];
                for o in 0..outer {
                    let dst_start = (o * full + start) * inner;
                    let src_start = o * len * inner;
                    data[dst_start..dst_start + len * inner]
                        .copy_from_slice(&g.data[src_start..src_start + len * inner]);
                }
                vec![Tensor { shape: in_shape.clone(), data, requires_grad: false, grad: None }]
            })),
            "slice",
        )
    }

    /// Repeat a size-1 axis `n` times.
    pub fn expand_axis(&mut self, a: TapeId, axis: usize, n: usize) -> Result<TapeId> {
        let av = self.value(a);
        if axis >= av.rank() || av.shape[axis] != 1 {
            return Err(StgError::Shape(format!(
                "expand_axis: axis {axis} of {:?} must have extent 1",
                av.shape
            )));
        }
        let outer: usize = av.shape[..axis].iter().product();
        let inner: usize = av.shape[axis + 1..].iter().product();
        let mut shape = av.shape.clone();
        shape[axis] = n;
        let mut data = vec![0.0; outer * n * inner];
        for o in 0..outer {
            let src = &av.data[o * inner..(o + 1) * inner];
            for r in 0..n {
                data[(o * n + r) * inner..(o * n + r + 1) * inner].copy_from_slice(src);
            }
        }
        let in_shape = av.shape.clone();
        let out = Tensor { shape, data, requires_grad: false, grad: None };
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for r in 0..n {
                        let src = &g.data[(o * n + r) * inner..(o * n + r + 1) * inner];
                        for (acc, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                }
                vec![Tensor { shape: in_shape.clone(), data, requires_grad: false, grad: None }]
            })),
            "expand_axis",
        )
    }

    /// Gather rows of a `[R, d]` table; backward scatter-adds.
    pub fn gather_rows(&mut self, table: TapeId, idx: &[usize]) -> Result<TapeId> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(StgError::Shape(format!("gather_rows on {:?}", tv.shape)));
        }
        let (rows, d) = (tv.shape[0], tv.shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(StgError::Data(format!("gather index {bad} out of range 0..{rows}")));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&tv.data[i * d..(i + 1) * d]);
        }
        let out = Tensor { shape: vec![idx.len(), d], data, requires_grad: false, grad: None };
        let idx = idx.to_vec();
        self.push(
            out,
            vec![table],
            Some(Box::new(move |g: &Tensor| {
                let mut data = vec![0.0; rows * d];
                for (k, &i) in idx.iter().enumerate() {
                    for (acc, v) in data[i * d..(i + 1) * d].iter_mut().zip(&g.data[k * d..(k + 1) * d]) {
                        *acc += v;
                    }
                }
                vec![Tensor { shape: vec![rows, d], data, requires_grad: false, grad: None }]
            })),
            "gather_rows",
        )
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum_all(&mut self, a: TapeId) -> Result<TapeId> {
        let av = self.value(a);
        let s: f64 = av.data.iter().sum();
        let shape = av.shape.clone();
        self.push(
            Tensor::scalar(s),
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                vec![Tensor::filled(&shape, g.data[0])]
            })),
            "sum_all",
        )
    }

    pub fn mean_all(&mut self, a: TapeId) -> Result<TapeId> {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: TapeId, axis: usize) -> Result<TapeId> {
        let av = self.value(a);
        if axis >= av.rank() {
            return Err(StgError::Shape(format!("sum_axis {axis} on {:?}", av.shape)));
        }
        let e = av.shape[axis];
        let outer: usize = av.shape[..axis].iter().product();
        let inner: usize = av.shape[axis + 1..].iter().product();
        let mut shape = av.shape.clone();
        shape.remove(axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for r in 0..e {
                let src = &av.data[(o * e + r) * inner..(o * e + r + 1) * inner];
                for (acc, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let in_shape = av.shape.clone();
        let out = Tensor { shape, data, requires_grad: false, grad: None };
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                let mut data = vec![0.0; in_shape.iter().product()];
                for o in 0..outer {
                    let src = &g.data[o * inner..(o + 1) * inner];
                    for r in 0..e {
                        data[(o * e + r) * inner..(o * e + r + 1) * inner].copy_from_slice(src);
                    }
                }
                vec![Tensor { shape: in_shape.clone(), data, requires_grad: false, grad: None }]
            })),
            "sum_axis",
        )
    }

    // ---- matmul -------------------------------------------------------------

    /// Batched matrix product `[..., m, k] x [..., k, p] -> [..., m, p]`.
    ///
    /// Leading prefixes must be equal, or one operand may be rank-2 and is
    /// broadcast over the other's batch.
    pub fn matmul(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let (out, madds) = mm(&av, false, &bv, false)?;
        self.counts.add(self.stage, madds);
        let a_rank = av.rank();
        let b_rank = bv.rank();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g: &Tensor| {
                // dA = g . B^T, dB = A^T . g, with batch reduction for the
                // broadcast rank-2 side.
                let (da, _) = mm(g, false, &bv, true).expect("matmul backward dA");
                let (db, _) = mm(&av, true, g, false).expect("matmul backward dB");
                let da = reduce_to_rank(da, a_rank);
                let db = reduce_to_rank(db, b_rank);
                vec![da, db]
            })),
            "matmul",
        )
    }

    // ---- nonlinear / normalization -----------------------------------------

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(&mut self, a: TapeId, axis: usize) -> Result<TapeId> {
        let av = self.value(a);
        if axis >= av.rank() {
            return Err(StgError::Shape(format!("softmax axis {axis} on {:?}", av.shape)));
        }
        let e = av.shape[axis];
        let outer: usize = av.shape[..axis].iter().product();
        let inner: usize = av.shape[axis + 1..].iter().product();
        let mut data = av.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |r: usize| (o * e + r) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for r in 0..e {
                    max = max.max(data[at(r)]);
                }
                let mut sum = 0.0;
                for r in 0..e {
                    let v = (data[at(r)] - max).exp();
                    data[at(r)] = v;
                    sum += v;
                }
                for r in 0..e {
                    data[at(r)] /= sum;
                }
            }
        }
        let out = Tensor { shape: av.shape.clone(), data, requires_grad: false, grad: None };
        let y = out.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Tensor| {
                // dx = (g - sum(g * y, axis)) * y
                let mut dx = vec![0.0; g.data.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |r: usize| (o * e + r) * inner + i;
                        let mut dot = 0.0;
                        for r in 0..e {
                            dot += g.data[at(r)] * y.data[at(r)];
                        }
                        for r in 0..e {
                            dx[at(r)] = (g.data[at(r)] - dot) * y.data[at(r)];
                        }
                    }
                }
                vec![Tensor { shape: g.shape.clone(), data: dx, requires_grad: false, grad: None }]
            })),
            "softmax",
        )
    }

    /// Layer normalization over the last axis with affine scale/shift.
    pub fn layer_norm_last(&mut self, x: TapeId, gamma: TapeId, beta: TapeId, eps: f64) -> Result<TapeId> {
        let xv = self.value(x);
        let c = *xv.shape.last().ok_or_else(|| StgError::Shape("layer_norm on scalar".into()))?;
        if self.value(gamma).shape != [c] || self.value(beta).shape != [c] {
            return Err(StgError::Shape(format!(
                "layer_norm: gamma/beta must be [{c}], got {:?}/{:?}",
                self.value(gamma).shape,
                self.value(beta).shape
            )));
        }
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let rows = xv.numel() / c;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for i in 0..c {
                let h = (row[i] - mu) * istd;
                xhat[r * c + i] = h;
                data[r * c + i] = h * gv.data[i] + bv.data[i];
            }
        }
        let shape = xv.shape.clone();
        self.counts.add(self.stage, (rows * c * 2) as u128);
        let out = Tensor { shape: shape.clone(), data, requires_grad: false, grad: None };
        self.push(
            out,
            vec![x, gamma, beta],
            Some(Box::new(move |g: &Tensor| {
                let mut dx = vec![0.0; g.data.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for r in 0..rows {
                    let gs = &g.data[r * c..(r + 1) * c];
                    let hs = &xhat[r * c..(r + 1) * c];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for i in 0..c {
                        let dh = gs[i] * gv.data[i];
                        mean_dh += dh;
                        mean_dh_h += dh * hs[i];
                        dgamma[i] += gs[i] * hs[i];
                        dbeta[i] += gs[i];
                    }
                    mean_dh /= c as f64;
                    mean_dh_h /= c as f64;
                    for i in 0..c {
                        let dh = gs[i] * gv.data[i];
                        dx[r * c + i] = inv_std[r] * (dh - mean_dh - hs[i] * mean_dh_h);
                    }
                }
                vec![
                    Tensor { shape: shape.clone(), data: dx, requires_grad: false, grad: None },
                    Tensor { shape: vec![c], data: dgamma, requires_grad: false, grad: None },
                    Tensor { shape: vec![c], data: dbeta, requires_grad: false, grad: None },
                ]
            })),
            "layer_norm",
        )
    }

    /// Sparse operator applied along the node axis of a `[T, N, C]` tensor.
    ///
    /// The operator must be symmetric (both propagation kinds are), so the
    /// backward pass reuses the same matrix.
    pub fn spmm(&mut self, op: Arc<CsrMatrix>, x: TapeId) -> Result<TapeId> {
        let xv = self.value(x);
        let (out, madds) = op.apply_tnc(xv)?;
        self.counts.add(self.stage, madds);
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g: &Tensor| {
                let (dx, _) = op.apply_tnc(g).expect("spmm backward");
                vec![dx]
            })),
            "spmm",
        )
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Leaves that nothing flowed back to
    /// get no entry; callers read them as zeros.
    pub fn backward(&self, loss: TapeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(StgError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(&lv.shape, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(back) = &node.back {
                let contribs = back(&g);
                debug_assert_eq!(contribs.len(), node.parents.len());
                for (pid, contrib) in node.parents.iter().zip(contribs) {
                    match &mut grads[pid.0] {
                        Some(acc) => {
                            for (a, v) in acc.data.iter_mut().zip(&contrib.data) {
                                *a += v;
                            }
                        }
                        slot => *slot = Some(contrib),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

// ---- kernels ----------------------------------------------------------------

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        requires_grad: false,
        grad: None,
    }
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_val(t: &Tensor, perm: &[usize]) -> Tensor {
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape[p]).collect();
    let in_strides = t.strides();
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut data = vec![0.0; t.numel()];
    // odometer over output indices
    let rank = out_shape.len();
    if rank == 0 {
        data.clone_from(&t.data);
    } else {
        let mut idx = vec![0usize; rank];
        let mut src = 0usize;
        for slot in data.iter_mut() {
            *slot = t.data[src];
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                src += mapped[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                src -= mapped[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
    }
    Tensor { shape: out_shape, data, requires_grad: false, grad: None }
}

/// Batched matmul kernel with optional per-operand transposition of the last
/// two axes. Returns the result and the multiply-add count.
pub(crate) fn mm(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<(Tensor, u128)> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(StgError::Shape(format!(
            "matmul needs rank >= 2 operands, got {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (ar, ac) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    let (br, bc) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, p) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(StgError::Shape(format!(
            "matmul inner extents differ: {:?} x {:?} (ta={ta}, tb={tb})",
            a.shape, b.shape
        )));
    }
    let pa = &a.shape[..a.rank() - 2];
    let pb = &b.shape[..b.rank() - 2];
    if !(pa == pb || pa.is_empty() || pb.is_empty()) {
        return Err(StgError::Shape(format!(
            "matmul batch prefixes incompatible: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let prefix: Vec<usize> = if pa.is_empty() { pb.to_vec() } else { pa.to_vec() };
    let batches: usize = prefix.iter().product();
    let a_step = if pa.is_empty() { 0 } else { ar * ac };
    let b_step = if pb.is_empty() { 0 } else { br * bc };

    let mut out_shape = prefix;
    out_shape.push(m);
    out_shape.push(p);
    let mut out = vec![0.0; batches * m * p];

    for bi in 0..batches {
        let am = &a.data[bi * a_step..bi * a_step + ar * ac];
        let bm = &b.data[bi * b_step..bi * b_step + br * bc];
        let cm = &mut out[bi * m * p..(bi + 1) * m * p];
        match (ta, tb) {
            (false, false) => {
                for i in 0..m {
                    let arow = &am[i * k..(i + 1) * k];
                    let crow = &mut cm[i * p..(i + 1) * p];
                    for (l, &av) in arow.iter().enumerate() {
                        let brow = &bm[l * p..(l + 1) * p];
                        for (c, &bvv) in crow.iter_mut().zip(brow) {
                            *c += av * bvv;
                        }
                    }
                }
            }
            (false, true) => {
                for i in 0..m {
                    let arow = &am[i * k..(i + 1) * k];
                    let crow = &mut cm[i * p..(i + 1) * p];
                    for (j, c) in crow.iter_mut().enumerate() {
                        let brow = &bm[j * k..(j + 1) * k];
                        let mut acc = 0.0;
                        for (&av, &bvv) in arow.iter().zip(brow) {
                            acc += av * bvv;
                        }
                        *c = acc;
                    }
                }
            }
            (true, false) => {
                for l in 0..k {
                    let arow = &am[l * m..(l + 1) * m];
                    let brow = &bm[l * p..(l + 1) * p];
                    for (i, &av) in arow.iter().enumerate() {
                        let crow = &mut cm[i * p..(i + 1) * p];
                        for (c, &bvv) in crow.iter_mut().zip(brow) {
                            *c += av * bvv;
                        }
                    }
                }
            }
            (true, true) => {
                for i in 0..m {
                    for j in 0..p {
                        let mut acc = 0.0;
                        for l in 0..k {
                            acc += am[l * m + i] * bm[j * k + l];
                        }
                        cm[i * p + j] = acc;
                    }
                }
            }
        }
    }
    let madds = (batches as u128) * (m as u128) * (k as u128) * (p as u128);
    Ok((Tensor { shape: out_shape, data: out, requires_grad: false, grad: None }, madds))
}

/// Sum leading batch axes until the tensor has `rank` axes left.
fn reduce_to_rank(t: Tensor, rank: usize) -> Tensor {
    if t.rank() <= rank {
        return t;
    }
    let keep = t.shape[t.rank() - rank..].to_vec();
    let batch: usize = t.shape[..t.rank() - rank].iter().product();
    let inner: usize = keep.iter().product();
    let mut data = vec![0.0; inner];
    for b in 0..batch {
        for (acc, v) in data.iter_mut().zip(&t.data[b * inner..(b + 1) * inner]) {
            *acc += v;
        }
    }
    Tensor { shape: keep, data, requires_grad: false, grad: None }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Scalar-loop reference matmul for rank-2 inputs.
    fn mm_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape[0], a.shape[1]);
        let p = b.shape[1];
        let mut out = Tensor::zeros(&[m, p]);
        for i in 0..m {
            for j in 0..p {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a.data[i * k + l] * b.data[l * p + j];
                }
                out.data[i * p + j] = acc;
            }
        }
        out
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    /// Central-difference gradient of a scalar function of one flattened input.
    fn fd_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = Vec::with_capacity(x.len());
        let mut xs = x.to_vec();
        for i in 0..x.len() {
            let keep = xs[i];
            xs[i] = keep + h;
            let fp = f(&xs);
            xs[i] = keep - h;
            let fm = f(&xs);
            xs[i] = keep;
            g.push((fp - fm) / (2.0 * h));
        }
        g
    }

    /// FD-checks the gradient of `sum(op(x))` for a unary tape op.
    fn check_unary(
        build: &dyn Fn(&mut Tape, TapeId) -> TapeId,
        shape: &[usize],
        seed: u64,
        lo: f64,
        hi: f64,
        tol: f64,
    ) {
        let mut rng = SplitMix64::new(seed);
        let x = Tensor::rand_uniform(shape, lo, hi, &mut rng);
        let mut tape = Tape::new();
        let xid = tape.leaf(&x).unwrap();
        let out = build(&mut tape, xid);
        let loss = tape.sum_all(out).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.data_or_zeros(xid, x.numel());
        let mut f = |v: &[f64]| {
            let xt = Tensor::from_vec(shape.to_vec(), v.to_vec()).unwrap();
            let mut tp = Tape::new();
            let id = tp.leaf(&xt).unwrap();
            let o = build(&mut tp, id);
            let l = tp.sum_all(o).unwrap();
            tp.value(l).data[0]
        };
        let numeric = fd_grad(&mut f, &x.data, 1e-5);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(rel_err(*a, *n) < tol, "analytic {a} vs fd {n}");
        }
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let b = tape.leaf(&t(&[2, 2], &[3.0, 4.0, 5.0, 6.0])).unwrap();
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data, vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 2], &[1.0, 2.0])).unwrap();
        let b = tape.leaf(&t(&[2, 1], &[3.0, 4.0])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data, vec![11.0]);
    }

    #[test]
    fn matmul_matches_scalar_loop_oracle() {
        let mut rng = SplitMix64::new(11);
        let a = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let (ai, bi) = (tape.leaf(&a).unwrap(), tape.leaf(&b).unwrap());
        let c = tape.matmul(ai, bi).unwrap();
        let want = mm_oracle(&a, &b);
        for (g, w) in tape.value(c).data.iter().zip(&want.data) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.leaf(&Tensor::zeros(&[4, 2])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_batched_with_2d_rhs() {
        let mut rng = SplitMix64::new(2);
        let a = Tensor::rand_uniform(&[5, 3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let (ai, bi) = (tape.leaf(&a).unwrap(), tape.leaf(&b).unwrap());
        let c = tape.matmul(ai, bi).unwrap();
        assert_eq!(tape.value(c).shape, vec![5, 3, 2]);
        for s in 0..5 {
            let slab = Tensor::from_vec(vec![3, 4], a.data[s * 12..(s + 1) * 12].to_vec()).unwrap();
            let want = mm_oracle(&slab, &b);
            for (g, w) in tape.value(c).data[s * 6..(s + 1) * 6].iter().zip(&want.data) {
                assert!((g - w).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_associativity_to_tolerance() {
        let mut rng = SplitMix64::new(5);
        for _ in 0..10 {
            let a = Tensor::rand_uniform(&[8, 8], -1.0, 1.0, &mut rng);
            let b = Tensor::rand_uniform(&[8, 8], -1.0, 1.0, &mut rng);
            let c = Tensor::rand_uniform(&[8, 8], -1.0, 1.0, &mut rng);
            let ab_c = mm_oracle(&mm_oracle(&a, &b), &c);
            let a_bc = mm_oracle(&a, &mm_oracle(&b, &c));
            for (x, y) in ab_c.data.iter().zip(&a_bc.data) {
                assert!((x - y).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn softmax_uniform_on_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[0.0, 0.0, 0.0])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        for v in &tape.value(y).data {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_stable_under_large_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1000.0, 0.0, 0.0])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        let out = &tape.value(y).data;
        assert!((out[0] - 1.0).abs() <= 1e-12);
        assert!(out[1].abs() <= 1e-12 && out[2].abs() <= 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula_oracle() {
        let mut rng = SplitMix64::new(21);
        let x = Tensor::rand_uniform(&[5], -2.0, 2.0, &mut rng);
        let mut tape = Tape::new();
        let xi = tape.leaf(&x).unwrap();
        let y = tape.softmax(xi, 0).unwrap();
        let denom: f64 = x.data.iter().map(|v| v.exp()).sum();
        for (got, v) in tape.value(y).data.iter().zip(&x.data) {
            assert!((got - v.exp() / denom).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_simplex_points() {
        let mut rng = SplitMix64::new(33);
        for _ in 0..20 {
            let x = Tensor::rand_uniform(&[4, 6], -5.0, 5.0, &mut rng);
            let mut tape = Tape::new();
            let xi = tape.leaf(&x).unwrap();
            let y = tape.softmax(xi, 1).unwrap();
            for row in tape.value(y).data.chunks(6) {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut rng = SplitMix64::new(4);
        let x = Tensor::rand_uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xi = tape.leaf(&x).unwrap();
        let loss = tape.sum_all(xi).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(xi).unwrap().data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_of_half_square_is_x() {
        let mut rng = SplitMix64::new(8);
        let x = Tensor::rand_uniform(&[7], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xi = tape.leaf(&x).unwrap();
        let sq = tape.mul(xi, xi).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (g, v) in grads.get(xi).unwrap().data.iter().zip(&x.data) {
            assert!((g - v).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[3])).unwrap();
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, StgError::Contract(_)));
    }

    #[test]
    fn empty_tape_yields_zero_gradients_for_leaves() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[4])).unwrap();
        let loss = tape.leaf(&Tensor::scalar(1.0)).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.data_or_zeros(x, 4), vec![0.0; 4]);
    }

    #[test]
    fn composite_matmul_softmax_sum_gradient_matches_fd() {
        let mut rng = SplitMix64::new(17);
        let a = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let run = |av: &[f64], bv: &[f64]| -> (f64, Option<(Vec<f64>, Vec<f64>)>) {
            let at = Tensor::from_vec(vec![3, 4], av.to_vec()).unwrap();
            let bt = Tensor::from_vec(vec![4, 3], bv.to_vec()).unwrap();
            let mut tape = Tape::new();
            let (ai, bi) = (tape.leaf(&at).unwrap(), tape.leaf(&bt).unwrap());
            let c = tape.matmul(ai, bi).unwrap();
            let sm = tape.softmax(c, 1).unwrap();
            let w = tape.mul(sm, c).unwrap(); // make the loss depend nontrivially on both
            let loss = tape.sum_all(w).unwrap();
            let value = tape.value(loss).data[0];
            let grads = tape.backward(loss).unwrap();
            (value, Some((grads.data_or_zeros(ai, 12), grads.data_or_zeros(bi, 12))))
        };
        let (_, g) = run(&a.data, &b.data);
        let (ga, gb) = g.unwrap();
        let mut fa = |v: &[f64]| run(v, &b.data).0;
        let na = fd_grad(&mut fa, &a.data, 1e-5);
        let mut fb = |v: &[f64]| run(&a.data, v).0;
        let nb = fd_grad(&mut fb, &b.data, 1e-5);
        for (x, y) in ga.iter().zip(&na) {
            assert!(rel_err(*x, *y) <= 1e-6, "{x} vs {y}");
        }
        for (x, y) in gb.iter().zip(&nb) {
            assert!(rel_err(*x, *y) <= 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn elementwise_and_shape_ops_pass_fd_checks() {
        check_unary(&|t, x| { let y = t.mul(x, x).unwrap(); t.add(y, x).unwrap() }, &[3, 4], 1, -1.0, 1.0, 1e-6);
        check_unary(&|t, x| { let y = t.mul(x, x).unwrap(); t.sub(y, x).unwrap() }, &[5], 2, -1.0, 1.0, 1e-6);
        check_unary(
            &|t, x| {
                let c = t.leaf(&Tensor::filled(&[6], 2.0)).unwrap();
                let y = t.mul(x, x).unwrap();
                t.div(y, c).unwrap()
            },
            &[6], 3, -1.0, 1.0, 1e-6,
        );
        check_unary(&|t, x| t.sqrt(x).unwrap(), &[8], 4, 0.5, 2.0, 1e-6);
        check_unary(&|t, x| t.abs(x).unwrap(), &[8], 5, 0.2, 1.5, 1e-6);
        check_unary(
            &|t, x| {
                let p = t.permute(x, &[2, 0, 1]).unwrap();
                let q = t.mul(p, p).unwrap();
                t.reshape(q, &[24]).unwrap()
            },
            &[2, 3, 4], 6, -1.0, 1.0, 1e-6,
        );
        check_unary(
            &|t, x| {
                let s = t.slice(x, 1, 1, 2).unwrap();
                t.mul(s, s).unwrap()
            },
            &[3, 4], 7, -1.0, 1.0, 1e-6,
        );
        check_unary(
            &|t, x| {
                let c = t.concat(&[x, x], 0).unwrap();
                t.mul(c, c).unwrap()
            },
            &[2, 3], 8, -1.0, 1.0, 1e-6,
        );
        check_unary(
            &|t, x| {
                let s = t.sum_axis(x, 1).unwrap();
                t.mul(s, s).unwrap()
            },
            &[3, 4], 9, -1.0, 1.0, 1e-6,
        );
        check_unary(
            &|t, x| {
                let m = t.mean_all(x).unwrap();
                t.mul(m, m).unwrap()
            },
            &[4, 2], 10, -1.0, 1.0, 1e-6,
        );
        check_unary(&|t, x| t.softmax(x, 1).unwrap(), &[3, 5], 11, -2.0, 2.0, 1e-6);
        check_unary(
            &|t, x| {
                let e = t.expand_axis(x, 1, 5).unwrap();
                t.mul(e, e).unwrap()
            },
            &[3, 1, 2], 12, -1.0, 1.0, 1e-6,
        );
        check_unary(
            &|t, x| {
                let g = t.gather_rows(x, &[0, 2, 2, 1]).unwrap();
                t.mul(g, g).unwrap()
            },
            &[4, 3], 13, -1.0, 1.0, 1e-6,
        );
    }

    #[test]
    fn matmul_gradients_match_fd_including_broadcast() {
        let mut rng = SplitMix64::new(19);
        let a = Tensor::rand_uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let run = |av: &[f64], bv: &[f64], want_grads: bool| {
            let at = Tensor::from_vec(vec![2, 3, 4], av.to_vec()).unwrap();
            let bt = Tensor::from_vec(vec![4, 2], bv.to_vec()).unwrap();
            let mut tape = Tape::new();
            let (ai, bi) = (tape.leaf(&at).unwrap(), tape.leaf(&bt).unwrap());
            let c = tape.matmul(ai, bi).unwrap();
            let sq = tape.mul(c, c).unwrap();
            let loss = tape.sum_all(sq).unwrap();
            let v = tape.value(loss).data[0];
            if want_grads {
                let g = tape.backward(loss).unwrap();
                (v, Some((g.data_or_zeros(ai, 24), g.data_or_zeros(bi, 8))))
            } else {
                (v, None)
            }
        };
        let (_, g) = run(&a.data, &b.data, true);
        let (ga, gb) = g.unwrap();
        let mut fa = |v: &[f64]| run(v, &b.data, false).0;
        let na = fd_grad(&mut fa, &a.data, 1e-5);
        let mut fb = |v: &[f64]| run(&a.data, v, false).0;
        let nb = fd_grad(&mut fb, &b.data, 1e-5);
        for (x, y) in ga.iter().zip(&na) {
            assert!(rel_err(*x, *y) <= 1e-6);
        }
        for (x, y) in gb.iter().zip(&nb) {
            assert!(rel_err(*x, *y) <= 1e-6);
        }
    }

    #[test]
    fn layer_norm_gradients_match_fd() {
        let mut rng = SplitMix64::new(23);
        let x = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let gamma = Tensor::rand_uniform(&[4], 0.5, 1.5, &mut rng);
        let beta = Tensor::rand_uniform(&[4], -0.5, 0.5, &mut rng);
        let run = |xv: &[f64], gv: &[f64], bv: &[f64], want: bool| {
            let xt = Tensor::from_vec(vec![3, 4], xv.to_vec()).unwrap();
            let gt = Tensor::from_vec(vec![4], gv.to_vec()).unwrap();
            let bt = Tensor::from_vec(vec![4], bv.to_vec()).unwrap();
            let mut tape = Tape::new();
            let xi = tape.leaf(&xt).unwrap();
            let gi = tape.leaf(&gt).unwrap();
            let bi = tape.leaf(&bt).unwrap();
            let y = tape.layer_norm_last(xi, gi, bi, 1e-5).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let loss = tape.sum_all(sq).unwrap();
            let v = tape.value(loss).data[0];
            if want {
                let g = tape.backward(loss).unwrap();
                (
                    v,
                    Some((
                        g.data_or_zeros(xi, 12),
                        g.data_or_zeros(gi, 4),
                        g.data_or_zeros(bi, 4),
                    )),
                )
            } else {
                (v, None)
            }
        };
        let (_, g) = run(&x.data, &gamma.data, &beta.data, true);
        let (gx, gg, gb) = g.unwrap();
        let mut fx = |v: &[f64]| run(v, &gamma.data, &beta.data, false).0;
        let nx = fd_grad(&mut fx, &x.data, 1e-5);
        let mut fg = |v: &[f64]| run(&x.data, v, &beta.data, false).0;
        let ng = fd_grad(&mut fg, &gamma.data, 1e-5);
        let mut fb = |v: &[f64]| run(&x.data, &gamma.data, v, false).0;
        let nb = fd_grad(&mut fb, &beta.data, 1e-5);
        for (a, n) in gx.iter().zip(&nx) {
            assert!(rel_err(*a, *n) <= 1e-6, "{a} vs {n}");
        }
        for (a, n) in gg.iter().zip(&ng) {
            assert!(rel_err(*a, *n) <= 1e-6);
        }
        for (a, n) in gb.iter().zip(&nb) {
            assert!(rel_err(*a, *n) <= 1e-6);
        }
    }

    #[test]
    fn spmm_gradient_matches_fd_for_symmetric_operator() {
        use crate::sparse::CsrMatrix;
        let mut rng = SplitMix64::new(29);
        // random symmetric matrix with diagonal
        let n = 5;
        let mut dense = Tensor::zeros(&[n, n]);
        for i in 0..n {
            dense.data[i * n + i] = rng.uniform(0.5, 1.0);
            for j in (i + 1)..n {
                if rng.next_f64() < 0.5 {
                    let v = rng.uniform(-1.0, 1.0);
                    dense.data[i * n + j] = v;
                    dense.data[j * n + i] = v;
                }
            }
        }
        let csr = Arc::new(CsrMatrix::from_dense(&dense).unwrap());
        let x = Tensor::rand_uniform(&[2, n, 3], -1.0, 1.0, &mut rng);
        let run = |xv: &[f64], want: bool| {
            let xt = Tensor::from_vec(vec![2, n, 3], xv.to_vec()).unwrap();
            let mut tape = Tape::new();
            let xi = tape.leaf(&xt).unwrap();
            let y = tape.spmm(csr.clone(), xi).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let loss = tape.sum_all(sq).unwrap();
            let v = tape.value(loss).data[0];
            if want {
                let g = tape.backward(loss).unwrap();
                (v, Some(g.data_or_zeros(xi, 2 * n * 3)))
            } else {
                (v, None)
            }
        };
        let (_, g) = run(&x.data, true);
        let gx = g.unwrap();
        let mut f = |v: &[f64]| run(v, false).0;
        let nx = fd_grad(&mut f, &x.data, 1e-5);
        for (a, n) in gx.iter().zip(&nx) {
            assert!(rel_err(*a, *n) <= 1e-6);
        }
    }

    #[test]
    fn nan_production_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1], &[1.0])).unwrap();
        let b = tape.leaf(&t(&[1], &[0.0])).unwrap();
        let err = tape.div(a, b).unwrap_err();
        assert!(matches!(err, StgError::NonFinite(_)));
    }

    #[test]
    fn madd_counter_attributes_stages() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::filled(&[4, 5], 1.0)).unwrap();
        let b = tape.leaf(&Tensor::filled(&[5, 6], 1.0)).unwrap();
        tape.set_stage(Stage::Attention);
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.counts().attention, 4 * 5 * 6);
        assert_eq!(tape.counts().propagation, 0);
    }
}
