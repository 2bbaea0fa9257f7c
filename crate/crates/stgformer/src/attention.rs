//! Shared-QKV spatiotemporal attention and the recursive gated interaction.
//!
//! One projection triple serves the spatial branch (attending over nodes per
//! time step), the temporal branch (over steps per node), and every
//! interaction order. The linearized mode factors (QK^T)V/n as Q(K^T V)/n.

use crate::error::{Result, StgError};
use crate::rng::SplitMix64;
use crate::tape::{Stage, Tape, TapeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnKind {
    SoftmaxQuadratic,
    LinearEfficient,
}

impl std::str::FromStr for AttnKind {
    type Err = StgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::SoftmaxQuadratic),
            "linear" => Ok(Self::LinearEfficient),
            other => Err(StgError::Config(format!("unknown attention mode `{other}`"))),
        }
    }
}

/// Attention kind plus the ablation switches of the model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionMode {
    pub kind: AttnKind,
    pub use_spatial: bool,
    pub use_temporal: bool,
}

impl AttentionMode {
    pub fn full(kind: AttnKind) -> Self {
        Self { kind, use_spatial: true, use_temporal: true }
    }
}

/// The single projection triple plus output mix, all `C x C`.
#[derive(Debug, Clone)]
pub struct QkvProjection {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

impl QkvProjection {
    pub fn init(c: usize, rng: &mut SplitMix64) -> Self {
        Self {
            w_q: Tensor::xavier(&[c, c], c, c, rng).trainable(),
            w_k: Tensor::xavier(&[c, c], c, c, rng).trainable(),
            w_v: Tensor::xavier(&[c, c], c, c, rng).trainable(),
            w_o: Tensor::xavier(&[c, c], c, c, rng).trainable(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundProjection {
    pub w_q: TapeId,
    pub w_k: TapeId,
    pub w_v: TapeId,
    pub w_o: TapeId,
}

pub fn bind_projection(tape: &mut Tape, proj: &QkvProjection) -> Result<BoundProjection> {
    Ok(BoundProjection {
        w_q: tape.leaf(&proj.w_q)?,
        w_k: tape.leaf(&proj.w_k)?,
        w_v: tape.leaf(&proj.w_v)?,
        w_o: tape.leaf(&proj.w_o)?,
    })
}

/// Gates for the recursive interaction: `g_0` is the identity, `g_1..g_{K-1}`
/// are square bias-free maps, and a final 1x1 mixer (with bias) closes the
/// block.
#[derive(Debug, Clone)]
pub struct GateStack {
    /// Trainable gate matrices for orders 1..K-1 (length `K - 1`, or 0 when K <= 1).
    pub gates: Vec<Tensor>,
    pub mixer_w: Tensor,
    pub mixer_b: Tensor,
    pub order: usize,
}

impl GateStack {
    pub fn init(c: usize, order: usize, rng: &mut SplitMix64) -> Self {
        let gates = (1..order)
            .map(|_| Tensor::xavier(&[c, c], c, c, rng).trainable())
            .collect();
        Self {
            gates,
            mixer_w: Tensor::xavier(&[c, c], c, c, rng).trainable(),
            mixer_b: Tensor::zeros(&[c]).trainable(),
            order,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundGateStack {
    pub gates: Vec<TapeId>,
    pub mixer_w: TapeId,
    pub mixer_b: TapeId,
    pub order: usize,
}

pub fn bind_gates(tape: &mut Tape, gates: &GateStack) -> Result<BoundGateStack> {
    let mut ids = Vec::with_capacity(gates.gates.len());
    for g in &gates.gates {
        ids.push(tape.leaf(g)?);
    }
    Ok(BoundGateStack {
        gates: ids,
        mixer_w: tape.leaf(&gates.mixer_w)?,
        mixer_b: tape.leaf(&gates.mixer_b)?,
        order: gates.order,
    })
}

/// One attention branch over the middle axis of `[B, M, C]` inputs.
fn branch(
    tape: &mut Tape,
    q: TapeId,
    k: TapeId,
    v: TapeId,
    kind: AttnKind,
    m: usize,
    c: usize,
) -> Result<TapeId> {
    match kind {
        AttnKind::SoftmaxQuadratic => {
            let kt = tape.transpose_last2(k)?;
            let scores = tape.matmul(q, kt)?;
            let scaled = tape.scale(scores, 1.0 / (c as f64).sqrt())?;
            let attn = tape.softmax(scaled, tape.value(scaled).shape.len() - 1)?;
            tape.matmul(attn, v)
        }
        AttnKind::LinearEfficient => {
            let kt = tape.transpose_last2(k)?;
            let kv = tape.matmul(kt, v)?; // [B, C, C], formed first
            let out = tape.matmul(q, kv)?;
            tape.scale(out, 1.0 / m as f64)
        }
    }
}

/// Spatiotemporal attention over `h: [T, N, C]`.
///
/// Spatial and temporal branch outputs are summed, then mixed by `W_O`.
/// With both branches disabled the result is the zero tensor (W/o SA).
pub fn st_attention(
    tape: &mut Tape,
    h: TapeId,
    proj: BoundProjection,
    mode: &AttentionMode,
) -> Result<TapeId> {
    let shape = tape.value(h).shape.clone();
    if shape.len() != 3 {
        return Err(StgError::Contract(format!("attention expects [T, N, C], got {shape:?}")));
    }
    let (t_len, n, c) = (shape[0], shape[1], shape[2]);
    if tape.value(proj.w_q).shape != [c, c] {
        return Err(StgError::Contract(format!(
            "projection is {:?} but input channels are {c}",
            tape.value(proj.w_q).shape
        )));
    }
    let prev = tape.stage();
    tape.set_stage(Stage::Attention);
    let q = tape.matmul(h, proj.w_q)?;
    let k = tape.matmul(h, proj.w_k)?;
    let v = tape.matmul(h, proj.w_v)?;
    let spatial = if mode.use_spatial { Some(branch(tape, q, k, v, mode.kind, n, c)?) } else { None };
    let temporal = if mode.use_temporal {
        let qt = tape.permute(q, &[1, 0, 2])?;
        let kt = tape.permute(k, &[1, 0, 2])?;
        let vt = tape.permute(v, &[1, 0, 2])?;
        let out = branch(tape, qt, kt, vt, mode.kind, t_len, c)?;
        Some(tape.permute(out, &[1, 0, 2])?)
    } else {
        None
    };
    let combined = match (spatial, temporal) {
        (Some(s), Some(t)) => tape.add(s, t)?,
        (Some(s), None) => s,
        (None, Some(t)) => t,
        (None, None) => tape.zeros(&shape)?,
    };
    let out = tape.matmul(combined, proj.w_o)?;
    tape.set_stage(prev);
    Ok(out)
}

/// Recursive gated interaction over propagated orders `[X_0 ... X_K]`:
/// `p_0 = X_0`, `p_{n+1} = a_n(X_{n+1}) (*) g_n(p_n)`, returning
/// `mixer(p_K) + X_0`. Layer normalization is applied by the caller.
pub fn recursive_interaction(
    tape: &mut Tape,
    orders: &[TapeId],
    proj: BoundProjection,
    gates: &BoundGateStack,
    mode: &AttentionMode,
) -> Result<TapeId> {
    if orders.is_empty() {
        return Err(StgError::Contract("interaction needs at least order 0".into()));
    }
    let k = orders.len() - 1;
    if k != gates.order {
        return Err(StgError::Contract(format!(
            "got {} propagation orders but gate stack of order {}",
            orders.len(),
            gates.order
        )));
    }
    if gates.gates.len() != k.saturating_sub(1) {
        return Err(StgError::Contract(format!(
            "order {k} needs {} gate matrices, stack has {}",
            k.saturating_sub(1),
            gates.gates.len()
        )));
    }
    let mut p = orders[0];
    for n in 0..k {
        let a = st_attention(tape, orders[n + 1], proj, mode)?;
        let prev = tape.stage();
        tape.set_stage(Stage::Interaction);
        let gated = if n == 0 { p } else { tape.matmul(p, gates.gates[n - 1])? };
        p = tape.mul(a, gated)?;
        tape.set_stage(prev);
    }
    let prev = tape.stage();
    tape.set_stage(Stage::Interaction);
    let mixed = tape.matmul(p, gates.mixer_w)?;
    let mixed = tape.add_bias(mixed, gates.mixer_b)?;
    let out = tape.add(mixed, orders[0])?;
    tape.set_stage(prev);
    Ok(out)
}
