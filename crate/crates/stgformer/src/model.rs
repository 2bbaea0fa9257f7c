//! Model assembly and configuration: embedding -> propagation -> attention
//! block -> regression head, plus the checkpoint container.

use std::io::Read;
use std::path::Path;

use crate::attention::{
    bind_gates, bind_projection, recursive_interaction, AttentionMode, AttnKind, GateStack,
    QkvProjection,
};
use crate::embedding::{bind_tables, embed, steps_per_day, CalendarIndex, EmbeddingTables};
use crate::error::{Result, StgError};
use crate::graph::{OperatorKind, PropagationOperator, RoadGraph};
use crate::metrics::NormStats;
use crate::rng::SplitMix64;
use crate::tape::{Stage, Tape, TapeId};
use crate::tensor::Tensor;
use crate::util::atomic_write;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct StgConfig {
    /// Input window length T.
    pub t_in: usize,
    /// Forecast horizon S.
    pub s_out: usize,
    /// Embedding width; block channel width is C = 4d.
    pub d: usize,
    /// Propagation / interaction order K.
    pub k: usize,
    pub attn: AttnKind,
    pub use_spatial: bool,
    pub use_temporal: bool,
    pub use_graph: bool,
    pub operator: OperatorKind,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub interval_minutes: usize,
    pub seed: u64,
}

impl Default for StgConfig {
    fn default() -> Self {
        Self {
            t_in: 12,
            s_out: 12,
            d: 4,
            k: 2,
            attn: AttnKind::LinearEfficient,
            use_spatial: true,
            use_temporal: true,
            use_graph: true,
            operator: OperatorKind::SgcAdjacency,
            lr: 1e-3,
            batch_size: 16,
            max_epochs: 200,
            patience: 20,
            min_delta: 1e-4,
            interval_minutes: 5,
            seed: 7,
        }
    }
}

impl StgConfig {
    /// Block channel width.
    pub fn c(&self) -> usize {
        4 * self.d
    }

    /// Interaction order after the `--no-graph` ablation.
    pub fn effective_k(&self) -> usize {
        if self.use_graph {
            self.k
        } else {
            0
        }
    }

    pub fn mode(&self) -> AttentionMode {
        AttentionMode {
            kind: self.attn,
            use_spatial: self.use_spatial,
            use_temporal: self.use_temporal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_in == 0 || self.s_out == 0 || self.d == 0 {
            return Err(StgError::Config("t_in, s_out, and d must be >= 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(StgError::Config("batch_size and max_epochs must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(StgError::Config(format!("bad learning rate {}", self.lr)));
        }
        steps_per_day(self.interval_minutes)?;
        Ok(())
    }

    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| StgError::Config(format!("bad value `{value}` for key `{key}`")))
        }
        match key {
            "t_in" => self.t_in = parse(key, value)?,
            "s_out" => self.s_out = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "attn_mode" => self.attn = value.parse()?,
            "use_spatial" => self.use_spatial = parse(key, value)?,
            "use_temporal" => self.use_temporal = parse(key, value)?,
            "use_graph" => self.use_graph = parse(key, value)?,
            "operator" => self.operator = value.parse()?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "min_delta" => self.min_delta = parse(key, value)?,
            "interval_minutes" => self.interval_minutes = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(StgError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parse flat `key = value` text; `#` starts a comment, unknown keys rejected.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                StgError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set_key(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| StgError::Config(format!("{}: {e}", path.display())))?;
        Self::from_kv_text(&text)
    }

    /// Apply the `STG_SEED` environment override, if set.
    pub fn apply_env_override(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("STG_SEED") {
            self.seed = v
                .parse()
                .map_err(|_| StgError::Config(format!("STG_SEED `{v}` is not an integer")))?;
        }
        Ok(())
    }

    pub fn to_kv_text(&self) -> String {
        let attn = match self.attn {
            AttnKind::SoftmaxQuadratic => "softmax",
            AttnKind::LinearEfficient => "linear",
        };
        let operator = match self.operator {
            OperatorKind::SgcAdjacency => "sgc_adjacency",
            OperatorKind::RescaledLaplacian => "rescaled_laplacian",
        };
        format!(
            "t_in = {}\ns_out = {}\nd = {}\nk = {}\nattn_mode = {attn}\nuse_spatial = {}\n\
             use_temporal = {}\nuse_graph = {}\noperator = {operator}\nlr = {}\nbatch_size = {}\n\
             max_epochs = {}\npatience = {}\nmin_delta = {}\ninterval_minutes = {}\nseed = {}\n",
            self.t_in,
            self.s_out,
            self.d,
            self.k,
            self.use_spatial,
            self.use_temporal,
            self.use_graph,
            self.lr,
            self.batch_size,
            self.max_epochs,
            self.patience,
            self.min_delta,
            self.interval_minutes,
            self.seed,
        )
    }
}

/// The full single-layer model.
#[derive(Debug, Clone)]
pub struct StgModel {
    pub config: StgConfig,
    pub n_nodes: usize,
    pub c_in: usize,
    pub tables: EmbeddingTables,
    pub op: PropagationOperator,
    pub graph: RoadGraph,
    pub proj: QkvProjection,
    pub gates: GateStack,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    /// `[T*C, S]` per-node regression head.
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl StgModel {
    pub fn init(config: &StgConfig, graph: &RoadGraph, c_in: usize) -> Result<Self> {
        config.validate()?;
        let spd = steps_per_day(config.interval_minutes)?;
        let c = config.c();
        let mut rng = SplitMix64::stream(config.seed, 1);
        let tables = EmbeddingTables::init(c_in, config.d, graph.n_nodes, config.t_in, spd, &mut rng);
        let proj = QkvProjection::init(c, &mut rng);
        let gates = GateStack::init(c, config.effective_k(), &mut rng);
        let head_w =
            Tensor::xavier(&[config.t_in * c, config.s_out], config.t_in * c, config.s_out, &mut rng);
        let op = PropagationOperator::build(graph, config.operator)?;
        Ok(Self {
            config: config.clone(),
            n_nodes: graph.n_nodes,
            c_in,
            tables,
            op,
            graph: graph.clone(),
            proj,
            gates,
            ln_gamma: Tensor::filled(&[c], 1.0).trainable(),
            ln_beta: Tensor::zeros(&[c]).trainable(),
            head_w,
            head_b: Tensor::zeros(&[config.s_out]).trainable(),
        })
    }

    /// Parameters in fixed order: embedding tables, projection, gates, mixer,
    /// layer norm, head.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out: Vec<(&'static str, &Tensor)> = vec![
            ("w_data", &self.tables.w_data),
            ("b_data", &self.tables.b_data),
            ("t_w", &self.tables.t_w),
            ("t_d", &self.tables.t_d),
            ("x_ste", &self.tables.x_ste),
            ("w_q", &self.proj.w_q),
            ("w_k", &self.proj.w_k),
            ("w_v", &self.proj.w_v),
            ("w_o", &self.proj.w_o),
        ];
        for (i, g) in self.gates.gates.iter().enumerate() {
            // gate names are g1, g2, ... (g0 is the identity)
            out.push((gate_name(i + 1), g));
        }
        out.push(("mixer_w", &self.gates.mixer_w));
        out.push(("mixer_b", &self.gates.mixer_b));
        out.push(("ln_gamma", &self.ln_gamma));
        out.push(("ln_beta", &self.ln_beta));
        out.push(("head_w", &self.head_w));
        out.push(("head_b", &self.head_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.tables.w_data,
            &mut self.tables.b_data,
            &mut self.tables.t_w,
            &mut self.tables.t_d,
            &mut self.tables.x_ste,
            &mut self.proj.w_q,
            &mut self.proj.w_k,
            &mut self.proj.w_v,
            &mut self.proj.w_o,
        ];
        out.extend(self.gates.gates.iter_mut());
        out.push(&mut self.gates.mixer_w);
        out.push(&mut self.gates.mixer_b);
        out.push(&mut self.ln_gamma);
        out.push(&mut self.ln_beta);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn count_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Build the forward graph on `tape` for one `[T, N, C_in]` window.
    ///
    /// Returns the `[S, N, 1]` prediction plus the parameter leaves in the
    /// fixed [`Self::params`] order.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        raw: &Tensor,
        calendar: &[CalendarIndex],
    ) -> Result<(TapeId, Vec<TapeId>)> {
        let cfg = &self.config;
        if raw.shape != [cfg.t_in, self.n_nodes, self.c_in] {
            return Err(StgError::Contract(format!(
                "window {:?} does not match configured [{}, {}, {}]",
                raw.shape, cfg.t_in, self.n_nodes, self.c_in
            )));
        }
        let spd = steps_per_day(cfg.interval_minutes)?;
        let c = cfg.c();

        tape.set_stage(Stage::Embedding);
        let bt = bind_tables(tape, &self.tables)?;
        let bp = bind_projection(tape, &self.proj)?;
        let bg = bind_gates(tape, &self.gates)?;
        let ln_gamma = tape.leaf(&self.ln_gamma)?;
        let ln_beta = tape.leaf(&self.ln_beta)?;
        let head_w = tape.leaf(&self.head_w)?;
        let head_b = tape.leaf(&self.head_b)?;
        let raw_id = tape.leaf(raw)?;

        let x_emb = embed(tape, bt, raw_id, calendar, spd)?;

        tape.set_stage(Stage::Propagation);
        let mut orders = vec![x_emb];
        for _ in 0..cfg.effective_k() {
            let prev = *orders.last().unwrap();
            orders.push(tape.spmm(self.op.matrix.clone(), prev)?);
        }

        let mode = cfg.mode();
        let block = recursive_interaction(tape, &orders, bp, &bg, &mode)?;

        tape.set_stage(Stage::Head);
        let normed = tape.layer_norm_last(block, ln_gamma, ln_beta, LN_EPS)?;
        // [T,N,C] -> [N, T*C] -> [N,S] -> [S,N,1]
        let by_node = tape.permute(normed, &[1, 0, 2])?;
        let flat = tape.reshape(by_node, &[self.n_nodes, cfg.t_in * c])?;
        let scores = tape.matmul(flat, head_w)?;
        let scores = tape.add_bias(scores, head_b)?;
        let by_step = tape.permute(scores, &[1, 0])?;
        let pred = tape.reshape(by_step, &[cfg.s_out, self.n_nodes, 1])?;
        tape.set_stage(Stage::Other);

        let mut leaves = vec![
            bt.w_data, bt.b_data, bt.t_w, bt.t_d, bt.x_ste, bp.w_q, bp.w_k, bp.w_v, bp.w_o,
        ];
        leaves.extend(&bg.gates);
        leaves.push(bg.mixer_w);
        leaves.push(bg.mixer_b);
        leaves.push(ln_gamma);
        leaves.push(ln_beta);
        leaves.push(head_w);
        leaves.push(head_b);
        Ok((pred, leaves))
    }

    /// Plain forward pass (no gradient bookkeeping kept by the caller).
    pub fn forward(&self, raw: &Tensor, calendar: &[CalendarIndex]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (pred, _) = self.forward_on_tape(&mut tape, raw, calendar)?;
        Ok(tape.value(pred).clone())
    }
}

fn gate_name(i: usize) -> &'static str {
    // small fixed pool keeps &'static str names without leaking per call
    const NAMES: [&str; 8] = ["g1", "g2", "g3", "g4", "g5", "g6", "g7", "g8"];
    NAMES.get(i - 1).copied().unwrap_or("g_hi")
}

// ---- checkpoint container ---------------------------------------------------

const STGC_MAGIC: &[u8; 4] = b"STGC";
const STGC_VERSION: u32 = 1;

/// Save model + normalization stats: magic, version, manifest text, then
/// named STGT tensor entries (parameters and the graph adjacency).
pub fn save_checkpoint(model: &StgModel, stats: &NormStats, path: &Path) -> Result<()> {
    let mut manifest = model.config.to_kv_text();
    manifest.push_str(&format!(
        "n_nodes = {}\nc_in = {}\nparam_count = {}\nmu = {}\nsigma = {}\n",
        model.n_nodes,
        model.c_in,
        model.count_params(),
        join_f64(&stats.mu),
        join_f64(&stats.sigma),
    ));
    let mut buf = Vec::new();
    buf.extend_from_slice(STGC_MAGIC);
    buf.extend_from_slice(&STGC_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    buf.extend_from_slice(manifest.as_bytes());
    let params = model.params();
    buf.extend_from_slice(&((params.len() + 1) as u32).to_le_bytes());
    let mut write_entry = |name: &str, t: &Tensor| -> Result<()> {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        t.write_stgt(&mut buf)
    };
    for (name, t) in &params {
        write_entry(name, t)?;
    }
    write_entry("graph_adjacency", &model.graph.adjacency)?;
    atomic_write(path, &buf)
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| StgError::Format(format!("bad float `{p}` in checkpoint manifest")))
        })
        .collect()
}

pub fn load_checkpoint(path: &Path) -> Result<(StgModel, NormStats)> {
    let bytes = std::fs::read(path)
        .map_err(|e| StgError::Format(format!("{}: {e}", path.display())))?;
    let mut r: &[u8] = &bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != STGC_MAGIC {
        return Err(StgError::Format("not a checkpoint file (bad magic)".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != STGC_VERSION {
        return Err(StgError::Format(format!("unsupported checkpoint version {version}")));
    }
    r.read_exact(&mut u32buf)?;
    let mlen = u32::from_le_bytes(u32buf) as usize;
    if r.len() < mlen {
        return Err(StgError::Format("truncated checkpoint manifest".into()));
    }
    let manifest = std::str::from_utf8(&r[..mlen])
        .map_err(|_| StgError::Format("checkpoint manifest is not UTF-8".into()))?
        .to_string();
    r = &r[mlen..];

    let mut config = StgConfig::default();
    let mut n_nodes = None;
    let mut c_in = None;
    let mut param_count = None;
    let mut mu = None;
    let mut sigma = None;
    for line in manifest.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| StgError::Format(format!("bad manifest line `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "n_nodes" => n_nodes = Some(value.parse().map_err(|_| bad_manifest(key, value))?),
            "c_in" => c_in = Some(value.parse().map_err(|_| bad_manifest(key, value))?),
            "param_count" => {
                param_count = Some(value.parse::<usize>().map_err(|_| bad_manifest(key, value))?)
            }
            "mu" => mu = Some(parse_f64_list(value)?),
            "sigma" => sigma = Some(parse_f64_list(value)?),
            _ => config.set_key(key, value)?,
        }
    }
    let n_nodes: usize = n_nodes.ok_or_else(|| missing("n_nodes"))?;
    let c_in: usize = c_in.ok_or_else(|| missing("c_in"))?;
    let stats = NormStats::new(mu.ok_or_else(|| missing("mu"))?, sigma.ok_or_else(|| missing("sigma"))?)?;

    r.read_exact(&mut u32buf)?;
    let n_entries = u32::from_le_bytes(u32buf) as usize;
    let mut entries = std::collections::HashMap::new();
    for _ in 0..n_entries {
        r.read_exact(&mut u32buf)?;
        let nlen = u32::from_le_bytes(u32buf) as usize;
        if r.len() < nlen {
            return Err(StgError::Format("truncated checkpoint entry name".into()));
        }
        let name = std::str::from_utf8(&r[..nlen])
            .map_err(|_| StgError::Format("entry name is not UTF-8".into()))?
            .to_string();
        r = &r[nlen..];
        let t = Tensor::read_stgt(&mut r)?;
        entries.insert(name, t);
    }

    let adjacency = entries
        .remove("graph_adjacency")
        .ok_or_else(|| missing("graph_adjacency"))?;
    let graph = RoadGraph::from_adjacency(&adjacency)?;
    if graph.n_nodes != n_nodes {
        return Err(StgError::Format(format!(
            "manifest says {n_nodes} nodes, adjacency has {}",
            graph.n_nodes
        )));
    }
    let mut model = StgModel::init(&config, &graph, c_in)?;
    let names: Vec<&'static str> = model.params().iter().map(|(n, _)| *n).collect();
    for (name, slot) in names.iter().zip(model.params_mut()) {
        let stored = entries
            .remove(*name)
            .ok_or_else(|| StgError::Format(format!("checkpoint missing tensor `{name}`")))?;
        if stored.shape != slot.shape {
            return Err(StgError::Format(format!(
                "checkpoint tensor `{name}` is {:?}, model expects {:?}",
                stored.shape, slot.shape
            )));
        }
        slot.data = stored.data;
    }
    if let Some(pc) = param_count {
        if pc != model.count_params() {
            return Err(StgError::Format(format!(
                "manifest param_count {pc} != reconstructed {}",
                model.count_params()
            )));
        }
    }
    Ok((model, stats))
}

fn bad_manifest(key: &str, value: &str) -> StgError {
    StgError::Format(format!("bad manifest value `{value}` for `{key}`"))
}

fn missing(what: &str) -> StgError {
    StgError::Format(format!("checkpoint missing `{what}`"))
}
