//! Self-verification suite: runtime property checks shared by the `verify`
//! CLI subcommand and the acceptance tests.

use crate::attention::{bind_projection, st_attention, AttentionMode, AttnKind, QkvProjection};
use crate::embedding::CalendarIndex;
use crate::error::{Result, StgError};
use crate::flops::{flops_baseline, flops_stgformer, loglog_fit};
use crate::graph::{OperatorKind, PropagationOperator, RoadGraph};
use crate::metrics::masked_metrics;
use crate::model::{StgConfig, StgModel};
use crate::rng::SplitMix64;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Run every property; failures carry the error text.
pub fn run_all() -> Vec<PropertyResult> {
    let checks: Vec<(&'static str, fn() -> Result<String>)> = vec![
        ("linear-attention-identity", check_attention_equivalence),
        ("model-gradient-integrity", check_model_gradients),
        ("metric-oracles", check_metric_oracles),
        ("propagation-permutation-equivariance", check_permutation_equivariance),
        ("attention-cost-scaling", check_attention_scaling),
        ("flops-closed-forms", check_flops_arithmetic),
        ("stage-cost-agreement", check_stage_cost_agreement),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok(detail) => PropertyResult { name, passed: true, detail },
            Err(e) => PropertyResult { name, passed: false, detail: e.to_string() },
        })
        .collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Explicitly quadratic scaling-normalized attention `(QK^T)V / m`, built with
/// the same tape ops, as the oracle for the factored linear mode.
fn quadratic_scaled(
    tape: &mut Tape,
    h: crate::tape::TapeId,
    proj: crate::attention::BoundProjection,
    use_spatial: bool,
    use_temporal: bool,
) -> Result<crate::tape::TapeId> {
    let shape = tape.value(h).shape.clone();
    let (t_len, n, _c) = (shape[0], shape[1], shape[2]);
    let q = tape.matmul(h, proj.w_q)?;
    let k = tape.matmul(h, proj.w_k)?;
    let v = tape.matmul(h, proj.w_v)?;
    let mut parts = Vec::new();
    if use_spatial {
        let kt = tape.transpose_last2(k)?;
        let scores = tape.matmul(q, kt)?;
        let av = tape.matmul(scores, v)?;
        parts.push(tape.scale(av, 1.0 / n as f64)?);
    }
    if use_temporal {
        let qt = tape.permute(q, &[1, 0, 2])?;
        let kt = tape.permute(k, &[1, 0, 2])?;
        let vt = tape.permute(v, &[1, 0, 2])?;
        let ktt = tape.transpose_last2(kt)?;
        let scores = tape.matmul(qt, ktt)?;
        let av = tape.matmul(scores, vt)?;
        let scaled = tape.scale(av, 1.0 / t_len as f64)?;
        parts.push(tape.permute(scaled, &[1, 0, 2])?);
    }
    let combined = match parts.len() {
        2 => tape.add(parts[0], parts[1])?,
        1 => parts[0],
        _ => tape.zeros(&shape)?,
    };
    tape.matmul(combined, proj.w_o)
}

/// 100 random instances: factored `Q(K^T V)/n` equals quadratic `(QK^T)V/n`
/// to max relative error 1e-10.
pub fn check_attention_equivalence() -> Result<String> {
    let mut rng = SplitMix64::new(0x5157);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let t_len = 1 + rng.next_usize(16);
        let n = 1 + rng.next_usize(64);
        let c = 1 + rng.next_usize(32);
        let proj = QkvProjection::init(c, &mut rng);
        let h = Tensor::rand_uniform(&[t_len, n, c], -1.0, 1.0, &mut rng);
        let use_spatial = i % 3 != 0;
        let use_temporal = i % 3 != 1;
        let mut tape = Tape::new();
        let bp = bind_projection(&mut tape, &proj)?;
        let hid = tape.leaf(&h)?;
        let mode =
            AttentionMode { kind: AttnKind::LinearEfficient, use_spatial, use_temporal };
        let linear = st_attention(&mut tape, hid, bp, &mode)?;
        let quad = quadratic_scaled(&mut tape, hid, bp, use_spatial, use_temporal)?;
        let lv = tape.value(linear);
        let qv = tape.value(quad);
        for (a, b) in lv.data.iter().zip(&qv.data) {
            worst = worst.max(rel_err(*a, *b));
        }
        if worst > 1e-10 {
            return Err(StgError::Contract(format!(
                "instance {i} (T={t_len}, N={n}, C={c}): max relative error {worst:.3e} > 1e-10"
            )));
        }
    }
    Ok(format!("100 instances, max relative error {worst:.3e}"))
}

fn verification_model() -> Result<(StgModel, Tensor, Vec<CalendarIndex>, Tensor, Tensor)> {
    // T=2, N=3, C=4 (d=1), K=2
    let mut rng = SplitMix64::new(0x6a0d);
    let graph = RoadGraph::from_edges(3, &[(0, 1, 1.0), (1, 2, 0.8), (0, 2, 0.5)])?;
    let config = StgConfig {
        t_in: 2,
        s_out: 2,
        d: 1,
        k: 2,
        interval_minutes: 60,
        ..StgConfig::default()
    };
    let model = StgModel::init(&config, &graph, 1)?;
    let raw = Tensor::rand_uniform(&[2, 3, 1], -1.0, 1.0, &mut rng);
    let calendar = vec![
        CalendarIndex { day_of_week: 3, step_of_day: 10 },
        CalendarIndex { day_of_week: 3, step_of_day: 11 },
    ];
    let target = Tensor::rand_uniform(&[2, 3, 1], -1.0, 1.0, &mut rng);
    let mask = Tensor::filled(&[2, 3, 1], 1.0);
    Ok((model, raw, calendar, target, mask))
}

fn model_loss(
    model: &StgModel,
    raw: &Tensor,
    cal: &[CalendarIndex],
    target: &Tensor,
    mask: &Tensor,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (pred, _) = model.forward_on_tape(&mut tape, raw, cal)?;
    let t = tape.leaf(target)?;
    let m = tape.leaf(mask)?;
    let diff = tape.sub(pred, t)?;
    let abs = tape.abs(diff)?;
    let masked = tape.mul(abs, m)?;
    let total = tape.sum_all(masked)?;
    let loss = tape.scale(total, 1.0 / mask.data.iter().sum::<f64>())?;
    tape.value(loss).scalar_value()
}

/// Central finite differences (step 1e-5) against analytic gradients for every
/// trainable tensor of a T=2, N=3, C=4, K=2 model; relative error <= 1e-3.
pub fn check_model_gradients() -> Result<String> {
    let (model, raw, cal, target, mask) = verification_model()?;
    // analytic
    let mut tape = Tape::new();
    let (pred, leaves) = model.forward_on_tape(&mut tape, &raw, &cal)?;
    let t = tape.leaf(&target)?;
    let m = tape.leaf(&mask)?;
    let diff = tape.sub(pred, t)?;
    let abs = tape.abs(diff)?;
    let masked = tape.mul(abs, m)?;
    let total = tape.sum_all(masked)?;
    let loss = tape.scale(total, 1.0 / mask.data.iter().sum::<f64>())?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|&id| grads.data_or_zeros(id, tape.value(id).numel()))
        .collect();

    let names: Vec<&'static str> = model.params().iter().map(|(n, _)| *n).collect();
    let eps = 1e-5;
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for (p_idx, name) in names.iter().enumerate() {
        let numel = analytic[p_idx].len();
        for i in 0..numel {
            let mut up_model = model.clone();
            up_model.params_mut()[p_idx].data[i] += eps;
            let up = model_loss(&up_model, &raw, &cal, &target, &mask)?;
            let mut dn_model = model.clone();
            dn_model.params_mut()[p_idx].data[i] -= eps;
            let dn = model_loss(&dn_model, &raw, &cal, &target, &mask)?;
            let fd = (up - dn) / (2.0 * eps);
            let g = analytic[p_idx][i];
            let rel = rel_err(fd, g);
            worst = worst.max(rel);
            if rel > 1e-3 {
                return Err(StgError::Contract(format!(
                    "{name}[{i}]: finite difference {fd:.6e} vs analytic {g:.6e} (rel {rel:.3e})"
                )));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} parameters checked, worst relative error {worst:.3e}"))
}

/// 1000 random instances: masked MAE/RMSE/MAPE agree with scalar loops to
/// 1e-12, and MAE <= RMSE throughout.
pub fn check_metric_oracles() -> Result<String> {
    let mut rng = SplitMix64::new(0x3e7);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let rows = 1 + rng.next_usize(6);
        let cols = 1 + rng.next_usize(8);
        let mut truth = Tensor::rand_uniform(&[rows, cols], 1.0, 50.0, &mut rng);
        let pred = Tensor::rand_uniform(&[rows, cols], 1.0, 50.0, &mut rng);
        for v in truth.data.iter_mut() {
            if rng.next_f64() < 0.25 {
                *v = 0.0;
            }
        }
        let all_zero = truth.data.iter().all(|&v| v == 0.0);
        let report = match masked_metrics(&pred, &truth) {
            Ok(r) => r,
            Err(_) if all_zero => continue,
            Err(e) => return Err(e),
        };
        let (mut abs, mut sq, mut ape, mut cnt) = (0.0, 0.0, 0.0, 0.0);
        for (p, t) in pred.data.iter().zip(&truth.data) {
            if *t != 0.0 {
                abs += (p - t).abs();
                sq += (p - t) * (p - t);
                ape += (p - t).abs() / t.abs();
                cnt += 1.0;
            }
        }
        let errs = [
            rel_err(report.mae, abs / cnt),
            rel_err(report.rmse, (sq / cnt).sqrt()),
            rel_err(report.mape, 100.0 * ape / cnt),
        ];
        for e in errs {
            worst = worst.max(e);
            if e > 1e-12 {
                return Err(StgError::Contract(format!("instance {i}: oracle mismatch {e:.3e}")));
            }
        }
        if report.mae > report.rmse + 1e-15 {
            return Err(StgError::Contract(format!(
                "instance {i}: MAE {} > RMSE {}",
                report.mae, report.rmse
            )));
        }
    }
    Ok(format!("1000 instances, worst relative deviation {worst:.3e}"))
}

/// Propagation commutes with node relabeling on 50 random 10-node graphs, to
/// 1e-12.
pub fn check_permutation_equivariance() -> Result<String> {
    let mut rng = SplitMix64::new(0xe9);
    let n = 10;
    for case in 0..50 {
        let mut edges = Vec::new();
        for i in 1..n {
            edges.push((i - 1, i, rng.uniform(0.5, 1.5)));
        }
        for _ in 0..8 {
            let a = rng.next_usize(n);
            let b = rng.next_usize(n);
            if a != b {
                edges.push((a, b, rng.uniform(0.5, 1.5)));
            }
        }
        let graph = RoadGraph::from_edges(n, &edges)?;
        let op = PropagationOperator::build(&graph, OperatorKind::SgcAdjacency)?;
        let x = Tensor::rand_uniform(&[2, n, 3], -1.0, 1.0, &mut rng);
        let k = 3;
        let orders = op.propagate(&x, k)?;

        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let relabel: Vec<(usize, usize, f64)> =
            graph.edges.iter().map(|&(s, d, w)| (perm[s], perm[d], w)).collect();
        let graph_p = RoadGraph::from_edges(n, &relabel)?;
        let op_p = PropagationOperator::build(&graph_p, OperatorKind::SgcAdjacency)?;
        let mut xp = Tensor::zeros(&x.shape);
        for t in 0..2 {
            for i in 0..n {
                for c in 0..3 {
                    xp.data[(t * n + perm[i]) * 3 + c] = x.data[(t * n + i) * 3 + c];
                }
            }
        }
        let orders_p = op_p.propagate(&xp, k)?;
        for ord in 0..=k {
            for t in 0..2 {
                for i in 0..n {
                    for c in 0..3 {
                        let a = orders[ord].data[(t * n + i) * 3 + c];
                        let b = orders_p[ord].data[(t * n + perm[i]) * 3 + c];
                        if (a - b).abs() > 1e-12 {
                            return Err(StgError::Contract(format!(
                                "graph {case}, order {ord}: {a} vs {b}"
                            )));
                        }
                    }
                }
            }
        }
    }
    Ok("50 graphs, K=3, equivariant to 1e-12".into())
}

/// Measured multiply-adds of one attention branch, isolated as the count
/// difference between spatial-only and fully ablated runs.
pub fn measured_spatial_branch_madds(n: usize, kind: AttnKind) -> Result<u128> {
    let t_len = 2;
    let c = 4;
    let mut rng = SplitMix64::new(0xabc);
    let proj = QkvProjection::init(c, &mut rng);
    let h = Tensor::rand_uniform(&[t_len, n, c], -1.0, 1.0, &mut rng);
    let run = |use_spatial: bool| -> Result<u128> {
        let mut tape = Tape::new();
        let bp = bind_projection(&mut tape, &proj)?;
        let hid = tape.leaf(&h)?;
        let mode = AttentionMode { kind, use_spatial, use_temporal: false };
        st_attention(&mut tape, hid, bp, &mode)?;
        Ok(tape.counts().attention)
    };
    Ok(run(true)? - run(false)?)
}

/// Log-log slope of measured branch cost over N in {32, 64, 128, 256}:
/// 1 +/- 0.05 for the linear mode, 2 +/- 0.05 for quadratic softmax.
pub fn check_attention_scaling() -> Result<String> {
    let ns = [32usize, 64, 128, 256];
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let mut report = String::new();
    for (kind, want) in
        [(AttnKind::LinearEfficient, 1.0), (AttnKind::SoftmaxQuadratic, 2.0)]
    {
        let ys: Vec<f64> = ns
            .iter()
            .map(|&n| measured_spatial_branch_madds(n, kind).map(|v| v as f64))
            .collect::<Result<_>>()?;
        let (slope, r2) = loglog_fit(&xs, &ys)?;
        if (slope - want).abs() > 0.05 || r2 < 0.999 {
            return Err(StgError::Contract(format!(
                "{kind:?}: slope {slope:.4} (want {want} +/- 0.05), R^2 {r2:.6}"
            )));
        }
        report.push_str(&format!("{kind:?} slope {slope:.4} (R^2 {r2:.6}); "));
        // the linear mode's cost must not be quadratic: doubling N from 128
        // to 256 multiplies cost by <= 2.2
        if want == 1.0 {
            let ratio = ys[3] / ys[2];
            if ratio > 2.2 {
                return Err(StgError::Contract(format!("linear-mode 2N/N ratio {ratio:.3}")));
            }
        }
    }
    Ok(report)
}

/// The reference closed-form arithmetic, reproduced exactly.
pub fn check_flops_arithmetic() -> Result<String> {
    let stg3 = flops_stgformer(8600, 12, 32, 3, 201_363)?;
    let base = flops_baseline(8600, 12, 32, 3)?;
    if stg3 != 337_188_000 || base != 85_320_806_400 {
        return Err(StgError::Contract(format!("got {stg3} and {base}")));
    }
    let stg1 = flops_stgformer(8600, 12, 32, 1, 201_363)?;
    let r3 = format!("{:.6}", stg3 as f64 / base as f64);
    let r1 = format!("{:.6}", stg1 as f64 / base as f64);
    if r3 != "0.003952" || r1 != "0.001317" {
        return Err(StgError::Contract(format!("ratios {r3} / {r1}")));
    }
    Ok(format!("337188000 / 85320806400; ratios {r3} (K=3), {r1} (K=1)"))
}

/// Measured per-stage multiply-adds versus the closed-form terms on a concrete
/// forward pass: within 2x, with `|E|` read as the operator's stored-entry
/// count.
pub fn check_stage_cost_agreement() -> Result<String> {
    let n = 12;
    let mut rng = SplitMix64::new(0xdead);
    let mut edges = Vec::new();
    for i in 1..n {
        edges.push((i - 1, i, 1.0));
    }
    for _ in 0..10 {
        let a = rng.next_usize(n);
        let b = rng.next_usize(n);
        if a != b {
            edges.push((a, b, 1.0));
        }
    }
    let graph = RoadGraph::from_edges(n, &edges)?;
    let config = StgConfig {
        t_in: 4,
        s_out: 2,
        d: 2,
        k: 3,
        interval_minutes: 60,
        ..StgConfig::default()
    };
    let model = StgModel::init(&config, &graph, 1)?;
    let raw = Tensor::rand_uniform(&[4, n, 1], -1.0, 1.0, &mut rng);
    let cal: Vec<CalendarIndex> = (0..4)
        .map(|s| CalendarIndex { day_of_week: 1, step_of_day: s + 1 })
        .collect();
    let mut tape = Tape::new();
    model.forward_on_tape(&mut tape, &raw, &cal)?;
    let counts = tape.counts();
    let (k, c, t) = (config.k as u128, config.c() as u128, config.t_in as u128);
    let nn = n as u128;
    let e = model.op.matrix.nnz() as u128;

    // propagation: closed form K*C*|E| per step; measured includes the T axis
    let prop_form = k * c * e * t;
    let prop_ratio = counts.propagation as f64 / prop_form as f64;
    if !(0.5..=2.0).contains(&prop_ratio) {
        return Err(StgError::Contract(format!(
            "propagation measured {} vs closed form {prop_form} (ratio {prop_ratio:.3})",
            counts.propagation
        )));
    }
    // interaction: closed form K*N*T*C^2
    let inter_form = k * nn * t * c * c;
    let inter_ratio = counts.interaction as f64 / inter_form as f64;
    if !(0.5..=2.0).contains(&inter_ratio) {
        return Err(StgError::Contract(format!(
            "interaction measured {} vs closed form {inter_form} (ratio {inter_ratio:.3})",
            counts.interaction
        )));
    }
    Ok(format!(
        "propagation ratio {prop_ratio:.3}, interaction ratio {inter_ratio:.3} (both within 2x)"
    ))
}
