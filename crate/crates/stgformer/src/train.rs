//! Training loop (Adam, masked-MAE loss, early stopping) and evaluation.

use std::path::Path;

use crate::data::{Split, StDataset};
use crate::embedding::CalendarIndex;
use crate::error::{Result, StgError};
use crate::metrics::{inverse_zscore, masked_metrics, zscore, MetricReport, NormStats};
use crate::model::{save_checkpoint, StgModel};
use crate::rng::SplitMix64;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(sizes: &[usize], lr: f64) -> Self {
        Self {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update over all parameters; `grads` aligns with `params`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm: f64 =
        grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

pub const GRAD_CLIP: f64 = 5.0;

#[derive(Debug, Clone)]
pub struct TrainState {
    pub epochs_run: usize,
    pub best_val_mae: f64,
    pub epochs_since_improvement: usize,
    /// Per-epoch (train masked-MAE loss, validation masked MAE).
    pub history: Vec<(f64, f64)>,
}

/// Masked-MAE loss (normalized space) and gradients for one window.
/// Returns `None` when the target mask is empty.
fn window_loss_and_grads(
    model: &StgModel,
    raw_norm: &Tensor,
    calendar: &[CalendarIndex],
    target_norm: &Tensor,
    mask: &Tensor,
    want_grads: bool,
) -> Result<Option<(f64, Vec<Vec<f64>>)>> {
    let mask_count: f64 = mask.data.iter().sum();
    if mask_count == 0.0 {
        return Ok(None);
    }
    let mut tape = Tape::new();
    let (pred, leaves) = model.forward_on_tape(&mut tape, raw_norm, calendar)?;
    let target_id = tape.leaf(target_norm)?;
    let mask_id = tape.leaf(mask)?;
    let diff = tape.sub(pred, target_id)?;
    let abs = tape.abs(diff)?;
    let masked = tape.mul(abs, mask_id)?;
    let total = tape.sum_all(masked)?;
    let loss = tape.scale(total, 1.0 / mask_count)?;
    let value = tape.value(loss).scalar_value()?;
    if !want_grads {
        return Ok(Some((value, Vec::new())));
    }
    let grads = tape.backward(loss)?;
    let out = leaves
        .iter()
        .map(|&id| grads.data_or_zeros(id, tape.value(id).numel()))
        .collect();
    Ok(Some((value, out)))
}

/// Fit normalization statistics on the training split only.
pub fn fit_train_stats(ds: &StDataset) -> Result<NormStats> {
    let n = ds.n_nodes();
    let train = Tensor::from_vec(
        vec![ds.train_len, n],
        ds.readings.data[..ds.train_len * n].to_vec(),
    )?;
    NormStats::fit(&train, 1)
}

/// Train in place; returns the state and the training-split statistics.
/// The model is left holding the best-validation parameters.
pub fn train(
    model: &mut StgModel,
    ds: &StDataset,
    checkpoint_path: Option<&Path>,
) -> Result<(TrainState, NormStats)> {
    let cfg = model.config.clone();
    let stats = fit_train_stats(ds)?;
    let norm = zscore(&ds.readings, &stats)?;
    let (t_in, s_out) = (cfg.t_in, cfg.s_out);
    let train_starts = ds.window_starts(Split::Train, t_in, s_out)?;
    let mut shuffle_rng = SplitMix64::stream(cfg.seed, 21);

    let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = Adam::new(&sizes, cfg.lr);
    let mut state = TrainState {
        epochs_run: 0,
        best_val_mae: f64::INFINITY,
        epochs_since_improvement: 0,
        history: Vec::new(),
    };
    let mut best_params: Option<Vec<Tensor>> = None;

    for epoch in 0..cfg.max_epochs {
        let mut order = train_starts.clone();
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_windows = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
            let mut used = 0usize;
            for &start in batch {
                let (raw_n, cal, tgt_n) = ds.window_from(&norm, start, t_in, s_out);
                let (_, _, tgt_raw) = ds.window_from(&ds.readings, start, t_in, s_out);
                let mask = Tensor {
                    shape: tgt_raw.shape.clone(),
                    data: tgt_raw.data.iter().map(|&v| if v != 0.0 { 1.0 } else { 0.0 }).collect(),
                    requires_grad: false,
                    grad: None,
                };
                let res = window_loss_and_grads(model, &raw_n, &cal, &tgt_n, &mask, true)
                    .map_err(|e| {
                        StgError::Train(format!("epoch {epoch}, batch {batch_idx}: {e}"))
                    })?;
                let Some((loss, grads)) = res else { continue };
                epoch_loss += loss;
                epoch_windows += 1;
                used += 1;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            if used == 0 {
                continue;
            }
            let inv = 1.0 / used as f64;
            for a in acc.iter_mut() {
                for v in a.iter_mut() {
                    *v *= inv;
                }
            }
            clip_global_norm(&mut acc, GRAD_CLIP);
            let mut params = model.params_mut();
            opt.step(&mut params, &acc);
        }
        let train_loss = if epoch_windows > 0 { epoch_loss / epoch_windows as f64 } else { 0.0 };

        let val = evaluate(model, ds, &stats, Split::Val, 1)?;
        state.history.push((train_loss, val.mae));
        state.epochs_run = epoch + 1;
        if state.best_val_mae - val.mae >= cfg.min_delta {
            state.best_val_mae = val.mae;
            state.epochs_since_improvement = 0;
            best_params = Some(model.params().iter().map(|(_, t)| (*t).clone()).collect());
            if let Some(path) = checkpoint_path {
                save_checkpoint(model, &stats, path)?;
            }
        } else {
            state.epochs_since_improvement += 1;
            if state.epochs_since_improvement >= cfg.patience.max(1) {
                break;
            }
        }
    }
    if let Some(best) = best_params {
        for (slot, saved) in model.params_mut().into_iter().zip(best) {
            slot.data = saved.data;
        }
    }
    Ok((state, stats))
}

/// Masked metrics over a split, in denormalized units.
///
/// `threads` splits windows into contiguous chunks written to disjoint output
/// slices, so results are identical for any thread count.
pub fn evaluate(
    model: &StgModel,
    ds: &StDataset,
    stats: &NormStats,
    split: Split,
    threads: usize,
) -> Result<MetricReport> {
    let cfg = &model.config;
    let (t_in, s_out) = (cfg.t_in, cfg.s_out);
    let n = ds.n_nodes();
    let starts = ds.window_starts(split, t_in, s_out)?;
    let norm = zscore(&ds.readings, stats)?;
    let w = starts.len();
    let mut pred = Tensor::zeros(&[w, s_out, n]);
    let mut truth = Tensor::zeros(&[w, s_out, n]);
    let threads = threads.max(1).min(w.max(1));
    let chunk = w.div_ceil(threads);

    let pred_chunks: Vec<&mut [f64]> = pred.data.chunks_mut(chunk * s_out * n).collect();
    let truth_chunks: Vec<&mut [f64]> = truth.data.chunks_mut(chunk * s_out * n).collect();
    let result: Result<()> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (ci, (pc, tc)) in pred_chunks.into_iter().zip(truth_chunks).enumerate() {
            let starts = &starts;
            let norm = &norm;
            handles.push(scope.spawn(move || -> Result<()> {
                for (wi, &start) in
                    starts.iter().skip(ci * chunk).take(pc.len() / (s_out * n)).enumerate()
                {
                    let (raw_n, cal, _) = ds.window_from(norm, start, t_in, s_out);
                    let p_norm = model.forward(&raw_n, &cal)?;
                    let p = inverse_zscore(&p_norm, stats)?;
                    pc[wi * s_out * n..(wi + 1) * s_out * n].copy_from_slice(&p.data);
                    let base = (start + t_in) * n;
                    tc[wi * s_out * n..(wi + 1) * s_out * n]
                        .copy_from_slice(&ds.readings.data[base..base + s_out * n]);
                }
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("evaluation thread panicked")?;
        }
        Ok(())
    });
    result?;
    masked_metrics(&pred, &truth)
}

/// Denormalized forecast for one window start.
pub fn predict(
    model: &StgModel,
    ds: &StDataset,
    stats: &NormStats,
    start: usize,
) -> Result<Tensor> {
    let cfg = &model.config;
    if start + cfg.t_in > ds.total_steps() {
        return Err(StgError::Contract(format!(
            "window at {start} runs past the {}-step series",
            ds.total_steps()
        )));
    }
    let norm = zscore(&ds.readings, stats)?;
    let n = ds.n_nodes();
    let mut raw_n = Tensor::zeros(&[cfg.t_in, n, 1]);
    raw_n.data.copy_from_slice(&norm.data[start * n..(start + cfg.t_in) * n]);
    let cal = ds.calendar[start..start + cfg.t_in].to_vec();
    let p_norm = model.forward(&raw_n, &cal)?;
    inverse_zscore(&p_norm, stats)
}
