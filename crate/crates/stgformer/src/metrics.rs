//! Masked evaluation metrics and z-score normalization.
//!
//! One global mask (`truth != 0`) serves MAE, RMSE, and MAPE alike; an
//! all-masked input is an error rather than a silent zero.

use serde::Serialize;

use crate::error::{Result, StgError};
use crate::tensor::Tensor;

/// Per-channel normalization statistics, fit on the training split only.
#[derive(Debug, Clone, Serialize)]
pub struct NormStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NormStats {
    /// Fit over the last axis as the channel axis (population standard deviation).
    pub fn fit(x: &Tensor, n_channels: usize) -> Result<Self> {
        if n_channels == 0 || x.numel() == 0 || x.numel() % n_channels != 0 {
            return Err(StgError::Contract(format!(
                "cannot split {} values into {} channels",
                x.numel(),
                n_channels
            )));
        }
        let per = x.numel() / n_channels;
        let mut mu = vec![0.0; n_channels];
        let mut sigma = vec![0.0; n_channels];
        for (i, v) in x.data.iter().enumerate() {
            mu[i % n_channels] += v;
        }
        for m in &mut mu {
            *m /= per as f64;
        }
        for (i, v) in x.data.iter().enumerate() {
            let d = v - mu[i % n_channels];
            sigma[i % n_channels] += d * d;
        }
        for (c, s) in sigma.iter_mut().enumerate() {
            *s = (*s / per as f64).sqrt();
            if *s <= 0.0 {
                return Err(StgError::Data(format!(
                    "channel {c} is constant (sigma = 0); cannot z-score normalize"
                )));
            }
        }
        Ok(Self { mu, sigma })
    }

    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(StgError::Contract("mu/sigma length mismatch".into()));
        }
        if let Some(c) = sigma.iter().position(|&s| s <= 0.0) {
            return Err(StgError::Data(format!("channel {c} has non-positive sigma")));
        }
        Ok(Self { mu, sigma })
    }

    pub fn n_channels(&self) -> usize {
        self.mu.len()
    }
}

fn check_channels(x: &Tensor, stats: &NormStats) -> Result<()> {
    let c = stats.n_channels();
    if x.numel() % c != 0 {
        return Err(StgError::Shape(format!(
            "tensor of {} values is not divisible into {} channels",
            x.numel(),
            c
        )));
    }
    Ok(())
}

/// `z = (x - mu) / sigma`, channels on the last axis.
pub fn zscore(x: &Tensor, stats: &NormStats) -> Result<Tensor> {
    check_channels(x, stats)?;
    let c = stats.n_channels();
    let mut out = x.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        *v = (*v - stats.mu[i % c]) / stats.sigma[i % c];
    }
    Ok(out)
}

/// Inverse of [`zscore`].
pub fn inverse_zscore(z: &Tensor, stats: &NormStats) -> Result<Tensor> {
    check_channels(z, stats)?;
    let c = stats.n_channels();
    let mut out = z.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        *v = *v * stats.sigma[i % c] + stats.mu[i % c];
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct HorizonRow {
    /// "3", "6", "12", or "average".
    pub horizon: String,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
    pub masked_count: usize,
    /// Per-step rows for horizons 3/6/12 (when present) plus the mean over
    /// all output steps; empty for inputs without a step axis.
    pub horizons: Vec<HorizonRow>,
}

impl MetricReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metric report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,mae,rmse,mape\n");
        out.push_str(&format!("all,{},{},{}\n", self.mae, self.rmse, self.mape));
        for row in &self.horizons {
            out.push_str(&format!("{},{},{},{}\n", row.horizon, row.mae, row.rmse, row.mape));
        }
        out
    }
}

fn pooled(pred: &[f64], truth: &[f64]) -> Result<(f64, f64, f64, usize)> {
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut ape = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if *t == 0.0 {
            continue;
        }
        let d = p - t;
        abs += d.abs();
        sq += d * d;
        ape += d.abs() / t.abs();
        count += 1;
    }
    if count == 0 {
        return Err(StgError::Data("all truth entries are zero; empty metric mask".into()));
    }
    let n = count as f64;
    Ok((abs / n, (sq / n).sqrt(), 100.0 * ape / n, count))
}

/// Masked MAE/RMSE/MAPE over entries where `truth != 0`.
///
/// For rank-3 `[windows, steps, nodes]` inputs the report also carries
/// single-step rows at horizons 3/6/12 (1-based) and their all-step average.
pub fn masked_metrics(pred: &Tensor, truth: &Tensor) -> Result<MetricReport> {
    if pred.shape != truth.shape {
        return Err(StgError::Shape(format!(
            "pred shape {:?} != truth shape {:?}",
            pred.shape, truth.shape
        )));
    }
    let (mae, rmse, mape, masked_count) = pooled(&pred.data, &truth.data)?;
    let mut horizons = Vec::new();
    if pred.rank() == 3 {
        let (w, s, n) = (pred.shape[0], pred.shape[1], pred.shape[2]);
        let step_metrics = |step: usize| -> Result<(f64, f64, f64)> {
            let mut p = Vec::with_capacity(w * n);
            let mut t = Vec::with_capacity(w * n);
            for wi in 0..w {
                let base = (wi * s + step) * n;
                p.extend_from_slice(&pred.data[base..base + n]);
                t.extend_from_slice(&truth.data[base..base + n]);
            }
            let (a, r, m, _) = pooled(&p, &t)?;
            Ok((a, r, m))
        };
        for h in [3usize, 6, 12] {
            if h <= s {
                let (a, r, m) = step_metrics(h - 1)?;
                horizons.push(HorizonRow { horizon: h.to_string(), mae: a, rmse: r, mape: m });
            }
        }
        let mut sums = (0.0, 0.0, 0.0);
        for step in 0..s {
            let (a, r, m) = step_metrics(step)?;
            sums.0 += a;
            sums.1 += r;
            sums.2 += m;
        }
        horizons.push(HorizonRow {
            horizon: "average".into(),
            mae: sums.0 / s as f64,
            rmse: sums.1 / s as f64,
            mape: sums.2 / s as f64,
        });
    }
    Ok(MetricReport { mae, rmse, mape, masked_count, horizons })
}

/// Historical-average baseline.
///
/// Each `(node, day_of_week, step_of_day)` cell is predicted by its mean over
/// nonzero training readings; cells never seen nonzero in training fall back
/// to the node's overall training mean. Evaluated over sliding test windows
/// with [`masked_metrics`].
pub fn ha_baseline(
    readings: &Tensor, // [L, N]
    dow: &[usize],     // 1..=7 per step
    sod: &[usize],     // 1..=steps_per_day per step
    steps_per_day: usize,
    train_len: usize,
    test_start: usize,
    t_in: usize,
    s_out: usize,
) -> Result<MetricReport> {
    if readings.rank() != 2 {
        return Err(StgError::Shape(format!("expected [L, N] readings, got {:?}", readings.shape)));
    }
    let (l, n) = (readings.shape[0], readings.shape[1]);
    if dow.len() != l || sod.len() != l {
        return Err(StgError::Contract("calendar index length mismatch".into()));
    }
    if train_len > l || test_start > l {
        return Err(StgError::Contract("split boundaries outside series".into()));
    }
    // train means per (node, dow, sod) cell, nonzero entries only
    let cells = 7 * steps_per_day;
    let mut cell_sum = vec![0.0; n * cells];
    let mut cell_cnt = vec![0u32; n * cells];
    let mut node_sum = vec![0.0; n];
    let mut node_cnt = vec![0u32; n];
    for t in 0..train_len {
        let cell = (dow[t] - 1) * steps_per_day + (sod[t] - 1);
        for node in 0..n {
            let v = readings.data[t * n + node];
            if v != 0.0 {
                cell_sum[node * cells + cell] += v;
                cell_cnt[node * cells + cell] += 1;
                node_sum[node] += v;
                node_cnt[node] += 1;
            }
        }
    }
    let predict = |t: usize, node: usize| -> f64 {
        let cell = (dow[t] - 1) * steps_per_day + (sod[t] - 1);
        let idx = node * cells + cell;
        if cell_cnt[idx] > 0 {
            cell_sum[idx] / cell_cnt[idx] as f64
        } else if node_cnt[node] > 0 {
            node_sum[node] / node_cnt[node] as f64
        } else {
            0.0
        }
    };
    let test_len = l - test_start;
    if test_len < t_in + s_out {
        return Err(StgError::Data(format!(
            "test split of {test_len} steps cannot fit a {t_in}+{s_out} window"
        )));
    }
    let windows = test_len - t_in - s_out + 1;
    let mut pred = Tensor::zeros(&[windows, s_out, n]);
    let mut truth = Tensor::zeros(&[windows, s_out, n]);
    for w in 0..windows {
        for s in 0..s_out {
            let t = test_start + w + t_in + s;
            for node in 0..n {
                pred.data[(w * s_out + s) * n + node] = predict(t, node);
                truth.data[(w * s_out + s) * n + node] = readings.data[t * n + node];
            }
        }
    }
    masked_metrics(&pred, &truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn exact_prediction_is_zero_error() {
        let t = Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = masked_metrics(&t, &t).unwrap();
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.mape, 0.0);
        assert_eq!(r.masked_count, 4);
    }

    #[test]
    fn zero_truth_entries_are_fully_ignored() {
        let truth = Tensor::from_vec(vec![2], vec![0.0, 10.0]).unwrap();
        let pred = Tensor::from_vec(vec![2], vec![999.0, 12.0]).unwrap();
        let r = masked_metrics(&pred, &truth).unwrap();
        assert_eq!(r.mae, 2.0);
        assert_eq!(r.rmse, 2.0);
        assert!((r.mape - 20.0).abs() < 1e-12);
        assert_eq!(r.masked_count, 1);
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let mut rng = SplitMix64::new(12);
        for _ in 0..50 {
            let mut truth = Tensor::rand_uniform(&[4, 5], 1.0, 10.0, &mut rng);
            let pred = Tensor::rand_uniform(&[4, 5], 1.0, 10.0, &mut rng);
            // sprinkle zeros
            for v in truth.data.iter_mut() {
                if rng.next_f64() < 0.2 {
                    *v = 0.0;
                }
            }
            match masked_metrics(&pred, &truth) {
                Ok(r) => {
                    let mut abs = 0.0;
                    let mut sq = 0.0;
                    let mut ape = 0.0;
                    let mut cnt = 0.0;
                    for i in 0..20 {
                        if truth.data[i] != 0.0 {
                            abs += (pred.data[i] - truth.data[i]).abs();
                            sq += (pred.data[i] - truth.data[i]).powi(2);
                            ape += (pred.data[i] - truth.data[i]).abs() / truth.data[i].abs();
                            cnt += 1.0;
                        }
                    }
                    assert!((r.mae - abs / cnt).abs() < 1e-12);
                    assert!((r.rmse - (sq / cnt).sqrt()).abs() < 1e-12);
                    assert!((r.mape - 100.0 * ape / cnt).abs() < 1e-12);
                    assert!(r.mae <= r.rmse + 1e-15);
                }
                Err(_) => assert!(truth.data.iter().all(|&v| v == 0.0)),
            }
        }
    }

    #[test]
    fn empty_mask_is_an_error() {
        let truth = Tensor::zeros(&[3]);
        let pred = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = masked_metrics(&pred, &truth).unwrap_err();
        assert!(err.to_string().contains("mask"), "{err}");
    }

    #[test]
    fn scaling_covariance() {
        let mut rng = SplitMix64::new(13);
        let truth = Tensor::rand_uniform(&[30], 1.0, 10.0, &mut rng);
        let pred = Tensor::rand_uniform(&[30], 1.0, 10.0, &mut rng);
        let r1 = masked_metrics(&pred, &truth).unwrap();
        let c = 3.5;
        let truth_c =
            Tensor::from_vec(vec![30], truth.data.iter().map(|v| v * c).collect()).unwrap();
        let pred_c = Tensor::from_vec(vec![30], pred.data.iter().map(|v| v * c).collect()).unwrap();
        let r2 = masked_metrics(&pred_c, &truth_c).unwrap();
        assert!((r2.mae - c * r1.mae).abs() < 1e-12);
        assert!((r2.rmse - c * r1.rmse).abs() < 1e-12);
        assert!((r2.mape - r1.mape).abs() < 1e-12);
    }

    #[test]
    fn masked_positions_do_not_affect_metrics() {
        let truth = Tensor::from_vec(vec![4], vec![5.0, 0.0, 7.0, 0.0]).unwrap();
        let base = Tensor::from_vec(vec![4], vec![6.0, 0.0, 6.0, 0.0]).unwrap();
        let wild = Tensor::from_vec(vec![4], vec![6.0, 1e9, 6.0, -1e9]).unwrap();
        let r1 = masked_metrics(&base, &truth).unwrap();
        let r2 = masked_metrics(&wild, &truth).unwrap();
        assert_eq!(r1.mae, r2.mae);
        assert_eq!(r1.rmse, r2.rmse);
        assert_eq!(r1.mape, r2.mape);
        assert_eq!(r1.masked_count, r2.masked_count);
    }

    #[test]
    fn horizon_rows_match_single_step_slices() {
        let mut rng = SplitMix64::new(14);
        let truth = Tensor::rand_uniform(&[5, 12, 3], 1.0, 10.0, &mut rng);
        let pred = Tensor::rand_uniform(&[5, 12, 3], 1.0, 10.0, &mut rng);
        let r = masked_metrics(&pred, &truth).unwrap();
        assert_eq!(r.horizons.len(), 4); // 3, 6, 12, average
        for (row, h) in r.horizons.iter().zip([3usize, 6, 12]) {
            // independent slice oracle
            let mut p = Vec::new();
            let mut t = Vec::new();
            for w in 0..5 {
                for node in 0..3 {
                    p.push(pred.data[(w * 12 + h - 1) * 3 + node]);
                    t.push(truth.data[(w * 12 + h - 1) * 3 + node]);
                }
            }
            let ps = Tensor::from_vec(vec![p.len()], p).unwrap();
            let ts = Tensor::from_vec(vec![t.len()], t).unwrap();
            let want = masked_metrics(&ps, &ts).unwrap();
            assert_eq!(row.horizon, h.to_string());
            assert!((row.mae - want.mae).abs() < 1e-12);
            assert!((row.rmse - want.rmse).abs() < 1e-12);
            assert!((row.mape - want.mape).abs() < 1e-12);
        }
        assert_eq!(r.horizons[3].horizon, "average");
    }

    #[test]
    fn short_horizon_output_drops_missing_rows() {
        let mut rng = SplitMix64::new(15);
        let truth = Tensor::rand_uniform(&[4, 6, 2], 1.0, 5.0, &mut rng);
        let pred = Tensor::rand_uniform(&[4, 6, 2], 1.0, 5.0, &mut rng);
        let r = masked_metrics(&pred, &truth).unwrap();
        let labels: Vec<&str> = r.horizons.iter().map(|h| h.horizon.as_str()).collect();
        assert_eq!(labels, vec!["3", "6", "average"]);
    }

    #[test]
    fn zscore_basics_and_round_trip() {
        let stats = NormStats::new(vec![10.0], vec![2.0]).unwrap();
        let x = Tensor::from_vec(vec![2], vec![10.0, 12.0]).unwrap();
        let z = zscore(&x, &stats).unwrap();
        assert_eq!(z.data, vec![0.0, 1.0]);
        let mut rng = SplitMix64::new(16);
        let x = Tensor::rand_uniform(&[7, 3], -50.0, 50.0, &mut rng);
        let stats = NormStats::fit(&x, 3).unwrap();
        let back = inverse_zscore(&zscore(&x, &stats).unwrap(), &stats).unwrap();
        for (a, b) in back.data.iter().zip(&x.data) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn constant_channel_rejected() {
        let x = Tensor::from_vec(vec![3, 2], vec![1.0, 5.0, 1.0, 6.0, 1.0, 7.0]).unwrap();
        let err = NormStats::fit(&x, 2).unwrap_err();
        assert!(err.to_string().contains("channel 0"), "{err}");
    }

    #[test]
    fn fit_matches_population_moments() {
        let x = Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let stats = NormStats::fit(&x, 1).unwrap();
        assert!((stats.mu[0] - 2.5).abs() < 1e-15);
        assert!((stats.sigma[0] - (1.25f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ha_is_exact_on_periodic_data() {
        // 2 weeks of perfectly weekly-periodic data, 4 steps/day, 2 nodes
        let spd = 4;
        let l = 14 * spd;
        let n = 2;
        let mut readings = Tensor::zeros(&[l, n]);
        let mut dow = Vec::with_capacity(l);
        let mut sod = Vec::with_capacity(l);
        for t in 0..l {
            let day = t / spd;
            dow.push(day % 7 + 1);
            sod.push(t % spd + 1);
            for node in 0..n {
                readings.data[t * n + node] =
                    10.0 + (node as f64) + ((day % 7) as f64) + 0.5 * ((t % spd) as f64);
            }
        }
        // train on week 1, test on week 2
        let r = ha_baseline(&readings, &dow, &sod, spd, 7 * spd, 7 * spd, 2, 2).unwrap();
        assert!(r.mae < 1e-12, "mae {}", r.mae);
    }

    #[test]
    fn ha_constant_series_is_zero_error() {
        let l = 20;
        let readings = Tensor::filled(&[l, 1], 7.0);
        let dow: Vec<usize> = (0..l).map(|t| t / 4 % 7 + 1).collect();
        let sod: Vec<usize> = (0..l).map(|t| t % 4 + 1).collect();
        let r = ha_baseline(&readings, &dow, &sod, 4, 12, 12, 2, 2).unwrap();
        assert_eq!(r.mae, 0.0);
    }

    #[test]
    fn ha_unseen_cell_falls_back_to_node_mean() {
        // training covers only dow=1; test is dow=2 → node-mean fallback
        let spd = 2;
        let l = 8;
        let mut readings = Tensor::zeros(&[l, 1]);
        let mut dow = vec![1usize; l];
        let mut sod = Vec::new();
        for t in 0..l {
            sod.push(t % spd + 1);
            readings.data[t] = if t < 4 { 4.0 + t as f64 } else { 10.0 };
        }
        for d in dow.iter_mut().skip(4) {
            *d = 2;
        }
        // train mean over steps 0..4 is (4+5+6+7)/4 = 5.5
        let r = ha_baseline(&readings, &dow, &sod, spd, 4, 4, 1, 2).unwrap();
        assert!((r.mae - 4.5).abs() < 1e-12, "mae {}", r.mae);
    }

    #[test]
    fn report_serializes_to_single_json_line_and_csv() {
        let t = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let r = masked_metrics(&t, &t).unwrap();
        let json = r.to_json_line();
        assert!(!json.contains('\n'));
        assert!(json.contains("\"mae\":0.0"));
        let csv = r.to_csv();
        assert!(csv.starts_with("horizon,mae,rmse,mape\n"));
        assert!(csv.contains("all,0,0,0"));
    }
}
