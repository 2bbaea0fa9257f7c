//! Dataset ingestion, synthetic data generation, and window slicing.
//!
//! A dataset lives in a directory: `manifest.txt` (key = value), a readings
//! file (binary STGT or long-form CSV `timestamp,node,value`), and an
//! edge-list graph file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDateTime, Timelike};

use crate::embedding::{steps_per_day, CalendarIndex};
use crate::error::{Result, StgError};
use crate::graph::RoadGraph;
use crate::metrics::{ha_baseline, MetricReport};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::util::atomic_write;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct StDataset {
    /// `[steps_total, N]` sensor readings (single input channel).
    pub readings: Tensor,
    pub calendar: Vec<CalendarIndex>,
    pub graph: RoadGraph,
    pub interval_minutes: usize,
    pub start: NaiveDateTime,
    pub train_len: usize,
    pub val_len: usize,
    pub test_len: usize,
}

/// Chronological 6:2:2 split: val and test get `floor(L/5)` steps each,
/// rounding remainders to train.
pub fn split_sizes(total: usize) -> (usize, usize, usize) {
    let val = total / 5;
    let test = total / 5;
    (total - val - test, val, test)
}

fn calendar_from_start(
    start: NaiveDateTime,
    steps: usize,
    interval_minutes: usize,
) -> Result<Vec<CalendarIndex>> {
    let spd = steps_per_day(interval_minutes)?;
    let mut out = Vec::with_capacity(steps);
    for i in 0..steps {
        let t = start + chrono::Duration::minutes((i * interval_minutes) as i64);
        let dow = t.weekday().number_from_monday() as usize;
        let minute_of_day = (t.hour() * 60 + t.minute()) as usize;
        if minute_of_day % interval_minutes != 0 {
            return Err(StgError::Data(format!(
                "step {i} at {t} is not aligned to the {interval_minutes}-minute grid"
            )));
        }
        let sod = minute_of_day / interval_minutes + 1;
        out.push(CalendarIndex::new(dow, sod, spd)?);
    }
    Ok(out)
}

impl StDataset {
    pub fn new(
        readings: Tensor,
        graph: RoadGraph,
        interval_minutes: usize,
        start: NaiveDateTime,
    ) -> Result<Self> {
        if readings.rank() != 2 {
            return Err(StgError::Shape(format!(
                "readings must be [steps, nodes], got {:?}",
                readings.shape
            )));
        }
        if readings.shape[1] != graph.n_nodes {
            return Err(StgError::Data(format!(
                "readings have {} nodes, graph has {}",
                readings.shape[1], graph.n_nodes
            )));
        }
        let total = readings.shape[0];
        let calendar = calendar_from_start(start, total, interval_minutes)?;
        let (train_len, val_len, test_len) = split_sizes(total);
        Ok(Self {
            readings,
            calendar,
            graph,
            interval_minutes,
            start,
            train_len,
            val_len,
            test_len,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.readings.shape[1]
    }

    pub fn total_steps(&self) -> usize {
        self.readings.shape[0]
    }

    pub fn split_range(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.train_len,
            Split::Val => self.train_len..self.train_len + self.val_len,
            Split::Test => self.train_len + self.val_len..self.total_steps(),
        }
    }

    /// Start offsets of all stride-1 windows of length `t + s` that fit
    /// entirely inside the split.
    pub fn window_starts(&self, split: Split, t: usize, s: usize) -> Result<Vec<usize>> {
        let range = self.split_range(split);
        let len = range.len();
        if len < t + s {
            return Err(StgError::Config(format!(
                "{split:?} split of {len} steps cannot fit a {t}+{s} window"
            )));
        }
        Ok((range.start..=range.end - t - s).collect())
    }

    /// Materialize one window from an arbitrary `[steps, N]` series aligned
    /// with this dataset (the raw readings, or a normalized copy).
    ///
    /// Returns the `[T, N, 1]` input, its calendar rows, and the `[S, N, 1]`
    /// target.
    pub fn window_from(
        &self,
        series: &Tensor,
        start: usize,
        t: usize,
        s: usize,
    ) -> (Tensor, Vec<CalendarIndex>, Tensor) {
        let n = self.n_nodes();
        debug_assert_eq!(series.shape, self.readings.shape);
        let mut raw = Tensor::zeros(&[t, n, 1]);
        raw.data.copy_from_slice(&series.data[start * n..(start + t) * n]);
        let mut target = Tensor::zeros(&[s, n, 1]);
        target.data.copy_from_slice(&series.data[(start + t) * n..(start + t + s) * n]);
        let calendar = self.calendar[start..start + t].to_vec();
        (raw, calendar, target)
    }

    /// Historical-average baseline over the test split.
    pub fn ha_report(&self, t: usize, s: usize) -> Result<MetricReport> {
        let spd = steps_per_day(self.interval_minutes)?;
        let dow: Vec<usize> = self.calendar.iter().map(|c| c.day_of_week).collect();
        let sod: Vec<usize> = self.calendar.iter().map(|c| c.step_of_day).collect();
        ha_baseline(
            &self.readings,
            &dow,
            &sod,
            spd,
            self.train_len,
            self.train_len + self.val_len,
            t,
            s,
        )
    }
}

// ---- synthetic generation ---------------------------------------------------

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_nodes: usize,
    pub days: usize,
    pub interval_minutes: usize,
    /// Random-geometric connection radius in the unit square.
    pub radius: f64,
    /// Neighbor-diffusion strength of the deviation process, in [0, 1].
    pub alpha: f64,
    /// Stationary standard deviation of the additive deviation process.
    pub sigma_noise: f64,
    /// Fraction of readings zeroed to exercise masking.
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_nodes: 20,
            days: 28,
            interval_minutes: 5,
            radius: 0.35,
            alpha: 0.3,
            sigma_noise: 5.0,
            missing_rate: 0.02,
            seed: 7,
        }
    }
}

/// One-step persistence of the deviation process.
const AR_RHO: f64 = 0.95;

fn gauss_bump(x: f64, center: f64, width: f64) -> f64 {
    let z = (x - center) / width;
    (-0.5 * z * z).exp()
}

/// Smooth double-peak commute profile over the fraction-of-day `x` in [0, 1).
fn daily_profile(x: f64) -> f64 {
    15.0 + 40.0 * gauss_bump(x, 8.0 / 24.0, 1.5 / 24.0) + 40.0 * gauss_bump(x, 18.0 / 24.0, 1.5 / 24.0)
}

pub fn synth(spec: &SynthSpec) -> Result<StDataset> {
    if spec.n_nodes == 0 || spec.days == 0 {
        return Err(StgError::Config("synthetic dataset needs nodes and days".into()));
    }
    if !(0.0..=1.0).contains(&spec.alpha) || !(0.0..=1.0).contains(&spec.missing_rate) {
        return Err(StgError::Config("alpha and missing_rate must lie in [0, 1]".into()));
    }
    let spd = steps_per_day(spec.interval_minutes)?;
    let n = spec.n_nodes;
    let total = spec.days * spd;

    // random geometric graph in the unit square
    let mut g_rng = SplitMix64::stream(spec.seed, 11);
    let pts: Vec<(f64, f64)> =
        (0..n).map(|_| (g_rng.next_f64(), g_rng.next_f64())).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = pts[i].0 - pts[j].0;
            let dy = pts[i].1 - pts[j].1;
            let dist = (dx * dx + dy * dy).sqrt();
            if dist <= spec.radius {
                edges.push((i, j, 1.0 - 0.5 * dist / spec.radius));
            }
        }
    }
    if edges.is_empty() {
        eprintln!(
            "warning: radius {} produced no edges on {} nodes; graph has self-loops only",
            spec.radius, n
        );
    }
    let graph = RoadGraph::from_edges(n, &edges)?;

    // row-normalized neighbor averaging for the deviation diffusion
    let row_norm: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| {
            let mut row: Vec<(usize, f64)> = (0..n)
                .filter_map(|j| {
                    let w = graph.adjacency.data[i * n + j];
                    (w > 0.0).then_some((j, w))
                })
                .collect();
            let sum: f64 = row.iter().map(|(_, w)| w).sum();
            if sum > 0.0 {
                for (_, w) in row.iter_mut() {
                    *w /= sum;
                }
            }
            row
        })
        .collect();

    let mut p_rng = SplitMix64::stream(spec.seed, 12);
    let scales: Vec<f64> = (0..n).map(|_| p_rng.uniform(0.8, 1.2)).collect();

    let mut d_rng = SplitMix64::stream(spec.seed, 13);
    let mut m_rng = SplitMix64::stream(spec.seed, 14);
    // innovation scale keeps the stationary per-node deviation std at sigma_noise
    let w_std = spec.sigma_noise * (1.0 - AR_RHO * AR_RHO).sqrt();
    let mut dev = vec![0.0f64; n];
    let mut readings = Tensor::zeros(&[total, n]);
    let start =
        NaiveDateTime::parse_from_str("2024-01-01T00:00:00", "%Y-%m-%dT%H:%M:%S").unwrap();
    let calendar = calendar_from_start(start, total, spec.interval_minutes)?;
    for step in 0..total {
        // AR(1) with graph diffusion: d <- rho * ((1-a) d + a * P_row d) + w
        let mixed: Vec<f64> = (0..n)
            .map(|i| {
                let neigh: f64 = row_norm[i].iter().map(|&(j, w)| w * dev[j]).sum();
                let neigh = if row_norm[i].is_empty() { dev[i] } else { neigh };
                AR_RHO * ((1.0 - spec.alpha) * dev[i] + spec.alpha * neigh)
            })
            .collect();
        for i in 0..n {
            dev[i] = mixed[i] + w_std * d_rng.normal();
        }
        let x = ((step % spd) as f64) / spd as f64;
        let weekend = calendar[step].day_of_week >= 6;
        let factor = if weekend { 0.7 } else { 1.0 };
        for i in 0..n {
            let base = scales[i] * daily_profile(x) * factor;
            let mut v = (base + dev[i]).max(0.0);
            if m_rng.next_f64() < spec.missing_rate {
                v = 0.0;
            }
            readings.data[step * n + i] = v;
        }
    }
    StDataset::new(readings, graph, spec.interval_minutes, start)
}

// ---- dataset files ----------------------------------------------------------

const TS_FMT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadingsFormat {
    Stgt,
    Csv,
}

/// Write `manifest.txt`, the readings file, and `graph.txt` into `dir`.
pub fn save_dataset(ds: &StDataset, dir: &Path, format: ReadingsFormat) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let readings_name = match format {
        ReadingsFormat::Stgt => "readings.stgt",
        ReadingsFormat::Csv => "readings.csv",
    };
    let manifest = format!(
        "interval_minutes = {}\nstart = {}\nreadings = {readings_name}\ngraph = graph.txt\n",
        ds.interval_minutes,
        ds.start.format(TS_FMT),
    );
    atomic_write(&dir.join("manifest.txt"), manifest.as_bytes())?;
    atomic_write(&dir.join("graph.txt"), ds.graph.write_edge_list().as_bytes())?;
    match format {
        ReadingsFormat::Stgt => ds.readings.save_stgt(&dir.join(readings_name))?,
        ReadingsFormat::Csv => {
            let n = ds.n_nodes();
            let mut out = String::from("timestamp,node,value\n");
            for step in 0..ds.total_steps() {
                let t = ds.start
                    + chrono::Duration::minutes((step * ds.interval_minutes) as i64);
                let ts = t.format(TS_FMT);
                for node in 0..n {
                    writeln!(out, "{ts},{node},{:?}", ds.readings.data[step * n + node])
                        .expect("string write");
                }
            }
            atomic_write(&dir.join(readings_name), out.as_bytes())?;
        }
    }
    Ok(())
}

fn manifest_value<'a>(map: &'a [(String, String)], key: &str, path: &Path) -> Result<&'a str> {
    map.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| StgError::Data(format!("{}: manifest missing `{key}`", path.display())))
}

fn load_csv_readings(path: &Path, interval_minutes: usize) -> Result<(Tensor, NaiveDateTime)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| StgError::Data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "timestamp,node,value" => {}
        _ => {
            return Err(StgError::Data(format!(
                "{}:1: expected `timestamp,node,value` header",
                path.display()
            )))
        }
    }
    let mut rows: Vec<(NaiveDateTime, usize, f64)> = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |what: &str| {
            StgError::Data(format!("{}:{}: {what} in `{line}`", path.display(), idx + 1))
        };
        let mut parts = line.splitn(3, ',');
        let ts = parts.next().ok_or_else(|| err("missing timestamp"))?;
        let ts = NaiveDateTime::parse_from_str(ts, TS_FMT).map_err(|_| err("bad timestamp"))?;
        let node: usize =
            parts.next().ok_or_else(|| err("missing node"))?.parse().map_err(|_| err("bad node"))?;
        let value: f64 = parts
            .next()
            .ok_or_else(|| err("missing value"))?
            .parse()
            .map_err(|_| err("bad value"))?;
        if let Some(&(prev, _, _)) = rows.last() {
            if ts < prev {
                return Err(err("non-monotone timestamp"));
            }
        }
        rows.push((ts, node, value));
    }
    if rows.is_empty() {
        return Err(StgError::Data(format!("{}: no data rows", path.display())));
    }
    let start = rows[0].0;
    let n = rows.iter().map(|&(_, node, _)| node).max().unwrap() + 1;
    let step_of = |ts: NaiveDateTime| -> Result<usize> {
        let mins = (ts - start).num_minutes();
        if mins < 0 || mins as usize % interval_minutes != 0 {
            return Err(StgError::Data(format!(
                "{}: timestamp {ts} off the {interval_minutes}-minute grid",
                path.display()
            )));
        }
        Ok(mins as usize / interval_minutes)
    };
    let total = step_of(rows.last().unwrap().0)? + 1;
    let mut data = vec![f64::NAN; total * n];
    for &(ts, node, value) in &rows {
        data[step_of(ts)? * n + node] = value;
    }
    if data.iter().any(|v| v.is_nan()) {
        return Err(StgError::Data(format!(
            "{}: incomplete grid — some (timestamp, node) cells are absent",
            path.display()
        )));
    }
    Ok((Tensor::from_vec(vec![total, n], data)?, start))
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<StDataset> {
    let manifest_path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| StgError::Data(format!("{}: {e}", manifest_path.display())))?;
    let mut kv = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            StgError::Data(format!("{}:{}: expected `key = value`", manifest_path.display(), idx + 1))
        })?;
        kv.push((k.trim().to_string(), v.trim().to_string()));
    }
    let interval: usize = manifest_value(&kv, "interval_minutes", &manifest_path)?
        .parse()
        .map_err(|_| StgError::Data(format!("{}: bad interval_minutes", manifest_path.display())))?;
    let start_str = manifest_value(&kv, "start", &manifest_path)?;
    let manifest_start = NaiveDateTime::parse_from_str(start_str, TS_FMT)
        .map_err(|_| StgError::Data(format!("{}: bad start `{start_str}`", manifest_path.display())))?;
    let readings_name = manifest_value(&kv, "readings", &manifest_path)?;
    let graph_name = manifest_value(&kv, "graph", &manifest_path)?;

    let graph = RoadGraph::from_edge_list_file(&dir.join(graph_name))?;
    let readings_path: PathBuf = dir.join(readings_name);
    let (readings, start) = if readings_name.ends_with(".csv") {
        let (r, s) = load_csv_readings(&readings_path, interval)?;
        if s != manifest_start {
            return Err(StgError::Data(format!(
                "{}: CSV starts at {s} but manifest says {manifest_start}",
                readings_path.display()
            )));
        }
        (r, s)
    } else {
        (Tensor::load_stgt(&readings_path)?, manifest_start)
    };
    StDataset::new(readings, graph, interval, start)
}
