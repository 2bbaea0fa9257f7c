//! Data embedding: feature projection, weekly/daily cycle tables, and a
//! learned spatiotemporal positional tensor, concatenated into `[T, N, 4d]`.

use crate::error::{Result, StgError};
use crate::rng::SplitMix64;
use crate::tape::{Tape, TapeId};
use crate::tensor::Tensor;

pub const MINUTES_PER_DAY: usize = 1440;

pub fn steps_per_day(interval_minutes: usize) -> Result<usize> {
    if interval_minutes == 0 || MINUTES_PER_DAY % interval_minutes != 0 {
        return Err(StgError::Config(format!(
            "interval of {interval_minutes} minutes does not divide a day"
        )));
    }
    Ok(MINUTES_PER_DAY / interval_minutes)
}

/// 1-based calendar position of one time step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalendarIndex {
    /// 1..=7, Monday = 1.
    pub day_of_week: usize,
    /// 1..=steps_per_day.
    pub step_of_day: usize,
}

impl CalendarIndex {
    pub fn new(day_of_week: usize, step_of_day: usize, steps_per_day: usize) -> Result<Self> {
        if !(1..=7).contains(&day_of_week) {
            return Err(StgError::Data(format!("day_of_week {day_of_week} outside 1..=7")));
        }
        if !(1..=steps_per_day).contains(&step_of_day) {
            return Err(StgError::Data(format!(
                "step_of_day {step_of_day} outside 1..={steps_per_day}"
            )));
        }
        Ok(Self { day_of_week, step_of_day })
    }
}

/// Trainable embedding tables. Concatenated output width is `4d`.
#[derive(Debug, Clone)]
pub struct EmbeddingTables {
    /// `[C_in, d]` feature projection.
    pub w_data: Tensor,
    /// `[d]` projection bias.
    pub b_data: Tensor,
    /// `[7, d]` weekly cycle table.
    pub t_w: Tensor,
    /// `[steps_per_day, d]` daily cycle table.
    pub t_d: Tensor,
    /// `[N, T, d]` learned positional tensor.
    pub x_ste: Tensor,
    pub d: usize,
    pub steps_per_day: usize,
}

impl EmbeddingTables {
    pub fn init(
        c_in: usize,
        d: usize,
        n_nodes: usize,
        t_in: usize,
        steps_per_day: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        Self {
            w_data: Tensor::xavier(&[c_in, d], c_in, d, rng).trainable(),
            b_data: Tensor::zeros(&[d]).trainable(),
            t_w: Tensor::rand_uniform(&[7, d], -bound, bound, rng).trainable(),
            t_d: Tensor::rand_uniform(&[steps_per_day, d], -bound, bound, rng).trainable(),
            x_ste: Tensor::rand_uniform(&[n_nodes, t_in, d], -bound, bound, rng).trainable(),
            d,
            steps_per_day,
        }
    }

    pub fn zeros(c_in: usize, d: usize, n_nodes: usize, t_in: usize, steps_per_day: usize) -> Self {
        Self {
            w_data: Tensor::zeros(&[c_in, d]).trainable(),
            b_data: Tensor::zeros(&[d]).trainable(),
            t_w: Tensor::zeros(&[7, d]).trainable(),
            t_d: Tensor::zeros(&[steps_per_day, d]).trainable(),
            x_ste: Tensor::zeros(&[n_nodes, t_in, d]).trainable(),
            d,
            steps_per_day,
        }
    }
}

/// Tape leaves for one forward pass over the tables.
#[derive(Debug, Clone, Copy)]
pub struct BoundTables {
    pub w_data: TapeId,
    pub b_data: TapeId,
    pub t_w: TapeId,
    pub t_d: TapeId,
    pub x_ste: TapeId,
}

pub fn bind_tables(tape: &mut Tape, tables: &EmbeddingTables) -> Result<BoundTables> {
    Ok(BoundTables {
        w_data: tape.leaf(&tables.w_data)?,
        b_data: tape.leaf(&tables.b_data)?,
        t_w: tape.leaf(&tables.t_w)?,
        t_d: tape.leaf(&tables.t_d)?,
        x_ste: tape.leaf(&tables.x_ste)?,
    })
}

/// Embed a raw `[T, N, C_in]` window into `[T, N, 4d]`.
///
/// Per (t, n): `concat(raw[t,n,:] W_data + b, t_w[dow(t)], t_d[sod(t)], x_ste[n,t,:])`.
/// Cycle rows are broadcast identically over all nodes at a given step.
pub fn embed(
    tape: &mut Tape,
    bound: BoundTables,
    raw: TapeId,
    calendar: &[CalendarIndex],
    steps_per_day: usize,
) -> Result<TapeId> {
    let shape = tape.value(raw).shape.clone();
    if shape.len() != 3 {
        return Err(StgError::Shape(format!("embed expects [T, N, C_in], got {shape:?}")));
    }
    let (t_in, n) = (shape[0], shape[1]);
    if calendar.len() != t_in {
        return Err(StgError::Contract(format!(
            "window has {} steps but {} calendar indices",
            t_in,
            calendar.len()
        )));
    }
    let ste_shape = tape.value(bound.x_ste).shape.clone();
    if ste_shape != [n, t_in, tape.value(bound.t_w).shape[1]] {
        return Err(StgError::Contract(format!(
            "x_ste shape {ste_shape:?} does not match window [T={t_in}, N={n}]"
        )));
    }
    let mut dow_idx = Vec::with_capacity(t_in);
    let mut sod_idx = Vec::with_capacity(t_in);
    for (step, cal) in calendar.iter().enumerate() {
        if !(1..=7).contains(&cal.day_of_week) || !(1..=steps_per_day).contains(&cal.step_of_day) {
            return Err(StgError::Data(format!(
                "step {step}: calendar index (dow {}, sod {}) out of range",
                cal.day_of_week, cal.step_of_day
            )));
        }
        dow_idx.push(cal.day_of_week - 1);
        sod_idx.push(cal.step_of_day - 1);
    }
    let d = tape.value(bound.t_w).shape[1];

    // projection: [T,N,C_in] x [C_in,d] -> [T,N,d], plus bias
    let projected = tape.matmul(raw, bound.w_data)?;
    let x_data = tape.add_bias(projected, bound.b_data)?;

    // cycle rows [T,d] -> [T,1,d] -> broadcast over nodes
    let broadcast = |tape: &mut Tape, rows: TapeId| -> Result<TapeId> {
        let narrow = tape.reshape(rows, &[t_in, 1, d])?;
        tape.expand_axis(narrow, 1, n)
    };
    let w_rows = tape.gather_rows(bound.t_w, &dow_idx)?;
    let x_week = broadcast(tape, w_rows)?;
    let d_rows = tape.gather_rows(bound.t_d, &sod_idx)?;
    let x_day = broadcast(tape, d_rows)?;

    // positional tensor [N,T,d] -> [T,N,d]
    let x_pos = tape.permute(bound.x_ste, &[1, 0, 2])?;

    tape.concat(&[x_data, x_week, x_day, x_pos], 2)
}
