//! Benchmark kernels: Monte Carlo π, Mandelbrot escape counts and the
//! two-number adder used by the embedding example.
//!
//! Every kernel is resumable from the progress recorded in its payload, so a
//! task picked up from a checkpoint performs only the outstanding units and
//! still produces exactly the payload of an uninterrupted run.
//!
//! Monte Carlo draws come from SplitMix64 (constants below), which is counter
//! based: draw `i` of a stream seeded with `s` is `mix(s + (i + 1) * GAMMA)`.
//! Resuming at iteration `j` therefore needs only `(seed, j)`, not generator
//! internals, and any client implementing the same mix produces the same
//! stream.

use std::io::{self, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{Payload, Task, TaskId};
use crate::error::KernelError;

pub const ADD: &str = "add";
pub const MONTE_CARLO: &str = "monte-carlo";
pub const MANDELBROT: &str = "mandelbrot";

pub const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_2: u64 = 0x94D0_49BB_1331_11EB;

#[inline]
pub fn splitmix_mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_2);
    z ^ (z >> 31)
}

/// Output number `index` (zero based) of the SplitMix64 stream seeded with
/// `seed`.
#[inline]
pub fn splitmix_at(seed: u64, index: u64) -> u64 {
    splitmix_mix(seed.wrapping_add(index.wrapping_add(1).wrapping_mul(SPLITMIX_GAMMA)))
}

/// Top 53 bits scaled into [0, 1).
#[inline]
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Sequential SplitMix64, for callers that just want a stream.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(SPLITMIX_GAMMA);
        splitmix_mix(self.state)
    }

    pub fn next_f64(&mut self) -> f64 {
        unit_f64(self.next_u64())
    }
}

/// A resumable unit of computation over a task payload.
pub trait Kernel: Send + Sync {
    fn id(&self) -> &'static str;

    fn total_units(&self, payload: &Payload) -> Result<u64, KernelError>;

    fn done_units(&self, payload: &Payload) -> Result<u64, KernelError>;

    /// Computes from the recorded progress up to `to` units (clamped to the
    /// total) and records the new progress in the payload.
    fn advance(&self, payload: &mut Payload, to: u64) -> Result<(), KernelError>;

    /// Records progress up to `to` without computing anything. Used when
    /// compute time is simulated; the payload then carries no results.
    fn skip(&self, payload: &mut Payload, to: u64) -> Result<(), KernelError>;

    /// The payload fields that capture progress; sent with checkpoints.
    fn checkpoint_fields(&self, payload: &Payload) -> Payload;
}

pub fn lookup(kernel_id: &str) -> Result<Arc<dyn Kernel>, KernelError> {
    match kernel_id {
        ADD => Ok(Arc::new(AddKernel)),
        MONTE_CARLO => Ok(Arc::new(MonteCarloKernel)),
        MANDELBROT => Ok(Arc::new(MandelbrotKernel)),
        other => Err(KernelError::UnknownKernel(other.to_string())),
    }
}

fn to_payload<T: Serialize>(value: &T) -> Payload {
    match serde_json::to_value(value).expect("kernel state serializes") {
        Value::Object(map) => map,
        _ => unreachable!("kernel state is a struct"),
    }
}

fn from_payload<T: for<'de> Deserialize<'de>>(
    payload: &Payload,
    field: &'static str,
) -> Result<T, KernelError> {
    serde_json::from_value(Value::Object(payload.clone()))
        .map_err(|_| KernelError::BadPayload { field })
}

fn pick(payload: &Payload, keys: &[&str]) -> Payload {
    keys.iter()
        .filter_map(|k| payload.get(*k).map(|v| (k.to_string(), v.clone())))
        .collect()
}

// ---------------------------------------------------------------------------
// add

pub struct AddKernel;

impl Kernel for AddKernel {
    fn id(&self) -> &'static str {
        ADD
    }

    fn total_units(&self, _payload: &Payload) -> Result<u64, KernelError> {
        Ok(1)
    }

    fn done_units(&self, payload: &Payload) -> Result<u64, KernelError> {
        Ok(u64::from(payload.contains_key("result")))
    }

    fn advance(&self, payload: &mut Payload, to: u64) -> Result<(), KernelError> {
        if to == 0 || payload.contains_key("result") {
            return Ok(());
        }
        let a = payload.get("a").ok_or(KernelError::BadPayload { field: "a" })?;
        let b = payload.get("b").ok_or(KernelError::BadPayload { field: "b" })?;
        let result = match (a.as_i64(), b.as_i64()) {
            (Some(x), Some(y)) => x
                .checked_add(y)
                .map(Value::from)
                .ok_or_else(|| KernelError::Invalid("integer overflow".into()))?,
            _ => {
                let x = a.as_f64().ok_or(KernelError::BadPayload { field: "a" })?;
                let y = b.as_f64().ok_or(KernelError::BadPayload { field: "b" })?;
                Value::from(x + y)
            }
        };
        payload.insert("result".into(), result);
        Ok(())
    }

    fn skip(&self, payload: &mut Payload, to: u64) -> Result<(), KernelError> {
        if to > 0 {
            payload.insert("result".into(), Value::Null);
        }
        Ok(())
    }

    fn checkpoint_fields(&self, payload: &Payload) -> Payload {
        pick(payload, &["result"])
    }
}

// ---------------------------------------------------------------------------
// Monte Carlo

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonteCarloTask {
    pub iterations: u64,
    pub seed: u64,
    #[serde(default)]
    pub hits: u64,
    #[serde(default)]
    pub done_iterations: u64,
}

impl MonteCarloTask {
    pub fn new(iterations: u64, seed: u64) -> Self {
        Self {
            iterations,
            seed,
            hits: 0,
            done_iterations: 0,
        }
    }

    pub fn to_payload(&self) -> Payload {
        to_payload(self)
    }

    pub fn from_payload(payload: &Payload) -> Result<Self, KernelError> {
        let t: Self = from_payload(payload, "iterations")?;
        if t.hits > t.done_iterations || t.done_iterations > t.iterations {
            return Err(KernelError::Invalid(
                "monte-carlo state violates hits <= done <= iterations".into(),
            ));
        }
        Ok(t)
    }
}

#[inline]
pub fn is_hit(x: f64, y: f64) -> bool {
    x * x + y * y <= 1.0
}

/// Runs iterations `done_iterations..to` (clamped to `iterations`).
/// Iteration `j` uses draws `2j` and `2j + 1` of the task's stream.
pub fn mc_run(task: &mut MonteCarloTask, to: u64) {
    let end = to.min(task.iterations);
    let mut hits = 0u64;
    for j in task.done_iterations..end {
        let x = unit_f64(splitmix_at(task.seed, 2 * j));
        let y = unit_f64(splitmix_at(task.seed, 2 * j + 1));
        hits += u64::from(is_hit(x, y));
    }
    if end > task.done_iterations {
        task.hits += hits;
        task.done_iterations = end;
    }
}

/// 4 × Σhits / Σiterations.
pub fn mc_reduce(results: &[MonteCarloTask]) -> f64 {
    let (hits, iters) = results
        .iter()
        .fold((0u128, 0u128), |(h, n), t| (h + t.hits as u128, n + t.iterations as u128));
    if iters == 0 {
        return 0.0;
    }
    4.0 * hits as f64 / iters as f64
}

pub struct MonteCarloKernel;

impl Kernel for MonteCarloKernel {
    fn id(&self) -> &'static str {
        MONTE_CARLO
    }

    fn total_units(&self, payload: &Payload) -> Result<u64, KernelError> {
        Ok(MonteCarloTask::from_payload(payload)?.iterations)
    }

    fn done_units(&self, payload: &Payload) -> Result<u64, KernelError> {
        Ok(MonteCarloTask::from_payload(payload)?.done_iterations)
    }

    fn advance(&self, payload: &mut Payload, to: u64) -> Result<(), KernelError> {
        let mut t = MonteCarloTask::from_payload(payload)?;
        mc_run(&mut t, to);
        payload.insert("hits".into(), t.hits.into());
        payload.insert("done_iterations".into(), t.done_iterations.into());
        Ok(())
    }

    fn skip(&self, payload: &mut Payload, to: u64) -> Result<(), KernelError> {
        let t = MonteCarloTask::from_payload(payload)?;
        let end = to.min(t.iterations).max(t.done_iterations);
        payload.insert("done_iterations".into(), end.into());
        Ok(())
    }

    fn checkpoint_fields(&self, payload: &Payload) -> Payload {
        pick(payload, &["hits", "done_iterations"])
    }
}

// ---------------------------------------------------------------------------
// Mandelbrot

/// The global image: a `width × height` grid of square pixels whose
/// top-left corner sits at `(x0, y0)` in the complex plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MandelbrotProblem {
    pub x0: f64,
    pub y0: f64,
    pub pixel_step: f64,
    pub width: u32,
    pub height: u32,
    pub max_iter: u32,
}

impl Default for MandelbrotProblem {
    /// Window [-2.5, 1] × [-1.3125, 1.3125] at 400×300, 1000 iterations.
    fn default() -> Self {
        Self::window(-2.5, 1.0, -1.3125, 400, 300, 1000)
    }
}

impl MandelbrotProblem {
    pub fn window(x_min: f64, x_max: f64, y_min: f64, width: u32, height: u32, max_iter: u32) -> Self {
        Self {
            x0: x_min,
            y0: y_min,
            pixel_step: (x_max - x_min) / width as f64,
            width,
            height,
            max_iter,
        }
    }

    /// Same window resampled at a different resolution.
    pub fn resized(&self, width: u32, height: u32) -> Self {
        let x_span = self.pixel_step * self.width as f64;
        Self {
            pixel_step: x_span / width as f64,
            width,
            height,
            ..*self
        }
    }

    pub fn pixels(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn point(&self, pixel: u64) -> (f64, f64) {
        let col = pixel % self.width as u64;
        let row = pixel / self.width as u64;
        (
            self.x0 + col as f64 * self.pixel_step,
            self.y0 + row as f64 * self.pixel_step,
        )
    }
}

/// A contiguous run of pixels (row-major) of the global grid. When the
/// split divides the rows evenly every run is a band of whole rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MandelbrotTask {
    pub x0: f64,
    pub y0: f64,
    pub pixel_step: f64,
    pub grid_width: u32,
    pub grid_height: u32,
    pub start_pixel: u64,
    pub pixel_count: u64,
    pub max_iter: u32,
    #[serde(default)]
    pub counts: Vec<u32>,
    #[serde(default)]
    pub done_pixels: u64,
}

impl MandelbrotTask {
    pub fn problem(&self) -> MandelbrotProblem {
        MandelbrotProblem {
            x0: self.x0,
            y0: self.y0,
            pixel_step: self.pixel_step,
            width: self.grid_width,
            height: self.grid_height,
            max_iter: self.max_iter,
        }
    }

    pub fn to_payload(&self) -> Payload {
        to_payload(self)
    }

    pub fn from_payload(payload: &Payload) -> Result<Self, KernelError> {
        let t: Self = from_payload(payload, "start_pixel")?;
        if t.done_pixels > t.pixel_count || t.counts.len() as u64 != t.done_pixels {
            return Err(KernelError::Invalid(
                "mandelbrot state: counts must cover exactly the done pixels".into(),
            ));
        }
        if t.grid_width == 0 || t.start_pixel + t.pixel_count > t.grid_width as u64 * t.grid_height as u64 {
            return Err(KernelError::Invalid("mandelbrot run exceeds the grid".into()));
        }
        Ok(t)
    }
}

/// First `n ≤ max_iter` with |zₙ| > 2 for z₀ = 0, zₙ₊₁ = zₙ² + c; `max_iter`
/// if the orbit stays bounded.
#[inline]
pub fn escape_count(cr: f64, ci: f64, max_iter: u32) -> u32 {
    let (mut zr, mut zi) = (0.0f64, 0.0f64);
    for n in 1..=max_iter {
        let nzr = zr * zr - zi * zi + cr;
        zi = 2.0 * zr * zi + ci;
        zr = nzr;
        if zr * zr + zi * zi > 4.0 {
            return n;
        }
    }
    max_iter
}

/// Fills pixels `done_pixels..to` (clamped to the run length).
pub fn mandel_run(task: &mut MandelbrotTask, to: u64) {
    let end = to.min(task.pixel_count);
    let problem = task.problem();
    for local in task.done_pixels..end {
        let (cr, ci) = problem.point(task.start_pixel + local);
        task.counts.push(escape_count(cr, ci, task.max_iter));
    }
    task.done_pixels = task.done_pixels.max(end);
}

pub struct MandelbrotKernel;

impl Kernel for MandelbrotKernel {
    fn id(&self) -> &'static str {
        MANDELBROT
    }

    fn total_units(&self, payload: &Payload) -> Result<u64, KernelError> {
        Ok(MandelbrotTask::from_payload(payload)?.pixel_count)
    }

    fn done_units(&self, payload: &Payload) -> Result<u64, KernelError> {
        Ok(MandelbrotTask::from_payload(payload)?.done_pixels)
    }

    fn advance(&self, payload: &mut Payload, to: u64) -> Result<(), KernelError> {
        let mut t = MandelbrotTask::from_payload(payload)?;
        mandel_run(&mut t, to);
        payload.insert("counts".into(), serde_json::to_value(&t.counts).unwrap());
        payload.insert("done_pixels".into(), t.done_pixels.into());
        Ok(())
    }

    fn skip(&self, payload: &mut Payload, to: u64) -> Result<(), KernelError> {
        let mut t = MandelbrotTask::from_payload(payload)?;
        let end = to.min(t.pixel_count).max(t.done_pixels);
        t.counts.resize(end as usize, 0);
        payload.insert("counts".into(), serde_json::to_value(&t.counts).unwrap());
        payload.insert("done_pixels".into(), end.into());
        Ok(())
    }

    fn checkpoint_fields(&self, payload: &Payload) -> Payload {
        pick(payload, &["counts", "done_pixels"])
    }
}

/// Row-major escape counts of the global grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MandelGrid {
    pub width: u32,
    pub height: u32,
    pub max_iter: u32,
    pub counts: Vec<u32>,
}

impl MandelGrid {
    /// Binary portable graymap; bounded points are black.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        let max = self.max_iter.max(1) as f64;
        let bytes: Vec<u8> = self
            .counts
            .iter()
            .map(|&c| {
                if c >= self.max_iter {
                    0
                } else {
                    (255.0 * (c as f64).ln_1p() / max.ln_1p()).round() as u8
                }
            })
            .collect();
        out.write_all(&bytes)
    }
}

/// Stitches completed runs back into the global grid. Errors if the runs do
/// not tile the grid exactly once.
pub fn assemble_mandelbrot(tasks: &[MandelbrotTask]) -> Result<MandelGrid, KernelError> {
    let first = tasks
        .first()
        .ok_or_else(|| KernelError::Invalid("no mandelbrot results".into()))?;
    let problem = first.problem();
    let total = problem.pixels() as usize;
    let mut counts = vec![None; total];
    for t in tasks {
        if t.problem() != problem || t.done_pixels != t.pixel_count {
            return Err(KernelError::Invalid("incomplete or foreign mandelbrot run".into()));
        }
        for (i, &c) in t.counts.iter().enumerate() {
            let slot = &mut counts[t.start_pixel as usize + i];
            if slot.is_some() {
                return Err(KernelError::Invalid("overlapping mandelbrot runs".into()));
            }
            *slot = Some(c);
        }
    }
    let counts = counts
        .into_iter()
        .collect::<Option<Vec<u32>>>()
        .ok_or_else(|| KernelError::Invalid("mandelbrot runs leave gaps".into()))?;
    Ok(MandelGrid {
        width: problem.width,
        height: problem.height,
        max_iter: problem.max_iter,
        counts,
    })
}

// ---------------------------------------------------------------------------
// splitting

/// Global problem description handed to the splitter.
#[derive(Debug, Clone, PartialEq)]
pub enum Problem {
    Add,
    MonteCarlo { total_iterations: u64, seed_base: u64 },
    Mandelbrot(MandelbrotProblem),
}

impl Problem {
    pub fn kernel_id(&self) -> &'static str {
        match self {
            Problem::Add => ADD,
            Problem::MonteCarlo { .. } => MONTE_CARLO,
            Problem::Mandelbrot(_) => MANDELBROT,
        }
    }

    pub fn for_experiment(cfg: &crate::domain::ExperimentConfig) -> Result<Self, KernelError> {
        match cfg.kernel_id.as_str() {
            ADD => Ok(Problem::Add),
            MONTE_CARLO => Ok(Problem::MonteCarlo {
                total_iterations: cfg.task_size * cfg.total_tasks as u64,
                seed_base: cfg.rng_seed,
            }),
            MANDELBROT => Ok(Problem::Mandelbrot(cfg.mandelbrot)),
            other => Err(KernelError::UnknownKernel(other.to_string())),
        }
    }
}

/// Sizes of `parts` contiguous pieces of `total` units. Sizes differ by at
/// most one; the larger pieces come first so the tail tasks are the small
/// ones.
pub fn balanced_sizes(total: u64, parts: u64) -> Vec<u64> {
    let base = total / parts;
    let extra = total % parts;
    (0..parts).map(|i| base + u64::from(i < extra)).collect()
}

/// Splits `problem` into `total_tasks` tasks with ids `first_id..`.
pub fn split(problem: &Problem, total_tasks: u32, first_id: u64) -> Result<Vec<Task>, KernelError> {
    if total_tasks == 0 {
        return Err(KernelError::Invalid("total_tasks must be positive".into()));
    }
    let n = total_tasks as u64;
    let id = |i: u64| TaskId(first_id + i);
    match problem {
        Problem::Add => Ok((0..n)
            .map(|i| {
                let mut p = Payload::new();
                p.insert("a".into(), (i as i64).into());
                p.insert("b".into(), (2 * i as i64 + 1).into());
                Task::new(id(i), ADD, p)
            })
            .collect()),
        Problem::MonteCarlo {
            total_iterations,
            seed_base,
        } => {
            if *total_iterations < n {
                return Err(KernelError::Invalid("fewer iterations than tasks".into()));
            }
            Ok(balanced_sizes(*total_iterations, n)
                .into_iter()
                .enumerate()
                .map(|(i, iters)| {
                    let t = MonteCarloTask::new(iters, seed_base.wrapping_add(i as u64));
                    Task::new(id(i as u64), MONTE_CARLO, t.to_payload())
                })
                .collect())
        }
        Problem::Mandelbrot(p) => {
            if p.pixels() < n || p.width == 0 {
                return Err(KernelError::Invalid("fewer pixels than tasks".into()));
            }
            let mut start = 0u64;
            Ok(balanced_sizes(p.pixels(), n)
                .into_iter()
                .enumerate()
                .map(|(i, count)| {
                    let t = MandelbrotTask {
                        x0: p.x0,
                        y0: p.y0,
                        pixel_step: p.pixel_step,
                        grid_width: p.width,
                        grid_height: p.height,
                        start_pixel: start,
                        pixel_count: count,
                        max_iter: p.max_iter,
                        counts: Vec::new(),
                        done_pixels: 0,
                    };
                    start += count;
                    Task::new(id(i as u64), MANDELBROT, t.to_payload())
                })
                .collect())
        }
    }
}
