//! Weighted prediction error (WPE) dereverberation in the STFT domain.
//!
//! Per frequency bin, late reverberation is predicted from a delayed stack of
//! past frames of all channels and subtracted. The prediction filter `G` and
//! the per-frame source variance `lambda_t` are estimated by alternating
//! minimization of
//!
//! ```text
//! sum_t [ sum_j |d_tj|^2 / lambda_t + J ln lambda_t ] + rho ||G||^2,
//! d_t = x_t - G^H x~_t,
//! ```
//!
//! which never increases from one iteration to the next. `rho` is a small
//! per-bin ridge fixed before the first iteration.

use std::ops::Range;

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;

use crate::linalg::cholesky_solve_in_place;
use crate::stft::Spectrogram;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct WpeConfig {
    pub taps: usize,
    /// Prediction delay in frames.
    pub delay: usize,
    pub iterations: usize,
    /// Seconds between filter re-estimations in streaming mode.
    pub update_interval: f64,
    /// Trailing context used for each re-estimation, seconds.
    pub context: f64,
    /// Floor on `lambda_t`.
    pub epsilon: f64,
}

impl Default for WpeConfig {
    fn default() -> Self {
        Self { taps: 10, delay: 2, iterations: 3, update_interval: 1.0, context: 4.0, epsilon: 1e-8 }
    }
}

impl WpeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.taps == 0 || self.delay == 0 || self.iterations == 0 {
            return Err(Error::Config("WPE taps, delay and iterations must all be at least 1".into()));
        }
        if !(self.update_interval > 0.0) || !(self.context >= self.update_interval) {
            return Err(Error::Config("WPE needs update_interval > 0 and context >= update_interval".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("WPE epsilon must be positive".into()));
        }
        Ok(())
    }

    fn min_frames(&self) -> usize {
        self.delay + self.taps
    }
}

const RIDGE: f64 = 1e-6;
const RIDGE_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone)]
pub struct WpeReport {
    pub output: Spectrogram,
    /// Objective summed over bins after each iteration, per estimation.
    pub objective: Vec<Vec<f64>>,
    /// Filters per estimation, each `bins x (taps * J) x J`.
    pub filters: Vec<Array3<Complex64>>,
}

/// Channel-interleaved frames of one bin: `frame t, channel j` at `t * J + j`.
struct BinFrames {
    data: Vec<Complex64>,
    channels: usize,
}

impl BinFrames {
    fn new(spec: &Spectrogram, f: usize) -> Self {
        let j = spec.channels();
        let view = spec.data();
        let mut data = Vec::with_capacity(spec.frames() * j);
        for t in 0..spec.frames() {
            for c in 0..j {
                data.push(view[(c, t, f)]);
            }
        }
        Self { data, channels: j }
    }

    fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }

    /// Delayed stack `[x_{t-D}, ..., x_{t-D-K+1}]`, zero before the first frame.
    fn stack(&self, t: usize, cfg: &WpeConfig, out: &mut [Complex64]) {
        let j = self.channels;
        for k in 0..cfg.taps {
            let slot = &mut out[k * j..(k + 1) * j];
            match t.checked_sub(cfg.delay + k) {
                Some(s) => slot.copy_from_slice(self.frame(s)),
                None => slot.fill(Complex64::new(0.0, 0.0)),
            }
        }
    }
}

fn mean_power(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>() / v.len() as f64
}

/// Estimates the filter of one bin on frames `range`; returns the
/// `(taps * J) x J` filter (row-major) and the objective per iteration.
fn estimate_bin(frames: &BinFrames, range: Range<usize>, cfg: &WpeConfig) -> (Vec<Complex64>, Vec<f64>) {
    let j = frames.channels;
    let n = cfg.taps * j;
    let zero = Complex64::new(0.0, 0.0);
    let mut lambda: Vec<f64> = range.clone().map(|t| mean_power(frames.frame(t)).max(cfg.epsilon)).collect();
    let mut g = vec![zero; n * j];
    let mut r = vec![zero; n * n];
    let mut p = vec![zero; n * j];
    let mut stack = vec![zero; n];
    let mut d = vec![zero; j];
    let mut rho = None;
    let mut objective = Vec::with_capacity(cfg.iterations);

    let len = range.len();
    let mut stacks = Array2::<Complex64>::zeros((len, n));
    let mut current = Array2::<Complex64>::zeros((len, j));
    for (i, t) in range.clone().enumerate() {
        frames.stack(t, cfg, stacks.row_mut(i).as_slice_mut().expect("standard layout"));
        current.row_mut(i).assign(&ndarray::ArrayView1::from(frames.frame(t)));
    }
    let stacks_conj = stacks.mapv(|z| z.conj());
    let current_conj = current.mapv(|z| z.conj());

    for _ in 0..cfg.iterations {
        // R = sum_t x~_t x~_t^H / lambda_t and P = sum_t x~_t x_t^H / lambda_t.
        let mut weighted = stacks.clone();
        for (mut row, l) in weighted.rows_mut().into_iter().zip(&lambda) {
            row.mapv_inplace(|z| z / *l);
        }
        let wt = weighted.t();
        r.copy_from_slice(wt.dot(&stacks_conj).as_slice().expect("standard layout"));
        p.copy_from_slice(wt.dot(&current_conj).as_slice().expect("standard layout"));
        let rho = *rho.get_or_insert_with(|| {
            let tr: f64 = (0..n).map(|a| r[a * n + a].re).sum();
            RIDGE * tr / n as f64 + RIDGE_FLOOR
        });
        for a in 0..n {
            r[a * n + a] = Complex64::new(r[a * n + a].re + rho, 0.0);
            for b in a + 1..n {
                r[b * n + a] = r[a * n + b].conj();
            }
        }
        g.copy_from_slice(&p);
        if !cholesky_solve_in_place(&mut r, n, &mut g, j) {
            g.fill(zero);
        }

        let mut total = rho * g.iter().map(|z| z.norm_sqr()).sum::<f64>();
        for (i, t) in range.clone().enumerate() {
            predict(frames, &g, t, cfg, &mut stack, &mut d);
            let power = mean_power(&d);
            let next = power.max(cfg.epsilon);
            total += j as f64 * power / next + j as f64 * next.ln();
            lambda[i] = next;
        }
        objective.push(total);
    }
    (g, objective)
}

/// `d = x_t - G^H x~_t`.
fn predict(
    frames: &BinFrames,
    g: &[Complex64],
    t: usize,
    cfg: &WpeConfig,
    stack: &mut [Complex64],
    d: &mut [Complex64],
) {
    let j = frames.channels;
    frames.stack(t, cfg, stack);
    d.copy_from_slice(frames.frame(t));
    for (a, s) in stack.iter().enumerate() {
        if *s == Complex64::new(0.0, 0.0) {
            continue;
        }
        for c in 0..j {
            d[c] -= g[a * j + c].conj() * s;
        }
    }
}

/// Frames per update block and per trailing context.
pub fn block_geometry(spec: &Spectrogram, cfg: &WpeConfig) -> (usize, usize) {
    let fps = spec.sample_rate() as f64 / spec.config().hop as f64;
    let block = ((cfg.update_interval * fps).ceil() as usize).max(1);
    let context = ((cfg.context * fps).ceil() as usize).max(block);
    (block, context)
}

fn run(spec: &Spectrogram, cfg: &WpeConfig, blocks: &[(Range<usize>, Range<usize>)]) -> Result<WpeReport> {
    cfg.validate()?;
    if spec.data().iter().any(|z| !z.is_finite()) {
        return Err(Error::Argument("spectrogram contains non-finite values".into()));
    }
    let (j, frames, bins) = spec.data().dim();
    let n = cfg.taps * j;
    let mut out = Array3::zeros((j, frames, bins));
    let mut objective = vec![vec![0.0; cfg.iterations]; blocks.len()];
    let mut filters = vec![Array3::zeros((bins, n, j)); blocks.len()];
    let zero = Complex64::new(0.0, 0.0);
    let mut stack = vec![zero; n];
    let mut d = vec![zero; j];
    for f in 0..bins {
        let bin = BinFrames::new(spec, f);
        for (b, (estimate, emit)) in blocks.iter().enumerate() {
            let (g, obj) = estimate_bin(&bin, estimate.clone(), cfg);
            for (acc, v) in objective[b].iter_mut().zip(obj) {
                *acc += v;
            }
            for t in emit.clone() {
                predict(&bin, &g, t, cfg, &mut stack, &mut d);
                for c in 0..j {
                    out[(c, t, f)] = d[c];
                }
            }
            filters[b]
                .index_axis_mut(Axis(0), f)
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(&g);
        }
    }
    Ok(WpeReport { output: Spectrogram::new(out, *spec.config(), spec.sample_rate())?, objective, filters })
}

pub fn wpe_block(spec: &Spectrogram, cfg: &WpeConfig) -> Result<Spectrogram> {
    wpe_block_detailed(spec, cfg).map(|r| r.output)
}

/// One filter estimated on, and applied to, the whole block.
pub fn wpe_block_detailed(spec: &Spectrogram, cfg: &WpeConfig) -> Result<WpeReport> {
    if spec.frames() < cfg.min_frames() {
        return Err(Error::InsufficientInput(format!(
            "WPE needs at least {} frames, got {}",
            cfg.min_frames(),
            spec.frames()
        )));
    }
    let all = 0..spec.frames();
    run(spec, cfg, &[(all.clone(), all)])
}

pub fn wpe_stream(spec: &Spectrogram, cfg: &WpeConfig) -> Result<Spectrogram> {
    wpe_stream_detailed(spec, cfg).map(|r| r.output)
}

/// Re-estimates the filters once per update block on the trailing context
/// that ends with the block, and applies them to that block only.
pub fn wpe_stream_detailed(spec: &Spectrogram, cfg: &WpeConfig) -> Result<WpeReport> {
    cfg.validate()?;
    let (block, context) = block_geometry(spec, cfg);
    let frames = spec.frames();
    if frames < cfg.min_frames() {
        return Err(Error::InsufficientInput(format!(
            "WPE needs at least {} frames, got {frames}",
            cfg.min_frames()
        )));
    }
    let blocks: Vec<(Range<usize>, Range<usize>)> = (0..frames)
        .step_by(block)
        .map(|start| {
            let end = (start + block).min(frames);
            (end.saturating_sub(context)..end, start..end)
        })
        .collect();
    run(spec, cfg, &blocks)
}
