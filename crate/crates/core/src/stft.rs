//! Short-time Fourier analysis and weighted overlap-add synthesis.

use std::ops::Range;
use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, ArrayViewMut3, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::signal_io::MultichannelWave;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WindowShape {
    #[default]
    Hann,
}

/// Frame geometry. The defaults (512/512/256 at 16 kHz) give 257 bins,
/// 32 ms frames and a 16 ms hop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub fft_size: usize,
    pub window_size: usize,
    pub hop: usize,
    pub window_shape: WindowShape,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { fft_size: 512, window_size: 512, hop: 256, window_shape: WindowShape::Hann }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.hop == 0 || self.fft_size == 0 {
            return Err(Error::Config("stft sizes must be positive".into()));
        }
        if self.fft_size < self.window_size {
            return Err(Error::Config(format!(
                "fft size {} is smaller than window size {}",
                self.fft_size, self.window_size
            )));
        }
        if self.fft_size % 2 != 0 {
            return Err(Error::Config("fft size must be even".into()));
        }
        if self.window_size % 2 != 0 || self.hop * 2 != self.window_size {
            return Err(Error::Config(format!(
                "hann window of {} samples needs hop {} for constant overlap-add",
                self.window_size,
                self.window_size / 2
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Periodic Hann window.
    pub fn window(&self) -> Vec<f64> {
        let n = self.window_size as f64;
        (0..self.window_size)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos())
            .collect()
    }

    /// Number of full frames that fit in `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.window_size {
            0
        } else {
            (len - self.window_size) / self.hop + 1
        }
    }

    /// Samples spanned by `frames` frames.
    pub fn covered_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.window_size
        }
    }

    /// Sample range reconstructed exactly by [`synthesize`]: every sample in
    /// it is covered by two frames with nonzero window weight.
    pub fn interior(&self, frames: usize) -> Range<usize> {
        let start = self.window_size - self.hop;
        let end = self.covered_len(frames).saturating_sub(self.window_size - self.hop);
        start..end.max(start)
    }

    /// Frequency of bin `k` in Hz.
    pub fn bin_frequency(&self, k: usize, sample_rate: u32) -> f64 {
        k as f64 * sample_rate as f64 / self.fft_size as f64
    }

    /// Frames whose support intersects the sample range.
    pub fn frames_touching(&self, samples: Range<usize>, total_frames: usize) -> Range<usize> {
        if samples.is_empty() || total_frames == 0 {
            return 0..0;
        }
        let first = (samples.start + 1).saturating_sub(self.window_size).div_ceil(self.hop);
        let last = ((samples.end - 1) / self.hop + 1).min(total_frames);
        first.min(last)..last
    }
}

/// Complex spectra laid out as `channels x frames x bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    data: Array3<Complex64>,
    config: StftConfig,
    sample_rate: u32,
}

impl Spectrogram {
    pub fn new(data: Array3<Complex64>, config: StftConfig, sample_rate: u32) -> Result<Self> {
        if data.len_of(Axis(2)) != config.bins() {
            return Err(Error::shape(format!(
                "spectrogram has {} bins, config implies {}",
                data.len_of(Axis(2)),
                config.bins()
            )));
        }
        Ok(Self { data, config, sample_rate })
    }

    pub fn zeros(channels: usize, frames: usize, config: StftConfig, sample_rate: u32) -> Self {
        Self { data: Array3::zeros((channels, frames, config.bins())), config, sample_rate }
    }

    pub fn channels(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn frames(&self) -> usize {
        self.data.len_of(Axis(1))
    }

    pub fn bins(&self) -> usize {
        self.data.len_of(Axis(2))
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn data(&self) -> ArrayView3<'_, Complex64> {
        self.data.view()
    }

    pub fn data_mut(&mut self) -> ArrayViewMut3<'_, Complex64> {
        self.data.view_mut()
    }

    pub fn into_data(self) -> Array3<Complex64> {
        self.data
    }

    /// `frames x bins` view of one channel.
    pub fn channel(&self, j: usize) -> ArrayView2<'_, Complex64> {
        self.data.index_axis(Axis(0), j)
    }

    pub fn magnitude(&self, j: usize) -> Array2<f64> {
        self.channel(j).mapv(Complex64::norm)
    }

    /// Copy of a contiguous frame range.
    pub fn slice_frames(&self, frames: Range<usize>) -> Spectrogram {
        Spectrogram {
            data: self.data.slice(s![.., frames, ..]).to_owned(),
            config: self.config,
            sample_rate: self.sample_rate,
        }
    }

    /// Single-channel copy.
    pub fn select_channel(&self, j: usize) -> Spectrogram {
        Spectrogram {
            data: self.data.slice(s![j..j + 1, .., ..]).to_owned(),
            config: self.config,
            sample_rate: self.sample_rate,
        }
    }

    /// Builds a mono spectrogram from a `frames x bins` matrix.
    pub fn from_mono(data: Array2<Complex64>, config: StftConfig, sample_rate: u32) -> Result<Self> {
        Self::new(data.insert_axis(Axis(0)), config, sample_rate)
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans(size: usize) -> Plans {
    let mut planner = FftPlanner::new();
    Plans { forward: planner.plan_fft_forward(size), inverse: planner.plan_fft_inverse(size) }
}

/// Windowed analysis: frame `t` covers samples `[t*hop, t*hop + window)`.
/// Only full frames are produced; no padding is applied.
pub fn analyze(wave: &MultichannelWave, config: &StftConfig) -> Result<Spectrogram> {
    config.validate()?;
    let frames = config.frame_count(wave.len());
    if frames == 0 {
        return Err(Error::InsufficientInput(format!(
            "{} samples is shorter than one {}-sample window",
            wave.len(),
            config.window_size
        )));
    }
    let window = config.window();
    let bins = config.bins();
    let fft = plans(config.fft_size).forward;
    let mut buf = vec![Complex64::new(0.0, 0.0); config.fft_size];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut data = Array3::zeros((wave.channels(), frames, bins));
    for j in 0..wave.channels() {
        let x = wave.channel(j);
        for t in 0..frames {
            let off = t * config.hop;
            buf.fill(Complex64::new(0.0, 0.0));
            for (n, w) in window.iter().enumerate() {
                buf[n] = Complex64::new(x[off + n] * w, 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..bins {
                data[(j, t, k)] = buf[k];
            }
        }
    }
    Spectrogram::new(data, *config, wave.sample_rate())
}

/// Weighted overlap-add: each inverse frame is multiplied by the analysis
/// window and the sum is divided by the summed squared window. The result
/// spans `(frames - 1) * hop + window` samples.
pub fn synthesize(spec: &Spectrogram) -> Result<MultichannelWave> {
    let config = spec.config;
    config.validate()?;
    if spec.bins() != config.bins() {
        return Err(Error::shape("bin count does not match config"));
    }
    let frames = spec.frames();
    let len = config.covered_len(frames);
    let window = config.window();
    let n = config.fft_size;
    let bins = config.bins();
    let ifft = plans(n).inverse;
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];

    let mut norm = vec![0.0; len];
    for t in 0..frames {
        let off = t * config.hop;
        for (i, w) in window.iter().enumerate() {
            norm[off + i] += w * w;
        }
    }
    let peak = norm.iter().fold(0.0_f64, |m, &v| m.max(v));
    let floor = 1e-10 * peak;

    let mut out = Array2::zeros((spec.channels().max(1), len));
    for j in 0..spec.channels() {
        let mut acc = vec![0.0; len];
        for t in 0..frames {
            for k in 0..bins {
                buf[k] = spec.data[(j, t, k)];
            }
            for k in bins..n {
                buf[k] = spec.data[(j, t, n - k)].conj();
            }
            ifft.process_with_scratch(&mut buf, &mut scratch);
            let off = t * config.hop;
            for (i, w) in window.iter().enumerate() {
                acc[off + i] += w * buf[i].re / n as f64;
            }
        }
        for (i, v) in acc.into_iter().enumerate() {
            out[(j, i)] = if norm[i] > floor { v / norm[i] } else { 0.0 };
        }
    }
    MultichannelWave::new(out, spec.sample_rate)
}

/// Pads a wave so that every original sample lies in the exactly
/// reconstructed interior and at least `min_frames` frames exist. Returns the
/// padded wave and the offset of the original first sample.
pub fn pad_for_analysis(wave: &MultichannelWave, config: &StftConfig, min_frames: usize) -> (MultichannelWave, usize) {
    let front = config.window_size - config.hop;
    let needed = wave.len() + 2 * front;
    let mut frames = if needed <= config.window_size {
        1
    } else {
        (needed - config.window_size).div_ceil(config.hop) + 1
    };
    frames = frames.max(min_frames);
    let total = config.covered_len(frames);
    let mut samples = Array2::zeros((wave.channels(), total));
    samples.slice_mut(s![.., front..front + wave.len()]).assign(wave.samples());
    (MultichannelWave::new(samples, wave.sample_rate()).expect("same channel count"), front)
}

/// Inverse of [`pad_for_analysis`]: keeps `len` samples starting at `offset`.
pub fn trim(wave: &MultichannelWave, offset: usize, len: usize) -> MultichannelWave {
    let end = (offset + len).min(wave.len());
    let mut samples = Array2::zeros((wave.channels(), len));
    if offset < end {
        samples.slice_mut(s![.., 0..end - offset]).assign(&wave.samples().slice(s![.., offset..end]));
    }
    MultichannelWave::new(samples, wave.sample_rate()).expect("same channel count")
}

/// [`pad_for_analysis`] followed by [`analyze`]; returns the spectrogram and
/// the sample offset to pass to [`synthesize_trimmed`].
pub fn analyze_padded(wave: &MultichannelWave, config: &StftConfig) -> Result<(Spectrogram, usize)> {
    config.validate()?;
    let (padded, offset) = pad_for_analysis(wave, config, 1);
    Ok((analyze(&padded, config)?, offset))
}

/// [`synthesize`] followed by [`trim`].
pub fn synthesize_trimmed(spec: &Spectrogram, offset: usize, len: usize) -> Result<MultichannelWave> {
    Ok(trim(&synthesize(spec)?, offset, len))
}
