//! Network input features: the reference-microphone magnitude spectrum and
//! inter-microphone phase differences, both mean-normalized over a rolling
//! window.
//!
//! The IPD of channel `j` takes the argument *after* removing the rolling
//! mean of the complex ratio `x_j / x_R`, so the normalization never sees the
//! `pi / -pi` wrap.

use ndarray::{Array2, Array3};
use num_complex::Complex64;

use crate::signal_io::ArrayGeometry;
use crate::stft::Spectrogram;
use crate::{Error, Result};

pub const DEFAULT_NORMALIZATION_SECONDS: f64 = 4.0;

/// Regularizer on `|x_R|^2` in the channel ratio.
pub const RATIO_EPSILON: f64 = 1e-10;

/// Mean-removed ratios smaller than this have no meaningful phase; their
/// IPD is defined as 0.
pub const NULL_DEVIATION: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrameSequence {
    /// Mean-normalized reference magnitude, `frames x bins`.
    pub magnitude: Array2<f64>,
    /// IPD features in `(-pi, pi]`, `(J - 1) x frames x bins`, ordered by
    /// channel index with the reference skipped.
    pub ipd: Array3<f64>,
    /// Normalization window in seconds.
    pub normalization_window: f64,
}

/// Rolling-window length in frames for a duration in seconds.
pub fn window_frames(seconds: f64, spec: &Spectrogram) -> usize {
    let frames_per_second = spec.sample_rate() as f64 / spec.config().hop as f64;
    ((seconds * frames_per_second).round() as usize).max(1)
}

/// Centered rolling mean truncated at the sequence boundaries: frame `t`
/// averages `[t - L/2, t - L/2 + L)` clipped to the valid range.
pub fn centered_rolling_mean<T>(values: &[T], len: usize) -> Vec<T>
where
    T: Copy + Default + std::ops::Add<Output = T> + std::ops::Sub<Output = T> + std::ops::Div<f64, Output = T>,
{
    let n = values.len();
    let len = len.max(1);
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(T::default());
    for (i, v) in values.iter().enumerate() {
        let next = prefix[i] + *v;
        prefix.push(next);
    }
    let half = len / 2;
    (0..n)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + len - half).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Regularized ratio `x_j / x_R`.
pub fn channel_ratio(xj: Complex64, xr: Complex64) -> Complex64 {
    xj * xr.conj() / (xr.norm_sqr() + RATIO_EPSILON)
}

/// Argument of a mean-removed ratio, mapped into `(-pi, pi]`, with the
/// null and silent-reference conventions applied.
pub fn ipd_value(deviation: Complex64, reference: Complex64) -> f64 {
    if reference.norm_sqr() <= RATIO_EPSILON || deviation.norm() < NULL_DEVIATION {
        return 0.0;
    }
    let a = deviation.arg();
    if a <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        a
    }
}

/// Mean-removed ratio `x_j / x_R - E[x_j / x_R]` for channel `j`,
/// `frames x bins`.
pub fn ratio_deviation(spec: &Spectrogram, reference: usize, j: usize, window: usize) -> Array2<Complex64> {
    let xr = spec.channel(reference);
    let xj = spec.channel(j);
    let mut out = Array2::zeros((spec.frames(), spec.bins()));
    for f in 0..spec.bins() {
        let ratios: Vec<Complex64> = xj.column(f).iter().zip(xr.column(f).iter()).map(|(&a, &b)| channel_ratio(a, b)).collect();
        let mean = centered_rolling_mean(&ratios, window);
        for t in 0..spec.frames() {
            out[(t, f)] = ratios[t] - mean[t];
        }
    }
    out
}

pub fn compute_features(
    spec: &Spectrogram,
    geometry: &ArrayGeometry,
    normalization_seconds: f64,
) -> Result<FeatureFrameSequence> {
    let channels = spec.channels();
    if channels < 2 {
        return Err(Error::Config("spatial features need at least two microphones".into()));
    }
    if geometry.channel_count() != channels {
        return Err(Error::Config(format!(
            "geometry has {} microphones but the spectrogram has {channels} channels",
            geometry.channel_count()
        )));
    }
    if !(normalization_seconds > 0.0) {
        return Err(Error::Config("normalization window must be positive".into()));
    }
    if spec.data().iter().any(|z| !z.is_finite()) {
        return Err(Error::Argument("spectrogram contains non-finite values".into()));
    }
    let reference = geometry.reference_index();
    let frames = spec.frames();
    let bins = spec.bins();
    let len = window_frames(normalization_seconds, spec);
    let xr = spec.channel(reference);

    let mut magnitude = Array2::zeros((frames, bins));
    for f in 0..bins {
        let mags: Vec<f64> = xr.column(f).iter().map(|z| z.norm()).collect();
        let mean = centered_rolling_mean(&mags, len);
        for t in 0..frames {
            magnitude[(t, f)] = mags[t] - mean[t];
        }
    }

    let mut ipd = Array3::zeros((channels - 1, frames, bins));
    for (slot, j) in (0..channels).filter(|&j| j != reference).enumerate() {
        let deviation = ratio_deviation(spec, reference, j, len);
        for t in 0..frames {
            for f in 0..bins {
                ipd[(slot, t, f)] = ipd_value(deviation[(t, f)], xr[(t, f)]);
            }
        }
    }

    Ok(FeatureFrameSequence { magnitude, ipd, normalization_window: normalization_seconds })
}
