//! Scene simulation: shoebox room impulse responses by the image method,
//! spherically isotropic noise, and two-talker mixtures with ground truth.
//!
//! Coordinates are meters. Azimuths are measured in the horizontal plane,
//! counter-clockwise from the +x axis.

use std::f64::consts::PI;
use std::ops::Range;

use ndarray::{s, Array2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::signal_io::{ArrayGeometry, MultichannelWave};
use crate::{Error, Result, SPEED_OF_SOUND};

/// Fractional-delay filter length.
pub const SINC_TAPS: usize = 81;

/// Plane waves summed for isotropic noise.
pub const NOISE_DIRECTIONS: usize = 128;

/// Longest clip `make_mixture` produces.
pub const MAX_CLIP_SECONDS: f64 = 10.0;

/// Reflections (not the direct path) are high-passed at this frequency to
/// remove the low-frequency build-up of the all-positive image train.
const REFLECTION_HIGHPASS_HZ: f64 = 100.0;

/// Directions averaged when predicting the decay of the image lattice.
const DECAY_DIRECTIONS: usize = 2048;

/// A shoebox room with uniform wall reflection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub dimensions: [f64; 3],
    /// Reverberation time in seconds; 0 renders the direct path only.
    pub t60: f64,
}

impl Room {
    pub fn validate(&self) -> Result<()> {
        if self.dimensions.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::Geometry(format!("room dimensions {:?} must be positive", self.dimensions)));
        }
        if !(self.t60.is_finite() && self.t60 >= 0.0) {
            return Err(Error::Geometry(format!("T60 {} must be finite and non-negative", self.t60)));
        }
        Ok(())
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        p.iter().zip(self.dimensions).all(|(&x, d)| x > 0.0 && x < d)
    }

    /// Wall reflection coefficient `beta` whose image-lattice energy decay,
    /// fitted between -5 and -25 dB as in a Schroeder T20 measurement,
    /// reaches -60 dB at `t60`.
    ///
    /// An image at distance `r` along direction `u` has undergone about
    /// `r * sum_a |u_a| / L_a` reflections, so its energy falls as
    /// `exp(-lambda r g(u))` with `lambda = -2 ln beta`. The decay curve
    /// `EDC(s) = mean_u exp(-g(u) s) / g(u)` in `s = lambda c t` depends only
    /// on the room shape, which fixes `lambda` for a requested T60.
    pub fn reflection(&self) -> f64 {
        if self.t60 == 0.0 {
            return 0.0;
        }
        let g: Vec<f64> = fibonacci_sphere(DECAY_DIRECTIONS)
            .iter()
            .map(|u| (0..3).map(|a| u[a].abs() / self.dimensions[a]).sum::<f64>())
            .collect();
        let edc = |s: f64| g.iter().map(|gi| (-gi * s).exp() / gi).sum::<f64>();
        let total = edc(0.0);
        let reach = |db: f64| {
            let target = total * 10f64.powf(db / 10.0);
            let mut hi = 1.0;
            while edc(hi) > target {
                hi *= 2.0;
            }
            let mut lo = 0.0;
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if edc(mid) > target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let span = reach(-25.0) - reach(-5.0);
        let lambda = 3.0 * span / (SPEED_OF_SOUND * self.t60);
        (-0.5 * lambda).exp()
    }

    pub fn rir_length(&self, sample_rate: u32) -> usize {
        (self.t60 * sample_rate as f64).ceil() as usize
    }
}

/// Room plus array and talker placement.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomSpec {
    pub room: Room,
    pub source_positions: Vec<[f64; 3]>,
    pub array_center: [f64; 3],
    pub geometry: ArrayGeometry,
}

impl RoomSpec {
    pub fn mic_positions(&self) -> Vec<[f64; 3]> {
        self.geometry.placed_at(self.array_center)
    }

    pub fn validate(&self) -> Result<()> {
        self.room.validate()?;
        for (i, p) in self.source_positions.iter().enumerate() {
            if !self.room.contains(*p) {
                return Err(Error::Geometry(format!("source {i} at {p:?} is outside the room")));
            }
        }
        for (j, p) in self.mic_positions().iter().enumerate() {
            if !self.room.contains(*p) {
                return Err(Error::Geometry(format!("microphone {j} at {p:?} is outside the room")));
            }
        }
        Ok(())
    }

    /// Point at `distance` from the array center along `azimuth_deg`, at the
    /// array's height.
    pub fn point_at(&self, azimuth_deg: f64, distance: f64) -> [f64; 3] {
        let (sin, cos) = azimuth_deg.to_radians().sin_cos();
        let c = self.array_center;
        [c[0] + distance * cos, c[1] + distance * sin, c[2]]
    }
}

fn hann_taps() -> Vec<f64> {
    let half = (SINC_TAPS / 2) as f64;
    (0..SINC_TAPS)
        .map(|i| {
            let x = i as f64 - half;
            0.5 * (1.0 + (PI * x / (half + 1.0)).cos())
        })
        .collect()
}

/// Adds `gain * delta(n - delay)` to `out` through a windowed-sinc
/// fractional delay.
/// Second-order Butterworth high-pass, in place; `cutoff` is a fraction of
/// the sample rate.
fn high_pass(x: &mut [f64], cutoff: f64) {
    let w0 = 2.0 * PI * cutoff;
    let alpha = w0.sin() / std::f64::consts::SQRT_2;
    let cos = w0.cos();
    let a0 = 1.0 + alpha;
    let b = [(1.0 + cos) / 2.0 / a0, -(1.0 + cos) / a0, (1.0 + cos) / 2.0 / a0];
    let a = [-2.0 * cos / a0, (1.0 - alpha) / a0];
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for v in x.iter_mut() {
        let y = b[0] * *v + b[1] * x1 + b[2] * x2 - a[0] * y1 - a[1] * y2;
        x2 = x1;
        x1 = *v;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

fn add_delayed_impulse(out: &mut [f64], delay: f64, gain: f64, window: &[f64]) {
    let half = (SINC_TAPS / 2) as isize;
    let base = delay.round();
    let frac = base - delay;
    let sin_frac = (PI * frac).sin();
    let base = base as isize;
    for i in -half..=half {
        let n = base + i;
        if n < 0 || n as usize >= out.len() {
            continue;
        }
        let x = i as f64 + frac;
        let sinc = if frac == 0.0 {
            if i == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            sign * sin_frac / (PI * x)
        };
        out[n as usize] += gain * sinc * window[(i + half) as usize];
    }
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    crate::signal_io::distance(&a, &b)
}

/// Impulse response from `source` to `mic` by the Allen-Berkley image
/// method. The response lasts `T60` seconds; with `T60 = 0` it holds only the
/// direct path.
pub fn image_method_rir(room: &Room, source: [f64; 3], mic: [f64; 3], sample_rate: u32) -> Result<Vec<f64>> {
    room.validate()?;
    if !room.contains(source) {
        return Err(Error::Geometry(format!("source at {source:?} is outside the room")));
    }
    if !room.contains(mic) {
        return Err(Error::Geometry(format!("microphone at {mic:?} is outside the room")));
    }
    let sr = sample_rate as f64;
    let window = hann_taps();
    let direct = distance(source, mic);
    let direct_delay = direct / SPEED_OF_SOUND * sr;
    if room.t60 == 0.0 {
        let mut out = vec![0.0; direct_delay.ceil() as usize + SINC_TAPS / 2 + 1];
        add_delayed_impulse(&mut out, direct_delay, 1.0 / (4.0 * PI * direct.max(1e-3)), &window);
        return Ok(out);
    }
    let len = room.rir_length(sample_rate).max(direct_delay.ceil() as usize + SINC_TAPS);
    let mut out = vec![0.0; len];
    let mut reflections = vec![0.0; len];
    let beta = room.reflection();
    let max_dist = len as f64 / sr * SPEED_OF_SOUND;
    let dims = room.dimensions;
    let orders: Vec<i64> = dims.iter().map(|d| (max_dist / (2.0 * d)).ceil() as i64 + 1).collect();
    let max_reflections = 2 * orders.iter().sum::<i64>() as usize + 6;
    let powers: Vec<f64> = (0..=max_reflections).scan(1.0, |acc, _| {
        let v = *acc;
        *acc *= beta;
        Some(v)
    })
    .collect();

    // Per axis: (offset along the axis, reflection count) for every image.
    let axis_terms: Vec<Vec<(f64, usize)>> = (0..3)
        .map(|a| {
            let mut terms = Vec::new();
            for p in 0..2i64 {
                for m in -orders[a]..=orders[a] {
                    let pos = (1 - 2 * p) as f64 * source[a] + 2.0 * m as f64 * dims[a];
                    let offset = pos - mic[a];
                    if offset.abs() <= max_dist {
                        terms.push((offset, ((m - p).abs() + m.abs()) as usize));
                    }
                }
            }
            terms
        })
        .collect();
    let max_sq = max_dist * max_dist;
    for &(dx, rx) in &axis_terms[0] {
        let dx2 = dx * dx;
        for &(dy, ry) in &axis_terms[1] {
            let dxy2 = dx2 + dy * dy;
            if dxy2 > max_sq {
                continue;
            }
            for &(dz, rz) in &axis_terms[2] {
                let d2 = dxy2 + dz * dz;
                if d2 > max_sq {
                    continue;
                }
                let d = d2.sqrt();
                let delay = d / SPEED_OF_SOUND * sr;
                if delay >= len as f64 {
                    continue;
                }
                let order = rx + ry + rz;
                let gain = powers[order] / (4.0 * PI * d.max(1e-3));
                let target = if order == 0 { &mut out } else { &mut reflections };
                add_delayed_impulse(target, delay, gain, &window);
            }
        }
    }
    high_pass(&mut reflections, REFLECTION_HIGHPASS_HZ / sr);
    for (o, r) in out.iter_mut().zip(&reflections) {
        *o += r;
    }
    Ok(out)
}

/// Direct path only, padded to `len` samples.
pub fn direct_path_rir(source: [f64; 3], mic: [f64; 3], sample_rate: u32, len: usize) -> Vec<f64> {
    let d = distance(source, mic);
    let delay = d / SPEED_OF_SOUND * sample_rate as f64;
    let mut out = vec![0.0; len.max(delay.ceil() as usize + SINC_TAPS / 2 + 1)];
    add_delayed_impulse(&mut out, delay, 1.0 / (4.0 * PI * d.max(1e-3)), &hann_taps());
    out
}

/// Linear convolution via FFT.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let n = a.len() + b.len() - 1;
    let size = n.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let load = |x: &[f64]| {
        let mut buf = vec![Complex64::new(0.0, 0.0); size];
        for (slot, v) in buf.iter_mut().zip(x) {
            slot.re = *v;
        }
        buf
    };
    let mut fa = load(a);
    let mut fb = load(b);
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    let scale = 1.0 / size as f64;
    fa[..n].iter().map(|z| z.re * scale).collect()
}

/// Convolves one dry signal with several impulse responses, sharing the
/// forward transform of the signal.
fn convolve_many(signal: &[f64], rirs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let longest = rirs.iter().map(Vec::len).max().unwrap_or(0);
    if signal.is_empty() || longest == 0 {
        return rirs.iter().map(|_| Vec::new()).collect();
    }
    let size = (signal.len() + longest - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut fs = vec![Complex64::new(0.0, 0.0); size];
    for (slot, v) in fs.iter_mut().zip(signal) {
        slot.re = *v;
    }
    fwd.process(&mut fs);
    let scale = 1.0 / size as f64;
    rirs.iter()
        .map(|h| {
            let n = signal.len() + h.len() - 1;
            let mut buf = vec![Complex64::new(0.0, 0.0); size];
            for (slot, v) in buf.iter_mut().zip(h) {
                slot.re = *v;
            }
            fwd.process(&mut buf);
            for (x, y) in buf.iter_mut().zip(&fs) {
                *x *= y;
            }
            inv.process(&mut buf);
            buf[..n].iter().map(|z| z.re * scale).collect()
        })
        .collect()
}

/// Unit vectors spread evenly over the sphere.
pub fn fibonacci_sphere(n: usize) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

/// Spherically isotropic noise at arbitrary microphone positions
/// (coincident positions allowed), each channel scaled to unit variance.
pub fn isotropic_noise_at(positions: &[[f64; 3]], seconds: f64, sample_rate: u32, seed: u64) -> Result<MultichannelWave> {
    if positions.len() < 2 {
        return Err(Error::Argument("isotropic noise needs at least two microphones".into()));
    }
    let len = (seconds * sample_rate as f64).round() as usize;
    if len == 0 {
        return Err(Error::Argument("isotropic noise needs a positive duration".into()));
    }
    let size = len.next_power_of_two().max(2);
    let half = size / 2;
    let j = positions.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spectra = vec![vec![Complex64::new(0.0, 0.0); size]; j];
    let sr = sample_rate as f64;
    for u in fibonacci_sphere(NOISE_DIRECTIONS) {
        let white: Vec<Complex64> = (0..=half)
            .map(|k| {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                if k == 0 || k == half {
                    Complex64::new(re, 0.0)
                } else {
                    Complex64::new(re, im)
                }
            })
            .collect();
        for (spec, p) in spectra.iter_mut().zip(positions) {
            // The wave reaches `p` earlier by (p . u) / c.
            let advance = (p[0] * u[0] + p[1] * u[1] + p[2] * u[2]) / SPEED_OF_SOUND * sr;
            let step = Complex64::from_polar(1.0, 2.0 * PI * advance / size as f64);
            let mut phase = Complex64::new(1.0, 0.0);
            for (slot, w) in spec[..=half].iter_mut().zip(&white) {
                *slot += w * phase;
                phase *= step;
            }
        }
    }
    let mut planner = FftPlanner::<f64>::new();
    let inv = planner.plan_fft_inverse(size);
    let mut samples = Array2::zeros((j, len));
    for (c, spec) in spectra.iter_mut().enumerate() {
        spec[0].im = 0.0;
        spec[half].im = 0.0;
        for k in 1..half {
            spec[size - k] = spec[k].conj();
        }
        inv.process(spec);
        let chan: Vec<f64> = spec[..len].iter().map(|z| z.re).collect();
        let mean = chan.iter().sum::<f64>() / len as f64;
        let var = chan.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
        let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
        for (t, v) in chan.iter().enumerate() {
            samples[(c, t)] = (v - mean) * scale;
        }
    }
    MultichannelWave::new(samples, sample_rate)
}

pub fn isotropic_noise(geometry: &ArrayGeometry, seconds: f64, sample_rate: u32, seed: u64) -> Result<MultichannelWave> {
    isotropic_noise_at(geometry.positions(), seconds, sample_rate, seed)
}

/// Speech-like test signal: voiced syllables with a jittered pitch, a few
/// formant-shaped harmonics and short pauses. Its energy is sparse in time
/// and frequency, so two such signals rarely collide in a bin.
pub fn speech_like(seconds: f64, sample_rate: u32, seed: u64) -> Vec<f64> {
    let sr = sample_rate as f64;
    let len = (seconds * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; len];
    let base_f0: f64 = rng.random_range(95.0..230.0);
    let mut t = (rng.random_range(0.0..0.05) * sr) as usize;
    while t < len {
        let dur = (rng.random_range(0.12..0.32) * sr) as usize;
        let f0 = base_f0 * rng.random_range(0.85..1.2);
        let glide = rng.random_range(-0.25..0.25);
        let formants = [rng.random_range(300.0..900.0), rng.random_range(900.0..2400.0), rng.random_range(2400.0..3400.0)];
        let phase0: f64 = rng.random_range(0.0..2.0 * PI);
        let end = (t + dur).min(len);
        let mut phase = phase0;
        for n in t..end {
            let u = (n - t) as f64 / dur as f64;
            let f = f0 * (1.0 + glide * u);
            phase += 2.0 * PI * f / sr;
            let envelope = (PI * u).sin().powf(0.6);
            let mut v = 0.0;
            let mut h = 1;
            while h as f64 * f < 4000.0 {
                let fh = h as f64 * f;
                let gain: f64 = formants
                    .iter()
                    .map(|&fm| (-((fh - fm) / 180.0).powi(2)).exp())
                    .sum::<f64>()
                    + 0.02;
                v += gain * (h as f64 * phase).sin();
                h += 1;
            }
            out[n] = envelope * v;
        }
        t = end + (rng.random_range(0.04..0.2) * sr) as usize;
    }
    let peak = out.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureConfiguration {
    Single,
    Sequential,
    PartialOverlap,
    ContainedOverlap,
}

impl MixtureConfiguration {
    pub const ALL: [MixtureConfiguration; 4] = [
        MixtureConfiguration::Single,
        MixtureConfiguration::Sequential,
        MixtureConfiguration::PartialOverlap,
        MixtureConfiguration::ContainedOverlap,
    ];

    pub fn sources_needed(self) -> usize {
        match self {
            MixtureConfiguration::Single => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub configuration: MixtureConfiguration,
    /// Per-utterance gains in dB.
    pub gains_db: Vec<f64>,
    /// Speech-to-noise ratio at the reference microphone; `None` is noiseless.
    pub noise_snr_db: Option<f64>,
    pub clip_seconds: f64,
    pub seed: u64,
}

/// One utterance placed in a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub signal: Vec<f64>,
    pub position: [f64; 3],
    /// Onset in samples.
    pub start: usize,
    pub gain_db: f64,
}

/// A multichannel signal that is zero outside `[start, start + len)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialImage {
    pub start: usize,
    /// `channels x len`.
    pub samples: Array2<f64>,
}

impl SpatialImage {
    pub fn span(&self) -> Range<usize> {
        self.start..self.start + self.samples.ncols()
    }

    /// Channel `j` as a full-length signal of `len` samples.
    pub fn channel_padded(&self, j: usize, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        let row = self.samples.row(j);
        for (i, v) in row.iter().enumerate() {
            if let Some(slot) = out.get_mut(self.start + i) {
                *slot = *v;
            }
        }
        out
    }

    pub fn add_into(&self, target: &mut Array2<f64>) {
        let end = self.span().end.min(target.ncols());
        if end <= self.start {
            return;
        }
        let n = end - self.start;
        let mut dst = target.slice_mut(s![.., self.start..end]);
        dst += &self.samples.slice(s![.., ..n]);
    }
}

/// Everything needed to score a separation of a simulated scene.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub sample_rate: u32,
    pub len: usize,
    pub reference_index: usize,
    /// Reverberant image of each utterance at every microphone.
    pub images: Vec<SpatialImage>,
    /// Direct-path image of each utterance at every microphone.
    pub direct: Vec<SpatialImage>,
    pub noise: Option<MultichannelWave>,
    /// Output channel of each utterance; a nonmixing assignment over
    /// `segments`.
    pub assignment: Vec<usize>,
    /// Samples where each utterance's image is nonzero.
    pub segments: Vec<Range<usize>>,
    /// Samples where each utterance is being spoken, as heard at the
    /// reference microphone.
    pub emission: Vec<Range<usize>>,
    pub positions: Vec<[f64; 3]>,
}

impl GroundTruth {
    /// Reference-microphone signal of output channel `i`: the sum of the
    /// images of the utterances assigned to it.
    pub fn channel_source(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for (k, image) in self.images.iter().enumerate() {
            if self.assignment[k] == i {
                for (o, v) in out.iter_mut().zip(image.channel_padded(self.reference_index, self.len)) {
                    *o += v;
                }
            }
        }
        out
    }

    /// All-microphone signal of output channel `i`.
    pub fn channel_image(&self, i: usize, channels: usize) -> Array2<f64> {
        let mut out = Array2::zeros((channels, self.len));
        for (k, image) in self.images.iter().enumerate() {
            if self.assignment[k] == i {
                image.add_into(&mut out);
            }
        }
        out
    }

    pub fn reference_noise(&self) -> Vec<f64> {
        match &self.noise {
            Some(n) => n.channel_vec(self.reference_index),
            None => vec![0.0; self.len],
        }
    }
}

/// Two-colors intervals in order of onset so that overlapping intervals get
/// different colors. Fails if three intervals overlap at once.
pub fn assign_channels(segments: &[Range<usize>]) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by_key(|&k| (segments[k].start, k));
    let mut busy_until = [0usize; 2];
    let mut out = vec![0; segments.len()];
    for k in order {
        let seg = &segments[k];
        let channel = (0..2)
            .find(|&c| busy_until[c] <= seg.start)
            .ok_or_else(|| Error::Argument(format!("utterance {k} would be the third concurrent talker")))?;
        busy_until[channel] = seg.end;
        out[k] = channel;
    }
    Ok(out)
}

/// Renders utterances and optional isotropic noise into a `len`-sample
/// mixture with ground truth.
pub fn render_scene(
    room: &RoomSpec,
    utterances: &[Utterance],
    noise_snr_db: Option<f64>,
    len: usize,
    sample_rate: u32,
    seed: u64,
) -> Result<(MultichannelWave, GroundTruth)> {
    room.validate()?;
    if len == 0 {
        return Err(Error::Argument("scene length must be positive".into()));
    }
    let mics = room.mic_positions();
    let j = mics.len();
    let reference = room.geometry.reference_index();
    let mut images = Vec::with_capacity(utterances.len());
    let mut direct = Vec::with_capacity(utterances.len());
    let mut segments = Vec::with_capacity(utterances.len());
    let mut emission = Vec::with_capacity(utterances.len());
    for (k, u) in utterances.iter().enumerate() {
        if !room.room.contains(u.position) {
            return Err(Error::Geometry(format!("utterance {k} at {:?} is outside the room", u.position)));
        }
        if u.start >= len {
            return Err(Error::Argument(format!("utterance {k} starts after the end of the scene")));
        }
        let gain = 10f64.powf(u.gain_db / 20.0);
        let dry: Vec<f64> = u.signal.iter().map(|v| v * gain).collect();
        let rirs = mics
            .iter()
            .map(|m| image_method_rir(&room.room, u.position, *m, sample_rate))
            .collect::<Result<Vec<_>>>()?;
        let rir_len = rirs.iter().map(Vec::len).max().unwrap_or(0);
        let direct_rirs: Vec<Vec<f64>> = mics.iter().map(|m| direct_path_rir(u.position, *m, sample_rate, rir_len)).collect();
        let keep = (len - u.start).min(dry.len() + rir_len.max(1) - 1);
        let to_image = |signals: Vec<Vec<f64>>| {
            let mut a = Array2::zeros((j, keep));
            for (c, sig) in signals.iter().enumerate() {
                for (t, v) in sig.iter().take(keep).enumerate() {
                    a[(c, t)] = *v;
                }
            }
            SpatialImage { start: u.start, samples: a }
        };
        let image = to_image(convolve_many(&dry, &rirs));
        let direct_image = to_image(convolve_many(&dry, &direct_rirs));
        let lag = (distance(u.position, mics[reference]) / SPEED_OF_SOUND * sample_rate as f64).round() as usize;
        let first = dry.iter().position(|v| *v != 0.0).unwrap_or(0);
        let last = dry.iter().rposition(|v| *v != 0.0).map_or(0, |p| p + 1);
        segments.push(image.span());
        emission.push((u.start + first + lag).min(len)..(u.start + last + lag).min(len));
        images.push(image);
        direct.push(direct_image);
    }
    let assignment = assign_channels(&segments)?;

    let mut mixture = Array2::zeros((j, len));
    for image in &images {
        image.add_into(&mut mixture);
    }
    let noise = match noise_snr_db {
        None => None,
        Some(snr) => {
            if !snr.is_finite() {
                return Err(Error::Argument(format!("SNR {snr} must be finite")));
            }
            let speech_power = mixture.row(reference).iter().map(|v| v * v).sum::<f64>() / len as f64;
            let mut n = isotropic_noise_at(&mics, len as f64 / sample_rate as f64, sample_rate, seed ^ 0x6e6f697365)?;
            let n_len = n.len().min(len);
            let mut samples = Array2::zeros((j, len));
            samples.slice_mut(s![.., ..n_len]).assign(&n.samples().slice(s![.., ..n_len]));
            let noise_power = samples.row(reference).iter().map(|v| v * v).sum::<f64>() / len as f64;
            let scale = if noise_power > 0.0 && speech_power > 0.0 {
                (speech_power / noise_power / 10f64.powf(snr / 10.0)).sqrt()
            } else {
                0.0
            };
            samples.mapv_inplace(|v| v * scale);
            n = MultichannelWave::new(samples, sample_rate)?;
            mixture += n.samples();
            Some(n)
        }
    };
    let truth = GroundTruth {
        sample_rate,
        len,
        reference_index: reference,
        images,
        direct,
        noise,
        assignment,
        segments,
        emission,
        positions: utterances.iter().map(|u| u.position).collect(),
    };
    Ok((MultichannelWave::new(mixture, sample_rate)?, truth))
}

/// Places one or two dry sources according to `spec.configuration` and
/// renders a clip of at most [`MAX_CLIP_SECONDS`].
pub fn make_mixture(
    spec: &MixtureSpec,
    room: &RoomSpec,
    sources: &[Vec<f64>],
    sample_rate: u32,
) -> Result<(MultichannelWave, GroundTruth)> {
    let needed = spec.configuration.sources_needed();
    if sources.len() < needed {
        return Err(Error::Argument(format!(
            "{:?} needs {needed} sources, got {}",
            spec.configuration,
            sources.len()
        )));
    }
    if room.source_positions.len() < needed {
        return Err(Error::Argument(format!("{:?} needs {needed} source positions", spec.configuration)));
    }
    if !(spec.clip_seconds > 0.0 && spec.clip_seconds <= MAX_CLIP_SECONDS) {
        return Err(Error::Argument(format!("clip length {} s must be in (0, {MAX_CLIP_SECONDS}]", spec.clip_seconds)));
    }
    let sr = sample_rate as f64;
    let clip = (spec.clip_seconds * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lead = (rng.random_range(0.05..0.3) * sr) as usize;
    let room_tail = room.room.rir_length(sample_rate);
    let fit = |s: &[f64], max: usize| s[..s.len().min(max)].to_vec();
    let avail = clip.saturating_sub(lead + room_tail / 2).max(1);
    let placed: Vec<(Vec<f64>, usize)> = match spec.configuration {
        MixtureConfiguration::Single => vec![(fit(&sources[0], avail), lead)],
        MixtureConfiguration::Sequential => {
            let gap = (rng.random_range(0.1..0.5) * sr) as usize;
            let each = avail.saturating_sub(gap) / 2;
            let a = fit(&sources[0], each);
            let start1 = lead + a.len() + gap;
            vec![(a, lead), (fit(&sources[1], each), start1)]
        }
        MixtureConfiguration::PartialOverlap => {
            let overlap: f64 = rng.random_range(0.2..0.6);
            let each = (avail as f64 / (2.0 - overlap)) as usize;
            let a = fit(&sources[0], each);
            let b = fit(&sources[1], each);
            let shared = (overlap * a.len().min(b.len()) as f64) as usize;
            let start1 = lead + a.len() - shared;
            vec![(a, lead), (b, start1)]
        }
        MixtureConfiguration::ContainedOverlap => {
            let a = fit(&sources[0], avail);
            let inner_max = (a.len() as f64 * 0.6) as usize;
            let b = fit(&sources[1], inner_max);
            let slack = a.len() - b.len();
            let offset = (slack as f64 * rng.random_range(0.2..0.8)) as usize;
            vec![(a, lead), (b, lead + offset)]
        }
    };
    let utterances: Vec<Utterance> = placed
        .into_iter()
        .enumerate()
        .map(|(k, (signal, start))| Utterance {
            signal,
            position: room.source_positions[k],
            start,
            gain_db: spec.gains_db.get(k).copied().unwrap_or(0.0),
        })
        .collect();
    render_scene(room, &utterances, spec.noise_snr_db, clip, sample_rate, spec.seed)
}
