//! Speech/speech/noise masks: the per-window mask container, mask providers,
//! and the test-time post-processing (sum-to-one normalization and merging
//! of the two speech heads when they point at the same direction).

use std::ops::Range;

use ndarray::{s, Array2, Array3, ArrayView2, Axis, Zip};
use num_complex::Complex64;

use crate::features::FeatureFrameSequence;
use crate::linalg::principal_eigenvector;
use crate::signal_io::{ArrayGeometry, MaskFile, MaskFileHeader};
use crate::stft::Spectrogram;
use crate::{Error, Result, SPEED_OF_SOUND};

/// Guard used throughout mask arithmetic.
pub const MASK_EPSILON: f64 = 1e-10;

/// Default DOA difference below which the two speech heads are merged.
pub const DEFAULT_MERGE_THRESHOLD_DEG: f64 = 15.0;

/// Band used for DOA matching; the upper edge keeps a 4.25 cm array clear of
/// spatial aliasing.
pub const DOA_BAND_HZ: (f64, f64) = (300.0, 4000.0);

/// A head whose mean mask value is below this carries no signal.
const EMPTY_HEAD_MEAN: f64 = 1e-8;

const POWER_ITERATIONS: usize = 60;

/// Masks for one window: two speech heads and one noise head, all in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    /// `2 x frames x bins`.
    pub speech: Array3<f64>,
    /// `frames x bins`.
    pub noise: Array2<f64>,
    pub window_index: usize,
}

impl MaskSet {
    pub fn new(speech: Array3<f64>, noise: Array2<f64>, window_index: usize) -> Result<Self> {
        let set = Self { speech, noise, window_index };
        set.validate()?;
        Ok(set)
    }

    pub fn zeros(frames: usize, bins: usize, window_index: usize) -> Self {
        Self { speech: Array3::zeros((2, frames, bins)), noise: Array2::zeros((frames, bins)), window_index }
    }

    pub fn validate(&self) -> Result<()> {
        let (heads, frames, bins) = self.speech.dim();
        if heads != 2 {
            return Err(Error::shape(format!("expected 2 speech heads, got {heads}")));
        }
        if self.noise.dim() != (frames, bins) {
            return Err(Error::shape(format!(
                "noise head is {:?}, speech heads are {frames}x{bins}",
                self.noise.dim()
            )));
        }
        if let Some(v) = self.speech.iter().chain(self.noise.iter()).find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("mask value {v} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.noise.nrows()
    }

    pub fn bins(&self) -> usize {
        self.noise.ncols()
    }

    pub fn head(&self, i: usize) -> ArrayView2<'_, f64> {
        self.speech.index_axis(Axis(0), i)
    }

    /// Sum of all mask values in speech head `i`.
    pub fn mass(&self, i: usize) -> f64 {
        self.head(i).sum()
    }

    pub fn is_head_empty(&self, i: usize) -> bool {
        let n = (self.frames() * self.bins()).max(1) as f64;
        self.mass(i) / n < EMPTY_HEAD_MEAN
    }

    /// Copy with the two speech heads exchanged.
    pub fn swapped(&self) -> Self {
        let mut out = self.clone();
        out.speech.index_axis_mut(Axis(0), 0).assign(&self.head(1));
        out.speech.index_axis_mut(Axis(0), 1).assign(&self.head(0));
        out
    }

    /// Frames `range` of a longer mask set, relabelled as window `window_index`.
    pub fn slice_frames(&self, range: Range<usize>, window_index: usize) -> Self {
        Self {
            speech: self.speech.slice(s![.., range.clone(), ..]).to_owned(),
            noise: self.noise.slice(s![range, ..]).to_owned(),
            window_index,
        }
    }
}

/// What a provider produces per window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskCapability {
    pub heads: usize,
    /// Fixed window length, or `None` if the provider follows the request.
    pub frames_per_window: Option<usize>,
    pub bins: usize,
    /// Whether [`WindowRequest::features`] must be populated.
    pub needs_features: bool,
}

/// One window's worth of input handed to a provider.
pub struct WindowRequest<'a> {
    pub index: usize,
    pub frames: Range<usize>,
    /// Full-length input spectrogram; the window is `frames`.
    pub spec: &'a Spectrogram,
    pub features: Option<&'a FeatureFrameSequence>,
}

/// Source of per-window speech/speech/noise masks. Implementations are
/// deterministic for fixed inputs and take `&self`, so concurrent window
/// requests are allowed.
pub trait MaskProvider {
    fn capability(&self) -> MaskCapability;

    fn window_masks(&self, request: &WindowRequest<'_>) -> Result<MaskSet>;

    /// Called once with the planned windows before any request.
    fn prepare(&self, _windows: &[Range<usize>]) -> Result<()> {
        Ok(())
    }
}

/// Ideal ratio masks `|s_i| / (|s_0| + |s_1| + |n| + eps)` from reference-mic
/// spectra (`frames x bins`). With a single source the second head is zero.
pub fn ideal_ratio_masks(sources: &[ArrayView2<'_, Complex64>], noise: ArrayView2<'_, Complex64>) -> Result<MaskSet> {
    if sources.is_empty() || sources.len() > 2 {
        return Err(Error::Argument(format!("expected 1 or 2 sources, got {}", sources.len())));
    }
    let dim = noise.dim();
    if let Some(bad) = sources.iter().find(|s| s.dim() != dim) {
        return Err(Error::shape(format!("source is {:?}, noise is {dim:?}", bad.dim())));
    }
    let zero = Array2::<Complex64>::zeros(dim);
    let s0 = sources[0];
    let s1 = sources.get(1).copied().unwrap_or_else(|| zero.view());
    let mut speech = Array3::zeros((2, dim.0, dim.1));
    let mut noise_mask = Array2::zeros(dim);
    for t in 0..dim.0 {
        for f in 0..dim.1 {
            let a = s0[(t, f)].norm();
            let b = s1[(t, f)].norm();
            let n = noise[(t, f)].norm();
            let denom = a + b + n + MASK_EPSILON;
            speech[(0, t, f)] = a / denom;
            speech[(1, t, f)] = b / denom;
            noise_mask[(t, f)] = n / denom;
        }
    }
    MaskSet::new(speech, noise_mask, 0)
}

/// Oracle masks for each window of `windows`, computed from ground-truth
/// reference-mic spectrograms (channel 0 of each argument).
pub fn oracle_masks(
    mixture: &Spectrogram,
    sources: &[Spectrogram],
    noise: &Spectrogram,
    windows: &[Range<usize>],
) -> Result<Vec<MaskSet>> {
    let full = OracleMaskProvider::new(mixture, sources, noise)?;
    windows
        .iter()
        .enumerate()
        .map(|(c, w)| {
            if w.end > full.masks.frames() {
                return Err(Error::shape(format!("window {w:?} exceeds {} frames", full.masks.frames())));
            }
            Ok(full.masks.slice_frames(w.clone(), c))
        })
        .collect()
}

/// Serves ideal ratio masks computed once over the whole signal.
#[derive(Debug, Clone)]
pub struct OracleMaskProvider {
    masks: MaskSet,
}

impl OracleMaskProvider {
    pub fn new(mixture: &Spectrogram, sources: &[Spectrogram], noise: &Spectrogram) -> Result<Self> {
        let dim = (mixture.frames(), mixture.bins());
        let views: Vec<ArrayView2<Complex64>> = sources.iter().map(|s| s.channel(0)).collect();
        if views.iter().chain(std::iter::once(&noise.channel(0))).any(|v| v.dim() != dim) {
            return Err(Error::shape("oracle inputs must match the mixture's frames and bins"));
        }
        Ok(Self { masks: ideal_ratio_masks(&views, noise.channel(0))? })
    }

    pub fn from_masks(masks: MaskSet) -> Self {
        Self { masks }
    }

    pub fn full_masks(&self) -> &MaskSet {
        &self.masks
    }
}

impl MaskProvider for OracleMaskProvider {
    fn capability(&self) -> MaskCapability {
        MaskCapability { heads: 3, frames_per_window: None, bins: self.masks.bins(), needs_features: false }
    }

    fn window_masks(&self, request: &WindowRequest<'_>) -> Result<MaskSet> {
        if request.frames.end > self.masks.frames() {
            return Err(Error::shape(format!(
                "window {:?} exceeds the {} oracle frames",
                request.frames,
                self.masks.frames()
            )));
        }
        Ok(self.masks.slice_frames(request.frames.clone(), request.index))
    }
}

/// Serves masks precomputed by an external estimator and stored in a `UMXM`
/// container, one set per planned window.
#[derive(Debug, Clone)]
pub struct FileMaskProvider {
    header: MaskFileHeader,
    windows: Vec<MaskSet>,
}

impl FileMaskProvider {
    pub fn new(file: MaskFile) -> Self {
        Self { header: file.header, windows: file.windows }
    }

    pub fn open(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(Self::new(crate::signal_io::read_mask_file(path)?))
    }

    pub fn header(&self) -> &MaskFileHeader {
        &self.header
    }
}

impl MaskProvider for FileMaskProvider {
    fn capability(&self) -> MaskCapability {
        MaskCapability {
            heads: self.header.heads as usize,
            frames_per_window: Some(self.header.frames_per_window as usize),
            bins: self.header.bins as usize,
            needs_features: false,
        }
    }

    fn prepare(&self, windows: &[Range<usize>]) -> Result<()> {
        if windows.len() != self.windows.len() {
            return Err(Error::Format(format!(
                "mask file holds {} windows, expected {}",
                self.windows.len(),
                windows.len()
            )));
        }
        if let Some(w) = windows.iter().find(|w| w.len() != self.header.frames_per_window as usize) {
            return Err(Error::Format(format!(
                "mask file windows are {} frames, expected {}",
                self.header.frames_per_window,
                w.len()
            )));
        }
        if windows.len() > 1 {
            let hop = windows[1].start - windows[0].start;
            if hop != self.header.hop_frames as usize {
                return Err(Error::Format(format!(
                    "mask file hop is {} frames, expected {hop}",
                    self.header.hop_frames
                )));
            }
        }
        Ok(())
    }

    fn window_masks(&self, request: &WindowRequest<'_>) -> Result<MaskSet> {
        let set = self.windows.get(request.index).ok_or_else(|| {
            Error::Format(format!("mask file has no window {} (holds {})", request.index, self.windows.len()))
        })?;
        if set.frames() != request.frames.len() || set.bins() != request.spec.bins() {
            return Err(Error::Format(format!(
                "window {} masks are {}x{}, expected {}x{}",
                request.index,
                set.frames(),
                set.bins(),
                request.frames.len(),
                request.spec.bins()
            )));
        }
        Ok(set.clone())
    }
}

/// Rescales the three masks of every bin to sum to one. A uniform `eps / 3`
/// is added to each head before dividing by `sum + eps`, so all-zero bins
/// become `(1/3, 1/3, 1/3)` and every bin sums to one exactly up to rounding.
pub fn normalize_masks(set: &MaskSet) -> MaskSet {
    let mut out = set.clone();
    let third = MASK_EPSILON / 3.0;
    let (mut head0, mut rest) = out.speech.view_mut().split_at(Axis(0), 1);
    let mut head0 = head0.index_axis_mut(Axis(0), 0);
    let mut head1 = rest.index_axis_mut(Axis(0), 0);
    Zip::from(&mut head0).and(&mut head1).and(&mut out.noise).for_each(|a, b, n| {
        let denom = *a + *b + *n + MASK_EPSILON;
        *a = (*a + third) / denom;
        *b = (*b + third) / denom;
        *n = (*n + third) / denom;
    });
    let _ = &mut head0;
    out
}

/// Circular distance between two azimuths, in `[0, 180]` degrees.
pub fn circular_difference_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Far-field azimuth estimator on a 1-degree grid.
///
/// For every bin in [`DOA_BAND_HZ`] the principal eigenvector of the
/// mask-weighted spatial covariance is matched against horizontal plane-wave
/// steering vectors; normalized match scores are summed over bins and the
/// best azimuth wins.
#[derive(Debug, Clone)]
pub struct DoaEstimator {
    bins: Vec<usize>,
    /// `bins.len() x 360 x J` steering vectors.
    steering: Array3<Complex64>,
}

impl DoaEstimator {
    pub fn new(geometry: &ArrayGeometry, spec: &Spectrogram) -> Self {
        let cfg = spec.config();
        let sr = spec.sample_rate();
        let bins: Vec<usize> = (0..spec.bins())
            .filter(|&k| {
                let f = cfg.bin_frequency(k, sr);
                f >= DOA_BAND_HZ.0 && f <= DOA_BAND_HZ.1
            })
            .collect();
        let positions = geometry.positions();
        let j = positions.len();
        let mut steering = Array3::zeros((bins.len(), 360, j));
        for (bi, &k) in bins.iter().enumerate() {
            let omega = 2.0 * std::f64::consts::PI * cfg.bin_frequency(k, sr);
            for deg in 0..360 {
                let (sin, cos) = (deg as f64).to_radians().sin_cos();
                for (m, p) in positions.iter().enumerate() {
                    // A plane wave from azimuth `deg` reaches microphone `p`
                    // earlier by (p . u) / c.
                    let advance = (p[0] * cos + p[1] * sin) / SPEED_OF_SOUND;
                    steering[(bi, deg, m)] = Complex64::from_polar(1.0 / (j as f64).sqrt(), omega * advance);
                }
            }
        }
        Self { bins, steering }
    }

    /// Estimated azimuth in `[0, 360)` degrees for the signal selected by
    /// `mask` (`frames x bins`, aligned with `spec`).
    pub fn estimate(&self, mask: ArrayView2<'_, f64>, spec: &Spectrogram) -> Result<f64> {
        if mask.dim() != (spec.frames(), spec.bins()) {
            return Err(Error::shape(format!(
                "mask is {:?}, spectrogram is {}x{}",
                mask.dim(),
                spec.frames(),
                spec.bins()
            )));
        }
        let j = spec.channels();
        if self.steering.len_of(Axis(2)) != j {
            return Err(Error::shape("geometry and spectrogram channel counts differ"));
        }
        let n = (mask.len()).max(1) as f64;
        if mask.sum() / n < EMPTY_HEAD_MEAN {
            return Err(Error::NoSignal("mask is empty".into()));
        }
        let data = spec.data();
        let mut scores = [0.0_f64; 360];
        let mut used = 0usize;
        let mut cov = Array2::<Complex64>::zeros((j, j));
        for (bi, &k) in self.bins.iter().enumerate() {
            cov.fill(Complex64::new(0.0, 0.0));
            for t in 0..spec.frames() {
                let m = mask[(t, k)];
                if m == 0.0 {
                    continue;
                }
                let w = m * m;
                for a in 0..j {
                    let xa = data[(a, t, k)] * w;
                    for b in a..j {
                        cov[(a, b)] += xa * data[(b, t, k)].conj();
                    }
                }
            }
            for a in 0..j {
                for b in 0..a {
                    cov[(a, b)] = cov[(b, a)].conj();
                }
            }
            if cov.diag().iter().map(|z| z.re).sum::<f64>() <= 0.0 {
                continue;
            }
            used += 1;
            let v = principal_eigenvector(&cov, POWER_ITERATIONS);
            for (deg, score) in scores.iter_mut().enumerate() {
                let d = self.steering.slice(s![bi, deg, ..]);
                let inner: Complex64 = d.iter().zip(v.iter()).map(|(a, b)| a.conj() * b).sum();
                *score += inner.norm_sqr();
            }
        }
        if used == 0 {
            return Err(Error::NoSignal("no energy under the mask in the DOA band".into()));
        }
        let best = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(deg, _)| deg)
            .unwrap_or(0);
        Ok(best as f64)
    }
}

pub fn estimate_doa(mask: ArrayView2<'_, f64>, spec: &Spectrogram, geometry: &ArrayGeometry) -> Result<f64> {
    DoaEstimator::new(geometry, spec).estimate(mask, spec)
}

/// Outcome of [`merge_heads_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub masks: MaskSet,
    pub merged: bool,
    pub doas: Option<[f64; 2]>,
}

pub fn merge_heads_if_same_doa(
    set: &MaskSet,
    spec: &Spectrogram,
    geometry: &ArrayGeometry,
    threshold_deg: f64,
) -> Result<MaskSet> {
    merge_heads_with(&DoaEstimator::new(geometry, spec), set, spec, threshold_deg).map(|o| o.masks)
}

/// Merges the speech heads into the more massive one when their DOAs differ
/// by strictly less than `threshold_deg`; the other head is zeroed. A single
/// empty head is left alone; two empty heads are a no-signal error.
pub fn merge_heads_with(
    estimator: &DoaEstimator,
    set: &MaskSet,
    spec: &Spectrogram,
    threshold_deg: f64,
) -> Result<MergeOutcome> {
    let empty = [set.is_head_empty(0), set.is_head_empty(1)];
    if empty[0] && empty[1] {
        return Err(Error::NoSignal("both speech heads are empty".into()));
    }
    if empty[0] || empty[1] {
        return Ok(MergeOutcome { masks: set.clone(), merged: false, doas: None });
    }
    let doas = [estimator.estimate(set.head(0), spec)?, estimator.estimate(set.head(1), spec)?];
    if circular_difference_deg(doas[0], doas[1]) >= threshold_deg {
        return Ok(MergeOutcome { masks: set.clone(), merged: false, doas: Some(doas) });
    }
    let dominant = if set.mass(1) > set.mass(0) { 1 } else { 0 };
    let mut out = set.clone();
    let sum = (&set.head(0) + &set.head(1)).mapv(|v| v.min(1.0));
    out.speech.index_axis_mut(Axis(0), dominant).assign(&sum);
    out.speech.index_axis_mut(Axis(0), 1 - dominant).fill(0.0);
    Ok(MergeOutcome { masks: out, merged: true, doas: Some(doas) })
}
