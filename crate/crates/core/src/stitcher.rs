//! Sliding-window engine: plans overlapping analysis windows, aligns the
//! output permutation of each window with its predecessor, and emits only the
//! frames no earlier window has emitted.
//!
//! Alignment compares masked reference magnitudes `m_i |x_R|` over the
//! overlap. Whenever the comparison cannot decide (the first window, or an
//! exact cost tie), heads are put in a canonical order: the head with more
//! masked energy goes to output 0, and the identity wins a further tie. This
//! makes the stitched output independent of how a provider orders its heads.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2};
use num_complex::Complex64;

use crate::beamformer::{beamform_window, mask_window, BeamformerOptions};
use crate::features::{compute_features, DEFAULT_NORMALIZATION_SECONDS};
use crate::masks::{
    merge_heads_with, normalize_masks, DoaEstimator, MaskProvider, MaskSet, WindowRequest, DEFAULT_MERGE_THRESHOLD_DEG,
};
use crate::pit::Permutation;
use crate::signal_io::ArrayGeometry;
use crate::stft::Spectrogram;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct WindowPlan {
    pub window_frames: usize,
    pub hop_frames: usize,
}

impl Default for WindowPlan {
    /// 2.4 s windows at a 16 ms hop with roughly 75% overlap.
    fn default() -> Self {
        Self { window_frames: 150, hop_frames: 38 }
    }
}

impl WindowPlan {
    pub fn validate(&self) -> Result<()> {
        if self.hop_frames == 0 || self.hop_frames >= self.window_frames {
            return Err(Error::Config(format!(
                "window plan needs 0 < hop < window, got hop {} and window {}",
                self.hop_frames, self.window_frames
            )));
        }
        Ok(())
    }

    pub fn overlap(&self) -> usize {
        self.window_frames - self.hop_frames
    }
}

/// Windows at stride `hop_frames`; if the stride leaves a tail uncovered, a
/// final window is right-aligned to end at `total_frames`.
pub fn plan_windows(total_frames: usize, plan: &WindowPlan) -> Result<Vec<Range<usize>>> {
    plan.validate()?;
    if total_frames < plan.window_frames {
        return Err(Error::InsufficientInput(format!(
            "{total_frames} frames is shorter than one {}-frame window",
            plan.window_frames
        )));
    }
    let mut windows: Vec<Range<usize>> = (0..)
        .map(|c| c * plan.hop_frames)
        .take_while(|start| start + plan.window_frames <= total_frames)
        .map(|start| start..start + plan.window_frames)
        .collect();
    if windows.last().map_or(true, |w| w.end < total_frames) {
        windows.push(total_frames - plan.window_frames..total_frames);
    }
    Ok(windows)
}

/// `sum_i sum_tf (prev_i - curr_perm(i))^2` over an overlap region.
pub fn alignment_cost(
    prev: [ArrayView2<'_, f64>; 2],
    curr: [ArrayView2<'_, f64>; 2],
    permutation: Permutation,
) -> Result<f64> {
    let dim = prev[0].dim();
    if prev[1].dim() != dim || curr.iter().any(|c| c.dim() != dim) {
        return Err(Error::shape("overlap regions differ in shape"));
    }
    let mut total = 0.0;
    for i in 0..2 {
        let other = curr[permutation.apply(i)];
        ndarray::Zip::from(prev[i]).and(other).for_each(|&a, &b| {
            let d = a - b;
            total += d * d;
        });
    }
    Ok(total)
}

fn canonical_order(mags: &[Array2<f64>; 2]) -> Permutation {
    if mags[1].sum() > mags[0].sum() {
        Permutation::Swap
    } else {
        Permutation::Identity
    }
}

/// Running alignment state for one stream; exclusively owned by one run.
#[derive(Debug, Clone, Default)]
pub struct StitchState {
    /// Permutation applied to the previous window's heads.
    pub cumulative_permutation: Permutation,
    previous: Option<(Range<usize>, [Array2<f64>; 2])>,
    pub frames_emitted: usize,
}

/// Result of aligning one window.
#[derive(Debug, Clone)]
pub struct Emission {
    /// Absolute frames this window contributes.
    pub emitted: Range<usize>,
    /// Masks with heads in output order.
    pub masks: MaskSet,
    /// Applied to the provider's heads.
    pub permutation: Permutation,
    /// Relative to the previous window's applied permutation.
    pub relative: Permutation,
    /// Alignment costs for `[Identity, Swap]`, absent on the first window.
    pub costs: Option<[f64; 2]>,
}

impl StitchState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Aligns `masks` for the window covering absolute frames `frames`, whose
    /// reference-channel magnitude is `ref_mag` (`frames x bins`).
    pub fn align_and_emit(&mut self, masks: &MaskSet, ref_mag: ArrayView2<'_, f64>, frames: Range<usize>) -> Result<Emission> {
        if ref_mag.dim() != (masks.frames(), masks.bins()) || frames.len() != masks.frames() {
            return Err(Error::shape(format!(
                "masks are {}x{}, window {frames:?} has magnitude {:?}",
                masks.frames(),
                masks.bins(),
                ref_mag.dim()
            )));
        }
        if frames.start > self.frames_emitted || frames.end <= self.frames_emitted {
            return Err(Error::Argument(format!(
                "window {frames:?} does not continue the {} frames already emitted",
                self.frames_emitted
            )));
        }
        let mags = [&masks.head(0) * &ref_mag, &masks.head(1) * &ref_mag];
        let (permutation, costs) = match &self.previous {
            None => (canonical_order(&mags), None),
            Some((prev_range, prev_mags)) => {
                let overlap = frames.start.max(prev_range.start)..prev_range.end.min(frames.end);
                let p = overlap.start - prev_range.start..overlap.end - prev_range.start;
                let c = overlap.start - frames.start..overlap.end - frames.start;
                let prev = [prev_mags[0].slice(s![p.clone(), ..]), prev_mags[1].slice(s![p, ..])];
                let curr = [mags[0].slice(s![c.clone(), ..]), mags[1].slice(s![c, ..])];
                let costs = [
                    alignment_cost(prev, curr, Permutation::Identity)?,
                    alignment_cost(prev, curr, Permutation::Swap)?,
                ];
                let chosen = if costs[1] < costs[0] {
                    Permutation::Swap
                } else if costs[0] < costs[1] {
                    Permutation::Identity
                } else {
                    canonical_order(&mags)
                };
                (chosen, Some(costs))
            }
        };
        let aligned = match permutation {
            Permutation::Identity => masks.clone(),
            Permutation::Swap => masks.swapped(),
        };
        let ordered = match permutation {
            Permutation::Identity => mags,
            Permutation::Swap => {
                let [a, b] = mags;
                [b, a]
            }
        };
        let relative = self.cumulative_permutation.compose(permutation);
        let emitted = self.frames_emitted..frames.end;
        self.cumulative_permutation = permutation;
        self.frames_emitted = frames.end;
        self.previous = Some((frames, ordered));
        Ok(Emission { emitted, masks: aligned, permutation, relative, costs })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeparationMode {
    #[default]
    Masking,
    Beamforming,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub plan: WindowPlan,
    pub mode: SeparationMode,
    pub normalize: bool,
    /// DOA merge threshold in degrees; `None` disables merging.
    pub merge_threshold_deg: Option<f64>,
    pub beamformer: BeamformerOptions,
    pub feature_seconds: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            plan: WindowPlan::default(),
            mode: SeparationMode::Masking,
            normalize: true,
            merge_threshold_deg: Some(DEFAULT_MERGE_THRESHOLD_DEG),
            beamformer: BeamformerOptions::default(),
            feature_seconds: DEFAULT_NORMALIZATION_SECONDS,
        }
    }
}

/// Per-window diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowRecord {
    pub index: usize,
    pub frames: Range<usize>,
    pub emitted: Range<usize>,
    pub permutation: Permutation,
    pub relative: Permutation,
    pub merged: bool,
    pub costs: Option<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Two single-channel spectrograms covering every input frame.
    pub outputs: [Spectrogram; 2],
    pub windows: Vec<WindowRecord>,
}

/// Runs every planned window through the provider, post-processing,
/// alignment and masking or beamforming, and assembles the emitted frames.
pub fn run_pipeline(
    spec: &Spectrogram,
    provider: &dyn MaskProvider,
    geometry: &ArrayGeometry,
    options: &PipelineOptions,
) -> Result<PipelineOutput> {
    if geometry.channel_count() != spec.channels() {
        return Err(Error::Config(format!(
            "geometry has {} microphones, input has {} channels",
            geometry.channel_count(),
            spec.channels()
        )));
    }
    let capability = provider.capability();
    if capability.heads != 3 {
        return Err(Error::Config(format!("provider yields {} heads, expected 3", capability.heads)));
    }
    if capability.bins != spec.bins() {
        return Err(Error::Config(format!("provider yields {} bins, input has {}", capability.bins, spec.bins())));
    }
    if let Some(n) = capability.frames_per_window {
        if n != options.plan.window_frames {
            return Err(Error::Config(format!(
                "provider windows are {n} frames, plan uses {}",
                options.plan.window_frames
            )));
        }
    }
    let windows = plan_windows(spec.frames(), &options.plan)?;
    provider.prepare(&windows)?;
    let features = if capability.needs_features {
        Some(compute_features(spec, geometry, options.feature_seconds)?)
    } else {
        None
    };
    let reference = geometry.reference_index();
    let estimator = options.merge_threshold_deg.map(|_| DoaEstimator::new(geometry, spec));
    let ref_mag = spec.magnitude(reference);

    let dim = (spec.frames(), spec.bins());
    let mut out = [Array2::<Complex64>::zeros(dim), Array2::<Complex64>::zeros(dim)];
    let mut state = StitchState::new();
    let mut records = Vec::with_capacity(windows.len());
    for (index, frames) in windows.iter().enumerate() {
        let request = WindowRequest { index, frames: frames.clone(), spec, features: features.as_ref() };
        let mut masks = provider.window_masks(&request)?;
        masks.validate()?;
        if (masks.frames(), masks.bins()) != (frames.len(), spec.bins()) {
            return Err(Error::shape(format!(
                "provider returned {}x{} masks for a {}x{} window",
                masks.frames(),
                masks.bins(),
                frames.len(),
                spec.bins()
            )));
        }
        if options.normalize {
            masks = normalize_masks(&masks);
        }
        let window_spec = spec.slice_frames(frames.clone());
        let mut merged = false;
        if let (Some(threshold), Some(estimator)) = (options.merge_threshold_deg, &estimator) {
            match merge_heads_with(estimator, &masks, &window_spec, threshold) {
                Ok(outcome) => {
                    merged = outcome.merged;
                    masks = outcome.masks;
                }
                Err(Error::NoSignal(msg)) => log::debug!("window {index}: merge skipped ({msg})"),
                Err(e) => return Err(e),
            }
        }
        let emission = state.align_and_emit(&masks, ref_mag.slice(s![frames.clone(), ..]), frames.clone())?;
        let streams = match options.mode {
            SeparationMode::Masking => mask_window(&window_spec, &emission.masks, reference)?,
            SeparationMode::Beamforming => beamform_window(&window_spec, &emission.masks, geometry, &options.beamformer)?,
        };
        let local = emission.emitted.start - frames.start..emission.emitted.end - frames.start;
        for (dst, src) in out.iter_mut().zip(streams.iter()) {
            dst.slice_mut(s![emission.emitted.clone(), ..]).assign(&src.slice(s![local.clone(), ..]));
        }
        records.push(WindowRecord {
            index,
            frames: frames.clone(),
            emitted: emission.emitted,
            permutation: emission.permutation,
            relative: emission.relative,
            merged,
            costs: emission.costs,
        });
    }
    let [a, b] = out;
    let cfg = *spec.config();
    let sr = spec.sample_rate();
    Ok(PipelineOutput {
        outputs: [Spectrogram::from_mono(a, cfg, sr)?, Spectrogram::from_mono(b, cfg, sr)?],
        windows: records,
    })
}
