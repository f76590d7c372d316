//! Mask-driven MVDR beamforming for one window.
//!
//! For output channel `i` the target covariance comes from speech mask `i`,
//! and the interference covariance is the other talker's plus the noise
//! head's. The weights are `w = Psi^-1 Phi e_R / tr(Psi^-1 Phi)`, and the
//! beamformed output is capped by the masked reference magnitude.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;

use crate::linalg::{is_hermitian, solve};
use crate::masks::{MaskSet, MASK_EPSILON};
use crate::signal_io::ArrayGeometry;
use crate::stft::Spectrogram;
use crate::{Error, Result};

/// Relative diagonal loading applied to interference covariances.
pub const DIAGONAL_LOADING: f64 = 1e-6;

/// `|tr(Psi^-1 Phi)|` below this means the target is empty and `w = 0`.
pub const EMPTY_TARGET_TRACE: f64 = 1e-12;

const HERMITIAN_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceKind {
    Target(usize),
    Noise,
    Interference(usize),
}

/// Per-bin `J x J` Hermitian matrices, stored `bins x J x J`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialCovariance {
    pub matrices: Array3<Complex64>,
    pub window_index: usize,
    pub kind: CovarianceKind,
}

impl SpatialCovariance {
    pub fn zeros(bins: usize, channels: usize, window_index: usize, kind: CovarianceKind) -> Self {
        Self { matrices: Array3::zeros((bins, channels, channels)), window_index, kind }
    }

    pub fn bins(&self) -> usize {
        self.matrices.len_of(Axis(0))
    }

    pub fn channels(&self) -> usize {
        self.matrices.len_of(Axis(1))
    }

    pub fn bin(&self, f: usize) -> ArrayView2<'_, Complex64> {
        self.matrices.index_axis(Axis(0), f)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { matrices: self.matrices.mapv(|z| z * factor), ..self.clone() }
    }
}

/// Per-bin weight vectors, stored `bins x J`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerWeights {
    pub weights: Array2<Complex64>,
    pub window_index: usize,
}

/// Covariance of the masked signal:
/// `Phi_f = sum_t (m x)(m x)^H / max(sum_t m^2, eps)`.
pub fn sig_cov(spec: &Spectrogram, mask: ArrayView2<'_, f64>, kind: CovarianceKind) -> Result<SpatialCovariance> {
    let (frames, bins) = (spec.frames(), spec.bins());
    if mask.dim() != (frames, bins) {
        return Err(Error::shape(format!("mask is {:?}, window is {frames}x{bins}", mask.dim())));
    }
    let j = spec.channels();
    let data = spec.data();
    let mut out = SpatialCovariance::zeros(bins, j, 0, kind);
    let mut x = vec![Complex64::new(0.0, 0.0); j];
    for f in 0..bins {
        let mut weight = 0.0;
        let mut m = out.matrices.index_axis_mut(Axis(0), f);
        for t in 0..frames {
            let w = mask[(t, f)];
            if w == 0.0 {
                continue;
            }
            let w2 = w * w;
            weight += w2;
            for (c, slot) in x.iter_mut().enumerate() {
                *slot = data[(c, t, f)];
            }
            for a in 0..j {
                let xa = x[a] * w2;
                for b in a..j {
                    m[(a, b)] += xa * x[b].conj();
                }
            }
        }
        let norm = 1.0 / weight.max(MASK_EPSILON);
        for a in 0..j {
            m[(a, a)] = Complex64::new(m[(a, a)].re * norm, 0.0);
            for b in a + 1..j {
                let v = m[(a, b)] * norm;
                m[(a, b)] = v;
                m[(b, a)] = v.conj();
            }
        }
    }
    Ok(out)
}

/// `Psi = Phi_other + Phi_noise`.
pub fn ssn_interference(other_target: &SpatialCovariance, noise: &SpatialCovariance) -> Result<SpatialCovariance> {
    if other_target.matrices.dim() != noise.matrices.dim() {
        return Err(Error::shape(format!(
            "covariances are {:?} and {:?}",
            other_target.matrices.dim(),
            noise.matrices.dim()
        )));
    }
    let channel = match other_target.kind {
        CovarianceKind::Target(i) => 1 - i.min(1),
        CovarianceKind::Interference(i) => i,
        CovarianceKind::Noise => 0,
    };
    Ok(SpatialCovariance {
        matrices: &other_target.matrices + &noise.matrices,
        window_index: other_target.window_index,
        kind: CovarianceKind::Interference(channel),
    })
}

/// MVDR weights with reference-channel selection and trace normalization.
///
/// The interference matrix is loaded with `1e-6 tr(Psi) / J` on the
/// diagonal. An all-zero interference matrix borrows its loading level from
/// the target so the solve stays scale-free.
pub fn mvdr_weights(
    target: &SpatialCovariance,
    interference: &SpatialCovariance,
    reference_index: usize,
) -> Result<BeamformerWeights> {
    let (bins, j) = (target.bins(), target.channels());
    if interference.matrices.dim() != target.matrices.dim() {
        return Err(Error::shape(format!(
            "target is {:?}, interference is {:?}",
            target.matrices.dim(),
            interference.matrices.dim()
        )));
    }
    if reference_index >= j {
        return Err(Error::Argument(format!("reference {reference_index} out of range for {j} channels")));
    }
    let mut weights = Array2::zeros((bins, j));
    for f in 0..bins {
        let phi = target.bin(f).to_owned();
        let psi = interference.bin(f).to_owned();
        if !is_hermitian(&phi, HERMITIAN_TOLERANCE) || !is_hermitian(&psi, HERMITIAN_TOLERANCE) {
            return Err(Error::Contract(format!("covariance at bin {f} is not Hermitian")));
        }
        let psi_trace: f64 = psi.diag().iter().map(|z| z.re).sum();
        let phi_trace: f64 = phi.diag().iter().map(|z| z.re).sum();
        let level = if psi_trace > 0.0 { psi_trace } else { phi_trace };
        if !(level > 0.0) {
            continue;
        }
        let mut loaded = psi;
        let load = DIAGONAL_LOADING * level / j as f64;
        for a in 0..j {
            loaded[(a, a)] += load;
        }
        let Some(a) = solve(&loaded, &phi) else {
            continue;
        };
        let tr: Complex64 = a.diag().iter().sum();
        if tr.norm() < EMPTY_TARGET_TRACE {
            continue;
        }
        let inv = tr.inv();
        for c in 0..j {
            weights[(f, c)] = a[(c, reference_index)] * inv;
        }
    }
    Ok(BeamformerWeights { weights, window_index: target.window_index })
}

/// `y_tf = w_f^H x_tf`, `frames x bins`.
pub fn apply(weights: &BeamformerWeights, spec: &Spectrogram) -> Result<Array2<Complex64>> {
    let (bins, j) = weights.weights.dim();
    if bins != spec.bins() || j != spec.channels() {
        return Err(Error::shape(format!(
            "weights are {bins}x{j}, spectrogram has {} bins and {} channels",
            spec.bins(),
            spec.channels()
        )));
    }
    let data = spec.data();
    Ok(Array2::from_shape_fn((spec.frames(), bins), |(t, f)| {
        (0..j).map(|c| weights.weights[(f, c)].conj() * data[(c, t, f)]).sum()
    }))
}

/// Caps `|y|` at the masked reference magnitude, keeping the phase:
/// `y * min(1, (m |x_R| + eps) / (|y| + eps))`.
pub fn gain_adjust(beamformed: &Array2<Complex64>, mask: ArrayView2<'_, f64>, ref_mag: ArrayView2<'_, f64>) -> Result<Array2<Complex64>> {
    if mask.dim() != beamformed.dim() || ref_mag.dim() != beamformed.dim() {
        return Err(Error::shape("gain adjustment inputs must share one shape"));
    }
    let mut out = beamformed.clone();
    ndarray::Zip::from(&mut out).and(mask).and(ref_mag).for_each(|y, &m, &r| {
        let g = ((m * r + MASK_EPSILON) / (y.norm() + MASK_EPSILON)).min(1.0);
        *y *= g;
    });
    Ok(out)
}

/// How the interference covariance for output channel `i` is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterferenceModel {
    /// Other talker's covariance plus the noise head's.
    #[default]
    Ssn,
    /// Covariance of the signal weighted by `1 - m_i`, without a noise head.
    Complement,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamformerOptions {
    pub interference: InterferenceModel,
    pub gain_adjust: bool,
}

impl Default for BeamformerOptions {
    fn default() -> Self {
        Self { interference: InterferenceModel::Ssn, gain_adjust: true }
    }
}

/// Both output channels for one window, each `frames x bins`. A speech head
/// with no mass yields silence.
pub fn beamform_window(
    spec: &Spectrogram,
    masks: &MaskSet,
    geometry: &ArrayGeometry,
    options: &BeamformerOptions,
) -> Result<[Array2<Complex64>; 2]> {
    if geometry.channel_count() != spec.channels() {
        return Err(Error::Config(format!(
            "geometry has {} microphones, input has {} channels",
            geometry.channel_count(),
            spec.channels()
        )));
    }
    if (masks.frames(), masks.bins()) != (spec.frames(), spec.bins()) {
        return Err(Error::shape(format!(
            "masks are {}x{}, window is {}x{}",
            masks.frames(),
            masks.bins(),
            spec.frames(),
            spec.bins()
        )));
    }
    let reference = geometry.reference_index();
    let dim = (spec.frames(), spec.bins());
    let targets = [
        sig_cov(spec, masks.head(0), CovarianceKind::Target(0))?,
        sig_cov(spec, masks.head(1), CovarianceKind::Target(1))?,
    ];
    let noise = match options.interference {
        InterferenceModel::Ssn => Some(sig_cov(spec, masks.noise.view(), CovarianceKind::Noise)?),
        InterferenceModel::Complement => None,
    };
    let ref_mag = spec.magnitude(reference);
    let mut outputs = [Array2::zeros(dim), Array2::zeros(dim)];
    for i in 0..2 {
        if masks.is_head_empty(i) {
            continue;
        }
        let psi = match &noise {
            Some(n) => ssn_interference(&targets[1 - i], n)?,
            None => {
                let complement = masks.head(i).mapv(|m| 1.0 - m);
                sig_cov(spec, complement.view(), CovarianceKind::Interference(i))?
            }
        };
        let w = mvdr_weights(&targets[i], &psi, reference)?;
        let y = apply(&w, spec)?;
        outputs[i] = if options.gain_adjust { gain_adjust(&y, masks.head(i), ref_mag.view())? } else { y };
    }
    Ok(outputs)
}

/// Masking output `y_i = m_i x_R` for both heads.
pub fn mask_window(spec: &Spectrogram, masks: &MaskSet, reference: usize) -> Result<[Array2<Complex64>; 2]> {
    if (masks.frames(), masks.bins()) != (spec.frames(), spec.bins()) {
        return Err(Error::shape("masks and window differ in shape"));
    }
    let x = spec.data().slice(s![reference, .., ..]).to_owned();
    Ok([&x * &masks.head(0).mapv(|m| Complex64::new(m, 0.0)), &x * &masks.head(1).mapv(|m| Complex64::new(m, 0.0))])
}
