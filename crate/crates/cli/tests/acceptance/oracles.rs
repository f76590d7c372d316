//! Independent reference computations.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unmix::beamformer::{CovarianceKind, SpatialCovariance, DIAGONAL_LOADING};
use unmix::masks::MaskSet;
use unmix::pit::Permutation;
use unmix::Complex64;

pub const J: usize = 7;
pub const BINS: usize = 257;

/// Exhaustive minimum of the masked-magnitude loss over both speech-head
/// assignments; ties keep the identity.
pub fn brute_force_pit(masks: &MaskSet, mix: &Array2<f64>, sources: [&Array2<f64>; 2]) -> (f64, Permutation) {
    let mut best: Option<(f64, Permutation)> = None;
    for (perm, order) in [(Permutation::Identity, [0, 1]), (Permutation::Swap, [1, 0])] {
        let mut loss = 0.0;
        for (i, &target) in order.iter().enumerate() {
            let mut part = 0.0;
            for t in 0..mix.nrows() {
                for f in 0..mix.ncols() {
                    let r = masks.speech[(i, t, f)] * mix[(t, f)] - sources[target][(t, f)];
                    part += r * r;
                }
            }
            loss += part;
        }
        if best.map_or(true, |(b, _)| loss < b) {
            best = Some((loss, perm));
        }
    }
    best.unwrap()
}

/// Random sum-to-one masks with magnitudes; one in ten instances repeats a
/// source so that both assignments tie.
pub fn pit_instance(rng: &mut ChaCha8Rng) -> (MaskSet, Array2<f64>, Array2<f64>, Array2<f64>) {
    let (t, f) = (rng.random_range(1..6), rng.random_range(1..6));
    let raw = Array3::from_shape_fn((3, t, f), |_| rng.random::<f64>());
    let sum = raw.sum_axis(ndarray::Axis(0));
    let speech = Array3::from_shape_fn((2, t, f), |(i, a, b)| raw[(i, a, b)] / sum[(a, b)]);
    let noise = Array2::from_shape_fn((t, f), |(a, b)| raw[(2, a, b)] / sum[(a, b)]);
    let masks = MaskSet::new(speech, noise, 0).unwrap();
    let mix = Array2::from_shape_fn((t, f), |_| rng.random::<f64>() * 2.0);
    let s0 = Array2::from_shape_fn((t, f), |_| rng.random::<f64>());
    let s1 = if rng.random_bool(0.1) { s0.clone() } else { Array2::from_shape_fn((t, f), |_| rng.random::<f64>()) };
    (masks, mix, s0, s1)
}

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub struct Rank1Case {
    pub phi: SpatialCovariance,
    pub psi: SpatialCovariance,
    pub steering: Vec<DVector<Complex64>>,
    pub psi_mats: Vec<DMatrix<Complex64>>,
}

fn to_cov(mats: &[DMatrix<Complex64>], kind: CovarianceKind) -> SpatialCovariance {
    let mut cov = SpatialCovariance::zeros(mats.len(), J, 0, kind);
    for (f, m) in mats.iter().enumerate() {
        for a in 0..J {
            for b in 0..J {
                cov.matrices[(f, a, b)] = m[(a, b)];
            }
        }
    }
    cov
}

/// Rank-one target `p d d^H` and a random full-rank PSD noise per bin.
pub fn rank1_case(seed: u64) -> Rank1Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut steering, mut phi, mut psi) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..BINS {
        let d = DVector::from_fn(J, |_, _| Complex64::from_polar(0.5 + rng.random::<f64>(), rng.random::<f64>() * 6.28));
        let power = 0.1 + rng.random::<f64>();
        phi.push(&d * d.adjoint() * c(power, 0.0));
        let a = DMatrix::from_fn(J, J + 3, |_, _| c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        psi.push(&a * a.adjoint() + DMatrix::identity(J, J) * c(1e-3, 0.0));
        steering.push(d);
    }
    Rank1Case {
        phi: to_cov(&phi, CovarianceKind::Target(0)),
        psi: to_cov(&psi, CovarianceKind::Noise),
        steering,
        psi_mats: psi,
    }
}

/// Textbook rank-one MVDR for `y = w^H x`: `Psi^-1 d conj(d_r) / (d^H Psi^-1 d)`,
/// with the same diagonal loading as the implementation.
pub fn closed_form_mvdr(psi: &DMatrix<Complex64>, d: &DVector<Complex64>, r: usize) -> DVector<Complex64> {
    let mut loaded = psi.clone();
    let load = DIAGONAL_LOADING * loaded.trace().re / J as f64;
    for a in 0..J {
        loaded[(a, a)] += c(load, 0.0);
    }
    let pinv_d = loaded.lu().solve(d).unwrap();
    &pinv_d * (d[r].conj() / d.dotc(&pinv_d))
}

/// Coherence of a spherically isotropic field between microphones `dist`
/// meters apart.
pub fn isotropic_coherence(freq: f64, dist: f64) -> f64 {
    let arg = 2.0 * std::f64::consts::PI * freq * dist / unmix::SPEED_OF_SOUND;
    if arg == 0.0 {
        1.0
    } else {
        arg.sin() / arg
    }
}
