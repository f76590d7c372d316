mod common;

use common::*;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unmix::beamformer::*;
use unmix::masks::MaskSet;
use unmix::signal_io::ArrayGeometry;
use unmix::simulator::speech_like;
use unmix::Complex64;

const J: usize = 7;
const BINS: usize = 257;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn random_psd(rng: &mut ChaCha8Rng) -> DMatrix<Complex64> {
    let a = DMatrix::from_fn(J, J + 3, |_, _| c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
    &a * a.adjoint() + DMatrix::identity(J, J) * c(1e-3, 0.0)
}

fn random_steering(rng: &mut ChaCha8Rng) -> DVector<Complex64> {
    DVector::from_fn(J, |_, _| Complex64::from_polar(0.5 + rng.random::<f64>(), rng.random::<f64>() * 6.28))
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

fn weight_vec(w: &BeamformerWeights, f: usize) -> DVector<Complex64> {
    DVector::from_fn(J, |m, _| w.weights[(f, m)])
}

struct Rank1Case {
    phi: SpatialCovariance,
    psi: SpatialCovariance,
    steering: Vec<DVector<Complex64>>,
    psi_mats: Vec<DMatrix<Complex64>>,
}

fn rank1_case(seed: u64) -> Rank1Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steering = Vec::new();
    let mut phi = Vec::new();
    let mut psi = Vec::new();
    for _ in 0..BINS {
        let d = random_steering(&mut rng);
        let power = 0.1 + rng.random::<f64>();
        phi.push(&d * d.adjoint() * c(power, 0.0));
        psi.push(random_psd(&mut rng));
        steering.push(d);
    }
    Rank1Case {
        phi: to_cov(&phi, CovarianceKind::Target(0)),
        psi: to_cov(&psi, CovarianceKind::Noise),
        steering,
        psi_mats: psi,
    }
}

#[test]
fn rank1_mvdr_is_distortionless_and_matches_closed_form() {
    let case = rank1_case(1);
    for r in [0, 3] {
        let w = mvdr_weights(&case.phi, &case.psi, r).unwrap();
        for f in 0..BINS {
            let d = &case.steering[f];
            let wf = weight_vec(&w, f);
            let response = wf.dotc(d);
            assert!((response - d[r]).norm() < 1e-6, "bin {f}: {response} vs {}", d[r]);

            let mut loaded = case.psi_mats[f].clone();
            let load = DIAGONAL_LOADING * loaded.trace().re / J as f64;
            for a in 0..J {
                loaded[(a, a)] += c(load, 0.0);
            }
            let pinv_d = loaded.clone().lu().solve(d).unwrap();
            let oracle = &pinv_d * (d[r].conj() / d.dotc(&pinv_d));
            assert!((&wf - &oracle).norm() < 1e-6 * oracle.norm().max(1.0), "bin {f}");
        }
    }
}

#[test]
fn mvdr_scale_invariance() {
    let case = rank1_case(2);
    let w = mvdr_weights(&case.phi, &case.psi, 0).unwrap();
    let w_phi = mvdr_weights(&case.phi.scaled(37.5), &case.psi, 0).unwrap();
    let w_psi = mvdr_weights(&case.phi, &case.psi.scaled(0.004), 0).unwrap();
    for (a, b) in w.weights.iter().zip(w_phi.weights.iter()) {
        assert!((a - b).norm() < 1e-8 * a.norm().max(1.0));
    }
    for (a, b) in w.weights.iter().zip(w_psi.weights.iter()) {
        assert!((a - b).norm() < 1e-8 * a.norm().max(1.0));
    }
}

#[test]
fn plane_wave_covariance_is_rank_one() {
    let room = room_spec(0.0, &[50.0], 1.5);
    let (mix, _) = render(&room, &[utterance(speech_like(2.0, SR, 7), room.source_positions[0], 0)], None, 2.0, 1);
    let spec = spectrogram(&mix);
    let mask = Array2::ones((spec.frames(), spec.bins()));
    let cov = sig_cov(&spec, mask.view(), CovarianceKind::Target(0)).unwrap();
    let (lo, hi) = (spec.config().bins() * 300 / 8000, spec.config().bins() * 4000 / 8000);
    for f in (lo..hi).step_by(8) {
        let m = DMatrix::from_fn(J, J, |a, b| cov.matrices[(f, a, b)]);
        let eig = SymmetricEigen::new(m).eigenvalues;
        let mut ev: Vec<f64> = eig.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        assert!(ev[0] / ev[1].abs().max(1e-300) > 100.0, "bin {f}: {ev:?}");
    }
}

#[test]
fn covariance_outputs_are_hermitian_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = Array3::from_shape_fn((J, 40, 9), |_| c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
    let spec = unmix::stft::Spectrogram::new(data, unmix::stft::StftConfig { fft_size: 16, window_size: 16, hop: 8, ..Default::default() }, SR).unwrap();
    let mask = Array2::from_shape_fn((40, 9), |_| rng.random::<f64>());
    let cov = sig_cov(&spec, mask.view(), CovarianceKind::Noise).unwrap();
    for f in 0..9 {
        let m = DMatrix::from_fn(J, J, |a, b| cov.matrices[(f, a, b)]);
        assert!((&m - m.adjoint()).norm() == 0.0);
        let tr = m.trace().re;
        assert!(SymmetricEigen::new(m).eigenvalues.iter().all(|v| *v >= -1e-8 * tr));
    }
}

#[test]
fn gain_adjustment_suppresses_leakage_into_a_silent_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (t, f) = (60, 33);
    let leak = Array2::from_shape_fn((t, f), |_| c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * 0.1);
    let ref_mag = Array2::from_shape_fn((t, f), |_| 1.0 + rng.random::<f64>());
    let mask = Array2::zeros((t, f));
    let out = gain_adjust(&leak, mask.view(), ref_mag.view()).unwrap();
    let e_in: f64 = leak.iter().map(|z| z.norm_sqr()).sum();
    let e_out: f64 = out.iter().map(|z| z.norm_sqr()).sum();
    assert!(10.0 * (e_out / e_in).log10() < -40.0);
    for (a, b) in leak.iter().zip(out.iter()) {
        assert!(b.norm() <= a.norm());
        if b.norm() > 0.0 {
            assert!((a.arg() - b.arg()).abs() < 1e-12);
        }
    }
}

#[test]
fn complement_model_runs_on_a_two_speaker_window() {
    let room = room_spec(0.3, &[10.0, 200.0], 1.5);
    let utts = [
        utterance(speech_like(2.0, SR, 1), room.source_positions[0], 0),
        utterance(speech_like(2.0, SR, 2), room.source_positions[1], 0),
    ];
    let (mix, truth) = render(&room, &utts, Some(10.0), 2.0, 3);
    let spec = spectrogram(&mix);
    let (sources, noise) = truth_spectrograms(&truth);
    let views: Vec<_> = sources.iter().map(|s| s.channel(0)).collect();
    let masks: MaskSet = unmix::masks::ideal_ratio_masks(&views, noise.channel(0)).unwrap();
    let geometry = ArrayGeometry::default_seven();
    for interference in [InterferenceModel::Ssn, InterferenceModel::Complement] {
        let opts = BeamformerOptions { interference, ..Default::default() };
        let out = beamform_window(&spec, &masks, &geometry, &opts).unwrap();
        for y in &out {
            assert_eq!(y.dim(), (spec.frames(), spec.bins()));
            assert!(y.iter().all(|z| z.is_finite()));
        }
    }
}
