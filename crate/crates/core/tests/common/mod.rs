#![allow(dead_code)]

use ndarray::Array3;
use unmix::signal_io::{ArrayGeometry, MultichannelWave, DEFAULT_SAMPLE_RATE};
use unmix::simulator::{render_scene, GroundTruth, Room, RoomSpec, Utterance};
use unmix::stft::{analyze_padded, synthesize_trimmed, Spectrogram, StftConfig};
use unmix::Complex64;

pub const SR: u32 = DEFAULT_SAMPLE_RATE;

pub fn room_spec(t60: f64, azimuths: &[f64], distance: f64) -> RoomSpec {
    let mut spec = RoomSpec {
        room: Room { dimensions: [6.0, 5.0, 3.0], t60 },
        source_positions: Vec::new(),
        array_center: [3.0, 2.4, 1.3],
        geometry: ArrayGeometry::default_seven(),
    };
    spec.source_positions = azimuths.iter().map(|&a| spec.point_at(a, distance)).collect();
    spec
}

/// Padded analysis so every sample lies in the exactly reconstructed interior.
pub fn spectrogram(wave: &MultichannelWave) -> Spectrogram {
    analyze_padded(wave, &StftConfig::default()).unwrap().0
}

/// Inverse of [`spectrogram`] for the first channel.
pub fn resynth(spec: &Spectrogram, len: usize) -> Vec<f64> {
    let offset = StftConfig::default().window_size - StftConfig::default().hop;
    synthesize_trimmed(spec, offset, len).unwrap().channel_vec(0)
}

pub fn mono_spectrogram(signal: &[f64]) -> Spectrogram {
    spectrogram(&MultichannelWave::from_mono(signal.to_vec(), SR).unwrap())
}

/// Reference-mic spectrograms of the two output-channel sources and the noise.
pub fn truth_spectrograms(truth: &GroundTruth) -> (Vec<Spectrogram>, Spectrogram) {
    let sources = (0..2).map(|i| mono_spectrogram(&truth.channel_source(i))).collect();
    (sources, mono_spectrogram(&truth.reference_noise()))
}

pub fn utterance(signal: Vec<f64>, position: [f64; 3], start: usize) -> Utterance {
    Utterance { signal, position, start, gain_db: 0.0 }
}

pub fn render(room: &RoomSpec, utterances: &[Utterance], snr: Option<f64>, seconds: f64, seed: u64) -> (MultichannelWave, GroundTruth) {
    render_scene(room, utterances, snr, (seconds * SR as f64) as usize, SR, seed).unwrap()
}

pub fn zeros_like(spec: &Spectrogram) -> Array3<Complex64> {
    Array3::zeros(spec.data().dim())
}
