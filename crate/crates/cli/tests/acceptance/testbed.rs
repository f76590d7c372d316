//! Seeded scenes and the helpers shared by the criteria.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unmix::masks::{ideal_ratio_masks, OracleMaskProvider};
use unmix::metrics::{best_permutation_eval, routing_accuracy, si_sdr, EvalReport};
use unmix::signal_io::{ArrayGeometry, MultichannelWave, DEFAULT_SAMPLE_RATE};
use unmix::simulator::{render_scene, speech_like, GroundTruth, Room, RoomSpec, Utterance};
use unmix::stft::{analyze_padded, synthesize_trimmed, Spectrogram, StftConfig};
use unmix::stitcher::{run_pipeline, PipelineOptions, PipelineOutput};
use unmix::Complex64;

pub const SR: u32 = DEFAULT_SAMPLE_RATE;

pub fn offset() -> usize {
    let c = StftConfig::default();
    c.window_size - c.hop
}

pub fn room(t60: f64) -> RoomSpec {
    RoomSpec {
        room: Room { dimensions: [6.0, 5.0, 3.0], t60 },
        source_positions: Vec::new(),
        array_center: [3.0, 2.4, 1.3],
        geometry: ArrayGeometry::default_seven(),
    }
}

pub fn spectrogram(wave: &MultichannelWave) -> Spectrogram {
    analyze_padded(wave, &StftConfig::default()).unwrap().0
}

pub fn mono(signal: &[f64]) -> Spectrogram {
    spectrogram(&MultichannelWave::from_mono(signal.to_vec(), SR).unwrap())
}

pub fn resynth(spec: &Spectrogram, len: usize) -> Vec<f64> {
    synthesize_trimmed(spec, offset(), len).unwrap().channel_vec(0)
}

pub fn seconds(s: f64) -> usize {
    (s * SR as f64) as usize
}

pub struct Scene {
    pub mix: MultichannelWave,
    pub truth: GroundTruth,
    pub spec: Spectrogram,
    pub sources: Vec<Spectrogram>,
    pub noise: Spectrogram,
}

impl Scene {
    pub fn render(room: &RoomSpec, utterances: &[Utterance], snr: Option<f64>, len: usize, seed: u64) -> Self {
        let (mix, truth) = render_scene(room, utterances, snr, len, SR, seed).unwrap();
        let spec = spectrogram(&mix);
        let sources = (0..2).map(|i| mono(&truth.channel_source(i))).collect();
        let noise = mono(&truth.reference_noise());
        Self { mix, truth, spec, sources, noise }
    }

    pub fn references(&self) -> [Vec<f64>; 2] {
        [self.truth.channel_source(0), self.truth.channel_source(1)]
    }

    pub fn provider(&self) -> OracleMaskProvider {
        OracleMaskProvider::new(&self.spec, &self.sources, &self.noise).unwrap()
    }

    pub fn separate(&self, options: &PipelineOptions) -> (PipelineOutput, [Vec<f64>; 2]) {
        let out = run_pipeline(&self.spec, &self.provider(), &ArrayGeometry::default_seven(), options).unwrap();
        let len = self.mix.len();
        let signals = [resynth(&out.outputs[0], len), resynth(&out.outputs[1], len)];
        (out, signals)
    }

    pub fn evaluate(&self, estimates: &[Vec<f64>; 2]) -> EvalReport {
        let refs = self.references();
        best_permutation_eval([&estimates[0], &estimates[1]], [&refs[0], &refs[1]], &self.mix.channel_vec(0)).unwrap()
    }

    /// Mean SI-SDR improvement of full-signal ideal ratio masks applied to
    /// the reference microphone.
    pub fn irm_improvement(&self) -> f64 {
        let views: Vec<_> = self.sources.iter().map(|s| s.channel(0)).collect();
        let masks = ideal_ratio_masks(&views, self.noise.channel(0)).unwrap();
        let reference = self.spec.channel(self.truth.reference_index);
        let mix = self.mix.channel_vec(self.truth.reference_index);
        let refs = self.references();
        let mut gains = Vec::new();
        for i in 0..2 {
            if refs[i].iter().all(|v| *v == 0.0) {
                continue;
            }
            let masked = &reference * &masks.head(i).mapv(|m| Complex64::new(m, 0.0));
            let est = resynth(&Spectrogram::from_mono(masked, StftConfig::default(), SR).unwrap(), self.mix.len());
            gains.push(si_sdr(&est, &refs[i]).unwrap() - si_sdr(&mix, &refs[i]).unwrap());
        }
        gains.iter().sum::<f64>() / gains.len() as f64
    }

    /// Fraction of audible frames in which every utterance is routed to the
    /// output that the evaluation permutation pairs with its truth channel.
    pub fn routing(&self, out: &PipelineOutput, report: &EvalReport) -> f64 {
        let len = self.mix.len();
        let r = self.truth.reference_index;
        let images: Vec<_> = self.truth.images.iter().map(|im| mono(&im.channel_padded(r, len)).magnitude(0)).collect();
        let views: Vec<_> = images.iter().map(|m| m.view()).collect();
        let outputs = [out.outputs[0].magnitude(0), out.outputs[1].magnitude(0)];
        let expected: Vec<usize> =
            self.truth.assignment.iter().map(|&c| report.permutation_used.apply(c)).collect();
        let frames = self.spec.frames();
        let activity: Vec<Range<usize>> = self
            .truth
            .segments
            .iter()
            .map(|s| StftConfig::default().frames_touching(s.start + offset()..s.end + offset(), frames))
            .collect();
        routing_accuracy(&views, [outputs[0].view(), outputs[1].view()], &expected, &activity, -20.0).unwrap()
    }
}

/// Two talkers at random azimuths at least 60 degrees apart; `index % 4`
/// picks sequential, partial, contained or three-utterance timing.
pub fn two_talker_scene(index: u64, t60: f64, snr: f64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + index);
    let mut spec = room(t60);
    let a = rng.random_range(0.0..360.0);
    let b = a + rng.random_range(60.0..180.0);
    spec.source_positions = vec![spec.point_at(a, rng.random_range(1.0..2.0)), spec.point_at(b, rng.random_range(1.0..2.0))];
    let seed = 10 * index;
    let utt = |who: usize, start: f64, len: f64, k: u64| Utterance {
        signal: speech_like(len, SR, seed + k),
        position: spec.source_positions[who],
        start: seconds(start),
        gain_db: 0.0,
    };
    let utterances = match index % 4 {
        0 => vec![utt(0, 0.2, 2.5, 1), utt(1, 3.2, 2.5, 2)],
        1 => vec![utt(0, 0.2, 3.0, 1), utt(1, 2.2, 3.0, 2)],
        2 => vec![utt(0, 0.3, 5.0, 1), utt(1, 1.8, 2.0, 2)],
        _ => vec![utt(0, 0.2, 2.0, 1), utt(1, 1.6, 2.0, 2), utt(0, 4.0, 1.6, 3)],
    };
    Scene::render(&spec, &utterances, Some(snr), seconds(6.0), index)
}

/// Alternating talkers with partial overlaps over `total` seconds.
pub fn long_conversation(total: f64, t60: f64, seed: u64) -> Scene {
    let mut spec = room(t60);
    spec.source_positions = vec![spec.point_at(35.0, 1.4), spec.point_at(170.0, 1.7)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut utterances = Vec::new();
    let mut t = 0.3;
    let mut k = 0;
    while t < total - 2.0 {
        let len = rng.random_range(2.0..3.5f64).min(total - t - 0.2);
        utterances.push(Utterance {
            signal: speech_like(len, SR, seed * 100 + k),
            position: spec.source_positions[(k % 2) as usize],
            start: seconds(t),
            gain_db: 0.0,
        });
        t += len - rng.random_range(0.0..1.0);
        k += 1;
    }
    Scene::render(&spec, &utterances, Some(15.0), seconds(total), seed)
}

pub fn single_source_scene(t60: f64, azimuth: f64, seed: u64) -> Scene {
    let mut spec = room(t60);
    spec.source_positions = vec![spec.point_at(azimuth, 1.6)];
    let utterances =
        [Utterance { signal: speech_like(4.0, SR, seed), position: spec.source_positions[0], start: 1000, gain_db: 0.0 }];
    Scene::render(&spec, &utterances, None, seconds(4.5), seed)
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}
