//! Acceptance criteria. Each check prints one PASS/FAIL line; the process
//! exits nonzero if any check fails.

mod oracles;
mod testbed;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::DVector;
use ndarray::{Array2, Array3};
use oracles::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use testbed::*;
use unmix::beamformer::{mvdr_weights, BeamformerOptions, InterferenceModel};
use unmix::dereverb::{wpe_stream_detailed, WpeConfig};
use unmix::masks::{circular_difference_deg, ideal_ratio_masks, merge_heads_with, DoaEstimator, MaskSet};
use unmix::metrics::check_nonmixing;
use unmix::pit::{pit_loss, ssn_loss};
use unmix::signal_io::{ArrayGeometry, MultichannelWave};
use unmix::simulator::isotropic_noise;
use unmix::stft::{analyze, synthesize, StftConfig};
use unmix::stitcher::{PipelineOptions, SeparationMode};
use unmix_cli::commands::{cmd_separate, cmd_simulate, OUTPUT_FILES};
use unmix_cli::config::PipelineConfig;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn within(limit: f64, started: Instant) -> (bool, f64) {
    let t = started.elapsed().as_secs_f64();
    (t < limit, t)
}

fn stft_reconstruction() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let len = seconds(10.0);
    let samples = Array2::from_shape_fn((7, len), |_| rng.random_range(-1.0..1.0));
    let wave = MultichannelWave::new(samples, SR).unwrap();
    let cfg = StftConfig::default();
    let spec = analyze(&wave, &cfg).unwrap();
    let back = synthesize(&spec).unwrap();
    let interior = cfg.interior(spec.frames());
    let (mut err, mut energy) = (0.0, 0.0);
    for j in 0..7 {
        for t in interior.clone() {
            let x = wave.samples()[(j, t)];
            err += (back.samples()[(j, t)] - x).powi(2);
            energy += x * x;
        }
    }
    let rel = (err / energy).sqrt();
    let (fast, t) = within(5.0, started);
    verdict(rel < 1e-6 && fast, format!("relative interior error {rel:.2e}, {t:.2} s"))
}

fn mvdr_correctness() -> Verdict {
    let started = Instant::now();
    let case = rank1_case(11);
    let (mut distortion, mut oracle_gap) = (0.0f64, 0.0f64);
    for r in [0, 3] {
        let w = mvdr_weights(&case.phi, &case.psi, r).unwrap();
        for f in 0..BINS {
            let d = &case.steering[f];
            let wf = DVector::from_fn(J, |m, _| w.weights[(f, m)]);
            distortion = distortion.max((wf.dotc(d) - d[r]).norm());
            let oracle = closed_form_mvdr(&case.psi_mats[f], d, r);
            oracle_gap = oracle_gap.max((&wf - &oracle).norm() / oracle.norm().max(1.0));
        }
    }
    let w = mvdr_weights(&case.phi, &case.psi, 0).unwrap();
    let mut scale_gap = 0.0f64;
    for other in [mvdr_weights(&case.phi.scaled(37.5), &case.psi, 0), mvdr_weights(&case.phi, &case.psi.scaled(0.004), 0)] {
        for (a, b) in w.weights.iter().zip(other.unwrap().weights.iter()) {
            scale_gap = scale_gap.max((a - b).norm() / a.norm().max(1.0));
        }
    }
    let (fast, t) = within(10.0, started);
    verdict(
        distortion < 1e-6 && oracle_gap < 1e-6 && scale_gap < 1e-8 && fast,
        format!("|w^H d - d_r| {distortion:.1e}, closed-form gap {oracle_gap:.1e}, scale gap {scale_gap:.1e}, {t:.2} s"),
    )
}

fn pit_equivalence() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut mismatches, mut ties) = (0, 0);
    for _ in 0..1000 {
        let (masks, mix, s0, s1) = pit_instance(&mut rng);
        let got = pit_loss(&masks, mix.view(), [s0.view(), s1.view()]).unwrap();
        let (loss, perm) = brute_force_pit(&masks, &mix, [&s0, &s1]);
        let n = mix.mapv(|v| v * 0.3);
        let mut noise_term = 0.0;
        for t in 0..mix.nrows() {
            for f in 0..mix.ncols() {
                noise_term += (masks.noise[(t, f)] * mix[(t, f)] - n[(t, f)]).powi(2);
            }
        }
        let ssn = ssn_loss(&masks, mix.view(), [s0.view(), s1.view()], n.view()).unwrap();
        if got.loss != loss || got.permutation != perm || ssn != loss + noise_term {
            mismatches += 1;
        }
        ties += usize::from(got.per_permutation_losses[0] == got.per_permutation_losses[1]);
    }
    let (fast, t) = within(5.0, started);
    verdict(mismatches == 0 && fast, format!("{mismatches} mismatches in 1000 instances ({ties} ties), {t:.2} s"))
}

/// Swaps the speech heads in a seeded random subset of windows.
struct Swapping<P> {
    inner: P,
    swaps: Vec<bool>,
}

impl<P: unmix::masks::MaskProvider> unmix::masks::MaskProvider for Swapping<P> {
    fn capability(&self) -> unmix::masks::MaskCapability {
        self.inner.capability()
    }

    fn window_masks(&self, request: &unmix::masks::WindowRequest<'_>) -> unmix::Result<MaskSet> {
        let m = self.inner.window_masks(request)?;
        Ok(if self.swaps[request.index] { m.swapped() } else { m })
    }
}

fn stitching_consistency() -> Verdict {
    let started = Instant::now();
    let scene = long_conversation(30.0, 0.3, 5);
    let geometry = ArrayGeometry::default_seven();
    let mut notes = Vec::new();
    let mut ok = true;
    for mode in [SeparationMode::Masking, SeparationMode::Beamforming] {
        let options = PipelineOptions { mode, ..Default::default() };
        let (plain, _) = scene.separate(&options);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let swapping = Swapping { inner: scene.provider(), swaps: (0..plain.windows.len()).map(|_| rng.random_bool(0.5)).collect() };
        let swapped = unmix::stitcher::run_pipeline(&scene.spec, &swapping, &geometry, &options).unwrap();
        let identical = (0..2).all(|i| swapped.outputs[i].data() == plain.outputs[i].data());
        let mut next = 0;
        let mut partition = true;
        for w in &swapped.windows {
            partition &= w.emitted.start == next && w.emitted.start >= w.frames.start && w.emitted.end <= w.frames.end;
            next = w.emitted.end;
        }
        partition &= next == scene.spec.frames();
        ok &= identical && partition;
        notes.push(format!(
            "{mode:?}: {} windows, {} swapped, identical {identical}, partition {partition}",
            plain.windows.len(),
            swapping.swaps.iter().filter(|s| **s).count()
        ));
    }
    let (fast, t) = within(30.0, started);
    verdict(ok && fast, format!("{}; {t:.2} s", notes.join("; ")))
}

struct Testbed {
    scenes: Vec<Scene>,
    t60: Vec<f64>,
    build_seconds: f64,
}

/// Twenty scenes at 15 dB SNR, the first ten at T60 0.2 s and the rest at 0.5 s.
fn testbed() -> &'static Testbed {
    static BED: OnceLock<Testbed> = OnceLock::new();
    BED.get_or_init(|| {
        let started = Instant::now();
        let t60: Vec<f64> = (0..20).map(|i| if i < 10 { 0.2 } else { 0.5 }).collect();
        let scenes = t60.iter().enumerate().map(|(i, &t)| two_talker_scene(i as u64, t, 15.0)).collect();
        Testbed { scenes, t60, build_seconds: started.elapsed().as_secs_f64() }
    })
}

struct Separations {
    irm: Vec<f64>,
    masking_improvement: Vec<f64>,
    masking_si_sdr: Vec<f64>,
    beamforming_si_sdr: Vec<f64>,
    routing: Vec<f64>,
    seconds: f64,
}

fn separations() -> &'static Separations {
    static RUNS: OnceLock<Separations> = OnceLock::new();
    RUNS.get_or_init(|| {
        let bed = testbed();
        let started = Instant::now();
        let masking = PipelineOptions::default();
        let beamforming = PipelineOptions { mode: SeparationMode::Beamforming, ..Default::default() };
        let mut s = Separations {
            irm: Vec::new(),
            masking_improvement: Vec::new(),
            masking_si_sdr: Vec::new(),
            beamforming_si_sdr: Vec::new(),
            routing: Vec::new(),
            seconds: 0.0,
        };
        for scene in &bed.scenes {
            s.irm.push(scene.irm_improvement());
            let (out, est) = scene.separate(&masking);
            let report = scene.evaluate(&est);
            s.masking_improvement.push(report.mean_improvement().unwrap());
            s.masking_si_sdr.push(report.mean_si_sdr().unwrap());
            s.routing.push(scene.routing(&out, &report));
            let (_, est) = scene.separate(&beamforming);
            s.beamforming_si_sdr.push(scene.evaluate(&est).mean_si_sdr().unwrap());
        }
        s.seconds = started.elapsed().as_secs_f64() + bed.build_seconds;
        s
    })
}

fn nonmixing_contract() -> Verdict {
    let bed = testbed();
    let worst_truth = bed
        .scenes
        .iter()
        .map(|s| check_nonmixing(&s.truth.assignment, &s.truth.segments).unwrap())
        .fold(0.0, f64::max);
    let runs = separations();
    let routed = mean(runs.routing.iter().copied());
    let lowest = runs.routing.iter().copied().fold(1.0, f64::min);
    verdict(
        worst_truth == 0.0 && routed >= 0.99,
        format!("truth violation rate {worst_truth}, routed frames {:.2}% (lowest scene {:.2}%)", 100.0 * routed, 100.0 * lowest),
    )
}

fn masking_quality() -> Verdict {
    let runs = separations();
    let bound = mean(runs.irm.iter().copied());
    let got = mean(runs.masking_improvement.iter().copied());
    verdict(
        got >= bound - 2.0 && runs.seconds < 300.0,
        format!(
            "masking SI-SDR improvement {got:.2} dB, oracle IRM bound {bound:.2} dB, threshold {:.2} dB, {:.1} s",
            bound - 2.0,
            runs.seconds
        ),
    )
}

fn beamforming_quality() -> Verdict {
    let runs = separations();
    let bed = testbed();
    let mut lines = Vec::new();
    let mut pass = runs.seconds < 300.0;
    for t60 in [0.2, 0.5] {
        let pick = |v: &[f64]| mean(v.iter().zip(&bed.t60).filter(|(_, t)| **t == t60).map(|(x, _)| *x));
        let (m, b) = (pick(&runs.masking_si_sdr), pick(&runs.beamforming_si_sdr));
        pass &= b >= m;
        lines.push(format!("T60 {t60}: beamforming {b:.2} dB vs masking {m:.2} dB"));
    }
    verdict(pass, lines.join(", "))
}

fn ssn_ablation() -> Verdict {
    let started = Instant::now();
    let (mut ssn, mut complement) = (Vec::new(), Vec::new());
    for i in 0..8u64 {
        let scene = two_talker_scene(100 + i, if i % 2 == 0 { 0.2 } else { 0.5 }, 10.0);
        for (model, sink) in [(InterferenceModel::Ssn, &mut ssn), (InterferenceModel::Complement, &mut complement)] {
            let options = PipelineOptions {
                mode: SeparationMode::Beamforming,
                beamformer: BeamformerOptions { interference: model, ..Default::default() },
                ..Default::default()
            };
            let (_, est) = scene.separate(&options);
            sink.push(scene.evaluate(&est).mean_si_sdr().unwrap());
        }
    }
    let (a, b) = (mean(ssn), mean(complement));
    verdict(a >= b, format!("SSN {a:.2} dB vs complement {b:.2} dB, {:.1} s", started.elapsed().as_secs_f64()))
}

fn drr(signal: &[f64], direct: &[f64]) -> f64 {
    let e = |x: &mut dyn Iterator<Item = f64>| x.map(|v| v * v).sum::<f64>();
    let d = e(&mut direct.iter().copied());
    let r = e(&mut signal.iter().zip(direct).map(|(s, d)| s - d));
    10.0 * (d / r).log10()
}

fn wpe_effectiveness() -> Verdict {
    let started = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for (azimuth, seed) in [(130.0, 1), (250.0, 2)] {
        let scene = single_source_scene(0.5, azimuth, seed);
        let len = scene.mix.len();
        let direct = scene.truth.direct[0].channel_padded(scene.truth.reference_index, len);
        let report = wpe_stream_detailed(&scene.spec, &WpeConfig::default()).unwrap();
        let out = resynth(&report.output, len);
        let (before, after) = (drr(&scene.mix.channel_vec(0), &direct), drr(&out, &direct));
        let monotone = report
            .objective
            .iter()
            .all(|curve| curve.windows(2).all(|p| p[1] <= p[0] + 1e-9 * p[0].abs()));
        pass &= after > before && monotone;
        lines.push(format!("DRR {before:.2} -> {after:.2} dB, objective non-increasing {monotone}"));
    }
    let (fast, t) = within(60.0, started);
    verdict(pass && fast, format!("{}; {t:.1} s", lines.join("; ")))
}

fn isotropic_coherence_check() -> Verdict {
    let geometry = ArrayGeometry::default_seven();
    let noise = isotropic_noise(&geometry, 10.0, SR, 17).unwrap();
    let cfg = StftConfig::default();
    let spec = analyze(&noise, &cfg).unwrap();
    let pos = geometry.positions();
    let (mut dev, mut count) = (0.0, 0usize);
    for a in 0..7 {
        for b in a + 1..7 {
            let dist = (0..3).map(|k| (pos[a][k] - pos[b][k]).powi(2)).sum::<f64>().sqrt();
            let (xa, xb) = (spec.channel(a), spec.channel(b));
            for k in 0..spec.bins() {
                let f = cfg.bin_frequency(k, SR);
                if !(100.0..=4000.0).contains(&f) {
                    continue;
                }
                let cross: unmix::Complex64 = xa.column(k).iter().zip(xb.column(k)).map(|(p, q)| p * q.conj()).sum();
                let pa: f64 = xa.column(k).iter().map(|z| z.norm_sqr()).sum();
                let pb: f64 = xb.column(k).iter().map(|z| z.norm_sqr()).sum();
                dev += (cross / (pa * pb).sqrt() - isotropic_coherence(f, dist)).norm();
                count += 1;
            }
        }
    }
    let mad = dev / count as f64;
    verdict(mad < 0.1, format!("mean absolute coherence deviation {mad:.4}"))
}

fn doa_merge() -> Verdict {
    let geometry = ArrayGeometry::default_seven();
    let split = {
        let scene = single_source_scene(0.0, 75.0, 3);
        let spec = &scene.spec;
        let estimator = DoaEstimator::new(&geometry, spec);
        let (t, f) = (spec.frames(), spec.bins());
        [(0.7, 0), (0.3, 1)].into_iter().all(|(share, dominant)| {
            let speech = Array3::from_shape_fn((2, t, f), |(i, _, _)| if i == 0 { share } else { 1.0 - share });
            let masks = MaskSet::new(speech, Array2::zeros((t, f)), 0).unwrap();
            let out = merge_heads_with(&estimator, &masks, spec, 15.0).unwrap();
            out.merged
                && out.masks.head(dominant).iter().all(|v| (v - 1.0).abs() < 1e-12)
                && out.masks.head(1 - dominant).iter().all(|v| *v == 0.0)
        })
    };
    let mut kept = Vec::new();
    for (a, b) in [(60.0, 90.0), (200.0, 320.0)] {
        let mut spec = room(0.0);
        spec.source_positions = vec![spec.point_at(a, 1.5), spec.point_at(b, 1.5)];
        let utts: Vec<_> = spec
            .source_positions
            .iter()
            .enumerate()
            .map(|(k, p)| unmix::simulator::Utterance {
                signal: unmix::simulator::speech_like(3.0, SR, 40 + k as u64),
                position: *p,
                start: 0,
                gain_db: 0.0,
            })
            .collect();
        let scene = Scene::render(&spec, &utts, None, seconds(3.0), 8);
        let views: Vec<_> = scene.sources.iter().map(|s| s.channel(0)).collect();
        let masks = ideal_ratio_masks(&views, scene.noise.channel(0)).unwrap();
        let estimator = DoaEstimator::new(&geometry, &scene.spec);
        let out = merge_heads_with(&estimator, &masks, &scene.spec, 15.0).unwrap();
        let gap = out.doas.map_or(f64::NAN, |d| circular_difference_deg(d[0], d[1]));
        kept.push((!out.merged && out.masks == masks, circular_difference_deg(a, b), gap));
    }
    let separate = kept.iter().all(|k| k.0);
    let gaps: Vec<String> = kept.iter().map(|(_, true_gap, est)| format!("{true_gap:.0} deg apart -> {est:.1} deg")).collect();
    verdict(split && separate, format!("split source merged {split}; distinct sources kept {separate} ({})", gaps.join(", ")))
}

fn end_to_end_determinism() -> Verdict {
    let tmp = tempfile::TempDir::new().unwrap();
    let smoke = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenes/smoke.toml");
    let scene = tmp.path().join("scene");
    cmd_simulate(&smoke, &scene).unwrap();
    let input = scene.join("mixture.wav");
    let mut lines = Vec::new();
    let mut pass = true;
    for sets in [vec![], vec!["mode=beamforming".to_string(), "dereverb.enabled=false".into()]] {
        let config = PipelineConfig::load(None, &sets).unwrap();
        let runs: Vec<_> = ["a", "b"]
            .iter()
            .map(|name| {
                let out = tmp.path().join(format!("{}-{name}", config.hash()));
                cmd_separate(&config, &input, &out, None).unwrap();
                OUTPUT_FILES.map(|f| std::fs::read(out.join(f)).unwrap())
            })
            .collect();
        let same = runs[0] == runs[1];
        pass &= same;
        lines.push(format!("{:?} identical {same}", config.mode));
    }
    verdict(pass, lines.join(", "))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 12] = [
        ("1   STFT perfect reconstruction", stft_reconstruction),
        ("2   MVDR correctness", mvdr_correctness),
        ("3   PIT/SSN loss oracle equivalence", pit_equivalence),
        ("4   stitching consistency", stitching_consistency),
        ("5   nonmixing contract", nonmixing_contract),
        ("6a  masking within 2 dB of the IRM bound", masking_quality),
        ("6b  beamforming >= masking on reverberant scenes", beamforming_quality),
        ("7   SSN ablation direction", ssn_ablation),
        ("8   WPE effectiveness", wpe_effectiveness),
        ("9   isotropic noise coherence", isotropic_coherence_check),
        ("10  DOA merge behavior", doa_merge),
        ("11  end-to-end determinism", end_to_end_determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let v = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                verdict(false, format!("panicked: {}", msg.unwrap_or_default()))
            });
        failed += usize::from(!v.pass);
        println!("criterion {name}: {}  {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
