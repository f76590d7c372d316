//! The `simulate`, `separate` and `evaluate` subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unmix::dereverb::wpe_stream;
use unmix::masks::{FileMaskProvider, MaskProvider, OracleMaskProvider};
use unmix::metrics::{best_permutation_eval, check_nonmixing, EvalReport};
use unmix::signal_io::{read_wave, write_wave_as, MultichannelWave, SampleFormat};
use unmix::simulator::render_scene;
use unmix::stft::{analyze_padded, synthesize_trimmed, Spectrogram};
use unmix::stitcher::run_pipeline;

use crate::config::{hex, PipelineConfig, ProviderChoice};
use crate::error::{CliError, CliResult};
use crate::scene::{read_mono, source_file, SceneSpec, TruthMeta, UtteranceMeta, MIXTURE_FILE, NOISE_FILE, TRUTH_FILE};

pub const OUTPUT_FILES: [&str; 2] = ["channel_0.wav", "channel_1.wav"];
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(CliError::io(format!("writing {}", path.display())))
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(CliError::io(format!("reading {}", path.display())))?;
    Ok(hex(&Sha256::digest(bytes)))
}

fn read_input(path: &Path) -> CliResult<MultichannelWave> {
    read_wave(path).map_err(|e| match e {
        unmix::Error::Io(source) => CliError::Io { context: format!("reading {}", path.display()), source },
        other => CliError::Core(other),
    })
}

/// Renders a scene spec into `out_dir`: the multichannel mixture, one mono
/// reference-microphone image per source, the noise (when present) and
/// `truth.json`. Returns the written paths.
pub fn cmd_simulate(scene_path: &Path, out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    let spec = SceneSpec::load(scene_path)?;
    let room = spec.room_spec()?;
    let utterances = spec.utterances(&room)?;
    let sr = spec.sample_rate;
    let (mixture, truth) = render_scene(&room, &utterances, spec.noise_snr_db, spec.len(), sr, spec.seed)?;
    create_dir(out_dir)?;

    let mut written = Vec::new();
    let mut put = |wave: &MultichannelWave, name: &str| -> CliResult<()> {
        let path = out_dir.join(name);
        write_wave_as(wave, &path, SampleFormat::Float32)?;
        written.push(path);
        Ok(())
    };
    put(&mixture, MIXTURE_FILE)?;
    let mut utterance_meta = Vec::with_capacity(truth.images.len());
    for (k, image) in truth.images.iter().enumerate() {
        let name = source_file(k);
        put(&MultichannelWave::from_mono(image.channel_padded(truth.reference_index, truth.len), sr)?, &name)?;
        utterance_meta.push(UtteranceMeta {
            image: name,
            position: truth.positions[k],
            channel: truth.assignment[k],
            segment: truth.segments[k].clone(),
            emission: truth.emission[k].clone(),
        });
    }
    let noise = match &truth.noise {
        Some(_) => {
            put(&MultichannelWave::from_mono(truth.reference_noise(), sr)?, NOISE_FILE)?;
            Some(NOISE_FILE.to_string())
        }
        None => None,
    };
    let meta = TruthMeta {
        sample_rate: sr,
        len: truth.len,
        channels: mixture.channels(),
        reference_index: truth.reference_index,
        mixture: MIXTURE_FILE.into(),
        noise,
        utterances: utterance_meta,
        seed: spec.seed,
    };
    let truth_path = out_dir.join(TRUTH_FILE);
    write_json(&meta, &truth_path)?;
    written.push(truth_path);
    info!("simulated {:.2} s scene with {} sources into {}", spec.seconds, spec.sources.len(), out_dir.display());
    Ok(written)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub read: f64,
    pub dereverb: f64,
    pub masks: f64,
    pub separate: f64,
    pub write: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
    pub channels: usize,
    pub samples: usize,
    pub sample_rate: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub file: String,
    pub sha256: String,
}

/// Everything needed to repeat a separation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub library_version: String,
    pub config_hash: String,
    pub config: String,
    pub input: InputRecord,
    pub truth_dir: Option<PathBuf>,
    pub windows: usize,
    pub merged_windows: usize,
    pub outputs: Vec<OutputRecord>,
    pub timings: Timings,
}

/// Separates `input` into `out_dir/channel_{0,1}.wav` and writes the run
/// manifest. `truth_dir` is only read by the oracle provider and defaults to
/// the input's directory.
pub fn cmd_separate(config: &PipelineConfig, input: &Path, out_dir: &Path, truth_dir: Option<&Path>) -> CliResult<Manifest> {
    let start = Instant::now();
    let mut timings = Timings::default();
    let mut lap = Instant::now();
    let mut tick = |slot: &mut f64| {
        *slot = lap.elapsed().as_secs_f64();
        lap = Instant::now();
    };

    let geometry = config.geometry.build()?;
    let options = config.pipeline_options()?;
    let wave = read_input(input)?;
    if wave.channels() != geometry.channel_count() {
        return Err(unmix::Error::Config(format!(
            "input has {} channels, geometry has {} microphones",
            wave.channels(),
            geometry.channel_count()
        ))
        .into());
    }
    if wave.sample_rate() != config.sample_rate {
        return Err(unmix::Error::Config(format!(
            "input is sampled at {} Hz, config expects {}",
            wave.sample_rate(),
            config.sample_rate
        ))
        .into());
    }
    let stft = config.stft_config();
    let (mut spec, offset) = analyze_padded(&wave, &stft)?;
    tick(&mut timings.read);

    if config.dereverb.enabled {
        spec = wpe_stream(&spec, &config.dereverb.wpe())?;
        debug!("dereverberated {} frames", spec.frames());
    }
    tick(&mut timings.dereverb);

    let truth_used;
    let provider: Box<dyn MaskProvider> = match config.provider()? {
        ProviderChoice::Oracle => {
            let dir = truth_dir.map(Path::to_path_buf).unwrap_or_else(|| input.parent().unwrap_or(Path::new(".")).into());
            let meta = TruthMeta::load(&dir)?;
            if meta.len != wave.len() {
                return Err(unmix::Error::Shape(format!(
                    "truth covers {} samples, input has {}",
                    meta.len,
                    wave.len()
                ))
                .into());
            }
            let (sources, noise) = meta.reference_signals(&dir)?;
            let mono = |x: Vec<f64>| -> CliResult<Spectrogram> {
                Ok(analyze_padded(&MultichannelWave::from_mono(x, wave.sample_rate())?, &stft)?.0)
            };
            let [s0, s1] = sources;
            let sources = [mono(s0)?, mono(s1)?];
            truth_used = Some(dir);
            Box::new(OracleMaskProvider::new(&spec, &sources, &mono(noise)?)?)
        }
        ProviderChoice::File(path) => {
            truth_used = None;
            Box::new(FileMaskProvider::open(&path)?)
        }
    };
    tick(&mut timings.masks);

    let out = run_pipeline(&spec, provider.as_ref(), &geometry, &options)?;
    let streams = [
        synthesize_trimmed(&out.outputs[0], offset, wave.len())?,
        synthesize_trimmed(&out.outputs[1], offset, wave.len())?,
    ];
    tick(&mut timings.separate);

    create_dir(out_dir)?;
    let mut outputs = Vec::with_capacity(2);
    for (stream, name) in streams.iter().zip(OUTPUT_FILES) {
        let path = out_dir.join(name);
        write_wave_as(stream, &path, config.output.encoding.into())?;
        outputs.push(OutputRecord { file: name.into(), sha256: sha256_file(&path)? });
    }
    tick(&mut timings.write);
    timings.total = start.elapsed().as_secs_f64();

    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        library_version: unmix::VERSION.into(),
        config_hash: config.hash(),
        config: config.to_toml(),
        input: InputRecord {
            path: input.to_path_buf(),
            sha256: sha256_file(input)?,
            channels: wave.channels(),
            samples: wave.len(),
            sample_rate: wave.sample_rate(),
        },
        truth_dir: truth_used,
        windows: out.windows.len(),
        merged_windows: out.windows.iter().filter(|w| w.merged).count(),
        outputs,
        timings,
    };
    write_json(&manifest, &out_dir.join(MANIFEST_FILE))?;
    info!(
        "separated {} samples in {} windows ({} merged) in {:.2} s",
        wave.len(),
        manifest.windows,
        manifest.merged_windows,
        manifest.timings.total
    );
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub scene: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneIssue {
    pub scene: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub scenes: usize,
    /// Mean over scenes of each scene's mean SI-SDR.
    pub mean_si_sdr: Option<f64>,
    pub mean_si_sdr_improvement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub scenes: Vec<SceneReport>,
    pub skipped: Vec<SceneIssue>,
    pub failures: Vec<SceneIssue>,
    pub aggregate: Aggregate,
}

enum SceneOutcome {
    Scored(SceneReport),
    Skipped(SceneIssue),
    Failed(SceneIssue),
}

/// Scene directories under `estimates`: the directory itself when it holds
/// output WAVs, otherwise every subdirectory in name order.
fn discover_scenes(estimates: &Path) -> CliResult<Vec<String>> {
    if estimates.join(OUTPUT_FILES[0]).is_file() {
        return Ok(vec![String::new()]);
    }
    let entries = std::fs::read_dir(estimates).map_err(CliError::io(format!("listing {}", estimates.display())))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(CliError::io(format!("listing {}", estimates.display())))?;
        if entry.path().is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

fn evaluate_scene(name: &str, estimates: &Path, truth: &Path) -> CliResult<SceneOutcome> {
    let label = if name.is_empty() { ".".to_string() } else { name.to_string() };
    let meta = match TruthMeta::load(truth) {
        Ok(m) => m,
        Err(CliError::MissingTruth(reason)) => {
            warn!("skipping scene {label}: {reason}");
            return Ok(SceneOutcome::Skipped(SceneIssue { scene: label, reason }));
        }
        Err(e) => return Err(e),
    };
    let fail = |reason: String| Ok(SceneOutcome::Failed(SceneIssue { scene: label.clone(), reason }));
    let violation = match check_nonmixing(&meta.assignment(), &meta.segments()) {
        Ok(v) => v,
        Err(e) => return fail(format!("truth assignment: {e}")),
    };
    if violation > 0.0 {
        return fail(format!("truth assignment mixes utterances on {:.2}% of active samples", 100.0 * violation));
    }
    let mut estimates_read = Vec::with_capacity(2);
    for name in OUTPUT_FILES {
        match read_mono(&estimates.join(name), meta.len) {
            Ok(x) => estimates_read.push(x),
            Err(CliError::Invariant(reason)) => return fail(reason),
            Err(e) => return Err(e),
        }
    }
    let (references, _) = match meta.reference_signals(truth) {
        Ok(r) => r,
        Err(CliError::Invariant(reason)) => return fail(reason),
        Err(e) => return Err(e),
    };
    let mixture = read_input(&truth.join(&meta.mixture))?;
    if mixture.len() != meta.len || meta.reference_index >= mixture.channels() {
        return fail(format!("{} does not match truth.json", meta.mixture));
    }
    let mix_ref = mixture.channel_vec(meta.reference_index);
    let mut report = best_permutation_eval(
        [&estimates_read[0], &estimates_read[1]],
        [&references[0], &references[1]],
        &mix_ref,
    )?;
    report.nonmixing_violation_rate = Some(violation);
    Ok(SceneOutcome::Scored(SceneReport { scene: label, report }))
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores every scene under `estimates` against the matching truth
/// directory and writes `report.json` (to `out` when given). Scenes are
/// scored in parallel. Returns an invariant error after writing the report
/// if any scene failed a check.
pub fn cmd_evaluate(estimates: &Path, truth: &Path, out: Option<&Path>) -> CliResult<EvaluationReport> {
    let names = discover_scenes(estimates)?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(names.len()).max(1);
    let mut outcomes: Vec<Option<CliResult<SceneOutcome>>> = (0..names.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let names = &names;
                scope.spawn(move || {
                    (w..names.len())
                        .step_by(workers)
                        .map(|i| (i, evaluate_scene(&names[i], &estimates.join(&names[i]), &truth.join(&names[i]))))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                outcomes[i] = Some(r);
            }
        }
    });

    let mut report = EvaluationReport {
        scenes: Vec::new(),
        skipped: Vec::new(),
        failures: Vec::new(),
        aggregate: Aggregate { scenes: 0, mean_si_sdr: None, mean_si_sdr_improvement: None },
    };
    for outcome in outcomes.into_iter().flatten() {
        match outcome? {
            SceneOutcome::Scored(s) => report.scenes.push(s),
            SceneOutcome::Skipped(s) => report.skipped.push(s),
            SceneOutcome::Failed(s) => report.failures.push(s),
        }
    }
    report.aggregate = Aggregate {
        scenes: report.scenes.len(),
        mean_si_sdr: mean(report.scenes.iter().filter_map(|s| s.report.mean_si_sdr())),
        mean_si_sdr_improvement: mean(report.scenes.iter().filter_map(|s| s.report.mean_improvement())),
    };
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| estimates.join(REPORT_FILE));
    write_json(&report, &path)?;
    if let Some(f) = report.failures.first() {
        return Err(CliError::Invariant(format!("{} scene(s) failed; first: {}: {}", report.failures.len(), f.scene, f.reason)));
    }
    Ok(report)
}
