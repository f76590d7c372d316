//! Scene specifications for `simulate` and the truth metadata it writes.

use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unmix::signal_io::{read_wave, DEFAULT_SAMPLE_RATE};
use unmix::simulator::{speech_like, Room, RoomSpec, Utterance};

use crate::config::GeometrySection;
use crate::error::{CliError, CliResult};

pub const TRUTH_FILE: &str = "truth.json";
pub const MIXTURE_FILE: &str = "mixture.wav";
pub const NOISE_FILE: &str = "noise.wav";

pub fn source_file(k: usize) -> String {
    format!("source_{k:02}.wav")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    pub seconds: f64,
    #[serde(default)]
    pub seed: u64,
    /// Speech-to-noise ratio at the reference microphone; absent means no noise.
    #[serde(default)]
    pub noise_snr_db: Option<f64>,
    pub room: RoomSection,
    #[serde(default)]
    pub array: ArraySection,
    #[serde(rename = "source")]
    pub sources: Vec<SourceSpec>,
}

fn default_sample_rate() -> u32 {
    DEFAULT_SAMPLE_RATE
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSection {
    pub dimensions: [f64; 3],
    pub t60: f64,
}

/// Array placement and layout; the layout keys match the `geometry` section
/// of the run configuration. The center defaults to the middle of the room.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArraySection {
    pub center: Option<[f64; 3]>,
    pub ring: usize,
    pub radius: f64,
    pub center_mic: bool,
    pub positions: Vec<[f64; 3]>,
    pub reference_index: usize,
}

impl Default for ArraySection {
    fn default() -> Self {
        let g = GeometrySection::default();
        Self {
            center: None,
            ring: g.ring,
            radius: g.radius,
            center_mic: g.center_mic,
            positions: g.positions,
            reference_index: g.reference_index,
        }
    }
}

impl ArraySection {
    pub fn geometry(&self) -> GeometrySection {
        GeometrySection {
            ring: self.ring,
            radius: self.radius,
            center_mic: self.center_mic,
            positions: self.positions.clone(),
            reference_index: self.reference_index,
        }
    }
}

/// One utterance. The position is either absolute or given as azimuth and
/// distance from the array center; the signal is either a mono WAV or a
/// synthetic speech-like burst.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    #[serde(default)]
    pub position: Option<[f64; 3]>,
    #[serde(default)]
    pub azimuth_deg: Option<f64>,
    #[serde(default)]
    pub distance: Option<f64>,
    #[serde(default)]
    pub start_seconds: f64,
    #[serde(default)]
    pub gain_db: f64,
    #[serde(default)]
    pub wav: Option<PathBuf>,
    #[serde(default)]
    pub seconds: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl SceneSpec {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(format!("reading {}", path.display())))?;
        let spec: SceneSpec =
            toml::from_str(&text).map_err(|e| CliError::Parse { path: path.into(), message: e.to_string() })?;
        Ok(spec.resolve_paths(path.parent().unwrap_or(Path::new(""))))
    }

    fn resolve_paths(mut self, base: &Path) -> Self {
        for s in &mut self.sources {
            if let Some(w) = &s.wav {
                if w.is_relative() {
                    s.wav = Some(base.join(w));
                }
            }
        }
        self
    }

    pub fn len(&self) -> usize {
        (self.seconds * self.sample_rate as f64).round() as usize
    }

    pub fn room_spec(&self) -> CliResult<RoomSpec> {
        let room = Room { dimensions: self.room.dimensions, t60: self.room.t60 };
        let d = room.dimensions;
        let mut spec = RoomSpec {
            room,
            source_positions: Vec::new(),
            array_center: self.array.center.unwrap_or([d[0] / 2.0, d[1] / 2.0, d[2] / 2.0]),
            geometry: self.array.geometry().build()?,
        };
        for (k, s) in self.sources.iter().enumerate() {
            let p = match (s.position, s.azimuth_deg, s.distance) {
                (Some(p), None, None) => p,
                (None, Some(az), Some(dist)) => spec.point_at(az, dist),
                _ => {
                    return Err(field_error(k, "give either `position` or both `azimuth_deg` and `distance`"));
                }
            };
            spec.source_positions.push(p);
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Dry signals placed at their onsets. Synthetic sources default to the
    /// scene seed plus their index plus one.
    pub fn utterances(&self, room: &RoomSpec) -> CliResult<Vec<Utterance>> {
        let sr = self.sample_rate;
        self.sources
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let signal = match (&s.wav, s.seconds) {
                    (Some(path), None) => {
                        let wave = read_wave(path)?;
                        if wave.channels() != 1 || wave.sample_rate() != sr {
                            return Err(field_error(
                                k,
                                &format!("{} must be mono at {sr} Hz", path.display()),
                            ));
                        }
                        wave.channel_vec(0)
                    }
                    (None, Some(seconds)) if seconds > 0.0 => {
                        speech_like(seconds, sr, s.seed.unwrap_or(self.seed.wrapping_add(k as u64 + 1)))
                    }
                    _ => return Err(field_error(k, "give either `wav` or a positive `seconds`")),
                };
                if !(s.start_seconds >= 0.0) {
                    return Err(field_error(k, "`start_seconds` must be non-negative"));
                }
                Ok(Utterance {
                    signal,
                    position: room.source_positions[k],
                    start: (s.start_seconds * sr as f64).round() as usize,
                    gain_db: s.gain_db,
                })
            })
            .collect()
    }
}

fn field_error(k: usize, msg: &str) -> CliError {
    CliError::Core(unmix::Error::Argument(format!("source[{k}]: {msg}")))
}

/// Contents of `truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthMeta {
    pub sample_rate: u32,
    pub len: usize,
    pub channels: usize,
    pub reference_index: usize,
    pub mixture: String,
    pub noise: Option<String>,
    pub utterances: Vec<UtteranceMeta>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMeta {
    /// Reference-microphone spatial image, mono.
    pub image: String,
    pub position: [f64; 3],
    pub channel: usize,
    pub segment: Range<usize>,
    pub emission: Range<usize>,
}

impl TruthMeta {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(TRUTH_FILE);
        if !path.is_file() {
            return Err(CliError::MissingTruth(format!("{} not found", path.display())));
        }
        let text = std::fs::read_to_string(&path).map_err(CliError::io(format!("reading {}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Parse { path, message: e.to_string() })
    }

    pub fn assignment(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.channel).collect()
    }

    pub fn segments(&self) -> Vec<Range<usize>> {
        self.utterances.iter().map(|u| u.segment.clone()).collect()
    }

    /// Reference-microphone signal of each output channel and of the noise.
    pub fn reference_signals(&self, dir: &Path) -> CliResult<([Vec<f64>; 2], Vec<f64>)> {
        let mut sources = [vec![0.0; self.len], vec![0.0; self.len]];
        for u in &self.utterances {
            if u.channel > 1 {
                return Err(CliError::Invariant(format!("{} is assigned to channel {}", u.image, u.channel)));
            }
            let image = read_mono(&dir.join(&u.image), self.len)?;
            for (o, v) in sources[u.channel].iter_mut().zip(image) {
                *o += v;
            }
        }
        let noise = match &self.noise {
            Some(name) => read_mono(&dir.join(name), self.len)?,
            None => vec![0.0; self.len],
        };
        Ok((sources, noise))
    }
}

/// Reads a mono WAV and checks its length.
pub fn read_mono(path: &Path, len: usize) -> CliResult<Vec<f64>> {
    let wave = read_wave(path).map_err(|e| match e {
        unmix::Error::Io(source) => CliError::Io { context: format!("reading {}", path.display()), source },
        other => CliError::Core(other),
    })?;
    if wave.channels() != 1 || wave.len() != len {
        return Err(CliError::Invariant(format!(
            "{}: expected mono with {len} samples, found {} channels of {}",
            path.display(),
            wave.channels(),
            wave.len()
        )));
    }
    Ok(wave.channel_vec(0))
}
