//! Declarative run configuration.
//!
//! A TOML file with one section per stage. Every key has a default, so an
//! empty file is a valid configuration. `--set section.key=value` flags are
//! applied on top of the file before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unmix::beamformer::{BeamformerOptions, InterferenceModel};
use unmix::dereverb::WpeConfig;
use unmix::features::DEFAULT_NORMALIZATION_SECONDS;
use unmix::masks::DEFAULT_MERGE_THRESHOLD_DEG;
use unmix::signal_io::{ArrayGeometry, SampleFormat, DEFAULT_ARRAY_RADIUS, DEFAULT_SAMPLE_RATE};
use unmix::stft::StftConfig;
use unmix::stitcher::{PipelineOptions, SeparationMode, WindowPlan};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub sample_rate: u32,
    pub mode: SeparationMode,
    pub seed: u64,
    pub stft: StftSection,
    pub window: WindowSection,
    pub masks: MaskSection,
    pub features: FeatureSection,
    pub beamformer: BeamformerSection,
    pub dereverb: DereverbSection,
    pub geometry: GeometrySection,
    pub output: OutputSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            mode: SeparationMode::Masking,
            seed: 0,
            stft: StftSection::default(),
            window: WindowSection::default(),
            masks: MaskSection::default(),
            features: FeatureSection::default(),
            beamformer: BeamformerSection::default(),
            dereverb: DereverbSection::default(),
            geometry: GeometrySection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftSection {
    pub fft_size: usize,
    pub window_size: usize,
    pub hop: usize,
}

impl Default for StftSection {
    fn default() -> Self {
        let d = StftConfig::default();
        Self { fft_size: d.fft_size, window_size: d.window_size, hop: d.hop }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSection {
    /// Separation window length in seconds.
    pub seconds: f64,
    /// Fraction of each window shared with the next one.
    pub overlap: f64,
}

impl Default for WindowSection {
    fn default() -> Self {
        Self { seconds: 2.4, overlap: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSection {
    /// `oracle` or `file:<path>`.
    pub provider: String,
    pub normalize: bool,
    pub doa_merge: bool,
    pub doa_threshold_deg: f64,
}

impl Default for MaskSection {
    fn default() -> Self {
        Self {
            provider: "oracle".into(),
            normalize: true,
            doa_merge: true,
            doa_threshold_deg: DEFAULT_MERGE_THRESHOLD_DEG,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    pub normalization_seconds: f64,
}

impl Default for FeatureSection {
    fn default() -> Self {
        Self { normalization_seconds: DEFAULT_NORMALIZATION_SECONDS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamformerSection {
    pub interference: InterferenceModel,
    pub gain_adjust: bool,
}

impl Default for BeamformerSection {
    fn default() -> Self {
        let d = BeamformerOptions::default();
        Self { interference: d.interference, gain_adjust: d.gain_adjust }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DereverbSection {
    pub enabled: bool,
    pub taps: usize,
    pub delay: usize,
    pub iterations: usize,
    pub update_seconds: f64,
    pub context_seconds: f64,
    pub epsilon: f64,
}

impl Default for DereverbSection {
    fn default() -> Self {
        let d = WpeConfig::default();
        Self {
            enabled: true,
            taps: d.taps,
            delay: d.delay,
            iterations: d.iterations,
            update_seconds: d.update_interval,
            context_seconds: d.context,
            epsilon: d.epsilon,
        }
    }
}

impl DereverbSection {
    pub fn wpe(&self) -> WpeConfig {
        WpeConfig {
            taps: self.taps,
            delay: self.delay,
            iterations: self.iterations,
            update_interval: self.update_seconds,
            context: self.context_seconds,
            epsilon: self.epsilon,
        }
    }
}

/// Either an explicit position list or a circular ring with an optional
/// center microphone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySection {
    pub ring: usize,
    pub radius: f64,
    pub center_mic: bool,
    pub positions: Vec<[f64; 3]>,
    pub reference_index: usize,
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self { ring: 6, radius: DEFAULT_ARRAY_RADIUS, center_mic: true, positions: Vec::new(), reference_index: 0 }
    }
}

impl GeometrySection {
    pub fn build(&self) -> unmix::Result<ArrayGeometry> {
        if self.positions.is_empty() {
            ArrayGeometry::circular(self.ring, self.radius, self.center_mic, self.reference_index)
        } else {
            ArrayGeometry::new(self.positions.clone(), self.reference_index)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaveEncoding {
    Pcm16,
    Float32,
}

impl From<WaveEncoding> for SampleFormat {
    fn from(e: WaveEncoding) -> Self {
        match e {
            WaveEncoding::Pcm16 => SampleFormat::Pcm16,
            WaveEncoding::Float32 => SampleFormat::Float32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub encoding: WaveEncoding,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { encoding: WaveEncoding::Float32 }
    }
}

/// Where masks come from, resolved from `masks.provider`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderChoice {
    Oracle,
    File(PathBuf),
}

impl PipelineConfig {
    /// Reads `path` (or starts from defaults), applies `overrides`, resolves
    /// relative file paths against the config's directory and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(CliError::io(format!("reading {}", p.display())))?;
                let parse_err = |e: toml::de::Error| CliError::Parse { path: p.into(), message: e.to_string() };
                toml::from_str::<PipelineConfig>(&text).map_err(parse_err)?;
                toml::from_str::<toml::Table>(&text).map_err(parse_err)?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let mut config = from_table(table).map_err(|e| CliError::Usage(format!("override rejected: {}", e.message())))?;
        if let (Some(p), Ok(ProviderChoice::File(file))) = (path, config.provider()) {
            if file.is_relative() {
                let base = p.parent().unwrap_or(Path::new(""));
                config.masks.provider = format!("file:{}", base.join(file).display());
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |msg: String| Err(CliError::Core(unmix::Error::Config(msg)));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        self.stft_config().validate()?;
        self.window_plan()?.validate()?;
        self.dereverb.wpe().validate()?;
        self.geometry.build()?;
        if !(0.0..=180.0).contains(&self.masks.doa_threshold_deg) {
            return bad(format!("masks.doa_threshold_deg {} is outside [0, 180]", self.masks.doa_threshold_deg));
        }
        if !(self.features.normalization_seconds > 0.0) {
            return bad("features.normalization_seconds must be positive".into());
        }
        if let ProviderChoice::File(p) = self.provider()? {
            if !p.is_file() {
                return bad(format!("mask file {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    pub fn provider(&self) -> CliResult<ProviderChoice> {
        let p = self.masks.provider.trim();
        if p == "oracle" {
            Ok(ProviderChoice::Oracle)
        } else if let Some(path) = p.strip_prefix("file:") {
            Ok(ProviderChoice::File(PathBuf::from(path)))
        } else {
            Err(CliError::Core(unmix::Error::Config(format!(
                "masks.provider must be \"oracle\" or \"file:<path>\", got {p:?}"
            ))))
        }
    }

    pub fn stft_config(&self) -> StftConfig {
        StftConfig {
            fft_size: self.stft.fft_size,
            window_size: self.stft.window_size,
            hop: self.stft.hop,
            ..StftConfig::default()
        }
    }

    /// Window and hop in frames. The window is rounded to whole frames and
    /// the hop to the nearest frame of `window * (1 - overlap)`.
    pub fn window_plan(&self) -> CliResult<WindowPlan> {
        let w = &self.window;
        if !(w.seconds > 0.0) || !(0.0..1.0).contains(&w.overlap) || self.stft.hop == 0 {
            return Err(CliError::Core(unmix::Error::Config(format!(
                "window needs seconds > 0 and overlap in [0, 1), got {} s and {}",
                w.seconds, w.overlap
            ))));
        }
        let frame_seconds = self.stft.hop as f64 / self.sample_rate as f64;
        let window_frames = (w.seconds / frame_seconds).round() as usize;
        let hop_frames = (window_frames as f64 * (1.0 - w.overlap)).round() as usize;
        Ok(WindowPlan { window_frames, hop_frames })
    }

    pub fn pipeline_options(&self) -> CliResult<PipelineOptions> {
        Ok(PipelineOptions {
            plan: self.window_plan()?,
            mode: self.mode,
            normalize: self.masks.normalize,
            merge_threshold_deg: self.masks.doa_merge.then_some(self.masks.doa_threshold_deg),
            beamformer: BeamformerOptions {
                interference: self.beamformer.interference,
                gain_adjust: self.beamformer.gain_adjust,
            },
            feature_seconds: self.features.normalization_seconds,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn from_table(table: toml::Table) -> Result<PipelineConfig, toml::de::Error> {
    toml::Value::Table(table).try_into()
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Applies one `dotted.key=value` assignment. The value is read as a TOML
/// literal when it parses as one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, item: &str) -> CliResult<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {item:?}")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("malformed key {key:?}")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut node = table;
    for part in parents {
        let entry = node.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("{key:?}: {part:?} is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
