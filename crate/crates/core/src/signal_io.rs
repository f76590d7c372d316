//! Multichannel audio buffers, array geometry, and the on-disk formats:
//! RIFF WAV (PCM16 or IEEE float32) and the `UMXM` mask container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView1, Axis};

use crate::masks::MaskSet;
use crate::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Radius of the default seven-microphone circular array, in meters.
pub const DEFAULT_ARRAY_RADIUS: f64 = 0.0425;

/// Time-domain samples laid out as `channels x time`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelWave {
    samples: Array2<f64>,
    sample_rate: u32,
}

impl MultichannelWave {
    pub fn new(samples: Array2<f64>, sample_rate: u32) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::Argument("a wave needs at least one channel".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Argument("sample rate must be positive".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(channels: usize, len: usize, sample_rate: u32) -> Self {
        Self::new(Array2::zeros((channels.max(1), len)), sample_rate).expect("valid zero wave")
    }

    pub fn from_mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        let len = samples.len();
        let samples = Array2::from_shape_vec((1, len), samples).map_err(|e| Error::shape(e.to_string()))?;
        Self::new(samples, sample_rate)
    }

    pub fn from_channels(channels: &[Vec<f64>], sample_rate: u32) -> Result<Self> {
        let len = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::shape("all channels must have equal length"));
        }
        let mut samples = Array2::zeros((channels.len(), len));
        for (mut row, ch) in samples.rows_mut().into_iter().zip(channels) {
            row.assign(&ArrayView1::from(ch.as_slice()));
        }
        Self::new(samples, sample_rate)
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut Array2<f64> {
        &mut self.samples
    }

    pub fn into_samples(self) -> Array2<f64> {
        self.samples
    }

    pub fn channel(&self, j: usize) -> ArrayView1<'_, f64> {
        self.samples.row(j)
    }

    pub fn channel_vec(&self, j: usize) -> Vec<f64> {
        self.samples.row(j).to_vec()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn scale(&mut self, gain: f64) {
        self.samples.mapv_inplace(|x| x * gain);
    }
}

/// Microphone positions (meters, relative to the array center) and the
/// reference microphone index.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    positions: Vec<[f64; 3]>,
    reference_index: usize,
}

impl ArrayGeometry {
    pub fn new(positions: Vec<[f64; 3]>, reference_index: usize) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Geometry("array needs at least one microphone".into()));
        }
        if reference_index >= positions.len() {
            return Err(Error::Geometry(format!(
                "reference index {reference_index} out of range for {} microphones",
                positions.len()
            )));
        }
        for (i, p) in positions.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Geometry(format!("microphone {i} has a non-finite coordinate")));
            }
            for (j, q) in positions.iter().enumerate().skip(i + 1) {
                if distance(p, q) < 1e-9 {
                    return Err(Error::Geometry(format!("microphones {i} and {j} coincide")));
                }
            }
        }
        Ok(Self { positions, reference_index })
    }

    /// Uniform circle of `ring` microphones at `radius`, optionally preceded
    /// by a center microphone at index 0. Ring microphone 0 sits at azimuth 0.
    pub fn circular(ring: usize, radius: f64, with_center: bool, reference_index: usize) -> Result<Self> {
        let mut positions = Vec::with_capacity(ring + usize::from(with_center));
        if with_center {
            positions.push([0.0, 0.0, 0.0]);
        }
        for k in 0..ring {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / ring as f64;
            positions.push([radius * phi.cos(), radius * phi.sin(), 0.0]);
        }
        Self::new(positions, reference_index)
    }

    /// Seven-channel circular array: center microphone (the reference) plus
    /// six on a 4.25 cm circle.
    pub fn default_seven() -> Self {
        Self::circular(6, DEFAULT_ARRAY_RADIUS, true, 0).expect("default geometry is valid")
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn reference_index(&self) -> usize {
        self.reference_index
    }

    pub fn channel_count(&self) -> usize {
        self.positions.len()
    }

    /// Same array rotated by `degrees` about the vertical axis.
    pub fn rotated(&self, degrees: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        let positions = self
            .positions
            .iter()
            .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
            .collect();
        Self { positions, reference_index: self.reference_index }
    }

    /// Absolute microphone positions for an array centered at `center`.
    pub fn placed_at(&self, center: [f64; 3]) -> Vec<[f64; 3]> {
        self.positions
            .iter()
            .map(|p| [p[0] + center[0], p[1] + center[1], p[2] + center[2]])
            .collect()
    }
}

impl Default for ArrayGeometry {
    fn default() -> Self {
        Self::default_seven()
    }
}

pub(crate) fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Sample encodings accepted by [`write_wave_as`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

fn map_hound(err: hound::Error) -> Error {
    match err {
        // hound reports short reads as a synthetic `Other` error.
        hound::Error::IoError(e)
            if e.kind() == std::io::ErrorKind::UnexpectedEof
                || (e.kind() == std::io::ErrorKind::Other && e.raw_os_error().is_none()) =>
        {
            Error::Format(format!("truncated file: {e}"))
        }
        hound::Error::IoError(e) => Error::Io(e),
        hound::Error::FormatError(msg) => Error::Format(msg.into()),
        hound::Error::Unsupported => Error::Unsupported("wav encoding not supported".into()),
        other => Error::Format(other.to_string()),
    }
}

/// Reads a PCM16 or IEEE-float32 WAV file. Integer samples are scaled to
/// `[-1, 1)`.
pub fn read_wave(path: impl AsRef<Path>) -> Result<MultichannelWave> {
    let file = File::open(path.as_ref())?;
    read_wave_from(BufReader::new(file))
}

pub fn read_wave_from<R: Read>(reader: R) -> Result<MultichannelWave> {
    let mut reader = hound::WavReader::new(reader).map_err(map_hound)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format("zero channels in header".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (fmt, bits) => {
            return Err(Error::Unsupported(format!("{bits}-bit {fmt:?} samples")));
        }
    };
    if interleaved.len() % channels != 0 {
        return Err(Error::Format("sample count is not a multiple of the channel count".into()));
    }
    let len = interleaved.len() / channels;
    let samples = Array2::from_shape_vec((len, channels), interleaved)
        .map_err(|e| Error::Format(e.to_string()))?
        .reversed_axes()
        .as_standard_layout()
        .into_owned();
    MultichannelWave::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM. Samples beyond full scale saturate and a warning is logged.
pub fn write_wave(wave: &MultichannelWave, path: impl AsRef<Path>) -> Result<()> {
    write_wave_as(wave, path, SampleFormat::Pcm16)
}

pub fn write_wave_as(wave: &MultichannelWave, path: impl AsRef<Path>, format: SampleFormat) -> Result<()> {
    if wave.samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::Argument("cannot write non-finite samples".into()));
    }
    let channels = u16::try_from(wave.channels())
        .map_err(|_| Error::Unsupported(format!("{} channels", wave.channels())))?;
    let spec = hound::WavSpec {
        channels,
        sample_rate: wave.sample_rate,
        bits_per_sample: match format {
            SampleFormat::Pcm16 => 16,
            SampleFormat::Float32 => 32,
        },
        sample_format: match format {
            SampleFormat::Pcm16 => hound::SampleFormat::Int,
            SampleFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let file = File::create(path.as_ref())?;
    let mut writer = hound::WavWriter::new(BufWriter::new(file), spec).map_err(map_hound)?;
    let mut clipped = 0usize;
    for t in 0..wave.len() {
        for j in 0..wave.channels() {
            let x = wave.samples[(j, t)];
            match format {
                SampleFormat::Pcm16 => {
                    if x.abs() > 1.0 {
                        clipped += 1;
                    }
                    writer.write_sample(quantize_pcm16(x)).map_err(map_hound)?;
                }
                SampleFormat::Float32 => writer.write_sample(x as f32).map_err(map_hound)?,
            }
        }
    }
    writer.finalize().map_err(map_hound)?;
    if clipped > 0 {
        log::warn!("{clipped} samples exceeded full scale and were saturated in {}", path.as_ref().display());
    }
    Ok(())
}

/// Nearest 16-bit code, saturating at the representable range.
pub fn quantize_pcm16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

const MASK_MAGIC: &[u8; 4] = b"UMXM";
pub const MASK_FORMAT_VERSION: u32 = 1;

/// Header of the `UMXM` mask container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskFileHeader {
    pub heads: u32,
    pub frames_per_window: u32,
    pub bins: u32,
    pub window_count: u32,
    pub hop_frames: u32,
}

/// Decoded mask container: header plus one [`MaskSet`] per window.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskFile {
    pub header: MaskFileHeader,
    pub windows: Vec<MaskSet>,
}

/// Reads a `UMXM` container.
///
/// Layout (little-endian): magic `UMXM`, version `u32`, then `heads`,
/// `frames_per_window`, `bins`, `window_count`, `hop_frames` as `u32`, then
/// for each window `heads x frames x bins` row-major `f32` values. Heads are
/// ordered speech 0, speech 1, noise.
pub fn read_mask_file(path: impl AsRef<Path>) -> Result<MaskFile> {
    let mut bytes = Vec::new();
    File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    decode_mask_file(&bytes)
}

pub fn decode_mask_file(bytes: &[u8]) -> Result<MaskFile> {
    let mut cursor = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(Error::Format("mask file truncated".into()));
        }
        let (head, rest) = cursor.split_at(n);
        cursor = rest;
        Ok(head)
    };
    if take(4)? != MASK_MAGIC {
        return Err(Error::Format("missing UMXM magic".into()));
    }
    let mut word = || -> Result<u32> { Ok(u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"))) };
    let version = word()?;
    if version != MASK_FORMAT_VERSION {
        return Err(Error::Unsupported(format!("mask container version {version}")));
    }
    let header = MaskFileHeader {
        heads: word()?,
        frames_per_window: word()?,
        bins: word()?,
        window_count: word()?,
        hop_frames: word()?,
    };
    if header.heads != 3 {
        return Err(Error::Format(format!("expected 3 mask heads, header declares {}", header.heads)));
    }
    let frames = header.frames_per_window as usize;
    let bins = header.bins as usize;
    let per_window = 3 * frames * bins;
    let expected = per_window
        .checked_mul(header.window_count as usize)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("mask dimensions overflow".into()))?;
    let body = take(expected).map_err(|_| {
        Error::Format(format!(
            "mask data holds {} bytes but header declares {} windows of 3x{frames}x{bins}",
            bytes.len().saturating_sub(28),
            header.window_count
        ))
    })?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after mask data", cursor.len())));
    }
    let mut windows = Vec::with_capacity(header.window_count as usize);
    for (c, chunk) in body.chunks_exact(per_window * 4).enumerate() {
        let values: Vec<f64> = chunk
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("mask value {bad} in window {c} is outside [0, 1]")));
        }
        let all = Array3::from_shape_vec((3, frames, bins), values).map_err(|e| Error::Format(e.to_string()))?;
        let speech = all.slice(ndarray::s![0..2, .., ..]).to_owned();
        let noise = all.index_axis(Axis(0), 2).to_owned();
        windows.push(MaskSet::new(speech, noise, c)?);
    }
    Ok(MaskFile { header, windows })
}

/// Writes masks as a `UMXM` container. All sets must share one shape.
pub fn write_mask_file(path: impl AsRef<Path>, hop_frames: usize, windows: &[MaskSet]) -> Result<()> {
    let bytes = encode_mask_file(hop_frames, windows)?;
    let mut file = BufWriter::new(File::create(path.as_ref())?);
    file.write_all(&bytes)?;
    file.flush()?;
    Ok(())
}

pub fn encode_mask_file(hop_frames: usize, windows: &[MaskSet]) -> Result<Vec<u8>> {
    let (frames, bins) = windows.first().map_or((0, 0), |w| (w.frames(), w.bins()));
    if windows.iter().any(|w| w.frames() != frames || w.bins() != bins) {
        return Err(Error::shape("all mask windows must share frames and bins"));
    }
    let to_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")));
    let mut out = Vec::with_capacity(24 + windows.len() * 3 * frames * bins * 4);
    out.extend_from_slice(MASK_MAGIC);
    for word in [
        MASK_FORMAT_VERSION,
        3,
        to_u32(frames)?,
        to_u32(bins)?,
        to_u32(windows.len())?,
        to_u32(hop_frames)?,
    ] {
        out.extend_from_slice(&word.to_le_bytes());
    }
    for w in windows {
        for v in w.speech.iter().chain(w.noise.iter()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}
