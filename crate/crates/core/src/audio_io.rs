//! Audio loading, saving, resampling and the catalogue manifest format.
//!
//! Everything downstream assumes mono audio at [`CANONICAL_RATE`]. Files in
//! other formats are collapsed to mono by an unweighted channel mean and
//! resampled with a windowed-sinc polyphase filter.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CANONICAL_RATE: u32 = 16_000;

/// Environment variable naming a directory where resampled catalogue audio is cached.
pub const CACHE_ENV: &str = "NORESQA_CACHE";

/// A mono signal. Samples are finite and non-empty; they are nominally in
/// `[-1, 1]` but degraded mixtures may exceed that range.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Arc<[f64]>,
    sample_rate: u32,
    source_id: String,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32, source_id: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidWaveform("no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidWaveform("sample rate is zero".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidWaveform(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples: samples.into(),
            sample_rate,
            source_id: source_id.into(),
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Same rate and source, new samples.
    pub fn with_samples(&self, samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, self.sample_rate, self.source_id.clone())
    }

    /// A copy of `[start, start + len)`.
    pub fn excerpt(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::SignalTooShort {
                needed: start + len,
                got: self.len(),
            });
        }
        self.with_samples(self.samples[start..start + len].to_vec())
    }

    pub fn power(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Clean,
    Noise,
    Rir,
}

/// One line of a catalogue manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub role: Role,
    pub duration_s: f64,
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let unreadable = |reason: String| Error::UnreadableFile {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::Unsupported => Error::UnsupportedEncoding {
            path: path.to_path_buf(),
            reason: "unsupported WAV format tag".into(),
        },
        other => unreadable(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::UnsupportedEncoding {
            path: path.to_path_buf(),
            reason: "floating-point samples (expected integer PCM)".into(),
        });
    }
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(unreadable("zero channels".into()));
    }
    let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
    let interleaved: Vec<f64> = reader
        .samples::<i32>()
        .map(|s| s.map(|v| v as f64 / scale))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| unreadable(e.to_string()))?;
    let mono: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    let id = path.to_string_lossy().into_owned();
    Waveform::new(mono, spec.sample_rate, id).map_err(|e| unreadable(e.to_string()))
}

/// Writes 16-bit PCM. Samples outside `[-1, 1]` are clipped to the PCM extremes.
pub fn save_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(other.to_string())),
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec).map_err(to_io)?;
    for &s in w.samples() {
        writer.write_sample(pcm16_code(s)).map_err(to_io)?;
    }
    writer.finalize().map_err(to_io)
}

fn pcm16_code(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Windowed-sinc polyphase resampler.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::InvalidConfig("target rate must be positive".into()));
    }
    if target_rate == w.sample_rate() {
        return Ok(w.clone());
    }
    let g = gcd(w.sample_rate() as u64, target_rate as u64);
    let up = (target_rate as u64 / g) as usize;
    let down = (w.sample_rate() as u64 / g) as usize;
    let out_len = ((w.len() as u64 * up as u64 + down as u64 / 2) / down as u64).max(1) as usize;

    // Cutoff relative to the input rate; lowpass at the lower of the two Nyquists.
    let cutoff = (up as f64 / down as f64).min(1.0) * 0.95;
    let half_taps: i64 = 32;
    let taps = (2 * half_taps) as usize;
    // One filter per output phase (fractional position in units of 1/up).
    let bank: Vec<Vec<f64>> = (0..up)
        .map(|phase| {
            let frac = phase as f64 / up as f64;
            (0..taps)
                .map(|j| {
                    let x = (j as i64 - half_taps + 1) as f64 - frac;
                    cutoff * sinc(cutoff * x) * kaiser(x / half_taps as f64, 8.0)
                })
                .collect()
        })
        .collect();

    let input = w.samples();
    let out: Vec<f64> = (0..out_len)
        .map(|n| {
            let pos = n * down;
            let base = (pos / up) as i64;
            let filt = &bank[pos % up];
            filt.iter()
                .enumerate()
                .filter_map(|(j, h)| {
                    let idx = base + j as i64 - half_taps + 1;
                    (idx >= 0 && (idx as usize) < input.len()).then(|| h * input[idx as usize])
                })
                .sum()
        })
        .collect();
    Waveform::new(out, target_rate, w.source_id().to_string())
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Kaiser window evaluated at `x` in `[-1, 1]`.
fn kaiser(x: f64, beta: f64) -> f64 {
    if x.abs() > 1.0 {
        return 0.0;
    }
    bessel_i0(beta * (1.0 - x * x).sqrt()) / bessel_i0(beta)
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Loads a file and brings it to the canonical rate. When `NORESQA_CACHE` is
/// set, resampled audio is cached there keyed by path and file size.
pub fn load_canonical(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
    let cached = match &cache {
        Some(dir) => Some(dir.join(cache_key(path)?)),
        None => None,
    };
    if let Some(c) = &cached {
        if c.exists() {
            let w = load_wav(c)?;
            if w.sample_rate() == CANONICAL_RATE {
                return Waveform::new(w.samples().to_vec(), CANONICAL_RATE, path.to_string_lossy());
            }
        }
    }
    let w = load_wav(path)?;
    if w.sample_rate() == CANONICAL_RATE {
        return Ok(w);
    }
    let r = resample(&w, CANONICAL_RATE)?;
    if let Some(c) = &cached {
        if let Some(dir) = c.parent() {
            std::fs::create_dir_all(dir)?;
        }
        save_wav(c, &r)?;
    }
    Ok(r)
}

fn cache_key(path: &Path) -> Result<String> {
    let meta = std::fs::metadata(path)?;
    let mut h = Sha256::new();
    h.update(path.to_string_lossy().as_bytes());
    h.update(meta.len().to_le_bytes());
    let digest = h.finalize();
    let hex: String = digest.iter().take(16).map(|b| format!("{b:02x}")).collect();
    Ok(format!("{hex}.wav"))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::InvalidManifest {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if !(entry.duration_s > 0.0) {
            return Err(Error::InvalidManifest {
                line: i + 1,
                reason: format!("duration_s must be positive, got {}", entry.duration_s),
            });
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Catalogues every `.wav` under `dir` (sorted, recursive) with the given role.
pub fn scan_dir(dir: impl AsRef<Path>, role: Role) -> Result<Vec<ManifestEntry>> {
    let mut paths = Vec::new();
    collect_wavs(dir.as_ref(), &mut paths)?;
    paths.sort();
    paths
        .into_iter()
        .map(|path| {
            let reader = hound::WavReader::open(&path).map_err(|e| Error::UnreadableFile {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            let spec = reader.spec();
            let frames = reader.duration() as f64;
            Ok(ManifestEntry {
                duration_s: frames / spec.sample_rate as f64,
                path,
                role,
            })
        })
        .filter(|e: &Result<ManifestEntry>| e.as_ref().map_or(true, |e| e.duration_s > 0.0))
        .collect()
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_wavs(&path, out)?;
        } else if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        {
            out.push(path);
        }
    }
    Ok(())
}

/// Loads every manifest entry at the canonical rate, preserving order.
pub fn load_catalogue(entries: &[ManifestEntry]) -> Result<Vec<Waveform>> {
    entries.iter().map(|e| load_canonical(&e.path)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, channels: u16, rate: u32, codes: &[i16]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &c in codes {
            w.write_sample(c).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn silence_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_raw(&p, 1, 16000, &vec![0; 16000]);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.len(), 16000);
        assert!(w.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn antiphase_stereo_cancels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let codes: Vec<i16> = (0..2000)
            .flat_map(|i| {
                let a = ((i * 37) % 20000) as i16 - 10000;
                [a, -a]
            })
            .collect();
        write_raw(&p, 2, 16000, &codes);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.len(), 2000);
        assert!(w.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn full_scale_square_rescales() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let codes: Vec<i16> = (0..100).map(|i| if i % 2 == 0 { 32767 } else { -32767 }).collect();
        write_raw(&p, 1, 16000, &codes);
        let w = load_wav(&p).unwrap();
        for (i, &s) in w.samples().iter().enumerate() {
            let want = if i % 2 == 0 { 32767.0 / 32768.0 } else { -32767.0 / 32768.0 };
            assert_eq!(s, want);
        }
        assert!((w.samples()[0] - 0.99997).abs() < 1e-5);
    }

    #[test]
    fn missing_file_is_unreadable() {
        let err = load_wav("/nonexistent/x.wav").unwrap_err();
        assert!(matches!(err, Error::UnreadableFile { .. }));
    }

    #[test]
    fn float_wav_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_wav(&p).unwrap_err(), Error::UnsupportedEncoding { .. }));
    }

    #[test]
    fn save_writes_zero_codes_and_clips_extremes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        save_wav(&p, &Waveform::new(vec![0.0; 10], 16000, "z").unwrap()).unwrap();
        let codes: Vec<i16> = hound::WavReader::open(&p)
            .unwrap()
            .samples::<i16>()
            .map(|s| s.unwrap())
            .collect();
        assert_eq!(codes, vec![0; 10]);

        let p = dir.path().join("c.wav");
        save_wav(&p, &Waveform::new(vec![1.0, -1.0, 1.5, -2.0], 16000, "c").unwrap()).unwrap();
        let codes: Vec<i16> = hound::WavReader::open(&p)
            .unwrap()
            .samples::<i16>()
            .map(|s| s.unwrap())
            .collect();
        assert_eq!(codes, vec![32767, -32768, 32767, -32768]);
    }

    #[test]
    fn roundtrip_within_one_quantization_step() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<f64> = (0..5000).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let w = Waveform::new(samples, 16000, "r").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        save_wav(&p, &w).unwrap();
        let back = load_wav(&p).unwrap();
        let max_err = w
            .samples()
            .iter()
            .zip(back.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1.0 / 32768.0, "max error {max_err}");
    }

    #[test]
    fn resample_identity_and_length() {
        let w = Waveform::new((0..1600).map(|i| (i as f64 * 0.01).sin()).collect(), 16000, "a").unwrap();
        assert_eq!(resample(&w, 16000).unwrap(), w);
        let w8 = Waveform::new(vec![0.1; 8000], 8000, "b").unwrap();
        let r = resample(&w8, 16000).unwrap();
        assert_eq!(r.len(), 16000);
        assert_eq!(r.sample_rate(), 16000);
    }

    #[test]
    fn resample_keeps_tone_frequency() {
        let sr = 48000.0;
        let w = Waveform::new(
            (0..48000)
                .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / sr).sin())
                .collect(),
            48000,
            "t",
        )
        .unwrap();
        let r = resample(&w, 16000).unwrap();
        assert!((r.len() as i64 - 16000).abs() <= 1);
        // Direct DFT magnitude over 1 Hz bins.
        let x = r.samples();
        let n = x.len();
        let mag = |k: usize| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, v) in x.iter().enumerate() {
                let ph = 2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                re += v * ph.cos();
                im -= v * ph.sin();
            }
            (re * re + im * im).sqrt()
        };
        let peak = (1..n / 2).step_by(50).chain([1000]).max_by(|&a, &b| mag(a).total_cmp(&mag(b))).unwrap();
        assert_eq!(peak, 1000);
    }

    #[test]
    fn manifest_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let entries = vec![
            ManifestEntry { path: "a.wav".into(), role: Role::Clean, duration_s: 3.5 },
            ManifestEntry { path: "b.wav".into(), role: Role::Rir, duration_s: 0.4 },
        ];
        write_manifest(&p, &entries).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), entries);

        std::fs::write(&p, "{\"path\":\"a.wav\",\"role\":\"speech\",\"duration_s\":1.0}\n").unwrap();
        assert!(matches!(read_manifest(&p).unwrap_err(), Error::InvalidManifest { line: 1, .. }));
        std::fs::write(&p, "{\"path\":\"a.wav\",\"role\":\"noise\",\"duration_s\":0}\n").unwrap();
        assert!(read_manifest(&p).is_err());
    }

    #[test]
    fn rejects_non_finite_samples() {
        assert!(Waveform::new(vec![0.0, f64::NAN], 16000, "x").is_err());
        assert!(Waveform::new(vec![], 16000, "x").is_err());
    }
}
