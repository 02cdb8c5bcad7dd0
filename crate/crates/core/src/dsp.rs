//! Ground-truth quality measures and the STFT front-end.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio_io::Waveform;
use crate::error::{Error, Result};

/// Lower clamp for SNR and SI-SDR.
pub const MEASURE_FLOOR_DB: f64 = -40.0;
/// Upper clamp for SNR and SI-SDR.
pub const MEASURE_CEIL_DB: f64 = 80.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hamming,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_ms: f64,
    pub hop_fraction: f64,
    pub n_bins_kept: usize,
    pub window_kind: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_ms: 32.0,
            hop_fraction: 0.5,
            n_bins_kept: 256,
            window_kind: WindowKind::Hamming,
        }
    }
}

impl StftConfig {
    pub fn fft_size(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop(&self, sample_rate: u32) -> usize {
        ((self.fft_size(sample_rate) as f64 * self.hop_fraction).round() as usize).max(1)
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if !(self.hop_fraction > 0.0 && self.hop_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "hop_fraction {} outside (0, 1]",
                self.hop_fraction
            )));
        }
        let n = self.fft_size(sample_rate);
        if n < 2 || !n.is_multiple_of(2) || self.n_bins_kept != n / 2 {
            return Err(Error::InvalidConfig(format!(
                "n_bins_kept {} must equal fft_size/2 (fft_size {n})",
                self.n_bins_kept
            )));
        }
        Ok(())
    }

    /// Closed-form frame count; frames past the end of the signal are dropped.
    pub fn frame_count(&self, len: usize, sample_rate: u32) -> usize {
        let n = self.fft_size(sample_rate);
        if len < n {
            0
        } else {
            (len - n) / self.hop(sample_rate) + 1
        }
    }
}

/// Periodic Hamming window.
pub fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Magnitude and phase stacked as `[2, T, F]`, frequency fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    data: Vec<f64>,
    frames: usize,
    bins: usize,
    pub config: StftConfig,
}

impl Spectrogram {
    /// Builds a spectrogram from raw `[2, T, F]` data. Magnitudes must be
    /// non-negative and phases in `(-pi, pi]`.
    pub fn from_raw(data: Vec<f64>, frames: usize, bins: usize, config: StftConfig) -> Result<Self> {
        if data.len() != 2 * frames * bins {
            return Err(Error::ShapeMismatch(format!(
                "data length {} != 2 x {frames} x {bins}",
                data.len()
            )));
        }
        let (mag, phase) = data.split_at(frames * bins);
        if mag.iter().any(|m| !(*m >= 0.0)) {
            return Err(Error::ShapeMismatch("negative or NaN magnitude".into()));
        }
        if phase.iter().any(|p| !(*p > -PI && *p <= PI)) {
            return Err(Error::ShapeMismatch("phase outside (-pi, pi]".into()));
        }
        Ok(Self { data, frames, bins, config })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn magnitude(&self) -> &[f64] {
        &self.data[..self.frames * self.bins]
    }

    pub fn phase(&self) -> &[f64] {
        &self.data[self.frames * self.bins..]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Complex STFT values kept for the positive bins `1..=F`, `[T, F]`.
#[derive(Debug, Clone)]
pub struct ComplexStft {
    pub values: Vec<Complex64>,
    pub frames: usize,
    pub bins: usize,
}

struct Analyzer {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    n: usize,
    hop: usize,
}

impl Analyzer {
    fn new(cfg: &StftConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let n = cfg.fft_size(sample_rate);
        let mut planner = FftPlanner::new();
        Ok(Self {
            fft: planner.plan_fft_forward(n),
            window: hamming(n),
            n,
            hop: cfg.hop(sample_rate),
        })
    }
}

pub fn stft_complex(samples: &[f64], sample_rate: u32, cfg: &StftConfig) -> Result<ComplexStft> {
    let a = Analyzer::new(cfg, sample_rate)?;
    if samples.len() < a.n {
        return Err(Error::SignalTooShort {
            needed: a.n,
            got: samples.len(),
        });
    }
    let frames = cfg.frame_count(samples.len(), sample_rate);
    let bins = cfg.n_bins_kept;
    let mut values = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); a.n];
    for t in 0..frames {
        let seg = &samples[t * a.hop..t * a.hop + a.n];
        for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&a.window) {
            *b = Complex64::new(s * w, 0.0);
        }
        a.fft.process(&mut buf);
        // The Nyquist bin of a real signal is real; drop rounding noise so its
        // phase is exactly 0 or pi.
        if bins == a.n / 2 {
            buf[bins].im = 0.0;
        }
        values.extend_from_slice(&buf[1..=bins]);
    }
    Ok(ComplexStft { values, frames, bins })
}

fn principal_angle(c: Complex64) -> f64 {
    let p = c.im.atan2(c.re);
    if p <= -PI {
        PI
    } else {
        p
    }
}

impl ComplexStft {
    pub fn to_spectrogram(&self, config: StftConfig) -> Spectrogram {
        let mut data = Vec::with_capacity(2 * self.values.len());
        data.extend(self.values.iter().map(|c| c.norm()));
        data.extend(self.values.iter().map(|&c| principal_angle(c)));
        Spectrogram {
            data,
            frames: self.frames,
            bins: self.bins,
            config,
        }
    }

    /// Pulls a gradient on the `[2, T, F]` magnitude/phase stack back to the
    /// time-domain samples.
    pub fn backward(
        &self,
        grad: &[f64],
        signal_len: usize,
        sample_rate: u32,
        cfg: &StftConfig,
    ) -> Result<Vec<f64>> {
        let a = Analyzer::new(cfg, sample_rate)?;
        let tf = self.frames * self.bins;
        if grad.len() != 2 * tf {
            return Err(Error::ShapeMismatch(format!("gradient length {} != {}", grad.len(), 2 * tf)));
        }
        let (g_mag, g_phase) = grad.split_at(tf);
        let mut planner = FftPlanner::new();
        let ifft = planner.plan_fft_inverse(a.n);
        let mut out = vec![0.0; signal_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); a.n];
        for t in 0..self.frames {
            buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
            for f in 0..self.bins {
                let i = t * self.bins + f;
                let c = self.values[i];
                let p = c.norm_sqr();
                if p == 0.0 {
                    continue;
                }
                let m = p.sqrt();
                // d|X|/d(re, im) = (re, im)/|X|; d(angle)/d(re, im) = (-im, re)/|X|^2
                let g_re = g_mag[i] * c.re / m - g_phase[i] * c.im / p;
                let g_im = g_mag[i] * c.im / m + g_phase[i] * c.re / p;
                buf[f + 1] = Complex64::new(g_re, g_im);
            }
            // X_k = sum x_n e^{-i theta}: dL/dx_n = Re(sum_k (g_re + i g_im) e^{+i theta}).
            ifft.process(&mut buf);
            for (j, (b, &w)) in buf.iter().zip(&a.window).enumerate() {
                out[t * a.hop + j] += w * b.re;
            }
        }
        Ok(out)
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    Ok(stft_complex(w.samples(), w.sample_rate(), cfg)?.to_spectrogram(*cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureKind {
    Snr,
    SiSdr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityMeasure {
    pub value_db: f64,
    pub kind: MeasureKind,
}

fn clamp_db(v: f64) -> f64 {
    if v.is_nan() {
        MEASURE_FLOOR_DB
    } else {
        v.clamp(MEASURE_FLOOR_DB, MEASURE_CEIL_DB)
    }
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Unclamped SNR of `x` against clean `s`, in dB. Infinite when `x == s`.
pub fn snr_raw(s: &[f64], x: &[f64]) -> Result<f64> {
    if s.len() != x.len() {
        return Err(Error::LengthMismatch(s.len(), x.len()));
    }
    let es = energy(s);
    if es == 0.0 {
        return Err(Error::DegenerateClean);
    }
    let en: f64 = s.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(10.0 * (es / en).log10())
}

/// Unclamped SI-SDR of `x` against clean `s`, in dB.
pub fn si_sdr_raw(s: &[f64], x: &[f64]) -> Result<f64> {
    if s.len() != x.len() {
        return Err(Error::LengthMismatch(s.len(), x.len()));
    }
    let es = energy(s);
    if es == 0.0 {
        return Err(Error::DegenerateClean);
    }
    if x.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateTest);
    }
    let alpha = s.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / es;
    let target = alpha * alpha * es;
    let resid: f64 = s.iter().zip(x).map(|(a, b)| (alpha * a - b).powi(2)).sum();
    Ok(10.0 * (target / resid).log10())
}

/// SNR clamped to `[-40, 80]` dB.
pub fn snr(s: &Waveform, x: &Waveform) -> Result<QualityMeasure> {
    Ok(QualityMeasure {
        value_db: clamp_db(snr_raw(s.samples(), x.samples())?),
        kind: MeasureKind::Snr,
    })
}

/// SI-SDR clamped to `[-40, 80]` dB.
pub fn si_sdr(s: &Waveform, x: &Waveform) -> Result<QualityMeasure> {
    Ok(QualityMeasure {
        value_db: clamp_db(si_sdr_raw(s.samples(), x.samples())?),
        kind: MeasureKind::SiSdr,
    })
}

pub fn si_sdr_clamped(s: &[f64], x: &[f64]) -> Result<f64> {
    si_sdr_raw(s, x).map(clamp_db)
}

pub fn snr_clamped(s: &[f64], x: &[f64]) -> Result<f64> {
    snr_raw(s, x).map(clamp_db)
}
