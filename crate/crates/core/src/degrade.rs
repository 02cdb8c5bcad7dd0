//! Degradations and the seeded training-pair sampler.
//!
//! Additive kinds are labelled exactly: the noise gain is solved in closed
//! form for the target SNR. Signal manipulations have no closed form, so
//! [`calibrate_level`] searches each kind's severity parameter until the
//! SI-SDR against the clean source is near the target.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio_io::{save_wav, Waveform};
use crate::dsp::{si_sdr_clamped, snr_clamped, MEASURE_FLOOR_DB};
use crate::error::{Error, Result};

/// SNR range for additive degradations, dB.
pub const SNR_RANGE: (f64, f64) = (-15.0, 60.0);
/// SI-SDR range of stored labels, dB.
pub const SDR_RANGE: (f64, f64) = (-15.0, 25.0);
/// Calibration stops once the achieved SI-SDR is this close to the target.
pub const CALIBRATION_TOLERANCE_DB: f64 = 0.5;
pub const MU_LAW_MU: f64 = 255.0;

/// Excerpts quieter than this are treated as silence and redrawn.
const MIN_EXCERPT_POWER: f64 = 1e-8;
const MAX_REDRAWS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    AdditiveNoise,
    Clipping,
    FrequencyMask,
    MuLaw,
    GaussianNoise,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 5] = [
        Self::AdditiveNoise,
        Self::Clipping,
        Self::FrequencyMask,
        Self::MuLaw,
        Self::GaussianNoise,
    ];

    pub fn is_additive(self) -> bool {
        matches!(self, Self::AdditiveNoise | Self::GaussianNoise)
    }
}

/// What was done to one input.
///
/// `level` is the target SNR for additive kinds, the clip threshold (fraction
/// of peak) for clipping, the masked fraction of the band geometry for
/// frequency masking, and the quantizer level count for mu-law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub level: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rir_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_hz: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Additive,
    Manipulation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub x_i: Waveform,
    pub x_j: Waveform,
    /// Clean excerpts the inputs were made from.
    pub clean_i: Waveform,
    pub clean_j: Waveform,
    pub snr_i: Option<f64>,
    pub snr_j: Option<f64>,
    /// SI-SDR labels, limited to [`SDR_RANGE`].
    pub sdr_i: f64,
    pub sdr_j: f64,
    /// SI-SDR as measured; decides the preference label.
    pub measured_sdr_i: f64,
    pub measured_sdr_j: f64,
    pub category: Category,
    pub spec_i: DegradationSpec,
    pub spec_j: DegradationSpec,
}

/// Repeats or truncates `noise` to exactly `len` samples.
fn fit_length(noise: &[f64], len: usize) -> Vec<f64> {
    noise.iter().copied().cycle().take(len).collect()
}

fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// `clean + g * noise` with `g` chosen so the SNR is exactly `target_snr`.
pub fn add_noise_at_snr(clean: &Waveform, noise: &Waveform, target_snr: f64) -> Result<Waveform> {
    let n = fit_length(noise.samples(), clean.len());
    let (g, n) = noise_gain(clean.samples(), n, target_snr)?;
    let out = clean.samples().iter().zip(&n).map(|(s, v)| s + g * v).collect();
    clean.with_samples(out)
}

fn noise_gain(clean: &[f64], noise: Vec<f64>, target_snr: f64) -> Result<(f64, Vec<f64>)> {
    let es = norm_sq(clean);
    if es == 0.0 {
        return Err(Error::DegenerateClean);
    }
    let en = norm_sq(&noise);
    if en == 0.0 {
        return Err(Error::DegenerateNoise);
    }
    Ok(((es / (en * 10f64.powf(target_snr / 10.0))).sqrt(), noise))
}

/// Hard-limits samples to `±threshold * max|w|`.
pub fn clip(w: &Waveform, threshold: f64) -> Result<Waveform> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidConfig(format!("clip threshold {threshold} outside (0, 1]")));
    }
    let peak = w.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let lim = threshold * peak;
    w.with_samples(w.samples().iter().map(|v| v.clamp(-lim, lim)).collect())
}

const MASK_FFT: usize = 512;
const MASK_HOP: usize = 256;

/// Zeroes STFT bins whose centre frequency lies in `[low, high]` and
/// resynthesizes by overlap-add. A band narrower than the bin spacing still
/// removes the bin nearest its centre.
pub fn frequency_mask(w: &Waveform, band: (f64, f64)) -> Result<Waveform> {
    MaskAnalysis::new(w).apply(band)
}

/// Forward STFT of a signal, kept so several bands can be tried cheaply.
struct MaskAnalysis<'a> {
    w: &'a Waveform,
    frames: Vec<Vec<Complex64>>,
    win: Vec<f64>,
    inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl<'a> MaskAnalysis<'a> {
    fn new(w: &'a Waveform) -> Self {
        let n = MASK_FFT;
        // sqrt-Hann analysis and synthesis windows at 50% overlap sum to one.
        let win: Vec<f64> = (0..n)
            .map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).sqrt())
            .collect();
        let len = w.len();
        let padded_len = len + 2 * MASK_HOP + n;
        let mut x = vec![0.0; padded_len];
        x[MASK_HOP..MASK_HOP + len].copy_from_slice(w.samples());
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let mut frames = Vec::new();
        let mut start = 0;
        while start + n <= padded_len {
            let mut buf: Vec<Complex64> = (0..n).map(|i| Complex64::new(x[start + i] * win[i], 0.0)).collect();
            fwd.process(&mut buf);
            frames.push(buf);
            start += MASK_HOP;
        }
        Self { w, frames, win, inv }
    }

    fn apply(&self, band: (f64, f64)) -> Result<Waveform> {
        let (low, high) = band;
        let w = self.w;
        let nyquist = w.sample_rate() as f64 / 2.0;
        if !(low >= 0.0 && low < high && high <= nyquist) {
            return Err(Error::InvalidBand { low, high, nyquist });
        }
        let n = MASK_FFT;
        let half = n / 2;
        let df = w.sample_rate() as f64 / n as f64;
        let mut masked: Vec<usize> = (0..=half).filter(|&k| (low..=high).contains(&(k as f64 * df))).collect();
        if masked.is_empty() {
            masked.push((((low + high) / 2.0 / df).round() as usize).min(half));
        }
        let len = w.len();
        let mut out = vec![0.0; len + 2 * MASK_HOP + n];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for (f, frame) in self.frames.iter().enumerate() {
            buf.copy_from_slice(frame);
            for &k in &masked {
                buf[k] = Complex64::new(0.0, 0.0);
                buf[(n - k) % n] = Complex64::new(0.0, 0.0);
            }
            self.inv.process(&mut buf);
            let start = f * MASK_HOP;
            for i in 0..n {
                out[start + i] += buf[i].re * self.win[i] / n as f64;
            }
        }
        w.with_samples(out[MASK_HOP..MASK_HOP + len].to_vec())
    }
}

/// Mu-law companding with a midtread quantizer of step `2 / (levels - 1)` in
/// the companded domain, then expansion. The signal is scaled to unit peak
/// for companding and scaled back afterwards; zero is always a fixed point.
pub fn mu_law(w: &Waveform, mu: f64, quantize_levels: u32) -> Result<Waveform> {
    if !(mu > 0.0) || quantize_levels < 2 {
        return Err(Error::InvalidConfig(format!(
            "mu-law needs mu > 0 and at least 2 levels (got {mu}, {quantize_levels})"
        )));
    }
    let peak = w.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Ok(w.clone());
    }
    let step = 2.0 / (quantize_levels - 1) as f64;
    let denom = (1.0 + mu).ln();
    let out = w
        .samples()
        .iter()
        .map(|&v| {
            let x = v / peak;
            let y = x.signum() * (1.0 + mu * x.abs()).ln() / denom;
            let q = ((y / step).round() * step).clamp(-1.0, 1.0);
            let back = q.signum() * ((1.0 + mu).powf(q.abs()) - 1.0) / mu;
            back * peak
        })
        .collect();
    w.with_samples(out)
}

/// Full linear convolution truncated to the input length, rescaled so its
/// peak matches the input's.
pub fn convolve_rir(w: &Waveform, rir: &Waveform) -> Result<Waveform> {
    let x = w.samples();
    let h = rir.samples();
    let len = x.len();
    let mut y = if (x.len() as u64) * (h.len() as u64) <= 1 << 20 {
        let mut y = vec![0.0; len];
        for (k, &hk) in h.iter().enumerate().take(len) {
            if hk != 0.0 {
                for (yi, xi) in y[k..].iter_mut().zip(x) {
                    *yi += hk * xi;
                }
            }
        }
        y
    } else {
        fft_convolve(x, h, len)
    };
    let peak_in = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let peak_out = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak_out > 0.0 {
        let g = peak_in / peak_out;
        y.iter_mut().for_each(|v| *v *= g);
    }
    w.with_samples(y)
}

fn fft_convolve(x: &[f64], h: &[f64], keep: usize) -> Vec<f64> {
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let load = |s: &[f64]| {
        let mut b = vec![Complex64::new(0.0, 0.0); n];
        b.iter_mut().zip(s).for_each(|(c, &v)| c.re = v);
        b
    };
    let mut a = load(x);
    let mut b = load(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(p, q)| *p *= q);
    inv.process(&mut a);
    a.iter().take(keep).map(|c| c.re / n as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationStatus {
    /// Within tolerance of the target.
    Converged,
    /// Target outside the kind's reachable range; level is the nearest end.
    Saturated,
    /// The level parameter is discrete and no level lands within tolerance;
    /// the closest one is returned.
    Closest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub level: f64,
    pub achieved_sdr: f64,
    pub status: CalibrationStatus,
    pub iterations: usize,
}

/// Fixed seed for the white noise used by the Gaussian kind.
pub const GAUSSIAN_NOISE_SEED: u64 = 0x05EE_D0FA_0D10;

/// Unit-variance white noise.
pub fn white_noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Default band centre for frequency masking when none is given.
pub const DEFAULT_MASK_CENTER_HZ: f64 = 1000.0;

/// Band removed at masked fraction `w`: it grows from `center` toward 0 and
/// toward Nyquist, so bands at larger `w` contain those at smaller `w`.
pub fn mask_band(w: f64, center: f64, nyquist: f64) -> (f64, f64) {
    let w = w.clamp(0.0, 1.0);
    (center * (1.0 - w), center + (nyquist - center) * w)
}

/// Applies a manipulation kind at `level`. Frequency masking uses `center_hz`.
pub fn apply_manipulation(kind: DegradationKind, level: f64, w: &Waveform, center_hz: f64) -> Result<Waveform> {
    match kind {
        DegradationKind::Clipping => clip(w, level),
        DegradationKind::FrequencyMask => {
            let band = mask_band(level, center_hz, w.sample_rate() as f64 / 2.0);
            frequency_mask(w, band)
        }
        DegradationKind::MuLaw => mu_law(w, MU_LAW_MU, level.round() as u32),
        k => Err(Error::InvalidConfig(format!("{k:?} is not a signal manipulation"))),
    }
}

fn sdr_or_floor(s: &[f64], x: &[f64]) -> Result<f64> {
    match si_sdr_clamped(s, x) {
        Err(Error::DegenerateTest) => Ok(MEASURE_FLOOR_DB),
        r => r,
    }
}

/// Finds the level of `kind` whose SI-SDR against `probe` is near `target_sdr`.
pub fn calibrate_level(kind: DegradationKind, target_sdr: f64, probe: &Waveform) -> Result<Calibration> {
    calibrate_level_at(kind, target_sdr, probe, DEFAULT_MASK_CENTER_HZ)
}

/// [`calibrate_level`] with an explicit frequency-mask centre.
pub fn calibrate_level_at(kind: DegradationKind, target_sdr: f64, probe: &Waveform, center_hz: f64) -> Result<Calibration> {
    if !(SDR_RANGE.0..=SDR_RANGE.1).contains(&target_sdr) {
        return Err(Error::InvalidConfig(format!(
            "calibration target {target_sdr} dB outside [{}, {}]",
            SDR_RANGE.0, SDR_RANGE.1
        )));
    }
    let s = probe.samples();
    if norm_sq(s) == 0.0 {
        return Err(Error::DegenerateClean);
    }
    if kind.is_additive() {
        return calibrate_gaussian(target_sdr, probe);
    }

    // Search variable u in [lo, hi]; SI-SDR is increasing in u.
    let (lo, hi, to_level): (f64, f64, Box<dyn Fn(f64) -> f64>) = match kind {
        DegradationKind::Clipping => (-6.0, 0.0, Box::new(|u: f64| 10f64.powf(u))),
        DegradationKind::FrequencyMask => (0.0, 0.999, Box::new(|u| 1.0 - u)),
        // Odd level counts keep zero on the grid, which makes SI-SDR monotone.
        DegradationKind::MuLaw => (0.0, 15.0, Box::new(|u: f64| 2.0 * 2f64.powf(u).round() + 1.0)),
        _ => unreachable!(),
    };
    let mask = (kind == DegradationKind::FrequencyMask).then(|| MaskAnalysis::new(probe));
    let eval = |u: f64| -> Result<f64> {
        let x = match &mask {
            Some(m) => m.apply(mask_band(to_level(u), center_hz, probe.sample_rate() as f64 / 2.0))?,
            None => apply_manipulation(kind, to_level(u), probe, center_hz)?,
        };
        sdr_or_floor(s, x.samples())
    };
    let done = |level: f64, achieved: f64, status, iterations| Calibration { level, achieved_sdr: achieved, status, iterations };

    let (mut a, mut b) = (lo, hi);
    let (mut fa, mut fb) = (eval(a)?, eval(b)?);
    let mut iterations = 2;
    if fa > fb + CALIBRATION_TOLERANCE_DB {
        return Err(Error::NonMonotoneResponse { target: target_sdr, lo: fa, hi: fb });
    }
    if target_sdr <= fa + CALIBRATION_TOLERANCE_DB {
        let status = if (fa - target_sdr).abs() <= CALIBRATION_TOLERANCE_DB {
            CalibrationStatus::Converged
        } else {
            CalibrationStatus::Saturated
        };
        return Ok(done(to_level(a), fa, status, iterations));
    }
    if target_sdr >= fb - CALIBRATION_TOLERANCE_DB {
        let status = if (fb - target_sdr).abs() <= CALIBRATION_TOLERANCE_DB {
            CalibrationStatus::Converged
        } else {
            CalibrationStatus::Saturated
        };
        return Ok(done(to_level(b), fb, status, iterations));
    }
    let discrete = kind == DegradationKind::MuLaw;
    for _ in 0..60 {
        let m = 0.5 * (a + b);
        if discrete && to_level(a) + 2.0 >= to_level(b) {
            break;
        }
        let fm = eval(m)?;
        iterations += 1;
        if (fm - target_sdr).abs() <= CALIBRATION_TOLERANCE_DB {
            return Ok(done(to_level(m), fm, CalibrationStatus::Converged, iterations));
        }
        if fm < target_sdr {
            (a, fa) = (m, fm);
        } else {
            (b, fb) = (m, fm);
        }
    }
    let (u, f) = if (fa - target_sdr).abs() <= (fb - target_sdr).abs() { (a, fa) } else { (b, fb) };
    Ok(done(to_level(u), f, CalibrationStatus::Closest, iterations))
}

/// For `x = s + g n`, write `n = c s + n_perp`. Then SI-SDR is
/// `(1 + g c)^2 |s|^2 / (g^2 |n_perp|^2)` and solving for `g` is direct.
fn calibrate_gaussian(target_sdr: f64, probe: &Waveform) -> Result<Calibration> {
    let s = probe.samples();
    let n = white_noise(s.len(), GAUSSIAN_NOISE_SEED);
    let es = norm_sq(s);
    let c = s.iter().zip(&n).map(|(a, b)| a * b).sum::<f64>() / es;
    let perp: Vec<f64> = n.iter().zip(s).map(|(v, a)| v - c * a).collect();
    let r = 10f64.powf(target_sdr / 10.0);
    let g = es.sqrt() / (r.sqrt() * norm_sq(&perp).sqrt() - c * es.sqrt());
    if !(g > 0.0) {
        return Err(Error::NonMonotoneResponse { target: target_sdr, lo: f64::NAN, hi: f64::NAN });
    }
    let x: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + g * b).collect();
    let level = snr_clamped(s, &x)?;
    Ok(Calibration {
        level,
        achieved_sdr: si_sdr_clamped(s, &x)?,
        status: CalibrationStatus::Converged,
        iterations: 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub excerpt_s: f64,
    pub reverb_prob: f64,
    pub kind_weights: BTreeMap<DegradationKind, f64>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        let kind_weights = BTreeMap::from([
            (DegradationKind::AdditiveNoise, 0.7),
            (DegradationKind::Clipping, 0.1),
            (DegradationKind::FrequencyMask, 0.1),
            (DegradationKind::MuLaw, 0.1),
        ]);
        Self { excerpt_s: 3.0, reverb_prob: 0.0, kind_weights, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.excerpt_s > 0.0) {
            return Err(Error::InvalidConfig(format!("excerpt_s {} must be positive", self.excerpt_s)));
        }
        if !(0.0..=1.0).contains(&self.reverb_prob) {
            return Err(Error::InvalidConfig(format!("reverb_prob {} outside [0, 1]", self.reverb_prob)));
        }
        if self.kind_weights.values().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidConfig("kind weights must be finite and non-negative".into()));
        }
        if self.kind_weights.values().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidConfig("kind weights sum to zero".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Generator for pair number `index` of a run seeded with `seed`; pairs can be
/// regenerated individually.
pub fn pair_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn pick_kind<R: Rng + ?Sized>(rng: &mut R, weights: &BTreeMap<DegradationKind, f64>) -> DegradationKind {
    let total: f64 = weights.values().sum();
    let mut u = rng.random_range(0.0..total);
    for (&k, &w) in weights {
        if u < w {
            return k;
        }
        u -= w;
    }
    *weights.keys().next_back().expect("non-empty weights")
}

/// A non-silent excerpt of `len` samples from a random offset.
fn draw_excerpt<R: Rng + ?Sized>(rng: &mut R, w: &Waveform, len: usize) -> Result<Waveform> {
    if w.len() < len {
        return Err(Error::SignalTooShort { needed: len, got: w.len() });
    }
    for _ in 0..MAX_REDRAWS {
        let start = rng.random_range(0..=w.len() - len);
        let e = w.excerpt(start, len)?;
        if e.power() >= MIN_EXCERPT_POWER {
            return Ok(e);
        }
    }
    Err(Error::InsufficientItems(format!("no audible {len}-sample excerpt in {}", w.source_id())))
}

fn draw_noise<R: Rng + ?Sized>(rng: &mut R, w: &Waveform, len: usize) -> Vec<f64> {
    let start = rng.random_range(0..w.len());
    let (head, tail) = w.samples().split_at(start);
    let rotated: Vec<f64> = tail.iter().chain(head).copied().collect();
    fit_length(&rotated, len)
}

/// Draws one labelled training pair.
///
/// Both inputs share a degradation kind; levels are independent. Additive
/// pairs draw both noises from one noise recording at independent offsets so
/// their noise types match. Labels are measured before reverberation.
pub fn sample_training_pair<R: Rng + ?Sized>(
    rng: &mut R,
    clean_db: &[Waveform],
    noise_db: &[Waveform],
    rir_db: &[Waveform],
    cfg: &SamplerConfig,
) -> Result<PairSample> {
    if clean_db.is_empty() {
        return Err(Error::EmptyManifest("clean"));
    }
    cfg.validate()?;
    let kind = pick_kind(rng, &cfg.kind_weights);
    if kind == DegradationKind::AdditiveNoise && noise_db.is_empty() {
        return Err(Error::EmptyManifest("noise"));
    }
    let sources: Vec<&str> = clean_db.iter().map(|w| w.source_id()).collect();
    if !sources.iter().any(|s| *s != sources[0]) {
        return Err(Error::InsufficientItems("pairs need at least two distinct clean sources".into()));
    }
    let rate = clean_db[0].sample_rate();
    let len = (cfg.excerpt_s * rate as f64).round() as usize;

    for _ in 0..MAX_REDRAWS {
        let i = rng.random_range(0..clean_db.len());
        let mut j = rng.random_range(0..clean_db.len());
        while clean_db[j].source_id() == clean_db[i].source_id() {
            j = rng.random_range(0..clean_db.len());
        }
        let s_i = draw_excerpt(rng, &clean_db[i], len)?;
        let s_j = draw_excerpt(rng, &clean_db[j], len)?;

        let (x_i, x_j, snr, spec_i, spec_j, category) = if kind.is_additive() {
            let (n_i, n_j, noise_id) = if kind == DegradationKind::AdditiveNoise {
                let nw = &noise_db[rng.random_range(0..noise_db.len())];
                (draw_noise(rng, nw, len), draw_noise(rng, nw, len), Some(nw.source_id().to_string()))
            } else {
                let seed = rng.random::<u64>();
                (white_noise(len, seed), white_noise(len, seed ^ 0x9E37_79B9), None)
            };
            let t_i = rng.random_range(SNR_RANGE.0..SNR_RANGE.1);
            let t_j = rng.random_range(SNR_RANGE.0..SNR_RANGE.1);
            let mix = |s: &Waveform, n: Vec<f64>, t: f64| -> Result<Waveform> {
                let (g, n) = noise_gain(s.samples(), n, t)?;
                s.with_samples(s.samples().iter().zip(&n).map(|(a, b)| a + g * b).collect())
            };
            let x_i = mix(&s_i, n_i, t_i)?;
            let x_j = mix(&s_j, n_j, t_j)?;
            let spec = |t| DegradationSpec { kind, level: t, rir_id: None, noise_id: noise_id.clone(), band_hz: None };
            (x_i, x_j, Some((t_i, t_j)), spec(t_i), spec(t_j), Category::Additive)
        } else {
            let center = rng.random_range(200.0..4000.0);
            let mut degrade = |s: &Waveform| -> Result<Option<(Waveform, DegradationSpec)>> {
                let target = rng.random_range(SDR_RANGE.0..SDR_RANGE.1);
                let cal = calibrate_level_at(kind, target, s, center)?;
                if !(SDR_RANGE.0..=SDR_RANGE.1).contains(&cal.achieved_sdr) {
                    return Ok(None);
                }
                let x = apply_manipulation(kind, cal.level, s, center)?;
                let band_hz = (kind == DegradationKind::FrequencyMask)
                    .then(|| mask_band(cal.level, center, rate as f64 / 2.0));
                Ok(Some((x, DegradationSpec { kind, level: cal.level, rir_id: None, noise_id: None, band_hz })))
            };
            let (Some((x_i, spec_i)), Some((x_j, spec_j))) = (degrade(&s_i)?, degrade(&s_j)?) else {
                continue;
            };
            (x_i, x_j, None, spec_i, spec_j, Category::Manipulation)
        };

        let measured_i = sdr_or_floor(s_i.samples(), x_i.samples())?;
        let measured_j = sdr_or_floor(s_j.samples(), x_j.samples())?;
        if measured_i == measured_j {
            continue;
        }
        let (snr_i, snr_j) = match snr {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        let mut sample = PairSample {
            x_i,
            x_j,
            clean_i: s_i,
            clean_j: s_j,
            snr_i,
            snr_j,
            sdr_i: measured_i.clamp(SDR_RANGE.0, SDR_RANGE.1),
            sdr_j: measured_j.clamp(SDR_RANGE.0, SDR_RANGE.1),
            measured_sdr_i: measured_i,
            measured_sdr_j: measured_j,
            category,
            spec_i,
            spec_j,
        };
        if !rir_db.is_empty() {
            for (x, spec) in [(&mut sample.x_i, &mut sample.spec_i), (&mut sample.x_j, &mut sample.spec_j)] {
                if rng.random_bool(cfg.reverb_prob) {
                    let rir = &rir_db[rng.random_range(0..rir_db.len())];
                    *x = convolve_rir(x, rir)?;
                    spec.rir_id = Some(rir.source_id().to_string());
                }
            }
        }
        return Ok(sample);
    }
    Err(Error::InsufficientItems(format!("no valid {kind:?} pair after {MAX_REDRAWS} draws")))
}

/// One line of a persisted dataset's `labels.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub index: usize,
    pub path_i: PathBuf,
    pub path_j: PathBuf,
    pub source_i: String,
    pub source_j: String,
    pub snr_i: Option<f64>,
    pub snr_j: Option<f64>,
    pub sdr_i: f64,
    pub sdr_j: f64,
    pub measured_sdr_i: f64,
    pub measured_sdr_j: f64,
    pub category: Category,
    pub spec_i: DegradationSpec,
    pub spec_j: DegradationSpec,
}

impl PairRecord {
    pub fn new(index: usize, path_i: PathBuf, path_j: PathBuf, p: &PairSample) -> Self {
        Self {
            index,
            path_i,
            path_j,
            source_i: p.clean_i.source_id().to_string(),
            source_j: p.clean_j.source_id().to_string(),
            snr_i: p.snr_i,
            snr_j: p.snr_j,
            sdr_i: p.sdr_i,
            sdr_j: p.sdr_j,
            measured_sdr_i: p.measured_sdr_i,
            measured_sdr_j: p.measured_sdr_j,
            category: p.category,
            spec_i: p.spec_i.clone(),
            spec_j: p.spec_j.clone(),
        }
    }
}

/// Generates `count` pairs into `dir` as `pair{n}_i.wav` / `pair{n}_j.wav`
/// plus `labels.jsonl`. Pair `n` depends only on `(cfg.seed, n)`.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    count: usize,
    clean_db: &[Waveform],
    noise_db: &[Waveform],
    rir_db: &[Waveform],
    cfg: &SamplerConfig,
) -> Result<Vec<PairRecord>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(count);
    let mut labels = BufWriter::new(fs::File::create(dir.join("labels.jsonl"))?);
    for n in 0..count {
        let mut rng = pair_rng(cfg.seed, n as u64);
        let p = sample_training_pair(&mut rng, clean_db, noise_db, rir_db, cfg)?;
        let (a, b) = (PathBuf::from(format!("pair{n}_i.wav")), PathBuf::from(format!("pair{n}_j.wav")));
        save_wav(dir.join(&a), &p.x_i)?;
        save_wav(dir.join(&b), &p.x_j)?;
        let rec = PairRecord::new(n, a, b, &p);
        serde_json::to_writer(&mut labels, &rec)?;
        labels.write_all(b"\n")?;
        records.push(rec);
    }
    labels.flush()?;
    Ok(records)
}
