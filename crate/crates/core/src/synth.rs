//! Synthetic corpus for desk-scale training and evaluation.
//!
//! "Clean" sources are harmonic tones with a syllable-rate envelope, slow
//! pitch drift and a faint low-passed noise bed. Noise recordings are white,
//! pink, or babble-like (a few detuned harmonic voices plus hiss).

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio_io::{save_wav, write_manifest, ManifestEntry, Role, Waveform, CANONICAL_RATE};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub clean_sources: usize,
    pub clean_s: f64,
    /// Recordings per noise type.
    pub noise_per_type: usize,
    pub noise_s: f64,
    pub rirs: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { clean_sources: 10, clean_s: 8.0, noise_per_type: 2, noise_s: 8.0, rirs: 2, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseType {
    White,
    Pink,
    Babble,
}

impl NoiseType {
    pub const ALL: [NoiseType; 3] = [Self::White, Self::Pink, Self::Babble];

    pub fn name(self) -> &'static str {
        match self {
            Self::White => "white",
            Self::Pink => "pink",
            Self::Babble => "babble",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub clean: Vec<Waveform>,
    pub noise: Vec<Waveform>,
    pub rirs: Vec<Waveform>,
}

fn normalize_peak(x: &mut [f64], peak: f64) {
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
}

fn gaussian(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// One-pole low-pass with cutoff `fc`.
fn lowpass(x: &mut [f64], fc: f64, rate: f64) {
    let a = (-2.0 * PI * fc / rate).exp();
    let mut y = 0.0;
    for v in x.iter_mut() {
        y = (1.0 - a) * *v + a * y;
        *v = y;
    }
}

/// Harmonic voice: partials of a drifting fundamental under a syllable envelope.
fn voice(rng: &mut ChaCha8Rng, len: usize, rate: f64) -> Vec<f64> {
    let f0 = rng.random_range(100.0..280.0);
    let drift_rate = rng.random_range(0.1..0.5);
    let drift_depth = rng.random_range(0.02..0.08);
    let syllable = rng.random_range(2.5..6.0);
    let env_phase = rng.random_range(0.0..2.0 * PI);
    let partials = ((3800.0 / f0) as usize).max(3);
    let tilt = rng.random_range(0.6..1.4);
    let amps: Vec<f64> = (1..=partials)
        .map(|h| rng.random_range(0.5..1.0) / (h as f64).powf(tilt))
        .collect();
    let phases: Vec<f64> = (0..partials).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(len);
    for n in 0..len {
        let t = n as f64 / rate;
        let f = f0 * (1.0 + drift_depth * (2.0 * PI * drift_rate * t).sin());
        phase += 2.0 * PI * f / rate;
        let env = (0.5 + 0.5 * (2.0 * PI * syllable * t + env_phase).sin()).powf(1.5);
        let s: f64 = amps
            .iter()
            .zip(&phases)
            .enumerate()
            .map(|(h, (a, p))| a * ((h + 1) as f64 * phase + p).sin())
            .sum();
        out.push((0.1 + 0.9 * env) * s);
    }
    out
}

pub fn clean_source(rng: &mut ChaCha8Rng, len: usize, rate: u32) -> Vec<f64> {
    let r = rate as f64;
    let mut x = voice(rng, len, r);
    let p = (x.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    let mut bed = gaussian(rng, len);
    lowpass(&mut bed, rng.random_range(300.0..900.0), r);
    let q = (bed.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    let level = p * 10f64.powf(-rng.random_range(25.0..35.0) / 20.0) / q;
    x.iter_mut().zip(&bed).for_each(|(a, b)| *a += level * b);
    normalize_peak(&mut x, 0.5);
    x
}

pub fn noise_recording(kind: NoiseType, rng: &mut ChaCha8Rng, len: usize, rate: u32) -> Vec<f64> {
    let r = rate as f64;
    let mut x = match kind {
        NoiseType::White => gaussian(rng, len),
        NoiseType::Pink => {
            // Sum of octave-spaced one-pole low-passed white noises.
            let mut acc = vec![0.0; len];
            let mut fc = 40.0;
            while fc < r / 2.0 {
                let mut band = gaussian(rng, len);
                lowpass(&mut band, fc, r);
                let g = (fc / 40.0f64).sqrt().recip() * (2.0 * PI * fc / r).sqrt().recip();
                acc.iter_mut().zip(&band).for_each(|(a, b)| *a += g * b);
                fc *= 2.0;
            }
            acc
        }
        NoiseType::Babble => {
            let mut acc = vec![0.0; len];
            for _ in 0..rng.random_range(4..8) {
                let v = voice(rng, len, r);
                acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
            }
            let mut hiss = gaussian(rng, len);
            lowpass(&mut hiss, 2000.0, r);
            acc.iter_mut().zip(&hiss).for_each(|(a, b)| *a += 0.3 * b);
            acc
        }
    };
    normalize_peak(&mut x, 0.5);
    x
}

/// Exponentially decaying noise tail after a unit direct path.
pub fn synthetic_rir(rng: &mut ChaCha8Rng, rate: u32) -> Vec<f64> {
    let rt60 = rng.random_range(0.15..0.5);
    let len = (rt60 * rate as f64) as usize;
    let decay = 6.9 / (rt60 * rate as f64);
    let mut h: Vec<f64> = gaussian(rng, len)
        .into_iter()
        .enumerate()
        .map(|(n, v)| 0.3 * v * (-decay * n as f64).exp())
        .collect();
    h[0] = 1.0;
    h
}

pub fn generate(cfg: &CorpusConfig) -> Result<Corpus> {
    let rate = CANONICAL_RATE;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clean_len = (cfg.clean_s * rate as f64) as usize;
    let noise_len = (cfg.noise_s * rate as f64) as usize;
    let clean = (0..cfg.clean_sources)
        .map(|k| Waveform::new(clean_source(&mut rng, clean_len, rate), rate, format!("clean{:03}-s{}", k, cfg.seed)))
        .collect::<Result<Vec<_>>>()?;
    let mut noise = Vec::new();
    for kind in NoiseType::ALL {
        for k in 0..cfg.noise_per_type {
            let x = noise_recording(kind, &mut rng, noise_len, rate);
            noise.push(Waveform::new(x, rate, format!("{}{:02}-s{}", kind.name(), k, cfg.seed))?);
        }
    }
    let rirs = (0..cfg.rirs)
        .map(|k| Waveform::new(synthetic_rir(&mut rng, rate), rate, format!("rir{k:02}-s{}", cfg.seed)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { clean, noise, rirs })
}

/// Writes WAV files under `dir/{clean,noise,rir}/` plus one manifest per role.
pub fn write_corpus(dir: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let dir = dir.as_ref();
    for (role, name, items) in [
        (Role::Clean, "clean", &corpus.clean),
        (Role::Noise, "noise", &corpus.noise),
        (Role::Rir, "rir", &corpus.rirs),
    ] {
        let sub = dir.join(name);
        fs::create_dir_all(&sub)?;
        let mut entries = Vec::new();
        for w in items {
            let path = sub.join(format!("{}.wav", w.source_id()));
            save_wav(&path, w)?;
            entries.push(ManifestEntry { path, role, duration_s: w.duration_s() });
        }
        write_manifest(dir.join(format!("{name}.jsonl")), &entries)?;
    }
    Ok(())
}
