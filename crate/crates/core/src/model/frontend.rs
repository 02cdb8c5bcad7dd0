//! Waveform to network input, with a backward pass for input gradients.
//!
//! Waveforms are RMS-normalised before analysis so the network sees level
//! differences only through the content of the spectrogram, never through
//! the absolute gain of a recording.

use crate::dsp::{stft_complex, ComplexStft, Spectrogram, StftConfig};
use crate::error::{Error, Result};

const RMS_EPS: f64 = 1e-10;

/// Spectrogram of a normalised waveform together with what its backward
/// pass needs.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub spec: Spectrogram,
    stft: ComplexStft,
    samples: Vec<f64>,
    rms: f64,
    sample_rate: u32,
    config: StftConfig,
}

pub fn analyze(samples: &[f64], sample_rate: u32, config: &StftConfig) -> Result<Analysis> {
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidWaveform("non-finite sample".into()));
    }
    let n = samples.len().max(1) as f64;
    let rms = (samples.iter().map(|v| v * v).sum::<f64>() / n + RMS_EPS).sqrt();
    let normalized: Vec<f64> = samples.iter().map(|v| v / rms).collect();
    let stft = stft_complex(&normalized, sample_rate, config)?;
    Ok(Analysis {
        spec: stft.to_spectrogram(*config),
        stft,
        samples: samples.to_vec(),
        rms,
        sample_rate,
        config: *config,
    })
}

impl Analysis {
    /// Gradient with respect to the raw samples, given one on `spec.data()`.
    pub fn backward(&self, grad_spec: &[f64]) -> Result<Vec<f64>> {
        let gy = self
            .stft
            .backward(grad_spec, self.samples.len(), self.sample_rate, &self.config)?;
        let n = self.samples.len() as f64;
        let r = self.rms;
        let proj: f64 = self.samples.iter().zip(&gy).map(|(x, g)| x * g).sum();
        let k = proj / (n * r * r * r);
        Ok(self.samples.iter().zip(&gy).map(|(x, g)| g / r - x * k).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gain_does_not_change_the_spectrogram() {
        let x: Vec<f64> = (0..4000).map(|i| (i as f64 * 0.07).sin() + 0.1 * (i as f64 * 0.9).cos()).collect();
        let y: Vec<f64> = x.iter().map(|v| v * 7.5).collect();
        let cfg = StftConfig::default();
        let a = analyze(&x, 16000, &cfg).unwrap();
        let b = analyze(&y, 16000, &cfg).unwrap();
        for (p, q) in a.spec.magnitude().iter().zip(b.spec.magnitude()) {
            assert!((p - q).abs() < 1e-8 * (1.0 + p.abs()));
        }
    }

    #[test]
    fn silence_is_finite() {
        let a = analyze(&vec![0.0; 1024], 16000, &StftConfig::default()).unwrap();
        assert!(a.spec.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x: Vec<f64> = (0..1024).map(|i| ((i * 37 % 101) as f64 / 50.0 - 1.0) + (i as f64 * 0.2).sin()).collect();
        let cfg = StftConfig::default();
        let weights: Vec<f64> = (0..2 * 3 * 256).map(|i| ((i * 13 % 7) as f64 - 3.0) / 3.0).collect();
        let loss = |x: &[f64]| -> f64 {
            let a = analyze(x, 16000, &cfg).unwrap();
            a.spec.data().iter().zip(&weights).enumerate().map(|(i, (v, w))| {
                // Phase enters only through a smooth function to avoid wrap jumps.
                if i >= 3 * 256 { w * v.sin() } else { w * v }
            }).sum()
        };
        let a = analyze(&x, 16000, &cfg).unwrap();
        let tf = 3 * 256;
        let grad_spec: Vec<f64> = a
            .spec
            .data()
            .iter()
            .zip(&weights)
            .enumerate()
            .map(|(i, (v, w))| if i >= tf { w * v.cos() } else { *w })
            .collect();
        let g = a.backward(&grad_spec).unwrap();
        let h = 1e-6;
        for &i in &[0usize, 5, 100, 300, 511, 700, 1023] {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * (1.0 + fd.abs()), "i={i} fd={fd} an={}", g[i]);
        }
    }
}
