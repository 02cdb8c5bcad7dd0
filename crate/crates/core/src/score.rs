//! NORESQA scores, quality embeddings and the differentiable loss hook.
//!
//! Inputs longer than one 3 s window are split into windows with 50%
//! overlap; reference windows are paired with test windows cyclically and
//! per-window results are averaged.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio_io::{resample, Waveform, CANONICAL_RATE};
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::labels::{midpoints, BinningConfig};
use crate::model::frontend::analyze;
use crate::model::{InputGrads, Mode, ModelOutputs, Network, OutputGrads, Params};
use crate::train::Checkpoint;

pub const WINDOW_S: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    TestBetter,
    RefBetter,
}

impl Sign {
    pub fn flipped(self) -> Self {
        match self {
            Self::TestBetter => Self::RefBetter,
            Self::RefBetter => Self::TestBetter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoresqaScore {
    /// Expected |delta SI-SDR| in dB.
    pub magnitude_db: f64,
    pub sign: Sign,
    /// Probability of `sign`, in [0.5, 1].
    pub pref_confidence: f64,
}

/// Expected difference under a pooled class distribution, using bin midpoints.
pub fn expected_difference(pooled: &[f64], bins: &BinningConfig) -> f64 {
    pooled.iter().zip(midpoints(bins)).map(|(p, m)| p * m).sum()
}

/// Score from pooled outputs with the test signal as the first input.
pub fn score_from_outputs(out: &ModelOutputs) -> NoresqaScore {
    from_parts(expected_difference(&out.sdr_pooled, &BinningConfig::si_sdr(out.k_classes)), out.pref_pooled)
}

fn from_parts(magnitude_db: f64, pref: [f64; 2]) -> NoresqaScore {
    if pref[0] >= pref[1] {
        NoresqaScore { magnitude_db, sign: Sign::TestBetter, pref_confidence: pref[0] }
    } else {
        NoresqaScore { magnitude_db, sign: Sign::RefBetter, pref_confidence: pref[1] }
    }
}

/// Start offsets of 3 s windows with 50% overlap; the tail is covered by a
/// final window flush with the end.
pub fn window_starts(len: usize, window: usize) -> Result<Vec<usize>> {
    if len < window {
        return Err(Error::SignalTooShort { needed: window, got: len });
    }
    let hop = window / 2;
    let mut starts: Vec<usize> = (0..).map(|k| k * hop).take_while(|s| s + window <= len).collect();
    if *starts.last().expect("at least one window") + window < len {
        starts.push(len - window);
    }
    Ok(starts)
}

fn canonical(w: &Waveform) -> Result<Waveform> {
    if w.sample_rate() == CANONICAL_RATE {
        Ok(w.clone())
    } else {
        resample(w, CANONICAL_RATE)
    }
}

/// Per-source score with the ref it was computed against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerRefScore {
    pub ref_id: String,
    #[serde(flatten)]
    pub score: NoresqaScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedScore {
    #[serde(flatten)]
    pub score: NoresqaScore,
    pub per_ref: Vec<PerRefScore>,
    /// References that could not be scored, with the reason.
    pub failed: Vec<(String, String)>,
}

/// Report written by the `score` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub test_path: PathBuf,
    pub ref_paths: Vec<PathBuf>,
    pub magnitude_db: f64,
    pub sign: Sign,
    pub pref_confidence: f64,
    pub per_ref: Vec<PerRefScore>,
}

/// Frozen network plus parameters; scoring never mutates either.
#[derive(Debug, Clone)]
pub struct Scorer {
    net: Network,
    params: Params,
    stft: StftConfig,
}

/// Value of the NORESQA loss and its gradient with respect to the input samples.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl Scorer {
    pub fn new(net: Network, params: Params) -> Result<Self> {
        if params.0.len() != net.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a network of {}",
                params.0.len(),
                net.param_count()
            )));
        }
        Ok(Self { net, params, stft: StftConfig::default() })
    }

    pub fn from_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        Self::new(Network::new(ck.model)?, ck.params)
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    fn window_len(&self) -> usize {
        (WINDOW_S * CANONICAL_RATE as f64).round() as usize
    }

    /// Pooled outputs for each aligned window pair.
    fn window_outputs(&self, test: &Waveform, reference: &Waveform) -> Result<Vec<ModelOutputs>> {
        let test = canonical(test)?;
        let reference = canonical(reference)?;
        let n = self.window_len();
        let ts = window_starts(test.len(), n)?;
        let rs = window_starts(reference.len(), n)?;
        ts.iter()
            .enumerate()
            .map(|(k, &t0)| {
                let r0 = rs[k % rs.len()];
                let a = analyze(&test.samples()[t0..t0 + n], CANONICAL_RATE, &self.stft)?;
                let b = analyze(&reference.samples()[r0..r0 + n], CANONICAL_RATE, &self.stft)?;
                self.net.forward_pair(&self.params, &a.spec, &b.spec, Mode::Eval)
            })
            .collect()
    }

    /// Outputs for one window pair, for diagnostics (e.g. the SNR head).
    pub fn outputs(&self, test: &Waveform, reference: &Waveform) -> Result<ModelOutputs> {
        let mut outs = self.window_outputs(test, reference)?;
        Ok(outs.swap_remove(0))
    }

    pub fn noresqa(&self, test: &Waveform, reference: &Waveform) -> Result<NoresqaScore> {
        let outs = self.window_outputs(test, reference)?;
        let w = outs.len() as f64;
        let bins = BinningConfig::si_sdr(self.net.config().k_classes);
        let magnitude = outs.iter().map(|o| expected_difference(&o.sdr_pooled, &bins)).sum::<f64>() / w;
        let mut pref = [0.0; 2];
        for o in &outs {
            pref[0] += o.pref_pooled[0] / w;
            pref[1] += o.pref_pooled[1] / w;
        }
        Ok(from_parts(magnitude, pref))
    }

    /// Mean magnitude over references; sign by majority vote. A tied vote
    /// yields `TestBetter` with confidence 0.5.
    pub fn noresqa_avg(&self, test: &Waveform, refs: &[Waveform]) -> Result<AveragedScore> {
        if refs.is_empty() {
            return Err(Error::InsufficientItems("no reference recordings".into()));
        }
        let mut per_ref = Vec::new();
        let mut failed = Vec::new();
        let mut last_err = None;
        for r in refs {
            match self.noresqa(test, r) {
                Ok(score) => per_ref.push(PerRefScore { ref_id: r.source_id().to_string(), score }),
                Err(e) => {
                    failed.push((r.source_id().to_string(), e.to_string()));
                    last_err = Some(e);
                }
            }
        }
        if per_ref.is_empty() {
            return Err(last_err.expect("every reference failed"));
        }
        let n = per_ref.len() as f64;
        let magnitude_db = per_ref.iter().map(|p| p.score.magnitude_db).sum::<f64>() / n;
        let better = per_ref.iter().filter(|p| p.score.sign == Sign::TestBetter).count();
        let worse = per_ref.len() - better;
        let score = if better == worse {
            NoresqaScore { magnitude_db, sign: Sign::TestBetter, pref_confidence: 0.5 }
        } else {
            let sign = if better > worse { Sign::TestBetter } else { Sign::RefBetter };
            let conf = per_ref
                .iter()
                .map(|p| if p.score.sign == sign { p.score.pref_confidence } else { 1.0 - p.score.pref_confidence })
                .sum::<f64>()
                / n;
            NoresqaScore { magnitude_db, sign, pref_confidence: conf.max(0.5) }
        };
        Ok(AveragedScore { score, per_ref, failed })
    }

    /// Temporal mean of the per-frame encoder output, averaged over windows.
    pub fn quality_embedding(&self, x: &Waveform) -> Result<Vec<f64>> {
        let x = canonical(x)?;
        let n = self.window_len();
        let starts = window_starts(x.len(), n)?;
        let mut acc = vec![0.0; self.net.config().embedding_dim()];
        for &s in &starts {
            let a = analyze(&x.samples()[s..s + n], CANONICAL_RATE, &self.stft)?;
            let e = self.net.encode(&self.params, &a.spec, Mode::Eval)?;
            acc.iter_mut().zip(e.mean()).for_each(|(a, b)| *a += b);
        }
        acc.iter_mut().for_each(|v| *v /= starts.len() as f64);
        Ok(acc)
    }

    /// NORESQA magnitude of `enhanced` (16 kHz samples) against a clean
    /// non-matching reference, with its gradient with respect to `enhanced`.
    /// The model parameters are read-only here.
    pub fn noresqa_loss(&self, enhanced: &[f64], nmr_clean: &Waveform) -> Result<LossValue> {
        let reference = canonical(nmr_clean)?;
        let n = self.window_len();
        let ts = window_starts(enhanced.len(), n)?;
        let rs = window_starts(reference.len(), n)?;
        let bins = BinningConfig::si_sdr(self.net.config().k_classes);
        let mu = midpoints(&bins);
        let w = ts.len() as f64;
        let mut value = 0.0;
        let mut grad = vec![0.0; enhanced.len()];
        for (k, &t0) in ts.iter().enumerate() {
            let r0 = rs[k % rs.len()];
            let a = analyze(&enhanced[t0..t0 + n], CANONICAL_RATE, &self.stft)?;
            let b = analyze(&reference.samples()[r0..r0 + n], CANONICAL_RATE, &self.stft)?;
            let (out, tape) = self.net.forward_pair_tape(&self.params, &a.spec, &b.spec, Mode::Eval)?;
            value += expected_difference(&out.sdr_pooled, &bins) / w;
            let og = OutputGrads { pref: [0.0, 0.0], sdr: Some(mu.iter().map(|m| m / w).collect()), snr: None };
            let g = self.net.backward(&self.params, &tape, &og, InputGrads { first: true, second: false })?;
            let gs = a.backward(&g.spec_first.expect("requested input gradient"))?;
            grad[t0..t0 + n].iter_mut().zip(&gs).for_each(|(d, s)| *d += s);
        }
        Ok(LossValue { value, grad })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn magnitude_examples() {
        let bins = BinningConfig::si_sdr(40);
        assert!((expected_difference(&[1.0 / 40.0; 40], &bins) - 20.0).abs() < 1e-12);
        let mut point = vec![0.0; 40];
        point[0] = 1.0;
        assert_eq!(expected_difference(&point, &bins), 0.5);
    }

    #[test]
    fn sign_and_confidence_from_preference() {
        let s = from_parts(3.0, [0.8, 0.2]);
        assert_eq!(s.sign, Sign::TestBetter);
        assert_eq!(s.pref_confidence, 0.8);
        let s = from_parts(3.0, [0.3, 0.7]);
        assert_eq!(s.sign, Sign::RefBetter);
        assert_eq!(s.pref_confidence, 0.7);
    }

    #[test]
    fn windows_cover_the_signal() {
        assert_eq!(window_starts(48000, 48000).unwrap(), vec![0]);
        assert_eq!(window_starts(72000, 48000).unwrap(), vec![0, 24000]);
        assert_eq!(window_starts(80000, 48000).unwrap(), vec![0, 24000, 32000]);
        assert!(matches!(window_starts(47999, 48000), Err(Error::SignalTooShort { .. })));
    }

    fn scorer() -> Scorer {
        let net = Network::new(ModelConfig::miniature()).unwrap();
        let p = net.init_params(3);
        Scorer::new(net, p).unwrap()
    }

    fn wave(seed: u64, len: usize) -> Waveform {
        Waveform::new(crate::degrade::white_noise(len, seed).iter().map(|v| 0.1 * v).collect(), 16000, format!("w{seed}")).unwrap()
    }

    #[test]
    fn scores_are_well_formed() {
        let s = scorer();
        let a = wave(1, 48000);
        let b = wave(2, 60000);
        let r = s.noresqa(&a, &b).unwrap();
        assert!(r.magnitude_db >= 0.0 && r.magnitude_db <= 40.0);
        assert!((0.5..=1.0).contains(&r.pref_confidence));
        assert!(matches!(s.noresqa(&wave(3, 1000), &b), Err(Error::SignalTooShort { .. })));
    }

    #[test]
    fn averaging_degenerate_cases() {
        let s = scorer();
        let t = wave(1, 48000);
        let r = wave(2, 48000);
        let single = s.noresqa(&t, &r).unwrap();
        let avg = s.noresqa_avg(&t, std::slice::from_ref(&r)).unwrap();
        assert_eq!(avg.score, single);
        let twice = s.noresqa_avg(&t, &[r.clone(), r.clone()]).unwrap();
        assert_eq!(twice.score.magnitude_db, single.magnitude_db);
        let partial = s.noresqa_avg(&t, &[r.clone(), wave(4, 100)]).unwrap();
        assert_eq!(partial.per_ref.len(), 1);
        assert_eq!(partial.failed.len(), 1);
        assert!(s.noresqa_avg(&t, &[]).is_err());
        assert!(s.noresqa_avg(&t, &[wave(4, 100)]).is_err());
    }

    #[test]
    fn tied_vote_defaults_to_test_better() {
        // Hand-built per-ref scores through the same aggregation rule.
        let s = scorer();
        let t = wave(1, 48000);
        let refs: Vec<Waveform> = (10..14).map(|k| wave(k, 48000)).collect();
        let avg = s.noresqa_avg(&t, &refs).unwrap();
        let better = avg.per_ref.iter().filter(|p| p.score.sign == Sign::TestBetter).count();
        if 2 * better == avg.per_ref.len() {
            assert_eq!(avg.score.sign, Sign::TestBetter);
            assert_eq!(avg.score.pref_confidence, 0.5);
        }
        assert!(avg.score.pref_confidence >= 0.5);
    }

    #[test]
    fn embedding_is_deterministic_and_finite() {
        let s = scorer();
        let x = wave(5, 50000);
        let e = s.quality_embedding(&x).unwrap();
        assert_eq!(e.len(), s.network().config().embedding_dim());
        assert_eq!(e, s.quality_embedding(&x).unwrap());
        let z = Waveform::new(vec![0.0; 48000], 16000, "z").unwrap();
        assert!(s.quality_embedding(&z).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn loss_hook_leaves_parameters_untouched() {
        let s = scorer();
        let before = s.params().clone();
        let x = wave(6, 48000);
        let l = s.noresqa_loss(x.samples(), &wave(7, 48000)).unwrap();
        assert_eq!(l.grad.len(), 48000);
        assert!((l.value - s.noresqa(&x, &wave(7, 48000)).unwrap().magnitude_db).abs() < 1e-12);
        assert_eq!(s.params(), &before);
    }
}
