//! Evaluation harness: correlations, 2AFC accuracy, retrieval precision and
//! the property checks run against a trained checkpoint.
//!
//! External MOS datasets are not bundled. Every benchmark here is generated
//! from the synthetic corpus with known ground truth, while `RatedItem` and
//! `TwoAfcItem` manifests let real data be plugged in.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio_io::{load_canonical, Waveform};
use crate::degrade::{add_noise_at_snr, pair_rng, sample_training_pair, SamplerConfig, SDR_RANGE};
use crate::dsp::si_sdr_clamped;
use crate::error::{Error, Result};
use crate::score::{Scorer, Sign};
use crate::synth::{generate, Corpus, CorpusConfig, NoiseType};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatedItem {
    pub path: PathBuf,
    pub predicted: f64,
    pub reference_rating: f64,
}

fn check_pairs(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(Error::InsufficientItems(format!("correlation needs at least 3 items, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("non-finite rating".into()));
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pairs(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateVariance("first coordinate is constant"));
    }
    if syy == 0.0 {
        return Err(Error::DegenerateVariance("second coordinate is constant"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based fractional ranks; tied values share the average of their ranks.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pairs(x, y)?;
    pearson(&ranks(x), &ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub n: usize,
    pub pearson: f64,
    pub spearman: f64,
}

pub fn correlate(items: &[RatedItem]) -> Result<CorrelationReport> {
    let x: Vec<f64> = items.iter().map(|i| i.predicted).collect();
    let y: Vec<f64> = items.iter().map(|i| i.reference_rating).collect();
    Ok(CorrelationReport { n: items.len(), pearson: pearson(&x, &y)?, spearman: spearman(&x, &y)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoAfcItem {
    pub reference: PathBuf,
    pub candidate_a: PathBuf,
    pub candidate_b: PathBuf,
    pub human_choice: Choice,
}

/// An in-memory triplet.
#[derive(Debug, Clone)]
pub struct AfcTriplet {
    pub reference: Waveform,
    pub candidate_a: Waveform,
    pub candidate_b: Waveform,
    pub human_choice: Choice,
}

/// The metric picks the candidate whose magnitude against the reference is
/// smaller. Equal magnitudes are never counted as agreement.
pub fn afc_agrees(mag_a: f64, mag_b: f64, human: Choice) -> bool {
    match human {
        Choice::A => mag_a < mag_b,
        Choice::B => mag_b < mag_a,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoAfcReport {
    pub accuracy: f64,
    pub correct: usize,
    pub scored: usize,
    pub dropped: Vec<(usize, String)>,
}

fn afc_report(outcomes: Vec<Result<bool>>) -> Result<TwoAfcReport> {
    if outcomes.is_empty() {
        return Err(Error::InsufficientItems("2AFC needs at least one item".into()));
    }
    let mut correct = 0;
    let mut scored = 0;
    let mut dropped = Vec::new();
    for (k, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(c) => {
                scored += 1;
                correct += c as usize;
            }
            Err(e) => dropped.push((k, e.to_string())),
        }
    }
    if scored == 0 {
        return Err(Error::InsufficientItems("every 2AFC item failed to score".into()));
    }
    Ok(TwoAfcReport { accuracy: correct as f64 / scored as f64, correct, scored, dropped })
}

pub fn two_afc_triplets(triplets: &[AfcTriplet], scorer: &Scorer) -> Result<TwoAfcReport> {
    afc_report(
        triplets
            .iter()
            .map(|t| {
                let a = scorer.noresqa(&t.candidate_a, &t.reference)?.magnitude_db;
                let b = scorer.noresqa(&t.candidate_b, &t.reference)?.magnitude_db;
                Ok(afc_agrees(a, b, t.human_choice))
            })
            .collect(),
    )
}

pub fn two_afc_accuracy(items: &[TwoAfcItem], scorer: &Scorer) -> Result<TwoAfcReport> {
    afc_report(
        items
            .iter()
            .map(|it| {
                let t = AfcTriplet {
                    reference: load_canonical(&it.reference)?,
                    candidate_a: load_canonical(&it.candidate_a)?,
                    candidate_b: load_canonical(&it.candidate_b)?,
                    human_choice: it.human_choice,
                };
                let a = scorer.noresqa(&t.candidate_a, &t.reference)?.magnitude_db;
                let b = scorer.noresqa(&t.candidate_b, &t.reference)?.magnitude_db;
                Ok(afc_agrees(a, b, t.human_choice))
            })
            .collect(),
    )
}

/// Mean precision@K of Euclidean nearest-neighbour retrieval, each item
/// querying all others. Every level needs more than `k` members so that a
/// query can in principle retrieve `k` items of its own level.
pub fn precision_at_k(items: &[(Vec<f64>, usize)], k: usize) -> Result<f64> {
    if k == 0 || items.is_empty() {
        return Err(Error::InsufficientItems("retrieval needs K ≥ 1 and a non-empty set".into()));
    }
    let mut counts = std::collections::BTreeMap::new();
    for (_, l) in items {
        *counts.entry(*l).or_insert(0usize) += 1;
    }
    if let Some((l, c)) = counts.iter().find(|(_, c)| **c <= k) {
        return Err(Error::InsufficientItems(format!("level {l} has {c} items, need more than {k}")));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut total = 0.0;
    for (q, (eq, lq)) in items.iter().enumerate() {
        let mut d: Vec<(f64, usize)> = items
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != q)
            .map(|(_, (e, l))| (dist(eq, e), *l))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0));
        total += d[..k].iter().filter(|(_, l)| l == lq).count() as f64 / k as f64;
    }
    Ok(total / items.len() as f64)
}

/// Synthetic benchmark settings shared by the property checks and probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    /// Held-out corpus; its seed should differ from the training corpus.
    pub corpus: CorpusConfig,
    /// Pair sampler for the commutativity and identicals checks.
    pub sampler: SamplerConfig,
    pub commutativity_pairs: usize,
    pub confident_threshold: f64,
    pub identicals: usize,
    /// SNRs in decreasing order, i.e. increasing noise.
    pub monotonic_snrs: Vec<f64>,
    pub curve_edges: Vec<f64>,
    pub curve_pairs_per_bin: usize,
    pub retrieval_snrs: Vec<f64>,
    /// Noise type defining the retrieval levels.
    pub retrieval_noise: NoiseType,
    pub retrieval_per_level: usize,
    pub retrieval_k: usize,
    pub afc_triplets: usize,
    pub afc_min_gap_db: f64,
    pub variance_trials: usize,
    pub variance_refs: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig { seed: 1, ..CorpusConfig::default() },
            sampler: SamplerConfig {
                kind_weights: [(crate::degrade::DegradationKind::AdditiveNoise, 1.0)].into(),
                seed: 101,
                ..SamplerConfig::default()
            },
            commutativity_pairs: 200,
            confident_threshold: 0.7,
            identicals: 100,
            monotonic_snrs: vec![25.0, 20.0, 15.0, 10.0, 5.0, 0.0, -5.0, -10.0],
            curve_edges: vec![5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            curve_pairs_per_bin: 20,
            retrieval_snrs: (0..10).map(|k| -15.0 + 5.0 * k as f64).collect(),
            retrieval_noise: NoiseType::White,
            retrieval_per_level: 20,
            retrieval_k: 10,
            afc_triplets: 100,
            afc_min_gap_db: 10.0,
            variance_trials: 10,
            variance_refs: 5,
            seed: 2024,
        }
    }
}

/// One pass/fail entry of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub passed: bool,
    pub details: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Check>,
    pub errors: Vec<String>,
    pub passed: bool,
}

impl SuiteReport {
    fn new(suite: &str, results: Vec<Result<Check>>) -> Self {
        let mut checks = Vec::new();
        let mut errors = Vec::new();
        for r in results {
            match r {
                Ok(c) => checks.push(c),
                Err(e) => errors.push(e.to_string()),
            }
        }
        let passed = errors.is_empty() && checks.iter().all(|c| c.passed);
        Self { suite: suite.into(), checks, errors, passed }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Held-out material for the synthetic benchmarks.
pub struct Bench {
    pub cfg: SuiteConfig,
    pub corpus: Corpus,
}

impl Bench {
    pub fn new(cfg: SuiteConfig) -> Result<Self> {
        let corpus = generate(&cfg.corpus)?;
        if corpus.clean.len() < 2 || corpus.noise.is_empty() {
            return Err(Error::InsufficientItems("benchmark corpus needs two clean sources and a noise".into()));
        }
        Ok(Self { cfg, corpus })
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        r.set_stream(stream);
        r
    }

    fn excerpt_len(&self) -> usize {
        (self.cfg.sampler.excerpt_s * crate::audio_io::CANONICAL_RATE as f64).round() as usize
    }

    fn excerpt(&self, rng: &mut ChaCha8Rng, w: &Waveform) -> Result<Waveform> {
        let n = self.excerpt_len();
        if w.len() < n {
            return Err(Error::SignalTooShort { needed: n, got: w.len() });
        }
        w.excerpt(rng.random_range(0..=w.len() - n), n)
    }

    /// `clean` mixed with a random excerpt of noise recording `noise` at `snr`.
    fn noisy(&self, rng: &mut ChaCha8Rng, clean: &Waveform, noise: usize, snr: f64) -> Result<Waveform> {
        let n = self.excerpt(rng, &self.corpus.noise[noise])?;
        add_noise_at_snr(clean, &n, snr)
    }

    pub fn commutativity(&self, scorer: &Scorer) -> Result<Check> {
        let mut within = 0;
        let mut confident = 0;
        let mut flipped = 0;
        let mut gaps = Vec::new();
        let n = self.cfg.commutativity_pairs;
        for k in 0..n {
            let mut rng = pair_rng(self.cfg.sampler.seed, k as u64);
            let p = sample_training_pair(&mut rng, &self.corpus.clean, &self.corpus.noise, &[], &self.cfg.sampler)?;
            let ab = scorer.noresqa(&p.x_i, &p.x_j)?;
            let ba = scorer.noresqa(&p.x_j, &p.x_i)?;
            let gap = (ab.magnitude_db - ba.magnitude_db).abs();
            within += (gap <= 2.0) as usize;
            gaps.push(gap);
            if ab.pref_confidence >= self.cfg.confident_threshold {
                confident += 1;
                flipped += (ba.sign == ab.sign.flipped()) as usize;
            }
        }
        let frac = within as f64 / n as f64;
        let flip = if confident == 0 { 1.0 } else { flipped as f64 / confident as f64 };
        gaps.sort_by(f64::total_cmp);
        Ok(Check {
            name: "commutativity".into(),
            statistic: frac,
            threshold: 0.95,
            passed: frac >= 0.95 && flip >= 0.95,
            details: serde_json::json!({
                "pairs": n,
                "fraction_within_2db": frac,
                "confident_pairs": confident,
                "flip_fraction": flip,
                "median_gap_db": gaps[gaps.len() / 2],
                "max_gap_db": gaps[gaps.len() - 1],
            }),
        })
    }

    pub fn identicals(&self, scorer: &Scorer) -> Result<Check> {
        let mut conf = Vec::new();
        for k in 0..self.cfg.identicals {
            let mut rng = pair_rng(self.cfg.sampler.seed ^ 0x1D, k as u64);
            let p = sample_training_pair(&mut rng, &self.corpus.clean, &self.corpus.noise, &[], &self.cfg.sampler)?;
            conf.push(scorer.noresqa(&p.x_i, &p.x_i)?.pref_confidence);
        }
        let mean = conf.iter().sum::<f64>() / conf.len() as f64;
        Ok(Check {
            name: "identicals".into(),
            statistic: mean,
            threshold: 0.65,
            passed: mean <= 0.65,
            details: serde_json::json!({ "pairs": conf.len(), "max_confidence": conf.iter().cloned().fold(0.0, f64::max) }),
        })
    }

    pub fn monotonicity(&self, scorer: &Scorer) -> Result<Check> {
        let mut rng = self.rng(3);
        let source = self.excerpt(&mut rng, &self.corpus.clean[0])?;
        let nmr = self.excerpt(&mut rng, &self.corpus.clean[1])?;
        let noise = rng.random_range(0..self.corpus.noise.len());
        let mut mags = Vec::new();
        for &snr in &self.cfg.monotonic_snrs {
            let x = self.noisy(&mut rng, &source, noise, snr)?;
            mags.push(scorer.noresqa(&x, &nmr)?.magnitude_db);
        }
        let level: Vec<f64> = (0..mags.len()).map(|k| k as f64).collect();
        let rho = spearman(&level, &mags)?;
        Ok(Check {
            name: "monotonicity".into(),
            statistic: rho,
            threshold: 0.9,
            passed: rho >= 0.9,
            details: serde_json::json!({ "snr_db": self.cfg.monotonic_snrs, "magnitude_db": mags }),
        })
    }

    /// Mean predicted delta per true-delta bin, for the SI-SDR score and the
    /// SNR head. Pairs share a clean source and noise type and are drawn with
    /// SNRs inside the unclamped label range.
    pub fn quantification_curve(&self, scorer: &Scorer) -> Result<Check> {
        let edges = &self.cfg.curve_edges;
        let bins = crate::labels::BinningConfig::snr(scorer.network().config().k_classes);
        let snr_mid = crate::labels::midpoints(&bins);
        let mut rows = Vec::new();
        let mut worst = 0.0f64;
        for (b, w) in edges.windows(2).enumerate() {
            let mut rng = self.rng(100 + b as u64);
            let (mut t_sdr, mut p_sdr, mut t_snr, mut p_snr) = (0.0, 0.0, 0.0, 0.0);
            let mut n = 0usize;
            while n < self.cfg.curve_pairs_per_bin {
                let delta = rng.random_range(w[0]..w[1]);
                let lo = rng.random_range(SDR_RANGE.0..SDR_RANGE.1 - delta);
                let src = rng.random_range(0..self.corpus.clean.len());
                let clean = self.excerpt(&mut rng, &self.corpus.clean[src])?;
                let noise = rng.random_range(0..self.corpus.noise.len());
                let hi_x = self.noisy(&mut rng, &clean, noise, lo + delta)?;
                let lo_x = self.noisy(&mut rng, &clean, noise, lo)?;
                let s_hi = si_sdr_clamped(clean.samples(), hi_x.samples())?.clamp(SDR_RANGE.0, SDR_RANGE.1);
                let s_lo = si_sdr_clamped(clean.samples(), lo_x.samples())?.clamp(SDR_RANGE.0, SDR_RANGE.1);
                let (a, r) = if rng.random_bool(0.5) { (&hi_x, &lo_x) } else { (&lo_x, &hi_x) };
                p_sdr += scorer.noresqa(a, r)?.magnitude_db;
                let o = scorer.outputs(a, r)?;
                p_snr += o.snr_pooled.iter().zip(&snr_mid).map(|(p, m)| p * m).sum::<f64>();
                t_sdr += s_hi - s_lo;
                t_snr += delta;
                n += 1;
            }
            let nf = n as f64;
            let (t_sdr, p_sdr, t_snr, p_snr) = (t_sdr / nf, p_sdr / nf, t_snr / nf, p_snr / nf);
            worst = worst.max((p_sdr - t_sdr).abs());
            rows.push(serde_json::json!({
                "bin_db": [w[0], w[1]],
                "pairs": n,
                "mean_true_delta_sdr": t_sdr,
                "mean_pred_delta_sdr": p_sdr,
                "mean_true_delta_snr": t_snr,
                "mean_pred_delta_snr": p_snr,
            }));
        }
        Ok(Check {
            name: "quantification_curve".into(),
            statistic: worst,
            threshold: 3.0,
            passed: worst <= 3.0,
            details: serde_json::json!({ "bins": rows }),
        })
    }

    /// Recordings at discrete SNR levels of one noise type, tagged with the
    /// level index. Sources and noise excerpts vary within a level.
    pub fn retrieval_set(&self) -> Result<Vec<(Waveform, usize)>> {
        let mut rng = self.rng(4);
        let prefix = self.cfg.retrieval_noise.name();
        let noises: Vec<usize> =
            (0..self.corpus.noise.len()).filter(|&i| self.corpus.noise[i].source_id().starts_with(prefix)).collect();
        if noises.is_empty() {
            return Err(Error::InsufficientItems(format!("no {prefix} noise recordings in the benchmark corpus")));
        }
        let mut out = Vec::new();
        for (level, &snr) in self.cfg.retrieval_snrs.iter().enumerate() {
            for _ in 0..self.cfg.retrieval_per_level {
                let src = rng.random_range(0..self.corpus.clean.len());
                let clean = self.excerpt(&mut rng, &self.corpus.clean[src])?;
                let noise = noises[rng.random_range(0..noises.len())];
                out.push((self.noisy(&mut rng, &clean, noise, snr)?, level));
            }
        }
        Ok(out)
    }

    pub fn retrieval(&self, scorer: &Scorer) -> Result<Check> {
        let items = self
            .retrieval_set()?
            .into_iter()
            .map(|(w, l)| Ok((scorer.quality_embedding(&w)?, l)))
            .collect::<Result<Vec<_>>>()?;
        let k = self.cfg.retrieval_k;
        let p = precision_at_k(&items, k)?;
        Ok(Check {
            name: format!("precision_at_{k}"),
            statistic: p,
            threshold: 0.8,
            passed: p >= 0.8,
            details: serde_json::json!({ "items": items.len(), "levels": self.cfg.retrieval_snrs }),
        })
    }

    /// Triplets of a clean non-matching reference and two noisy versions of
    /// one excerpt whose SNRs differ by at least `afc_min_gap_db`. The
    /// cleaner candidate is the ground-truth choice.
    pub fn afc_triplets(&self) -> Result<Vec<AfcTriplet>> {
        let mut rng = self.rng(5);
        let gap = self.cfg.afc_min_gap_db;
        let mut out = Vec::new();
        for _ in 0..self.cfg.afc_triplets {
            let src = rng.random_range(0..self.corpus.clean.len());
            let mut other = rng.random_range(0..self.corpus.clean.len());
            while other == src {
                other = rng.random_range(0..self.corpus.clean.len());
            }
            let clean = self.excerpt(&mut rng, &self.corpus.clean[src])?;
            let reference = self.excerpt(&mut rng, &self.corpus.clean[other])?;
            let low = rng.random_range(-10.0..30.0 - gap);
            let high = rng.random_range(low + gap..30.0);
            let noise = rng.random_range(0..self.corpus.noise.len());
            let good = self.noisy(&mut rng, &clean, noise, high)?;
            let bad = self.noisy(&mut rng, &clean, noise, low)?;
            out.push(if rng.random_bool(0.5) {
                AfcTriplet { reference, candidate_a: good, candidate_b: bad, human_choice: Choice::A }
            } else {
                AfcTriplet { reference, candidate_a: bad, candidate_b: good, human_choice: Choice::B }
            });
        }
        Ok(out)
    }

    pub fn two_afc(&self, scorer: &Scorer) -> Result<Check> {
        let r = two_afc_triplets(&self.afc_triplets()?, scorer)?;
        Ok(Check {
            name: "two_afc".into(),
            statistic: r.accuracy,
            threshold: 0.9,
            passed: r.accuracy > 0.9,
            details: serde_json::to_value(&r)?,
        })
    }

    /// Across-trial variance of single-reference scores against that of
    /// scores averaged over `variance_refs` references, for one noisy test
    /// excerpt and a pool of clean references from other sources.
    pub fn variance_reduction(&self, scorer: &Scorer) -> Result<Check> {
        let mut rng = self.rng(6);
        let clean = self.excerpt(&mut rng, &self.corpus.clean[0])?;
        let noise = rng.random_range(0..self.corpus.noise.len());
        let test = self.noisy(&mut rng, &clean, noise, 5.0)?;
        let pool = (1..self.corpus.clean.len())
            .flat_map(|s| (0..3).map(move |_| s))
            .map(|s| self.excerpt(&mut rng, &self.corpus.clean[s]))
            .collect::<Result<Vec<_>>>()?;
        let m = self.cfg.variance_refs;
        if pool.len() < m {
            return Err(Error::InsufficientItems(format!("{} references for subsets of {m}", pool.len())));
        }
        let mut single = Vec::new();
        let mut averaged = Vec::new();
        for _ in 0..self.cfg.variance_trials {
            let r = &pool[rng.random_range(0..pool.len())];
            single.push(scorer.noresqa(&test, r)?.magnitude_db);
            let refs: Vec<Waveform> = sample(&mut rng, pool.len(), m).iter().map(|i| pool[i].clone()).collect();
            averaged.push(scorer.noresqa_avg(&test, &refs)?.score.magnitude_db);
        }
        let var = |v: &[f64]| {
            let mu = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (v.len() as f64 - 1.0)
        };
        let (vs, va) = (var(&single), var(&averaged));
        Ok(Check {
            name: "variance_reduction".into(),
            statistic: va,
            threshold: vs,
            passed: va < vs,
            details: serde_json::json!({ "single_variance": vs, "averaged_variance": va, "single": single, "averaged": averaged }),
        })
    }
}

/// The property checks: commutativity, identicals, monotonicity and the
/// quantification curve. Failures are report entries, not errors.
pub fn property_suite(scorer: &Scorer, cfg: &SuiteConfig) -> SuiteReport {
    let bench = match Bench::new(cfg.clone()) {
        Ok(b) => b,
        Err(e) => return SuiteReport { suite: "properties".into(), checks: vec![], errors: vec![e.to_string()], passed: false },
    };
    SuiteReport::new(
        "properties",
        vec![
            bench.commutativity(scorer),
            bench.identicals(scorer),
            bench.monotonicity(scorer),
            bench.quantification_curve(scorer),
        ],
    )
}

/// Retrieval, 2AFC and multi-reference variance probes.
pub fn probe_suite(scorer: &Scorer, cfg: &SuiteConfig) -> SuiteReport {
    let bench = match Bench::new(cfg.clone()) {
        Ok(b) => b,
        Err(e) => return SuiteReport { suite: "probes".into(), checks: vec![], errors: vec![e.to_string()], passed: false },
    };
    SuiteReport::new("probes", vec![bench.retrieval(scorer), bench.two_afc(scorer), bench.variance_reduction(scorer)])
}

/// Scores each file against the references and correlates with its rating.
pub fn rate_items(items: &[(PathBuf, f64)], refs: &[Waveform], scorer: &Scorer) -> Result<(Vec<RatedItem>, CorrelationReport)> {
    let rated = items
        .iter()
        .map(|(p, r)| {
            let w = load_canonical(p)?;
            let s = scorer.noresqa_avg(&w, refs)?.score;
            let signed = match s.sign {
                Sign::TestBetter => s.magnitude_db,
                Sign::RefBetter => -s.magnitude_db,
            };
            Ok(RatedItem { path: p.clone(), predicted: signed, reference_rating: *r })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = correlate(&rated)?;
    Ok((rated, report))
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::InvalidManifest { line: i + 1, reason: e.to_string() }))
        .collect()
}
