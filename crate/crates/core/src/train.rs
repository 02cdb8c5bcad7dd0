//! Losses, the Adam optimizer, and the resumable epoch loop.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio_io::Waveform;
use crate::degrade::{pair_rng, sample_training_pair, Category, PairSample, SamplerConfig};
use crate::dsp::{Spectrogram, StftConfig};
use crate::error::{Error, Result};
use crate::labels::{delta_target, preference_label, BinningConfig, PreferenceLabel, SmoothedLabel};
use crate::model::frontend::analyze;
use crate::model::{InputGrads, Mode, ModelConfig, ModelOutputs, Network, OutputGrads, Params};

/// Arguments of `ln` are floored here.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Freshly sampled pairs per epoch.
    pub pairs_per_epoch: usize,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; off when absent.
    pub clip_grad_norm: Option<f64>,
    /// Feed every sampled pair in both input orders, adjacent in the batch.
    /// An epoch then holds `pairs_per_epoch` examples from half as many pairs.
    pub swap_pairs: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 50,
            pairs_per_epoch: 10_000,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_grad_norm: None,
            swap_pairs: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.pairs_per_epoch == 0 {
            return Err(Error::InvalidConfig(
                "learning_rate, batch_size and pairs_per_epoch must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("Adam moments must be in [0, 1) and epsilon positive".into()));
        }
        if matches!(self.clip_grad_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::InvalidConfig("clip_grad_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_p: f64,
    pub l_sdr: f64,
    pub l_snr: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    fn new(l_p: f64, l_sdr: f64, l_snr: Option<f64>) -> Self {
        Self { l_p, l_sdr, l_snr, total: l_p + l_sdr + l_snr.unwrap_or(0.0) }
    }
}

/// `-sum y ln p`, with `p` floored at [`LOG_FLOOR`].
pub fn cross_entropy(p: &[f64], y: &[f64]) -> f64 {
    -p.iter().zip(y).map(|(p, y)| if *y == 0.0 { 0.0 } else { y * p.max(LOG_FLOOR).ln() }).sum::<f64>()
}

fn cross_entropy_grad(p: &[f64], y: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(y)
        .map(|(p, y)| if *y == 0.0 || *p < LOG_FLOOR { 0.0 } else { -y / p })
        .collect()
}

pub fn preference_loss(outputs: &ModelOutputs, label: &PreferenceLabel) -> f64 {
    cross_entropy(&outputs.pref_pooled, &label.probs)
}

/// SI-SDR head loss plus, when a target is given, the SNR head loss.
pub fn quantification_loss(outputs: &ModelOutputs, sdr: &SmoothedLabel, snr: Option<&SmoothedLabel>) -> f64 {
    cross_entropy(&outputs.sdr_pooled, &sdr.probs) + snr.map_or(0.0, |t| cross_entropy(&outputs.snr_pooled, &t.probs))
}

pub fn loss_breakdown(outputs: &ModelOutputs, ex: &TrainingExample) -> LossBreakdown {
    LossBreakdown::new(
        preference_loss(outputs, &ex.pref),
        cross_entropy(&outputs.sdr_pooled, &ex.sdr_target.probs),
        ex.snr_target.as_ref().map(|t| cross_entropy(&outputs.snr_pooled, &t.probs)),
    )
}

pub fn output_grads(outputs: &ModelOutputs, ex: &TrainingExample) -> OutputGrads {
    let gp = cross_entropy_grad(&outputs.pref_pooled, &ex.pref.probs);
    OutputGrads {
        pref: [gp[0], gp[1]],
        sdr: Some(cross_entropy_grad(&outputs.sdr_pooled, &ex.sdr_target.probs)),
        snr: ex.snr_target.as_ref().map(|t| cross_entropy_grad(&outputs.snr_pooled, &t.probs)),
    }
}

/// A pair converted to network inputs and targets.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub spec_i: Spectrogram,
    pub spec_j: Spectrogram,
    pub pref: PreferenceLabel,
    pub sdr_target: SmoothedLabel,
    pub snr_target: Option<SmoothedLabel>,
    /// True |delta SNR| when the pair is additive.
    pub delta_snr: Option<f64>,
    pub delta_sdr: f64,
}

impl TrainingExample {
    /// The same pair with its inputs in the opposite order.
    pub fn swapped(&self) -> Self {
        let [a, b] = self.pref.probs;
        Self {
            spec_i: self.spec_j.clone(),
            spec_j: self.spec_i.clone(),
            pref: PreferenceLabel { probs: [b, a] },
            ..self.clone()
        }
    }
}

pub fn input_spectrogram(w: &Waveform) -> Result<Spectrogram> {
    Ok(analyze(w.samples(), w.sample_rate(), &StftConfig::default())?.spec)
}

pub fn prepare(pair: &PairSample, k_classes: usize) -> Result<TrainingExample> {
    let sdr_bins = BinningConfig::si_sdr(k_classes);
    let snr_bins = BinningConfig::snr(k_classes);
    let snr_target = match (pair.category, pair.snr_i, pair.snr_j) {
        (Category::Additive, Some(a), Some(b)) => Some(delta_target(a, b, &snr_bins)),
        _ => None,
    };
    Ok(TrainingExample {
        spec_i: input_spectrogram(&pair.x_i)?,
        spec_j: input_spectrogram(&pair.x_j)?,
        pref: preference_label(pair.measured_sdr_i, pair.measured_sdr_j)?,
        sdr_target: delta_target(pair.sdr_i, pair.sdr_j, &sdr_bins),
        snr_target,
        delta_snr: pair.snr_i.zip(pair.snr_j).map(|(a, b)| (a - b).abs()),
        delta_sdr: (pair.sdr_i - pair.sdr_j).abs(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// Applies one Adam update in place.
pub fn adam_update(params: &mut Params, grad: &[f64], state: &mut AdamState, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.0.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
    }
}

fn dropout_seed(train_seed: u64, step: u64, item: usize) -> u64 {
    train_seed
        .wrapping_mul(0x2545_F491_4F6C_DD1D)
        .wrapping_add(step.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(item as u64)
}

/// Batch-mean loss and gradient at the current parameters. Dropout masks
/// depend on `(cfg.seed, step, index in batch)`.
pub fn batch_gradient(
    net: &Network,
    params: &Params,
    batch: &[TrainingExample],
    cfg: &TrainConfig,
    step: u64,
) -> Result<(LossBreakdown, Vec<f64>, usize)> {
    if batch.is_empty() {
        return Err(Error::InsufficientItems("empty batch".into()));
    }
    let mut grad = vec![0.0; net.param_count()];
    let (mut lp, mut ls, mut ln) = (0.0, 0.0, 0.0);
    let mut any_snr = false;
    let mut correct = 0;
    for (k, ex) in batch.iter().enumerate() {
        let mode = Mode::Train { dropout_seed: dropout_seed(cfg.seed, step, k) };
        let (out, tape) = net.forward_pair_tape(params, &ex.spec_i, &ex.spec_j, mode)?;
        let l = loss_breakdown(&out, ex);
        lp += l.l_p;
        ls += l.l_sdr;
        if let Some(v) = l.l_snr {
            ln += v;
            any_snr = true;
        }
        let predicted = if out.pref_pooled[0] >= out.pref_pooled[1] { 0 } else { 1 };
        correct += usize::from(predicted == ex.pref.preferred());
        let g = net.backward(params, &tape, &output_grads(&out, ex), InputGrads::default())?;
        grad.iter_mut().zip(&g.params).for_each(|(a, b)| *a += b);
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    if let Some(c) = cfg.clip_grad_norm {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > c {
            grad.iter_mut().for_each(|g| *g *= c / norm);
        }
    }
    let breakdown = LossBreakdown::new(lp / n, ls / n, any_snr.then_some(ln / n));
    Ok((breakdown, grad, correct))
}

/// One optimizer step on `batch`. Deterministic in `(params, opt, batch, cfg.seed, opt.step)`.
pub fn train_step(
    net: &Network,
    params: &mut Params,
    opt: &mut AdamState,
    batch: &[TrainingExample],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let (loss, grad, _) = batch_gradient(net, params, batch, cfg, opt.step)?;
    adam_update(params, &grad, opt, cfg);
    Ok(loss)
}

const MAGIC: &[u8; 8] = b"NRSQCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    train: TrainConfig,
    sampler: SamplerConfig,
    epoch: usize,
    step: u64,
    n_params: usize,
}

/// Everything needed to continue training or to score.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub params: Params,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = CheckpointHeader {
            model: self.model.clone(),
            train: self.train.clone(),
            sampler: self.sampler.clone(),
            epoch: self.epoch,
            step: self.adam.step,
            n_params: self.params.0.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let tmp = path.as_ref().with_extension("tmp");
        {
            let mut f = BufWriter::new(fs::File::create(&tmp)?);
            f.write_all(MAGIC)?;
            f.write_all(&VERSION.to_le_bytes())?;
            f.write_all(&(json.len() as u64).to_le_bytes())?;
            f.write_all(&json)?;
            for arr in [&self.params.0, &self.adam.m, &self.adam.v] {
                for v in arr.iter() {
                    f.write_all(&v.to_le_bytes())?;
                }
            }
            f.flush()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let net = Network::new(header.model.clone())?;
        if net.param_count() != header.n_params {
            return Err(bad("parameter count does not match the model config"));
        }
        let n = header.n_params;
        let data = &bytes[20 + hlen..];
        if data.len() != 3 * n * 8 {
            return Err(bad("parameter data has the wrong length"));
        }
        let read = |k: usize| -> Vec<f64> {
            data[k * n * 8..(k + 1) * n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        Ok(Self {
            model: header.model,
            train: header.train,
            sampler: header.sampler,
            epoch: header.epoch,
            params: Params(read(0)),
            adam: AdamState { m: read(1), v: read(2), step: header.step },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_p: f64,
    pub l_sdr: f64,
    pub l_snr: f64,
    pub total: f64,
    pub pref_accuracy: f64,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LATEST_FILE: &str = "latest";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch}.bin")
}

/// Training data sources.
#[derive(Debug, Clone, Copy)]
pub struct Databases<'a> {
    pub clean: &'a [Waveform],
    pub noise: &'a [Waveform],
    pub rirs: &'a [Waveform],
}

/// Pair number `n` of a run; depends only on the sampler seed and `n`.
pub fn training_example(db: &Databases, sampler: &SamplerConfig, n: u64, k_classes: usize) -> Result<TrainingExample> {
    let mut rng = pair_rng(sampler.seed, n);
    prepare(&sample_training_pair(&mut rng, db.clean, db.noise, db.rirs, sampler)?, k_classes)
}

/// Trains until `train_cfg.epochs` epochs are complete, writing a checkpoint
/// and a metrics line after each. An existing `latest` pointer in
/// `checkpoint_dir` resumes from that checkpoint; the continuation matches an
/// uninterrupted run exactly.
pub fn fit(
    db: Databases,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    sampler_cfg: &SamplerConfig,
    checkpoint_dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    train_cfg.validate()?;
    sampler_cfg.validate()?;
    let dir = checkpoint_dir.as_ref();
    fs::create_dir_all(dir)?;
    let net = Network::new(model_cfg.clone())?;

    let latest = dir.join(LATEST_FILE);
    let (mut params, mut adam, start) = if latest.exists() {
        let name = fs::read_to_string(&latest)?;
        let ck = Checkpoint::load(dir.join(name.trim()))?;
        if ck.model != *model_cfg {
            return Err(Error::Checkpoint("resume checkpoint has a different model config".into()));
        }
        (ck.params, ck.adam, ck.epoch)
    } else {
        let p = net.init_params(train_cfg.seed);
        let n = p.0.len();
        (p, AdamState::new(n), 0)
    };

    // Keep only metrics of completed epochs so a resumed run writes the same file.
    let metrics_path = dir.join(METRICS_FILE);
    let kept: Vec<String> = if metrics_path.exists() {
        fs::read_to_string(&metrics_path)?
            .lines()
            .filter(|l| serde_json::from_str::<EpochMetrics>(l).is_ok_and(|m| m.epoch <= start))
            .map(str::to_string)
            .collect()
    } else {
        Vec::new()
    };
    fs::write(&metrics_path, kept.iter().map(|l| format!("{l}\n")).collect::<String>())?;

    let k = model_cfg.k_classes;
    let mut last = dir.join(checkpoint_name(start));
    for epoch in start + 1..=train_cfg.epochs {
        let (mut lp, mut ls, mut ln, mut total) = (0.0, 0.0, 0.0, 0.0);
        let mut correct = 0;
        let mut seen = 0;
        let base = (epoch as u64 - 1) * train_cfg.pairs_per_epoch as u64;
        let mut batches = 0usize;
        let mut i = 0;
        while i < train_cfg.pairs_per_epoch {
            let end = (i + train_cfg.batch_size).min(train_cfg.pairs_per_epoch);
            let batch = if train_cfg.swap_pairs {
                // Example m is pair m / 2, reversed when m is odd.
                let mut b: Vec<TrainingExample> = Vec::with_capacity(end - i);
                for m in i..end {
                    let ex = match b.last() {
                        Some(prev) if m % 2 == 1 => prev.swapped(),
                        _ => {
                            let ex = training_example(&db, sampler_cfg, base + (m / 2) as u64, k)?;
                            if m % 2 == 1 { ex.swapped() } else { ex }
                        }
                    };
                    b.push(ex);
                }
                b
            } else {
                (i..end)
                    .map(|n| training_example(&db, sampler_cfg, base + n as u64, k))
                    .collect::<Result<Vec<_>>>()?
            };
            let (loss, grad, c) = batch_gradient(&net, &params, &batch, train_cfg, adam.step)?;
            adam_update(&mut params, &grad, &mut adam, train_cfg);
            lp += loss.l_p;
            ls += loss.l_sdr;
            ln += loss.l_snr.unwrap_or(0.0);
            total += loss.total;
            correct += c;
            seen += batch.len();
            batches += 1;
            i = end;
        }
        let b = batches as f64;
        let m = EpochMetrics {
            epoch,
            l_p: lp / b,
            l_sdr: ls / b,
            l_snr: ln / b,
            total: total / b,
            pref_accuracy: correct as f64 / seen as f64,
        };
        let mut f = fs::OpenOptions::new().append(true).open(&metrics_path)?;
        writeln!(f, "{}", serde_json::to_string(&m)?)?;

        last = dir.join(checkpoint_name(epoch));
        Checkpoint {
            model: model_cfg.clone(),
            train: train_cfg.clone(),
            sampler: sampler_cfg.clone(),
            epoch,
            params: params.clone(),
            adam: adam.clone(),
        }
        .save(&last)?;
        fs::write(&latest, checkpoint_name(epoch))?;
    }
    Ok(last)
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<EpochMetrics>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
