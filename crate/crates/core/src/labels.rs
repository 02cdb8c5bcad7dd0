//! Discretized quality differences and the smoothed / preference targets.

use serde::{Deserialize, Serialize};

use crate::dsp::MeasureKind;
use crate::error::{Error, Result};

/// Maximum |delta SI-SDR| covered by the classes: the SI-SDR label range is -15..25 dB.
pub const SDR_DELTA_MAX: f64 = 40.0;
/// Maximum |delta SNR| covered by the classes: the SNR label range is -15..60 dB.
pub const SNR_DELTA_MAX: f64 = 75.0;

/// Mass on the true class.
pub const SMOOTH_CENTER: f64 = 0.6;
/// Mass on each adjacent class.
pub const SMOOTH_NEIGHBOR: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinningConfig {
    pub k_classes: usize,
    pub delta_max: f64,
    pub measure: MeasureKind,
}

impl BinningConfig {
    pub fn new(k_classes: usize, delta_max: f64, measure: MeasureKind) -> Result<Self> {
        if k_classes < 2 || !(delta_max > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "binning needs k >= 2 and delta_max > 0 (got {k_classes}, {delta_max})"
            )));
        }
        Ok(Self { k_classes, delta_max, measure })
    }

    pub fn si_sdr(k_classes: usize) -> Self {
        Self { k_classes, delta_max: SDR_DELTA_MAX, measure: MeasureKind::SiSdr }
    }

    pub fn snr(k_classes: usize) -> Self {
        Self { k_classes, delta_max: SNR_DELTA_MAX, measure: MeasureKind::Snr }
    }

    pub fn bin_width(&self) -> f64 {
        self.delta_max / self.k_classes as f64
    }
}

/// 1-based class of a non-negative difference; bins are half-open
/// `[(k-1)w, kw)` and everything at or above `delta_max` lands in class K.
pub fn bin_index(delta: f64, cfg: &BinningConfig) -> usize {
    debug_assert!(delta >= 0.0, "negative delta {delta}");
    let k = (delta.max(0.0) / cfg.bin_width()).floor();
    if k.is_nan() || k >= cfg.k_classes as f64 {
        cfg.k_classes
    } else {
        k as usize + 1
    }
}

pub fn bin_midpoint(k: usize, cfg: &BinningConfig) -> Result<f64> {
    if k == 0 || k > cfg.k_classes {
        return Err(Error::IndexOutOfRange { index: k, k: cfg.k_classes });
    }
    let w = cfg.bin_width();
    Ok(0.5 * ((k - 1) as f64 * w + k as f64 * w))
}

/// All K bin midpoints, in class order.
pub fn midpoints(cfg: &BinningConfig) -> Vec<f64> {
    (1..=cfg.k_classes)
        .map(|k| bin_midpoint(k, cfg).expect("k in range"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedLabel {
    pub probs: Vec<f64>,
}

/// 0.6 on the true class and 0.2 on each neighbour. At the ends the missing
/// neighbour's share is spread so the 3:1 ratio holds (0.75 / 0.25).
pub fn smooth_labels(v: usize, k: usize) -> Result<SmoothedLabel> {
    if v == 0 || v > k || k < 2 {
        return Err(Error::IndexOutOfRange { index: v, k });
    }
    let i = v - 1;
    let mut probs = vec![0.0; k];
    let has_left = i > 0;
    let has_right = i + 1 < k;
    let total = SMOOTH_CENTER
        + if has_left { SMOOTH_NEIGHBOR } else { 0.0 }
        + if has_right { SMOOTH_NEIGHBOR } else { 0.0 };
    probs[i] = SMOOTH_CENTER / total;
    if has_left {
        probs[i - 1] = SMOOTH_NEIGHBOR / total;
    }
    if has_right {
        probs[i + 1] = SMOOTH_NEIGHBOR / total;
    }
    Ok(SmoothedLabel { probs })
}

/// Smoothed target for an absolute difference between two quality values.
pub fn delta_target(a_db: f64, b_db: f64, cfg: &BinningConfig) -> SmoothedLabel {
    smooth_labels(bin_index((a_db - b_db).abs(), cfg), cfg.k_classes).expect("bin index in range")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceLabel {
    pub probs: [f64; 2],
}

impl PreferenceLabel {
    /// Index of the preferred input: 0 for the first, 1 for the second.
    pub fn preferred(&self) -> usize {
        if self.probs[0] == 1.0 {
            0
        } else {
            1
        }
    }
}

/// `[1, 0]` when the first input has the higher SI-SDR, `[0, 1]` otherwise.
pub fn preference_label(sdr_i: f64, sdr_j: f64) -> Result<PreferenceLabel> {
    if sdr_i == sdr_j {
        return Err(Error::TiedQuality(sdr_i));
    }
    Ok(PreferenceLabel {
        probs: if sdr_i > sdr_j { [1.0, 0.0] } else { [0.0, 1.0] },
    })
}
