//! The two-input quality network.
//!
//! Both inputs pass through one shared encoder (an inception-style feature
//! block followed by a dilated TCN stack) that keeps the frame axis intact.
//! The per-frame embeddings of the two inputs are concatenated and fed to a
//! preference head and two quantification heads (SI-SDR and SNR), each of
//! which emits a distribution per frame. Recording-level outputs are the
//! temporal mean of those distributions.
//!
//! Gradients are hand-derived; every kernel has a finite-difference test in
//! [`layers`] and the whole network is checked in `tests/gradients.rs`.

pub mod frontend;
pub mod layers;

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use layers::{Conv1dShape, Conv2dShape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Frequency bins of the input spectrogram.
    pub input_bins: usize,
    pub inception_blocks: usize,
    pub filters_1x1: usize,
    pub filters_3x3: usize,
    pub filters_5x5: usize,
    /// Max-pool width along frequency after each inception block.
    pub freq_pool: usize,
    /// Frequency extent left after the last pool. The input is zero-padded to
    /// `freq_out * freq_pool^inception_blocks` bins.
    pub freq_out: usize,
    pub tcn_channels: Vec<usize>,
    pub tcn_dilations: Vec<usize>,
    pub tcn_kernel: usize,
    pub dropout: f64,
    /// Hidden widths of the preference head; its output layer has 2 channels.
    pub pref_head_hidden: Vec<usize>,
    /// Hidden widths of each quantification head; the output layer has `k_classes`.
    pub quant_head_hidden: Vec<usize>,
    pub head_kernel: usize,
    pub k_classes: usize,
    pub init_std: f64,
    /// Magnitudes enter the network as `ln(|X| + magnitude_floor)`.
    pub magnitude_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_bins: 256,
            inception_blocks: 4,
            filters_1x1: 24,
            filters_3x3: 32,
            filters_5x5: 8,
            freq_pool: 4,
            freq_out: 2,
            tcn_channels: vec![32, 64, 64, 128],
            tcn_dilations: vec![2, 4, 8, 16],
            tcn_kernel: 3,
            dropout: 0.2,
            pref_head_hidden: vec![32, 8],
            quant_head_hidden: vec![64, 50],
            head_kernel: 5,
            k_classes: 40,
            init_std: 0.01,
            magnitude_floor: 1e-3,
        }
    }
}

impl ModelConfig {
    /// Small network used for desk-scale training.
    pub fn desk() -> Self {
        Self {
            inception_blocks: 2,
            filters_1x1: 4,
            filters_3x3: 4,
            filters_5x5: 0,
            freq_pool: 16,
            freq_out: 1,
            tcn_channels: vec![24, 24],
            tcn_dilations: vec![2, 4],
            pref_head_hidden: vec![16, 8],
            quant_head_hidden: vec![32, 32],
            // With 0.01 the small heads sit on a long plateau before the
            // SI-SDR distribution moves away from its prior.
            init_std: 0.1,
            ..Self::default()
        }
    }

    /// Tiny network for gradient checks.
    pub fn miniature() -> Self {
        Self {
            inception_blocks: 2,
            filters_1x1: 1,
            filters_3x3: 1,
            filters_5x5: 0,
            freq_pool: 16,
            freq_out: 1,
            tcn_channels: vec![3],
            tcn_dilations: vec![2],
            pref_head_hidden: vec![4],
            quant_head_hidden: vec![4],
            k_classes: 4,
            ..Self::default()
        }
    }

    pub fn filters_per_block(&self) -> usize {
        self.filters_1x1 + self.filters_3x3 + self.filters_5x5
    }

    pub fn padded_bins(&self) -> usize {
        self.freq_out * self.freq_pool.pow(self.inception_blocks as u32)
    }

    pub fn embedding_dim(&self) -> usize {
        self.tcn_channels
            .last()
            .copied()
            .unwrap_or(self.filters_per_block() * self.freq_out)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.filters_per_block() == 0 || self.inception_blocks == 0 {
            return bad("feature block needs at least one filter and one block".into());
        }
        if self.freq_pool == 0 || self.freq_out == 0 {
            return bad("pool sizes must be positive".into());
        }
        if self.padded_bins() < self.input_bins {
            return bad(format!(
                "pooling geometry covers {} bins, input has {}",
                self.padded_bins(),
                self.input_bins
            ));
        }
        if self.tcn_channels.len() != self.tcn_dilations.len() {
            return bad("tcn_channels and tcn_dilations differ in length".into());
        }
        if self.tcn_channels.iter().chain(&self.tcn_dilations).any(|&c| c == 0) {
            return bad("tcn channels and dilations must be positive".into());
        }
        if self.tcn_kernel.is_multiple_of(2) || self.head_kernel.is_multiple_of(2) {
            return bad("kernels must be odd for same padding".into());
        }
        if self.k_classes < 2 {
            return bad("k_classes must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.pref_head_hidden.iter().chain(&self.quant_head_hidden).any(|&c| c == 0) {
            return bad("head widths must be positive".into());
        }
        if !(self.init_std > 0.0) || !(self.magnitude_floor > 0.0) {
            return bad("init_std and magnitude_floor must be positive".into());
        }
        Ok(())
    }
}

/// Flat parameter vector; [`Layout`] names its slices.
#[derive(Debug, Clone, PartialEq)]
pub struct Params(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Layout {
    pub slots: Vec<ParamSlot>,
    total: usize,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let slot = ParamSlot { name, offset: self.total, shape };
        self.total += slot.len();
        let idx = self.slots.len();
        self.slots.push(slot);
        idx
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn slot(&self, idx: usize) -> &ParamSlot {
        &self.slots[idx]
    }

    pub fn find(&self, name: &str) -> Option<&ParamSlot> {
        self.slots.iter().find(|s| s.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; masks are a pure function of the seed.
    Train { dropout_seed: u64 },
}

#[derive(Debug, Clone)]
struct Branch {
    shape: Conv2dShape,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct InceptionBlock {
    cin: usize,
    branches: Vec<Branch>,
}

#[derive(Debug, Clone)]
struct WnConv {
    shape: Conv1dShape,
    v: usize,
    g: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct PlainConv {
    shape: Conv1dShape,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct TcnBlock {
    conv1: WnConv,
    conv2: WnConv,
    down: Option<PlainConv>,
}

#[derive(Debug, Clone)]
struct Head {
    layers: Vec<PlainConv>,
}

/// Architecture plus parameter layout for one [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct Network {
    cfg: ModelConfig,
    layout: Layout,
    inception: Vec<InceptionBlock>,
    tcn: Vec<TcnBlock>,
    pref: Head,
    sdr: Head,
    snr: Head,
}

/// Per-frame encoder output, `[T, D]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbedding {
    pub data: Vec<f64>,
    pub frames: usize,
    pub dim: usize,
}

impl FrameEmbedding {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// Temporal mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for row in self.data.chunks_exact(self.dim) {
            m.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        m.iter_mut().for_each(|v| *v /= self.frames as f64);
        m
    }
}

/// Frame-level distributions (`[T, C]` rows) and their temporal means.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs {
    pub frames: usize,
    pub k_classes: usize,
    pub pref_frame: Vec<f64>,
    pub pref_pooled: [f64; 2],
    pub sdr_frame: Vec<f64>,
    pub sdr_pooled: Vec<f64>,
    pub snr_frame: Vec<f64>,
    pub snr_pooled: Vec<f64>,
}

/// Loss gradients with respect to the pooled distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub pref: [f64; 2],
    pub sdr: Option<Vec<f64>>,
    pub snr: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InputGrads {
    pub first: bool,
    pub second: bool,
}

#[derive(Debug, Clone)]
pub struct PairGradients {
    /// Same layout as [`Params`].
    pub params: Vec<f64>,
    /// Gradient on the first input's `[2, T, F]` spectrogram, when requested.
    pub spec_first: Option<Vec<f64>>,
    pub spec_second: Option<Vec<f64>>,
}

struct InceptionTape {
    input: Vec<f64>,
    act: Vec<f64>,
    arg: Vec<u32>,
    f: usize,
}

struct TcnTape {
    input: Vec<f64>,
    w1: Vec<f64>,
    w2: Vec<f64>,
    a1: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    m1: Option<Vec<f64>>,
    m2: Option<Vec<f64>>,
    out: Vec<f64>,
}

struct EncoderTape {
    frames: usize,
    magnitude: Vec<f64>,
    blocks: Vec<InceptionTape>,
    tcn: Vec<TcnTape>,
    output: Vec<f64>,
}

struct HeadLayerTape {
    input: Vec<f64>,
    act: Vec<f64>,
    mask: Option<Vec<f64>>,
}

struct HeadTape {
    layers: Vec<HeadLayerTape>,
    probs: Vec<f64>,
    classes: usize,
}

/// Everything the backward pass needs from one `forward_pair`.
pub struct PairTape {
    first: EncoderTape,
    second: EncoderTape,
    pref: HeadTape,
    sdr: HeadTape,
    snr: HeadTape,
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn dropout_for(mode: Mode, p: f64, len: usize, stream: u64) -> Option<Vec<f64>> {
    match mode {
        Mode::Train { dropout_seed } if p > 0.0 => {
            Some(layers::dropout_mask(len, p, mix_seed(dropout_seed, stream)))
        }
        _ => None,
    }
}

fn apply_mask(x: &[f64], mask: &Option<Vec<f64>>) -> Vec<f64> {
    match mask {
        Some(m) => x.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => x.to_vec(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

impl Network {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layout = Layout::default();
        let mut inception = Vec::new();
        let mut cin = 2;
        for blk in 0..cfg.inception_blocks {
            let mut branches = Vec::new();
            for (k, n) in [(1, cfg.filters_1x1), (3, cfg.filters_3x3), (5, cfg.filters_5x5)] {
                if n == 0 {
                    continue;
                }
                let w = layout.push(format!("encoder.inception{blk}.conv{k}x{k}.weight"), vec![n, cin, k, k]);
                let b = layout.push(format!("encoder.inception{blk}.conv{k}x{k}.bias"), vec![n]);
                branches.push(Branch { shape: Conv2dShape { cin, cout: n, k }, w, b });
            }
            inception.push(InceptionBlock { cin, branches });
            cin = cfg.filters_per_block();
        }

        let mut tcn = Vec::new();
        let mut ch = cfg.filters_per_block() * cfg.freq_out;
        for (i, (&cout, &d)) in cfg.tcn_channels.iter().zip(&cfg.tcn_dilations).enumerate() {
            let k = cfg.tcn_kernel;
            let mut wn = |name: &str, cin: usize| {
                let v = layout.push(format!("encoder.tcn{i}.{name}.weight_v"), vec![cout, cin, k]);
                let g = layout.push(format!("encoder.tcn{i}.{name}.weight_g"), vec![cout]);
                let b = layout.push(format!("encoder.tcn{i}.{name}.bias"), vec![cout]);
                WnConv { shape: Conv1dShape { cin, cout, k, dilation: d }, v, g, b }
            };
            let conv1 = wn("conv1", ch);
            let conv2 = wn("conv2", cout);
            let down = (ch != cout).then(|| {
                let w = layout.push(format!("encoder.tcn{i}.downsample.weight"), vec![cout, ch, 1]);
                let b = layout.push(format!("encoder.tcn{i}.downsample.bias"), vec![cout]);
                PlainConv { shape: Conv1dShape { cin: ch, cout, k: 1, dilation: 1 }, w, b }
            });
            tcn.push(TcnBlock { conv1, conv2, down });
            ch = cout;
        }

        let joint = 2 * ch;
        let mut head = |name: &str, hidden: &[usize], out: usize| {
            let mut layers = Vec::new();
            let mut cin = joint;
            for (l, &cout) in hidden.iter().chain(std::iter::once(&out)).enumerate() {
                let k = cfg.head_kernel;
                let w = layout.push(format!("{name}.conv{l}.weight"), vec![cout, cin, k]);
                let b = layout.push(format!("{name}.conv{l}.bias"), vec![cout]);
                layers.push(PlainConv { shape: Conv1dShape { cin, cout, k, dilation: 1 }, w, b });
                cin = cout;
            }
            Head { layers }
        };
        let pref = head("pref_head", &cfg.pref_head_hidden, 2);
        let sdr = head("sdr_head", &cfg.quant_head_hidden, cfg.k_classes);
        let snr = head("snr_head", &cfg.quant_head_hidden, cfg.k_classes);
        Ok(Self { cfg, layout, inception, tcn, pref, sdr, snr })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total()
    }

    /// Weights from N(0, init_std^2), biases zero, weight-norm gains equal
    /// to the initial direction norms.
    pub fn init_params(&self, seed: u64) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, self.cfg.init_std).expect("positive std");
        let mut p = vec![0.0; self.layout.total()];
        for slot in &self.layout.slots {
            if slot.name.ends_with("weight") || slot.name.ends_with("weight_v") {
                for v in &mut p[slot.range()] {
                    *v = normal.sample(&mut rng);
                }
            }
        }
        for blk in &self.tcn {
            for c in [&blk.conv1, &blk.conv2] {
                let v = self.layout.slot(c.v).range();
                let g = self.layout.slot(c.g).offset;
                let row = c.shape.cin * c.shape.k;
                for o in 0..c.shape.cout {
                    let start = v.start + o * row;
                    p[g + o] = p[start..start + row].iter().map(|x| x * x).sum::<f64>().sqrt();
                }
            }
        }
        Params(p)
    }

    fn p<'a>(&self, params: &'a [f64], idx: usize) -> &'a [f64] {
        &params[self.layout.slot(idx).range()]
    }

    fn check_params(&self, params: &Params) -> Result<()> {
        if params.0.len() != self.layout.total() {
            return Err(Error::ShapeMismatch(format!(
                "parameter vector has {} entries, network needs {}",
                params.0.len(),
                self.layout.total()
            )));
        }
        Ok(())
    }

    fn check_spec(&self, spec: &Spectrogram) -> Result<()> {
        if spec.bins() != self.cfg.input_bins {
            return Err(Error::ShapeMismatch(format!(
                "spectrogram has {} bins, network expects {}",
                spec.bins(),
                self.cfg.input_bins
            )));
        }
        if spec.frames() == 0 {
            return Err(Error::ShapeMismatch("spectrogram has no frames".into()));
        }
        Ok(())
    }

    fn encode_tape(&self, params: &[f64], spec: &Spectrogram, mode: Mode, stream: u64) -> EncoderTape {
        let t = spec.frames();
        let bins = spec.bins();
        let fpad = self.cfg.padded_bins();
        let mut x = vec![0.0; 2 * t * fpad];
        let (mag, phase) = (spec.magnitude(), spec.phase());
        for ti in 0..t {
            for f in 0..bins {
                x[ti * fpad + f] = (mag[ti * bins + f] + self.cfg.magnitude_floor).ln();
                x[(t + ti) * fpad + f] = phase[ti * bins + f];
            }
        }

        let mut blocks = Vec::with_capacity(self.inception.len());
        let mut f = fpad;
        for blk in &self.inception {
            let cout = self.cfg.filters_per_block();
            let mut act = vec![0.0; cout * t * f];
            let mut off = 0;
            for br in &blk.branches {
                let n = br.shape.cout * t * f;
                layers::conv2d_forward(
                    br.shape,
                    &x,
                    t,
                    f,
                    self.p(params, br.w),
                    self.p(params, br.b),
                    &mut act[off..off + n],
                );
                off += n;
            }
            layers::relu_inplace(&mut act);
            let (pooled, arg) = layers::maxpool_freq(&act, cout * t, f, self.cfg.freq_pool);
            blocks.push(InceptionTape { input: std::mem::take(&mut x), act, arg, f });
            x = pooled;
            f /= self.cfg.freq_pool;
        }

        // [C, T, Fo] -> [C * Fo, T]
        let c = self.cfg.filters_per_block();
        let fo = f;
        let mut seq = vec![0.0; c * fo * t];
        for ci in 0..c {
            for ti in 0..t {
                for fi in 0..fo {
                    seq[(ci * fo + fi) * t + ti] = x[(ci * t + ti) * fo + fi];
                }
            }
        }

        let mut tcn = Vec::with_capacity(self.tcn.len());
        for (i, blk) in self.tcn.iter().enumerate() {
            let s1 = blk.conv1.shape;
            let s2 = blk.conv2.shape;
            let w1 = layers::weight_norm(self.p(params, blk.conv1.v), self.p(params, blk.conv1.g), s1.cin * s1.k);
            let w2 = layers::weight_norm(self.p(params, blk.conv2.v), self.p(params, blk.conv2.g), s2.cin * s2.k);
            let mut a1 = vec![0.0; s1.cout * t];
            layers::conv1d_forward(s1, &seq, t, &w1, self.p(params, blk.conv1.b), &mut a1);
            layers::relu_inplace(&mut a1);
            let m1 = dropout_for(mode, self.cfg.dropout, a1.len(), stream * 1000 + 2 * i as u64);
            let h1 = apply_mask(&a1, &m1);
            let mut a2 = vec![0.0; s2.cout * t];
            layers::conv1d_forward(s2, &h1, t, &w2, self.p(params, blk.conv2.b), &mut a2);
            layers::relu_inplace(&mut a2);
            let m2 = dropout_for(mode, self.cfg.dropout, a2.len(), stream * 1000 + 2 * i as u64 + 1);
            let mut out = apply_mask(&a2, &m2);
            match &blk.down {
                Some(d) => {
                    let mut r = vec![0.0; d.shape.cout * t];
                    layers::conv1d_forward(d.shape, &seq, t, self.p(params, d.w), self.p(params, d.b), &mut r);
                    add_into(&mut out, &r);
                }
                None => add_into(&mut out, &seq),
            }
            layers::relu_inplace(&mut out);
            tcn.push(TcnTape { input: std::mem::take(&mut seq), w1, w2, a1, h1, a2, m1, m2, out: out.clone() });
            seq = out;
        }

        EncoderTape { frames: t, magnitude: mag.to_vec(), blocks, tcn, output: seq }
    }

    fn encoder_backward(
        &self,
        params: &[f64],
        tape: &EncoderTape,
        gout: Vec<f64>,
        grads: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let t = tape.frames;
        let mut g = gout;
        for (blk, bt) in self.tcn.iter().zip(&tape.tcn).rev() {
            layers::relu_backward_inplace(&bt.out, &mut g);
            let s1 = blk.conv1.shape;
            let s2 = blk.conv2.shape;
            // residual branch
            let mut gx = match &blk.down {
                Some(d) => {
                    let mut gx = vec![0.0; d.shape.cin * t];
                    let (gw, gb) = two_mut(grads, self.layout.slot(d.w).range(), self.layout.slot(d.b).range());
                    layers::conv1d_backward(d.shape, &bt.input, t, self.p(params, d.w), &g, gw, gb, Some(&mut gx));
                    gx
                }
                None => g.clone(),
            };
            // conv2
            let mut ga2 = apply_mask(&g, &bt.m2);
            layers::relu_backward_inplace(&bt.a2, &mut ga2);
            let mut gw2 = vec![0.0; bt.w2.len()];
            let mut gh1 = vec![0.0; s2.cin * t];
            {
                let gb = &mut grads[self.layout.slot(blk.conv2.b).range()];
                layers::conv1d_backward(s2, &bt.h1, t, &bt.w2, &ga2, &mut gw2, gb, Some(&mut gh1));
            }
            {
                let (gv, gg) = two_mut(grads, self.layout.slot(blk.conv2.v).range(), self.layout.slot(blk.conv2.g).range());
                layers::weight_norm_backward(
                    self.p(params, blk.conv2.v),
                    self.p(params, blk.conv2.g),
                    s2.cin * s2.k,
                    &gw2,
                    gv,
                    gg,
                );
            }
            // conv1
            let mut ga1 = apply_mask(&gh1, &bt.m1);
            layers::relu_backward_inplace(&bt.a1, &mut ga1);
            let mut gw1 = vec![0.0; bt.w1.len()];
            {
                let gb = &mut grads[self.layout.slot(blk.conv1.b).range()];
                layers::conv1d_backward(s1, &bt.input, t, &bt.w1, &ga1, &mut gw1, gb, Some(&mut gx));
            }
            {
                let (gv, gg) = two_mut(grads, self.layout.slot(blk.conv1.v).range(), self.layout.slot(blk.conv1.g).range());
                layers::weight_norm_backward(
                    self.p(params, blk.conv1.v),
                    self.p(params, blk.conv1.g),
                    s1.cin * s1.k,
                    &gw1,
                    gv,
                    gg,
                );
            }
            g = gx;
        }

        // [C * Fo, T] -> [C, T, Fo]
        let c = self.cfg.filters_per_block();
        let fo = self.cfg.freq_out;
        let mut gmap = vec![0.0; c * t * fo];
        for ci in 0..c {
            for ti in 0..t {
                for fi in 0..fo {
                    gmap[(ci * t + ti) * fo + fi] = g[(ci * fo + fi) * t + ti];
                }
            }
        }

        let nblocks = self.inception.len();
        for (bi, (blk, bt)) in self.inception.iter().zip(&tape.blocks).enumerate().rev() {
            let f = bt.f;
            let mut gact = layers::maxpool_freq_backward(&gmap, &bt.arg, c * t, f, self.cfg.freq_pool);
            layers::relu_backward_inplace(&bt.act, &mut gact);
            let need_gin = bi > 0 || want_input;
            let mut gin = need_gin.then(|| vec![0.0; blk.cin * t * f]);
            let mut off = 0;
            for br in &blk.branches {
                let n = br.shape.cout * t * f;
                let (gw, gb) = two_mut(grads, self.layout.slot(br.w).range(), self.layout.slot(br.b).range());
                layers::conv2d_backward(
                    br.shape,
                    &bt.input,
                    t,
                    f,
                    self.p(params, br.w),
                    &gact[off..off + n],
                    gw,
                    gb,
                    gin.as_deref_mut(),
                );
                off += n;
            }
            match gin {
                Some(gi) if bi > 0 => gmap = gi,
                Some(gi) => {
                    debug_assert_eq!(bi, 0);
                    let _ = nblocks;
                    // Strip frequency padding and undo the log compression.
                    let bins = self.cfg.input_bins;
                    let mut gspec = vec![0.0; 2 * t * bins];
                    for ti in 0..t {
                        for fb in 0..bins {
                            let m = tape.magnitude[ti * bins + fb];
                            gspec[ti * bins + fb] = gi[ti * f + fb] / (m + self.cfg.magnitude_floor);
                            gspec[(t + ti) * bins + fb] = gi[(t + ti) * f + fb];
                        }
                    }
                    return Some(gspec);
                }
                None => return None,
            }
        }
        None
    }

    fn head_forward(&self, params: &[f64], head: &Head, x: &[f64], t: usize, mode: Mode, stream: u64) -> HeadTape {
        let mut input = x.to_vec();
        let mut tapes = Vec::with_capacity(head.layers.len());
        let last = head.layers.len() - 1;
        for (l, layer) in head.layers.iter().enumerate() {
            let mut act = vec![0.0; layer.shape.cout * t];
            layers::conv1d_forward(layer.shape, &input, t, self.p(params, layer.w), self.p(params, layer.b), &mut act);
            if l < last {
                layers::relu_inplace(&mut act);
                let mask = dropout_for(mode, self.cfg.dropout, act.len(), stream * 1000 + l as u64);
                let next = apply_mask(&act, &mask);
                tapes.push(HeadLayerTape { input: std::mem::replace(&mut input, next), act, mask });
            } else {
                tapes.push(HeadLayerTape { input: std::mem::take(&mut input), act, mask: None });
            }
        }
        let classes = head.layers[last].shape.cout;
        let probs = layers::softmax_frames(&tapes[last].act, classes, t);
        HeadTape { layers: tapes, probs, classes }
    }

    /// Returns the gradient with respect to the head input.
    fn head_backward(&self, params: &[f64], head: &Head, tape: &HeadTape, gpooled: &[f64], t: usize, grads: &mut [f64]) -> Vec<f64> {
        let c = tape.classes;
        let mut g = vec![0.0; c * t];
        for ti in 0..t {
            let s = &tape.probs[ti * c..(ti + 1) * c];
            let inner: f64 = s.iter().zip(gpooled).map(|(a, b)| a * b).sum();
            for k in 0..c {
                g[k * t + ti] = s[k] * (gpooled[k] - inner) / t as f64;
            }
        }
        let last = head.layers.len() - 1;
        for (l, (layer, lt)) in head.layers.iter().zip(&tape.layers).enumerate().rev() {
            if l < last {
                g = apply_mask(&g, &lt.mask);
                layers::relu_backward_inplace(&lt.act, &mut g);
            }
            let mut gin = vec![0.0; layer.shape.cin * t];
            let (gw, gb) = two_mut(grads, self.layout.slot(layer.w).range(), self.layout.slot(layer.b).range());
            layers::conv1d_backward(layer.shape, &lt.input, t, self.p(params, layer.w), &g, gw, gb, Some(&mut gin));
            g = gin;
        }
        g
    }

    /// Shared encoder applied to one spectrogram.
    pub fn encode(&self, params: &Params, spec: &Spectrogram, mode: Mode) -> Result<FrameEmbedding> {
        self.check_params(params)?;
        self.check_spec(spec)?;
        let tape = self.encode_tape(&params.0, spec, mode, 0);
        let d = self.cfg.embedding_dim();
        let t = tape.frames;
        let mut data = vec![0.0; t * d];
        for c in 0..d {
            for ti in 0..t {
                data[ti * d + c] = tape.output[c * t + ti];
            }
        }
        Ok(FrameEmbedding { data, frames: t, dim: d })
    }

    pub fn forward_pair(&self, params: &Params, first: &Spectrogram, second: &Spectrogram, mode: Mode) -> Result<ModelOutputs> {
        self.forward_pair_tape(params, first, second, mode).map(|(o, _)| o)
    }

    pub fn forward_pair_tape(
        &self,
        params: &Params,
        first: &Spectrogram,
        second: &Spectrogram,
        mode: Mode,
    ) -> Result<(ModelOutputs, PairTape)> {
        self.check_params(params)?;
        self.check_spec(first)?;
        self.check_spec(second)?;
        if first.frames() != second.frames() {
            return Err(Error::ShapeMismatch(format!(
                "inputs have {} and {} frames",
                first.frames(),
                second.frames()
            )));
        }
        let p = &params.0;
        let e1 = self.encode_tape(p, first, mode, 1);
        let e2 = self.encode_tape(p, second, mode, 2);
        let t = e1.frames;
        let mut joint = e1.output.clone();
        joint.extend_from_slice(&e2.output);
        let pref = self.head_forward(p, &self.pref, &joint, t, mode, 3);
        let sdr = self.head_forward(p, &self.sdr, &joint, t, mode, 4);
        let snr = self.head_forward(p, &self.snr, &joint, t, mode, 5);
        let pool = |probs: &[f64], c: usize| -> Vec<f64> {
            let mut m = vec![0.0; c];
            for row in probs.chunks_exact(c) {
                add_into(&mut m, row);
            }
            m.iter_mut().for_each(|v| *v /= t as f64);
            m
        };
        let pp = pool(&pref.probs, 2);
        let k = self.cfg.k_classes;
        let outputs = ModelOutputs {
            frames: t,
            k_classes: k,
            pref_frame: pref.probs.clone(),
            pref_pooled: [pp[0], pp[1]],
            sdr_pooled: pool(&sdr.probs, k),
            sdr_frame: sdr.probs.clone(),
            snr_pooled: pool(&snr.probs, k),
            snr_frame: snr.probs.clone(),
        };
        Ok((outputs, PairTape { first: e1, second: e2, pref, sdr, snr }))
    }

    /// Backpropagates loss gradients on the pooled outputs to every parameter
    /// and, on request, to the input spectrograms.
    pub fn backward(&self, params: &Params, tape: &PairTape, og: &OutputGrads, inputs: InputGrads) -> Result<PairGradients> {
        self.check_params(params)?;
        let p = &params.0;
        let t = tape.first.frames;
        let mut grads = vec![0.0; self.layout.total()];
        let d = self.cfg.embedding_dim();
        let mut gjoint = self.head_backward(p, &self.pref, &tape.pref, &og.pref, t, &mut grads);
        for (head, ht, g) in [(&self.sdr, &tape.sdr, &og.sdr), (&self.snr, &tape.snr, &og.snr)] {
            if let Some(g) = g {
                if g.len() != self.cfg.k_classes {
                    return Err(Error::ShapeMismatch(format!("gradient over {} classes, expected {}", g.len(), self.cfg.k_classes)));
                }
                let gj = self.head_backward(p, head, ht, g, t, &mut grads);
                add_into(&mut gjoint, &gj);
            }
        }
        let g2 = gjoint.split_off(d * t);
        let spec_first = self.encoder_backward(p, &tape.first, gjoint, &mut grads, inputs.first);
        let spec_second = self.encoder_backward(p, &tape.second, g2, &mut grads, inputs.second);
        Ok(PairGradients { params: grads, spec_first, spec_second })
    }
}

/// Two disjoint mutable sub-slices of one buffer.
fn two_mut(buf: &mut [f64], a: std::ops::Range<usize>, b: std::ops::Range<usize>) -> (&mut [f64], &mut [f64]) {
    assert!(a.end <= b.start || b.end <= a.start, "overlapping ranges");
    if a.start < b.start {
        let (lo, hi) = buf.split_at_mut(b.start);
        (&mut lo[a], &mut hi[..b.end - b.start])
    } else {
        let (lo, hi) = buf.split_at_mut(a.start);
        let bl = &mut lo[b];
        (&mut hi[..a.end - a.start], bl)
    }
}
