//! The wavefunction: a decoder-only transformer over occupation tokens
//! for the amplitude, plus an MLP phase head on the occupancy vector.
//!
//! All math is 64-bit and runs through one set of per-position kernels,
//! whether a forward pass recomputes a whole prefix or advances a
//! single cached step, so cached and cache-free evaluation agree bit
//! for bit. Pruned tokens get probability zero and the remaining mass
//! is renormalized, which keeps the full-space norm at exactly one.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};

use crate::kvcache::CachePool;
use crate::onv::Onv;
use crate::rng::KeyedStream;
use crate::sampler::{valid_mask, SampleBatch, SequenceModel};
use crate::{NqsError, Result};

/// Occupation tokens 0..=3; id 4 is the begin-of-sequence token.
pub const VOCAB: usize = 4;
pub const BOS: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseActivation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnsatzConfig {
    pub n_layers: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub phase_hidden: Vec<usize>,
    /// Sequence capacity: spatial orbital count plus the begin token.
    pub max_sequence: usize,
    #[serde(default = "default_phase_activation")]
    pub phase_activation: PhaseActivation,
}

fn default_phase_activation() -> PhaseActivation {
    PhaseActivation::Tanh
}

impl AnsatzConfig {
    /// Production shape: 8 layers, 8 heads, width 64, phase MLP
    /// 2K~512~512~1.
    pub fn standard(k_orbitals: usize) -> Self {
        AnsatzConfig {
            n_layers: 8,
            n_head: 8,
            d_model: 64,
            phase_hidden: vec![512, 512],
            max_sequence: k_orbitals + 1,
            phase_activation: PhaseActivation::Tanh,
        }
    }

    /// Minimal shape for gradient checks and fast tests.
    pub fn toy(k_orbitals: usize) -> Self {
        AnsatzConfig {
            n_layers: 1,
            n_head: 2,
            d_model: 4,
            phase_hidden: vec![8],
            max_sequence: k_orbitals + 1,
            phase_activation: PhaseActivation::Tanh,
        }
    }

    pub fn k_orbitals(&self) -> usize {
        self.max_sequence - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_head == 0 || self.d_model == 0 || self.max_sequence < 2
        {
            return Err(NqsError::Config("ansatz dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_head) {
            return Err(NqsError::Config(format!(
                "d_model {} not divisible by n_head {}",
                self.d_model, self.n_head
            )));
        }
        Ok(())
    }
}

/// Value of the wavefunction at one configuration:
/// Psi = exp(log_amplitude + i phase).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WavefunctionValue {
    pub log_amplitude: f64,
    pub phase: f64,
}

impl WavefunctionValue {
    /// Psi = 0, encoded as log amplitude negative infinity.
    pub const ZERO_AMPLITUDE: WavefunctionValue =
        WavefunctionValue { log_amplitude: f64::NEG_INFINITY, phase: 0.0 };

    /// Psi_self / Psi_denom as a complex number.
    pub fn ratio_over(&self, denom: &WavefunctionValue) -> Complex64 {
        if self.log_amplitude == f64::NEG_INFINITY {
            return Complex64::new(0.0, 0.0);
        }
        Complex64::from_polar(
            (self.log_amplitude - denom.log_amplitude).exp(),
            self.phase - denom.phase,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Flat parameter and gradient storage with a named-tensor schema.
/// Every bias tensor sits directly after its weight tensor, which the
/// backward pass relies on to split gradient slices safely.
pub struct ParameterSet {
    specs: Vec<TensorSpec>,
    by_name: HashMap<String, usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParameterSet {
    fn new() -> Self {
        ParameterSet {
            specs: Vec::new(),
            by_name: HashMap::new(),
            data: Vec::new(),
            grad: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, shape: &[usize]) -> usize {
        let offset = self.data.len();
        let len: usize = shape.iter().product();
        self.specs.push(TensorSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
        });
        self.by_name.insert(name.to_string(), self.specs.len() - 1);
        self.data.resize(offset + len, 0.0);
        offset
    }

    fn finish(&mut self) {
        self.grad = vec![0.0; self.data.len()];
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    fn spec_len(&self, i: usize) -> usize {
        self.specs[i].shape.iter().product()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.by_name.get(name).map(|&i| {
            let s = &self.specs[i];
            &self.data[s.offset..s.offset + self.spec_len(i)]
        })
    }

    pub fn tensor_grad(&self, name: &str) -> Option<&[f64]> {
        self.by_name.get(name).map(|&i| {
            let s = &self.specs[i];
            &self.grad[s.offset..s.offset + self.spec_len(i)]
        })
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let i = *self.by_name.get(name)?;
        let len = self.spec_len(i);
        let offset = self.specs[i].offset;
        Some(&mut self.data[offset..offset + len])
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Clone, Copy)]
struct BlockOffsets {
    ln1w: usize,
    qkvw: usize,
    attw: usize,
    ln2w: usize,
    fcw: usize,
    fcpw: usize,
}

#[derive(Clone, Copy)]
struct PhaseLayerOffsets {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

struct Layout {
    wte: usize,
    wpe: usize,
    blocks: Vec<BlockOffsets>,
    lnfw: usize,
    headw: usize,
    phase: Vec<PhaseLayerOffsets>,
}

impl Layout {
    /// Offset of the bias stored directly after a weight of `w_len`
    /// values.
    fn bias_after(w_offset: usize, w_len: usize) -> usize {
        w_offset + w_len
    }
}

fn build_layout(config: &AnsatzConfig, params: &mut ParameterSet) -> Layout {
    let c = config.d_model;
    let wte = params.push("wte", &[VOCAB + 1, c]);
    let wpe = params.push("wpe", &[config.max_sequence, c]);
    let mut blocks = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = |s: &str| format!("block{l}.{s}");
        let ln1w = params.push(&p("ln1w"), &[c]);
        params.push(&p("ln1b"), &[c]);
        let qkvw = params.push(&p("qkvw"), &[3 * c, c]);
        params.push(&p("qkvb"), &[3 * c]);
        let attw = params.push(&p("attprojw"), &[c, c]);
        params.push(&p("attprojb"), &[c]);
        let ln2w = params.push(&p("ln2w"), &[c]);
        params.push(&p("ln2b"), &[c]);
        let fcw = params.push(&p("fcw"), &[4 * c, c]);
        params.push(&p("fcb"), &[4 * c]);
        let fcpw = params.push(&p("fcprojw"), &[c, 4 * c]);
        params.push(&p("fcprojb"), &[c]);
        blocks.push(BlockOffsets { ln1w, qkvw, attw, ln2w, fcw, fcpw });
    }
    let lnfw = params.push("lnfw", &[c]);
    params.push("lnfb", &[c]);
    let headw = params.push("headw", &[VOCAB, c]);
    params.push("headb", &[VOCAB]);

    let mut dims = vec![2 * config.k_orbitals()];
    dims.extend(&config.phase_hidden);
    dims.push(1);
    let mut phase = Vec::new();
    for (l, pair) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let w = params.push(&format!("phase.w{l}"), &[fan_out, fan_in]);
        let b = params.push(&format!("phase.b{l}"), &[fan_out]);
        phase.push(PhaseLayerOffsets { w, b, fan_in, fan_out });
    }
    Layout { wte, wpe, blocks, lnfw, headw, phase }
}

/// Role of a named tensor, used for initialization scale and for
/// optimizers that decay plain weights only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    LayerNormWeight,
    Bias,
}

pub fn tensor_kind(name: &str) -> TensorKind {
    let last = name.rsplit('.').next().unwrap();
    if last.starts_with("ln") {
        if last.ends_with('w') {
            TensorKind::LayerNormWeight
        } else {
            TensorKind::Bias
        }
    } else if last == "wte" || last == "wpe" {
        TensorKind::Weight
    } else if last.starts_with('b') || last.ends_with('b') {
        TensorKind::Bias
    } else {
        TensorKind::Weight
    }
}

/// Mutable gradient slices for a weight tensor and the bias stored
/// right after it.
fn weight_bias_grads(
    grad: &mut [f64],
    w_offset: usize,
    w_len: usize,
    b_len: usize,
) -> (&mut [f64], &mut [f64]) {
    grad[w_offset..w_offset + w_len + b_len].split_at_mut(w_len)
}

// Per-position kernels. Every reduction runs in ascending index order
// so a value computed here is identical wherever the kernel is called
// from.

fn layernorm_pos(out: &mut [f64], x: &[f64], w: &[f64], b: &[f64]) -> (f64, f64) {
    let c = x.len();
    let mean = x.iter().sum::<f64>() / c as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
    let rstd = 1.0 / (var + 1e-5).sqrt();
    for i in 0..c {
        out[i] = (x[i] - mean) * rstd * w[i] + b[i];
    }
    (mean, rstd)
}

#[allow(clippy::too_many_arguments)]
fn layernorm_backward_pos(
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
    dout: &[f64],
    x: &[f64],
    w: &[f64],
    mean: f64,
    rstd: f64,
) {
    let c = x.len();
    let mut dnorm_mean = 0.0;
    let mut dnorm_norm_mean = 0.0;
    for i in 0..c {
        let norm = (x[i] - mean) * rstd;
        let dnorm = dout[i] * w[i];
        dnorm_mean += dnorm;
        dnorm_norm_mean += dnorm * norm;
    }
    dnorm_mean /= c as f64;
    dnorm_norm_mean /= c as f64;
    for i in 0..c {
        let norm = (x[i] - mean) * rstd;
        let dnorm = dout[i] * w[i];
        dx[i] += (dnorm - dnorm_mean - norm * dnorm_norm_mean) * rstd;
        dw[i] += dout[i] * norm;
        db[i] += dout[i];
    }
}

fn matmul_pos(out: &mut [f64], x: &[f64], w: &[f64], b: &[f64]) {
    let fan_in = x.len();
    for (o, slot) in out.iter_mut().enumerate() {
        let row = &w[o * fan_in..(o + 1) * fan_in];
        let mut acc = b[o];
        for i in 0..fan_in {
            acc += x[i] * row[i];
        }
        *slot = acc;
    }
}

fn matmul_backward_pos(
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
    dout: &[f64],
    x: &[f64],
    w: &[f64],
) {
    let fan_in = x.len();
    for (o, &go) in dout.iter().enumerate() {
        let row = &w[o * fan_in..(o + 1) * fan_in];
        let drow = &mut dw[o * fan_in..(o + 1) * fan_in];
        for i in 0..fan_in {
            dx[i] += go * row[i];
            drow[i] += go * x[i];
        }
        db[o] += go;
    }
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_backward(x: f64, dout: f64) -> f64 {
    let cube = 0.044715 * x * x * x;
    let t = (GELU_SCALE * (x + cube)).tanh();
    let sech2 = 1.0 - t * t;
    let local =
        0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_SCALE * (1.0 + 3.0 * 0.044715 * x * x);
    dout * local
}

/// Causal attention for one query position over `rows` stored
/// positions. Keys and values are row-major [rows, d_model] with heads
/// interleaved along d_model. When `att_save` is given as
/// (buffer, row_capacity), each head's normalized attention row is
/// recorded at buffer[head * row_capacity ..] for the backward pass.
#[allow(clippy::too_many_arguments)]
fn attend_pos(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    rows: usize,
    n_head: usize,
    out: &mut [f64],
    att_scratch: &mut [f64],
    mut att_save: Option<(&mut [f64], usize)>,
) {
    let c = q.len();
    let hs = c / n_head;
    let scale = 1.0 / (hs as f64).sqrt();
    for h in 0..n_head {
        let qh = &q[h * hs..(h + 1) * hs];
        let att = &mut att_scratch[..rows];
        let mut maxv = f64::NEG_INFINITY;
        for (j, slot) in att.iter_mut().enumerate() {
            let kh = &keys[j * c + h * hs..j * c + (h + 1) * hs];
            let mut score = 0.0;
            for i in 0..hs {
                score += qh[i] * kh[i];
            }
            score *= scale;
            *slot = score;
            if score > maxv {
                maxv = score;
            }
        }
        let mut total = 0.0;
        for a in att.iter_mut() {
            *a = (*a - maxv).exp();
            total += *a;
        }
        let inv = 1.0 / total;
        for a in att.iter_mut() {
            *a *= inv;
        }
        let oh = &mut out[h * hs..(h + 1) * hs];
        oh.fill(0.0);
        for j in 0..rows {
            let vh = &values[j * c + h * hs..j * c + (h + 1) * hs];
            let a = att[j];
            for i in 0..hs {
                oh[i] += a * vh[i];
            }
        }
        if let Some((buf, capacity)) = att_save.as_mut() {
            buf[h * *capacity..h * *capacity + rows].copy_from_slice(att);
        }
    }
}

/// Masked next-token distribution from raw logits: disallowed tokens
/// get probability zero, the rest renormalize through a log-sum-exp.
/// Returns (probabilities, log probabilities).
fn masked_distribution(logits: &[f64; 4], mask: u8) -> ([f64; 4], [f64; 4]) {
    let mut maxv = f64::NEG_INFINITY;
    for (t, &logit) in logits.iter().enumerate() {
        if mask >> t & 1 == 1 && logit > maxv {
            maxv = logit;
        }
    }
    let mut probs = [0.0; 4];
    let mut logp = [f64::NEG_INFINITY; 4];
    if maxv == f64::NEG_INFINITY {
        return (probs, logp);
    }
    let mut total = 0.0;
    for (t, &logit) in logits.iter().enumerate() {
        if mask >> t & 1 == 1 {
            total += (logit - maxv).exp();
        }
    }
    let lse = maxv + total.ln();
    for t in 0..4 {
        if mask >> t & 1 == 1 {
            logp[t] = logits[t] - lse;
            probs[t] = logp[t].exp();
        }
    }
    (probs, logp)
}

/// Per-sample activation storage for forward and backward passes,
/// sized once for the model's sequence capacity and reused across
/// samples. Attention rows live at [layer][pos][head][row].
struct Scratch {
    x0: Vec<f64>,
    ln1: Vec<f64>,
    ln1_stats: Vec<(f64, f64)>,
    qkv: Vec<f64>,
    att: Vec<f64>,
    atty: Vec<f64>,
    attproj: Vec<f64>,
    res2: Vec<f64>,
    ln2: Vec<f64>,
    ln2_stats: Vec<(f64, f64)>,
    fch: Vec<f64>,
    fch_gelu: Vec<f64>,
    fcproj: Vec<f64>,
    res3: Vec<f64>,
    lnf: Vec<f64>,
    lnf_stats: Vec<(f64, f64)>,
    logits: Vec<f64>,
    probs: Vec<f64>,
    logp: Vec<f64>,
    phase_acts: Vec<Vec<f64>>,
    d_res: Vec<f64>,
    d_ln: Vec<f64>,
    d_qkv: Vec<f64>,
    d_atty: Vec<f64>,
    d_fch: Vec<f64>,
    d_fch_gelu: Vec<f64>,
    datt_row: Vec<f64>,
    dpre_row: Vec<f64>,
}

impl Scratch {
    fn new(config: &AnsatzConfig) -> Self {
        let c = config.d_model;
        let t = config.max_sequence;
        let l = config.n_layers;
        let h = config.n_head;
        let mut dims = vec![2 * config.k_orbitals()];
        dims.extend(&config.phase_hidden);
        dims.push(1);
        Scratch {
            x0: vec![0.0; t * c],
            ln1: vec![0.0; l * t * c],
            ln1_stats: vec![(0.0, 0.0); l * t],
            qkv: vec![0.0; l * t * 3 * c],
            att: vec![0.0; l * t * h * t],
            atty: vec![0.0; l * t * c],
            attproj: vec![0.0; l * t * c],
            res2: vec![0.0; l * t * c],
            ln2: vec![0.0; l * t * c],
            ln2_stats: vec![(0.0, 0.0); l * t],
            fch: vec![0.0; l * t * 4 * c],
            fch_gelu: vec![0.0; l * t * 4 * c],
            fcproj: vec![0.0; l * t * c],
            res3: vec![0.0; l * t * c],
            lnf: vec![0.0; t * c],
            lnf_stats: vec![(0.0, 0.0); t],
            logits: vec![0.0; t * VOCAB],
            probs: vec![0.0; t * VOCAB],
            logp: vec![0.0; t * VOCAB],
            phase_acts: dims.iter().map(|&d| vec![0.0; d]).collect(),
            d_res: vec![0.0; t * c],
            d_ln: vec![0.0; t * c],
            d_qkv: vec![0.0; t * 3 * c],
            d_atty: vec![0.0; t * c],
            d_fch: vec![0.0; t * 4 * c],
            d_fch_gelu: vec![0.0; t * 4 * c],
            datt_row: vec![0.0; t],
            dpre_row: vec![0.0; t],
        }
    }
}

/// The neural-network wavefunction with its system context.
pub struct Ansatz {
    config: AnsatzConfig,
    n_alpha: usize,
    n_beta: usize,
    layout: Layout,
    params: ParameterSet,
}

const CHECKPOINT_MAGIC: &[u8] = b"NQSANSATZ1\n";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: AnsatzConfig,
    n_alpha: usize,
    n_beta: usize,
    tensors: Vec<TensorSpec>,
    data_len: usize,
}

impl Ansatz {
    /// Build and initialize: truncated normal (std 0.02) weights keyed
    /// by `seed` and the tensor index, unit layer norm weights, zero
    /// biases.
    pub fn new(config: AnsatzConfig, n_alpha: usize, n_beta: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let k = config.k_orbitals();
        if n_alpha > k || n_beta > k {
            return Err(NqsError::Config(format!(
                "({n_alpha}, {n_beta}) electrons do not fit {k} orbitals"
            )));
        }
        let mut params = ParameterSet::new();
        let layout = build_layout(&config, &mut params);
        params.finish();
        let mut model = Ansatz { config, n_alpha, n_beta, layout, params };
        model.initialize(seed);
        Ok(model)
    }

    fn initialize(&mut self, seed: u64) {
        for (i, spec) in self.params.specs.iter().enumerate() {
            let len: usize = spec.shape.iter().product();
            let slot = &mut self.params.data[spec.offset..spec.offset + len];
            match tensor_kind(&spec.name) {
                TensorKind::Bias => slot.fill(0.0),
                TensorKind::LayerNormWeight => slot.fill(1.0),
                TensorKind::Weight => {
                    let mut rng = KeyedStream::from_parts(&[seed, 0xA527, i as u64]);
                    for v in slot.iter_mut() {
                        *v = 0.02 * rng.next_truncated_normal();
                    }
                }
            }
        }
    }

    pub fn config(&self) -> &AnsatzConfig {
        &self.config
    }

    pub fn k_orbitals(&self) -> usize {
        self.config.k_orbitals()
    }

    pub fn electron_counts(&self) -> (usize, usize) {
        (self.n_alpha, self.n_beta)
    }

    pub fn parameters(&self) -> &ParameterSet {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    fn data(&self, offset: usize, len: usize) -> &[f64] {
        &self.params.data[offset..offset + len]
    }

    fn bias(&self, w_offset: usize, w_len: usize, b_len: usize) -> &[f64] {
        self.data(Layout::bias_after(w_offset, w_len), b_len)
    }

    /// One transformer position for one sample: embed the input token,
    /// run every block against the keys/values accumulated so far, and
    /// return the masked next-token distribution. The new keys and
    /// values land in `keys`/`values` at this position (layout
    /// [layer][pos][d_model] with `stride` positions per layer).
    #[allow(clippy::too_many_arguments)]
    fn advance_position(
        &self,
        input: u8,
        pos: usize,
        keys: &mut [f64],
        values: &mut [f64],
        stride: usize,
        att_scratch: &mut [f64],
        mut record: Option<&mut Scratch>,
        mask: u8,
    ) -> ([f64; 4], [f64; 4]) {
        let c = self.config.d_model;
        let n_head = self.config.n_head;
        let t_cap = self.config.max_sequence;
        let mut x = vec![0.0; c];
        let wte = self.data(self.layout.wte + input as usize * c, c);
        let wpe = self.data(self.layout.wpe + pos * c, c);
        for i in 0..c {
            x[i] = wte[i] + wpe[i];
        }
        if let Some(s) = record.as_deref_mut() {
            s.x0[pos * c..(pos + 1) * c].copy_from_slice(&x);
        }

        let mut ln = vec![0.0; c];
        let mut qkv = vec![0.0; 3 * c];
        let mut atty = vec![0.0; c];
        let mut proj = vec![0.0; c];
        let mut fch = vec![0.0; 4 * c];
        let mut fch_gelu = vec![0.0; 4 * c];
        for (l, block) in self.layout.blocks.iter().enumerate() {
            let ln1_stats = layernorm_pos(
                &mut ln,
                &x,
                self.data(block.ln1w, c),
                self.bias(block.ln1w, c, c),
            );
            matmul_pos(
                &mut qkv,
                &ln,
                self.data(block.qkvw, 3 * c * c),
                self.bias(block.qkvw, 3 * c * c, 3 * c),
            );
            let base = l * stride * c + pos * c;
            keys[base..base + c].copy_from_slice(&qkv[c..2 * c]);
            values[base..base + c].copy_from_slice(&qkv[2 * c..3 * c]);
            {
                let att_save = match record.as_deref_mut() {
                    Some(s) => {
                        let off = (l * t_cap + pos) * n_head * t_cap;
                        Some((&mut s.att[off..off + n_head * t_cap], t_cap))
                    }
                    None => None,
                };
                attend_pos(
                    &qkv[..c],
                    &keys[l * stride * c..l * stride * c + (pos + 1) * c],
                    &values[l * stride * c..l * stride * c + (pos + 1) * c],
                    pos + 1,
                    n_head,
                    &mut atty,
                    att_scratch,
                    att_save,
                );
            }
            matmul_pos(
                &mut proj,
                &atty,
                self.data(block.attw, c * c),
                self.bias(block.attw, c * c, c),
            );
            if let Some(s) = record.as_deref_mut() {
                s.ln1[l * t_cap * c + pos * c..l * t_cap * c + (pos + 1) * c]
                    .copy_from_slice(&ln);
                s.ln1_stats[l * t_cap + pos] = ln1_stats;
                s.qkv[l * t_cap * 3 * c + pos * 3 * c..l * t_cap * 3 * c + (pos + 1) * 3 * c]
                    .copy_from_slice(&qkv);
                s.atty[l * t_cap * c + pos * c..l * t_cap * c + (pos + 1) * c]
                    .copy_from_slice(&atty);
                s.attproj[l * t_cap * c + pos * c..l * t_cap * c + (pos + 1) * c]
                    .copy_from_slice(&proj);
            }
            for i in 0..c {
                x[i] += proj[i];
            }
            if let Some(s) = record.as_deref_mut() {
                s.res2[l * t_cap * c + pos * c..l * t_cap * c + (pos + 1) * c]
                    .copy_from_slice(&x);
            }
            let ln2_stats = layernorm_pos(
                &mut ln,
                &x,
                self.data(block.ln2w, c),
                self.bias(block.ln2w, c, c),
            );
            matmul_pos(
                &mut fch,
                &ln,
                self.data(block.fcw, 4 * c * c),
                self.bias(block.fcw, 4 * c * c, 4 * c),
            );
            for i in 0..4 * c {
                fch_gelu[i] = gelu(fch[i]);
            }
            matmul_pos(
                &mut proj,
                &fch_gelu,
                self.data(block.fcpw, c * 4 * c),
                self.bias(block.fcpw, c * 4 * c, c),
            );
            if let Some(s) = record.as_deref_mut() {
                s.ln2[l * t_cap * c + pos * c..l * t_cap * c + (pos + 1) * c]
                    .copy_from_slice(&ln);
                s.ln2_stats[l * t_cap + pos] = ln2_stats;
                s.fch[l * t_cap * 4 * c + pos * 4 * c..l * t_cap * 4 * c + (pos + 1) * 4 * c]
                    .copy_from_slice(&fch);
                s.fch_gelu
                    [l * t_cap * 4 * c + pos * 4 * c..l * t_cap * 4 * c + (pos + 1) * 4 * c]
                    .copy_from_slice(&fch_gelu);
                s.fcproj[l * t_cap * c + pos * c..l * t_cap * c + (pos + 1) * c]
                    .copy_from_slice(&proj);
            }
            for i in 0..c {
                x[i] += proj[i];
            }
            if let Some(s) = record.as_deref_mut() {
                s.res3[l * t_cap * c + pos * c..l * t_cap * c + (pos + 1) * c]
                    .copy_from_slice(&x);
            }
        }

        let lnf_stats = layernorm_pos(
            &mut ln,
            &x,
            self.data(self.layout.lnfw, c),
            self.bias(self.layout.lnfw, c, c),
        );
        let mut logits = [0.0; 4];
        matmul_pos(
            &mut logits,
            &ln,
            self.data(self.layout.headw, VOCAB * c),
            self.bias(self.layout.headw, VOCAB * c, VOCAB),
        );
        let (probs, logp) = masked_distribution(&logits, mask);
        if let Some(s) = record {
            s.lnf[pos * c..(pos + 1) * c].copy_from_slice(&ln);
            s.lnf_stats[pos] = lnf_stats;
            s.logits[pos * VOCAB..(pos + 1) * VOCAB].copy_from_slice(&logits);
            s.probs[pos * VOCAB..(pos + 1) * VOCAB].copy_from_slice(&probs);
            s.logp[pos * VOCAB..(pos + 1) * VOCAB].copy_from_slice(&logp);
        }
        (probs, logp)
    }

    /// Full forward over a token string, recording activations when a
    /// scratch is supplied. Returns the log amplitude.
    fn forward_tokens(&self, tokens: &[u8], mut scratch: Option<&mut Scratch>) -> f64 {
        let k = self.k_orbitals();
        assert_eq!(tokens.len(), k, "token string does not match orbital count");
        let c = self.config.d_model;
        let l = self.config.n_layers;
        let mut keys = vec![0.0; l * k * c];
        let mut values = vec![0.0; l * k * c];
        let mut att_scratch = vec![0.0; self.config.max_sequence];
        let mut log_amp = 0.0;
        let mut alpha = 0;
        let mut beta = 0;
        for (t, &tok) in tokens.iter().enumerate() {
            let input = if t == 0 { BOS } else { tokens[t - 1] };
            let mask = valid_mask(alpha, beta, t, k, self.n_alpha, self.n_beta);
            let (_, logp) = self.advance_position(
                input,
                t,
                &mut keys,
                &mut values,
                k,
                &mut att_scratch,
                scratch.as_deref_mut(),
                mask,
            );
            log_amp += 0.5 * logp[tok as usize];
            alpha += (tok & 1) as usize;
            beta += (tok >> 1) as usize;
        }
        log_amp
    }

    /// Phase head on the occupancy vector, recording layer outputs when
    /// a scratch is supplied.
    fn phase_of(&self, occupancy: &[f64], scratch: Option<&mut Scratch>) -> f64 {
        let mut local: Vec<Vec<f64>>;
        let acts: &mut Vec<Vec<f64>> = match scratch {
            Some(s) => &mut s.phase_acts,
            None => {
                let mut dims = vec![occupancy.len()];
                dims.extend(&self.config.phase_hidden);
                dims.push(1);
                local = dims.into_iter().map(|d| vec![0.0; d]).collect();
                &mut local
            }
        };
        acts[0].copy_from_slice(occupancy);
        let depth = self.layout.phase.len();
        for (l, off) in self.layout.phase.iter().enumerate() {
            let (prev, rest) = acts.split_at_mut(l + 1);
            matmul_pos(
                &mut rest[0],
                &prev[l],
                self.data(off.w, off.fan_out * off.fan_in),
                self.data(off.b, off.fan_out),
            );
            if l + 1 < depth {
                for v in rest[0].iter_mut() {
                    *v = match self.config.phase_activation {
                        PhaseActivation::Tanh => v.tanh(),
                        PhaseActivation::Relu => v.max(0.0),
                    };
                }
            }
        }
        acts[depth][0]
    }

    fn occupancy_of_tokens(tokens: &[u8]) -> Vec<f64> {
        let mut occ = vec![0.0; 2 * tokens.len()];
        for (k, &tok) in tokens.iter().enumerate() {
            occ[2 * k] = (tok & 1) as f64;
            occ[2 * k + 1] = (tok >> 1) as f64;
        }
        occ
    }

    /// Evaluate on a token string (length K, tokens 0..=3).
    pub fn evaluate_tokens(&self, tokens: &[u8]) -> WavefunctionValue {
        let log_amplitude = self.forward_tokens(tokens, None);
        if log_amplitude == f64::NEG_INFINITY {
            return WavefunctionValue::ZERO_AMPLITUDE;
        }
        let phase = self.phase_of(&Self::occupancy_of_tokens(tokens), None);
        WavefunctionValue { log_amplitude, phase }
    }

    /// Masked conditionals for the next token of each prefix by full
    /// recomputation, no cache involved.
    pub fn conditionals_nocache(&self, prefixes: &[Vec<u8>]) -> Result<Vec<[f64; 4]>> {
        let k = self.k_orbitals();
        let c = self.config.d_model;
        let l = self.config.n_layers;
        prefixes
            .iter()
            .map(|prefix| {
                if prefix.len() >= k {
                    return Err(NqsError::Range(format!(
                        "depth-{} prefix has no next orbital among {k}",
                        prefix.len()
                    )));
                }
                let depth = prefix.len();
                let mut keys = vec![0.0; l * (depth + 1) * c];
                let mut values = vec![0.0; l * (depth + 1) * c];
                let mut att_scratch = vec![0.0; self.config.max_sequence];
                let mut alpha = 0;
                let mut beta = 0;
                let mut last = [0.0; 4];
                for pos in 0..=depth {
                    let input = if pos == 0 { BOS } else { prefix[pos - 1] };
                    if pos > 0 {
                        alpha += (prefix[pos - 1] & 1) as usize;
                        beta += (prefix[pos - 1] >> 1) as usize;
                    }
                    let mask = valid_mask(alpha, beta, pos, k, self.n_alpha, self.n_beta);
                    let (probs, _) = self.advance_position(
                        input,
                        pos,
                        &mut keys,
                        &mut values,
                        depth + 1,
                        &mut att_scratch,
                        None,
                        mask,
                    );
                    last = probs;
                }
                Ok(last)
            })
            .collect()
    }

    /// Backward pass for the weighted objective
    /// L = 2 Re[sum_n w_n ln Psi*(n)]: gradients of L replace the
    /// parameter set's gradient slots. Real parts of the weights drive
    /// the amplitude network, imaginary parts the phase network.
    /// Deterministic for any thread count: samples split into a fixed
    /// shard layout and shard partials reduce in shard order.
    pub fn backward(&mut self, samples: &SampleBatch, weights: &[Complex64]) -> Result<()> {
        if samples.len() != weights.len() {
            return Err(NqsError::Dimension(format!(
                "{} weights for {} samples",
                weights.len(),
                samples.len()
            )));
        }
        if samples.depth != self.k_orbitals() {
            return Err(NqsError::Dimension(format!(
                "samples at depth {} for a {}-orbital model",
                samples.depth,
                self.k_orbitals()
            )));
        }
        let n = samples.len();
        let shards = n.div_ceil(256).clamp(1, 16);
        let per_shard = n.div_ceil(shards);
        let this: &Ansatz = &*self;
        let partials: Vec<Vec<f64>> = (0..shards)
            .into_par_iter()
            .map(|shard| {
                let mut grad = vec![0.0; this.params.len()];
                let mut scratch = Scratch::new(&this.config);
                let lo = shard * per_shard;
                let hi = ((shard + 1) * per_shard).min(n);
                for (prefix, &weight) in
                    samples.prefixes[lo..hi].iter().zip(&weights[lo..hi])
                {
                    this.backward_sample(prefix, weight, &mut scratch, &mut grad);
                }
                grad
            })
            .collect();
        self.params.zero_grad();
        for partial in partials {
            for (g, p) in self.params.grad.iter_mut().zip(partial) {
                *g += p;
            }
        }
        Ok(())
    }

    fn backward_sample(
        &self,
        tokens: &[u8],
        weight: Complex64,
        s: &mut Scratch,
        grad: &mut [f64],
    ) {
        let amp_scale = weight.re;
        let phase_scale = 2.0 * weight.im;
        let c = self.config.d_model;
        let n_head = self.config.n_head;
        let hs = c / n_head;
        let t_cap = self.config.max_sequence;
        let k = self.k_orbitals();

        if phase_scale != 0.0 {
            let occupancy = Self::occupancy_of_tokens(tokens);
            self.phase_of(&occupancy, Some(s));
            let depth = self.layout.phase.len();
            let mut delta = vec![phase_scale];
            for l in (0..depth).rev() {
                let off = self.layout.phase[l];
                let mut dinput = vec![0.0; off.fan_in];
                let (gw, gb) =
                    weight_bias_grads(grad, off.w, off.fan_out * off.fan_in, off.fan_out);
                matmul_backward_pos(
                    &mut dinput,
                    gw,
                    gb,
                    &delta,
                    &s.phase_acts[l],
                    self.data(off.w, off.fan_out * off.fan_in),
                );
                if l > 0 {
                    for (d, &a) in dinput.iter_mut().zip(&s.phase_acts[l]) {
                        *d *= match self.config.phase_activation {
                            PhaseActivation::Tanh => 1.0 - a * a,
                            PhaseActivation::Relu => {
                                if a > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                    }
                }
                delta = dinput;
            }
        }

        if amp_scale == 0.0 {
            return;
        }

        self.forward_tokens(tokens, Some(s));

        // head and final layer norm
        s.d_res[..k * c].fill(0.0);
        let mut dlogits = [0.0; 4];
        let mut d_lnf = vec![0.0; c];
        for (t, &token) in tokens.iter().enumerate() {
            let tok = token as usize;
            for (j, slot) in dlogits.iter_mut().enumerate() {
                let indicator = if j == tok { 1.0 } else { 0.0 };
                *slot = amp_scale * (indicator - s.probs[t * VOCAB + j]);
            }
            d_lnf.fill(0.0);
            let (gw, gb) = weight_bias_grads(grad, self.layout.headw, VOCAB * c, VOCAB);
            matmul_backward_pos(
                &mut d_lnf,
                gw,
                gb,
                &dlogits,
                &s.lnf[t * c..(t + 1) * c],
                self.data(self.layout.headw, VOCAB * c),
            );
            let (mean, rstd) = s.lnf_stats[t];
            let last = self.config.n_layers - 1;
            let (gw, gb) = weight_bias_grads(grad, self.layout.lnfw, c, c);
            layernorm_backward_pos(
                &mut s.d_res[t * c..(t + 1) * c],
                gw,
                gb,
                &d_lnf,
                &s.res3[last * t_cap * c + t * c..last * t_cap * c + (t + 1) * c],
                self.data(self.layout.lnfw, c),
                mean,
                rstd,
            );
        }

        // blocks in reverse; d_res carries the residual-stream gradient
        for l in (0..self.config.n_layers).rev() {
            let block = self.layout.blocks[l];
            let base = l * t_cap * c;
            let base4 = l * t_cap * 4 * c;

            // MLP branch
            s.d_fch_gelu[..k * 4 * c].fill(0.0);
            s.d_fch[..k * 4 * c].fill(0.0);
            s.d_ln[..k * c].fill(0.0);
            for t in 0..k {
                let dout = s.d_res[t * c..(t + 1) * c].to_vec();
                let (gw, gb) = weight_bias_grads(grad, block.fcpw, c * 4 * c, c);
                matmul_backward_pos(
                    &mut s.d_fch_gelu[t * 4 * c..(t + 1) * 4 * c],
                    gw,
                    gb,
                    &dout,
                    &s.fch_gelu[base4 + t * 4 * c..base4 + (t + 1) * 4 * c],
                    self.data(block.fcpw, c * 4 * c),
                );
                for i in 0..4 * c {
                    s.d_fch[t * 4 * c + i] = gelu_backward(
                        s.fch[base4 + t * 4 * c + i],
                        s.d_fch_gelu[t * 4 * c + i],
                    );
                }
                let (gw, gb) = weight_bias_grads(grad, block.fcw, 4 * c * c, 4 * c);
                matmul_backward_pos(
                    &mut s.d_ln[t * c..(t + 1) * c],
                    gw,
                    gb,
                    &s.d_fch[t * 4 * c..(t + 1) * 4 * c],
                    &s.ln2[base + t * c..base + (t + 1) * c],
                    self.data(block.fcw, 4 * c * c),
                );
                let (mean, rstd) = s.ln2_stats[l * t_cap + t];
                let (gw, gb) = weight_bias_grads(grad, block.ln2w, c, c);
                // the residual path accumulates into d_res in place
                layernorm_backward_pos(
                    &mut s.d_res[t * c..(t + 1) * c],
                    gw,
                    gb,
                    &s.d_ln[t * c..(t + 1) * c],
                    &s.res2[base + t * c..base + (t + 1) * c],
                    self.data(block.ln2w, c),
                    mean,
                    rstd,
                );
            }

            // attention branch
            s.d_atty[..k * c].fill(0.0);
            s.d_qkv[..k * 3 * c].fill(0.0);
            for t in 0..k {
                let dout = s.d_res[t * c..(t + 1) * c].to_vec();
                let (gw, gb) = weight_bias_grads(grad, block.attw, c * c, c);
                matmul_backward_pos(
                    &mut s.d_atty[t * c..(t + 1) * c],
                    gw,
                    gb,
                    &dout,
                    &s.atty[base + t * c..base + (t + 1) * c],
                    self.data(block.attw, c * c),
                );
            }
            let scale = 1.0 / (hs as f64).sqrt();
            for h in 0..n_head {
                for t in 0..k {
                    let att = &s.att[((l * t_cap + t) * n_head + h) * t_cap..][..t + 1];
                    let datty = &s.d_atty[t * c + h * hs..t * c + (h + 1) * hs];
                    let datt = &mut s.datt_row[..t + 1];
                    datt.fill(0.0);
                    for j in 0..=t {
                        let v =
                            &s.qkv[l * t_cap * 3 * c + j * 3 * c + 2 * c + h * hs..][..hs];
                        let mut acc = 0.0;
                        for (vi, di) in v.iter().zip(datty) {
                            acc += vi * di;
                        }
                        datt[j] = acc;
                        for (i, &di) in datty.iter().enumerate() {
                            s.d_qkv[j * 3 * c + 2 * c + h * hs + i] += att[j] * di;
                        }
                    }
                    let dpre = &mut s.dpre_row[..t + 1];
                    dpre.fill(0.0);
                    for k_att in 0..=t {
                        let factor = att[k_att] * datt[k_att];
                        for (j, (slot, &a)) in dpre.iter_mut().zip(att).enumerate() {
                            let indicator = if j == k_att { 1.0 } else { 0.0 };
                            *slot += factor * (indicator - a);
                        }
                    }
                    let q = &s.qkv[l * t_cap * 3 * c + t * 3 * c + h * hs..][..hs];
                    for (j, &dp) in dpre.iter().enumerate() {
                        let kv =
                            &s.qkv[l * t_cap * 3 * c + j * 3 * c + c + h * hs..][..hs];
                        for i in 0..hs {
                            s.d_qkv[t * 3 * c + h * hs + i] += scale * dp * kv[i];
                            s.d_qkv[j * 3 * c + c + h * hs + i] += scale * dp * q[i];
                        }
                    }
                }
            }
            s.d_ln[..k * c].fill(0.0);
            for t in 0..k {
                let (gw, gb) = weight_bias_grads(grad, block.qkvw, 3 * c * c, 3 * c);
                matmul_backward_pos(
                    &mut s.d_ln[t * c..(t + 1) * c],
                    gw,
                    gb,
                    &s.d_qkv[t * 3 * c..(t + 1) * 3 * c],
                    &s.ln1[base + t * c..base + (t + 1) * c],
                    self.data(block.qkvw, 3 * c * c),
                );
                let (mean, rstd) = s.ln1_stats[l * t_cap + t];
                let (gw, gb) = weight_bias_grads(grad, block.ln1w, c, c);
                if l == 0 {
                    layernorm_backward_pos(
                        &mut s.d_res[t * c..(t + 1) * c],
                        gw,
                        gb,
                        &s.d_ln[t * c..(t + 1) * c],
                        &s.x0[t * c..(t + 1) * c],
                        self.data(block.ln1w, c),
                        mean,
                        rstd,
                    );
                } else {
                    let prev = (l - 1) * t_cap * c;
                    layernorm_backward_pos(
                        &mut s.d_res[t * c..(t + 1) * c],
                        gw,
                        gb,
                        &s.d_ln[t * c..(t + 1) * c],
                        &s.res3[prev + t * c..prev + (t + 1) * c],
                        self.data(block.ln1w, c),
                        mean,
                        rstd,
                    );
                }
            }
        }

        // embeddings
        for t in 0..k {
            let input = if t == 0 { BOS } else { tokens[t - 1] } as usize;
            for i in 0..c {
                let g = s.d_res[t * c + i];
                grad[self.layout.wte + input * c + i] += g;
                grad[self.layout.wpe + t * c + i] += g;
            }
        }
    }

    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let header = CheckpointHeader {
            config: self.config.clone(),
            n_alpha: self.n_alpha,
            n_beta: self.n_beta,
            tensors: self.params.specs.clone(),
            data_len: self.params.data.len(),
        };
        let mut line = serde_json::to_string(&header)
            .map_err(|e| NqsError::Config(format!("checkpoint header: {e}")))?;
        line.push('\n');
        w.write_all(line.as_bytes())?;
        for v in &self.params.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let mut magic = vec![0u8; CHECKPOINT_MAGIC.len()];
        r.read_exact(&mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(NqsError::Parse {
                line: 1,
                msg: "not an ansatz checkpoint (magic mismatch)".into(),
            });
        }
        let mut header_bytes = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            r.read_exact(&mut byte)?;
            if byte[0] == b'\n' {
                break;
            }
            header_bytes.push(byte[0]);
        }
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| NqsError::Parse { line: 2, msg: format!("checkpoint header: {e}") })?;
        let mut model = Ansatz::new(header.config, header.n_alpha, header.n_beta, 0)?;
        if model.params.specs != header.tensors || model.params.data.len() != header.data_len {
            return Err(NqsError::Consistency(
                "checkpoint tensor schema does not match this build".into(),
            ));
        }
        let mut bytes = vec![0u8; header.data_len * 8];
        r.read_exact(&mut bytes)?;
        for (i, chunk) in bytes.chunks_exact(8).enumerate() {
            model.params.data[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(model)
    }

    /// One incremental position for one cache row: gather this row's
    /// cached keys/values, run the shared position kernel, and return
    /// the fresh per-layer K/V plus the masked conditionals.
    fn step_row(
        &self,
        prefix: &[u8],
        row: usize,
        pos: usize,
        pool: &CachePool,
    ) -> (Vec<f64>, Vec<f64>, [f64; 4]) {
        let c = self.config.d_model;
        let l = self.config.n_layers;
        let stride = pos + 1;
        let mut keys = vec![0.0; l * stride * c];
        let mut values = vec![0.0; l * stride * c];
        for layer in 0..l {
            keys[layer * stride * c..layer * stride * c + pos * c]
                .copy_from_slice(&pool.key_rows(layer, row)[..pos * c]);
            values[layer * stride * c..layer * stride * c + pos * c]
                .copy_from_slice(&pool.value_rows(layer, row)[..pos * c]);
        }
        let input = if pos == 0 { BOS } else { prefix[pos - 1] };
        let mut alpha = 0;
        let mut beta = 0;
        for &tok in &prefix[..pos] {
            alpha += (tok & 1) as usize;
            beta += (tok >> 1) as usize;
        }
        let mask = valid_mask(alpha, beta, pos, self.k_orbitals(), self.n_alpha, self.n_beta);
        let mut att_scratch = vec![0.0; self.config.max_sequence];
        let (probs, _) = self.advance_position(
            input,
            pos,
            &mut keys,
            &mut values,
            stride,
            &mut att_scratch,
            None,
            mask,
        );
        let mut k_new = vec![0.0; l * c];
        let mut v_new = vec![0.0; l * c];
        for layer in 0..l {
            let at = layer * stride * c + pos * c;
            k_new[layer * c..(layer + 1) * c].copy_from_slice(&keys[at..at + c]);
            v_new[layer * c..(layer + 1) * c].copy_from_slice(&values[at..at + c]);
        }
        (k_new, v_new, probs)
    }

    /// Advance every row by one position: run the shared kernel against
    /// each row's cached prefix and append the new K/V to the pool.
    fn advance_rows(
        &self,
        prefixes: &[Vec<u8>],
        pos: usize,
        pool: &mut CachePool,
    ) -> Result<Vec<[f64; 4]>> {
        let c = self.config.d_model;
        let l = self.config.n_layers;
        let rows: Vec<(Vec<f64>, Vec<f64>, [f64; 4])> = {
            let pool_ref: &CachePool = &*pool;
            prefixes
                .par_iter()
                .enumerate()
                .map(|(row, prefix)| self.step_row(prefix, row, pos, pool_ref))
                .collect()
        };
        let mut ks = vec![vec![0.0; prefixes.len() * c]; l];
        let mut vs = vec![vec![0.0; prefixes.len() * c]; l];
        let mut out = Vec::with_capacity(prefixes.len());
        for (row, (k_row, v_row, probs)) in rows.into_iter().enumerate() {
            for layer in 0..l {
                ks[layer][row * c..(row + 1) * c]
                    .copy_from_slice(&k_row[layer * c..(layer + 1) * c]);
                vs[layer][row * c..(row + 1) * c]
                    .copy_from_slice(&v_row[layer * c..(layer + 1) * c]);
            }
            out.push(probs);
        }
        pool.append(&ks, &vs)?;
        Ok(out)
    }
}

impl crate::eloc::Wavefunction for Ansatz {
    fn evaluate(&self, n: &Onv) -> WavefunctionValue {
        assert_eq!(
            n.n_spin_orbitals(),
            2 * self.k_orbitals(),
            "configuration does not match the model's orbital count"
        );
        self.evaluate_tokens(&n.to_tokens())
    }

    fn evaluate_batch(&self, ns: &[Onv]) -> Vec<WavefunctionValue> {
        ns.par_iter().map(|n| self.evaluate(n)).collect()
    }
}

impl SequenceModel for Ansatz {
    fn step_conditionals(
        &self,
        prefixes: &[Vec<u8>],
        pool: &mut CachePool,
    ) -> Result<Vec<[f64; 4]>> {
        if pool.live_rows() != prefixes.len() {
            return Err(NqsError::Dimension(format!(
                "{} live cache rows for {} prefixes",
                pool.live_rows(),
                prefixes.len()
            )));
        }
        if pool.n_layers() != self.config.n_layers || pool.d_model() != self.config.d_model {
            return Err(NqsError::Dimension(
                "cache pool shaped for a different model".into(),
            ));
        }
        let depth = prefixes.first().map_or(0, |p| p.len());
        if depth >= self.k_orbitals() {
            return Err(NqsError::Range(format!(
                "prefix depth {depth} has no next position"
            )));
        }
        for (row, prefix) in prefixes.iter().enumerate() {
            if prefix.len() != depth {
                return Err(NqsError::Dimension("prefixes differ in depth".into()));
            }
            if pool.valid_len(row) != depth {
                return Err(NqsError::Consistency(format!(
                    "cache row {row} holds {} positions for a depth-{depth} prefix",
                    pool.valid_len(row)
                )));
            }
        }
        self.advance_rows(prefixes, depth, pool)
    }

    fn layer_conditionals(&self, prefixes: &[Vec<u8>]) -> Result<Vec<[f64; 4]>> {
        self.conditionals_nocache(prefixes)
    }

    fn prefill(&self, prefixes: &[Vec<u8>], pool: &mut CachePool) -> Result<()> {
        let depth = prefixes.first().map_or(0, |p| p.len());
        for (row, prefix) in prefixes.iter().enumerate() {
            if prefix.len() != depth {
                return Err(NqsError::Dimension("prefixes differ in depth".into()));
            }
            if pool.valid_len(row) != 0 {
                return Err(NqsError::Consistency(format!(
                    "prefill into non-empty cache row {row}"
                )));
            }
        }
        for pos in 0..depth {
            self.advance_rows(prefixes, pos, pool)?;
        }
        Ok(())
    }

    fn max_sequence(&self) -> usize {
        self.config.max_sequence
    }
}
