//! A small transducer: windowed feed-forward encoder, one-layer recurrent
//! prediction network and a feed-forward joint network, with hand-written
//! backpropagation.
//!
//! Shapes, with `W = left_context + 1 + right_context`:
//!
//! ```text
//! encoder    e_t  = tanh(We · window_t + be)                  H
//! predictor  g_0  = tanh(E[sos] + bp)                          P
//!            g_u  = tanh(Wp · g_{u-1} + E[y_{u-1}] + bp)       P
//! joint      z    = tanh(A · e_t + B · g_u + bj)               J
//!            log P(·|t,u) = log_softmax(O · z + bo)            K + 1
//! ```
//!
//! The start-of-sequence embedding shares the blank row of `E`.

mod checkpoint;
mod optim;
mod params;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use optim::{Optimizer, OptimizerConfig};
pub use params::{Gradients, ParamSet, Tensor};
pub use train::{train_step, StepResult, UtteranceGrad};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{LabelSeq, Lattice, LatticeGrad, Vocab};
use crate::logspace::log_softmax_in_place;

/// Acoustic feature sequence `X`: `T x D`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeq {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSeq {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::dimension(
                "feature sequence",
                "T >= 1 and D >= 1",
                format!("{frames} x {dim}"),
            ));
        }
        if data.len() != frames * dim {
            return Err(Error::dimension(
                "feature buffer length",
                frames * dim,
                data.len(),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite feature at frame {}, dim {}",
                i / dim,
                i % dim
            )));
        }
        Ok(FeatureSeq { frames, dim, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub causal: bool,
    pub left_context: usize,
    /// Must be 0 when `causal`.
    pub right_context: usize,
    /// Time reduction factor; the encoder emits `ceil(T / subsample)` frames.
    pub subsample: usize,
    pub hidden: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.causal && self.right_context != 0 {
            return Err(Error::Config(format!(
                "causal encoder cannot use right context (got {})",
                self.right_context
            )));
        }
        if self.subsample == 0 {
            return Err(Error::Config("subsample must be >= 1".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("encoder hidden width must be >= 1".into()));
        }
        Ok(())
    }

    pub fn window(&self) -> usize {
        self.left_context + 1 + self.right_context
    }

    pub fn output_frames(&self, input_frames: usize) -> usize {
        input_frames.div_ceil(self.subsample)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub encoder: EncoderConfig,
    pub pred_dim: usize,
    pub joint_dim: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        Vocab::new(self.vocab_size)?;
        self.encoder.validate()?;
        if self.feature_dim == 0 || self.pred_dim == 0 || self.joint_dim == 0 {
            return Err(Error::Config(
                "feature, predictor and joint widths must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab_size).expect("validated vocabulary")
    }
}

// Tensor indices inside the parameter set.
const ENC_W: usize = 0;
const ENC_B: usize = 1;
const PRED_EMBED: usize = 2;
const PRED_W: usize = 3;
const PRED_B: usize = 4;
const JOINT_ENC: usize = 5;
const JOINT_PRED: usize = 6;
const JOINT_B: usize = 7;
const OUT_W: usize = 8;
const OUT_B: usize = 9;

pub(crate) fn param_layout(c: &ModelConfig) -> Vec<Tensor> {
    let k1 = c.vocab_size + 1;
    let h = c.encoder.hidden;
    let (p, j) = (c.pred_dim, c.joint_dim);
    vec![
        Tensor::zeros("encoder.weight", &[h, c.encoder.window() * c.feature_dim]),
        Tensor::zeros("encoder.bias", &[h]),
        Tensor::zeros("predictor.embedding", &[k1, p]),
        Tensor::zeros("predictor.recurrent", &[p, p]),
        Tensor::zeros("predictor.bias", &[p]),
        Tensor::zeros("joint.encoder_proj", &[j, h]),
        Tensor::zeros("joint.predictor_proj", &[j, p]),
        Tensor::zeros("joint.bias", &[j]),
        Tensor::zeros("joint.output", &[k1, j]),
        Tensor::zeros("joint.output_bias", &[k1]),
    ]
}

/// `out = W · x` for row-major `W` of shape `out.len() x x.len()`.
#[inline]
fn matvec(w: &[f32], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o = row.iter().zip(x).map(|(&a, &b)| a as f64 * b).sum();
    }
}

/// `dx += Wᵀ · dy`.
#[inline]
fn matvec_t_add(w: &[f32], dy: &[f64], dx: &mut [f64]) {
    let cols = dx.len();
    for (r, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (x, &a) in dx.iter_mut().zip(row) {
            *x += a as f64 * d;
        }
    }
}

/// `g += dy ⊗ x`.
#[inline]
fn outer_add(g: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &mut g[r * cols..(r + 1) * cols];
        for (gv, &xv) in row.iter_mut().zip(x) {
            *gv += d * xv;
        }
    }
}

/// Encoder activations for one utterance.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    frames: usize,
    window_len: usize,
    hidden_dim: usize,
    joint_dim: usize,
    windows: Vec<f64>,
    hidden: Vec<f64>,
    /// `A · e_t`, the encoder contribution to the joint pre-activation.
    proj: Vec<f64>,
}

impl EncoderOutput {
    /// `T'`.
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Encoder state `e_t`.
    pub fn state(&self, t: usize) -> &[f64] {
        &self.hidden[t * self.hidden_dim..(t + 1) * self.hidden_dim]
    }

    pub(crate) fn proj(&self, t: usize) -> &[f64] {
        &self.proj[t * self.joint_dim..(t + 1) * self.joint_dim]
    }

    fn window(&self, t: usize) -> &[f64] {
        &self.windows[t * self.window_len..(t + 1) * self.window_len]
    }
}

/// One step of the prediction network.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorState {
    pub(crate) hidden: Vec<f64>,
    /// `B · g_u + bj`.
    pub(crate) proj: Vec<f64>,
}

/// Prediction-network activations along a label sequence.
#[derive(Debug, Clone)]
pub struct PredictorOutput {
    inputs: Vec<usize>,
    states: Vec<PredictorState>,
}

/// Cached activations of one lattice evaluation, needed by
/// [`TransducerModel::backward`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub lattice: Lattice,
    enc: EncoderOutput,
    pred: PredictorOutput,
    /// Joint hidden activations `z`, `T' x (U+1) x J`.
    joint_hidden: Vec<f64>,
}

impl Forward {
    pub fn encoder(&self) -> &EncoderOutput {
        &self.enc
    }
}

/// Parameter container for the transducer.
#[derive(Debug, Clone, PartialEq)]
pub struct TransducerModel {
    config: ModelConfig,
    params: ParamSet,
}

impl TransducerModel {
    /// Zero-initialized model.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(TransducerModel {
            config,
            params: ParamSet::new(param_layout(&config)),
        })
    }

    /// Parameters uniform in `[-0.1, 0.1]` from a seeded generator.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.params.init_uniform(0.1, &mut rng);
        Ok(model)
    }

    pub(crate) fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        ParamSet::new(param_layout(&config)).check_layout(&params)?;
        Ok(TransducerModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients::zeros_like(&self.params)
    }

    pub fn encode(&self, x: &FeatureSeq) -> Result<EncoderOutput> {
        let c = &self.config;
        if x.dim() != c.feature_dim {
            return Err(Error::dimension(
                "feature dimension",
                c.feature_dim,
                x.dim(),
            ));
        }
        let enc = &c.encoder;
        let d = c.feature_dim;
        let h = enc.hidden;
        let j = c.joint_dim;
        let window_len = enc.window() * d;
        let frames = enc.output_frames(x.frames());

        let mut windows = vec![0.0; frames * window_len];
        let mut hidden = vec![0.0; frames * h];
        let mut proj = vec![0.0; frames * j];
        let we = self.params.data(ENC_W);
        let be = self.params.data(ENC_B);
        let a = self.params.data(JOINT_ENC);
        for t in 0..frames {
            // The window is anchored on the last input frame of the stride block.
            let anchor = (t * enc.subsample + enc.subsample - 1) as isize;
            let win = &mut windows[t * window_len..(t + 1) * window_len];
            for (slot, offset) in
                (-(enc.left_context as isize)..=enc.right_context as isize).enumerate()
            {
                let src = anchor + offset;
                if src >= 0 && (src as usize) < x.frames() {
                    win[slot * d..(slot + 1) * d].copy_from_slice(x.frame(src as usize));
                }
            }
            let e = &mut hidden[t * h..(t + 1) * h];
            matvec(we, win, e);
            for (v, &b) in e.iter_mut().zip(be) {
                *v = (*v + b as f64).tanh();
            }
            matvec(a, e, &mut proj[t * j..(t + 1) * j]);
        }
        Ok(EncoderOutput {
            frames,
            window_len,
            hidden_dim: h,
            joint_dim: j,
            windows,
            hidden,
            proj,
        })
    }

    /// Prediction-network state before any label has been emitted.
    pub fn predictor_start(&self) -> PredictorState {
        self.predictor_step(None, self.config.vocab_size)
    }

    /// Advances the prediction network by one emitted label.
    pub fn predictor_advance(&self, state: &PredictorState, label: usize) -> PredictorState {
        self.predictor_step(Some(&state.hidden), label)
    }

    fn predictor_step(&self, prev: Option<&[f64]>, input: usize) -> PredictorState {
        let p = self.config.pred_dim;
        let j = self.config.joint_dim;
        let embed = &self.params.data(PRED_EMBED)[input * p..(input + 1) * p];
        let bias = self.params.data(PRED_B);
        let mut hidden = vec![0.0; p];
        if let Some(prev) = prev {
            matvec(self.params.data(PRED_W), prev, &mut hidden);
        }
        for i in 0..p {
            hidden[i] = (hidden[i] + embed[i] as f64 + bias[i] as f64).tanh();
        }
        let mut proj = vec![0.0; j];
        matvec(self.params.data(JOINT_PRED), &hidden, &mut proj);
        for (v, &b) in proj.iter_mut().zip(self.params.data(JOINT_B)) {
            *v += b as f64;
        }
        PredictorState { hidden, proj }
    }

    pub fn predict(&self, y: &LabelSeq) -> Result<PredictorOutput> {
        y.check(self.vocab())?;
        let mut inputs = Vec::with_capacity(y.len() + 1);
        let mut states = Vec::with_capacity(y.len() + 1);
        inputs.push(self.config.vocab_size);
        states.push(self.predictor_start());
        for &label in y.iter() {
            let next = self.predictor_advance(states.last().unwrap(), label);
            inputs.push(label);
            states.push(next);
        }
        Ok(PredictorOutput { inputs, states })
    }

    /// `log P(·|t,u)` for one encoder projection and predictor state. When
    /// `hidden_out` is given it receives the joint activation `z`.
    pub(crate) fn joint(
        &self,
        enc_proj: &[f64],
        pred: &PredictorState,
        out: &mut [f64],
        hidden_out: Option<&mut [f64]>,
    ) {
        let j = self.config.joint_dim;
        let mut local;
        let z: &mut [f64] = match hidden_out {
            Some(buf) => buf,
            None => {
                local = vec![0.0; j];
                &mut local
            }
        };
        for i in 0..j {
            z[i] = (enc_proj[i] + pred.proj[i]).tanh();
        }
        matvec(self.params.data(OUT_W), z, out);
        for (v, &b) in out.iter_mut().zip(self.params.data(OUT_B)) {
            *v += b as f64;
        }
        log_softmax_in_place(out);
    }

    /// Log-distribution at encoder frame `t` after the predictor state.
    pub fn joint_log_probs(
        &self,
        enc: &EncoderOutput,
        t: usize,
        pred: &PredictorState,
    ) -> Vec<f64> {
        let mut out = vec![0.0; self.config.vocab_size + 1];
        self.joint(enc.proj(t), pred, &mut out, None);
        out
    }

    /// Evaluates the full lattice and keeps activations for backprop.
    pub fn forward(&self, x: &FeatureSeq, y: &LabelSeq) -> Result<Forward> {
        let enc = self.encode(x)?;
        self.forward_encoded(enc, y)
    }

    /// As [`forward`](Self::forward), reusing an encoder pass.
    pub fn forward_encoded(&self, enc: EncoderOutput, y: &LabelSeq) -> Result<Forward> {
        let pred = self.predict(y)?;
        let rows = y.len() + 1;
        let k1 = self.config.vocab_size + 1;
        let j = self.config.joint_dim;
        let mut log_probs = vec![0.0; enc.frames * rows * k1];
        let mut joint_hidden = vec![0.0; enc.frames * rows * j];
        for t in 0..enc.frames {
            for u in 0..rows {
                let node = t * rows + u;
                self.joint(
                    enc.proj(t),
                    &pred.states[u],
                    &mut log_probs[node * k1..(node + 1) * k1],
                    Some(&mut joint_hidden[node * j..(node + 1) * j]),
                );
            }
        }
        let lattice = Lattice::from_raw(enc.frames, y.len(), self.vocab(), log_probs)?;
        Ok(Forward {
            lattice,
            enc,
            pred,
            joint_hidden,
        })
    }

    pub fn build_lattice(&self, x: &FeatureSeq, y: &LabelSeq) -> Result<Lattice> {
        Ok(self.forward(x, y)?.lattice)
    }

    /// Accumulates into `grads` the parameter gradient of a loss whose
    /// gradient with respect to `fwd.lattice` entries is `dlattice`.
    pub fn backward(
        &self,
        fwd: &Forward,
        dlattice: &LatticeGrad,
        grads: &mut Gradients,
    ) -> Result<()> {
        if dlattice.shape() != fwd.lattice.shape() {
            return Err(Error::dimension(
                "lattice gradient shape",
                fwd.lattice.shape_string(),
                format!("{:?}", dlattice.shape()),
            ));
        }
        let c = &self.config;
        let k1 = c.vocab_size + 1;
        let (h, p, j) = (c.encoder.hidden, c.pred_dim, c.joint_dim);
        let frames = fwd.enc.frames;
        let rows = fwd.pred.states.len();

        let out_w = self.params.data(OUT_W);
        let mut d_enc_proj = vec![0.0; frames * j];
        let mut d_pred_proj = vec![0.0; rows * j];
        let mut dlogit = vec![0.0; k1];
        let mut dz = vec![0.0; j];
        for t in 0..frames {
            for u in 0..rows {
                let g = dlattice.node(t, u);
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let lp = fwd.lattice.node(t, u);
                let gsum: f64 = g.iter().sum();
                for k in 0..k1 {
                    dlogit[k] = g[k] - lp[k].exp() * gsum;
                }
                let node = t * rows + u;
                let z = &fwd.joint_hidden[node * j..(node + 1) * j];
                outer_add(grads.buf_mut(OUT_W), &dlogit, z);
                for (b, &d) in grads.buf_mut(OUT_B).iter_mut().zip(&dlogit) {
                    *b += d;
                }
                dz.iter_mut().for_each(|v| *v = 0.0);
                matvec_t_add(out_w, &dlogit, &mut dz);
                for i in 0..j {
                    let dpre = dz[i] * (1.0 - z[i] * z[i]);
                    d_enc_proj[t * j + i] += dpre;
                    d_pred_proj[u * j + i] += dpre;
                }
            }
        }

        // Encoder side.
        let joint_enc = self.params.data(JOINT_ENC);
        let mut de = vec![0.0; h];
        for t in 0..frames {
            let da = &d_enc_proj[t * j..(t + 1) * j];
            if da.iter().all(|&v| v == 0.0) {
                continue;
            }
            let e = fwd.enc.state(t);
            outer_add(grads.buf_mut(JOINT_ENC), da, e);
            de.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_add(joint_enc, da, &mut de);
            for i in 0..h {
                de[i] *= 1.0 - e[i] * e[i];
            }
            outer_add(grads.buf_mut(ENC_W), &de, fwd.enc.window(t));
            for (b, &d) in grads.buf_mut(ENC_B).iter_mut().zip(&de) {
                *b += d;
            }
        }

        // Predictor side, backpropagated through the recurrence.
        let joint_pred = self.params.data(JOINT_PRED);
        let pred_w = self.params.data(PRED_W);
        let mut carry = vec![0.0; p];
        let mut dh = vec![0.0; p];
        for u in (0..rows).rev() {
            let dc = &d_pred_proj[u * j..(u + 1) * j];
            let state = &fwd.pred.states[u].hidden;
            for (b, &d) in grads.buf_mut(JOINT_B).iter_mut().zip(dc) {
                *b += d;
            }
            outer_add(grads.buf_mut(JOINT_PRED), dc, state);
            dh.copy_from_slice(&carry);
            matvec_t_add(joint_pred, dc, &mut dh);
            for i in 0..p {
                dh[i] *= 1.0 - state[i] * state[i];
            }
            let input = fwd.pred.inputs[u];
            for (e, &d) in grads.buf_mut(PRED_EMBED)[input * p..(input + 1) * p]
                .iter_mut()
                .zip(&dh)
            {
                *e += d;
            }
            for (b, &d) in grads.buf_mut(PRED_B).iter_mut().zip(&dh) {
                *b += d;
            }
            carry.iter_mut().for_each(|v| *v = 0.0);
            if u > 0 {
                outer_add(grads.buf_mut(PRED_W), &dh, &fwd.pred.states[u - 1].hidden);
                matvec_t_add(pred_w, &dh, &mut carry);
            }
        }
        Ok(())
    }
}
