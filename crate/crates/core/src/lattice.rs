//! The transducer output lattice and the full-sum sequence probability.
//!
//! A lattice holds `log P(k | t, u)` for every frame `t < T`, label position
//! `u <= U` and output `k <= K`, where output `K` is blank. A path starts at
//! `(0, 0)`; a blank moves to `(t + 1, u)`, label `y[u]` moves to
//! `(t, u + 1)`, and the path ends with a blank from `(T - 1, U)`.
//! [`forward_backward`] sums all such paths in log space;
//! [`brute_force_log_prob`] enumerates them one by one and exists only to
//! check it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logspace::{log_add_exp, log_sum_exp};

/// Tolerance on `logsumexp_k log P(k|t,u)` accepted by [`Lattice::new`].
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// Largest `T + U` that [`brute_force_log_prob`] will enumerate.
pub const MAX_ENUMERATION_STEPS: usize = 24;

/// Upper bound on the number of path evaluations done by [`path_mass`].
pub const MAX_PATH_MASS_WORK: u128 = 20_000_000;

/// Output vocabulary: `size` real labels plus blank at index `size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidArgument(
                "vocabulary needs at least one label".into(),
            ));
        }
        Ok(Vocab { size })
    }

    /// Number of real labels `K`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn blank(&self) -> usize {
        self.size
    }

    /// `K + 1`.
    pub fn num_outputs(&self) -> usize {
        self.size + 1
    }
}

/// An output label sequence `Y`. Never contains blank.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSeq(Vec<usize>);

impl LabelSeq {
    pub fn new(labels: Vec<usize>, vocab: Vocab) -> Result<Self> {
        let seq = LabelSeq(labels);
        seq.check(vocab)?;
        Ok(seq)
    }

    pub fn empty() -> Self {
        LabelSeq(Vec::new())
    }

    /// Verifies every label is a real label of `vocab`.
    pub fn check(&self, vocab: Vocab) -> Result<()> {
        match self.0.iter().position(|&l| l >= vocab.size()) {
            Some(position) => Err(Error::LabelOutOfRange {
                label: self.0[position],
                position,
                vocab: vocab.size(),
            }),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }

    pub fn push(&mut self, label: usize) {
        self.0.push(label);
    }
}

impl From<Vec<usize>> for LabelSeq {
    fn from(labels: Vec<usize>) -> Self {
        LabelSeq(labels)
    }
}

impl std::ops::Deref for LabelSeq {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

/// `log P(Y | X)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogSeqProb(f64);

impl LogSeqProb {
    pub fn new(value: f64) -> Self {
        LogSeqProb(value)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn prob(self) -> f64 {
        self.0.exp()
    }
}

/// Dense `T x (U + 1) x (K + 1)` array of log posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    frames: usize,
    rows: usize,
    vocab: Vocab,
    log_probs: Vec<f64>,
}

impl Lattice {
    /// Builds a lattice and checks that every node is a normalized
    /// log-distribution.
    pub fn new(frames: usize, label_len: usize, vocab: Vocab, log_probs: Vec<f64>) -> Result<Self> {
        let lat = Self::from_raw(frames, label_len, vocab, log_probs)?;
        lat.check_values()?;
        lat.check_normalized(NORMALIZATION_TOLERANCE)?;
        Ok(lat)
    }

    /// Builds a lattice checking only its shape. Entries need not be
    /// normalized; finite-difference checks perturb single entries.
    pub fn from_raw(
        frames: usize,
        label_len: usize,
        vocab: Vocab,
        log_probs: Vec<f64>,
    ) -> Result<Self> {
        if frames == 0 {
            return Err(Error::dimension("lattice frames", "T >= 1", 0));
        }
        let expected = frames * (label_len + 1) * vocab.num_outputs();
        if log_probs.len() != expected {
            return Err(Error::dimension(
                "lattice buffer length",
                format!(
                    "{frames} x {} x {} = {expected}",
                    label_len + 1,
                    vocab.num_outputs()
                ),
                log_probs.len(),
            ));
        }
        Ok(Lattice {
            frames,
            rows: label_len + 1,
            vocab,
            log_probs,
        })
    }

    /// Builds a normalized lattice from a per-node generator of log-probs.
    pub fn from_fn(
        frames: usize,
        label_len: usize,
        vocab: Vocab,
        mut node: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let mut buf = Vec::with_capacity(frames * (label_len + 1) * vocab.num_outputs());
        for t in 0..frames {
            for u in 0..=label_len {
                let values = node(t, u);
                if values.len() != vocab.num_outputs() {
                    return Err(Error::dimension(
                        "lattice node",
                        vocab.num_outputs(),
                        values.len(),
                    ));
                }
                buf.extend_from_slice(&values);
            }
        }
        Self::new(frames, label_len, vocab, buf)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// `U`: the lattice has `U + 1` label rows.
    pub fn label_len(&self) -> usize {
        self.rows - 1
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn blank(&self) -> usize {
        self.vocab.blank()
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.frames, self.rows, self.vocab.num_outputs()]
    }

    pub fn shape_string(&self) -> String {
        let [t, u, k] = self.shape();
        format!("{t} x {u} x {k}")
    }

    #[inline]
    fn offset(&self, t: usize, u: usize) -> usize {
        (t * self.rows + u) * self.vocab.num_outputs()
    }

    #[inline]
    pub fn get(&self, t: usize, u: usize, k: usize) -> f64 {
        self.log_probs[self.offset(t, u) + k]
    }

    pub fn node(&self, t: usize, u: usize) -> &[f64] {
        let o = self.offset(t, u);
        &self.log_probs[o..o + self.vocab.num_outputs()]
    }

    pub fn node_mut(&mut self, t: usize, u: usize) -> &mut [f64] {
        let o = self.offset(t, u);
        let n = self.vocab.num_outputs();
        &mut self.log_probs[o..o + n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.log_probs
    }

    /// Rejects NaN and `+inf`. `-inf` is the log of a zero probability and
    /// is allowed.
    pub fn check_values(&self) -> Result<()> {
        let n = self.vocab.num_outputs();
        for (i, &v) in self.log_probs.iter().enumerate() {
            if v.is_nan() || v == f64::INFINITY {
                let k = i % n;
                let node = i / n;
                return Err(Error::NonFiniteLattice {
                    t: node / self.rows,
                    u: node % self.rows,
                    k,
                    value: v,
                });
            }
        }
        Ok(())
    }

    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        for t in 0..self.frames {
            for u in 0..self.rows {
                let z = log_sum_exp(self.node(t, u));
                if !(z.abs() <= tol) {
                    return Err(Error::NotNormalized { t, u, logsumexp: z });
                }
            }
        }
        Ok(())
    }

    /// Keeps label rows `0..=label_len`. Row distributions are unchanged.
    pub fn truncate_rows(&self, label_len: usize) -> Result<Lattice> {
        if label_len + 1 > self.rows {
            return Err(Error::dimension(
                "truncated label length",
                format!("<= {}", self.rows - 1),
                label_len,
            ));
        }
        let n = self.vocab.num_outputs();
        let mut buf = Vec::with_capacity(self.frames * (label_len + 1) * n);
        for t in 0..self.frames {
            for u in 0..=label_len {
                buf.extend_from_slice(self.node(t, u));
            }
        }
        Lattice::from_raw(self.frames, label_len, self.vocab, buf)
    }

    fn check_labels(&self, y: &LabelSeq) -> Result<()> {
        if y.len() + 1 != self.rows {
            return Err(Error::dimension(
                "label sequence length vs lattice rows",
                format!("U = {}", self.rows - 1),
                format!("U = {}", y.len()),
            ));
        }
        y.check(self.vocab)
    }
}

/// A `T x (U + 1)` array of log-domain scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LogGrid {
    frames: usize,
    rows: usize,
    values: Vec<f64>,
}

impl LogGrid {
    fn new(frames: usize, rows: usize) -> Self {
        LogGrid {
            frames,
            rows,
            values: vec![f64::NEG_INFINITY; frames * rows],
        }
    }

    #[inline]
    pub fn get(&self, t: usize, u: usize) -> f64 {
        self.values[t * self.rows + u]
    }

    #[inline]
    fn set(&mut self, t: usize, u: usize, v: f64) {
        self.values[t * self.rows + u] = v;
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// Result of [`forward_backward`].
#[derive(Debug, Clone)]
pub struct ForwardBackward {
    pub log_prob: LogSeqProb,
    /// `alpha[t, u]`: log mass of all path prefixes reaching `(t, u)`.
    pub alpha: LogGrid,
    /// `beta[t, u]`: log mass of all path suffixes from `(t, u)` to the end,
    /// including the final blank.
    pub beta: LogGrid,
}

/// Computes `log P(Y | X)` and the forward/backward variables.
pub fn forward_backward(lat: &Lattice, y: &LabelSeq) -> Result<ForwardBackward> {
    lat.check_labels(y)?;
    lat.check_values()?;

    let frames = lat.frames();
    let rows = lat.rows;
    let blank = lat.blank();
    let labels = y.as_slice();

    let mut alpha = LogGrid::new(frames, rows);
    alpha.set(0, 0, 0.0);
    for t in 0..frames {
        for u in 0..rows {
            if t == 0 && u == 0 {
                continue;
            }
            let from_blank = if t > 0 {
                alpha.get(t - 1, u) + lat.get(t - 1, u, blank)
            } else {
                f64::NEG_INFINITY
            };
            let from_label = if u > 0 {
                alpha.get(t, u - 1) + lat.get(t, u - 1, labels[u - 1])
            } else {
                f64::NEG_INFINITY
            };
            alpha.set(t, u, log_add_exp(from_blank, from_label));
        }
    }

    let mut beta = LogGrid::new(frames, rows);
    beta.set(frames - 1, rows - 1, lat.get(frames - 1, rows - 1, blank));
    for t in (0..frames).rev() {
        for u in (0..rows).rev() {
            if t == frames - 1 && u == rows - 1 {
                continue;
            }
            let via_blank = if t + 1 < frames {
                beta.get(t + 1, u) + lat.get(t, u, blank)
            } else {
                f64::NEG_INFINITY
            };
            let via_label = if u + 1 < rows {
                beta.get(t, u + 1) + lat.get(t, u, labels[u])
            } else {
                f64::NEG_INFINITY
            };
            beta.set(t, u, log_add_exp(via_blank, via_label));
        }
    }

    let log_prob = alpha.get(frames - 1, rows - 1) + lat.get(frames - 1, rows - 1, blank);
    Ok(ForwardBackward {
        log_prob: LogSeqProb(log_prob),
        alpha,
        beta,
    })
}

/// `-log P(Y | X)`. Infinite when `Y` has zero probability.
pub fn rnnt_loss(lat: &Lattice, y: &LabelSeq) -> Result<f64> {
    Ok(-forward_backward(lat, y)?.log_prob.value())
}

/// Gradient of a loss with respect to every lattice entry, same layout as
/// [`Lattice`].
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeGrad {
    frames: usize,
    rows: usize,
    outputs: usize,
    values: Vec<f64>,
}

impl LatticeGrad {
    pub fn zeros_like(lat: &Lattice) -> Self {
        let [frames, rows, outputs] = lat.shape();
        LatticeGrad {
            frames,
            rows,
            outputs,
            values: vec![0.0; frames * rows * outputs],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.frames, self.rows, self.outputs]
    }

    #[inline]
    fn offset(&self, t: usize, u: usize) -> usize {
        (t * self.rows + u) * self.outputs
    }

    #[inline]
    pub fn get(&self, t: usize, u: usize, k: usize) -> f64 {
        self.values[self.offset(t, u) + k]
    }

    pub fn node(&self, t: usize, u: usize) -> &[f64] {
        let o = self.offset(t, u);
        &self.values[o..o + self.outputs]
    }

    pub fn node_mut(&mut self, t: usize, u: usize) -> &mut [f64] {
        let o = self.offset(t, u);
        &mut self.values[o..o + self.outputs]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &LatticeGrad, factor: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dimension(
                "lattice gradient shape",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Loss and gradient of `-log P(Y|X)` with respect to `log P(k|t,u)`.
///
/// Only blank and `y[u]` receive gradient at node `(t, u)`; the gradient of
/// an entry is minus the posterior occupancy of the transition it scores.
pub fn rnnt_loss_and_grad(lat: &Lattice, y: &LabelSeq) -> Result<(f64, LatticeGrad)> {
    let fb = forward_backward(lat, y)?;
    let log_prob = fb.log_prob.value();
    if !log_prob.is_finite() {
        return Err(Error::InvalidArgument(
            "label sequence has zero probability under the lattice; loss is infinite".into(),
        ));
    }
    let frames = lat.frames();
    let rows = lat.rows;
    let blank = lat.blank();
    let mut grad = LatticeGrad::zeros_like(lat);
    for t in 0..frames {
        for u in 0..rows {
            let a = fb.alpha.get(t, u);
            if a == f64::NEG_INFINITY {
                continue;
            }
            let after_blank = if t + 1 < frames {
                fb.beta.get(t + 1, u)
            } else if u + 1 == rows {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            let node = grad.node_mut(t, u);
            node[blank] = -(a + lat.get(t, u, blank) + after_blank - log_prob).exp();
            if u + 1 < rows {
                let k = y[u];
                node[k] = -(a + lat.get(t, u, k) + fb.beta.get(t, u + 1) - log_prob).exp();
            }
        }
    }
    Ok((-log_prob, grad))
}

pub fn rnnt_loss_grad(lat: &Lattice, y: &LabelSeq) -> Result<LatticeGrad> {
    Ok(rnnt_loss_and_grad(lat, y)?.1)
}

/// One step of an alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Step {
    Blank,
    Label,
}

/// A monotone path through the lattice: `T` blanks and `U` label steps, the
/// last step being the terminating blank.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AlignmentPath {
    steps: Vec<Step>,
}

impl AlignmentPath {
    pub fn new(steps: Vec<Step>, frames: usize, label_len: usize) -> Result<Self> {
        let blanks = steps.iter().filter(|s| **s == Step::Blank).count();
        if blanks != frames || steps.len() != frames + label_len {
            return Err(Error::InvalidArgument(format!(
                "alignment needs {frames} blanks and {label_len} labels, got {} blanks in {} steps",
                blanks,
                steps.len()
            )));
        }
        if steps.last() != Some(&Step::Blank) {
            return Err(Error::InvalidArgument(
                "alignment must end with the final blank".into(),
            ));
        }
        Ok(AlignmentPath { steps })
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    /// Every valid alignment for a `frames x (label_len + 1)` lattice.
    pub fn enumerate(frames: usize, label_len: usize) -> Result<AlignmentIter> {
        if frames == 0 {
            return Err(Error::dimension("lattice frames", "T >= 1", 0));
        }
        if frames + label_len > MAX_ENUMERATION_STEPS {
            return Err(Error::EnumerationLimit {
                what: "T + U",
                size: (frames + label_len) as u128,
                limit: MAX_ENUMERATION_STEPS as u128,
            });
        }
        // Label positions among the first T + U - 1 steps.
        let free = frames + label_len - 1;
        let first = if label_len == 0 {
            0
        } else {
            (1u64 << label_len) - 1
        };
        Ok(AlignmentIter {
            free,
            next: Some(first),
        })
    }

    /// Sum of step log-probabilities when the u-th label step emits `y[u]`.
    pub fn log_prob(&self, lat: &Lattice, y: &LabelSeq) -> f64 {
        let blank = lat.blank();
        let (mut t, mut u) = (0usize, 0usize);
        let mut total = 0.0;
        for step in &self.steps {
            match step {
                Step::Blank => {
                    total += lat.get(t, u, blank);
                    t += 1;
                }
                Step::Label => {
                    total += lat.get(t, u, y[u]);
                    u += 1;
                }
            }
        }
        total
    }
}

/// Iterator over alignments, driven by fixed-popcount bitmasks.
pub struct AlignmentIter {
    free: usize,
    next: Option<u64>,
}

impl Iterator for AlignmentIter {
    type Item = AlignmentPath;

    fn next(&mut self) -> Option<AlignmentPath> {
        let mask = self.next?;
        let limit = 1u64 << self.free;
        // Gosper's hack: next integer with the same popcount.
        self.next = if mask == 0 {
            None
        } else {
            let c = mask & mask.wrapping_neg();
            let r = mask + c;
            let n = (((r ^ mask) >> 2) / c) | r;
            (n < limit).then_some(n)
        };
        let mut steps = Vec::with_capacity(self.free + 1);
        for i in 0..self.free {
            steps.push(if mask >> i & 1 == 1 {
                Step::Label
            } else {
                Step::Blank
            });
        }
        steps.push(Step::Blank);
        Some(AlignmentPath { steps })
    }
}

/// `log P(Y|X)` by explicit enumeration of every alignment.
pub fn brute_force_log_prob(lat: &Lattice, y: &LabelSeq) -> Result<LogSeqProb> {
    lat.check_labels(y)?;
    let scores: Vec<f64> = AlignmentPath::enumerate(lat.frames(), y.len())?
        .map(|path| path.log_prob(lat, y))
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(LogSeqProb(f64::NEG_INFINITY));
    }
    let mut sum = 0.0;
    for s in &scores {
        sum += (s - max).exp();
    }
    Ok(LogSeqProb(max + sum.ln()))
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

/// Total probability of all label sequences of length `<= max_len`, each
/// scored by treating node `(t, u)` as a distribution that depends only on
/// the number of labels emitted so far.
pub fn path_mass(lat: &Lattice, max_len: usize) -> Result<f64> {
    if max_len > lat.label_len() {
        return Err(Error::dimension(
            "path_mass max label length",
            format!("<= {}", lat.label_len()),
            max_len,
        ));
    }
    let k = lat.vocab().size() as u128;
    let mut work: u128 = 0;
    for u in 0..=max_len {
        let seqs = k.checked_pow(u as u32).unwrap_or(u128::MAX);
        let paths = binomial((lat.frames() + u - 1) as u128, u as u128);
        work = work.saturating_add(seqs.saturating_mul(paths));
    }
    if work > MAX_PATH_MASS_WORK {
        return Err(Error::EnumerationLimit {
            what: "path_mass path evaluations",
            size: work,
            limit: MAX_PATH_MASS_WORK,
        });
    }

    let mut total = 0.0;
    for u in 0..=max_len {
        let sub = lat.truncate_rows(u)?;
        let mut labels = vec![0usize; u];
        loop {
            let y = LabelSeq::from(labels.clone());
            total += brute_force_log_prob(&sub, &y)?.prob();
            // Odometer increment over K^u sequences.
            let mut i = 0;
            while i < u {
                labels[i] += 1;
                if labels[i] < lat.vocab().size() {
                    break;
                }
                labels[i] = 0;
                i += 1;
            }
            if i == u {
                break;
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(frames: usize, label_len: usize, k: usize) -> Lattice {
        let vocab = Vocab::new(k).unwrap();
        let p = -((k + 1) as f64).ln();
        Lattice::from_fn(frames, label_len, vocab, |_, _| vec![p; k + 1]).unwrap()
    }

    #[test]
    fn blank_only_path() {
        let vocab = Vocab::new(1).unwrap();
        let lat = Lattice::from_fn(2, 0, vocab, |_, _| vec![0.1f64.ln(), 0.9f64.ln()]).unwrap();
        let fb = forward_backward(&lat, &LabelSeq::empty()).unwrap();
        assert!((fb.log_prob.value() - 2.0 * 0.9f64.ln()).abs() < 1e-15);
        let bf = brute_force_log_prob(&lat, &LabelSeq::empty()).unwrap();
        assert!((bf.value() - 2.0 * 0.9f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn uniform_two_frames_one_label() {
        // Paths: (label, blank, blank) and (blank, label, blank). A third
        // ordering would emit after the last frame, which the lattice forbids.
        let lat = uniform(2, 1, 2);
        let y = LabelSeq::from(vec![0]);
        let lp = forward_backward(&lat, &y).unwrap().log_prob.value();
        let expected = (2.0f64 / 27.0).ln();
        assert!((lp - expected).abs() < 1e-14, "{lp} vs {expected}");
        assert_eq!(AlignmentPath::enumerate(2, 1).unwrap().count(), 2);
        assert!((rnnt_loss(&lat, &y).unwrap() - 13.5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn alignment_count_is_binomial() {
        for t in 1..6 {
            for u in 0..5 {
                let n = AlignmentPath::enumerate(t, u).unwrap().count() as u128;
                assert_eq!(n, binomial((t + u - 1) as u128, u as u128), "T={t} U={u}");
            }
        }
    }

    #[test]
    fn certain_path_has_zero_loss() {
        // Emit label 1 at t=0, then blank, blank.
        let vocab = Vocab::new(2).unwrap();
        let ninf = f64::NEG_INFINITY;
        let lat = Lattice::from_fn(2, 1, vocab, |t, u| match (t, u) {
            (0, 0) => vec![ninf, 0.0, ninf],
            (_, 1) => vec![ninf, ninf, 0.0],
            _ => vec![0.5f64.ln(), 0.5f64.ln(), ninf],
        })
        .unwrap();
        let y = LabelSeq::from(vec![1]);
        assert_eq!(rnnt_loss(&lat, &y).unwrap(), 0.0);
    }

    #[test]
    fn empty_labels_gradient_is_minus_one_on_blanks() {
        let vocab = Vocab::new(3).unwrap();
        let lat = Lattice::from_fn(4, 0, vocab, |t, _| {
            let mut v = vec![0.1 + t as f64 * 0.05, 0.2, 0.3, 0.0];
            v[3] = 1.0 - v[0] - v[1] - v[2];
            v.iter().map(|p: &f64| p.ln()).collect()
        })
        .unwrap();
        let g = rnnt_loss_grad(&lat, &LabelSeq::empty()).unwrap();
        for t in 0..4 {
            assert!((g.get(t, 0, 3) + 1.0).abs() < 1e-12);
            for k in 0..3 {
                assert_eq!(g.get(t, 0, k), 0.0);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let lat = uniform(2, 1, 2);
        assert!(matches!(
            forward_backward(&lat, &LabelSeq::from(vec![0, 1])),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            brute_force_log_prob(&lat, &LabelSeq::from(vec![2])),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
        let mut raw = lat.as_slice().to_vec();
        raw[4] = f64::NAN;
        let bad = Lattice::from_raw(2, 1, lat.vocab(), raw).unwrap();
        match forward_backward(&bad, &LabelSeq::from(vec![0])) {
            Err(Error::NonFiniteLattice {
                t: 0, u: 1, k: 1, ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            brute_force_log_prob(&uniform(20, 5, 2), &LabelSeq::from(vec![0; 5])),
            Err(Error::EnumerationLimit { .. })
        ));
    }

    #[test]
    fn unnormalized_lattice_is_rejected_by_new() {
        let vocab = Vocab::new(1).unwrap();
        assert!(matches!(
            Lattice::new(1, 0, vocab, vec![0.0, 0.0]),
            Err(Error::NotNormalized { t: 0, u: 0, .. })
        ));
    }

    #[test]
    fn path_mass_of_empty_sequence_is_all_blank_path() {
        let lat = uniform(3, 2, 2);
        let m0 = path_mass(&lat, 0).unwrap();
        assert!((m0 - (1.0f64 / 3.0).powi(3)).abs() < 1e-15);
    }
}
