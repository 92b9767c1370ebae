//! Distillation losses between a frozen teacher and a student transducer.
//!
//! * soft, per-node KL between teacher and student lattices, either over the
//!   full `K + 1` outputs or over the collapsed classes {target, blank, rest};
//! * full-sum (FS), an L1 or squared difference between teacher and student
//!   `-log P(Y|X)` of the pseudo label;
//! * FS-Norm, the same difference after normalizing both models' scores
//!   over the teacher's N-best list.
//!
//! Every gradient here is with respect to student quantities only; the
//! teacher is a constant.

use serde::{Deserialize, Serialize};

use crate::decode::PseudoLabel;
use crate::error::{Error, Result, Side};
use crate::lattice::{rnnt_loss_and_grad, LabelSeq, Lattice, LatticeGrad};
use crate::logspace::{log_add_exp, log_sum_exp};
use crate::model::{FeatureSeq, Forward, TransducerModel, UtteranceGrad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillLossKind {
    /// Pseudo labels only; no distillation term.
    Hard,
    SoftFull,
    SoftEfficient,
    FsL1,
    FsMse,
    FsNormL1,
    FsNormMse,
}

impl DistillLossKind {
    pub const ALL: [DistillLossKind; 7] = [
        DistillLossKind::Hard,
        DistillLossKind::SoftFull,
        DistillLossKind::SoftEfficient,
        DistillLossKind::FsL1,
        DistillLossKind::FsMse,
        DistillLossKind::FsNormL1,
        DistillLossKind::FsNormMse,
    ];

    pub fn is_soft(self) -> bool {
        matches!(
            self,
            DistillLossKind::SoftFull | DistillLossKind::SoftEfficient
        )
    }

    pub fn is_full_sum(self) -> bool {
        matches!(self, DistillLossKind::FsL1 | DistillLossKind::FsMse)
    }

    pub fn is_normalized(self) -> bool {
        matches!(self, DistillLossKind::FsNormL1 | DistillLossKind::FsNormMse)
    }

    /// The sequence-level distance used by the FS kinds.
    pub fn fs_loss(self) -> Option<FsLoss> {
        match self {
            DistillLossKind::FsL1 | DistillLossKind::FsNormL1 => Some(FsLoss::L1),
            DistillLossKind::FsMse | DistillLossKind::FsNormMse => Some(FsLoss::Mse),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DistillLossKind::Hard => "hard",
            DistillLossKind::SoftFull => "soft_full",
            DistillLossKind::SoftEfficient => "soft_efficient",
            DistillLossKind::FsL1 => "fs_l1",
            DistillLossKind::FsMse => "fs_mse",
            DistillLossKind::FsNormL1 => "fs_norm_l1",
            DistillLossKind::FsNormMse => "fs_norm_mse",
        }
    }
}

impl std::fmt::Display for DistillLossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DistillLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistillLossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown distillation kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FsLoss {
    L1,
    Mse,
}

/// How per-node soft KL terms are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    /// Sum divided by the number of included nodes.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombinedLossConfig {
    pub weight_supervised_rnnt: f64,
    pub weight_hard_on_pseudo: f64,
    pub weight_distill: f64,
}

impl Default for CombinedLossConfig {
    fn default() -> Self {
        CombinedLossConfig {
            weight_supervised_rnnt: 1.0,
            weight_hard_on_pseudo: 1.0,
            weight_distill: 1.0,
        }
    }
}

impl CombinedLossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [
            self.weight_supervised_rnnt,
            self.weight_hard_on_pseudo,
            self.weight_distill,
        ];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0, got {w:?}"
            )));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A distillation method and its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub kind: DistillLossKind,
    /// Teacher lattice shift in frames, soft kinds only.
    #[serde(default)]
    pub shift: usize,
    /// N-best list length, FS-Norm kinds only.
    #[serde(default = "default_nbest")]
    pub nbest_size: usize,
    #[serde(default)]
    pub reduction: Reduction,
    pub weights: CombinedLossConfig,
}

fn default_nbest() -> usize {
    1
}

impl DistillConfig {
    pub fn new(kind: DistillLossKind, weights: CombinedLossConfig) -> Self {
        DistillConfig {
            kind,
            shift: 0,
            nbest_size: 1,
            reduction: Reduction::Sum,
            weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.shift != 0 && !self.kind.is_soft() {
            return Err(Error::Config(format!(
                "teacher shift applies to soft distillation only (kind {}, shift {})",
                self.kind, self.shift
            )));
        }
        if self.kind.is_normalized() && self.nbest_size < 2 {
            return Err(Error::Config(format!(
                "{} normalizes over an N-best list and needs nbest_size >= 2 (got {}); \
                 with a single hypothesis both normalized scores are 0",
                self.kind, self.nbest_size
            )));
        }
        if self.nbest_size == 0 {
            return Err(Error::Config("nbest_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A loss value and its gradient with respect to student lattice entries.
#[derive(Debug, Clone)]
pub struct SoftKl {
    pub value: f64,
    pub grad: LatticeGrad,
}

/// A teacher lattice delayed by `shift` frames. Frames `t < shift` have no
/// teacher evidence and are excluded from soft losses.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedLattice {
    pub lattice: Lattice,
    pub shift: usize,
}

impl ShiftedLattice {
    pub fn unshifted(lattice: Lattice) -> Self {
        ShiftedLattice { lattice, shift: 0 }
    }

    pub fn is_excluded(&self, t: usize) -> bool {
        t < self.shift
    }
}

/// Moves the teacher lattice `shift` frames to the right: output node
/// `(t, u)` holds input node `(t - shift, u)`.
pub fn shift_teacher(teacher: &Lattice, shift: usize) -> Result<ShiftedLattice> {
    let frames = teacher.frames();
    if shift >= frames {
        return Err(Error::InvalidArgument(format!(
            "shift {shift} must be smaller than the number of frames {frames}"
        )));
    }
    let mut out = teacher.clone();
    for t in (shift..frames).rev() {
        for u in 0..=teacher.label_len() {
            out.node_mut(t, u)
                .copy_from_slice(teacher.node(t - shift, u));
        }
    }
    // Excluded frames keep their (unused) original values.
    Ok(ShiftedLattice {
        lattice: out,
        shift,
    })
}

fn check_same_shape(teacher: &Lattice, student: &Lattice) -> Result<()> {
    if teacher.shape() != student.shape() {
        return Err(Error::LatticeShape {
            teacher: teacher.shape_string(),
            student: student.shape_string(),
        });
    }
    Ok(())
}

fn reduce(value: f64, grad: &mut LatticeGrad, nodes: usize, reduction: Reduction) -> f64 {
    match reduction {
        Reduction::Sum => value,
        Reduction::Mean if nodes > 0 => {
            grad.scale(1.0 / nodes as f64);
            value / nodes as f64
        }
        Reduction::Mean => value,
    }
}

/// `sum_{t,u} sum_k P̃(k|t,u) (log P̃(k|t,u) - log P(k|t,u))`.
pub fn soft_kl_full(teacher: &Lattice, student: &Lattice) -> Result<SoftKl> {
    soft_kl_full_shifted(
        &ShiftedLattice::unshifted(teacher.clone()),
        student,
        Reduction::Sum,
    )
}

pub fn soft_kl_full_shifted(
    teacher: &ShiftedLattice,
    student: &Lattice,
    reduction: Reduction,
) -> Result<SoftKl> {
    check_same_shape(&teacher.lattice, student)?;
    let mut grad = LatticeGrad::zeros_like(student);
    let mut value = 0.0;
    let mut nodes = 0;
    for t in 0..student.frames() {
        if teacher.is_excluded(t) {
            continue;
        }
        for u in 0..=student.label_len() {
            nodes += 1;
            let tn = teacher.lattice.node(t, u);
            let sn = student.node(t, u);
            let g = grad.node_mut(t, u);
            for k in 0..tn.len() {
                let pt = tn[k].exp();
                if pt > 0.0 {
                    value += pt * (tn[k] - sn[k]);
                }
                g[k] = -pt;
            }
        }
    }
    let value = reduce(value, &mut grad, nodes, reduction);
    Ok(SoftKl { value, grad })
}

/// Log of the mass outside the target and blank. On a normalized node this
/// is `log(1 - p_target - p_blank)`; summing the members directly avoids the
/// cancellation when the two dominate.
fn rest_log_mass(node: &[f64], target: Option<usize>, blank: usize) -> f64 {
    let mut acc = f64::NEG_INFINITY;
    for (k, &v) in node.iter().enumerate() {
        if k != blank && Some(k) != target {
            acc = log_add_exp(acc, v);
        }
    }
    acc
}

/// KL over the classes {target label, blank, everything else} at each node.
/// At `u = U` there is no target label and its probability is 0.
pub fn soft_kl_efficient(teacher: &Lattice, student: &Lattice, y: &LabelSeq) -> Result<SoftKl> {
    soft_kl_efficient_shifted(
        &ShiftedLattice::unshifted(teacher.clone()),
        student,
        y,
        Reduction::Sum,
    )
}

pub fn soft_kl_efficient_shifted(
    teacher: &ShiftedLattice,
    student: &Lattice,
    y: &LabelSeq,
    reduction: Reduction,
) -> Result<SoftKl> {
    check_same_shape(&teacher.lattice, student)?;
    if y.len() != student.label_len() {
        return Err(Error::dimension(
            "label sequence length",
            student.label_len(),
            y.len(),
        ));
    }
    y.check(student.vocab())?;
    let blank = student.blank();
    let mut grad = LatticeGrad::zeros_like(student);
    let mut value = 0.0;
    let mut nodes = 0;
    for t in 0..student.frames() {
        if teacher.is_excluded(t) {
            continue;
        }
        for u in 0..=student.label_len() {
            nodes += 1;
            let target = (u < y.len()).then(|| y[u]);
            let collapse = |node: &[f64]| {
                let lt = target.map_or(f64::NEG_INFINITY, |k| node[k]);
                let lb = node[blank];
                (lt, lb, rest_log_mass(node, target, blank))
            };
            let (tt, tb, tr) = collapse(teacher.lattice.node(t, u));
            let sn = student.node(t, u);
            let (st, sb, sr) = collapse(sn);
            for (lt, ls) in [(tt, st), (tb, sb), (tr, sr)] {
                if lt > f64::NEG_INFINITY {
                    value += lt.exp() * (lt - ls);
                }
            }
            // The rest class spreads its gradient over its members in
            // proportion to their share of the student's rest mass.
            let rest_t = tr.exp();
            let g = grad.node_mut(t, u);
            for (k, gk) in g.iter_mut().enumerate() {
                *gk = if Some(k) == target {
                    -tt.exp()
                } else if k == blank {
                    -tb.exp()
                } else if rest_t > 0.0 {
                    -rest_t * (sn[k] - sr).exp()
                } else {
                    0.0
                };
            }
        }
    }
    let value = reduce(value, &mut grad, nodes, reduction);
    Ok(SoftKl { value, grad })
}

/// FS distillation on `-log P(Y|X)` values. Returns the loss and its
/// derivative with respect to `student_nll`.
pub fn fs_distill(teacher_nll: f64, student_nll: f64, loss: FsLoss) -> Result<(f64, f64)> {
    if !teacher_nll.is_finite() {
        return Err(Error::NonFiniteInput {
            side: Side::Teacher,
            value: teacher_nll,
        });
    }
    if !student_nll.is_finite() {
        return Err(Error::NonFiniteInput {
            side: Side::Student,
            value: student_nll,
        });
    }
    let diff = student_nll - teacher_nll;
    Ok(match loss {
        // Subgradient 0 at equality.
        FsLoss::L1 => (diff.abs(), if diff == 0.0 { 0.0 } else { diff.signum() }),
        FsLoss::Mse => (diff * diff, 2.0 * diff),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FsNormLoss {
    pub value: f64,
    /// Derivative with respect to each student score.
    pub grad: Vec<f64>,
}

/// FS-Norm distillation: `F(log P̃(Y) - logsumexp P̃(N-best), log P(Y) -
/// logsumexp P(N-best))` on log sequence probabilities.
pub fn fs_norm_distill(
    teacher_scores: &[f64],
    student_scores: &[f64],
    target_index: usize,
    loss: FsLoss,
) -> Result<FsNormLoss> {
    if teacher_scores.is_empty() {
        return Err(Error::InvalidArgument("empty N-best list".into()));
    }
    if teacher_scores.len() != student_scores.len() {
        return Err(Error::dimension(
            "N-best score list length",
            teacher_scores.len(),
            student_scores.len(),
        ));
    }
    if target_index >= teacher_scores.len() {
        return Err(Error::InvalidArgument(format!(
            "target index {target_index} outside N-best list of length {}",
            teacher_scores.len()
        )));
    }
    for (side, scores) in [
        (Side::Teacher, teacher_scores),
        (Side::Student, student_scores),
    ] {
        if let Some(&v) = scores.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput { side, value: v });
        }
    }
    let teacher_norm = teacher_scores[target_index] - log_sum_exp(teacher_scores);
    let student_lse = log_sum_exp(student_scores);
    let student_norm = student_scores[target_index] - student_lse;
    // F is applied to the negated normalized scores, as with FS on NLLs.
    let (value, d_student_nll) = fs_distill(-teacher_norm, -student_norm, loss)?;
    let d_norm = -d_student_nll;
    let grad = student_scores
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let indicator = if i == target_index { 1.0 } else { 0.0 };
            d_norm * (indicator - (s - student_lse).exp())
        })
        .collect();
    Ok(FsNormLoss { value, grad })
}

/// One training utterance for [`combined_loss`].
#[derive(Debug, Clone, Copy)]
pub enum TrainItem<'a> {
    /// Ground-truth labeled.
    Supervised {
        utt_id: &'a str,
        features: &'a FeatureSeq,
        labels: &'a LabelSeq,
    },
    /// Unlabeled, with teacher outputs. `teacher_lattice` is required by the
    /// soft kinds and must be built along the pseudo label.
    Unsupervised {
        utt_id: &'a str,
        features: &'a FeatureSeq,
        pseudo: &'a PseudoLabel,
        teacher_lattice: Option<&'a ShiftedLattice>,
    },
}

/// Per-utterance loss terms, unweighted. `None` when the term does not
/// apply to the utterance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub supervised: Option<f64>,
    pub hard: Option<f64>,
    pub distill: Option<f64>,
    pub total: f64,
}

/// Weighted loss of one utterance plus the lattice gradients that
/// [`train_step`](crate::model::train_step) backpropagates.
pub fn combined_loss(
    student: &TransducerModel,
    item: &TrainItem<'_>,
    config: &DistillConfig,
) -> Result<UtteranceGrad<LossBreakdown>> {
    let w = &config.weights;
    let mut breakdown = LossBreakdown::default();
    match *item {
        TrainItem::Supervised {
            utt_id,
            features,
            labels,
        } => {
            let fwd = student.forward(features, labels)?;
            let (loss, mut grad) = rnnt_loss_and_grad(&fwd.lattice, labels)?;
            breakdown.supervised = Some(loss);
            breakdown.total = w.weight_supervised_rnnt * loss;
            grad.scale(w.weight_supervised_rnnt);
            Ok(UtteranceGrad {
                utt_id: utt_id.to_string(),
                loss: breakdown.total,
                lattices: vec![(fwd, grad)],
                metrics: breakdown,
            })
        }
        TrainItem::Unsupervised {
            utt_id,
            features,
            pseudo,
            teacher_lattice,
        } => {
            let distill_active = config.kind != DistillLossKind::Hard && w.weight_distill > 0.0;
            if w.weight_hard_on_pseudo == 0.0 && !distill_active {
                return Ok(UtteranceGrad {
                    utt_id: utt_id.to_string(),
                    loss: 0.0,
                    lattices: Vec::new(),
                    metrics: breakdown,
                });
            }
            let y = &pseudo.labels;
            let enc = student.encode(features)?;
            let fwd = student.forward_encoded(enc.clone(), y)?;
            let (nll, rnnt_grad) = rnnt_loss_and_grad(&fwd.lattice, y)?;
            let mut grad = LatticeGrad::zeros_like(&fwd.lattice);
            let mut total = 0.0;
            let mut extra: Vec<(Forward, LatticeGrad)> = Vec::new();

            if w.weight_hard_on_pseudo > 0.0 {
                breakdown.hard = Some(nll);
                total += w.weight_hard_on_pseudo * nll;
                grad.add_scaled(&rnnt_grad, w.weight_hard_on_pseudo)?;
            }

            let wd = w.weight_distill;
            match config.kind {
                DistillLossKind::Hard => {}
                DistillLossKind::SoftFull | DistillLossKind::SoftEfficient => {
                    let teacher = teacher_lattice.ok_or_else(|| Error::Missing {
                        what: "teacher lattice",
                        utt_id: utt_id.to_string(),
                    })?;
                    let kl = if config.kind == DistillLossKind::SoftFull {
                        soft_kl_full_shifted(teacher, &fwd.lattice, config.reduction)?
                    } else {
                        soft_kl_efficient_shifted(teacher, &fwd.lattice, y, config.reduction)?
                    };
                    breakdown.distill = Some(kl.value);
                    total += wd * kl.value;
                    grad.add_scaled(&kl.grad, wd)?;
                }
                DistillLossKind::FsL1 | DistillLossKind::FsMse => {
                    let (value, d_nll) =
                        fs_distill(pseudo.teacher_nll(), nll, config.kind.fs_loss().unwrap())?;
                    breakdown.distill = Some(value);
                    total += wd * value;
                    grad.add_scaled(&rnnt_grad, wd * d_nll)?;
                }
                DistillLossKind::FsNormL1 | DistillLossKind::FsNormMse => {
                    if pseudo.nbest.len() < 2 {
                        return Err(Error::Missing {
                            what: "N-best list (at least 2 hypotheses)",
                            utt_id: utt_id.to_string(),
                        });
                    }
                    if pseudo.nbest[0].labels != *y {
                        return Err(Error::InvalidArgument(format!(
                            "utterance {utt_id}: first N-best entry differs from the pseudo label"
                        )));
                    }
                    let teacher_scores: Vec<f64> = pseudo.nbest.iter().map(|e| e.score).collect();
                    let mut student_scores = vec![-nll];
                    let mut others = Vec::with_capacity(pseudo.nbest.len() - 1);
                    for entry in &pseudo.nbest[1..] {
                        let f = student.forward_encoded(enc.clone(), &entry.labels)?;
                        let (l, g) = rnnt_loss_and_grad(&f.lattice, &entry.labels)?;
                        student_scores.push(-l);
                        others.push((f, g));
                    }
                    let norm = fs_norm_distill(
                        &teacher_scores,
                        &student_scores,
                        0,
                        config.kind.fs_loss().unwrap(),
                    )?;
                    breakdown.distill = Some(norm.value);
                    total += wd * norm.value;
                    // score = -nll, so d(score)/d(lattice) = -rnnt_grad.
                    grad.add_scaled(&rnnt_grad, -wd * norm.grad[0])?;
                    for ((f, mut g), d) in others.into_iter().zip(&norm.grad[1..]) {
                        g.scale(-wd * d);
                        extra.push((f, g));
                    }
                }
            }

            breakdown.total = total;
            let mut lattices = vec![(fwd, grad)];
            lattices.extend(extra);
            Ok(UtteranceGrad {
                utt_id: utt_id.to_string(),
                loss: total,
                lattices,
                metrics: breakdown,
            })
        }
    }
}
