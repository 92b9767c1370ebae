//! End-to-end pipelines: teacher training, pseudo labeling, distillation,
//! evaluation and the teacher-shift sweep. File handling lives in the CLI;
//! everything here works on in-memory values.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{check_kind_architecture, EncoderLayout, ExperimentConfig};
use crate::data::{
    corrupt_labels, BatchItem, BatchMixer, Corpus, CorruptionStats, HiddenReferences, SyntheticData,
};
use crate::decode::{pseudo_label, DecodeFailure, PseudoLabel, PseudoLabelRecord};
use crate::distill::{
    combined_loss, shift_teacher, CombinedLossConfig, DistillConfig, DistillLossKind,
    LossBreakdown, ShiftedLattice, TrainItem,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, DecoderConfig, SetReport};
use crate::model::{train_step, Optimizer, OptimizerConfig, TransducerModel};

/// Mean loss terms of one optimizer step. A term is `None` when no
/// utterance in the batch used it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supervised: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn step_log(step: usize, loss: f64, terms: &[LossBreakdown]) -> StepLog {
    StepLog {
        step,
        loss,
        supervised: mean_of(terms.iter().map(|t| t.supervised)),
        hard: mean_of(terms.iter().map(|t| t.hard)),
        distill: mean_of(terms.iter().map(|t| t.distill)),
    }
}

/// Result of [`train_teacher`].
#[derive(Debug, Clone)]
pub struct TrainedTeacher {
    pub model: TransducerModel,
    pub log: Vec<StepLog>,
    pub corruption: CorruptionStats,
    pub training_utterances: usize,
}

/// Trains a teacher from scratch on its share of the supervised split,
/// after label corruption, with the plain RNN-T loss.
pub fn train_teacher(config: &ExperimentConfig, data: &SyntheticData) -> Result<TrainedTeacher> {
    config.validate()?;
    let knob = config.teacher.knob()?;
    let subset = data.supervised.subset(knob.supervised_fraction)?;
    let (corpus, corruption) = corrupt_labels(
        &subset,
        config.data.vocab(),
        knob.label_noise_rate,
        config.teacher.corruption_seed,
    )?;
    let model = TransducerModel::new(config.teacher_model()?, config.teacher.init_seed)?;
    let (model, log) = train_supervised(
        model,
        &corpus,
        config.teacher.steps,
        config.train.batch_size,
        config.train.optimizer,
        config.teacher.batch_seed,
    )?;
    Ok(TrainedTeacher {
        model,
        log,
        corruption,
        training_utterances: corpus.len(),
    })
}

/// Plain RNN-T training on a labeled corpus.
pub fn train_supervised(
    mut model: TransducerModel,
    corpus: &Corpus,
    steps: usize,
    batch_size: usize,
    optimizer: OptimizerConfig,
    batch_seed: u64,
) -> Result<(TransducerModel, Vec<StepLog>)> {
    let loss_config = DistillConfig::new(
        DistillLossKind::Hard,
        CombinedLossConfig {
            weight_supervised_rnnt: 1.0,
            weight_hard_on_pseudo: 0.0,
            weight_distill: 0.0,
        },
    );
    let mut optimizer = Optimizer::new(optimizer)?;
    let mut batches = BatchMixer::new(corpus.len(), 0, batch_size, 1.0, batch_seed)?;
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let items: Vec<TrainItem<'_>> = batches
            .next()
            .expect("endless stream")
            .into_iter()
            .map(|item| match item {
                BatchItem::Supervised(i) | BatchItem::Unsupervised(i) => {
                    let u = &corpus.utterances()[i];
                    TrainItem::Supervised {
                        utt_id: &u.utt_id,
                        features: &u.features,
                        labels: u.labels.as_ref().expect("labeled corpus"),
                    }
                }
            })
            .collect();
        let r = train_step(&mut model, &mut optimizer, &items, |m, it| {
            combined_loss(m, it, &loss_config)
        })?;
        log.push(step_log(step, r.loss, &r.metrics));
    }
    Ok((model, log))
}

/// Pseudo labels every utterance in parallel, in corpus order. A failing
/// utterance yields a [`DecodeFailure`] record instead of aborting.
pub fn pseudo_label_corpus(
    teacher: &TransducerModel,
    corpus: &Corpus,
    beam: usize,
    nbest: usize,
) -> Result<Vec<PseudoLabelRecord>> {
    if nbest == 0 || nbest > beam {
        return Err(Error::Config(format!(
            "nbest must be in 1..={beam}, got {nbest}"
        )));
    }
    Ok(corpus
        .utterances()
        .par_iter()
        .map(
            |u| match pseudo_label(teacher, &u.utt_id, &u.features, beam, nbest) {
                Ok(p) => PseudoLabelRecord::Labeled(p),
                Err(e) => PseudoLabelRecord::Failed(DecodeFailure {
                    utt_id: u.utt_id.clone(),
                    error: e.to_string(),
                }),
            },
        )
        .collect())
}

fn layout_of(model: &TransducerModel) -> EncoderLayout {
    let e = model.config().encoder;
    EncoderLayout {
        causal: e.causal,
        left_context: e.left_context,
        right_context: e.right_context,
        subsample: e.subsample,
    }
}

/// Checks that a teacher and a student can be paired under `distill`.
pub fn check_pair(
    distill: &DistillConfig,
    teacher: &TransducerModel,
    student: &TransducerModel,
) -> Result<()> {
    let (t, s) = (teacher.config(), student.config());
    if t.vocab_size != s.vocab_size || t.feature_dim != s.feature_dim {
        return Err(Error::Config(format!(
            "teacher (vocab {}, features {}) and student (vocab {}, features {}) disagree",
            t.vocab_size, t.feature_dim, s.vocab_size, s.feature_dim
        )));
    }
    check_kind_architecture(distill, &layout_of(teacher), &layout_of(student))
}

#[derive(Debug, Clone)]
pub struct DistilledStudent {
    pub model: TransducerModel,
    pub log: Vec<StepLog>,
    /// Unlabeled utterances left out because their pseudo label failed.
    pub skipped: Vec<String>,
}

/// Trains a student on mixed batches of ground-truth and pseudo-labeled
/// utterances. Soft kinds need the teacher lattice along each pseudo label;
/// those are computed once, since the teacher is frozen.
pub fn distill_student(
    config: &ExperimentConfig,
    teacher: &TransducerModel,
    data: &SyntheticData,
    pseudo: &[PseudoLabelRecord],
    init: Option<TransducerModel>,
) -> Result<DistilledStudent> {
    config.validate()?;
    let distill = &config.distill;
    let mut student = match init {
        Some(m) => m,
        None => TransducerModel::new(config.student_model()?, config.student.init_seed)?,
    };
    check_pair(distill, teacher, &student)?;

    let by_id: HashMap<&str, &PseudoLabelRecord> = pseudo.iter().map(|r| (r.utt_id(), r)).collect();
    let mut unsup: Vec<(&crate::data::Utterance, &PseudoLabel)> = Vec::new();
    let mut skipped = Vec::new();
    for u in data.unsupervised.utterances() {
        match by_id.get(u.utt_id.as_str()) {
            Some(PseudoLabelRecord::Labeled(p)) => {
                if distill.kind.is_normalized() && p.nbest.len() < 2 {
                    skipped.push(u.utt_id.clone());
                } else {
                    unsup.push((u, p));
                }
            }
            Some(PseudoLabelRecord::Failed(_)) => skipped.push(u.utt_id.clone()),
            None => {
                return Err(Error::Missing {
                    what: "pseudo label",
                    utt_id: u.utt_id.clone(),
                })
            }
        }
    }
    // FS-Norm uses the first nbest_size entries of each list.
    let trimmed: Vec<PseudoLabel> = unsup
        .iter()
        .map(|(_, p)| {
            let mut p = (*p).clone();
            if distill.kind.is_normalized() {
                p.nbest.truncate(distill.nbest_size);
            }
            p
        })
        .collect();

    let teacher_lattices: Vec<Option<ShiftedLattice>> = if distill.kind.is_soft() {
        unsup
            .par_iter()
            .zip(trimmed.par_iter())
            .map(|((u, _), p)| {
                let lat = teacher.build_lattice(&u.features, &p.labels)?;
                if distill.shift >= lat.frames() {
                    // Every frame falls before the shifted teacher.
                    return Ok(Some(ShiftedLattice {
                        lattice: lat,
                        shift: distill.shift,
                    }));
                }
                shift_teacher(&lat, distill.shift).map(Some)
            })
            .collect::<Result<_>>()?
    } else {
        vec![None; unsup.len()]
    };

    let mut optimizer = Optimizer::new(config.train.optimizer)?;
    let mut batches = BatchMixer::new(
        data.supervised.len(),
        unsup.len(),
        config.train.batch_size,
        config.train.sup_fraction,
        config.student.batch_seed,
    )?;
    let mut log = Vec::with_capacity(config.student.steps);
    for step in 0..config.student.steps {
        let items: Vec<TrainItem<'_>> = batches
            .next()
            .expect("endless stream")
            .into_iter()
            .map(|item| match item {
                BatchItem::Supervised(i) => {
                    let u = &data.supervised.utterances()[i];
                    TrainItem::Supervised {
                        utt_id: &u.utt_id,
                        features: &u.features,
                        labels: u.labels.as_ref().expect("labeled corpus"),
                    }
                }
                BatchItem::Unsupervised(i) => TrainItem::Unsupervised {
                    utt_id: &unsup[i].0.utt_id,
                    features: &unsup[i].0.features,
                    pseudo: &trimmed[i],
                    teacher_lattice: teacher_lattices[i].as_ref(),
                },
            })
            .collect();
        let r = train_step(&mut student, &mut optimizer, &items, |m, it| {
            combined_loss(m, it, distill)
        })?;
        log.push(step_log(step, r.loss, &r.metrics));
    }
    Ok(DistilledStudent {
        model: student,
        log,
        skipped,
    })
}

/// Evaluates on the held-out split.
pub fn evaluate_heldout(
    model: &TransducerModel,
    data: &SyntheticData,
    decoder: &DecoderConfig,
) -> Result<SetReport> {
    evaluate(model, "heldout", &data.heldout, None, decoder)
}

/// Evaluates on the unlabeled split against its hidden references.
pub fn evaluate_unsupervised(
    model: &TransducerModel,
    corpus: &Corpus,
    hidden: &HiddenReferences,
    decoder: &DecoderConfig,
) -> Result<SetReport> {
    evaluate(model, "unsupervised", corpus, Some(hidden), decoder)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub shift: usize,
    pub wer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_length: usize,
    pub final_loss: f64,
}

/// One soft distillation run per shift, all with the configured seeds,
/// each evaluated on the held-out split.
pub fn sweep_shift(
    config: &ExperimentConfig,
    teacher: &TransducerModel,
    data: &SyntheticData,
    pseudo: &[PseudoLabelRecord],
) -> Result<Vec<SweepRow>> {
    if !config.distill.kind.is_soft() {
        return Err(Error::Config(format!(
            "sweep-shift needs a soft distillation kind, got {}",
            config.distill.kind
        )));
    }
    let mut rows = Vec::with_capacity(config.sweep.shifts.len());
    for &shift in &config.sweep.shifts {
        let mut c = config.clone();
        c.distill.shift = shift;
        let student = distill_student(&c, teacher, data, pseudo, None)?;
        let report = evaluate_heldout(&student.model, data, &config.decode.eval)?;
        rows.push(SweepRow {
            shift,
            wer: report.pooled.wer,
            substitutions: report.pooled.substitutions,
            deletions: report.pooled.deletions,
            insertions: report.pooled.insertions,
            reference_length: report.pooled.reference_length,
            final_loss: student.log.last().map_or(f64::NAN, |l| l.loss),
        });
    }
    Ok(rows)
}

/// Tab-separated table, one row per shift.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "shift\twer\tsubstitutions\tdeletions\tinsertions\treference_length\tfinal_loss\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.6}\t{}\t{}\t{}\t{}\t{:.6}\n",
            r.shift,
            r.wer,
            r.substitutions,
            r.deletions,
            r.insertions,
            r.reference_length,
            r.final_loss
        ));
    }
    out
}
