//! Word error rate by Levenshtein alignment, pooled over corpora.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, HiddenReferences};
use crate::decode::{beam_search, greedy_decode, ModelScorer, DEFAULT_MAX_SYMBOLS_PER_FRAME};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::lattice::LabelSeq;
use crate::model::TransducerModel;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_length: usize,
    /// `(S + D + I) / max(1, reference_length)`.
    pub wer: f64,
    /// Set when an empty reference met a non-empty hypothesis.
    #[serde(default)]
    pub empty_reference: bool,
}

impl WerReport {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    fn from_counts(s: usize, d: usize, i: usize, n: usize, empty_reference: bool) -> Self {
        WerReport {
            substitutions: s,
            deletions: d,
            insertions: i,
            reference_length: n,
            wer: (s + d + i) as f64 / n.max(1) as f64,
            empty_reference,
        }
    }

    /// Error mass over total reference length.
    pub fn pooled<'a>(reports: impl IntoIterator<Item = &'a WerReport>) -> WerReport {
        let (mut s, mut d, mut i, mut n, mut e) = (0, 0, 0, 0, false);
        for r in reports {
            s += r.substitutions;
            d += r.deletions;
            i += r.insertions;
            n += r.reference_length;
            e |= r.empty_reference;
        }
        WerReport::from_counts(s, d, i, n, e)
    }
}

/// Minimal `S + D + I` alignment of `hyp` against `reference`. Among
/// equal-cost alignments the one with the most substitutions is chosen.
pub fn edit_distance(reference: &[usize], hyp: &[usize]) -> WerReport {
    let (n, m) = (reference.len(), hyp.len());
    // cost[i][j] = (edits, -substitutions) for reference[..i] vs hyp[..j].
    let w = m + 1;
    let mut cost = vec![(0usize, 0isize); (n + 1) * w];
    for i in 0..=n {
        for j in 0..=m {
            cost[i * w + j] = if i == 0 {
                (j, 0)
            } else if j == 0 {
                (i, 0)
            } else {
                let (de, ds) = cost[(i - 1) * w + j - 1];
                let diag = if reference[i - 1] == hyp[j - 1] {
                    (de, ds)
                } else {
                    (de + 1, ds - 1)
                };
                let del = cost[(i - 1) * w + j];
                let ins = cost[i * w + j - 1];
                diag.min((del.0 + 1, del.1)).min((ins.0 + 1, ins.1))
            };
        }
    }
    let (mut i, mut j) = (n, m);
    let (mut s, mut d, mut ins) = (0, 0, 0);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let (de, ds) = cost[(i - 1) * w + j - 1];
            if reference[i - 1] == hyp[j - 1] && here == (de, ds) {
                i -= 1;
                j -= 1;
                continue;
            }
            if reference[i - 1] != hyp[j - 1] && here == (de + 1, ds - 1) {
                s += 1;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == (cost[(i - 1) * w + j].0 + 1, cost[(i - 1) * w + j].1) {
            d += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    WerReport::from_counts(s, d, ins, n, n == 0 && m > 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// 1 decodes greedily.
    pub beam: usize,
    #[serde(default = "default_cap")]
    pub max_symbols_per_frame: usize,
}

fn default_cap() -> usize {
    DEFAULT_MAX_SYMBOLS_PER_FRAME
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            beam: 1,
            max_symbols_per_frame: DEFAULT_MAX_SYMBOLS_PER_FRAME,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 || self.max_symbols_per_frame == 0 {
            return Err(Error::Config(format!(
                "decoder beam and max_symbols_per_frame must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn decode(
        &self,
        model: &TransducerModel,
        x: &crate::model::FeatureSeq,
    ) -> Result<LabelSeq> {
        let scorer = ModelScorer::new(model, x)?;
        if self.beam == 1 {
            Ok(greedy_decode(&scorer, self.max_symbols_per_frame)?.labels)
        } else {
            let list = beam_search(&scorer, self.beam, self.max_symbols_per_frame)?;
            Ok(list.best().map(|h| h.labels.clone()).unwrap_or_default())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceWer {
    pub utt_id: String,
    pub reference: LabelSeq,
    pub hypothesis: LabelSeq,
    #[serde(flatten)]
    pub report: WerReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub name: String,
    #[serde(flatten)]
    pub pooled: WerReport,
    pub utterances: Vec<UtteranceWer>,
}

/// Decodes every utterance and scores it against its reference: the
/// utterance's own labels, or `hidden` for unlabeled corpora.
pub fn evaluate(
    model: &TransducerModel,
    name: &str,
    corpus: &Corpus,
    hidden: Option<&HiddenReferences>,
    decoder: &DecoderConfig,
) -> Result<SetReport> {
    decoder.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "evaluation set '{name}' is empty"
        )));
    }
    let utterances = corpus
        .utterances()
        .par_iter()
        .map(|u| {
            let reference = match (&u.labels, hidden) {
                (Some(l), _) => l.clone(),
                (None, Some(h)) => h.get(&u.utt_id).cloned().ok_or_else(|| Error::Missing {
                    what: "reference labels",
                    utt_id: u.utt_id.clone(),
                })?,
                (None, None) => {
                    return Err(Error::Missing {
                        what: "reference labels",
                        utt_id: u.utt_id.clone(),
                    })
                }
            };
            let hypothesis = decoder.decode(model, &u.features)?;
            let report = edit_distance(&reference, &hypothesis);
            Ok(UtteranceWer {
                utt_id: u.utt_id.clone(),
                reference,
                hypothesis,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SetReport {
        name: name.to_string(),
        pooled: WerReport::pooled(utterances.iter().map(|u| &u.report)),
        utterances,
    })
}

/// Unweighted mean of per-set WERs.
pub fn macro_average(sets: &[SetReport]) -> Option<f64> {
    if sets.is_empty() {
        return None;
    }
    Some(sets.iter().map(|s| s.pooled.wer).sum::<f64>() / sets.len() as f64)
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Who produced the evaluated model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill_kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<usize>,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub metadata: ReportMetadata,
    pub decoder: DecoderConfig,
    pub sets: Vec<SetReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_wer: Option<f64>,
}

impl EvalReport {
    pub fn new(
        metadata: ReportMetadata,
        decoder: DecoderConfig,
        sets: Vec<SetReport>,
        with_macro: bool,
    ) -> Self {
        let macro_wer = if with_macro {
            macro_average(&sets)
        } else {
            None
        };
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            metadata,
            decoder,
            sets,
            macro_wer,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        jsonl::write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        jsonl::read_json(path)
    }
}
