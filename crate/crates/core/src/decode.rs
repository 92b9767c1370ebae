//! Greedy and beam-search decoding, N-best rescoring, and the pseudo-label
//! file.
//!
//! Decoders are written against [`StepScorer`], which only needs per-frame
//! output distributions given a label history. [`ModelScorer`] adapts a
//! [`TransducerModel`]; [`PrefixLengthScorer`] adapts a fixed lattice whose
//! rows depend only on how many labels have been emitted.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::lattice::{forward_backward, LabelSeq, Lattice, LogSeqProb, Vocab};
use crate::logspace::log_add_exp;
use crate::model::{EncoderOutput, FeatureSeq, PredictorState, TransducerModel};

/// Default cap on labels emitted at a single frame.
pub const DEFAULT_MAX_SYMBOLS_PER_FRAME: usize = 5;

/// Beam size used to produce pseudo labels.
pub const DEFAULT_BEAM: usize = 8;

pub trait StepScorer {
    type State: Clone;

    fn vocab(&self) -> Vocab;

    /// Number of (encoder) frames.
    fn frames(&self) -> usize;

    fn start(&self) -> Self::State;

    fn advance(&self, state: &Self::State, label: usize) -> Self::State;

    /// `log P(k | t, history)` for all `K + 1` outputs.
    fn log_probs(&self, t: usize, state: &Self::State) -> Vec<f64>;
}

/// A model together with one encoded utterance.
pub struct ModelScorer<'m> {
    model: &'m TransducerModel,
    enc: EncoderOutput,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m TransducerModel, x: &FeatureSeq) -> Result<Self> {
        Ok(ModelScorer {
            model,
            enc: model.encode(x)?,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    type State = PredictorState;

    fn vocab(&self) -> Vocab {
        self.model.vocab()
    }

    fn frames(&self) -> usize {
        self.enc.frames()
    }

    fn start(&self) -> PredictorState {
        self.model.predictor_start()
    }

    fn advance(&self, state: &PredictorState, label: usize) -> PredictorState {
        self.model.predictor_advance(state, label)
    }

    fn log_probs(&self, t: usize, state: &PredictorState) -> Vec<f64> {
        self.model.joint_log_probs(&self.enc, t, state)
    }
}

/// Scorer backed by a lattice: the distribution at `(t, u)` is row
/// `min(u, U)`, whatever the labels were.
pub struct PrefixLengthScorer {
    lattice: Lattice,
}

impl PrefixLengthScorer {
    pub fn new(lattice: Lattice) -> Self {
        PrefixLengthScorer { lattice }
    }
}

impl StepScorer for PrefixLengthScorer {
    type State = usize;

    fn vocab(&self) -> Vocab {
        self.lattice.vocab()
    }

    fn frames(&self) -> usize {
        self.lattice.frames()
    }

    fn start(&self) -> usize {
        0
    }

    fn advance(&self, state: &usize, _label: usize) -> usize {
        state + 1
    }

    fn log_probs(&self, t: usize, state: &usize) -> Vec<f64> {
        self.lattice
            .node(t, (*state).min(self.lattice.label_len()))
            .to_vec()
    }
}

/// Lattice of `scorer` along `y`.
pub fn lattice_for<S: StepScorer>(scorer: &S, y: &LabelSeq) -> Result<Lattice> {
    y.check(scorer.vocab())?;
    let mut states = Vec::with_capacity(y.len() + 1);
    states.push(scorer.start());
    for &label in y.iter() {
        let next = scorer.advance(states.last().unwrap(), label);
        states.push(next);
    }
    let mut buf = Vec::new();
    for t in 0..scorer.frames() {
        for state in &states {
            buf.extend(scorer.log_probs(t, state));
        }
    }
    Lattice::from_raw(scorer.frames(), y.len(), scorer.vocab(), buf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub labels: LabelSeq,
    /// Log-probability accumulated along the decoding path(s).
    pub score: f64,
}

/// Hypotheses sorted by descending score, unique by label sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct NBestList {
    hypotheses: Vec<Hypothesis>,
    beam_size: usize,
}

/// Descending score, then ascending label sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.labels.cmp(&b.labels))
}

impl NBestList {
    /// Sorts, and rejects duplicates or more than `beam_size` entries.
    pub fn new(mut hypotheses: Vec<Hypothesis>, beam_size: usize) -> Result<Self> {
        if beam_size == 0 {
            return Err(Error::InvalidArgument("beam size must be >= 1".into()));
        }
        if hypotheses.len() > beam_size {
            return Err(Error::InvalidArgument(format!(
                "{} hypotheses exceed beam size {beam_size}",
                hypotheses.len()
            )));
        }
        hypotheses.sort_by(rank);
        for pair in hypotheses.windows(2) {
            if pair[0].labels == pair[1].labels {
                return Err(Error::InvalidArgument(format!(
                    "duplicate hypothesis {:?}",
                    pair[0].labels.as_slice()
                )));
            }
        }
        Ok(NBestList {
            hypotheses,
            beam_size,
        })
    }

    pub fn hypotheses(&self) -> &[Hypothesis] {
        &self.hypotheses
    }

    pub fn beam_size(&self) -> usize {
        self.beam_size
    }

    pub fn best(&self) -> Option<&Hypothesis> {
        self.hypotheses.first()
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    /// Keeps the first `n` hypotheses.
    pub fn truncate(&mut self, n: usize) {
        self.hypotheses.truncate(n);
    }
}

fn argmax(values: &[f64]) -> usize {
    // Strict comparison keeps the lowest index on ties.
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Emits the arg-max label at each frame until blank wins or the per-frame
/// cap is reached, then moves to the next frame.
pub fn greedy_decode<S: StepScorer>(
    scorer: &S,
    max_symbols_per_frame: usize,
) -> Result<Hypothesis> {
    if max_symbols_per_frame == 0 {
        return Err(Error::InvalidArgument(
            "max_symbols_per_frame must be >= 1".into(),
        ));
    }
    let blank = scorer.vocab().blank();
    let mut state = scorer.start();
    let mut labels = LabelSeq::empty();
    let mut score = 0.0;
    for t in 0..scorer.frames() {
        let mut emitted = 0;
        loop {
            let lp = scorer.log_probs(t, &state);
            let k = argmax(&lp);
            if k == blank || emitted == max_symbols_per_frame {
                score += lp[blank];
                break;
            }
            score += lp[k];
            labels.push(k);
            state = scorer.advance(&state, k);
            emitted += 1;
        }
    }
    Ok(Hypothesis { labels, score })
}

struct Candidate<St> {
    state: St,
    score: f64,
}

/// Merges `score` into `map[labels]`, computing the state only for a new
/// entry.
fn merge<St>(
    map: &mut HashMap<LabelSeq, Candidate<St>>,
    labels: LabelSeq,
    score: f64,
    state: impl FnOnce() -> St,
) {
    match map.get_mut(&labels) {
        Some(c) => c.score = log_add_exp(c.score, score),
        None => {
            map.insert(
                labels,
                Candidate {
                    state: state(),
                    score,
                },
            );
        }
    }
}

/// Transducer beam search whose best score never decreases with `beam`.
///
/// A single pruned pass is not monotone in its width, so the result merges
/// the passes at every width `1..=beam` (keeping the higher score for a
/// label sequence found by several) and returns the `beam` best. Widths
/// stop early once a pass prunes nothing, since wider passes then return
/// the same hypotheses.
pub fn beam_search<S: StepScorer>(
    scorer: &S,
    beam: usize,
    max_symbols_per_frame: usize,
) -> Result<NBestList>
where
    S::State: Clone,
{
    if beam == 0 {
        return Err(Error::InvalidArgument("beam must be >= 1".into()));
    }
    if max_symbols_per_frame == 0 {
        return Err(Error::InvalidArgument(
            "max_symbols_per_frame must be >= 1".into(),
        ));
    }
    let mut best: HashMap<LabelSeq, f64> = HashMap::new();
    for width in 1..=beam {
        let (hyps, pruned) = beam_pass(scorer, width, max_symbols_per_frame);
        for h in hyps {
            best.entry(h.labels)
                .and_modify(|s| *s = s.max(h.score))
                .or_insert(h.score);
        }
        if !pruned {
            break;
        }
    }
    let mut all: Vec<Hypothesis> = best
        .into_iter()
        .map(|(labels, score)| Hypothesis { labels, score })
        .collect();
    all.sort_by(rank);
    all.truncate(beam);
    NBestList::new(all, beam)
}

/// One frame-synchronous pass at a fixed width. Also reports whether any
/// candidate was pruned.
///
/// Within a frame, active hypotheses either end the frame with a blank or
/// emit one more label (up to `max_symbols_per_frame`). Paths reaching the
/// same label sequence are merged by adding their probabilities. After
/// every emission round, frame-ending and still-emitting candidates compete
/// for the same `beam` slots, which makes `beam = 1` follow the greedy
/// decoder. Without pruning, each score is the exact full-sum probability
/// restricted to the per-frame emission cap.
fn beam_pass<S: StepScorer>(
    scorer: &S,
    beam: usize,
    max_symbols_per_frame: usize,
) -> (Vec<Hypothesis>, bool)
where
    S::State: Clone,
{
    let mut pruned = false;
    let vocab = scorer.vocab();
    let blank = vocab.blank();
    let mut hyps: Vec<(LabelSeq, Candidate<S::State>)> = vec![(
        LabelSeq::empty(),
        Candidate {
            state: scorer.start(),
            score: 0.0,
        },
    )];

    for t in 0..scorer.frames() {
        let mut ended: HashMap<LabelSeq, Candidate<S::State>> = HashMap::new();
        let mut active = hyps;
        for round in 0..=max_symbols_per_frame {
            let mut growing: HashMap<LabelSeq, (f64, usize, usize)> = HashMap::new();
            let mut parents = Vec::with_capacity(active.len());
            for (labels, cand) in active {
                let lp = scorer.log_probs(t, &cand.state);
                let st = cand.state.clone();
                merge(&mut ended, labels.clone(), cand.score + lp[blank], || st);
                if round < max_symbols_per_frame {
                    let parent = parents.len();
                    for (k, &lpk) in lp[..vocab.size()].iter().enumerate() {
                        let mut next = labels.clone();
                        next.push(k);
                        let s = cand.score + lpk;
                        growing
                            .entry(next)
                            .and_modify(|e| e.0 = log_add_exp(e.0, s))
                            .or_insert((s, parent, k));
                    }
                }
                parents.push(cand.state);
            }

            // Shared pruning over frame-ending and growing candidates.
            let mut ranked: Vec<(f64, &LabelSeq, bool)> = ended
                .iter()
                .map(|(l, c)| (c.score, l, true))
                .chain(growing.iter().map(|(l, e)| (e.0, l, false)))
                .collect();
            ranked.sort_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then_with(|| a.1.cmp(b.1))
                    .then(b.2.cmp(&a.2))
            });
            pruned |= ranked.len() > beam;
            let keep: Vec<(LabelSeq, bool)> = ranked
                .into_iter()
                .take(beam)
                .map(|(_, l, is_ended)| (l.clone(), is_ended))
                .collect();
            let mut kept_ended = HashMap::new();
            let mut next_active = Vec::new();
            for (labels, is_ended) in keep {
                if is_ended {
                    let c = ended.remove(&labels).unwrap();
                    kept_ended.insert(labels, c);
                } else {
                    let (score, parent, k) = growing[&labels];
                    let state = scorer.advance(&parents[parent], k);
                    next_active.push((labels, Candidate { state, score }));
                }
            }
            next_active.sort_by(|a, b| a.0.cmp(&b.0));
            ended = kept_ended;
            active = next_active;
            if active.is_empty() {
                break;
            }
        }
        let mut next: Vec<_> = ended.into_iter().collect();
        next.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then_with(|| a.0.cmp(&b.0)));
        pruned |= next.len() > beam;
        next.truncate(beam);
        hyps = next;
    }

    let hyps = hyps
        .into_iter()
        .map(|(labels, c)| Hypothesis {
            labels,
            score: c.score,
        })
        .collect();
    (hyps, pruned)
}

/// Exact full-sum `log P(Y'|X)` for every hypothesis of `nbest`.
pub fn rescore_nbest<S: StepScorer>(scorer: &S, nbest: &NBestList) -> Result<Vec<LogSeqProb>> {
    nbest
        .hypotheses()
        .iter()
        .map(|h| {
            let lat = lattice_for(scorer, &h.labels)?;
            Ok(forward_backward(&lat, &h.labels)?.log_prob)
        })
        .collect()
}

/// One N-best entry of a pseudo-label record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestEntry {
    pub labels: LabelSeq,
    #[serde(serialize_with = "jsonl::f64_17")]
    pub score: f64,
}

/// Teacher output for one unlabeled utterance.
///
/// `labels` is the top beam hypothesis; `score` and the N-best scores are
/// exact full-sum teacher log-probabilities. `nbest[0]` is the pseudo label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoLabel {
    pub utt_id: String,
    pub labels: LabelSeq,
    #[serde(serialize_with = "jsonl::f64_17")]
    pub score: f64,
    pub nbest: Vec<NBestEntry>,
}

impl PseudoLabel {
    /// `-log P̃(Y|X)` of the pseudo label.
    pub fn teacher_nll(&self) -> f64 {
        -self.score
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeFailure {
    pub utt_id: String,
    pub error: String,
}

/// A line of the pseudo-label file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PseudoLabelRecord {
    Labeled(PseudoLabel),
    Failed(DecodeFailure),
}

impl PseudoLabelRecord {
    pub fn utt_id(&self) -> &str {
        match self {
            PseudoLabelRecord::Labeled(p) => &p.utt_id,
            PseudoLabelRecord::Failed(f) => &f.utt_id,
        }
    }
}

/// Beam-searches one utterance and rescores its N-best list with exact
/// full-sum scores. The N-best entries keep beam order, so the first one is
/// always the pseudo label.
pub fn pseudo_label(
    teacher: &TransducerModel,
    utt_id: &str,
    x: &FeatureSeq,
    beam: usize,
    nbest: usize,
) -> Result<PseudoLabel> {
    if nbest == 0 || nbest > beam {
        return Err(Error::InvalidArgument(format!(
            "nbest must be in 1..={beam}, got {nbest}"
        )));
    }
    let scorer = ModelScorer::new(teacher, x)?;
    let mut list = beam_search(&scorer, beam, DEFAULT_MAX_SYMBOLS_PER_FRAME)?;
    list.truncate(nbest);
    let exact = rescore_nbest(&scorer, &list)?;
    let entries: Vec<NBestEntry> = list
        .hypotheses()
        .iter()
        .zip(&exact)
        .map(|(h, s)| NBestEntry {
            labels: h.labels.clone(),
            score: s.value(),
        })
        .collect();
    let top = entries
        .first()
        .cloned()
        .ok_or_else(|| Error::InvalidArgument("beam search returned no hypotheses".into()))?;
    Ok(PseudoLabel {
        utt_id: utt_id.to_string(),
        labels: top.labels,
        score: top.score,
        nbest: entries,
    })
}

pub fn write_pseudo_labels(path: &Path, records: &[PseudoLabelRecord]) -> Result<()> {
    jsonl::write_lines(path, records)
}

pub fn read_pseudo_labels(path: &Path) -> Result<Vec<PseudoLabelRecord>> {
    jsonl::read_lines(path)
}
