//! Synthetic corpora, label corruption, teacher-quality presets and the
//! supervised/unsupervised batch mixer.
//!
//! Each label owns a fixed random template vector. An utterance is a label
//! sequence in which every label occupies `r` frames, `r` drawn uniformly from
//! `frames_per_label`, each frame its template plus Gaussian noise.
//! Neighboring labels always differ. With
//! `onset_frames > 0` the first frames of every segment show a template
//! shared by all labels, so a label is identifiable only from the end of its
//! segment.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl::{self, f64_fixed9, round9};
use crate::lattice::{LabelSeq, Vocab};
use crate::model::FeatureSeq;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Inclusive range of frames per label.
    pub frames_per_label: [usize; 2],
    #[serde(default)]
    pub onset_frames: usize,
    pub noise_sigma: f64,
    /// Inclusive range of labels per utterance.
    pub labels_per_utt: [usize; 2],
    pub supervised: usize,
    pub unsupervised: usize,
    /// Labeled evaluation utterances, disjoint from both training splits.
    #[serde(default)]
    pub heldout: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.feature_dim == 0 {
            return bad("vocab_size and feature_dim must be >= 1".into());
        }
        let [a, b] = self.frames_per_label;
        if a == 0 || a > b {
            return bad(format!(
                "frames_per_label must satisfy 1 <= a <= b, got [{a}, {b}]"
            ));
        }
        if self.onset_frames >= a {
            return bad(format!(
                "onset_frames ({}) must be smaller than the minimum frames per label ({a})",
                self.onset_frames
            ));
        }
        let [lo, hi] = self.labels_per_utt;
        if lo > hi || hi == 0 {
            return bad(format!(
                "labels_per_utt must satisfy lo <= hi, hi >= 1, got [{lo}, {hi}]"
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            ));
        }
        if self.supervised == 0 || self.unsupervised == 0 {
            return bad("supervised and unsupervised sizes must be >= 1".into());
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab_size).expect("validated vocab size")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Supervised,
    Unsupervised,
    Heldout,
}

impl Split {
    pub fn prefix(self) -> &'static str {
        match self {
            Split::Supervised => "sup",
            Split::Unsupervised => "unsup",
            Split::Heldout => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub features: FeatureSeq,
    pub labels: Option<LabelSeq>,
}

/// Invariant: supervised and held-out utterances carry labels, unsupervised
/// utterances do not.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    split: Split,
    utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn new(split: Split, utterances: Vec<Utterance>) -> Result<Self> {
        let want_labels = split != Split::Unsupervised;
        if let Some(u) = utterances
            .iter()
            .find(|u| u.labels.is_some() != want_labels)
        {
            return Err(Error::InvalidArgument(format!(
                "utterance {} in the {split:?} corpus {} labels",
                u.utt_id,
                if want_labels { "lacks" } else { "carries" }
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(u) = utterances.iter().find(|u| !seen.insert(u.utt_id.as_str())) {
            return Err(Error::InvalidArgument(format!(
                "duplicate utterance id {}",
                u.utt_id
            )));
        }
        Ok(Corpus { split, utterances })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// The first `ceil(fraction * len)` utterances (at least one).
    pub fn subset(&self, fraction: f64) -> Result<Corpus> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!(
                "subset fraction must be in (0, 1], got {fraction}"
            )));
        }
        let n = ((self.len() as f64 * fraction).ceil() as usize).clamp(1, self.len().max(1));
        Ok(Corpus {
            split: self.split,
            utterances: self.utterances[..n.min(self.len())].to_vec(),
        })
    }

    pub fn check_labels(&self, vocab: Vocab) -> Result<()> {
        for u in &self.utterances {
            if let Some(l) = &u.labels {
                l.check(vocab)?;
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.utterances.first().map(|u| u.features.dim())
    }
}

/// Ground truth of unsupervised utterances. Training code never sees it;
/// only [`crate::metrics`] reads it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HiddenReferences {
    refs: BTreeMap<String, LabelSeq>,
}

#[derive(Serialize, Deserialize)]
struct ReferenceRecord {
    utt_id: String,
    labels: LabelSeq,
}

impl HiddenReferences {
    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub(crate) fn get(&self, utt_id: &str) -> Option<&LabelSeq> {
        self.refs.get(utt_id)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        jsonl::write_lines(
            path,
            self.refs.iter().map(|(id, l)| ReferenceRecord {
                utt_id: id.clone(),
                labels: l.clone(),
            }),
        )
    }

    pub fn read(path: &Path) -> Result<Self> {
        let records: Vec<ReferenceRecord> = jsonl::read_lines(path)?;
        Ok(HiddenReferences {
            refs: records.into_iter().map(|r| (r.utt_id, r.labels)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub supervised: Corpus,
    pub unsupervised: Corpus,
    pub heldout: Corpus,
    pub hidden: HiddenReferences,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-label templates followed by the shared onset template.
fn templates(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(spec.seed, 0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..=spec.vocab_size)
        .map(|_| {
            (0..spec.feature_dim)
                .map(|_| normal.sample(&mut rng))
                .collect()
        })
        .collect()
}

fn generate_split(
    spec: &SyntheticSpec,
    templates: &[Vec<f64>],
    split: Split,
    count: usize,
    stream: u64,
) -> Vec<(String, FeatureSeq, LabelSeq)> {
    let mut rng = stream_rng(spec.seed, stream);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let onset = &templates[spec.vocab_size];
    (0..count)
        .map(|i| {
            let n = rng.random_range(spec.labels_per_utt[0]..=spec.labels_per_utt[1]);
            let mut labels: Vec<usize> = Vec::with_capacity(n);
            for _ in 0..n {
                // Neighbors differ; a repeated label would have no visible boundary.
                let l = match labels.last() {
                    Some(&prev) if spec.vocab_size > 1 => {
                        let s = rng.random_range(0..spec.vocab_size - 1);
                        if s >= prev {
                            s + 1
                        } else {
                            s
                        }
                    }
                    _ => rng.random_range(0..spec.vocab_size),
                };
                labels.push(l);
            }
            let mut data = Vec::new();
            for &l in &labels {
                let r = rng.random_range(spec.frames_per_label[0]..=spec.frames_per_label[1]);
                for j in 0..r {
                    let template = if j < spec.onset_frames {
                        onset
                    } else {
                        &templates[l]
                    };
                    data.extend(
                        template
                            .iter()
                            .map(|&v| round9(v + spec.noise_sigma * noise.sample(&mut rng))),
                    );
                }
            }
            if data.is_empty() {
                // Label-free utterances still need one frame.
                data.extend(
                    (0..spec.feature_dim)
                        .map(|_| round9(spec.noise_sigma * noise.sample(&mut rng))),
                );
            }
            let frames = data.len() / spec.feature_dim;
            let features =
                FeatureSeq::new(frames, spec.feature_dim, data).expect("finite generated features");
            (
                format!("{}-{i:05}", split.prefix()),
                features,
                LabelSeq::from(labels),
            )
        })
        .collect()
}

/// Draws the three splits. Deterministic in `spec`; each split has its own
/// random stream, so changing one split's size leaves the others intact.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let templates = templates(spec);
    let labeled = |split, count, stream| {
        let utts = generate_split(spec, &templates, split, count, stream)
            .into_iter()
            .map(|(utt_id, features, labels)| Utterance {
                utt_id,
                features,
                labels: Some(labels),
            })
            .collect();
        Corpus::new(split, utts)
    };
    let mut hidden = HiddenReferences::default();
    let unsup = generate_split(spec, &templates, Split::Unsupervised, spec.unsupervised, 2)
        .into_iter()
        .map(|(utt_id, features, labels)| {
            hidden.refs.insert(utt_id.clone(), labels);
            Utterance {
                utt_id,
                features,
                labels: None,
            }
        })
        .collect();
    Ok(SyntheticData {
        supervised: labeled(Split::Supervised, spec.supervised, 1)?,
        unsupervised: Corpus::new(Split::Unsupervised, unsup)?,
        heldout: labeled(Split::Heldout, spec.heldout, 3)?,
        hidden,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionStats {
    pub original_labels: usize,
    pub substituted: usize,
    pub deleted: usize,
    pub inserted: usize,
}

impl CorruptionStats {
    /// Corrupted operations per original label.
    pub fn fraction(&self) -> f64 {
        if self.original_labels == 0 {
            return 0.0;
        }
        (self.substituted + self.deleted + self.inserted) as f64 / self.original_labels as f64
    }
}

/// Per original label: substituted with probability `0.8 rate`, else deleted
/// with probability `0.1 rate`; independently followed by an inserted random
/// label with probability `0.1 rate`.
pub fn corrupt_labels(
    corpus: &Corpus,
    vocab: Vocab,
    rate: f64,
    seed: u64,
) -> Result<(Corpus, CorruptionStats)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "label noise rate must be in [0, 1), got {rate}"
        )));
    }
    if corpus.split == Split::Unsupervised {
        return Err(Error::InvalidArgument(
            "cannot corrupt labels of an unlabeled corpus".into(),
        ));
    }
    if rate > 0.0 && vocab.size() < 2 {
        return Err(Error::Config(
            "label substitution needs a vocabulary of at least 2".into(),
        ));
    }
    let mut rng = stream_rng(seed, 7);
    let mut stats = CorruptionStats::default();
    let k = vocab.size();
    let mut utterances = Vec::with_capacity(corpus.len());
    for u in &corpus.utterances {
        let labels = u.labels.as_ref().expect("labeled split");
        labels.check(vocab)?;
        let mut out = Vec::with_capacity(labels.len() + 2);
        for &l in labels.iter() {
            stats.original_labels += 1;
            if rate == 0.0 {
                out.push(l);
                continue;
            }
            let draw: f64 = rng.random();
            if draw < 0.8 * rate {
                // Uniform over the other K - 1 labels.
                let s = rng.random_range(0..k - 1);
                out.push(if s >= l { s + 1 } else { s });
                stats.substituted += 1;
            } else if draw < 0.9 * rate {
                stats.deleted += 1;
            } else {
                out.push(l);
            }
            if rng.random::<f64>() < 0.1 * rate {
                out.push(rng.random_range(0..k));
                stats.inserted += 1;
            }
        }
        utterances.push(Utterance {
            utt_id: u.utt_id.clone(),
            features: u.features.clone(),
            labels: Some(LabelSeq::from(out)),
        });
    }
    Ok((Corpus::new(corpus.split, utterances)?, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BatchItem {
    Supervised(usize),
    Unsupervised(usize),
}

/// Endless stream of mixed batches. Each corpus is visited in a freshly
/// shuffled order per epoch. The supervised count of batch `b` is
/// `floor((b + 1) s) - floor(b s)` with `s = batch_size * sup_fraction`,
/// so the running total never differs from the exact share by one or more.
#[derive(Debug, Clone)]
pub struct BatchMixer {
    batch_size: usize,
    sup_fraction: f64,
    batches: u64,
    sup: EpochSampler,
    unsup: EpochSampler,
}

#[derive(Debug, Clone)]
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    fn new(len: usize, rng: ChaCha8Rng) -> Self {
        EpochSampler {
            order: (0..len).collect(),
            pos: len,
            rng,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

pub const DEFAULT_SUP_FRACTION: f64 = 0.10;

pub fn mix_batches(
    sup: &Corpus,
    unsup: &Corpus,
    batch_size: usize,
    sup_fraction: f64,
    seed: u64,
) -> Result<BatchMixer> {
    BatchMixer::new(sup.len(), unsup.len(), batch_size, sup_fraction, seed)
}

impl BatchMixer {
    /// Mixer over index ranges `0..sup_len` and `0..unsup_len`.
    pub fn new(
        sup_len: usize,
        unsup_len: usize,
        batch_size: usize,
        sup_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&sup_fraction) {
            return Err(Error::Config(format!(
                "supervised fraction must be in [0, 1], got {sup_fraction}"
            )));
        }
        if sup_fraction > 0.0 && sup_len == 0 {
            return Err(Error::Config(
                "supervised corpus is empty but its batch fraction is positive".into(),
            ));
        }
        if sup_fraction < 1.0 && unsup_len == 0 {
            return Err(Error::Config(
                "unsupervised corpus is empty but its batch fraction is positive".into(),
            ));
        }
        Ok(BatchMixer {
            batch_size,
            sup_fraction,
            batches: 0,
            sup: EpochSampler::new(sup_len, stream_rng(seed, 11)),
            unsup: EpochSampler::new(unsup_len, stream_rng(seed, 12)),
        })
    }

    fn cumulative_supervised(&self, batches: u64) -> usize {
        // The epsilon absorbs representation error, e.g. 10 * 0.1.
        (batches as f64 * self.batch_size as f64 * self.sup_fraction + 1e-9).floor() as usize
    }
}

impl Iterator for BatchMixer {
    type Item = Vec<BatchItem>;

    fn next(&mut self) -> Option<Vec<BatchItem>> {
        let n_sup = (self.cumulative_supervised(self.batches + 1)
            - self.cumulative_supervised(self.batches))
        .min(self.batch_size);
        self.batches += 1;
        let mut batch = Vec::with_capacity(self.batch_size);
        batch.extend((0..n_sup).map(|_| BatchItem::Supervised(self.sup.next())));
        batch.extend((n_sup..self.batch_size).map(|_| BatchItem::Unsupervised(self.unsup.next())));
        Some(batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelSize {
    S,
    M,
    L,
}

impl ModelSize {
    /// `(encoder hidden, predictor, joint)` widths.
    pub fn widths(self) -> (usize, usize, usize) {
        match self {
            ModelSize::S => (12, 8, 12),
            ModelSize::M => (24, 12, 24),
            ModelSize::L => (40, 16, 40),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherQualityKnob {
    pub size: ModelSize,
    pub supervised_fraction: f64,
    #[serde(default)]
    pub label_noise_rate: f64,
}

pub const TEACHER_PRESETS: [&str; 5] = ["L", "S", "M5", "L5", "S3"];

impl TeacherQualityKnob {
    /// Named teachers ordered from strongest to weakest. `M5`/`L5` see
    /// mildly noisy labels; `S3` is small, trained on 60% of the supervised
    /// split with heavy label noise.
    pub fn preset(name: &str) -> Result<Self> {
        let (size, supervised_fraction, label_noise_rate) = match name {
            "L" => (ModelSize::L, 1.0, 0.0),
            "S" => (ModelSize::S, 1.0, 0.0),
            "M5" => (ModelSize::M, 1.0, 0.1),
            "L5" => (ModelSize::L, 1.0, 0.1),
            "S3" => (ModelSize::S, 0.6, 0.3),
            other => {
                return Err(Error::Config(format!(
                    "unknown teacher preset '{other}', expected one of {TEACHER_PRESETS:?}"
                )))
            }
        };
        Ok(TeacherQualityKnob {
            size,
            supervised_fraction,
            label_noise_rate,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.supervised_fraction > 0.0 && self.supervised_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "supervised_fraction must be in (0, 1], got {}",
                self.supervised_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.label_noise_rate) {
            return Err(Error::Config(format!(
                "label_noise_rate must be in [0, 1), got {}",
                self.label_noise_rate
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusRecord {
    utt_id: String,
    num_frames: usize,
    dim: usize,
    #[serde(serialize_with = "f64_fixed9")]
    frames: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<LabelSeq>,
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    jsonl::write_lines(
        path,
        corpus.utterances.iter().map(|u| CorpusRecord {
            utt_id: u.utt_id.clone(),
            num_frames: u.features.frames(),
            dim: u.features.dim(),
            frames: u.features.as_slice().to_vec(),
            labels: u.labels.clone(),
        }),
    )
}

pub fn read_corpus(path: &Path, split: Split) -> Result<Corpus> {
    let records: Vec<CorpusRecord> = jsonl::read_lines(path)?;
    let utterances = records
        .into_iter()
        .map(|r| {
            let features = FeatureSeq::new(r.num_frames, r.dim, r.frames).map_err(|e| {
                Error::format("corpus", format!("{} ({})", path.display(), r.utt_id), e)
            })?;
            Ok(Utterance {
                utt_id: r.utt_id,
                features,
                labels: r.labels,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Corpus::new(split, utterances).map_err(|e| Error::format("corpus", path.display(), e))
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub split: Split,
    /// Relative to the manifest's directory.
    pub file: String,
    pub utt_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub spec: SyntheticSpec,
    pub splits: Vec<SplitEntry>,
    pub references_file: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REFERENCES_FILE: &str = "unsup.refs.jsonl";

fn corpus_file(split: Split) -> String {
    format!("{}.jsonl", split.prefix())
}

/// Writes every split, the hidden references and `manifest.json` into `dir`,
/// creating it if needed.
pub fn write_synthetic(
    dir: &Path,
    spec: &SyntheticSpec,
    data: &SyntheticData,
) -> Result<CorpusManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut splits = Vec::new();
    for corpus in [&data.supervised, &data.unsupervised, &data.heldout] {
        let file = corpus_file(corpus.split);
        write_corpus(&dir.join(&file), corpus)?;
        splits.push(SplitEntry {
            split: corpus.split,
            file,
            utt_ids: corpus.utterances.iter().map(|u| u.utt_id.clone()).collect(),
        });
    }
    data.hidden.write(&dir.join(REFERENCES_FILE))?;
    let manifest = CorpusManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        spec: spec.clone(),
        splits,
        references_file: REFERENCES_FILE.to_string(),
    };
    jsonl::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let manifest: CorpusManifest = jsonl::read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::format(
            "corpus manifest",
            dir.join(MANIFEST_FILE).display(),
            format!("unsupported schema_version {}", manifest.schema_version),
        ));
    }
    Ok(manifest)
}

/// Reads back what [`write_synthetic`] wrote, checking split membership
/// against the manifest.
pub fn read_synthetic(dir: &Path) -> Result<(CorpusManifest, SyntheticData)> {
    let manifest = read_manifest(dir)?;
    let load = |split: Split| -> Result<Corpus> {
        let entry = manifest
            .splits
            .iter()
            .find(|e| e.split == split)
            .ok_or_else(|| {
                Error::format(
                    "corpus manifest",
                    dir.display(),
                    format!("no {split:?} split"),
                )
            })?;
        let corpus = read_corpus(&dir.join(&entry.file), split)?;
        let ids: Vec<&str> = corpus
            .utterances
            .iter()
            .map(|u| u.utt_id.as_str())
            .collect();
        if ids != entry.utt_ids.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::format(
                "corpus manifest",
                dir.join(&entry.file).display(),
                "utterance ids differ from the manifest",
            ));
        }
        corpus.check_labels(manifest.spec.vocab())?;
        Ok(corpus)
    };
    let data = SyntheticData {
        supervised: load(Split::Supervised)?,
        unsupervised: load(Split::Unsupervised)?,
        heldout: load(Split::Heldout)?,
        hidden: HiddenReferences::read(&dir.join(&manifest.references_file))?,
    };
    Ok((manifest, data))
}
