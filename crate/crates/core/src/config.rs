//! Experiment configuration: a versioned TOML document whose keys can be
//! overridden with `dotted.key=value` assignments.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ModelSize, SyntheticSpec, TeacherQualityKnob};
use crate::decode::DEFAULT_BEAM;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::metrics::DecoderConfig;
use crate::model::{EncoderConfig, ModelConfig, OptimizerConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Overrides the directory under which run directories are created.
pub const RUN_ROOT_ENV: &str = "TDKD_RUN_ROOT";
pub const DEFAULT_RUN_ROOT: &str = "runs";

/// Encoder layout without its width, which comes from the model size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderLayout {
    pub causal: bool,
    pub left_context: usize,
    #[serde(default)]
    pub right_context: usize,
    #[serde(default = "one")]
    pub subsample: usize,
}

fn one() -> usize {
    1
}

fn model_config(spec: &SyntheticSpec, size: ModelSize, layout: &EncoderLayout) -> ModelConfig {
    let (hidden, pred_dim, joint_dim) = size.widths();
    ModelConfig {
        vocab_size: spec.vocab_size,
        feature_dim: spec.feature_dim,
        encoder: EncoderConfig {
            causal: layout.causal,
            left_context: layout.left_context,
            right_context: layout.right_context,
            subsample: layout.subsample,
            hidden,
        },
        pred_dim,
        joint_dim,
    }
}

/// A teacher preset, optionally with individual knobs overridden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<ModelSize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supervised_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_noise_rate: Option<f64>,
    pub encoder: EncoderLayout,
    pub steps: usize,
    pub init_seed: u64,
    pub corruption_seed: u64,
    pub batch_seed: u64,
}

impl TeacherConfig {
    pub fn knob(&self) -> Result<TeacherQualityKnob> {
        let mut knob = match &self.preset {
            Some(p) => TeacherQualityKnob::preset(p)?,
            None => TeacherQualityKnob {
                size: self.size.ok_or_else(|| {
                    Error::Config("teacher needs either a preset or a size".into())
                })?,
                supervised_fraction: 1.0,
                label_noise_rate: 0.0,
            },
        };
        if let Some(s) = self.size {
            knob.size = s;
        }
        if let Some(f) = self.supervised_fraction {
            knob.supervised_fraction = f;
        }
        if let Some(r) = self.label_noise_rate {
            knob.label_noise_rate = r;
        }
        knob.validate()?;
        Ok(knob)
    }

    /// Name used in reports: the preset, or `custom`.
    pub fn id(&self) -> String {
        self.preset.clone().unwrap_or_else(|| "custom".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub size: ModelSize,
    pub encoder: EncoderLayout,
    pub steps: usize,
    pub init_seed: u64,
    pub batch_seed: u64,
    /// Start from this checkpoint instead of a fresh initialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Supervised share of each distillation batch.
    #[serde(default = "default_sup_fraction")]
    pub sup_fraction: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_sup_fraction() -> f64 {
    crate::data::DEFAULT_SUP_FRACTION
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSettings {
    /// Beam used for pseudo labels.
    #[serde(default = "default_beam")]
    pub beam: usize,
    /// Decoder used for evaluation.
    #[serde(default)]
    pub eval: DecoderConfig,
}

fn default_beam() -> usize {
    DEFAULT_BEAM
}

impl Default for DecodeSettings {
    fn default() -> Self {
        DecodeSettings {
            beam: DEFAULT_BEAM,
            eval: DecoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Teacher shifts to try, in frames.
    pub shifts: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            shifts: (0..=10).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub data: SyntheticSpec,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub distill: DistillConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub decode: DecodeSettings,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: ExperimentConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Checks every setting, including kind/architecture compatibility.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.data.validate()?;
        self.teacher.knob()?;
        self.teacher_model()?.validate()?;
        self.student_model()?.validate()?;
        self.distill.validate()?;
        self.train.optimizer.validate()?;
        self.decode.eval.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.train.sup_fraction) {
            return Err(Error::Config(format!(
                "train.sup_fraction must be in [0, 1], got {}",
                self.train.sup_fraction
            )));
        }
        if self.decode.beam == 0 {
            return Err(Error::Config("decode.beam must be >= 1".into()));
        }
        if self.distill.nbest_size > self.decode.beam {
            return Err(Error::Config(format!(
                "distill.nbest_size ({}) cannot exceed decode.beam ({})",
                self.distill.nbest_size, self.decode.beam
            )));
        }
        check_kind_architecture(&self.distill, &self.teacher.encoder, &self.student.encoder)?;
        if self.sweep.shifts.is_empty() {
            return Err(Error::Config("sweep.shifts must not be empty".into()));
        }
        Ok(())
    }

    pub fn teacher_model(&self) -> Result<ModelConfig> {
        Ok(model_config(
            &self.data,
            self.teacher.knob()?.size,
            &self.teacher.encoder,
        ))
    }

    pub fn student_model(&self) -> Result<ModelConfig> {
        Ok(model_config(
            &self.data,
            self.student.size,
            &self.student.encoder,
        ))
    }

    /// First 16 hex digits of the SHA-256 of the canonical config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))[..16].to_string()
    }

    /// `<root>/<hash>`, where root is `$TDKD_RUN_ROOT` or `runs`.
    pub fn run_dir(&self) -> PathBuf {
        let root = std::env::var_os(RUN_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT));
        self.run_dir_in(&root)
    }

    pub fn run_dir_in(&self, root: &Path) -> PathBuf {
        root.join(self.hash())
    }
}

/// Soft losses compare lattices node by node, so teacher and student must
/// produce the same number of encoder frames.
pub fn check_kind_architecture(
    distill: &DistillConfig,
    teacher: &EncoderLayout,
    student: &EncoderLayout,
) -> Result<()> {
    if distill.kind.is_soft() && teacher.subsample != student.subsample {
        return Err(Error::Config(format!(
            "{} compares lattices node by node and needs equal time subsampling, but the teacher \
             uses {} and the student {}; use a full-sum kind (fs_l1, fs_mse, fs_norm_l1, fs_norm_mse), \
             which does not depend on the time dimension",
            distill.kind, teacher.subsample, student.subsample
        )));
    }
    Ok(())
}

/// Applies `a.b.c=value`. The value is parsed as a TOML value, falling back
/// to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        Error::Config(format!(
            "override '{assignment}' is not of the form key=value"
        ))
    })?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("invalid override key '{key}'")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
schema_version = 1

[data]
vocab_size = 5
feature_dim = 6
frames_per_label = [2, 4]
noise_sigma = 0.5
labels_per_utt = [2, 5]
supervised = 20
unsupervised = 60
heldout = 20
seed = 1

[teacher]
preset = "S3"
encoder = { causal = false, left_context = 2, right_context = 2 }
steps = 10
init_seed = 2
corruption_seed = 3
batch_seed = 4

[student]
size = "S"
encoder = { causal = true, left_context = 3 }
steps = 10
init_seed = 5
batch_seed = 6

[distill]
kind = "fs_l1"
weights = { weight_supervised_rnnt = 1.0, weight_hard_on_pseudo = 1.0, weight_distill = 1.0 }

[train]
batch_size = 10
"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_toml_str(SAMPLE, &[]).unwrap();
        assert_eq!(c.decode.beam, 8);
        assert_eq!(c.train.sup_fraction, 0.1);
        assert_eq!(c.train.optimizer.momentum, 0.9);
        assert_eq!(c.sweep.shifts.len(), 11);
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn overrides() {
        let c = ExperimentConfig::from_toml_str(
            SAMPLE,
            &[
                "distill.kind=fs_norm_l1".into(),
                "distill.nbest_size=4".into(),
                "train.optimizer.learning_rate=0.2".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.distill.nbest_size, 4);
        assert_eq!(c.train.optimizer.learning_rate, 0.2);
        assert_ne!(
            c.hash(),
            ExperimentConfig::from_toml_str(SAMPLE, &[]).unwrap().hash()
        );
        assert!(ExperimentConfig::from_toml_str(SAMPLE, &["nokey".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str(SAMPLE, &["data.bogus=1".into()]).is_err());
    }

    #[test]
    fn rejects_incompatible_combinations() {
        let soft_mismatch = ExperimentConfig::from_toml_str(
            SAMPLE,
            &[
                "distill.kind=soft_full".into(),
                "student.encoder.subsample=2".into(),
            ],
        );
        let msg = soft_mismatch.unwrap_err().to_string();
        assert!(msg.contains("fs_l1"), "{msg}");
        assert!(
            ExperimentConfig::from_toml_str(SAMPLE, &["student.encoder.subsample=2".into()])
                .is_ok()
        );
        assert!(ExperimentConfig::from_toml_str(SAMPLE, &["distill.shift=3".into()]).is_err());
        assert!(
            ExperimentConfig::from_toml_str(SAMPLE, &["distill.kind=fs_norm_l1".into()]).is_err()
        );
        assert!(ExperimentConfig::from_toml_str(
            SAMPLE,
            &["student.encoder.right_context=1".into()]
        )
        .is_err());
        let missing_seed = SAMPLE.replace("init_seed = 5\n", "");
        assert!(ExperimentConfig::from_toml_str(&missing_seed, &[]).is_err());
    }
}
