//! `tdkd`: the distillation pipeline as six verbs.
//!
//! Every verb reads an experiment config (TOML) plus `--set key=value`
//! overrides. Outputs default to `$TDKD_RUN_ROOT/<config hash>/`; inputs
//! default to the files an earlier verb would have written there (or under
//! `--from`), and each can be pointed elsewhere with a path flag.
//!
//! Exit codes: 0 success, 1 invalid config or arguments, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use transducer_distill::config::ExperimentConfig;
use transducer_distill::data::{self, SyntheticData};
use transducer_distill::decode::{read_pseudo_labels, write_pseudo_labels, PseudoLabelRecord};
use transducer_distill::experiment::{self, StepLog};
use transducer_distill::jsonl;
use transducer_distill::metrics::{evaluate, EvalReport, ReportMetadata};
use transducer_distill::model::{read_checkpoint, write_checkpoint, TransducerModel};
use transducer_distill::{Error, Result};

const DATA_DIR: &str = "data";
const TEACHER_CKPT: &str = "teacher.ckpt";
const TEACHER_LOG: &str = "teacher.log.jsonl";
const TEACHER_SUMMARY: &str = "teacher.json";
const PSEUDO_FILE: &str = "pseudo.jsonl";
const STUDENT_CKPT: &str = "student.ckpt";
const STUDENT_LOG: &str = "student.log.jsonl";
const STUDENT_SUMMARY: &str = "student.json";
const EVAL_FILE: &str = "eval.json";
const SWEEP_TABLE: &str = "sweep.tsv";
const SWEEP_DATA: &str = "sweep.jsonl";
const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Parser)]
#[command(name = "tdkd", version, about = "Transducer knowledge distillation on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config key, e.g. `--set distill.kind=fs_l1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory for outputs; defaults to the hash-named run directory.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Directory holding inputs from earlier verbs (data, teacher, pseudo
    /// labels); defaults to the run directory.
    #[arg(long)]
    from: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpora and their manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory; defaults to `<run dir>/data`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a teacher with the plain transducer loss.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode the unlabeled split with the teacher.
    PseudoLabel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Beam size; defaults to `decode.beam`.
        #[arg(long)]
        beam: Option<usize>,
        /// Hypotheses kept per utterance; defaults to `distill.nbest_size`.
        #[arg(long)]
        nbest: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a student from the teacher and its pseudo labels.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        pseudo: Option<PathBuf>,
        /// Start from this checkpoint; overrides `student.init_checkpoint`.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Word error rates of a checkpoint on one or more splits.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to `<run dir>/student.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Splits to score: heldout, unsupervised.
        #[arg(long, value_delimiter = ',', default_value = "heldout")]
        sets: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One soft distillation run per teacher shift.
    SweepShift {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        pseudo: Option<PathBuf>,
        /// Shifts to try; defaults to `sweep.shifts`.
        #[arg(long, value_delimiter = ',')]
        shifts: Option<Vec<usize>>,
        /// Output directory for `sweep.tsv` and `sweep.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Context {
    config: ExperimentConfig,
    run_dir: PathBuf,
    input_dir: PathBuf,
}

impl Context {
    fn load(common: &Common) -> Result<Self> {
        require(&common.config, "config file")?;
        let config = ExperimentConfig::load(&common.config, &common.overrides)?;
        let run_dir = common.run_dir.clone().unwrap_or_else(|| config.run_dir());
        let input_dir = common.from.clone().unwrap_or_else(|| run_dir.clone());
        Ok(Context {
            config,
            run_dir,
            input_dir,
        })
    }

    fn input(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.input_dir.join(default))
    }

    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.run_dir.join(default))
    }

    /// Creates the run directory and records the resolved config in it.
    fn prepare(&self) -> Result<()> {
        create_dir(&self.run_dir)?;
        let path = self.run_dir.join(RESOLVED_CONFIG);
        let text = self.config.to_toml_string()?;
        std::fs::write(&path, text).map_err(|e| io_error(&path, e))
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

/// A missing input is a usage error, reported before any work starts.
fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn load_data(ctx: &Context, dir: &Option<PathBuf>) -> Result<SyntheticData> {
    let dir = ctx.input(dir, DATA_DIR);
    require(&dir.join(data::MANIFEST_FILE), "corpus manifest")?;
    let (manifest, data) = data::read_synthetic(&dir)?;
    if manifest.spec != ctx.config.data {
        return Err(Error::InvalidArgument(format!(
            "corpus in {} was generated from a different data spec than the config",
            dir.display()
        )));
    }
    Ok(data)
}

fn load_model(path: &Path, what: &str) -> Result<TransducerModel> {
    require(path, what)?;
    read_checkpoint(path)
}

fn load_pseudo(path: &Path) -> Result<Vec<PseudoLabelRecord>> {
    require(path, "pseudo-label file")?;
    read_pseudo_labels(path)
}

fn write_log(path: &Path, log: &[StepLog]) -> Result<()> {
    jsonl::write_lines(path, log)
}

fn final_loss(log: &[StepLog]) -> Option<f64> {
    log.last().map(|l| l.loss)
}

#[derive(Serialize)]
struct TeacherSummary<'a> {
    teacher_id: String,
    training_utterances: usize,
    corruption: &'a data::CorruptionStats,
    steps: usize,
    final_loss: Option<f64>,
}

#[derive(Serialize)]
struct StudentSummary<'a> {
    distill_kind: String,
    shift: usize,
    steps: usize,
    final_loss: Option<f64>,
    skipped: &'a [String],
}

fn gen_data(ctx: &Context, out: &Option<PathBuf>) -> Result<()> {
    let dir = ctx.path(out, DATA_DIR);
    let generated = data::generate(&ctx.config.data)?;
    ctx.prepare()?;
    data::write_synthetic(&dir, &ctx.config.data, &generated)?;
    eprintln!(
        "wrote {} supervised, {} unlabeled, {} held-out utterances to {}",
        generated.supervised.len(),
        generated.unsupervised.len(),
        generated.heldout.len(),
        dir.display()
    );
    Ok(())
}

fn train_teacher(ctx: &Context, data: &Option<PathBuf>, out: &Option<PathBuf>) -> Result<()> {
    let corpus = load_data(ctx, data)?;
    let ckpt = ctx.path(out, TEACHER_CKPT);
    ctx.prepare()?;
    create_parent(&ckpt)?;
    let trained = experiment::train_teacher(&ctx.config, &corpus)?;
    write_checkpoint(&trained.model, &ckpt)?;
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    write_log(&dir.join(TEACHER_LOG), &trained.log)?;
    jsonl::write_json(
        &dir.join(TEACHER_SUMMARY),
        &TeacherSummary {
            teacher_id: ctx.config.teacher.id(),
            training_utterances: trained.training_utterances,
            corruption: &trained.corruption,
            steps: trained.log.len(),
            final_loss: final_loss(&trained.log),
        },
    )?;
    eprintln!(
        "teacher {} trained on {} utterances ({:.1}% labels corrupted), wrote {}",
        ctx.config.teacher.id(),
        trained.training_utterances,
        100.0 * trained.corruption.fraction(),
        ckpt.display()
    );
    Ok(())
}

fn pseudo_label(
    ctx: &Context,
    data: &Option<PathBuf>,
    teacher: &Option<PathBuf>,
    beam: Option<usize>,
    nbest: Option<usize>,
    out: &Option<PathBuf>,
) -> Result<()> {
    let beam = beam.unwrap_or(ctx.config.decode.beam);
    let nbest = nbest.unwrap_or(ctx.config.distill.nbest_size);
    // FS-Norm needs lists; a shorter one than configured is a config error.
    let mut check = ctx.config.clone();
    check.decode.beam = beam;
    check.distill.nbest_size = nbest;
    check.validate()?;
    let corpus = load_data(ctx, data)?;
    let model = load_model(&ctx.input(teacher, TEACHER_CKPT), "teacher checkpoint")?;
    let path = ctx.path(out, PSEUDO_FILE);
    ctx.prepare()?;
    create_parent(&path)?;
    let records = experiment::pseudo_label_corpus(&model, &corpus.unsupervised, beam, nbest)?;
    write_pseudo_labels(&path, &records)?;
    let failed = records
        .iter()
        .filter(|r| matches!(r, PseudoLabelRecord::Failed(_)))
        .count();
    eprintln!(
        "pseudo labeled {} utterances ({failed} failed), wrote {}",
        records.len(),
        path.display()
    );
    Ok(())
}

fn distill(
    ctx: &Context,
    data: &Option<PathBuf>,
    teacher: &Option<PathBuf>,
    pseudo: &Option<PathBuf>,
    init: &Option<PathBuf>,
    out: &Option<PathBuf>,
) -> Result<()> {
    let corpus = load_data(ctx, data)?;
    let teacher = load_model(&ctx.input(teacher, TEACHER_CKPT), "teacher checkpoint")?;
    let records = load_pseudo(&ctx.input(pseudo, PSEUDO_FILE))?;
    let init_path = init
        .clone()
        .or_else(|| ctx.config.student.init_checkpoint.clone());
    let init = match &init_path {
        Some(p) => Some(load_model(p, "init checkpoint")?),
        None => None,
    };
    if let Some(m) = &init {
        if *m.config() != ctx.config.student_model()? {
            return Err(Error::InvalidArgument(
                "init checkpoint architecture differs from the configured student".into(),
            ));
        }
    }
    experiment::check_pair(
        &ctx.config.distill,
        &teacher,
        init.as_ref().unwrap_or(&TransducerModel::zeros(ctx.config.student_model()?)?),
    )?;
    let ckpt = ctx.path(out, STUDENT_CKPT);
    ctx.prepare()?;
    create_parent(&ckpt)?;
    let student = experiment::distill_student(&ctx.config, &teacher, &corpus, &records, init)?;
    write_checkpoint(&student.model, &ckpt)?;
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    write_log(&dir.join(STUDENT_LOG), &student.log)?;
    jsonl::write_json(
        &dir.join(STUDENT_SUMMARY),
        &StudentSummary {
            distill_kind: ctx.config.distill.kind.to_string(),
            shift: ctx.config.distill.shift,
            steps: student.log.len(),
            final_loss: final_loss(&student.log),
            skipped: &student.skipped,
        },
    )?;
    eprintln!(
        "{} student trained, {} unlabeled utterances skipped, wrote {}",
        ctx.config.distill.kind,
        student.skipped.len(),
        ckpt.display()
    );
    Ok(())
}

fn run_evaluate(
    ctx: &Context,
    data: &Option<PathBuf>,
    checkpoint: &Option<PathBuf>,
    sets: &[String],
    out: &Option<PathBuf>,
) -> Result<()> {
    if sets.is_empty() {
        return Err(Error::InvalidArgument("--sets must name at least one split".into()));
    }
    for s in sets {
        if s != "heldout" && s != "unsupervised" {
            return Err(Error::InvalidArgument(format!(
                "unknown split {s:?}; expected heldout or unsupervised"
            )));
        }
    }
    let corpus = load_data(ctx, data)?;
    let ckpt = ctx.input(checkpoint, STUDENT_CKPT);
    let model = load_model(&ckpt, "checkpoint")?;
    let decoder = ctx.config.decode.eval;
    let reports = sets
        .iter()
        .map(|s| match s.as_str() {
            "heldout" => evaluate(&model, s, &corpus.heldout, None, &decoder),
            _ => evaluate(&model, s, &corpus.unsupervised, Some(&corpus.hidden), &decoder),
        })
        .collect::<Result<Vec<_>>>()?;
    let c = &ctx.config;
    let metadata = ReportMetadata {
        checkpoint: Some(ckpt.display().to_string()),
        teacher_id: Some(c.teacher.id()),
        distill_kind: Some(c.distill.kind.to_string()),
        shift: Some(c.distill.shift),
        seeds: [
            ("data", c.data.seed),
            ("teacher_init", c.teacher.init_seed),
            ("teacher_corruption", c.teacher.corruption_seed),
            ("teacher_batch", c.teacher.batch_seed),
            ("student_init", c.student.init_seed),
            ("student_batch", c.student.batch_seed),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect(),
    };
    let report = EvalReport::new(metadata, decoder, reports, sets.len() > 1);
    let path = ctx.path(out, EVAL_FILE);
    ctx.prepare()?;
    create_parent(&path)?;
    report.write(&path)?;
    for s in &report.sets {
        eprintln!(
            "{}: WER {:.4} (S {} D {} I {} / {})",
            s.name,
            s.pooled.wer,
            s.pooled.substitutions,
            s.pooled.deletions,
            s.pooled.insertions,
            s.pooled.reference_length
        );
    }
    if let Some(m) = report.macro_wer {
        eprintln!("macro WER {m:.4}");
    }
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn sweep_shift(
    ctx: &Context,
    data: &Option<PathBuf>,
    teacher: &Option<PathBuf>,
    pseudo: &Option<PathBuf>,
    shifts: &Option<Vec<usize>>,
    out: &Option<PathBuf>,
) -> Result<()> {
    let mut config = ctx.config.clone();
    if let Some(s) = shifts {
        config.sweep.shifts = s.clone();
    }
    config.validate()?;
    if !config.distill.kind.is_soft() {
        return Err(Error::Config(format!(
            "sweep-shift needs a soft distillation kind, got {}",
            config.distill.kind
        )));
    }
    let corpus = load_data(ctx, data)?;
    let teacher = load_model(&ctx.input(teacher, TEACHER_CKPT), "teacher checkpoint")?;
    let records = load_pseudo(&ctx.input(pseudo, PSEUDO_FILE))?;
    let dir = out.clone().unwrap_or_else(|| ctx.run_dir.clone());
    ctx.prepare()?;
    create_dir(&dir)?;
    let rows = experiment::sweep_shift(&config, &teacher, &corpus, &records)?;
    let table = experiment::sweep_table(&rows);
    let path = dir.join(SWEEP_TABLE);
    std::fs::write(&path, &table).map_err(|e| io_error(&path, e))?;
    jsonl::write_lines(&dir.join(SWEEP_DATA), &rows)?;
    eprint!("{table}");
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { common, out } => gen_data(&Context::load(common)?, out),
        Command::TrainTeacher { common, data, out } => {
            train_teacher(&Context::load(common)?, data, out)
        }
        Command::PseudoLabel {
            common,
            data,
            teacher,
            beam,
            nbest,
            out,
        } => pseudo_label(&Context::load(common)?, data, teacher, *beam, *nbest, out),
        Command::Distill {
            common,
            data,
            teacher,
            pseudo,
            init,
            out,
        } => distill(&Context::load(common)?, data, teacher, pseudo, init, out),
        Command::Evaluate {
            common,
            data,
            checkpoint,
            sets,
            out,
        } => run_evaluate(&Context::load(common)?, data, checkpoint, sets, out),
        Command::SweepShift {
            common,
            data,
            teacher,
            pseudo,
            shifts,
            out,
        } => sweep_shift(&Context::load(common)?, data, teacher, pseudo, shifts, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
