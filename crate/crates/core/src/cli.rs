//! Command-line front end: argument parsing, the JSON run configuration and
//! one function per subcommand. The `dewave` binary is a thin wrapper around
//! [`main_with_args`].

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::codex::{write_codebook_dump, Codebook};
use crate::corpus::{load_dataset, save_dataset, synth_corpus, Sample, Split, SynthConfig, Vocab};
use crate::error::{Error, Result};
use crate::featurizer::{default_bands, featurize_all, write_feature_matrix};
use crate::metrics::{evaluate_model, predict};
use crate::model::{Mode, Model, ModelConfig};
use crate::trainer::{
    fresh_model, prepare, pretrain_stage0, train_stage1, train_stage2, TrainConfig, TrainReport,
};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "DEWAVE_THREADS";

/// One JSON file describes a whole run. Relative paths resolve against the
/// directory holding the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Dataset directory.
    pub data: Option<PathBuf>,
    /// Checkpoint written by the training commands.
    pub checkpoint: Option<PathBuf>,
    /// Line-delimited JSON training report.
    pub report: Option<PathBuf>,
    /// Restrict training samples to these subjects (empty: all).
    pub train_subjects: Vec<String>,
    /// Restrict evaluation samples to these subjects (empty: all).
    pub test_subjects: Vec<String>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; unreadable or malformed files are configuration errors.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data, &mut cfg.checkpoint, &mut cfg.report]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    fn data_dir(&self) -> Result<&Path> {
        let dir = self
            .data
            .as_deref()
            .ok_or_else(|| Error::Config("`data` (dataset directory) is required".into()))?;
        require_dir(dir, "data")?;
        Ok(dir)
    }

    fn checkpoint_path(&self, out: Option<&Path>) -> Result<PathBuf> {
        let p = out
            .map(Path::to_path_buf)
            .or_else(|| self.checkpoint.clone())
            .ok_or_else(|| Error::Config("`checkpoint` (output path) is required".into()))?;
        require_parent(&p, "checkpoint")?;
        Ok(p)
    }
}

fn require_dir(dir: &Path, key: &str) -> Result<()> {
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "`{key}`: {} is not a directory",
            dir.display()
        )));
    }
    Ok(())
}

fn require_parent(path: &Path, key: &str) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(Error::Config(format!(
            "`{key}`: directory {} does not exist",
            p.display()
        ))),
        _ => Ok(()),
    }
}

fn require_file(path: &Path, key: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Config(format!(
            "`{key}`: {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

#[derive(Debug, Parser)]
#[command(
    name = "dewave",
    version,
    about = "EEG-to-text translation with a discrete codex"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic reading corpus.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export word-level band-power features as a float32 matrix.
    Featurize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised stage-0 pretraining (raw-wave mode).
    Pretrain(TrainArgs),
    /// Stage-1 codex training, from scratch or from a pretrained checkpoint.
    Train(TrainArgs),
    /// Stage-2 fine-tuning of a stage-1 checkpoint.
    Finetune(TrainArgs),
    /// Write one predicted sentence per line.
    Translate {
        #[command(flatten)]
        eval: EvalArgs,
        /// Output file (standard output when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions with BLEU-1..4 and ROUGE-1.
    Evaluate {
        #[command(flatten)]
        eval: EvalArgs,
        /// Write the JSON result here (standard output when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the codebook of a checkpoint as a binary dump.
    DumpCodebook {
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Starting checkpoint.
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Checkpoint output, overriding `checkpoint` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub from: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// train, dev, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Score argmax predictions given gold prefixes instead of greedy decoding.
    #[arg(long)]
    pub teacher_forced: bool,
    /// Run config supplying padding/word limits and `test_subjects`.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn select(samples: Vec<Sample>, split: Option<Split>, subjects: &[String]) -> Vec<Sample> {
    samples
        .into_iter()
        .filter(|s| split.is_none_or(|sp| s.split == sp))
        .filter(|s| subjects.is_empty() || subjects.contains(&s.recording.subject))
        .collect()
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    if s == "all" {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

fn vocab_of(samples: &[Sample]) -> Vocab {
    Vocab::build(samples.iter().map(|s| s.words.as_slice()))
}

fn load_from(from: Option<&Path>, cmd: &str) -> Result<Model> {
    let path = from.ok_or_else(|| Error::State(format!("`{cmd}` needs a checkpoint (--from)")))?;
    if !path.is_file() {
        return Err(Error::State(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    Model::load(path)
}

fn write_outputs(model: &Model, report: &TrainReport, ckpt: &Path, cfg: &RunConfig) -> Result<()> {
    model.save(ckpt)?;
    if let Some(r) = &cfg.report {
        report.write_jsonl(r)?;
    }
    Ok(())
}

struct TrainSetup {
    cfg: RunConfig,
    ckpt: PathBuf,
    vocab: Vocab,
    train: Vec<Sample>,
}

fn train_setup(args: &TrainArgs) -> Result<TrainSetup> {
    let cfg = RunConfig::load(&args.config)?;
    let data = cfg.data_dir()?.to_path_buf();
    let ckpt = cfg.checkpoint_path(args.out.as_deref())?;
    if let Some(r) = &cfg.report {
        require_parent(r, "report")?;
    }
    if let Some(f) = &args.from {
        require_file(f, "--from")?;
    }
    let all = load_dataset(&data)?;
    let vocab = vocab_of(&all);
    let train = select(all, Some(Split::Train), &cfg.train_subjects);
    if train.is_empty() {
        return Err(Error::Input(format!(
            "no training samples in {} for the configured subjects",
            data.display()
        )));
    }
    Ok(TrainSetup {
        cfg,
        ckpt,
        vocab,
        train,
    })
}

fn checked_vocab(model: &Model, vocab: &Vocab) -> Result<()> {
    if model.vocab != *vocab {
        return Err(Error::State(
            "checkpoint vocabulary differs from the dataset vocabulary".into(),
        ));
    }
    Ok(())
}

pub fn cmd_synth(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let samples = synth_corpus(&cfg.synth, cfg.train.seed)?;
    save_dataset(&samples, out)?;
    eprintln!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

/// Writes the feature matrix and a `<out>.rows.tsv` index naming the sample,
/// word position and word of every row.
pub fn cmd_featurize(data: &Path, out: &Path) -> Result<()> {
    require_dir(data, "--data")?;
    require_parent(out, "--out")?;
    let samples = load_dataset(data)?;
    let per_sample = featurize_all(&samples, &default_bands())?;
    let cols = per_sample
        .iter()
        .flatten()
        .map(|f| f.values.len())
        .next()
        .unwrap_or(0);
    let mut values = Vec::new();
    let mut index = String::from("row\tsample\tword_index\tword\n");
    let mut rows = 0;
    for (s, feats) in samples.iter().zip(&per_sample) {
        for f in feats {
            if f.values.len() != cols {
                return Err(Error::Data(format!(
                    "sample `{}` has {} features per word, expected {cols}",
                    s.id,
                    f.values.len()
                )));
            }
            values.extend_from_slice(&f.values);
            index.push_str(&format!(
                "{rows}\t{}\t{}\t{}\n",
                s.id, f.word_index, s.words[f.word_index]
            ));
            rows += 1;
        }
    }
    write_feature_matrix(out, rows, cols, &values)?;
    let mut idx_path = out.as_os_str().to_owned();
    idx_path.push(".rows.tsv");
    fs::write(&idx_path, index).map_err(|e| Error::io(PathBuf::from(&idx_path), e))?;
    eprintln!("wrote {rows}x{cols} feature matrix to {}", out.display());
    Ok(())
}

pub fn cmd_pretrain(args: &TrainArgs) -> Result<()> {
    let s = train_setup(args)?;
    if s.cfg.train.mode == Mode::WordLevel && !s.cfg.train.word_recon_pretrain {
        return Err(Error::State(
            "`pretrain` needs raw-wave mode (or train.word_recon_pretrain)".into(),
        ));
    }
    let data = prepare(&s.train, &s.vocab, s.cfg.train.mode, &s.cfg.train)?;
    let (mut model, mut report) = match &args.from {
        Some(f) => {
            let m = Model::load(f)?;
            checked_vocab(&m, &s.vocab)?;
            (m, TrainReport::default())
        }
        None => fresh_model(&s.cfg.model, s.vocab.clone(), &data, &s.cfg.train)?,
    };
    report.extend(pretrain_stage0(&mut model, &data, &s.cfg.train)?);
    write_outputs(&model, &report, &s.ckpt, &s.cfg)?;
    eprintln!(
        "stage-0 checkpoint {} ({:.1}s)",
        s.ckpt.display(),
        report.wall_seconds
    );
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let s = train_setup(args)?;
    let data = prepare(&s.train, &s.vocab, s.cfg.train.mode, &s.cfg.train)?;
    let (mut model, mut report) = match &args.from {
        Some(f) => {
            let m = Model::load(f)?;
            checked_vocab(&m, &s.vocab)?;
            (m, TrainReport::default())
        }
        None => fresh_model(&s.cfg.model, s.vocab.clone(), &data, &s.cfg.train)?,
    };
    report.extend(train_stage1(&mut model, &data, &s.cfg.train)?);
    write_outputs(&model, &report, &s.ckpt, &s.cfg)?;
    eprintln!(
        "stage-1 checkpoint {} ({:.1}s)",
        s.ckpt.display(),
        report.wall_seconds
    );
    Ok(())
}

pub fn cmd_finetune(args: &TrainArgs) -> Result<()> {
    let mut model = load_from(args.from.as_deref(), "finetune")?;
    let s = train_setup(args)?;
    checked_vocab(&model, &s.vocab)?;
    let data = prepare(&s.train, &s.vocab, s.cfg.train.mode, &s.cfg.train)?;
    let report = train_stage2(Some(&mut model), &data, &s.cfg.train)?;
    write_outputs(&model, &report, &s.ckpt, &s.cfg)?;
    eprintln!(
        "stage-2 checkpoint {} ({:.1}s)",
        s.ckpt.display(),
        report.wall_seconds
    );
    Ok(())
}

struct EvalSetup {
    model: Model,
    data: Vec<crate::trainer::Prepared>,
}

fn eval_setup(args: &EvalArgs, cmd: &str) -> Result<EvalSetup> {
    let split = parse_split(&args.split)?;
    let cfg = match &args.config {
        Some(c) => RunConfig::load(c)?,
        None => RunConfig::default(),
    };
    require_dir(&args.data, "--data")?;
    let model = load_from(args.from.as_deref(), cmd)?;
    let tcfg = TrainConfig {
        mode: model.mode(),
        ..cfg.train.clone()
    };
    if args.config.is_some() && cfg.train.mode != model.mode() {
        return Err(Error::State(format!(
            "checkpoint is {}, config asks for {}",
            model.mode(),
            cfg.train.mode
        )));
    }
    let samples = select(load_dataset(&args.data)?, split, &cfg.test_subjects);
    if samples.is_empty() {
        return Err(Error::Input(format!(
            "no `{}` samples in {}",
            args.split,
            args.data.display()
        )));
    }
    let data = prepare(&samples, &model.vocab, model.mode(), &tcfg)?;
    Ok(EvalSetup { model, data })
}

pub fn cmd_translate(args: &EvalArgs, out: Option<&Path>) -> Result<()> {
    if let Some(o) = out {
        require_parent(o, "--out")?;
    }
    let s = eval_setup(args, "translate")?;
    let preds = predict(&s.model, &s.data, args.teacher_forced)?;
    let text: String = preds.iter().map(|w| w.join(" ") + "\n").collect();
    match out {
        Some(o) => fs::write(o, text).map_err(|e| Error::io(o, e))?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn cmd_evaluate(args: &EvalArgs, out: Option<&Path>) -> Result<()> {
    if let Some(o) = out {
        require_parent(o, "--out")?;
    }
    let s = eval_setup(args, "evaluate")?;
    let result = evaluate_model(&s.model, &s.data, args.teacher_forced)?;
    match out {
        Some(o) => fs::write(o, result.to_json()).map_err(|e| Error::io(o, e))?,
        None => print!("{}", result.to_json()),
    }
    print!("{}", result.table());
    Ok(())
}

pub fn cmd_dump_codebook(from: Option<&Path>, out: &Path) -> Result<()> {
    require_parent(out, "--out")?;
    let model = load_from(from, "dump-codebook")?;
    let cb = Codebook::from_params(&model.params)?;
    write_codebook_dump(out, &cb)?;
    eprintln!("wrote {}x{} codebook to {}", cb.k, cb.m, out.display());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { config, out } => cmd_synth(config, out),
        Command::Featurize { data, out } => cmd_featurize(data, out),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Translate { eval, out } => cmd_translate(eval, out.as_deref()),
        Command::Evaluate { eval, out } => cmd_evaluate(eval, out.as_deref()),
        Command::DumpCodebook { from, out } => cmd_dump_codebook(from.as_deref(), out),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::Config(format!(
            "{THREADS_ENV} must be a positive integer, got `{v}`"
        ))
    })?;
    // a pool may already exist when embedded; the cap is best effort then
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
/// Errors are reported on standard error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let start = Instant::now();
    let result = configure_threads().and_then(|_| run(&cli));
    match result {
        Ok(()) => {
            eprintln!("done in {:.2}s", start.elapsed().as_secs_f64());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_rejects_unknown_keys_by_name() {
        let err = RunConfig::from_json(r#"{"train": {"mode": "raw-wave"}, "checkpont": "x"}"#)
            .unwrap_err();
        assert!(
            matches!(err, Error::Config(ref m) if m.contains("checkpont")),
            "{err}"
        );
        let err = RunConfig::from_json(r#"{"train": {"lr_stage9": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("lr_stage9"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn run_config_validates_sections() {
        assert!(matches!(
            RunConfig::from_json(r#"{"train": {"tau": 0}}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_json(r#"{"model": {"dim": 10, "heads": 3}}"#),
            Err(Error::Config(_))
        ));
        let cfg =
            RunConfig::from_json(r#"{"train": {"mode": "word-level"}, "train_subjects": ["S01"]}"#)
                .unwrap();
        assert_eq!(cfg.train.mode, Mode::WordLevel);
        assert_eq!(cfg.train_subjects, vec!["S01".to_string()]);
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        fs::write(&p, r#"{"data": "ds", "checkpoint": "/abs/ckpt"}"#).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.data.unwrap(), dir.path().join("ds"));
        assert_eq!(cfg.checkpoint.unwrap(), PathBuf::from("/abs/ckpt"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(
            main_with_args(["dewave", "finetune", "--config", "/nonexistent.json"]),
            4
        );
        assert_eq!(
            main_with_args(["dewave", "train", "--config", "/nonexistent.json"]),
            2
        );
        assert_eq!(main_with_args(["dewave", "frobnicate"]), 2);
        assert_eq!(
            main_with_args(["dewave", "dump-codebook", "--out", "x.bin"]),
            4
        );
    }

    #[test]
    fn split_selection() {
        assert_eq!(parse_split("all").unwrap(), None);
        assert_eq!(parse_split("dev").unwrap(), Some(Split::Dev));
        assert!(matches!(parse_split("val"), Err(Error::Config(_))));
    }
}
