//! Command-line front end: training (sentence / document / joint),
//! translation, BLEU scoring, synthetic-corpus generation, and the
//! ablation grid. Every configuration key can live in a key=value file
//! and is mirrored by a flag of the same name (dashes for underscores);
//! flags override file values.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::corpus::{
    self, doc_examples, sentence_examples, RawDocument, TrainingExample, Vocabulary,
};
use crate::decoding::{translate_document, DecodeConfig};
use crate::error::{Error, Result};
use crate::evaluation::{bleu, reference_lines, SyntheticDocTask};
use crate::model::{DocTransformer, ModelConfig};
use crate::params::Partition;
use crate::scalar::Scalar;
use crate::training::{
    direct_joint_train, eval_loss, train_step_one, train_step_two, TrainPlan, TrainSummary,
};

#[derive(Parser, Debug)]
#[command(
    name = "docnmt",
    about = "Document-context transformer translation toolkit",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit sentence-level weights on sentence pairs (step one).
    TrainSentence(TrainArgs),
    /// Fit document-level weights with frozen sentence weights (step two).
    TrainDocument(TrainArgs),
    /// Fit all weights jointly on document data (the ablation arm).
    TrainJoint(TrainArgs),
    /// Translate a document corpus with beam search.
    Translate(TranslateArgs),
    /// Corpus-level BLEU of a candidate file against a reference file.
    Bleu(BleuArgs),
    /// Generate a synthetic context-disambiguation corpus.
    SynthGen(SynthArgs),
    /// Run a configuration grid and emit a comma-separated results table.
    Ablate(AblateArgs),
}

/// Keys shared by every command; each has a config-file equivalent.
#[derive(Args, Debug, Clone, Default)]
pub struct SettingsArgs {
    /// key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset: "desk" (default) or "paper".
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub filter: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub enc_layers: Option<usize>,
    #[arg(long)]
    pub dec_layers: Option<usize>,
    #[arg(long)]
    pub ctx_layers: Option<usize>,
    #[arg(long)]
    pub context_window: Option<usize>,
    /// none | encoder | decoder | both
    #[arg(long)]
    pub integration: Option<String>,
    /// on | off
    #[arg(long)]
    pub gating: Option<String>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub token_budget: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub log_interval: Option<usize>,
    #[arg(long)]
    pub lr_scale: Option<f64>,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// f32 | f64
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Decoding length cap; 0 means 2·source_len + 10.
    #[arg(long)]
    pub max_length: Option<usize>,
    /// Evaluate dev loss every N steps and keep the best weights; 0 keeps
    /// the final weights.
    #[arg(long)]
    pub dev_eval_interval: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub settings: SettingsArgs,
    /// Source-side training corpus.
    #[arg(long)]
    pub source: PathBuf,
    /// Target-side training corpus.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub dev_source: Option<PathBuf>,
    #[arg(long)]
    pub dev_target: Option<PathBuf>,
    /// Step-one checkpoint (required by train-document).
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics log (step,loss,lr,tokens_per_sec per line).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    #[command(flatten)]
    pub settings: SettingsArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Source corpus to translate.
    #[arg(long)]
    pub source: PathBuf,
    /// Output file, corpus format (blank line between documents).
    #[arg(long)]
    pub output: PathBuf,
    /// Override the vocabulary files saved beside the checkpoint.
    #[arg(long)]
    pub src_vocab: Option<PathBuf>,
    #[arg(long)]
    pub tgt_vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BleuArgs {
    #[arg(long)]
    pub candidate: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub settings: SettingsArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub documents: usize,
    #[arg(long, default_value_t = 50)]
    pub dev_documents: usize,
    #[arg(long, default_value_t = 50)]
    pub test_documents: usize,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub settings: SettingsArgs,
    /// Generate the corpus from this synthetic-task seed…
    #[arg(long)]
    pub synth_seed: Option<u64>,
    #[arg(long, default_value_t = 120)]
    pub documents: usize,
    #[arg(long, default_value_t = 30)]
    pub dev_documents: usize,
    /// …or score a user corpus instead.
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long)]
    pub dev_source: Option<PathBuf>,
    #[arg(long)]
    pub dev_target: Option<PathBuf>,
    /// Comma-separated grids.
    #[arg(long, default_value = "2")]
    pub windows: String,
    #[arg(long, default_value = "1")]
    pub ctx_layer_grid: String,
    #[arg(long, default_value = "none,encoder,decoder,both")]
    pub integrations: String,
    #[arg(long, default_value = "on")]
    pub gating_grid: String,
    /// Steps for the shared sentence stage and each document stage.
    #[arg(long, default_value_t = 300)]
    pub steps_one: usize,
    #[arg(long, default_value_t = 300)]
    pub steps_two: usize,
    /// Results table; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integration {
    None,
    Encoder,
    Decoder,
    Both,
}

impl Integration {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Integration::None),
            "encoder" => Ok(Integration::Encoder),
            "decoder" => Ok(Integration::Decoder),
            "both" => Ok(Integration::Both),
            other => Err(Error::Config(format!(
                "integration must be none|encoder|decoder|both, got {other:?}"
            ))),
        }
    }

    pub fn flags(self) -> (bool, bool) {
        match self {
            Integration::None => (false, false),
            Integration::Encoder => (true, false),
            Integration::Decoder => (false, true),
            Integration::Both => (true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Integration::None => "none",
            Integration::Encoder => "encoder",
            Integration::Decoder => "decoder",
            Integration::Both => "both",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Fully resolved configuration: profile defaults, then file values, then
/// flag overrides.
#[derive(Debug, Clone)]
pub struct Settings {
    pub seed: u64,
    pub hidden: usize,
    pub filter: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ctx_layers: usize,
    pub context_window: usize,
    pub integration: Integration,
    pub gating: bool,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_steps: usize,
    pub token_budget: usize,
    pub warmup: usize,
    pub log_interval: usize,
    pub lr_scale: f64,
    pub clip_norm: f64,
    pub precision: Precision,
    pub beam: usize,
    pub alpha: f64,
    pub max_length: usize,
    pub dev_eval_interval: usize,
}

impl Settings {
    fn desk() -> Self {
        Settings {
            seed: 1,
            hidden: 64,
            filter: 256,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ctx_layers: 1,
            context_window: 2,
            integration: Integration::Both,
            gating: true,
            dropout: 0.1,
            vocab_size: 4000,
            max_steps: 400,
            token_budget: 1500,
            warmup: 100,
            log_interval: 50,
            lr_scale: 1.0,
            clip_norm: 5.0,
            precision: Precision::F32,
            beam: 4,
            alpha: 0.6,
            max_length: 0,
            dev_eval_interval: 0,
        }
    }

    fn paper() -> Self {
        Settings {
            hidden: 512,
            filter: 2048,
            heads: 8,
            enc_layers: 6,
            dec_layers: 6,
            vocab_size: 32000,
            max_steps: 100_000,
            token_budget: 24_000,
            warmup: 4000,
            ..Settings::desk()
        }
    }

    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        let (integrate_encoder, integrate_decoder) = self.integration.flags();
        ModelConfig {
            hidden: self.hidden,
            filter: self.filter,
            heads: self.heads,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            ctx_layers: self.ctx_layers,
            context_window: self.context_window,
            integrate_encoder,
            integrate_decoder,
            gating: self.gating,
            dropout: self.dropout,
            src_vocab,
            tgt_vocab,
        }
    }

    pub fn train_plan(&self) -> TrainPlan {
        TrainPlan {
            max_steps: self.max_steps,
            token_budget: self.token_budget,
            warmup: self.warmup,
            seed: self.seed,
            log_interval: self.log_interval,
            dropout: None,
            lr_scale: self.lr_scale,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            dev_eval_interval: (self.dev_eval_interval > 0).then_some(self.dev_eval_interval),
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.beam,
            alpha: self.alpha,
            max_length: (self.max_length > 0).then_some(self.max_length),
        }
    }
}

fn parse_bool_switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(Error::Config(format!(
            "{key} must be on|off, got {other:?}"
        ))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))
}

/// Parse a key=value file. '#' starts a comment; dashes in keys normalize
/// to underscores.
pub fn read_config_file(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut out = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{} line {}: expected key=value, got {raw:?}",
                path.display(),
                i + 1
            )));
        };
        out.insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(out)
}

pub fn resolve_settings(args: &SettingsArgs) -> Result<Settings> {
    let file = match &args.config {
        Some(p) => read_config_file(p)?,
        None => HashMap::new(),
    };
    let profile = args
        .profile
        .clone()
        .or_else(|| file.get("profile").cloned())
        .unwrap_or_else(|| "desk".to_string());
    let mut s = match profile.as_str() {
        "desk" => Settings::desk(),
        "paper" => Settings::paper(),
        other => {
            return Err(Error::Config(format!(
                "unknown profile {other:?} (expected desk or paper)"
            )))
        }
    };
    for (k, v) in &file {
        match k.as_str() {
            "profile" => {}
            "seed" => s.seed = parse_num(k, v)?,
            "hidden" => s.hidden = parse_num(k, v)?,
            "filter" => s.filter = parse_num(k, v)?,
            "heads" => s.heads = parse_num(k, v)?,
            "enc_layers" => s.enc_layers = parse_num(k, v)?,
            "dec_layers" => s.dec_layers = parse_num(k, v)?,
            "ctx_layers" => s.ctx_layers = parse_num(k, v)?,
            "context_window" => s.context_window = parse_num(k, v)?,
            "integration" => s.integration = Integration::parse(v)?,
            "gating" => s.gating = parse_bool_switch(k, v)?,
            "dropout" => s.dropout = parse_num(k, v)?,
            "vocab_size" => s.vocab_size = parse_num(k, v)?,
            "max_steps" => s.max_steps = parse_num(k, v)?,
            "token_budget" => s.token_budget = parse_num(k, v)?,
            "warmup" => s.warmup = parse_num(k, v)?,
            "log_interval" => s.log_interval = parse_num(k, v)?,
            "lr_scale" => s.lr_scale = parse_num(k, v)?,
            "clip_norm" => s.clip_norm = parse_num(k, v)?,
            "precision" => {
                s.precision = match v.as_str() {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    other => {
                        return Err(Error::Config(format!(
                            "precision must be f32|f64, got {other:?}"
                        )))
                    }
                }
            }
            "beam" => s.beam = parse_num(k, v)?,
            "alpha" => s.alpha = parse_num(k, v)?,
            "max_length" => s.max_length = parse_num(k, v)?,
            "dev_eval_interval" => s.dev_eval_interval = parse_num(k, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration key {other:?}"
                )))
            }
        }
    }
    if let Some(v) = args.seed {
        s.seed = v;
    }
    if let Some(v) = args.hidden {
        s.hidden = v;
    }
    if let Some(v) = args.filter {
        s.filter = v;
    }
    if let Some(v) = args.heads {
        s.heads = v;
    }
    if let Some(v) = args.enc_layers {
        s.enc_layers = v;
    }
    if let Some(v) = args.dec_layers {
        s.dec_layers = v;
    }
    if let Some(v) = args.ctx_layers {
        s.ctx_layers = v;
    }
    if let Some(v) = args.context_window {
        s.context_window = v;
    }
    if let Some(v) = &args.integration {
        s.integration = Integration::parse(v)?;
    }
    if let Some(v) = &args.gating {
        s.gating = parse_bool_switch("gating", v)?;
    }
    if let Some(v) = args.dropout {
        s.dropout = v;
    }
    if let Some(v) = args.vocab_size {
        s.vocab_size = v;
    }
    if let Some(v) = args.max_steps {
        s.max_steps = v;
    }
    if let Some(v) = args.token_budget {
        s.token_budget = v;
    }
    if let Some(v) = args.warmup {
        s.warmup = v;
    }
    if let Some(v) = args.log_interval {
        s.log_interval = v;
    }
    if let Some(v) = args.lr_scale {
        s.lr_scale = v;
    }
    if let Some(v) = args.clip_norm {
        s.clip_norm = v;
    }
    if let Some(v) = &args.precision {
        s.precision = match v.as_str() {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => {
                return Err(Error::Config(format!(
                    "precision must be f32|f64, got {other:?}"
                )))
            }
        };
    }
    if let Some(v) = args.beam {
        s.beam = v;
    }
    if let Some(v) = args.alpha {
        s.alpha = v;
    }
    if let Some(v) = args.max_length {
        s.max_length = v;
    }
    if let Some(v) = args.dev_eval_interval {
        s.dev_eval_interval = v;
    }
    Ok(s)
}

fn vocab_paths(checkpoint: &Path) -> (PathBuf, PathBuf) {
    let mut src = checkpoint.as_os_str().to_owned();
    src.push(".svocab");
    let mut tgt = checkpoint.as_os_str().to_owned();
    tgt.push(".tvocab");
    (PathBuf::from(src), PathBuf::from(tgt))
}

fn write_metrics(path: &Path, summary: &TrainSummary) -> Result<()> {
    let mut body = String::from("step,loss,lr,tokens_per_sec\n");
    for row in &summary.metrics {
        body.push_str(&row.csv());
        body.push('\n');
    }
    fs::write(path, body)?;
    Ok(())
}

fn load_training_corpus(
    source: &Path,
    target: &Path,
    vocab_size: usize,
) -> Result<(Vec<RawDocument>, Vocabulary, Vocabulary)> {
    let raw = corpus::load_raw_corpus(source, target)?;
    if raw.is_empty() {
        return Err(Error::Data(format!(
            "training corpus {} is empty",
            source.display()
        )));
    }
    let src_side: Vec<&[String]> = raw
        .iter()
        .flat_map(|d| d.sentences.iter().map(|(s, _)| s.as_slice()))
        .collect();
    let tgt_side: Vec<&[String]> = raw
        .iter()
        .flat_map(|d| d.sentences.iter().map(|(_, t)| t.as_slice()))
        .collect();
    let src_vocab = Vocabulary::build(src_side.iter().copied(), vocab_size)?;
    let tgt_vocab = Vocabulary::build(tgt_side.iter().copied(), vocab_size)?;
    Ok((raw, src_vocab, tgt_vocab))
}

fn dev_examples(
    args: &TrainArgs,
    settings: &Settings,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    sentence_level: bool,
) -> Result<Option<Vec<TrainingExample>>> {
    match (&args.dev_source, &args.dev_target) {
        (Some(s), Some(t)) => {
            let docs = corpus::load_document_corpus(s, t, src_vocab, tgt_vocab)?;
            let ex = if sentence_level {
                sentence_examples(&docs)
            } else {
                doc_examples(&docs, settings.context_window)?
            };
            Ok(Some(ex))
        }
        (None, None) => Ok(None),
        _ => Err(Error::Config(
            "--dev-source and --dev-target must be given together".into(),
        )),
    }
}

fn finish_train(
    args: &TrainArgs,
    summary: &TrainSummary,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<()> {
    let (sv, tv) = vocab_paths(&args.out);
    src_vocab.save(&sv)?;
    tgt_vocab.save(&tv)?;
    if let Some(m) = &args.metrics {
        write_metrics(m, summary)?;
    }
    println!(
        "trained {} steps, final loss {:.6}{}, {:.0} tokens/sec",
        summary.steps,
        summary.final_train_loss,
        match summary.dev_loss {
            Some(d) => format!(", dev loss {d:.6}"),
            None => String::new(),
        },
        summary.mean_tokens_per_sec()
    );
    Ok(())
}

fn run_train_sentence<F: Scalar>(args: &TrainArgs, settings: &Settings) -> Result<()> {
    let (raw, src_vocab, tgt_vocab) =
        load_training_corpus(&args.source, &args.target, settings.vocab_size)?;
    let docs = corpus::encode_corpus(&raw, &src_vocab, &tgt_vocab);
    let examples = sentence_examples(&docs);
    let dev = dev_examples(args, settings, &src_vocab, &tgt_vocab, true)?;
    // Step one trains the plain transformer: build without document modules.
    let cfg = settings
        .model_config(src_vocab.size(), tgt_vocab.size())
        .baseline();
    let mut model = DocTransformer::<F>::new(cfg, settings.seed)?;
    let summary = train_step_one(&mut model, &examples, dev.as_deref(), &settings.train_plan())?;
    checkpoint::save(&args.out, model.config(), model.store(), None)?;
    finish_train(args, &summary, &src_vocab, &tgt_vocab)
}

fn run_train_document<F: Scalar>(
    args: &TrainArgs,
    settings: &Settings,
    init: &checkpoint::Checkpoint,
) -> Result<()> {
    let init_path = args.init_checkpoint.as_ref().expect("checked by caller");
    let (sv_path, tv_path) = vocab_paths(init_path);
    let src_vocab = Vocabulary::load(&sv_path)?;
    let tgt_vocab = Vocabulary::load(&tv_path)?;
    let raw = corpus::load_raw_corpus(&args.source, &args.target)?;
    let docs = corpus::encode_corpus(&raw, &src_vocab, &tgt_vocab);
    let examples = doc_examples(&docs, settings.context_window)?;
    let dev = dev_examples(args, settings, &src_vocab, &tgt_vocab, false)?;

    // Dimensions come from the step-one checkpoint; document-module switches
    // come from the resolved settings.
    let (integrate_encoder, integrate_decoder) = settings.integration.flags();
    if !(integrate_encoder || integrate_decoder) {
        return Err(Error::Config(
            "train-document needs integration encoder|decoder|both".into(),
        ));
    }
    let cfg = ModelConfig {
        ctx_layers: settings.ctx_layers,
        context_window: settings.context_window,
        integrate_encoder,
        integrate_decoder,
        gating: settings.gating,
        dropout: settings.dropout,
        ..init.config.clone()
    };
    let mut model = DocTransformer::<F>::new(cfg, settings.seed)?;
    let missing = init.apply(&mut model)?;
    if let Some(name) = missing.iter().find(|n| {
        model
            .store()
            .lookup(n)
            .map(|id| model.store().partition(id) == Partition::Sentence)
            .unwrap_or(false)
    }) {
        return Err(Error::Data(format!(
            "step-one checkpoint does not cover sentence-level parameter {name}"
        )));
    }
    let summary = train_step_two(&mut model, &examples, dev.as_deref(), &settings.train_plan())?;
    checkpoint::save(&args.out, model.config(), model.store(), None)?;
    finish_train(args, &summary, &src_vocab, &tgt_vocab)
}

fn run_train_joint<F: Scalar>(args: &TrainArgs, settings: &Settings) -> Result<()> {
    let (raw, src_vocab, tgt_vocab) =
        load_training_corpus(&args.source, &args.target, settings.vocab_size)?;
    let docs = corpus::encode_corpus(&raw, &src_vocab, &tgt_vocab);
    let examples = doc_examples(&docs, settings.context_window)?;
    let dev = dev_examples(args, settings, &src_vocab, &tgt_vocab, false)?;
    let cfg = settings.model_config(src_vocab.size(), tgt_vocab.size());
    let mut model = DocTransformer::<F>::new(cfg, settings.seed)?;
    let summary = direct_joint_train(&mut model, &examples, dev.as_deref(), &settings.train_plan())?;
    checkpoint::save(&args.out, model.config(), model.store(), None)?;
    finish_train(args, &summary, &src_vocab, &tgt_vocab)
}

pub fn cmd_train(kind: &str, args: &TrainArgs) -> Result<()> {
    let settings = resolve_settings(&args.settings)?;
    match kind {
        "sentence" => match settings.precision {
            Precision::F32 => run_train_sentence::<f32>(args, &settings),
            Precision::F64 => run_train_sentence::<f64>(args, &settings),
        },
        "document" => {
            let Some(init_path) = &args.init_checkpoint else {
                return Err(Error::Config(
                    "train-document requires --init-checkpoint: the two-step procedure \
                     fits document-level weights against frozen sentence-level weights \
                     from a train-sentence run"
                        .into(),
                ));
            };
            let init = checkpoint::load(init_path)?;
            match init.dtype {
                4 => run_train_document::<f32>(args, &settings, &init),
                _ => run_train_document::<f64>(args, &settings, &init),
            }
        }
        "joint" => match settings.precision {
            Precision::F32 => run_train_joint::<f32>(args, &settings),
            Precision::F64 => run_train_joint::<f64>(args, &settings),
        },
        other => Err(Error::Config(format!("unknown train kind {other}"))),
    }
}

fn decode_corpus<F: Scalar>(
    model: &DocTransformer<F>,
    docs_tokens: &[Vec<Vec<String>>],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    window: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::with_capacity(docs_tokens.len());
    for doc in docs_tokens {
        let encoded: Vec<Vec<u32>> = doc.iter().map(|s| src_vocab.encode(s)).collect();
        let translated = translate_document(model, &encoded, window, cfg)?;
        let mut lines = Vec::with_capacity(translated.len());
        for ids in translated {
            lines.push(tgt_vocab.decode_sentence(&ids)?.join(" "));
        }
        out.push(lines);
    }
    Ok(out)
}

fn write_corpus_file(path: &Path, docs: &[Vec<String>]) -> Result<()> {
    let mut body = String::new();
    for (i, doc) in docs.iter().enumerate() {
        if i > 0 {
            body.push('\n');
        }
        for line in doc {
            body.push_str(line);
            body.push('\n');
        }
    }
    fs::write(path, body)?;
    Ok(())
}

fn run_translate<F: Scalar>(
    args: &TranslateArgs,
    settings: &Settings,
    ck: &checkpoint::Checkpoint,
) -> Result<()> {
    let (sv_default, tv_default) = vocab_paths(&args.checkpoint);
    let src_vocab = Vocabulary::load(args.src_vocab.as_ref().unwrap_or(&sv_default))?;
    let tgt_vocab = Vocabulary::load(args.tgt_vocab.as_ref().unwrap_or(&tv_default))?;
    let mut model = DocTransformer::<F>::new(ck.config.clone(), 0)?;
    let missing = ck.apply(&mut model)?;
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "checkpoint does not cover parameters: {}",
            missing.join(", ")
        )));
    }
    let docs = corpus::read_documents_text(&args.source)?;
    let window = args
        .settings
        .context_window
        .unwrap_or(ck.config.context_window);
    let out = decode_corpus(
        &model,
        &docs,
        &src_vocab,
        &tgt_vocab,
        window,
        &settings.decode_config(),
    )?;
    write_corpus_file(&args.output, &out)?;
    println!(
        "translated {} documents ({} sentences) to {}",
        out.len(),
        out.iter().map(|d| d.len()).sum::<usize>(),
        args.output.display()
    );
    Ok(())
}

pub fn cmd_translate(args: &TranslateArgs) -> Result<()> {
    let settings = resolve_settings(&args.settings)?;
    let ck = checkpoint::load(&args.checkpoint)?;
    match ck.dtype {
        4 => run_translate::<f32>(args, &settings, &ck),
        _ => run_translate::<f64>(args, &settings, &ck),
    }
}

pub fn cmd_bleu(args: &BleuArgs) -> Result<()> {
    let cand: Vec<String> = fs::read_to_string(&args.candidate)?
        .lines()
        .map(str::to_string)
        .collect();
    let reference: Vec<String> = fs::read_to_string(&args.reference)?
        .lines()
        .map(str::to_string)
        .collect();
    let report = bleu(&cand, &reference)?;
    println!("{report}");
    Ok(())
}

fn synth_task(seed: u64) -> SyntheticDocTask {
    SyntheticDocTask {
        seed,
        ..SyntheticDocTask::default()
    }
}

pub fn cmd_synth_gen(args: &SynthArgs) -> Result<()> {
    let settings = resolve_settings(&args.settings)?;
    let task = synth_task(settings.seed);
    let total = args.documents + args.dev_documents + args.test_documents;
    if total == 0 {
        return Err(Error::Config("no documents requested".into()));
    }
    let all = task.generate(total);
    fs::create_dir_all(&args.out_dir)?;
    let splits: [(&str, &[RawDocument]); 3] = [
        ("train", &all[..args.documents]),
        ("dev", &all[args.documents..args.documents + args.dev_documents]),
        ("test", &all[args.documents + args.dev_documents..]),
    ];
    for (name, docs) in splits {
        if docs.is_empty() {
            continue;
        }
        let src: Vec<Vec<String>> = docs
            .iter()
            .map(|d| d.sentences.iter().map(|(s, _)| s.join(" ")).collect())
            .collect();
        let tgt: Vec<Vec<String>> = docs
            .iter()
            .map(|d| d.sentences.iter().map(|(_, t)| t.join(" ")).collect())
            .collect();
        write_corpus_file(&args.out_dir.join(format!("{name}.src")), &src)?;
        write_corpus_file(&args.out_dir.join(format!("{name}.tgt")), &tgt)?;
    }
    println!(
        "wrote {} train / {} dev / {} test documents to {}",
        args.documents,
        args.dev_documents,
        args.test_documents,
        args.out_dir.display()
    );
    Ok(())
}

fn parse_grid<T, P>(label: &str, text: &str, parse: P) -> Result<Vec<T>>
where
    P: Fn(&str) -> Result<T>,
{
    let items: Vec<T> = text
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(s.trim()))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("empty {label} grid")));
    }
    Ok(items)
}

/// One ablation table row.
#[derive(Debug, Clone)]
pub struct AblateRow {
    pub window: usize,
    pub ctx_layers: usize,
    pub integration: Integration,
    pub gating: bool,
    pub dev_loss: f64,
    pub disambig_acc: Option<f64>,
    pub bleu: f64,
}

impl AblateRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{},{:.2}",
            self.window,
            self.ctx_layers,
            self.integration.name(),
            if self.gating { "on" } else { "off" },
            self.dev_loss,
            match self.disambig_acc {
                Some(a) => format!("{a:.4}"),
                None => String::new(),
            },
            self.bleu
        )
    }
}

/// Shared data for one ablation run.
struct AblateData {
    train_raw: Vec<RawDocument>,
    dev_raw: Vec<RawDocument>,
    task: Option<SyntheticDocTask>,
}

fn ablate_data(args: &AblateArgs) -> Result<AblateData> {
    match (args.synth_seed, &args.source) {
        (Some(seed), None) => {
            let task = synth_task(seed);
            let all = task.generate(args.documents + args.dev_documents);
            Ok(AblateData {
                train_raw: all[..args.documents].to_vec(),
                dev_raw: all[args.documents..].to_vec(),
                task: Some(task),
            })
        }
        (None, Some(src)) => {
            let tgt = args
                .target
                .as_ref()
                .ok_or_else(|| Error::Config("--target required with --source".into()))?;
            let ds = args
                .dev_source
                .as_ref()
                .ok_or_else(|| Error::Config("--dev-source required with --source".into()))?;
            let dt = args
                .dev_target
                .as_ref()
                .ok_or_else(|| Error::Config("--dev-target required with --source".into()))?;
            Ok(AblateData {
                train_raw: corpus::load_raw_corpus(src, tgt)?,
                dev_raw: corpus::load_raw_corpus(ds, dt)?,
                task: None,
            })
        }
        (Some(_), Some(_)) => Err(Error::Config(
            "--synth-seed and --source are mutually exclusive".into(),
        )),
        (None, None) => Err(Error::Config(
            "ablate needs either --synth-seed or --source/--target".into(),
        )),
    }
}

fn run_ablate<F: Scalar>(args: &AblateArgs, settings: &Settings) -> Result<Vec<AblateRow>> {
    let windows = parse_grid("window", &args.windows, |s| parse_num("window", s))?;
    let ctx_layer_grid = parse_grid("ctx-layer", &args.ctx_layer_grid, |s| {
        parse_num("ctx_layers", s)
    })?;
    let integrations = parse_grid("integration", &args.integrations, Integration::parse)?;
    let gatings = parse_grid("gating", &args.gating_grid, |s| {
        parse_bool_switch("gating", s)
    })?;

    let data = ablate_data(args)?;
    let src_side: Vec<&[String]> = data
        .train_raw
        .iter()
        .flat_map(|d| d.sentences.iter().map(|(s, _)| s.as_slice()))
        .collect();
    let tgt_side: Vec<&[String]> = data
        .train_raw
        .iter()
        .flat_map(|d| d.sentences.iter().map(|(_, t)| t.as_slice()))
        .collect();
    let src_vocab = Vocabulary::build(src_side.iter().copied(), settings.vocab_size)?;
    let tgt_vocab = Vocabulary::build(tgt_side.iter().copied(), settings.vocab_size)?;
    let train_docs = corpus::encode_corpus(&data.train_raw, &src_vocab, &tgt_vocab);
    let dev_docs = corpus::encode_corpus(&data.dev_raw, &src_vocab, &tgt_vocab);
    let sent_train = sentence_examples(&train_docs);
    let dev_sources: Vec<Vec<Vec<String>>> = data
        .dev_raw
        .iter()
        .map(|d| d.sentences.iter().map(|(s, _)| s.clone()).collect())
        .collect();
    let dev_refs = reference_lines(&data.dev_raw);

    // One shared sentence-level stage per run; every row reuses it.
    let base_cfg = settings
        .model_config(src_vocab.size(), tgt_vocab.size())
        .baseline();
    let mut base = DocTransformer::<F>::new(base_cfg, settings.seed)?;
    let mut plan_one = settings.train_plan();
    plan_one.max_steps = args.steps_one;
    train_step_one(&mut base, &sent_train, None, &plan_one)?;

    let decode_cfg = settings.decode_config();
    let mut rows = Vec::new();
    for &window in &windows {
        for &ctx_layers in &ctx_layer_grid {
            for &integration in &integrations {
                for &gating in &gatings {
                    let (ie, id) = integration.flags();
                    let cfg = ModelConfig {
                        ctx_layers,
                        context_window: window,
                        integrate_encoder: ie,
                        integrate_decoder: id,
                        gating,
                        ..base.config().clone()
                    };
                    let mut model = DocTransformer::<F>::new(cfg, settings.seed)?;
                    // Copy the shared sentence-level weights in by name.
                    for pid in base.store().ids() {
                        let name = base.store().name(pid).to_string();
                        if let Some(tid) = model.store().lookup(&name) {
                            let v = base.store().value(pid).clone();
                            model.store_mut().set(tid, v)?;
                        }
                    }
                    let doc_train = doc_examples(&train_docs, window)?;
                    let doc_dev = doc_examples(&dev_docs, window)?;
                    if integration != Integration::None {
                        let mut plan_two = settings.train_plan();
                        plan_two.max_steps = args.steps_two;
                        train_step_two(&mut model, &doc_train, None, &plan_two)?;
                    }
                    let dev_loss =
                        eval_loss(&model, &doc_dev, integration.flags(), settings.token_budget)?;
                    let mut all_lines = Vec::new();
                    for doc in &dev_sources {
                        let encoded: Vec<Vec<u32>> =
                            doc.iter().map(|s| src_vocab.encode(s)).collect();
                        let translated =
                            translate_document(&model, &encoded, window, &decode_cfg)?;
                        for ids in translated {
                            all_lines.push(tgt_vocab.decode_sentence(&ids)?.join(" "));
                        }
                    }
                    let bleu_score = bleu(&all_lines, &dev_refs)?.score;
                    let disambig_acc = match &data.task {
                        Some(task) => {
                            Some(task.disambiguation_accuracy(&all_lines, &data.dev_raw)?)
                        }
                        None => None,
                    };
                    rows.push(AblateRow {
                        window,
                        ctx_layers,
                        integration,
                        gating,
                        dev_loss,
                        disambig_acc,
                        bleu: bleu_score,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let settings = resolve_settings(&args.settings)?;
    let rows = match settings.precision {
        Precision::F32 => run_ablate::<f32>(args, &settings)?,
        Precision::F64 => run_ablate::<f64>(args, &settings)?,
    };
    let mut table = String::from("window,ctx_layers,integration,gating,dev_loss,disambig_acc,bleu\n");
    for row in &rows {
        table.push_str(&row.csv());
        table.push('\n');
    }
    match &args.out {
        Some(p) => fs::write(p, &table)?,
        None => print!("{table}"),
    }
    Ok(())
}

/// Entry point used by the binary; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::TrainSentence(a) => cmd_train("sentence", a),
        Command::TrainDocument(a) => cmd_train("document", a),
        Command::TrainJoint(a) => cmd_train("joint", a),
        Command::Translate(a) => cmd_translate(a),
        Command::Bleu(a) => cmd_bleu(a),
        Command::SynthGen(a) => cmd_synth_gen(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::NamedTempFile;

    #[test]
    fn profile_defaults_resolve() {
        let s = resolve_settings(&SettingsArgs::default()).unwrap();
        assert_eq!(s.hidden, 64);
        assert_eq!(s.beam, 4);
        assert!((s.alpha - 0.6).abs() < 1e-12);
        let paper = resolve_settings(&SettingsArgs {
            profile: Some("paper".into()),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(paper.hidden, 512);
        assert_eq!(paper.filter, 2048);
        assert_eq!(paper.heads, 8);
        assert_eq!(paper.enc_layers, 6);
        assert_eq!(paper.ctx_layers, 1);
        assert_eq!(paper.context_window, 2);
    }

    #[test]
    fn file_overrides_profile_and_flags_override_file() {
        let mut f = NamedTempFile::new().unwrap();
        writeln!(f, "# comment\nhidden = 32\nmax-steps = 7\nseed=5").unwrap();
        let args = SettingsArgs {
            config: Some(f.path().to_path_buf()),
            seed: Some(9),
            ..Default::default()
        };
        let s = resolve_settings(&args).unwrap();
        assert_eq!(s.hidden, 32);
        assert_eq!(s.max_steps, 7);
        assert_eq!(s.seed, 9); // flag beats file
    }

    #[test]
    fn unknown_key_is_config_error() {
        let mut f = NamedTempFile::new().unwrap();
        writeln!(f, "no_such_key=1").unwrap();
        let args = SettingsArgs {
            config: Some(f.path().to_path_buf()),
            ..Default::default()
        };
        assert!(matches!(resolve_settings(&args), Err(Error::Config(_))));
    }

    #[test]
    fn integration_parsing() {
        assert_eq!(Integration::parse("both").unwrap().flags(), (true, true));
        assert_eq!(
            Integration::parse("encoder").unwrap().flags(),
            (true, false)
        );
        assert_eq!(
            Integration::parse("decoder").unwrap().flags(),
            (false, true)
        );
        assert_eq!(Integration::parse("none").unwrap().flags(), (false, false));
        assert!(Integration::parse("sideways").is_err());
    }

    #[test]
    fn grid_parsing_rejects_empty() {
        assert!(parse_grid("window", "", |s| parse_num::<usize>("w", s)).is_err());
        let g = parse_grid("window", "0,1,2", |s| parse_num::<usize>("w", s)).unwrap();
        assert_eq!(g, vec![0, 1, 2]);
    }
}
