//! Command-line front end: one subcommand per pipeline stage, every run
//! driven by a fully resolved [`RunConfig`] built from defaults, an optional
//! JSON config file and flags (in increasing priority).

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::*;
use crate::error::{Error, Result};
use crate::generative::*;
use crate::metrics::{evaluate_captions, ReferenceCorpus};
use crate::retrieval::*;
use crate::tensor::{OptimizerConfig, ParamStore};
use crate::text::*;
use crate::traits::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GenData,
    BuildVocab,
    TrainRetrieval,
    EvalRetrieval,
    TrainGen,
    EvalCaptions,
    Predict,
    PretrainText,
    TrainClassifier,
    Coverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Retrieval,
    ShowTell,
    ShowAttTell,
    UpDown,
}

impl ModelKind {
    fn decoder(self) -> Option<DecoderKind> {
        match self {
            ModelKind::Retrieval => None,
            ModelKind::ShowTell => Some(DecoderKind::ShowTell),
            ModelKind::ShowAttTell => Some(DecoderKind::ShowAttTell),
            ModelKind::UpDown => Some(DecoderKind::UpDown),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Default,
    TraitDependent,
    SynonymShift,
    Generative,
}

impl Preset {
    fn spec(self, seed: u64) -> SyntheticSpec {
        let base = match self {
            Preset::Default => SyntheticSpec::default(),
            Preset::TraitDependent => SyntheticSpec::trait_dependent(),
            Preset::SynonymShift => SyntheticSpec::synonym_shift(),
            Preset::Generative => SyntheticSpec::generative(),
        };
        SyntheticSpec { seed, ..base }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenStage {
    Xe,
    Scst,
}

/// Parses a flag value as JSON, falling back to a bare string, so numbers,
/// booleans and enum names all go through serde.
fn parse_value<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    let v = serde_json::from_str(s).unwrap_or_else(|_| serde_json::Value::String(s.to_string()));
    serde_json::from_value(v).map_err(|e| e.to_string())
}

macro_rules! run_config {
    (
        optional { $($(#[doc = $odoc:literal])* $ofield:ident : $oty:ty),* $(,)? }
        values { $($(#[doc = $vdoc:literal])* $vfield:ident : $vty:ty = $vdefault:expr),* $(,)? }
    ) => {
        /// Every setting of a run after defaults, config file and flags are merged.
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct RunConfig {
            pub subcommand: Command,
            $($(#[doc = $odoc])* pub $ofield: Option<$oty>,)*
            $($(#[doc = $vdoc])* pub $vfield: $vty,)*
        }

        impl RunConfig {
            pub fn defaults(subcommand: Command) -> Self {
                RunConfig {
                    subcommand,
                    $($ofield: None,)*
                    $($vfield: $vdefault,)*
                }
            }
        }

        /// Any subset of [`RunConfig`]; used for both flags and config files.
        #[derive(Debug, Clone, Default, Args, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct Overrides {
            $($(#[doc = $odoc])* #[arg(long, value_parser = parse_value::<$oty>)] pub $ofield: Option<$oty>,)*
            $($(#[doc = $vdoc])* #[arg(long, value_parser = parse_value::<$vty>)] pub $vfield: Option<$vty>,)*
        }

        impl Overrides {
            pub fn apply(self, c: &mut RunConfig) {
                $(if let Some(v) = self.$ofield { c.$ofield = Some(v); })*
                $(if let Some(v) = self.$vfield { c.$vfield = v; })*
            }
        }
    };
}

run_config! {
    optional {
        /// Feature store (.bin).
        features: PathBuf,
        /// Caption records (JSONL).
        captions: PathBuf,
        /// Trait table (JSON); the built-in 215-trait table when absent.
        traits: PathBuf,
        /// Vocabulary file, one token per line.
        vocab: PathBuf,
        /// Input checkpoint (its `<path>.json` sidecar describes the model).
        checkpoint: PathBuf,
        /// Dialogue pairs (JSONL) for text pretraining and vocabulary building.
        dialogue: PathBuf,
        /// Word vectors (text, one `word v1 .. vd` per line) for `pretraining = word`.
        word_vectors: PathBuf,
        /// Pretrained text-encoder checkpoint for `pretraining = full`.
        pretrained: PathBuf,
        /// Predictions (JSONL) to score or classify.
        predictions: PathBuf,
        /// Output directory.
        out: PathBuf,
        /// Report path; defaults to `<out>/report.json`.
        report: PathBuf,
        /// retrieval, showtell, showatttell or updown.
        model: ModelKind,
    }
    values {
        /// Text encoder: transformer or bow.
        encoder: EncoderKind = EncoderKind::Transformer,
        /// Text-encoder initialization: none, word or full.
        pretraining: Pretraining = Pretraining::None,
        /// Condition on the personality trait.
        personality: bool = true,
        /// Batch size.
        batch: usize = 50,
        /// Training epochs.
        epochs: usize = 10,
        /// Adam learning rate.
        lr: f64 = 1e-3,
        /// Beam width; 1 decodes greedily.
        beam: usize = 2,
        /// Width of the retrieval joint space.
        joint_dim: usize = 64,
        /// Text encoder width (also the word-vector size in gen-data).
        d_model: usize = 32,
        /// Transformer layers.
        layers: usize = 1,
        /// Attention heads.
        heads: usize = 2,
        /// Decoder width (embedding, hidden and attention sizes).
        hidden_dim: usize = 32,
        /// Token budget for captions, EOS included.
        max_len: usize = 16,
        /// Seed for data generation, initialization and shuffling.
        seed: u64 = 0,
        /// Worker threads; 0 uses every core, 1 is bitwise reproducible.
        threads: usize = 0,
        /// Synthetic corpus: default, trait_dependent, synonym_shift or generative.
        preset: Preset = Preset::Default,
        /// Dialogue pairs written by gen-data.
        dialogue_pairs: usize = 2000,
        /// Minimum token count to enter the vocabulary.
        min_freq: usize = 1,
        /// Decoder training stage: xe or scst (scst needs --checkpoint).
        stage: GenStage = GenStage::Xe,
        /// Split evaluated, predicted or classified.
        split: Split = Split::Test,
        /// Split whose captions form the retrieval candidate pool in `predict`.
        pool_split: Split = Split::Train,
        /// Candidates per retrieval query, true caption included.
        num_candidates: usize = 100,
        /// Epochs the pretrained text encoder stays frozen.
        frozen_epochs: usize = 1,
        /// Negatives per pair in next-utterance pretraining.
        negatives: usize = 15,
        /// Sampled captions per image in SCST.
        samples_per_image: usize = 1,
    }
}

#[derive(Debug, Parser)]
#[command(name = "percap", version, about = "Personality-conditioned captioning: data, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CommandArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON file supplying any subset of the run settings; flags win.
    #[arg(long = "config")]
    pub config_file: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Subcommand)]
pub enum CommandArgs {
    /// Write a synthetic corpus: features, captions, traits, dialogue, word vectors.
    GenData(CommonArgs),
    /// Build a vocabulary from training captions (and dialogue, if given).
    BuildVocab(CommonArgs),
    /// Train a TransResNet retrieval model on the train split.
    TrainRetrieval(CommonArgs),
    /// Recall@k of a retrieval checkpoint on a split.
    EvalRetrieval(CommonArgs),
    /// Train a caption decoder with cross-entropy (`--stage xe`) or SCST (`--stage scst`).
    TrainGen(CommonArgs),
    /// BLEU, ROUGE-L and CIDEr-D of a decoder checkpoint or a predictions file.
    EvalCaptions(CommonArgs),
    /// Top caption per (image, trait) pair of a split, as JSONL.
    Predict(CommonArgs),
    /// Next-utterance pretraining of the text encoder on dialogue pairs.
    PretrainText(CommonArgs),
    /// Train a trait classifier that maps a caption to its personality.
    TrainClassifier(CommonArgs),
    /// Per-polarity trait coverage of gold captions or predictions.
    Coverage(CommonArgs),
}

impl CommandArgs {
    fn split(self) -> (Command, CommonArgs) {
        use CommandArgs as A;
        match self {
            A::GenData(a) => (Command::GenData, a),
            A::BuildVocab(a) => (Command::BuildVocab, a),
            A::TrainRetrieval(a) => (Command::TrainRetrieval, a),
            A::EvalRetrieval(a) => (Command::EvalRetrieval, a),
            A::TrainGen(a) => (Command::TrainGen, a),
            A::EvalCaptions(a) => (Command::EvalCaptions, a),
            A::Predict(a) => (Command::Predict, a),
            A::PretrainText(a) => (Command::PretrainText, a),
            A::TrainClassifier(a) => (Command::TrainClassifier, a),
            A::Coverage(a) => (Command::Coverage, a),
        }
    }
}

/// Merges defaults, the config file and flags.
pub fn resolve(command: CommandArgs) -> Result<RunConfig> {
    let (sub, args) = command.split();
    let mut cfg = RunConfig::defaults(sub);
    if let Some(path) = &args.config_file {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Overrides =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
        file.apply(&mut cfg);
    }
    args.overrides.apply(&mut cfg);
    Ok(cfg)
}

/// Parses `argv`, runs the subcommand and maps the outcome to an exit code
/// (0 ok, 2 configuration, 3 data validation, 1 anything else).
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match resolve(cli.command).and_then(|cfg| run(&cfg)) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string();
            let mut lines = msg.lines();
            eprintln!("error: {}", lines.next().unwrap_or_default());
            for l in lines {
                eprintln!("  {l}");
            }
            e.exit_code()
        }
    }
}

/// Executes one resolved run inside a thread pool of the configured size.
pub fn run(cfg: &RunConfig) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let out = require(&cfg.out, "out")?;
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_json(&out.join("config.json"), cfg)?;
        log::info!("{:?} -> {}", cfg.subcommand, out.display());
        let report = match cfg.subcommand {
            Command::GenData => gen_data(cfg, out)?,
            Command::BuildVocab => build_vocab_cmd(cfg, out)?,
            Command::TrainRetrieval => train_retrieval_cmd(cfg, out)?,
            Command::EvalRetrieval => eval_retrieval_cmd(cfg)?,
            Command::TrainGen => train_gen_cmd(cfg, out)?,
            Command::EvalCaptions => eval_captions_cmd(cfg)?,
            Command::Predict => predict_cmd(cfg, out)?,
            Command::PretrainText => pretrain_text_cmd(cfg, out)?,
            Command::TrainClassifier => train_classifier_cmd(cfg, out)?,
            Command::Coverage => coverage_cmd(cfg)?,
        };
        let path = cfg.report.clone().unwrap_or_else(|| out.join("report.json"));
        write_json(&path, &report)
    })
}

fn require<'a, T>(v: &'a Option<T>, name: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Config(format!("missing required setting --{}", name.replace('_', "-"))))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::FormatLine {
                path: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Written next to every checkpoint as `<checkpoint>.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "model_type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelCard {
    Retrieval { config: RetrievalConfig },
    Generative { config: DecoderConfig, stage: Stage },
    Classifier { config: ClassifierConfig },
    TextEncoder { config: TextEncoderConfig },
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn save_model(path: &Path, store: &ParamStore, card: &ModelCard) -> Result<()> {
    save_checkpoint(path, store)?;
    write_json(&sidecar_path(path), card)
}

fn read_card(checkpoint: &Path) -> Result<ModelCard> {
    let p = sidecar_path(checkpoint);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("checkpoint sidecar {}: {e}", p.display())))
}

fn store_from_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, t) in load_checkpoint(path)? {
        store.add(name, t)?;
    }
    Ok(store)
}

enum Loaded {
    Retrieval(TransResNet),
    Generative(Decoder),
    Classifier(TraitClassifier),
}

fn load_model(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Loaded> {
    let path = require(&cfg.checkpoint, "checkpoint")?;
    let card = read_card(path)?;
    let model = match card {
        ModelCard::Retrieval { config } => {
            let mut m = TransResNet::new(config, vocab.len(), 0)?;
            load_into(path, &mut m.params)?;
            Loaded::Retrieval(m)
        }
        ModelCard::Generative { config, stage } => {
            let mut d = Decoder::new(config, 0)?;
            load_into(path, &mut d.params)?;
            d.stage = stage;
            Loaded::Generative(d)
        }
        ModelCard::Classifier { config } => {
            let mut c = TraitClassifier::new(config, vocab.len(), 0)?;
            load_into(path, &mut c.params)?;
            Loaded::Classifier(c)
        }
        ModelCard::TextEncoder { .. } => {
            return Err(Error::Config(format!("{} holds a pretrained text encoder, not a model", path.display())))
        }
    };
    if let Some(want) = cfg.model {
        let found = match &model {
            Loaded::Retrieval(_) => Some(ModelKind::Retrieval),
            Loaded::Generative(d) => Some(match d.config.kind {
                DecoderKind::ShowTell => ModelKind::ShowTell,
                DecoderKind::ShowAttTell => ModelKind::ShowAttTell,
                DecoderKind::UpDown => ModelKind::UpDown,
            }),
            Loaded::Classifier(_) => None,
        };
        if found != Some(want) {
            return Err(Error::Config(format!("--model {want:?} does not match checkpoint {}", path.display())));
        }
    }
    Ok(model)
}

fn load_traits(cfg: &RunConfig) -> Result<TraitTable> {
    match &cfg.traits {
        Some(p) => TraitTable::read(p),
        None => Ok(TraitTable::default_table()),
    }
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary> {
    Vocabulary::load(require(&cfg.vocab, "vocab")?)
}

fn load_records(cfg: &RunConfig, traits: &TraitTable) -> Result<Vec<CaptionRecord>> {
    read_captions(require(&cfg.captions, "captions")?, traits)
}

fn load_features(cfg: &RunConfig) -> Result<FeatureStore> {
    FeatureStore::read(require(&cfg.features, "features")?)
}

fn encoder_config(cfg: &RunConfig) -> TextEncoderConfig {
    TextEncoderConfig {
        kind: cfg.encoder,
        layers: cfg.layers,
        d_model: cfg.d_model,
        heads: cfg.heads,
        ff_dim: 2 * cfg.d_model,
        max_len: cfg.max_len,
        pretraining: cfg.pretraining,
    }
}

/// Word vectors and pretrained encoder weights requested by the config.
fn pretraining_inputs(cfg: &RunConfig) -> Result<(Option<WordVectors>, Option<ParamStore>)> {
    let wv = match (&cfg.word_vectors, cfg.pretraining) {
        (Some(p), Pretraining::Word) => Some(WordVectors::read(p)?),
        _ => None,
    };
    let enc = match (&cfg.pretrained, cfg.pretraining) {
        (Some(p), Pretraining::Full) => {
            match read_card(p)? {
                ModelCard::TextEncoder { .. } => {}
                _ => return Err(Error::Config(format!("{} is not a pretrained text encoder", p.display()))),
            }
            Some(store_from_checkpoint(p)?)
        }
        _ => None,
    };
    Ok((wv, enc))
}

fn adam(cfg: &RunConfig) -> OptimizerConfig {
    OptimizerConfig::adam(cfg.lr)
}

/// Distinct (image, trait) pairs of a split, in order of first appearance.
fn split_queries(records: &[CaptionRecord], split: Split, traits: &TraitTable) -> Result<Vec<(String, usize)>> {
    let mut seen = IndexMap::new();
    for r in records.iter().filter(|r| r.split == split) {
        let t = traits
            .id(&r.personality)
            .ok_or_else(|| Error::Validation(vec![format!("{}: unknown personality {:?}", r.image_id, r.personality)]))?;
        seen.entry((r.image_id.clone(), t)).or_insert(());
    }
    if seen.is_empty() {
        return Err(Error::Evaluation(format!("no {split} records")));
    }
    Ok(seen.into_keys().collect())
}

#[derive(Serialize)]
struct GenDataReport {
    spec: SyntheticSpec,
    feature_shape: Vec<usize>,
    num_traits: usize,
    captions_per_split: IndexMap<String, usize>,
    dialogue_pairs: usize,
    word_vector_dim: usize,
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<serde_json::Value> {
    let spec = cfg.preset.spec(cfg.seed);
    let world = SyntheticWorld::new(spec.clone())?;
    let corpus = world.corpus()?;
    corpus.features.write(&out.join("features.bin"))?;
    write_captions(&out.join("captions.jsonl"), &corpus.records)?;
    corpus.traits.write(&out.join("traits.json"))?;
    let dialogue = world.dialogue_pairs(cfg.dialogue_pairs, cfg.seed.wrapping_add(7));
    write_jsonl(&out.join("dialogue.jsonl"), &dialogue)?;
    world.word_vectors(cfg.d_model, cfg.seed.wrapping_add(3)).write(&out.join("word_vectors.txt"))?;
    let mut per_split = IndexMap::new();
    for s in [Split::Train, Split::Valid, Split::Test] {
        per_split.insert(s.to_string(), corpus.records.iter().filter(|r| r.split == s).count());
    }
    Ok(serde_json::to_value(GenDataReport {
        spec,
        feature_shape: corpus.features.shape().to_vec(),
        num_traits: corpus.traits.len(),
        captions_per_split: per_split,
        dialogue_pairs: dialogue.len(),
        word_vector_dim: cfg.d_model,
    })?)
}

fn build_vocab_cmd(cfg: &RunConfig, out: &Path) -> Result<serde_json::Value> {
    let traits = load_traits(cfg)?;
    let records = load_records(cfg, &traits)?;
    let dialogue: Vec<DialoguePair> = match &cfg.dialogue {
        Some(p) => read_jsonl(p)?,
        None => Vec::new(),
    };
    // Only training captions: held-out words must not leak into the vocabulary.
    let texts = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.caption.as_str())
        .chain(dialogue.iter().flat_map(|p| [p.context.as_str(), p.response.as_str()]));
    let vocab = build_vocab_from_texts(texts, cfg.min_freq)?;
    vocab.save(&out.join("vocab.txt"))?;
    Ok(serde_json::json!({ "size": vocab.len(), "dialogue_pairs": dialogue.len() }))
}

fn pretrain_text_cmd(cfg: &RunConfig, out: &Path) -> Result<serde_json::Value> {
    let vocab = load_vocab(cfg)?;
    let pairs: Vec<DialoguePair> = read_jsonl(require(&cfg.dialogue, "dialogue")?)?;
    let held = (pairs.len() / 10).max(2).min(pairs.len());
    let (heldout, train) = pairs.split_at(held);
    let wv = cfg.word_vectors.as_deref().map(WordVectors::read).transpose()?;
    let mut enc = encoder_config(cfg);
    enc.pretraining = Pretraining::None;
    let pc = PretrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch,
        negatives: cfg.negatives,
        lr: cfg.lr,
        seed: cfg.seed,
        eval_pool: 10,
    };
    let (dual, report) = pretrain_next_utterance(train, heldout, &vocab, enc.clone(), &pc, wv.as_ref())?;
    let weights = dual.candidate_weights(TEXT_PREFIX)?;
    save_model(&out.join("text_encoder.ckpt"), &weights, &ModelCard::TextEncoder { config: enc })?;
    Ok(serde_json::to_value(report)?)
}

fn train_retrieval_cmd(cfg: &RunConfig, out: &Path) -> Result<serde_json::Value> {
    let traits = load_traits(cfg)?;
    let records = load_records(cfg, &traits)?;
    let features = load_features(cfg)?;
    let vocab = load_vocab(cfg)?;
    validate_records(&records, &traits, Some(&features))?;
    let config = RetrievalConfig {
        feature_dim: features.dim(),
        joint_dim: cfg.joint_dim,
        image_layers: 2,
        num_traits: traits.len(),
        personality: cfg.personality,
        encoder: encoder_config(cfg),
    };
    let mut model = TransResNet::new(config.clone(), vocab.len(), cfg.seed)?;
    let (wv, enc) = pretraining_inputs(cfg)?;
    model.apply_pretraining(&vocab, wv.as_ref(), enc.as_ref())?;
    let train = build_examples(&records, Split::Train, &traits, &vocab, &model)?;
    let tc = RetrievalTrainConfig {
        batch_size: cfg.batch,
        epochs: cfg.epochs,
        optimizer: adam(cfg),
        seed: cfg.seed,
        frozen_epochs: cfg.frozen_epochs,
    };
    let log = train_retrieval(&mut model, &train, &features, &tc)?;
    save_model(&out.join("retrieval.ckpt"), &model.params, &ModelCard::Retrieval { config })?;
    Ok(serde_json::json!({ "num_examples": train.len(), "epoch_losses": log.epoch_losses }))
}

fn eval_retrieval_cmd(cfg: &RunConfig) -> Result<serde_json::Value> {
    let traits = load_traits(cfg)?;
    let records = load_records(cfg, &traits)?;
    let features = load_features(cfg)?;
    let vocab = load_vocab(cfg)?;
    let Loaded::Retrieval(model) = load_model(cfg, &vocab)? else {
        return Err(Error::Config("eval-retrieval needs a retrieval checkpoint".into()));
    };
    let examples = build_examples(&records, cfg.split, &traits, &vocab, &model)?;
    let ec = EvalConfig {
        num_candidates: cfg.num_candidates,
        seed: cfg.seed,
    };
    Ok(serde_json::to_value(eval_recall(&model, &examples, &features, &ec)?)?)
}

fn train_gen_cmd(cfg: &RunConfig, out: &Path) -> Result<serde_json::Value> {
    let traits = load_traits(cfg)?;
    let records = load_records(cfg, &traits)?;
    let features = load_features(cfg)?;
    let vocab = load_vocab(cfg)?;
    validate_records(&records, &traits, Some(&features))?;
    let mut decoder = match cfg.stage {
        GenStage::Xe => {
            let kind = cfg.model.unwrap_or(ModelKind::UpDown).decoder().ok_or_else(|| {
                Error::Config("train-gen needs a decoder model (showtell, showatttell or updown)".into())
            })?;
            Decoder::new(
                DecoderConfig {
                    kind,
                    feature_dim: features.dim(),
                    embed_dim: cfg.hidden_dim,
                    hidden_dim: cfg.hidden_dim,
                    att_dim: cfg.hidden_dim,
                    vocab_size: vocab.len(),
                    num_traits: traits.len(),
                    personality: cfg.personality,
                    max_len: cfg.max_len,
                },
                cfg.seed,
            )?
        }
        GenStage::Scst => match load_model(cfg, &vocab)? {
            Loaded::Generative(d) => d,
            _ => return Err(Error::Config("train-gen --stage scst needs a decoder checkpoint".into())),
        },
    };
    let max_len = decoder.config.max_len;
    let train = build_gen_examples(&records, Split::Train, &traits, &vocab, max_len)?;
    let log = match cfg.stage {
        GenStage::Xe => {
            let xc = XeConfig {
                batch_size: cfg.batch,
                epochs: cfg.epochs,
                optimizer: adam(cfg),
                seed: cfg.seed,
            };
            serde_json::to_value(train_xe(&mut decoder, &train, &features, &xc)?)?
        }
        GenStage::Scst => {
            let refs = ReferenceCorpus::from_records(&records, Split::Train)?;
            let sc = ScstConfig {
                batch_size: cfg.batch,
                epochs: cfg.epochs,
                optimizer: adam(cfg),
                seed: cfg.seed,
                samples_per_image: cfg.samples_per_image,
                max_len,
            };
            serde_json::to_value(train_scst(&mut decoder, &train, &features, &vocab, &refs, &sc)?)?
        }
    };
    let valid = if records.iter().any(|r| r.split == Split::Valid) {
        let refs = ReferenceCorpus::from_records(&records, Split::Valid)?;
        let q = split_queries(&records, Split::Valid, &traits)?;
        Some(greedy_cider(&decoder, &features, &q, &vocab, &refs, max_len)?)
    } else {
        None
    };
    let card = ModelCard::Generative {
        config: decoder.config.clone(),
        stage: decoder.stage,
    };
    save_model(&out.join("decoder.ckpt"), &decoder.params, &card)?;
    Ok(serde_json::json!({
        "stage": decoder.stage,
        "num_examples": train.len(),
        "log": log,
        "valid_greedy_cider": valid,
    }))
}

fn decode_config(cfg: &RunConfig, decoder: &Decoder) -> (DecodeConfig, Strategy) {
    let dc = DecodeConfig {
        beam: cfg.beam.max(1),
        max_len: decoder.config.max_len,
        monotone: true,
    };
    let strategy = if cfg.beam <= 1 { Strategy::Greedy } else { Strategy::Beam };
    (dc, strategy)
}

fn generate_predictions(cfg: &RunConfig, decoder: &Decoder, features: &FeatureStore, vocab: &Vocabulary, traits: &TraitTable, queries: &[(String, usize)]) -> Result<Vec<Prediction>> {
    let (dc, strategy) = decode_config(cfg, decoder);
    let decoded = generate(decoder, features, queries, &dc, strategy)?;
    Ok(queries
        .iter()
        .zip(decoded)
        .map(|((id, t), d)| Prediction {
            image_id: id.clone(),
            personality: traits.name(*t).to_string(),
            caption: vocab.decode(&d.tokens),
            score: d.log_prob,
        })
        .collect())
}

fn eval_captions_cmd(cfg: &RunConfig) -> Result<serde_json::Value> {
    let traits = load_traits(cfg)?;
    let records = load_records(cfg, &traits)?;
    let refs = ReferenceCorpus::from_records(&records, cfg.split)?;
    let predictions: Vec<Prediction> = match (&cfg.predictions, &cfg.checkpoint) {
        (Some(p), _) => read_jsonl(p)?,
        (None, Some(_)) => {
            let vocab = load_vocab(cfg)?;
            let features = load_features(cfg)?;
            let Loaded::Generative(decoder) = load_model(cfg, &vocab)? else {
                return Err(Error::Config("eval-captions needs a decoder checkpoint".into()));
            };
            let queries = split_queries(&records, cfg.split, &traits)?;
            generate_predictions(cfg, &decoder, &features, &vocab, &traits, &queries)?
        }
        (None, None) => return Err(Error::Config("eval-captions needs --predictions or --checkpoint".into())),
    };
    let pairs: Vec<(String, Vec<String>)> = predictions.iter().map(|p| (p.image_id.clone(), tokenize(&p.caption))).collect();
    Ok(serde_json::to_value(evaluate_captions(&pairs, &refs)?)?)
}

fn predict_cmd(cfg: &RunConfig, out: &Path) -> Result<serde_json::Value> {
    let traits = load_traits(cfg)?;
    let records = load_records(cfg, &traits)?;
    let features = load_features(cfg)?;
    let vocab = load_vocab(cfg)?;
    let queries = split_queries(&records, cfg.split, &traits)?;
    let predictions = match load_model(cfg, &vocab)? {
        Loaded::Retrieval(model) => {
            let mut pool_text: Vec<&str> = Vec::new();
            for r in records.iter().filter(|r| r.split == cfg.pool_split) {
                if !pool_text.contains(&r.caption.as_str()) {
                    pool_text.push(&r.caption);
                }
            }
            let pool = pool_text
                .iter()
                .map(|c| model.encoder.prepare(&vocab, &tokenize(c)))
                .collect::<Result<Vec<_>>>()?;
            let q: Vec<(&str, usize)> = queries.iter().map(|(id, t)| (id.as_str(), *t)).collect();
            predict_top1(&model, &features, &q, &pool)?
                .into_iter()
                .zip(&queries)
                .map(|((c, score), (id, t))| Prediction {
                    image_id: id.clone(),
                    personality: traits.name(*t).to_string(),
                    caption: pool_text[c].to_string(),
                    score,
                })
                .collect()
        }
        Loaded::Generative(decoder) => generate_predictions(cfg, &decoder, &features, &vocab, &traits, &queries)?,
        Loaded::Classifier(_) => return Err(Error::Config("predict needs a retrieval or decoder checkpoint".into())),
    };
    write_predictions(&out.join("predictions.jsonl"), &predictions)?;
    Ok(serde_json::json!({ "num_predictions": predictions.len(), "predictions": predictions }))
}

fn train_classifier_cmd(cfg: &RunConfig, out: &Path) -> Result<serde_json::Value> {
    let traits = load_traits(cfg)?;
    let records = load_records(cfg, &traits)?;
    let vocab = load_vocab(cfg)?;
    let config = ClassifierConfig {
        encoder: encoder_config(cfg),
        num_traits: traits.len(),
    };
    let mut clf = TraitClassifier::new(config.clone(), vocab.len(), cfg.seed)?;
    let (wv, enc) = pretraining_inputs(cfg)?;
    clf.apply_pretraining(&vocab, wv.as_ref(), enc.as_ref())?;
    let train = build_classifier_examples(&records, Split::Train, &traits, &vocab, &clf)?;
    let dev = build_classifier_examples(&records, Split::Valid, &traits, &vocab, &clf)?;
    let tc = ClassifierTrainConfig {
        batch_size: cfg.batch,
        epochs: cfg.epochs,
        optimizer: adam(cfg),
        seed: cfg.seed,
    };
    let log = train_trait_classifier(&mut clf, &train, &dev, &tc)?;
    save_model(&out.join("classifier.ckpt"), &clf.params, &ModelCard::Classifier { config })?;
    Ok(serde_json::to_value(log)?)
}

fn coverage_cmd(cfg: &RunConfig) -> Result<serde_json::Value> {
    let traits = load_traits(cfg)?;
    let vocab = load_vocab(cfg)?;
    let Loaded::Classifier(clf) = load_model(cfg, &vocab)? else {
        return Err(Error::Config("coverage needs a classifier checkpoint".into()));
    };
    let captions: Vec<String> = match (&cfg.predictions, &cfg.captions) {
        (Some(p), _) => read_jsonl::<Prediction>(p)?.into_iter().map(|p| p.caption).collect(),
        (None, Some(_)) => load_records(cfg, &traits)?
            .into_iter()
            .filter(|r| r.split == cfg.split)
            .map(|r| r.caption)
            .collect(),
        (None, None) => return Err(Error::Config("coverage needs --predictions or --captions".into())),
    };
    let refs: Vec<&str> = captions.iter().map(String::as_str).collect();
    Ok(serde_json::to_value(trait_coverage(&refs, &clf, &vocab, &traits)?)?)
}
