//! Python bindings: vocabularies, trait tables, synthetic corpora, caption
//! metrics, the retrieval and generative models, and the CLI entry point.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use percap::data::{build_vocab, generate_synthetic, write_captions, Split, SyntheticCorpus, SyntheticSpec};
use percap::generative::*;
use percap::metrics::{evaluate_captions as evaluate, ReferenceCorpus};
use percap::retrieval::*;
use percap::tensor::OptimizerConfig;
use percap::text::{tokenize as tok, EncoderKind, TextEncoderConfig};
use percap::traits::{Polarity, TraitTable as CoreTraitTable};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn err(e: percap::Error) -> PyErr {
    match e.exit_code() {
        2 | 3 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Converts a serde value into plain Python objects.
fn to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value as V;
    Ok(match v {
        V::Null => py.None().into_bound(py),
        V::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        V::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        V::String(s) => s.into_pyobject(py)?.into_any(),
        V::Array(xs) => {
            let list = PyList::empty(py);
            for x in xs {
                list.append(to_py(py, x)?)?;
            }
            list.into_any()
        }
        V::Object(m) => {
            let d = PyDict::new(py);
            for (k, x) in m {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn serde_to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let value = serde_json::to_value(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &value)
}

fn parse_split(s: &str) -> PyResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        _ => Err(PyValueError::new_err(format!("unknown split {s:?}"))),
    }
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    tok(text)
}

/// Corpus-level BLEU-1..4, ROUGE-L and CIDEr-D of one caption per image.
#[pyfunction]
fn evaluate_captions<'py>(
    py: Python<'py>,
    predictions: BTreeMap<String, String>,
    references: BTreeMap<String, Vec<String>>,
) -> PyResult<Bound<'py, PyAny>> {
    let refs = references
        .into_iter()
        .map(|(k, v)| (k, v.iter().map(|r| tok(r)).collect()))
        .collect();
    let corpus = ReferenceCorpus::new(refs).map_err(err)?;
    let preds: Vec<(String, Vec<String>)> = predictions.into_iter().map(|(k, v)| (k, tok(&v))).collect();
    serde_to_py(py, &evaluate(&preds, &corpus).map_err(err)?)
}

/// Runs the command-line front end in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    percap::cli::main_with_args(std::iter::once("percap".to_string()).chain(args))
}

#[pyclass(module = "pypercap", skip_from_py_object)]
#[derive(Clone)]
struct TraitTable {
    inner: CoreTraitTable,
}

#[pymethods]
impl TraitTable {
    /// The built-in table of 215 traits.
    #[staticmethod]
    fn default() -> Self {
        TraitTable {
            inner: CoreTraitTable::default_table(),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(TraitTable {
            inner: CoreTraitTable::read(&path).map_err(err)?,
        })
    }

    fn names(&self) -> Vec<String> {
        self.inner.traits().iter().map(|t| t.name.clone()).collect()
    }

    fn id(&self, name: &str) -> Option<usize> {
        self.inner.id(name)
    }

    fn polarity(&self, id: usize) -> PyResult<&'static str> {
        if id >= self.inner.len() {
            return Err(PyValueError::new_err(format!("trait id {id} out of range")));
        }
        Ok(match self.inner.polarity(id) {
            Polarity::Positive => "positive",
            Polarity::Neutral => "neutral",
            Polarity::Negative => "negative",
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// A generated synthetic corpus held in memory.
#[pyclass(module = "pypercap")]
struct Corpus {
    inner: SyntheticCorpus,
}

#[pymethods]
impl Corpus {
    /// `preset` is one of default, trait_dependent, synonym_shift, generative.
    #[new]
    #[pyo3(signature = (preset = "default", seed = 0))]
    fn new(preset: &str, seed: u64) -> PyResult<Self> {
        let base = match preset {
            "default" => SyntheticSpec::default(),
            "trait_dependent" => SyntheticSpec::trait_dependent(),
            "synonym_shift" => SyntheticSpec::synonym_shift(),
            "generative" => SyntheticSpec::generative(),
            _ => return Err(PyValueError::new_err(format!("unknown preset {preset:?}"))),
        };
        let inner = generate_synthetic(&SyntheticSpec { seed, ..base }).map_err(err)?;
        Ok(Corpus { inner })
    }

    fn records<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        serde_to_py(py, &self.inner.records)
    }

    #[getter]
    fn traits(&self) -> TraitTable {
        TraitTable {
            inner: self.inner.traits.clone(),
        }
    }

    #[getter]
    fn feature_shape(&self) -> Vec<usize> {
        self.inner.features.shape().to_vec()
    }

    /// Writes features.bin, captions.jsonl and traits.json under `dir`.
    fn write(&self, dir: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&dir).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        self.inner.features.write(&dir.join("features.bin")).map_err(err)?;
        write_captions(&dir.join("captions.jsonl"), &self.inner.records).map_err(err)?;
        self.inner.traits.write(&dir.join("traits.json")).map_err(err)
    }
}

/// TransResNet retrieval model bound to a corpus.
#[pyclass(module = "pypercap")]
struct RetrievalModel {
    corpus: SyntheticCorpus,
    vocab: percap::text::Vocabulary,
    model: TransResNet,
}

fn corpus_of(c: &Bound<'_, Corpus>) -> SyntheticCorpus {
    c.borrow().inner.clone()
}

#[pymethods]
impl RetrievalModel {
    #[new]
    #[pyo3(signature = (corpus, d_model = 32, joint_dim = 32, personality = true, encoder = "transformer", seed = 0))]
    fn new(corpus: &Bound<'_, Corpus>, d_model: usize, joint_dim: usize, personality: bool, encoder: &str, seed: u64) -> PyResult<Self> {
        let corpus = corpus_of(corpus);
        let vocab = build_vocab(&corpus.records, 1).map_err(err)?;
        let mut enc = TextEncoderConfig::small(d_model);
        enc.kind = match encoder {
            "transformer" => EncoderKind::Transformer,
            "bow" => EncoderKind::Bow,
            _ => return Err(PyValueError::new_err(format!("unknown encoder {encoder:?}"))),
        };
        let cfg = RetrievalConfig {
            feature_dim: corpus.features.dim(),
            joint_dim,
            image_layers: 2,
            num_traits: corpus.traits.len(),
            personality,
            encoder: enc,
        };
        let model = TransResNet::new(cfg, vocab.len(), seed).map_err(err)?;
        Ok(RetrievalModel { corpus, vocab, model })
    }

    /// Trains on the train split; returns the per-epoch mean losses.
    #[pyo3(signature = (epochs = 10, batch_size = 100, lr = 1e-3, seed = 0))]
    fn train(&mut self, py: Python<'_>, epochs: usize, batch_size: usize, lr: f64, seed: u64) -> PyResult<Vec<f64>> {
        let examples =
            build_examples(&self.corpus.records, Split::Train, &self.corpus.traits, &self.vocab, &self.model).map_err(err)?;
        let cfg = RetrievalTrainConfig {
            batch_size,
            epochs,
            optimizer: OptimizerConfig::adam(lr),
            seed,
            frozen_epochs: 0,
        };
        let (model, features) = (&mut self.model, &self.corpus.features);
        let log = py.detach(|| train_retrieval(model, &examples, features, &cfg)).map_err(err)?;
        Ok(log.epoch_losses)
    }

    /// R@1/5/10 and median rank on a split.
    #[pyo3(signature = (split = "test", num_candidates = 100, seed = 0))]
    fn evaluate<'py>(&self, py: Python<'py>, split: &str, num_candidates: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let examples =
            build_examples(&self.corpus.records, parse_split(split)?, &self.corpus.traits, &self.vocab, &self.model).map_err(err)?;
        let r = eval_recall(&self.model, &examples, &self.corpus.features, &EvalConfig { num_candidates, seed }).map_err(err)?;
        serde_to_py(py, &r)
    }
}

/// Personality-conditioned caption decoder bound to a corpus with grid features.
#[pyclass(module = "pypercap")]
struct CaptionModel {
    corpus: SyntheticCorpus,
    vocab: percap::text::Vocabulary,
    decoder: Decoder,
}

#[pymethods]
impl CaptionModel {
    /// `kind` is showtell, showatttell or updown.
    #[new]
    #[pyo3(signature = (corpus, kind = "updown", hidden_dim = 32, personality = true, seed = 0))]
    fn new(corpus: &Bound<'_, Corpus>, kind: &str, hidden_dim: usize, personality: bool, seed: u64) -> PyResult<Self> {
        let corpus = corpus_of(corpus);
        let vocab = build_vocab(&corpus.records, 1).map_err(err)?;
        let cfg = DecoderConfig {
            kind: kind.parse().map_err(err)?,
            feature_dim: corpus.features.dim(),
            embed_dim: hidden_dim,
            hidden_dim,
            att_dim: hidden_dim,
            vocab_size: vocab.len(),
            num_traits: corpus.traits.len(),
            personality,
            max_len: 16,
        };
        let decoder = Decoder::new(cfg, seed).map_err(err)?;
        Ok(CaptionModel { corpus, vocab, decoder })
    }

    /// Cross-entropy training; returns per-epoch mean per-token losses.
    #[pyo3(signature = (epochs = 10, batch_size = 50, lr = 2e-3, seed = 0))]
    fn train_xe(&mut self, py: Python<'_>, epochs: usize, batch_size: usize, lr: f64, seed: u64) -> PyResult<Vec<f64>> {
        let examples = build_gen_examples(&self.corpus.records, Split::Train, &self.corpus.traits, &self.vocab, self.decoder.config.max_len)
            .map_err(err)?;
        let cfg = XeConfig {
            batch_size,
            epochs,
            optimizer: OptimizerConfig::adam(lr),
            seed,
        };
        let (decoder, features) = (&mut self.decoder, &self.corpus.features);
        let log = py.detach(|| train_xe(decoder, &examples, features, &cfg)).map_err(err)?;
        Ok(log.epoch_losses)
    }

    /// Decodes one caption; returns (caption, log-probability).
    #[pyo3(signature = (image_id, personality, beam = 2))]
    fn caption(&self, image_id: String, personality: &str, beam: usize) -> PyResult<(String, f64)> {
        let t = self
            .corpus
            .traits
            .id(personality)
            .ok_or_else(|| PyValueError::new_err(format!("unknown personality {personality:?}")))?;
        let cfg = DecodeConfig {
            beam: beam.max(1),
            max_len: self.decoder.config.max_len,
            monotone: true,
        };
        let strategy = if beam <= 1 { Strategy::Greedy } else { Strategy::Beam };
        let d = generate(&self.decoder, &self.corpus.features, &[(image_id, t)], &cfg, strategy).map_err(err)?;
        Ok((self.vocab.decode(&d[0].tokens), d[0].log_prob))
    }

    /// Caption metrics of beam-decoded captions against a split's references.
    #[pyo3(signature = (split = "test", beam = 2))]
    fn evaluate<'py>(&self, py: Python<'py>, split: &str, beam: usize) -> PyResult<Bound<'py, PyAny>> {
        let split = parse_split(split)?;
        let refs = ReferenceCorpus::from_records(&self.corpus.records, split).map_err(err)?;
        let mut seen = HashSet::new();
        let mut queries = Vec::new();
        for r in self.corpus.records.iter().filter(|r| r.split == split) {
            if seen.insert(r.image_id.clone()) {
                queries.push((r.image_id.clone(), self.corpus.traits.id(&r.personality).unwrap_or(0)));
            }
        }
        let cfg = DecodeConfig {
            beam: beam.max(1),
            max_len: self.decoder.config.max_len,
            monotone: true,
        };
        let strategy = if beam <= 1 { Strategy::Greedy } else { Strategy::Beam };
        let decoded = generate(&self.decoder, &self.corpus.features, &queries, &cfg, strategy).map_err(err)?;
        let preds: Vec<(String, Vec<usize>)> = queries.into_iter().zip(decoded).map(|((id, _), d)| (id, d.tokens)).collect();
        let words: Vec<(String, Vec<String>)> = preds.into_iter().map(|(id, t)| (id, tok(&self.vocab.decode(&t)))).collect();
        serde_to_py(py, &evaluate(&words, &refs).map_err(err)?)
    }
}

#[pymodule]
fn pypercap(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_captions, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<TraitTable>()?;
    m.add_class::<Corpus>()?;
    m.add_class::<RetrievalModel>()?;
    m.add_class::<CaptionModel>()?;
    Ok(())
}
