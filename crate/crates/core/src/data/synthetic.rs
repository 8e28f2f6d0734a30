//! Seeded synthetic corpora.
//!
//! Every image has a concept and (optionally) an attribute; its feature is
//! the concept centroid plus an attribute offset plus Gaussian noise. A
//! caption names the attribute and concept (through one of the concept's
//! synonyms) and carries words from the trait's private lexicon, so
//! captions are separable by image content and by trait.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::features::FeatureStore;
use super::records::{validate_records, CaptionRecord, Split};
use crate::error::{Error, Result};
use crate::text::{DialoguePair, WordVectors};
use crate::traits::TraitTable;

const NOUNS: &[&str] = &[
    "dog", "cat", "horse", "bird", "boat", "car", "tree", "house", "bridge", "beach", "mountain", "river", "cake", "pizza",
    "guitar", "train", "flower", "clock", "chair", "kite", "lamp", "window", "garden", "street", "tower", "forest",
    "bicycle", "church", "market", "castle",
];
const ATTRIBUTES: &[&str] = &[
    "red", "blue", "green", "yellow", "black", "white", "brown", "grey", "orange", "purple", "tiny", "huge",
];
const FILLERS: &[&str] = &["today", "here", "again", "now", "outside", "indeed", "there", "too"];
const CHAT: &[&str] = &["i", "think", "you", "saw", "really", "like", "that", "a", "so", "yes"];

pub const GRID_SIDE: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// Training images; each gets one caption.
    pub num_train: usize,
    pub num_valid: usize,
    pub num_test: usize,
    pub feature_dim: usize,
    /// 7×7×D grid features instead of D vectors.
    pub grid: bool,
    pub num_concepts: usize,
    /// 0 disables the attribute word.
    pub num_attributes: usize,
    pub num_traits: usize,
    pub captions_per_test_image: usize,
    /// Words in each trait's lexicon.
    pub lexicon_size: usize,
    /// Lexicon words per caption.
    pub trait_words: usize,
    /// Filler vocabulary size; 0 drops the filler slot.
    pub fillers: usize,
    pub noise: f64,
    pub synonyms_per_concept: usize,
    /// Training captions use the first half of each concept's synonyms,
    /// valid/test captions the second half.
    pub heldout_synonyms: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            num_train: 1000,
            num_valid: 50,
            num_test: 100,
            feature_dim: 64,
            grid: false,
            num_concepts: 20,
            num_attributes: 8,
            num_traits: 20,
            captions_per_test_image: 5,
            lexicon_size: 4,
            trait_words: 2,
            fillers: 6,
            noise: 0.3,
            synonyms_per_concept: 1,
            heldout_synonyms: false,
        }
    }
}

impl SyntheticSpec {
    /// Few concepts and no attributes: many distractors share the image
    /// content and differ only in trait, so conditioning on the trait matters.
    pub fn trait_dependent() -> Self {
        SyntheticSpec {
            num_concepts: 4,
            num_attributes: 0,
            ..Default::default()
        }
    }

    /// Test captions name concepts only through synonyms never seen in
    /// training; transfer has to come from pretraining.
    pub fn synonym_shift() -> Self {
        SyntheticSpec {
            num_attributes: 0,
            num_traits: 5,
            synonyms_per_concept: 4,
            heldout_synonyms: true,
            ..Default::default()
        }
    }

    /// Low-entropy grid corpus for the generative decoders.
    pub fn generative() -> Self {
        SyntheticSpec {
            num_train: 400,
            num_valid: 20,
            num_test: 40,
            feature_dim: 16,
            grid: true,
            num_concepts: 8,
            num_attributes: 3,
            num_traits: 6,
            captions_per_test_image: 2,
            lexicon_size: 1,
            trait_words: 1,
            fillers: 2,
            noise: 0.2,
            ..Default::default()
        }
    }

    pub fn validate(&self, table_size: usize) -> Result<()> {
        let mut p = Vec::new();
        if self.num_traits == 0 || self.num_traits > table_size {
            p.push(format!("num_traits must be in 1..={table_size}"));
        }
        if self.captions_per_test_image == 0 {
            p.push("captions_per_test_image must be >= 1".into());
        }
        if self.num_concepts == 0 || self.feature_dim == 0 {
            p.push("num_concepts and feature_dim must be positive".into());
        }
        if self.lexicon_size == 0 || self.trait_words == 0 {
            p.push("each trait needs a nonempty lexicon and at least one lexicon word per caption".into());
        }
        if self.fillers > FILLERS.len() {
            p.push(format!("at most {} fillers", FILLERS.len()));
        }
        if self.num_attributes > ATTRIBUTES.len() {
            p.push(format!("at most {} attributes", ATTRIBUTES.len()));
        }
        if self.synonyms_per_concept == 0 || (self.heldout_synonyms && self.synonyms_per_concept < 2) {
            p.push("held-out synonyms need at least 2 synonyms per concept".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            p.push("noise must be a finite non-negative number".into());
        }
        let variants = self.lexicon_size.pow(self.trait_words as u32)
            * self.fillers.max(1)
            * self.test_synonyms().len().max(1);
        if variants < self.captions_per_test_image {
            p.push(format!(
                "lexicon too small: {variants} distinct captions per (image, trait) but {} references requested",
                self.captions_per_test_image
            ));
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    fn train_synonyms(&self) -> std::ops::Range<usize> {
        if self.heldout_synonyms {
            0..self.synonyms_per_concept.div_ceil(2)
        } else {
            0..self.synonyms_per_concept
        }
    }

    fn test_synonyms(&self) -> std::ops::Range<usize> {
        if self.heldout_synonyms {
            self.synonyms_per_concept.div_ceil(2)..self.synonyms_per_concept
        } else {
            0..self.synonyms_per_concept
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub image_id: String,
    pub split: Split,
    pub concept: usize,
    pub attribute: Option<usize>,
    /// Trait id in the corpus trait table.
    pub trait_id: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub features: FeatureStore,
    pub records: Vec<CaptionRecord>,
    pub traits: TraitTable,
    pub images: Vec<ImageInfo>,
}

/// The fixed lexicons and centroids behind a spec.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub spec: SyntheticSpec,
    pub traits: TraitTable,
    /// concept → synonyms
    pub concepts: Vec<Vec<String>>,
    pub attributes: Vec<String>,
    pub lexicons: Vec<Vec<String>>,
    pub fillers: Vec<String>,
    pub centroids: Vec<Vec<f64>>,
    pub offsets: Vec<Vec<f64>>,
}

fn concept_word(c: usize, s: usize) -> String {
    let base = match NOUNS.get(c) {
        Some(n) => n.to_string(),
        None => format!("thing{c}"),
    };
    if s == 0 {
        base
    } else {
        format!("{base}-{s}")
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let d = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| d.sample(rng)).collect()
}

impl SyntheticWorld {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        let base = TraitTable::default_table();
        spec.validate(base.len())?;
        let traits = base.stratified_subset(spec.num_traits)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let concepts = (0..spec.num_concepts)
            .map(|c| (0..spec.synonyms_per_concept).map(|s| concept_word(c, s)).collect())
            .collect();
        let lexicons = traits
            .traits()
            .iter()
            .map(|t| (0..spec.lexicon_size).map(|k| format!("{}{k}", t.name)).collect())
            .collect();
        let d = spec.feature_dim;
        let centroids = (0..spec.num_concepts).map(|_| gaussian(&mut rng, d, 1.0)).collect();
        let offsets = (0..spec.num_attributes).map(|_| gaussian(&mut rng, d, 0.5)).collect();
        Ok(SyntheticWorld {
            attributes: ATTRIBUTES[..spec.num_attributes].iter().map(|s| s.to_string()).collect(),
            fillers: FILLERS[..spec.fillers].iter().map(|s| s.to_string()).collect(),
            spec,
            traits,
            concepts,
            lexicons,
            centroids,
            offsets,
        })
    }

    fn caption(&self, rng: &mut ChaCha8Rng, info: &ImageInfo, synonyms: std::ops::Range<usize>) -> String {
        let lex = &self.lexicons[info.trait_id];
        let mut words: Vec<&str> = Vec::new();
        words.push(lex.choose(rng).unwrap());
        words.push("the");
        if let Some(a) = info.attribute {
            words.push(&self.attributes[a]);
        }
        let s = rng.random_range(synonyms);
        words.push(&self.concepts[info.concept][s]);
        if !self.fillers.is_empty() {
            words.push(self.fillers.choose(rng).unwrap());
        }
        for _ in 1..self.spec.trait_words {
            words.push(lex.choose(rng).unwrap());
        }
        words.join(" ")
    }

    fn feature(&self, rng: &mut ChaCha8Rng, info: &ImageInfo) -> Vec<f32> {
        let d = self.spec.feature_dim;
        let content = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let noise = gaussian(rng, d, self.spec.noise);
            (0..d)
                .map(|j| {
                    self.centroids[info.concept][j] + info.attribute.map_or(0.0, |a| self.offsets[a][j]) + noise[j]
                })
                .collect()
        };
        if !self.spec.grid {
            return content(rng).into_iter().map(|x| x as f32).collect();
        }
        // The object fills a random 3×3 block; other cells are background noise.
        let (r0, c0) = (rng.random_range(0..=GRID_SIDE - 3), rng.random_range(0..=GRID_SIDE - 3));
        let mut out = Vec::with_capacity(GRID_SIDE * GRID_SIDE * d);
        for r in 0..GRID_SIDE {
            for c in 0..GRID_SIDE {
                let inside = (r0..r0 + 3).contains(&r) && (c0..c0 + 3).contains(&c);
                let cell = if inside { content(rng) } else { gaussian(rng, d, 0.5) };
                out.extend(cell.into_iter().map(|x| x as f32));
            }
        }
        out
    }

    pub fn corpus(&self) -> Result<SyntheticCorpus> {
        let spec = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x9e37_79b9));
        let shape = if spec.grid {
            vec![GRID_SIDE, GRID_SIDE, spec.feature_dim]
        } else {
            vec![spec.feature_dim]
        };
        let mut features = FeatureStore::new(&shape)?;
        let mut records = Vec::new();
        let mut images = Vec::new();
        for (split, count) in [(Split::Train, spec.num_train), (Split::Valid, spec.num_valid), (Split::Test, spec.num_test)] {
            let width = count.max(1).to_string().len();
            for i in 0..count {
                let info = ImageInfo {
                    image_id: format!("{split}_{i:0width$}"),
                    split,
                    concept: rng.random_range(0..spec.num_concepts),
                    attribute: (spec.num_attributes > 0).then(|| rng.random_range(0..spec.num_attributes)),
                    trait_id: rng.random_range(0..spec.num_traits),
                };
                features.insert(info.image_id.clone(), self.feature(&mut rng, &info))?;
                let (n, synonyms) = match split {
                    Split::Train => (1, spec.train_synonyms()),
                    _ => (spec.captions_per_test_image, spec.test_synonyms()),
                };
                let mut seen = HashSet::new();
                while seen.len() < n {
                    let caption = self.caption(&mut rng, &info, synonyms.clone());
                    if seen.insert(caption.clone()) {
                        records.push(CaptionRecord {
                            image_id: info.image_id.clone(),
                            personality: self.traits.name(info.trait_id).to_string(),
                            caption,
                            split,
                        });
                    }
                }
                images.push(info);
            }
        }
        validate_records(&records, &self.traits, Some(&features))?;
        Ok(SyntheticCorpus {
            features,
            records,
            traits: self.traits.clone(),
            images,
        })
    }

    /// Dialogue turns that mention the same concept through independently
    /// chosen synonyms (held-out ones included).
    pub fn dialogue_pairs(&self, n: usize, seed: u64) -> Vec<DialoguePair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let c = rng.random_range(0..self.spec.num_concepts);
                let syn = &self.concepts[c];
                let a = syn.choose(&mut rng).unwrap();
                let b = syn.choose(&mut rng).unwrap();
                let chat = |rng: &mut ChaCha8Rng| *CHAT.choose(rng).unwrap();
                DialoguePair {
                    context: format!("{} {} {a} {}", chat(&mut rng), chat(&mut rng), chat(&mut rng)),
                    response: format!("{} {b} {}", chat(&mut rng), chat(&mut rng)),
                }
            })
            .collect()
    }

    /// Word vectors in which a concept's synonyms lie close together; every
    /// other corpus word gets an unrelated random vector.
    pub fn word_vectors(&self, dim: usize, seed: u64) -> WordVectors {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut wv = WordVectors {
            dim,
            ..Default::default()
        };
        for syn in &self.concepts {
            let dir = gaussian(&mut rng, dim, 0.1);
            for w in syn {
                let jitter = gaussian(&mut rng, dim, 0.02);
                wv.vectors.insert(w.clone(), dir.iter().zip(jitter).map(|(a, b)| a + b).collect());
            }
        }
        let others = self
            .attributes
            .iter()
            .chain(self.fillers.iter())
            .chain(self.lexicons.iter().flatten())
            .cloned()
            .chain(["the".to_string()])
            .chain(CHAT.iter().map(|s| s.to_string()));
        for w in others {
            if !wv.vectors.contains_key(&w) {
                let v = gaussian(&mut rng, dim, 0.1);
                wv.vectors.insert(w, v);
            }
        }
        wv
    }

    /// Concept whose centroid (plus the nearest attribute offset) is closest
    /// to `feature`; for grids, the closest over all cells.
    pub fn nearest_concept(&self, feature: &[f32]) -> usize {
        let d = self.spec.feature_dim;
        let zero = vec![0.0; d];
        let offsets: Vec<&Vec<f64>> = if self.offsets.is_empty() {
            vec![&zero]
        } else {
            self.offsets.iter().collect()
        };
        let mut best = (f64::INFINITY, 0);
        for cell in feature.chunks_exact(d) {
            for (c, centroid) in self.centroids.iter().enumerate() {
                for off in &offsets {
                    let dist: f64 = (0..d).map(|j| (cell[j] as f64 - centroid[j] - off[j]).powi(2)).sum();
                    if dist < best.0 {
                        best = (dist, c);
                    }
                }
            }
        }
        best.1
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    SyntheticWorld::new(spec.clone())?.corpus()
}
