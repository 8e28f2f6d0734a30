use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_TABLE: &str = include_str!("../../data/traits_default.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Neutral,
    Negative,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Neutral, Polarity::Negative];
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Polarity::Positive => "positive",
            Polarity::Neutral => "neutral",
            Polarity::Negative => "negative",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trait {
    pub name: String,
    pub polarity: Polarity,
}

/// Personality traits with dense ids (array position) and polarity classes.
#[derive(Debug, Clone, PartialEq)]
pub struct TraitTable {
    traits: Vec<Trait>,
    index: HashMap<String, usize>,
}

impl TraitTable {
    pub fn new(traits: Vec<Trait>) -> Result<Self> {
        let mut index = HashMap::with_capacity(traits.len());
        let mut problems = Vec::new();
        for (i, t) in traits.iter().enumerate() {
            if t.name.trim().is_empty() {
                problems.push(format!("trait {i}: empty name"));
            } else if index.insert(t.name.clone(), i).is_some() {
                problems.push(format!("trait {i}: duplicate name {:?}", t.name));
            }
        }
        if traits.is_empty() {
            problems.push("trait table is empty".into());
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(TraitTable { traits, index })
    }

    /// The bundled 215-entry table (81 positive, 36 neutral, 98 negative).
    /// Names are illustrative, not the original annotation list.
    pub fn default_table() -> Self {
        Self::from_json(DEFAULT_TABLE).expect("bundled trait table is valid")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::new(serde_json::from_str(s)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let traits: Vec<Trait> = serde_json::from_str(&s).map_err(|e| Error::FormatLine {
            path: path.display().to_string(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        Self::new(traits)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(&self.traits)?;
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.traits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traits.is_empty()
    }

    pub fn traits(&self) -> &[Trait] {
        &self.traits
    }

    pub fn get(&self, id: usize) -> Option<&Trait> {
        self.traits.get(id)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.traits[id].name
    }

    pub fn polarity(&self, id: usize) -> Polarity {
        self.traits[id].polarity
    }

    pub fn class_size(&self, p: Polarity) -> usize {
        self.traits.iter().filter(|t| t.polarity == p).count()
    }

    /// First `n` traits taken round-robin across polarity classes, so small
    /// tables still contain every class.
    pub fn stratified_subset(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::Config(format!("cannot take {n} traits from a table of {}", self.len())));
        }
        let mut by_class: Vec<std::collections::VecDeque<&Trait>> = Polarity::ALL
            .iter()
            .map(|p| self.traits.iter().filter(|t| t.polarity == *p).collect())
            .collect();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            for q in by_class.iter_mut() {
                if out.len() < n {
                    if let Some(t) = q.pop_front() {
                        out.push(t.clone());
                    }
                }
            }
        }
        Self::new(out)
    }
}
