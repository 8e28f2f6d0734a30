#![allow(dead_code)]

use indexmap::IndexMap;
use percap::metrics::{evaluate_captions, MetricReport, ReferenceCorpus};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
pub struct Expected {
    pub bleu: Vec<f64>,
    pub rouge_l: f64,
    pub cider: f64,
    pub per_image: IndexMap<String, PerImage>,
}

#[derive(Debug, Deserialize)]
pub struct PerImage {
    pub rouge_l: f64,
    pub cider: f64,
}

#[derive(Debug, Deserialize)]
pub struct MetricCase {
    pub name: String,
    pub references: IndexMap<String, Vec<String>>,
    pub predictions: IndexMap<String, String>,
    pub expected: Expected,
}

pub fn split(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

pub fn metric_cases() -> Vec<MetricCase> {
    include_str!("../fixtures/metric_cases.jsonl")
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("fixture line"))
        .collect()
}

impl MetricCase {
    pub fn corpus(&self) -> ReferenceCorpus {
        ReferenceCorpus::new(
            self.references
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|r| split(r)).collect()))
                .collect(),
        )
        .unwrap()
    }

    pub fn predictions(&self) -> Vec<(String, Vec<String>)> {
        self.predictions.iter().map(|(k, v)| (k.clone(), split(v))).collect()
    }

    pub fn report(&self) -> MetricReport {
        evaluate_captions(&self.predictions(), &self.corpus()).unwrap()
    }

    /// Largest absolute deviation from the oracle over every reported number.
    pub fn max_error(&self) -> f64 {
        let r = self.report();
        let e = &self.expected;
        let mut worst: f64 = 0.0;
        for (a, b) in [r.bleu1, r.bleu2, r.bleu3, r.bleu4].iter().zip(&e.bleu) {
            worst = worst.max((a - b).abs());
        }
        worst = worst.max((r.rouge_l - e.rouge_l).abs()).max((r.cider - e.cider).abs());
        for s in &r.per_image {
            let p = &e.per_image[&s.image_id];
            worst = worst.max((s.rouge_l - p.rouge_l).abs()).max((s.cider - p.cider).abs());
        }
        worst
    }
}
