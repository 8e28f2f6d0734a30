use indexmap::IndexMap;
use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{stack_features, TransResNet};
use super::train::RetrievalExample;
use crate::data::FeatureStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Candidates per query, true labels included.
    pub num_candidates: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            num_candidates: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRank {
    pub image_id: String,
    /// 1-based rank of the best-ranked true label.
    pub rank: usize,
    pub num_candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub median_rank: f64,
    pub queries: Vec<QueryRank>,
}

impl RankingResult {
    pub fn from_ranks(queries: Vec<QueryRank>) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::Evaluation("no queries to aggregate".into()));
        }
        let n = queries.len() as f64;
        let at = |k: usize| queries.iter().filter(|q| q.rank <= k).count() as f64 / n;
        let mut ranks: Vec<usize> = queries.iter().map(|q| q.rank).collect();
        ranks.sort_unstable();
        let m = ranks.len();
        let median_rank = if m % 2 == 1 {
            ranks[m / 2] as f64
        } else {
            (ranks[m / 2 - 1] + ranks[m / 2]) as f64 / 2.0
        };
        Ok(RankingResult {
            r_at_1: at(1),
            r_at_5: at(5),
            r_at_10: at(10),
            median_rank,
            queries,
        })
    }
}

/// Orders candidates by descending `query · candidate`, ties by candidate
/// index. Returns the order, the matching scores, and the 1-based rank of
/// the first true label.
pub fn rank_candidates(query: &[f64], candidates: &Tensor, is_true: &[bool]) -> Result<(Vec<usize>, Vec<f64>, usize)> {
    let n = candidates.rows();
    if n == 0 {
        return Err(Error::Evaluation("empty candidate set".into()));
    }
    if is_true.len() != n || candidates.cols() != query.len() {
        return Err(Error::Contract("candidate, label and query sizes disagree".into()));
    }
    let scores: Vec<f64> = (0..n)
        .map(|i| candidates.row(i).iter().zip(query).map(|(a, b)| a * b).sum())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let rank = order
        .iter()
        .position(|&i| is_true[i])
        .ok_or_else(|| Error::Evaluation("no true label among the candidates".into()))?
        + 1;
    let sorted = order.iter().map(|&i| scores[i]).collect();
    Ok((order, sorted, rank))
}

/// One query per test image (its features and trait); the image's own
/// captions are the true labels and distractors are drawn uniformly from
/// the other images' captions.
pub fn eval_recall(
    model: &TransResNet,
    examples: &[RetrievalExample],
    features: &FeatureStore,
    config: &EvalConfig,
) -> Result<RankingResult> {
    let mut groups: IndexMap<&str, Vec<usize>> = IndexMap::new();
    for (i, e) in examples.iter().enumerate() {
        groups.entry(e.image_id.as_str()).or_default().push(i);
    }
    if groups.is_empty() {
        return Err(Error::Evaluation("no test examples".into()));
    }
    let captions: Vec<Vec<usize>> = examples.iter().map(|e| e.caption.clone()).collect();
    let cand_vecs = model.embed_captions(&captions)?;
    let ids: Vec<&str> = groups.keys().copied().collect();
    let traits: Vec<usize> = groups.values().map(|v| examples[v[0]].trait_id).collect();
    let queries = model.embed_queries(stack_features(features, &ids)?, &traits)?;

    let max_t = groups.values().map(Vec::len).max().unwrap_or(1);
    let wanted = config.num_candidates.max(max_t);
    let smallest_pool = groups.values().map(|v| examples.len() - v.len()).min().unwrap_or(0);
    if wanted - 1 > smallest_pool {
        log::warn!(
            "{} candidates requested but only {} distractors are available for some queries; shrinking",
            config.num_candidates,
            smallest_pool
        );
    }
    let groups: Vec<(&str, Vec<usize>)> = groups.into_iter().collect();
    let ranks: Vec<QueryRank> = groups
        .par_iter()
        .enumerate()
        .map(|(q, (image_id, trues))| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (q as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let pool: Vec<usize> = (0..examples.len()).filter(|i| !trues.contains(i)).collect();
            let k = wanted.saturating_sub(trues.len()).min(pool.len());
            let mut cands: Vec<usize> = trues.clone();
            cands.extend(sample(&mut rng, pool.len(), k).into_iter().map(|j| pool[j]));
            cands.shuffle(&mut rng);
            let is_true: Vec<bool> = cands.iter().map(|c| trues.contains(c)).collect();
            let d = cand_vecs.cols();
            let mut data = Vec::with_capacity(cands.len() * d);
            for &c in &cands {
                data.extend_from_slice(cand_vecs.row(c));
            }
            let mat = Tensor::new(&[cands.len(), d], data)?;
            let (_, _, rank) = rank_candidates(queries.row(q), &mat, &is_true)?;
            Ok(QueryRank {
                image_id: image_id.to_string(),
                rank,
                num_candidates: cands.len(),
            })
        })
        .collect::<Result<_>>()?;
    RankingResult::from_ranks(ranks)
}

/// Best caption from `pool` for each (image, trait) query: (pool index, score).
pub fn predict_top1(
    model: &TransResNet,
    features: &FeatureStore,
    queries: &[(&str, usize)],
    pool: &[Vec<usize>],
) -> Result<Vec<(usize, f64)>> {
    if pool.is_empty() {
        return Err(Error::Evaluation("empty candidate pool".into()));
    }
    let cand = model.embed_captions(pool)?;
    let ids: Vec<&str> = queries.iter().map(|q| q.0).collect();
    let traits: Vec<usize> = queries.iter().map(|q| q.1).collect();
    let qv = model.embed_queries(stack_features(features, &ids)?, &traits)?;
    let none = vec![true; pool.len()];
    (0..queries.len())
        .map(|i| {
            let (order, scores, _) = rank_candidates(qv.row(i), &cand, &none)?;
            Ok((order[0], scores[0]))
        })
        .collect()
}
