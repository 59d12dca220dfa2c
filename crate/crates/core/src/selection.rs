//! Query strategies: random sampling, top-k uncertainty, stochastic batches
//! and core-set (k-center greedy).
//!
//! Ties always resolve towards the lowest sample id (string order) or the
//! lowest batch index, so every strategy is a deterministic function of its
//! inputs and rng stream.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayView1, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PoolState, SampleId};
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    Topk,
    StochasticBatch,
    Coreset,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Topk => "topk",
            Strategy::StochasticBatch => "stochastic_batch",
            Strategy::Coreset => "coreset",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Strategy::Random),
            "topk" => Ok(Strategy::Topk),
            "stochastic_batch" | "sb" => Ok(Strategy::StochasticBatch),
            "coreset" => Ok(Strategy::Coreset),
            other => Err(CoreError::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Disjoint batches from one random permutation of the unlabelled set.
    #[default]
    Partition,
    /// `Q` independent batches; an id may appear in several batches.
    Resample,
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMode::Partition => "partition",
            PoolMode::Resample => "resample",
        })
    }
}

impl FromStr for PoolMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "partition" => Ok(PoolMode::Partition),
            "resample" => Ok(PoolMode::Resample),
            other => Err(CoreError::Config(format!("unknown pool mode {other:?}"))),
        }
    }
}

/// Number of batches in the stochastic pool. `Auto` is `floor(|U| / B)` and
/// is only meaningful in partition mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PoolSize {
    #[default]
    Auto,
    Fixed(usize),
}

impl fmt::Display for PoolSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoolSize::Auto => f.write_str("auto"),
            PoolSize::Fixed(q) => write!(f, "{q}"),
        }
    }
}

impl FromStr for PoolSize {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(PoolSize::Auto);
        }
        s.parse().map(PoolSize::Fixed).map_err(|_| CoreError::Config(format!("Q must be an integer or \"auto\", got {s:?}")))
    }
}

impl Serialize for PoolSize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PoolSize::Auto => s.serialize_str("auto"),
            PoolSize::Fixed(q) => s.serialize_u64(*q as u64),
        }
    }
}

impl<'de> Deserialize<'de> for PoolSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(PoolSize::Fixed(n as usize)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    pub budget: usize,
    pub pool_mode: PoolMode,
    pub q: PoolSize,
    /// Seed of the selection stream for offline re-selection. The active
    /// learning loop derives its own stream from the experiment seed.
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { strategy: Strategy::Random, budget: 10, pool_mode: PoolMode::Partition, q: PoolSize::Auto, seed: 0 }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(CoreError::Config("selection: budget must be >= 1".into()));
        }
        match (self.pool_mode, self.q) {
            (_, PoolSize::Fixed(0)) => Err(CoreError::Config("selection: Q must be >= 1".into())),
            (PoolMode::Resample, PoolSize::Auto) => Err(CoreError::Config("selection: resample mode needs an explicit Q".into())),
            _ => Ok(()),
        }
    }
}

/// One selected batch. `batch_score` is `None` for strategies without a
/// batch score; `batch_index` is the winning position in a stochastic pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateBatch {
    pub sample_ids: Vec<SampleId>,
    pub batch_score: Option<f64>,
    pub batch_index: Option<usize>,
}

fn need(available: usize, needed: usize) -> Result<()> {
    if needed == 0 {
        return Err(CoreError::Invalid("budget must be >= 1".into()));
    }
    if available < needed {
        return Err(CoreError::InsufficientPool { needed, available });
    }
    Ok(())
}

/// `budget` unlabelled ids uniformly without replacement.
pub fn random_select<R: Rng + ?Sized>(pool: &PoolState, budget: usize, rng: &mut R) -> Result<CandidateBatch> {
    let ids: Vec<&SampleId> = pool.unlabelled.iter().collect();
    need(ids.len(), budget)?;
    let picked = index::sample(rng, ids.len(), budget).into_iter().map(|i| ids[i].clone()).collect();
    Ok(CandidateBatch { sample_ids: picked, batch_score: None, batch_index: None })
}

/// The `budget` highest scores, ties broken by ascending id.
pub fn topk_select(scores: &BTreeMap<SampleId, f64>, budget: usize) -> Result<CandidateBatch> {
    need(scores.len(), budget)?;
    let mut ranked: Vec<(&SampleId, f64)> = scores.iter().map(|(k, v)| (k, *v)).collect();
    // stable sort keeps id order among equal scores
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    let top = &ranked[..budget];
    let mean = top.iter().map(|t| t.1).sum::<f64>() / budget as f64;
    Ok(CandidateBatch { sample_ids: top.iter().map(|t| t.0.clone()).collect(), batch_score: Some(mean), batch_index: None })
}

/// Random candidate batches over the unlabelled ids (taken in id order, so the
/// result depends only on the set and the rng).
pub fn build_stochastic_pool<R: Rng + ?Sized>(
    unlabelled: &BTreeSet<SampleId>,
    budget: usize,
    mode: PoolMode,
    q: PoolSize,
    rng: &mut R,
) -> Result<Vec<Vec<SampleId>>> {
    if q == PoolSize::Fixed(0) {
        return Err(CoreError::Pool("Q must be >= 1".into()));
    }
    let ids: Vec<&SampleId> = unlabelled.iter().collect();
    need(ids.len(), budget)?;
    match mode {
        PoolMode::Partition => {
            let q_auto = ids.len() / budget;
            if let PoolSize::Fixed(q) = q {
                if q != q_auto {
                    return Err(CoreError::Pool(format!("partition mode fixes Q = floor({}/{budget}) = {q_auto}, got {q}", ids.len())));
                }
            }
            let mut order: Vec<usize> = (0..ids.len()).collect();
            order.shuffle(rng);
            Ok(order.chunks_exact(budget).map(|c| c.iter().map(|&i| ids[i].clone()).collect()).collect())
        }
        PoolMode::Resample => {
            let PoolSize::Fixed(q) = q else {
                return Err(CoreError::Pool("resample mode needs an explicit Q".into()));
            };
            Ok((0..q)
                .map(|_| index::sample(rng, ids.len(), budget).into_iter().map(|i| ids[i].clone()).collect())
                .collect())
        }
    }
}

/// Batch with the highest mean member score; ties go to the lowest batch index.
pub fn stochastic_batch_select(scores: &BTreeMap<SampleId, f64>, batches: &[Vec<SampleId>]) -> Result<CandidateBatch> {
    if batches.is_empty() {
        return Err(CoreError::Pool("stochastic pool is empty".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, batch) in batches.iter().enumerate() {
        if batch.is_empty() {
            return Err(CoreError::Pool(format!("batch {i} is empty")));
        }
        let mut sum = 0.0;
        for id in batch {
            sum += scores.get(id).ok_or_else(|| CoreError::MissingScore(id.clone()))?;
        }
        let mean = sum / batch.len() as f64;
        if best.map_or(true, |(_, b)| mean > b) {
            best = Some((i, mean));
        }
    }
    let (i, score) = best.expect("non-empty pool");
    Ok(CandidateBatch { sample_ids: batches[i].clone(), batch_score: Some(score), batch_index: Some(i) })
}

fn distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// k-center greedy: repeatedly picks the unlabelled point farthest from its
/// nearest covered point (labelled or already picked). Rows of `unlabelled`
/// belong to `unlabelled_ids`. With no labelled points the first pick is the
/// point farthest from the unlabelled centroid.
pub fn coreset_select(
    labelled: ArrayView2<f64>,
    unlabelled_ids: &[SampleId],
    unlabelled: ArrayView2<f64>,
    budget: usize,
) -> Result<CandidateBatch> {
    if unlabelled.nrows() != unlabelled_ids.len() {
        return Err(CoreError::Invalid("one feature row per unlabelled id required".into()));
    }
    if labelled.nrows() > 0 && labelled.ncols() != unlabelled.ncols() {
        return Err(CoreError::Invalid("labelled and unlabelled feature dimensions differ".into()));
    }
    need(unlabelled_ids.len(), budget)?;
    let n = unlabelled_ids.len();
    let mut min_dist = vec![f64::INFINITY; n];
    for (i, u) in unlabelled.outer_iter().enumerate() {
        for l in labelled.outer_iter() {
            min_dist[i] = min_dist[i].min(distance(u, l));
        }
    }
    if labelled.nrows() == 0 {
        let centroid = unlabelled.mean_axis(Axis(0)).expect("non-empty pool");
        for (i, u) in unlabelled.outer_iter().enumerate() {
            min_dist[i] = distance(u, centroid.view());
        }
    }
    let mut taken = vec![false; n];
    let mut picked = Vec::with_capacity(budget);
    for _ in 0..budget {
        let mut best: Option<usize> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            best = match best {
                None => Some(i),
                Some(b) if min_dist[i] > min_dist[b] || (min_dist[i] == min_dist[b] && unlabelled_ids[i] < unlabelled_ids[b]) => Some(i),
                keep => keep,
            };
        }
        let b = best.expect("budget <= pool size");
        taken[b] = true;
        picked.push(unlabelled_ids[b].clone());
        let centre = unlabelled.row(b);
        for (i, u) in unlabelled.outer_iter().enumerate() {
            min_dist[i] = min_dist[i].min(distance(u, centre));
        }
    }
    Ok(CandidateBatch { sample_ids: picked, batch_score: None, batch_index: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scores(pairs: &[(&str, f64)]) -> BTreeMap<SampleId, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn ids(v: &[&str]) -> Vec<SampleId> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn topk_picks_highest_with_id_ties() {
        let s = scores(&[("a", 0.9), ("b", 0.7), ("c", 0.2), ("d", 0.1)]);
        assert_eq!(topk_select(&s, 2).unwrap().sample_ids, ids(&["a", "b"]));
        assert_eq!(topk_select(&s, 1).unwrap().sample_ids, ids(&["a"]));
        let flat = scores(&[("d", 1.0), ("b", 1.0), ("c", 1.0), ("a", 1.0)]);
        assert_eq!(topk_select(&flat, 3).unwrap().sample_ids, ids(&["a", "b", "c"]));
        assert!(matches!(topk_select(&s, 5), Err(CoreError::InsufficientPool { needed: 5, available: 4 })));
    }

    #[test]
    fn stochastic_batch_hand_example() {
        let s = scores(&[("a", 0.9), ("b", 0.7), ("c", 0.2), ("d", 0.1)]);
        let r = stochastic_batch_select(&s, &[ids(&["a", "c"]), ids(&["b", "d"])]).unwrap();
        assert_eq!(r.sample_ids, ids(&["a", "c"]));
        assert!((r.batch_score.unwrap() - 0.55).abs() < 1e-12);
        assert_eq!(r.batch_index, Some(0));
        let tie = stochastic_batch_select(&s, &[ids(&["a", "d"]), ids(&["b", "c"]), ids(&["a", "d"])]).unwrap();
        assert_eq!(tie.batch_index, Some(0));
        assert!(matches!(stochastic_batch_select(&s, &[ids(&["a", "z"])]), Err(CoreError::MissingScore(id)) if id == "z"));
    }

    #[test]
    fn all_pairs_pool_matches_topk() {
        let s = scores(&[("a", 0.9), ("b", 0.7), ("c", 0.2), ("d", 0.1)]);
        let names = ["a", "b", "c", "d"];
        let mut pool = Vec::new();
        for i in 0..4 {
            for j in i + 1..4 {
                pool.push(ids(&[names[i], names[j]]));
            }
        }
        let sb = stochastic_batch_select(&s, &pool).unwrap();
        assert_eq!(sb.sample_ids, topk_select(&s, 2).unwrap().sample_ids);
    }

    #[test]
    fn partition_pool_uses_floor_and_is_disjoint() {
        let u: BTreeSet<SampleId> = (0..25).map(|i| format!("s{i:02}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pool = build_stochastic_pool(&u, 10, PoolMode::Partition, PoolSize::Auto, &mut rng).unwrap();
        assert_eq!(pool.len(), 2);
        let flat: BTreeSet<&SampleId> = pool.iter().flatten().collect();
        assert_eq!(flat.len(), 20);
        assert!(build_stochastic_pool(&u, 10, PoolMode::Partition, PoolSize::Fixed(3), &mut rng).is_err());
        assert!(build_stochastic_pool(&u, 10, PoolMode::Resample, PoolSize::Fixed(0), &mut rng).is_err());
        assert!(build_stochastic_pool(&u, 10, PoolMode::Resample, PoolSize::Auto, &mut rng).is_err());
    }

    #[test]
    fn resample_pool_has_q_batches_without_inner_repeats() {
        let u: BTreeSet<SampleId> = (0..30).map(|i| format!("s{i:02}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool = build_stochastic_pool(&u, 15, PoolMode::Resample, PoolSize::Fixed(100), &mut rng).unwrap();
        assert_eq!(pool.len(), 100);
        for b in &pool {
            assert_eq!(b.iter().collect::<BTreeSet<_>>().len(), 15);
        }
        let total: BTreeSet<&SampleId> = pool.iter().flatten().collect();
        assert!(total.len() < 100 * 15);
    }

    #[test]
    fn coreset_hand_example() {
        let l = array![[0.0]];
        let u = array![[1.0], [5.0], [6.0]];
        let names = ids(&["p1", "p5", "p6"]);
        assert_eq!(coreset_select(l.view(), &names, u.view(), 1).unwrap().sample_ids, ids(&["p6"]));
        // after 6, points 1 and 5 are both at distance 1: lowest id wins
        assert_eq!(coreset_select(l.view(), &names, u.view(), 2).unwrap().sample_ids, ids(&["p6", "p1"]));
        let same = array![[2.0, 2.0], [2.0, 2.0], [2.0, 2.0]];
        let r = coreset_select(same.view(), &ids(&["c", "a", "b"]), same.view(), 2).unwrap();
        assert_eq!(r.sample_ids, ids(&["a", "b"]));
        // empty labelled set starts from the point farthest from the centroid
        let none = ndarray::Array2::<f64>::zeros((0, 1));
        assert_eq!(coreset_select(none.view(), &names, u.view(), 1).unwrap().sample_ids, ids(&["p1"]));
    }

    #[test]
    fn random_select_bounds() {
        let pool = PoolState { labelled: BTreeSet::new(), unlabelled: (0..5).map(|i| i.to_string()).collect(), cycle: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all = random_select(&pool, 5, &mut rng).unwrap();
        assert_eq!(all.sample_ids.iter().collect::<BTreeSet<_>>().len(), 5);
        assert!(random_select(&pool, 6, &mut rng).is_err());
        let a = random_select(&pool, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_select(&pool, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
