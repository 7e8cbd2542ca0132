//! Positive-unlabeled dataset construction: similarity scale, likely
//! negative selection, oversampling and stratified splits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    /// `1 - cos`; a zero vector is at distance 1 from everything.
    Cosine,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Metric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    (1.0 - dot / (na * nb)).max(0.0)
                }
            }
        }
    }
}

/// Unknown samples ranked by distance to their nearest positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScale {
    pub unknown_ids: Vec<usize>,
    /// Distance of `unknown_ids[i]` to the positive set.
    pub distance: Vec<f64>,
    /// Indices into `unknown_ids`, most similar first; ties by id.
    pub order: Vec<usize>,
}

impl SimilarityScale {
    /// Rank (0 = most similar) of each entry of `unknown_ids`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![0; self.order.len()];
        for (rank, &i) in self.order.iter().enumerate() {
            r[i] = rank;
        }
        r
    }

    pub fn len(&self) -> usize {
        self.unknown_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unknown_ids.is_empty()
    }
}

/// Distances from each unknown (rows of `unknown`, `dim` wide) to the
/// nearest row of `positives`.
pub fn similarity_scale(unknown_ids: &[usize], unknown: &[f64], positives: &[f64], dim: usize, metric: Metric) -> Result<SimilarityScale> {
    if dim == 0 || unknown.len() != unknown_ids.len() * dim || positives.len() % dim != 0 {
        return Err(Error::Shape("feature matrices do not match the declared dimension".into()));
    }
    if positives.is_empty() {
        return Err(Error::Contract("similarity scale needs at least one positive".into()));
    }
    let distance: Vec<f64> = unknown
        .par_chunks(dim)
        .map(|u| {
            positives
                .chunks(dim)
                .map(|p| metric.distance(u, p))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut order: Vec<usize> = (0..unknown_ids.len()).collect();
    order.sort_by(|&a, &b| distance[a].total_cmp(&distance[b]).then(unknown_ids[a].cmp(&unknown_ids[b])));
    Ok(SimilarityScale {
        unknown_ids: unknown_ids.to_vec(),
        distance,
        order,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeCount {
    #[default]
    MatchPositives,
    Count(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Fraction of unknowns, most similar first, never drawn as negatives.
    pub filter_range: f64,
    pub n_negatives: NegativeCount,
    pub metric: Metric,
    pub oversample: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            filter_range: 0.10,
            n_negatives: NegativeCount::MatchPositives,
            metric: Metric::Euclidean,
            oversample: true,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.filter_range) {
            return Err(Error::Config(format!("filter range {} outside [0, 1)", self.filter_range)));
        }
        Ok(())
    }
}

/// `⌈f · n⌉`, immune to representation error such as `0.1 * 30 = 3.0000000000000004`.
pub fn filtered_count(filter_range: f64, n: usize) -> usize {
    ((filter_range * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Drops the most similar `⌈filter_range · |U|⌉` unknowns, then draws the
/// negatives uniformly without replacement from the rest. Returns ids.
pub fn select_negatives(scale: &SimilarityScale, cfg: &SamplingConfig, n_positives: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    cfg.validate()?;
    let cut = filtered_count(cfg.filter_range, scale.len());
    let eligible = &scale.order[cut.min(scale.len())..];
    let want = match cfg.n_negatives {
        NegativeCount::MatchPositives => n_positives,
        NegativeCount::Count(k) => k,
    };
    if eligible.len() < want {
        return Err(Error::PoolExhausted {
            available: eligible.len(),
            requested: want,
        });
    }
    Ok(rng
        .choose_distinct(eligible.len(), want)
        .into_iter()
        .map(|i| scale.unknown_ids[eligible[i]])
        .collect())
}

/// Equal-size positive and negative id lists. The minority side repeats
/// every original `⌊M / m⌋` times and a distinct random subset once more to
/// fill the remainder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Balanced {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl Balanced {
    /// `(id, label)` pairs, positives first.
    pub fn labeled(&self) -> Vec<(usize, bool)> {
        self.positives
            .iter()
            .map(|&i| (i, true))
            .chain(self.negatives.iter().map(|&i| (i, false)))
            .collect()
    }
}

fn grow(ids: &[usize], target: usize, rng: &mut RngStream) -> Vec<usize> {
    let reps = target / ids.len();
    let rem = target % ids.len();
    let mut out: Vec<usize> = (0..reps).flat_map(|_| ids.iter().copied()).collect();
    out.extend(rng.choose_distinct(ids.len(), rem).into_iter().map(|i| ids[i]));
    out
}

pub fn balance_oversample(pos: &[usize], neg: &[usize], rng: &mut RngStream) -> Result<Balanced> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Contract("oversampling needs both classes".into()));
    }
    let (positives, negatives) = match pos.len().cmp(&neg.len()) {
        std::cmp::Ordering::Less => (grow(pos, neg.len(), rng), neg.to_vec()),
        std::cmp::Ordering::Greater => (pos.to_vec(), grow(neg, pos.len(), rng)),
        std::cmp::Ordering::Equal => (pos.to_vec(), neg.to_vec()),
    };
    Ok(Balanced { positives, negatives })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<(usize, bool)>,
    pub val: Vec<(usize, bool)>,
    pub test: Vec<(usize, bool)>,
}

/// Stratified 80/10/10 partition of labeled `(id, label)` items. A class
/// with fewer than 3 members stays whole in train.
pub fn split_80_10_10(items: &[(usize, bool)], seed: u64) -> Result<Split> {
    if items.len() < 10 {
        return Err(Error::Contract(format!("need at least 10 labeled samples, got {}", items.len())));
    }
    let root = RngStream::from_seed(seed).derive("split");
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for class in [true, false] {
        let mut members: Vec<(usize, bool)> = items.iter().copied().filter(|&(_, y)| y == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 3 {
            log::warn!(
                "class {} has only {} members; kept whole in train",
                if class { "present" } else { "absent" },
                members.len()
            );
            split.train.extend(members);
            continue;
        }
        root.derive(if class { "present" } else { "absent" }).shuffle(&mut members);
        let n = members.len();
        let n_val = ((n as f64 * 0.1).round() as usize).max(1);
        let n_test = ((n as f64 * 0.1).round() as usize).max(1);
        split.val.extend_from_slice(&members[..n_val]);
        split.test.extend_from_slice(&members[n_val..n_val + n_test]);
        split.train.extend_from_slice(&members[n_val + n_test..]);
    }
    Ok(split)
}
