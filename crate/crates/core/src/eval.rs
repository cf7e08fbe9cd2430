//! All-ranking top-K evaluation and representation and hardness diagnostics.

use std::cmp::Ordering;

use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataio::{sample_negatives, InteractionSet, Split};
use crate::encoder::{score_with, Encoder, Representations};
use crate::error::{Error, Result};
use crate::loss::{advinfonce_forward, hardness_forward, HardnessModel};
use crate::numkit::norm;
use crate::rng::Rng;

/// Compensated (Neumaier) sum, independent of magnitude ordering effects.
pub fn neumaier_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Ranking of one user's candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct RankResult {
    pub user: usize,
    /// Candidate items by descending score, ties by ascending id.
    pub ranked: Vec<usize>,
    /// 1-based ranks of the relevant items that were candidates, ascending.
    pub positions: Vec<usize>,
}

/// Ranks every item not in `exclude` (and allowed by `candidates`) by `scores`.
pub fn rank_scores(
    user: usize,
    scores: &[f64],
    exclude: &[usize],
    candidates: Option<&[bool]>,
    relevant: &[usize],
) -> Result<RankResult> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("ranking scores"));
    }
    let mut blocked = vec![false; scores.len()];
    for &j in exclude {
        if j < blocked.len() {
            blocked[j] = true;
        }
    }
    let mut ranked: Vec<usize> = (0..scores.len())
        .filter(|&j| !blocked[j] && candidates.is_none_or(|c| c.get(j).copied().unwrap_or(false)))
        .collect();
    if ranked.is_empty() {
        return Err(Error::NoCandidates(user));
    }
    // scores are finite here, and -0.0 must tie with 0.0
    ranked.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut rank_of = vec![0usize; scores.len()];
    for (pos, &j) in ranked.iter().enumerate() {
        rank_of[j] = pos + 1;
    }
    let mut positions: Vec<usize> = relevant
        .iter()
        .filter_map(|&j| rank_of.get(j).copied().filter(|&r| r > 0))
        .collect();
    positions.sort_unstable();
    Ok(RankResult {
        user,
        ranked,
        positions,
    })
}

/// Ranks all items for `user` except its train positives; relevant items
/// are the positives of `split`.
pub fn rank_all(
    encoder: &Encoder,
    user: usize,
    set: &InteractionSet,
    split: Split,
    candidates: Option<&[bool]>,
) -> Result<RankResult> {
    encoder.check_user(user)?;
    let reps = encoder.representations()?;
    rank_with(&reps, encoder.tau(), user, set, split, candidates)
}

fn rank_with(
    reps: &Representations<'_>,
    tau: f64,
    user: usize,
    set: &InteractionSet,
    split: Split,
    candidates: Option<&[bool]>,
) -> Result<RankResult> {
    let items: Vec<usize> = (0..set.n_items()).collect();
    let scores = score_with(reps, tau, user, &items)?;
    rank_scores(
        user,
        &scores,
        set.positives(Split::Train, user),
        candidates,
        set.positives(split, user),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UserMetrics {
    pub user: usize,
    pub hr: f64,
    pub recall: f64,
    pub ndcg: f64,
}

/// Macro-averaged top-K metrics over users with at least one relevant item.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub k: usize,
    pub hr: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub n_users: usize,
    #[serde(skip)]
    pub per_user: Vec<UserMetrics>,
}

fn discount(pos: usize) -> f64 {
    1.0 / ((1 + pos) as f64).log2()
}

fn user_metrics(r: &RankResult, k: usize) -> Option<UserMetrics> {
    let n_rel = r.positions.len();
    if n_rel == 0 {
        return None;
    }
    let hits: Vec<usize> = r.positions.iter().copied().filter(|&p| p <= k).collect();
    let dcg: f64 = hits.iter().map(|&p| discount(p)).sum();
    let idcg: f64 = (1..=k.min(n_rel)).map(discount).sum();
    Some(UserMetrics {
        user: r.user,
        hr: if hits.is_empty() { 0.0 } else { 1.0 },
        recall: hits.len() as f64 / n_rel as f64,
        ndcg: dcg / idcg,
    })
}

pub fn topk_metrics(results: &[RankResult], k: usize) -> Result<MetricReport> {
    if k == 0 {
        return Err(Error::BadParam("k_eval must be >= 1".into()));
    }
    let per_user: Vec<UserMetrics> = results.iter().filter_map(|r| user_metrics(r, k)).collect();
    if per_user.is_empty() {
        return Err(Error::EmptyEval);
    }
    let n = per_user.len() as f64;
    Ok(MetricReport {
        k,
        hr: neumaier_sum(per_user.iter().map(|m| m.hr)) / n,
        recall: neumaier_sum(per_user.iter().map(|m| m.recall)) / n,
        ndcg: neumaier_sum(per_user.iter().map(|m| m.ndcg)) / n,
        n_users: per_user.len(),
        per_user,
    })
}

/// Evaluates `split` for every user that has positives in it.
pub fn evaluate(
    encoder: &Encoder,
    set: &InteractionSet,
    split: Split,
    k: usize,
    candidates: Option<&[bool]>,
) -> Result<MetricReport> {
    let reps = encoder.representations()?;
    let tau = encoder.tau();
    let results: Vec<RankResult> = (0..set.n_users())
        .into_par_iter()
        .filter(|&u| !set.positives(split, u).is_empty())
        .map(|u| rank_with(&reps, tau, u, set, split, candidates))
        .collect::<Result<_>>()?;
    topk_metrics(&results, k)
}

/// Single-positive DCG against the hardness-weighted loss with `K = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcgBound {
    pub rank: usize,
    pub neg_log_dcg: f64,
    pub loss: f64,
    pub holds: bool,
}

pub fn dcg_bound_check(s_pos: f64, s_negs: &[f64], deltas: &[f64]) -> Result<DcgBound> {
    let loss = advinfonce_forward(s_pos, s_negs, deltas, 1.0)?;
    let rank = 1 + s_negs.iter().zip(deltas).filter(|(s, d)| *d + *s - s_pos > 0.0).count();
    let neg_log_dcg = ((1 + rank) as f64).log2().ln();
    Ok(DcgBound {
        rank,
        neg_log_dcg,
        loss,
        holds: neg_log_dcg <= loss + 1e-12,
    })
}

/// `align = mean ||f(u) - f(i)||^2` over positive pairs and
/// `uniform = log mean exp(-2 ||f(x) - f(y)||^2)` over distinct entity pairs,
/// both on L2-normalized vectors.
pub fn alignment_uniformity(pairs: &[(&[f64], &[f64])], entities: &[&[f64]]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::EmptySample("positive pairs"));
    }
    if entities.len() < 2 {
        return Err(Error::EmptySample("entities"));
    }
    let unit = |x: &[f64]| -> Result<Vec<f64>> {
        let n = norm(x);
        if n <= crate::numkit::MIN_NORM {
            return Err(Error::ZeroNorm(n));
        }
        Ok(x.iter().map(|v| v / n).collect())
    };
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut align_terms = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        align_terms.push(sq(&unit(a)?, &unit(b)?));
    }
    let align = neumaier_sum(align_terms) / pairs.len() as f64;
    let units: Vec<Vec<f64>> = entities.iter().map(|x| unit(x)).collect::<Result<_>>()?;
    let mut terms = Vec::with_capacity(units.len() * (units.len() - 1) / 2);
    for a in 0..units.len() {
        for b in a + 1..units.len() {
            terms.push((-2.0 * sq(&units[a], &units[b])).exp());
        }
    }
    let count = terms.len() as f64;
    let uniform = (neumaier_sum(terms) / count).ln();
    Ok((align, uniform))
}

/// Alignment over (up to) `max_pairs` pairs of `split` and uniformity over
/// (up to) `max_entities` users and as many items, sampled without replacement.
pub fn encoder_alignment_uniformity(
    encoder: &Encoder,
    set: &InteractionSet,
    split: Split,
    max_pairs: usize,
    max_entities: usize,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let reps = encoder.representations()?;
    let pairs = set.pairs(split);
    let pick = |n: usize, m: usize, rng: &mut Rng| rand::seq::index::sample(rng, n, m.min(n)).into_vec();
    let chosen: Vec<(&[f64], &[f64])> = pick(pairs.len(), max_pairs, rng)
        .into_iter()
        .map(|k| (reps.user(pairs[k].0), reps.item(pairs[k].1)))
        .collect();
    let mut entities: Vec<&[f64]> = pick(set.n_users(), max_entities, rng)
        .into_iter()
        .map(|u| reps.user(u))
        .collect();
    entities.extend(pick(set.n_items(), max_entities, rng).into_iter().map(|i| reps.item(i)));
    alignment_uniformity(&chosen, &entities)
}

/// Fraction of planted false negatives `(u, j)` that receive negative hardness
/// when scored among `n_negatives - 1` uniform negatives of `u`, over
/// `resamples` context draws per pair.
pub fn fn_identification_rate(
    model: &HardnessModel,
    planted: &[(usize, usize)],
    encoder: &Encoder,
    set: &InteractionSet,
    n_negatives: usize,
    resamples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if planted.is_empty() {
        return Err(Error::EmptyFnList);
    }
    if n_negatives < 2 || resamples == 0 {
        return Err(Error::BadParam(
            "fn rate needs n_negatives >= 2 and resamples >= 1".into(),
        ));
    }
    let reps = encoder.representations()?;
    let mut below = 0usize;
    let mut total = 0usize;
    for &(u, j) in planted {
        encoder.check_user(u)?;
        encoder.check_item(j)?;
        for _ in 0..resamples {
            let mut negatives = vec![j];
            negatives.extend(sample_negatives(set, u, n_negatives - 1, rng)?.items);
            let batch = hardness_forward(model, u, &negatives, Some(&reps))?;
            if batch.deltas[0] < 0.0 {
                below += 1;
            }
            total += 1;
        }
    }
    Ok(below as f64 / total as f64)
}

/// Mean sampling probability of negatives within one popularity bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileBin {
    /// 0 holds the most popular items.
    pub bin: usize,
    pub mean_p: f64,
    pub count: usize,
}

/// Popularity bin of every item: items sorted by descending train popularity
/// (ties by ascending id) and cut into `bins` near-equal ranges.
pub fn popularity_bins(set: &InteractionSet, bins: usize) -> Vec<usize> {
    let pop = set.popularity();
    let mut order: Vec<usize> = (0..set.n_items()).collect();
    order.sort_by(|&a, &b| pop[b].cmp(&pop[a]).then(a.cmp(&b)));
    let mut bin_of = vec![0; set.n_items()];
    for (rank, &j) in order.iter().enumerate() {
        bin_of[j] = rank * bins / set.n_items();
    }
    bin_of
}

/// Averages the learned `p_j` by item-popularity bin over `n_batches` sampled
/// training pairs, each with `n_negatives` uniform negatives.
pub fn hardness_popularity_profile(
    model: &HardnessModel,
    encoder: &Encoder,
    set: &InteractionSet,
    bins: usize,
    n_batches: usize,
    n_negatives: usize,
    rng: &mut Rng,
) -> Result<Vec<ProfileBin>> {
    if bins < 2 {
        return Err(Error::BadParam(format!("bins must be >= 2, got {bins}")));
    }
    let pairs = set.pairs(Split::Train);
    if pairs.is_empty() {
        return Err(Error::EmptySplit);
    }
    let reps = encoder.representations()?;
    let bin_of = popularity_bins(set, bins);
    let mut sums = vec![Vec::new(); bins];
    for _ in 0..n_batches {
        let (u, _) = pairs[rng.random_range(0..pairs.len())];
        let negatives = sample_negatives(set, u, n_negatives, rng)?.items;
        let batch = hardness_forward(model, u, &negatives, Some(&reps))?;
        for (&j, &p) in negatives.iter().zip(&batch.probs) {
            sums[bin_of[j]].push(p);
        }
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(bin, ps)| ProfileBin {
            bin,
            count: ps.len(),
            mean_p: if ps.is_empty() {
                0.0
            } else {
                neumaier_sum(ps.iter().copied()) / ps.len() as f64
            },
        })
        .collect())
}
