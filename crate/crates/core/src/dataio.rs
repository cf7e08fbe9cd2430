//! Interaction ingestion, id remapping, negative sampling, long-tail test
//! construction and a synthetic biased-exposure generator.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{substream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::BadParam(format!("unknown split `{other}`"))),
        }
    }
}

/// Users, items and observed pairs, with the train/valid/test assignment.
///
/// Immutable after construction. Positives are stored per user as sorted,
/// duplicate-free item lists.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSet {
    n_users: usize,
    n_items: usize,
    train: Vec<Vec<usize>>,
    valid: Vec<Vec<usize>>,
    test: Vec<Vec<usize>>,
    popularity: Vec<u64>,
    user_ids: Vec<u64>,
    item_ids: Vec<u64>,
}

fn group_by_user(n_users: usize, n_items: usize, pairs: &[(usize, usize)], split: Split) -> Result<Vec<Vec<usize>>> {
    let mut lists = vec![Vec::new(); n_users];
    for &(u, i) in pairs {
        if u >= n_users {
            return Err(Error::IdOutOfRange {
                kind: "user",
                id: u,
                size: n_users,
            });
        }
        if i >= n_items {
            return Err(Error::IdOutOfRange {
                kind: "item",
                id: i,
                size: n_items,
            });
        }
        lists[u].push(i);
    }
    for (u, list) in lists.iter_mut().enumerate() {
        list.sort_unstable();
        if let Some(w) = list.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::BadParam(format!(
                "duplicate pair ({u}, {}) in {} split",
                w[0],
                split.name()
            )));
        }
    }
    Ok(lists)
}

impl InteractionSet {
    /// Builds a set over dense ids. Duplicate pairs within a split are rejected.
    pub fn from_pairs(
        n_users: usize,
        n_items: usize,
        train: &[(usize, usize)],
        valid: &[(usize, usize)],
        test: &[(usize, usize)],
    ) -> Result<Self> {
        let ids = |n: usize| (0..n as u64).collect::<Vec<_>>();
        Self::with_ids(n_users, n_items, train, valid, test, ids(n_users), ids(n_items))
    }

    fn with_ids(
        n_users: usize,
        n_items: usize,
        train: &[(usize, usize)],
        valid: &[(usize, usize)],
        test: &[(usize, usize)],
        user_ids: Vec<u64>,
        item_ids: Vec<u64>,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptySplit);
        }
        let train = group_by_user(n_users, n_items, train, Split::Train)?;
        let valid = group_by_user(n_users, n_items, valid, Split::Valid)?;
        let test = group_by_user(n_users, n_items, test, Split::Test)?;
        let mut popularity = vec![0u64; n_items];
        for list in &train {
            for &i in list {
                popularity[i] += 1;
            }
        }
        Ok(InteractionSet {
            n_users,
            n_items,
            train,
            valid,
            test,
            popularity,
            user_ids,
            item_ids,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Per-item count of train interactions.
    pub fn popularity(&self) -> &[u64] {
        &self.popularity
    }

    pub fn positives(&self, split: Split, user: usize) -> &[usize] {
        match split {
            Split::Train => &self.train[user],
            Split::Valid => &self.valid[user],
            Split::Test => &self.test[user],
        }
    }

    pub fn is_train_positive(&self, user: usize, item: usize) -> bool {
        self.train[user].binary_search(&item).is_ok()
    }

    pub fn pairs(&self, split: Split) -> Vec<(usize, usize)> {
        (0..self.n_users)
            .flat_map(|u| self.positives(split, u).iter().map(move |&i| (u, i)))
            .collect()
    }

    pub fn n_pairs(&self, split: Split) -> usize {
        (0..self.n_users).map(|u| self.positives(split, u).len()).sum()
    }

    /// Original (file) ids of dense user/item ids.
    pub fn raw_user_id(&self, user: usize) -> u64 {
        self.user_ids[user]
    }

    pub fn raw_item_id(&self, item: usize) -> u64 {
        self.item_ids[item]
    }

    /// Maps raw `(user, item)` ids back to dense ids; pairs with unknown ids are skipped.
    pub fn map_raw_pairs(&self, raw: &[(u64, u64)]) -> Vec<(usize, usize)> {
        let users: HashMap<u64, usize> = self.user_ids.iter().enumerate().map(|(k, &v)| (v, k)).collect();
        let items: HashMap<u64, usize> = self.item_ids.iter().enumerate().map(|(k, &v)| (v, k)).collect();
        raw.iter()
            .filter_map(|(u, i)| Some((*users.get(u)?, *items.get(i)?)))
            .collect()
    }

    /// Writes `train.tsv`, `valid.tsv` and `test.tsv` into `dir` using raw ids.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        for split in [Split::Train, Split::Valid, Split::Test] {
            let pairs: Vec<(u64, u64)> = self
                .pairs(split)
                .into_iter()
                .map(|(u, i)| (self.user_ids[u], self.item_ids[i]))
                .collect();
            write_pairs(&dir.join(format!("{}.tsv", split.name())), &pairs)?;
        }
        Ok(())
    }
}

/// Writes `user<TAB>item` lines.
pub fn write_pairs(path: &Path, pairs: &[(u64, u64)]) -> Result<()> {
    let mut out = String::with_capacity(pairs.len() * 12);
    for (u, i) in pairs {
        let _ = writeln!(out, "{u}\t{i}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads `user<TAB>item` lines. Blank lines and `#` comments are skipped.
pub fn read_pairs(path: &Path) -> Result<Vec<(u64, u64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(u), Some(i), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err(line_no, "expected `user<TAB>item`".into()));
        };
        let parse = |s: &str| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| parse_err(line_no, format!("`{s}` is not a non-negative integer")))
        };
        let pair = (parse(u)?, parse(i)?);
        if !seen.insert(pair) {
            return Err(parse_err(
                line_no,
                format!("duplicate interaction ({}, {})", pair.0, pair.1),
            ));
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Loads three TSV splits, remapping raw ids to dense ranges in first-seen
/// order (train, then valid, then test).
pub fn load_interactions(train: &Path, valid: &Path, test: &Path) -> Result<InteractionSet> {
    let raw = [read_pairs(train)?, read_pairs(valid)?, read_pairs(test)?];
    if raw[0].is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut users: HashMap<u64, usize> = HashMap::new();
    let mut items: HashMap<u64, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut dense: Vec<Vec<(usize, usize)>> = Vec::with_capacity(3);
    for split in &raw {
        let mut mapped = Vec::with_capacity(split.len());
        for &(u, i) in split {
            let du = *users.entry(u).or_insert_with(|| {
                user_ids.push(u);
                user_ids.len() - 1
            });
            let di = *items.entry(i).or_insert_with(|| {
                item_ids.push(i);
                item_ids.len() - 1
            });
            mapped.push((du, di));
        }
        dense.push(mapped);
    }
    InteractionSet::with_ids(
        user_ids.len(),
        item_ids.len(),
        &dense[0],
        &dense[1],
        &dense[2],
        user_ids,
        item_ids,
    )
}

/// Negatives drawn for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSample {
    pub user: usize,
    pub items: Vec<usize>,
}

/// Draws `n` items uniformly, with replacement, from the items the user has
/// no train interaction with.
pub fn sample_negatives(set: &InteractionSet, user: usize, n: usize, rng: &mut Rng) -> Result<NegativeSample> {
    if user >= set.n_users() {
        return Err(Error::IdOutOfRange {
            kind: "user",
            id: user,
            size: set.n_users(),
        });
    }
    let positives = set.positives(Split::Train, user);
    let n_items = set.n_items();
    if positives.len() >= n_items {
        return Err(Error::NoNegatives(user));
    }
    let items = if positives.len() * 2 <= n_items {
        (0..n)
            .map(|_| loop {
                let j = rng.random_range(0..n_items);
                if positives.binary_search(&j).is_err() {
                    break j;
                }
            })
            .collect()
    } else {
        let candidates: Vec<usize> = (0..n_items).filter(|j| positives.binary_search(j).is_err()).collect();
        (0..n)
            .map(|_| candidates[rng.random_range(0..candidates.len())])
            .collect()
    };
    Ok(NegativeSample { user, items })
}

/// Per-group test quotas `round(n0 * gamma^{-(i-1)/(groups-1)})`, `i` 1-based,
/// rounding half up.
pub fn gamma_quotas(n0: usize, gamma: f64, groups: usize) -> Result<Vec<usize>> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::BadParam(format!("gamma must be > 0, got {gamma}")));
    }
    if groups < 2 {
        return Err(Error::BadParam(format!("groups must be >= 2, got {groups}")));
    }
    if n0 < 1 {
        return Err(Error::BadParam("n0 must be >= 1".into()));
    }
    let span = (groups - 1) as f64;
    Ok((0..groups)
        .map(|g| {
            let exact = n0 as f64 * gamma.powf(-(g as f64) / span);
            (exact + 0.5).floor() as usize
        })
        .collect())
}

/// Result of a long-tail test split.
#[derive(Debug, Clone)]
pub struct GammaSplit {
    pub set: InteractionSet,
    pub quotas: Vec<usize>,
    pub drawn: Vec<usize>,
    /// Popularity group of each item (0 = most popular).
    pub item_group: Vec<usize>,
}

/// Assigns items to `groups` equal-size popularity groups (by pool count,
/// descending, ties by ascending id), draws up to the group quota of
/// interactions uniformly at random into the test split, and divides the
/// remaining pool 60:10 into train and valid.
pub fn gamma_split(
    n_users: usize,
    n_items: usize,
    pool: &[(usize, usize)],
    gamma: f64,
    groups: usize,
    n0: usize,
    rng: &mut Rng,
) -> Result<GammaSplit> {
    let quotas = gamma_quotas(n0, gamma, groups)?;
    let mut pool: Vec<(usize, usize)> = pool.to_vec();
    pool.sort_unstable();
    pool.dedup();
    let mut counts = vec![0u64; n_items];
    for &(u, i) in &pool {
        if u >= n_users || i >= n_items {
            return Err(Error::BadParam(format!("pool pair ({u}, {i}) out of range")));
        }
        counts[i] += 1;
    }
    let mut order: Vec<usize> = (0..n_items).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut item_group = vec![0usize; n_items];
    for (rank, &item) in order.iter().enumerate() {
        item_group[item] = rank * groups / n_items.max(1);
    }

    let mut by_group: Vec<Vec<(usize, usize)>> = vec![Vec::new(); groups];
    for &pair in &pool {
        by_group[item_group[pair.1]].push(pair);
    }
    let mut test = Vec::new();
    let mut rest = Vec::new();
    let mut drawn = Vec::with_capacity(groups);
    for (members, &quota) in by_group.iter_mut().zip(&quotas) {
        members.shuffle(rng);
        let take = quota.min(members.len());
        drawn.push(take);
        test.extend_from_slice(&members[..take]);
        rest.extend_from_slice(&members[take..]);
    }
    rest.sort_unstable();
    rest.shuffle(rng);
    let n_train = ((rest.len() as f64) * 6.0 / 7.0 + 0.5).floor() as usize;
    let (train, valid) = rest.split_at(n_train);
    let set = InteractionSet::from_pairs(n_users, n_items, train, valid, &test)?;
    Ok(GammaSplit {
        set,
        quotas,
        drawn,
        item_group,
    })
}

/// Parameters of the synthetic biased-exposure generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    /// Fraction of items relevant to each user (top latent dot products).
    pub relevance_quantile: f64,
    /// Exponent on item popularity weight in the exposure probability.
    pub exposure_bias_strength: f64,
    /// Exponent of the Zipf-like item popularity weighting.
    pub zipf_exponent: f64,
    /// Mean probability that a relevant pair is observed.
    pub train_fraction: f64,
    /// Fraction of relevant-but-unexposed pairs planted into the test split.
    pub fn_plant_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_users: 2000,
            n_items: 1000,
            latent_dim: 16,
            relevance_quantile: 0.05,
            exposure_bias_strength: 1.0,
            zipf_exponent: 1.0,
            train_fraction: 0.3,
            fn_plant_rate: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadParam(m.to_string()));
        if self.n_users == 0 || self.n_items < 2 || self.latent_dim == 0 {
            return bad("n_users, latent_dim must be positive and n_items >= 2");
        }
        if !(self.relevance_quantile > 0.0 && self.relevance_quantile < 1.0) {
            return bad("relevance_quantile must lie in (0, 1)");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        if !(self.fn_plant_rate >= 0.0 && self.fn_plant_rate < 1.0) {
            return bad("fn_plant_rate must lie in [0, 1)");
        }
        if !(self.exposure_bias_strength >= 0.0) || !(self.zipf_exponent >= 0.0) {
            return bad("exposure_bias_strength and zipf_exponent must be >= 0");
        }
        Ok(())
    }
}

/// Generated dataset plus its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub set: InteractionSet,
    /// Relevant pairs withheld from training and placed in the test split.
    pub planted_fn: Vec<(usize, usize)>,
    /// Probability that a relevant pair with this item is observed.
    pub exposure_prob: Vec<f64>,
    /// Zipf-like popularity weight of each item.
    pub item_weight: Vec<f64>,
    /// Every relevant pair, sorted.
    pub relevant: Vec<(usize, usize)>,
}

/// Draws a biased-exposure dataset.
///
/// Users and items get Gaussian latent vectors; each user's relevant items are
/// the top `relevance_quantile` fraction by latent dot product. A relevant
/// pair is observed with probability proportional to
/// `item_weight^exposure_bias_strength` (scaled to average `train_fraction`,
/// capped at one). Observed pairs are divided 60:10 into train and valid;
/// a `fn_plant_rate` fraction of the unobserved relevant pairs becomes the
/// unbiased test split and the planted false-negative list.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let (nu, ni, d) = (spec.n_users, spec.n_items, spec.latent_dim);
    let mut latent_rng = substream(spec.seed, "synthetic.latent");
    let mut draw = |n: usize| -> Vec<f64> { (0..n * d).map(|_| StandardNormal.sample(&mut latent_rng)).collect() };
    let users = draw(nu);
    let items = draw(ni);

    let per_user = ((spec.relevance_quantile * ni as f64).ceil() as usize).clamp(1, ni - 1);
    let mut relevant = Vec::with_capacity(nu * per_user);
    let mut scores = vec![0.0f64; ni];
    let mut order: Vec<usize> = (0..ni).collect();
    for u in 0..nu {
        let uv = &users[u * d..(u + 1) * d];
        for (j, s) in scores.iter_mut().enumerate() {
            *s = crate::numkit::dot(uv, &items[j * d..(j + 1) * d]);
        }
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut top: Vec<usize> = order[..per_user].to_vec();
        top.sort_unstable();
        relevant.extend(top.into_iter().map(|i| (u, i)));
    }

    let mut zipf_rng = substream(spec.seed, "synthetic.zipf");
    let mut rank: Vec<usize> = (0..ni).collect();
    rank.shuffle(&mut zipf_rng);
    let item_weight: Vec<f64> = rank
        .iter()
        .map(|&r| ((r + 1) as f64).powf(-spec.zipf_exponent))
        .collect();
    let affinity: Vec<f64> = item_weight
        .iter()
        .map(|w| w.powf(spec.exposure_bias_strength))
        .collect();
    let total: f64 = relevant.iter().map(|&(_, i)| affinity[i]).sum();
    let scale = spec.train_fraction * relevant.len() as f64 / total;
    let exposure_prob: Vec<f64> = affinity.iter().map(|a| (a * scale).min(1.0)).collect();

    let mut expose_rng = substream(spec.seed, "synthetic.expose");
    let mut plant_rng = substream(spec.seed, "synthetic.plant");
    let mut observed = Vec::new();
    let mut planted = Vec::new();
    for &(u, i) in &relevant {
        if expose_rng.random::<f64>() < exposure_prob[i] {
            observed.push((u, i));
        } else if plant_rng.random::<f64>() < spec.fn_plant_rate {
            planted.push((u, i));
        }
    }
    if observed.is_empty() {
        return Err(Error::DegenerateSpec("no relevant pair was exposed".into()));
    }
    let mut split_rng = substream(spec.seed, "synthetic.split");
    observed.shuffle(&mut split_rng);
    let n_train = ((observed.len() as f64) * 6.0 / 7.0 + 0.5).floor() as usize;
    let (train, valid) = observed.split_at(n_train.max(1));
    let set = InteractionSet::from_pairs(nu, ni, train, valid, &planted)?;
    Ok(SyntheticData {
        set,
        planted_fn: planted,
        exposure_prob,
        item_weight,
        relevant,
    })
}
