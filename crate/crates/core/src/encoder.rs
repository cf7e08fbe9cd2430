//! Collaborative-filtering backbones: direct embedding lookup (MF) and
//! LightGCN-style propagation over the user-item graph. Both score pairs by
//! temperature-scaled cosine similarity.

use std::borrow::Cow;

use crate::dataio::{InteractionSet, Split};
use crate::error::{check_len, Error, Result};
use crate::numkit::{
    accumulate, adam_step, cosine_grad_coeffs, dot, norm, propagate, propagate_backward, AdamHyper, EmbeddingTable,
    Matrix, NormAdjacency, RowGrads, MIN_NORM,
};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Mf,
    LightGcn,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Mf => "mf",
            EncoderKind::LightGcn => "lightgcn",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mf" => Ok(EncoderKind::Mf),
            "lightgcn" => Ok(EncoderKind::LightGcn),
            other => Err(Error::BadParam(format!("unknown encoder `{other}`"))),
        }
    }
}

/// Final user and item representations, row-major.
#[derive(Debug, Clone)]
pub struct Representations<'a> {
    dim: usize,
    users: Cow<'a, [f64]>,
    items: Cow<'a, [f64]>,
    user_norms: Vec<f64>,
    item_norms: Vec<f64>,
}

impl<'a> Representations<'a> {
    fn new(dim: usize, users: Cow<'a, [f64]>, items: Cow<'a, [f64]>) -> Self {
        let norms = |x: &[f64]| x.chunks(dim.max(1)).map(norm).collect();
        Representations {
            dim,
            user_norms: norms(&users),
            item_norms: norms(&items),
            users,
            items,
        }
    }

    pub fn user_norm(&self, u: usize) -> f64 {
        self.user_norms[u]
    }

    pub fn item_norm(&self, i: usize) -> f64 {
        self.item_norms[i]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_users(&self) -> usize {
        self.users.len() / self.dim
    }

    pub fn n_items(&self) -> usize {
        self.items.len() / self.dim
    }

    pub fn user(&self, u: usize) -> &[f64] {
        &self.users[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.items[i * self.dim..(i + 1) * self.dim]
    }
}

/// Gradients keyed by user rows and item rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SideGrads {
    pub users: RowGrads,
    pub items: RowGrads,
}

impl SideGrads {
    pub fn is_empty(&self) -> bool {
        self.users.is_empty() && self.items.is_empty()
    }

    /// Adds `scale * other` into `self`.
    pub fn merge(&mut self, other: &SideGrads, scale: f64) {
        for (&r, g) in &other.users {
            accumulate(&mut self.users, r, g, scale);
        }
        for (&r, g) in &other.items {
            accumulate(&mut self.items, r, g, scale);
        }
    }

    fn prune(mut self) -> Self {
        self.users.retain(|_, g| g.iter().any(|&x| x != 0.0));
        self.items.retain(|_, g| g.iter().any(|&x| x != 0.0));
        self
    }
}

/// Maps ids to representations and scores pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    kind: EncoderKind,
    users: EmbeddingTable,
    items: EmbeddingTable,
    layers: usize,
    adj: Option<NormAdjacency>,
    tau: f64,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::BadParam(format!("temperature must be > 0, got {tau}")))
    }
}

impl Encoder {
    pub fn mf(n_users: usize, n_items: usize, dim: usize, tau: f64, rng: &mut Rng) -> Result<Self> {
        check_tau(tau)?;
        let users = EmbeddingTable::uniform(n_users, dim, rng);
        let items = EmbeddingTable::uniform(n_items, dim, rng);
        Ok(Encoder {
            kind: EncoderKind::Mf,
            users,
            items,
            layers: 0,
            adj: None,
            tau,
        })
    }

    /// LightGCN over the train interactions of `set`.
    pub fn light_gcn(set: &InteractionSet, dim: usize, layers: usize, tau: f64, rng: &mut Rng) -> Result<Self> {
        let users = EmbeddingTable::uniform(set.n_users(), dim, rng);
        let items = EmbeddingTable::uniform(set.n_items(), dim, rng);
        Self::from_parts(EncoderKind::LightGcn, users, items, layers, Some(set), tau)
    }

    /// Assembles an encoder from existing tables. LightGCN needs `set` for its
    /// adjacency (train split only).
    pub fn from_parts(
        kind: EncoderKind,
        users: EmbeddingTable,
        items: EmbeddingTable,
        layers: usize,
        set: Option<&InteractionSet>,
        tau: f64,
    ) -> Result<Self> {
        check_tau(tau)?;
        check_len(users.dim(), items.dim())?;
        let adj = match kind {
            EncoderKind::Mf => None,
            EncoderKind::LightGcn => {
                let set = set.ok_or_else(|| Error::BadParam("LightGCN needs the interaction graph".into()))?;
                if set.n_users() != users.rows() || set.n_items() != items.rows() {
                    return Err(Error::IncompatibleCheckpoint(format!(
                        "tables are {}x{} but dataset has {} users and {} items",
                        users.rows(),
                        items.rows(),
                        set.n_users(),
                        set.n_items()
                    )));
                }
                Some(NormAdjacency::bipartite(
                    set.n_users(),
                    set.n_items(),
                    set.pairs(Split::Train),
                )?)
            }
        };
        Ok(Encoder {
            kind,
            users,
            items,
            layers: if kind == EncoderKind::Mf { 0 } else { layers },
            adj,
            tau,
        })
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn dim(&self) -> usize {
        self.users.dim()
    }

    pub fn n_users(&self) -> usize {
        self.users.rows()
    }

    pub fn n_items(&self) -> usize {
        self.items.rows()
    }

    pub fn user_table(&self) -> &EmbeddingTable {
        &self.users
    }

    pub fn item_table(&self) -> &EmbeddingTable {
        &self.items
    }

    pub fn tables_mut(&mut self) -> (&mut EmbeddingTable, &mut EmbeddingTable) {
        (&mut self.users, &mut self.items)
    }

    pub fn check_user(&self, u: usize) -> Result<()> {
        self.users.check_row(u, "user")
    }

    pub fn check_item(&self, i: usize) -> Result<()> {
        self.items.check_row(i, "item")
    }

    /// Representations used for scoring: raw rows for MF, propagated rows for LightGCN.
    pub fn representations(&self) -> Result<Representations<'_>> {
        let dim = self.dim();
        match (&self.adj, self.kind) {
            (Some(adj), EncoderKind::LightGcn) => {
                let layer0 = Matrix::vstack(self.users.values(), self.items.values(), dim)?;
                let out = propagate(&layer0, adj, self.layers)?;
                let split = self.users.rows() * dim;
                let (u, i) = out.as_slice().split_at(split);
                Ok(Representations::new(
                    dim,
                    Cow::Owned(u.to_vec()),
                    Cow::Owned(i.to_vec()),
                ))
            }
            _ => Ok(Representations::new(
                dim,
                Cow::Borrowed(self.users.values()),
                Cow::Borrowed(self.items.values()),
            )),
        }
    }

    /// Scores `items` for user `u`.
    pub fn score(&self, u: usize, items: &[usize]) -> Result<Vec<f64>> {
        self.check_user(u)?;
        for &i in items {
            self.check_item(i)?;
        }
        let reps = self.representations()?;
        score_with(&reps, self.tau, u, items)
    }

    /// Pulls gradients on representations back to the embedding tables.
    /// Rows whose gradient is identically zero are dropped.
    pub fn backward(&self, rep_grads: &SideGrads) -> Result<SideGrads> {
        if rep_grads.is_empty() {
            return Ok(SideGrads::default());
        }
        let adj = match (&self.adj, self.kind) {
            (Some(adj), EncoderKind::LightGcn) => adj,
            _ => return Ok(rep_grads.clone().prune()),
        };
        let n_users = self.n_users();
        let dim = self.dim();
        let mut grad_out = Matrix::zeros(adj.node_count(), dim);
        for (&u, g) in &rep_grads.users {
            self.check_user(u)?;
            check_len(dim, g.len())?;
            grad_out.row_mut(u).copy_from_slice(g);
        }
        for (&i, g) in &rep_grads.items {
            self.check_item(i)?;
            check_len(dim, g.len())?;
            grad_out.row_mut(n_users + i).copy_from_slice(g);
        }
        let grad_in = propagate_backward(&grad_out, adj, self.layers)?;
        let mut out = SideGrads::default();
        for node in 0..adj.node_count() {
            let row = grad_in.row(node);
            if row.iter().any(|&x| x != 0.0) {
                if node < n_users {
                    out.users.insert(node, row.to_vec());
                } else {
                    out.items.insert(node - n_users, row.to_vec());
                }
            }
        }
        Ok(out)
    }

    /// Gradient of `sum_k upstream[k] * score(u, items[k])` on the tables.
    pub fn score_backward(&self, u: usize, items: &[usize], upstream: &[f64]) -> Result<SideGrads> {
        check_len(items.len(), upstream.len())?;
        if upstream.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("upstream gradient"));
        }
        self.check_user(u)?;
        for &i in items {
            self.check_item(i)?;
        }
        let reps = self.representations()?;
        let mut rep_grads = SideGrads::default();
        score_backward_with(&reps, self.tau, u, items, upstream, &mut rep_grads)?;
        self.backward(&rep_grads)
    }

    /// One Adam step on both tables.
    pub fn apply(&mut self, grads: &SideGrads, hyper: &AdamHyper) -> Result<()> {
        adam_step(&mut self.users, &grads.users, hyper)?;
        adam_step(&mut self.items, &grads.items, hyper)
    }
}

fn checked(n: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::BadParam(format!("temperature must be > 0, got {tau}")));
    }
    if !(n > MIN_NORM) {
        return Err(Error::ZeroNorm(n));
    }
    Ok(n)
}

/// Scores against precomputed representations and their cached norms.
pub fn score_with(reps: &Representations<'_>, tau: f64, u: usize, items: &[usize]) -> Result<Vec<f64>> {
    let ur = reps.user(u);
    let nu = checked(reps.user_norm(u), tau)?;
    items
        .iter()
        .map(|&i| {
            let ni = checked(reps.item_norm(i), tau)?;
            Ok(dot(ur, reps.item(i)) / (nu * ni) / tau)
        })
        .collect()
}

/// Accumulates `upstream[k] * d score(u, items[k]) / d reps` into `out`.
pub fn score_backward_with(
    reps: &Representations<'_>,
    tau: f64,
    u: usize,
    items: &[usize],
    upstream: &[f64],
    out: &mut SideGrads,
) -> Result<()> {
    check_len(items.len(), upstream.len())?;
    if upstream.iter().all(|&x| x == 0.0) {
        return Ok(());
    }
    let ur = reps.user(u);
    let dim = ur.len();
    let nu = checked(reps.user_norm(u), tau)?;
    let mut gu = out.users.remove(&u).unwrap_or_else(|| vec![0.0; dim]);
    for (&i, &up) in items.iter().zip(upstream) {
        if up == 0.0 {
            continue;
        }
        let ir = reps.item(i);
        let ni = checked(reps.item_norm(i), tau)?;
        let cos = dot(ur, ir) / (nu * ni);
        let (a, bu, bi) = cosine_grad_coeffs(cos, nu, ni, tau);
        let (a, bu, bi) = (up * a, up * bu, up * bi);
        for k in 0..dim {
            gu[k] += a * ir[k] - bu * ur[k];
        }
        let gi = out.items.entry(i).or_insert_with(|| vec![0.0; dim]);
        for k in 0..dim {
            gi[k] += a * ur[k] - bi * ir[k];
        }
    }
    out.users.insert(u, gu);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{cosine_score, cosine_score_grad};
    use crate::rng::substream;
    use rand::Rng as _;

    fn toy_set() -> InteractionSet {
        InteractionSet::from_pairs(3, 3, &[(0, 0), (0, 1), (1, 1), (2, 2), (1, 2)], &[], &[(0, 2)]).unwrap()
    }

    #[test]
    fn mf_identical_rows_score_one() {
        let users = EmbeddingTable::from_values(1, 2, vec![0.3, 0.4]).unwrap();
        let items = EmbeddingTable::from_values(1, 2, vec![0.3, 0.4]).unwrap();
        let enc = Encoder::from_parts(EncoderKind::Mf, users, items, 0, None, 1.0).unwrap();
        let s = enc.score(0, &[0]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mf_score_matches_recomputation() {
        let mut rng = substream(4, "enc");
        let enc = Encoder::mf(5, 7, 6, 0.2, &mut rng).unwrap();
        let s = enc.score(3, &[0, 4, 6]).unwrap();
        for (k, &i) in [0usize, 4, 6].iter().enumerate() {
            let u = enc.user_table().row(3);
            let v = enc.item_table().row(i);
            let expect = dot(u, v) / (dot(u, u).sqrt() * dot(v, v).sqrt()) / 0.2;
            assert!((s[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn lightgcn_zero_layers_equals_mf() {
        let set = toy_set();
        let mut rng = substream(8, "enc");
        let mf = Encoder::mf(3, 3, 4, 0.5, &mut rng).unwrap();
        let lg = Encoder::from_parts(
            EncoderKind::LightGcn,
            mf.user_table().clone(),
            mf.item_table().clone(),
            0,
            Some(&set),
            0.5,
        )
        .unwrap();
        assert_eq!(mf.score(1, &[0, 1, 2]).unwrap(), lg.score(1, &[0, 1, 2]).unwrap());
        let up = [0.3, -1.2, 0.7];
        assert_eq!(
            mf.score_backward(1, &[0, 1, 2], &up).unwrap(),
            lg.score_backward(1, &[0, 1, 2], &up).unwrap()
        );
    }

    #[test]
    fn zero_upstream_gives_empty_grads() {
        let set = toy_set();
        let mut rng = substream(8, "enc");
        let lg = Encoder::light_gcn(&set, 4, 2, 0.5, &mut rng).unwrap();
        assert!(lg.score_backward(0, &[1, 2], &[0.0, 0.0]).unwrap().is_empty());
    }

    #[test]
    fn mf_single_item_grad_is_cosine_grad() {
        let mut rng = substream(2, "enc");
        let enc = Encoder::mf(2, 2, 3, 0.3, &mut rng).unwrap();
        let g = enc.score_backward(1, &[0], &[1.0]).unwrap();
        let (gu, gi) = cosine_score_grad(enc.user_table().row(1), enc.item_table().row(0), 0.3).unwrap();
        assert_eq!(g.users[&1], gu);
        assert_eq!(g.items[&0], gi);
    }

    fn nudge(e: &mut Encoder, side: usize, row: usize, k: usize, by: f64) {
        let (ut, it) = e.tables_mut();
        let table = if side == 0 { ut } else { it };
        table.row_mut(row)[k] += by;
    }

    #[test]
    fn lightgcn_backward_matches_finite_differences() {
        // 3 users + 3 items = 6 nodes
        let set = toy_set();
        let mut rng = substream(21, "enc-fd");
        let enc = Encoder::light_gcn(&set, 3, 2, 0.4, &mut rng).unwrap();
        let items = [0usize, 1, 2];
        let up: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |e: &Encoder| -> f64 { e.score(2, &items).unwrap().iter().zip(&up).map(|(s, w)| s * w).sum() };
        let grads = enc.score_backward(2, &items, &up).unwrap();
        let h = 1e-6;
        let mut max_diff = 0.0f64;
        let mut scale = 1e-12f64;
        for side in 0..2 {
            for row in 0..3 {
                for k in 0..3 {
                    let mut p = enc.clone();
                    let mut m = enc.clone();
                    nudge(&mut p, side, row, k, h);
                    nudge(&mut m, side, row, k, -h);
                    let numeric = (loss(&p) - loss(&m)) / (2.0 * h);
                    let map = if side == 0 { &grads.users } else { &grads.items };
                    let analytic = map.get(&row).map_or(0.0, |g| g[k]);
                    max_diff = max_diff.max((analytic - numeric).abs());
                    scale = scale.max(analytic.abs()).max(numeric.abs());
                }
            }
        }
        assert!(max_diff / scale < 1e-5, "rel err {}", max_diff / scale);
    }

    #[test]
    fn score_rejects_bad_ids() {
        let mut rng = substream(2, "enc");
        let enc = Encoder::mf(2, 2, 3, 0.3, &mut rng).unwrap();
        assert!(matches!(enc.score(5, &[0]), Err(Error::IdOutOfRange { .. })));
        assert!(matches!(enc.score(0, &[9]), Err(Error::IdOutOfRange { .. })));
    }

    #[test]
    fn score_invariant_to_row_rescaling() {
        let mut rng = substream(3, "enc");
        let enc = Encoder::mf(3, 3, 4, 0.2, &mut rng).unwrap();
        let mut scaled = enc.clone();
        for v in scaled.tables_mut().1.row_mut(1) {
            *v *= 7.5;
        }
        let a = enc.score(0, &[0, 1, 2]).unwrap();
        let b = scaled.score(0, &[0, 1, 2]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn fused_kernels_match_reference() {
        let mut rng = substream(11, "fused");
        let enc = Encoder::mf(3, 6, 5, 0.2, &mut rng).unwrap();
        let reps = enc.representations().unwrap();
        let items = [0, 4, 4, 2];
        let up = [0.3, -1.2, 0.0, 2.5];
        let scores = score_with(&reps, 0.2, 1, &items).unwrap();
        let mut expect = SideGrads::default();
        for (k, &i) in items.iter().enumerate() {
            assert!((scores[k] - cosine_score(reps.user(1), reps.item(i), 0.2).unwrap()).abs() < 1e-14);
            if up[k] != 0.0 {
                let (gu, gi) = cosine_score_grad(reps.user(1), reps.item(i), 0.2).unwrap();
                accumulate(&mut expect.users, 1, &gu, up[k]);
                accumulate(&mut expect.items, i, &gi, up[k]);
            }
        }
        let mut got = SideGrads::default();
        score_backward_with(&reps, 0.2, 1, &items, &up, &mut got).unwrap();
        assert_eq!(
            got.users.keys().collect::<Vec<_>>(),
            expect.users.keys().collect::<Vec<_>>()
        );
        assert_eq!(
            got.items.keys().collect::<Vec<_>>(),
            expect.items.keys().collect::<Vec<_>>()
        );
        let pairs = got
            .users
            .values()
            .zip(expect.users.values())
            .chain(got.items.values().zip(expect.items.values()));
        for (g, e) in pairs {
            for (x, y) in g.iter().zip(e) {
                assert!((x - y).abs() <= 1e-14 * y.abs().max(1.0));
            }
        }
    }
}
