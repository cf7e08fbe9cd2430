//! Ranking losses with analytic gradients and the learned hardness models.
//!
//! The contrastive loss for one observed pair `(u, i)` with sampled negatives
//! `j = 1..N` is
//!
//! ```text
//! L = -log( e^{s_pos} / (e^{s_pos} + K * sum_j e^{delta_j} e^{s_j}) )
//! ```
//!
//! With every `delta_j = 0` this is the sampled, K-weighted InfoNCE loss. The
//! hardness `delta_j = log(N * p_j)` comes from a softmax over a raw hardness
//! score `g(u, j)`; `p` is a distribution over the sampled negatives, and the
//! mean hardness equals `-KL(P0 || P)` with `P0` uniform.
//!
//! All log-sum-exp evaluations subtract the running maximum.

use crate::encoder::{Representations, SideGrads};
use crate::error::{check_len, Error, Result};
use crate::numkit::{accumulate, adam_step, dot, AdamHyper, EmbeddingTable};
use crate::rng::Rng;

/// Latent dimension of the projection hardness model.
pub const MLP_LATENT_DIM: usize = 4;

fn check_finite(xs: &[f64], what: &'static str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn check_weight(k_weight: f64) -> Result<()> {
    if k_weight > 0.0 && k_weight.is_finite() {
        Ok(())
    } else {
        Err(Error::BadParam(format!(
            "negative weight K must be > 0, got {k_weight}"
        )))
    }
}

/// Gradients of a contrastive loss on one observed pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub d_pos: f64,
    pub d_negs: Vec<f64>,
    pub d_deltas: Vec<f64>,
}

/// Margins `log K + delta_j + s_j - s_pos` and the loss `log(1 + sum_j e^{margin_j})`.
fn contrastive_margins(s_pos: f64, s_negs: &[f64], deltas: &[f64], k_weight: f64) -> Result<(Vec<f64>, f64)> {
    check_len(s_negs.len(), deltas.len())?;
    check_weight(k_weight)?;
    if !s_pos.is_finite() {
        return Err(Error::NonFinite("positive score"));
    }
    check_finite(s_negs, "negative scores")?;
    check_finite(deltas, "hardness")?;
    let ln_k = k_weight.ln();
    let margins: Vec<f64> = s_negs.iter().zip(deltas).map(|(s, d)| ln_k + d + s - s_pos).collect();
    let max = margins.iter().copied().fold(0.0, f64::max);
    let loss = if max == 0.0 {
        // positive logit is the largest: log1p keeps small losses accurate
        margins.iter().map(|a| a.exp()).sum::<f64>().ln_1p()
    } else {
        max + ((-max).exp() + margins.iter().map(|a| (a - max).exp()).sum::<f64>()).ln()
    };
    Ok((margins, loss))
}

/// Hardness-weighted contrastive loss.
pub fn advinfonce_forward(s_pos: f64, s_negs: &[f64], deltas: &[f64], k_weight: f64) -> Result<f64> {
    Ok(contrastive_margins(s_pos, s_negs, deltas, k_weight)?.1)
}

pub fn advinfonce_backward(s_pos: f64, s_negs: &[f64], deltas: &[f64], k_weight: f64) -> Result<LossGrad> {
    let (margins, loss) = contrastive_margins(s_pos, s_negs, deltas, k_weight)?;
    let weights: Vec<f64> = margins.iter().map(|a| (a - loss).exp()).collect();
    let d_pos = -weights.iter().sum::<f64>();
    Ok(LossGrad {
        loss,
        d_pos,
        d_deltas: weights.clone(),
        d_negs: weights,
    })
}

/// Sampled, K-weighted InfoNCE; the hardness-weighted loss at zero hardness.
pub fn infonce_forward(s_pos: f64, s_negs: &[f64], k_weight: f64) -> Result<f64> {
    advinfonce_forward(s_pos, s_negs, &vec![0.0; s_negs.len()], k_weight)
}

pub fn infonce_backward(s_pos: f64, s_negs: &[f64], k_weight: f64) -> Result<LossGrad> {
    advinfonce_backward(s_pos, s_negs, &vec![0.0; s_negs.len()], k_weight)
}

/// The loss written over a negative-sampling distribution `probs`:
/// `-log( e^{s_pos} / (e^{s_pos} + K * n * sum_j p_j e^{s_j}) )`.
pub fn dro_form_loss(s_pos: f64, s_negs: &[f64], probs: &[f64], n: usize, k_weight: f64) -> Result<f64> {
    check_len(s_negs.len(), probs.len())?;
    check_weight(k_weight)?;
    if n == 0 {
        return Err(Error::BadParam("sample count must be >= 1".into()));
    }
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|&p| !(p >= 0.0)) || !((total - 1.0).abs() <= 1e-8) {
        return Err(Error::BadDistribution(total));
    }
    if !s_pos.is_finite() {
        return Err(Error::NonFinite("positive score"));
    }
    check_finite(s_negs, "negative scores")?;
    let max = s_negs.iter().copied().fold(s_pos, f64::max);
    let expectation: f64 = probs.iter().zip(s_negs).map(|(p, s)| p * (s - max).exp()).sum();
    let z = (s_pos - max).exp() + k_weight * n as f64 * expectation;
    Ok(z.ln() + max - s_pos)
}

/// Loss and gradients of a pairwise loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairGrad {
    pub loss: f64,
    pub d_pos: f64,
    pub d_neg: f64,
}

/// `-log sigmoid(s_pos - s_neg)`.
pub fn bpr_forward(s_pos: f64, s_neg: f64) -> Result<f64> {
    Ok(bpr_backward(s_pos, s_neg)?.loss)
}

pub fn bpr_backward(s_pos: f64, s_neg: f64) -> Result<PairGrad> {
    if !s_pos.is_finite() || !s_neg.is_finite() {
        return Err(Error::NonFinite("bpr scores"));
    }
    let margin = s_pos - s_neg;
    // softplus(-margin) and sigmoid(-margin), without overflow
    let (loss, sig) = if margin >= 0.0 {
        let e = (-margin).exp();
        (e.ln_1p(), e / (1.0 + e))
    } else {
        let e = margin.exp();
        (-margin + e.ln_1p(), 1.0 / (1.0 + e))
    };
    Ok(PairGrad {
        loss,
        d_pos: -sig,
        d_neg: sig,
    })
}

/// Hinge form of the hardness-aware ranking criterion and its log-sum-exp
/// relaxation: `lhs = max(0, max_j(s_j - s_pos + delta_j))`, `rhs` the
/// hardness-weighted loss with `K = 1`. `lhs <= rhs` always.
pub fn ranking_max_bound(s_pos: f64, s_negs: &[f64], deltas: &[f64]) -> Result<(f64, f64)> {
    let (margins, loss) = contrastive_margins(s_pos, s_negs, deltas, 1.0)?;
    // same margins as the loss so rounding cannot invert the bound
    Ok((margins.iter().copied().fold(0.0, f64::max), loss))
}

/// Raw hardness scores, sampling distribution and hardness of a batch of negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct HardnessBatch {
    pub raw: Vec<f64>,
    pub probs: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl HardnessBatch {
    /// `p = softmax(raw)`, `delta_j = log N + log p_j` (log-softmax, never exp-then-log).
    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::BadParam("hardness batch needs at least one negative".into()));
        }
        check_finite(&raw, "raw hardness")?;
        let n = raw.len() as f64;
        let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = raw.iter().map(|g| (g - max).exp()).sum::<f64>().ln();
        let log_probs: Vec<f64> = raw.iter().map(|g| (g - max) - log_norm).collect();
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        let ln_n = n.ln();
        let deltas = log_probs.iter().map(|l| ln_n + l).collect();
        Ok(HardnessBatch { raw, probs, deltas })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// `KL(P0 || P)` with `P0` uniform over the batch.
    pub fn kl_from_uniform(&self) -> f64 {
        let n = self.len() as f64;
        -self.deltas.iter().sum::<f64>() / n
    }

    /// `max_j |p_j - 1/N|`.
    pub fn max_deviation(&self) -> f64 {
        let uniform = 1.0 / self.len() as f64;
        self.probs.iter().map(|p| (p - uniform).abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HardnessKind {
    Embed,
    Mlp,
}

impl HardnessKind {
    pub fn name(self) -> &'static str {
        match self {
            HardnessKind::Embed => "embed",
            HardnessKind::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for HardnessKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "embed" => Ok(HardnessKind::Embed),
            "mlp" => Ok(HardnessKind::Mlp),
            other => Err(Error::BadParam(format!("unknown hardness model `{other}`"))),
        }
    }
}

/// Trainable raw hardness score `g(u, j)`.
///
/// * `Embed`: `g = <a_u, b_j>` with separate user and item hardness tables.
/// * `Mlp`: `g = <W_u [x_u; 1], W_v [x_j; 1]>` where `x` are the encoder's
///   representations (read as constants) and each `W` is a
///   `latent x (dim + 1)` table whose last column is the bias.
///
/// Both start with a zero user side and a random item side, so `g` is
/// constant (all hardness zero) yet the gradient is not degenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct HardnessModel {
    kind: HardnessKind,
    first: EmbeddingTable,
    second: EmbeddingTable,
}

fn project(table: &EmbeddingTable, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..table.rows())
        .map(|r| {
            let w = table.row(r);
            dot(&w[..d], x) + w[d]
        })
        .collect()
}

impl HardnessModel {
    pub fn embed(n_users: usize, n_items: usize, dim: usize, rng: &mut Rng) -> Self {
        HardnessModel {
            kind: HardnessKind::Embed,
            first: EmbeddingTable::zeros(n_users, dim),
            second: EmbeddingTable::uniform(n_items, dim, rng),
        }
    }

    pub fn mlp(input_dim: usize, latent_dim: usize, rng: &mut Rng) -> Self {
        let mut second = EmbeddingTable::uniform(latent_dim, input_dim + 1, rng);
        for r in 0..latent_dim {
            second.row_mut(r)[input_dim] = 0.0;
        }
        HardnessModel {
            kind: HardnessKind::Mlp,
            first: EmbeddingTable::zeros(latent_dim, input_dim + 1),
            second,
        }
    }

    /// Builds from explicit tables (checkpoint loading, hand-set models).
    pub fn from_tables(kind: HardnessKind, first: EmbeddingTable, second: EmbeddingTable) -> Result<Self> {
        check_len(first.dim(), second.dim())?;
        if kind == HardnessKind::Mlp {
            check_len(first.rows(), second.rows())?;
        }
        Ok(HardnessModel { kind, first, second })
    }

    pub fn kind(&self) -> HardnessKind {
        self.kind
    }

    /// User-side table (`Embed`) or user projection (`Mlp`).
    pub fn first(&self) -> &EmbeddingTable {
        &self.first
    }

    /// Item-side table (`Embed`) or item projection (`Mlp`).
    pub fn second(&self) -> &EmbeddingTable {
        &self.second
    }

    pub fn tables_mut(&mut self) -> (&mut EmbeddingTable, &mut EmbeddingTable) {
        (&mut self.first, &mut self.second)
    }

    fn mlp_inputs<'r>(&self, reps: Option<&'r Representations<'_>>) -> Result<&'r Representations<'r>> {
        let reps = reps.ok_or_else(|| Error::BadParam("mlp hardness needs encoder representations".into()))?;
        check_len(self.first.dim(), reps.dim() + 1)?;
        Ok(reps)
    }

    /// Raw scores `g(u, j)` for each negative.
    pub fn raw_scores(&self, user: usize, negatives: &[usize], reps: Option<&Representations<'_>>) -> Result<Vec<f64>> {
        match self.kind {
            HardnessKind::Embed => {
                self.first.check_row(user, "user")?;
                let a = self.first.row(user);
                negatives
                    .iter()
                    .map(|&j| {
                        self.second.check_row(j, "item")?;
                        Ok(dot(a, self.second.row(j)))
                    })
                    .collect()
            }
            HardnessKind::Mlp => {
                let reps = self.mlp_inputs(reps)?;
                let zu = project(&self.first, reps.user(user));
                Ok(negatives
                    .iter()
                    .map(|&j| dot(&zu, &project(&self.second, reps.item(j))))
                    .collect())
            }
        }
    }

    /// One Adam step on both tables.
    pub fn apply(&mut self, grads: &SideGrads, hyper: &AdamHyper) -> Result<()> {
        adam_step(&mut self.first, &grads.users, hyper)?;
        adam_step(&mut self.second, &grads.items, hyper)
    }
}

/// Hardness of the sampled negatives of user `user`.
pub fn hardness_forward(
    model: &HardnessModel,
    user: usize,
    negatives: &[usize],
    reps: Option<&Representations<'_>>,
) -> Result<HardnessBatch> {
    HardnessBatch::from_raw(model.raw_scores(user, negatives, reps)?)
}

/// Pulls `dL/d delta` back to the hardness parameters. `users` holds rows of
/// the first table and `items` rows of the second.
pub fn hardness_backward(
    model: &HardnessModel,
    batch: &HardnessBatch,
    d_deltas: &[f64],
    user: usize,
    negatives: &[usize],
    reps: Option<&Representations<'_>>,
) -> Result<SideGrads> {
    check_len(batch.len(), d_deltas.len())?;
    check_len(batch.len(), negatives.len())?;
    check_finite(d_deltas, "hardness gradient")?;
    // softmax Jacobian: dL/dg_k = dL/d delta_k - p_k * sum_j dL/d delta_j
    let total: f64 = d_deltas.iter().sum();
    let d_raw: Vec<f64> = d_deltas.iter().zip(&batch.probs).map(|(d, p)| d - p * total).collect();
    let mut grads = SideGrads::default();
    match model.kind {
        HardnessKind::Embed => {
            model.first.check_row(user, "user")?;
            let a = model.first.row(user);
            let mut d_user = vec![0.0; a.len()];
            for (&j, &c) in negatives.iter().zip(&d_raw) {
                model.second.check_row(j, "item")?;
                if c == 0.0 {
                    continue;
                }
                for (du, b) in d_user.iter_mut().zip(model.second.row(j)) {
                    *du += c * b;
                }
                accumulate(&mut grads.items, j, a, c);
            }
            if d_user.iter().any(|&x| x != 0.0) {
                grads.users.insert(user, d_user);
            }
        }
        HardnessKind::Mlp => {
            let reps = model.mlp_inputs(reps)?;
            let xu = reps.user(user);
            let zu = project(&model.first, xu);
            let latent = zu.len();
            let mut d_zu = vec![0.0; latent];
            for (&j, &c) in negatives.iter().zip(&d_raw) {
                if c == 0.0 {
                    continue;
                }
                let xj = reps.item(j);
                let zj = project(&model.second, xj);
                for r in 0..latent {
                    d_zu[r] += c * zj[r];
                    // d g / d W_v[r] = z_u[r] * [x_j; 1]
                    let coeff = c * zu[r];
                    if coeff != 0.0 {
                        let mut row: Vec<f64> = xj.to_vec();
                        row.push(1.0);
                        accumulate(&mut grads.items, r, &row, coeff);
                    }
                }
            }
            for (r, &dz) in d_zu.iter().enumerate() {
                if dz != 0.0 {
                    let mut row: Vec<f64> = xu.to_vec();
                    row.push(1.0);
                    accumulate(&mut grads.users, r, &row, dz);
                }
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Encoder;
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn fd_scalar(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel(a: f64, b: f64, scale: f64) -> f64 {
        (a - b).abs() / scale.max(a.abs()).max(b.abs()).max(1e-12)
    }

    #[test]
    fn zero_hardness_reduces_to_infonce() {
        let s = [0.3, -1.2, 2.0];
        assert_eq!(
            advinfonce_forward(0.7, &s, &[0.0; 3], 64.0).unwrap(),
            infonce_forward(0.7, &s, 64.0).unwrap()
        );
    }

    #[test]
    fn symmetric_pair_is_ln2() {
        let v = advinfonce_forward(1.5, &[1.5], &[0.0], 1.0).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bpr_forward(0.2, 0.2).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn one_negative_infonce_is_softplus() {
        let m = 0.83;
        let v = infonce_forward(1.0 + m, &[1.0], 1.0).unwrap();
        assert!((v - (1.0 + (-m).exp()).ln()).abs() < 1e-14);
    }

    #[test]
    fn forward_matches_naive_formula() {
        let mut rng = substream(1, "naive");
        for _ in 0..500 {
            let n = rng.random_range(1..20);
            let s_pos: f64 = rng.random_range(-5.0..5.0);
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let k = rng.random_range(1.0..100.0);
            let denom = s_pos.exp() + k * s.iter().zip(&d).map(|(s, d)| d.exp() * s.exp()).sum::<f64>();
            let naive = -(s_pos.exp() / denom).ln();
            let v = advinfonce_forward(s_pos, &s, &d, k).unwrap();
            assert!((v - naive).abs() <= 1e-12 * naive.abs().max(1.0));
            assert!(v > 0.0);
        }
    }

    #[test]
    fn backward_matches_closed_form_and_fd() {
        let mut rng = substream(2, "bw");
        for _ in 0..300 {
            let n = rng.random_range(1..10);
            let s_pos = rng.random_range(-3.0..3.0);
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k = rng.random_range(1.0..10.0);
            let g = advinfonce_backward(s_pos, &s, &d, k).unwrap();
            let z = s_pos.exp() + k * s.iter().zip(&d).map(|(s, d)| d.exp() * s.exp()).sum::<f64>();
            assert!((g.d_pos + (1.0 - s_pos.exp() / z)).abs() < 1e-12);
            let fd_pos = fd_scalar(|x| advinfonce_forward(x, &s, &d, k).unwrap(), s_pos);
            assert!(rel(g.d_pos, fd_pos, 0.0) < 1e-6);
            for j in 0..n {
                let fd_s = fd_scalar(
                    |x| {
                        let mut t = s.clone();
                        t[j] = x;
                        advinfonce_forward(s_pos, &t, &d, k).unwrap()
                    },
                    s[j],
                );
                let fd_d = fd_scalar(
                    |x| {
                        let mut t = d.clone();
                        t[j] = x;
                        advinfonce_forward(s_pos, &s, &t, k).unwrap()
                    },
                    d[j],
                );
                assert!(rel(g.d_negs[j], fd_s, 1e-3) < 1e-6);
                assert!(rel(g.d_deltas[j], fd_d, 1e-3) < 1e-6);
                assert!(g.d_negs[j] >= 0.0);
            }
            let balance = g.d_pos + g.d_negs.iter().sum::<f64>();
            assert!(balance.abs() < 1e-10);
        }
    }

    #[test]
    fn saturated_positive_has_vanishing_gradients() {
        let g = advinfonce_backward(40.5, &[0.5, 0.5], &[0.0, 0.0], 64.0).unwrap();
        assert!(g.d_pos.abs() < 1e-10);
        assert!(g.d_negs.iter().chain(&g.d_deltas).all(|x| x.abs() < 1e-10));
        assert!(g.loss < 1e-10);
    }

    #[test]
    fn doubling_hardness_doubles_gradient_ratio() {
        let s = [0.4, -0.1, 0.9];
        let d = [0.2, -0.3, 0.1];
        let a = advinfonce_backward(0.5, &s, &d, 8.0).unwrap();
        let mut d2 = d;
        d2[0] += std::f64::consts::LN_2;
        let b = advinfonce_backward(0.5, &s, &d2, 8.0).unwrap();
        let ra = a.d_negs[0] / a.d_negs[1];
        let rb = b.d_negs[0] / b.d_negs[1];
        assert!((rb / ra - 2.0).abs() < 1e-10);
    }

    #[test]
    fn hardness_proportionality() {
        let s = [0.4, -0.1, 0.9, 0.0];
        let d = [0.2, -0.3, 0.1, 1.1];
        let g = advinfonce_backward(0.5, &s, &d, 4.0).unwrap();
        let c: Vec<f64> = (0..4).map(|j| g.d_negs[j] * (-d[j] - s[j]).exp()).collect();
        assert!(c.iter().all(|x| (x - c[0]).abs() < 1e-10));
    }

    #[test]
    fn dro_form_examples() {
        let s = [0.1, 0.5, -0.7, 1.2];
        let uniform = [0.25; 4];
        let a = dro_form_loss(0.3, &s, &uniform, 4, 16.0).unwrap();
        let b = infonce_forward(0.3, &s, 16.0).unwrap();
        assert!((a - b).abs() < 1e-12);

        let eps = 1e-9;
        let mut onehot = [eps / 3.0; 4];
        onehot[1] = 1.0 - eps;
        let v = dro_form_loss(0.3, &s, &onehot, 4, 16.0).unwrap();
        let limit = -(0.3f64.exp() / (0.3f64.exp() + 16.0 * 4.0 * s[1].exp())).ln();
        assert!((v - limit).abs() < 1e-6);

        assert!(matches!(
            dro_form_loss(0.3, &s, &[0.5, 0.5, 0.5, 0.0], 4, 1.0),
            Err(Error::BadDistribution(_))
        ));
    }

    #[test]
    fn bpr_gradients_and_saturation() {
        assert!(bpr_forward(40.0, 0.0).unwrap() < 1e-10);
        let g = bpr_backward(0.3, 1.1).unwrap();
        let fd = fd_scalar(|x| bpr_forward(x, 1.1).unwrap(), 0.3);
        assert!(rel(g.d_pos, fd, 0.0) < 1e-6);
        assert_eq!(g.d_pos, -g.d_neg);
        assert!(bpr_forward(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn hardness_batch_examples() {
        let b = HardnessBatch::from_raw(vec![0.7; 5]).unwrap();
        assert!(b.deltas.iter().all(|&d| d == 0.0));
        let b = HardnessBatch::from_raw(vec![std::f64::consts::LN_2, 0.0]).unwrap();
        assert!((b.probs[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((b.probs[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((b.deltas[0] - (4.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((b.deltas[1] - (2.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!(HardnessBatch::from_raw(vec![]).is_err());
    }

    proptest! {
        #[test]
        fn hardness_shift_invariance(raw in prop::collection::vec(-5.0f64..5.0, 1..16), c in -50.0f64..50.0) {
            let a = HardnessBatch::from_raw(raw.clone()).unwrap();
            let b = HardnessBatch::from_raw(raw.iter().map(|g| g + c).collect()).unwrap();
            for j in 0..raw.len() {
                prop_assert!((a.probs[j] - b.probs[j]).abs() < 1e-12);
                prop_assert!((a.deltas[j] - b.deltas[j]).abs() < 1e-12);
            }
            prop_assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            prop_assert!(a.kl_from_uniform() >= -1e-12);
        }

        #[test]
        fn loss_increases_with_hardness(
            s in prop::collection::vec(-3.0f64..3.0, 1..8),
            bump in 1e-3f64..2.0,
            pick in 0usize..8,
        ) {
            let d = vec![0.0; s.len()];
            let j = pick % s.len();
            let mut d2 = d.clone();
            d2[j] += bump;
            let a = advinfonce_forward(0.1, &s, &d, 4.0).unwrap();
            let b = advinfonce_forward(0.1, &s, &d2, 4.0).unwrap();
            prop_assert!(b > a);
        }

        #[test]
        fn ranking_bound_holds(
            s_pos in -50.0f64..50.0,
            s in prop::collection::vec(-50.0f64..50.0, 1..10),
            d in prop::collection::vec(-5.0f64..5.0, 10),
        ) {
            let (lhs, rhs) = ranking_max_bound(s_pos, &s, &d[..s.len()]).unwrap();
            prop_assert!(lhs <= rhs);
            prop_assert!(lhs >= 0.0);
        }
    }

    #[test]
    fn ranking_bound_examples() {
        let (lhs, rhs) = ranking_max_bound(40.0, &[0.0, 0.0, 0.0], &[0.0; 3]).unwrap();
        assert_eq!(lhs, 0.0);
        assert!(rhs <= 3.0 * (-40.0f64).exp() + 1e-15);
        let (lhs, rhs) = ranking_max_bound(0.0, &[30.0, -5.0, -7.0], &[0.0; 3]).unwrap();
        assert!(lhs <= rhs && rhs - lhs <= 4.0f64.ln());
    }

    #[test]
    fn embed_model_starts_at_zero_hardness() {
        let mut rng = substream(3, "h");
        let m = HardnessModel::embed(4, 10, 6, &mut rng);
        let b = hardness_forward(&m, 2, &[1, 5, 7, 7], None).unwrap();
        assert!(b.deltas.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn equal_upstream_at_uniform_gives_zero_raw_gradient() {
        let mut rng = substream(3, "h");
        let m = HardnessModel::embed(4, 10, 6, &mut rng);
        let negs = [0, 3, 9, 4];
        let b = hardness_forward(&m, 1, &negs, None).unwrap();
        let g = hardness_backward(&m, &b, &[0.25; 4], 1, &negs, None).unwrap();
        assert!(g.users.values().chain(g.items.values()).flatten().all(|&x| x == 0.0));
    }

    fn random_model(kind: HardnessKind, rng: &mut crate::rng::Rng) -> HardnessModel {
        let mut m = match kind {
            HardnessKind::Embed => HardnessModel::embed(3, 8, 4, rng),
            HardnessKind::Mlp => HardnessModel::mlp(4, MLP_LATENT_DIM, rng),
        };
        let (a, b) = m.tables_mut();
        for t in [a, b] {
            for r in 0..t.rows() {
                for v in t.row_mut(r) {
                    *v = rng.random_range(-1.0..1.0);
                }
            }
        }
        m
    }

    #[test]
    fn hardness_backward_matches_finite_differences() {
        let mut rng = substream(9, "hfd");
        let enc = Encoder::mf(3, 8, 4, 0.5, &mut rng).unwrap();
        let reps = enc.representations().unwrap();
        for kind in [HardnessKind::Embed, HardnessKind::Mlp] {
            for _ in 0..20 {
                let model = random_model(kind, &mut rng);
                let negs: Vec<usize> = (0..5).map(|_| rng.random_range(0..8)).collect();
                let s: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
                let loss = |m: &HardnessModel| -> f64 {
                    let b = hardness_forward(m, 1, &negs, Some(&reps)).unwrap();
                    advinfonce_forward(0.3, &s, &b.deltas, 4.0).unwrap()
                };
                let b = hardness_forward(&model, 1, &negs, Some(&reps)).unwrap();
                let lg = advinfonce_backward(0.3, &s, &b.deltas, 4.0).unwrap();
                let g = hardness_backward(&model, &b, &lg.d_deltas, 1, &negs, Some(&reps)).unwrap();
                let raw_sum: f64 = {
                    let total: f64 = lg.d_deltas.iter().sum();
                    lg.d_deltas.iter().zip(&b.probs).map(|(d, p)| d - p * total).sum()
                };
                assert!(raw_sum.abs() < 1e-10);
                let h = 1e-6;
                let (mut diff, mut scale) = (0.0f64, 1e-12f64);
                for side in 0..2 {
                    let rows = if side == 0 {
                        model.first().rows()
                    } else {
                        model.second().rows()
                    };
                    for r in 0..rows {
                        for k in 0..model.first().dim() {
                            let nudge = |by: f64| {
                                let mut m = model.clone();
                                let (a, b) = m.tables_mut();
                                let t = if side == 0 { a } else { b };
                                t.row_mut(r)[k] += by;
                                m
                            };
                            let numeric = (loss(&nudge(h)) - loss(&nudge(-h))) / (2.0 * h);
                            let map = if side == 0 { &g.users } else { &g.items };
                            let analytic = map.get(&r).map_or(0.0, |v| v[k]);
                            diff = diff.max((analytic - numeric).abs());
                            scale = scale.max(analytic.abs()).max(numeric.abs());
                        }
                    }
                }
                assert!(diff / scale < 1e-5, "{kind:?}: {}", diff / scale);
            }
        }
    }
}
