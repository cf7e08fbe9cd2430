//! Dense and sparse numerical kernel: embedding storage with Adam state,
//! temperature-scaled cosine similarity, and symmetric-normalized graph
//! propagation.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::error::{check_len, Error, Result};
use crate::rng::Rng;

/// Smallest norm accepted by the cosine kernels.
pub const MIN_NORM: f64 = 1e-12;

/// Sparse per-row gradients. Ordered so that updates are applied in a fixed order.
pub type RowGrads = BTreeMap<usize, Vec<f64>>;

/// Adds `scale * grad` into the entry for `row`.
pub fn accumulate(grads: &mut RowGrads, row: usize, grad: &[f64], scale: f64) {
    let entry = grads.entry(row).or_insert_with(|| vec![0.0; grad.len()]);
    for (e, g) in entry.iter_mut().zip(grad) {
        *e += scale * g;
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len(rows * cols, data.len())?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Stacks the rows of `top` above the rows of `bottom`.
    pub fn vstack(top: &[f64], bottom: &[f64], cols: usize) -> Result<Self> {
        if cols == 0 || !top.len().is_multiple_of(cols) || !bottom.len().is_multiple_of(cols) {
            return Err(Error::BadParam("vstack: lengths not a multiple of cols".into()));
        }
        let mut data = Vec::with_capacity(top.len() + bottom.len());
        data.extend_from_slice(top);
        data.extend_from_slice(bottom);
        Ok(Matrix {
            rows: data.len() / cols,
            cols,
            data,
        })
    }
}

/// Dense per-id parameter vectors with paired Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    step_count: u64,
}

impl EmbeddingTable {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        EmbeddingTable {
            rows,
            dim,
            values: vec![0.0; rows * dim],
            adam_m: vec![0.0; rows * dim],
            adam_v: vec![0.0; rows * dim],
            step_count: 0,
        }
    }

    /// Entries uniform in `[-0.5/sqrt(dim), 0.5/sqrt(dim)]`; rows are redrawn
    /// until their norm clears [`MIN_NORM`].
    pub fn uniform(rows: usize, dim: usize, rng: &mut Rng) -> Self {
        let mut table = Self::zeros(rows, dim);
        let bound = 0.5 / (dim as f64).sqrt();
        for r in 0..rows {
            loop {
                let row = table.row_mut(r);
                for x in row.iter_mut() {
                    *x = rng.random_range(-bound..bound);
                }
                if norm(row) > MIN_NORM {
                    break;
                }
            }
        }
        table
    }

    /// Wraps existing values with fresh optimizer state.
    pub fn from_values(rows: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        check_len(rows * dim, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding values"));
        }
        let mut table = Self::zeros(rows, dim);
        table.values = values;
        Ok(table)
    }

    /// Restores a table together with its optimizer state.
    pub fn from_parts(
        rows: usize,
        dim: usize,
        values: Vec<f64>,
        adam_m: Vec<f64>,
        adam_v: Vec<f64>,
        step_count: u64,
    ) -> Result<Self> {
        let mut table = Self::from_values(rows, dim, values)?;
        check_len(rows * dim, adam_m.len())?;
        check_len(rows * dim, adam_v.len())?;
        if adam_m.iter().chain(&adam_v).any(|v| !v.is_finite()) || adam_v.iter().any(|&v| v < 0.0) {
            return Err(Error::NonFinite("adam moments"));
        }
        table.adam_m = adam_m;
        table.adam_v = adam_v;
        table.step_count = step_count;
        Ok(table)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.dim..(r + 1) * self.dim]
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.adam_m, &self.adam_v)
    }

    pub fn check_row(&self, r: usize, kind: &'static str) -> Result<()> {
        if r < self.rows {
            Ok(())
        } else {
            Err(Error::IdOutOfRange {
                kind,
                id: r,
                size: self.rows,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::BadParam(format!("adam lr must be > 0, got {}", self.lr)));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::BadParam("adam betas must lie in (0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::BadParam("adam eps must be > 0".into()));
        }
        Ok(())
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam step with bias correction on the rows present in `grads`.
///
/// Moments of absent rows are left untouched (lazy update); the bias
/// correction uses the table-wide step counter, which advances once per call.
pub fn adam_step(table: &mut EmbeddingTable, grads: &RowGrads, hyper: &AdamHyper) -> Result<()> {
    hyper.validate()?;
    for (&row, g) in grads {
        table.check_row(row, "row")?;
        check_len(table.dim, g.len())?;
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { row });
        }
    }
    table.step_count += 1;
    let t = table.step_count as f64;
    let bias1 = 1.0 - hyper.beta1.powf(t);
    let bias2 = 1.0 - hyper.beta2.powf(t);
    let dim = table.dim;
    for (&row, g) in grads {
        let span = row * dim..(row + 1) * dim;
        let values = &mut table.values[span.clone()];
        let m = &mut table.adam_m[span.clone()];
        let v = &mut table.adam_v[span];
        for k in 0..dim {
            m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * g[k];
            v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * g[k] * g[k];
            let m_hat = m[k] / bias1;
            let v_hat = v[k] / bias2;
            values[k] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Inner product with four independent partial sums.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine_parts(u: &[f64], i: &[f64], tau: f64) -> Result<(f64, f64, f64)> {
    check_len(u.len(), i.len())?;
    if !(tau > 0.0) {
        return Err(Error::BadParam(format!("temperature must be > 0, got {tau}")));
    }
    let nu = norm(u);
    if !(nu > MIN_NORM) {
        return Err(Error::ZeroNorm(nu));
    }
    let ni = norm(i);
    if !(ni > MIN_NORM) {
        return Err(Error::ZeroNorm(ni));
    }
    Ok((dot(u, i) / (nu * ni), nu, ni))
}

/// `(1/tau) * cos(u, i)`.
pub fn cosine_score(u: &[f64], i: &[f64], tau: f64) -> Result<f64> {
    let (cos, _, _) = cosine_parts(u, i, tau)?;
    Ok(cos / tau)
}

/// Gradients of [`cosine_score`] with respect to `u` and `i`.
pub fn cosine_score_grad(u: &[f64], i: &[f64], tau: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (cos, nu, ni) = cosine_parts(u, i, tau)?;
    let (a, bu, bi) = cosine_grad_coeffs(cos, nu, ni, tau);
    let grad_u = u.iter().zip(i).map(|(&uk, &ik)| a * ik - bu * uk).collect();
    let grad_i = u.iter().zip(i).map(|(&uk, &ik)| a * uk - bi * ik).collect();
    Ok((grad_u, grad_i))
}

/// `(a, b_u, b_i)` with `d score/du = a*i - b_u*u` and `d score/di = a*u - b_i*i`.
pub fn cosine_grad_coeffs(cos: f64, nu: f64, ni: f64, tau: f64) -> (f64, f64, f64) {
    (1.0 / (nu * ni * tau), cos / (nu * nu * tau), cos / (ni * ni * tau))
}

/// Symmetric-normalized adjacency `D^{-1/2} A D^{-1/2}` in CSR layout.
#[derive(Debug, Clone, PartialEq)]
pub struct NormAdjacency {
    node_count: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl NormAdjacency {
    /// Builds from undirected edges. Duplicates and self-loops are dropped.
    pub fn from_undirected(node_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut neighbours = vec![Vec::new(); node_count];
        for (a, b) in edges {
            for x in [a, b] {
                if x >= node_count {
                    return Err(Error::IdOutOfRange {
                        kind: "node",
                        id: x,
                        size: node_count,
                    });
                }
            }
            if a != b {
                neighbours[a].push(b);
                neighbours[b].push(a);
            }
        }
        for list in &mut neighbours {
            list.sort_unstable();
            list.dedup();
        }
        let degree: Vec<f64> = neighbours.iter().map(|l| l.len() as f64).collect();
        let mut offsets = Vec::with_capacity(node_count + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for (r, list) in neighbours.iter().enumerate() {
            for &c in list {
                cols.push(c);
                weights.push(1.0 / (degree[r] * degree[c]).sqrt());
            }
            offsets.push(cols.len());
        }
        Ok(NormAdjacency {
            node_count,
            offsets,
            cols,
            weights,
        })
    }

    /// User-item bipartite graph: users occupy nodes `0..n_users`, items follow.
    pub fn bipartite(n_users: usize, n_items: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut edges = Vec::new();
        for (u, i) in pairs {
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
            edges.push((u, n_users + i));
        }
        Self::from_undirected(n_users + n_items, edges)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    /// All directed entries `(row, col, weight)`; each undirected edge appears twice.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.node_count)
            .flat_map(move |r| (self.offsets[r]..self.offsets[r + 1]).map(move |k| (r, self.cols[k], self.weights[k])))
    }

    fn apply(&self, x: &Matrix, out: &mut Matrix) {
        let d = x.cols();
        for r in 0..self.node_count {
            let dst = out.row_mut(r);
            dst.fill(0.0);
            for k in self.offsets[r]..self.offsets[r + 1] {
                let w = self.weights[k];
                for (o, s) in dst.iter_mut().zip(x.row(self.cols[k])) {
                    *o += w * s;
                }
            }
            debug_assert_eq!(dst.len(), d);
        }
    }
}

/// Mean of `A^l * layer0` over `l = 0..=layers`.
pub fn propagate(layer0: &Matrix, adj: &NormAdjacency, layers: usize) -> Result<Matrix> {
    check_len(adj.node_count(), layer0.rows())?;
    if layers == 0 {
        return Ok(layer0.clone());
    }
    let mut acc = layer0.clone();
    let mut current = layer0.clone();
    let mut next = Matrix::zeros(layer0.rows(), layer0.cols());
    for _ in 0..layers {
        adj.apply(&current, &mut next);
        for (a, n) in acc.as_mut_slice().iter_mut().zip(next.as_slice()) {
            *a += n;
        }
        std::mem::swap(&mut current, &mut next);
    }
    let denom = (layers + 1) as f64;
    for a in acc.as_mut_slice() {
        *a /= denom;
    }
    Ok(acc)
}

/// Adjoint of [`propagate`]. The normalized adjacency is symmetric, so the
/// adjoint of the (linear) propagation is the propagation itself.
pub fn propagate_backward(grad_out: &Matrix, adj: &NormAdjacency, layers: usize) -> Result<Matrix> {
    propagate(grad_out, adj, layers)
}
