//! Symmetric quasi-definite factorization on an envelope (skyline) layout.
//!
//! The symbolic phase orders the graph with reverse Cuthill-McKee, moving
//! very dense nodes to the end so they do not widen every row. The numeric
//! phase runs a row-oriented Crout LDLᵀ without pivoting; pivots with the
//! wrong sign or tiny magnitude are replaced by a small regularization.

use nalgebra::DVector;
use std::collections::VecDeque;

/// Reverse Cuthill-McKee ordering. Returns `perm` with `perm[k]` the original
/// node placed at position `k`.
pub fn rcm_order(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    if n == 0 {
        return Vec::new();
    }
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let avg = degree.iter().sum::<usize>() as f64 / n as f64;
    let threshold = (8.0 * avg).max(64.0);
    let dense: Vec<bool> = degree.iter().map(|&d| d as f64 > threshold).collect();

    let mut visited = dense.clone();
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).filter(|&i| !dense[i]).collect();
    by_degree.sort_by_key(|&i| degree[i]);

    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        let start = pseudo_peripheral(adj, &dense, &degree, seed);
        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| degree[w]);
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order.extend((0..n).filter(|&i| dense[i]));
    order
}

fn bfs_levels(adj: &[Vec<usize>], skip: &[bool], start: usize) -> Vec<Vec<usize>> {
    let mut seen = skip.to_vec();
    seen[start] = true;
    let mut levels = vec![vec![start]];
    loop {
        let mut next = Vec::new();
        for &v in levels.last().unwrap() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    next.push(w);
                }
            }
        }
        if next.is_empty() {
            return levels;
        }
        levels.push(next);
    }
}

fn pseudo_peripheral(adj: &[Vec<usize>], skip: &[bool], degree: &[usize], seed: usize) -> usize {
    let mut node = seed;
    let mut ecc = bfs_levels(adj, skip, node).len();
    for _ in 0..5 {
        let levels = bfs_levels(adj, skip, node);
        let candidate = *levels
            .last()
            .unwrap()
            .iter()
            .min_by_key(|&&w| degree[w])
            .unwrap();
        let cand_ecc = bfs_levels(adj, skip, candidate).len();
        if cand_ecc <= ecc {
            break;
        }
        node = candidate;
        ecc = cand_ecc;
    }
    node
}

/// Envelope LDLᵀ factor for a symmetric matrix with a fixed sparsity pattern.
#[derive(Debug, Clone)]
pub struct EnvelopeLdl {
    n: usize,
    perm: Vec<usize>,
    iperm: Vec<usize>,
    first: Vec<usize>,
    offset: Vec<usize>,
    values: Vec<f64>,
    sign: Vec<f64>,
    regularized: usize,
}

impl EnvelopeLdl {
    /// `pattern` lists off-diagonal pairs that may become nonzero; the
    /// diagonal is always present. `signs[i]` is the expected pivot sign of
    /// original row `i` (+1 for primal blocks, -1 for multiplier blocks).
    pub fn new(n: usize, pattern: &[(usize, usize)], signs: &[f64]) -> Self {
        assert_eq!(signs.len(), n);
        let mut adj = vec![Vec::new(); n];
        for &(i, j) in pattern {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        let perm = rcm_order(&adj);
        let mut iperm = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            iperm[p] = k;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for (i, nbrs) in adj.iter().enumerate() {
            let pi = iperm[i];
            for &j in nbrs {
                let pj = iperm[j];
                if pj < pi {
                    first[pi] = first[pi].min(pj);
                }
            }
        }
        let mut offset = vec![0; n + 1];
        for k in 0..n {
            offset[k + 1] = offset[k] + (k - first[k] + 1);
        }
        let sign = perm.iter().map(|&p| signs[p]).collect();
        Self {
            n,
            perm,
            iperm,
            first,
            values: vec![0.0; offset[n]],
            offset,
            sign,
            regularized: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored entries in the lower envelope, diagonal included.
    pub fn envelope_size(&self) -> usize {
        self.values.len()
    }

    /// Pivots replaced during the last factorization.
    pub fn regularized_pivots(&self) -> usize {
        self.regularized
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Adds `v` to the symmetric entry `(i, j)`. Call once per unordered pair.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (mut r, mut c) = (self.iperm[i], self.iperm[j]);
        if r < c {
            std::mem::swap(&mut r, &mut c);
        }
        debug_assert!(c >= self.first[r], "entry ({i}, {j}) outside the envelope");
        self.values[self.offset[r] + c - self.first[r]] += v;
    }

    /// Factorizes the assembled matrix in place. Pivots whose signed value
    /// falls below `pivot_floor` are set to `sign * reg`.
    pub fn factor(&mut self, pivot_floor: f64, reg: f64) {
        self.regularized = 0;
        for i in 0..self.n {
            let fi = self.first[i];
            let oi = self.offset[i];
            // Row i temporarily holds u_ik = L_ik * D_k.
            for j in fi..i {
                let fj = self.first[j];
                let oj = self.offset[j];
                let k0 = fi.max(fj);
                let (head, tail) = self.values.split_at_mut(oi);
                let row_j = &head[oj + k0 - fj..oj + j - fj];
                let row_i = &tail[k0 - fi..j - fi];
                let dot: f64 = row_i.iter().zip(row_j).map(|(a, b)| a * b).sum();
                tail[j - fi] -= dot;
            }
            let mut d = self.values[oi + i - fi];
            for k in fi..i {
                let dk = self.values[self.offset[k + 1] - 1];
                let u = self.values[oi + k - fi];
                let l = u / dk;
                d -= u * l;
                self.values[oi + k - fi] = l;
            }
            let s = self.sign[i];
            if !(s * d > pivot_floor) {
                d = s * reg;
                self.regularized += 1;
            }
            self.values[oi + i - fi] = d;
        }
    }

    /// Solves with the current factor.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let oi = self.offset[i];
            let row = &self.values[oi..oi + i - fi];
            let dot: f64 = row.iter().zip(&x[fi..i]).map(|(l, v)| l * v).sum();
            x[i] -= dot;
        }
        for i in 0..n {
            x[i] /= self.values[self.offset[i + 1] - 1];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let oi = self.offset[i];
            let xi = x[i];
            for (k, l) in (fi..i).zip(&self.values[oi..oi + i - fi]) {
                x[k] -= l * xi;
            }
        }
        let mut out = DVector::zeros(n);
        for (k, &p) in self.perm.iter().enumerate() {
            out[p] = x[k];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};

    fn random_quasi_definite(n: usize, m: usize, density: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let mut a = DMatrix::<f64>::zeros(n + m, n + m);
        for i in 0..n {
            for j in 0..i {
                if rng.gen::<f64>() < density {
                    let v = rng.gen_range(-1.0..1.0);
                    a[(i, j)] = v;
                    a[(j, i)] = v;
                }
            }
        }
        for i in 0..n {
            let row_sum: f64 = (0..n).map(|j| a[(i, j)].abs()).sum();
            a[(i, i)] = row_sum + 1.0;
        }
        for k in 0..m {
            for j in 0..n {
                if rng.gen::<f64>() < density {
                    let v = rng.gen_range(-1.0..1.0);
                    a[(n + k, j)] = v;
                    a[(j, n + k)] = v;
                }
            }
            a[(n + k, n + k)] = -1e-3;
        }
        a
    }

    fn factor_dense(a: &DMatrix<f64>, n: usize) -> EnvelopeLdl {
        let dim = a.nrows();
        let mut pattern = Vec::new();
        for i in 0..dim {
            for j in 0..i {
                if a[(i, j)] != 0.0 {
                    pattern.push((i, j));
                }
            }
        }
        let signs: Vec<f64> = (0..dim).map(|i| if i < n { 1.0 } else { -1.0 }).collect();
        let mut f = EnvelopeLdl::new(dim, &pattern, &signs);
        for &(i, j) in &pattern {
            f.add(i, j, a[(i, j)]);
        }
        for i in 0..dim {
            f.add(i, i, a[(i, i)]);
        }
        f.factor(1e-14, 1e-10);
        f
    }

    #[test]
    fn solves_quasi_definite_systems() {
        for seed in 0..5 {
            let a = random_quasi_definite(30, 10, 0.15, seed);
            let f = factor_dense(&a, 30);
            assert_eq!(f.regularized_pivots(), 0);
            let b = DVector::from_fn(40, |i, _| (i as f64 * 0.37).sin());
            let x = f.solve(&b);
            let r = &a * &x - &b;
            assert!(r.amax() < 1e-10, "residual {}", r.amax());
        }
    }

    #[test]
    fn banded_matrix_keeps_a_narrow_envelope() {
        // A shuffled tridiagonal matrix: RCM should recover bandwidth one.
        let n = 200;
        let shuffle: Vec<usize> = (0..n).map(|i| (i * 73) % n).collect();
        let mut pattern = Vec::new();
        for i in 1..n {
            pattern.push((shuffle[i], shuffle[i - 1]));
        }
        let f = EnvelopeLdl::new(n, &pattern, &vec![1.0; n]);
        assert_eq!(f.envelope_size(), 2 * n - 1);
    }

    #[test]
    fn dense_node_goes_last() {
        let n = 300;
        let mut pattern: Vec<(usize, usize)> = (1..n - 1).map(|i| (i, i - 1)).collect();
        pattern.extend((0..n - 1).map(|i| (n - 1, i)));
        let f = EnvelopeLdl::new(n, &pattern, &vec![1.0; n]);
        // Bandwidth-one chain plus one full last row.
        assert!(f.envelope_size() <= 2 * (n - 1) + n);
    }
}
