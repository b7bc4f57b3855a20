//! Sparse symmetric matrices and an up-looking sparse Cholesky
//! factorization with a level-structure nested dissection ordering.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::scalar::Real;

const NONE: usize = usize::MAX;

/// Accumulates symmetric entries; only the upper triangle is kept.
#[derive(Clone, Debug)]
pub struct TripletBuilder<T = f64> {
    n: usize,
    entries: Vec<(usize, usize, T)>,
}

impl<T: Real> TripletBuilder<T> {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(n: usize, cap: usize) -> Self {
        Self {
            n,
            entries: Vec::with_capacity(cap),
        }
    }

    /// Adds `v` to `A[i][j]` (and, implicitly, `A[j][i]`). Off-diagonal
    /// contributions must be added once per unordered pair.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: T) {
        debug_assert!(i < self.n && j < self.n);
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        self.entries.push((r, c, v));
    }

    pub fn build(mut self) -> SparseSym<T> {
        self.entries.sort_unstable_by_key(|&(r, c, _)| (c, r));
        let n = self.n;
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::with_capacity(self.entries.len());
        let mut values: Vec<T> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in self.entries {
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
            } else {
                row_idx.push(r);
                values.push(v);
                col_ptr[c + 1] += 1;
                last = Some((r, c));
            }
        }
        for c in 0..n {
            col_ptr[c + 1] += col_ptr[c];
        }
        SparseSym {
            n,
            col_ptr,
            row_idx,
            values,
        }
    }
}

/// Symmetric matrix stored as its upper triangle in compressed columns.
#[derive(Clone, Debug)]
pub struct SparseSym<T = f64> {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> SparseSym<T> {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz_upper(&self) -> usize {
        self.values.len()
    }

    /// Iterates `(row, col, value)` over the stored upper triangle.
    pub fn upper_entries(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.n).flat_map(move |c| {
            (self.col_ptr[c]..self.col_ptr[c + 1]).map(move |p| (self.row_idx[p], c, self.values[p]))
        })
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        let rows = &self.row_idx[self.col_ptr[c]..self.col_ptr[c + 1]];
        match rows.binary_search(&r) {
            Ok(k) => self.values[self.col_ptr[c] + k],
            Err(_) => T::zero(),
        }
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.n];
        for c in 0..self.n {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[p];
                let v = self.values[p];
                y[r] += v * x[c];
                if r != c {
                    y[c] += v * x[r];
                }
            }
        }
        y
    }

    /// Adjacency lists of the off-diagonal pattern.
    /// `|A| x`, entrywise absolute values of the matrix.
    pub fn abs_matvec(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.n];
        for (r, c, v) in self.upper_entries() {
            let v = v.abs();
            y[r] += v * x[c];
            if r != c {
                y[c] += v * x[r];
            }
        }
        y
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for c in 0..self.n {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[p];
                if r != c {
                    adj[r].push(c);
                    adj[c].push(r);
                }
            }
        }
        adj
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Fill-reducing permutation: nested dissection on the graph with the
/// `last` vertices (dense rows) appended at the end. Returns `perm` with
/// `perm[new] = old`.
pub fn nested_dissection(adj: &[Vec<usize>], last: &[usize]) -> Vec<usize> {
    let n = adj.len();
    let mut excluded = vec![false; n];
    for &v in last {
        excluded[v] = true;
    }
    let mut order = Vec::with_capacity(n);
    let mut in_set = vec![false; n];
    let mut level = vec![NONE; n];
    let nodes: Vec<usize> = (0..n).filter(|&v| !excluded[v]).collect();
    let mut stack = vec![Task::Split(nodes)];
    while let Some(task) = stack.pop() {
        match task {
            Task::Emit(v) => order.extend(v),
            Task::Split(set) => {
                if set.len() <= 64 {
                    order.extend(set);
                    continue;
                }
                for &v in &set {
                    in_set[v] = true;
                }
                let (a, b, sep) = bisect(adj, &set, &in_set, &mut level);
                for &v in &set {
                    in_set[v] = false;
                    level[v] = NONE;
                }
                if a.is_empty() || b.is_empty() {
                    // No useful separator; keep BFS order.
                    let mut all = a;
                    all.extend(b);
                    all.extend(sep);
                    order.extend(all);
                    continue;
                }
                stack.push(Task::Emit(sep));
                stack.push(Task::Split(b));
                stack.push(Task::Split(a));
            }
        }
    }
    order.extend_from_slice(last);
    order
}

enum Task {
    Split(Vec<usize>),
    Emit(Vec<usize>),
}

fn bfs(adj: &[Vec<usize>], start: usize, in_set: &[bool], level: &mut [usize], visited: &mut Vec<usize>) -> usize {
    for &v in visited.iter() {
        level[v] = NONE;
    }
    visited.clear();
    let mut queue = VecDeque::new();
    level[start] = 0;
    queue.push_back(start);
    let mut far = start;
    while let Some(v) = queue.pop_front() {
        visited.push(v);
        far = v;
        for &w in &adj[v] {
            if in_set[w] && level[w] == NONE {
                level[w] = level[v] + 1;
                queue.push_back(w);
            }
        }
    }
    far
}

/// Splits `set` with a BFS level separator from a pseudo-peripheral vertex.
fn bisect(
    adj: &[Vec<usize>],
    set: &[usize],
    in_set: &[bool],
    level: &mut [usize],
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut visited = Vec::new();
    let mut start = set[0];
    for _ in 0..3 {
        let far = bfs(adj, start, in_set, level, &mut visited);
        if far == start {
            break;
        }
        start = far;
    }
    bfs(adj, start, in_set, level, &mut visited);
    let reached = visited.len();
    if reached < set.len() {
        // Disconnected: reached component vs the rest, empty separator.
        let comp: Vec<usize> = visited.clone();
        let rest: Vec<usize> = set.iter().copied().filter(|&v| level[v] == NONE).collect();
        return (comp, rest, Vec::new());
    }
    let depth = visited.iter().map(|&v| level[v]).max().unwrap_or(0);
    let mut counts = vec![0usize; depth + 1];
    for &v in &visited {
        counts[level[v]] += 1;
    }
    let mut acc = 0;
    let mut split = depth / 2;
    for (l, &c) in counts.iter().enumerate() {
        acc += c;
        if 2 * acc >= reached {
            split = l;
            break;
        }
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut sep = Vec::new();
    for &v in &visited {
        match level[v].cmp(&split) {
            std::cmp::Ordering::Less => a.push(v),
            std::cmp::Ordering::Equal => sep.push(v),
            std::cmp::Ordering::Greater => b.push(v),
        }
    }
    (a, b, sep)
}

/// `P A Pᵀ = L Lᵀ` with `L` in compressed columns, diagonal first.
#[derive(Clone, Debug)]
pub struct SparseCholesky<T = f64> {
    n: usize,
    perm: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<T>,
}

impl<T: Real> SparseCholesky<T> {
    /// Factors with a nested-dissection ordering, keeping `dense_last`
    /// unknowns at the end.
    pub fn factor(a: &SparseSym<T>, dense_last: &[usize]) -> Result<Self> {
        let perm = nested_dissection(&a.adjacency(), dense_last);
        Self::factor_with_perm(a, perm)
    }

    pub fn factor_with_perm(a: &SparseSym<T>, perm: Vec<usize>) -> Result<Self> {
        let n = a.n;
        if perm.len() != n {
            return Err(Error::Dimension("permutation length".into()));
        }
        let mut pinv = vec![NONE; n];
        for (new, &old) in perm.iter().enumerate() {
            pinv[old] = new;
        }
        // Upper triangle of C = P A Pᵀ in compressed columns.
        let mut counts = vec![0usize; n + 1];
        for (r, c, _) in a.upper_entries() {
            let (pr, pc) = (pinv[r], pinv[c]);
            counts[pr.max(pc) + 1] += 1;
        }
        for k in 0..n {
            counts[k + 1] += counts[k];
        }
        let cp = counts.clone();
        let mut fill = counts;
        let mut ci = vec![0usize; a.nnz_upper()];
        let mut cx = vec![T::zero(); a.nnz_upper()];
        for (r, c, v) in a.upper_entries() {
            let (pr, pc) = (pinv[r], pinv[c]);
            let (row, col) = if pr <= pc { (pr, pc) } else { (pc, pr) };
            let q = fill[col];
            fill[col] += 1;
            ci[q] = row;
            cx[q] = v;
        }

        // Elimination tree.
        let mut parent = vec![NONE; n];
        let mut ancestor = vec![NONE; n];
        for k in 0..n {
            for &row in &ci[cp[k]..cp[k + 1]] {
                let mut i = row;
                while i != NONE && i < k {
                    let next = ancestor[i];
                    ancestor[i] = k;
                    if next == NONE {
                        parent[i] = k;
                    }
                    i = next;
                }
            }
        }

        // Column counts from row patterns.
        let mut mark = vec![NONE; n];
        let mut stack = vec![0usize; n];
        let mut colcount = vec![1usize; n];
        for k in 0..n {
            let top = ereach(&cp, &ci, k, &parent, &mut stack, &mut mark);
            for &i in &stack[top..n] {
                colcount[i] += 1;
            }
        }
        let mut lp = vec![0usize; n + 1];
        for k in 0..n {
            lp[k + 1] = lp[k] + colcount[k];
        }
        let nnz = lp[n];
        let mut li = vec![0usize; nnz];
        let mut lx = vec![T::zero(); nnz];
        let mut next = lp[..n].to_vec();
        let mut x = vec![T::zero(); n];
        mark.iter_mut().for_each(|m| *m = NONE);

        for k in 0..n {
            let top = ereach(&cp, &ci, k, &parent, &mut stack, &mut mark);
            x[k] = T::zero();
            for q in cp[k]..cp[k + 1] {
                x[ci[q]] = cx[q];
            }
            let mut d = x[k];
            x[k] = T::zero();
            for &i in &stack[top..n] {
                let lki = x[i] / lx[lp[i]];
                x[i] = T::zero();
                for q in lp[i] + 1..next[i] {
                    x[li[q]] -= lx[q] * lki;
                }
                d -= lki * lki;
                let q = next[i];
                next[i] += 1;
                li[q] = k;
                lx[q] = lki;
            }
            if !(d > T::zero()) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite(perm[k]));
            }
            let q = next[k];
            next[k] += 1;
            li[q] = k;
            lx[q] = d.sqrt();
        }
        Ok(Self { n, perm, lp, li, lx })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.lx.len()
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        let mut y: Vec<T> = self.perm.iter().map(|&old| b[old]).collect();
        for j in 0..n {
            y[j] /= self.lx[self.lp[j]];
            let yj = y[j];
            for q in self.lp[j] + 1..self.lp[j + 1] {
                y[self.li[q]] -= self.lx[q] * yj;
            }
        }
        for j in (0..n).rev() {
            let mut s = y[j];
            for q in self.lp[j] + 1..self.lp[j + 1] {
                s -= self.lx[q] * y[self.li[q]];
            }
            y[j] = s / self.lx[self.lp[j]];
        }
        let mut x = vec![T::zero(); n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// Solve followed by iterative refinement until the normwise backward
    /// error `‖b − A x‖ / (‖|A| |x|‖ + ‖b‖)` is below `rel_tol` or stops
    /// improving (at most eight sweeps). Returns the solution and that error.
    pub fn solve_refined(&self, a: &SparseSym<T>, b: &[T], rel_tol: T) -> (Vec<T>, T) {
        let norm = |v: &[T]| v.iter().map(|&x| x * x).sum::<T>().sqrt();
        let bnorm = norm(b);
        let mut x = self.solve(b);
        let mut best = (x.clone(), T::infinity());
        for _ in 0..9 {
            let ax = a.matvec(&x);
            let r: Vec<T> = b.iter().zip(&ax).map(|(&bi, &ai)| bi - ai).collect();
            let absx: Vec<T> = x.iter().map(|v| v.abs()).collect();
            let denom = (norm(&a.abs_matvec(&absx)) + bnorm).max(T::min_positive_value());
            let rel = norm(&r) / denom;
            if rel >= best.1 {
                break;
            }
            best = (x.clone(), rel);
            if rel <= rel_tol {
                break;
            }
            let dx = self.solve(&r);
            for (xi, d) in x.iter_mut().zip(dx) {
                *xi += d;
            }
        }
        best
    }
}

/// Nonzero pattern of row `k` of `L` (excluding the diagonal), returned in
/// `stack[top..n]`.
fn ereach(
    cp: &[usize],
    ci: &[usize],
    k: usize,
    parent: &[usize],
    stack: &mut [usize],
    mark: &mut [usize],
) -> usize {
    let n = parent.len();
    let mut top = n;
    mark[k] = k;
    let mut path = Vec::new();
    for &row in &ci[cp[k]..cp[k + 1]] {
        let mut i = row;
        if i >= k {
            continue;
        }
        path.clear();
        while mark[i] != k {
            path.push(i);
            mark[i] = k;
            i = parent[i];
        }
        while let Some(v) = path.pop() {
            top -= 1;
            stack[top] = v;
        }
    }
    top
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_grid(nx: usize, ny: usize) -> SparseSym<f64> {
        let n = nx * ny;
        let mut t = TripletBuilder::new(n + 1);
        let id = |i: usize, j: usize| i * ny + j;
        for i in 0..nx {
            for j in 0..ny {
                t.add(id(i, j), id(i, j), 4.0 + 0.01);
                if i + 1 < nx {
                    t.add(id(i, j), id(i + 1, j), -1.0);
                }
                if j + 1 < ny {
                    t.add(id(i, j), id(i, j + 1), -1.0);
                }
                // dense last row
                t.add(id(i, j), n, 0.001);
            }
        }
        t.add(n, n, 10.0);
        t.build()
    }

    #[test]
    fn factor_and_solve_grid() {
        let a = laplacian_grid(30, 25);
        let n = a.dim();
        let chol = SparseCholesky::factor(&a, &[n - 1]).unwrap();
        let x: Vec<f64> = (0..n).map(|i| ((i * 37) % 17) as f64 - 8.0).collect();
        let b = a.matvec(&x);
        let (y, rel) = chol.solve_refined(&a, &b, 1e-13);
        assert!(rel < 1e-13);
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() < 1e-10);
        }
        // Nested dissection keeps fill well below dense.
        assert!(chol.nnz() < n * n / 10);
    }

    #[test]
    fn duplicates_are_summed() {
        let mut t = TripletBuilder::new(2);
        t.add(0, 1, 1.0);
        t.add(1, 0, 2.0);
        t.add(0, 0, 5.0);
        t.add(1, 1, 5.0);
        let a = t.build();
        assert_eq!(a.get(1, 0), 3.0);
        assert_eq!(a.matvec(&[1.0, 1.0]), vec![8.0, 8.0]);
    }

    #[test]
    fn ordering_is_permutation() {
        let a = laplacian_grid(12, 9);
        let p = nested_dissection(&a.adjacency(), &[a.dim() - 1]);
        let mut s = p.clone();
        s.sort_unstable();
        assert_eq!(s, (0..a.dim()).collect::<Vec<_>>());
        assert_eq!(*p.last().unwrap(), a.dim() - 1);
    }

    #[test]
    fn indefinite_is_reported() {
        let mut t = TripletBuilder::new(2);
        t.add(0, 0, 1.0);
        t.add(0, 1, 2.0);
        t.add(1, 1, 1.0);
        assert!(SparseCholesky::factor(&t.build(), &[]).is_err());
    }
}
