//! Direct solves for the structurally sparse KKT matrices of the local
//! subproblems: reverse Cuthill-McKee reordering followed by a banded LU with
//! partial pivoting. Small or wide-band systems fall back to dense LU.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

const DENSE_CUTOFF: usize = 48;

/// Reverse Cuthill-McKee ordering of the symmetrized sparsity pattern.
/// Returns `order[new] = old`.
pub fn rcm_order(mat: &DMatrix<f64>) -> Vec<usize> {
    let n = mat.nrows();
    let mut adj = vec![Vec::new(); n];
    for j in 0..n {
        for i in (j + 1)..n {
            if mat[(i, j)] != 0.0 || mat[(j, i)] != 0.0 {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    let degree: Vec<usize> = adj.iter().map(|a| a.len()).collect();
    for a in adj.iter_mut() {
        a.sort_by_key(|&v| (degree[v], v));
    }

    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let bfs = |start: usize, visited: &mut [bool], out: &mut Vec<usize>| -> usize {
        let mut q = VecDeque::new();
        visited[start] = true;
        q.push_back(start);
        let mut last = start;
        while let Some(v) = q.pop_front() {
            out.push(v);
            last = v;
            for &w in &adj[v] {
                if !visited[w] {
                    visited[w] = true;
                    q.push_back(w);
                }
            }
        }
        last
    };

    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&v| (degree[v], v));
    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        // One pass to move towards a peripheral node of this component.
        let mut scratch = visited.clone();
        let mut comp = Vec::new();
        let far = bfs(seed, &mut scratch, &mut comp);
        bfs(far, &mut visited, &mut order);
    }
    order.reverse();
    order
}

fn half_bandwidth(mat: &DMatrix<f64>, order: &[usize]) -> usize {
    let n = mat.nrows();
    let mut pos = vec![0; n];
    for (new, &old) in order.iter().enumerate() {
        pos[old] = new;
    }
    let mut bw = 0;
    for j in 0..n {
        for i in 0..n {
            if mat[(i, j)] != 0.0 {
                bw = bw.max(pos[i].abs_diff(pos[j]));
            }
        }
    }
    bw
}

#[derive(Clone, Debug)]
struct BandLu {
    n: usize,
    kl: usize,
    upper: usize,
    width: usize,
    order: Vec<usize>,
    rows: Vec<f64>,
    pivots: Vec<usize>,
    multipliers: Vec<f64>,
}

impl BandLu {
    fn factor(mat: &DMatrix<f64>, order: Vec<usize>, bw: usize) -> Option<Self> {
        let n = mat.nrows();
        let kl = bw;
        let upper = 2 * bw;
        let width = kl + upper + 1;
        let mut rows = vec![0.0; n * width];
        for (ni, &oi) in order.iter().enumerate() {
            let lo = ni.saturating_sub(kl);
            let hi = (ni + bw).min(n - 1);
            for nj in lo..=hi {
                rows[ni * width + nj + kl - ni] = mat[(oi, order[nj])];
            }
        }
        let at = |i: usize, j: usize| i * width + j + kl - i;
        let mut pivots = vec![0; n];
        let mut multipliers = vec![0.0; n * kl.max(1)];
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = rows[at(k, k)].abs();
            for i in (k + 1)..=last {
                let v = rows[at(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return None;
            }
            pivots[k] = p;
            let jmax = (k + upper).min(n - 1);
            if p != k {
                for j in k..=jmax {
                    rows.swap(at(k, j), at(p, j));
                }
            }
            let piv = rows[at(k, k)];
            for i in (k + 1)..=last {
                let m = rows[at(i, k)] / piv;
                multipliers[k * kl + (i - k - 1)] = m;
                rows[at(i, k)] = 0.0;
                if m != 0.0 {
                    for j in (k + 1)..=jmax {
                        rows[at(i, j)] -= m * rows[at(k, j)];
                    }
                }
            }
        }
        Some(Self {
            n,
            kl,
            upper,
            width,
            order,
            rows,
            pivots,
            multipliers,
        })
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let kl = self.kl;
        let at = |i: usize, j: usize| i * self.width + j + kl - i;
        let mut b: Vec<f64> = self.order.iter().map(|&o| rhs[o]).collect();
        for k in 0..n {
            b.swap(k, self.pivots[k]);
            let bk = b[k];
            for i in (k + 1)..=(k + kl).min(n - 1) {
                b[i] -= self.multipliers[k * kl + (i - k - 1)] * bk;
            }
        }
        for k in (0..n).rev() {
            let mut s = b[k];
            for j in (k + 1)..=(k + self.upper).min(n - 1) {
                s -= self.rows[at(k, j)] * b[j];
            }
            b[k] = s / self.rows[at(k, k)];
        }
        let mut x = DVector::zeros(n);
        for (new, &old) in self.order.iter().enumerate() {
            x[old] = b[new];
        }
        x
    }
}

/// LU factorization of a square matrix, banded when that pays off.
#[derive(Clone, Debug)]
pub struct Factorization(Inner);

#[derive(Clone, Debug)]
enum Inner {
    Band(BandLu),
    Dense(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl Factorization {
    /// `None` when the matrix is numerically singular.
    pub fn new(mat: &DMatrix<f64>) -> Option<Self> {
        assert!(mat.is_square(), "factorization needs a square matrix");
        let n = mat.nrows();
        if n >= DENSE_CUTOFF {
            let order = rcm_order(mat);
            let bw = half_bandwidth(mat, &order);
            if 4 * bw < n {
                return BandLu::factor(mat, order, bw).map(|f| Self(Inner::Band(f)));
            }
        }
        let lu = mat.clone().lu();
        if !lu.is_invertible() {
            return None;
        }
        Some(Self(Inner::Dense(lu)))
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match &self.0 {
            Inner::Band(f) => f.solve(rhs),
            Inner::Dense(lu) => lu.solve(rhs).expect("checked invertible"),
        }
    }

    pub fn is_banded(&self) -> bool {
        matches!(self.0, Inner::Band(_))
    }
}

pub fn solve(mat: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let f = Factorization::new(mat)?;
    let x = f.solve(rhs);
    x.iter().all(|v| v.is_finite()).then_some(x)
}
