//! Symmetric matrices and top-eigenpair solvers.
//!
//! Small matrices go through cyclic Jacobi. Larger ones use Lanczos with full
//! reorthogonalization, locking of converged Ritz pairs and deflated restarts,
//! so repeated eigenvalues (disconnected blocks, identity) are all recovered.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense (row-major, both triangles stored) or row-sparse symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum SymmetricMatrix {
    Dense { n: usize, data: Vec<f64> },
    Sparse { n: usize, rows: Vec<Vec<(usize, f64)>> },
}

impl SymmetricMatrix {
    /// Builds a dense matrix from the lower triangle of `f(i, j)` (`j <= i`);
    /// the upper triangle is mirrored, so symmetry is exact.
    pub fn dense_from_lower(n: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> Self {
        let mut data = vec![0.0; n * n];
        data.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
            for (j, x) in row.iter_mut().enumerate().take(i + 1) {
                *x = f(i, j);
            }
        });
        for i in 0..n {
            for j in i + 1..n {
                data[i * n + j] = data[j * n + i];
            }
        }
        SymmetricMatrix::Dense { n, data }
    }

    pub fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        Self::dense_from_lower(m.nrows(), |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
    }

    /// Sparse matrix from rows of `(column, value)`; rows are sorted by column.
    /// The caller is responsible for providing a symmetric pattern.
    pub fn sparse(n: usize, mut rows: Vec<Vec<(usize, f64)>>) -> Self {
        for r in &mut rows {
            r.sort_by_key(|e| e.0);
        }
        SymmetricMatrix::Sparse { n, rows }
    }

    pub fn n(&self) -> usize {
        match self {
            SymmetricMatrix::Dense { n, .. } | SymmetricMatrix::Sparse { n, .. } => *n,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            SymmetricMatrix::Dense { n, data } => data[i * n + j],
            SymmetricMatrix::Sparse { rows, .. } => rows[i]
                .binary_search_by_key(&j, |e| e.0)
                .map(|k| rows[i][k].1)
                .unwrap_or(0.0),
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        match self {
            SymmetricMatrix::Dense { n, data } => {
                y.par_iter_mut().enumerate().for_each(|(i, yi)| {
                    let row = &data[i * n..(i + 1) * n];
                    *yi = row.iter().zip(x).map(|(a, b)| a * b).sum();
                });
            }
            SymmetricMatrix::Sparse { rows, .. } => {
                y.par_iter_mut().zip(rows.par_iter()).for_each(|(yi, row)| {
                    *yi = row.iter().map(|&(j, a)| a * x[j]).sum();
                });
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        match self {
            SymmetricMatrix::Dense { data, .. } => data.iter().map(|x| x * x).sum::<f64>().sqrt(),
            SymmetricMatrix::Sparse { rows, .. } => rows
                .iter()
                .flat_map(|r| r.iter().map(|e| e.1 * e.1))
                .sum::<f64>()
                .sqrt(),
        }
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, |i, j| self.get(i, j))
    }

    /// `self - other`, dense.
    pub fn difference(&self, other: &SymmetricMatrix) -> SymmetricMatrix {
        SymmetricMatrix::dense_from_lower(self.n(), |i, j| self.get(i, j) - other.get(i, j))
    }

    /// ASCII dump: `n` on the first line, then row `i` of the lower triangle
    /// (`i + 1` values) per line.
    pub fn write_lower<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.n();
        writeln!(w, "{n}")?;
        for i in 0..n {
            let row: Vec<String> = (0..=i).map(|j| format!("{}", self.get(i, j))).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    }

    pub fn read_lower(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let (ln, header) = lines.next().ok_or_else(|| Error::parse(1, "missing header"))?;
        let n: usize = header
            .trim()
            .parse()
            .map_err(|_| Error::parse(ln + 1, "header must be the matrix order"))?;
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n.min(1 << 16));
        for (ln, line) in lines {
            let i = rows.len();
            if i >= n {
                return Err(Error::parse(ln + 1, "more rows than the declared order"));
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(ln + 1, e.to_string()))?;
            if vals.len() != i + 1 {
                return Err(Error::parse(ln + 1, format!("row {i} needs {} values", i + 1)));
            }
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse(ln + 1, "non-finite entry"));
            }
            rows.push(vals);
        }
        if rows.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                found: rows.len(),
            });
        }
        Ok(Self::dense_from_lower(n, |i, j| rows[i][j]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenSolver {
    /// Jacobi up to [`DENSE_FALLBACK_LIMIT`], Lanczos beyond.
    #[default]
    Auto,
    Jacobi,
    Lanczos,
}

pub const DENSE_FALLBACK_LIMIT: usize = 512;

/// Eigenpairs sorted by descending eigenvalue; vectors are columns.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

/// All eigenpairs of a dense symmetric matrix by cyclic Jacobi rotations.
///
/// A rotation is skipped when `|a_pq|` is negligible next to `sqrt(|a_pp·a_qq|)`
/// (or next to ‖A‖_F); the sweeps stop once a full sweep rotates nothing.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> EigenPairs {
    let n = a.nrows();
    // Row-major working copy with a padded stride (power-of-two strides
    // thrash the cache in the column pass); `vt` holds eigenvectors as rows.
    let ld = n + 8;
    let mut m = vec![0.0; n * ld];
    for i in 0..n {
        for j in 0..n {
            m[i * ld + j] = 0.5 * (a[(i, j)] + a[(j, i)]);
        }
    }
    let mut vt = vec![0.0; n * n];
    for i in 0..n {
        vt[i * n + i] = 1.0;
    }
    let total: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let rel = f64::EPSILON * (n.max(1) as f64);
    let floor = 1e-17 * total;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * ld + q];
                let app = m[p * ld + p];
                let aqq = m[q * ld + q];
                if apq.abs() <= floor.max(rel * (app * aqq).abs().sqrt()) {
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // Rows p and q, then mirror into columns.
                for k in 0..n {
                    let mpk = m[p * ld + k];
                    let mqk = m[q * ld + k];
                    m[p * ld + k] = c * mpk - s * mqk;
                    m[q * ld + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    m[k * ld + p] = m[p * ld + k];
                    m[k * ld + q] = m[q * ld + k];
                }
                m[p * ld + p] = app - t * apq;
                m[q * ld + q] = aqq + t * apq;
                m[p * ld + q] = 0.0;
                m[q * ld + p] = 0.0;
                let (vp, vq) = if p < q {
                    let (lo, hi) = vt.split_at_mut(q * n);
                    (&mut lo[p * n..p * n + n], &mut hi[..n])
                } else {
                    unreachable!()
                };
                for k in 0..n {
                    let x = vp[k];
                    let y = vq[k];
                    vp[k] = c * x - s * y;
                    vq[k] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[y * ld + y].total_cmp(&m[x * ld + x]).then(x.cmp(&y)));
    let values = order.iter().map(|&i| m[i * ld + i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| vt[order[c] * n + r]);
    EigenPairs { values, vectors }
}

/// Relative residual at which a Ritz pair is locked.
const LOCK_TOL: f64 = 1e-11;
/// Residual bound every returned pair must meet, relative to ‖A‖_F.
pub const RESIDUAL_TOL: f64 = 1e-8;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let nrm = dot(v, v).sqrt();
    if nrm > 0.0 {
        for x in v.iter_mut() {
            *x /= nrm;
        }
    }
    nrm
}

/// Two passes of classical Gram-Schmidt against every vector in `bases`.
fn orthogonalize(v: &mut [f64], bases: &[&[Vec<f64>]]) {
    for _ in 0..2 {
        for basis in bases {
            for b in basis.iter() {
                let c = dot(v, b);
                axpy(-c, b, v);
            }
        }
    }
}

fn random_unit(rng: &mut ChaCha8Rng, n: usize, against: &[&[Vec<f64>]]) -> Option<Vec<f64>> {
    for _ in 0..8 {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        orthogonalize(&mut v, against);
        if normalize(&mut v) > 1e-8 {
            return Some(v);
        }
    }
    None
}

/// Top `d` eigenpairs by algebraic value.
pub fn top_eigenpairs(a: &SymmetricMatrix, d: usize, solver: EigenSolver, seed: u64) -> Result<EigenPairs> {
    let n = a.n();
    if d == 0 || d > n {
        return Err(Error::InvalidArgument(format!("need 1 <= d <= n, got d={d}, n={n}")));
    }
    let use_jacobi = match solver {
        EigenSolver::Jacobi => true,
        EigenSolver::Lanczos => false,
        EigenSolver::Auto => n <= DENSE_FALLBACK_LIMIT,
    };
    if use_jacobi {
        let all = jacobi_eigen(&a.to_dmatrix());
        return Ok(EigenPairs {
            values: all.values[..d].to_vec(),
            vectors: all.vectors.columns(0, d).into_owned(),
        });
    }
    lanczos_top(a, d, seed)
}

fn lanczos_top(a: &SymmetricMatrix, d: usize, seed: u64) -> Result<EigenPairs> {
    let n = a.n();
    let anorm = a.frobenius_norm();
    if anorm == 0.0 {
        // Zero matrix: any orthonormal set works.
        let vectors = DMatrix::from_fn(n, d, |i, j| if i == j { 1.0 } else { 0.0 });
        return Ok(EigenPairs {
            values: vec![0.0; d],
            vectors,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut locked_vals: Vec<f64> = Vec::new();
    let mut locked_vecs: Vec<Vec<f64>> = Vec::new();
    let mut m_steps = (2 * d + 20).max(40);
    let mut start: Option<Vec<f64>> = None;
    let mut worst_residual = f64::INFINITY;
    let mut av = vec![0.0; n];

    for _pass in 0..60 {
        let room = n - locked_vecs.len();
        if room == 0 {
            break;
        }
        let m_cap = m_steps.min(room);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m_cap);
        let mut alpha: Vec<f64> = Vec::with_capacity(m_cap);
        let mut beta: Vec<f64> = Vec::with_capacity(m_cap);
        let mut v = match start.take() {
            Some(mut s) => {
                orthogonalize(&mut s, &[&locked_vecs]);
                if normalize(&mut s) > 1e-8 {
                    s
                } else {
                    match random_unit(&mut rng, n, &[&locked_vecs]) {
                        Some(v) => v,
                        None => break,
                    }
                }
            }
            None => match random_unit(&mut rng, n, &[&locked_vecs]) {
                Some(v) => v,
                None => break,
            },
        };
        while basis.len() < m_cap {
            a.matvec(&v, &mut av);
            let al = dot(&v, &av);
            let mut w = av.clone();
            basis.push(v);
            alpha.push(al);
            orthogonalize(&mut w, &[&locked_vecs, &basis]);
            let b = normalize(&mut w);
            if basis.len() == m_cap {
                break;
            }
            if b <= 1e-12 * anorm {
                // Invariant subspace found: continue with a fresh direction.
                match random_unit(&mut rng, n, &[&locked_vecs, &basis]) {
                    Some(nv) => {
                        beta.push(0.0);
                        v = nv;
                    }
                    None => break,
                }
            } else {
                beta.push(b);
                v = w;
            }
        }
        let k = basis.len();
        let t = DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                alpha[i]
            } else if i + 1 == j {
                beta[i]
            } else if j + 1 == i {
                beta[j]
            } else {
                0.0
            }
        });
        let ritz = jacobi_eigen(&t);
        // Ritz vectors, residuals, locking in descending order.
        let mut newly_locked = 0;
        let mut first_unconverged: Option<Vec<f64>> = None;
        let locked_before = locked_vals.len();
        let mut pass_upper = f64::NEG_INFINITY;
        for c in 0..k {
            let theta = ritz.values[c];
            let mut y = vec![0.0; n];
            for (i, b) in basis.iter().enumerate() {
                axpy(ritz.vectors[(i, c)], b, &mut y);
            }
            orthogonalize(&mut y, &[&locked_vecs]);
            normalize(&mut y);
            a.matvec(&y, &mut av);
            let theta = {
                let rq = dot(&y, &av);
                if rq.is_finite() { rq } else { theta }
            };
            let res: f64 = av
                .iter()
                .zip(&y)
                .map(|(ay, yy)| (ay - theta * yy).powi(2))
                .sum::<f64>()
                .sqrt();
            if c == 0 {
                pass_upper = theta + res;
            }
            if res <= LOCK_TOL * anorm {
                locked_vals.push(theta);
                locked_vecs.push(y);
                newly_locked += 1;
            } else {
                worst_residual = worst_residual.min(res);
                first_unconverged = Some(y);
                break;
            }
            if locked_vecs.len() >= n || locked_vecs.len() >= d {
                break;
            }
        }
        // Done once a pass over the deflated space finds nothing above the
        // d-th eigenvalue locked before it.
        if locked_before >= d {
            let mut sorted = locked_vals[..locked_before].to_vec();
            sorted.sort_by(|x, y| y.total_cmp(x));
            if pass_upper <= sorted[d - 1] + 1e-10 * anorm {
                locked_vals.truncate(locked_before);
                locked_vecs.truncate(locked_before);
                break;
            }
        }
        if newly_locked == 0 {
            m_steps = (m_steps * 2).min(n);
        }
        start = first_unconverged;
    }

    if locked_vals.len() < d {
        return Err(Error::EigensolverStalled {
            residual: worst_residual / anorm,
        });
    }
    let mut order: Vec<usize> = (0..locked_vals.len()).collect();
    order.sort_by(|&x, &y| locked_vals[y].total_cmp(&locked_vals[x]).then(x.cmp(&y)));
    let values: Vec<f64> = order[..d].iter().map(|&i| locked_vals[i]).collect();
    let vectors = DMatrix::from_fn(n, d, |r, c| locked_vecs[order[c]][r]);
    Ok(EigenPairs { values, vectors })
}

/// Max over columns of ‖A u − λ u‖.
pub fn max_residual(a: &SymmetricMatrix, pairs: &EigenPairs) -> f64 {
    let n = a.n();
    let mut av = vec![0.0; n];
    let mut worst: f64 = 0.0;
    for (j, &lambda) in pairs.values.iter().enumerate() {
        let u: Vec<f64> = pairs.vectors.column(j).iter().copied().collect();
        a.matvec(&u, &mut av);
        let r: f64 = av.iter().zip(&u).map(|(x, y)| (x - lambda * y).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(r);
    }
    worst
}

pub fn column(m: &DMatrix<f64>, j: usize) -> DVector<f64> {
    m.column(j).into_owned()
}
