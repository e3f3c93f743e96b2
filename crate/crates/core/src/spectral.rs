//! Consistency and smoothness adjacency matrices, their scaled leading
//! eigenvector embeddings, and the perturbation experiment that compares a
//! corrupted consistency embedding with the clean one.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::PointAttributes;
use crate::geometry::{ConeDistance, NeighborGraph, PointCloud, Primitive, Vec3};
use crate::linalg::{max_residual, top_eigenpairs, EigenPairs, EigenSolver, SymmetricMatrix, RESIDUAL_TOL};

pub const DEFAULT_DENSE_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingScale {
    /// Column j is `sqrt(λ1/λj)·u_j`.
    #[default]
    Equalize,
    /// Column j is `sqrt(λj/λ1)·u_j`.
    Inverse,
}

#[derive(Debug, Clone)]
pub struct SpectralEmbedding {
    pub eigenvalues: Vec<f64>,
    /// Unit eigenvectors as columns.
    pub eigenvectors: DMatrix<f64>,
    /// Scaled feature matrix, n×d.
    pub features: DMatrix<f64>,
}

impl SpectralEmbedding {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    fn from_pairs(a: &SymmetricMatrix, pairs: EigenPairs, d: usize, scale: EmbeddingScale) -> Result<Self> {
        let anorm = a.frobenius_norm();
        let d = pairs.values.iter().take(d).take_while(|&&l| l > 1e-12 * anorm.max(1e-300)).count();
        if d == 0 {
            return Err(Error::InvalidArgument("matrix has no positive eigenvalues".into()));
        }
        let pairs = EigenPairs {
            values: pairs.values[..d].to_vec(),
            vectors: pairs.vectors.columns(0, d).into_owned(),
        };
        let res = max_residual(a, &pairs);
        if res > RESIDUAL_TOL * anorm {
            return Err(Error::EigensolverStalled { residual: res / anorm });
        }
        let gram = pairs.vectors.transpose() * &pairs.vectors;
        let ortho = (gram - DMatrix::identity(d, d)).amax();
        if ortho > 1e-8 {
            return Err(Error::EigensolverStalled { residual: ortho });
        }
        let l1 = pairs.values[0];
        let mut features = pairs.vectors.clone();
        for (j, &lj) in pairs.values.iter().enumerate() {
            let s = match scale {
                EmbeddingScale::Equalize => (l1 / lj).sqrt(),
                EmbeddingScale::Inverse => (lj / l1).sqrt(),
            };
            features.column_mut(j).scale_mut(s);
        }
        Ok(SpectralEmbedding {
            eigenvalues: pairs.values,
            eigenvectors: pairs.vectors,
            features,
        })
    }
}

/// Top-`d_max` embedding; eigenvalues that are not positive are dropped.
pub fn leading_eigs(a: &SymmetricMatrix, d_max: usize, solver: EigenSolver, seed: u64, scale: EmbeddingScale) -> Result<SpectralEmbedding> {
    let pairs = top_eigenpairs(a, d_max, solver, seed)?;
    SpectralEmbedding::from_pairs(a, pairs, d_max, scale)
}

/// Embedding whose dimension is chosen by [`select_embedding_dim`].
pub fn adaptive_embedding(
    a: &SymmetricMatrix,
    d_min: usize,
    d_max: usize,
    solver: EigenSolver,
    seed: u64,
    scale: EmbeddingScale,
) -> Result<SpectralEmbedding> {
    if d_min == 0 || d_min > d_max {
        return Err(Error::InvalidArgument(format!("need 1 <= d_min <= d_max, got {d_min}..{d_max}")));
    }
    let n = a.n();
    let want = (d_max + 1).min(n);
    let pairs = top_eigenpairs(a, want, solver, seed)?;
    let d = select_embedding_dim(&pairs.values, d_min.min(want), d_max.min(want));
    SpectralEmbedding::from_pairs(a, pairs, d, scale)
}

/// Relative eigenvalues below this fraction of `λ_1` count as zero.
const SELECT_FLOOR: f64 = 1e-3;

/// Argmax over `d ∈ [d_min, d_max]` of the relative drop `(λ_d − λ_{d+1})/λ_d`
/// (1-based; missing λ and λ below `1e-3·λ_1` count as 0 and are never
/// selected unless nothing else is); ties go to the smaller `d`.
pub fn select_embedding_dim(eigenvalues: &[f64], d_min: usize, d_max: usize) -> usize {
    let l1 = eigenvalues.first().copied().unwrap_or(0.0);
    if !(l1 > 0.0) {
        return d_min;
    }
    let at = |k: usize| {
        let v = eigenvalues.get(k - 1).copied().unwrap_or(0.0);
        if v >= SELECT_FLOOR * l1 {
            v
        } else {
            0.0
        }
    };
    let mut best = d_min;
    let mut best_gap = f64::NEG_INFINITY;
    for d in d_min..=d_max {
        let ld = at(d);
        let gap = if ld > 0.0 { (ld - at(d + 1)) / ld } else { -1.0 };
        if gap > best_gap {
            best_gap = gap;
            best = d;
        }
    }
    best
}

/// `exp(−d²/(2σ²))` with `d` the distance from `p` to the primitive of the
/// argmax type of `attrs`; zero when that type has no usable analytic primitive.
pub fn consistency_weight(p: &Vec3, attrs: &PointAttributes, sigmas: &[f64; 6], cone: ConeDistance) -> f64 {
    match usable_primitive(attrs) {
        Some((prim, sigma)) => kernel(prim.distance_with(p, cone), sigmas[sigma]),
        None => 0.0,
    }
}

fn kernel(d: f64, sigma: f64) -> f64 {
    (-d * d / (2.0 * sigma * sigma)).exp()
}

fn usable_primitive(attrs: &PointAttributes) -> Option<(Primitive, usize)> {
    let ty = attrs.argmax_type();
    let prim = attrs.params.primitive(ty)?;
    prim.validate().ok()?;
    Some((prim, ty.code()))
}

/// `A(i,j) = (w(p_i,s_j) + w(p_j,s_i))/2`, diagonal 1.
pub fn build_consistency_matrix(
    cloud: &PointCloud,
    attrs: &[PointAttributes],
    sigmas: &[f64; 6],
    dense_cap: usize,
    cone: ConeDistance,
) -> Result<SymmetricMatrix> {
    let n = cloud.len();
    if n > dense_cap {
        return Err(Error::DenseCapExceeded { n, cap: dense_cap });
    }
    if attrs.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: attrs.len(),
        });
    }
    let prims: Vec<Option<(Primitive, usize)>> = attrs.iter().map(usable_primitive).collect();
    let pos = cloud.positions();
    // w[i*n + j] = w(p_i, s_j)
    let mut w = vec![0.0f64; n * n];
    w.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, x) in row.iter_mut().enumerate() {
            if let Some((prim, t)) = &prims[j] {
                *x = kernel(prim.distance_with(&pos[i], cone), sigmas[*t]);
            }
        }
    });
    Ok(SymmetricMatrix::dense_from_lower(n, |i, j| {
        if i == j {
            1.0
        } else {
            0.5 * (w[i * n + j] + w[j * n + i])
        }
    }))
}

/// kNN edges weighted by `exp(−‖n_i − n_j‖²/(2σ_e²))`, symmetrized by the max
/// over both directions; diagonal 0.
pub fn build_smoothness_matrix(cloud: &PointCloud, graph: &NeighborGraph, sigma_e: f64) -> Result<SymmetricMatrix> {
    let normals = cloud.normals().ok_or(Error::NormalsRequired)?;
    let n = cloud.len();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        for &j in graph.neighbors(i) {
            let d2 = (normals[i] - normals[j]).norm_squared();
            let wt = (-d2 / (2.0 * sigma_e * sigma_e)).exp();
            rows[i].push((j, wt));
            rows[j].push((i, wt));
        }
    }
    for r in rows.iter_mut() {
        r.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)));
        r.dedup_by_key(|e| e.0);
    }
    Ok(SymmetricMatrix::sparse(n, rows))
}

/// `min_{R∈O(K)} ‖U R − V‖_F` via the singular values of `VᵀU`.
pub fn procrustes_distance(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<f64> {
    if u.shape() != v.shape() {
        return Err(Error::InvalidArgument(format!("shape mismatch {:?} vs {:?}", u.shape(), v.shape())));
    }
    // Align with the polar factor of VᵀU and measure the residual directly;
    // the closed form ‖U‖² + ‖V‖² − 2Σσ loses half the digits to cancellation.
    let svd = (v.transpose() * u).svd(true, true);
    let (Some(w), Some(zt)) = (svd.u, svd.v_t) else {
        return Err(Error::InvalidArgument("SVD failed in Procrustes alignment".into()));
    };
    Ok((u - v * (w * zt)).norm())
}

/// `sqrt(λ1)·‖E‖_F / (λ_K − λ_{K+1})` with eigenvalues of the clean matrix in
/// descending order (a missing `λ_{K+1}` counts as 0).
pub fn dk_bound(clean_eigs: &[f64], e_frobenius: f64, k: usize) -> Result<f64> {
    if k == 0 || k > clean_eigs.len() {
        return Err(Error::InvalidArgument(format!("K={k} outside the spectrum")));
    }
    let gap = clean_eigs[k - 1] - clean_eigs.get(k).copied().unwrap_or(0.0);
    if !(gap > 0.0) {
        return Err(Error::DegenerateGap);
    }
    Ok(clean_eigs[0].max(0.0).sqrt() * e_frobenius / gap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DKReport {
    pub trial: usize,
    pub n: usize,
    pub k: usize,
    pub rho: f64,
    pub procrustes_error: f64,
    /// Procrustes error divided by ‖U^g‖_F.
    pub relative_error: f64,
    pub bound: f64,
    pub eigengap: f64,
    pub frobenius_e: f64,
    /// Error proxy of the raw corrupted parameters, `sqrt(ρ)`.
    pub param_error: f64,
}

/// Block labels and corrupted parameter labels for one trial: a corrupted
/// point carries the parameters of a uniformly chosen other block.
fn corrupted_labels(n: usize, k: usize, rho: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let block = n / k;
    let labels: Vec<usize> = (0..n).map(|i| i / block).collect();
    let mut params = labels.clone();
    let m = (rho * n as f64).floor() as usize;
    if k > 1 {
        for i in sample(rng, n, m.min(n)).into_iter() {
            let shift = rng.random_range(1..k);
            params[i] = (labels[i] + shift) % k;
        }
    }
    (labels, params)
}

/// Runs the perturbation experiment on `K` equal blocks of `n/K` points.
///
/// The clean matrix is all-ones on blocks. Each point `j` carries a parameter
/// label; point `i` fits it (`w(p_i, s_j) = 1`) iff the labels agree. The
/// corrupted matrix symmetrizes these binary weights with diagonal 1. The clean
/// embedding is known in closed form: eigenvalue `n/K` with multiplicity `K`
/// and scaled block indicators as eigenvectors.
pub fn dk_experiment(n: usize, k: usize, rho: f64, trials: usize, seed: u64, solver: EigenSolver, scale: EmbeddingScale) -> Result<Vec<DKReport>> {
    if k == 0 || n == 0 || n % k != 0 {
        return Err(Error::InvalidArgument(format!("K={k} must divide n={n}")));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("rho={rho} outside [0, 1)")));
    }
    let block = n / k;
    let lambda = block as f64;
    let mut clean_eigs = vec![lambda; k];
    clean_eigs.push(0.0);
    let ug = DMatrix::from_fn(n, k, |i, j| if i / block == j { 1.0 / (block as f64).sqrt() } else { 0.0 });
    let ug_norm = ug.norm();
    (0..trials)
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let (labels, params) = corrupted_labels(n, k, rho, &mut rng);
            let a = SymmetricMatrix::dense_from_lower(n, |i, j| {
                if i == j {
                    1.0
                } else {
                    0.5 * (f64::from(labels[i] == params[j]) + f64::from(labels[j] == params[i]))
                }
            });
            // E = A − A^g computed entrywise without materializing A^g.
            let mut e2 = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let g = f64::from(labels[i] == labels[j]);
                    e2 += (a.get(i, j) - g).powi(2);
                }
            }
            let frobenius_e = e2.sqrt();
            // With nothing corrupted the matrix is the clean one, whose embedding is exact.
            let err = if frobenius_e == 0.0 {
                0.0
            } else {
                let emb = leading_eigs(&a, k, solver, seed ^ trial as u64, scale)?;
                if emb.dim() < k {
                    return Err(Error::InvalidArgument("corrupted matrix has fewer than K positive eigenvalues".into()));
                }
                procrustes_distance(&emb.features, &ug)?
            };
            let bound = dk_bound(&clean_eigs, frobenius_e, k)?;
            Ok(DKReport {
                trial,
                n,
                k,
                rho,
                procrustes_error: err,
                relative_error: err / ug_norm,
                bound,
                eigengap: lambda,
                frobenius_e,
                param_error: rho.sqrt(),
            })
        })
        .collect()
}
